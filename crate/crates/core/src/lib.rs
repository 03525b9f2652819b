pub mod error;
pub mod geom;
pub mod infer;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod train;
pub mod util;
pub mod vocab;
pub mod world;

pub use error::{Error, Result};
