use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{EnvEncoder, ModelConfig};
use crate::world::EGO_STATUS_DIM;

/// One named tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub role: String,
    pub offset: usize,
    /// `(rows, cols)`; biases have `cols == 1`.
    pub shape: (usize, usize),
    pub(crate) init_gain: f64,
    bias: bool,
}

impl Block {
    pub fn len(&self) -> usize {
        self.shape.0 * self.shape.1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }

    pub fn is_bias(&self) -> bool {
        self.bias
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamLayout {
    blocks: Vec<Block>,
    total: usize,
    encoder_layers: usize,
}

impl ParamLayout {
    pub fn for_config(c: &ModelConfig) -> Self {
        let mut layout = Self {
            blocks: Vec::new(),
            total: 0,
            encoder_layers: 0,
        };
        let d = c.d_model;
        let (_, n_in, n_out) = c.encoder_shape();
        let mut widths = vec![n_in];
        widths.extend(&c.encoder_hidden);
        widths.push(n_out);
        for (l, w) in widths.windows(2).enumerate() {
            layout.push(format!("enc.{l}.w"), (w[1], w[0]), 1.0, false);
            layout.push(format!("enc.{l}.b"), (w[1], 1), 0.0, true);
        }
        layout.encoder_layers = widths.len() - 1;
        if let EnvEncoder::Patch { .. } = c.encoder {
            layout.push("enc.pos".into(), (c.n_tokens(), d), 1.0, false);
        }
        layout.push("ego.w".into(), (d, EGO_STATUS_DIM), 1.0, false);
        layout.push("ego.b".into(), (d, 1), 0.0, true);
        layout.push("traj.0.w".into(), (c.traj_hidden, c.traj_dim()), 1.0, false);
        layout.push("traj.0.b".into(), (c.traj_hidden, 1), 0.0, true);
        layout.push("traj.1.w".into(), (d, c.traj_hidden), 1.0, false);
        layout.push("traj.1.b".into(), (d, 1), 0.0, true);
        for role in ["attn.q", "attn.k", "attn.v"] {
            layout.push(role.into(), (d, d), 1.0, false);
        }
        if c.ffn_hidden > 0 {
            layout.push("ffn.0.w".into(), (c.ffn_hidden, d), 1.0, false);
            layout.push("ffn.0.b".into(), (c.ffn_hidden, 1), 0.0, true);
            layout.push("ffn.1.w".into(), (d, c.ffn_hidden), 1.0, false);
            layout.push("ffn.1.b".into(), (d, 1), 0.0, true);
        }
        layout.push("head.im.w".into(), (1, d), 1.0, false);
        layout.push("head.im.b".into(), (1, 1), 0.0, true);
        layout.push("head.metric.w".into(), (c.heads.num_heads(), d), 1.0, false);
        layout.push("head.metric.b".into(), (c.heads.num_heads(), 1), 0.0, true);
        layout
    }

    fn push(&mut self, role: String, shape: (usize, usize), init_gain: f64, bias: bool) {
        let block = Block {
            role,
            offset: self.total,
            shape,
            init_gain,
            bias,
        };
        self.total += block.len();
        self.blocks.push(block);
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn encoder_layers(&self) -> usize {
        self.encoder_layers
    }

    /// Panics on an unknown role; roles are fixed by the architecture.
    pub fn block(&self, role: &str) -> &Block {
        self.blocks
            .iter()
            .find(|b| b.role == role)
            .unwrap_or_else(|| panic!("no parameter block named {role}"))
    }

    /// Role of the block that owns flat index `i`.
    pub fn role_of(&self, i: usize) -> &str {
        self.blocks
            .iter()
            .find(|b| b.range().contains(&i))
            .map(|b| b.role.as_str())
            .unwrap_or("<out of range>")
    }
}
