mod common;

use common::gradcheck::worst_gradient_error;
use hydra_plan::model::{EnvEncoder, HeadLayout};

fn check(heads: HeadLayout, encoder: EnvEncoder, ffn_hidden: usize, draw: u64) {
    let (err, at) = worst_gradient_error(heads, encoder, ffn_hidden, draw);
    assert!(err < 1e-4, "draw {draw}: worst relative error {err:e} at {at}");
}

#[test]
fn multi_target_gradients_match_finite_differences() {
    for draw in 0..5 {
        check(HeadLayout::MultiTarget, EnvEncoder::Patch { size: 4 }, 6, draw);
    }
}

#[test]
fn pdm_only_gradients_match_finite_differences() {
    for draw in 0..2 {
        check(HeadLayout::PdmOnly, EnvEncoder::Patch { size: 8 }, 6, 10 + draw);
    }
}

#[test]
fn global_encoder_gradients_match_finite_differences() {
    for draw in 0..2 {
        check(HeadLayout::MultiTarget, EnvEncoder::Global { tokens: 3 }, 0, 20 + draw);
    }
}
