mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use kgfuse::autodiff::{grad_check_params, Coords};
use kgfuse::fusion::FusionMode;
use kgfuse::transformer::{next_token_loss, AttentionMode, Batch, NoHooks, TransformerModel};

use common::*;

const SEEDS: u64 = 20;

#[test]
fn every_op_on_twenty_seeds() {
    for seed in 0..SEEDS {
        for (op, rep) in op_suite(seed) {
            assert!(rep.passed(), "{op} seed {seed}: {rep:?}");
        }
    }
}

#[test]
fn full_lm_forward_and_loss() {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let m = TransformerModel::init(tiny_config(11, AttentionMode::Causal), &mut r).unwrap();
    let batch = Batch::from_sequences(&[vec![5, 6, 7, 8, 4], vec![9, 10, 4]]);
    let rep = grad_check_params(
        &m.params,
        |tape, p| {
            let out = m.forward(tape, p, &batch, &mut NoHooks, None)?;
            next_token_loss(tape, out.logits, &batch)
        },
        GRAD_EPS,
        GRAD_TOL,
        Coords::All,
        &mut r,
    )
    .unwrap();
    assert!(rep.passed(), "{rep:?}");
}

fn fused(mode: FusionMode) {
    for seed in 0..4 {
        let w = world(seed, 12);
        let rep = fused_grad_check(&w, mode, seed, 6);
        assert!(rep.passed(), "{mode} seed {seed}: {rep:?}");
    }
}

#[test]
fn fused_gated_injection() {
    fused(FusionMode::GatedInjection);
}

#[test]
fn fused_kg_attention_layer() {
    fused(FusionMode::KgAttentionLayer);
}

#[test]
fn fused_cross_layer_adapter() {
    fused(FusionMode::CrossLayerAdapter);
}

#[test]
fn fused_dedicated_head() {
    fused(FusionMode::DedicatedHead);
}

#[test]
fn scorer_loss() {
    for seed in 0..4 {
        let rep = scorer_grad_check(&world(seed, 12), seed, 6);
        assert!(rep.passed(), "seed {seed}: {rep:?}");
    }
}
