//! Shared fixtures for the criterion benches: a mid-sized model and
//! ready-made mixed layouts so each bench measures compute, not setup.

use hseq_core::layout::{Modality, Mode, SequenceLayout};
use hseq_core::model::{ModelConfig, ModelParams, Precision, SegmentInput};
use hseq_core::numerics::Tensor;
use hseq_core::worldgen::{self, vocab};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn bench_config() -> ModelConfig {
    ModelConfig {
        d_model: 64,
        n_layers: 2,
        n_heads: 4,
        n_kv_heads: 2,
        d_ff: 128,
        vocab_size: vocab::SIZE,
        latent_dim: worldgen::LATENT_DIM,
        rope_base: 10_000.0,
        adaln_enabled: true,
        precision: Precision::F32,
    }
}

pub fn bench_params(seed: u64) -> ModelParams<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ModelParams::init(&bench_config(), &mut rng).expect("valid config")
}

/// Condition prefix plus `n_blocks` parallel latent blocks, with inputs
/// drawn from a fixed seed.
pub fn mixed_inputs(
    n_blocks: usize,
    block_size: usize,
) -> (SequenceLayout, Vec<SegmentInput<f32>>) {
    let mut parts = vec![(Modality::Condition, Mode::Serial, 3usize)];
    for _ in 0..n_blocks {
        parts.push((Modality::Latent3d, Mode::Parallel, block_size));
    }
    let layout = SequenceLayout::from_parts(&parts).expect("valid layout");

    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut inputs = vec![SegmentInput::tokens(vec![vocab::BOS, vocab::SPHERE, 5])];
    for b in 0..n_blocks {
        let data: Vec<f32> = (0..block_size * worldgen::LATENT_DIM)
            .map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0))
            .collect();
        let x_t = Tensor::new(&[block_size, worldgen::LATENT_DIM], data).unwrap();
        inputs.push(SegmentInput::latents(x_t, 0.3 + 0.1 * b as f64));
    }
    (layout, inputs)
}
