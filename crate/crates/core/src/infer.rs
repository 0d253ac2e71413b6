//! Inference pipelines built on the incremental decoder: conditioned shape
//! generation and greedy captioning of encoded point clouds.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::flow::{generate_block, FlowSchedule};
use crate::layout::Modality;
use crate::model::{decode_step_serial, finalize_block, ForwardState, ModelParams};
use crate::numerics::Tensor;
use crate::worldgen::{condition_tokens, vocab, Codec, LatentBlock, PointCloud, ShapeSpec};

/// Generated latent blocks plus the forward-pass count that produced them.
pub struct GenerationReport {
    pub blocks: Vec<LatentBlock>,
    pub velocity_passes: usize,
}

/// Decode `n_blocks` latent blocks autoregressively, optionally after a
/// serial condition prefix. Guidance engages only when a condition is
/// present and the schedule's scale is not 1.
pub fn generate_latent_sequence(
    params: &ModelParams<f32>,
    condition: Option<&[usize]>,
    n_blocks: usize,
    block_size: usize,
    schedule: &FlowSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<GenerationReport> {
    schedule.validate()?;
    if n_blocks == 0 || block_size == 0 {
        return Err(Error::Contract("need at least one block of positive size".into()));
    }
    let guided = condition.is_some() && schedule.cfg_scale != 1.0;
    let mut state = ForwardState::new(&params.config, guided)?;
    if let Some(tokens) = condition {
        for &t in tokens {
            decode_step_serial(params, &mut state, t, Modality::Condition)?;
        }
    }
    let mut blocks = Vec::with_capacity(n_blocks);
    for _ in 0..n_blocks {
        let latents =
            generate_block(params, &mut state, block_size, schedule, condition.is_some(), rng)?;
        blocks.push(LatentBlock { tokens: latents.cast::<f64>() });
    }
    Ok(GenerationReport { blocks, velocity_passes: state.velocity_passes() })
}

/// Generate a point cloud conditioned on a shape description. The output
/// is unit-normalized; raw decoded points are unconstrained.
pub fn sample_shape(
    params: &ModelParams<f32>,
    codec: &Codec,
    spec: &ShapeSpec,
    n_points: usize,
    block_size: usize,
    schedule: &FlowSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<PointCloud> {
    spec.validate()?;
    if block_size == 0 || n_points % block_size != 0 {
        return Err(Error::Contract(format!(
            "point count {n_points} is not divisible by block size {block_size}"
        )));
    }
    let tokens = condition_tokens(spec);
    let report = generate_latent_sequence(
        params,
        Some(&tokens),
        n_points / block_size,
        block_size,
        schedule,
        rng,
    )?;
    let mut points = Vec::with_capacity(n_points);
    for block in &report.blocks {
        points.extend(codec.project(block)?);
    }
    PointCloud::normalized(points)
}

/// Greedy-decode condition tokens for an encoded point cloud. The blocks
/// enter the context as clean latents; decoding starts from BOS and stops
/// at EOS or `max_tokens`. Returns the full sequence including BOS.
pub fn caption_cloud(
    params: &ModelParams<f32>,
    codec: &Codec,
    cloud: &PointCloud,
    block_size: usize,
    max_tokens: usize,
) -> Result<Vec<usize>> {
    if block_size == 0 || cloud.len() % block_size != 0 {
        return Err(Error::Contract(format!(
            "cloud of {} points is not divisible by block size {block_size}",
            cloud.len()
        )));
    }
    if max_tokens == 0 {
        return Err(Error::Contract("max_tokens must be positive".into()));
    }
    let mut state = ForwardState::new(&params.config, false)?;
    let encoded = codec.encode(cloud);
    let latents = encoded.tokens.cast::<f32>();
    let dim = codec.latent_dim();
    let data = latents.data();
    for chunk in 0..cloud.len() / block_size {
        let rows = &data[chunk * block_size * dim..(chunk + 1) * block_size * dim];
        let clean = Tensor::new(&[block_size, dim], rows.to_vec())?;
        finalize_block(params, &mut state, &clean)?;
    }

    let mut tokens = vec![vocab::BOS];
    let mut current = vocab::BOS;
    for _ in 0..max_tokens {
        let logits = decode_step_serial(params, &mut state, current, Modality::Condition)?;
        let next = argmax(logits.data());
        tokens.push(next);
        if next == vocab::EOS {
            break;
        }
        current = next;
    }
    Ok(tokens)
}

/// Lowest index wins ties, so decoding is deterministic.
fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
