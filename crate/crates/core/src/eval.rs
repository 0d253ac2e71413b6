//! Desk-scale scoring: conditioned generation judged by Chamfer distance
//! and nearest-template family classification, plus caption accuracy on
//! held-out clouds. Both the CLI pilot tooling and the acceptance tests
//! drive these, so the metric definitions live in one place.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::flow::FlowSchedule;
use crate::infer::{caption_cloud, sample_shape};
use crate::model::ModelParams;
use crate::worldgen::{
    chamfer, dequantize_param, sample_surface, vocab, Codec, ShapeFamily, ShapeSpec,
};

/// Decode budget for captions; the longest valid condition is 6 tokens.
const CAPTION_CAP: usize = 16;

/// `per_family` specs for every family, parameters drawn uniformly over
/// quantization bins and placed at bin centers, so each spec is exactly
/// representable by its condition tokens.
pub fn bin_center_specs(per_family: usize, rng: &mut ChaCha8Rng) -> Result<Vec<ShapeSpec>> {
    let mut specs = Vec::with_capacity(per_family * ShapeFamily::ALL.len());
    for family in ShapeFamily::ALL {
        let scale = family.param_scale();
        for _ in 0..per_family {
            let params: Vec<f64> = (0..family.n_params())
                .map(|_| dequantize_param(rng.gen_range(0..vocab::PARAM_BINS), scale))
                .collect();
            specs.push(ShapeSpec::from_params(family, &params)?);
        }
    }
    Ok(specs)
}

#[derive(Clone, Debug)]
pub struct GenerationScore {
    pub mean_chamfer: f64,
    /// Fraction whose nearest template (by Chamfer) shares the
    /// conditioned family.
    pub family_accuracy: f64,
    /// Chamfer of each sample against its own template, in spec order.
    pub chamfers: Vec<f64>,
}

/// Generate one cloud per spec and score against surface templates drawn
/// from a disjoint RNG stream. Deterministic in (params, specs, seed).
pub fn score_generation(
    params: &ModelParams<f32>,
    codec: &Codec,
    specs: &[ShapeSpec],
    n_points: usize,
    block_size: usize,
    schedule: &FlowSchedule,
    seed: u64,
) -> Result<GenerationScore> {
    if specs.is_empty() {
        return Err(Error::Contract("score_generation needs at least one spec".into()));
    }
    let mut gen_rng = ChaCha8Rng::seed_from_u64(seed);
    gen_rng.set_stream(3);
    let mut tmpl_rng = ChaCha8Rng::seed_from_u64(seed);
    tmpl_rng.set_stream(4);

    let mut clouds = Vec::with_capacity(specs.len());
    let mut templates = Vec::with_capacity(specs.len());
    for spec in specs {
        clouds.push(sample_shape(params, codec, spec, n_points, block_size, schedule, &mut gen_rng)?);
        templates.push(sample_surface(spec, n_points, &mut tmpl_rng)?);
    }

    let mut chamfers = Vec::with_capacity(specs.len());
    let mut hits = 0usize;
    for (i, cloud) in clouds.iter().enumerate() {
        let mut best = (f64::INFINITY, 0usize);
        for (j, template) in templates.iter().enumerate() {
            let d = chamfer(cloud, template);
            if d < best.0 {
                best = (d, j);
            }
            if j == i {
                chamfers.push(d);
            }
        }
        if specs[best.1].family() == specs[i].family() {
            hits += 1;
        }
    }
    Ok(GenerationScore {
        mean_chamfer: chamfers.iter().sum::<f64>() / chamfers.len() as f64,
        family_accuracy: hits as f64 / specs.len() as f64,
        chamfers,
    })
}

/// Caption freshly drawn surface clouds (never seen in training) and
/// report the fraction whose decoded family token matches.
pub fn score_caption(
    params: &ModelParams<f32>,
    codec: &Codec,
    specs: &[ShapeSpec],
    n_points: usize,
    block_size: usize,
    seed: u64,
) -> Result<f64> {
    if specs.is_empty() {
        return Err(Error::Contract("score_caption needs at least one spec".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(5);
    let mut hits = 0usize;
    for spec in specs {
        let cloud = sample_surface(spec, n_points, &mut rng)?;
        let tokens = caption_cloud(params, codec, &cloud, block_size, CAPTION_CAP)?;
        if tokens.get(1).copied() == Some(vocab::family_token(spec.family())) {
            hits += 1;
        }
    }
    Ok(hits as f64 / specs.len() as f64)
}
