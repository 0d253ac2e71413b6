//! Procedural shape world: analytic surfaces sampled uniformly by area, an
//! exactly invertible linear codec standing in for a learned latent
//! encoder, Chamfer evaluation, and the dataset builder that turns shapes
//! into condition tokens plus latent blocks.

use std::io::{self, BufRead, Write};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{Modality, Mode, SequenceLayout};
use crate::numerics::Tensor;

pub type Point3 = [f64; 3];

/// Latent width of the fixed codec.
pub const LATENT_DIM: usize = 64;

/// Seed of the canonical frozen codec. Never trained, never reseeded.
const CODEC_SEED: u64 = 0x3d_c0dec;

const BALL_SLACK: f64 = 1e-6;

/// Token ids shared by the dataset builder, the sampler, and captioning.
pub mod vocab {
    use super::ShapeFamily;

    pub const BOS: usize = 0;
    pub const EOS: usize = 1;
    pub const SPHERE: usize = 2;
    pub const BOX: usize = 3;
    pub const CYLINDER: usize = 4;
    pub const PARAM_BASE: usize = 5;
    pub const PARAM_BINS: usize = 8;
    /// Smallest vocab that fits every condition token.
    pub const SIZE: usize = PARAM_BASE + PARAM_BINS;

    pub fn family_token(family: ShapeFamily) -> usize {
        match family {
            ShapeFamily::Sphere => SPHERE,
            ShapeFamily::Box => BOX,
            ShapeFamily::Cylinder => CYLINDER,
        }
    }

    pub fn family_from_token(token: usize) -> Option<ShapeFamily> {
        match token {
            SPHERE => Some(ShapeFamily::Sphere),
            BOX => Some(ShapeFamily::Box),
            CYLINDER => Some(ShapeFamily::Cylinder),
            _ => None,
        }
    }

    /// Human-readable name for logs and caption output.
    pub fn token_name(token: usize) -> String {
        match token {
            BOS => "bos".into(),
            EOS => "eos".into(),
            SPHERE | BOX | CYLINDER => {
                family_from_token(token).expect("family range").name().into()
            }
            t if (PARAM_BASE..SIZE).contains(&t) => format!("bin{}", t - PARAM_BASE),
            t => format!("tok{t}"),
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeFamily {
    Sphere,
    Box,
    Cylinder,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 3] = [ShapeFamily::Sphere, ShapeFamily::Box, ShapeFamily::Cylinder];

    pub fn name(self) -> &'static str {
        match self {
            ShapeFamily::Sphere => "sphere",
            ShapeFamily::Box => "box",
            ShapeFamily::Cylinder => "cylinder",
        }
    }

    pub fn parse(s: &str) -> Option<ShapeFamily> {
        match s {
            "sphere" => Some(ShapeFamily::Sphere),
            "box" => Some(ShapeFamily::Box),
            "cylinder" => Some(ShapeFamily::Cylinder),
            _ => None,
        }
    }

    pub fn n_params(self) -> usize {
        match self {
            ShapeFamily::Sphere => 1,
            ShapeFamily::Box => 3,
            ShapeFamily::Cylinder => 2,
        }
    }

    /// Per-parameter range cap so that any bin combination keeps the
    /// bounding radius at or under 1.
    pub fn param_scale(self) -> f64 {
        1.0 / (self.n_params() as f64).sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum ShapeSpec {
    Sphere { radius: f64 },
    Box { half_extents: [f64; 3] },
    Cylinder { radius: f64, half_height: f64 },
}

impl ShapeSpec {
    pub fn family(&self) -> ShapeFamily {
        match self {
            ShapeSpec::Sphere { .. } => ShapeFamily::Sphere,
            ShapeSpec::Box { .. } => ShapeFamily::Box,
            ShapeSpec::Cylinder { .. } => ShapeFamily::Cylinder,
        }
    }

    pub fn params(&self) -> Vec<f64> {
        match *self {
            ShapeSpec::Sphere { radius } => vec![radius],
            ShapeSpec::Box { half_extents } => half_extents.to_vec(),
            ShapeSpec::Cylinder { radius, half_height } => vec![radius, half_height],
        }
    }

    pub fn from_params(family: ShapeFamily, params: &[f64]) -> Result<ShapeSpec> {
        let spec = match (family, params) {
            (ShapeFamily::Sphere, &[radius]) => ShapeSpec::Sphere { radius },
            (ShapeFamily::Box, &[a, b, c]) => ShapeSpec::Box { half_extents: [a, b, c] },
            (ShapeFamily::Cylinder, &[radius, half_height]) => {
                ShapeSpec::Cylinder { radius, half_height }
            }
            _ => {
                return Err(Error::Contract(format!(
                    "{} takes {} parameters, got {}",
                    family.name(),
                    family.n_params(),
                    params.len()
                )))
            }
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn bounding_radius(&self) -> f64 {
        match *self {
            ShapeSpec::Sphere { radius } => radius,
            ShapeSpec::Box { half_extents: [a, b, c] } => (a * a + b * b + c * c).sqrt(),
            ShapeSpec::Cylinder { radius, half_height } => {
                (radius * radius + half_height * half_height).sqrt()
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let params = self.params();
        if params.iter().any(|&p| !(p > 0.0) || !p.is_finite()) {
            return Err(Error::Contract(format!(
                "{} parameters must be positive and finite: {params:?}",
                self.family().name()
            )));
        }
        if self.bounding_radius() > 1.0 {
            return Err(Error::Contract(format!(
                "{} with bounding radius {:.4} leaves the unit ball",
                self.family().name(),
                self.bounding_radius()
            )));
        }
        Ok(())
    }
}

/// Parameter bin index for a value in `(0, scale]`, 1/PARAM_BINS wide.
pub fn quantize_param(value: f64, scale: f64) -> usize {
    let b = (value / scale * vocab::PARAM_BINS as f64).floor();
    (b.max(0.0) as usize).min(vocab::PARAM_BINS - 1)
}

/// Center of a parameter bin, the exact value the dataset builder uses.
pub fn dequantize_param(bin: usize, scale: f64) -> f64 {
    (bin as f64 + 0.5) / vocab::PARAM_BINS as f64 * scale
}

/// Serial condition prefix: BOS, family token, one bin token per parameter.
pub fn condition_tokens(spec: &ShapeSpec) -> Vec<usize> {
    let scale = spec.family().param_scale();
    let mut out = vec![vocab::BOS, vocab::family_token(spec.family())];
    for p in spec.params() {
        out.push(vocab::PARAM_BASE + quantize_param(p, scale));
    }
    out
}

/// Recover a bin-center spec from a condition token sequence (the inverse
/// of `condition_tokens` on bin centers). Ignores a trailing EOS.
pub fn spec_from_tokens(tokens: &[usize]) -> Result<ShapeSpec> {
    let tokens = match tokens.split_last() {
        Some((&last, rest)) if last == vocab::EOS => rest,
        _ => tokens,
    };
    if tokens.len() < 2 || tokens[0] != vocab::BOS {
        return Err(Error::Contract("condition tokens must start with BOS".into()));
    }
    let family = vocab::family_from_token(tokens[1])
        .ok_or_else(|| Error::Contract(format!("token {} is not a shape family", tokens[1])))?;
    let bins = &tokens[2..];
    if bins.len() != family.n_params() {
        return Err(Error::Contract(format!(
            "{} takes {} parameter tokens, got {}",
            family.name(),
            family.n_params(),
            bins.len()
        )));
    }
    let scale = family.param_scale();
    let mut params = Vec::with_capacity(bins.len());
    for &b in bins {
        if !(vocab::PARAM_BASE..vocab::PARAM_BASE + vocab::PARAM_BINS).contains(&b) {
            return Err(Error::Contract(format!("token {b} is not a parameter bin")));
        }
        params.push(dequantize_param(b - vocab::PARAM_BASE, scale));
    }
    ShapeSpec::from_params(family, &params)
}

/// Finite points inside the closed unit ball (small slack for rounding).
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Contract("point cloud needs at least one point".into()));
        }
        for (i, p) in points.iter().enumerate() {
            if !p.iter().all(|c| c.is_finite()) {
                return Err(Error::NonFinite(format!("point {i} is not finite: {p:?}")));
            }
            let n = norm(p);
            if n > 1.0 + BALL_SLACK {
                return Err(Error::Contract(format!(
                    "point {i} at distance {n:.4} leaves the unit ball"
                )));
            }
        }
        Ok(PointCloud { points })
    }

    /// Scale into the unit ball when needed; for decoded model output,
    /// which carries no bound of its own.
    pub fn normalized(points: Vec<Point3>) -> Result<Self> {
        let max = points.iter().map(|p| norm(p)).fold(0.0, f64::max);
        if !max.is_finite() {
            return Err(Error::NonFinite("cannot normalize non-finite points".into()));
        }
        if max <= 1.0 {
            return PointCloud::new(points);
        }
        let inv = 1.0 / max;
        PointCloud::new(points.iter().map(|p| [p[0] * inv, p[1] * inv, p[2] * inv]).collect())
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

fn norm(p: &Point3) -> f64 {
    (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
}

/// `n` points uniform by surface area.
pub fn sample_surface<R: Rng + ?Sized>(
    spec: &ShapeSpec,
    n: usize,
    rng: &mut R,
) -> Result<PointCloud> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Contract("sample_surface needs n >= 1".into()));
    }
    let points = (0..n)
        .map(|_| match *spec {
            ShapeSpec::Sphere { radius } => sphere_point(radius, rng),
            ShapeSpec::Box { half_extents } => box_point(half_extents, rng),
            ShapeSpec::Cylinder { radius, half_height } => {
                cylinder_point(radius, half_height, rng)
            }
        })
        .collect();
    PointCloud::new(points)
}

fn sphere_point<R: Rng + ?Sized>(radius: f64, rng: &mut R) -> Point3 {
    // Normalized Gaussian direction; degenerate draws are re-rolled.
    loop {
        let g: [f64; 3] = [
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        ];
        let n = norm(&g);
        if n > 1e-12 {
            return [g[0] / n * radius, g[1] / n * radius, g[2] / n * radius];
        }
    }
}

fn box_point<R: Rng + ?Sized>([a, b, c]: [f64; 3], rng: &mut R) -> Point3 {
    // Face pair areas; each pair splits evenly by sign.
    let areas = [b * c, a * c, a * b];
    let total: f64 = areas.iter().sum();
    let mut pick = rng.gen_range(0.0..total);
    let mut axis = 0;
    for (i, &ar) in areas.iter().enumerate() {
        if pick < ar || i == 2 {
            axis = i;
            break;
        }
        pick -= ar;
    }
    let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
    let u = rng.gen_range(-1.0..1.0);
    let v = rng.gen_range(-1.0..1.0);
    match axis {
        0 => [sign * a, u * b, v * c],
        1 => [u * a, sign * b, v * c],
        _ => [u * a, v * b, sign * c],
    }
}

fn cylinder_point<R: Rng + ?Sized>(r: f64, h: f64, rng: &mut R) -> Point3 {
    let side = 4.0 * std::f64::consts::PI * r * h;
    let caps = 2.0 * std::f64::consts::PI * r * r;
    let theta = rng.gen_range(0.0..std::f64::consts::TAU);
    if rng.gen_range(0.0..side + caps) < side {
        let z = rng.gen_range(-h..h);
        [r * theta.cos(), r * theta.sin(), z]
    } else {
        let rho = r * rng.gen::<f64>().sqrt();
        let z = if rng.gen::<bool>() { h } else { -h };
        [rho * theta.cos(), rho * theta.sin(), z]
    }
}

/// One parallel segment of codec latents, `[n_points, latent_dim]`.
#[derive(Clone, Debug)]
pub struct LatentBlock {
    pub tokens: Tensor<f64>,
}

impl LatentBlock {
    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn latent_dim(&self) -> usize {
        self.tokens.shape()[1]
    }
}

/// Frozen affine lift `R^3 -> R^dim` with an exact left inverse: scaled
/// orthonormal columns, zero offset. Never touched by training.
pub struct Codec {
    /// `[dim, 3]` row-major.
    forward: Vec<f64>,
    /// `[3, dim]` row-major left inverse.
    inverse: Vec<f64>,
    dim: usize,
}

impl Codec {
    /// The canonical codec every dataset and checkpoint assumes.
    pub fn fixed() -> Codec {
        Codec::with_dim(LATENT_DIM, CODEC_SEED).expect("fixed codec construction is infallible")
    }

    pub fn with_dim(dim: usize, seed: u64) -> Result<Codec> {
        if dim < 3 {
            return Err(Error::Config(format!("codec needs latent dim >= 3, got {dim}")));
        }
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Gram-Schmidt on three Gaussian columns in R^dim. Degeneracy has
        // probability zero but the loop guards it anyway.
        let mut cols: Vec<Vec<f64>> = Vec::with_capacity(3);
        while cols.len() < 3 {
            let mut g: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            for prev in &cols {
                let d: f64 = g.iter().zip(prev).map(|(a, b)| a * b).sum();
                for (gi, pi) in g.iter_mut().zip(prev) {
                    *gi -= d * pi;
                }
            }
            let n: f64 = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 1e-9 {
                for gi in &mut g {
                    *gi /= n;
                }
                cols.push(g);
            }
        }
        let scale = (dim as f64 / 3.0).sqrt();
        let mut forward = vec![0.0; dim * 3];
        let mut inverse = vec![0.0; 3 * dim];
        for i in 0..dim {
            for k in 0..3 {
                forward[i * 3 + k] = scale * cols[k][i];
                inverse[k * dim + i] = cols[k][i] / scale;
            }
        }
        Ok(Codec { forward, inverse, dim })
    }

    pub fn latent_dim(&self) -> usize {
        self.dim
    }

    pub fn encode_point(&self, p: &Point3) -> Vec<f64> {
        (0..self.dim)
            .map(|i| {
                let r = &self.forward[i * 3..i * 3 + 3];
                r[0] * p[0] + r[1] * p[1] + r[2] * p[2]
            })
            .collect()
    }

    pub fn decode_point(&self, z: &[f64]) -> Point3 {
        let mut p = [0.0; 3];
        for k in 0..3 {
            let row = &self.inverse[k * self.dim..(k + 1) * self.dim];
            p[k] = row.iter().zip(z).map(|(a, b)| a * b).sum();
        }
        p
    }

    pub fn encode(&self, cloud: &PointCloud) -> LatentBlock {
        let mut data = Vec::with_capacity(cloud.len() * self.dim);
        for p in cloud.points() {
            data.extend(self.encode_point(p));
        }
        let tokens = Tensor::new(&[cloud.len(), self.dim], data)
            .expect("encode shape is consistent by construction");
        LatentBlock { tokens }
    }

    /// Left-inverse projection of arbitrary latents; no ball bound.
    pub fn project(&self, block: &LatentBlock) -> Result<Vec<Point3>> {
        if block.latent_dim() != self.dim {
            return Err(Error::shape(
                "codec project",
                block.tokens.shape(),
                &[block.len(), self.dim],
            ));
        }
        let data = block.tokens.data();
        Ok((0..block.len())
            .map(|i| self.decode_point(&data[i * self.dim..(i + 1) * self.dim]))
            .collect())
    }

    /// Projection packaged as a validated cloud; fails if the latents
    /// decode outside the unit ball.
    pub fn decode(&self, block: &LatentBlock) -> Result<PointCloud> {
        PointCloud::new(self.project(block)?)
    }
}

/// Symmetric mean of squared nearest-neighbor distances, brute force.
pub fn chamfer(a: &PointCloud, b: &PointCloud) -> f64 {
    fn directed(from: &[Point3], to: &[Point3]) -> f64 {
        let total: f64 = from
            .iter()
            .map(|p| {
                to.iter()
                    .map(|q| {
                        let d = [p[0] - q[0], p[1] - q[1], p[2] - q[2]];
                        d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .sum();
        total / from.len() as f64
    }
    0.5 * (directed(a.points(), b.points()) + directed(b.points(), a.points()))
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub families: Vec<ShapeFamily>,
    pub samples_per_family: usize,
    pub points_per_shape: usize,
    pub block_size: usize,
    pub seed: u64,
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.families.is_empty() {
            return Err(Error::Config("dataset needs at least one family".into()));
        }
        if self.samples_per_family == 0 || self.points_per_shape == 0 || self.block_size == 0 {
            return Err(Error::Config("dataset counts must be positive".into()));
        }
        if self.points_per_shape % self.block_size != 0 {
            return Err(Error::Config(format!(
                "points_per_shape {} not divisible by block_size {}",
                self.points_per_shape, self.block_size
            )));
        }
        Ok(())
    }
}

/// One training example: condition prefix plus the shape's latent blocks.
#[derive(Clone, Debug)]
pub struct Sample {
    pub layout: SequenceLayout,
    pub tokens: Vec<usize>,
    pub blocks: Vec<LatentBlock>,
    pub shape: ShapeSpec,
}

/// Draw a bin-center shape of the given family, so its condition tokens
/// describe it losslessly.
pub fn sample_spec<R: Rng + ?Sized>(family: ShapeFamily, rng: &mut R) -> ShapeSpec {
    let scale = family.param_scale();
    let params: Vec<f64> = (0..family.n_params())
        .map(|_| dequantize_param(rng.gen_range(0..vocab::PARAM_BINS), scale))
        .collect();
    ShapeSpec::from_params(family, &params).expect("bin centers always fit the unit ball")
}

pub fn build_dataset(config: &DatasetConfig, codec: &Codec) -> Result<Vec<Sample>> {
    use rand::SeedableRng;
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n_blocks = config.points_per_shape / config.block_size;
    let mut out = Vec::with_capacity(config.families.len() * config.samples_per_family);
    for &family in &config.families {
        for _ in 0..config.samples_per_family {
            let shape = sample_spec(family, &mut rng);
            let cloud = sample_surface(&shape, config.points_per_shape, &mut rng)?;
            let latents = codec.encode(&cloud);
            let data = latents.tokens.data();
            let dim = codec.latent_dim();
            let blocks: Vec<LatentBlock> = (0..n_blocks)
                .map(|bi| {
                    let start = bi * config.block_size * dim;
                    let end = start + config.block_size * dim;
                    LatentBlock {
                        tokens: Tensor::new(&[config.block_size, dim], data[start..end].to_vec())
                            .expect("block split is shape-consistent"),
                    }
                })
                .collect();
            let tokens = condition_tokens(&shape);
            let mut parts = vec![(Modality::Condition, Mode::Serial, tokens.len())];
            parts.extend(
                std::iter::repeat((Modality::Latent3d, Mode::Parallel, config.block_size))
                    .take(n_blocks),
            );
            let layout = SequenceLayout::from_parts(&parts)?;
            out.push(Sample { layout, tokens, blocks, shape });
        }
    }
    Ok(out)
}

/// Plain-text export, one "x y z" triple per line.
pub fn write_xyz<W: Write>(cloud: &PointCloud, mut w: W) -> Result<()> {
    for p in cloud.points() {
        writeln!(w, "{:.9} {:.9} {:.9}", p[0], p[1], p[2])?;
    }
    Ok(())
}

pub fn read_xyz<R: io::Read>(r: R) -> Result<PointCloud> {
    let mut points = Vec::new();
    for (ln, line) in io::BufReader::new(r).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                pos: ln + 1,
                msg: format!("expected 3 coordinates, got {}", fields.len()),
            });
        }
        let mut p = [0.0; 3];
        for (k, f) in fields.iter().enumerate() {
            p[k] = f.parse::<f64>().map_err(|e| Error::Parse {
                pos: ln + 1,
                msg: format!("bad coordinate {f:?}: {e}"),
            })?;
        }
        points.push(p);
    }
    PointCloud::new(points)
}
