//! Staged training loop: per-sample losses over mixed layouts, sequential
//! gradient accumulation, progressive resolution, and bit-exact resume.

use std::collections::HashMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{sample_timestep, FlowBatch, FlowSchedule};
use crate::layout::{Modality, Mode, SequenceLayout};
use crate::model::{forward_graph, ModelConfig, ModelParams, SegmentInput};
use crate::numerics::{Tape, Tensor};
use crate::worldgen::{self, build_dataset, vocab, Codec, DatasetConfig, Sample};

use super::adamw::{adamw_step, AdamwConfig, Moments};
use super::checkpoint::{Checkpoint, RngState, ScheduleCursor};
use super::metrics::{MetricLog, MetricRecord};

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    /// 3D token count per sample; the dataset is rebuilt to this.
    pub resolution: usize,
    /// Probability of replacing a sample's condition with the null row.
    pub dropout_p: f64,
    pub lr: f64,
    pub steps: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSchedule {
    pub stages: Vec<StageConfig>,
    pub flow: FlowSchedule,
    pub seed: u64,
    pub batch_size: usize,
    /// Fraction of samples trained in captioning order (blocks first,
    /// condition tokens decoded after them, EOS-terminated).
    pub caption_fraction: f64,
    /// Linear learning-rate ramp over the first steps of the run.
    pub warmup_steps: usize,
    /// Global gradient-norm cap; absent disables clipping.
    pub clip_norm: Option<f64>,
    pub optimizer: AdamwConfig,
    /// Extra checkpoint cadence in steps; 0 keeps stage boundaries only.
    pub checkpoint_every: usize,
}

impl Default for TrainSchedule {
    /// Desk profile: resolutions 64 to 256, condition dropout 0.9 to 0.1,
    /// learning rate 1e-4 to 5e-5.
    fn default() -> Self {
        TrainSchedule {
            stages: vec![
                StageConfig { resolution: 64, dropout_p: 0.9, lr: 1e-4, steps: 1000 },
                StageConfig { resolution: 256, dropout_p: 0.1, lr: 5e-5, steps: 1000 },
            ],
            flow: FlowSchedule::default(),
            seed: 0,
            batch_size: 8,
            caption_fraction: 0.5,
            warmup_steps: 0,
            clip_norm: None,
            optimizer: AdamwConfig::default(),
            checkpoint_every: 0,
        }
    }
}

impl TrainSchedule {
    /// The published large-scale profile; expressible and validated, not
    /// meant to run on a desk.
    pub fn full_scale() -> Self {
        TrainSchedule {
            stages: vec![
                StageConfig { resolution: 512, dropout_p: 0.9, lr: 1e-4, steps: 100_000 },
                StageConfig { resolution: 4096, dropout_p: 0.1, lr: 5e-5, steps: 100_000 },
            ],
            ..TrainSchedule::default()
        }
    }

    pub fn total_steps(&self) -> usize {
        self.stages.iter().map(|s| s.steps).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("schedule needs at least one stage".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.resolution == 0 || s.steps == 0 {
                return Err(Error::Config(format!("stage {i}: resolution and steps must be positive")));
            }
            if !(0.0..=1.0).contains(&s.dropout_p) {
                return Err(Error::Config(format!(
                    "stage {i}: dropout {} outside [0, 1]",
                    s.dropout_p
                )));
            }
            if !(s.lr > 0.0) || !s.lr.is_finite() {
                return Err(Error::Config(format!("stage {i}: learning rate must be positive")));
            }
        }
        for w in self.stages.windows(2) {
            if w[1].resolution < w[0].resolution {
                return Err(Error::Config("stage resolutions must be non-decreasing".into()));
            }
            if w[1].dropout_p > w[0].dropout_p {
                return Err(Error::Config("condition dropout must be non-increasing".into()));
            }
            if w[1].lr > w[0].lr {
                return Err(Error::Config("learning rate must be non-increasing".into()));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.caption_fraction) {
            return Err(Error::Config(format!(
                "caption_fraction {} outside [0, 1]",
                self.caption_fraction
            )));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) || !c.is_finite() {
                return Err(Error::Config(format!("clip_norm must be positive, got {c}")));
            }
        }
        self.flow.validate()?;
        self.optimizer.validate()
    }
}

/// Everything a training run needs; this is the config-file schema.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub schedule: TrainSchedule,
    pub dataset: DatasetConfig,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.validate()?;
        self.dataset.validate()?;
        if self.model.vocab_size < vocab::SIZE {
            return Err(Error::Config(format!(
                "vocab_size {} cannot hold the {}-token condition vocabulary",
                self.model.vocab_size,
                vocab::SIZE
            )));
        }
        if self.model.latent_dim != worldgen::LATENT_DIM {
            return Err(Error::Config(format!(
                "model latent_dim {} does not match the codec's {}",
                self.model.latent_dim,
                worldgen::LATENT_DIM
            )));
        }
        for (i, s) in self.schedule.stages.iter().enumerate() {
            if s.resolution % self.dataset.block_size != 0 {
                return Err(Error::Config(format!(
                    "stage {i} resolution {} not divisible by block_size {}",
                    s.resolution, self.dataset.block_size
                )));
            }
        }
        Ok(())
    }
}

/// Per-step knobs resolved from the schedule position.
#[derive(Clone, Debug)]
pub struct StepSettings {
    pub lr: f64,
    pub dropout_p: f64,
    pub caption_fraction: f64,
    pub flow: FlowSchedule,
    pub optimizer: AdamwConfig,
    pub clip_norm: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub text_ce: f64,
    pub flow_mse: f64,
}

/// Training view of one sample: its layout, segment inputs, serial
/// next-token targets, and per-block velocity targets.
struct PreparedSample {
    layout: SequenceLayout,
    inputs: Vec<SegmentInput<f32>>,
    /// (serial row index, target token) pairs over the whole sequence.
    ce_targets: Vec<(usize, usize)>,
    /// Velocity target per parallel segment, in segment order.
    v_targets: Vec<Tensor<f32>>,
}

fn prepare_sample(
    sample: &Sample,
    settings: &StepSettings,
    rng: &mut ChaCha8Rng,
) -> Result<PreparedSample> {
    let caption = rng.gen::<f64>() < settings.caption_fraction;
    // Captioning order trains the condition tokens as targets, so the
    // condition is never dropped there; generation order drops it with
    // the stage probability to support guidance.
    let nulled = if caption { false } else { rng.gen::<f64>() < settings.dropout_p };

    let mut tokens = sample.tokens.clone();
    let mut parts: Vec<(Modality, Mode, usize)> = Vec::with_capacity(1 + sample.blocks.len());
    if caption {
        tokens.push(vocab::EOS);
        for b in &sample.blocks {
            parts.push((Modality::Latent3d, Mode::Parallel, b.len()));
        }
        parts.push((Modality::Condition, Mode::Serial, tokens.len()));
    } else {
        parts.push((Modality::Condition, Mode::Serial, tokens.len()));
        for b in &sample.blocks {
            parts.push((Modality::Latent3d, Mode::Parallel, b.len()));
        }
    }
    let layout = SequenceLayout::from_parts(&parts)?;

    let mut inputs = Vec::with_capacity(parts.len());
    let mut v_targets = Vec::with_capacity(sample.blocks.len());
    let mut ce_targets = Vec::new();
    let mut serial_row = 0usize;
    let mut block_iter = sample.blocks.iter();
    for &(modality, _, _) in &parts {
        match modality {
            Modality::Condition => {
                // Serial rows appear in segment order, so this segment's
                // logits occupy rows serial_row..serial_row + len. A nulled
                // condition is dropped from supervision too: training the
                // text head against targets the input no longer carries
                // would leak the condition through the loss.
                if !nulled {
                    for j in 0..tokens.len() - 1 {
                        ce_targets.push((serial_row + j, tokens[j + 1]));
                    }
                }
                serial_row += tokens.len();
                inputs.push(SegmentInput::Tokens { ids: tokens.clone(), nulled });
            }
            Modality::Latent3d => {
                let block = block_iter.next().expect("parts mirror blocks");
                let x0 = block.tokens.cast::<f32>();
                let t = sample_timestep(rng, settings.flow.timestep_loc, settings.flow.timestep_scale);
                let noise: Vec<f32> = (0..x0.numel())
                    .map(|_| rng.sample::<f64, _>(StandardNormal) as f32)
                    .collect();
                let eps = Tensor::new(x0.shape(), noise)?;
                let fb = FlowBatch::new(x0, eps, t)?;
                inputs.push(SegmentInput::latents(fb.x_t, t));
                v_targets.push(fb.v_target);
            }
            Modality::Text => unreachable!("corpus samples carry no free text"),
        }
    }
    Ok(PreparedSample { layout, inputs, ce_targets, v_targets })
}

/// Forward, loss, and backward for one prepared sample. Returns the two
/// loss terms and adds gradients into `acc` by parameter name.
fn sample_pass(
    params: &ModelParams<f32>,
    prep: &PreparedSample,
    acc: &mut HashMap<String, Tensor<f32>>,
) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let g = forward_graph(&mut tape, params, &prep.layout, &prep.inputs, true)?;

    let mut terms = Vec::with_capacity(2);
    let mut ce_value = 0.0;
    if !prep.ce_targets.is_empty() {
        let rows: Vec<usize> = prep.ce_targets.iter().map(|&(r, _)| r).collect();
        let targets: Vec<usize> = prep.ce_targets.iter().map(|&(_, t)| t).collect();
        let picked = tape.gather_rows(g.text_logits, &rows)?;
        let ce = tape.cross_entropy(picked, &targets)?;
        ce_value = tape.value(ce).item()? as f64;
        terms.push(ce);
    }
    let mut mse_value = 0.0;
    if !g.velocities.is_empty() {
        debug_assert_eq!(g.velocities.len(), prep.v_targets.len());
        let mut block_terms = Vec::with_capacity(g.velocities.len());
        for ((_, vid), target) in g.velocities.iter().zip(&prep.v_targets) {
            let t = tape.leaf(target.clone());
            let d = tape.sub(*vid, t)?;
            let sq = tape.mul(d, d)?;
            block_terms.push(tape.mean_all(sq)?);
        }
        let mut mse = block_terms[0];
        for &b in &block_terms[1..] {
            mse = tape.add(mse, b)?;
        }
        if block_terms.len() > 1 {
            mse = tape.mul_scalar(mse, 1.0f32 / block_terms.len() as f32)?;
        }
        mse_value = tape.value(mse).item()? as f64;
        terms.push(mse);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }

    let grads = tape.backward(total)?;
    for (name, vid) in &g.param_ids {
        if let Some(gr) = grads.get(*vid) {
            match acc.get_mut(name) {
                Some(slot) => {
                    let dst = slot.data_mut();
                    for (d, &s) in dst.iter_mut().zip(gr.data()) {
                        *d += s;
                    }
                }
                None => {
                    acc.insert(name.clone(), gr.clone());
                }
            }
        }
    }
    Ok((ce_value, mse_value))
}

/// One optimizer update over a batch: sequential per-sample accumulation
/// (deterministic), batch-mean scaling, optional norm clip, AdamW.
pub fn train_step(
    params: &mut ModelParams<f32>,
    moments: &mut Moments<f32>,
    batch: &[Sample],
    settings: &StepSettings,
    rng: &mut ChaCha8Rng,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::Contract("train_step needs a non-empty batch".into()));
    }
    let mut acc: HashMap<String, Tensor<f32>> = HashMap::new();
    let mut ce_sum = 0.0;
    let mut mse_sum = 0.0;
    for sample in batch {
        let prep = prepare_sample(sample, settings, rng)?;
        let (ce, mse) = sample_pass(params, &prep, &mut acc)?;
        ce_sum += ce;
        mse_sum += mse;
    }
    let inv_b = 1.0 / batch.len() as f64;
    for g in acc.values_mut() {
        let d = g.data_mut();
        for x in d {
            *x *= inv_b as f32;
        }
    }
    if let Some(max_norm) = settings.clip_norm {
        let mut sq = 0.0f64;
        for g in acc.values() {
            for &x in g.data() {
                sq += (x as f64) * (x as f64);
            }
        }
        let norm = sq.sqrt();
        if norm > max_norm {
            let scale = (max_norm / norm) as f32;
            for g in acc.values_mut() {
                for x in g.data_mut() {
                    *x *= scale;
                }
            }
        }
    }
    adamw_step(params, &acc, moments, settings.lr, &settings.optimizer)?;
    Ok(LossBreakdown {
        total: (ce_sum + mse_sum) * inv_b,
        text_ce: ce_sum * inv_b,
        flow_mse: mse_sum * inv_b,
    })
}

/// Owns the whole training state; `Checkpoint` is its serialized twin.
pub struct Trainer {
    pub params: ModelParams<f32>,
    pub moments: Moments<f32>,
    pub schedule: TrainSchedule,
    pub dataset_cfg: DatasetConfig,
    pub cursor: ScheduleCursor,
    rng: ChaCha8Rng,
    codec: Codec,
    dataset: Option<(usize, Vec<Sample>)>,
}

impl Trainer {
    pub fn new(config: &TrainConfig) -> Result<Trainer> {
        config.validate()?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(config.schedule.seed);
        let params = ModelParams::<f32>::init(&config.model, &mut init_rng)?;
        let moments = Moments::zeros_like(&params);
        // The training stream lives on its own ChaCha stream so parameter
        // init and step randomness never alias.
        let mut rng = ChaCha8Rng::seed_from_u64(config.schedule.seed);
        rng.set_stream(1);
        Ok(Trainer {
            params,
            moments,
            schedule: config.schedule.clone(),
            dataset_cfg: config.dataset.clone(),
            cursor: ScheduleCursor::default(),
            rng,
            codec: Codec::fixed(),
            dataset: None,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Trainer> {
        ckpt.schedule.validate()?;
        Ok(Trainer {
            params: ckpt.params,
            moments: ckpt.moments,
            schedule: ckpt.schedule,
            dataset_cfg: ckpt.dataset,
            cursor: ckpt.cursor,
            rng: ckpt.rng.restore(),
            codec: Codec::fixed(),
            dataset: None,
        })
    }

    /// Refuse resumes whose run description drifted from the checkpoint.
    pub fn check_resume(&self, config: &TrainConfig) -> Result<()> {
        if config.model != self.params.config {
            return Err(Error::Checkpoint("checkpoint model config differs from the run config".into()));
        }
        if config.schedule != self.schedule {
            return Err(Error::Checkpoint("checkpoint schedule differs from the run config".into()));
        }
        if config.dataset != self.dataset_cfg {
            return Err(Error::Checkpoint("checkpoint dataset config differs from the run config".into()));
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.params.config.clone(),
            schedule: self.schedule.clone(),
            dataset: self.dataset_cfg.clone(),
            cursor: self.cursor,
            rng: RngState::capture(&self.rng),
            params: self.params.clone(),
            moments: self.moments.clone(),
        }
    }

    pub fn is_done(&self) -> bool {
        self.cursor.stage >= self.schedule.stages.len()
    }

    fn stage_dataset(&mut self) -> Result<()> {
        let stage_idx = self.cursor.stage;
        if matches!(self.dataset, Some((s, _)) if s == stage_idx) {
            return Ok(());
        }
        let stage = &self.schedule.stages[stage_idx];
        let cfg = DatasetConfig {
            points_per_shape: stage.resolution,
            seed: self.dataset_cfg.seed.wrapping_add(stage_idx as u64),
            ..self.dataset_cfg.clone()
        };
        self.dataset = Some((stage_idx, build_dataset(&cfg, &self.codec)?));
        Ok(())
    }

    fn settings(&self) -> StepSettings {
        let stage = &self.schedule.stages[self.cursor.stage];
        let mut lr = stage.lr;
        if self.schedule.warmup_steps > 0 && self.cursor.global_step < self.schedule.warmup_steps {
            lr *= (self.cursor.global_step + 1) as f64 / self.schedule.warmup_steps as f64;
        }
        StepSettings {
            lr,
            dropout_p: stage.dropout_p,
            caption_fraction: self.schedule.caption_fraction,
            flow: self.schedule.flow.clone(),
            optimizer: self.schedule.optimizer,
            clip_norm: self.schedule.clip_norm,
        }
    }

    /// Run one step and append its metric record.
    pub fn step(&mut self, log: &mut MetricLog) -> Result<()> {
        if self.is_done() {
            return Err(Error::Contract("schedule already finished".into()));
        }
        self.stage_dataset()?;
        let settings = self.settings();
        let stage = self.schedule.stages[self.cursor.stage];
        let data = &self.dataset.as_ref().expect("stage dataset just built").1;
        let batch: Vec<Sample> = (0..self.schedule.batch_size)
            .map(|_| data[self.rng.gen_range(0..data.len())].clone())
            .collect();

        let started = Instant::now();
        let losses = train_step(&mut self.params, &mut self.moments, &batch, &settings, &mut self.rng)?;
        let wall_ms = started.elapsed().as_secs_f64() * 1e3;

        self.cursor.global_step += 1;
        self.cursor.step_in_stage += 1;
        log.push(MetricRecord {
            step: self.cursor.global_step,
            stage: self.cursor.stage,
            resolution: stage.resolution,
            text_ce: losses.text_ce,
            flow_mse: losses.flow_mse,
            lr: settings.lr,
            dropout_p: stage.dropout_p,
            wall_ms,
        })?;
        if self.cursor.step_in_stage >= stage.steps {
            self.cursor.stage += 1;
            self.cursor.step_in_stage = 0;
        }
        Ok(())
    }

    /// Drive the schedule to completion, emitting checkpoints at stage
    /// boundaries (plus every `checkpoint_every` steps when set) and once
    /// at the end.
    pub fn run(
        &mut self,
        log: &mut MetricLog,
        mut sink: impl FnMut(&Checkpoint) -> Result<()>,
    ) -> Result<Checkpoint> {
        while !self.is_done() {
            let stage_before = self.cursor.stage;
            self.step(log)?;
            let boundary = self.cursor.stage != stage_before;
            let cadence = self.schedule.checkpoint_every > 0
                && self.cursor.global_step % self.schedule.checkpoint_every == 0;
            if boundary || cadence {
                sink(&self.checkpoint())?;
            }
        }
        Ok(self.checkpoint())
    }
}

/// Spec-shaped convenience wrapper over `Trainer::run`.
pub fn run_stages(
    config: &TrainConfig,
    log: &mut MetricLog,
    sink: impl FnMut(&Checkpoint) -> Result<()>,
) -> Result<Checkpoint> {
    Trainer::new(config)?.run(log, sink)
}

/// Train twin arms that differ only in AdaLN; paired logs line up
/// step-for-step for overlay plots.
pub fn ablation_adaln(config: &TrainConfig) -> Result<(MetricLog, MetricLog)> {
    let mut on_cfg = config.clone();
    on_cfg.model.adaln_enabled = true;
    let mut off_cfg = config.clone();
    off_cfg.model.adaln_enabled = false;

    let mut on_log = MetricLog::new();
    run_stages(&on_cfg, &mut on_log, |_| Ok(()))?;
    let mut off_log = MetricLog::new();
    run_stages(&off_cfg, &mut off_log, |_| Ok(()))?;
    Ok((on_log, off_log))
}
