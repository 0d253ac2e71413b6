//! Parameter storage with a stable named visit order.
//!
//! The visit order defined by `named_tensors` is the canonical order for
//! checkpoint manifests and optimizer state; changing it breaks stored
//! checkpoints.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

use super::config::ModelConfig;

/// Weight std for all randomly initialized matrices.
const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug)]
pub struct AdalnParams<S: Scalar> {
    /// All four maps take the timestep embedding to a d_model vector and
    /// start at zero, so modulation is the identity until trained.
    pub attn_scale: Tensor<S>,
    pub attn_shift: Tensor<S>,
    pub ffn_scale: Tensor<S>,
    pub ffn_shift: Tensor<S>,
}

#[derive(Clone, Debug)]
pub struct ExpertParams<S: Scalar> {
    pub wq: Tensor<S>,        // [d_model, d_model]
    pub wk: Tensor<S>,        // [d_model, kv_dim]
    pub wv: Tensor<S>,        // [d_model, kv_dim]
    pub wo: Tensor<S>,        // [d_model, d_model]
    pub ffn_gate: Tensor<S>,  // [d_model, d_ff]
    pub ffn_up: Tensor<S>,    // [d_model, d_ff]
    pub ffn_down: Tensor<S>,  // [d_ff, d_model]
    pub norm_attn: Tensor<S>, // [d_model]
    pub norm_ffn: Tensor<S>,  // [d_model]
    /// Parallel expert only, and only when adaln_enabled.
    pub adaln: Option<AdalnParams<S>>,
}

#[derive(Clone, Debug)]
pub struct LayerParams<S: Scalar> {
    pub serial: ExpertParams<S>,
    pub parallel: ExpertParams<S>,
}

#[derive(Clone, Debug)]
pub struct ModelParams<S: Scalar> {
    pub config: ModelConfig,
    pub token_embedding: Tensor<S>, // [vocab, d_model]
    /// Single learned row substituted for every token of a dropped
    /// condition segment.
    pub null_condition: Tensor<S>, // [1, d_model]
    pub time_proj: Tensor<S>,       // [d_model, d_model]
    pub q_gains: Tensor<S>,         // [n_heads, head_dim]
    pub k_gains: Tensor<S>,         // [n_kv_heads, head_dim]
    pub layers: Vec<LayerParams<S>>,
    pub connector_w: Tensor<S>, // [latent_dim, d_model]
    pub connector_b: Tensor<S>, // [d_model]
    pub flow_head_w: Tensor<S>, // [d_model, latent_dim]
    pub flow_head_b: Tensor<S>, // [latent_dim]
    pub text_head_w: Tensor<S>, // [d_model, vocab]
    pub text_head_b: Tensor<S>, // [vocab]
}

fn randn<S: Scalar, R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<S> {
    let dist = Normal::new(0.0, std).expect("std is a positive constant");
    let n: usize = shape.iter().product();
    let data: Vec<S> = (0..n).map(|_| S::from_f64(dist.sample(rng))).collect();
    Tensor::new(shape, data).expect("shape/data constructed together")
}

impl<S: Scalar> ModelParams<S> {
    /// Random initialization. Both experts of every layer start as clones
    /// of one draw, so any later divergence is training-driven.
    pub fn init<R: Rng>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let kv = config.kv_dim();
        let hd = config.head_dim();

        let token_embedding = randn(rng, &[config.vocab_size, d], INIT_STD);
        let null_condition = randn(rng, &[1, d], INIT_STD);
        let time_proj = randn(rng, &[d, d], INIT_STD);
        let q_gains = Tensor::full(&[config.n_heads, hd], S::ONE);
        let k_gains = Tensor::full(&[config.n_kv_heads, hd], S::ONE);

        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let shared = ExpertParams {
                wq: randn(rng, &[d, d], INIT_STD),
                wk: randn(rng, &[d, kv], INIT_STD),
                wv: randn(rng, &[d, kv], INIT_STD),
                wo: randn(rng, &[d, d], INIT_STD),
                ffn_gate: randn(rng, &[d, config.d_ff], INIT_STD),
                ffn_up: randn(rng, &[d, config.d_ff], INIT_STD),
                ffn_down: randn(rng, &[config.d_ff, d], INIT_STD),
                norm_attn: Tensor::full(&[d], S::ONE),
                norm_ffn: Tensor::full(&[d], S::ONE),
                adaln: None,
            };
            let mut parallel = shared.clone();
            if config.adaln_enabled {
                parallel.adaln = Some(AdalnParams {
                    attn_scale: Tensor::zeros(&[d, d]),
                    attn_shift: Tensor::zeros(&[d, d]),
                    ffn_scale: Tensor::zeros(&[d, d]),
                    ffn_shift: Tensor::zeros(&[d, d]),
                });
            }
            layers.push(LayerParams { serial: shared, parallel });
        }

        Ok(ModelParams {
            config: config.clone(),
            token_embedding,
            null_condition,
            time_proj,
            q_gains,
            k_gains,
            layers,
            connector_w: randn(rng, &[config.latent_dim, d], INIT_STD),
            connector_b: Tensor::zeros(&[d]),
            flow_head_w: randn(rng, &[d, config.latent_dim], INIT_STD),
            flow_head_b: Tensor::zeros(&[config.latent_dim]),
            text_head_w: randn(rng, &[d, config.vocab_size], INIT_STD),
            text_head_b: Tensor::zeros(&[config.vocab_size]),
        })
    }

    /// Visit every tensor with its canonical name, in canonical order.
    pub fn visit(&self, mut f: impl FnMut(&str, &Tensor<S>)) {
        f("token_embedding", &self.token_embedding);
        f("null_condition", &self.null_condition);
        f("time_proj", &self.time_proj);
        f("q_gains", &self.q_gains);
        f("k_gains", &self.k_gains);
        for (l, layer) in self.layers.iter().enumerate() {
            for (ename, e) in [("serial", &layer.serial), ("parallel", &layer.parallel)] {
                let base = format!("layers.{l}.{ename}");
                f(&format!("{base}.wq"), &e.wq);
                f(&format!("{base}.wk"), &e.wk);
                f(&format!("{base}.wv"), &e.wv);
                f(&format!("{base}.wo"), &e.wo);
                f(&format!("{base}.ffn_gate"), &e.ffn_gate);
                f(&format!("{base}.ffn_up"), &e.ffn_up);
                f(&format!("{base}.ffn_down"), &e.ffn_down);
                f(&format!("{base}.norm_attn"), &e.norm_attn);
                f(&format!("{base}.norm_ffn"), &e.norm_ffn);
                if let Some(a) = &e.adaln {
                    f(&format!("{base}.adaln.attn_scale"), &a.attn_scale);
                    f(&format!("{base}.adaln.attn_shift"), &a.attn_shift);
                    f(&format!("{base}.adaln.ffn_scale"), &a.ffn_scale);
                    f(&format!("{base}.adaln.ffn_shift"), &a.ffn_shift);
                }
            }
        }
        f("connector.w", &self.connector_w);
        f("connector.b", &self.connector_b);
        f("flow_head.w", &self.flow_head_w);
        f("flow_head.b", &self.flow_head_b);
        f("text_head.w", &self.text_head_w);
        f("text_head.b", &self.text_head_b);
    }

    /// Mutable visit in the same canonical order.
    pub fn visit_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor<S>)) {
        f("token_embedding", &mut self.token_embedding);
        f("null_condition", &mut self.null_condition);
        f("time_proj", &mut self.time_proj);
        f("q_gains", &mut self.q_gains);
        f("k_gains", &mut self.k_gains);
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for (ename, e) in [
                ("serial", &mut layer.serial),
                ("parallel", &mut layer.parallel),
            ] {
                let base = format!("layers.{l}.{ename}");
                f(&format!("{base}.wq"), &mut e.wq);
                f(&format!("{base}.wk"), &mut e.wk);
                f(&format!("{base}.wv"), &mut e.wv);
                f(&format!("{base}.wo"), &mut e.wo);
                f(&format!("{base}.ffn_gate"), &mut e.ffn_gate);
                f(&format!("{base}.ffn_up"), &mut e.ffn_up);
                f(&format!("{base}.ffn_down"), &mut e.ffn_down);
                f(&format!("{base}.norm_attn"), &mut e.norm_attn);
                f(&format!("{base}.norm_ffn"), &mut e.norm_ffn);
                if let Some(a) = &mut e.adaln {
                    f(&format!("{base}.adaln.attn_scale"), &mut a.attn_scale);
                    f(&format!("{base}.adaln.attn_shift"), &mut a.attn_shift);
                    f(&format!("{base}.adaln.ffn_scale"), &mut a.ffn_scale);
                    f(&format!("{base}.adaln.ffn_shift"), &mut a.ffn_shift);
                }
            }
        }
        f("connector.w", &mut self.connector_w);
        f("connector.b", &mut self.connector_b);
        f("flow_head.w", &mut self.flow_head_w);
        f("flow_head.b", &mut self.flow_head_b);
        f("text_head.w", &mut self.text_head_w);
        f("text_head.b", &mut self.text_head_b);
    }

    /// Canonical (name, tensor) list.
    pub fn named_tensors(&self) -> Vec<(String, Tensor<S>)> {
        let mut out = Vec::new();
        self.visit(|name, t| out.push((name.to_string(), t.clone())));
        out
    }

    pub fn tensor_count(&self) -> usize {
        let mut n = 0;
        self.visit(|_, _| n += 1);
        n
    }

    pub fn total_elements(&self) -> usize {
        let mut n = 0;
        self.visit(|_, t| n += t.numel());
        n
    }

    /// Replace tensor data by name. Shape must match exactly.
    pub fn set_tensor(&mut self, name: &str, value: &Tensor<S>) -> Result<()> {
        let mut found = false;
        let mut err = None;
        self.visit_mut(|n, t| {
            if n == name {
                found = true;
                if t.shape() != value.shape() {
                    err = Some(Error::shape("set_tensor", t.shape(), value.shape()));
                } else {
                    *t = value.clone();
                }
            }
        });
        match (found, err) {
            (false, _) => Err(Error::Contract(format!("unknown tensor name {name:?}"))),
            (true, Some(e)) => Err(e),
            (true, None) => Ok(()),
        }
    }

    /// Lossy precision conversion, preserving structure and names.
    pub fn cast<T: Scalar>(&self) -> ModelParams<T> {
        let cast_expert = |e: &ExpertParams<S>| ExpertParams {
            wq: e.wq.cast(),
            wk: e.wk.cast(),
            wv: e.wv.cast(),
            wo: e.wo.cast(),
            ffn_gate: e.ffn_gate.cast(),
            ffn_up: e.ffn_up.cast(),
            ffn_down: e.ffn_down.cast(),
            norm_attn: e.norm_attn.cast(),
            norm_ffn: e.norm_ffn.cast(),
            adaln: e.adaln.as_ref().map(|a| AdalnParams {
                attn_scale: a.attn_scale.cast(),
                attn_shift: a.attn_shift.cast(),
                ffn_scale: a.ffn_scale.cast(),
                ffn_shift: a.ffn_shift.cast(),
            }),
        };
        ModelParams {
            config: self.config.clone(),
            token_embedding: self.token_embedding.cast(),
            null_condition: self.null_condition.cast(),
            time_proj: self.time_proj.cast(),
            q_gains: self.q_gains.cast(),
            k_gains: self.k_gains.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    serial: cast_expert(&l.serial),
                    parallel: cast_expert(&l.parallel),
                })
                .collect(),
            connector_w: self.connector_w.cast(),
            connector_b: self.connector_b.cast(),
            flow_head_w: self.flow_head_w.cast(),
            flow_head_b: self.flow_head_b.cast(),
            text_head_w: self.text_head_w.cast(),
            text_head_b: self.text_head_b.cast(),
        }
    }
}
