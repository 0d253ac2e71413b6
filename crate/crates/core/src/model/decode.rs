//! Incremental decoding over per-track KV caches.
//!
//! A track caches post-norm, post-rope key rows and raw value rows per
//! layer; only finalized context ever enters the cache, so velocity
//! evaluations during an ODE solve read the cache without extending it.
//! Guided states keep two tracks, one seeing real condition tokens and one
//! seeing the null embedding, so both guidance branches share the serial
//! prefix work.

use crate::error::{Error, Result};
use crate::layout::{Modality, Mode};
use crate::numerics::{BoolMat, Scalar, Tape, Tensor, ValueId};

use super::config::ModelConfig;
use super::forward::{
    attention_mix, bind_params, modulate, process_heads, rope_angles, swiglu_ffn, time_features,
    BoundParams,
};
use super::params::ModelParams;
use super::RMS_EPS;

/// Which cache branch of a guided state an operation applies to.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum TrackKind {
    /// Sees the actual condition tokens.
    Conditioned,
    /// Sees the learned null embedding in place of condition tokens.
    Null,
}

struct LayerCache<S> {
    /// `[ctx, kv_dim]` row-major, already per-head normalized and rotated.
    k: Vec<S>,
    /// `[ctx, kv_dim]` raw value projections.
    v: Vec<S>,
}

struct Track<S> {
    layers: Vec<LayerCache<S>>,
    ctx_len: usize,
    next_pos: usize,
}

impl<S: Scalar> Track<S> {
    fn new(n_layers: usize) -> Self {
        Track {
            layers: (0..n_layers)
                .map(|_| LayerCache { k: Vec::new(), v: Vec::new() })
                .collect(),
            ctx_len: 0,
            next_pos: 0,
        }
    }

    fn append(&mut self, new_kv: Vec<(Vec<S>, Vec<S>)>, rows: usize, mode: Mode) {
        for (cache, (k, v)) in self.layers.iter_mut().zip(new_kv) {
            cache.k.extend_from_slice(&k);
            cache.v.extend_from_slice(&v);
        }
        self.ctx_len += rows;
        // A parallel block occupies a single shared position value.
        self.next_pos += match mode {
            Mode::Serial => rows,
            Mode::Parallel => 1,
        };
    }
}

/// Incremental decoding state: one KV-cache track, or two when guided.
pub struct ForwardState<S: Scalar> {
    tracks: Vec<Track<S>>,
    n_layers: usize,
    kv_dim: usize,
    d_model: usize,
    velocity_passes: usize,
}

impl<S: Scalar> ForwardState<S> {
    pub fn new(config: &ModelConfig, guided: bool) -> Result<Self> {
        config.validate()?;
        let n_tracks = if guided { 2 } else { 1 };
        Ok(ForwardState {
            tracks: (0..n_tracks).map(|_| Track::new(config.n_layers)).collect(),
            n_layers: config.n_layers,
            kv_dim: config.kv_dim(),
            d_model: config.d_model,
            velocity_passes: 0,
        })
    }

    pub fn is_guided(&self) -> bool {
        self.tracks.len() == 2
    }

    /// Finalized context rows (tracks always agree).
    pub fn context_len(&self) -> usize {
        self.tracks[0].ctx_len
    }

    /// Position values consumed so far; a finalized block consumes one.
    pub fn positions_consumed(&self) -> usize {
        self.tracks[0].next_pos
    }

    /// Velocity evaluations performed through this state, across tracks.
    pub fn velocity_passes(&self) -> usize {
        self.velocity_passes
    }

    fn check_params(&self, config: &ModelConfig) -> Result<()> {
        if config.n_layers != self.n_layers
            || config.kv_dim() != self.kv_dim
            || config.d_model != self.d_model
        {
            return Err(Error::Contract(
                "decoding state was built for a different model config".into(),
            ));
        }
        Ok(())
    }

    fn track_index(&self, kind: TrackKind) -> Result<usize> {
        match kind {
            TrackKind::Conditioned => Ok(0),
            TrackKind::Null if self.is_guided() => Ok(1),
            TrackKind::Null => Err(Error::Contract(
                "null track requires a guided decoding state".into(),
            )),
        }
    }
}

/// Run one single-mode chunk against a track's cache. Returns final-layer
/// hidden rows and the per-layer (k, v) rows the chunk would contribute.
fn chunk_run<S: Scalar>(
    tape: &mut Tape<S>,
    config: &ModelConfig,
    bound: &BoundParams,
    track: &Track<S>,
    h0: ValueId,
    t_emb: Option<ValueId>,
    mode: Mode,
) -> Result<(ValueId, Vec<(Vec<S>, Vec<S>)>)> {
    let m = tape.value(h0).shape()[0];
    let ctx = track.ctx_len;
    let hd = config.head_dim();
    let kv_dim = config.kv_dim();

    // Cached rows belong to strictly earlier groups, so every chunk row
    // sees the whole cache; intra-chunk visibility follows the mode.
    let mut mask = BoolMat::new_false(m, ctx + m);
    for i in 0..m {
        for j in 0..ctx {
            mask.set(i, j, true);
        }
        let intra = match mode {
            Mode::Serial => i + 1,
            Mode::Parallel => m,
        };
        for j in 0..intra {
            mask.set(i, ctx + j, true);
        }
    }

    let positions: Vec<usize> = match mode {
        Mode::Serial => (0..m).map(|i| track.next_pos + i).collect(),
        Mode::Parallel => vec![track.next_pos; m],
    };
    let (cos, sin) = rope_angles(&positions, hd, config.rope_base)?;
    let cos: Vec<S> = cos.iter().map(|&v| S::from_f64(v)).collect();
    let sin: Vec<S> = sin.iter().map(|&v| S::from_f64(v)).collect();

    let mut h = h0;
    let mut new_kv = Vec::with_capacity(config.n_layers);
    for (l, (serial, parallel)) in bound.layers.iter().enumerate() {
        let expert = match mode {
            Mode::Serial => serial,
            Mode::Parallel => parallel,
        };
        let mut normed = tape.rms_norm(h, expert.norm_attn, RMS_EPS)?;
        if let (Some(ad), Some(t_emb)) = (&expert.adaln, t_emb) {
            normed = modulate(tape, normed, t_emb, ad.attn_scale, ad.attn_shift)?;
        }
        let q = tape.matmul(normed, expert.wq)?;
        let k = tape.matmul(normed, expert.wk)?;
        let v_new = tape.matmul(normed, expert.wv)?;
        let q = process_heads(tape, q, bound.q_gains, config.n_heads, hd, &cos, &sin)?;
        let k_new = process_heads(tape, k, bound.k_gains, config.n_kv_heads, hd, &cos, &sin)?;

        let cache = &track.layers[l];
        let (k_full, v_full) = if ctx == 0 {
            (k_new, v_new)
        } else {
            let kc = tape.leaf(Tensor::new(&[ctx, kv_dim], cache.k.clone())?);
            let vc = tape.leaf(Tensor::new(&[ctx, kv_dim], cache.v.clone())?);
            (
                tape.concat_rows(&[kc, k_new])?,
                tape.concat_rows(&[vc, v_new])?,
            )
        };
        let mixed = attention_mix(
            tape, q, k_full, v_full, &mask, config.n_heads, config.n_kv_heads, hd,
        )?;
        let o = tape.matmul(mixed, expert.wo)?;
        h = tape.add(h, o)?;

        let mut normed = tape.rms_norm(h, expert.norm_ffn, RMS_EPS)?;
        if let (Some(ad), Some(t_emb)) = (&expert.adaln, t_emb) {
            normed = modulate(tape, normed, t_emb, ad.ffn_scale, ad.ffn_shift)?;
        }
        let f = swiglu_ffn(tape, normed, expert.ffn_gate, expert.ffn_up, expert.ffn_down)?;
        h = tape.add(h, f)?;

        new_kv.push((
            tape.value(k_new).data().to_vec(),
            tape.value(v_new).data().to_vec(),
        ));
    }
    Ok((h, new_kv))
}

/// Embed one latent block and its timestep row. Returns (hidden, t_emb).
fn embed_block<S: Scalar>(
    tape: &mut Tape<S>,
    config: &ModelConfig,
    bound: &BoundParams,
    x_t: &Tensor<S>,
    t: f64,
) -> Result<(ValueId, ValueId)> {
    let rows = x_t.shape().first().copied().unwrap_or(0);
    if x_t.shape().len() != 2 || x_t.shape()[1] != config.latent_dim || rows == 0 {
        return Err(Error::shape("embed_block", x_t.shape(), &[rows, config.latent_dim]));
    }
    if !t.is_finite() || !(0.0..=1.0).contains(&t) {
        return Err(Error::Contract(format!("flow time {t} outside [0, 1]")));
    }
    let lat = tape.leaf(x_t.clone());
    let proj = tape.matmul(lat, bound.connector_w)?;
    let proj = tape.add_bias(proj, bound.connector_b)?;
    let feats = Tensor::from_f64_slice(&[1, config.d_model], &time_features(t, config.d_model))?;
    let feats = tape.leaf(feats);
    let t_row = tape.matmul(feats, bound.time_proj)?;
    let t_rows = tape.gather_rows(t_row, &vec![0; rows])?;
    let h0 = tape.add(proj, t_rows)?;
    Ok((h0, t_rows))
}

/// Append one serial token to every track and return its next-token logits
/// (from the conditioned track). On the null track, condition tokens embed
/// as the learned null row.
pub fn decode_step_serial<S: Scalar>(
    params: &ModelParams<S>,
    state: &mut ForwardState<S>,
    token: usize,
    modality: Modality,
) -> Result<Tensor<S>> {
    let config = &params.config;
    state.check_params(config)?;
    if token >= config.vocab_size {
        return Err(Error::Contract(format!(
            "token id {token} exceeds vocab {}",
            config.vocab_size
        )));
    }
    if modality == Modality::Latent3d {
        return Err(Error::Contract(
            "decode_step_serial takes text or condition tokens".into(),
        ));
    }

    let mut logits = None;
    for (ti, track) in state.tracks.iter_mut().enumerate() {
        let mut tape = Tape::new();
        let bound = bind_params(&mut tape, params, false);
        let substitute_null = ti == 1 && modality == Modality::Condition;
        let h0 = if substitute_null {
            tape.gather_rows(bound.null_condition, &[0])?
        } else {
            tape.embedding(bound.token_embedding, &[token])?
        };
        let (h, new_kv) = chunk_run(&mut tape, config, &bound, track, h0, None, Mode::Serial)?;
        if ti == 0 {
            let raw = tape.matmul(h, bound.text_head_w)?;
            let l = tape.add_bias(raw, bound.text_head_b)?;
            let row = tape.value(l).data().to_vec();
            logits = Some(Tensor::new(&[config.vocab_size], row)?);
        }
        track.append(new_kv, 1, Mode::Serial);
    }
    Ok(logits.expect("conditioned track always present"))
}

/// Evaluate block velocities at flow time `t` against one track's context.
/// The cache is read but never extended, so ODE iterations can call this
/// repeatedly at the same block slot.
pub fn velocity_pass<S: Scalar>(
    params: &ModelParams<S>,
    state: &mut ForwardState<S>,
    kind: TrackKind,
    x_t: &Tensor<S>,
    t: f64,
) -> Result<Tensor<S>> {
    let config = &params.config;
    state.check_params(config)?;
    let ti = state.track_index(kind)?;

    let mut tape = Tape::new();
    let bound = bind_params(&mut tape, params, false);
    let (h0, t_emb) = embed_block(&mut tape, config, &bound, x_t, t)?;
    let (h, _) = chunk_run(
        &mut tape,
        config,
        &bound,
        &state.tracks[ti],
        h0,
        Some(t_emb),
        Mode::Parallel,
    )?;
    let v = tape.matmul(h, bound.flow_head_w)?;
    let v = tape.add_bias(v, bound.flow_head_b)?;
    state.velocity_passes += 1;
    let out = tape.value(v).clone();
    if !out.is_all_finite() {
        return Err(Error::NonFinite(format!(
            "velocity pass at t = {t} produced non-finite values"
        )));
    }
    Ok(out)
}

/// Commit a solved block into every track's cache at flow time 0. The
/// block consumes one position value.
pub fn finalize_block<S: Scalar>(
    params: &ModelParams<S>,
    state: &mut ForwardState<S>,
    clean: &Tensor<S>,
) -> Result<()> {
    let config = &params.config;
    state.check_params(config)?;
    if !clean.is_all_finite() {
        return Err(Error::NonFinite("finalize_block got non-finite latents".into()));
    }
    let rows = clean.shape().first().copied().unwrap_or(0);
    for track in state.tracks.iter_mut() {
        let mut tape = Tape::new();
        let bound = bind_params(&mut tape, params, false);
        let (h0, t_emb) = embed_block(&mut tape, config, &bound, clean, 0.0)?;
        let (_, new_kv) = chunk_run(&mut tape, config, &bound, track, h0, Some(t_emb), Mode::Parallel)?;
        track.append(new_kv, rows, Mode::Parallel);
    }
    Ok(())
}
