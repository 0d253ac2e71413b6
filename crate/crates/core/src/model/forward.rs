//! Whole-sequence forward pass recorded on a tape.
//!
//! The residual stream is kept in expert-major row order: every serial
//! segment first, then every parallel segment, each group in layout order.
//! The attention mask and position map are permuted once to match, so the
//! per-layer expert split is a pair of row slices instead of scattered
//! gathers. Output heads restore per-segment addressing.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::layout::{assign_positions, compile_mask, Modality, Mode, SequenceLayout};
use crate::numerics::{BoolMat, Scalar, Tape, Tensor, ValueId};

use super::config::ModelConfig;
use super::params::ModelParams;
use super::RMS_EPS;

/// Per-segment model inputs, parallel to `layout.segments()`.
#[derive(Clone, Debug)]
pub enum SegmentInput<S: Scalar> {
    /// Serial token ids. `nulled` swaps every row for the learned
    /// null-condition embedding (condition segments only); the ids are
    /// still validated so loss targets stay well-defined.
    Tokens { ids: Vec<usize>, nulled: bool },
    /// One parallel latent block at flow time `t` (0 = clean, 1 = noise).
    Latents { x_t: Tensor<S>, t: f64 },
}

impl<S: Scalar> SegmentInput<S> {
    pub fn tokens(ids: impl Into<Vec<usize>>) -> Self {
        SegmentInput::Tokens { ids: ids.into(), nulled: false }
    }

    pub fn latents(x_t: Tensor<S>, t: f64) -> Self {
        SegmentInput::Latents { x_t, t }
    }
}

/// Handles into the tape after a full forward pass.
pub struct ForwardGraph {
    /// Next-token logits `[n_serial, vocab]`; row i sits at global
    /// position `serial_indices[i]`.
    pub text_logits: ValueId,
    pub serial_indices: Vec<usize>,
    /// `(segment_index, velocities [len, latent_dim])` per parallel segment.
    pub velocities: Vec<(usize, ValueId)>,
    /// Parameter leaves in canonical visit order, for gradient lookups.
    pub param_ids: Vec<(String, ValueId)>,
}

pub(crate) struct BoundAdaln {
    pub attn_scale: ValueId,
    pub attn_shift: ValueId,
    pub ffn_scale: ValueId,
    pub ffn_shift: ValueId,
}

pub(crate) struct BoundExpert {
    pub wq: ValueId,
    pub wk: ValueId,
    pub wv: ValueId,
    pub wo: ValueId,
    pub ffn_gate: ValueId,
    pub ffn_up: ValueId,
    pub ffn_down: ValueId,
    pub norm_attn: ValueId,
    pub norm_ffn: ValueId,
    pub adaln: Option<BoundAdaln>,
}

pub(crate) struct BoundParams {
    pub token_embedding: ValueId,
    pub null_condition: ValueId,
    pub time_proj: ValueId,
    pub q_gains: ValueId,
    pub k_gains: ValueId,
    pub layers: Vec<(BoundExpert, BoundExpert)>,
    pub connector_w: ValueId,
    pub connector_b: ValueId,
    pub flow_head_w: ValueId,
    pub flow_head_b: ValueId,
    pub text_head_w: ValueId,
    pub text_head_b: ValueId,
    pub named: Vec<(String, ValueId)>,
}

/// Intern every parameter tensor as a tape leaf, in canonical order.
pub(crate) fn bind_params<S: Scalar>(
    tape: &mut Tape<S>,
    params: &ModelParams<S>,
    trainable: bool,
) -> BoundParams {
    let mut named = Vec::new();
    let mut map: HashMap<String, ValueId> = HashMap::new();
    params.visit(|name, t| {
        let tensor = if trainable { t.clone().with_grad() } else { t.clone() };
        let id = tape.leaf(tensor);
        named.push((name.to_string(), id));
        map.insert(name.to_string(), id);
    });

    let expert = |l: usize, e: &str| -> BoundExpert {
        let k = |f: &str| map[&format!("layers.{l}.{e}.{f}")];
        let adaln = map
            .contains_key(&format!("layers.{l}.{e}.adaln.attn_scale"))
            .then(|| BoundAdaln {
                attn_scale: k("adaln.attn_scale"),
                attn_shift: k("adaln.attn_shift"),
                ffn_scale: k("adaln.ffn_scale"),
                ffn_shift: k("adaln.ffn_shift"),
            });
        BoundExpert {
            wq: k("wq"),
            wk: k("wk"),
            wv: k("wv"),
            wo: k("wo"),
            ffn_gate: k("ffn_gate"),
            ffn_up: k("ffn_up"),
            ffn_down: k("ffn_down"),
            norm_attn: k("norm_attn"),
            norm_ffn: k("norm_ffn"),
            adaln,
        }
    };
    let layers = (0..params.config.n_layers)
        .map(|l| (expert(l, "serial"), expert(l, "parallel")))
        .collect();

    BoundParams {
        token_embedding: map["token_embedding"],
        null_condition: map["null_condition"],
        time_proj: map["time_proj"],
        q_gains: map["q_gains"],
        k_gains: map["k_gains"],
        layers,
        connector_w: map["connector.w"],
        connector_b: map["connector.b"],
        flow_head_w: map["flow_head.w"],
        flow_head_b: map["flow_head.b"],
        text_head_w: map["text_head.w"],
        text_head_b: map["text_head.b"],
        named,
    }
}

/// Sinusoidal features of a flow time in `[0, 1]`, half cosines then half
/// sines over a geometric frequency ladder. Computed in f64.
pub fn time_features(t: f64, dim: usize) -> Vec<f64> {
    assert!(dim >= 2 && dim % 2 == 0, "feature dim must be even, got {dim}");
    let half = dim / 2;
    // t spans one unit; stretch so the ladder actually resolves it.
    let arg = 1000.0 * t;
    let mut out = Vec::with_capacity(dim);
    for trig in [f64::cos as fn(f64) -> f64, f64::sin] {
        for k in 0..half {
            let w = (-(k as f64) / half as f64 * 10000f64.ln()).exp();
            out.push(trig(arg * w));
        }
    }
    out
}

/// Per-(row, pair) rotation angles for the given positions. Pair `k`
/// advances by `pos · base^(−2k/head_dim)`.
pub fn rope_angles(
    positions: &[usize],
    head_dim: usize,
    base: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if head_dim == 0 || head_dim % 2 != 0 {
        return Err(Error::Config(format!(
            "rotary encoding needs an even head_dim, got {head_dim}"
        )));
    }
    let pairs = head_dim / 2;
    let thetas: Vec<f64> = (0..pairs)
        .map(|k| base.powf(-((2 * k) as f64) / head_dim as f64))
        .collect();
    let mut cos = Vec::with_capacity(positions.len() * pairs);
    let mut sin = Vec::with_capacity(positions.len() * pairs);
    for &p in positions {
        for &theta in &thetas {
            let angle = p as f64 * theta;
            cos.push(angle.cos());
            sin.push(angle.sin());
        }
    }
    Ok((cos, sin))
}

fn cast_angles<S: Scalar>(v: &[f64]) -> Vec<S> {
    v.iter().map(|&x| S::from_f64(x)).collect()
}

/// Gated feed-forward: `down(silu(x·gate) ⊙ (x·up))`.
pub fn swiglu_ffn<S: Scalar>(
    tape: &mut Tape<S>,
    x: ValueId,
    gate_w: ValueId,
    up_w: ValueId,
    down_w: ValueId,
) -> Result<ValueId> {
    let g = tape.matmul(x, gate_w)?;
    let g = tape.silu(g)?;
    let u = tape.matmul(x, up_w)?;
    let h = tape.mul(g, u)?;
    tape.matmul(h, down_w)
}

/// RMS-normalize per-head query and key rows (learned gains) ahead of
/// rotary encoding and attention.
pub fn qk_norm<S: Scalar>(
    tape: &mut Tape<S>,
    q: ValueId,
    k: ValueId,
    q_gain: ValueId,
    k_gain: ValueId,
    eps: f64,
) -> Result<(ValueId, ValueId)> {
    Ok((tape.rms_norm(q, q_gain, eps)?, tape.rms_norm(k, k_gain, eps)?))
}

/// Rotate each row's adjacent coordinate pairs by its position angle.
/// Rows sharing a position value receive identical rotations.
pub fn apply_rope<S: Scalar>(
    tape: &mut Tape<S>,
    x: ValueId,
    positions: &[usize],
    base: f64,
) -> Result<ValueId> {
    let v = tape.value(x);
    let (rows, cols) = match v.shape() {
        [r, c] => (*r, *c),
        s => return Err(Error::shape("apply_rope", s, &[])),
    };
    if rows != positions.len() {
        return Err(Error::Contract(format!(
            "apply_rope: {rows} rows vs {} positions",
            positions.len()
        )));
    }
    let (cos, sin) = rope_angles(positions, cols, base)?;
    tape.rope(x, &cast_angles(&cos), &cast_angles(&sin))
}

/// `(1 + scale) ⊙ h + shift` with scale and shift affine in the timestep
/// embedding. Rejects configs without the modulation toggle.
pub fn adaln_modulate<S: Scalar>(
    tape: &mut Tape<S>,
    config: &ModelConfig,
    h: ValueId,
    t_emb: ValueId,
    scale_w: ValueId,
    shift_w: ValueId,
) -> Result<ValueId> {
    if !config.adaln_enabled {
        return Err(Error::Contract(
            "adaln_modulate called with adaln_enabled = false".into(),
        ));
    }
    modulate(tape, h, t_emb, scale_w, shift_w)
}

pub(crate) fn modulate<S: Scalar>(
    tape: &mut Tape<S>,
    h: ValueId,
    t_emb: ValueId,
    scale_w: ValueId,
    shift_w: ValueId,
) -> Result<ValueId> {
    let scale = tape.matmul(t_emb, scale_w)?;
    let shift = tape.matmul(t_emb, shift_w)?;
    let scaled = tape.mul(scale, h)?;
    let h = tape.add(h, scaled)?;
    tape.add(h, shift)
}

/// QK-norm then rotary encoding, applied head slice by head slice over
/// concatenated head columns. `gains` holds one row per head; the angle
/// tables are shared by every head.
pub(crate) fn process_heads<S: Scalar>(
    tape: &mut Tape<S>,
    x: ValueId,
    gains: ValueId,
    n_heads: usize,
    head_dim: usize,
    cos: &[S],
    sin: &[S],
) -> Result<ValueId> {
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let xh = tape.slice_cols(x, h * head_dim, (h + 1) * head_dim)?;
        let grow = tape.gather_rows(gains, &[h])?;
        let gain = tape.reshape(grow, &[head_dim])?;
        let normed = tape.rms_norm(xh, gain, RMS_EPS)?;
        heads.push(tape.rope(normed, cos, sin)?);
    }
    tape.concat_cols(&heads)
}

/// Joint masked attention over processed projections. K rows must already
/// be normalized and rotated; V rows are raw value projections. Query head
/// `h` reads kv head `h / (n_heads / n_kv_heads)`.
pub(crate) fn attention_mix<S: Scalar>(
    tape: &mut Tape<S>,
    q: ValueId,
    k: ValueId,
    v: ValueId,
    mask: &BoolMat,
    n_heads: usize,
    n_kv_heads: usize,
    head_dim: usize,
) -> Result<ValueId> {
    let scale = S::from_f64(1.0 / (head_dim as f64).sqrt());
    let group = n_heads / n_kv_heads;
    let mut kv_cache: Vec<Option<(ValueId, ValueId)>> = vec![None; n_kv_heads];
    let mut outs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let j = h / group;
        let (kt, vj) = match kv_cache[j] {
            Some(pair) => pair,
            None => {
                let kj = tape.slice_cols(k, j * head_dim, (j + 1) * head_dim)?;
                let kt = tape.transpose(kj)?;
                let vj = tape.slice_cols(v, j * head_dim, (j + 1) * head_dim)?;
                kv_cache[j] = Some((kt, vj));
                (kt, vj)
            }
        };
        let qh = tape.slice_cols(q, h * head_dim, (h + 1) * head_dim)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.mul_scalar(scores, scale)?;
        let probs = tape.softmax_masked(scores, mask)?;
        outs.push(tape.matmul(probs, vj)?);
    }
    tape.concat_cols(&outs)
}

/// Attention sublayer over pre-normalized rows in expert-major order:
/// per-expert Q/K/V, one joint masked softmax, per-expert O projection.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_sublayer<S: Scalar>(
    tape: &mut Tape<S>,
    config: &ModelConfig,
    normed_serial: ValueId,
    normed_parallel: ValueId,
    serial: &BoundExpert,
    parallel: &BoundExpert,
    q_gains: ValueId,
    k_gains: ValueId,
    mask: &BoolMat,
    cos: &[S],
    sin: &[S],
) -> Result<ValueId> {
    let hd = config.head_dim();
    let ns = tape.value(normed_serial).shape()[0];
    let n = ns + tape.value(normed_parallel).shape()[0];

    let qs = tape.matmul(normed_serial, serial.wq)?;
    let qp = tape.matmul(normed_parallel, parallel.wq)?;
    let q = tape.concat_rows(&[qs, qp])?;
    let ks = tape.matmul(normed_serial, serial.wk)?;
    let kp = tape.matmul(normed_parallel, parallel.wk)?;
    let k = tape.concat_rows(&[ks, kp])?;
    let vs = tape.matmul(normed_serial, serial.wv)?;
    let vp = tape.matmul(normed_parallel, parallel.wv)?;
    let v = tape.concat_rows(&[vs, vp])?;

    let q = process_heads(tape, q, q_gains, config.n_heads, hd, cos, sin)?;
    let k = process_heads(tape, k, k_gains, config.n_kv_heads, hd, cos, sin)?;
    let mixed = attention_mix(tape, q, k, v, mask, config.n_heads, config.n_kv_heads, hd)?;

    let ms = tape.slice_rows(mixed, 0, ns)?;
    let mp = tape.slice_rows(mixed, ns, n)?;
    let os = tape.matmul(ms, serial.wo)?;
    let op = tape.matmul(mp, parallel.wo)?;
    tape.concat_rows(&[os, op])
}

/// One attention sublayer over already-normalized hidden states in caller
/// row order. Rows are routed to their expert's projections by mode; the
/// masked softmax is joint across all rows.
pub fn gqa_attention<S: Scalar>(
    tape: &mut Tape<S>,
    params: &ModelParams<S>,
    layer: usize,
    x: ValueId,
    mask: &BoolMat,
    positions: &[usize],
    modes: &[Mode],
) -> Result<ValueId> {
    let config = &params.config;
    let n = tape.value(x).shape().first().copied().unwrap_or(0);
    if layer >= params.layers.len() {
        return Err(Error::Contract(format!(
            "layer {layer} out of range for {} layers",
            params.layers.len()
        )));
    }
    if mask.rows() != n || mask.cols() != n {
        return Err(Error::Contract(format!(
            "attention mask is {}x{} but the sequence has {n} rows",
            mask.rows(),
            mask.cols()
        )));
    }
    if positions.len() != n || modes.len() != n {
        return Err(Error::Contract(format!(
            "positions ({}) and modes ({}) must both cover {n} rows",
            positions.len(),
            modes.len()
        )));
    }

    let lp = &params.layers[layer];
    let leaf_expert = |tape: &mut Tape<S>, e: &super::params::ExpertParams<S>| BoundExpert {
        wq: tape.leaf(e.wq.clone()),
        wk: tape.leaf(e.wk.clone()),
        wv: tape.leaf(e.wv.clone()),
        wo: tape.leaf(e.wo.clone()),
        ffn_gate: tape.leaf(e.ffn_gate.clone()),
        ffn_up: tape.leaf(e.ffn_up.clone()),
        ffn_down: tape.leaf(e.ffn_down.clone()),
        norm_attn: tape.leaf(e.norm_attn.clone()),
        norm_ffn: tape.leaf(e.norm_ffn.clone()),
        adaln: None,
    };
    let serial = leaf_expert(tape, &lp.serial);
    let parallel = leaf_expert(tape, &lp.parallel);
    let q_gains = tape.leaf(params.q_gains.clone());
    let k_gains = tape.leaf(params.k_gains.clone());

    // Permute into expert-major order, run, permute back.
    let mut perm: Vec<usize> = (0..n).filter(|&i| modes[i] == Mode::Serial).collect();
    let ns = perm.len();
    perm.extend((0..n).filter(|&i| modes[i] == Mode::Parallel));
    let mut inv = vec![0usize; n];
    for (row, &orig) in perm.iter().enumerate() {
        inv[orig] = row;
    }
    let mut mask_perm = BoolMat::new_false(n, n);
    for i in 0..n {
        for j in 0..n {
            mask_perm.set(i, j, mask.get(perm[i], perm[j]));
        }
    }
    let pos_perm: Vec<usize> = perm.iter().map(|&i| positions[i]).collect();
    let (cos, sin) = rope_angles(&pos_perm, config.head_dim(), config.rope_base)?;
    let (cos, sin) = (cast_angles::<S>(&cos), cast_angles::<S>(&sin));

    let xp = tape.gather_rows(x, &perm)?;
    let xs = tape.slice_rows(xp, 0, ns)?;
    let xpar = tape.slice_rows(xp, ns, n)?;
    let out = attention_sublayer(
        tape, config, xs, xpar, &serial, &parallel, q_gains, k_gains, &mask_perm, &cos, &sin,
    )?;
    tape.gather_rows(out, &inv)
}

struct EmbeddedSequence {
    /// Hidden rows `[n, d]` in expert-major order.
    h0: ValueId,
    /// Timestep-embedding rows aligned with the parallel part, if any.
    t_par: Option<ValueId>,
    serial_indices: Vec<usize>,
    parallel_indices: Vec<usize>,
    /// `(segment_index, offset_in_parallel_part, length)`.
    parallel_segments: Vec<(usize, usize, usize)>,
}

fn embed_segments<S: Scalar>(
    tape: &mut Tape<S>,
    bound: &BoundParams,
    config: &ModelConfig,
    layout: &SequenceLayout,
    inputs: &[SegmentInput<S>],
) -> Result<EmbeddedSequence> {
    if inputs.len() != layout.segments().len() {
        return Err(Error::Layout(format!(
            "{} segment inputs for {} layout segments",
            inputs.len(),
            layout.segments().len()
        )));
    }

    let mut serial_parts = Vec::new();
    let mut parallel_parts = Vec::new();
    let mut t_emb_parts = Vec::new();
    let mut serial_indices = Vec::new();
    let mut parallel_indices = Vec::new();
    let mut parallel_segments = Vec::new();
    let mut offset = 0usize;
    let mut par_offset = 0usize;

    for (si, (seg, input)) in layout.segments().iter().zip(inputs).enumerate() {
        match (seg.modality, input) {
            (Modality::Text | Modality::Condition, SegmentInput::Tokens { ids, nulled }) => {
                if seg.mode != Mode::Serial {
                    return Err(Error::Layout(format!(
                        "segment {si}: token segments must be serial"
                    )));
                }
                if ids.len() != seg.length {
                    return Err(Error::Layout(format!(
                        "segment {si}: {} ids for length {}",
                        ids.len(),
                        seg.length
                    )));
                }
                if let Some(&bad) = ids.iter().find(|&&id| id >= config.vocab_size) {
                    return Err(Error::Contract(format!(
                        "segment {si}: token id {bad} exceeds vocab {}",
                        config.vocab_size
                    )));
                }
                if *nulled && seg.modality != Modality::Condition {
                    return Err(Error::Contract(format!(
                        "segment {si}: null substitution applies to condition segments only"
                    )));
                }
                let rows = if *nulled {
                    tape.gather_rows(bound.null_condition, &vec![0; ids.len()])?
                } else {
                    tape.embedding(bound.token_embedding, ids)?
                };
                serial_parts.push(rows);
                serial_indices.extend(offset..offset + seg.length);
            }
            (Modality::Latent3d, SegmentInput::Latents { x_t, t }) => {
                if seg.mode != Mode::Parallel {
                    return Err(Error::Layout(format!(
                        "segment {si}: latent segments must be parallel"
                    )));
                }
                if x_t.shape() != [seg.length, config.latent_dim] {
                    return Err(Error::shape(
                        "embed_segments",
                        x_t.shape(),
                        &[seg.length, config.latent_dim],
                    ));
                }
                if !t.is_finite() || !(0.0..=1.0).contains(t) {
                    return Err(Error::Contract(format!(
                        "segment {si}: flow time {t} outside [0, 1]"
                    )));
                }
                let lat = tape.leaf(x_t.clone());
                let proj = tape.matmul(lat, bound.connector_w)?;
                let proj = tape.add_bias(proj, bound.connector_b)?;
                let feats = Tensor::from_f64_slice(
                    &[1, config.d_model],
                    &time_features(*t, config.d_model),
                )?;
                let feats = tape.leaf(feats);
                let t_row = tape.matmul(feats, bound.time_proj)?;
                let t_rows = tape.gather_rows(t_row, &vec![0; seg.length])?;
                let h_seg = tape.add(proj, t_rows)?;
                parallel_parts.push(h_seg);
                t_emb_parts.push(t_rows);
                parallel_segments.push((si, par_offset, seg.length));
                parallel_indices.extend(offset..offset + seg.length);
                par_offset += seg.length;
            }
            (m, SegmentInput::Tokens { .. }) => {
                return Err(Error::Layout(format!(
                    "segment {si}: {m:?} segment cannot take token ids"
                )));
            }
            (m, SegmentInput::Latents { .. }) => {
                return Err(Error::Layout(format!(
                    "segment {si}: {m:?} segment cannot take latents"
                )));
            }
        }
        offset += seg.length;
    }

    let mut parts = serial_parts;
    parts.extend(parallel_parts);
    let h0 = tape.concat_rows(&parts)?;
    let t_par = if t_emb_parts.is_empty() {
        None
    } else {
        Some(tape.concat_rows(&t_emb_parts)?)
    };
    Ok(EmbeddedSequence {
        h0,
        t_par,
        serial_indices,
        parallel_indices,
        parallel_segments,
    })
}

/// Run the full model over one laid-out sequence. Serial rows produce
/// next-token logits; parallel rows produce velocity predictions. With
/// `trainable`, parameter leaves participate in `backward`.
pub fn forward_graph<S: Scalar>(
    tape: &mut Tape<S>,
    params: &ModelParams<S>,
    layout: &SequenceLayout,
    inputs: &[SegmentInput<S>],
    trainable: bool,
) -> Result<ForwardGraph> {
    let config = &params.config;
    config.validate()?;
    let bound = bind_params(tape, params, trainable);
    let emb = embed_segments(tape, &bound, config, layout, inputs)?;

    let n = layout.total_len();
    let ns = emb.serial_indices.len();
    let perm: Vec<usize> = emb
        .serial_indices
        .iter()
        .chain(&emb.parallel_indices)
        .copied()
        .collect();

    let mask = compile_mask(layout)?;
    let pmap = assign_positions(layout);
    let mut mask_perm = BoolMat::new_false(n, n);
    for i in 0..n {
        for j in 0..n {
            mask_perm.set(i, j, mask.get(perm[i], perm[j]));
        }
    }
    let pos_perm: Vec<usize> = perm.iter().map(|&i| pmap.pos()[i]).collect();
    let (cos, sin) = rope_angles(&pos_perm, config.head_dim(), config.rope_base)?;
    let (cos, sin) = (cast_angles::<S>(&cos), cast_angles::<S>(&sin));

    let mut h = emb.h0;
    for (serial, parallel) in &bound.layers {
        let hs = tape.slice_rows(h, 0, ns)?;
        let hp = tape.slice_rows(h, ns, n)?;
        let norm_s = tape.rms_norm(hs, serial.norm_attn, RMS_EPS)?;
        let mut norm_p = tape.rms_norm(hp, parallel.norm_attn, RMS_EPS)?;
        if let (Some(ad), Some(t_par)) = (&parallel.adaln, emb.t_par) {
            norm_p = modulate(tape, norm_p, t_par, ad.attn_scale, ad.attn_shift)?;
        }
        let attn = attention_sublayer(
            tape, config, norm_s, norm_p, serial, parallel, bound.q_gains, bound.k_gains,
            &mask_perm, &cos, &sin,
        )?;
        h = tape.add(h, attn)?;

        let hs = tape.slice_rows(h, 0, ns)?;
        let hp = tape.slice_rows(h, ns, n)?;
        let norm_s = tape.rms_norm(hs, serial.norm_ffn, RMS_EPS)?;
        let mut norm_p = tape.rms_norm(hp, parallel.norm_ffn, RMS_EPS)?;
        if let (Some(ad), Some(t_par)) = (&parallel.adaln, emb.t_par) {
            norm_p = modulate(tape, norm_p, t_par, ad.ffn_scale, ad.ffn_shift)?;
        }
        let fs = swiglu_ffn(tape, norm_s, serial.ffn_gate, serial.ffn_up, serial.ffn_down)?;
        let fp = swiglu_ffn(tape, norm_p, parallel.ffn_gate, parallel.ffn_up, parallel.ffn_down)?;
        let f = tape.concat_rows(&[fs, fp])?;
        h = tape.add(h, f)?;
    }

    let hs = tape.slice_rows(h, 0, ns)?;
    let logits = tape.matmul(hs, bound.text_head_w)?;
    let text_logits = tape.add_bias(logits, bound.text_head_b)?;

    let hp = tape.slice_rows(h, ns, n)?;
    let v_all = tape.matmul(hp, bound.flow_head_w)?;
    let v_all = tape.add_bias(v_all, bound.flow_head_b)?;
    let mut velocities = Vec::with_capacity(emb.parallel_segments.len());
    for &(si, off, len) in &emb.parallel_segments {
        velocities.push((si, tape.slice_rows(v_all, off, off + len)?));
    }

    Ok(ForwardGraph {
        text_logits,
        serial_indices: emb.serial_indices,
        velocities,
        param_ids: bound.named,
    })
}
