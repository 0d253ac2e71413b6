//! Segment structure of a multimodal sample, compiled into the hybrid
//! causal-parallel attention mask and the block-shared position map.
//!
//! The visibility rule works on groups: every serial token forms its own
//! group, every parallel segment forms one group, and groups are ordered by
//! sequence position. Token i sees token j iff j's group is earlier, or they
//! share a group and the group is parallel (full intra-block visibility) or
//! j does not come after i (causal within serial).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::BoolMat;

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Condition,
    Latent3d,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Serial,
    Parallel,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct Segment {
    pub modality: Modality,
    pub mode: Mode,
    pub length: usize,
    pub block_id: usize,
}

/// Ordered segments of one sample. Construction validates every invariant,
/// so downstream code can treat a layout as well-formed.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct SequenceLayout {
    segments: Vec<Segment>,
    total_len: usize,
}

impl SequenceLayout {
    pub fn new(segments: Vec<Segment>) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::Layout("layout must have at least one segment".into()));
        }
        let mut prev_block: Option<usize> = None;
        let mut total_len = 0usize;
        for (i, seg) in segments.iter().enumerate() {
            if seg.length == 0 {
                return Err(Error::Layout(format!("segment {i} has zero length")));
            }
            if let Some(prev) = prev_block {
                if seg.block_id <= prev {
                    return Err(Error::Layout(format!(
                        "segment {i} block_id {} does not increase past {prev}",
                        seg.block_id
                    )));
                }
            }
            prev_block = Some(seg.block_id);
            total_len += seg.length;
        }
        Ok(SequenceLayout { segments, total_len })
    }

    /// Build from (modality, mode, length) triples, numbering block ids in
    /// declaration order.
    pub fn from_parts(parts: &[(Modality, Mode, usize)]) -> Result<Self> {
        let segments = parts
            .iter()
            .enumerate()
            .map(|(i, &(modality, mode, length))| Segment {
                modality,
                mode,
                length,
                block_id: i,
            })
            .collect();
        SequenceLayout::new(segments)
    }

    /// Parse a textual description like `"text:4,block:8,text:2"`.
    /// Kinds: `text` and `cond` are serial, `block` is a parallel latent
    /// block. Errors carry the byte offset of the offending part.
    pub fn parse(s: &str) -> Result<Self> {
        let mut parts = Vec::new();
        let mut offset = 0usize;
        for piece in s.split(',') {
            let start = offset;
            offset += piece.len() + 1;
            let trimmed = piece.trim();
            let pos = start + (piece.len() - piece.trim_start().len());
            let Some((kind, count)) = trimmed.split_once(':') else {
                return Err(Error::Parse {
                    pos,
                    msg: format!("expected kind:length, got {trimmed:?}"),
                });
            };
            let length: usize = count.trim().parse().map_err(|_| Error::Parse {
                pos,
                msg: format!("invalid length {:?}", count.trim()),
            })?;
            let (modality, mode) = match kind.trim() {
                "text" => (Modality::Text, Mode::Serial),
                "cond" => (Modality::Condition, Mode::Serial),
                "block" => (Modality::Latent3d, Mode::Parallel),
                other => {
                    return Err(Error::Parse {
                        pos,
                        msg: format!("unknown segment kind {other:?} (text|cond|block)"),
                    })
                }
            };
            parts.push((modality, mode, length));
        }
        SequenceLayout::from_parts(&parts).map_err(|e| match e {
            Error::Layout(msg) => Error::Parse { pos: 0, msg },
            other => other,
        })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn total_len(&self) -> usize {
        self.total_len
    }

    /// Group index and mode of the token at sequence position `idx`.
    /// Serial tokens are singleton groups; a parallel segment is one group.
    pub fn group_of(&self, idx: usize) -> Result<(usize, Mode)> {
        if idx >= self.total_len {
            return Err(Error::Layout(format!(
                "token index {idx} out of range for length {}",
                self.total_len
            )));
        }
        let mut tok = 0usize;
        let mut group = 0usize;
        for seg in &self.segments {
            if idx < tok + seg.length {
                return Ok(match seg.mode {
                    Mode::Serial => (group + (idx - tok), Mode::Serial),
                    Mode::Parallel => (group, Mode::Parallel),
                });
            }
            tok += seg.length;
            group += match seg.mode {
                Mode::Serial => seg.length,
                Mode::Parallel => 1,
            };
        }
        unreachable!("idx checked against total_len");
    }

    /// Mode of each token position, for expert assignment.
    pub fn token_modes(&self) -> Vec<Mode> {
        let mut modes = Vec::with_capacity(self.total_len);
        for seg in &self.segments {
            modes.extend(std::iter::repeat(seg.mode).take(seg.length));
        }
        modes
    }

    /// Modality of each token position.
    pub fn token_modalities(&self) -> Vec<Modality> {
        let mut out = Vec::with_capacity(self.total_len);
        for seg in &self.segments {
            out.extend(std::iter::repeat(seg.modality).take(seg.length));
        }
        out
    }
}

/// Compiled token-to-token visibility. `bits[i][j]` means position i may
/// attend to position j.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct AttentionMask {
    n: usize,
    bits: BoolMat,
}

impl AttentionMask {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn bits(&self) -> &BoolMat {
        &self.bits
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits.get(i, j)
    }
}

/// Position index per token. Parallel blocks share one value; serial
/// tokens advance the counter by one each.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct PositionMap {
    pos: Vec<usize>,
}

impl PositionMap {
    pub fn pos(&self) -> &[usize] {
        &self.pos
    }

    pub fn len(&self) -> usize {
        self.pos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pos.is_empty()
    }
}

/// Compile the group visibility rule into a dense mask in one pass.
pub fn compile_mask(layout: &SequenceLayout) -> Result<AttentionMask> {
    if layout.segments().is_empty() {
        return Err(Error::Layout("cannot compile an empty layout".into()));
    }
    let n = layout.total_len();
    // Per-token group index and parallel flag, built segment by segment.
    let mut group = Vec::with_capacity(n);
    let mut parallel = Vec::with_capacity(n);
    let mut g = 0usize;
    for seg in layout.segments() {
        match seg.mode {
            Mode::Serial => {
                for _ in 0..seg.length {
                    group.push(g);
                    parallel.push(false);
                    g += 1;
                }
            }
            Mode::Parallel => {
                for _ in 0..seg.length {
                    group.push(g);
                    parallel.push(true);
                }
                g += 1;
            }
        }
    }
    let mut bits = BoolMat::new_false(n, n);
    for i in 0..n {
        for j in 0..n {
            let visible = group[j] < group[i]
                || (group[j] == group[i] && (parallel[i] || j <= i));
            bits.set(i, j, visible);
        }
    }
    Ok(AttentionMask { n, bits })
}

/// Shared-position counter: one value per serial token, one value per
/// parallel segment.
pub fn assign_positions(layout: &SequenceLayout) -> PositionMap {
    let mut pos = Vec::with_capacity(layout.total_len());
    let mut counter = 0usize;
    for seg in layout.segments() {
        match seg.mode {
            Mode::Serial => {
                for _ in 0..seg.length {
                    pos.push(counter);
                    counter += 1;
                }
            }
            Mode::Parallel => {
                for _ in 0..seg.length {
                    pos.push(counter);
                }
                counter += 1;
            }
        }
    }
    PositionMap { pos }
}

/// Test oracle: evaluate the pairwise group rule for one (i, j) directly
/// from the segment list, without building the matrix.
pub fn brute_force_visibility(layout: &SequenceLayout, i: usize, j: usize) -> Result<bool> {
    let (gi, mode_i) = layout.group_of(i)?;
    let (gj, _) = layout.group_of(j)?;
    Ok(gj < gi || (gj == gi && (mode_i == Mode::Parallel || j <= i)))
}
