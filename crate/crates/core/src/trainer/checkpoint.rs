//! Binary checkpoint format.
//!
//! Layout: magic `HSEQ`, u32 LE format version, u64 LE header length, JSON
//! header (config, schedule, cursor, rng state, tensor manifest), then raw
//! little-endian f32 payloads in manifest order. Training is f32; the
//! format stores nothing wider.

use std::fs::File;
use std::io::{self, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::numerics::Tensor;
use crate::worldgen::DatasetConfig;

use super::adamw::Moments;
use super::train::TrainSchedule;

pub const MAGIC: [u8; 4] = *b"HSEQ";
pub const FORMAT_VERSION: u32 = 1;

/// Position inside the staged schedule.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleCursor {
    pub stage: usize,
    pub step_in_stage: usize,
    pub global_step: usize,
}

/// Complete ChaCha8 state, split into JSON-friendly words.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos_hi: u64,
    pub word_pos_lo: u64,
    pub stream: u64,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> RngState {
        let pos = rng.get_word_pos();
        RngState {
            seed: rng.get_seed(),
            word_pos_hi: (pos >> 64) as u64,
            word_pos_lo: pos as u64,
            stream: rng.get_stream(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(((self.word_pos_hi as u128) << 64) | self.word_pos_lo as u128);
        rng
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload region.
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    schedule: TrainSchedule,
    dataset: DatasetConfig,
    cursor: ScheduleCursor,
    rng: RngState,
    opt_step: u64,
    manifest: Vec<ManifestEntry>,
}

/// A full training snapshot: resuming from it continues bit-exactly.
pub struct Checkpoint {
    pub config: ModelConfig,
    pub schedule: TrainSchedule,
    pub dataset: DatasetConfig,
    pub cursor: ScheduleCursor,
    pub rng: RngState,
    pub params: ModelParams<f32>,
    pub moments: Moments<f32>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        // Manifest walks params in canonical order, then first and second
        // moments per tensor in the same order.
        let holders = self.params.named_tensors();
        let mut manifest = Vec::with_capacity(holders.len() + 2 * self.moments.entries.len());
        let mut offset = 0u64;
        {
            let mut add = |name: String, shape: &[usize]| {
                let numel: usize = shape.iter().product();
                manifest.push(ManifestEntry { name, shape: shape.to_vec(), offset });
                offset += (numel * 4) as u64;
            };
            for (name, t) in &holders {
                add(name.clone(), t.shape());
            }
            for (name, m, v) in &self.moments.entries {
                add(format!("m.{name}"), m.shape());
                add(format!("v.{name}"), v.shape());
            }
        }

        let header = Header {
            config: self.config.clone(),
            schedule: self.schedule.clone(),
            dataset: self.dataset.clone(),
            cursor: self.cursor,
            rng: self.rng.clone(),
            opt_step: self.moments.step,
            manifest,
        };
        let header_bytes = serde_json::to_vec(&header)?;

        w.write_all(&MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
        w.write_all(&header_bytes)?;
        let mut write_tensor = |t: &Tensor<f32>| -> Result<()> {
            let mut buf = Vec::with_capacity(t.numel() * 4);
            for &x in t.data() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
            w.write_all(&buf)?;
            Ok(())
        };
        for (_, t) in &holders {
            write_tensor(t)?;
        }
        for (_, m, v) in &self.moments.entries {
            write_tensor(m)?;
            write_tensor(v)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Checkpoint> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| corrupt("file too short for a checkpoint"))?;
        if magic != MAGIC {
            return Err(corrupt(format!("bad magic {magic:?}")));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word).map_err(|_| corrupt("truncated version field"))?;
        let version = u32::from_le_bytes(word);
        if version != FORMAT_VERSION {
            return Err(corrupt(format!(
                "format version {version} unsupported, expected {FORMAT_VERSION}"
            )));
        }
        let mut len8 = [0u8; 8];
        r.read_exact(&mut len8).map_err(|_| corrupt("truncated header length"))?;
        let header_len = u64::from_le_bytes(len8) as usize;
        let mut header_bytes = vec![0u8; header_len];
        r.read_exact(&mut header_bytes).map_err(|_| corrupt("truncated header"))?;
        let header: Header = serde_json::from_slice(&header_bytes)?;

        header.config.validate()?;
        header.schedule.validate()?;
        header.dataset.validate()?;

        // Rebuild parameters by overwriting a seed-zero skeleton.
        let mut params = ModelParams::<f32>::init(&header.config, &mut ChaCha8Rng::seed_from_u64(0))?;
        let mut moments = Moments::zeros_like(&params);
        moments.step = header.opt_step;

        let n_params = params.tensor_count();
        if header.manifest.len() != 3 * n_params {
            return Err(corrupt(format!(
                "manifest lists {} tensors, model needs {}",
                header.manifest.len(),
                3 * n_params
            )));
        }

        let mut expected_offset = 0u64;
        let mut moment_idx = 0usize;
        for (i, entry) in header.manifest.iter().enumerate() {
            if entry.offset != expected_offset {
                return Err(corrupt(format!(
                    "tensor {} at offset {}, expected {}",
                    entry.name, entry.offset, expected_offset
                )));
            }
            let numel: usize = entry.shape.iter().product();
            let mut buf = vec![0u8; numel * 4];
            r.read_exact(&mut buf)
                .map_err(|_| corrupt(format!("payload truncated at {}", entry.name)))?;
            let data: Vec<f32> = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let tensor = Tensor::new(&entry.shape, data)?;
            expected_offset += (numel * 4) as u64;

            if i < n_params {
                params.set_tensor(&entry.name, &tensor)?;
            } else {
                let slot = moment_idx / 2;
                let (pname, m, v) = &mut moments.entries[slot];
                let (prefix, target) = if moment_idx % 2 == 0 {
                    ("m.", &mut *m)
                } else {
                    ("v.", &mut *v)
                };
                let want = format!("{prefix}{pname}");
                if entry.name != want {
                    return Err(corrupt(format!(
                        "moment tensor {} out of order, expected {want}",
                        entry.name
                    )));
                }
                if tensor.shape() != target.shape() {
                    return Err(corrupt(format!("moment tensor {} has wrong shape", entry.name)));
                }
                *target = tensor;
                moment_idx += 1;
            }
        }
        // Trailing bytes mean the file does not describe this model.
        let mut extra = [0u8; 1];
        match r.read(&mut extra) {
            Ok(0) => {}
            Ok(_) => return Err(corrupt("trailing bytes after payload")),
            Err(e) => return Err(e.into()),
        }

        Ok(Checkpoint {
            config: header.config,
            schedule: header.schedule,
            dataset: header.dataset,
            cursor: header.cursor,
            rng: header.rng,
            params,
            moments,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = io::BufWriter::new(File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        Checkpoint::read_from(io::BufReader::new(File::open(path)?))
    }
}
