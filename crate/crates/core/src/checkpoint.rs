//! Binary checkpoints of a `SimulationState`.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic "DRFTCKPT" | u32 version | u64 len | header JSON
//! u64 n_tensors | per tensor: u32 rank, u64 dims.., f64 values..
//! per tensor: u64 adam steps, f64 lr, beta1, beta2, eps, f64 m.., f64 v..
//! rng: 32-byte seed, u64 stream, u128 word position
//! u64 len | caches and log JSON
//! 32-byte SHA-256 of everything above
//! ```

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::HorizonConfig;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams, Standardizer, TrainableModel};
use crate::nn::{AdamHyper, AdamState, Tensor};
use crate::sampling::{DynamicsHistory, ErrorCache};
use crate::trainer::{PredictionRow, SimulationState, TrainConfig};

pub const MAGIC: &[u8; 8] = b"DRFTCKPT";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model_config: ModelConfig,
    train_config: TrainConfig,
    horizon: HorizonConfig,
    gamma: f64,
    standardizer: Standardizer,
    day: usize,
    examples_consumed: u64,
    final_offline_loss: Option<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Extras {
    errors: ErrorCache,
    dynamics: DynamicsHistory,
    log: Vec<PredictionRow>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_blob(out: &mut Vec<u8>, blob: &[u8]) {
    put_u64(out, blob.len() as u64);
    out.extend_from_slice(blob);
}

/// Serializes the state to bytes.
pub fn encode_checkpoint(state: &SimulationState) -> Result<Vec<u8>> {
    let header = Header {
        model_config: state.model.config,
        train_config: state.train.clone(),
        horizon: state.horizon,
        gamma: state.model.gamma,
        standardizer: state.model.standardizer.clone(),
        day: state.day,
        examples_consumed: state.examples_consumed,
        final_offline_loss: state.final_offline_loss.is_finite().then_some(state.final_offline_loss),
    };
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_blob(&mut out, &serde_json::to_vec(&header)?);

    let tensors = state.model.params.tensors();
    put_u64(&mut out, tensors.len() as u64);
    for t in &tensors {
        put_u32(&mut out, t.shape().len() as u32);
        for &dim in t.shape() {
            put_u64(&mut out, dim as u64);
        }
        put_f64s(&mut out, t.data());
    }
    for st in &state.model.adam {
        put_u64(&mut out, st.step_count);
        let h = st.hyper;
        put_f64s(&mut out, &[h.learning_rate, h.beta1, h.beta2, h.eps]);
        put_f64s(&mut out, st.first_moment.data());
        put_f64s(&mut out, st.second_moment.data());
    }

    out.extend_from_slice(&state.rng.get_seed());
    put_u64(&mut out, state.rng.get_stream());
    out.extend_from_slice(&state.rng.get_word_pos().to_le_bytes());

    let extras = Extras {
        errors: state.errors.clone(),
        dynamics: state.dynamics.clone(),
        log: state.log.clone(),
    };
    put_blob(&mut out, &serde_json::to_vec(&extras)?);

    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

/// Writes the checkpoint through a temporary file so a failed write never
/// leaves a partial checkpoint at `path`.
pub fn save_checkpoint(state: &SimulationState, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(state)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(format!("writing {}", tmp.display()), e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(format!("renaming to {}", path.display()), e))
}

pub fn load_checkpoint(path: &Path) -> Result<SimulationState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode_checkpoint(&bytes)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Integrity(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Integrity("length overflows".into()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Integrity("length overflows".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect())
    }

    fn blob(&mut self) -> Result<&'a [u8]> {
        let n = self.len()?;
        self.take(n)
    }
}

fn integrity<E: std::fmt::Display>(what: &'static str) -> impl Fn(E) -> Error {
    move |e| Error::Integrity(format!("{what}: {e}"))
}

/// Parses checkpoint bytes. Checks run in the order magic, version, digest,
/// so a file from another format version reports the version mismatch.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<SimulationState> {
    if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Integrity("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[MAGIC.len()..MAGIC.len() + 4].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    if bytes.len() < MAGIC.len() + 4 + DIGEST_LEN {
        return Err(Error::Integrity("checkpoint truncated".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Integrity("checksum mismatch (corrupted or truncated file)".into()));
    }

    let mut r = Reader {
        buf: body,
        pos: MAGIC.len() + 4,
    };
    let header: Header = serde_json::from_slice(r.blob()?).map_err(integrity("header"))?;
    header.model_config.validate()?;
    let d = header.model_config.d;
    if header.standardizer.feature_mean.len() != d || header.standardizer.feature_std.len() != d {
        return Err(Error::Integrity("standardizer does not match the model config".into()));
    }

    // the init draw only fixes the tensor layout; every value is overwritten
    let mut params = ModelParams::init(&header.model_config, &mut ChaCha8Rng::seed_from_u64(0))?;
    let n_tensors = r.len()?;
    if n_tensors != params.tensors().len() {
        return Err(Error::Integrity(format!(
            "{n_tensors} tensors stored, the model config implies {}",
            params.tensors().len()
        )));
    }
    for (i, t) in params.tensors_mut().into_iter().enumerate() {
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        if shape != t.shape() {
            return Err(Error::Integrity(format!(
                "tensor {i} has shape {shape:?}, expected {:?}",
                t.shape()
            )));
        }
        let values = r.f64s(t.len())?;
        t.data_mut().copy_from_slice(&values);
    }
    let mut adam = Vec::with_capacity(n_tensors);
    for t in params.tensors() {
        let step_count = r.u64()?;
        let h = r.f64s(4)?;
        let hyper = AdamHyper {
            learning_rate: h[0],
            beta1: h[1],
            beta2: h[2],
            eps: h[3],
        };
        let shape = t.shape().to_vec();
        let first_moment = Tensor::new(shape.clone(), r.f64s(t.len())?)?;
        let second_moment = Tensor::new(shape, r.f64s(t.len())?)?;
        adam.push(AdamState {
            first_moment,
            second_moment,
            step_count,
            hyper,
        });
    }

    let mut rng = ChaCha8Rng::from_seed(r.array::<32>()?);
    rng.set_stream(r.u64()?);
    rng.set_word_pos(u128::from_le_bytes(r.array()?));

    let extras: Extras = serde_json::from_slice(r.blob()?).map_err(integrity("caches"))?;
    if r.pos != body.len() {
        return Err(Error::Integrity(format!("{} trailing bytes", body.len() - r.pos)));
    }

    Ok(SimulationState {
        day: header.day,
        model: TrainableModel {
            config: header.model_config,
            params,
            adam,
            gamma: header.gamma,
            standardizer: header.standardizer,
        },
        horizon: header.horizon,
        train: header.train_config,
        rng,
        errors: extras.errors,
        dynamics: extras.dynamics,
        log: extras.log,
        examples_consumed: header.examples_consumed,
        final_offline_loss: header.final_offline_loss.unwrap_or(f64::NAN),
    })
}
