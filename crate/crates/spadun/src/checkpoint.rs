//! Checkpoint container: a JSON manifest (names, shapes, dtypes, offsets,
//! config fingerprint, format version) followed by raw little-endian
//! tensor payloads. Save -> load -> save is byte-identical.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::net::{ModelConfig, SpaDunParams};
use crate::sampling::MaskPattern;
use crate::tensor::{DType, Parameter, Tensor};

const MAGIC: &[u8; 8] = b"SPDNCKP1";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint format version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("architecture mismatch at parameter {name}: {details}")]
    ArchitectureMismatch { name: String, details: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = CheckpointError> = std::result::Result<T, E>;

/// How the training master mask is reproduced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MasterMaskSpec {
    Generated {
        pattern: MaskPattern,
        cs_ratio: usize,
        height: usize,
        width: usize,
        seed: u64,
        density: f64,
    },
    External {
        path: String,
        pattern: MaskPattern,
    },
}

impl MasterMaskSpec {
    pub fn pattern(&self) -> MaskPattern {
        match self {
            MasterMaskSpec::Generated { pattern, .. } => *pattern,
            MasterMaskSpec::External { pattern, .. } => *pattern,
        }
    }
}

/// Training provenance stored with the weights; the evaluation harness
/// derives seen/unseen labels from it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub master: MasterMaskSpec,
    pub ratio_set: Vec<usize>,
    pub patch: [usize; 2],
    pub noise_sigma: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: DType,
    offset: u64,
    byte_len: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct OptimManifest {
    step: u64,
    /// Entry-name prefixes: moments are stored as `opt.m.<param>` and
    /// `opt.v.<param>` payload entries.
    moment_params: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct RngManifest {
    seed_hex: String,
    word_pos_hi: u64,
    word_pos_lo: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: ModelConfig,
    config_fingerprint: String,
    train_meta: TrainMeta,
    epoch: usize,
    global_step: u64,
    entries: Vec<TensorEntry>,
    optimizer: Option<OptimManifest>,
    rng: Option<RngManifest>,
}

/// Named (first, second) moment buffers per parameter.
pub type MomentSnapshot = Vec<(String, Tensor, Tensor)>;

/// Full training state: parameters, optimizer moments, schedule position,
/// RNG state, and provenance.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub train_meta: TrainMeta,
    pub params: Vec<(String, Tensor)>,
    /// (step counter, per-parameter moment buffers).
    pub optimizer: Option<(u64, MomentSnapshot)>,
    pub epoch: usize,
    pub global_step: u64,
    pub rng: Option<([u8; 32], u128)>,
}

impl Checkpoint {
    pub fn has_optimizer_state(&self) -> bool {
        self.optimizer.is_some()
    }

    /// Rebuilds a parameter set from the stored config and weights.
    pub fn build_model(&self) -> Result<SpaDunParams> {
        use rand::SeedableRng;
        let dtype = self
            .params
            .first()
            .map(|(_, t)| t.dtype())
            .unwrap_or(DType::F32);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut model = SpaDunParams::init(&self.model_config, dtype, &mut rng)
            .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        load_params_into(&mut model, self)?;
        Ok(model)
    }
}

/// FNV-1a 64-bit fingerprint of the canonical config JSON.
pub fn config_fingerprint(config: &ModelConfig) -> String {
    let json = serde_json::to_string(config).expect("config serializes");
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in json.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

fn tensor_bytes(t: &Tensor) -> Vec<u8> {
    match t.dtype() {
        DType::F32 => t
            .as_f32_slice()
            .expect("dtype checked")
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect(),
        DType::F64 => t
            .as_f64_slice()
            .expect("dtype checked")
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect(),
    }
}

fn tensor_from_bytes(bytes: &[u8], shape: &[usize], dtype: DType) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let expected = n * dtype.size_bytes();
    if bytes.len() != expected {
        return Err(CheckpointError::Corrupt(format!(
            "payload slice of {} bytes does not match shape {shape:?} ({expected} bytes)",
            bytes.len()
        )));
    }
    Ok(match dtype {
        DType::F32 => Tensor::from_f32(
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
            shape,
        ),
        DType::F64 => Tensor::from_f64(
            bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
                .collect(),
            shape,
        ),
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let mut entries = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let push = |name: String, t: &Tensor, entries: &mut Vec<TensorEntry>, payload: &mut Vec<u8>| {
        let bytes = tensor_bytes(t);
        entries.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            dtype: t.dtype(),
            offset: payload.len() as u64,
            byte_len: bytes.len() as u64,
        });
        payload.extend_from_slice(&bytes);
    };
    for (name, t) in &ckpt.params {
        push(name.clone(), t, &mut entries, &mut payload);
    }
    let optimizer = ckpt.optimizer.as_ref().map(|(step, moments)| {
        let mut names = Vec::new();
        for (name, m, v) in moments {
            push(format!("opt.m.{name}"), m, &mut entries, &mut payload);
            push(format!("opt.v.{name}"), v, &mut entries, &mut payload);
            names.push(name.clone());
        }
        OptimManifest {
            step: *step,
            moment_params: names,
        }
    });
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: ckpt.model_config.clone(),
        config_fingerprint: config_fingerprint(&ckpt.model_config),
        train_meta: ckpt.train_meta.clone(),
        epoch: ckpt.epoch,
        global_step: ckpt.global_step,
        entries,
        optimizer,
        rng: ckpt.rng.map(|(seed, pos)| RngManifest {
            seed_hex: seed.iter().map(|b| format!("{b:02x}")).collect(),
            word_pos_hi: (pos >> 64) as u64,
            word_pos_lo: pos as u64,
        }),
    };
    let manifest_bytes = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(16 + manifest_bytes.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(manifest_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest_bytes);
    out.extend_from_slice(&payload);
    std::fs::write(path, out).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + mlen {
        return Err(CheckpointError::Corrupt("manifest truncated".into()));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[16..16 + mlen])?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(manifest.format_version));
    }
    let expected_fp = config_fingerprint(&manifest.config);
    if manifest.config_fingerprint != expected_fp {
        return Err(CheckpointError::Corrupt(format!(
            "config fingerprint {} does not match config ({expected_fp})",
            manifest.config_fingerprint
        )));
    }
    let payload = &bytes[16 + mlen..];
    let read_entry = |e: &TensorEntry| -> Result<Tensor> {
        let lo = e.offset as usize;
        let hi = lo + e.byte_len as usize;
        if hi > payload.len() {
            return Err(CheckpointError::Corrupt(format!(
                "entry {} exceeds payload ({} > {})",
                e.name,
                hi,
                payload.len()
            )));
        }
        tensor_from_bytes(&payload[lo..hi], &e.shape, e.dtype)
    };
    let mut params = Vec::new();
    let mut moment_store: std::collections::BTreeMap<String, Tensor> = Default::default();
    for e in &manifest.entries {
        if let Some(rest) = e.name.strip_prefix("opt.") {
            moment_store.insert(rest.to_string(), read_entry(e)?);
        } else {
            params.push((e.name.clone(), read_entry(e)?));
        }
    }
    let optimizer = match &manifest.optimizer {
        Some(om) => {
            let mut moments = Vec::new();
            for name in &om.moment_params {
                let m = moment_store.remove(&format!("m.{name}")).ok_or_else(|| {
                    CheckpointError::Corrupt(format!("missing first moment for {name}"))
                })?;
                let v = moment_store.remove(&format!("v.{name}")).ok_or_else(|| {
                    CheckpointError::Corrupt(format!("missing second moment for {name}"))
                })?;
                moments.push((name.clone(), m, v));
            }
            Some((om.step, moments))
        }
        None => None,
    };
    let rng = match &manifest.rng {
        Some(r) => {
            if r.seed_hex.len() != 64 {
                return Err(CheckpointError::Corrupt("rng seed must be 32 bytes".into()));
            }
            let mut seed = [0u8; 32];
            for (i, chunk) in r.seed_hex.as_bytes().chunks_exact(2).enumerate() {
                let s = std::str::from_utf8(chunk)
                    .map_err(|_| CheckpointError::Corrupt("bad rng seed hex".into()))?;
                seed[i] = u8::from_str_radix(s, 16)
                    .map_err(|_| CheckpointError::Corrupt("bad rng seed hex".into()))?;
            }
            let pos = ((r.word_pos_hi as u128) << 64) | r.word_pos_lo as u128;
            Some((seed, pos))
        }
        None => None,
    };
    Ok(Checkpoint {
        model_config: manifest.config,
        train_meta: manifest.train_meta,
        params,
        optimizer,
        epoch: manifest.epoch,
        global_step: manifest.global_step,
        rng,
    })
}

/// Copies checkpoint weights into an existing model, verifying every name,
/// shape, and dtype. The checkpoint must cover the model exactly.
pub fn load_params_into(model: &mut SpaDunParams, ckpt: &Checkpoint) -> Result<()> {
    let stored: std::collections::BTreeMap<&str, &Tensor> =
        ckpt.params.iter().map(|(n, t)| (n.as_str(), t)).collect();
    if stored.len() != ckpt.params.len() {
        return Err(CheckpointError::Corrupt(
            "duplicate parameter names in checkpoint".into(),
        ));
    }
    let mut missing: Option<CheckpointError> = None;
    let mut used = 0usize;
    model.visit_mut(&mut |p: &mut Parameter| {
        if missing.is_some() {
            return;
        }
        match stored.get(p.name.as_str()) {
            None => {
                missing = Some(CheckpointError::ArchitectureMismatch {
                    name: p.name.clone(),
                    details: "parameter not present in checkpoint".into(),
                });
            }
            Some(t) => {
                if t.shape() != p.tensor.shape() || t.dtype() != p.tensor.dtype() {
                    missing = Some(CheckpointError::ArchitectureMismatch {
                        name: p.name.clone(),
                        details: format!(
                            "checkpoint has {:?} {}, model expects {:?} {}",
                            t.shape(),
                            t.dtype(),
                            p.tensor.shape(),
                            p.tensor.dtype()
                        ),
                    });
                } else {
                    p.assign((*t).clone());
                    used += 1;
                }
            }
        }
    });
    if let Some(err) = missing {
        return Err(err);
    }
    if used != ckpt.params.len() {
        return Err(CheckpointError::Corrupt(format!(
            "checkpoint carries {} parameters but the model consumed {used}",
            ckpt.params.len()
        )));
    }
    Ok(())
}
