//! Checkpoint persistence: a JSON manifest followed by raw little-endian
//! payload arrays. Inspectable, diffable, and byte-stable: saving the same
//! state twice produces identical files.

use crate::nn::{build_model, Model, ModelConfig, NnError};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad checkpoint magic")]
    BadMagic,
    #[error("manifest parse failure: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("payload length mismatch: section {section} expected {expected}, found {found}")]
    LengthMismatch {
        section: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("asym hash mismatch: manifest {manifest}, recomputed {recomputed}")]
    HashMismatch { manifest: String, recomputed: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

const MAGIC: &[u8; 8] = b"ASYMCKPT";
const FORMAT_VERSION: u32 = 1;

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Training provenance recorded in the manifest. Deliberately free of
/// wall-clock fields so identical runs write identical files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Provenance {
    pub epochs_trained: usize,
    pub final_train_loss: Option<f64>,
    pub shuffle_seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: ModelConfig,
    trainable_count: usize,
    param_len: usize,
    mask_len: usize,
    fixed_len: usize,
    figlu_len: usize,
    asym_hash: String,
    provenance: Provenance,
}

/// In-memory checkpoint: the full flat parameter vector in canonical layer
/// order plus the asymmetry payloads that define interpolation compatibility.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub config: ModelConfig,
    pub params: Vec<f64>,
    pub masks: Vec<u8>,
    pub fixed: Vec<f64>,
    pub figlu: Vec<f64>,
    pub asym_hash: [u8; 32],
    pub provenance: Provenance,
}

fn collect_payloads(model: &Model) -> (Vec<u8>, Vec<f64>, Vec<f64>) {
    let mut masks = Vec::new();
    let mut fixed = Vec::new();
    for l in &model.layers {
        if let Some(m) = &l.mask {
            masks.extend_from_slice(m);
        }
        if let Some(f) = &l.fixed {
            fixed.extend_from_slice(f);
        }
    }
    let mut figlu = Vec::new();
    for fg in &model.figlu {
        figlu.extend_from_slice(&fg.fixed);
    }
    (masks, fixed, figlu)
}

fn payload_hash(masks: &[u8], fixed: &[f64], figlu: &[f64]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(masks);
    for v in fixed {
        hasher.update(v.to_le_bytes());
    }
    for v in figlu {
        hasher.update(v.to_le_bytes());
    }
    hasher.finalize().into()
}

impl ModelCheckpoint {
    pub fn from_model(model: &Model, provenance: Provenance) -> Self {
        let (masks, fixed, figlu) = collect_payloads(model);
        let asym_hash = model.asym_hash();
        debug_assert_eq!(asym_hash, payload_hash(&masks, &fixed, &figlu));
        ModelCheckpoint {
            config: model.config.clone(),
            params: model.flatten_params(),
            masks,
            fixed,
            figlu,
            asym_hash,
            provenance,
        }
    }

    /// Rebuilds the model with the checkpoint's payloads installed. The
    /// stored masks/fixed matrices are authoritative (hash-verified on load),
    /// so hand-constructed asym payloads round-trip too.
    pub fn to_model(&self) -> Result<Model> {
        let mut model = build_model(&self.config)?;
        let (mut mask_off, mut fixed_off, mut figlu_off) = (0usize, 0usize, 0usize);
        let take = |off: &mut usize, n: usize, total: usize, section: &'static str| -> Result<usize> {
            if *off + n > total {
                return Err(CheckpointError::LengthMismatch {
                    section,
                    expected: *off + n,
                    found: total,
                });
            }
            let start = *off;
            *off += n;
            Ok(start)
        };
        for l in &mut model.layers {
            if l.mask.is_some() {
                let n = l.d_out * l.d_in;
                let s = take(&mut mask_off, n, self.masks.len(), "masks")?;
                l.mask = Some(self.masks[s..s + n].to_vec());
                let s = take(&mut fixed_off, n, self.fixed.len(), "fixed")?;
                l.fixed = Some(self.fixed[s..s + n].to_vec());
            }
        }
        for fg in &mut model.figlu {
            let n = fg.dim * fg.dim;
            let s = take(&mut figlu_off, n, self.figlu.len(), "figlu")?;
            fg.fixed = self.figlu[s..s + n].to_vec();
        }
        if mask_off != self.masks.len() || fixed_off != self.fixed.len() || figlu_off != self.figlu.len() {
            return Err(CheckpointError::LengthMismatch {
                section: "payload layout",
                expected: mask_off,
                found: self.masks.len(),
            });
        }
        model.set_params_from_flat(&self.params);
        Ok(model)
    }

    pub fn asym_hash_hex(&self) -> String {
        hex(&self.asym_hash)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let model = build_model(&self.config)?;
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            trainable_count: model.trainable_count(),
            param_len: self.params.len(),
            mask_len: self.masks.len(),
            fixed_len: self.fixed.len(),
            figlu_len: self.figlu.len(),
            asym_hash: self.asym_hash_hex(),
            provenance: self.provenance.clone(),
        };
        let manifest_bytes = serde_json::to_vec(&manifest)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest_bytes.len() as u32).to_le_bytes());
        out.extend_from_slice(&manifest_bytes);
        for v in &self.params {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.masks);
        for v in &self.fixed {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.figlu {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mlen = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
        if bytes.len() < 12 + mlen {
            return Err(CheckpointError::LengthMismatch {
                section: "manifest",
                expected: 12 + mlen,
                found: bytes.len(),
            });
        }
        let manifest: Manifest = serde_json::from_slice(&bytes[12..12 + mlen])?;
        let mut off = 12 + mlen;
        let need = off + 8 * manifest.param_len + manifest.mask_len + 8 * (manifest.fixed_len + manifest.figlu_len);
        if bytes.len() != need {
            return Err(CheckpointError::LengthMismatch {
                section: "payload",
                expected: need,
                found: bytes.len(),
            });
        }
        let read_f64s = |n: usize, off: &mut usize| -> Vec<f64> {
            let mut v = Vec::with_capacity(n);
            for _ in 0..n {
                v.push(f64::from_le_bytes(bytes[*off..*off + 8].try_into().unwrap()));
                *off += 8;
            }
            v
        };
        let params = read_f64s(manifest.param_len, &mut off);
        let masks = bytes[off..off + manifest.mask_len].to_vec();
        off += manifest.mask_len;
        let fixed = read_f64s(manifest.fixed_len, &mut off);
        let figlu = read_f64s(manifest.figlu_len, &mut off);
        let recomputed = payload_hash(&masks, &fixed, &figlu);
        if hex(&recomputed) != manifest.asym_hash {
            return Err(CheckpointError::HashMismatch {
                manifest: manifest.asym_hash,
                recomputed: hex(&recomputed),
            });
        }
        Ok(ModelCheckpoint {
            config: manifest.config,
            params,
            masks,
            fixed,
            figlu,
            asym_hash: recomputed,
            provenance: manifest.provenance,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
