use std::path::Path;

use serde::{Deserialize, Serialize};

use super::train::TrainConfig;
use super::{ModelConfig, TraceShape};
use crate::error::{Error, Result};
use crate::trace::NormStats;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"TSCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Trained parameters with everything needed to rebuild the model.
///
/// Layout: magic, `u32` version, `u32` header length, JSON header
/// (`model`, `train`, `shape`, `steps`, `num_params`), `f32` parameters,
/// then the six `f64` normalization values (means, then deviations). All
/// integers and floats little-endian.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub shape: TraceShape,
    pub stats: NormStats,
    /// Optimizer steps taken.
    pub steps: usize,
    pub params: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
    shape: TraceShape,
    steps: usize,
    num_params: usize,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            model: self.model.clone(),
            train: self.train.clone(),
            shape: self.shape,
            steps: self.steps,
            num_params: self.params.len(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(12 + json.len() + 4 * self.params.len() + 48);
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        for v in self.stats.mean.iter().chain(&self.stats.std) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |reason: String| Error::format(origin, reason);
        if bytes.len() < 12 || bytes[..4] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
        let version = u32_at(4);
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("checkpoint version {version}, expected {CHECKPOINT_VERSION}")));
        }
        let hlen = u32_at(8) as usize;
        let body = bytes.get(12..12 + hlen).ok_or_else(|| bad("truncated header".into()))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(format!("header: {e}")))?;
        let start = 12 + hlen;
        let expected = start + 4 * header.num_params + 48;
        if bytes.len() != expected {
            return Err(bad(format!("{} bytes, header implies {expected}", bytes.len())));
        }
        let params = bytes[start..start + 4 * header.num_params]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let f: Vec<f64> = bytes[start + 4 * header.num_params..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Self {
            model: header.model,
            train: header.train,
            shape: header.shape,
            stats: NormStats {
                mean: [f[0], f[1], f[2]],
                std: [f[3], f[4], f[5]],
            },
            steps: header.steps,
            params,
        })
    }
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    std::fs::write(path, ck.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            shape: TraceShape {
                grid_rows: 4,
                grid_cols: 6,
                horizon: 3,
            },
            stats: NormStats {
                mean: [0.1, -0.2, 0.3],
                std: [1.5, 2.5, 0.01],
            },
            steps: 7,
            params: vec![1.0, -0.5, f32::MIN_POSITIVE, 3.25],
        }
    }

    #[test]
    fn bytes_start_with_magic_and_version() {
        let b = sample().to_bytes();
        assert_eq!(&b[..4], b"TSCK");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), CHECKPOINT_VERSION);
        let back = Checkpoint::from_bytes(&b, Path::new("x")).unwrap();
        assert_eq!(back, sample());
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let b = sample().to_bytes();
        let p = Path::new("x");
        assert!(Checkpoint::from_bytes(&b[..b.len() - 1], p).is_err());
        let mut v = b.clone();
        v[4] = 9;
        assert!(Checkpoint::from_bytes(&v, p).is_err());
        let mut m = b;
        m[0] = b'X';
        assert!(Checkpoint::from_bytes(&m, p).is_err());
    }
}
