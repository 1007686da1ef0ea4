//! Task-boundary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"FGCK" | u32 version | u64 header length | header (UTF-8 JSON) | f64 data
//! ```
//!
//! The header lists every tensor as `{group, name, shape}` in storage order;
//! groups are `params`, `omega` and `anchor`. Random streams are pure
//! functions of `(seed, task index)`, so `seed` and `next_task` are the
//! complete RNG state.

use std::fs;
use std::path::{Path, PathBuf};

use forgetgate_autodiff::{ParameterSet, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stabilization::{ImportanceStore, StabilizerMethod};
use crate::trainer::TrainReport;

pub const MAGIC: &[u8; 4] = b"FGCK";
pub const VERSION: u32 = 1;

/// Where a run saves the checkpoint taken after `task`.
pub fn checkpoint_path(dir: &Path, task: usize) -> PathBuf {
    dir.join(format!("checkpoint_task{task:03}.fgck"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub next_task: usize,
    pub fingerprint: String,
    pub params: ParameterSet,
    pub importance: ImportanceStore,
    pub report: TrainReport,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    group: String,
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    seed: u64,
    next_task: usize,
    fingerprint: String,
    method: StabilizerMethod,
    tasks_completed: usize,
    rng: String,
    report: TrainReport,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let groups: [(&str, &[Tensor]); 3] = [
            ("params", self.params.tensors()),
            ("omega", &self.importance.omega),
            ("anchor", &self.importance.anchor),
        ];
        let mut tensors = Vec::new();
        for (group, ts) in groups {
            for (name, t) in self.params.names().iter().zip(ts) {
                tensors.push(TensorEntry {
                    group: group.into(),
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                });
            }
        }
        let header = Header {
            seed: self.seed,
            next_task: self.next_task,
            fingerprint: self.fingerprint.clone(),
            method: self.importance.method,
            tasks_completed: self.importance.tasks_completed,
            rng: "chacha8 streams keyed by (seed, tag, task)".into(),
            report: self.report.clone(),
            tensors,
        };
        let h = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + h.len() + 8 * 3 * self.params.numel());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(h.len() as u64).to_le_bytes());
        out.extend_from_slice(&h);
        for (_, ts) in groups {
            for t in ts {
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], file: &str) -> Result<Self> {
        let err = |offset: usize, message: String| Error::Parse {
            file: file.into(),
            offset,
            message,
        };
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(err(0, "not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(err(4, format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| err(8, format!("header length {hlen} exceeds file")))?;
        let header: Header = serde_json::from_slice(&bytes[16..body]).map_err(|e| err(16, e.to_string()))?;
        let mut offset = body;
        let mut params = ParameterSet::new();
        let mut omega = Vec::new();
        let mut anchor = Vec::new();
        for entry in &header.tensors {
            let n: usize = entry.shape.iter().product();
            let end = offset + 8 * n;
            if end > bytes.len() {
                return Err(err(offset, format!("truncated data for {}/{}", entry.group, entry.name)));
            }
            let data = bytes[offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(entry.shape.clone(), data)?;
            match entry.group.as_str() {
                "params" => {
                    params.push(entry.name.clone(), t);
                }
                "omega" => omega.push(t),
                "anchor" => anchor.push(t),
                other => return Err(err(16, format!("unknown tensor group {other:?}"))),
            }
            offset = end;
        }
        if offset != bytes.len() {
            return Err(err(offset, "trailing bytes".into()));
        }
        if omega.len() != params.len() || anchor.len() != params.len() {
            return Err(err(16, "tensor groups have different lengths".into()));
        }
        let importance = ImportanceStore {
            method: header.method,
            names: params.names().to_vec(),
            omega,
            anchor,
            tasks_completed: header.tasks_completed,
        };
        Ok(Self {
            seed: header.seed,
            next_task: header.next_task,
            fingerprint: header.fingerprint,
            params,
            importance,
            report: header.report,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }

    /// Rejects resuming into a model of a different shape, seed or config.
    pub fn check_compatible(&self, params: &ParameterSet, seed: u64, fingerprint: &str) -> Result<()> {
        if self.seed != seed {
            return Err(Error::Config(format!("checkpoint seed {} != run seed {seed}", self.seed)));
        }
        if !fingerprint.is_empty() && self.fingerprint != fingerprint {
            return Err(Error::Config("checkpoint was written by a different configuration".into()));
        }
        if self.params.names() != params.names() {
            return Err(Error::Config("checkpoint parameter names differ".into()));
        }
        params.check_shapes(self.params.tensors(), "resume")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut params = ParameterSet::new();
        params.push("a", Tensor::from_rows(&[vec![1.0, -2.5], vec![3.0, 1e-300]]).unwrap());
        params.push("b", Tensor::vector(vec![f64::MIN_POSITIVE, 7.0, -0.0]));
        let mut importance = ImportanceStore::new(&params, StabilizerMethod::Si);
        importance.omega[1] = Tensor::vector(vec![0.1, 0.2, 0.3]);
        importance.tasks_completed = 2;
        let mut report = TrainReport::new("f00");
        report.accuracy = vec![vec![0.9], vec![0.8, 0.95]];
        Checkpoint {
            seed: 42,
            next_task: 2,
            fingerprint: "f00".into(),
            params,
            importance,
            report,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[..4], MAGIC);
        assert_eq!(Checkpoint::from_bytes(&bytes, "x").unwrap(), ck);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3], "x").is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad, "x"), Err(Error::Parse { offset: 0, .. })));
        let mut v2 = bytes;
        v2[4] = 9;
        assert!(Checkpoint::from_bytes(&v2, "x").is_err());
    }

    #[test]
    fn compatibility_checks() {
        let ck = sample();
        assert!(ck.check_compatible(&ck.params, 42, "f00").is_ok());
        assert!(ck.check_compatible(&ck.params, 43, "f00").is_err());
        assert!(ck.check_compatible(&ck.params, 42, "other").is_err());
    }
}
