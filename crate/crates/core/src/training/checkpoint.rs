//! Binary checkpoint container.
//!
//! ```text
//! magic "SVSCKPT\0" | version u32 = 1
//! header_len u32 | header (TOML: phoneme vocabulary + training config)
//! step u64 | tensor_count u32
//! tensor_count × (name_len u32 | name | rank u32 | dims rank×u64 | f64 data)
//! ```
//!
//! Tensor names are `param/<name>`, `adam_m/<name>` and `adam_v/<name>`,
//! with parameters in model layout order. Integers and floats are
//! little-endian.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{TrainConfig, TrainError};
use crate::binio::{write_atomic, Reader};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"SVSCKPT\0";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub config: TrainConfig,
    /// Phoneme names indexed by ID, as used to tokenize the training data.
    pub vocab: Vec<String>,
    pub params: Vec<(String, Tensor)>,
    pub adam_m: Vec<Tensor>,
    pub adam_v: Vec<Tensor>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    vocab: Vec<String>,
    train: TrainConfig,
}

fn push_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>, TrainError> {
        let header = toml::to_string(&Header {
            vocab: self.vocab.clone(),
            train: self.config.clone(),
        })
        .map_err(|e| TrainError::Checkpoint(format!("header: {e}")))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&((self.params.len() * 3) as u32).to_le_bytes());
        for (name, t) in &self.params {
            push_tensor(&mut out, &format!("param/{name}"), t);
        }
        for (prefix, moments) in [("adam_m", &self.adam_m), ("adam_v", &self.adam_v)] {
            for ((name, _), t) in self.params.iter().zip(moments) {
                push_tensor(&mut out, &format!("{prefix}/{name}"), t);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainError> {
        let bad = |m: String| TrainError::Checkpoint(m);
        let mut r = Reader::new(bytes);
        if r.take(8).map_err(bad)? != MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32().map_err(bad)?;
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let header_len = r.u32().map_err(bad)? as usize;
        let header = std::str::from_utf8(r.take(header_len).map_err(bad)?).map_err(|e| bad(format!("header: {e}")))?;
        let header: Header = toml::from_str(header).map_err(|e| bad(format!("header: {e}")))?;
        let step = r.u64().map_err(bad)?;
        let count = r.u32().map_err(bad)? as usize;
        if count % 3 != 0 {
            return Err(bad(format!("tensor count {count} is not a multiple of 3")));
        }
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32().map_err(bad)? as usize;
            let name = String::from_utf8(r.take(name_len).map_err(bad)?.to_vec()).map_err(|e| bad(e.to_string()))?;
            let rank = r.u32().map_err(bad)? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u64().map_err(bad)? as usize);
            }
            let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| bad("tensor too large".into()))?;
            let data = r.f64s(n).map_err(bad)?;
            let t = Tensor::new(dims, data).map_err(|e| bad(format!("{name}: {e}")))?;
            tensors.push((name, t));
        }
        if !r.is_empty() {
            return Err(bad("trailing bytes".into()));
        }
        let n = count / 3;
        let mut groups = tensors.into_iter();
        let mut take = |prefix: &str| -> Result<Vec<(String, Tensor)>, TrainError> {
            (0..n)
                .map(|_| {
                    let (name, t) = groups.next().expect("counted");
                    match name.strip_prefix(prefix).and_then(|s| s.strip_prefix('/')) {
                        Some(rest) => Ok((rest.to_string(), t)),
                        None => Err(bad(format!("expected a '{prefix}/' tensor, found '{name}'"))),
                    }
                })
                .collect()
        };
        let params = take("param")?;
        let adam_m = take("adam_m")?;
        let adam_v = take("adam_v")?;
        for i in 0..n {
            let (p, shape) = (&params[i].0, params[i].1.shape());
            for (m, t) in [&adam_m[i], &adam_v[i]] {
                if m != p || t.shape() != shape {
                    return Err(bad(format!("moment tensor '{m}' does not match parameter '{p}'")));
                }
            }
        }
        Ok(Self {
            step,
            config: header.train,
            vocab: header.vocab,
            params,
            adam_m: adam_m.into_iter().map(|(_, t)| t).collect(),
            adam_v: adam_v.into_iter().map(|(_, t)| t).collect(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        write_atomic(path, &self.to_bytes()?).map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let bytes = fs::read(path).map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}
