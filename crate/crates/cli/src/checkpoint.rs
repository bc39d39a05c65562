//! Named-tensor checkpoint file.
//!
//! Layout: the magic `STIV1`, a little-endian `u64` header length, a UTF-8 JSON header,
//! then the raw little-endian tensor payloads. The header holds the architecture
//! config, an optional training state, and a manifest of `(name, dtype, shape, offset,
//! nbytes)` sorted by name, with offsets relative to the start of the payload.
//! Tensor names are prefixed by section: `model/`, `ema/` and `opt/`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use stiv::model::{StivConfig, StivModel};
use stiv::train::{EmaState, Optimizer, ParamState, TrainConfig, Trainer};
use stiv::{RngState, Tensor};

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 5] = b"STIV1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub nbytes: u64,
}

/// Everything needed to resume training exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainState {
    pub step: u64,
    pub rng: RngState,
    pub train: TrainConfig,
    /// The run configuration that produced this checkpoint, if any.
    pub run: Option<serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: StivConfig,
    train: Option<TrainState>,
    manifest: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: StivConfig,
    pub train: Option<TrainState>,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

fn section(tensors: &BTreeMap<String, Tensor<f32>>, prefix: &str) -> Vec<(String, Tensor<f32>)> {
    tensors
        .iter()
        .filter_map(|(k, v)| k.strip_prefix(prefix).map(|n| (n.to_string(), v.clone())))
        .collect()
}

impl Checkpoint {
    pub fn from_model(model: &StivModel<f32>) -> Self {
        let tensors = model.params.iter().map(|(n, t)| (format!("model/{n}"), t.clone())).collect();
        Self {
            config: model.config.clone(),
            train: None,
            tensors,
        }
    }

    /// Model, EMA shadow, optimizer moments and random stream of a run.
    pub fn from_trainer(tr: &Trainer<f32>, run: Option<serde_json::Value>) -> Self {
        let mut ck = Self::from_model(&tr.model);
        let names = tr.model.params.names();
        for (name, shadow) in names.iter().zip(&tr.ema.shadow) {
            ck.tensors.insert(format!("ema/{name}"), shadow.clone());
        }
        for (name, st) in names.iter().zip(&tr.opt.states) {
            ck.tensors.insert(format!("opt/{name}/m"), st.m.clone());
            for (suffix, t) in [("v", &st.v), ("row", &st.row), ("col", &st.col)] {
                if let Some(t) = t {
                    ck.tensors.insert(format!("opt/{name}/{suffix}"), t.clone());
                }
            }
        }
        let mut train = tr.config.clone();
        train.ema_decay = tr.ema.decay;
        train.optim = tr.opt.config;
        ck.train = Some(TrainState {
            step: tr.opt.step,
            rng: tr.rng,
            train,
            run,
        });
        ck
    }

    fn params(&self, prefix: &str) -> Result<stiv::nn::ParamStore<f32>> {
        let mut p = stiv::nn::ParamStore::new();
        for (n, t) in section(&self.tensors, prefix) {
            p.add(n, t);
        }
        Ok(p)
    }

    /// The raw (non-averaged) model.
    pub fn model(&self) -> Result<StivModel<f32>> {
        Ok(StivModel::from_params(self.config.clone(), self.params("model/")?)?)
    }

    pub fn has_ema(&self) -> bool {
        self.tensors.keys().any(|k| k.starts_with("ema/"))
    }

    /// The EMA model when present, otherwise the raw one.
    pub fn eval_model(&self) -> Result<StivModel<f32>> {
        if self.has_ema() {
            Ok(StivModel::from_params(self.config.clone(), self.params("ema/")?)?)
        } else {
            self.model()
        }
    }

    /// Rebuilds the full training state.
    pub fn trainer(&self) -> Result<Trainer<f32>> {
        let state = self.train.as_ref().ok_or_else(|| CliError::Checkpoint {
            path: Default::default(),
            detail: "no training state to resume from".into(),
        })?;
        let model = self.model()?;
        let mut tr = Trainer::new(model, state.train.clone())?;
        let names = tr.model.params.names().to_vec();
        let get = |key: String| self.tensors.get(&key).cloned();
        let missing = |key: &str| CliError::Checkpoint {
            path: Default::default(),
            detail: format!("missing tensor `{key}`"),
        };
        let mut shadow = Vec::with_capacity(names.len());
        let mut states = Vec::with_capacity(names.len());
        for name in &names {
            let key = format!("ema/{name}");
            shadow.push(get(key.clone()).ok_or_else(|| missing(&key))?);
            let key = format!("opt/{name}/m");
            states.push(ParamState {
                m: get(key.clone()).ok_or_else(|| missing(&key))?,
                v: get(format!("opt/{name}/v")),
                row: get(format!("opt/{name}/row")),
                col: get(format!("opt/{name}/col")),
            });
        }
        tr.ema = EmaState {
            decay: state.train.ema_decay,
            shadow,
        };
        tr.opt = Optimizer {
            config: state.train.optim,
            step: state.step,
            states,
        };
        tr.rng = state.rng;
        Ok(tr)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut manifest = Vec::with_capacity(self.tensors.len());
        let mut payload = Vec::new();
        for (name, t) in &self.tensors {
            let offset = payload.len() as u64;
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            manifest.push(ManifestEntry {
                name: name.clone(),
                dtype: "f32".into(),
                shape: t.shape().to_vec(),
                offset,
                nbytes: payload.len() as u64 - offset,
            });
        }
        let header = serde_json::to_vec(&Header {
            config: self.config.clone(),
            train: self.train.clone(),
            manifest,
        })
        .map_err(|e| CliError::Config(e.to_string()))?;
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |detail: String| CliError::Checkpoint {
            path: path.to_path_buf(),
            detail,
        };
        if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(bad("not a STIV1 checkpoint".into()));
        }
        let len_bytes: [u8; 8] = bytes[MAGIC.len()..MAGIC.len() + 8].try_into().expect("8 bytes");
        let header_len = u64::from_le_bytes(len_bytes) as usize;
        let start = MAGIC.len() + 8;
        let end = start.checked_add(header_len).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header".into()))?;
        let header: Header =
            serde_json::from_slice(&bytes[start..end]).map_err(|e| bad(format!("header: {e}")))?;
        let payload = &bytes[end..];
        let mut tensors = BTreeMap::new();
        let mut previous: Option<&str> = None;
        for e in &header.manifest {
            if previous.is_some_and(|p| p >= e.name.as_str()) {
                return Err(bad(format!("manifest not sorted and unique at `{}`", e.name)));
            }
            previous = Some(&e.name);
            if e.dtype != "f32" {
                return Err(bad(format!("`{}` has unsupported dtype {}", e.name, e.dtype)));
            }
            let n: usize = e.shape.iter().product();
            if e.nbytes != 4 * n as u64 {
                return Err(bad(format!("`{}` holds {} bytes for shape {:?}", e.name, e.nbytes, e.shape)));
            }
            let lo = e.offset as usize;
            let raw = payload.get(lo..lo + e.nbytes as usize).ok_or_else(|| bad(format!("`{}` runs past the payload", e.name)))?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            tensors.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
        }
        Ok(Self {
            config: header.config,
            train: header.train,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()?).map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
