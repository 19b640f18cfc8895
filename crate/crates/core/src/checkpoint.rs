//! Checkpoint files: one JSON header line, then a little-endian f32 payload.
//!
//! Tensor names are namespaced: `base/…` for θ0, `bases/…` for Φ,
//! `composer/…` for ψ and `optim/{bases,composer}/{m,v}/…` for Adam moments.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bases::{CapabilityBasisSet, CapabilityConfig};
use crate::composer::{ComposerConfig, ComposerParams};
use crate::error::{Error, Result};
use crate::model::{BaseModel, LayerWeights, ModelConfig};
use crate::optim::Adam;
use crate::tensor::{Real, Tensor};
use crate::trainer::TrainState;
use crate::FORMAT_VERSION;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: [usize; 2],
    /// Byte offset into the payload.
    pub offset: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub model: ModelConfig,
    /// [`BaseModel::hash`] of θ0.
    pub base_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capability: Option<CapabilityConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub composer: Option<ComposerConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_state: Option<TrainState>,
    pub manifest: Vec<ManifestEntry>,
}

/// Φ and ψ together.
#[derive(Clone, Debug, PartialEq)]
pub struct CapabilityModel<T> {
    pub bases: CapabilityBasisSet<T>,
    pub composer: ComposerParams<T>,
}

impl<T: Real> CapabilityModel<T> {
    pub fn cast<U: Real>(&self) -> CapabilityModel<U> {
        CapabilityModel {
            bases: self.bases.cast(),
            composer: self.composer.cast(),
        }
    }
}

/// Everything needed to continue a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSnapshot {
    pub state: TrainState,
    pub bases_adam: Adam<f32>,
    pub composer_adam: Adam<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub base: BaseModel<f32>,
    pub capability: Option<CapabilityModel<f32>>,
    pub train: Option<TrainSnapshot>,
}

impl Checkpoint {
    pub fn base_only(base: BaseModel<f32>) -> Self {
        Self {
            base,
            capability: None,
            train: None,
        }
    }

    /// The capability model, or an error for a base-only file.
    pub fn require_capability(&self) -> Result<&CapabilityModel<f32>> {
        self.capability
            .as_ref()
            .ok_or_else(|| Error::Checkpoint("checkpoint holds only a base model".into()))
    }

    fn tensors(&self) -> Vec<(String, Tensor<f32>)> {
        let mut out: Vec<(String, Tensor<f32>)> = self
            .base
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (format!("base/{n}"), t.clone()))
            .collect();
        let Some(cap) = &self.capability else { return out };
        let bases = cap.bases.named_tensors();
        let composer: Vec<(String, Tensor<f32>)> =
            cap.composer.named_tensors().into_iter().map(|(n, t)| (n, t.clone())).collect();
        let mut optim = Vec::new();
        if let Some(tr) = &self.train {
            for (group, names, adam) in [("bases", &bases, &tr.bases_adam), ("composer", &composer, &tr.composer_adam)] {
                for (moment, store) in [("m", &adam.m), ("v", &adam.v)] {
                    for ((n, _), t) in names.iter().zip(store) {
                        optim.push((format!("optim/{group}/{moment}/{n}"), t.clone()));
                    }
                }
            }
        }
        out.extend(bases);
        out.extend(composer);
        out.extend(cap.composer.buffers().into_iter().map(|(n, t)| (n, t.clone())));
        out.extend(optim);
        out
    }

    /// Writes atomically: a temporary file in the same directory, then a
    /// rename.
    pub fn write(&self, path: &Path) -> Result<()> {
        if self.train.is_some() && self.capability.is_none() {
            return Err(Error::Checkpoint("training state without a capability model".into()));
        }
        let tensors = self.tensors();
        let mut manifest = Vec::with_capacity(tensors.len());
        let mut offset = 0u64;
        for (name, t) in &tensors {
            manifest.push(ManifestEntry {
                name: name.clone(),
                shape: [t.rows(), t.cols()],
                offset,
            });
            offset += 4 * t.len() as u64;
        }
        let header = CheckpointHeader {
            format_version: FORMAT_VERSION,
            model: self.base.config.clone(),
            base_hash: self.base.hash(),
            capability: self.capability.as_ref().map(|c| c.bases.config.clone()),
            composer: self.capability.as_ref().map(|c| c.composer.config.clone()),
            train_state: self.train.as_ref().map(|t| t.state.clone()),
            manifest,
        };
        let mut bytes = serde_json::to_vec(&header)?;
        bytes.push(b'\n');
        bytes.reserve(offset as usize);
        for (_, t) in &tensors {
            for &x in t.data() {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        std::fs::create_dir_all(dir)?;
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        tmp.write_all(&bytes)?;
        tmp.as_file().sync_all()?;
        tmp.persist(path).map_err(|e| Error::Io(e.error))?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Checkpoint("missing header line".into()))?;
        let raw: serde_json::Value = serde_json::from_slice(&bytes[..nl])
            .map_err(|e| Error::Checkpoint(format!("unreadable header: {e}")))?;
        let version = raw.get("format_version").and_then(|v| v.as_u64());
        if version != Some(FORMAT_VERSION as u64) {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint format version {}; this build reads version {FORMAT_VERSION}",
                version.map_or("missing".to_string(), |v| v.to_string())
            )));
        }
        let header: CheckpointHeader =
            serde_json::from_value(raw).map_err(|e| Error::Checkpoint(format!("invalid header: {e}")))?;
        header.model.validate()?;
        let payload = &bytes[nl + 1..];
        let mut tensors = BTreeMap::new();
        for e in &header.manifest {
            let n = e.shape[0] * e.shape[1];
            let start = e.offset as usize;
            let end = start + 4 * n;
            if end > payload.len() {
                return Err(Error::Checkpoint(format!("tensor {} runs past the end of the payload", e.name)));
            }
            let data = payload[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.insert(e.name.clone(), Tensor::from_vec(e.shape[0], e.shape[1], data)?);
        }
        let mut get = |name: &str| {
            tensors
                .remove(name)
                .ok_or_else(|| Error::Checkpoint(format!("tensor {name} missing from manifest")))
        };
        let base = read_base(&header.model, &mut get)?;
        if base.hash() != header.base_hash {
            return Err(Error::Checkpoint("base parameters do not match the recorded hash".into()));
        }
        let capability = match (&header.capability, &header.composer) {
            (Some(cc), Some(pc)) => Some(CapabilityModel {
                bases: CapabilityBasisSet::from_named(cc.clone(), &header.model, &mut get)?,
                composer: ComposerParams::from_named(pc.clone(), cc.num_bases, &mut get)?,
            }),
            (None, None) => None,
            _ => return Err(Error::Checkpoint("capability and composer configs must appear together".into())),
        };
        let train = match (&header.train_state, &capability) {
            (Some(state), Some(cap)) => {
                let mut adam = |group: &str, names: Vec<String>, t: u64| -> Result<Adam<f32>> {
                    let mut m = Vec::new();
                    let mut v = Vec::new();
                    for n in &names {
                        m.push(get(&format!("optim/{group}/m/{n}"))?);
                        v.push(get(&format!("optim/{group}/v/{n}"))?);
                    }
                    Ok(Adam {
                        config: state.config.adam.clone(),
                        t,
                        m,
                        v,
                    })
                };
                let bases_adam = adam(
                    "bases",
                    cap.bases.named_tensors().into_iter().map(|(n, _)| n).collect(),
                    state.bases_adam_t,
                )?;
                let composer_adam = adam(
                    "composer",
                    cap.composer.named_tensors().into_iter().map(|(n, _)| n).collect(),
                    state.composer_adam_t,
                )?;
                Some(TrainSnapshot {
                    state: state.clone(),
                    bases_adam,
                    composer_adam,
                })
            }
            (Some(_), None) => return Err(Error::Checkpoint("training state without a capability model".into())),
            _ => None,
        };
        Ok(Self {
            base,
            capability,
            train,
        })
    }
}

fn read_base(config: &ModelConfig, get: &mut impl FnMut(&str) -> Result<Tensor<f32>>) -> Result<BaseModel<f32>> {
    let mut layers = Vec::new();
    for l in 0..config.n_layers {
        let mut f = |name: &str| get(&format!("base/layers.{l}.{name}"));
        layers.push(LayerWeights {
            ln1_gain: f("ln1_gain")?,
            ln1_bias: f("ln1_bias")?,
            w_q: f("w_q")?,
            w_k: f("w_k")?,
            w_v: f("w_v")?,
            w_o: f("w_o")?,
            ln2_gain: f("ln2_gain")?,
            ln2_bias: f("ln2_bias")?,
            w_up: f("w_up")?,
            w_down: f("w_down")?,
        });
    }
    let base = BaseModel {
        config: config.clone(),
        tok_emb: get("base/tok_emb")?,
        pos_emb: get("base/pos_emb")?,
        layers,
        lnf_gain: get("base/lnf_gain")?,
        lnf_bias: get("base/lnf_bias")?,
        lm_head: get("base/lm_head")?,
    };
    base.validate_shapes()
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok(base)
}
