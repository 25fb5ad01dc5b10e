//! Self-describing parameter container.
//!
//! Layout: 8-byte magic `NMOECKPT`, `u32` format version, `u64` header
//! length, a JSON header (`metadata` object plus the name and shape of each
//! tensor), then every tensor's values as little-endian `f64`, in header
//! order. All integers are little-endian.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::experts::{Expert, ExpertEnsemble, ExpertSpec};
use crate::gate::{GateMode, GatingNetwork};
use crate::moe::MoeModel;
use crate::nn::Trainable;
use crate::pattern::EdgeDiscriminator;
use crate::rng::rng_for;

const MAGIC: &[u8; 8] = b"NMOECKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub metadata: Value,
    pub tensors: Vec<(TensorInfo, Vec<f64>)>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    metadata: Value,
    tensors: Vec<TensorInfo>,
}

impl Checkpoint {
    pub fn from_model<M: Trainable + ?Sized>(model: &M, metadata: Value) -> Self {
        let tensors = model
            .param_names()
            .into_iter()
            .zip(model.params())
            .map(|(name, p)| {
                (
                    TensorInfo {
                        name,
                        shape: vec![p.len()],
                    },
                    p.to_vec(),
                )
            })
            .collect();
        Self { metadata, tensors }
    }

    /// Copies tensors into `model`, matching by name and length.
    pub fn load_into<M: Trainable + ?Sized>(&self, model: &mut M) -> Result<()> {
        let names = model.param_names();
        if names.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model expects {}",
                self.tensors.len(),
                names.len()
            )));
        }
        for ((name, p), (info, data)) in names.iter().zip(model.params_mut()).zip(&self.tensors) {
            if &info.name != name {
                return Err(Error::Checkpoint(format!("expected tensor {name}, found {}", info.name)));
            }
            if p.len() != data.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: model has {} values, checkpoint {}",
                    p.len(),
                    data.len()
                )));
            }
            p.copy_from_slice(data);
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&Header {
            metadata: self.metadata.clone(),
            tensors: self.tensors.iter().map(|(i, _)| i.clone()).collect(),
        })?;
        let values: usize = self.tensors.iter().map(|(_, d)| d.len()).sum();
        let mut out = Vec::with_capacity(20 + header.len() + 8 * values);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (info, data) in &self.tensors {
            if info.shape.iter().product::<usize>() != data.len() {
                return Err(Error::Checkpoint(format!("tensor {} shape disagrees with its data", info.name)));
            }
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let truncated = || Error::Checkpoint("truncated checkpoint".into());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let header_end = 20usize.checked_add(header_len).ok_or_else(truncated)?;
        let header: Header = serde_json::from_slice(bytes.get(20..header_end).ok_or_else(truncated)?)?;
        let mut offset = header_end;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for info in header.tensors {
            let len: usize = info.shape.iter().product();
            let end = offset + 8 * len;
            let raw = bytes.get(offset..end).ok_or_else(truncated)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((info, data));
            offset = end;
        }
        if offset != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - offset)));
        }
        Ok(Self {
            metadata: header.metadata,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn meta<T: for<'de> Deserialize<'de>>(ckpt: &Checkpoint, key: &str) -> Result<T> {
    let v = ckpt
        .metadata
        .get(key)
        .ok_or_else(|| Error::Checkpoint(format!("metadata is missing {key:?}")))?;
    serde_json::from_value(v.clone()).map_err(|e| Error::Checkpoint(format!("metadata {key:?}: {e}")))
}

/// Provenance recorded alongside every checkpoint.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub config_hash: String,
}

pub fn expert_checkpoint(expert: &Expert, provenance: &Provenance) -> Checkpoint {
    Checkpoint::from_model(
        expert,
        json!({
            "component": "expert",
            "spec": expert.spec(),
            "input_dim": expert.input_dim(),
            "num_classes": expert.num_classes(),
            "seed": provenance.seed,
            "config_hash": provenance.config_hash,
        }),
    )
}

pub fn expert_from_checkpoint(ckpt: &Checkpoint) -> Result<Expert> {
    let spec: ExpertSpec = meta(ckpt, "spec")?;
    let mut expert = Expert::new(spec, meta(ckpt, "input_dim")?, meta(ckpt, "num_classes")?, &mut rng_for(0, 0))?;
    ckpt.load_into(&mut expert)?;
    Ok(expert)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleManifest {
    pub experts: Vec<ManifestEntry>,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub position: usize,
    pub spec: ExpertSpec,
    pub file: PathBuf,
}

/// Writes one checkpoint per expert plus `manifest.json` into `dir`.
pub fn save_ensemble(ensemble: &ExpertEnsemble, dir: &Path, provenance: &Provenance) -> Result<EnsembleManifest> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(ensemble.len());
    for (j, e) in ensemble.experts().iter().enumerate() {
        let file = PathBuf::from(format!("expert_{j}_{}.ckpt", e.kind()));
        expert_checkpoint(e, provenance).save(&dir.join(&file))?;
        entries.push(ManifestEntry {
            position: j,
            spec: *e.spec(),
            file,
        });
    }
    let manifest = EnsembleManifest {
        experts: entries,
        provenance: provenance.clone(),
    };
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn load_ensemble(dir: &Path) -> Result<ExpertEnsemble> {
    let manifest: EnsembleManifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    let mut experts = Vec::with_capacity(manifest.experts.len());
    for (j, entry) in manifest.experts.iter().enumerate() {
        if entry.position != j {
            return Err(Error::Checkpoint(format!("manifest position {} listed at index {j}", entry.position)));
        }
        let e = expert_from_checkpoint(&Checkpoint::load(&dir.join(&entry.file))?)?;
        if e.spec() != &entry.spec {
            return Err(Error::Checkpoint(format!("expert {j} spec disagrees with the manifest")));
        }
        experts.push(e);
    }
    ExpertEnsemble::new(experts)
}

/// Architecture of the gate and discriminator, enough to rebuild them.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateShape {
    pub num_experts: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub dropout: f64,
    pub mode: GateMode,
    pub feature_dim: usize,
    pub discriminator_hidden: usize,
}

/// Saves the ensemble (via [`save_ensemble`]) and the gate plus
/// discriminator into `dir`.
pub fn save_moe(model: &MoeModel, shape: &GateShape, dir: &Path, provenance: &Provenance) -> Result<()> {
    save_ensemble(&model.experts, dir, provenance)?;
    let mut ckpt = Checkpoint::from_model(
        &model.discriminator,
        json!({
            "component": "gate",
            "shape": shape,
            "seed": provenance.seed,
            "config_hash": provenance.config_hash,
        }),
    );
    ckpt.tensors.extend(Checkpoint::from_model(&model.gate, Value::Null).tensors);
    ckpt.save(&dir.join("gate.ckpt"))
}

/// Seed and config hash stored alongside a saved model.
pub fn moe_provenance(dir: &Path) -> Result<Provenance> {
    let ckpt = Checkpoint::load(&dir.join("gate.ckpt"))?;
    Ok(Provenance {
        seed: meta(&ckpt, "seed")?,
        config_hash: meta(&ckpt, "config_hash")?,
    })
}

pub fn load_moe(dir: &Path) -> Result<MoeModel> {
    let experts = load_ensemble(dir)?;
    let ckpt = Checkpoint::load(&dir.join("gate.ckpt"))?;
    let s: GateShape = meta(&ckpt, "shape")?;
    let mut rng = rng_for(0, 0);
    let mut disc = EdgeDiscriminator::new(s.feature_dim, s.discriminator_hidden, &mut rng)?;
    let mut gate = GatingNetwork::new(s.num_experts, s.embed_dim, s.hidden, s.layers, s.dropout, s.mode, &mut rng)?;
    let k = disc.params().len();
    if ckpt.tensors.len() < k {
        return Err(Error::Checkpoint("gate checkpoint is missing discriminator tensors".into()));
    }
    let (d, g) = ckpt.tensors.split_at(k);
    Checkpoint {
        metadata: Value::Null,
        tensors: d.to_vec(),
    }
    .load_into(&mut disc)?;
    Checkpoint {
        metadata: Value::Null,
        tensors: g.to_vec(),
    }
    .load_into(&mut gate)?;
    MoeModel::new(experts, disc, gate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experts::ExpertKind;

    fn provenance() -> Provenance {
        Provenance {
            seed: 7,
            config_hash: "abc".into(),
        }
    }

    #[test]
    fn bytes_round_trip() {
        let e = Expert::new(ExpertSpec::new(ExpertKind::GcnResidual, 3, 4, 0.1), 5, 3, &mut rng_for(1, 0)).unwrap();
        let ckpt = expert_checkpoint(&e, &provenance());
        let back = Checkpoint::from_bytes(&ckpt.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(expert_from_checkpoint(&back).unwrap(), e);
        assert_eq!(back.metadata["seed"], 7);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let e = Expert::new(ExpertSpec::new(ExpertKind::Mlp, 2, 3, 0.0), 2, 2, &mut rng_for(1, 0)).unwrap();
        let bytes = expert_checkpoint(&e, &provenance()).to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }

    #[test]
    fn ensemble_and_moe_round_trip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = rng_for(2, 0);
        let experts: Vec<Expert> = ExpertKind::ALL
            .iter()
            .map(|&k| Expert::new(ExpertSpec::new(k, 2, 4, 0.0), 3, 2, &mut rng).unwrap())
            .collect();
        let shape = GateShape {
            num_experts: 5,
            embed_dim: 4,
            hidden: 6,
            layers: 2,
            dropout: 0.1,
            mode: GateMode::Full,
            feature_dim: 3,
            discriminator_hidden: 5,
        };
        let model = MoeModel::new(
            ExpertEnsemble::new(experts).unwrap(),
            EdgeDiscriminator::new(3, 5, &mut rng).unwrap(),
            GatingNetwork::new(5, 4, 6, 2, 0.1, GateMode::Full, &mut rng).unwrap(),
        )
        .unwrap();
        save_moe(&model, &shape, dir.path(), &provenance()).unwrap();
        assert_eq!(load_moe(dir.path()).unwrap(), model);
    }
}
