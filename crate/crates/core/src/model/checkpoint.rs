//! Checkpoints: `manifest.json` plus one MAT1 file per parameter.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AlignMamba, ModelConfig, ModelError};
use crate::data::{load_mat1, save_mat1};
use crate::tensor::Tensor;

const FORMAT: &str = "alignmamba-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub config: ModelConfig,
    pub params: Vec<ParamEntry>,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> ModelError + '_ {
    move |source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn save_checkpoint(model: &AlignMamba, dir: &Path) -> Result<CheckpointManifest, ModelError> {
    let pdir = dir.join("params");
    fs::create_dir_all(&pdir).map_err(io(&pdir))?;
    let mut params = Vec::new();
    for (id, p) in model.store.iter() {
        let file = format!("params/{}.mat1", p.name);
        save_mat1(dir.join(&file), &model.store.tensor(id))?;
        params.push(ParamEntry {
            name: p.name.clone(),
            file,
            shape: p.shape.clone(),
        });
    }
    let manifest = CheckpointManifest {
        format: FORMAT.into(),
        config: model.config.clone(),
        params,
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json + "\n").map_err(io(&path))?;
    Ok(manifest)
}

/// Rebuilds the model from the stored config and overwrites every
/// parameter; names and shapes must match exactly.
pub fn load_checkpoint(dir: &Path) -> Result<AlignMamba, ModelError> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(io(&path))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)
        .map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))?;
    if manifest.format != FORMAT {
        return Err(ModelError::Checkpoint(format!(
            "unsupported format {:?}",
            manifest.format
        )));
    }
    let mut model = AlignMamba::new(manifest.config, 0)?;
    if manifest.params.len() != model.store.len() {
        return Err(ModelError::Checkpoint(format!(
            "{} parameters stored, config builds {}",
            manifest.params.len(),
            model.store.len()
        )));
    }
    for entry in &manifest.params {
        let id = model
            .store
            .find(&entry.name)
            .ok_or_else(|| ModelError::Checkpoint(format!("unknown parameter {}", entry.name)))?;
        let t: Tensor = load_mat1(dir.join(&entry.file))?;
        if t.shape() != model.store.get(id).shape.as_slice() || t.shape() != entry.shape.as_slice()
        {
            return Err(ModelError::Checkpoint(format!(
                "{}: stored shape {:?}, model expects {:?}",
                entry.name,
                t.shape(),
                model.store.get(id).shape
            )));
        }
        model.store.set(id, t.to_vec());
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_bit_exact() {
        let tmp = tempfile::tempdir().unwrap();
        let model = AlignMamba::new(ModelConfig::default(), 9).unwrap();
        save_checkpoint(&model, tmp.path()).unwrap();
        let back = load_checkpoint(tmp.path()).unwrap();
        assert_eq!(back.config, model.config);
        for ((_, a), (_, b)) in model.store.iter().zip(back.store.iter()) {
            assert_eq!(a.name, b.name);
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a.value()), bits(b.value()));
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let model = AlignMamba::new(ModelConfig::default(), 1).unwrap();
        save_checkpoint(&model, tmp.path()).unwrap();
        save_mat1(
            tmp.path().join("params/head.bias.mat1"),
            &Tensor::zeros(&[1, 3]),
        )
        .unwrap();
        assert!(matches!(
            load_checkpoint(tmp.path()),
            Err(ModelError::Checkpoint(_))
        ));
    }
}
