//! Dataset directories: `manifest.json` plus one MAT1 file per sample and
//! modality under `samples/`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    load_mat1, save_mat1, DataError, Dataset, Label, ModalitySpec, MultimodalSample, Split,
    SynthConfig, Task,
};

pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT: &str = "alignmamba-dataset/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleEntry {
    pub id: usize,
    pub split: Split,
    pub label: Label,
    /// Relative to the dataset directory, one per modality in order.
    pub files: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub task: Task,
    pub num_classes: usize,
    pub modalities: Vec<ModalitySpec>,
    /// Generator settings, when the data is synthetic.
    pub synth: Option<SynthConfig>,
    pub samples: Vec<SampleEntry>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn is_nonempty_dir(dir: &Path) -> Result<bool, DataError> {
    match fs::read_dir(dir) {
        Ok(mut entries) => Ok(entries.next().is_some()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(false),
        Err(e) => Err(io_err(dir)(e)),
    }
}

/// Writes `ds` under `dir`. A non-empty `dir` is refused unless `force`, in
/// which case a previous dataset there is replaced.
pub fn save_dataset(
    ds: &Dataset,
    dir: &Path,
    synth: Option<&SynthConfig>,
    force: bool,
) -> Result<Manifest, DataError> {
    if is_nonempty_dir(dir)? {
        if !force {
            return Err(DataError::DirNotEmpty(dir.to_path_buf()));
        }
        let old = dir.join("samples");
        if old.exists() {
            fs::remove_dir_all(&old).map_err(io_err(&old))?;
        }
    }
    let sample_dir = dir.join("samples");
    fs::create_dir_all(&sample_dir).map_err(io_err(&sample_dir))?;

    let mut samples = Vec::with_capacity(ds.len());
    for (id, (s, &split)) in ds.samples.iter().zip(&ds.splits).enumerate() {
        let mut files = Vec::with_capacity(s.features.len());
        for (m, x) in ds.modalities.iter().zip(&s.features) {
            let rel = format!("samples/{id:05}_{}.mat1", m.name);
            save_mat1(dir.join(&rel), x)?;
            files.push(rel);
        }
        samples.push(SampleEntry {
            id,
            split,
            label: s.label,
            files,
        });
    }
    let manifest = Manifest {
        format: FORMAT.to_string(),
        task: ds.task,
        num_classes: ds.num_classes,
        modalities: ds.modalities.clone(),
        synth: synth.cloned(),
        samples,
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json + "\n").map_err(io_err(&path))?;
    Ok(manifest)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let bad = |msg: String| DataError::Manifest {
        path: path.clone(),
        msg,
    };
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    if manifest.format != FORMAT {
        return Err(bad(format!("unsupported format {:?}", manifest.format)));
    }
    let mut samples = Vec::with_capacity(manifest.samples.len());
    let mut splits = Vec::with_capacity(manifest.samples.len());
    for entry in &manifest.samples {
        if entry.files.len() != manifest.modalities.len() {
            return Err(bad(format!(
                "sample {} lists {} files for {} modalities",
                entry.id,
                entry.files.len(),
                manifest.modalities.len()
            )));
        }
        let mut features = Vec::with_capacity(entry.files.len());
        for (m, file) in manifest.modalities.iter().zip(&entry.files) {
            let x = load_mat1(dir.join(file))?;
            if x.shape() != [m.len, m.d_in] {
                return Err(bad(format!(
                    "{file}: shape {:?}, modality {} expects [{}, {}]",
                    x.shape(),
                    m.name,
                    m.len,
                    m.d_in
                )));
            }
            features.push(x);
        }
        match (manifest.task, entry.label) {
            (Task::Classification, Label::Class(c)) if c < manifest.num_classes => {}
            (Task::Regression, Label::Value(_)) => {}
            (_, label) => {
                return Err(bad(format!(
                    "sample {}: label {label:?} does not fit the task",
                    entry.id
                )))
            }
        }
        samples.push(MultimodalSample {
            features,
            label: entry.label,
        });
        splits.push(entry.split);
    }
    Ok(Dataset {
        modalities: manifest.modalities,
        task: manifest.task,
        num_classes: manifest.num_classes,
        samples,
        splits,
    })
}

/// Path of the manifest inside a dataset directory.
pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join(MANIFEST_FILE)
}
