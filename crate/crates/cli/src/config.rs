//! The JSON run configuration shared by every subcommand.
//!
//! Every section and key is optional; missing keys take the defaults below.
//! Unknown keys are rejected.
//!
//! ```json
//! {
//!   "model":    { "d_model": 16, "align": { "lambda_ot": 0.001, "lambda_mmd": 0.01 } },
//!   "train":    { "lr": 0.001, "max_epochs": 50, "seed": 0 },
//!   "data":     { "samples_per_class": 200, "rho": 0.5, "seed": 0 },
//!   "ablation": { "no_alignment": false, "no_moe": false, "learnable_routing": false }
//! }
//! ```

use std::fs;
use std::path::Path;

use alignmamba::data::{Dataset, SynthConfig, Task};
use alignmamba::model::{Ablation, Head, ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: SynthConfig,
    pub ablation: Ablation,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let config =
            |section: &str, e: &dyn std::fmt::Display| CliError::Usage(format!("{section}: {e}"));
        self.model.validate().map_err(|e| config("model", &e))?;
        self.train.validate().map_err(|e| config("train", &e))?;
        self.data.validate().map_err(|e| config("data", &e))?;
        if self.model.modalities != self.data.modalities {
            return Err(CliError::Usage(
                "model.modalities must equal data.modalities (names, d_in and len, in order)"
                    .into(),
            ));
        }
        let head = match self.data.task {
            Task::Classification => Head::Classification(self.data.num_classes),
            Task::Regression => Head::Regression,
        };
        if self.model.head != head {
            return Err(CliError::Usage(format!(
                "model.head is {:?} but data.task and data.num_classes imply {head:?}",
                self.model.head
            )));
        }
        Ok(())
    }

    /// The model config with the ablation switches applied.
    pub fn effective_model(&self) -> ModelConfig {
        self.model.ablated(&self.ablation)
    }
}

/// Rejects a dataset the model config cannot consume.
pub fn check_compatible(model: &ModelConfig, ds: &Dataset) -> Result<(), CliError> {
    if model.modalities != ds.modalities {
        return Err(CliError::Usage(format!(
            "model.modalities {:?} do not match the dataset's {:?}",
            model.modalities.iter().map(|m| &m.name).collect::<Vec<_>>(),
            ds.modalities.iter().map(|m| &m.name).collect::<Vec<_>>()
        )));
    }
    let head = match ds.task {
        Task::Classification => Head::Classification(ds.num_classes),
        Task::Regression => Head::Regression,
    };
    if model.head != head {
        return Err(CliError::Usage(format!(
            "model.head is {:?}, the dataset needs {head:?}",
            model.head
        )));
    }
    Ok(())
}
