use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{GateForm, GateLocation, GateStage};
use crate::error::{RaveError, Result};
use crate::model::{AttentionVariant, Optimizer, TaskParams, ToyModel, ToyModelSpec, TrainParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalParams {
    pub num_examples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceParams {
    pub num_prompts: usize,
    pub seed: u64,
}

/// Everything a run depends on. Output locations are deliberately not part
/// of it, so a sidecar can be replayed into a different directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ToyModelSpec,
    pub task: TaskParams,
    pub train: TrainParams,
    pub init_seed: u64,
    pub eval: EvalParams,
    pub trace: TraceParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut model = ToyModelSpec::new(64, 32, 2, 4, 2, AttentionVariant::Rave);
        model.gate_init_std = 0.01;
        RunConfig {
            model,
            task: TaskParams::default(),
            train: TrainParams {
                steps: 5000,
                batch_size: 32,
                optimizer: Optimizer::Sgd { lr: 0.1 },
                data_seed: 7,
            },
            init_seed: 1,
            eval: EvalParams {
                num_examples: 500,
                seed: 999,
            },
            trace: TraceParams {
                num_prompts: 50,
                seed: 5,
            },
        }
    }
}

impl RunConfig {
    /// Reads a config file, or the `config` member of a run sidecar.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| RaveError::io(path, e))?;
        let json_err = |source| RaveError::Json {
            path: path.to_path_buf(),
            source,
        };
        let value: serde_json::Value = serde_json::from_str(&text).map_err(json_err)?;
        let value = match value.get("config") {
            Some(inner) if value.get("command").is_some() => inner.clone(),
            _ => value,
        };
        serde_json::from_value(value).map_err(json_err)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.train.batch_size == 0 {
            return Err(RaveError::Config(
                "train.batch_size must be positive".into(),
            ));
        }
        if self.task.seq_len() > self.model.max_seq_len {
            return Err(RaveError::Config(format!(
                "task sequences have {} tokens but max_seq_len is {}",
                self.task.seq_len(),
                self.model.max_seq_len
            )));
        }
        if self.eval.num_examples == 0 || self.trace.num_prompts == 0 {
            return Err(RaveError::Config(
                "eval and trace need at least one example".into(),
            ));
        }
        Ok(())
    }

    pub fn build_model(&self) -> Result<ToyModel> {
        self.validate()?;
        ToyModel::new(self.model.clone(), self.init_seed)
    }
}

/// Command-line adjustments applied on top of a loaded config.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub variant: Option<AttentionVariant>,
    pub location: Option<GateLocation>,
    pub form: Option<GateForm>,
    pub head_ratio: Option<f64>,
    pub stage: Option<GateStage>,
    pub gamma: Option<f64>,
    pub gate_init_std: Option<f64>,
    pub steps: Option<usize>,
    pub lr: Option<f64>,
    pub seed: Option<u64>,
    pub data_seed: Option<u64>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        let a = &mut cfg.model.attention;
        if let Some(v) = self.variant {
            cfg.model.variant = v;
        }
        if let Some(v) = self.location {
            a.location = v;
        }
        if let Some(v) = self.form {
            a.form = v;
        }
        if let Some(v) = self.head_ratio {
            a.head_ratio = v;
        }
        if let Some(v) = self.stage {
            a.stage = v;
        }
        if let Some(v) = self.gamma {
            a.gamma = v;
        }
        if let Some(v) = self.gate_init_std {
            cfg.model.gate_init_std = v;
        }
        if let Some(v) = self.steps {
            cfg.train.steps = v;
        }
        if let Some(lr) = self.lr {
            match &mut cfg.train.optimizer {
                Optimizer::Sgd { lr: x } | Optimizer::Adam { lr: x, .. } => *x = lr,
            }
        }
        if let Some(v) = self.seed {
            cfg.init_seed = v;
        }
        if let Some(v) = self.data_seed {
            cfg.train.data_seed = v;
        }
    }
}
