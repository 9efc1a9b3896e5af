use std::path::{Path, PathBuf};

use fusion_probe::fusion::{FusionHeadConfig, FusionKind};
use fusion_probe::train::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::Failure;

/// Everything a train, eval or sweep invocation needs.
///
/// Built from command-line flags first; a `--config` JSON file is then merged on
/// top key by key, so any key the file sets wins over the matching flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    pub head: FusionHeadConfig,
    pub train: TrainConfig,
    pub trained_view: Option<String>,
    pub out: Option<PathBuf>,
    /// Heads trained by `sweep`.
    pub heads: Vec<FusionKind>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            head: FusionHeadConfig::new(FusionKind::AvgPool, 0),
            train: TrainConfig::default(),
            trained_view: None,
            out: None,
            heads: FusionKind::ALL.to_vec(),
        }
    }
}

/// Flag values shared by the run-style subcommands.
#[derive(Debug, Clone, Default)]
pub struct Flags {
    pub manifest: Option<PathBuf>,
    pub head: Option<FusionKind>,
    pub heads: Option<Vec<FusionKind>>,
    pub trained_view: Option<String>,
    pub epochs: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub config: Option<PathBuf>,
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    pub fn resolve(flags: &Flags) -> Result<Self, Failure> {
        let mut cfg = RunConfig {
            manifest: flags.manifest.clone(),
            trained_view: flags.trained_view.clone(),
            out: flags.out.clone(),
            ..RunConfig::default()
        };
        if let Some(kind) = flags.head {
            cfg.head.kind = kind;
        }
        if let Some(heads) = &flags.heads {
            cfg.heads = heads.clone();
        }
        if let Some(epochs) = flags.epochs {
            cfg.train.epochs = epochs;
        }
        if let Some(seed) = flags.seed {
            cfg.train.seed = seed;
            cfg.head.seed = seed;
        }
        let Some(path) = &flags.config else {
            return Ok(cfg);
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::usage(format!("cannot read config {}: {e}", path.display())))?;
        let file: Value = serde_json::from_str(&text)
            .map_err(|e| Failure::usage(format!("config {} is not valid JSON: {e}", path.display())))?;
        if !file.is_object() {
            return Err(Failure::usage(format!("config {} must be a JSON object", path.display())));
        }
        let mut merged = serde_json::to_value(&cfg).expect("run config serializes");
        merge(&mut merged, file);
        serde_json::from_value(merged)
            .map_err(|e| Failure::usage(format!("config {}: {e}", path.display())))
    }

    pub fn manifest(&self) -> Result<&Path, Failure> {
        self.manifest
            .as_deref()
            .ok_or_else(|| Failure::usage("no manifest given (use --manifest or a config key)"))
    }

    pub fn out(&self) -> Result<&Path, Failure> {
        self.out
            .as_deref()
            .ok_or_else(|| Failure::usage("no output directory given (use --out or a config key)"))
    }

    pub fn trained_view(&self) -> Result<&str, Failure> {
        self.trained_view
            .as_deref()
            .ok_or_else(|| Failure::usage("no trained view given (use --trained-view or a config key)"))
    }
}
