//! Run configuration: a flat key=value file, the same keys as CLI
//! flags (flags win), and two presets.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::daft::SharingMode;
use crate::error::HarnessError;
use crate::model::{ModelConfig, ModelKind};
use crate::nn::Nonlinearity;
use crate::ode::{Method, SolverConfig};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SolverSpec {
    pub method: Method,
    pub fixed_steps: usize,
    pub rtol: f64,
    pub atol: f64,
}

impl SolverSpec {
    pub fn dopri5_default() -> Self {
        SolverSpec {
            method: Method::Dopri5,
            fixed_steps: 1,
            rtol: 1e-3,
            atol: 1e-3,
        }
    }

    pub fn to_solver_config(&self, max_nfe: usize) -> SolverConfig {
        SolverConfig {
            method: self.method,
            fixed_steps_per_interval: self.fixed_steps,
            rtol: self.rtol,
            atol: self.atol,
            max_nfe_per_solve: max_nfe,
            ..SolverConfig::default()
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelKind,
    pub steps: usize,
    pub d: usize,
    pub e: usize,
    pub nonlinearity: Nonlinearity,
    pub sharing: SharingMode,
    pub lambda: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub max_epochs: usize,
    pub train_solver: SolverSpec,
    pub eval_solver: SolverSpec,
    pub max_nfe: usize,
    /// Size of the fixed validation subset used for the per-epoch TLT
    /// log column.
    pub tlt_subset: usize,
    pub data_train: String,
    pub data_val: String,
    pub preset: String,
}

impl RunConfig {
    /// `desk` is the fast profile; `paper` keeps the original model
    /// width for anyone with patience.
    pub fn preset(name: &str) -> Result<RunConfig, HarnessError> {
        let mut cfg = RunConfig {
            model: ModelKind::Mac,
            steps: 4,
            d: 64,
            e: 32,
            nonlinearity: Nonlinearity::Elu,
            sharing: SharingMode::Shared,
            lambda: 0.0,
            lr: 1e-4,
            batch_size: 64,
            seed: 0,
            max_epochs: 30,
            train_solver: SolverSpec::dopri5_default(),
            eval_solver: SolverSpec::dopri5_default(),
            max_nfe: 500,
            tlt_subset: 200,
            data_train: "data/train.jsonl".into(),
            data_val: "data/val.jsonl".into(),
            preset: name.to_string(),
        };
        match name {
            "desk" | "custom" => {}
            "paper" => {
                cfg.d = 512;
                cfg.e = 300;
            }
            other => {
                return Err(HarnessError::Config(format!("unknown preset '{other}'")));
            }
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), HarnessError> {
        let bad = |what: &str| HarnessError::Config(format!("bad value '{value}' for {what}"));
        match key {
            "model" => {
                self.model = ModelKind::parse(value).ok_or_else(|| bad("model"))?;
            }
            "steps" => self.steps = value.parse().map_err(|_| bad("steps"))?,
            "d" => self.d = value.parse().map_err(|_| bad("d"))?,
            "e" => self.e = value.parse().map_err(|_| bad("e"))?,
            "nonlinearity" => {
                self.nonlinearity =
                    Nonlinearity::parse(value).ok_or_else(|| bad("nonlinearity"))?;
            }
            "sharing" => {
                self.sharing = SharingMode::parse(value).ok_or_else(|| bad("sharing"))?;
            }
            "lambda" => self.lambda = value.parse().map_err(|_| bad("lambda"))?,
            "lr" => self.lr = value.parse().map_err(|_| bad("lr"))?,
            "batch_size" => self.batch_size = value.parse().map_err(|_| bad("batch_size"))?,
            "seed" => self.seed = value.parse().map_err(|_| bad("seed"))?,
            "max_epochs" => self.max_epochs = value.parse().map_err(|_| bad("max_epochs"))?,
            "train_solver" => {
                self.train_solver.method =
                    Method::parse(value).ok_or_else(|| bad("train_solver"))?;
            }
            "train_fixed_steps" => {
                self.train_solver.fixed_steps =
                    value.parse().map_err(|_| bad("train_fixed_steps"))?;
            }
            "train_rtol" => self.train_solver.rtol = value.parse().map_err(|_| bad("train_rtol"))?,
            "train_atol" => self.train_solver.atol = value.parse().map_err(|_| bad("train_atol"))?,
            "eval_solver" => {
                self.eval_solver.method =
                    Method::parse(value).ok_or_else(|| bad("eval_solver"))?;
            }
            "eval_fixed_steps" => {
                self.eval_solver.fixed_steps =
                    value.parse().map_err(|_| bad("eval_fixed_steps"))?;
            }
            "eval_rtol" => self.eval_solver.rtol = value.parse().map_err(|_| bad("eval_rtol"))?,
            "eval_atol" => self.eval_solver.atol = value.parse().map_err(|_| bad("eval_atol"))?,
            "max_nfe" => self.max_nfe = value.parse().map_err(|_| bad("max_nfe"))?,
            "tlt_subset" => self.tlt_subset = value.parse().map_err(|_| bad("tlt_subset"))?,
            "data_train" => self.data_train = value.to_string(),
            "data_val" => self.data_val = value.to_string(),
            "preset" => {} // consumed before the overlay pass
            other => {
                return Err(HarnessError::Config(format!("unknown config key '{other}'")));
            }
        }
        Ok(())
    }

    /// The residual baseline trains with a single Euler step per
    /// interval by definition.
    pub fn normalize(&mut self) {
        if self.model == ModelKind::DaftResidual {
            self.train_solver.method = Method::Euler;
            self.train_solver.fixed_steps = 1;
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.steps < 1 {
            return Err(HarnessError::Config("steps must be >= 1".into()));
        }
        if self.lambda < 0.0 {
            return Err(HarnessError::Config("lambda must be >= 0".into()));
        }
        if self.batch_size < 1 {
            return Err(HarnessError::Config("batch_size must be >= 1".into()));
        }
        if self.d % 2 != 0 {
            return Err(HarnessError::Config("d must be even".into()));
        }
        self.train_solver
            .to_solver_config(self.max_nfe)
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        self.eval_solver
            .to_solver_config(self.max_nfe)
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            kind: self.model,
            t_steps: self.steps,
            d: self.d,
            e: self.e,
            nonlinearity: self.nonlinearity,
            sharing: self.sharing,
        }
    }

    pub fn train_solver_config(&self) -> SolverConfig {
        self.train_solver.to_solver_config(self.max_nfe)
    }

    pub fn eval_solver_config(&self) -> SolverConfig {
        self.eval_solver.to_solver_config(self.max_nfe)
    }
}

fn parse_kv_line(line: &str) -> Result<Option<(String, String)>, HarnessError> {
    let trimmed = line.trim();
    if trimmed.is_empty() || trimmed.starts_with('#') {
        return Ok(None);
    }
    match trimmed.split_once('=') {
        Some((k, v)) => Ok(Some((k.trim().to_string(), v.trim().to_string()))),
        None => Err(HarnessError::Config(format!(
            "expected key=value, got '{trimmed}'"
        ))),
    }
}

/// Assemble a config from an optional file plus override pairs (CLI
/// flags); later entries win, and the preset is resolved first so all
/// other keys overlay it.
pub fn build_config(
    file: Option<&Path>,
    overrides: &[(String, String)],
) -> Result<RunConfig, HarnessError> {
    let mut kvs: Vec<(String, String)> = Vec::new();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)?;
        for line in text.lines() {
            if let Some(kv) = parse_kv_line(line)? {
                kvs.push(kv);
            }
        }
    }
    kvs.extend(overrides.iter().cloned());

    let preset = kvs
        .iter()
        .rev()
        .find(|(k, _)| k == "preset")
        .map(|(_, v)| v.clone())
        .unwrap_or_else(|| "desk".to_string());
    let mut cfg = RunConfig::preset(&preset)?;
    for (k, v) in &kvs {
        cfg.set(k, v)?;
    }
    cfg.normalize();
    cfg.validate()?;
    Ok(cfg)
}
