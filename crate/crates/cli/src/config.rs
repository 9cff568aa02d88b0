//! Run configuration: one TOML file, every section optional.

use std::path::{Path, PathBuf};

use facdiff::bench::{
    arena_frame, factor_space, parse_task, BudgetParts, EnsembleSpec, ModelConfig, ModelKind, SweepSpec,
};
use facdiff::certify::VehicleStack;
use facdiff::vehicle::ChunkFrame;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const CONFIG_VERSION: u32 = 1;

/// The shipped defaults; used when no `--config` is given.
pub const DEFAULT_CONFIG: &str = include_str!("../configs/default.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RosterKind {
    /// Networks from `train`'s checkpoint.
    Learned,
    /// Exact Dirac fields of each model's training set.
    ClosedForm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    pub out: PathBuf,
    pub track_seed: u64,
    /// Discrete diffusion steps of the training schedule.
    pub train_steps: usize,
    pub ddim_steps: usize,
    pub roster: RosterKind,
    /// Checkpoint for the learned roster; `train`'s output when unset.
    pub checkpoint: Option<PathBuf>,
    pub frame: ChunkFrame,
    pub vehicle: VehicleStack,
    pub models: ModelConfig,
    pub race: RaceConfig,
    pub sweep: SweepSpec,
    pub diagnose: DiagnoseConfig,
    pub contraction: EnsembleSpec,
    pub certify: CertifyConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RaceConfig {
    pub models: Vec<ModelKind>,
    pub seeds: Vec<u64>,
    /// Task names such as `race3_standard`; every feasible task when unset.
    pub tasks: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnoseConfig {
    pub seeds: Vec<u64>,
    /// The held-out tasks when unset.
    pub tasks: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CertifyConfig {
    /// The held-out tasks when unset; `--task` overrides.
    pub tasks: Option<Vec<String>>,
    /// Output of `estimate-contraction` when unset.
    pub contraction: Option<PathBuf>,
    /// Fixed budget parts; measured on the roster when unset.
    pub budget: Option<BudgetParts>,
    /// Noised expert states per task for the budget measurement.
    pub budget_samples: usize,
    pub delta0: f64,
    /// Allowed miss of the nominal at a gate center (m).
    pub tolerance: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            out: PathBuf::from("runs"),
            track_seed: 0,
            train_steps: 100,
            ddim_steps: 50,
            roster: RosterKind::Learned,
            checkpoint: None,
            frame: arena_frame(),
            vehicle: VehicleStack::default(),
            models: ModelConfig::default(),
            race: RaceConfig::default(),
            sweep: SweepSpec::default(),
            diagnose: DiagnoseConfig::default(),
            contraction: EnsembleSpec::default(),
            certify: CertifyConfig::default(),
        }
    }
}

impl Default for RaceConfig {
    fn default() -> Self {
        Self {
            models: vec![
                ModelKind::Baseline,
                ModelKind::FactoredComposed,
                ModelKind::FactoredJoint,
                ModelKind::Knet,
            ],
            seeds: vec![0],
            tasks: None,
        }
    }
}

impl Default for DiagnoseConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0],
            tasks: None,
        }
    }
}

impl Default for CertifyConfig {
    fn default() -> Self {
        Self {
            tasks: None,
            contraction: None,
            budget: None,
            budget_samples: 8,
            delta0: 0.0,
            tolerance: 1e-2,
        }
    }
}

impl RunConfig {
    /// Parses `text` laid over the shipped defaults, so a partial section
    /// keeps the defaults of the keys it leaves out.
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let parse = |t: &str| {
            t.parse::<toml::Table>()
                .map_err(|e| CliError::Config(format!("bad config: {e}")))
        };
        let mut merged = parse(DEFAULT_CONFIG)?;
        merge(&mut merged, parse(text)?);
        let c: Self = toml::Value::Table(merged)
            .try_into()
            .map_err(|e| CliError::Config(format!("bad config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Self::from_toml(DEFAULT_CONFIG),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", p.display())))?;
                Self::from_toml(&text)
            }
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.version != CONFIG_VERSION {
            return bad(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            ));
        }
        if self.train_steps < 2 {
            return bad("train_steps must be at least 2".into());
        }
        if self.ddim_steps == 0 || self.ddim_steps > self.train_steps {
            return bad(format!("ddim_steps must lie in 1..={}", self.train_steps));
        }
        if !(self.models.train.p_drop >= 0.0 && self.models.train.p_drop < 1.0) {
            return bad("models.train.p_drop must lie in [0, 1)".into());
        }
        if self.models.train.total_steps() == 0 {
            return bad("models.train needs at least one optimiser step".into());
        }
        if self.race.seeds.is_empty() || self.diagnose.seeds.is_empty() {
            return bad("race.seeds and diagnose.seeds must not be empty".into());
        }
        if self.sweep.ddim_steps.iter().any(|&n| n == 0 || n > self.train_steps)
            || self.sweep.base_steps > self.train_steps
        {
            return bad(format!("sweep DDIM steps must lie in 1..={}", self.train_steps));
        }
        if self.contraction.offsets.is_empty() && self.contraction.command_scales.is_empty() {
            return bad("contraction needs offsets or command_scales".into());
        }
        if !(self.certify.tolerance >= 0.0 && self.certify.delta0 >= 0.0) {
            return bad("certify.tolerance and certify.delta0 must be non-negative".into());
        }
        for list in [&self.race.tasks, &self.diagnose.tasks, &self.certify.tasks]
            .into_iter()
            .flatten()
        {
            tasks_from_names(list)?;
        }
        Ok(())
    }

    /// SHA-256 of the effective configuration (after command-line overrides).
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&canonical).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.out.join("train").join("models.json"))
    }

    pub fn contraction_path(&self) -> PathBuf {
        self.certify
            .contraction
            .clone()
            .unwrap_or_else(|| self.out.join("estimate-contraction").join("contraction.json"))
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

pub fn tasks_from_names(names: &[String]) -> Result<Vec<Vec<usize>>, CliError> {
    let space = factor_space();
    names
        .iter()
        .map(|n| parse_task(&space, n).map_err(|e| CliError::Config(e.to_string())))
        .collect()
}
