//! Run configuration shared by all subcommands. Values come from, in
//! order of precedence: command-line flags, the `--config` JSON file,
//! built-in defaults.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Deserialize;
use windcf::counterfactual::{CounterfactualConfig, Mode};
use windcf::solver::SolveConfig;
use windcf::train::TrainConfig;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub mode: Option<Mode>,
    pub epsilon: Option<f64>,
    pub mdt: Option<f64>,
    pub beta: Option<f64>,
    pub pi: Option<f64>,
    pub price: Option<f64>,
    pub tau_eq: Option<f64>,
    pub q: Option<f64>,
    pub ratio: Option<f64>,
    pub k: Option<usize>,
    pub seed: Option<u64>,
    pub train_stats: Option<bool>,
    pub time_limit: Option<f64>,
    pub gap: Option<f64>,
    pub jobs: Option<usize>,
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| crate::UsageError(format!("config {}: {e}", path.display())).into())
    }

    /// Fills every unset field of `self` from `base`.
    pub fn or(self, base: &RunConfig) -> RunConfig {
        RunConfig {
            data: self.data.or_else(|| base.data.clone()),
            model: self.model.or_else(|| base.model.clone()),
            out: self.out.or_else(|| base.out.clone()),
            mode: self.mode.or(base.mode),
            epsilon: self.epsilon.or(base.epsilon),
            mdt: self.mdt.or(base.mdt),
            beta: self.beta.or(base.beta),
            pi: self.pi.or(base.pi),
            price: self.price.or(base.price),
            tau_eq: self.tau_eq.or(base.tau_eq),
            q: self.q.or(base.q),
            ratio: self.ratio.or(base.ratio),
            k: self.k.or(base.k),
            seed: self.seed.or(base.seed),
            train_stats: self.train_stats.or(base.train_stats),
            time_limit: self.time_limit.or(base.time_limit),
            gap: self.gap.or(base.gap),
            jobs: self.jobs.or(base.jobs),
        }
    }

    pub fn require<'a>(&self, value: &'a Option<PathBuf>, flag: &str) -> anyhow::Result<&'a Path> {
        value.as_deref().ok_or_else(|| crate::UsageError(format!("missing {flag} (flag or config file)")).into())
    }

    pub fn counterfactual(&self) -> CounterfactualConfig {
        let mut c = CounterfactualConfig { epsilon: self.epsilon, ..Default::default() };
        if let Some(v) = self.mdt {
            c.limits.m_dt = v;
        }
        if let Some(v) = self.beta {
            c.limits.beta = v;
        }
        if let Some(v) = self.pi {
            c.revenue.pi = v;
        }
        if let Some(v) = self.price {
            c.revenue.price = v;
        }
        if let Some(v) = self.tau_eq {
            c.tau_eq = v;
        }
        c.solver = SolveConfig {
            time_limit: self.time_limit.unwrap_or(c.solver.time_limit),
            gap: self.gap.unwrap_or(c.solver.gap),
            ..c.solver
        };
        c
    }

    pub fn train(&self) -> TrainConfig {
        let mut c = TrainConfig::default();
        if let Some(v) = self.q {
            c.q = v;
        }
        if let Some(v) = self.ratio {
            c.ratio = v;
        }
        if let Some(v) = self.k {
            c.mlp.folds = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.train_stats {
            c.stats_from_train = v;
        }
        c
    }

    pub fn mode(&self) -> Mode {
        self.mode.unwrap_or(Mode::Operator)
    }
}
