//! Run configuration: one JSON document with per-command sections. Unknown
//! keys are rejected; the resolved form (after defaults and CLI overrides) is
//! echoed into every artifact directory.

use relvox_core::attribution::RuleConfig;
use relvox_core::error::{Error, Result};
use relvox_core::eval::ScenarioConfig;
use relvox_core::net::NetworkSpec;
use relvox_core::phantom::PhantomConfig;
use relvox_core::train::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Which samples form the evaluation pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolKind {
    /// Best fold's validation samples plus the test split (default).
    ValTest,
    Cv,
    Test,
    All,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub quantiles: Vec<f64>,
    pub reference_quantile: f64,
    pub ig_steps: usize,
    pub permutations: usize,
    /// Scenario ids to run, drawn from the standard table.
    pub scenarios: Vec<u8>,
    pub pool: PoolKind,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            quantiles: vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6],
            reference_quantile: 0.4,
            ig_steps: 64,
            permutations: 20_000,
            scenarios: (1..=12).collect(),
            pool: PoolKind::ValTest,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn scenario_configs(&self) -> Result<Vec<ScenarioConfig>> {
        let table = ScenarioConfig::table();
        self.scenarios
            .iter()
            .map(|&id| {
                table
                    .iter()
                    .find(|s| s.id == id)
                    .copied()
                    .ok_or_else(|| Error::Config(format!("unknown scenario id {}", id)))
            })
            .collect()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub phantom: PhantomConfig,
    pub network: NetworkSpec,
    pub train: TrainConfig,
    pub rules: RuleConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)?;
                let cfg: RunConfig = serde_json::from_str(&text)
                    .map_err(|e| Error::Config(format!("{}: {}", p.display(), e)))?;
                Ok(cfg)
            }
        }
    }

    /// Apply command-line overrides. The seed override pins every section's
    /// seed so the echoed config is fully explicit.
    pub fn with_overrides(mut self, seed: Option<u64>, threads: Option<usize>) -> Self {
        if let Some(s) = seed {
            self.phantom.seed = s;
            self.train.seed = s;
            self.eval.seed = s;
        }
        if let Some(t) = threads {
            self.train.threads = t.max(1);
        }
        self
    }

    /// Write the resolved config echo (with tool version) into an artifact dir.
    pub fn write_echo(&self, dir: &Path, command: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let echo = serde_json::json!({
            "tool": { "name": "relvox", "version": env!("CARGO_PKG_VERSION") },
            "command": command,
            "config": self,
        });
        std::fs::write(dir.join("resolved-config.json"), serde_json::to_string_pretty(&echo)?)?;
        Ok(())
    }
}
