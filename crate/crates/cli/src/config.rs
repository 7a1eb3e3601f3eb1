//! Run configuration: defaults, optional JSON file, then command-line flags.

use std::path::{Path, PathBuf};

use qpi_core::{Activation, BacktestConfig, IntervalSpec, NetworkShape, SalesSpec, TrainConfig, Tricks};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Everything a `train` or `backtest` run depends on. The output directory
/// is deliberately not part of it, so relocating a run does not change the
/// recorded config hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub betas: Vec<f64>,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub data: Option<PathBuf>,
    pub generator: Option<SalesSpec>,
    /// Use CSV exogenous columns directly as features instead of lag windows.
    pub tabular: bool,
    pub window: usize,
    pub horizon: usize,
    pub test_days: usize,
    pub refit_every: usize,
    pub tricks: Tricks,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            betas: vec![0.7, 0.75, 0.8, 0.9],
            hidden: vec![16],
            activation: Activation::Relu,
            data: None,
            generator: None,
            tabular: false,
            window: 14,
            horizon: 1,
            test_days: 76,
            refit_every: 1,
            tricks: Tricks {
                fixed_seed: true,
                penalty: true,
                median_feature: false,
            },
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        match (&self.data, &self.generator) {
            (Some(_), Some(_)) => return Err(CliError::Usage("give exactly one of --data or --generator, not both".into())),
            (None, None) => return Err(CliError::Usage("a data source is required: --data FILE or --generator sales".into())),
            _ => {}
        }
        if self.betas.is_empty() {
            return Err(CliError::Usage("at least one --beta is required".into()));
        }
        self.specs()?;
        self.train.validate()?;
        if self.window == 0 || self.horizon == 0 || self.test_days == 0 || self.refit_every == 0 {
            return Err(CliError::Usage(
                "--window, --horizon, --test-days and --refit-every must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn specs(&self) -> Result<Vec<IntervalSpec>, CliError> {
        Ok(self.betas.iter().map(|&b| IntervalSpec::new(b)).collect::<Result<_, _>>()?)
    }

    /// Network shape for `input_dim` features.
    pub fn shape(&self, input_dim: usize) -> Result<NetworkShape, CliError> {
        Ok(NetworkShape::new(input_dim, self.hidden.clone(), self.activation)?)
    }

    pub fn backtest(&self) -> BacktestConfig {
        BacktestConfig {
            window: self.window,
            horizon: self.horizon,
            test_days: self.test_days,
            refit_every: self.refit_every,
        }
    }
}

/// Parses `none` or a comma list drawn from `fixed_seed`, `penalty`, `median_feature`.
pub fn parse_tricks(s: &str) -> Result<Tricks, String> {
    let mut t = Tricks::NONE;
    if s.trim() == "none" {
        return Ok(t);
    }
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part {
            "fixed_seed" => t.fixed_seed = true,
            "penalty" => t.penalty = true,
            "median_feature" => t.median_feature = true,
            "all" => t = Tricks::ALL,
            other => {
                return Err(format!(
                    "unknown trick `{other}` (expected fixed_seed, penalty, median_feature, all or none)"
                ))
            }
        }
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tricks_parse() {
        assert_eq!(parse_tricks("none").unwrap(), Tricks::NONE);
        assert_eq!(parse_tricks("all").unwrap(), Tricks::ALL);
        let t = parse_tricks("fixed_seed,penalty").unwrap();
        assert!(t.fixed_seed && t.penalty && !t.median_feature);
        assert!(parse_tricks("seed").is_err());
    }

    #[test]
    fn config_json_round_trip_and_validation() {
        let mut c = RunConfig::default();
        assert!(c.validate().is_err());
        c.generator = Some(SalesSpec::default());
        c.validate().unwrap();
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        c.data = Some("x.csv".into());
        assert!(c.validate().is_err());

        let partial: RunConfig = serde_json::from_str(r#"{"betas":[0.5],"train":{"seed":3}}"#).unwrap();
        assert_eq!(partial.betas, vec![0.5]);
        assert_eq!(partial.train.seed, 3);
        assert_eq!(partial.train.lr0, 1e-3);
        assert!(serde_json::from_str::<RunConfig>(r#"{"betaz":[0.5]}"#).is_err());
    }
}
