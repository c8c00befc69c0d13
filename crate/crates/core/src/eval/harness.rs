//! Train-then-test drivers for single runs, ablations and sweeps.

use std::fmt::Write as _;

use serde::Serialize;

use super::{meta_test, EvalReport};
use crate::cgib::GateRecord;
use crate::data::Dataset;
use crate::error::{config_err, Result};
use crate::meta::{Checkpoint, GateMonitor, StepReport, TrainConfig, Trainer};
use crate::stats::{mean, std_dev};

/// Everything one train-then-test run produces.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: EvalReport,
    pub steps: Vec<StepReport>,
    /// Retain probabilities before training (epoch 0) and after each epoch.
    pub gates: Vec<GateRecord>,
    pub checkpoint: Checkpoint,
}

/// Trains for `epochs * steps_per_epoch` outer steps, then meta-tests.
/// `on_step` sees every step report with the trainer state after it.
pub fn train_and_evaluate(
    cfg: &TrainConfig,
    ds: &Dataset,
    train_props: &[usize],
    test_props: &[usize],
    mut on_step: impl FnMut(&StepReport, &Trainer) -> Result<()>,
) -> Result<RunOutcome> {
    let mut trainer = Trainer::new(cfg.clone(), ds, train_props)?;
    let monitor = GateMonitor::new(ds, trainer.config(), train_props)?;
    let mut gates = monitor.snapshot(ds, trainer.config(), trainer.params(), 0)?;
    let mut steps = Vec::new();
    for epoch in 1..=cfg.epochs {
        for _ in 0..cfg.steps_per_epoch {
            let r = trainer.train_step()?;
            on_step(&r, &trainer)?;
            steps.push(r);
        }
        gates.extend(monitor.snapshot(ds, trainer.config(), trainer.params(), epoch)?);
    }
    let report = meta_test(trainer.params(), trainer.config(), ds, trainer.aux_pool(), test_props)?;
    Ok(RunOutcome { report, steps, gates, checkpoint: trainer.checkpoint() })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub mode: String,
    pub seed: u64,
    pub mean_roc_auc: f64,
    pub mean_pr_auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationSummary {
    pub mode: String,
    pub roc_auc_mean: f64,
    pub roc_auc_std: f64,
    pub pr_auc_mean: f64,
    pub pr_auc_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    /// One entry per mode, averaged over seeds, in the order given.
    pub summary: Vec<AblationSummary>,
}

impl AblationReport {
    pub fn from_rows(rows: Vec<AblationRow>) -> Self {
        let mut modes: Vec<String> = Vec::new();
        for r in &rows {
            if !modes.contains(&r.mode) {
                modes.push(r.mode.clone());
            }
        }
        let summary = modes
            .into_iter()
            .map(|mode| {
                let roc: Vec<f64> = rows.iter().filter(|r| r.mode == mode).map(|r| r.mean_roc_auc).collect();
                let pr: Vec<f64> = rows.iter().filter(|r| r.mode == mode).map(|r| r.mean_pr_auc).collect();
                AblationSummary {
                    mode,
                    roc_auc_mean: mean(&roc),
                    roc_auc_std: std_dev(&roc),
                    pr_auc_mean: mean(&pr),
                    pr_auc_std: std_dev(&pr),
                }
            })
            .collect();
        Self { rows, summary }
    }

    pub fn mode_mean(&self, mode: &str) -> Option<f64> {
        self.summary.iter().find(|s| s.mode == mode).map(|s| s.roc_auc_mean)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("mode,roc_auc_mean,roc_auc_std,pr_auc_mean,pr_auc_std\n");
        for r in &self.summary {
            let _ = writeln!(s, "{},{},{},{},{}", r.mode, r.roc_auc_mean, r.roc_auc_std, r.pr_auc_mean, r.pr_auc_std);
        }
        s
    }
}

/// Runs every mode under every seed with otherwise identical settings.
pub fn ablate(
    base: &TrainConfig,
    ds: &Dataset,
    train_props: &[usize],
    test_props: &[usize],
    modes: &[&str],
    seeds: &[u64],
) -> Result<AblationReport> {
    let mut configs = Vec::new();
    for &mode in modes {
        let mut cfg = base.clone();
        cfg.apply_mode(mode)?;
        cfg.validate()?;
        configs.push((mode, cfg));
    }
    let mut rows = Vec::new();
    for (mode, cfg) in &configs {
        for &seed in seeds {
            let cfg = TrainConfig { seed, ..cfg.clone() };
            let out = train_and_evaluate(&cfg, ds, train_props, test_props, |_, _| Ok(()))?;
            log::info!("ablation {mode} seed {seed}: ROC-AUC {:.4}", out.report.mean_roc_auc);
            rows.push(AblationRow {
                mode: mode.to_string(),
                seed,
                mean_roc_auc: out.report.mean_roc_auc,
                mean_pr_auc: out.report.mean_pr_auc,
            });
        }
    }
    Ok(AblationReport::from_rows(rows))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Beta,
    Temperature,
    NAuxi,
}

impl std::str::FromStr for SweepAxis {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "beta" => Ok(Self::Beta),
            "temperature" | "t" => Ok(Self::Temperature),
            "n_auxi" => Ok(Self::NAuxi),
            _ => Err(config_err!("unknown sweep axis `{s}` (beta, temperature, n_auxi)")),
        }
    }
}

impl SweepAxis {
    pub fn key(self) -> &'static str {
        match self {
            Self::Beta => "beta",
            Self::Temperature => "temperature",
            Self::NAuxi => "n_auxi",
        }
    }

    /// Default grid for the axis.
    pub fn preset(self) -> Vec<String> {
        let v: &[&str] = match self {
            Self::Beta => &["0.01", "0.05", "0.1", "0.5", "1"],
            Self::Temperature => &["0.1", "0.2", "0.5", "1", "2"],
            Self::NAuxi => &["1", "2", "3", "4", "5"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }
}

/// Configurations for every sweep value, rejecting the whole sweep if any
/// value is invalid for the axis or the property pool.
pub fn sweep_configs(
    axis: SweepAxis,
    values: &[String],
    base: &TrainConfig,
    num_train_props: usize,
) -> Result<Vec<TrainConfig>> {
    if values.is_empty() {
        return Err(config_err!("sweep needs at least one value"));
    }
    values
        .iter()
        .map(|v| {
            let mut cfg = base.clone();
            cfg.set(axis.key(), v)?;
            cfg.validate()?;
            if axis == SweepAxis::NAuxi && cfg.n_auxi + 1 > num_train_props {
                return Err(config_err!(
                    "n_auxi = {} exceeds the pool of {num_train_props} training properties",
                    cfg.n_auxi
                ));
            }
            Ok(cfg)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: String,
    pub mean_roc_auc: f64,
    pub mean_pr_auc: f64,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("axis,value,mean_roc_auc,mean_pr_auc\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.axis.key(), r.value, r.mean_roc_auc, r.mean_pr_auc);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_validation_is_up_front() {
        let base = TrainConfig::default();
        let vals: Vec<String> = ["0.1", "-1"].iter().map(|s| s.to_string()).collect();
        assert!(sweep_configs(SweepAxis::Beta, &vals, &base, 7).is_err());
        let vals = SweepAxis::NAuxi.preset();
        assert!(sweep_configs(SweepAxis::NAuxi, &vals, &base, 5).is_err());
        assert_eq!(sweep_configs(SweepAxis::NAuxi, &vals, &base, 6).unwrap().len(), 5);
        assert_eq!(sweep_configs(SweepAxis::Beta, &SweepAxis::Beta.preset(), &base, 7).unwrap().len(), 5);
        assert!(sweep_configs(SweepAxis::Temperature, &[], &base, 7).is_err());
    }

    #[test]
    fn ablation_summary_keeps_mode_order() {
        let row = |mode: &str, seed, auc| AblationRow { mode: mode.into(), seed, mean_roc_auc: auc, mean_pr_auc: auc };
        let r = AblationReport::from_rows(vec![row("full", 0, 0.8), row("full", 1, 0.6), row("no_cprl", 0, 0.5)]);
        assert_eq!(r.summary[0].mode, "full");
        assert!((r.mode_mean("full").unwrap() - 0.7).abs() < 1e-12);
        assert_eq!(r.mode_mean("no_cgib"), None);
    }
}
