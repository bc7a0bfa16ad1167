//! Ablation over the decoder/retrieval variants and the λ sweep.

use std::fmt::{self, Write as _};

use log::info;
use serde::Serialize;

use super::config::{Dataset, RunConfig};
use super::run::{evaluate, train_on, LogRecord};
use crate::data::Part;
use crate::error::Result;
use crate::metrics::Metrics;
use crate::model::Variant;

pub const LAMBDA_GRID: [f64; 5] = [0.0, 0.01, 0.1, 1.0, 10.0];

/// Whether the logged learning rate never increases.
pub fn lr_is_monotone(log: &[LogRecord]) -> bool {
    log.windows(2).all(|w| w[1].lr <= w[0].lr)
}

fn mean_metrics(ms: &[Metrics]) -> Metrics {
    let n = ms.len().max(1) as f64;
    let avg = |f: fn(&Metrics) -> f64| ms.iter().map(f).sum::<f64>() / n;
    Metrics {
        precision: avg(|m| m.precision),
        recall: avg(|m| m.recall),
        f1: avg(|m| m.f1),
        oa: avg(|m| m.oa),
        iou: avg(|m| m.iou),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub seeds: Vec<u64>,
    /// Test metrics of the best-validation checkpoint, one per seed.
    pub runs: Vec<Metrics>,
    pub mean: Metrics,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, variant: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }
}

impl fmt::Display for AblationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<18} {:>7} {:>7} {:>7} {:>7} {:>7}   F1 per seed", "Method", "P", "R", "F1", "OA", "IoU")?;
        for r in &self.rows {
            let p = r.mean.percent();
            let mut seeds = String::new();
            for m in &r.runs {
                let _ = write!(seeds, " {:.2}", m.percent().f1);
            }
            writeln!(
                f,
                "{:<18} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>7.2}  {seeds}",
                r.variant.label(),
                p.p,
                p.r,
                p.f1,
                p.oa,
                p.iou
            )?;
        }
        Ok(())
    }
}

/// Trains every variant once per seed on the same data split and reports
/// held-out test metrics.
pub fn run_ablation(base: &RunConfig, data: &Dataset, variants: &[Variant], seeds: &[u64]) -> Result<AblationReport> {
    let mut rows = Vec::new();
    for &variant in variants {
        let mut runs = Vec::new();
        for &seed in seeds {
            let mut cfg = base.clone();
            variant.apply(&mut cfg.model);
            cfg.loop_.seed = seed;
            let out = train_on(&cfg, data, None)?;
            let (m, _) = evaluate(&out.best.model, data, Part::Test)?;
            info!("{} seed {seed}: test F1 {:.4}", variant.label(), m.f1);
            runs.push(m);
        }
        rows.push(AblationRow {
            variant,
            seeds: seeds.to_vec(),
            mean: mean_metrics(&runs),
            runs,
        });
    }
    Ok(AblationReport { rows })
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub test: Metrics,
    pub best_val_f1: Option<f64>,
    pub lr_monotone: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

impl fmt::Display for SweepReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>8} {:>7} {:>7} {:>7} {:>7} {:>7}", "lambda", "P", "R", "F1", "OA", "IoU")?;
        for r in &self.rows {
            let p = r.test.percent();
            writeln!(
                f,
                "{:>8} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>7.2}",
                r.lambda, p.p, p.r, p.f1, p.oa, p.iou
            )?;
        }
        Ok(())
    }
}

/// One training run per λ with everything else fixed.
pub fn run_lambda_sweep(base: &RunConfig, data: &Dataset, lambdas: &[f64]) -> Result<SweepReport> {
    let mut rows = Vec::new();
    for &lambda in lambdas {
        let mut cfg = base.clone();
        cfg.loss.lambda = lambda;
        let out = train_on(&cfg, data, None)?;
        let (test, _) = evaluate(&out.best.model, data, Part::Test)?;
        info!("lambda {lambda}: test F1 {:.4}", test.f1);
        rows.push(SweepRow {
            lambda,
            test,
            best_val_f1: out.best.val_metrics.map(|m| m.f1),
            lr_monotone: lr_is_monotone(&out.log),
        });
    }
    Ok(SweepReport { rows })
}
