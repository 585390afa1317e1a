//! Ablation and hyperparameter sweeps over a fixed dataset.
//!
//! Each run trains from its own seed and is independent of the others, so
//! runs fan out through [`par::map`]; results come back in job order.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};
use crate::intervention::LossBreakdown;
use crate::metrics::MetricsReport;
use crate::model::Ablation;
use crate::par;
use crate::synth::SyntheticDataset;
use crate::task::TaskKind;
use crate::train::{train, TrainConfig};

pub const FULL: &str = "full";
/// Every regulariser switched off at once.
pub const FULLY_ABLATED: &str = "fully_ablated";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub ablation: Ablation,
}

impl Variant {
    pub fn full() -> Self {
        Self {
            name: FULL.into(),
            ablation: Ablation::default(),
        }
    }

    /// `full`, `fully_ablated`, or flags joined by `+`
    /// (`no_iv`, `no_unif`, `kl_to_mse`, `no_intv`, `no_ib`).
    pub fn parse(s: &str) -> Result<Self> {
        let name = s.trim();
        let mut ab = Ablation::default();
        match name {
            FULL => {}
            FULLY_ABLATED => {
                ab = Ablation {
                    no_iv: true,
                    no_unif: true,
                    no_intv: true,
                    no_ib: true,
                    kl_to_mse: false,
                }
            }
            _ => {
                for flag in name.split('+') {
                    let slot = match flag.trim() {
                        "no_iv" => &mut ab.no_iv,
                        "no_unif" => &mut ab.no_unif,
                        "kl_to_mse" => &mut ab.kl_to_mse,
                        "no_intv" => &mut ab.no_intv,
                        "no_ib" => &mut ab.no_ib,
                        other => {
                            return arg_err(format!(
                                "unknown variant {other:?}; expected full, {FULLY_ABLATED}, no_iv, no_unif, kl_to_mse, no_intv or no_ib"
                            ))
                        }
                    };
                    *slot = true;
                }
            }
        }
        Ok(Self {
            name: name.to_string(),
            ablation: ab,
        })
    }

    /// Comma-separated list; empty input gives an empty list.
    pub fn parse_list(s: &str) -> Result<Vec<Self>> {
        s.split(',').filter(|p| !p.trim().is_empty()).map(Self::parse).collect()
    }
}

/// Outcome of one train + evaluate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub variant: String,
    pub seed: u64,
    pub val: MetricsReport,
    pub test_id: MetricsReport,
    pub test_ood: MetricsReport,
    pub final_loss: LossBreakdown,
}

/// Trains with `config` and scores val, test-ID and test-OOD.
pub fn run_once(config: &TrainConfig, ds: &SyntheticDataset, variant: &str) -> Result<RunResult> {
    let model = train(config, &ds.train.batch)?;
    Ok(RunResult {
        variant: variant.to_string(),
        seed: config.seed,
        val: model.evaluate(&ds.val.batch)?,
        test_id: model.evaluate(&ds.test_id.batch)?,
        test_ood: model.evaluate(&ds.test_ood.batch)?,
        final_loss: model.history.last().copied().unwrap_or_default(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Some(Self { mean, std })
    }
}

/// Mean ± std of every applicable metric over a set of reports.
pub fn summarize(reports: &[&MetricsReport]) -> BTreeMap<String, Summary> {
    let mut out = BTreeMap::new();
    let Some(first) = reports.first() else {
        return out;
    };
    for (i, (name, _)) in first.entries().iter().enumerate() {
        let values: Vec<f64> = reports.iter().filter_map(|r| r.entries()[i].1).collect();
        if values.len() == reports.len() {
            if let Some(s) = Summary::of(&values) {
                out.insert((*name).to_string(), s);
            }
        }
    }
    out
}

fn headline(task: TaskKind) -> &'static str {
    match task {
        TaskKind::Classification { .. } => "accuracy",
        TaskKind::Regression => "acc2_incl_zero",
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: String,
    pub ablation: Ablation,
    pub seeds: Vec<u64>,
    pub test_id: BTreeMap<String, Summary>,
    pub test_ood: BTreeMap<String, Summary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    /// Metric used for `ordering`.
    pub headline: String,
    pub runs: Vec<RunResult>,
    pub variants: Vec<VariantSummary>,
    /// Variants by descending mean OOD headline metric.
    pub ordering: Vec<(String, f64)>,
}

impl AblationReport {
    pub fn variant(&self, name: &str) -> Option<&VariantSummary> {
        self.variants.iter().find(|v| v.variant == name)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# ablation ({} runs, headline metric {})", self.runs.len(), self.headline);
        let _ = writeln!(s, "{:<36} {:>5} {:>18} {:>18}", "variant", "seeds", "id", "ood");
        for v in &self.variants {
            let cell = |m: &BTreeMap<String, Summary>| {
                m.get(&self.headline)
                    .map_or("-".to_string(), |x| format!("{:.4} ± {:.4}", x.mean, x.std))
            };
            let _ = writeln!(
                s,
                "{:<36} {:>5} {:>18} {:>18}",
                v.variant,
                v.seeds.len(),
                cell(&v.test_id),
                cell(&v.test_ood)
            );
        }
        let _ = writeln!(s, "\n# OOD ordering");
        for (i, (name, v)) in self.ordering.iter().enumerate() {
            let _ = writeln!(s, "{:>2}. {:<36} {:.4}", i + 1, name, v);
        }
        s
    }
}

/// Trains the full model plus every variant for every seed.
pub fn ablate(base: &TrainConfig, ds: &SyntheticDataset, variants: &[Variant], seeds: &[u64]) -> Result<AblationReport> {
    if seeds.is_empty() {
        return arg_err("ablation needs at least one seed");
    }
    let mut all = vec![Variant::full()];
    for v in variants {
        if !all.iter().any(|a| a.name == v.name) {
            all.push(v.clone());
        }
    }
    let jobs: Vec<(Variant, u64)> = all
        .iter()
        .flat_map(|v| seeds.iter().map(move |&s| (v.clone(), s)))
        .collect();
    let runs = par::map(jobs, |(v, seed)| {
        let cfg = TrainConfig {
            seed,
            ablation: v.ablation,
            ..base.clone()
        };
        run_once(&cfg, ds, &v.name)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let headline = headline(ds.spec.task).to_string();
    let summaries: Vec<VariantSummary> = all
        .iter()
        .map(|v| {
            let mine: Vec<&RunResult> = runs.iter().filter(|r| r.variant == v.name).collect();
            VariantSummary {
                variant: v.name.clone(),
                ablation: v.ablation,
                seeds: mine.iter().map(|r| r.seed).collect(),
                test_id: summarize(&mine.iter().map(|r| &r.test_id).collect::<Vec<_>>()),
                test_ood: summarize(&mine.iter().map(|r| &r.test_ood).collect::<Vec<_>>()),
            }
        })
        .collect();
    let mut ordering: Vec<(String, f64)> = summaries
        .iter()
        .map(|v| (v.variant.clone(), v.test_ood.get(&headline).map_or(f64::NAN, |s| s.mean)))
        .collect();
    ordering.sort_by(|a, b| b.1.total_cmp(&a.1));
    Ok(AblationReport {
        headline,
        runs,
        variants: summaries,
        ordering,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Lambda1,
    Lambda2,
    Beta,
}

impl SweepParam {
    fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "lambda1" => Ok(Self::Lambda1),
            "lambda2" => Ok(Self::Lambda2),
            "beta" => Ok(Self::Beta),
            other => arg_err(format!("unknown sweep parameter {other:?}; expected lambda1, lambda2 or beta")),
        }
    }

    fn apply(self, cfg: &mut TrainConfig, v: f64) {
        match self {
            Self::Lambda1 => cfg.lambda1 = v,
            Self::Lambda2 => cfg.lambda2 = v,
            Self::Beta => cfg.beta = v,
        }
    }
}

fn tidy(v: f64) -> f64 {
    (v * 1e12).round() / 1e12
}

/// Axes of a sweep, parsed from `name=values;name=values`, where values are a
/// comma list (`1e-5,1e-4`) or an inclusive range `lo:hi:step`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub axes: Vec<(SweepParam, Vec<f64>)>,
}

impl Grid {
    pub fn parse(spec: &str) -> Result<Self> {
        let mut axes: Vec<(SweepParam, Vec<f64>)> = Vec::new();
        for part in spec.split(';').filter(|p| !p.trim().is_empty()) {
            let Some((name, values)) = part.split_once('=') else {
                return arg_err(format!("grid entry {part:?} is not name=values"));
            };
            let param = SweepParam::parse(name)?;
            if axes.iter().any(|(p, _)| *p == param) {
                return arg_err(format!("{name} appears twice in the grid"));
            }
            let num = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| crate::Error::Argument(format!("bad number {s:?} in grid")))
            };
            let parts: Vec<&str> = values.split(':').collect();
            let vals = match parts.as_slice() {
                [lo, hi, step] => {
                    let (lo, hi, step) = (num(lo)?, num(hi)?, num(step)?);
                    if !(step > 0.0) || hi < lo {
                        return arg_err(format!("bad range {values:?}"));
                    }
                    let n = ((hi - lo) / step + 1e-9).floor() as usize + 1;
                    (0..n).map(|i| tidy(lo + i as f64 * step)).collect()
                }
                [_] => values.split(',').map(num).collect::<Result<Vec<_>>>()?,
                _ => return arg_err(format!("bad values {values:?}")),
            };
            if vals.is_empty() || vals.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                return arg_err(format!("{name} needs finite non-negative values"));
            }
            axes.push((param, vals));
        }
        if axes.is_empty() {
            return arg_err("empty sweep grid");
        }
        Ok(Self { axes })
    }

    /// Cartesian product in axis order, last axis fastest.
    pub fn points(&self, base: &TrainConfig) -> Vec<TrainConfig> {
        let mut out = vec![base.clone()];
        for (param, values) in &self.axes {
            out = out
                .into_iter()
                .flat_map(|cfg| {
                    values.iter().map(move |&v| {
                        let mut c = cfg.clone();
                        param.apply(&mut c, v);
                        c
                    })
                })
                .collect();
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda1: f64,
    pub lambda2: f64,
    pub beta: f64,
    pub seeds: Vec<u64>,
    pub val: BTreeMap<String, Summary>,
    pub test_id: BTreeMap<String, Summary>,
    pub test_ood: BTreeMap<String, Summary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    /// Validation metric used to pick `best`: accuracy for classes, MAE for scores.
    pub selection_metric: String,
    pub rows: Vec<SweepRow>,
    pub best: usize,
    pub runs: Vec<RunResult>,
}

impl SweepReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# sweep ({} points, selection by val {})", self.rows.len(), self.selection_metric);
        let headline = if self.selection_metric == "mae" {
            "acc2_incl_zero"
        } else {
            "accuracy"
        };
        let _ = writeln!(
            s,
            "{:>8} {:>8} {:>10} {:>12} {:>18} {:>18}",
            "lambda1", "lambda2", "beta", "val", "id", "ood"
        );
        for (i, r) in self.rows.iter().enumerate() {
            let cell = |m: &BTreeMap<String, Summary>, k: &str| {
                m.get(k).map_or("-".to_string(), |x| format!("{:.4} ± {:.4}", x.mean, x.std))
            };
            let _ = writeln!(
                s,
                "{:>8} {:>8} {:>10} {:>12} {:>18} {:>18}{}",
                r.lambda1,
                r.lambda2,
                format!("{:e}", r.beta),
                r.val.get(&self.selection_metric).map_or("-".into(), |x| format!("{:.4}", x.mean)),
                cell(&r.test_id, headline),
                cell(&r.test_ood, headline),
                if i == self.best { "  *" } else { "" }
            );
        }
        s
    }
}

pub fn sweep(base: &TrainConfig, ds: &SyntheticDataset, grid: &Grid, seeds: &[u64]) -> Result<SweepReport> {
    if seeds.is_empty() {
        return arg_err("sweep needs at least one seed");
    }
    let points = grid.points(base);
    let jobs: Vec<(usize, TrainConfig)> = points
        .iter()
        .enumerate()
        .flat_map(|(i, p)| {
            seeds.iter().map(move |&seed| {
                (
                    i,
                    TrainConfig {
                        seed,
                        ..p.clone()
                    },
                )
            })
        })
        .collect();
    let runs = par::map(jobs, |(i, cfg)| run_once(&cfg, ds, &format!("point{i}")))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<SweepRow> = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mine: Vec<&RunResult> = runs.iter().filter(|r| r.variant == format!("point{i}")).collect();
            SweepRow {
                lambda1: p.lambda1,
                lambda2: p.lambda2,
                beta: p.beta,
                seeds: mine.iter().map(|r| r.seed).collect(),
                val: summarize(&mine.iter().map(|r| &r.val).collect::<Vec<_>>()),
                test_id: summarize(&mine.iter().map(|r| &r.test_id).collect::<Vec<_>>()),
                test_ood: summarize(&mine.iter().map(|r| &r.test_ood).collect::<Vec<_>>()),
            }
        })
        .collect();
    let (metric, lower_better) = match ds.spec.task {
        TaskKind::Classification { .. } => ("accuracy", false),
        TaskKind::Regression => ("mae", true),
    };
    let score = |r: &SweepRow| r.val.get(metric).map_or(f64::NAN, |s| s.mean);
    let mut best = 0;
    for (i, r) in rows.iter().enumerate() {
        let (a, b) = (score(r), score(&rows[best]));
        let better = if lower_better { a < b } else { a > b };
        if better || b.is_nan() && !a.is_nan() {
            best = i;
        }
    }
    Ok(SweepReport {
        selection_metric: metric.into(),
        rows,
        best,
        runs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_parsing() {
        assert_eq!(Variant::parse("full").unwrap().ablation, Ablation::default());
        let v = Variant::parse("no_iv+no_intv").unwrap();
        assert!(v.ablation.no_iv && v.ablation.no_intv && !v.ablation.no_ib);
        let all = Variant::parse(FULLY_ABLATED).unwrap().ablation;
        assert!(all.no_iv && all.no_unif && all.no_intv && all.no_ib && !all.kl_to_mse);
        assert!(Variant::parse("no_magic").is_err());
        assert!(Variant::parse_list("").unwrap().is_empty());
        assert_eq!(Variant::parse_list("no_iv, no_unif").unwrap().len(), 2);
    }

    #[test]
    fn grid_cardinality() {
        let g = Grid::parse("lambda1=0.1:1.0:0.1;lambda2=0.3").unwrap();
        let pts = g.points(&TrainConfig::default());
        assert_eq!(pts.len(), 10);
        assert_eq!(pts[2].lambda1, 0.3);
        assert_eq!(pts[9].lambda1, 1.0);
        assert!(pts.iter().all(|p| p.lambda2 == 0.3));
        let g = Grid::parse("beta=1e-5,1e-4,1e-2").unwrap();
        assert_eq!(g.points(&TrainConfig::default()).len(), 3);
        assert!(Grid::parse("").is_err());
        assert!(Grid::parse("gamma=1").is_err());
        assert!(Grid::parse("beta=1;beta=2").is_err());
    }

    #[test]
    fn summary_statistics() {
        let s = Summary::of(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(s.mean, 2.0);
        assert!((s.std - 1.0).abs() < 1e-15);
        assert_eq!(Summary::of(&[4.0]).unwrap().std, 0.0);
    }
}
