//! Backdoor-adjustment recombination and the full objective.

use serde::{Deserialize, Serialize};

use crate::disentangle::task_loss_from_outputs;
use crate::error::{arg_err, shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::nn;
use crate::numeric::Bindings;
use crate::rng::RngStream;
use crate::task::{Labels, TaskHead};

/// For each sample, the batch indices whose shortcut parts it is paired with.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShortcutDraw {
    sources: Vec<Vec<usize>>,
}

impl ShortcutDraw {
    pub fn sources(&self) -> &[Vec<usize>] {
        &self.sources
    }

    pub fn batch_size(&self) -> usize {
        self.sources.len()
    }

    /// Pairs every sample with its own shortcut. Never produced by
    /// [`sample_shortcut_set`]; used to check that `z_c + z_s` rebuilds `z_m`.
    pub fn identity(batch: usize) -> Self {
        Self {
            sources: (0..batch).map(|i| vec![i]).collect(),
        }
    }

    /// Arbitrary pairing, validated for range and equal per-sample counts.
    pub fn from_sources(sources: Vec<Vec<usize>>) -> Result<Self> {
        let n = sources.len();
        let k = sources.first().map_or(0, Vec::len);
        for row in &sources {
            if row.len() != k || row.iter().any(|&i| i >= n) {
                return arg_err("shortcut sources must be in range and of equal length");
            }
        }
        Ok(Self { sources })
    }
}

/// Draw `k` foreign indices per sample, uniformly without replacement.
pub fn sample_shortcut_set(batch: usize, k: usize, rng: &mut RngStream) -> Result<ShortcutDraw> {
    if batch < 2 {
        return Err(Error::Config(format!(
            "shortcut recombination needs at least 2 samples, got {batch}"
        )));
    }
    if k < 1 || k > batch - 1 {
        return Err(Error::Config(format!(
            "shortcut count k={k} outside 1..={}",
            batch - 1
        )));
    }
    let sources = (0..batch)
        .map(|i| {
            let others: Vec<usize> = (0..batch).filter(|&j| j != i).collect();
            rng.choose_distinct(&others, k)
        })
        .collect();
    Ok(ShortcutDraw { sources })
}

/// Mean task loss of the head on pooled `z_c^n + z_s^(s)` over all pairs
/// `(n, s ∈ Ŝ(n))`, scored against `y^n`.
#[allow(clippy::too_many_arguments)]
pub fn intervention_loss(
    g: &mut Graph,
    b: &Bindings,
    head: &TaskHead,
    z_c: Var,
    z_s: Var,
    draw: &ShortcutDraw,
    labels: &Labels,
    seq_len: usize,
    dropout: Option<(f64, &mut RngStream)>,
) -> Result<Var> {
    let n = draw.batch_size();
    if labels.len() != n || g.value(z_c).rows() != n * seq_len || g.value(z_s).shape() != g.value(z_c).shape() {
        return shape_err(
            "intervention_loss",
            format!(
                "draw for {n} samples, {} labels, z_c {:?}, z_s {:?}",
                labels.len(),
                g.value(z_c).shape(),
                g.value(z_s).shape()
            ),
        );
    }
    labels.check_task(head.task)?;
    let mut causal_rows = Vec::new();
    let mut shortcut_rows = Vec::new();
    let mut owners = Vec::new();
    for (i, srcs) in draw.sources().iter().enumerate() {
        for &s in srcs {
            causal_rows.extend((0..seq_len).map(|t| i * seq_len + t));
            shortcut_rows.extend((0..seq_len).map(|t| s * seq_len + t));
            owners.push(i);
        }
    }
    let zc = g.gather_rows(z_c, causal_rows);
    let zs = g.gather_rows(z_s, shortcut_rows);
    let recombined = g.add(zc, zs);
    let pooled = nn::mean_pool(g, recombined, seq_len);
    let out = head.forward(g, b, pooled, dropout);
    task_loss_from_outputs(g, out, &labels.select(&owners))
}

/// Every loss component and the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Sum of the per-modality IB losses.
    pub ib: f64,
    pub caus: f64,
    pub iv_align: f64,
    pub unif: f64,
    pub intv: f64,
    pub total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub beta: f64,
    /// Multiplier on `ib` in the total; 1 unless configured otherwise.
    pub ib_weight: f64,
}

impl LossBreakdown {
    /// `caus + λ1·(iv_align + unif) + λ2·intv + ib_weight·ib` from the stored parts.
    pub fn recomposed_total(&self) -> f64 {
        self.caus + self.lambda1 * (self.iv_align + self.unif) + self.lambda2 * self.intv + self.ib_weight * self.ib
    }
}

/// Weights of the total objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub beta: f64,
    pub ib_weight: f64,
}

impl LossWeights {
    pub fn new(lambda1: f64, lambda2: f64, beta: f64) -> Self {
        Self {
            lambda1,
            lambda2,
            beta,
            ib_weight: 1.0,
        }
    }
}

/// Unweighted loss components.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub ib: f64,
    pub caus: f64,
    pub iv_align: f64,
    pub unif: f64,
    pub intv: f64,
}

fn check_weights(w: &LossWeights) -> Result<()> {
    for (name, v) in [("λ1", w.lambda1), ("λ2", w.lambda2), ("IB weight", w.ib_weight)] {
        if !(v >= 0.0) || !v.is_finite() {
            return arg_err(format!("loss weights must be non-negative, got {name}={v}"));
        }
    }
    Ok(())
}

/// `caus + λ1·(iv_align + unif) + λ2·intv + ib`.
pub fn total_loss(parts: LossParts, lambda1: f64, lambda2: f64, beta: f64) -> Result<LossBreakdown> {
    total_loss_weighted(parts, LossWeights::new(lambda1, lambda2, beta))
}

pub fn total_loss_weighted(parts: LossParts, w: LossWeights) -> Result<LossBreakdown> {
    check_weights(&w)?;
    let values = [parts.ib, parts.caus, parts.iv_align, parts.unif, parts.intv];
    if values.iter().any(|v| !v.is_finite()) {
        return arg_err("loss parts must be finite");
    }
    let mut out = LossBreakdown {
        ib: parts.ib,
        caus: parts.caus,
        iv_align: parts.iv_align,
        unif: parts.unif,
        intv: parts.intv,
        total: 0.0,
        lambda1: w.lambda1,
        lambda2: w.lambda2,
        beta: w.beta,
        ib_weight: w.ib_weight,
    };
    out.total = out.recomposed_total();
    Ok(out)
}

/// Graph handles of the loss components; `None` marks a disabled term.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossVars {
    pub ib: Option<Var>,
    pub caus: Option<Var>,
    pub iv_align: Option<Var>,
    pub unif: Option<Var>,
    pub intv: Option<Var>,
}

/// Differentiable total plus the breakdown read off the same graph.
pub fn total_loss_graph(g: &mut Graph, parts: LossVars, w: LossWeights) -> Result<(Var, LossBreakdown)> {
    check_weights(&w)?;
    let LossWeights {
        lambda1,
        lambda2,
        ib_weight,
        ..
    } = w;
    let Some(caus) = parts.caus else {
        return arg_err("the causal task loss is always required");
    };
    let mut total = caus;
    let disent: Vec<Var> = [parts.iv_align, parts.unif].into_iter().flatten().collect();
    if !disent.is_empty() && lambda1 != 0.0 {
        let s = disent[1..].iter().fold(disent[0], |acc, &v| g.add(acc, v));
        let w = g.scale(s, lambda1);
        total = g.add(total, w);
    }
    if let Some(intv) = parts.intv {
        if lambda2 != 0.0 {
            let w = g.scale(intv, lambda2);
            total = g.add(total, w);
        }
    }
    if let Some(ib) = parts.ib {
        let ib = if ib_weight == 1.0 { ib } else { g.scale(ib, ib_weight) };
        total = g.add(total, ib);
    }
    let read = |v: Option<Var>, g: &Graph| v.map_or(0.0, |v| g.scalar(v));
    let breakdown = total_loss_weighted(
        LossParts {
            ib: read(parts.ib, g),
            caus: g.scalar(caus),
            iv_align: read(parts.iv_align, g),
            unif: read(parts.unif, g),
            intv: read(parts.intv, g),
        },
        w,
    )?;
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forced_pairing_for_two() {
        let d = sample_shortcut_set(2, 1, &mut RngStream::new(0)).unwrap();
        assert_eq!(d.sources(), &[vec![1], vec![0]]);
    }

    #[test]
    fn draws_are_repeatable() {
        let a = sample_shortcut_set(8, 1, &mut RngStream::new(11)).unwrap();
        let b = sample_shortcut_set(8, 1, &mut RngStream::new(11)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_sizes() {
        let mut r = RngStream::new(0);
        assert!(matches!(sample_shortcut_set(1, 1, &mut r), Err(Error::Config(_))));
        assert!(sample_shortcut_set(4, 0, &mut r).is_err());
        assert!(sample_shortcut_set(4, 4, &mut r).is_err());
        assert!(sample_shortcut_set(4, 3, &mut r).is_ok());
    }

    #[test]
    fn weighted_total_arithmetic() {
        let parts = LossParts {
            ib: 0.0,
            caus: 1.0,
            iv_align: 2.0,
            unif: 3.0,
            intv: 4.0,
        };
        let b = total_loss(parts, 0.2, 0.3, 1e-4).unwrap();
        assert!((b.total - 3.2).abs() < 1e-12);
        let only_caus = total_loss(parts, 0.0, 0.0, 1e-4).unwrap();
        assert_eq!(only_caus.total, 1.0);
        assert!(total_loss(parts, -0.1, 0.3, 1e-4).is_err());
    }
}
