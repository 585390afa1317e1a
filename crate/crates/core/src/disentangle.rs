//! Fusion, complementary masking and the disentanglement losses.
//!
//! The fused representation `Z_m` is split elementwise by a learned mask
//! `M_c ∈ (0,1)` into `Z_c = M_c ⊙ Z_m` and `Z_s = (1 − M_c) ⊙ Z_m`. `Z_c` is
//! pulled toward the instrument and must predict the label; the prediction
//! made from `Z_s` by the same head is pushed toward an uninformative prior.

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, Result};
use crate::graph::{Graph, Var};
use crate::nn::{self, Activation};
use crate::numeric::{Bindings, ParameterSet};
use crate::rng::RngStream;
use crate::task::{mean_log_likelihood, Labels, TaskHead, TaskKind};
use crate::tensor::Tensor;

/// Per-token fusion of concatenated modality latents: `act(concat · W + b)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fusion {
    pub prefix: String,
    pub modalities: usize,
    pub dim: usize,
    pub activation: Activation,
}

impl Fusion {
    pub fn init(&self, params: &mut ParameterSet, rng: &mut RngStream) {
        nn::init_linear(params, &self.prefix, self.modalities * self.dim, self.dim, rng);
    }

    /// `z_list[m]` is `(N·L)×d`; output has the same shape.
    pub fn fuse(&self, g: &mut Graph, b: &Bindings, z_list: &[Var]) -> Result<Var> {
        if z_list.len() != self.modalities {
            return shape_err(
                "fuse",
                format!("{} modalities given, fusion built for {}", z_list.len(), self.modalities),
            );
        }
        let first = g.value(z_list[0]).shape().to_vec();
        for &z in z_list {
            if g.value(z).shape() != first.as_slice() || g.value(z).cols() != self.dim {
                return shape_err(
                    "fuse",
                    format!("latent {:?} vs {:?} (dim {})", g.value(z).shape(), first, self.dim),
                );
            }
        }
        let cat = if z_list.len() == 1 { z_list[0] } else { g.concat_cols(z_list) };
        let pre = nn::linear(g, b, &self.prefix, cat);
        Ok(self.activation.apply(g, pre))
    }
}

/// Two-layer perceptron + sigmoid giving `c_ij` for every element of `Z_m`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskGenerator {
    pub prefix: String,
    pub dim: usize,
    pub hidden_dim: usize,
    pub activation: Activation,
}

impl MaskGenerator {
    pub fn init(&self, params: &mut ParameterSet, rng: &mut RngStream) {
        nn::init_linear(params, &format!("{}.hidden", self.prefix), self.dim, self.hidden_dim, rng);
        nn::init_linear(params, &format!("{}.out", self.prefix), self.hidden_dim, self.dim, rng);
    }

    pub fn mask_probabilities(&self, g: &mut Graph, b: &Bindings, z_m: Var) -> Var {
        let h = nn::linear(g, b, &format!("{}.hidden", self.prefix), z_m);
        let h = self.activation.apply(g, h);
        let logits = nn::linear(g, b, &format!("{}.out", self.prefix), h);
        g.sigmoid(logits)
    }
}

/// Complementary masks and the resulting sub-representations.
#[derive(Clone, Copy, Debug)]
pub struct MaskPair {
    pub m_c: Var,
    pub m_s: Var,
    pub z_c: Var,
    pub z_s: Var,
}

/// `Z_c = M_c ⊙ Z_m`, `Z_s = (1 − M_c) ⊙ Z_m`.
pub fn split(g: &mut Graph, z_m: Var, m_c: Var) -> Result<MaskPair> {
    if g.value(z_m).shape() != g.value(m_c).shape() {
        return shape_err(
            "split",
            format!("z_m {:?} vs mask {:?}", g.value(z_m).shape(), g.value(m_c).shape()),
        );
    }
    let m_s = g.one_minus(m_c);
    let z_c = g.mul(m_c, z_m);
    let z_s = g.mul(m_s, z_m);
    Ok(MaskPair { m_c, m_s, z_c, z_s })
}

/// Tensor-level [`split`], returning `(z_c, z_s)`.
pub fn split_tensors(z_m: &Tensor, m_c: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let z = g.constant(z_m.clone());
    let m = g.constant(m_c.clone());
    let p = split(&mut g, z, m)?;
    Ok((g.value(p.z_c).clone(), g.value(p.z_s).clone()))
}

/// `mean((Z_c − V)²)` over every element.
pub fn iv_alignment_loss(g: &mut Graph, z_c: Var, v: Var) -> Result<Var> {
    if g.value(z_c).shape() != g.value(v).shape() {
        return shape_err(
            "iv_alignment_loss",
            format!("z_c {:?} vs v {:?}", g.value(z_c).shape(), g.value(v).shape()),
        );
    }
    let diff = g.sub(z_c, v);
    let sq = g.square(diff);
    Ok(g.mean(sq))
}

/// Cross-entropy (classification) or mean squared error (regression) of raw
/// head outputs against labels.
pub fn task_loss_from_outputs(g: &mut Graph, outputs: Var, labels: &Labels) -> Result<Var> {
    match labels {
        Labels::Classes { .. } => {
            let ll = mean_log_likelihood(g, outputs, labels)?;
            Ok(g.scale(ll, -1.0))
        }
        Labels::Scores(_) => {
            // −2·(−½·mean sq) = mean sq
            let ll = mean_log_likelihood(g, outputs, labels)?;
            Ok(g.scale(ll, -2.0))
        }
    }
}

/// Head prediction from pooled `z_c` scored against the labels.
pub fn causal_task_loss(
    g: &mut Graph,
    b: &Bindings,
    head: &TaskHead,
    z_c: Var,
    labels: &Labels,
    seq_len: usize,
    dropout: Option<(f64, &mut RngStream)>,
) -> Result<Var> {
    labels.check_task(head.task)?;
    let pooled = nn::mean_pool(g, z_c, seq_len);
    let out = head.forward(g, b, pooled, dropout);
    task_loss_from_outputs(g, out, labels)
}

/// Penalty form for the shortcut prediction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UniformityPenalty {
    /// KL divergence to the uninformative prior.
    #[default]
    Kl,
    /// Squared error toward the uniform vector (or the prior mean for regression).
    Mse,
}

/// Penalty that makes the head's prediction from `Z_s` uninformative.
///
/// Classification: mean over samples of `KL(p ‖ uniform(K))`. Regression: KL
/// from `N(ŷ, 1)` to the prior `N(0, s²)`, `ln s − ½ + (1 + ŷ²)/(2s²)`, where `s`
/// is `prior_scale`.
pub fn uniformity_from_outputs(
    g: &mut Graph,
    outputs: Var,
    task: TaskKind,
    prior_scale: f64,
    penalty: UniformityPenalty,
) -> Result<Var> {
    let n = g.value(outputs).rows();
    match task {
        TaskKind::Classification { classes } => {
            if classes < 2 {
                return arg_err(format!("uniformity loss needs at least 2 classes, got {classes}"));
            }
            if g.value(outputs).cols() != classes {
                return shape_err("uniformity_loss", "output width differs from class count");
            }
            let k = classes as f64;
            match penalty {
                UniformityPenalty::Kl => {
                    let p = g.softmax_rows(outputs);
                    let logp = g.log_softmax_rows(outputs);
                    let shifted = g.add_scalar(logp, k.ln());
                    let terms = g.mul(p, shifted);
                    let total = g.sum(terms);
                    Ok(g.scale(total, 1.0 / n as f64))
                }
                UniformityPenalty::Mse => {
                    let p = g.softmax_rows(outputs);
                    let d = g.add_scalar(p, -1.0 / k);
                    let sq = g.square(d);
                    Ok(g.mean(sq))
                }
            }
        }
        TaskKind::Regression => {
            if !(prior_scale > 0.0) {
                return arg_err(format!("prior scale must be positive, got {prior_scale}"));
            }
            let sq = g.square(outputs);
            match penalty {
                UniformityPenalty::Kl => {
                    let s2 = prior_scale * prior_scale;
                    let m = g.mean(sq);
                    let scaled = g.scale(m, 1.0 / (2.0 * s2));
                    Ok(g.add_scalar(scaled, prior_scale.ln() - 0.5 + 1.0 / (2.0 * s2)))
                }
                UniformityPenalty::Mse => Ok(g.mean(sq)),
            }
        }
    }
}

/// Head prediction from pooled `z_s` scored against the uninformative prior.
#[allow(clippy::too_many_arguments)]
pub fn uniformity_loss(
    g: &mut Graph,
    b: &Bindings,
    head: &TaskHead,
    z_s: Var,
    seq_len: usize,
    prior_scale: f64,
    penalty: UniformityPenalty,
    dropout: Option<(f64, &mut RngStream)>,
) -> Result<Var> {
    let pooled = nn::mean_pool(g, z_s, seq_len);
    let out = head.forward(g, b, pooled, dropout);
    uniformity_from_outputs(g, out, head.task, prior_scale, penalty)
}

/// `KL(p ‖ uniform(K))` for a single distribution, with `0·log 0 = 0`.
pub fn kl_to_uniform(p: &[f64]) -> f64 {
    let k = p.len() as f64;
    p.iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * (x * k).ln())
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_limits() {
        let z = RngStream::new(0).normal_tensor(&[2, 3, 4]);
        let (zc, zs) = split_tensors(&z, &Tensor::full(&[2, 3, 4], 0.5)).unwrap();
        assert_eq!(zc, z.scale(0.5));
        assert_eq!(zs, z.scale(0.5));
        let (zc, zs) = split_tensors(&z, &Tensor::ones(&[2, 3, 4])).unwrap();
        assert_eq!(zc, z);
        assert_eq!(zs.max_abs(), 0.0);
        assert!(split_tensors(&z, &Tensor::ones(&[2, 3, 3])).is_err());
    }

    #[test]
    fn alignment_reduction_is_mean() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::full(&[2, 3], 1.5));
        let b = g.constant(Tensor::full(&[2, 3], 0.5));
        let l = iv_alignment_loss(&mut g, a, b).unwrap();
        assert_eq!(g.scalar(l), 1.0);
        let same = iv_alignment_loss(&mut g, a, a).unwrap();
        assert_eq!(g.scalar(same), 0.0);
        let c = g.constant(Tensor::zeros(&[3, 2]));
        assert!(iv_alignment_loss(&mut g, a, c).is_err());
    }

    #[test]
    fn task_loss_cases() {
        let labels = Labels::Classes { classes: 2, values: vec![1, 0] };
        let mut g = Graph::new();
        let perfect = g.constant(Tensor::matrix(2, 2, vec![-1e3, 0.0, 0.0, -1e3]));
        let l = task_loss_from_outputs(&mut g, perfect, &labels).unwrap();
        assert_eq!(g.scalar(l), 0.0);
        let flat = g.constant(Tensor::zeros(&[2, 2]));
        let l = task_loss_from_outputs(&mut g, flat, &labels).unwrap();
        assert!((g.scalar(l) - 2f64.ln()).abs() < 1e-15);

        let scores = Labels::Scores(vec![1.0, 3.0]);
        let pred = g.constant(Tensor::matrix(2, 1, vec![1.0, 1.0]));
        let l = task_loss_from_outputs(&mut g, pred, &scores).unwrap();
        assert!((g.scalar(l) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn uniformity_cases() {
        let task = TaskKind::Classification { classes: 2 };
        let mut g = Graph::new();
        let flat = g.constant(Tensor::zeros(&[3, 2]));
        let u = uniformity_from_outputs(&mut g, flat, task, 1.0, UniformityPenalty::Kl).unwrap();
        assert!(g.scalar(u).abs() < 1e-15);
        // p = (0.9, 0.1) from logits (ln 9, 0)
        let skew = g.constant(Tensor::matrix(1, 2, vec![9f64.ln(), 0.0]));
        let u = uniformity_from_outputs(&mut g, skew, task, 1.0, UniformityPenalty::Kl).unwrap();
        let expected = 0.9 * 1.8f64.ln() + 0.1 * 0.2f64.ln();
        assert!((g.scalar(u) - expected).abs() < 1e-12);
        assert!((expected - 0.36806).abs() < 1e-5);
        assert!((kl_to_uniform(&[0.9, 0.1]) - expected).abs() < 1e-15);

        let reg = g.constant(Tensor::zeros(&[4, 1]));
        let u = uniformity_from_outputs(&mut g, reg, TaskKind::Regression, 1.0, UniformityPenalty::Kl).unwrap();
        assert!(g.scalar(u).abs() < 1e-15);

        let one = g.constant(Tensor::zeros(&[2, 1]));
        let bad = TaskKind::Classification { classes: 1 };
        assert!(uniformity_from_outputs(&mut g, one, bad, 1.0, UniformityPenalty::Kl).is_err());
    }

    #[test]
    fn zero_mask_network_is_one_half() {
        let mg = MaskGenerator {
            prefix: "mask".into(),
            dim: 3,
            hidden_dim: 4,
            activation: Activation::Tanh,
        };
        let mut p = ParameterSet::new();
        mg.init(&mut p, &mut RngStream::new(0));
        for (_, t) in p.iter_mut() {
            *t = Tensor::zeros(t.shape());
        }
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let z = g.constant(RngStream::new(1).normal_tensor(&[5, 3]));
        let m = mg.mask_probabilities(&mut g, &b, z);
        assert!(g.value(m).data().iter().all(|&x| x == 0.5));
    }

    #[test]
    fn saturated_mask() {
        let mg = MaskGenerator {
            prefix: "mask".into(),
            dim: 2,
            hidden_dim: 2,
            activation: Activation::Tanh,
        };
        let mut p = ParameterSet::new();
        mg.init(&mut p, &mut RngStream::new(0));
        for (_, t) in p.iter_mut() {
            *t = Tensor::zeros(t.shape());
        }
        p.insert("mask.out.b", Tensor::full(&[2], 20.0));
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let z = g.constant(Tensor::ones(&[3, 2]));
        let m = mg.mask_probabilities(&mut g, &b, z);
        let expected = 1.0 / (1.0 + (-20f64).exp());
        assert!(g.value(m).data().iter().all(|&x| (x - expected).abs() < 1e-15 && x < 1.0));
        assert!((expected - (1.0 - 2.061e-9)).abs() < 1e-12);
    }

    #[test]
    fn fusion_identity_and_zero() {
        let f = Fusion {
            prefix: "fusion".into(),
            modalities: 1,
            dim: 3,
            activation: Activation::Identity,
        };
        let mut p = ParameterSet::new();
        f.init(&mut p, &mut RngStream::new(0));
        p.insert("fusion.w", Tensor::eye(3));
        let z1 = RngStream::new(2).normal_tensor(&[4, 3]);
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let zv = g.constant(z1.clone());
        let out = f.fuse(&mut g, &b, &[zv]).unwrap();
        assert_eq!(g.value(out), &z1);

        p.insert("fusion.w", Tensor::zeros(&[3, 3]));
        p.insert("fusion.b", Tensor::vector(vec![0.1, 0.2, 0.3]));
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let zv = g.constant(z1);
        let out = f.fuse(&mut g, &b, &[zv]).unwrap();
        for r in 0..4 {
            assert_eq!(g.value(out).row(r), &[0.1, 0.2, 0.3]);
        }
    }
}
