//! Per-modality variational information-bottleneck filtering.
//!
//! Each modality owns an encoder that maps every token of `X_i` to a diagonal
//! Gaussian `N(μ, diag σ²)` with `σ = exp(½·log_var)`, and an auxiliary head
//! `q_ψ(y|z)` reading the mean-pooled latent. The per-batch objective is
//!
//! ```text
//! KL(N(μ, σ²) ‖ N(0, I)) − β · (1/S) Σ_s log q_ψ(y | z⁽ˢ⁾),   z⁽ˢ⁾ = μ + σ ⊙ ε⁽ˢ⁾
//! ```
//!
//! with the KL summed over positions and latent dimensions and everything
//! averaged over the batch. `H(Y)` does not depend on any parameter and is left out.

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{self, Activation};
use crate::numeric::{Bindings, ParameterSet};
use crate::rng::RngStream;
use crate::task::{mean_log_likelihood, Labels, TaskHead};
use crate::tensor::Tensor;

/// Raw per-modality token sequences and their labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityBatch {
    inputs: Vec<Tensor>,
    labels: Labels,
}

impl ModalityBatch {
    /// Every input must be `N×L×d_in` with shared `N` and `L`; `d_in` may vary
    /// per modality.
    pub fn new(inputs: Vec<Tensor>, labels: Labels) -> Result<Self> {
        let Some(first) = inputs.first() else {
            return arg_err("a batch needs at least one modality");
        };
        if first.shape().len() != 3 {
            return shape_err("ModalityBatch", format!("expected N×L×d_in, got {:?}", first.shape()));
        }
        let (n, l) = (first.shape()[0], first.shape()[1]);
        for (i, x) in inputs.iter().enumerate() {
            let s = x.shape();
            if s.len() != 3 || s[0] != n || s[1] != l {
                return shape_err(
                    "ModalityBatch",
                    format!("modality {i} has shape {s:?}, expected [{n}, {l}, _]"),
                );
            }
        }
        if labels.len() != n {
            return shape_err("ModalityBatch", format!("{} labels for {n} samples", labels.len()));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn seq_len(&self) -> usize {
        self.inputs[0].shape()[1]
    }

    pub fn modalities(&self) -> usize {
        self.inputs.len()
    }

    pub fn input_dim(&self, modality: usize) -> usize {
        self.inputs[modality].shape()[2]
    }

    pub fn inputs(&self) -> &[Tensor] {
        &self.inputs
    }

    pub fn labels(&self) -> &Labels {
        &self.labels
    }

    /// Sub-batch of the given sample indices, in that order.
    pub fn select(&self, idx: &[usize]) -> Self {
        let l = self.seq_len();
        let inputs = self
            .inputs
            .iter()
            .map(|x| {
                let d = x.shape()[2];
                let mut data = Vec::with_capacity(idx.len() * l * d);
                for &i in idx {
                    data.extend_from_slice(&x.data()[i * l * d..(i + 1) * l * d]);
                }
                Tensor::new(&[idx.len(), l, d], data).expect("selected shape")
            })
            .collect();
        Self {
            inputs,
            labels: self.labels.select(idx),
        }
    }
}

/// Diagonal Gaussian per token, `N×L×d` each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianPosterior {
    pub mu: Tensor,
    pub log_var: Tensor,
}

impl GaussianPosterior {
    pub fn new(mu: Tensor, log_var: Tensor) -> Result<Self> {
        if mu.shape() != log_var.shape() {
            return shape_err(
                "GaussianPosterior",
                format!("mu {:?} vs log_var {:?}", mu.shape(), log_var.shape()),
            );
        }
        Ok(Self { mu, log_var })
    }

    pub fn sigma(&self) -> Tensor {
        self.log_var.map(|lv| (0.5 * lv).exp())
    }

    /// Leading (batch) extent; 1 for tensors of rank below 2.
    pub fn batch_size(&self) -> usize {
        match self.mu.shape() {
            [n, _, ..] => *n,
            _ => 1,
        }
    }
}

/// Graph handles for a posterior, `(N·L)×d` each.
#[derive(Clone, Copy, Debug)]
pub struct PosteriorVars {
    pub mu: Var,
    pub log_var: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VibConfig {
    pub latent_dim: usize,
    pub beta: f64,
    pub mc_samples: usize,
}

impl VibConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::Config(format!("beta must be non-negative, got {}", self.beta)));
        }
        if self.mc_samples < 1 {
            return Err(Error::Argument("mc_samples must be at least 1".into()));
        }
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be positive".into()));
        }
        Ok(())
    }
}

/// Two-layer token encoder producing `μ` and `log σ²`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityEncoder {
    pub prefix: String,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub latent_dim: usize,
    pub activation: Activation,
}

impl ModalityEncoder {
    pub fn init(&self, params: &mut ParameterSet, rng: &mut RngStream) {
        nn::init_linear(params, &format!("{}.hidden", self.prefix), self.input_dim, self.hidden_dim, rng);
        nn::init_linear(params, &format!("{}.mu", self.prefix), self.hidden_dim, self.latent_dim, rng);
        nn::init_linear(params, &format!("{}.log_var", self.prefix), self.hidden_dim, self.latent_dim, rng);
        // start close to unit variance
        let w = params.get_mut(&format!("{}.log_var.w", self.prefix)).unwrap();
        *w = w.scale(0.1);
    }

    /// Token-wise posterior for `x` (any shape whose last extent is `input_dim`).
    pub fn encode(&self, g: &mut Graph, b: &Bindings, x: Var) -> Result<PosteriorVars> {
        let cols = g.value(x).cols();
        if cols != self.input_dim {
            return shape_err(
                "encode",
                format!("input feature width {cols}, encoder expects {}", self.input_dim),
            );
        }
        let h = nn::linear(g, b, &format!("{}.hidden", self.prefix), x);
        let h = self.activation.apply(g, h);
        let mu = nn::linear(g, b, &format!("{}.mu", self.prefix), h);
        let log_var = nn::linear(g, b, &format!("{}.log_var", self.prefix), h);
        Ok(PosteriorVars { mu, log_var })
    }
}

/// Tensor-level [`ModalityEncoder::encode`]; returns `N×L×d` tensors.
pub fn encode(x: &Tensor, params: &ParameterSet, encoder: &ModalityEncoder) -> Result<GaussianPosterior> {
    if x.shape().len() != 3 {
        return shape_err("encode", format!("expected N×L×d_in, got {:?}", x.shape()));
    }
    let (n, l) = (x.shape()[0], x.shape()[1]);
    let mut g = Graph::new();
    let b = params.bind(&mut g);
    let xv = g.constant(x.clone());
    let post = encoder.encode(&mut g, &b, xv)?;
    let shape = [n, l, encoder.latent_dim];
    GaussianPosterior::new(g.value(post.mu).reshape(&shape)?, g.value(post.log_var).reshape(&shape)?)
}

/// `z = μ + exp(½·log_var) ⊙ ε` with caller-supplied noise.
pub fn reparameterize_graph(g: &mut Graph, post: PosteriorVars, eps: Tensor) -> Var {
    let half = g.scale(post.log_var, 0.5);
    let sigma = g.exp(half);
    let e = g.constant(eps);
    let noise = g.mul(sigma, e);
    g.add(post.mu, noise)
}

/// Draw `z` with fresh standard-normal noise.
pub fn reparameterize(post: &GaussianPosterior, rng: &mut RngStream) -> Result<Tensor> {
    let eps = rng.normal_tensor(post.mu.shape());
    reparameterize_with(post, &eps)
}

pub fn reparameterize_with(post: &GaussianPosterior, eps: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let pv = PosteriorVars {
        mu: g.constant(post.mu.clone()),
        log_var: g.constant(post.log_var.clone()),
    };
    if eps.shape() != post.mu.shape() {
        return shape_err("reparameterize", "noise shape differs from posterior");
    }
    let z = reparameterize_graph(&mut g, pv, eps.clone());
    Ok(g.value(z).clone())
}

/// `½ Σ (σ² + μ² − 1 − log σ²)` summed over all non-batch entries, divided by `batch`.
pub fn kl_to_standard_normal_graph(g: &mut Graph, post: PosteriorVars, batch: usize) -> Var {
    let var = g.exp(post.log_var);
    let mu2 = g.square(post.mu);
    let t = g.add(var, mu2);
    let t = g.sub(t, post.log_var);
    let t = g.add_scalar(t, -1.0);
    let total = g.sum(t);
    g.scale(total, 0.5 / batch as f64)
}

/// Analytic KL to `N(0, I)`, averaged over the leading batch extent.
pub fn kl_to_standard_normal(post: &GaussianPosterior) -> f64 {
    let mut g = Graph::new();
    let pv = PosteriorVars {
        mu: g.constant(post.mu.clone()),
        log_var: g.constant(post.log_var.clone()),
    };
    let kl = kl_to_standard_normal_graph(&mut g, pv, post.batch_size());
    g.scalar(kl)
}

/// `E[log q_ψ(y|z)]` estimate for pooled latents `N×d`.
pub fn predictive_log_likelihood(
    g: &mut Graph,
    b: &Bindings,
    head: &TaskHead,
    z_pooled: Var,
    labels: &Labels,
) -> Result<Var> {
    labels.check_task(head.task)?;
    let out = head.forward(g, b, z_pooled, None);
    mean_log_likelihood(g, out, labels)
}

/// Graph handles produced by [`ib_loss`].
#[derive(Clone, Copy, Debug)]
pub struct IbTerms {
    pub loss: Var,
    pub kl: Var,
    pub log_likelihood: Var,
    /// First Monte-Carlo draw, `(N·L)×d`; this is what the rest of the model consumes.
    pub z: Var,
    pub posterior: PosteriorVars,
}

/// Tractable IB objective for one modality. `x` is `N×L×d_in`.
#[allow(clippy::too_many_arguments)]
pub fn ib_loss(
    g: &mut Graph,
    b: &Bindings,
    encoder: &ModalityEncoder,
    head: &TaskHead,
    x: Var,
    labels: &Labels,
    config: &VibConfig,
    rng: &mut RngStream,
) -> Result<IbTerms> {
    if config.mc_samples < 1 {
        return arg_err("mc_samples must be at least 1");
    }
    let shape = g.value(x).shape().to_vec();
    if shape.len() != 3 {
        return shape_err("ib_loss", format!("expected N×L×d_in, got {shape:?}"));
    }
    let (n, l) = (shape[0], shape[1]);
    let posterior = encoder.encode(g, b, x)?;
    let kl = kl_to_standard_normal_graph(g, posterior, n);
    let eps_shape = [n * l, encoder.latent_dim];
    let mut first = None;
    let mut lls = Vec::with_capacity(config.mc_samples);
    for _ in 0..config.mc_samples {
        let z = reparameterize_graph(g, posterior, rng.normal_tensor(&eps_shape));
        first.get_or_insert(z);
        let pooled = nn::mean_pool(g, z, l);
        lls.push(predictive_log_likelihood(g, b, head, pooled, labels)?);
    }
    let log_likelihood = if lls.len() == 1 {
        lls[0]
    } else {
        let stacked = g.concat_rows(&lls);
        g.mean(stacked)
    };
    let weighted = g.scale(log_likelihood, -config.beta);
    let loss = g.add(kl, weighted);
    Ok(IbTerms {
        loss,
        kl,
        log_likelihood,
        z: first.expect("at least one sample"),
        posterior,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::TaskKind;

    fn encoder(d_in: usize, d: usize) -> ModalityEncoder {
        ModalityEncoder {
            prefix: "enc".into(),
            input_dim: d_in,
            hidden_dim: d,
            latent_dim: d,
            activation: Activation::Tanh,
        }
    }

    fn zero_params(enc: &ModalityEncoder) -> ParameterSet {
        let mut p = ParameterSet::new();
        enc.init(&mut p, &mut RngStream::new(0));
        for (_, t) in p.iter_mut() {
            *t = Tensor::zeros(t.shape());
        }
        p
    }

    #[test]
    fn zero_encoder_gives_standard_normal() {
        let enc = encoder(5, 3);
        let p = zero_params(&enc);
        let x = RngStream::new(1).normal_tensor(&[2, 4, 5]);
        let post = encode(&x, &p, &enc).unwrap();
        assert_eq!(post.mu.shape(), &[2, 4, 3]);
        assert_eq!(post.mu.max_abs(), 0.0);
        assert_eq!(post.log_var.max_abs(), 0.0);
        assert_eq!(kl_to_standard_normal(&post), 0.0);
    }

    #[test]
    fn identity_encoder_reproduces_tokens() {
        let mut enc = encoder(3, 3);
        enc.activation = Activation::Identity;
        let mut p = zero_params(&enc);
        p.insert("enc.hidden.w", Tensor::eye(3));
        p.insert("enc.mu.w", Tensor::eye(3));
        let x = RngStream::new(2).normal_tensor(&[2, 2, 3]);
        let post = encode(&x, &p, &enc).unwrap();
        assert_eq!(post.mu, x);
    }

    #[test]
    fn encode_rejects_wrong_width() {
        let enc = encoder(4, 2);
        let p = zero_params(&enc);
        assert!(encode(&Tensor::zeros(&[1, 1, 3]), &p, &enc).is_err());
    }

    #[test]
    fn reparameterize_arithmetic() {
        let post = GaussianPosterior::new(
            Tensor::full(&[1, 1, 1], 2.0),
            Tensor::full(&[1, 1, 1], 9f64.ln()),
        )
        .unwrap();
        let z = reparameterize_with(&post, &Tensor::full(&[1, 1, 1], 1.0)).unwrap();
        assert!((z.item() - 5.0).abs() < 1e-12);

        let tight = GaussianPosterior::new(Tensor::full(&[1, 1, 2], 0.7), Tensor::full(&[1, 1, 2], -40.0)).unwrap();
        let z = reparameterize(&tight, &mut RngStream::new(3)).unwrap();
        assert!(z.data().iter().all(|v| (v - 0.7).abs() < 1e-8));
    }

    #[test]
    fn kl_closed_form_cases() {
        let one = |mu: f64, var: f64| {
            GaussianPosterior::new(Tensor::full(&[1, 1, 1], mu), Tensor::full(&[1, 1, 1], var.ln())).unwrap()
        };
        assert!((kl_to_standard_normal(&one(1.0, 1.0)) - 0.5).abs() < 1e-15);
        let expected = 0.5 * (2.0 - 1.0 - 2f64.ln());
        assert!((kl_to_standard_normal(&one(0.0, 2.0)) - expected).abs() < 1e-15);
        assert!((expected - 0.15343).abs() < 1e-5);
    }

    #[test]
    fn log_likelihood_cases() {
        let task = TaskKind::Classification { classes: 2 };
        let labels = Labels::Classes { classes: 2, values: vec![0, 1] };
        let mut g = Graph::new();
        let confident = g.constant(Tensor::matrix(2, 2, vec![0.0, -1e3, -1e3, 0.0]));
        let ll = mean_log_likelihood(&mut g, confident, &labels).unwrap();
        assert_eq!(g.scalar(ll), 0.0);
        let flat = g.constant(Tensor::zeros(&[2, 2]));
        let ll = mean_log_likelihood(&mut g, flat, &labels).unwrap();
        assert!((g.scalar(ll) + 2f64.ln()).abs() < 1e-15);
        assert_eq!(labels.task(), task);

        let scores = Labels::Scores(vec![0.5, -1.0]);
        let exact = g.constant(Tensor::matrix(2, 1, vec![0.5, -1.0]));
        let ll = mean_log_likelihood(&mut g, exact, &scores).unwrap();
        assert_eq!(g.scalar(ll), 0.0);
    }

    #[test]
    fn mc_samples_zero_is_rejected() {
        let enc = encoder(2, 2);
        let head = TaskHead::new("head", 2, TaskKind::Regression);
        let mut p = zero_params(&enc);
        head.init(&mut p, &mut RngStream::new(0));
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let x = g.constant(Tensor::zeros(&[1, 1, 2]));
        let cfg = VibConfig { latent_dim: 2, beta: 1.0, mc_samples: 0 };
        let r = ib_loss(&mut g, &b, &enc, &head, x, &Labels::Scores(vec![0.0]), &cfg, &mut RngStream::new(0));
        assert!(r.is_err());
        assert!(cfg.validate().is_err());
    }
}
