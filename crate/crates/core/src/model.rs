//! The assembled model: per-modality IB encoders, the attention instrument,
//! fusion, the complementary mask and the shared task head.

use serde::{Deserialize, Serialize};

use crate::attention::{InstrumentBuilder, ModalityAggregation};
use crate::disentangle::{self, Fusion, MaskGenerator, UniformityPenalty};
use crate::error::{arg_err, Result};
use crate::graph::{Graph, Var};
use crate::intervention::{self, LossBreakdown, LossVars};
use crate::nn::{self, Activation};
use crate::numeric::{Bindings, ParameterSet};
use crate::rng::RngStream;
use crate::task::{Labels, TaskHead, TaskKind};
use crate::tensor::Tensor;
use crate::vib::{self, ModalityBatch, ModalityEncoder, VibConfig};

/// Shape of the network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub input_dims: Vec<usize>,
    pub seq_len: usize,
    /// Latent width `d` shared by every stage.
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub task: TaskKind,
    pub activation: Activation,
    pub aggregation: ModalityAggregation,
}

impl Architecture {
    pub fn modalities(&self) -> usize {
        self.input_dims.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dims.is_empty() || self.input_dims.contains(&0) {
            return arg_err("every modality needs a positive input width");
        }
        if self.seq_len == 0 || self.latent_dim == 0 || self.hidden_dim == 0 {
            return arg_err("seq_len, latent_dim and hidden_dim must be positive");
        }
        Ok(())
    }

    /// Architecture matching a batch's modality widths and sequence length.
    pub fn for_batch(batch: &ModalityBatch, latent_dim: usize, hidden_dim: usize) -> Self {
        Self {
            input_dims: (0..batch.modalities()).map(|m| batch.input_dim(m)).collect(),
            seq_len: batch.seq_len(),
            latent_dim,
            hidden_dim,
            task: batch.labels().task(),
            activation: Activation::default(),
            aggregation: ModalityAggregation::default(),
        }
    }
}

/// Which loss terms are switched off.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub no_iv: bool,
    pub no_unif: bool,
    pub kl_to_mse: bool,
    pub no_intv: bool,
    pub no_ib: bool,
}

/// Loss weights and per-step options.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSettings {
    pub lambda1: f64,
    pub lambda2: f64,
    pub beta: f64,
    pub ib_weight: f64,
    pub mc_samples: usize,
    pub k_shortcuts: usize,
    pub dropout_rate: f64,
    /// Prior scale of the regression uniformity term.
    pub prior_scale: f64,
    pub ablation: Ablation,
}

/// Intermediates of the inference path for a batch, all `N×L×d` except `outputs`.
#[derive(Clone, Debug, PartialEq)]
pub struct InferenceTrace {
    pub z_m: Tensor,
    pub m_c: Tensor,
    pub z_c: Tensor,
    pub z_s: Tensor,
    /// Head outputs from pooled `z_c`: `N×K` logits or `N×1` scores.
    pub outputs: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CamibModel {
    pub arch: Architecture,
    encoders: Vec<ModalityEncoder>,
    ib_heads: Vec<TaskHead>,
    instrument: InstrumentBuilder,
    fusion: Fusion,
    mask: MaskGenerator,
    head: TaskHead,
}

impl CamibModel {
    pub fn new(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let d = arch.latent_dim;
        let encoders = arch
            .input_dims
            .iter()
            .enumerate()
            .map(|(m, &input_dim)| ModalityEncoder {
                prefix: format!("enc{m}"),
                input_dim,
                hidden_dim: arch.hidden_dim,
                latent_dim: d,
                activation: arch.activation,
            })
            .collect();
        let ib_heads = (0..arch.modalities())
            .map(|m| TaskHead::new(format!("ib_head{m}"), d, arch.task))
            .collect();
        Ok(Self {
            instrument: InstrumentBuilder {
                prefix: "attn".into(),
                dim: d,
                aggregation: arch.aggregation,
            },
            fusion: Fusion {
                prefix: "fusion".into(),
                modalities: arch.modalities(),
                dim: d,
                activation: arch.activation,
            },
            mask: MaskGenerator {
                prefix: "mask".into(),
                dim: d,
                hidden_dim: arch.hidden_dim,
                activation: arch.activation,
            },
            head: TaskHead::new("head", d, arch.task),
            encoders,
            ib_heads,
            arch,
        })
    }

    pub fn head(&self) -> &TaskHead {
        &self.head
    }

    /// Fresh parameters; every component draws from its own fork of `rng`.
    pub fn init_params(&self, rng: &RngStream) -> ParameterSet {
        let mut p = ParameterSet::new();
        for (m, (enc, head)) in self.encoders.iter().zip(&self.ib_heads).enumerate() {
            enc.init(&mut p, &mut rng.fork_index("encoder", m as u64));
            head.init(&mut p, &mut rng.fork_index("ib_head", m as u64));
        }
        self.instrument.init(&mut p, &mut rng.fork("attention"));
        self.fusion.init(&mut p, &mut rng.fork("fusion"));
        self.mask.init(&mut p, &mut rng.fork("mask"));
        self.head.init(&mut p, &mut rng.fork("head"));
        p
    }

    fn check_batch(&self, batch: &ModalityBatch) -> Result<()> {
        let dims: Vec<usize> = (0..batch.modalities()).map(|m| batch.input_dim(m)).collect();
        if dims != self.arch.input_dims || batch.seq_len() != self.arch.seq_len {
            return arg_err(format!(
                "batch has widths {dims:?} and length {}, model expects {:?} and {}",
                batch.seq_len(),
                self.arch.input_dims,
                self.arch.seq_len
            ));
        }
        if batch.is_empty() {
            return arg_err("empty batch");
        }
        batch.labels().check_task(self.arch.task)
    }

    /// Records the training objective for one minibatch and returns the total
    /// plus its breakdown. `rng` supplies ε, dropout masks and the shortcut draw.
    pub fn training_loss(
        &self,
        g: &mut Graph,
        b: &Bindings,
        batch: &ModalityBatch,
        settings: &LossSettings,
        rng: &RngStream,
    ) -> Result<(Var, LossBreakdown)> {
        self.check_batch(batch)?;
        let n = batch.len();
        let l = self.arch.seq_len;
        let labels = batch.labels();
        let ab = settings.ablation;
        let vib_cfg = VibConfig {
            latent_dim: self.arch.latent_dim,
            beta: settings.beta,
            mc_samples: settings.mc_samples,
        };

        let mut latents = Vec::with_capacity(self.encoders.len());
        let mut ib_terms = Vec::new();
        for (m, (enc, ib_head)) in self.encoders.iter().zip(&self.ib_heads).enumerate() {
            let x = g.constant(batch.inputs()[m].clone());
            if ab.no_ib {
                latents.push(enc.encode(g, b, x)?.mu);
            } else {
                let mut eps = rng.fork_index("eps", m as u64);
                let t = vib::ib_loss(g, b, enc, ib_head, x, labels, &vib_cfg, &mut eps)?;
                latents.push(t.z);
                ib_terms.push(t.loss);
            }
        }

        let z_m = self.fusion.fuse(g, b, &latents)?;
        let m_c = self.mask.mask_probabilities(g, b, z_m);
        let parts = disentangle::split(g, z_m, m_c)?;

        let mut dropout_rng = rng.fork("dropout");
        let rate = settings.dropout_rate;
        let caus = disentangle::causal_task_loss(g, b, &self.head, parts.z_c, labels, l, Some((rate, &mut dropout_rng)))?;

        let iv_align = if ab.no_iv {
            None
        } else {
            let v = self.instrument.instrument(g, b, &latents, n, l)?;
            Some(disentangle::iv_alignment_loss(g, parts.z_c, v)?)
        };

        let unif = if ab.no_unif {
            None
        } else {
            let penalty = if ab.kl_to_mse {
                UniformityPenalty::Mse
            } else {
                UniformityPenalty::Kl
            };
            Some(disentangle::uniformity_loss(
                g,
                b,
                &self.head,
                parts.z_s,
                l,
                settings.prior_scale,
                penalty,
                Some((rate, &mut dropout_rng)),
            )?)
        };

        let lambda2 = if ab.no_intv { 0.0 } else { settings.lambda2 };
        let intv = if lambda2 > 0.0 && n >= 2 {
            let k = settings.k_shortcuts.min(n - 1);
            let draw = intervention::sample_shortcut_set(n, k, &mut rng.fork("shortcut"))?;
            Some(intervention::intervention_loss(
                g,
                b,
                &self.head,
                parts.z_c,
                parts.z_s,
                &draw,
                labels,
                l,
                Some((rate, &mut dropout_rng)),
            )?)
        } else {
            if lambda2 > 0.0 {
                log::warn!("batch of {n} sample(s): shortcut recombination skipped");
            }
            None
        };

        let ib = ib_terms.split_first().map(|(first, rest)| rest.iter().fold(*first, |acc, &t| g.add(acc, t)));
        intervention::total_loss_graph(
            g,
            LossVars {
                ib,
                caus: Some(caus),
                iv_align,
                unif,
                intv,
            },
            intervention::LossWeights {
                lambda1: settings.lambda1,
                lambda2,
                beta: settings.beta,
                ib_weight: settings.ib_weight,
            },
        )
    }

    /// Deterministic inference: posterior means, no dropout, head on `z_c` only.
    pub fn infer(&self, params: &ParameterSet, batch: &ModalityBatch) -> Result<InferenceTrace> {
        self.check_batch(batch)?;
        let (n, l, d) = (batch.len(), self.arch.seq_len, self.arch.latent_dim);
        let mut g = Graph::new();
        let b = params.bind(&mut g);
        let mut latents = Vec::with_capacity(self.encoders.len());
        for (m, enc) in self.encoders.iter().enumerate() {
            let x = g.constant(batch.inputs()[m].clone());
            latents.push(enc.encode(&mut g, &b, x)?.mu);
        }
        let z_m = self.fusion.fuse(&mut g, &b, &latents)?;
        let m_c = self.mask.mask_probabilities(&mut g, &b, z_m);
        let parts = disentangle::split(&mut g, z_m, m_c)?;
        let pooled = nn::mean_pool(&mut g, parts.z_c, l);
        let out = self.head.forward(&mut g, &b, pooled, None);
        let shape = [n, l, d];
        Ok(InferenceTrace {
            z_m: g.value(z_m).reshape(&shape)?,
            m_c: g.value(m_c).reshape(&shape)?,
            z_c: g.value(parts.z_c).reshape(&shape)?,
            z_s: g.value(parts.z_s).reshape(&shape)?,
            outputs: g.value(out).clone(),
        })
    }

    /// Head outputs for an arbitrary `N×L×d` causal representation.
    pub fn head_outputs(&self, params: &ParameterSet, z_c: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = params.bind(&mut g);
        let z = g.constant(z_c.clone());
        let pooled = nn::mean_pool(&mut g, z, self.arch.seq_len);
        let out = self.head.forward(&mut g, &b, pooled, None);
        Ok(g.value(out).clone())
    }
}

/// Class index of the largest logit per row (first on ties).
pub fn argmax_rows(outputs: &Tensor) -> Vec<usize> {
    (0..outputs.rows())
        .map(|i| {
            let row = outputs.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Predicted labels from head outputs.
pub fn outputs_to_labels(outputs: &Tensor, task: TaskKind) -> Labels {
    match task {
        TaskKind::Classification { classes } => Labels::Classes {
            classes,
            values: argmax_rows(outputs),
        },
        TaskKind::Regression => Labels::Scores(outputs.data().to_vec()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_batch(n: usize) -> ModalityBatch {
        let mut r = RngStream::new(3);
        let inputs = vec![r.normal_tensor(&[n, 2, 3]), r.normal_tensor(&[n, 2, 5])];
        let labels = Labels::Classes {
            classes: 2,
            values: (0..n).map(|i| i % 2).collect(),
        };
        ModalityBatch::new(inputs, labels).unwrap()
    }

    fn settings() -> LossSettings {
        LossSettings {
            lambda1: 0.2,
            lambda2: 0.3,
            beta: 1e-4,
            ib_weight: 1.0,
            mc_samples: 1,
            k_shortcuts: 1,
            dropout_rate: 0.0,
            prior_scale: 1.0,
            ablation: Ablation::default(),
        }
    }

    #[test]
    fn breakdown_recomposes() {
        let batch = tiny_batch(4);
        let model = CamibModel::new(Architecture::for_batch(&batch, 4, 6)).unwrap();
        let params = model.init_params(&RngStream::new(1));
        let mut g = Graph::new();
        let b = params.bind(&mut g);
        let (total, br) = model
            .training_loss(&mut g, &b, &batch, &settings(), &RngStream::new(2))
            .unwrap();
        assert!((g.scalar(total) - br.recomposed_total()).abs() < 1e-12);
        assert!(br.ib > 0.0 && br.iv_align > 0.0 && br.intv > 0.0);
    }

    #[test]
    fn inference_ignores_the_shortcut_part() {
        let batch = tiny_batch(5);
        let model = CamibModel::new(Architecture::for_batch(&batch, 4, 6)).unwrap();
        let params = model.init_params(&RngStream::new(1));
        let tr = model.infer(&params, &batch).unwrap();
        assert_eq!(model.head_outputs(&params, &tr.z_c).unwrap(), tr.outputs);
        let rebuilt = tr.z_c.add(&tr.z_s).unwrap();
        assert!(rebuilt.max_abs_diff(&tr.z_m) < 1e-15);
    }

    #[test]
    fn single_sample_batch_skips_intervention() {
        let batch = tiny_batch(1);
        let model = CamibModel::new(Architecture::for_batch(&batch, 4, 6)).unwrap();
        let params = model.init_params(&RngStream::new(1));
        let mut g = Graph::new();
        let b = params.bind(&mut g);
        let (_, br) = model
            .training_loss(&mut g, &b, &batch, &settings(), &RngStream::new(2))
            .unwrap();
        assert_eq!(br.intv, 0.0);
    }
}
