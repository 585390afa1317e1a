//! Minibatch training and evaluation.
//!
//! All randomness comes from `TrainConfig::seed`, split into named streams:
//! `init` for parameters, `order/<epoch>` for the data permutation and
//! `step/<index>` for ε draws, dropout masks and shortcut draws.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::ModalityAggregation;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::intervention::LossBreakdown;
use crate::metrics::{self, MetricsReport};
use crate::model::{Ablation, Architecture, CamibModel, LossSettings};
use crate::nn::Activation;
use crate::numeric::{GradientMap, ParameterSet};
use crate::optim::{self, AdamW, AdamWConfig};
use crate::rng::RngStream;
use crate::task::{Labels, TaskKind};
use crate::vib::ModalityBatch;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_fraction: f64,
    pub dropout_rate: f64,
    /// Latent width `d`.
    pub d: usize,
    pub hidden_dim: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub beta: f64,
    /// Weight of the summed per-modality IB losses in the total objective.
    pub ib_weight: f64,
    pub k_shortcuts: usize,
    pub mc_samples: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub activation: Activation,
    pub aggregation: ModalityAggregation,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-3,
            warmup_fraction: 0.1,
            dropout_rate: 0.5,
            d: 32,
            hidden_dim: 32,
            lambda1: 0.2,
            lambda2: 0.3,
            beta: 1e-4,
            ib_weight: 1e-3,
            k_shortcuts: 1,
            mc_samples: 1,
            weight_decay: 0.01,
            seed: 0,
            activation: Activation::default(),
            aggregation: ModalityAggregation::default(),
            ablation: Ablation::default(),
        }
    }
}

impl TrainConfig {
    /// Full-scale settings used with large pretrained encoders.
    pub fn paper_profile() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            learning_rate: 1e-5,
            dropout_rate: 0.5,
            d: 512,
            hidden_dim: 512,
            lambda1: 0.2,
            lambda2: 0.3,
            beta: 1e-4,
            ..Self::default()
        }
    }

    /// Named profile: `desk` (the default) or `paper`.
    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::default()),
            "paper" => Ok(Self::paper_profile()),
            other => Err(Error::Config(format!("unknown profile {other:?}; expected desk or paper"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if self.d == 0 || self.hidden_dim == 0 || self.mc_samples == 0 || self.k_shortcuts == 0 {
            return bad("d, hidden_dim, mc_samples and k_shortcuts must be positive".into());
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("beta", self.beta),
            ("ib_weight", self.ib_weight),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return bad(format!("warmup_fraction {} outside [0, 1]", self.warmup_fraction));
        }
        Ok(())
    }

    pub fn architecture(&self, batch: &ModalityBatch) -> Architecture {
        Architecture {
            activation: self.activation,
            aggregation: self.aggregation,
            ..Architecture::for_batch(batch, self.d, self.hidden_dim)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub model: CamibModel,
    pub params: ParameterSet,
    pub config: TrainConfig,
    /// Scale of the regression uniformity prior (training label range).
    pub prior_scale: f64,
    /// One entry per optimizer step.
    pub history: Vec<LossBreakdown>,
}

impl TrainedModel {
    pub fn outputs(&self, batch: &ModalityBatch) -> Result<crate::tensor::Tensor> {
        Ok(self.model.infer(&self.params, batch)?.outputs)
    }

    pub fn predict(&self, batch: &ModalityBatch) -> Result<Labels> {
        Ok(crate::model::outputs_to_labels(&self.outputs(batch)?, self.model.arch.task))
    }

    pub fn evaluate(&self, batch: &ModalityBatch) -> Result<MetricsReport> {
        evaluate(self, batch)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

fn label_range(labels: &Labels) -> f64 {
    match labels {
        Labels::Classes { .. } => 1.0,
        Labels::Scores(v) => {
            let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if hi > lo {
                hi - lo
            } else {
                1.0
            }
        }
    }
}

fn diverged(step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { op, node } => Error::Diverged {
            step,
            reason: format!("non-finite value at `{op}` (node {node})"),
        },
        other => other,
    }
}

/// Trains on `data` with everything derived from `config.seed`.
pub fn train(config: &TrainConfig, data: &ModalityBatch) -> Result<TrainedModel> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Argument("training split is empty".into()));
    }
    let model = CamibModel::new(config.architecture(data))?;
    let root = RngStream::new(config.seed);
    let mut params = model.init_params(&root.fork("init"));
    let prior_scale = label_range(data.labels());
    let settings = LossSettings {
        lambda1: config.lambda1,
        lambda2: config.lambda2,
        beta: config.beta,
        ib_weight: config.ib_weight,
        mc_samples: config.mc_samples,
        k_shortcuts: config.k_shortcuts,
        dropout_rate: config.dropout_rate,
        prior_scale,
        ablation: config.ablation,
    };
    let n = data.len();
    let per_epoch = n.div_ceil(config.batch_size);
    let total_steps = per_epoch * config.epochs;
    let warm = optim::warmup_steps(total_steps, config.warmup_fraction);
    let mut opt = AdamW::new(AdamWConfig {
        weight_decay: config.weight_decay,
        ..AdamWConfig::default()
    });
    let mut history = Vec::with_capacity(total_steps);
    let mut step = 0;
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        root.fork_index("order", epoch as u64).shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch = data.select(chunk);
            let mut g = Graph::new();
            let b = params.bind(&mut g);
            let step_rng = root.fork_index("step", step as u64);
            let (total, breakdown) = model
                .training_loss(&mut g, &b, &batch, &settings, &step_rng)
                .map_err(|e| diverged(step, e))?;
            if !breakdown.total.is_finite() {
                return Err(Error::Diverged {
                    step,
                    reason: format!("total loss {}", breakdown.total),
                });
            }
            let grads = g.backward(total).map_err(|e| diverged(step, e))?;
            let gm = GradientMap::from_backward(&params, &b, &grads);
            opt.step(&mut params, &gm, optim::warmup_lr(config.learning_rate, step, warm))?;
            epoch_loss += breakdown.total;
            history.push(breakdown);
            step += 1;
        }
        log::info!(
            "epoch {}/{}: mean loss {:.6}",
            epoch + 1,
            config.epochs,
            epoch_loss / per_epoch as f64
        );
    }
    Ok(TrainedModel {
        model,
        params,
        config: config.clone(),
        prior_scale,
        history,
    })
}

/// Metrics of the causal-path predictions on `batch`.
pub fn evaluate(model: &TrainedModel, batch: &ModalityBatch) -> Result<MetricsReport> {
    if batch.is_empty() {
        return Err(Error::Argument("cannot evaluate an empty split".into()));
    }
    let outputs = model.outputs(batch)?;
    match (model.model.arch.task, batch.labels()) {
        (TaskKind::Classification { classes }, Labels::Classes { values, .. }) => {
            metrics::classification_metrics(&crate::model::argmax_rows(&outputs), values, classes)
        }
        (TaskKind::Regression, Labels::Scores(values)) => metrics::regression_metrics(outputs.data(), values),
        _ => Err(Error::Argument("label kind differs from the model task".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, BiasSpec};

    fn small_data() -> ModalityBatch {
        let spec = BiasSpec {
            n_samples: 40,
            n_eval: 10,
            modalities: 2,
            seq_len: 2,
            input_dim: 6,
            ..BiasSpec::default()
        };
        generate(&spec).unwrap().train.batch
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 16,
            d: 4,
            hidden_dim: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn history_has_one_entry_per_step() {
        let m = train(&quick(), &small_data()).unwrap();
        // 40 samples in batches of 16 → 3 steps per epoch
        assert_eq!(m.history.len(), 6);
        for h in &m.history {
            assert!((h.total - h.recomposed_total()).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_rate_keeps_initial_parameters() {
        let cfg = TrainConfig {
            learning_rate: 0.0,
            dropout_rate: 0.0,
            ..quick()
        };
        let data = small_data();
        let m = train(&cfg, &data).unwrap();
        let init = m.model.init_params(&RngStream::new(cfg.seed).fork("init"));
        assert_eq!(m.params, init);
    }

    #[test]
    fn no_intv_records_zero_weight() {
        let cfg = TrainConfig {
            ablation: Ablation {
                no_intv: true,
                ..Ablation::default()
            },
            ..quick()
        };
        let m = train(&cfg, &small_data()).unwrap();
        assert!(m.history.iter().all(|h| h.lambda2 == 0.0 && h.intv == 0.0));
    }

    #[test]
    fn invalid_configs() {
        assert!(TrainConfig {
            batch_size: 0,
            ..quick()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            dropout_rate: 1.0,
            ..quick()
        }
        .validate()
        .is_err());
        assert!(TrainConfig::profile("nope").is_err());
        assert_eq!(TrainConfig::profile("paper").unwrap().d, 512);
    }
}
