//! Task kinds, label containers and the linear prediction head.

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};
use crate::graph::{Graph, Var};
use crate::nn;
use crate::numeric::{Bindings, ParameterSet};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskKind {
    Classification { classes: usize },
    Regression,
}

impl TaskKind {
    /// Width of the head output: class logits or a single score.
    pub fn output_dim(self) -> usize {
        match self {
            TaskKind::Classification { classes } => classes,
            TaskKind::Regression => 1,
        }
    }

    pub fn is_classification(self) -> bool {
        matches!(self, TaskKind::Classification { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Labels {
    Classes { classes: usize, values: Vec<usize> },
    Scores(Vec<f64>),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Classes { values, .. } => values.len(),
            Labels::Scores(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn task(&self) -> TaskKind {
        match self {
            Labels::Classes { classes, .. } => TaskKind::Classification { classes: *classes },
            Labels::Scores(_) => TaskKind::Regression,
        }
    }

    pub fn check_task(&self, task: TaskKind) -> Result<()> {
        if self.task() != task {
            return arg_err(format!(
                "labels are {:?} but the head expects {:?}",
                self.task(),
                task
            ));
        }
        Ok(())
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        match self {
            Labels::Classes { classes, values } => Labels::Classes {
                classes: *classes,
                values: idx.iter().map(|&i| values[i]).collect(),
            },
            Labels::Scores(v) => Labels::Scores(idx.iter().map(|&i| v[i]).collect()),
        }
    }

    /// Concatenate the labels of `other` after `self`.
    pub fn extend(&mut self, other: &Self) -> Result<()> {
        match (self, other) {
            (Labels::Classes { classes, values }, Labels::Classes { classes: c2, values: v2 })
                if *classes == *c2 =>
            {
                values.extend_from_slice(v2);
                Ok(())
            }
            (Labels::Scores(a), Labels::Scores(b)) => {
                a.extend_from_slice(b);
                Ok(())
            }
            _ => arg_err("cannot concatenate labels of different tasks"),
        }
    }

    /// `N×K` one-hot matrix for classification, `N×1` column for regression.
    pub fn target_matrix(&self) -> Tensor {
        match self {
            Labels::Classes { classes, values } => {
                let mut t = Tensor::zeros(&[values.len(), *classes]);
                for (i, &c) in values.iter().enumerate() {
                    t.set(i, c, 1.0);
                }
                t
            }
            Labels::Scores(v) => Tensor::matrix(v.len(), 1, v.clone()),
        }
    }

    /// Labels as real numbers (class index for classification).
    pub fn as_f64(&self) -> Vec<f64> {
        match self {
            Labels::Classes { values, .. } => values.iter().map(|&c| c as f64).collect(),
            Labels::Scores(v) => v.clone(),
        }
    }
}

/// Pooled representation → class logits or a regression score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskHead {
    pub prefix: String,
    pub input_dim: usize,
    pub task: TaskKind,
}

impl TaskHead {
    pub fn new(prefix: impl Into<String>, input_dim: usize, task: TaskKind) -> Self {
        Self {
            prefix: prefix.into(),
            input_dim,
            task,
        }
    }

    pub fn init(&self, params: &mut ParameterSet, rng: &mut RngStream) {
        nn::init_linear(params, &self.prefix, self.input_dim, self.task.output_dim(), rng);
    }

    /// Raw outputs (`N×K` logits or `N×1` scores). Dropout, when given, is
    /// applied to the head input.
    pub fn forward(
        &self,
        g: &mut Graph,
        b: &Bindings,
        pooled: Var,
        dropout: Option<(f64, &mut RngStream)>,
    ) -> Var {
        let x = match dropout {
            Some((rate, rng)) => nn::dropout(g, pooled, rate, rng),
            None => pooled,
        };
        nn::linear(g, b, &self.prefix, x)
    }
}

/// Mean log-likelihood of the labels under head outputs: categorical
/// log-probability, or `−½(ŷ−y)²` for regression (constants dropped).
pub fn mean_log_likelihood(g: &mut Graph, outputs: Var, labels: &Labels) -> Result<Var> {
    let n = labels.len();
    let out = g.value(outputs);
    if out.rows() != n || out.cols() != labels.task().output_dim() {
        return crate::error::shape_err(
            "mean_log_likelihood",
            format!("outputs {:?} for {} labels of {:?}", out.shape(), n, labels.task()),
        );
    }
    let target = g.constant(labels.target_matrix());
    match labels {
        Labels::Classes { .. } => {
            let logp = g.log_softmax_rows(outputs);
            let picked = g.mul(logp, target);
            let total = g.sum(picked);
            Ok(g.scale(total, 1.0 / n as f64))
        }
        Labels::Scores(_) => {
            let diff = g.sub(outputs, target);
            let sq = g.square(diff);
            let total = g.sum(sq);
            Ok(g.scale(total, -0.5 / n as f64))
        }
    }
}
