//! Small layer helpers shared by the encoders, fusion, mask generator and heads.

use serde::{Deserialize, Serialize};

use crate::graph::{Graph, Var};
use crate::numeric::{Bindings, ParameterSet};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Tanh => g.tanh(x),
            Activation::Relu => g.relu(x),
        }
    }
}

/// Registers `{prefix}.w` (`fan_in×fan_out`, scaled normal) and a zero `{prefix}.b`.
pub fn init_linear(params: &mut ParameterSet, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut RngStream) {
    let scale = (1.0 / fan_in.max(1) as f64).sqrt();
    let w = rng.normal_tensor(&[fan_in, fan_out]).scale(scale);
    params.insert(format!("{prefix}.w"), w);
    params.insert(format!("{prefix}.b"), Tensor::zeros(&[fan_out]));
}

/// `x · W + b` over the rows of `x`.
pub fn linear(g: &mut Graph, b: &Bindings, prefix: &str, x: Var) -> Var {
    let w = b.var(&format!("{prefix}.w"));
    let bias = b.var(&format!("{prefix}.b"));
    let xw = g.matmul(x, w);
    g.add_row(xw, bias)
}

/// Mean over sequence positions: `(N·L)×d → N×d`.
pub fn mean_pool(g: &mut Graph, z: Var, seq_len: usize) -> Var {
    g.mean_row_groups(z, seq_len)
}

/// Inverted dropout: zero each element with probability `rate`, scale
/// survivors by `1/(1−rate)`.
pub fn dropout(g: &mut Graph, x: Var, rate: f64, rng: &mut RngStream) -> Var {
    if rate <= 0.0 {
        return x;
    }
    let keep = 1.0 - rate;
    let shape = g.value(x).shape().to_vec();
    let n = g.value(x).len();
    let mask: Vec<f64> = (0..n)
        .map(|_| if rng.bernoulli(keep) { 1.0 / keep } else { 0.0 })
        .collect();
    let m = g.constant(Tensor::new(&shape, mask).expect("mask shape"));
    g.mul(x, m)
}
