//! Instrumental variable from single-head self-attention over all tokens of
//! all modalities.
//!
//! Tokens are flattened modality-major: token `i = m·L + t` is position `t`
//! of modality `m`. Attention runs per sample over the `M·L` tokens, and the
//! attended rows are folded back per position by summing over modalities,
//! giving an `L×d` instrument per sample.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::graph::{softmax_rows_data, Graph, Var};
use crate::numeric::{Bindings, ParameterSet};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// How attended tokens are folded over the modality axis.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModalityAggregation {
    #[default]
    Sum,
    Mean,
}

/// `Z` stacked as `N×M×L×d`.
#[derive(Clone, Debug, PartialEq)]
pub struct StackedLatents {
    z: Tensor,
}

impl StackedLatents {
    pub fn new(z: Tensor) -> Result<Self> {
        match z.shape() {
            [_, m, l, _] if *m >= 1 && *l >= 1 => {}
            s => return shape_err("StackedLatents", format!("expected N×M×L×d, got {s:?}")),
        }
        if !z.is_finite() {
            return Err(crate::error::Error::Argument("stacked latents must be finite".into()));
        }
        Ok(Self { z })
    }

    /// Stack per-modality `N×L×d` tensors.
    pub fn from_modalities(parts: &[Tensor]) -> Result<Self> {
        let Some(first) = parts.first() else {
            return shape_err("StackedLatents", "no modalities");
        };
        let [n, l, d] = first.shape() else {
            return shape_err("StackedLatents", format!("expected N×L×d, got {:?}", first.shape()));
        };
        let (n, l, d, m) = (*n, *l, *d, parts.len());
        let mut data = Vec::with_capacity(n * m * l * d);
        for s in 0..n {
            for p in parts {
                if p.shape() != first.shape() {
                    return shape_err("StackedLatents", "modalities differ in shape");
                }
                data.extend_from_slice(&p.data()[s * l * d..(s + 1) * l * d]);
            }
        }
        Self::new(Tensor::new(&[n, m, l, d], data)?)
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.z.shape();
        (s[0], s[1], s[2], s[3])
    }

    pub fn tensor(&self) -> &Tensor {
        &self.z
    }

    /// Sample `n` as an `(M·L)×d` matrix in modality-major order.
    pub fn flat_sample(&self, n: usize) -> Tensor {
        let (_, m, l, d) = self.dims();
        let block = m * l * d;
        Tensor::matrix(m * l, d, self.z.data()[n * block..(n + 1) * block].to_vec())
    }
}

/// Query/key/value projections, `d×d` each.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
}

impl AttentionParams {
    pub fn dim(&self) -> usize {
        self.w_q.rows()
    }

    pub fn random(d: usize, rng: &mut RngStream) -> Self {
        let s = (1.0 / d as f64).sqrt();
        Self {
            w_q: rng.normal_tensor(&[d, d]).scale(s),
            w_k: rng.normal_tensor(&[d, d]).scale(s),
            w_v: rng.normal_tensor(&[d, d]).scale(s),
        }
    }

    fn check(&self) -> Result<usize> {
        let d = self.w_q.rows();
        for (name, w) in [("w_q", &self.w_q), ("w_k", &self.w_k), ("w_v", &self.w_v)] {
            if w.shape() != [d, d] {
                return shape_err("AttentionParams", format!("{name} is {:?}, expected [{d}, {d}]", w.shape()));
            }
        }
        Ok(d)
    }
}

/// Intermediate values of one attention pass.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTrace {
    pub scores: Tensor,
    pub weights: Tensor,
    pub attended: Tensor,
    pub values: Tensor,
}

/// `s = (Z W_Q)(Z W_K)ᵀ / √d`.
pub fn attention_scores(g: &mut Graph, z_flat: Var, w_q: Var, w_k: Var) -> Result<Var> {
    let d = g.value(w_q).rows();
    let (zc, kq, kk) = (g.value(z_flat).cols(), g.value(w_q).shape().to_vec(), g.value(w_k).shape().to_vec());
    if zc != d || kq != [d, d] || kk != [d, d] {
        return shape_err(
            "attention_scores",
            format!("tokens of width {zc} with W_Q {kq:?}, W_K {kk:?}"),
        );
    }
    let q = g.matmul(z_flat, w_q);
    let k = g.matmul(z_flat, w_k);
    let s = g.matmul_nt(q, k);
    Ok(g.scale(s, 1.0 / (d as f64).sqrt()))
}

/// `V̂_i = Σ_j α_ij v_j`.
pub fn attended_values(g: &mut Graph, weights: Var, values: Var) -> Var {
    g.matmul(weights, values)
}

/// Fold `(M·L)×d` attended tokens into `L×d` by summing (or averaging) over modalities.
pub fn aggregate_instrument(
    g: &mut Graph,
    v_hat: Var,
    modalities: usize,
    seq_len: usize,
    aggregation: ModalityAggregation,
) -> Result<Var> {
    let rows = g.value(v_hat).rows();
    if modalities == 0 || seq_len == 0 || rows != modalities * seq_len {
        return shape_err(
            "aggregate_instrument",
            format!("{rows} rows cannot fold into M={modalities} × L={seq_len}"),
        );
    }
    let summed = g.sum_row_blocks(v_hat, modalities);
    Ok(match aggregation {
        ModalityAggregation::Sum => summed,
        ModalityAggregation::Mean => g.scale(summed, 1.0 / modalities as f64),
    })
}

/// Attention block with parameters `{prefix}.w_q`, `.w_k`, `.w_v`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstrumentBuilder {
    pub prefix: String,
    pub dim: usize,
    pub aggregation: ModalityAggregation,
}

impl InstrumentBuilder {
    pub fn init(&self, params: &mut ParameterSet, rng: &mut RngStream) {
        let p = AttentionParams::random(self.dim, rng);
        params.insert(format!("{}.w_q", self.prefix), p.w_q);
        params.insert(format!("{}.w_k", self.prefix), p.w_k);
        params.insert(format!("{}.w_v", self.prefix), p.w_v);
    }

    /// Instrument for a batch. `per_modality[m]` is `(N·L)×d` with rows
    /// ordered `n·L + t`; the result has the same layout.
    pub fn instrument(
        &self,
        g: &mut Graph,
        b: &Bindings,
        per_modality: &[Var],
        batch: usize,
        seq_len: usize,
    ) -> Result<Var> {
        let m = per_modality.len();
        for &z in per_modality {
            let v = g.value(z);
            if v.rows() != batch * seq_len || v.cols() != self.dim {
                return shape_err(
                    "instrument",
                    format!("modality latent {:?}, expected ({}·{})×{}", v.shape(), batch, seq_len, self.dim),
                );
            }
        }
        let w_q = b.var(&format!("{}.w_q", self.prefix));
        let w_k = b.var(&format!("{}.w_k", self.prefix));
        let w_v = b.var(&format!("{}.w_v", self.prefix));
        let all = g.concat_rows(per_modality);
        let mut per_sample = Vec::with_capacity(batch);
        for n in 0..batch {
            let idx: Vec<usize> = (0..m)
                .flat_map(|mi| (0..seq_len).map(move |t| mi * batch * seq_len + n * seq_len + t))
                .collect();
            let z_flat = g.gather_rows(all, idx);
            let s = attention_scores(g, z_flat, w_q, w_k)?;
            let alpha = g.softmax_rows(s);
            let values = g.matmul(z_flat, w_v);
            let v_hat = attended_values(g, alpha, values);
            per_sample.push(aggregate_instrument(g, v_hat, m, seq_len, self.aggregation)?);
        }
        Ok(g.concat_rows(&per_sample))
    }
}

/// Forward pass for a single `(M·L)×d` token matrix, returning every intermediate.
pub fn trace(z_flat: &Tensor, params: &AttentionParams) -> Result<AttentionTrace> {
    let d = params.check()?;
    if z_flat.cols() != d {
        return shape_err("trace", format!("tokens of width {}, params of dim {d}", z_flat.cols()));
    }
    let mut g = Graph::new();
    let z = g.constant(z_flat.clone());
    let wq = g.constant(params.w_q.clone());
    let wk = g.constant(params.w_k.clone());
    let s = attention_scores(&mut g, z, wq, wk)?;
    let scores = g.value(s).clone();
    let weights = softmax_rows_data(&scores);
    let values = z_flat.matmul(&params.w_v)?;
    let attended = weights.matmul(&values)?;
    Ok(AttentionTrace {
        scores,
        weights,
        attended,
        values,
    })
}

/// Instrument for every sample of a stack, `N×L×d`.
pub fn instrument(
    z: &StackedLatents,
    params: &AttentionParams,
    aggregation: ModalityAggregation,
) -> Result<Tensor> {
    let (n, m, l, d) = z.dims();
    let mut out = Vec::with_capacity(n * l * d);
    for s in 0..n {
        let tr = trace(&z.flat_sample(s), params)?;
        let mut g = Graph::new();
        let vh = g.constant(tr.attended);
        let v = aggregate_instrument(&mut g, vh, m, l, aggregation)?;
        out.extend_from_slice(g.value(v).data());
    }
    Tensor::new(&[n, l, d], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_projections_give_zero_scores() {
        let d = 3;
        let p = AttentionParams {
            w_q: Tensor::zeros(&[d, d]),
            w_k: Tensor::zeros(&[d, d]),
            w_v: Tensor::eye(d),
        };
        let z = RngStream::new(0).normal_tensor(&[4, d]);
        let tr = trace(&z, &p).unwrap();
        assert_eq!(tr.scores.max_abs(), 0.0);
        // uniform weights: every attended row is the mean value
        for i in 0..4 {
            for j in 0..d {
                let mean: f64 = (0..4).map(|r| z.at(r, j)).sum::<f64>() / 4.0;
                assert!((tr.attended.at(i, j) - mean).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn orthonormal_tokens_identity_projections() {
        let p = AttentionParams {
            w_q: Tensor::eye(2),
            w_k: Tensor::eye(2),
            w_v: Tensor::eye(2),
        };
        let tr = trace(&Tensor::eye(2), &p).unwrap();
        let r = 1.0 / 2f64.sqrt();
        assert!(tr.scores.max_abs_diff(&Tensor::eye(2).scale(r)) < 1e-15);
    }

    #[test]
    fn single_token_attends_to_itself() {
        let p = AttentionParams::random(3, &mut RngStream::new(4));
        let z = RngStream::new(5).normal_tensor(&[1, 3]);
        let tr = trace(&z, &p).unwrap();
        assert_eq!(tr.weights.data(), &[1.0]);
        assert!(tr.attended.max_abs_diff(&tr.values) < 1e-15);
    }

    #[test]
    fn aggregate_sums_over_modalities() {
        let mut g = Graph::new();
        let v = g.constant(Tensor::ones(&[6, 2]));
        let agg = aggregate_instrument(&mut g, v, 2, 3, ModalityAggregation::Sum).unwrap();
        assert_eq!(g.value(agg), &Tensor::full(&[3, 2], 2.0));
        let mean = aggregate_instrument(&mut g, v, 2, 3, ModalityAggregation::Mean).unwrap();
        assert_eq!(g.value(mean), &Tensor::ones(&[3, 2]));
        assert!(aggregate_instrument(&mut g, v, 4, 2, ModalityAggregation::Sum).is_err());
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let p = AttentionParams::random(3, &mut RngStream::new(1));
        assert!(trace(&Tensor::zeros(&[2, 4]), &p).is_err());
    }

    #[test]
    fn one_token_one_modality_identity_value() {
        let p = AttentionParams {
            w_q: Tensor::eye(2),
            w_k: Tensor::eye(2),
            w_v: Tensor::eye(2),
        };
        let z = Tensor::new(&[1, 1, 1, 2], vec![0.3, -0.8]).unwrap();
        let v = instrument(&StackedLatents::new(z.clone()).unwrap(), &p, ModalityAggregation::Sum).unwrap();
        assert_eq!(v.data(), z.data());
    }
}
