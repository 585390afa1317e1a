//! Parameter sets, gradient maps and the two gradient routes used everywhere:
//! reverse mode through a [`Graph`] and central finite differences.
//!
//! An objective is a closure that records a scalar on a fresh graph given the
//! parameters bound as leaves. Both routes evaluate the *same* closure, so a
//! disagreement points at the tape, never at two diverging model definitions.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::graph::{softmax_rows_data, Graph, Var};
use crate::tensor::Tensor;

/// Named parameters, iterated in lexicographic name order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn with(mut self, name: impl Into<String>, t: Tensor) -> Self {
        self.insert(name, t);
        self
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Record every parameter as a leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> Bindings {
        Bindings {
            vars: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), g.leaf(t.clone())))
                .collect(),
        }
    }
}

/// Parameter name → graph leaf.
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    /// Leaf bound to `name`. Panics on an unknown name, which is always a
    /// wiring bug in model code.
    pub fn var(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("parameter `{name}` is not bound"),
        }
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Per-parameter partial derivatives, shaped like the parameters.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GradientMap {
    grads: BTreeMap<String, Tensor>,
}

impl GradientMap {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Collect the adjoints of every bound parameter after a backward pass.
    pub fn from_backward(
        params: &ParameterSet,
        bindings: &Bindings,
        grads: &crate::graph::Gradients,
    ) -> Self {
        Self {
            grads: params
                .iter()
                .map(|(k, t)| (k.clone(), grads.get_or_zeros(bindings.var(k), t)))
                .collect(),
        }
    }

    /// Largest absolute elementwise difference over all parameters.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.grads
            .iter()
            .map(|(k, a)| other.get(k).map_or(f64::INFINITY, |b| a.max_abs_diff(b)))
            .fold(0.0, f64::max)
    }

    /// `max |a − b| / max(|a|∞, |b|∞)`, zero when both maps are zero.
    pub fn max_rel_diff(&self, other: &Self) -> f64 {
        let scale = self
            .grads
            .values()
            .chain(other.grads.values())
            .map(Tensor::max_abs)
            .fold(0.0, f64::max);
        let diff = self.max_abs_diff(other);
        if diff == 0.0 {
            0.0
        } else {
            diff / scale
        }
    }
}

/// Value of a scalar objective at `params`.
pub fn evaluate<F>(objective: &F, params: &ParameterSet) -> Result<f64>
where
    F: Fn(&mut Graph, &Bindings) -> Result<Var>,
{
    let mut g = Graph::new();
    let b = params.bind(&mut g);
    let out = objective(&mut g, &b)?;
    g.check_finite()?;
    if g.value(out).len() != 1 {
        return arg_err(format!(
            "objective must be scalar, got shape {:?}",
            g.value(out).shape()
        ));
    }
    Ok(g.scalar(out))
}

/// Exact reverse-mode partials of a scalar objective.
pub fn grad<F>(objective: &F, params: &ParameterSet) -> Result<GradientMap>
where
    F: Fn(&mut Graph, &Bindings) -> Result<Var>,
{
    let mut g = Graph::new();
    let b = params.bind(&mut g);
    let out = objective(&mut g, &b)?;
    if g.value(out).len() != 1 {
        return arg_err(format!(
            "objective must be scalar, got shape {:?}",
            g.value(out).shape()
        ));
    }
    let adj = g.backward(out)?;
    Ok(GradientMap::from_backward(params, &b, &adj))
}

/// Central differences `(f(p+h) − f(p−h)) / 2h`, one coordinate at a time.
pub fn finite_diff_grad<F>(objective: &F, params: &ParameterSet, step: f64) -> Result<GradientMap>
where
    F: Fn(&mut Graph, &Bindings) -> Result<Var>,
{
    if !(step > 0.0) {
        return arg_err(format!("finite-difference step must be positive, got {step}"));
    }
    let mut work = params.clone();
    let mut grads = BTreeMap::new();
    for (name, t) in params.iter() {
        let mut out = vec![0.0; t.len()];
        for (i, slot) in out.iter_mut().enumerate() {
            let base = t.data()[i];
            work.get_mut(name).unwrap().data_mut()[i] = base + step;
            let plus = evaluate(objective, &work)?;
            work.get_mut(name).unwrap().data_mut()[i] = base - step;
            let minus = evaluate(objective, &work)?;
            work.get_mut(name).unwrap().data_mut()[i] = base;
            *slot = (plus - minus) / (2.0 * step);
        }
        grads.insert(name.clone(), Tensor::new(t.shape(), out)?);
    }
    Ok(GradientMap { grads })
}

/// Numerically stable row softmax. Rows are shifted by their maximum before
/// exponentiation, which leaves the result unchanged mathematically.
pub fn softmax_rows(scores: &Tensor) -> Result<Tensor> {
    if !scores.is_finite() {
        return Err(Error::Argument("softmax_rows: non-finite score".into()));
    }
    Ok(softmax_rows_data(scores))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square_objective(g: &mut Graph, b: &Bindings) -> Result<Var> {
        let x = b.var("x");
        let sq = g.square(x);
        Ok(g.sum(sq))
    }

    #[test]
    fn grad_of_square() {
        let p = ParameterSet::new().with("x", Tensor::scalar(3.0));
        let gm = grad(&square_objective, &p).unwrap();
        assert_eq!(gm.get("x").unwrap().item(), 6.0);
    }

    #[test]
    fn fd_of_square() {
        let p = ParameterSet::new().with("x", Tensor::scalar(3.0));
        let gm = finite_diff_grad(&square_objective, &p, 1e-4).unwrap();
        assert!((gm.get("x").unwrap().item() - 6.0).abs() < 1e-7);
    }

    #[test]
    fn fd_of_constant_is_zero() {
        let p = ParameterSet::new().with("x", Tensor::vector(vec![1.0, -2.0]));
        let f = |g: &mut Graph, _b: &Bindings| Ok(g.constant(Tensor::scalar(4.2)));
        let gm = finite_diff_grad(&f, &p, 1e-3).unwrap();
        assert_eq!(gm.get("x").unwrap().max_abs(), 0.0);
    }

    #[test]
    fn fd_rejects_non_positive_step() {
        let p = ParameterSet::new().with("x", Tensor::scalar(1.0));
        assert!(matches!(
            finite_diff_grad(&square_objective, &p, 0.0),
            Err(Error::Argument(_))
        ));
        assert!(finite_diff_grad(&square_objective, &p, -1e-3).is_err());
    }

    #[test]
    fn sum_of_softmax_has_zero_gradient() {
        let p = ParameterSet::new().with("x", Tensor::matrix(1, 4, vec![0.3, -1.2, 2.0, 0.0]));
        let f = |g: &mut Graph, b: &Bindings| {
            let s = g.softmax_rows(b.var("x"));
            Ok(g.sum(s))
        };
        let gm = grad(&f, &p).unwrap();
        assert!(gm.get("x").unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn non_finite_names_the_node() {
        let p = ParameterSet::new().with("x", Tensor::scalar(-1.0));
        let f = |g: &mut Graph, b: &Bindings| {
            let l = g.ln(b.var("x"));
            Ok(g.sum(l))
        };
        match grad(&f, &p) {
            Err(Error::NonFinite { op, .. }) => assert_eq!(op, "ln"),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn softmax_small_rows() {
        let s = softmax_rows(&Tensor::matrix(2, 2, vec![1.0, 1.0, 0.0, 3f64.ln()])).unwrap();
        assert!((s.at(0, 0) - 0.5).abs() < 1e-15);
        assert!((s.at(1, 0) - 0.25).abs() < 1e-15);
        assert!((s.at(1, 1) - 0.75).abs() < 1e-15);
        assert!(softmax_rows(&Tensor::matrix(1, 2, vec![f64::NAN, 0.0])).is_err());
    }
}
