//! Closed-form attention and regulariser derivatives, each checked against
//! reverse-mode gradients *and* central finite differences of the same forward
//! computation.
//!
//! Errors are normwise: for one instance, `max |analytic − numeric|` divided
//! by the larger sup-norm of the two (zero when both vanish). Algebraic
//! identities use `max(1, |lhs|, |rhs|)` as the scale.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::attention::AttentionParams;
use crate::error::{arg_err, Result};
use crate::graph::{softmax_rows_data, Graph, Var};
use crate::numeric::{finite_diff_grad, grad, Bindings, ParameterSet};
use crate::par;
use crate::rng::RngStream;
use crate::tensor::Tensor;

const NORMALIZATION_TOL: f64 = 1e-10;

/// `J[m][j] = ∂α_m/∂s_j = α_m(δ_mj − α_j)`.
pub fn softmax_jacobian(alpha: &[f64]) -> Result<Tensor> {
    check_distribution(alpha)?;
    let n = alpha.len();
    let mut j = Tensor::zeros(&[n, n]);
    for m in 0..n {
        for c in 0..n {
            let delta = if m == c { 1.0 } else { 0.0 };
            j.set(m, c, alpha[m] * (delta - alpha[c]));
        }
    }
    Ok(j)
}

fn check_distribution(p: &[f64]) -> Result<()> {
    let total: f64 = p.iter().sum();
    if p.is_empty() || p.iter().any(|&x| !(x >= 0.0)) || (total - 1.0).abs() > NORMALIZATION_TOL {
        return arg_err(format!("expected a probability vector, sum is {total}"));
    }
    Ok(())
}

fn check_attended(alpha: &[f64], values: &Tensor, v_hat: &[f64]) -> Result<()> {
    check_distribution(alpha)?;
    if values.rows() != alpha.len() || values.cols() != v_hat.len() {
        return arg_err(format!(
            "values {:?} do not match {} weights and width {}",
            values.shape(),
            alpha.len(),
            v_hat.len()
        ));
    }
    for (c, &vh) in v_hat.iter().enumerate() {
        let mix: f64 = alpha.iter().enumerate().map(|(j, a)| a * values.at(j, c)).sum();
        if (mix - vh).abs() > NORMALIZATION_TOL {
            return arg_err(format!("v_hat[{c}] = {vh} but Σ α_j v_j = {mix}"));
        }
    }
    Ok(())
}

/// Row `j` is `∂V̂/∂s_j = α_j (v_j − V̂)`.
pub fn dvhat_ds(alpha: &[f64], values: &Tensor, v_hat: &[f64]) -> Result<Tensor> {
    dvhat_ds_impl(alpha, values, v_hat, Mutation::None)
}

fn dvhat_ds_impl(alpha: &[f64], values: &Tensor, v_hat: &[f64], mutation: Mutation) -> Result<Tensor> {
    check_attended(alpha, values, v_hat)?;
    let sign = if mutation == Mutation::FlipDvhatDs { -1.0 } else { 1.0 };
    let d = v_hat.len();
    let mut out = Tensor::zeros(&[alpha.len(), d]);
    for (j, &a) in alpha.iter().enumerate() {
        for (c, &vh) in v_hat.iter().enumerate() {
            out.set(j, c, sign * a * (values.at(j, c) - vh));
        }
    }
    Ok(out)
}

/// `∂L/∂s_j = α_j ⟨∂L/∂V̂, v_j − V̂⟩`.
pub fn dl_ds(upstream: &[f64], alpha: &[f64], values: &Tensor, v_hat: &[f64]) -> Result<Vec<f64>> {
    check_attended(alpha, values, v_hat)?;
    if upstream.len() != v_hat.len() {
        return arg_err("upstream gradient width differs from V̂");
    }
    Ok(alpha
        .iter()
        .enumerate()
        .map(|(j, a)| {
            a * upstream
                .iter()
                .enumerate()
                .map(|(c, u)| u * (values.at(j, c) - v_hat[c]))
                .sum::<f64>()
        })
        .collect())
}

/// `∂s_ij/∂W_Q`, `∂s_ij/∂W_K`, `∂s_ij/∂W_V` for one token pair.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreWeightGrads {
    pub d_wq: Tensor,
    pub d_wk: Tensor,
    pub d_wv: Tensor,
}

fn outer(a: &[f64], b: &[f64], scale: f64) -> Tensor {
    let mut t = Tensor::zeros(&[a.len(), b.len()]);
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            t.set(i, j, x * y * scale);
        }
    }
    t
}

/// `z_i k_jᵀ/√d`, `z_j q_iᵀ/√d` and the zero matrix.
pub fn score_weight_gradients(z_i: &[f64], z_j: &[f64], params: &AttentionParams) -> Result<ScoreWeightGrads> {
    let d = params.dim();
    if z_i.len() != d || z_j.len() != d {
        return arg_err(format!("token width must be {d}"));
    }
    let q_i = Tensor::matrix(1, d, z_i.to_vec()).matmul(&params.w_q)?;
    let k_j = Tensor::matrix(1, d, z_j.to_vec()).matmul(&params.w_k)?;
    let r = 1.0 / (d as f64).sqrt();
    Ok(ScoreWeightGrads {
        d_wq: outer(z_i, k_j.data(), r),
        d_wk: outer(z_j, q_i.data(), r),
        d_wv: Tensor::zeros(&[d, d]),
    })
}

/// Both sides of `KL(p ‖ uniform(K)) = ln K − H(p)`, with `0·log 0 = 0`.
pub fn kl_uniform_identity(p: &[f64], k: usize) -> Result<(f64, f64)> {
    if p.len() != k {
        return arg_err(format!("distribution has {} entries, K = {k}", p.len()));
    }
    check_distribution(p)?;
    let uniform = 1.0 / k as f64;
    let kl: f64 = p.iter().filter(|&&x| x > 0.0).map(|&x| x * (x / uniform).ln()).sum();
    let entropy: f64 = -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>();
    Ok((kl, (k as f64).ln() - entropy))
}

/// `(∂/∂Z_c, ∂/∂V)` of `‖Z_c − V‖²` (sum form): `2(Z_c − V)` and `−2(Z_c − V)`.
pub fn alignment_gradients(z_c: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
    let diff = z_c.sub(v)?;
    Ok((diff.scale(2.0), diff.scale(-2.0)))
}

/// Deliberate formula corruption used to show the suite can fail.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mutation {
    #[default]
    None,
    FlipDvhatDs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyConfig {
    pub instances: usize,
    pub tolerance: f64,
    pub identity_tolerance: f64,
    pub fd_step: f64,
    pub seed: u64,
    pub mutation: Mutation,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            instances: 100,
            tolerance: 1e-4,
            identity_tolerance: 1e-10,
            fd_step: 1e-5,
            seed: 0,
            mutation: Mutation::None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouteError {
    pub route: String,
    pub max_abs_error: f64,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub max_abs_error: f64,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub instances: usize,
    pub passed: bool,
    pub routes: Vec<RouteError>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub seed: u64,
    pub mutation: Mutation,
    pub checks: Vec<CheckResult>,
}

impl VerificationReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failed(&self) -> Vec<&str> {
        self.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect()
    }

    pub fn check(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }

    /// Fixed-width text table, one line per check.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# gradient verification (seed {}, mutation {:?})", self.seed, self.mutation);
        let _ = writeln!(
            s,
            "{:<30} {:>9} {:>12} {:>12} {:>10}  status",
            "check", "instances", "max_abs", "max_rel", "tolerance"
        );
        for c in &self.checks {
            let _ = writeln!(
                s,
                "{:<30} {:>9} {:>12.3e} {:>12.3e} {:>10.1e}  {}",
                c.name,
                c.instances,
                c.max_abs_error,
                c.max_rel_error,
                c.tolerance,
                if c.passed { "PASS" } else { "FAIL" }
            );
        }
        let _ = writeln!(
            s,
            "summary: {}/{} passed",
            self.checks.iter().filter(|c| c.passed).count(),
            self.checks.len()
        );
        s
    }
}

/// Random instance shape: `M ∈ 1..=3`, `L ∈ 1..=4`, `d ∈ {2, 4, 8}`.
#[derive(Clone, Copy, Debug)]
struct Dims {
    tokens: usize,
    d: usize,
}

fn draw_dims(rng: &mut RngStream) -> Dims {
    let m = 1 + rng.index(3);
    let l = 1 + rng.index(4);
    let d = [2, 4, 8][rng.index(3)];
    Dims { tokens: m * l, d }
}

fn normwise(a: &Tensor, b: &Tensor) -> (f64, f64) {
    let abs = a.max_abs_diff(b);
    let scale = a.max_abs().max(b.max_abs());
    (abs, if abs == 0.0 { 0.0 } else { abs / scale })
}

/// Picks one element of a matrix as a scalar node.
fn pick(g: &mut Graph, x: Var, row: usize, col: usize) -> Var {
    let v = g.value(x);
    let mut sel = Tensor::zeros(v.shape());
    sel.set(row, col, 1.0);
    let s = g.constant(sel);
    let p = g.mul(x, s);
    g.sum(p)
}

struct Accumulator {
    routes: Vec<RouteError>,
    tolerance: f64,
    instances: usize,
}

impl Accumulator {
    fn new(routes: &[&str], tolerance: f64) -> Self {
        Self {
            routes: routes
                .iter()
                .map(|r| RouteError {
                    route: (*r).to_string(),
                    max_abs_error: 0.0,
                    max_rel_error: 0.0,
                })
                .collect(),
            tolerance,
            instances: 0,
        }
    }

    fn record(&mut self, route: usize, (abs, rel): (f64, f64)) {
        let r = &mut self.routes[route];
        // NaN must fail the check
        r.max_abs_error = if abs.is_nan() { f64::NAN } else { r.max_abs_error.max(abs) };
        r.max_rel_error = if rel.is_nan() || r.max_rel_error.is_nan() {
            f64::NAN
        } else {
            r.max_rel_error.max(rel)
        };
    }

    fn finish(self, name: &str) -> CheckResult {
        let max_abs = self.routes.iter().map(|r| r.max_abs_error).fold(0.0, f64::max);
        let max_rel = self
            .routes
            .iter()
            .map(|r| r.max_rel_error)
            .fold(0.0, |m: f64, x: f64| if x.is_nan() || m.is_nan() { f64::NAN } else { m.max(x) });
        CheckResult {
            name: name.to_string(),
            max_abs_error: max_abs,
            max_rel_error: max_rel,
            tolerance: self.tolerance,
            instances: self.instances,
            passed: max_rel <= self.tolerance,
            routes: self.routes,
        }
    }
}

const REVERSE: usize = 0;
const FINITE: usize = 1;

fn random_scores(rng: &mut RngStream, n: usize) -> Tensor {
    rng.normal_tensor(&[1, n]).scale(1.5)
}

fn softmax_jacobian_check(cfg: &VerifyConfig, rng: &RngStream) -> Result<(CheckResult, CheckResult)> {
    let mut acc = Accumulator::new(&["reverse_mode", "finite_difference"], cfg.tolerance);
    let mut cols = Accumulator::new(&["column_sum"], cfg.identity_tolerance);
    for i in 0..cfg.instances {
        let mut r = rng.fork_index("instance", i as u64);
        let dims = draw_dims(&mut r);
        let n = dims.tokens;
        let s = random_scores(&mut r, n);
        let alpha = softmax_rows_data(&s);
        let analytic = softmax_jacobian(alpha.data())?;
        let params = ParameterSet::new().with("s", s);
        let mut rev = Tensor::zeros(&[n, n]);
        let mut fd = Tensor::zeros(&[n, n]);
        for m in 0..n {
            let obj = move |g: &mut Graph, b: &Bindings| {
                let a = g.softmax_rows(b.var("s"));
                Ok(pick(g, a, 0, m))
            };
            let gr = grad(&obj, &params)?;
            let gf = finite_diff_grad(&obj, &params, cfg.fd_step)?;
            for j in 0..n {
                rev.set(m, j, gr.get("s").unwrap().data()[j]);
                fd.set(m, j, gf.get("s").unwrap().data()[j]);
            }
        }
        acc.record(REVERSE, normwise(&analytic, &rev));
        acc.record(FINITE, normwise(&analytic, &fd));
        let worst = (0..n)
            .map(|j| (0..n).map(|m| analytic.at(m, j)).sum::<f64>().abs())
            .fold(0.0, f64::max);
        cols.record(0, (worst, worst));
        acc.instances += 1;
        cols.instances += 1;
    }
    Ok((acc.finish("softmax_jacobian"), cols.finish("softmax_jacobian_column_sums")))
}

/// Shared attention-row instance: scores, values and the attended vector.
struct RowInstance {
    scores: Tensor,
    values: Tensor,
    alpha: Vec<f64>,
    v_hat: Vec<f64>,
}

fn row_instance(r: &mut RngStream) -> RowInstance {
    let dims = draw_dims(r);
    let scores = random_scores(r, dims.tokens);
    let values = r.normal_tensor(&[dims.tokens, dims.d]);
    let alpha = softmax_rows_data(&scores).into_data();
    let v_hat = (0..dims.d)
        .map(|c| alpha.iter().enumerate().map(|(j, a)| a * values.at(j, c)).sum())
        .collect();
    RowInstance {
        scores,
        values,
        alpha,
        v_hat,
    }
}

fn attended_objective(values: Tensor, weights: Tensor) -> impl Fn(&mut Graph, &Bindings) -> Result<Var> {
    move |g: &mut Graph, b: &Bindings| {
        let a = g.softmax_rows(b.var("s"));
        let v = g.constant(values.clone());
        let vh = g.matmul(a, v);
        let w = g.constant(weights.clone());
        let prod = g.mul(vh, w);
        Ok(g.sum(prod))
    }
}

fn dvhat_ds_check(cfg: &VerifyConfig, rng: &RngStream) -> Result<CheckResult> {
    let mut acc = Accumulator::new(&["reverse_mode", "finite_difference"], cfg.tolerance);
    for i in 0..cfg.instances {
        let mut r = rng.fork_index("instance", i as u64);
        let inst = row_instance(&mut r);
        let (n, d) = (inst.values.rows(), inst.values.cols());
        let analytic = dvhat_ds_impl(&inst.alpha, &inst.values, &inst.v_hat, cfg.mutation)?;
        let params = ParameterSet::new().with("s", inst.scores.clone());
        let mut rev = Tensor::zeros(&[n, d]);
        let mut fd = Tensor::zeros(&[n, d]);
        for c in 0..d {
            let mut sel = Tensor::zeros(&[1, d]);
            sel.set(0, c, 1.0);
            let obj = attended_objective(inst.values.clone(), sel);
            let gr = grad(&obj, &params)?;
            let gf = finite_diff_grad(&obj, &params, cfg.fd_step)?;
            for j in 0..n {
                rev.set(j, c, gr.get("s").unwrap().data()[j]);
                fd.set(j, c, gf.get("s").unwrap().data()[j]);
            }
        }
        acc.record(REVERSE, normwise(&analytic, &rev));
        acc.record(FINITE, normwise(&analytic, &fd));
        acc.instances += 1;
    }
    Ok(acc.finish("dvhat_ds"))
}

fn dl_ds_check(cfg: &VerifyConfig, rng: &RngStream) -> Result<CheckResult> {
    let mut acc = Accumulator::new(&["reverse_mode", "finite_difference"], cfg.tolerance);
    for i in 0..cfg.instances {
        let mut r = rng.fork_index("instance", i as u64);
        let inst = row_instance(&mut r);
        let d = inst.values.cols();
        let upstream = r.normal_tensor(&[1, d]);
        let analytic = Tensor::vector(dl_ds(upstream.data(), &inst.alpha, &inst.values, &inst.v_hat)?);
        let params = ParameterSet::new().with("s", inst.scores.clone());
        let obj = attended_objective(inst.values.clone(), upstream);
        let rev = grad(&obj, &params)?.get("s").unwrap().reshape(analytic.shape())?;
        let fd = finite_diff_grad(&obj, &params, cfg.fd_step)?
            .get("s")
            .unwrap()
            .reshape(analytic.shape())?;
        acc.record(REVERSE, normwise(&analytic, &rev));
        acc.record(FINITE, normwise(&analytic, &fd));
        acc.instances += 1;
    }
    Ok(acc.finish("dl_ds"))
}

fn score_weight_check(cfg: &VerifyConfig, rng: &RngStream) -> Result<Vec<CheckResult>> {
    let names = ["w_q", "w_k", "w_v"];
    let mut accs: Vec<Accumulator> = names
        .iter()
        .map(|_| Accumulator::new(&["reverse_mode", "finite_difference"], cfg.tolerance))
        .collect();
    for inst in 0..cfg.instances {
        let mut r = rng.fork_index("instance", inst as u64);
        let dims = draw_dims(&mut r);
        let (n, d) = (dims.tokens, dims.d);
        let z = r.normal_tensor(&[n, d]);
        let p = AttentionParams::random(d, &mut r);
        let (i, j) = (r.index(n), r.index(n));
        let analytic = score_weight_gradients(z.row(i), z.row(j), &p)?;
        let params = ParameterSet::new()
            .with("w_q", p.w_q.clone())
            .with("w_k", p.w_k.clone())
            .with("w_v", p.w_v.clone());
        let zc = z.clone();
        let obj = move |g: &mut Graph, b: &Bindings| {
            let zv = g.constant(zc.clone());
            let s = crate::attention::attention_scores(g, zv, b.var("w_q"), b.var("w_k"))?;
            Ok(pick(g, s, i, j))
        };
        let gr = grad(&obj, &params)?;
        let gf = finite_diff_grad(&obj, &params, cfg.fd_step)?;
        for (k, (name, a)) in names
            .iter()
            .zip([&analytic.d_wq, &analytic.d_wk, &analytic.d_wv])
            .enumerate()
        {
            accs[k].record(REVERSE, normwise(a, gr.get(name).unwrap()));
            accs[k].record(FINITE, normwise(a, gf.get(name).unwrap()));
            accs[k].instances += 1;
        }
    }
    Ok(accs
        .into_iter()
        .zip(names)
        .map(|(a, n)| a.finish(&format!("score_grad_{n}")))
        .collect())
}

fn kl_uniform_check(cfg: &VerifyConfig, rng: &RngStream) -> Result<CheckResult> {
    let mut acc = Accumulator::new(&["identity"], cfg.identity_tolerance);
    for i in 0..cfg.instances {
        let mut r = rng.fork_index("instance", i as u64);
        let k = 2 + r.index(7);
        let spread = r.uniform_range(0.1, 4.0);
        let mut p: Vec<f64> = (0..k).map(|_| (spread * r.normal()).exp()).collect();
        if i % 10 == 0 {
            p[r.index(k)] = 0.0;
        }
        let total: f64 = p.iter().sum();
        p.iter_mut().for_each(|x| *x /= total);
        let (kl, rhs) = kl_uniform_identity(&p, k)?;
        let abs = (kl - rhs).abs();
        acc.record(0, (abs, abs / 1f64.max(kl.abs()).max(rhs.abs())));
        acc.instances += 1;
    }
    Ok(acc.finish("kl_uniform_identity"))
}

fn alignment_check(cfg: &VerifyConfig, rng: &RngStream) -> Result<Vec<CheckResult>> {
    let mut acc_zc = Accumulator::new(&["reverse_mode", "finite_difference"], cfg.tolerance);
    let mut acc_v = Accumulator::new(&["reverse_mode", "finite_difference"], cfg.tolerance);
    for i in 0..cfg.instances {
        let mut r = rng.fork_index("instance", i as u64);
        let dims = draw_dims(&mut r);
        let l = 1 + r.index(4);
        let z_c = r.normal_tensor(&[l, dims.d]);
        let v = r.normal_tensor(&[l, dims.d]);
        let (d_zc, d_v) = alignment_gradients(&z_c, &v)?;
        let params = ParameterSet::new().with("z_c", z_c).with("v", v);
        let obj = |g: &mut Graph, b: &Bindings| {
            let diff = g.sub(b.var("z_c"), b.var("v"));
            let sq = g.square(diff);
            Ok(g.sum(sq))
        };
        let gr = grad(&obj, &params)?;
        let gf = finite_diff_grad(&obj, &params, cfg.fd_step)?;
        acc_zc.record(REVERSE, normwise(&d_zc, gr.get("z_c").unwrap()));
        acc_zc.record(FINITE, normwise(&d_zc, gf.get("z_c").unwrap()));
        acc_v.record(REVERSE, normwise(&d_v, gr.get("v").unwrap()));
        acc_v.record(FINITE, normwise(&d_v, gf.get("v").unwrap()));
        acc_zc.instances += 1;
        acc_v.instances += 1;
    }
    Ok(vec![acc_zc.finish("alignment_grad_z_c"), acc_v.finish("alignment_grad_v")])
}

#[derive(Clone, Copy)]
enum Suite {
    Softmax,
    Dvhat,
    DlDs,
    ScoreWeights,
    KlUniform,
    Alignment,
}

/// Runs every check over `config.instances` random instances. Checks run
/// concurrently, each on its own stream forked from the seed, so the report
/// is identical with or without the `parallel` feature.
pub fn verify_all(config: &VerifyConfig) -> Result<VerificationReport> {
    if config.instances == 0 || !(config.tolerance > 0.0) || !(config.fd_step > 0.0) {
        return arg_err("instances, tolerance and step must be positive");
    }
    let root = RngStream::new(config.seed);
    let suites = vec![
        (Suite::Softmax, "softmax_jacobian"),
        (Suite::Dvhat, "dvhat_ds"),
        (Suite::DlDs, "dl_ds"),
        (Suite::ScoreWeights, "score_weight_gradients"),
        (Suite::KlUniform, "kl_uniform_identity"),
        (Suite::Alignment, "alignment_gradients"),
    ];
    let results = par::map(suites, |(suite, label)| -> Result<Vec<CheckResult>> {
        let rng = root.fork(label);
        Ok(match suite {
            Suite::Softmax => {
                let (a, b) = softmax_jacobian_check(config, &rng)?;
                vec![a, b]
            }
            Suite::Dvhat => vec![dvhat_ds_check(config, &rng)?],
            Suite::DlDs => vec![dl_ds_check(config, &rng)?],
            Suite::ScoreWeights => score_weight_check(config, &rng)?,
            Suite::KlUniform => vec![kl_uniform_check(config, &rng)?],
            Suite::Alignment => alignment_check(config, &rng)?,
        })
    });
    let mut checks = Vec::new();
    for r in results {
        checks.extend(r?);
    }
    Ok(VerificationReport {
        seed: config.seed,
        mutation: config.mutation,
        checks,
    })
}
