//! Entropic optimal transport and the de-biased Sinkhorn divergence between
//! empirical measures of feature vectors.
//!
//! Formulation: the entropic problem is regularized by `ε·KL(P | a⊗b)`, whose
//! dual objective is
//!
//! ```text
//! OT_ε(a, b) = <a, f> + <b, g> - ε (Σ_ij a_i b_j exp((f_i + g_j - C_ij) / ε) - 1)
//! ```
//!
//! evaluated at the Sinkhorn fixed point, where the bracket vanishes. With
//! this choice a pair of Dirac masses has `OT_ε = |x - y|²` (no entropic
//! constant). All three terms of the divergence
//!
//! ```text
//! S_ε(a, b) = OT_ε(a, b) - ½ OT_ε(a, a) - ½ OT_ε(b, b)
//! ```
//!
//! use the same formulation. Cross terms run alternating log-domain updates;
//! self terms run the symmetric averaged update `f ← ½ (f + T_a(f))`.
//! Gradients w.r.t. the support points are taken with the potentials held at
//! their converged values (envelope theorem).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Weighted point cloud, points stored row-major `n × dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure {
    dim: usize,
    points: Vec<f64>,
    weights: Vec<f64>,
}

impl EmpiricalMeasure {
    /// Uniform weights over the given points.
    pub fn uniform(points: &[Vec<f64>]) -> Result<Self> {
        let n = points.len();
        Self::with_weights(points, vec![1.0 / n.max(1) as f64; n])
    }

    pub fn with_weights(points: &[Vec<f64>], weights: Vec<f64>) -> Result<Self> {
        let dim = points
            .first()
            .map(|p| p.len())
            .ok_or_else(|| Error::EmptyInput("measure has no points".into()))?;
        if let Some(p) = points.iter().find(|p| p.len() != dim) {
            return Err(Error::InvalidDimension(format!(
                "point of dimension {} in a measure of dimension {dim}",
                p.len()
            )));
        }
        let flat = points.iter().flatten().copied().collect();
        Self::from_flat(dim, flat, weights)
    }

    /// Points from a row-major `n × dim` buffer with uniform weights.
    pub fn uniform_flat(dim: usize, points: Vec<f64>) -> Result<Self> {
        if dim == 0 || points.is_empty() || points.len() % dim != 0 {
            return Err(Error::InvalidDimension(format!(
                "{} values do not form points of dimension {dim}",
                points.len()
            )));
        }
        let n = points.len() / dim;
        Self::from_flat(dim, points, vec![1.0 / n as f64; n])
    }

    pub fn from_flat(dim: usize, points: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if dim == 0 || weights.is_empty() {
            return Err(Error::EmptyInput("measure has no points".into()));
        }
        if points.len() != weights.len() * dim {
            return Err(Error::InvalidDimension(format!(
                "{} coordinates for {} points of dimension {dim}",
                points.len(),
                weights.len()
            )));
        }
        if points.iter().chain(&weights).any(|v| !v.is_finite()) {
            return Err(Error::NumericInput("non-finite coordinate or weight".into()));
        }
        if weights.iter().any(|w| *w <= 0.0) {
            return Err(Error::InvalidValue("weights must be positive".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidValue(format!("weights sum to {total}, not 1")));
        }
        Ok(Self {
            dim,
            points,
            weights,
        })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// The same measure with every point shifted by `t`.
    pub fn translated(&self, t: &[f64]) -> Self {
        let mut points = self.points.clone();
        for p in points.chunks_exact_mut(self.dim) {
            for (x, dt) in p.iter_mut().zip(t) {
                *x += dt;
            }
        }
        Self {
            dim: self.dim,
            points,
            weights: self.weights.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostKind {
    SquaredEuclidean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SinkhornConfig {
    pub epsilon: f64,
    pub max_iters: usize,
    /// Stop when the largest potential change in one sweep is below this.
    pub tolerance: f64,
    pub cost: CostKind,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            max_iters: 500,
            tolerance: 1e-6,
            cost: CostKind::SquaredEuclidean,
        }
    }
}

impl SinkhornConfig {
    pub fn with_epsilon(epsilon: f64) -> Self {
        Self {
            epsilon,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::InvalidValue(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidValue("max_iters must be ≥ 1".into()));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::InvalidValue("tolerance must be positive".into()));
        }
        Ok(())
    }
}

/// Dual potentials of one entropic transport problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Potentials {
    /// Over the points of the first measure.
    pub f: Vec<f64>,
    /// Over the points of the second measure.
    pub g: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinkhornResult {
    pub ot_ab: f64,
    pub ot_aa: f64,
    pub ot_bb: f64,
    pub divergence: f64,
    /// Potentials of the cross term `OT_ε(a, b)`.
    pub potentials: Potentials,
    pub iterations_used: usize,
    pub converged: bool,
}

fn cost_matrix(a: &EmpiricalMeasure, b: &EmpiricalMeasure, kind: CostKind) -> Vec<f64> {
    let mut c = Vec::with_capacity(a.len() * b.len());
    for i in 0..a.len() {
        let x = a.point(i);
        for j in 0..b.len() {
            let y = b.point(j);
            c.push(match kind {
                CostKind::SquaredEuclidean => x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum(),
            });
        }
    }
    c
}

/// `out_i = -ε log Σ_j w_j exp((pot_j - C_ij) / ε)` for a row-major `C`
/// (`transposed` reads `C_ji` instead).
fn softmin(
    eps: f64,
    cost: &[f64],
    rows: usize,
    cols: usize,
    transposed: bool,
    log_w: &[f64],
    pot: &[f64],
    out: &mut [f64],
    scratch: &mut Vec<f64>,
) {
    for (i, o) in out.iter_mut().enumerate().take(rows) {
        scratch.clear();
        let mut max = f64::NEG_INFINITY;
        for j in 0..cols {
            let cij = if transposed { cost[j * rows + i] } else { cost[i * cols + j] };
            let v = log_w[j] + (pot[j] - cij) / eps;
            max = max.max(v);
            scratch.push(v);
        }
        let sum: f64 = scratch.iter().map(|v| (v - max).exp()).sum();
        *o = -eps * (max + sum.ln());
    }
}

fn check_pair(a: &EmpiricalMeasure, b: &EmpiricalMeasure, cfg: &SinkhornConfig) -> Result<()> {
    cfg.validate()?;
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyInput("Sinkhorn needs non-empty measures".into()));
    }
    if a.dim != b.dim {
        return Err(Error::InvalidDimension(format!(
            "measures of dimension {} and {}",
            a.dim, b.dim
        )));
    }
    Ok(())
}

/// Orders two measures so that `OT(a, b)` and `OT(b, a)` run the identical
/// computation; true when the pair was swapped.
fn canonical_swap(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> bool {
    let key = |m: &EmpiricalMeasure| (m.len(), m.points.clone(), m.weights.clone());
    let (ka, kb) = (key(a), key(b));
    match ka.0.cmp(&kb.0) {
        std::cmp::Ordering::Less => false,
        std::cmp::Ordering::Greater => true,
        std::cmp::Ordering::Equal => {
            let ord = ka
                .1
                .iter()
                .chain(&ka.2)
                .zip(kb.1.iter().chain(&kb.2))
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne());
            matches!(ord, Some(std::cmp::Ordering::Greater))
        }
    }
}

fn alternating(
    a: &EmpiricalMeasure,
    b: &EmpiricalMeasure,
    cost: &[f64],
    cfg: &SinkhornConfig,
) -> Potentials {
    let (n, m) = (a.len(), b.len());
    let eps = cfg.epsilon;
    let log_a: Vec<f64> = a.weights.iter().map(|w| w.ln()).collect();
    let log_b: Vec<f64> = b.weights.iter().map(|w| w.ln()).collect();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let mut f_new = vec![0.0; n];
    let mut g_new = vec![0.0; m];
    let mut scratch = Vec::with_capacity(n.max(m));
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        iterations += 1;
        softmin(eps, cost, n, m, false, &log_b, &g, &mut f_new, &mut scratch);
        softmin(eps, cost, m, n, true, &log_a, &f_new, &mut g_new, &mut scratch);
        let change = max_abs_diff(&f, &f_new).max(max_abs_diff(&g, &g_new));
        std::mem::swap(&mut f, &mut f_new);
        std::mem::swap(&mut g, &mut g_new);
        if change < cfg.tolerance {
            converged = true;
            break;
        }
    }
    // The dual is invariant to (f + k, g - k); pick the balanced
    // representative so that identical measures get identical potentials.
    let shift = 0.5 * (dot(&a.weights, &f) - dot(&b.weights, &g));
    f.iter_mut().for_each(|v| *v -= shift);
    g.iter_mut().for_each(|v| *v += shift);
    Potentials {
        f,
        g,
        iterations,
        converged,
    }
}

fn symmetric(a: &EmpiricalMeasure, cost: &[f64], cfg: &SinkhornConfig) -> Potentials {
    let n = a.len();
    let eps = cfg.epsilon;
    let log_a: Vec<f64> = a.weights.iter().map(|w| w.ln()).collect();
    let mut f = vec![0.0; n];
    let mut t = vec![0.0; n];
    let mut scratch = Vec::with_capacity(n);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        iterations += 1;
        softmin(eps, cost, n, n, false, &log_a, &f, &mut t, &mut scratch);
        let mut change = 0.0f64;
        for (fi, ti) in f.iter_mut().zip(&t) {
            let next = 0.5 * (*fi + ti);
            change = change.max((next - *fi).abs());
            *fi = next;
        }
        if change < cfg.tolerance {
            converged = true;
            break;
        }
    }
    Potentials {
        g: f.clone(),
        f,
        iterations,
        converged,
    }
}

fn max_abs_diff(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).fold(0.0, |m, (p, q)| m.max((p - q).abs()))
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(p, q)| p * q).sum()
}

/// Transport plan `P_ij = a_i b_j exp((f_i + g_j - C_ij) / ε)`, row-major.
fn plan(
    a: &EmpiricalMeasure,
    b: &EmpiricalMeasure,
    cost: &[f64],
    pot: &Potentials,
    eps: f64,
) -> Vec<f64> {
    let m = b.len();
    let mut p = Vec::with_capacity(cost.len());
    for i in 0..a.len() {
        for j in 0..m {
            let e = (pot.f[i] + pot.g[j] - cost[i * m + j]) / eps;
            p.push(a.weights[i] * b.weights[j] * e.exp());
        }
    }
    p
}

fn dual_value(
    a: &EmpiricalMeasure,
    b: &EmpiricalMeasure,
    cost: &[f64],
    pot: &Potentials,
    eps: f64,
) -> f64 {
    let mass: f64 = plan(a, b, cost, pot, eps).iter().sum();
    dot(&a.weights, &pot.f) + dot(&b.weights, &pot.g) - eps * (mass - 1.0)
}

struct Solved {
    value: f64,
    potentials: Potentials,
    cost: Vec<f64>,
}

fn solve_cross(a: &EmpiricalMeasure, b: &EmpiricalMeasure, cfg: &SinkhornConfig) -> Solved {
    if canonical_swap(a, b) {
        let s = solve_cross(b, a, cfg);
        let (n, m) = (a.len(), b.len());
        let mut cost = vec![0.0; n * m];
        for j in 0..m {
            for i in 0..n {
                cost[i * m + j] = s.cost[j * n + i];
            }
        }
        return Solved {
            value: s.value,
            potentials: Potentials {
                f: s.potentials.g,
                g: s.potentials.f,
                iterations: s.potentials.iterations,
                converged: s.potentials.converged,
            },
            cost,
        };
    }
    let cost = cost_matrix(a, b, cfg.cost);
    let potentials = alternating(a, b, &cost, cfg);
    let value = dual_value(a, b, &cost, &potentials, cfg.epsilon);
    Solved {
        value,
        potentials,
        cost,
    }
}

fn solve_self(a: &EmpiricalMeasure, cfg: &SinkhornConfig) -> Solved {
    let cost = cost_matrix(a, a, cfg.cost);
    let potentials = symmetric(a, &cost, cfg);
    let value = dual_value(a, a, &cost, &potentials, cfg.epsilon);
    Solved {
        value,
        potentials,
        cost,
    }
}

/// Log-domain Sinkhorn potentials for `OT_ε(a, b)`. Non-convergence within
/// `max_iters` is reported through the flag, not as an error.
pub fn sinkhorn_potentials(
    a: &EmpiricalMeasure,
    b: &EmpiricalMeasure,
    cfg: &SinkhornConfig,
) -> Result<Potentials> {
    check_pair(a, b, cfg)?;
    Ok(solve_cross(a, b, cfg).potentials)
}

/// `OT_ε(a, b)` in the dual formulation documented at module level.
pub fn entropic_ot(a: &EmpiricalMeasure, b: &EmpiricalMeasure, cfg: &SinkhornConfig) -> Result<f64> {
    check_pair(a, b, cfg)?;
    Ok(solve_cross(a, b, cfg).value)
}

struct Divergence {
    result: SinkhornResult,
    ab: Solved,
    aa: Solved,
    bb: Solved,
}

fn divergence_parts(
    a: &EmpiricalMeasure,
    b: &EmpiricalMeasure,
    cfg: &SinkhornConfig,
) -> Result<Divergence> {
    check_pair(a, b, cfg)?;
    let aa = solve_self(a, cfg);
    let bb = solve_self(b, cfg);
    let ab = if a == b {
        // OT_ε(a, a) by either route; reuse the symmetric solve so the
        // divergence of identical measures is exactly zero.
        Solved {
            value: aa.value,
            potentials: aa.potentials.clone(),
            cost: aa.cost.clone(),
        }
    } else {
        solve_cross(a, b, cfg)
    };
    let divergence = ab.value - 0.5 * aa.value - 0.5 * bb.value;
    if !divergence.is_finite() {
        return Err(Error::NumericInput(
            "Sinkhorn divergence is not finite; check epsilon against the cost scale".into(),
        ));
    }
    let converged =
        ab.potentials.converged && aa.potentials.converged && bb.potentials.converged;
    let iterations_used = ab
        .potentials
        .iterations
        .max(aa.potentials.iterations)
        .max(bb.potentials.iterations);
    Ok(Divergence {
        result: SinkhornResult {
            ot_ab: ab.value,
            ot_aa: aa.value,
            ot_bb: bb.value,
            divergence,
            potentials: ab.potentials.clone(),
            iterations_used,
            converged,
        },
        ab,
        aa,
        bb,
    })
}

/// De-biased Sinkhorn divergence `S_ε(a, b)`.
pub fn sinkhorn_divergence(
    a: &EmpiricalMeasure,
    b: &EmpiricalMeasure,
    cfg: &SinkhornConfig,
) -> Result<SinkhornResult> {
    Ok(divergence_parts(a, b, cfg)?.result)
}

/// `∂S_ε / ∂(points of a)`, row-major `n × dim`.
pub fn sinkhorn_divergence_grad(
    a: &EmpiricalMeasure,
    b: &EmpiricalMeasure,
    cfg: &SinkhornConfig,
) -> Result<Vec<f64>> {
    Ok(sinkhorn_divergence_with_grads(a, b, cfg)?.1)
}

/// The divergence together with its gradients w.r.t. the points of `a` and of `b`.
pub fn sinkhorn_divergence_with_grads(
    a: &EmpiricalMeasure,
    b: &EmpiricalMeasure,
    cfg: &SinkhornConfig,
) -> Result<(SinkhornResult, Vec<f64>, Vec<f64>)> {
    let parts = divergence_parts(a, b, cfg)?;
    let eps = cfg.epsilon;
    let dim = a.dim;

    let p_ab = plan(a, b, &parts.ab.cost, &parts.ab.potentials, eps);
    let p_aa = plan(a, a, &parts.aa.cost, &parts.aa.potentials, eps);
    let p_bb = plan(b, b, &parts.bb.cost, &parts.bb.potentials, eps);
    let (n, m) = (a.len(), b.len());

    // d|x - y|² / dx = 2 (x - y). The self terms see each point on both
    // sides of a symmetric plan, which doubles their contribution and
    // cancels the ½ in front of them.
    let mut grad_a = vec![0.0; n * dim];
    for i in 0..n {
        let x = a.point(i);
        let gi = &mut grad_a[i * dim..(i + 1) * dim];
        for j in 0..m {
            let w = 2.0 * p_ab[i * m + j];
            for (k, y) in b.point(j).iter().enumerate() {
                gi[k] += w * (x[k] - y);
            }
        }
        for j in 0..n {
            let w = 2.0 * p_aa[i * n + j];
            for (k, y) in a.point(j).iter().enumerate() {
                gi[k] -= w * (x[k] - y);
            }
        }
    }
    let mut grad_b = vec![0.0; m * dim];
    for j in 0..m {
        let y = b.point(j);
        let gj = &mut grad_b[j * dim..(j + 1) * dim];
        for i in 0..n {
            let w = 2.0 * p_ab[i * m + j];
            for (k, x) in a.point(i).iter().enumerate() {
                gj[k] += w * (y[k] - x);
            }
        }
        for l in 0..m {
            let w = 2.0 * p_bb[j * m + l];
            for (k, z) in b.point(l).iter().enumerate() {
                gj[k] -= w * (y[k] - z);
            }
        }
    }
    Ok((parts.result, grad_a, grad_b))
}
