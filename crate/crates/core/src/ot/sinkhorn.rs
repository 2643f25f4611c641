use nalgebra::{DMatrix, DVector};
use ndarray::Array2;

use super::exact::{check_shapes, positive_support};
use super::measure::{frobenius_inner, marginal_violation, CostMatrix, DiscreteMeasure, TransportPlan};
use crate::error::{Error, Result};

/// Parameters of the entropic solver.
///
/// The objective is `⟨γ, C⟩ − Ω(γ)/λ`, so `1/λ` is the entropic strength:
/// larger `lambda` gives a sharper plan that is closer to the exact one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornConfig {
    pub lambda: f64,
    pub max_iterations: usize,
    /// Stop once the largest marginal violation drops below this.
    pub tolerance: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            lambda: 100.0,
            max_iterations: 10_000,
            tolerance: 1e-9,
        }
    }
}

impl SinkhornConfig {
    pub fn new(lambda: f64, max_iterations: usize, tolerance: f64) -> Result<Self> {
        let cfg = Self {
            lambda,
            max_iterations,
            tolerance,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_lambda(lambda: f64) -> Result<Self> {
        Self::new(lambda, Self::default().max_iterations, Self::default().tolerance)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid(format!("sinkhorn lambda must be positive, got {}", self.lambda)));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::invalid(format!(
                "sinkhorn tolerance must be positive, got {}",
                self.tolerance
            )));
        }
        if self.max_iterations == 0 {
            return Err(Error::invalid("sinkhorn needs at least one iteration"));
        }
        Ok(())
    }
}

/// Scalings beyond this magnitude are folded into the log potentials.
const ABSORB_AT: f64 = 1e50;
/// Marginal tolerance of the warm-start stages.
const STAGE_TOLERANCE: f64 = 1e-4;
/// Sinkhorn sweeps between Newton polish attempts.
const NEWTON_EVERY: usize = 20;
/// Largest dual dimension `m + n - 1` for which Newton steps are tried.
const NEWTON_MAX_DIM: usize = 400;
const NEWTON_HALVINGS: usize = 30;
const MAX_STAGES: i32 = 300;

/// Entropy-regularized transport by stabilized Sinkhorn scaling.
///
/// Dual potentials are kept in the log domain and the scaling vectors act on
/// a kernel rebased on them, so large `λ · C` never underflows; whenever a
/// scaling grows past `ABSORB_AT` (or a kernel sum underflows) it is absorbed
/// into the potentials with an exact log-sum-exp sweep.
///
/// When `λ` is large relative to the cost range the solve is warm-started
/// from a sequence of coarser `λ / 10^k` problems, and every few sweeps a
/// damped Newton step on the dual is attempted and kept only if it lowers
/// the marginal violation. All stages share `max_iterations`. A plan that
/// misses the tolerance is returned with `converged == false`.
pub fn sinkhorn(
    mu_s: &DiscreteMeasure,
    mu_t: &DiscreteMeasure,
    cost: &CostMatrix,
    config: &SinkhornConfig,
) -> Result<TransportPlan> {
    config.validate()?;
    check_shapes(mu_s, mu_t, cost)?;

    let (rows, a) = positive_support(mu_s.weights());
    let (cols, b) = positive_support(mu_t.weights());
    let (m, n) = (rows.len(), cols.len());
    let c = cost.entries();
    let neg_cost = Array2::from_shape_fn((m, n), |(i, j)| -c[[rows[i], cols[j]]]);
    let (lo, hi) = neg_cost.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    let spread = config.lambda * (hi - lo);
    let coarse = if spread > 10.0 && config.max_iterations > 1 { (spread.log10().floor() as i32).min(MAX_STAGES) } else { 0 };
    let newton = m + n - 1 <= NEWTON_MAX_DIM;

    let mut state = Scaling::new(neg_cost, &a, &b, 10f64.powi(coarse) / config.lambda);
    let mut iterations = 0;
    let mut converged = false;
    let mut kv = vec![0.0; m];
    let mut ktu = vec![0.0; n];

    for k in (0..=coarse).rev() {
        let last = k == 0;
        if k != coarse {
            state.set_eps(10f64.powi(k) / config.lambda);
        }
        let (tolerance, budget) = if last {
            (config.tolerance, config.max_iterations)
        } else {
            (config.tolerance.max(STAGE_TOLERANCE), config.max_iterations - 1)
        };
        state.kernel_times_v(&mut kv);
        let mut sweeps = 0;
        while iterations < budget {
            iterations += 1;
            sweeps += 1;
            let ok = state.update_u(&kv) && {
                state.kernel_t_times_u(&mut ktu);
                state.update_v(&ktu)
            };
            if !ok || state.needs_absorb() {
                state.absorb();
            }
            state.kernel_times_v(&mut kv);
            // Columns are exact after the v update; rows carry the violation.
            let row_violation = (0..m)
                .map(|i| (state.u[i] * kv[i] - a[i]).abs())
                .fold(0.0, f64::max);
            if !row_violation.is_finite() {
                return Err(Error::Numerical("sinkhorn potentials became non-finite".into()));
            }
            if row_violation < tolerance {
                converged = last;
                break;
            }
            if newton && sweeps % NEWTON_EVERY == 0 && state.newton_step(row_violation) {
                state.kernel_times_v(&mut kv);
            }
        }
    }

    let mut coupling = Array2::zeros(c.dim());
    for (i, &r) in rows.iter().enumerate() {
        for (j, &k) in cols.iter().enumerate() {
            coupling[[r, k]] = state.log_entry(i, j).exp();
        }
    }
    let transport_cost = frobenius_inner(&coupling, cost)?;
    let plan = TransportPlan {
        coupling,
        source_marginal: mu_s.weights().to_vec(),
        target_marginal: mu_t.weights().to_vec(),
        transport_cost,
        iterations_used: iterations,
        converged,
    };
    if converged {
        debug_assert!(marginal_violation(&plan.coupling, &plan.source_marginal, &plan.target_marginal) < config.tolerance * 2.0);
    } else {
        log::debug!(
            "sinkhorn stopped after {iterations} iterations with marginal violation {:e}",
            plan.marginal_violation()
        );
    }
    Ok(plan)
}

/// Plan `exp((-C + f ⊕ g) / ε) · diag(u) · diag(v)`.
struct Scaling<'a> {
    neg_cost: Array2<f64>,
    a: &'a [f64],
    b: &'a [f64],
    eps: f64,
    f: Vec<f64>,
    g: Vec<f64>,
    u: Vec<f64>,
    v: Vec<f64>,
    kernel: Array2<f64>,
}

impl<'a> Scaling<'a> {
    fn new(neg_cost: Array2<f64>, a: &'a [f64], b: &'a [f64], eps: f64) -> Self {
        let (m, n) = neg_cost.dim();
        let mut s = Self {
            a,
            b,
            eps,
            f: vec![0.0; m],
            g: vec![0.0; n],
            u: vec![1.0; m],
            v: vec![1.0; n],
            kernel: Array2::zeros((m, n)),
            neg_cost,
        };
        s.absorb();
        s
    }

    fn log_entry(&self, i: usize, j: usize) -> f64 {
        (self.neg_cost[[i, j]] + self.f[i] + self.g[j]) / self.eps + self.u[i].ln() + self.v[j].ln()
    }

    fn kernel_times_v(&self, out: &mut [f64]) {
        let n = self.v.len();
        let k = self.kernel.as_slice().expect("standard layout");
        for (o, row) in out.iter_mut().zip(k.chunks_exact(n)) {
            *o = row.iter().zip(&self.v).map(|(k, v)| k * v).sum();
        }
    }

    fn kernel_t_times_u(&self, out: &mut [f64]) {
        let n = self.v.len();
        out.fill(0.0);
        let k = self.kernel.as_slice().expect("standard layout");
        for (row, &u) in k.chunks_exact(n).zip(&self.u) {
            for (o, k) in out.iter_mut().zip(row) {
                *o += k * u;
            }
        }
    }

    /// False when some kernel sum underflowed; the caller absorbs.
    fn update_u(&mut self, kv: &[f64]) -> bool {
        if kv.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return false;
        }
        for ((u, &p), &s) in self.u.iter_mut().zip(self.a).zip(kv) {
            *u = p / s;
        }
        true
    }

    fn update_v(&mut self, ktu: &[f64]) -> bool {
        if ktu.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return false;
        }
        for ((v, &q), &s) in self.v.iter_mut().zip(self.b).zip(ktu) {
            *v = q / s;
        }
        true
    }

    fn needs_absorb(&self) -> bool {
        self.u.iter().chain(&self.v).any(|&x| !(x < ABSORB_AT && x > 1.0 / ABSORB_AT))
    }

    fn fold_scalings(&mut self) {
        let eps = self.eps;
        for (f, u) in self.f.iter_mut().zip(&mut self.u) {
            if *u > 0.0 && u.is_finite() {
                *f += eps * u.ln();
            }
            *u = 1.0;
        }
        for (g, v) in self.g.iter_mut().zip(&mut self.v) {
            if *v > 0.0 && v.is_finite() {
                *g += eps * v.ln();
            }
            *v = 1.0;
        }
    }

    fn rebuild_kernel(&mut self) {
        let eps = self.eps;
        for ((i, j), k) in self.kernel.indexed_iter_mut() {
            *k = ((self.neg_cost[[i, j]] + self.f[i] + self.g[j]) / eps).exp();
        }
    }

    /// Folds the scalings into the potentials, then runs one exact
    /// log-domain sweep and rebuilds the kernel around the result.
    fn absorb(&mut self) {
        self.fold_scalings();
        let (m, n) = self.neg_cost.dim();
        let eps = self.eps;
        let mut scratch = vec![0.0; m.max(n)];
        for i in 0..m {
            for j in 0..n {
                scratch[j] = (self.neg_cost[[i, j]] + self.g[j]) / eps;
            }
            self.f[i] = eps * (self.a[i].ln() - log_sum_exp(&scratch[..n]));
        }
        for j in 0..n {
            for i in 0..m {
                scratch[i] = (self.neg_cost[[i, j]] + self.f[i]) / eps;
            }
            self.g[j] = eps * (self.b[j].ln() - log_sum_exp(&scratch[..m]));
        }
        self.rebuild_kernel();
    }

    fn set_eps(&mut self, eps: f64) {
        self.fold_scalings();
        self.eps = eps;
        self.absorb();
    }

    /// Marginal sums of `exp((-C + f ⊕ g) / ε)` into `plan`, plus the violation.
    fn plan_violation(&self, f: &[f64], g: &[f64], plan: &mut Array2<f64>) -> f64 {
        let (m, n) = plan.dim();
        let mut r = vec![0.0; m];
        let mut c = vec![0.0; n];
        for ((i, j), p) in plan.indexed_iter_mut() {
            *p = ((self.neg_cost[[i, j]] + f[i] + g[j]) / self.eps).exp();
            r[i] += *p;
            c[j] += *p;
        }
        let rows = r.iter().zip(self.a).map(|(x, y)| (x - y).abs());
        let cols = c.iter().zip(self.b).map(|(x, y)| (x - y).abs());
        rows.chain(cols).fold(0.0, f64::max)
    }

    /// One backtracking Newton step on the dual, gauge-fixed by holding the
    /// last column potential. Returns true if the step was taken.
    fn newton_step(&mut self, current: f64) -> bool {
        self.fold_scalings();
        self.rebuild_kernel();
        let (m, n) = self.kernel.dim();
        let p = &self.kernel;
        let r: Vec<f64> = p.rows().into_iter().map(|row| row.sum()).collect();
        let c: Vec<f64> = p.columns().into_iter().map(|col| col.sum()).collect();
        let dim = m + n - 1;
        let diag: Vec<f64> = r.iter().chain(&c[..n - 1]).map(|d| d.sqrt()).collect();
        if diag.iter().any(|&d| !(d > 0.0 && d.is_finite())) {
            return false;
        }
        let hessian = DMatrix::from_fn(dim, dim, |x, y| {
            let entry = match (x < m, y < m) {
                (true, true) => if x == y { r[x] } else { 0.0 },
                (false, false) => if x == y { c[x - m] } else { 0.0 },
                (true, false) => p[[x, y - m]],
                (false, true) => p[[y, x - m]],
            };
            entry / (diag[x] * diag[y])
        });
        let rhs = DVector::from_fn(dim, |x, _| {
            let res = if x < m { self.a[x] - r[x] } else { self.b[x - m] - c[x - m] };
            res / diag[x]
        });
        let Some(chol) = hessian.cholesky() else {
            return false;
        };
        let step = chol.solve(&rhs);
        if step.iter().any(|s| !s.is_finite()) {
            return false;
        }
        let (mut f, mut g) = (self.f.clone(), self.g.clone());
        let mut plan = Array2::zeros((m, n));
        let mut t = 1.0;
        for _ in 0..=NEWTON_HALVINGS {
            for i in 0..m {
                f[i] = self.f[i] + t * self.eps * step[i] / diag[i];
            }
            for j in 0..n - 1 {
                g[j] = self.g[j] + t * self.eps * step[m + j] / diag[m + j];
            }
            if self.plan_violation(&f, &g, &mut plan) < current {
                self.f = f;
                self.g = g;
                self.kernel = plan;
                return true;
            }
            t *= 0.5;
        }
        false
    }
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}
