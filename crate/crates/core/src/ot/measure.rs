use ndarray::Array2;

use crate::error::{Error, Result};

/// Tolerance on the total mass of a probability vector.
pub const MASS_TOLERANCE: f64 = 1e-12;

/// A weighted point cloud `Σ p_i δ_{x_i}`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasure {
    weights: Vec<f64>,
    support: Vec<Vec<f64>>,
}

impl DiscreteMeasure {
    pub fn new(weights: Vec<f64>, support: Vec<Vec<f64>>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::invalid("measure has no support points"));
        }
        if weights.len() != support.len() {
            return Err(Error::invalid(format!(
                "{} weights for {} support points",
                weights.len(),
                support.len()
            )));
        }
        let dim = support[0].len();
        if support.iter().any(|x| x.len() != dim) {
            return Err(Error::invalid("support points have differing dimensions"));
        }
        validate_weights(&weights)?;
        Ok(Self { weights, support })
    }

    /// Equal mass `1/n` on each support point.
    pub fn uniform(support: Vec<Vec<f64>>) -> Result<Self> {
        let n = support.len();
        Self::new(vec![1.0 / n as f64; n], support)
    }

    /// A measure whose support points are the indices `0..n`, for when only
    /// the masses matter (the cost matrix is supplied separately).
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        let support = (0..weights.len()).map(|i| vec![i as f64]).collect();
        Self::new(weights, support)
    }

    pub fn uniform_weights(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("measure has no support points"));
        }
        Self::from_weights(vec![1.0 / n as f64; n])
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn support(&self) -> &[Vec<f64>] {
        &self.support
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

fn validate_weights(weights: &[f64]) -> Result<()> {
    if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
        return Err(Error::invalid(format!("invalid probability mass {w}")));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > MASS_TOLERANCE {
        return Err(Error::invalid(format!(
            "masses sum to {total}, expected 1"
        )));
    }
    Ok(())
}

/// Dense non-negative `n_s × n_t` cost matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix(Array2<f64>);

impl CostMatrix {
    pub fn new(entries: Array2<f64>) -> Result<Self> {
        if entries.nrows() == 0 || entries.ncols() == 0 {
            return Err(Error::invalid("cost matrix is empty"));
        }
        if let Some(c) = entries.iter().find(|c| !c.is_finite() || **c < 0.0) {
            return Err(Error::invalid(format!(
                "cost entries must be finite and non-negative, found {c}"
            )));
        }
        Ok(Self(entries))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("cost rows have differing lengths"));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let entries = Array2::from_shape_vec((rows.len(), cols), flat)
            .map_err(|e| Error::shape(e.to_string()))?;
        Self::new(entries)
    }

    pub fn entries(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn n_source(&self) -> usize {
        self.0.nrows()
    }

    pub fn n_target(&self) -> usize {
        self.0.ncols()
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.t().to_owned())
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(&self.0 * factor)
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }
}

/// A coupling between two measures together with its solve metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub coupling: Array2<f64>,
    pub source_marginal: Vec<f64>,
    pub target_marginal: Vec<f64>,
    /// `⟨coupling, C⟩_F` against the cost the plan was solved for.
    pub transport_cost: f64,
    pub iterations_used: usize,
    pub converged: bool,
}

impl TransportPlan {
    /// Largest absolute deviation of a row or column sum from its marginal.
    pub fn marginal_violation(&self) -> f64 {
        marginal_violation(&self.coupling, &self.source_marginal, &self.target_marginal)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.coupling.dim()
    }
}

pub(crate) fn marginal_violation(coupling: &Array2<f64>, a: &[f64], b: &[f64]) -> f64 {
    let rows = coupling
        .rows()
        .into_iter()
        .zip(a)
        .map(|(row, &p)| (row.sum() - p).abs());
    let cols = coupling
        .columns()
        .into_iter()
        .zip(b)
        .map(|(col, &q)| (col.sum() - q).abs());
    rows.chain(cols).fold(0.0, f64::max)
}

/// `C_ij = ‖xs_i − xt_j‖²`.
pub fn squared_euclidean_cost(xs: &[Vec<f64>], xt: &[Vec<f64>]) -> Result<CostMatrix> {
    if xs.is_empty() || xt.is_empty() {
        return Err(Error::invalid("cannot build a cost matrix from an empty point list"));
    }
    let dim = xs[0].len();
    if dim == 0 {
        return Err(Error::invalid("points must have dimension at least 1"));
    }
    for (side, pts) in [("source", xs), ("target", xt)] {
        if let Some((i, p)) = pts.iter().enumerate().find(|(_, p)| p.len() != dim) {
            return Err(Error::shape(format!(
                "{side} point {i} has dimension {}, expected {dim}",
                p.len()
            )));
        }
    }
    let mut entries = Array2::zeros((xs.len(), xt.len()));
    for (i, a) in xs.iter().enumerate() {
        for (j, b) in xt.iter().enumerate() {
            entries[[i, j]] = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        }
    }
    CostMatrix::new(entries)
}

/// `Σ_ij γ_ij C_ij`.
pub fn frobenius_inner(plan: &Array2<f64>, cost: &CostMatrix) -> Result<f64> {
    if plan.dim() != cost.entries().dim() {
        return Err(Error::shape(format!(
            "plan is {:?} but cost is {:?}",
            plan.dim(),
            cost.entries().dim()
        )));
    }
    Ok(plan.iter().zip(cost.entries().iter()).map(|(g, c)| g * c).sum())
}

/// `−Σ γ_ij log γ_ij`, with `0 log 0 = 0`.
pub fn entropy(plan: &Array2<f64>) -> Result<f64> {
    let mut h = 0.0;
    for &g in plan {
        if !(g >= 0.0) {
            return Err(Error::invalid(format!("plan entry {g} is negative or NaN")));
        }
        if g > 0.0 {
            h -= g * g.ln();
        }
    }
    Ok(h)
}
