//! Exact Kantorovich solver for small instances.
//!
//! A transportation simplex over spanning-tree bases (the network simplex
//! specialised to a complete bipartite graph). Pivoting uses Bland's rule:
//! the entering cell is the first row-major cell with negative reduced cost
//! and ties for the leaving cell go to the lowest row-major index, so the
//! solver cannot cycle on degenerate instances and always returns the same
//! vertex for the same input.

use std::collections::VecDeque;

use ndarray::Array2;

use super::measure::{frobenius_inner, marginal_violation, CostMatrix, DiscreteMeasure, TransportPlan};
use crate::error::{Error, Result};

pub const DEFAULT_ORACLE_LIMIT: usize = 16;

/// Marginal accuracy the exact solver guarantees.
pub const EXACT_MARGINAL_TOLERANCE: f64 = 1e-10;

const MAX_PIVOTS: usize = 100_000;

/// Solves the unregularized transport problem with the default size limit.
pub fn exact_ot(mu_s: &DiscreteMeasure, mu_t: &DiscreteMeasure, cost: &CostMatrix) -> Result<TransportPlan> {
    exact_ot_with_limit(mu_s, mu_t, cost, DEFAULT_ORACLE_LIMIT)
}

pub fn exact_ot_with_limit(
    mu_s: &DiscreteMeasure,
    mu_t: &DiscreteMeasure,
    cost: &CostMatrix,
    limit: usize,
) -> Result<TransportPlan> {
    check_shapes(mu_s, mu_t, cost)?;
    if mu_s.len() > limit || mu_t.len() > limit {
        return Err(Error::invalid(format!(
            "{}x{} instance exceeds the exact solver limit of {limit}; use sinkhorn",
            mu_s.len(),
            mu_t.len()
        )));
    }

    let (rows, a) = positive_support(mu_s.weights());
    let (cols, b) = positive_support(mu_t.weights());
    let c = cost.entries();
    let reduced = Array2::from_shape_fn((rows.len(), cols.len()), |(i, j)| c[[rows[i], cols[j]]]);

    let (flows, pivots) = TransportSimplex::new(&a, &b, reduced).solve()?;

    let mut coupling = Array2::zeros(c.dim());
    for (i, &r) in rows.iter().enumerate() {
        for (j, &k) in cols.iter().enumerate() {
            coupling[[r, k]] = flows[[i, j]].max(0.0);
        }
    }
    let violation = marginal_violation(&coupling, mu_s.weights(), mu_t.weights());
    if violation > EXACT_MARGINAL_TOLERANCE {
        return Err(Error::Numerical(format!(
            "exact solver drifted off the marginals by {violation:e}"
        )));
    }
    let transport_cost = frobenius_inner(&coupling, cost)?;
    Ok(TransportPlan {
        coupling,
        source_marginal: mu_s.weights().to_vec(),
        target_marginal: mu_t.weights().to_vec(),
        transport_cost,
        iterations_used: pivots,
        converged: true,
    })
}

pub(crate) fn check_shapes(mu_s: &DiscreteMeasure, mu_t: &DiscreteMeasure, cost: &CostMatrix) -> Result<()> {
    if cost.n_source() != mu_s.len() || cost.n_target() != mu_t.len() {
        return Err(Error::shape(format!(
            "cost is {}x{} but measures have {} and {} points",
            cost.n_source(),
            cost.n_target(),
            mu_s.len(),
            mu_t.len()
        )));
    }
    Ok(())
}

/// Indices and values of the strictly positive weights.
pub(crate) fn positive_support(weights: &[f64]) -> (Vec<usize>, Vec<f64>) {
    weights
        .iter()
        .enumerate()
        .filter(|(_, w)| **w > 0.0)
        .map(|(i, w)| (i, *w))
        .unzip()
}

struct TransportSimplex {
    m: usize,
    n: usize,
    cost: Array2<f64>,
    flow: Array2<f64>,
    basic: Array2<bool>,
    tol: f64,
}

impl TransportSimplex {
    fn new(a: &[f64], b: &[f64], cost: Array2<f64>) -> Self {
        let (m, n) = (a.len(), b.len());
        let scale = cost.iter().fold(1.0_f64, |acc, c| acc.max(c.abs()));
        let mut s = Self {
            m,
            n,
            cost,
            flow: Array2::zeros((m, n)),
            basic: Array2::from_elem((m, n), false),
            tol: 1e-12 * scale,
        };
        s.northwest_corner(a, b);
        s
    }

    /// Initial basic feasible solution with exactly `m + n − 1` basic cells.
    fn northwest_corner(&mut self, a: &[f64], b: &[f64]) {
        let mut ra = a.to_vec();
        let mut rb = b.to_vec();
        let (mut i, mut j) = (0, 0);
        loop {
            let x = ra[i].min(rb[j]);
            self.flow[[i, j]] = x;
            self.basic[[i, j]] = true;
            if i == self.m - 1 && j == self.n - 1 {
                break;
            }
            let row_done = ra[i] <= rb[j];
            if (row_done && i < self.m - 1) || j == self.n - 1 {
                rb[j] -= x;
                ra[i] = 0.0;
                i += 1;
            } else {
                ra[i] -= x;
                rb[j] = 0.0;
                j += 1;
            }
        }
    }

    fn solve(mut self) -> Result<(Array2<f64>, usize)> {
        for pivots in 0..MAX_PIVOTS {
            let (u, v) = self.potentials();
            let entering = (0..self.m)
                .flat_map(|i| (0..self.n).map(move |j| (i, j)))
                .find(|&(i, j)| !self.basic[[i, j]] && self.cost[[i, j]] - u[i] - v[j] < -self.tol);
            match entering {
                None => return Ok((self.flow, pivots)),
                Some(cell) => self.pivot(cell),
            }
        }
        Err(Error::Numerical(format!(
            "exact solver did not terminate within {MAX_PIVOTS} pivots"
        )))
    }

    /// Dual potentials with `u_0 = 0` and `u_i + v_j = C_ij` on basic cells.
    fn potentials(&self) -> (Vec<f64>, Vec<f64>) {
        let mut u = vec![f64::NAN; self.m];
        let mut v = vec![f64::NAN; self.n];
        u[0] = 0.0;
        let mut queue = VecDeque::from([Node::Row(0)]);
        while let Some(node) = queue.pop_front() {
            match node {
                Node::Row(i) => {
                    for j in 0..self.n {
                        if self.basic[[i, j]] && v[j].is_nan() {
                            v[j] = self.cost[[i, j]] - u[i];
                            queue.push_back(Node::Col(j));
                        }
                    }
                }
                Node::Col(j) => {
                    for i in 0..self.m {
                        if self.basic[[i, j]] && u[i].is_nan() {
                            u[i] = self.cost[[i, j]] - v[j];
                            queue.push_back(Node::Row(i));
                        }
                    }
                }
            }
        }
        (u, v)
    }

    /// Basic cells on the tree path from row `i` to column `j`, in order.
    fn tree_path(&self, i: usize, j: usize) -> Vec<(usize, usize)> {
        let total = self.m + self.n;
        let id = |node: Node| match node {
            Node::Row(r) => r,
            Node::Col(c) => self.m + c,
        };
        let mut parent: Vec<Option<Node>> = vec![None; total];
        let mut seen = vec![false; total];
        seen[i] = true;
        let mut queue = VecDeque::from([Node::Row(i)]);
        while let Some(node) = queue.pop_front() {
            if node == Node::Col(j) {
                break;
            }
            let next: Vec<Node> = match node {
                Node::Row(r) => (0..self.n).filter(|&c| self.basic[[r, c]]).map(Node::Col).collect(),
                Node::Col(c) => (0..self.m).filter(|&r| self.basic[[r, c]]).map(Node::Row).collect(),
            };
            for nb in next {
                if !seen[id(nb)] {
                    seen[id(nb)] = true;
                    parent[id(nb)] = Some(node);
                    queue.push_back(nb);
                }
            }
        }
        let mut path = Vec::new();
        let mut cur = Node::Col(j);
        while let Some(p) = parent[id(cur)] {
            path.push(match (p, cur) {
                (Node::Row(r), Node::Col(c)) | (Node::Col(c), Node::Row(r)) => (r, c),
                _ => unreachable!("bipartite tree"),
            });
            cur = p;
        }
        path.reverse();
        path
    }

    fn pivot(&mut self, (i, j): (usize, usize)) {
        let path = self.tree_path(i, j);
        // Path edges alternate −θ, +θ, ..., −θ starting next to row i.
        let (leave, theta) = path
            .iter()
            .step_by(2)
            .map(|&cell| (cell, self.flow[cell]))
            .fold(None, |best: Option<((usize, usize), f64)>, (cell, f)| match best {
                Some((bc, bf)) if bf < f || (bf == f && bc < cell) => Some((bc, bf)),
                _ => Some((cell, f)),
            })
            .expect("entering cell closes a cycle");
        for (k, &cell) in path.iter().enumerate() {
            if k % 2 == 0 {
                self.flow[cell] -= theta;
            } else {
                self.flow[cell] += theta;
            }
        }
        self.flow[[i, j]] = theta;
        self.basic[[i, j]] = true;
        self.basic[leave] = false;
        self.flow[leave] = 0.0;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Node {
    Row(usize),
    Col(usize),
}
