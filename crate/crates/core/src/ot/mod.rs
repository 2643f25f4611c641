//! Discrete optimal transport: measures, costs, an exact small-scale solver
//! and the entropic Sinkhorn solver.

mod csv;
mod exact;
mod measure;
mod sinkhorn;

pub use self::csv::{parse_matrix_csv, read_matrix_csv, write_matrix_csv, format_matrix_csv};
pub use exact::{exact_ot, exact_ot_with_limit, DEFAULT_ORACLE_LIMIT, EXACT_MARGINAL_TOLERANCE};
pub use measure::{
    entropy, frobenius_inner, squared_euclidean_cost, CostMatrix, DiscreteMeasure, TransportPlan,
    MASS_TOLERANCE,
};
pub use sinkhorn::{sinkhorn, SinkhornConfig};

use crate::error::Result;

/// Minimal transport cost between two measures.
///
/// Solved exactly up to [`DEFAULT_ORACLE_LIMIT`] points per side; larger
/// instances fall back to Sinkhorn with the default configuration.
pub fn wasserstein_distance(mu_s: &DiscreteMeasure, mu_t: &DiscreteMeasure, cost: &CostMatrix) -> Result<f64> {
    if mu_s.len() <= DEFAULT_ORACLE_LIMIT && mu_t.len() <= DEFAULT_ORACLE_LIMIT {
        Ok(exact_ot(mu_s, mu_t, cost)?.transport_cost)
    } else {
        Ok(sinkhorn(mu_s, mu_t, cost, &SinkhornConfig::default())?.transport_cost)
    }
}
