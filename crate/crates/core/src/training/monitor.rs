//! Representation-collapse diagnostics.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{covariance_term, EmbeddingMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollapseDiagnostics {
    /// Mean over dimensions of the unbiased per-dimension standard deviation.
    pub mean_std: f64,
    /// Sum of squared off-diagonal covariances divided by `d`.
    pub off_diagonal: f64,
    /// `exp` of the entropy of the normalized singular values.
    pub effective_rank: f64,
}

/// Diagnostics of an `n × d` batch, `n >= 2`.
///
/// Singular values come from the uncentered matrix; an all-zero matrix has
/// effective rank 0.
pub fn collapse_monitor(z: &EmbeddingMatrix) -> Result<CollapseDiagnostics> {
    let (n, d) = z.dim();
    if n < 2 || d == 0 {
        return Err(Error::Contract(format!("collapse monitor needs n >= 2 rows, got {n} x {d}")));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Contract("collapse monitor got non-finite embeddings".into()));
    }
    let mean_std = z.std_axis(ndarray::Axis(0), 1.0).mean().unwrap_or(0.0);
    let off_diagonal = covariance_term(z)?;
    let m = DMatrix::from_row_iterator(n, d, z.iter().copied());
    let sv = m.singular_values();
    let sum: f64 = sv.iter().sum();
    let effective_rank = if sum > 0.0 {
        let h: f64 = sv
            .iter()
            .filter(|&&s| s > 0.0)
            .map(|&s| {
                let p = s / sum;
                -p * p.ln()
            })
            .sum();
        h.exp()
    } else {
        0.0
    };
    Ok(CollapseDiagnostics {
        mean_std,
        off_diagonal,
        effective_rank,
    })
}
