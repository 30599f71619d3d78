//! MALA with β and/or γ removed or pinned to constants.
//!
//! Removing either term breaks the sum-to-one property: without β a row sums
//! to 0, without γ it sums to `S + 1`, which grows with the magnitude of the
//! query features.

use serde::{Deserialize, Serialize};

use crate::attention::beta_gamma;
use crate::error::{Error, Result};
use crate::numerics::{matmul_transb, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum AblationMode {
    /// Unmodified MALA.
    Full,
    /// β replaced by 1: `s_ij − γ_i`.
    NoBeta,
    /// γ replaced by 0: `β_i s_ij`.
    NoGamma,
    /// Both replaced by constants shared across rows.
    Fixed { beta: f64, gamma: f64 },
}

impl AblationMode {
    pub fn name(&self) -> &'static str {
        match self {
            AblationMode::Full => "full",
            AblationMode::NoBeta => "no_beta",
            AblationMode::NoGamma => "no_gamma",
            AblationMode::Fixed { .. } => "fixed",
        }
    }
}

/// Score matrix of the ablated mechanism.
pub fn ablated_scores(phi_q: &Matrix, phi_k: &Matrix, mode: AblationMode) -> Result<Matrix> {
    if phi_q.cols() != phi_k.cols() || phi_k.rows() == 0 {
        return Err(Error::Shape {
            op: "ablated_scores",
            lhs: phi_q.shape(),
            rhs: phi_k.shape(),
        });
    }
    if let AblationMode::Fixed { beta, gamma } = mode {
        if !beta.is_finite() || !gamma.is_finite() {
            return Err(Error::Domain(format!(
                "fixed β/γ must be finite, got {beta}/{gamma}"
            )));
        }
    }
    let n = phi_k.rows();
    let mut scores = matmul_transb(phi_q, phi_k)?;
    for i in 0..scores.rows() {
        let row = scores.row_mut(i);
        let s: f64 = row.iter().sum();
        let (beta, gamma) = match mode {
            AblationMode::Fixed { beta, gamma } => (beta, gamma),
            _ => {
                let (b, g) = beta_gamma(s, n, i)?;
                match mode {
                    AblationMode::NoBeta => (1.0, g),
                    AblationMode::NoGamma => (b, 0.0),
                    _ => (b, g),
                }
            }
        };
        row.iter_mut().for_each(|x| *x = beta * *x - gamma);
    }
    scores.check_finite("ablated_scores")?;
    Ok(scores)
}

/// Per-row statistics of an ablated score matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RowStats {
    pub row_sum: f64,
    /// `|row_sum − 1|`.
    pub deviation: f64,
    pub max_abs_score: f64,
    pub mean_abs_score: f64,
}

pub fn row_stats(scores: &Matrix) -> Vec<RowStats> {
    scores
        .row_iter()
        .map(|r| {
            let row_sum: f64 = r.iter().sum();
            let abs = r.iter().map(|x| x.abs());
            RowStats {
                row_sum,
                deviation: (row_sum - 1.0).abs(),
                max_abs_score: abs.clone().fold(0.0, f64::max),
                mean_abs_score: abs.sum::<f64>() / r.len() as f64,
            }
        })
        .collect()
}
