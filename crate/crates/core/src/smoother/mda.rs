//! Inflation schedules for multiple data assimilation.

use crate::error::{invalid, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct MdaSchedule {
    alphas: Vec<f64>,
}

impl MdaSchedule {
    /// Accepts any positive factors whose inverse squares sum to one (within 1e-12).
    pub fn custom(alphas: Vec<f64>) -> Result<Self> {
        if alphas.is_empty() {
            return Err(invalid("an assimilation schedule needs at least one iteration"));
        }
        if alphas.iter().any(|a| !(*a > 0.0 && a.is_finite())) {
            return Err(invalid("inflation factors must be positive"));
        }
        let sum: f64 = alphas.iter().map(|a| 1.0 / (a * a)).sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(invalid(format!(
                "inverse squared inflation factors sum to {sum}, not 1"
            )));
        }
        Ok(Self { alphas })
    }

    pub fn n_iter(&self) -> usize {
        self.alphas.len()
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn inverse_square_sum(&self) -> f64 {
        self.alphas.iter().map(|a| 1.0 / (a * a)).sum()
    }
}

/// Constant factors `alpha_t = sqrt(n_iter)`.
pub fn mda_schedule(n_iter: usize) -> Result<MdaSchedule> {
    if n_iter == 0 {
        return Err(invalid("an assimilation schedule needs at least one iteration"));
    }
    MdaSchedule::custom(vec![(n_iter as f64).sqrt(); n_iter])
}
