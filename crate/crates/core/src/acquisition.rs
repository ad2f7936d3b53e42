//! Expected improvement for minimisation, and argmax selection over a finite
//! candidate list.

use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::gp::GpPosterior;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn normal_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Expected decrease of a Gaussian `N(mean, variance)` below `best`.
pub fn expected_improvement(mean: f64, variance: f64, best: f64) -> f64 {
    let sigma = variance.max(0.0).sqrt();
    if sigma == 0.0 {
        return (best - mean).max(0.0);
    }
    let gamma = (best - mean) / sigma;
    (sigma * (gamma * normal_cdf(gamma) + normal_pdf(gamma))).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AcquisitionScore {
    pub action: usize,
    pub ei: f64,
}

/// Picks the candidate with the largest EI. Ties go to the lowest action id.
pub fn select_action(candidates: &[(usize, GpPosterior)], best: f64) -> Result<AcquisitionScore> {
    let scores = candidates.iter().map(|(id, p)| AcquisitionScore {
        action: *id,
        ei: expected_improvement(p.mean, p.variance, best),
    });
    select_max(scores)
}

/// Argmax over precomputed scores with the same tie rule as [`select_action`].
pub fn select_max(scores: impl IntoIterator<Item = AcquisitionScore>) -> Result<AcquisitionScore> {
    let mut best: Option<AcquisitionScore> = None;
    for s in scores {
        best = match best {
            None => Some(s),
            Some(b) if s.ei > b.ei || (s.ei == b.ei && s.action < b.action) => Some(s),
            keep => keep,
        };
    }
    best.ok_or(Error::NoCandidates)
}
