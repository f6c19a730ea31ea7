//! Diagonal Gaussians: posteriors, reparameterised samples and closed-form KL.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GaussianError {
    #[error("scale must be strictly positive, got {0}")]
    NonPositiveScale(f64),
    #[error("dimension mismatch: {0} vs {1}")]
    Dimension(usize, usize),
}

/// Per-token locations and scales, both `[m, d]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianPosterior {
    pub loc: Tensor,
    pub scale: Tensor,
}

impl GaussianPosterior {
    pub fn tokens(&self) -> usize {
        self.loc.rows()
    }

    pub fn dim(&self) -> usize {
        self.loc.cols()
    }

    /// KL[q_i ‖ N(0, I)] for every token.
    pub fn kl_to_standard_normal(&self) -> Vec<f64> {
        (0..self.tokens())
            .map(|i| kl_to_standard_normal(self.loc.row(i), self.scale.row(i)))
            .collect()
    }
}

/// z = loc + scale ⊙ ε together with the ε that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSample {
    pub z: Tensor,
    pub noise: Tensor,
}

pub fn reparam_sample(post: &GaussianPosterior, noise: &Tensor) -> Result<LatentSample, GaussianError> {
    if noise.shape() != post.loc.shape() {
        return Err(GaussianError::Dimension(noise.len(), post.loc.len()));
    }
    let data = post
        .loc
        .data()
        .iter()
        .zip(post.scale.data())
        .zip(noise.data())
        .map(|((u, s), e)| u + s * e)
        .collect();
    let z = Tensor::new(post.loc.shape().to_vec(), data).expect("shape preserved");
    Ok(LatentSample { z, noise: noise.clone() })
}

/// 0.5 Σ (s² + u² − 1 − ln s²).
pub fn kl_to_standard_normal(loc: &[f64], scale: &[f64]) -> f64 {
    0.5 * loc
        .iter()
        .zip(scale)
        .map(|(u, s)| s * s + u * u - 1.0 - (s * s).ln())
        .sum::<f64>()
}

/// KL[N(q_loc, q_scale²) ‖ N(p_loc, p_scale²)] for diagonal Gaussians:
/// Σ ln(σ/r) + (r² + (l − μ)²) / (2σ²) − 1/2.
pub fn kl_diag_gaussian(
    q_loc: &[f64],
    q_scale: &[f64],
    p_loc: &[f64],
    p_scale: &[f64],
) -> Result<f64, GaussianError> {
    let d = q_loc.len();
    for len in [q_scale.len(), p_loc.len(), p_scale.len()] {
        if len != d {
            return Err(GaussianError::Dimension(len, d));
        }
    }
    if let Some(&bad) = q_scale.iter().chain(p_scale).find(|&&s| !(s > 0.0)) {
        return Err(GaussianError::NonPositiveScale(bad));
    }
    let mut total = 0.0;
    for k in 0..d {
        let (l, r, mu, sigma) = (q_loc[k], q_scale[k], p_loc[k], p_scale[k]);
        let diff = l - mu;
        total += (sigma / r).ln() + (r * r + diff * diff) / (2.0 * sigma * sigma) - 0.5;
    }
    Ok(total)
}
