//! Large-system predictions for the spectral estimator.
//!
//! All quantities use the normalized model `M = U Σ Vᵀ` with `UᵀU = m I`,
//! `VᵀV = n I`, noise entries of variance `σ²√(mn)`, each entry revealed with
//! probability `p` and aspect ratio `α = m/n`. Mode `i` is detectable iff
//! `Σ_i² > σ²/p`; with `x_i = σ²/(pΣ_i²)`:
//!
//! ```text
//! z_i   = pΣ_i · sqrt(α (x_i + α^{-1/2}) (x_i + α^{1/2}))     top singular values of N^E, over n
//! a_i²  = (1 − x_i²) / (1 + √α x_i)                          left overlap
//! b_i²  = (1 − x_i²) / (1 + x_i/√α)                          right overlap
//! edge  = σ sqrt(p √α) (1 + √α)                              z_i for undetectable modes
//! ```
//!
//! The optimal rescaling of the rank-r truncated SVD,
//! `t* = √α Σ_i Σ_i a_i b_i z_i / ‖z‖²`, follows from minimizing
//! `‖M − t X₀ X₀ᵀ N^E Y₀ Y₀ᵀ‖²_F` with the overlap limits plugged in; the
//! resulting error `1 − (Σ_i Σ_i a_i b_i z_i)² / (‖Σ‖² ‖z‖²)` reproduces
//! [`predict_rel_mse`] whenever every mode is detectable.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// Normalized signal strengths Σ_1 ≥ … ≥ Σ_r > 0.
    pub sigma_diag: Vec<f64>,
    /// Noise scale σ².
    pub sigma2: f64,
    /// Observation probability.
    pub p: f64,
    /// Aspect ratio m/n.
    pub alpha: f64,
    /// Entry bound M_max, informational only.
    pub m_max: Option<f64>,
}

impl ModelParams {
    pub fn new(sigma_diag: Vec<f64>, sigma2: f64, p: f64, alpha: f64) -> Result<Self> {
        let params = ModelParams {
            sigma_diag,
            sigma2,
            p,
            alpha,
            m_max: None,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sigma_diag.is_empty() {
            return Err(Error::invalid("at least one signal mode is required"));
        }
        if self.sigma_diag.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid("signal strengths must be positive and finite"));
        }
        if self.sigma_diag.windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::invalid("signal strengths must be nonincreasing"));
        }
        if !(self.sigma2 >= 0.0) || !self.sigma2.is_finite() {
            return Err(Error::invalid(format!("sigma2 must be >= 0, got {}", self.sigma2)));
        }
        if !(self.p > 0.0 && self.p <= 1.0) {
            return Err(Error::invalid(format!("p must lie in (0, 1], got {}", self.p)));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::invalid(format!("alpha must be > 0, got {}", self.alpha)));
        }
        Ok(())
    }

    pub fn rank(&self) -> usize {
        self.sigma_diag.len()
    }

    /// σ²/p, the detection threshold on Σ_i².
    pub fn threshold(&self) -> f64 {
        self.sigma2 / self.p
    }

    fn ratio(&self, sigma: f64) -> f64 {
        self.sigma2 / (self.p * sigma * sigma)
    }

    fn detectable(&self, sigma: f64) -> bool {
        sigma * sigma > self.threshold()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TheoryPrediction {
    pub z: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub k: usize,
    pub rel_mse: f64,
    pub bulk_edge: f64,
    /// Optimal shrinkage, absent when no mode is detectable.
    pub t_star: Option<f64>,
}

impl TheoryPrediction {
    pub fn lambda_star(&self) -> Option<f64> {
        self.t_star.map(|t| 1.0 / t - 1.0)
    }
}

/// Largest `k` with `Σ_k² > σ²/p`; ties at the threshold count as undetectable.
pub fn threshold_rank(params: &ModelParams) -> usize {
    params
        .sigma_diag
        .iter()
        .take_while(|&&s| params.detectable(s))
        .count()
}

pub fn bulk_edge(params: &ModelParams) -> f64 {
    let sa = params.alpha.sqrt();
    params.sigma2.sqrt() * (params.p * sa).sqrt() * (1.0 + sa)
}

pub fn predict_singular_values(params: &ModelParams) -> Vec<f64> {
    let edge = bulk_edge(params);
    let sa = params.alpha.sqrt();
    params
        .sigma_diag
        .iter()
        .map(|&s| {
            if params.detectable(s) {
                let x = params.ratio(s);
                params.p * s * (params.alpha * (x + 1.0 / sa) * (x + sa)).sqrt()
            } else {
                edge
            }
        })
        .collect()
}

pub fn predict_overlaps(params: &ModelParams) -> (Vec<f64>, Vec<f64>) {
    let sa = params.alpha.sqrt();
    params
        .sigma_diag
        .iter()
        .map(|&s| {
            if params.detectable(s) {
                let x = params.ratio(s);
                let common = 1.0 - x * x;
                ((common / (1.0 + sa * x)).sqrt(), (common / (1.0 + x / sa)).sqrt())
            } else {
                (0.0, 0.0)
            }
        })
        .unzip()
}

/// Asymptotic ‖M̂ − M‖²/‖M‖² of the optimally shrunk spectral estimate.
pub fn predict_rel_mse(params: &ModelParams) -> f64 {
    let sa = params.alpha.sqrt();
    let mut gain = 0.0;
    let mut spread = 0.0;
    let mut energy = 0.0;
    for &s in &params.sigma_diag {
        let s2 = s * s;
        let x = params.ratio(s);
        gain += s2 * (1.0 - x * x).max(0.0);
        spread += s2 * (1.0 + sa * x) * (1.0 + x / sa);
        energy += s2;
    }
    if spread == 0.0 || !spread.is_finite() {
        return 1.0;
    }
    (1.0 - gain * gain / (energy * spread)).clamp(0.0, 1.0)
}

/// The same error assembled from the predicted `z`, `a`, `b`.
pub fn composed_rel_mse(params: &ModelParams) -> f64 {
    let z = predict_singular_values(params);
    let (a, b) = predict_overlaps(params);
    let signal: f64 = (0..params.rank())
        .map(|i| params.sigma_diag[i] * a[i] * b[i] * z[i])
        .sum();
    let energy: f64 = params.sigma_diag.iter().map(|s| s * s).sum();
    let z2: f64 = z.iter().map(|v| v * v).sum();
    if z2 == 0.0 {
        return 0.0;
    }
    1.0 - signal * signal / (energy * z2)
}

/// Support `[c₋², c₊²]` of the Marchenko–Pastur density, `c± = 1 ± α^{-1/2}`.
pub fn mp_support(alpha: f64) -> Result<(f64, f64)> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::invalid(format!("alpha must be > 0, got {alpha}")));
    }
    let c = alpha.powf(-0.5);
    Ok(((1.0 - c).powi(2), (1.0 + c).powi(2)))
}

/// `α √((λ − c₋²)(c₊² − λ)) / (2πλ)` on the support, zero outside.
pub fn mp_density(lambda: f64, alpha: f64) -> Result<f64> {
    let (lo, hi) = mp_support(alpha)?;
    if lambda <= lo || lambda >= hi || lambda <= 0.0 {
        return Ok(0.0);
    }
    Ok(alpha * ((lambda - lo) * (hi - lambda)).sqrt() / (2.0 * std::f64::consts::PI * lambda))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShrinkageRule {
    pub t_star: f64,
    pub lambda_star: f64,
}

/// Optimal shrinkage of the rank-r spectral estimate.
pub fn theory_lambda(params: &ModelParams) -> Result<ShrinkageRule> {
    theory_lambda_for_rank(params, params.rank())
}

/// Optimal shrinkage when the estimator keeps `rank_used` components.
/// Components beyond the model rank sit at the bulk edge with zero overlap.
pub fn theory_lambda_for_rank(params: &ModelParams, rank_used: usize) -> Result<ShrinkageRule> {
    params.validate()?;
    if rank_used == 0 {
        return Err(Error::invalid("rank_used must be at least 1"));
    }
    let k = threshold_rank(params).min(rank_used);
    if k == 0 {
        return Err(Error::BelowThreshold);
    }
    let z = predict_singular_values(params);
    let (a, b) = predict_overlaps(params);
    let edge = bulk_edge(params);
    let signal: f64 = (0..k)
        .map(|i| params.sigma_diag[i] * a[i] * b[i] * z[i])
        .sum();
    let z2: f64 = (0..rank_used)
        .map(|i| z.get(i).copied().unwrap_or(edge).powi(2))
        .sum();
    let t_star = params.alpha.sqrt() * signal / z2;
    Ok(ShrinkageRule {
        t_star,
        lambda_star: 1.0 / t_star - 1.0,
    })
}

pub fn predict(params: &ModelParams) -> Result<TheoryPrediction> {
    params.validate()?;
    let (a, b) = predict_overlaps(params);
    let t_star = match theory_lambda(params) {
        Ok(rule) => Some(rule.t_star),
        Err(Error::BelowThreshold) => None,
        Err(e) => return Err(e),
    };
    Ok(TheoryPrediction {
        z: predict_singular_values(params),
        a,
        b,
        k: threshold_rank(params),
        rel_mse: predict_rel_mse(params),
        bulk_edge: bulk_edge(params),
        t_star,
    })
}
