//! The end-to-end estimator and holdout selection of its regularization.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::manifold::{descend, DescentOptions, DescentTrace};
use crate::obsmat::{split_holdout, trim_with_factor, ObservedMatrix, DEFAULT_TRIM_FACTOR};
use crate::spectral::{from_svd, truncated_svd, Factorization, Shrinkage, SvdOptions, SvdTriple};
use crate::theory::{theory_lambda_for_rank, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptSpaceOptions {
    pub trim_factor: f64,
    pub svd: SvdOptions,
    /// Descent settings; the `lambda` field is overridden by the caller's
    /// descent λ.
    pub descent: DescentOptions,
}

impl Default for OptSpaceOptions {
    fn default() -> Self {
        OptSpaceOptions {
            trim_factor: DEFAULT_TRIM_FACTOR,
            svd: SvdOptions::default(),
            descent: DescentOptions::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptSpaceOutput {
    pub factorization: Factorization,
    /// Truncated SVD of the trimmed observations.
    pub svd: SvdTriple,
    /// Spectral estimate before descent.
    pub spectral: Factorization,
    /// `None` when the descent was skipped (`max_iters = 0`).
    pub trace: Option<DescentTrace>,
    pub trimmed_entries: usize,
}

impl OptSpaceOutput {
    pub fn estimate(&self) -> DMatrix<f64> {
        self.factorization.reconstruct()
    }
}

/// Trim, spectral initialization with shrinkage `1/(1+lambda_spectral)`,
/// then descent on the regularized cost with weight `lambda_descent`.
///
/// With `opts.descent.max_iters == 0` the spectral estimate is returned as is.
pub fn run_optspace(
    obs: &ObservedMatrix,
    rank_used: usize,
    lambda_spectral: f64,
    lambda_descent: f64,
    opts: &OptSpaceOptions,
) -> Result<OptSpaceOutput> {
    let trimmed = trim_with_factor(obs, opts.trim_factor).map_err(|e| e.in_stage("trim"))?;
    if trimmed.is_empty() {
        return Err(Error::invalid("trimming removed every observation").in_stage("trim"));
    }
    let shrink = Shrinkage::from_lambda(lambda_spectral).map_err(|e| e.in_stage("spectral"))?;
    let svd = truncated_svd(&trimmed, rank_used, &opts.svd).map_err(|e| e.in_stage("spectral"))?;
    let spectral = from_svd(&svd, shrink);
    let descent = DescentOptions {
        lambda: lambda_descent,
        ..opts.descent
    };
    descent.validate().map_err(|e| e.in_stage("descent"))?;
    let (factorization, trace) = if descent.max_iters == 0 {
        (spectral.clone(), None)
    } else {
        let (f, t) = descend(&spectral, obs, &descent).map_err(|e| e.in_stage("descent"))?;
        (f, Some(t))
    };
    Ok(OptSpaceOutput {
        factorization,
        svd,
        spectral,
        trace,
        trimmed_entries: obs.len() - trimmed.len(),
    })
}

/// Descent weight that reproduces a shrinkage factor `t` of the spectral
/// step: at fixed frames the core solve scales `XᵀP_E(N)Y` by roughly
/// `1/(p̂ + λ)`, with `p̂` the observed fraction.
pub fn descent_lambda_for_shrinkage(t: f64, p_hat: f64) -> f64 {
    (1.0 / t - p_hat).max(0.0)
}

/// Candidate descent weights bracketing the theory-optimal shrinkage:
/// `λ*·{0, ¼, ½, 1, 2, 4}` plus the unregularized value 0.
///
/// Below the detection threshold the optimum is the zero estimate, so the
/// grid reaches for heavy regularization instead.
pub fn default_lambda_grid(params: &ModelParams, rank_used: usize, p_hat: f64) -> Result<Vec<f64>> {
    let base = match theory_lambda_for_rank(params, rank_used) {
        Ok(rule) => descent_lambda_for_shrinkage(rule.t_star, p_hat),
        Err(Error::BelowThreshold) => return Ok(vec![0.0, p_hat, 4.0 * p_hat, 16.0 * p_hat]),
        Err(e) => return Err(e),
    };
    let mut grid = vec![0.0];
    if base > 0.0 {
        grid.extend([0.25, 0.5, 1.0, 2.0, 4.0].iter().map(|f| f * base));
    }
    Ok(grid)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LambdaScore {
    pub lambda: f64,
    /// Mean squared error on the held-out entries; NaN when the fit failed.
    pub holdout_error: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LambdaSelection {
    pub lambda_star: f64,
    pub table: Vec<LambdaScore>,
}

/// Mean squared residual of `estimate` over the entries of `held`.
pub fn holdout_mse(held: &ObservedMatrix, estimate: &DMatrix<f64>) -> f64 {
    if held.is_empty() {
        return f64::NAN;
    }
    let sum: f64 = held
        .iter()
        .map(|e| (e.value - estimate[(e.row, e.col)]).powi(2))
        .sum();
    sum / held.len() as f64
}

/// Scores every descent weight in `grid` by fitting on a training split and
/// measuring the squared error on the held-out split. Ties go to the smaller λ.
pub fn select_lambda(
    obs: &ObservedMatrix,
    rank_used: usize,
    grid: &[f64],
    holdout_fraction: f64,
    seed: u64,
    opts: &OptSpaceOptions,
) -> Result<LambdaSelection> {
    select_by_holdout(obs, grid, holdout_fraction, seed, |train, lambda| {
        Ok(run_optspace(train, rank_used, lambda, lambda, opts)?.estimate())
    })
}

/// Holdout selection over `grid` for any estimator `fit(train, λ)`. A
/// one-value grid with `holdout_fraction = 0` is returned unscored.
pub fn select_by_holdout<F>(
    obs: &ObservedMatrix,
    grid: &[f64],
    holdout_fraction: f64,
    seed: u64,
    mut fit: F,
) -> Result<LambdaSelection>
where
    F: FnMut(&ObservedMatrix, f64) -> Result<DMatrix<f64>>,
{
    if grid.is_empty() {
        return Err(Error::invalid("lambda grid is empty"));
    }
    if grid.len() == 1 && holdout_fraction == 0.0 {
        return Ok(LambdaSelection {
            lambda_star: grid[0],
            table: vec![LambdaScore {
                lambda: grid[0],
                holdout_error: f64::NAN,
                error: None,
            }],
        });
    }
    if !(holdout_fraction > 0.0) {
        return Err(Error::invalid("selecting among several lambdas needs holdout_fraction > 0"));
    }
    let (train, held) = split_holdout(obs, holdout_fraction, seed)?;
    if held.is_empty() || train.is_empty() {
        return Err(Error::invalid("holdout split left one side empty"));
    }
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let mut table = Vec::with_capacity(sorted.len());
    let mut best: Option<(f64, f64)> = None;
    for &lambda in &sorted {
        match fit(&train, lambda) {
            Ok(estimate) => {
                let score = holdout_mse(&held, &estimate);
                if score.is_finite() && best.is_none_or(|(_, b)| score < b) {
                    best = Some((lambda, score));
                }
                table.push(LambdaScore {
                    lambda,
                    holdout_error: score,
                    error: None,
                });
            }
            Err(e) => table.push(LambdaScore {
                lambda,
                holdout_error: f64::NAN,
                error: Some(e.to_string()),
            }),
        }
    }
    match best {
        Some((lambda_star, _)) => Ok(LambdaSelection { lambda_star, table }),
        None => Err(Error::AllCandidatesFailed(
            table
                .iter()
                .map(|s| format!("{}: {}", s.lambda, s.error.as_deref().unwrap_or("non-finite score")))
                .collect::<Vec<_>>()
                .join("; "),
        )),
    }
}
