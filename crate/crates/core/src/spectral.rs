//! Spectral step of OptSpace and the Soft-Impute baseline.
//!
//! For orthonormal frames `X`, `Y` the surrogate cost
//! `½‖P_E(N) − X S Yᵀ‖² + ½λ‖S‖²` is minimized by `S = Xᵀ P_E(N) Y / (1 + λ)`,
//! and the best frames are the top singular frames of `P_E(N)` whatever the
//! value of `λ > −1`. The estimator is therefore a truncated SVD followed by a
//! uniform rescaling `t = 1/(1 + λ)` of the singular values. Values `t > 1`
//! (negative `λ`) undo the `p`-fold attenuation of partially observed data.

use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::{canonicalize_signs, qf, random_frame};
use crate::obsmat::ObservedMatrix;
use crate::{kv, mtx};

/// Leading singular triplets of a sparse matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdTriple {
    /// m x r, orthonormal columns.
    pub left: DMatrix<f64>,
    /// Nonincreasing, nonnegative.
    pub singular: Vec<f64>,
    /// n x r, orthonormal columns.
    pub right: DMatrix<f64>,
    /// Subspace iterations used.
    pub iterations: usize,
    /// max_k ‖AᵀA v_k − σ_k² v_k‖ / σ₁², bounded through ‖A v_k − σ_k u_k‖.
    pub residual: f64,
}

impl SvdTriple {
    pub fn rank(&self) -> usize {
        self.singular.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SvdOptions {
    /// Relative residual target, see [`SvdTriple::residual`].
    pub tol: f64,
    pub max_iters: usize,
    /// Seed of the random starting block.
    pub seed: u64,
    /// Extra block columns beyond the requested rank.
    pub oversample: usize,
}

impl Default for SvdOptions {
    fn default() -> Self {
        SvdOptions {
            tol: 1e-10,
            max_iters: 5000,
            seed: 0,
            oversample: 10,
        }
    }
}

/// Top-`rank` singular triplets of `P_E(N)` by block subspace iteration with
/// Rayleigh–Ritz extraction.
///
/// Fails with [`Error::SvdNotConverged`] (carrying the best iterate) when the
/// residual target is not met within `max_iters`.
pub fn truncated_svd(obs: &ObservedMatrix, rank: usize, opts: &SvdOptions) -> Result<SvdTriple> {
    let (m, n) = obs.shape();
    if rank == 0 || rank > m.min(n) {
        return Err(Error::invalid(format!(
            "rank {rank} must lie in 1..={} for a {m}x{n} matrix",
            m.min(n)
        )));
    }
    if obs.iter().all(|e| e.value == 0.0) {
        return Err(Error::invalid("truncated SVD of a zero matrix"));
    }
    let block = (rank + opts.oversample).min(m.min(n));
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut basis = random_frame(&mut rng, n, block);

    let mut current: Option<SvdTriple> = None;
    let mut best: Option<SvdTriple> = None;
    for iter in 1..=opts.max_iters.max(1) {
        let image = obs.mul_dense(&basis);

        // Residual of the Ritz triple from the previous sweep; `image` holds A v_k.
        if let Some(mut ritz) = current.take() {
            let top = ritz.singular[0];
            let worst = (0..rank)
                .map(|k| {
                    (image.column(k) - ritz.left.column(k) * ritz.singular[k]).norm()
                })
                .fold(0.0, f64::max);
            ritz.residual = if top > 0.0 { worst / top } else { 0.0 };
            if ritz.residual <= opts.tol {
                return Ok(finish(ritz, rank));
            }
            if best.as_ref().is_none_or(|b| ritz.residual < b.residual) {
                best = Some(ritz);
            }
        }

        let left_basis = qf(&image);
        let back = obs.tr_mul_dense(&left_basis);
        let svd = back.svd(true, true);
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        let p = svd.u.expect("u requested");
        let q = svd.v_t.expect("v_t requested").transpose();
        let right = DMatrix::from_fn(n, block, |i, j| p[(i, order[j])]);
        let q_sorted = DMatrix::from_fn(block, block, |i, j| q[(i, order[j])]);
        let singular = order.iter().map(|&k| svd.singular_values[k]).collect();
        basis = right.clone();
        current = Some(SvdTriple {
            left: &left_basis * q_sorted,
            singular,
            right,
            iterations: iter,
            residual: f64::INFINITY,
        });
    }

    let last = current.expect("at least one sweep");
    let best = match best {
        Some(b) if b.residual.is_finite() => b,
        _ => last,
    };
    Err(Error::SvdNotConverged {
        iterations: opts.max_iters,
        residual: best.residual,
        best: Box::new(finish(best, rank)),
    })
}

fn finish(mut t: SvdTriple, rank: usize) -> SvdTriple {
    t.left = t.left.columns(0, rank).into_owned();
    t.right = t.right.columns(0, rank).into_owned();
    t.singular.truncate(rank);
    canonicalize_signs(&mut t.left, &mut t.right);
    t
}

/// The triple (X, S, Y) of the regularized cost.
#[derive(Debug, Clone, PartialEq)]
pub struct Factorization {
    pub x: DMatrix<f64>,
    pub s: DMatrix<f64>,
    pub y: DMatrix<f64>,
}

impl Factorization {
    pub fn new(x: DMatrix<f64>, s: DMatrix<f64>, y: DMatrix<f64>) -> Result<Self> {
        let r = x.ncols();
        if y.ncols() != r || s.shape() != (r, r) {
            return Err(Error::invalid(format!(
                "inconsistent factor shapes: X {:?}, S {:?}, Y {:?}",
                x.shape(),
                s.shape(),
                y.shape()
            )));
        }
        Ok(Factorization { x, s, y })
    }

    pub fn rank(&self) -> usize {
        self.x.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.x.nrows(), self.y.nrows())
    }

    /// `X S Yᵀ`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        reconstruct(self)
    }

    /// max(‖XᵀX − I‖_F, ‖YᵀY − I‖_F).
    pub fn orthonormality_error(&self) -> f64 {
        crate::linalg::orthonormality_error(&self.x)
            .max(crate::linalg::orthonormality_error(&self.y))
    }

    /// Writes `X.mtx`, `S.mtx`, `Y.mtx` and `manifest.txt` into `dir`. The
    /// manifest holds the rank, the supplied `extra` pairs and a SHA-256 of
    /// the observations the factorization was fitted to.
    pub fn save(
        &self,
        dir: impl AsRef<Path>,
        obs: &ObservedMatrix,
        extra: &[(String, String)],
    ) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        mtx::write_array(dir.join("X.mtx"), &self.x)?;
        mtx::write_array(dir.join("S.mtx"), &self.s)?;
        mtx::write_array(dir.join("Y.mtx"), &self.y)?;
        let mut pairs = vec![
            ("r".to_string(), self.rank().to_string()),
            ("m".to_string(), self.x.nrows().to_string()),
            ("n".to_string(), self.y.nrows().to_string()),
        ];
        pairs.extend(extra.iter().cloned());
        pairs.push(("input_sha256".to_string(), observation_digest(obs)));
        kv::write(dir.join("manifest.txt"), &pairs)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        Self::new(
            mtx::read_array(dir.join("X.mtx"))?,
            mtx::read_array(dir.join("S.mtx"))?,
            mtx::read_array(dir.join("Y.mtx"))?,
        )
    }
}

/// SHA-256 over the shape and the exact bits of every observed entry.
pub fn observation_digest(obs: &ObservedMatrix) -> String {
    let mut h = Sha256::new();
    h.update((obs.rows() as u64).to_le_bytes());
    h.update((obs.cols() as u64).to_le_bytes());
    for e in obs.iter() {
        h.update((e.row as u64).to_le_bytes());
        h.update((e.col as u64).to_le_bytes());
        h.update(e.value.to_bits().to_le_bytes());
    }
    hex::encode(h.finalize())
}

pub fn reconstruct(f: &Factorization) -> DMatrix<f64> {
    &f.x * &f.s * f.y.transpose()
}

/// Multiplicative factor `t = 1/(1 + λ)` applied to the singular values.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Shrinkage(f64);

impl Shrinkage {
    pub const IDENTITY: Shrinkage = Shrinkage(1.0);

    pub fn new(t: f64) -> Result<Self> {
        if !(t >= 0.0) || !t.is_finite() {
            return Err(Error::invalid(format!("shrinkage must be finite and >= 0, got {t}")));
        }
        Ok(Shrinkage(t))
    }

    pub fn from_lambda(lambda: f64) -> Result<Self> {
        if !(lambda > -1.0) {
            return Err(Error::invalid(format!("lambda must exceed -1, got {lambda}")));
        }
        Self::new(1.0 / (1.0 + lambda))
    }

    pub fn factor(self) -> f64 {
        self.0
    }

    /// `1/t − 1`; infinite for `t = 0`.
    pub fn lambda(self) -> f64 {
        1.0 / self.0 - 1.0
    }
}

/// Rank-`rank` minimizer of the surrogate cost with regularization `lambda`.
pub fn spectral_estimate(
    obs: &ObservedMatrix,
    rank: usize,
    lambda: f64,
    opts: &SvdOptions,
) -> Result<Factorization> {
    let shrink = Shrinkage::from_lambda(lambda)?;
    let svd = truncated_svd(obs, rank, opts)?;
    Ok(from_svd(&svd, shrink))
}

/// Spectral estimate from a precomputed truncated SVD.
pub fn from_svd(svd: &SvdTriple, shrink: Shrinkage) -> Factorization {
    let s = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
        svd.rank(),
        svd.singular.iter().map(|v| v * shrink.factor()),
    ));
    Factorization {
        x: svd.left.clone(),
        s,
        y: svd.right.clone(),
    }
}

/// `½‖P_E(N) − X S Yᵀ‖²_F + ½λ‖S‖²_F`, the norm taken over all m·n positions.
pub fn surrogate_cost(obs: &ObservedMatrix, f: &Factorization, lambda: f64) -> f64 {
    let xs = &f.x * &f.s;
    let cross: f64 = obs
        .iter()
        .map(|e| e.value * xs.row(e.row).dot(&f.y.row(e.col)))
        .sum();
    let gram = (xs.tr_mul(&xs)).component_mul(&f.y.tr_mul(&f.y)).sum();
    0.5 * (obs.frobenius_norm_squared() - 2.0 * cross + gram) + 0.5 * lambda * f.s.norm_squared()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftImputeOptions {
    /// Stop once ‖Z_{k+1} − Z_k‖_F / ‖Z_k‖_F falls below this.
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for SoftImputeOptions {
    fn default() -> Self {
        SoftImputeOptions {
            tol: 1e-6,
            max_iters: 500,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SoftImputeResult {
    pub completed: DMatrix<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Number of singular values surviving the final threshold.
    pub rank: usize,
}

/// Iterates `Z ← SVT_λ(P_E(N) + P_E⊥(Z))` from `Z = 0`, where `SVT_λ`
/// soft-thresholds singular values at `λ`.
pub fn soft_impute(
    obs: &ObservedMatrix,
    lambda_nn: f64,
    opts: &SoftImputeOptions,
) -> Result<SoftImputeResult> {
    if obs.is_empty() {
        return Err(Error::invalid("soft-impute needs at least one observation"));
    }
    if !(lambda_nn >= 0.0) {
        return Err(Error::invalid(format!("lambda_nn must be >= 0, got {lambda_nn}")));
    }
    let (m, n) = obs.shape();
    let mut z = DMatrix::zeros(m, n);
    let mut rank = 0;
    for iter in 1..=opts.max_iters {
        let mut filled = z.clone();
        for e in obs.iter() {
            filled[(e.row, e.col)] = e.value;
        }
        let svd = filled.svd(true, true);
        let u = svd.u.expect("u requested");
        let v_t = svd.v_t.expect("v_t requested");
        let mut next = DMatrix::zeros(m, n);
        rank = 0;
        for (k, &s) in svd.singular_values.iter().enumerate() {
            let shrunk = s - lambda_nn;
            if shrunk > 0.0 {
                rank += 1;
                next += u.column(k) * v_t.row(k) * shrunk;
            }
        }
        let delta = (&next - &z).norm();
        let base = z.norm();
        z = next;
        let stalled = if base > 0.0 { delta / base < opts.tol } else { delta == 0.0 };
        if stalled {
            return Ok(SoftImputeResult {
                completed: z,
                iterations: iter,
                converged: true,
                rank,
            });
        }
    }
    Ok(SoftImputeResult {
        completed: z,
        iterations: opts.max_iters,
        converged: false,
        rank,
    })
}
