//! Synthetic instances and the error metrics used to score completions.
//!
//! Two generators are provided. [`generate`] follows the usual benchmark
//! recipe: `M = Ū V̄ᵀ` with i.i.d. standard normal factors. [`generate_spiked`]
//! plants prescribed normalized strengths `Σ` on Haar-random frames, which is
//! what the asymptotic predictions are stated for. In both, the noise has
//! i.i.d. `N(0, σ²√(mn))` entries and every entry is revealed independently
//! with probability `p` unless a fixed-size mask is requested.
//!
//! Randomness comes from one ChaCha8 generator per instance seed, split into
//! independent streams: stream 0 draws the left factor, 1 the right factor,
//! 2 the noise and 3 the mask.

use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{gaussian_matrix, qf, random_frame};
use crate::mtx;
use crate::obsmat::{Entry, ObservedMatrix};
use crate::theory::ModelParams;

const STREAM_LEFT: u64 = 0;
const STREAM_RIGHT: u64 = 1;
const STREAM_NOISE: u64 = 2;
const STREAM_MASK: u64 = 3;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MaskModel {
    /// Each entry revealed independently with probability `p`.
    #[default]
    Bernoulli,
    /// Exactly `round(p·m·n)` entries revealed, uniformly at random.
    FixedSize,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SynthOptions {
    pub mask: MaskModel,
}

#[derive(Debug, Clone)]
pub struct SynthInstance {
    /// Ground truth `M`.
    pub truth: DMatrix<f64>,
    /// Noise `W`.
    pub noise: DMatrix<f64>,
    /// `P_E(M + W)`.
    pub observed: ObservedMatrix,
    /// Normalized spectral description of the realized `M`.
    pub params: ModelParams,
    /// Orthonormal left singular frame of `M` (m x r).
    pub left_frame: DMatrix<f64>,
    /// Orthonormal right singular frame of `M` (n x r).
    pub right_frame: DMatrix<f64>,
    pub seed: u64,
}

impl SynthInstance {
    pub fn rows(&self) -> usize {
        self.truth.nrows()
    }

    pub fn cols(&self) -> usize {
        self.truth.ncols()
    }

    pub fn rank(&self) -> usize {
        self.params.rank()
    }

    /// `sqrt(Var(M_ij) / Var(W_ij))` using the model variances.
    pub fn snr(&self) -> f64 {
        let energy: f64 = self.params.sigma_diag.iter().map(|s| s * s).sum();
        let noise_var = self.params.sigma2 * (self.rows() as f64 * self.cols() as f64).sqrt();
        (energy / noise_var).sqrt()
    }

    /// `M + W` at every position.
    pub fn full_noisy(&self) -> DMatrix<f64> {
        &self.truth + &self.noise
    }

    /// Writes `truth.mtx`, `noise.mtx`, `observed.mtx` and `meta.txt` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        mtx::write_array(dir.join("truth.mtx"), &self.truth)?;
        mtx::write_array(dir.join("noise.mtx"), &self.noise)?;
        mtx::write_coordinate(dir.join("observed.mtx"), &self.observed)?;
        let sigma = self
            .params
            .sigma_diag
            .iter()
            .map(f64::to_string)
            .collect::<Vec<_>>()
            .join(",");
        let meta = [
            ("m", self.rows().to_string()),
            ("n", self.cols().to_string()),
            ("r", self.rank().to_string()),
            ("sigma2", self.params.sigma2.to_string()),
            ("p", self.params.p.to_string()),
            ("seed", self.seed.to_string()),
            ("snr", self.snr().to_string()),
            ("alpha", self.params.alpha.to_string()),
            ("sigma_diag", sigma),
            ("observed", self.observed.len().to_string()),
        ];
        let pairs: Vec<(String, String)> =
            meta.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
        crate::kv::write(dir.join("meta.txt"), &pairs)
    }
}

fn check_shape(m: usize, n: usize, r: usize, sigma2: f64, p: f64) -> Result<()> {
    if m == 0 || n == 0 || r == 0 {
        return Err(Error::invalid("m, n and r must be at least 1"));
    }
    if r > m.min(n) {
        return Err(Error::invalid(format!("rank {r} exceeds min({m}, {n})")));
    }
    if !(sigma2 >= 0.0) || !sigma2.is_finite() {
        return Err(Error::invalid(format!("sigma2 must be >= 0, got {sigma2}")));
    }
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::invalid(format!("p must lie in (0, 1], got {p}")));
    }
    Ok(())
}

fn draw_noise(m: usize, n: usize, sigma2: f64, seed: u64) -> DMatrix<f64> {
    let sd = (sigma2 * (m as f64 * n as f64).sqrt()).sqrt();
    let mut rng = stream(seed, STREAM_NOISE);
    DMatrix::from_fn(m, n, |_, _| sd * rng.sample::<f64, _>(StandardNormal))
}

fn draw_mask(m: usize, n: usize, p: f64, seed: u64, model: MaskModel) -> Vec<(usize, usize)> {
    let mut rng = stream(seed, STREAM_MASK);
    match model {
        MaskModel::Bernoulli => {
            let mut cells = Vec::with_capacity((p * (m * n) as f64 * 1.1) as usize);
            for i in 0..m {
                for j in 0..n {
                    if p >= 1.0 || rng.gen::<f64>() < p {
                        cells.push((i, j));
                    }
                }
            }
            cells
        }
        MaskModel::FixedSize => {
            let count = ((p * (m * n) as f64).round() as usize).min(m * n);
            let mut cells: Vec<(usize, usize)> = sample(&mut rng, m * n, count)
                .into_iter()
                .map(|k| (k / n, k % n))
                .collect();
            cells.sort_unstable();
            cells
        }
    }
}

fn observe(truth: &DMatrix<f64>, noise: &DMatrix<f64>, cells: &[(usize, usize)]) -> ObservedMatrix {
    let entries = cells
        .iter()
        .map(|&(i, j)| Entry::new(i, j, truth[(i, j)] + noise[(i, j)]))
        .collect();
    ObservedMatrix::new(truth.nrows(), truth.ncols(), entries)
        .expect("mask cells are unique and in range")
}

/// Benchmark recipe with Bernoulli(p) observations.
pub fn generate(m: usize, n: usize, r: usize, sigma2: f64, p: f64, seed: u64) -> Result<SynthInstance> {
    generate_with(m, n, r, sigma2, p, seed, SynthOptions::default())
}

pub fn generate_with(
    m: usize,
    n: usize,
    r: usize,
    sigma2: f64,
    p: f64,
    seed: u64,
    opts: SynthOptions,
) -> Result<SynthInstance> {
    check_shape(m, n, r, sigma2, p)?;
    let left = gaussian_matrix(&mut stream(seed, STREAM_LEFT), m, r);
    let right = gaussian_matrix(&mut stream(seed, STREAM_RIGHT), n, r);
    let truth = &left * right.transpose();

    // SVD of M through the thin QR factors: M = Q₁ (R₁ R₂ᵀ) Q₂ᵀ.
    let (q1, q2) = (qf(&left), qf(&right));
    let core = q1.tr_mul(&left) * q2.tr_mul(&right).transpose();
    let svd = core.svd(true, true);
    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let u_core = svd.u.expect("u requested");
    let v_core = svd.v_t.expect("v_t requested").transpose();
    let scale = (m as f64 * n as f64).sqrt();
    let sigma_diag: Vec<f64> = order.iter().map(|&k| svd.singular_values[k] / scale).collect();
    let pick = |mat: &DMatrix<f64>| DMatrix::from_fn(r, r, |i, j| mat[(i, order[j])]);
    let left_frame = &q1 * pick(&u_core);
    let right_frame = &q2 * pick(&v_core);

    let params = ModelParams::new(sigma_diag, sigma2, p, m as f64 / n as f64)?;
    let noise = draw_noise(m, n, sigma2, seed);
    let observed = observe(&truth, &noise, &draw_mask(m, n, p, seed, opts.mask));
    Ok(SynthInstance {
        truth,
        noise,
        observed,
        params,
        left_frame,
        right_frame,
        seed,
    })
}

/// `M = √(mn) U diag(Σ) Vᵀ` on Haar-random orthonormal frames.
pub fn generate_spiked(
    m: usize,
    n: usize,
    sigma_diag: &[f64],
    sigma2: f64,
    p: f64,
    seed: u64,
) -> Result<SynthInstance> {
    generate_spiked_with(m, n, sigma_diag, sigma2, p, seed, SynthOptions::default())
}

pub fn generate_spiked_with(
    m: usize,
    n: usize,
    sigma_diag: &[f64],
    sigma2: f64,
    p: f64,
    seed: u64,
    opts: SynthOptions,
) -> Result<SynthInstance> {
    let r = sigma_diag.len();
    check_shape(m, n, r, sigma2, p)?;
    let params = ModelParams::new(sigma_diag.to_vec(), sigma2, p, m as f64 / n as f64)?;
    let left_frame = random_frame(&mut stream(seed, STREAM_LEFT), m, r);
    let right_frame = random_frame(&mut stream(seed, STREAM_RIGHT), n, r);
    let scale = (m as f64 * n as f64).sqrt();
    let mut scaled = left_frame.clone();
    for (k, s) in sigma_diag.iter().enumerate() {
        scaled.column_mut(k).scale_mut(scale * s);
    }
    let truth = scaled * right_frame.transpose();
    let noise = draw_noise(m, n, sigma2, seed);
    let observed = observe(&truth, &noise, &draw_mask(m, n, p, seed, opts.mask));
    Ok(SynthInstance {
        truth,
        noise,
        observed,
        params,
        left_frame,
        right_frame,
        seed,
    })
}

/// Noise scale giving `SNR = sqrt(Var(M_ij)/Var(W_ij))` when `Var(M_ij) = r`.
pub fn snr_to_sigma2(snr: f64, r: usize, m: usize, n: usize) -> Result<f64> {
    if !(snr > 0.0) {
        return Err(Error::invalid(format!("snr must be positive, got {snr}")));
    }
    Ok(r as f64 / (snr * snr * (m as f64 * n as f64).sqrt()))
}

fn same_shape(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension {
            expected: a.shape(),
            found: b.shape(),
        });
    }
    Ok(())
}

/// `‖P_E⊥(M − M̂)‖² / ‖P_E⊥(M)‖²` over the unobserved positions.
pub fn test_error(truth: &DMatrix<f64>, estimate: &DMatrix<f64>, mask: &ObservedMatrix) -> Result<f64> {
    same_shape(truth, estimate)?;
    if mask.shape() != truth.shape() {
        return Err(Error::Dimension {
            expected: truth.shape(),
            found: mask.shape(),
        });
    }
    if mask.len() == truth.len() {
        return Err(Error::ZeroDenominator("unobserved complement"));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    let mut entries = mask.entries().iter().peekable();
    for i in 0..truth.nrows() {
        for j in 0..truth.ncols() {
            if let Some(e) = entries.peek() {
                if e.row == i && e.col == j {
                    entries.next();
                    continue;
                }
            }
            let d = truth[(i, j)] - estimate[(i, j)];
            num += d * d;
            den += truth[(i, j)] * truth[(i, j)];
        }
    }
    if den == 0.0 {
        return Err(Error::ZeroDenominator("truth on the unobserved positions"));
    }
    Ok(num / den)
}

/// `‖P_E(N − M̂)‖² / ‖P_E(N)‖²` over the observed positions.
pub fn train_error(observed: &ObservedMatrix, estimate: &DMatrix<f64>) -> Result<f64> {
    if observed.shape() != estimate.shape() {
        return Err(Error::Dimension {
            expected: observed.shape(),
            found: estimate.shape(),
        });
    }
    let num: f64 = observed
        .iter()
        .map(|e| (e.value - estimate[(e.row, e.col)]).powi(2))
        .sum();
    let den = observed.frobenius_norm_squared();
    if den == 0.0 {
        return Err(Error::ZeroDenominator("observed values"));
    }
    Ok(num / den)
}

/// `‖M̂ − M‖² / ‖M‖²`.
pub fn rel_fro_error(truth: &DMatrix<f64>, estimate: &DMatrix<f64>) -> Result<f64> {
    same_shape(truth, estimate)?;
    let den = truth.norm_squared();
    if den == 0.0 {
        return Err(Error::ZeroDenominator("truth"));
    }
    Ok((truth - estimate).norm_squared() / den)
}
