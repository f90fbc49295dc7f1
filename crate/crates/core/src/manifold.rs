//! Descent on the regularized cost
//! `F(X, Y; S) = ½‖P_E(N − X S Yᵀ)‖²_F + ½λ‖S‖²_F`
//! over pairs of orthonormal frames.
//!
//! Each outer iteration first solves exactly for the core `S` with the frames
//! fixed, then takes an Armijo-backtracked gradient step on the Stiefel
//! manifolds of `X` and `Y` (embedded metric, QR retraction). The line search
//! keeps `S` fixed; re-solving for `S` afterwards can only lower the cost, so
//! the recorded cost sequence is nonincreasing.

use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::{gemm, qf, sym, Strided};
use crate::obsmat::ObservedMatrix;
use crate::spectral::Factorization;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StepRule {
    /// First trial step is `initial_step`, later trials double the last
    /// accepted step.
    Backtracking,
    /// Trial step from the Barzilai–Borwein quotient of successive iterates
    /// and gradients, still subject to the Armijo test.
    #[default]
    BarzilaiBorwein,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DescentOptions {
    /// Regularization weight λ ≥ 0 of the cost.
    pub lambda: f64,
    pub max_iters: usize,
    /// Absolute gradient-norm threshold; `None` means `1e-7·‖P_E(N)‖_F`.
    pub grad_tol: Option<f64>,
    /// Stop when the relative cost decrease of an iteration drops below this.
    pub cost_rel_tol: f64,
    pub armijo_c: f64,
    pub backtrack_factor: f64,
    pub initial_step: f64,
    pub step_rule: StepRule,
}

impl Default for DescentOptions {
    fn default() -> Self {
        DescentOptions {
            lambda: 0.0,
            max_iters: 500,
            grad_tol: None,
            cost_rel_tol: 1e-9,
            armijo_c: 1e-4,
            backtrack_factor: 0.5,
            initial_step: 1.0,
            step_rule: StepRule::default(),
        }
    }
}

impl DescentOptions {
    pub fn with_lambda(lambda: f64) -> Self {
        DescentOptions {
            lambda,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::invalid(format!("descent lambda must be >= 0, got {}", self.lambda)));
        }
        if let Some(t) = self.grad_tol {
            if !(t >= 0.0) {
                return Err(Error::invalid(format!("grad_tol must be >= 0, got {t}")));
            }
        }
        if !(self.cost_rel_tol >= 0.0) {
            return Err(Error::invalid("cost_rel_tol must be >= 0"));
        }
        if !(self.armijo_c > 0.0 && self.armijo_c < 1.0) {
            return Err(Error::invalid(format!("armijo_c must lie in (0, 1), got {}", self.armijo_c)));
        }
        if !(self.backtrack_factor > 0.0 && self.backtrack_factor < 1.0) {
            return Err(Error::invalid(format!(
                "backtrack_factor must lie in (0, 1), got {}",
                self.backtrack_factor
            )));
        }
        if !(self.initial_step > 0.0) || !self.initial_step.is_finite() {
            return Err(Error::invalid("initial_step must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    GradientTolerance,
    CostStalled,
    MaxIterations,
    LineSearchFailed,
}

impl Termination {
    pub fn as_str(self) -> &'static str {
        match self {
            Termination::GradientTolerance => "gradient_tolerance",
            Termination::CostStalled => "cost_stalled",
            Termination::MaxIterations => "max_iterations",
            Termination::LineSearchFailed => "line_search_failed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iter: usize,
    pub cost: f64,
    pub grad_norm: f64,
    /// Step that produced this iterate; zero for the starting point.
    pub step: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DescentTrace {
    pub records: Vec<IterationRecord>,
    pub termination: Termination,
}

impl DescentTrace {
    pub fn final_cost(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.cost)
    }

    pub fn iterations(&self) -> usize {
        self.records.last().map_or(0, |r| r.iter)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "iter,cost,grad_norm,step")?;
        for r in &self.records {
            writeln!(out, "{},{:.16e},{:.16e},{:.16e}", r.iter, r.cost, r.grad_norm, r.step)?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv(&mut f)?;
        f.flush()?;
        Ok(())
    }
}

/// Tangent vector on the product of the two Stiefel manifolds.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
}

impl Gradient {
    pub fn norm_squared(&self) -> f64 {
        self.x.norm_squared() + self.y.norm_squared()
    }

    pub fn norm(&self) -> f64 {
        self.norm_squared().sqrt()
    }
}

fn check_frames(x: &DMatrix<f64>, y: &DMatrix<f64>, obs: &ObservedMatrix) -> Result<()> {
    if x.nrows() != obs.rows() || y.nrows() != obs.cols() || x.ncols() != y.ncols() {
        return Err(Error::invalid(format!(
            "frames {:?} and {:?} do not fit a {}x{} observation matrix",
            x.shape(),
            y.shape(),
            obs.rows(),
            obs.cols()
        )));
    }
    Ok(())
}

/// Row-blocked Gram matrices `G_i = Σ_{j ∈ E_i} y_j y_jᵀ` of the observed
/// pattern; the normal operator of the core problem is
/// `S ↦ Σ_i x_i (x_iᵀ S G_i) + λ S`.
struct CoreOperator<'a> {
    x: &'a DMatrix<f64>,
    /// `G_i` occupies columns `i·r .. (i+1)·r`.
    grams: DMatrix<f64>,
    lambda: f64,
}

impl<'a> CoreOperator<'a> {
    fn new(x: &'a DMatrix<f64>, y: &DMatrix<f64>, obs: &ObservedMatrix, lambda: f64) -> Self {
        let r = y.ncols();
        let entries = obs.entries();
        let yt = y.transpose();
        let ys = yt.as_slice();
        let mut grams = DMatrix::zeros(r, r * obs.rows());
        let mut block: Vec<f64> = Vec::new();
        for (i, range) in obs.row_ranges().into_iter().enumerate() {
            let deg = range.len();
            if deg == 0 || r == 0 {
                continue;
            }
            // Columns of `block` are the observed rows y_j; G_i = block·blockᵀ.
            block.clear();
            for e in &entries[range] {
                block.extend_from_slice(&ys[e.col * r..(e.col + 1) * r]);
            }
            let g = &mut grams.as_mut_slice()[i * r * r..(i + 1) * r * r];
            let rs = r as isize;
            // SAFETY: `block` holds r×deg and `g` r×r column-major values,
            // matching the dimensions and strides passed.
            unsafe {
                matrixmultiply::dgemm(
                    r,
                    deg,
                    r,
                    1.0,
                    block.as_ptr(),
                    1,
                    rs,
                    block.as_ptr(),
                    rs,
                    1,
                    0.0,
                    g.as_mut_ptr(),
                    1,
                    rs,
                );
            }
        }
        CoreOperator {
            x,
            grams,
            lambda,
        }
    }

    fn apply(&self, s: &DMatrix<f64>) -> DMatrix<f64> {
        let r = s.nrows();
        let x = Strided::col_major(self.x);
        // Column i of `a` is (x_iᵀ S)ᵀ and column i of `t` is G_i times it.
        let a = gemm(Strided::col_major(s).t(), x.t());
        let mut t = DMatrix::zeros(r, a.ncols());
        let grams = self.grams.as_slice();
        for (i, (ti, ai)) in t
            .as_mut_slice()
            .chunks_exact_mut(r)
            .zip(a.as_slice().chunks_exact(r))
            .enumerate()
        {
            let g = &grams[i * r * r..(i + 1) * r * r];
            for (gc, &w) in g.chunks_exact(r).zip(ai) {
                for (o, v) in ti.iter_mut().zip(gc) {
                    *o += w * v;
                }
            }
        }
        let mut out = gemm(x.t(), Strided::col_major(&t).t());
        axpby(&mut out, self.lambda, s, 1.0);
        out
    }

    /// Dense r²×r² matrix with index `a·r + b` for entry `S_ab`.
    fn assemble(&self) -> DMatrix<f64> {
        let r = self.x.ncols();
        let mut k = DMatrix::zeros(r * r, r * r);
        for i in 0..self.x.nrows() {
            let g = self.grams.columns(i * r, r);
            for a in 0..r {
                for c in 0..r {
                    let w = self.x[(i, a)] * self.x[(i, c)];
                    if w == 0.0 {
                        continue;
                    }
                    for b in 0..r {
                        for d in 0..r {
                            k[(a * r + b, c * r + d)] += w * g[(b, d)];
                        }
                    }
                }
            }
        }
        for q in 0..r * r {
            k[(q, q)] += self.lambda;
        }
        k
    }
}

/// `y ← a·x + b·y`, elementwise.
fn axpby(y: &mut DMatrix<f64>, a: f64, x: &DMatrix<f64>, b: f64) {
    for (yv, xv) in y.as_mut_slice().iter_mut().zip(x.as_slice()) {
        *yv = a * xv + b * *yv;
    }
}

/// Relative residual target of the inner solve.
const CORE_CG_TOL: f64 = 1e-12;
const CORE_RESIDUAL_TOL: f64 = 1e-10;

/// Exact minimizer of the cost over `S` with the frames fixed.
pub fn solve_core(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    obs: &ObservedMatrix,
    lambda: f64,
) -> Result<DMatrix<f64>> {
    solve_core_from(x, y, obs, lambda, None)
}

/// As [`solve_core`], warm-starting conjugate gradients at `guess`.
///
/// When CG misses the residual target (near-singular systems, only possible
/// for λ = 0 with degenerate masks) the dense system is assembled and the
/// least-norm solution returned.
pub fn solve_core_from(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    obs: &ObservedMatrix,
    lambda: f64,
    guess: Option<&DMatrix<f64>>,
) -> Result<DMatrix<f64>> {
    check_frames(x, y, obs)?;
    if !(lambda >= 0.0) {
        return Err(Error::invalid(format!("lambda must be >= 0, got {lambda}")));
    }
    let r = x.ncols();
    let op = CoreOperator::new(x, y, obs, lambda);
    let rhs = x.tr_mul(&obs.mul_dense(y));
    let rhs_norm = rhs.norm();
    if rhs_norm == 0.0 {
        return Ok(DMatrix::zeros(r, r));
    }

    let mut s = match guess {
        Some(g) if g.shape() == (r, r) => g.clone(),
        _ => DMatrix::zeros(r, r),
    };
    let mut res = &rhs - op.apply(&s);
    let mut dir = res.clone();
    let mut rr = res.norm_squared();
    for _ in 0..(4 * r * r + 20) {
        if rr.sqrt() <= CORE_CG_TOL * rhs_norm {
            break;
        }
        let q = op.apply(&dir);
        let curv = dir.dot(&q);
        if !(curv > 0.0) {
            break;
        }
        let step = rr / curv;
        axpby(&mut s, step, &dir, 1.0);
        axpby(&mut res, -step, &q, 1.0);
        let rr_next = res.norm_squared();
        axpby(&mut dir, 1.0, &res, rr_next / rr);
        rr = rr_next;
    }
    let true_res = (&rhs - op.apply(&s)).norm();
    if true_res <= CORE_RESIDUAL_TOL * rhs_norm {
        return Ok(s);
    }

    let k = op.assemble();
    let b = DMatrix::from_fn(r * r, 1, |q, _| rhs[(q / r, q % r)]);
    let sol = k
        .svd(true, true)
        .solve(&b, 1e-12 * rhs_norm.max(1.0))
        .map_err(|e| Error::invalid(format!("core system solve failed: {e}")))?;
    Ok(DMatrix::from_fn(r, r, |a, c| sol[(a * r + c, 0)]))
}

/// Dot product with four partial sums, which lets the compiler vectorize.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ac.remainder().iter().zip(bc.remainder()).map(|(u, v)| u * v).sum();
    for (u, v) in ac.zip(bc) {
        for k in 0..4 {
            acc[k] += u[k] * v[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Residual values `N_ij − (X S Yᵀ)_ij` in entry order.
fn residual_values(x: &DMatrix<f64>, y: &DMatrix<f64>, s: &DMatrix<f64>, obs: &ObservedMatrix) -> Vec<f64> {
    // Transposed factors make every inner product contiguous.
    let r = s.ncols();
    let left = gemm(Strided::col_major(s).t(), Strided::col_major(x).t());
    let right = y.transpose();
    let (ls, rs) = (left.as_slice(), right.as_slice());
    obs.iter()
        .map(|e| {
            let a = &ls[e.row * r..(e.row + 1) * r];
            let b = &rs[e.col * r..(e.col + 1) * r];
            e.value - dot(a, b)
        })
        .collect()
}

pub fn cost(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    s: &DMatrix<f64>,
    obs: &ObservedMatrix,
    lambda: f64,
) -> f64 {
    let fit: f64 = residual_values(x, y, s, obs).iter().map(|v| v * v).sum();
    0.5 * fit + 0.5 * lambda * s.norm_squared()
}

/// Projection of `z` onto the tangent space at `x`: `z − X sym(Xᵀz)`.
pub fn project_tangent(x: &DMatrix<f64>, z: &DMatrix<f64>) -> DMatrix<f64> {
    z - x * sym(&x.tr_mul(z))
}

/// Euclidean gradients `−R Y Sᵀ` and `−Rᵀ X S`, `R = P_E(N − X S Yᵀ)`.
pub fn euclidean_gradient(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    s: &DMatrix<f64>,
    obs: &ObservedMatrix,
) -> Gradient {
    let res = obs.with_values(&residual_values(x, y, s, obs));
    Gradient {
        x: -(res.mul_dense(y) * s.transpose()),
        y: -(res.tr_mul_dense(x) * s),
    }
}

/// Riemannian gradient with respect to the frames at fixed `S`. The λ term
/// does not depend on the frames.
pub fn riemannian_gradient(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    s: &DMatrix<f64>,
    obs: &ObservedMatrix,
    _lambda: f64,
) -> Gradient {
    let g = euclidean_gradient(x, y, s, obs);
    Gradient {
        x: project_tangent(x, &g.x),
        y: project_tangent(y, &g.y),
    }
}

const MIN_STEP: f64 = 1e-20;

/// Minimizes the regularized cost from `init`, see the module docs.
pub fn descend(
    init: &Factorization,
    obs: &ObservedMatrix,
    opts: &DescentOptions,
) -> Result<(Factorization, DescentTrace)> {
    opts.validate()?;
    check_frames(&init.x, &init.y, obs)?;
    if init.orthonormality_error() > 1e-6 {
        return Err(Error::invalid(format!(
            "initial frames are not orthonormal (error {:.2e})",
            init.orthonormality_error()
        )));
    }
    let lambda = opts.lambda;
    let grad_tol = opts
        .grad_tol
        .unwrap_or_else(|| 1e-7 * obs.frobenius_norm_squared().sqrt());

    let mut x = init.x.clone();
    let mut y = init.y.clone();
    let mut s = solve_core(&x, &y, obs, lambda)?;
    let mut f = cost(&x, &y, &s, obs, lambda);

    let mut records = Vec::new();
    let mut last_step = 0.0;
    let mut accepted = opts.initial_step;
    let mut previous: Option<(DMatrix<f64>, DMatrix<f64>, Gradient)> = None;
    let mut stalled = false;
    let mut iter = 0;

    let termination = loop {
        let grad = riemannian_gradient(&x, &y, &s, obs, lambda);
        let gnorm2 = grad.norm_squared();
        records.push(IterationRecord {
            iter,
            cost: f,
            grad_norm: gnorm2.sqrt(),
            step: last_step,
        });
        if gnorm2.sqrt() < grad_tol {
            break Termination::GradientTolerance;
        }
        if stalled {
            break Termination::CostStalled;
        }
        if iter >= opts.max_iters {
            break Termination::MaxIterations;
        }

        let mut step = match (opts.step_rule, &previous) {
            (StepRule::BarzilaiBorwein, Some((px, py, pg))) => {
                let (dx, dy) = (&x - px, &y - py);
                let dd = dx.norm_squared() + dy.norm_squared();
                let dg = dx.dot(&(&grad.x - &pg.x)) + dy.dot(&(&grad.y - &pg.y));
                if dg > 0.0 && dd > 0.0 {
                    dd / dg
                } else {
                    accepted * 2.0
                }
            }
            (_, None) => opts.initial_step,
            (StepRule::Backtracking, Some(_)) => accepted * 2.0,
        };

        let candidate = loop {
            let xn = qf(&(&x - &grad.x * step));
            let yn = qf(&(&y - &grad.y * step));
            let fnew = cost(&xn, &yn, &s, obs, lambda);
            if fnew <= f - opts.armijo_c * step * gnorm2 {
                break Some((xn, yn));
            }
            step *= opts.backtrack_factor;
            if step * gnorm2.sqrt() < MIN_STEP {
                break None;
            }
        };
        let Some((xn, yn)) = candidate else {
            break Termination::LineSearchFailed;
        };

        let sn = solve_core_from(&xn, &yn, obs, lambda, Some(&s))?;
        let fnew = cost(&xn, &yn, &sn, obs, lambda);
        stalled = f <= 0.0 || (f - fnew) / f < opts.cost_rel_tol;
        previous = Some((std::mem::replace(&mut x, xn), std::mem::replace(&mut y, yn), grad));
        s = sn;
        f = fnew;
        accepted = step;
        last_step = step;
        iter += 1;
    };

    Ok((
        Factorization { x, s, y },
        DescentTrace {
            records,
            termination,
        },
    ))
}
