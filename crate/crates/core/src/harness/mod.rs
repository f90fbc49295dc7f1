//! Experiment harness: seeded synthetic sweeps, λ selection and CSV output.
//!
//! A run enumerates instance cells `(m, n, r_true, p, noise)` times
//! replicates. Each instance is drawn once from a seed hashed from the base
//! seed, the cell coordinates and the replicate index, then every estimator
//! cell `(rank_used, method, lambda)` is evaluated on it, so comparisons
//! across estimator settings are paired. Rows come out in grid order whatever
//! the number of worker threads.

mod config;
mod pipeline;
mod report;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::Instant;

use nalgebra::DMatrix;

pub use config::{ExperimentConfig, ExperimentKind, LambdaSpec, Method, ModelKind, Noise, CONFIG_KEYS};
pub use pipeline::{
    default_lambda_grid, descent_lambda_for_shrinkage, holdout_mse, run_optspace, select_by_holdout,
    select_lambda, LambdaScore, LambdaSelection, OptSpaceOptions, OptSpaceOutput,
};
pub use report::{
    emit_csv, emit_plotscript, emit_summary, emit_timings, summarize, RowWriter, SummaryRow,
    CSV_COLUMNS,
};

use crate::error::{Error, Result};
use crate::linalg::principal_cosines;
use crate::manifold::DescentOptions;
use crate::obsmat::{trim_with_factor, ObservedMatrix};
use crate::spectral::{
    from_svd, soft_impute, truncated_svd, Shrinkage, SoftImputeOptions, SvdOptions,
};
use crate::synthgen::{
    generate, generate_spiked, rel_fro_error, snr_to_sigma2, test_error, train_error, SynthInstance,
};
use crate::theory::{predict, theory_lambda_for_rank};

/// Measured and predicted quantities for one estimator cell on one replicate.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub kind: ExperimentKind,
    pub model: ModelKind,
    pub method: Method,
    pub m: usize,
    pub n: usize,
    pub r_true: usize,
    pub rank_used: usize,
    pub p: f64,
    /// Noise level as configured; the measured levels follow.
    pub noise_spec: Noise,
    pub sigma2: f64,
    pub snr: f64,
    pub noise_ratio: f64,
    pub lambda_spec: LambdaSpec,
    /// λ actually used (after selection for `auto`).
    pub lambda: f64,
    pub replicate: usize,
    pub seed: u64,
    /// `ok` or the error that stopped this cell.
    pub status: String,
    pub test_error: f64,
    pub train_error: f64,
    pub rel_fro_error: f64,
    /// Top singular value of the trimmed observations divided by `n`.
    pub top_sv: f64,
    /// Largest principal cosine between the true and estimated left frames.
    pub overlap_left: f64,
    pub overlap_right: f64,
    pub iterations: usize,
    pub termination: String,
    pub theory_z: f64,
    pub theory_a: f64,
    pub theory_b: f64,
    pub theory_rel_mse: f64,
    /// Theory-optimal shrinkage factor of the spectral step (0 below threshold).
    pub theory_t: f64,
    /// Seconds spent on this cell; reported in the timings sidecar only.
    pub wall_time: f64,
}

impl ResultRow {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for a grid cell: the base seed folded with every coordinate.
pub fn cell_seed(base: u64, coords: &[u64]) -> u64 {
    coords
        .iter()
        .fold(splitmix64(base), |h, &c| splitmix64(h ^ splitmix64(c)))
}

#[derive(Debug, Clone, Copy)]
struct InstanceCell {
    m: usize,
    n: usize,
    r_true: usize,
    p: f64,
    noise: Noise,
    replicate: usize,
}

impl InstanceCell {
    fn seed(&self, base: u64) -> u64 {
        let noise_tag = match self.noise {
            Noise::Snr(_) => 0,
            Noise::Sigma2(_) => 1,
            Noise::Ratio(_) => 2,
        };
        cell_seed(
            base,
            &[
                self.m as u64,
                self.n as u64,
                self.r_true as u64,
                self.p.to_bits(),
                noise_tag,
                self.noise.value().to_bits(),
                self.replicate as u64,
            ],
        )
    }
}

fn instance_cells(config: &ExperimentConfig) -> Vec<InstanceCell> {
    let mut cells = Vec::new();
    for &m in &config.m {
        for &n in &config.n {
            for &r_true in &config.true_ranks() {
                for &p in &config.p {
                    for &noise in &config.noise {
                        for replicate in 0..config.replicates {
                            cells.push(InstanceCell {
                                m,
                                n,
                                r_true,
                                p,
                                noise,
                                replicate,
                            });
                        }
                    }
                }
            }
        }
    }
    cells
}

fn draw(config: &ExperimentConfig, cell: &InstanceCell, seed: u64) -> Result<SynthInstance> {
    match config.model {
        ModelKind::Recipe => {
            let sigma2 = match cell.noise {
                Noise::Snr(snr) => snr_to_sigma2(snr, cell.r_true, cell.m, cell.n)?,
                Noise::Sigma2(s) => s,
                Noise::Ratio(_) => return Err(Error::invalid("noise_ratio needs the spiked model")),
            };
            generate(cell.m, cell.n, cell.r_true, sigma2, cell.p, seed)
        }
        ModelKind::Spiked => {
            let strongest = config.signal[0];
            let sigma2 = match cell.noise {
                Noise::Snr(snr) => {
                    let power: f64 = config.signal.iter().map(|s| s * s).sum();
                    power / (snr * snr)
                }
                Noise::Sigma2(s) => s,
                Noise::Ratio(x) => x * cell.p * strongest * strongest,
            };
            generate_spiked(cell.m, cell.n, &config.signal, sigma2, cell.p, seed)
        }
    }
}

struct Estimate {
    lambda: f64,
    matrix: DMatrix<f64>,
    top_sv: f64,
    left: DMatrix<f64>,
    right: DMatrix<f64>,
    iterations: usize,
    termination: String,
}

fn optspace_options(config: &ExperimentConfig) -> OptSpaceOptions {
    OptSpaceOptions {
        trim_factor: config.trim_factor,
        svd: SvdOptions::default(),
        descent: DescentOptions {
            max_iters: config.max_iters,
            ..DescentOptions::default()
        },
    }
}

fn top_singular_over_n(obs: &ObservedMatrix, trim_factor: f64) -> Result<f64> {
    let trimmed = trim_with_factor(obs, trim_factor)?;
    let svd = truncated_svd(&trimmed, 1, &SvdOptions::default())?;
    Ok(svd.singular[0] / obs.cols() as f64)
}

fn estimate_spectral(
    config: &ExperimentConfig,
    inst: &SynthInstance,
    rank: usize,
    spec: LambdaSpec,
) -> Result<Estimate> {
    let trimmed = trim_with_factor(&inst.observed, config.trim_factor).map_err(|e| e.in_stage("trim"))?;
    let svd = truncated_svd(&trimmed, rank, &SvdOptions::default()).map_err(|e| e.in_stage("spectral"))?;
    let shrink = match spec {
        LambdaSpec::Value(v) => Shrinkage::from_lambda(v)?,
        LambdaSpec::Auto => match theory_lambda_for_rank(&inst.params, rank) {
            Ok(rule) => Shrinkage::new(rule.t_star)?,
            // Nothing is detectable: the best spectral estimate is zero.
            Err(Error::BelowThreshold) => Shrinkage::new(0.0)?,
            Err(e) => return Err(e),
        },
    };
    let f = from_svd(&svd, shrink);
    Ok(Estimate {
        lambda: shrink.lambda(),
        matrix: f.reconstruct(),
        top_sv: svd.singular[0] / inst.cols() as f64,
        left: f.x,
        right: f.y,
        iterations: svd.iterations,
        termination: "spectral".into(),
    })
}

fn estimate_optspace(
    config: &ExperimentConfig,
    inst: &SynthInstance,
    rank: usize,
    spec: LambdaSpec,
    aux_seed: u64,
) -> Result<Estimate> {
    let opts = optspace_options(config);
    let lambda = match spec {
        LambdaSpec::Value(v) => v,
        LambdaSpec::Auto => {
            let train_fraction = 1.0 - config.holdout_fraction;
            let grid = default_lambda_grid(&inst.params, rank, inst.observed.density() * train_fraction)?;
            select_lambda(&inst.observed, rank, &grid, config.holdout_fraction, aux_seed, &opts)
                .map_err(|e| e.in_stage("select_lambda"))?
                .lambda_star
        }
    };
    let out = run_optspace(&inst.observed, rank, lambda, lambda, &opts)?;
    let (iterations, termination) = match &out.trace {
        Some(t) => (t.iterations(), t.termination.as_str().to_string()),
        None => (0, "skipped".to_string()),
    };
    Ok(Estimate {
        lambda,
        matrix: out.estimate(),
        top_sv: out.svd.singular[0] / inst.cols() as f64,
        left: out.factorization.x,
        right: out.factorization.y,
        iterations,
        termination,
    })
}

const SOFT_IMPUTE_FRACTIONS: [f64; 6] = [0.01, 0.02, 0.05, 0.1, 0.2, 0.4];

fn estimate_soft_impute(
    config: &ExperimentConfig,
    inst: &SynthInstance,
    rank: usize,
    spec: LambdaSpec,
    aux_seed: u64,
) -> Result<Estimate> {
    let opts = SoftImputeOptions::default();
    let top = top_singular_over_n(&inst.observed, config.trim_factor)? * inst.cols() as f64;
    let lambda = match spec {
        LambdaSpec::Value(v) => v,
        LambdaSpec::Auto => {
            let grid: Vec<f64> = SOFT_IMPUTE_FRACTIONS.iter().map(|f| f * top).collect();
            select_by_holdout(&inst.observed, &grid, config.holdout_fraction, aux_seed, |train, l| {
                Ok(soft_impute(train, l, &opts)?.completed)
            })
            .map_err(|e| e.in_stage("select_lambda"))?
            .lambda_star
        }
    };
    let result = soft_impute(&inst.observed, lambda, &opts).map_err(|e| e.in_stage("softimpute"))?;
    let svd = result.completed.clone().svd(true, true);
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let k = rank.min(order.len());
    let u = svd.u.as_ref().expect("u requested");
    let v = svd.v_t.as_ref().expect("v_t requested").transpose();
    Ok(Estimate {
        lambda,
        top_sv: top / inst.cols() as f64,
        left: DMatrix::from_fn(u.nrows(), k, |i, j| u[(i, order[j])]),
        right: DMatrix::from_fn(v.nrows(), k, |i, j| v[(i, order[j])]),
        matrix: result.completed,
        iterations: result.iterations,
        termination: if result.converged { "converged" } else { "max_iterations" }.into(),
    })
}

/// Test error on the unobserved positions; when every entry is observed the
/// complement is empty and the full-matrix relative error stands in.
fn test_error_or_full(inst: &SynthInstance, estimate: &DMatrix<f64>) -> Result<f64> {
    if inst.observed.len() == inst.rows() * inst.cols() {
        rel_fro_error(&inst.truth, estimate)
    } else {
        test_error(&inst.truth, estimate, &inst.observed)
    }
}

fn largest_cosine(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    if b.ncols() == 0 {
        return 0.0;
    }
    principal_cosines(a, b)[0]
}

struct EstimatorCell {
    rank_used: usize,
    method: Method,
    lambda: LambdaSpec,
}

fn estimator_cells(config: &ExperimentConfig, r_true: usize) -> Vec<EstimatorCell> {
    let ranks = if config.rank_used.is_empty() {
        vec![r_true]
    } else {
        config.rank_used.clone()
    };
    let methods: &[Method] = if config.kind == ExperimentKind::TheoryCheck {
        &[Method::OptSpace]
    } else {
        &config.methods
    };
    let mut out = Vec::new();
    for &rank_used in &ranks {
        for &method in methods {
            for &lambda in &config.lambda {
                out.push(EstimatorCell {
                    rank_used,
                    method,
                    lambda,
                });
            }
        }
    }
    out
}

fn run_instance(config: &ExperimentConfig, cell: &InstanceCell) -> Vec<ResultRow> {
    let seed = cell.seed(config.seed);
    let started = Instant::now();
    let drawn = draw(config, cell, seed);
    let draw_time = started.elapsed().as_secs_f64();
    let cells = estimator_cells(config, cell.r_true);
    let nan = f64::NAN;

    let mut rows = Vec::with_capacity(cells.len());
    for est in cells {
        let mut row = ResultRow {
            kind: config.kind,
            model: config.model,
            method: est.method,
            m: cell.m,
            n: cell.n,
            r_true: cell.r_true,
            rank_used: est.rank_used,
            p: cell.p,
            noise_spec: cell.noise,
            sigma2: nan,
            snr: nan,
            noise_ratio: nan,
            lambda_spec: est.lambda,
            lambda: nan,
            replicate: cell.replicate,
            seed,
            status: String::new(),
            test_error: nan,
            train_error: nan,
            rel_fro_error: nan,
            top_sv: nan,
            overlap_left: nan,
            overlap_right: nan,
            iterations: 0,
            termination: String::new(),
            theory_z: nan,
            theory_a: nan,
            theory_b: nan,
            theory_rel_mse: nan,
            theory_t: nan,
            wall_time: draw_time,
        };
        let inst = match &drawn {
            Ok(inst) => inst,
            Err(e) => {
                row.status = format!("error: synth: {e}");
                rows.push(row);
                continue;
            }
        };
        let params = &inst.params;
        row.sigma2 = params.sigma2;
        row.snr = inst.snr();
        row.noise_ratio = params.sigma2 / (params.p * params.sigma_diag[0].powi(2));
        if let Ok(pred) = predict(params) {
            row.theory_z = pred.z[0];
            row.theory_a = pred.a[0];
            row.theory_b = pred.b[0];
            row.theory_rel_mse = pred.rel_mse;
        }
        row.theory_t = match theory_lambda_for_rank(params, est.rank_used) {
            Ok(rule) => rule.t_star,
            Err(_) => 0.0,
        };

        let t0 = Instant::now();
        let aux_seed = cell_seed(seed, &[est.rank_used as u64, est.method as u64]);
        let outcome = match (config.kind, est.method) {
            (ExperimentKind::TheoryCheck, _) => estimate_spectral(config, inst, est.rank_used, est.lambda),
            (_, Method::OptSpace) => estimate_optspace(config, inst, est.rank_used, est.lambda, aux_seed),
            (_, Method::SoftImpute) => {
                estimate_soft_impute(config, inst, est.rank_used, est.lambda, aux_seed)
            }
        }
        .and_then(|e| {
            Ok((
                test_error_or_full(inst, &e.matrix)?,
                train_error(&inst.observed, &e.matrix)?,
                rel_fro_error(&inst.truth, &e.matrix)?,
                e,
            ))
        });
        row.wall_time += t0.elapsed().as_secs_f64();
        match outcome {
            Ok((test, train, rel, e)) => {
                row.status = "ok".into();
                row.lambda = e.lambda;
                row.test_error = test;
                row.train_error = train;
                row.rel_fro_error = rel;
                row.top_sv = e.top_sv;
                row.overlap_left = largest_cosine(&inst.left_frame, &e.left);
                row.overlap_right = largest_cosine(&inst.right_frame, &e.right);
                row.iterations = e.iterations;
                row.termination = e.termination;
            }
            Err(e) => row.status = format!("error: {e}"),
        }
        rows.push(row);
    }
    rows
}

/// Runs every cell, handing rows to `sink` in grid order as they complete.
pub fn run_with<F>(config: &ExperimentConfig, mut sink: F) -> Result<Vec<ResultRow>>
where
    F: FnMut(&ResultRow) -> Result<()>,
{
    config.validate()?;
    let cells = instance_cells(config);
    let mut all = Vec::new();
    let threads = config.threads.min(cells.len()).max(1);
    if threads == 1 {
        for cell in &cells {
            let rows = run_instance(config, cell);
            for row in &rows {
                sink(row)?;
            }
            all.extend(rows);
        }
        return Ok(all);
    }

    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        let (tx, rx) = mpsc::channel();
        for _ in 0..threads {
            let tx = tx.clone();
            let (next, cells) = (&next, &cells);
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= cells.len() {
                    break;
                }
                if tx.send((i, run_instance(config, &cells[i]))).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        let mut pending = BTreeMap::new();
        let mut want = 0;
        for (i, rows) in rx {
            pending.insert(i, rows);
            while let Some(rows) = pending.remove(&want) {
                for row in &rows {
                    if let Err(e) = sink(row) {
                        next.store(cells.len(), Ordering::Relaxed);
                        return Err(e);
                    }
                }
                all.extend(rows);
                want += 1;
            }
        }
        Ok(())
    })?;
    Ok(all)
}

pub fn run(config: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    run_with(config, |_| Ok(()))
}

/// Runs `config`, streaming rows into `csv_path`, then writes the
/// `.summary.csv`, `.timings.csv` and `.gp` companions next to it.
pub fn run_to_files(config: &ExperimentConfig, csv_path: impl AsRef<Path>) -> Result<Vec<ResultRow>> {
    let csv_path = csv_path.as_ref();
    let mut writer = RowWriter::create(csv_path)?;
    let rows = run_with(config, |row| writer.write(row))?;
    writer.finish()?;
    emit_summary(&summarize(&rows), companion(csv_path, "summary.csv"))?;
    emit_timings(&rows, companion(csv_path, "timings.csv"))?;
    emit_plotscript(&rows, config.kind, csv_path, companion(csv_path, "gp"))?;
    Ok(rows)
}

/// `out.csv` → `out.<suffix>`.
pub fn companion(csv_path: &Path, suffix: &str) -> std::path::PathBuf {
    let stem = csv_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "results".into());
    csv_path.with_file_name(format!("{stem}.{suffix}"))
}
