//! `optspace`: synthetic instances, matrix completion, asymptotic predictions
//! and seeded experiment sweeps.
//!
//! Exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 2 | usage error (bad flags, missing required flag) |
//! | 3 | I/O error |
//! | 4 | malformed input file |
//! | 5 | invalid argument or inconsistent dimensions |
//! | 6 | numerical failure (no convergence, every λ failed) |

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use optspace::harness::{
    self, run_optspace, select_lambda, ExperimentConfig, OptSpaceOptions, RowWriter,
};
use optspace::synthgen::{
    generate_spiked_with, generate_with, rel_fro_error, snr_to_sigma2, test_error, train_error,
    MaskModel, SynthOptions,
};
use optspace::theory::{predict, theory_lambda_for_rank, ModelParams};
use optspace::{mtx, obsmat, Error, Termination};

#[derive(Parser)]
#[command(name = "optspace", version, about = "Regularized low-rank matrix completion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a synthetic instance and write it to a directory.
    Synth(SynthArgs),
    /// Complete a MatrixMarket coordinate file.
    Complete(CompleteArgs),
    /// Print the asymptotic predictions for a spiked model.
    Theory(TheoryArgs),
    /// Run an experiment config.
    Sweep(SweepArgs),
    /// Pick λ on a holdout split of a MatrixMarket coordinate file.
    SelectLambda(SelectArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    m: usize,
    #[arg(long)]
    n: usize,
    /// Rank of the recipe model (ignored with --signal).
    #[arg(long = "r-true", alias = "r_true", default_value_t = 1)]
    r_true: usize,
    /// Normalized strengths of a spiked model, comma separated.
    #[arg(long, value_delimiter = ',')]
    signal: Vec<f64>,
    #[arg(long, conflicts_with = "snr")]
    sigma2: Option<f64>,
    /// sqrt(Var M_ij / Var W_ij); needs the recipe model.
    #[arg(long)]
    snr: Option<f64>,
    #[arg(long)]
    p: f64,
    #[arg(long)]
    seed: u64,
    /// Reveal exactly round(p·m·n) entries instead of Bernoulli(p).
    #[arg(long)]
    fixed_mask: bool,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    /// Observed entries, MatrixMarket coordinate format.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    rank: usize,
    #[arg(long = "max-iters", alias = "max_iters", default_value_t = 500)]
    max_iters: usize,
    #[arg(long = "trim-factor", alias = "trim_factor", default_value_t = obsmat::DEFAULT_TRIM_FACTOR)]
    trim_factor: f64,
    #[arg(long = "holdout-fraction", alias = "holdout_fraction", default_value_t = 0.2)]
    holdout_fraction: f64,
}

impl FitArgs {
    fn options(&self) -> OptSpaceOptions {
        let mut opts = OptSpaceOptions {
            trim_factor: self.trim_factor,
            ..OptSpaceOptions::default()
        };
        opts.descent.max_iters = self.max_iters;
        opts
    }
}

#[derive(Args)]
struct CompleteArgs {
    #[command(flatten)]
    fit: FitArgs,
    /// Descent λ; several values select one on a holdout split.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    lambda: Vec<f64>,
    /// Seed of the holdout split; required with several λ values.
    #[arg(long)]
    seed: Option<u64>,
    /// Dense ground truth (MatrixMarket array) for error reporting.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Exit with code 6 unless the descent met a tolerance.
    #[arg(long)]
    strict: bool,
    /// Output directory for X, S, Y, the manifest and the descent trace.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SelectArgs {
    #[command(flatten)]
    fit: FitArgs,
    #[arg(long, value_delimiter = ',', required = true)]
    lambda: Vec<f64>,
    #[arg(long)]
    seed: u64,
    /// Write the score table here as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TheoryArgs {
    /// Normalized strengths Σ, comma separated, nonincreasing.
    #[arg(long, value_delimiter = ',', required = true)]
    signal: Vec<f64>,
    #[arg(long)]
    sigma2: f64,
    #[arg(long)]
    p: f64,
    /// Aspect ratio m/n.
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    /// Report the optimal shrinkage for this many kept components.
    #[arg(long = "rank-used", alias = "rank_used")]
    rank_used: Option<usize>,
}

/// Every config key as a flag. Flags replace the file's values for that key;
/// the three noise keys replace each other.
#[derive(Args)]
struct SweepArgs {
    /// key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    kind: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    method: Vec<String>,
    #[arg(long)]
    m: Vec<String>,
    #[arg(long)]
    n: Vec<String>,
    #[arg(long = "r-true", alias = "r_true")]
    r_true: Vec<String>,
    #[arg(long = "rank-used", alias = "rank_used")]
    rank_used: Vec<String>,
    #[arg(long)]
    p: Vec<String>,
    #[arg(long)]
    snr: Vec<String>,
    #[arg(long)]
    sigma2: Vec<String>,
    #[arg(long = "noise-ratio", alias = "noise_ratio")]
    noise_ratio: Vec<String>,
    #[arg(long)]
    signal: Vec<String>,
    #[arg(long)]
    lambda: Vec<String>,
    #[arg(long)]
    replicates: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long = "holdout-fraction", alias = "holdout_fraction")]
    holdout_fraction: Option<String>,
    #[arg(long = "max-iters", alias = "max_iters")]
    max_iters: Option<String>,
    #[arg(long = "trim-factor", alias = "trim_factor")]
    trim_factor: Option<String>,
    #[arg(long)]
    threads: Option<String>,
    /// Result CSV; companions go next to it. Without it the CSV goes to stdout.
    #[arg(long)]
    output: Option<String>,
}

const NOISE_KEYS: [&str; 3] = ["snr", "sigma2", "noise_ratio"];

impl SweepArgs {
    fn overrides(&self) -> Vec<(&'static str, Vec<String>)> {
        let one = |v: &Option<String>| v.iter().cloned().collect::<Vec<_>>();
        vec![
            ("kind", one(&self.kind)),
            ("model", one(&self.model)),
            ("method", self.method.clone()),
            ("m", self.m.clone()),
            ("n", self.n.clone()),
            ("r_true", self.r_true.clone()),
            ("rank_used", self.rank_used.clone()),
            ("p", self.p.clone()),
            ("snr", self.snr.clone()),
            ("sigma2", self.sigma2.clone()),
            ("noise_ratio", self.noise_ratio.clone()),
            ("signal", self.signal.clone()),
            ("lambda", self.lambda.clone()),
            ("replicates", one(&self.replicates)),
            ("seed", one(&self.seed)),
            ("holdout_fraction", one(&self.holdout_fraction)),
            ("max_iters", one(&self.max_iters)),
            ("trim_factor", one(&self.trim_factor)),
            ("threads", one(&self.threads)),
            ("output", one(&self.output)),
        ]
    }

    fn config(&self) -> optspace::Result<ExperimentConfig> {
        let mut pairs = match &self.config {
            Some(path) => at_path(path, optspace::kv::read(path))?,
            None => Vec::new(),
        };
        let overrides = self.overrides();
        let noise_given = overrides
            .iter()
            .any(|(k, v)| NOISE_KEYS.contains(k) && !v.is_empty());
        for (key, vals) in &overrides {
            if vals.is_empty() {
                continue;
            }
            pairs.retain(|(k, _)| k != key);
            pairs.extend(vals.iter().map(|v| (key.to_string(), v.clone())));
        }
        if noise_given {
            pairs.retain(|(k, _)| {
                !NOISE_KEYS.contains(&k.as_str())
                    || overrides.iter().any(|(o, v)| o == k && !v.is_empty())
            });
        }
        ExperimentConfig::from_pairs(&pairs)
    }
}

enum Failure {
    Core(Error),
    NotConverged(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(Error::Io(e))
    }
}

/// Names the file in I/O errors, which otherwise carry no path.
fn at_path<T>(path: &Path, r: optspace::Result<T>) -> optspace::Result<T> {
    r.map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    })
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Stage { source, .. } => exit_code(source),
        Error::Io(_) => 3,
        Error::Parse { .. } => 4,
        Error::SvdNotConverged { .. } | Error::AllCandidatesFailed(_) => 6,
        _ => 5,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Complete(a) => complete(a),
        Command::Theory(a) => theory(a),
        Command::Sweep(a) => sweep(a),
        Command::SelectLambda(a) => select(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(Failure::NotConverged(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(6)
        }
    }
}

fn synth(a: SynthArgs) -> Result<(), Failure> {
    let opts = SynthOptions {
        mask: if a.fixed_mask {
            MaskModel::FixedSize
        } else {
            MaskModel::Bernoulli
        },
    };
    let inst = if a.signal.is_empty() {
        let sigma2 = match (a.sigma2, a.snr) {
            (_, Some(snr)) => snr_to_sigma2(snr, a.r_true, a.m, a.n)?,
            (Some(s), None) => s,
            (None, None) => 0.0,
        };
        generate_with(a.m, a.n, a.r_true, sigma2, a.p, a.seed, opts)?
    } else {
        if a.snr.is_some() {
            return Err(Error::InvalidArgument("--snr applies to the recipe model only".into()).into());
        }
        let sigma2 = a.sigma2.unwrap_or(0.0);
        generate_spiked_with(a.m, a.n, &a.signal, sigma2, a.p, a.seed, opts)?
    };
    inst.save(&a.out)?;
    println!("observed={}", inst.observed.len());
    println!("snr={}", inst.snr());
    println!("out={}", a.out.display());
    Ok(())
}

fn complete(a: CompleteArgs) -> Result<(), Failure> {
    let obs = at_path(&a.fit.input, mtx::read_coordinate(&a.fit.input))?;
    let opts = a.fit.options();
    let lambda = if a.lambda.len() == 1 {
        a.lambda[0]
    } else {
        let seed = a
            .seed
            .ok_or_else(|| Error::InvalidArgument("--seed is required with several --lambda values".into()))?;
        let sel = select_lambda(&obs, a.fit.rank, &a.lambda, a.fit.holdout_fraction, seed, &opts)?;
        for s in &sel.table {
            eprintln!("lambda={} holdout_mse={}", s.lambda, s.holdout_error);
        }
        sel.lambda_star
    };
    let out = run_optspace(&obs, a.fit.rank, lambda, lambda, &opts)?;
    let estimate = out.estimate();

    let mut extra = vec![("lambda".to_string(), lambda.to_string())];
    let mut report = vec![
        ("lambda".to_string(), lambda.to_string()),
        ("trimmed_entries".to_string(), out.trimmed_entries.to_string()),
        ("train_error".to_string(), train_error(&obs, &estimate)?.to_string()),
    ];
    if let Some(trace) = &out.trace {
        let iters = trace.iterations().to_string();
        let term = trace.termination.as_str().to_string();
        extra.push(("iterations".into(), iters.clone()));
        extra.push(("termination".into(), term.clone()));
        report.push(("iterations".into(), iters));
        report.push(("termination".into(), term));
        report.push(("final_cost".into(), trace.final_cost().to_string()));
    }
    if let Some(path) = &a.truth {
        let truth = at_path(path, mtx::read_array(path))?;
        report.push(("rel_fro_error".into(), rel_fro_error(&truth, &estimate)?.to_string()));
        if obs.len() < obs.rows() * obs.cols() {
            report.push(("test_error".into(), test_error(&truth, &estimate, &obs)?.to_string()));
        }
    }
    out.factorization.save(&a.out, &obs, &extra)?;
    if let Some(trace) = &out.trace {
        trace.save_csv(a.out.join("trace.csv"))?;
    }
    print!("{}", optspace::kv::render(&report));

    if a.strict {
        if let Some(trace) = &out.trace {
            if matches!(
                trace.termination,
                Termination::MaxIterations | Termination::LineSearchFailed
            ) {
                return Err(Failure::NotConverged(format!(
                    "descent stopped without meeting a tolerance ({})",
                    trace.termination.as_str()
                )));
            }
        }
    }
    Ok(())
}

fn select(a: SelectArgs) -> Result<(), Failure> {
    let obs = at_path(&a.fit.input, mtx::read_coordinate(&a.fit.input))?;
    let sel = select_lambda(
        &obs,
        a.fit.rank,
        &a.lambda,
        a.fit.holdout_fraction,
        a.seed,
        &a.fit.options(),
    )?;
    let mut table = String::from("lambda,holdout_mse,error\n");
    for s in &sel.table {
        table.push_str(&format!(
            "{:.16e},{:.16e},{}\n",
            s.lambda,
            s.holdout_error,
            s.error.as_deref().unwrap_or("").replace([',', '\n'], " ")
        ));
    }
    match &a.out {
        Some(path) => std::fs::write(path, &table)?,
        None => print!("{table}"),
    }
    println!("lambda_star={}", sel.lambda_star);
    Ok(())
}

fn theory(a: TheoryArgs) -> Result<(), Failure> {
    let params = ModelParams::new(a.signal, a.sigma2, a.p, a.alpha)?;
    let pred = predict(&params)?;
    let fmt_opt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |x| x.to_string());
    let mut fields: Vec<(String, String)> = vec![
        ("k".into(), pred.k.to_string()),
        ("rel_mse".into(), pred.rel_mse.to_string()),
        ("bulk_edge".into(), pred.bulk_edge.to_string()),
        ("t_star".into(), fmt_opt(pred.t_star)),
        ("lambda_star".into(), fmt_opt(pred.lambda_star())),
    ];
    for (name, values) in [("z", &pred.z), ("a", &pred.a), ("b", &pred.b)] {
        for (i, v) in values.iter().enumerate() {
            fields.push((format!("{name}_{}", i + 1), v.to_string()));
        }
    }
    if let Some(rank) = a.rank_used {
        let rule = match theory_lambda_for_rank(&params, rank) {
            Ok(rule) => Some(rule),
            Err(Error::BelowThreshold) => None,
            Err(e) => return Err(e.into()),
        };
        fields.push(("rank_used".into(), rank.to_string()));
        fields.push(("t_star_rank_used".into(), fmt_opt(rule.map(|r| r.t_star))));
        fields.push(("lambda_star_rank_used".into(), fmt_opt(rule.map(|r| r.lambda_star))));
    }
    let mut out = std::io::stdout().lock();
    out.write_all(optspace::kv::render(&fields).as_bytes())?;
    let header: Vec<&str> = fields.iter().map(|(k, _)| k.as_str()).collect();
    let row: Vec<&str> = fields.iter().map(|(_, v)| v.as_str()).collect();
    writeln!(out, "{}", header.join(","))?;
    writeln!(out, "{}", row.join(","))?;
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<(), Failure> {
    let config = a.config()?;
    let rows = match &config.output {
        Some(path) => {
            if let Some(dir) = Path::new(path).parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            harness::run_to_files(&config, path)?
        }
        None => {
            let mut writer = RowWriter::new(std::io::stdout().lock())?;
            let rows = harness::run_with(&config, |row| writer.write(row))?;
            writer.finish()?;
            rows
        }
    };
    let failed = rows.iter().filter(|r| !r.is_ok()).count();
    eprintln!("rows={} failed={failed}", rows.len());
    Ok(())
}
