//! Experiment configuration as flat `key=value` pairs. Repeated keys and
//! comma-separated values form grids; integer keys also accept inclusive
//! ranges such as `rank_used=1..20`.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kv;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    SweepRank,
    SweepNoise,
    SweepLambda,
    /// Spectral step only, compared against the asymptotic predictions.
    TheoryCheck,
    SingleRun,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    /// Gaussian factors `Ū V̄ᵀ`.
    Recipe,
    /// Prescribed normalized strengths on random frames.
    Spiked,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    OptSpace,
    SoftImpute,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Noise {
    Snr(f64),
    Sigma2(f64),
    /// `σ²/(pΣ₁²)`; spiked model only.
    Ratio(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaSpec {
    Auto,
    Value(f64),
}

macro_rules! string_enum {
    ($ty:ident { $($variant:ident => $name:literal),+ $(,)? }) => {
        impl $ty {
            pub fn as_str(self) -> &'static str {
                match self {
                    $($ty::$variant => $name),+
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($ty::$variant),)+
                    other => Err(Error::invalid(format!(
                        concat!("unknown ", stringify!($ty), " {:?}; expected one of: ", $($name, " "),+),
                        other
                    ))),
                }
            }
        }
    };
}

string_enum!(ExperimentKind {
    SweepRank => "sweep_rank",
    SweepNoise => "sweep_noise",
    SweepLambda => "sweep_lambda",
    TheoryCheck => "theory_check",
    SingleRun => "single_run",
});

string_enum!(ModelKind {
    Recipe => "recipe",
    Spiked => "spiked",
});

string_enum!(Method {
    OptSpace => "optspace",
    SoftImpute => "softimpute",
});

impl Noise {
    pub fn key(self) -> &'static str {
        match self {
            Noise::Snr(_) => "snr",
            Noise::Sigma2(_) => "sigma2",
            Noise::Ratio(_) => "noise_ratio",
        }
    }

    pub fn value(self) -> f64 {
        match self {
            Noise::Snr(v) | Noise::Sigma2(v) | Noise::Ratio(v) => v,
        }
    }
}

impl fmt::Display for Noise {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}={}", self.key(), self.value())
    }
}

impl fmt::Display for LambdaSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LambdaSpec::Auto => f.write_str("auto"),
            LambdaSpec::Value(v) => write!(f, "{v}"),
        }
    }
}

impl FromStr for LambdaSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "auto" {
            return Ok(LambdaSpec::Auto);
        }
        s.parse()
            .map(LambdaSpec::Value)
            .map_err(|_| Error::invalid(format!("lambda must be a number or `auto`, got {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub model: ModelKind,
    pub methods: Vec<Method>,
    pub m: Vec<usize>,
    pub n: Vec<usize>,
    /// True ranks for the recipe model; ignored for the spiked model, whose
    /// rank is the length of `signal`.
    pub r_true: Vec<usize>,
    /// Ranks handed to the estimator; empty means "same as the true rank".
    pub rank_used: Vec<usize>,
    pub p: Vec<f64>,
    pub noise: Vec<Noise>,
    /// Normalized strengths `Σ` of the spiked model.
    pub signal: Vec<f64>,
    /// Descent λ for the full pipeline, the Soft-Impute threshold for
    /// `softimpute`, and the spectral λ for `theory_check`.
    pub lambda: Vec<LambdaSpec>,
    pub replicates: usize,
    pub seed: u64,
    pub holdout_fraction: f64,
    pub max_iters: usize,
    pub trim_factor: f64,
    pub threads: usize,
    pub output: Option<PathBuf>,
}

pub const CONFIG_KEYS: &[&str] = &[
    "kind",
    "model",
    "method",
    "m",
    "n",
    "r_true",
    "rank_used",
    "p",
    "snr",
    "sigma2",
    "noise_ratio",
    "signal",
    "lambda",
    "replicates",
    "seed",
    "holdout_fraction",
    "max_iters",
    "trim_factor",
    "threads",
    "output",
];

fn values<'a>(pairs: &'a [(String, String)], key: &str) -> Vec<&'a str> {
    pairs
        .iter()
        .filter(|(k, _)| k == key)
        .flat_map(|(_, v)| v.split(','))
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .collect()
}

fn parse_one<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::invalid(format!("cannot parse {key}={raw:?}")))
}

fn parse_list<T: FromStr>(pairs: &[(String, String)], key: &str) -> Result<Vec<T>> {
    values(pairs, key).into_iter().map(|v| parse_one(key, v)).collect()
}

fn parse_usize_list(pairs: &[(String, String)], key: &str) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for raw in values(pairs, key) {
        if let Some((lo, hi)) = raw.split_once("..") {
            let lo: usize = parse_one(key, lo.trim())?;
            let hi: usize = parse_one(key, hi.trim())?;
            if lo > hi {
                return Err(Error::invalid(format!("empty range {key}={raw}")));
            }
            out.extend(lo..=hi);
        } else {
            out.push(parse_one(key, raw)?);
        }
    }
    Ok(out)
}

fn single<T: FromStr>(pairs: &[(String, String)], key: &str) -> Result<Option<T>> {
    let vals = values(pairs, key);
    match vals.as_slice() {
        [] => Ok(None),
        [v] => parse_one(key, v).map(Some),
        _ => Err(Error::invalid(format!("{key} takes a single value"))),
    }
}

fn require<T>(value: Option<T>, key: &str) -> Result<T> {
    value.ok_or_else(|| Error::invalid(format!("missing required key `{key}`")))
}

fn nonempty<T>(list: Vec<T>, key: &str) -> Result<Vec<T>> {
    if list.is_empty() {
        Err(Error::invalid(format!("missing required key `{key}`")))
    } else {
        Ok(list)
    }
}

impl ExperimentConfig {
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        if let Some((k, _)) = pairs.iter().find(|(k, _)| !CONFIG_KEYS.contains(&k.as_str())) {
            return Err(Error::invalid(format!("unknown config key `{k}`")));
        }
        let model = single(pairs, "model")?.unwrap_or(ModelKind::Recipe);
        let mut noise = Vec::new();
        for v in parse_list::<f64>(pairs, "snr")? {
            noise.push(Noise::Snr(v));
        }
        for v in parse_list::<f64>(pairs, "sigma2")? {
            noise.push(Noise::Sigma2(v));
        }
        for v in parse_list::<f64>(pairs, "noise_ratio")? {
            noise.push(Noise::Ratio(v));
        }
        let mut methods: Vec<Method> = parse_list(pairs, "method")?;
        if methods.is_empty() {
            methods.push(Method::OptSpace);
        }
        let mut lambda: Vec<LambdaSpec> = parse_list(pairs, "lambda")?;
        if lambda.is_empty() {
            lambda.push(LambdaSpec::Value(0.0));
        }
        let config = ExperimentConfig {
            kind: require(single(pairs, "kind")?, "kind")?,
            model,
            methods,
            m: nonempty(parse_usize_list(pairs, "m")?, "m")?,
            n: nonempty(parse_usize_list(pairs, "n")?, "n")?,
            r_true: parse_usize_list(pairs, "r_true")?,
            rank_used: parse_usize_list(pairs, "rank_used")?,
            p: nonempty(parse_list(pairs, "p")?, "p")?,
            noise: nonempty(noise, "snr, sigma2 or noise_ratio")?,
            signal: parse_list(pairs, "signal")?,
            lambda,
            replicates: single(pairs, "replicates")?.unwrap_or(20),
            seed: require(single(pairs, "seed")?, "seed")?,
            holdout_fraction: single(pairs, "holdout_fraction")?.unwrap_or(0.2),
            max_iters: single(pairs, "max_iters")?.unwrap_or(500),
            trim_factor: single(pairs, "trim_factor")?.unwrap_or(crate::obsmat::DEFAULT_TRIM_FACTOR),
            threads: single(pairs, "threads")?.unwrap_or(1),
            output: single::<String>(pairs, "output")?.map(PathBuf::from),
        };
        config.validate()?;
        Ok(config)
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        Self::from_pairs(&kv::parse(text, origin)?)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_pairs(&kv::read(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::invalid("replicates must be at least 1"));
        }
        if !(0.0..=0.5).contains(&self.holdout_fraction) {
            return Err(Error::invalid(format!(
                "holdout_fraction must lie in [0, 0.5], got {}",
                self.holdout_fraction
            )));
        }
        if self.m.contains(&0) || self.n.contains(&0) {
            return Err(Error::invalid("m and n must be positive"));
        }
        if self.p.iter().any(|&p| !(p > 0.0 && p <= 1.0)) {
            return Err(Error::invalid("every p must lie in (0, 1]"));
        }
        if self.rank_used.contains(&0) {
            return Err(Error::invalid("rank_used must be positive"));
        }
        for noise in &self.noise {
            let ok = match noise {
                Noise::Snr(v) => *v > 0.0 && v.is_finite(),
                Noise::Sigma2(v) | Noise::Ratio(v) => *v >= 0.0 && v.is_finite(),
            };
            if !ok {
                return Err(Error::invalid(format!("invalid {}={}", noise.key(), noise.value())));
            }
        }
        match self.model {
            ModelKind::Recipe => {
                if self.r_true.is_empty() || self.r_true.contains(&0) {
                    return Err(Error::invalid("the recipe model needs positive r_true values"));
                }
                if self.noise.iter().any(|n| matches!(n, Noise::Ratio(_))) {
                    return Err(Error::invalid("noise_ratio needs the spiked model"));
                }
            }
            ModelKind::Spiked => {
                if self.signal.is_empty() || self.signal.iter().any(|&s| !(s > 0.0)) {
                    return Err(Error::invalid("the spiked model needs positive signal values"));
                }
                if self.signal.windows(2).any(|w| w[1] > w[0]) {
                    return Err(Error::invalid("signal values must be nonincreasing"));
                }
            }
        }
        for l in &self.lambda {
            match l {
                LambdaSpec::Value(v) if !v.is_finite() => {
                    return Err(Error::invalid("lambda must be finite"));
                }
                LambdaSpec::Value(v)
                    if *v < 0.0 && self.kind != ExperimentKind::TheoryCheck =>
                {
                    return Err(Error::invalid(format!("lambda must be >= 0, got {v}")));
                }
                LambdaSpec::Value(v) if *v <= -1.0 => {
                    return Err(Error::invalid(format!("spectral lambda must exceed -1, got {v}")));
                }
                LambdaSpec::Auto if self.holdout_fraction == 0.0 && self.kind != ExperimentKind::TheoryCheck => {
                    return Err(Error::invalid("lambda=auto needs holdout_fraction > 0"));
                }
                _ => {}
            }
        }
        if self.trim_factor <= 0.0 {
            return Err(Error::invalid("trim_factor must be positive"));
        }
        if self.threads == 0 {
            return Err(Error::invalid("threads must be at least 1"));
        }
        Ok(())
    }

    /// True ranks of the model grid.
    pub fn true_ranks(&self) -> Vec<usize> {
        match self.model {
            ModelKind::Recipe => self.r_true.clone(),
            ModelKind::Spiked => vec![self.signal.len()],
        }
    }

    /// Canonical `key=value` rendering; parsing it gives back the same config.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let mut push = |k: &str, v: String| out.push((k.to_string(), v));
        push("kind", self.kind.to_string());
        push("model", self.model.to_string());
        for v in &self.methods {
            push("method", v.to_string());
        }
        for v in &self.m {
            push("m", v.to_string());
        }
        for v in &self.n {
            push("n", v.to_string());
        }
        for v in &self.r_true {
            push("r_true", v.to_string());
        }
        for v in &self.rank_used {
            push("rank_used", v.to_string());
        }
        for v in &self.p {
            push("p", v.to_string());
        }
        for v in &self.noise {
            push(v.key(), v.value().to_string());
        }
        for v in &self.signal {
            push("signal", v.to_string());
        }
        for v in &self.lambda {
            push("lambda", v.to_string());
        }
        push("replicates", self.replicates.to_string());
        push("seed", self.seed.to_string());
        push("holdout_fraction", self.holdout_fraction.to_string());
        push("max_iters", self.max_iters.to_string());
        push("trim_factor", self.trim_factor.to_string());
        push("threads", self.threads.to_string());
        if let Some(o) = &self.output {
            push("output", o.display().to_string());
        }
        out
    }
}
