//! Coverage experiments: unconditional Monte Carlo coverage of posterior
//! quantiles, rate-of-decay studies and conditional coverage sweeps.
//!
//! Replicate `i` of the cell at sample size `n` draws from
//! `Stream::new(seed).fork("<family>/n=<n>").at(i)`, so every prior sees the
//! same datasets and the tables do not depend on thread scheduling.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bayes::{a_b, marginal_posterior, mu_b, refined_quantile, sigma2_b, QuadOptions, QuantileMethod};
use crate::conditional::{
    bcd_constants, conditional_coverage, conditional_matching_residual, ConditionalLaw, ConditionalOptions,
    Configuration, CoveragePath,
};
use crate::error::{Error, Result};
use crate::likelihood::Profile;
use crate::matching::{match_check, AnalyticField, LambdaField, MatchingSummary, MonteCarloField};
use crate::model::{family, prior, sample, Kernel, ModelFamily, ParameterPoint, Prior, Sample};
use crate::rng::Stream;

/// Failed replicates tolerated per cell before the experiment is void.
pub const MAX_FAILURE_SHARE: f64 = 0.01;
pub const MIN_REPS: usize = 100;
/// Replicates per `n` below which a rate study is flagged as underpowered.
pub const RATE_REPS: usize = 100_000;
/// Coverage errors within this many SEs of zero count as unresolved.
pub const RESOLVE_SES: f64 = 3.0;
const BOOTSTRAP: usize = 2000;
/// Monte Carlo replicates per λ evaluation for `lambda: "mc"` diagnostics.
const DIAGNOSTIC_MC_REPS: usize = 20_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LambdaSource {
    Analytic,
    Mc,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodFlags {
    pub quantile: QuantileMethod,
    pub lambda: LambdaSource,
}

/// Experiment description as read from JSON.
///
/// `theta` is in slot order, interest parameter first: `(mu, sigma)` for
/// location interest, `(sigma, mu)` for scale interest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub family: String,
    pub interest: String,
    pub priors: Vec<String>,
    pub theta: Vec<f64>,
    pub n: Vec<usize>,
    pub alpha: Vec<f64>,
    pub reps: usize,
    pub seed: u64,
    pub method: MethodFlags,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Registry key combining `family` and `interest`.
    pub fn family_key(&self) -> Result<String> {
        let (base, suffix) = match self.family.split_once(':') {
            Some((b, s)) => (b, Some(s)),
            None => (self.family.as_str(), None),
        };
        let role = match self.interest.as_str() {
            "location" | "loc" | "mu" => "loc",
            "scale" | "sigma" => "scale",
            "shape" => "shape",
            "rate" => "rate",
            other => return Err(Error::Config(format!("unknown interest `{other}`"))),
        };
        if let Some(s) = suffix {
            if s != role {
                return Err(Error::Config(format!(
                    "family suffix `{s}` contradicts interest `{}`",
                    self.interest
                )));
            }
        }
        Ok(format!("{base}:{role}"))
    }

    /// Resolves every key and checks the invariants.
    pub fn resolve(&self) -> Result<Resolved> {
        let key = self.family_key()?;
        let fam = family(&key).map_err(|e| Error::Config(e.to_string()))?;
        if self.priors.is_empty() {
            return Err(Error::Config("no priors given".into()));
        }
        let priors = self
            .priors
            .iter()
            .map(|p| prior(p, fam.as_ref()).map_err(|e| Error::Config(e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        let theta = ParameterPoint::new(fam.as_ref(), self.theta.clone()).map_err(|e| Error::Config(e.to_string()))?;
        if self.reps < MIN_REPS {
            return Err(Error::Config(format!("reps = {} is below {MIN_REPS}", self.reps)));
        }
        if self.n.is_empty() || self.alpha.is_empty() {
            return Err(Error::Config("n and alpha lists must be non-empty".into()));
        }
        let needed = fam.dim() + 1;
        if let Some(&n) = self.n.iter().find(|&&n| n < needed) {
            return Err(Error::Config(format!("n = {n} is below {needed} for {key}")));
        }
        if let Some(a) = self.alpha.iter().find(|a| !(**a > 0.0 && **a < 1.0)) {
            return Err(Error::Config(format!("alpha {a} outside (0, 1)")));
        }
        Ok(Resolved {
            key,
            family: fam,
            priors,
            theta,
        })
    }
}

pub struct Resolved {
    pub key: String,
    pub family: Arc<dyn ModelFamily>,
    pub priors: Vec<Arc<dyn Prior>>,
    pub theta: ParameterPoint,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Record wall-clock time per cell; otherwise `runtime_s` is 0 and the
    /// output is bytewise reproducible.
    pub timing: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CoverageRow {
    pub family: String,
    pub prior: String,
    pub interest: String,
    pub n: usize,
    pub alpha: f64,
    pub coverage: f64,
    pub mc_se: f64,
    #[serde(rename = "mean_mu_B")]
    pub mean_mu_b: f64,
    #[serde(rename = "mean_sigma2_B")]
    pub mean_sigma2_b: f64,
    pub runtime_s: f64,
}

/// An excluded replicate.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Failure {
    pub prior: String,
    pub n: usize,
    pub replicate: u64,
    pub reason: String,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct CoverageTable {
    pub rows: Vec<CoverageRow>,
    pub failures: Vec<Failure>,
    /// Matching conditions at the true `theta`, one per prior.
    pub diagnostics: Vec<MatchingSummary>,
}

pub const CSV_HEADER: &str = "family,prior,interest,n,alpha,coverage,mc_se,mean_mu_B,mean_sigma2_B,runtime_s";

impl CoverageTable {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(vec![]);
        if self.rows.is_empty() {
            w.write_record(CSV_HEADER.split(','))
                .map_err(|e| Error::Io(e.to_string()))?;
        }
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::Io(e.to_string()))?;
        }
        into_string(w)
    }

    pub fn failures_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(vec![]);
        if self.failures.is_empty() {
            w.write_record(["prior", "n", "replicate", "reason"])
                .map_err(|e| Error::Io(e.to_string()))?;
        }
        for f in &self.failures {
            w.serialize(f).map_err(|e| Error::Io(e.to_string()))?;
        }
        into_string(w)
    }

    /// Writes the table to `path` and the excluded replicates next to it.
    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?)?;
        std::fs::write(sidecar(path, "failures"), self.failures_csv()?)?;
        Ok(())
    }
}

fn into_string(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Io(e.to_string()))
}

/// `out.csv` -> `out.<tag>.csv`.
pub fn sidecar(path: &Path, tag: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    path.with_file_name(format!("{stem}.{tag}.csv"))
}

struct Replicate {
    mu_b: f64,
    sigma2_b: f64,
    /// One limit per alpha.
    limits: Vec<f64>,
}

/// Posterior `1 - alpha` limits of the standardised interest parameter.
///
/// Under a normal kernel the configuration is always the same, since the
/// residuals `a` satisfy `sum a = 0` and `sum a^2 = n`; with a `sigma^-k` prior
/// the posterior then depends on the data only through `(mu_hat, sigma_hat)`,
/// and one posterior at the canonical dataset serves every replicate.
fn pivotal_limits(
    fam: &dyn ModelFamily,
    pr: &dyn Prior,
    n: usize,
    alphas: &[f64],
    method: QuantileMethod,
) -> Result<Option<Vec<f64>>> {
    let view = match fam.location_scale() {
        Some(v) if v.kernel == Kernel::Normal && pr.scale_power().is_some() => v,
        _ => return Ok(None),
    };
    let raw: Vec<f64> = (0..n).map(|i| i as f64 - (n as f64 - 1.0) / 2.0).collect();
    let rms = (raw.iter().map(|x| x * x).sum::<f64>() / n as f64).sqrt();
    let y = Sample::new(raw.iter().map(|x| x / rms).collect())?;
    let profile = Profile::new(fam, &y)?;
    let (mu, sigma) = view.physical(&profile.fit.theta_hat);
    if mu.abs() > 1e-10 || (sigma - 1.0).abs() > 1e-10 {
        return Err(Error::FitQuality(format!("canonical normal sample fitted at ({mu}, {sigma})")));
    }
    Ok(Some(limits(&profile, pr, alphas, method, true)?))
}

fn limits(profile: &Profile, pr: &dyn Prior, alphas: &[f64], method: QuantileMethod, check: bool) -> Result<Vec<f64>> {
    match method {
        QuantileMethod::Quadrature => {
            let opts = QuadOptions {
                check,
                with_r: false,
                ..QuadOptions::default()
            };
            let post = marginal_posterior(profile, pr, opts)?;
            alphas.iter().map(|a| post.quantile(1.0 - a)).collect()
        }
        QuantileMethod::Refined => {
            let m = mu_b(&profile.hat(Some(pr))?)?;
            alphas.iter().map(|a| refined_quantile(profile, m, 1.0 - a)).collect()
        }
    }
}

fn replicate(
    fam: &dyn ModelFamily,
    pr: &dyn Prior,
    y: &Sample,
    alphas: &[f64],
    method: QuantileMethod,
    pivot: Option<&[f64]>,
) -> Result<Replicate> {
    let profile = Profile::new(fam, y)?;
    let hat = profile.hat(Some(pr))?;
    let m = mu_b(&hat)?;
    let s2 = sigma2_b(m, a_b(&hat)?);
    let limits = match (pivot, fam.location_scale()) {
        (Some(q), Some(view)) => {
            let (mu, sigma) = view.physical(&profile.fit.theta_hat);
            match view.role() {
                crate::model::Role::Location => q.iter().map(|q| mu + sigma * q).collect(),
                crate::model::Role::Scale => q.iter().map(|q| sigma * q).collect(),
            }
        }
        _ => limits(&profile, pr, alphas, method, false)?,
    };
    Ok(Replicate {
        mu_b: m,
        sigma2_b: s2,
        limits,
    })
}

fn diagnostics(cfg: &ExperimentConfig, res: &Resolved, n: usize) -> Result<Vec<MatchingSummary>> {
    let fam = res.family.as_ref();
    let grid = [res.theta.as_slice().to_vec()];
    let analytic = AnalyticField { family: fam, n };
    let mc = MonteCarloField {
        family: fam,
        n,
        reps: DIAGNOSTIC_MC_REPS,
        stream: Stream::new(cfg.seed).fork("lambda"),
    };
    let field: &dyn LambdaField = match cfg.method.lambda {
        LambdaSource::Analytic => &analytic,
        LambdaSource::Mc => &mc,
    };
    res.priors
        .iter()
        .map(|p| match_check(field, n, p.as_ref(), &grid, 2))
        .collect()
}

/// Monte Carlo coverage of the posterior `1 - alpha` limits, one row per
/// `(n, prior, alpha)`.
pub fn run_unconditional(cfg: &ExperimentConfig, opts: RunOptions) -> Result<CoverageTable> {
    let res = cfg.resolve()?;
    let fam = res.family.as_ref();
    let psi_true = res.theta.psi();
    let mut table = CoverageTable {
        diagnostics: diagnostics(cfg, &res, cfg.n[0])?,
        ..CoverageTable::default()
    };
    for &n in &cfg.n {
        let stream = Stream::new(cfg.seed).fork(&format!("{}/n={n}", res.key));
        for (pr, label) in res.priors.iter().zip(&cfg.priors) {
            let start = Instant::now();
            let pivot = pivotal_limits(fam, pr.as_ref(), n, &cfg.alpha, cfg.method.quantile)?;
            let results: Vec<Result<Replicate>> = (0..cfg.reps as u64)
                .into_par_iter()
                .map(|i| {
                    let y = sample(fam, &res.theta, n, stream.at(i))?;
                    replicate(fam, pr.as_ref(), &y, &cfg.alpha, cfg.method.quantile, pivot.as_deref())
                })
                .collect();
            let mut ok = Vec::with_capacity(results.len());
            let mut failed = 0;
            for (i, r) in results.into_iter().enumerate() {
                match r {
                    Ok(r) => ok.push(r),
                    Err(e) => {
                        failed += 1;
                        table.failures.push(Failure {
                            prior: label.clone(),
                            n,
                            replicate: i as u64,
                            reason: e.to_string(),
                        });
                    }
                }
            }
            if failed as f64 > MAX_FAILURE_SHARE * cfg.reps as f64 {
                let first = table.failures.iter().rev().take(3).map(|f| f.reason.as_str()).collect::<Vec<_>>();
                return Err(Error::Integrity(format!(
                    "{failed} of {} replicates failed for prior {label} at n = {n}; e.g. {first:?}",
                    cfg.reps
                )));
            }
            let runtime = if opts.timing { start.elapsed().as_secs_f64() } else { 0.0 };
            let k = ok.len() as f64;
            let mean_mu_b = ok.iter().map(|r| r.mu_b).sum::<f64>() / k;
            let mean_sigma2_b = ok.iter().map(|r| r.sigma2_b).sum::<f64>() / k;
            for (j, &alpha) in cfg.alpha.iter().enumerate() {
                let hits = ok.iter().filter(|r| psi_true <= r.limits[j]).count() as f64;
                let coverage = hits / k;
                table.rows.push(CoverageRow {
                    family: res.key.clone(),
                    prior: label.clone(),
                    interest: cfg.interest.clone(),
                    n,
                    alpha,
                    coverage,
                    mc_se: (coverage * (1.0 - coverage) / k).sqrt(),
                    mean_mu_b,
                    mean_sigma2_b,
                    runtime_s: runtime,
                });
            }
        }
    }
    Ok(table)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RatePoint {
    pub n: usize,
    pub coverage: f64,
    pub mc_se: f64,
    /// `coverage - (1 - alpha)`.
    pub error: f64,
    /// `|error|` exceeds [`RESOLVE_SES`] standard errors.
    pub resolved: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "outcome", rename_all = "kebab-case")]
pub enum RateOutcome {
    /// Fewer than two coverage errors stand out from Monte Carlo noise.
    RateUnresolvable,
    Slope {
        slope: f64,
        ci_low: f64,
        ci_high: f64,
        /// Sample sizes entering the fit.
        used: Vec<usize>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RateStudy {
    pub prior: String,
    pub alpha: f64,
    pub points: Vec<RatePoint>,
    pub outcome: RateOutcome,
    /// Set when fewer than [`RATE_REPS`] replicates were used per `n`.
    pub underpowered: bool,
}

/// Log-log regression of the coverage error on `n` for every prior and
/// alpha, with a parametric bootstrap interval for the slope.
pub fn run_rate_study(cfg: &ExperimentConfig, opts: RunOptions) -> Result<(CoverageTable, Vec<RateStudy>)> {
    let distinct: BTreeSet<usize> = cfg.n.iter().copied().collect();
    if distinct.len() < 3 {
        return Err(Error::Config(format!(
            "a rate study needs at least 3 distinct n values, got {}",
            distinct.len()
        )));
    }
    let table = run_unconditional(cfg, opts)?;
    let mut studies = Vec::new();
    for label in &cfg.priors {
        for &alpha in &cfg.alpha {
            let points: Vec<RatePoint> = table
                .rows
                .iter()
                .filter(|r| &r.prior == label && r.alpha == alpha)
                .map(|r| {
                    let error = r.coverage - (1.0 - alpha);
                    RatePoint {
                        n: r.n,
                        coverage: r.coverage,
                        mc_se: r.mc_se,
                        error,
                        resolved: error.abs() > RESOLVE_SES * r.mc_se,
                    }
                })
                .collect();
            let stream = Stream::new(cfg.seed).fork(&format!("bootstrap/{label}/{alpha}"));
            studies.push(RateStudy {
                prior: label.clone(),
                alpha,
                outcome: fit_rate(&points, stream),
                points,
                underpowered: cfg.reps < RATE_REPS,
            });
        }
    }
    Ok((table, studies))
}

/// Weighted least squares of `log|error|` on `log n`; the weight is the
/// inverse delta-method variance `(error / se)^2`.
fn wls_slope(xs: &[f64], errs: &[f64], ses: &[f64]) -> f64 {
    let w: Vec<f64> = errs.iter().zip(ses).map(|(e, s)| (e / s.max(1e-12)).powi(2)).collect();
    let ys: Vec<f64> = errs.iter().map(|e| e.abs().max(1e-300).ln()).collect();
    let sw: f64 = w.iter().sum();
    let mx = w.iter().zip(xs).map(|(w, x)| w * x).sum::<f64>() / sw;
    let my = w.iter().zip(&ys).map(|(w, y)| w * y).sum::<f64>() / sw;
    let sxy: f64 = w.iter().zip(xs.iter().zip(&ys)).map(|(w, (x, y))| w * (x - mx) * (y - my)).sum();
    let sxx: f64 = w.iter().zip(xs).map(|(w, x)| w * (x - mx).powi(2)).sum();
    sxy / sxx
}

fn fit_rate(points: &[RatePoint], stream: Stream) -> RateOutcome {
    let used: Vec<&RatePoint> = points.iter().filter(|p| p.resolved).collect();
    let distinct: BTreeSet<usize> = used.iter().map(|p| p.n).collect();
    if distinct.len() < 2 {
        return RateOutcome::RateUnresolvable;
    }
    let xs: Vec<f64> = used.iter().map(|p| (p.n as f64).ln()).collect();
    let errs: Vec<f64> = used.iter().map(|p| p.error).collect();
    let ses: Vec<f64> = used.iter().map(|p| p.mc_se).collect();
    let slope = wls_slope(&xs, &errs, &ses);
    let mut rng = stream.rng();
    let mut boot: Vec<f64> = (0..BOOTSTRAP)
        .map(|_| {
            let e: Vec<f64> = errs
                .iter()
                .zip(&ses)
                .map(|(e, s)| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    e + s * z
                })
                .collect();
            wls_slope(&xs, &e, &ses)
        })
        .filter(|s| s.is_finite())
        .collect();
    boot.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pick = |p: f64| boot[((p * (boot.len() - 1) as f64).round()) as usize];
    RateOutcome::Slope {
        slope,
        ci_low: pick(0.025),
        ci_high: pick(0.975),
        used: used.iter().map(|p| p.n).collect(),
    }
}

/// Conditional coverage and condition residual for one configuration.
#[derive(Clone, Debug, Serialize)]
pub struct ConditionalRow {
    pub index: usize,
    pub prior: String,
    pub a: Vec<f64>,
    #[serde(rename = "B")]
    pub b: f64,
    #[serde(rename = "C")]
    pub c: f64,
    #[serde(rename = "D")]
    pub d: f64,
    #[serde(rename = "E")]
    pub e: f64,
    pub coverage: f64,
    pub path: CoveragePath,
    /// `LHS - RHS` of the conditional condition at the true `theta`.
    pub residual4: f64,
    /// `E(mu_B | A = a)` and `E(sigma2_B | A = a)`.
    #[serde(rename = "mu_B")]
    pub mu_b: f64,
    #[serde(rename = "sigma2_B")]
    pub sigma2_b: f64,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct ConditionalTable {
    pub per_a: Vec<ConditionalRow>,
    /// Averages over configurations, one per `(prior, alpha)`; `mc_se` is the
    /// spread of the per-configuration coverages over `sqrt(k)`.
    pub averaged: CoverageTable,
}

impl ConditionalTable {
    pub fn per_a_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(vec![]);
        w.write_record(["index", "prior", "a", "B", "C", "D", "E", "coverage", "path", "residual4", "mu_B", "sigma2_B"])
            .map_err(|e| Error::Io(e.to_string()))?;
        for r in &self.per_a {
            let a = r.a.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(" ");
            let path = match r.path {
                CoveragePath::Equivariant => "equivariant",
                CoveragePath::Boundary => "boundary",
            };
            w.write_record([
                r.index.to_string(),
                r.prior.clone(),
                a,
                r.b.to_string(),
                r.c.to_string(),
                r.d.to_string(),
                r.e.to_string(),
                r.coverage.to_string(),
                path.into(),
                r.residual4.to_string(),
                r.mu_b.to_string(),
                r.sigma2_b.to_string(),
            ])
            .map_err(|e| Error::Io(e.to_string()))?;
        }
        into_string(w)
    }

    /// Averaged rows to `path`, per-configuration rows beside it.
    pub fn write(&self, path: &Path) -> Result<()> {
        self.averaged.write(path)?;
        std::fs::write(sidecar(path, "per-a"), self.per_a_csv()?)?;
        Ok(())
    }
}

/// Configurations of `count` samples of size `n` drawn at the true `theta`.
pub fn sample_configurations(cfg: &ExperimentConfig, n: usize, count: usize) -> Result<Vec<Configuration>> {
    let res = cfg.resolve()?;
    let fam = res.family.as_ref();
    let stream = Stream::new(cfg.seed).fork(&format!("{}/configurations/n={n}", res.key));
    (0..count as u64)
        .map(|i| {
            let y = sample(fam, &res.theta, n, stream.at(i))?;
            Configuration::from_sample(fam, &y)
        })
        .collect()
}

/// Posterior mean of `R` and `sigma2_B` averaged over the conditional law.
fn conditional_means(law: &ConditionalLaw, fam: &dyn ModelFamily, pr: &dyn Prior, equivariant: bool) -> Result<(f64, f64)> {
    let at = |u: f64, v: f64| -> Result<(f64, f64)> {
        let y = Sample::new(law.config.dataset(u, v))?;
        let hat = Profile::new(fam, &y)?.hat(Some(pr))?;
        let m = mu_b(&hat)?;
        Ok((m, sigma2_b(m, a_b(&hat)?)))
    };
    if equivariant {
        // both are functions of the configuration alone
        return at(0.0, 1.0);
    }
    let parts: Vec<Result<(f64, f64, f64)>> = law
        .grid()
        .par_iter()
        .map(|&(u, w, wt)| at(u, w.exp()).map(|(m, s)| (wt * m, wt * s, wt)))
        .collect();
    let (mut m, mut s, mut total) = (0.0, 0.0, 0.0);
    for p in parts.into_iter().flatten() {
        m += p.0;
        s += p.1;
        total += p.2;
    }
    if total < 1.0 - 1e-3 {
        return Err(Error::Integrity(format!("posterior failed on {:.3}% of the conditional mass", 100.0 * (1.0 - total))));
    }
    Ok((m / total, s / total))
}

/// Conditional coverage for each configuration, prior and alpha. The sample
/// size is that of the configurations; the `n` list is not consulted.
pub fn run_conditional(cfg: &ExperimentConfig, configs: &[Configuration], opts: RunOptions) -> Result<ConditionalTable> {
    let res = cfg.resolve()?;
    let fam = res.family.as_ref();
    if fam.location_scale().is_none() {
        return Err(Error::Config(format!("{} is not a location-scale family", res.key)));
    }
    if configs.is_empty() {
        return Err(Error::Config("no configurations given".into()));
    }
    let n = configs[0].n();
    if configs.iter().any(|c| c.n() != n) {
        return Err(Error::Config("configurations differ in sample size".into()));
    }
    let start = Instant::now();
    let cells: Vec<(usize, f64)> = (0..res.priors.len())
        .flat_map(|p| cfg.alpha.iter().map(move |&a| (p, a)))
        .collect();
    let mut by_cell: Vec<Vec<ConditionalRow>> = vec![Vec::with_capacity(configs.len()); cells.len()];
    for (index, c) in configs.iter().enumerate() {
        let law = ConditionalLaw::new(c.clone(), ConditionalOptions::default())?;
        let ctx = bcd_constants(&law, fam)?;
        for (cell, &(p, alpha)) in cells.iter().enumerate() {
            let pr = res.priors[p].as_ref();
            let cov = conditional_coverage(&law, fam, pr, alpha, cfg.method.quantile, false)?;
            let residual = conditional_matching_residual(&ctx, pr, res.theta.as_slice())?;
            let (m, s) = conditional_means(&law, fam, pr, cov.path == CoveragePath::Equivariant)?;
            by_cell[cell].push(ConditionalRow {
                index,
                prior: cfg.priors[p].clone(),
                a: c.a.clone(),
                b: ctx.b,
                c: ctx.c,
                d: ctx.d,
                e: ctx.e,
                coverage: cov.coverage,
                path: cov.path,
                residual4: residual.residual,
                mu_b: m,
                sigma2_b: s,
            });
        }
    }
    let runtime = if opts.timing { start.elapsed().as_secs_f64() } else { 0.0 };
    let mut table = ConditionalTable::default();
    for (rows, &(p, alpha)) in by_cell.into_iter().zip(&cells) {
        let k = rows.len() as f64;
        let coverage = rows.iter().map(|r| r.coverage).sum::<f64>() / k;
        let spread = if rows.len() > 1 {
            (rows.iter().map(|r| (r.coverage - coverage).powi(2)).sum::<f64>() / (k - 1.0)).sqrt()
        } else {
            0.0
        };
        table.averaged.rows.push(CoverageRow {
            family: res.key.clone(),
            prior: cfg.priors[p].clone(),
            interest: cfg.interest.clone(),
            n,
            alpha,
            coverage,
            mc_se: spread / k.sqrt(),
            mean_mu_b: rows.iter().map(|r| r.mu_b).sum::<f64>() / k,
            mean_sigma2_b: rows.iter().map(|r| r.sigma2_b).sum::<f64>() / k,
            runtime_s: runtime,
        });
        table.per_a.extend(rows);
    }
    Ok(table)
}

#[cfg(test)]
mod tests;
