//! `matchprior`: command-line front end to `matchprior-core`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Map, Value};

use matchprior_core::bayes::{laplace_summary, quadrature_posterior, QuadOptions, QuantileMethod};
use matchprior_core::conditional::{
    bcd_constants, conditional_coverage, conditional_matching_residual, ConditionalLaw, ConditionalOptions,
    Configuration,
};
use matchprior_core::coverage::{
    run_conditional, run_rate_study, run_unconditional, sample_configurations, ExperimentConfig, RunOptions,
};
use matchprior_core::lambda::{analytic_lambda, check_identities, monte_carlo_lambda};
use matchprior_core::likelihood::Profile;
use matchprior_core::matching::{default_grid, match_check, AnalyticField, LambdaField, MonteCarloField};
use matchprior_core::{family, model, prior, Error, ParameterPoint, Result, Sample, Stream};

#[derive(Parser)]
#[command(name = "matchprior", version, about = "Signed-root asymptotics and probability-matching priors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum LambdaArg {
    Analytic,
    Mc,
}

#[derive(Clone, Copy, ValueEnum)]
enum PosteriorArg {
    /// Quadrature for up to 3 parameters, Laplace expansion otherwise.
    Auto,
    Laplace,
    Quadrature,
}

#[derive(Clone, Copy, ValueEnum)]
enum QuantileArg {
    Quadrature,
    Refined,
}

impl From<QuantileArg> for QuantileMethod {
    fn from(q: QuantileArg) -> Self {
        match q {
            QuantileArg::Quadrature => QuantileMethod::Quadrature,
            QuantileArg::Refined => QuantileMethod::Refined,
        }
    }
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum ConfigSource {
    Sample,
    File,
}

#[derive(Subcommand)]
enum Command {
    /// Bartlett identity residuals of the λ arrays, as JSON.
    LambdaCheck {
        #[arg(long)]
        family: String,
        /// Comma-separated parameter vector, interest first.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        theta: Vec<f64>,
        #[arg(long)]
        n: usize,
        /// Monte Carlo replicates; omitted means analytic arrays only.
        #[arg(long)]
        mc_reps: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// `(psi, W, R)` rows on a grid, as CSV.
    SignedRoot {
        #[arg(long)]
        family: String,
        #[arg(long)]
        data: PathBuf,
        /// `a:b:k`, k equally spaced points from a to b.
        #[arg(long, allow_hyphen_values = true)]
        psi_grid: String,
    },
    /// Posterior moments of R and quantiles of psi, as JSON.
    Posterior {
        #[arg(long)]
        family: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        prior: String,
        /// Tail probabilities; the `1 - alpha` quantiles are reported.
        #[arg(long, value_delimiter = ',', default_value = "0.05")]
        alpha: Vec<f64>,
        #[arg(long, value_enum, default_value = "auto")]
        method: PosteriorArg,
    },
    /// First- and second-order matching residuals on a grid, as CSV.
    MatchCheck {
        #[arg(long)]
        family: String,
        #[arg(long)]
        prior: String,
        /// Points separated by `;`, coordinates by `,`; or `default` for a
        /// 3x3 grid around `--theta`.
        #[arg(long, allow_hyphen_values = true)]
        theta_grid: String,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        theta: Option<Vec<f64>>,
        #[arg(long, default_value_t = 2)]
        order: u8,
        #[arg(long, default_value_t = 20)]
        n: usize,
        #[arg(long, value_enum, default_value = "analytic")]
        lambda: LambdaArg,
        #[arg(long, default_value_t = 20_000)]
        mc_reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Conditional coverage of the posterior quantile given one
    /// configuration, as JSON.
    ConditionalCoverage {
        #[arg(long)]
        family: String,
        #[arg(long)]
        prior: String,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        #[arg(long, value_enum)]
        config_source: ConfigSource,
        /// Data file for `--config-source file`.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Parameter point for sampling and for the residual; defaults to
        /// `(mu, sigma) = (0, 1)`.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        theta: Option<Vec<f64>>,
        #[arg(long, value_enum, default_value = "quadrature")]
        method: QuantileArg,
    },
    /// Coverage experiment from a JSON config; CSV to `out` or stdout.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Record wall-clock time in `runtime_s`.
        #[arg(long)]
        timing: bool,
        /// Conditional coverage over this many sampled configurations
        /// instead of unconditional Monte Carlo.
        #[arg(long)]
        conditional: Option<usize>,
    },
    /// Log-log decay rate of coverage error; slopes as JSON on stdout.
    RateStudy {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        timing: bool,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_)
        | Error::UnknownKey(_)
        | Error::Domain { .. }
        | Error::SampleSize { .. }
        | Error::Missing(_)
        | Error::Io(_)
        | Error::Order(_) => 2,
        Error::Integrity(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn read_sample(path: &Path) -> Result<Sample> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let mut y = Vec::new();
    for (i, field) in text
        .lines()
        .flat_map(|l| l.split(',').map(str::trim).collect::<Vec<_>>())
        .filter(|f| !f.is_empty())
        .enumerate()
    {
        match field.parse::<f64>() {
            Ok(v) => y.push(v),
            // a header line
            Err(_) if i == 0 => {}
            Err(_) => return Err(Error::Config(format!("{}: `{field}` is not a number", path.display()))),
        }
    }
    Sample::new(y).map_err(|e| Error::Config(e.to_string()))
}

fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = spec.split(':').collect();
    let bad = || Error::Config(format!("psi grid `{spec}` is not of the form a:b:k"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let a: f64 = parts[0].parse().map_err(|_| bad())?;
    let b: f64 = parts[1].parse().map_err(|_| bad())?;
    let k: usize = parts[2].parse().map_err(|_| bad())?;
    if k == 0 {
        return Err(bad());
    }
    if k == 1 {
        return Ok(vec![a]);
    }
    Ok((0..k).map(|i| a + (b - a) * i as f64 / (k - 1) as f64).collect())
}

fn parse_points(spec: &str) -> Result<Vec<Vec<f64>>> {
    spec.split(';')
        .map(|p| {
            p.split(',')
                .map(|x| x.trim().parse::<f64>().map_err(|_| Error::Config(format!("bad grid point `{p}`"))))
                .collect()
        })
        .collect()
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v).map_err(|e| Error::Io(e.to_string()))?);
    Ok(())
}

fn csv_line(fields: &[String]) -> String {
    fields.join(",")
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::LambdaCheck {
            family: key,
            theta,
            n,
            mc_reps,
            seed,
        } => {
            let fam = family(&key)?;
            let point = ParameterPoint::new(fam.as_ref(), theta)?;
            let analytic = match analytic_lambda(fam.as_ref(), point.as_slice(), n) {
                Ok(a) => Some(check_identities(&a)),
                Err(Error::Missing(_)) => None,
                Err(e) => return Err(e),
            };
            let mc = match mc_reps {
                Some(r) => Some(check_identities(&monte_carlo_lambda(
                    fam.as_ref(),
                    &point,
                    n,
                    r,
                    Stream::new(seed),
                )?)),
                None => None,
            };
            print_json(&json!({ "family": key, "theta": point.as_slice(), "n": n, "analytic": analytic, "monte_carlo": mc }))
        }
        Command::SignedRoot {
            family: key,
            data,
            psi_grid,
        } => {
            let fam = family(&key)?;
            let y = read_sample(&data)?;
            let profile = Profile::new(fam.as_ref(), &y)?;
            println!("psi,W,R");
            for psi in parse_grid(&psi_grid)? {
                let p = profile.signed_root(psi)?;
                println!("{}", csv_line(&[psi.to_string(), p.w.to_string(), p.r.to_string()]));
            }
            Ok(())
        }
        Command::Posterior {
            family: key,
            data,
            prior: pk,
            alpha,
            method,
        } => {
            let fam = family(&key)?;
            let pr = prior(&pk, fam.as_ref())?;
            let y = read_sample(&data)?;
            if let Some(a) = alpha.iter().find(|a| !(**a > 0.0 && **a < 1.0)) {
                return Err(Error::Config(format!("alpha {a} outside (0, 1)")));
            }
            let levels: Vec<f64> = alpha.iter().map(|a| 1.0 - a).collect();
            let profile = Profile::new(fam.as_ref(), &y)?;
            let quadrature = match method {
                PosteriorArg::Auto => fam.dim() <= 3,
                PosteriorArg::Laplace => false,
                PosteriorArg::Quadrature => true,
            };
            let s = if quadrature {
                quadrature_posterior(&profile, pr.as_ref(), &levels, QuadOptions::default())?
            } else {
                laplace_summary(&profile, pr.as_ref(), &levels)?
            };
            let mut q = Map::new();
            for (l, v) in &s.quantiles {
                q.insert(format!("{l}"), json!(v));
            }
            let method = serde_json::to_value(s.method).map_err(|e| Error::Io(e.to_string()))?;
            print_json(&json!({
                "mu_B": s.mu_b,
                "a_B": s.a_b,
                "sigma2_B": s.sigma2_b,
                "quantiles": Value::Object(q),
                "method": method,
            }))
        }
        Command::MatchCheck {
            family: key,
            prior: pk,
            theta_grid,
            theta,
            order,
            n,
            lambda,
            mc_reps,
            seed,
        } => {
            let fam = family(&key)?;
            let pr = prior(&pk, fam.as_ref())?;
            let grid = if theta_grid == "default" {
                let t = theta.ok_or(Error::Config("`--theta-grid default` needs `--theta`".into()))?;
                default_grid(fam.as_ref(), &t)
            } else {
                parse_points(&theta_grid)?
            };
            for t in &grid {
                ParameterPoint::new(fam.as_ref(), t.clone())?;
            }
            let analytic = AnalyticField { family: fam.as_ref(), n };
            let mc = MonteCarloField {
                family: fam.as_ref(),
                n,
                reps: mc_reps,
                stream: Stream::new(seed),
            };
            let field: &dyn LambdaField = match lambda {
                LambdaArg::Analytic => &analytic,
                LambdaArg::Mc => &mc,
            };
            let summary = match_check(field, n, pr.as_ref(), &grid, order)?;
            let mut header: Vec<String> = fam.param_names().iter().map(|s| s.to_string()).collect();
            header.extend(["wp_residual", "so_residual", "mu_F", "a_F", "sigma2_F"].map(String::from));
            println!("{}", csv_line(&header));
            for r in &summary.rows {
                let mut f: Vec<String> = r.theta.iter().map(|x| x.to_string()).collect();
                f.push(r.wp_residual.to_string());
                f.push(r.so_residual.map_or(String::new(), |v| v.to_string()));
                f.push(r.mu_f.to_string());
                f.push(r.a_f.to_string());
                f.push(r.sigma2_f.to_string());
                println!("{}", csv_line(&f));
            }
            for r in summary.rows.iter().filter_map(|r| r.warning.as_ref()) {
                eprintln!("warning: {r}");
            }
            Ok(())
        }
        Command::ConditionalCoverage {
            family: key,
            prior: pk,
            n,
            alpha,
            config_source,
            data,
            seed,
            theta,
            method,
        } => {
            let fam = family(&key)?;
            let view = fam
                .location_scale()
                .ok_or_else(|| Error::Config(format!("{key} is not a location-scale family")))?;
            let pr = prior(&pk, fam.as_ref())?;
            let theta = theta.unwrap_or_else(|| view.slots(0.0, 1.0));
            let point = ParameterPoint::new(fam.as_ref(), theta)?;
            let y = match config_source {
                ConfigSource::Sample => {
                    let n = n.ok_or(Error::Config("`--config-source sample` needs `--n`".into()))?;
                    model::sample(fam.as_ref(), &point, n, Stream::new(seed))?
                }
                ConfigSource::File => {
                    let path = data.ok_or(Error::Config("`--config-source file` needs `--data`".into()))?;
                    let y = read_sample(&path)?;
                    if let Some(n) = n {
                        if n != y.n() {
                            return Err(Error::Config(format!("--n {n} but the data file has {} values", y.n())));
                        }
                    }
                    y
                }
            };
            let config = Configuration::from_sample(fam.as_ref(), &y)?;
            let law = ConditionalLaw::new(config, ConditionalOptions::default())?;
            let ctx = bcd_constants(&law, fam.as_ref())?;
            let cov = conditional_coverage(&law, fam.as_ref(), pr.as_ref(), alpha, method.into(), true)?;
            let res = conditional_matching_residual(&ctx, pr.as_ref(), point.as_slice())?;
            print_json(&json!({
                "a": law.config.a,
                "B": ctx.b,
                "C": ctx.c,
                "D": ctx.d,
                "E": ctx.e,
                "coverage": cov.coverage,
                "residual4": res.residual,
            }))
        }
        Command::Run {
            config,
            timing,
            conditional,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let opts = RunOptions { timing };
            if let Some(k) = conditional {
                let n = *cfg.n.first().ok_or(Error::Config("empty n list".into()))?;
                let configs = sample_configurations(&cfg, n, k)?;
                let t = run_conditional(&cfg, &configs, opts)?;
                match &cfg.out {
                    Some(p) => t.write(p)?,
                    None => {
                        print!("{}", t.averaged.to_csv()?);
                        eprint!("{}", t.per_a_csv()?);
                    }
                }
                return Ok(());
            }
            let t = run_unconditional(&cfg, opts)?;
            report_diagnostics(fam_label(&cfg), &t.diagnostics);
            if !t.failures.is_empty() {
                eprintln!("{} replicates excluded", t.failures.len());
            }
            match &cfg.out {
                Some(p) => t.write(p),
                None => {
                    print!("{}", t.to_csv()?);
                    Ok(())
                }
            }
        }
        Command::RateStudy { config, timing } => {
            let cfg = ExperimentConfig::load(&config)?;
            let (t, studies) = run_rate_study(&cfg, RunOptions { timing })?;
            if let Some(p) = &cfg.out {
                t.write(p)?;
            }
            print_json(&studies)
        }
    }
}

fn fam_label(cfg: &ExperimentConfig) -> String {
    cfg.family_key().unwrap_or_else(|_| cfg.family.clone())
}

fn report_diagnostics(label: String, d: &[matchprior_core::matching::MatchingSummary]) {
    for s in d {
        let r = &s.rows[0];
        eprintln!(
            "{label} {}: first-order residual {:.3e}, second-order residual {}",
            s.prior,
            r.wp_residual,
            r.so_residual.map_or("-".into(), |v| format!("{v:.3e}"))
        );
    }
}
