use super::*;

fn config(json: &str) -> ExperimentConfig {
    ExperimentConfig::from_json(json).unwrap()
}

fn normal_scale(priors: &str, n: &str, reps: usize) -> ExperimentConfig {
    config(&format!(
        r#"{{"family": "normal-ls", "interest": "scale", "priors": [{priors}], "theta": [1.0, 0.0],
            "n": [{n}], "alpha": [0.05], "reps": {reps}, "seed": 7,
            "method": {{"quantile": "quadrature", "lambda": "analytic"}}}}"#
    ))
}

#[test]
fn config_validation() {
    let ok = normal_scale(r#""1/sigma""#, "10", 100);
    assert_eq!(ok.family_key().unwrap(), "normal-ls:scale");
    assert!(ok.resolve().is_ok());
    assert!(matches!(normal_scale(r#""1/sigma""#, "10", 99).resolve(), Err(Error::Config(_))));
    assert!(matches!(normal_scale(r#""nope""#, "10", 100).resolve(), Err(Error::Config(_))));
    let no_seed = r#"{"family": "normal-ls", "interest": "scale", "priors": ["flat"], "theta": [1.0, 0.0],
        "n": [10], "alpha": [0.05], "reps": 100, "method": {"quantile": "refined", "lambda": "mc"}}"#;
    assert!(ExperimentConfig::from_json(no_seed).is_err());
    let mut bad = ok.clone();
    bad.theta = vec![-1.0, 0.0];
    assert!(bad.resolve().is_err());
    bad = ok.clone();
    bad.family = "normal-ls:loc".into();
    assert!(bad.resolve().is_err());
}

#[test]
fn runs_are_deterministic() {
    let mut cfg = normal_scale(r#""1/sigma", "flat""#, "10", 100);
    cfg.family = "cauchy-ls".into();
    cfg.method.quantile = QuantileMethod::Refined;
    let a = run_unconditional(&cfg, RunOptions::default()).unwrap();
    let b = run_unconditional(&cfg, RunOptions::default()).unwrap();
    assert_eq!(a.to_csv().unwrap(), b.to_csv().unwrap());
    assert!(a.to_csv().unwrap().starts_with(CSV_HEADER));
    assert_eq!(a.rows.len(), 2);
    for r in &a.rows {
        assert!((0.0..=1.0).contains(&r.coverage));
        assert!((r.mc_se - (r.coverage * (1.0 - r.coverage) / 100.0).sqrt()).abs() < 1e-15);
    }
}

#[test]
fn pivotal_limits_agree_with_direct_quadrature() {
    let f = family("normal-ls:scale").unwrap();
    let p = prior("1/sigma^2", f.as_ref()).unwrap();
    let q = pivotal_limits(f.as_ref(), p.as_ref(), 9, &[0.05, 0.2], QuantileMethod::Quadrature)
        .unwrap()
        .unwrap();
    let y = Sample::new(vec![0.3, -1.2, 2.2, 0.4, 1.9, -0.7, 0.1, 0.8, 1.5]).unwrap();
    let profile = Profile::new(f.as_ref(), &y).unwrap();
    let direct = limits(&profile, p.as_ref(), &[0.05, 0.2], QuantileMethod::Quadrature, true).unwrap();
    let sigma = profile.fit.theta_hat[0];
    for (q, d) in q.iter().zip(&direct) {
        assert!((sigma * q - d).abs() < 1e-7 * d, "{} vs {d}", sigma * q);
    }
    let c = family("cauchy-ls").unwrap();
    let pc = prior("1/sigma", c.as_ref()).unwrap();
    assert!(pivotal_limits(c.as_ref(), pc.as_ref(), 9, &[0.05], QuantileMethod::Quadrature).unwrap().is_none());
}

#[test]
fn student_t_coverage() {
    let mut cfg = normal_scale(r#""1/sigma""#, "10", 2000);
    cfg.interest = "location".into();
    cfg.theta = vec![0.0, 1.0];
    let t = run_unconditional(&cfg, RunOptions::default()).unwrap();
    let r = &t.rows[0];
    assert!((r.coverage - 0.95).abs() < 4.0 * r.mc_se, "{r:?}");
    assert!(t.failures.is_empty());
}

#[test]
fn rate_study_needs_three_sizes() {
    let cfg = normal_scale(r#""1/sigma""#, "10, 10, 20", 100);
    assert!(matches!(run_rate_study(&cfg, RunOptions::default()), Err(Error::Config(_))));
}

#[test]
fn slope_recovers_known_rate() {
    let points: Vec<RatePoint> = [10usize, 20, 40, 80]
        .iter()
        .map(|&n| {
            let error = 0.3 / n as f64;
            RatePoint {
                n,
                coverage: 0.95 + error,
                mc_se: 1e-4,
                error,
                resolved: true,
            }
        })
        .collect();
    match fit_rate(&points, Stream::new(1)) {
        RateOutcome::Slope { slope, ci_low, ci_high, .. } => {
            assert!((slope + 1.0).abs() < 1e-10);
            assert!(ci_low < slope && slope < ci_high);
        }
        o => panic!("{o:?}"),
    }
    let flat: Vec<RatePoint> = points
        .iter()
        .map(|p| RatePoint { resolved: false, ..p.clone() })
        .collect();
    assert_eq!(fit_rate(&flat, Stream::new(1)), RateOutcome::RateUnresolvable);
}

#[test]
fn conditional_rows_and_average() {
    let cfg = config(
        r#"{"family": "cauchy-ls", "interest": "location", "priors": ["1/sigma"], "theta": [0.0, 1.0],
            "n": [8], "alpha": [0.05], "reps": 100, "seed": 3,
            "method": {"quantile": "quadrature", "lambda": "analytic"}}"#,
    );
    let configs = sample_configurations(&cfg, 8, 2).unwrap();
    let t = run_conditional(&cfg, &configs, RunOptions::default()).unwrap();
    assert_eq!(t.per_a.len(), 2);
    for r in &t.per_a {
        assert!((r.coverage - 0.95).abs() < 2e-3, "{r:?}");
        assert!(r.residual4.abs() < 1e-8);
    }
    let avg = &t.averaged.rows[0];
    assert!((avg.coverage - (t.per_a[0].coverage + t.per_a[1].coverage) / 2.0).abs() < 1e-15);
    assert!(t.per_a_csv().unwrap().lines().count() == 3);
}
