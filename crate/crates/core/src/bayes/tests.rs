use statrs::distribution::{ChiSquared, ContinuousCDF, StudentsT};

use super::*;
use crate::model::{family, prior, FnPrior, Sample};

fn normal_data() -> Sample {
    Sample::new(vec![0.31, -1.2, 0.84, 2.05, -0.4, 0.97, 1.52, -0.66, 0.12, 0.4]).unwrap()
}

fn s_hat(y: &Sample) -> f64 {
    let m = y.mean();
    (y.values().iter().map(|v| (v - m).powi(2)).sum::<f64>() / (y.n() as f64 - 1.0)).sqrt()
}

#[test]
fn laplace_is_zero_at_the_mle() {
    let f = family("normal-ls").unwrap();
    let y = normal_data();
    let p = Profile::new(f.as_ref(), &y).unwrap();
    let pr = prior("1/sigma", f.as_ref()).unwrap();
    assert_eq!(laplace_log_posterior(&p, pr.as_ref(), p.psi_hat()).unwrap(), 0.0);
}

#[test]
fn laplace_density_tracks_student_t() {
    let f = family("normal-ls").unwrap();
    let y = normal_data();
    let n = y.n() as f64;
    let p = Profile::new(f.as_ref(), &y).unwrap();
    let pr = prior("1/sigma", f.as_ref()).unwrap();
    let scale = s_hat(&y) / n.sqrt();
    let t = StudentsT::new(0.0, 1.0, n - 1.0).unwrap();
    // normalise on a wide grid by the trapezoid rule in Student-t units
    let k = 4000;
    let grid: Vec<f64> = (0..=k).map(|i| -40.0 + 80.0 * i as f64 / k as f64).collect();
    let vals: Vec<f64> = grid
        .iter()
        .map(|z| laplace_log_posterior(&p, pr.as_ref(), p.psi_hat() + z * scale).unwrap().exp())
        .collect();
    let h = 80.0 / k as f64;
    let z: f64 = vals.windows(2).map(|w| 0.5 * h * (w[0] + w[1])).sum();
    use statrs::distribution::Continuous;
    for (x, v) in grid.iter().zip(&vals) {
        if x.abs() <= 2.0 {
            let exact = t.pdf(*x);
            assert!(((v / z) - exact).abs() <= 0.02 * exact, "{x}");
        }
    }
}

#[test]
fn flat_and_reciprocal_scale_priors_differ_by_scale_ratio() {
    let f = family("normal-ls").unwrap();
    let y = normal_data();
    let p = Profile::new(f.as_ref(), &y).unwrap();
    let flat = prior("flat", f.as_ref()).unwrap();
    let inv = prior("1/sigma", f.as_ref()).unwrap();
    for psi in [-0.5, 0.2, 1.1] {
        let (phi, _) = p.constrained(psi).unwrap();
        let d = laplace_log_posterior(&p, inv.as_ref(), psi).unwrap()
            - laplace_log_posterior(&p, flat.as_ref(), psi).unwrap();
        assert!((d - (p.phi_hat()[0] / phi[0]).ln()).abs() < 1e-12);
    }
}

#[test]
fn mu_b_vanishes_for_normal_location() {
    let f = family("normal-ls").unwrap();
    let y = normal_data();
    let p = Profile::new(f.as_ref(), &y).unwrap();
    let pr = prior("1/sigma", f.as_ref()).unwrap();
    let hat = p.hat(Some(pr.as_ref())).unwrap();
    assert!(mu_b(&hat).unwrap().abs() < 1e-12);
    assert!(matches!(mu_b(&p.hat(None).unwrap()), Err(Error::Missing(_))));
}

#[test]
fn prior_constant_does_not_move_the_moments() {
    let f = family("gumbel-ls:scale").unwrap();
    let y = normal_data();
    let p = Profile::new(f.as_ref(), &y).unwrap();
    let pr = prior("exp(mu)/sigma", f.as_ref()).unwrap();
    let scaled = FnPrior::new("scaled", {
        let pr = pr.clone();
        move |t: &[f64]| pr.log_pi(t) + 7.0f64.ln()
    });
    let a = p.hat(Some(pr.as_ref())).unwrap();
    let b = p.hat(Some(&scaled)).unwrap();
    assert!((mu_b(&a).unwrap() - mu_b(&b).unwrap()).abs() < 1e-6);
    assert!((a_b(&a).unwrap() - a_b(&b).unwrap()).abs() < 1e-4);
}

#[test]
fn observed_nu_has_no_interest_entries() {
    let f = family("cauchy-ls").unwrap();
    let y = normal_data();
    let p = Profile::new(f.as_ref(), &y).unwrap();
    let hat = p.hat(Some(prior("1/sigma", f.as_ref()).unwrap().as_ref())).unwrap();
    for r in 0..2 {
        assert_eq!(hat.v_up_rs[(0, r)], 0.0);
        assert_eq!(hat.v_up_rs[(r, 0)], 0.0);
    }
    let flat = p.hat(Some(prior("flat", f.as_ref()).unwrap().as_ref())).unwrap();
    let mut zeroed = hat.clone();
    zeroed.pi_r = flat.pi_r.clone();
    zeroed.pi_rs = flat.pi_rs.clone();
    assert_eq!(a_b(&zeroed).unwrap(), a_b(&flat).unwrap());
}

#[test]
fn oracle_reproduces_student_t_quantiles() {
    let f = family("normal-ls").unwrap();
    let y = normal_data();
    let n = y.n() as f64;
    let p = Profile::new(f.as_ref(), &y).unwrap();
    let pr = prior("1/sigma", f.as_ref()).unwrap();
    let s = quadrature_posterior(&p, pr.as_ref(), &[0.95, 0.5, 0.05], QuadOptions::default()).unwrap();
    let t = StudentsT::new(0.0, 1.0, n - 1.0).unwrap();
    for level in [0.95, 0.5, 0.05, 0.99] {
        let exact = p.psi_hat() + t.inverse_cdf(level) * s_hat(&y) / n.sqrt();
        let got = s.quantile(level).unwrap();
        assert!((got - exact).abs() < 1e-6, "{level}: {got} vs {exact}");
        let o = s.oracle().unwrap();
        assert!((o.cdf(got) - level).abs() < 1e-6);
    }
    assert_eq!(s.method, PosteriorMethod::QuadratureOracle);
    // E[R] vanishes by symmetry
    assert!(s.mu_b.abs() < 1e-8);
}

#[test]
fn oracle_reproduces_scale_posterior() {
    let f = family("normal-ls:scale").unwrap();
    let y = normal_data();
    let p = Profile::new(f.as_ref(), &y).unwrap();
    let pr = prior("1/sigma", f.as_ref()).unwrap();
    let post = marginal_posterior(&p, pr.as_ref(), QuadOptions::default()).unwrap();
    let ss: f64 = y.values().iter().map(|v| (v - y.mean()).powi(2)).sum();
    let chi = ChiSquared::new(y.n() as f64 - 1.0).unwrap();
    // the statrs chi-square inverse is only accurate to ~1e-5, so compare
    // through its cdf
    for level in [0.05, 0.5, 0.95] {
        let got = post.quantile(level).unwrap();
        let p = 1.0 - chi.cdf(ss / (got * got));
        assert!((p - level).abs() < 1e-8, "{level}: {p}");
    }
}

#[test]
fn oracle_mean_of_r_is_close_to_mu_b() {
    let ys = vec![
        0.3, 1.4, 2.2, 0.9, 1.1, 3.0, 0.5, -0.2, 1.8, 0.7, 2.6, 0.1, 1.3, 0.8, 1.9, -0.5, 1.0, 2.1, 0.4, 1.6,
    ];
    let y = Sample::new(ys).unwrap();
    for key in ["gumbel-ls", "gumbel-ls:scale", "cauchy-ls:scale"] {
        let f = family(key).unwrap();
        let p = Profile::new(f.as_ref(), &y).unwrap();
        let pr = prior("1/sigma", f.as_ref()).unwrap();
        let hat = p.hat(Some(pr.as_ref())).unwrap();
        let s = quadrature_posterior(&p, pr.as_ref(), &[], QuadOptions::default()).unwrap();
        let mb = mu_b(&hat).unwrap();
        assert!((s.mu_b - mb).abs() < 0.05, "{key}: {} vs {mb}", s.mu_b);
        let sb = sigma2_b(mb, a_b(&hat).unwrap());
        assert!((s.sigma2_b - sb).abs() < 0.1, "{key}: {} vs {sb}", s.sigma2_b);
    }
}

#[test]
fn refined_quantile_properties() {
    let f = family("normal-ls").unwrap();
    let y = normal_data();
    let p = Profile::new(f.as_ref(), &y).unwrap();
    assert_eq!(refined_quantile(&p, 0.0, 0.5).unwrap(), p.psi_hat());
    let mut last = f64::NEG_INFINITY;
    for level in [0.01, 0.05, 0.3, 0.5, 0.7, 0.95, 0.99] {
        let q = refined_quantile(&p, 0.0, level).unwrap();
        let r = p.signed_root(q).unwrap().r;
        assert!((r + normal_quantile(level)).abs() <= 1e-9);
        assert!(q > last);
        last = q;
    }
    let g = family("gamma").unwrap();
    let gy = Sample::new(vec![0.4, 1.1, 2.3, 0.8, 3.1, 1.7, 0.9, 1.2]).unwrap();
    let gp = Profile::new(g.as_ref(), &gy).unwrap();
    let q = refined_quantile(&gp, 0.1, 0.05).unwrap();
    assert!(q > 0.0 && q < gp.psi_hat());
}

#[test]
fn laplace_summary_reports_expansion() {
    let f = family("cauchy-ls").unwrap();
    let y = normal_data();
    let p = Profile::new(f.as_ref(), &y).unwrap();
    let pr = prior("1/sigma", f.as_ref()).unwrap();
    let s = laplace_summary(&p, pr.as_ref(), &[0.95]).unwrap();
    assert_eq!(s.method, PosteriorMethod::LaplaceExpansion);
    assert!(s.sigma2_b > 0.0);
    assert!(s.quantile(0.95).unwrap() > p.psi_hat());
    assert!(s.quantile(0.5).is_none());
}

#[test]
fn oracle_quantiles_are_location_scale_equivariant() {
    let f = family("cauchy-ls").unwrap();
    let pr = prior("1/sigma", f.as_ref()).unwrap();
    let y0 = normal_data();
    let (c, k) = (2.0, 3.0);
    let y1 = Sample::new(y0.values().iter().map(|v| c + k * v).collect()).unwrap();
    let opts = QuadOptions {
        check: false,
        ..QuadOptions::default()
    };
    let a = marginal_posterior(&Profile::new(f.as_ref(), &y0).unwrap(), pr.as_ref(), opts).unwrap();
    let b = marginal_posterior(&Profile::new(f.as_ref(), &y1).unwrap(), pr.as_ref(), opts).unwrap();
    let (qa, qb) = (a.quantile(0.95).unwrap(), b.quantile(0.95).unwrap());
    assert!((qb - (c + k * qa)).abs() < 1e-7);
}
