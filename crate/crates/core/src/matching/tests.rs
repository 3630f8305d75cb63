use super::*;
use crate::bayes::mu_b;
use crate::likelihood::Profile;
use crate::model::{family, prior};

fn field(key: &str, n: usize) -> (std::sync::Arc<dyn ModelFamily>, usize) {
    (family(key).unwrap(), n)
}

#[test]
fn mu_f_hand_values_for_normal() {
    let (f, n) = field("normal-ls", 10);
    let a = analytic_lambda(f.as_ref(), &[0.0, 1.0], n).unwrap();
    assert!(mu_f(&a).abs() < 1e-12);
    let (g, _) = field("normal-ls:scale", 10);
    for n in [10, 40] {
        let a = analytic_lambda(g.as_ref(), &[1.0, 0.0], n).unwrap();
        let hand = -5.0 / 6.0 * (2.0 / n as f64).sqrt();
        assert!((mu_f(&a) - hand).abs() < 1e-10, "{} vs {hand}", mu_f(&a));
    }
}

#[test]
fn mu_f_is_scale_free() {
    for key in ["normal-ls:scale", "cauchy-ls", "gumbel-ls", "gumbel-ls:scale"] {
        let f = family(key).unwrap();
        let v = f.location_scale().unwrap();
        let a = analytic_lambda(f.as_ref(), &v.slots(0.3, 1.0), 12).unwrap();
        let b = analytic_lambda(f.as_ref(), &v.slots(0.3, 3.0), 12).unwrap();
        assert!((mu_f(&a) - mu_f(&b)).abs() < 1e-8, "{key}");
    }
}

#[test]
fn welch_peers_examples() {
    let n = 10;
    let f = family("normal-ls").unwrap();
    let fld = AnalyticField { family: f.as_ref(), n };
    let p = prior("1/sigma", f.as_ref()).unwrap();
    let w = welch_peers_residual(&fld, p.as_ref(), &[0.4, 1.3]).unwrap();
    assert!(w.residual.abs() <= 1e-8);

    let g = family("normal-ls:scale").unwrap();
    let fld = AnalyticField { family: g.as_ref(), n };
    for pk in ["exp(mu)/sigma", "1/sigma"] {
        let p = prior(pk, g.as_ref()).unwrap();
        let w = welch_peers_residual(&fld, p.as_ref(), &[1.3, 0.4]).unwrap();
        assert!(w.residual.abs() <= 1e-8, "{pk} {}", w.residual);
    }
    let flat = prior("flat", g.as_ref()).unwrap();
    let w = welch_peers_residual(&fld, flat.as_ref(), &[1.3, 0.4]).unwrap();
    assert_eq!(w.lhs, 0.0);
    assert!((w.residual.abs() - 1.0 / (2.0 * n as f64).sqrt()).abs() < 1e-8);
}

#[test]
fn welch_peers_holds_for_non_orthogonal_kernel() {
    let f = family("gumbel-ls").unwrap();
    let fld = AnalyticField { family: f.as_ref(), n: 15 };
    let p = prior("1/sigma", f.as_ref()).unwrap();
    let a = fld.at(&[0.2, 1.7]).unwrap();
    assert!(a.lambda_up_rs[(0, 1)].abs() > 1e-3);
    let w = welch_peers_residual(&fld, p.as_ref(), &[0.2, 1.7]).unwrap();
    assert!(w.residual.abs() <= 1e-8, "{}", w.residual);
}

#[test]
fn a_f_scales_as_inverse_n() {
    for key in ["normal-ls:scale", "cauchy-ls", "gumbel-ls"] {
        let f = family(key).unwrap();
        let t = f.location_scale().unwrap().slots(0.0, 1.0);
        let a = a_f(&analytic_lambda(f.as_ref(), &t, 10).unwrap()).unwrap();
        let b = a_f(&analytic_lambda(f.as_ref(), &t, 40).unwrap()).unwrap();
        let ratio = a / b;
        assert!((3.2..=4.8).contains(&ratio), "{key} {ratio}");
    }
}

#[test]
fn zeroing_nu_interest_entries_changes_nothing() {
    let f = family("gumbel-ls:scale").unwrap();
    let mut a = analytic_lambda(f.as_ref(), &[1.2, 0.3], 10).unwrap();
    let before = a_f(&a).unwrap();
    for r in 0..2 {
        a.nu_up_rs[(0, r)] = 0.0;
        a.nu_up_rs[(r, 0)] = 0.0;
    }
    assert_eq!(a_f(&a).unwrap(), before);
    a.lambda_rst_slash_u = None;
    assert!(matches!(a_f(&a), Err(Error::Missing(_))));
}

#[test]
fn second_order_examples() {
    let n = 10;
    let f = family("normal-ls").unwrap();
    let fld = AnalyticField { family: f.as_ref(), n };
    let p = prior("1/sigma", f.as_ref()).unwrap();
    let r = second_order_residual(&fld, p.as_ref(), &[0.4, 1.3]).unwrap();
    assert!(r.abs() <= 1e-5, "{r}");

    let c = family("cauchy-ls:scale").unwrap();
    let fld = AnalyticField { family: c.as_ref(), n };
    let p = prior("exp(mu)/sigma", c.as_ref()).unwrap();
    let r = second_order_residual(&fld, p.as_ref(), &[1.3, 0.4]).unwrap();
    assert!(r.abs() <= 1e-5, "{r}");

    // sigma^-k with sigma of interest: (1 - k)(5/6 - (2 - k)/2) / n
    let g = family("normal-ls:scale").unwrap();
    let fld = AnalyticField { family: g.as_ref(), n };
    let p = prior("1/sigma^2", g.as_ref()).unwrap();
    let r = second_order_residual(&fld, p.as_ref(), &[1.3, 0.4]).unwrap();
    assert!((r + 5.0 / (6.0 * n as f64)).abs() < 1e-7, "{r}");
    assert!(r.abs() > 10.0 * ANALYTIC_TOL);
}

#[test]
fn f_theta_at_mle_is_mu_b() {
    let f = family("cauchy-ls:scale").unwrap();
    let y = Sample::new(vec![0.3, 1.4, -2.2, 0.9, 1.1, 3.0, 0.2, -0.4]).unwrap();
    let p = prior("exp(mu)/sigma", f.as_ref()).unwrap();
    let prof = Profile::new(f.as_ref(), &y).unwrap();
    let hat = prof.hat(Some(p.as_ref())).unwrap();
    let a = eval_f_theta(f.as_ref(), &y, p.as_ref(), &prof.fit.theta_hat).unwrap();
    assert_eq!(a, mu_b(&hat).unwrap());
    // the prior term is H pi_r L^r1
    let flat = prior("flat", f.as_ref()).unwrap();
    let b = eval_f_theta(f.as_ref(), &y, flat.as_ref(), &prof.fit.theta_hat).unwrap();
    let c = col(&hat.l_up_rs);
    let pr = hat.pi_r.as_ref().unwrap();
    let term = hat.h * (pr[0] * c[0] + pr[1] * c[1]);
    assert!((a - b - term).abs() < 1e-12);
}

#[test]
fn grid_policy() {
    let f = family("normal-ls").unwrap();
    let grid = default_grid(f.as_ref(), &[0.0, 1.0]);
    assert_eq!(grid.len(), 9);
    assert!(grid.contains(&vec![-1.0, 0.5]) && grid.contains(&vec![1.0, 2.0]));
    let fld = AnalyticField { family: f.as_ref(), n: 10 };
    let good = match_check(&fld, 10, prior("1/sigma", f.as_ref()).unwrap().as_ref(), &grid, 2).unwrap();
    assert!(good.passes_first_order);
    assert_eq!(good.passes_second_order, Some(true));
    assert!(good.rows.iter().all(|r| r.warning.is_none() && r.sigma2_f > 0.0));
    let g = family("normal-ls:scale").unwrap();
    let fld = AnalyticField { family: g.as_ref(), n: 10 };
    let grid = default_grid(g.as_ref(), &[1.0, 0.0]);
    let bad = match_check(&fld, 10, prior("flat", g.as_ref()).unwrap().as_ref(), &grid, 2).unwrap();
    assert!(!bad.passes_first_order);
    assert!(bad.rows.iter().all(|r| r.warning.is_some()));
    assert!(match_check(&fld, 10, prior("flat", g.as_ref()).unwrap().as_ref(), &grid, 3).is_err());
}

#[test]
fn monte_carlo_field_reproduces_flat_prior_residual() {
    let g = family("normal-ls:scale").unwrap();
    let n = 10;
    let fld = MonteCarloField {
        family: g.as_ref(),
        n,
        reps: 4000,
        stream: Stream::new(99),
    };
    let flat = prior("flat", g.as_ref()).unwrap();
    let s = match_check(&fld, n, flat.as_ref(), &[vec![1.0, 0.0]], 1).unwrap();
    let row = &s.rows[0];
    let se = row.wp_se.unwrap();
    assert!(se > 0.0 && se < 0.05, "{se}");
    assert!((row.wp_residual + 1.0 / (2.0 * n as f64).sqrt()).abs() < 4.0 * se + 1e-3);
    assert!(!s.passes_first_order);
}
