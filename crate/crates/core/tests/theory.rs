use diti_core::schedule::VarianceSchedule;
use diti_core::seed;
use diti_core::theory::{self, AttributeLossQuery, LossTimeQuery};
use proptest::prelude::*;
use rand::Rng;

fn reference() -> VarianceSchedule {
    VarianceSchedule::linear(1000, 1e-4, 0.02).unwrap()
}

#[test]
fn schedule_monotone_and_lambda_identity() {
    for s in [reference(), VarianceSchedule::linear(100, 1e-4, 0.02).unwrap()] {
        for t in 1..s.steps() {
            assert!(s.alpha_bar(t + 1) < s.alpha_bar(t));
            assert!(s.snr(t + 1) < s.snr(t));
        }
        for t in 1..=s.steps() {
            let ab = s.alpha_bar(t);
            let expect = ab / (1.0 - ab) * s.lambda_p(t);
            assert!((s.lambda(t) - expect).abs() <= 1e-6 * expect.abs(), "t {t}");
        }
    }
}

#[test]
fn two_dimensional_oracle_agreement() {
    let s = reference();
    let mut rng = seed::stream(3, "theory-2d");
    for _ in 0..10 {
        let t = rng.random_range(1..=s.steps());
        let ab = s.alpha_bar(t);
        let arg: f64 = rng.random_range(0.1..1.4);
        let delta = arg * 2.0 * (2.0 * (1.0 - ab)).sqrt() / ab.sqrt();
        let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let x0 = [0.3f32, -0.2];
        let y0 = [x0[0] + (delta * angle.cos()) as f32, x0[1] + (delta * angle.sin()) as f32];
        let d = ((f64::from(y0[0]) - f64::from(x0[0])).powi(2) + (f64::from(y0[1]) - f64::from(x0[1])).powi(2)).sqrt();
        let exact = theory::err_closed_form(AttributeLossQuery {
            delta_norm: d,
            t,
            schedule: &s,
        });
        let n = 200_000;
        let mc = theory::ovl_monte_carlo(&x0, &y0, t, &s, n, rng.random()).unwrap();
        assert!((mc - exact).abs() <= theory::binomial_3sigma(exact, n), "t {t}: {mc} vs {exact}");
    }
}

#[test]
fn loss_time_at_half_signal() {
    // Err = ½·erfc(√ᾱΔ / (2√(2(1−ᾱ)))) = 0.02275 ⇔ the argument is 2/√2, i.e. ᾱ = ½ for Δ = 4
    let s = reference();
    let q = LossTimeQuery::new(0.02275, vec![4.0]).unwrap();
    let t = theory::find_loss_time(&q, &s).unwrap();
    let scan = (1..=s.steps())
        .find(|&t| theory::mean_err_over_dataset(&q, t, &s).unwrap() >= q.tau)
        .unwrap();
    assert_eq!(t, scan);
    assert!((s.alpha_bar(t) - 0.5).abs() < 0.01, "ᾱ_{t} = {}", s.alpha_bar(t));
}

#[test]
fn binary_search_matches_linear_scan() {
    let mut rng = seed::stream(4, "loss-time");
    for _ in 0..100 {
        let steps = rng.random_range(10..400);
        let beta_end = rng.random_range(0.005..0.05);
        let s = VarianceSchedule::linear(steps, 1e-4, beta_end).unwrap();
        let n = rng.random_range(1..20);
        let deltas: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..6.0)).collect();
        let q = LossTimeQuery::new(rng.random_range(0.01..0.5), deltas).unwrap();
        let scan = (1..=steps).find(|&t| theory::mean_err_over_dataset(&q, t, &s).unwrap() >= q.tau);
        assert_eq!(theory::find_loss_time(&q, &s), scan);
    }
}

#[test]
fn invalid_queries_are_rejected() {
    assert!(LossTimeQuery::new(0.0, vec![1.0]).is_err());
    assert!(LossTimeQuery::new(0.6, vec![1.0]).is_err());
    assert!(LossTimeQuery::new(0.1, vec![]).is_err());
    assert!(LossTimeQuery::new(0.1, vec![-1.0]).is_err());
    assert!(theory::stochastic_dominance(&[], &[1.0]).is_err());
    assert!(theory::ovl_monte_carlo(&[0.0], &[1.0, 2.0], 5, &reference(), 10, 0).is_err());
}

proptest! {
    #[test]
    fn error_is_bounded(delta in 0.0f64..100.0, t in 1usize..=1000) {
        let s = reference();
        let e = theory::err_closed_form(AttributeLossQuery { delta_norm: delta, t, schedule: &s });
        prop_assert!((0.0..=0.5).contains(&e));
    }

    #[test]
    fn eps_and_x0_residuals_agree(
        x0 in prop::collection::vec(-1.0f64..1.0, 8),
        eps in prop::collection::vec(-3.0f64..3.0, 8),
        x0_hat in prop::collection::vec(-1.0f64..1.0, 8),
        t in 1usize..=1000,
    ) {
        let s = reference();
        let ab = s.alpha_bar(t);
        let x_t: Vec<f64> = x0.iter().zip(&eps).map(|(x, e)| ab.sqrt() * x + (1.0 - ab).sqrt() * e).collect();
        let eps_hat: Vec<f64> = x_t.iter().zip(&x0_hat).map(|(xt, xh)| (xt - ab.sqrt() * xh) / (1.0 - ab).sqrt()).collect();
        let lhs: f64 = eps.iter().zip(&eps_hat).map(|(a, b)| (a - b).powi(2)).sum();
        let rhs: f64 = ab / (1.0 - ab) * x0.iter().zip(&x0_hat).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        prop_assert!((lhs - rhs).abs() <= 1e-5 * lhs.max(rhs).max(1e-12), "{} vs {}", lhs, rhs);
    }

    #[test]
    fn dominance_implies_later_loss(
        fine in prop::collection::vec(0.1f64..2.0, 1..30),
        gap in 0.05f64..3.0,
        tau in 0.05f64..0.45,
    ) {
        let s = VarianceSchedule::linear(100, 1e-4, 0.02).unwrap();
        let coarse: Vec<f64> = fine.iter().map(|d| d + gap).collect();
        let tf = theory::loss_time_or_end(&LossTimeQuery::new(tau, fine.clone()).unwrap(), &s);
        let tc = theory::loss_time_or_end(&LossTimeQuery::new(tau, coarse.clone()).unwrap(), &s);
        prop_assert!(theory::stochastic_dominance(&coarse, &fine).unwrap());
        prop_assert!(tc >= tf);
    }
}
