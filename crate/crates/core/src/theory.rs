//! Attribute loss under the forward process.
//!
//! Two samples `x₀`, `y₀` that differ only in one attribute become
//! `N(√ᾱ_t·x₀, (1−ᾱ_t)I)` and `N(√ᾱ_t·y₀, (1−ᾱ_t)I)` after noising. The best
//! any reconstructor can do is the Bayes rule between these two Gaussians,
//! and its error rate is half their overlapping coefficient:
//!
//! ```text
//! Err(x₀, y₀, t) = ½·[1 − erf(√ᾱ_t·‖y₀ − x₀‖ / (2·√(2(1−ᾱ_t))))]
//! ```
//!
//! The error is strictly increasing in `t`, so each attribute has a smallest
//! time-step at which its mean error over a dataset first reaches a threshold
//! τ. Attributes whose intervention distances stochastically dominate lose
//! later.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{ensure, Result};
use crate::schedule::VarianceSchedule;
use crate::seed;

#[derive(Debug, Clone, Copy)]
pub struct AttributeLossQuery<'a> {
    pub delta_norm: f64,
    pub t: usize,
    pub schedule: &'a VarianceSchedule,
}

#[derive(Debug, Clone)]
pub struct LossTimeQuery {
    /// Loss degree threshold in `(0, 0.5]`.
    pub tau: f64,
    /// `‖x₀ − g_i·x₀‖` over a dataset.
    pub delta_norms: Vec<f64>,
}

impl LossTimeQuery {
    pub fn new(tau: f64, delta_norms: Vec<f64>) -> Result<Self> {
        ensure!(tau > 0.0 && tau <= 0.5, "tau must lie in (0, 0.5], got {tau}");
        ensure!(!delta_norms.is_empty(), "loss-time query needs at least one distance");
        ensure!(
            delta_norms.iter().all(|d| *d >= 0.0 && d.is_finite()),
            "distances must be finite and non-negative"
        );
        Ok(Self { tau, delta_norms })
    }
}

/// Err as a function of `ᾱ` directly.
pub fn err_at_alpha_bar(delta_norm: f64, alpha_bar: f64) -> f64 {
    if delta_norm == 0.0 {
        return 0.5;
    }
    let arg = alpha_bar.sqrt() * delta_norm / (2.0 * (2.0 * (1.0 - alpha_bar)).sqrt());
    0.5 * libm::erfc(arg)
}

pub fn err_closed_form(q: AttributeLossQuery<'_>) -> f64 {
    err_at_alpha_bar(q.delta_norm, q.schedule.alpha_bar(q.t))
}

/// Misclassification rate of the nearest-noisy-mean rule on `n` draws,
/// half from `q(x_t|x₀)` and half from `q(y_t|y₀)`.
///
/// Nearest mean is the likelihood-ratio rule for two Gaussians with equal
/// isotropic covariance, so this is an unbiased estimate of `Err`. Exact ties
/// (only possible when `x₀ == y₀`) are broken by a fair coin.
pub fn ovl_monte_carlo(
    x0: &[f32],
    y0: &[f32],
    t: usize,
    schedule: &VarianceSchedule,
    n: usize,
    seed: u64,
) -> Result<f64> {
    ensure!(x0.len() == y0.len(), "x0 and y0 must have the same length");
    ensure!(n >= 1, "need at least one Monte-Carlo sample");
    schedule.check_t(t)?;
    let ab = schedule.alpha_bar(t);
    let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
    let mx: Vec<f64> = x0.iter().map(|&v| sa * f64::from(v)).collect();
    let my: Vec<f64> = y0.iter().map(|&v| sa * f64::from(v)).collect();

    const CHUNK: usize = 1 << 16;
    let n_x = n / 2;
    let mut errors = 0u64;
    let mut sample = vec![0.0f64; mx.len()];
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        let mut rng = seed::stream(seed, &format!("ovl-mc/{start}"));
        for i in start..end {
            let (own, other) = if i < n_x { (&mx, &my) } else { (&my, &mx) };
            for (s, m) in sample.iter_mut().zip(own.iter()) {
                let e: f64 = rng.sample(StandardNormal);
                *s = m + sn * e;
            }
            let d_own: f64 = sample.iter().zip(own).map(|(a, b)| (a - b) * (a - b)).sum();
            let d_other: f64 = sample.iter().zip(other).map(|(a, b)| (a - b) * (a - b)).sum();
            let wrong = if d_own == d_other {
                rng.random_bool(0.5)
            } else {
                d_other < d_own
            };
            errors += u64::from(wrong);
        }
        start = end;
    }
    Ok(errors as f64 / n as f64)
}

/// Half-width of a 3σ binomial interval around `p` for `n` draws.
pub fn binomial_3sigma(p: f64, n: usize) -> f64 {
    3.0 * (p * (1.0 - p) / n as f64).sqrt()
}

pub fn mean_err_over_dataset(q: &LossTimeQuery, t: usize, schedule: &VarianceSchedule) -> Result<f64> {
    ensure!(!q.delta_norms.is_empty(), "empty dataset");
    schedule.check_t(t)?;
    let ab = schedule.alpha_bar(t);
    Ok(q.delta_norms.iter().map(|&d| err_at_alpha_bar(d, ab)).sum::<f64>() / q.delta_norms.len() as f64)
}

/// Smallest `t` whose mean error reaches `τ`, or `None` if not even `t = T` does.
///
/// Binary search is valid because the mean error is strictly increasing in `t`
/// whenever some distance is positive (and constant ½ otherwise).
pub fn find_loss_time(q: &LossTimeQuery, schedule: &VarianceSchedule) -> Option<usize> {
    let lost = |t: usize| {
        mean_err_over_dataset(q, t, schedule).expect("query validated on construction") >= q.tau
    };
    let (mut lo, mut hi) = (1usize, schedule.steps());
    if !lost(hi) {
        return None;
    }
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if lost(mid) {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    Some(lo)
}

/// First-order stochastic dominance of `a` over `b`: the empirical CDF of
/// `a` lies at or below that of `b` everywhere and strictly below somewhere.
pub fn stochastic_dominance(a: &[f64], b: &[f64]) -> Result<bool> {
    ensure!(!a.is_empty() && !b.is_empty(), "dominance needs nonempty samples");
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(f64::total_cmp);
    sb.sort_by(f64::total_cmp);
    let mut points: Vec<f64> = sa.iter().chain(&sb).copied().collect();
    points.sort_by(f64::total_cmp);
    points.dedup();
    let (na, nb) = (sa.len() as f64, sb.len() as f64);
    let (mut ia, mut ib) = (0usize, 0usize);
    let mut strict = false;
    for x in points {
        while ia < sa.len() && sa[ia] <= x {
            ia += 1;
        }
        while ib < sb.len() && sb[ib] <= x {
            ib += 1;
        }
        // compare ia/na against ib/nb without rounding
        let lhs = ia as f64 * nb;
        let rhs = ib as f64 * na;
        if lhs > rhs {
            return Ok(false);
        }
        strict |= lhs < rhs;
    }
    Ok(strict)
}

/// Loss time with "never lost" mapped to `T + 1`.
pub fn loss_time_or_end(q: &LossTimeQuery, schedule: &VarianceSchedule) -> usize {
    find_loss_time(q, schedule).unwrap_or(schedule.steps() + 1)
}

/// Checks that the coarser attribute is lost strictly later.
pub fn verify_granularity_ordering(
    deltas_coarse: &[f64],
    deltas_fine: &[f64],
    tau: f64,
    schedule: &VarianceSchedule,
) -> Result<bool> {
    ensure!(
        stochastic_dominance(deltas_coarse, deltas_fine)?,
        "coarse distances do not stochastically dominate fine distances"
    );
    let coarse = LossTimeQuery::new(tau, deltas_coarse.to_vec())?;
    let fine = LossTimeQuery::new(tau, deltas_fine.to_vec())?;
    Ok(loss_time_or_end(&coarse, schedule) > loss_time_or_end(&fine, schedule))
}
