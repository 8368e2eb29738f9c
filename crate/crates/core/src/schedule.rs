//! Variance schedule and every scalar derived from it.
//!
//! Time-steps are 1-based (`1..=T`). `ᾱ₀ := 1`, which makes the posterior at
//! `t = 1` collapse onto `x₀`.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// Parameters that fully determine a linear schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ScheduleConfig {
    /// T = 1000, β from 1e-4 to 0.02.
    pub const REFERENCE: Self = Self {
        steps: 1000,
        beta_start: 1e-4,
        beta_end: 0.02,
    };

    pub fn build(&self) -> Result<VarianceSchedule> {
        VarianceSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

/// Immutable, precomputed schedule arrays (index `t - 1` holds step `t`).
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceSchedule {
    config: ScheduleConfig,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    snr: Vec<f64>,
    lambda_p: Vec<f64>,
    w_p: Vec<f64>,
    lambda: Vec<f64>,
    w: Vec<f64>,
    posterior_coef_x0: Vec<f64>,
    posterior_coef_xt: Vec<f64>,
    posterior_var: Vec<f64>,
}

/// PDAE ε-space weights and their x₀-space counterparts.
#[derive(Debug, Clone, PartialEq)]
pub struct PdaeWeights {
    pub lambda_p: Vec<f64>,
    pub w_p: Vec<f64>,
    pub lambda: Vec<f64>,
    pub w: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Posterior {
    pub coef_x0: f64,
    pub coef_xt: f64,
    pub var: f64,
}

impl VarianceSchedule {
    /// β linearly spaced over `steps` values, both endpoints included.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        ensure!(steps >= 2, "schedule needs T >= 2, got {steps}");
        ensure!(
            beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0,
            "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
        );
        let beta: Vec<f64> = (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect();
        Ok(Self::from_betas(
            ScheduleConfig {
                steps,
                beta_start,
                beta_end,
            },
            beta,
        ))
    }

    fn from_betas(config: ScheduleConfig, beta: Vec<f64>) -> Self {
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar: Vec<f64> = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        let snr: Vec<f64> = alpha_bar.iter().map(|ab| ab / (1.0 - ab)).collect();
        let prev = |i: usize| if i == 0 { 1.0 } else { alpha_bar[i - 1] };

        let mut s = Self {
            config,
            lambda_p: Vec::with_capacity(beta.len()),
            w_p: Vec::with_capacity(beta.len()),
            lambda: Vec::with_capacity(beta.len()),
            w: Vec::with_capacity(beta.len()),
            posterior_coef_x0: Vec::with_capacity(beta.len()),
            posterior_coef_xt: Vec::with_capacity(beta.len()),
            posterior_var: Vec::with_capacity(beta.len()),
            beta: Vec::new(),
            alpha: Vec::new(),
            alpha_bar: Vec::new(),
            snr: Vec::new(),
        };
        for i in 0..beta.len() {
            let (b, a, ab, r) = (beta[i], alpha[i], alpha_bar[i], snr[i]);
            let ab_prev = prev(i);
            let lp = (1.0 / (1.0 + r)).powf(0.9) * (r / (1.0 + r)).powf(0.1);
            s.lambda_p.push(lp);
            s.w_p.push(a.sqrt() * (1.0 - ab_prev) / (1.0 - ab).sqrt());
            s.lambda.push(r * lp);
            s.w.push((a / ab).sqrt() * (1.0 - ab));
            s.posterior_coef_x0.push(ab_prev.sqrt() * b / (1.0 - ab));
            s.posterior_coef_xt.push(a.sqrt() * (1.0 - ab_prev) / (1.0 - ab));
            s.posterior_var.push((1.0 - ab_prev) * b / (1.0 - ab));
        }
        s.beta = beta;
        s.alpha = alpha;
        s.alpha_bar = alpha_bar;
        s.snr = snr;
        s
    }

    pub fn config(&self) -> ScheduleConfig {
        self.config
    }

    /// Total number of time-steps `T`.
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn idx(&self, t: usize) -> usize {
        assert!(
            (1..=self.steps()).contains(&t),
            "time-step {t} outside 1..={}",
            self.steps()
        );
        t - 1
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        ensure!(
            (1..=self.steps()).contains(&t),
            "time-step {t} outside 1..={}",
            self.steps()
        );
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[self.idx(t)]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[self.idx(t)]
    }

    /// `ᾱ_t`, with `ᾱ₀ = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[self.idx(t)]
        }
    }

    pub fn snr(&self, t: usize) -> f64 {
        self.snr[self.idx(t)]
    }

    /// x₀-space time-step weight `λ_t = SNR(t)·λ_t^p`.
    pub fn lambda(&self, t: usize) -> f64 {
        self.lambda[self.idx(t)]
    }

    /// x₀-space compensate strength `w_t = √(α_t/ᾱ_t)·(1−ᾱ_t)`.
    pub fn w(&self, t: usize) -> f64 {
        self.w[self.idx(t)]
    }

    pub fn lambda_p(&self, t: usize) -> f64 {
        self.lambda_p[self.idx(t)]
    }

    pub fn w_p(&self, t: usize) -> f64 {
        self.w_p[self.idx(t)]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn snrs(&self) -> &[f64] {
        &self.snr
    }

    pub fn pdae_weights(&self) -> PdaeWeights {
        PdaeWeights {
            lambda_p: self.lambda_p.clone(),
            w_p: self.w_p.clone(),
            lambda: self.lambda.clone(),
            w: self.w.clone(),
        }
    }

    /// Parameters of `q(x_{t-1} | x_t, x₀)`.
    pub fn posterior(&self, t: usize) -> Result<Posterior> {
        self.check_t(t)?;
        let i = t - 1;
        Ok(Posterior {
            coef_x0: self.posterior_coef_x0[i],
            coef_xt: self.posterior_coef_xt[i],
            var: self.posterior_var[i],
        })
    }

    /// CSV with header `t,beta,alpha_bar,snr,lambda,w`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,beta,alpha_bar,snr,lambda,w\n");
        for i in 0..self.steps() {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                i + 1,
                self.beta[i],
                self.alpha_bar[i],
                self.snr[i],
                self.lambda[i],
                self.w[i]
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference() -> VarianceSchedule {
        ScheduleConfig::REFERENCE.build().unwrap()
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
    }

    #[test]
    fn first_step_values() {
        let s = reference();
        assert!(rel(s.alpha_bar(1), 0.9999) < 1e-12);
        assert!(rel(s.w(1), 1e-4) < 1e-9);
        assert!(rel(s.snr(1), 9999.0) < 1e-9);
    }

    #[test]
    fn alpha_bar_matches_sequential_product() {
        let s = reference();
        let mut prod = 1.0f64;
        for t in 1..=1000 {
            let beta = 1e-4 + (0.02 - 1e-4) * (t - 1) as f64 / 999.0;
            prod *= 1.0 - beta;
        }
        assert!(rel(s.alpha_bar(1000), prod) < 1e-12);
    }

    #[test]
    fn monotone_and_bounded() {
        let s = reference();
        assert!(s.alpha_bar(1) < 1.0);
        for t in 2..=s.steps() {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert!(s.snr(t) < s.snr(t - 1));
            assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
        }
    }

    #[test]
    fn lambda_identity_and_positivity() {
        let s = reference();
        for t in 1..=s.steps() {
            let ab = s.alpha_bar(t);
            let expect = ab / (1.0 - ab) * s.lambda_p(t);
            assert!(rel(s.lambda(t), expect) < 1e-6);
            assert!(s.lambda(t) > 0.0 && s.lambda(t).is_finite());
            let w = (s.alpha(t) / ab).sqrt() * (1.0 - ab);
            assert!(rel(s.w(t), w) < 1e-12);
        }
    }

    #[test]
    fn lambda_p_first_step() {
        let s = reference();
        let expect = (1.0f64 / 10000.0).powf(0.9) * (9999.0f64 / 10000.0).powf(0.1);
        assert!(rel(s.lambda_p(1), expect) < 1e-6);
    }

    /// `w_t / w_t^p` equals `√(1−ᾱ_t)/√ᾱ_t` up to the factor
    /// `(1−ᾱ_t)/(1−ᾱ_{t−1})`, because `w_t^p` carries `1−ᾱ_{t−1}` while `w_t`
    /// carries `1−ᾱ_t`. At `t = 1` the PDAE strength is exactly zero.
    #[test]
    fn w_relation_to_pdae_strength() {
        let s = reference();
        assert_eq!(s.w_p(1), 0.0);
        for t in 2..=s.steps() {
            let ab = s.alpha_bar(t);
            let ratio = s.w(t) / s.w_p(t);
            let expect = ((1.0 - ab) / ab).sqrt() * (1.0 - ab) / (1.0 - s.alpha_bar(t - 1));
            assert!(rel(ratio, expect) < 1e-9, "t={t}");
        }
        // the factor tends to 1 once ᾱ has decayed
        let t = 1000;
        let ratio = s.w(t) / s.w_p(t);
        let plain = ((1.0 - s.alpha_bar(t)) / s.alpha_bar(t)).sqrt();
        assert!(rel(ratio, plain) < 1e-3);
    }

    #[test]
    fn posterior_at_first_step_collapses() {
        let s = reference();
        let p = s.posterior(1).unwrap();
        assert!(rel(p.coef_x0, 1.0) < 1e-12);
        assert_eq!(p.coef_xt, 0.0);
        assert_eq!(p.var, 0.0);
        assert!(s.posterior(0).is_err());
        assert!(s.posterior(1001).is_err());
    }

    #[test]
    fn posterior_mean_of_noise_free_input() {
        let s = reference();
        for t in [2, 10, 500, 1000] {
            let p = s.posterior(t).unwrap();
            let x0 = 0.7;
            let xt = s.alpha_bar(t).sqrt() * x0;
            let mean = p.coef_x0 * x0 + p.coef_xt * xt;
            assert!(rel(mean, s.alpha_bar(t - 1).sqrt() * x0) < 1e-12, "t={t}");
        }
    }

    #[test]
    fn posterior_midpoint_rederived() {
        let s = reference();
        let p = s.posterior(500).unwrap();
        // independent re-derivation from the β list
        let betas: Vec<f64> = (1..=1000)
            .map(|t| 1e-4 + (0.02 - 1e-4) * (t - 1) as f64 / 999.0)
            .collect();
        let ab = |t: usize| betas[..t].iter().map(|b| 1.0 - b).product::<f64>();
        let (ab_t, ab_prev, b) = (ab(500), ab(499), betas[499]);
        assert!(rel(p.coef_x0, ab_prev.sqrt() * b / (1.0 - ab_t)) < 1e-10);
        assert!(rel(p.coef_xt, (1.0 - b).sqrt() * (1.0 - ab_prev) / (1.0 - ab_t)) < 1e-10);
        assert!(rel(p.var, (1.0 - ab_prev) * b / (1.0 - ab_t)) < 1e-10);
    }

    #[test]
    fn invalid_endpoints_rejected() {
        assert!(VarianceSchedule::linear(1, 1e-4, 0.02).is_err());
        assert!(VarianceSchedule::linear(10, 0.0, 0.02).is_err());
        assert!(VarianceSchedule::linear(10, 0.03, 0.02).is_err());
        assert!(VarianceSchedule::linear(10, 1e-4, 1.0).is_err());
    }

    #[test]
    fn csv_has_one_row_per_step() {
        let s = VarianceSchedule::linear(5, 1e-4, 0.02).unwrap();
        let csv = s.to_csv();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], "t,beta,alpha_bar,snr,lambda,w");
        assert_eq!(lines.len(), 6);
    }
}
