//! The x₀-predicting denoiser `u_θ`: forward noising, training, DDIM
//! sampling and DDIM inversion.
//!
//! The network itself regresses the noise; `u_θ(x_t, t)` is recovered as
//! `(x_t − √(1−ᾱ_t)·ε̂)/√ᾱ_t`. Every public entry point works in x₀ space.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use diti_tensor::{Activation, Adam, Mlp, Tape, Tensor, Var};

use crate::error::{ensure, DitiError, Result};
use crate::schedule::VarianceSchedule;
use crate::seed;

pub const TIME_EMBED_DIM: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    Relu,
    Silu,
    Tanh,
}

impl From<ActivationKind> for Activation {
    fn from(a: ActivationKind) -> Self {
        match a {
            ActivationKind::Relu => Activation::Relu,
            ActivationKind::Silu => Activation::Silu,
            ActivationKind::Tanh => Activation::Tanh,
        }
    }
}

impl ActivationKind {
    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::Relu => "relu",
            ActivationKind::Silu => "silu",
            ActivationKind::Tanh => "tanh",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Self::Relu),
            "silu" => Ok(Self::Silu),
            "tanh" => Ok(Self::Tanh),
            other => Err(DitiError::Config(format!("unknown activation {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub hidden: Vec<usize>,
    pub activation: ActivationKind,
    #[serde(default)]
    pub layer_norm: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256, 256],
            activation: ActivationKind::Silu,
            layer_norm: false,
        }
    }
}

impl NetConfig {
    pub fn widths(&self, input: usize, output: usize) -> Vec<usize> {
        let mut w = vec![input];
        w.extend(&self.hidden);
        w.push(output);
        w
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.hidden.iter().all(|&h| h > 0), "hidden widths must be positive");
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub learning_rate: f32,
    pub iterations: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub grad_clip: Option<f32>,
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.learning_rate > 0.0 && self.learning_rate.is_finite(),
            "learning rate must be positive"
        );
        ensure!(self.batch_size >= 1, "batch size must be >= 1");
        Ok(())
    }
}

/// Sinusoidal embedding of integer time-steps, `[len(ts), 64]`.
pub fn time_embedding(ts: &[usize]) -> Tensor {
    let half = TIME_EMBED_DIM / 2;
    let mut data = Vec::with_capacity(ts.len() * TIME_EMBED_DIM);
    for &t in ts {
        let t = t as f64;
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            data.push((t * freq).sin() as f32);
        }
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            data.push((t * freq).cos() as f32);
        }
    }
    Tensor::new(vec![ts.len(), TIME_EMBED_DIM], data).expect("finite embedding")
}

/// `[len(vals), cols]` tensor whose row `i` is filled with `vals[i]`.
pub(crate) fn row_broadcast(vals: &[f64], cols: usize) -> Tensor {
    let data = vals
        .iter()
        .flat_map(|&v| std::iter::repeat_n(v as f32, cols))
        .collect();
    Tensor::new(vec![vals.len(), cols], data).expect("finite coefficients")
}

#[derive(Debug, Clone)]
pub struct DenoiserModel {
    pub net: Mlp,
    pub config: NetConfig,
    pixels: usize,
}

impl DenoiserModel {
    pub fn new<R: Rng + ?Sized>(pixels: usize, config: NetConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        ensure!(pixels > 0, "denoiser needs at least one pixel");
        let widths = config.widths(pixels + TIME_EMBED_DIM, pixels);
        let net = Mlp::new(&widths, config.activation.into(), config.layer_norm, false, rng);
        Ok(Self { net, config, pixels })
    }

    pub fn from_net(net: Mlp, config: NetConfig) -> Result<Self> {
        let pixels = net.output_dim();
        ensure!(
            net.input_dim() == pixels + TIME_EMBED_DIM,
            "denoiser input width {} does not match {pixels} pixels + embedding",
            net.input_dim()
        );
        Ok(Self { net, config, pixels })
    }

    pub fn pixels(&self) -> usize {
        self.pixels
    }

    /// Records `u_θ(x_t, t)` on the tape. Parameters are bound frozen when
    /// `frozen` is set, so nothing upstream of them sees a gradient.
    pub fn forward_x0<'t>(
        &self,
        tape: &'t Tape,
        x_t: Var<'t>,
        ts: &[usize],
        s: &VarianceSchedule,
        frozen: bool,
    ) -> Result<(Var<'t>, diti_tensor::BoundMlp<'t>)> {
        let shape = x_t.shape();
        ensure!(
            shape.len() == 2 && shape[0] == ts.len() && shape[1] == self.pixels,
            "x_t shape {shape:?} does not match {} rows of {} pixels",
            ts.len(),
            self.pixels
        );
        for &t in ts {
            s.check_t(t)?;
        }
        let bound = self.net.bind(tape, frozen);
        let emb = tape.constant(time_embedding(ts));
        let eps_hat = bound.forward(x_t.concat(&emb)?)?;
        let inv_sqrt_ab: Vec<f64> = ts.iter().map(|&t| 1.0 / s.alpha_bar(t).sqrt()).collect();
        let noise_coef: Vec<f64> = ts
            .iter()
            .map(|&t| ((1.0 - s.alpha_bar(t)) / s.alpha_bar(t)).sqrt())
            .collect();
        let a = tape.constant(row_broadcast(&inv_sqrt_ab, self.pixels));
        let b = tape.constant(row_broadcast(&noise_coef, self.pixels));
        let x0 = x_t.mul(&a)?.sub(&eps_hat.mul(&b)?)?;
        Ok((x0, bound))
    }

    /// `u_θ(x_t, t)` for a batch, no gradient tracking.
    pub fn predict_x0(&self, x_t: &Tensor, ts: &[usize], s: &VarianceSchedule) -> Result<Tensor> {
        let tape = Tape::new();
        let (x0, _) = self.forward_x0(&tape, tape.leaf(x_t), ts, s, true)?;
        Ok(x0.value())
    }

    /// Same as [`predict_x0`](Self::predict_x0) with one time-step for every row.
    pub fn predict_x0_at(&self, x_t: &Tensor, t: usize, s: &VarianceSchedule) -> Result<Tensor> {
        let rows = x_t.dims2()?.0;
        self.predict_x0(x_t, &vec![t; rows], s)
    }
}

/// Strictly increasing time indices from 0 to T.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SamplingSequence {
    ts: Vec<usize>,
}

impl SamplingSequence {
    pub fn new(ts: Vec<usize>, steps: usize) -> Result<Self> {
        ensure!(ts.len() >= 2, "sampling sequence needs at least two entries");
        ensure!(ts[0] == 0, "sampling sequence must start at 0");
        ensure!(*ts.last().unwrap() == steps, "sampling sequence must end at T = {steps}");
        ensure!(
            ts.windows(2).all(|w| w[0] < w[1]),
            "sampling sequence must be strictly increasing"
        );
        Ok(Self { ts })
    }

    /// `m` evenly spaced indices, rounded.
    pub fn uniform(m: usize, steps: usize) -> Result<Self> {
        ensure!(m >= 2 && m <= steps + 1, "need 2 <= M <= T + 1, got M = {m}, T = {steps}");
        let ts = (0..m)
            .map(|i| ((i as f64) * steps as f64 / (m - 1) as f64).round() as usize)
            .collect();
        Self::new(ts, steps)
    }

    pub fn steps(&self) -> &[usize] {
        &self.ts
    }

    pub fn len(&self) -> usize {
        self.ts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ts.is_empty()
    }
}

/// Additive x̂₀-space guidance term: `(x_t, t) ↦ w_t·g(·)`, already scaled.
pub type Guidance<'a> = dyn Fn(&Tensor, usize) -> Result<Tensor> + 'a;

fn check_same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    ensure!(
        a.shape() == b.shape(),
        "{what}: shape {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
    Ok(())
}

/// `√ᾱ_t·x0 + √(1−ᾱ_t)·eps`.
pub fn q_sample(x0: &Tensor, t: usize, eps: &Tensor, s: &VarianceSchedule) -> Result<Tensor> {
    check_same_shape(x0, eps, "q_sample")?;
    s.check_t(t)?;
    let a = s.alpha_bar(t).sqrt();
    let b = (1.0 - s.alpha_bar(t)).sqrt();
    let data = x0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&x, &e)| (a * f64::from(x) + b * f64::from(e)) as f32)
        .collect();
    Ok(Tensor::new(x0.shape().to_vec(), data)?)
}

/// Row-wise `q_sample` with a time-step per row of a `[B, P]` batch.
pub fn q_sample_rows(x0: &Tensor, ts: &[usize], eps: &Tensor, s: &VarianceSchedule) -> Result<Tensor> {
    check_same_shape(x0, eps, "q_sample")?;
    let (rows, cols) = x0.dims2()?;
    ensure!(rows == ts.len(), "{} time-steps for {rows} rows", ts.len());
    let mut data = Vec::with_capacity(rows * cols);
    for (r, &t) in ts.iter().enumerate() {
        s.check_t(t)?;
        let a = s.alpha_bar(t).sqrt();
        let b = (1.0 - s.alpha_bar(t)).sqrt();
        data.extend(
            x0.row_slice(r)
                .iter()
                .zip(eps.row_slice(r))
                .map(|(&x, &e)| (a * f64::from(x) + b * f64::from(e)) as f32),
        );
    }
    Ok(Tensor::new(vec![rows, cols], data)?)
}

pub fn randn_like<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Uniform time-steps in `1..=T`.
pub fn sample_timesteps<R: Rng + ?Sized>(n: usize, steps: usize, rng: &mut R) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(1..=steps)).collect()
}

/// Per-sample Eq.-3 loss `SNR(t)·‖x0 − u_θ(x_t, t)‖²` on the tape, `[B, 1]`.
pub fn dm_loss_rows<'t>(
    model: &DenoiserModel,
    tape: &'t Tape,
    x0: &Tensor,
    ts: &[usize],
    eps: &Tensor,
    s: &VarianceSchedule,
    frozen: bool,
) -> Result<(Vec<Var<'t>>, diti_tensor::BoundMlp<'t>)> {
    let x_t = q_sample_rows(x0, ts, eps, s)?;
    let (u, bound) = model.forward_x0(tape, tape.leaf_owned(x_t), ts, s, frozen)?;
    let root_snr: Vec<f64> = ts.iter().map(|&t| s.snr(t).sqrt()).collect();
    let k = tape.constant(row_broadcast(&root_snr, model.pixels()));
    let weighted = tape.constant(x0.clone()).sub(&u)?.mul(&k)?.square();
    let per_row = (0..ts.len())
        .map(|r| row_sum(weighted, r))
        .collect::<Result<Vec<_>>>()?;
    Ok((per_row, bound))
}

/// Sum of row `r` of a `[B, C]` variable as a scalar variable.
fn row_sum<'t>(v: Var<'t>, r: usize) -> Result<Var<'t>> {
    let (rows, cols) = {
        let s = v.shape();
        (s[0], s[1])
    };
    ensure!(r < rows, "row {r} out of {rows}");
    let tape = v.tape();
    let mut sel = vec![0.0f32; rows];
    sel[r] = 1.0;
    let picked = tape
        .constant(Tensor::new(vec![1, rows], sel)?)
        .matmul(&v)?;
    debug_assert_eq!(picked.shape(), vec![1, cols]);
    Ok(picked.sum())
}

/// Eq.-3 loss of a single example, `SNR(t)·‖x0 − u_θ(x_t, t)‖²`.
pub fn dm_loss(
    model: &DenoiserModel,
    x0: &Tensor,
    t: usize,
    eps: &Tensor,
    s: &VarianceSchedule,
) -> Result<f64> {
    let x0 = x0.clone().reshape(vec![1, x0.len()])?;
    let eps = eps.clone().reshape(vec![1, eps.len()])?;
    Ok(dm_loss_batch(model, &x0, &[t], &eps, s)?[0])
}

/// Per-row Eq.-3 losses without a tape.
pub fn dm_loss_batch(
    model: &DenoiserModel,
    x0: &Tensor,
    ts: &[usize],
    eps: &Tensor,
    s: &VarianceSchedule,
) -> Result<Vec<f64>> {
    let x_t = q_sample_rows(x0, ts, eps, s)?;
    let u = model.predict_x0(&x_t, ts, s)?;
    Ok(ts
        .iter()
        .enumerate()
        .map(|(r, &t)| s.snr(t) * sq_dist(x0.row_slice(r), u.row_slice(r)))
        .collect())
}

pub(crate) fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2))
        .sum()
}

/// Batch mean of the squared, row-weighted residual `Σ_r c_r‖x0_r − y_r‖² / B`.
pub(crate) fn weighted_sq_mean<'t>(x0: Var<'t>, y: Var<'t>, root_weights: &[f64]) -> Result<Var<'t>> {
    let tape = x0.tape();
    let cols = x0.shape()[1];
    let k = tape.constant(row_broadcast(root_weights, cols));
    let rows = root_weights.len() as f32;
    Ok(x0.sub(&y)?.mul(&k)?.square().sum().scale(1.0 / rows))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Batch-mean loss at every iteration.
    pub loss_trace: Vec<f64>,
    /// Held-in evaluation loss per time-step, index `t - 1`.
    pub per_timestep: Vec<f64>,
}

impl TrainReport {
    /// Moving average over the last `window` iterations, at every iteration.
    pub fn smoothed(&self, window: usize) -> Vec<f64> {
        smooth(&self.loss_trace, window)
    }

    pub fn per_timestep_csv(&self) -> String {
        per_timestep_csv(&self.per_timestep)
    }
}

pub fn smooth(trace: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(trace.len());
    let mut acc = 0.0;
    for (i, v) in trace.iter().enumerate() {
        acc += v;
        if i >= window {
            acc -= trace[i - window];
        }
        out.push(acc / (i + 1).min(window) as f64);
    }
    out
}

pub fn per_timestep_csv(losses: &[f64]) -> String {
    let mut out = String::from("t,loss\n");
    for (i, l) in losses.iter().enumerate() {
        out.push_str(&format!("{},{l:.9e}\n", i + 1));
    }
    out
}

/// Rows used for the per-time-step evaluation.
pub const EVAL_ROWS: usize = 256;

/// Trains `model` in place on the rows of `data` (`[n, pixels]`).
pub fn train_dm(
    model: &mut DenoiserModel,
    data: &Tensor,
    s: &VarianceSchedule,
    opt: &OptimConfig,
    seed: u64,
) -> Result<TrainReport> {
    opt.validate()?;
    let (n, cols) = data.dims2()?;
    ensure!(n >= 1, "training set is empty");
    ensure!(cols == model.pixels(), "data has {cols} columns, model expects {}", model.pixels());
    let mut rng = seed::stream(seed, "train-dm");
    let mut adam = Adam::new(opt.learning_rate).with_clip(opt.grad_clip);
    let mut trace = Vec::with_capacity(opt.iterations);
    for it in 0..opt.iterations {
        let idx: Vec<usize> = (0..opt.batch_size).map(|_| rng.random_range(0..n)).collect();
        let x0 = crate::synth::gather_rows(data, &idx);
        let ts = sample_timesteps(idx.len(), s.steps(), &mut rng);
        let eps = randn_like(x0.shape(), &mut rng);
        let x_t = q_sample_rows(&x0, &ts, &eps, s)?;
        let tape = Tape::new();
        let (u, bound) = model.forward_x0(&tape, tape.leaf_owned(x_t), &ts, s, false)?;
        let root_snr: Vec<f64> = ts.iter().map(|&t| s.snr(t).sqrt()).collect();
        let loss = weighted_sq_mean(tape.constant(x0), u, &root_snr)?;
        let value = f64::from(loss.item());
        if !value.is_finite() {
            return Err(DitiError::Training(format!(
                "denoiser loss became {value} at iteration {it}"
            )));
        }
        tape.backward(loss)?;
        model.net.collect_grads(&tape, &bound);
        adam.step(&mut model.net.params_mut());
        trace.push(value);
    }
    let per_timestep = eval_dm_per_timestep(model, data, s, seed)?;
    Ok(TrainReport {
        loss_trace: trace,
        per_timestep,
    })
}

/// Mean Eq.-3 loss at every `t` over a fixed subset with fixed noise.
pub fn eval_dm_per_timestep(
    model: &DenoiserModel,
    data: &Tensor,
    s: &VarianceSchedule,
    seed: u64,
) -> Result<Vec<f64>> {
    let (n, _) = data.dims2()?;
    let rows: Vec<usize> = (0..n.min(EVAL_ROWS)).collect();
    let x0 = crate::synth::gather_rows(data, &rows);
    let mut rng = seed::stream(seed, "eval-dm");
    let eps = randn_like(x0.shape(), &mut rng);
    (1..=s.steps())
        .map(|t| {
            let l = dm_loss_batch(model, &x0, &vec![t; rows.len()], &eps, s)?;
            Ok(l.iter().sum::<f64>() / l.len() as f64)
        })
        .collect()
}

fn ddim_coeffs(s: &VarianceSchedule, t: usize) -> (f64, f64) {
    let ab = s.alpha_bar(t);
    (ab.sqrt(), (1.0 - ab).sqrt())
}

/// x̂₀ at `(x_t, t)`: model prediction plus optional guidance.
fn predict_with_guidance(
    model: &DenoiserModel,
    x_t: &Tensor,
    t: usize,
    s: &VarianceSchedule,
    guidance: Option<&Guidance<'_>>,
) -> Result<Tensor> {
    let mut x0 = model.predict_x0_at(x_t, t, s)?;
    if let Some(g) = guidance {
        let extra = g(x_t, t)?;
        check_same_shape(&x0, &extra, "guidance")?;
        x0.data_mut()
            .iter_mut()
            .zip(extra.data())
            .for_each(|(a, b)| *a += b);
    }
    Ok(x0)
}

/// Deterministic DDIM move given a prediction `x̂₀` at `t_hi`.
pub fn ddim_update(x_t: &Tensor, x0_hat: &Tensor, t_hi: usize, t_lo: usize, s: &VarianceSchedule) -> Result<Tensor> {
    check_same_shape(x_t, x0_hat, "ddim")?;
    ensure!(t_hi > t_lo, "DDIM step needs t_hi > t_lo, got {t_hi} -> {t_lo}");
    s.check_t(t_hi)?;
    let (a_hi, b_hi) = ddim_coeffs(s, t_hi);
    let (a_lo, b_lo) = ddim_coeffs(s, t_lo);
    let data = x_t
        .data()
        .iter()
        .zip(x0_hat.data())
        .map(|(&x, &x0)| {
            let (x, x0) = (f64::from(x), f64::from(x0));
            let eps = (x - a_hi * x0) / b_hi;
            (a_lo * x0 + b_lo * eps) as f32
        })
        .collect();
    Ok(Tensor::new(x_t.shape().to_vec(), data)?)
}

pub fn ddim_step(
    model: &DenoiserModel,
    x_t: &Tensor,
    t_hi: usize,
    t_lo: usize,
    s: &VarianceSchedule,
    guidance: Option<&Guidance<'_>>,
) -> Result<Tensor> {
    ensure!(t_hi > t_lo, "DDIM step needs t_hi > t_lo, got {t_hi} -> {t_lo}");
    let x0 = predict_with_guidance(model, x_t, t_hi, s, guidance)?;
    ddim_update(x_t, &x0, t_hi, t_lo, s)
}

/// Runs DDIM from `x_T` down the sequence to `t = 0`.
pub fn ddim_sample(
    model: &DenoiserModel,
    x_big_t: &Tensor,
    seq: &SamplingSequence,
    s: &VarianceSchedule,
    guidance: Option<&Guidance<'_>>,
) -> Result<Tensor> {
    let ts = seq.steps();
    let mut x = x_big_t.clone();
    for w in ts.windows(2).rev() {
        x = ddim_step(model, &x, w[1], w[0], s, guidance)?;
    }
    Ok(x)
}

/// Inversion move `t_lo → t_hi` using x̂₀ predicted at the current point.
///
/// At `t_lo = 0` the prediction is taken at `t = 1`, the closest trained
/// step; the update then reads `x̂₀ = x₀` exactly because `ᾱ₀ = 1`.
pub fn ddim_invert_step(
    model: &DenoiserModel,
    x: &Tensor,
    t_lo: usize,
    t_hi: usize,
    s: &VarianceSchedule,
    guidance: Option<&Guidance<'_>>,
) -> Result<Tensor> {
    ensure!(t_hi > t_lo, "inversion step needs t_hi > t_lo, got {t_lo} -> {t_hi}");
    s.check_t(t_hi)?;
    let t_eval = t_lo.max(1);
    let x0_eval = predict_with_guidance(model, x, t_eval, s, guidance)?;
    let (a_e, b_e) = ddim_coeffs(s, t_eval);
    let (a_lo, b_lo) = ddim_coeffs(s, t_lo);
    let (a_hi, b_hi) = ddim_coeffs(s, t_hi);
    let data = x
        .data()
        .iter()
        .zip(x0_eval.data())
        .map(|(&xv, &x0v)| {
            let (xv, x0v) = (f64::from(xv), f64::from(x0v));
            let eps = (xv - a_e * x0v) / b_e;
            let x0 = (xv - b_lo * eps) / a_lo;
            (a_hi * x0 + b_hi * eps) as f32
        })
        .collect();
    Ok(Tensor::new(x.shape().to_vec(), data)?)
}

pub fn ddim_invert(
    model: &DenoiserModel,
    x0: &Tensor,
    seq: &SamplingSequence,
    s: &VarianceSchedule,
    guidance: Option<&Guidance<'_>>,
) -> Result<Tensor> {
    let mut x = x0.clone();
    for w in seq.steps().windows(2) {
        x = ddim_invert_step(model, &x, w[0], w[1], s, guidance)?;
    }
    Ok(x)
}

/// Relative reconstruction error `‖x̃ − x‖/‖x‖` after inversion and resampling.
pub fn inversion_residual(
    model: &DenoiserModel,
    x0: &Tensor,
    seq: &SamplingSequence,
    s: &VarianceSchedule,
    guidance: Option<&Guidance<'_>>,
) -> Result<f64> {
    let xt = ddim_invert(model, x0, seq, s, guidance)?;
    let back = ddim_sample(model, &xt, seq, s, guidance)?;
    Ok(sq_dist(back.data(), x0.data()).sqrt() / x0.norm().max(f64::MIN_POSITIVE))
}

/// Standard normal draws in f64, for moment tests.
pub fn normal_f64<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::ScheduleConfig;
    use rand::SeedableRng;

    fn sched() -> VarianceSchedule {
        ScheduleConfig {
            steps: 100,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
        .build()
        .unwrap()
    }

    fn small_model(pixels: usize) -> DenoiserModel {
        let mut rng = seed::Rng::seed_from_u64(0);
        let cfg = NetConfig {
            hidden: vec![32, 32],
            ..NetConfig::default()
        };
        DenoiserModel::new(pixels, cfg, &mut rng).unwrap()
    }

    #[test]
    fn q_sample_branches() {
        let s = sched();
        let x0 = Tensor::row(vec![0.5, -1.0, 0.25]).unwrap();
        let zero = Tensor::zeros(&[1, 3]);
        let a = q_sample(&x0, 40, &zero, &s).unwrap();
        let r = s.alpha_bar(40).sqrt();
        for (v, x) in a.data().iter().zip(x0.data()) {
            assert_eq!(*v, (r * f64::from(*x)) as f32);
        }
        let eps = Tensor::row(vec![1.0, 2.0, -3.0]).unwrap();
        let b = q_sample(&zero, 40, &eps, &s).unwrap();
        let r = (1.0 - s.alpha_bar(40)).sqrt();
        for (v, e) in b.data().iter().zip(eps.data()) {
            assert_eq!(*v, (r * f64::from(*e)) as f32);
        }
        assert!(q_sample(&x0, 40, &Tensor::zeros(&[1, 2]), &s).is_err());
        assert!(q_sample(&x0, 0, &zero, &s).is_err());
        assert!(q_sample(&x0, 101, &zero, &s).is_err());
    }

    #[test]
    fn sampling_sequence_contract() {
        let seq = SamplingSequence::uniform(50, 100).unwrap();
        assert_eq!(seq.steps()[0], 0);
        assert_eq!(*seq.steps().last().unwrap(), 100);
        assert!(seq.steps().windows(2).all(|w| w[0] < w[1]));
        assert_eq!(SamplingSequence::uniform(2, 100).unwrap().steps(), &[0, 100]);
        assert!(SamplingSequence::new(vec![0, 5, 5, 100], 100).is_err());
        assert!(SamplingSequence::new(vec![1, 100], 100).is_err());
        assert!(SamplingSequence::uniform(102, 100).is_err());
    }

    #[test]
    fn oracle_ddim_step_preserves_implied_noise() {
        let s = sched();
        let mut rng = seed::Rng::seed_from_u64(3);
        let x0 = Tensor::randn(&[2, 5], 0.5, &mut rng);
        let eps = Tensor::randn(&[2, 5], 1.0, &mut rng);
        let xt = q_sample(&x0, 70, &eps, &s).unwrap();
        let lo = ddim_update(&xt, &x0, 70, 30, &s).unwrap();
        let want = q_sample(&x0, 30, &eps, &s).unwrap();
        for (a, b) in lo.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-5);
        }
        let zero = ddim_update(&xt, &x0, 70, 0, &s).unwrap();
        for (a, b) in zero.data().iter().zip(x0.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(ddim_update(&xt, &x0, 30, 30, &s).is_err());
    }

    #[test]
    fn predict_x0_shape_and_eps_parameterization() {
        let s = sched();
        let model = small_model(6);
        let mut rng = seed::Rng::seed_from_u64(1);
        let x = Tensor::randn(&[3, 6], 1.0, &mut rng);
        let ts = [1, 50, 100];
        let u = model.predict_x0(&x, &ts, &s).unwrap();
        assert_eq!(u.shape(), &[3, 6]);
        let mut input = Vec::new();
        let emb = time_embedding(&ts);
        for r in 0..3 {
            input.extend_from_slice(x.row_slice(r));
            input.extend_from_slice(emb.row_slice(r));
        }
        let eps = model.net.eval(&Tensor::matrix(3, 6 + TIME_EMBED_DIM, input).unwrap()).unwrap();
        for (r, &t) in ts.iter().enumerate() {
            let ab = s.alpha_bar(t);
            for c in 0..6 {
                let want = (f64::from(x.row_slice(r)[c]) - (1.0 - ab).sqrt() * f64::from(eps.row_slice(r)[c]))
                    / ab.sqrt();
                assert!((f64::from(u.row_slice(r)[c]) - want).abs() < 1e-4 * want.abs().max(1.0));
            }
        }
        assert!(model.predict_x0(&x, &[1, 2], &s).is_err());
    }

    #[test]
    fn dm_loss_of_batch_matches_single() {
        let s = sched();
        let model = small_model(4);
        let mut rng = seed::Rng::seed_from_u64(2);
        let x0 = Tensor::randn(&[3, 4], 0.5, &mut rng);
        let eps = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let ts = [5, 40, 90];
        let batch = dm_loss_batch(&model, &x0, &ts, &eps, &s).unwrap();
        for r in 0..3 {
            let single = dm_loss(
                &model,
                &Tensor::row(x0.row_slice(r).to_vec()).unwrap(),
                ts[r],
                &Tensor::row(eps.row_slice(r).to_vec()).unwrap(),
                &s,
            )
            .unwrap();
            assert!((single - batch[r]).abs() <= 1e-9 * single.max(1.0));
        }
        let tape = Tape::new();
        let (rows, _) = dm_loss_rows(&model, &tape, &x0, &ts, &eps, &s, true).unwrap();
        for (v, b) in rows.iter().zip(&batch) {
            assert!((f64::from(v.item()) - b).abs() < 1e-3 * b.max(1.0));
        }
    }

    #[test]
    fn smoothing_window() {
        assert_eq!(smooth(&[1.0, 3.0, 5.0, 7.0], 2), vec![1.0, 2.0, 4.0, 6.0]);
    }

    #[test]
    fn embedding_is_bounded_and_distinct() {
        let e = time_embedding(&[1, 2, 100]);
        assert_eq!(e.shape(), &[3, TIME_EMBED_DIM]);
        assert!(e.data().iter().all(|v| v.abs() <= 1.0));
        assert_ne!(e.row_slice(0), e.row_slice(1));
    }
}
