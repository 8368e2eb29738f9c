//! Encoder `f`, decoder `g`, the time-step partition of `z`, and the
//! compensation objective `λ_t‖x₀ − (u_θ(x_t, t) + w_t·g(z̄_t, t))‖²`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use diti_tensor::{Adam, BoundMlp, Mlp, Tape, Tensor, Var};

use crate::ddpm::{
    q_sample_rows, randn_like, row_broadcast, sample_timesteps, time_embedding, weighted_sq_mean,
    DenoiserModel, NetConfig, OptimConfig, TrainReport, EVAL_ROWS, TIME_EMBED_DIM,
};
use crate::error::{ensure, DitiError, Result};
use crate::schedule::VarianceSchedule;
use crate::seed;
use crate::synth::gather_rows;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartitionKind {
    Balanced,
    Imbalanced,
}

/// Reference allocation for the imbalanced partition: dims out of 512 and
/// the upper time-step bound of each range out of 1000.
const IMBALANCED_DIMS: [usize; 5] = [10, 25, 327, 100, 50];
const IMBALANCED_BOUNDS: [usize; 5] = [50, 100, 300, 500, 1000];

/// Split of `z` into `k` contiguous subsets, each owning a contiguous range
/// of time-steps. Subset indices are 1-based.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub kind: PartitionKind,
    pub k: usize,
    pub d: usize,
    pub steps: usize,
    pub subset_dims: Vec<usize>,
    /// Inclusive upper time-step of each subset; the last equals `steps`.
    pub t_boundaries: Vec<usize>,
}

pub fn make_partition(kind: PartitionKind, k: usize, d: usize, steps: usize) -> Result<PartitionSpec> {
    ensure!(k >= 1, "partition needs at least one subset");
    ensure!(k <= d, "k = {k} exceeds d = {d}");
    ensure!(k <= steps, "k = {k} exceeds T = {steps}");
    let (subset_dims, t_boundaries) = match kind {
        PartitionKind::Balanced => {
            ensure!(d.is_multiple_of(k), "balanced partition needs k | d, got d = {d}, k = {k}");
            let bounds = (1..=k).map(|i| i * steps / k).collect();
            (vec![d / k; k], bounds)
        }
        PartitionKind::Imbalanced => {
            ensure!(k == IMBALANCED_DIMS.len(), "imbalanced partition has exactly 5 subsets, got k = {k}");
            let dims = largest_remainder(&IMBALANCED_DIMS, d);
            ensure!(dims.iter().all(|&n| n > 0), "d = {d} leaves an empty subset: {dims:?}");
            let bounds: Vec<usize> = IMBALANCED_BOUNDS
                .iter()
                .map(|&b| ((b * steps) as f64 / 1000.0).round() as usize)
                .collect();
            ensure!(
                bounds[0] >= 1 && bounds.windows(2).all(|w| w[0] < w[1]),
                "T = {steps} is too small for the imbalanced ranges: {bounds:?}"
            );
            (dims, bounds)
        }
    };
    let spec = PartitionSpec {
        kind,
        k,
        d,
        steps,
        subset_dims,
        t_boundaries,
    };
    spec.validate()?;
    Ok(spec)
}

/// Scales integer `weights` to sum to `total`, rounding by largest remainder
/// (ties go to the earlier entry).
pub fn largest_remainder(weights: &[usize], total: usize) -> Vec<usize> {
    let sum: usize = weights.iter().sum();
    let exact: Vec<f64> = weights
        .iter()
        .map(|&w| w as f64 * total as f64 / sum as f64)
        .collect();
    let mut out: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let short = total - out.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.partial_cmp(&ra).expect("finite remainders").then(a.cmp(&b))
    });
    for &i in order.iter().take(short) {
        out[i] += 1;
    }
    out
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.subset_dims.len() == self.k && self.t_boundaries.len() == self.k,
            "partition arrays must have k = {} entries",
            self.k
        );
        ensure!(
            self.subset_dims.iter().sum::<usize>() == self.d,
            "subset dims {:?} do not sum to d = {}",
            self.subset_dims,
            self.d
        );
        ensure!(self.subset_dims.iter().all(|&n| n > 0), "empty subset in {:?}", self.subset_dims);
        ensure!(
            self.t_boundaries.windows(2).all(|w| w[0] < w[1])
                && self.t_boundaries[0] >= 1
                && self.t_boundaries.last() == Some(&self.steps),
            "time boundaries {:?} must increase strictly up to T = {}",
            self.t_boundaries,
            self.steps
        );
        Ok(())
    }

    /// 1-based subset owning time-step `t`.
    pub fn subset_of(&self, t: usize) -> Result<usize> {
        ensure!((1..=self.steps).contains(&t), "t = {t} outside 1..={}", self.steps);
        Ok(self.t_boundaries.partition_point(|&b| b < t) + 1)
    }

    /// Dimension range of 1-based subset `i`.
    pub fn dims_of(&self, i: usize) -> Result<std::ops::Range<usize>> {
        ensure!((1..=self.k).contains(&i), "subset {i} outside 1..={}", self.k);
        let start: usize = self.subset_dims[..i - 1].iter().sum();
        Ok(start..start + self.subset_dims[i - 1])
    }

    /// Inclusive time-step range of 1-based subset `i`.
    pub fn t_range(&self, i: usize) -> Result<std::ops::RangeInclusive<usize>> {
        ensure!((1..=self.k).contains(&i), "subset {i} outside 1..={}", self.k);
        let lo = if i == 1 { 1 } else { self.t_boundaries[i - 2] + 1 };
        Ok(lo..=self.t_boundaries[i - 1])
    }

    /// Number of leading dims visible at `t`.
    pub fn visible_dims(&self, t: usize) -> Result<usize> {
        let i = self.subset_of(t)?;
        Ok(self.subset_dims[..i].iter().sum())
    }

    /// `(prefix, current)` 0/1 masks at `t`.
    fn masks(&self, t: usize) -> Result<(Vec<f32>, Vec<f32>)> {
        let i = self.subset_of(t)?;
        let cur = self.dims_of(i)?;
        let prefix = (0..self.d).map(|j| f32::from(u8::from(j < cur.start))).collect();
        let current = (0..self.d).map(|j| f32::from(u8::from(cur.contains(&j)))).collect();
        Ok((prefix, current))
    }
}

/// `z̄_t`: dims of subsets after `subset_of(t)` set to zero.
pub fn mask_feature(z: &[f32], spec: &PartitionSpec, t: usize) -> Result<Vec<f32>> {
    ensure!(z.len() == spec.d, "feature has {} dims, partition expects {}", z.len(), spec.d);
    let keep = spec.visible_dims(t)?;
    Ok(z.iter()
        .enumerate()
        .map(|(j, &v)| if j < keep { v } else { 0.0 })
        .collect())
}

/// Tape version of [`mask_feature`] for a `[B, d]` batch with a time-step per
/// row. With `detach_prefix`, subsets before `subset_of(t)` keep their
/// values but pass no gradient.
pub fn mask_feature_var<'t>(
    z: Var<'t>,
    spec: &PartitionSpec,
    ts: &[usize],
    detach_prefix: bool,
) -> Result<Var<'t>> {
    let shape = z.shape();
    ensure!(
        shape.len() == 2 && shape[0] == ts.len() && shape[1] == spec.d,
        "feature batch {shape:?} does not match {} rows of d = {}",
        ts.len(),
        spec.d
    );
    let tape = z.tape();
    let mut prefix = Vec::with_capacity(ts.len() * spec.d);
    let mut current = Vec::with_capacity(ts.len() * spec.d);
    for &t in ts {
        let (p, c) = spec.masks(t)?;
        prefix.extend(p);
        current.extend(c);
    }
    let prefix = tape.constant(Tensor::new(shape.clone(), prefix)?);
    let current = tape.constant(Tensor::new(shape.clone(), current)?);
    if detach_prefix {
        z.detach().mul(&prefix)?.add(&z.mul(&current)?).map_err(Into::into)
    } else {
        z.mul(&prefix.add(&current)?).map_err(Into::into)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionConfig {
    pub kind: PartitionKind,
    pub k: usize,
    pub d: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DitiConfig {
    pub partition: PartitionConfig,
    pub encoder: NetConfig,
    pub decoder: NetConfig,
    pub optim: OptimConfig,
    #[serde(default)]
    pub detach: bool,
}

/// Encoder `f: x₀ ↦ z ∈ ℝ^d` and decoder `g: (z̄, t) ↦` image-shaped compensation.
#[derive(Debug, Clone)]
pub struct EncoderDecoder {
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub partition: PartitionSpec,
}

impl EncoderDecoder {
    /// The decoder's output layer starts at zero, so training begins from `g ≡ 0`.
    pub fn new<R: Rng + ?Sized>(
        pixels: usize,
        partition: PartitionSpec,
        encoder: &NetConfig,
        decoder: &NetConfig,
        rng: &mut R,
    ) -> Result<Self> {
        encoder.validate()?;
        decoder.validate()?;
        let d = partition.d;
        let enc = Mlp::new(&encoder.widths(pixels, d), encoder.activation.into(), encoder.layer_norm, false, rng);
        let dec = Mlp::new(
            &decoder.widths(d + TIME_EMBED_DIM, pixels),
            decoder.activation.into(),
            decoder.layer_norm,
            true,
            rng,
        );
        Self::from_parts(enc, dec, partition)
    }

    pub fn from_parts(encoder: Mlp, decoder: Mlp, partition: PartitionSpec) -> Result<Self> {
        partition.validate()?;
        ensure!(
            encoder.output_dim() == partition.d,
            "encoder emits {} dims, partition has d = {}",
            encoder.output_dim(),
            partition.d
        );
        ensure!(
            decoder.input_dim() == partition.d + TIME_EMBED_DIM,
            "decoder input width {} does not match d + embedding",
            decoder.input_dim()
        );
        ensure!(
            decoder.output_dim() == encoder.input_dim(),
            "decoder emits {} pixels, encoder reads {}",
            decoder.output_dim(),
            encoder.input_dim()
        );
        Ok(Self {
            encoder,
            decoder,
            partition,
        })
    }

    pub fn pixels(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn d(&self) -> usize {
        self.partition.d
    }

    /// `z = f(x₀)` for a `[B, pixels]` batch.
    pub fn encode(&self, x0: &Tensor) -> Result<Tensor> {
        Ok(self.encoder.eval(x0)?)
    }

    /// `g(z, t)` for a `[B, d]` batch of (already masked) features.
    pub fn decode(&self, z: &Tensor, ts: &[usize]) -> Result<Tensor> {
        let (rows, _) = z.dims2()?;
        ensure!(rows == ts.len(), "{} time-steps for {rows} feature rows", ts.len());
        let input = concat_cols(z, &time_embedding(ts))?;
        Ok(self.decoder.eval(&input)?)
    }

    /// `w_t·g(z̄_t, t)` with `z` masked at `t`, one row per row of `z`.
    pub fn compensation(&self, z: &Tensor, t: usize, s: &VarianceSchedule) -> Result<Tensor> {
        let rows = z.dims2()?.0;
        self.compensation_rows(z, &vec![t; rows], s)
    }

    /// [`compensation`](Self::compensation) with a time-step per row.
    pub fn compensation_rows(&self, z: &Tensor, ts: &[usize], s: &VarianceSchedule) -> Result<Tensor> {
        let (rows, d) = z.dims2()?;
        ensure!(d == self.d(), "feature width {d} does not match d = {}", self.d());
        ensure!(rows == ts.len(), "{} time-steps for {rows} feature rows", ts.len());
        let mut masked = Vec::with_capacity(rows * d);
        for (r, &t) in ts.iter().enumerate() {
            masked.extend(mask_feature(z.row_slice(r), &self.partition, t)?);
        }
        let zbar = Tensor::new(vec![rows, d], masked)?;
        let mut g = self.decode(&zbar, ts)?;
        let cols = g.shape()[1];
        for (r, &t) in ts.iter().enumerate() {
            let w = s.w(t) as f32;
            g.data_mut()[r * cols..(r + 1) * cols].iter_mut().for_each(|v| *v *= w);
        }
        Ok(g)
    }
}

pub(crate) fn concat_cols(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ra, ca) = a.dims2()?;
    let (rb, cb) = b.dims2()?;
    ensure!(ra == rb, "cannot concatenate {ra} rows with {rb} rows");
    let mut data = Vec::with_capacity(ra * (ca + cb));
    for r in 0..ra {
        data.extend_from_slice(a.row_slice(r));
        data.extend_from_slice(b.row_slice(r));
    }
    Ok(Tensor::new(vec![ra, ca + cb], data)?)
}

/// Where `z` comes from during training: the trainable encoder, or fixed
/// per-row features (oracle encoders).
#[derive(Debug, Clone, Copy)]
pub enum FeatureSource<'a> {
    Encoder,
    Fixed(&'a Tensor),
}

/// Everything one forward pass of the objective leaves on the tape.
pub struct DitiGraph<'t> {
    /// Batch-mean loss.
    pub loss: Var<'t>,
    pub z: Var<'t>,
    pub dm: BoundMlp<'t>,
    pub encoder: Option<BoundMlp<'t>>,
    pub decoder: BoundMlp<'t>,
}

/// Records the batch-mean objective on `tape`. `features`, when fixed, holds
/// one row per row of `x0`.
#[allow(clippy::too_many_arguments)]
pub fn diti_graph<'t>(
    tape: &'t Tape,
    dm: &DenoiserModel,
    ed: &EncoderDecoder,
    x0: &Tensor,
    ts: &[usize],
    eps: &Tensor,
    s: &VarianceSchedule,
    detach: bool,
    features: FeatureSource<'_>,
) -> Result<DitiGraph<'t>> {
    let (rows, cols) = x0.dims2()?;
    ensure!(cols == ed.pixels(), "x0 has {cols} pixels, model expects {}", ed.pixels());
    ensure!(rows == ts.len(), "{} time-steps for {rows} rows", ts.len());
    let x_t = q_sample_rows(x0, ts, eps, s)?;
    let (u, dm_bound) = dm.forward_x0(tape, tape.leaf_owned(x_t), ts, s, true)?;
    let x0v = tape.constant(x0.clone());
    let (z, encoder) = match features {
        FeatureSource::Encoder => {
            let bound = ed.encoder.bind(tape, false);
            (bound.forward(x0v)?, Some(bound))
        }
        FeatureSource::Fixed(f) => {
            ensure!(
                f.shape() == [rows, ed.d()],
                "fixed features {:?} do not match [{rows}, {}]",
                f.shape(),
                ed.d()
            );
            (tape.constant(f.clone()), None)
        }
    };
    let zbar = mask_feature_var(z, &ed.partition, ts, detach)?;
    let decoder = ed.decoder.bind(tape, false);
    let g = decoder.forward(zbar.concat(&tape.constant(time_embedding(ts)))?)?;
    let w: Vec<f64> = ts.iter().map(|&t| s.w(t)).collect();
    let wg = g.mul(&tape.constant(row_broadcast(&w, cols)))?;
    let x0_hat = u.add(&wg)?;
    let root_lambda: Vec<f64> = ts.iter().map(|&t| s.lambda(t).sqrt()).collect();
    let loss = weighted_sq_mean(x0v, x0_hat, &root_lambda)?;
    Ok(DitiGraph {
        loss,
        z,
        dm: dm_bound,
        encoder,
        decoder,
    })
}

/// Per-row objective without a tape. `features = None` encodes `x0`.
#[allow(clippy::too_many_arguments)]
pub fn diti_loss_batch(
    dm: &DenoiserModel,
    ed: Option<&EncoderDecoder>,
    x0: &Tensor,
    ts: &[usize],
    eps: &Tensor,
    s: &VarianceSchedule,
    features: Option<&Tensor>,
) -> Result<Vec<f64>> {
    let x_t = q_sample_rows(x0, ts, eps, s)?;
    let mut x0_hat = dm.predict_x0(&x_t, ts, s)?;
    if let Some(ed) = ed {
        let z = match features {
            Some(f) => f.clone(),
            None => ed.encode(x0)?,
        };
        let comp = ed.compensation_rows(&z, ts, s)?;
        x0_hat
            .data_mut()
            .iter_mut()
            .zip(comp.data())
            .for_each(|(a, b)| *a += b);
    }
    Ok(ts
        .iter()
        .enumerate()
        .map(|(r, &t)| s.lambda(t) * crate::ddpm::sq_dist(x0.row_slice(r), x0_hat.row_slice(r)))
        .collect())
}

/// Single-example objective.
pub fn diti_loss(
    dm: &DenoiserModel,
    ed: &EncoderDecoder,
    x0: &Tensor,
    t: usize,
    eps: &Tensor,
    s: &VarianceSchedule,
) -> Result<f64> {
    let x0 = x0.clone().reshape(vec![1, x0.len()])?;
    let eps = eps.clone().reshape(vec![1, eps.len()])?;
    Ok(diti_loss_batch(dm, Some(ed), &x0, &[t], &eps, s, None)?[0])
}

/// Trains `ed` against a frozen denoiser on the rows of `data`.
#[allow(clippy::too_many_arguments)]
pub fn train_diti(
    dm: &DenoiserModel,
    ed: &mut EncoderDecoder,
    data: &Tensor,
    s: &VarianceSchedule,
    opt: &OptimConfig,
    detach: bool,
    features: Option<&Tensor>,
    seed: u64,
) -> Result<TrainReport> {
    opt.validate()?;
    let (n, cols) = data.dims2()?;
    ensure!(n >= 1, "training set is empty");
    ensure!(cols == ed.pixels(), "data has {cols} columns, model expects {}", ed.pixels());
    ensure!(dm.pixels() == cols, "denoiser expects {} pixels", dm.pixels());
    ensure!(
        ed.partition.steps == s.steps(),
        "partition covers T = {}, schedule has T = {}",
        ed.partition.steps,
        s.steps()
    );
    if let Some(f) = features {
        ensure!(f.shape() == [n, ed.d()], "fixed features {:?} do not match [{n}, {}]", f.shape(), ed.d());
    }
    let mut rng = seed::stream(seed, "train-diti");
    let mut enc_opt = Adam::new(opt.learning_rate).with_clip(opt.grad_clip);
    let mut dec_opt = Adam::new(opt.learning_rate).with_clip(opt.grad_clip);
    let mut trace = Vec::with_capacity(opt.iterations);
    for it in 0..opt.iterations {
        let idx: Vec<usize> = (0..opt.batch_size).map(|_| rng.random_range(0..n)).collect();
        let x0 = gather_rows(data, &idx);
        let ts = sample_timesteps(idx.len(), s.steps(), &mut rng);
        let eps = randn_like(x0.shape(), &mut rng);
        let fixed = features.map(|f| gather_rows(f, &idx));
        let source = match &fixed {
            Some(f) => FeatureSource::Fixed(f),
            None => FeatureSource::Encoder,
        };
        let tape = Tape::new();
        let graph = diti_graph(&tape, dm, ed, &x0, &ts, &eps, s, detach, source)?;
        let value = f64::from(graph.loss.item());
        if !value.is_finite() {
            return Err(DitiError::Training(format!("objective became {value} at iteration {it}")));
        }
        tape.backward(graph.loss)?;
        if let Some(enc) = &graph.encoder {
            ed.encoder.collect_grads(&tape, enc);
            enc_opt.step(&mut ed.encoder.params_mut());
        }
        ed.decoder.collect_grads(&tape, &graph.decoder);
        dec_opt.step(&mut ed.decoder.params_mut());
        trace.push(value);
    }
    let rows: Vec<usize> = (0..n.min(EVAL_ROWS)).collect();
    let eval_x = gather_rows(data, &rows);
    let eval_f = features.map(|f| gather_rows(f, &rows));
    let per_timestep = eval_diti_per_timestep(dm, Some(ed), &eval_x, s, eval_f.as_ref(), seed)?;
    Ok(TrainReport {
        loss_trace: trace,
        per_timestep,
    })
}

/// Mean objective at every `t` with fixed noise; `ed = None` is the `g ≡ 0`
/// baseline.
pub fn eval_diti_per_timestep(
    dm: &DenoiserModel,
    ed: Option<&EncoderDecoder>,
    data: &Tensor,
    s: &VarianceSchedule,
    features: Option<&Tensor>,
    seed: u64,
) -> Result<Vec<f64>> {
    let (n, _) = data.dims2()?;
    let mut rng = seed::stream(seed, "eval-diti");
    let eps = randn_like(data.shape(), &mut rng);
    let z = match (ed, features) {
        (_, Some(f)) => Some(f.clone()),
        (Some(ed), None) => Some(ed.encode(data)?),
        (None, None) => None,
    };
    (1..=s.steps())
        .map(|t| {
            let l = diti_loss_batch(dm, ed, data, &vec![t; n], &eps, s, z.as_ref())?;
            Ok(l.iter().sum::<f64>() / n as f64)
        })
        .collect()
}

/// Means of `per_timestep` over `buckets` equal-width time-step ranges.
pub fn bucket_means(per_timestep: &[f64], buckets: usize) -> Vec<f64> {
    let steps = per_timestep.len();
    (0..buckets)
        .map(|b| {
            let lo = b * steps / buckets;
            let hi = ((b + 1) * steps / buckets).max(lo + 1);
            per_timestep[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

/// Ground-truth factors written into subsets: attribute `i` goes to the first
/// dim of subset `placement[i]` (1-based), as `2f − 1`. Other dims are zero.
pub fn oracle_features(factors: &[Vec<f64>], placement: &[usize], spec: &PartitionSpec) -> Result<Tensor> {
    let n = factors.len();
    let mut data = vec![0.0f32; n * spec.d];
    let starts = placement
        .iter()
        .map(|&p| spec.dims_of(p).map(|r| r.start))
        .collect::<Result<Vec<_>>>()?;
    let mut seen = starts.clone();
    seen.sort_unstable();
    seen.dedup();
    ensure!(seen.len() == starts.len(), "oracle placement {placement:?} reuses a subset");
    for (r, f) in factors.iter().enumerate() {
        ensure!(f.len() == placement.len(), "record has {} factors, placement {}", f.len(), placement.len());
        for (v, &c) in f.iter().zip(&starts) {
            data[r * spec.d + c] = (2.0 * v - 1.0) as f32;
        }
    }
    Ok(Tensor::new(vec![n, spec.d], data)?)
}
