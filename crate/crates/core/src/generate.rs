//! Counterfactual generation by subset interpolation and attribute
//! manipulation along a sparse classifier's normal.

use diti_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::ddpm::{ddim_invert, ddim_sample, DenoiserModel, SamplingSequence};
use crate::diti::{EncoderDecoder, PartitionSpec};
use crate::error::{ensure, DitiError, Result};
use crate::eval::{fit_linear, Features, ProbeConfig, ProbeTask};
use crate::schedule::VarianceSchedule;

/// Below this angle (radians) slerp degrades to lerp.
pub const SLERP_MIN_ANGLE: f64 = 1e-4;

/// Spherical interpolation between the flattened `a` and `b`.
pub fn slerp(a: &Tensor, b: &Tensor, lam: f64) -> Result<Tensor> {
    ensure!(a.shape() == b.shape(), "slerp shapes {:?} and {:?} differ", a.shape(), b.shape());
    let data = slerp_slice(a.data(), b.data(), lam)?;
    Ok(Tensor::new(a.shape().to_vec(), data)?)
}

fn slerp_slice(a: &[f32], b: &[f32], lam: f64) -> Result<Vec<f32>> {
    let na = a.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
    let nb = b.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
    ensure!(na > 0.0 && nb > 0.0, "slerp of a zero vector");
    let dot = a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum::<f64>();
    let theta = (dot / (na * nb)).clamp(-1.0, 1.0).acos();
    let (ca, cb) = if theta < SLERP_MIN_ANGLE {
        (1.0 - lam, lam)
    } else {
        let st = theta.sin();
        (((1.0 - lam) * theta).sin() / st, (lam * theta).sin() / st)
    };
    Ok(a.iter()
        .zip(b)
        .map(|(&x, &y)| (ca * f64::from(x) + cb * f64::from(y)) as f32)
        .collect())
}

/// Linear interpolation of the selected subsets (1-based) from `z` toward
/// `z2`; every other dimension is copied from `z`.
pub fn lerp_subset(z: &[f32], z2: &[f32], subsets: &[usize], spec: &PartitionSpec, lam: f64) -> Result<Vec<f32>> {
    ensure!(z.len() == spec.d && z2.len() == spec.d, "features must have d = {} dims", spec.d);
    ensure!(!subsets.is_empty(), "no subsets selected");
    let mut out = z.to_vec();
    for &i in subsets {
        for j in spec.dims_of(i)? {
            out[j] = ((1.0 - lam) * f64::from(z[j]) + lam * f64::from(z2[j])) as f32;
        }
    }
    Ok(out)
}

fn map_rows(z: &Tensor, f: impl Fn(usize, &[f32]) -> Result<Vec<f32>>) -> Result<Tensor> {
    let (rows, _) = z.dims2()?;
    let mut data = Vec::with_capacity(z.len());
    for r in 0..rows {
        data.extend(f(r, z.row_slice(r))?);
    }
    Ok(Tensor::new(z.shape().to_vec(), data)?)
}

/// DDIM inversion guided by the image's own features, so that decoding
/// with unchanged features retraces the same path.
pub fn guided_invert(
    dm: &DenoiserModel,
    ed: &EncoderDecoder,
    x0: &Tensor,
    z: &Tensor,
    s: &VarianceSchedule,
    seq: &SamplingSequence,
) -> Result<Tensor> {
    let guide = |_: &Tensor, t: usize| ed.compensation(z, t, s);
    ddim_invert(dm, x0, seq, s, Some(&guide))
}

/// Guided DDIM decode of `x_T` with `x̂₀ = u_θ + w_t·g(z̄_t, t)`.
pub fn guided_decode(
    dm: &DenoiserModel,
    ed: &EncoderDecoder,
    x_big_t: &Tensor,
    z: &Tensor,
    s: &VarianceSchedule,
    seq: &SamplingSequence,
) -> Result<Tensor> {
    let guide = |_: &Tensor, t: usize| ed.compensation(z, t, s);
    ddim_sample(dm, x_big_t, seq, s, Some(&guide))
}

/// Invert-then-decode with the image's own features.
pub fn reconstruct(
    dm: &DenoiserModel,
    ed: &EncoderDecoder,
    x0: &Tensor,
    s: &VarianceSchedule,
    seq: &SamplingSequence,
) -> Result<Tensor> {
    let z = ed.encode(x0)?;
    let xt = guided_invert(dm, ed, x0, &z, s, seq)?;
    guided_decode(dm, ed, &xt, &z, s, seq)
}

/// Counterfactual of each row of `x0` toward the matching row of `x0_other`,
/// editing only the feature subsets in `subsets`.
#[allow(clippy::too_many_arguments)]
pub fn counterfactual(
    x0: &Tensor,
    x0_other: &Tensor,
    subsets: &[usize],
    lam: f64,
    dm: &DenoiserModel,
    ed: &EncoderDecoder,
    s: &VarianceSchedule,
    seq: &SamplingSequence,
) -> Result<Tensor> {
    ensure!(x0.shape() == x0_other.shape(), "counterfactual inputs differ in shape");
    let z = ed.encode(x0)?;
    let z_other = ed.encode(x0_other)?;
    let xt = guided_invert(dm, ed, x0, &z, s, seq)?;
    let xt_other = guided_invert(dm, ed, x0_other, &z_other, s, seq)?;
    let z_s = map_rows(&z, |r, row| lerp_subset(row, z_other.row_slice(r), subsets, &ed.partition, lam))?;
    let x_start = map_rows(&xt, |r, row| slerp_slice(row, xt_other.row_slice(r), lam))?;
    guided_decode(dm, ed, &x_start, &z_s, s, seq)
}

/// Sparse logistic classifier on raw features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseClassifier {
    pub weight: Vec<f64>,
    pub bias: f64,
    pub active: Vec<bool>,
    pub budget: usize,
}

impl SparseClassifier {
    pub fn logit(&self, z: &[f32]) -> f64 {
        self.bias + z.iter().zip(&self.weight).map(|(&a, w)| f64::from(a) * w).sum::<f64>()
    }

    pub fn accuracy(&self, x: &Features, labels: &[bool]) -> f64 {
        let hits = (0..x.n)
            .filter(|&i| {
                let s = self.bias + x.row(i).iter().zip(&self.weight).map(|(a, w)| a * w).sum::<f64>();
                (s > 0.0) == labels[i]
            })
            .count();
        hits as f64 / x.n.max(1) as f64
    }

    pub fn zero_count(&self) -> usize {
        self.weight.iter().filter(|w| **w == 0.0).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseConfig {
    pub probe: ProbeConfig,
    /// Share of the surplus active dimensions removed per pruning round.
    pub prune_fraction: f64,
}

impl Default for SparseConfig {
    fn default() -> Self {
        Self {
            probe: ProbeConfig::default(),
            prune_fraction: 0.5,
        }
    }
}

fn fit_masked(x: &Features, y: &[f64], active: &[usize], cfg: &ProbeConfig) -> Result<(Vec<f64>, f64)> {
    let mut data = Vec::with_capacity(x.n * active.len());
    for i in 0..x.n {
        let row = x.row(i);
        data.extend(active.iter().map(|&j| row[j]));
    }
    let sub = Features::new(x.n, active.len(), data)?;
    let m = fit_linear(&sub, y, ProbeTask::Classify, cfg)?;
    let mut weight = vec![0.0; x.d];
    for (&j, &w) in active.iter().zip(&m.weight) {
        weight[j] = w;
    }
    Ok((weight, m.bias))
}

/// Dense logistic fit followed by iterative magnitude pruning down to
/// `budget` active dimensions, refitting after every round.
pub fn train_sparse_classifier(x: &Features, labels: &[bool], budget: usize, cfg: &SparseConfig) -> Result<SparseClassifier> {
    ensure!(labels.len() == x.n, "{} labels for {} rows", labels.len(), x.n);
    ensure!(budget >= 1 && budget <= x.d, "sparsity budget {budget} outside 1..={}", x.d);
    ensure!(
        cfg.prune_fraction > 0.0 && cfg.prune_fraction <= 1.0,
        "prune fraction must lie in (0, 1]"
    );
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 || positives == labels.len() {
        return Err(DitiError::Training("sparse classifier needs both classes".into()));
    }
    let y: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();
    let mut active: Vec<usize> = (0..x.d).collect();
    let (mut weight, mut bias) = fit_masked(x, &y, &active, &cfg.probe)?;
    while active.len() > budget {
        let surplus = active.len() - budget;
        let drop = ((surplus as f64 * cfg.prune_fraction).ceil() as usize).clamp(1, surplus);
        let mut order = active.clone();
        order.sort_by(|&a, &b| weight[a].abs().total_cmp(&weight[b].abs()).then(a.cmp(&b)));
        let removed = &order[..drop];
        active.retain(|j| !removed.contains(j));
        (weight, bias) = fit_masked(x, &y, &active, &cfg.probe)?;
    }
    let mut mask = vec![false; x.d];
    for &j in &active {
        mask[j] = true;
    }
    // weights that landed exactly on zero stay active but are nudged so the
    // zero count is exactly d − d'
    for &j in &active {
        if weight[j] == 0.0 {
            weight[j] = f64::MIN_POSITIVE;
        }
    }
    Ok(SparseClassifier {
        weight,
        bias,
        active: mask,
        budget,
    })
}

/// Per-dimension population standard deviation of the features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub sigma: Vec<f64>,
}

impl FeatureStats {
    pub fn from_features(z: &Tensor) -> Result<Self> {
        let (n, d) = z.dims2()?;
        ensure!(n >= 1, "feature statistics need at least one row");
        let mut mean = vec![0.0; d];
        for r in 0..n {
            for (m, &v) in mean.iter_mut().zip(z.row_slice(r)) {
                *m += f64::from(v) / n as f64;
            }
        }
        let mut var = vec![0.0; d];
        for r in 0..n {
            for ((s, &v), m) in var.iter_mut().zip(z.row_slice(r)).zip(&mean) {
                *s += (f64::from(v) - m).powi(2) / n as f64;
            }
        }
        Ok(Self {
            sigma: var.into_iter().map(f64::sqrt).collect(),
        })
    }
}

/// `z + λ·(σ⊙w)/‖w‖` for every row.
pub fn shift_features(z: &Tensor, clf: &SparseClassifier, stats: &FeatureStats, lam: f64) -> Result<Tensor> {
    let (_, d) = z.dims2()?;
    ensure!(
        clf.weight.len() == d && stats.sigma.len() == d,
        "classifier and statistics must have d = {d} dims"
    );
    let norm = clf.weight.iter().map(|w| w * w).sum::<f64>().sqrt();
    ensure!(norm > 0.0, "classifier weight is zero");
    let step: Vec<f64> = clf
        .weight
        .iter()
        .zip(&stats.sigma)
        .map(|(w, s)| lam * s * w / norm)
        .collect();
    map_rows(z, |_, row| {
        Ok(row.iter().zip(&step).map(|(&v, d)| (f64::from(v) + d) as f32).collect())
    })
}

/// Pushes each row of `x0` along the classifier normal by `λ` (signed).
#[allow(clippy::too_many_arguments)]
pub fn manipulate(
    x0: &Tensor,
    clf: &SparseClassifier,
    stats: &FeatureStats,
    lam: f64,
    dm: &DenoiserModel,
    ed: &EncoderDecoder,
    s: &VarianceSchedule,
    seq: &SamplingSequence,
) -> Result<Tensor> {
    let z = ed.encode(x0)?;
    let shifted = shift_features(&z, clf, stats, lam)?;
    let xt = guided_invert(dm, ed, x0, &z, s, seq)?;
    guided_decode(dm, ed, &xt, &shifted, s, seq)
}

/// Share of the squared change between `a` and `b` that falls inside `mask`.
pub fn mask_energy_ratio(a: &[f32], b: &[f32], mask: &[bool]) -> Result<f64> {
    ensure!(a.len() == b.len() && a.len() == mask.len(), "image and mask sizes differ");
    let (mut inside, mut total) = (0.0, 0.0);
    for ((&x, &y), &m) in a.iter().zip(b).zip(mask) {
        let e = (f64::from(x) - f64::from(y)).powi(2);
        total += e;
        if m {
            inside += e;
        }
    }
    Ok(if total > 0.0 { inside / total } else { 0.0 })
}
