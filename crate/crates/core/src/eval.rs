//! Linear probes, retrieval metrics and subset-attribute alignment.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::seed;

/// Step-wise average precision: mean precision at the rank of each positive.
/// Ties keep their original order.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    ensure!(scores.len() == labels.len(), "{} scores for {} labels", scores.len(), labels.len());
    let positives = labels.iter().filter(|&&l| l).count();
    ensure!(positives > 0, "average precision needs at least one positive label");
    ensure!(scores.iter().all(|s| !s.is_nan()), "scores contain NaN");
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("no NaN"));
    let mut hits = 0usize;
    let mut acc = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            acc += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(acc / positives as f64)
}

pub fn pearson_r(a: &[f64], b: &[f64]) -> Result<f64> {
    ensure!(a.len() == b.len(), "lengths differ: {} vs {}", a.len(), b.len());
    ensure!(a.len() >= 2, "correlation needs at least two points");
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    ensure!(saa > 0.0 && sbb > 0.0, "correlation of a constant input");
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    ensure!(a.len() == b.len() && !a.is_empty(), "mse needs equal, nonempty inputs");
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64)
}

/// Average ranks (1-based), ties sharing their mean rank.
pub fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).expect("no NaN"));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    pearson_r(&ranks(a), &ranks(b))
}

/// One-sided permutation test of `spearman(a, b) > 0`.
///
/// Enumerates every permutation of `b` when `n! ≤ shuffles`, otherwise draws
/// `shuffles` seeded random ones. Returns `(rho, p)` with `p` counting
/// permutations at least as extreme, the identity included.
pub fn spearman_permutation_test(a: &[f64], b: &[f64], shuffles: usize, seed: u64) -> Result<(f64, f64)> {
    let rho = spearman(a, b)?;
    let n = b.len();
    let exact = (1..=n).try_fold(1usize, |acc, k| acc.checked_mul(k)).filter(|&f| f <= shuffles);
    let tol = 1e-12;
    let (mut hits, mut total) = (0usize, 0usize);
    let mut count = |perm: &[f64]| -> Result<()> {
        let r = spearman(a, perm).unwrap_or(0.0);
        total += 1;
        if r >= rho - tol {
            hits += 1;
        }
        Ok(())
    };
    match exact {
        Some(_) => {
            let mut idx: Vec<usize> = (0..n).collect();
            loop {
                let perm: Vec<f64> = idx.iter().map(|&i| b[i]).collect();
                count(&perm)?;
                if !next_permutation(&mut idx) {
                    break;
                }
            }
            Ok((rho, hits as f64 / total as f64))
        }
        None => {
            let mut rng = seed::stream(seed, "spearman-permutation");
            let mut perm = b.to_vec();
            for _ in 0..shuffles {
                perm.shuffle(&mut rng);
                count(&perm)?;
            }
            Ok((rho, (hits + 1) as f64 / (total + 1) as f64))
        }
    }
}

fn next_permutation(v: &mut [usize]) -> bool {
    if v.len() < 2 {
        return false;
    }
    let mut i = v.len() - 1;
    while i > 0 && v[i - 1] >= v[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = v.len() - 1;
    while v[j] <= v[i - 1] {
        j -= 1;
    }
    v.swap(i - 1, j);
    v[i..].reverse();
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeTask {
    Classify,
    Regress,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub iterations: usize,
    /// L2 penalty on the weights; zero disables it.
    #[serde(default)]
    pub l2: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            l2: 0.0,
        }
    }
}

/// Row-major `[n, d]` feature matrix in f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub n: usize,
    pub d: usize,
    pub data: Vec<f64>,
}

impl Features {
    pub fn new(n: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        ensure!(data.len() == n * d, "feature buffer has {} values, expected {n}×{d}", data.len());
        ensure!(data.iter().all(|v| v.is_finite()), "features must be finite");
        Ok(Self { n, d, data })
    }

    pub fn from_tensor(t: &diti_tensor::Tensor) -> Result<Self> {
        let (n, d) = t.dims2()?;
        Self::new(n, d, t.data().iter().map(|&v| f64::from(v)).collect())
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.d);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            n: idx.len(),
            d: self.d,
            data,
        }
    }

    pub fn select_cols(&self, cols: std::ops::Range<usize>) -> Self {
        let d = cols.len();
        let mut data = Vec::with_capacity(self.n * d);
        for i in 0..self.n {
            data.extend_from_slice(&self.row(i)[cols.clone()]);
        }
        Self { n: self.n, d, data }
    }
}

/// Per-column standardisation fitted on a training set. Constant columns
/// are centred and left unscaled.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &Features) -> Self {
        let n = x.n.max(1) as f64;
        let mut mean = vec![0.0; x.d];
        for i in 0..x.n {
            for (m, v) in mean.iter_mut().zip(x.row(i)) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; x.d];
        for i in 0..x.n {
            for ((s, v), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
                *s += (v - m).powi(2) / n;
            }
        }
        let scale = var
            .iter()
            .map(|&v| if v > 1e-12 { v.sqrt() } else { 1.0 })
            .collect();
        Self { mean, scale }
    }

    pub fn apply(&self, x: &Features) -> Features {
        let mut data = Vec::with_capacity(x.data.len());
        for i in 0..x.n {
            data.extend(
                x.row(i)
                    .iter()
                    .zip(&self.mean)
                    .zip(&self.scale)
                    .map(|((v, m), s)| (v - m) / s),
            );
        }
        Features { n: x.n, d: x.d, data }
    }
}

/// Linear model `x·w + b` on standardised inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub weight: Vec<f64>,
    pub bias: f64,
}

impl LinearModel {
    pub fn score(&self, x: &[f64]) -> f64 {
        self.bias + x.iter().zip(&self.weight).map(|(a, b)| a * b).sum::<f64>()
    }

    pub fn scores(&self, x: &Features) -> Vec<f64> {
        (0..x.n).map(|i| self.score(x.row(i))).collect()
    }
}

/// Largest eigenvalue of `XᵀX/n` by power iteration from the all-ones vector.
fn gram_top_eigenvalue(x: &Features) -> f64 {
    let mut v = vec![1.0 / (x.d as f64).sqrt(); x.d];
    let mut lambda = 0.0;
    for _ in 0..50 {
        let xv: Vec<f64> = (0..x.n)
            .map(|i| x.row(i).iter().zip(&v).map(|(a, b)| a * b).sum())
            .collect();
        let mut next = vec![0.0; x.d];
        for (i, s) in xv.iter().enumerate() {
            for (nj, a) in next.iter_mut().zip(x.row(i)) {
                *nj += a * s / x.n as f64;
            }
        }
        let norm = next.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        lambda = norm;
        v = next.into_iter().map(|a| a / norm).collect();
    }
    lambda
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Full-batch gradient descent with step `1/L`, `L` the smoothness constant
/// of the loss (`λ_max(XᵀX/n)`, scaled by ¼ for the logistic loss).
pub fn fit_linear(x: &Features, y: &[f64], task: ProbeTask, cfg: &ProbeConfig) -> Result<LinearModel> {
    ensure!(x.n == y.len(), "{} rows for {} targets", x.n, y.len());
    ensure!(x.n >= 1, "cannot fit on an empty set");
    let curvature = match task {
        ProbeTask::Classify => 0.25,
        ProbeTask::Regress => 1.0,
    };
    // the bias column contributes at most 1 to the top eigenvalue
    let lip = curvature * (gram_top_eigenvalue(x) + 1.0) + cfg.l2;
    let lr = 1.0 / lip;
    let mut w = vec![0.0; x.d];
    let mut b = match task {
        ProbeTask::Classify => 0.0,
        ProbeTask::Regress => y.iter().sum::<f64>() / y.len() as f64,
    };
    let n = x.n as f64;
    let mut gw = vec![0.0; x.d];
    for _ in 0..cfg.iterations {
        gw.iter_mut().for_each(|g| *g = 0.0);
        let mut gb = 0.0;
        for (i, &yi) in y.iter().enumerate() {
            let row = x.row(i);
            let z = b + row.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
            let r = match task {
                ProbeTask::Classify => sigmoid(z) - yi,
                ProbeTask::Regress => z - yi,
            };
            for (g, a) in gw.iter_mut().zip(row) {
                *g += r * a / n;
            }
            gb += r / n;
        }
        for (wj, g) in w.iter_mut().zip(&gw) {
            *wj -= lr * (g + cfg.l2 * *wj);
        }
        b -= lr * gb;
    }
    Ok(LinearModel { weight: w, bias: b })
}

/// Metrics of one probed attribute. `None` marks a skipped metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeProbe {
    pub attribute: String,
    pub ap: Option<f64>,
    pub pearson_r: Option<f64>,
    pub mse: Option<f64>,
    /// Classifier weights, in standardised feature units.
    pub weights: Vec<f64>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub attributes: Vec<AttributeProbe>,
}

impl ProbeResult {
    pub fn mean_ap(&self) -> Option<f64> {
        let aps: Vec<f64> = self.attributes.iter().filter_map(|a| a.ap).collect();
        (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64)
    }

    /// `attribute,ap,pearson_r,mse`; skipped metrics are written as `nan`.
    pub fn to_csv(&self) -> String {
        let f = |v: Option<f64>| v.map_or("nan".to_string(), |v| format!("{v:.6}"));
        let mut out = String::from("attribute,ap,pearson_r,mse\n");
        for a in &self.attributes {
            out.push_str(&format!("{},{},{},{}\n", a.attribute, f(a.ap), f(a.pearson_r), f(a.mse)));
        }
        out
    }
}

/// Probe targets for one attribute.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeTarget {
    pub name: String,
    /// Continuous ground truth, used for Pearson's r and MSE.
    pub values: Vec<f64>,
    /// Binary labels, used for AP.
    pub labels: Vec<bool>,
}

/// Trains a logistic probe (AP) and a least-squares probe (Pearson's r, MSE)
/// per attribute on `train`, evaluates on `test`. Attributes whose train or
/// test targets are degenerate are skipped with a warning.
pub fn linear_probe(
    features: &Features,
    targets: &[ProbeTarget],
    train: &[usize],
    test: &[usize],
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    ensure!(!train.is_empty() && !test.is_empty(), "probe needs nonempty train and test splits");
    ensure!(
        train.iter().chain(test).all(|&i| i < features.n),
        "split index out of range"
    );
    let std = Standardizer::fit(&features.select_rows(train));
    let xtr = std.apply(&features.select_rows(train));
    let xte = std.apply(&features.select_rows(test));
    let mut out = Vec::with_capacity(targets.len());
    for target in targets {
        ensure!(
            target.values.len() == features.n && target.labels.len() == features.n,
            "target {} does not cover every row",
            target.name
        );
        let mut probe = AttributeProbe {
            attribute: target.name.clone(),
            ap: None,
            pearson_r: None,
            mse: None,
            weights: Vec::new(),
            warnings: Vec::new(),
        };
        let ltr: Vec<bool> = train.iter().map(|&i| target.labels[i]).collect();
        let lte: Vec<bool> = test.iter().map(|&i| target.labels[i]).collect();
        if ltr.iter().all(|&l| l) || ltr.iter().all(|&l| !l) {
            probe.warnings.push("single-class training labels; AP skipped".into());
        } else if !lte.iter().any(|&l| l) {
            probe.warnings.push("no positive test labels; AP skipped".into());
        } else {
            let y: Vec<f64> = ltr.iter().map(|&l| f64::from(u8::from(l))).collect();
            let m = fit_linear(&xtr, &y, ProbeTask::Classify, cfg)?;
            probe.ap = Some(average_precision(&m.scores(&xte), &lte)?);
            probe.weights = m.weight;
        }
        let vtr: Vec<f64> = train.iter().map(|&i| target.values[i]).collect();
        let vte: Vec<f64> = test.iter().map(|&i| target.values[i]).collect();
        let constant = |v: &[f64]| v.iter().all(|&a| a == v[0]);
        if constant(&vtr) || constant(&vte) {
            probe.warnings.push("constant regression target; Pearson's r and MSE skipped".into());
        } else {
            let m = fit_linear(&xtr, &vtr, ProbeTask::Regress, cfg)?;
            let pred = m.scores(&xte);
            probe.pearson_r = pearson_r(&pred, &vte).ok();
            probe.mse = Some(mse(&pred, &vte)?);
        }
        out.push(probe);
    }
    Ok(ProbeResult { attributes: out })
}

/// Histogram CSV `bin_lo,bin_hi,count` over `[min, max]` of `values`.
pub fn histogram_csv(values: &[f64], bins: usize) -> Result<String> {
    ensure!(bins >= 1, "need at least one bin");
    ensure!(!values.is_empty(), "cannot histogram an empty set");
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for v in values {
        let b = (((v - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    let mut out = String::from("bin_lo,bin_hi,count\n");
    for (i, c) in counts.iter().enumerate() {
        let a = lo + i as f64 * width;
        out.push_str(&format!("{a:.6},{:.6},{c}\n", a + width));
    }
    Ok(out)
}

/// Per-subset, per-attribute held-out R² of least-squares probes, clipped to
/// `[0, 1]` (worse-than-mean predictors score 0). `subsets[i]` are the
/// feature columns of subset `i + 1`.
pub fn subset_alignment(
    features: &Features,
    subsets: &[std::ops::Range<usize>],
    factors: &[Vec<f64>],
    train: &[usize],
    test: &[usize],
    cfg: &ProbeConfig,
) -> Result<Vec<Vec<f64>>> {
    ensure!(!subsets.is_empty(), "no subsets to probe");
    ensure!(
        factors.iter().all(|f| f.len() == features.n),
        "factor columns must cover every row"
    );
    let mut out = Vec::with_capacity(subsets.len());
    for cols in subsets {
        ensure!(cols.end <= features.d, "subset columns {cols:?} exceed d = {}", features.d);
        let sub = features.select_cols(cols.clone());
        let std = Standardizer::fit(&sub.select_rows(train));
        let xtr = std.apply(&sub.select_rows(train));
        let xte = std.apply(&sub.select_rows(test));
        let mut row = Vec::with_capacity(factors.len());
        for f in factors {
            let ytr: Vec<f64> = train.iter().map(|&i| f[i]).collect();
            let yte: Vec<f64> = test.iter().map(|&i| f[i]).collect();
            let m = fit_linear(&xtr, &ytr, ProbeTask::Regress, cfg)?;
            row.push(r_squared(&m.scores(&xte), &yte));
        }
        out.push(row);
    }
    Ok(out)
}

/// `1 − SSE/SST` clipped to `[0, 1]`; 0 for a constant target.
pub fn r_squared(pred: &[f64], y: &[f64]) -> f64 {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let sst: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    if sst == 0.0 {
        return 0.0;
    }
    let sse: f64 = pred.iter().zip(y).map(|(p, v)| (p - v).powi(2)).sum();
    (1.0 - sse / sst).clamp(0.0, 1.0)
}

/// 1-based index of the best subset for each attribute (column of `matrix`).
/// Ties go to the earlier subset.
pub fn best_subsets(matrix: &[Vec<f64>]) -> Vec<usize> {
    let attrs = matrix.first().map_or(0, Vec::len);
    (0..attrs)
        .map(|a| {
            let mut best = 0;
            for (i, row) in matrix.iter().enumerate() {
                if row[a] > matrix[best][a] {
                    best = i;
                }
            }
            best + 1
        })
        .collect()
}

pub fn alignment_csv(matrix: &[Vec<f64>], names: &[String]) -> String {
    let mut out = String::from("subset");
    for n in names {
        out.push(',');
        out.push_str(n);
    }
    out.push('\n');
    for (i, row) in matrix.iter().enumerate() {
        out.push_str(&(i + 1).to_string());
        for v in row {
            out.push_str(&format!(",{v:.6}"));
        }
        out.push('\n');
    }
    out
}
