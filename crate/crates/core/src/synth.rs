//! Synthetic images rendered from known modular attributes.
//!
//! The reference set has four attributes with nested pixel footprints, from
//! finest to coarsest:
//!
//! | rank | attribute        | footprint                          |
//! |------|------------------|------------------------------------|
//! | 1    | corner dot       | 2×2 patch, top-left                |
//! | 2    | shape morph      | 4×4 patch, top-right               |
//! | 3    | object position  | raised-cosine blob in a lower band |
//! | 4    | background level | every pixel                        |
//!
//! Layers are composited additively on top of the background, never overlap
//! each other, and stay inside `[-1, 1]`, so the renderer is injective on the
//! discretized factor grid.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use diti_tensor::Tensor;

use crate::error::{ensure, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RendererKind {
    CornerDot,
    ShapeMorph,
    ObjectPosition,
    Background,
}

/// One modular attribute. `range` maps the factor in `[0, 1]` to the renderer
/// parameter: dot amplitude, morph blend, blob centre column (in units of
/// the image side) or background level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorDef {
    pub name: String,
    pub kind: RendererKind,
    pub range: (f64, f64),
    /// 1 = finest expected pixel footprint.
    pub granularity_rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub image_side: usize,
    pub n_samples: usize,
    pub factors: Vec<FactorDef>,
    /// Number of discrete levels per factor.
    pub levels: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn reference(n_samples: usize, seed: u64) -> Self {
        let def = |name: &str, kind, range, rank| FactorDef {
            name: name.into(),
            kind,
            range,
            granularity_rank: rank,
        };
        Self {
            image_side: 16,
            n_samples,
            factors: vec![
                def("corner_dot", RendererKind::CornerDot, (0.0, 0.6), 1),
                def("shape_morph", RendererKind::ShapeMorph, (0.0, 1.0), 2),
                def("object_position", RendererKind::ObjectPosition, (0.25, 0.75), 3),
                def("background", RendererKind::Background, (-0.9, -0.1), 4),
            ],
            levels: 32,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.image_side >= 8, "image_side must be >= 8");
        ensure!(self.n_samples >= 1, "n_samples must be >= 1");
        ensure!(self.factors.len() >= 3, "need at least three factors");
        ensure!(self.levels >= 2, "need at least two levels per factor");
        let mut ranks: Vec<usize> = self.factors.iter().map(|f| f.granularity_rank).collect();
        ranks.sort_unstable();
        ensure!(
            ranks.iter().enumerate().all(|(i, &r)| r == i + 1),
            "granularity ranks must be a permutation of 1..=N"
        );
        let mut kinds: Vec<_> = self.factors.iter().map(|f| f.kind as u8).collect();
        kinds.sort_unstable();
        kinds.dedup();
        ensure!(kinds.len() == self.factors.len(), "each renderer kind may appear once");
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.image_side * self.image_side
    }

    pub fn num_factors(&self) -> usize {
        self.factors.len()
    }

    /// Snaps a value in `[0, 1]` to the nearest discrete level.
    pub fn discretize(&self, v: f64) -> f64 {
        let k = (self.levels - 1) as f64;
        (v * k).round() / k
    }

    pub fn granularity_ranks(&self) -> Vec<usize> {
        self.factors.iter().map(|f| f.granularity_rank).collect()
    }

    /// Pixels attribute `i` (0-based) may touch, row-major.
    pub fn footprint(&self, i: usize) -> Vec<bool> {
        let side = self.image_side;
        let g = Geometry::new(side);
        let mut mask = vec![false; side * side];
        let mut mark = |rows: std::ops::Range<usize>, cols: std::ops::Range<usize>| {
            for r in rows {
                for c in cols.clone() {
                    mask[r * side + c] = true;
                }
            }
        };
        match self.factors[i].kind {
            RendererKind::CornerDot => mark(g.dot_rows(), g.dot_cols()),
            RendererKind::ShapeMorph => mark(g.shape_rows(), g.shape_cols()),
            RendererKind::ObjectPosition => mark(g.blob_band(), 0..side),
            RendererKind::Background => mark(0..side, 0..side),
        }
        mask
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorRecord {
    pub factors: Vec<f64>,
    pub granularity_rank: Vec<usize>,
}

impl FactorRecord {
    pub fn new(spec: &SyntheticSpec, factors: Vec<f64>) -> Result<Self> {
        ensure!(
            factors.len() == spec.num_factors(),
            "record has {} factors, spec has {}",
            factors.len(),
            spec.num_factors()
        );
        ensure!(
            factors.iter().all(|f| (0.0..=1.0).contains(f)),
            "factors must lie in [0, 1]: {factors:?}"
        );
        Ok(Self {
            factors,
            granularity_rank: spec.granularity_ranks(),
        })
    }

    pub fn zeros(spec: &SyntheticSpec) -> Self {
        Self {
            factors: vec![0.0; spec.num_factors()],
            granularity_rank: spec.granularity_ranks(),
        }
    }

    pub fn random<R: Rng + ?Sized>(spec: &SyntheticSpec, rng: &mut R) -> Self {
        let factors = (0..spec.num_factors())
            .map(|_| spec.discretize(rng.random::<f64>()))
            .collect();
        Self {
            factors,
            granularity_rank: spec.granularity_ranks(),
        }
    }
}

/// Pixel layout, scaled from the 16×16 reference.
struct Geometry {
    side: usize,
}

impl Geometry {
    fn new(side: usize) -> Self {
        Self { side }
    }

    fn unit(&self) -> f64 {
        self.side as f64 / 16.0
    }

    fn dot_rows(&self) -> std::ops::Range<usize> {
        0..2
    }

    fn dot_cols(&self) -> std::ops::Range<usize> {
        0..2
    }

    fn shape_rows(&self) -> std::ops::Range<usize> {
        1..5
    }

    fn shape_cols(&self) -> std::ops::Range<usize> {
        self.side - 6..self.side - 2
    }

    fn blob_center_row(&self) -> f64 {
        10.0 * self.unit()
    }

    fn blob_radius(&self) -> f64 {
        4.0 * self.unit()
    }

    fn blob_band(&self) -> std::ops::Range<usize> {
        let c = self.blob_center_row();
        let r = self.blob_radius();
        let lo = (c - r).floor().max(0.0) as usize;
        let hi = ((c + r).ceil() as usize + 1).min(self.side);
        lo..hi
    }
}

const SHAPE_AMPLITUDE: f64 = 0.9;
const BLOB_AMPLITUDE: f64 = 0.9;

fn lerp(range: (f64, f64), f: f64) -> f64 {
    range.0 + (range.1 - range.0) * f
}

/// Raised-cosine bump, 1 at the centre and 0 beyond `radius`.
fn bump(d: f64, radius: f64) -> f64 {
    if d.abs() >= radius {
        0.0
    } else {
        let c = (std::f64::consts::FRAC_PI_2 * d / radius).cos();
        c * c
    }
}

/// Deterministic grayscale image in `[-1, 1]`, shape `[side, side]`.
pub fn render(spec: &SyntheticSpec, r: &FactorRecord) -> Result<Tensor> {
    let data = render_pixels(spec, r)?;
    Ok(Tensor::new(vec![spec.image_side, spec.image_side], data)?)
}

pub fn render_pixels(spec: &SyntheticSpec, r: &FactorRecord) -> Result<Vec<f32>> {
    ensure!(
        r.factors.len() == spec.num_factors(),
        "record has {} factors, spec has {}",
        r.factors.len(),
        spec.num_factors()
    );
    ensure!(
        r.factors.iter().all(|f| (0.0..=1.0).contains(f)),
        "factors must lie in [0, 1]: {:?}",
        r.factors
    );
    let side = spec.image_side;
    let g = Geometry::new(side);
    let mut img = vec![0.0f64; side * side];
    for (def, &f) in spec.factors.iter().zip(&r.factors) {
        match def.kind {
            RendererKind::Background => {
                let level = lerp(def.range, f);
                img.iter_mut().for_each(|p| *p += level);
            }
            RendererKind::CornerDot => {
                let amp = lerp(def.range, f);
                for row in g.dot_rows() {
                    for col in g.dot_cols() {
                        img[row * side + col] += amp;
                    }
                }
            }
            RendererKind::ShapeMorph => {
                // horizontal bar morphing into a vertical bar
                let blend = lerp(def.range, f);
                let (r0, c0) = (g.shape_rows().start, g.shape_cols().start);
                for dr in 0..4 {
                    for dc in 0..4 {
                        let horizontal = f64::from(u8::from(dr == 1 || dr == 2));
                        let vertical = f64::from(u8::from(dc == 1 || dc == 2));
                        let v = (1.0 - blend) * horizontal + blend * vertical;
                        img[(r0 + dr) * side + c0 + dc] += SHAPE_AMPLITUDE * v;
                    }
                }
            }
            RendererKind::ObjectPosition => {
                let cx = lerp(def.range, f) * side as f64;
                let cy = g.blob_center_row();
                let rad = g.blob_radius();
                for row in g.blob_band() {
                    let by = bump(row as f64 - cy, rad);
                    if by == 0.0 {
                        continue;
                    }
                    for col in 0..side {
                        img[row * side + col] += BLOB_AMPLITUDE * by * bump(col as f64 - cx, rad);
                    }
                }
            }
        }
    }
    Ok(img.into_iter().map(|v| v.clamp(-1.0, 1.0) as f32).collect())
}

/// `g_i · x₀` at the factor level: factor `i` (0-based) replaced, others untouched.
pub fn apply_group_action(
    spec: &SyntheticSpec,
    r: &FactorRecord,
    i: usize,
    new_value: f64,
) -> Result<FactorRecord> {
    ensure!(i < spec.num_factors(), "factor index {i} out of range");
    ensure!((0.0..=1.0).contains(&new_value), "new value {new_value} outside [0, 1]");
    let mut out = r.clone();
    out.factors[i] = new_value;
    Ok(out)
}

/// An image and its intervened copy.
pub type ImagePair = (Vec<f32>, Vec<f32>);

/// Rendered intervention pairs `(x₀, g_i·x₀)`, one list per attribute.
///
/// Pair `j` draws one set of base factors and one (old, new) level pair and
/// reuses them for every attribute, so the lists are directly comparable.
pub fn intervention_pairs(spec: &SyntheticSpec, n_pairs: usize, seed: u64) -> Result<Vec<Vec<ImagePair>>> {
    ensure!(n_pairs >= 1, "need at least one pair");
    spec.validate()?;
    let mut rng = seed::stream(seed, "granularity-profile");
    let n = spec.num_factors();
    let mut out = vec![Vec::with_capacity(n_pairs); n];
    for _ in 0..n_pairs {
        let base = FactorRecord::random(spec, &mut rng);
        let old = spec.discretize(rng.random());
        let new = spec.discretize(rng.random());
        for (i, pairs) in out.iter_mut().enumerate() {
            let x = apply_group_action(spec, &base, i, old)?;
            let y = apply_group_action(spec, &x, i, new)?;
            pairs.push((render_pixels(spec, &x)?, render_pixels(spec, &y)?));
        }
    }
    Ok(out)
}

/// Intervention distances `‖x₀ − g_i·x₀‖` per attribute.
pub fn granularity_profile(spec: &SyntheticSpec, n_pairs: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    Ok(intervention_pairs(spec, n_pairs, seed)?
        .into_iter()
        .map(|pairs| pairs.iter().map(|(x, y)| pixel_distance(x, y)).collect())
        .collect())
}

pub fn pixel_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Rendered dataset with its ground truth and a fixed train/test split.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: SyntheticSpec,
    /// `[n_samples, side·side]`.
    pub images: Tensor,
    pub records: Vec<FactorRecord>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Dataset {
    pub fn generate(spec: &SyntheticSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = seed::stream(spec.seed, "dataset/factors");
        let records: Vec<FactorRecord> = (0..spec.n_samples)
            .map(|_| FactorRecord::random(spec, &mut rng))
            .collect();
        let mut data = Vec::with_capacity(spec.n_samples * spec.pixels());
        for r in &records {
            data.extend(render_pixels(spec, r)?);
        }
        let images = Tensor::new(vec![spec.n_samples, spec.pixels()], data)?;
        let (train, test) = split_indices(spec.n_samples, spec.seed);
        Ok(Self {
            spec: spec.clone(),
            images,
            records,
            train,
            test,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        self.images.row_slice(i)
    }

    /// `[idx.len(), pixels]` batch of the given rows.
    pub fn batch(&self, idx: &[usize]) -> Tensor {
        gather_rows(&self.images, idx)
    }

    pub fn factor_column(&self, i: usize, idx: &[usize]) -> Vec<f64> {
        idx.iter().map(|&j| self.records[j].factors[i]).collect()
    }

    /// Ground-truth CSV `index,factor_1..factor_N`.
    pub fn factors_csv(&self) -> String {
        let n = self.spec.num_factors();
        let mut out = String::from("index");
        for i in 1..=n {
            out.push_str(&format!(",factor_{i}"));
        }
        out.push('\n');
        for (j, r) in self.records.iter().enumerate() {
            out.push_str(&j.to_string());
            for f in &r.factors {
                out.push_str(&format!(",{f}"));
            }
            out.push('\n');
        }
        out
    }
}

/// 90/10 split by a seed-derived shuffle; both halves sorted.
pub fn split_indices(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::stream(seed, "dataset/split"));
    let n_test = if n >= 2 { (n / 10).max(1) } else { 0 };
    let mut test = idx[..n_test].to_vec();
    let mut train = idx[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    (train, test)
}

pub fn gather_rows(t: &Tensor, idx: &[usize]) -> Tensor {
    let cols = t.shape()[1];
    let mut data = Vec::with_capacity(idx.len() * cols);
    for &i in idx {
        data.extend_from_slice(t.row_slice(i));
    }
    Tensor::new(vec![idx.len(), cols], data).expect("gathered rows are finite")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::theory::stochastic_dominance;

    fn spec() -> SyntheticSpec {
        SyntheticSpec::reference(64, 3)
    }

    #[test]
    fn images_in_range() {
        let s = spec();
        let mut rng = seed::stream(1, "t");
        for _ in 0..50 {
            let r = FactorRecord::random(&s, &mut rng);
            let img = render(&s, &r).unwrap();
            assert_eq!(img.shape(), &[16, 16]);
            assert!(img.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
        assert!(FactorRecord::new(&s, vec![0.0, 0.0, 1.5, 0.0]).is_err());
        let bad = FactorRecord {
            factors: vec![0.0, -0.1, 0.0, 0.0],
            granularity_rank: s.granularity_ranks(),
        };
        assert!(render(&s, &bad).is_err());
    }

    #[test]
    fn background_shift_is_constant_off_objects() {
        let s = spec();
        let a = FactorRecord::new(&s, vec![0.3, 0.5, 0.4, 0.0]).unwrap();
        let b = apply_group_action(&s, &a, 3, 1.0).unwrap();
        let (ia, ib) = (render_pixels(&s, &a).unwrap(), render_pixels(&s, &b).unwrap());
        let mut object = vec![false; 256];
        for i in 0..3 {
            for (o, m) in object.iter_mut().zip(s.footprint(i)) {
                *o |= m;
            }
        }
        let diffs: Vec<f32> = ia
            .iter()
            .zip(&ib)
            .zip(&object)
            .filter(|(_, &o)| !o)
            .map(|((x, y), _)| y - x)
            .collect();
        assert!(diffs.iter().all(|d| (d - diffs[0]).abs() < 1e-6));
        assert!((diffs[0] - 0.8).abs() < 1e-6);
    }

    #[test]
    fn group_action_properties() {
        let s = spec();
        let r = FactorRecord::new(&s, vec![0.2, 0.4, 0.6, 0.8]).unwrap();
        assert_eq!(apply_group_action(&s, &r, 1, 0.4).unwrap(), r);
        let ij = apply_group_action(&s, &apply_group_action(&s, &r, 0, 0.9).unwrap(), 2, 0.1).unwrap();
        let ji = apply_group_action(&s, &apply_group_action(&s, &r, 2, 0.1).unwrap(), 0, 0.9).unwrap();
        assert_eq!(ij, ji);
        assert!(apply_group_action(&s, &r, 4, 0.5).is_err());
        assert!(apply_group_action(&s, &r, 0, 1.5).is_err());
    }

    #[test]
    fn corner_intervention_stays_in_patch() {
        let s = spec();
        let r = FactorRecord::new(&s, vec![0.2, 0.4, 0.6, 0.8]).unwrap();
        let y = apply_group_action(&s, &r, 0, 0.9).unwrap();
        let (a, b) = (render_pixels(&s, &r).unwrap(), render_pixels(&s, &y).unwrap());
        for (p, (x, z)) in a.iter().zip(&b).enumerate() {
            let inside = p / 16 < 2 && p % 16 < 2;
            assert_eq!(x != z, inside, "pixel {p}");
        }
    }

    #[test]
    fn corner_deltas_bounded_and_zero_intervention() {
        let s = spec();
        let profile = granularity_profile(&s, 300, 4).unwrap();
        assert!(profile[0].iter().all(|&d| d <= 2.0 * 4f64.sqrt()));
        let r = FactorRecord::new(&s, vec![0.2, 0.4, 0.6, 0.8]).unwrap();
        for i in 0..4 {
            let y = apply_group_action(&s, &r, i, r.factors[i]).unwrap();
            let d = pixel_distance(&render_pixels(&s, &r).unwrap(), &render_pixels(&s, &y).unwrap());
            assert_eq!(d, 0.0);
        }
    }

    #[test]
    fn background_dominates_corner() {
        let s = spec();
        let p = granularity_profile(&s, 1000, 11).unwrap();
        assert!(stochastic_dominance(&p[3], &p[0]).unwrap());
    }

    #[test]
    fn split_is_ninety_ten() {
        let (train, test) = split_indices(100, 5);
        assert_eq!((train.len(), test.len()), (90, 10));
        let mut all: Vec<_> = train.iter().chain(&test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn validate_rejects_bad_specs() {
        let mut s = spec();
        s.image_side = 4;
        assert!(s.validate().is_err());
        let mut s = spec();
        s.factors[0].granularity_rank = 2;
        assert!(s.validate().is_err());
        let mut s = spec();
        s.factors.truncate(2);
        assert!(s.validate().is_err());
    }
}
