//! Finite-difference gradient checks.
//!
//! Every op has an independent `f64` reference forward. The analytic
//! gradient from the tape is compared against central differences of the
//! reference at random probes.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::nn::{Activation, Mlp};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const PROBES: usize = 20;
pub const H: f64 = 1e-3;
pub const RTOL: f64 = 1e-3;

/// Relative error with an absolute floor of `1e-3` on the denominator.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub name: String,
    pub probe: usize,
    pub location: String,
    pub analytic: f64,
    pub numeric: f64,
}

impl fmt::Display for Mismatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} probe {} at {}: analytic {} vs numeric {} (rel {:.3e})",
            self.name,
            self.probe,
            self.location,
            self.analytic,
            self.numeric,
            rel_err(self.analytic, self.numeric)
        )
    }
}

impl std::error::Error for Mismatch {}

pub type Reference = dyn Fn(&[Vec<f64>]) -> Vec<f64>;
pub type Build = dyn for<'t> Fn(&[Var<'t>]) -> Var<'t>;

pub fn to_f64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| f64::from(v)).collect()
}

/// Central difference of `f` along coordinate `ci` of block `pi`.
pub fn central_difference(f: &dyn Fn(&[Vec<f64>]) -> f64, at: &[Vec<f64>], pi: usize, ci: usize) -> f64 {
    let mut plus = at.to_vec();
    plus[pi][ci] += H;
    let mut minus = at.to_vec();
    minus[pi][ci] -= H;
    (f(&plus) - f(&minus)) / (2.0 * H)
}

/// Checks one op with loss `Σ c ⊙ op(inputs)` for random fixed weights `c`.
/// Inputs are redrawn for every probe.
pub fn check_op(
    name: &str,
    shapes: &[Vec<usize>],
    build: &Build,
    reference: &Reference,
    seed: u64,
) -> Result<(), Mismatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for probe in 0..PROBES {
        let inputs: Vec<Tensor> = shapes
            .iter()
            .map(|s| {
                let mut t = Tensor::randn(s, 1.0, &mut rng);
                // keep away from the relu kink
                for v in t.data_mut() {
                    if v.abs() < 0.05 {
                        *v += 0.1;
                    }
                }
                t.with_requires_grad(true)
            })
            .collect();
        let inputs64: Vec<Vec<f64>> = inputs.iter().map(to_f64).collect();
        let out_len = reference(&inputs64).len();
        // f32-representable so both sides see the same weights
        let weights: Vec<f64> = (0..out_len)
            .map(|_| f64::from(rng.random_range(-1.0f32..1.0)))
            .collect();
        let loss64 = |xs: &[Vec<f64>]| -> f64 {
            reference(xs).iter().zip(&weights).map(|(a, b)| a * b).sum()
        };

        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
        let out = build(&vars);
        let c = tape.constant(
            Tensor::new(out.shape(), weights.iter().map(|&w| w as f32).collect())
                .expect("weights match output"),
        );
        let loss = out.mul(&c).expect("same shape").sum();
        tape.backward(loss).expect("scalar loss");

        let which = rng.random_range(0..inputs.len());
        let coord = rng.random_range(0..inputs[which].len());
        let analytic = f64::from(tape.grad(vars[which]).expect("leaf gradient")[coord]);
        let numeric = central_difference(&loss64, &inputs64, which, coord);
        if rel_err(analytic, numeric) > RTOL {
            return Err(Mismatch {
                name: name.to_string(),
                probe,
                location: format!("input {which}[{coord}]"),
                analytic,
                numeric,
            });
        }
    }
    Ok(())
}

/// Probes `PROBES` random coordinates of `params` against the numeric
/// derivative of `loss64`. `analytic(pi, ci)` reads the tape gradient.
pub fn check_params(
    name: &str,
    params: &[Vec<f64>],
    analytic: &dyn Fn(usize, usize) -> f64,
    loss64: &dyn Fn(&[Vec<f64>]) -> f64,
    seed: u64,
) -> Result<(), Mismatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for probe in 0..PROBES {
        let pi = rng.random_range(0..params.len());
        let ci = rng.random_range(0..params[pi].len());
        let a = analytic(pi, ci);
        let n = central_difference(loss64, params, pi, ci);
        if rel_err(a, n) > RTOL {
            return Err(Mismatch {
                name: name.to_string(),
                probe,
                location: format!("param {pi}[{ci}]"),
                analytic: a,
                numeric: n,
            });
        }
    }
    Ok(())
}

pub fn matmul64(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            c[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
        }
    }
    c
}

pub fn sigmoid64(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn activation64(act: Activation, x: f64) -> f64 {
    match act {
        Activation::Silu => x * sigmoid64(x),
        Activation::Tanh => x.tanh(),
        Activation::Relu => x.max(0.0),
    }
}

/// Row-wise layer norm without affine parameters.
pub fn layer_norm64(x: &[f64], cols: usize, eps: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(cols) {
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / cols as f64;
        let rs = 1.0 / (var + eps).sqrt();
        out.extend(row.iter().map(|a| (a - mean) * rs));
    }
    out
}

/// `f64` forward of `mlp`'s architecture with parameters `params`
/// (weight, bias per layer) on `rows` input rows.
pub fn mlp_forward64(mlp: &Mlp, params: &[Vec<f64>], x: &[f64], rows: usize) -> Vec<f64> {
    let n = mlp.layers.len();
    let mut h = x.to_vec();
    let mut width = mlp.input_dim();
    for (l, pair) in params.chunks(2).enumerate() {
        let out_w = mlp.layers[l].outputs();
        let mut z = matmul64(&h, &pair[0], rows, width, out_w);
        for r in 0..rows {
            for j in 0..out_w {
                z[r * out_w + j] += pair[1][j];
            }
        }
        if l + 1 < n {
            if mlp.layer_norm {
                z = layer_norm64(&z, out_w, f64::from(1e-5f32));
            }
            for v in &mut z {
                *v = activation64(mlp.activation, *v);
            }
        }
        h = z;
        width = out_w;
    }
    h
}

/// Runs [`check_op`] on every differentiable op of the tape.
pub fn op_suite() -> Vec<(&'static str, Result<(), Mismatch>)> {
    let mut out = Vec::new();
    let pair = [vec![3, 4], vec![3, 4]];
    let unary = [vec![2, 6]];
    out.push((
        "add",
        check_op(
            "add",
            &pair,
            &|v| v[0].add(&v[1]).unwrap(),
            &|x| x[0].iter().zip(&x[1]).map(|(a, b)| a + b).collect(),
            1,
        ),
    ));
    out.push((
        "sub",
        check_op(
            "sub",
            &pair,
            &|v| v[0].sub(&v[1]).unwrap(),
            &|x| x[0].iter().zip(&x[1]).map(|(a, b)| a - b).collect(),
            2,
        ),
    ));
    out.push((
        "mul",
        check_op(
            "mul",
            &pair,
            &|v| v[0].mul(&v[1]).unwrap(),
            &|x| x[0].iter().zip(&x[1]).map(|(a, b)| a * b).collect(),
            3,
        ),
    ));
    out.push((
        "mul-broadcast",
        check_op(
            "mul-broadcast",
            &[vec![3, 4], vec![1]],
            &|v| v[0].mul(&v[1]).unwrap(),
            &|x| x[0].iter().map(|a| a * x[1][0]).collect(),
            4,
        ),
    ));
    out.push((
        "scale",
        check_op(
            "scale",
            &[vec![5]],
            &|v| v[0].scale(-1.7),
            &|x| x[0].iter().map(|a| a * f64::from(-1.7f32)).collect(),
            5,
        ),
    ));
    out.push((
        "matmul",
        check_op(
            "matmul",
            &[vec![4, 3], vec![3, 5]],
            &|v| v[0].matmul(&v[1]).unwrap(),
            &|x| matmul64(&x[0], &x[1], 4, 3, 5),
            6,
        ),
    ));
    for (i, act) in [Activation::Relu, Activation::Silu, Activation::Tanh]
        .into_iter()
        .enumerate()
    {
        let name = match act {
            Activation::Relu => "relu",
            Activation::Silu => "silu",
            Activation::Tanh => "tanh",
        };
        out.push((
            name,
            check_op(
                name,
                &unary,
                &move |v| match act {
                    Activation::Relu => v[0].relu(),
                    Activation::Silu => v[0].silu(),
                    Activation::Tanh => v[0].tanh(),
                },
                &move |x| x[0].iter().map(|&a| activation64(act, a)).collect(),
                7 + i as u64,
            ),
        ));
    }
    out.push((
        "square",
        check_op(
            "square",
            &unary,
            &|v| v[0].square(),
            &|x| x[0].iter().map(|a| a * a).collect(),
            10,
        ),
    ));
    out.push((
        "sum",
        check_op(
            "sum",
            &[vec![3, 3]],
            &|v| v[0].sum(),
            &|x| vec![x[0].iter().sum()],
            11,
        ),
    ));
    out.push((
        "mean",
        check_op(
            "mean",
            &[vec![3, 3]],
            &|v| v[0].mean(),
            &|x| vec![x[0].iter().sum::<f64>() / 9.0],
            12,
        ),
    ));
    out.push((
        "concat",
        check_op(
            "concat",
            &[vec![2, 3], vec![2, 2]],
            &|v| v[0].concat(&v[1]).unwrap(),
            &|x| {
                let mut out = Vec::new();
                for r in 0..2 {
                    out.extend_from_slice(&x[0][r * 3..r * 3 + 3]);
                    out.extend_from_slice(&x[1][r * 2..r * 2 + 2]);
                }
                out
            },
            13,
        ),
    ));
    out.push((
        "slice",
        check_op(
            "slice",
            &[vec![3, 5]],
            &|v| v[0].slice(1, 4).unwrap(),
            &|x| (0..3).flat_map(|r| x[0][r * 5 + 1..r * 5 + 4].to_vec()).collect(),
            14,
        ),
    ));
    out.push((
        "layer_norm",
        check_op(
            "layer_norm",
            &[vec![3, 6]],
            &|v| v[0].layer_norm(1e-5).unwrap(),
            &|x| layer_norm64(&x[0], 6, f64::from(1e-5f32)),
            15,
        ),
    ));
    out
}
