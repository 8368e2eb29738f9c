//! Small multilayer perceptrons built on the tape.

use rand::Rng;

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Silu,
    Tanh,
}

impl Activation {
    fn apply<'t>(self, x: Var<'t>) -> Var<'t> {
        match self {
            Activation::Relu => x.relu(),
            Activation::Silu => x.silu(),
            Activation::Tanh => x.tanh(),
        }
    }
}

/// Fully connected layer `y = x·W + b`, `W: [in, out]`, `b: [1, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// He-style normal init for the weight, zero bias.
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let std = (2.0 / inputs as f32).sqrt();
        Self {
            weight: Tensor::randn(&[inputs, outputs], std, rng).with_requires_grad(true),
            bias: Tensor::zeros(&[1, outputs]).with_requires_grad(true),
        }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[inputs, outputs]).with_requires_grad(true),
            bias: Tensor::zeros(&[1, outputs]).with_requires_grad(true),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[1]
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
    /// Row-wise layer norm before each hidden activation.
    pub layer_norm: bool,
}

/// Parameters of an [`Mlp`] registered as leaves on one tape.
#[derive(Debug, Clone)]
pub struct BoundMlp<'t> {
    layers: Vec<(Var<'t>, Var<'t>)>,
    activation: Activation,
    layer_norm: bool,
}

impl Mlp {
    /// `widths = [in, h1, ..., out]`. The final layer is zero-initialised when
    /// `zero_last` is set, so the network starts as the constant zero map.
    pub fn new<R: Rng + ?Sized>(
        widths: &[usize],
        activation: Activation,
        layer_norm: bool,
        zero_last: bool,
        rng: &mut R,
    ) -> Self {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        let n = widths.len() - 1;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                if zero_last && i == n - 1 {
                    Linear::zeros(w[0], w[1])
                } else if i == n - 1 {
                    let mut l = Linear::new(w[0], w[1], rng);
                    // Output layer: unit-variance preactivations rather than He gain.
                    let s = std::f32::consts::FRAC_1_SQRT_2;
                    l.weight.data_mut().iter_mut().for_each(|v| *v *= s);
                    l
                } else {
                    Linear::new(w[0], w[1], rng)
                }
            })
            .collect();
        Self {
            layers,
            activation,
            layer_norm,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(Linear::outputs).unwrap_or(0)
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// Stable parameter names, `"{prefix}.{layer}.weight"` / `".bias"`.
    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        (0..self.layers.len())
            .flat_map(|i| [format!("{prefix}.{i}.weight"), format!("{prefix}.{i}.bias")])
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Registers the parameters on `tape`. A frozen binding never receives gradients.
    pub fn bind<'t>(&self, tape: &'t Tape, frozen: bool) -> BoundMlp<'t> {
        let leaf = |t: &Tensor| {
            if frozen {
                tape.leaf(&t.clone().with_requires_grad(false))
            } else {
                tape.leaf(t)
            }
        };
        BoundMlp {
            layers: self
                .layers
                .iter()
                .map(|l| (leaf(&l.weight), leaf(&l.bias)))
                .collect(),
            activation: self.activation,
            layer_norm: self.layer_norm,
        }
    }

    /// Accumulates gradients from a finished backward pass into `param.grad`.
    pub fn collect_grads(&mut self, tape: &Tape, bound: &BoundMlp<'_>) {
        for (layer, (w, b)) in self.layers.iter_mut().zip(&bound.layers) {
            tape.write_grad(*w, &mut layer.weight);
            tape.write_grad(*b, &mut layer.bias);
        }
    }

    /// Forward pass without gradient tracking.
    pub fn eval(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.bind(&tape, true);
        let out = bound.forward(tape.leaf(x))?;
        Ok(out.value())
    }
}

impl<'t> BoundMlp<'t> {
    /// `x: [batch, in]` → `[batch, out]`.
    pub fn forward(&self, x: Var<'t>) -> Result<Var<'t>> {
        let tape = x.tape();
        let rows = x.shape()[0];
        let ones = tape.constant(Tensor::ones(&[rows, 1]));
        let n = self.layers.len();
        let mut h = x;
        for (i, (w, b)) in self.layers.iter().enumerate() {
            h = h.matmul(w)?.add(&ones.matmul(b)?)?;
            if i + 1 < n {
                if self.layer_norm {
                    h = h.layer_norm(1e-5)?;
                }
                h = self.activation.apply(h);
            }
        }
        Ok(h)
    }
}
