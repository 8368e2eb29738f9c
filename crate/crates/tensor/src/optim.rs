use crate::tensor::Tensor;

/// Adam with optional global gradient-norm clipping.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub clip_norm: Option<f32>,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn with_clip(mut self, clip: Option<f32>) -> Self {
        self.clip_norm = clip;
        self
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update using (and clearing) each parameter's `grad`.
    /// Parameters without a gradient are left untouched.
    pub fn step(&mut self, params: &mut [&mut Tensor]) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        assert_eq!(self.m.len(), params.len(), "parameter set changed under Adam");
        self.step += 1;
        let scale = match self.clip_norm {
            Some(c) => {
                let norm = params
                    .iter()
                    .filter_map(|p| p.grad.as_ref())
                    .flatten()
                    .map(|&g| f64::from(g) * f64::from(g))
                    .sum::<f64>()
                    .sqrt() as f32;
                if norm > c {
                    c / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let Some(grad) = p.grad.take() else { continue };
            for (((x, g), m), v) in p.data_mut().iter_mut().zip(grad).zip(m).zip(v) {
                let g = g * scale;
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *x -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}
