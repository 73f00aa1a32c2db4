//! Parameter updates: Adam (default) and plain gradient descent.

use crate::error::Result;
use crate::graph::Gradients;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// First/second-moment state is kept per parameter index, so the caller must
/// present parameters in a stable order on every step.
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step_count: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn adam(lr: f64) -> Self {
        Optimizer {
            kind: OptimizerKind::Adam,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn sgd(lr: f64) -> Self {
        Optimizer {
            kind: OptimizerKind::Sgd,
            lr,
            beta1: 0.0,
            beta2: 0.0,
            eps: 0.0,
            step_count: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Compute updated tensors for parameters presented in stable order.
    /// Entry i of the result is `None` when parameter i received no gradient
    /// (it stays untouched); the caller writes the `Some` entries back.
    pub fn step(&mut self, params: &[Tensor], grads: &Gradients) -> Result<Vec<Option<Tensor>>> {
        self.step_count += 1;
        if self.m.len() < params.len() {
            self.m.resize_with(params.len(), Vec::new);
            self.v.resize_with(params.len(), Vec::new);
        }
        let mut out = Vec::with_capacity(params.len());
        for (i, p) in params.iter().enumerate() {
            let Some(g) = grads.get(p) else {
                out.push(None);
                continue;
            };
            let updated = match self.kind {
                OptimizerKind::Sgd => p.axpy(-self.lr, g)?,
                OptimizerKind::Adam => {
                    if self.m[i].len() != p.len() {
                        self.m[i] = vec![0.0; p.len()];
                        self.v[i] = vec![0.0; p.len()];
                    }
                    let bc1 = 1.0 - self.beta1.powi(self.step_count as i32);
                    let bc2 = 1.0 - self.beta2.powi(self.step_count as i32);
                    let mut data = p.data().to_vec();
                    for (j, (&gv, x)) in g.data().iter().zip(data.iter_mut()).enumerate() {
                        let m = &mut self.m[i][j];
                        let v = &mut self.v[i][j];
                        *m = self.beta1 * *m + (1.0 - self.beta1) * gv;
                        *v = self.beta2 * *v + (1.0 - self.beta2) * gv * gv;
                        let mhat = *m / bc1;
                        let vhat = *v / bc2;
                        *x -= self.lr * mhat / (vhat.sqrt() + self.eps);
                    }
                    Tensor::new(p.shape().to_vec(), data)?
                }
            };
            let mut updated = updated;
            updated.set_requires_grad(p.requires_grad());
            out.push(Some(updated));
        }
        Ok(out)
    }
}
