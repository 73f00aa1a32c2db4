//! Differentiable operations recorded on the [`Graph`] tape.
//!
//! Broadcasting follows one rule: operands are elementwise-compatible when
//! their shapes are equal, when one operand is a scalar, or when the smaller
//! operand's shape is a suffix of the larger one's (the smaller tensor is
//! tiled over the leading axes). Anything else is a shape error — an op never
//! silently reshapes.

mod conv;
mod linalg;
mod scan_kernel;

use crate::error::{Error, Result};
use crate::graph::{Graph, Value};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Equal,
    /// rhs is a scalar or a suffix of lhs; output has lhs's shape.
    RhsTile,
    /// lhs is a scalar or a suffix of rhs; output has rhs's shape.
    LhsTile,
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

fn bcast_kind(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<Bcast> {
    if lhs == rhs {
        return Ok(Bcast::Equal);
    }
    let (ln, rn): (usize, usize) = (lhs.iter().product(), rhs.iter().product());
    if rn == 1 || is_suffix(rhs, lhs) {
        return Ok(Bcast::RhsTile);
    }
    if ln == 1 || is_suffix(lhs, rhs) {
        return Ok(Bcast::LhsTile);
    }
    Err(Error::shape_mismatch(op, lhs, rhs))
}

/// out[i] = f(big[i], tile[i mod tile.len()]) with `swap` exchanging the
/// argument order, so one loop serves both tile sides.
fn apply_tiled(big: &[f64], tile: &[f64], swap: bool, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let t = tile.len();
    let mut out = Vec::with_capacity(big.len());
    for chunk in big.chunks(t) {
        for (j, &bv) in chunk.iter().enumerate() {
            let tv = tile[j];
            out.push(if swap { f(tv, bv) } else { f(bv, tv) });
        }
    }
    out
}

/// target[j mod target.len()] += gout[j] * mult[j] (mult omitted when None).
pub(crate) fn accum_folded(target: &mut [f64], gout: &[f64], mult: Option<&[f64]>, sign: f64) {
    let t = target.len();
    match mult {
        None => {
            for chunk in gout.chunks(t) {
                for (j, &g) in chunk.iter().enumerate() {
                    target[j] += sign * g;
                }
            }
        }
        Some(m) => {
            let mut off = 0;
            for chunk in gout.chunks(t) {
                for (j, &g) in chunk.iter().enumerate() {
                    target[j] += sign * g * m[off + j];
                }
                off += chunk.len();
            }
        }
    }
}

/// target[j] += gout[j] * tile[j mod tile.len()] over a full-size target.
pub(crate) fn accum_tiled(target: &mut [f64], gout: &[f64], tile: &[f64], sign: f64) {
    let t = tile.len();
    let mut off = 0;
    for chunk in gout.chunks(t) {
        for (j, &g) in chunk.iter().enumerate() {
            target[off + j] += sign * g * tile[j];
        }
        off += chunk.len();
    }
}

impl Graph {
    fn binary_forward(
        &self,
        op: &'static str,
        a: Value,
        b: Value,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Bcast, Vec<usize>, Vec<f64>)> {
        let (ash, bsh) = (self.shape(a), self.shape(b));
        let kind = bcast_kind(op, ash, bsh)?;
        let (shape, data) = match kind {
            Bcast::Equal => (
                ash.to_vec(),
                self.data(a)
                    .iter()
                    .zip(self.data(b))
                    .map(|(&x, &y)| f(x, y))
                    .collect(),
            ),
            Bcast::RhsTile => (ash.to_vec(), apply_tiled(self.data(a), self.data(b), false, f)),
            Bcast::LhsTile => (bsh.to_vec(), apply_tiled(self.data(b), self.data(a), true, f)),
        };
        Ok((kind, shape, data))
    }

    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        let (_, shape, data) = self.binary_forward("add", a, b, |x, y| x + y)?;
        self.push_op("add", shape, data, &[a, b], || {
            Box::new(move |gout, sink| {
                accum_folded(sink.slot(a), gout, None, 1.0);
                accum_folded(sink.slot(b), gout, None, 1.0);
            })
        })
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Result<Value> {
        let (_, shape, data) = self.binary_forward("sub", a, b, |x, y| x - y)?;
        self.push_op("sub", shape, data, &[a, b], || {
            Box::new(move |gout, sink| {
                accum_folded(sink.slot(a), gout, None, 1.0);
                accum_folded(sink.slot(b), gout, None, -1.0);
            })
        })
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value> {
        let (kind, shape, data) = self.binary_forward("mul", a, b, |x, y| x * y)?;
        let a_data = self.data_arc(a);
        let b_data = self.data_arc(b);
        self.push_op("mul", shape, data, &[a, b], || {
            Box::new(move |gout, sink| {
                match kind {
                    Bcast::Equal => {
                        accum_folded(sink.slot(a), gout, Some(&b_data), 1.0);
                        accum_folded(sink.slot(b), gout, Some(&a_data), 1.0);
                    }
                    Bcast::RhsTile => {
                        // gout has a's (full) shape; b is the tile.
                        accum_tiled(sink.slot(a), gout, &b_data, 1.0);
                        accum_folded(sink.slot(b), gout, Some(&a_data), 1.0);
                    }
                    Bcast::LhsTile => {
                        accum_folded(sink.slot(a), gout, Some(&b_data), 1.0);
                        accum_tiled(sink.slot(b), gout, &a_data, 1.0);
                    }
                }
            })
        })
    }

    pub fn add_scalar(&mut self, a: Value, c: f64) -> Result<Value> {
        let shape = self.shape(a).to_vec();
        let data = self.data(a).iter().map(|&x| x + c).collect();
        self.push_op("add_scalar", shape, data, &[a], || {
            Box::new(move |gout, sink| accum_folded(sink.slot(a), gout, None, 1.0))
        })
    }

    pub fn mul_scalar(&mut self, a: Value, c: f64) -> Result<Value> {
        let shape = self.shape(a).to_vec();
        let data = self.data(a).iter().map(|&x| x * c).collect();
        self.push_op("mul_scalar", shape, data, &[a], || {
            Box::new(move |gout, sink| accum_folded(sink.slot(a), gout, None, c))
        })
    }

    pub fn neg(&mut self, a: Value) -> Result<Value> {
        self.mul_scalar(a, -1.0)
    }

    pub fn exp(&mut self, a: Value) -> Result<Value> {
        let shape = self.shape(a).to_vec();
        let data: Vec<f64> = self.data(a).iter().map(|&x| x.exp()).collect();
        let saved = data.clone();
        self.push_op("exp", shape, data, &[a], || {
            Box::new(move |gout, sink| accum_folded(sink.slot(a), gout, Some(&saved), 1.0))
        })
    }

    pub fn sigmoid(&mut self, a: Value) -> Result<Value> {
        let shape = self.shape(a).to_vec();
        let data: Vec<f64> = self.data(a).iter().map(|&x| sigmoid(x)).collect();
        let saved = data.clone();
        self.push_op("sigmoid", shape, data, &[a], || {
            Box::new(move |gout, sink| {
                let slot = sink.slot(a);
                for (i, &g) in gout.iter().enumerate() {
                    let s = saved[i];
                    slot[i] += g * s * (1.0 - s);
                }
            })
        })
    }

    pub fn silu(&mut self, a: Value) -> Result<Value> {
        let shape = self.shape(a).to_vec();
        let input = self.data_arc(a);
        let data: Vec<f64> = input.iter().map(|&x| x * sigmoid(x)).collect();
        self.push_op("silu", shape, data, &[a], || {
            Box::new(move |gout, sink| {
                let slot = sink.slot(a);
                for (i, &g) in gout.iter().enumerate() {
                    let s = sigmoid(input[i]);
                    slot[i] += g * s * (1.0 + input[i] * (1.0 - s));
                }
            })
        })
    }

    pub fn softplus(&mut self, a: Value) -> Result<Value> {
        let shape = self.shape(a).to_vec();
        let input = self.data_arc(a);
        let data: Vec<f64> = input.iter().map(|&x| softplus(x)).collect();
        self.push_op("softplus", shape, data, &[a], || {
            Box::new(move |gout, sink| {
                let slot = sink.slot(a);
                for (i, &g) in gout.iter().enumerate() {
                    slot[i] += g * sigmoid(input[i]);
                }
            })
        })
    }

    pub fn sum_all(&mut self, a: Value) -> Result<Value> {
        let n = self.data(a).len();
        let s: f64 = self.data(a).iter().sum();
        self.push_op("sum", vec![], vec![s], &[a], || {
            Box::new(move |gout, sink| {
                let g = gout[0];
                let slot = sink.slot(a);
                for v in slot.iter_mut().take(n) {
                    *v += g;
                }
            })
        })
    }

    pub fn mean_all(&mut self, a: Value) -> Result<Value> {
        let n = self.data(a).len();
        if n == 0 {
            return Err(Error::invalid_shape("mean", self.shape(a), "empty tensor"));
        }
        let s: f64 = self.data(a).iter().sum::<f64>() / n as f64;
        self.push_op("mean", vec![], vec![s], &[a], || {
            Box::new(move |gout, sink| {
                let g = gout[0] / n as f64;
                let slot = sink.slot(a);
                for v in slot.iter_mut().take(n) {
                    *v += g;
                }
            })
        })
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable ln(1 + e^x).
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of softplus, used to seed delta biases: softplus(inv(y)) == y.
pub fn softplus_inverse(y: f64) -> f64 {
    debug_assert!(y > 0.0);
    y.exp_m1().ln()
}
