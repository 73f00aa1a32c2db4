//! Matrix products, row gathers, normalization and shape plumbing.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::{Graph, Value};

/// out[m,n] += a[m,k] * b[k,n]
pub(crate) fn mm_nn_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// out[m,k] += g[m,n] * b[k,n]^T
pub(crate) fn mm_nt_acc(m: usize, k: usize, n: usize, g: &[f64], b: &[f64], out: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for j in 0..n {
                acc += grow[j] * brow[j];
            }
            orow[p] += acc;
        }
    }
}

/// out[k,n] += a[m,k]^T * g[m,n]
pub(crate) fn mm_tn_acc(m: usize, k: usize, n: usize, a: &[f64], g: &[f64], out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * grow[j];
            }
        }
    }
}

fn dims2(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [m, n] => Ok((*m, *n)),
        _ => Err(Error::invalid_shape(op, shape, "expected a rank-2 tensor")),
    }
}

impl Graph {
    pub fn matmul(&mut self, a: Value, b: Value) -> Result<Value> {
        let (m, k) = dims2("matmul", self.shape(a))?;
        let (k2, n) = dims2("matmul", self.shape(b))?;
        if k != k2 {
            return Err(Error::shape_mismatch("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        mm_nn_acc(m, k, n, self.data(a), self.data(b), &mut out);
        let a_data = self.data_arc(a);
        let b_data = self.data_arc(b);
        self.push_op("matmul", vec![m, n], out, &[a, b], || {
            Box::new(move |gout, sink| {
                mm_nt_acc(m, k, n, gout, &b_data, sink.slot(a));
                mm_tn_acc(m, k, n, &a_data, gout, sink.slot(b));
            })
        })
    }

    /// x[l,in] * w[in,out] + b[out]
    pub fn linear(&mut self, x: Value, w: Value, b: Option<Value>) -> Result<Value> {
        let (l, k) = dims2("linear", self.shape(x))?;
        let (k2, n) = dims2("linear", self.shape(w))?;
        if k != k2 {
            return Err(Error::shape_mismatch("linear", self.shape(x), self.shape(w)));
        }
        if let Some(bv) = b {
            if self.shape(bv) != [n] {
                return Err(Error::shape_mismatch("linear", &[n], self.shape(bv)));
            }
        }
        let mut out = vec![0.0; l * n];
        mm_nn_acc(l, k, n, self.data(x), self.data(w), &mut out);
        if let Some(bv) = b {
            let bias = self.data(bv);
            for row in out.chunks_mut(n) {
                for (j, v) in row.iter_mut().enumerate() {
                    *v += bias[j];
                }
            }
        }
        let x_data = self.data_arc(x);
        let w_data = self.data_arc(w);
        let mut inputs = vec![x, w];
        if let Some(bv) = b {
            inputs.push(bv);
        }
        self.push_op("linear", vec![l, n], out, &inputs, || {
            Box::new(move |gout, sink| {
                mm_nt_acc(l, k, n, gout, &w_data, sink.slot(x));
                mm_tn_acc(l, k, n, &x_data, gout, sink.slot(w));
                if let Some(bv) = b {
                    super::accum_folded(sink.slot(bv), gout, None, 1.0);
                }
            })
        })
    }

    pub fn transpose2(&mut self, a: Value) -> Result<Value> {
        let (m, n) = dims2("transpose", self.shape(a))?;
        let src = self.data(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        self.push_op("transpose", vec![n, m], out, &[a], || {
            Box::new(move |gout, sink| {
                let slot = sink.slot(a);
                for i in 0..m {
                    for j in 0..n {
                        slot[i * n + j] += gout[j * m + i];
                    }
                }
            })
        })
    }

    /// View under a new shape; element count must match.
    pub fn reshape(&mut self, a: Value, shape: Vec<usize>) -> Result<Value> {
        let len = self.data(a).len();
        if shape.iter().product::<usize>() != len {
            return Err(Error::invalid_shape(
                "reshape",
                &shape,
                format!("cannot view {len} elements under this shape"),
            ));
        }
        let data = self.data(a).to_vec();
        self.push_op("reshape", shape, data, &[a], || {
            Box::new(move |gout, sink| {
                super::accum_folded(sink.slot(a), gout, None, 1.0);
            })
        })
    }

    /// Concatenate along the last axis; leading dimensions must agree.
    pub fn concat_last(&mut self, a: Value, b: Value) -> Result<Value> {
        let ash = self.shape(a).to_vec();
        let bsh = self.shape(b).to_vec();
        if ash.len() != bsh.len()
            || ash.is_empty()
            || ash[..ash.len() - 1] != bsh[..bsh.len() - 1]
        {
            return Err(Error::shape_mismatch("concat", &ash, &bsh));
        }
        let (p, q) = (ash[ash.len() - 1], bsh[bsh.len() - 1]);
        let rows = self.data(a).len() / p.max(1);
        let mut out = Vec::with_capacity(rows * (p + q));
        {
            let (da, db) = (self.data(a), self.data(b));
            for r in 0..rows {
                out.extend_from_slice(&da[r * p..(r + 1) * p]);
                out.extend_from_slice(&db[r * q..(r + 1) * q]);
            }
        }
        let mut shape = ash.clone();
        *shape.last_mut().expect("non-empty shape") = p + q;
        self.push_op("concat", shape, out, &[a, b], || {
            Box::new(move |gout, sink| {
                {
                    let slot = sink.slot(a);
                    for r in 0..rows {
                        for j in 0..p {
                            slot[r * p + j] += gout[r * (p + q) + j];
                        }
                    }
                }
                let slot = sink.slot(b);
                for r in 0..rows {
                    for j in 0..q {
                        slot[r * q + j] += gout[r * (p + q) + p + j];
                    }
                }
            })
        })
    }

    /// Split the last axis into segments of the given sizes.
    pub fn split_last(&mut self, a: Value, sizes: &[usize]) -> Result<Vec<Value>> {
        let ash = self.shape(a).to_vec();
        let last = *ash.last().ok_or_else(|| {
            Error::invalid_shape("split", &ash, "cannot split a scalar")
        })?;
        if sizes.iter().sum::<usize>() != last {
            return Err(Error::invalid_shape(
                "split",
                &ash,
                format!("segment sizes {sizes:?} do not sum to last axis {last}"),
            ));
        }
        let rows = self.data(a).len() / last;
        let mut outs = Vec::with_capacity(sizes.len());
        let mut offset = 0;
        for &sz in sizes {
            let data = {
                let src = self.data(a);
                let mut d = Vec::with_capacity(rows * sz);
                for r in 0..rows {
                    d.extend_from_slice(&src[r * last + offset..r * last + offset + sz]);
                }
                d
            };
            let mut shape = ash.clone();
            *shape.last_mut().expect("non-empty shape") = sz;
            let seg_off = offset;
            let v = self.push_op("split", shape, data, &[a], || {
                Box::new(move |gout, sink| {
                    let slot = sink.slot(a);
                    for r in 0..rows {
                        for j in 0..sz {
                            slot[r * last + seg_off + j] += gout[r * sz + j];
                        }
                    }
                })
            })?;
            outs.push(v);
            offset += sz;
        }
        Ok(outs)
    }

    /// Row gather: output row i is input row `idx[i]`. The backward pass is
    /// a scatter-add, so duplicate indices are fine.
    pub fn gather_rows(&mut self, a: Value, idx: &[usize]) -> Result<Value> {
        let (r, s) = dims2("permute_rows", self.shape(a))?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::InvalidArgument(format!(
                "permute_rows: index {bad} out of range for {r} rows"
            )));
        }
        let src = self.data(a);
        let mut out = Vec::with_capacity(idx.len() * s);
        for &i in idx {
            out.extend_from_slice(&src[i * s..(i + 1) * s]);
        }
        let idx: Arc<Vec<usize>> = Arc::new(idx.to_vec());
        let out_rows = idx.len();
        self.push_op("permute_rows", vec![out_rows, s], out, &[a], || {
            Box::new(move |gout, sink| {
                let slot = sink.slot(a);
                for (o, &i) in idx.iter().enumerate() {
                    for j in 0..s {
                        slot[i * s + j] += gout[o * s + j];
                    }
                }
            })
        })
    }

    /// Per-row (last axis) normalization without learnable parameters.
    pub fn layer_norm(&mut self, x: Value, eps: f64) -> Result<Value> {
        self.layer_norm_impl(x, None, eps)
    }

    /// Per-row normalization followed by elementwise gain and bias.
    pub fn layer_norm_affine(&mut self, x: Value, gain: Value, bias: Value, eps: f64) -> Result<Value> {
        let d = *self.shape(x).last().ok_or_else(|| {
            Error::invalid_shape("layer_norm", self.shape(x), "scalar input")
        })?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape_mismatch("layer_norm", &[d], self.shape(gain)));
        }
        self.layer_norm_impl(x, Some((gain, bias)), eps)
    }

    fn layer_norm_impl(&mut self, x: Value, affine: Option<(Value, Value)>, eps: f64) -> Result<Value> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| {
            Error::invalid_shape("layer_norm", &shape, "scalar input")
        })?;
        let src = self.data(x);
        let rows = src.len() / d;
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[r] = istd;
            for j in 0..d {
                xhat[r * d + j] = (row[j] - mean) * istd;
            }
        }
        let mut out = xhat.clone();
        if let Some((gv, bv)) = affine {
            let (gain, bias) = (self.data(gv), self.data(bv));
            for r in 0..rows {
                for j in 0..d {
                    out[r * d + j] = out[r * d + j] * gain[j] + bias[j];
                }
            }
        }
        let xhat = Arc::new(xhat);
        let gain_data = affine.map(|(gv, _)| self.data_arc(gv));
        let mut inputs = vec![x];
        if let Some((gv, bv)) = affine {
            inputs.push(gv);
            inputs.push(bv);
        }
        self.push_op("layer_norm", shape, out, &inputs, || {
            Box::new(move |gout, sink| {
                if let Some((gv, bv)) = affine {
                    // d/dgain = sum_rows gout*xhat ; d/dbias = sum_rows gout
                    {
                        let slot = sink.slot(gv);
                        for r in 0..rows {
                            for j in 0..d {
                                slot[j] += gout[r * d + j] * xhat[r * d + j];
                            }
                        }
                    }
                    let slot = sink.slot(bv);
                    for r in 0..rows {
                        for j in 0..d {
                            slot[j] += gout[r * d + j];
                        }
                    }
                }
                let slot = sink.slot(x);
                let gain = gain_data.as_deref();
                for r in 0..rows {
                    let go = &gout[r * d..(r + 1) * d];
                    let xh = &xhat[r * d..(r + 1) * d];
                    // effective upstream gradient through the affine part
                    let mut g_eff = vec![0.0; d];
                    for j in 0..d {
                        g_eff[j] = match gain {
                            Some(ga) => go[j] * ga[j],
                            None => go[j],
                        };
                    }
                    let mean_g = g_eff.iter().sum::<f64>() / d as f64;
                    let mean_gx = g_eff
                        .iter()
                        .zip(xh.iter())
                        .map(|(&a, &b)| a * b)
                        .sum::<f64>()
                        / d as f64;
                    let istd = inv_std[r];
                    for j in 0..d {
                        slot[r * d + j] += istd * (g_eff[j] - mean_g - xh[j] * mean_gx);
                    }
                }
            })
        })
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax_last(&mut self, x: Value) -> Result<Value> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| {
            Error::invalid_shape("softmax", &shape, "scalar input")
        })?;
        let src = self.data(x);
        let rows = src.len() / d;
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..d {
                let e = (row[j] - mx).exp();
                out[r * d + j] = e;
                z += e;
            }
            for j in 0..d {
                out[r * d + j] /= z;
            }
        }
        let saved = out.clone();
        self.push_op("softmax", shape, out, &[x], || {
            Box::new(move |gout, sink| {
                let slot = sink.slot(x);
                for r in 0..rows {
                    let y = &saved[r * d..(r + 1) * d];
                    let go = &gout[r * d..(r + 1) * d];
                    let dot: f64 = y.iter().zip(go.iter()).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        slot[r * d + j] += y[j] * (go[j] - dot);
                    }
                }
            })
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_passthrough() {
        let mut g = Graph::new();
        let a = g.constant(&t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let eye = g.constant(&t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]));
        let y = g.matmul(a, eye).unwrap();
        assert_eq!(g.data(y), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_inner_dim_mismatch_names_shapes() {
        let mut g = Graph::new();
        let a = g.constant(&t(&[2, 3], &[0.0; 6]));
        let b = g.constant(&t(&[2, 2], &[0.0; 4]));
        let msg = format!("{}", g.matmul(a, b).unwrap_err());
        assert!(msg.contains("matmul") && msg.contains("[2, 3]") && msg.contains("[2, 2]"));
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(&t(&[1, 4], &[1.0, 1.0, 1.0, 1.0]));
        let y = g.layer_norm(x, 1e-6).unwrap();
        assert_eq!(g.data(y), &[0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn gather_rows_round_trips_through_inverse() {
        let mut g = Graph::new();
        let x = g.constant(&t(&[3, 2], &[0.0, 1.0, 10.0, 11.0, 20.0, 21.0]));
        let perm = [2usize, 0, 1];
        let mut inv = vec![0usize; 3];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        let fwd = g.gather_rows(x, &perm).unwrap();
        let back = g.gather_rows(fwd, &inv).unwrap();
        assert_eq!(g.data(back), g.data(x));
    }

    #[test]
    fn split_concat_round_trip() {
        let mut g = Graph::new();
        let x = g.constant(&t(&[2, 5], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]));
        let parts = g.split_last(x, &[2, 3]).unwrap();
        let back = g.concat_last(parts[0], parts[1]).unwrap();
        assert_eq!(g.data(back), g.data(x));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = g.constant(&t(&[2, 3], &[1.0, 2.0, 3.0, -1.0, 0.0, 1.0]));
        let y = g.softmax_last(x).unwrap();
        for row in g.data(y).chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
