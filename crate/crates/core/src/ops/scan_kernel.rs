//! Fused SSM discretization and selective-scan recurrence.
//!
//! The recurrence is inherently sequential along the sequence axis, so the
//! forward pass is a single tight loop over positions with contiguous
//! [e, n] state updates. The backward pass replays the recurrence in reverse
//! with a carried adjoint state; hidden states are saved from the forward
//! pass to avoid recomputation.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::{Graph, Value};

fn dims2(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [a, b] => Ok((*a, *b)),
        _ => Err(Error::invalid_shape(op, shape, "expected a rank-2 tensor")),
    }
}

fn dims3(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [a, b, c] => Ok((*a, *b, *c)),
        _ => Err(Error::invalid_shape(op, shape, "expected a rank-3 tensor")),
    }
}

impl Graph {
    /// Zero-order-hold state transition: abar[l,e,n] = exp(delta[l,e] * a[e,n]).
    /// Requires delta > 0 elementwise.
    pub fn discretize_a(&mut self, delta: Value, a: Value) -> Result<Value> {
        let (l, e) = dims2("discretize", self.shape(delta))?;
        let (e2, n) = dims2("discretize", self.shape(a))?;
        if e != e2 {
            return Err(Error::shape_mismatch("discretize", self.shape(delta), self.shape(a)));
        }
        check_delta_positive(self.data(delta))?;
        let mut out = vec![0.0; l * e * n];
        {
            let dl = self.data(delta);
            let av = self.data(a);
            for pos in 0..l {
                for c in 0..e {
                    let d = dl[pos * e + c];
                    let row = &av[c * n..(c + 1) * n];
                    let orow = &mut out[(pos * e + c) * n..(pos * e + c + 1) * n];
                    for j in 0..n {
                        orow[j] = (d * row[j]).exp();
                    }
                }
            }
        }
        let saved = out.clone();
        let delta_data = self.data_arc(delta);
        let a_data = self.data_arc(a);
        self.push_op("discretize_a", vec![l, e, n], out, &[delta, a], || {
            Box::new(move |gout, sink| {
                {
                    let slot = sink.slot(delta);
                    for pos in 0..l {
                        for c in 0..e {
                            let base = (pos * e + c) * n;
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += gout[base + j] * saved[base + j] * a_data[c * n + j];
                            }
                            slot[pos * e + c] += acc;
                        }
                    }
                }
                let slot = sink.slot(a);
                for pos in 0..l {
                    for c in 0..e {
                        let base = (pos * e + c) * n;
                        let d = delta_data[pos * e + c];
                        for j in 0..n {
                            slot[c * n + j] += gout[base + j] * saved[base + j] * d;
                        }
                    }
                }
            })
        })
    }

    /// Simplified ZOH input matrix: bbar[l,e,n] = delta[l,e] * b[l,n].
    pub fn discretize_b(&mut self, delta: Value, b: Value) -> Result<Value> {
        let (l, e) = dims2("discretize", self.shape(delta))?;
        let (l2, n) = dims2("discretize", self.shape(b))?;
        if l != l2 {
            return Err(Error::shape_mismatch("discretize", self.shape(delta), self.shape(b)));
        }
        check_delta_positive(self.data(delta))?;
        let mut out = vec![0.0; l * e * n];
        {
            let dl = self.data(delta);
            let bv = self.data(b);
            for pos in 0..l {
                let brow = &bv[pos * n..(pos + 1) * n];
                for c in 0..e {
                    let d = dl[pos * e + c];
                    let orow = &mut out[(pos * e + c) * n..(pos * e + c + 1) * n];
                    for j in 0..n {
                        orow[j] = d * brow[j];
                    }
                }
            }
        }
        let delta_data = self.data_arc(delta);
        let b_data = self.data_arc(b);
        self.push_op("discretize_b", vec![l, e, n], out, &[delta, b], || {
            Box::new(move |gout, sink| {
                {
                    let slot = sink.slot(delta);
                    for pos in 0..l {
                        for c in 0..e {
                            let base = (pos * e + c) * n;
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += gout[base + j] * b_data[pos * n + j];
                            }
                            slot[pos * e + c] += acc;
                        }
                    }
                }
                let slot = sink.slot(b);
                for pos in 0..l {
                    for c in 0..e {
                        let base = (pos * e + c) * n;
                        let d = delta_data[pos * e + c];
                        for j in 0..n {
                            slot[pos * n + j] += gout[base + j] * d;
                        }
                    }
                }
            })
        })
    }

    /// Input-dependent linear recurrence over the scan order:
    ///   h_k = abar_k (*) h_{k-1} + bbar_k * u_k        (per channel, diagonal state)
    ///   y_k = <c_k, h_k> + d_skip * u_k
    /// with h_0 = 0.
    pub fn selective_scan(
        &mut self,
        u: Value,
        abar: Value,
        bbar: Value,
        c: Value,
        d_skip: Value,
    ) -> Result<Value> {
        let (l, e) = dims2("selective_scan", self.shape(u))?;
        let (la, ea, n) = dims3("selective_scan", self.shape(abar))?;
        if (la, ea) != (l, e) {
            return Err(Error::shape_mismatch("selective_scan", self.shape(u), self.shape(abar)));
        }
        if self.shape(bbar) != [l, e, n] {
            return Err(Error::shape_mismatch(
                "selective_scan",
                self.shape(abar),
                self.shape(bbar),
            ));
        }
        if self.shape(c) != [l, n] {
            return Err(Error::shape_mismatch("selective_scan", &[l, n], self.shape(c)));
        }
        if self.shape(d_skip) != [e] {
            return Err(Error::shape_mismatch("selective_scan", &[e], self.shape(d_skip)));
        }

        let mut y = vec![0.0; l * e];
        // hidden states saved for the backward pass, laid out [l, e, n]
        let mut hs = vec![0.0; l * e * n];
        {
            let ud = self.data(u);
            let ad = self.data(abar);
            let bd = self.data(bbar);
            let cd = self.data(c);
            let dd = self.data(d_skip);
            let mut h = vec![0.0; e * n];
            for pos in 0..l {
                let crow = &cd[pos * n..(pos + 1) * n];
                for ch in 0..e {
                    let uv = ud[pos * e + ch];
                    let base = (pos * e + ch) * n;
                    let hrow = &mut h[ch * n..(ch + 1) * n];
                    let mut dot = 0.0;
                    for j in 0..n {
                        hrow[j] = ad[base + j] * hrow[j] + bd[base + j] * uv;
                        dot += crow[j] * hrow[j];
                    }
                    hs[base..base + n].copy_from_slice(hrow);
                    y[pos * e + ch] = dot + dd[ch] * uv;
                }
            }
        }

        let hs = Arc::new(hs);
        let u_data = self.data_arc(u);
        let a_data = self.data_arc(abar);
        let b_data = self.data_arc(bbar);
        let c_data = self.data_arc(c);
        let d_data = self.data_arc(d_skip);
        self.push_op("selective_scan", vec![l, e], y, &[u, abar, bbar, c, d_skip], || {
            Box::new(move |gout, sink| {
                // adjoint of the hidden state carried backward, [e, n]
                let mut dh = vec![0.0; e * n];
                let mut du = vec![0.0; l * e];
                let mut dabar = vec![0.0; l * e * n];
                let mut dbbar = vec![0.0; l * e * n];
                let mut dc = vec![0.0; l * n];
                let mut dd_skip = vec![0.0; e];
                for pos in (0..l).rev() {
                    let crow = &c_data[pos * n..(pos + 1) * n];
                    for ch in 0..e {
                        let gy = gout[pos * e + ch];
                        let uv = u_data[pos * e + ch];
                        let base = (pos * e + ch) * n;
                        let hrow = &hs[base..base + n];
                        dd_skip[ch] += gy * uv;
                        let mut du_acc = gy * d_data[ch];
                        let dhrow = &mut dh[ch * n..(ch + 1) * n];
                        for j in 0..n {
                            // y_k depends on h_k through <c_k, h_k>
                            let dhj = dhrow[j] + gy * crow[j];
                            dc[pos * n + j] += gy * hrow[j];
                            let h_prev = if pos == 0 {
                                0.0
                            } else {
                                hs[((pos - 1) * e + ch) * n + j]
                            };
                            dabar[base + j] = dhj * h_prev;
                            dbbar[base + j] = dhj * uv;
                            du_acc += dhj * b_data[base + j];
                            // carry to h_{k-1}
                            dhrow[j] = dhj * a_data[base + j];
                        }
                        du[pos * e + ch] = du_acc;
                    }
                }
                super::accum_folded(sink.slot(u), &du, None, 1.0);
                super::accum_folded(sink.slot(abar), &dabar, None, 1.0);
                super::accum_folded(sink.slot(bbar), &dbbar, None, 1.0);
                super::accum_folded(sink.slot(c), &dc, None, 1.0);
                super::accum_folded(sink.slot(d_skip), &dd_skip, None, 1.0);
            })
        })
    }
}

fn check_delta_positive(delta: &[f64]) -> Result<()> {
    if delta.iter().any(|&d| d <= 0.0) {
        return Err(Error::InvalidArgument(
            "discretize: delta must be strictly positive".into(),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn discretize_closed_form_point() {
        // delta=0.1, a=-1, b=1: abar = e^-0.1, bbar = 0.1
        let mut g = Graph::new();
        let delta = g.constant(&t(&[1, 1], &[0.1]));
        let a = g.constant(&t(&[1, 1], &[-1.0]));
        let b = g.constant(&t(&[1, 1], &[1.0]));
        let abar = g.discretize_a(delta, a).unwrap();
        let bbar = g.discretize_b(delta, b).unwrap();
        assert!((g.data(abar)[0] - 0.9048374180359595).abs() < 1e-15);
        assert!((g.data(bbar)[0] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn discretize_half_life() {
        // a = -ln 2, delta = 1 -> abar = 1/2
        let mut g = Graph::new();
        let delta = g.constant(&t(&[1, 1], &[1.0]));
        let a = g.constant(&t(&[1, 1], &[-(2.0f64.ln())]));
        let abar = g.discretize_a(delta, a).unwrap();
        assert!((g.data(abar)[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn discretize_zero_step_limit_and_error() {
        // the delta -> 0+ boundary: abar -> 1, bbar -> 0
        let mut g = Graph::new();
        let delta = g.constant(&t(&[1, 1], &[1e-300]));
        let a = g.constant(&t(&[1, 1], &[-3.0]));
        let b = g.constant(&t(&[1, 1], &[2.0]));
        let abar = g.discretize_a(delta, a).unwrap();
        let bbar = g.discretize_b(delta, b).unwrap();
        assert!((g.data(abar)[0] - 1.0).abs() < 1e-12);
        assert!(g.data(bbar)[0].abs() < 1e-12);
        // delta = 0 exactly is rejected
        let zero = g.constant(&t(&[1, 1], &[0.0]));
        assert!(g.discretize_a(zero, a).is_err());
        assert!(g.discretize_b(zero, b).is_err());
    }

    #[test]
    fn scan_hand_recurrence() {
        // E=N=1, abar=0.5, bbar=1, c=1, d_skip=0, u=[1,1] -> y=[1, 1.5]
        let mut g = Graph::new();
        let u = g.constant(&t(&[2, 1], &[1.0, 1.0]));
        let abar = g.constant(&t(&[2, 1, 1], &[0.5, 0.5]));
        let bbar = g.constant(&t(&[2, 1, 1], &[1.0, 1.0]));
        let c = g.constant(&t(&[2, 1], &[1.0, 1.0]));
        let d = g.constant(&t(&[1], &[0.0]));
        let y = g.selective_scan(u, abar, bbar, c, d).unwrap();
        assert_eq!(g.data(y), &[1.0, 1.5]);
    }

    #[test]
    fn scan_single_step_has_no_history() {
        // L=1: y_1 = <c_1, bbar_1*u_1> + d_skip*u_1
        let mut g = Graph::new();
        let u = g.constant(&t(&[1, 1], &[3.0]));
        let abar = g.constant(&t(&[1, 1, 2], &[0.9, 0.8]));
        let bbar = g.constant(&t(&[1, 1, 2], &[0.5, 0.25]));
        let c = g.constant(&t(&[1, 2], &[1.0, 2.0]));
        let d = g.constant(&t(&[1], &[0.1]));
        let y = g.selective_scan(u, abar, bbar, c, d).unwrap();
        // h = [1.5, 0.75], y = 1.5 + 1.5 + 0.3 = 3.3
        assert!((g.data(y)[0] - 3.3).abs() < 1e-15);
    }

    #[test]
    fn scan_running_sum() {
        // abar=1, bbar=1, c=1, d=0, u=ones -> y_k = k
        let l = 5;
        let mut g = Graph::new();
        let u = g.constant(&t(&[l, 1], &vec![1.0; l]));
        let abar = g.constant(&t(&[l, 1, 1], &vec![1.0; l]));
        let bbar = g.constant(&t(&[l, 1, 1], &vec![1.0; l]));
        let c = g.constant(&t(&[l, 1], &vec![1.0; l]));
        let d = g.constant(&t(&[1], &[0.0]));
        let y = g.selective_scan(u, abar, bbar, c, d).unwrap();
        for (k, &v) in g.data(y).iter().enumerate() {
            assert_eq!(v, (k + 1) as f64);
        }
    }
}
