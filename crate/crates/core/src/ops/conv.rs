//! Grid resampling convolutions and the causal depthwise sequence conv.
//!
//! `conv_down` is a kernel-2 stride-2 convolution over an [h, w, d] grid:
//! each output position is an affine map of its disjoint 2x2 input patch, so
//! the token count shrinks by exactly 4x. `conv_up` is the matching stride-2
//! transposed convolution restoring 4x. Kernels are stored as [2, 2, d, d]
//! (dy, dx, in-channel, out-channel).

use crate::error::{Error, Result};
use crate::graph::{Graph, Value};

fn conv_shapes(op: &'static str, g: &Graph, x: Value, k: Value, b: Value) -> Result<(usize, usize, usize)> {
    let xs = g.shape(x);
    let (h, w, d) = match xs {
        [h, w, d] => (*h, *w, *d),
        _ => return Err(Error::invalid_shape(op, xs, "expected [h, w, d]")),
    };
    if g.shape(k) != [2, 2, d, d] {
        return Err(Error::shape_mismatch(op, &[2, 2, d, d], g.shape(k)));
    }
    if g.shape(b) != [d] {
        return Err(Error::shape_mismatch(op, &[d], g.shape(b)));
    }
    Ok((h, w, d))
}

impl Graph {
    /// [h, w, d] -> [h/2, w/2, d]; h and w must be even.
    pub fn conv_down(&mut self, x: Value, kernel: Value, bias: Value) -> Result<Value> {
        let (h, w, d) = conv_shapes("conv_down", self, x, kernel, bias)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::invalid_shape(
                "conv_down",
                self.shape(x),
                "h and w must be even for a stride-2 kernel-2 convolution",
            ));
        }
        let (h2, w2) = (h / 2, w / 2);
        let mut out = vec![0.0; h2 * w2 * d];
        {
            let src = self.data(x);
            let ker = self.data(kernel);
            let bs = self.data(bias);
            for oy in 0..h2 {
                for ox in 0..w2 {
                    let obase = (oy * w2 + ox) * d;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let ibase = ((2 * oy + dy) * w + (2 * ox + dx)) * d;
                            let kbase = (dy * 2 + dx) * d * d;
                            for c in 0..d {
                                let xv = src[ibase + c];
                                let krow = &ker[kbase + c * d..kbase + (c + 1) * d];
                                for o in 0..d {
                                    out[obase + o] += xv * krow[o];
                                }
                            }
                        }
                    }
                    for o in 0..d {
                        out[obase + o] += bs[o];
                    }
                }
            }
        }
        let x_data = self.data_arc(x);
        let k_data = self.data_arc(kernel);
        self.push_op("conv_down", vec![h2, w2, d], out, &[x, kernel, bias], || {
            Box::new(move |gout, sink| {
                {
                    let slot = sink.slot(x);
                    for oy in 0..h2 {
                        for ox in 0..w2 {
                            let obase = (oy * w2 + ox) * d;
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    let ibase = ((2 * oy + dy) * w + (2 * ox + dx)) * d;
                                    let kbase = (dy * 2 + dx) * d * d;
                                    for c in 0..d {
                                        let krow = &k_data[kbase + c * d..kbase + (c + 1) * d];
                                        let mut acc = 0.0;
                                        for o in 0..d {
                                            acc += gout[obase + o] * krow[o];
                                        }
                                        slot[ibase + c] += acc;
                                    }
                                }
                            }
                        }
                    }
                }
                {
                    let slot = sink.slot(kernel);
                    for oy in 0..h2 {
                        for ox in 0..w2 {
                            let obase = (oy * w2 + ox) * d;
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    let ibase = ((2 * oy + dy) * w + (2 * ox + dx)) * d;
                                    let kbase = (dy * 2 + dx) * d * d;
                                    for c in 0..d {
                                        let xv = x_data[ibase + c];
                                        let krow = &mut slot[kbase + c * d..kbase + (c + 1) * d];
                                        for o in 0..d {
                                            krow[o] += xv * gout[obase + o];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                let slot = sink.slot(bias);
                for chunk in gout.chunks(d) {
                    for (o, &g) in chunk.iter().enumerate() {
                        slot[o] += g;
                    }
                }
            })
        })
    }

    /// Stride-2 transposed convolution: [h, w, d] -> [2h, 2w, d]. Each output
    /// position receives exactly one kernel tap plus the bias.
    pub fn conv_up(&mut self, x: Value, kernel: Value, bias: Value) -> Result<Value> {
        let (h, w, d) = conv_shapes("conv_up", self, x, kernel, bias)?;
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![0.0; h2 * w2 * d];
        {
            let src = self.data(x);
            let ker = self.data(kernel);
            let bs = self.data(bias);
            for iy in 0..h {
                for ix in 0..w {
                    let ibase = (iy * w + ix) * d;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let obase = ((2 * iy + dy) * w2 + (2 * ix + dx)) * d;
                            let kbase = (dy * 2 + dx) * d * d;
                            for c in 0..d {
                                let xv = src[ibase + c];
                                let krow = &ker[kbase + c * d..kbase + (c + 1) * d];
                                for o in 0..d {
                                    out[obase + o] += xv * krow[o];
                                }
                            }
                        }
                    }
                }
            }
            for pos in 0..h2 * w2 {
                for o in 0..d {
                    out[pos * d + o] += bs[o];
                }
            }
        }
        let x_data = self.data_arc(x);
        let k_data = self.data_arc(kernel);
        self.push_op("conv_up", vec![h2, w2, d], out, &[x, kernel, bias], || {
            Box::new(move |gout, sink| {
                {
                    let slot = sink.slot(x);
                    for iy in 0..h {
                        for ix in 0..w {
                            let ibase = (iy * w + ix) * d;
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    let obase = ((2 * iy + dy) * w2 + (2 * ix + dx)) * d;
                                    let kbase = (dy * 2 + dx) * d * d;
                                    for c in 0..d {
                                        let krow = &k_data[kbase + c * d..kbase + (c + 1) * d];
                                        let mut acc = 0.0;
                                        for o in 0..d {
                                            acc += gout[obase + o] * krow[o];
                                        }
                                        slot[ibase + c] += acc;
                                    }
                                }
                            }
                        }
                    }
                }
                {
                    let slot = sink.slot(kernel);
                    for iy in 0..h {
                        for ix in 0..w {
                            let ibase = (iy * w + ix) * d;
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    let obase = ((2 * iy + dy) * w2 + (2 * ix + dx)) * d;
                                    let kbase = (dy * 2 + dx) * d * d;
                                    for c in 0..d {
                                        let xv = x_data[ibase + c];
                                        let krow = &mut slot[kbase + c * d..kbase + (c + 1) * d];
                                        for o in 0..d {
                                            krow[o] += xv * gout[obase + o];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                let slot = sink.slot(bias);
                for chunk in gout.chunks(d) {
                    for (o, &g) in chunk.iter().enumerate() {
                        slot[o] += g;
                    }
                }
            })
        })
    }

    /// Depthwise causal conv along the sequence axis: u[l, e], w[e, k],
    /// left-padded with zeros so position l sees positions l-k+1..=l.
    pub fn causal_conv1d(&mut self, u: Value, w: Value) -> Result<Value> {
        let us = self.shape(u);
        let (l, e) = match us {
            [l, e] => (*l, *e),
            _ => return Err(Error::invalid_shape("causal_conv1d", us, "expected [l, e]")),
        };
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || ws[0] != e {
            return Err(Error::shape_mismatch("causal_conv1d", &[e, 0], &ws));
        }
        let k = ws[1];
        let mut out = vec![0.0; l * e];
        {
            let src = self.data(u);
            let ker = self.data(w);
            for pos in 0..l {
                for c in 0..e {
                    let mut acc = 0.0;
                    for j in 0..k {
                        let t = pos as isize - (k as isize - 1) + j as isize;
                        if t >= 0 {
                            acc += ker[c * k + j] * src[t as usize * e + c];
                        }
                    }
                    out[pos * e + c] = acc;
                }
            }
        }
        let u_data = self.data_arc(u);
        let w_data = self.data_arc(w);
        self.push_op("causal_conv1d", vec![l, e], out, &[u, w], || {
            Box::new(move |gout, sink| {
                {
                    let slot = sink.slot(u);
                    for pos in 0..l {
                        for c in 0..e {
                            let g = gout[pos * e + c];
                            for j in 0..k {
                                let t = pos as isize - (k as isize - 1) + j as isize;
                                if t >= 0 {
                                    slot[t as usize * e + c] += g * w_data[c * k + j];
                                }
                            }
                        }
                    }
                }
                let slot = sink.slot(w);
                for pos in 0..l {
                    for c in 0..e {
                        let g = gout[pos * e + c];
                        for j in 0..k {
                            let t = pos as isize - (k as isize - 1) + j as isize;
                            if t >= 0 {
                                slot[c * k + j] += g * u_data[t as usize * e + c];
                            }
                        }
                    }
                }
            })
        })
    }
}
