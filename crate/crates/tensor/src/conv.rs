//! 2-D convolution and its adjoint via im2col.
//!
//! Images are `[batch, channels, height, width]`. Convolution weights are
//! `[out, in, k, k]`; transposed-convolution weights are `[in, out, k, k]`,
//! so a transposed convolution with weight `w` is the input-gradient map of a
//! convolution with the same `w`.

use crate::error::{contract, shape_err, Result};
use crate::graph::{BackwardFn, Var};
use crate::ops::gemm;
use crate::tensor::Tensor;

/// Output extent of a convolution along one spatial axis.
pub fn conv_out_size(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || k == 0 || k > padded {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Output extent of a transposed convolution along one spatial axis.
pub fn conv_transpose_out_size(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    if input == 0 || stride == 0 || k == 0 {
        return None;
    }
    ((input - 1) * stride + k).checked_sub(2 * pad).filter(|&s| s > 0)
}

#[derive(Clone, Copy, Debug)]
struct Geom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geom {
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }
    fn cols(&self) -> usize {
        self.ho * self.wo
    }
}

/// `[c, h, w]` image → `[c·k·k, ho·wo]` patch matrix.
fn im2col(x: &[f64], g: &Geom, cols: &mut [f64]) {
    let ncol = g.cols();
    for c in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * ncol..(row + 1) * ncol];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        dst[oy * g.wo + ox] = if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                            x[(c * g.h + iy as usize) * g.w + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds patches back into an image.
fn col2im(cols: &[f64], g: &Geom, x: &mut [f64]) {
    let ncol = g.cols();
    for c in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * ncol..(row + 1) * ncol];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            x[(c * g.h + iy as usize) * g.w + ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution on raw buffers: `x [b, ci, h, w]`, `w [co, ci·k·k]`.
fn conv_forward(x: &[f64], b: usize, g: &Geom, w: &[f64], co: usize, out: &mut [f64]) {
    let mut cols = vec![0.0; g.rows() * g.cols()];
    let (in_sz, out_sz) = (g.c * g.h * g.w, co * g.cols());
    for i in 0..b {
        im2col(&x[i * in_sz..(i + 1) * in_sz], g, &mut cols);
        let (r, n) = (g.rows() as isize, g.cols() as isize);
        gemm(co, g.rows(), g.cols(), 1.0, w, r, 1, &cols, n, 1, 0.0, &mut out[i * out_sz..], n, 1);
    }
}

/// Input-gradient of a convolution: `dy [b, co, ho, wo]` → `dx [b, ci, h, w]`.
fn conv_input_grad(dy: &[f64], b: usize, g: &Geom, w: &[f64], co: usize, dx: &mut [f64]) {
    let mut cols = vec![0.0; g.rows() * g.cols()];
    let (in_sz, out_sz) = (g.c * g.h * g.w, co * g.cols());
    let (r, n) = (g.rows() as isize, g.cols() as isize);
    for i in 0..b {
        // cols = Wᵀ · dy
        gemm(g.rows(), co, g.cols(), 1.0, w, 1, r, &dy[i * out_sz..], n, 1, 0.0, &mut cols, n, 1);
        col2im(&cols, g, &mut dx[i * in_sz..(i + 1) * in_sz]);
    }
}

/// Weight-gradient of a convolution, accumulated into `dw [co, ci·k·k]`.
fn conv_weight_grad(x: &[f64], dy: &[f64], b: usize, g: &Geom, co: usize, dw: &mut [f64]) {
    let mut cols = vec![0.0; g.rows() * g.cols()];
    let (in_sz, out_sz) = (g.c * g.h * g.w, co * g.cols());
    let (r, n) = (g.rows() as isize, g.cols() as isize);
    for i in 0..b {
        im2col(&x[i * in_sz..(i + 1) * in_sz], g, &mut cols);
        // dW += dy · colsᵀ
        gemm(co, g.cols(), g.rows(), 1.0, &dy[i * out_sz..], n, 1, &cols, 1, n, 1.0, dw, r, 1);
    }
}

fn bias_grad(dy: &[f64], b: usize, co: usize, spatial: usize) -> Tensor {
    let mut db = vec![0.0; co];
    for i in 0..b {
        for (c, acc) in db.iter_mut().enumerate() {
            let base = (i * co + c) * spatial;
            *acc += dy[base..base + spatial].iter().sum::<f64>();
        }
    }
    Tensor::vector(db)
}

fn add_bias(out: &mut [f64], bias: &[f64], b: usize, spatial: usize) {
    let co = bias.len();
    for i in 0..b {
        for c in 0..co {
            let base = (i * co + c) * spatial;
            for v in &mut out[base..base + spatial] {
                *v += bias[c];
            }
        }
    }
}

fn check_image(op: &'static str, x: &Tensor, w: &Tensor) -> Result<(usize, usize, usize, usize, usize)> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 4 || ws.len() != 4 || ws[2] != ws[3] {
        return shape_err(op, xs, ws);
    }
    Ok((xs[0], xs[1], xs[2], xs[3], ws[2]))
}

impl<'g> Var<'g> {
    /// Cross-correlation of `[b, ci, h, w]` with `[co, ci, k, k]` weights.
    pub fn conv2d(&self, weight: &Var<'g>, bias: Option<&Var<'g>>, stride: usize, pad: usize) -> Result<Var<'g>> {
        self.same_graph(weight)?;
        let x = self.value();
        let w = weight.value();
        let (b, ci, h, wd, k) = check_image("conv2d", &x, &w)?;
        let co = w.shape()[0];
        if w.shape()[1] != ci {
            return shape_err("conv2d", x.shape(), w.shape());
        }
        let (Some(ho), Some(wo)) = (conv_out_size(h, k, stride, pad), conv_out_size(wd, k, stride, pad)) else {
            return shape_err("conv2d", x.shape(), w.shape());
        };
        let g = Geom { c: ci, h, w: wd, k, stride, pad, ho, wo };
        let mut out = vec![0.0; b * co * ho * wo];
        conv_forward(x.data(), b, &g, w.data(), co, &mut out);
        let mut parents = vec![*self, *weight];
        if let Some(bv) = bias {
            self.same_graph(bv)?;
            let bt = bv.value();
            if bt.shape() != [co] {
                return shape_err("conv2d bias", &[co], bt.shape());
            }
            add_bias(&mut out, bt.data(), b, ho * wo);
            parents.push(*bv);
        }
        let (x2, w2) = (x.clone(), w.clone());
        let bw: BackwardFn = Box::new(move |gy, needs| {
            let dy = gy.data();
            let dx = needs[0].then(|| {
                let mut dx = vec![0.0; x2.numel()];
                conv_input_grad(dy, b, &g, w2.data(), co, &mut dx);
                Tensor::new(x2.shape().to_vec(), dx).unwrap()
            });
            let dw = needs[1].then(|| {
                let mut dw = vec![0.0; w2.numel()];
                conv_weight_grad(x2.data(), dy, b, &g, co, &mut dw);
                Tensor::new(w2.shape().to_vec(), dw).unwrap()
            });
            let mut grads = vec![dx, dw];
            if needs.len() > 2 {
                grads.push(needs[2].then(|| bias_grad(dy, b, co, ho * wo)));
            }
            grads
        });
        self.graph.record("conv2d", Tensor::new(vec![b, co, ho, wo], out)?, &parents, bw)
    }

    /// Transposed convolution of `[b, ci, h, w]` with `[ci, co, k, k]` weights.
    pub fn conv_transpose2d(
        &self,
        weight: &Var<'g>,
        bias: Option<&Var<'g>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'g>> {
        self.same_graph(weight)?;
        let x = self.value();
        let w = weight.value();
        let (b, ci, h, wd, k) = check_image("conv_transpose2d", &x, &w)?;
        if w.shape()[0] != ci {
            return shape_err("conv_transpose2d", x.shape(), w.shape());
        }
        let co = w.shape()[1];
        let (Some(ho), Some(wo)) = (
            conv_transpose_out_size(h, k, stride, pad),
            conv_transpose_out_size(wd, k, stride, pad),
        ) else {
            return shape_err("conv_transpose2d", x.shape(), w.shape());
        };
        // The convolution whose adjoint this is maps [co, ho, wo] → [ci, h, wd].
        let g = Geom { c: co, h: ho, w: wo, k, stride, pad, ho: h, wo: wd };
        if conv_out_size(ho, k, stride, pad) != Some(h) || conv_out_size(wo, k, stride, pad) != Some(wd) {
            return contract("conv_transpose2d", "stride/padding combination is not invertible");
        }
        let mut out = vec![0.0; b * co * ho * wo];
        conv_input_grad(x.data(), b, &g, w.data(), ci, &mut out);
        let mut parents = vec![*self, *weight];
        if let Some(bv) = bias {
            self.same_graph(bv)?;
            let bt = bv.value();
            if bt.shape() != [co] {
                return shape_err("conv_transpose2d bias", &[co], bt.shape());
            }
            add_bias(&mut out, bt.data(), b, ho * wo);
            parents.push(*bv);
        }
        let (x2, w2) = (x.clone(), w.clone());
        let bw: BackwardFn = Box::new(move |gy, needs| {
            let dy = gy.data();
            let dx = needs[0].then(|| {
                let mut dx = vec![0.0; x2.numel()];
                conv_forward(dy, b, &g, w2.data(), ci, &mut dx);
                Tensor::new(x2.shape().to_vec(), dx).unwrap()
            });
            let dw = needs[1].then(|| {
                // w is [ci, co·k·k]; the forward was y = adjointconv(x), so
                // dW = x · im2col(dy)ᵀ, i.e. conv_weight_grad with roles swapped.
                let mut dw = vec![0.0; w2.numel()];
                conv_weight_grad(dy, x2.data(), b, &g, ci, &mut dw);
                Tensor::new(w2.shape().to_vec(), dw).unwrap()
            });
            let mut grads = vec![dx, dw];
            if needs.len() > 2 {
                grads.push(needs[2].then(|| bias_grad(dy, b, co, ho * wo)));
            }
            grads
        });
        self.graph.record("conv_transpose2d", Tensor::new(vec![b, co, ho, wo], out)?, &parents, bw)
    }
}

/// Input-gradient (vector-Jacobian product) of `conv2d(·, w)` at `dy`,
/// computed directly on tensors without a graph.
pub fn conv2d_input_vjp(dy: &Tensor, w: &Tensor, in_hw: (usize, usize), stride: usize, pad: usize) -> Result<Tensor> {
    let (ds, ws) = (dy.shape(), w.shape());
    if ds.len() != 4 || ws.len() != 4 || ds[1] != ws[0] {
        return shape_err("conv2d_input_vjp", ds, ws);
    }
    let (b, co, ci, k) = (ds[0], ws[0], ws[1], ws[2]);
    let (h, wd) = in_hw;
    let g = Geom {
        c: ci,
        h,
        w: wd,
        k,
        stride,
        pad,
        ho: ds[2],
        wo: ds[3],
    };
    if conv_out_size(h, k, stride, pad) != Some(ds[2]) || conv_out_size(wd, k, stride, pad) != Some(ds[3]) {
        return shape_err("conv2d_input_vjp", ds, &[h, wd]);
    }
    let mut dx = vec![0.0; b * ci * h * wd];
    conv_input_grad(dy.data(), b, &g, w.data(), co, &mut dx);
    Tensor::new(vec![b, ci, h, wd], dx)
}
