//! Differentiable operations on [`Var`].

use std::rc::Rc;

use crate::error::{contract, shape_err, Result};
use crate::graph::{BackwardFn, Var};
use crate::tensor::Tensor;

/// `c = alpha * a·b + beta * c` on strided row/column views.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
    rsc: isize,
    csc: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    // SAFETY: callers pass slices whose extents cover every strided offset
    // touched by an m×k, k×n and m×n access pattern.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

fn suffix_compatible(long: &[usize], short: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

/// Sums `g` (shaped like the long operand) down to a suffix shape.
fn reduce_to(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let n: usize = shape.iter().product();
    let mut out = vec![0.0; n];
    for (i, v) in g.data().iter().enumerate() {
        out[i % n] += v;
    }
    Tensor::new(shape.to_vec(), out).expect("reduced shape")
}

#[derive(Clone, Copy)]
enum BinKind {
    Add,
    Sub,
    Mul,
}

fn layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

impl<'g> Var<'g> {
    fn binary(&self, other: &Var<'g>, kind: BinKind, op: &'static str) -> Result<Var<'g>> {
        self.same_graph(other)?;
        let a = self.value();
        let b = other.value();
        let out_shape = if suffix_compatible(a.shape(), b.shape()) {
            a.shape().to_vec()
        } else if suffix_compatible(b.shape(), a.shape()) {
            b.shape().to_vec()
        } else {
            return shape_err(op, a.shape(), b.shape());
        };
        let n: usize = out_shape.iter().product();
        let (na, nb) = (a.numel().max(1), b.numel().max(1));
        let (ad, bd) = (a.data(), b.data());
        let data: Vec<f64> = (0..n)
            .map(|i| {
                let (x, y) = (ad[i % na], bd[i % nb]);
                match kind {
                    BinKind::Add => x + y,
                    BinKind::Sub => x - y,
                    BinKind::Mul => x * y,
                }
            })
            .collect();
        let value = Tensor::new(out_shape, data)?;
        let (a2, b2) = (a.clone(), b.clone());
        let bw: BackwardFn = Box::new(move |g, needs| {
            let ga = needs[0].then(|| {
                let full = match kind {
                    BinKind::Add | BinKind::Sub => g.clone(),
                    BinKind::Mul => {
                        let nb = b2.numel().max(1);
                        let bd = b2.data();
                        Tensor::new(
                            g.shape().to_vec(),
                            g.data().iter().enumerate().map(|(i, v)| v * bd[i % nb]).collect(),
                        )
                        .unwrap()
                    }
                };
                reduce_to(&full, a2.shape())
            });
            let gb = needs[1].then(|| {
                let full = match kind {
                    BinKind::Add => g.clone(),
                    BinKind::Sub => g.map(|v| -v),
                    BinKind::Mul => {
                        let na = a2.numel().max(1);
                        let ad = a2.data();
                        Tensor::new(
                            g.shape().to_vec(),
                            g.data().iter().enumerate().map(|(i, v)| v * ad[i % na]).collect(),
                        )
                        .unwrap()
                    }
                };
                reduce_to(&full, b2.shape())
            });
            vec![ga, gb]
        });
        self.graph.record(op, value, &[*self, *other], bw)
    }

    /// Elementwise sum; either operand may broadcast over the other's leading axes.
    pub fn add(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.binary(other, BinKind::Add, "add")
    }

    pub fn sub(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.binary(other, BinKind::Sub, "sub")
    }

    pub fn mul(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.binary(other, BinKind::Mul, "mul")
    }

    fn unary(
        &self,
        op: &'static str,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Result<Var<'g>> {
        let x = self.value();
        let y = Rc::new(x.map(f));
        let (x2, y2) = (x.clone(), y.clone());
        let bw: BackwardFn = Box::new(move |g, _| {
            let d = g
                .data()
                .iter()
                .zip(x2.data().iter().zip(y2.data()))
                .map(|(gv, (&xv, &yv))| gv * df(xv, yv))
                .collect();
            vec![Some(Tensor::new(g.shape().to_vec(), d).unwrap())]
        });
        self.graph.record(op, (*y).clone(), &[*self], bw)
    }

    pub fn scale(&self, c: f64) -> Result<Var<'g>> {
        self.unary("scale", |x| c * x, move |_, _| c)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Var<'g>> {
        self.unary("add_scalar", |x| x + c, |_, _| 1.0)
    }

    pub fn neg(&self) -> Result<Var<'g>> {
        self.scale(-1.0)
    }

    pub fn exp(&self) -> Result<Var<'g>> {
        self.unary("exp", f64::exp, |_, y| y)
    }

    pub fn square(&self) -> Result<Var<'g>> {
        self.unary("square", |x| x * x, |x, _| 2.0 * x)
    }

    pub fn sigmoid(&self) -> Result<Var<'g>> {
        self.unary("sigmoid", sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn silu(&self) -> Result<Var<'g>> {
        self.unary(
            "silu",
            |x| x * sigmoid(x),
            |x, _| {
                let s = sigmoid(x);
                s + x * s * (1.0 - s)
            },
        )
    }

    pub fn softplus(&self) -> Result<Var<'g>> {
        self.unary("softplus", softplus, |x, _| sigmoid(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Result<Var<'g>> {
        self.unary("gelu", gelu, |x, _| gelu_grad(x))
    }

    pub fn sum_all(&self) -> Result<Var<'g>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let bw: BackwardFn = Box::new(move |g, _| vec![Some(Tensor::full(shape.clone(), g.data()[0]))]);
        self.graph.record("sum_all", Tensor::scalar(x.sum()), &[*self], bw)
    }

    pub fn mean_all(&self) -> Result<Var<'g>> {
        let n = self.value().numel();
        if n == 0 {
            return contract("mean_all", "empty tensor");
        }
        self.sum_all()?.scale(1.0 / n as f64)
    }

    /// Sum over one axis; the axis is removed from the shape.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'g>> {
        let x = self.value();
        if axis >= x.rank() {
            return contract("sum_axis", format!("axis {axis} out of range for {:?}", x.shape()));
        }
        let (outer, len, inner) = layout(x.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        let xd = x.data();
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += xd[base + i];
                }
            }
        }
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        let in_shape = x.shape().to_vec();
        let bw: BackwardFn = Box::new(move |g, _| {
            let gd = g.data();
            let mut d = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for l in 0..len {
                    let base = (o * len + l) * inner;
                    d[base..base + inner].copy_from_slice(&gd[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(Tensor::new(in_shape.clone(), d).unwrap())]
        });
        self.graph.record("sum_axis", Tensor::new(shape, out)?, &[*self], bw)
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Var<'g>> {
        let shape = self.shape();
        if axis >= shape.len() || shape[axis] == 0 {
            return contract("mean_axis", format!("cannot average axis {axis} of {shape:?}"));
        }
        self.sum_axis(axis)?.scale(1.0 / shape[axis] as f64)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g>> {
        let x = self.value();
        let value = x.reshape(shape.to_vec())?;
        let in_shape = x.shape().to_vec();
        let bw: BackwardFn = Box::new(move |g, _| vec![Some(g.reshape(in_shape.clone()).unwrap())]);
        self.graph.record("reshape", value, &[*self], bw)
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Var<'g>> {
        let x = self.value();
        let rank = x.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return contract("permute", format!("invalid permutation {perm:?} for {:?}", x.shape()));
        }
        let value = permute_tensor(&x, perm);
        let mut inverse = vec![0; rank];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        let bw: BackwardFn = Box::new(move |g, _| vec![Some(permute_tensor(g, &inverse))]);
        self.graph.record("permute", value, &[*self], bw)
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Var<'g>> {
        let r = self.value().rank();
        if r < 2 {
            return contract("transpose", "needs rank >= 2");
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 1, r - 2);
        self.permute(&perm)
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'g>> {
        let x = self.value();
        if axis >= x.rank() || start + len > x.shape()[axis] {
            return contract(
                "narrow",
                format!("range {start}..{} on axis {axis} of {:?}", start + len, x.shape()),
            );
        }
        let (outer, full, inner) = layout(x.shape(), axis);
        let mut d = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            d.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        let in_shape = x.shape().to_vec();
        let bw: BackwardFn = Box::new(move |g, _| {
            let mut out = vec![0.0; outer * full * inner];
            for o in 0..outer {
                let base = (o * full + start) * inner;
                out[base..base + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(Tensor::new(in_shape.clone(), out).unwrap())]
        });
        self.graph.record("narrow", Tensor::new(shape, d)?, &[*self], bw)
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'g>], axis: usize) -> Result<Var<'g>> {
        let Some(first) = parts.first() else {
            return contract("concat", "nothing to concatenate");
        };
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let base_shape = values[0].shape().to_vec();
        if axis >= base_shape.len() {
            return contract("concat", format!("axis {axis} out of range for {base_shape:?}"));
        }
        for (p, v) in parts.iter().zip(&values) {
            first.same_graph(p)?;
            let s = v.shape();
            if s.len() != base_shape.len()
                || s.iter().zip(&base_shape).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return shape_err("concat", &base_shape, s);
            }
        }
        let lens: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let (outer, _, inner) = layout(&base_shape, axis);
        let mut d = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &l) in values.iter().zip(&lens) {
                d.extend_from_slice(&v.data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = base_shape.clone();
        shape[axis] = total;
        let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        let bw: BackwardFn = Box::new(move |g, needs| {
            let gd = g.data();
            let mut offset = 0;
            let mut out = Vec::with_capacity(lens.len());
            for ((&l, s), &need) in lens.iter().zip(&shapes).zip(needs) {
                if need {
                    let mut d = Vec::with_capacity(outer * l * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        d.extend_from_slice(&gd[base..base + l * inner]);
                    }
                    out.push(Some(Tensor::new(s.clone(), d).unwrap()));
                } else {
                    out.push(None);
                }
                offset += l;
            }
            out
        });
        first.graph.record("concat", Tensor::new(shape, d)?, parts, bw)
    }

    /// Row lookup `table[ids[i], :]` for a rank-2 table.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Var<'g>> {
        let t = self.value();
        if t.rank() != 2 {
            return contract("gather_rows", format!("table must be rank 2, got {:?}", t.shape()));
        }
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        if let Some(bad) = ids.iter().find(|&&i| i >= rows) {
            return contract("gather_rows", format!("row {bad} out of range for {rows} rows"));
        }
        let mut d = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            d.extend_from_slice(&t.data()[i * cols..(i + 1) * cols]);
        }
        let ids = ids.to_vec();
        let bw: BackwardFn = Box::new(move |g, _| {
            let mut out = vec![0.0; rows * cols];
            for (r, &i) in ids.iter().enumerate() {
                for c in 0..cols {
                    out[i * cols + c] += g.data()[r * cols + c];
                }
            }
            vec![Some(Tensor::new(vec![rows, cols], out).unwrap())]
        });
        self.graph.record("gather_rows", Tensor::new(vec![d.len() / cols.max(1), cols], d)?, &[*self], bw)
    }

    /// Batched matrix product `[.., m, k] · [.., k, n]`.
    ///
    /// Batch extents must match, or one operand must be a plain matrix that is
    /// shared across the other's batch.
    pub fn matmul(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.same_graph(other)?;
        let a = self.value();
        let b = other.value();
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() < 2 || sb.len() < 2 {
            return shape_err("matmul", sa, sb);
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        if k != k2 || !(ba.is_empty() || bb.is_empty() || ba == bb) {
            return shape_err("matmul", sa, sb);
        }
        let batch_shape = if ba.is_empty() { bb.to_vec() } else { ba.to_vec() };
        let nbatch: usize = batch_shape.iter().product();
        let a_batched = !ba.is_empty();
        let b_batched = !bb.is_empty();
        let mut out = vec![0.0; nbatch * m * n];
        let (ki, ni) = (k as isize, n as isize);
        if !b_batched {
            // Fold a's batch into rows: one gemm.
            gemm(nbatch * m, k, n, 1.0, a.data(), ki, 1, b.data(), ni, 1, 0.0, &mut out, ni, 1);
        } else {
            for i in 0..nbatch {
                let ao = if a_batched { i * m * k } else { 0 };
                gemm(
                    m,
                    k,
                    n,
                    1.0,
                    &a.data()[ao..],
                    ki,
                    1,
                    &b.data()[i * k * n..],
                    ni,
                    1,
                    0.0,
                    &mut out[i * m * n..],
                    ni,
                    1,
                );
            }
        }
        let mut shape = batch_shape;
        shape.extend_from_slice(&[m, n]);
        let (a2, b2) = (a.clone(), b.clone());
        let bw: BackwardFn = Box::new(move |g, needs| {
            let gd = g.data();
            let ga = needs[0].then(|| {
                // dA = dC · Bᵀ
                let mut da = vec![0.0; a2.numel()];
                if !b_batched {
                    gemm(nbatch * m, n, k, 1.0, gd, ni, 1, b2.data(), 1, ni, 0.0, &mut da, ki, 1);
                } else {
                    for i in 0..nbatch {
                        let ao = if a_batched { i * m * k } else { 0 };
                        let beta = if a_batched || i == 0 { 0.0 } else { 1.0 };
                        gemm(
                            m,
                            n,
                            k,
                            1.0,
                            &gd[i * m * n..],
                            ni,
                            1,
                            &b2.data()[i * k * n..],
                            1,
                            ni,
                            beta,
                            &mut da[ao..],
                            ki,
                            1,
                        );
                    }
                }
                Tensor::new(a2.shape().to_vec(), da).unwrap()
            });
            let gb = needs[1].then(|| {
                // dB = Aᵀ · dC
                let mut db = vec![0.0; b2.numel()];
                if !b_batched {
                    gemm(k, nbatch * m, n, 1.0, a2.data(), 1, ki, gd, ni, 1, 0.0, &mut db, ni, 1);
                } else {
                    for i in 0..nbatch {
                        let ao = if a_batched { i * m * k } else { 0 };
                        gemm(
                            k,
                            m,
                            n,
                            1.0,
                            &a2.data()[ao..],
                            1,
                            ki,
                            &gd[i * m * n..],
                            ni,
                            1,
                            0.0,
                            &mut db[i * k * n..],
                            ni,
                            1,
                        );
                    }
                }
                Tensor::new(b2.shape().to_vec(), db).unwrap()
            });
            vec![ga, gb]
        });
        self.graph.record("matmul", Tensor::new(shape, out)?, &[*self, *other], bw)
    }

    /// Softmax along `axis`, with max-subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Var<'g>> {
        let x = self.value();
        if axis >= x.rank() {
            return contract("softmax", format!("axis {axis} out of range for {:?}", x.shape()));
        }
        let (outer, len, inner) = layout(x.shape(), axis);
        let y = Rc::new(softmax_tensor(&x, outer, len, inner));
        let y2 = y.clone();
        let bw: BackwardFn = Box::new(move |g, _| {
            let (yd, gd) = (y2.data(), g.data());
            let mut d = vec![0.0; yd.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |l: usize| (o * len + l) * inner + i;
                    let dot: f64 = (0..len).map(|l| yd[at(l)] * gd[at(l)]).sum();
                    for l in 0..len {
                        d[at(l)] = yd[at(l)] * (gd[at(l)] - dot);
                    }
                }
            }
            vec![Some(Tensor::new(y2.shape().to_vec(), d).unwrap())]
        });
        self.graph.record("softmax", (*y).clone(), &[*self], bw)
    }

    /// Layer normalization over the last axis followed by `gamma ⊙ x̂ + beta`.
    pub fn layer_norm(&self, gamma: &Var<'g>, beta: &Var<'g>, eps: f64) -> Result<Var<'g>> {
        self.same_graph(gamma)?;
        self.same_graph(beta)?;
        let x = self.value();
        let (gm, bt) = (gamma.value(), beta.value());
        let d = x.last_dim();
        if x.rank() == 0 || gm.shape() != [d] || bt.shape() != [d] {
            return shape_err("layer_norm", x.shape(), gm.shape());
        }
        let rows = x.numel() / d.max(1);
        let mut xhat = vec![0.0; x.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; x.numel()];
        for r in 0..rows {
            let row = &x.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = gm.data()[j] * h + bt.data()[j];
            }
        }
        let shape = x.shape().to_vec();
        let gm2 = gm.clone();
        let bw: BackwardFn = Box::new(move |g, needs| {
            let gd = g.data();
            let gx = needs[0].then(|| {
                let mut dx = vec![0.0; gd.len()];
                for r in 0..rows {
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..d {
                        let dh = gd[r * d + j] * gm2.data()[j];
                        mean_dh += dh;
                        mean_dh_h += dh * xhat[r * d + j];
                    }
                    mean_dh /= d as f64;
                    mean_dh_h /= d as f64;
                    for j in 0..d {
                        let dh = gd[r * d + j] * gm2.data()[j];
                        dx[r * d + j] = inv_std[r] * (dh - mean_dh - xhat[r * d + j] * mean_dh_h);
                    }
                }
                Tensor::new(shape.clone(), dx).unwrap()
            });
            let ggamma = needs[1].then(|| {
                let mut dg = vec![0.0; d];
                for (i, v) in gd.iter().enumerate() {
                    dg[i % d] += v * xhat[i];
                }
                Tensor::vector(dg)
            });
            let gbeta = needs[2].then(|| {
                let mut db = vec![0.0; d];
                for (i, v) in gd.iter().enumerate() {
                    db[i % d] += v;
                }
                Tensor::vector(db)
            });
            vec![gx, ggamma, gbeta]
        });
        let value = Tensor::new(x.shape().to_vec(), out)?;
        self.graph.record("layer_norm", value, &[*self, *gamma, *beta], bw)
    }

    /// Divides each vector along the last axis by its Euclidean norm.
    pub fn l2_normalize(&self, eps: f64) -> Result<Var<'g>> {
        let x = self.value();
        let d = x.last_dim();
        let rows = x.numel() / d.max(1);
        let mut y = vec![0.0; x.numel()];
        let mut norms = vec![0.0; rows];
        for r in 0..rows {
            let row = &x.data()[r * d..(r + 1) * d];
            let nrm = (row.iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
            norms[r] = nrm;
            for j in 0..d {
                y[r * d + j] = row[j] / nrm;
            }
        }
        let y = Rc::new(Tensor::new(x.shape().to_vec(), y)?);
        let y2 = y.clone();
        let bw: BackwardFn = Box::new(move |g, _| {
            let (gd, yd) = (g.data(), y2.data());
            let mut dx = vec![0.0; gd.len()];
            for r in 0..rows {
                let dot: f64 = (0..d).map(|j| gd[r * d + j] * yd[r * d + j]).sum();
                for j in 0..d {
                    dx[r * d + j] = (gd[r * d + j] - yd[r * d + j] * dot) / norms[r];
                }
            }
            vec![Some(Tensor::new(y2.shape().to_vec(), dx).unwrap())]
        });
        self.graph.record("l2_normalize", (*y).clone(), &[*self], bw)
    }

    /// Mean squared error between two equally shaped variables.
    pub fn mse(&self, target: &Var<'g>) -> Result<Var<'g>> {
        if self.shape() != target.shape() {
            return shape_err("mse", &self.shape(), &target.shape());
        }
        self.sub(target)?.square()?.mean_all()
    }
}

pub(crate) fn softmax_tensor(x: &Tensor, outer: usize, len: usize, inner: usize) -> Tensor {
    let xd = x.data();
    let mut y = vec![0.0; xd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |l: usize| (o * len + l) * inner + i;
            let mx = (0..len).map(|l| xd[at(l)]).fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for l in 0..len {
                let e = (xd[at(l)] - mx).exp();
                y[at(l)] = e;
                s += e;
            }
            for l in 0..len {
                y[at(l)] /= s;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), y).unwrap()
}

pub(crate) fn permute_tensor(x: &Tensor, perm: &[usize]) -> Tensor {
    let in_shape = x.shape();
    let rank = in_shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = x.numel();
    let mut out = Vec::with_capacity(n);
    if n > 0 {
        let mut idx = vec![0usize; rank];
        let mut off = 0usize;
        let xd = x.data();
        for _ in 0..n {
            out.push(xd[off]);
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                off += strides[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                off -= strides[ax] * out_shape[ax];
                idx[ax] = 0;
            }
        }
    }
    Tensor::new(out_shape, out).unwrap()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
