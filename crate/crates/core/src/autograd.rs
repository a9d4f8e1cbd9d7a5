//! Eager reverse-mode differentiation over [`Tensor`]s.
//!
//! Every op evaluates immediately and records what its backward pass needs.
//! [`Graph::backward`] walks the tape in reverse and applies the hand-written
//! adjoint of each op. Only ops with a differentiable ancestor are visited.

use crate::spectral::{fft2_in_place, fftshift_index, ifftshift_index};
use crate::tensor::Tensor;
use rustfft::num_complex::Complex64;

const GN_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Tensor),
    AddBias(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Conv2d {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
    },
    Upsample(Var),
    ConcatLast(Vec<Var>),
    SliceLast {
        x: Var,
        start: usize,
    },
    ConcatRows(Var, Var),
    IndexRows {
        x: Var,
        idx: Vec<usize>,
    },
    AddRowsAt {
        base: Var,
        upd: Var,
        idx: Vec<usize>,
    },
    Relu(Var),
    Silu(Var),
    Sigmoid(Var),
    GroupNorm {
        x: Var,
        groups: usize,
        inv_std: Vec<f64>,
    },
    SoftmaxRows(Var),
    MaskRenorm {
        p: Var,
        mask: Tensor,
    },
    Reshape(Var),
    SpectralForward {
        x: Var,
        filter: Vec<f64>,
    },
    SpectralInverse(Var),
    MseConst {
        a: Var,
        target: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A tape of evaluated ops.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf; its gradient is kept after [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "elementwise op shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape(), data).unwrap()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.binary(a, b, |x, y| x + y);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.binary(a, b, |x, y| x - y);
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.binary(a, b, |x, y| x * y);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v * s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Var {
        let va = self.value(a);
        assert_eq!(va.len(), c.len(), "mul_const size mismatch");
        let data = va.data().iter().zip(c.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(va.shape(), data).unwrap();
        self.push(out, Op::MulConst(a, c), &[a])
    }

    /// `a + b` with `b` (shape `[C]`) broadcast over all but the last axis.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Var {
        let c = self.value(a).last_dim();
        assert_eq!(self.value(b).len(), c, "bias width mismatch");
        let mut out = self.value(a).clone();
        let bias = self.value(b).data();
        for row in out.data_mut().chunks_exact_mut(c) {
            for (o, &bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        self.push(out, Op::AddBias(a, b), &[a, b])
    }

    /// `[m, k] × [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.value(a).rc().expect("matmul lhs rank");
        let (k2, n) = self.value(b).rc().expect("matmul rhs rank");
        assert_eq!(k, k2, "matmul inner dim mismatch");
        let mut out = vec![0.0; m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = ad[i * k + p];
                if av == 0.0 {
                    continue;
                }
                for (o, &bv) in orow.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                    *o += av * bv;
                }
            }
        }
        self.push(Tensor::new(&[m, n], out).unwrap(), Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = self.value(a).rc().expect("transpose rank");
        let ad = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = ad[i * n + j];
            }
        }
        self.push(Tensor::new(&[n, m], out).unwrap(), Op::Transpose(a), &[a])
    }

    /// 2-D convolution of `x: [H, W, Ci]` with `w: [k, k, Ci, Co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let (h, wd, ci) = self.value(x).hwc().expect("conv input rank");
        let ws = self.value(w).shape().to_vec();
        assert!(ws.len() == 4 && ws[0] == ws[1] && ws[2] == ci, "conv weight shape {ws:?}");
        let (k, co) = (ws[0], ws[3]);
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0; oh * ow * co];
        let (xd, wdat) = (self.value(x).data(), self.value(w).data());
        for oy in 0..oh {
            for ox in 0..ow {
                let orow = &mut out[(oy * ow + ox) * co..(oy * ow + ox + 1) * co];
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= wd as isize {
                            continue;
                        }
                        let xin = &xd[(iy as usize * wd + ix as usize) * ci..][..ci];
                        let wbase = (ky * k + kx) * ci * co;
                        for (c, &xv) in xin.iter().enumerate() {
                            if xv == 0.0 {
                                continue;
                            }
                            let wrow = &wdat[wbase + c * co..wbase + (c + 1) * co];
                            for (o, &wv) in orow.iter_mut().zip(wrow) {
                                *o += xv * wv;
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor::new(&[oh, ow, co], out).unwrap();
        self.push(out, Op::Conv2d { x, w, stride, pad }, &[x, w])
    }

    /// Nearest-neighbour resize of `[h, w, c]` to `[oh, ow, c]`.
    pub fn upsample(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let (h, w, c) = self.value(x).hwc().expect("upsample rank");
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(oh * ow * c);
        for y in 0..oh {
            let sy = y * h / oh;
            for xx in 0..ow {
                let sx = xx * w / ow;
                out.extend_from_slice(&xd[(sy * w + sx) * c..(sy * w + sx + 1) * c]);
            }
        }
        self.push(Tensor::new(&[oh, ow, c], out).unwrap(), Op::Upsample(x), &[x])
    }

    /// Concatenate along the last axis; leading axes must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Var {
        let lead: Vec<usize> = {
            let s = self.shape(parts[0]);
            s[..s.len() - 1].to_vec()
        };
        let rows: usize = lead.iter().product();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).last_dim()).collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &wp) in parts.iter().zip(&widths) {
            let s = self.shape(p);
            assert_eq!(&s[..s.len() - 1], &lead[..], "concat leading dims mismatch");
            let pd = self.value(p).data();
            for r in 0..rows {
                out[r * total + off..r * total + off + wp].copy_from_slice(&pd[r * wp..(r + 1) * wp]);
            }
            off += wp;
        }
        let mut shape = lead;
        shape.push(total);
        self.push(Tensor::new(&shape, out).unwrap(), Op::ConcatLast(parts.to_vec()), parts)
    }

    /// Channels `start..end` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, end: usize) -> Var {
        let s = self.shape(x).to_vec();
        let c = *s.last().unwrap();
        assert!(start < end && end <= c, "slice {start}..{end} of {c}");
        let rows = self.value(x).len() / c;
        let xd = self.value(x).data();
        let wdt = end - start;
        let mut out = Vec::with_capacity(rows * wdt);
        for r in 0..rows {
            out.extend_from_slice(&xd[r * c + start..r * c + end]);
        }
        let mut shape = s;
        *shape.last_mut().unwrap() = wdt;
        self.push(Tensor::new(&shape, out).unwrap(), Op::SliceLast { x, start }, &[x])
    }

    /// Stack `[m, d]` on top of `[n, d]`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let (m, d) = self.value(a).rc().expect("concat_rows rank");
        let (n, d2) = self.value(b).rc().expect("concat_rows rank");
        assert_eq!(d, d2, "concat_rows width mismatch");
        let mut out = self.value(a).data().to_vec();
        out.extend_from_slice(self.value(b).data());
        self.push(Tensor::new(&[m + n, d], out).unwrap(), Op::ConcatRows(a, b), &[a, b])
    }

    /// Rows `idx` of a `[n, d]` matrix.
    pub fn index_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let (_, d) = self.value(x).rc().expect("index_rows rank");
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&xd[i * d..(i + 1) * d]);
        }
        let out = Tensor::new(&[idx.len(), d], out).unwrap();
        self.push(out, Op::IndexRows { x, idx: idx.to_vec() }, &[x])
    }

    /// `base` with `upd[r]` added into row `idx[r]`; other rows pass through.
    pub fn add_rows_at(&mut self, base: Var, upd: Var, idx: &[usize]) -> Var {
        let (_, d) = self.value(base).rc().expect("add_rows_at rank");
        let (m, d2) = self.value(upd).rc().expect("add_rows_at rank");
        assert!(d == d2 && m == idx.len(), "add_rows_at shape mismatch");
        let mut out = self.value(base).clone();
        let ud = self.value(upd).data();
        for (r, &i) in idx.iter().enumerate() {
            for (o, &u) in out.data_mut()[i * d..(i + 1) * d].iter_mut().zip(&ud[r * d..(r + 1) * d]) {
                *o += u;
            }
        }
        self.push(
            out,
            Op::AddRowsAt {
                base,
                upd,
                idx: idx.to_vec(),
            },
            &[base, upd],
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * sigmoid(v));
        self.push(out, Op::Silu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x), &[x])
    }

    /// Normalizes each of `groups` contiguous channel groups of the last axis
    /// to zero mean and unit variance over all positions. No affine part.
    pub fn group_norm(&mut self, x: Var, groups: usize) -> Var {
        let c = self.value(x).last_dim();
        assert!(groups > 0 && c % groups == 0, "{c} channels do not split into {groups} groups");
        let cg = c / groups;
        let mut out = self.value(x).clone();
        let data = out.data_mut();
        let count = (data.len() / c * cg) as f64;
        let mut inv_std = Vec::with_capacity(groups);
        for gi in 0..groups {
            let lanes = gi * cg..(gi + 1) * cg;
            let (mut sum, mut sq) = (0.0, 0.0);
            for row in data.chunks_exact(c) {
                for &v in &row[lanes.clone()] {
                    sum += v;
                    sq += v * v;
                }
            }
            let mean = sum / count;
            let var = (sq / count - mean * mean).max(0.0);
            let inv = 1.0 / (var + GN_EPS).sqrt();
            for row in data.chunks_exact_mut(c) {
                for v in &mut row[lanes.clone()] {
                    *v = (*v - mean) * inv;
                }
            }
            inv_std.push(inv);
        }
        self.push(out, Op::GroupNorm { x, groups, inv_std }, &[x])
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (_, n) = self.value(x).rc().expect("softmax rank");
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_exact_mut(n) {
            softmax_in_place(row);
        }
        self.push(out, Op::SoftmaxRows(x), &[x])
    }

    /// Row-wise `p ⊙ mask / Σ(p ⊙ mask)`. A row whose masked sum is zero
    /// comes out all zero.
    pub fn mask_renorm(&mut self, p: Var, mask: Tensor) -> Var {
        let (_, n) = self.value(p).rc().expect("mask_renorm rank");
        assert_eq!(self.value(p).shape(), mask.shape(), "mask shape mismatch");
        let mut out = self.value(p).clone();
        for (row, mrow) in out.data_mut().chunks_exact_mut(n).zip(mask.data().chunks_exact(n)) {
            let mut s = 0.0;
            for (o, &m) in row.iter_mut().zip(mrow) {
                *o *= m;
                s += *o;
            }
            if s > 0.0 {
                row.iter_mut().for_each(|o| *o /= s);
            }
        }
        self.push(out, Op::MaskRenorm { p, mask }, &[p])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).clone().reshaped(shape).expect("reshape size");
        self.push(out, Op::Reshape(x), &[x])
    }

    /// `x: [H, W, D]` → centered, filtered spectrum `[H, W, 2D]`: channels
    /// `0..D` hold real parts, `D..2D` imaginary parts. `filter` is the
    /// centered `H × W` coefficient map.
    pub fn spectral_forward(&mut self, x: Var, filter: &[f64]) -> Var {
        let (h, w, d) = self.value(x).hwc().expect("spectral rank");
        assert_eq!(filter.len(), h * w, "filter size mismatch");
        let xd = self.value(x).data();
        let mut out = vec![0.0; h * w * 2 * d];
        let mut plane = vec![Complex64::new(0.0, 0.0); h * w];
        for ch in 0..d {
            for (i, p) in plane.iter_mut().enumerate() {
                *p = Complex64::new(xd[i * d + ch], 0.0);
            }
            fft2_in_place(&mut plane, h, w, false);
            for u in 0..h {
                for v in 0..w {
                    let (su, sv) = fftshift_index(u, v, h, w);
                    let s = su * w + sv;
                    let z = plane[u * w + v] * filter[s];
                    out[s * 2 * d + ch] = z.re;
                    out[s * 2 * d + d + ch] = z.im;
                }
            }
        }
        let out = Tensor::new(&[h, w, 2 * d], out).unwrap();
        self.push(
            out,
            Op::SpectralForward {
                x,
                filter: filter.to_vec(),
            },
            &[x],
        )
    }

    /// Inverse of the centered layout used by [`Graph::spectral_forward`]:
    /// `[H, W, 2D]` → real part of the normalized inverse transform `[H, W, D]`.
    pub fn spectral_inverse(&mut self, z: Var) -> Var {
        let (h, w, d2) = self.value(z).hwc().expect("spectral rank");
        let d = d2 / 2;
        let zd = self.value(z).data();
        let mut out = vec![0.0; h * w * d];
        let mut plane = vec![Complex64::new(0.0, 0.0); h * w];
        let norm = 1.0 / (h * w) as f64;
        for ch in 0..d {
            for u in 0..h {
                for v in 0..w {
                    let (ou, ov) = ifftshift_index(u, v, h, w);
                    let s = u * w + v;
                    plane[ou * w + ov] = Complex64::new(zd[s * d2 + ch], zd[s * d2 + d + ch]);
                }
            }
            fft2_in_place(&mut plane, h, w, true);
            for (i, p) in plane.iter().enumerate() {
                out[i * d + ch] = p.re * norm;
            }
        }
        let out = Tensor::new(&[h, w, d], out).unwrap();
        self.push(out, Op::SpectralInverse(z), &[z])
    }

    /// Mean squared error against a fixed target; a `[1]` scalar.
    pub fn mse_const(&mut self, a: Var, target: &Tensor) -> Var {
        let va = self.value(a);
        assert_eq!(va.len(), target.len(), "mse size mismatch");
        let n = va.len().max(1) as f64;
        let s: f64 = va.data().iter().zip(target.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        self.push(
            Tensor::scalar(s / n),
            Op::MseConst {
                a,
                target: target.clone(),
            },
            &[a],
        )
    }

    /// Matrix product followed by a bias, applied to the last axis of any
    /// rank: `[..., Ci] × [Ci, Co] + [Co]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let shape = self.shape(x).to_vec();
        let ci = *shape.last().unwrap();
        let rows = self.value(x).len() / ci;
        let flat = if shape.len() == 2 { x } else { self.reshape(x, &[rows, ci]) };
        let mut y = self.matmul(flat, w);
        if let Some(b) = b {
            y = self.add_bias(y, b);
        }
        let co = self.value(w).shape()[1];
        if shape.len() == 2 {
            y
        } else {
            let mut out_shape = shape;
            *out_shape.last_mut().unwrap() = co;
            self.reshape(y, &out_shape)
        }
    }

    /// Reverse pass from a scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |ga| axpy(ga, gd, 1.0));
                self.acc(grads, *b, |gb| axpy(gb, gd, 1.0));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |ga| axpy(ga, gd, 1.0));
                self.acc(grads, *b, |gb| axpy(gb, gd, -1.0));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |ga| {
                    for ((o, &gv), &bv) in ga.iter_mut().zip(gd).zip(vb) {
                        *o += gv * bv;
                    }
                });
                self.acc(grads, *b, |gb| {
                    for ((o, &gv), &av) in gb.iter_mut().zip(gd).zip(va) {
                        *o += gv * av;
                    }
                });
            }
            Op::Scale(a, s) => self.acc(grads, *a, |ga| axpy(ga, gd, *s)),
            Op::MulConst(a, c) => self.acc(grads, *a, |ga| {
                for ((o, &gv), &cv) in ga.iter_mut().zip(gd).zip(c.data()) {
                    *o += gv * cv;
                }
            }),
            Op::AddBias(a, b) => {
                self.acc(grads, *a, |ga| axpy(ga, gd, 1.0));
                let c = self.value(*b).len();
                self.acc(grads, *b, |gb| {
                    for row in gd.chunks_exact(c) {
                        axpy(gb, row, 1.0);
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).rc().unwrap();
                let n = self.value(*b).shape()[1];
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |ga| {
                    for i in 0..m {
                        let grow = &gd[i * n..(i + 1) * n];
                        for p in 0..k {
                            ga[i * k + p] += dot(grow, &bd[p * n..(p + 1) * n]);
                        }
                    }
                });
                self.acc(grads, *b, |gb| {
                    for i in 0..m {
                        let grow = &gd[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = ad[i * k + p];
                            if av != 0.0 {
                                axpy(&mut gb[p * n..(p + 1) * n], grow, av);
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (m, n) = self.value(*a).rc().unwrap();
                self.acc(grads, *a, |ga| {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += gd[j * m + i];
                        }
                    }
                });
            }
            Op::Conv2d { x, w, stride, pad } => self.conv2d_backward(*x, *w, *stride, *pad, g, grads),
            Op::Upsample(x) => {
                let (h, w, c) = self.value(*x).hwc().unwrap();
                let (oh, ow, _) = g.hwc().unwrap();
                self.acc(grads, *x, |gx| {
                    for y in 0..oh {
                        let sy = y * h / oh;
                        for xx in 0..ow {
                            let sx = xx * w / ow;
                            axpy(
                                &mut gx[(sy * w + sx) * c..(sy * w + sx + 1) * c],
                                &gd[(y * ow + xx) * c..(y * ow + xx + 1) * c],
                                1.0,
                            );
                        }
                    }
                });
            }
            Op::ConcatLast(parts) => {
                let total = g.last_dim();
                let rows = g.len() / total;
                let mut off = 0;
                for &p in parts {
                    let wp = self.value(p).last_dim();
                    self.acc(grads, p, |gp| {
                        for r in 0..rows {
                            axpy(
                                &mut gp[r * wp..(r + 1) * wp],
                                &gd[r * total + off..r * total + off + wp],
                                1.0,
                            );
                        }
                    });
                    off += wp;
                }
            }
            Op::SliceLast { x, start } => {
                let c = self.value(*x).last_dim();
                let wdt = g.last_dim();
                let rows = g.len() / wdt;
                self.acc(grads, *x, |gx| {
                    for r in 0..rows {
                        axpy(
                            &mut gx[r * c + start..r * c + start + wdt],
                            &gd[r * wdt..(r + 1) * wdt],
                            1.0,
                        );
                    }
                });
            }
            Op::ConcatRows(a, b) => {
                let la = self.value(*a).len();
                self.acc(grads, *a, |ga| axpy(ga, &gd[..la], 1.0));
                self.acc(grads, *b, |gb| axpy(gb, &gd[la..], 1.0));
            }
            Op::IndexRows { x, idx } => {
                let d = g.last_dim();
                self.acc(grads, *x, |gx| {
                    for (r, &i) in idx.iter().enumerate() {
                        axpy(&mut gx[i * d..(i + 1) * d], &gd[r * d..(r + 1) * d], 1.0);
                    }
                });
            }
            Op::AddRowsAt { base, upd, idx } => {
                let d = g.last_dim();
                self.acc(grads, *base, |gb| axpy(gb, gd, 1.0));
                self.acc(grads, *upd, |gu| {
                    for (r, &i) in idx.iter().enumerate() {
                        axpy(&mut gu[r * d..(r + 1) * d], &gd[i * d..(i + 1) * d], 1.0);
                    }
                });
            }
            Op::Relu(x) => {
                let xd = self.value(*x).data();
                self.acc(grads, *x, |gx| {
                    for ((o, &gv), &xv) in gx.iter_mut().zip(gd).zip(xd) {
                        if xv > 0.0 {
                            *o += gv;
                        }
                    }
                });
            }
            Op::Silu(x) => {
                let xd = self.value(*x).data();
                self.acc(grads, *x, |gx| {
                    for ((o, &gv), &xv) in gx.iter_mut().zip(gd).zip(xd) {
                        let s = sigmoid(xv);
                        *o += gv * s * (1.0 + xv * (1.0 - s));
                    }
                });
            }
            Op::Sigmoid(x) => {
                let yd = node.value.data();
                self.acc(grads, *x, |gx| {
                    for ((o, &gv), &y) in gx.iter_mut().zip(gd).zip(yd) {
                        *o += gv * y * (1.0 - y);
                    }
                });
            }
            Op::GroupNorm { x, groups, inv_std } => {
                let c = g.last_dim();
                let cg = c / groups;
                let yd = node.value.data();
                let count = (gd.len() / c * cg) as f64;
                self.acc(grads, *x, |gx| {
                    for (gi, &inv) in inv_std.iter().enumerate() {
                        let lanes = gi * cg..(gi + 1) * cg;
                        let (mut sg, mut sgy) = (0.0, 0.0);
                        for (grow, yrow) in gd.chunks_exact(c).zip(yd.chunks_exact(c)) {
                            for (&gv, &yv) in grow[lanes.clone()].iter().zip(&yrow[lanes.clone()]) {
                                sg += gv;
                                sgy += gv * yv;
                            }
                        }
                        let (mg, mgy) = (sg / count, sgy / count);
                        for ((orow, grow), yrow) in gx.chunks_exact_mut(c).zip(gd.chunks_exact(c)).zip(yd.chunks_exact(c)) {
                            for ((o, &gv), &yv) in orow[lanes.clone()].iter_mut().zip(&grow[lanes.clone()]).zip(&yrow[lanes.clone()]) {
                                *o += inv * (gv - mg - yv * mgy);
                            }
                        }
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let n = g.last_dim();
                let yd = node.value.data();
                self.acc(grads, *x, |gx| {
                    for ((grow, yrow), orow) in gd.chunks_exact(n).zip(yd.chunks_exact(n)).zip(gx.chunks_exact_mut(n)) {
                        let inner = dot(grow, yrow);
                        for ((o, &gv), &yv) in orow.iter_mut().zip(grow).zip(yrow) {
                            *o += yv * (gv - inner);
                        }
                    }
                });
            }
            Op::MaskRenorm { p, mask } => {
                let n = g.last_dim();
                let pd = self.value(*p).data();
                let yd = node.value.data();
                self.acc(grads, *p, |gp| {
                    for r in 0..gd.len() / n {
                        let range = r * n..(r + 1) * n;
                        let (grow, yrow, prow, mrow) =
                            (&gd[range.clone()], &yd[range.clone()], &pd[range.clone()], &mask.data()[range.clone()]);
                        let s: f64 = prow.iter().zip(mrow).map(|(a, b)| a * b).sum();
                        if s <= 0.0 {
                            continue;
                        }
                        let inner = dot(grow, yrow);
                        for ((o, &gv), &mv) in gp[range].iter_mut().zip(grow).zip(mrow) {
                            *o += mv / s * (gv - inner);
                        }
                    }
                });
            }
            Op::Reshape(x) => self.acc(grads, *x, |gx| axpy(gx, gd, 1.0)),
            Op::SpectralForward { x, filter } => {
                let (h, w, d) = self.value(*x).hwc().unwrap();
                let mut plane = vec![Complex64::new(0.0, 0.0); h * w];
                self.acc(grads, *x, |gx| {
                    for ch in 0..d {
                        for u in 0..h {
                            for v in 0..w {
                                let (su, sv) = fftshift_index(u, v, h, w);
                                let s = su * w + sv;
                                plane[u * w + v] =
                                    Complex64::new(gd[s * 2 * d + ch], gd[s * 2 * d + d + ch]) * filter[s];
                            }
                        }
                        // Adjoint of the unnormalized forward DFT.
                        fft2_in_place(&mut plane, h, w, true);
                        for (i, p) in plane.iter().enumerate() {
                            gx[i * d + ch] += p.re;
                        }
                    }
                });
            }
            Op::SpectralInverse(z) => {
                let (h, w, d2) = self.value(*z).hwc().unwrap();
                let d = d2 / 2;
                let norm = 1.0 / (h * w) as f64;
                let mut plane = vec![Complex64::new(0.0, 0.0); h * w];
                self.acc(grads, *z, |gz| {
                    for ch in 0..d {
                        for (i, p) in plane.iter_mut().enumerate() {
                            *p = Complex64::new(gd[i * d + ch], 0.0);
                        }
                        fft2_in_place(&mut plane, h, w, false);
                        for u in 0..h {
                            for v in 0..w {
                                let (su, sv) = fftshift_index(u, v, h, w);
                                let s = su * w + sv;
                                let p = plane[u * w + v] * norm;
                                gz[s * d2 + ch] += p.re;
                                gz[s * d2 + d + ch] += p.im;
                            }
                        }
                    }
                });
            }
            Op::MseConst { a, target } => {
                let va = self.value(*a).data();
                let k = 2.0 * gd[0] / va.len().max(1) as f64;
                self.acc(grads, *a, |ga| {
                    for ((o, &x), &t) in ga.iter_mut().zip(va).zip(target.data()) {
                        *o += k * (x - t);
                    }
                });
            }
        }
    }

    fn conv2d_backward(&self, x: Var, w: Var, stride: usize, pad: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let (h, wd, ci) = self.value(x).hwc().unwrap();
        let ws = self.value(w).shape();
        let (k, co) = (ws[0], ws[3]);
        let (oh, ow, _) = g.hwc().unwrap();
        let (xd, wdat, gd) = (self.value(x).data(), self.value(w).data(), g.data());
        let taps = |oy: usize, ox: usize, ky: usize, kx: usize| -> Option<usize> {
            let iy = (oy * stride + ky) as isize - pad as isize;
            let ix = (ox * stride + kx) as isize - pad as isize;
            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                None
            } else {
                Some(iy as usize * wd + ix as usize)
            }
        };
        self.acc(grads, x, |gx| {
            for oy in 0..oh {
                for ox in 0..ow {
                    let grow = &gd[(oy * ow + ox) * co..(oy * ow + ox + 1) * co];
                    for ky in 0..k {
                        for kx in 0..k {
                            let Some(pix) = taps(oy, ox, ky, kx) else { continue };
                            let wbase = (ky * k + kx) * ci * co;
                            let gxr = &mut gx[pix * ci..(pix + 1) * ci];
                            for (c, o) in gxr.iter_mut().enumerate() {
                                *o += dot(grow, &wdat[wbase + c * co..wbase + (c + 1) * co]);
                            }
                        }
                    }
                }
            }
        });
        self.acc(grads, w, |gw| {
            for oy in 0..oh {
                for ox in 0..ow {
                    let grow = &gd[(oy * ow + ox) * co..(oy * ow + ox + 1) * co];
                    for ky in 0..k {
                        for kx in 0..k {
                            let Some(pix) = taps(oy, ox, ky, kx) else { continue };
                            let wbase = (ky * k + kx) * ci * co;
                            for (c, &xv) in xd[pix * ci..(pix + 1) * ci].iter().enumerate() {
                                if xv != 0.0 {
                                    axpy(&mut gw[wbase + c * co..wbase + (c + 1) * co], grow, xv);
                                }
                            }
                        }
                    }
                }
            }
        });
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.wants(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.value(v).shape()));
        }
        f(slot.as_mut().unwrap().data_mut());
    }
}

#[inline]
fn axpy(dst: &mut [f64], src: &[f64], a: f64) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        // All -inf: leave a uniform row rather than NaNs.
        let u = 1.0 / row.len() as f64;
        row.iter_mut().for_each(|v| *v = u);
        return;
    }
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Central-difference check of d(loss)/d(input) for a graph builder.
    fn check(shape: &[usize], build: impl Fn(&mut Graph, Var) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x0 = rand_tensor(&mut rng, shape);
        let mut g = Graph::new();
        let x = g.leaf(x0.clone());
        let y = build(&mut g, x);
        let probe = rand_tensor(&mut rng, g.shape(y));
        let loss = {
            let p = g.constant(probe.clone());
            let m = g.mul(y, p);
            let n = g.value(m).len();
            let flat = g.reshape(m, &[1, n]);
            let ones = g.constant(Tensor::full(&[n, 1], 1.0));
            g.matmul(flat, ones)
        };
        let grads = g.backward(loss);
        let analytic = grads.get(x).cloned().unwrap_or_else(|| Tensor::zeros(shape));
        let eval = |xv: &Tensor| {
            let mut g = Graph::new();
            let x = g.constant(xv.clone());
            let y = build(&mut g, x);
            g.value(y).data().iter().zip(probe.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let h = 1e-6;
        for i in 0..x0.len() {
            let mut xp = x0.clone();
            xp.data_mut()[i] += h;
            let mut xm = x0.clone();
            xm.data_mut()[i] -= h;
            let fd = (eval(&xp) - eval(&xm)) / (2.0 * h);
            let a = analytic.data()[i];
            let err = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-6);
            assert!(err < 1e-6, "entry {i}: analytic {a} vs fd {fd}");
        }
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = rand_tensor(&mut rng, &[3, 3, 2, 3]);
        check(&[5, 4, 2], |g, x| {
            let wv = g.constant(w.clone());
            g.conv2d(x, wv, 2, 1)
        });
        let x = rand_tensor(&mut rng, &[4, 5, 2]);
        check(&[3, 3, 2, 3], |g, wv| {
            let xv = g.constant(x.clone());
            g.conv2d(xv, wv, 1, 1)
        });
    }

    #[test]
    fn attention_style_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mask = Tensor::from_fn(&[3, 4], |_| rng.random_range(0.1..1.0));
        check(&[3, 4], |g, x| {
            let p = g.softmax_rows(x);
            g.mask_renorm(p, mask.clone())
        });
        check(&[4, 3], |g, x| {
            let t = g.transpose(x);
            g.matmul(t, x)
        });
        check(&[5, 2], |g, x| {
            let r = g.index_rows(x, &[4, 1, 1]);
            let s = g.silu(r);
            g.add_rows_at(x, s, &[0, 2, 3])
        });
    }

    #[test]
    fn group_norm_gradients() {
        check(&[3, 2, 4], |g, x| g.group_norm(x, 2));
        check(&[5, 3], |g, x| {
            let y = g.group_norm(x, 1);
            g.silu(y)
        });
    }

    #[test]
    fn group_norm_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = Graph::new();
        let x = g.constant(rand_tensor(&mut rng, &[4, 3, 6]).map(|v| 5.0 * v + 2.0));
        let y = g.group_norm(x, 3);
        let d = g.value(y).data();
        for gi in 0..3 {
            let v: Vec<f64> = d.chunks_exact(6).flat_map(|r| r[2 * gi..2 * gi + 2].to_vec()).collect();
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
            assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn spectral_gradients() {
        let filter: Vec<f64> = (0..12).map(|i| 0.2 + 0.05 * i as f64).collect();
        check(&[3, 4, 2], |g, x| g.spectral_forward(x, &filter));
        check(&[3, 4, 2], |g, x| g.spectral_inverse(x));
    }

    #[test]
    fn shape_op_gradients() {
        check(&[2, 3, 3], |g, x| {
            let a = g.slice_last(x, 1, 3);
            let b = g.upsample(a, 3, 5);
            let c = g.upsample(x, 3, 5);
            g.concat_last(&[b, c])
        });
        check(&[2, 3], |g, x| {
            let y = g.concat_rows(x, x);
            let r = g.relu(y);
            g.scale(r, 1.5)
        });
    }

    #[test]
    fn softmax_of_all_negative_infinity_is_uniform() {
        let mut row = [f64::NEG_INFINITY; 4];
        softmax_in_place(&mut row);
        assert!(row.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }
}
