//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value. `backward`
//! walks the tape in reverse and only visits nodes that depend on a
//! gradient-carrying leaf.

use super::kernels::{col2im, gemm, im2col, Patch};
use super::tensor::Tensor;

const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv1dGeom {
    pub stride: usize,
    pub pad: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Abs(Var),
    Square(Var),
    Sqrt(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Mean(Var),
    Reshape(Var),
    /// Mean over one axis: `[outer, len, inner] -> [outer, inner]`.
    MeanAxis {
        x: Var,
        len: usize,
        inner: usize,
    },
    /// New axis of size `len`: `[outer, inner] -> [outer, len, inner]`.
    Broadcast {
        x: Var,
        len: usize,
        inner: usize,
    },
    /// `[N, A, B] -> [N, B, A]`
    Transpose12(Var),
    /// Concatenation along axis 1 of `[N, C_i, L]` tensors.
    Concat1(Vec<Var>),
    /// `[N, C, L] -> [N, C, L - 1]`, `out[t] = x[t + 1] - x[t]`.
    TimeDiff(Var),
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        geom: Conv1dGeom,
    },
    ConvTranspose1d {
        x: Var,
        w: Var,
        b: Var,
        geom: Conv1dGeom,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: Conv2dGeom,
    },
    ChannelNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    inputs: Vec<Var>,
    needs_grad: bool,
}

/// Gradient slots plus the nodes that may receive a gradient.
struct Sink {
    grads: Vec<Option<Tensor>>,
    live: Vec<bool>,
}

impl Sink {
    fn wants(&self, v: Var) -> bool {
        self.live[v.0]
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients indexed by [`Var`]; `None` where nothing flowed.
pub struct Grads(Vec<Option<Tensor>>);

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.0.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.0.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            inputs: inputs.to_vec(),
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is collected.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            inputs: Vec::new(),
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that stops gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            inputs: Vec::new(),
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let src = &self.nodes[x.0].value;
        let data = src.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::from_vec(src.shape(), data);
        self.push(value, op, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::from_vec(va.shape(), data);
        self.push(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "sub shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let value = Tensor::from_vec(va.shape(), data);
        self.push(value, Op::Sub(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        self.unary(x, |v| v * k, Op::Scale(x, k))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, Op::Abs(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, f64::sqrt, Op::Sqrt(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(x, |v| if v > 0.0 { v } else { slope * v }, Op::LeakyRelu(x, slope))
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(&mut self, x: Var) -> Var {
        let src = &self.nodes[x.0].value;
        let m = src.data().iter().sum::<f64>() / src.len() as f64;
        self.push(Tensor::scalar(m), Op::Mean(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self.nodes[x.0].value.clone().reshaped(shape);
        self.push(value, Op::Reshape(x), &[x])
    }

    /// Averages out `axis`.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Var {
        let shape = self.shape(x).to_vec();
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.nodes[x.0].value.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let row = &src[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let k = 1.0 / len as f64;
        out.iter_mut().for_each(|v| *v *= k);
        let mut new_shape = shape.clone();
        new_shape.remove(axis);
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        let value = Tensor::from_vec(&new_shape, out);
        self.push(value, Op::MeanAxis { x, len, inner }, &[x])
    }

    /// Inserts a new axis of size `len` at position `axis`.
    pub fn broadcast(&mut self, x: Var, axis: usize, len: usize) -> Var {
        let shape = self.shape(x).to_vec();
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis..].iter().product();
        let src = self.nodes[x.0].value.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            for _ in 0..len {
                out.extend_from_slice(&src[o * inner..(o + 1) * inner]);
            }
        }
        let mut new_shape = shape.clone();
        new_shape.insert(axis, len);
        let value = Tensor::from_vec(&new_shape, out);
        self.push(value, Op::Broadcast { x, len, inner }, &[x])
    }

    pub fn transpose12(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        assert_eq!(shape.len(), 3, "transpose12 expects rank 3");
        let (n, a, b) = (shape[0], shape[1], shape[2]);
        let src = self.nodes[x.0].value.data();
        let mut out = vec![0.0; n * a * b];
        for i in 0..n {
            for r in 0..a {
                for c in 0..b {
                    out[(i * b + c) * a + r] = src[(i * a + r) * b + c];
                }
            }
        }
        let value = Tensor::from_vec(&[n, b, a], out);
        self.push(value, Op::Transpose12(x), &[x])
    }

    pub fn concat1(&mut self, parts: &[Var]) -> Var {
        let first = self.shape(parts[0]).to_vec();
        assert_eq!(first.len(), 3, "concat1 expects rank 3");
        let (n, l) = (first[0], first[2]);
        let mut channels = 0;
        for &p in parts {
            let s = self.shape(p);
            assert!(s[0] == n && s[2] == l, "concat1 shape mismatch: {s:?} vs {first:?}");
            channels += s[1];
        }
        let mut out = Vec::with_capacity(n * channels * l);
        for i in 0..n {
            for &p in parts {
                let v = &self.nodes[p.0].value;
                let c = v.shape()[1];
                out.extend_from_slice(&v.data()[i * c * l..(i + 1) * c * l]);
            }
        }
        let value = Tensor::from_vec(&[n, channels, l], out);
        self.push(value, Op::Concat1(parts.to_vec()), parts)
    }

    pub fn time_diff(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let (n, c, l) = (shape[0], shape[1], shape[2]);
        assert!(l >= 2, "time_diff needs at least two steps");
        let src = self.nodes[x.0].value.data();
        let mut out = Vec::with_capacity(n * c * (l - 1));
        for row in src.chunks_exact(l) {
            out.extend(row.windows(2).map(|w| w[1] - w[0]));
        }
        let value = Tensor::from_vec(&[n, c, l - 1], out);
        self.push(value, Op::TimeDiff(x), &[x])
    }

    /// Unit L2 norm along the last axis.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let src = &self.nodes[x.0].value;
        let f = *src.shape().last().unwrap();
        let mut norms = Vec::with_capacity(src.len() / f);
        let mut out = Vec::with_capacity(src.len());
        for row in src.data().chunks_exact(f) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            norms.push(norm);
            out.extend(row.iter().map(|v| v / norm));
        }
        let value = Tensor::from_vec(src.shape(), out);
        self.push(value, Op::L2Normalize { x, norms }, &[x])
    }

    /// `x [N, F] -> [N, O]` with `w [O, F]`, `b [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (vx, vw, vb) = (&self.nodes[x.0].value, &self.nodes[w.0].value, &self.nodes[b.0].value);
        let (n, f) = (vx.shape()[0], vx.shape()[1]);
        let o = vw.shape()[0];
        assert_eq!(vw.shape()[1], f, "linear input width mismatch");
        let mut out: Vec<f64> = (0..n).flat_map(|_| vb.data().iter().copied()).collect();
        gemm(n, f, o, vx.data(), false, vw.data(), true, 1.0, &mut out);
        let value = Tensor::from_vec(&[n, o], out);
        self.push(value, Op::Linear { x, w, b }, &[x, w, b])
    }

    /// `x [N, Ci, L]`, `w [Co, Ci, K]`, `b [Co]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, geom: Conv1dGeom) -> Var {
        let (vx, vw, vb) = (&self.nodes[x.0].value, &self.nodes[w.0].value, &self.nodes[b.0].value);
        let [n, ci, l] = dims3(vx.shape());
        let [co, wci, k] = dims3(vw.shape());
        assert_eq!(ci, wci, "conv1d channel mismatch");
        assert!(l + 2 * geom.pad >= k, "conv1d input shorter than kernel");
        let p = patch1d(ci, l, k, geom);
        let out = conv_forward(vx.data(), n, vw.data(), co, vb.data(), &p);
        let value = Tensor::from_vec(&[n, co, p.wo], out);
        self.push(value, Op::Conv1d { x, w, b, geom }, &[x, w, b])
    }

    /// `x [N, Ci, L]`, `w [Ci, Co, K]`, `b [Co]`; output length
    /// `(L - 1) * stride - 2 * pad + K`.
    pub fn conv_transpose1d(&mut self, x: Var, w: Var, b: Var, geom: Conv1dGeom) -> Var {
        let (vx, vw, vb) = (&self.nodes[x.0].value, &self.nodes[w.0].value, &self.nodes[b.0].value);
        let [n, ci, l] = dims3(vx.shape());
        let [wci, co, k] = dims3(vw.shape());
        assert_eq!(ci, wci, "conv_transpose1d channel mismatch");
        let lo = (l - 1) * geom.stride + k - 2 * geom.pad;
        // the adjoint of a conv1d from length `lo` to length `l`
        let p = transpose_patch(co, lo, k, geom, l);
        let mut cols = vec![0.0; p.rows() * p.cols()];
        let mut out = vec![0.0; n * co * lo];
        for i in 0..n {
            gemm(
                co * k,
                ci,
                l,
                vw.data(),
                true,
                &vx.data()[i * ci * l..(i + 1) * ci * l],
                false,
                0.0,
                &mut cols,
            );
            let o = &mut out[i * co * lo..(i + 1) * co * lo];
            for (row, &bias) in o.chunks_exact_mut(lo).zip(vb.data()) {
                row.fill(bias);
            }
            col2im(&cols, &p, o);
        }
        let value = Tensor::from_vec(&[n, co, lo], out);
        self.push(value, Op::ConvTranspose1d { x, w, b, geom }, &[x, w, b])
    }

    /// `x [N, Ci, H, W]`, `w [Co, Ci, KH, KW]`, `b [Co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, geom: Conv2dGeom) -> Var {
        let (vx, vw, vb) = (&self.nodes[x.0].value, &self.nodes[w.0].value, &self.nodes[b.0].value);
        let [n, ci, h, wd] = dims4(vx.shape());
        let [co, wci, kh, kw] = dims4(vw.shape());
        assert_eq!(ci, wci, "conv2d channel mismatch");
        let p = patch2d(ci, h, wd, kh, kw, geom);
        let out = conv_forward(vx.data(), n, vw.data(), co, vb.data(), &p);
        let value = Tensor::from_vec(&[n, co, p.ho, p.wo], out);
        self.push(value, Op::Conv2d { x, w, b, geom }, &[x, w, b])
    }

    /// Normalizes across channels (axis 1) at every other position, then
    /// applies a per-channel affine map.
    pub fn channel_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (vx, vg, vb) = (
            &self.nodes[x.0].value,
            &self.nodes[gamma.0].value,
            &self.nodes[beta.0].value,
        );
        let shape = vx.shape().to_vec();
        let (n, c) = (shape[0], shape[1]);
        let s: usize = shape[2..].iter().product();
        let xd = vx.data();
        let mut xhat = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; n * s];
        let mut out = vec![0.0; xd.len()];
        let mut mean = vec![0.0; s];
        for i in 0..n {
            let block = &xd[i * c * s..(i + 1) * c * s];
            mean.fill(0.0);
            for plane in block.chunks_exact(s) {
                axpy(&mut mean, 1.0 / c as f64, plane);
            }
            let inv = &mut inv_std[i * s..(i + 1) * s];
            inv.fill(0.0);
            for plane in block.chunks_exact(s) {
                for ((v, &xv), &m) in inv.iter_mut().zip(plane).zip(&mean) {
                    *v += (xv - m) * (xv - m) / c as f64;
                }
            }
            for v in inv.iter_mut() {
                *v = 1.0 / (*v + NORM_EPS).sqrt();
            }
            let hb = &mut xhat[i * c * s..(i + 1) * c * s];
            let ob = &mut out[i * c * s..(i + 1) * c * s];
            for ch in 0..c {
                let (gv, bv) = (vg.data()[ch], vb.data()[ch]);
                let range = ch * s..(ch + 1) * s;
                for (((h, o), &xv), (&m, &iv)) in hb[range.clone()]
                    .iter_mut()
                    .zip(&mut ob[range.clone()])
                    .zip(&block[range])
                    .zip(mean.iter().zip(inv.iter()))
                {
                    *h = (xv - m) * iv;
                    *o = gv * *h + bv;
                }
            }
        }
        let value = Tensor::from_vec(&shape, out);
        self.push(
            value,
            Op::ChannelNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    /// Gradients of the scalar `root` with respect to every node.
    pub fn backward(&self, root: Var) -> Grads {
        let live = self.nodes[..=root.0].iter().map(|n| n.needs_grad).collect();
        self.run_backward(root, live)
    }

    /// Like [`Tape::backward`], but only gradients flowing into `leaves`
    /// are computed; nodes that do not depend on them are skipped.
    pub fn backward_wrt(&self, root: Var, leaves: &[Var]) -> Grads {
        let mut live = vec![false; root.0 + 1];
        for l in leaves {
            if l.0 <= root.0 && self.nodes[l.0].needs_grad {
                live[l.0] = true;
            }
        }
        for idx in 0..=root.0 {
            if !live[idx] && self.nodes[idx].inputs.iter().any(|i| live[i.0]) {
                live[idx] = true;
            }
        }
        self.run_backward(root, live)
    }

    fn run_backward(&self, root: Var, live: Vec<bool>) -> Grads {
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward from non-scalar");
        let mut sink = Sink {
            grads: (0..=root.0).map(|_| None).collect(),
            live,
        };
        if sink.live[root.0] {
            sink.grads[root.0] = Some(Tensor::filled(self.nodes[root.0].value.shape(), 1.0));
        }
        for idx in (0..=root.0).rev() {
            if !sink.live[idx] {
                continue;
            }
            let node = &self.nodes[idx];
            let Some(g) = sink.grads[idx].take() else { continue };
            self.propagate(node, &g, &mut sink);
            sink.grads[idx] = Some(g);
        }
        Grads(sink.grads)
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut Sink) {
        let val = |v: Var| &self.nodes[v.0].value;
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, || g.clone());
                self.acc(grads, *b, || g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, || g.clone());
                self.acc(grads, *b, || map(g, |v| -v));
            }
            Op::Scale(x, k) => self.acc(grads, *x, || map(g, |v| v * k)),
            Op::AddScalar(x) | Op::Reshape(x) => {
                let shape = val(*x).shape().to_vec();
                self.acc(grads, *x, || g.clone().reshaped(&shape))
            }
            Op::Abs(x) => self.acc(grads, *x, || {
                zip_map(g, val(*x), |gv, xv| {
                    if xv > 0.0 {
                        gv
                    } else if xv < 0.0 {
                        -gv
                    } else {
                        0.0
                    }
                })
            }),
            Op::Square(x) => self.acc(grads, *x, || zip_map(g, val(*x), |gv, xv| 2.0 * xv * gv)),
            Op::Sqrt(x) => self.acc(grads, *x, || {
                zip_map(g, &node.value, |gv, yv| if yv > 0.0 { gv * 0.5 / yv } else { 0.0 })
            }),
            Op::Relu(x) => self.acc(grads, *x, || {
                zip_map(g, val(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 })
            }),
            Op::LeakyRelu(x, slope) => self.acc(grads, *x, || {
                zip_map(g, val(*x), |gv, xv| if xv > 0.0 { gv } else { slope * gv })
            }),
            Op::Mean(x) => {
                let vx = val(*x);
                let k = gd[0] / vx.len() as f64;
                self.acc(grads, *x, || Tensor::filled(vx.shape(), k));
            }
            Op::MeanAxis { x, len, inner } => self.acc(grads, *x, || {
                let vx = val(*x);
                let outer = gd.len() / inner;
                let k = 1.0 / *len as f64;
                let mut out = Vec::with_capacity(vx.len());
                for o in 0..outer {
                    for _ in 0..*len {
                        out.extend(gd[o * inner..(o + 1) * inner].iter().map(|v| v * k));
                    }
                }
                Tensor::from_vec(vx.shape(), out)
            }),
            Op::Broadcast { x, len, inner } => self.acc(grads, *x, || {
                let vx = val(*x);
                let outer = vx.len() / inner;
                let mut out = vec![0.0; vx.len()];
                for o in 0..outer {
                    for l in 0..*len {
                        let src = &gd[(o * len + l) * inner..(o * len + l + 1) * inner];
                        for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                            *acc += v;
                        }
                    }
                }
                Tensor::from_vec(vx.shape(), out)
            }),
            Op::Transpose12(x) => self.acc(grads, *x, || {
                let [n, a, b] = dims3(val(*x).shape());
                let mut out = vec![0.0; n * a * b];
                for i in 0..n {
                    for r in 0..a {
                        for c in 0..b {
                            out[(i * a + r) * b + c] = gd[(i * b + c) * a + r];
                        }
                    }
                }
                Tensor::from_vec(&[n, a, b], out)
            }),
            Op::Concat1(parts) => {
                let [n, total, l] = dims3(node.value.shape());
                let mut offset = 0;
                for &p in parts {
                    let c = val(p).shape()[1];
                    self.acc(grads, p, || {
                        let mut out = Vec::with_capacity(n * c * l);
                        for i in 0..n {
                            let start = (i * total + offset) * l;
                            out.extend_from_slice(&gd[start..start + c * l]);
                        }
                        Tensor::from_vec(&[n, c, l], out)
                    });
                    offset += c;
                }
            }
            Op::TimeDiff(x) => self.acc(grads, *x, || {
                let [n, c, l] = dims3(val(*x).shape());
                let mut out = vec![0.0; n * c * l];
                for (row, grow) in out.chunks_exact_mut(l).zip(gd.chunks_exact(l - 1)) {
                    for (t, gv) in grow.iter().enumerate() {
                        row[t + 1] += gv;
                        row[t] -= gv;
                    }
                }
                Tensor::from_vec(&[n, c, l], out)
            }),
            Op::L2Normalize { x, norms } => self.acc(grads, *x, || {
                let f = *node.value.shape().last().unwrap();
                let y = node.value.data();
                let mut out = Vec::with_capacity(y.len());
                for (r, norm) in norms.iter().enumerate() {
                    let yr = &y[r * f..(r + 1) * f];
                    let gr = &gd[r * f..(r + 1) * f];
                    let proj = dot(yr, gr);
                    out.extend(yr.iter().zip(gr).map(|(yv, gv)| (gv - yv * proj) / norm));
                }
                Tensor::from_vec(node.value.shape(), out)
            }),
            Op::Linear { x, w, b } => {
                let (vx, vw) = (val(*x), val(*w));
                let (n, f) = (vx.shape()[0], vx.shape()[1]);
                let o = vw.shape()[0];
                self.acc(grads, *x, || {
                    let mut out = vec![0.0; n * f];
                    gemm(n, o, f, gd, false, vw.data(), false, 0.0, &mut out);
                    Tensor::from_vec(&[n, f], out)
                });
                self.acc(grads, *w, || {
                    let mut out = vec![0.0; o * f];
                    gemm(o, n, f, gd, true, vx.data(), false, 0.0, &mut out);
                    Tensor::from_vec(&[o, f], out)
                });
                self.acc(grads, *b, || {
                    let mut out = vec![0.0; o];
                    for row in gd.chunks_exact(o) {
                        axpy(&mut out, 1.0, row);
                    }
                    Tensor::from_vec(&[o], out)
                });
            }
            Op::Conv1d { x, w, b, geom } => self.conv1d_backward(grads, g, *x, *w, *b, *geom),
            Op::ConvTranspose1d { x, w, b, geom } => self.conv_transpose1d_backward(grads, g, *x, *w, *b, *geom),
            Op::Conv2d { x, w, b, geom } => self.conv2d_backward(grads, g, *x, *w, *b, *geom),
            Op::ChannelNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let shape = node.value.shape();
                let (n, c) = (shape[0], shape[1]);
                let s: usize = shape[2..].iter().product();
                let vg = val(*gamma).data();
                self.acc(grads, *x, || {
                    let mut out = vec![0.0; gd.len()];
                    let (mut sum_d, mut sum_dx) = (vec![0.0; s], vec![0.0; s]);
                    for i in 0..n {
                        let range = i * c * s..(i + 1) * c * s;
                        let (gb, hb) = (&gd[range.clone()], &xhat[range.clone()]);
                        sum_d.fill(0.0);
                        sum_dx.fill(0.0);
                        for ch in 0..c {
                            let (gp, hp) = (&gb[ch * s..(ch + 1) * s], &hb[ch * s..(ch + 1) * s]);
                            for p in 0..s {
                                let d = gp[p] * vg[ch];
                                sum_d[p] += d;
                                sum_dx[p] += d * hp[p];
                            }
                        }
                        let inv = &inv_std[i * s..(i + 1) * s];
                        let ob = &mut out[range];
                        for ch in 0..c {
                            for p in 0..s {
                                let k = ch * s + p;
                                let d = gb[k] * vg[ch];
                                ob[k] = inv[p] * (d - sum_d[p] / c as f64 - hb[k] * sum_dx[p] / c as f64);
                            }
                        }
                    }
                    Tensor::from_vec(shape, out)
                });
                self.acc(grads, *gamma, || {
                    let mut out = vec![0.0; c];
                    for (k, (gp, hp)) in gd.chunks_exact(s).zip(xhat.chunks_exact(s)).enumerate() {
                        out[k % c] += dot(gp, hp);
                    }
                    Tensor::from_vec(&[c], out)
                });
                self.acc(grads, *beta, || {
                    let mut out = vec![0.0; c];
                    for (k, gp) in gd.chunks_exact(s).enumerate() {
                        out[k % c] += gp.iter().sum::<f64>();
                    }
                    Tensor::from_vec(&[c], out)
                });
            }
        }
    }

    fn acc(&self, grads: &mut Sink, v: Var, f: impl FnOnce() -> Tensor) {
        if !grads.wants(v) {
            return;
        }
        let contribution = f();
        match &mut grads.grads[v.0] {
            Some(existing) => existing.add_assign(&contribution),
            slot => *slot = Some(contribution),
        }
    }

    fn bias_grad(&self, grads: &mut Sink, b: Var, g: &Tensor) {
        self.acc(grads, b, || {
            let shape = g.shape();
            let (n, co) = (shape[0], shape[1]);
            let s: usize = shape[2..].iter().product();
            let mut out = vec![0.0; co];
            for i in 0..n {
                for (o, slot) in out.iter_mut().enumerate() {
                    *slot += g.data()[(i * co + o) * s..(i * co + o + 1) * s].iter().sum::<f64>();
                }
            }
            Tensor::from_vec(&[co], out)
        });
    }

    fn conv1d_backward(&self, grads: &mut Sink, g: &Tensor, x: Var, w: Var, b: Var, geom: Conv1dGeom) {
        let (vx, vw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        let [n, ci, l] = dims3(vx.shape());
        let [_, _, k] = dims3(vw.shape());
        self.conv_backward(grads, g, x, w, n, &patch1d(ci, l, k, geom));
        self.bias_grad(grads, b, g);
    }

    fn conv2d_backward(&self, grads: &mut Sink, g: &Tensor, x: Var, w: Var, b: Var, geom: Conv2dGeom) {
        let (vx, vw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        let [n, ci, h, wd] = dims4(vx.shape());
        let [_, _, kh, kw] = dims4(vw.shape());
        self.conv_backward(grads, g, x, w, n, &patch2d(ci, h, wd, kh, kw, geom));
        self.bias_grad(grads, b, g);
    }

    fn conv_backward(&self, grads: &mut Sink, g: &Tensor, x: Var, w: Var, n: usize, p: &Patch) {
        let (vx, vw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        let co = vw.shape()[0];
        let (rows, cols, in_size) = (p.rows(), p.cols(), p.c * p.h * p.w);
        let gd = g.data();
        let mut buf = vec![0.0; rows * cols];
        self.acc(grads, w, || {
            let mut out = vec![0.0; co * rows];
            for i in 0..n {
                im2col(&vx.data()[i * in_size..(i + 1) * in_size], p, &mut buf);
                gemm(
                    co,
                    cols,
                    rows,
                    &gd[i * co * cols..(i + 1) * co * cols],
                    false,
                    &buf,
                    true,
                    1.0,
                    &mut out,
                );
            }
            Tensor::from_vec(vw.shape(), out)
        });
        self.acc(grads, x, || {
            let mut out = vec![0.0; n * in_size];
            for i in 0..n {
                gemm(
                    rows,
                    co,
                    cols,
                    vw.data(),
                    true,
                    &gd[i * co * cols..(i + 1) * co * cols],
                    false,
                    0.0,
                    &mut buf,
                );
                col2im(&buf, p, &mut out[i * in_size..(i + 1) * in_size]);
            }
            Tensor::from_vec(vx.shape(), out)
        });
    }

    fn conv_transpose1d_backward(&self, grads: &mut Sink, g: &Tensor, x: Var, w: Var, b: Var, geom: Conv1dGeom) {
        let (vx, vw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        let [n, ci, l] = dims3(vx.shape());
        let [_, co, k] = dims3(vw.shape());
        let lo = g.shape()[2];
        let p = transpose_patch(co, lo, k, geom, l);
        let gd = g.data();
        let mut cols = vec![0.0; p.rows() * p.cols()];
        let want_x = grads.wants(x);
        let want_w = grads.wants(w);
        let mut dx = want_x.then(|| vec![0.0; n * ci * l]);
        let mut dw = want_w.then(|| vec![0.0; ci * co * k]);
        if want_x || want_w {
            for i in 0..n {
                im2col(&gd[i * co * lo..(i + 1) * co * lo], &p, &mut cols);
                if let Some(dx) = dx.as_mut() {
                    gemm(
                        ci,
                        co * k,
                        l,
                        vw.data(),
                        false,
                        &cols,
                        false,
                        0.0,
                        &mut dx[i * ci * l..(i + 1) * ci * l],
                    );
                }
                if let Some(dw) = dw.as_mut() {
                    gemm(
                        ci,
                        l,
                        co * k,
                        &vx.data()[i * ci * l..(i + 1) * ci * l],
                        false,
                        &cols,
                        true,
                        1.0,
                        dw,
                    );
                }
            }
        }
        if let Some(dx) = dx {
            self.acc(grads, x, || Tensor::from_vec(&[n, ci, l], dx));
        }
        if let Some(dw) = dw {
            self.acc(grads, w, || Tensor::from_vec(&[ci, co, k], dw));
        }
        self.bias_grad(grads, b, g);
    }
}

fn patch1d(ci: usize, l: usize, k: usize, geom: Conv1dGeom) -> Patch {
    Patch {
        c: ci,
        h: 1,
        w: l,
        kh: 1,
        kw: k,
        sh: 1,
        sw: geom.stride,
        ph: 0,
        pw: geom.pad,
        ho: 1,
        wo: (l + 2 * geom.pad - k) / geom.stride + 1,
    }
}

/// Patch of the conv1d (length `lo` to `l`) whose adjoint is the
/// transposed convolution.
fn transpose_patch(co: usize, lo: usize, k: usize, geom: Conv1dGeom, l: usize) -> Patch {
    Patch {
        wo: l,
        ..patch1d(co, lo, k, geom)
    }
}

fn patch2d(ci: usize, h: usize, w: usize, kh: usize, kw: usize, geom: Conv2dGeom) -> Patch {
    let (sh, sw) = geom.stride;
    let (ph, pw) = geom.pad;
    Patch {
        c: ci,
        h,
        w,
        kh,
        kw,
        sh,
        sw,
        ph,
        pw,
        ho: (h + 2 * ph - kh) / sh + 1,
        wo: (w + 2 * pw - kw) / sw + 1,
    }
}

/// Batched correlation through im2col and one GEMM per sample.
fn conv_forward(x: &[f64], n: usize, w: &[f64], co: usize, bias: &[f64], p: &Patch) -> Vec<f64> {
    let (rows, cols, in_size) = (p.rows(), p.cols(), p.c * p.h * p.w);
    let mut buf = vec![0.0; rows * cols];
    let mut out = vec![0.0; n * co * cols];
    for i in 0..n {
        im2col(&x[i * in_size..(i + 1) * in_size], p, &mut buf);
        let o = &mut out[i * co * cols..(i + 1) * co * cols];
        for (row, &b) in o.chunks_exact_mut(cols).zip(bias) {
            row.fill(b);
        }
        gemm(co, rows, cols, w, false, &buf, false, 1.0, o);
    }
    out
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_vec(t.shape(), t.data().iter().map(|&v| f(v)).collect())
}

fn zip_map(g: &Tensor, x: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_vec(
        x.shape(),
        g.data().iter().zip(x.data()).map(|(&gv, &xv)| f(gv, xv)).collect(),
    )
}

fn dims3(s: &[usize]) -> [usize; 3] {
    assert_eq!(s.len(), 3, "expected rank-3 tensor, got {s:?}");
    [s[0], s[1], s[2]]
}

fn dims4(s: &[usize]) -> [usize; 4] {
    assert_eq!(s.len(), 4, "expected rank-4 tensor, got {s:?}");
    [s[0], s[1], s[2], s[3]]
}
