//! Reverse-mode automatic differentiation over NCHW tensors.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters enter
//! the tape as leaves tied to a [`ParamId`]; [`Tape::backward`] returns the
//! gradient of a scalar loss with respect to every non-frozen parameter that
//! contributed to it.

use std::collections::BTreeMap;

use super::params::{ParamId, ParamStore};
use super::tensor::{matmul, MatRef, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

const GN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }
    fn cols(&self) -> usize {
        self.ho * self.wo
    }
}

enum Op<F> {
    Leaf,
    Conv { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, cols: Vec<F> },
    Linear { x: Var, w: Var, b: Option<Var> },
    Add { a: Var, b: Var },
    AddChannel { x: Var, v: Var },
    Silu { x: Var },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, xhat: Vec<F>, rstd: Vec<F> },
    Concat { a: Var, b: Var },
    ChannelMix { x: Var, w: Var },
    Resize { x: Var },
    Scale { x: Var, s: F },
    Mse { a: Var, b: Var },
    L1 { a: Var, b: Var },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// Gradients keyed by parameter.
#[derive(Debug, Default)]
pub struct Gradients<F> {
    pub by_param: BTreeMap<ParamId, Tensor<F>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.by_param.get(&id)
    }

    pub fn is_finite(&self) -> bool {
        self.by_param.values().all(Tensor::is_finite)
    }
}

pub struct Tape<'s, F> {
    store: &'s ParamStore<F>,
    nodes: Vec<Node<F>>,
    record: bool,
}

fn im2col<F: Scalar>(x: &[F], g: &ConvGeom, cols: &mut [F]) {
    let p = g.cols();
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(F::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize { F::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<F: Scalar>(cols: &[F], g: &ConvGeom, dx: &mut [F]) {
    let p = g.cols();
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &src[oy * g.wo..(oy + 1) * g.wo];
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in line.iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn sigmoid<F: Scalar>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

fn accumulate<F: Scalar>(grads: &mut [Option<Tensor<F>>], v: Var, g: Tensor<F>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.data.iter_mut().zip(&g.data) {
                *a += *b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

impl<'s, F: Scalar> Tape<'s, F> {
    /// Tape that records for a backward pass.
    pub fn new(store: &'s ParamStore<F>) -> Self {
        Self { store, nodes: Vec::with_capacity(256), record: true }
    }

    /// Forward-only tape; nothing requires gradients.
    pub fn inference(store: &'s ParamStore<F>) -> Self {
        Self { store, nodes: Vec::with_capacity(256), record: false }
    }

    pub fn store(&self) -> &'s ParamStore<F> {
        self.store
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad: needs_grad && self.record, param: None });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let p = self.store.get(id);
        let v = self.push(p.value.clone(), Op::Leaf, !p.frozen);
        self.nodes[v.0].param = Some(id);
        v
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// 2-D convolution; `w` is `[cout, cin, k, k]`, `b` is `[cout, 1, 1, 1]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xs = self.value(x).shape;
        let ws = self.value(w).shape;
        let (cout, k) = (ws[0], ws[2]);
        assert_eq!(ws[1], xs[1], "conv input channels {} != weight channels {}", xs[1], ws[1]);
        assert_eq!(ws[2], ws[3], "square kernels only");
        assert!(xs[2] + 2 * pad >= k && xs[3] + 2 * pad >= k, "input smaller than kernel");
        let geom = ConvGeom {
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            k,
            stride,
            pad,
            ho: (xs[2] + 2 * pad - k) / stride + 1,
            wo: (xs[3] + 2 * pad - k) / stride + 1,
        };
        let n = xs[0];
        let (kr, p) = (geom.rows(), geom.cols());
        let keep_cols = self.record && self.ng(w) && !geom.pointwise();
        let mut saved = if keep_cols { vec![F::zero(); n * kr * p] } else { Vec::new() };
        let mut scratch = if geom.pointwise() || keep_cols { Vec::new() } else { vec![F::zero(); kr * p] };
        let mut out = Tensor::zeros([n, cout, geom.ho, geom.wo]);
        {
            let xv = &self.nodes[x.0].value;
            let wv = &self.nodes[w.0].value;
            for i in 0..n {
                let xi = xv.item(i);
                let cols: &[F] = if geom.pointwise() {
                    xi
                } else if keep_cols {
                    let c = &mut saved[i * kr * p..(i + 1) * kr * p];
                    im2col(xi, &geom, c);
                    c
                } else {
                    im2col(xi, &geom, &mut scratch);
                    &scratch
                };
                let o = &mut out.data[i * cout * p..(i + 1) * cout * p];
                matmul(MatRef::new(&wv.data, cout, kr), MatRef::new(cols, kr, p), o, false);
            }
            if let Some(b) = b {
                let bv = &self.nodes[b.0].value;
                for (chunk, co) in out.data.chunks_mut(p).zip((0..cout).cycle()) {
                    let bias = bv.data[co];
                    chunk.iter_mut().for_each(|v| *v += bias);
                }
            }
        }
        let needs = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(out, Op::Conv { x, w, b, geom, cols: saved }, needs)
    }

    /// Fully connected layer on `[n, fin, 1, 1]`; `w` is `[fout, fin, 1, 1]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.value(x).shape;
        let ws = self.value(w).shape;
        let (n, fin, fout) = (xs[0], xs[1] * xs[2] * xs[3], ws[0]);
        assert_eq!(ws[1] * ws[2] * ws[3], fin, "linear input width mismatch");
        let mut out = Tensor::zeros([n, fout, 1, 1]);
        matmul(
            MatRef::new(&self.value(x).data, n, fin),
            MatRef::t(&self.value(w).data, fin, fout),
            &mut out.data,
            false,
        );
        if let Some(b) = b {
            let bv = &self.value(b).data;
            for row in out.data.chunks_mut(fout) {
                row.iter_mut().zip(bv).for_each(|(o, &bb)| *o += bb);
            }
        }
        let needs = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(out, Op::Linear { x, w, b }, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape, bv.shape, "add shape mismatch");
        let data = av.data.iter().zip(&bv.data).map(|(&x, &y)| x + y).collect();
        let out = Tensor::from_vec(av.shape, data);
        let needs = self.ng(a) || self.ng(b);
        self.push(out, Op::Add { a, b }, needs)
    }

    /// Adds a per-(item, channel) vector `v: [n, c, 1, 1]` to every pixel.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Var {
        let xv = self.value(x);
        let vv = self.value(v);
        assert_eq!(&vv.shape[..2], &xv.shape[..2], "add_channel shape mismatch");
        let plane = xv.h() * xv.w();
        let mut out = xv.clone();
        for (chunk, &b) in out.data.chunks_mut(plane).zip(&vv.data) {
            chunk.iter_mut().for_each(|o| *o += b);
        }
        let needs = self.ng(x) || self.ng(v);
        self.push(out, Op::AddChannel { x, v }, needs)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * sigmoid(v));
        let needs = self.ng(x);
        self.push(out, Op::Silu { x }, needs)
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape;
        assert!(groups > 0 && c % groups == 0, "{c} channels not divisible into {groups} groups");
        let per = c / groups * h * w;
        let plane = h * w;
        let mut xhat = vec![F::zero(); xv.numel()];
        let mut rstd = vec![F::zero(); n * groups];
        for (gi, (src, dst)) in xv.data.chunks(per).zip(xhat.chunks_mut(per)).enumerate() {
            let m = per as f64;
            let mean = src.iter().map(|v| v.as_f64()).sum::<f64>() / m;
            let var = src.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / m;
            let r = 1.0 / (var + GN_EPS).sqrt();
            rstd[gi] = F::of(r);
            let (mean, r) = (F::of(mean), F::of(r));
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = (s - mean) * r;
            }
        }
        let gv = &self.value(gamma).data;
        let bv = &self.value(beta).data;
        let mut out = Tensor::zeros(xv.shape);
        for (idx, (o, chunk)) in out.data.chunks_mut(plane).zip(xhat.chunks(plane)).enumerate() {
            let ch = idx % c;
            for (ov, &xh) in o.iter_mut().zip(chunk) {
                *ov = xh * gv[ch] + bv[ch];
            }
        }
        let needs = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let keep = self.record && needs;
        let op = Op::GroupNorm {
            x,
            gamma,
            beta,
            groups,
            xhat: if keep { xhat } else { Vec::new() },
            rstd: if keep { rstd } else { Vec::new() },
        };
        self.push(out, op, needs)
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.n(), bv.n());
        assert_eq!((av.h(), av.w()), (bv.h(), bv.w()), "concat spatial mismatch");
        let [n, ca, h, w] = av.shape;
        let cb = bv.c();
        let mut data = Vec::with_capacity(n * (ca + cb) * h * w);
        for i in 0..n {
            data.extend_from_slice(av.item(i));
            data.extend_from_slice(bv.item(i));
        }
        let out = Tensor::from_vec([n, ca + cb, h, w], data);
        let needs = self.ng(a) || self.ng(b);
        self.push(out, Op::Concat { a, b }, needs)
    }

    /// Per-item channel mixing: `x` is `[n, ci, h, w]` and `w` is
    /// `[n, co * ci, 1, 1]` holding one row-major `co x ci` matrix per item.
    pub fn channel_mix(&mut self, x: Var, w: Var) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        let [n, ci, h, wd] = xv.shape;
        let plane = h * wd;
        assert_eq!(wv.n(), n, "channel_mix batch mismatch");
        assert_eq!(wv.item_len() % ci, 0, "channel_mix width mismatch");
        let co = wv.item_len() / ci;
        let mut out = Tensor::zeros([n, co, h, wd]);
        for i in 0..n {
            let (xi, mi) = (xv.item(i), wv.item(i));
            let oi = &mut out.data[i * co * plane..(i + 1) * co * plane];
            for o in 0..co {
                let dst = &mut oi[o * plane..(o + 1) * plane];
                for c in 0..ci {
                    let k = mi[o * ci + c];
                    dst.iter_mut().zip(&xi[c * plane..(c + 1) * plane]).for_each(|(d, &v)| *d += k * v);
                }
            }
        }
        let needs = self.ng(x) || self.ng(w);
        self.push(out, Op::ChannelMix { x, w }, needs)
    }

    /// Nearest-neighbour resize to `(h, w)`.
    pub fn resize_nearest(&mut self, x: Var, h: usize, w: usize) -> Var {
        let xv = self.value(x);
        let [n, c, hi, wi] = xv.shape;
        let mut out = Tensor::zeros([n, c, h, w]);
        for (o, src) in out.data.chunks_mut(h * w).zip(xv.data.chunks(hi * wi)) {
            for y in 0..h {
                let sy = y * hi / h;
                for xx in 0..w {
                    o[y * w + xx] = src[sy * wi + xx * wi / w];
                }
            }
        }
        let needs = self.ng(x);
        self.push(out, Op::Resize { x }, needs)
    }

    pub fn scale(&mut self, x: Var, s: F) -> Var {
        let out = self.value(x).map(|v| v * s);
        let needs = self.ng(x);
        self.push(out, Op::Scale { x, s }, needs)
    }

    /// Mean squared error over all elements, as a `[1, 1, 1, 1]` scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape, bv.shape, "mse shape mismatch");
        let s: f64 = av.data.iter().zip(&bv.data).map(|(&x, &y)| (x - y).as_f64().powi(2)).sum();
        let out = Tensor::from_vec([1, 1, 1, 1], vec![F::of(s / av.numel() as f64)]);
        let needs = self.ng(a) || self.ng(b);
        self.push(out, Op::Mse { a, b }, needs)
    }

    /// Mean absolute error over all elements.
    pub fn l1(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape, bv.shape, "l1 shape mismatch");
        let s: f64 = av.data.iter().zip(&bv.data).map(|(&x, &y)| (x - y).abs().as_f64()).sum();
        let out = Tensor::from_vec([1, 1, 1, 1], vec![F::of(s / av.numel() as f64)]);
        let needs = self.ng(a) || self.ng(b);
        self.push(out, Op::L1 { a, b }, needs)
    }

    pub fn scalar(&self, v: Var) -> F {
        self.value(v).data[0]
    }

    /// Back-propagates from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<F> {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut out = Gradients::default();
        if !self.nodes[loss.0].needs_grad {
            return out;
        }
        grads[loss.0] = Some(Tensor::full([1, 1, 1, 1], F::one()));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    if let Some(pid) = node.param {
                        match out.by_param.get_mut(&pid) {
                            Some(acc) => acc.data.iter_mut().zip(&g.data).for_each(|(a, &b)| *a += b),
                            None => {
                                out.by_param.insert(pid, g);
                            }
                        }
                    }
                }
                Op::Conv { x, w, b, geom, cols } => self.back_conv(&mut grads, &g, *x, *w, *b, geom, cols),
                Op::Linear { x, w, b } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let (n, fin, fout) = (xv.n(), xv.item_len(), wv.shape[0]);
                    if self.ng(*x) {
                        let mut dx = Tensor::zeros(xv.shape);
                        matmul(MatRef::new(&g.data, n, fout), MatRef::new(&wv.data, fout, fin), &mut dx.data, false);
                        accumulate(&mut grads, *x, dx);
                    }
                    if self.ng(*w) {
                        let mut dw = Tensor::zeros(wv.shape);
                        matmul(MatRef::t(&g.data, fout, n), MatRef::new(&xv.data, n, fin), &mut dw.data, false);
                        accumulate(&mut grads, *w, dw);
                    }
                    if let Some(b) = b.filter(|b| self.ng(*b)) {
                        let mut db = Tensor::zeros(self.value(b).shape);
                        for row in g.data.chunks(fout) {
                            db.data.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                        }
                        accumulate(&mut grads, b, db);
                    }
                }
                Op::Add { a, b } => {
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.ng(*b) {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::AddChannel { x, v } => {
                    if self.ng(*v) {
                        let plane = g.h() * g.w();
                        let mut dv = Tensor::zeros(self.value(*v).shape);
                        for (d, chunk) in dv.data.iter_mut().zip(g.data.chunks(plane)) {
                            *d = chunk.iter().fold(F::zero(), |s, &v| s + v);
                        }
                        accumulate(&mut grads, *v, dv);
                    }
                    if self.ng(*x) {
                        accumulate(&mut grads, *x, g);
                    }
                }
                Op::Silu { x } => {
                    let xv = self.value(*x);
                    let data = xv
                        .data
                        .iter()
                        .zip(&g.data)
                        .map(|(&v, &gv)| {
                            let s = sigmoid(v);
                            gv * s * (F::one() + v * (F::one() - s))
                        })
                        .collect();
                    accumulate(&mut grads, *x, Tensor::from_vec(xv.shape, data));
                }
                Op::GroupNorm { x, gamma, beta, groups, xhat, rstd } => {
                    let [_, c, h, w] = g.shape;
                    let plane = h * w;
                    let gv = &self.value(*gamma).data;
                    if self.ng(*gamma) || self.ng(*beta) {
                        let mut dg = Tensor::zeros(self.value(*gamma).shape);
                        let mut db = Tensor::zeros(self.value(*beta).shape);
                        for (idx, (gc, xc)) in g.data.chunks(plane).zip(xhat.chunks(plane)).enumerate() {
                            let ch = idx % c;
                            for (&gg, &xx) in gc.iter().zip(xc) {
                                dg.data[ch] += gg * xx;
                                db.data[ch] += gg;
                            }
                        }
                        if self.ng(*gamma) {
                            accumulate(&mut grads, *gamma, dg);
                        }
                        if self.ng(*beta) {
                            accumulate(&mut grads, *beta, db);
                        }
                    }
                    if self.ng(*x) {
                        let per = c / groups * plane;
                        let m = F::of(per as f64);
                        let mut dx = Tensor::zeros(g.shape);
                        let mut dxhat = vec![F::zero(); per];
                        for (gi, ((gc, xc), dc)) in
                            g.data.chunks(per).zip(xhat.chunks(per)).zip(dx.data.chunks_mut(per)).enumerate()
                        {
                            let ch0 = (gi % groups) * (c / groups);
                            let (mut s1, mut s2) = (F::zero(), F::zero());
                            for (j, (&gg, &xx)) in gc.iter().zip(xc).enumerate() {
                                let d = gg * gv[ch0 + j / plane];
                                dxhat[j] = d;
                                s1 += d;
                                s2 += d * xx;
                            }
                            let r = rstd[gi];
                            for (j, d) in dc.iter_mut().enumerate() {
                                *d = r * (dxhat[j] - s1 / m - xc[j] * s2 / m);
                            }
                        }
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::Concat { a, b } => {
                    let ca = self.value(*a).item_len();
                    let cb = self.value(*b).item_len();
                    let mut da = Vec::with_capacity(self.value(*a).numel());
                    let mut db = Vec::with_capacity(self.value(*b).numel());
                    for item in g.data.chunks(ca + cb) {
                        da.extend_from_slice(&item[..ca]);
                        db.extend_from_slice(&item[ca..]);
                    }
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, Tensor::from_vec(self.value(*a).shape, da));
                    }
                    if self.ng(*b) {
                        accumulate(&mut grads, *b, Tensor::from_vec(self.value(*b).shape, db));
                    }
                }
                Op::ChannelMix { x, w } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let [n, ci, h, wd] = xv.shape;
                    let plane = h * wd;
                    let co = g.c();
                    let mut dx = Tensor::zeros(xv.shape);
                    let mut dw = Tensor::zeros(wv.shape);
                    for i in 0..n {
                        let (xi, mi, gi) = (xv.item(i), wv.item(i), g.item(i));
                        for o in 0..co {
                            let go = &gi[o * plane..(o + 1) * plane];
                            for c in 0..ci {
                                let xc = &xi[c * plane..(c + 1) * plane];
                                dw.data[i * co * ci + o * ci + c] = go.iter().zip(xc).fold(F::zero(), |s, (&a, &b)| s + a * b);
                                let k = mi[o * ci + c];
                                let d = &mut dx.data[(i * ci + c) * plane..(i * ci + c + 1) * plane];
                                d.iter_mut().zip(go).for_each(|(d, &v)| *d += k * v);
                            }
                        }
                    }
                    if self.ng(*x) {
                        accumulate(&mut grads, *x, dx);
                    }
                    if self.ng(*w) {
                        accumulate(&mut grads, *w, dw);
                    }
                }
                Op::Resize { x } => {
                    let xs = self.value(*x).shape;
                    let (hi, wi) = (xs[2], xs[3]);
                    let (h, w) = (g.h(), g.w());
                    let mut dx = Tensor::zeros(xs);
                    for (d, src) in dx.data.chunks_mut(hi * wi).zip(g.data.chunks(h * w)) {
                        for y in 0..h {
                            let sy = y * hi / h;
                            for xx in 0..w {
                                d[sy * wi + xx * wi / w] += src[y * w + xx];
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Scale { x, s } => {
                    accumulate(&mut grads, *x, g.map(|v| v * *s));
                }
                Op::Mse { a, b } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let k = g.data[0] * F::of(2.0 / av.numel() as f64);
                    let diff: Vec<F> = av.data.iter().zip(&bv.data).map(|(&x, &y)| (x - y) * k).collect();
                    if self.ng(*b) {
                        accumulate(&mut grads, *b, Tensor::from_vec(bv.shape, diff.iter().map(|&d| -d).collect()));
                    }
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, Tensor::from_vec(av.shape, diff));
                    }
                }
                Op::L1 { a, b } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let k = g.data[0] * F::of(1.0 / av.numel() as f64);
                    let sign: Vec<F> = av
                        .data
                        .iter()
                        .zip(&bv.data)
                        .map(|(&x, &y)| {
                            let d = x - y;
                            if d > F::zero() {
                                k
                            } else if d < F::zero() {
                                -k
                            } else {
                                F::zero()
                            }
                        })
                        .collect();
                    if self.ng(*b) {
                        accumulate(&mut grads, *b, Tensor::from_vec(bv.shape, sign.iter().map(|&d| -d).collect()));
                    }
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, Tensor::from_vec(av.shape, sign));
                    }
                }
            }
        }
        out
    }

    #[allow(clippy::too_many_arguments)]
    fn back_conv(
        &self,
        grads: &mut [Option<Tensor<F>>],
        g: &Tensor<F>,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: &ConvGeom,
        cols: &[F],
    ) {
        let xv = self.value(x);
        let wv = self.value(w);
        let n = xv.n();
        let cout = wv.shape[0];
        let (kr, p) = (geom.rows(), geom.cols());
        if let Some(b) = b.filter(|b| self.ng(*b)) {
            let mut db = Tensor::zeros(self.value(b).shape);
            for (chunk, co) in g.data.chunks(p).zip((0..cout).cycle()) {
                db.data[co] += chunk.iter().fold(F::zero(), |s, &v| s + v);
            }
            accumulate(grads, b, db);
        }
        if self.ng(w) {
            let mut dw = Tensor::zeros(wv.shape);
            for i in 0..n {
                let gi = &g.data[i * cout * p..(i + 1) * cout * p];
                let ci: &[F] = if geom.pointwise() { xv.item(i) } else { &cols[i * kr * p..(i + 1) * kr * p] };
                matmul(MatRef::new(gi, cout, p), MatRef::t(ci, p, kr), &mut dw.data, true);
            }
            accumulate(grads, w, dw);
        }
        if self.ng(x) {
            let mut dx = Tensor::zeros(xv.shape);
            let mut dcols = vec![F::zero(); kr * p];
            let item = xv.item_len();
            for i in 0..n {
                let gi = &g.data[i * cout * p..(i + 1) * cout * p];
                let dxi = &mut dx.data[i * item..(i + 1) * item];
                if geom.pointwise() {
                    matmul(MatRef::t(&wv.data, kr, cout), MatRef::new(gi, cout, p), dxi, false);
                } else {
                    matmul(MatRef::t(&wv.data, kr, cout), MatRef::new(gi, cout, p), &mut dcols, false);
                    col2im(&dcols, geom, dxi);
                }
            }
            accumulate(grads, x, dx);
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn rand_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        use rand::Rng;
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Central-difference check of every parameter element against `backward`.
    fn check_grads(store: &mut ParamStore<f64>, f: impl Fn(&mut Tape<'_, f64>) -> Var) {
        let analytic = {
            let mut tape = Tape::new(store);
            let loss = f(&mut tape);
            tape.backward(loss)
        };
        let h = 1e-6;
        let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let grad = analytic.get(id).cloned().unwrap_or_else(|| Tensor::zeros(store.value(id).shape));
            for j in 0..store.value(id).numel() {
                let orig = store.value(id).data[j];
                store.value_mut(id).data[j] = orig + h;
                let up = {
                    let mut t = Tape::inference(store);
                    let l = f(&mut t);
                    t.scalar(l)
                };
                store.value_mut(id).data[j] = orig - h;
                let down = {
                    let mut t = Tape::inference(store);
                    let l = f(&mut t);
                    t.scalar(l)
                };
                store.value_mut(id).data[j] = orig;
                let num = (up - down) / (2.0 * h);
                let an = grad.data[j];
                assert!(
                    (num - an).abs() <= 1e-6 + 1e-5 * num.abs().max(an.abs()),
                    "{} [{j}]: numeric {num} vs analytic {an}",
                    store.get(id).name
                );
            }
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (k, stride, pad) in [(3, 1, 1), (3, 2, 1), (1, 1, 0), (4, 2, 1)] {
            let mut store = ParamStore::new();
            let x = store.push("x", rand_tensor([2, 3, 5, 6], &mut rng));
            let w = store.push("w", rand_tensor([4, 3, k, k], &mut rng));
            let b = store.push("b", rand_tensor([4, 1, 1, 1], &mut rng));
            let (ho, wo) = ((5 + 2 * pad - k) / stride + 1, (6 + 2 * pad - k) / stride + 1);
            let target = rand_tensor([2, 4, ho, wo], &mut rng);
            check_grads(&mut store, |t| {
                let (xv, wv, bv) = (t.param(x), t.param(w), t.param(b));
                let y = t.conv2d(xv, wv, Some(bv), stride, pad);
                let tv = t.constant(target.clone());
                t.mse(y, tv)
            });
        }
    }

    #[test]
    fn composite_op_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let x = store.push("x", rand_tensor([2, 4, 3, 3], &mut rng));
        let gamma = store.push("gamma", rand_tensor([4, 1, 1, 1], &mut rng));
        let beta = store.push("beta", rand_tensor([4, 1, 1, 1], &mut rng));
        let e = store.push("e", rand_tensor([2, 5, 1, 1], &mut rng));
        let lw = store.push("lw", rand_tensor([4, 5, 1, 1], &mut rng));
        let lb = store.push("lb", rand_tensor([4, 1, 1, 1], &mut rng));
        let other = store.push("other", rand_tensor([2, 2, 3, 3], &mut rng));
        let target = rand_tensor([2, 8, 6, 5], &mut rng);
        check_grads(&mut store, |t| {
            let xv = t.param(x);
            let (g, b) = (t.param(gamma), t.param(beta));
            let h = t.group_norm(xv, g, b, 2);
            let h = t.silu(h);
            let ev = t.param(e);
            let (w, bb) = (t.param(lw), t.param(lb));
            let emb = t.linear(ev, w, Some(bb));
            let h = t.add_channel(h, emb);
            let h = t.add(h, xv);
            let o = t.param(other);
            let h = t.concat_channels(h, o);
            let mix = t.linear(ev, w, None);
            let mixed = t.channel_mix(o, mix);
            let h = t.concat_channels(h, mixed);
            let h = t.scale(h, 0.7);
            let h = t.resize_nearest(h, 6, 5);
            let tv = t.constant(target.clone());
            let l1 = t.l1(h, tv);
            let l2 = t.mse(h, tv);
            t.add(l1, l2)
        });
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let a = store.push("frozen.a", rand_tensor([1, 2, 2, 2], &mut rng));
        let b = store.push("live.b", rand_tensor([1, 2, 2, 2], &mut rng));
        store.set_frozen("frozen.", true);
        let mut t = Tape::new(&store);
        let (av, bv) = (t.param(a), t.param(b));
        let s = t.add(av, bv);
        let z = t.constant(Tensor::zeros([1, 2, 2, 2]));
        let l = t.mse(s, z);
        let g = t.backward(l);
        assert!(g.get(a).is_none());
        assert!(g.get(b).is_some());
    }
}
