//! Tape-based reverse-mode autodiff over [`Tensor`]s.
//!
//! Every op appends a node holding its value. When recording is enabled the
//! node also keeps whatever its backward pass needs; inference graphs skip
//! that bookkeeping entirely.

use std::collections::HashSet;
use std::rc::Rc;

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, Element, MatRef, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Precomputed gather table for an n-d convolution with a cubic kernel.
#[derive(Debug)]
struct ConvGeom {
    in_spatial: Vec<usize>,
    out_spatial: Vec<usize>,
    taps: usize,
    /// `table[tap * p_out + p]` = flat input position, or -1 for padding.
    table: Vec<i32>,
}

impl ConvGeom {
    fn new(in_spatial: &[usize], kernel: usize, stride: usize, pad: usize) -> Self {
        let dims = in_spatial.len();
        let out_spatial: Vec<usize> = in_spatial
            .iter()
            .map(|&n| {
                assert!(n + 2 * pad >= kernel, "kernel larger than padded input");
                (n + 2 * pad - kernel) / stride + 1
            })
            .collect();
        let p_out: usize = out_spatial.iter().product();
        let taps = kernel.pow(dims as u32);
        let mut table = vec![-1i32; taps * p_out];
        let mut koff = vec![0usize; dims];
        let mut opos = vec![0usize; dims];
        for tap in 0..taps {
            unravel(tap, &vec![kernel; dims], &mut koff);
            for p in 0..p_out {
                unravel(p, &out_spatial, &mut opos);
                let mut flat = 0i64;
                let mut inside = true;
                for d in 0..dims {
                    let c = (opos[d] * stride + koff[d]) as i64 - pad as i64;
                    if c < 0 || c >= in_spatial[d] as i64 {
                        inside = false;
                        break;
                    }
                    flat = flat * in_spatial[d] as i64 + c;
                }
                if inside {
                    table[tap * p_out + p] = flat as i32;
                }
            }
        }
        Self { in_spatial: in_spatial.to_vec(), out_spatial, taps, table }
    }

    fn p_in(&self) -> usize {
        self.in_spatial.iter().product()
    }

    fn p_out(&self) -> usize {
        self.out_spatial.iter().product()
    }

    fn im2col<E: Element>(&self, x: &[E], channels: usize, col: &mut [E]) {
        let (p_in, p_out) = (self.p_in(), self.p_out());
        for c in 0..channels {
            let xc = &x[c * p_in..(c + 1) * p_in];
            for tap in 0..self.taps {
                let row = &mut col[(c * self.taps + tap) * p_out..(c * self.taps + tap + 1) * p_out];
                let t = &self.table[tap * p_out..(tap + 1) * p_out];
                for (dst, &src) in row.iter_mut().zip(t) {
                    *dst = if src >= 0 { xc[src as usize] } else { E::zero() };
                }
            }
        }
    }

    fn col2im<E: Element>(&self, col: &[E], channels: usize, dx: &mut [E]) {
        let (p_in, p_out) = (self.p_in(), self.p_out());
        for c in 0..channels {
            let dxc = &mut dx[c * p_in..(c + 1) * p_in];
            for tap in 0..self.taps {
                let row = &col[(c * self.taps + tap) * p_out..(c * self.taps + tap + 1) * p_out];
                let t = &self.table[tap * p_out..(tap + 1) * p_out];
                for (&g, &src) in row.iter().zip(t) {
                    if src >= 0 {
                        dxc[src as usize] += g;
                    }
                }
            }
        }
    }

    fn is_pointwise(&self) -> bool {
        self.taps == 1 && self.in_spatial == self.out_spatial
    }
}

fn unravel(mut i: usize, dims: &[usize], out: &mut [usize]) {
    for d in (0..dims.len()).rev() {
        out[d] = i % dims[d];
        i /= dims[d];
    }
}

enum Op<E> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, E),
    Shift(Var),
    MulPerSample(Var, Vec<E>),
    AddChannel(Var, Var),
    Silu(Var),
    Exp(Var),
    Square(Var),
    Conv { x: Var, w: Var, b: Option<Var>, geom: Rc<ConvGeom> },
    Upsample2 { x: Var, map: Rc<Vec<usize>> },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, mean: Vec<E>, rstd: Vec<E> },
    Linear { x: Var, w: Var, b: Option<Var> },
    Attention { q: Var, k: Var, v: Var, probs: Vec<E> },
    Transpose12(Var),
    Reshape(Var),
    Concat1(Var, Var),
    Narrow1 { x: Var, start: usize },
    Embedding { table: Var, idx: Vec<usize> },
    MeanSpatial(Var),
    UnitNorm1 { x: Var, norms: Vec<E> },
    MatMulNT(Var, Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<E> },
    Mse(Var, Var),
    Mean(Var),
}

struct Node<E> {
    value: Tensor<E>,
    op: Op<E>,
    needs_grad: bool,
}

/// Reverse-mode autodiff tape.
pub struct Graph<E: Element> {
    nodes: Vec<Node<E>>,
    record: bool,
    frozen: HashSet<u64>,
    params: Vec<(Var, u64, ParamId)>,
    watched: HashSet<usize>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<E: Element> {
    grads: Vec<Option<Tensor<E>>>,
    params: Vec<(Var, u64, ParamId)>,
}

impl<E: Element> Gradients<E> {
    /// Gradient of a watched node or a grad-requiring leaf.
    pub fn of(&self, v: Var) -> Option<&Tensor<E>> {
        self.grads[v.0].as_ref()
    }

    /// Gradients for every parameter of `store`, summed over repeated uses.
    /// Parameters that did not take part in the loss get `None`.
    pub fn for_store(&self, store: &ParamStore<E>) -> Vec<Option<Tensor<E>>> {
        let mut out: Vec<Option<Tensor<E>>> = (0..store.len()).map(|_| None).collect();
        for &(var, tag, id) in &self.params {
            if tag != store.tag() {
                continue;
            }
            if let Some(g) = &self.grads[var.0] {
                match &mut out[id.0] {
                    Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, &b)| *a += b),
                    slot => *slot = Some(g.clone()),
                }
            }
        }
        out
    }
}

impl<E: Element> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid<E: Element>(x: E) -> E {
    E::one() / (E::one() + (-x).exp())
}

impl<E: Element> Graph<E> {
    /// A recording graph: parameters of non-frozen stores receive gradients.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            record: true,
            frozen: HashSet::new(),
            params: Vec::new(),
            watched: HashSet::new(),
        }
    }

    /// A forward-only graph.
    pub fn inference() -> Self {
        Self { record: false, ..Self::new() }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    /// Parameters of `store` become constants in this graph.
    pub fn freeze(&mut self, store: &ParamStore<E>) {
        self.frozen.insert(store.tag());
    }

    /// Keep this node's gradient after [`Graph::backward`].
    pub fn watch(&mut self, v: Var) {
        self.watched.insert(v.0);
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<E>, op: Op<E>, inputs: &[Var]) -> Var {
        let needs_grad = self.record && inputs.iter().any(|&v| self.needs(v));
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A constant input.
    pub fn constant(&mut self, value: Tensor<E>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is reported by [`Gradients::of`].
    pub fn variable(&mut self, value: Tensor<E>) -> Var {
        let needs_grad = self.record;
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad });
        let v = Var(self.nodes.len() - 1);
        self.watched.insert(v.0);
        v
    }

    pub fn param(&mut self, store: &ParamStore<E>, id: ParamId) -> Var {
        let trainable = self.record && !self.frozen.contains(&store.tag());
        self.nodes.push(Node { value: store.get(id).clone(), op: Op::Leaf, needs_grad: trainable });
        let v = Var(self.nodes.len() - 1);
        if trainable {
            self.params.push((v, store.tag(), id));
        }
        v
    }

    // ---- elementwise -------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: E) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    /// `a + c` for a constant tensor `c` of the same shape.
    pub fn add_const(&mut self, a: Var, c: &Tensor<E>) -> Var {
        let v = self.value(a).zip_map(c, |x, y| x + y);
        self.push(v, Op::Shift(a), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: E) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.push(v, Op::Shift(a), &[a])
    }

    /// Multiply every item of the leading (batch) axis by its own constant.
    pub fn mul_per_sample(&mut self, a: Var, coeffs: Vec<E>) -> Var {
        let x = self.value(a);
        let b = x.shape()[0];
        assert_eq!(coeffs.len(), b, "one coefficient per batch item");
        let per = x.len() / b;
        let mut out = x.clone();
        for (chunk, &c) in out.data_mut().chunks_mut(per).zip(&coeffs) {
            chunk.iter_mut().for_each(|v| *v *= c);
        }
        self.push(out, Op::MulPerSample(a, coeffs), &[a])
    }

    /// `x[b, c, ...] + v[b, c]`.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Var {
        let xs = self.value(x).shape().to_vec();
        let (b, c) = (xs[0], xs[1]);
        assert_eq!(self.value(v).shape(), &[b, c], "add_channel expects [B, C] vector");
        let p = self.value(x).len() / (b * c);
        let mut out = self.value(x).clone();
        let vv = self.value(v).data().to_vec();
        for (i, chunk) in out.data_mut().chunks_mut(p).enumerate() {
            let add = vv[i];
            chunk.iter_mut().for_each(|e| *e += add);
        }
        self.push(out, Op::AddChannel(x, v), &[x, v])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * sigmoid(x));
        self.push(v, Op::Silu(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.exp());
        self.push(v, Op::Exp(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a), &[a])
    }

    // ---- structural --------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let v = self.value(a).clone().reshape(shape);
        self.push(v, Op::Reshape(a), &[a])
    }

    /// `[A, X, Y] -> [A, Y, X]`.
    pub fn transpose12(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s = x.shape();
        assert_eq!(s.len(), 3, "transpose12 expects a 3-d tensor");
        let (n, r, c) = (s[0], s[1], s[2]);
        let mut out = vec![E::zero(); x.len()];
        let d = x.data();
        for b in 0..n {
            let base = b * r * c;
            for i in 0..r {
                for j in 0..c {
                    out[base + j * r + i] = d[base + i * c + j];
                }
            }
        }
        self.push(Tensor::new(vec![n, c, r], out), Op::Transpose12(a), &[a])
    }

    /// Concatenate along axis 1.
    pub fn concat1(&mut self, a: Var, b: Var) -> Var {
        let (xa, xb) = (self.value(a), self.value(b));
        let (sa, sb) = (xa.shape(), xb.shape());
        assert_eq!(sa[0], sb[0]);
        assert_eq!(sa[2..], sb[2..], "concat1 trailing shape mismatch");
        let n = sa[0];
        let pa = xa.len() / n;
        let pb = xb.len() / n;
        let mut out = Vec::with_capacity(xa.len() + xb.len());
        for i in 0..n {
            out.extend_from_slice(&xa.data()[i * pa..(i + 1) * pa]);
            out.extend_from_slice(&xb.data()[i * pb..(i + 1) * pb]);
        }
        let mut shape = sa.to_vec();
        shape[1] = sa[1] + sb[1];
        self.push(Tensor::new(shape, out), Op::Concat1(a, b), &[a, b])
    }

    /// Channels `[start, start + len)` of axis 1.
    pub fn narrow1(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        let s = x.shape().to_vec();
        assert!(start + len <= s[1], "narrow1 out of range");
        let n = s[0];
        let p: usize = s[2..].iter().product();
        let mut out = Vec::with_capacity(n * len * p);
        for i in 0..n {
            let base = i * s[1] * p;
            out.extend_from_slice(&x.data()[base + start * p..base + (start + len) * p]);
        }
        let mut shape = s;
        shape[1] = len;
        self.push(Tensor::new(shape, out), Op::Narrow1 { x: a, start }, &[a])
    }

    /// Gather rows of a `[V, d]` table.
    pub fn embedding(&mut self, table: Var, idx: &[usize]) -> Var {
        let t = self.value(table);
        let s = t.shape();
        assert_eq!(s.len(), 2);
        let d = s[1];
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            assert!(i < s[0], "embedding index {i} out of range {}", s[0]);
            out.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
        }
        self.push(
            Tensor::new(vec![idx.len(), d], out),
            Op::Embedding { table, idx: idx.to_vec() },
            &[table],
        )
    }

    /// Mean over every axis after the first two: `[B, C, ...] -> [B, C]`.
    pub fn mean_spatial(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s = x.shape();
        let (b, c) = (s[0], s[1]);
        let p = x.len() / (b * c);
        let inv = E::one() / E::from_f64(p as f64);
        let out: Vec<E> = x.data().chunks(p).map(|ch| ch.iter().copied().sum::<E>() * inv).collect();
        self.push(Tensor::new(vec![b, c], out), Op::MeanSpatial(a), &[a])
    }

    /// Nearest-neighbour ×2 upsampling on every spatial axis.
    pub fn upsample2(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s = x.shape().to_vec();
        let spatial = &s[2..];
        let out_spatial: Vec<usize> = spatial.iter().map(|&n| n * 2).collect();
        let p_out: usize = out_spatial.iter().product();
        let p_in: usize = spatial.iter().product();
        let mut map = vec![0usize; p_out];
        let mut coord = vec![0usize; spatial.len()];
        for (po, m) in map.iter_mut().enumerate() {
            unravel(po, &out_spatial, &mut coord);
            let mut flat = 0;
            for d in 0..spatial.len() {
                flat = flat * spatial[d] + coord[d] / 2;
            }
            *m = flat;
        }
        let bc = s[0] * s[1];
        let mut out = vec![E::zero(); bc * p_out];
        for i in 0..bc {
            let src = &x.data()[i * p_in..(i + 1) * p_in];
            for (dst, &m) in out[i * p_out..(i + 1) * p_out].iter_mut().zip(&map) {
                *dst = src[m];
            }
        }
        let mut shape = vec![s[0], s[1]];
        shape.extend(out_spatial);
        self.push(Tensor::new(shape, out), Op::Upsample2 { x: a, map: Rc::new(map) }, &[a])
    }

    // ---- layers ------------------------------------------------------

    /// N-d convolution, `x: [B, C, *S]`, `w: [O, C, k, ..., k]`, `b: [O]`.
    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let dims = xs.len() - 2;
        assert_eq!(ws.len(), dims + 2, "weight rank does not match input rank");
        assert_eq!(ws[1], xs[1], "conv channel mismatch: weight {:?}, input {:?}", ws, xs);
        let (batch, cin, cout, k) = (xs[0], xs[1], ws[0], ws[2]);
        let geom = Rc::new(ConvGeom::new(&xs[2..], k, stride, pad));
        let (p_in, p_out) = (geom.p_in(), geom.p_out());
        let ckk = cin * geom.taps;
        let mut out = vec![E::zero(); batch * cout * p_out];
        let mut col = if geom.is_pointwise() { Vec::new() } else { vec![E::zero(); ckk * p_out] };
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            for bi in 0..batch {
                let xb = &xv[bi * cin * p_in..(bi + 1) * cin * p_in];
                let rhs: &[E] = if geom.is_pointwise() {
                    xb
                } else {
                    geom.im2col(xb, cin, &mut col);
                    &col
                };
                gemm(
                    MatRef::new(wv, cout, ckk),
                    MatRef::new(rhs, ckk, p_out),
                    &mut out[bi * cout * p_out..(bi + 1) * cout * p_out],
                    false,
                );
            }
            if let Some(b) = b {
                let bv = self.value(b).data();
                for (i, chunk) in out.chunks_mut(p_out).enumerate() {
                    let add = bv[i % cout];
                    chunk.iter_mut().for_each(|e| *e += add);
                }
            }
        }
        let mut shape = vec![batch, cout];
        shape.extend_from_slice(&geom.out_spatial);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(Tensor::new(shape, out), Op::Conv { x, w, b, geom }, &inputs)
    }

    /// Group normalisation over `[B, C, ...]` with per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let xs = self.value(x).shape().to_vec();
        let (b, c) = (xs[0], xs[1]);
        assert_eq!(c % groups, 0, "channels {c} not divisible by groups {groups}");
        let p = self.value(x).len() / (b * c);
        let cpg = c / groups;
        let n = E::from_f64((cpg * p) as f64);
        let eps = E::from_f64(1e-5);
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = vec![E::zero(); xv.len()];
        let mut means = Vec::with_capacity(b * groups);
        let mut rstds = Vec::with_capacity(b * groups);
        for bi in 0..b {
            for g in 0..groups {
                let start = (bi * c + g * cpg) * p;
                let seg = &xv[start..start + cpg * p];
                let mean = seg.iter().copied().sum::<E>() / n;
                let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<E>() / n;
                let rstd = E::one() / (var + eps).sqrt();
                for ci in 0..cpg {
                    let ch = g * cpg + ci;
                    for j in 0..p {
                        let idx = start + ci * p + j;
                        out[idx] = (xv[idx] - mean) * rstd * gv[ch] + bv[ch];
                    }
                }
                means.push(mean);
                rstds.push(rstd);
            }
        }
        let (mean, rstd) = if self.record { (means, rstds) } else { (Vec::new(), Vec::new()) };
        self.push(
            Tensor::new(xs, out),
            Op::GroupNorm { x, gamma, beta, groups, mean, rstd },
            &[x, gamma, beta],
        )
    }

    /// `x [.., In] * wᵀ + b` with `w: [Out, In]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let (out_f, in_f) = (ws[0], ws[1]);
        assert_eq!(*xs.last().unwrap(), in_f, "linear input width mismatch");
        let rows = self.value(x).len() / in_f;
        let mut out = vec![E::zero(); rows * out_f];
        gemm(
            MatRef::new(self.value(x).data(), rows, in_f),
            MatRef::new(self.value(w).data(), out_f, in_f).t(),
            &mut out,
            false,
        );
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(out_f) {
                row.iter_mut().zip(bv).for_each(|(o, &bb)| *o += bb);
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = out_f;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(Tensor::new(shape, out), Op::Linear { x, w, b }, &inputs)
    }

    /// Single-head scaled dot-product attention.
    /// `q: [B, Nq, d]`, `k: [B, Nk, d]`, `v: [B, Nk, dv]`; keys at positions
    /// `>= key_lens[b]` are masked out.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, key_lens: Option<Vec<usize>>) -> Var {
        let (qs, ks, vs) =
            (self.value(q).shape().to_vec(), self.value(k).shape().to_vec(), self.value(v).shape().to_vec());
        let (b, nq, d) = (qs[0], qs[1], qs[2]);
        let (nk, dv) = (ks[1], vs[2]);
        assert_eq!(ks[0], b);
        assert_eq!(ks[2], d, "query/key width mismatch");
        assert_eq!(vs[1], nk, "key/value length mismatch");
        let key_lens = key_lens.unwrap_or_else(|| vec![nk; b]);
        assert_eq!(key_lens.len(), b);
        let scale = E::one() / E::from_f64(d as f64).sqrt();
        let mut probs = vec![E::zero(); b * nq * nk];
        let mut out = vec![E::zero(); b * nq * dv];
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        for bi in 0..b {
            let len = key_lens[bi];
            assert!(len >= 1 && len <= nk, "key length {len} out of range");
            let pb = &mut probs[bi * nq * nk..(bi + 1) * nq * nk];
            gemm(
                MatRef::new(&qv[bi * nq * d..(bi + 1) * nq * d], nq, d),
                MatRef::new(&kv[bi * nk * d..(bi + 1) * nk * d], nk, d).t(),
                pb,
                false,
            );
            for row in pb.chunks_mut(nk) {
                let mut m = E::neg_infinity();
                for e in row[..len].iter_mut() {
                    *e *= scale;
                    m = m.max(*e);
                }
                let mut s = E::zero();
                for e in row[..len].iter_mut() {
                    *e = (*e - m).exp();
                    s += *e;
                }
                row[..len].iter_mut().for_each(|e| *e /= s);
                row[len..].iter_mut().for_each(|e| *e = E::zero());
            }
            gemm(
                MatRef::new(pb, nq, nk),
                MatRef::new(&vv[bi * nk * dv..(bi + 1) * nk * dv], nk, dv),
                &mut out[bi * nq * dv..(bi + 1) * nq * dv],
                false,
            );
        }
        let probs = if self.record { probs } else { Vec::new() };
        self.push(
            Tensor::new(vec![b, nq, dv], out),
            Op::Attention { q, k, v, probs },
            &[q, k, v],
        )
    }

    /// Scale `[B, C, ...]` so each spatial position has unit L2 norm across
    /// channels. A `[N, d]` matrix is normalised row-wise.
    pub fn unit_norm1(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s = x.shape();
        let (b, c) = (s[0], s[1]);
        let p = x.len() / (b * c);
        let eps = E::from_f64(1e-10);
        let mut out = x.clone();
        let mut norms = vec![E::zero(); b * p];
        let xv = x.data();
        for bi in 0..b {
            for j in 0..p {
                let mut ss = E::zero();
                for ci in 0..c {
                    let e = xv[(bi * c + ci) * p + j];
                    ss += e * e;
                }
                let nrm = (ss + eps).sqrt();
                norms[bi * p + j] = nrm;
                for ci in 0..c {
                    out.data_mut()[(bi * c + ci) * p + j] = xv[(bi * c + ci) * p + j] / nrm;
                }
            }
        }
        let norms = if self.record { norms } else { Vec::new() };
        self.push(out, Op::UnitNorm1 { x: a, norms }, &[a])
    }

    /// `a [M, K] * bᵀ` with `b: [N, K]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        assert_eq!(sa[1], sb[1], "matmul_nt inner dimension mismatch");
        let mut out = vec![E::zero(); sa[0] * sb[0]];
        gemm(
            MatRef::new(self.value(a).data(), sa[0], sa[1]),
            MatRef::new(self.value(b).data(), sb[0], sb[1]).t(),
            &mut out,
            false,
        );
        self.push(Tensor::new(vec![sa[0], sb[0]], out), Op::MatMulNT(a, b), &[a, b])
    }

    // ---- reductions / losses -----------------------------------------

    /// Mean softmax cross-entropy of `[N, K]` logits.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let x = self.value(logits);
        let s = x.shape();
        let (n, k) = (s[0], s[1]);
        assert_eq!(targets.len(), n);
        let mut probs = vec![E::zero(); n * k];
        let mut loss = E::zero();
        for i in 0..n {
            let row = &x.data()[i * k..(i + 1) * k];
            let m = row.iter().copied().fold(E::neg_infinity(), E::max);
            let s: E = row.iter().map(|&v| (v - m).exp()).sum();
            let lse = m + s.ln();
            for j in 0..k {
                probs[i * k + j] = (row[j] - lse).exp();
            }
            assert!(targets[i] < k, "target out of range");
            loss += lse - row[targets[i]];
        }
        loss /= E::from_f64(n as f64);
        let probs = if self.record { probs } else { Vec::new() };
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            &[logits],
        )
    }

    /// Mean of `(a - b)^2` over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "mse shape mismatch");
        let s: E = x.data().iter().zip(y.data()).map(|(&p, &q)| (p - q) * (p - q)).sum();
        let v = s / E::from_f64(x.len() as f64);
        self.push(Tensor::scalar(v), Op::Mse(a, b), &[a, b])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = x.sum() / E::from_f64(x.len() as f64);
        self.push(Tensor::scalar(v), Op::Mean(a), &[a])
    }

    // ---- backward ----------------------------------------------------

    /// Reverse pass from a scalar node.
    pub fn backward(self, loss: Var) -> Gradients<E> {
        assert_eq!(self.value(loss).len(), 1, "backward from non-scalar");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<E>>> = (0..n).map(|_| None).collect();
        if !self.record || !self.needs(loss) {
            return Gradients { grads, params: self.params };
        }
        grads[loss.0] = Some(Tensor::scalar(E::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let keep = matches!(node.op, Op::Leaf) || self.watched.contains(&i);
            let gy = match if keep { grads[i].clone() } else { grads[i].take() } {
                Some(g) => g,
                None => continue,
            };
            self.backward_node(i, gy, &mut grads);
        }
        Gradients { grads, params: self.params }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<E>>], v: Var, g: Tensor<E>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, &b)| *a += b),
            slot => *slot = Some(g),
        }
    }

    fn backward_node(&self, i: usize, gy: Tensor<E>, grads: &mut [Option<Tensor<E>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *b, gy.clone());
                self.accumulate(grads, *a, gy);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *b, gy.map(|v| -v));
                self.accumulate(grads, *a, gy);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    self.accumulate(grads, *a, gy.zip_map(vb, |g, y| g * y));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, gy.zip_map(va, |g, x| g * x));
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, gy.map(|g| g * s));
            }
            Op::Shift(a) => self.accumulate(grads, *a, gy),
            Op::MulPerSample(a, coeffs) => {
                let per = gy.len() / coeffs.len();
                let mut g = gy;
                for (chunk, &c) in g.data_mut().chunks_mut(per).zip(coeffs) {
                    chunk.iter_mut().for_each(|v| *v *= c);
                }
                self.accumulate(grads, *a, g);
            }
            Op::AddChannel(x, v) => {
                if self.needs(*v) {
                    let vs = self.value(*v).shape().to_vec();
                    let p = gy.len() / (vs[0] * vs[1]);
                    let dv: Vec<E> = gy.data().chunks(p).map(|c| c.iter().copied().sum()).collect();
                    self.accumulate(grads, *v, Tensor::new(vs, dv));
                }
                self.accumulate(grads, *x, gy);
            }
            Op::Silu(a) => {
                let x = self.value(*a);
                let g = gy.zip_map(x, |g, x| {
                    let s = sigmoid(x);
                    g * s * (E::one() + x * (E::one() - s))
                });
                self.accumulate(grads, *a, g);
            }
            Op::Exp(a) => {
                let g = gy.zip_map(&node.value, |g, y| g * y);
                self.accumulate(grads, *a, g);
            }
            Op::Square(a) => {
                let two = E::from_f64(2.0);
                let g = gy.zip_map(self.value(*a), |g, x| two * g * x);
                self.accumulate(grads, *a, g);
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, gy.reshape(shape));
            }
            Op::Transpose12(a) => {
                let s = gy.shape().to_vec(); // [n, c, r]
                let (n, c, r) = (s[0], s[1], s[2]);
                let mut out = vec![E::zero(); gy.len()];
                for b in 0..n {
                    let base = b * r * c;
                    for i in 0..r {
                        for j in 0..c {
                            out[base + i * c + j] = gy.data()[base + j * r + i];
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::new(vec![n, r, c], out));
            }
            Op::Concat1(a, b) => {
                let (sa, sb) = (self.value(*a).shape().to_vec(), self.value(*b).shape().to_vec());
                let n = sa[0];
                let pa: usize = sa[1..].iter().product();
                let pb: usize = sb[1..].iter().product();
                let mut ga = Vec::with_capacity(n * pa);
                let mut gb = Vec::with_capacity(n * pb);
                for chunk in gy.data().chunks(pa + pb) {
                    ga.extend_from_slice(&chunk[..pa]);
                    gb.extend_from_slice(&chunk[pa..]);
                }
                self.accumulate(grads, *a, Tensor::new(sa, ga));
                self.accumulate(grads, *b, Tensor::new(sb, gb));
            }
            Op::Narrow1 { x, start } => {
                let s = self.value(*x).shape().to_vec();
                let len = gy.shape()[1];
                let p: usize = s[2..].iter().product();
                let mut g = Tensor::zeros(s.clone());
                for bi in 0..s[0] {
                    let dst = bi * s[1] * p + start * p;
                    let src = bi * len * p;
                    g.data_mut()[dst..dst + len * p].copy_from_slice(&gy.data()[src..src + len * p]);
                }
                self.accumulate(grads, *x, g);
            }
            Op::Embedding { table, idx } => {
                let s = self.value(*table).shape().to_vec();
                let d = s[1];
                let mut g = Tensor::zeros(s);
                for (r, &ix) in idx.iter().enumerate() {
                    for j in 0..d {
                        g.data_mut()[ix * d + j] += gy.data()[r * d + j];
                    }
                }
                self.accumulate(grads, *table, g);
            }
            Op::MeanSpatial(a) => {
                let s = self.value(*a).shape().to_vec();
                let p: usize = s[2..].iter().product();
                let inv = E::one() / E::from_f64(p as f64);
                let mut data = Vec::with_capacity(s.iter().product());
                for &g in gy.data() {
                    data.extend(std::iter::repeat_n(g * inv, p));
                }
                self.accumulate(grads, *a, Tensor::new(s, data));
            }
            Op::Upsample2 { x, map } => {
                let s = self.value(*x).shape().to_vec();
                let p_in: usize = s[2..].iter().product();
                let p_out = map.len();
                let mut g = Tensor::zeros(s.clone());
                for bc in 0..s[0] * s[1] {
                    let src = &gy.data()[bc * p_out..(bc + 1) * p_out];
                    let dst = &mut g.data_mut()[bc * p_in..(bc + 1) * p_in];
                    for (&v, &m) in src.iter().zip(map.iter()) {
                        dst[m] += v;
                    }
                }
                self.accumulate(grads, *x, g);
            }
            Op::Conv { x, w, b, geom } => self.backward_conv(*x, *w, *b, geom, &gy, grads),
            Op::GroupNorm { x, gamma, beta, groups, mean, rstd } => {
                let xs = self.value(*x).shape().to_vec();
                let (bn, c) = (xs[0], xs[1]);
                let p = gy.len() / (bn * c);
                let cpg = c / groups;
                let n = E::from_f64((cpg * p) as f64);
                let xv = self.value(*x).data();
                let gv = self.value(*gamma).data();
                let mut dx = vec![E::zero(); xv.len()];
                let mut dgamma = vec![E::zero(); c];
                let mut dbeta = vec![E::zero(); c];
                for bi in 0..bn {
                    for g in 0..*groups {
                        let (mu, rs) = (mean[bi * groups + g], rstd[bi * groups + g]);
                        let start = (bi * c + g * cpg) * p;
                        let mut s1 = E::zero();
                        let mut s2 = E::zero();
                        for ci in 0..cpg {
                            let ch = g * cpg + ci;
                            for j in 0..p {
                                let idx = start + ci * p + j;
                                let xh = (xv[idx] - mu) * rs;
                                let dy = gy.data()[idx];
                                dgamma[ch] += dy * xh;
                                dbeta[ch] += dy;
                                let dxh = dy * gv[ch];
                                s1 += dxh;
                                s2 += dxh * xh;
                            }
                        }
                        for ci in 0..cpg {
                            let ch = g * cpg + ci;
                            for j in 0..p {
                                let idx = start + ci * p + j;
                                let xh = (xv[idx] - mu) * rs;
                                let dxh = gy.data()[idx] * gv[ch];
                                dx[idx] = rs * (dxh - s1 / n - xh * s2 / n);
                            }
                        }
                    }
                }
                self.accumulate(grads, *gamma, Tensor::new(vec![c], dgamma));
                self.accumulate(grads, *beta, Tensor::new(vec![c], dbeta));
                self.accumulate(grads, *x, Tensor::new(xs, dx));
            }
            Op::Linear { x, w, b } => {
                let xs = self.value(*x).shape().to_vec();
                let ws = self.value(*w).shape().to_vec();
                let (out_f, in_f) = (ws[0], ws[1]);
                let rows = self.value(*x).len() / in_f;
                if let Some(b) = b {
                    if self.needs(*b) {
                        let mut db = vec![E::zero(); out_f];
                        for row in gy.data().chunks(out_f) {
                            db.iter_mut().zip(row).for_each(|(d, &g)| *d += g);
                        }
                        self.accumulate(grads, *b, Tensor::new(vec![out_f], db));
                    }
                }
                if self.needs(*w) {
                    let mut dw = vec![E::zero(); out_f * in_f];
                    gemm(
                        MatRef::new(gy.data(), rows, out_f).t(),
                        MatRef::new(self.value(*x).data(), rows, in_f),
                        &mut dw,
                        false,
                    );
                    self.accumulate(grads, *w, Tensor::new(ws.clone(), dw));
                }
                if self.needs(*x) {
                    let mut dx = vec![E::zero(); rows * in_f];
                    gemm(
                        MatRef::new(gy.data(), rows, out_f),
                        MatRef::new(self.value(*w).data(), out_f, in_f),
                        &mut dx,
                        false,
                    );
                    self.accumulate(grads, *x, Tensor::new(xs, dx));
                }
            }
            Op::Attention { q, k, v, probs } => {
                let (qs, ks, vs) = (
                    self.value(*q).shape().to_vec(),
                    self.value(*k).shape().to_vec(),
                    self.value(*v).shape().to_vec(),
                );
                let (b, nq, d) = (qs[0], qs[1], qs[2]);
                let (nk, dv) = (ks[1], vs[2]);
                let scale = E::one() / E::from_f64(d as f64).sqrt();
                let (qv, kv, vv) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let mut dq = vec![E::zero(); qv.len()];
                let mut dk = vec![E::zero(); kv.len()];
                let mut dvv = vec![E::zero(); vv.len()];
                let mut dp = vec![E::zero(); nq * nk];
                for bi in 0..b {
                    let pb = &probs[bi * nq * nk..(bi + 1) * nq * nk];
                    let go = &gy.data()[bi * nq * dv..(bi + 1) * nq * dv];
                    let vb = &vv[bi * nk * dv..(bi + 1) * nk * dv];
                    gemm(MatRef::new(go, nq, dv), MatRef::new(vb, nk, dv).t(), &mut dp, false);
                    gemm(
                        MatRef::new(pb, nq, nk).t(),
                        MatRef::new(go, nq, dv),
                        &mut dvv[bi * nk * dv..(bi + 1) * nk * dv],
                        false,
                    );
                    for (prow, drow) in pb.chunks(nk).zip(dp.chunks_mut(nk)) {
                        let dot: E = prow.iter().zip(drow.iter()).map(|(&p, &g)| p * g).sum();
                        for (g, &p) in drow.iter_mut().zip(prow) {
                            *g = p * (*g - dot) * scale;
                        }
                    }
                    gemm(
                        MatRef::new(&dp, nq, nk),
                        MatRef::new(&kv[bi * nk * d..(bi + 1) * nk * d], nk, d),
                        &mut dq[bi * nq * d..(bi + 1) * nq * d],
                        false,
                    );
                    gemm(
                        MatRef::new(&dp, nq, nk).t(),
                        MatRef::new(&qv[bi * nq * d..(bi + 1) * nq * d], nq, d),
                        &mut dk[bi * nk * d..(bi + 1) * nk * d],
                        false,
                    );
                }
                self.accumulate(grads, *q, Tensor::new(qs, dq));
                self.accumulate(grads, *k, Tensor::new(ks, dk));
                self.accumulate(grads, *v, Tensor::new(vs, dvv));
            }
            Op::UnitNorm1 { x, norms } => {
                let s = self.value(*x).shape().to_vec();
                let (b, c) = (s[0], s[1]);
                let p = gy.len() / (b * c);
                let y = node.value.data();
                let mut dx = vec![E::zero(); gy.len()];
                for bi in 0..b {
                    for j in 0..p {
                        let mut dot = E::zero();
                        for ci in 0..c {
                            let idx = (bi * c + ci) * p + j;
                            dot += gy.data()[idx] * y[idx];
                        }
                        let nrm = norms[bi * p + j];
                        for ci in 0..c {
                            let idx = (bi * c + ci) * p + j;
                            dx[idx] = (gy.data()[idx] - y[idx] * dot) / nrm;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(s, dx));
            }
            Op::MatMulNT(a, b) => {
                let (sa, sb) = (self.value(*a).shape().to_vec(), self.value(*b).shape().to_vec());
                let (m, kk, nn) = (sa[0], sa[1], sb[0]);
                if self.needs(*a) {
                    let mut da = vec![E::zero(); m * kk];
                    gemm(MatRef::new(gy.data(), m, nn), MatRef::new(self.value(*b).data(), nn, kk), &mut da, false);
                    self.accumulate(grads, *a, Tensor::new(sa, da));
                }
                if self.needs(*b) {
                    let mut db = vec![E::zero(); nn * kk];
                    gemm(
                        MatRef::new(gy.data(), m, nn).t(),
                        MatRef::new(self.value(*a).data(), m, kk),
                        &mut db,
                        false,
                    );
                    self.accumulate(grads, *b, Tensor::new(sb, db));
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let s = self.value(*logits).shape().to_vec();
                let (n, k) = (s[0], s[1]);
                let scale = gy.item() / E::from_f64(n as f64);
                let mut g = probs.clone();
                for (i, &t) in targets.iter().enumerate() {
                    g[i * k + t] -= E::one();
                }
                g.iter_mut().for_each(|v| *v *= scale);
                self.accumulate(grads, *logits, Tensor::new(s, g));
            }
            Op::Mse(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                let c = E::from_f64(2.0) * gy.item() / E::from_f64(x.len() as f64);
                let diff = x.zip_map(y, |p, q| (p - q) * c);
                if self.needs(*b) {
                    self.accumulate(grads, *b, diff.map(|v| -v));
                }
                self.accumulate(grads, *a, diff);
            }
            Op::Mean(a) => {
                let x = self.value(*a);
                let g = gy.item() / E::from_f64(x.len() as f64);
                self.accumulate(grads, *a, Tensor::full(x.shape().to_vec(), g));
            }
        }
    }

    fn backward_conv(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: &ConvGeom,
        gy: &Tensor<E>,
        grads: &mut [Option<Tensor<E>>],
    ) {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let (batch, cin, cout) = (xs[0], xs[1], ws[0]);
        let (p_in, p_out) = (geom.p_in(), geom.p_out());
        let ckk = cin * geom.taps;
        if let Some(b) = b {
            if self.needs(b) {
                let mut db = vec![E::zero(); cout];
                for (i, chunk) in gy.data().chunks(p_out).enumerate() {
                    db[i % cout] += chunk.iter().copied().sum::<E>();
                }
                self.accumulate(grads, b, Tensor::new(vec![cout], db));
            }
        }
        let need_w = self.needs(w);
        let need_x = self.needs(x);
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut dw = if need_w { vec![E::zero(); cout * ckk] } else { Vec::new() };
        let mut dx = if need_x { vec![E::zero(); xv.len()] } else { Vec::new() };
        let pointwise = geom.is_pointwise();
        let mut col = if pointwise { Vec::new() } else { vec![E::zero(); ckk * p_out] };
        let mut dcol = if need_x && !pointwise { vec![E::zero(); ckk * p_out] } else { Vec::new() };
        for bi in 0..batch {
            let gb = &gy.data()[bi * cout * p_out..(bi + 1) * cout * p_out];
            let xb = &xv[bi * cin * p_in..(bi + 1) * cin * p_in];
            if need_w {
                let rhs: &[E] = if pointwise {
                    xb
                } else {
                    geom.im2col(xb, cin, &mut col);
                    &col
                };
                gemm(MatRef::new(gb, cout, p_out), MatRef::new(rhs, ckk, p_out).t(), &mut dw, true);
            }
            if need_x {
                let dxb = &mut dx[bi * cin * p_in..(bi + 1) * cin * p_in];
                if pointwise {
                    gemm(MatRef::new(wv, cout, ckk).t(), MatRef::new(gb, cout, p_out), dxb, false);
                } else {
                    gemm(MatRef::new(wv, cout, ckk).t(), MatRef::new(gb, cout, p_out), &mut dcol, false);
                    geom.col2im(&dcol, cin, dxb);
                }
            }
        }
        if need_w {
            self.accumulate(grads, w, Tensor::new(ws, dw));
        }
        if need_x {
            self.accumulate(grads, x, Tensor::new(xs, dx));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Central finite differences of `f` against the analytic gradient for
    /// every input element, relative to the largest gradient of that input.
    fn check_grads(
        inputs: Vec<Tensor<f64>>,
        f: impl Fn(&mut Graph<f64>, &[Var]) -> Var,
    ) -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
        let out = f(&mut g, &vars);
        let grads = g.backward(out);
        let analytic: Vec<Tensor<f64>> = vars
            .iter()
            .zip(&inputs)
            .map(|(v, t)| grads.of(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
            .collect();
        let eval = |ins: &[Tensor<f64>]| {
            let mut g = Graph::<f64>::inference();
            let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
            let out = f(&mut g, &vars);
            g.value(out).item()
        };
        let h = 1e-6;
        let mut worst = 0.0f64;
        for (ii, t) in inputs.iter().enumerate() {
            let scale = analytic[ii].data().iter().fold(1e-8f64, |m, v| m.max(v.abs()));
            for j in 0..t.len() {
                let mut plus = inputs.clone();
                plus[ii].data_mut()[j] += h;
                let mut minus = inputs.clone();
                minus[ii].data_mut()[j] -= h;
                let num = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let ana = analytic[ii].data()[j];
                let err = (num - ana).abs() / scale;
                worst = worst.max(err);
            }
        }
        worst
    }

    /// Reduce any node to a scalar through a fixed random projection so the
    /// check exercises non-uniform upstream gradients.
    fn project(g: &mut Graph<f64>, v: Var, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = g.shape(v).to_vec();
        let r = rand_tensor(&mut rng, shape);
        let c = g.constant(r);
        let m = g.mul(v, c);
        g.mean(m)
    }

    #[test]
    fn conv_gradients_2d_and_3d() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (dims, stride) in [(2usize, 1usize), (2, 2), (3, 1), (3, 2)] {
            let mut xs = vec![2, 3];
            xs.extend(vec![4; dims]);
            let mut ws = vec![2, 3];
            ws.extend(vec![3; dims]);
            let x = rand_tensor(&mut rng, xs);
            let w = rand_tensor(&mut rng, ws);
            let b = rand_tensor(&mut rng, vec![2]);
            let err = check_grads(vec![x, w, b], |g, v| {
                let y = g.conv(v[0], v[1], Some(v[2]), stride, 1);
                project(g, y, 1)
            });
            assert!(err < 1e-6, "dims {dims} stride {stride}: {err}");
        }
    }

    #[test]
    fn pointwise_conv_matches_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, vec![1, 3, 2, 2]);
        let w = rand_tensor(&mut rng, vec![2, 3, 1, 1]);
        let mut g = Graph::inference();
        let xv = g.constant(x.clone());
        let wv = g.constant(w.clone());
        let y = g.conv(xv, wv, None, 1, 0);
        for o in 0..2 {
            for p in 0..4 {
                let want: f64 = (0..3).map(|c| w.data()[o * 3 + c] * x.data()[c * 4 + p]).sum();
                assert!((g.value(y).data()[o * 4 + p] - want).abs() < 1e-12);
            }
        }
        let err = check_grads(vec![x, w], |g, v| {
            let y = g.conv(v[0], v[1], None, 1, 0);
            project(g, y, 2)
        });
        assert!(err < 1e-6);
    }

    #[test]
    fn group_norm_and_silu_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, vec![2, 4, 3, 3]);
        let ga = rand_tensor(&mut rng, vec![4]);
        let be = rand_tensor(&mut rng, vec![4]);
        let err = check_grads(vec![x, ga, be], |g, v| {
            let y = g.group_norm(v[0], v[1], v[2], 2);
            let y = g.silu(y);
            project(g, y, 3)
        });
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn attention_gradients_with_key_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = rand_tensor(&mut rng, vec![2, 3, 4]);
        let k = rand_tensor(&mut rng, vec![2, 5, 4]);
        let v = rand_tensor(&mut rng, vec![2, 5, 2]);
        let err = check_grads(vec![q, k, v], |g, vars| {
            let y = g.attention(vars[0], vars[1], vars[2], Some(vec![5, 2]));
            project(g, y, 4)
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn masked_keys_receive_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = Graph::new();
        let q = g.variable(rand_tensor(&mut rng, vec![1, 2, 3]));
        let k = g.variable(rand_tensor(&mut rng, vec![1, 4, 3]));
        let v = g.variable(rand_tensor(&mut rng, vec![1, 4, 3]));
        let y = g.attention(q, k, v, Some(vec![2]));
        let l = project(&mut g, y, 5);
        let grads = g.backward(l);
        let dk = grads.of(k).unwrap();
        assert!(dk.data()[6..].iter().all(|&e| e == 0.0));
        assert!(grads.of(v).unwrap().data()[6..].iter().all(|&e| e == 0.0));
    }

    #[test]
    fn structural_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_tensor(&mut rng, vec![2, 2, 2, 2]);
        let b = rand_tensor(&mut rng, vec![2, 3, 2, 2]);
        let tv = rand_tensor(&mut rng, vec![2, 5]);
        let err = check_grads(vec![a, b, tv], |g, v| {
            let c = g.concat1(v[0], v[1]);
            let up = g.upsample2(c);
            let n = g.narrow1(up, 1, 3);
            let n = g.reshape(n, vec![2, 3, 16]);
            let t = g.transpose12(n);
            let t = g.reshape(t, vec![2, 16, 3]);
            let pooled = g.mean_spatial(c);
            let e = g.add_channel(c, v[2]);
            let un = g.unit_norm1(e);
            let s1 = project(g, t, 6);
            let s2 = project(g, pooled, 7);
            let s3 = project(g, un, 8);
            let s = g.add(s1, s2);
            g.add(s, s3)
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn linear_losses_and_elementwise_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, vec![3, 4]);
        let w = rand_tensor(&mut rng, vec![5, 4]);
        let b = rand_tensor(&mut rng, vec![5]);
        let t = rand_tensor(&mut rng, vec![3, 5]);
        let table = rand_tensor(&mut rng, vec![4, 4]);
        let err = check_grads(vec![x, w, b, t, table], |g, v| {
            let y = g.linear(v[0], v[1], Some(v[2]));
            let ce = g.cross_entropy(y, &[0, 4, 2]);
            let m = g.mse(y, v[3]);
            let e = g.exp(v[3]);
            let sq = g.square(e);
            let mm = g.mean(sq);
            let sim = g.matmul_nt(v[0], v[0]);
            let s = project(g, sim, 9);
            let emb = g.embedding(v[4], &[1, 3, 1]);
            let ps = g.mul_per_sample(emb, vec![0.5, -1.0, 2.0]);
            let se = project(g, ps, 10);
            let sc = g.scale(m, 0.3);
            let d = g.sub(ce, sc);
            let d = g.add(d, mm);
            let d = g.add(d, s);
            let d = g.add_scalar(d, 1.0);
            g.add(d, se)
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn frozen_store_gets_no_gradient() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::full(vec![2], 0.5));
        let mut g = Graph::new();
        g.freeze(&store);
        let w = g.param(&store, id);
        let x = g.variable(Tensor::full(vec![2], 2.0));
        let y = g.mul(w, x);
        let l = g.mean(y);
        let grads = g.backward(l);
        assert!(grads.for_store(&store)[0].is_none());
        assert_eq!(grads.of(x).unwrap().data(), &[0.25, 0.25]);
    }

    #[test]
    fn inference_graph_records_nothing() {
        let mut store = ParamStore::<f32>::new();
        let id = store.add("w", Tensor::full(vec![2], 0.5));
        let mut g = Graph::inference();
        let w = g.param(&store, id);
        let y = g.square(w);
        let l = g.mean(y);
        assert!((g.value(l).item() - 0.25).abs() < 1e-7);
        let grads = g.backward(l);
        assert!(grads.for_store(&store)[0].is_none());
    }
}
