//! Tape-based reverse-mode differentiation over matrices.
//!
//! A [`Graph`] records every operation of one forward pass; [`Graph::backward`]
//! walks the tape in reverse. Operations are coarse (fused attention, fused
//! losses) so the tape stays short and the hot loops stay in plain slices.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::real::{axpy, dot, Real};
use crate::tensor::{matmul_at_acc, matmul_bt_into, matmul_into, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Var(usize);

/// Batch of equal-length sequences laid out as `batch * seq` consecutive rows.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqLayout {
    pub batch: usize,
    pub seq: usize,
    /// `false` marks a slot no query may attend to.
    pub key_mask: Vec<bool>,
}

impl SeqLayout {
    pub fn dense(batch: usize, seq: usize) -> Self {
        SeqLayout { batch, seq, key_mask: vec![true; batch * seq] }
    }

    pub fn rows(&self) -> usize {
        self.batch * self.seq
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalpSpec {
    pub tau: f64,
    pub alpha: f64,
    pub include_positive: bool,
}

enum Op<R> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Scale(Var, R),
    MulConst(Var, Tensor<R>),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<R>, rstd: Vec<R> },
    Attention { q: Var, k: Var, v: Var, heads: usize, layout: SeqLayout, probs: Vec<R> },
    Gather { src: Var, idx: Vec<usize> },
    ConcatRows(Vec<Var>),
    L2Normalize { x: Var, norms: Vec<R> },
    SegmentMean { x: Var, segments: Vec<Vec<usize>> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<R> },
    Mse { pred: Var, target: Tensor<R> },
    BceLogits { logits: Var, labels: Vec<R> },
    Calp { ut: Var, ut1: Var, v: Var, spec: CalpSpec },
}

struct Node<R> {
    value: Option<Tensor<R>>,
    op: Op<R>,
    needs_grad: bool,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;
const NORMALIZE_EPS: f64 = 1e-12;

pub struct Graph<'s, R: Real> {
    store: &'s ParamStore<R>,
    nodes: Vec<Node<R>>,
    bound: BTreeMap<ParamId, Var>,
    frozen: Vec<String>,
}

/// Gradients for every node of a finished backward pass.
pub struct Gradients<R> {
    grads: Vec<Option<Tensor<R>>>,
    params: Vec<(Var, ParamId)>,
    n_params: usize,
}

impl<R: Real> Gradients<R> {
    pub fn of(&self, v: Var) -> Option<&Tensor<R>> {
        self.grads[v.0].as_ref()
    }

    pub fn params(&self) -> ParamGrads<R> {
        let mut out = ParamGrads::empty(self.n_params);
        for &(v, id) in &self.params {
            if let Some(g) = &self.grads[v.0] {
                out.set(id, g.clone());
            }
        }
        out
    }
}

impl<'s, R: Real> Graph<'s, R> {
    pub fn new(store: &'s ParamStore<R>) -> Self {
        Graph { store, nodes: Vec::new(), bound: BTreeMap::new(), frozen: Vec::new() }
    }

    /// Parameters whose name starts with one of `prefixes` are bound as constants.
    pub fn with_frozen(mut self, prefixes: &[&str]) -> Self {
        self.frozen = prefixes.iter().map(|s| String::from(*s)).collect();
        self
    }

    pub fn store(&self) -> &ParamStore<R> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        let node = &self.nodes[v.0];
        match (&node.op, &node.value) {
            (Op::Param(id), _) => self.store.get(*id),
            (_, Some(t)) => t,
            _ => unreachable!("node without value"),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<R>, op: Op<R>, needs_grad: bool) -> Var {
        debug_assert!(value.all_finite(), "non-finite value produced by graph op");
        self.nodes.push(Node { value: Some(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<R>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is kept and can be read back from [`Gradients::of`].
    pub fn input(&mut self, t: Tensor<R>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let name = self.store.name(id);
        let trainable = !self.frozen.iter().any(|p| name.starts_with(p.as_str()));
        self.nodes.push(Node { value: None, op: Op::Param(id), needs_grad: trainable });
        let v = Var(self.nodes.len() - 1);
        self.bound.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, k) = (ta.rows(), ta.cols());
        assert_eq!(tb.rows(), k, "matmul inner dimension mismatch");
        let m = tb.cols();
        let mut out = vec![R::zero(); n * m];
        matmul_into(ta.data(), tb.data(), &mut out, n, k, m, false);
        let ng = self.needs(a) || self.needs(b);
        self.push(Tensor::new(&[n, m], out), Op::MatMul(a, b), ng)
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let (tx, tb) = (self.value(x), self.value(b));
        let m = tx.cols();
        assert_eq!(tb.len(), m, "bias length mismatch");
        let mut out = tx.clone();
        for r in out.data_mut().chunks_mut(m) {
            for (o, &bv) in r.iter_mut().zip(tb.data()) {
                *o += bv;
            }
        }
        let ng = self.needs(x) || self.needs(b);
        self.push(out, Op::AddBias(x, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.len(), tb.len(), "add shape mismatch");
        let mut out = ta.clone();
        out.add_assign(tb);
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn scale(&mut self, x: Var, s: R) -> Var {
        let out = self.value(x).map(|v| v * s);
        let ng = self.needs(x);
        self.push(out, Op::Scale(x, s), ng)
    }

    /// Elementwise product with a constant tensor (dropout masks, row masks).
    pub fn mul_const(&mut self, x: Var, c: Tensor<R>) -> Var {
        let tx = self.value(x);
        assert_eq!(tx.len(), c.len(), "mul_const shape mismatch");
        let data = tx.data().iter().zip(c.data()).map(|(&a, &b)| a * b).collect();
        let out = Tensor::new(tx.shape(), data);
        let ng = self.needs(x);
        self.push(out, Op::MulConst(x, c), ng)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        let ng = self.needs(x);
        self.push(out, Op::Gelu(x), ng)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let d = tx.cols();
        assert_eq!(tg.len(), d);
        assert_eq!(tb.len(), d);
        let rows = tx.rows();
        let mut xhat = vec![R::zero(); rows * d];
        let mut rstd = vec![R::zero(); rows];
        let mut out = vec![R::zero(); rows * d];
        let inv_d = R::one() / R::of(d as f64);
        let eps = R::of(LAYER_NORM_EPS);
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().copied().sum::<R>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<R>() * inv_d;
            let rs = R::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(Tensor::new(tx.shape(), out), Op::LayerNorm { x, gamma, beta, xhat, rstd }, ng)
    }

    /// Multi-head scaled dot-product self-attention over pre-projected q, k, v.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, layout: &SeqLayout) -> Var {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let d = tq.cols();
        assert_eq!(tq.rows(), layout.rows(), "attention rows vs layout");
        assert_eq!(tk.shape(), tq.shape());
        assert_eq!(tv.shape(), tq.shape());
        assert_eq!(d % heads, 0, "d_model not divisible by heads");
        let dh = d / heads;
        let s = layout.seq;
        let scale = R::one() / R::of(dh as f64).sqrt();
        let mut probs = vec![R::zero(); layout.batch * heads * s * s];
        let mut out = vec![R::zero(); layout.rows() * d];
        let mut scores = vec![R::zero(); s];
        for b in 0..layout.batch {
            let mask = &layout.key_mask[b * s..(b + 1) * s];
            for h in 0..heads {
                let off = h * dh;
                for i in 0..s {
                    let qi = &tq.data()[(b * s + i) * d + off..(b * s + i) * d + off + dh];
                    let mut mx = R::neg_infinity();
                    for j in 0..s {
                        if mask[j] {
                            let kj = &tk.data()[(b * s + j) * d + off..(b * s + j) * d + off + dh];
                            let sc = dot(qi, kj) * scale;
                            scores[j] = sc;
                            if sc > mx {
                                mx = sc;
                            }
                        }
                    }
                    let p = &mut probs[((b * heads + h) * s + i) * s..((b * heads + h) * s + i + 1) * s];
                    let mut z = R::zero();
                    for j in 0..s {
                        if mask[j] {
                            let e = (scores[j] - mx).exp();
                            p[j] = e;
                            z += e;
                        }
                    }
                    let oi = &mut out[(b * s + i) * d + off..(b * s + i) * d + off + dh];
                    for j in 0..s {
                        if mask[j] {
                            p[j] /= z;
                            let vj = &tv.data()[(b * s + j) * d + off..(b * s + j) * d + off + dh];
                            axpy(p[j], vj, oi);
                        }
                    }
                }
            }
        }
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        let shape = tq.shape().to_vec();
        self.push(
            Tensor::new(&shape, out),
            Op::Attention { q, k, v, heads, layout: layout.clone(), probs },
            ng,
        )
    }

    /// Row gather: embedding lookup when `src` is a table, row selection otherwise.
    pub fn gather(&mut self, src: Var, idx: &[usize]) -> Var {
        let ts = self.value(src);
        let d = ts.cols();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            assert!(i < ts.rows(), "gather index {i} out of range {}", ts.rows());
            out.extend_from_slice(ts.row(i));
        }
        let ng = self.needs(src);
        self.push(Tensor::new(&[idx.len(), d], out), Op::Gather { src, idx: idx.to_vec() }, ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let d = self.value(parts[0]).cols();
        let mut out = Vec::new();
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), d, "concat_rows column mismatch");
            out.extend_from_slice(t.data());
        }
        let rows = out.len() / d;
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(Tensor::new(&[rows, d], out), Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let d = tx.cols();
        let mut norms = Vec::with_capacity(tx.rows());
        let mut out = tx.clone();
        for r in 0..tx.rows() {
            let row = tx.row(r);
            let n = dot(row, row).sqrt().max(R::of(NORMALIZE_EPS));
            norms.push(n);
            for v in &mut out.data_mut()[r * d..(r + 1) * d] {
                *v /= n;
            }
        }
        let ng = self.needs(x);
        self.push(out, Op::L2Normalize { x, norms }, ng)
    }

    /// Output row g is the mean of the rows of `x` listed in `segments[g]`.
    pub fn segment_mean(&mut self, x: Var, segments: Vec<Vec<usize>>) -> Var {
        let tx = self.value(x);
        let d = tx.cols();
        let mut out = vec![R::zero(); segments.len() * d];
        for (g, seg) in segments.iter().enumerate() {
            assert!(!seg.is_empty(), "empty pooling segment");
            let w = R::one() / R::of(seg.len() as f64);
            for &r in seg {
                axpy(w, tx.row(r), &mut out[g * d..(g + 1) * d]);
            }
        }
        let ng = self.needs(x);
        self.push(Tensor::new(&[segments.len(), d], out), Op::SegmentMean { x, segments }, ng)
    }

    /// Mean softmax cross-entropy of each logits row against its target id.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let tl = self.value(logits);
        let (n, c) = (tl.rows(), tl.cols());
        assert_eq!(n, targets.len(), "cross_entropy target count");
        assert!(n > 0, "cross_entropy on empty set");
        let mut probs = vec![R::zero(); n * c];
        let mut total = R::zero();
        for i in 0..n {
            let row = tl.row(i);
            let mx = row.iter().copied().fold(R::neg_infinity(), R::max);
            let mut z = R::zero();
            for j in 0..c {
                let e = (row[j] - mx).exp();
                probs[i * c + j] = e;
                z += e;
            }
            for j in 0..c {
                probs[i * c + j] /= z;
            }
            assert!(targets[i] < c, "target id out of range");
            total += mx + z.ln() - row[targets[i]];
        }
        let loss = total / R::of(n as f64);
        let ng = self.needs(logits);
        self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, targets: targets.to_vec(), probs }, ng)
    }

    /// Mean squared error averaged over every element.
    pub fn mse(&mut self, pred: Var, target: Tensor<R>) -> Var {
        let tp = self.value(pred);
        assert_eq!(tp.len(), target.len(), "mse shape mismatch");
        assert!(!target.is_empty());
        let s: R = tp.data().iter().zip(target.data()).map(|(&a, &b)| (a - b) * (a - b)).sum();
        let loss = s / R::of(target.len() as f64);
        let ng = self.needs(pred);
        self.push(Tensor::scalar(loss), Op::Mse { pred, target }, ng)
    }

    /// Mean binary cross-entropy with logits over every element, in the
    /// stable `max(z,0) - z*y + ln(1 + e^{-|z|})` form.
    pub fn bce_logits(&mut self, logits: Var, labels: &[R]) -> Var {
        let tl = self.value(logits);
        assert_eq!(tl.len(), labels.len(), "bce label count");
        let s: R = tl.data().iter().zip(labels).map(|(&z, &y)| bce_term(z, y)).sum();
        let loss = s / R::of(labels.len() as f64);
        let ng = self.needs(logits);
        self.push(Tensor::scalar(loss), Op::BceLogits { logits, labels: labels.to_vec() }, ng)
    }

    /// Composite contrastive loss over unit-norm rows; see [`crate::calp`].
    pub fn calp(&mut self, ut: Var, ut1: Var, v: Var, spec: CalpSpec) -> Var {
        let (a, b, c) = (self.value(ut), self.value(ut1), self.value(v));
        assert_eq!(a.shape(), b.shape());
        assert_eq!(a.shape(), c.shape());
        let per = crate::calp::per_sample_losses(a.data(), b.data(), c.data(), a.rows(), a.cols(), &spec);
        let loss = per.iter().copied().sum::<R>() / R::of(per.len() as f64);
        let ng = self.needs(ut) || self.needs(ut1) || self.needs(v);
        self.push(Tensor::scalar(loss), Op::Calp { ut, ut1, v, spec }, ng)
    }

    pub fn backward(&self, loss: Var) -> Gradients<R> {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<R>>> = (0..n).map(|_| None).collect();
        assert_eq!(self.value(loss).len(), 1, "backward from non-scalar");
        grads[loss.0] = Some(Tensor::scalar(R::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let g = match &self.nodes[i].op {
                Op::Leaf | Op::Param(_) => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.backward_node(i, &g, &mut grads);
        }
        Gradients {
            grads,
            params: self.bound.iter().map(|(&id, &v)| (v, id)).collect(),
            n_params: self.store.len(),
        }
    }

    fn backward_node(&self, i: usize, g: &Tensor<R>, grads: &mut [Option<Tensor<R>>]) {
        let out = self.nodes[i].value.as_ref().unwrap();
        match &self.nodes[i].op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
                if self.needs(*a) {
                    let ga = slot(grads, *a, ta.shape());
                    matmul_bt_into(g.data(), tb.data(), ga.data_mut(), n, m, k, true);
                }
                if self.needs(*b) {
                    let gb = slot(grads, *b, tb.shape());
                    matmul_at_acc(ta.data(), g.data(), gb.data_mut(), n, k, m);
                }
            }
            Op::AddBias(x, b) => {
                if self.needs(*x) {
                    slot(grads, *x, g.shape()).add_assign(g);
                }
                if self.needs(*b) {
                    let tb = self.value(*b);
                    let gb = slot(grads, *b, tb.shape());
                    let m = tb.len();
                    for r in g.data().chunks(m) {
                        for (o, &v) in gb.data_mut().iter_mut().zip(r) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for x in [*a, *b] {
                    if self.needs(x) {
                        let shape = self.value(x).shape().to_vec();
                        slot(grads, x, &shape).add_assign(g);
                    }
                }
            }
            Op::Scale(x, s) => {
                if self.needs(*x) {
                    let gx = slot(grads, *x, g.shape());
                    axpy(*s, g.data(), gx.data_mut());
                }
            }
            Op::MulConst(x, c) => {
                if self.needs(*x) {
                    let gx = slot(grads, *x, g.shape());
                    for ((o, &gv), &cv) in gx.data_mut().iter_mut().zip(g.data()).zip(c.data()) {
                        *o += gv * cv;
                    }
                }
            }
            Op::Gelu(x) => {
                if self.needs(*x) {
                    let tx = self.value(*x);
                    let gx = slot(grads, *x, tx.shape());
                    for ((o, &gv), &xv) in gx.data_mut().iter_mut().zip(g.data()).zip(tx.data()) {
                        *o += gv * gelu_grad(xv);
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let tg = self.value(*gamma);
                let d = tg.len();
                let rows = g.rows();
                if self.needs(*gamma) {
                    let gg = slot(grads, *gamma, tg.shape());
                    for r in 0..rows {
                        for j in 0..d {
                            gg.data_mut()[j] += g.data()[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if self.needs(*beta) {
                    let gb = slot(grads, *beta, tg.shape());
                    for r in 0..rows {
                        for j in 0..d {
                            gb.data_mut()[j] += g.data()[r * d + j];
                        }
                    }
                }
                if self.needs(*x) {
                    let gx = slot(grads, *x, g.shape());
                    let inv_d = R::one() / R::of(d as f64);
                    let mut dxhat = vec![R::zero(); d];
                    for r in 0..rows {
                        let mut s1 = R::zero();
                        let mut s2 = R::zero();
                        for j in 0..d {
                            let dh = g.data()[r * d + j] * tg.data()[j];
                            dxhat[j] = dh;
                            s1 += dh;
                            s2 += dh * xhat[r * d + j];
                        }
                        for j in 0..d {
                            gx.data_mut()[r * d + j] +=
                                rstd[r] * (dxhat[j] - s1 * inv_d - xhat[r * d + j] * s2 * inv_d);
                        }
                    }
                }
            }
            Op::Attention { q, k, v, heads, layout, probs } => {
                self.attention_backward(*q, *k, *v, *heads, layout, probs, g, grads);
            }
            Op::Gather { src, idx } => {
                if self.needs(*src) {
                    let shape = self.value(*src).shape().to_vec();
                    let gs = slot(grads, *src, &shape);
                    let d = g.cols();
                    for (r, &i) in idx.iter().enumerate() {
                        axpy(R::one(), g.row(r), &mut gs.data_mut()[i * d..(i + 1) * d]);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let shape = self.value(p).shape().to_vec();
                    let len = self.value(p).len();
                    if self.needs(p) {
                        let gp = slot(grads, p, &shape);
                        axpy(R::one(), &g.data()[offset..offset + len], gp.data_mut());
                    }
                    offset += len;
                }
            }
            Op::L2Normalize { x, norms } => {
                if self.needs(*x) {
                    let d = g.cols();
                    let gx = slot(grads, *x, g.shape());
                    for r in 0..g.rows() {
                        let y = out.row(r);
                        let gr = g.row(r);
                        let yg = dot(y, gr);
                        for j in 0..d {
                            gx.data_mut()[r * d + j] += (gr[j] - y[j] * yg) / norms[r];
                        }
                    }
                }
            }
            Op::SegmentMean { x, segments } => {
                if self.needs(*x) {
                    let shape = self.value(*x).shape().to_vec();
                    let gx = slot(grads, *x, &shape);
                    let d = g.cols();
                    for (s, seg) in segments.iter().enumerate() {
                        let w = R::one() / R::of(seg.len() as f64);
                        for &r in seg {
                            axpy(w, g.row(s), &mut gx.data_mut()[r * d..(r + 1) * d]);
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                if self.needs(*logits) {
                    let tl = self.value(*logits);
                    let (n, c) = (tl.rows(), tl.cols());
                    let gl = slot(grads, *logits, tl.shape());
                    let w = g.item() / R::of(n as f64);
                    for r in 0..n {
                        for j in 0..c {
                            let mut p = probs[r * c + j];
                            if j == targets[r] {
                                p -= R::one();
                            }
                            gl.data_mut()[r * c + j] += w * p;
                        }
                    }
                }
            }
            Op::Mse { pred, target } => {
                if self.needs(*pred) {
                    let tp = self.value(*pred);
                    let gp = slot(grads, *pred, tp.shape());
                    let w = g.item() * R::of(2.0) / R::of(target.len() as f64);
                    for ((o, &a), &b) in gp.data_mut().iter_mut().zip(tp.data()).zip(target.data()) {
                        *o += w * (a - b);
                    }
                }
            }
            Op::BceLogits { logits, labels } => {
                if self.needs(*logits) {
                    let tl = self.value(*logits);
                    let gl = slot(grads, *logits, tl.shape());
                    let w = g.item() / R::of(labels.len() as f64);
                    for ((o, &z), &y) in gl.data_mut().iter_mut().zip(tl.data()).zip(labels) {
                        *o += w * (sigmoid(z) - y);
                    }
                }
            }
            Op::Calp { ut, ut1, v, spec } => {
                let (a, b, c) = (self.value(*ut), self.value(*ut1), self.value(*v));
                let (m, d) = (a.rows(), a.cols());
                let (ga, gb, gc) =
                    crate::calp::per_sample_grads(a.data(), b.data(), c.data(), m, d, spec, g.item());
                for (var, gt) in [(*ut, ga), (*ut1, gb), (*v, gc)] {
                    if self.needs(var) {
                        let s = slot(grads, var, &[m, d]);
                        axpy(R::one(), &gt, s.data_mut());
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        layout: &SeqLayout,
        probs: &[R],
        g: &Tensor<R>,
        grads: &mut [Option<Tensor<R>>],
    ) {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let d = tq.cols();
        let dh = d / heads;
        let s = layout.seq;
        let scale = R::one() / R::of(dh as f64).sqrt();
        let rows = layout.rows();
        let mut gq = vec![R::zero(); rows * d];
        let mut gk = vec![R::zero(); rows * d];
        let mut gv = vec![R::zero(); rows * d];
        let mut dp = vec![R::zero(); s];
        for b in 0..layout.batch {
            let mask = &layout.key_mask[b * s..(b + 1) * s];
            for h in 0..heads {
                let off = h * dh;
                for i in 0..s {
                    let p = &probs[((b * heads + h) * s + i) * s..((b * heads + h) * s + i + 1) * s];
                    let go = &g.data()[(b * s + i) * d + off..(b * s + i) * d + off + dh];
                    let mut sum = R::zero();
                    for j in 0..s {
                        if mask[j] {
                            let vj = &tv.data()[(b * s + j) * d + off..(b * s + j) * d + off + dh];
                            dp[j] = dot(go, vj);
                            sum += p[j] * dp[j];
                            axpy(p[j], go, &mut gv[(b * s + j) * d + off..(b * s + j) * d + off + dh]);
                        }
                    }
                    let qi_off = (b * s + i) * d + off;
                    for j in 0..s {
                        if mask[j] {
                            let ds = p[j] * (dp[j] - sum) * scale;
                            if ds == R::zero() {
                                continue;
                            }
                            let kj_off = (b * s + j) * d + off;
                            axpy(ds, &tk.data()[kj_off..kj_off + dh], &mut gq[qi_off..qi_off + dh]);
                            axpy(ds, &tq.data()[qi_off..qi_off + dh], &mut gk[kj_off..kj_off + dh]);
                        }
                    }
                }
            }
        }
        let shape = tq.shape().to_vec();
        for (var, buf) in [(q, gq), (k, gk), (v, gv)] {
            if self.needs(var) {
                let sl = slot(grads, var, &shape);
                axpy(R::one(), &buf, sl.data_mut());
            }
        }
    }
}

fn slot<'a, R: Real>(grads: &'a mut [Option<Tensor<R>>], v: Var, shape: &[usize]) -> &'a mut Tensor<R> {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape))
}

/// Exact (erf-based) GeLU.
#[inline]
pub fn gelu<R: Real>(x: R) -> R {
    R::of(0.5) * x * (R::one() + (x * R::of(core::f64::consts::FRAC_1_SQRT_2)).erf())
}

#[inline]
pub fn gelu_grad<R: Real>(x: R) -> R {
    let cdf = R::of(0.5) * (R::one() + (x * R::of(core::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * R::of(0.5)).exp() * R::of(0.398_942_280_401_432_7);
    cdf + x * pdf
}

#[inline]
pub fn sigmoid<R: Real>(z: R) -> R {
    if z >= R::zero() {
        R::one() / (R::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (R::one() + e)
    }
}

#[inline]
pub fn bce_term<R: Real>(z: R, y: R) -> R {
    z.max(R::zero()) - z * y + (-z.abs()).exp().ln_1p()
}
