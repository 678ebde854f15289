//! Reverse-mode differentiation over a linear tape of 2-D tensor operations.
//!
//! Every operation records its inputs and whatever forward state its
//! backward rule needs. `backward` walks the tape once in reverse.

use std::collections::HashMap;
use std::sync::Arc;

use super::{gemm, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::graph::EdgeIndex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Smallest positive double; softplus never returns 0, even where `e^x` underflows.
pub const SOFTPLUS_FLOOR: f64 = 5e-324;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Softplus,
    Elu,
    LeakyRelu(f64),
    Exp,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Softplus => (x.max(0.0) + (-x.abs()).exp().ln_1p()).max(SOFTPLUS_FLOOR),
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Activation::LeakyRelu(slope) => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Activation::Exp => x.exp(),
        }
    }

    /// Derivative at input `x` given the forward output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Softplus => {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            }
            Activation::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    y + 1.0
                }
            }
            Activation::LeakyRelu(slope) => {
                if x > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Exp => y,
        }
    }
}

struct GatState {
    left: Var,
    right: Var,
    value: Var,
    edge_weight: Var,
    attention: Var,
    edges: Arc<EdgeIndex>,
    heads: usize,
    slope: f64,
    alpha: Vec<f64>,
}

enum Op {
    Input,
    Param,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Act(Var, Activation),
    GatherRows(Var, Arc<Vec<usize>>),
    Concat(Vec<Var>),
    MeanPool(Var, usize),
    Column(Var, usize),
    Affine(Var, f64),
    SegmentSoftmax(Var, Arc<EdgeIndex>),
    Gat(Box<GatState>),
    CrpsMean(Var, Var, Arc<Vec<f64>>),
    Dot(Var, Arc<Tensor>),
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Gradients of one scalar with respect to every tape entry.
pub struct Grads {
    by_var: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Grads {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.by_var[v.0].as_ref()
    }

    /// Parameter gradients in ascending parameter order.
    pub fn param_grads(&self) -> Vec<(ParamId, &Tensor)> {
        let mut out: Vec<_> = self
            .params
            .iter()
            .filter_map(|&(id, v)| self.by_var[v.0].as_ref().map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| id.0);
        out
    }

    pub fn accumulate_into(&self, store: &mut ParamStore, scale: f64) {
        for (id, g) in self.param_grads() {
            store.get_mut(id).grad.scaled_add_assign(scale, g);
        }
    }
}

fn add_into(slot: &mut Option<Tensor>, t: Tensor) {
    match slot {
        Some(acc) => acc.add_assign(&t),
        None => *slot = Some(t),
    }
}

fn slot_mut<'a>(grads: &'a mut [Option<Tensor>], v: Var, shape: [usize; 2]) -> &'a mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape[0], shape[1]))
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    /// Bring a parameter onto the tape. Repeated calls return the same entry.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).value.clone(), Op::Param);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `x + b` with `b` a `1 x cols` row broadcast over rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(Error::Shape(format!("bias {:?} for input {:?}", bv.shape(), xv.shape())));
        }
        let mut out = xv.clone();
        let bias = bv.data().to_vec();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(&bias) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddBias(x, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "add {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = act.apply(*v));
        self.push(out, Op::Act(x, act))
    }

    /// Select rows (with repetition). The backward pass scatters into the
    /// selected rows only, which is what makes this an embedding lookup.
    pub fn gather_rows(&mut self, x: Var, rows: Arc<Vec<usize>>) -> Result<Var> {
        let n = self.value(x).rows();
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::Lookup(format!("row {bad} of a {n}-row table")));
        }
        let out = self.value(x).gather_rows(&rows);
        Ok(self.push(out, Op::GatherRows(x, rows)))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let out = Tensor::hcat(&refs)?;
        Ok(self.push(out, Op::Concat(parts.to_vec())))
    }

    /// Mean over consecutive groups of `group` rows. Each column is summed in
    /// sorted order, so the result does not depend on row order within a
    /// group down to the last bit.
    pub fn mean_pool(&mut self, x: Var, group: usize) -> Result<Var> {
        let xv = self.value(x);
        if group == 0 || xv.rows() % group != 0 {
            return Err(Error::Shape(format!("cannot pool {} rows in groups of {group}", xv.rows())));
        }
        let (n_groups, cols) = (xv.rows() / group, xv.cols());
        let mut out = Tensor::zeros(n_groups, cols);
        let inv = 1.0 / group as f64;
        let mut buf = vec![0.0; group];
        for g in 0..n_groups {
            for c in 0..cols {
                for (i, b) in buf.iter_mut().enumerate() {
                    *b = xv.get(g * group + i, c);
                }
                buf.sort_unstable_by(f64::total_cmp);
                out.set(g, c, buf.iter().sum::<f64>() * inv);
            }
        }
        Ok(self.push(out, Op::MeanPool(x, group)))
    }

    pub fn column(&mut self, x: Var, c: usize) -> Result<Var> {
        let xv = self.value(x);
        if c >= xv.cols() {
            return Err(Error::Shape(format!("column {c} of {} columns", xv.cols())));
        }
        let out = Tensor::column_vector(xv.column(c));
        Ok(self.push(out, Op::Column(x, c)))
    }

    /// `scale * x + shift` with constant scale and shift.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = scale * *v + shift);
        self.push(out, Op::Affine(x, scale))
    }

    /// Softmax over the incoming edges of every node, independently per column.
    /// `scores` has one row per edge in `edges` order.
    pub fn segment_softmax(&mut self, scores: Var, edges: Arc<EdgeIndex>) -> Result<Var> {
        let sv = self.value(scores);
        if sv.rows() != edges.len() {
            return Err(Error::Shape(format!("{} scores for {} edges", sv.rows(), edges.len())));
        }
        let out = segment_softmax_values(sv, &edges);
        Ok(self.push(out, Op::SegmentSoftmax(scores, edges)))
    }

    /// Fused multi-head GATv2 attention and aggregation.
    ///
    /// For edge `j -> i` and head `h` the score is
    /// `sum_k att[k] * leaky_relu(left[j,k] + right[i,k] + attr * edge_weight[k])`
    /// over the columns `k` of head `h`; scores are soft-maxed over the
    /// incoming edges of `i` and the output row `i` is the attention-weighted
    /// sum of `value[j]` restricted to each head's columns.
    #[allow(clippy::too_many_arguments)]
    pub fn gat_attention(
        &mut self,
        left: Var,
        right: Var,
        value: Var,
        edge_weight: Var,
        attention: Var,
        edges: Arc<EdgeIndex>,
        heads: usize,
        slope: f64,
    ) -> Result<Var> {
        let (l, r, v) = (self.value(left), self.value(right), self.value(value));
        let (we, att) = (self.value(edge_weight), self.value(attention));
        let c = l.cols();
        let n = edges.n_nodes();
        if heads == 0 || c % heads != 0 {
            return Err(Error::Shape(format!("{c} columns cannot be split into {heads} heads")));
        }
        for t in [l, r, v] {
            if t.shape() != [n, c] {
                return Err(Error::Shape(format!("attention input {:?}, expected [{n}, {c}]", t.shape())));
            }
        }
        if we.shape() != [1, c] || att.shape() != [1, c] {
            return Err(Error::Shape("attention vectors must be 1 x columns".into()));
        }
        for node in 0..n {
            assert!(!edges.incoming(node).is_empty(), "node {node} has no incoming edge");
        }
        let hd = c / heads;
        let (we, att) = (we.data(), att.data());
        let mut alpha = vec![0.0; edges.len() * heads];
        let mut out = Tensor::zeros(n, c);
        let mut x = vec![0.0; c];
        let mut w = vec![0.0; c];
        for d in 0..n {
            let range = edges.incoming(d);
            let rr = r.row(d);
            for e in range.clone() {
                let (lr, a) = (l.row(edges.src[e]), edges.attr[e]);
                for ((((xk, &lk), &rk), &wk), &ak) in x.iter_mut().zip(lr).zip(rr).zip(we).zip(att) {
                    *xk = ak * leaky(lk + rk + a * wk, slope);
                }
                for (sc, chunk) in alpha[e * heads..(e + 1) * heads].iter_mut().zip(x.chunks_exact(hd)) {
                    *sc = sum_lanes(chunk);
                }
            }
            softmax_segment(&mut alpha[range.start * heads..range.end * heads], heads);
            let o = out.row_mut(d);
            for e in range {
                expand(&alpha[e * heads..(e + 1) * heads], &mut w);
                for ((ok, &vk), &wk) in o.iter_mut().zip(v.row(edges.src[e])).zip(&w) {
                    *ok += wk * vk;
                }
            }
        }
        let state = GatState { left, right, value, edge_weight, attention, edges, heads, slope, alpha };
        Ok(self.push(out, Op::Gat(Box::new(state))))
    }

    /// Attention weights of the most recent use of a fused attention entry.
    pub fn attention_weights(&self, v: Var) -> Option<Tensor> {
        match &self.nodes[v.0].op {
            Op::Gat(st) => Tensor::from_vec(st.edges.len(), st.heads, st.alpha.clone()).ok(),
            _ => None,
        }
    }

    /// Mean closed-form Gaussian CRPS of the columns `mu`, `sigma` against `y`.
    pub fn crps_mean(&mut self, mu: Var, sigma: Var, y: Arc<Vec<f64>>) -> Result<Var> {
        let (m, s) = (self.value(mu), self.value(sigma));
        if m.cols() != 1 || s.shape() != m.shape() || m.rows() != y.len() || y.is_empty() {
            return Err(Error::Shape(format!(
                "crps over mu {:?}, sigma {:?}, {} observations",
                m.shape(),
                s.shape(),
                y.len()
            )));
        }
        let mut total = 0.0;
        for i in 0..y.len() {
            total += crate::metrics::crps_gaussian(m.data()[i], s.data()[i], y[i])?;
        }
        let out = Tensor::scalar(total / y.len() as f64);
        Ok(self.push(out, Op::CrpsMean(mu, sigma, y)))
    }

    /// `sum(weights * x)` as a scalar.
    pub fn dot(&mut self, x: Var, weights: Arc<Tensor>) -> Result<Var> {
        if self.value(x).shape() != weights.shape() {
            return Err(Error::Shape("dot of differently shaped tensors".into()));
        }
        let s = self.value(x).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        Ok(self.push(Tensor::scalar(s), Op::Dot(x, weights)))
    }

    /// Gradients of the scalar `loss` with respect to everything on the tape.
    /// Fails if the loss or any parameter gradient is not finite.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let lv = self.value(loss);
        if lv.shape() != [1, 1] {
            return Err(Error::Shape(format!("backward from a {:?} tensor", lv.shape())));
        }
        if !lv.is_finite() {
            return Err(Error::NonFinite(format!("loss is {}", lv.data()[0])));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input | Op::Param => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    let ga = slot_mut(&mut grads, *a, av.shape());
                    gemm(m, n, k, g.data(), false, bv.data(), true, ga.data_mut());
                    let gb = slot_mut(&mut grads, *b, bv.shape());
                    gemm(k, m, n, av.data(), true, g.data(), false, gb.data_mut());
                }
                Op::AddBias(x, b) => {
                    let mut gb = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (a, v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *a += v;
                        }
                    }
                    add_into(&mut grads[b.0], gb);
                    add_into(&mut grads[x.0], g);
                }
                Op::Add(a, b) => {
                    add_into(&mut grads[a.0], g.clone());
                    add_into(&mut grads[b.0], g);
                }
                Op::Act(x, act) => {
                    let xv = self.value(*x);
                    let mut gx = g;
                    for ((gv, &xi), &yi) in gx.data_mut().iter_mut().zip(xv.data()).zip(node.value.data()) {
                        *gv *= act.derivative(xi, yi);
                    }
                    add_into(&mut grads[x.0], gx);
                }
                Op::GatherRows(x, rows) => {
                    let shape = self.value(*x).shape();
                    let gx = slot_mut(&mut grads, *x, shape);
                    for (k, &r) in rows.iter().enumerate() {
                        for (a, b) in gx.row_mut(r).iter_mut().zip(g.row(k)) {
                            *a += b;
                        }
                    }
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let shape = self.value(p).shape();
                        let mut gp = Tensor::zeros(shape[0], shape[1]);
                        for r in 0..shape[0] {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + shape[1]]);
                        }
                        offset += shape[1];
                        add_into(&mut grads[p.0], gp);
                    }
                }
                Op::MeanPool(x, group) => {
                    let shape = self.value(*x).shape();
                    let inv = 1.0 / *group as f64;
                    let gx = slot_mut(&mut grads, *x, shape);
                    for r in 0..shape[0] {
                        for (a, b) in gx.row_mut(r).iter_mut().zip(g.row(r / group)) {
                            *a += inv * b;
                        }
                    }
                }
                Op::Column(x, c) => {
                    let shape = self.value(*x).shape();
                    let gx = slot_mut(&mut grads, *x, shape);
                    for r in 0..shape[0] {
                        gx.data_mut()[r * shape[1] + c] += g.data()[r];
                    }
                }
                Op::Affine(x, scale) => {
                    let mut gx = g;
                    gx.data_mut().iter_mut().for_each(|v| *v *= scale);
                    add_into(&mut grads[x.0], gx);
                }
                Op::SegmentSoftmax(x, edges) => {
                    let gx = segment_softmax_backward(&node.value, &g, edges);
                    add_into(&mut grads[x.0], gx);
                }
                Op::Gat(st) => self.gat_backward(st, &g, &mut grads),
                Op::CrpsMean(mu, sigma, y) => {
                    let (m, s) = (self.value(*mu), self.value(*sigma));
                    let scale = g.data()[0] / y.len() as f64;
                    let mut gm = Tensor::zeros(y.len(), 1);
                    let mut gs = Tensor::zeros(y.len(), 1);
                    for i in 0..y.len() {
                        let (dm, ds) = crate::metrics::crps_gaussian_grad(m.data()[i], s.data()[i], y[i]);
                        gm.data_mut()[i] = scale * dm;
                        gs.data_mut()[i] = scale * ds;
                    }
                    add_into(&mut grads[mu.0], gm);
                    add_into(&mut grads[sigma.0], gs);
                }
                Op::Dot(x, w) => {
                    let mut gx = (**w).clone();
                    let s = g.data()[0];
                    gx.data_mut().iter_mut().for_each(|v| *v *= s);
                    add_into(&mut grads[x.0], gx);
                }
            }
        }

        let params: Vec<(ParamId, Var)> = self.params.iter().map(|(&id, &v)| (id, v)).collect();
        for &(id, v) in &params {
            if let Some(g) = &grads[v.0] {
                if !g.is_finite() {
                    return Err(Error::NonFinite(format!("gradient of parameter #{}", id.0)));
                }
            }
        }
        Ok(Grads { by_var: grads, params })
    }

    fn gat_backward(&self, st: &GatState, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let edges = &st.edges;
        let (heads, slope) = (st.heads, st.slope);
        let (l, r, v) = (self.value(st.left), self.value(st.right), self.value(st.value));
        let (we, att) = (self.value(st.edge_weight).data(), self.value(st.attention).data());
        let c = v.cols();
        let hd = c / heads;
        let n = v.rows();

        let mut gv = Tensor::zeros(n, c);
        let mut gl = Tensor::zeros(n, c);
        let mut gr = Tensor::zeros(n, c);
        let mut gwe = vec![0.0; c];
        let mut gatt = vec![0.0; c];
        let mut gscore = Vec::new();
        let mut w = vec![0.0; c];
        let mut prod = vec![0.0; c];
        let mut grr = vec![0.0; c];
        for d in 0..n {
            let range = edges.incoming(d);
            let go = g.row(d);
            let alpha = &st.alpha[range.start * heads..range.end * heads];
            gscore.clear();
            for (i, e) in range.clone().enumerate() {
                let s = edges.src[e];
                expand(&alpha[i * heads..(i + 1) * heads], &mut w);
                let vr = v.row(s);
                for ((((gvk, pk), &gk), &vk), &wk) in gv.row_mut(s).iter_mut().zip(prod.iter_mut()).zip(go).zip(vr).zip(&w) {
                    *gvk += wk * gk;
                    *pk = gk * vk;
                }
                gscore.extend(prod.chunks_exact(hd).map(sum_lanes));
            }
            // softmax backward within the segment
            for h in 0..heads {
                let dot: f64 = alpha.iter().skip(h).step_by(heads).zip(gscore.iter().skip(h).step_by(heads)).map(|(a, b)| a * b).sum();
                for (i, a) in alpha.iter().enumerate().skip(h).step_by(heads) {
                    gscore[i] = a * (gscore[i] - dot);
                }
            }
            let rr = r.row(d);
            grr.fill(0.0);
            for (i, e) in range.enumerate() {
                let (s, a) = (edges.src[e], edges.attr[e]);
                expand(&gscore[i * heads..(i + 1) * heads], &mut w);
                let it = l
                    .row(s)
                    .iter()
                    .zip(rr)
                    .zip(we)
                    .zip(att)
                    .zip(&w)
                    .zip(gatt.iter_mut())
                    .zip(grr.iter_mut())
                    .zip(gwe.iter_mut())
                    .zip(prod.iter_mut());
                for ((((((((&lk, &rk), &wek), &ak), &gs), gak), grk), gwk), gpk) in it {
                    let x = lk + rk + a * wek;
                    *gak += gs * leaky(x, slope);
                    let gp = gs * ak * if x > 0.0 { 1.0 } else { slope };
                    *gpk = gp;
                    *grk += gp;
                    *gwk += gp * a;
                }
                for (glk, &gp) in gl.row_mut(s).iter_mut().zip(&prod) {
                    *glk += gp;
                }
            }
            for (t, v) in gr.row_mut(d).iter_mut().zip(&grr) {
                *t += v;
            }
        }
        add_into(&mut grads[st.value.0], gv);
        add_into(&mut grads[st.left.0], gl);
        add_into(&mut grads[st.right.0], gr);
        add_into(&mut grads[st.edge_weight.0], Tensor::row_vector(gwe));
        add_into(&mut grads[st.attention.0], Tensor::row_vector(gatt));
    }
}

/// Repeat each per-head value over that head's columns.
#[inline]
fn expand(per_head: &[f64], out: &mut [f64]) {
    let hd = out.len() / per_head.len();
    for (chunk, &v) in out.chunks_exact_mut(hd).zip(per_head) {
        chunk.fill(v);
    }
}

/// Sum with four independent accumulators.
#[inline]
fn sum_lanes(xs: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let mut chunks = xs.chunks_exact(4);
    for c in &mut chunks {
        for i in 0..4 {
            acc[i] += c[i];
        }
    }
    let tail: f64 = chunks.remainder().iter().sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn leaky(x: f64, slope: f64) -> f64 {
    x.max(0.0) + slope * x.min(0.0)
}

/// In-place softmax of a segment stored edge-major with `heads` columns.
fn softmax_segment(seg: &mut [f64], heads: usize) {
    for h in 0..heads {
        let max = seg.iter().skip(h).step_by(heads).fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut sum = 0.0;
        for v in seg.iter_mut().skip(h).step_by(heads) {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in seg.iter_mut().skip(h).step_by(heads) {
            *v /= sum;
        }
    }
}

/// Column-wise softmax over each node's incoming edge range, with the
/// per-segment maximum subtracted first.
pub(crate) fn segment_softmax_values(scores: &Tensor, edges: &EdgeIndex) -> Tensor {
    let cols = scores.cols();
    let mut out = Tensor::zeros(scores.rows(), cols);
    for node in 0..edges.n_nodes() {
        let range = edges.incoming(node);
        if range.is_empty() {
            continue;
        }
        for h in 0..cols {
            let max = range.clone().map(|e| scores.get(e, h)).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for e in range.clone() {
                let w = (scores.get(e, h) - max).exp();
                out.set(e, h, w);
                sum += w;
            }
            for e in range.clone() {
                out.set(e, h, out.get(e, h) / sum);
            }
        }
    }
    out
}

fn segment_softmax_backward(y: &Tensor, g: &Tensor, edges: &EdgeIndex) -> Tensor {
    let cols = y.cols();
    let mut out = Tensor::zeros(y.rows(), cols);
    for node in 0..edges.n_nodes() {
        let range = edges.incoming(node);
        for h in 0..cols {
            let dot: f64 = range.clone().map(|e| y.get(e, h) * g.get(e, h)).sum();
            for e in range.clone() {
                out.set(e, h, y.get(e, h) * (g.get(e, h) - dot));
            }
        }
    }
    out
}
