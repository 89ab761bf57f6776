//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation on a [`Var`] appends a node holding its forward value and
//! whatever the backward rule needs. [`Tape::backward`] walks the nodes in
//! reverse creation order, which is a valid topological order because a node
//! can only reference nodes created before it.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{ParamGrads, ParamStore};
use crate::tensor::{axis_split, broadcast_map, broadcast_shape, gemm_nn, gemm_nt, gemm_tn, Tensor};

enum Op {
    Leaf,
    Add {
        a: usize,
        b: usize,
        maps: Option<(Vec<usize>, Vec<usize>)>,
    },
    Sub {
        a: usize,
        b: usize,
        maps: Option<(Vec<usize>, Vec<usize>)>,
    },
    Mul {
        a: usize,
        b: usize,
        maps: Option<(Vec<usize>, Vec<usize>)>,
    },
    Scale {
        a: usize,
        c: f64,
    },
    MatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        b_batched: bool,
    },
    Transpose {
        a: usize,
        batch: usize,
        rows: usize,
        cols: usize,
    },
    Softmax {
        a: usize,
        axis: usize,
    },
    MaskedSoftmax {
        a: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu {
        a: usize,
    },
    Sigmoid {
        a: usize,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
        norm: f64,
    },
    Mse {
        a: usize,
        b: usize,
        rows: usize,
    },
    Dropout {
        a: usize,
        mask: Vec<f64>,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Narrow {
        a: usize,
        axis: usize,
        start: usize,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
        rows: usize,
        fan_in: usize,
        fan_out: usize,
    },
    Sum {
        a: usize,
    },
    Mean {
        a: usize,
    },
    Reshape {
        a: usize,
    },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records a single forward pass. Owned by one thread for its lifetime.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<usize, usize>>,
    /// Address of the store the cached parameters came from.
    store: Cell<usize>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
            store: Cell::new(0),
            grad_enabled: true,
        }
    }

    /// A tape on which parameters are constants; for decoding.
    pub fn inference() -> Self {
        Tape {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        self.push_arc(Arc::new(value), op, requires_grad)
    }

    fn push_arc(&self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A leaf that receives a gradient.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant_arc(&self, value: Arc<Tensor>) -> Var<'_> {
        self.push_arc(value, Op::Leaf, false)
    }

    /// The node for parameter `id`; registered once per tape, so every use of
    /// a parameter within a pass reads the same storage.
    ///
    /// Panics if the tape already holds parameters of a different store.
    pub fn param(&self, store: &ParamStore, id: usize) -> Var<'_> {
        let addr = store as *const ParamStore as usize;
        match self.store.get() {
            0 => self.store.set(addr),
            a => assert_eq!(a, addr, "one tape cannot mix parameters from two stores"),
        }
        if let Some(&node) = self.params.borrow().get(&id) {
            return Var { tape: self, id: node };
        }
        let v = self.push_arc(
            store.shared_value(id),
            Op::Leaf,
            store.get(id).trainable(),
        );
        self.params.borrow_mut().insert(id, v.id);
        v
    }

    pub fn param_named(&self, store: &ParamStore, name: &str) -> Result<Var<'_>> {
        Ok(self.param(store, store.id(name)?))
    }

    fn value_of(&self, id: usize) -> Arc<Tensor> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    fn rg(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::Dimension(format!(
                "backward needs a scalar, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if nodes[loss.id].requires_grad {
            grads[loss.id] = Some(vec![1.0]);
        }
        for i in (0..=loss.id).rev() {
            let Some(g) = grads[i].take() else { continue };
            backprop_node(&nodes, i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self
            .params
            .borrow()
            .iter()
            .map(|(&p, &n)| (n, p))
            .collect();
        Ok(Gradients { grads, params })
    }
}

fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], id: usize) -> Option<&'a mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    Some(grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.numel()]))
}

fn backprop_node(nodes: &[Node], i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[i].value;
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Add { a, b, maps } | Op::Sub { a, b, maps } => {
            let sign = if matches!(nodes[i].op, Op::Sub { .. }) {
                -1.0
            } else {
                1.0
            };
            if let Some(ga) = slot(nodes, grads, *a) {
                match maps {
                    None => ga.iter_mut().zip(g).for_each(|(x, y)| *x += y),
                    Some((ma, _)) => ma.iter().zip(g).for_each(|(&j, y)| ga[j] += y),
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                match maps {
                    None => gb.iter_mut().zip(g).for_each(|(x, y)| *x += sign * y),
                    Some((_, mb)) => mb.iter().zip(g).for_each(|(&j, y)| gb[j] += sign * y),
                }
            }
        }
        Op::Mul { a, b, maps } => {
            let av = Arc::clone(&nodes[*a].value);
            let bv = Arc::clone(&nodes[*b].value);
            if let Some(ga) = slot(nodes, grads, *a) {
                match maps {
                    None => {
                        for ((x, y), bb) in ga.iter_mut().zip(g).zip(bv.data()) {
                            *x += y * bb;
                        }
                    }
                    Some((ma, mb)) => {
                        for (k, y) in g.iter().enumerate() {
                            ga[ma[k]] += y * bv.data()[mb[k]];
                        }
                    }
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                match maps {
                    None => {
                        for ((x, y), aa) in gb.iter_mut().zip(g).zip(av.data()) {
                            *x += y * aa;
                        }
                    }
                    Some((ma, mb)) => {
                        for (k, y) in g.iter().enumerate() {
                            gb[mb[k]] += y * av.data()[ma[k]];
                        }
                    }
                }
            }
        }
        Op::Scale { a, c } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
            }
        }
        Op::MatMul {
            a,
            b,
            batch,
            m,
            k,
            n,
            b_batched,
        } => {
            let (m, k, n) = (*m, *k, *n);
            let av = Arc::clone(&nodes[*a].value);
            let bv = Arc::clone(&nodes[*b].value);
            if let Some(ga) = slot(nodes, grads, *a) {
                for t in 0..*batch {
                    let bo = if *b_batched { t * k * n } else { 0 };
                    gemm_nt(
                        m,
                        n,
                        k,
                        &g[t * m * n..(t + 1) * m * n],
                        &bv.data()[bo..bo + k * n],
                        &mut ga[t * m * k..(t + 1) * m * k],
                    );
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for t in 0..*batch {
                    let bo = if *b_batched { t * k * n } else { 0 };
                    gemm_tn(
                        k,
                        m,
                        n,
                        &av.data()[t * m * k..(t + 1) * m * k],
                        &g[t * m * n..(t + 1) * m * n],
                        &mut gb[bo..bo + k * n],
                    );
                }
            }
        }
        Op::Transpose {
            a,
            batch,
            rows,
            cols,
        } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                let (r, c) = (*rows, *cols);
                for t in 0..*batch {
                    let o = t * r * c;
                    for i in 0..r {
                        for j in 0..c {
                            ga[o + i * c + j] += g[o + j * r + i];
                        }
                    }
                }
            }
        }
        Op::Softmax { a, axis } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                let (outer, len, inner) = axis_split(out.shape(), *axis);
                let y = out.data();
                for o in 0..outer {
                    for inn in 0..inner {
                        let base = o * len * inner + inn;
                        let dot: f64 = (0..len)
                            .map(|j| y[base + j * inner] * g[base + j * inner])
                            .sum();
                        for j in 0..len {
                            let ix = base + j * inner;
                            ga[ix] += y[ix] * (g[ix] - dot);
                        }
                    }
                }
            }
        }
        Op::MaskedSoftmax { a } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                let cols = *out.shape().last().unwrap();
                let y = out.data();
                for (r, (yr, gr)) in y.chunks(cols).zip(g.chunks(cols)).enumerate() {
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for j in 0..cols {
                        ga[r * cols + j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let d = *out.shape().last().unwrap();
            let gv = Arc::clone(&nodes[*gain].value);
            if let Some(gx) = slot(nodes, grads, *x) {
                for (r, &rs) in rstd.iter().enumerate() {
                    let gr = &g[r * d..(r + 1) * d];
                    let xr = &xhat[r * d..(r + 1) * d];
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for j in 0..d {
                        let dxh = gr[j] * gv.data()[j];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xr[j];
                    }
                    mean_dxhat /= d as f64;
                    mean_dxhat_xhat /= d as f64;
                    for j in 0..d {
                        let dxh = gr[j] * gv.data()[j];
                        gx[r * d + j] += rs * (dxh - mean_dxhat - xr[j] * mean_dxhat_xhat);
                    }
                }
            }
            if let Some(gg) = slot(nodes, grads, *gain) {
                for (gr, xr) in g.chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        gg[j] += gr[j] * xr[j];
                    }
                }
            }
            if let Some(gb) = slot(nodes, grads, *bias) {
                for gr in g.chunks(d) {
                    for j in 0..d {
                        gb[j] += gr[j];
                    }
                }
            }
        }
        Op::Gelu { a } => {
            let xv = Arc::clone(&nodes[*a].value);
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((d, y), &x) in ga.iter_mut().zip(g).zip(xv.data()) {
                    *d += y * (std_normal_cdf(x) + x * std_normal_pdf(x));
                }
            }
        }
        Op::Sigmoid { a } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((d, y), &s) in ga.iter_mut().zip(g).zip(out.data()) {
                    *d += y * s * (1.0 - s);
                }
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            weights,
            probs,
            norm,
        } => {
            if let Some(gl) = slot(nodes, grads, *logits) {
                let v = probs.len() / targets.len();
                for (t, (&target, &w)) in targets.iter().zip(weights).enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    let c = g[0] * w / norm;
                    for j in 0..v {
                        gl[t * v + j] += c * probs[t * v + j];
                    }
                    gl[t * v + target] -= c;
                }
            }
        }
        Op::Mse { a, b, rows } => {
            let av = Arc::clone(&nodes[*a].value);
            let bv = Arc::clone(&nodes[*b].value);
            let c = 2.0 * g[0] / *rows as f64;
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((d, x), y) in ga.iter_mut().zip(av.data()).zip(bv.data()) {
                    *d += c * (x - y);
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for ((d, x), y) in gb.iter_mut().zip(av.data()).zip(bv.data()) {
                    *d -= c * (x - y);
                }
            }
        }
        Op::Dropout { a, mask } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((d, y), m) in ga.iter_mut().zip(g).zip(mask) {
                    *d += y * m;
                }
            }
        }
        Op::Concat { inputs, axis } => {
            let (outer, _, inner) = axis_split(out.shape(), *axis);
            let out_stride = out.shape()[*axis] * inner;
            let mut offset = 0;
            for &inp in inputs {
                let len = nodes[inp].value.shape()[*axis];
                if let Some(gi) = slot(nodes, grads, inp) {
                    for o in 0..outer {
                        let src = &g[o * out_stride + offset * inner..][..len * inner];
                        for (d, s) in gi[o * len * inner..(o + 1) * len * inner].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                offset += len;
            }
        }
        Op::Narrow { a, axis, start } => {
            let in_shape = nodes[*a].value.shape().to_vec();
            if let Some(ga) = slot(nodes, grads, *a) {
                let (outer, len, inner) = axis_split(out.shape(), *axis);
                let in_stride = in_shape[*axis] * inner;
                for o in 0..outer {
                    let dst = &mut ga[o * in_stride + start * inner..][..len * inner];
                    for (d, s) in dst.iter_mut().zip(&g[o * len * inner..(o + 1) * len * inner]) {
                        *d += s;
                    }
                }
            }
        }
        Op::Embedding { table, ids } => {
            if let Some(gt) = slot(nodes, grads, *table) {
                let h = *out.shape().last().unwrap();
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..h {
                        gt[id * h + j] += g[r * h + j];
                    }
                }
            }
        }
        Op::Linear {
            x,
            w,
            b,
            rows,
            fan_in,
            fan_out,
        } => {
            let (r, fi, fo) = (*rows, *fan_in, *fan_out);
            let xv = Arc::clone(&nodes[*x].value);
            let wv = Arc::clone(&nodes[*w].value);
            if let Some(gx) = slot(nodes, grads, *x) {
                gemm_nt(r, fo, fi, g, wv.data(), gx);
            }
            if let Some(gw) = slot(nodes, grads, *w) {
                gemm_tn(fi, r, fo, xv.data(), g, gw);
            }
            if let Some(b) = b {
                if let Some(gb) = slot(nodes, grads, *b) {
                    for gr in g.chunks(fo) {
                        gb.iter_mut().zip(gr).for_each(|(d, s)| *d += s);
                    }
                }
            }
        }
        Op::Sum { a } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::Mean { a } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                let c = g[0] / ga.len() as f64;
                ga.iter_mut().for_each(|d| *d += c);
            }
        }
        Op::Reshape { a } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(d, s)| *d += s);
            }
        }
    }
}

/// Per-node gradients from one reverse sweep.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` requires one.
    pub fn wrt(&self, v: Var<'_>) -> Option<Tensor> {
        let shape = v.shape();
        self.grads[v.id]
            .as_ref()
            .map(|g| Tensor::new(shape, g.clone()).expect("gradient shape"))
    }

    /// Gradients of every registered trainable parameter.
    pub fn param_grads(&self, num_params: usize) -> ParamGrads {
        let mut out = ParamGrads::zeros(num_params);
        for &(node, param) in &self.params {
            if let Some(g) = &self.grads[node] {
                out.accumulate(param, g);
            }
        }
        out
    }
}

pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn elementwise_maps(a: &[usize], b: &[usize]) -> Result<(Vec<usize>, Option<(Vec<usize>, Vec<usize>)>)> {
    if a == b {
        return Ok((a.to_vec(), None));
    }
    let shape = broadcast_shape(a, b)?;
    let ma = broadcast_map(&shape, a);
    let mb = broadcast_map(&shape, b);
    Ok((shape, Some((ma, mb))))
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn same_tape(&self, other: &Var<'_>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }

    fn binary(self, other: Var<'t>, kind: u8) -> Result<Var<'t>> {
        self.same_tape(&other);
        let av = self.value();
        let bv = other.value();
        let (shape, maps) = elementwise_maps(av.shape(), bv.shape())?;
        let f = |x: f64, y: f64| match kind {
            0 => x + y,
            1 => x - y,
            _ => x * y,
        };
        let data: Vec<f64> = match &maps {
            None => av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect(),
            Some((ma, mb)) => ma
                .iter()
                .zip(mb)
                .map(|(&i, &j)| f(av.data()[i], bv.data()[j]))
                .collect(),
        };
        let (a, b) = (self.id, other.id);
        let op = match kind {
            0 => Op::Add { a, b, maps },
            1 => Op::Sub { a, b, maps },
            _ => Op::Mul { a, b, maps },
        };
        let rg = self.tape.rg(a) || self.tape.rg(b);
        Ok(self.tape.push(Tensor::new(shape, data)?, op, rg))
    }

    /// Elementwise sum with trailing-axis broadcasting.
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, 0)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, 1)
    }

    /// Elementwise product with trailing-axis broadcasting.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, 2)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let v = self.value().map(|x| c * x);
        self.tape
            .push(v, Op::Scale { a: self.id, c }, self.tape.rg(self.id))
    }

    /// Matrix product of rank-2 operands, or batched rank-3 by rank-3/rank-2.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let av = self.value();
        let bv = other.value();
        let (sa, sb) = (av.shape(), bv.shape());
        let err = || Error::Dimension(format!("matmul of {sa:?} by {sb:?}"));
        let (batch, m, k, n, b_batched) = match (sa.len(), sb.len()) {
            (2, 2) if sa[1] == sb[0] => (1, sa[0], sa[1], sb[1], false),
            (3, 3) if sa[0] == sb[0] && sa[2] == sb[1] => (sa[0], sa[1], sa[2], sb[2], true),
            (3, 2) if sa[2] == sb[0] => (sa[0], sa[1], sa[2], sb[1], false),
            _ => return Err(err()),
        };
        let mut out = vec![0.0; batch * m * n];
        for t in 0..batch {
            let bo = if b_batched { t * k * n } else { 0 };
            gemm_nn(
                m,
                k,
                n,
                &av.data()[t * m * k..(t + 1) * m * k],
                &bv.data()[bo..bo + k * n],
                &mut out[t * m * n..(t + 1) * m * n],
            );
        }
        let shape = if sa.len() == 3 { vec![batch, m, n] } else { vec![m, n] };
        let rg = self.tape.rg(self.id) || self.tape.rg(other.id);
        Ok(self.tape.push(
            Tensor::new(shape, out)?,
            Op::MatMul {
                a: self.id,
                b: other.id,
                batch,
                m,
                k,
                n,
                b_batched,
            },
            rg,
        ))
    }

    /// Swaps the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose(self) -> Result<Var<'t>> {
        let av = self.value();
        let s = av.shape();
        let (batch, rows, cols) = match s.len() {
            2 => (1, s[0], s[1]),
            3 => (s[0], s[1], s[2]),
            _ => return Err(Error::Dimension(format!("transpose of rank-{} {s:?}", s.len()))),
        };
        let mut out = vec![0.0; av.numel()];
        for t in 0..batch {
            let o = t * rows * cols;
            for i in 0..rows {
                for j in 0..cols {
                    out[o + j * rows + i] = av.data()[o + i * cols + j];
                }
            }
        }
        let shape = if s.len() == 3 { vec![batch, cols, rows] } else { vec![cols, rows] };
        Ok(self.tape.push(
            Tensor::new(shape, out)?,
            Op::Transpose {
                a: self.id,
                batch,
                rows,
                cols,
            },
            self.tape.rg(self.id),
        ))
    }

    /// Max-stabilized softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let av = self.value();
        if axis >= av.rank() {
            return Err(Error::Dimension(format!(
                "softmax axis {axis} on shape {:?}",
                av.shape()
            )));
        }
        let (outer, len, inner) = axis_split(av.shape(), axis);
        let x = av.data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for inn in 0..inner {
                let base = o * len * inner + inn;
                let max = (0..len)
                    .map(|j| x[base + j * inner])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..len {
                    let e = (x[base + j * inner] - max).exp();
                    y[base + j * inner] = e;
                    z += e;
                }
                for j in 0..len {
                    y[base + j * inner] /= z;
                }
            }
        }
        Ok(self.tape.push(
            Tensor::new(av.shape().to_vec(), y)?,
            Op::Softmax { a: self.id, axis },
            self.tape.rg(self.id),
        ))
    }

    /// Softmax over the last axis where `allowed[i]` (same length as the
    /// tensor) selects the entries that take part; the rest come out as 0.
    /// A row with no allowed entry is all zeros.
    pub fn masked_softmax(self, allowed: &[bool]) -> Result<Var<'t>> {
        let av = self.value();
        if allowed.len() != av.numel() || av.rank() == 0 {
            return Err(Error::Dimension(format!(
                "mask of {} entries for shape {:?}",
                allowed.len(),
                av.shape()
            )));
        }
        let cols = *av.shape().last().unwrap();
        let mut y = vec![0.0; av.numel()];
        for ((xr, mr), yr) in av
            .data()
            .chunks(cols)
            .zip(allowed.chunks(cols))
            .zip(y.chunks_mut(cols))
        {
            let max = xr
                .iter()
                .zip(mr)
                .filter(|(_, &m)| m)
                .map(|(&x, _)| x)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut z = 0.0;
            for j in 0..cols {
                if mr[j] {
                    yr[j] = (xr[j] - max).exp();
                    z += yr[j];
                }
            }
            yr.iter_mut().for_each(|v| *v /= z);
        }
        Ok(self.tape.push(
            Tensor::new(av.shape().to_vec(), y)?,
            Op::MaskedSoftmax { a: self.id },
            self.tape.rg(self.id),
        ))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias` (both
    /// shaped like that axis).
    pub fn layer_norm(self, gain: Var<'t>, bias: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let xv = self.value();
        let gv = gain.value();
        let bv = bias.value();
        let d = *xv.shape().last().ok_or_else(|| Error::Dimension("layer_norm of scalar".into()))?;
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(Error::Dimension(format!(
                "layer_norm of {:?} with gain {:?} and bias {:?}",
                xv.shape(),
                gv.shape(),
                bv.shape()
            )));
        }
        let rows = xv.numel() / d;
        let mut xhat = vec![0.0; xv.numel()];
        let mut rstd = vec![0.0; rows];
        let mut y = vec![0.0; xv.numel()];
        for r in 0..rows {
            let xr = &xv.data()[r * d..(r + 1) * d];
            let mean = xr.iter().sum::<f64>() / d as f64;
            let var = xr.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (xr[j] - mean) * rs;
                xhat[r * d + j] = h;
                y[r * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let rg = self.tape.rg(self.id) || self.tape.rg(gain.id) || self.tape.rg(bias.id);
        Ok(self.tape.push(
            Tensor::new(xv.shape().to_vec(), y)?,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(self) -> Var<'t> {
        let v = self.value().map(|x| x * std_normal_cdf(x));
        self.tape.push(v, Op::Gelu { a: self.id }, self.tape.rg(self.id))
    }

    pub fn sigmoid(self) -> Var<'t> {
        let v = self.value().map(|x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        });
        self.tape
            .push(v, Op::Sigmoid { a: self.id }, self.tape.rg(self.id))
    }

    /// Weighted token cross-entropy of `[T×V]` logits:
    /// `Σ w_t·(−log softmax(z_t)[y_t]) / max(1, Σ w_t)`.
    pub fn cross_entropy(self, targets: &[usize], weights: &[f64]) -> Result<Var<'t>> {
        let lv = self.value();
        if lv.rank() != 2 || lv.rows() != targets.len() || weights.len() != targets.len() {
            return Err(Error::Dimension(format!(
                "cross_entropy of logits {:?} with {} targets and {} weights",
                lv.shape(),
                targets.len(),
                weights.len()
            )));
        }
        let v = lv.cols();
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Index(format!("target id {bad} outside vocabulary of {v}")));
        }
        if weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::Input("negative or NaN loss weight".into()));
        }
        let mut probs = vec![0.0; lv.numel()];
        let mut total = 0.0;
        for (t, (&target, &w)) in targets.iter().zip(weights).enumerate() {
            let row = lv.row(t);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            for j in 0..v {
                probs[t * v + j] = (row[j] - max).exp() / z;
            }
            if w != 0.0 {
                total += w * (max + z.ln() - row[target]);
            }
        }
        let norm = weights.iter().sum::<f64>().max(1.0);
        Ok(self.tape.push(
            Tensor::scalar(total / norm),
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
                norm,
            },
            self.tape.rg(self.id),
        ))
    }

    /// Mean over the leading axis of squared row distances.
    pub fn mse(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let av = self.value();
        let bv = other.value();
        if av.shape() != bv.shape() || av.rank() == 0 {
            return Err(Error::Dimension(format!(
                "mse of {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let rows = av.shape()[0];
        let total: f64 = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let rg = self.tape.rg(self.id) || self.tape.rg(other.id);
        Ok(self.tape.push(
            Tensor::scalar(total / rows as f64),
            Op::Mse {
                a: self.id,
                b: other.id,
                rows,
            },
            rg,
        ))
    }

    /// Inverted dropout; the identity when not training or `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(self, rate: f64, training: bool, rng: &mut R) -> Result<Var<'t>> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Input(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(self);
        }
        let av = self.value();
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..av.numel())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let data = av.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        Ok(self.tape.push(
            Tensor::new(av.shape().to_vec(), data)?,
            Op::Dropout { a: self.id, mask },
            self.tape.rg(self.id),
        ))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Input("concat of nothing".into()))?;
        let tape = first.tape;
        let values: Vec<Arc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return Err(Error::Dimension(format!("concat axis {axis} on shape {base:?}")));
        }
        let mut total = 0;
        for v in &values {
            let s = v.shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::Dimension(format!(
                    "concat along {axis} of {base:?} and {s:?}"
                )));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for v in &values {
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = parts.iter().any(|p| tape.rg(p.id));
        Ok(tape.push(
            Tensor::new(shape, data)?,
            Op::Concat {
                inputs: parts.iter().map(|p| p.id).collect(),
                axis,
            },
            rg,
        ))
    }

    /// The slice `start..start+len` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let av = self.value();
        let s = av.shape();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::Dimension(format!(
                "narrow({axis}, {start}, {len}) of {s:?}"
            )));
        }
        let (outer, full, inner) = axis_split(s, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&av.data()[o * full * inner + start * inner..][..len * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = len;
        Ok(self.tape.push(
            Tensor::new(shape, data)?,
            Op::Narrow {
                a: self.id,
                axis,
                start,
            },
            self.tape.rg(self.id),
        ))
    }

    /// Rows of a `[V×h]` table; the gradient scatter-adds back into it.
    pub fn embedding(self, ids: &[usize]) -> Result<Var<'t>> {
        let tv = self.value();
        if tv.rank() != 2 || ids.is_empty() {
            return Err(Error::Dimension(format!(
                "embedding lookup of {} ids in {:?}",
                ids.len(),
                tv.shape()
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= tv.rows()) {
            return Err(Error::Index(format!(
                "id {bad} outside table of {} rows",
                tv.rows()
            )));
        }
        Ok(self.tape.push(
            tv.select_rows(ids),
            Op::Embedding {
                table: self.id,
                ids: ids.to_vec(),
            },
            self.tape.rg(self.id),
        ))
    }

    /// `x·W (+ b)` over the last axis, with `W` shaped `[in×out]`.
    pub fn linear(self, w: Var<'t>, b: Option<Var<'t>>) -> Result<Var<'t>> {
        let xv = self.value();
        let wv = w.value();
        let fan_in = *xv.shape().last().ok_or_else(|| Error::Dimension("linear of scalar".into()))?;
        if wv.rank() != 2 || wv.rows() != fan_in {
            return Err(Error::Dimension(format!(
                "linear of {:?} by weight {:?}",
                xv.shape(),
                wv.shape()
            )));
        }
        let fan_out = wv.cols();
        if let Some(b) = b {
            if b.shape() != [fan_out] {
                return Err(Error::Dimension(format!(
                    "linear bias {:?} for {fan_out} outputs",
                    b.shape()
                )));
            }
        }
        let rows = xv.numel() / fan_in;
        let mut out = vec![0.0; rows * fan_out];
        if let Some(b) = b {
            let bv = b.value();
            for r in out.chunks_mut(fan_out) {
                r.copy_from_slice(bv.data());
            }
        }
        gemm_nn(rows, fan_in, fan_out, xv.data(), wv.data(), &mut out);
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = fan_out;
        let rg = self.tape.rg(self.id) || self.tape.rg(w.id) || b.is_some_and(|b| self.tape.rg(b.id));
        Ok(self.tape.push(
            Tensor::new(shape, out)?,
            Op::Linear {
                x: self.id,
                w: w.id,
                b: b.map(|b| b.id),
                rows,
                fan_in,
                fan_out,
            },
            rg,
        ))
    }

    pub fn sum(self) -> Var<'t> {
        let s = self.value().data().iter().sum();
        self.tape
            .push(Tensor::scalar(s), Op::Sum { a: self.id }, self.tape.rg(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let v = self.value();
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.tape
            .push(Tensor::scalar(s), Op::Mean { a: self.id }, self.tape.rg(self.id))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let v = (*self.value()).clone().reshape(shape.to_vec())?;
        Ok(self
            .tape
            .push(v, Op::Reshape { a: self.id }, self.tape.rg(self.id)))
    }

    /// The same value, cut off from the gradient.
    pub fn detach(self) -> Var<'t> {
        self.tape.constant_arc(self.value())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_shape_rule_and_identity() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::full(&[2, 3], 1.0));
        let b = tape.constant(Tensor::full(&[3, 4], 1.0));
        assert_eq!(a.matmul(b).unwrap().shape(), vec![2, 4]);
        let x = t(&[3, 2], &[1.0, -2.0, 3.5, 0.25, 7.0, 9.0]);
        let i3 = tape.constant(Tensor::eye(3));
        let xv = tape.constant(x.clone());
        assert_eq!(*i3.matmul(xv).unwrap().value(), x);
        let err = a.matmul(a).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn matmul_sum_gradient_is_row_broadcast_of_b_column_sums() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::from_fn(&[2, 3], |i| i as f64 * 0.3 - 0.5));
        let bdata = Tensor::from_fn(&[3, 4], |i| (i as f64).sin());
        let b = tape.constant(bdata.clone());
        let loss = a.matmul(b).unwrap().sum();
        let g = tape.backward(loss).unwrap().wrt(a).unwrap();
        for i in 0..2 {
            for p in 0..3 {
                let expect: f64 = bdata.row(p).iter().sum();
                assert!((g.at(&[i, p]) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_uniform_and_stabilized() {
        let tape = Tape::new();
        let s = tape.constant(t(&[3], &[0.0, 0.0, 0.0])).softmax(0).unwrap();
        for &p in s.value().data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = tape.constant(t(&[2], &[1000.0, 0.0])).softmax(0).unwrap();
        assert_eq!(s.value().data()[0], 1.0);
        assert!(s.value().data()[1] < 1e-300);
        assert!(s.value().is_finite());
    }

    #[test]
    fn softmax_along_inner_axis() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3, 2], |i| (i as f64 * 0.7).cos() * 3.0));
        let s = x.softmax(1).unwrap().value();
        for o in 0..2 {
            for i in 0..2 {
                let total: f64 = (0..3).map(|j| s.at(&[o, j, i])).sum();
                assert!((total - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_edge_cases() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 4], 3.0));
        let one = tape.constant(Tensor::full(&[4], 1.0));
        let zero = tape.constant(Tensor::zeros(&[4]));
        let y = x.layer_norm(one, zero, 1e-5).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.0));
        let x = tape.constant(t(&[1, 4], &[1.0, 2.0, 3.0, 10.0]));
        let bias = tape.constant(t(&[4], &[0.5, -1.0, 2.0, 0.0]));
        let y = x.layer_norm(zero, bias, 1e-5).unwrap();
        assert_eq!(y.value().data(), bias.value().data());
        let y = x.layer_norm(one, zero, 1e-5).unwrap().value();
        let mean: f64 = y.data().iter().sum::<f64>() / 4.0;
        let var: f64 = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-5);
    }

    #[test]
    fn gelu_values_and_identity() {
        let tape = Tape::new();
        let xs = [-3.0, -1.0, -0.2, 0.0, 0.4, 1.0, 2.5];
        let x = tape.constant(t(&[7], &xs));
        let y = x.gelu().value();
        let yneg = x.scale(-1.0).gelu().value();
        assert_eq!(y.data()[3], 0.0);
        assert!((y.data()[5] - 0.841345).abs() < 5e-7);
        for (i, &v) in xs.iter().enumerate() {
            assert!((yneg.data()[i] - (-v + y.data()[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn sigmoid_symmetry() {
        let tape = Tape::new();
        let x = tape.constant(t(&[4], &[0.0, 1.5, -20.0, 700.0]));
        let y = x.sigmoid().value();
        let yn = x.scale(-1.0).sigmoid().value();
        assert_eq!(y.data()[0], 0.5);
        for i in 0..4 {
            assert!((y.data()[i] + yn.data()[i] - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn cross_entropy_hand_cases() {
        let tape = Tape::new();
        let uniform = tape.constant(Tensor::zeros(&[3, 50]));
        let l = uniform.cross_entropy(&[0, 7, 49], &[1.0; 3]).unwrap();
        assert!((l.item() - 50f64.ln()).abs() < 1e-12);
        assert!((l.item() - 3.9120).abs() < 5e-5);
        let l = uniform.cross_entropy(&[0, 7, 49], &[0.0; 3]).unwrap();
        assert_eq!(l.item(), 0.0);
        let z = tape.constant(t(&[1, 2], &[1.0, 0.0]));
        let l = z.cross_entropy(&[0], &[1.0]).unwrap();
        let expect = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((l.item() - expect).abs() < 1e-15);
        assert!((l.item() - 0.313262).abs() < 5e-7);
        assert!(matches!(z.cross_entropy(&[2], &[1.0]), Err(Error::Index(_))));
    }

    #[test]
    fn mse_cases() {
        let tape = Tape::new();
        let b = tape.constant(t(&[2, 2], &[2.0, 0.0, 0.0, -2.0]));
        assert_eq!(b.mse(b).unwrap().item(), 0.0);
        let z = tape.constant(Tensor::zeros(&[2, 2]));
        assert_eq!(z.mse(b).unwrap().item(), 4.0);
        let c = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(z.mse(c).is_err());
    }

    #[test]
    fn dropout_identity_and_rate() {
        let tape = Tape::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let x = tape.constant(Tensor::full(&[1000, 1000], 1.0));
        assert_eq!(x.dropout(0.0, true, &mut rng).unwrap().id(), x.id());
        assert_eq!(x.dropout(0.5, false, &mut rng).unwrap().id(), x.id());
        let y = x.dropout(0.1, true, &mut rng).unwrap().value();
        let zeros = y.data().iter().filter(|&&v| v == 0.0).count() as f64 / 1e6;
        assert!((zeros - 0.10).abs() <= 0.003, "{zeros}");
        let survivors: Vec<f64> = y.data().iter().copied().filter(|&v| v != 0.0).collect();
        assert!(survivors.iter().all(|&v| (v - 1.0 / 0.9).abs() < 1e-15));
        assert!(x.dropout(1.0, true, &mut rng).is_err());
    }

    #[test]
    fn concat_narrow_embedding() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 1], &[9.0, 8.0]));
        let c = Var::concat(&[a, b], 1).unwrap();
        assert_eq!(c.value().data(), &[1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);
        let n = c.narrow(1, 1, 2).unwrap();
        assert_eq!(n.value().data(), &[2.0, 9.0, 4.0, 8.0]);
        let r = Var::concat(&[a, a], 0).unwrap();
        assert_eq!(r.shape(), vec![4, 2]);
        let e = a.embedding(&[1, 1, 0]).unwrap();
        assert_eq!(e.value().data(), &[3.0, 4.0, 3.0, 4.0, 1.0, 2.0]);
        assert!(matches!(a.embedding(&[2]), Err(Error::Index(_))));
        assert!(Var::concat(&[a, b], 0).is_err());
    }

    #[test]
    fn embedding_gradient_scatter_adds() {
        let tape = Tape::new();
        let table = tape.leaf(Tensor::zeros(&[3, 2]));
        let loss = table.embedding(&[2, 0, 2]).unwrap().sum();
        let g = tape.backward(loss).unwrap().wrt(table).unwrap();
        assert_eq!(g.data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn linearity_of_backward() {
        let tape = Tape::new();
        let w = tape.leaf(Tensor::from_fn(&[3, 3], |i| (i as f64 * 1.3).sin()));
        let x = tape.constant(Tensor::from_fn(&[2, 3], |i| (i as f64 * 0.4).cos()));
        let l1 = x.matmul(w).unwrap().gelu().sum();
        let l2 = x.matmul(w).unwrap().sigmoid().mean();
        let both = l1.add(l2).unwrap();
        let g1 = tape.backward(l1).unwrap().wrt(w).unwrap();
        let g2 = tape.backward(l2).unwrap().wrt(w).unwrap();
        let g12 = tape.backward(both).unwrap().wrt(w).unwrap();
        for i in 0..9 {
            assert!((g12.data()[i] - (g1.data()[i] + g2.data()[i])).abs() <= 1e-12);
        }
    }

    #[test]
    fn broadcast_add_and_mul_gradients_reduce() {
        let tape = Tape::new();
        let m = tape.leaf(Tensor::from_fn(&[2, 3], |i| i as f64));
        let row = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let col = tape.leaf(t(&[2, 1], &[0.5, -1.0]));
        let y = m.add(row).unwrap().mul(col).unwrap().sum();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(row).unwrap().data(), &[-0.5, -0.5, -0.5]);
        // d/dcol_i = Σ_j (m_ij + row_j)
        assert_eq!(g.wrt(col).unwrap().data(), &[9.0, 18.0]);
    }

    #[test]
    fn masked_softmax_zeroes_disallowed() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[1.0, 5.0, 2.0, 0.0, 0.0, 0.0]));
        let y = x
            .masked_softmax(&[true, false, true, false, false, false])
            .unwrap()
            .value();
        assert_eq!(y.data()[1], 0.0);
        assert!((y.data()[0] + y.data()[2] - 1.0).abs() < 1e-15);
        assert_eq!(&y.data()[3..], &[0.0, 0.0, 0.0]);
    }
}
