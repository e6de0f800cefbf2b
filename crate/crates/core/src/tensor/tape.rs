//! Tape-based reverse-mode differentiation over voxel feature matrices.
//!
//! Every operation appends one node holding its output value and whatever it
//! needs for the backward pass. [`Tape::backward`] walks the nodes in exact
//! reverse order of recording, accumulating gradients additively.

use std::borrow::Cow;
use std::rc::Rc;

use rustc_hash::FxHashMap;

use super::gemm::{gemm, Layout};
use super::params::{NetworkParams, ParamId};
use crate::cloud::UNLABELED;
use crate::error::{Error, Result};
use crate::grid::KernelMap;
use crate::matrix::{axpy, dot, Matrix};

/// Row index marking an all-zero output row in [`Tape::gather_rows`].
pub const ZERO_ROW: u32 = u32::MAX;

/// Probability clamp used by the cross-entropy losses.
pub const PROB_EPS: f64 = 1e-7;

const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param {
        store: u64,
        id: ParamId,
    },
    Conv {
        x: Var,
        conf: Option<Var>,
        w: Var,
        b: Option<Var>,
        kmap: Rc<KernelMap>,
    },
    MaxPool {
        x: Var,
        argmax: Vec<u32>,
    },
    Gather {
        x: Var,
        index: Rc<[u32]>,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Relu {
        x: Var,
    },
    Sigmoid {
        x: Var,
        k: f64,
    },
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    Bce {
        p: Var,
        targets: Rc<[f64]>,
        weights: Option<Rc<[f64]>>,
        wsum: f64,
    },
    BceLogits {
        x: Var,
        targets: Rc<[f64]>,
        weights: Option<Rc<[f64]>>,
        wsum: f64,
    },
    SoftmaxCe {
        x: Var,
        labels: Rc<[u32]>,
        probs: Matrix,
        count: usize,
    },
    Sum {
        terms: Vec<(Var, f64)>,
    },
}

struct Node<'a> {
    value: Cow<'a, Matrix>,
    op: Op,
    needs_grad: bool,
}

/// Recording of one forward computation.
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    params: FxHashMap<(u64, ParamId), Var>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: FxHashMap::default() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value: Cow::Owned(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked (useful for probing input sensitivities).
    pub fn input(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf, true)
    }

    /// Binds a stored parameter; repeated bindings return the same node.
    pub fn param(&mut self, store: &'a NetworkParams, id: ParamId) -> Var {
        let key = (store.uid(), id);
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        self.nodes.push(Node {
            value: Cow::Borrowed(&store.get(id).values),
            op: Op::Param { store: store.uid(), id },
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(key, v);
        v
    }

    /// `out[o] = b + Σ_{(i,o,k)} W_k x_i` over the entries of `kmap`.
    pub fn sparse_conv(&mut self, x: Var, w: Var, b: Option<Var>, kmap: &Rc<KernelMap>) -> Result<Var> {
        self.conv(x, None, w, b, kmap)
    }

    /// Like [`Tape::sparse_conv`] with every contribution scaled by the
    /// input voxel's confidence: `out[o] = b + Σ c_i W_k x_i`.
    pub fn confidence_conv(&mut self, x: Var, conf: Var, w: Var, b: Option<Var>, kmap: &Rc<KernelMap>) -> Result<Var> {
        if self.value(conf).shape() != (self.value(x).rows(), 1) {
            return Err(Error::Config(format!(
                "confidence shape {:?} does not match {} input voxels",
                self.value(conf).shape(),
                self.value(x).rows()
            )));
        }
        self.conv(x, Some(conf), w, b, kmap)
    }

    fn conv(&mut self, x: Var, conf: Option<Var>, w: Var, b: Option<Var>, kmap: &Rc<KernelMap>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let cin = xv.cols();
        let cout = wv.cols();
        if xv.rows() != kmap.n_in {
            return Err(Error::Config(format!("conv input has {} rows, kernel map expects {}", xv.rows(), kmap.n_in)));
        }
        if wv.rows() != kmap.volume() * cin {
            return Err(Error::Config(format!(
                "conv weight has {} rows, expected {}x{} for {cin} input channels",
                wv.rows(),
                kmap.volume(),
                cin
            )));
        }
        if let Some(b) = b {
            if self.value(b).shape() != (1, cout) {
                return Err(Error::Config(format!("conv bias shape {:?}, expected (1, {cout})", self.value(b).shape())));
            }
        }
        let mut out = Matrix::zeros(kmap.n_out, cout);
        if let Some(b) = b {
            let bias = self.value(b).row(0).to_vec();
            for r in 0..kmap.n_out {
                out.row_mut(r).copy_from_slice(&bias);
            }
        }
        let confv = conf.map(|c| self.value(c));
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for k in 0..kmap.volume() {
            let es = kmap.entries_for_offset(k);
            if es.is_empty() {
                continue;
            }
            gather_scaled(xv, confv, es.iter().map(|e| e.input as usize), &mut xs);
            ys.resize(es.len() * cout, 0.0);
            let wk = &wv.data()[k * cin * cout..(k + 1) * cin * cout];
            gemm(es.len(), cin, cout, &xs, Layout::Normal, wk, Layout::Normal, 0.0, &mut ys);
            for (j, e) in es.iter().enumerate() {
                axpy(out.row_mut(e.output as usize), 1.0, &ys[j * cout..(j + 1) * cout]);
            }
        }
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b)) || conf.is_some_and(|c| self.needs(c));
        Ok(self.push(out, Op::Conv { x, conf, w, b, kmap: Rc::clone(kmap) }, needs))
    }

    /// Max over the child rows of each parent; `parents[i]` is the output row of input row `i`.
    pub fn max_pool(&mut self, x: Var, parents: &[u32], n_out: usize) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        assert_eq!(parents.len(), xv.rows(), "one parent per input row");
        let mut out = Matrix::filled(n_out, c, f64::NEG_INFINITY);
        let mut argmax = vec![u32::MAX; n_out * c];
        for (i, &p) in parents.iter().enumerate() {
            let row = xv.row(i);
            let p = p as usize;
            for ch in 0..c {
                if row[ch] > out.get(p, ch) || argmax[p * c + ch] == u32::MAX {
                    out.set(p, ch, row[ch]);
                    argmax[p * c + ch] = i as u32;
                }
            }
        }
        if argmax.iter().any(|&a| a == u32::MAX) {
            panic!("max_pool: an output row has no children");
        }
        let needs = self.needs(x);
        self.push(out, Op::MaxPool { x, argmax }, needs)
    }

    /// `out[r] = x[index[r]]`, or zeros where `index[r] == ZERO_ROW`.
    pub fn gather_rows(&mut self, x: Var, index: Rc<[u32]>) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = Matrix::zeros(index.len(), c);
        for (r, &i) in index.iter().enumerate() {
            if i != ZERO_ROW {
                out.row_mut(r).copy_from_slice(xv.row(i as usize));
            }
        }
        let needs = self.needs(x);
        self.push(out, Op::Gather { x, index }, needs)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() {
            return Err(Error::Config(format!("concat of {} and {} rows", av.rows(), bv.rows())));
        }
        let (ca, cb) = (av.cols(), bv.cols());
        let mut out = Matrix::zeros(av.rows(), ca + cb);
        for r in 0..av.rows() {
            let row = out.row_mut(r);
            row[..ca].copy_from_slice(av.row(r));
            row[ca..].copy_from_slice(bv.row(r));
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Concat { a, b }, needs))
    }

    /// `x·W + b` with `W: Cin × Cout`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.cols() != wv.rows() {
            return Err(Error::Config(format!("linear: input has {} channels, weight expects {}", xv.cols(), wv.rows())));
        }
        let (n, cin, cout) = (xv.rows(), xv.cols(), wv.cols());
        let mut out = Matrix::zeros(n, cout);
        if let Some(b) = b {
            if self.value(b).shape() != (1, cout) {
                return Err(Error::Config(format!("linear bias shape {:?}, expected (1, {cout})", self.value(b).shape())));
            }
            let bias = self.value(b).row(0).to_vec();
            for r in 0..n {
                out.row_mut(r).copy_from_slice(&bias);
            }
        }
        gemm(n, cin, cout, xv.data(), Layout::Normal, wv.data(), Layout::Normal, 1.0, out.data_mut());
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(out, Op::Linear { x, w, b }, needs))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        let needs = self.needs(x);
        self.push(out, Op::Relu { x }, needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.sharpened_sigmoid(x, 1.0)
    }

    /// `1 / (1 + e^{-k x})`.
    pub fn sharpened_sigmoid(&mut self, x: Var, k: f64) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = sharpened_sigmoid(*v, k));
        let needs = self.needs(x);
        self.push(out, Op::Sigmoid { x, k }, needs)
    }

    /// Per-channel normalization over the rows of one sample, then `gamma·x̂ + beta`.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let (n, c) = xv.shape();
        if self.value(gamma).shape() != (1, c) || self.value(beta).shape() != (1, c) {
            return Err(Error::Config(format!("norm parameters do not match {c} channels")));
        }
        let mut mean = vec![0.0; c];
        for r in 0..n {
            axpy(&mut mean, 1.0, xv.row(r));
        }
        mean.iter_mut().for_each(|m| *m /= n.max(1) as f64);
        let mut var = vec![0.0; c];
        for r in 0..n {
            for (ch, v) in xv.row(r).iter().enumerate() {
                var[ch] += (v - mean[ch]) * (v - mean[ch]);
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v / n.max(1) as f64 + NORM_EPS).sqrt()).collect();
        let mut xhat = Matrix::zeros(n, c);
        let mut out = Matrix::zeros(n, c);
        let (g, b) = (self.value(gamma).row(0), self.value(beta).row(0));
        for r in 0..n {
            for ch in 0..c {
                let h = (xv.get(r, ch) - mean[ch]) * inv_std[ch];
                xhat.set(r, ch, h);
                out.set(r, ch, g[ch] * h + b[ch]);
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(out, Op::Norm { x, gamma, beta, xhat, inv_std }, needs))
    }

    /// Weighted binary cross-entropy on probabilities, normalized by the total weight.
    pub fn bce(&mut self, p: Var, targets: Rc<[f64]>, weights: Option<Rc<[f64]>>) -> Result<Var> {
        let pv = self.value(p);
        check_loss_shapes(pv, &targets, weights.as_deref())?;
        let wsum = weight_sum(weights.as_deref(), targets.len());
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let w = weights.as_ref().map_or(1.0, |w| w[i]);
            let q = pv.data()[i].clamp(PROB_EPS, 1.0 - PROB_EPS);
            loss -= w * (t * q.ln() + (1.0 - t) * (1.0 - q).ln());
        }
        let value = if wsum > 0.0 { loss / wsum } else { 0.0 };
        let needs = self.needs(p);
        Ok(self.push(Matrix::scalar(value), Op::Bce { p, targets, weights, wsum }, needs))
    }

    /// Binary cross-entropy of `sigmoid(x)`; the backward pass uses the
    /// closed form `w (σ(x) - t) / Σw` with respect to the logits.
    pub fn bce_with_logits(&mut self, x: Var, targets: Rc<[f64]>, weights: Option<Rc<[f64]>>) -> Result<Var> {
        let xv = self.value(x);
        check_loss_shapes(xv, &targets, weights.as_deref())?;
        let wsum = weight_sum(weights.as_deref(), targets.len());
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let w = weights.as_ref().map_or(1.0, |w| w[i]);
            let q = sharpened_sigmoid(xv.data()[i], 1.0).clamp(PROB_EPS, 1.0 - PROB_EPS);
            loss -= w * (t * q.ln() + (1.0 - t) * (1.0 - q).ln());
        }
        let value = if wsum > 0.0 { loss / wsum } else { 0.0 };
        let needs = self.needs(x);
        Ok(self.push(Matrix::scalar(value), Op::BceLogits { x, targets, weights, wsum }, needs))
    }

    /// Mean softmax cross-entropy over rows whose label is not [`UNLABELED`].
    pub fn masked_cross_entropy(&mut self, x: Var, labels: Rc<[u32]>) -> Result<Var> {
        let xv = self.value(x);
        let (n, y) = xv.shape();
        if labels.len() != n {
            return Err(Error::Config(format!("{} labels for {n} rows", labels.len())));
        }
        let mut probs = Matrix::zeros(n, y);
        let mut loss = 0.0;
        let mut count = 0;
        for r in 0..n {
            let row = xv.row(r);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            for (ch, v) in row.iter().enumerate() {
                probs.set(r, ch, (v - m).exp() / z);
            }
            let l = labels[r];
            if l != UNLABELED {
                if l as usize >= y {
                    return Err(Error::Config(format!("label {l} outside {y} classes")));
                }
                loss -= row[l as usize] - m - z.ln();
                count += 1;
            }
        }
        let value = if count > 0 { loss / count as f64 } else { 0.0 };
        let needs = self.needs(x);
        Ok(self.push(Matrix::scalar(value), Op::SoftmaxCe { x, labels, probs, count }, needs))
    }

    /// `Σ s_i v_i` over same-shaped values.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        assert!(!terms.is_empty(), "weighted_sum of nothing");
        let shape = self.value(terms[0].0).shape();
        let mut out = Matrix::zeros(shape.0, shape.1);
        for &(v, s) in terms {
            assert_eq!(self.value(v).shape(), shape, "weighted_sum shape mismatch");
            axpy(out.data_mut(), s, self.value(v).data());
        }
        let needs = terms.iter().any(|&(v, _)| self.needs(v));
        self.push(out, Op::Sum { terms: terms.to_vec() }, needs)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward from a non-scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.backward_node(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param { store, id } => Some((store, id, i)),
                _ => None,
            })
            .collect();
        Gradients { grads, params }
    }

    fn backward_node(&self, node: &Node<'a>, g: &Matrix, grads: &mut [Option<Matrix>]) {
        match &node.op {
            Op::Leaf | Op::Param { .. } => {}
            Op::Conv { x, conf, w, b, kmap } => self.conv_backward(*x, *conf, *w, *b, kmap, g, grads),
            Op::MaxPool { x, argmax } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut dx = Matrix::zeros(xv.rows(), c);
                for (slot, &src) in argmax.iter().enumerate() {
                    let ch = slot % c;
                    let cur = dx.get(src as usize, ch);
                    dx.set(src as usize, ch, cur + g.data()[slot]);
                }
                accumulate(grads, *x, dx);
            }
            Op::Gather { x, index } => {
                let xv = self.value(*x);
                let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                for (r, &i) in index.iter().enumerate() {
                    if i != ZERO_ROW {
                        axpy(dx.row_mut(i as usize), 1.0, g.row(r));
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Concat { a, b } => {
                let ca = self.value(*a).cols();
                let cb = self.value(*b).cols();
                let n = g.rows();
                if self.needs(*a) {
                    let mut da = Matrix::zeros(n, ca);
                    for r in 0..n {
                        da.row_mut(r).copy_from_slice(&g.row(r)[..ca]);
                    }
                    accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let mut db = Matrix::zeros(n, cb);
                    for r in 0..n {
                        db.row_mut(r).copy_from_slice(&g.row(r)[ca..]);
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, cin, cout) = (xv.rows(), xv.cols(), wv.cols());
                if self.needs(*x) {
                    let mut dx = Matrix::zeros(n, cin);
                    gemm(n, cout, cin, g.data(), Layout::Normal, wv.data(), Layout::Transposed, 0.0, dx.data_mut());
                    accumulate(grads, *x, dx);
                }
                if self.needs(*w) {
                    let mut dw = Matrix::zeros(cin, cout);
                    gemm(cin, n, cout, xv.data(), Layout::Transposed, g.data(), Layout::Normal, 0.0, dw.data_mut());
                    accumulate(grads, *w, dw);
                }
                if let Some(b) = b.filter(|b| self.needs(*b)) {
                    accumulate(grads, b, column_sums(g));
                }
            }
            Op::Relu { x } => {
                let xv = self.value(*x);
                let mut dx = g.clone();
                for (d, v) in dx.data_mut().iter_mut().zip(xv.data()) {
                    if *v <= 0.0 {
                        *d = 0.0;
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Sigmoid { x, k } => {
                let mut dx = g.clone();
                for (d, s) in dx.data_mut().iter_mut().zip(node.value.data()) {
                    *d *= k * s * (1.0 - s);
                }
                accumulate(grads, *x, dx);
            }
            Op::Norm { x, gamma, beta, xhat, inv_std } => {
                let (n, c) = xhat.shape();
                let gam = self.value(*gamma).row(0);
                let mut dgamma = Matrix::zeros(1, c);
                let mut dbeta = Matrix::zeros(1, c);
                for r in 0..n {
                    for ch in 0..c {
                        dgamma.data_mut()[ch] += g.get(r, ch) * xhat.get(r, ch);
                        dbeta.data_mut()[ch] += g.get(r, ch);
                    }
                }
                if self.needs(*x) {
                    let nf = n as f64;
                    let mut dx = Matrix::zeros(n, c);
                    for ch in 0..c {
                        // With dx̂ = g·γ: dx = inv_std/n · (n dx̂ − Σdx̂ − x̂ Σ(dx̂ x̂)).
                        let s1 = dbeta.data()[ch] * gam[ch];
                        let s2 = dgamma.data()[ch] * gam[ch];
                        for r in 0..n {
                            let dh = g.get(r, ch) * gam[ch];
                            dx.set(r, ch, inv_std[ch] / nf * (nf * dh - s1 - xhat.get(r, ch) * s2));
                        }
                    }
                    accumulate(grads, *x, dx);
                }
                accumulate(grads, *gamma, dgamma);
                accumulate(grads, *beta, dbeta);
            }
            Op::Bce { p, targets, weights, wsum } => {
                let pv = self.value(*p);
                let scale = g.item() / wsum;
                let mut dp = Matrix::zeros(pv.rows(), pv.cols());
                if *wsum > 0.0 {
                    for (i, &t) in targets.iter().enumerate() {
                        let q = pv.data()[i];
                        if q > PROB_EPS && q < 1.0 - PROB_EPS {
                            let w = weights.as_ref().map_or(1.0, |w| w[i]);
                            dp.data_mut()[i] = -scale * w * (t / q - (1.0 - t) / (1.0 - q));
                        }
                    }
                }
                accumulate(grads, *p, dp);
            }
            Op::BceLogits { x, targets, weights, wsum } => {
                let xv = self.value(*x);
                let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                if *wsum > 0.0 {
                    let scale = g.item() / wsum;
                    for (i, &t) in targets.iter().enumerate() {
                        let w = weights.as_ref().map_or(1.0, |w| w[i]);
                        dx.data_mut()[i] = scale * w * (sharpened_sigmoid(xv.data()[i], 1.0) - t);
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::SoftmaxCe { x, labels, probs, count } => {
                let (n, y) = probs.shape();
                let mut dx = Matrix::zeros(n, y);
                if *count > 0 {
                    let scale = g.item() / *count as f64;
                    for r in 0..n {
                        let l = labels[r];
                        if l == UNLABELED {
                            continue;
                        }
                        let row = dx.row_mut(r);
                        for ch in 0..y {
                            let onehot = if ch as u32 == l { 1.0 } else { 0.0 };
                            row[ch] = scale * (probs.get(r, ch) - onehot);
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Sum { terms } => {
                for &(v, s) in terms {
                    if self.needs(v) {
                        let mut d = g.clone();
                        d.data_mut().iter_mut().for_each(|x| *x *= s);
                        accumulate(grads, v, d);
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        x: Var,
        conf: Option<Var>,
        w: Var,
        b: Option<Var>,
        kmap: &KernelMap,
        g: &Matrix,
        grads: &mut [Option<Matrix>],
    ) {
        let (xv, wv) = (self.value(x), self.value(w));
        let (cin, cout) = (xv.cols(), wv.cols());
        let confv = conf.map(|c| self.value(c));
        let need_x = self.needs(x);
        let need_c = conf.is_some_and(|c| self.needs(c));
        let need_w = self.needs(w);
        let mut dx = need_x.then(|| Matrix::zeros(xv.rows(), cin));
        let mut dc = need_c.then(|| Matrix::zeros(xv.rows(), 1));
        let mut dw = need_w.then(|| Matrix::zeros(wv.rows(), cout));
        let (mut xs, mut gs, mut dxs) = (Vec::new(), Vec::new(), Vec::new());
        for k in 0..kmap.volume() {
            let es = kmap.entries_for_offset(k);
            if es.is_empty() {
                continue;
            }
            let n = es.len();
            gs.clear();
            for e in es {
                gs.extend_from_slice(g.row(e.output as usize));
            }
            let wk = &wv.data()[k * cin * cout..(k + 1) * cin * cout];
            if need_x || need_c {
                dxs.resize(n * cin, 0.0);
                gemm(n, cout, cin, &gs, Layout::Normal, wk, Layout::Transposed, 0.0, &mut dxs);
                for (j, e) in es.iter().enumerate() {
                    let i = e.input as usize;
                    let d = &dxs[j * cin..(j + 1) * cin];
                    if let Some(dx) = dx.as_mut() {
                        let s = confv.map_or(1.0, |c| c.get(i, 0));
                        axpy(dx.row_mut(i), s, d);
                    }
                    if let Some(dc) = dc.as_mut() {
                        let cur = dc.get(i, 0);
                        dc.set(i, 0, cur + dot(xv.row(i), d));
                    }
                }
            }
            if let Some(dw) = dw.as_mut() {
                gather_scaled(xv, confv, es.iter().map(|e| e.input as usize), &mut xs);
                let dwk = &mut dw.data_mut()[k * cin * cout..(k + 1) * cin * cout];
                gemm(cin, n, cout, &xs, Layout::Transposed, &gs, Layout::Normal, 1.0, dwk);
            }
        }
        if let Some(dx) = dx {
            accumulate(grads, x, dx);
        }
        if let (Some(dc), Some(c)) = (dc, conf) {
            accumulate(grads, c, dc);
        }
        if let Some(dw) = dw {
            accumulate(grads, w, dw);
        }
        if let Some(b) = b.filter(|b| self.needs(*b)) {
            accumulate(grads, b, column_sums(g));
        }
    }
}

/// Gradients of every node reachable from a loss.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    params: Vec<(u64, ParamId, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    /// Adds the gradients of parameters bound from `store` into its gradient buffers.
    pub fn accumulate_into(&self, store: &mut NetworkParams) {
        for &(uid, id, node) in &self.params {
            if uid == store.uid() {
                if let Some(g) = &self.grads[node] {
                    store.accumulate_grad(id, g);
                }
            }
        }
    }
}

#[inline]
pub fn sharpened_sigmoid(x: f64, k: f64) -> f64 {
    let z = k * x;
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, d: Matrix) {
    match &mut grads[v.0] {
        Some(g) => g.add_assign(&d),
        slot @ None => *slot = Some(d),
    }
}

fn column_sums(g: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, g.cols());
    for r in 0..g.rows() {
        axpy(out.data_mut(), 1.0, g.row(r));
    }
    out
}

fn gather_scaled(x: &Matrix, conf: Option<&Matrix>, rows: impl Iterator<Item = usize>, out: &mut Vec<f64>) {
    out.clear();
    for i in rows {
        let row = x.row(i);
        match conf {
            Some(c) => {
                let s = c.get(i, 0);
                out.extend(row.iter().map(|v| v * s));
            }
            None => out.extend_from_slice(row),
        }
    }
}

fn check_loss_shapes(v: &Matrix, targets: &[f64], weights: Option<&[f64]>) -> Result<()> {
    if v.cols() != 1 || v.rows() != targets.len() {
        return Err(Error::Config(format!("loss input {:?} does not match {} targets", v.shape(), targets.len())));
    }
    if weights.is_some_and(|w| w.len() != targets.len()) {
        return Err(Error::Config("loss weights do not match targets".into()));
    }
    Ok(())
}

fn weight_sum(weights: Option<&[f64]>, n: usize) -> f64 {
    weights.map_or(n as f64, |w| w.iter().sum())
}
