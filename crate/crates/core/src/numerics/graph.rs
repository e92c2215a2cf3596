//! Dynamic computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] is rebuilt for every forward pass. Parameters live in a
//! [`ParamStore`] and are bound into the graph as leaves; [`Graph::backward`]
//! accumulates gradients back into the store.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use super::kernels;
use super::{ParamId, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Multiply-accumulate tally keyed by component scope.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MacLedger {
    counts: BTreeMap<String, u64>,
}

impl MacLedger {
    pub fn get(&self, scope: &str) -> u64 {
        self.counts.get(scope).copied().unwrap_or(0)
    }

    /// Sum over every scope starting with `prefix`.
    pub fn total_with_prefix(&self, prefix: &str) -> u64 {
        self.counts
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v)
            .sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, u64)> {
        self.counts.iter().map(|(k, v)| (k.as_str(), *v))
    }

    fn add(&mut self, scope: &str, macs: u64) {
        *self.counts.entry(scope.to_string()).or_default() += macs;
    }
}

enum Op<S> {
    Leaf,
    Param(ParamId),
    Gather { table: Var, ids: Arc<[usize]> },
    Linear { x: Var, w: Var },
    MatMul { a: Var, b: Var },
    Add(Var, Var),
    Mul(Var, Var),
    ScaleBy { x: Var, s: Var },
    RmsNorm { x: Var, gamma: Var, inv_rms: Vec<S> },
    Sigmoid(Var),
    Silu(Var),
    Rope { x: Var, n_heads: usize, seq_len: usize, cos: Vec<S>, sin: Vec<S> },
    Attention { q: Var, k: Var, v: Var, n_heads: usize, seq_len: usize, probs: Vec<S> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<S> },
    Sum(Var),
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    bound: HashMap<ParamId, Var>,
    track_grads: bool,
    scope: String,
    macs: Option<MacLedger>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    /// A graph that records everything needed for [`Graph::backward`].
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: HashMap::new(),
            track_grads: true,
            scope: String::new(),
            macs: None,
        }
    }

    /// A forward-only graph: parameters are bound as constants and no
    /// backward state is retained.
    pub fn inference() -> Self {
        Self {
            track_grads: false,
            ..Self::new()
        }
    }

    /// Turn on multiply-accumulate counting for matrix products.
    pub fn count_macs(mut self) -> Self {
        self.macs = Some(MacLedger::default());
        self
    }

    pub fn mac_ledger(&self) -> Option<&MacLedger> {
        self.macs.as_ref()
    }

    /// Run `f` with MACs attributed to `scope`.
    pub fn scoped<T>(&mut self, scope: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let prev = std::mem::replace(&mut self.scope, scope.to_string());
        let out = f(self);
        self.scope = prev;
        out
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Var {
        let requires_grad = self.track_grads && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn tally(&mut self, macs: usize) {
        if let Some(ledger) = self.macs.as_mut() {
            ledger.add(&self.scope, macs as u64);
        }
    }

    /// Constant input (never receives a gradient).
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Bind a parameter; repeated binds of the same id share one node.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let value = store.get(id).value.clone();
        let requires_grad = self.track_grads;
        self.nodes.push(Node {
            value,
            op: if requires_grad { Op::Param(id) } else { Op::Leaf },
            requires_grad,
        });
        let v = Var(self.nodes.len() - 1);
        self.bound.insert(id, v);
        v
    }

    /// Row lookup: `table[ids[i]]` for each `i`, giving `[ids.len() × d]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.shape().len() != 2 {
            return Err(Error::shape("gather", t.shape(), &[ids.len()]));
        }
        let (rows, d) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::Index {
                    what: "token",
                    index: id,
                    bound: rows,
                });
            }
            out.extend_from_slice(t.row(id));
        }
        let value = Tensor::new(&[ids.len(), d], out)?;
        Ok(self.push(
            value,
            Op::Gather {
                table,
                ids: ids.into(),
            },
            &[table],
        ))
    }

    /// `x[n×in] · wᵀ` for a weight stored as `[out×in]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if ws.len() != 2 || xs.last() != Some(&ws[1]) {
            return Err(Error::shape("linear", xs, ws));
        }
        let (n_in, n_out) = (ws[1], ws[0]);
        let rows = self.value(x).numel() / n_in.max(1);
        let wt = kernels::transpose(self.value(w).data(), n_out, n_in);
        let data = kernels::matmul(self.value(x).data(), &wt, rows, n_in, n_out);
        let mut shape = xs.to_vec();
        *shape.last_mut().unwrap() = n_out;
        self.tally(rows * n_in * n_out);
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(value, Op::Linear { x, w }, &[x, w]))
    }

    /// Plain 2-D product `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        self.tally(m * k * n);
        let value = Tensor::new(&[m, n], data)?;
        Ok(self.push(value, Op::MatMul { a, b }, &[a, b]))
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(op, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    /// Multiply every element of `x` by the single-element tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::shape("scale_by", self.shape(x), self.shape(s)));
        }
        let sv = self.value(s).data()[0];
        let tx = self.value(x);
        let value = Tensor::new(tx.shape(), tx.data().iter().map(|&v| v * sv).collect())?;
        Ok(self.push(value, Op::ScaleBy { x, s }, &[x, s]))
    }

    /// Row-wise RMS normalization over the trailing dimension with scale `gamma`.
    pub fn rmsnorm(&mut self, x: Var, gamma: Var, eps: f64) -> Result<Var> {
        if eps.is_nan() || eps < 0.0 {
            return Err(Error::InvalidArgument(format!("rmsnorm eps must be >= 0, got {eps}")));
        }
        let (tx, tg) = (self.value(x), self.value(gamma));
        let d = tx.last_dim();
        if tg.numel() != d {
            return Err(Error::shape("rmsnorm", tx.shape(), tg.shape()));
        }
        let inv = kernels::inv_rms(tx.data(), d, S::from_f64(eps));
        let g = tg.data();
        let mut data = Vec::with_capacity(tx.numel());
        for (row, &r) in tx.data().chunks_exact(d).zip(&inv) {
            data.extend(row.iter().zip(g).map(|(&v, &gg)| gg * (v * r)));
        }
        let value = Tensor::new(tx.shape(), data)?;
        Ok(self.push(
            value,
            Op::RmsNorm {
                x,
                gamma,
                inv_rms: inv,
            },
            &[x, gamma],
        ))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let value = Tensor::new(tx.shape(), tx.data().iter().map(|&v| kernels::sigmoid(v)).collect())
            .expect("same shape");
        self.push(value, Op::Sigmoid(x), &[x])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let value = Tensor::new(tx.shape(), tx.data().iter().map(|&v| kernels::silu(v)).collect())
            .expect("same shape");
        self.push(value, Op::Silu(x), &[x])
    }

    /// Rotary position embedding over `[rows × n_heads·head_dim]`, where row
    /// `r` is at position `r % seq_len`.
    pub fn rope(&mut self, x: Var, n_heads: usize, seq_len: usize, theta: f64) -> Result<Var> {
        let tx = self.value(x);
        let width = tx.last_dim();
        if n_heads == 0 || width % n_heads != 0 || seq_len == 0 || tx.rows() % seq_len != 0 {
            return Err(Error::shape("rope", tx.shape(), &[n_heads, seq_len]));
        }
        let head_dim = width / n_heads;
        let (cos, sin) = kernels::rope_tables::<S>(seq_len, head_dim, theta);
        let mut data = tx.data().to_vec();
        kernels::rope_apply(&mut data, n_heads, head_dim, seq_len, &cos, &sin, false);
        let value = Tensor::new(tx.shape(), data)?;
        Ok(self.push(
            value,
            Op::Rope {
                x,
                n_heads,
                seq_len,
                cos,
                sin,
            },
            &[x],
        ))
    }

    /// Causal scaled-dot-product attention, independently per sequence of
    /// `seq_len` rows and per head.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, n_heads: usize, seq_len: usize) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        if sq != sk || sq != sv {
            return Err(Error::shape("attention", sq, sk));
        }
        let tq = self.value(q);
        let width = tq.last_dim();
        if n_heads == 0 || width % n_heads != 0 || seq_len == 0 || tq.rows() % seq_len != 0 {
            return Err(Error::shape("attention", tq.shape(), &[n_heads, seq_len]));
        }
        let (out, probs) = kernels::attention_forward(
            tq.data(),
            self.value(k).data(),
            self.value(v).data(),
            width,
            n_heads,
            seq_len,
        );
        // QKᵀ and PV over the causal triangle.
        let n_seq = self.value(q).rows() / seq_len;
        let head_dim = width / n_heads;
        let pairs = seq_len * (seq_len + 1) / 2;
        self.tally(2 * n_seq * n_heads * pairs * head_dim);
        let value = Tensor::new(&[n_seq * seq_len, width], out)?;
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                n_heads,
                seq_len,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let vsize = tl.last_dim();
        if tl.rows() != targets.len() {
            return Err(Error::shape("cross_entropy", tl.shape(), &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vsize) {
            return Err(Error::Index {
                what: "target",
                index: bad,
                bound: vsize,
            });
        }
        let mut probs = Vec::with_capacity(tl.numel());
        let mut total = 0.0f64;
        for (row, &t) in tl.data().chunks_exact(vsize).zip(targets) {
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let denom: S = row.iter().map(|&z| (z - max).exp()).sum();
            let log_denom = denom.ln();
            total += (log_denom - (row[t] - max)).as_f64();
            probs.extend(row.iter().map(|&z| (z - max).exp() / denom));
        }
        let loss = S::from_f64(total / targets.len().max(1) as f64);
        let value = Tensor::scalar(loss);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: S = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Reverse-mode pass from a scalar node. Gradients are added (`+=`) into
    /// the `grad` of every reachable parameter in `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<S>) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    let grad = store.get_mut(*id).grad.data_mut();
                    for (g, d) in grad.iter_mut().zip(&gy) {
                        *g += *d;
                    }
                }
                Op::Gather { table, ids } => {
                    let t = self.value(*table);
                    let d = t.last_dim();
                    let mut gt = vec![S::zero(); t.numel()];
                    for (i, &id) in ids.iter().enumerate() {
                        for (a, &b) in gt[id * d..(id + 1) * d].iter_mut().zip(&gy[i * d..(i + 1) * d]) {
                            *a += b;
                        }
                    }
                    self.accumulate(&mut grads, *table, gt);
                }
                Op::Linear { x, w } => {
                    let ws = self.shape(*w);
                    let (n_out, n_in) = (ws[0], ws[1]);
                    let rows = gy.len() / n_out.max(1);
                    if self.nodes[x.0].requires_grad {
                        let dx = kernels::matmul(&gy, self.value(*w).data(), rows, n_out, n_in);
                        self.accumulate(&mut grads, *x, dx);
                    }
                    if self.nodes[w.0].requires_grad {
                        let mut dw = vec![S::zero(); n_out * n_in];
                        kernels::matmul_tn_acc(&gy, self.value(*x).data(), &mut dw, rows, n_out, n_in);
                        self.accumulate(&mut grads, *w, dw);
                    }
                }
                Op::MatMul { a, b } => {
                    let (sa, sb) = (self.shape(*a), self.shape(*b));
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    if self.nodes[a.0].requires_grad {
                        let bt = kernels::transpose(self.value(*b).data(), k, n);
                        let da = kernels::matmul(&gy, &bt, m, n, k);
                        self.accumulate(&mut grads, *a, da);
                    }
                    if self.nodes[b.0].requires_grad {
                        let mut db = vec![S::zero(); k * n];
                        kernels::matmul_tn_acc(self.value(*a).data(), &gy, &mut db, m, k, n);
                        self.accumulate(&mut grads, *b, db);
                    }
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, gy.clone());
                    self.accumulate(&mut grads, *b, gy);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                    let da = gy.iter().zip(vb).map(|(&g, &y)| g * y).collect();
                    let db = gy.iter().zip(va).map(|(&g, &x)| g * x).collect();
                    self.accumulate(&mut grads, *a, da);
                    self.accumulate(&mut grads, *b, db);
                }
                Op::ScaleBy { x, s } => {
                    let sv = self.value(*s).data()[0];
                    let vx = self.value(*x).data();
                    let ds: S = gy.iter().zip(vx).map(|(&g, &v)| g * v).sum();
                    let dx = gy.iter().map(|&g| g * sv).collect();
                    self.accumulate(&mut grads, *x, dx);
                    self.accumulate(&mut grads, *s, vec![ds]);
                }
                Op::RmsNorm { x, gamma, inv_rms } => {
                    let vx = self.value(*x).data();
                    let g = self.value(*gamma).data();
                    let d = g.len();
                    let dn = S::from_f64(d as f64);
                    let mut dx = vec![S::zero(); vx.len()];
                    let mut dg = vec![S::zero(); d];
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        let xr = &vx[r * d..(r + 1) * d];
                        let gr = &gy[r * d..(r + 1) * d];
                        let mut dot = S::zero();
                        for j in 0..d {
                            dg[j] += gr[j] * xr[j] * inv;
                            dot += g[j] * gr[j] * xr[j];
                        }
                        let coef = inv * inv * inv * dot / dn;
                        for j in 0..d {
                            dx[r * d + j] = inv * g[j] * gr[j] - coef * xr[j];
                        }
                    }
                    self.accumulate(&mut grads, *x, dx);
                    self.accumulate(&mut grads, *gamma, dg);
                }
                Op::Sigmoid(x) => {
                    let y = node.value.data();
                    let dx = gy.iter().zip(y).map(|(&g, &s)| g * s * (S::one() - s)).collect();
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::Silu(x) => {
                    let vx = self.value(*x).data();
                    let dx = gy
                        .iter()
                        .zip(vx)
                        .map(|(&g, &v)| {
                            let s = kernels::sigmoid(v);
                            g * (s + v * s * (S::one() - s))
                        })
                        .collect();
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::Rope {
                    x,
                    n_heads,
                    seq_len,
                    cos,
                    sin,
                } => {
                    let head_dim = node.value.last_dim() / n_heads;
                    let mut dx = gy;
                    kernels::rope_apply(&mut dx, *n_heads, head_dim, *seq_len, cos, sin, true);
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    n_heads,
                    seq_len,
                    probs,
                } => {
                    let width = node.value.last_dim();
                    let (dq, dk, dv) = kernels::attention_backward(
                        self.value(*q).data(),
                        self.value(*k).data(),
                        self.value(*v).data(),
                        probs,
                        &gy,
                        width,
                        *n_heads,
                        *seq_len,
                    );
                    self.accumulate(&mut grads, *q, dq);
                    self.accumulate(&mut grads, *k, dk);
                    self.accumulate(&mut grads, *v, dv);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let vsize = self.value(*logits).last_dim();
                    let scale = gy[0] / S::from_f64(targets.len().max(1) as f64);
                    let mut dl: Vec<S> = probs.iter().map(|&p| p * scale).collect();
                    for (r, &t) in targets.iter().enumerate() {
                        dl[r * vsize + t] -= scale;
                    }
                    self.accumulate(&mut grads, *logits, dl);
                }
                Op::Sum(x) => {
                    let n = self.value(*x).numel();
                    self.accumulate(&mut grads, *x, vec![gy[0]; n]);
                }
            }
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<S>>], v: Var, g: Vec<S>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (a, b) in existing.iter_mut().zip(g) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }
}
