//! Reverse-mode differentiation over a linear record of tensor operations.
//!
//! Every forward computation in the crate is written against a [`Tape`]:
//! the values are computed eagerly when an operation is recorded, and
//! [`Tape::backward`] replays the record once, newest to oldest, to produce
//! adjoints for every node that depends on a trainable leaf.

use crate::cells::{mask_entry, MaskBranch, MaskConstants};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{matvec_into, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Slot<'p, T> {
    Owned(Tensor<T>),
    Borrowed(&'p Tensor<T>),
}

impl<T> Slot<'_, T> {
    #[inline]
    fn get(&self) -> &Tensor<T> {
        match self {
            Slot::Owned(t) => t,
            Slot::Borrowed(t) => t,
        }
    }
}

enum Op<T> {
    Leaf,
    /// `w·h + u·x + b`
    Gate {
        w: Var,
        h: Var,
        u: Var,
        x: Var,
        b: Var,
    },
    /// `w·x + b`
    Linear { w: Var, x: Var, b: Var },
    Add(Var, Var),
    Mul(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    /// Soft truncation mask from a `1 × 1` portion value. `slope[i]` is
    /// `d e_i / d p`, zero on the clipped branches.
    SoftMask { p: Var, slope: Vec<T> },
    /// `e∘new + (1 − e)∘old`
    Blend { e: Var, new: Var, old: Var },
    /// `−log softmax(logits)[label]`, with the softmax kept for the adjoint.
    CrossEntropy {
        logits: Var,
        label: usize,
        probs: Vec<T>,
    },
    Mean(Vec<Var>),
    Scale(Var, T),
}

struct Node<'p, T> {
    value: Slot<'p, T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Ordered record of primitive operations.
///
/// Parameter leaves may borrow their tensors for the lifetime `'p`, so
/// registering a model costs no copies.
pub struct Tape<'p, T: Scalar> {
    nodes: Vec<Node<'p, T>>,
    branches: Vec<MaskBranch>,
    replayed: bool,
}

impl<T: Scalar> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            branches: Vec::new(),
            replayed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Slot<'p, T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn owned(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(Slot::Owned(value), op, needs_grad)
    }

    /// Trainable leaf borrowing its tensor.
    pub fn param(&mut self, t: &'p Tensor<T>) -> Var {
        self.push(Slot::Borrowed(t), Op::Leaf, true)
    }

    /// Trainable leaf owning its tensor.
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push(Slot::Owned(t), Op::Leaf, true)
    }

    /// Non-trainable leaf borrowing its tensor.
    pub fn input(&mut self, t: &'p Tensor<T>) -> Var {
        self.push(Slot::Borrowed(t), Op::Leaf, false)
    }

    /// Non-trainable leaf owning its tensor.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(Slot::Owned(t), Op::Leaf, false)
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.nodes[v.0].value.get()
    }

    /// Branch taken by every soft-mask entry so far, in recording order.
    pub fn mask_branches(&self) -> &[MaskBranch] {
        &self.branches
    }

    fn check_vector(&self, v: Var, len: usize, op: &'static str, other: (usize, usize)) -> Result<()> {
        let t = self.value(v);
        if !t.is_vector() || t.len() != len {
            return Err(Error::Dimension {
                op,
                left: other,
                right: t.shape(),
            });
        }
        Ok(())
    }

    pub fn gate(&mut self, w: Var, h: Var, u: Var, x: Var, b: Var) -> Result<Var> {
        let (wt, ut) = (self.value(w), self.value(u));
        let rows = wt.rows();
        if ut.rows() != rows {
            return Err(Error::Dimension {
                op: "gate",
                left: wt.shape(),
                right: ut.shape(),
            });
        }
        self.check_vector(h, wt.cols(), "gate", wt.shape())?;
        self.check_vector(x, ut.cols(), "gate", ut.shape())?;
        self.check_vector(b, rows, "gate", wt.shape())?;
        let mut out = vec![T::zero(); rows];
        matvec_into(self.value(w), self.value(h).data(), &mut out);
        matvec_into(self.value(u), self.value(x).data(), &mut out);
        for (o, &bi) in out.iter_mut().zip(self.value(b).data()) {
            *o += bi;
        }
        Ok(self.owned(
            Tensor::vector(out),
            Op::Gate { w, h, u, x, b },
            &[w, h, u, x, b],
        ))
    }

    pub fn linear(&mut self, w: Var, x: Var, b: Var) -> Result<Var> {
        let wt = self.value(w);
        let rows = wt.rows();
        self.check_vector(x, wt.cols(), "linear", wt.shape())?;
        self.check_vector(b, rows, "linear", wt.shape())?;
        let mut out = vec![T::zero(); rows];
        matvec_into(self.value(w), self.value(x).data(), &mut out);
        for (o, &bi) in out.iter_mut().zip(self.value(b).data()) {
            *o += bi;
        }
        Ok(self.owned(Tensor::vector(out), Op::Linear { w, x, b }, &[w, x, b]))
    }

    fn zip(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.len() != bt.len() {
            return Err(Error::Dimension {
                op,
                left: at.shape(),
                right: bt.shape(),
            });
        }
        let data = at.data().iter().zip(bt.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(at.rows(), at.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "add", |x, y| x + y)?;
        Ok(self.owned(out, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "mul", |x, y| x * y)?;
        Ok(self.owned(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).sigmoid();
        self.owned(out, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).tanh();
        self.owned(out, Op::Tanh(a), &[a])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).scale(s);
        self.owned(out, Op::Scale(a, s), &[a])
    }

    /// Soft mask of length `d` from the `1 × 1` portion value `p`.
    pub fn soft_mask(&mut self, p: Var, d: usize, mc: &MaskConstants) -> Result<Var> {
        let pt = self.value(p);
        if pt.len() != 1 {
            return Err(Error::Dimension {
                op: "soft_mask",
                left: (1, 1),
                right: pt.shape(),
            });
        }
        let pv = pt.item();
        let mut e = Vec::with_capacity(d);
        let mut slope = Vec::with_capacity(d);
        for i in 1..=d {
            let (value, branch, de_dp) = mask_entry(pv, i, d, mc);
            e.push(value);
            slope.push(de_dp);
            self.branches.push(branch);
        }
        Ok(self.owned(Tensor::vector(e), Op::SoftMask { p, slope }, &[p]))
    }

    pub fn blend(&mut self, e: Var, new: Var, old: Var) -> Result<Var> {
        let (et, nt, ot) = (self.value(e), self.value(new), self.value(old));
        if et.len() != nt.len() || nt.len() != ot.len() {
            return Err(Error::Dimension {
                op: "blend",
                left: nt.shape(),
                right: ot.shape(),
            });
        }
        let data = et
            .data()
            .iter()
            .zip(nt.data())
            .zip(ot.data())
            .map(|((&ei, &ni), &oi)| ei * ni + (T::one() - ei) * oi)
            .collect();
        Ok(self.owned(Tensor::vector(data), Op::Blend { e, new, old }, &[e, new, old]))
    }

    /// Softmax cross-entropy of one logit vector against a class id.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let lt = self.value(logits);
        if label >= lt.len() {
            return Err(Error::Label {
                label,
                num_classes: lt.len(),
            });
        }
        let (loss, probs) = softmax_xent(lt.data(), label);
        Ok(self.owned(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                label,
                probs,
            },
            &[logits],
        ))
    }

    /// Mean of `1 × 1` nodes.
    pub fn mean(&mut self, items: Vec<Var>) -> Result<Var> {
        if items.is_empty() {
            return Err(Error::Empty("mean"));
        }
        let mut acc = T::zero();
        for v in &items {
            acc += self.value(*v).item();
        }
        let out = acc / T::of(items.len() as f64);
        let needs = items.iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push(Slot::Owned(Tensor::scalar(out)), Op::Mean(items), needs))
    }

    /// Replays the record from `root` (a `1 × 1` node) with unit seed.
    pub fn backward(&mut self, root: Var) -> Result<Adjoints<T>> {
        self.backward_with(root, T::one())
    }

    /// Replays the record from `root` with adjoint `seed`. A tape can be
    /// replayed only once.
    pub fn backward_with(&mut self, root: Var, seed: T) -> Result<Adjoints<T>> {
        if self.replayed {
            return Err(Error::TapeConsumed);
        }
        if self.value(root).len() != 1 {
            return Err(Error::Contract("backward root must be a scalar node".into()));
        }
        self.replayed = true;
        let mut adj: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[root.0] = Some(vec![seed]);

        for idx in (0..=root.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    adj[idx] = Some(g);
                    continue;
                }
                Op::Gate { w, h, u, x, b } => {
                    self.matvec_adjoint(&mut adj, *w, *h, &g);
                    self.matvec_adjoint(&mut adj, *u, *x, &g);
                    self.accumulate(&mut adj, *b, |buf| add_into(buf, &g));
                }
                Op::Linear { w, x, b } => {
                    self.matvec_adjoint(&mut adj, *w, *x, &g);
                    self.accumulate(&mut adj, *b, |buf| add_into(buf, &g));
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut adj, *a, |buf| add_into(buf, &g));
                    self.accumulate(&mut adj, *b, |buf| add_into(buf, &g));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    self.accumulate(&mut adj, *a, |buf| {
                        for ((o, &gi), &bi) in buf.iter_mut().zip(&g).zip(bv) {
                            *o += gi * bi;
                        }
                    });
                    self.accumulate(&mut adj, *b, |buf| {
                        for ((o, &gi), &ai) in buf.iter_mut().zip(&g).zip(av) {
                            *o += gi * ai;
                        }
                    });
                }
                Op::Sigmoid(a) => {
                    let y = node.value.get().data();
                    self.accumulate(&mut adj, *a, |buf| {
                        for ((o, &gi), &yi) in buf.iter_mut().zip(&g).zip(y) {
                            *o += gi * yi * (T::one() - yi);
                        }
                    });
                }
                Op::Tanh(a) => {
                    let y = node.value.get().data();
                    self.accumulate(&mut adj, *a, |buf| {
                        for ((o, &gi), &yi) in buf.iter_mut().zip(&g).zip(y) {
                            *o += gi * (T::one() - yi * yi);
                        }
                    });
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    self.accumulate(&mut adj, *a, |buf| {
                        for (o, &gi) in buf.iter_mut().zip(&g) {
                            *o += gi * s;
                        }
                    });
                }
                Op::SoftMask { p, slope } => {
                    let total = g.iter().zip(slope).fold(T::zero(), |acc, (&gi, &si)| acc + gi * si);
                    self.accumulate(&mut adj, *p, |buf| buf[0] += total);
                }
                Op::Blend { e, new, old } => {
                    let (ev, nv, ov) = (
                        self.value(*e).data(),
                        self.value(*new).data(),
                        self.value(*old).data(),
                    );
                    self.accumulate(&mut adj, *e, |buf| {
                        for (i, o) in buf.iter_mut().enumerate() {
                            *o += g[i] * (nv[i] - ov[i]);
                        }
                    });
                    self.accumulate(&mut adj, *new, |buf| {
                        for (i, o) in buf.iter_mut().enumerate() {
                            *o += g[i] * ev[i];
                        }
                    });
                    self.accumulate(&mut adj, *old, |buf| {
                        for (i, o) in buf.iter_mut().enumerate() {
                            *o += g[i] * (T::one() - ev[i]);
                        }
                    });
                }
                Op::CrossEntropy {
                    logits,
                    label,
                    probs,
                } => {
                    let g0 = g[0];
                    self.accumulate(&mut adj, *logits, |buf| {
                        for (j, (o, &pj)) in buf.iter_mut().zip(probs).enumerate() {
                            let target = if j == *label { T::one() } else { T::zero() };
                            *o += g0 * (pj - target);
                        }
                    });
                }
                Op::Mean(items) => {
                    let share = g[0] / T::of(items.len() as f64);
                    for v in items {
                        self.accumulate(&mut adj, *v, |buf| buf[0] += share);
                    }
                }
            }
        }
        Ok(Adjoints {
            shapes: self.nodes.iter().map(|n| n.value.get().shape()).collect(),
            values: adj,
        })
    }

    #[inline]
    fn accumulate(&self, adj: &mut [Option<Vec<T>>], target: Var, f: impl FnOnce(&mut [T])) {
        let node = &self.nodes[target.0];
        if !node.needs_grad {
            return;
        }
        let buf = adj[target.0].get_or_insert_with(|| vec![T::zero(); node.value.get().len()]);
        f(buf);
    }

    /// Adjoints of `out = w·x` given `d out = g`.
    fn matvec_adjoint(&self, adj: &mut [Option<Vec<T>>], w: Var, x: Var, g: &[T]) {
        let wt = self.value(w);
        let xv = self.value(x).data();
        let cols = wt.cols();
        self.accumulate(adj, w, |buf| {
            for (row, &gi) in buf.chunks_exact_mut(cols).zip(g) {
                if gi == T::zero() {
                    continue;
                }
                for (o, &xj) in row.iter_mut().zip(xv) {
                    *o += gi * xj;
                }
            }
        });
        self.accumulate(adj, x, |buf| {
            for (row, &gi) in wt.data().chunks_exact(cols).zip(g) {
                if gi == T::zero() {
                    continue;
                }
                for (o, &wij) in buf.iter_mut().zip(row) {
                    *o += gi * wij;
                }
            }
        });
    }
}

#[inline]
fn add_into<T: Scalar>(buf: &mut [T], g: &[T]) {
    for (o, &gi) in buf.iter_mut().zip(g) {
        *o += gi;
    }
}

/// Loss and softmax probabilities, using max-subtraction.
pub(crate) fn softmax_xent<T: Scalar>(logits: &[T], label: usize) -> (T, Vec<T>) {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum = exps.iter().fold(T::zero(), |acc, &e| acc + e);
    let loss = sum.ln() - (logits[label] - max);
    let probs = exps.into_iter().map(|e| e / sum).collect();
    (loss, probs)
}

/// Adjoints produced by one replay of a [`Tape`].
pub struct Adjoints<T> {
    values: Vec<Option<Vec<T>>>,
    shapes: Vec<(usize, usize)>,
}

impl<T: Scalar> Adjoints<T> {
    /// Adjoint of a leaf, or `None` when the leaf does not influence the root.
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        let (r, c) = self.shapes[v.0];
        self.values[v.0]
            .as_ref()
            .map(|d| Tensor::from_vec(r, c, d.clone()).expect("adjoint shape"))
    }

    /// Adjoint of a leaf, zero-filled when absent.
    pub fn get_or_zero(&self, v: Var) -> Tensor<T> {
        let (r, c) = self.shapes[v.0];
        self.get(v).unwrap_or_else(|| Tensor::zeros(r, c))
    }

    pub(crate) fn take_into(&mut self, v: Var, dst: &mut Tensor<T>) {
        if let Some(d) = self.values[v.0].take() {
            dst.data_mut().copy_from_slice(&d);
        } else {
            dst.data_mut().iter_mut().for_each(|x| *x = T::zero());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_rule() {
        let mut tape = Tape::<f64>::new();
        let a = tape.variable(Tensor::vector(vec![2.0, 3.0]));
        let b = tape.variable(Tensor::vector(vec![5.0, 7.0]));
        let c = tape.mul(a, b).unwrap();
        let w = tape.constant(Tensor::from_f64(1, 2, &[1.0, 1.0]).unwrap());
        let z = tape.constant(Tensor::scalar(0.0));
        let s = tape.linear(w, c, z).unwrap();
        assert_eq!(tape.value(s).item(), 31.0);
        let adj = tape.backward(s).unwrap();
        assert_eq!(adj.get(a).unwrap().data(), &[5.0, 7.0]);
        assert_eq!(adj.get(b).unwrap().data(), &[2.0, 3.0]);
        assert!(adj.get(w).is_none());
    }

    #[test]
    fn second_replay_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let a = tape.variable(Tensor::scalar(1.5));
        let y = tape.tanh(a);
        tape.backward(y).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::TapeConsumed)));
    }

    #[test]
    fn fan_out_accumulates() {
        // y = sigmoid(x) * x, dy/dx = s(1-s)x + s
        let mut tape = Tape::<f64>::new();
        let x = tape.variable(Tensor::scalar(0.7));
        let s = tape.sigmoid(x);
        let y = tape.mul(s, x).unwrap();
        let adj = tape.backward(y).unwrap();
        let sv = crate::tensor::sigmoid(0.7f64);
        let expect = sv * (1.0 - sv) * 0.7 + sv;
        assert!((adj.get(x).unwrap().item() - expect).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let mut tape = Tape::<f64>::new();
        let z = tape.variable(Tensor::vector(vec![0.0, 0.0, 0.0, 0.0]));
        let l = tape.cross_entropy(z, 2).unwrap();
        assert!((tape.value(l).item() - 4f64.ln()).abs() < 1e-15);
        let g = tape.backward(l).unwrap().get(z).unwrap();
        assert_eq!(g.data(), &[0.25, 0.25, -0.75, 0.25]);
    }

    #[test]
    fn label_out_of_range() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::vector(vec![0.0; 3]));
        assert!(matches!(
            tape.cross_entropy(z, 3),
            Err(Error::Label { label: 3, num_classes: 3 })
        ));
    }
}
