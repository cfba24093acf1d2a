use super::{Real, Tensor};
use crate::error::{shape_mismatch, Error, Result};
use crate::rng::SeededRng;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Gelu,
}

/// Deliberate backward-pass corruption, used to show that the gradient
/// checker catches a broken rule.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Fault {
    #[default]
    None,
    FlipAffineWeightGrad,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Affine {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Activation {
        x: Var,
        kind: Activation,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Add {
        a: Var,
        b: Var,
    },
    MaskedMeanPool {
        x: Var,
        mask: Vec<bool>,
        count: usize,
    },
    Concat {
        a: Var,
        b: Var,
        axis: usize,
    },
    L2Normalize {
        x: Var,
        denom: Vec<T>,
        clamped: Vec<bool>,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Dropout {
        x: Var,
        scale: Vec<T>,
    },
    Dot {
        a: Var,
        b: Var,
    },
    MeanSquaredDiff {
        a: Var,
        b: Var,
    },
    KlDiv {
        logits: Var,
        teacher_probs: Vec<T>,
        student_probs: Vec<T>,
        mask: Vec<bool>,
        classes: usize,
        tau: T,
        count: usize,
    },
    Combine {
        terms: Vec<(Var, T)>,
    },
    Sum {
        x: Var,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Embedding { table, .. } => vec![*table],
            Op::Affine { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::Activation { x, .. }
            | Op::MaskedMeanPool { x, .. }
            | Op::L2Normalize { x, .. }
            | Op::Softmax { x, .. }
            | Op::Dropout { x, .. }
            | Op::Sum { x } => vec![*x],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Add { a, b } | Op::Concat { a, b, .. } | Op::Dot { a, b } | Op::MeanSquaredDiff { a, b } => vec![*a, *b],
            Op::KlDiv { logits, .. } => vec![*logits],
            Op::Combine { terms } => terms.iter().map(|(v, _)| *v).collect(),
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records executed operations in order; [`Tape::backward`] replays them in
/// reverse.
///
/// A tape belongs to one thread. Batch parallelism builds one tape per
/// sequence and sums the resulting gradients in a fixed order.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
    fault: Fault,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: cfg!(debug_assertions),
            fault: Fault::None,
        }
    }

    #[doc(hidden)]
    pub fn with_fault(mut self, fault: Fault) -> Self {
        self.fault = fault;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let inputs = op.inputs();
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        if self.check_finite && inputs.iter().all(|v| self.nodes[v.0].value.all_finite()) {
            debug_assert!(
                value.all_finite(),
                "non-finite output from {:?} on finite inputs",
                std::mem::discriminant(&op)
            );
        }
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Gathers rows of `table` (`[vocab, d]`) for each id; output `[n, d]`.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(Error::Shape(format!("embedding table must be rank 2, got {:?}", t.shape())));
        }
        let (vocab, d) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Shape(format!("token id {id} outside embedding table of {vocab} rows")));
            }
            out.extend_from_slice(&t.data()[id * d..(id + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push(value, Op::Embedding { table, ids: ids.to_vec() }))
    }

    /// `x @ w + b` for `x` of shape `[din]` or `[n, din]`, `w` of `[din, dout]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if wv.rank() != 2 || xv.rank() == 0 || xv.rank() > 2 || xv.last_dim() != wv.shape()[0] {
            return Err(shape_mismatch("affine x vs w", xv.shape(), wv.shape()));
        }
        let (din, dout) = (wv.shape()[0], wv.shape()[1]);
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != [dout] {
                return Err(shape_mismatch("affine bias vs w", bv.shape(), wv.shape()));
            }
        }
        let rows = xv.outer_len();
        let mut out = vec![T::zero(); rows * dout];
        let (xd, wd) = (xv.data(), wv.data());
        for r in 0..rows {
            let orow = &mut out[r * dout..(r + 1) * dout];
            if let Some(b) = b {
                orow.copy_from_slice(self.nodes[b.0].value.data());
            }
            for k in 0..din {
                let xk = xd[r * din + k];
                let wrow = &wd[k * dout..(k + 1) * dout];
                for (o, &w) in orow.iter_mut().zip(wrow) {
                    *o += xk * w;
                }
            }
        }
        let shape = if xv.rank() == 1 { vec![dout] } else { vec![rows, dout] };
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Affine { x, w, b }))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let value = self.value(x).map(|v| activate(kind, v));
        self.push(value, Op::Activation { x, kind })
    }

    /// Normalises over the last axis, then applies `gain * xhat + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        for p in [gain, bias] {
            if self.value(p).shape() != [d] {
                return Err(shape_mismatch("layer_norm parameter vs input", self.value(p).shape(), xv.shape()));
            }
        }
        let rows = xv.outer_len();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let eps = T::lit(eps);
        let dn = T::lit(d as f64);
        let mut xhat = vec![T::zero(); rows * d];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * d];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let inv = T::one() / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn residual_add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_mismatch("residual_add", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&p, &q)| p + q).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add { a, b }))
    }

    /// Mean over the rows of `x` (`[L, d]`) whose mask entry is true.
    pub fn masked_mean_pool(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 || xv.shape()[0] != mask.len() {
            return Err(shape_mismatch("masked_mean_pool x vs mask", xv.shape(), &[mask.len()]));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Domain("masked_mean_pool: mask has no true entries".into()));
        }
        let d = xv.shape()[1];
        let mut out = vec![T::zero(); d];
        for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            for (o, &v) in out.iter_mut().zip(&xv.data()[i * d..(i + 1) * d]) {
                *o += v;
            }
        }
        let inv = T::one() / T::lit(count as f64);
        out.iter_mut().for_each(|o| *o *= inv);
        let value = Tensor::vector(out);
        Ok(self.push(
            value,
            Op::MaskedMeanPool {
                x,
                mask: mask.to_vec(),
                count,
            },
        ))
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let compatible = av.rank() == bv.rank()
            && axis < av.rank()
            && av.shape().iter().zip(bv.shape()).enumerate().all(|(k, (p, q))| k == axis || p == q);
        if !compatible {
            return Err(shape_mismatch("concat", av.shape(), bv.shape()));
        }
        let (outer, ca, cb) = concat_geometry(av.shape(), bv.shape(), axis);
        let mut out = Vec::with_capacity(av.len() + bv.len());
        for o in 0..outer {
            out.extend_from_slice(&av.data()[o * ca..(o + 1) * ca]);
            out.extend_from_slice(&bv.data()[o * cb..(o + 1) * cb]);
        }
        let mut shape = av.shape().to_vec();
        shape[axis] += bv.shape()[axis];
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Concat { a, b, axis }))
    }

    /// Divides each last-axis row by `max(||row||, eps)`.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let d = xv.last_dim();
        let rows = xv.outer_len();
        let eps = T::lit(eps);
        let mut denom = Vec::with_capacity(rows);
        let mut clamped = Vec::with_capacity(rows);
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            let m = if n > eps { n } else { eps };
            denom.push(m);
            clamped.push(n <= eps);
            for (o, &v) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = v / m;
            }
        }
        let value = Tensor {
            shape: xv.shape().to_vec(),
            data: out,
        };
        self.push(value, Op::L2Normalize { x, denom, clamped })
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.rank().max(1) {
            return Err(Error::Shape(format!("softmax axis {axis} out of range for shape {:?}", xv.shape())));
        }
        let (outer, len, inner) = axis_geometry(xv.shape(), axis);
        let mut out = xv.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| o * len * inner + k * inner + i;
                let mx = (0..len).map(|k| out[idx(k)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for k in 0..len {
                    let e = (out[idx(k)] - mx).exp();
                    out[idx(k)] = e;
                    z += e;
                }
                for k in 0..len {
                    out[idx(k)] = out[idx(k)] / z;
                }
            }
        }
        let value = Tensor {
            shape: xv.shape().to_vec(),
            data: out,
        };
        Ok(self.push(value, Op::Softmax { x, axis }))
    }

    /// Inverted dropout: zero each element with probability `p`, scale the
    /// survivors by `1 / (1 - p)`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut SeededRng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let xv = self.value(x);
        let scale: Vec<T> = (0..xv.len()).map(|_| if rng.uniform() < p { T::zero() } else { keep }).collect();
        let data = xv.data().iter().zip(&scale).map(|(&v, &s)| v * s).collect();
        let value = Tensor {
            shape: xv.shape().to_vec(),
            data,
        };
        Ok(self.push(value, Op::Dropout { x, scale }))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_mismatch("dot", av.shape(), bv.shape()));
        }
        let s = av.data().iter().zip(bv.data()).map(|(&p, &q)| p * q).sum();
        Ok(self.push(Tensor::scalar(s), Op::Dot { a, b }))
    }

    /// `(1/n) * sum((a - b)^2)`.
    pub fn mean_squared_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_mismatch("mse", av.shape(), bv.shape()));
        }
        let n = T::lit(av.len().max(1) as f64);
        let s = av.data().iter().zip(bv.data()).map(|(&p, &q)| (p - q) * (p - q)).sum::<T>() / n;
        Ok(self.push(Tensor::scalar(s), Op::MeanSquaredDiff { a, b }))
    }

    /// Mean over unmasked rows of `KL(softmax(t/tau) || softmax(s/tau))`,
    /// where `s` is `student_logits` (`[L, C]`) and `t` is the constant
    /// `teacher_logits`.
    pub fn kl_div(&mut self, student_logits: Var, teacher_logits: &Tensor<T>, mask: &[bool], tau: f64) -> Result<Var> {
        let sv = self.value(student_logits);
        if sv.shape() != teacher_logits.shape() {
            return Err(shape_mismatch("kl logits", sv.shape(), teacher_logits.shape()));
        }
        if sv.rank() != 2 || sv.shape()[0] != mask.len() {
            return Err(shape_mismatch("kl logits vs mask", sv.shape(), &[mask.len()]));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Domain("kl_div: mask has no true entries".into()));
        }
        let classes = sv.shape()[1];
        let inv_tau = T::lit(1.0 / tau);
        let teacher_probs = softmax_rows(teacher_logits.data(), classes, inv_tau);
        let student_probs = softmax_rows(sv.data(), classes, inv_tau);
        let t_log = log_softmax_rows(teacher_logits.data(), classes, inv_tau);
        let s_log = log_softmax_rows(sv.data(), classes, inv_tau);
        let mut total = T::zero();
        for (r, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            for c in 0..classes {
                let i = r * classes + c;
                if teacher_probs[i] > T::zero() {
                    total += teacher_probs[i] * (t_log[i] - s_log[i]);
                }
            }
        }
        let value = Tensor::scalar(total / T::lit(count as f64));
        Ok(self.push(
            value,
            Op::KlDiv {
                logits: student_logits,
                teacher_probs,
                student_probs,
                mask: mask.to_vec(),
                classes,
                tau: T::lit(tau),
                count,
            },
        ))
    }

    /// `constant + sum(w_i * x_i)` over same-shaped inputs.
    pub fn combine(&mut self, terms: &[(Var, f64)], constant: f64) -> Result<Var> {
        let Some(&(first, _)) = terms.first() else {
            return Err(Error::Contract("combine needs at least one term".into()));
        };
        let shape = self.value(first).shape().to_vec();
        let mut out = vec![T::lit(constant); self.value(first).len()];
        for &(v, w) in terms {
            let vv = self.value(v);
            if vv.shape() != shape.as_slice() {
                return Err(shape_mismatch("combine", vv.shape(), &shape));
            }
            let w = T::lit(w);
            for (o, &x) in out.iter_mut().zip(vv.data()) {
                *o += w * x;
            }
        }
        let value = Tensor::new(shape, out)?;
        let terms = terms.iter().map(|&(v, w)| (v, T::lit(w))).collect();
        Ok(self.push(value, Op::Combine { terms }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum { x })
    }

    /// Reverse sweep from a scalar `loss`. Every trainable leaf gets a
    /// gradient entry; leaves the loss does not reach get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::Contract(format!("backward needs a scalar loss, got shape {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(lv.shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Embedding { table, ids } => {
                if let Some(buf) = self.grad_buf(grads, *table) {
                    let d = self.value(*table).shape()[1];
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, &v) in buf[id * d..(id + 1) * d].iter_mut().zip(&gd[r * d..(r + 1) * d]) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Affine { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (din, dout) = (wv.shape()[0], wv.shape()[1]);
                let rows = xv.outer_len();
                if let Some(buf) = self.grad_buf(grads, *x) {
                    for r in 0..rows {
                        let grow = &gd[r * dout..(r + 1) * dout];
                        for k in 0..din {
                            let wrow = &wv.data()[k * dout..(k + 1) * dout];
                            let s: T = grow.iter().zip(wrow).map(|(&p, &q)| p * q).sum();
                            buf[r * din + k] += s;
                        }
                    }
                }
                let sign = if self.fault == Fault::FlipAffineWeightGrad {
                    -T::one()
                } else {
                    T::one()
                };
                if let Some(buf) = self.grad_buf(grads, *w) {
                    for r in 0..rows {
                        let grow = &gd[r * dout..(r + 1) * dout];
                        for k in 0..din {
                            let xk = sign * xv.data()[r * din + k];
                            for (o, &gj) in buf[k * dout..(k + 1) * dout].iter_mut().zip(grow) {
                                *o += xk * gj;
                            }
                        }
                    }
                }
                if let Some(b) = b {
                    if let Some(buf) = self.grad_buf(grads, *b) {
                        for r in 0..rows {
                            for (o, &gj) in buf.iter_mut().zip(&gd[r * dout..(r + 1) * dout]) {
                                *o += gj;
                            }
                        }
                    }
                }
            }
            Op::Activation { x, kind } => {
                let xv = self.value(*x);
                if let Some(buf) = self.grad_buf(grads, *x) {
                    for ((o, &v), &gi) in buf.iter_mut().zip(xv.data()).zip(gd) {
                        *o += gi * activate_grad(*kind, v);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = self.value(*x).last_dim();
                let rows = inv_std.len();
                let gn = self.value(*gain).data().to_vec();
                if let Some(buf) = self.grad_buf(grads, *x) {
                    let dn = T::lit(d as f64);
                    for r in 0..rows {
                        let gr = &gd[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..d {
                            let dh = gr[j] * gn[j];
                            s1 += dh;
                            s2 += dh * hr[j];
                        }
                        let k = inv_std[r] / dn;
                        for j in 0..d {
                            let dh = gr[j] * gn[j];
                            buf[r * d + j] += k * (dn * dh - s1 - hr[j] * s2);
                        }
                    }
                }
                if let Some(buf) = self.grad_buf(grads, *gain) {
                    for r in 0..rows {
                        for j in 0..d {
                            buf[j] += gd[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if let Some(buf) = self.grad_buf(grads, *bias) {
                    for r in 0..rows {
                        for j in 0..d {
                            buf[j] += gd[r * d + j];
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if let Some(buf) = self.grad_buf(grads, v) {
                        for (o, &gi) in buf.iter_mut().zip(gd) {
                            *o += gi;
                        }
                    }
                }
            }
            Op::MaskedMeanPool { x, mask, count } => {
                let d = self.value(*x).shape()[1];
                if let Some(buf) = self.grad_buf(grads, *x) {
                    let inv = T::one() / T::lit(*count as f64);
                    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                        for (o, &gj) in buf[i * d..(i + 1) * d].iter_mut().zip(gd) {
                            *o += gj * inv;
                        }
                    }
                }
            }
            Op::Concat { a, b, axis } => {
                let (sa, sb) = (self.value(*a).shape().to_vec(), self.value(*b).shape().to_vec());
                let (outer, ca, cb) = concat_geometry(&sa, &sb, *axis);
                if let Some(buf) = self.grad_buf(grads, *a) {
                    for o in 0..outer {
                        let src = &gd[o * (ca + cb)..o * (ca + cb) + ca];
                        for (p, &q) in buf[o * ca..(o + 1) * ca].iter_mut().zip(src) {
                            *p += q;
                        }
                    }
                }
                if let Some(buf) = self.grad_buf(grads, *b) {
                    for o in 0..outer {
                        let src = &gd[o * (ca + cb) + ca..(o + 1) * (ca + cb)];
                        for (p, &q) in buf[o * cb..(o + 1) * cb].iter_mut().zip(src) {
                            *p += q;
                        }
                    }
                }
            }
            Op::L2Normalize { x, denom, clamped } => {
                let y = node.value.data();
                let d = node.value.last_dim();
                if let Some(buf) = self.grad_buf(grads, *x) {
                    for r in 0..denom.len() {
                        let yr = &y[r * d..(r + 1) * d];
                        let gr = &gd[r * d..(r + 1) * d];
                        let proj = if clamped[r] {
                            T::zero()
                        } else {
                            yr.iter().zip(gr).map(|(&p, &q)| p * q).sum()
                        };
                        for j in 0..d {
                            buf[r * d + j] += (gr[j] - yr[j] * proj) / denom[r];
                        }
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = axis_geometry(node.value.shape(), *axis);
                if let Some(buf) = self.grad_buf(grads, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |k: usize| o * len * inner + k * inner + i;
                            let s: T = (0..len).map(|k| gd[idx(k)] * y[idx(k)]).sum();
                            for k in 0..len {
                                buf[idx(k)] += y[idx(k)] * (gd[idx(k)] - s);
                            }
                        }
                    }
                }
            }
            Op::Dropout { x, scale } => {
                if let Some(buf) = self.grad_buf(grads, *x) {
                    for ((o, &s), &gi) in buf.iter_mut().zip(scale).zip(gd) {
                        *o += gi * s;
                    }
                }
            }
            Op::Dot { a, b } => {
                let g0 = gd[0];
                let (av, bv) = (self.value(*a).data().to_vec(), self.value(*b).data().to_vec());
                if let Some(buf) = self.grad_buf(grads, *a) {
                    for (o, &q) in buf.iter_mut().zip(&bv) {
                        *o += g0 * q;
                    }
                }
                if let Some(buf) = self.grad_buf(grads, *b) {
                    for (o, &p) in buf.iter_mut().zip(&av) {
                        *o += g0 * p;
                    }
                }
            }
            Op::MeanSquaredDiff { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let k = gd[0] * T::lit(2.0 / av.len().max(1) as f64);
                let diff: Vec<T> = av.data().iter().zip(bv.data()).map(|(&p, &q)| k * (p - q)).collect();
                if let Some(buf) = self.grad_buf(grads, *a) {
                    for (o, &v) in buf.iter_mut().zip(&diff) {
                        *o += v;
                    }
                }
                if let Some(buf) = self.grad_buf(grads, *b) {
                    for (o, &v) in buf.iter_mut().zip(&diff) {
                        *o -= v;
                    }
                }
            }
            Op::KlDiv {
                logits,
                teacher_probs,
                student_probs,
                mask,
                classes,
                tau,
                count,
            } => {
                if let Some(buf) = self.grad_buf(grads, *logits) {
                    let k = gd[0] / (*tau * T::lit(*count as f64));
                    for (r, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                        for c in 0..*classes {
                            let i = r * classes + c;
                            buf[i] += k * (student_probs[i] - teacher_probs[i]);
                        }
                    }
                }
            }
            Op::Combine { terms } => {
                for &(v, w) in terms {
                    if let Some(buf) = self.grad_buf(grads, v) {
                        for (o, &gi) in buf.iter_mut().zip(gd) {
                            *o += w * gi;
                        }
                    }
                }
            }
            Op::Sum { x } => {
                let g0 = gd[0];
                if let Some(buf) = self.grad_buf(grads, *x) {
                    buf.iter_mut().for_each(|o| *o += g0);
                }
            }
        }
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Tensor<T>>], v: Var) -> Option<&'g mut [T]> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(node.value.shape())).data_mut())
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn activate<T: Real>(kind: Activation, x: T) -> T {
    match kind {
        Activation::Tanh => x.tanh(),
        Activation::Gelu => {
            let u = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
            T::lit(0.5) * x * (T::one() + u.tanh())
        }
    }
}

fn activate_grad<T: Real>(kind: Activation, x: T) -> T {
    match kind {
        Activation::Tanh => {
            let t = x.tanh();
            T::one() - t * t
        }
        Activation::Gelu => {
            let u = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
            let t = u.tanh();
            let du = T::lit(GELU_C) * (T::one() + T::lit(3.0 * GELU_A) * x * x);
            T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * du
        }
    }
}

/// `(outer, len, inner)` strides for reducing along `axis`.
fn axis_geometry(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    if shape.is_empty() {
        return (1, 1, 1);
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// `(outer, chunk_a, chunk_b)` for interleaving along `axis`.
fn concat_geometry(sa: &[usize], sb: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = sa[..axis].iter().product();
    let inner: usize = sa[axis + 1..].iter().product();
    (outer, sa[axis] * inner, sb[axis] * inner)
}

fn softmax_rows<T: Real>(x: &[T], classes: usize, inv_tau: T) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(classes) {
        let mx = row.iter().map(|&v| v * inv_tau).fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v * inv_tau - mx).exp()).collect();
        let z: T = exps.iter().copied().sum();
        out.extend(exps.into_iter().map(|e| e / z));
    }
    out
}

fn log_softmax_rows<T: Real>(x: &[T], classes: usize, inv_tau: T) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(classes) {
        let mx = row.iter().map(|&v| v * inv_tau).fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&v| (v * inv_tau - mx).exp()).sum::<T>().ln() + mx;
        out.extend(row.iter().map(|&v| v * inv_tau - lse));
    }
    out
}
