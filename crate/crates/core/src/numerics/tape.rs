//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! Every operation appends a node holding its output value and the op that
//! produced it. Nodes are only ever appended, so the node order is already a
//! topological order and `backward` is a single reverse sweep.
//!
//! Broadcasting is never implicit. The only mixed-shape arithmetic is
//! tensor-with-scalar (`add_scalar`, `mul_scalar`); anything else goes through
//! an explicit `broadcast_to`.

use crate::error::{Error, Result};
use crate::numerics::tensor::{strides, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Index that makes [`Tape::gather`] emit a zero.
pub const GATHER_PAD: u32 = u32::MAX;

/// Sparse Jacobian of a custom op: `(output index, input index, partial)`.
pub type SparseJacobian = Vec<(u32, u32, f64)>;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Matmul(Var, Var),
    Sin(Var),
    Cos(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Sigmoid(Var),
    Relu(Var),
    Abs(Var),
    Powf(Var, f64),
    Softmax(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize),
    BroadcastTo(Var),
    SumAxis(Var, usize),
    SumAll(Var),
    BilinearGather(Var, Var),
    Gather(Var, Vec<u32>),
    Jacobian(Var, SparseJacobian),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Computation record for one forward pass.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Constant copy of `v`; gradients do not flow through it.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to leaf `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NumericOverflow { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape(), data)?;
        self.push(name, out, op, &[a, b])
    }

    fn unary(&mut self, name: &'static str, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let out = self.value(a).map(f);
        self.push(name, out, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("add_scalar", a, Op::AddScalar(a), |x| x + c)
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("mul_scalar", a, Op::MulScalar(a, c), |x| x * c)
    }

    pub fn sin(&mut self, a: Var) -> Result<Var> {
        self.unary("sin", a, Op::Sin(a), f64::sin)
    }

    pub fn cos(&mut self, a: Var) -> Result<Var> {
        self.unary("cos", a, Op::Cos(a), f64::cos)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary("log", a, Op::Log(a), f64::ln)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary("sqrt", a, Op::Sqrt(a), f64::sqrt)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, Op::Sigmoid(a), sigmoid)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary("abs", a, Op::Abs(a), f64::abs)
    }

    /// `x^p` for non-negative `x`.
    pub fn powf(&mut self, a: Var, p: f64) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x < 0.0) {
            return Err(Error::InvalidArgument("powf of a negative value".into()));
        }
        self.unary("powf", a, Op::Powf(a, p), |x| x.powf(p))
    }

    /// Matrix product of `[m, k] x [k, n]`, or batched `[b, m, k] x [b, k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let dims = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => (1, *m, *k, *n),
            ([b1, m, k], [b2, k2, n]) if k == k2 && b1 == b2 => (*b1, *m, *k, *n),
            _ => return Err(Error::shape("matmul", format!("{:?} x {:?}", sa, sb))),
        };
        let (bt, m, k, n) = dims;
        let mut out = vec![0.0; bt * m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, bt, m, k, n);
        let shape: Vec<usize> = if sa.len() == 2 { vec![m, n] } else { vec![bt, m, n] };
        let out = Tensor::new(&shape, out)?;
        self.push("matmul", out, Op::Matmul(a, b), &[a, b])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let last = *v
            .shape()
            .last()
            .ok_or_else(|| Error::shape("softmax", "scalar input"))?;
        let mut data = v.data().to_vec();
        if last > 0 {
            for row in data.chunks_mut(last) {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for x in row.iter_mut() {
                    *x = (*x - m).exp();
                    s += *x;
                }
                for x in row.iter_mut() {
                    *x /= s;
                }
            }
        }
        let out = Tensor::new(v.shape(), data)?;
        self.push("softmax", out, Op::Softmax(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape)?;
        self.push("reshape", out, Op::Reshape(a), &[a])
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let v = self.value(a);
        let rank = v.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", format!("{:?} on {:?}", perm, v.shape())));
        }
        let out = permute_tensor(v, perm);
        self.push("permute", out, Op::Permute(a, perm.to_vec()), &[a])
    }

    /// Swaps the two axes of a matrix.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.value(a).rank() != 2 {
            return Err(Error::shape("transpose", format!("{:?}", self.shape(a))));
        }
        self.permute(a, &[1, 0])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {} on {:?}", axis, base)));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let ok = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                return Err(Error::shape("concat", format!("{:?} vs {:?}", s, base)));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let v = self.value(*p);
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::new(&shape, data)?;
        self.push("concat", out, Op::Concat(parts.to_vec(), axis), parts)
    }

    /// Range `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start > end || end > s[axis] {
            return Err(Error::shape(
                "slice",
                format!("{}..{} on axis {} of {:?}", start, end, axis, s),
            ));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let v = self.value(a).data();
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * s[axis] * inner;
            data.extend_from_slice(&v[base + start * inner..base + end * inner]);
        }
        let mut shape = s;
        shape[axis] = end - start;
        let out = Tensor::new(&shape, data)?;
        self.push("slice", out, Op::Slice(a, axis, start), &[a])
    }

    /// Explicit broadcast: same rank, every input dim equals the target or is 1.
    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != shape.len() || s.iter().zip(shape).any(|(&x, &y)| x != y && x != 1) {
            return Err(Error::shape("broadcast_to", format!("{:?} -> {:?}", s, shape)));
        }
        let out = broadcast_tensor(self.value(a), shape);
        self.push("broadcast_to", out, Op::BroadcastTo(a), &[a])
    }

    /// Sum along `axis`, keeping it with size 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(Error::shape("sum_axis", format!("axis {} of {:?}", axis, s)));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let v = self.value(a).data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..s[axis] {
                let base = (o * s[axis] + k) * inner;
                for i in 0..inner {
                    data[o * inner + i] += v[base + i];
                }
            }
        }
        let mut shape = s;
        shape[axis] = 1;
        let out = Tensor::new(&shape, data)?;
        self.push("sum_axis", out, Op::SumAxis(a, axis), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push("sum", out, Op::SumAll(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a)?;
        self.mul_scalar(s, 1.0 / n)
    }

    /// Bilinear sampling of a channel-last map with zero padding.
    ///
    /// `fmap` is `[H, W, C]`; `coords` is `[N, G, P, 2]` holding `(x, y)` in
    /// cell units where cell `(i, j)` has its center at `(j, i)`. Group `g`
    /// reads channel block `g * C/G .. (g + 1) * C/G`. Output `[N, G, P, C/G]`.
    pub fn bilinear_gather(&mut self, fmap: Var, coords: Var) -> Result<Var> {
        let fs = self.shape(fmap).to_vec();
        let cs = self.shape(coords).to_vec();
        let (h, w, c) = match fs.as_slice() {
            [h, w, c] => (*h, *w, *c),
            _ => return Err(Error::shape("bilinear_gather", format!("feature map {:?}", fs))),
        };
        let (n, g, p) = match cs.as_slice() {
            [n, g, p, 2] => (*n, *g, *p),
            _ => return Err(Error::shape("bilinear_gather", format!("coords {:?}", cs))),
        };
        if g == 0 || c % g != 0 {
            return Err(Error::shape(
                "bilinear_gather",
                format!("{} channels over {} groups", c, g),
            ));
        }
        let cg = c / g;
        let f = self.value(fmap).data();
        let xy = self.value(coords).data();
        let mut out = vec![0.0; n * g * p * cg];
        for q in 0..n * g * p {
            let group = (q / p) % g;
            let taps = bilinear_taps(xy[2 * q], xy[2 * q + 1], h, w);
            let dst = &mut out[q * cg..(q + 1) * cg];
            for (cell, weight) in taps.iter().flatten() {
                let src = &f[cell * c + group * cg..cell * c + (group + 1) * cg];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += weight * s;
                }
            }
        }
        let out = Tensor::new(&[n, g, p, cg], out)?;
        self.push(
            "bilinear_gather",
            out,
            Op::BilinearGather(fmap, coords),
            &[fmap, coords],
        )
    }

    /// `out[i] = a[indices[i]]`, or 0 where the index is [`GATHER_PAD`].
    pub fn gather(&mut self, a: Var, shape: &[usize], indices: Vec<u32>) -> Result<Var> {
        let src = self.value(a).data();
        if shape.iter().product::<usize>() != indices.len()
            || indices.iter().any(|&i| i != GATHER_PAD && i as usize >= src.len())
        {
            return Err(Error::shape(
                "gather",
                format!("{} indices into {:?}", indices.len(), self.shape(a)),
            ));
        }
        let data = indices
            .iter()
            .map(|&i| if i == GATHER_PAD { 0.0 } else { src[i as usize] })
            .collect();
        let out = Tensor::new(shape, data)?;
        self.push("gather", out, Op::Gather(a, indices), &[a])
    }

    /// Rows `rows` of a matrix, in order.
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let (n, m) = match s.as_slice() {
            [n, m] => (*n, *m),
            _ => return Err(Error::shape("select_rows", format!("{:?}", s))),
        };
        if let Some(r) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::shape("select_rows", format!("row {} of {}", r, n)));
        }
        let idx = rows
            .iter()
            .flat_map(|&r| (0..m).map(move |j| (r * m + j) as u32))
            .collect();
        self.gather(a, &[rows.len(), m], idx)
    }

    /// Records an op whose forward value and sparse Jacobian were computed
    /// elsewhere (e.g. by forward-mode dual numbers).
    pub fn custom(&mut self, name: &'static str, input: Var, value: Tensor, jacobian: SparseJacobian) -> Result<Var> {
        let n_in = self.value(input).len();
        let n_out = value.len();
        if jacobian
            .iter()
            .any(|&(o, i, _)| o as usize >= n_out || i as usize >= n_in)
        {
            return Err(Error::shape(name, "jacobian index out of range"));
        }
        self.push(name, value, Op::Jacobian(input, jacobian), &[input])
    }

    /// Dispatch by primitive name for ops that take no attributes.
    pub fn evaluate(&mut self, op: &str, inputs: &[Var]) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!(
                    "{} takes {} inputs, got {}",
                    op,
                    n,
                    inputs.len()
                )))
            }
        };
        match op {
            "add" => arity(2).and_then(|_| self.add(inputs[0], inputs[1])),
            "sub" => arity(2).and_then(|_| self.sub(inputs[0], inputs[1])),
            "mul" => arity(2).and_then(|_| self.mul(inputs[0], inputs[1])),
            "matmul" => arity(2).and_then(|_| self.matmul(inputs[0], inputs[1])),
            "bilinear-gather" => arity(2).and_then(|_| self.bilinear_gather(inputs[0], inputs[1])),
            "sin" => arity(1).and_then(|_| self.sin(inputs[0])),
            "cos" => arity(1).and_then(|_| self.cos(inputs[0])),
            "exp" => arity(1).and_then(|_| self.exp(inputs[0])),
            "log" => arity(1).and_then(|_| self.log(inputs[0])),
            "sqrt" => arity(1).and_then(|_| self.sqrt(inputs[0])),
            "sigmoid" => arity(1).and_then(|_| self.sigmoid(inputs[0])),
            "relu" => arity(1).and_then(|_| self.relu(inputs[0])),
            "abs" => arity(1).and_then(|_| self.abs(inputs[0])),
            "softmax" => arity(1).and_then(|_| self.softmax(inputs[0])),
            "transpose" => arity(1).and_then(|_| self.transpose(inputs[0])),
            "sum" => arity(1).and_then(|_| self.sum(inputs[0])),
            "concatenate" => self.concat(inputs, 0),
            other => Err(Error::InvalidArgument(format!("unknown primitive '{}'", other))),
        }
    }

    /// Populates `grad` on every leaf that requires it.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.requires_grad(loss) {
            return Err(Error::Backward("loss does not depend on any trainable leaf".into()));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
        }
        for (i, g) in grads.into_iter().enumerate() {
            let node = &mut self.nodes[i];
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let data = g.unwrap_or_else(|| vec![0.0; node.value.len()]);
                node.grad = Some(Tensor::new(node.value.shape(), data)?);
            }
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        // Accumulates into the gradient buffer of `v` if it needs one.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * vb[k];
                    }
                });
                acc(*b, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * va[k];
                    }
                });
            }
            Op::AddScalar(a) => acc(*a, &mut |d| add_into(d, g)),
            Op::MulScalar(a, c) => acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g * c)),
            Op::Matmul(a, b) => {
                let sa = self.nodes[a.0].value.shape();
                let sb = self.nodes[b.0].value.shape();
                let (bt, m, k, n) = if sa.len() == 2 {
                    (1, sa[0], sa[1], sb[1])
                } else {
                    (sa[0], sa[1], sa[2], sb[2])
                };
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    // dA = dC · Bᵀ
                    for t in 0..bt {
                        for r in 0..m {
                            let grow = &g[t * m * n + r * n..t * m * n + (r + 1) * n];
                            for q in 0..k {
                                let brow = &vb[t * k * n + q * n..t * k * n + (q + 1) * n];
                                d[t * m * k + r * k + q] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                            }
                        }
                    }
                });
                acc(*b, &mut |d| {
                    // dB = Aᵀ · dC
                    for t in 0..bt {
                        for r in 0..m {
                            for q in 0..k {
                                let av = va[t * m * k + r * k + q];
                                if av == 0.0 {
                                    continue;
                                }
                                let drow = &mut d[t * k * n + q * n..t * k * n + (q + 1) * n];
                                let grow = &g[t * m * n + r * n..t * m * n + (r + 1) * n];
                                for (dv, gv) in drow.iter_mut().zip(grow) {
                                    *dv += av * gv;
                                }
                            }
                        }
                    }
                });
            }
            Op::Sin(a) => {
                let x = val(*a);
                acc(*a, &mut |d| (0..d.len()).for_each(|k| d[k] += g[k] * x[k].cos()));
            }
            Op::Cos(a) => {
                let x = val(*a);
                acc(*a, &mut |d| (0..d.len()).for_each(|k| d[k] -= g[k] * x[k].sin()));
            }
            Op::Exp(a) => acc(*a, &mut |d| (0..d.len()).for_each(|k| d[k] += g[k] * out[k])),
            Op::Log(a) => {
                let x = val(*a);
                acc(*a, &mut |d| (0..d.len()).for_each(|k| d[k] += g[k] / x[k]));
            }
            Op::Sqrt(a) => acc(*a, &mut |d| (0..d.len()).for_each(|k| d[k] += g[k] * 0.5 / out[k])),
            Op::Sigmoid(a) => acc(*a, &mut |d| {
                (0..d.len()).for_each(|k| d[k] += g[k] * out[k] * (1.0 - out[k]))
            }),
            Op::Relu(a) => {
                let x = val(*a);
                acc(*a, &mut |d| {
                    (0..d.len()).for_each(|k| {
                        if x[k] > 0.0 {
                            d[k] += g[k]
                        }
                    })
                });
            }
            Op::Abs(a) => {
                let x = val(*a);
                acc(*a, &mut |d| {
                    (0..d.len()).for_each(|k| {
                        if x[k] > 0.0 {
                            d[k] += g[k]
                        } else if x[k] < 0.0 {
                            d[k] -= g[k]
                        }
                    })
                });
            }
            Op::Powf(a, p) => {
                let x = val(*a);
                acc(*a, &mut |d| {
                    (0..d.len()).for_each(|k| {
                        if x[k] > 0.0 || *p >= 1.0 {
                            d[k] += g[k] * p * x[k].powf(p - 1.0)
                        }
                    })
                });
            }
            Op::Softmax(a) => {
                let last = *node.value.shape().last().unwrap_or(&1);
                acc(*a, &mut |d| {
                    for r in 0..out.len() / last.max(1) {
                        let y = &out[r * last..(r + 1) * last];
                        let gy = &g[r * last..(r + 1) * last];
                        let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                        for j in 0..last {
                            d[r * last + j] += y[j] * (gy[j] - dot);
                        }
                    }
                });
            }
            Op::Reshape(a) => acc(*a, &mut |d| add_into(d, g)),
            Op::Permute(a, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let gt = Tensor::new(node.value.shape(), g.to_vec()).expect("grad shape");
                let back = permute_tensor(&gt, &inv);
                acc(*a, &mut |d| add_into(d, back.data()));
            }
            Op::Concat(parts, axis) => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let mut offset = 0;
                for p in parts {
                    let width = self.nodes[p.0].value.shape()[*axis];
                    acc(*p, &mut |d| {
                        let chunk = width * inner;
                        for o in 0..outer {
                            let src = o * shape[*axis] * inner + offset * inner;
                            add_into(&mut d[o * chunk..(o + 1) * chunk], &g[src..src + chunk]);
                        }
                    });
                    offset += width;
                }
            }
            Op::Slice(a, axis, start) => {
                let src_shape = self.nodes[a.0].value.shape();
                let len = node.value.shape()[*axis];
                let outer: usize = src_shape[..*axis].iter().product();
                let inner: usize = src_shape[axis + 1..].iter().product();
                acc(*a, &mut |d| {
                    for o in 0..outer {
                        let dst = o * src_shape[*axis] * inner + start * inner;
                        add_into(
                            &mut d[dst..dst + len * inner],
                            &g[o * len * inner..(o + 1) * len * inner],
                        );
                    }
                });
            }
            Op::BroadcastTo(a) => {
                let in_shape = self.nodes[a.0].value.shape().to_vec();
                let out_shape = node.value.shape();
                acc(*a, &mut |d| {
                    for_each_broadcast(&in_shape, out_shape, |o, i| d[i] += g[o]);
                });
            }
            Op::SumAxis(a, axis) => {
                let s = self.nodes[a.0].value.shape();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                acc(*a, &mut |d| {
                    for o in 0..outer {
                        for k in 0..s[*axis] {
                            let base = (o * s[*axis] + k) * inner;
                            for i in 0..inner {
                                d[base + i] += g[o * inner + i];
                            }
                        }
                    }
                });
            }
            Op::SumAll(a) => acc(*a, &mut |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::BilinearGather(fmap, coords) => {
                self.bilinear_backward(*fmap, *coords, g, grads);
            }
            Op::Gather(a, idx) => acc(*a, &mut |d| {
                for (o, &i) in idx.iter().enumerate() {
                    if i != GATHER_PAD {
                        d[i as usize] += g[o];
                    }
                }
            }),
            Op::Jacobian(a, jac) => acc(*a, &mut |d| {
                for &(o, i, v) in jac {
                    d[i as usize] += g[o as usize] * v;
                }
            }),
        }
    }

    fn bilinear_backward(&self, fmap: Var, coords: Var, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let fs = self.nodes[fmap.0].value.shape();
        let cs = self.nodes[coords.0].value.shape();
        let (h, w, c) = (fs[0], fs[1], fs[2]);
        let (n, gr, p) = (cs[0], cs[1], cs[2]);
        let cg = c / gr;
        let f = self.nodes[fmap.0].value.data();
        let xy = self.nodes[coords.0].value.data();

        if self.nodes[fmap.0].requires_grad {
            let d = grads[fmap.0].get_or_insert_with(|| vec![0.0; f.len()]);
            for q in 0..n * gr * p {
                let group = (q / p) % gr;
                let gq = &g[q * cg..(q + 1) * cg];
                for (cell, weight) in bilinear_taps(xy[2 * q], xy[2 * q + 1], h, w).iter().flatten() {
                    let dst = &mut d[cell * c + group * cg..cell * c + (group + 1) * cg];
                    for (dv, gv) in dst.iter_mut().zip(gq) {
                        *dv += weight * gv;
                    }
                }
            }
        }
        if self.nodes[coords.0].requires_grad {
            let d = grads[coords.0].get_or_insert_with(|| vec![0.0; xy.len()]);
            let fetch = |i: isize, j: isize, group: usize, ch: usize| -> f64 {
                if i < 0 || j < 0 || i >= h as isize || j >= w as isize {
                    0.0
                } else {
                    f[(i as usize * w + j as usize) * c + group * cg + ch]
                }
            };
            for q in 0..n * gr * p {
                let group = (q / p) % gr;
                let (x, y) = (xy[2 * q], xy[2 * q + 1]);
                let (x0, y0) = (x.floor(), y.floor());
                let (fx, fy) = (x - x0, y - y0);
                let (j0, i0) = (x0 as isize, y0 as isize);
                let mut dx = 0.0;
                let mut dy = 0.0;
                for ch in 0..cg {
                    let v00 = fetch(i0, j0, group, ch);
                    let v01 = fetch(i0, j0 + 1, group, ch);
                    let v10 = fetch(i0 + 1, j0, group, ch);
                    let v11 = fetch(i0 + 1, j0 + 1, group, ch);
                    let gv = g[q * cg + ch];
                    dx += gv * ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10));
                    dy += gv * ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01));
                }
                d[2 * q] += dx;
                d[2 * q + 1] += dy;
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn add_into(d: &mut [f64], g: &[f64]) {
    for (d, g) in d.iter_mut().zip(g) {
        *d += g;
    }
}

/// Row-major `c += a · b`, summing over `k` in ascending order.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], c: &mut [f64], bt: usize, m: usize, k: usize, n: usize) {
    for t in 0..bt {
        for i in 0..m {
            let crow = &mut c[t * m * n + i * n..t * m * n + (i + 1) * n];
            for q in 0..k {
                let av = a[t * m * k + i * k + q];
                let brow = &b[t * k * n + q * n..t * k * n + (q + 1) * n];
                for (cv, bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
    }
}

/// The four taps `(flat cell index, weight)` of a bilinear sample; taps that
/// fall outside the map are `None`.
pub(crate) fn bilinear_taps(x: f64, y: f64, h: usize, w: usize) -> [Option<(usize, f64)>; 4] {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (j0, i0) = (x0 as isize, y0 as isize);
    let tap = |i: isize, j: isize, wt: f64| {
        (i >= 0 && j >= 0 && i < h as isize && j < w as isize).then(|| (i as usize * w + j as usize, wt))
    };
    [
        tap(i0, j0, (1.0 - fx) * (1.0 - fy)),
        tap(i0, j0 + 1, fx * (1.0 - fy)),
        tap(i0 + 1, j0, (1.0 - fx) * fy),
        tap(i0 + 1, j0 + 1, fx * fy),
    ]
}

fn permute_tensor(v: &Tensor, perm: &[usize]) -> Tensor {
    let in_shape = v.shape();
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let data = v.data();
    let mut out = Vec::with_capacity(data.len());
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..data.len() {
        out.push(data[src]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= src_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Tensor::new(&out_shape, out).expect("permute preserves size")
}

/// Calls `f(out_index, in_index)` for every output element.
fn for_each_broadcast(in_shape: &[usize], out_shape: &[usize], mut f: impl FnMut(usize, usize)) {
    let in_strides = strides(in_shape);
    let eff: Vec<usize> = in_shape
        .iter()
        .zip(&in_strides)
        .map(|(&d, &s)| if d == 1 { 0 } else { s })
        .collect();
    let total: usize = out_shape.iter().product();
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for o in 0..total {
        f(o, src);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += eff[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

fn broadcast_tensor(v: &Tensor, shape: &[usize]) -> Tensor {
    let mut out = vec![0.0; shape.iter().product()];
    let data = v.data();
    for_each_broadcast(v.shape(), shape, |o, i| out[o] = data[i]);
    Tensor::new(shape, out).expect("broadcast shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let i = tape.constant(Tensor::eye(2));
        let c = tape.matmul(a, i).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[3]));
        let s = tape.softmax(a).unwrap();
        for v in tape.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn sigmoid_zero() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::scalar(0.0));
        let s = tape.sigmoid(a).unwrap();
        assert_eq!(tape.value(s).item(), Some(0.5));
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_fn(&[2, 3], |i| i as f64));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_detached() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Backward(_))));
        let c = tape.constant(Tensor::scalar(1.0));
        let y = tape.mul_scalar(c, 2.0).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Backward(_))));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(tape.add(a, b), Err(Error::Shape { .. })));
        assert!(tape.matmul(a, a).is_err());
        assert!(tape.matmul(a, b).is_ok());
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::scalar(0.0));
        assert!(matches!(tape.log(a), Err(Error::NumericOverflow { op: "log" })));
        let big = tape.constant(Tensor::scalar(1000.0));
        assert!(tape.exp(big).is_err());
    }

    #[test]
    fn permute_and_broadcast() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_fn(&[2, 3], |i| i as f64));
        let p = tape.permute(a, &[1, 0]).unwrap();
        assert_eq!(tape.value(p).data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        let col = tape.constant(t(&[2, 1], &[1.0, 2.0]));
        let b = tape.broadcast_to(col, &[2, 3]).unwrap();
        assert_eq!(tape.value(b).data(), &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
        assert!(tape.broadcast_to(a, &[3, 3]).is_err());
    }

    #[test]
    fn concat_and_slice_are_inverse() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_fn(&[2, 2], |i| i as f64));
        let b = tape.constant(Tensor::from_fn(&[2, 1], |i| 10.0 + i as f64));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c).data(), &[0.0, 1.0, 10.0, 2.0, 3.0, 11.0]);
        let s = tape.slice(c, 1, 2, 3).unwrap();
        assert_eq!(tape.value(s), tape.value(b));
    }

    #[test]
    fn bilinear_cell_center_and_midpoint() {
        let mut tape = Tape::new();
        // 2x2 map, one channel
        let f = tape.constant(t(&[2, 2, 1], &[1.0, 2.0, 3.0, 4.0]));
        let pts = tape.constant(t(&[1, 1, 3, 2], &[1.0, 0.0, 0.5, 0.5, 40.0, -7.0]));
        let v = tape.bilinear_gather(f, pts).unwrap();
        assert_eq!(tape.value(v).data(), &[2.0, 2.5, 0.0]);
    }

    #[test]
    fn evaluate_by_name() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[0.0, 1.0]));
        let s = tape.evaluate("sin", &[a]).unwrap();
        assert_eq!(tape.value(s).data()[0], 0.0);
        assert!(tape.evaluate("frobnicate", &[a]).is_err());
        assert!(tape.evaluate("add", &[a]).is_err());
    }
}
