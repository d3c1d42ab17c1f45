//! Reverse-mode autodiff tape.
//!
//! A [`Graph`] is an append-only record of operations over dense tensors.
//! Each op validates shapes, computes its value eagerly, and remembers its
//! parents; [`Graph::backward`] walks the record once in reverse, so the
//! visit order is topological by construction. Binary elementwise ops
//! broadcast only when one operand's shape is a suffix of the other's (or
//! is a single element) — leading batch dims broadcast, nothing else, so
//! shape bugs fail loudly.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{matmul_nn, matmul_nt, matmul_tn, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op<F> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    /// Elementwise `a^b`; requires `a > 0` so both partials are defined.
    Pow(Var, Var),
    Matmul(Var, Var),
    /// `A · Bᵀ` with `B` stored `[n, p]`.
    MatmulNT(Var, Var),
    Exp(Var),
    Log(Var),
    Recip(Var),
    Scale(Var, F),
    AddScalar(Var, F),
    Relu(Var),
    Softplus(Var),
    Clamp(Var, F, F),
    Lgamma(Var),
    Digamma(Var),
    Softmax(Var, usize),
    NormalizeRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        eps: F,
    },
    Transpose(Var),
    Reshape(Var),
    SumAll(Var),
    MeanAll(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
        len: usize,
    },
    BroadcastRows(Var, usize),
    Embed {
        table: Var,
        ids: Vec<usize>,
    },
    NllLoss {
        logits: Var,
        targets: Vec<usize>,
    },
}

struct Node<F> {
    op: Op<F>,
    value: Tensor<F>,
}

/// Append-only computation tape. Confined to one thread for the lifetime of
/// a forward/backward pass.
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    grads: Vec<Vec<F>>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<F>, value: Tensor<F>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// Insert a leaf (parameter or constant).
    pub fn leaf(&mut self, value: Tensor<F>) -> Var {
        self.push(Op::Leaf, value)
    }

    /// Insert a scalar constant leaf.
    pub fn scalar(&mut self, value: F) -> Var {
        self.leaf(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn data(&self, v: Var) -> &[F] {
        self.nodes[v.0].value.data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a one-element node.
    pub fn scalar_value(&self, v: Var) -> F {
        debug_assert_eq!(self.nodes[v.0].value.numel(), 1);
        self.nodes[v.0].value.data()[0]
    }

    /// Gradient of the last backward root with respect to `v`.
    pub fn grad(&self, v: Var) -> &[F] {
        &self.grads[v.0]
    }

    /// Errors if any entry of `v` is NaN or infinite.
    pub fn check_finite(&self, v: Var, what: &str) -> Result<()> {
        if self.nodes[v.0].value.all_finite() {
            Ok(())
        } else {
            Err(Error::Domain {
                op: "check_finite",
                detail: format!("{what} contains non-finite values"),
            })
        }
    }

    // ---- elementwise binary ops -----------------------------------------

    fn broadcast_pair(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa == sb {
            return Ok(sa.to_vec());
        }
        let (long, short) = if sa.len() >= sb.len() { (sa, sb) } else { (sb, sa) };
        let short_numel: usize = short.iter().product();
        let suffix_ok = short_numel == 1 || long.ends_with(short);
        if suffix_ok {
            Ok(long.to_vec())
        } else {
            Err(Error::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            })
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(F, F) -> F,
        op: Op<F>,
    ) -> Result<Var> {
        let out_shape = self.broadcast_pair(name, a, b)?;
        let numel: usize = out_shape.iter().product();
        let da = self.data(a);
        let db = self.data(b);
        let (na, nb) = (da.len(), db.len());
        let mut out = Vec::with_capacity(numel);
        for i in 0..numel {
            out.push(f(da[i % na], db[i % nb]));
        }
        let value = Tensor::from_vec(out_shape, out)?;
        Ok(self.push(op, value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Elementwise `a^b`. The base must be strictly positive.
    pub fn pow(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.data(a).iter().any(|&x| x <= F::zero()) {
            return Err(Error::Domain {
                op: "pow",
                detail: "base must be strictly positive".into(),
            });
        }
        self.binary("pow", a, b, |x, y| x.powf(y), Op::Pow(a, b))
    }

    // ---- matmul ----------------------------------------------------------

    fn check_2d(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::ShapeMismatch {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        Ok((s[0], s[1]))
    }

    /// `[m,p] · [p,n] -> [m,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, p) = self.check_2d("matmul", a)?;
        let (p2, n) = self.check_2d("matmul", b)?;
        if p != p2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data = matmul_nn(self.data(a), self.data(b), m, p, n);
        let value = Tensor::from_vec(vec![m, n], data)?;
        Ok(self.push(Op::Matmul(a, b), value))
    }

    /// `[m,p] · [n,p]ᵀ -> [m,n]`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, p) = self.check_2d("matmul_nt", a)?;
        let (n, p2) = self.check_2d("matmul_nt", b)?;
        if p != p2 {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data = matmul_nt(self.data(a), self.data(b), m, p, n);
        let value = Tensor::from_vec(vec![m, n], data)?;
        Ok(self.push(Op::MatmulNT(a, b), value))
    }

    // ---- elementwise unary ops -------------------------------------------

    fn unary(&mut self, a: Var, f: impl Fn(F) -> F, op: Op<F>) -> Var {
        let value = self.nodes[a.0].value.map(f);
        self.push(op, value)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), Op::Exp(a))
    }

    /// Natural log; domain error on nonpositive entries.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.data(a).iter().any(|&x| x <= F::zero()) {
            return Err(Error::Domain {
                op: "log",
                detail: "argument must be strictly positive".into(),
            });
        }
        Ok(self.unary(a, |x| x.ln(), Op::Log(a)))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.recip(), Op::Recip(a))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: F) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -F::one())
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(F::zero()), Op::Relu(a))
    }

    /// Stable `ln(1 + exp(x))`.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Scalar::softplus, Op::Softplus(a))
    }

    pub fn clamp(&mut self, a: Var, lo: F, hi: F) -> Var {
        self.unary(a, |x| x.max(lo).min(hi), Op::Clamp(a, lo, hi))
    }

    /// ln Γ(x); domain error on nonpositive entries.
    pub fn lgamma(&mut self, a: Var) -> Result<Var> {
        if self.data(a).iter().any(|&x| x <= F::zero()) {
            return Err(Error::Domain {
                op: "lgamma",
                detail: "argument must be strictly positive".into(),
            });
        }
        Ok(self.unary(a, Scalar::lgamma, Op::Lgamma(a)))
    }

    /// ψ(x); domain error on nonpositive entries.
    pub fn digamma(&mut self, a: Var) -> Result<Var> {
        if self.data(a).iter().any(|&x| x <= F::zero()) {
            return Err(Error::Domain {
                op: "digamma",
                detail: "argument must be strictly positive".into(),
            });
        }
        Ok(self.unary(a, Scalar::digamma, Op::Digamma(a)))
    }

    // ---- structured ops ----------------------------------------------------

    fn check_axis(&self, op: &'static str, v: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(v).len() {
            return Err(Error::Domain {
                op,
                detail: format!("axis {axis} out of bounds for shape {:?}", self.shape(v)),
            });
        }
        Ok(())
    }

    /// Softmax along `axis` of a 1D or 2D tensor, with max subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", a, axis)?;
        let value = softmax_forward(&self.nodes[a.0].value, axis);
        Ok(self.push(Op::Softmax(a, axis), value))
    }

    /// Row normalization of strictly positive scores: `W_ij = S_ij / Σ_j' S_ij'`.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.check_2d("normalize_rows", a)?;
        let data = self.data(a);
        if data.iter().any(|&x| !(x > F::zero())) {
            return Err(Error::Domain {
                op: "normalize_rows",
                detail: "scores must be strictly positive".into(),
            });
        }
        let floor = F::from_f64(1e-300);
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            let row = &data[i * n..(i + 1) * n];
            let total: F = row.iter().copied().sum();
            if total < floor || !total.is_finite() {
                return Err(Error::DegenerateRow {
                    row: i,
                    sum: total.to_f64_lossy(),
                });
            }
            for j in 0..n {
                out[i * n + j] = row[j] / total;
            }
        }
        let value = Tensor::from_vec(vec![m, n], out)?;
        Ok(self.push(Op::NormalizeRows(a), value))
    }

    /// Per-row layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: F) -> Result<Var> {
        let (m, n) = self.check_2d("layer_norm", x)?;
        for &p in &[gain, bias] {
            if self.shape(p) != [n] {
                return Err(Error::ShapeMismatch {
                    op: "layer_norm",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let xd = self.data(x);
        let g = self.data(gain);
        let b = self.data(bias);
        let mut out = vec![F::zero(); m * n];
        let nf = F::from_usize_exact(n);
        for i in 0..m {
            let row = &xd[i * n..(i + 1) * n];
            let mu: F = row.iter().copied().sum::<F>() / nf;
            let var: F = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<F>() / nf;
            let inv_std = (var + eps).sqrt().recip();
            for j in 0..n {
                out[i * n + j] = g[j] * (row[j] - mu) * inv_std + b[j];
            }
        }
        let value = Tensor::from_vec(vec![m, n], out)?;
        Ok(self.push(Op::LayerNorm { x, gain, bias, eps }, value))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.check_2d("transpose", a)?;
        let d = self.data(a);
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = d[i * n + j];
            }
        }
        let value = Tensor::from_vec(vec![n, m], out)?;
        Ok(self.push(Op::Transpose(a), value))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[a.0].value.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape,
            });
        }
        let value = Tensor::from_vec(shape, self.data(a).to_vec())?;
        Ok(self.push(Op::Reshape(a), value))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.sum();
        self.push(Op::SumAll(a), Tensor::scalar(s))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.mean();
        self.push(Op::MeanAll(a), Tensor::scalar(s))
    }

    /// Sum a 2D tensor over `axis`, dropping that axis.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (m, n) = self.check_2d("sum_axis", a)?;
        self.check_axis("sum_axis", a, axis)?;
        let d = self.data(a);
        let value = if axis == 0 {
            let mut out = vec![F::zero(); n];
            for i in 0..m {
                for j in 0..n {
                    out[j] += d[i * n + j];
                }
            }
            Tensor::from_vec(vec![n], out)?
        } else {
            let mut out = vec![F::zero(); m];
            for i in 0..m {
                out[i] = d[i * n..(i + 1) * n].iter().copied().sum();
            }
            Tensor::from_vec(vec![m], out)?
        };
        Ok(self.push(Op::SumAxis(a, axis), value))
    }

    /// Mean of a 2D tensor over `axis`, dropping that axis.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (m, n) = self.check_2d("mean_axis", a)?;
        let divisor = F::from_usize_exact(if axis == 0 { m } else { n });
        let summed = self.sum_axis(a, axis)?;
        // Rewrite as a dedicated op so backward is a single scatter.
        let value = self.nodes[summed.0].value.map(|x| x / divisor);
        self.nodes.pop();
        Ok(self.push(Op::MeanAxis(a, axis), value))
    }

    /// Concatenate 2D tensors along `axis`.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Parameter("concat of zero tensors".into()));
        }
        let (m0, n0) = self.check_2d("concat", parts[0])?;
        let mut total = 0usize;
        for &p in parts {
            let (m, n) = self.check_2d("concat", p)?;
            let (fixed, varying) = if axis == 0 { (n == n0, m) } else { (m == m0, n) };
            if !fixed {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            total += varying;
        }
        let value = if axis == 0 {
            let mut data = Vec::with_capacity(total * n0);
            for &p in parts {
                data.extend_from_slice(self.data(p));
            }
            Tensor::from_vec(vec![total, n0], data)?
        } else {
            let mut data = Vec::with_capacity(m0 * total);
            for i in 0..m0 {
                for &p in parts {
                    let n = self.shape(p)[1];
                    data.extend_from_slice(&self.data(p)[i * n..(i + 1) * n]);
                }
            }
            Tensor::from_vec(vec![m0, total], data)?
        };
        Ok(self.push(
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            value,
        ))
    }

    /// Contiguous slice of a 2D tensor along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.check_2d("slice", x)?;
        self.check_axis("slice", x, axis)?;
        let extent = if axis == 0 { m } else { n };
        if start + len > extent || len == 0 {
            return Err(Error::Domain {
                op: "slice",
                detail: format!(
                    "range {start}..{} out of bounds for axis {axis} of shape {:?}",
                    start + len,
                    self.shape(x)
                ),
            });
        }
        let d = self.data(x);
        let value = if axis == 0 {
            Tensor::from_vec(vec![len, n], d[start * n..(start + len) * n].to_vec())?
        } else {
            let mut out = Vec::with_capacity(m * len);
            for i in 0..m {
                out.extend_from_slice(&d[i * n + start..i * n + start + len]);
            }
            Tensor::from_vec(vec![m, len], out)?
        };
        Ok(self.push(
            Op::Slice {
                x,
                axis,
                start,
                len,
            },
            value,
        ))
    }

    /// Tile a 1D tensor `[n]` into `[m, n]` (each row a copy).
    pub fn broadcast_rows(&mut self, x: Var, m: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "broadcast_rows",
                lhs: s.to_vec(),
                rhs: vec![m],
            });
        }
        let n = s[0];
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(self.data(x));
        }
        let value = Tensor::from_vec(vec![m, n], out)?;
        Ok(self.push(Op::BroadcastRows(x, m), value))
    }

    /// Row gather: `out[i] = table[ids[i]]`.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.check_2d("embed", table)?;
        if let Some(&bad) = ids.iter().find(|&&id| id >= vocab) {
            return Err(Error::Input(format!(
                "token id {bad} out of vocabulary (size {vocab})"
            )));
        }
        let td = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&td[id * d..(id + 1) * d]);
        }
        let value = Tensor::from_vec(vec![ids.len(), d], out)?;
        Ok(self.push(
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
            value,
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits` `[r, c]`. Stable via logsumexp.
    pub fn nll_loss(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (r, c) = self.check_2d("nll_loss", logits)?;
        if targets.len() != r {
            return Err(Error::ShapeMismatch {
                op: "nll_loss",
                lhs: vec![r, c],
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Input(format!(
                "target class {bad} out of range (classes {c})"
            )));
        }
        let d = self.data(logits);
        let mut total = F::zero();
        for (i, &t) in targets.iter().enumerate() {
            let row = &d[i * c..(i + 1) * c];
            let mx = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<F>().ln();
            total += lse - row[t];
        }
        let value = Tensor::scalar(total / F::from_usize_exact(r));
        Ok(self.push(
            Op::NllLoss {
                logits,
                targets: targets.to_vec(),
            },
            value,
        ))
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse pass from a scalar root. Gradients for every node at or below
    /// the root become available through [`Graph::grad`].
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes[root.0].value.numel() != 1 {
            return Err(Error::Parameter(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        self.grads = self
            .nodes
            .iter()
            .map(|n| vec![F::zero(); n.value.numel()])
            .collect();
        self.grads[root.0][0] = F::one();

        for i in (0..=root.0).rev() {
            if self.grads[i].iter().all(|&v| v == F::zero()) {
                continue;
            }
            let g = std::mem::take(&mut self.grads[i]);
            self.backprop_node(i, &g);
            self.grads[i] = g;
        }
        Ok(())
    }

    fn accumulate_broadcast(&mut self, parent: Var, full: &[F]) {
        let target = &mut self.grads[parent.0];
        let n = target.len();
        for (i, &v) in full.iter().enumerate() {
            target[i % n] += v;
        }
    }

    fn backprop_node(&mut self, i: usize, g: &[F]) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}

            Op::Add(a, b) => {
                self.accumulate_broadcast(a, g);
                self.accumulate_broadcast(b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate_broadcast(a, g);
                let neg: Vec<F> = g.iter().map(|&v| -v).collect();
                self.accumulate_broadcast(b, &neg);
            }
            Op::Mul(a, b) => {
                let (na, nb) = (self.data(a).len(), self.data(b).len());
                let da: Vec<F> = g
                    .iter()
                    .enumerate()
                    .map(|(k, &v)| v * self.data(b)[k % nb])
                    .collect();
                let db: Vec<F> = g
                    .iter()
                    .enumerate()
                    .map(|(k, &v)| v * self.data(a)[k % na])
                    .collect();
                self.accumulate_broadcast(a, &da);
                self.accumulate_broadcast(b, &db);
            }
            Op::Div(a, b) => {
                let (na, nb) = (self.data(a).len(), self.data(b).len());
                let da: Vec<F> = g
                    .iter()
                    .enumerate()
                    .map(|(k, &v)| v / self.data(b)[k % nb])
                    .collect();
                let db: Vec<F> = g
                    .iter()
                    .enumerate()
                    .map(|(k, &v)| {
                        let bv = self.data(b)[k % nb];
                        -v * self.data(a)[k % na] / (bv * bv)
                    })
                    .collect();
                self.accumulate_broadcast(a, &da);
                self.accumulate_broadcast(b, &db);
            }
            Op::Pow(a, b) => {
                let (na, nb) = (self.data(a).len(), self.data(b).len());
                let y = self.nodes[i].value.data().to_vec();
                let da: Vec<F> = g
                    .iter()
                    .enumerate()
                    .map(|(k, &v)| {
                        let base = self.data(a)[k % na];
                        let expo = self.data(b)[k % nb];
                        v * expo * y[k] / base
                    })
                    .collect();
                let db: Vec<F> = g
                    .iter()
                    .enumerate()
                    .map(|(k, &v)| v * y[k] * self.data(a)[k % na].ln())
                    .collect();
                self.accumulate_broadcast(a, &da);
                self.accumulate_broadcast(b, &db);
            }

            Op::Matmul(a, b) => {
                let (m, p) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                let da = matmul_nt(g, self.data(b), m, n, p);
                let db = matmul_tn(self.data(a), g, m, p, n);
                add_assign(&mut self.grads[a.0], &da);
                add_assign(&mut self.grads[b.0], &db);
            }
            Op::MatmulNT(a, b) => {
                let (m, p) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[0];
                // C = A·Bᵀ: dA = G·B, dB = Gᵀ·A
                let da = matmul_nn(g, self.data(b), m, n, p);
                let db = matmul_tn(g, self.data(a), m, n, p);
                add_assign(&mut self.grads[a.0], &da);
                add_assign(&mut self.grads[b.0], &db);
            }

            Op::Exp(a) => {
                let y = self.nodes[i].value.data().to_vec();
                for (k, &v) in g.iter().enumerate() {
                    self.grads[a.0][k] += v * y[k];
                }
            }
            Op::Log(a) => {
                for (k, &v) in g.iter().enumerate() {
                    let x = self.data(a)[k];
                    self.grads[a.0][k] += v / x;
                }
            }
            Op::Recip(a) => {
                let y = self.nodes[i].value.data().to_vec();
                for (k, &v) in g.iter().enumerate() {
                    self.grads[a.0][k] -= v * y[k] * y[k];
                }
            }
            Op::Scale(a, c) => {
                for (k, &v) in g.iter().enumerate() {
                    self.grads[a.0][k] += v * c;
                }
            }
            Op::AddScalar(a, _) => {
                add_assign(&mut self.grads[a.0], g);
            }
            Op::Relu(a) => {
                for (k, &v) in g.iter().enumerate() {
                    // Subgradient 0 at the kink.
                    if self.data(a)[k] > F::zero() {
                        self.grads[a.0][k] += v;
                    }
                }
            }
            Op::Softplus(a) => {
                for (k, &v) in g.iter().enumerate() {
                    let x = self.data(a)[k];
                    let sig = if x >= F::zero() {
                        F::one() / (F::one() + (-x).exp())
                    } else {
                        let e = x.exp();
                        e / (F::one() + e)
                    };
                    self.grads[a.0][k] += v * sig;
                }
            }
            Op::Clamp(a, lo, hi) => {
                for (k, &v) in g.iter().enumerate() {
                    let x = self.data(a)[k];
                    if x > lo && x < hi {
                        self.grads[a.0][k] += v;
                    }
                }
            }
            Op::Lgamma(a) => {
                for (k, &v) in g.iter().enumerate() {
                    self.grads[a.0][k] += v * self.data(a)[k].digamma();
                }
            }
            Op::Digamma(a) => {
                for (k, &v) in g.iter().enumerate() {
                    self.grads[a.0][k] += v * self.data(a)[k].trigamma();
                }
            }

            Op::Softmax(a, axis) => {
                let y = self.nodes[i].value.clone();
                let shape = y.shape().to_vec();
                let (m, n) = if shape.len() == 1 {
                    (1, shape[0])
                } else {
                    (shape[0], shape[1])
                };
                let yd = y.data();
                let mut out = vec![F::zero(); yd.len()];
                // Iterate over the reduction slices.
                let (slices, stride, step) = slice_plan(m, n, axis, shape.len());
                for s in 0..slices {
                    let idx = |k: usize| s * stride + k * step;
                    let len = if axis == 0 && shape.len() == 2 { m } else { n };
                    let mut dot = F::zero();
                    for k in 0..len {
                        dot += g[idx(k)] * yd[idx(k)];
                    }
                    for k in 0..len {
                        out[idx(k)] = yd[idx(k)] * (g[idx(k)] - dot);
                    }
                }
                add_assign(&mut self.grads[a.0], &out);
            }
            Op::NormalizeRows(a) => {
                let y = self.nodes[i].value.clone();
                let (m, n) = (y.shape()[0], y.shape()[1]);
                let yd = y.data();
                let xd = self.data(a).to_vec();
                let mut out = vec![F::zero(); m * n];
                for r in 0..m {
                    let total: F = xd[r * n..(r + 1) * n].iter().copied().sum();
                    let mut dot = F::zero();
                    for k in 0..n {
                        dot += g[r * n + k] * yd[r * n + k];
                    }
                    for k in 0..n {
                        out[r * n + k] = (g[r * n + k] - dot) / total;
                    }
                }
                add_assign(&mut self.grads[a.0], &out);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let (m, n) = (self.shape(x)[0], self.shape(x)[1]);
                let nf = F::from_usize_exact(n);
                let xd = self.data(x).to_vec();
                let gd = self.data(gain).to_vec();
                let mut dx = vec![F::zero(); m * n];
                let mut dgain = vec![F::zero(); n];
                let mut dbias = vec![F::zero(); n];
                for r in 0..m {
                    let row = &xd[r * n..(r + 1) * n];
                    let mu: F = row.iter().copied().sum::<F>() / nf;
                    let var: F = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<F>() / nf;
                    let inv_std = (var + eps).sqrt().recip();
                    let xhat: Vec<F> = row.iter().map(|&v| (v - mu) * inv_std).collect();
                    let grow = &g[r * n..(r + 1) * n];
                    let mut mean_dy = F::zero();
                    let mut mean_dy_xhat = F::zero();
                    for j in 0..n {
                        let dy = grow[j] * gd[j];
                        mean_dy += dy;
                        mean_dy_xhat += dy * xhat[j];
                        dgain[j] += grow[j] * xhat[j];
                        dbias[j] += grow[j];
                    }
                    mean_dy /= nf;
                    mean_dy_xhat /= nf;
                    for j in 0..n {
                        let dy = grow[j] * gd[j];
                        dx[r * n + j] = (dy - mean_dy - xhat[j] * mean_dy_xhat) * inv_std;
                    }
                }
                add_assign(&mut self.grads[x.0], &dx);
                add_assign(&mut self.grads[gain.0], &dgain);
                add_assign(&mut self.grads[bias.0], &dbias);
            }

            Op::Transpose(a) => {
                let (n, m) = (self.shape(Var(i))[0], self.shape(Var(i))[1]);
                for r in 0..n {
                    for c in 0..m {
                        self.grads[a.0][c * n + r] += g[r * m + c];
                    }
                }
            }
            Op::Reshape(a) => {
                add_assign(&mut self.grads[a.0], g);
            }
            Op::SumAll(a) => {
                let v = g[0];
                for slot in self.grads[a.0].iter_mut() {
                    *slot += v;
                }
            }
            Op::MeanAll(a) => {
                let v = g[0] / F::from_usize_exact(self.grads[a.0].len());
                for slot in self.grads[a.0].iter_mut() {
                    *slot += v;
                }
            }
            Op::SumAxis(a, axis) => {
                let (m, n) = (self.shape(a)[0], self.shape(a)[1]);
                for r in 0..m {
                    for c in 0..n {
                        self.grads[a.0][r * n + c] += if axis == 0 { g[c] } else { g[r] };
                    }
                }
            }
            Op::MeanAxis(a, axis) => {
                let (m, n) = (self.shape(a)[0], self.shape(a)[1]);
                let divisor = F::from_usize_exact(if axis == 0 { m } else { n });
                for r in 0..m {
                    for c in 0..n {
                        let v = if axis == 0 { g[c] } else { g[r] };
                        self.grads[a.0][r * n + c] += v / divisor;
                    }
                }
            }
            Op::Concat { parts, axis } => {
                if axis == 0 {
                    let mut offset = 0usize;
                    for &p in &parts {
                        let numel = self.grads[p.0].len();
                        let piece = &g[offset..offset + numel];
                        add_assign(&mut self.grads[p.0], piece);
                        offset += numel;
                    }
                } else {
                    let m = self.shape(parts[0])[0];
                    let total: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
                    for r in 0..m {
                        let mut offset = 0usize;
                        for &p in &parts {
                            let n = self.shape(p)[1];
                            for c in 0..n {
                                self.grads[p.0][r * n + c] += g[r * total + offset + c];
                            }
                            offset += n;
                        }
                    }
                }
            }
            Op::Slice {
                x,
                axis,
                start,
                len,
            } => {
                let (_, n) = (self.shape(x)[0], self.shape(x)[1]);
                if axis == 0 {
                    for r in 0..len {
                        for c in 0..n {
                            self.grads[x.0][(start + r) * n + c] += g[r * n + c];
                        }
                    }
                } else {
                    let m = self.shape(x)[0];
                    for r in 0..m {
                        for c in 0..len {
                            self.grads[x.0][r * n + start + c] += g[r * len + c];
                        }
                    }
                }
            }
            Op::BroadcastRows(x, m) => {
                let n = self.grads[x.0].len();
                for r in 0..m {
                    for c in 0..n {
                        self.grads[x.0][c] += g[r * n + c];
                    }
                }
            }
            Op::Embed { table, ids } => {
                let d = self.shape(table)[1];
                for (row, &id) in ids.iter().enumerate() {
                    for c in 0..d {
                        self.grads[table.0][id * d + c] += g[row * d + c];
                    }
                }
            }
            Op::NllLoss { logits, targets } => {
                let (r, c) = (self.shape(logits)[0], self.shape(logits)[1]);
                let scale = g[0] / F::from_usize_exact(r);
                let d = self.data(logits).to_vec();
                for (row, &t) in targets.iter().enumerate() {
                    let slice = &d[row * c..(row + 1) * c];
                    let mx = slice.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
                    let denom: F = slice.iter().map(|&v| (v - mx).exp()).sum();
                    for j in 0..c {
                        let p = (slice[j] - mx).exp() / denom;
                        let onehot = if j == t { F::one() } else { F::zero() };
                        self.grads[logits.0][row * c + j] += scale * (p - onehot);
                    }
                }
            }
        }
    }
}

fn add_assign<F: Scalar>(target: &mut [F], src: &[F]) {
    debug_assert_eq!(target.len(), src.len());
    for (t, &s) in target.iter_mut().zip(src) {
        *t += s;
    }
}

/// Iteration plan for softmax slices: returns (number of slices, slice
/// stride, element step) for a 1D/2D tensor reduced along `axis`.
fn slice_plan(m: usize, n: usize, axis: usize, ndim: usize) -> (usize, usize, usize) {
    if ndim == 1 || axis == 1 {
        // row-wise: m slices of length n, contiguous
        (m, n, 1)
    } else {
        // column-wise: n slices of length m, strided
        (n, 1, n)
    }
}

fn softmax_forward<F: Scalar>(x: &Tensor<F>, axis: usize) -> Tensor<F> {
    let shape = x.shape().to_vec();
    let (m, n) = if shape.len() == 1 {
        (1, shape[0])
    } else {
        (shape[0], shape[1])
    };
    let d = x.data();
    let mut out = vec![F::zero(); d.len()];
    let (slices, stride, step) = slice_plan(m, n, axis, shape.len());
    let len = if axis == 0 && shape.len() == 2 { m } else { n };
    for s in 0..slices {
        let idx = |k: usize| s * stride + k * step;
        let mut mx = F::neg_infinity();
        for k in 0..len {
            mx = mx.max(d[idx(k)]);
        }
        let mut total = F::zero();
        for k in 0..len {
            let e = (d[idx(k)] - mx).exp();
            out[idx(k)] = e;
            total += e;
        }
        for k in 0..len {
            out[idx(k)] /= total;
        }
    }
    Tensor::from_vec(shape, out).expect("softmax preserves shape")
}
