//! Define-by-run reverse-mode automatic differentiation.
//!
//! A `Tape` records primitive operations as they execute; `backward` replays
//! them in reverse and accumulates vector-Jacobian products. The tape is
//! rebuilt on every forward pass, which keeps variable-length sequence graphs
//! simple. Values are computed eagerly at record time, so a `Var` always has
//! a value.
//!
//! Parameters are named leaves registered from a [`ParamStore`]; registration
//! snapshots the data, so later mutation of the store cannot corrupt an
//! in-flight pass.

use std::collections::BTreeMap;

use crate::tensor::{KernelError, Tensor};

/// Handle to a node on a tape. Only valid for the tape that created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Named parameter tensors. BTreeMap keeps iteration deterministic, which in
/// turn keeps init, optimizer updates, and checkpoints bit-reproducible.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    map: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.map.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of scalar entries across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }
}

/// Gradients keyed by parameter name, shapes mirroring the parameters.
pub type GradMap = BTreeMap<String, Tensor>;

enum Op {
    Leaf,
    /// [m,k] x [k,n] -> [m,n]
    MatMul { a: Var, b: Var },
    /// [m,k] x [k] -> [m]
    MatVec { a: Var, x: Var },
    /// [n] . [n] -> [1]
    Dot { a: Var, b: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Div { a: Var, b: Var },
    /// Elementwise multiply by a constant (untracked) tensor, e.g. a dropout mask.
    MulMask { x: Var, mask: Tensor },
    /// mul * x + add, elementwise.
    Affine { x: Var, mul: f64, add: f64 },
    /// Scale a tensor by a scalar variable.
    ScaleBy { x: Var, s: Var },
    Sigmoid { x: Var },
    Tanh { x: Var },
    Log { x: Var },
    /// Row-wise softmax over the last axis.
    Softmax { x: Var },
    /// Concatenate 1-D vectors.
    Concat { parts: Vec<Var> },
    /// Rows `start..start+rows` along the first axis.
    SliceRows { x: Var, start: usize, rows: usize },
    Reshape { x: Var },
    MeanAll { x: Var },
    SumAll { x: Var },
    /// Max over the last axis; argmax (first maximum) saved for backward.
    MaxLastAxis { x: Var, argmax: Vec<usize> },
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Recording tape. Single-threaded; run one per forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
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

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node { op, value });
        Var(id)
    }

    /// Value of a recorded node.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Register an untracked constant leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    /// Register a named parameter from the store (snapshot). Repeated
    /// registration of the same name returns the original node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var, KernelError> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store.get(name).ok_or_else(|| KernelError::Numerics {
            op: "param",
            detail: format!("unknown parameter `{name}`"),
        })?;
        let v = self.push(Op::Leaf, t.clone());
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn zeros(&mut self, shape: Vec<usize>) -> Var {
        self.leaf(Tensor::zeros(shape))
    }

    // ── primitive builders ───────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(KernelError::Shape { op: "matmul", lhs: sa, rhs: sb });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = da[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let row = &db[p * n..(p + 1) * n];
                let dst = &mut out[i * n..(i + 1) * n];
                for (o, &bv) in dst.iter_mut().zip(row) {
                    *o += av * bv;
                }
            }
        }
        Ok(self.push(Op::MatMul { a, b }, Tensor::new(vec![m, n], out)?))
    }

    pub fn matvec(&mut self, a: Var, x: Var) -> Result<Var, KernelError> {
        let (sa, sx) = (self.value(a).shape().to_vec(), self.value(x).shape().to_vec());
        if sa.len() != 2 || sx.len() != 1 || sa[1] != sx[0] {
            return Err(KernelError::Shape { op: "matvec", lhs: sa, rhs: sx });
        }
        let (m, k) = (sa[0], sa[1]);
        let (da, dx) = (self.value(a).data(), self.value(x).data());
        let mut out = vec![0.0; m];
        for i in 0..m {
            let row = &da[i * k..(i + 1) * k];
            out[i] = row.iter().zip(dx).map(|(w, v)| w * v).sum();
        }
        Ok(self.push(Op::MatVec { a, x }, Tensor::vector(out)))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if sa.len() != 1 || sa != sb {
            return Err(KernelError::Shape { op: "dot", lhs: sa, rhs: sb });
        }
        let v = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .sum();
        Ok(self.push(Op::Dot { a, b }, Tensor::scalar(v)))
    }

    fn binary_same_shape(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
    ) -> Result<(), KernelError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(KernelError::Shape {
                op: op_name,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        self.binary_same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Op::Add { a, b }, Tensor::new(shape, data)?))
    }

    /// Left-fold sum of several same-shape vars.
    pub fn add_all(&mut self, vars: &[Var]) -> Result<Var, KernelError> {
        let mut acc = *vars.first().ok_or(KernelError::Rank {
            op: "add_all",
            expected: "at least one input",
            shape: vec![],
        })?;
        for &v in &vars[1..] {
            acc = self.add(acc, v)?;
        }
        Ok(acc)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        self.binary_same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Op::Mul { a, b }, Tensor::new(shape, data)?))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        self.binary_same_shape("div", a, b)?;
        if self.value(b).data().iter().any(|&v| v == 0.0) {
            return Err(KernelError::Numerics {
                op: "div",
                detail: "division by zero".into(),
            });
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x / y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Op::Div { a, b }, Tensor::new(shape, data)?))
    }

    pub fn mul_mask(&mut self, x: Var, mask: Tensor) -> Result<Var, KernelError> {
        if self.value(x).shape() != mask.shape() {
            return Err(KernelError::Shape {
                op: "mul_mask",
                lhs: self.value(x).shape().to_vec(),
                rhs: mask.shape().to_vec(),
            });
        }
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(mask.data())
            .map(|(v, m)| v * m)
            .collect();
        let shape = self.value(x).shape().to_vec();
        let value = Tensor::new(shape, data)?;
        Ok(self.push(Op::MulMask { x, mask }, value))
    }

    pub fn affine(&mut self, x: Var, mul: f64, add: f64) -> Var {
        let data = self.value(x).data().iter().map(|v| mul * v + add).collect();
        let shape = self.value(x).shape().to_vec();
        let value = Tensor::new(shape, data).expect("same shape");
        self.push(Op::Affine { x, mul, add }, value)
    }

    pub fn one_minus(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 1.0)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 0.0)
    }

    /// x * s where s is a scalar var.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var, KernelError> {
        let sv = self.value(s).as_scalar()?;
        let data = self.value(x).data().iter().map(|v| v * sv).collect();
        let shape = self.value(x).shape().to_vec();
        Ok(self.push(Op::ScaleBy { x, s }, Tensor::new(shape, data)?))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let data = self.value(x).data().iter().map(|&v| sigmoid(v)).collect();
        let shape = self.value(x).shape().to_vec();
        let value = Tensor::new(shape, data).expect("same shape");
        self.push(Op::Sigmoid { x }, value)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let data = self.value(x).data().iter().map(|v| v.tanh()).collect();
        let shape = self.value(x).shape().to_vec();
        let value = Tensor::new(shape, data).expect("same shape");
        self.push(Op::Tanh { x }, value)
    }

    pub fn log(&mut self, x: Var) -> Result<Var, KernelError> {
        if self.value(x).data().iter().any(|&v| v <= 0.0) {
            return Err(KernelError::Numerics {
                op: "log",
                detail: "log of non-positive value".into(),
            });
        }
        let data = self.value(x).data().iter().map(|v| v.ln()).collect();
        let shape = self.value(x).shape().to_vec();
        Ok(self.push(Op::Log { x }, Tensor::new(shape, data)?))
    }

    /// Row-wise softmax over the last axis, stabilized by max subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let cols = t.last_dim();
        let rows = t.numel() / cols;
        let mut data = t.data().to_vec();
        for r in 0..rows {
            let row = &mut data[r * cols..(r + 1) * cols];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let shape = t.shape().to_vec();
        let value = Tensor::new(shape, data).expect("same shape");
        self.push(Op::Softmax { x }, value)
    }

    /// Concatenate 1-D vectors into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, KernelError> {
        if parts.is_empty() {
            return Err(KernelError::Rank {
                op: "concat",
                expected: "at least one input",
                shape: vec![],
            });
        }
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.shape().len() != 1 {
                return Err(KernelError::Rank {
                    op: "concat",
                    expected: "1-D inputs",
                    shape: t.shape().to_vec(),
                });
            }
            data.extend_from_slice(t.data());
        }
        Ok(self.push(
            Op::Concat { parts: parts.to_vec() },
            Tensor::vector(data),
        ))
    }

    /// Rows `start..start+rows` along the first axis. On a 1-D tensor this is
    /// an element slice.
    pub fn slice_rows(&mut self, x: Var, start: usize, rows: usize) -> Result<Var, KernelError> {
        let t = self.value(x);
        let total = t.shape()[0];
        if rows == 0 || start + rows > total {
            return Err(KernelError::Shape {
                op: "slice_rows",
                lhs: t.shape().to_vec(),
                rhs: vec![start, rows],
            });
        }
        let row_size = t.numel() / total;
        let data = t.data()[start * row_size..(start + rows) * row_size].to_vec();
        let mut shape = t.shape().to_vec();
        shape[0] = rows;
        Ok(self.push(Op::SliceRows { x, start, rows }, Tensor::new(shape, data)?))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, KernelError> {
        let t = self.value(x);
        if shape.iter().product::<usize>() != t.numel() {
            return Err(KernelError::Shape {
                op: "reshape",
                lhs: t.shape().to_vec(),
                rhs: shape,
            });
        }
        let value = Tensor::new(shape, t.data().to_vec())?;
        Ok(self.push(Op::Reshape { x }, value))
    }

    /// Embedding-style row pick: row `i` of a matrix as a 1-D vector.
    pub fn row(&mut self, x: Var, i: usize) -> Result<Var, KernelError> {
        let cols = self.value(x).last_dim();
        let r = self.slice_rows(x, i, 1)?;
        self.reshape(r, vec![cols])
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let v = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Op::MeanAll { x }, Tensor::scalar(v))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let v = self.value(x).data().iter().sum::<f64>();
        self.push(Op::SumAll { x }, Tensor::scalar(v))
    }

    /// Mean of several same-shape vars. A single input is returned unchanged,
    /// so the K=1 case is exact.
    pub fn mean_of(&mut self, vars: &[Var]) -> Result<Var, KernelError> {
        let sum = self.add_all(vars)?;
        if vars.len() == 1 {
            Ok(sum)
        } else {
            Ok(self.affine(sum, 1.0 / vars.len() as f64, 0.0))
        }
    }

    /// Max over the last axis; `[.., c] -> [..]`. Ties resolve to the first
    /// (lowest-index) maximum.
    pub fn max_last_axis(&mut self, x: Var) -> Result<Var, KernelError> {
        let t = self.value(x);
        if t.shape().len() < 2 && t.shape().len() != 1 {
            return Err(KernelError::Rank {
                op: "max_last_axis",
                expected: "rank >= 1",
                shape: t.shape().to_vec(),
            });
        }
        let cols = t.last_dim();
        let rows = t.numel() / cols;
        let mut out = Vec::with_capacity(rows);
        let mut argmax = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &t.data()[r * cols..(r + 1) * cols];
            let (mut bi, mut bv) = (0usize, row[0]);
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > bv {
                    bv = v;
                    bi = j;
                }
            }
            out.push(bv);
            argmax.push(bi);
        }
        let shape = if t.shape().len() == 1 {
            vec![1]
        } else {
            t.shape()[..t.shape().len() - 1].to_vec()
        };
        Ok(self.push(Op::MaxLastAxis { x, argmax }, Tensor::new(shape, out)?))
    }

    // ── backward ─────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Returns the gradient of every
    /// registered parameter; parameters that did not reach the loss get a
    /// zero gradient of matching shape.
    pub fn backward(&self, loss: Var) -> Result<GradMap, KernelError> {
        if !self.value(loss).is_scalar() {
            return Err(KernelError::Rank {
                op: "backward",
                expected: "scalar loss",
                shape: self.value(loss).shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.vjp(i, &g, &mut grads);
        }

        let mut out = GradMap::new();
        for (name, &var) in &self.params {
            let shape = self.value(var).shape().to_vec();
            let data = match grads[var.0].take() {
                Some(g) => g,
                None => vec![0.0; self.value(var).numel()],
            };
            out.insert(name.clone(), Tensor::new(shape, data)?);
        }
        Ok(out)
    }

    fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, contrib: impl Iterator<Item = f64>) {
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contrib) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(contrib.collect()),
        }
    }

    fn vjp(&self, node: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &self.nodes[node].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (sa, sb) = (self.value(*a).shape(), self.value(*b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                // dA = G B^T
                let mut ga = vec![0.0; m * k];
                for i in 0..m {
                    for p in 0..k {
                        let row_b = &db[p * n..(p + 1) * n];
                        let row_g = &g[i * n..(i + 1) * n];
                        ga[i * k + p] = row_g.iter().zip(row_b).map(|(x, y)| x * y).sum();
                    }
                }
                Self::accumulate(grads, *a, ga.into_iter());
                // dB = A^T G
                let mut gb = vec![0.0; k * n];
                for p in 0..k {
                    for i in 0..m {
                        let av = da[i * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        let row_g = &g[i * n..(i + 1) * n];
                        let dst = &mut gb[p * n..(p + 1) * n];
                        for (o, &gv) in dst.iter_mut().zip(row_g) {
                            *o += av * gv;
                        }
                    }
                }
                Self::accumulate(grads, *b, gb.into_iter());
            }
            Op::MatVec { a, x } => {
                let sa = self.value(*a).shape();
                let (m, k) = (sa[0], sa[1]);
                let (da, dx) = (self.value(*a).data(), self.value(*x).data());
                // dA = g (outer) x
                let mut ga = vec![0.0; m * k];
                for i in 0..m {
                    let gi = g[i];
                    if gi == 0.0 {
                        continue;
                    }
                    let dst = &mut ga[i * k..(i + 1) * k];
                    for (o, &xv) in dst.iter_mut().zip(dx) {
                        *o = gi * xv;
                    }
                }
                Self::accumulate(grads, *a, ga.into_iter());
                // dx = A^T g
                let mut gx = vec![0.0; k];
                for i in 0..m {
                    let gi = g[i];
                    if gi == 0.0 {
                        continue;
                    }
                    let row = &da[i * k..(i + 1) * k];
                    for (o, &w) in gx.iter_mut().zip(row) {
                        *o += gi * w;
                    }
                }
                Self::accumulate(grads, *x, gx.into_iter());
            }
            Op::Dot { a, b } => {
                let g0 = g[0];
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                Self::accumulate(grads, *a, db.iter().map(|v| g0 * v));
                Self::accumulate(grads, *b, da.iter().map(|v| g0 * v));
            }
            Op::Add { a, b } => {
                Self::accumulate(grads, *a, g.iter().copied());
                Self::accumulate(grads, *b, g.iter().copied());
            }
            Op::Mul { a, b } => {
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                Self::accumulate(grads, *a, g.iter().zip(db).map(|(gv, v)| gv * v));
                Self::accumulate(grads, *b, g.iter().zip(da).map(|(gv, v)| gv * v));
            }
            Op::Div { a, b } => {
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                Self::accumulate(grads, *a, g.iter().zip(db).map(|(gv, v)| gv / v));
                Self::accumulate(
                    grads,
                    *b,
                    g.iter()
                        .zip(da.iter().zip(db))
                        .map(|(gv, (av, bv))| -gv * av / (bv * bv)),
                );
            }
            Op::MulMask { x, mask } => {
                Self::accumulate(grads, *x, g.iter().zip(mask.data()).map(|(gv, m)| gv * m));
            }
            Op::Affine { x, mul, .. } => {
                let m = *mul;
                Self::accumulate(grads, *x, g.iter().map(|gv| m * gv));
            }
            Op::ScaleBy { x, s } => {
                let sv = self.value(*s).data()[0];
                let dx = self.value(*x).data();
                Self::accumulate(grads, *x, g.iter().map(|gv| sv * gv));
                let gs: f64 = g.iter().zip(dx).map(|(gv, xv)| gv * xv).sum();
                Self::accumulate(grads, *s, std::iter::once(gs));
            }
            Op::Sigmoid { x } => {
                let y = self.nodes[node].value.data();
                Self::accumulate(
                    grads,
                    *x,
                    g.iter().zip(y).map(|(gv, yv)| gv * yv * (1.0 - yv)),
                );
            }
            Op::Tanh { x } => {
                let y = self.nodes[node].value.data();
                Self::accumulate(grads, *x, g.iter().zip(y).map(|(gv, yv)| gv * (1.0 - yv * yv)));
            }
            Op::Log { x } => {
                let dx = self.value(*x).data();
                Self::accumulate(grads, *x, g.iter().zip(dx).map(|(gv, xv)| gv / xv));
            }
            Op::Softmax { x } => {
                let y = self.nodes[node].value.data();
                let cols = self.nodes[node].value.last_dim();
                let rows = y.len() / cols;
                let mut gx = vec![0.0; y.len()];
                for r in 0..rows {
                    let base = r * cols;
                    let dot: f64 = (0..cols).map(|c| g[base + c] * y[base + c]).sum();
                    for c in 0..cols {
                        gx[base + c] = y[base + c] * (g[base + c] - dot);
                    }
                }
                Self::accumulate(grads, *x, gx.into_iter());
            }
            Op::Concat { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    Self::accumulate(grads, p, g[offset..offset + n].iter().copied());
                    offset += n;
                }
            }
            Op::SliceRows { x, start, rows } => {
                let t = self.value(*x);
                let row_size = t.numel() / t.shape()[0];
                let lo = start * row_size;
                let hi = (start + rows) * row_size;
                // Write directly into the accumulator region to avoid a full
                // temporary for large leaves such as embedding matrices.
                let slot = &mut grads[x.0];
                let acc = slot.get_or_insert_with(|| vec![0.0; t.numel()]);
                for (o, gv) in acc[lo..hi].iter_mut().zip(g) {
                    *o += gv;
                }
            }
            Op::Reshape { x } => {
                Self::accumulate(grads, *x, g.iter().copied());
            }
            Op::MeanAll { x } => {
                let n = self.value(*x).numel();
                let gv = g[0] / n as f64;
                Self::accumulate(grads, *x, std::iter::repeat(gv).take(n));
            }
            Op::SumAll { x } => {
                let n = self.value(*x).numel();
                Self::accumulate(grads, *x, std::iter::repeat(g[0]).take(n));
            }
            Op::MaxLastAxis { x, argmax } => {
                let t = self.value(*x);
                let cols = t.last_dim();
                let mut gx = vec![0.0; t.numel()];
                for (r, &j) in argmax.iter().enumerate() {
                    gx[r * cols + j] = g[r];
                }
                Self::accumulate(grads, *x, gx.into_iter());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn store_with(entries: &[(&str, Tensor)]) -> ParamStore {
        let mut s = ParamStore::new();
        for (n, t) in entries {
            s.insert(*n, t.clone());
        }
        s
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![0.0]));
        let y = t.sigmoid(x);
        assert_eq!(t.value(y).data(), &[0.5]);
    }

    #[test]
    fn softmax_uniform_logits() {
        let mut t = Tape::new();
        let c = 1.7;
        let x = t.leaf(Tensor::vector(vec![c, c, c]));
        let y = t.softmax(x);
        for &v in t.value(y).data() {
            assert_abs_diff_eq!(v, 1.0 / 3.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::matrix(2, 3, vec![0.3, -1.2, 2.0, 5.0, 5.5, -3.0]).unwrap());
        let y = t.softmax(x);
        for r in 0..2 {
            let s: f64 = t.value(y).data()[r * 3..(r + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let xs = t.leaf(Tensor::matrix(2, 3, vec![100.3, 98.8, 102.0, 105.0, 105.5, 97.0]).unwrap());
        let ys = t.softmax(xs);
        for (a, b) in t.value(y).data().iter().zip(t.value(ys).data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn matmul_identity_returns_input() {
        let mut t = Tape::new();
        let eye = t.leaf(
            Tensor::matrix(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap(),
        );
        let x = t.leaf(Tensor::vector(vec![2.5, -1.0, 0.25]));
        let y = t.matvec(eye, x).unwrap();
        assert_eq!(t.value(y).data(), &[2.5, -1.0, 0.25]);
    }

    #[test]
    fn matmul_shape_mismatch_names_primitive() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let b = t.leaf(Tensor::matrix(2, 2, vec![0.0; 4]).unwrap());
        match t.matmul(a, b) {
            Err(KernelError::Shape { op, lhs, rhs }) => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 2]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let store = store_with(&[("x", Tensor::matrix(2, 2, vec![1.0, -2.0, 3.0, 0.5]).unwrap())]);
        let mut t = Tape::new();
        let x = t.param(&store, "x").unwrap();
        let loss = t.sum_all(x);
        let g = t.backward(loss).unwrap();
        assert_eq!(g["x"].data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_half_squared_norm_is_identity() {
        let store = store_with(&[("x", Tensor::vector(vec![1.0, -2.0]))]);
        let mut t = Tape::new();
        let x = t.param(&store, "x").unwrap();
        let sq = t.mul(x, x).unwrap();
        let s = t.sum_all(sq);
        let loss = t.affine(s, 0.5, 0.0);
        let g = t.backward(loss).unwrap();
        assert_eq!(g["x"].data(), &[1.0, -2.0]);
    }

    #[test]
    fn backward_sigmoid_of_w_times_x() {
        // loss = sigmoid(w * x) with w = 0, x = 1: dloss/dw = 0.25.
        let store = store_with(&[("w", Tensor::vector(vec![0.0]))]);
        let mut t = Tape::new();
        let w = t.param(&store, "w").unwrap();
        let x = t.leaf(Tensor::vector(vec![1.0]));
        let wx = t.mul(w, x).unwrap();
        let y = t.sigmoid(wx);
        let loss = t.sum_all(y);
        let g = t.backward(loss).unwrap();
        assert_abs_diff_eq!(g["w"].data()[0], 0.25, epsilon = 1e-15);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let store = store_with(&[("x", Tensor::vector(vec![1.0, 2.0]))]);
        let mut t = Tape::new();
        let x = t.param(&store, "x").unwrap();
        let y = t.affine(x, 2.0, 0.0);
        assert!(matches!(t.backward(y), Err(KernelError::Rank { .. })));
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let store = store_with(&[
            ("used", Tensor::vector(vec![2.0])),
            ("unused", Tensor::vector(vec![5.0, 6.0])),
        ]);
        let mut t = Tape::new();
        let u = t.param(&store, "used").unwrap();
        let _nu = t.param(&store, "unused").unwrap();
        let loss = t.sum_all(u);
        let g = t.backward(loss).unwrap();
        assert_eq!(g["unused"].data(), &[0.0, 0.0]);
        assert_eq!(g["used"].data(), &[1.0]);
    }

    #[test]
    fn gradient_accumulates_over_multiple_uses() {
        // loss = sum(2x) + sum(3x) -> d/dx = 5 per element.
        let store = store_with(&[("x", Tensor::vector(vec![1.0, 1.0]))]);
        let mut t = Tape::new();
        let x = t.param(&store, "x").unwrap();
        let a = t.affine(x, 2.0, 0.0);
        let b = t.affine(x, 3.0, 0.0);
        let s = t.add(a, b).unwrap();
        let loss = t.sum_all(s);
        let g = t.backward(loss).unwrap();
        assert_eq!(g["x"].data(), &[5.0, 5.0]);
    }

    #[test]
    fn slice_rows_routes_gradient_into_region() {
        let store = store_with(&[(
            "emb",
            Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
        )]);
        let mut t = Tape::new();
        let e = t.param(&store, "emb").unwrap();
        let r = t.row(e, 1).unwrap();
        let loss = t.sum_all(r);
        let g = t.backward(loss).unwrap();
        assert_eq!(g["emb"].data(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn max_last_axis_ties_pick_first() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::matrix(1, 3, vec![2.0, 2.0, 1.0]).unwrap());
        let m = t.max_last_axis(x).unwrap();
        assert_eq!(t.value(m).data(), &[2.0]);
        // Gradient goes to the first of the tied maxima.
        let store = store_with(&[("x", Tensor::matrix(1, 3, vec![2.0, 2.0, 1.0]).unwrap())]);
        let mut t = Tape::new();
        let x = t.param(&store, "x").unwrap();
        let m = t.max_last_axis(x).unwrap();
        let loss = t.sum_all(m);
        let g = t.backward(loss).unwrap();
        assert_eq!(g["x"].data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn concat_splits_gradient() {
        let store = store_with(&[
            ("a", Tensor::vector(vec![1.0, 2.0])),
            ("b", Tensor::vector(vec![3.0])),
        ]);
        let mut t = Tape::new();
        let a = t.param(&store, "a").unwrap();
        let b = t.param(&store, "b").unwrap();
        let c = t.concat(&[a, b]).unwrap();
        let w = t.leaf(Tensor::vector(vec![10.0, 20.0, 30.0]));
        let p = t.mul(c, w).unwrap();
        let loss = t.sum_all(p);
        let g = t.backward(loss).unwrap();
        assert_eq!(g["a"].data(), &[10.0, 20.0]);
        assert_eq!(g["b"].data(), &[30.0]);
    }

    #[test]
    fn div_by_zero_is_a_numerics_error() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::vector(vec![1.0]));
        let b = t.leaf(Tensor::vector(vec![0.0]));
        assert!(matches!(t.div(a, b), Err(KernelError::Numerics { .. })));
    }

    #[test]
    fn tanh_and_sigmoid_outputs_bounded() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![-1e6, -3.0, 0.0, 3.0, 1e6]));
        let s = t.sigmoid(x);
        let h = t.tanh(x);
        for &v in t.value(s).data() {
            assert!((0.0..=1.0).contains(&v));
        }
        for &v in t.value(h).data() {
            assert!((-1.0..=1.0).contains(&v));
        }
    }
}
