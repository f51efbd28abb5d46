//! Tape of recorded operations. A graph is built fresh for every forward
//! pass; parameter leaves borrow their values from a [`ParamStore`] and
//! [`Graph::backward`] hands back gradients that the caller folds into the
//! store with [`ParamStore::accumulate`].

use rand::Rng;

use super::tensor::{ParamId, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    /// tanh approximation
    Gelu,
    Tanh,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Activation {
    fn apply<F: Scalar>(self, x: F) -> F {
        match self {
            Activation::Relu => x.max(F::zero()),
            Activation::Tanh => x.tanh(),
            Activation::Gelu => {
                let u = F::of(GELU_C) * (x + F::of(GELU_A) * x * x * x);
                F::of(0.5) * x * (F::one() + u.tanh())
            }
        }
    }

    fn derivative<F: Scalar>(self, x: F) -> F {
        match self {
            Activation::Relu => {
                if x > F::zero() {
                    F::one()
                } else {
                    F::zero()
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                F::one() - t * t
            }
            Activation::Gelu => {
                let c = F::of(GELU_C);
                let a = F::of(GELU_A);
                let t = (c * (x + a * x * x * x)).tanh();
                let half = F::of(0.5);
                half * (F::one() + t)
                    + half * x * (F::one() - t * t) * c * (F::one() + F::of(3.0) * a * x * x)
            }
        }
    }
}

enum Op<F> {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, F),
    AddScalar(Var),
    Act(Var, Activation),
    Log(Var),
    Exp(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        inv_std: Vec<F>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SelectRows {
        x: Var,
        idx: Vec<usize>,
    },
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    MeanRows(Var),
    SumAll(Var),
    NormalizeRows(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<F>,
        denom: F,
        probs: Vec<F>,
    },
    Dropout {
        x: Var,
        mask: Vec<F>,
    },
}

enum Value<F> {
    Owned(Vec<F>),
    Param(ParamId),
}

struct Node<F> {
    rows: usize,
    cols: usize,
    value: Value<F>,
    op: Op<F>,
    needs_grad: bool,
}

pub struct Graph<'a, F: Scalar> {
    store: Option<&'a ParamStore<F>>,
    nodes: Vec<Node<F>>,
    param_vars: Vec<Option<Var>>,
}

/// Gradients produced by one backward pass.
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
    params: Vec<(ParamId, Var)>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient of the loss with respect to `v`, if `v` was reached.
    pub fn wrt(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[F])> {
        self.params
            .iter()
            .filter_map(|&(id, v)| self.wrt(v).map(|g| (id, g)))
    }
}

impl<F: Scalar> ParamStore<F> {
    /// Adds a backward pass's parameter gradients into the stored gradient
    /// buffers. Gradients accumulate until [`ParamStore::zero_grad`].
    pub fn accumulate(&mut self, grads: &Gradients<F>) -> Result<()> {
        for (id, g) in grads.params() {
            let t = &mut self.get_mut(id).tensor;
            if t.requires_grad {
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }
}

fn check_finite<F: Scalar>(op: &'static str, data: &[F]) -> Result<()> {
    if data.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

impl<'a, F: Scalar> Default for Graph<'a, F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, F: Scalar> Graph<'a, F> {
    /// A graph without parameters; leaves come from [`Graph::input`].
    pub fn new() -> Self {
        Self {
            store: None,
            nodes: Vec::with_capacity(256),
            param_vars: Vec::new(),
        }
    }

    pub fn with_params(store: &'a ParamStore<F>) -> Self {
        Self {
            store: Some(store),
            nodes: Vec::with_capacity(512),
            param_vars: vec![None; store.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[F] {
        match &self.nodes[v.0].value {
            Value::Owned(d) => d,
            Value::Param(id) => self
                .store
                .expect("parameter node without store")
                .tensor(*id)
                .data(),
        }
    }

    pub fn scalar(&self, v: Var) -> F {
        self.value(v)[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<F> {
        let (r, c) = self.shape(v);
        Tensor::matrix(r, c, self.value(v).to_vec()).expect("node shape")
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, op: &'static str, rows: usize, cols: usize, data: Vec<F>, o: Op<F>, needs_grad: bool) -> Result<Var> {
        check_finite(op, &data)?;
        self.nodes.push(Node {
            rows,
            cols,
            value: Value::Owned(data),
            op: o,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a leaf. It takes part in backward iff `t.requires_grad`.
    pub fn input(&mut self, t: Tensor<F>) -> Result<Var> {
        let (r, c) = t.dims2();
        let needs = t.requires_grad;
        self.push("input", r, c, t.into_data(), Op::Leaf, needs)
    }

    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<F>) -> Result<Var> {
        if rows * cols != data.len() || rows == 0 || cols == 0 {
            return Err(Error::shape("constant", format!("{rows}x{cols} from {} values", data.len())));
        }
        self.push("constant", rows, cols, data, Op::Leaf, false)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let t = self.store.expect("graph has no parameter store").tensor(id);
        let (r, c) = t.dims2();
        self.nodes.push(Node {
            rows: r,
            cols: c,
            value: Value::Param(id),
            op: Op::Param,
            needs_grad: t.requires_grad,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(Error::shape("matmul", format!("{m}x{k} · {k2}x{n}")));
        }
        let mut out = vec![F::zero(); m * n];
        F::gemm(m, k, n, F::one(), self.value(a), k as isize, 1, self.value(b), n as isize, 1, F::zero(), &mut out, n as isize, 1);
        let needs = self.needs(a) || self.needs(b);
        self.push("matmul", m, n, out, Op::MatMul(a, b), needs)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        if k != k2 {
            return Err(Error::shape("matmul_t", format!("{m}x{k} · ({n}x{k2})ᵀ")));
        }
        let mut out = vec![F::zero(); m * n];
        F::gemm(m, k, n, F::one(), self.value(a), k as isize, 1, self.value(b), 1, k as isize, F::zero(), &mut out, n as isize, 1);
        let needs = self.needs(a) || self.needs(b);
        self.push("matmul_t", m, n, out, Op::MatMulT(a, b), needs)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let (r, c) = self.shape(a);
        let needs = self.needs(a) || self.needs(b);
        self.push("add", r, c, out, Op::Add(a, b), needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let (r, c) = self.shape(a);
        let needs = self.needs(a) || self.needs(b);
        self.push("mul", r, c, out, Op::Mul(a, b), needs)
    }

    /// Adds a `1×n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if self.shape(row) != (1, c) {
            return Err(Error::shape("add_row", format!("{r}x{c} + {:?}", self.shape(row))));
        }
        let b = self.value(row);
        let out = self.value(a).chunks(c).flat_map(|x| x.iter().zip(b).map(|(&x, &y)| x + y)).collect();
        let needs = self.needs(a) || self.needs(row);
        self.push("add_row", r, c, out, Op::AddRow(a, row), needs)
    }

    pub fn scale(&mut self, a: Var, s: F) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| x * s).collect();
        let (r, c) = self.shape(a);
        let needs = self.needs(a);
        self.push("scale", r, c, out, Op::Scale(a, s), needs)
    }

    pub fn add_scalar(&mut self, a: Var, s: F) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| x + s).collect();
        let (r, c) = self.shape(a);
        let needs = self.needs(a);
        self.push("add_scalar", r, c, out, Op::AddScalar(a), needs)
    }

    pub fn activation(&mut self, a: Var, act: Activation) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| act.apply(x)).collect();
        let (r, c) = self.shape(a);
        let needs = self.needs(a);
        self.push("activation", r, c, out, Op::Act(a, act), needs)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).iter().any(|&x| x <= F::zero()) {
            return Err(Error::NonFinite { op: "log" });
        }
        let out = self.value(a).iter().map(|x| x.ln()).collect();
        let (r, c) = self.shape(a);
        let needs = self.needs(a);
        self.push("log", r, c, out, Op::Log(a), needs)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).iter().map(|x| x.exp()).collect();
        let (r, c) = self.shape(a);
        let needs = self.needs(a);
        self.push("exp", r, c, out, Op::Exp(a), needs)
    }

    /// Row-wise softmax. With `causal`, entry (i, j) for j > i is masked out.
    pub fn softmax(&mut self, a: Var, causal: bool) -> Result<Var> {
        let (r, c) = self.shape(a);
        let x = self.value(a);
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            let width = if causal { (i + 1).min(c) } else { c };
            let row = &x[i * c..i * c + width];
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let dst = &mut out[i * c..i * c + width];
            let mut sum = F::zero();
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = (v - max).exp();
                sum = sum + *d;
            }
            let inv = sum.recip();
            dst.iter_mut().for_each(|d| *d = *d * inv);
        }
        let needs = self.needs(a);
        self.push("softmax", r, c, out, Op::Softmax(a), needs)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.shape(x);
        if self.shape(gamma) != (1, c) || self.shape(beta) != (1, c) {
            return Err(Error::shape("layer_norm", format!("{r}x{c} with gain {:?}", self.shape(gamma))));
        }
        let xs = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let n = F::of(c as f64);
        let mut xhat = vec![F::zero(); r * c];
        let mut inv_std = vec![F::zero(); r];
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<F>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
            let is = (var + F::of(eps)).sqrt().recip();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push("layer_norm", r, c, out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, needs)
    }

    /// Gathers rows of `table` by id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.shape(table);
        if ids.is_empty() {
            return Err(Error::shape("embedding", "empty id list"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::shape("embedding", format!("id {bad} outside table of {v} rows")));
        }
        let t = self.value(table);
        let out = ids.iter().flat_map(|&i| t[i * d..(i + 1) * d].iter().copied()).collect();
        let needs = self.needs(table);
        self.push("embedding", ids.len(), d, out, Op::Embedding { table, ids: ids.to_vec() }, needs)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if len == 0 || start + len > c {
            return Err(Error::shape("slice_cols", format!("columns {start}..{} of {c}", start + len)));
        }
        let out = self.value(x).chunks(c).flat_map(|row| row[start..start + len].iter().copied()).collect();
        let needs = self.needs(x);
        self.push("slice_cols", r, len, out, Op::SliceCols { x, start }, needs)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat_cols", "no inputs"));
        };
        let r = self.shape(first).0;
        if parts.iter().any(|&p| self.shape(p).0 != r) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let c: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for &p in parts {
                let pc = self.shape(p).1;
                out.extend_from_slice(&self.value(p)[i * pc..(i + 1) * pc]);
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push("concat_cols", r, c, out, Op::ConcatCols(parts.to_vec()), needs)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat_rows", "no inputs"));
        };
        let c = self.shape(first).1;
        if parts.iter().any(|&p| self.shape(p).1 != c) {
            return Err(Error::shape("concat_rows", "column counts differ"));
        }
        let r: usize = parts.iter().map(|&p| self.shape(p).0).sum();
        let mut out = Vec::with_capacity(r * c);
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push("concat_rows", r, c, out, Op::ConcatRows(parts.to_vec()), needs)
    }

    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(x);
        if idx.is_empty() {
            return Err(Error::shape("select_rows", "empty index list"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::shape("select_rows", format!("row {bad} of {r}")));
        }
        let xs = self.value(x);
        let out = idx.iter().flat_map(|&i| xs[i * c..(i + 1) * c].iter().copied()).collect();
        let needs = self.needs(x);
        self.push("select_rows", idx.len(), c, out, Op::SelectRows { x, idx: idx.to_vec() }, needs)
    }

    /// Picks elements of `x` by flat row-major index into a `rows×cols` result.
    pub fn gather(&mut self, x: Var, idx: &[usize], rows: usize, cols: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if idx.len() != rows * cols || idx.is_empty() {
            return Err(Error::shape("gather", format!("{} indices for {rows}x{cols}", idx.len())));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= r * c) {
            return Err(Error::shape("gather", format!("index {bad} of {}", r * c)));
        }
        let xs = self.value(x);
        let out = idx.iter().map(|&i| xs[i]).collect();
        let needs = self.needs(x);
        self.push("gather", rows, cols, out, Op::Gather { x, idx: idx.to_vec() }, needs)
    }

    /// Mean over the row axis: `r×c → 1×c`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        let mut out = vec![F::zero(); c];
        for row in self.value(x).chunks(c) {
            out.iter_mut().zip(row).for_each(|(o, &v)| *o = *o + v);
        }
        let inv = F::of(r as f64).recip();
        out.iter_mut().for_each(|o| *o = *o * inv);
        let needs = self.needs(x);
        self.push("mean_rows", 1, c, out, Op::MeanRows(x), needs)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().copied().sum();
        let needs = self.needs(x);
        self.push("sum", 1, 1, vec![s], Op::SumAll(x), needs)
    }

    /// Scales each row to unit Euclidean norm.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        let xs = self.value(x);
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let norm = (row.iter().map(|&v| v * v).sum::<F>() + F::of(NORM_EPS)).sqrt();
            let inv = norm.recip();
            out[i * c..(i + 1) * c].iter_mut().zip(row).for_each(|(o, &v)| *o = v * inv);
        }
        let needs = self.needs(x);
        self.push("normalize_rows", r, c, out, Op::NormalizeRows(x), needs)
    }

    /// Matrix of cosine similarities between the rows of `a` and the rows of `b`.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let na = self.normalize_rows(a)?;
        let nb = if a == b { na } else { self.normalize_rows(b)? };
        self.matmul_t(na, nb)
    }

    /// `Σ_i w_i · (−log softmax(logits_i)[t_i]) / denom`, a `1×1` result.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[F], denom: F) -> Result<Var> {
        let (r, c) = self.shape(logits);
        if targets.len() != r || weights.len() != r {
            return Err(Error::shape(
                "cross_entropy",
                format!("{r} rows, {} targets, {} weights", targets.len(), weights.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::shape("cross_entropy", format!("target {bad} of {c} classes")));
        }
        if denom <= F::zero() {
            return Err(Error::Parameter("cross-entropy normalizer must be positive".into()));
        }
        let z = self.value(logits);
        let mut probs = vec![F::zero(); r * c];
        let mut total = F::zero();
        for i in 0..r {
            let row = &z[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut sum = F::zero();
            for (p, &v) in probs[i * c..(i + 1) * c].iter_mut().zip(row) {
                *p = (v - max).exp();
                sum = sum + *p;
            }
            let lse = max + sum.ln();
            total = total + weights[i] * (lse - row[targets[i]]);
            let inv = sum.recip();
            probs[i * c..(i + 1) * c].iter_mut().for_each(|p| *p = *p * inv);
        }
        let needs = self.needs(logits);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            weights: weights.to_vec(),
            denom,
            probs,
        };
        self.push("cross_entropy", 1, 1, vec![total / denom], op, needs)
    }

    /// Inverted dropout; identity when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if p <= 0.0 {
            return Ok(x);
        }
        if p >= 1.0 {
            return Err(Error::Parameter(format!("dropout rate {p} outside [0, 1)")));
        }
        let keep = F::of(1.0 / (1.0 - p));
        let (r, c) = self.shape(x);
        let mask: Vec<F> = (0..r * c)
            .map(|_| if rng.random::<f64>() < p { F::zero() } else { keep })
            .collect();
        let out = self.value(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let needs = self.needs(x);
        self.push("dropout", r, c, out, Op::Dropout { x, mask }, needs)
    }

    /// Reverse sweep from a `1×1` loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![F::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, Var(i), &g, &mut grads);
            grads[i] = Some(g);
        }

        let params = self
            .param_vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
            .collect();
        Ok(Gradients { grads, params })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<F>>], v: Var) -> Option<&'g mut Vec<F>> {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        let n = node.rows * node.cols;
        Some(grads[v.0].get_or_insert_with(|| vec![F::zero(); n]))
    }

    fn propagate(&self, node: &Node<F>, out: Var, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let (r, c) = (node.rows, node.cols);
        match &node.op {
            Op::Leaf | Op::Param => {}
            &Op::MatMul(a, b) => {
                let k = self.shape(a).1;
                if let Some(ga) = self.slot(grads, a) {
                    // dA += dC · Bᵀ
                    F::gemm(r, c, k, F::one(), g, c as isize, 1, self.value(b), 1, c as isize, F::one(), ga, k as isize, 1);
                }
                if let Some(gb) = self.slot(grads, b) {
                    // dB += Aᵀ · dC
                    F::gemm(k, r, c, F::one(), self.value(a), 1, k as isize, g, c as isize, 1, F::one(), gb, c as isize, 1);
                }
            }
            &Op::MatMulT(a, b) => {
                let k = self.shape(a).1;
                if let Some(ga) = self.slot(grads, a) {
                    // dA += dC · B
                    F::gemm(r, c, k, F::one(), g, c as isize, 1, self.value(b), k as isize, 1, F::one(), ga, k as isize, 1);
                }
                if let Some(gb) = self.slot(grads, b) {
                    // dB += dCᵀ · A
                    F::gemm(c, r, k, F::one(), g, 1, c as isize, self.value(a), k as isize, 1, F::one(), gb, k as isize, 1);
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = self.slot(grads, v) {
                        gv.iter_mut().zip(g).for_each(|(x, &d)| *x = *x + d);
                    }
                }
            }
            &Op::Mul(a, b) => {
                if let Some(ga) = self.slot(grads, a) {
                    let bv = self.value(b);
                    ga.iter_mut().zip(g.iter().zip(bv)).for_each(|(x, (&d, &y))| *x = *x + d * y);
                }
                if let Some(gb) = self.slot(grads, b) {
                    let av = self.value(a);
                    gb.iter_mut().zip(g.iter().zip(av)).for_each(|(x, (&d, &y))| *x = *x + d * y);
                }
            }
            &Op::AddRow(a, row) => {
                if let Some(ga) = self.slot(grads, a) {
                    ga.iter_mut().zip(g).for_each(|(x, &d)| *x = *x + d);
                }
                if let Some(gr) = self.slot(grads, row) {
                    for chunk in g.chunks(c) {
                        gr.iter_mut().zip(chunk).for_each(|(x, &d)| *x = *x + d);
                    }
                }
            }
            &Op::Scale(a, s) => {
                if let Some(ga) = self.slot(grads, a) {
                    ga.iter_mut().zip(g).for_each(|(x, &d)| *x = *x + d * s);
                }
            }
            &Op::AddScalar(a) => {
                if let Some(ga) = self.slot(grads, a) {
                    ga.iter_mut().zip(g).for_each(|(x, &d)| *x = *x + d);
                }
            }
            &Op::Act(a, act) => {
                if let Some(ga) = self.slot(grads, a) {
                    let xv = self.value(a);
                    ga.iter_mut()
                        .zip(g.iter().zip(xv))
                        .for_each(|(x, (&d, &v))| *x = *x + d * act.derivative(v));
                }
            }
            &Op::Log(a) => {
                if let Some(ga) = self.slot(grads, a) {
                    let xv = self.value(a);
                    ga.iter_mut().zip(g.iter().zip(xv)).for_each(|(x, (&d, &v))| *x = *x + d / v);
                }
            }
            &Op::Exp(a) => {
                if let Some(ga) = self.slot(grads, a) {
                    let yv = self.value(out);
                    ga.iter_mut().zip(g.iter().zip(yv)).for_each(|(x, (&d, &y))| *x = *x + d * y);
                }
            }
            &Op::Softmax(a) => {
                if let Some(ga) = self.slot(grads, a) {
                    let y = self.value(out);
                    for i in 0..r {
                        let yr = &y[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let dot: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..c {
                            ga[i * c + j] = ga[i * c + j] + yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let gv = self.value(*gamma);
                if let Some(gb) = self.slot(grads, *beta) {
                    for chunk in g.chunks(c) {
                        gb.iter_mut().zip(chunk).for_each(|(x, &d)| *x = *x + d);
                    }
                }
                if let Some(gg) = self.slot(grads, *gamma) {
                    for (chunk, h) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            gg[j] = gg[j] + chunk[j] * h[j];
                        }
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    let n = F::of(c as f64);
                    for i in 0..r {
                        let h = &xhat[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let mut s1 = F::zero();
                        let mut s2 = F::zero();
                        for j in 0..c {
                            let dh = gr[j] * gv[j];
                            s1 = s1 + dh;
                            s2 = s2 + dh * h[j];
                        }
                        let k = inv_std[i] / n;
                        for j in 0..c {
                            let dh = gr[j] * gv[j];
                            gx[i * c + j] = gx[i * c + j] + k * (n * dh - s1 - h[j] * s2);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if let Some(gt) = self.slot(grads, *table) {
                    for (row, &id) in g.chunks(c).zip(ids) {
                        gt[id * c..(id + 1) * c].iter_mut().zip(row).for_each(|(x, &d)| *x = *x + d);
                    }
                }
            }
            &Op::SliceCols { x, start } => {
                let xc = self.shape(x).1;
                if let Some(gx) = self.slot(grads, x) {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * xc + start + j] = gx[i * xc + start + j] + g[i * c + j];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pc = self.shape(p).1;
                    if let Some(gp) = self.slot(grads, p) {
                        for i in 0..r {
                            for j in 0..pc {
                                gp[i * pc + j] = gp[i * pc + j] + g[i * c + off + j];
                            }
                        }
                    }
                    off += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.shape(p).0 * c;
                    if let Some(gp) = self.slot(grads, p) {
                        gp.iter_mut().zip(&g[off..off + n]).for_each(|(x, &d)| *x = *x + d);
                    }
                    off += n;
                }
            }
            Op::SelectRows { x, idx } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for (row, &i) in g.chunks(c).zip(idx) {
                        gx[i * c..(i + 1) * c].iter_mut().zip(row).for_each(|(x, &d)| *x = *x + d);
                    }
                }
            }
            Op::Gather { x, idx } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for (&i, &d) in idx.iter().zip(g) {
                        gx[i] = gx[i] + d;
                    }
                }
            }
            &Op::MeanRows(x) => {
                let xr = self.shape(x).0;
                if let Some(gx) = self.slot(grads, x) {
                    let inv = F::of(xr as f64).recip();
                    for row in gx.chunks_mut(c) {
                        row.iter_mut().zip(g).for_each(|(x, &d)| *x = *x + d * inv);
                    }
                }
            }
            &Op::SumAll(x) => {
                if let Some(gx) = self.slot(grads, x) {
                    gx.iter_mut().for_each(|v| *v = *v + g[0]);
                }
            }
            &Op::NormalizeRows(x) => {
                if let Some(gx) = self.slot(grads, x) {
                    let xv = self.value(x);
                    let y = self.value(out);
                    for i in 0..r {
                        let xr = &xv[i * c..(i + 1) * c];
                        let yr = &y[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let inv = (xr.iter().map(|&v| v * v).sum::<F>() + F::of(NORM_EPS)).sqrt().recip();
                        let dot: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..c {
                            gx[i * c + j] = gx[i * c + j] + (gr[j] - yr[j] * dot) * inv;
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, weights, denom, probs } => {
                if let Some(gl) = self.slot(grads, *logits) {
                    let lc = self.shape(*logits).1;
                    for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        let k = g[0] * w / *denom;
                        for j in 0..lc {
                            let onehot = if j == t { F::one() } else { F::zero() };
                            gl[i * lc + j] = gl[i * lc + j] + k * (probs[i * lc + j] - onehot);
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(g.iter().zip(mask)).for_each(|(v, (&d, &m))| *v = *v + d * m);
                }
            }
        }
    }
}

const NORM_EPS: f64 = 1e-12;

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(g: &mut Graph<f64>, r: usize, c: usize, d: &[f64]) -> Var {
        g.input(Tensor::matrix(r, c, d.to_vec()).unwrap().with_grad()).unwrap()
    }

    #[test]
    fn matmul_small() {
        let mut g = Graph::<f64>::new();
        let a = leaf(&mut g, 1, 2, &[1.0, 2.0]);
        let b = leaf(&mut g, 2, 1, &[3.0, 4.0]);
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c), &[11.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::<f64>::new();
        let a = leaf(&mut g, 1, 2, &[0.0, 0.0]);
        let s = g.softmax(a, false).unwrap();
        assert_eq!(g.value(s), &[0.5, 0.5]);
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut g = Graph::<f64>::new();
        let a = leaf(&mut g, 2, 2, &[1.0, 5.0, 0.0, 0.0]);
        let s = g.softmax(a, true).unwrap();
        assert_eq!(g.value(s), &[1.0, 0.0, 0.5, 0.5]);
    }

    #[test]
    fn cosine_of_orthogonal_rows_is_zero() {
        let mut g = Graph::<f64>::new();
        let a = leaf(&mut g, 1, 2, &[1.0, 0.0]);
        let b = leaf(&mut g, 1, 2, &[0.0, 1.0]);
        let c = g.cosine_similarity(a, b).unwrap();
        assert_eq!(g.value(c), &[0.0]);
    }

    #[test]
    fn square_derivative() {
        let mut g = Graph::<f64>::new();
        let x = leaf(&mut g, 1, 1, &[3.0]);
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &[6.0]);
    }

    #[test]
    fn sum_of_product_gradient_is_ones_times_b_transposed() {
        let mut g = Graph::<f64>::new();
        let a = leaf(&mut g, 2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = leaf(&mut g, 3, 2, &[0.5, -1.0, 2.0, 0.0, 1.5, 3.0]);
        let ab = g.matmul(a, b).unwrap();
        let s = g.sum(ab).unwrap();
        let grads = g.backward(s).unwrap();
        // ones(2x2) · Bᵀ: each row equals the row sums of B
        let expected = [-0.5, 2.0, 4.5, -0.5, 2.0, 4.5];
        assert_eq!(grads.wrt(a).unwrap(), &expected);
        // Aᵀ · ones(2x2): each column equals the column sums of A
        let gb = grads.wrt(b).unwrap();
        assert_eq!(gb, &[5.0, 5.0, 7.0, 7.0, 9.0, 9.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::<f64>::new();
        let a = leaf(&mut g, 1, 2, &[1.0, 2.0]);
        assert!(matches!(g.backward(a), Err(Error::Contract(_))));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut g = Graph::<f64>::new();
        let a = leaf(&mut g, 2, 2, &[1.0; 4]);
        let b = leaf(&mut g, 3, 1, &[1.0; 3]);
        assert!(matches!(g.matmul(a, b), Err(Error::Shape { op: "matmul", .. })));
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let mut g = Graph::<f64>::new();
        assert!(matches!(
            g.input(Tensor::scalar(f64::NAN)),
            Err(Error::NonFinite { .. })
        ));
        let x = leaf(&mut g, 1, 1, &[-1.0]);
        assert!(g.log(x).is_err());
    }

    #[test]
    fn gradients_accumulate_across_backward_calls() {
        let mut store = ParamStore::<f64>::new();
        let p = store.add("p", Tensor::scalar(2.0), true);
        for _ in 0..2 {
            let mut g = Graph::with_params(&store);
            let x = g.param(p);
            let y = g.mul(x, x).unwrap();
            let grads = g.backward(y).unwrap();
            store.accumulate(&grads).unwrap();
        }
        assert_eq!(store.tensor(p).grad().unwrap(), &[8.0]);
        store.zero_grad();
        assert!(store.tensor(p).grad().is_none());
    }
}
