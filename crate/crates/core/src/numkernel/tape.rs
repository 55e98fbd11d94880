//! Reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records every operation of one objective evaluation. Parameters
//! are bound from a [`ParamStore`] by name; everything else is a constant.
//! [`Tape::backward`] walks the record in reverse and returns the gradient of
//! a scalar output with respect to each bound parameter.

use std::collections::BTreeMap;

use super::{Matrix, ParamStore};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(String),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Clamp(Var, f64, f64),
    DivScalar(Var, Var),
    RowNormalize(Var, Vec<f64>),
    Sum(Var),
    ConcatRows(Vec<Var>),
    SelectRows(Var, Vec<usize>),
    DiagSoftmaxXent(Var, Matrix),
    LabelSoftmaxXent(Var, Vec<usize>, Matrix),
    AbsErrorMean(Var, Vec<f64>),
    SqErrorMean(Var, Vec<f64>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::MatMulT(..) => "matmul_t",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::AddRowBias(..) => "add_bias",
            Op::Scale(..) => "scale",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::Exp(_) => "exp",
            Op::Clamp(..) => "clamp",
            Op::DivScalar(..) => "div_scalar",
            Op::RowNormalize(..) => "row_normalize",
            Op::Sum(_) => "sum",
            Op::ConcatRows(_) => "concat_rows",
            Op::SelectRows(..) => "select_rows",
            Op::DiagSoftmaxXent(..) => "diag_softmax_xent",
            Op::LabelSoftmaxXent(..) => "label_softmax_xent",
            Op::AbsErrorMean(..) => "abs_error_mean",
            Op::SqErrorMean(..) => "sq_error_mean",
        }
    }
}

struct Node {
    value: Matrix,
    op: Op,
}

pub struct Tape<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    bound: BTreeMap<String, Var>,
    first_non_finite: Option<String>,
}

impl<'p> Tape<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            bound: BTreeMap::new(),
            first_non_finite: None,
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        if self.first_non_finite.is_none() && !value.is_finite() {
            let label = match &op {
                Op::Param(name) => name.clone(),
                other => format!("{}#{}", other.name(), self.nodes.len()),
            };
            self.first_non_finite = Some(label);
        }
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Name of the first recorded tensor holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.first_non_finite.as_deref()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "not a scalar");
        m.get(0, 0)
    }

    /// Binds a stored parameter. Repeated calls return the same handle.
    /// Panics if the name is not in the store.
    pub fn param(&mut self, name: &str) -> Var {
        if let Some(&v) = self.bound.get(name) {
            return v;
        }
        let value = self
            .store
            .value(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
            .clone();
        let v = self.push(value, Op::Param(name.to_owned()));
        self.bound.insert(name.to_owned(), v);
        v
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_transposed(self.value(b));
        self.push(value, Op::MatMulT(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).add(self.value(b));
        self.push(value, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(value, Op::Mul(a, b))
    }

    /// Adds a `1×c` row to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let (am, bm) = (self.value(a), self.value(bias));
        assert_eq!(bm.rows(), 1, "bias must be a row vector");
        assert_eq!(am.cols(), bm.cols(), "bias width mismatch");
        let mut value = am.clone();
        for r in 0..value.rows() {
            for (x, b) in value.row_mut(r).iter_mut().zip(bm.as_slice()) {
                *x += b;
            }
        }
        self.push(value, Op::AddRowBias(a, bias))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).scale(factor);
        self.push(value, Op::Scale(a, factor))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.push(value, Op::Exp(a))
    }

    /// Elementwise clamp; the gradient is passed only where `lo ≤ x ≤ hi`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(value, Op::Clamp(a, lo, hi))
    }

    /// Divides every entry of `a` by the `1×1` value `s`.
    pub fn div_scalar(&mut self, a: Var, s: Var) -> Var {
        let d = self.scalar(s);
        let value = self.value(a).scale(1.0 / d);
        self.push(value, Op::DivScalar(a, s))
    }

    /// Scales each row to unit Euclidean norm. Rows must have non-zero norm;
    /// callers validate that beforehand.
    pub fn row_normalize(&mut self, a: Var) -> Var {
        let am = self.value(a);
        let norms = am.row_norms();
        let mut value = am.clone();
        for (r, n) in norms.iter().enumerate() {
            value.row_mut(r).iter_mut().for_each(|x| *x /= n);
        }
        self.push(value, Op::RowNormalize(a, norms))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols(), cols, "concat width mismatch");
            rows += m.rows();
            data.extend_from_slice(m.as_slice());
        }
        self.push(Matrix::from_raw(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn select_rows(&mut self, a: Var, indices: &[usize]) -> Var {
        let value = self.value(a).select_rows(indices);
        self.push(value, Op::SelectRows(a, indices.to_vec()))
    }

    /// Mean over rows of the cross-entropy between `softmax(row i)` and the
    /// one-hot target at column `i`. Requires a square input.
    pub fn diag_softmax_xent(&mut self, logits: Var) -> Var {
        let lm = self.value(logits);
        assert_eq!(lm.rows(), lm.cols(), "diagonal targets need a square matrix");
        let targets: Vec<usize> = (0..lm.rows()).collect();
        let (loss, probs) = softmax_xent(lm, &targets);
        self.push(Matrix::scalar(loss), Op::DiagSoftmaxXent(logits, probs))
    }

    /// Mean cross-entropy of row-softmaxed logits against class indices.
    pub fn label_softmax_xent(&mut self, logits: Var, labels: &[usize]) -> Var {
        let lm = self.value(logits);
        assert_eq!(lm.rows(), labels.len(), "label count mismatch");
        let (loss, probs) = softmax_xent(lm, labels);
        self.push(
            Matrix::scalar(loss),
            Op::LabelSoftmaxXent(logits, labels.to_vec(), probs),
        )
    }

    /// Mean absolute error of an `N×1` prediction column against targets.
    pub fn abs_error_mean(&mut self, pred: Var, targets: &[f64]) -> Var {
        let pm = self.value(pred);
        assert_eq!(pm.shape(), (targets.len(), 1), "prediction shape mismatch");
        let loss = pm
            .as_slice()
            .iter()
            .zip(targets)
            .map(|(p, y)| (p - y).abs())
            .sum::<f64>()
            / targets.len() as f64;
        self.push(Matrix::scalar(loss), Op::AbsErrorMean(pred, targets.to_vec()))
    }

    /// Mean squared error of an `N×1` prediction column against targets.
    pub fn sq_error_mean(&mut self, pred: Var, targets: &[f64]) -> Var {
        let pm = self.value(pred);
        assert_eq!(pm.shape(), (targets.len(), 1), "prediction shape mismatch");
        let loss = pm
            .as_slice()
            .iter()
            .zip(targets)
            .map(|(p, y)| (p - y).powi(2))
            .sum::<f64>()
            / targets.len() as f64;
        self.push(Matrix::scalar(loss), Op::SqErrorMean(pred, targets.to_vec()))
    }

    /// Gradients of the scalar `loss` with respect to every bound parameter,
    /// keyed by parameter name. Unreached parameters get zero gradients.
    pub fn backward(&self, loss: Var) -> BTreeMap<String, Matrix> {
        assert_eq!(self.value(loss).shape(), (1, 1), "loss must be a scalar");
        let mut grads: Vec<Option<Matrix>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param(_) => {
                    grads[idx] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let ga = g.matmul_transposed(self.value(*b));
                    let gb = self.value(*a).transposed_matmul(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    let ga = g.matmul(self.value(*b));
                    let gb = g.transposed_matmul(self.value(*a));
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose()),
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(*b), |x, y| x * y);
                    let gb = g.zip_map(self.value(*a), |x, y| x * y);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::AddRowBias(a, bias) => {
                    let mut gb = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (acc, x) in gb.as_mut_slice().iter_mut().zip(g.row(r)) {
                            *acc += x;
                        }
                    }
                    accumulate(&mut grads, *a, g);
                    accumulate(&mut grads, *bias, gb);
                }
                Op::Scale(a, factor) => accumulate(&mut grads, *a, g.scale(*factor)),
                Op::Tanh(a) => {
                    let ga = g.zip_map(&node.value, |x, y| x * (1.0 - y * y));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let ga = g.zip_map(self.value(*a), |x, inp| if inp > 0.0 { x } else { 0.0 });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Exp(a) => {
                    let ga = g.zip_map(&node.value, |x, y| x * y);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Clamp(a, lo, hi) => {
                    let ga = g.zip_map(self.value(*a), |x, inp| {
                        if inp >= *lo && inp <= *hi {
                            x
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::DivScalar(a, s) => {
                    let d = self.scalar(*s);
                    let ga = g.scale(1.0 / d);
                    let num: f64 = g
                        .as_slice()
                        .iter()
                        .zip(self.value(*a).as_slice())
                        .map(|(x, y)| x * y)
                        .sum();
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *s, Matrix::scalar(-num / (d * d)));
                }
                Op::RowNormalize(a, norms) => {
                    let y = &node.value;
                    let mut ga = Matrix::zeros(g.rows(), g.cols());
                    for (r, n) in norms.iter().enumerate() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let proj: f64 = yr.iter().zip(gr).map(|(u, v)| u * v).sum();
                        for ((out, &gv), &yv) in ga.row_mut(r).iter_mut().zip(gr).zip(yr) {
                            *out = (gv - yv * proj) / n;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let (r, c) = self.value(*a).shape();
                    accumulate(&mut grads, *a, Matrix::filled(r, c, g.get(0, 0)));
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let rows = self.value(*p).rows();
                        let idx: Vec<usize> = (offset..offset + rows).collect();
                        accumulate(&mut grads, *p, g.select_rows(&idx));
                        offset += rows;
                    }
                }
                Op::SelectRows(a, indices) => {
                    let (r, c) = self.value(*a).shape();
                    let mut ga = Matrix::zeros(r, c);
                    for (k, &i) in indices.iter().enumerate() {
                        for (out, x) in ga.row_mut(i).iter_mut().zip(g.row(k)) {
                            *out += x;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::DiagSoftmaxXent(a, probs) => {
                    let targets: Vec<usize> = (0..probs.rows()).collect();
                    accumulate(&mut grads, *a, softmax_xent_grad(probs, &targets, g.get(0, 0)));
                }
                Op::LabelSoftmaxXent(a, labels, probs) => {
                    accumulate(&mut grads, *a, softmax_xent_grad(probs, labels, g.get(0, 0)));
                }
                Op::AbsErrorMean(a, targets) => {
                    let n = targets.len() as f64;
                    let scale = g.get(0, 0) / n;
                    let data = self
                        .value(*a)
                        .as_slice()
                        .iter()
                        .zip(targets)
                        .map(|(p, y)| {
                            let diff = p - y;
                            if diff > 0.0 {
                                scale
                            } else if diff < 0.0 {
                                -scale
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    accumulate(&mut grads, *a, Matrix::from_raw(targets.len(), 1, data));
                }
                Op::SqErrorMean(a, targets) => {
                    let n = targets.len() as f64;
                    let scale = 2.0 * g.get(0, 0) / n;
                    let data = self
                        .value(*a)
                        .as_slice()
                        .iter()
                        .zip(targets)
                        .map(|(p, y)| scale * (p - y))
                        .collect();
                    accumulate(&mut grads, *a, Matrix::from_raw(targets.len(), 1, data));
                }
            }
        }

        self.bound
            .iter()
            .map(|(name, v)| {
                let grad = grads
                    .get_mut(v.0)
                    .and_then(Option::take)
                    .unwrap_or_else(|| {
                        let (r, c) = self.value(*v).shape();
                        Matrix::zeros(r, c)
                    });
                (name.clone(), grad)
            })
            .collect()
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Row-wise stable softmax cross-entropy. Returns the mean loss and the
/// softmax probabilities.
fn softmax_xent(logits: &Matrix, targets: &[usize]) -> (f64, Matrix) {
    let mut probs = logits.clone();
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row = probs.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            z += *x;
        }
        row.iter_mut().for_each(|x| *x /= z);
        total += -(logits.get(r, t) - max - z.ln());
    }
    (total / targets.len() as f64, probs)
}

fn softmax_xent_grad(probs: &Matrix, targets: &[usize], upstream: f64) -> Matrix {
    let scale = upstream / targets.len() as f64;
    let mut g = probs.scale(scale);
    for (r, &t) in targets.iter().enumerate() {
        let v = g.get(r, t) - scale;
        g.set(r, t, v);
    }
    g
}
