//! Minimal reverse-mode differentiation over dense 2-D `f64` matrices.
//!
//! A [`Tape`] records every operation in evaluation order; [`Tape::backward`]
//! walks it in reverse, accumulating adjoints. Vectors are 1×n matrices.

use std::rc::Rc;

use ndarray::{s, Array2, Axis};

pub type Mat = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// a · bᵀ
    MatMulNt(Var, Var),
    Add(Var, Var),
    /// n×m plus a broadcast 1×m row
    AddRow(Var, Var),
    /// n×1 column plus 1×m row, giving n×m
    OuterSum(Var, Var),
    Scale(Var, f64),
    Elu(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    /// row-wise softmax restricted to `mask == true`
    MaskedSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    /// rows scaled to unit L2 norm; zero rows stay zero
    NormalizeRows(Var, Vec<f64>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    /// summed negative log-likelihood of row targets; `None` rows are skipped
    CrossEntropy(Var, Vec<Option<usize>>, Mat),
    Sum(Var),
}

#[derive(Debug, Default)]
pub struct Tape {
    values: Vec<Mat>,
    ops: Vec<Op>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Grads(Vec<Option<Mat>>);

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.0[v.0].as_ref()
    }

    /// Adjoint of `v`, or zeros of `shape` if nothing flowed into it.
    pub fn take_or_zeros(&mut self, v: Var, shape: (usize, usize)) -> Mat {
        self.0[v.0].take().unwrap_or_else(|| Mat::zeros(shape))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.values.push(value);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.values[v.0].dim()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b).t());
        self.push(out, Op::MatMulNt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let out = self.value(a) + self.value(row);
        self.push(out, Op::AddRow(a, row))
    }

    pub fn outer_sum(&mut self, col: Var, row: Var) -> Var {
        let (n, _) = self.shape(col);
        let (_, m) = self.shape(row);
        let c = self.value(col);
        let r = self.value(row);
        let out = Mat::from_shape_fn((n, m), |(i, j)| c[[i, 0]] + r[[0, j]]);
        self.push(out, Op::OuterSum(col, row))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a) * k;
        self.push(out, Op::Scale(a, k))
    }

    pub fn elu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| if x > 0.0 { x } else { x.exp() - 1.0 });
        self.push(out, Op::Elu(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let out = self.value(a).mapv(|x| if x > 0.0 { x } else { slope * x });
        self.push(out, Op::LeakyRelu(a, slope))
    }

    pub fn masked_softmax(&mut self, a: Var, mask: Rc<Array2<bool>>) -> Var {
        let x = self.value(a);
        assert_eq!(x.dim(), mask.dim(), "mask shape");
        let out = masked_softmax_rows(x, &mask);
        self.push(out, Op::MaskedSoftmax(a))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (n, d) = xv.dim();
        let mut xhat = Mat::zeros((n, d));
        let mut inv_std = Vec::with_capacity(n);
        for (i, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for j in 0..d {
                xhat[[i, j]] = (row[j] - mean) * is;
            }
        }
        let out = &xhat * self.value(gamma) + self.value(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        let mut norms = Vec::with_capacity(x.nrows());
        for mut row in out.rows_mut() {
            let n = row.dot(&row).sqrt();
            norms.push(n);
            if n > 0.0 {
                row /= n;
            }
        }
        self.push(out, Op::NormalizeRows(a, norms))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("row counts agree");
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("column counts agree");
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(out, Op::SliceCols(a, start))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice(s![start..start + len, ..]).to_owned();
        self.push(out, Op::SliceRows(a, start))
    }

    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let out = t.select(Axis(0), ids);
        self.push(out, Op::GatherRows(table, ids.to_vec()))
    }

    /// Summed `-log softmax(logits)[target]` over rows with a target.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        let l = self.value(logits);
        assert_eq!(l.nrows(), targets.len(), "one target per row");
        let mask = Array2::from_elem(l.dim(), true);
        let probs = masked_softmax_rows(l, &mask);
        let mut loss = 0.0;
        for (i, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                loss -= log_softmax_at(l.row(i).as_slice().unwrap(), t);
            }
        }
        self.push(
            Mat::from_elem((1, 1), loss),
            Op::CrossEntropy(logits, targets.to_vec(), probs),
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Mat::from_elem((1, 1), self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    /// Reverse sweep seeded with `(var, adjoint)` pairs.
    pub fn backward(&self, seeds: &[(Var, Mat)]) -> Grads {
        let mut g: Vec<Option<Mat>> = vec![None; self.values.len()];
        for (v, adj) in seeds {
            accumulate(&mut g, *v, adj.clone());
        }
        for i in (0..self.ops.len()).rev() {
            let Some(dy) = g[i].take() else { continue };
            match &self.ops[i] {
                Op::Leaf => {
                    g[i] = Some(dy);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let da = dy.dot(&self.value(*b).t());
                    let db = self.value(*a).t().dot(&dy);
                    accumulate(&mut g, *a, da);
                    accumulate(&mut g, *b, db);
                }
                Op::MatMulNt(a, b) => {
                    let da = dy.dot(self.value(*b));
                    let db = dy.t().dot(self.value(*a));
                    accumulate(&mut g, *a, da);
                    accumulate(&mut g, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut g, *a, dy.clone());
                    accumulate(&mut g, *b, dy);
                }
                Op::AddRow(a, row) => {
                    let dr = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut g, *row, dr);
                    accumulate(&mut g, *a, dy);
                }
                Op::OuterSum(col, row) => {
                    let dc = dy.sum_axis(Axis(1)).insert_axis(Axis(1));
                    let dr = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut g, *col, dc);
                    accumulate(&mut g, *row, dr);
                }
                Op::Scale(a, k) => accumulate(&mut g, *a, dy * *k),
                Op::Elu(a) => {
                    let x = self.value(*a);
                    let mut d = dy;
                    d.zip_mut_with(x, |d, &x| {
                        if x <= 0.0 {
                            *d *= x.exp()
                        }
                    });
                    accumulate(&mut g, *a, d);
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let mut d = dy;
                    d.zip_mut_with(x, |d, &x| {
                        if x <= 0.0 {
                            *d = 0.0
                        }
                    });
                    accumulate(&mut g, *a, d);
                }
                Op::LeakyRelu(a, slope) => {
                    let x = self.value(*a);
                    let mut d = dy;
                    d.zip_mut_with(x, |d, &x| {
                        if x <= 0.0 {
                            *d *= slope
                        }
                    });
                    accumulate(&mut g, *a, d);
                }
                Op::MaskedSoftmax(a) => {
                    let y = &self.values[i];
                    let mut dx = Mat::zeros(y.dim());
                    for r in 0..y.nrows() {
                        let yr = y.row(r);
                        let dr = dy.row(r);
                        let inner = yr.dot(&dr);
                        for c in 0..y.ncols() {
                            dx[[r, c]] = yr[c] * (dr[c] - inner);
                        }
                    }
                    accumulate(&mut g, *a, dx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gamma);
                    let dbeta = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dgamma = (&dy * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dxhat = &dy * gv;
                    let d = xhat.ncols() as f64;
                    let mut dx = Mat::zeros(xhat.dim());
                    for r in 0..xhat.nrows() {
                        let dh = dxhat.row(r);
                        let h = xhat.row(r);
                        let mean_dh = dh.sum() / d;
                        let mean_dh_h = dh.dot(&h) / d;
                        for c in 0..xhat.ncols() {
                            dx[[r, c]] = inv_std[r] * (dh[c] - mean_dh - h[c] * mean_dh_h);
                        }
                    }
                    accumulate(&mut g, *x, dx);
                    accumulate(&mut g, *gamma, dgamma);
                    accumulate(&mut g, *beta, dbeta);
                }
                Op::NormalizeRows(a, norms) => {
                    let y = &self.values[i];
                    let mut dx = Mat::zeros(y.dim());
                    for r in 0..y.nrows() {
                        if norms[r] > 0.0 {
                            let yr = y.row(r);
                            let dr = dy.row(r);
                            let inner = yr.dot(&dr);
                            for c in 0..y.ncols() {
                                dx[[r, c]] = (dr[c] - yr[c] * inner) / norms[r];
                            }
                        }
                    }
                    accumulate(&mut g, *a, dx);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        accumulate(&mut g, p, dy.slice(s![.., off..off + w]).to_owned());
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let h = self.value(p).nrows();
                        accumulate(&mut g, p, dy.slice(s![off..off + h, ..]).to_owned());
                        off += h;
                    }
                }
                Op::SliceCols(a, start) => {
                    let mut d = Mat::zeros(self.shape(*a));
                    let w = dy.ncols();
                    d.slice_mut(s![.., *start..*start + w]).assign(&dy);
                    accumulate(&mut g, *a, d);
                }
                Op::SliceRows(a, start) => {
                    let mut d = Mat::zeros(self.shape(*a));
                    let h = dy.nrows();
                    d.slice_mut(s![*start..*start + h, ..]).assign(&dy);
                    accumulate(&mut g, *a, d);
                }
                Op::GatherRows(table, ids) => {
                    let mut d = Mat::zeros(self.shape(*table));
                    for (r, &id) in ids.iter().enumerate() {
                        let mut row = d.row_mut(id);
                        row += &dy.row(r);
                    }
                    accumulate(&mut g, *table, d);
                }
                Op::CrossEntropy(logits, targets, probs) => {
                    let k = dy[[0, 0]];
                    let mut d = Mat::zeros(probs.dim());
                    for (r, t) in targets.iter().enumerate() {
                        if let Some(t) = *t {
                            for c in 0..probs.ncols() {
                                d[[r, c]] = k * probs[[r, c]];
                            }
                            d[[r, t]] -= k;
                        }
                    }
                    accumulate(&mut g, *logits, d);
                }
                Op::Sum(a) => {
                    let k = dy[[0, 0]];
                    let shape = self.shape(*a);
                    accumulate(&mut g, *a, Mat::from_elem(shape, k));
                }
            }
        }
        Grads(g)
    }
}

fn accumulate(g: &mut [Option<Mat>], v: Var, d: Mat) {
    match &mut g[v.0] {
        Some(acc) => *acc += &d,
        slot @ None => *slot = Some(d),
    }
}

pub fn masked_softmax_rows(x: &Mat, mask: &Array2<bool>) -> Mat {
    let mut out = Mat::zeros(x.dim());
    for r in 0..x.nrows() {
        let mut max = f64::NEG_INFINITY;
        for c in 0..x.ncols() {
            if mask[[r, c]] && x[[r, c]] > max {
                max = x[[r, c]];
            }
        }
        if max == f64::NEG_INFINITY {
            continue;
        }
        let mut total = 0.0;
        for c in 0..x.ncols() {
            if mask[[r, c]] {
                let e = (x[[r, c]] - max).exp();
                out[[r, c]] = e;
                total += e;
            }
        }
        for c in 0..x.ncols() {
            out[[r, c]] /= total;
        }
    }
    out
}

pub fn log_softmax_at(logits: &[f64], t: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    logits[t] - lse
}
