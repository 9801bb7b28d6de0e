//! Matrix-valued reverse-mode automatic differentiation.
//!
//! Every node on the [`Tape`] holds a dense `f64` matrix and the operation
//! that produced it. [`Tape::backward`] walks the nodes in reverse creation
//! order and accumulates vector-Jacobian products, so gradients are available
//! for every node (leaves and intermediates alike).
//!
//! Only the handful of operations the relational model needs are provided;
//! shapes are checked eagerly and mismatches panic, as they are programming
//! errors rather than data errors.

use std::sync::Arc;

use ndarray::{s, Array2, Axis, Zip};

pub type Mat = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a[r×c] + b[1×c]`
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `a[r×c] ⊙ b[1×c]`
    MulRow(Var, Var),
    /// `a[r×c] ⊙ b[r×1]`
    MulCol(Var, Var),
    Scale(Var, f64),
    /// `a + constant`; the constant carries no gradient.
    Shift(Var),
    Elu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Square(Var),
    Concat(Vec<Var>),
    Cols(Var, usize),
    Rows(Var, usize),
    Gather(Var, Arc<[usize]>),
    ScatterAdd(Var, Arc<[usize]>),
    /// Forward: row-wise one-hot of the argmax. Backward: identity.
    StraightThrough(Var),
    /// `Σ a ⊙ w` as a 1×1 matrix.
    WeightedSum(Var, Mat),
    /// `Σ w ⊙ (softplus(z) − y z)` as a 1×1 matrix.
    BceLogits(Var, Mat, Mat),
    /// `Σ_k c_k a_k` over same-shaped inputs.
    Combine(Vec<(Var, f64)>),
}

#[derive(Default)]
pub struct Tape {
    values: Vec<Mat>,
    ops: Vec<Op>,
}

pub struct Grads {
    grads: Vec<Option<Mat>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros shaped like it if nothing flowed there.
    pub fn get_or_zeros(&self, tape: &Tape, v: Var) -> Mat {
        self.get(v).cloned().unwrap_or_else(|| Mat::zeros(tape.value(v).raw_dim()))
    }
}

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn softmax_rows(a: &Mat) -> Mat {
    let mut out = a.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        row.mapv_inplace(|x| (x - m).exp());
        let z = row.sum();
        row.mapv_inplace(|x| x / z);
    }
    out
}

fn log_softmax_rows(a: &Mat) -> Mat {
    let mut out = a.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let lse = m + row.fold(0.0, |acc, &x| acc + (x - m).exp()).ln();
        row.mapv_inplace(|x| x - lse);
    }
    out
}

fn accumulate(slot: &mut Option<Mat>, g: Mat) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
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

    pub fn value(&self, v: Var) -> &Mat {
        &self.values[v.0]
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.values.push(value);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.nrows(), 1, "add_row expects a 1×c row");
        let v = self.value(a) + r;
        self.push(v, Op::AddRow(a, row))
    }

    /// `x W + b`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let h = self.matmul(x, w);
        self.add_row(h, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "add shape mismatch");
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "sub shape mismatch");
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "mul shape mismatch");
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.nrows(), 1, "mul_row expects a 1×c row");
        let v = self.value(a) * r;
        self.push(v, Op::MulRow(a, row))
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let c = self.value(col);
        assert_eq!(c.ncols(), 1, "mul_col expects an r×1 column");
        let v = self.value(a) * c;
        self.push(v, Op::MulCol(a, col))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn shift(&mut self, a: Var, constant: &Mat) -> Var {
        let v = self.value(a) + constant;
        self.push(v, Op::Shift(a))
    }

    pub fn elu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(elu);
        self.push(v, Op::Elu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        self.push(v, Op::Softmax(a))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let v = log_softmax_rows(self.value(a));
        self.push(v, Op::LogSoftmax(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat row mismatch");
        self.push(v, Op::Concat(parts.to_vec()))
    }

    /// Columns `start..end`.
    pub fn cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(v, Op::Cols(a, start))
    }

    /// Rows `start..end`.
    pub fn rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![start..end, ..]).to_owned();
        self.push(v, Op::Rows(a, start))
    }

    pub fn gather(&mut self, a: Var, idx: &Arc<[usize]>) -> Var {
        let v = self.value(a).select(Axis(0), idx);
        self.push(v, Op::Gather(a, Arc::clone(idx)))
    }

    /// Sums row `k` of `a` into output row `idx[k]`; output has `n` rows.
    pub fn scatter_add(&mut self, a: Var, idx: &Arc<[usize]>, n: usize) -> Var {
        let src = self.value(a);
        assert_eq!(src.nrows(), idx.len(), "scatter index length mismatch");
        let mut v = Mat::zeros((n, src.ncols()));
        for (k, &i) in idx.iter().enumerate() {
            let mut dst = v.row_mut(i);
            dst += &src.row(k);
        }
        self.push(v, Op::ScatterAdd(a, Arc::clone(idx)))
    }

    pub fn straight_through(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let mut v = Mat::zeros(src.raw_dim());
        for (r, row) in src.rows().into_iter().enumerate() {
            let mut best = 0;
            for (c, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = c;
                }
            }
            if row.len() > 0 {
                v[[r, best]] = 1.0;
            }
        }
        self.push(v, Op::StraightThrough(a))
    }

    pub fn weighted_sum(&mut self, a: Var, weights: Mat) -> Var {
        assert_eq!(self.value(a).dim(), weights.dim(), "weighted_sum shape mismatch");
        let s = Zip::from(self.value(a)).and(&weights).fold(0.0, |acc, &x, &w| acc + x * w);
        self.push(Mat::from_elem((1, 1), s), Op::WeightedSum(a, weights))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let w = Mat::ones(self.value(a).raw_dim());
        self.weighted_sum(a, w)
    }

    pub fn bce_logits(&mut self, logits: Var, targets: Mat, weights: Mat) -> Var {
        let z = self.value(logits);
        assert_eq!(z.dim(), targets.dim());
        assert_eq!(z.dim(), weights.dim());
        let s = Zip::from(z)
            .and(&targets)
            .and(&weights)
            .fold(0.0, |acc, &z, &y, &w| acc + w * (softplus(z) - y * z));
        self.push(Mat::from_elem((1, 1), s), Op::BceLogits(logits, targets, weights))
    }

    pub fn combine(&mut self, terms: &[(Var, f64)]) -> Var {
        let dim = self.value(terms[0].0).raw_dim();
        let mut v = Mat::zeros(dim);
        for &(t, c) in terms {
            v.scaled_add(c, self.value(t));
        }
        self.push(v, Op::Combine(terms.to_vec()))
    }

    /// Gradients of the 1×1 node `root` with respect to every node.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(self.value(root).dim(), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Mat>> = (0..self.values.len()).map(|_| None).collect();
        grads[root.0] = Some(Mat::ones((1, 1)));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let out = &self.values[idx];
            match &self.ops[idx] {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.values[b.0].t());
                    let gb = self.values[a.0].t().dot(&g);
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::AddRow(a, r) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads[r.0], gr);
                    accumulate(&mut grads[a.0], g.clone());
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[b.0], g.clone());
                    accumulate(&mut grads[a.0], g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads[b.0], -&g);
                    accumulate(&mut grads[a.0], g.clone());
                }
                Op::Mul(a, b) => {
                    let ga = &g * &self.values[b.0];
                    let gb = &g * &self.values[a.0];
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::MulRow(a, r) => {
                    let ga = &g * &self.values[r.0];
                    let gr = (&g * &self.values[a.0]).sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[r.0], gr);
                }
                Op::MulCol(a, c) => {
                    let ga = &g * &self.values[c.0];
                    let gc = (&g * &self.values[a.0]).sum_axis(Axis(1)).insert_axis(Axis(1));
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[c.0], gc);
                }
                Op::Scale(a, c) => accumulate(&mut grads[a.0], &g * *c),
                Op::Shift(a) => accumulate(&mut grads[a.0], g.clone()),
                Op::Elu(a) => {
                    let mut ga = g.clone();
                    Zip::from(&mut ga).and(out).for_each(|d, &y| {
                        if y <= 0.0 {
                            *d *= y + 1.0;
                        }
                    });
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Sigmoid(a) => {
                    let mut ga = g.clone();
                    Zip::from(&mut ga).and(out).for_each(|d, &y| *d *= y * (1.0 - y));
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Softmax(a) => {
                    let mut ga = &g * out;
                    for (mut row, y) in ga.rows_mut().into_iter().zip(out.rows()) {
                        let dot = row.sum();
                        Zip::from(&mut row).and(&y).for_each(|d, &y| *d -= y * dot);
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::LogSoftmax(a) => {
                    let mut ga = g.clone();
                    for (mut row, y) in ga.rows_mut().into_iter().zip(out.rows()) {
                        let total = row.sum();
                        Zip::from(&mut row).and(&y).for_each(|d, &ly| *d -= ly.exp() * total);
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Square(a) => {
                    let ga = &g * &self.values[a.0] * 2.0;
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Concat(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = self.values[p.0].ncols();
                        accumulate(&mut grads[p.0], g.slice(s![.., start..start + w]).to_owned());
                        start += w;
                    }
                }
                Op::Cols(a, start) => {
                    let mut ga = Mat::zeros(self.values[a.0].raw_dim());
                    ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Rows(a, start) => {
                    let mut ga = Mat::zeros(self.values[a.0].raw_dim());
                    ga.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Gather(a, idx) => {
                    let mut ga = Mat::zeros(self.values[a.0].raw_dim());
                    for (k, &i) in idx.iter().enumerate() {
                        let mut dst = ga.row_mut(i);
                        dst += &g.row(k);
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::ScatterAdd(a, idx) => {
                    accumulate(&mut grads[a.0], g.select(Axis(0), idx));
                }
                Op::StraightThrough(a) => accumulate(&mut grads[a.0], g.clone()),
                Op::WeightedSum(a, w) => {
                    accumulate(&mut grads[a.0], w * g[[0, 0]]);
                }
                Op::BceLogits(a, y, w) => {
                    let scale = g[[0, 0]];
                    let mut ga = self.values[a.0].mapv(sigmoid);
                    Zip::from(&mut ga).and(y).and(w).for_each(|d, &y, &w| *d = scale * w * (*d - y));
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Combine(terms) => {
                    for &(t, c) in terms {
                        accumulate(&mut grads[t.0], &g * c);
                    }
                }
            }
            grads[idx] = Some(g);
        }
        Grads { grads }
    }
}
