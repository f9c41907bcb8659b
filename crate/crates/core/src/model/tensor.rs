//! Reverse-mode automatic differentiation over 2-D tensors.
//!
//! A flat tape of nodes; every tensor is an `Array2` (vectors are 1 x n,
//! scalars 1 x 1). Backward walks node ids in reverse, so gradient
//! accumulation order is fixed and results are bit-reproducible.

use ndarray::{concatenate, s, Array2, Axis};

/// Element type the tape runs on: f32 in fast mode, f64 in check mode.
pub trait Scalar:
    ndarray::LinalgScalar
    + PartialOrd
    + std::ops::Neg<Output = Self>
    + std::ops::SubAssign
    + std::ops::AddAssign
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn is_finite_val(self) -> bool;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn ln(self) -> Self {
        f32::ln(self)
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn tanh(self) -> Self {
        f32::tanh(self)
    }
    fn is_finite_val(self) -> bool {
        self.is_finite()
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn is_finite_val(self) -> bool {
        self.is_finite()
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

enum Op<T: Scalar> {
    Leaf,
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    Add { a: usize, b: usize },
    AddRow { a: usize, bias: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: T },
    AddConst { a: usize },
    Gelu { a: usize },
    SoftmaxRows { a: usize },
    LayerNormRows { a: usize, gamma: usize, beta: usize },
    GatherRows { table: usize, ids: Vec<usize> },
    CrossEntropyRows { logits: usize, targets: Vec<usize> },
    PickPerRow { a: usize, cols: Vec<usize> },
    SliceCols { a: usize, start: usize },
    SliceRows { a: usize, start: usize },
    ConcatCols { parts: Vec<usize> },
    SumAll { a: usize },
    WeightedSumAll { a: usize, weights: Array2<T> },
}

struct Node<T: Scalar> {
    value: Array2<T>,
    op: Op<T>,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: usize) -> &Array2<T> {
        &self.nodes[id].value
    }

    /// Scalar value of a 1 x 1 node.
    pub fn scalar(&self, id: usize) -> T {
        let v = &self.nodes[id].value;
        assert_eq!(v.dim(), (1, 1), "scalar() on non 1x1 node");
        v[(0, 0)]
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>) -> usize {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, value: Array2<T>) -> usize {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: usize, b: usize) -> usize {
        self.matmul_tt(a, false, b, false)
    }

    pub fn matmul_tt(&mut self, a: usize, ta: bool, b: usize, tb: bool) -> usize {
        let av = &self.nodes[a].value;
        let bv = &self.nodes[b].value;
        let value = match (ta, tb) {
            (false, false) => av.dot(bv),
            (true, false) => av.t().dot(bv),
            (false, true) => av.dot(&bv.t()),
            (true, true) => av.t().dot(&bv.t()),
        };
        self.push(value, Op::MatMul { a, b, ta, tb })
    }

    pub fn add(&mut self, a: usize, b: usize) -> usize {
        let value = &self.nodes[a].value + &self.nodes[b].value;
        self.push(value, Op::Add { a, b })
    }

    /// Adds a 1 x n bias to every row of `a`.
    pub fn add_row(&mut self, a: usize, bias: usize) -> usize {
        let av = &self.nodes[a].value;
        let bv = &self.nodes[bias].value;
        assert_eq!(bv.nrows(), 1);
        assert_eq!(av.ncols(), bv.ncols());
        let value = av + &bv.row(0);
        self.push(value, Op::AddRow { a, bias })
    }

    pub fn mul(&mut self, a: usize, b: usize) -> usize {
        let value = &self.nodes[a].value * &self.nodes[b].value;
        self.push(value, Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: usize, c: f64) -> usize {
        let c = T::from_f64(c);
        let value = self.nodes[a].value.mapv(|x| x * c);
        self.push(value, Op::Scale { a, c })
    }

    /// Adds a constant tensor (no gradient flows to the constant).
    pub fn add_const(&mut self, a: usize, k: &Array2<T>) -> usize {
        let value = &self.nodes[a].value + k;
        self.push(value, Op::AddConst { a })
    }

    pub fn gelu(&mut self, a: usize) -> usize {
        let c = T::from_f64(GELU_C);
        let aa = T::from_f64(GELU_A);
        let half = T::from_f64(0.5);
        let one = T::from_f64(1.0);
        let value = self.nodes[a].value.mapv(|x| {
            let u = c * (x + aa * x * x * x);
            half * x * (one + u.tanh())
        });
        self.push(value, Op::Gelu { a })
    }

    /// Numerically stable row softmax.
    pub fn softmax_rows(&mut self, a: usize) -> usize {
        let value = softmax(&self.nodes[a].value);
        self.push(value, Op::SoftmaxRows { a })
    }

    /// Row-wise layer normalization with learned 1 x d gain and shift.
    pub fn layer_norm_rows(&mut self, a: usize, gamma: usize, beta: usize) -> usize {
        let av = &self.nodes[a].value;
        let g = &self.nodes[gamma].value;
        let b = &self.nodes[beta].value;
        assert_eq!(g.nrows(), 1);
        assert_eq!(b.nrows(), 1);
        let (n, d) = av.dim();
        let mut value = Array2::zeros((n, d));
        for i in 0..n {
            let row = av.row(i);
            let (mean, inv_std) = row_moments(&row);
            for j in 0..d {
                let xhat = (row[j] - mean) * inv_std;
                value[(i, j)] = g[(0, j)] * xhat + b[(0, j)];
            }
        }
        self.push(value, Op::LayerNormRows { a, gamma, beta })
    }

    /// out[i, :] = table[ids[i], :]
    pub fn gather_rows(&mut self, table: usize, ids: &[usize]) -> usize {
        let tv = &self.nodes[table].value;
        let d = tv.ncols();
        let mut value = Array2::zeros((ids.len(), d));
        for (i, &id) in ids.iter().enumerate() {
            value.row_mut(i).assign(&tv.row(id));
        }
        self.push(value, Op::GatherRows { table, ids: ids.to_vec() })
    }

    /// Per-row cross entropy against integer targets; output m x 1.
    pub fn cross_entropy_rows(&mut self, logits: usize, targets: &[usize]) -> usize {
        let lv = &self.nodes[logits].value;
        assert_eq!(lv.nrows(), targets.len());
        let mut value = Array2::zeros((targets.len(), 1));
        for (i, &t) in targets.iter().enumerate() {
            let row = lv.row(i);
            let lse = log_sum_exp(&row);
            value[(i, 0)] = lse - row[t];
        }
        self.push(value, Op::CrossEntropyRows { logits, targets: targets.to_vec() })
    }

    /// out[i, 0] = a[i, cols[i]]
    pub fn pick_per_row(&mut self, a: usize, cols: &[usize]) -> usize {
        let av = &self.nodes[a].value;
        assert_eq!(av.nrows(), cols.len());
        let mut value = Array2::zeros((cols.len(), 1));
        for (i, &c) in cols.iter().enumerate() {
            value[(i, 0)] = av[(i, c)];
        }
        self.push(value, Op::PickPerRow { a, cols: cols.to_vec() })
    }

    pub fn slice_cols(&mut self, a: usize, range: std::ops::Range<usize>) -> usize {
        let value = self.nodes[a].value.slice(s![.., range.clone()]).to_owned();
        self.push(value, Op::SliceCols { a, start: range.start })
    }

    pub fn slice_rows(&mut self, a: usize, range: std::ops::Range<usize>) -> usize {
        let value = self.nodes[a].value.slice(s![range.clone(), ..]).to_owned();
        self.push(value, Op::SliceRows { a, start: range.start })
    }

    pub fn concat_cols(&mut self, parts: &[usize]) -> usize {
        let views: Vec<_> = parts.iter().map(|&p| self.nodes[p].value.view()).collect();
        let value = concatenate(Axis(1), &views).expect("concat_cols shape mismatch");
        self.push(value, Op::ConcatCols { parts: parts.to_vec() })
    }

    pub fn sum_all(&mut self, a: usize) -> usize {
        let mut total = T::zero();
        for &x in self.nodes[a].value.iter() {
            total += x;
        }
        let value = Array2::from_elem((1, 1), total);
        self.push(value, Op::SumAll { a })
    }

    /// sum(weights * a) with constant weights; output 1 x 1.
    pub fn weighted_sum_all(&mut self, a: usize, weights: Array2<T>) -> usize {
        let av = &self.nodes[a].value;
        assert_eq!(av.dim(), weights.dim());
        let mut total = T::zero();
        for (&x, &w) in av.iter().zip(weights.iter()) {
            total += x * w;
        }
        let value = Array2::from_elem((1, 1), total);
        self.push(value, Op::WeightedSumAll { a, weights })
    }

    /// Mean over all elements; output 1 x 1.
    pub fn mean_all(&mut self, a: usize) -> usize {
        let n = self.nodes[a].value.len();
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Gradients of the scalar node with respect to every node on the tape.
    /// Entries are `None` for nodes the loss does not depend on.
    pub fn backward(&self, loss: usize) -> Vec<Option<Array2<T>>> {
        assert_eq!(self.nodes[loss].value.dim(), (1, 1), "backward from non-scalar");
        let mut grads: Vec<Option<Array2<T>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(Array2::from_elem((1, 1), T::one()));

        for id in (0..=loss).rev() {
            let Some(grad) = grads[id].take() else { continue };
            match &self.nodes[id].op {
                Op::Leaf => {
                    grads[id] = Some(grad);
                    continue;
                }
                Op::MatMul { a, b, ta, tb } => {
                    let av = &self.nodes[*a].value;
                    let bv = &self.nodes[*b].value;
                    // d(A_eff @ B_eff): dA_eff = G B_eff^T, dB_eff = A_eff^T G
                    let (da, db) = match (ta, tb) {
                        (false, false) => (grad.dot(&bv.t()), av.t().dot(&grad)),
                        (false, true) => (grad.dot(bv), grad.t().dot(av)),
                        (true, false) => (bv.dot(&grad.t()), av.dot(&grad)),
                        (true, true) => (bv.t().dot(&grad.t()), grad.t().dot(&av.t())),
                    };
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, grad.clone());
                    accumulate(&mut grads, *b, grad);
                }
                Op::AddRow { a, bias } => {
                    let db = grad.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *a, grad);
                    accumulate(&mut grads, *bias, db);
                }
                Op::Mul { a, b } => {
                    let da = &grad * &self.nodes[*b].value;
                    let db = &grad * &self.nodes[*a].value;
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Scale { a, c } => {
                    accumulate(&mut grads, *a, grad.mapv(|g| g * *c));
                }
                Op::AddConst { a } => {
                    accumulate(&mut grads, *a, grad);
                }
                Op::Gelu { a } => {
                    let c = T::from_f64(GELU_C);
                    let aa = T::from_f64(GELU_A);
                    let half = T::from_f64(0.5);
                    let one = T::from_f64(1.0);
                    let three = T::from_f64(3.0);
                    let av = &self.nodes[*a].value;
                    let mut da = av.clone();
                    da.zip_mut_with(&grad, |x, &g| {
                        let u = c * (*x + aa * *x * *x * *x);
                        let th = u.tanh();
                        let du = c * (one + three * aa * *x * *x);
                        let d = half * (one + th) + half * *x * (one - th * th) * du;
                        *x = g * d;
                    });
                    accumulate(&mut grads, *a, da);
                }
                Op::SoftmaxRows { a } => {
                    let y = &self.nodes[id].value;
                    let (n, d) = y.dim();
                    let mut da = Array2::zeros((n, d));
                    for i in 0..n {
                        let mut dot = T::zero();
                        for j in 0..d {
                            dot += grad[(i, j)] * y[(i, j)];
                        }
                        for j in 0..d {
                            da[(i, j)] = y[(i, j)] * (grad[(i, j)] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::LayerNormRows { a, gamma, beta } => {
                    let av = &self.nodes[*a].value;
                    let g = &self.nodes[*gamma].value;
                    let (n, d) = av.dim();
                    let dn = T::from_f64(d as f64);
                    let mut da = Array2::zeros((n, d));
                    let mut dg = Array2::zeros((1, d));
                    let mut db = Array2::zeros((1, d));
                    for i in 0..n {
                        let row = av.row(i);
                        let (mean, inv_std) = row_moments(&row);
                        // dxhat = dy * gamma; dx via the standard two-mean form.
                        let mut sum_dxhat = T::zero();
                        let mut sum_dxhat_xhat = T::zero();
                        for j in 0..d {
                            let xhat = (row[j] - mean) * inv_std;
                            let dy = grad[(i, j)];
                            let dxhat = dy * g[(0, j)];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                            dg[(0, j)] += dy * xhat;
                            db[(0, j)] += dy;
                        }
                        for j in 0..d {
                            let xhat = (row[j] - mean) * inv_std;
                            let dxhat = grad[(i, j)] * g[(0, j)];
                            da[(i, j)] = inv_std
                                * (dxhat - sum_dxhat / dn - xhat * sum_dxhat_xhat / dn);
                        }
                    }
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *gamma, dg);
                    accumulate(&mut grads, *beta, db);
                }
                Op::GatherRows { table, ids } => {
                    let tv = &self.nodes[*table].value;
                    let mut dt = Array2::zeros(tv.dim());
                    for (i, &row_id) in ids.iter().enumerate() {
                        let mut target = dt.row_mut(row_id);
                        target += &grad.row(i);
                    }
                    accumulate(&mut grads, *table, dt);
                }
                Op::CrossEntropyRows { logits, targets } => {
                    let lv = &self.nodes[*logits].value;
                    let probs = softmax(lv);
                    let (n, d) = lv.dim();
                    let mut dl = Array2::zeros((n, d));
                    for i in 0..n {
                        let gi = grad[(i, 0)];
                        for j in 0..d {
                            let indicator = if j == targets[i] { T::one() } else { T::zero() };
                            dl[(i, j)] = gi * (probs[(i, j)] - indicator);
                        }
                    }
                    accumulate(&mut grads, *logits, dl);
                }
                Op::PickPerRow { a, cols } => {
                    let av = &self.nodes[*a].value;
                    let mut da = Array2::zeros(av.dim());
                    for (i, &c) in cols.iter().enumerate() {
                        da[(i, c)] = grad[(i, 0)];
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::SliceCols { a, start } => {
                    let av = &self.nodes[*a].value;
                    let mut da = Array2::zeros(av.dim());
                    let w = grad.ncols();
                    da.slice_mut(s![.., *start..*start + w]).assign(&grad);
                    accumulate(&mut grads, *a, da);
                }
                Op::SliceRows { a, start } => {
                    let av = &self.nodes[*a].value;
                    let mut da = Array2::zeros(av.dim());
                    let h = grad.nrows();
                    da.slice_mut(s![*start..*start + h, ..]).assign(&grad);
                    accumulate(&mut grads, *a, da);
                }
                Op::ConcatCols { parts } => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.nodes[p].value.ncols();
                        let dp = grad.slice(s![.., offset..offset + w]).to_owned();
                        accumulate(&mut grads, p, dp);
                        offset += w;
                    }
                }
                Op::SumAll { a } => {
                    let g = grad[(0, 0)];
                    let da = Array2::from_elem(self.nodes[*a].value.dim(), g);
                    accumulate(&mut grads, *a, da);
                }
                Op::WeightedSumAll { a, weights } => {
                    let g = grad[(0, 0)];
                    let da = weights.mapv(|w| w * g);
                    accumulate(&mut grads, *a, da);
                }
            }
        }
        grads
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Array2<T>>], id: usize, delta: Array2<T>) {
    match &mut grads[id] {
        Some(g) => *g += &delta,
        slot @ None => *slot = Some(delta),
    }
}

fn row_moments<T: Scalar>(row: &ndarray::ArrayView1<'_, T>) -> (T, T) {
    let d = T::from_f64(row.len() as f64);
    let mut mean = T::zero();
    for &x in row {
        mean += x;
    }
    mean = mean / d;
    let mut var = T::zero();
    for &x in row {
        var += (x - mean) * (x - mean);
    }
    var = var / d;
    let inv_std = T::one() / (var + T::from_f64(LN_EPS)).sqrt();
    (mean, inv_std)
}

fn log_sum_exp<T: Scalar>(row: &ndarray::ArrayView1<'_, T>) -> T {
    let mut max = row[0];
    for &x in row.iter() {
        if x > max {
            max = x;
        }
    }
    let mut sum = T::zero();
    for &x in row.iter() {
        sum += (x - max).exp();
    }
    max + sum.ln()
}

fn softmax<T: Scalar>(x: &Array2<T>) -> Array2<T> {
    let (n, d) = x.dim();
    let mut out = Array2::zeros((n, d));
    for i in 0..n {
        let row = x.row(i);
        let mut max = row[0];
        for &v in row.iter() {
            if v > max {
                max = v;
            }
        }
        let mut sum = T::zero();
        for j in 0..d {
            let e = (row[j] - max).exp();
            out[(i, j)] = e;
            sum += e;
        }
        for j in 0..d {
            out[(i, j)] = out[(i, j)] / sum;
        }
    }
    out
}

/// Log-softmax of one row gathered at a target column, without a tape.
pub fn row_log_softmax_at<T: Scalar>(row: &ndarray::ArrayView1<'_, T>, target: usize) -> T {
    row[target] - log_sum_exp(row)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central finite differences on an arbitrary tape program.
    fn finite_diff<F>(build: F, input: &Array2<f64>, coord: (usize, usize)) -> f64
    where
        F: Fn(&mut Tape<f64>, usize) -> usize,
    {
        let h = 1e-6;
        let mut plus = input.clone();
        plus[coord] += h;
        let mut minus = input.clone();
        minus[coord] -= h;
        let eval = |arr: Array2<f64>| {
            let mut tape = Tape::new();
            let x = tape.leaf(arr);
            let loss = build(&mut tape, x);
            tape.scalar(loss)
        };
        (eval(plus) - eval(minus)) / (2.0 * h)
    }

    fn check_grad<F>(build: F, input: Array2<f64>)
    where
        F: Fn(&mut Tape<f64>, usize) -> usize,
    {
        let mut tape = Tape::new();
        let x = tape.leaf(input.clone());
        let loss = build(&mut tape, x);
        let grads = tape.backward(loss);
        let gx = grads[x].as_ref().expect("input grad");
        for i in 0..input.nrows() {
            for j in 0..input.ncols() {
                let fd = finite_diff(&build, &input, (i, j));
                let an = gx[(i, j)];
                let denom = an.abs().max(fd.abs()).max(1e-4);
                assert!(
                    (an - fd).abs() / denom < 1e-5,
                    "coord ({i},{j}): analytic {an} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn matmul_grads() {
        let b_val = array![[0.3, -0.7, 0.2], [1.1, 0.4, -0.5]];
        check_grad(
            |tape, x| {
                let b = tape.leaf(b_val.clone());
                let y = tape.matmul(x, b);
                tape.sum_all(y)
            },
            array![[0.5, -1.0], [2.0, 0.1], [0.7, 0.9]],
        );
        // Transposed variants.
        check_grad(
            |tape, x| {
                let b = tape.leaf(b_val.clone());
                let y = tape.matmul_tt(x, true, b, false);
                tape.sum_all(y)
            },
            array![[0.5, -1.0, 0.3], [2.0, 0.1, 0.8]],
        );
        check_grad(
            |tape, x| {
                let b = tape.leaf(b_val.clone());
                let y = tape.matmul_tt(x, false, b, true);
                tape.sum_all(y)
            },
            array![[0.5, -1.0, 0.25], [2.0, 0.1, -0.4]],
        );
    }

    #[test]
    fn softmax_rows_sum_to_one_and_grads() {
        let x = array![[0.1, -0.4, 2.0], [5.0, 5.0, 5.0]];
        let mut tape = Tape::new();
        let id = tape.leaf(x.clone());
        let s = tape.softmax_rows(id);
        for i in 0..2 {
            let total: f64 = tape.value(s).row(i).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
        check_grad(
            |tape, x| {
                let s = tape.softmax_rows(x);
                let w = array![[0.2, -1.0, 0.5], [1.5, 0.3, -0.2]];
                tape.weighted_sum_all(s, w)
            },
            x,
        );
    }

    #[test]
    fn layer_norm_grads() {
        let g = array![[1.2, 0.8, -0.5, 1.0]];
        let b = array![[0.1, -0.2, 0.0, 0.4]];
        check_grad(
            |tape, x| {
                let gamma = tape.leaf(g.clone());
                let beta = tape.leaf(b.clone());
                let y = tape.layer_norm_rows(x, gamma, beta);
                let w = array![[0.3, -0.7, 0.2, 1.0], [0.5, 0.1, -0.3, 0.9]];
                tape.weighted_sum_all(y, w)
            },
            array![[0.5, -1.0, 2.0, 0.3], [1.0, 1.1, 0.9, 1.05]],
        );
        // Gamma/beta grads.
        let x = array![[0.5, -1.0, 2.0, 0.3], [1.0, 1.1, 0.9, 1.05]];
        let mut tape = Tape::new();
        let xid = tape.leaf(x);
        let gid = tape.leaf(g.clone());
        let bid = tape.leaf(b.clone());
        let y = tape.layer_norm_rows(xid, gid, bid);
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss);
        // d/dbeta of sum = row count.
        let db = grads[bid].as_ref().unwrap();
        for j in 0..4 {
            assert!((db[(0, j)] - 2.0).abs() < 1e-12);
        }
        assert!(grads[gid].is_some());
    }

    #[test]
    fn gelu_grads() {
        check_grad(
            |tape, x| {
                let y = tape.gelu(x);
                tape.sum_all(y)
            },
            array![[0.5, -1.0, 2.0, -0.01], [3.0, 0.0, -2.5, 0.7]],
        );
    }

    #[test]
    fn cross_entropy_matches_log_softmax() {
        let x = array![[0.2, -1.0, 0.5], [2.0, 0.0, -0.3]];
        let mut tape = Tape::new();
        let id = tape.leaf(x.clone());
        let ce = tape.cross_entropy_rows(id, &[2, 0]);
        for (i, &t) in [2usize, 0].iter().enumerate() {
            let expected: f64 = -row_log_softmax_at(&x.row(i), t);
            assert!((tape.value(ce)[(i, 0)] - expected).abs() < 1e-12);
        }
        check_grad(
            |tape, x| {
                let ce = tape.cross_entropy_rows(x, &[2, 0]);
                tape.sum_all(ce)
            },
            x,
        );
    }

    #[test]
    fn gather_scatter_grads() {
        let mut tape = Tape::new();
        let table = tape.leaf(array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]);
        let g = tape.gather_rows(table, &[2, 0, 2]);
        let loss = tape.sum_all(g);
        let grads = tape.backward(loss);
        let dt = grads[table].as_ref().unwrap();
        // Row 2 gathered twice, row 0 once, row 1 never.
        assert_eq!(dt[(2, 0)], 2.0);
        assert_eq!(dt[(0, 0)], 1.0);
        assert_eq!(dt[(1, 0)], 0.0);
    }

    #[test]
    fn slices_and_concat_roundtrip_grads() {
        check_grad(
            |tape, x| {
                let left = tape.slice_cols(x, 0..2);
                let right = tape.slice_cols(x, 2..4);
                let swapped = tape.concat_cols(&[right, left]);
                let rows = tape.slice_rows(swapped, 1..2);
                let w = array![[0.5, -1.5, 2.0, 0.1]];
                tape.weighted_sum_all(rows, w)
            },
            array![[0.5, -1.0, 2.0, 0.3], [1.0, 1.1, 0.9, 1.05]],
        );
    }

    #[test]
    fn pick_per_row_grads() {
        let mut tape = Tape::new();
        let x = tape.leaf(array![[0.1, 0.9], [0.7, 0.3]]);
        let picked = tape.pick_per_row(x, &[1, 0]);
        assert_eq!(tape.value(picked)[(0, 0)], 0.9);
        assert_eq!(tape.value(picked)[(1, 0)], 0.7);
        let loss = tape.sum_all(picked);
        let grads = tape.backward(loss);
        let dx = grads[x].as_ref().unwrap();
        assert_eq!(dx, &array![[0.0, 1.0], [1.0, 0.0]]);
    }

    #[test]
    fn unused_leaf_has_no_grad() {
        let mut tape = Tape::<f64>::new();
        let used = tape.leaf(array![[1.0]]);
        let unused = tape.leaf(array![[5.0]]);
        let loss = tape.sum_all(used);
        let grads = tape.backward(loss);
        assert!(grads[unused].is_none());
        assert!(grads[used].is_some());
    }

    #[test]
    fn masked_softmax_zeroes_attention_exactly() {
        let mut tape = Tape::new();
        let scores = tape.leaf(array![[0.5, 0.7, 0.2], [0.1, 0.3, 0.4]]);
        let mask = array![[0.0, -1e9, -1e9], [0.0, 0.0, -1e9]];
        let masked = tape.add_const(scores, &mask);
        let attn = tape.softmax_rows(masked);
        let v = tape.value(attn);
        assert_eq!(v[(0, 1)], 0.0);
        assert_eq!(v[(0, 2)], 0.0);
        assert_eq!(v[(0, 0)], 1.0);
        assert_eq!(v[(1, 2)], 0.0);
    }

    #[test]
    fn f32_tape_runs() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(array![[1.0f32, 2.0], [3.0, 4.0]]);
        let s = tape.softmax_rows(x);
        let loss = tape.mean_all(s);
        let grads = tape.backward(loss);
        assert!(grads[x].is_some());
    }
}
