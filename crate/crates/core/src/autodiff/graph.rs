use ndarray::{s, Array1, Array2, ArrayView2, Axis, CowArray, Ix2, Zip};

use super::conv::{col2im, im2col, ConvGeom};
use crate::scalar::Scalar;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Offset(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Abs(Var),
    Square(Var),
    Clamp(Var, T, T),
    RowSum(Var),
    Sum(Var),
    Mean(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Concat(Vec<Var>),
    Slice(Var, usize, usize),
    BatchNorm {
        x: Var,
        scale: T,
        inv_std: Array1<T>,
        xhat: Array2<T>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    BceWithLogits(Var, Var),
}

struct Node<'a, T: Scalar> {
    value: CowArray<'a, T, Ix2>,
    op: Op<T>,
    requires_grad: bool,
}

/// Reverse-mode tape over 2-D arrays (rows are batch instances).
///
/// Nodes are appended in evaluation order, so a single reverse sweep in
/// [`Graph::backward`] visits every consumer before its inputs. Leaves may
/// borrow their values (parameters) or own them (batches, noise).
pub struct Graph<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
}

/// Gradients of one scalar output with respect to every node that requires
/// them.
pub struct Gradients<T> {
    grads: Vec<Option<Array2<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Array2<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<T>> {
        self.grads[v.0].take()
    }
}

impl<'a, T: Scalar> Default for Graph<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> ArrayView2<'_, T> {
        self.nodes[v.0].value.view()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Single element of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> T {
        let value = &self.nodes[v.0].value;
        debug_assert_eq!(value.dim(), (1, 1));
        value[[0, 0]]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: CowArray::from(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: CowArray<'a, T, Ix2>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf borrowing its value.
    pub fn param(&mut self, value: ArrayView2<'a, T>) -> Var {
        self.leaf(CowArray::from(value), true)
    }

    /// Constant leaf borrowing its value.
    pub fn constant_view(&mut self, value: ArrayView2<'a, T>) -> Var {
        self.leaf(CowArray::from(value), false)
    }

    pub fn constant(&mut self, value: Array2<T>) -> Var {
        self.leaf(CowArray::from(value), false)
    }

    /// Owned leaf that collects a gradient (used by gradient checks on inputs).
    pub fn variable(&mut self, value: Array2<T>) -> Var {
        self.leaf(CowArray::from(value), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b));
        self.push(value, Op::MatMul(a, b), &[a, b])
    }

    /// `x + row`, broadcasting a `1 × n` row over every instance.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let value = &self.value(x) + &self.value(row);
        self.push(value, Op::AddRow(x, row), &[x, row])
    }

    /// `x ⊙ row`, broadcasting a `1 × n` row over every instance.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Var {
        let value = &self.value(x) * &self.value(row);
        self.push(value, Op::MulRow(x, row), &[x, row])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = &self.value(a) + &self.value(b);
        self.push(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = &self.value(a) - &self.value(b);
        self.push(value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = &self.value(a) * &self.value(b);
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let value = self.value(x).mapv(|v| v * factor);
        self.push(value, Op::Scale(x, factor), &[x])
    }

    pub fn offset(&mut self, x: Var, shift: T) -> Var {
        let value = self.value(x).mapv(|v| v + shift);
        self.push(value, Op::Offset(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| v.max(T::zero()));
        self.push(value, Op::Relu(x), &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let value = self
            .value(x)
            .mapv(|v| if v > T::zero() { v } else { v * slope });
        self.push(value, Op::LeakyRelu(x, slope), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(sigmoid);
        self.push(value, Op::Sigmoid(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(T::exp);
        self.push(value, Op::Exp(x), &[x])
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(T::ln);
        self.push(value, Op::Ln(x), &[x])
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(T::abs);
        self.push(value, Op::Abs(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| v * v);
        self.push(value, Op::Square(x), &[x])
    }

    /// Elementwise clamp to `[lo, hi]`; gradient is zero outside the interval.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let value = self.value(x).mapv(|v| v.max(lo).min(hi));
        self.push(value, Op::Clamp(x, lo, hi), &[x])
    }

    /// Per-row sum: `B × n → B × 1`.
    pub fn row_sum(&mut self, x: Var) -> Var {
        let value = self.value(x).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(value, Op::RowSum(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(x).sum());
        self.push(value, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let view = self.value(x);
        let n = T::from_usize(view.len()).expect("len");
        let value = Array2::from_elem((1, 1), view.sum() / n);
        self.push(value, Op::Mean(x), &[x])
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let value = softmax_rows(self.value(x));
        self.push(value, Op::Softmax(x), &[x])
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let value = log_softmax_rows(self.value(x));
        self.push(value, Op::LogSoftmax(x), &[x])
    }

    /// Column-wise concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat rows agree");
        self.push(value, Op::Concat(parts.to_vec()), parts)
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let value = self.value(x).slice(s![.., start..end]).to_owned();
        self.push(value, Op::Slice(x, start, end), &[x])
    }

    /// Batch normalization with batch statistics and a fixed, non-learned
    /// scale: `scale · (x − mean) / sqrt(var + eps)`, per column.
    pub fn batch_norm(&mut self, x: Var, scale: T, eps: T) -> Var {
        let view = self.value(x);
        let n = T::from_usize(view.nrows()).expect("rows");
        let mean = view.sum_axis(Axis(0)) / n;
        let centered = &view - &mean;
        let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / n;
        let inv_std = var.mapv(|v| T::one() / (v + eps).sqrt());
        let xhat = &centered * &inv_std;
        let value = xhat.mapv(|v| v * scale);
        self.push(
            value,
            Op::BatchNorm {
                x,
                scale,
                inv_std,
                xhat,
            },
            &[x],
        )
    }

    /// Strided convolution. `w` is `out_c × (in_c·k·k)`, `b` is `1 × out_c`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        assert_eq!(xv.ncols(), geom.in_len(), "conv2d input width");
        let mut out = Array2::<T>::zeros((xv.nrows(), geom.out_len()));
        for (row, mut dst) in xv.outer_iter().zip(out.outer_iter_mut()) {
            let row = row.as_standard_layout();
            let cols = im2col(row.as_slice().expect("contiguous"), &geom);
            let y = wv.dot(&cols);
            for (oc, yrow) in y.outer_iter().enumerate() {
                let bias = bv[[0, oc]];
                let base = oc * geom.positions();
                for (p, &v) in yrow.iter().enumerate() {
                    dst[base + p] = v + bias;
                }
            }
        }
        self.push(out, Op::Conv2d { x, w, b, geom }, &[x, w, b])
    }

    /// Transposed convolution, the adjoint of [`Graph::conv2d`] with
    /// geometry `geom`: maps `geom.out_c × out_h × out_w` rows back to
    /// `geom.in_c × in_h × in_w`. `w` is `geom.out_c × (geom.in_c·k·k)`,
    /// `b` is `1 × geom.in_c`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        assert_eq!(xv.ncols(), geom.out_len(), "conv_transpose2d input width");
        let mut out = Array2::<T>::zeros((xv.nrows(), geom.in_len()));
        let plane = geom.in_h * geom.in_w;
        for (row, mut dst) in xv.outer_iter().zip(out.outer_iter_mut()) {
            let row = row.as_standard_layout();
            let xm = row
                .into_shape_with_order((geom.out_c, geom.positions()))
                .expect("reshape");
            let cols = wv.t().dot(&xm);
            let dst = dst.as_slice_mut().expect("contiguous");
            col2im(&cols, &geom, dst);
            for c in 0..geom.in_c {
                let bias = bv[[0, c]];
                for v in &mut dst[c * plane..(c + 1) * plane] {
                    *v += bias;
                }
            }
        }
        self.push(out, Op::ConvTranspose2d { x, w, b, geom }, &[x, w, b])
    }

    /// Elementwise Bernoulli negative log-likelihood from logits:
    /// `softplus(l) − t·l`.
    pub fn bce_with_logits(&mut self, logits: Var, target: Var) -> Var {
        let mut value = self.value(logits).to_owned();
        Zip::from(&mut value)
            .and(&self.value(target))
            .for_each(|l, &t| *l = softplus(*l) - t * *l);
        self.push(value, Op::BceWithLogits(logits, target), &[logits, target])
    }

    /// Gradients of `output` (seeded with ones) with respect to every node
    /// that requires them.
    pub fn backward(&self, output: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Array2<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[output.0].requires_grad {
            return Gradients { grads };
        }
        grads[output.0] = Some(Array2::from_elem(self.nodes[output.0].value.dim(), T::one()));

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let y = &node.value;
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.requires_grad(*a) {
                        let da = g.dot(&self.value(*b).t());
                        self.accumulate(&mut grads, *a, da);
                    }
                    if self.requires_grad(*b) {
                        let db = self.value(*a).t().dot(&g);
                        self.accumulate(&mut grads, *b, db);
                    }
                }
                Op::AddRow(x, row) => {
                    if self.requires_grad(*row) {
                        let dr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        self.accumulate(&mut grads, *row, dr);
                    }
                    self.accumulate(&mut grads, *x, g);
                }
                Op::MulRow(x, row) => {
                    if self.requires_grad(*row) {
                        let dr = (&g * &self.value(*x)).sum_axis(Axis(0)).insert_axis(Axis(0));
                        self.accumulate(&mut grads, *row, dr);
                    }
                    if self.requires_grad(*x) {
                        let dx = &g * &self.value(*row);
                        self.accumulate(&mut grads, *x, dx);
                    }
                }
                Op::Add(a, b) => {
                    if self.requires_grad(*b) {
                        self.accumulate(&mut grads, *b, g.clone());
                    }
                    self.accumulate(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    if self.requires_grad(*b) {
                        self.accumulate(&mut grads, *b, g.mapv(|v| -v));
                    }
                    self.accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    if self.requires_grad(*a) {
                        let da = &g * &self.value(*b);
                        self.accumulate(&mut grads, *a, da);
                    }
                    if self.requires_grad(*b) {
                        let db = &g * &self.value(*a);
                        self.accumulate(&mut grads, *b, db);
                    }
                }
                Op::Scale(x, factor) => {
                    let f = *factor;
                    self.accumulate(&mut grads, *x, g.mapv(|v| v * f));
                }
                Op::Offset(x) => self.accumulate(&mut grads, *x, g),
                Op::Relu(x) => {
                    let mut dx = g;
                    Zip::from(&mut dx).and(y).for_each(|d, &out| {
                        if out <= T::zero() {
                            *d = T::zero();
                        }
                    });
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::LeakyRelu(x, slope) => {
                    let mut dx = g;
                    Zip::from(&mut dx).and(&self.value(*x)).for_each(|d, &inp| {
                        if inp <= T::zero() {
                            *d *= *slope;
                        }
                    });
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::Sigmoid(x) => {
                    let mut dx = g;
                    Zip::from(&mut dx)
                        .and(y)
                        .for_each(|d, &s| *d *= s * (T::one() - s));
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::Exp(x) => {
                    let dx = &g * y;
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::Ln(x) => {
                    let dx = &g / &self.value(*x);
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::Abs(x) => {
                    let mut dx = g;
                    Zip::from(&mut dx).and(&self.value(*x)).for_each(|d, &inp| {
                        *d *= if inp > T::zero() {
                            T::one()
                        } else if inp < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        };
                    });
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::Square(x) => {
                    let mut dx = g;
                    let two = T::lit(2.0);
                    Zip::from(&mut dx)
                        .and(&self.value(*x))
                        .for_each(|d, &inp| *d *= two * inp);
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::Clamp(x, lo, hi) => {
                    let mut dx = g;
                    Zip::from(&mut dx).and(&self.value(*x)).for_each(|d, &inp| {
                        if inp < *lo || inp > *hi {
                            *d = T::zero();
                        }
                    });
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::RowSum(x) => {
                    let dim = self.shape(*x);
                    let dx = g.broadcast(dim).expect("column broadcast").to_owned();
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::Sum(x) => {
                    let dx = Array2::from_elem(self.shape(*x), g[[0, 0]]);
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::Mean(x) => {
                    let dim = self.shape(*x);
                    let n = T::from_usize(dim.0 * dim.1).expect("len");
                    let dx = Array2::from_elem(dim, g[[0, 0]] / n);
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::Softmax(x) => {
                    let gy = &g * y;
                    let dot = gy.sum_axis(Axis(1)).insert_axis(Axis(1));
                    let dx = &gy - &(y * &dot);
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::LogSoftmax(x) => {
                    let total = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                    let probs = y.mapv(T::exp);
                    let dx = &g - &(&probs * &total);
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::Concat(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let width = self.shape(p).1;
                        if self.requires_grad(p) {
                            let dp = g.slice(s![.., start..start + width]).to_owned();
                            self.accumulate(&mut grads, p, dp);
                        }
                        start += width;
                    }
                }
                Op::Slice(x, start, end) => {
                    let mut dx = Array2::<T>::zeros(self.shape(*x));
                    dx.slice_mut(s![.., *start..*end]).assign(&g);
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::BatchNorm {
                    x,
                    scale,
                    inv_std,
                    xhat,
                } => {
                    let n = T::from_usize(g.nrows()).expect("rows");
                    let sum_g = g.sum_axis(Axis(0));
                    let sum_gx = (&g * xhat).sum_axis(Axis(0));
                    let coeff = inv_std.mapv(|s| *scale * s / n);
                    let dx = (&(&g.mapv(|v| v * n) - &sum_g) - &(xhat * &sum_gx)) * &coeff;
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::Conv2d { x, w, b, geom } => {
                    self.conv2d_backward(&mut grads, &g, *x, *w, *b, geom);
                }
                Op::ConvTranspose2d { x, w, b, geom } => {
                    self.conv_transpose2d_backward(&mut grads, &g, *x, *w, *b, geom);
                }
                Op::BceWithLogits(logits, target) => {
                    let lv = self.value(*logits);
                    if self.requires_grad(*target) {
                        let dt = &g * &lv.mapv(|v| -v);
                        self.accumulate(&mut grads, *target, dt);
                    }
                    if self.requires_grad(*logits) {
                        let mut dl = lv.mapv(sigmoid);
                        dl -= &self.value(*target);
                        dl *= &g;
                        self.accumulate(&mut grads, *logits, dl);
                    }
                }
            }
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Array2<T>>], v: Var, g: Array2<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => *existing += &g,
            slot => *slot = Some(g),
        }
    }

    fn conv2d_backward(
        &self,
        grads: &mut [Option<Array2<T>>],
        g: &Array2<T>,
        x: Var,
        w: Var,
        b: Var,
        geom: &ConvGeom,
    ) {
        let xv = self.value(x);
        let wv = self.value(w);
        let positions = geom.positions();
        let mut dw = Array2::<T>::zeros(wv.dim());
        let mut db = Array2::<T>::zeros((1, geom.out_c));
        let mut dx = Array2::<T>::zeros(xv.dim());
        for ((row, grow), mut dxrow) in xv.outer_iter().zip(g.outer_iter()).zip(dx.outer_iter_mut()) {
            let gm = grow
                .as_standard_layout()
                .into_owned()
                .into_shape_with_order((geom.out_c, positions))
                .expect("reshape");
            let row = row.as_standard_layout();
            let cols = im2col(row.as_slice().expect("contiguous"), geom);
            dw += &gm.dot(&cols.t());
            db += &gm.sum_axis(Axis(1)).insert_axis(Axis(0));
            let dcols = wv.t().dot(&gm);
            col2im(&dcols, geom, dxrow.as_slice_mut().expect("contiguous"));
        }
        self.accumulate(grads, x, dx);
        self.accumulate(grads, w, dw);
        self.accumulate(grads, b, db);
    }

    fn conv_transpose2d_backward(
        &self,
        grads: &mut [Option<Array2<T>>],
        g: &Array2<T>,
        x: Var,
        w: Var,
        b: Var,
        geom: &ConvGeom,
    ) {
        let xv = self.value(x);
        let wv = self.value(w);
        let plane = geom.in_h * geom.in_w;
        let mut dw = Array2::<T>::zeros(wv.dim());
        let mut db = Array2::<T>::zeros((1, geom.in_c));
        let mut dx = Array2::<T>::zeros(xv.dim());
        for ((row, grow), mut dxrow) in xv.outer_iter().zip(g.outer_iter()).zip(dx.outer_iter_mut()) {
            let grow = grow.as_standard_layout();
            let gslice = grow.as_slice().expect("contiguous");
            for c in 0..geom.in_c {
                db[[0, c]] += gslice[c * plane..(c + 1) * plane].iter().copied().sum::<T>();
            }
            let cols = im2col(gslice, geom);
            let xm = row
                .as_standard_layout()
                .into_owned()
                .into_shape_with_order((geom.out_c, geom.positions()))
                .expect("reshape");
            dw += &xm.dot(&cols.t());
            let dxm = wv.dot(&cols);
            dxrow.assign(&ndarray::ArrayView1::from(dxm.as_slice().expect("contiguous")));
        }
        self.accumulate(grads, x, dx);
        self.accumulate(grads, w, dw);
        self.accumulate(grads, b, db);
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub(crate) fn softplus<T: Scalar>(v: T) -> T {
    v.max(T::zero()) + (-v.abs()).exp().ln_1p()
}

pub(crate) fn softmax_rows<T: Scalar>(x: ArrayView2<'_, T>) -> Array2<T> {
    let mut out = x.to_owned();
    for mut row in out.outer_iter_mut() {
        let max = row.fold(T::neg_infinity(), |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row.mapv_inplace(|v| v / total);
    }
    out
}

pub(crate) fn log_softmax_rows<T: Scalar>(x: ArrayView2<'_, T>) -> Array2<T> {
    let mut out = x.to_owned();
    for mut row in out.outer_iter_mut() {
        let max = row.fold(T::neg_infinity(), |m, &v| m.max(v));
        let lse = max + row.fold(T::zero(), |acc, &v| acc + (v - max).exp()).ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}
