//! Reverse-mode differentiation over dense row-major matrices.
//!
//! The tape records a straight-line program of matrix operations. Rows are
//! batch samples, columns are features. Spatial derivatives of the networks
//! are built *on the tape* as forward tangents, so a single reverse sweep
//! yields parameter gradients of losses that involve values, gradients and
//! Jacobians alike (mixed second derivatives).
//!
//! Activation masks (ReLU, clamp saturation) are piecewise constant and are
//! treated as constants during the reverse sweep.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length mismatch");
        Self { rows, cols, data }
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_vec(1, 1, vec![value])
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn same_shape(&self, other: &Mat) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    /// `x · wᵀ (+ b)`; x is n×k, w is m×k, b is 1×m.
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    AddRow {
        x: Var,
        row: Var,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Relu(Var),
    /// Multiplies `x` by `1[lo < pre < hi]`; `pre` is n×cols(x) or n×1.
    StepMask {
        x: Var,
        pre: Var,
        lo: f64,
        hi: f64,
    },
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    Tanh(Var),
    OneMinusSq(Var),
    Exp(Var),
    Abs(Var),
    Square(Var),
    ColScale {
        x: Var,
        s: Var,
    },
    Col {
        x: Var,
        j: usize,
    },
    ConcatCols(Vec<Var>),
    RowDot(Var, Var),
    RowNorm(Var),
    MaxConst {
        x: Var,
        floor: Vec<f64>,
    },
    Huber {
        x: Var,
        delta: f64,
    },
    BceLogits {
        x: Var,
        labels: Vec<f64>,
    },
    Damp {
        x: Var,
        eps: f64,
    },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
    tracked: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Cotangents produced by a reverse sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    (rsc, csc): (usize, usize),
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    debug_assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    debug_assert!((m - 1) * rsc + (n - 1) * csc < c.len());
    // SAFETY: the asserts above bound every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

fn smoothstep(t: f64) -> (f64, f64, f64) {
    if t <= 0.0 {
        (0.0, 0.0, 0.0)
    } else if t >= 1.0 {
        (1.0, 0.0, 0.0)
    } else {
        (t * t * (3.0 - 2.0 * t), 6.0 * t * (1.0 - t), 6.0 - 12.0 * t)
    }
}

/// Boundary damping factor and its spatial gradient for one point.
///
/// `h(x) = s(min_i (1 - |x_i|) / eps)` with the C¹ smoothstep `s`.
/// Returns `(h, axis, dh/dx_axis, d²h/dx_axis²)`; the gradient is supported
/// on the single minimizing axis.
pub(crate) fn damping_parts(x: &[f64], eps: f64) -> (f64, usize, f64, f64) {
    let mut axis = 0;
    let mut m = f64::INFINITY;
    for (i, xi) in x.iter().enumerate() {
        let d = 1.0 - xi.abs();
        if d < m {
            m = d;
            axis = i;
        }
    }
    let (s, ds, dds) = smoothstep(m / eps);
    let sign = if x[axis] > 0.0 {
        1.0
    } else if x[axis] < 0.0 {
        -1.0
    } else {
        0.0
    };
    (s, axis, -sign * ds / eps, sign * sign * dds / (eps * eps))
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

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.data.len(), 1);
        m.data[0]
    }

    fn push(&mut self, value: Mat, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Untracked leaf: receives no gradient.
    pub fn constant(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf, false)
    }

    /// Tracked leaf: differentiable input.
    pub fn param(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf, true)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (xm, wm) = (self.value(x), self.value(w));
        assert_eq!(xm.cols, wm.cols, "linear: inner dimension mismatch");
        let (n, k, m) = (xm.rows, xm.cols, wm.rows);
        let mut out = Mat::zeros(n, m);
        gemm(
            n,
            k,
            m,
            &xm.data,
            (k, 1),
            &wm.data,
            (1, k),
            &mut out.data,
            (m, 1),
            0.0,
        );
        if let Some(b) = b {
            let bm = self.value(b);
            assert_eq!(bm.data.len(), m, "linear: bias width mismatch");
            for row in out.data.chunks_exact_mut(m) {
                for (o, bi) in row.iter_mut().zip(&bm.data) {
                    *o += bi;
                }
            }
        }
        let tracked = self.tracked(x) || self.tracked(w) || b.is_some_and(|b| self.tracked(b));
        self.push(out, Op::Linear { x, w, b }, tracked)
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (xm, rm) = (self.value(x), self.value(row));
        assert_eq!(rm.data.len(), xm.cols, "add_row: width mismatch");
        let mut out = xm.clone();
        for r in out.data.chunks_exact_mut(xm.cols.max(1)) {
            for (o, v) in r.iter_mut().zip(&rm.data) {
                *o += v;
            }
        }
        let tracked = self.tracked(x) || self.tracked(row);
        self.push(out, Op::AddRow { x, row }, tracked)
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (am, bm) = (self.value(a), self.value(b));
        assert!(am.same_shape(bm), "elementwise op: shape mismatch");
        let data = am
            .data
            .iter()
            .zip(&bm.data)
            .map(|(x, y)| f(*x, *y))
            .collect();
        let out = Mat::from_vec(am.rows, am.cols, data);
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(out, op, tracked)
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let xm = self.value(x);
        let out = Mat::from_vec(xm.rows, xm.cols, xm.data.iter().map(|v| f(*v)).collect());
        let tracked = self.tracked(x);
        self.push(out, op, tracked)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.map(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        self.map(x, |v| v + c, Op::AddConst(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu(x))
    }

    pub fn step_mask(&mut self, x: Var, pre: Var, lo: f64, hi: f64) -> Var {
        let (xm, pm) = (self.value(x), self.value(pre));
        assert_eq!(xm.rows, pm.rows, "step_mask: row mismatch");
        assert!(
            pm.cols == xm.cols || pm.cols == 1,
            "step_mask: column mismatch"
        );
        let mut out = xm.clone();
        for r in 0..xm.rows {
            for c in 0..xm.cols {
                let p = if pm.cols == 1 {
                    pm.get(r, 0)
                } else {
                    pm.get(r, c)
                };
                if !(p > lo && p < hi) {
                    out.data[r * xm.cols + c] = 0.0;
                }
            }
        }
        let tracked = self.tracked(x);
        self.push(out, Op::StepMask { x, pre, lo, hi }, tracked)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.map(x, |v| v.clamp(lo, hi), Op::Clamp { x, lo, hi })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, f64::tanh, Op::Tanh(x))
    }

    /// `1 - x²`, the tanh derivative expressed through the activation.
    pub fn one_minus_sq(&mut self, x: Var) -> Var {
        self.map(x, |v| 1.0 - v * v, Op::OneMinusSq(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, f64::exp, Op::Exp(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.map(x, f64::abs, Op::Abs(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.map(x, |v| v * v, Op::Square(x))
    }

    /// Scales row `r` of `x` by `s[r]`; `s` is n×1.
    pub fn col_scale(&mut self, x: Var, s: Var) -> Var {
        let (xm, sm) = (self.value(x), self.value(s));
        assert_eq!(sm.rows, xm.rows, "col_scale: row mismatch");
        assert_eq!(sm.cols, 1, "col_scale: scale must be a column");
        let mut out = xm.clone();
        if xm.cols > 0 {
            for (row, sv) in out.data.chunks_exact_mut(xm.cols).zip(&sm.data) {
                for o in row {
                    *o *= sv;
                }
            }
        }
        let tracked = self.tracked(x) || self.tracked(s);
        self.push(out, Op::ColScale { x, s }, tracked)
    }

    pub fn col(&mut self, x: Var, j: usize) -> Var {
        let xm = self.value(x);
        assert!(j < xm.cols, "col: index out of range");
        let data = (0..xm.rows).map(|r| xm.get(r, j)).collect();
        let out = Mat::from_vec(xm.rows, 1, data);
        let tracked = self.tracked(x);
        self.push(out, Op::Col { x, j }, tracked)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols: no inputs");
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut offset = 0;
        for p in parts {
            let pm = self.value(*p);
            assert_eq!(pm.rows, rows, "concat_cols: row mismatch");
            for r in 0..rows {
                out.data[r * cols + offset..r * cols + offset + pm.cols].copy_from_slice(pm.row(r));
            }
            offset += pm.cols;
        }
        let tracked = parts.iter().any(|p| self.tracked(*p));
        self.push(out, Op::ConcatCols(parts.to_vec()), tracked)
    }

    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let (am, bm) = (self.value(a), self.value(b));
        assert!(am.same_shape(bm), "row_dot: shape mismatch");
        let data = (0..am.rows)
            .map(|r| am.row(r).iter().zip(bm.row(r)).map(|(x, y)| x * y).sum())
            .collect();
        let out = Mat::from_vec(am.rows, 1, data);
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(out, Op::RowDot(a, b), tracked)
    }

    pub fn row_norm(&mut self, a: Var) -> Var {
        let am = self.value(a);
        let data = (0..am.rows)
            .map(|r| am.row(r).iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let out = Mat::from_vec(am.rows, 1, data);
        let tracked = self.tracked(a);
        self.push(out, Op::RowNorm(a), tracked)
    }

    /// Elementwise `max(x, floor)` against a constant floor.
    pub fn max_const(&mut self, x: Var, floor: Vec<f64>) -> Var {
        let xm = self.value(x);
        assert_eq!(
            floor.len(),
            xm.data.len(),
            "max_const: floor length mismatch"
        );
        let data = xm.data.iter().zip(&floor).map(|(v, f)| v.max(*f)).collect();
        let out = Mat::from_vec(xm.rows, xm.cols, data);
        let tracked = self.tracked(x);
        self.push(out, Op::MaxConst { x, floor }, tracked)
    }

    /// Quadratic below `delta`, linear above: `½r²` or `δ(|r| − δ/2)`.
    pub fn huber(&mut self, x: Var, delta: f64) -> Var {
        self.map(
            x,
            move |v| {
                let a = v.abs();
                if a <= delta {
                    0.5 * v * v
                } else {
                    delta * (a - 0.5 * delta)
                }
            },
            Op::Huber { x, delta },
        )
    }

    /// Elementwise binary cross entropy of `sigmoid(x)` against `labels`.
    pub fn bce_logits(&mut self, x: Var, labels: Vec<f64>) -> Var {
        let xm = self.value(x);
        assert_eq!(
            labels.len(),
            xm.data.len(),
            "bce_logits: label length mismatch"
        );
        let data = xm
            .data
            .iter()
            .zip(&labels)
            .map(|(v, y)| v.max(0.0) - v * y + (-v.abs()).exp().ln_1p())
            .collect();
        let out = Mat::from_vec(xm.rows, xm.cols, data);
        let tracked = self.tracked(x);
        self.push(out, Op::BceLogits { x, labels }, tracked)
    }

    /// Boundary damping: n×d points to n×(1+d) rows `[h, ∂h/∂x_1, …]`.
    pub fn damp(&mut self, x: Var, eps: f64) -> Var {
        let xm = self.value(x);
        let d = xm.cols;
        let mut out = Mat::zeros(xm.rows, d + 1);
        for r in 0..xm.rows {
            let (h, axis, dh, _) = damping_parts(xm.row(r), eps);
            out.data[r * (d + 1)] = h;
            out.data[r * (d + 1) + 1 + axis] = dh;
        }
        let tracked = self.tracked(x);
        self.push(out, Op::Damp { x, eps }, tracked)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        let tracked = self.tracked(x);
        self.push(Mat::scalar(s), Op::Sum(x), tracked)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xm = self.value(x);
        let s = xm.data.iter().sum::<f64>() / xm.data.len() as f64;
        let tracked = self.tracked(x);
        self.push(Mat::scalar(s), Op::Mean(x), tracked)
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(
            self.value(root).data.len(),
            1,
            "backward: root must be scalar"
        );
        self.backward_from(vec![(root, Mat::scalar(1.0))])
            .expect("scalar seed always matches")
    }

    /// Reverse sweep seeded with explicit cotangents at several outputs.
    pub fn backward_seeded(&self, seeds: &[(Var, Mat)]) -> Result<Gradients> {
        for (v, m) in seeds {
            let value = self.nodes.get(v.0).ok_or(Error::IndexOutOfRange {
                index: v.0,
                len: self.nodes.len(),
            })?;
            if !value.value.same_shape(m) {
                return Err(Error::ShapeMismatch(format!(
                    "cotangent {}x{} for output {}x{}",
                    m.rows, m.cols, value.value.rows, value.value.cols
                )));
            }
        }
        self.backward_from(seeds.to_vec())
    }

    fn backward_from(&self, seeds: Vec<(Var, Mat)>) -> Result<Gradients> {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut top = 0;
        for (v, m) in seeds {
            top = top.max(v.0 + 1);
            accumulate(&mut grads, v, &m);
        }
        for i in (0..top).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let tracked = |v: Var| self.nodes[v.0].tracked;
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (xm, wm) = (val(*x), val(*w));
                let (n, k, m) = (xm.rows, xm.cols, wm.rows);
                if tracked(*x) {
                    let dx = slot(grads, *x, n, k);
                    gemm(
                        n,
                        m,
                        k,
                        &g.data,
                        (m, 1),
                        &wm.data,
                        (k, 1),
                        &mut dx.data,
                        (k, 1),
                        1.0,
                    );
                }
                if tracked(*w) {
                    let dw = slot(grads, *w, m, k);
                    gemm(
                        m,
                        n,
                        k,
                        &g.data,
                        (1, m),
                        &xm.data,
                        (k, 1),
                        &mut dw.data,
                        (k, 1),
                        1.0,
                    );
                }
                if let Some(b) = b {
                    if tracked(*b) {
                        let bm = val(*b);
                        let db = slot(grads, *b, bm.rows, bm.cols);
                        add_col_sums(&mut db.data, g);
                    }
                }
            }
            Op::AddRow { x, row } => {
                if tracked(*x) {
                    accumulate(grads, *x, g);
                }
                if tracked(*row) {
                    let rm = val(*row);
                    let dr = slot(grads, *row, rm.rows, rm.cols);
                    add_col_sums(&mut dr.data, g);
                }
            }
            Op::Add(a, b) => {
                if tracked(*a) {
                    accumulate(grads, *a, g);
                }
                if tracked(*b) {
                    accumulate(grads, *b, g);
                }
            }
            Op::Sub(a, b) => {
                if tracked(*a) {
                    accumulate(grads, *a, g);
                }
                if tracked(*b) {
                    accumulate_map(grads, *b, g, |gi, _| -gi, &g.data);
                }
            }
            Op::Mul(a, b) => {
                let (am, bm) = (val(*a), val(*b));
                if tracked(*a) {
                    accumulate_map(grads, *a, g, |gi, bi| gi * bi, &bm.data);
                }
                if tracked(*b) {
                    accumulate_map(grads, *b, g, |gi, ai| gi * ai, &am.data);
                }
            }
            Op::Div(a, b) => {
                let bm = val(*b);
                if tracked(*a) {
                    accumulate_map(grads, *a, g, |gi, bi| gi / bi, &bm.data);
                }
                if tracked(*b) {
                    let out = &node.value;
                    let db = slot(grads, *b, bm.rows, bm.cols);
                    for i in 0..db.data.len() {
                        db.data[i] -= g.data[i] * out.data[i] / bm.data[i];
                    }
                }
            }
            Op::Scale(x, c) => {
                let c = *c;
                accumulate_map(grads, *x, g, |gi, _| gi * c, &g.data);
            }
            Op::AddConst(x) => accumulate(grads, *x, g),
            Op::Relu(x) => {
                accumulate_map(
                    grads,
                    *x,
                    g,
                    |gi, xi| if xi > 0.0 { gi } else { 0.0 },
                    &val(*x).data,
                );
            }
            Op::StepMask { x, pre, lo, hi } => {
                let (pm, cols) = (val(*pre), g.cols);
                let dx = slot(grads, *x, g.rows, cols);
                for r in 0..g.rows {
                    for c in 0..cols {
                        let p = if pm.cols == 1 {
                            pm.get(r, 0)
                        } else {
                            pm.get(r, c)
                        };
                        if p > *lo && p < *hi {
                            dx.data[r * cols + c] += g.data[r * cols + c];
                        }
                    }
                }
            }
            Op::Clamp { x, lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                accumulate_map(
                    grads,
                    *x,
                    g,
                    |gi, xi| if xi > lo && xi < hi { gi } else { 0.0 },
                    &val(*x).data,
                );
            }
            Op::Tanh(x) => {
                accumulate_map(
                    grads,
                    *x,
                    g,
                    |gi, yi| gi * (1.0 - yi * yi),
                    &node.value.data,
                );
            }
            Op::OneMinusSq(x) => {
                accumulate_map(grads, *x, g, |gi, xi| -2.0 * gi * xi, &val(*x).data);
            }
            Op::Exp(x) => accumulate_map(grads, *x, g, |gi, yi| gi * yi, &node.value.data),
            Op::Abs(x) => {
                accumulate_map(grads, *x, g, |gi, xi| gi * sign0(xi), &val(*x).data);
            }
            Op::Square(x) => accumulate_map(grads, *x, g, |gi, xi| 2.0 * gi * xi, &val(*x).data),
            Op::ColScale { x, s } => {
                let (xm, sm) = (val(*x), val(*s));
                let cols = xm.cols;
                if tracked(*x) {
                    let dx = slot(grads, *x, xm.rows, cols);
                    for r in 0..xm.rows {
                        let sv = sm.data[r];
                        for c in 0..cols {
                            dx.data[r * cols + c] += g.data[r * cols + c] * sv;
                        }
                    }
                }
                if tracked(*s) {
                    let ds = slot(grads, *s, sm.rows, 1);
                    for r in 0..xm.rows {
                        let mut acc = 0.0;
                        for c in 0..cols {
                            acc += g.data[r * cols + c] * xm.data[r * cols + c];
                        }
                        ds.data[r] += acc;
                    }
                }
            }
            Op::Col { x, j } => {
                let xm = val(*x);
                let dx = slot(grads, *x, xm.rows, xm.cols);
                for r in 0..xm.rows {
                    dx.data[r * xm.cols + j] += g.data[r];
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let pm = val(*p);
                    if tracked(*p) {
                        let dp = slot(grads, *p, pm.rows, pm.cols);
                        for r in 0..pm.rows {
                            for c in 0..pm.cols {
                                dp.data[r * pm.cols + c] += g.data[r * g.cols + offset + c];
                            }
                        }
                    }
                    offset += pm.cols;
                }
            }
            Op::RowDot(a, b) => {
                let (am, bm) = (val(*a), val(*b));
                let cols = am.cols;
                for (target, other) in [(*a, bm), (*b, am)] {
                    if tracked(target) {
                        let dt = slot(grads, target, am.rows, cols);
                        for r in 0..am.rows {
                            for c in 0..cols {
                                dt.data[r * cols + c] += g.data[r] * other.data[r * cols + c];
                            }
                        }
                    }
                }
            }
            Op::RowNorm(a) => {
                let am = val(*a);
                let cols = am.cols;
                let da = slot(grads, *a, am.rows, cols);
                for r in 0..am.rows {
                    let nrm = node.value.data[r];
                    if nrm > 0.0 {
                        for c in 0..cols {
                            da.data[r * cols + c] += g.data[r] * am.data[r * cols + c] / nrm;
                        }
                    }
                }
            }
            Op::MaxConst { x, floor } => {
                let xm = val(*x);
                let dx = slot(grads, *x, xm.rows, xm.cols);
                for i in 0..xm.data.len() {
                    if xm.data[i] > floor[i] {
                        dx.data[i] += g.data[i];
                    }
                }
            }
            Op::Huber { x, delta } => {
                let delta = *delta;
                accumulate_map(
                    grads,
                    *x,
                    g,
                    |gi, xi| {
                        if xi.abs() <= delta {
                            gi * xi
                        } else {
                            gi * delta * sign0(xi)
                        }
                    },
                    &val(*x).data,
                );
            }
            Op::BceLogits { x, labels } => {
                let xm = val(*x);
                let dx = slot(grads, *x, xm.rows, xm.cols);
                for i in 0..xm.data.len() {
                    let p = 1.0 / (1.0 + (-xm.data[i]).exp());
                    dx.data[i] += g.data[i] * (p - labels[i]);
                }
            }
            Op::Damp { x, eps } => {
                let xm = val(*x);
                let d = xm.cols;
                let dx = slot(grads, *x, xm.rows, d);
                for r in 0..xm.rows {
                    let (_, axis, dh, ddh) = damping_parts(xm.row(r), *eps);
                    let gr = &g.data[r * (d + 1)..(r + 1) * (d + 1)];
                    dx.data[r * d + axis] += gr[0] * dh + gr[1 + axis] * ddh;
                }
            }
            Op::Sum(x) => {
                let gi = g.data[0];
                let xm = val(*x);
                let dx = slot(grads, *x, xm.rows, xm.cols);
                dx.data.iter_mut().for_each(|v| *v += gi);
            }
            Op::Mean(x) => {
                let xm = val(*x);
                let gi = g.data[0] / xm.data.len() as f64;
                let dx = slot(grads, *x, xm.rows, xm.cols);
                dx.data.iter_mut().for_each(|v| *v += gi);
            }
        }
    }
}

#[inline]
fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn slot(grads: &mut [Option<Mat>], v: Var, rows: usize, cols: usize) -> &mut Mat {
    grads[v.0].get_or_insert_with(|| Mat::zeros(rows, cols))
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, g: &Mat) {
    match &mut grads[v.0] {
        Some(acc) => acc.data.iter_mut().zip(&g.data).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g.clone()),
    }
}

fn accumulate_map(
    grads: &mut [Option<Mat>],
    v: Var,
    g: &Mat,
    f: impl Fn(f64, f64) -> f64,
    aux: &[f64],
) {
    let dst = slot(grads, v, g.rows, g.cols);
    for ((d, gi), ai) in dst.data.iter_mut().zip(&g.data).zip(aux) {
        *d += f(*gi, *ai);
    }
}

fn add_col_sums(dst: &mut [f64], g: &Mat) {
    if g.cols == 0 {
        return;
    }
    for row in g.data.chunks_exact(g.cols) {
        for (d, v) in dst.iter_mut().zip(row) {
            *d += v;
        }
    }
}
