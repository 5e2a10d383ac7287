//! A small reverse-mode tape over dense row-major matrices.
//!
//! Every value lives on a [`Tape`]; operations append a node and return a
//! [`Var`] handle. [`Tape::backward`] walks the nodes in reverse recording
//! order. Besides values, the tape folds every discrete choice it makes
//! (relu masks, max-pool winners, neighbor lists of fused losses) into a
//! signature, which the finite-difference checker uses to skip points where
//! a perturbation crosses a kink.

use crate::error::{param, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "Tensor::new",
                detail: format!("{} values for a {rows}x{cols} tensor", data.len()),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn scalar(v: f64) -> Self {
        Self { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Shape { op: "Tensor::from_rows", detail: "ragged rows".into() });
            }
            data.extend_from_slice(r);
        }
        Ok(Self { rows: rows.len(), cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// The value of a 1x1 tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }
}

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    id: usize,
    rows: usize,
    cols: usize,
}

impl Var {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Relu(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    /// Same data, different row count (reshape_rows / merge_rows).
    Reshape(Var),
    /// Source row for every output element.
    MaxOverGroups(Var, Vec<usize>),
    GatherRows(Var, Vec<usize>),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    /// Scalar node with precomputed partial derivatives per parent.
    Fused(Vec<Var>, Vec<Tensor>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0100_0000_01b3;

#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    signature: u64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err<T>(op: &'static str, detail: String) -> Result<T> {
    Err(Error::Shape { op, detail })
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), signature: FNV_OFFSET }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Hash of all discrete branch decisions recorded so far.
    pub fn signature(&self) -> u64 {
        self.signature
    }

    fn note(&mut self, word: u64) {
        self.signature = (self.signature ^ word).wrapping_mul(FNV_PRIME);
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let var = Var { id: self.nodes.len(), rows: value.rows, cols: value.cols };
        self.nodes.push(Node { value, op });
        var
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.id].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        if a.cols != b.rows {
            return shape_err("matmul", format!("{:?} x {:?}", a.shape(), b.shape()));
        }
        let (m, k, n) = (a.rows, a.cols, b.cols);
        let mut out = Tensor::zeros(m, n);
        gemm(m, k, n, &self.value(a).data, (k, 1), &self.value(b).data, (n, 1), &mut out.data);
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// Adds a 1 x cols bias row to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        if bias.rows != 1 || bias.cols != x.cols {
            return shape_err("add_bias", format!("{:?} + {:?}", x.shape(), bias.shape()));
        }
        let mut out = self.value(x).clone();
        let b = &self.value(bias).data;
        for row in out.data.chunks_mut(x.cols) {
            for (v, bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        Ok(self.push(out, Op::AddBias(x, bias)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let mut word = 0u64;
        let mut words = Vec::with_capacity(out.data.len() / 64 + 1);
        for (i, v) in out.data.iter_mut().enumerate() {
            if *v > 0.0 {
                word |= 1 << (i % 64);
            } else {
                *v = 0.0;
            }
            if i % 64 == 63 {
                words.push(word);
                word = 0;
            }
        }
        words.push(word);
        for w in words {
            self.note(w);
        }
        self.push(out, Op::Relu(x))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return param("concat_cols of nothing");
        };
        let rows = first.rows;
        if parts.iter().any(|p| p.rows != rows) {
            let shapes: Vec<_> = parts.iter().map(|p| p.shape()).collect();
            return shape_err("concat_cols", format!("row counts differ: {shapes:?}"));
        }
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        Ok(self.push(Tensor { rows, cols, data }, Op::ConcatCols(parts.to_vec())))
    }

    /// Columns `start..end` of `x`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        if start >= end || end > x.cols {
            return shape_err("slice_cols", format!("{start}..{end} of {} columns", x.cols));
        }
        let src = self.value(x);
        let mut data = Vec::with_capacity(x.rows * (end - start));
        for r in 0..x.rows {
            data.extend_from_slice(&src.row(r)[start..end]);
        }
        let out = Tensor { rows: x.rows, cols: end - start, data };
        Ok(self.push(out, Op::SliceCols(x, start)))
    }

    /// Splits each row into `factor` consecutive chunks that become rows:
    /// an n x d input gives (n*factor) x (d/factor), and the children of input
    /// row r are output rows r*factor .. r*factor+factor-1.
    pub fn reshape_rows(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 0 || !x.cols.is_multiple_of(factor) {
            return shape_err("reshape_rows", format!("{} columns by factor {factor}", x.cols));
        }
        let out = Tensor { rows: x.rows * factor, cols: x.cols / factor, data: self.value(x).data.clone() };
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// Inverse of [`Tape::reshape_rows`]: concatenates groups of `factor`
    /// consecutive rows.
    pub fn merge_rows(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 0 || !x.rows.is_multiple_of(factor) {
            return shape_err("merge_rows", format!("{} rows by factor {factor}", x.rows));
        }
        let out = Tensor { rows: x.rows / factor, cols: x.cols * factor, data: self.value(x).data.clone() };
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// Column-wise maximum over consecutive groups of `group` rows. The first
    /// row wins ties.
    pub fn max_over_groups(&mut self, x: Var, group: usize) -> Result<Var> {
        if group == 0 || !x.rows.is_multiple_of(group) {
            return shape_err("max_over_groups", format!("{} rows in groups of {group}", x.rows));
        }
        let src = self.value(x);
        let (groups, cols) = (x.rows / group, x.cols);
        let mut data = Vec::with_capacity(groups * cols);
        let mut argmax = Vec::with_capacity(groups * cols);
        for g in 0..groups {
            let base = g * group;
            data.extend_from_slice(src.row(base));
            argmax.extend(std::iter::repeat_n(base, cols));
            let out = &mut data[g * cols..];
            let arg = &mut argmax[g * cols..];
            for r in base + 1..base + group {
                for (c, v) in src.row(r).iter().enumerate() {
                    if *v > out[c] {
                        out[c] = *v;
                        arg[c] = r;
                    }
                }
            }
        }
        for a in &argmax {
            self.note(*a as u64);
        }
        let out = Tensor { rows: groups, cols, data };
        Ok(self.push(out, Op::MaxOverGroups(x, argmax)))
    }

    /// Rows of `x` picked by `index` (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        if let Some(bad) = index.iter().find(|&&i| i >= x.rows) {
            return shape_err("gather_rows", format!("row {bad} of {}", x.rows));
        }
        let src = self.value(x);
        let mut data = Vec::with_capacity(index.len() * x.cols);
        for &i in index {
            data.extend_from_slice(src.row(i));
        }
        let out = Tensor { rows: index.len(), cols: x.cols, data };
        Ok(self.push(out, Op::GatherRows(x, index.to_vec())))
    }

    fn zip_with(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return shape_err(name, format!("{:?} vs {:?}", a.shape(), b.shape()));
        }
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| f(*x, *y)).collect();
        Ok(Tensor { rows: a.rows, cols: a.cols, data })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let mut out = self.value(x).clone();
        out.data.iter_mut().for_each(|v| *v *= c);
        self.push(out, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let mut out = self.value(x).clone();
        out.data.iter_mut().for_each(|v| *v += c);
        self.push(out, Op::AddScalar(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data.iter().sum::<f64>() / v.data.len().max(1) as f64;
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    /// Records a scalar computed outside the tape together with its partial
    /// derivatives with respect to each parent. `branch` identifies the
    /// discrete choices made while computing it.
    pub fn fused_scalar(&mut self, parents: &[Var], value: f64, partials: Vec<Tensor>, branch: u64) -> Result<Var> {
        if parents.len() != partials.len() {
            return param("fused_scalar: one partial per parent");
        }
        for (p, d) in parents.iter().zip(&partials) {
            if p.shape() != d.shape() {
                return shape_err("fused_scalar", format!("parent {:?} vs partial {:?}", p.shape(), d.shape()));
            }
        }
        self.note(branch);
        Ok(self.push(Tensor::scalar(value), Op::Fused(parents.to_vec(), partials)))
    }

    /// Reverse sweep from a 1x1 node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.shape() != (1, 1) {
            return param(format!("backward needs a scalar loss, got {:?}", loss.shape()));
        }
        if loss.id >= self.nodes.len() {
            return param("backward: loss is not on this tape");
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);

        fn acc(grads: &mut [Option<Vec<f64>>], v: Var) -> &mut [f64] {
            grads[v.id].get_or_insert_with(|| vec![0.0; v.rows * v.cols])
        }

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (m, k, n) = (a.rows, a.cols, b.cols);
                    let bv = &self.nodes[b.id].value.data;
                    gemm_acc(m, n, k, &g, (n, 1), bv, (1, n), acc(&mut grads, *a));
                    let av = &self.nodes[a.id].value.data;
                    gemm_acc(k, m, n, av, (1, k), &g, (n, 1), acc(&mut grads, *b));
                }
                Op::AddBias(x, bias) => {
                    add_into(acc(&mut grads, *x), &g);
                    let gb = acc(&mut grads, *bias);
                    for row in g.chunks(x.cols) {
                        add_into(gb, row);
                    }
                }
                Op::Relu(x) => {
                    let out = &node.value.data;
                    let gx = acc(&mut grads, *x);
                    for ((gx, gv), o) in gx.iter_mut().zip(&g).zip(out) {
                        if *o > 0.0 {
                            *gx += gv;
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let total = node.value.cols;
                    let mut offset = 0;
                    for p in parts {
                        let gp = acc(&mut grads, *p);
                        for r in 0..p.rows {
                            let src = &g[r * total + offset..r * total + offset + p.cols];
                            add_into(&mut gp[r * p.cols..(r + 1) * p.cols], src);
                        }
                        offset += p.cols;
                    }
                }
                Op::SliceCols(x, start) => {
                    let w = node.value.cols;
                    let gx = acc(&mut grads, *x);
                    for r in 0..x.rows {
                        let dst = &mut gx[r * x.cols + start..r * x.cols + start + w];
                        add_into(dst, &g[r * w..(r + 1) * w]);
                    }
                }
                Op::Reshape(x) => add_into(acc(&mut grads, *x), &g),
                Op::MaxOverGroups(x, argmax) => {
                    let cols = x.cols;
                    let gx = acc(&mut grads, *x);
                    for (e, (gv, src)) in g.iter().zip(argmax).enumerate() {
                        gx[src * cols + e % cols] += gv;
                    }
                }
                Op::GatherRows(x, index) => {
                    let cols = x.cols;
                    let gx = acc(&mut grads, *x);
                    for (r, &src) in index.iter().enumerate() {
                        add_into(&mut gx[src * cols..(src + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    }
                }
                Op::Add(a, b) => {
                    add_into(acc(&mut grads, *a), &g);
                    add_into(acc(&mut grads, *b), &g);
                }
                Op::Sub(a, b) => {
                    add_into(acc(&mut grads, *a), &g);
                    for (d, gv) in acc(&mut grads, *b).iter_mut().zip(&g) {
                        *d -= gv;
                    }
                }
                Op::Mul(a, b) => {
                    let bv = &self.nodes[b.id].value.data;
                    for ((d, gv), y) in acc(&mut grads, *a).iter_mut().zip(&g).zip(bv) {
                        *d += gv * y;
                    }
                    let av = &self.nodes[a.id].value.data;
                    for ((d, gv), x) in acc(&mut grads, *b).iter_mut().zip(&g).zip(av) {
                        *d += gv * x;
                    }
                }
                Op::Scale(x, c) => {
                    for (d, gv) in acc(&mut grads, *x).iter_mut().zip(&g) {
                        *d += gv * c;
                    }
                }
                Op::AddScalar(x) => add_into(acc(&mut grads, *x), &g),
                Op::Sum(x) => acc(&mut grads, *x).iter_mut().for_each(|d| *d += g[0]),
                Op::Mean(x) => {
                    let s = g[0] / (x.rows * x.cols).max(1) as f64;
                    acc(&mut grads, *x).iter_mut().for_each(|d| *d += s);
                }
                Op::Fused(parents, partials) => {
                    for (p, d) in parents.iter().zip(partials) {
                        for (gp, dv) in acc(&mut grads, *p).iter_mut().zip(&d.data) {
                            *gp += g[0] * dv;
                        }
                    }
                }
            }
            // Interior gradients are not kept.
        }
        Ok(Gradients { grads })
    }
}

/// Leaf gradients from one backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of a leaf; zero when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Tensor {
        match self.grads.get(v.id).and_then(|g| g.as_ref()) {
            Some(g) => Tensor { rows: v.rows, cols: v.cols, data: g.clone() },
            None => Tensor::zeros(v.rows, v.cols),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        match self.grads.get_mut(v.id).and_then(|g| g.take()) {
            Some(data) => Tensor { rows: v.rows, cols: v.cols, data },
            None => Tensor::zeros(v.rows, v.cols),
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], sa: (usize, usize), b: &[f64], sb: (usize, usize), c: &mut [f64]) {
    gemm_beta(m, k, n, a, sa, b, sb, 0.0, c);
}

#[allow(clippy::too_many_arguments)]
fn gemm_acc(m: usize, k: usize, n: usize, a: &[f64], sa: (usize, usize), b: &[f64], sb: (usize, usize), c: &mut [f64]) {
    gemm_beta(m, k, n, a, sa, b, sb, 1.0, c);
}

/// c (m x n, row-major) = a (m x k) * b (k x n) + beta * c, with arbitrary
/// (row, column) strides for a and b.
#[allow(clippy::too_many_arguments)]
fn gemm_beta(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    sa: (usize, usize),
    b: &[f64],
    sb: (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: the slices hold at least m*k, k*n and m*n elements, and the
    // strides describe dense row-major or transposed views of them.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Outcome of comparing tape gradients with central differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdReport {
    /// max |analytic - numeric| / max(|analytic|, |numeric|, floor)
    pub max_deviation: f64,
    pub checked: usize,
    /// Entries skipped because the perturbation changed a branch decision.
    pub skipped: usize,
}

/// Absolute floor in the relative-deviation denominator.
pub const FD_FLOOR: f64 = 1e-6;

/// Checks the gradient of the scalar built by `f` with respect to every
/// element of `point`.
pub fn finite_difference_check<F>(f: F, point: &Tensor, step: f64) -> Result<FdReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..point.data.len()).collect();
    finite_difference_check_entries(f, point, step, &all)
}

/// Like [`finite_difference_check`] but only for the listed flat indices.
/// Entries where the graph's branch signature differs between the base point
/// and either perturbed point sit on a kink and are skipped.
pub fn finite_difference_check_entries<F>(f: F, point: &Tensor, step: f64, entries: &[usize]) -> Result<FdReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    finite_difference_check_until(f, point, step, entries, entries.len())
}

/// Walks `candidates` in order and stops once `want` entries have been
/// checked (kinks do not count).
pub fn finite_difference_check_until<F>(
    f: F,
    point: &Tensor,
    step: f64,
    candidates: &[usize],
    want: usize,
) -> Result<FdReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if step.is_nan() || step <= 0.0 {
        return param("finite difference step must be positive");
    }
    let eval = |t: &Tensor| -> Result<(f64, u64, Tape, Var, Var)> {
        let mut tape = Tape::new();
        let x = tape.leaf(t.clone());
        let y = f(&mut tape, x)?;
        if y.shape() != (1, 1) {
            return param("finite_difference_check: function is not scalar");
        }
        Ok((tape.value(y).item(), tape.signature(), tape, x, y))
    };
    let (_, base_sig, tape, x, y) = eval(point)?;
    let analytic = tape.backward(y)?.get(x);

    let mut report = FdReport { max_deviation: 0.0, checked: 0, skipped: 0 };
    for &e in candidates {
        if report.checked >= want {
            break;
        }
        let mut plus = point.clone();
        plus.data[e] += step;
        let mut minus = point.clone();
        minus.data[e] -= step;
        let (fp, sp, ..) = eval(&plus)?;
        let (fm, sm, ..) = eval(&minus)?;
        if sp != base_sig || sm != base_sig {
            report.skipped += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * step);
        let a = analytic.data[e];
        let dev = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FD_FLOOR);
        report.max_deviation = report.max_deviation.max(dev);
        report.checked += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::new(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn reshape_contiguous_chunks() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(1, 4, &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.reshape_rows(x, 2).unwrap();
        assert_eq!(tape.value(y), &t(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let back = tape.merge_rows(y, 2).unwrap();
        assert_eq!(tape.value(back), tape.value(x));
        assert!(tape.reshape_rows(x, 3).is_err());
    }

    #[test]
    fn relu_values_and_mask() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(1, 2, &[-1.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 2.0]);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap().get(x);
        assert_eq!(g.data(), &[0.0, 1.0]);
    }

    #[test]
    fn max_over_groups_routes_to_argmax() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(2, 2, &[1.0, 5.0, 3.0, 2.0]));
        let m = tape.max_over_groups(x, 2).unwrap();
        assert_eq!(tape.value(m).data(), &[3.0, 5.0]);
        let w = tape.leaf(t(1, 2, &[10.0, 20.0]));
        let p = tape.mul(m, w).unwrap();
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap().get(x);
        assert_eq!(g.data(), &[0.0, 20.0, 10.0, 0.0]);
    }

    #[test]
    fn max_ties_go_to_first_row() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(3, 1, &[2.0, 2.0, 1.0]));
        let m = tape.max_over_groups(x, 3).unwrap();
        let s = tape.sum(m);
        assert_eq!(tape.backward(s).unwrap().get(x).data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn linear_gradient() {
        // loss = sum(x W): dL/dW[i][j] = sum over rows of x[r][i].
        let mut tape = Tape::new();
        let x = tape.leaf(t(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let w = tape.leaf(t(3, 2, &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]));
        let y = tape.matmul(x, w).unwrap();
        let s = tape.sum(y);
        let gw = tape.backward(s).unwrap().get(w);
        assert_eq!(gw.data(), &[5.0, 5.0, 7.0, 7.0, 9.0, 9.0]);
    }

    #[test]
    fn unreachable_leaf_has_zero_grad() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(1, 2, &[1.0, 2.0]));
        let b = tape.leaf(t(1, 2, &[3.0, 4.0]));
        let s = tape.sum(a);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(b).data(), &[0.0, 0.0]);
        assert_eq!(g.get(a).data(), &[1.0, 1.0]);
    }

    #[test]
    fn shape_errors() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(2, 3));
        let b = tape.leaf(Tensor::zeros(2, 3));
        assert!(tape.matmul(a, b).is_err());
        assert!(tape.add_bias(a, b).is_err());
        assert!(tape.max_over_groups(a, 4).is_err());
        assert!(tape.gather_rows(a, &[2]).is_err());
        assert!(tape.backward(a).is_err());
        let c = tape.leaf(Tensor::zeros(3, 2));
        assert!(tape.add(a, c).is_err());
        assert!(tape.concat_cols(&[a, c]).is_err());
    }

    #[test]
    fn fd_square() {
        let r = finite_difference_check(
            |tape, x| {
                let sq = tape.mul(x, x)?;
                Ok(tape.sum(sq))
            },
            &Tensor::scalar(3.0),
            1e-4,
        )
        .unwrap();
        assert!(r.max_deviation < 1e-6, "{r:?}");
        assert_eq!(r.checked, 1);
    }

    #[test]
    fn fd_skips_relu_kink() {
        let r = finite_difference_check(
            |tape, x| {
                let y = tape.relu(x);
                Ok(tape.sum(y))
            },
            &t(1, 2, &[0.0, 1.5]),
            1e-4,
        )
        .unwrap();
        assert_eq!(r.skipped, 1);
        assert_eq!(r.checked, 1);
        assert!(r.max_deviation < 1e-9);
    }
}
