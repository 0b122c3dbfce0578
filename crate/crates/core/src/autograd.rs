//! Reverse-mode differentiation over a linear tape.
//!
//! Every value on the tape is a `rows × cols` matrix; scalars are `1 × 1`.
//! Operations are recorded in execution order, so the tape is topologically
//! sorted by construction and a single reverse sweep computes all gradients.

use std::collections::HashMap;

use crate::error::{ensure, Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{self, AdditiveMask, Tensor};

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    ScaleRows(Var, Vec<f64>),
    Scale(Var, f64),
    AddScalar(Var),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Reshape(Var),
    GatherRows(Var, Vec<usize>),
    Softmax(Var),
    LayerNorm { input: Var, rstd: Vec<f64> },
    Silu(Var),
    Sum(Var),
    Mean(Var),
    Square(Var),
    Im2Col3 { input: Var, h: usize, w: usize },
    AvgPool2 { input: Var, w: usize },
    Upsample2 { input: Var, w: usize },
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Recording context for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    inference: bool,
    degenerate_rows: usize,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// A tape that treats every parameter as a constant.
    pub fn inference() -> Self {
        Tape { inference: true, ..Tape::default() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Total number of fully-masked softmax rows seen so far.
    pub fn degenerate_rows(&self) -> usize {
        self.degenerate_rows
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node { rows, cols, value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn grad_of(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(vec![n.rows, n.cols], n.value.clone()).expect("node shape is consistent")
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.rows(), t.cols(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn constant_raw(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        ensure!(rows * cols == data.len(), Shape, "constant {}×{} given {} values", rows, cols, data.len());
        Ok(self.push(rows, cols, data, Op::Leaf, false))
    }

    /// A leaf whose gradient is tracked (useful for input-gradient checks).
    pub fn variable(&mut self, t: &Tensor) -> Var {
        self.push(t.rows(), t.cols(), t.data().to_vec(), Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let id = store.id(name)?;
        if let Some(v) = self.params.get(&id) {
            return Ok(*v);
        }
        let t = store.tensor(id);
        let tracked = !self.inference && store.is_trainable(id);
        let op = if tracked { Op::Param(id) } else { Op::Leaf };
        let v = self.push(t.rows(), t.cols(), t.data().to_vec(), op, tracked);
        self.params.insert(id, v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (k2, n)) = (self.shape(a), self.shape(b));
        ensure!(k == k2, Shape, "matmul of [{m}, {k}] and [{k2}, {n}]");
        let out = tensor::gemm(self.value(a), self.value(b), m, k, n);
        let g = self.grad_of(&[a, b]);
        Ok(self.push(m, n, out, Op::MatMul(a, b), g))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (n, k2)) = (self.shape(a), self.shape(b));
        ensure!(k == k2, Shape, "matmul_bt of [{m}, {k}] and [{n}, {k2}]ᵀ");
        let out = tensor::gemm_bt(self.value(a), self.value(b), m, k, n);
        let g = self.grad_of(&[a, b]);
        Ok(self.push(m, n, out, Op::MatMulBt(a, b), g))
    }

    fn zip_same(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        ensure!(sa == sb, Shape, "{what} of {:?} and {:?}", sa, sb);
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| f(*x, *y)).collect();
        let g = self.grad_of(&[a, b]);
        Ok(self.push(sa.0, sa.1, out, op, g))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    /// `a[m×n] + b[1×n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, n), (br, bc)) = (self.shape(a), self.shape(b));
        ensure!(br == 1 && bc == n, Shape, "add_row of [{m}, {n}] and [{br}, {bc}]");
        let bv = self.value(b);
        let out = self.value(a).chunks(n.max(1)).flat_map(|r| r.iter().zip(bv).map(|(x, y)| x + y)).collect();
        let g = self.grad_of(&[a, b]);
        Ok(self.push(m, n, out, Op::AddRow(a, b), g))
    }

    /// `a[m×n] ⊙ b[1×n]` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, n), (br, bc)) = (self.shape(a), self.shape(b));
        ensure!(br == 1 && bc == n, Shape, "mul_row of [{m}, {n}] and [{br}, {bc}]");
        let bv = self.value(b);
        let out = self.value(a).chunks(n.max(1)).flat_map(|r| r.iter().zip(bv).map(|(x, y)| x * y)).collect();
        let g = self.grad_of(&[a, b]);
        Ok(self.push(m, n, out, Op::MulRow(a, b), g))
    }

    /// Multiply row `i` by the constant `factors[i]`.
    pub fn scale_rows(&mut self, a: Var, factors: Vec<f64>) -> Result<Var> {
        let (m, n) = self.shape(a);
        ensure!(factors.len() == m, Shape, "scale_rows: {} factors for {m} rows", factors.len());
        let out = self
            .value(a)
            .chunks(n.max(1))
            .zip(&factors)
            .flat_map(|(r, f)| r.iter().map(move |x| x * f))
            .collect();
        let g = self.grad_of(&[a]);
        Ok(self.push(m, n, out, Op::ScaleRows(a, factors), g))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let (m, n) = self.shape(a);
        let out = self.value(a).iter().map(|x| x * c).collect();
        let g = self.grad_of(&[a]);
        self.push(m, n, out, Op::Scale(a, c), g)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let (m, n) = self.shape(a);
        let out = self.value(a).iter().map(|x| x + c).collect();
        let g = self.grad_of(&[a]);
        self.push(m, n, out, Op::AddScalar(a), g)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let out = tensor::transpose(self.value(a), m, n);
        let g = self.grad_of(&[a]);
        self.push(n, m, out, Op::Transpose(a), g)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        ensure!(!parts.is_empty(), Shape, "concat_rows of nothing");
        let cols = self.shape(parts[0]).1;
        let mut out = Vec::new();
        let mut rows = 0;
        for p in parts {
            let (r, c) = self.shape(*p);
            ensure!(c == cols, Shape, "concat_rows: {c} columns vs {cols}");
            out.extend_from_slice(self.value(*p));
            rows += r;
        }
        let g = self.grad_of(parts);
        Ok(self.push(rows, cols, out, Op::ConcatRows(parts.to_vec()), g))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        ensure!(!parts.is_empty(), Shape, "concat_cols of nothing");
        let rows = self.shape(parts[0]).0;
        let mut cols = 0;
        for p in parts {
            let (r, c) = self.shape(*p);
            ensure!(r == rows, Shape, "concat_cols: {r} rows vs {rows}");
            cols += c;
        }
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for p in parts {
                let c = self.shape(*p).1;
                out.extend_from_slice(&self.value(*p)[i * c..(i + 1) * c]);
            }
        }
        let g = self.grad_of(parts);
        Ok(self.push(rows, cols, out, Op::ConcatCols(parts.to_vec()), g))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.shape(a);
        ensure!(start <= end && end <= m, Shape, "slice_rows {start}..{end} of {m} rows");
        let out = self.value(a)[start * n..end * n].to_vec();
        let g = self.grad_of(&[a]);
        Ok(self.push(end - start, n, out, Op::SliceRows(a, start), g))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.shape(a);
        ensure!(start <= end && end <= n, Shape, "slice_cols {start}..{end} of {n} columns");
        let v = self.value(a);
        let out = (0..m).flat_map(|i| v[i * n + start..i * n + end].iter().copied()).collect();
        let g = self.grad_of(&[a]);
        Ok(self.push(m, end - start, out, Op::SliceCols(a, start), g))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let (m, n) = self.shape(a);
        ensure!(m * n == rows * cols, Shape, "reshape [{m}, {n}] into [{rows}, {cols}]");
        let out = self.value(a).to_vec();
        let g = self.grad_of(&[a]);
        Ok(self.push(rows, cols, out, Op::Reshape(a), g))
    }

    /// Rows `indices` of `a`, in order (an embedding lookup).
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let (m, n) = self.shape(a);
        ensure!(indices.iter().all(|&i| i < m), Shape, "gather_rows index out of range for {m} rows");
        let v = self.value(a);
        let out = indices.iter().flat_map(|&i| v[i * n..(i + 1) * n].iter().copied()).collect();
        let g = self.grad_of(&[a]);
        Ok(self.push(indices.len(), n, out, Op::GatherRows(a, indices.to_vec()), g))
    }

    /// Row-wise softmax after the additive mask. Fully-masked rows come back
    /// as zeros; their indices are returned.
    pub fn masked_softmax(&mut self, a: Var, mask: Option<&AdditiveMask>) -> Result<(Var, Vec<usize>)> {
        let (m, n) = self.shape(a);
        if let Some(mask) = mask {
            mask.check_against(m, n)?;
        }
        let mut out = self.value(a).to_vec();
        let degenerate = tensor::softmax_rows_in_place(&mut out, m, n, mask);
        self.degenerate_rows += degenerate.len();
        let g = self.grad_of(&[a]);
        Ok((self.push(m, n, out, Op::Softmax(a), g), degenerate))
    }

    /// Normalize each row to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let v = self.value(a);
        let mut out = Vec::with_capacity(m * n);
        let mut rstds = Vec::with_capacity(m);
        for row in v.chunks(n.max(1)) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            out.extend(row.iter().map(|x| (x - mean) * rstd));
            rstds.push(rstd);
        }
        let g = self.grad_of(&[a]);
        self.push(m, n, out, Op::LayerNorm { input: a, rstd: rstds }, g)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let out = self.value(a).iter().map(|&x| x / (1.0 + (-x).exp())).collect();
        let g = self.grad_of(&[a]);
        self.push(m, n, out, Op::Silu(a), g)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let g = self.grad_of(&[a]);
        self.push(1, 1, vec![s], Op::Sum(a), g)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let g = self.grad_of(&[a]);
        self.push(1, 1, vec![s], Op::Mean(a), g)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let out = self.value(a).iter().map(|x| x * x).collect();
        let g = self.grad_of(&[a]);
        self.push(m, n, out, Op::Square(a), g)
    }

    /// 3×3 same-padded patches of an `h·w × c` feature map, giving `h·w × 9c`
    /// with column blocks ordered by kernel row, then kernel column.
    pub fn im2col3(&mut self, a: Var, h: usize, w: usize) -> Result<Var> {
        let (m, c) = self.shape(a);
        ensure!(m == h * w, Shape, "im2col3: {m} rows for a {h}×{w} grid");
        let v = self.value(a);
        let mut out = vec![0.0; m * 9 * c];
        for y in 0..h {
            for x in 0..w {
                let orow = &mut out[(y * w + x) * 9 * c..(y * w + x + 1) * 9 * c];
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = x as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let src = (sy as usize * w + sx as usize) * c;
                        let dst = (ky * 3 + kx) * c;
                        orow[dst..dst + c].copy_from_slice(&v[src..src + c]);
                    }
                }
            }
        }
        let g = self.grad_of(&[a]);
        Ok(self.push(m, 9 * c, out, Op::Im2Col3 { input: a, h, w }, g))
    }

    /// 2×2 average pooling of an `h·w × c` map.
    pub fn avg_pool2(&mut self, a: Var, h: usize, w: usize) -> Result<Var> {
        let (m, c) = self.shape(a);
        ensure!(m == h * w && h.is_multiple_of(2) && w.is_multiple_of(2), Shape, "avg_pool2 on {m} rows as {h}×{w}");
        let (oh, ow) = (h / 2, w / 2);
        let v = self.value(a);
        let mut out = vec![0.0; oh * ow * c];
        for y in 0..oh {
            for x in 0..ow {
                let o = &mut out[(y * ow + x) * c..(y * ow + x + 1) * c];
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let s = ((2 * y + dy) * w + 2 * x + dx) * c;
                    for (oc, iv) in o.iter_mut().zip(&v[s..s + c]) {
                        *oc += 0.25 * iv;
                    }
                }
            }
        }
        let g = self.grad_of(&[a]);
        Ok(self.push(oh * ow, c, out, Op::AvgPool2 { input: a, w }, g))
    }

    /// Nearest-neighbour 2× upsampling of an `h·w × c` map.
    pub fn upsample2(&mut self, a: Var, h: usize, w: usize) -> Result<Var> {
        let (m, c) = self.shape(a);
        ensure!(m == h * w, Shape, "upsample2 on {m} rows as {h}×{w}");
        let (oh, ow) = (2 * h, 2 * w);
        let v = self.value(a);
        let mut out = Vec::with_capacity(oh * ow * c);
        for y in 0..oh {
            for x in 0..ow {
                let s = ((y / 2) * w + x / 2) * c;
                out.extend_from_slice(&v[s..s + c]);
            }
        }
        let g = self.grad_of(&[a]);
        Ok(self.push(oh * ow, c, out, Op::Upsample2 { input: a, w }, g))
    }

    /// Reverse sweep from a scalar `loss`, seeding its gradient with `seed`.
    pub fn backward_scaled(&self, loss: Var, seed: f64) -> Result<Gradients> {
        let (r, c) = self.shape(loss);
        ensure!(r == 1 && c == 1, Contract, "backward needs a scalar loss, got [{r}, {c}]");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![seed]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        let mut params: Vec<(ParamId, Vec<f64>)> = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                let g = grads[i].clone().unwrap_or_else(|| vec![0.0; node.value.len()]);
                params.push((id, g));
            }
        }
        params.sort_by_key(|(id, _)| *id);
        Ok(Gradients { nodes: grads, params })
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.backward_scaled(loss, 1.0)
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let (m, n) = (node.rows, node.cols);
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let src = &self.nodes[v.0];
            if !src.needs_grad {
                return;
            }
            if v.0 >= grads.len() {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; src.value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let k = self.nodes[a.0].cols;
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                acc(*a, &mut |ga| add_into(ga, &tensor::gemm_bt(g, bv, m, n, k)));
                acc(*b, &mut |gb| add_into(gb, &tensor::gemm_at(av, g, m, k, n)));
            }
            Op::MatMulBt(a, b) => {
                let k = self.nodes[a.0].cols;
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                acc(*a, &mut |ga| add_into(ga, &tensor::gemm(g, bv, m, n, k)));
                acc(*b, &mut |gb| add_into(gb, &tensor::gemm_at(g, av, m, n, k)));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                acc(*a, &mut |ga| {
                    for ((x, gi), bi) in ga.iter_mut().zip(g).zip(bv) {
                        *x += gi * bi;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((x, gi), ai) in gb.iter_mut().zip(g).zip(av) {
                        *x += gi * ai;
                    }
                });
            }
            Op::Div(a, b) => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                acc(*a, &mut |ga| {
                    for ((x, gi), bi) in ga.iter_mut().zip(g).zip(bv) {
                        *x += gi / bi;
                    }
                });
                acc(*b, &mut |gb| {
                    for (((x, gi), ai), bi) in gb.iter_mut().zip(g).zip(av).zip(bv) {
                        *x -= gi * ai / (bi * bi);
                    }
                });
            }
            Op::AddRow(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| {
                    for row in g.chunks(n.max(1)) {
                        add_into(gb, row);
                    }
                });
            }
            Op::MulRow(a, b) => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                acc(*a, &mut |ga| {
                    for (grow, garow) in g.chunks(n.max(1)).zip(ga.chunks_mut(n.max(1))) {
                        for ((x, gi), bi) in garow.iter_mut().zip(grow).zip(bv) {
                            *x += gi * bi;
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for (grow, arow) in g.chunks(n.max(1)).zip(av.chunks(n.max(1))) {
                        for ((x, gi), ai) in gb.iter_mut().zip(grow).zip(arow) {
                            *x += gi * ai;
                        }
                    }
                });
            }
            Op::ScaleRows(a, factors) => acc(*a, &mut |ga| {
                for ((garow, grow), f) in ga.chunks_mut(n.max(1)).zip(g.chunks(n.max(1))).zip(factors) {
                    for (x, gi) in garow.iter_mut().zip(grow) {
                        *x += gi * f;
                    }
                }
            }),
            Op::Scale(a, c) => acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, gi)| *x += gi * c)),
            Op::AddScalar(a) | Op::Reshape(a) => acc(*a, &mut |ga| add_into(ga, g)),
            Op::Transpose(a) => acc(*a, &mut |ga| add_into(ga, &tensor::transpose(g, m, n))),
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.nodes[p.0].value.len();
                    acc(*p, &mut |gp| add_into(gp, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let c = self.nodes[p.0].cols;
                    acc(*p, &mut |gp| {
                        for i in 0..m {
                            add_into(&mut gp[i * c..(i + 1) * c], &g[i * n + offset..i * n + offset + c]);
                        }
                    });
                    offset += c;
                }
            }
            Op::SliceRows(a, start) => acc(*a, &mut |ga| add_into(&mut ga[start * n..(start + m) * n], g)),
            Op::SliceCols(a, start) => {
                let an = self.nodes[a.0].cols;
                acc(*a, &mut |ga| {
                    for i in 0..m {
                        add_into(&mut ga[i * an + start..i * an + start + n], &g[i * n..(i + 1) * n]);
                    }
                });
            }
            Op::GatherRows(a, indices) => acc(*a, &mut |ga| {
                for (r, &i) in indices.iter().enumerate() {
                    add_into(&mut ga[i * n..(i + 1) * n], &g[r * n..(r + 1) * n]);
                }
            }),
            Op::Softmax(a) => acc(*a, &mut |ga| {
                for ((garow, grow), yrow) in
                    ga.chunks_mut(n.max(1)).zip(g.chunks(n.max(1))).zip(node.value.chunks(n.max(1)))
                {
                    let dot: f64 = grow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                    for ((x, gi), yi) in garow.iter_mut().zip(grow).zip(yrow) {
                        *x += yi * (gi - dot);
                    }
                }
            }),
            Op::LayerNorm { input, rstd } => acc(*input, &mut |ga| {
                let nf = n as f64;
                for (((garow, grow), xrow), r) in ga
                    .chunks_mut(n.max(1))
                    .zip(g.chunks(n.max(1)))
                    .zip(node.value.chunks(n.max(1)))
                    .zip(rstd)
                {
                    let mean_g = grow.iter().sum::<f64>() / nf;
                    let mean_gx = grow.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>() / nf;
                    for ((x, gi), xi) in garow.iter_mut().zip(grow).zip(xrow) {
                        *x += r * (gi - mean_g - xi * mean_gx);
                    }
                }
            }),
            Op::Silu(a) => {
                let av = &self.nodes[a.0].value;
                acc(*a, &mut |ga| {
                    for ((x, gi), xi) in ga.iter_mut().zip(g).zip(av) {
                        let s = 1.0 / (1.0 + (-xi).exp());
                        *x += gi * s * (1.0 + xi * (1.0 - s));
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => {
                let len = self.nodes[a.0].value.len() as f64;
                acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0] / len));
            }
            Op::Square(a) => {
                let av = &self.nodes[a.0].value;
                acc(*a, &mut |ga| {
                    for ((x, gi), xi) in ga.iter_mut().zip(g).zip(av) {
                        *x += 2.0 * xi * gi;
                    }
                });
            }
            Op::Im2Col3 { input, h, w } => {
                let (h, w) = (*h, *w);
                let c = self.nodes[input.0].cols;
                acc(*input, &mut |ga| {
                    for y in 0..h {
                        for x in 0..w {
                            let grow = &g[(y * w + x) * 9 * c..(y * w + x + 1) * 9 * c];
                            for ky in 0..3 {
                                let sy = y as isize + ky as isize - 1;
                                if sy < 0 || sy >= h as isize {
                                    continue;
                                }
                                for kx in 0..3 {
                                    let sx = x as isize + kx as isize - 1;
                                    if sx < 0 || sx >= w as isize {
                                        continue;
                                    }
                                    let dst = (sy as usize * w + sx as usize) * c;
                                    let src = (ky * 3 + kx) * c;
                                    add_into(&mut ga[dst..dst + c], &grow[src..src + c]);
                                }
                            }
                        }
                    }
                });
            }
            Op::AvgPool2 { input, w } => {
                let w = *w;
                let ow = w / 2;
                acc(*input, &mut |ga| {
                    for (o, grow) in g.chunks(n.max(1)).enumerate() {
                        let (y, x) = (o / ow, o % ow);
                        for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            let s = ((2 * y + dy) * w + 2 * x + dx) * n;
                            for (gi, go) in ga[s..s + n].iter_mut().zip(grow) {
                                *gi += 0.25 * go;
                            }
                        }
                    }
                });
            }
            Op::Upsample2 { input, w } => {
                let w = *w;
                let ow = 2 * w;
                acc(*input, &mut |ga| {
                    for (o, grow) in g.chunks(n.max(1)).enumerate() {
                        let (y, x) = (o / ow, o % ow);
                        let s = ((y / 2) * w + x / 2) * n;
                        add_into(&mut ga[s..s + n], grow);
                    }
                });
            }
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Result of a reverse sweep.
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Vec<f64>)>,
}

impl Gradients {
    /// Gradient with respect to any tracked tape value (zeros if unreached).
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.nodes.get(v.0).and_then(|g| g.as_deref())
    }

    /// Parameter gradients sorted by parameter id.
    pub fn params(&self) -> &[(ParamId, Vec<f64>)] {
        &self.params
    }

    pub fn into_params(self) -> Vec<(ParamId, Vec<f64>)> {
        self.params
    }

    pub fn accumulate_into(&self, store: &mut ParamStore) -> Result<()> {
        for (id, g) in &self.params {
            store.accumulate_grad(*id, g)?;
        }
        Ok(())
    }
}

/// Sum per-task parameter gradients in task order.
pub fn sum_param_grads(parts: Vec<Vec<(ParamId, Vec<f64>)>>) -> Vec<(ParamId, Vec<f64>)> {
    let mut total: std::collections::BTreeMap<ParamId, Vec<f64>> = std::collections::BTreeMap::new();
    for part in parts {
        for (id, g) in part {
            match total.get_mut(&id) {
                Some(t) => add_into(t, &g),
                None => {
                    total.insert(id, g);
                }
            }
        }
    }
    total.into_iter().collect()
}

/// Write gradients produced elsewhere into the store.
pub fn apply_param_grads(store: &mut ParamStore, grads: &[(ParamId, Vec<f64>)]) -> Result<()> {
    for (id, g) in grads {
        if !store.is_trainable(*id) {
            return Err(Error::Internal(format!("gradient for frozen parameter {}", store.name(*id))));
        }
        store.accumulate_grad(*id, g)?;
    }
    Ok(())
}
