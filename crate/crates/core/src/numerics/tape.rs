//! Reverse-mode differentiation over a linear record of primitive ops.
//!
//! A [`Tape`] owns every value produced during a forward pass. Ops append a
//! node holding the output and whatever the reverse pass needs; `backward`
//! walks the record from the loss towards the leaves.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::kernels;
use super::tensor::{Scalar, Tensor};
use crate::error::{dim_err, Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
    tape: u64,
}

impl Var {
    pub fn index(&self) -> usize {
        self.id
    }
}

/// Boolean attention mask: `allowed[r * cols + c]` is true when row `r` may
/// attend column `c`. Forbidden entries behave like an additive `-inf`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != rows * cols {
            return Err(dim_err!(
                "mask {}x{} with {} entries",
                rows,
                cols,
                allowed.len()
            ));
        }
        Ok(Self {
            rows,
            cols,
            allowed,
        })
    }

    /// Causal mask from explicit positions: a query may see any key whose
    /// position does not exceed its own.
    pub fn causal(query_positions: &[usize], key_positions: &[usize]) -> Self {
        let allowed = query_positions
            .iter()
            .flat_map(|&q| key_positions.iter().map(move |&k| k <= q))
            .collect();
        Self {
            rows: query_positions.len(),
            cols: key_positions.len(),
            allowed,
        }
    }

    /// Builds a mask from an additive mask tensor; `-inf` entries are forbidden.
    pub fn from_additive<T: Scalar>(additive: &Tensor<T>) -> Result<Self> {
        let (rows, cols) = additive.dims2()?;
        let allowed = additive
            .data()
            .iter()
            .map(|x| *x != T::neg_infinity())
            .collect();
        Ok(Self {
            rows,
            cols,
            allowed,
        })
    }

    #[inline]
    pub fn allows(&self, r: usize, c: usize) -> bool {
        self.allowed[r * self.cols + c]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Silu(Var),
    RmsNorm {
        x: Var,
        weight: Var,
        inv_rms: Vec<T>,
    },
    Rope {
        x: Var,
        positions: Vec<usize>,
        heads: usize,
        base: f64,
    },
    Softmax(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    ScatterRows(Vec<(Var, Vec<usize>)>),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<T>,
        count: usize,
    },
    Sum(Var),
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Result of [`Tape::cross_entropy`].
#[derive(Clone, Copy, Debug)]
pub struct CrossEntropy {
    pub loss: Var,
    /// Number of non-ignored positions; zero means the loss is an empty 0.
    pub count: usize,
}

/// Gradients of a scalar with respect to every `requires_grad` leaf.
#[derive(Debug)]
pub struct Gradients<T> {
    tape: u64,
    leaves: Vec<(usize, Tensor<T>)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        if var.tape != self.tape {
            return None;
        }
        self.leaves
            .binary_search_by_key(&var.id, |(id, _)| *id)
            .ok()
            .map(|i| &self.leaves[i].1)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        if var.tape != self.tape {
            return None;
        }
        let i = self
            .leaves
            .binary_search_by_key(&var.id, |(id, _)| *id)
            .ok()?;
        Some(std::mem::replace(
            &mut self.leaves[i].1,
            Tensor::zeros(&[0]),
        ))
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }
}

/// The gradient tape. Confined to one thread of execution.
pub struct Tape<T> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.id >= self.nodes.len() {
            return Err(Error::Usage(format!(
                "variable {:?} is not on tape {}",
                v, self.id
            )));
        }
        Ok(())
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        // Nothing downstream needs saved state for constant subgraphs.
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var {
            id: self.nodes.len() - 1,
            tape: self.id,
        }
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.id].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.leaf_shared(Arc::new(value), requires_grad)
    }

    pub fn leaf_shared(&mut self, value: Arc<Tensor<T>>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            id: self.nodes.len() - 1,
            tape: self.id,
        }
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.id].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.id].requires_grad
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.check(v)?;
        self.value(v).dims2()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            return Err(dim_err!("matmul inner dimensions {} vs {}", k, k2));
        }
        let out = kernels::matmul_nn(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (n, k2) = self.dims2(b)?;
        if k != k2 {
            return Err(dim_err!("matmul_nt inner dimensions {} vs {}", k, k2));
        }
        let out = kernels::matmul_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNt(a, b), rg))
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        self.check(a)?;
        self.check(b)?;
        if self.value(a).shape() != self.value(b).shape() {
            return Err(dim_err!(
                "shape mismatch {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| *x + *y)
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| *x * *y)
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        self.check(a)?;
        let va = self.value(a);
        let out = Tensor::new(
            va.shape().to_vec(),
            va.data().iter().map(|x| *x * c).collect(),
        )?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Scale(a, c), rg))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .map(|&x| x / (T::one() + (-x).exp()))
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Silu(a), rg))
    }

    /// Scales every row of `x` to unit root-mean-square, then multiplies
    /// elementwise by `weight`.
    pub fn rms_norm(&mut self, x: Var, weight: Var, eps: T) -> Result<Var> {
        let (rows, cols) = self.dims2(x)?;
        self.check(weight)?;
        if self.value(weight).len() != cols {
            return Err(dim_err!(
                "rms_norm weight length {} vs {}",
                self.value(weight).len(),
                cols
            ));
        }
        if eps <= T::zero() {
            return Err(Error::Config("rms_norm eps must be positive".into()));
        }
        let (vx, vw) = (self.value(x), self.value(weight));
        let n = T::from_f64(cols as f64);
        let mut inv_rms = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let row = vx.row(r);
            let ms = kernels::dot(row, row) / n;
            let inv = T::one() / (ms + eps).sqrt();
            inv_rms.push(inv);
            data.extend(row.iter().zip(vw.data()).map(|(a, w)| *a * inv * *w));
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        let rg = self.rg(x) || self.rg(weight);
        Ok(self.push(out, Op::RmsNorm { x, weight, inv_rms }, rg))
    }

    /// Rotary embedding on `x: t × (heads·d)`: within each head the pair
    /// `(2j, 2j+1)` at position `p` is rotated by `p · base^(-2j/d)`.
    pub fn rope(&mut self, x: Var, positions: &[usize], heads: usize, base: f64) -> Result<Var> {
        let (rows, cols) = self.dims2(x)?;
        if positions.len() != rows {
            return Err(dim_err!(
                "rope: {} positions for {} rows",
                positions.len(),
                rows
            ));
        }
        if heads == 0 || cols % heads != 0 {
            return Err(dim_err!(
                "rope: {} columns not divisible into {} heads",
                cols,
                heads
            ));
        }
        let d = cols / heads;
        if !d.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "rope head dimension {} must be even",
                d
            )));
        }
        let mut data = self.value(x).data().to_vec();
        rotate_rows(&mut data, positions, heads, d, base, false);
        let out = Tensor::new(vec![rows, cols], data)?;
        let rg = self.rg(x);
        Ok(self.push(
            out,
            Op::Rope {
                x,
                positions: positions.to_vec(),
                heads,
                base,
            },
            rg,
        ))
    }

    /// Row softmax with max subtraction. Masked entries come out exactly 0.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&Mask>) -> Result<Var> {
        let (rows, cols) = self.dims2(x)?;
        if let Some(m) = mask {
            if m.dims() != (rows, cols) {
                return Err(dim_err!("mask {:?} for scores {}x{}", m.dims(), rows, cols));
            }
        }
        let vx = self.value(x);
        let mut data = vec![T::zero(); rows * cols];
        for r in 0..rows {
            let row = vx.row(r);
            let open = |c: usize| mask.is_none_or(|m| m.allows(r, c));
            let mut max = T::neg_infinity();
            let mut any = false;
            for (c, &v) in row.iter().enumerate() {
                if open(c) {
                    any = true;
                    if v > max {
                        max = v;
                    }
                }
            }
            if !any {
                return Err(Error::DegenerateRow { row: r });
            }
            let out = &mut data[r * cols..(r + 1) * cols];
            let mut sum = T::zero();
            for (c, &v) in row.iter().enumerate() {
                if open(c) {
                    let e = (v - max).exp();
                    out[c] = e;
                    sum += e;
                }
            }
            let inv = T::one() / sum;
            for o in out.iter_mut() {
                *o *= inv;
            }
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.dims2(x)?;
        if start + len > cols {
            return Err(dim_err!(
                "slice {}..{} of {} columns",
                start,
                start + len,
                cols
            ));
        }
        let vx = self.value(x);
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&vx.row(r)[start..start + len]);
        }
        let out = Tensor::new(vec![rows, len], data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = match parts.first() {
            Some(&p) => self.dims2(p)?.0,
            None => return Err(dim_err!("concat_cols of nothing")),
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p)?;
            if r != rows {
                return Err(dim_err!("concat_cols row mismatch {} vs {}", r, rows));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        for &p in parts {
            self.check(p)?;
        }
        let values: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_rows(&values)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// `out[r] = x[index[r]]`; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (rows, cols) = self.dims2(x)?;
        let vx = self.value(x);
        let mut data = Vec::with_capacity(index.len() * cols);
        for &i in index {
            if i >= rows {
                return Err(dim_err!("gather index {} out of {} rows", i, rows));
            }
            data.extend_from_slice(vx.row(i));
        }
        let out = Tensor::new(vec![index.len(), cols], data)?;
        let rg = self.rg(x);
        Ok(self.push(
            out,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    /// Inverse of gathering: row `r` of each part lands at `index[r]` of the
    /// output. The index sets must partition `0..rows`.
    pub fn scatter_rows(&mut self, parts: &[(Var, &[usize])], rows: usize) -> Result<Var> {
        let mut cols = None;
        let mut seen = vec![false; rows];
        for (p, idx) in parts {
            let (r, c) = self.dims2(*p)?;
            if r != idx.len() {
                return Err(dim_err!(
                    "scatter part has {} rows but {} indices",
                    r,
                    idx.len()
                ));
            }
            if *cols.get_or_insert(c) != c {
                return Err(dim_err!("scatter column mismatch"));
            }
            for &i in idx.iter() {
                if i >= rows || seen[i] {
                    return Err(dim_err!("scatter index {} repeated or out of range", i));
                }
                seen[i] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(dim_err!("scatter indices do not cover all {} rows", rows));
        }
        let cols = cols.unwrap_or(0);
        let mut data = vec![T::zero(); rows * cols];
        for (p, idx) in parts {
            let vp = self.value(*p);
            for (r, &i) in idx.iter().enumerate() {
                data[i * cols..(i + 1) * cols].copy_from_slice(vp.row(r));
            }
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        let rg = parts.iter().any(|(p, _)| self.rg(*p));
        let saved = parts.iter().map(|(p, idx)| (*p, idx.to_vec())).collect();
        Ok(self.push(out, Op::ScatterRows(saved), rg))
    }

    /// Mean negative log-likelihood of `labels` under row-softmax of `logits`.
    /// Rows whose label equals `ignore_label` do not contribute; when every
    /// row is ignored the loss is 0 with `count == 0`.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        labels: &[i64],
        ignore_label: i64,
    ) -> Result<CrossEntropy> {
        let (rows, vocab) = self.dims2(logits)?;
        if labels.len() != rows {
            return Err(dim_err!("{} labels for {} logit rows", labels.len(), rows));
        }
        let mut targets = Vec::with_capacity(rows);
        for &l in labels {
            if l == ignore_label {
                targets.push(None);
            } else if l < 0 || l as usize >= vocab {
                return Err(Error::Data(format!(
                    "label {} outside vocabulary of {}",
                    l, vocab
                )));
            } else {
                targets.push(Some(l as usize));
            }
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        let vx = self.value(logits);
        let mut probs = vec![T::zero(); rows * vocab];
        let mut total = T::zero();
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = t else { continue };
            let row = vx.row(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let p = &mut probs[r * vocab..(r + 1) * vocab];
            let mut sum = T::zero();
            for (pi, &v) in p.iter_mut().zip(row) {
                *pi = (v - max).exp();
                sum += *pi;
            }
            total += sum.ln() + max - row[*t];
            let inv = T::one() / sum;
            for pi in p.iter_mut() {
                *pi *= inv;
            }
        }
        let loss = if count == 0 {
            T::zero()
        } else {
            total / T::from_f64(count as f64)
        };
        let rg = self.rg(logits);
        let var = self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            },
            rg,
        );
        Ok(CrossEntropy { loss: var, count })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), rg))
    }

    /// Reverse pass from a scalar `loss`. Every `requires_grad` leaf gets a
    /// gradient; leaves the loss does not depend on get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        self.check(loss)?;
        if self.value(loss).len() != 1 {
            return Err(Error::Usage("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(vec![T::one()]);

        for id in (0..=loss.id).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
        }

        let mut leaves = Vec::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                let g = grads.get_mut(id).and_then(Option::take);
                let shape = node.value.shape().to_vec();
                let t = match g {
                    Some(g) => Tensor::new(shape, g)?,
                    None => Tensor::zeros(&shape),
                };
                leaves.push((id, t));
            }
        }
        Ok(Gradients {
            tape: self.id,
            leaves,
        })
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.rg(v) {
            return None;
        }
        let n = self.value(v).len();
        Some(grads[v.id].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn propagate(
        &self,
        op: &Op<T>,
        out: &Tensor<T>,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2()?;
                let n = self.value(*b).dims2()?.1;
                if let Some(ga) = self.grad_slot(grads, *a) {
                    // dA = G · Bᵀ
                    kernels::matmul_nt_acc(g, self.value(*b).data(), m, n, k, ga);
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    // dB = Aᵀ · G
                    kernels::matmul_tn_acc(self.value(*a).data(), g, m, k, n, gb);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.value(*a).dims2()?;
                let n = self.value(*b).dims2()?.0;
                if let Some(ga) = self.grad_slot(grads, *a) {
                    // dA = G · B
                    kernels::matmul_nn_acc(g, self.value(*b).data(), m, n, k, ga);
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    // dB = Gᵀ · A
                    kernels::matmul_tn_acc(g, self.value(*a).data(), m, n, k, gb);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.grad_slot(grads, v) {
                        gv.iter_mut().zip(g).for_each(|(x, y)| *x += *y);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.grad_slot(grads, *a) {
                    ga.iter_mut()
                        .zip(g.iter().zip(vb))
                        .for_each(|(x, (gi, bi))| *x += *gi * *bi);
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    gb.iter_mut()
                        .zip(g.iter().zip(va))
                        .for_each(|(x, (gi, ai))| *x += *gi * *ai);
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += *y * *c);
                }
            }
            Op::Silu(a) => {
                let va = self.value(*a).data();
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for ((x, gi), &ai) in ga.iter_mut().zip(g).zip(va) {
                        let s = T::one() / (T::one() + (-ai).exp());
                        *x += *gi * s * (T::one() + ai * (T::one() - s));
                    }
                }
            }
            Op::RmsNorm { x, weight, inv_rms } => {
                let vx = self.value(*x);
                let vw = self.value(*weight).data();
                let (rows, cols) = vx.dims2()?;
                let n = T::from_f64(cols as f64);
                if let Some(gw) = self.grad_slot(grads, *weight) {
                    for r in 0..rows {
                        let xr = vx.row(r);
                        let gr = &g[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            gw[c] += gr[c] * xr[c] * inv_rms[r];
                        }
                    }
                }
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for r in 0..rows {
                        let xr = vx.row(r);
                        let gr = &g[r * cols..(r + 1) * cols];
                        let inv = inv_rms[r];
                        let mut gxw = T::zero();
                        for c in 0..cols {
                            gxw += gr[c] * vw[c] * xr[c];
                        }
                        let k = inv * inv * inv * gxw / n;
                        let out = &mut gx[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            out[c] += inv * gr[c] * vw[c] - k * xr[c];
                        }
                    }
                }
            }
            Op::Rope {
                x,
                positions,
                heads,
                base,
            } => {
                if let Some(gx) = self.grad_slot(grads, *x) {
                    let cols = out.dims2()?.1;
                    let mut back = g.to_vec();
                    rotate_rows(&mut back, positions, *heads, cols / heads, *base, true);
                    gx.iter_mut().zip(&back).for_each(|(a, b)| *a += *b);
                }
            }
            Op::Softmax(x) => {
                if let Some(gx) = self.grad_slot(grads, *x) {
                    let (rows, cols) = out.dims2()?;
                    for r in 0..rows {
                        let y = out.row(r);
                        let gr = &g[r * cols..(r + 1) * cols];
                        let inner = kernels::dot(y, gr);
                        let o = &mut gx[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            o[c] += y[c] * (gr[c] - inner);
                        }
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let (rows, len) = out.dims2()?;
                let cols = self.value(*x).dims2()?.1;
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for r in 0..rows {
                        let dst = &mut gx[r * cols + start..r * cols + start + len];
                        dst.iter_mut()
                            .zip(&g[r * len..(r + 1) * len])
                            .for_each(|(a, b)| *a += *b);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = out.dims2()?;
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).dims2()?.1;
                    if let Some(gp) = self.grad_slot(grads, p) {
                        for r in 0..rows {
                            let src = &g[r * total + offset..r * total + offset + w];
                            gp[r * w..(r + 1) * w]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(a, b)| *a += *b);
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if let Some(gp) = self.grad_slot(grads, p) {
                        gp.iter_mut()
                            .zip(&g[offset..offset + n])
                            .for_each(|(a, b)| *a += *b);
                    }
                    offset += n;
                }
            }
            Op::GatherRows { x, index } => {
                let cols = out.dims2()?.1;
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for (r, &i) in index.iter().enumerate() {
                        let dst = &mut gx[i * cols..(i + 1) * cols];
                        dst.iter_mut()
                            .zip(&g[r * cols..(r + 1) * cols])
                            .for_each(|(a, b)| *a += *b);
                    }
                }
            }
            Op::ScatterRows(parts) => {
                let cols = out.dims2()?.1;
                for (p, idx) in parts {
                    if let Some(gp) = self.grad_slot(grads, *p) {
                        for (r, &i) in idx.iter().enumerate() {
                            let dst = &mut gp[r * cols..(r + 1) * cols];
                            dst.iter_mut()
                                .zip(&g[i * cols..(i + 1) * cols])
                                .for_each(|(a, b)| *a += *b);
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                if *count == 0 {
                    return Ok(());
                }
                let vocab = self.value(*logits).dims2()?.1;
                let scale = g[0] / T::from_f64(*count as f64);
                if let Some(gl) = self.grad_slot(grads, *logits) {
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = t else { continue };
                        let p = &probs[r * vocab..(r + 1) * vocab];
                        let o = &mut gl[r * vocab..(r + 1) * vocab];
                        for c in 0..vocab {
                            o[c] += scale * p[c];
                        }
                        o[*t] -= scale;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.grad_slot(grads, *x) {
                    gx.iter_mut().for_each(|a| *a += g[0]);
                }
            }
        }
        Ok(())
    }
}

/// Applies (or, with `inverse`, undoes) the rotary rotation in place.
fn rotate_rows<T: Scalar>(
    data: &mut [T],
    positions: &[usize],
    heads: usize,
    d: usize,
    base: f64,
    inverse: bool,
) {
    let cols = heads * d;
    let half = d / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|j| base.powf(-2.0 * j as f64 / d as f64))
        .collect();
    for (r, &p) in positions.iter().enumerate() {
        if p == 0 {
            continue;
        }
        let trig: Vec<(T, T)> = freqs
            .iter()
            .map(|f| {
                let (s, c) = (p as f64 * f).sin_cos();
                (T::from_f64(c), T::from_f64(if inverse { -s } else { s }))
            })
            .collect();
        let row = &mut data[r * cols..(r + 1) * cols];
        for h in 0..heads {
            let head = &mut row[h * d..(h + 1) * d];
            for (j, &(c, s)) in trig.iter().enumerate() {
                let (x0, x1) = (head[2 * j], head[2 * j + 1]);
                head[2 * j] = x0 * c - x1 * s;
                head[2 * j + 1] = x0 * s + x1 * c;
            }
        }
    }
}
