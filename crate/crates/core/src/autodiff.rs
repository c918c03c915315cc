//! Reverse-mode automatic differentiation over 2-D tensors.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value and
//! the recipe for its vector-Jacobian product. [`Graph::backward`] walks the
//! tape once in reverse. Graphs are cheap to build and are discarded after each
//! step; parameters are re-bound as leaves every time.

use std::cell::RefCell;
use std::rc::Rc;

use crate::scalar::Real;
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-row rotation table for rotary embeddings: `cos`/`sin` are `rows × half`.
#[derive(Debug, Clone)]
pub struct RotaryTable<T> {
    pub cos: Vec<T>,
    pub sin: Vec<T>,
    pub half: usize,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    Silu(Var),
    Tanh(Var),
    RmsNorm(Var, Vec<T>),
    Softmax(Var),
    Rotary(Var, Rc<RotaryTable<T>>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Rc<Vec<usize>>),
    ScatterRows(Vec<(Var, Rc<Vec<usize>>)>),
    Transpose(Var),
    Sum(Var),
    SumCols(Var),
    Clamp(Var, T, T),
    SmoothL1(Var, T),
    MulScalar(Var, Var),
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn shape2<T: Real>(t: &Tensor<T>) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::with_capacity(1024)) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op, needs_grad });
        Var(nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    /// Clones the value out of the graph.
    pub fn tensor(&self, v: Var) -> Tensor<T> {
        (*self.value(v)).clone()
    }

    pub fn scalar(&self, v: Var) -> T {
        self.value(v).data()[0]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        shape2(&self.value(v))
    }

    /// A trainable leaf. 1-D tensors are viewed as `1 × n` rows.
    pub fn param(&self, t: Tensor<T>) -> Var {
        let t = as_matrix(t);
        self.push(t, Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&self, t: Tensor<T>) -> Var {
        let t = as_matrix(t);
        self.push(t, Op::Leaf, false)
    }

    /// Stops gradient flow: a constant copy of `v`'s value.
    pub fn detach(&self, v: Var) -> Var {
        let t = self.tensor(v);
        self.push(t, Op::Leaf, false)
    }

    pub fn scalar_const(&self, x: T) -> Var {
        self.constant(Tensor::scalar(x))
    }

    fn unary_needs(&self, a: Var) -> bool {
        self.needs(a)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let (n, k) = shape2(&va);
        let (k2, m) = shape2(&vb);
        assert_eq!(k, k2, "matmul inner dims {n}x{k} · {k2}x{m}");
        let mut out = vec![T::zero(); n * m];
        gemm_nn(va.data(), vb.data(), n, k, m, &mut out);
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::from_vec(&[n, m], out).unwrap(), Op::MatMul(a, b), needs)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let (n, k) = shape2(&va);
        let (m, k2) = shape2(&vb);
        assert_eq!(k, k2, "matmul_nt inner dims");
        let mut out = vec![T::zero(); n * m];
        gemm_nt(va.data(), vb.data(), n, k, m, &mut out);
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::from_vec(&[n, m], out).unwrap(), Op::MatMulNT(a, b), needs)
    }

    fn binary(&self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(shape2(&va), shape2(&vb), "elementwise shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let (r, c) = shape2(&va);
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::from_vec(&[r, c], data).unwrap(), op, needs)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a `1 × c` row to every row of `a`.
    pub fn add_row(&self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        let (r, c) = shape2(&va);
        assert_eq!(vr.len(), c, "add_row width");
        let mut data = va.data().to_vec();
        for chunk in data.chunks_mut(c) {
            for (x, &b) in chunk.iter_mut().zip(vr.data()) {
                *x += b;
            }
        }
        let needs = self.needs(a) || self.needs(row);
        self.push(Tensor::from_vec(&[r, c], data).unwrap(), Op::AddRow(a, row), needs)
    }

    /// Multiplies every row of `a` elementwise by a `1 × c` row.
    pub fn mul_row(&self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        let (r, c) = shape2(&va);
        assert_eq!(vr.len(), c, "mul_row width");
        let mut data = va.data().to_vec();
        for chunk in data.chunks_mut(c) {
            for (x, &b) in chunk.iter_mut().zip(vr.data()) {
                *x *= b;
            }
        }
        let needs = self.needs(a) || self.needs(row);
        self.push(Tensor::from_vec(&[r, c], data).unwrap(), Op::MulRow(a, row), needs)
    }

    pub fn scale(&self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x * s);
        let needs = self.unary_needs(a);
        self.push(v, Op::Scale(a, s), needs)
    }

    /// Multiplies `a` by a `1 × 1` variable.
    pub fn mul_scalar(&self, a: Var, s: Var) -> Var {
        let sv = self.scalar(s);
        let v = self.value(a).map(|x| x * sv);
        let needs = self.needs(a) || self.needs(s);
        self.push(v, Op::MulScalar(a, s), needs)
    }

    pub fn silu(&self, a: Var) -> Var {
        let v = self.value(a).map(|x| x / (T::one() + (-x).exp()));
        let needs = self.unary_needs(a);
        self.push(v, Op::Silu(a), needs)
    }

    pub fn tanh(&self, a: Var) -> Var {
        let v = self.value(a).map(T::tanh);
        let needs = self.unary_needs(a);
        self.push(v, Op::Tanh(a), needs)
    }

    /// Row-wise RMS normalisation without gain.
    pub fn rms_norm(&self, a: Var) -> Var {
        let va = self.value(a);
        let (r, c) = shape2(&va);
        let eps = T::lit(1e-6);
        let mut inv = Vec::with_capacity(r);
        let mut data = Vec::with_capacity(r * c);
        for row in va.data().chunks(c) {
            let ms = row.iter().map(|&x| x * x).sum::<T>() / T::from_usize(c).unwrap();
            let iv = T::one() / (ms + eps).sqrt();
            inv.push(iv);
            data.extend(row.iter().map(|&x| x * iv));
        }
        let needs = self.unary_needs(a);
        self.push(Tensor::from_vec(&[r, c], data).unwrap(), Op::RmsNorm(a, inv), needs)
    }

    /// Row-wise softmax. `mask[i*c + j] == false` excludes entry `j` from row `i`;
    /// a row with no permitted entries yields zeros.
    pub fn softmax(&self, a: Var, mask: Option<&[bool]>) -> Var {
        let va = self.value(a);
        let (r, c) = shape2(&va);
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            let row = &va.data()[i * c..(i + 1) * c];
            let allowed = |j: usize| mask.map_or(true, |m| m[i * c + j]);
            let mut mx = T::neg_infinity();
            for (j, &x) in row.iter().enumerate() {
                if allowed(j) && x > mx {
                    mx = x;
                }
            }
            if mx == T::neg_infinity() {
                continue;
            }
            let out = &mut data[i * c..(i + 1) * c];
            let mut z = T::zero();
            for (j, &x) in row.iter().enumerate() {
                if allowed(j) {
                    let e = (x - mx).exp();
                    out[j] = e;
                    z += e;
                }
            }
            for o in out.iter_mut() {
                *o /= z;
            }
        }
        let needs = self.unary_needs(a);
        self.push(Tensor::from_vec(&[r, c], data).unwrap(), Op::Softmax(a), needs)
    }

    /// Rotates column pairs `(i, i + half)` of every `2·half`-wide head block.
    pub fn rotary(&self, a: Var, table: Rc<RotaryTable<T>>) -> Var {
        let va = self.value(a);
        let (r, c) = shape2(&va);
        let half = table.half;
        assert_eq!(c % (2 * half), 0, "rotary width");
        assert_eq!(table.cos.len(), r * half, "rotary rows");
        let mut data = va.data().to_vec();
        for i in 0..r {
            let (cs, sn) = (&table.cos[i * half..(i + 1) * half], &table.sin[i * half..(i + 1) * half]);
            for head in data[i * c..(i + 1) * c].chunks_mut(2 * half) {
                for p in 0..half {
                    let (x1, x2) = (head[p], head[p + half]);
                    head[p] = x1 * cs[p] - x2 * sn[p];
                    head[p + half] = x1 * sn[p] + x2 * cs[p];
                }
            }
        }
        let needs = self.unary_needs(a);
        self.push(Tensor::from_vec(&[r, c], data).unwrap(), Op::Rotary(a, table), needs)
    }

    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Var {
        let va = self.value(a);
        let (r, c) = shape2(&va);
        assert!(start + len <= c, "slice_cols out of range");
        let mut data = Vec::with_capacity(r * len);
        for row in va.data().chunks(c) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let needs = self.unary_needs(a);
        self.push(Tensor::from_vec(&[r, len], data).unwrap(), Op::SliceCols(a, start), needs)
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let r = vals[0].rows();
        assert!(vals.iter().all(|v| v.rows() == r), "concat_cols rows");
        let c: usize = vals.iter().map(|v| v.cols()).sum();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for v in &vals {
                data.extend_from_slice(v.row(i));
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(Tensor::from_vec(&[r, c], data).unwrap(), Op::ConcatCols(parts.to_vec()), needs)
    }

    pub fn slice_rows(&self, a: Var, start: usize, len: usize) -> Var {
        let va = self.value(a);
        let (r, c) = shape2(&va);
        assert!(start + len <= r, "slice_rows out of range");
        let data = va.data()[start * c..(start + len) * c].to_vec();
        let needs = self.unary_needs(a);
        self.push(Tensor::from_vec(&[len, c], data).unwrap(), Op::SliceRows(a, start), needs)
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let c = vals[0].cols();
        assert!(vals.iter().all(|v| v.cols() == c), "concat_rows cols");
        let r: usize = vals.iter().map(|v| v.rows()).sum();
        let mut data = Vec::with_capacity(r * c);
        for v in &vals {
            data.extend_from_slice(v.data());
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(Tensor::from_vec(&[r, c], data).unwrap(), Op::ConcatRows(parts.to_vec()), needs)
    }

    pub fn gather_rows(&self, a: Var, idx: Rc<Vec<usize>>) -> Var {
        let va = self.value(a);
        let c = va.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            data.extend_from_slice(va.row(i));
        }
        let needs = self.unary_needs(a);
        self.push(Tensor::from_vec(&[idx.len(), c], data).unwrap(), Op::GatherRows(a, idx), needs)
    }

    /// Inverse of a partition into gathers: row `idx[k]` of the output is row `k` of the part.
    pub fn scatter_rows(&self, parts: &[(Var, Rc<Vec<usize>>)], rows: usize) -> Var {
        let c = parts.iter().map(|(p, _)| self.value(*p).cols()).next().unwrap_or(0);
        let mut data = vec![T::zero(); rows * c];
        for (p, idx) in parts {
            let v = self.value(*p);
            for (k, &i) in idx.iter().enumerate() {
                data[i * c..(i + 1) * c].copy_from_slice(v.row(k));
            }
        }
        let needs = parts.iter().any(|(p, _)| self.needs(*p));
        self.push(Tensor::from_vec(&[rows, c], data).unwrap(), Op::ScatterRows(parts.to_vec()), needs)
    }

    pub fn transpose(&self, a: Var) -> Var {
        let v = self.value(a).transpose();
        let needs = self.unary_needs(a);
        self.push(v, Op::Transpose(a), needs)
    }

    pub fn sum(&self, a: Var) -> Var {
        let s = self.value(a).sum();
        let needs = self.unary_needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), needs)
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum(a);
        self.scale(s, T::one() / T::from_usize(n.max(1)).unwrap())
    }

    /// Row sums: `r × c → r × 1`.
    pub fn sum_cols(&self, a: Var) -> Var {
        let va = self.value(a);
        let (r, c) = shape2(&va);
        let data = va.data().chunks(c).map(|row| row.iter().copied().sum()).collect();
        let needs = self.unary_needs(a);
        self.push(Tensor::from_vec(&[r, 1], data).unwrap(), Op::SumCols(a), needs)
    }

    /// Clamps into `[lo, hi]`; gradient is zero where the clamp is active.
    pub fn clamp(&self, a: Var, lo: T, hi: T) -> Var {
        let v = self.value(a).map(|x| x.max(lo).min(hi));
        let needs = self.unary_needs(a);
        self.push(v, Op::Clamp(a, lo, hi), needs)
    }

    /// Elementwise smooth-ℓ1 (Huber with transition `beta`).
    pub fn smooth_l1(&self, a: Var, beta: T) -> Var {
        let half = T::lit(0.5);
        let v = self.value(a).map(|d| {
            let ad = d.abs();
            if ad < beta {
                half * d * d / beta
            } else {
                ad - half * beta
            }
        });
        let needs = self.unary_needs(a);
        self.push(v, Op::SmoothL1(a, beta), needs)
    }

    /// Mean squared value, a common loss reduction.
    pub fn mean_square(&self, a: Var) -> Var {
        let sq = self.mul(a, a);
        self.mean(sq)
    }

    /// Reverse pass from a `1 × 1` output.
    pub fn backward(&self, out: Var) -> Gradients<T> {
        let seed = Tensor::full(&[1, 1], T::one());
        self.backward_with(out, seed)
    }

    /// Reverse pass seeded with an arbitrary cotangent for `out`.
    pub fn backward_with(&self, out: Var, seed: Tensor<T>) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        assert_eq!(seed.len(), nodes[out.0].value.len(), "seed shape");
        let shape = nodes[out.0].value.shape().to_vec();
        grads[out.0] = Some(seed.reshape(&shape).unwrap());

        fn acc<T: Real>(grads: &mut [Option<Tensor<T>>], nodes: &[Node<T>], v: Var, g: Tensor<T>) {
            if !nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign_scaled(&g, T::one()),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=out.0).rev() {
            let Some(gout) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                grads[idx] = Some(gout);
                continue;
            }
            let (r, c) = shape2(&node.value);
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (n, k) = shape2(va);
                    let m = vb.cols();
                    if nodes[a.0].needs_grad {
                        let mut ga = vec![T::zero(); n * k];
                        gemm_nt(gout.data(), vb.data(), n, m, k, &mut ga);
                        acc(&mut grads, &nodes, *a, Tensor::from_vec(&[n, k], ga).unwrap());
                    }
                    if nodes[b.0].needs_grad {
                        let mut gb = vec![T::zero(); k * m];
                        gemm_tn(va.data(), gout.data(), n, k, m, &mut gb);
                        acc(&mut grads, &nodes, *b, Tensor::from_vec(&[k, m], gb).unwrap());
                    }
                }
                Op::MatMulNT(a, b) => {
                    let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (n, k) = shape2(va);
                    let m = vb.rows();
                    if nodes[a.0].needs_grad {
                        let mut ga = vec![T::zero(); n * k];
                        gemm_nn(gout.data(), vb.data(), n, m, k, &mut ga);
                        acc(&mut grads, &nodes, *a, Tensor::from_vec(&[n, k], ga).unwrap());
                    }
                    if nodes[b.0].needs_grad {
                        let mut gb = vec![T::zero(); m * k];
                        gemm_tn(gout.data(), va.data(), n, m, k, &mut gb);
                        acc(&mut grads, &nodes, *b, Tensor::from_vec(&[m, k], gb).unwrap());
                    }
                }
                Op::Add(a, b) => {
                    acc(&mut grads, &nodes, *a, gout.clone());
                    acc(&mut grads, &nodes, *b, gout);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, &nodes, *b, gout.map(|x| -x));
                    acc(&mut grads, &nodes, *a, gout);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                    if nodes[a.0].needs_grad {
                        acc(&mut grads, &nodes, *a, gout.zip_map(vb, |g, y| g * y).unwrap());
                    }
                    if nodes[b.0].needs_grad {
                        acc(&mut grads, &nodes, *b, gout.zip_map(va, |g, x| g * x).unwrap());
                    }
                }
                Op::AddRow(a, row) => {
                    if nodes[row.0].needs_grad {
                        let mut gr = vec![T::zero(); c];
                        for chunk in gout.data().chunks(c) {
                            for (s, &g) in gr.iter_mut().zip(chunk) {
                                *s += g;
                            }
                        }
                        let shape = nodes[row.0].value.shape().to_vec();
                        acc(&mut grads, &nodes, *row, Tensor::from_vec(&shape, gr).unwrap());
                    }
                    acc(&mut grads, &nodes, *a, gout);
                }
                Op::MulRow(a, row) => {
                    let (va, vr) = (&nodes[a.0].value, &nodes[row.0].value);
                    if nodes[row.0].needs_grad {
                        let mut gr = vec![T::zero(); c];
                        for (gch, xch) in gout.data().chunks(c).zip(va.data().chunks(c)) {
                            for ((s, &g), &x) in gr.iter_mut().zip(gch).zip(xch) {
                                *s += g * x;
                            }
                        }
                        let shape = vr.shape().to_vec();
                        acc(&mut grads, &nodes, *row, Tensor::from_vec(&shape, gr).unwrap());
                    }
                    if nodes[a.0].needs_grad {
                        let mut ga = gout.into_data();
                        for chunk in ga.chunks_mut(c) {
                            for (g, &w) in chunk.iter_mut().zip(vr.data()) {
                                *g *= w;
                            }
                        }
                        acc(&mut grads, &nodes, *a, Tensor::from_vec(&[r, c], ga).unwrap());
                    }
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    acc(&mut grads, &nodes, *a, gout.map(|g| g * s));
                }
                Op::MulScalar(a, s) => {
                    let sv = nodes[s.0].value.data()[0];
                    if nodes[s.0].needs_grad {
                        let va = &nodes[a.0].value;
                        let gs: T = gout.data().iter().zip(va.data()).map(|(&g, &x)| g * x).sum();
                        acc(&mut grads, &nodes, *s, Tensor::scalar(gs));
                    }
                    acc(&mut grads, &nodes, *a, gout.map(|g| g * sv));
                }
                Op::Silu(a) => {
                    let va = &nodes[a.0].value;
                    let g = gout
                        .zip_map(va, |g, x| {
                            let s = T::one() / (T::one() + (-x).exp());
                            g * (s + x * s * (T::one() - s))
                        })
                        .unwrap();
                    acc(&mut grads, &nodes, *a, g);
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let g = gout.zip_map(y, |g, y| g * (T::one() - y * y)).unwrap();
                    acc(&mut grads, &nodes, *a, g);
                }
                Op::RmsNorm(a, inv) => {
                    // y = x·s, s = (mean(x²)+eps)^-1/2; dx = s·(g − y·mean(g·y))
                    let y = &node.value;
                    let cn = T::from_usize(c).unwrap();
                    let mut gx = Vec::with_capacity(r * c);
                    for i in 0..r {
                        let (gr, yr) = (&gout.data()[i * c..(i + 1) * c], &y.data()[i * c..(i + 1) * c]);
                        let m: T = gr.iter().zip(yr).map(|(&g, &y)| g * y).sum::<T>() / cn;
                        gx.extend(gr.iter().zip(yr).map(|(&g, &y)| inv[i] * (g - y * m)));
                    }
                    acc(&mut grads, &nodes, *a, Tensor::from_vec(&[r, c], gx).unwrap());
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut gx = vec![T::zero(); r * c];
                    for i in 0..r {
                        let (gr, yr) = (&gout.data()[i * c..(i + 1) * c], &y.data()[i * c..(i + 1) * c]);
                        let d: T = gr.iter().zip(yr).map(|(&g, &y)| g * y).sum();
                        for j in 0..c {
                            gx[i * c + j] = yr[j] * (gr[j] - d);
                        }
                    }
                    acc(&mut grads, &nodes, *a, Tensor::from_vec(&[r, c], gx).unwrap());
                }
                Op::Rotary(a, table) => {
                    let half = table.half;
                    let mut gx = gout.into_data();
                    for i in 0..r {
                        let (cs, sn) =
                            (&table.cos[i * half..(i + 1) * half], &table.sin[i * half..(i + 1) * half]);
                        for head in gx[i * c..(i + 1) * c].chunks_mut(2 * half) {
                            for p in 0..half {
                                let (g1, g2) = (head[p], head[p + half]);
                                head[p] = g1 * cs[p] + g2 * sn[p];
                                head[p + half] = -g1 * sn[p] + g2 * cs[p];
                            }
                        }
                    }
                    acc(&mut grads, &nodes, *a, Tensor::from_vec(&[r, c], gx).unwrap());
                }
                Op::SliceCols(a, start) => {
                    let ac = nodes[a.0].value.cols();
                    let mut gx = vec![T::zero(); r * ac];
                    for i in 0..r {
                        gx[i * ac + start..i * ac + start + c].copy_from_slice(&gout.data()[i * c..(i + 1) * c]);
                    }
                    acc(&mut grads, &nodes, *a, Tensor::from_vec(&[r, ac], gx).unwrap());
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let pc = nodes[p.0].value.cols();
                        if nodes[p.0].needs_grad {
                            let mut gp = Vec::with_capacity(r * pc);
                            for i in 0..r {
                                gp.extend_from_slice(&gout.data()[i * c + off..i * c + off + pc]);
                            }
                            acc(&mut grads, &nodes, *p, Tensor::from_vec(&[r, pc], gp).unwrap());
                        }
                        off += pc;
                    }
                }
                Op::SliceRows(a, start) => {
                    let ar = nodes[a.0].value.rows();
                    let mut gx = vec![T::zero(); ar * c];
                    gx[start * c..(start + r) * c].copy_from_slice(gout.data());
                    acc(&mut grads, &nodes, *a, Tensor::from_vec(&[ar, c], gx).unwrap());
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let pr = nodes[p.0].value.rows();
                        if nodes[p.0].needs_grad {
                            let gp = gout.data()[off * c..(off + pr) * c].to_vec();
                            acc(&mut grads, &nodes, *p, Tensor::from_vec(&[pr, c], gp).unwrap());
                        }
                        off += pr;
                    }
                }
                Op::GatherRows(a, idx) => {
                    let ar = nodes[a.0].value.rows();
                    let mut gx = vec![T::zero(); ar * c];
                    for (k, &i) in idx.iter().enumerate() {
                        for j in 0..c {
                            gx[i * c + j] += gout.data()[k * c + j];
                        }
                    }
                    acc(&mut grads, &nodes, *a, Tensor::from_vec(&[ar, c], gx).unwrap());
                }
                Op::ScatterRows(parts) => {
                    for (p, idx) in parts {
                        if !nodes[p.0].needs_grad {
                            continue;
                        }
                        let mut gp = Vec::with_capacity(idx.len() * c);
                        for &i in idx.iter() {
                            gp.extend_from_slice(&gout.data()[i * c..(i + 1) * c]);
                        }
                        acc(&mut grads, &nodes, *p, Tensor::from_vec(&[idx.len(), c], gp).unwrap());
                    }
                }
                Op::Transpose(a) => {
                    acc(&mut grads, &nodes, *a, gout.transpose());
                }
                Op::Sum(a) => {
                    let g = gout.data()[0];
                    let shape = nodes[a.0].value.shape().to_vec();
                    acc(&mut grads, &nodes, *a, Tensor::full(&shape, g));
                }
                Op::SumCols(a) => {
                    let ac = nodes[a.0].value.cols();
                    let mut gx = Vec::with_capacity(r * ac);
                    for i in 0..r {
                        gx.extend(std::iter::repeat(gout.data()[i]).take(ac));
                    }
                    acc(&mut grads, &nodes, *a, Tensor::from_vec(&[r, ac], gx).unwrap());
                }
                Op::Clamp(a, lo, hi) => {
                    let va = &nodes[a.0].value;
                    let (lo, hi) = (*lo, *hi);
                    let g = gout
                        .zip_map(va, |g, x| if x < lo || x > hi { T::zero() } else { g })
                        .unwrap();
                    acc(&mut grads, &nodes, *a, g);
                }
                Op::SmoothL1(a, beta) => {
                    let va = &nodes[a.0].value;
                    let beta = *beta;
                    let g = gout
                        .zip_map(va, |g, d| if d.abs() < beta { g * d / beta } else { g * d.signum() })
                        .unwrap();
                    acc(&mut grads, &nodes, *a, g);
                }
            }
        }
        Gradients { grads }
    }
}

fn as_matrix<T: Real>(t: Tensor<T>) -> Tensor<T> {
    match t.shape().len() {
        2 => t,
        0 | 1 => {
            let n = t.len();
            t.reshape(&[1, n]).unwrap()
        }
        _ => {
            let (r, c) = (t.rows(), t.cols());
            t.reshape(&[r, c]).unwrap()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(r: usize, c: usize, seed: u64) -> Tensor<f64> {
        let data = (0..r * c).map(|i| ((i as f64 + 1.0) * (seed as f64 + 0.37)).sin()).collect();
        Tensor::from_vec(&[r, c], data).unwrap()
    }

    /// Finite-difference check of d(sum(w ⊙ f(x)))/dx for a single-input graph builder.
    fn check(build: impl Fn(&Graph<f64>, Var) -> Var, x0: Tensor<f64>) {
        let g = Graph::new();
        let x = g.param(x0.clone());
        let y = build(&g, x);
        let (yr, yc) = g.shape(y);
        let w = g.constant(t(yr, yc, 99));
        let loss = g.sum(g.mul(y, w));
        let grads = g.backward(loss);
        let ga = grads.get(x).unwrap().clone();
        let h = 1e-6;
        for i in 0..x0.len() {
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp.data_mut()[i] += delta;
                let g = Graph::new();
                let x = g.param(xp);
                let y = build(&g, x);
                let w = g.constant(t(yr, yc, 99));
                g.scalar(g.sum(g.mul(y, w)))
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = ga.data()[i];
            assert!((fd - an).abs() <= 1e-6 * (1.0 + an.abs()), "elem {i}: fd {fd} vs analytic {an}");
        }
    }

    #[test]
    fn elementwise_and_reduction_grads() {
        check(|g, x| g.silu(x), t(3, 4, 1));
        check(|g, x| g.tanh(x), t(3, 4, 2));
        check(|g, x| g.rms_norm(x), t(3, 4, 3));
        check(|g, x| g.softmax(x, None), t(3, 4, 4));
        check(|g, x| g.smooth_l1(g.scale(x, 3.0), 1.0), t(2, 5, 5));
        check(|g, x| g.sum_cols(x), t(3, 4, 6));
        check(|g, x| g.transpose(x), t(3, 4, 7));
        check(|g, x| g.mul(x, x), t(3, 4, 8));
    }

    #[test]
    fn structural_grads() {
        check(|g, x| g.slice_cols(x, 1, 2), t(3, 4, 1));
        check(|g, x| g.slice_rows(x, 1, 2), t(3, 4, 1));
        check(|g, x| g.concat_cols(&[x, g.silu(x)]), t(3, 4, 2));
        check(|g, x| g.concat_rows(&[g.tanh(x), x]), t(3, 4, 2));
        check(|g, x| g.gather_rows(x, Rc::new(vec![2, 0, 2])), t(3, 4, 3));
        check(
            |g, x| {
                let a = g.gather_rows(x, Rc::new(vec![0, 2]));
                let b = g.gather_rows(x, Rc::new(vec![1]));
                g.scatter_rows(&[(g.tanh(a), Rc::new(vec![0, 2])), (b, Rc::new(vec![1]))], 3)
            },
            t(3, 4, 4),
        );
    }

    #[test]
    fn matmul_and_broadcast_grads() {
        let w = t(4, 5, 11);
        check(move |g, x| g.matmul(x, g.constant(w.clone())), t(3, 4, 1));
        let a = t(3, 4, 12);
        check(move |g, x| g.matmul(g.constant(a.clone()), x), t(4, 2, 2));
        let b = t(5, 4, 13);
        check(move |g, x| g.matmul_nt(x, g.constant(b.clone())), t(3, 4, 3));
        let q = t(2, 4, 14);
        check(move |g, x| g.matmul_nt(g.constant(q.clone()), x), t(3, 4, 3));
        let m = t(3, 4, 15);
        check(move |g, x| g.add_row(g.constant(m.clone()), x), t(1, 4, 4));
        let m = t(3, 4, 16);
        check(move |g, x| g.mul_row(g.constant(m.clone()), x), t(1, 4, 5));
        check(|g, x| g.mul_row(x, g.slice_rows(x, 0, 1)), t(3, 4, 6));
        let m = t(3, 4, 17);
        check(move |g, x| g.mul_scalar(g.constant(m.clone()), g.slice_cols(x, 0, 1)), t(1, 2, 7));
    }

    #[test]
    fn masked_softmax_and_rotary_grads() {
        let mask = vec![true, false, true, true, true, true, false, false, true, true, false, true];
        check(move |g, x| g.softmax(x, Some(&mask)), t(3, 4, 9));
        let half = 2;
        let cos: Vec<f64> = (0..6).map(|i| (i as f64 * 0.7).cos()).collect();
        let sin: Vec<f64> = (0..6).map(|i| (i as f64 * 0.7).sin()).collect();
        let table = Rc::new(RotaryTable { cos, sin, half });
        check(move |g, x| g.rotary(x, Rc::clone(&table)), t(3, 8, 10));
    }

    #[test]
    fn masked_row_without_entries_is_zero() {
        let g = Graph::<f64>::new();
        let x = g.constant(t(2, 2, 1));
        let y = g.softmax(x, Some(&[false, false, true, false]));
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let g = Graph::<f64>::new();
        let c = g.constant(t(2, 2, 1));
        let p = g.param(t(2, 2, 2));
        let loss = g.sum(g.mul(c, p));
        let grads = g.backward(loss);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap().data(), g.value(c).data());
    }
}
