//! Reverse-mode differentiation over a tape of eagerly evaluated ops.
//!
//! Every op appends a node holding its output value and a closure that maps
//! the node's output gradient to contributions on its parents' gradients.
//! Parents always precede children on the tape, so a single reverse sweep in
//! insertion order is a valid topological traversal. A graph is built fresh
//! for each training step; [`Graph::backward`] may run once per graph and
//! errors on reuse, which catches accidental double-backward loops.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type BackwardFn<S> = Box<dyn Fn(&[Tensor<S>], &Tensor<S>, &mut [Option<Tensor<S>>])>;

pub struct Graph<S: Scalar> {
    values: Vec<Tensor<S>>,
    requires_grad: Vec<bool>,
    backward_fns: Vec<Option<BackwardFn<S>>>,
    grads: Vec<Option<Tensor<S>>>,
    consumed: bool,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn acc<S: Scalar>(grads: &mut [Option<Tensor<S>>], id: usize, delta: Tensor<S>) {
    match &mut grads[id] {
        Some(g) => {
            for (gi, &di) in g.data_mut().iter_mut().zip(delta.data()) {
                *gi = *gi + di;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

/// True iff `suffix` equals the trailing dims of `shape` (scalars always fit).
fn is_suffix(suffix: &[usize], shape: &[usize]) -> bool {
    suffix.len() <= shape.len() && shape[shape.len() - suffix.len()..] == *suffix
}

// Accumulating 2D matrix kernels. All three use fixed reduction orders so
// results are bit-deterministic for a given input.

/// out(m,n) += a(m,k) * b(k,n)
fn mm_nn<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let o_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o = *o + a_ip * bv;
            }
        }
    }
}

/// Eight-lane dot product; the lane sums combine in a fixed tree order.
fn dot<S: Scalar>(x: &[S], y: &[S]) -> S {
    let mut lanes = [S::zero(); 8];
    let chunks = x.len() / 8;
    for c in 0..chunks {
        let xs = &x[c * 8..c * 8 + 8];
        let ys = &y[c * 8..c * 8 + 8];
        for l in 0..8 {
            lanes[l] = lanes[l] + xs[l] * ys[l];
        }
    }
    for i in chunks * 8..x.len() {
        lanes[i % 8] = lanes[i % 8] + x[i] * y[i];
    }
    let a = (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]);
    let b = (lanes[4] + lanes[5]) + (lanes[6] + lanes[7]);
    a + b
}

/// out(m,n) += a(m,k) * b(n,k)^T
fn mm_nt<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let o_row = &mut out[i * n..(i + 1) * n];
        for (j, o) in o_row.iter_mut().enumerate() {
            *o = *o + dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

/// out(k,n) += a(m,k)^T * b(m,n)
fn mm_tn<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let o_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o = *o + a_ip * bv;
            }
        }
    }
}

/// Per-dim broadcast of two batch shapes plus flat source offsets (in units
/// of one matrix) for every output batch index.
fn broadcast_batches(
    op: &'static str,
    a_full: &[usize],
    b_full: &[usize],
    a_batch: &[usize],
    b_batch: &[usize],
) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let rank = a_batch.len().max(b_batch.len());
    let pad = |s: &[usize]| -> Vec<usize> {
        let mut v = vec![1; rank - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (pa, pb) = (pad(a_batch), pad(b_batch));
    let mut out = Vec::with_capacity(rank);
    for d in 0..rank {
        out.push(match (pa[d], pb[d]) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::ShapeMismatch {
                    op,
                    lhs: a_full.to_vec(),
                    rhs: b_full.to_vec(),
                })
            }
        });
    }
    let count = numel(&out);
    let strides = |s: &[usize]| -> Vec<usize> {
        let mut st = vec![1; rank];
        for d in (0..rank.saturating_sub(1)).rev() {
            st[d] = st[d + 1] * s[d + 1];
        }
        st
    };
    let (sa, sb) = (strides(&pa), strides(&pb));
    let mut a_off = Vec::with_capacity(count);
    let mut b_off = Vec::with_capacity(count);
    for flat in 0..count {
        let (mut rem, mut ao, mut bo) = (flat, 0, 0);
        for d in 0..rank {
            let extent: usize = out[d + 1..].iter().product();
            let ix = rem / extent.max(1);
            rem %= extent.max(1);
            if pa[d] != 1 {
                ao += ix * sa[d];
            }
            if pb[d] != 1 {
                bo += ix * sb[d];
            }
        }
        a_off.push(ao);
        b_off.push(bo);
    }
    Ok((out, a_off, b_off))
}

fn permute_tensor<S: Scalar>(t: &Tensor<S>, axes: &[usize]) -> Tensor<S> {
    let in_shape = t.shape();
    let rank = in_shape.len();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * in_shape[d + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = vec![S::zero(); t.numel()];
    let mut idx = vec![0usize; rank];
    let mut in_off = 0usize;
    let src = t.data();
    for o in out.iter_mut() {
        *o = src[in_off];
        for d in (0..rank).rev() {
            idx[d] += 1;
            in_off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            in_off -= strides[d] * out_shape[d];
        }
    }
    Tensor::new(out_shape, out).expect("permute preserves element count")
}

fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

fn softplus<S: Scalar>(x: S) -> S {
    // max(x, 0) + ln(1 + e^-|x|), stable for large |x|.
    x.max(S::zero()) + (-x.abs()).exp().ln_1p()
}

/// Standard normal CDF via the exact error function.
fn phi_cdf<S: Scalar>(x: S) -> S {
    let half = S::from_f64(0.5);
    let inv_sqrt2 = S::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    half * (S::one() + Scalar::erf(x * inv_sqrt2))
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            values: Vec::new(),
            requires_grad: Vec::new(),
            backward_fns: Vec::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    fn push(&mut self, value: Tensor<S>, rg: bool, bw: Option<BackwardFn<S>>) -> Var {
        self.values.push(value);
        self.requires_grad.push(rg);
        self.backward_fns.push(bw);
        Var(self.values.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.requires_grad[v.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Constant input excluded from differentiation.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, false, None)
    }

    /// Trainable leaf; receives a gradient from `backward`.
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.push(value, true, None)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.values[v.0]
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Reverse accumulation from a scalar loss. Leaf gradients are retained
    /// for retrieval; interior gradients are dropped as soon as consumed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        let lt = &self.values[loss.0];
        if !lt.is_scalar() {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<S>>> = Vec::new();
        grads.resize_with(self.values.len(), || None);
        grads[loss.0] = Some(Tensor::full(lt.shape(), S::one()));
        for i in (0..=loss.0).rev() {
            if grads[i].is_none() {
                continue;
            }
            if let Some(bw) = &self.backward_fns[i] {
                let g = grads[i].take().expect("checked above");
                bw(&self.values, &g, &mut grads);
            }
        }
        self.grads = grads;
        Ok(())
    }

    /// Elementwise sum; `b` may be any trailing-suffix shape of `a` (a bias
    /// row, a scalar) and is then repeated over the leading dims.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.values[a.0], &self.values[b.0]);
        if !is_suffix(bv.shape(), av.shape()) {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let blen = bv.numel().max(1);
        let mut out = av.clone();
        for chunk in out.data_mut().chunks_exact_mut(blen) {
            for (o, &x) in chunk.iter_mut().zip(bv.data()) {
                *o = *o + x;
            }
        }
        let (rga, rgb) = (self.rg(a), self.rg(b));
        let bw: Option<BackwardFn<S>> = if rga || rgb {
            let (ai, bi) = (a.0, b.0);
            let b_shape = bv.shape().to_vec();
            Some(Box::new(move |_vals, g, grads| {
                if rga {
                    acc(grads, ai, g.clone());
                }
                if rgb {
                    let mut db = Tensor::zeros(&b_shape);
                    let blen = db.numel().max(1);
                    for chunk in g.data().chunks_exact(blen) {
                        for (d, &x) in db.data_mut().iter_mut().zip(chunk) {
                            *d = *d + x;
                        }
                    }
                    acc(grads, bi, db);
                }
            }))
        } else {
            None
        };
        Ok(self.push(out, rga || rgb, bw))
    }

    /// Elementwise difference of same-shape tensors.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.values[a.0], &self.values[b.0]);
        if av.shape() != bv.shape() {
            return Err(Error::ShapeMismatch {
                op: "sub",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let mut out = av.clone();
        for (o, &x) in out.data_mut().iter_mut().zip(bv.data()) {
            *o = *o - x;
        }
        let (rga, rgb) = (self.rg(a), self.rg(b));
        let bw: Option<BackwardFn<S>> = if rga || rgb {
            let (ai, bi) = (a.0, b.0);
            Some(Box::new(move |_vals, g, grads| {
                if rga {
                    acc(grads, ai, g.clone());
                }
                if rgb {
                    acc(grads, bi, g.map(|x| -x));
                }
            }))
        } else {
            None
        };
        Ok(self.push(out, rga || rgb, bw))
    }

    /// Elementwise product; `b` broadcasts like in [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.values[a.0], &self.values[b.0]);
        if !is_suffix(bv.shape(), av.shape()) {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let blen = bv.numel().max(1);
        let mut out = av.clone();
        for chunk in out.data_mut().chunks_exact_mut(blen) {
            for (o, &x) in chunk.iter_mut().zip(bv.data()) {
                *o = *o * x;
            }
        }
        let (rga, rgb) = (self.rg(a), self.rg(b));
        let bw: Option<BackwardFn<S>> = if rga || rgb {
            let (ai, bi) = (a.0, b.0);
            let b_shape = bv.shape().to_vec();
            Some(Box::new(move |vals, g, grads| {
                let (av, bv) = (&vals[ai], &vals[bi]);
                let blen = bv.numel().max(1);
                if rga {
                    let mut da = g.clone();
                    for chunk in da.data_mut().chunks_exact_mut(blen) {
                        for (d, &x) in chunk.iter_mut().zip(bv.data()) {
                            *d = *d * x;
                        }
                    }
                    acc(grads, ai, da);
                }
                if rgb {
                    let mut db = Tensor::zeros(&b_shape);
                    for (gchunk, achunk) in g
                        .data()
                        .chunks_exact(blen)
                        .zip(av.data().chunks_exact(blen))
                    {
                        for ((d, &gv), &xv) in
                            db.data_mut().iter_mut().zip(gchunk).zip(achunk)
                        {
                            *d = *d + gv * xv;
                        }
                    }
                    acc(grads, bi, db);
                }
            }))
        } else {
            None
        };
        Ok(self.push(out, rga || rgb, bw))
    }

    /// Multiplication by a compile-time constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let cs = S::from_f64(c);
        let out = self.values[a.0].map(|x| x * cs);
        let rga = self.rg(a);
        let bw: Option<BackwardFn<S>> = if rga {
            let ai = a.0;
            Some(Box::new(move |_vals, g, grads| {
                acc(grads, ai, g.map(|x| x * cs));
            }))
        } else {
            None
        };
        self.push(out, rga, bw)
    }

    /// Batched matrix product `a[.., m, k] * b[.., k, n]`; leading batch dims
    /// broadcast elementwise.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// Batched product against a transposed right operand:
    /// `a[.., m, k] * b[.., n, k]^T -> [.., m, n]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let op = if transpose_b { "matmul_nt" } else { "matmul" };
        let (av, bv) = (&self.values[a.0], &self.values[b.0]);
        let (ash, bsh) = (av.shape().to_vec(), bv.shape().to_vec());
        if ash.len() < 2 || bsh.len() < 2 {
            return Err(Error::ShapeMismatch {
                op,
                lhs: ash,
                rhs: bsh,
            });
        }
        let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let (n, k2) = if transpose_b {
            (bsh[bsh.len() - 2], bsh[bsh.len() - 1])
        } else {
            (bsh[bsh.len() - 1], bsh[bsh.len() - 2])
        };
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op,
                lhs: ash,
                rhs: bsh,
            });
        }
        let (batch, a_off, b_off) = broadcast_batches(
            op,
            &ash,
            &bsh,
            &ash[..ash.len() - 2],
            &bsh[..bsh.len() - 2],
        )?;
        let mut out_shape = batch.clone();
        out_shape.extend_from_slice(&[m, n]);
        let mut out = Tensor::zeros(&out_shape);
        {
            let (ad, bd, od) = (av.data(), bv.data(), out.data_mut());
            for (ob, (&ao, &bo)) in a_off.iter().zip(&b_off).enumerate() {
                let a_mat = &ad[ao * m * k..(ao * m * k) + m * k];
                let b_mat = &bd[bo * k * n..(bo * k * n) + k * n];
                let o_mat = &mut od[ob * m * n..(ob * m * n) + m * n];
                if transpose_b {
                    mm_nt(a_mat, b_mat, o_mat, m, k, n);
                } else {
                    mm_nn(a_mat, b_mat, o_mat, m, k, n);
                }
            }
        }
        let (rga, rgb) = (self.rg(a), self.rg(b));
        let bw: Option<BackwardFn<S>> = if rga || rgb {
            let (ai, bi) = (a.0, b.0);
            let (a_shape, b_shape) = (ash.clone(), bsh.clone());
            Some(Box::new(move |vals, g, grads| {
                let gd = g.data();
                if rga {
                    let mut da = Tensor::zeros(&a_shape);
                    let bd = vals[bi].data();
                    for (ob, (&ao, &bo)) in a_off.iter().zip(&b_off).enumerate() {
                        let g_mat = &gd[ob * m * n..(ob * m * n) + m * n];
                        let b_mat = &bd[bo * k * n..(bo * k * n) + k * n];
                        let da_mat = &mut da.data_mut()[ao * m * k..(ao * m * k) + m * k];
                        if transpose_b {
                            // dA = dC * B, with B stored (n, k)
                            mm_nn(g_mat, b_mat, da_mat, m, n, k);
                        } else {
                            mm_nt(g_mat, b_mat, da_mat, m, n, k);
                        }
                    }
                    acc(grads, ai, da);
                }
                if rgb {
                    let mut db = Tensor::zeros(&b_shape);
                    let ad = vals[ai].data();
                    for (ob, (&ao, &bo)) in a_off.iter().zip(&b_off).enumerate() {
                        let g_mat = &gd[ob * m * n..(ob * m * n) + m * n];
                        let a_mat = &ad[ao * m * k..(ao * m * k) + m * k];
                        let db_mat = &mut db.data_mut()[bo * k * n..(bo * k * n) + k * n];
                        if transpose_b {
                            // dB = dC^T * A -> (n, k)
                            mm_tn(g_mat, a_mat, db_mat, m, n, k);
                        } else {
                            mm_tn(a_mat, g_mat, db_mat, m, k, n);
                        }
                    }
                    acc(grads, bi, db);
                }
            }))
        } else {
            None
        };
        Ok(self.push(out, rga || rgb, bw))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let av = &self.values[a.0];
        if numel(&shape) != av.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: av.shape().to_vec(),
                rhs: shape,
            });
        }
        let out = av.clone().reshape(shape)?;
        let rga = self.rg(a);
        let bw: Option<BackwardFn<S>> = if rga {
            let ai = a.0;
            let a_shape = av.shape().to_vec();
            Some(Box::new(move |_vals, g, grads| {
                let dg = g
                    .clone()
                    .reshape(a_shape.clone())
                    .expect("reshape backward preserves count");
                acc(grads, ai, dg);
            }))
        } else {
            None
        };
        Ok(self.push(out, rga, bw))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let av = &self.values[a.0];
        let rank = av.rank();
        let mut seen = vec![false; rank];
        let valid = axes.len() == rank
            && axes.iter().all(|&x| {
                if x >= rank || seen[x] {
                    false
                } else {
                    seen[x] = true;
                    true
                }
            });
        if !valid {
            return Err(Error::InvalidShape {
                op: "permute",
                shape: av.shape().to_vec(),
                reason: format!("{axes:?} is not a permutation of the axes"),
            });
        }
        let out = permute_tensor(av, axes);
        let rga = self.rg(a);
        let bw: Option<BackwardFn<S>> = if rga {
            let ai = a.0;
            let mut inverse = vec![0usize; rank];
            for (i, &x) in axes.iter().enumerate() {
                inverse[x] = i;
            }
            Some(Box::new(move |_vals, g, grads| {
                acc(grads, ai, permute_tensor(g, &inverse));
            }))
        } else {
            None
        };
        Ok(self.push(out, rga, bw))
    }

    /// Softmax along `axis`, stabilized by max subtraction. Slices along the
    /// axis sum to 1 with every entry positive.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let av = &self.values[a.0];
        let sh = av.shape().to_vec();
        if axis >= sh.len() {
            return Err(Error::InvalidAxis {
                op: "softmax",
                axis,
                shape: sh,
            });
        }
        let ax = sh[axis];
        let inner: usize = sh[axis + 1..].iter().product();
        let outer: usize = sh[..axis].iter().product();
        let mut out = av.clone();
        {
            let d = out.data_mut();
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * ax * inner + i;
                    let mut mx = d[base];
                    for t in 1..ax {
                        mx = mx.max(d[base + t * inner]);
                    }
                    let mut sum = S::zero();
                    for t in 0..ax {
                        let e = (d[base + t * inner] - mx).exp();
                        d[base + t * inner] = e;
                        sum = sum + e;
                    }
                    for t in 0..ax {
                        d[base + t * inner] = d[base + t * inner] / sum;
                    }
                }
            }
        }
        let rga = self.rg(a);
        let out_id = self.values.len();
        let bw: Option<BackwardFn<S>> = if rga {
            let ai = a.0;
            Some(Box::new(move |vals, g, grads| {
                let y = vals[out_id].data();
                let gd = g.data();
                let mut dx = Tensor::zeros(vals[ai].shape());
                let d = dx.data_mut();
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * ax * inner + i;
                        let mut s = S::zero();
                        for t in 0..ax {
                            let p = base + t * inner;
                            s = s + gd[p] * y[p];
                        }
                        for t in 0..ax {
                            let p = base + t * inner;
                            d[p] = y[p] * (gd[p] - s);
                        }
                    }
                }
                acc(grads, ai, dx);
            }))
        } else {
            None
        };
        Ok(self.push(out, rga, bw))
    }

    /// Softmax over the last axis restricted to a per-row valid prefix;
    /// entries at or past the prefix get weight exactly 0. Padding is always
    /// a suffix in this codebase, so a prefix length fully describes a mask.
    pub fn masked_softmax(&mut self, a: Var, valid: Vec<usize>) -> Result<Var> {
        let av = &self.values[a.0];
        let sh = av.shape().to_vec();
        let t_len = *sh.last().ok_or(Error::InvalidShape {
            op: "masked_softmax",
            shape: sh.clone(),
            reason: "rank must be at least 1".into(),
        })?;
        let rows = av.numel() / t_len;
        if valid.len() != rows {
            return Err(Error::InvalidShape {
                op: "masked_softmax",
                shape: sh,
                reason: format!("{} rows but {} valid lengths", rows, valid.len()),
            });
        }
        if let Some(r) = valid.iter().position(|&v| v == 0 || v > t_len) {
            return Err(Error::InvalidShape {
                op: "masked_softmax",
                shape: sh,
                reason: format!("row {r} has valid length {} of {t_len}", valid[r]),
            });
        }
        let mut out = av.clone();
        for (r, row) in out.data_mut().chunks_exact_mut(t_len).enumerate() {
            let v = valid[r];
            let mut mx = row[0];
            for &x in &row[1..v] {
                mx = mx.max(x);
            }
            let mut sum = S::zero();
            for x in row[..v].iter_mut() {
                *x = (*x - mx).exp();
                sum = sum + *x;
            }
            for x in row[..v].iter_mut() {
                *x = *x / sum;
            }
            for x in row[v..].iter_mut() {
                *x = S::zero();
            }
        }
        let rga = self.rg(a);
        let out_id = self.values.len();
        let bw: Option<BackwardFn<S>> = if rga {
            let ai = a.0;
            let valid = valid.clone();
            Some(Box::new(move |vals, g, grads| {
                let y = vals[out_id].data();
                let gd = g.data();
                let mut dx = Tensor::zeros(vals[ai].shape());
                for (r, drow) in dx.data_mut().chunks_exact_mut(t_len).enumerate() {
                    let v = valid[r];
                    let base = r * t_len;
                    let mut s = S::zero();
                    for t in 0..v {
                        s = s + gd[base + t] * y[base + t];
                    }
                    for t in 0..v {
                        drow[t] = y[base + t] * (gd[base + t] - s);
                    }
                }
                acc(grads, ai, dx);
            }))
        } else {
            None
        };
        Ok(self.push(out, rga, bw))
    }

    /// Normalizes each trailing-axis row to zero mean and unit variance
    /// (population variance, epsilon inside the root), then applies the
    /// learned affine transform.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (&self.values[x.0], &self.values[gamma.0], &self.values[beta.0]);
        let d = *xv.shape().last().unwrap_or(&0);
        if d == 0 || gv.shape() != [d] || bv.shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: xv.shape().to_vec(),
                rhs: gv.shape().to_vec(),
            });
        }
        let epss = S::from_f64(eps);
        let inv_d = S::one() / S::from_usize(d);
        let mut out = xv.clone();
        for row in out.data_mut().chunks_exact_mut(d) {
            let mean = row.iter().copied().sum::<S>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_d;
            let inv = S::one() / (var + epss).sqrt();
            for (v, (&g, &b)) in row.iter_mut().zip(gv.data().iter().zip(bv.data())) {
                *v = (*v - mean) * inv * g + b;
            }
        }
        let (rgx, rgg, rgb) = (self.rg(x), self.rg(gamma), self.rg(beta));
        let rg = rgx || rgg || rgb;
        let bw: Option<BackwardFn<S>> = if rg {
            let (xi, gi, bi) = (x.0, gamma.0, beta.0);
            Some(Box::new(move |vals, g, grads| {
                let xv = &vals[xi];
                let gammav = vals[gi].data();
                let gd = g.data();
                let mut dx = if rgx { Some(Tensor::zeros(xv.shape())) } else { None };
                let mut dgamma = if rgg { Some(vec![S::zero(); d]) } else { None };
                let mut dbeta = if rgb { Some(vec![S::zero(); d]) } else { None };
                for (r, row) in xv.data().chunks_exact(d).enumerate() {
                    let mean = row.iter().copied().sum::<S>() * inv_d;
                    let var =
                        row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_d;
                    let inv = S::one() / (var + epss).sqrt();
                    let grow = &gd[r * d..(r + 1) * d];
                    if let Some(dg) = dgamma.as_mut() {
                        for t in 0..d {
                            dg[t] = dg[t] + grow[t] * (row[t] - mean) * inv;
                        }
                    }
                    if let Some(db) = dbeta.as_mut() {
                        for t in 0..d {
                            db[t] = db[t] + grow[t];
                        }
                    }
                    if let Some(dx) = dx.as_mut() {
                        // dx = inv * (gy - mean(gy) - xhat * mean(gy * xhat))
                        let mut m1 = S::zero();
                        let mut m2 = S::zero();
                        for t in 0..d {
                            let gy = grow[t] * gammav[t];
                            let xhat = (row[t] - mean) * inv;
                            m1 = m1 + gy;
                            m2 = m2 + gy * xhat;
                        }
                        m1 = m1 * inv_d;
                        m2 = m2 * inv_d;
                        let drow = &mut dx.data_mut()[r * d..(r + 1) * d];
                        for t in 0..d {
                            let gy = grow[t] * gammav[t];
                            let xhat = (row[t] - mean) * inv;
                            drow[t] = inv * (gy - m1 - xhat * m2);
                        }
                    }
                }
                if let Some(dx) = dx {
                    acc(grads, xi, dx);
                }
                if let Some(dg) = dgamma {
                    acc(grads, gi, Tensor::new(vec![d], dg).expect("gamma grad shape"));
                }
                if let Some(db) = dbeta {
                    acc(grads, bi, Tensor::new(vec![d], db).expect("beta grad shape"));
                }
            }))
        } else {
            None
        };
        Ok(self.push(out, rg, bw))
    }

    /// Elementwise x * Phi(x) with the exact-erf normal CDF.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.values[a.0].map(|x| x * phi_cdf(x));
        let rga = self.rg(a);
        let bw: Option<BackwardFn<S>> = if rga {
            let ai = a.0;
            let inv_sqrt_2pi = S::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
            let half = S::from_f64(0.5);
            Some(Box::new(move |vals, g, grads| {
                let xv = vals[ai].data();
                let mut dx = Tensor::zeros(vals[ai].shape());
                for ((d, &x), &gv) in dx.data_mut().iter_mut().zip(xv).zip(g.data()) {
                    let pdf = inv_sqrt_2pi * (-half * x * x).exp();
                    *d = gv * (phi_cdf(x) + x * pdf);
                }
                acc(grads, ai, dx);
            }))
        } else {
            None
        };
        self.push(out, rga, bw)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.values[a.0].map(|x| x.tanh());
        let rga = self.rg(a);
        let out_id = self.values.len();
        let bw: Option<BackwardFn<S>> = if rga {
            let ai = a.0;
            Some(Box::new(move |vals, g, grads| {
                let y = vals[out_id].data();
                let mut dx = Tensor::zeros(vals[ai].shape());
                for ((d, &yv), &gv) in dx.data_mut().iter_mut().zip(y).zip(g.data()) {
                    *d = gv * (S::one() - yv * yv);
                }
                acc(grads, ai, dx);
            }))
        } else {
            None
        };
        self.push(out, rga, bw)
    }

    /// Row lookup `table[ids[r], :]` into a `[ids.len(), d]` output.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = &self.values[table.0];
        if tv.rank() != 2 {
            return Err(Error::InvalidShape {
                op: "embedding",
                shape: tv.shape().to_vec(),
                reason: "table must be rank 2".into(),
            });
        }
        let (v, d) = (tv.shape()[0], tv.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
            return Err(Error::IdOutOfRange {
                id: bad,
                vocab_size: v,
            });
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(&tv.data()[id * d..(id + 1) * d]);
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        let rgt = self.rg(table);
        let bw: Option<BackwardFn<S>> = if rgt {
            let ti = table.0;
            let ids = ids.to_vec();
            Some(Box::new(move |vals, g, grads| {
                let mut dt = Tensor::zeros(vals[ti].shape());
                let dd = dt.data_mut();
                for (r, &id) in ids.iter().enumerate() {
                    let grow = &g.data()[r * d..(r + 1) * d];
                    let trow = &mut dd[id * d..(id + 1) * d];
                    for (t, &gv) in trow.iter_mut().zip(grow) {
                        *t = *t + gv;
                    }
                }
                acc(grads, ti, dt);
            }))
        } else {
            None
        };
        Ok(self.push(out, rgt, bw))
    }

    /// Selects rows along the first axis: `out[r, ..] = x[rows[r], ..]`.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xv = &self.values[x.0];
        if xv.rank() < 1 {
            return Err(Error::InvalidShape {
                op: "gather_rows",
                shape: xv.shape().to_vec(),
                reason: "rank must be at least 1".into(),
            });
        }
        let n = xv.shape()[0];
        let row_size = xv.numel() / n.max(1);
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::IdOutOfRange {
                id: bad,
                vocab_size: n,
            });
        }
        let mut out_shape = xv.shape().to_vec();
        out_shape[0] = rows.len();
        let mut data = Vec::with_capacity(rows.len() * row_size);
        for &r in rows {
            data.extend_from_slice(&xv.data()[r * row_size..(r + 1) * row_size]);
        }
        let out = Tensor::new(out_shape, data)?;
        let rgx = self.rg(x);
        let bw: Option<BackwardFn<S>> = if rgx {
            let xi = x.0;
            let rows = rows.to_vec();
            Some(Box::new(move |vals, g, grads| {
                let mut dx = Tensor::zeros(vals[xi].shape());
                let dd = dx.data_mut();
                for (r, &src) in rows.iter().enumerate() {
                    let grow = &g.data()[r * row_size..(r + 1) * row_size];
                    let drow = &mut dd[src * row_size..(src + 1) * row_size];
                    for (t, &gv) in drow.iter_mut().zip(grow) {
                        *t = *t + gv;
                    }
                }
                acc(grads, xi, dx);
            }))
        } else {
            None
        };
        Ok(self.push(out, rgx, bw))
    }

    /// Gathers along the last axis with a per-row index matrix:
    /// `out[.., i, j] = x[.., i, index[i][j]]`. The index applies identically
    /// to every leading batch slice.
    pub fn gather_last(&mut self, x: Var, index: &[Vec<usize>]) -> Result<Var> {
        let xv = &self.values[x.0];
        if xv.rank() < 2 {
            return Err(Error::InvalidShape {
                op: "gather_last",
                shape: xv.shape().to_vec(),
                reason: "rank must be at least 2".into(),
            });
        }
        let t_len = xv.shape()[xv.rank() - 1];
        let l = xv.shape()[xv.rank() - 2];
        if index.len() != l {
            return Err(Error::InvalidShape {
                op: "gather_last",
                shape: xv.shape().to_vec(),
                reason: format!("index has {} rows for axis of {l}", index.len()),
            });
        }
        let t_out = index.first().map_or(0, |r| r.len());
        if t_out == 0 || index.iter().any(|r| r.len() != t_out) {
            return Err(Error::InvalidShape {
                op: "gather_last",
                shape: xv.shape().to_vec(),
                reason: "index rows must be non-empty and equal-length".into(),
            });
        }
        if let Some(&bad) = index.iter().flatten().find(|&&j| j >= t_len) {
            return Err(Error::IdOutOfRange {
                id: bad,
                vocab_size: t_len,
            });
        }
        let flat: Vec<usize> = index.iter().flatten().copied().collect();
        let outer = xv.numel() / (l * t_len);
        let mut out_shape = xv.shape().to_vec();
        let last = out_shape.len() - 1;
        out_shape[last] = t_out;
        let mut data = Vec::with_capacity(outer * l * t_out);
        let xd = xv.data();
        for o in 0..outer {
            for i in 0..l {
                let base = (o * l + i) * t_len;
                for &j in &flat[i * t_out..(i + 1) * t_out] {
                    data.push(xd[base + j]);
                }
            }
        }
        let out = Tensor::new(out_shape, data)?;
        let rgx = self.rg(x);
        let bw: Option<BackwardFn<S>> = if rgx {
            let xi = x.0;
            Some(Box::new(move |vals, g, grads| {
                let mut dx = Tensor::zeros(vals[xi].shape());
                let dd = dx.data_mut();
                let gd = g.data();
                for o in 0..outer {
                    for i in 0..l {
                        let base = (o * l + i) * t_len;
                        let gbase = (o * l + i) * t_out;
                        for (jj, &j) in flat[i * t_out..(i + 1) * t_out].iter().enumerate() {
                            dd[base + j] = dd[base + j] + gd[gbase + jj];
                        }
                    }
                }
                acc(grads, xi, dx);
            }))
        } else {
            None
        };
        Ok(self.push(out, rgx, bw))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let total = self.values[a.0].data().iter().copied().sum::<S>();
        let rga = self.rg(a);
        let bw: Option<BackwardFn<S>> = if rga {
            let ai = a.0;
            Some(Box::new(move |vals, g, grads| {
                let gs = g.item();
                acc(grads, ai, Tensor::full(vals[ai].shape(), gs));
            }))
        } else {
            None
        };
        self.push(Tensor::scalar(total), rga, bw)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.values[a.0].numel();
        let inv = S::one() / S::from_usize(n);
        let total = self.values[a.0].data().iter().copied().sum::<S>() * inv;
        let rga = self.rg(a);
        let bw: Option<BackwardFn<S>> = if rga {
            let ai = a.0;
            Some(Box::new(move |vals, g, grads| {
                let gs = g.item() * inv;
                acc(grads, ai, Tensor::full(vals[ai].shape(), gs));
            }))
        } else {
            None
        };
        self.push(Tensor::scalar(total), rga, bw)
    }

    /// Mean negative log-softmax over positions whose target is not
    /// `ignore_id`. Errors when every position is ignored.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        ignore_id: usize,
    ) -> Result<Var> {
        let lv = &self.values[logits.0];
        if lv.rank() != 2 || lv.shape()[0] != targets.len() {
            return Err(Error::InvalidShape {
                op: "cross_entropy",
                shape: lv.shape().to_vec(),
                reason: format!("expected [{}, V] logits", targets.len()),
            });
        }
        let v = lv.shape()[1];
        if let Some(&bad) = targets.iter().find(|&&t| t != ignore_id && t >= v) {
            return Err(Error::IdOutOfRange {
                id: bad,
                vocab_size: v,
            });
        }
        let count = targets.iter().filter(|&&t| t != ignore_id).count();
        if count == 0 {
            return Err(Error::AllIgnored);
        }
        let inv_count = S::one() / S::from_usize(count);
        let mut loss = S::zero();
        // Per-row probabilities, cached for the backward scatter.
        let mut probs = lv.clone();
        for (r, row) in probs.data_mut().chunks_exact_mut(v).enumerate() {
            let mut mx = row[0];
            for &x in &row[1..] {
                mx = mx.max(x);
            }
            let mut sum = S::zero();
            for x in row.iter_mut() {
                *x = (*x - mx).exp();
                sum = sum + *x;
            }
            for x in row.iter_mut() {
                *x = *x / sum;
            }
            let t = targets[r];
            if t != ignore_id {
                loss = loss - row[t].ln();
            }
        }
        loss = loss * inv_count;
        let rgl = self.rg(logits);
        let bw: Option<BackwardFn<S>> = if rgl {
            let li = logits.0;
            let targets = targets.to_vec();
            Some(Box::new(move |_vals, g, grads| {
                let gs = g.item() * inv_count;
                let mut dl = probs.clone();
                for (r, row) in dl.data_mut().chunks_exact_mut(v).enumerate() {
                    let t = targets[r];
                    if t == ignore_id {
                        for x in row.iter_mut() {
                            *x = S::zero();
                        }
                    } else {
                        row[t] = row[t] - S::one();
                        for x in row.iter_mut() {
                            *x = *x * gs;
                        }
                    }
                }
                acc(grads, li, dl);
            }))
        } else {
            None
        };
        Ok(self.push(Tensor::scalar(loss), rgl, bw))
    }

    /// Mean binary cross-entropy from logits over positions where `mask` is
    /// true, in the softplus form that never overflows.
    pub fn bce_with_logits(
        &mut self,
        logits: Var,
        targets: &[f64],
        mask: &[bool],
    ) -> Result<Var> {
        let lv = &self.values[logits.0];
        let n = lv.numel();
        if targets.len() != n || mask.len() != n {
            return Err(Error::InvalidShape {
                op: "bce_with_logits",
                shape: lv.shape().to_vec(),
                reason: format!(
                    "{} logits vs {} targets / {} mask entries",
                    n,
                    targets.len(),
                    mask.len()
                ),
            });
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::AllIgnored);
        }
        let inv_count = S::one() / S::from_usize(count);
        let mut loss = S::zero();
        for ((&x, &t), &m) in lv.data().iter().zip(targets).zip(mask) {
            if m {
                loss = loss + softplus(x) - S::from_f64(t) * x;
            }
        }
        loss = loss * inv_count;
        let rgl = self.rg(logits);
        let bw: Option<BackwardFn<S>> = if rgl {
            let li = logits.0;
            let targets = targets.to_vec();
            let mask = mask.to_vec();
            Some(Box::new(move |vals, g, grads| {
                let gs = g.item() * inv_count;
                let mut dl = Tensor::zeros(vals[li].shape());
                for ((d, (&x, &t)), &m) in dl
                    .data_mut()
                    .iter_mut()
                    .zip(vals[li].data().iter().zip(&targets))
                    .zip(&mask)
                {
                    if m {
                        *d = gs * (sigmoid(x) - S::from_f64(t));
                    }
                }
                acc(grads, li, dl);
            }))
        } else {
            None
        };
        Ok(self.push(Tensor::scalar(loss), rgl, bw))
    }

    /// Mean squared error against constant targets.
    pub fn mse(&mut self, pred: Var, targets: &[f64]) -> Result<Var> {
        let pv = &self.values[pred.0];
        let n = pv.numel();
        if targets.len() != n {
            return Err(Error::InvalidShape {
                op: "mse",
                shape: pv.shape().to_vec(),
                reason: format!("{} predictions vs {} targets", n, targets.len()),
            });
        }
        let inv_n = S::one() / S::from_usize(n);
        let mut loss = S::zero();
        for (&p, &t) in pv.data().iter().zip(targets) {
            let d = p - S::from_f64(t);
            loss = loss + d * d;
        }
        loss = loss * inv_n;
        let rgp = self.rg(pred);
        let bw: Option<BackwardFn<S>> = if rgp {
            let pi = pred.0;
            let targets = targets.to_vec();
            Some(Box::new(move |vals, g, grads| {
                let gs = g.item() * inv_n * S::from_f64(2.0);
                let mut dp = Tensor::zeros(vals[pi].shape());
                for ((d, &p), &t) in dp.data_mut().iter_mut().zip(vals[pi].data()).zip(&targets)
                {
                    *d = gs * (p - S::from_f64(t));
                }
                acc(grads, pi, dp);
            }))
        } else {
            None
        };
        Ok(self.push(Tensor::scalar(loss), rgp, bw))
    }

    /// Inverted dropout: keeps each entry with probability 1-p and rescales
    /// by 1/(1-p). p = 0 is the identity and adds no node.
    pub fn dropout(&mut self, a: Var, p: f64, rng: &mut Rng) -> Var {
        assert!((0.0..1.0).contains(&p), "dropout probability {p}");
        if p == 0.0 {
            return a;
        }
        let scale = S::from_f64(1.0 / (1.0 - p));
        let av = &self.values[a.0];
        let mult: Vec<S> = (0..av.numel())
            .map(|_| {
                if rng.next_f64() >= p {
                    scale
                } else {
                    S::zero()
                }
            })
            .collect();
        let mut out = av.clone();
        for (o, &m) in out.data_mut().iter_mut().zip(&mult) {
            *o = *o * m;
        }
        let rga = self.rg(a);
        let bw: Option<BackwardFn<S>> = if rga {
            let ai = a.0;
            Some(Box::new(move |vals, g, grads| {
                let mut dx = Tensor::zeros(vals[ai].shape());
                for ((d, &gv), &m) in dx.data_mut().iter_mut().zip(g.data()).zip(&mult) {
                    *d = gv * m;
                }
                acc(grads, ai, dx);
            }))
        } else {
            None
        };
        self.push(out, rga, bw)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[&[f64]]) -> Tensor<f64> {
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::new(vec![rows.len(), rows[0].len()], data).unwrap()
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut g = Graph::new();
        let a = g.constant(t2(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let i = g.constant(t2(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let z = g.constant(Tensor::zeros(&[2, 2]));
        let ai = g.matmul(a, i).unwrap();
        assert_eq!(g.value(ai).data(), g.value(a).data());
        let az = g.matmul(a, z).unwrap();
        assert!(g.value(az).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn matmul_hand_case() {
        let mut g = Graph::new();
        let a = g.constant(t2(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = g.constant(t2(&[&[5.0, 6.0], &[7.0, 8.0]]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[4, 5]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 5]"), "{err}");
    }

    #[test]
    fn matmul_broadcasts_batch_dims() {
        // [2,1,2,3] x [3,3,2] broadcasts to [2,3,2,2].
        let mut g = Graph::<f64>::new();
        let a_t = Tensor::new(vec![2, 1, 2, 3], (0..12).map(|i| i as f64).collect()).unwrap();
        let b_t = Tensor::new(vec![3, 3, 2], (0..18).map(|i| i as f64 * 0.5).collect()).unwrap();
        let a = g.constant(a_t.clone());
        let b = g.constant(b_t.clone());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[2, 3, 2, 2]);
        // Check one slice by hand: out[1, 2, ..] = a[1, 0, ..] x b[2, ..].
        for i in 0..2 {
            for j in 0..2 {
                let mut want = 0.0;
                for k in 0..3 {
                    want += a_t.get(&[1, 0, i, k]) * b_t.get(&[2, k, j]);
                }
                assert!(close(g.value(c).get(&[1, 2, i, j]), want, 1e-12));
            }
        }
    }

    #[test]
    fn matmul_nt_matches_explicit_transpose() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t2(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]));
        let b = g.constant(t2(&[&[1.0, 0.5, -1.0], &[2.0, -2.0, 0.0]]));
        let c = g.matmul_nt(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[2, 2]);
        assert!(close(g.value(c).get(&[0, 0]), 1.0 + 1.0 - 3.0, 1e-12));
        assert!(close(g.value(c).get(&[0, 1]), 2.0 - 4.0, 1e-12));
        assert!(close(g.value(c).get(&[1, 0]), 4.0 + 2.5 - 6.0, 1e-12));
        assert!(close(g.value(c).get(&[1, 1]), 8.0 - 10.0, 1e-12));
    }

    #[test]
    fn softmax_symmetry_and_singleton() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[4], 2.5));
        let y = g.softmax(x, 0).unwrap();
        for &v in g.value(y).data() {
            assert!(close(v, 0.25, 1e-12));
        }
        let one = g.constant(Tensor::from_vec(vec![3.0]));
        let y1 = g.softmax(one, 0).unwrap();
        assert!(close(g.value(y1).data()[0], 1.0, 1e-15));
    }

    #[test]
    fn softmax_closed_form() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_vec(vec![0.0, 3.0f64.ln()]));
        let y = g.softmax(x, 0).unwrap();
        assert!(close(g.value(y).data()[0], 0.25, 1e-12));
        assert!(close(g.value(y).data()[1], 0.75, 1e-12));
    }

    #[test]
    fn softmax_rows_sum_to_one_any_axis() {
        let mut rng = Rng::new(2);
        let mut g = Graph::<f64>::new();
        let t = Tensor::new(vec![2, 3, 4], (0..24).map(|_| rng.uniform(-2.0, 2.0)).collect())
            .unwrap();
        let x = g.constant(t);
        for axis in 0..3 {
            let y = g.softmax(x, axis).unwrap();
            let yv = g.value(y);
            assert!(yv.data().iter().all(|&p| p > 0.0));
            let sh = yv.shape().to_vec();
            // Sum along `axis` for every (outer, inner) slice.
            let inner: usize = sh[axis + 1..].iter().product();
            let outer: usize = sh[..axis].iter().product();
            for o in 0..outer {
                for i in 0..inner {
                    let mut s = 0.0;
                    for t in 0..sh[axis] {
                        s += yv.data()[o * sh[axis] * inner + t * inner + i];
                    }
                    assert!(close(s, 1.0, 1e-6));
                }
            }
        }
        let bad = g.softmax(x, 3);
        assert!(bad.is_err());
    }

    #[test]
    fn masked_softmax_zeroes_padding_exactly() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t2(&[&[1.0, 2.0, 5.0, 9.0], &[0.5, -0.5, 3.0, 3.0]]));
        let y = g.masked_softmax(x, vec![2, 3]).unwrap();
        let yv = g.value(y);
        assert_eq!(yv.get(&[0, 2]), 0.0);
        assert_eq!(yv.get(&[0, 3]), 0.0);
        assert_eq!(yv.get(&[1, 3]), 0.0);
        assert!(close(yv.get(&[0, 0]) + yv.get(&[0, 1]), 1.0, 1e-12));
        let s1: f64 = (0..3).map(|j| yv.get(&[1, j])).sum();
        assert!(close(s1, 1.0, 1e-12));
        // Full-width mask reproduces plain softmax.
        let z = g.constant(t2(&[&[1.0, -2.0, 0.25, 3.0]]));
        let full = g.masked_softmax(z, vec![4]).unwrap();
        let plain = g.softmax(z, 1).unwrap();
        for (a, b) in g.value(full).data().iter().zip(g.value(plain).data()) {
            assert!(close(*a, *b, 1e-15));
        }
    }

    #[test]
    fn masked_softmax_rejects_empty_rows() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[2, 3]));
        assert!(g.masked_softmax(x, vec![3, 0]).is_err());
        assert!(g.masked_softmax(x, vec![3, 4]).is_err());
        assert!(g.masked_softmax(x, vec![3]).is_err());
    }

    #[test]
    fn layer_norm_constant_row_yields_beta() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[2, 3], 7.0));
        let gamma = g.constant(Tensor::ones(&[3]));
        let beta = g.constant(Tensor::full(&[3], 0.25));
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        for &v in g.value(y).data() {
            assert!(close(v, 0.25, 1e-6));
        }
    }

    #[test]
    fn layer_norm_standardizes_rows() {
        let mut rng = Rng::new(4);
        let mut g = Graph::<f64>::new();
        let d = 16;
        let t = Tensor::new(vec![3, d], (0..3 * d).map(|_| rng.uniform(-2.0, 2.0)).collect())
            .unwrap();
        let x = g.constant(t);
        let gamma = g.constant(Tensor::ones(&[d]));
        let beta = g.constant(Tensor::zeros(&[d]));
        let y = g.layer_norm(x, gamma, beta, 0.0).unwrap();
        for row in g.value(y).rows(d) {
            let mean: f64 = row.iter().sum::<f64>() / d as f64;
            let var: f64 = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            assert!(mean.abs() < 1e-5, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-5, "var {var}");
        }
    }

    #[test]
    fn layer_norm_two_point_row() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t2(&[&[1.0, 3.0]]));
        let gamma = g.constant(Tensor::ones(&[2]));
        let beta = g.constant(Tensor::zeros(&[2]));
        let y = g.layer_norm(x, gamma, beta, 0.0).unwrap();
        assert!(close(g.value(y).data()[0], -1.0, 1e-12));
        assert!(close(g.value(y).data()[1], 1.0, 1e-12));
    }

    #[test]
    fn gelu_reference_points() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_vec(vec![0.0, 10.0, 1.0, -1.0]));
        let y = g.gelu(x);
        let yv = g.value(y).data();
        assert_eq!(yv[0], 0.0);
        assert!(close(yv[1], 10.0, 1e-6));
        assert!(close(yv[2], 0.841345, 1e-6));
        // gelu(-1) = -Phi(-1) = -(1 - Phi(1)) = 0.841345 - 1.
        assert!(close(yv[3], 0.841345 - 1.0, 1e-6));
    }

    #[test]
    fn cross_entropy_uniform_and_peaked() {
        let mut g = Graph::<f64>::new();
        let uniform = g.constant(Tensor::zeros(&[3, 4]));
        let loss = g.cross_entropy(uniform, &[0, 1, 3], usize::MAX).unwrap();
        assert!(close(g.value(loss).item(), 4.0f64.ln(), 1e-12));

        let mut peaked = Tensor::zeros(&[1, 5]);
        peaked.set(&[0, 2], 40.0);
        let p = g.constant(peaked);
        let loss2 = g.cross_entropy(p, &[2], usize::MAX).unwrap();
        assert!(g.value(loss2).item() < 1e-9);
    }

    #[test]
    fn cross_entropy_closed_form_and_ignore() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t2(&[&[0.0, 3.0f64.ln()], &[5.0, 5.0]]));
        // Row 1 is ignored, so the mean is just row 0: -ln 0.25 = ln 4.
        let loss = g.cross_entropy(x, &[0, 9], 9).unwrap();
        assert!(close(g.value(loss).item(), 4.0f64.ln(), 1e-12));
        let all = g.cross_entropy(x, &[9, 9], 9);
        assert!(matches!(all, Err(Error::AllIgnored)));
        let oob = g.cross_entropy(x, &[0, 2], 9);
        assert!(matches!(oob, Err(Error::IdOutOfRange { .. })));
    }

    #[test]
    fn bce_with_logits_hand_case() {
        // Positions: (x=0, t=1) -> ln 2; (x=2, t=1) -> softplus(-2); third is
        // masked out. Mean of the first two = (ln 2 + ln(1 + e^-2)) / 2.
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_vec(vec![0.0, 2.0, 100.0]));
        let loss = g
            .bce_with_logits(x, &[1.0, 1.0, 0.0], &[true, true, false])
            .unwrap();
        let want = (2.0f64.ln() + (1.0 + (-2.0f64).exp()).ln()) / 2.0;
        assert!(close(g.value(loss).item(), want, 1e-12));
        assert!(close(want, 0.410037, 1e-6));
    }

    #[test]
    fn bce_is_finite_for_extreme_logits() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_vec(vec![500.0, -500.0]));
        let loss = g
            .bce_with_logits(x, &[0.0, 1.0], &[true, true])
            .unwrap();
        assert!(g.value(loss).item().is_finite());
        assert!(close(g.value(loss).item(), 500.0, 1e-9));
    }

    #[test]
    fn mse_hand_case() {
        let mut g = Graph::<f64>::new();
        let p = g.constant(Tensor::from_vec(vec![1.0, 2.0]));
        let loss = g.mse(p, &[0.0, 4.0]).unwrap();
        assert!(close(g.value(loss).item(), (1.0 + 4.0) / 2.0, 1e-12));
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 3.0, 4.0, -1.0]).unwrap());
        let loss = g.sum_all(x);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn backward_dot_gives_other_operand() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let y = g.constant(Tensor::from_vec(vec![4.0, 5.0, 6.0]));
        let xy = g.mul(x, y).unwrap();
        let loss = g.sum_all(xy);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[4.0, 5.0, 6.0]);
    }

    #[test]
    fn backward_errors_on_non_scalar_and_reuse() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_vec(vec![1.0, 2.0]));
        let err = g.backward(x).unwrap_err();
        assert!(matches!(err, Error::NonScalarLoss(ref s) if s == &vec![2]));
        let loss = g.sum_all(x);
        g.backward(loss).unwrap();
        assert!(matches!(g.backward(loss), Err(Error::GraphConsumed)));
    }

    #[test]
    fn backward_accumulates_shared_subexpressions() {
        // loss = sum(x) + sum(x) must give grad 2 everywhere.
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_vec(vec![1.0, 2.0]));
        let s1 = g.sum_all(x);
        let s2 = g.sum_all(x);
        let tot = g.add(s1, s2).unwrap();
        g.backward(tot).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_vec(vec![1.0, 2.0]));
        let c = g.constant(Tensor::from_vec(vec![3.0, 4.0]));
        let p = g.mul(x, c).unwrap();
        let loss = g.sum_all(p);
        g.backward(loss).unwrap();
        assert!(g.grad(c).is_none());
        assert!(g.grad(x).is_some());
    }

    #[test]
    fn add_broadcast_backward_reduces() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.param(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let y = g.add(x, b).unwrap();
        let loss = g.sum_all(y);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(b).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn reshape_and_permute_round_trip() {
        let mut g = Graph::<f64>::new();
        let t = Tensor::new(vec![2, 3], (0..6).map(|i| i as f64).collect()).unwrap();
        let x = g.param(t.clone());
        let r = g.reshape(x, vec![3, 2]).unwrap();
        let p = g.permute(r, &[1, 0]).unwrap();
        assert_eq!(g.value(p).shape(), &[2, 3]);
        // reshape [0..6] to [[0,1],[2,3],[4,5]], then transpose.
        assert_eq!(g.value(p).data(), &[0.0, 2.0, 4.0, 1.0, 3.0, 5.0]);
        let loss = g.sum_all(p);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0; 6]);
        assert!(g.reshape(x, vec![4, 2]).is_err());
        assert!(g.permute(x, &[0, 0]).is_err());
    }

    #[test]
    fn permute_moves_axes() {
        let mut g = Graph::<f64>::new();
        let t = Tensor::new(vec![2, 3, 4], (0..24).map(|i| i as f64).collect()).unwrap();
        let x = g.constant(t.clone());
        let p = g.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(g.value(p).shape(), &[4, 2, 3]);
        for a in 0..2 {
            for b in 0..3 {
                for c in 0..4 {
                    assert_eq!(g.value(p).get(&[c, a, b]), t.get(&[a, b, c]));
                }
            }
        }
    }

    #[test]
    fn embedding_gathers_and_scatters() {
        let mut g = Graph::<f64>::new();
        let table = g.param(t2(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]));
        let e = g.embedding(table, &[2, 0, 2]).unwrap();
        assert_eq!(g.value(e).data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let loss = g.sum_all(e);
        g.backward(loss).unwrap();
        // Row 2 was used twice, row 1 never.
        assert_eq!(g.grad(table).unwrap().data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
        let mut g2 = Graph::<f64>::new();
        let t = g2.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(
            g2.embedding(t, &[3]),
            Err(Error::IdOutOfRange { id: 3, vocab_size: 3 })
        ));
    }

    #[test]
    fn gather_rows_selects_first_axis() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t2(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]));
        let y = g.gather_rows(x, &[1, 1]).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 4.0, 3.0, 4.0]);
        let loss = g.sum_all(y);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0, 2.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn gather_last_indexes_per_row() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t2(&[&[10.0, 11.0, 12.0], &[20.0, 21.0, 22.0]]));
        let idx = vec![vec![2, 0], vec![1, 1]];
        let y = g.gather_last(x, &idx).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 2]);
        assert_eq!(g.value(y).data(), &[12.0, 10.0, 21.0, 21.0]);
        let loss = g.sum_all(y);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 0.0, 1.0, 0.0, 2.0, 0.0]);
        assert!(g.gather_last(x, &[vec![3], vec![0]]).is_err());
    }

    #[test]
    fn dropout_zero_probability_is_identity() {
        let mut g = Graph::<f64>::new();
        let mut rng = Rng::new(1);
        let x = g.param(Tensor::from_vec(vec![1.0, 2.0]));
        let y = g.dropout(x, 0.0, &mut rng);
        assert_eq!(x, y);
    }

    #[test]
    fn dropout_masks_and_rescales() {
        let mut g = Graph::<f64>::new();
        let mut rng = Rng::new(8);
        let n = 10_000;
        let x = g.param(Tensor::ones(&[n]));
        let y = g.dropout(x, 0.25, &mut rng);
        let kept = g.value(y).data().iter().filter(|&&v| v != 0.0).count();
        assert!((kept as f64 / n as f64 - 0.75).abs() < 0.02);
        for &v in g.value(y).data() {
            assert!(v == 0.0 || close(v, 1.0 / 0.75, 1e-12));
        }
        let loss = g.sum_all(y);
        g.backward(loss).unwrap();
        // Gradient passes exactly where values were kept, scaled identically.
        for (&gv, &yv) in g.grad(x).unwrap().data().iter().zip(g.value(y).data()) {
            assert_eq!(gv, yv);
        }
    }

    #[test]
    fn scale_and_sub_values() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_vec(vec![1.0, -2.0]));
        let y = g.scale(x, -0.5);
        assert_eq!(g.value(y).data(), &[-0.5, 1.0]);
        let z = g.sub(x, y).unwrap();
        assert_eq!(g.value(z).data(), &[1.5, -3.0]);
        let loss = g.sum_all(z);
        g.backward(loss).unwrap();
        // d/dx (x - (-0.5 x)) = 1.5.
        assert_eq!(g.grad(x).unwrap().data(), &[1.5, 1.5]);
    }

    #[test]
    fn finite_outputs_for_reasonable_inputs() {
        let mut rng = Rng::new(12);
        let mut g = Graph::<f64>::new();
        let t = Tensor::new(vec![4, 8], (0..32).map(|_| rng.uniform(-2.0, 2.0)).collect())
            .unwrap();
        let x = g.param(t);
        let sm = g.softmax(x, 1).unwrap();
        let ge = g.gelu(sm);
        let gamma = g.constant(Tensor::ones(&[8]));
        let beta = g.constant(Tensor::zeros(&[8]));
        let ln = g.layer_norm(ge, gamma, beta, 1e-5).unwrap();
        let loss = g.mean_all(ln);
        g.backward(loss).unwrap();
        assert!(g.value(ln).all_finite());
        assert!(g.grad(x).unwrap().all_finite());
    }
}
