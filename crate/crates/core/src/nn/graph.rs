//! Tape-based reverse-mode automatic differentiation over 2-D batches.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so the tape index order is already topological and
//! [`Graph::backward`] simply walks it in reverse. Parameters enter the tape
//! either as trainable leaves (gradients collected with
//! [`Graph::accumulate_into`]) or as frozen constants.

use std::collections::BTreeSet;

use crate::error::{shape_err, Error, Result};
use crate::nn::param::ParamStore;
use crate::nn::tensor::Tensor;
use crate::scalar::Scalar;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
struct ParamRef {
    tag: String,
    index: usize,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    /// `x · wᵀ` with `w` stored `[out, in]`.
    MatMulT(Var, Var),
    /// Row-broadcast addition of a 1-D bias.
    AddRow(Var, Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Mish(Var),
    Tanh(Var),
    /// `scale[j] * tanh(x)` with a per-column scale.
    ScaledTanh(Var, Vec<T>),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    ConcatCols(Var, Var),
    StopGrad,
    StraightThrough(Var),
    CosineRows {
        a: Var,
        b: Var,
        norm_a: Vec<T>,
        norm_b: Vec<T>,
        eps: T,
    },
    Min(Var, Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    grad: Option<Vec<T>>,
    source: Option<ParamRef>,
}

/// Rounding residuals captured from, or replayed into, straight-through
/// nodes. Replaying them turns the quantized forward pass into a smooth
/// function whose exact derivative is the straight-through gradient.
#[derive(Clone, Debug, Default)]
enum ResidualMode<T> {
    #[default]
    Off,
    Record(Vec<Tensor<T>>),
    Replay(Vec<Tensor<T>>, usize),
}

#[derive(Clone, Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    residuals: ResidualMode<T>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            residuals: ResidualMode::Off,
        }
    }

    /// Records `hard − soft` at every straight-through node.
    pub fn recording_residuals() -> Self {
        Self {
            nodes: Vec::new(),
            residuals: ResidualMode::Record(Vec::new()),
        }
    }

    /// Forward values of straight-through nodes become `soft + residual`.
    pub fn replaying_residuals(residuals: Vec<Tensor<T>>) -> Self {
        Self {
            nodes: Vec::new(),
            residuals: ResidualMode::Replay(residuals, 0),
        }
    }

    pub fn take_residuals(&mut self) -> Vec<Tensor<T>> {
        match std::mem::take(&mut self.residuals) {
            ResidualMode::Record(r) | ResidualMode::Replay(r, _) => r,
            ResidualMode::Off => Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Tags of every parameter store with a trainable leaf on this tape.
    pub fn param_tags(&self) -> BTreeSet<String> {
        self.nodes
            .iter()
            .filter_map(|n| n.source.as_ref().map(|s| s.tag.clone()))
            .collect()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            op,
            grad: None,
            source: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Trainable leaf bound to `store[index]`.
    pub fn param(&mut self, store: &ParamStore<T>, index: usize) -> Var {
        let v = self.push(store.get(index).value.clone(), Op::Leaf);
        self.nodes[v.0].source = Some(ParamRef {
            tag: store.tag().to_string(),
            index,
        });
        v
    }

    /// Parameter value entered as a constant: no gradient is ever routed to it.
    pub fn frozen(&mut self, store: &ParamStore<T>, index: usize) -> Var {
        self.push(store.get(index).value.clone(), Op::Leaf)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    fn same_shape(&self, a: Var, b: Var, ctx: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err(ctx, sa, sb));
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let value = self.value(x).map(f);
        self.push(value, op)
    }

    pub fn matmul_t(&mut self, x: Var, w: Var) -> Result<Var> {
        let (b, k) = self.dims(x);
        let (n, k2) = self.dims(w);
        if k != k2 {
            return Err(shape_err("matmul", k2, k));
        }
        let mut out = vec![T::zero(); b * n];
        T::gemm(
            b,
            k,
            n,
            T::one(),
            self.value(x).data(),
            k as isize,
            1,
            self.value(w).data(),
            1,
            k as isize,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        Ok(self.push(Tensor::new(vec![b, n], out)?, Op::MatMulT(x, w)))
    }

    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.dims(x);
        if self.value(bias).numel() != n {
            return Err(shape_err("bias", n, self.value(bias).numel()));
        }
        let mut value = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for row in value.data_mut().chunks_mut(n) {
            row.iter_mut().zip(&b).for_each(|(y, bb)| *y += *bb);
        }
        Ok(self.push(value, Op::AddRow(x, bias)))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (rows, n) = self.dims(x);
        if self.value(gain).numel() != n || self.value(bias).numel() != n {
            return Err(shape_err("layer_norm affine", n, self.value(gain).numel()));
        }
        let nf = T::from_usize(n).unwrap();
        let g = self.value(gain).data().to_vec();
        let bb = self.value(bias).data().to_vec();
        let xs = self.value(x).data();
        let mut xhat = Vec::with_capacity(rows * n);
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * n);
        for row in xs.chunks(n) {
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * rs;
                xhat.push(h);
                out.push(h * g[j] + bb[j]);
            }
        }
        let value = Tensor::new(vec![rows, n], out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    pub fn mish(&mut self, x: Var) -> Var {
        self.unary(x, Op::Mish(x), mish)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), T::tanh)
    }

    /// Column `j` becomes `scale[j % scale.len()] * tanh(x_j)`.
    pub fn scaled_tanh(&mut self, x: Var, scale: &[T]) -> Result<Var> {
        let (rows, n) = self.dims(x);
        if scale.is_empty() || n % scale.len() != 0 {
            return Err(shape_err("scaled_tanh", scale.len(), n));
        }
        let full: Vec<T> = (0..n).map(|j| scale[j % scale.len()]).collect();
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(n) {
            row.iter_mut()
                .zip(&full)
                .for_each(|(v, s)| *v = *s * v.tanh());
        }
        debug_assert_eq!(value.rows(), rows);
        Ok(self.push(value, Op::ScaledTanh(x, full)))
    }

    fn binary(&mut self, a: Var, b: Var, op: Op<T>, ctx: &str, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(a, b, ctx)?;
        let mut value = self.value(a).clone();
        value
            .data_mut()
            .iter_mut()
            .zip(self.nodes[b.0].value.data())
            .for_each(|(x, &y)| *x = f(*x, y));
        Ok(self.push(value, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    /// Elementwise minimum; the gradient goes to the selected operand
    /// (the first one on ties).
    pub fn min(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Min(a, b), "min", |x, y| if x <= y { x } else { y })
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.unary(x, Op::Scale(x, s), |v| v * s)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.dims(a);
        let (rb, cb) = self.dims(b);
        if ra != rb {
            return Err(shape_err("concat rows", ra, rb));
        }
        let mut out = Vec::with_capacity(ra * (ca + cb));
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        for r in 0..ra {
            out.extend_from_slice(&va[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&vb[r * cb..(r + 1) * cb]);
        }
        Ok(self.push(Tensor::new(vec![ra, ca + cb], out)?, Op::ConcatCols(a, b)))
    }

    /// Identity forward, zero gradient backward.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::StopGrad)
    }

    /// Forward value `hard`, backward identity into `soft`; equivalent to
    /// `soft + sg(hard − soft)` without the cancellation round-off.
    pub fn straight_through(&mut self, soft: Var, hard: Tensor<T>) -> Result<Var> {
        if hard.shape() != self.value(soft).shape() {
            return Err(shape_err("straight_through", self.value(soft).shape(), hard.shape()));
        }
        let value = match &mut self.residuals {
            ResidualMode::Off => hard,
            ResidualMode::Record(store) => {
                let soft_v = &self.nodes[soft.0].value;
                let mut r = hard.clone();
                r.data_mut()
                    .iter_mut()
                    .zip(soft_v.data())
                    .for_each(|(h, s)| *h -= *s);
                store.push(r);
                hard
            }
            ResidualMode::Replay(store, cursor) => {
                let r = store.get(*cursor).ok_or_else(|| {
                    Error::Fsq("residual replay ran out of recorded residuals".into())
                })?;
                *cursor += 1;
                let mut v = self.nodes[soft.0].value.clone();
                v.data_mut()
                    .iter_mut()
                    .zip(r.data())
                    .for_each(|(s, rr)| *s += *rr);
                v
            }
        };
        Ok(self.push(value, Op::StraightThrough(soft)))
    }

    /// Row-wise cosine similarity `[B, n] × [B, n] → [B, 1]`, each operand
    /// normalized by `max(‖·‖, eps)`.
    pub fn cosine_rows(&mut self, a: Var, b: Var, eps: T) -> Result<Var> {
        self.same_shape(a, b, "cosine")?;
        let (rows, n) = self.dims(a);
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut norm_a = Vec::with_capacity(rows);
        let mut norm_b = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let (ra, rb) = (&va[r * n..(r + 1) * n], &vb[r * n..(r + 1) * n]);
            let dot: T = ra.iter().zip(rb).map(|(x, y)| *x * *y).sum();
            let na = ra.iter().map(|x| *x * *x).sum::<T>().sqrt();
            let nb = rb.iter().map(|x| *x * *x).sum::<T>().sqrt();
            out.push(dot / (na.max(eps) * nb.max(eps)));
            norm_a.push(na);
            norm_b.push(nb);
        }
        Ok(self.push(
            Tensor::new(vec![rows, 1], out)?,
            Op::CosineRows {
                a,
                b,
                norm_a,
                norm_b,
                eps,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().copied().sum::<T>() / T::from_usize(t.numel()).unwrap();
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    fn accumulate(&mut self, v: Var, g: Vec<T>) {
        let node = &mut self.nodes[v.0];
        // Constant leaves without a parameter source never need gradients,
        // but keeping them is cheap and useful for tests.
        match &mut node.grad {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
            None => node.grad = Some(g),
        }
    }

    /// Populates gradients of every node reachable from the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::NotScalar(self.value(loss).shape().to_vec()));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(gy) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.local_grads(i, &gy)?;
            self.nodes[i].grad = Some(gy);
            for (v, g) in contributions {
                self.accumulate(v, g);
            }
        }
        Ok(())
    }

    fn local_grads(&self, i: usize, gy: &[T]) -> Result<Vec<(Var, Vec<T>)>> {
        let node = &self.nodes[i];
        let out = match &node.op {
            Op::Leaf | Op::StopGrad => vec![],
            Op::MatMulT(x, w) => {
                let (b, k) = self.dims(*x);
                let (n, _) = self.dims(*w);
                // dx = gy · w  ([b,n]·[n,k]); dw = gyᵀ · x ([n,b]·[b,k]).
                let mut dx = vec![T::zero(); b * k];
                T::gemm(
                    b,
                    n,
                    k,
                    T::one(),
                    gy,
                    n as isize,
                    1,
                    self.value(*w).data(),
                    k as isize,
                    1,
                    T::zero(),
                    &mut dx,
                    k as isize,
                    1,
                );
                let mut dw = vec![T::zero(); n * k];
                T::gemm(
                    n,
                    b,
                    k,
                    T::one(),
                    gy,
                    1,
                    n as isize,
                    self.value(*x).data(),
                    k as isize,
                    1,
                    T::zero(),
                    &mut dw,
                    k as isize,
                    1,
                );
                vec![(*x, dx), (*w, dw)]
            }
            Op::AddRow(x, bias) => {
                let n = self.value(*bias).numel();
                let mut db = vec![T::zero(); n];
                for row in gy.chunks(n) {
                    db.iter_mut().zip(row).for_each(|(a, b)| *a += *b);
                }
                vec![(*x, gy.to_vec()), (*bias, db)]
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (_, n) = self.dims(*x);
                let nf = T::from_usize(n).unwrap();
                let g = self.value(*gain).data();
                let mut dx = vec![T::zero(); gy.len()];
                let mut dg = vec![T::zero(); n];
                let mut db = vec![T::zero(); n];
                for (r, (gy_row, xh_row)) in gy.chunks(n).zip(xhat.chunks(n)).enumerate() {
                    let mut mean_d = T::zero();
                    let mut mean_dx = T::zero();
                    for j in 0..n {
                        let d = gy_row[j] * g[j];
                        mean_d += d;
                        mean_dx += d * xh_row[j];
                        dg[j] += gy_row[j] * xh_row[j];
                        db[j] += gy_row[j];
                    }
                    mean_d /= nf;
                    mean_dx /= nf;
                    let rs = rstd[r];
                    for j in 0..n {
                        let d = gy_row[j] * g[j];
                        dx[r * n + j] = rs * (d - mean_d - xh_row[j] * mean_dx);
                    }
                }
                vec![(*x, dx), (*gain, dg), (*bias, db)]
            }
            Op::Mish(x) => {
                let xs = self.value(*x).data();
                let dx = gy.iter().zip(xs).map(|(g, &v)| *g * mish_grad(v)).collect();
                vec![(*x, dx)]
            }
            Op::Tanh(x) => {
                let ys = node.value.data();
                let dx = gy
                    .iter()
                    .zip(ys)
                    .map(|(g, &y)| *g * (T::one() - y * y))
                    .collect();
                vec![(*x, dx)]
            }
            Op::ScaledTanh(x, scale) => {
                let xs = self.value(*x).data();
                let n = scale.len();
                let dx = gy
                    .iter()
                    .zip(xs)
                    .enumerate()
                    .map(|(i, (g, &v))| {
                        let t = v.tanh();
                        *g * scale[i % n] * (T::one() - t * t)
                    })
                    .collect();
                vec![(*x, dx)]
            }
            Op::Add(a, b) => vec![(*a, gy.to_vec()), (*b, gy.to_vec())],
            Op::Sub(a, b) => vec![(*a, gy.to_vec()), (*b, gy.iter().map(|g| -*g).collect())],
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let da = gy.iter().zip(vb).map(|(g, y)| *g * *y).collect();
                let db = gy.iter().zip(va).map(|(g, x)| *g * *x).collect();
                vec![(*a, da), (*b, db)]
            }
            Op::Min(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let mut da = vec![T::zero(); gy.len()];
                let mut db = vec![T::zero(); gy.len()];
                for i in 0..gy.len() {
                    if va[i] <= vb[i] {
                        da[i] = gy[i];
                    } else {
                        db[i] = gy[i];
                    }
                }
                vec![(*a, da), (*b, db)]
            }
            Op::Scale(x, s) => vec![(*x, gy.iter().map(|g| *g * *s).collect())],
            Op::Square(x) => {
                let xs = self.value(*x).data();
                let two = T::of(2.0);
                vec![(*x, gy.iter().zip(xs).map(|(g, v)| *g * two * *v).collect())]
            }
            Op::ConcatCols(a, b) => {
                let (rows, ca) = self.dims(*a);
                let (_, cb) = self.dims(*b);
                let mut da = Vec::with_capacity(rows * ca);
                let mut db = Vec::with_capacity(rows * cb);
                for row in gy.chunks(ca + cb) {
                    da.extend_from_slice(&row[..ca]);
                    db.extend_from_slice(&row[ca..]);
                }
                vec![(*a, da), (*b, db)]
            }
            Op::StraightThrough(soft) => vec![(*soft, gy.to_vec())],
            Op::CosineRows {
                a,
                b,
                norm_a,
                norm_b,
                eps,
            } => {
                let (rows, n) = self.dims(*a);
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let cos = node.value.data();
                let mut da = vec![T::zero(); rows * n];
                let mut db = vec![T::zero(); rows * n];
                for r in 0..rows {
                    let (na, nb) = (norm_a[r], norm_b[r]);
                    let (ga, gb) = (na.max(*eps), nb.max(*eps));
                    let c = cos[r];
                    let g = gy[r];
                    // When a norm sits on the guard the denominator is a
                    // constant and only the dot-product term remains.
                    let sa = if na > *eps { c / (na * na) } else { T::zero() };
                    let sb = if nb > *eps { c / (nb * nb) } else { T::zero() };
                    let inv = T::one() / (ga * gb);
                    for j in 0..n {
                        let (x, y) = (va[r * n + j], vb[r * n + j]);
                        da[r * n + j] = g * (y * inv - sa * x);
                        db[r * n + j] = g * (x * inv - sb * y);
                    }
                }
                vec![(*a, da), (*b, db)]
            }
            Op::Sum(x) => vec![(*x, vec![gy[0]; self.value(*x).numel()])],
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                vec![(*x, vec![gy[0] / T::from_usize(n).unwrap(); n])]
            }
        };
        Ok(out)
    }

    /// Adds this tape's gradients for leaves bound to `store` into the
    /// store's gradient slots. Returns the number of leaves matched.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) -> usize {
        let mut hits = 0;
        for n in &self.nodes {
            let (Some(src), Some(g)) = (&n.source, &n.grad) else {
                continue;
            };
            if src.tag != store.tag() {
                continue;
            }
            let slot = store.get_mut(src.index).grad.data_mut();
            slot.iter_mut().zip(g).for_each(|(a, b)| *a += *b);
            hits += 1;
        }
        hits
    }
}

/// `x · tanh(softplus(x))`. With `n = eˣ(eˣ + 2)`, `tanh(softplus(x)) =
/// n / (n + 2)`, which needs a single exponential.
#[inline]
pub fn mish<T: Scalar>(x: T) -> T {
    if x > T::of(20.0) {
        return x;
    }
    let e = x.exp();
    let n = e * (e + T::of(2.0));
    x * n / (n + T::of(2.0))
}

#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    if x > T::of(20.0) {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
fn mish_grad<T: Scalar>(x: T) -> T {
    if x > T::of(20.0) {
        return T::one();
    }
    let e = x.exp();
    let n = e * (e + T::of(2.0));
    let t = n / (n + T::of(2.0));
    let sig = e / (T::one() + e);
    t + x * (T::one() - t * t) * sig
}
