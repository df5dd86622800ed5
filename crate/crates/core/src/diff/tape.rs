use std::cell::RefCell;
use std::rc::Rc;

use super::kernels::{self, ConvGeom};
use super::sample::{crop_axis, AxisTap, SampleMap};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddScalar(usize),
    MulScalar(usize, T),
    Powf(usize, T),
    Log(usize),
    Exp(usize),
    Sigmoid(usize),
    Silu(usize),
    Softplus(usize),
    Clamp(usize, T, T),
    Maximum(usize, usize),
    Minimum(usize, usize),
    Sum(usize),
    RowSum(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Gather(usize, Rc<Vec<usize>>),
    Concat(Vec<usize>),
    SoftmaxRows(usize),
    Conv2d { input: usize, weight: usize, bias: Option<usize>, geom: ConvGeom, cols: Option<Vec<T>> },
    Sample { src: usize, map: Rc<SampleMap<T>> },
    CropResize { src: usize, bbox: usize, xs: Vec<AxisTap>, ys: Vec<AxisTap>, box_clip: [bool; 4] },
    Opaque(&'static str, Vec<usize>),
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records operations for reverse-mode differentiation.
///
/// One tape serves one forward/backward pass; it is not `Sync`.
pub struct Tape<T: Real = f32> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real = f32> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Real> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { value: Rc::new(value), op, requires_grad });
        Var { tape: self, id }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    fn grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf sharing storage with the caller (no copy).
    pub fn leaf_rc(&self, value: Rc<Tensor<T>>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var { tape: self, id }
    }

    pub fn scalar(&self, v: T) -> Var<'_, T> {
        self.constant(Tensor::scalar(v))
    }

    /// Record a value produced outside the tape's vocabulary of primitives.
    /// The result carries no gradient rule: a backward pass that needs to
    /// flow through it fails with [`Error::UnsupportedOp`].
    pub fn opaque<'t>(&'t self, name: &'static str, value: Tensor<T>, parents: &[Var<'t, T>]) -> Var<'t, T> {
        let rg = parents.iter().any(|p| p.requires_grad());
        self.push(value, Op::Opaque(name, parents.iter().map(|p| p.id).collect()), rg)
    }

    /// Reverse pass from a scalar output. Returns gradients for every leaf
    /// marked trainable.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let n_out = nodes[loss.id].value.numel();
        if n_out != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![T::one()]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                grads[id] = None;
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            if let Op::Leaf = node.op {
                grads[id] = Some(g);
                continue;
            }
            backprop(&nodes, id, &g, &mut grads)?;
        }
        let leaves = grads
            .into_iter()
            .enumerate()
            .map(|(id, g)| match (&nodes[id].op, g) {
                (Op::Leaf, Some(g)) => Some(g),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads: leaves })
    }
}

/// Leaf gradients from one backward pass, keyed by variable identity.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for `v`; zeros if `v` did not influence the output.
    pub fn wrt(&self, v: Var<'_, T>) -> Tensor<T> {
        let shape = v.shape();
        match self.grads.get(v.id).and_then(|g| g.as_ref()) {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn contains(&self, v: Var<'_, T>) -> bool {
        self.grads.get(v.id).map_or(false, |g| g.is_some())
    }
}

fn accumulate<T: Real>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    id: usize,
    f: impl FnOnce(&mut [T]),
) {
    if !nodes[id].requires_grad {
        return;
    }
    let n = nodes[id].value.numel();
    let g = grads[id].get_or_insert_with(|| vec![T::zero(); n]);
    f(g);
}

fn backprop<T: Real>(nodes: &[Node<T>], id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
    let out = &nodes[id].value;
    let val = |i: usize| -> &Tensor<T> { &nodes[i].value };
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, |ga| zip_add(ga, g));
            accumulate(nodes, grads, *b, |gb| zip_add(gb, g));
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, |ga| zip_add(ga, g));
            accumulate(nodes, grads, *b, |gb| {
                for (x, &y) in gb.iter_mut().zip(g) {
                    *x -= y;
                }
            });
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            accumulate(nodes, grads, *a, |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * bv[i];
                }
            });
            accumulate(nodes, grads, *b, |gb| {
                for i in 0..gb.len() {
                    gb[i] += g[i] * av[i];
                }
            });
        }
        Op::Div(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            accumulate(nodes, grads, *a, |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] / bv[i];
                }
            });
            accumulate(nodes, grads, *b, |gb| {
                for i in 0..gb.len() {
                    gb[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                }
            });
        }
        Op::AddScalar(a) => accumulate(nodes, grads, *a, |ga| zip_add(ga, g)),
        Op::MulScalar(a, s) => accumulate(nodes, grads, *a, |ga| {
            for (x, &y) in ga.iter_mut().zip(g) {
                *x += y * *s;
            }
        }),
        Op::Powf(a, p) => {
            let av = val(*a).data();
            let pm1 = *p - T::one();
            accumulate(nodes, grads, *a, |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * *p * av[i].powf(pm1);
                }
            });
        }
        Op::Log(a) => {
            let av = val(*a).data();
            accumulate(nodes, grads, *a, |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] / av[i];
                }
            });
        }
        Op::Exp(a) => {
            let ov = out.data();
            accumulate(nodes, grads, *a, |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * ov[i];
                }
            });
        }
        Op::Sigmoid(a) => {
            let ov = out.data();
            accumulate(nodes, grads, *a, |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * ov[i] * (T::one() - ov[i]);
                }
            });
        }
        Op::Silu(a) => {
            let av = val(*a).data();
            accumulate(nodes, grads, *a, |ga| {
                for i in 0..ga.len() {
                    let s = sigmoid(av[i]);
                    ga[i] += g[i] * s * (T::one() + av[i] * (T::one() - s));
                }
            });
        }
        Op::Softplus(a) => {
            let av = val(*a).data();
            accumulate(nodes, grads, *a, |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * sigmoid(av[i]);
                }
            });
        }
        Op::Clamp(a, lo, hi) => {
            let av = val(*a).data();
            accumulate(nodes, grads, *a, |ga| {
                for i in 0..ga.len() {
                    if av[i] > *lo && av[i] < *hi {
                        ga[i] += g[i];
                    }
                }
            });
        }
        Op::Maximum(a, b) | Op::Minimum(a, b) => {
            let is_max = matches!(nodes[id].op, Op::Maximum(..));
            let (av, bv) = (val(*a).data(), val(*b).data());
            let pick_a = |i: usize| if is_max { av[i] >= bv[i] } else { av[i] <= bv[i] };
            accumulate(nodes, grads, *a, |ga| {
                for i in 0..ga.len() {
                    if pick_a(i) {
                        ga[i] += g[i];
                    }
                }
            });
            accumulate(nodes, grads, *b, |gb| {
                for i in 0..gb.len() {
                    if !pick_a(i) {
                        gb[i] += g[i];
                    }
                }
            });
        }
        Op::Sum(a) => accumulate(nodes, grads, *a, |ga| {
            for x in ga.iter_mut() {
                *x += g[0];
            }
        }),
        Op::RowSum(a) => {
            let cols = val(*a).shape()[1];
            accumulate(nodes, grads, *a, |ga| {
                for (r, row) in ga.chunks_mut(cols).enumerate() {
                    for x in row {
                        *x += g[r];
                    }
                }
            });
        }
        Op::MatMul(a, b) => {
            let (at, bt) = (val(*a), val(*b));
            let (m, k, n) = (at.shape()[0], at.shape()[1], bt.shape()[1]);
            // dA = G·Bᵀ, dB = Aᵀ·G
            accumulate(nodes, grads, *a, |ga| kernels::gemm_nt(m, n, k, g, bt.data(), ga));
            accumulate(nodes, grads, *b, |gb| kernels::gemm_tn(k, m, n, at.data(), g, gb));
        }
        Op::Transpose(a) => {
            let (r, c) = (val(*a).shape()[0], val(*a).shape()[1]);
            accumulate(nodes, grads, *a, |ga| {
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] += g[j * r + i];
                    }
                }
            });
        }
        Op::Reshape(a) => accumulate(nodes, grads, *a, |ga| zip_add(ga, g)),
        Op::Gather(a, idx) => accumulate(nodes, grads, *a, |ga| {
            for (&i, &gv) in idx.iter().zip(g) {
                ga[i] += gv;
            }
        }),
        Op::Concat(parts) => {
            let mut offset = 0;
            for &p in parts {
                let n = val(p).numel();
                accumulate(nodes, grads, p, |gp| zip_add(gp, &g[offset..offset + n]));
                offset += n;
            }
        }
        Op::SoftmaxRows(a) => {
            let cols = out.shape()[1];
            let ov = out.data();
            accumulate(nodes, grads, *a, |ga| {
                for r in 0..ov.len() / cols {
                    let (y, gr) = (&ov[r * cols..(r + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    let s: T = y.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                    for c in 0..cols {
                        ga[r * cols + c] += y[c] * (gr[c] - s);
                    }
                }
            });
        }
        Op::Conv2d { input, weight, bias, geom, cols } => {
            let (gm, p, q) = (*geom, geom.out_pixels(), geom.patch_len());
            let wv = val(*weight).data();
            if let Some(b) = bias {
                accumulate(nodes, grads, *b, |gb| {
                    for (o, gbo) in gb.iter_mut().enumerate() {
                        *gbo += g[o * p..(o + 1) * p].iter().copied().sum::<T>();
                    }
                });
            }
            accumulate(nodes, grads, *weight, |gw| {
                let cols = cols.as_ref().expect("unfolded input retained for weight gradient");
                kernels::gemm_nt(gm.out_c, p, q, g, cols, gw);
            });
            accumulate(nodes, grads, *input, |gi| {
                let mut gcols = vec![T::zero(); q * p];
                kernels::gemm_tn(q, gm.out_c, p, wv, g, &mut gcols);
                kernels::col2im(&gm, &gcols, gi);
            });
        }
        Op::Sample { src, map } => {
            let c = val(*src).shape()[0];
            accumulate(nodes, grads, *src, |gs| map.apply_transpose(c, g, gs));
        }
        Op::CropResize { src, bbox, xs, ys, box_clip } => {
            let sv = val(*src);
            let (c, h, w) = (sv.shape()[0], sv.shape()[1], sv.shape()[2]);
            let (oh, ow) = (ys.len(), xs.len());
            let data = sv.data();
            accumulate(nodes, grads, *src, |gs| {
                for ch in 0..c {
                    let base = ch * h * w;
                    for (i, ty) in ys.iter().enumerate() {
                        let fy = T::from_f64(ty.frac);
                        for (j, tx) in xs.iter().enumerate() {
                            let fx = T::from_f64(tx.frac);
                            let gv = g[(ch * oh + i) * ow + j];
                            gs[base + ty.i0 * w + tx.i0] += gv * (T::one() - fx) * (T::one() - fy);
                            gs[base + ty.i0 * w + tx.i1] += gv * fx * (T::one() - fy);
                            gs[base + ty.i1 * w + tx.i0] += gv * (T::one() - fx) * fy;
                            gs[base + ty.i1 * w + tx.i1] += gv * fx * fy;
                        }
                    }
                }
            });
            accumulate(nodes, grads, *bbox, |gb| {
                let mut d = [T::zero(); 4];
                for ch in 0..c {
                    let base = ch * h * w;
                    for (i, ty) in ys.iter().enumerate() {
                        let fy = T::from_f64(ty.frac);
                        let r0 = base + ty.i0 * w;
                        let r1 = base + ty.i1 * w;
                        for (j, tx) in xs.iter().enumerate() {
                            let fx = T::from_f64(tx.frac);
                            let gv = g[(ch * oh + i) * ow + j];
                            let (v00, v01) = (data[r0 + tx.i0], data[r0 + tx.i1]);
                            let (v10, v11) = (data[r1 + tx.i0], data[r1 + tx.i1]);
                            let dx = (T::one() - fy) * (v01 - v00) + fy * (v11 - v10);
                            let dy = (T::one() - fx) * (v10 - v00) + fx * (v11 - v01);
                            let (gx, gy) = (gv * dx, gv * dy);
                            d[0] += gx * T::from_f64(tx.d_lo);
                            d[2] += gx * T::from_f64(tx.d_hi);
                            d[1] += gy * T::from_f64(ty.d_lo);
                            d[3] += gy * T::from_f64(ty.d_hi);
                        }
                    }
                }
                for k in 0..4 {
                    if !box_clip[k] {
                        gb[k] += d[k];
                    }
                }
            });
        }
        Op::Opaque(name, parents) => {
            if parents.iter().any(|&p| nodes[p].requires_grad) {
                return Err(Error::UnsupportedOp(name));
            }
        }
    }
    Ok(())
}

fn zip_add<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.numel()
    }

    pub fn item(&self) -> T {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.grad_of(self.id)
    }

    fn same_tape(&self, other: &Var<'t, T>) {
        assert!(std::ptr::eq(self.tape, other.tape), "variables from different tapes");
    }

    fn unary(&self, op: Op<T>, f: impl Fn(T) -> T) -> Var<'t, T> {
        let v = self.value().map(f);
        self.tape.push(v, op, self.requires_grad())
    }

    fn binary(&self, other: &Var<'t, T>, name: &str, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, bool)> {
        self.same_tape(other);
        let (a, b) = (self.value(), other.value());
        if a.numel() != b.numel() {
            return Err(Error::Shape(format!("{name}: {:?} vs {:?}", a.shape(), b.shape())));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(a.shape().to_vec(), data)?;
        Ok((t, self.requires_grad() || other.requires_grad()))
    }

    pub fn add(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (t, rg) = self.binary(other, "add", |x, y| x + y)?;
        Ok(self.tape.push(t, Op::Add(self.id, other.id), rg))
    }

    pub fn sub(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (t, rg) = self.binary(other, "sub", |x, y| x - y)?;
        Ok(self.tape.push(t, Op::Sub(self.id, other.id), rg))
    }

    pub fn mul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (t, rg) = self.binary(other, "mul", |x, y| x * y)?;
        Ok(self.tape.push(t, Op::Mul(self.id, other.id), rg))
    }

    pub fn div(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (t, rg) = self.binary(other, "div", |x, y| x / y)?;
        Ok(self.tape.push(t, Op::Div(self.id, other.id), rg))
    }

    pub fn maximum(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (t, rg) = self.binary(other, "maximum", |x, y| if x >= y { x } else { y })?;
        Ok(self.tape.push(t, Op::Maximum(self.id, other.id), rg))
    }

    pub fn minimum(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (t, rg) = self.binary(other, "minimum", |x, y| if x <= y { x } else { y })?;
        Ok(self.tape.push(t, Op::Minimum(self.id, other.id), rg))
    }

    pub fn add_scalar(&self, s: T) -> Var<'t, T> {
        self.unary(Op::AddScalar(self.id), |x| x + s)
    }

    pub fn mul_scalar(&self, s: T) -> Var<'t, T> {
        self.unary(Op::MulScalar(self.id, s), |x| x * s)
    }

    pub fn neg(&self) -> Var<'t, T> {
        self.mul_scalar(-T::one())
    }

    /// `s - self`
    pub fn rsub_scalar(&self, s: T) -> Var<'t, T> {
        self.neg().add_scalar(s)
    }

    pub fn powf(&self, p: T) -> Var<'t, T> {
        self.unary(Op::Powf(self.id, p), |x| x.powf(p))
    }

    pub fn square(&self) -> Result<Var<'t, T>> {
        self.mul(self)
    }

    pub fn log(&self) -> Var<'t, T> {
        self.unary(Op::Log(self.id), |x| x.ln())
    }

    pub fn exp(&self) -> Var<'t, T> {
        self.unary(Op::Exp(self.id), |x| x.exp())
    }

    pub fn sigmoid(&self) -> Var<'t, T> {
        self.unary(Op::Sigmoid(self.id), sigmoid)
    }

    /// `x·σ(x)`
    pub fn silu(&self) -> Var<'t, T> {
        self.unary(Op::Silu(self.id), |x| x * sigmoid(x))
    }

    /// `log(1 + eˣ)`, evaluated without overflow.
    pub fn softplus(&self) -> Var<'t, T> {
        self.unary(Op::Softplus(self.id), |x| x.max(T::zero()) + (-x.abs()).exp().ln_1p())
    }

    /// Gradient passes only where `lo < x < hi`.
    pub fn clamp(&self, lo: T, hi: T) -> Var<'t, T> {
        self.unary(Op::Clamp(self.id, lo, hi), |x| x.max(lo).min(hi))
    }

    pub fn sum(&self) -> Var<'t, T> {
        let s = self.value().sum();
        self.tape.push(Tensor::scalar(s), Op::Sum(self.id), self.requires_grad())
    }

    pub fn mean(&self) -> Var<'t, T> {
        let n = T::from_f64(self.numel() as f64);
        self.sum().mul_scalar(T::one() / n)
    }

    /// Sum across columns of a 2-D value: `[r, c] -> [r]`.
    pub fn row_sum(&self) -> Result<Var<'t, T>> {
        let v = self.value();
        let [r, c] = dims2(v.shape(), "row_sum")?;
        let data = v.data().chunks(c).map(|row| row.iter().copied().sum()).collect();
        Ok(self.tape.push(Tensor::new(vec![r], data)?, Op::RowSum(self.id), self.requires_grad()))
    }

    pub fn matmul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(other);
        let (a, b) = (self.value(), other.value());
        let [m, k] = dims2(a.shape(), "matmul lhs")?;
        let [k2, n] = dims2(b.shape(), "matmul rhs")?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul {:?} x {:?}", a.shape(), b.shape())));
        }
        let mut c = vec![T::zero(); m * n];
        kernels::gemm_nn(m, k, n, a.data(), b.data(), &mut c);
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(Tensor::new(vec![m, n], c)?, Op::MatMul(self.id, other.id), rg))
    }

    pub fn transpose(&self) -> Result<Var<'t, T>> {
        let v = self.value();
        let [r, c] = dims2(v.shape(), "transpose")?;
        let d = v.data();
        let mut t = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = d[i * c + j];
            }
        }
        Ok(self.tape.push(Tensor::new(vec![c, r], t)?, Op::Transpose(self.id), self.requires_grad()))
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'t, T>> {
        let t = (*self.value()).clone().reshape(shape)?;
        Ok(self.tape.push(t, Op::Reshape(self.id), self.requires_grad()))
    }

    /// `out[i] = self.flat[indices[i]]`, shaped as `shape`.
    pub fn gather(&self, indices: Rc<Vec<usize>>, shape: impl Into<Vec<usize>>) -> Result<Var<'t, T>> {
        let v = self.value();
        let n = v.numel();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::Shape(format!("gather index {bad} out of range for {n} values")));
        }
        let data = indices.iter().map(|&i| v.data()[i]).collect();
        let t = Tensor::new(shape, data)?;
        Ok(self.tape.push(t, Op::Gather(self.id, indices), self.requires_grad()))
    }

    /// Single element of the flattened value as a scalar variable.
    pub fn at(&self, index: usize) -> Result<Var<'t, T>> {
        self.gather(Rc::new(vec![index]), vec![1])
    }

    /// Softmax along each row of a 2-D value.
    pub fn softmax_rows(&self) -> Result<Var<'t, T>> {
        let v = self.value();
        let [_, c] = dims2(v.shape(), "softmax_rows")?;
        let mut out = Vec::with_capacity(v.numel());
        for row in v.data().chunks(c) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let e: Vec<T> = row.iter().map(|&x| (x - m).exp()).collect();
            let s: T = e.iter().copied().sum();
            out.extend(e.into_iter().map(|x| x / s));
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        Ok(self.tape.push(t, Op::SoftmaxRows(self.id), self.requires_grad()))
    }

    /// 2-D convolution of a `C×H×W` value with `weight: [out_c, C, k, k]`
    /// and optional `bias: [out_c]`.
    pub fn conv2d(
        &self,
        weight: &Var<'t, T>,
        bias: Option<&Var<'t, T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'t, T>> {
        let (x, w) = (self.value(), weight.value());
        let (xs, ws) = (x.shape(), w.shape());
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] || ws[2] != ws[3] {
            return Err(Error::Shape(format!("conv2d input {xs:?} weight {ws:?}")));
        }
        let geom = ConvGeom::new(xs[0], xs[1], xs[2], ws[0], ws[2], stride, pad)
            .ok_or_else(|| Error::Shape(format!("conv2d kernel {ws:?} too large for {xs:?}")))?;
        if let Some(b) = bias {
            if b.numel() != ws[0] {
                return Err(Error::Shape(format!("conv2d bias {:?} for {} outputs", b.shape(), ws[0])));
            }
        }
        let cols = kernels::im2col(&geom, x.data());
        let p = geom.out_pixels();
        let mut out = vec![T::zero(); geom.out_c * p];
        if let Some(b) = bias {
            let bv = b.value();
            for (o, chunk) in out.chunks_mut(p).enumerate() {
                chunk.fill(bv.data()[o]);
            }
        }
        kernels::gemm_nn(geom.out_c, geom.patch_len(), p, w.data(), &cols, &mut out);
        let rg = self.requires_grad() || weight.requires_grad() || bias.map_or(false, |b| b.requires_grad());
        let op = Op::Conv2d {
            input: self.id,
            weight: weight.id,
            bias: bias.map(|b| b.id),
            geom,
            cols: if weight.requires_grad() { Some(cols) } else { None },
        };
        let t = Tensor::new(vec![geom.out_c, geom.out_h, geom.out_w], out)?;
        Ok(self.tape.push(t, op, rg))
    }

    /// Resample a `C×h×w` value through a fixed bilinear plan.
    pub fn sample(&self, map: Rc<SampleMap<T>>) -> Result<Var<'t, T>> {
        let v = self.value();
        let s = v.shape();
        if s.len() != 3 || s[1] != map.src_h || s[2] != map.src_w {
            return Err(Error::Shape(format!(
                "sample plan for {}x{} applied to {s:?}",
                map.src_h, map.src_w
            )));
        }
        let out = map.apply(s[0], v.data());
        let t = Tensor::new(vec![s[0], map.out_h, map.out_w], out)?;
        Ok(self.tape.push(t, Op::Sample { src: self.id, map }, self.requires_grad()))
    }

    /// Bilinear crop of the box `[x0, y0, x1, y1]` (pixel-edge coordinates)
    /// resized to `out_h×out_w`; differentiable in both the image and the box.
    /// The box is clipped to the image first; borders replicate.
    pub fn crop_resize(&self, bbox: &Var<'t, T>, out_h: usize, out_w: usize) -> Result<Var<'t, T>> {
        self.same_tape(bbox);
        let v = self.value();
        let s = v.shape();
        if s.len() != 3 || bbox.numel() != 4 || out_h == 0 || out_w == 0 {
            return Err(Error::Shape(format!("crop_resize image {s:?} box {:?}", bbox.shape())));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let b = bbox.value();
        let raw: Vec<f64> = b.data().iter().map(|x| x.as_f64()).collect();
        if raw.iter().any(|x| !x.is_finite()) {
            return Err(Error::DegenerateBox(format!("non-finite box {raw:?}")));
        }
        let limits = [w as f64, h as f64, w as f64, h as f64];
        let mut clip = [false; 4];
        let mut bx = [0.0; 4];
        for k in 0..4 {
            bx[k] = raw[k].clamp(0.0, limits[k]);
            clip[k] = bx[k] != raw[k];
        }
        if bx[2] - bx[0] <= 0.0 || bx[3] - bx[1] <= 0.0 {
            return Err(Error::DegenerateBox(format!("box {raw:?} has no area inside {w}x{h}")));
        }
        let xs = crop_axis(bx[0], bx[2], out_w, w);
        let ys = crop_axis(bx[1], bx[3], out_h, h);
        let data = v.data();
        let mut out = Vec::with_capacity(c * out_h * out_w);
        for ch in 0..c {
            let base = ch * h * w;
            for ty in &ys {
                let fy = T::from_f64(ty.frac);
                let r0 = base + ty.i0 * w;
                let r1 = base + ty.i1 * w;
                for tx in &xs {
                    let fx = T::from_f64(tx.frac);
                    let top = data[r0 + tx.i0] * (T::one() - fx) + data[r0 + tx.i1] * fx;
                    let bot = data[r1 + tx.i0] * (T::one() - fx) + data[r1 + tx.i1] * fx;
                    out.push(top * (T::one() - fy) + bot * fy);
                }
            }
        }
        let rg = self.requires_grad() || bbox.requires_grad();
        let t = Tensor::new(vec![c, out_h, out_w], out)?;
        Ok(self.tape.push(t, Op::CropResize { src: self.id, bbox: bbox.id, xs, ys, box_clip: clip }, rg))
    }
}

/// Concatenate flattened values into one vector.
pub fn concat<'t, T: Real>(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    let first = parts.first().ok_or_else(|| Error::Argument("concat of nothing".into()))?;
    let tape = first.tape;
    let mut data = Vec::new();
    let mut rg = false;
    for p in parts {
        p.same_tape(first);
        data.extend_from_slice(p.value().data());
        rg |= p.requires_grad();
    }
    let t = Tensor::from_vec(data);
    Ok(tape.push(t, Op::Concat(parts.iter().map(|p| p.id).collect()), rg))
}

fn dims2(shape: &[usize], what: &str) -> Result<[usize; 2]> {
    match shape {
        [r, c] => Ok([*r, *c]),
        _ => Err(Error::Shape(format!("{what} expects a 2-D value, got {shape:?}"))),
    }
}
