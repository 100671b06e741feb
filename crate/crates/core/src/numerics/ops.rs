use super::gemm::{gemm, Layout};
use super::{BackwardOp, Graph, Real, Tensor, Var};
use crate::error::{Error, Result};

/// Pointwise operations addressable by name.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Relu,
    Sigmoid,
    Tanh,
    Add,
    Mul,
}

#[inline]
pub(crate) fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

/// How `small` broadcasts into `big`: each small element covers a
/// contiguous block of `inner` big elements.
fn broadcast_inner(op: &'static str, big: &[usize], small: &[usize]) -> Result<usize> {
    let padded = |i: usize| small.get(i).copied().unwrap_or(1);
    let prefix = (0..big.len()).rev().find(|&i| padded(i) != 1).map_or(0, |i| i + 1);
    if small.len() > big.len() || (0..prefix).any(|i| padded(i) != big[i]) {
        return Err(Error::shape(
            op,
            format!("shapes {big:?} and {small:?} are not broadcast-compatible (trailing singleton axes only)"),
        ));
    }
    Ok(big[prefix..].iter().product())
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
}

struct BinaryOp {
    kind: Binary,
    // Which input is the broadcast one (None when shapes are equal).
    small: Option<usize>,
    inner: usize,
}

impl<F: Real> BackwardOp<F> for BinaryOp {
    fn name(&self) -> &'static str {
        match self.kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        }
    }

    fn backward(
        &self,
        inputs: &[&Tensor<F>],
        _output: &Tensor<F>,
        grad: &Tensor<F>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<F>>>> {
        let g = grad.data();
        let inner = self.inner;
        // Gradient as if both inputs had the full shape, then reduced.
        let full = |i: usize| -> Vec<F> {
            match self.kind {
                Binary::Add => g.to_vec(),
                Binary::Sub => {
                    if i == 0 {
                        g.to_vec()
                    } else {
                        g.iter().map(|&x| -x).collect()
                    }
                }
                Binary::Mul => {
                    let other = inputs[1 - i];
                    let od = other.data();
                    if self.small == Some(1 - i) {
                        g.iter().enumerate().map(|(j, &x)| x * od[j / inner]).collect()
                    } else {
                        g.iter().zip(od).map(|(&x, &o)| x * o).collect()
                    }
                }
            }
        };
        let mut out = Vec::with_capacity(2);
        for i in 0..2 {
            if !needs[i] {
                out.push(None);
                continue;
            }
            let gi = full(i);
            let t = if self.small == Some(i) {
                let reduced: Vec<F> = gi.chunks(inner).map(|c| c.iter().copied().sum()).collect();
                Tensor::new(inputs[i].shape().to_vec(), reduced)?
            } else {
                Tensor::new(inputs[i].shape().to_vec(), gi)?
            };
            out.push(Some(t));
        }
        Ok(out)
    }
}

#[derive(Clone, Copy)]
enum Unary {
    Relu,
    Sigmoid,
    Tanh,
}

struct UnaryOp(Unary);

impl<F: Real> BackwardOp<F> for UnaryOp {
    fn name(&self) -> &'static str {
        match self.0 {
            Unary::Relu => "relu",
            Unary::Sigmoid => "sigmoid",
            Unary::Tanh => "tanh",
        }
    }

    fn backward(
        &self,
        inputs: &[&Tensor<F>],
        output: &Tensor<F>,
        grad: &Tensor<F>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<F>>>> {
        let x = inputs[0].data();
        let y = output.data();
        let g = grad.data();
        let d: Vec<F> = match self.0 {
            Unary::Relu => x
                .iter()
                .zip(g)
                .map(|(&x, &g)| if x > F::zero() { g } else { F::zero() })
                .collect(),
            Unary::Sigmoid => y
                .iter()
                .zip(g)
                .map(|(&y, &g)| g * y * (F::one() - y))
                .collect(),
            Unary::Tanh => y
                .iter()
                .zip(g)
                .map(|(&y, &g)| g * (F::one() - y * y))
                .collect(),
        };
        Ok(vec![Some(Tensor::new(inputs[0].shape().to_vec(), d)?)])
    }
}

struct ScaleOp<F>(F);

impl<F: Real> BackwardOp<F> for ScaleOp<F> {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<F>],
        _output: &Tensor<F>,
        grad: &Tensor<F>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<F>>>> {
        Ok(vec![Some(grad.map(|g| g * self.0))])
    }
}

struct SumOp;

impl<F: Real> BackwardOp<F> for SumOp {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<F>],
        _output: &Tensor<F>,
        grad: &Tensor<F>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<F>>>> {
        Ok(vec![Some(Tensor::full(inputs[0].shape().to_vec(), grad.item()))])
    }
}

struct ReshapeOp;

impl<F: Real> BackwardOp<F> for ReshapeOp {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<F>],
        _output: &Tensor<F>,
        grad: &Tensor<F>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<F>>>> {
        Ok(vec![Some(grad.clone().reshape(inputs[0].shape().to_vec())?)])
    }
}

/// `out = x·Wᵀ + b` over the last axis of `x`.
struct AffineOp {
    rows: usize,
    fan_in: usize,
    fan_out: usize,
}

impl<F: Real> BackwardOp<F> for AffineOp {
    fn name(&self) -> &'static str {
        "affine"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<F>],
        _output: &Tensor<F>,
        grad: &Tensor<F>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<F>>>> {
        let (m, k, n) = (self.rows, self.fan_in, self.fan_out);
        let x = inputs[0];
        let w = inputs[1];
        let g = grad.data();
        let dx = if needs[0] {
            let mut dx = vec![F::zero(); m * k];
            gemm(m, n, k, g, Layout::rows(n), w.data(), Layout::rows(k), F::zero(), &mut dx, Layout::rows(k));
            Some(Tensor::new(x.shape().to_vec(), dx)?)
        } else {
            None
        };
        let dw = if needs[1] {
            let mut dw = vec![F::zero(); n * k];
            gemm(n, m, k, g, Layout::transposed(n), x.data(), Layout::rows(k), F::zero(), &mut dw, Layout::rows(k));
            Some(Tensor::new(w.shape().to_vec(), dw)?)
        } else {
            None
        };
        let mut out = vec![dx, dw];
        if inputs.len() == 3 {
            out.push(if needs[2] {
                let mut db = vec![F::zero(); n];
                for row in g.chunks(n) {
                    for (d, &v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                Some(Tensor::new(vec![n], db)?)
            } else {
                None
            });
        }
        Ok(out)
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Reorders axes: output axis `i` is input axis `axes[i]`.
pub(crate) fn permute_data<F: Real>(x: &Tensor<F>, axes: &[usize]) -> Tensor<F> {
    let in_shape = x.shape();
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = x.len();
    let xd = x.data();
    let mut out = Vec::with_capacity(n);
    let rank = out_shape.len();
    if rank == 0 {
        return x.clone();
    }
    let last = rank - 1;
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    let inner_len = out_shape[last];
    let inner_stride = src_strides[last];
    loop {
        for j in 0..inner_len {
            out.push(xd[base + j * inner_stride]);
        }
        // Advance the multi-index over all axes but the last.
        let mut ax = last;
        loop {
            if ax == 0 {
                return Tensor::new(out_shape, out).expect("permutation preserves size");
            }
            ax -= 1;
            idx[ax] += 1;
            base += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= src_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

struct PermuteOp {
    inverse: Vec<usize>,
}

impl<F: Real> BackwardOp<F> for PermuteOp {
    fn name(&self) -> &'static str {
        "permute"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<F>],
        _output: &Tensor<F>,
        grad: &Tensor<F>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<F>>>> {
        Ok(vec![Some(permute_data(grad, &self.inverse))])
    }
}

/// Copies `[outer, len_in, inner]` blocks between buffers.
fn copy_axis_block<F: Copy + std::ops::AddAssign>(
    src: &[F],
    src_len: usize,
    src_start: usize,
    dst: &mut [F],
    dst_len: usize,
    dst_start: usize,
    count: usize,
    outer: usize,
    inner: usize,
    accumulate: bool,
) {
    for o in 0..outer {
        let s = (o * src_len + src_start) * inner;
        let d = (o * dst_len + dst_start) * inner;
        let n = count * inner;
        if accumulate {
            for (a, &b) in dst[d..d + n].iter_mut().zip(&src[s..s + n]) {
                *a += b;
            }
        } else {
            dst[d..d + n].copy_from_slice(&src[s..s + n]);
        }
    }
}

fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, inner)
}

struct NarrowOp {
    axis: usize,
    start: usize,
}

impl<F: Real> BackwardOp<F> for NarrowOp {
    fn name(&self) -> &'static str {
        "narrow"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<F>],
        output: &Tensor<F>,
        grad: &Tensor<F>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<F>>>> {
        let shape = inputs[0].shape();
        let (outer, inner) = split_at_axis(shape, self.axis);
        let len = output.shape()[self.axis];
        let mut d = Tensor::zeros(shape.to_vec());
        copy_axis_block(
            grad.data(),
            len,
            0,
            d.data_mut(),
            shape[self.axis],
            self.start,
            len,
            outer,
            inner,
            false,
        );
        Ok(vec![Some(d)])
    }
}

struct ConcatOp {
    axis: usize,
}

impl<F: Real> BackwardOp<F> for ConcatOp {
    fn name(&self) -> &'static str {
        "concat"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<F>],
        output: &Tensor<F>,
        grad: &Tensor<F>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<F>>>> {
        let total = output.shape()[self.axis];
        let (outer, inner) = split_at_axis(output.shape(), self.axis);
        let mut start = 0;
        let mut out = Vec::with_capacity(inputs.len());
        for (x, &need) in inputs.iter().zip(needs) {
            let len = x.shape()[self.axis];
            if need {
                let mut d = Tensor::zeros(x.shape().to_vec());
                copy_axis_block(grad.data(), total, start, d.data_mut(), len, 0, len, outer, inner, false);
                out.push(Some(d));
            } else {
                out.push(None);
            }
            start += len;
        }
        Ok(out)
    }
}

impl<F: Real> Graph<F> {
    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let op_name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        };
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (small, inner) = if sa == sb {
            (None, 1)
        } else if self.value(a).len() >= self.value(b).len() {
            (Some(1), broadcast_inner(op_name, &sa, &sb)?)
        } else {
            (Some(0), broadcast_inner(op_name, &sb, &sa)?)
        };
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let f = |x: F, y: F| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let (shape, data): (Vec<usize>, Vec<F>) = match small {
            None => (sa, xa.iter().zip(xb).map(|(&x, &y)| f(x, y)).collect()),
            Some(1) => (sa, xa.iter().enumerate().map(|(j, &x)| f(x, xb[j / inner])).collect()),
            _ => (sb, xb.iter().enumerate().map(|(j, &y)| f(xa[j / inner], y)).collect()),
        };
        let value = Tensor::new(shape, data)?;
        self.record(&[a, b], value, Box::new(BinaryOp { kind, small, inner }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    fn unary(&mut self, kind: Unary, x: Var) -> Result<Var> {
        let f = |v: F| match kind {
            Unary::Relu => v.max(F::zero()),
            Unary::Sigmoid => sigmoid(v),
            Unary::Tanh => v.tanh(),
        };
        let value = self.value(x).map(f);
        self.record(&[x], value, Box::new(UnaryOp(kind)))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Tanh, x)
    }

    pub fn elementwise(&mut self, op: Elementwise, args: &[Var]) -> Result<Var> {
        let arity = match op {
            Elementwise::Add | Elementwise::Mul => 2,
            _ => 1,
        };
        if args.len() != arity {
            return Err(Error::InvalidArgument(format!(
                "{op:?} takes {arity} argument(s), got {}",
                args.len()
            )));
        }
        match op {
            Elementwise::Relu => self.relu(args[0]),
            Elementwise::Sigmoid => self.sigmoid(args[0]),
            Elementwise::Tanh => self.tanh(args[0]),
            Elementwise::Add => self.add(args[0], args[1]),
            Elementwise::Mul => self.mul(args[0], args[1]),
        }
    }

    pub fn scale(&mut self, x: Var, s: F) -> Result<Var> {
        let value = self.value(x).map(|v| v * s);
        self.record(&[x], value, Box::new(ScaleOp(s)))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total: F = self.value(x).data().iter().copied().sum();
        self.record(&[x], Tensor::scalar(total), Box::new(SumOp))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        self.record(&[x], value, Box::new(ReshapeOp))
    }

    /// `x·Wᵀ + b` applied over the last axis: `[*, In] → [*, Out]`.
    pub fn affine(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        let fan_in = *xs.last().unwrap_or(&1);
        if ws.len() != 2 || ws[1] != fan_in {
            return Err(Error::shape(
                "affine",
                format!("input {xs:?} incompatible with weight {ws:?}"),
            ));
        }
        let fan_out = ws[0];
        if let Some(b) = bias {
            let bs = self.shape(b);
            if bs != [fan_out] {
                return Err(Error::shape(
                    "affine",
                    format!("bias {bs:?} does not match weight {ws:?}"),
                ));
            }
        }
        let rows = self.value(x).len() / fan_in;
        let mut out = vec![F::zero(); rows * fan_out];
        if let Some(b) = bias {
            let bd = self.value(b).data();
            for row in out.chunks_mut(fan_out) {
                row.copy_from_slice(bd);
            }
        }
        gemm(
            rows,
            fan_in,
            fan_out,
            self.value(x).data(),
            Layout::rows(fan_in),
            self.value(weight).data(),
            Layout::transposed(fan_in),
            if bias.is_some() { F::one() } else { F::zero() },
            &mut out,
            Layout::rows(fan_out),
        );
        let mut shape = xs;
        if shape.is_empty() {
            shape.push(fan_out);
        } else {
            *shape.last_mut().unwrap() = fan_out;
        }
        let value = Tensor::new(shape, out)?;
        let op = Box::new(AffineOp { rows, fan_in, fan_out });
        match bias {
            Some(b) => self.record(&[x, weight, b], value, op),
            None => self.record(&[x, weight], value, op),
        }
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let rank = self.shape(x).len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape(
                "permute",
                format!("{axes:?} is not a permutation of {rank} axes"),
            ));
        }
        let mut inverse = vec![0; rank];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        let value = permute_data(self.value(x), axes);
        self.record(&[x], value, Box::new(PermuteOp { inverse }))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape(
                "narrow",
                format!("cannot take [{start}, {}) of axis {axis} in {shape:?}", start + len),
            ));
        }
        let (outer, inner) = split_at_axis(&shape, axis);
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut out = Tensor::zeros(out_shape);
        copy_axis_block(
            self.value(x).data(),
            shape[axis],
            start,
            out.data_mut(),
            len,
            0,
            len,
            outer,
            inner,
            false,
        );
        self.record(&[x], out, Box::new(NarrowOp { axis, start }))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(Error::Empty { op: "concat" });
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let ok = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape("concat", format!("{s:?} does not match {base:?}")));
            }
            total += s[axis];
        }
        let (outer, inner) = split_at_axis(&base, axis);
        let mut shape = base;
        shape[axis] = total;
        let mut out = Tensor::zeros(shape);
        let mut start = 0;
        for &v in xs {
            let len = self.shape(v)[axis];
            copy_axis_block(self.value(v).data(), len, 0, out.data_mut(), total, start, len, outer, inner, false);
            start += len;
        }
        self.record(xs, out, Box::new(ConcatOp { axis }))
    }

    /// Truncates or zero-pads the last axis to `len`.
    pub fn fit_last(&mut self, x: Var, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let axis = shape.len() - 1;
        let cur = shape[axis];
        if len <= cur {
            return if len == cur { Ok(x) } else { self.narrow(x, axis, 0, len) };
        }
        let mut zshape = shape;
        zshape[axis] = len - cur;
        let z = self.constant(Tensor::zeros(zshape));
        self.concat(&[x, z], axis)
    }
}
