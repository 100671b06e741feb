use super::gemm::{gemm, Layout};
use super::{BackwardOp, Graph, Real, Tensor, Var};
use crate::error::{Error, Result};

/// Number of frames a strided 1-D convolution produces.
pub fn conv_output_len(samples: usize, width: usize, stride: usize) -> Option<usize> {
    if stride == 0 || width == 0 || samples < width {
        return None;
    }
    Some((samples - width) / stride + 1)
}

/// `frames[n, l] = Σ_w kernels[n, w] · signal[l·stride + w]`.
fn conv_forward<F: Real>(signal: &[F], kernels: &[F], n: usize, w: usize, l: usize, stride: usize) -> Vec<F> {
    let mut out = vec![F::zero(); n * l];
    // Frame matrix [W × L] is a strided view of the signal.
    gemm(
        n,
        w,
        l,
        kernels,
        Layout::rows(w),
        signal,
        Layout::strided(0, 1, stride),
        F::zero(),
        &mut out,
        Layout::rows(l),
    );
    out
}

/// Overlap-add of kernel-weighted frames into a signal of `(l-1)·stride + w`.
fn transposed_forward<F: Real>(frames: &[F], kernels: &[F], n: usize, w: usize, l: usize, stride: usize) -> Vec<F> {
    // Per-frame contributions [L × W] = framesᵀ · kernels.
    let mut contrib = vec![F::zero(); l * w];
    gemm(
        l,
        n,
        w,
        frames,
        Layout::transposed(l),
        kernels,
        Layout::rows(w),
        F::zero(),
        &mut contrib,
        Layout::rows(w),
    );
    let mut out = vec![F::zero(); (l - 1) * stride + w];
    for (i, row) in contrib.chunks(w).enumerate() {
        for (o, &v) in out[i * stride..i * stride + w].iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

/// `dK[n, w] = Σ_l a[n, l] · signal[l·stride + w]`.
fn kernel_grad<F: Real>(a: &[F], signal: &[F], n: usize, w: usize, l: usize, stride: usize) -> Vec<F> {
    let mut dk = vec![F::zero(); n * w];
    gemm(
        n,
        l,
        w,
        a,
        Layout::rows(l),
        signal,
        Layout::strided(0, stride, 1),
        F::zero(),
        &mut dk,
        Layout::rows(w),
    );
    dk
}

struct Conv1dOp {
    filters: usize,
    width: usize,
    frames: usize,
    stride: usize,
}

impl<F: Real> BackwardOp<F> for Conv1dOp {
    fn name(&self) -> &'static str {
        "conv1d"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<F>],
        _output: &Tensor<F>,
        grad: &Tensor<F>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<F>>>> {
        let (n, w, l, s) = (self.filters, self.width, self.frames, self.stride);
        let signal = inputs[0];
        let kernels = inputs[1];
        let dsig = if needs[0] {
            let mut d = transposed_forward(grad.data(), kernels.data(), n, w, l, s);
            d.resize(signal.len(), F::zero());
            Some(Tensor::new(signal.shape().to_vec(), d)?)
        } else {
            None
        };
        let dk = if needs[1] {
            Some(Tensor::new(kernels.shape().to_vec(), kernel_grad(grad.data(), signal.data(), n, w, l, s))?)
        } else {
            None
        };
        Ok(vec![dsig, dk])
    }
}

struct TransposedConv1dOp {
    filters: usize,
    width: usize,
    frames: usize,
    stride: usize,
}

impl<F: Real> BackwardOp<F> for TransposedConv1dOp {
    fn name(&self) -> &'static str {
        "transposed_conv1d"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<F>],
        _output: &Tensor<F>,
        grad: &Tensor<F>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<F>>>> {
        let (n, w, l, s) = (self.filters, self.width, self.frames, self.stride);
        let frames = inputs[0];
        let kernels = inputs[1];
        let dframes = if needs[0] {
            Some(Tensor::new(frames.shape().to_vec(), conv_forward(grad.data(), kernels.data(), n, w, l, s))?)
        } else {
            None
        };
        let dk = if needs[1] {
            Some(Tensor::new(kernels.shape().to_vec(), kernel_grad(frames.data(), grad.data(), n, w, l, s))?)
        } else {
            None
        };
        Ok(vec![dframes, dk])
    }
}

fn kernel_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [n, w] => Ok((*n, *w)),
        _ => Err(Error::shape(op, format!("kernels must be [N, W], got {shape:?}"))),
    }
}

impl<F: Real> Graph<F> {
    /// `[1, T] → [N, L]` with `L = ⌊(T − W)/stride⌋ + 1`.
    pub fn conv1d(&mut self, signal: Var, kernels: Var, stride: usize) -> Result<Var> {
        let (n, w) = kernel_dims("conv1d", self.shape(kernels))?;
        let ss = self.shape(signal).to_vec();
        if ss.len() != 2 || ss[0] != 1 {
            return Err(Error::shape("conv1d", format!("signal must be [1, T], got {ss:?}")));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv1d stride must be at least 1".into()));
        }
        let t = ss[1];
        let l = conv_output_len(t, w, stride).ok_or(Error::InputTooShort {
            op: "conv1d",
            len: t,
            min: w,
        })?;
        let out = conv_forward(self.value(signal).data(), self.value(kernels).data(), n, w, l, stride);
        let value = Tensor::new([n, l], out)?;
        self.record(
            &[signal, kernels],
            value,
            Box::new(Conv1dOp {
                filters: n,
                width: w,
                frames: l,
                stride,
            }),
        )
    }

    /// `[N, L] → [1, (L−1)·stride + W]`; the adjoint of [`Graph::conv1d`].
    pub fn transposed_conv1d(&mut self, frames: Var, kernels: Var, stride: usize) -> Result<Var> {
        let (n, w) = kernel_dims("transposed_conv1d", self.shape(kernels))?;
        let fs = self.shape(frames).to_vec();
        if fs.len() != 2 || fs[0] != n {
            return Err(Error::shape(
                "transposed_conv1d",
                format!("frames {fs:?} do not match kernels [{n}, {w}]"),
            ));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("transposed_conv1d stride must be at least 1".into()));
        }
        let l = fs[1];
        let out = transposed_forward(self.value(frames).data(), self.value(kernels).data(), n, w, l, stride);
        let t = out.len();
        let value = Tensor::new([1, t], out)?;
        self.record(
            &[frames, kernels],
            value,
            Box::new(TransposedConv1dOp {
                filters: n,
                width: w,
                frames: l,
                stride,
            }),
        )
    }
}
