use crate::error::{Error, Result};
use crate::numerics::{BackwardOp, Graph, Real, Tensor, Var};

/// Geometry of a 50%-overlap segmentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkLayout {
    pub chunk_len: usize,
    pub hop: usize,
    pub num_chunks: usize,
    pub original_len: usize,
}

impl ChunkLayout {
    /// Layout for `len` frames cut into chunks of `chunk_len` with hop `chunk_len/2`.
    pub fn new(len: usize, chunk_len: usize) -> Result<Self> {
        if len == 0 {
            return Err(Error::Empty { op: "segment" });
        }
        if chunk_len < 2 || !chunk_len.is_multiple_of(2) || chunk_len > 2 * len {
            return Err(Error::DegenerateChunking {
                chunk_len,
                len,
                max: 2 * len,
            });
        }
        let hop = chunk_len / 2;
        // S = ⌈2L/K⌉ + 1 = ⌈L/P⌉ + 1
        let num_chunks = len.div_ceil(hop) + 1;
        Ok(ChunkLayout {
            chunk_len,
            hop,
            num_chunks,
            original_len: len,
        })
    }

    /// Length of the zero-padded sequence the chunks tile.
    pub fn padded_len(&self) -> usize {
        (self.num_chunks - 1) * self.hop + self.chunk_len
    }

    /// Number of chunks each original frame lands in.
    pub fn coverage(&self) -> usize {
        self.chunk_len / self.hop
    }
}

/// Chunk length `K` (nearest even integer to √(2L)) and hop `K/2`.
pub fn choose_chunk_size(len: usize) -> Result<(usize, usize)> {
    if len < 4 {
        return Err(Error::InvalidArgument(format!(
            "chunk-size rule needs at least 4 frames, got {len}"
        )));
    }
    let root = ((2 * len) as f64).sqrt();
    let k = 2 * ((root / 2.0).round() as usize);
    let k = k.max(2);
    Ok((k, k / 2))
}

/// A segmented `[N, K, S]` tensor together with its geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkTensor<F> {
    pub data: Tensor<F>,
    pub layout: ChunkLayout,
}

impl<F: Real> ChunkTensor<F> {
    pub fn feature_dim(&self) -> usize {
        self.data.shape()[0]
    }
}

/// `[M, L] → [M, K, S]`; chunk `s` starts at padded offset `s·P`.
fn segment_data<F: Real>(src: &[F], rows: usize, lay: &ChunkLayout) -> Vec<F> {
    let (k, s_n, p, l) = (lay.chunk_len, lay.num_chunks, lay.hop, lay.original_len);
    let mut out = vec![F::zero(); rows * k * s_n];
    for m in 0..rows {
        let row = &src[m * l..(m + 1) * l];
        let dst = &mut out[m * k * s_n..(m + 1) * k * s_n];
        for kk in 0..k {
            for s in 0..s_n {
                let j = s * p + kk;
                if j >= p && j < p + l {
                    dst[kk * s_n + s] = row[j - p];
                }
            }
        }
    }
    out
}

/// `[M, K, S] → [M, L]`, summing overlapping chunks and scaling by `scale`.
fn overlap_add_data<F: Real>(src: &[F], rows: usize, lay: &ChunkLayout, scale: F) -> Vec<F> {
    let (k, s_n, p, l) = (lay.chunk_len, lay.num_chunks, lay.hop, lay.original_len);
    let mut out = vec![F::zero(); rows * l];
    for m in 0..rows {
        let blk = &src[m * k * s_n..(m + 1) * k * s_n];
        let row = &mut out[m * l..(m + 1) * l];
        for kk in 0..k {
            for s in 0..s_n {
                let j = s * p + kk;
                if j >= p && j < p + l {
                    row[j - p] += blk[kk * s_n + s];
                }
            }
        }
        for v in row.iter_mut() {
            *v *= scale;
        }
    }
    out
}

fn rows_and_len(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [m, l] => Ok((*m, *l)),
        _ => Err(Error::shape(op, format!("expected [N, L], got {shape:?}"))),
    }
}

/// Segments `[N, L]` into overlapping chunks.
pub fn segment<F: Real>(w: &Tensor<F>, chunk_len: usize) -> Result<ChunkTensor<F>> {
    let (rows, len) = rows_and_len("segment", w.shape())?;
    let layout = ChunkLayout::new(len, chunk_len)?;
    let data = Tensor::new(
        [rows, layout.chunk_len, layout.num_chunks],
        segment_data(w.data(), rows, &layout),
    )?;
    Ok(ChunkTensor { data, layout })
}

/// Inverse of [`segment`]: overlap-add divided by `K/P`.
pub fn overlap_add<F: Real>(t: &ChunkTensor<F>) -> Result<Tensor<F>> {
    let lay = t.layout;
    let shape = t.data.shape();
    if shape.len() != 3 || shape[1] != lay.chunk_len || shape[2] != lay.num_chunks {
        return Err(Error::shape(
            "overlap_add",
            format!("data {shape:?} inconsistent with layout {lay:?}"),
        ));
    }
    let rows = shape[0];
    let scale = F::one() / F::of(lay.coverage() as f64);
    Tensor::new([rows, lay.original_len], overlap_add_data(t.data.data(), rows, &lay, scale))
}

struct SegmentOp {
    layout: ChunkLayout,
    rows: usize,
}

impl<F: Real> BackwardOp<F> for SegmentOp {
    fn name(&self) -> &'static str {
        "segment"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<F>],
        _output: &Tensor<F>,
        grad: &Tensor<F>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<F>>>> {
        let d = overlap_add_data(grad.data(), self.rows, &self.layout, F::one());
        Ok(vec![Some(Tensor::new(inputs[0].shape().to_vec(), d)?)])
    }
}

struct OverlapAddOp {
    layout: ChunkLayout,
    rows: usize,
}

impl<F: Real> BackwardOp<F> for OverlapAddOp {
    fn name(&self) -> &'static str {
        "overlap_add"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<F>],
        _output: &Tensor<F>,
        grad: &Tensor<F>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<F>>>> {
        let scale = F::one() / F::of(self.layout.coverage() as f64);
        let mut d = segment_data(grad.data(), self.rows, &self.layout);
        d.iter_mut().for_each(|v| *v *= scale);
        Ok(vec![Some(Tensor::new(inputs[0].shape().to_vec(), d)?)])
    }
}

impl<F: Real> Graph<F> {
    /// Recorded form of [`segment`].
    pub fn segment(&mut self, w: Var, chunk_len: usize) -> Result<(Var, ChunkLayout)> {
        let ct = segment(self.value(w), chunk_len)?;
        let rows = ct.data.shape()[0];
        let layout = ct.layout;
        let v = self.record(&[w], ct.data, Box::new(SegmentOp { layout, rows }))?;
        Ok((v, layout))
    }

    /// Recorded form of [`overlap_add`].
    pub fn overlap_add(&mut self, t: Var, layout: ChunkLayout) -> Result<Var> {
        let ct = ChunkTensor {
            data: self.value(t).clone(),
            layout,
        };
        let out = overlap_add(&ct)?;
        let rows = out.shape()[0];
        self.record(&[t], out, Box::new(OverlapAddOp { layout, rows }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunk_rule_examples() {
        assert_eq!(choose_chunk_size(8).unwrap(), (4, 2));
        assert_eq!(choose_chunk_size(31999).unwrap().0, 252);
        assert_eq!(choose_chunk_size(3999).unwrap().0, 90);
        assert!(choose_chunk_size(3).is_err());
    }

    #[test]
    fn hand_enumerated_segmentation() {
        let w = Tensor::<f64>::new([1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let ct = segment(&w, 4).unwrap();
        assert_eq!(ct.layout.num_chunks, 3);
        assert_eq!(ct.data.shape(), &[1, 4, 3]);
        let chunk = |s: usize| -> Vec<f64> { (0..4).map(|k| ct.data.data()[k * 3 + s]).collect() };
        assert_eq!(chunk(0), vec![0.0, 0.0, 1.0, 2.0]);
        assert_eq!(chunk(1), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(chunk(2), vec![3.0, 4.0, 0.0, 0.0]);
    }

    #[test]
    fn ones_overlap_add_to_ones() {
        let lay = ChunkLayout::new(4, 4).unwrap();
        let ct = ChunkTensor {
            data: Tensor::<f64>::ones([1, 4, 3]),
            layout: lay,
        };
        assert_eq!(overlap_add(&ct).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn zeros_stay_zero() {
        let w = Tensor::<f32>::zeros([3, 10]);
        let ct = segment(&w, 6).unwrap();
        assert!(ct.data.data().iter().all(|&v| v == 0.0));
        assert_eq!(overlap_add(&ct).unwrap(), w);
    }

    #[test]
    fn long_sequence_chunk_count() {
        let lay = ChunkLayout::new(31999, 250).unwrap();
        assert_eq!(lay.num_chunks, 257);
    }

    #[test]
    fn degenerate_and_odd_chunks_rejected() {
        assert!(matches!(ChunkLayout::new(4, 10), Err(Error::DegenerateChunking { .. })));
        assert!(ChunkLayout::new(10, 5).is_err());
        assert!(ChunkLayout::new(4, 8).is_ok());
    }

    #[test]
    fn mismatched_metadata_is_an_error() {
        let ct = ChunkTensor {
            data: Tensor::<f64>::ones([1, 4, 2]),
            layout: ChunkLayout::new(4, 4).unwrap(),
        };
        assert!(overlap_add(&ct).is_err());
    }
}
