//! Standard four-gate LSTM (no peepholes) and its bidirectional wrapper.
//!
//! Gate blocks are stacked in the order input, forget, cell, output, so
//! `w_ih` is `[4H, In]`, `w_hh` is `[4H, H]` and `bias` is `[4H]`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::gemm::{gemm, Layout};
use super::ops::sigmoid;
use super::{BackwardOp, Graph, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::par;

#[derive(Debug, Clone, PartialEq)]
pub struct LstmCellParams<F> {
    pub w_ih: Tensor<F>,
    pub w_hh: Tensor<F>,
    pub bias: Tensor<F>,
}

impl<F: Real> LstmCellParams<F> {
    pub fn zeros(input_size: usize, hidden: usize) -> Self {
        LstmCellParams {
            w_ih: Tensor::zeros([4 * hidden, input_size]),
            w_hh: Tensor::zeros([4 * hidden, hidden]),
            bias: Tensor::zeros([4 * hidden]),
        }
    }

    /// Input weights uniform in ±1/√In, recurrent blocks orthogonal,
    /// forget-gate bias 1 and other biases 0.
    pub fn init<R: Rng + ?Sized>(input_size: usize, hidden: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (input_size as f64).sqrt();
        let w_ih = Tensor::uniform([4 * hidden, input_size], bound, rng);
        let mut rec = Vec::with_capacity(4 * hidden * hidden);
        for _ in 0..4 {
            rec.extend(orthogonal(hidden, rng).into_iter().map(F::of));
        }
        let w_hh = Tensor::new([4 * hidden, hidden], rec).expect("4H×H");
        let mut bias = Tensor::zeros([4 * hidden]);
        for b in &mut bias.data_mut()[hidden..2 * hidden] {
            *b = F::one();
        }
        LstmCellParams { w_ih, w_hh, bias }
    }

    pub fn cast<G: Real>(&self) -> LstmCellParams<G> {
        LstmCellParams {
            w_ih: self.w_ih.cast(),
            w_hh: self.w_hh.cast(),
            bias: self.bias.cast(),
        }
    }

    pub fn input_size(&self) -> usize {
        self.w_ih.shape()[1]
    }

    pub fn hidden_size(&self) -> usize {
        self.w_hh.shape()[1]
    }

    pub fn param_count(&self) -> usize {
        self.w_ih.len() + self.w_hh.len() + self.bias.len()
    }

    /// `4·(H·In + H·H + H)`.
    pub fn closed_form_count(input_size: usize, hidden: usize) -> usize {
        4 * (hidden * input_size + hidden * hidden + hidden)
    }

    pub fn check(&self) -> Result<()> {
        let h = self.hidden_size();
        let ok = self.w_ih.shape()[0] == 4 * h
            && self.w_hh.shape() == [4 * h, h]
            && self.bias.shape() == [4 * h];
        if ok {
            Ok(())
        } else {
            Err(Error::shape(
                "lstm",
                format!(
                    "inconsistent cell: w_ih {:?}, w_hh {:?}, bias {:?}",
                    self.w_ih.shape(),
                    self.w_hh.shape(),
                    self.bias.shape()
                ),
            ))
        }
    }

    pub fn bind(&self, g: &mut Graph<F>, mut leaf: impl FnMut(&mut Graph<F>, &Tensor<F>) -> Var) -> LstmVars {
        LstmVars {
            w_ih: leaf(g, &self.w_ih),
            w_hh: leaf(g, &self.w_hh),
            bias: leaf(g, &self.bias),
        }
    }
}

/// Row-orthonormal `n×n` matrix from Gram–Schmidt on Gaussian samples.
fn orthogonal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(n);
    while q.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        for _ in 0..2 {
            for u in &q {
                let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|a| *a /= norm);
            q.push(v);
        }
    }
    q.concat()
}

/// Graph handles of one cell's parameters.
#[derive(Debug, Clone, Copy)]
pub struct LstmVars {
    pub w_ih: Var,
    pub w_hh: Var,
    pub bias: Var,
}

struct Direction<F> {
    /// Post-activation gates `[B, T, 4H]`.
    acts: Vec<F>,
    /// Cell states `[B, T, H]`.
    cell: Vec<F>,
    /// Hidden states `[B, T, H]`.
    hidden: Vec<F>,
}

struct Dims {
    batch: usize,
    steps: usize,
    input: usize,
    hidden: usize,
}

impl Dims {
    fn order(&self, reverse: bool) -> impl Iterator<Item = (usize, Option<usize>)> + '_ {
        let t_max = self.steps;
        (0..t_max).map(move |s| {
            if reverse {
                let t = t_max - 1 - s;
                (t, if s == 0 { None } else { Some(t + 1) })
            } else {
                (s, if s == 0 { None } else { Some(s - 1) })
            }
        })
    }
}

fn run_forward<F: Real>(d: &Dims, x: &[F], w_ih: &[F], w_hh: &[F], bias: &[F], reverse: bool) -> Direction<F> {
    let (b, t, h) = (d.batch, d.steps, d.hidden);
    let g4 = 4 * h;
    let mut acts = vec![F::zero(); b * t * g4];
    for row in acts.chunks_mut(g4) {
        row.copy_from_slice(bias);
    }
    gemm(b * t, d.input, g4, x, Layout::rows(d.input), w_ih, Layout::transposed(d.input), F::one(), &mut acts, Layout::rows(g4));
    let mut cell = vec![F::zero(); b * t * h];
    let mut hidden = vec![F::zero(); b * t * h];
    for (step, prev) in d.order(reverse) {
        if let Some(p) = prev {
            gemm(
                b,
                h,
                g4,
                &hidden,
                Layout::strided(p * h, t * h, 1),
                w_hh,
                Layout::transposed(h),
                F::one(),
                &mut acts,
                Layout::strided(step * g4, t * g4, 1),
            );
        }
        for bi in 0..b {
            let a = &mut acts[(bi * t + step) * g4..(bi * t + step + 1) * g4];
            let base = (bi * t + step) * h;
            let pbase = prev.map(|p| (bi * t + p) * h);
            for j in 0..h {
                let i_g = sigmoid(a[j]);
                let f_g = sigmoid(a[h + j]);
                let c_g = a[2 * h + j].tanh();
                let o_g = sigmoid(a[3 * h + j]);
                a[j] = i_g;
                a[h + j] = f_g;
                a[2 * h + j] = c_g;
                a[3 * h + j] = o_g;
                let c_prev = pbase.map_or(F::zero(), |pb| cell[pb + j]);
                let c = f_g * c_prev + i_g * c_g;
                cell[base + j] = c;
                hidden[base + j] = o_g * c.tanh();
            }
        }
    }
    Direction { acts, cell, hidden }
}

struct DirGrads<F> {
    dx: Vec<F>,
    dw_ih: Vec<F>,
    dw_hh: Vec<F>,
    dbias: Vec<F>,
}

/// Back-propagation through time. `dout` is read with row stride `out_rs`
/// starting at `out_off`, so it can address one half of a concatenated output.
#[allow(clippy::too_many_arguments)]
fn run_backward<F: Real>(
    d: &Dims,
    x: &[F],
    w_ih: &[F],
    w_hh: &[F],
    cache: &Direction<F>,
    dout: &[F],
    out_off: usize,
    out_rs: usize,
    reverse: bool,
) -> DirGrads<F> {
    let (b, t, h) = (d.batch, d.steps, d.hidden);
    let g4 = 4 * h;
    let mut dgates = vec![F::zero(); b * t * g4];
    let mut dh_next = vec![F::zero(); b * h];
    let mut dc_next = vec![F::zero(); b * h];
    let order: Vec<_> = d.order(reverse).collect();
    for &(step, prev) in order.iter().rev() {
        for bi in 0..b {
            let a = &cache.acts[(bi * t + step) * g4..(bi * t + step + 1) * g4];
            let dg = &mut dgates[(bi * t + step) * g4..(bi * t + step + 1) * g4];
            let base = (bi * t + step) * h;
            let orow = (bi * t + step) * out_rs + out_off;
            for j in 0..h {
                let (i_g, f_g, c_g, o_g) = (a[j], a[h + j], a[2 * h + j], a[3 * h + j]);
                let tc = cache.cell[base + j].tanh();
                let dh = dout[orow + j] + dh_next[bi * h + j];
                let dc = dc_next[bi * h + j] + dh * o_g * (F::one() - tc * tc);
                let c_prev = prev.map_or(F::zero(), |p| cache.cell[(bi * t + p) * h + j]);
                dg[j] = dc * c_g * i_g * (F::one() - i_g);
                dg[h + j] = dc * c_prev * f_g * (F::one() - f_g);
                dg[2 * h + j] = dc * i_g * (F::one() - c_g * c_g);
                dg[3 * h + j] = dh * tc * o_g * (F::one() - o_g);
                dc_next[bi * h + j] = dc * f_g;
            }
        }
        if prev.is_some() {
            gemm(
                b,
                g4,
                h,
                &dgates,
                Layout::strided(step * g4, t * g4, 1),
                w_hh,
                Layout::rows(h),
                F::zero(),
                &mut dh_next,
                Layout::rows(h),
            );
        }
    }
    let mut dx = vec![F::zero(); b * t * d.input];
    gemm(b * t, g4, d.input, &dgates, Layout::rows(g4), w_ih, Layout::rows(d.input), F::zero(), &mut dx, Layout::rows(d.input));
    let mut dw_ih = vec![F::zero(); g4 * d.input];
    gemm(g4, b * t, d.input, &dgates, Layout::transposed(g4), x, Layout::rows(d.input), F::zero(), &mut dw_ih, Layout::rows(d.input));
    let mut hprev = vec![F::zero(); b * t * h];
    for bi in 0..b {
        for &(step, prev) in &order {
            if let Some(p) = prev {
                let dst = (bi * t + step) * h;
                let src = (bi * t + p) * h;
                hprev[dst..dst + h].copy_from_slice(&cache.hidden[src..src + h]);
            }
        }
    }
    let mut dw_hh = vec![F::zero(); g4 * h];
    gemm(g4, b * t, h, &dgates, Layout::transposed(g4), &hprev, Layout::rows(h), F::zero(), &mut dw_hh, Layout::rows(h));
    let mut dbias = vec![F::zero(); g4];
    for row in dgates.chunks(g4) {
        for (acc, &v) in dbias.iter_mut().zip(row) {
            *acc += v;
        }
    }
    DirGrads { dx, dw_ih, dw_hh, dbias }
}

struct BiLstmOp<F> {
    dims: Dims,
    fwd: Direction<F>,
    bwd: Direction<F>,
    mode: par::Mode,
}

impl<F: Real> BackwardOp<F> for BiLstmOp<F> {
    fn name(&self) -> &'static str {
        "bilstm"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<F>],
        _output: &Tensor<F>,
        grad: &Tensor<F>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<F>>>> {
        let d = &self.dims;
        let x = inputs[0].data();
        let rs = 2 * d.hidden;
        let (gf, gb) = par::join(
            self.mode,
            || run_backward(d, x, inputs[1].data(), inputs[2].data(), &self.fwd, grad.data(), 0, rs, false),
            || run_backward(d, x, inputs[4].data(), inputs[5].data(), &self.bwd, grad.data(), d.hidden, rs, true),
        );
        let mut dx = gf.dx;
        for (a, &b) in dx.iter_mut().zip(&gb.dx) {
            *a += b;
        }
        let wrap = |i: usize, v: Vec<F>| -> Result<Option<Tensor<F>>> {
            Ok(if needs[i] { Some(Tensor::new(inputs[i].shape().to_vec(), v)?) } else { None })
        };
        Ok(vec![
            wrap(0, dx)?,
            wrap(1, gf.dw_ih)?,
            wrap(2, gf.dw_hh)?,
            wrap(3, gf.dbias)?,
            wrap(4, gb.dw_ih)?,
            wrap(5, gb.dw_hh)?,
            wrap(6, gb.dbias)?,
        ])
    }
}

impl<F: Real> Graph<F> {
    fn check_cell(&self, p: &LstmVars, input: usize) -> Result<usize> {
        let ws = self.shape(p.w_hh);
        if ws.len() != 2 || ws[0] != 4 * ws[1] {
            return Err(Error::shape("lstm", format!("recurrent weight must be [4H, H], got {ws:?}")));
        }
        let h = ws[1];
        if self.shape(p.w_ih) != [4 * h, input] || self.shape(p.bias) != [4 * h] {
            return Err(Error::shape(
                "lstm",
                format!(
                    "cell expects input {input}: w_ih {:?}, bias {:?} for H={h}",
                    self.shape(p.w_ih),
                    self.shape(p.bias)
                ),
            ));
        }
        Ok(h)
    }

    /// One LSTM step built from primitive graph ops. Inputs may carry any
    /// leading batch axes; returns `(h', c')`.
    pub fn lstm_step(&mut self, x: Var, h: Var, c: Var, p: &LstmVars) -> Result<(Var, Var)> {
        let input = self.value(x).last_dim();
        let hid = self.check_cell(p, input)?;
        if self.value(h).last_dim() != hid || self.value(c).last_dim() != hid {
            return Err(Error::shape(
                "lstm_step",
                format!("state shapes {:?}/{:?} do not match H={hid}", self.shape(h), self.shape(c)),
            ));
        }
        let xi = self.affine(x, p.w_ih, Some(p.bias))?;
        let hh = self.affine(h, p.w_hh, None)?;
        let gates = self.add(xi, hh)?;
        let last = self.shape(gates).len() - 1;
        let gi = self.narrow(gates, last, 0, hid)?;
        let gf = self.narrow(gates, last, hid, hid)?;
        let gg = self.narrow(gates, last, 2 * hid, hid)?;
        let go = self.narrow(gates, last, 3 * hid, hid)?;
        let i = self.sigmoid(gi)?;
        let f = self.sigmoid(gf)?;
        let g = self.tanh(gg)?;
        let o = self.sigmoid(go)?;
        let fc = self.mul(f, c)?;
        let ig = self.mul(i, g)?;
        let c2 = self.add(fc, ig)?;
        let tc = self.tanh(c2)?;
        let h2 = self.mul(o, tc)?;
        Ok((h2, c2))
    }

    /// Bidirectional LSTM over `[B, T, In]` with zero initial states,
    /// returning `[B, T, 2H]` (forward half first).
    pub fn bilstm(&mut self, x: Var, fwd: &LstmVars, bwd: &LstmVars) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let [batch, steps, input] = xs[..] else {
            return Err(Error::shape("bilstm", format!("input must be [B, T, In], got {xs:?}")));
        };
        if steps == 0 || batch == 0 {
            return Err(Error::Empty { op: "bilstm" });
        }
        let hidden = self.check_cell(fwd, input)?;
        if self.check_cell(bwd, input)? != hidden {
            return Err(Error::shape("bilstm", "forward and backward cells differ in hidden size"));
        }
        let dims = Dims {
            batch,
            steps,
            input,
            hidden,
        };
        let xd = self.value(x).data();
        let (pf, pb) = (
            (self.value(fwd.w_ih).data(), self.value(fwd.w_hh).data(), self.value(fwd.bias).data()),
            (self.value(bwd.w_ih).data(), self.value(bwd.w_hh).data(), self.value(bwd.bias).data()),
        );
        let (df, db) = par::join(
            self.mode(),
            || run_forward(&dims, xd, pf.0, pf.1, pf.2, false),
            || run_forward(&dims, xd, pb.0, pb.1, pb.2, true),
        );
        let mut out = Vec::with_capacity(batch * steps * 2 * hidden);
        for (a, b) in df.hidden.chunks(hidden).zip(db.hidden.chunks(hidden)) {
            out.extend_from_slice(a);
            out.extend_from_slice(b);
        }
        let value = Tensor::new([batch, steps, 2 * hidden], out)?;
        let op = BiLstmOp {
            dims,
            fwd: df,
            bwd: db,
            mode: self.mode(),
        };
        self.record(
            &[x, fwd.w_ih, fwd.w_hh, fwd.bias, bwd.w_ih, bwd.w_hh, bwd.bias],
            value,
            Box::new(op),
        )
    }

    /// Single-sequence form: `[In, T] → [2H, T]`.
    pub fn bilstm_sequence(&mut self, seq: Var, fwd: &LstmVars, bwd: &LstmVars) -> Result<Var> {
        let s = self.shape(seq).to_vec();
        let [input, steps] = s[..] else {
            return Err(Error::shape("bilstm", format!("sequence must be [In, T], got {s:?}")));
        };
        let tx = self.permute(seq, &[1, 0])?;
        let batched = self.reshape(tx, &[1, steps, input])?;
        let y = self.bilstm(batched, fwd, bwd)?;
        let two_h = self.shape(y)[2];
        let flat = self.reshape(y, &[steps, two_h])?;
        self.permute(flat, &[1, 0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bind_consts<F: Real>(g: &mut Graph<F>, p: &LstmCellParams<F>) -> LstmVars {
        p.bind(g, |g, t| g.constant(t.clone()))
    }

    #[test]
    fn closed_form_parameter_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = LstmCellParams::<f32>::init(64, 128, &mut rng);
        assert_eq!(p.param_count(), 98_816);
        assert_eq!(LstmCellParams::<f32>::closed_form_count(64, 128), 98_816);
        p.check().unwrap();
    }

    #[test]
    fn recurrent_blocks_are_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = LstmCellParams::<f64>::init(3, 6, &mut rng);
        let w = p.w_hh.data();
        for blk in 0..4 {
            for i in 0..6 {
                for j in 0..6 {
                    let d: f64 = (0..6).map(|k| w[(blk * 6 + i) * 6 + k] * w[(blk * 6 + j) * 6 + k]).sum();
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((d - want).abs() < 1e-10);
                }
            }
        }
        assert!(p.bias.data()[6..12].iter().all(|&b| b == 1.0));
        assert!(p.bias.data()[..6].iter().all(|&b| b == 0.0));
    }

    #[test]
    fn zero_cell_stays_zero() {
        let p = LstmCellParams::<f64>::zeros(3, 2);
        let mut g = Graph::new();
        let pv = bind_consts(&mut g, &p);
        let x = g.constant(Tensor::zeros([3]));
        let h = g.constant(Tensor::zeros([2]));
        let c = g.constant(Tensor::zeros([2]));
        let (h2, c2) = g.lstm_step(x, h, c, &pv).unwrap();
        assert_eq!(g.value(h2).data(), &[0.0, 0.0]);
        assert_eq!(g.value(c2).data(), &[0.0, 0.0]);
    }

    #[test]
    fn saturated_gates_carry_the_cell() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut p = LstmCellParams::<f32>::init(3, 4, &mut rng);
        p.w_ih.fill(0.0);
        p.w_hh.fill(0.0);
        let bias = p.bias.data_mut();
        bias[..4].iter_mut().for_each(|b| *b = -20.0);
        bias[4..8].iter_mut().for_each(|b| *b = 20.0);
        let mut g = Graph::new();
        let pv = bind_consts(&mut g, &p);
        let x = g.constant(Tensor::from_vec(vec![0.5, -0.2, 0.9]));
        let h = g.constant(Tensor::from_vec(vec![0.1, 0.2, 0.3, 0.4]));
        let c0 = Tensor::from_vec(vec![0.7, -1.3, 2.0, 0.05]);
        let c = g.constant(c0.clone());
        let (_, c2) = g.lstm_step(x, h, c, &pv).unwrap();
        assert!(g.value(c2).max_abs_diff(&c0) < 1e-6);
    }

    #[test]
    fn inconsistent_cell_is_rejected() {
        let mut p = LstmCellParams::<f64>::zeros(3, 2);
        p.bias = Tensor::zeros([7]);
        assert!(p.check().is_err());
    }
}
