use rand::Rng;

use super::chunk::ChunkTensor;
use super::norm::LN_EPS;
use crate::error::{Error, Result};
use crate::numerics::{Graph, LstmCellParams, LstmVars, Real, Tensor, Var};

/// One recurrent path (intra or inter): BLSTM, projection back to `N`,
/// and global layer-norm rescaling.
#[derive(Debug, Clone, PartialEq)]
pub struct PathParams<F> {
    pub lstm_fwd: LstmCellParams<F>,
    pub lstm_bwd: LstmCellParams<F>,
    /// `[N, 2H]`
    pub fc_weight: Tensor<F>,
    pub fc_bias: Tensor<F>,
    pub ln_scale: Tensor<F>,
    pub ln_bias: Tensor<F>,
}

impl<F: Real> PathParams<F> {
    pub fn init<R: Rng + ?Sized>(features: usize, hidden: usize, rng: &mut R) -> Self {
        let bound = 1.0 / ((2 * hidden) as f64).sqrt();
        PathParams {
            lstm_fwd: LstmCellParams::init(features, hidden, rng),
            lstm_bwd: LstmCellParams::init(features, hidden, rng),
            fc_weight: Tensor::uniform([features, 2 * hidden], bound, rng),
            fc_bias: Tensor::uniform([features], bound, rng),
            ln_scale: Tensor::ones([features]),
            ln_bias: Tensor::zeros([features]),
        }
    }

    pub fn zeros(features: usize, hidden: usize) -> Self {
        PathParams {
            lstm_fwd: LstmCellParams::zeros(features, hidden),
            lstm_bwd: LstmCellParams::zeros(features, hidden),
            fc_weight: Tensor::zeros([features, 2 * hidden]),
            fc_bias: Tensor::zeros([features]),
            ln_scale: Tensor::zeros([features]),
            ln_bias: Tensor::zeros([features]),
        }
    }

    pub fn cast<G: Real>(&self) -> PathParams<G> {
        PathParams {
            lstm_fwd: self.lstm_fwd.cast(),
            lstm_bwd: self.lstm_bwd.cast(),
            fc_weight: self.fc_weight.cast(),
            fc_bias: self.fc_bias.cast(),
            ln_scale: self.ln_scale.cast(),
            ln_bias: self.ln_bias.cast(),
        }
    }

    pub fn features(&self) -> usize {
        self.fc_weight.shape()[0]
    }

    pub fn hidden(&self) -> usize {
        self.lstm_fwd.hidden_size()
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<F>)) {
        for (dir, cell) in [("lstm_fwd", &self.lstm_fwd), ("lstm_bwd", &self.lstm_bwd)] {
            f(format!("{prefix}.{dir}.w_ih"), &cell.w_ih);
            f(format!("{prefix}.{dir}.w_hh"), &cell.w_hh);
            f(format!("{prefix}.{dir}.bias"), &cell.bias);
        }
        f(format!("{prefix}.fc.weight"), &self.fc_weight);
        f(format!("{prefix}.fc.bias"), &self.fc_bias);
        f(format!("{prefix}.ln.scale"), &self.ln_scale);
        f(format!("{prefix}.ln.bias"), &self.ln_bias);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor<F>)) {
        for cell in [&mut self.lstm_fwd, &mut self.lstm_bwd] {
            f(&mut cell.w_ih);
            f(&mut cell.w_hh);
            f(&mut cell.bias);
        }
        f(&mut self.fc_weight);
        f(&mut self.fc_bias);
        f(&mut self.ln_scale);
        f(&mut self.ln_bias);
    }

    /// Registers the tensors on `g` in [`PathParams::visit`] order.
    pub fn bind(&self, g: &mut Graph<F>, leaf: &mut dyn FnMut(&mut Graph<F>, &Tensor<F>) -> Var) -> PathVars {
        let lstm_fwd = self.lstm_fwd.bind(g, &mut *leaf);
        let lstm_bwd = self.lstm_bwd.bind(g, &mut *leaf);
        PathVars {
            lstm_fwd,
            lstm_bwd,
            fc_weight: leaf(g, &self.fc_weight),
            fc_bias: leaf(g, &self.fc_bias),
            ln_scale: leaf(g, &self.ln_scale),
            ln_bias: leaf(g, &self.ln_bias),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PathVars {
    pub lstm_fwd: LstmVars,
    pub lstm_bwd: LstmVars,
    pub fc_weight: Var,
    pub fc_bias: Var,
    pub ln_scale: Var,
    pub ln_bias: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DprnnBlockParams<F> {
    pub intra: PathParams<F>,
    pub inter: PathParams<F>,
}

impl<F: Real> DprnnBlockParams<F> {
    pub fn init<R: Rng + ?Sized>(features: usize, hidden: usize, rng: &mut R) -> Self {
        DprnnBlockParams {
            intra: PathParams::init(features, hidden, rng),
            inter: PathParams::init(features, hidden, rng),
        }
    }

    pub fn cast<G: Real>(&self) -> DprnnBlockParams<G> {
        DprnnBlockParams {
            intra: self.intra.cast(),
            inter: self.inter.cast(),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<F>)) {
        self.intra.visit(&format!("{prefix}.intra"), f);
        self.inter.visit(&format!("{prefix}.inter"), f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor<F>)) {
        self.intra.visit_mut(f);
        self.inter.visit_mut(f);
    }

    pub fn bind(&self, g: &mut Graph<F>, leaf: &mut dyn FnMut(&mut Graph<F>, &Tensor<F>) -> Var) -> BlockVars {
        BlockVars {
            intra: self.intra.bind(g, leaf),
            inter: self.inter.bind(g, leaf),
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BlockVars {
    pub intra: PathVars,
    pub inter: PathVars,
}

/// BLSTM over the middle axis of `[batch, steps, N]`, projection, then
/// a permutation back to `[N, K, S]`, layer norm, and the residual.
fn path<F: Real>(g: &mut Graph<F>, t: Var, to_seq: &[usize], from_seq: &[usize], p: &PathVars) -> Result<Var> {
    let n = g.shape(t)[0];
    let fc_out = g.shape(p.fc_weight)[0];
    if fc_out != n {
        return Err(Error::shape(
            "dprnn path",
            format!("FC maps to {fc_out} features but the chunk tensor has {n}"),
        ));
    }
    let seqs = g.permute(t, to_seq)?;
    let u = g.bilstm(seqs, &p.lstm_fwd, &p.lstm_bwd)?;
    let proj = g.affine(u, p.fc_weight, Some(p.fc_bias))?;
    let back = g.permute(proj, from_seq)?;
    let normed = g.global_layer_norm(back, p.ln_scale, p.ln_bias, LN_EPS)?;
    g.add(t, normed)
}

fn check_chunk(g: &Graph<impl Real>, t: Var, op: &'static str) -> Result<()> {
    if g.shape(t).len() != 3 {
        return Err(Error::shape(op, format!("expected [N, K, S], got {:?}", g.shape(t))));
    }
    Ok(())
}

/// Recurrence along K inside each of the S chunks.
pub fn intra_chunk_pass<F: Real>(g: &mut Graph<F>, t: Var, p: &PathVars) -> Result<Var> {
    check_chunk(g, t, "intra_chunk_pass")?;
    // [N, K, S] → [S, K, N] and back.
    path(g, t, &[2, 1, 0], &[2, 1, 0], p)
}

/// Recurrence along S for each of the K intra-chunk positions.
pub fn inter_chunk_pass<F: Real>(g: &mut Graph<F>, t: Var, p: &PathVars) -> Result<Var> {
    check_chunk(g, t, "inter_chunk_pass")?;
    // [N, K, S] → [K, S, N] and back.
    path(g, t, &[1, 2, 0], &[2, 0, 1], p)
}

pub fn dprnn_block<F: Real>(g: &mut Graph<F>, t: Var, b: &BlockVars) -> Result<Var> {
    let mid = intra_chunk_pass(g, t, &b.intra)?;
    inter_chunk_pass(g, mid, &b.inter)
}

pub fn dprnn_stack<F: Real>(g: &mut Graph<F>, t: Var, blocks: &[BlockVars]) -> Result<Var> {
    if blocks.is_empty() {
        return Err(Error::InvalidArgument("DPRNN stack needs at least one block".into()));
    }
    blocks.iter().try_fold(t, |acc, b| dprnn_block(g, acc, b))
}

/// Evaluates the stack on a chunk tensor without tracking gradients.
pub fn dprnn_stack_eval<F: Real>(t: &ChunkTensor<F>, blocks: &[DprnnBlockParams<F>]) -> Result<ChunkTensor<F>> {
    let mut g = Graph::new();
    let bound: Vec<BlockVars> = blocks
        .iter()
        .map(|b| b.bind(&mut g, &mut |g, t| g.constant(t.clone())))
        .collect();
    let x = g.constant(t.data.clone());
    let y = dprnn_stack(&mut g, x, &bound)?;
    Ok(ChunkTensor {
        data: g.value(y).clone(),
        layout: t.layout,
    })
}
