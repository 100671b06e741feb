//! Encoder → DPRNN mask estimator → decoder separation network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dualpath::{choose_chunk_size, dprnn_stack, BlockVars, DprnnBlockParams};
use crate::error::{Error, Result};
use crate::numerics::{conv_output_len, BackwardOp, Graph, Real, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub num_filters: usize,
    /// Encoder/decoder kernel width in samples.
    pub window: usize,
    pub num_sources: usize,
    pub num_blocks: usize,
    pub hidden: usize,
    /// Fixed chunk length; `None` applies the √(2L) rule per input.
    pub chunk_len: Option<usize>,
    pub sample_rate: u32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_filters: 64,
            window: 2,
            num_sources: 2,
            num_blocks: 6,
            hidden: 128,
            chunk_len: None,
            sample_rate: 8000,
        }
    }
}

impl ModelConfig {
    pub fn stride(&self) -> usize {
        (self.window / 2).max(1)
    }

    pub fn frames(&self, samples: usize) -> Option<usize> {
        conv_output_len(samples, self.window, self.stride())
    }

    /// Chunk length used for an encoder output of `frames` frames. A fixed
    /// length longer than `2·frames` is shrunk to the largest even value
    /// that still chunks the input.
    pub fn chunk_len_for(&self, frames: usize) -> Result<usize> {
        let k = match self.chunk_len {
            Some(k) => k,
            None if frames >= 4 => choose_chunk_size(frames)?.0,
            None => 2 * frames,
        };
        Ok(k.min(2 * frames))
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_filters", self.num_filters),
            ("window", self.window),
            ("num_sources", self.num_sources),
            ("hidden", self.hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        if let Some(k) = self.chunk_len {
            if k < 2 || k % 2 != 0 {
                return Err(Error::InvalidArgument(format!("chunk length must be even and ≥ 2, got {k}")));
            }
        }
        Ok(())
    }
}

/// Nonnegative masks, one `[N, L]` matrix per source.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet<F> {
    pub masks: Tensor<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeparatorModel<F> {
    pub config: ModelConfig,
    /// `[N, W]`
    pub encoder: Tensor<F>,
    /// `[N, W]`, independent of the encoder.
    pub decoder: Tensor<F>,
    /// `[C·N, N]`
    pub mask_weight: Tensor<F>,
    pub mask_bias: Tensor<F>,
    pub blocks: Vec<DprnnBlockParams<F>>,
}

#[derive(Debug, Clone)]
pub struct ModelVars {
    pub encoder: Var,
    pub decoder: Var,
    pub mask_weight: Var,
    pub mask_bias: Var,
    pub blocks: Vec<BlockVars>,
}

impl ModelVars {
    /// Parameter leaves in [`SeparatorModel::visit`] order.
    pub fn leaves(&self) -> Vec<Var> {
        let mut out = vec![self.encoder, self.decoder, self.mask_weight, self.mask_bias];
        for b in &self.blocks {
            for p in [&b.intra, &b.inter] {
                for cell in [&p.lstm_fwd, &p.lstm_bwd] {
                    out.extend([cell.w_ih, cell.w_hh, cell.bias]);
                }
                out.extend([p.fc_weight, p.fc_bias, p.ln_scale, p.ln_bias]);
            }
        }
        out
    }
}

impl<F: Real> SeparatorModel<F> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, w, c) = (config.num_filters, config.window, config.num_sources);
        let encoder = Tensor::uniform([n, w], 1.0 / (w as f64).sqrt(), &mut rng);
        let decoder = Tensor::uniform([n, w], 1.0 / (n as f64).sqrt(), &mut rng);
        let bound = 1.0 / (n as f64).sqrt();
        let mask_weight = Tensor::uniform([c * n, n], bound, &mut rng);
        let mask_bias = Tensor::uniform([c * n], bound, &mut rng);
        let blocks = (0..config.num_blocks)
            .map(|_| DprnnBlockParams::init(n, config.hidden, &mut rng))
            .collect();
        Ok(SeparatorModel {
            config,
            encoder,
            decoder,
            mask_weight,
            mask_bias,
            blocks,
        })
    }

    /// Visits every parameter tensor with its checkpoint name, in the order
    /// [`SeparatorModel::bind`] registers them.
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor<F>)) {
        f("encoder.weight".into(), &self.encoder);
        f("decoder.weight".into(), &self.decoder);
        f("mask.weight".into(), &self.mask_weight);
        f("mask.bias".into(), &self.mask_bias);
        for (b, block) in self.blocks.iter().enumerate() {
            block.visit(&format!("block{b}"), f);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor<F>)) {
        f(&mut self.encoder);
        f(&mut self.decoder);
        f(&mut self.mask_weight);
        f(&mut self.mask_bias);
        for block in &mut self.blocks {
            block.visit_mut(f);
        }
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = Vec::new();
        self.visit(&mut |name, t| out.push((name, t)));
        out
    }

    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }

    /// Registers parameters on `g`, as trainable leaves or constants.
    pub fn bind(&self, g: &mut Graph<F>, trainable: bool) -> ModelVars {
        let mut leaf = |g: &mut Graph<F>, t: &Tensor<F>| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        ModelVars {
            encoder: leaf(g, &self.encoder),
            decoder: leaf(g, &self.decoder),
            mask_weight: leaf(g, &self.mask_weight),
            mask_bias: leaf(g, &self.mask_bias),
            blocks: self.blocks.iter().map(|b| b.bind(g, &mut leaf)).collect(),
        }
    }

    pub fn cast<G: Real>(&self) -> SeparatorModel<G> {
        SeparatorModel {
            config: self.config,
            encoder: self.encoder.cast(),
            decoder: self.decoder.cast(),
            mask_weight: self.mask_weight.cast(),
            mask_bias: self.mask_bias.cast(),
            blocks: self.blocks.iter().map(DprnnBlockParams::cast).collect(),
        }
    }

    /// Non-differentiable inference: `[1, T] → [C, T]`.
    pub fn separate(&self, mixture: &Tensor<F>) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let x = g.constant(mixture.clone());
        let y = separate(&mut g, x, self, &vars)?;
        Ok(g.value(y).clone())
    }

    pub fn masks(&self, mixture: &Tensor<F>) -> Result<MaskSet<F>> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let x = g.constant(mixture.clone());
        let rep = encode(&mut g, x, self, &vars)?;
        let m = estimate_masks(&mut g, rep, self, &vars)?;
        Ok(MaskSet {
            masks: g.value(m).clone(),
        })
    }
}

/// `relu(conv1d(mixture))`: `[1, T] → [N, L]`.
pub fn encode<F: Real>(g: &mut Graph<F>, mixture: Var, model: &SeparatorModel<F>, vars: &ModelVars) -> Result<Var> {
    let conv = g.conv1d(mixture, vars.encoder, model.config.stride())?;
    g.relu(conv)
}

/// `[N, L] → [C, N, L]` nonnegative masks.
pub fn estimate_masks<F: Real>(g: &mut Graph<F>, rep: Var, model: &SeparatorModel<F>, vars: &ModelVars) -> Result<Var> {
    let shape = g.shape(rep).to_vec();
    let [n, frames] = shape[..] else {
        return Err(Error::shape("estimate_masks", format!("expected [N, L], got {shape:?}")));
    };
    let c = model.config.num_sources;
    let k = model.config.chunk_len_for(frames)?;
    let (chunks, layout) = g.segment(rep, k)?;
    let processed = if vars.blocks.is_empty() {
        chunks
    } else {
        dprnn_stack(g, chunks, &vars.blocks)?
    };
    // Per-position N → C·N projection.
    let positions = g.permute(processed, &[1, 2, 0])?;
    let heads = g.affine(positions, vars.mask_weight, Some(vars.mask_bias))?;
    let maps = g.permute(heads, &[2, 0, 1])?;
    let seq = g.overlap_add(maps, layout)?;
    let masks = g.relu(seq)?;
    g.reshape(masks, &[c, n, frames])
}

struct ApplyMasksOp;

impl<F: Real> BackwardOp<F> for ApplyMasksOp {
    fn name(&self) -> &'static str {
        "apply_masks"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<F>],
        _output: &Tensor<F>,
        grad: &Tensor<F>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<F>>>> {
        let rep = inputs[0];
        let masks = inputs[1];
        let m = rep.len();
        let drep = if needs[0] {
            let mut d = vec![F::zero(); m];
            for (gc, mc) in grad.data().chunks(m).zip(masks.data().chunks(m)) {
                for ((acc, &gv), &mv) in d.iter_mut().zip(gc).zip(mc) {
                    *acc += gv * mv;
                }
            }
            Some(Tensor::new(rep.shape().to_vec(), d)?)
        } else {
            None
        };
        let dmask = if needs[1] {
            let d: Vec<F> = grad
                .data()
                .chunks(m)
                .flat_map(|gc| gc.iter().zip(rep.data()).map(|(&gv, &r)| gv * r))
                .collect();
            Some(Tensor::new(masks.shape().to_vec(), d)?)
        } else {
            None
        };
        Ok(vec![drep, dmask])
    }
}

/// `out[c] = rep ⊙ masks[c]`.
pub fn apply_masks<F: Real>(g: &mut Graph<F>, rep: Var, masks: Var) -> Result<Var> {
    let rs = g.shape(rep).to_vec();
    let ms = g.shape(masks).to_vec();
    if ms.len() != 3 || ms[1..] != rs[..] {
        return Err(Error::shape("apply_masks", format!("masks {ms:?} do not match representation {rs:?}")));
    }
    let r = g.value(rep).data();
    let out: Vec<F> = g
        .value(masks)
        .data()
        .chunks(r.len())
        .flat_map(|mc| mc.iter().zip(r).map(|(&m, &x)| m * x))
        .collect();
    let value = Tensor::new(ms, out)?;
    g.record(&[rep, masks], value, Box::new(ApplyMasksOp))
}

/// `[C, N, L] → [C, (L−1)·stride + W]`.
pub fn decode<F: Real>(g: &mut Graph<F>, masked: Var, model: &SeparatorModel<F>, vars: &ModelVars) -> Result<Var> {
    let shape = g.shape(masked).to_vec();
    let [c, n, frames] = shape[..] else {
        return Err(Error::shape("decode", format!("expected [C, N, L], got {shape:?}")));
    };
    let mut outs = Vec::with_capacity(c);
    for src in 0..c {
        let one = g.narrow(masked, 0, src, 1)?;
        let frames_v = g.reshape(one, &[n, frames])?;
        outs.push(g.transposed_conv1d(frames_v, vars.decoder, model.config.stride())?);
    }
    g.concat(&outs, 0)
}

/// Full pipeline on `[1, T]`, trimmed or zero-padded back to `[C, T]`.
pub fn separate<F: Real>(g: &mut Graph<F>, mixture: Var, model: &SeparatorModel<F>, vars: &ModelVars) -> Result<Var> {
    let t = g.shape(mixture).get(1).copied().unwrap_or(0);
    let rep = encode(g, mixture, model, vars)?;
    let masks = estimate_masks(g, rep, model, vars)?;
    let masked = apply_masks(g, rep, masks)?;
    let wave = decode(g, masked, model, vars)?;
    g.fit_last(wave, t)
}
