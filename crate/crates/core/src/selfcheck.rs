//! Gradient checks over every differentiable op at small shapes, as run by
//! the `gradcheck` command.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dualpath::{inter_chunk_pass, intra_chunk_pass, PathParams, PathVars, LN_EPS};
use crate::error::Result;
use crate::numerics::{finite_diff_check, finite_diff_check_many, GradCheckReport, Graph, LstmCellParams, LstmVars, Tensor, Var};
use crate::par::{self, Mode};
use crate::tasnet::{self, ModelConfig, SeparatorModel};
use crate::training::upit_loss_var;

pub const TOL: f64 = 1e-4;

pub struct GradCase {
    pub name: &'static str,
    pub run: Box<dyn Fn() -> Result<GradCheckReport> + Send + Sync>,
}

impl GradCase {
    pub fn new(name: &'static str, run: impl Fn() -> Result<GradCheckReport> + Send + Sync + 'static) -> Self {
        GradCase { name, run: Box::new(run) }
    }
}

#[derive(Debug)]
pub struct CaseOutcome {
    pub name: &'static str,
    pub result: Result<GradCheckReport>,
}

impl CaseOutcome {
    pub fn passed(&self) -> bool {
        matches!(&self.result, Ok(r) if r.passed())
    }

    pub fn line(&self) -> String {
        match &self.result {
            Ok(r) => format!(
                "{:<20} {}  max rel err {:.2e} over {} elements",
                self.name,
                if r.passed() { "PASS" } else { "FAIL" },
                r.max_rel_error,
                r.checked
            ),
            Err(e) => format!("{:<20} FAIL  {e}", self.name),
        }
    }
}

pub fn run_cases(cases: &[GradCase], mode: Mode) -> Vec<CaseOutcome> {
    par::map(mode, cases, |c| CaseOutcome {
        name: c.name,
        result: (c.run)(),
    })
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = g.constant(Tensor::uniform(g.shape(y).to_vec(), 1.0, &mut rng(seed)));
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn cell_vars(v: &[Var]) -> LstmVars {
    LstmVars {
        w_ih: v[0],
        w_hh: v[1],
        bias: v[2],
    }
}

fn path_vars(v: &[Var]) -> PathVars {
    PathVars {
        lstm_fwd: cell_vars(&v[0..3]),
        lstm_bwd: cell_vars(&v[3..6]),
        fc_weight: v[6],
        fc_bias: v[7],
        ln_scale: v[8],
        ln_bias: v[9],
    }
}

fn path_inputs(seed: u64, n: usize, k: usize, s: usize, h: usize) -> Vec<Tensor<f64>> {
    let mut r = rng(seed);
    let p = PathParams::<f64>::init(n, h, &mut r);
    let mut xs = Vec::new();
    p.visit("", &mut |_, t| xs.push(t.clone()));
    xs[8] = Tensor::uniform([n], 1.5, &mut r);
    xs[9] = Tensor::uniform([n], 1.5, &mut r);
    xs.push(Tensor::uniform([n, k, s], 1.0, &mut r));
    xs
}

fn separator_case() -> Result<GradCheckReport> {
    let cfg = ModelConfig {
        num_filters: 4,
        window: 4,
        num_sources: 2,
        num_blocks: 1,
        hidden: 3,
        chunk_len: None,
        sample_rate: 8000,
    };
    let model = SeparatorModel::<f64>::new(cfg, 3)?;
    let mut r = rng(8);
    let mixture = Tensor::<f64>::uniform([1, 26], 1.0, &mut r);
    let refs = Tensor::<f64>::uniform([2, 26], 1.0, &mut r);
    let params: Vec<Tensor<f64>> = model.named_params().into_iter().map(|(_, t)| t.clone()).collect();
    finite_diff_check_many(
        |g, v| {
            let mut it = v.iter().copied();
            let mut next = |_: &mut Graph<f64>, _: &Tensor<f64>| it.next().expect("one var per parameter");
            let encoder = next(g, &model.encoder);
            let decoder = next(g, &model.decoder);
            let mask_weight = next(g, &model.mask_weight);
            let mask_bias = next(g, &model.mask_bias);
            let blocks = model.blocks.iter().map(|b| b.bind(g, &mut next)).collect();
            let vars = tasnet::ModelVars {
                encoder,
                decoder,
                mask_weight,
                mask_bias,
                blocks,
            };
            let x = g.constant(mixture.clone());
            let y = tasnet::separate(g, x, &model, &vars)?;
            let rv = g.constant(refs.clone());
            Ok(upit_loss_var(g, y, rv, None)?.0)
        },
        &params,
        TOL,
    )
}

/// One case per differentiable op, plus the whole separator under the loss.
pub fn cases() -> Vec<GradCase> {
    vec![
        GradCase::new("conv1d", || {
            let mut r = rng(1);
            let xs = [Tensor::uniform([1, 20], 1.0, &mut r), Tensor::uniform([3, 4], 1.0, &mut r)];
            finite_diff_check_many(
                |g, v| {
                    let y = g.conv1d(v[0], v[1], 2)?;
                    weighted_sum(g, y, 1)
                },
                &xs,
                TOL,
            )
        }),
        GradCase::new("transposed_conv1d", || {
            let mut r = rng(2);
            let xs = [Tensor::uniform([3, 9], 1.0, &mut r), Tensor::uniform([3, 4], 1.0, &mut r)];
            finite_diff_check_many(
                |g, v| {
                    let y = g.transposed_conv1d(v[0], v[1], 2)?;
                    weighted_sum(g, y, 2)
                },
                &xs,
                TOL,
            )
        }),
        GradCase::new("lstm_step", || {
            let mut r = rng(3);
            let p = LstmCellParams::<f64>::init(4, 3, &mut r);
            let xs = [
                p.w_ih,
                p.w_hh,
                p.bias,
                Tensor::uniform([2, 4], 1.0, &mut r),
                Tensor::uniform([2, 3], 1.0, &mut r),
                Tensor::uniform([2, 3], 1.0, &mut r),
            ];
            finite_diff_check_many(
                |g, v| {
                    let (h, c) = g.lstm_step(v[3], v[4], v[5], &cell_vars(&v[..3]))?;
                    let both = g.concat(&[h, c], 1)?;
                    weighted_sum(g, both, 3)
                },
                &xs,
                TOL,
            )
        }),
        GradCase::new("bilstm", || {
            let mut r = rng(4);
            let f = LstmCellParams::<f64>::init(3, 2, &mut r);
            let b = LstmCellParams::<f64>::init(3, 2, &mut r);
            let xs = [f.w_ih, f.w_hh, f.bias, b.w_ih, b.w_hh, b.bias, Tensor::uniform([2, 4, 3], 1.0, &mut r)];
            finite_diff_check_many(
                |g, v| {
                    let y = g.bilstm(v[6], &cell_vars(&v[..3]), &cell_vars(&v[3..6]))?;
                    weighted_sum(g, y, 4)
                },
                &xs,
                TOL,
            )
        }),
        GradCase::new("global_layer_norm", || {
            let mut r = rng(5);
            let xs = [
                Tensor::uniform([4, 6, 5], 2.0, &mut r),
                Tensor::uniform([4], 1.5, &mut r),
                Tensor::uniform([4], 1.5, &mut r),
            ];
            finite_diff_check_many(
                |g, v| {
                    let y = g.global_layer_norm(v[0], v[1], v[2], LN_EPS)?;
                    weighted_sum(g, y, 5)
                },
                &xs,
                TOL,
            )
        }),
        GradCase::new("segment/overlap_add", || {
            let x = Tensor::<f64>::uniform([3, 7], 1.0, &mut rng(6));
            finite_diff_check(
                |g, v| {
                    let (c, layout) = g.segment(v, 4)?;
                    let sq = g.mul(c, c)?;
                    let back = g.overlap_add(sq, layout)?;
                    weighted_sum(g, back, 6)
                },
                &x,
                TOL,
            )
        }),
        GradCase::new("intra_chunk_pass", || {
            finite_diff_check_many(
                |g, v| {
                    let y = intra_chunk_pass(g, v[10], &path_vars(&v[..10]))?;
                    weighted_sum(g, y, 7)
                },
                &path_inputs(7, 4, 6, 5, 3),
                TOL,
            )
        }),
        GradCase::new("inter_chunk_pass", || {
            finite_diff_check_many(
                |g, v| {
                    let y = inter_chunk_pass(g, v[10], &path_vars(&v[..10]))?;
                    weighted_sum(g, y, 8)
                },
                &path_inputs(8, 4, 6, 5, 3),
                TOL,
            )
        }),
        GradCase::new("separator", separator_case),
        GradCase::new("upit_si_snr", || {
            let mut r = rng(10);
            let est = Tensor::<f64>::uniform([2, 48], 1.0, &mut r);
            let refs = Tensor::<f64>::uniform([2, 48], 1.0, &mut r);
            finite_diff_check(
                |g, v| {
                    let rv = g.constant(refs.clone());
                    Ok(upit_loss_var(g, v, rv, None)?.0)
                },
                &est,
                TOL,
            )
        }),
    ]
}
