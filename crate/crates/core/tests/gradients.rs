//! Finite-difference checks (float64, central step 1e-5) for every
//! differentiable op.

use dpsep::dualpath::{dprnn_stack, inter_chunk_pass, intra_chunk_pass, DprnnBlockParams, PathParams, LN_EPS};
use dpsep::numerics::{finite_diff_check, finite_diff_check_many, Graph, LstmCellParams, LstmVars, Tensor, Var};
use dpsep::tasnet::{self, ModelConfig, SeparatorModel};
use dpsep::training::upit_loss_var;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn assert_pass(name: &str, r: dpsep::numerics::GradCheckReport) {
    assert!(r.passed(), "{name}: {r:?}");
}

/// Weighted sum so every output element carries a distinct gradient.
fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> dpsep::Result<Var> {
    let w = Tensor::uniform(g.shape(y).to_vec(), 1.0, &mut rng(seed));
    let wv = g.constant(w);
    let p = g.mul(y, wv)?;
    g.sum(p)
}

fn cell_tensors(p: &LstmCellParams<f64>) -> Vec<Tensor<f64>> {
    vec![p.w_ih.clone(), p.w_hh.clone(), p.bias.clone()]
}

fn cell_vars(v: &[Var]) -> LstmVars {
    LstmVars {
        w_ih: v[0],
        w_hh: v[1],
        bias: v[2],
    }
}

#[test]
fn elementwise_ops() {
    for (i, shape) in [[3usize, 4], [2, 5], [6, 1]].iter().enumerate() {
        let mut r = rng(i as u64);
        let x = Tensor::<f64>::uniform(shape.to_vec(), 2.0, &mut r);
        let y = Tensor::<f64>::uniform(shape.to_vec(), 2.0, &mut r);
        let col = Tensor::<f64>::uniform([shape[0]], 2.0, &mut r);
        let rep = finite_diff_check_many(
            |g, v| {
                let a = g.sigmoid(v[0])?;
                let b = g.tanh(v[1])?;
                let c = g.mul(a, b)?;
                let d = g.add(c, v[0])?;
                let e = g.mul(d, v[2])?;
                let f = g.relu(e)?;
                let h = g.sub(f, v[1])?;
                weighted_sum(g, h, 99)
            },
            &[x, y, col],
            TOL,
        )
        .unwrap();
        assert_pass("elementwise", rep);
    }
}

#[test]
fn affine_permute_narrow_concat() {
    for (i, (rows, fan_in, fan_out)) in [(1, 3, 2), (4, 5, 3), (6, 2, 7)].into_iter().enumerate() {
        let mut r = rng(10 + i as u64);
        let x = Tensor::<f64>::uniform([2, rows, fan_in], 1.0, &mut r);
        let w = Tensor::<f64>::uniform([fan_out, fan_in], 1.0, &mut r);
        let b = Tensor::<f64>::uniform([fan_out], 1.0, &mut r);
        let rep = finite_diff_check_many(
            |g, v| {
                let y = g.affine(v[0], v[1], Some(v[2]))?;
                let p = g.permute(y, &[2, 0, 1])?;
                let n = g.narrow(p, 0, 0, 1)?;
                let c = g.concat(&[p, n], 0)?;
                weighted_sum(g, c, 5)
            },
            &[x, w, b],
            TOL,
        )
        .unwrap();
        assert_pass("affine", rep);
    }
}

#[test]
fn conv1d_and_transposed() {
    for (i, (t, n, w, s)) in [(9, 2, 3, 1), (20, 3, 4, 2), (17, 4, 6, 3)].into_iter().enumerate() {
        let mut r = rng(20 + i as u64);
        let x = Tensor::<f64>::uniform([1, t], 1.0, &mut r);
        let k = Tensor::<f64>::uniform([n, w], 1.0, &mut r);
        let rep = finite_diff_check_many(
            |g, v| {
                let y = g.conv1d(v[0], v[1], s)?;
                weighted_sum(g, y, 1)
            },
            &[x.clone(), k.clone()],
            TOL,
        )
        .unwrap();
        assert_pass("conv1d", rep);

        let l = (t - w) / s + 1;
        let f = Tensor::<f64>::uniform([n, l], 1.0, &mut r);
        let rep = finite_diff_check_many(
            |g, v| {
                let y = g.transposed_conv1d(v[0], v[1], s)?;
                weighted_sum(g, y, 2)
            },
            &[f, k],
            TOL,
        )
        .unwrap();
        assert_pass("transposed_conv1d", rep);
    }
}

#[test]
fn lstm_step() {
    for (i, (input, hidden, batch)) in [(3, 2, 1), (4, 3, 2), (2, 5, 3)].into_iter().enumerate() {
        let mut r = rng(30 + i as u64);
        let p = LstmCellParams::<f64>::init(input, hidden, &mut r);
        let mut xs = cell_tensors(&p);
        xs.push(Tensor::uniform([batch, input], 1.0, &mut r));
        xs.push(Tensor::uniform([batch, hidden], 1.0, &mut r));
        xs.push(Tensor::uniform([batch, hidden], 1.0, &mut r));
        let rep = finite_diff_check_many(
            |g, v| {
                let (h, c) = g.lstm_step(v[3], v[4], v[5], &cell_vars(&v[..3]))?;
                let both = g.concat(&[h, c], 1)?;
                weighted_sum(g, both, 3)
            },
            &xs,
            TOL,
        )
        .unwrap();
        assert_pass("lstm_step", rep);
    }
}

#[test]
fn bilstm() {
    for (i, (batch, steps, input, hidden)) in [(1, 1, 2, 2), (2, 4, 3, 2), (3, 5, 2, 4)].into_iter().enumerate() {
        let mut r = rng(40 + i as u64);
        let f = LstmCellParams::<f64>::init(input, hidden, &mut r);
        let b = LstmCellParams::<f64>::init(input, hidden, &mut r);
        let mut xs = cell_tensors(&f);
        xs.extend(cell_tensors(&b));
        xs.push(Tensor::uniform([batch, steps, input], 1.0, &mut r));
        let rep = finite_diff_check_many(
            |g, v| {
                let y = g.bilstm(v[6], &cell_vars(&v[..3]), &cell_vars(&v[3..6]))?;
                weighted_sum(g, y, 4)
            },
            &xs,
            TOL,
        )
        .unwrap();
        assert_pass("bilstm", rep);
    }
}

#[test]
fn global_layer_norm() {
    for (i, shape) in [[2usize, 3, 4], [4, 6, 5], [1, 2, 2]].iter().enumerate() {
        let mut r = rng(50 + i as u64);
        let x = Tensor::<f64>::uniform(shape.to_vec(), 2.0, &mut r);
        let z = Tensor::<f64>::uniform([shape[0]], 1.5, &mut r);
        let b = Tensor::<f64>::uniform([shape[0]], 1.5, &mut r);
        let rep = finite_diff_check_many(
            |g, v| {
                let y = g.global_layer_norm(v[0], v[1], v[2], LN_EPS)?;
                weighted_sum(g, y, 6)
            },
            &[x, z, b],
            TOL,
        )
        .unwrap();
        assert_pass("global_layer_norm", rep);
    }
}

#[test]
fn segment_and_overlap_add() {
    let mut r = rng(60);
    let x = Tensor::<f64>::uniform([3, 7], 1.0, &mut r);
    let rep = finite_diff_check(
        |g, v| {
            let (c, lay) = g.segment(v, 4)?;
            let sq = g.mul(c, c)?;
            let back = g.overlap_add(sq, lay)?;
            weighted_sum(g, back, 7)
        },
        &x,
        TOL,
    )
    .unwrap();
    assert_pass("segment/overlap_add", rep);
}

fn path_inputs(p: &PathParams<f64>) -> Vec<Tensor<f64>> {
    let mut out = Vec::new();
    p.visit("", &mut |_, t| out.push(t.clone()));
    out
}

fn path_vars(v: &[Var]) -> dpsep::dualpath::PathVars {
    dpsep::dualpath::PathVars {
        lstm_fwd: cell_vars(&v[0..3]),
        lstm_bwd: cell_vars(&v[3..6]),
        fc_weight: v[6],
        fc_bias: v[7],
        ln_scale: v[8],
        ln_bias: v[9],
    }
}

#[test]
fn intra_and_inter_passes() {
    for (i, (n, k, s, h)) in [(4, 6, 5, 3), (2, 4, 3, 2), (3, 2, 4, 2)].into_iter().enumerate() {
        let mut r = rng(70 + i as u64);
        let p = PathParams::<f64>::init(n, h, &mut r);
        let mut xs = path_inputs(&p);
        // Non-trivial LN parameters.
        xs[8] = Tensor::uniform([n], 1.5, &mut r);
        xs[9] = Tensor::uniform([n], 1.5, &mut r);
        xs.push(Tensor::uniform([n, k, s], 1.0, &mut r));
        let rep = finite_diff_check_many(
            |g, v| {
                let pv = path_vars(&v[..10]);
                let y = intra_chunk_pass(g, v[10], &pv)?;
                weighted_sum(g, y, 8)
            },
            &xs,
            TOL,
        )
        .unwrap();
        assert_pass("intra_chunk_pass", rep);
        let rep = finite_diff_check_many(
            |g, v| {
                let pv = path_vars(&v[..10]);
                let y = inter_chunk_pass(g, v[10], &pv)?;
                weighted_sum(g, y, 9)
            },
            &xs,
            TOL,
        )
        .unwrap();
        assert_pass("inter_chunk_pass", rep);
    }
}

#[test]
fn dprnn_stack_of_two_blocks() {
    let (n, k, s, h) = (4, 6, 5, 3);
    let mut r = rng(80);
    let blocks: Vec<DprnnBlockParams<f64>> = (0..2).map(|_| DprnnBlockParams::init(n, h, &mut r)).collect();
    let x = Tensor::<f64>::uniform([n, k, s], 1.0, &mut r);
    let rep = finite_diff_check(
        |g, v| {
            let bv: Vec<_> = blocks.iter().map(|b| b.bind(g, &mut |g, t| g.constant(t.clone()))).collect();
            let y = dprnn_stack(g, v, &bv)?;
            weighted_sum(g, y, 10)
        },
        &x,
        TOL,
    )
    .unwrap();
    assert_pass("dprnn_stack", rep);
}

fn tiny_model(blocks: usize) -> SeparatorModel<f64> {
    let cfg = ModelConfig {
        num_filters: 4,
        window: 4,
        num_sources: 2,
        num_blocks: blocks,
        hidden: 3,
        chunk_len: None,
        sample_rate: 8000,
    };
    SeparatorModel::new(cfg, 17).unwrap()
}

#[test]
fn full_tiny_separator_parameters() {
    let model = tiny_model(2);
    let mut r = rng(90);
    let mixture = Tensor::<f64>::uniform([1, 30], 1.0, &mut r);
    let refs = Tensor::<f64>::uniform([2, 30], 1.0, &mut r);
    let params: Vec<Tensor<f64>> = model.named_params().into_iter().map(|(_, t)| t.clone()).collect();
    let rep = finite_diff_check_many(
        |g, v| {
            let mut m = model.clone();
            // Rebuild var handles in visit order.
            let mut it = v.iter().copied();
            let vars = tasnet::ModelVars {
                encoder: it.next().unwrap(),
                decoder: it.next().unwrap(),
                mask_weight: it.next().unwrap(),
                mask_bias: it.next().unwrap(),
                blocks: m
                    .blocks
                    .iter_mut()
                    .map(|b| {
                        let mut take = |_: &mut Graph<f64>, _: &Tensor<f64>| it.next().unwrap();
                        b.bind(g, &mut take)
                    })
                    .collect(),
            };
            let x = g.constant(mixture.clone());
            let y = tasnet::separate(g, x, &m, &vars)?;
            let rv = g.constant(refs.clone());
            let (loss, _) = upit_loss_var(g, y, rv, None)?;
            Ok(loss)
        },
        &params,
        TOL,
    )
    .unwrap();
    assert_pass("separator", rep);
}

#[test]
fn upit_si_snr_loss_wrt_estimates() {
    for (i, (c, t)) in [(1, 64), (2, 64), (3, 40)].into_iter().enumerate() {
        let mut r = rng(100 + i as u64);
        let est = Tensor::<f64>::uniform([c, t], 1.0, &mut r);
        let refs = Tensor::<f64>::uniform([c, t], 1.0, &mut r);
        let rep = finite_diff_check(
            |g, v| {
                let rv = g.constant(refs.clone());
                Ok(upit_loss_var(g, v, rv, None)?.0)
            },
            &est,
            TOL,
        )
        .unwrap();
        assert_pass("upit", rep);
    }
}

#[test]
fn shipped_suite_passes_quickly() {
    let started = std::time::Instant::now();
    let outcomes = dpsep::selfcheck::run_cases(&dpsep::selfcheck::cases(), dpsep::par::Mode::Sequential);
    for o in &outcomes {
        assert!(o.passed(), "{}", o.line());
    }
    assert!(started.elapsed().as_secs() < 60);
}
