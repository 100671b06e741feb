use crate::error::{Error, Result};
use crate::numerics::{BackwardOp, Graph, Real, Tensor, Var};

pub const LN_EPS: f64 = 1e-8;

/// Scalar mean and (biased) variance over every entry of a tensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerNormStats {
    pub mean: f64,
    pub variance: f64,
    pub eps: f64,
}

impl LayerNormStats {
    pub fn of<F: Real>(x: &Tensor<F>, eps: f64) -> Self {
        let n = x.len() as f64;
        let mean = x.data().iter().map(|v| v.f64()).sum::<f64>() / n;
        let variance = x
            .data()
            .iter()
            .map(|v| {
                let d = v.f64() - mean;
                d * d
            })
            .sum::<f64>()
            / n;
        LayerNormStats { mean, variance, eps }
    }

    pub fn inv_std(&self) -> f64 {
        1.0 / (self.variance + self.eps).sqrt()
    }
}

struct GlobalLayerNormOp {
    stats: LayerNormStats,
    features: usize,
}

impl<F: Real> BackwardOp<F> for GlobalLayerNormOp {
    fn name(&self) -> &'static str {
        "global_layer_norm"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<F>],
        _output: &Tensor<F>,
        grad: &Tensor<F>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<F>>>> {
        let x = inputs[0];
        let z = inputs[1].data();
        let n = self.features;
        let inner = x.len() / n;
        let mu = self.stats.mean;
        let rstd = self.stats.inv_std();
        let g = grad.data();
        let xd = x.data();

        let mut dz = vec![0.0f64; n];
        let mut dr = vec![0.0f64; n];
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for f in 0..n {
            let zf = z[f].f64();
            for j in f * inner..(f + 1) * inner {
                let xhat = (xd[j].f64() - mu) * rstd;
                let gj = g[j].f64();
                dz[f] += gj * xhat;
                dr[f] += gj;
                let dxhat = gj * zf;
                mean_dxhat += dxhat;
                mean_dxhat_xhat += dxhat * xhat;
            }
        }
        let count = x.len() as f64;
        mean_dxhat /= count;
        mean_dxhat_xhat /= count;

        let dx = if needs[0] {
            let mut d = Vec::with_capacity(x.len());
            for f in 0..n {
                let zf = z[f].f64();
                for j in f * inner..(f + 1) * inner {
                    let xhat = (xd[j].f64() - mu) * rstd;
                    let dxhat = g[j].f64() * zf;
                    d.push(F::of(rstd * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat)));
                }
            }
            Some(Tensor::new(x.shape().to_vec(), d)?)
        } else {
            None
        };
        let to_t = |v: Vec<f64>| Tensor::new([n], v.into_iter().map(F::of).collect());
        Ok(vec![
            dx,
            if needs[1] { Some(to_t(dz)?) } else { None },
            if needs[2] { Some(to_t(dr)?) } else { None },
        ])
    }
}

impl<F: Real> Graph<F> {
    /// `((x − μ)/√(σ + ε)) ⊙ z + r` with μ, σ taken over the whole tensor and
    /// `z`, `r` indexed by the leading (feature) axis.
    pub fn global_layer_norm(&mut self, x: Var, scale: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::InvalidArgument(format!("layer-norm epsilon must be positive, got {eps}")));
        }
        let xs = self.shape(x).to_vec();
        let Some(&n) = xs.first() else {
            return Err(Error::shape("global_layer_norm", "scalar input"));
        };
        if self.shape(scale) != [n] || self.shape(bias) != [n] {
            return Err(Error::shape(
                "global_layer_norm",
                format!(
                    "scale {:?} / bias {:?} must be [{n}] for input {xs:?}",
                    self.shape(scale),
                    self.shape(bias)
                ),
            ));
        }
        let xv = self.value(x);
        let stats = LayerNormStats::of(xv, eps);
        let rstd = stats.inv_std();
        let inner = xv.len() / n;
        let (z, r) = (self.value(scale).data(), self.value(bias).data());
        let mut out = Vec::with_capacity(xv.len());
        for f in 0..n {
            let (zf, rf) = (z[f].f64(), r[f].f64());
            for &v in &xv.data()[f * inner..(f + 1) * inner] {
                out.push(F::of((v.f64() - stats.mean) * rstd * zf + rf));
            }
        }
        let value = Tensor::new(xs, out)?;
        self.record(
            &[x, scale, bias],
            value,
            Box::new(GlobalLayerNormOp { stats, features: n }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn run(x: &Tensor<f64>, z: &Tensor<f64>, r: &Tensor<f64>) -> Tensor<f64> {
        let mut g = Graph::new();
        let (xv, zv, rv) = (g.constant(x.clone()), g.constant(z.clone()), g.constant(r.clone()));
        let y = g.global_layer_norm(xv, zv, rv, LN_EPS).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn constant_input_gives_bias() {
        let x = Tensor::full([2, 3, 4], 3.5);
        let z = Tensor::from_vec(vec![2.0, -1.0]);
        let r = Tensor::from_vec(vec![0.25, 7.0]);
        let y = run(&x, &z, &r);
        for (j, &v) in y.data().iter().enumerate() {
            assert_eq!(v, r.data()[j / 12]);
        }
    }

    #[test]
    fn standardized_input_is_unchanged() {
        let x = Tensor::from_vec(vec![1.0, -1.0, 1.0, -1.0]).reshape([2, 2, 1]).unwrap();
        let y = run(&x, &Tensor::ones([2]), &Tensor::zeros([2]));
        assert!(y.max_abs_diff(&x) < 1e-7);
    }

    #[test]
    fn matches_direct_formula_on_2x2x2() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = Tensor::<f64>::uniform([2, 2, 2], 2.0, &mut rng);
        let z = Tensor::<f64>::uniform([2], 1.0, &mut rng);
        let r = Tensor::<f64>::uniform([2], 1.0, &mut rng);
        let y = run(&x, &z, &r);
        let xs = x.data();
        let mu: f64 = xs.iter().sum::<f64>() / 8.0;
        let var: f64 = xs.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / 8.0;
        for i in 0..2 {
            for j in 0..4 {
                let v = xs[i * 4 + j];
                let want = (v - mu) / (var + LN_EPS).sqrt() * z.data()[i] + r.data()[i];
                assert!((y.data()[i * 4 + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_non_positive_eps_and_bad_scale() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::ones([2, 2, 2]));
        let z = g.constant(Tensor::ones([2]));
        let r = g.constant(Tensor::zeros([2]));
        assert!(g.global_layer_norm(x, z, r, 0.0).is_err());
        let z3 = g.constant(Tensor::ones([3]));
        assert!(g.global_layer_norm(x, z3, r, LN_EPS).is_err());
    }
}
