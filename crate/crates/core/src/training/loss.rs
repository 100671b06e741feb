//! Scale-invariant SNR and the utterance-level permutation-invariant loss.

use crate::error::{Error, Result};
use crate::numerics::{BackwardOp, Graph, Real, Tensor, Var};

/// The error energy is floored at this fraction of the target energy,
/// capping SI-SNR at 80 dB for any signal scale.
pub const SI_SNR_EPS: f64 = 1e-8;

/// Keeps the ratio finite when the projection onto the reference vanishes.
const ENERGY_FLOOR: f64 = 1e-30;

const DB: f64 = 10.0 / std::f64::consts::LN_10;

/// Largest supported source count for exhaustive permutation search.
pub const MAX_SOURCES: usize = 6;

/// The SI-SNR cap, reached when the estimate is a positive multiple of the reference.
pub fn si_snr_cap() -> f64 {
    10.0 * (1.0 / SI_SNR_EPS).log10()
}

struct Projection {
    reference: Vec<f64>,
    ref_energy: f64,
    alpha: f64,
    target_energy: f64,
    noise: Vec<f64>,
    noise_energy: f64,
}

fn centered<F: Real>(x: &[F]) -> Vec<f64> {
    let mean = x.iter().map(|v| v.f64()).sum::<f64>() / x.len() as f64;
    x.iter().map(|v| v.f64() - mean).collect()
}

fn project<F: Real>(est: &[F], reference: &[F]) -> Result<Projection> {
    if est.len() != reference.len() || est.is_empty() {
        return Err(Error::shape(
            "si_snr",
            format!("estimate has {} samples, reference {}", est.len(), reference.len()),
        ));
    }
    let e = centered(est);
    let r = centered(reference);
    let ref_energy: f64 = r.iter().map(|v| v * v).sum();
    if ref_energy <= 0.0 {
        return Err(Error::ZeroEnergy("si_snr reference"));
    }
    let alpha = e.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>() / ref_energy;
    let noise: Vec<f64> = e.iter().zip(&r).map(|(a, b)| a - alpha * b).collect();
    let noise_energy = noise.iter().map(|v| v * v).sum();
    Ok(Projection {
        reference: r,
        ref_energy,
        alpha,
        target_energy: alpha * alpha * ref_energy,
        noise,
        noise_energy,
    })
}

impl Projection {
    fn value(&self) -> f64 {
        let s = self.target_energy;
        DB * ((s + ENERGY_FLOOR) / (self.noise_energy + SI_SNR_EPS * s + ENERGY_FLOOR)).ln()
    }

    /// d SI-SNR / d est.
    fn gradient(&self) -> Vec<f64> {
        let s = self.target_energy;
        let den = self.noise_energy + SI_SNR_EPS * s + ENERGY_FLOOR;
        let num = s + ENERGY_FLOOR;
        let nr = self.noise.iter().zip(&self.reference).map(|(a, b)| a * b).sum::<f64>() / self.ref_energy;
        // With respect to the centered estimate.
        let de: Vec<f64> = self
            .reference
            .iter()
            .zip(&self.noise)
            .map(|(&r, &n)| {
                let ds = 2.0 * self.alpha * r;
                let dn = 2.0 * n - 2.0 * nr * r;
                DB * (ds / num - (dn + SI_SNR_EPS * ds) / den)
            })
            .collect();
        let mean = de.iter().sum::<f64>() / de.len() as f64;
        de.into_iter().map(|v| v - mean).collect()
    }
}

/// SI-SNR in dB of `est` against `reference`.
pub fn si_snr<F: Real>(est: &[F], reference: &[F]) -> Result<f64> {
    Ok(project(est, reference)?.value())
}

/// Plain SNR in dB, with the same error-energy floor as [`si_snr`].
pub fn snr<F: Real>(est: &[F], reference: &[F]) -> Result<f64> {
    if est.len() != reference.len() || est.is_empty() {
        return Err(Error::shape("snr", "length mismatch"));
    }
    let energy: f64 = reference.iter().map(|v| v.f64() * v.f64()).sum();
    if energy <= 0.0 {
        return Err(Error::ZeroEnergy("snr reference"));
    }
    let err: f64 = est
        .iter()
        .zip(reference)
        .map(|(a, b)| {
            let d = a.f64() - b.f64();
            d * d
        })
        .sum();
    Ok(10.0 * (energy / (err + SI_SNR_EPS * energy)).log10())
}

struct SiSnrOp {
    grad: Vec<f64>,
}

impl<F: Real> BackwardOp<F> for SiSnrOp {
    fn name(&self) -> &'static str {
        "si_snr"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<F>],
        _output: &Tensor<F>,
        grad: &Tensor<F>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<F>>>> {
        let g = grad.item().f64();
        let d = self.grad.iter().map(|&v| F::of(v * g)).collect();
        Ok(vec![Some(Tensor::new(inputs[0].shape().to_vec(), d)?), None])
    }
}

impl<F: Real> Graph<F> {
    /// Scalar SI-SNR (dB) of a 1-D estimate against a reference; the
    /// reference is treated as a constant.
    pub fn si_snr(&mut self, est: Var, reference: Var) -> Result<Var> {
        if self.shape(est) != self.shape(reference) {
            return Err(Error::shape(
                "si_snr",
                format!("{:?} vs {:?}", self.shape(est), self.shape(reference)),
            ));
        }
        let p = project(self.value(est).data(), self.value(reference).data())?;
        let value = Tensor::scalar(F::of(p.value()));
        let grad = p.gradient();
        self.record(&[est, reference], value, Box::new(SiSnrOp { grad }))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PermutationResult {
    /// `best_perm[i]` is the reference matched to estimate `i`.
    pub best_perm: Vec<usize>,
    /// SI-SNR of each estimate against its matched reference.
    pub per_source: Vec<f64>,
    pub mean: f64,
}

/// Advances `p` to the next permutation in lexicographic order.
fn next_permutation(p: &mut [usize]) -> bool {
    let n = p.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// Picks the assignment maximizing mean SI-SNR from a `C×C` score matrix
/// (`scores[i][j]` = estimate `i` against reference `j`). Ties keep the
/// lexicographically smallest permutation.
pub fn best_permutation(scores: &[Vec<f64>]) -> Result<PermutationResult> {
    let c = scores.len();
    if c == 0 {
        return Err(Error::Empty { op: "upit" });
    }
    if c > MAX_SOURCES {
        return Err(Error::Unsupported(format!(
            "exhaustive permutation search is limited to {MAX_SOURCES} sources, got {c}"
        )));
    }
    let mut perm: Vec<usize> = (0..c).collect();
    let mut best: Option<PermutationResult> = None;
    loop {
        let per_source: Vec<f64> = perm.iter().enumerate().map(|(i, &j)| scores[i][j]).collect();
        let mean = per_source.iter().sum::<f64>() / c as f64;
        if best.as_ref().is_none_or(|b| mean > b.mean) {
            best = Some(PermutationResult {
                best_perm: perm.clone(),
                per_source,
                mean,
            });
        }
        if !next_permutation(&mut perm) {
            break;
        }
    }
    Ok(best.expect("at least one permutation"))
}

fn check_pair(est: &[usize], refs: &[usize]) -> Result<()> {
    if est.len() != 2 || est != refs {
        return Err(Error::shape("upit", format!("estimates {est:?} vs references {refs:?}")));
    }
    if est[0] > MAX_SOURCES {
        return Err(Error::Unsupported(format!(
            "exhaustive permutation search is limited to {MAX_SOURCES} sources, got {}",
            est[0]
        )));
    }
    Ok(())
}

/// Pairwise SI-SNR matrix between the rows of `[C, T]` tensors, using the
/// first `valid` samples.
pub fn score_matrix<F: Real>(est: &Tensor<F>, refs: &Tensor<F>, valid: usize) -> Result<Vec<Vec<f64>>> {
    check_pair(est.shape(), refs.shape())?;
    let c = est.shape()[0];
    (0..c)
        .map(|i| {
            (0..c)
                .map(|j| si_snr(&est.row(i)[..valid], &refs.row(j)[..valid]))
                .collect()
        })
        .collect()
}

/// `(−max mean SI-SNR, assignment)` over all `C!` permutations.
pub fn upit_loss<F: Real>(est: &Tensor<F>, refs: &Tensor<F>) -> Result<(f64, PermutationResult)> {
    let valid = est.shape().get(1).copied().unwrap_or(0);
    let scores = score_matrix(est, refs, valid)?;
    let best = best_permutation(&scores)?;
    Ok((-best.mean, best))
}

/// Recorded uPIT loss on `[C, T]` estimates; only the first `valid`
/// samples (all when `None`) enter the loss.
pub fn upit_loss_var<F: Real>(
    g: &mut Graph<F>,
    est: Var,
    refs: Var,
    valid: Option<usize>,
) -> Result<(Var, PermutationResult)> {
    check_pair(g.shape(est), g.shape(refs))?;
    let (c, t) = (g.shape(est)[0], g.shape(est)[1]);
    let valid = valid.unwrap_or(t).min(t);
    if valid == 0 {
        return Err(Error::Empty { op: "upit" });
    }
    let scores = score_matrix(g.value(est), g.value(refs), valid)?;
    let best = best_permutation(&scores)?;
    let mut terms = Vec::with_capacity(c);
    for (i, &j) in best.best_perm.iter().enumerate() {
        let e = g.narrow(est, 0, i, 1)?;
        let e = g.narrow(e, 1, 0, valid)?;
        let e = g.reshape(e, &[valid])?;
        let r = g.narrow(refs, 0, j, 1)?;
        let r = g.narrow(r, 1, 0, valid)?;
        let r = g.reshape(r, &[valid])?;
        terms.push(g.si_snr(e, r)?);
    }
    let terms = terms
        .into_iter()
        .map(|v| g.reshape(v, &[1]))
        .collect::<Result<Vec<_>>>()?;
    let stacked = g.concat(&terms, 0)?;
    let total = g.sum(stacked)?;
    let loss = g.scale(total, F::of(-1.0 / c as f64))?;
    Ok((loss, best))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn positive_multiples_hit_the_same_cap() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = randn(256, &mut rng);
        let vals: Vec<f64> = [0.5, 1.0, 2.0]
            .iter()
            .map(|a| si_snr(&r.iter().map(|v| v * a).collect::<Vec<_>>(), &r).unwrap())
            .collect();
        assert!((vals[0] - vals[1]).abs() < 1e-9 && (vals[1] - vals[2]).abs() < 1e-9);
        assert!((vals[1] - si_snr_cap()).abs() < 1e-6, "{vals:?}");
    }

    #[test]
    fn orthogonal_estimate_is_very_negative() {
        // Zero-mean, mutually orthogonal sequences.
        let r = [1.0, -1.0, 1.0, -1.0];
        let e = [1.0, 1.0, -1.0, -1.0];
        let v = si_snr(&e, &r).unwrap();
        assert!(v < -100.0, "{v}");
        assert!(v.is_finite());
    }

    #[test]
    fn constructed_ten_db_example() {
        // n ⟂ r with ‖r‖²/‖n‖² = 10.
        let r = [1.0, -1.0, 1.0, -1.0];
        let scale = (0.4f64).sqrt() / 2.0;
        let n = [scale, scale, -scale, -scale];
        let est: Vec<f64> = r.iter().zip(&n).map(|(a, b)| a + b).collect();
        let v = si_snr(&est, &r).unwrap();
        let expected = 10.0 * (10.0f64 / (1.0 + SI_SNR_EPS * 10.0)).log10();
        assert!((v - expected).abs() < 1e-9);
        assert!((v - 10.0).abs() < 1e-6);
    }

    #[test]
    fn zero_reference_is_an_error() {
        assert!(matches!(si_snr(&[1.0, 2.0], &[3.0, 3.0]), Err(Error::ZeroEnergy(_))));
    }

    #[test]
    fn single_source_uses_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let e = Tensor::new([1, 32], randn(32, &mut rng)).unwrap();
        let r = Tensor::new([1, 32], randn(32, &mut rng)).unwrap();
        let (loss, p) = upit_loss(&e, &r).unwrap();
        assert_eq!(p.best_perm, vec![0]);
        assert_eq!(loss, -si_snr(e.data(), r.data()).unwrap());
    }

    #[test]
    fn swapped_estimates_are_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = randn(64, &mut rng);
        let b = randn(64, &mut rng);
        let refs = Tensor::new([2, 64], [a.clone(), b.clone()].concat()).unwrap();
        let est = Tensor::new([2, 64], [b, a].concat()).unwrap();
        let (loss, p) = upit_loss(&est, &refs).unwrap();
        assert_eq!(p.best_perm, vec![1, 0]);
        assert!((loss + si_snr_cap()).abs() < 1e-6);
    }

    #[test]
    fn ties_prefer_lexicographically_first() {
        let scores = vec![vec![1.0, 1.0], vec![1.0, 1.0]];
        assert_eq!(best_permutation(&scores).unwrap().best_perm, vec![0, 1]);
    }

    #[test]
    fn too_many_sources_is_unsupported() {
        let scores = vec![vec![0.0; 7]; 7];
        assert!(matches!(best_permutation(&scores), Err(Error::Unsupported(_))));
    }

    #[test]
    fn permutations_are_lexicographic_and_complete() {
        let mut p = vec![0, 1, 2];
        let mut all = vec![p.clone()];
        while next_permutation(&mut p) {
            all.push(p.clone());
        }
        assert_eq!(all.len(), 6);
        assert!(all.windows(2).all(|w| w[0] < w[1]));
    }
}
