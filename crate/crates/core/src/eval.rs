//! SI-SNRi and SNRi of separated estimates, aligned by the uPIT assignment.

use crate::data::MixtureExample;
use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};
use crate::par::{self, Mode};
use crate::tasnet::SeparatorModel;
use crate::training::{best_permutation, score_matrix, si_snr, snr};

#[derive(Debug, Clone, PartialEq)]
pub struct ExampleScore {
    /// Reference matched to each estimate.
    pub perm: Vec<usize>,
    pub si_snr: Vec<f64>,
    pub si_snri: Vec<f64>,
    pub snri: Vec<f64>,
    pub mean_si_snri: f64,
    pub mean_snri: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub examples: Vec<ExampleScore>,
    pub mean_si_snri: f64,
    pub mean_snri: f64,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Scores `[C, T]` estimates against references over the first `valid`
/// samples; improvements are relative to the unprocessed `[1, T]` mixture.
pub fn score_estimates<F: Real>(est: &Tensor<F>, mixture: &Tensor<F>, refs: &Tensor<F>, valid: usize) -> Result<ExampleScore> {
    let t = refs.shape().get(1).copied().unwrap_or(0);
    if mixture.len() != t || valid == 0 || valid > t {
        return Err(Error::shape(
            "score_estimates",
            format!("mixture {:?}, references {:?}, valid {valid}", mixture.shape(), refs.shape()),
        ));
    }
    let best = best_permutation(&score_matrix(est, refs, valid)?)?;
    let mix = &mixture.data()[..valid];
    let mut si_snri = Vec::new();
    let mut snri = Vec::new();
    for (i, &j) in best.best_perm.iter().enumerate() {
        let r = &refs.row(j)[..valid];
        si_snri.push(best.per_source[i] - si_snr(mix, r)?);
        snri.push(snr(&est.row(i)[..valid], r)? - snr(mix, r)?);
    }
    Ok(ExampleScore {
        mean_si_snri: mean(&si_snri),
        mean_snri: mean(&snri),
        perm: best.best_perm,
        si_snr: best.per_source,
        si_snri,
        snri,
    })
}

pub fn evaluate_example(model: &SeparatorModel<f32>, ex: &MixtureExample) -> Result<ExampleScore> {
    let est = model.separate(&ex.mixture)?;
    score_estimates(&est, &ex.mixture, &ex.sources, ex.valid_len)
}

pub fn evaluate(model: &SeparatorModel<f32>, examples: &[MixtureExample], mode: Mode) -> Result<EvalReport> {
    if examples.is_empty() {
        return Err(Error::Empty { op: "evaluate" });
    }
    let scores = par::map(mode, examples, |ex| evaluate_example(model, ex))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        mean_si_snri: mean(&scores.iter().map(|s| s.mean_si_snri).collect::<Vec<_>>()),
        mean_snri: mean(&scores.iter().map(|s| s.mean_snri).collect::<Vec<_>>()),
        examples: scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{mix_at_snr, synth_source, SourceKind};
    use crate::training::si_snr_cap;

    fn example() -> MixtureExample {
        let a = synth_source(SourceKind::Harmonic, 0.1, 8000, 1).unwrap();
        let b = synth_source(SourceKind::Chirp, 0.1, 8000, 2).unwrap();
        mix_at_snr(&a, &b, 2.0, 8000).unwrap()
    }

    #[test]
    fn mixture_copies_improve_nothing() {
        let ex = example();
        let t = ex.len();
        let est = Tensor::new([2, t], [ex.mixture.data(), ex.mixture.data()].concat()).unwrap();
        let s = score_estimates(&est, &ex.mixture, &ex.sources, t).unwrap();
        assert!(s.si_snri.iter().all(|v| v.abs() < 1e-6), "{s:?}");
        assert!(s.snri.iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn perfect_estimates_reach_the_cap() {
        let ex = example();
        let t = ex.len();
        let s = score_estimates(&ex.sources, &ex.mixture, &ex.sources, t).unwrap();
        for (j, v) in s.si_snri.iter().enumerate() {
            let base = si_snr(ex.mixture.data(), ex.sources.row(j)).unwrap();
            assert!((v - (si_snr_cap() - base)).abs() < 1e-4, "{v}");
        }
        assert_eq!(s.perm, vec![0, 1]);
    }
}
