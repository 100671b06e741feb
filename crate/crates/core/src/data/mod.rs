//! Audio I/O, synthetic sources, mixing and dataset assembly.

mod manifest;
mod synth;
mod wav;

pub use manifest::{Manifest, ManifestRecord, SourceSpec, Split, SNR_RANGE_DB};
pub use synth::{harmonic, synth_source, SourceKind};
pub use wav::{read_wav, to_pcm16, write_wav};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::par::{self, Mode};

pub const DEFAULT_SAMPLE_RATE: u32 = 8000;

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureExample {
    /// `[1, T]`
    pub mixture: Tensor<f32>,
    /// `[C, T]`, post-scaling, summing exactly to the mixture.
    pub sources: Tensor<f32>,
    pub sample_rate: u32,
    pub snr_db: f64,
    pub seed: u64,
    /// Samples past this index are zero padding.
    pub valid_len: usize,
}

impl MixtureExample {
    pub fn len(&self) -> usize {
        self.mixture.last_dim()
    }

    pub fn is_empty(&self) -> bool {
        self.valid_len == 0
    }

    pub fn num_sources(&self) -> usize {
        self.sources.shape()[0]
    }
}

fn energy(x: &[f32]) -> f64 {
    x.iter().map(|&v| v as f64 * v as f64).sum()
}

/// Gain applied to the second source so that `10·log10(E1/E2') = snr_db`.
pub fn snr_gain(s1: &[f32], s2: &[f32], snr_db: f64) -> Result<f64> {
    let (e1, e2) = (energy(s1), energy(s2));
    if e1 <= 0.0 {
        return Err(Error::ZeroEnergy("mix_at_snr first source"));
    }
    if e2 <= 0.0 {
        return Err(Error::ZeroEnergy("mix_at_snr second source"));
    }
    Ok((e1 / (e2 * 10f64.powf(snr_db / 10.0))).sqrt())
}

/// Rescales `s2` to the requested SNR against `s1` and sums.
pub fn mix_at_snr(s1: &Tensor<f32>, s2: &Tensor<f32>, snr_db: f64, sample_rate: u32) -> Result<MixtureExample> {
    if s1.shape() != s2.shape() || s1.ndim() != 2 || s1.shape()[0] != 1 {
        return Err(Error::shape(
            "mix_at_snr",
            format!("sources must both be [1, T], got {:?} and {:?}", s1.shape(), s2.shape()),
        ));
    }
    let gain = snr_gain(s1.data(), s2.data(), snr_db)?;
    let t = s1.last_dim();
    let scaled: Vec<f32> = s2.data().iter().map(|&v| (v as f64 * gain) as f32).collect();
    let mixture: Vec<f32> = s1.data().iter().zip(&scaled).map(|(a, b)| a + b).collect();
    let mut sources = s1.data().to_vec();
    sources.extend_from_slice(&scaled);
    Ok(MixtureExample {
        mixture: Tensor::new([1, t], mixture)?,
        sources: Tensor::new([2, t], sources)?,
        sample_rate,
        snr_db,
        seed: 0,
        valid_len: t,
    })
}

/// SplitMix64 finalizer, used to derive independent sub-seeds.
pub fn derive_seed(base: u64, salt: u64) -> u64 {
    let mut z = base ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn load_source(spec: &SourceSpec, record: &ManifestRecord, synth_seconds: f64, sample_rate: u32, seed: u64) -> Result<Vec<f32>> {
    let unresolvable = |msg: String| Error::Unresolvable {
        record: record.to_string(),
        msg,
    };
    match spec {
        SourceSpec::Wav(path) => {
            let (t, sr) = read_wav(path).map_err(|e| unresolvable(format!("{}: {e}", path.display())))?;
            if sr != sample_rate {
                return Err(unresolvable(format!(
                    "{} is sampled at {sr} Hz, dataset uses {sample_rate} Hz",
                    path.display()
                )));
            }
            Ok(t.into_data())
        }
        SourceSpec::Synth { kind, seed: s, seconds } => {
            let t = synth_source(*kind, seconds.unwrap_or(synth_seconds), sample_rate, derive_seed(seed, *s))
                .map_err(|e| unresolvable(e.to_string()))?;
            Ok(t.into_data())
        }
    }
}

/// Segments of `segment` samples, or the whole record when `None`.
fn record_examples(
    record: &ManifestRecord,
    index: usize,
    segment: Option<usize>,
    synth_seconds: f64,
    sample_rate: u32,
    seed: u64,
) -> Result<Vec<MixtureExample>> {
    let unresolvable = |msg: String| Error::Unresolvable {
        record: record.to_string(),
        msg,
    };
    if record.rir.is_some() {
        return Err(unresolvable("room impulse responses are not supported".into()));
    }
    let record_seed = derive_seed(seed, index as u64);
    let mut s1 = load_source(&record.sources[0], record, synth_seconds, sample_rate, seed)?;
    let mut s2 = load_source(&record.sources[1], record, synth_seconds, sample_rate, seed)?;
    let skip = (record.offset_s * sample_rate as f64).round() as usize;
    let t = s1.len().min(s2.len());
    if skip >= t {
        return Err(unresolvable(format!("offset skips all {t} samples")));
    }
    s1.truncate(t);
    s2.truncate(t);
    s1.drain(..skip);
    s2.drain(..skip);

    let seg = segment.unwrap_or(s1.len());
    let count = s1.len().div_ceil(seg);
    (0..count)
        .map(|k| {
            let lo = k * seg;
            let hi = (lo + seg).min(s1.len());
            let mut a = vec![0.0f32; seg];
            let mut b = vec![0.0f32; seg];
            a[..hi - lo].copy_from_slice(&s1[lo..hi]);
            b[..hi - lo].copy_from_slice(&s2[lo..hi]);
            let mut ex = mix_at_snr(&Tensor::new([1, seg], a)?, &Tensor::new([1, seg], b)?, record.snr_db, sample_rate)
                .map_err(|e| unresolvable(format!("segment {k}: {e}")))?;
            ex.valid_len = hi - lo;
            ex.seed = derive_seed(record_seed, k as u64);
            Ok(ex)
        })
        .collect()
}

/// Builds fixed-length examples from every record, in manifest order.
/// The last segment of a record is zero-padded and carries its valid length.
pub fn make_dataset(manifest: &Manifest, segment_seconds: f64, sample_rate: u32, seed: u64) -> Result<Vec<MixtureExample>> {
    make_dataset_with(manifest, segment_seconds, sample_rate, seed, Mode::default())
}

pub fn make_dataset_with(
    manifest: &Manifest,
    segment_seconds: f64,
    sample_rate: u32,
    seed: u64,
    mode: Mode,
) -> Result<Vec<MixtureExample>> {
    let seg = (segment_seconds * sample_rate as f64).round();
    if !(segment_seconds > 0.0) || seg < 1.0 {
        return Err(Error::InvalidArgument(format!(
            "segment of {segment_seconds} s at {sample_rate} Hz is empty"
        )));
    }
    build(manifest, Some(seg as usize), segment_seconds, sample_rate, seed, mode)
}

/// One unsegmented example per record, for evaluation. Synthetic specs
/// without a duration last `synth_seconds`.
pub fn make_utterances(manifest: &Manifest, synth_seconds: f64, sample_rate: u32, seed: u64, mode: Mode) -> Result<Vec<MixtureExample>> {
    build(manifest, None, synth_seconds, sample_rate, seed, mode)
}

fn build(
    manifest: &Manifest,
    segment: Option<usize>,
    synth_seconds: f64,
    sample_rate: u32,
    seed: u64,
    mode: Mode,
) -> Result<Vec<MixtureExample>> {
    let per_record = par::map_range(mode, manifest.records.len(), |i| {
        record_examples(&manifest.records[i], i, segment, synth_seconds, sample_rate, seed)
    });
    let mut out = Vec::new();
    for r in per_record {
        out.extend(r?);
    }
    Ok(out)
}
