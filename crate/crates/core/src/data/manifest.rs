//! Line-oriented dataset manifests.
//!
//! `split<TAB>spec1<TAB>spec2<TAB>snr_db[<TAB>offset=<s>][<TAB>rir=<path>]`
//! where a spec is `wav:<path>` or `synth:<kind>:<seed>[:<seconds>]`.
//! Blank lines and lines starting with `#` are ignored.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::synth::SourceKind;
use crate::error::{Error, Result};

pub const SNR_RANGE_DB: (f64, f64) = (-5.0, 5.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SourceSpec {
    Wav(PathBuf),
    Synth {
        kind: SourceKind,
        seed: u64,
        /// Defaults to the dataset's segment length.
        seconds: Option<f64>,
    },
}

impl FromStr for SourceSpec {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if let Some(path) = s.strip_prefix("wav:") {
            if path.is_empty() {
                return Err("empty wav path".into());
            }
            return Ok(SourceSpec::Wav(PathBuf::from(path)));
        }
        let Some(rest) = s.strip_prefix("synth:") else {
            return Err(format!("source `{s}` must start with `wav:` or `synth:`"));
        };
        let parts: Vec<&str> = rest.split(':').collect();
        if !(2..=3).contains(&parts.len()) {
            return Err(format!("expected synth:<kind>:<seed>[:<seconds>], got `{s}`"));
        }
        let kind = parts[0].parse::<SourceKind>().map_err(|e| e.to_string())?;
        let seed = parts[1].parse::<u64>().map_err(|_| format!("bad seed `{}`", parts[1]))?;
        let seconds = match parts.get(2) {
            Some(v) => {
                let d = v.parse::<f64>().map_err(|_| format!("bad duration `{v}`"))?;
                if !(d > 0.0 && d.is_finite()) {
                    return Err(format!("duration must be positive, got `{v}`"));
                }
                Some(d)
            }
            None => None,
        };
        Ok(SourceSpec::Synth { kind, seed, seconds })
    }
}

impl fmt::Display for SourceSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SourceSpec::Wav(p) => write!(f, "wav:{}", p.display()),
            SourceSpec::Synth { kind, seed, seconds: None } => write!(f, "synth:{kind}:{seed}"),
            SourceSpec::Synth {
                kind,
                seed,
                seconds: Some(d),
            } => write!(f, "synth:{kind}:{seed}:{d}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    pub split: Split,
    pub sources: [SourceSpec; 2],
    pub snr_db: f64,
    /// Seconds skipped at the start of both sources.
    pub offset_s: f64,
    pub rir: Option<String>,
}

impl fmt::Display for ManifestRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{}\t{}\t{}",
            self.split.name(),
            self.sources[0],
            self.sources[1],
            self.snr_db
        )?;
        if self.offset_s != 0.0 {
            write!(f, "\toffset={}", self.offset_s)?;
        }
        if let Some(r) = &self.rir {
            write!(f, "\trir={r}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
}

fn parse_record(line: &str) -> std::result::Result<ManifestRecord, String> {
    let cols: Vec<&str> = line.split('\t').collect();
    if cols.len() < 4 {
        return Err(format!("expected at least 4 tab-separated fields, found {}", cols.len()));
    }
    let split = cols[0].parse()?;
    let s1 = cols[1].parse()?;
    let s2 = cols[2].parse()?;
    let snr_db: f64 = cols[3].parse().map_err(|_| format!("bad snr `{}`", cols[3]))?;
    if !(SNR_RANGE_DB.0..=SNR_RANGE_DB.1).contains(&snr_db) {
        return Err(format!(
            "snr {snr_db} dB outside [{}, {}]",
            SNR_RANGE_DB.0, SNR_RANGE_DB.1
        ));
    }
    let mut rec = ManifestRecord {
        split,
        sources: [s1, s2],
        snr_db,
        offset_s: 0.0,
        rir: None,
    };
    for extra in &cols[4..] {
        match extra.split_once('=') {
            Some(("offset", v)) => {
                rec.offset_s = v.parse().map_err(|_| format!("bad offset `{v}`"))?;
                if !(rec.offset_s >= 0.0 && rec.offset_s.is_finite()) {
                    return Err(format!("offset must be non-negative, got `{v}`"));
                }
            }
            Some(("rir", v)) => rec.rir = Some(v.to_string()),
            _ => return Err(format!("unknown field `{extra}`")),
        }
    }
    Ok(rec)
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            records.push(parse_record(line).map_err(|msg| Error::Manifest { line: i + 1, msg })?);
        }
        Ok(Manifest { records })
    }

    /// Reads a manifest file; relative wav paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m = Manifest::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for rec in &mut m.records {
            for spec in &mut rec.sources {
                if let SourceSpec::Wav(p) = spec {
                    if p.is_relative() {
                        *p = base.join(&*p);
                    }
                }
            }
        }
        Ok(m)
    }

    pub fn to_text(&self) -> String {
        self.records.iter().map(|r| format!("{r}\n")).collect()
    }

    pub fn split(&self, split: Split) -> Manifest {
        Manifest {
            records: self.records.iter().filter(|r| r.split == split).cloned().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// `count` synthetic two-source records with distinct source kinds and
    /// SNRs drawn uniformly from the allowed range.
    pub fn synthetic(split: Split, count: usize, seconds: Option<f64>, seed: u64) -> Self {
        const PAIRS: [(SourceKind, SourceKind); 3] = [
            (SourceKind::Harmonic, SourceKind::Chirp),
            (SourceKind::Harmonic, SourceKind::ModulatedNoise),
            (SourceKind::Chirp, SourceKind::ModulatedNoise),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let records = (0..count)
            .map(|i| {
                let (a, b) = PAIRS[i % PAIRS.len()];
                let snr = rng.random_range(SNR_RANGE_DB.0..=SNR_RANGE_DB.1);
                ManifestRecord {
                    split,
                    sources: [
                        SourceSpec::Synth {
                            kind: a,
                            seed: rng.random(),
                            seconds,
                        },
                        SourceSpec::Synth {
                            kind: b,
                            seed: rng.random(),
                            seconds,
                        },
                    ],
                    // Rounded so the text form reparses to the same value.
                    snr_db: (snr * 1e4).round() / 1e4,
                    offset_s: 0.0,
                    rir: None,
                }
            })
            .collect();
        Manifest { records }
    }
}
