//! Flat `key=value` run configuration. `#` starts a comment; unknown or
//! repeated keys are errors.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use dpsep::tasnet::ModelConfig;
use dpsep::training::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Records tagged `train` are trained on, `valid` ones drive early stopping.
    pub manifest: Option<PathBuf>,
    pub run_dir: PathBuf,
    pub deterministic: bool,
    /// Worker threads; 0 uses every core, 1 runs sequentially.
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            manifest: None,
            run_dir: PathBuf::from("runs/default"),
            deterministic: false,
            threads: 0,
        }
    }
}

pub const KEYS: &[&str] = &[
    "num_filters",
    "window",
    "num_sources",
    "num_blocks",
    "hidden",
    "chunk_len",
    "sample_rate",
    "epochs",
    "segment_seconds",
    "lr_init",
    "lr_decay",
    "decay_every",
    "clip_norm",
    "patience",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "batch_size",
    "seed",
    "manifest",
    "run_dir",
    "deterministic",
    "threads",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| anyhow!("`{key}` expects a {}, got `{value}`", std::any::type_name::<T>()))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => bail!("`{key}` expects true or false, got `{value}`"),
    }
}

impl RunConfig {
    /// Parses config text; relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut c = RunConfig::default();
        let mut seen = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| anyhow!("line {}: expected key=value, got `{line}`", i + 1))?;
            if seen.contains(&key) {
                bail!("line {}: `{key}` is set twice", i + 1);
            }
            seen.push(key);
            c.set(key, value, base).with_context(|| format!("line {}", i + 1))?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        RunConfig::parse(&text, base).with_context(|| format!("invalid config {}", path.display()))
    }

    fn set(&mut self, key: &str, v: &str, base: &Path) -> Result<()> {
        let (m, t) = (&mut self.model, &mut self.train);
        match key {
            "num_filters" => m.num_filters = parse(key, v)?,
            "window" => m.window = parse(key, v)?,
            "num_sources" => m.num_sources = parse(key, v)?,
            "num_blocks" => m.num_blocks = parse(key, v)?,
            "hidden" => m.hidden = parse(key, v)?,
            "chunk_len" => m.chunk_len = if v == "auto" { None } else { Some(parse(key, v)?) },
            "sample_rate" => m.sample_rate = parse(key, v)?,
            "epochs" => t.epochs = parse(key, v)?,
            "segment_seconds" => t.segment_seconds = parse(key, v)?,
            "lr_init" => t.lr_init = parse(key, v)?,
            "lr_decay" => t.lr_decay = parse(key, v)?,
            "decay_every" => t.decay_every = parse(key, v)?,
            "clip_norm" => t.clip_norm = parse(key, v)?,
            "patience" => t.patience = parse(key, v)?,
            "adam_beta1" => t.adam.beta1 = parse(key, v)?,
            "adam_beta2" => t.adam.beta2 = parse(key, v)?,
            "adam_eps" => t.adam.eps = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "seed" => t.seed = parse(key, v)?,
            "manifest" => self.manifest = Some(base.join(v)),
            "run_dir" => self.run_dir = base.join(v),
            "deterministic" => self.deterministic = parse_bool(key, v)?,
            "threads" => self.threads = parse(key, v)?,
            _ => bail!("unknown key `{key}` (known keys: {})", KEYS.join(", ")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.model.sample_rate == 0 {
            bail!("sample_rate must be positive");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_gives_the_published_recipe() {
        let c = RunConfig::parse("", Path::new("")).unwrap();
        assert_eq!(
            (c.model.num_filters, c.model.num_blocks, c.model.hidden, c.model.window),
            (64, 6, 128, 2)
        );
        assert_eq!((c.train.lr_init, c.train.lr_decay, c.train.decay_every), (1e-3, 0.98, 2));
        assert_eq!((c.train.clip_norm, c.train.patience, c.train.segment_seconds), (5.0, 10, 4.0));
    }

    #[test]
    fn keys_comments_and_paths() {
        let text = "# toy\nnum_filters = 16\nchunk_len=32 # fixed\nmanifest=data/m.tsv\ndeterministic=true\n";
        let c = RunConfig::parse(text, Path::new("/cfg")).unwrap();
        assert_eq!(c.model.num_filters, 16);
        assert_eq!(c.model.chunk_len, Some(32));
        assert_eq!(c.manifest, Some(PathBuf::from("/cfg/data/m.tsv")));
        assert!(c.deterministic);
    }

    #[test]
    fn every_known_key_is_accepted() {
        for key in KEYS {
            let value = match *key {
                "chunk_len" => "auto",
                "deterministic" => "false",
                "manifest" | "run_dir" => "x",
                "adam_beta1" | "adam_beta2" => "0.5",
                _ => "3",
            };
            RunConfig::parse(&format!("{key}={value}"), Path::new("")).unwrap();
        }
    }

    #[test]
    fn bad_input_is_rejected() {
        for text in ["colour=blue", "epochs=ten", "epochs=3\nepochs=4", "no equals sign", "patience=0", "chunk_len=7"] {
            assert!(RunConfig::parse(text, Path::new("")).is_err(), "{text}");
        }
    }
}
