mod config;

use std::path::{Path, PathBuf};
use std::io::Write;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use dpsep::checkpoint::load_model;
use dpsep::data::{make_dataset_with, make_utterances, read_wav, write_wav, Manifest, Split};
use dpsep::eval::evaluate;
use dpsep::par::{self, Mode};
use dpsep::selfcheck::{cases, run_cases, GradCase};
use dpsep::tasnet::SeparatorModel;
use dpsep::training::{train_loop, LoopOptions};

use config::RunConfig;

const RUN_DIR_ENV: &str = "DPSEP_RUN_DIR";

#[derive(Parser)]
#[command(name = "dpsep", version, about = "Two-source waveform separation with a dual-path recurrent mask estimator")]
struct Cli {
    /// Hide wall-clock times from logs so reruns are byte-identical.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores, 1 = sequential).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model as described by a config file.
    Train { config: PathBuf },
    /// Write one WAV per separated source.
    Separate { checkpoint: PathBuf, wav: PathBuf, out_dir: PathBuf },
    /// Report SI-SNRi and SNRi over every record of a manifest.
    Evaluate {
        checkpoint: PathBuf,
        manifest: PathBuf,
        /// Length of synthetic sources that do not state one.
        #[arg(long, default_value_t = 4.0)]
        seconds: f64,
    },
    /// Finite-difference check of every differentiable op.
    Gradcheck,
}

/// Failure with its exit code: 2 for usage and configuration problems,
/// 3 for a numeric abort, 1 otherwise.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

impl Failure {
    fn usage(err: anyhow::Error) -> Self {
        Failure { code: 2, err }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(err: anyhow::Error) -> Self {
        let code = match err.downcast_ref::<dpsep::Error>() {
            Some(dpsep::Error::NumericAbort { .. }) => 3,
            _ => 1,
        };
        Failure { code, err }
    }
}

impl From<dpsep::Error> for Failure {
    fn from(err: dpsep::Error) -> Self {
        anyhow::Error::from(err).into()
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = cli.threads.unwrap_or(0);
    let result = par::with_threads(threads, move || run(cli));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> CmdResult {
    let mode = cli.threads.map_or(Mode::default(), Mode::from_threads);
    match cli.command {
        Command::Train { config } => {
            let o = Overrides {
                deterministic: cli.deterministic,
                seed: cli.seed,
                threads: cli.threads,
            };
            cmd_train(&config, &o)
        }
        Command::Separate { checkpoint, wav, out_dir } => cmd_separate(&checkpoint, &wav, &out_dir),
        Command::Evaluate {
            checkpoint,
            manifest,
            seconds,
        } => cmd_evaluate(&checkpoint, &manifest, seconds, cli.seed.unwrap_or(0), mode),
        Command::Gradcheck => cmd_gradcheck(mode),
    }
}

struct Overrides {
    deterministic: bool,
    seed: Option<u64>,
    threads: Option<usize>,
}

fn cmd_train(path: &Path, o: &Overrides) -> CmdResult {
    let mut cfg = RunConfig::load(path).map_err(Failure::usage)?;
    cfg.deterministic |= o.deterministic;
    if let Some(s) = o.seed {
        cfg.train.seed = s;
    }
    if let Some(t) = o.threads {
        cfg.threads = t;
    }
    if let Some(dir) = std::env::var_os(RUN_DIR_ENV) {
        cfg.run_dir = PathBuf::from(dir);
    }
    let manifest_path = cfg
        .manifest
        .clone()
        .ok_or_else(|| Failure::usage(anyhow!("{}: `manifest` is not set", path.display())))?;
    let manifest = Manifest::load(&manifest_path)
        .with_context(|| format!("loading manifest {}", manifest_path.display()))
        .map_err(Failure::usage)?;
    let mode = Mode::from_threads(cfg.threads);
    par::with_threads(cfg.threads, || -> CmdResult {
        let seed = cfg.train.seed;
        let sr = cfg.model.sample_rate;
        let seg = cfg.train.segment_seconds;
        let train = make_dataset_with(&manifest.split(Split::Train), seg, sr, seed, mode)?;
        let valid = make_dataset_with(&manifest.split(Split::Valid), seg, sr, seed, mode)?;
        if train.is_empty() || valid.is_empty() {
            return Err(Failure::usage(anyhow!(
                "{} needs both train and valid records ({} train, {} valid segments)",
                manifest_path.display(),
                train.len(),
                valid.len()
            )));
        }
        let model = SeparatorModel::<f32>::new(cfg.model, seed)?;
        println!(
            "training {} parameters on {} segments, validating on {}; run dir {}",
            model.parameter_count(),
            train.len(),
            valid.len(),
            cfg.run_dir.display()
        );
        let deterministic = cfg.deterministic;
        let opts = LoopOptions {
            run_dir: Some(cfg.run_dir.clone()),
            mode,
            deterministic,
            on_epoch: Some(Box::new(move |m| println!("{}", m.log_line(deterministic)))),
        };
        let report = train_loop(model, &train, &valid, &cfg.train, opts)?;
        println!(
            "best epoch {} with validation SI-SNRi {:.3} dB after {} steps{}",
            report.best_epoch,
            report.best_val_si_snri,
            report.steps,
            if report.stopped_early { " (early stop)" } else { "" }
        );
        Ok(())
    })
}

fn cmd_separate(ckpt: &Path, wav: &Path, out_dir: &Path) -> CmdResult {
    let (model, _) = load_model::<f32>(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let (mixture, sr) = read_wav(wav).with_context(|| format!("reading {}", wav.display()))?;
    if sr != model.config.sample_rate {
        return Err(Failure::usage(anyhow!(
            "{} is sampled at {sr} Hz but the model expects {} Hz",
            wav.display(),
            model.config.sample_rate
        )));
    }
    let est = model.separate(&mixture)?;
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    for c in 0..est.shape()[0] {
        let p = out_dir.join(format!("source{}.wav", c + 1));
        write_wav(&p, est.row(c), sr)?;
        println!("{}", p.display());
    }
    Ok(())
}

fn cmd_evaluate(ckpt: &Path, manifest: &Path, seconds: f64, seed: u64, mode: Mode) -> CmdResult {
    let (model, _) = load_model::<f32>(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let m = Manifest::load(manifest).with_context(|| format!("loading {}", manifest.display()))?;
    let examples = make_utterances(&m, seconds, model.config.sample_rate, seed, mode)?;
    if examples.is_empty() {
        return Err(Failure::usage(anyhow!("{} has no records", manifest.display())));
    }
    let report = evaluate(&model, &examples, mode)?;
    println!("example\tsi_snri_db\tsnri_db");
    for (i, s) in report.examples.iter().enumerate() {
        println!("{}\t{:.4}\t{:.4}", i + 1, s.mean_si_snri, s.mean_snri);
    }
    println!("mean\t{:.4}\t{:.4}", report.mean_si_snri, report.mean_snri);
    Ok(())
}

/// Runs `cases` and prints one line each plus a summary; returns the
/// number of failures.
fn report_gradcheck(cases: &[GradCase], mode: Mode, out: &mut impl Write) -> std::io::Result<usize> {
    let started = Instant::now();
    let outcomes = run_cases(cases, mode);
    let failed = outcomes.iter().filter(|o| !o.passed()).count();
    for o in &outcomes {
        writeln!(out, "{}", o.line())?;
    }
    writeln!(
        out,
        "{} of {} checks passed in {:.1} s",
        outcomes.len() - failed,
        outcomes.len(),
        started.elapsed().as_secs_f64()
    )?;
    Ok(failed)
}

fn cmd_gradcheck(mode: Mode) -> CmdResult {
    let failed = report_gradcheck(&cases(), mode, &mut std::io::stdout().lock()).context("writing report")?;
    if failed > 0 {
        return Err(anyhow!("{failed} gradient checks failed").into());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use dpsep::numerics::{finite_diff_check, BackwardOp, Graph, Tensor};

    /// Claims d(x²)/dx = x instead of 2x.
    struct HalvedSquare;

    impl BackwardOp<f64> for HalvedSquare {
        fn name(&self) -> &'static str {
            "halved_square"
        }

        fn backward(
            &self,
            inputs: &[&Tensor<f64>],
            _output: &Tensor<f64>,
            grad: &Tensor<f64>,
            _needs: &[bool],
        ) -> dpsep::Result<Vec<Option<Tensor<f64>>>> {
            let g: Vec<f64> = inputs[0].data().iter().zip(grad.data()).map(|(x, g)| x * g).collect();
            Ok(vec![Some(Tensor::new(inputs[0].shape().to_vec(), g)?)])
        }
    }

    fn corrupted() -> GradCase {
        GradCase::new("halved_square", || {
            let x = Tensor::from_vec(vec![0.5, -1.5, 2.0]);
            finite_diff_check(
                |g: &mut Graph<f64>, v| {
                    let value = g.value(v).map(|a| a * a);
                    let y = g.record(&[v], value, Box::new(HalvedSquare))?;
                    g.sum(y)
                },
                &x,
                dpsep::selfcheck::TOL,
            )
        })
    }

    #[test]
    fn corrupted_rule_is_reported() {
        let mut out = Vec::new();
        let failed = report_gradcheck(&[corrupted()], Mode::Sequential, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(failed, 1);
        assert!(text.lines().next().unwrap().contains("FAIL"), "{text}");
        assert!(text.contains("0 of 1 checks passed"));
    }
}
