//! Runs the `dpsep` binary end to end.

use std::path::Path;
use std::process::{Command, Output};

use dpsep::checkpoint::load_model;
use dpsep::data::{make_utterances, read_wav, write_wav, Manifest};
use dpsep::par::Mode;

fn dpsep(args: &[&str], run_dir: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_dpsep"));
    cmd.args(args).env_remove("DPSEP_RUN_DIR");
    if let Some(d) = run_dir {
        cmd.env("DPSEP_RUN_DIR", d);
    }
    cmd.output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const MANIFEST: &str = "\
train\tsynth:harmonic:1\tsynth:chirp:2\t0.5
train\tsynth:harmonic:3\tsynth:modulated-noise:4\t-2
valid\tsynth:chirp:5\tsynth:modulated-noise:6\t3
";

/// Writes a tiny-model config plus manifest into `dir` and returns the config path.
fn toy_setup(dir: &Path, extra: &str) -> std::path::PathBuf {
    std::fs::write(dir.join("toy.tsv"), MANIFEST).unwrap();
    let cfg = format!(
        "# tiny model\nnum_filters=8\nwindow=16\nnum_blocks=1\nhidden=8\n\
         epochs=2\nsegment_seconds=0.1\nmanifest=toy.tsv\nrun_dir=run\n{extra}"
    );
    let p = dir.join("toy.cfg");
    std::fs::write(&p, cfg).unwrap();
    p
}

/// Trains the toy config once and returns the checkpoint path.
fn trained(dir: &Path) -> std::path::PathBuf {
    let cfg = toy_setup(dir, "");
    let o = dpsep(&["train", cfg.to_str().unwrap()], None);
    assert!(o.status.success(), "{}", stderr(&o));
    dir.join("run/best.ckpt")
}

#[test]
fn missing_config_exits_2_naming_the_path() {
    let o = dpsep(&["train", "/no/such/dir/run.cfg"], None);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/no/such/dir/run.cfg"), "{}", stderr(&o));
}

#[test]
fn unknown_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_setup(dir.path(), "dropout=0.1\n");
    let o = dpsep(&["train", cfg.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("dropout"));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(dpsep(&["separate", "only-one-arg"], None).status.code(), Some(2));
    assert_eq!(dpsep(&["frobnicate"], None).status.code(), Some(2));
}

#[test]
fn toy_training_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_setup(dir.path(), "");
    let cfg = cfg.to_str().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let o = dpsep(&["--deterministic", "--seed", "7", "train", cfg], Some(d));
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(d.join("best.ckpt").exists());
        assert!(d.join("last.ckpt").exists());
    }
    let log = std::fs::read(a.join("metrics.tsv")).unwrap();
    assert_eq!(log, std::fs::read(b.join("metrics.tsv")).unwrap());
    assert_eq!(String::from_utf8(log).unwrap().lines().count(), 2);
    assert!(!dir.path().join("run").exists(), "run dir override ignored");
}

#[test]
fn numeric_blow_up_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_setup(dir.path(), "lr_init=1e30\nclip_norm=1e30\n");
    let o = dpsep(&["train", cfg.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("epoch"), "{}", stderr(&o));
}

#[test]
fn separate_writes_one_file_per_source() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained(dir.path());
    let wav = dir.path().join("mix.wav");
    let samples: Vec<f32> = (0..1234).map(|i| (i as f32 * 0.05).sin() * 0.3).collect();
    write_wav(&wav, &samples, 8000).unwrap();
    let out = dir.path().join("out");
    let o = dpsep(&["separate", ckpt.to_str().unwrap(), wav.to_str().unwrap(), out.to_str().unwrap()], None);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut names: Vec<String> = std::fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names, ["source1.wav", "source2.wav"]);
    for n in names {
        assert_eq!(read_wav(out.join(n)).unwrap().0.len(), 1234);
    }

    let wrong = dir.path().join("16k.wav");
    write_wav(&wrong, &samples, 16000).unwrap();
    let o = dpsep(&["separate", ckpt.to_str().unwrap(), wrong.to_str().unwrap(), out.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("16000"));
}

/// SI-SNR written out directly from its definition.
fn oracle_si_snr(est: &[f32], r: &[f32]) -> f64 {
    let mean = |x: &[f32]| x.iter().map(|&v| v as f64).sum::<f64>() / x.len() as f64;
    let (me, mr) = (mean(est), mean(r));
    let e: Vec<f64> = est.iter().map(|&v| v as f64 - me).collect();
    let r: Vec<f64> = r.iter().map(|&v| v as f64 - mr).collect();
    let rr: f64 = r.iter().map(|v| v * v).sum();
    let a = e.iter().zip(&r).map(|(x, y)| x * y).sum::<f64>() / rr;
    let target: f64 = r.iter().map(|v| a * a * v * v).sum();
    let noise: f64 = e.iter().zip(&r).map(|(x, y)| (x - a * y).powi(2)).sum();
    10.0 * (target / (noise + 1e-8 * target)).log10()
}

#[test]
fn evaluate_matches_a_hand_computed_table() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained(dir.path());
    let manifest = dir.path().join("test.tsv");
    std::fs::write(
        &manifest,
        "test\tsynth:harmonic:11:0.2\tsynth:chirp:12:0.2\t1\ntest\tsynth:chirp:13:0.15\tsynth:modulated-noise:14:0.15\t-4\n",
    )
    .unwrap();
    let o = dpsep(&["evaluate", ckpt.to_str().unwrap(), manifest.to_str().unwrap()], None);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let rows: Vec<Vec<f64>> = text
        .lines()
        .skip(1)
        .map(|l| l.split('\t').skip(1).map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 3, "{text}");

    let (model, _) = load_model::<f32>(&ckpt).unwrap();
    let examples = make_utterances(&Manifest::load(&manifest).unwrap(), 4.0, 8000, 0, Mode::Sequential).unwrap();
    let mut means = Vec::new();
    for (ex, row) in examples.iter().zip(&rows) {
        let est = model.separate(&ex.mixture).unwrap();
        let score = |perm: [usize; 2]| -> f64 {
            (0..2).map(|i| oracle_si_snr(est.row(i), ex.sources.row(perm[i]))).sum::<f64>() / 2.0
        };
        let perm = if score([1, 0]) > score([0, 1]) { [1, 0] } else { [0, 1] };
        let improvement = (0..2)
            .map(|i| {
                let r = ex.sources.row(perm[i]);
                oracle_si_snr(est.row(i), r) - oracle_si_snr(ex.mixture.data(), r)
            })
            .sum::<f64>()
            / 2.0;
        assert!((improvement - row[0]).abs() < 1e-3, "{improvement} vs {}", row[0]);
        means.push(improvement);
    }
    assert!((rows[2][0] - (means[0] + means[1]) / 2.0).abs() < 1e-3);
}

#[test]
fn gradcheck_passes_quickly() {
    let started = std::time::Instant::now();
    let o = dpsep(&["gradcheck"], None);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    let text = stdout(&o);
    assert!(text.lines().filter(|l| l.contains("PASS")).count() >= 10, "{text}");
    assert!(!text.contains("FAIL"));
    assert!(started.elapsed().as_secs() < 60);
}
