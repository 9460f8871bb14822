use std::f32::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use orca_pll::audio_io::{write_wav, AudioSegment, SampleEncoding};
use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_orca-pll"));
    c.env_remove("ORCA_PLL_CACHE");
    c
}

fn run(args: &[&str], cwd: &Path) -> Output {
    bin().args(args).current_dir(cwd).output().expect("spawn orca-pll")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Low noise with 1 kHz tone bursts at the given (start, end) seconds.
fn burst_wav(path: &Path, rate: u32, total_s: f32, bursts: &[(f32, f32)]) {
    let n = (total_s * rate as f32) as usize;
    let mut state = 12345u32;
    let samples: Vec<f32> = (0..n)
        .map(|i| {
            state = state.wrapping_mul(1_664_525).wrapping_add(1_013_904_223);
            let noise = ((state >> 8) as f32 / (1u32 << 24) as f32 - 0.5) * 2e-3;
            let t = i as f32 / rate as f32;
            let on = bursts.iter().any(|&(a, b)| t >= a && t < b);
            noise + if on { 0.5 * (2.0 * PI * 1000.0 * t).sin() } else { 0.0 }
        })
        .collect();
    let seg = AudioSegment::new(samples, rate, "x").unwrap();
    write_wav(&seg, path, SampleEncoding::Pcm16).unwrap();
}

#[test]
fn baseline_reference_counts() {
    let dir = TempDir::new().unwrap();
    let o = run(&["baseline", "--reference"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    for line in [
        "uniform random      55.0%",
        "always T            76.4%",
        "always F            74.7%",
        "always S            36.1%",
        "always M            32.8%",
    ] {
        assert!(out.contains(line), "missing '{line}' in\n{out}");
    }
}

#[test]
fn baseline_from_counts_csv() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("c.csv"), "labels,count\nT,10\nF,10\nS,10\nM,10\n").unwrap();
    let o = run(&["baseline", "--counts", "c.csv"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("uniform random      25.0%"), "{out}");
    assert!(out.contains("always M            25.0%"), "{out}");
}

#[test]
fn baseline_from_singleton_manifest() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("m.csv"), "source_id,path,labels\na,a.wav,T\nb,b.wav,F\nc,c.wav,S\nd,d.wav,M\n").unwrap();
    let o = run(&["baseline", "--manifest", "m.csv"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("uniform random      25.0%"), "{}", stdout(&o));
}

#[test]
fn baseline_empty_manifest_is_a_validation_error() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("m.csv"), "source_id,path,labels\n").unwrap();
    let o = run(&["baseline", "--manifest", "m.csv"], dir.path());
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn bad_arguments_exit_1() {
    let dir = TempDir::new().unwrap();
    assert_eq!(run(&["train", "--epochs", "many"], dir.path()).status.code(), Some(1));
    assert_eq!(run(&["frobnicate"], dir.path()).status.code(), Some(1));
    assert_eq!(
        run(&["train", "--synthetic", "--test-fraction", "1.5"], dir.path()).status.code(),
        Some(1)
    );
}

#[test]
fn segment_silence_gives_no_spans() {
    let dir = TempDir::new().unwrap();
    burst_wav(&dir.path().join("quiet.wav"), 21_900, 3.0, &[]);
    let o = run(&["segment", "quiet.wav", "--out-dir", "out"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("out/spans.csv")).unwrap();
    assert_eq!(csv.trim(), "source_id,start_s,end_s");
}

#[test]
fn segment_merges_bursts_across_short_gap() {
    let dir = TempDir::new().unwrap();
    burst_wav(&dir.path().join("rec.wav"), 44_100, 6.0, &[(1.0, 2.0), (3.5, 4.5)]);
    let o = run(&["segment", "rec.wav", "--out-dir", "out"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("out/spans.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 1, "{csv}");
    let f: Vec<f64> = rows[0].split(',').skip(1).map(|v| v.parse().unwrap()).collect();
    assert!((f[0] - 1.0).abs() < 0.1 && (f[1] - 4.5).abs() < 0.1, "{csv}");
    assert!(dir.path().join("out/rec_000.wav").exists());
}

#[test]
fn segment_missing_file_fails() {
    let dir = TempDir::new().unwrap();
    let o = run(&["segment", "nope.wav", "--out-dir", "out"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nope.wav"));
}

fn write_manifest(dir: &Path) -> PathBuf {
    burst_wav(&dir.join("a.wav"), 44_100, 4.0, &[(0.5, 1.5)]);
    burst_wav(&dir.join("b.wav"), 22_050, 8.0, &[(1.0, 1.8), (5.0, 7.0)]);
    let m = dir.join("manifest.csv");
    fs::write(&m, "source_id,path,labels\nA,a.wav,TF\nB,b.wav,SM\n").unwrap();
    m
}

#[test]
fn preprocess_builds_equal_width_cache_and_reuses_it() {
    let dir = TempDir::new().unwrap();
    write_manifest(dir.path());
    let args = ["preprocess", "--manifest", "manifest.csv", "--cache", "cache", "--n-mels", "32"];
    let o = run(&args, dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("wrote 3 instances"), "{}", stdout(&o));

    let index = fs::read_to_string(dir.path().join("cache/instances.csv")).unwrap();
    assert_eq!(index.lines().count(), 4, "{index}");
    assert!(index.contains("A_000,TF") && index.contains("B_001,SM"), "{index}");
    let sizes: Vec<u64> = ["A_000", "B_000", "B_001"]
        .iter()
        .map(|id| fs::metadata(dir.path().join(format!("cache/spec/{id}.spec1"))).unwrap().len())
        .collect();
    assert!(sizes.iter().all(|s| *s == sizes[0]), "{sizes:?}");

    let again = run(&args, dir.path());
    assert!(again.status.success());
    assert!(stdout(&again).contains("cache hit"), "{}", stdout(&again));

    let o = run(&["baseline", "--cache", "cache"], dir.path());
    assert!(o.status.success());
    assert!(stdout(&o).contains("total          3"), "{}", stdout(&o));
}

#[test]
fn preprocess_names_the_corrupt_recording() {
    let dir = TempDir::new().unwrap();
    write_manifest(dir.path());
    fs::write(dir.path().join("b.wav"), b"RIFF\x04\x00\x00\x00WAVE").unwrap();
    let o = run(&["preprocess", "--manifest", "manifest.csv", "--cache", "cache"], dir.path());
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("B:"), "{}", stderr(&o));
    assert!(!dir.path().join("cache/cache.json").exists());
}

const TINY: [&str; 10] = [
    "--synthetic",
    "--n-per-class",
    "4",
    "--duration",
    "0.25",
    "--n-mels",
    "24",
    "--reps",
    "2",
    "--jobs=1",
];

#[test]
fn train_tiny_synthetic_run() {
    let dir = TempDir::new().unwrap();
    let mut args = vec!["train", "--epochs", "2", "-o", "run"];
    args.extend(TINY);
    let o = run(&args, dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let acc: f64 = out
        .split("accuracy mean ")
        .nth(1)
        .and_then(|s| s.split('%').next())
        .and_then(|s| s.parse().ok())
        .unwrap_or_else(|| panic!("no accuracy in {out}"));
    assert!((0.0..=100.0).contains(&acc));
    assert!(out.contains("hidden-label accuracy"));
    for f in ["metrics.csv", "aggregate.json", "predictions.csv", "model.ckpt", "train_loss.svg", "test_loss.svg", "test_accuracy.svg"] {
        assert!(dir.path().join("run").join(f).exists(), "{f}");
    }
    let metrics = fs::read_to_string(dir.path().join("run/metrics.csv")).unwrap();
    // Header plus epochs 0..=2 for each of 2 repetitions.
    assert_eq!(metrics.lines().count(), 1 + 2 * 3);

    let o = run(&["synth", "--cache", "c", "--n-per-class", "2", "--duration", "0.25", "--n-mels", "24"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let o = run(&["report", "--checkpoint", "run/model.ckpt", "--cache", "c", "--id", "syn00001", "--csv", "r.csv"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("syn00001 labels"), "{}", stdout(&o));
    let csv = fs::read_to_string(dir.path().join("r.csv")).unwrap();
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    let total: f64 = row[2..6].iter().map(|v| v.parse::<f64>().unwrap()).sum();
    assert!((total - 100.0).abs() < 0.05, "{csv}");

    let o = run(&["report", "--checkpoint", "run/model.ckpt", "--cache", "c", "--id", "nobody"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn train_is_deterministic() {
    let dir = TempDir::new().unwrap();
    for out in ["r1", "r2"] {
        let mut args = vec!["train", "--epochs", "1", "--seed", "7", "-o", out];
        args.extend(TINY);
        assert!(run(&args, dir.path()).status.success());
    }
    let a = fs::read(dir.path().join("r1/metrics.csv")).unwrap();
    let b = fs::read(dir.path().join("r2/metrics.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn train_defaults_to_twenty_repetitions() {
    let dir = TempDir::new().unwrap();
    let mut args = vec!["train", "--epochs", "0", "-o", "run"];
    args.extend(&TINY[..7]);
    let o = run(&args, dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("20 reps x 0 epochs"), "{}", stdout(&o));
    let metrics = fs::read_to_string(dir.path().join("run/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 21);
}

#[test]
fn help_shows_defaults() {
    let dir = TempDir::new().unwrap();
    let o = run(&["train", "--help"], dir.path());
    assert!(o.status.success());
    let h = stdout(&o);
    for d in ["[default: 0.0002]", "[default: 10]", "[default: 20]", "[default: 0.2]", "ORCA_PLL_CACHE"] {
        assert!(h.contains(d), "missing {d}");
    }
}
