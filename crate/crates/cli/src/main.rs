//! `orca-pll`: segment recordings, build spectrogram caches, synthesize
//! corpora, train and cross-validate, and print baselines and reports.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use orca_pll::audio_io::{pad_to_length, read_wav, resample, write_wav, SampleEncoding, CANONICAL_RATE};
use orca_pll::dataset::{load_manifest, reference_counts, Behavior, CandidateLabelSet, LabeledInstance, ManifestEntry};
use orca_pll::eval::{
    baseline_accuracies, cross_validate, label_set_counts, parse_label_counts, predict_report, predicted_index,
    write_aggregate_json, write_metrics_csv, write_predictions_csv, PredictionReport, TrainConfig,
};
use orca_pll::nn::{load_checkpoint, save_checkpoint, LrSchedule, ModelConfig};
use orca_pll::pipeline::{
    cached_fingerprint, fingerprint, instances_from_manifest, read_cache, write_cache, PreprocessConfig,
};
use orca_pll::plot::run_charts;
use orca_pll::pll::WeightGradient;
use orca_pll::segmenter::{extract_segments, segment_recording, write_span_csv, SegmentationConfig};
use orca_pll::spectrogram::{MelImager, SpectrogramConfig};
use orca_pll::synthetic::{generate_synthetic_dataset, synthesize_corpus_audio, SuperfluousProfile, SyntheticSpec};
use orca_pll::Error;

const CACHE_ENV: &str = "ORCA_PLL_CACHE";
const DEFAULT_CACHE: &str = "orca-pll-cache";

#[derive(Parser, Debug)]
#[command(name = "orca-pll", version, about = "Behavior classification from underwater audio with partial labels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Detect vocalization spans in recordings; writes spans.csv and one WAV per segment.
    Segment(SegmentArgs),
    /// Segment, resample, pad and image every recording in a manifest into an instance cache.
    Preprocess(PreprocessArgs),
    /// Generate a synthetic labeled corpus into an instance cache.
    Synth(SynthArgs),
    /// Cross-validate the network; writes metrics, plots, predictions and a checkpoint.
    Train(TrainArgs),
    /// Accuracy of input-blind guessing schemes for a label distribution.
    Baseline(BaselineArgs),
    /// Softmax percentages of a trained checkpoint for cached instances or a WAV file.
    Report(ReportArgs),
}

#[derive(Args, Debug, Clone)]
struct SegmentationOpts {
    /// Keep segments strictly longer than this many seconds (reference setting)
    #[arg(long, default_value_t = 0.5)]
    min_duration: f64,
    /// Merge spans separated by less than this many seconds (reference setting)
    #[arg(long, default_value_t = 2.0)]
    merge_gap: f64,
    /// Detector frame length in seconds (desk-scale choice)
    #[arg(long, default_value_t = 0.05)]
    frame: f64,
    /// Activity threshold above the 10th-percentile frame level, in dB (desk-scale choice)
    #[arg(long, default_value_t = 10.0)]
    threshold_db: f64,
}

impl SegmentationOpts {
    fn config(&self) -> SegmentationConfig {
        SegmentationConfig {
            min_duration_s: self.min_duration,
            merge_gap_s: self.merge_gap,
            frame_s: self.frame,
            threshold_db_above_noise: self.threshold_db,
        }
    }
}

#[derive(Args, Debug, Clone)]
struct SpectrogramOpts {
    /// FFT window length in samples (reference setting)
    #[arg(long, default_value_t = 512)]
    fft_size: usize,
    /// Hop between frames in samples (desk-scale choice: one block per frame)
    #[arg(long, default_value_t = 512)]
    hop: usize,
    /// Mel bands (desk-scale choice)
    #[arg(long)]
    n_mels: Option<usize>,
    /// Lowest filterbank frequency in Hz
    #[arg(long, default_value_t = 0.0)]
    fmin: f64,
    /// Highest filterbank frequency in Hz (Nyquist at 21,900 Hz)
    #[arg(long, default_value_t = CANONICAL_RATE as f64 / 2.0)]
    fmax: f64,
}

impl SpectrogramOpts {
    fn config(&self, default_mels: usize) -> SpectrogramConfig {
        SpectrogramConfig {
            fft_size: self.fft_size,
            hop: self.hop,
            n_mels: self.n_mels.unwrap_or(default_mels),
            fmin: self.fmin,
            fmax: self.fmax,
            sample_rate: CANONICAL_RATE,
        }
    }
}

#[derive(Args, Debug)]
struct SegmentArgs {
    /// Input WAV files; each file stem becomes its source id
    #[arg(required = true)]
    recordings: Vec<PathBuf>,
    /// Output directory
    #[arg(long, short)]
    out_dir: PathBuf,
    /// Only write spans.csv
    #[arg(long)]
    no_wavs: bool,
    #[command(flatten)]
    seg: SegmentationOpts,
}

#[derive(Args, Debug, Clone)]
struct CacheOpt {
    /// Instance cache directory
    #[arg(long, env = CACHE_ENV, default_value = DEFAULT_CACHE)]
    cache: PathBuf,
}

#[derive(Args, Debug)]
struct PreprocessArgs {
    /// Manifest CSV: source_id,path,labels[,spans]
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    cache: CacheOpt,
    /// Common segment length in samples [default: longest segment]
    #[arg(long)]
    target_len: Option<usize>,
    /// Also write a PGM preview per instance
    #[arg(long)]
    pgm: bool,
    /// Rebuild even if the cache matches the inputs
    #[arg(long)]
    force: bool,
    #[command(flatten)]
    seg: SegmentationOpts,
    #[command(flatten)]
    spec: SpectrogramOpts,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum Profile {
    /// Label-set frequencies of the reference corpus
    Reference,
    /// Singleton sets (no superfluous labels)
    None,
    /// All six two-behavior sets, equally often
    Pairs,
}

#[derive(Args, Debug, Clone)]
struct SynthOpts {
    /// Instances per behavior
    #[arg(long, default_value_t = 50)]
    n_per_class: usize,
    /// Clip length in seconds
    #[arg(long, default_value_t = 1.0)]
    duration: f64,
    /// Signal-to-noise ratio in dB
    #[arg(long, default_value_t = 20.0)]
    snr_db: f64,
    /// How candidate sets are attached
    #[arg(long, value_enum, default_value_t = Profile::Reference)]
    profile: Profile,
    /// Generator seed
    #[arg(long, default_value_t = 0)]
    synth_seed: u64,
}

impl SynthOpts {
    fn spec(&self, spectrogram: SpectrogramConfig) -> SyntheticSpec {
        let profile = match self.profile {
            Profile::Reference => SuperfluousProfile::Reference,
            Profile::None => SuperfluousProfile::None,
            Profile::Pairs => SuperfluousProfile::Weighted(
                ["TF", "TS", "TM", "FS", "FM", "SM"]
                    .iter()
                    .map(|s| (s.parse().expect("static label"), 1.0))
                    .collect(),
            ),
        };
        SyntheticSpec {
            n_per_class: self.n_per_class,
            duration_s: self.duration,
            sample_rate: CANONICAL_RATE,
            snr_db: self.snr_db,
            profile,
            seed: self.synth_seed,
            spectrogram,
        }
    }
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[command(flatten)]
    cache: CacheOpt,
    #[command(flatten)]
    synth: SynthOpts,
    #[command(flatten)]
    spec: SpectrogramOpts,
    /// Also write every clip as a 16-bit WAV here
    #[arg(long)]
    wav_dir: Option<PathBuf>,
    /// Also write a PGM preview per instance
    #[arg(long)]
    pgm: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    cache: CacheOpt,
    /// Generate a synthetic corpus instead of reading the cache
    #[arg(long)]
    synthetic: bool,
    #[command(flatten)]
    synth: SynthOpts,
    #[command(flatten)]
    spec: SpectrogramOpts,
    /// Output directory for metrics, plots, predictions and the checkpoint
    #[arg(long, short, default_value = "orca-pll-run")]
    out_dir: PathBuf,
    /// Training epochs (desk-scale choice; not stated by the reference protocol)
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    /// Mini-batch size (reference setting)
    #[arg(long, default_value_t = 10)]
    batch_size: usize,
    /// Initial learning rate (reference setting)
    #[arg(long, default_value_t = 2e-4)]
    lr: f64,
    /// Learning-rate divisor at each decay (reference setting)
    #[arg(long, default_value_t = 10.0)]
    decay_factor: f64,
    /// Epochs between learning-rate decays (reference setting)
    #[arg(long, default_value_t = 10)]
    decay_every: usize,
    /// Cross-validation repetitions (reference setting)
    #[arg(long, default_value_t = 20)]
    reps: usize,
    /// Test share of each stratum (reference setting: 80/20)
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
    /// Base seed; repetition r uses seed + r
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Differentiate through the candidate weights too (default: weights frozen per step)
    #[arg(long)]
    full_weight_grad: bool,
    /// Stem convolution width (desk-scale choice)
    #[arg(long, default_value_t = 16)]
    stem_width: usize,
    /// Residual stage widths (desk-scale choice)
    #[arg(long, value_delimiter = ',', default_value = "16,32,64")]
    stage_widths: Vec<usize>,
    /// Residual blocks per stage (desk-scale choice)
    #[arg(long, value_delimiter = ',', default_value = "2,2,2")]
    blocks: Vec<usize>,
    /// Feed the stem this many replicated channels (3 mimics an RGB network)
    #[arg(long, default_value_t = 1)]
    input_channels: usize,
    /// Model initialization seed, added to each repetition's seed
    #[arg(long, default_value_t = 0)]
    model_seed: u64,
    /// Worker threads for repetitions
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args, Debug)]
struct BaselineArgs {
    /// CSV with header labels,count
    #[arg(long, group = "source")]
    counts: Option<PathBuf>,
    /// Manifest CSV; each recording counts once
    #[arg(long, group = "source")]
    manifest: Option<PathBuf>,
    /// Count the instances of a cache directory
    #[arg(long, group = "source")]
    cache: Option<PathBuf>,
    /// Use the built-in reference corpus counts
    #[arg(long, group = "source")]
    reference: bool,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Checkpoint written by `train`
    #[arg(long)]
    checkpoint: PathBuf,
    /// Report on cached instances
    #[arg(long, env = CACHE_ENV, conflicts_with = "wav")]
    cache: Option<PathBuf>,
    /// Restrict to these instance ids
    #[arg(long)]
    id: Vec<String>,
    /// Report on one WAV file instead
    #[arg(long, requires = "labels")]
    wav: Option<PathBuf>,
    /// Candidate labels for --wav, e.g. TF
    #[arg(long)]
    labels: Option<String>,
    #[command(flatten)]
    spec: SpectrogramOpts,
    /// Also write the reports as CSV
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) => 2,
        Error::MissingGrad(_) => 3,
        Error::Format { .. } | Error::UnsupportedEncoding(_) | Error::InvalidArgument(_) | Error::Validation(_) => 1,
    }
}

fn with_path(path: &Path) -> impl Fn(Error) -> Error + '_ {
    move |e| e.context(&path.display().to_string())
}

fn create(path: &Path) -> Result<BufWriter<File>, Error> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::from(e).context(&path.display().to_string()))?))
}

fn cmd_segment(a: &SegmentArgs) -> Result<(), Error> {
    let cfg = a.seg.config();
    cfg.validate()?;
    fs::create_dir_all(&a.out_dir)?;
    let mut rows = Vec::new();
    for path in &a.recordings {
        let rec = read_wav(path).map_err(with_path(path))?;
        let spans = segment_recording(&rec, &cfg).map_err(with_path(path))?;
        println!("{}: {} segment(s)", rec.source_id, spans.len());
        if !a.no_wavs {
            for (k, seg) in extract_segments(&rec, &spans)?.iter().enumerate() {
                let out = a.out_dir.join(format!("{}_{k:03}.wav", rec.source_id));
                write_wav(seg, &out, SampleEncoding::Float32).map_err(with_path(&out))?;
            }
        }
        rows.extend(spans.into_iter().map(|s| (rec.source_id.clone(), s)));
    }
    let out = a.out_dir.join("spans.csv");
    let mut w = create(&out)?;
    write_span_csv(&mut w, &rows)?;
    w.flush()?;
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_preprocess(a: &PreprocessArgs) -> Result<(), Error> {
    let base = a.manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
    let entries: Vec<ManifestEntry> = load_manifest(&a.manifest)
        .map_err(with_path(&a.manifest))?
        .into_iter()
        .map(|e| e.resolved(&base))
        .collect();
    if entries.is_empty() {
        return Err(Error::Validation(format!("{}: manifest has no recordings", a.manifest.display())));
    }
    let cfg = PreprocessConfig {
        segmentation: a.seg.config(),
        spectrogram: a.spec.config(128),
        target_len: a.target_len,
        ..PreprocessConfig::default()
    };
    cfg.validate()?;
    let fp = fingerprint(&entries, &cfg)?;
    let dir = &a.cache.cache;
    if !a.force && cached_fingerprint(dir).as_deref() == Some(fp.as_str()) {
        println!("cache hit: {} is up to date", dir.display());
        return Ok(());
    }
    let instances = instances_from_manifest(&entries, &cfg)?;
    if instances.is_empty() {
        return Err(Error::Validation("no segments found in any recording".into()));
    }
    write_cache(dir, &instances, None, &fp, a.pgm)?;
    let (r, c) = (instances[0].image.rows, instances[0].image.cols);
    println!("wrote {} instances ({r}x{c}) to {}", instances.len(), dir.display());
    Ok(())
}

fn cmd_synth(a: &SynthArgs) -> Result<(), Error> {
    let spec = a.synth.spec(a.spec.config(64));
    let ds = generate_synthetic_dataset(&spec)?;
    let fp = format!("synthetic:{spec:?}");
    write_cache(&a.cache.cache, &ds.instances, Some(&ds.true_labels), &fp, a.pgm)?;
    if let Some(dir) = &a.wav_dir {
        fs::create_dir_all(dir)?;
        for (seg, _, _) in synthesize_corpus_audio(&spec)? {
            let out = dir.join(format!("{}.wav", seg.source_id));
            write_wav(&seg, &out, SampleEncoding::Pcm16).map_err(with_path(&out))?;
        }
    }
    println!("wrote {} synthetic instances to {}", ds.instances.len(), a.cache.cache.display());
    Ok(())
}

fn load_corpus(a: &TrainArgs) -> Result<(Vec<LabeledInstance>, Option<Vec<Behavior>>), Error> {
    if a.synthetic {
        let ds = generate_synthetic_dataset(&a.synth.spec(a.spec.config(64)))?;
        Ok((ds.instances, Some(ds.true_labels)))
    } else {
        let c = read_cache(&a.cache.cache).map_err(with_path(&a.cache.cache))?;
        Ok((c.instances, c.true_labels))
    }
}

fn cmd_train(a: &TrainArgs) -> Result<(), Error> {
    let (instances, truth) = load_corpus(a)?;
    if instances.len() < 2 {
        return Err(Error::Validation("need at least two instances".into()));
    }
    let model_cfg = ModelConfig {
        input_channels: a.input_channels,
        stem_width: a.stem_width,
        stage_widths: a.stage_widths.clone(),
        blocks_per_stage: a.blocks.clone(),
        seed: a.model_seed,
        ..ModelConfig::default()
    };
    model_cfg.validate()?;
    let train_cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        schedule: LrSchedule {
            base_lr: a.lr,
            decay_factor: a.decay_factor,
            decay_every_epochs: a.decay_every,
        },
        test_fraction: a.test_fraction,
        weight_gradient: if a.full_weight_grad {
            WeightGradient::Full
        } else {
            WeightGradient::Frozen
        },
        jobs: a.jobs.max(1),
        ..TrainConfig::default()
    };
    train_cfg.validate()?;
    let run = cross_validate(&instances, a.reps, a.seed, &model_cfg, &train_cfg)?;

    fs::create_dir_all(&a.out_dir)?;
    let out = |name: &str| a.out_dir.join(name);
    let mut w = create(&out("metrics.csv"))?;
    write_metrics_csv(&mut w, &run.reps)?;
    w.flush()?;
    let mut w = create(&out("aggregate.json"))?;
    write_aggregate_json(&mut w, &run.aggregate)?;
    w.flush()?;
    for (stem, svg) in run_charts(&run.aggregate) {
        fs::write(out(&format!("{stem}.svg")), svg)?;
    }
    let mut reports = Vec::new();
    for r in &run.reps {
        for (i, f) in r.test_indices.iter().zip(&r.test_logits) {
            let inst = &instances[*i];
            reports.push((r.repetition, PredictionReport::from_logits(&inst.id, f, inst.label_set)));
        }
    }
    let mut w = create(&out("predictions.csv"))?;
    writeln!(w, "rep,instance_id,labels,T,F,S,M,predicted,correct")?;
    for (rep, r) in &reports {
        let mut line = Vec::new();
        write_predictions_csv(&mut line, std::slice::from_ref(r))?;
        let row = String::from_utf8_lossy(&line);
        writeln!(w, "{rep},{}", row.lines().nth(1).unwrap_or_default())?;
    }
    w.flush()?;
    save_checkpoint(out("model.ckpt"), &run.reps[0].model)?;

    let counts = label_set_counts(&instances.iter().map(|i| i.label_set).collect::<Vec<_>>());
    let base = baseline_accuracies(&counts)?;
    let (best, best_acc) = base.most_prevalent();
    let agg = &run.aggregate.final_test_acc;
    println!(
        "{} instances, {} reps x {} epochs: final candidate-set accuracy mean {:.1}%, 5th pct {:.1}%, 95th pct {:.1}%",
        instances.len(),
        a.reps,
        a.epochs,
        agg.mean,
        agg.p5,
        agg.p95
    );
    println!("always-{} baseline {:.1}%", best.letter(), 100.0 * best_acc);
    if let Some(truth) = truth {
        let (mut hit, mut n) = (0usize, 0usize);
        for r in &run.reps {
            for (i, f) in r.test_indices.iter().zip(&r.test_logits) {
                hit += usize::from(predicted_index(f) == truth[*i].index());
                n += 1;
            }
        }
        println!("hidden-label accuracy {:.1}%", 100.0 * hit as f64 / n as f64);
    }
    println!("wrote {}", a.out_dir.display());
    Ok(())
}

fn cmd_baseline(a: &BaselineArgs) -> Result<(), Error> {
    let counts: Vec<(CandidateLabelSet, u64)> = if let Some(p) = &a.counts {
        parse_label_counts(File::open(p).map_err(|e| Error::from(e).context(&p.display().to_string()))?)
            .map_err(with_path(p))?
    } else if let Some(p) = &a.manifest {
        let entries = load_manifest(p).map_err(with_path(p))?;
        label_set_counts(&entries.iter().map(|e| e.label_set).collect::<Vec<_>>())
    } else if let Some(p) = &a.cache {
        let c = read_cache(p).map_err(with_path(p))?;
        label_set_counts(&c.instances.iter().map(|i| i.label_set).collect::<Vec<_>>())
    } else {
        reference_counts()
    };
    if counts.iter().map(|c| c.1).sum::<u64>() == 0 {
        return Err(Error::Validation("no labeled instances to count".into()));
    }
    let total: u64 = counts.iter().map(|c| c.1).sum();
    for (s, n) in &counts {
        println!("{:<10}{n:>6}", s.to_string());
    }
    println!("{:<10}{total:>6}\n", "total");
    print!("{}", baseline_accuracies(&counts)?);
    Ok(())
}

fn cmd_report(a: &ReportArgs) -> Result<(), Error> {
    let model = load_checkpoint(&a.checkpoint).map_err(with_path(&a.checkpoint))?;
    let instances: Vec<LabeledInstance> = if let Some(wav) = &a.wav {
        let labels: CandidateLabelSet = a.labels.as_deref().unwrap_or_default().parse()?;
        let rec = resample(&read_wav(wav).map_err(with_path(wav))?, CANONICAL_RATE)?;
        let cfg = a.spec.config(64);
        let padded = pad_to_length(&rec, rec.len().max(cfg.fft_size), 0.0)?;
        let image = MelImager::new(cfg)?.image(&padded)?;
        vec![LabeledInstance::new(rec.source_id.clone(), image, labels)?]
    } else {
        let dir = a.cache.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_CACHE));
        let all = read_cache(&dir).map_err(with_path(&dir))?.instances;
        if a.id.is_empty() {
            all
        } else {
            a.id.iter()
                .map(|id| {
                    all.iter()
                        .find(|i| &i.id == id)
                        .cloned()
                        .ok_or_else(|| Error::Validation(format!("no instance '{id}' in {}", dir.display())))
                })
                .collect::<Result<_, _>>()?
        }
    };
    let reports = instances
        .iter()
        .map(|i| predict_report(&model, i))
        .collect::<Result<Vec<_>, _>>()?;
    for r in &reports {
        println!("{r}");
    }
    if let Some(p) = &a.csv {
        let mut w = create(p)?;
        write_predictions_csv(&mut w, &reports)?;
        w.flush()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Segment(a) => cmd_segment(a),
        Command::Preprocess(a) => cmd_preprocess(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Baseline(a) => cmd_baseline(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
