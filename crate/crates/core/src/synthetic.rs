//! Synthetic partial-label corpora with known ground truth.
//!
//! Each behavior gets its own call texture: a steady harmonic tone (T),
//! repeated rising chirps (F), a frequency-modulated warble (S) and short
//! tone pulses (M). Every clip is mixed with white noise at a chosen SNR,
//! imaged with the regular spectrogram pipeline, and given a candidate set
//! that always contains the true behavior plus superfluous labels drawn
//! from a profile.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::audio_io::{AudioSegment, CANONICAL_RATE};
use crate::dataset::{reference_counts, Behavior, CandidateLabelSet, LabeledInstance, N_BEHAVIORS};
use crate::error::{Error, Result};
use crate::spectrogram::{MelImager, SpectrogramConfig};

/// How candidate sets are attached to instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SuperfluousProfile {
    /// Every set is the singleton of the true behavior.
    None,
    /// Label-set frequencies proportional to the reference corpus table.
    Reference,
    /// Label-set frequencies proportional to the given weights.
    Weighted(Vec<(CandidateLabelSet, f64)>),
}

impl SuperfluousProfile {
    fn weights(&self) -> Option<Vec<(CandidateLabelSet, f64)>> {
        match self {
            SuperfluousProfile::None => None,
            SuperfluousProfile::Reference => Some(reference_counts().into_iter().map(|(s, n)| (s, n as f64)).collect()),
            SuperfluousProfile::Weighted(w) => Some(w.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_per_class: usize,
    pub duration_s: f64,
    pub sample_rate: u32,
    pub snr_db: f64,
    pub profile: SuperfluousProfile,
    pub seed: u64,
    pub spectrogram: SpectrogramConfig,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_per_class: 50,
            duration_s: 1.0,
            sample_rate: CANONICAL_RATE,
            snr_db: 20.0,
            profile: SuperfluousProfile::Reference,
            seed: 0,
            spectrogram: SpectrogramConfig {
                n_mels: 64,
                ..SpectrogramConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub instances: Vec<LabeledInstance>,
    /// Ground truth, parallel to `instances`; for evaluation only.
    pub true_labels: Vec<Behavior>,
}

/// Largest-remainder apportionment of `total` items over the weights.
/// Ties in the remainder go to the earlier entry.
pub fn apportion(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if sum <= 0.0 || weights.is_empty() {
        return vec![0; weights.len()];
    }
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut left = total - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Assign a true behavior to every candidate-set slot so that each behavior
/// gets `per_class` slots where possible (bipartite max-flow), the rest going
/// to the member behavior with the most unmet quota.
pub fn assign_true_labels(set_counts: &[(CandidateLabelSet, usize)], per_class: usize) -> Vec<Vec<(Behavior, usize)>> {
    let n_sets = set_counts.len();
    // nodes: 0 source, 1..=n_sets sets, then 4 classes, then sink
    let class_node = |c: usize| 1 + n_sets + c;
    let sink = 1 + n_sets + N_BEHAVIORS;
    let n = sink + 1;
    let mut cap = vec![vec![0usize; n]; n];
    for (i, (set, count)) in set_counts.iter().enumerate() {
        cap[0][1 + i] = *count;
        for b in set.iter() {
            cap[1 + i][class_node(b.index())] = usize::MAX / 4;
        }
    }
    for c in 0..N_BEHAVIORS {
        cap[class_node(c)][sink] = per_class;
    }
    let mut flow = vec![vec![0i64; n]; n];
    loop {
        // BFS for an augmenting path
        let mut prev = vec![usize::MAX; n];
        prev[0] = 0;
        let mut queue = std::collections::VecDeque::from([0usize]);
        while let Some(u) = queue.pop_front() {
            for v in 0..n {
                let residual = cap[u][v] as i64 - flow[u][v];
                if prev[v] == usize::MAX && residual > 0 {
                    prev[v] = u;
                    queue.push_back(v);
                }
            }
        }
        if prev[sink] == usize::MAX {
            break;
        }
        let mut push = i64::MAX;
        let mut v = sink;
        while v != 0 {
            let u = prev[v];
            push = push.min(cap[u][v] as i64 - flow[u][v]);
            v = u;
        }
        let mut v = sink;
        while v != 0 {
            let u = prev[v];
            flow[u][v] += push;
            flow[v][u] -= push;
            v = u;
        }
    }
    let mut filled = [0usize; N_BEHAVIORS];
    let mut out: Vec<Vec<(Behavior, usize)>> = set_counts
        .iter()
        .enumerate()
        .map(|(i, (set, _))| {
            set.iter()
                .filter_map(|b| {
                    let f = flow[1 + i][class_node(b.index())].max(0) as usize;
                    filled[b.index()] += f;
                    (f > 0).then_some((b, f))
                })
                .collect()
        })
        .collect();
    // Slots the flow could not place (infeasible quotas).
    for (i, (set, count)) in set_counts.iter().enumerate() {
        let placed: usize = out[i].iter().map(|(_, f)| f).sum();
        for _ in placed..*count {
            let b = set
                .iter()
                .min_by_key(|b| (filled[b.index()], b.index()))
                .expect("non-empty set");
            filled[b.index()] += 1;
            match out[i].iter_mut().find(|(x, _)| *x == b) {
                Some(e) => e.1 += 1,
                None => out[i].push((b, 1)),
            }
        }
    }
    out
}

/// `(true behavior, candidate set)` for every instance, in generation order.
pub fn plan_labels(spec: &SyntheticSpec) -> Vec<(Behavior, CandidateLabelSet)> {
    let total = spec.n_per_class * N_BEHAVIORS;
    let mut plan = match spec.profile.weights() {
        None => Behavior::ALL
            .iter()
            .flat_map(|&b| std::iter::repeat((b, CandidateLabelSet::singleton(b))).take(spec.n_per_class))
            .collect::<Vec<_>>(),
        Some(w) => {
            let counts = apportion(&w.iter().map(|(_, x)| *x).collect::<Vec<_>>(), total);
            let set_counts: Vec<_> = w.iter().map(|(s, _)| *s).zip(counts).collect();
            let assigned = assign_true_labels(&set_counts, spec.n_per_class);
            set_counts
                .iter()
                .zip(assigned)
                .flat_map(|((set, _), parts)| {
                    parts
                        .into_iter()
                        .flat_map(move |(b, k)| std::iter::repeat((b, *set)).take(k))
                })
                .collect()
        }
    };
    plan.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_1abe));
    plan
}

/// Noise-free call waveform for one behavior, unit RMS.
pub fn behavior_waveform<R: Rng>(b: Behavior, n: usize, sample_rate: u32, rng: &mut R) -> Vec<f64> {
    let sr = sample_rate as f64;
    let scale: f64 = rng.random_range(0.92..1.08);
    let phase: f64 = rng.random_range(0.0..2.0 * PI);
    let offset: f64 = rng.random_range(0.0..0.25);
    let mut x: Vec<f64> = match b {
        Behavior::T => {
            let f0 = 700.0 * scale;
            (0..n)
                .map(|i| {
                    let t = i as f64 / sr;
                    let w = 2.0 * PI * f0 * t + phase;
                    w.sin() + 0.5 * (2.0 * w).sin() + 0.25 * (3.0 * w).sin()
                })
                .collect()
        }
        Behavior::F => {
            let (lo, hi, period, len) = (1500.0 * scale, 3500.0 * scale, 0.25, 0.15);
            (0..n)
                .map(|i| {
                    let t = i as f64 / sr + offset;
                    let tau = t % period;
                    if tau < len {
                        let k = (hi - lo) / len;
                        let env = (PI * tau / len).sin();
                        env * (2.0 * PI * (lo * tau + 0.5 * k * tau * tau) + phase).sin()
                    } else {
                        0.0
                    }
                })
                .collect()
        }
        Behavior::S => {
            let (fc, dev, rate) = (4500.0 * scale, 600.0, 5.0);
            (0..n)
                .map(|i| {
                    let t = i as f64 / sr;
                    let inst = 2.0 * PI * fc * t - dev / rate * (2.0 * PI * rate * t + offset * 8.0).cos();
                    (inst + phase).sin()
                })
                .collect()
        }
        Behavior::M => {
            let (f0, period, len) = (1200.0 * scale, 0.3, 0.08);
            (0..n)
                .map(|i| {
                    let t = i as f64 / sr;
                    let tau = (t + offset) % period;
                    if tau < len {
                        (PI * tau / len).sin() * (2.0 * PI * f0 * t + phase).sin()
                    } else {
                        0.0
                    }
                })
                .collect()
        }
    };
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / n.max(1) as f64).sqrt();
    if rms > 0.0 {
        x.iter_mut().for_each(|v| *v /= rms);
    }
    x
}

/// Call plus white noise at `snr_db`, peak-limited to keep amplitudes in [-1, 1].
pub fn synthesize_clip<R: Rng>(b: Behavior, spec: &SyntheticSpec, rng: &mut R) -> Vec<f32> {
    let n = (spec.duration_s * spec.sample_rate as f64).round() as usize;
    let call = behavior_waveform(b, n, spec.sample_rate, rng);
    let noise_rms = 10f64.powf(-spec.snr_db / 20.0);
    let mixed: Vec<f64> = call
        .iter()
        .map(|c| c + noise_rms * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let peak = mixed.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let gain = if peak > 0.0 { 0.9 / peak } else { 1.0 };
    mixed.iter().map(|v| (v * gain) as f32).collect()
}

/// Clips and ground truth of the corpus, before imaging. Clip `i` is named
/// `syn{i:05}`.
pub fn synthesize_corpus_audio(spec: &SyntheticSpec) -> Result<Vec<(AudioSegment, Behavior, CandidateLabelSet)>> {
    if spec.n_per_class == 0 {
        return Err(Error::invalid("n_per_class must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    plan_labels(spec)
        .into_iter()
        .enumerate()
        .map(|(i, (truth, set))| {
            let seg = AudioSegment::new(synthesize_clip(truth, spec, &mut rng), spec.sample_rate, format!("syn{i:05}"))?;
            Ok((seg, truth, set))
        })
        .collect()
}

/// Build the full corpus.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    if spec.spectrogram.sample_rate != spec.sample_rate {
        return Err(Error::invalid("spectrogram sample rate must match the synthetic sample rate"));
    }
    let imager = MelImager::new(spec.spectrogram)?;
    let clips = synthesize_corpus_audio(spec)?;
    let mut instances = Vec::with_capacity(clips.len());
    let mut true_labels = Vec::with_capacity(clips.len());
    for (seg, truth, set) in clips {
        instances.push(LabeledInstance::new(seg.source_id.clone(), imager.image(&seg)?, set)?);
        true_labels.push(truth);
    }
    Ok(SyntheticDataset {
        instances,
        true_labels,
    })
}
