//! Training loop, Monte-Carlo cross-validation, candidate-set accuracy and
//! the constant-guess baselines.

use std::fmt;
use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::dataset::{make_batches, stratified_split, Behavior, CandidateLabelSet, LabeledInstance, SplitPlan, N_BEHAVIORS};
use crate::error::{Error, Result};
use crate::nn::{adam_step, batch_from_images, AdamState, LrSchedule, Model, ModelConfig, Tape};
use crate::pll::{self, Logits, WeightGradient};
use crate::stats::{mean, percentile};

/// Index of the largest logit; ties go to the lowest behavior index.
pub fn predicted_index(f: &Logits) -> usize {
    let mut best = 0;
    for i in 1..N_BEHAVIORS {
        if f[i] > f[best] {
            best = i;
        }
    }
    best
}

/// Fraction of instances whose top-scoring behavior is in their candidate set.
pub fn candidate_set_accuracy(logits: &[Logits], label_sets: &[CandidateLabelSet]) -> Result<f64> {
    if logits.len() != label_sets.len() || logits.is_empty() {
        return Err(Error::invalid(format!(
            "{} logit rows for {} label sets",
            logits.len(),
            label_sets.len()
        )));
    }
    let correct = logits
        .iter()
        .zip(label_sets)
        .filter(|(f, s)| s.contains_index(predicted_index(f)))
        .count();
    Ok(correct as f64 / logits.len() as f64)
}

/// Accuracy of guessing schemes that ignore the input, as fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineTable {
    pub uniform_random: f64,
    /// Always guess the behavior, indexed T, F, S, M.
    pub always: [f64; N_BEHAVIORS],
}

impl BaselineTable {
    /// Best constant guess and its accuracy; ties go to the lowest index.
    pub fn most_prevalent(&self) -> (Behavior, f64) {
        let i = predicted_index(&self.always);
        (Behavior::from_index(i).expect("index < 4"), self.always[i])
    }
}

impl fmt::Display for BaselineTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<16}{:>9}", "scheme", "accuracy")?;
        writeln!(f, "{:<16}{:>8.1}%", "uniform random", 100.0 * self.uniform_random)?;
        for b in Behavior::ALL {
            writeln!(f, "{:<16}{:>8.1}%", format!("always {}", b.letter()), 100.0 * self.always[b.index()])?;
        }
        Ok(())
    }
}

pub fn baseline_accuracies(counts: &[(CandidateLabelSet, u64)]) -> Result<BaselineTable> {
    let total: u64 = counts.iter().map(|(_, n)| n).sum();
    if total == 0 {
        return Err(Error::invalid("baseline needs a positive instance count"));
    }
    let t = total as f64;
    let uniform: f64 = counts.iter().map(|(s, n)| *n as f64 * s.len() as f64 / 4.0).sum();
    let always = std::array::from_fn(|i| {
        counts
            .iter()
            .filter(|(s, _)| s.contains_index(i))
            .map(|(_, n)| *n as f64)
            .sum::<f64>()
            / t
    });
    Ok(BaselineTable {
        uniform_random: uniform / t,
        always,
    })
}

/// Parse a `labels,count` CSV (header required).
pub fn parse_label_counts<R: std::io::Read>(r: R) -> Result<Vec<(CandidateLabelSet, u64)>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::validation(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header != ["labels", "count"] {
        return Err(Error::validation(format!("counts header must be 'labels,count', got '{}'", header.join(","))));
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::validation(e.to_string()))?;
        let set: CandidateLabelSet = rec[0].parse().map_err(|e: Error| e.context(&format!("counts row {}", i + 1)))?;
        let n: u64 = rec[1]
            .parse()
            .map_err(|_| Error::validation(format!("counts row {}: bad count '{}'", i + 1, &rec[1])))?;
        out.push((set, n));
    }
    Ok(out)
}

/// Count instances per distinct candidate set, in set order.
pub fn label_set_counts(sets: &[CandidateLabelSet]) -> Vec<(CandidateLabelSet, u64)> {
    let mut map = std::collections::BTreeMap::new();
    for s in sets {
        *map.entry(*s).or_insert(0u64) += 1;
    }
    map.into_iter().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub test_fraction: f64,
    pub weight_gradient: WeightGradient,
    /// Evaluation batch size; changes throughput only.
    pub eval_batch_size: usize,
    /// Worker threads for repetitions.
    pub jobs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 10,
            schedule: LrSchedule::default(),
            test_fraction: 0.2,
            weight_gradient: WeightGradient::Frozen,
            eval_batch_size: 10,
            jobs: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::invalid("batch sizes must be positive"));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::invalid("test_fraction must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Losses (full passes over each side) and test accuracy in percent after
/// one epoch. Epoch 0 is the untrained model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub test_acc: f64,
}

#[derive(Debug, Clone)]
pub struct RepetitionResult {
    pub repetition: usize,
    pub seed: u64,
    pub epochs: Vec<EpochMetrics>,
    /// Instance positions of the test side and their final logits.
    pub test_indices: Vec<usize>,
    pub test_logits: Vec<Logits>,
    pub model: Model<f32>,
}

impl RepetitionResult {
    pub fn final_metrics(&self) -> EpochMetrics {
        *self.epochs.last().expect("epoch 0 is always recorded")
    }
}

/// Mean and 5th/95th percentiles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub mean: f64,
    pub p5: f64,
    pub p95: f64,
}

impl Band {
    pub fn of(values: &[f64]) -> Band {
        Band {
            mean: mean(values),
            p5: percentile(values, 5.0),
            p95: percentile(values, 95.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochAggregate {
    pub epoch: usize,
    pub train_loss: Band,
    pub test_loss: Band,
    pub test_acc: Band,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub n_reps: usize,
    pub per_epoch: Vec<EpochAggregate>,
    pub final_test_acc: Band,
    pub final_test_accs: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RunMetrics {
    pub reps: Vec<RepetitionResult>,
    pub aggregate: Aggregate,
}

fn eval_logits(model: &Model<f32>, instances: &[LabeledInstance], ids: &[usize], batch: usize) -> Result<Vec<Logits>> {
    let mut out = Vec::with_capacity(ids.len());
    for chunk in ids.chunks(batch) {
        let images: Vec<_> = chunk.iter().map(|&i| &instances[i].image).collect();
        out.extend(model.logits(&batch_from_images::<f32>(&images)?)?);
    }
    Ok(out)
}

fn loss_of(logits: &[Logits], sets: &[CandidateLabelSet]) -> Result<f64> {
    Ok(pll::pll_loss(&pll::PllBatch::new(logits.to_vec(), sets.to_vec())?))
}

fn sets_of(instances: &[LabeledInstance], ids: &[usize]) -> Vec<CandidateLabelSet> {
    ids.iter().map(|&i| instances[i].label_set).collect()
}

fn shuffle_seed(split_seed: u64, epoch: usize) -> u64 {
    split_seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(epoch as u64 + 1)
}

/// Train a fresh model on `split.train` and evaluate on `split.test` after
/// every epoch. The model is initialized from `model_cfg.seed + split.seed`.
pub fn train_one_repetition(
    instances: &[LabeledInstance],
    split: &SplitPlan,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<RepetitionResult> {
    train_cfg.validate()?;
    if split.train.is_empty() || split.test.is_empty() {
        return Err(Error::invalid("split needs non-empty train and test sides"));
    }
    if let Some(&i) = split.train.iter().chain(&split.test).find(|&&i| i >= instances.len()) {
        return Err(Error::invalid(format!("split references instance {i} of {}", instances.len())));
    }
    let mut cfg = model_cfg.clone();
    cfg.seed = model_cfg.seed.wrapping_add(split.seed);
    let mut model = Model::<f32>::new(cfg)?;
    let mut adam = AdamState::new(&model.params);
    let train_sets = sets_of(instances, &split.train);
    let test_sets = sets_of(instances, &split.test);
    let evaluate = |model: &Model<f32>| -> Result<(f64, f64, Vec<Logits>)> {
        let logits = eval_logits(model, instances, &split.test, train_cfg.eval_batch_size)?;
        let loss = loss_of(&logits, &test_sets)?;
        let acc = 100.0 * candidate_set_accuracy(&logits, &test_sets)?;
        Ok((loss, acc, logits))
    };

    let train_loss = |model: &Model<f32>| -> Result<f64> {
        loss_of(&eval_logits(model, instances, &split.train, train_cfg.eval_batch_size)?, &train_sets)
    };
    let (test_loss, test_acc, mut test_logits) = evaluate(&model)?;
    let mut epochs = vec![EpochMetrics {
        epoch: 0,
        train_loss: train_loss(&model)?,
        test_loss,
        test_acc,
    }];

    for epoch in 1..=train_cfg.epochs {
        let lr = train_cfg.schedule.lr_at(epoch - 1);
        for batch in make_batches(&split.train, train_cfg.batch_size, shuffle_seed(split.seed, epoch))? {
            let images: Vec<_> = batch.iter().map(|&i| &instances[i].image).collect();
            let sets = sets_of(instances, &batch);
            let mut tape = Tape::new();
            let x = tape.input(&batch_from_images::<f32>(&images)?);
            let out = model.forward(&mut tape, x)?;
            let loss = tape.pll_loss(out, &sets, train_cfg.weight_gradient)?;
            model.params.zero_grads();
            tape.backward(loss, &mut model.params)?;
            adam_step(&mut model.params, &mut adam, lr)?;
        }
        let (test_loss, test_acc, logits) = evaluate(&model)?;
        test_logits = logits;
        epochs.push(EpochMetrics {
            epoch,
            train_loss: train_loss(&model)?,
            test_loss,
            test_acc,
        });
    }
    Ok(RepetitionResult {
        repetition: split.repetition,
        seed: split.seed,
        epochs,
        test_indices: split.test.clone(),
        test_logits,
        model,
    })
}

pub fn aggregate(reps: &[RepetitionResult]) -> Result<Aggregate> {
    let n_epochs = reps
        .first()
        .map(|r| r.epochs.len())
        .ok_or_else(|| Error::invalid("nothing to aggregate"))?;
    if reps.iter().any(|r| r.epochs.len() != n_epochs) {
        return Err(Error::invalid("repetitions have different epoch counts"));
    }
    let column = |e: usize, f: fn(&EpochMetrics) -> f64| reps.iter().map(|r| f(&r.epochs[e])).collect::<Vec<_>>();
    let per_epoch = (0..n_epochs)
        .map(|e| EpochAggregate {
            epoch: e,
            train_loss: Band::of(&column(e, |m| m.train_loss)),
            test_loss: Band::of(&column(e, |m| m.test_loss)),
            test_acc: Band::of(&column(e, |m| m.test_acc)),
        })
        .collect();
    let finals: Vec<f64> = reps.iter().map(|r| r.final_metrics().test_acc).collect();
    Ok(Aggregate {
        n_reps: reps.len(),
        per_epoch,
        final_test_acc: Band::of(&finals),
        final_test_accs: finals,
    })
}

/// `n_reps` independent stratified splits; repetition `r` uses seed
/// `base_seed + r` for its split, shuffles and initialization. Results are in
/// repetition order regardless of `train_cfg.jobs`.
pub fn cross_validate(
    instances: &[LabeledInstance],
    n_reps: usize,
    base_seed: u64,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<RunMetrics> {
    if n_reps == 0 {
        return Err(Error::invalid("n_reps must be at least 1"));
    }
    train_cfg.validate()?;
    let label_sets: Vec<_> = instances.iter().map(|i| i.label_set).collect();
    let splits = (0..n_reps)
        .map(|r| stratified_split(&label_sets, train_cfg.test_fraction, base_seed.wrapping_add(r as u64), r))
        .collect::<Result<Vec<_>>>()?;
    let jobs = train_cfg.jobs.clamp(1, n_reps);
    let reps = if jobs == 1 {
        splits
            .iter()
            .map(|s| train_one_repetition(instances, s, model_cfg, train_cfg))
            .collect::<Result<Vec<_>>>()?
    } else {
        let next = AtomicUsize::new(0);
        let slots: Mutex<Vec<Option<Result<RepetitionResult>>>> = Mutex::new((0..n_reps).map(|_| None).collect());
        std::thread::scope(|scope| {
            for _ in 0..jobs {
                scope.spawn(|| loop {
                    let r = next.fetch_add(1, Ordering::SeqCst);
                    if r >= n_reps {
                        break;
                    }
                    let res = train_one_repetition(instances, &splits[r], model_cfg, train_cfg);
                    slots.lock().expect("no panics while holding the lock")[r] = Some(res);
                });
            }
        });
        slots
            .into_inner()
            .expect("workers joined")
            .into_iter()
            .map(|s| s.expect("every repetition ran"))
            .collect::<Result<Vec<_>>>()?
    };
    let aggregate = aggregate(&reps)?;
    Ok(RunMetrics { reps, aggregate })
}

/// `rep,epoch,train_loss,test_loss,test_acc`, fixed six-decimal formatting.
pub fn write_metrics_csv<W: Write>(w: &mut W, reps: &[RepetitionResult]) -> Result<()> {
    writeln!(w, "rep,epoch,train_loss,test_loss,test_acc")?;
    for r in reps {
        for m in &r.epochs {
            writeln!(
                w,
                "{},{},{:.6},{:.6},{:.6}",
                r.repetition, m.epoch, m.train_loss, m.test_loss, m.test_acc
            )?;
        }
    }
    Ok(())
}

pub fn write_aggregate_json<W: Write>(w: &mut W, agg: &Aggregate) -> Result<()> {
    serde_json::to_writer_pretty(&mut *w, agg).map_err(|e| Error::invalid(e.to_string()))?;
    writeln!(w)?;
    Ok(())
}

/// Softmax percentages for one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionReport {
    pub instance_id: String,
    pub percentages: [f64; N_BEHAVIORS],
    pub label_set: CandidateLabelSet,
    pub correct: bool,
}

impl PredictionReport {
    pub fn from_logits(instance_id: impl Into<String>, f: &Logits, label_set: CandidateLabelSet) -> Self {
        Self {
            instance_id: instance_id.into(),
            percentages: pll::softmax(f).map(|p| 100.0 * p),
            label_set,
            correct: label_set.contains_index(predicted_index(f)),
        }
    }

    pub fn predicted(&self) -> Behavior {
        Behavior::from_index(predicted_index(&self.percentages)).expect("index < 4")
    }
}

impl fmt::Display for PredictionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} labels {}", self.instance_id, self.label_set)?;
        for b in Behavior::ALL {
            writeln!(f, "{} {:>5.1}%", b.letter(), self.percentages[b.index()])?;
        }
        Ok(())
    }
}

pub fn predict_report(model: &Model<f32>, instance: &LabeledInstance) -> Result<PredictionReport> {
    let f = model.logits(&batch_from_images::<f32>(&[&instance.image])?)?[0];
    Ok(PredictionReport::from_logits(&instance.id, &f, instance.label_set))
}

/// `instance_id,labels,T,F,S,M,predicted,correct` with percentages to two decimals.
pub fn write_predictions_csv<W: Write>(w: &mut W, reports: &[PredictionReport]) -> Result<()> {
    writeln!(w, "instance_id,labels,T,F,S,M,predicted,correct")?;
    for r in reports {
        let p = r.percentages;
        writeln!(
            w,
            "{},{},{:.2},{:.2},{:.2},{:.2},{},{}",
            r.instance_id,
            r.label_set.letters(),
            p[0],
            p[1],
            p[2],
            p[3],
            r.predicted().letter(),
            r.correct
        )?;
    }
    Ok(())
}
