//! Training orchestration: GRPO runs, the SFT imitation baseline,
//! evaluation, and sweeps.
//!
//! Every run is a pure function of its seed. The seed feeds two
//! independent ChaCha streams: one schedules question batches, one
//! drives response sampling. GRPO and SFT consume the scheduling stream
//! identically, so paired runs see the same question order and differ
//! only in the algorithm.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fewshot::{split_few_shot, EpisodeSplit, TaskDefinition};
use crate::grpo::{
    grpo_loss_and_grad, sample_group, FreezeMask, GrpoConfig, Optimizer, ResponseGroup,
};
use crate::policy::{
    self, Decoding, ParamGrad, PolicyParams, PolicyShape, TokenSequence,
};
use crate::reward::{self, classification_reward};
use crate::vocab::Vocabulary;

const SCHEDULE_STREAM: u64 = 1;
const SAMPLER_STREAM: u64 = 2;
const PRIMING_STREAM: u64 = 3;

/// How to construct the starting parameters of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PolicyInit {
    /// All parameters zero: a uniform policy over the vocabulary.
    Zero,
    /// Seeded Gaussian noise of the given scale.
    Random { scale: f64 },
    /// Gaussian noise followed by a short built-in imitation pass on the
    /// tagged response template with uniformly random in-range answers.
    /// The result follows the response format but knows nothing about
    /// the classes — the stand-in for an instruction-following base
    /// model, and the untrained baseline all comparisons start from.
    Primed,
}

const PRIMING_STEPS: usize = 400;
const PRIMING_BATCH: usize = 8;
const PRIMING_LEARNING_RATE: f64 = 0.05;
const PRIMING_NOISE_SCALE: f64 = 0.1;

/// The canonical well-formed response for a class: a fixed filler think
/// phrase, then the class index as the answer payload.
///
/// The think phrase deliberately carries no class digits. The policy
/// conditions on one previous token only, so a digit that ends the think
/// text would need two different successors (`</think>` there,
/// `</answer>` in the answer block) — unrepresentable exactly.
pub fn gold_sequence(vocab: &Vocabulary, class_index: usize) -> TokenSequence {
    let mut ids = vec![Vocabulary::THINK_OPEN];
    for i in 0..vocab.filler_count().min(2) {
        ids.push(vocab.filler(i).expect("filler in range"));
    }
    ids.push(Vocabulary::THINK_CLOSE);
    ids.push(Vocabulary::ANSWER_OPEN);
    ids.extend(vocab.digits_of(class_index));
    ids.push(Vocabulary::ANSWER_CLOSE);
    ids.push(Vocabulary::EOS);
    TokenSequence {
        ids,
        terminated: true,
    }
}

/// Builds starting parameters for a run. `num_classes` is only used by
/// [`PolicyInit::Primed`], whose template answers range over the task's
/// options.
pub fn init_policy(
    init: &PolicyInit,
    shape: &PolicyShape,
    vocab: &Vocabulary,
    num_classes: usize,
    seed: u64,
) -> Result<PolicyParams> {
    if shape.vocab_size != vocab.size() {
        return Err(Error::Contract(format!(
            "shape vocab size {} does not match vocabulary size {}",
            shape.vocab_size,
            vocab.size()
        )));
    }
    match init {
        PolicyInit::Zero => Ok(PolicyParams::zeros(*shape)),
        PolicyInit::Random { scale } => Ok(PolicyParams::random(*shape, *scale, seed)),
        PolicyInit::Primed => {
            if num_classes == 0 {
                return Err(Error::Contract(
                    "primed initialization needs at least one class".to_string(),
                ));
            }
            let mut params = PolicyParams::random(*shape, PRIMING_NOISE_SCALE, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(PRIMING_STREAM);
            let config = GrpoConfig {
                learning_rate: PRIMING_LEARNING_RATE,
                gradient_accumulation_steps: 1,
                batch_size: PRIMING_BATCH,
                ..GrpoConfig::default()
            };
            let mut opt = Optimizer::new(&config, *shape, FreezeMask::none());
            for _ in 0..PRIMING_STEPS {
                let mut grad = ParamGrad::zeros(*shape);
                for _ in 0..PRIMING_BATCH {
                    let context: Vec<f64> = (0..shape.feature_dim)
                        .map(|_| rng.sample(rand_distr::StandardNormal))
                        .collect();
                    let answer = rng.random_range(0..num_classes);
                    let gold = gold_sequence(vocab, answer);
                    policy::accumulate_weighted_log_prob_grad(
                        &params,
                        &context,
                        &gold,
                        -1.0 / PRIMING_BATCH as f64,
                        &mut grad,
                    )?;
                }
                opt.apply_update(&mut params, &grad)?;
            }
            Ok(params)
        }
    }
}

/// Per-step training metrics. One record per optimizer step.
///
/// `wall_clock_secs` is in-memory only: it is skipped during
/// serialization so that repeated seeded runs produce byte-identical
/// metrics files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    /// Mean total reward over all responses sampled this step.
    pub mean_reward: f64,
    /// Fraction of responses earning the accuracy reward.
    pub accuracy_rate: f64,
    /// Fraction of responses earning the format reward.
    pub format_rate: f64,
    /// Mean per-response KL to the reference snapshot.
    pub mean_kl: f64,
    pub loss: f64,
    pub mean_response_length: f64,
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: PolicyParams,
    pub metrics: Vec<MetricsRecord>,
}

/// Deterministic batch scheduler. With enough training questions it
/// cycles through seeded reshuffles; when the k-shot set is smaller than
/// the batch it samples with replacement per step.
struct BatchSchedule {
    ids: Vec<String>,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchSchedule {
    fn new(ids: Vec<String>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(SCHEDULE_STREAM);
        let order = (0..ids.len()).collect();
        Self {
            ids,
            rng,
            order,
            cursor: usize::MAX, // force a shuffle before the first batch
        }
    }

    fn next_batch(&mut self, batch_size: usize) -> Vec<String> {
        if self.ids.len() < batch_size {
            return (0..batch_size)
                .map(|_| self.ids[self.rng.random_range(0..self.ids.len())].clone())
                .collect();
        }
        if self.cursor.saturating_add(batch_size) > self.order.len() {
            // Reshuffle for a fresh epoch (Fisher-Yates via rand).
            use rand::seq::SliceRandom;
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let batch = self.order[self.cursor..self.cursor + batch_size]
            .iter()
            .map(|&i| self.ids[i].clone())
            .collect();
        self.cursor += batch_size;
        batch
    }
}

fn check_run_inputs(
    task: &TaskDefinition,
    vocab: &Vocabulary,
    split: &EpisodeSplit,
    config: &GrpoConfig,
    initial: &PolicyParams,
) -> Result<()> {
    config.validate()?;
    if initial.shape().vocab_size != vocab.size() {
        return Err(Error::Contract(format!(
            "policy vocab size {} does not match vocabulary size {}",
            initial.shape().vocab_size,
            vocab.size()
        )));
    }
    if initial.shape().feature_dim != task.feature_dim() {
        return Err(Error::Contract(format!(
            "policy feature_dim {} does not match task feature_dim {}",
            initial.shape().feature_dim,
            task.feature_dim()
        )));
    }
    if split.train_ids.is_empty() {
        return Err(Error::Contract("split has no training instances".to_string()));
    }
    for id in &split.train_ids {
        if task.instance(id).is_none() {
            return Err(Error::Contract(format!(
                "split references unknown instance '{id}'"
            )));
        }
    }
    Ok(())
}

fn group_reward_stats(groups: &[ResponseGroup]) -> (f64, f64, f64, f64) {
    let mut n = 0usize;
    let (mut reward, mut acc, mut fmt, mut len) = (0.0, 0.0, 0.0, 0.0);
    for g in groups {
        for b in &g.breakdowns {
            reward += f64::from(b.total);
            acc += f64::from(b.accuracy);
            fmt += f64::from(b.format);
        }
        for r in &g.responses {
            len += r.len() as f64;
        }
        n += g.len();
    }
    let n = n as f64;
    (reward / n, acc / n, fmt / n, len / n)
}

/// Runs GRPO for `config.training_steps` optimizer steps from `initial`.
/// The reference snapshot is taken once at training start; sampling is
/// on-policy (the live parameters, one update per sampled batch).
pub fn train_grpo(
    task: &TaskDefinition,
    vocab: &Vocabulary,
    split: &EpisodeSplit,
    config: &GrpoConfig,
    initial: &PolicyParams,
    seed: u64,
    freeze: &FreezeMask,
) -> Result<TrainOutcome> {
    check_run_inputs(task, vocab, split, config, initial)?;
    let mut params = initial.clone();
    let reference = initial.snapshot();
    let shape = *params.shape();

    let mut schedule = BatchSchedule::new(split.train_ids.clone(), seed);
    let mut sampler_rng = ChaCha8Rng::seed_from_u64(seed);
    sampler_rng.set_stream(SAMPLER_STREAM);

    let mut optimizer = Optimizer::new(config, shape, freeze.clone());
    let micro_size = config.batch_size / config.gradient_accumulation_steps;
    let mut metrics = Vec::with_capacity(config.training_steps);

    for step in 1..=config.training_steps {
        let t0 = Instant::now();
        let batch = schedule.next_batch(config.batch_size);

        let mut groups = Vec::with_capacity(batch.len());
        for id in &batch {
            let instance = task
                .instance(id)
                .expect("batch ids come from the validated split");
            let group_seed: u64 = sampler_rng.random();
            let mut group = sample_group(&params, vocab, instance, config, group_seed)?;
            group.compute_advantages(config.std_guard)?;
            groups.push(group);
        }

        let mut micro_losses = Vec::with_capacity(config.gradient_accumulation_steps);
        let mut kl_total = 0.0;
        for chunk in groups.chunks(micro_size) {
            let mut micro_grad = ParamGrad::zeros(shape);
            let mut micro_loss = 0.0;
            for group in chunk {
                let (loss, grad, kl) = grpo_loss_and_grad(&params, &reference, group, config)?;
                micro_grad.add_scaled(&grad, 1.0 / chunk.len() as f64)?;
                micro_loss += loss / chunk.len() as f64;
                kl_total += kl;
            }
            micro_losses.push(micro_loss);
            optimizer.apply_update(&mut params, &micro_grad)?;
        }

        let loss = micro_losses.iter().sum::<f64>() / micro_losses.len() as f64;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                details: format!("micro losses {micro_losses:?}"),
            });
        }
        let (mean_reward, accuracy_rate, format_rate, mean_len) = group_reward_stats(&groups);
        metrics.push(MetricsRecord {
            step,
            mean_reward,
            accuracy_rate,
            format_rate,
            mean_kl: kl_total / groups.len() as f64,
            loss,
            mean_response_length: mean_len,
            wall_clock_secs: t0.elapsed().as_secs_f64(),
        });
    }

    Ok(TrainOutcome { params, metrics })
}

/// Supervised fine-tuning baseline: maximizes the log-likelihood of the
/// canonical gold response for each training question, with the same
/// optimizer, batching, and schedule as GRPO.
///
/// Reward metrics per step are computed on greedy decodes of the step's
/// batch (deterministic, so runs stay seed-reproducible).
pub fn train_sft(
    task: &TaskDefinition,
    vocab: &Vocabulary,
    split: &EpisodeSplit,
    config: &GrpoConfig,
    initial: &PolicyParams,
    seed: u64,
    freeze: &FreezeMask,
) -> Result<TrainOutcome> {
    check_run_inputs(task, vocab, split, config, initial)?;
    let mut params = initial.clone();
    let reference = initial.snapshot();
    let shape = *params.shape();

    let mut schedule = BatchSchedule::new(split.train_ids.clone(), seed);
    let mut optimizer = Optimizer::new(config, shape, freeze.clone());
    let micro_size = config.batch_size / config.gradient_accumulation_steps;
    let mut metrics = Vec::with_capacity(config.training_steps);

    for step in 1..=config.training_steps {
        let t0 = Instant::now();
        let batch = schedule.next_batch(config.batch_size);

        let mut micro_losses = Vec::with_capacity(config.gradient_accumulation_steps);
        // Greedy-decode reward metrics at the step's starting parameters.
        let mut breakdown_sums = (0.0, 0.0, 0.0);
        let mut kl_total = 0.0;
        let mut len_total = 0.0;
        for id in &batch {
            let instance = task.instance(id).expect("validated split");
            let decoded = policy::greedy(
                &params,
                &instance.features,
                config.max_response_length,
                Vocabulary::EOS,
            )?;
            let text = reward::render(&decoded, vocab)?;
            let b = classification_reward(&text, instance.class_index);
            breakdown_sums.0 += f64::from(b.total);
            breakdown_sums.1 += f64::from(b.accuracy);
            breakdown_sums.2 += f64::from(b.format);
            kl_total += policy::per_position_kl(&params, &reference, &instance.features, &decoded)?;
            len_total += decoded.len() as f64;
        }

        for chunk in batch.chunks(micro_size) {
            let mut micro_grad = ParamGrad::zeros(shape);
            let mut micro_loss = 0.0;
            for id in chunk {
                let instance = task.instance(id).expect("validated split");
                let gold = gold_sequence(vocab, instance.class_index);
                let lp = policy::accumulate_weighted_log_prob_grad(
                    &params,
                    &instance.features,
                    &gold,
                    -1.0 / chunk.len() as f64,
                    &mut micro_grad,
                )?;
                micro_loss -= lp / chunk.len() as f64;
            }
            micro_losses.push(micro_loss);
            optimizer.apply_update(&mut params, &micro_grad)?;
        }

        let loss = micro_losses.iter().sum::<f64>() / micro_losses.len() as f64;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                details: format!("micro losses {micro_losses:?}"),
            });
        }
        let n = batch.len() as f64;
        metrics.push(MetricsRecord {
            step,
            mean_reward: breakdown_sums.0 / n,
            accuracy_rate: breakdown_sums.1 / n,
            format_rate: breakdown_sums.2 / n,
            mean_kl: kl_total / n,
            loss,
            mean_response_length: len_total / n,
            wall_clock_secs: t0.elapsed().as_secs_f64(),
        });
    }

    Ok(TrainOutcome { params, metrics })
}

/// Per-class evaluation tallies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

/// Evaluation summary over a set of instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub format_rate: f64,
    pub per_class: BTreeMap<String, ClassStats>,
    pub n_evaluated: usize,
}

fn eval_from_outcomes(
    task: &TaskDefinition,
    outcomes: &[(usize, u8, u8)], // (class_index, r_acc, r_format)
) -> EvalReport {
    let mut per_class: BTreeMap<String, ClassStats> = BTreeMap::new();
    let (mut acc, mut fmt) = (0usize, 0usize);
    for &(class_index, r_acc, r_format) in outcomes {
        acc += usize::from(r_acc);
        fmt += usize::from(r_format);
        let stats = per_class
            .entry(task.class_names()[class_index].clone())
            .or_insert(ClassStats {
                correct: 0,
                total: 0,
                accuracy: 0.0,
            });
        stats.correct += usize::from(r_acc);
        stats.total += 1;
    }
    for stats in per_class.values_mut() {
        stats.accuracy = stats.correct as f64 / stats.total as f64;
    }
    let n = outcomes.len();
    EvalReport {
        accuracy: acc as f64 / n as f64,
        format_rate: fmt as f64 / n as f64,
        per_class,
        n_evaluated: n,
    }
}

/// Greedy-decoding evaluation over the given instance ids.
pub fn evaluate(
    params: &PolicyParams,
    vocab: &Vocabulary,
    task: &TaskDefinition,
    ids: &[String],
    decoding: &Decoding,
) -> Result<EvalReport> {
    if ids.is_empty() {
        return Err(Error::Contract("empty evaluation id list".to_string()));
    }
    let mut outcomes = Vec::with_capacity(ids.len());
    for id in ids {
        let instance = task
            .instance(id)
            .ok_or_else(|| Error::Contract(format!("unknown instance id '{id}'")))?;
        let seq = policy::greedy(
            params,
            &instance.features,
            decoding.max_response_length,
            Vocabulary::EOS,
        )?;
        let text = reward::render(&seq, vocab)?;
        let b = classification_reward(&text, instance.class_index);
        outcomes.push((instance.class_index, b.accuracy, b.format));
    }
    Ok(eval_from_outcomes(task, &outcomes))
}

/// Sampling-mode evaluation: `rounds` temperature samples per instance.
/// Reports the pooled accuracy over `ids.len() × rounds` draws.
pub fn evaluate_sampled(
    params: &PolicyParams,
    vocab: &Vocabulary,
    task: &TaskDefinition,
    ids: &[String],
    decoding: &Decoding,
    seed: u64,
    rounds: usize,
) -> Result<EvalReport> {
    if ids.is_empty() || rounds == 0 {
        return Err(Error::Contract(
            "sampled evaluation needs instances and at least one round".to_string(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut outcomes = Vec::with_capacity(ids.len() * rounds);
    for _ in 0..rounds {
        for id in ids {
            let instance = task
                .instance(id)
                .ok_or_else(|| Error::Contract(format!("unknown instance id '{id}'")))?;
            let seq = policy::sample_with_rng(
                params,
                &instance.features,
                decoding,
                Vocabulary::EOS,
                &mut rng,
            )?;
            let text = reward::render(&seq, vocab)?;
            let b = classification_reward(&text, instance.class_index);
            outcomes.push((instance.class_index, b.accuracy, b.format));
        }
    }
    Ok(eval_from_outcomes(task, &outcomes))
}

/// Axis of a hyperparameter sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    /// Responses per group (P).
    GroupSize,
    /// Shots per class (k).
    Shots,
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::GroupSize => "group-size",
            SweepAxis::Shots => "shots",
        }
    }

    fn label(&self, value: usize) -> String {
        match self {
            SweepAxis::GroupSize => format!("P={value}"),
            SweepAxis::Shots => format!("k={value}"),
        }
    }
}

/// One sweep configuration: axis, values, and the seeds aggregated per
/// value.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<usize>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub label: String,
    pub value: usize,
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepTable {
    pub axis: String,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    /// Plain-text table: one row per swept value.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<10} {:>10} {:>10} {:>6}\n",
            "setup", "mean_acc", "std_acc", "runs"
        ));
        for row in &self.rows {
            out.push_str(&format!(
                "{:<10} {:>10.4} {:>10.4} {:>6}\n",
                row.label,
                row.mean_accuracy,
                row.std_accuracy,
                row.accuracies.len()
            ));
        }
        out
    }
}

fn mean_and_sample_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Runs `train_grpo` + greedy evaluation for every (value, seed) pair of
/// the sweep and aggregates accuracy per value. Runs execute in parallel;
/// results are collected in deterministic order.
pub fn sweep(
    task: &TaskDefinition,
    vocab: &Vocabulary,
    shape: &PolicyShape,
    config: &GrpoConfig,
    k: usize,
    data_seed: u64,
    init: &PolicyInit,
    spec: &SweepSpec,
) -> Result<SweepTable> {
    if spec.values.is_empty() || spec.seeds.is_empty() {
        return Err(Error::Contract(
            "sweep needs at least one value and one seed".to_string(),
        ));
    }
    let mut rows = Vec::with_capacity(spec.values.len());
    for &value in &spec.values {
        let mut run_config = config.clone();
        let mut run_k = k;
        match spec.axis {
            SweepAxis::GroupSize => run_config.group_size = value,
            SweepAxis::Shots => run_k = value,
        }
        run_config.validate()?;
        let split = split_few_shot(task, run_k, data_seed)?;

        let accuracies: Vec<f64> = spec
            .seeds
            .par_iter()
            .map(|&seed| -> Result<f64> {
                let initial = init_policy(init, shape, vocab, task.num_classes(), seed)?;
                let outcome = train_grpo(
                    task,
                    vocab,
                    &split,
                    &run_config,
                    &initial,
                    seed,
                    &FreezeMask::none(),
                )?;
                let report = evaluate(
                    &outcome.params,
                    vocab,
                    task,
                    &split.test_ids,
                    &run_config.decoding(),
                )?;
                Ok(report.accuracy)
            })
            .collect::<Result<Vec<f64>>>()?;

        let (mean_accuracy, std_accuracy) = mean_and_sample_std(&accuracies);
        rows.push(SweepRow {
            label: spec.axis.label(value),
            value,
            seeds: spec.seeds.clone(),
            accuracies,
            mean_accuracy,
            std_accuracy,
        });
    }
    Ok(SweepTable {
        axis: spec.axis.name().to_string(),
        rows,
    })
}
