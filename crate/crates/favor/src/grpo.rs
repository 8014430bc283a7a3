//! Group-relative policy optimization.
//!
//! For each question the policy samples a group of P responses, scores
//! them with the rule-based classification reward, and normalizes the
//! rewards within the group to zero mean and unit (population) standard
//! deviation. The loss is the advantage-weighted negative log-likelihood
//! of the sampled responses plus an exact per-position KL penalty that
//! anchors the live policy to a frozen reference:
//!
//! ```text
//! L(θ) = −(1/P) Σᵢ Aᵢ · log πθ(Oᵢ | Q)  +  α · (1/P) Σᵢ KL(πθ ‖ π_ref)(Oᵢ)
//! ```
//!
//! An optional PPO-style clipped importance-ratio surrogate replaces the
//! first term when `clip_ratio` is set. Updates are applied with Adam
//! after averaging gradients over a fixed number of accumulation
//! micro-batches.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fewshot::LabeledInstance;
use crate::policy::{
    self, Decoding, ParamBlock, ParamGrad, PolicyParams, PolicyShape, TokenSequence,
};
use crate::reward::{self, RewardBreakdown};
use crate::vocab::Vocabulary;

/// Adam moment decay and stabilizer settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrpoConfig {
    /// Responses sampled per question (P).
    pub group_size: usize,
    /// KL penalty coefficient (α).
    pub kl_coefficient: f64,
    pub learning_rate: f64,
    /// Questions per optimizer step.
    pub batch_size: usize,
    pub gradient_accumulation_steps: usize,
    pub training_steps: usize,
    /// Sampling temperature; log-probs and gradients always use 1.
    pub temperature: f64,
    pub max_response_length: usize,
    /// Below this reward standard deviation the whole group gets zero
    /// advantages.
    pub std_guard: f64,
    /// When set, the policy-gradient term uses the clipped
    /// importance-ratio surrogate against the sampling-time log-probs.
    pub clip_ratio: Option<f64>,
    pub adam: AdamConfig,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 16,
            kl_coefficient: 0.04,
            learning_rate: 5e-5,
            batch_size: 8,
            gradient_accumulation_steps: 2,
            training_steps: 20,
            temperature: 1.0,
            max_response_length: 24,
            std_guard: 1e-8,
            clip_ratio: None,
            adam: AdamConfig::default(),
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::Config(format!(
                "group_size must be at least 2, got {}",
                self.group_size
            )));
        }
        if !(self.kl_coefficient >= 0.0 && self.kl_coefficient.is_finite()) {
            return Err(Error::Config(format!(
                "kl_coefficient must be a finite nonnegative real, got {}",
                self.kl_coefficient
            )));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be a finite nonnegative real, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 || self.gradient_accumulation_steps == 0 || self.training_steps == 0
        {
            return Err(Error::Config(
                "batch_size, gradient_accumulation_steps, and training_steps must be positive"
                    .to_string(),
            ));
        }
        if self.batch_size % self.gradient_accumulation_steps != 0 {
            return Err(Error::Config(format!(
                "batch_size {} must be divisible by gradient_accumulation_steps {}",
                self.batch_size, self.gradient_accumulation_steps
            )));
        }
        if let Some(c) = self.clip_ratio {
            if !(c > 0.0 && c < 1.0) {
                return Err(Error::Config(format!(
                    "clip_ratio must lie in (0, 1), got {c}"
                )));
            }
        }
        self.decoding().validate().map_err(|e| match e {
            Error::Contract(msg) => Error::Config(msg),
            other => other,
        })
    }

    pub fn decoding(&self) -> Decoding {
        Decoding {
            temperature: self.temperature,
            max_response_length: self.max_response_length,
        }
    }
}

/// The P sampled responses for one question, with rewards, advantages,
/// and sampling-time log-probabilities.
#[derive(Debug, Clone)]
pub struct ResponseGroup {
    pub instance_id: String,
    /// Context features of the question the group was sampled for.
    pub context: Vec<f64>,
    pub responses: Vec<TokenSequence>,
    pub texts: Vec<String>,
    pub breakdowns: Vec<RewardBreakdown>,
    pub rewards: Vec<f64>,
    /// Empty until [`ResponseGroup::compute_advantages`] runs.
    pub advantages: Vec<f64>,
    /// log πθ_old(Oᵢ | Q) recorded at sampling time.
    pub sampling_log_probs: Vec<f64>,
}

impl ResponseGroup {
    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }

    pub fn compute_advantages(&mut self, std_guard: f64) -> Result<()> {
        self.advantages = normalize_advantages(&self.rewards, std_guard)?;
        Ok(())
    }
}

/// Samples P responses for one labeled instance and scores each with the
/// classification reward. Advantages are left uncomputed.
pub fn sample_group(
    params: &PolicyParams,
    vocab: &Vocabulary,
    instance: &LabeledInstance,
    config: &GrpoConfig,
    seed: u64,
) -> Result<ResponseGroup> {
    config.validate()?;
    if params.shape().vocab_size != vocab.size() {
        return Err(Error::Contract(format!(
            "policy vocab size {} does not match vocabulary size {}",
            params.shape().vocab_size,
            vocab.size()
        )));
    }
    let decoding = config.decoding();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = config.group_size;

    let mut responses = Vec::with_capacity(p);
    let mut texts = Vec::with_capacity(p);
    let mut breakdowns = Vec::with_capacity(p);
    let mut rewards = Vec::with_capacity(p);
    let mut sampling_log_probs = Vec::with_capacity(p);
    for _ in 0..p {
        let seq = policy::sample_with_rng(
            params,
            &instance.features,
            &decoding,
            Vocabulary::EOS,
            &mut rng,
        )?;
        let text = reward::render(&seq, vocab)?;
        let breakdown = reward::classification_reward(&text, instance.class_index);
        sampling_log_probs.push(policy::log_prob(params, &instance.features, &seq)?);
        rewards.push(f64::from(breakdown.total));
        breakdowns.push(breakdown);
        texts.push(text);
        responses.push(seq);
    }
    Ok(ResponseGroup {
        instance_id: instance.id.clone(),
        context: instance.features.clone(),
        responses,
        texts,
        breakdowns,
        rewards,
        advantages: Vec::new(),
        sampling_log_probs,
    })
}

/// Group-normalized advantages: `Aᵢ = (rᵢ − mean) / std` with the
/// population standard deviation. Groups whose reward std falls below
/// `std_guard` get all-zero advantages.
pub fn normalize_advantages(rewards: &[f64], std_guard: f64) -> Result<Vec<f64>> {
    let p = rewards.len();
    if p < 2 {
        return Err(Error::Contract(format!(
            "advantage normalization needs at least 2 rewards, got {p}"
        )));
    }
    let mean = rewards.iter().sum::<f64>() / p as f64;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / p as f64;
    let std = var.sqrt();
    if std < std_guard {
        return Ok(vec![0.0; p]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// Loss, exact parameter gradient, and mean per-response KL for one group.
///
/// The loss is `−(1/P) Σ Aᵢ log πθ(Oᵢ)` (or its clipped-surrogate
/// variant) plus `α · (1/P) Σ KL(πθ ‖ π_ref)` along each response.
pub fn grpo_loss_and_grad(
    live: &PolicyParams,
    reference: &PolicyParams,
    group: &ResponseGroup,
    config: &GrpoConfig,
) -> Result<(f64, ParamGrad, f64)> {
    if live.shape() != reference.shape() {
        return Err(Error::Contract(format!(
            "live and reference shapes differ: {:?} vs {:?}",
            live.shape(),
            reference.shape()
        )));
    }
    let p = group.len();
    if p == 0 {
        return Err(Error::Contract("empty response group".to_string()));
    }
    if group.advantages.len() != p {
        return Err(Error::Contract(format!(
            "advantages not computed: {} advantages for {} responses",
            group.advantages.len(),
            p
        )));
    }

    let alpha = config.kl_coefficient;
    let scale = 1.0 / p as f64;
    let mut grad = ParamGrad::zeros(*live.shape());
    let mut pg_loss = 0.0;
    let mut kl_sum = 0.0;

    for i in 0..p {
        let seq = &group.responses[i];
        let advantage = group.advantages[i];

        match config.clip_ratio {
            None => {
                // Plain REINFORCE term at the sampling parameters
                // (updates are on-policy: one step per sampled group).
                let lp = policy::accumulate_weighted_log_prob_grad(
                    live,
                    &group.context,
                    seq,
                    -advantage * scale,
                    &mut grad,
                )?;
                pg_loss -= advantage * scale * lp;
            }
            Some(clip) => {
                let lp = policy::log_prob(live, &group.context, seq)?;
                let ratio = (lp - group.sampling_log_probs[i]).exp();
                let unclipped = ratio * advantage;
                let clipped = ratio.clamp(1.0 - clip, 1.0 + clip) * advantage;
                let objective = unclipped.min(clipped);
                pg_loss -= scale * objective;
                // The min selects which branch carries gradient; the
                // clipped branch is constant in θ outside the clip range.
                let coefficient = if unclipped <= clipped { unclipped } else { 0.0 };
                if coefficient != 0.0 {
                    policy::accumulate_weighted_log_prob_grad(
                        live,
                        &group.context,
                        seq,
                        -coefficient * scale,
                        &mut grad,
                    )?;
                }
            }
        }

        if alpha > 0.0 {
            kl_sum += policy::accumulate_kl_grad(
                live,
                reference,
                &group.context,
                seq,
                alpha * scale,
                &mut grad,
            )?;
        } else {
            kl_sum += policy::per_position_kl(live, reference, &group.context, seq)?;
        }
    }

    let kl_estimate = kl_sum * scale;
    let loss = pg_loss + alpha * kl_estimate;
    Ok((loss, grad, kl_estimate))
}

/// Parameter blocks excluded from optimizer updates. Frozen blocks stay
/// bit-identical across training.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FreezeMask {
    blocks: BTreeSet<ParamBlock>,
}

impl FreezeMask {
    /// Freezes nothing.
    pub fn none() -> Self {
        Self::default()
    }

    pub fn all() -> Self {
        Self {
            blocks: ParamBlock::ALL.into_iter().collect(),
        }
    }

    pub fn from_blocks(blocks: impl IntoIterator<Item = ParamBlock>) -> Self {
        Self {
            blocks: blocks.into_iter().collect(),
        }
    }

    /// Parses block names; unknown names are an error.
    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        let mut blocks = BTreeSet::new();
        for name in names {
            blocks.insert(name.as_ref().parse::<ParamBlock>()?);
        }
        Ok(Self { blocks })
    }

    pub fn is_frozen(&self, block: ParamBlock) -> bool {
        self.blocks.contains(&block)
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn blocks(&self) -> impl Iterator<Item = ParamBlock> + '_ {
        self.blocks.iter().copied()
    }
}

/// Adam first/second moment accumulators, shaped like the parameters.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(shape: &PolicyShape) -> Self {
        Self {
            first_moment: vec![0.0; shape.param_count()],
            second_moment: vec![0.0; shape.param_count()],
            step: 0,
        }
    }
}

/// Adam optimizer with gradient accumulation and freeze-mask support.
#[derive(Debug, Clone)]
pub struct Optimizer {
    shape: PolicyShape,
    learning_rate: f64,
    adam: AdamConfig,
    accumulation_steps: usize,
    freeze: FreezeMask,
    state: OptimizerState,
    pending: Vec<f64>,
    pending_count: usize,
}

impl Optimizer {
    pub fn new(config: &GrpoConfig, shape: PolicyShape, freeze: FreezeMask) -> Self {
        Self {
            shape,
            learning_rate: config.learning_rate,
            adam: config.adam,
            accumulation_steps: config.gradient_accumulation_steps,
            freeze,
            state: OptimizerState::new(&shape),
            pending: vec![0.0; shape.param_count()],
            pending_count: 0,
        }
    }

    pub fn state(&self) -> &OptimizerState {
        &self.state
    }

    /// Feeds one micro-batch gradient. Once `gradient_accumulation_steps`
    /// micro-batches have accumulated, applies a single Adam step with
    /// their mean and returns `true`. Non-finite gradient entries are an
    /// error and leave the parameters untouched.
    pub fn apply_update(&mut self, params: &mut PolicyParams, grad: &ParamGrad) -> Result<bool> {
        if *params.shape() != self.shape || *grad.shape() != self.shape {
            return Err(Error::Contract(
                "optimizer, parameter, and gradient shapes must match".to_string(),
            ));
        }
        if let Some(i) = grad.values().iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient(i));
        }
        for (acc, g) in self.pending.iter_mut().zip(grad.values()) {
            *acc += g;
        }
        self.pending_count += 1;
        if self.pending_count < self.accumulation_steps {
            return Ok(false);
        }

        let mean_scale = 1.0 / self.accumulation_steps as f64;
        self.state.step += 1;
        let t = self.state.step as i32;
        let bias1 = 1.0 - self.adam.beta1.powi(t);
        let bias2 = 1.0 - self.adam.beta2.powi(t);

        let values = params.values_mut();
        for block in ParamBlock::ALL {
            if self.freeze.is_frozen(block) {
                continue;
            }
            for i in self.shape.block_range(block) {
                let g = self.pending[i] * mean_scale;
                let m = &mut self.state.first_moment[i];
                *m = self.adam.beta1 * *m + (1.0 - self.adam.beta1) * g;
                let v = &mut self.state.second_moment[i];
                *v = self.adam.beta2 * *v + (1.0 - self.adam.beta2) * g * g;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                values[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.adam.epsilon);
            }
        }
        self.pending.fill(0.0);
        self.pending_count = 0;
        Ok(true)
    }
}
