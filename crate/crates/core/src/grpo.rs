//! Group-relative policy optimisation on verifiable rewards.
//!
//! For each input, `G` outputs are sampled from a frozen snapshot `π_old` and
//! scored. Advantages are the rewards centred on the group mean and scaled by
//! the group's standard deviation; no value function is involved. The loss is
//! the negated clipped surrogate plus a KL penalty against a reference policy:
//!
//! ```text
//! L = -E[min(r_t Â, clip(r_t, 1-ε, 1+ε) Â)] + β·KL(π_θ ‖ π_ref)
//! ```
//!
//! with `r_t = π_θ(o_t | ·) / π_old(o_t | ·)` per token and the sequence
//! advantage broadcast to every token. Averages run over tokens, then over the
//! outputs of a group, then over groups.

use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{fraction_indices, stratified_sample, DatasetSplit, Task, TaskSample};
use crate::error::{Error, Result};
use crate::optim::{Optimizer, OptimizerConfig, OptimizerKind};
use crate::policy::{
    self, categorical_kl, sample_group, EncodedInput, KlDirection, Objective, PolicyGrad, PolicyParams, PolicySnapshot, SampledOutput,
};
use crate::rewards::{has_reward, task_reward, RewardConfig};
use crate::seed::{self, Rng};
use crate::vocab::Vocabulary;

/// Which policy the KL penalty is measured against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KlAnchor {
    /// The sampling snapshot `π_old` of the current step.
    Snapshot,
    /// The policy RFT started from.
    #[default]
    Initial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrpoConfig {
    /// Outputs sampled per input (`G`).
    pub group_size: usize,
    /// Clip range `ε`.
    pub clip_epsilon: f64,
    /// KL weight `β`.
    pub kl_beta: f64,
    pub std_epsilon: f64,
    pub iterations: usize,
    /// Inputs per iteration.
    pub batch_size: usize,
    /// Gradient steps taken on each batch of rollouts.
    pub inner_steps: usize,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
    pub kl_direction: KlDirection,
    pub kl_anchor: KlAnchor,
    /// Size of the RFT subset relative to the SFT split.
    pub rft_fraction: f64,
    /// Fraction of the RFT subset actually used (data-efficiency ablation).
    pub data_fraction: f64,
    /// Tasks eligible for RFT; each needs a reward function.
    pub tasks: Vec<Task>,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            clip_epsilon: 0.2,
            kl_beta: 0.2,
            std_epsilon: 1e-8,
            iterations: 250,
            batch_size: 32,
            inner_steps: 1,
            seed: 0,
            optimizer: OptimizerConfig { kind: OptimizerKind::Sgd, learning_rate: 0.02, clip_norm: 1.0, ..OptimizerConfig::default() },
            kl_direction: KlDirection::PolicyToReference,
            kl_anchor: KlAnchor::Initial,
            rft_fraction: 0.01,
            data_fraction: 1.0,
            tasks: vec![Task::Diagnosis, Task::Grounding],
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(format!("rft.{m}")));
        if self.group_size < 2 {
            return err(format!("group_size: {} < 2", self.group_size));
        }
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return err(format!("clip_epsilon: {} not in (0, 1)", self.clip_epsilon));
        }
        if !(self.kl_beta >= 0.0) {
            return err(format!("kl_beta: {} is negative", self.kl_beta));
        }
        if !(self.std_epsilon > 0.0) {
            return err("std_epsilon: must be positive".into());
        }
        if self.batch_size == 0 || self.inner_steps == 0 {
            return err("batch_size/inner_steps: must be positive".into());
        }
        if !(self.rft_fraction > 0.0 && self.rft_fraction <= 1.0) {
            return err(format!("rft_fraction: {} not in (0, 1]", self.rft_fraction));
        }
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            return err(format!("data_fraction: {} not in (0, 1]", self.data_fraction));
        }
        if let Some(t) = self.tasks.iter().find(|t| !has_reward(**t)) {
            return err(format!("tasks: no reward function for task {t}"));
        }
        if self.tasks.is_empty() {
            return err("tasks: empty".into());
        }
        self.optimizer.validate("rft.optimizer")
    }
}

/// Raw and normalised group-relative advantages.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageSet {
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
}

/// `A_i = r_i - mean(r)`, `Â_i = A_i / (std(r) + std_epsilon)` with the
/// population standard deviation.
pub fn group_advantages(rewards: &[f64], std_epsilon: f64) -> AdvantageSet {
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let raw: Vec<f64> = rewards.iter().map(|r| r - mean).collect();
    let std = (raw.iter().map(|a| a * a).sum::<f64>() / n).sqrt();
    let normalized = raw.iter().map(|a| a / (std + std_epsilon)).collect();
    AdvantageSet { raw, normalized }
}

/// `min(r·Â, clip(r, 1-ε, 1+ε)·Â)`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, epsilon: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - epsilon, 1.0 + epsilon) * advantage)
}

/// One input with its scored group of outputs.
#[derive(Debug, Clone)]
pub struct GroupRollout {
    pub input: EncodedInput,
    /// Sampled from `snapshot`; `log_probs` are the `π_old` values.
    pub outputs: Vec<SampledOutput>,
    pub rewards: Vec<f64>,
    pub snapshot: PolicySnapshot,
    /// KL reference; the snapshot unless anchored elsewhere.
    pub reference: PolicySnapshot,
}

impl GroupRollout {
    pub fn validate(&self) -> Result<()> {
        if self.outputs.len() < 2 || self.outputs.len() != self.rewards.len() {
            return Err(Error::Argument(format!(
                "rollout has {} outputs and {} rewards; need equal counts of at least 2",
                self.outputs.len(),
                self.rewards.len()
            )));
        }
        if self.rewards.iter().any(|r| !r.is_finite()) {
            return Err(Error::NonFinite("rollout rewards".into()));
        }
        if self.outputs.iter().any(|o| o.tokens.is_empty() || o.tokens.len() != o.log_probs.len()) {
            return Err(Error::Argument("rollout output without per-token log-probabilities".into()));
        }
        Ok(())
    }
}

/// Loss value and the quantities reported alongside it.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LossParts {
    pub loss: f64,
    /// Mean clipped surrogate (before negation).
    pub surrogate: f64,
    /// Mean per-token KL.
    pub kl: f64,
    pub mean_ratio: f64,
    /// Fraction of tokens with `|r - 1| > ε`.
    pub clip_fraction: f64,
}

#[derive(Default)]
struct Acc {
    surrogate: f64,
    kl: f64,
    ratio_sum: f64,
    clipped: usize,
    tokens: usize,
}

fn rollout_terms(
    params: &PolicyParams,
    rollout: &GroupRollout,
    index: usize,
    cfg: &GrpoConfig,
    n_rollouts: usize,
    grad: Option<&mut PolicyGrad>,
) -> Result<Acc> {
    rollout.validate()?;
    let adv = group_advantages(&rollout.rewards, cfg.std_epsilon).normalized;
    let g = rollout.outputs.len();
    let eps = cfg.clip_epsilon;
    let mut acc = Acc::default();
    let mut grad = grad;
    for (out, &a) in rollout.outputs.iter().zip(&adv) {
        let tokens = out.tokens.as_slice();
        let coef = 1.0 / (n_rollouts * g * tokens.len()) as f64;
        let lp = policy::step_log_distributions(params, &rollout.input, tokens)?;
        let lq = policy::step_log_distributions(rollout.reference.params(), &rollout.input, tokens)?;
        let mut dlogits = Vec::with_capacity(tokens.len());
        for (t, &tok) in tokens.iter().enumerate() {
            let (p_log, q_log) = (&lp[t], &lq[t]);
            let ratio = (p_log[tok] - out.log_probs[t]).exp();
            if !ratio.is_finite() {
                return Err(Error::NonFinite(format!("probability ratio of rollout {index}")));
            }
            let unclipped = ratio * a;
            let clipped = ratio.clamp(1.0 - eps, 1.0 + eps) * a;
            acc.surrogate += coef * unclipped.min(clipped);
            acc.ratio_sum += ratio;
            acc.tokens += 1;
            if (ratio - 1.0).abs() > eps {
                acc.clipped += 1;
            }
            let kl = match cfg.kl_direction {
                KlDirection::PolicyToReference => categorical_kl(p_log, q_log),
                KlDirection::ReferenceToPolicy => categorical_kl(q_log, p_log),
            };
            acc.kl += coef * kl;
            if grad.is_some() {
                let p: Vec<f64> = p_log.iter().map(|l| l.exp()).collect();
                let mut d = vec![0.0; p.len()];
                if unclipped <= clipped {
                    // d r / d z = r (onehot - p)
                    let s = -coef * a * ratio;
                    for (dj, pj) in d.iter_mut().zip(&p) {
                        *dj -= s * pj;
                    }
                    d[tok] += s;
                }
                let b = cfg.kl_beta * coef;
                if b != 0.0 {
                    match cfg.kl_direction {
                        KlDirection::PolicyToReference => {
                            let raw: f64 = p.iter().zip(p_log.iter().zip(q_log)).map(|(pj, (l, m))| pj * (l - m)).sum();
                            for (j, dj) in d.iter_mut().enumerate() {
                                *dj += b * p[j] * (p_log[j] - q_log[j] - raw);
                            }
                        }
                        KlDirection::ReferenceToPolicy => {
                            for (j, dj) in d.iter_mut().enumerate() {
                                *dj += b * (p[j] - q_log[j].exp());
                            }
                        }
                    }
                }
                dlogits.push(d);
            }
        }
        if let Some(grad) = grad.as_deref_mut() {
            policy::sequence_backward(params, &rollout.input, tokens, &dlogits, grad)?;
        }
    }
    Ok(acc)
}

fn assemble(parts: &[Acc], beta: f64) -> LossParts {
    let mut total = Acc::default();
    for p in parts {
        total.surrogate += p.surrogate;
        total.kl += p.kl;
        total.ratio_sum += p.ratio_sum;
        total.clipped += p.clipped;
        total.tokens += p.tokens;
    }
    let n = total.tokens.max(1) as f64;
    LossParts {
        loss: -total.surrogate + beta * total.kl,
        surrogate: total.surrogate,
        kl: total.kl,
        mean_ratio: total.ratio_sum / n,
        clip_fraction: total.clipped as f64 / n,
    }
}

/// GRPO loss over a set of rollouts, with its diagnostics.
pub fn grpo_loss(params: &PolicyParams, rollouts: &[GroupRollout], cfg: &GrpoConfig) -> Result<LossParts> {
    if rollouts.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let parts =
        rollouts.par_iter().enumerate().map(|(k, r)| rollout_terms(params, r, k, cfg, rollouts.len(), None)).collect::<Result<Vec<_>>>()?;
    Ok(assemble(&parts, cfg.kl_beta))
}

/// The GRPO loss as a differentiable objective.
pub struct GrpoObjective<'a> {
    pub rollouts: &'a [GroupRollout],
    pub config: &'a GrpoConfig,
}

impl Objective for GrpoObjective<'_> {
    fn loss_and_grad(&self, params: &PolicyParams, grad: &mut PolicyGrad) -> Result<f64> {
        if self.rollouts.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let n = self.rollouts.len();
        let parts = self
            .rollouts
            .par_iter()
            .enumerate()
            .map(|(k, r)| {
                let mut g = PolicyGrad::zeros(params);
                let acc = rollout_terms(params, r, k, self.config, n, Some(&mut g))?;
                Ok((acc, g))
            })
            .collect::<Result<Vec<_>>>()?;
        for (_, g) in &parts {
            grad.add_assign(g);
        }
        let accs: Vec<Acc> = parts.into_iter().map(|(a, _)| a).collect();
        Ok(assemble(&accs, self.config.kl_beta).loss)
    }
}

/// An RFT input: the sample (for its reward) and its encoding.
#[derive(Debug, Clone)]
pub struct RftExample {
    pub sample: TaskSample,
    pub input: EncodedInput,
}

pub fn prepare_rft_examples(params: &PolicyParams, split: &DatasetSplit, patch: usize) -> Result<Vec<RftExample>> {
    split.samples.iter().map(|s| Ok(RftExample { sample: s.clone(), input: EncodedInput::new(params, s, patch)? })).collect()
}

/// Picks `⌈rft_fraction·|split|⌉` samples of the eligible tasks, allocated
/// over their (task, label) strata in proportion to the SFT split and drawn
/// only from records with reliable annotations; then keeps `data_fraction`
/// of them.
pub fn select_rft_subset(split: &DatasetSplit, cfg: &GrpoConfig) -> Result<DatasetSplit> {
    cfg.validate()?;
    let eligible: Vec<usize> = (0..split.len()).filter(|&i| cfg.tasks.contains(&split.samples[i].task)).collect();
    let pool = split.subset(&eligible, "rft-tasks".into());
    if !pool.samples.iter().any(|s| s.reliable) {
        return Err(Error::Argument("no reliable samples of the RFT tasks; cannot form groups".into()));
    }
    let target = ((cfg.rft_fraction * split.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    let chosen = stratified_sample(&pool, target.min(pool.len()), |s| s.reliable, seed::derive(cfg.seed, "rft-subset"))?;
    let subset = pool.subset(&chosen, format!("rft_fraction={},reliable", cfg.rft_fraction));
    if cfg.data_fraction == 1.0 {
        return Ok(subset);
    }
    let kept = fraction_indices(&subset, cfg.data_fraction, seed::derive(cfg.seed, "rft-data-fraction"))?;
    Ok(subset.subset(&kept, format!("data_fraction={}", cfg.data_fraction)))
}

/// Shared, read-only state of an RFT run.
pub struct RftContext<'a> {
    pub vocab: &'a Vocabulary,
    pub rewards: &'a RewardConfig,
    /// KL reference for [`KlAnchor::Initial`].
    pub initial: PolicySnapshot,
}

/// Per-step values written to the diagnostics CSV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepDiagnostics {
    pub mean_reward: f64,
    /// Ratio, KL and clip fraction on the step's rollouts after the update.
    pub mean_ratio: f64,
    pub kl: f64,
    pub clip_fraction: f64,
}

/// Samples and scores one group per input from the current parameters.
pub fn collect_rollouts(
    params: &PolicyParams,
    batch: &[RftExample],
    cfg: &GrpoConfig,
    ctx: &RftContext,
    stream: u64,
) -> Result<Vec<GroupRollout>> {
    let snapshot = PolicySnapshot::of(params);
    let reference = match cfg.kl_anchor {
        KlAnchor::Snapshot => snapshot.clone(),
        KlAnchor::Initial => ctx.initial.clone(),
    };
    batch
        .par_iter()
        .enumerate()
        .map(|(j, ex)| {
            let mut rng = seed::rng(seed::derive_indexed(stream, "group", j as u64));
            let outputs = sample_group(snapshot.params(), &ex.input, cfg.group_size, ctx.vocab.eos(), &mut rng)?;
            let rewards =
                outputs.iter().map(|o| task_reward(&ex.sample, &ctx.vocab.decode(&o.tokens), ctx.rewards)).collect::<Result<Vec<_>>>()?;
            Ok(GroupRollout { input: ex.input.clone(), outputs, rewards, snapshot: snapshot.clone(), reference: reference.clone() })
        })
        .collect()
}

/// Snapshot, sample, score, then descend the GRPO loss.
pub fn grpo_step(
    params: &mut PolicyParams,
    batch: &[RftExample],
    cfg: &GrpoConfig,
    ctx: &RftContext,
    optimizer: &mut Optimizer,
    rng: &mut Rng,
) -> Result<StepDiagnostics> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if let Some(s) = batch.iter().find(|ex| !has_reward(ex.sample.task)) {
        return Err(Error::Config(format!("rft.tasks: no reward function for task {}", s.sample.task)));
    }
    let rollouts = collect_rollouts(params, batch, cfg, ctx, rng.gen())?;
    let total: f64 = rollouts.iter().flat_map(|r| &r.rewards).sum();
    let mean_reward = total / (rollouts.len() * cfg.group_size) as f64;
    let objective = GrpoObjective { rollouts: &rollouts, config: cfg };
    for _ in 0..cfg.inner_steps {
        let (_, grad) = policy::grad_trainable(params, &objective)?;
        optimizer.step(params, &grad)?;
    }
    let after = grpo_loss(params, &rollouts, cfg)?;
    Ok(StepDiagnostics { mean_reward, mean_ratio: after.mean_ratio, kl: after.kl, clip_fraction: after.clip_fraction })
}

#[derive(Debug, Clone)]
pub struct RftOutcome {
    pub params: PolicyParams,
    pub diagnostics: Vec<StepDiagnostics>,
}

/// Runs `cfg.iterations` GRPO steps over shuffled passes through `subset`.
pub fn train_rft(
    initial: &PolicyParams,
    subset: &[RftExample],
    cfg: &GrpoConfig,
    vocab: &Vocabulary,
    rewards: &RewardConfig,
) -> Result<RftOutcome> {
    cfg.validate()?;
    rewards.validate()?;
    if subset.is_empty() {
        return Err(Error::Argument("RFT subset is empty; cannot form groups".into()));
    }
    let ctx = RftContext { vocab, rewards, initial: PolicySnapshot::of(initial) };
    let mut params = initial.clone();
    let mut optimizer = Optimizer::new(cfg.optimizer.clone(), &params);
    let mut batch_rng = seed::rng_for(cfg.seed, "rft-batches");
    let mut rollout_rng = seed::rng_for(cfg.seed, "rft-rollouts");
    let mut order: Vec<usize> = (0..subset.len()).collect();
    let mut cursor = order.len();
    let mut diagnostics = Vec::with_capacity(cfg.iterations);
    for step in 0..cfg.iterations {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(subset.len()) {
            if cursor == order.len() {
                order.shuffle(&mut batch_rng);
                cursor = 0;
            }
            batch.push(subset[order[cursor]].clone());
            cursor += 1;
        }
        let d = grpo_step(&mut params, &batch, cfg, &ctx, &mut optimizer, &mut rollout_rng).map_err(|e| e.at_step(step))?;
        log::debug!("rft step {step}: reward {:.4} ratio {:.4} kl {:.5} clip {:.3}", d.mean_reward, d.mean_ratio, d.kl, d.clip_fraction);
        diagnostics.push(d);
    }
    Ok(RftOutcome { params, diagnostics })
}

/// Writes `step,mean_reward,mean_ratio,kl,clip_fraction` rows.
pub fn write_diagnostics_csv(path: &Path, rows: &[StepDiagnostics]) -> Result<()> {
    let mut out = String::from("step,mean_reward,mean_ratio,kl,clip_fraction\n");
    for (i, d) in rows.iter().enumerate() {
        out.push_str(&format!("{i},{},{},{},{}\n", d.mean_reward, d.mean_ratio, d.kl, d.clip_fraction));
    }
    std::fs::File::create(path).and_then(|mut f| f.write_all(out.as_bytes())).map_err(|e| Error::io(path, e))
}
