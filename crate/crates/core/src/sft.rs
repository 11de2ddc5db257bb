//! Supervised fine-tuning: teacher-forced negative log-likelihood of the gold
//! response, descended on the adapters and connectors only.

use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::DatasetSplit;
use crate::error::{Error, Result};
use crate::optim::{Optimizer, OptimizerConfig, OptimizerKind};
use crate::policy::{self, EncodedInput, Objective, PolicyGrad, PolicyParams};
use crate::seed;
use crate::vocab::{TokenSequence, Vocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SftConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            steps: 3000,
            seed: 0,
            optimizer: OptimizerConfig { kind: OptimizerKind::Adam, learning_rate: 0.005, clip_norm: 5.0, ..OptimizerConfig::default() },
        }
    }
}

impl SftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("sft.batch_size: must be positive".into()));
        }
        self.optimizer.validate("sft.optimizer")
    }
}

/// A sample's encoded inputs paired with its tokenized gold response.
#[derive(Debug, Clone)]
pub struct SftExample {
    pub input: EncodedInput,
    pub gold: TokenSequence,
}

/// Encodes every sample of `split` for teacher forcing.
pub fn prepare_examples(params: &PolicyParams, vocab: &Vocabulary, split: &DatasetSplit, patch: usize) -> Result<Vec<SftExample>> {
    split
        .samples
        .iter()
        .map(|s| {
            let gold = vocab.encode_response(&s.gold_response())?;
            if gold.len() > params.dims.max_len {
                return Err(Error::Config(format!(
                    "policy.max_len: gold response has {} tokens, limit is {}",
                    gold.len(),
                    params.dims.max_len
                )));
            }
            Ok(SftExample { input: EncodedInput::new(params, s, patch)?, gold })
        })
        .collect()
}

/// `-(1/N) Σ log p(gold | input)` over the batch.
pub fn sft_loss(params: &PolicyParams, batch: &[SftExample]) -> Result<f64> {
    SftObjective { batch }.loss(params)
}

/// The SFT loss as a differentiable objective.
pub struct SftObjective<'a> {
    pub batch: &'a [SftExample],
}

impl Objective for SftObjective<'_> {
    fn loss_and_grad(&self, params: &PolicyParams, grad: &mut PolicyGrad) -> Result<f64> {
        if self.batch.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let n = self.batch.len() as f64;
        let parts: Vec<(f64, PolicyGrad)> = self
            .batch
            .par_iter()
            .map(|ex| {
                let tokens = ex.gold.as_slice();
                let dists = policy::step_log_distributions(params, &ex.input, tokens)?;
                let mut nll = 0.0;
                let dlogits: Vec<Vec<f64>> = dists
                    .iter()
                    .zip(tokens)
                    .map(|(lp, &tok)| {
                        nll -= lp[tok];
                        let mut d: Vec<f64> = lp.iter().map(|l| l.exp() / n).collect();
                        d[tok] -= 1.0 / n;
                        d
                    })
                    .collect();
                let mut g = PolicyGrad::zeros(params);
                policy::sequence_backward(params, &ex.input, tokens, &dlogits, &mut g)?;
                Ok((nll, g))
            })
            .collect::<Result<_>>()?;
        let mut total = 0.0;
        for (nll, g) in &parts {
            total += nll;
            grad.add_assign(g);
        }
        Ok(total / n)
    }
}

/// One update on `batch`; returns the loss before the update.
pub fn sft_step(params: &mut PolicyParams, batch: &[SftExample], optimizer: &mut Optimizer) -> Result<f64> {
    let (loss, grad) = policy::grad_trainable(params, &SftObjective { batch })?;
    optimizer.step(params, &grad)?;
    Ok(loss)
}

#[derive(Debug, Clone)]
pub struct SftOutcome {
    pub params: PolicyParams,
    /// Pre-update batch loss of every step.
    pub losses: Vec<f64>,
}

/// Runs `config.steps` updates over shuffled passes through `examples`.
pub fn train_sft(initial: &PolicyParams, examples: &[SftExample], config: &SftConfig) -> Result<SftOutcome> {
    config.validate()?;
    if examples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut params = initial.clone();
    let mut optimizer = Optimizer::new(config.optimizer.clone(), &params);
    let mut rng = seed::rng_for(config.seed, "sft-batches");
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(config.steps);
    let mut batch = Vec::with_capacity(config.batch_size);
    for step in 0..config.steps {
        batch.clear();
        while batch.len() < config.batch_size.min(examples.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(examples[order[cursor]].clone());
            cursor += 1;
        }
        let loss = sft_step(&mut params, &batch, &mut optimizer).map_err(|e| e.at_step(step))?;
        log::debug!("sft step {step}: loss {loss:.6}");
        losses.push(loss);
    }
    Ok(SftOutcome { params, losses })
}

/// Writes `step,loss` rows.
pub fn write_loss_csv(path: &Path, losses: &[f64]) -> Result<()> {
    let mut out = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        out.push_str(&format!("{i},{l}\n"));
    }
    std::fs::File::create(path).and_then(|mut f| f.write_all(out.as_bytes())).map_err(|e| Error::io(path, e))
}
