//! Autoregressive categorical policy over the output vocabulary.
//!
//! Logits at step `t` are a linear read-out of the decoding context through
//! the effective head `W₀ + (α/r)·B·A`. `W₀` and the token embedding table are
//! frozen; only the low-rank factors and the connectors train.
//!
//! The decoding context has one image slot per output position: the projected
//! features `[ê, p̂]` are written into slot `t` and the other slots are zero.
//! This lets a linear head read different coordinates at different steps
//! from the same image. The remaining entries are the instruction embedding,
//! the embedding of the previous token and a constant 1.

mod checkpoint;
mod grad;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::TaskSample;
use crate::encoders::{
    apply_connectors, encode_disease, encode_pixel, ConnectorParams, DiseaseEmbedding, PixelFeatureMap, DISEASE_DIM, PIXEL_CHANNELS,
};
use crate::error::{Error, Result};
use crate::seed::{self, Rng};
use crate::text::normalize_and_tokenize;
use crate::vocab::{TokenSequence, Vocabulary};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader, CHECKPOINT_VERSION};
pub(crate) use grad::step_log_distributions;
pub use grad::{grad_trainable, sequence_backward, Objective, PolicyGrad};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyDims {
    pub vocab: usize,
    pub d_e: usize,
    pub channels: usize,
    pub d_m: usize,
    /// Number of pixel-map cells.
    pub cells: usize,
    pub max_len: usize,
    pub d_tok: usize,
    pub rank: usize,
}

impl PolicyDims {
    /// Width of one image slot: `ê` plus every projected cell.
    pub fn slot_width(&self) -> usize {
        self.d_m * (1 + self.cells)
    }

    pub fn tail_offset(&self) -> usize {
        self.max_len * self.slot_width()
    }

    pub fn tail_width(&self) -> usize {
        2 * self.d_tok + 1
    }

    pub fn context_width(&self) -> usize {
        self.tail_offset() + self.tail_width()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub rank: usize,
    pub alpha: f64,
    pub max_len: usize,
    pub d_tok: usize,
    /// Standard deviation of the frozen base head.
    pub base_scale: f64,
    /// Standard deviation of the initial `A` factor (`B` starts at zero).
    pub adapter_scale: f64,
    /// Standard deviation of the initial connector weights.
    pub connector_scale: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self { rank: 8, alpha: 16.0, max_len: 8, d_tok: 256, base_scale: 0.02, adapter_scale: 0.1, connector_scale: 0.1 }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(format!("policy.{m}")));
        if self.rank < 1 {
            return err("rank: must be at least 1");
        }
        if !(self.alpha > 0.0) {
            return err("alpha: must be positive");
        }
        if self.max_len < 2 {
            return err("max_len: must be at least 2");
        }
        if self.d_tok < 1 {
            return err("d_tok: must be at least 1");
        }
        if !(self.base_scale >= 0.0 && self.adapter_scale >= 0.0 && self.connector_scale >= 0.0) {
            return err("scales: must be non-negative");
        }
        Ok(())
    }
}

/// Frozen base head and token embeddings plus trainable adapters and connectors.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub dims: PolicyDims,
    pub alpha: f64,
    pub seed: u64,
    /// Frozen, `context_width × vocab`, row-major.
    pub base: Vec<f64>,
    /// Frozen, `vocab × d_tok`, row-major.
    pub token_embedding: Vec<f64>,
    /// Trainable, `context_width × rank`.
    pub lora_b: Vec<f64>,
    /// Trainable, `rank × vocab`.
    pub lora_a: Vec<f64>,
    pub connectors: ConnectorParams,
}

fn gaussian(len: usize, scale: f64, rng: &mut Rng) -> Vec<f64> {
    (0..len).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

impl PolicyParams {
    pub fn init(dims: PolicyDims, config: &PolicyConfig, seed: u64) -> Self {
        let d = dims.context_width();
        let mut rng = seed::rng_for(seed, "policy-init");
        let base = gaussian(d * dims.vocab, config.base_scale, &mut rng);
        let token_embedding = gaussian(dims.vocab * dims.d_tok, 1.0 / (dims.d_tok as f64).sqrt(), &mut rng);
        let lora_a = gaussian(dims.rank * dims.vocab, config.adapter_scale, &mut rng);
        let connectors = ConnectorParams::random(dims.d_e, dims.channels, dims.d_m, config.connector_scale, &mut rng);
        Self { dims, alpha: config.alpha, seed, base, token_embedding, lora_b: vec![0.0; d * dims.rank], lora_a, connectors }
    }

    /// Parameters whose every entry is zero; the policy is uniform.
    pub fn zeros(dims: PolicyDims, alpha: f64) -> Self {
        let d = dims.context_width();
        Self {
            dims,
            alpha,
            seed: 0,
            base: vec![0.0; d * dims.vocab],
            token_embedding: vec![0.0; dims.vocab * dims.d_tok],
            lora_b: vec![0.0; d * dims.rank],
            lora_a: vec![0.0; dims.rank * dims.vocab],
            connectors: ConnectorParams::zeros(dims.d_e, dims.channels, dims.d_m),
        }
    }

    pub fn lora_scale(&self) -> f64 {
        self.alpha / self.dims.rank as f64
    }

    /// `W₀ + (α/r)·B·A`, materialized.
    pub fn effective_head(&self) -> Vec<f64> {
        let (v, r, s) = (self.dims.vocab, self.dims.rank, self.lora_scale());
        let mut head = self.base.clone();
        for (row, b) in head.chunks_exact_mut(v).zip(self.lora_b.chunks_exact(r)) {
            for (k, &bk) in b.iter().enumerate() {
                if bk != 0.0 {
                    for (h, a) in row.iter_mut().zip(&self.lora_a[k * v..(k + 1) * v]) {
                        *h += s * bk * a;
                    }
                }
            }
        }
        head
    }

    pub fn embedding(&self, token: usize) -> &[f64] {
        let d = self.dims.d_tok;
        &self.token_embedding[token * d..(token + 1) * d]
    }

    /// Deterministic frozen vector for an instruction word: the scaled sum of
    /// hashed vectors for the whole word and its character trigrams, so words
    /// sharing a stem land close together.
    pub fn word_vector(&self, word: &str) -> Vec<f64> {
        let marked: Vec<char> = format!("<{word}>").chars().collect();
        let mut units = vec![marked.iter().collect::<String>()];
        units.extend(marked.windows(3).map(|w| w.iter().collect::<String>()));
        let mut out = vec![0.0; self.dims.d_tok];
        for unit in &units {
            let mut rng = seed::rng(seed::derive(self.seed, &format!("subword:{unit}")));
            let v = gaussian(self.dims.d_tok, 1.0 / (self.dims.d_tok as f64).sqrt(), &mut rng);
            out.iter_mut().zip(v).for_each(|(o, x)| *o += x);
        }
        let scale = (units.len() as f64).sqrt();
        out.iter_mut().for_each(|o| *o /= scale);
        out
    }

    /// Mean of the word vectors of the normalized instruction.
    pub fn instruction_embedding(&self, instruction: &str) -> Vec<f64> {
        let words = normalize_and_tokenize(instruction);
        let mut out = vec![0.0; self.dims.d_tok];
        if words.is_empty() {
            return out;
        }
        for w in &words {
            for (o, v) in out.iter_mut().zip(self.word_vector(w)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= words.len() as f64);
        out
    }

    /// Raw bytes of the frozen blocks (base head, then token embeddings).
    pub fn frozen_bytes(&self) -> Vec<u8> {
        self.base.iter().chain(&self.token_embedding).flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn num_trainable(&self) -> usize {
        self.connectors.num_params() + self.lora_b.len() + self.lora_a.len()
    }

    /// Trainable parameters in the fixed order: connectors (disease weight,
    /// disease bias, pixel weight, pixel bias), then `B`, then `A`.
    pub fn trainable_flat(&self) -> Vec<f64> {
        let c = &self.connectors;
        c.disease_weight
            .iter()
            .chain(&c.disease_bias)
            .chain(&c.pixel_weight)
            .chain(&c.pixel_bias)
            .chain(&self.lora_b)
            .chain(&self.lora_a)
            .copied()
            .collect()
    }

    pub fn trainable_slices_mut(&mut self) -> [&mut [f64]; 6] {
        let c = &mut self.connectors;
        [&mut c.disease_weight, &mut c.disease_bias, &mut c.pixel_weight, &mut c.pixel_bias, &mut self.lora_b, &mut self.lora_a]
    }

    pub fn set_trainable_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_trainable() {
            return Err(Error::Dimension(format!("{} trainable values supplied, policy has {}", values.len(), self.num_trainable())));
        }
        let mut offset = 0;
        for block in self.trainable_slices_mut() {
            block.copy_from_slice(&values[offset..offset + block.len()]);
            offset += block.len();
        }
        Ok(())
    }
}

/// Immutable copy of the parameters at a point in training.
#[derive(Debug, Clone)]
pub struct PolicySnapshot(std::sync::Arc<PolicyParams>);

impl PolicySnapshot {
    pub fn of(params: &PolicyParams) -> Self {
        Self(std::sync::Arc::new(params.clone()))
    }

    pub fn params(&self) -> &PolicyParams {
        &self.0
    }
}

/// Parameter-independent encoding of one sample's inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedInput {
    pub disease: DiseaseEmbedding,
    pub pixel: PixelFeatureMap,
    pub instruction: Vec<f64>,
}

impl EncodedInput {
    pub fn new(params: &PolicyParams, sample: &TaskSample, patch: usize) -> Result<Self> {
        Self::with_instruction(params, sample, &sample.instruction, patch)
    }

    pub fn with_instruction(params: &PolicyParams, sample: &TaskSample, instruction: &str, patch: usize) -> Result<Self> {
        let pixel = encode_pixel(&sample.image, patch)?;
        if pixel.cells() != params.dims.cells {
            return Err(Error::Dimension(format!("image yields {} pixel cells, policy expects {}", pixel.cells(), params.dims.cells)));
        }
        Ok(Self { disease: encode_disease(&sample.image), pixel, instruction: params.instruction_embedding(instruction) })
    }
}

/// Context `h_t` for one decoding step.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodingContext {
    /// Output position; selects the image slot.
    pub slot: usize,
    /// `[ê, p̂]`, `slot_width` entries.
    pub image: Vec<f64>,
    /// `[instruction, previous-token embedding, 1]`.
    pub tail: Vec<f64>,
}

impl DecodingContext {
    /// Materializes the full context vector.
    pub fn dense(&self, dims: &PolicyDims) -> Vec<f64> {
        let mut x = vec![0.0; dims.context_width()];
        let off = self.slot * dims.slot_width();
        x[off..off + self.image.len()].copy_from_slice(&self.image);
        x[dims.tail_offset()..].copy_from_slice(&self.tail);
        x
    }
}

pub(crate) fn image_slot(params: &PolicyParams, input: &EncodedInput) -> Result<Vec<f64>> {
    let proj = apply_connectors(&input.disease, &input.pixel, &params.connectors)?;
    let mut image = proj.disease;
    image.extend(proj.pixel);
    Ok(image)
}

pub(crate) fn tail_vector(params: &PolicyParams, input: &EncodedInput, prev: usize) -> Vec<f64> {
    let mut tail = Vec::with_capacity(params.dims.tail_width());
    tail.extend_from_slice(&input.instruction);
    tail.extend_from_slice(params.embedding(prev));
    tail.push(1.0);
    tail
}

/// Logits and the low-rank hidden vector `u = Bᵀx` for one context.
pub(crate) fn logits_with_hidden(params: &PolicyParams, slot: usize, image: &[f64], tail: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let dims = &params.dims;
    let (v, r) = (dims.vocab, dims.rank);
    let mut logits = vec![0.0; v];
    let mut hidden = vec![0.0; r];
    let rows = (slot * dims.slot_width()..).zip(image).chain((dims.tail_offset()..).zip(tail));
    for (row, &x) in rows {
        if x == 0.0 {
            continue;
        }
        for (l, w) in logits.iter_mut().zip(&params.base[row * v..(row + 1) * v]) {
            *l += x * w;
        }
        for (h, b) in hidden.iter_mut().zip(&params.lora_b[row * r..(row + 1) * r]) {
            *h += x * b;
        }
    }
    let s = params.lora_scale();
    for (k, &u) in hidden.iter().enumerate() {
        if u != 0.0 {
            for (l, a) in logits.iter_mut().zip(&params.lora_a[k * v..(k + 1) * v]) {
                *l += s * u * a;
            }
        }
    }
    (logits, hidden)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= z);
    p
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

pub fn token_distribution(params: &PolicyParams, context: &DecodingContext) -> Vec<f64> {
    softmax(&logits_with_hidden(params, context.slot, &context.image, &context.tail).0)
}

/// Contexts for scoring `tokens` (teacher forcing).
pub fn contexts(params: &PolicyParams, input: &EncodedInput, tokens: &[usize]) -> Result<Vec<DecodingContext>> {
    check_tokens(params, tokens)?;
    let image = image_slot(params, input)?;
    let mut prev = 0;
    Ok(tokens
        .iter()
        .enumerate()
        .map(|(t, &tok)| {
            let ctx = DecodingContext { slot: t, image: image.clone(), tail: tail_vector(params, input, prev) };
            prev = tok;
            ctx
        })
        .collect())
}

fn check_tokens(params: &PolicyParams, tokens: &[usize]) -> Result<()> {
    if tokens.len() > params.dims.max_len {
        return Err(Error::Dimension(format!("sequence of {} tokens exceeds max length {}", tokens.len(), params.dims.max_len)));
    }
    TokenSequence(tokens.to_vec()).validate(params.dims.vocab)
}

/// Per-step log-probabilities of `tokens` under teacher forcing.
pub fn token_log_probs(params: &PolicyParams, input: &EncodedInput, tokens: &[usize]) -> Result<Vec<f64>> {
    check_tokens(params, tokens)?;
    let image = image_slot(params, input)?;
    let mut prev = 0;
    let mut out = Vec::with_capacity(tokens.len());
    for (t, &tok) in tokens.iter().enumerate() {
        let (logits, _) = logits_with_hidden(params, t, &image, &tail_vector(params, input, prev));
        out.push(log_softmax(&logits)[tok]);
        prev = tok;
    }
    Ok(out)
}

/// `Σ_t log p(token_t | h_t)`.
pub fn log_prob(params: &PolicyParams, input: &EncodedInput, output: &TokenSequence) -> Result<f64> {
    if output.is_empty() {
        return Err(Error::Argument("log_prob of an empty sequence".into()));
    }
    Ok(token_log_probs(params, input, output.as_slice())?.iter().sum())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledOutput {
    pub tokens: TokenSequence,
    /// Log-probability of each token under the sampling policy.
    pub log_probs: Vec<f64>,
    /// True when the sequence ended with the end token.
    pub terminated: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decoding {
    Greedy,
    Sample,
}

/// Draws one sequence, or the argmax path for [`Decoding::Greedy`].
pub fn decode(params: &PolicyParams, input: &EncodedInput, mode: Decoding, eos: usize, rng: &mut Rng) -> Result<SampledOutput> {
    let image = image_slot(params, input)?;
    let mut tokens = Vec::new();
    let mut log_probs = Vec::new();
    let mut prev = 0;
    for t in 0..params.dims.max_len {
        let (logits, _) = logits_with_hidden(params, t, &image, &tail_vector(params, input, prev));
        let lp = log_softmax(&logits);
        let tok = match mode {
            Decoding::Greedy => argmax(&lp),
            Decoding::Sample => sample_index(&lp, rng),
        };
        tokens.push(tok);
        log_probs.push(lp[tok]);
        if tok == eos {
            return Ok(SampledOutput { tokens: TokenSequence(tokens), log_probs, terminated: true });
        }
        prev = tok;
    }
    Ok(SampledOutput { tokens: TokenSequence(tokens), log_probs, terminated: false })
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

fn sample_index(log_probs: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, lp) in log_probs.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i;
        }
    }
    // rounding left a sliver of mass past the last bucket
    log_probs.iter().rposition(|lp| lp.is_finite()).unwrap_or(0)
}

/// `G` independent ancestral samples at temperature 1.
pub fn sample_group(
    params: &PolicyParams,
    input: &EncodedInput,
    group_size: usize,
    eos: usize,
    rng: &mut Rng,
) -> Result<Vec<SampledOutput>> {
    if group_size < 2 {
        return Err(Error::Argument(format!("group size {group_size} < 2 leaves no group baseline")));
    }
    (0..group_size).map(|_| decode(params, input, Decoding::Sample, eos, rng)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(π_θ ‖ π_ref)`.
    #[default]
    PolicyToReference,
    /// `KL(π_ref ‖ π_θ)`.
    ReferenceToPolicy,
}

/// Exact categorical KL `Σ p log(p/q)`.
pub fn categorical_kl(p_log: &[f64], q_log: &[f64]) -> f64 {
    p_log.iter().zip(q_log).map(|(&lp, &lq)| if lp == f64::NEG_INFINITY { 0.0 } else { lp.exp() * (lp - lq) }).sum::<f64>().max(0.0)
}

/// Mean over the steps of `output` of the exact per-step KL between the
/// policy and the reference, both conditioned on the same history.
pub fn kl_divergence(
    params: &PolicyParams,
    reference: &PolicySnapshot,
    input: &EncodedInput,
    output: &TokenSequence,
    direction: KlDirection,
) -> Result<f64> {
    let tokens = output.as_slice();
    if tokens.is_empty() {
        return Ok(0.0);
    }
    check_tokens(params, tokens)?;
    let reference = reference.params();
    let (img_p, img_q) = (image_slot(params, input)?, image_slot(reference, input)?);
    let mut prev = 0;
    let mut total = 0.0;
    for (t, &tok) in tokens.iter().enumerate() {
        let lp = log_softmax(&logits_with_hidden(params, t, &img_p, &tail_vector(params, input, prev)).0);
        let lq = log_softmax(&logits_with_hidden(reference, t, &img_q, &tail_vector(reference, input, prev)).0);
        total += match direction {
            KlDirection::PolicyToReference => categorical_kl(&lp, &lq),
            KlDirection::ReferenceToPolicy => categorical_kl(&lq, &lp),
        };
        prev = tok;
    }
    Ok(total / tokens.len() as f64)
}

/// Dimensions for a given vocabulary, image grid and patch size.
pub fn dims_for(vocab: &Vocabulary, height: usize, width: usize, patch: usize, d_m: usize, config: &PolicyConfig) -> Result<PolicyDims> {
    if patch == 0 || !height.is_multiple_of(patch) || !width.is_multiple_of(patch) {
        return Err(Error::Config(format!("encoder.patch: {height}x{width} grid is not divisible by patch {patch}")));
    }
    let cells = (height / patch) * (width / patch);
    if cells < 4 {
        return Err(Error::Config(format!("encoder.patch: pixel map has {cells} cells, need at least 4")));
    }
    if config.rank >= vocab.len().min(d_m * (1 + cells)) {
        return Err(Error::Config(format!("policy.rank: {} is not below the head dimensions", config.rank)));
    }
    Ok(PolicyDims {
        vocab: vocab.len(),
        d_e: DISEASE_DIM,
        channels: PIXEL_CHANNELS,
        d_m,
        cells,
        max_len: config.max_len,
        d_tok: config.d_tok,
        rank: config.rank,
    })
}

#[cfg(test)]
mod tests;
