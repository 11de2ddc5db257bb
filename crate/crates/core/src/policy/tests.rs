use std::sync::Arc;

use rand::Rng as _;

use super::*;
use crate::data::{GridImage, Task, TaskSample};
use crate::seed;

pub(crate) fn small_dims(vocab: usize) -> PolicyDims {
    PolicyDims { vocab, d_e: DISEASE_DIM, channels: PIXEL_CHANNELS, d_m: 4, cells: 4, max_len: 4, d_tok: 3, rank: 2 }
}

pub(crate) fn random_params(dims: PolicyDims, seed_value: u64) -> PolicyParams {
    let config = PolicyConfig { base_scale: 0.5, adapter_scale: 0.5, connector_scale: 0.5, ..PolicyConfig::default() };
    let mut p = PolicyParams::init(dims, &config, seed_value);
    let mut rng = seed::rng(seed_value ^ 0xb);
    p.lora_b.iter_mut().for_each(|b| *b = 0.3 * rng.gen_range(-1.0..1.0));
    p.connectors.disease_bias.iter_mut().for_each(|b| *b = rng.gen_range(-0.5..0.5));
    p.connectors.pixel_bias.iter_mut().for_each(|b| *b = rng.gen_range(-0.5..0.5));
    p
}

pub(crate) fn random_input(params: &PolicyParams, seed_value: u64) -> EncodedInput {
    let mut rng = seed::rng(seed_value);
    let data = (0..64).map(|_| rng.gen_range(0.0..1.0)).collect();
    let sample = TaskSample {
        task: Task::Diagnosis,
        image: Arc::new(GridImage::new(8, 8, data).unwrap()),
        instruction: "Analyze the given ct image for diagnosis.".into(),
        gold_label: Some(0),
        gold_box: None,
        gold_answer: None,
        closed_options: None,
        modality: None,
        reliable: true,
    };
    EncodedInput::new(params, &sample, 4).unwrap()
}

fn naive_softmax(logits: &[f64]) -> Vec<f64> {
    let z: f64 = logits.iter().map(|l| l.exp()).sum();
    logits.iter().map(|l| l.exp() / z).collect()
}

fn dense_logits(params: &PolicyParams, ctx: &DecodingContext) -> Vec<f64> {
    let x = ctx.dense(&params.dims);
    let head = params.effective_head();
    let v = params.dims.vocab;
    (0..v).map(|j| x.iter().enumerate().map(|(i, xi)| xi * head[i * v + j]).sum()).collect()
}

#[test]
fn zero_params_give_uniform_distribution() {
    let params = PolicyParams::zeros(small_dims(10), 4.0);
    let input = random_input(&params, 1);
    for ctx in contexts(&params, &input, &[3, 4, 5]).unwrap() {
        assert!(token_distribution(&params, &ctx).iter().all(|&p| p == 0.1));
    }
}

#[test]
fn constant_logit_shift_leaves_distribution_unchanged() {
    let params = random_params(small_dims(9), 2);
    let input = random_input(&params, 2);
    let ctx = contexts(&params, &input, &[1]).unwrap().remove(0);
    let before = token_distribution(&params, &ctx);
    let mut shifted = params.clone();
    // the last context entry is the constant 1
    let row = params.dims.context_width() - 1;
    let v = params.dims.vocab;
    shifted.base[row * v..(row + 1) * v].iter_mut().for_each(|w| *w += 3.25);
    let after = token_distribution(&shifted, &ctx);
    for (a, b) in before.iter().zip(&after) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn distribution_matches_dense_effective_head() {
    for s in 0..5 {
        let params = random_params(small_dims(11), 10 + s);
        let input = random_input(&params, 20 + s);
        for ctx in contexts(&params, &input, &[2, 7, 1, 9]).unwrap() {
            let p = token_distribution(&params, &ctx);
            let oracle = naive_softmax(&dense_logits(&params, &ctx));
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (a, b) in p.iter().zip(&oracle) {
                assert!(*a > 0.0);
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }
}

#[test]
fn zero_b_means_base_policy() {
    let mut params = random_params(small_dims(8), 3);
    params.lora_b.iter_mut().for_each(|b| *b = 0.0);
    assert_eq!(params.effective_head(), params.base);
    let input = random_input(&params, 3);
    let ctx = contexts(&params, &input, &[4]).unwrap().remove(0);
    let mut base_only = params.clone();
    base_only.lora_a.iter_mut().for_each(|a| *a = 123.0);
    assert_eq!(token_distribution(&params, &ctx), token_distribution(&base_only, &ctx));
}

#[test]
fn uniform_log_prob() {
    let params = PolicyParams::zeros(small_dims(32), 4.0);
    let input = random_input(&params, 4);
    let lp = log_prob(&params, &input, &TokenSequence(vec![5, 6, 1])).unwrap();
    assert!((lp + 3.0 * 32f64.ln()).abs() < 1e-12);
    assert!(log_prob(&params, &input, &TokenSequence(vec![])).is_err());
    assert!(matches!(log_prob(&params, &input, &TokenSequence(vec![40])), Err(Error::TokenOutOfRange { index: 40, size: 32 })));
    assert!(log_prob(&params, &input, &TokenSequence(vec![1; 5])).is_err());
}

fn saturated(vocab: usize, token: usize, margin: f64) -> PolicyParams {
    let mut params = PolicyParams::zeros(small_dims(vocab), 4.0);
    let row = params.dims.context_width() - 1;
    params.base[row * vocab + token] = margin;
    params
}

#[test]
fn saturated_path_has_near_zero_log_prob() {
    let params = saturated(12, 1, 50.0);
    let input = random_input(&params, 5);
    let lps = token_log_probs(&params, &input, &[1, 1, 1]).unwrap();
    assert!(lps.iter().all(|lp| lp.abs() < 1e-8));
}

#[test]
fn log_prob_telescopes() {
    let params = random_params(small_dims(13), 6);
    let input = random_input(&params, 6);
    let tokens = [3, 12, 0, 7];
    let composed: f64 =
        contexts(&params, &input, &tokens).unwrap().iter().zip(tokens).map(|(ctx, tok)| token_distribution(&params, ctx)[tok].ln()).sum();
    let lp = log_prob(&params, &input, &TokenSequence(tokens.to_vec())).unwrap();
    assert!((lp - composed).abs() < 1e-12);
}

#[test]
fn group_sampling_contract() {
    let params = random_params(small_dims(7), 7);
    let input = random_input(&params, 7);
    assert!(sample_group(&params, &input, 1, 1, &mut seed::rng(0)).is_err());
    let a = sample_group(&params, &input, 16, 1, &mut seed::rng(42)).unwrap();
    let b = sample_group(&params, &input, 16, 1, &mut seed::rng(42)).unwrap();
    assert_eq!(a, b);
    for out in &a {
        assert!(out.tokens.len() <= params.dims.max_len);
        assert_eq!(out.terminated, out.tokens.0.last() == Some(&1));
        let recomputed = token_log_probs(&params, &input, out.tokens.as_slice()).unwrap();
        for (x, y) in out.log_probs.iter().zip(&recomputed) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn saturated_policy_samples_identical_outputs() {
    let params = saturated(9, 4, 60.0);
    let input = random_input(&params, 8);
    let group = sample_group(&params, &input, 12, 1, &mut seed::rng(3)).unwrap();
    assert!(group.iter().all(|o| o.tokens == group[0].tokens));
    assert_eq!(group[0].tokens.0, vec![4; 4]);
    assert!(!group[0].terminated);
}

#[test]
fn uniform_sampling_frequencies() {
    let params = PolicyParams::zeros(small_dims(4), 4.0);
    let input = random_input(&params, 9);
    let n = 10_000;
    let group = sample_group(&params, &input, n, 1, &mut seed::rng(2024)).unwrap();
    let mut counts = [0usize; 4];
    for o in &group {
        counts[o.tokens.0[0]] += 1;
    }
    let sigma = (n as f64 * 0.25 * 0.75).sqrt();
    for c in counts {
        assert!((c as f64 - n as f64 * 0.25).abs() < 3.0 * sigma, "{counts:?}");
    }
}

#[test]
fn kl_basics() {
    let params = random_params(small_dims(10), 11);
    let input = random_input(&params, 11);
    let out = TokenSequence(vec![2, 5, 1]);
    let snap = PolicySnapshot::of(&params);
    for dir in [KlDirection::PolicyToReference, KlDirection::ReferenceToPolicy] {
        assert!(kl_divergence(&params, &snap, &input, &out, dir).unwrap().abs() < 1e-12);
    }
    let uniform = PolicyParams::zeros(small_dims(10), 4.0);
    let kl = kl_divergence(&uniform, &PolicySnapshot::of(&uniform), &input, &out, KlDirection::PolicyToReference).unwrap();
    assert_eq!(kl, 0.0);
}

#[test]
fn kl_of_fixed_distributions() {
    let p = [0.5f64, 0.3, 0.2];
    let q = [0.25f64, 0.25, 0.5];
    let hand = 0.5 * (0.5f64 / 0.25).ln() + 0.3 * (0.3f64 / 0.25).ln() + 0.2 * (0.2f64 / 0.5).ln();
    let lp: Vec<f64> = p.iter().map(|x| x.ln()).collect();
    let lq: Vec<f64> = q.iter().map(|x| x.ln()).collect();
    assert!((categorical_kl(&lp, &lq) - hand).abs() < 1e-12);
    assert!((hand - 0.218011910943328).abs() < 1e-12);
}

#[test]
fn kl_is_nonnegative_and_matches_per_step_mean() {
    let mut rng = seed::rng(77);
    for trial in 0..1000u64 {
        let dims = small_dims(6);
        let params = random_params(dims, trial);
        let mut other = params.clone();
        other.lora_b.iter_mut().for_each(|b| *b += rng.gen_range(-0.5..0.5));
        other.connectors.pixel_bias.iter_mut().for_each(|b| *b += rng.gen_range(-1.0..1.0));
        let input = random_input(&params, trial);
        let out = TokenSequence((0..3).map(|_| rng.gen_range(0..6)).collect());
        let snap = PolicySnapshot::of(&other);
        let kl = kl_divergence(&params, &snap, &input, &out, KlDirection::PolicyToReference).unwrap();
        assert!(kl >= -1e-12);
        if trial < 20 {
            let cp = contexts(&params, &input, out.as_slice()).unwrap();
            let cq = contexts(&other, &input, out.as_slice()).unwrap();
            let mean: f64 = cp
                .iter()
                .zip(&cq)
                .map(|(a, b)| {
                    let (p, q) = (token_distribution(&params, a), token_distribution(&other, b));
                    p.iter().zip(&q).map(|(x, y)| x * (x / y).ln()).sum::<f64>()
                })
                .sum::<f64>()
                / 3.0;
            assert!((kl - mean).abs() < 1e-12);
        }
    }
}

/// `Σ_t Σ_j c_tj · log p_t(j)` for fixed coefficients.
struct LinearInLogProbs {
    input: EncodedInput,
    tokens: Vec<usize>,
    coeffs: Vec<Vec<f64>>,
}

impl Objective for LinearInLogProbs {
    fn loss_and_grad(&self, params: &PolicyParams, grad: &mut PolicyGrad) -> Result<f64> {
        let dists = grad::step_log_distributions(params, &self.input, &self.tokens)?;
        let mut loss = 0.0;
        let mut dlogits = Vec::new();
        for (lp, c) in dists.iter().zip(&self.coeffs) {
            loss += lp.iter().zip(c).map(|(l, ci)| l * ci).sum::<f64>();
            let csum: f64 = c.iter().sum();
            dlogits.push(c.iter().zip(lp).map(|(ci, l)| ci - csum * l.exp()).collect());
        }
        sequence_backward(params, &self.input, &self.tokens, &dlogits, grad)?;
        Ok(loss)
    }
}

struct Constant;

impl Objective for Constant {
    fn loss_and_grad(&self, _: &PolicyParams, _: &mut PolicyGrad) -> Result<f64> {
        Ok(2.5)
    }
}

#[test]
fn constant_objective_has_zero_gradient() {
    let params = random_params(small_dims(6), 1);
    let (loss, grad) = grad_trainable(&params, &Constant).unwrap();
    assert_eq!(loss, 2.5);
    assert!(grad.flat().iter().all(|&g| g == 0.0));
    assert_eq!(grad.flat().len(), params.num_trainable());
}

#[test]
fn gradient_matches_central_differences() {
    let params = random_params(small_dims(7), 31);
    let mut rng = seed::rng(5);
    let objective = LinearInLogProbs {
        input: random_input(&params, 31),
        tokens: vec![3, 0, 6, 2],
        coeffs: (0..4).map(|_| (0..7).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect(),
    };
    let (_, grad) = grad_trainable(&params, &objective).unwrap();
    let analytic = grad.flat();
    let theta = params.trainable_flat();
    let h = 1e-5;
    for i in 0..theta.len() {
        let mut p = params.clone();
        let mut t = theta.clone();
        t[i] += h;
        p.set_trainable_flat(&t).unwrap();
        let up = objective.loss(&p).unwrap();
        t[i] -= 2.0 * h;
        p.set_trainable_flat(&t).unwrap();
        let down = objective.loss(&p).unwrap();
        let fd = (up - down) / (2.0 * h);
        let err = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-6);
        assert!(err < 1e-4, "coordinate {i}: fd {fd} analytic {}", analytic[i]);
    }
}

#[test]
fn non_finite_gradient_is_located() {
    let mut grad = PolicyGrad::zeros(&random_params(small_dims(5), 1));
    grad.lora_a[3] = f64::NAN;
    assert!(matches!(grad.check_finite(), Err(Error::NonFinite(m)) if m == "gradient lora_a[3]"));
}

#[test]
fn checkpoint_roundtrip_and_dimension_check() {
    let dir = tempfile::tempdir().unwrap();
    let (bin, header) = (dir.path().join("p.bin"), dir.path().join("p.json"));
    let params = random_params(small_dims(9), 12);
    save_checkpoint(&params, &bin, &header, Some("abc".into())).unwrap();
    let loaded = load_checkpoint(&bin, &header, Some(&params.dims)).unwrap();
    assert_eq!(loaded, params);
    assert_eq!(loaded.frozen_bytes(), params.frozen_bytes());
    let mut other = params.dims;
    other.rank = 3;
    assert!(matches!(load_checkpoint(&bin, &header, Some(&other)), Err(Error::Checkpoint(_))));
    let text = std::fs::read_to_string(&header).unwrap();
    let names: Vec<String> = serde_json::from_str::<CheckpointHeader>(&text).unwrap().blocks.into_iter().map(|b| b.name).collect();
    // adapters, connectors and frozen blocks only: no value-function state
    assert_eq!(names, ["base", "token_embedding", "lora_b", "lora_a", "disease_weight", "disease_bias", "pixel_weight", "pixel_bias"]);
    std::fs::write(&bin, &std::fs::read(&bin).unwrap()[8..]).unwrap();
    assert!(load_checkpoint(&bin, &header, None).is_err());
}
