//! Evaluation metrics, the evaluation report and the ablation protocols.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bbox::{iou, BoundingBox};
pub use crate::data::PROMPT_TEMPLATES;
use crate::data::{fill_modality, DatasetSplit, Task, TaskSample, DIAGNOSIS_PROMPT, MODALITY_PLACEHOLDER};
use crate::error::{Error, Result};
use crate::grpo::{prepare_rft_examples, select_rft_subset, train_rft, GrpoConfig};
use crate::policy::{decode, Decoding, EncodedInput, PolicyParams};
use crate::rewards::{multiset_overlap, parse_box, RewardConfig};
use crate::seed;
use crate::text::normalize_and_tokenize;
use crate::vocab::{Vocabulary, CLASS_NAMES};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_THRESHOLDS: [f64; 3] = [0.1, 0.3, 0.5];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub macro_f1: f64,
}

/// Accuracy and macro-F1 over the classes present in `golds`.
pub fn classification_metrics(preds: &[usize], golds: &[usize], n_classes: usize) -> Result<ClassificationMetrics> {
    let preds: Vec<Option<usize>> = preds.iter().map(|&p| Some(p)).collect();
    classification_metrics_partial(&preds, golds, n_classes)
}

/// As [`classification_metrics`], with `None` for an unreadable prediction:
/// it is wrong for its gold class and a false positive for none.
pub fn classification_metrics_partial(preds: &[Option<usize>], golds: &[usize], n_classes: usize) -> Result<ClassificationMetrics> {
    if preds.len() != golds.len() {
        return Err(Error::Dimension(format!("{} predictions for {} labels", preds.len(), golds.len())));
    }
    if golds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let out_of_range = |l: usize| Error::Argument(format!("label {l} outside [0, {n_classes})"));
    let mut tp = vec![0usize; n_classes];
    let mut fp = vec![0usize; n_classes];
    let mut fn_ = vec![0usize; n_classes];
    let mut present = vec![false; n_classes];
    let mut correct = 0usize;
    for (&p, &g) in preds.iter().zip(golds) {
        if g >= n_classes {
            return Err(out_of_range(g));
        }
        present[g] = true;
        match p {
            Some(p) if p >= n_classes => return Err(out_of_range(p)),
            Some(p) if p == g => {
                tp[g] += 1;
                correct += 1;
            }
            Some(p) => {
                fp[p] += 1;
                fn_[g] += 1;
            }
            None => fn_[g] += 1,
        }
    }
    let f1: Vec<(u128, u128)> =
        (0..n_classes).filter(|&c| present[c]).map(|c| ((2 * tp[c]) as u128, (2 * tp[c] + fp[c] + fn_[c]) as u128)).collect();
    Ok(ClassificationMetrics { accuracy: correct as f64 / golds.len() as f64, macro_f1: mean_of_fractions(&f1) })
}

/// Mean of `n/d` terms, summed as an exact fraction so the result is the
/// correctly rounded value; falls back to floating point on overflow.
fn mean_of_fractions(terms: &[(u128, u128)]) -> f64 {
    fn gcd(a: u128, b: u128) -> u128 {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    let exact = terms.iter().try_fold((0u128, 1u128), |(n, d), &(tn, td)| {
        let g = gcd(d, td);
        let num = n.checked_mul(td / g)?.checked_add(tn.checked_mul(d / g)?)?;
        let den = d.checked_mul(td / g)?;
        let r = gcd(num, den).max(1);
        Some((num / r, den / r))
    });
    match exact.and_then(|(n, d)| Some((n, d.checked_mul(terms.len() as u128)?))) {
        Some((n, d)) => {
            let r = gcd(n, d).max(1);
            (n / r) as f64 / (d / r) as f64
        }
        None => terms.iter().map(|&(n, d)| n as f64 / d as f64).sum::<f64>() / terms.len() as f64,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct VqaMetrics {
    pub closed_accuracy: Option<f64>,
    pub open_recall: Option<f64>,
    pub closed_count: usize,
    pub open_count: usize,
    /// Samples without a usable gold answer.
    pub skipped: usize,
}

/// Closed accuracy (normalised exact match) and open token recall.
pub fn vqa_metrics(preds: &[String], samples: &[TaskSample]) -> Result<VqaMetrics> {
    if preds.len() != samples.len() {
        return Err(Error::Dimension(format!("{} predictions for {} samples", preds.len(), samples.len())));
    }
    let mut m = VqaMetrics::default();
    let (mut closed_hits, mut recall_sum) = (0usize, 0.0);
    for (pred, s) in preds.iter().zip(samples) {
        let gold = normalize_and_tokenize(s.gold_answer.as_deref().unwrap_or(""));
        if gold.is_empty() {
            m.skipped += 1;
            continue;
        }
        let pred = normalize_and_tokenize(pred);
        if s.is_closed_question() {
            m.closed_count += 1;
            closed_hits += usize::from(pred == gold);
        } else {
            m.open_count += 1;
            recall_sum += multiset_overlap(&pred, &gold) as f64 / gold.len() as f64;
        }
    }
    m.closed_accuracy = (m.closed_count > 0).then(|| closed_hits as f64 / m.closed_count as f64);
    m.open_recall = (m.open_count > 0).then(|| recall_sum / m.open_count as f64);
    Ok(m)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundingMetrics {
    /// `(τ, Acc@τ)` in the order the thresholds were given.
    pub accuracy_at: Vec<(f64, f64)>,
    pub miou: f64,
}

/// Acc@τ and mean IoU; an absent prediction has IoU 0.
pub fn grounding_metrics(preds: &[Option<BoundingBox>], golds: &[BoundingBox], thresholds: &[f64]) -> Result<GroundingMetrics> {
    if preds.len() != golds.len() {
        return Err(Error::Dimension(format!("{} predictions for {} boxes", preds.len(), golds.len())));
    }
    if golds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let ious: Vec<f64> = preds.iter().zip(golds).map(|(p, g)| p.as_ref().map_or(0.0, |p| iou(p, g))).collect();
    let n = ious.len() as f64;
    Ok(GroundingMetrics {
        accuracy_at: thresholds.iter().map(|&t| (t, ious.iter().filter(|&&v| v >= t).count() as f64 / n)).collect(),
        miou: ious.iter().sum::<f64>() / n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub count: usize,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub skipped: usize,
    pub metrics: BTreeMap<String, f64>,
}

fn is_zero(n: &usize) -> bool {
    *n == 0
}

/// Metrics for every task present in an evaluated split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub split_size: usize,
    pub tasks: BTreeMap<String, TaskReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    /// Resolved configuration of the run that produced the report.
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub config: serde_json::Value,
}

impl EvalReport {
    pub fn metric(&self, task: Task, name: &str) -> Option<f64> {
        self.tasks.get(task.name())?.metrics.get(name).copied()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Flat `task.metric` columns plus counts, as a header and one row.
    pub fn csv_columns(&self) -> (Vec<String>, Vec<String>) {
        let mut header = vec!["schema_version".to_string(), "config_hash".into(), "split_size".into()];
        let mut row = vec![self.schema_version.to_string(), self.config_hash.clone().unwrap_or_default(), self.split_size.to_string()];
        for (task, r) in &self.tasks {
            header.push(format!("{task}.count"));
            row.push(r.count.to_string());
            for (name, v) in &r.metrics {
                header.push(format!("{task}.{name}"));
                row.push(v.to_string());
            }
        }
        (header, row)
    }

    pub fn to_csv(&self) -> String {
        let (h, r) = self.csv_columns();
        format!("{}\n{}\n", h.join(","), r.join(","))
    }
}

pub fn accuracy_key(threshold: f64) -> String {
    format!("acc@{threshold}")
}

/// What evaluation needs besides the parameters.
#[derive(Debug, Clone, Copy)]
pub struct EvalContext<'a> {
    pub vocab: &'a Vocabulary,
    pub patch: usize,
    pub thresholds: &'a [f64],
}

/// Class named right after the diagnosis prefix, if any.
pub fn extract_label(text: &str, prefix: &str) -> Option<usize> {
    let lowered = text.trim_start().to_lowercase();
    let rest = lowered.strip_prefix(&prefix.trim().to_lowercase())?;
    let first = normalize_and_tokenize(rest).into_iter().next()?;
    CLASS_NAMES.iter().position(|c| *c == first)
}

fn greedy_text(params: &PolicyParams, ctx: &EvalContext, sample: &TaskSample, instruction: Option<&str>) -> Result<String> {
    let input = match instruction {
        Some(text) => EncodedInput::with_instruction(params, sample, text, ctx.patch)?,
        None => EncodedInput::new(params, sample, ctx.patch)?,
    };
    // greedy decoding never draws from the stream
    let out = decode(params, &input, Decoding::Greedy, ctx.vocab.eos(), &mut seed::rng(0))?;
    Ok(ctx.vocab.decode(&out.tokens))
}

/// Greedy-decodes every sample and scores it against its ground truth.
/// `template` replaces the instruction of diagnosis samples.
pub fn evaluate(params: &PolicyParams, split: &DatasetSplit, ctx: &EvalContext, template: Option<&str>) -> Result<EvalReport> {
    if split.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let texts = split
        .samples
        .par_iter()
        .map(|s| {
            let instruction = match (s.task, template) {
                (Task::Diagnosis, Some(t)) => Some(fill_modality(t, s.modality.as_deref().unwrap_or("medical"))),
                _ => None,
            };
            greedy_text(params, ctx, s, instruction.as_deref())
        })
        .collect::<Result<Vec<_>>>()?;
    let prefix = RewardConfig::default().diagnosis_prefix;
    let mut tasks = BTreeMap::new();
    for task in Task::ALL {
        let idx: Vec<usize> = (0..split.len()).filter(|&i| split.samples[i].task == task).collect();
        if idx.is_empty() {
            continue;
        }
        let mut metrics = BTreeMap::new();
        let mut skipped = 0;
        match task {
            Task::Diagnosis => {
                let preds: Vec<Option<usize>> = idx.iter().map(|&i| extract_label(&texts[i], &prefix)).collect();
                let golds = idx
                    .iter()
                    .map(|&i| split.samples[i].gold_label.ok_or_else(|| Error::Argument("diagnosis sample without label".into())))
                    .collect::<Result<Vec<_>>>()?;
                let m = classification_metrics_partial(&preds, &golds, CLASS_NAMES.len())?;
                metrics.insert("accuracy".into(), m.accuracy);
                metrics.insert("macro_f1".into(), m.macro_f1);
            }
            Task::Grounding => {
                let preds: Vec<Option<BoundingBox>> = idx.iter().map(|&i| parse_box(&texts[i]).ok()).collect();
                let golds = idx
                    .iter()
                    .map(|&i| split.samples[i].gold_box.ok_or_else(|| Error::Argument("grounding sample without box".into())))
                    .collect::<Result<Vec<_>>>()?;
                let m = grounding_metrics(&preds, &golds, ctx.thresholds)?;
                for (t, a) in m.accuracy_at {
                    metrics.insert(accuracy_key(t), a);
                }
                metrics.insert("miou".into(), m.miou);
            }
            Task::Vqa => {
                let preds: Vec<String> = idx.iter().map(|&i| texts[i].clone()).collect();
                let samples: Vec<TaskSample> = idx.iter().map(|&i| split.samples[i].clone()).collect();
                let m = vqa_metrics(&preds, &samples)?;
                if let Some(a) = m.closed_accuracy {
                    metrics.insert("closed_accuracy".into(), a);
                }
                if let Some(r) = m.open_recall {
                    metrics.insert("open_recall".into(), r);
                }
                skipped = m.skipped;
            }
        }
        tasks.insert(task.name().to_string(), TaskReport { count: idx.len(), skipped, metrics });
    }
    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        split_size: split.len(),
        tasks,
        config_hash: None,
        config: serde_json::Value::Null,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PromptRobustness {
    pub templates: Vec<String>,
    pub reports: Vec<EvalReport>,
    pub accuracies: Vec<f64>,
    /// `max |acc_i - acc_j|` over template pairs.
    pub max_delta: f64,
}

/// Base diagnosis prompt followed by the ten paraphrases.
pub fn default_templates() -> Vec<String> {
    std::iter::once(DIAGNOSIS_PROMPT).chain(PROMPT_TEMPLATES).map(String::from).collect()
}

/// Diagnosis accuracy of the same split under each instruction template.
pub fn prompt_robustness(params: &PolicyParams, split: &DatasetSplit, ctx: &EvalContext, templates: &[String]) -> Result<PromptRobustness> {
    if templates.len() < 2 {
        return Err(Error::Argument(format!("prompt robustness needs at least 2 templates, got {}", templates.len())));
    }
    if let Some(t) = templates.iter().find(|t| !t.contains(MODALITY_PLACEHOLDER)) {
        return Err(Error::Argument(format!("template {t:?} lacks the {MODALITY_PLACEHOLDER} placeholder")));
    }
    let diagnosis = split.filter_task(Task::Diagnosis);
    let reports = templates.iter().map(|t| evaluate(params, &diagnosis, ctx, Some(t))).collect::<Result<Vec<_>>>()?;
    let accuracies: Vec<f64> = reports.iter().map(|r| r.metric(Task::Diagnosis, "accuracy").unwrap_or(0.0)).collect();
    let max = accuracies.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = accuracies.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(PromptRobustness { templates: templates.to_vec(), reports, accuracies, max_delta: max - min })
}

pub const DEFAULT_FRACTIONS: [f64; 5] = [0.2, 0.4, 0.6, 0.8, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub fraction: f64,
    pub report: EvalReport,
}

/// RFT from the same SFT parameters at each data fraction, each evaluated on
/// `heldout`.
pub fn data_efficiency_sweep(
    sft_params: &PolicyParams,
    sft_split: &DatasetSplit,
    heldout: &DatasetSplit,
    fractions: &[f64],
    grpo: &GrpoConfig,
    rewards: &RewardConfig,
    ctx: &EvalContext,
) -> Result<Vec<SweepRow>> {
    fractions
        .iter()
        .map(|&fraction| {
            let cfg = GrpoConfig { data_fraction: fraction, ..grpo.clone() };
            let subset = select_rft_subset(sft_split, &cfg)?;
            let examples = prepare_rft_examples(sft_params, &subset, ctx.patch)?;
            let trained = train_rft(sft_params, &examples, &cfg, ctx.vocab, rewards)?;
            Ok(SweepRow { fraction, report: evaluate(&trained.params, heldout, ctx, None)? })
        })
        .collect()
}

/// Writes one CSV row per sweep fraction.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::new();
    for (k, row) in rows.iter().enumerate() {
        let (h, r) = row.report.csv_columns();
        if k == 0 {
            out.push_str(&format!("fraction,{}\n", h.join(",")));
        }
        out.push_str(&format!("{},{}\n", row.fraction, r.join(",")));
    }
    out
}
