//! Verifiable rewards scored against ground truth.

use serde::{Deserialize, Serialize};

use crate::bbox::{iou, BoundingBox};
use crate::data::{Task, TaskSample};
use crate::error::{Error, Result};
use crate::text::normalize_and_tokenize;
use crate::vocab::{CLASS_NAMES, DIAGNOSIS_TAG};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    /// IoU below this scores zero.
    pub iou_low_threshold: f64,
    /// Required leading text of a diagnosis answer.
    pub diagnosis_prefix: String,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self { iou_low_threshold: 0.1, diagnosis_prefix: DIAGNOSIS_TAG.to_string() }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.iou_low_threshold) {
            return Err(Error::Config(format!("rewards.iou_low_threshold: {} is outside [0, 1)", self.iou_low_threshold)));
        }
        if self.diagnosis_prefix.trim().is_empty() {
            return Err(Error::Config("rewards.diagnosis_prefix: must not be empty".into()));
        }
        Ok(())
    }
}

/// 1 if `output` carries the answer prefix and mentions `gold_label` as whole
/// tokens after it, else 0.
pub fn reward_diagnosis(output: &str, gold_label: &str, cfg: &RewardConfig) -> f64 {
    let gold = normalize_and_tokenize(gold_label);
    let lowered = output.trim_start().to_lowercase();
    let prefix = cfg.diagnosis_prefix.trim().to_lowercase();
    let Some(rest) = lowered.strip_prefix(&prefix) else {
        return 0.0;
    };
    let words = normalize_and_tokenize(rest);
    if !gold.is_empty() && words.windows(gold.len()).any(|w| w == gold.as_slice()) {
        1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoxParseFailure {
    /// Fewer than four integers in the text.
    MissingCoordinates { found: usize },
    /// Four integers that do not form a valid box.
    InvalidBox,
}

/// Reads the first four integers of `output` as `(x, y, w, h)`.
pub fn parse_box(output: &str) -> std::result::Result<BoundingBox, BoxParseFailure> {
    let mut values = Vec::with_capacity(4);
    let mut chars = output.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        let negative = c == '-' && chars.peek().is_some_and(|(_, d)| d.is_ascii_digit());
        if !(c.is_ascii_digit() || negative) {
            continue;
        }
        let mut end = i + c.len_utf8();
        while let Some(&(j, d)) = chars.peek() {
            if !d.is_ascii_digit() {
                break;
            }
            end = j + 1;
            chars.next();
        }
        // absurdly long digit runs cannot be a valid coordinate
        values.push(output[i..end].parse::<i64>().unwrap_or(-1));
        if values.len() == 4 {
            break;
        }
    }
    if values.len() < 4 {
        return Err(BoxParseFailure::MissingCoordinates { found: values.len() });
    }
    BoundingBox::new(values[0], values[1], values[2], values[3]).map_err(|_| BoxParseFailure::InvalidBox)
}

/// IoU of the parsed box with `gold`, zeroed below the threshold and on parse failure.
pub fn reward_localization(output: &str, gold: &BoundingBox, cfg: &RewardConfig) -> f64 {
    match parse_box(output) {
        Ok(pred) => threshold_iou(iou(&pred, gold), cfg.iou_low_threshold),
        Err(_) => 0.0,
    }
}

fn threshold_iou(v: f64, threshold: f64) -> f64 {
    if v >= threshold {
        v
    } else {
        0.0
    }
}

/// Multiset token F1 between a prediction and a non-empty gold answer.
pub fn token_f1(pred: &str, gold: &str) -> Result<f64> {
    let gold = normalize_and_tokenize(gold);
    if gold.is_empty() {
        return Err(Error::Argument("token F1 is undefined for an empty gold answer".into()));
    }
    let pred = normalize_and_tokenize(pred);
    let common = multiset_overlap(&pred, &gold);
    if common == 0 {
        return Ok(0.0);
    }
    let p = common as f64 / pred.len() as f64;
    let r = common as f64 / gold.len() as f64;
    Ok(2.0 * p * r / (p + r))
}

pub(crate) fn multiset_overlap(a: &[String], b: &[String]) -> usize {
    let mut counts = std::collections::HashMap::<&str, usize>::new();
    for t in b {
        *counts.entry(t.as_str()).or_default() += 1;
    }
    a.iter()
        .filter(|t| match counts.get_mut(t.as_str()) {
            Some(c) if *c > 0 => {
                *c -= 1;
                true
            }
            _ => false,
        })
        .count()
}

/// Reward of a decoded output for the task of `sample`. Only diagnosis and
/// grounding carry a verifiable reward.
pub fn task_reward(sample: &TaskSample, output: &str, cfg: &RewardConfig) -> Result<f64> {
    match sample.task {
        Task::Diagnosis => {
            let label = sample
                .gold_label
                .and_then(|c| CLASS_NAMES.get(c))
                .ok_or_else(|| Error::Config("diagnosis sample without a known label".into()))?;
            Ok(reward_diagnosis(output, label, cfg))
        }
        Task::Grounding => {
            let gold = sample.gold_box.as_ref().ok_or_else(|| Error::Config("grounding sample without a box".into()))?;
            Ok(reward_localization(output, gold, cfg))
        }
        Task::Vqa => Err(Error::Config("rft.tasks: no reward function for task vqa".into())),
    }
}

pub fn has_reward(task: Task) -> bool {
    matches!(task, Task::Diagnosis | Task::Grounding)
}
