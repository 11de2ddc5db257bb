//! Planted-shape datasets, JSONL ingestion and the subsetting protocols.
//!
//! Every generated image carries exactly one shape of a known class inside a
//! known box, so diagnosis, grounding and VQA records all have exact ground
//! truth derived from the same pixels.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bbox::BoundingBox;
use crate::error::{Error, Result};
use crate::seed;
use crate::text::normalize_and_tokenize;
use crate::vocab::{CLASS_NAMES, DIAGNOSIS_TAG, LOCATION_TAG};

pub const MIN_GRID: usize = 8;

pub const MODALITIES: [&str; 6] = ["ct", "mri", "x-ray", "ultrasound", "fundus", "dermoscopy"];

pub const MODALITY_PLACEHOLDER: &str = "{modality}";
pub const DIAGNOSIS_PROMPT: &str = "Analyze the given {modality} image for diagnosis.";
pub const GROUNDING_PROMPT: &str = "Locate the finding in the given {modality} image.";
pub const VQA_CLOSED_PROMPT: &str = "Which shape is shown in the {modality} image?";
pub const VQA_OPEN_PROMPT: &str = "Where is the finding in the {modality} image?";

/// Paraphrases of the diagnosis instruction used for the robustness check;
/// held out from generated training instructions.
pub const PROMPT_TEMPLATES: [&str; 10] = [
    "Please perform diagnostic analysis on the provided {modality} image for diagnosis.",
    "Given a {modality} scan, determine the correct diagnosis",
    "Evaluate the following {modality} image for diagnosis",
    "Assess the {modality} image and provide a diagnosis",
    "Based on the {modality} image, identify the diagnosis",
    "For this {modality} image, specify its diagnosis",
    "Analyze the provided {modality} scan for diagnosis",
    "Interpret the {modality} image to determine its diagnosis",
    "Diagnose the given {modality} image",
    "Use the {modality} image to establish its diagnosis",
];

const OPENERS: [&str; 8] =
    ["", "Please", "Carefully", "Now", "Kindly", "Based on the evidence,", "Using your expertise,", "For this case,"];
const VERBS: [&str; 14] = [
    "analyze",
    "review",
    "examine",
    "inspect",
    "study",
    "check",
    "look at",
    "read",
    "consider",
    "assess",
    "evaluate",
    "interpret",
    "use",
    "observe",
];
const OBJECTS: [&str; 8] = [
    "the {modality} image",
    "this {modality} scan",
    "the given {modality} image",
    "the provided {modality} scan",
    "the following {modality} image",
    "this {modality} picture",
    "the {modality} image below",
    "the {modality} scan shown",
];
/// Second verbs, shared by every task's clause.
const REPORT_VERBS: [&str; 10] = ["report", "give", "state", "provide", "determine", "identify", "specify", "establish", "name", "tell"];

/// Kind of instruction a generated record carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptKind {
    Diagnosis,
    Grounding,
    VqaClosed,
    VqaOpen,
}

impl PromptKind {
    pub fn canonical(self) -> &'static str {
        match self {
            PromptKind::Diagnosis => DIAGNOSIS_PROMPT,
            PromptKind::Grounding => GROUNDING_PROMPT,
            PromptKind::VqaClosed => VQA_CLOSED_PROMPT,
            PromptKind::VqaOpen => VQA_OPEN_PROMPT,
        }
    }

    /// Clause templates; `{v}` takes a verb from the shared report verbs.
    fn clauses(self) -> &'static [&'static str] {
        match self {
            PromptKind::Diagnosis => &[
                "and {v} the diagnosis",
                "and {v} its diagnosis",
                "and {v} a diagnosis",
                "for diagnosis",
                "to reach a diagnosis",
                "and diagnose the finding",
            ],
            PromptKind::Grounding => &[
                "and {v} the location of the finding",
                "and {v} the bounding box of the finding",
                "and {v} the region of the finding",
                "to locate the finding",
                "and box the finding",
            ],
            PromptKind::VqaClosed => {
                &["and {v} which shape is shown", "and {v} the shape among the options", "to pick the shape from the choices"]
            }
            PromptKind::VqaOpen => {
                &["and {v} where the finding is", "and {v} the quadrant containing the finding", "to tell which part holds the finding"]
            }
        }
    }
}

/// Draws a training instruction: the canonical prompt a quarter of the time,
/// otherwise an opener, verb and object shared by all tasks followed by a
/// task-specific clause. Instructions matching a robustness template are
/// redrawn.
pub fn paraphrase(kind: PromptKind, modality: &str, rng: &mut impl Rng) -> String {
    loop {
        let text = draw_paraphrase(kind, modality, rng);
        let words = normalize_and_tokenize(&text);
        if !PROMPT_TEMPLATES.iter().any(|t| normalize_and_tokenize(&fill_modality(t, modality)) == words) {
            return text;
        }
    }
}

fn draw_paraphrase(kind: PromptKind, modality: &str, rng: &mut impl Rng) -> String {
    if rng.gen_bool(0.25) {
        return fill_modality(kind.canonical(), modality);
    }
    let opener = OPENERS[rng.gen_range(0..OPENERS.len())];
    let verb = VERBS[rng.gen_range(0..VERBS.len())];
    let object = OBJECTS[rng.gen_range(0..OBJECTS.len())];
    let clauses = kind.clauses();
    let verb2 = REPORT_VERBS[rng.gen_range(0..REPORT_VERBS.len())];
    let clause = clauses[rng.gen_range(0..clauses.len())].replace("{v}", verb2);
    let text = format!("{opener} {verb} {object} {clause}.");
    let text = text.trim_start();
    let mut chars = text.chars();
    let first = chars.next().map(|c| c.to_uppercase().collect::<String>()).unwrap_or_default();
    fill_modality(&(first + chars.as_str()), modality)
}

pub fn fill_modality(template: &str, modality: &str) -> String {
    template.replace(MODALITY_PLACEHOLDER, modality)
}

/// Single-channel image with intensities in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GridImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl GridImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height < MIN_GRID || width < MIN_GRID {
            return Err(Error::Argument(format!("image {height}x{width} is smaller than {MIN_GRID}x{MIN_GRID}")));
        }
        if data.len() != height * width {
            return Err(Error::Argument(format!("image data has {} values, expected {}", data.len(), height * width)));
        }
        if let Some(v) = data.iter().find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v))) {
            return Err(Error::Argument(format!("image intensity {v} outside [0, 1]")));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![0.0; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Diagnosis,
    Grounding,
    Vqa,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Diagnosis, Task::Grounding, Task::Vqa];

    pub fn name(self) -> &'static str {
        match self {
            Task::Diagnosis => "diagnosis",
            Task::Grounding => "grounding",
            Task::Vqa => "vqa",
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diagnosis" => Ok(Task::Diagnosis),
            "grounding" => Ok(Task::Grounding),
            "vqa" => Ok(Task::Vqa),
            other => Err(Error::Argument(format!("unknown task {other:?}"))),
        }
    }
}

/// One instruction/response record over an image.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSample {
    pub task: Task,
    pub image: Arc<GridImage>,
    pub instruction: String,
    pub gold_label: Option<usize>,
    pub gold_box: Option<BoundingBox>,
    pub gold_answer: Option<String>,
    pub closed_options: Option<Vec<String>>,
    pub modality: Option<String>,
    /// False when the annotation is known to be imprecise. Only reliable
    /// records are eligible for reward-based fine-tuning.
    pub reliable: bool,
}

impl TaskSample {
    /// Checks that exactly the fields required by the task are populated.
    pub fn validate(&self) -> Result<()> {
        let (label, bbox, answer) = (self.gold_label.is_some(), self.gold_box.is_some(), self.gold_answer.is_some());
        let ok = match self.task {
            Task::Diagnosis => label && !bbox && !answer && self.closed_options.is_none(),
            Task::Grounding => bbox && !label && !answer && self.closed_options.is_none(),
            Task::Vqa => answer && !label && !bbox,
        };
        if !ok {
            return Err(Error::Argument(format!("{} sample has the wrong set of gold fields", self.task)));
        }
        if let Some(b) = &self.gold_box {
            if !b.fits_within(self.image.width(), self.image.height()) {
                return Err(Error::Argument(format!("box {b:?} exceeds the image extent")));
            }
        }
        if let Some(l) = self.gold_label {
            if l >= CLASS_NAMES.len() {
                return Err(Error::Argument(format!("label {l} out of range")));
            }
        }
        Ok(())
    }

    /// Reference response text in the output vocabulary.
    pub fn gold_response(&self) -> String {
        match self.task {
            Task::Diagnosis => format!("{DIAGNOSIS_TAG} {}", self.gold_label.map(|l| CLASS_NAMES[l]).unwrap_or_default()),
            Task::Grounding => match self.gold_box {
                Some(b) => format!("{LOCATION_TAG} {} {} {} {}", b.x, b.y, b.w, b.h),
                None => String::new(),
            },
            Task::Vqa => self.gold_answer.clone().unwrap_or_default(),
        }
    }

    pub fn is_closed_question(&self) -> bool {
        self.closed_options.as_ref().is_some_and(|o| !o.is_empty())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    /// Generator config or ingestion source.
    pub source: serde_json::Value,
    /// Subsetting operations applied after creation, in order.
    #[serde(default)]
    pub derivations: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub samples: Vec<TaskSample>,
    pub provenance: Provenance,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn filter_task(&self, task: Task) -> DatasetSplit {
        self.derive(self.samples.iter().filter(|s| s.task == task).cloned().collect(), format!("task={task}"))
    }

    fn derive(&self, samples: Vec<TaskSample>, op: String) -> DatasetSplit {
        let mut provenance = self.provenance.clone();
        provenance.derivations.push(op);
        DatasetSplit { samples, provenance }
    }

    pub fn subset(&self, indices: &[usize], op: String) -> DatasetSplit {
        self.derive(indices.iter().map(|&i| self.samples[i].clone()).collect(), op)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub n: usize,
    pub noise_level: f64,
    pub min_size: usize,
    pub max_size: usize,
    /// Probability that a grounding record is annotated with a loose box
    /// (one extra cell on every side) and flagged unreliable.
    pub annotation_noise: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self { height: 16, width: 16, classes: 3, n: 100, noise_level: 0.1, min_size: 3, max_size: 6, annotation_noise: 0.0 }
    }
}

/// Footprint (width, height) of a shape of the given class and size.
fn shape_extent(class: usize, size: usize) -> (usize, usize) {
    match CLASS_NAMES[class] {
        "stripe" => (size + 2, 1),
        "column" => (1, size + 2),
        _ => (size, size),
    }
}

/// Cells (row, col) of a shape relative to its top-left corner. The cells
/// always touch all four edges of the footprint.
fn shape_cells(class: usize, size: usize) -> Vec<(usize, usize)> {
    let (w, h) = shape_extent(class, size);
    let mid = size / 2;
    let mut cells = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let on = match CLASS_NAMES[class] {
                "square" | "stripe" | "column" => true,
                "cross" => r == mid || c == mid,
                "ring" => r == 0 || c == 0 || r == h - 1 || c == w - 1,
                "corner" => c == 0 || r == h - 1,
                "tee" => r == 0 || c == mid,
                "checker" => (r + c) % 2 == 0,
                _ => unreachable!("unknown class"),
            };
            if on {
                cells.push((r, c));
            }
        }
    }
    cells
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.n < 1 {
            return err("data.n: must be at least 1".into());
        }
        if !(2..=CLASS_NAMES.len()).contains(&self.classes) {
            return err(format!("data.classes: {} not in 2..=8", self.classes));
        }
        if self.height < MIN_GRID || self.width < MIN_GRID {
            return err(format!("data: grid must be at least {MIN_GRID}x{MIN_GRID}"));
        }
        if self.min_size < 2 || self.min_size > self.max_size {
            return err(format!("data: shape sizes {}..={} invalid (need 2 <= min <= max)", self.min_size, self.max_size));
        }
        for class in 0..self.classes {
            let (w, h) = shape_extent(class, self.max_size);
            if w > self.width || h > self.height {
                return err(format!(
                    "data: shape {} of size {} ({w}x{h}) is larger than the {}x{} grid",
                    CLASS_NAMES[class], self.max_size, self.width, self.height
                ));
            }
        }
        if !(0.0..=1.0).contains(&self.noise_level) {
            return err("data.noise_level: must lie in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.annotation_noise) {
            return err("data.annotation_noise: must lie in [0, 1]".into());
        }
        Ok(())
    }
}

fn quadrant_answer(b: &BoundingBox, width: usize, height: usize) -> String {
    let vertical = if 2 * b.y as usize + (b.h as usize) < height { "upper" } else { "lower" };
    let horizontal = if 2 * b.x as usize + (b.w as usize) < width { "left" } else { "right" };
    format!("{vertical} {horizontal}")
}

/// Generates `n` images and three records (diagnosis, grounding, VQA) per
/// image, ordered diagnosis records first, then grounding, then VQA.
pub fn generate_planted_shapes(config: &GeneratorConfig, seed: u64) -> Result<DatasetSplit> {
    config.validate()?;
    let (h, w) = (config.height, config.width);
    let options: Vec<String> = CLASS_NAMES[..config.classes].iter().map(|s| s.to_string()).collect();
    let mut per_task: [Vec<TaskSample>; 3] = Default::default();

    for i in 0..config.n {
        let mut rng = seed::rng(seed::derive_indexed(seed, "planted-image", i as u64));
        let class = rng.gen_range(0..config.classes);
        let size = rng.gen_range(config.min_size..=config.max_size);
        let (sw, sh) = shape_extent(class, size);
        let x = rng.gen_range(0..=w - sw);
        let y = rng.gen_range(0..=h - sh);

        let mut data = vec![0.0; h * w];
        for (r, c) in shape_cells(class, size) {
            data[(y + r) * w + x + c] = 1.0;
        }
        if config.noise_level > 0.0 {
            for v in data.iter_mut() {
                let n: f64 = rng.gen_range(-config.noise_level..=config.noise_level);
                *v = (*v + n).clamp(0.0, 1.0);
            }
        }
        let modality = MODALITIES[rng.gen_range(0..MODALITIES.len())].to_string();
        let closed = rng.gen_bool(0.5);
        let loose = config.annotation_noise > 0.0 && rng.gen_bool(config.annotation_noise);
        let diagnosis_prompt = paraphrase(PromptKind::Diagnosis, &modality, &mut rng);
        let grounding_prompt = paraphrase(PromptKind::Grounding, &modality, &mut rng);
        let vqa_prompt = paraphrase(if closed { PromptKind::VqaClosed } else { PromptKind::VqaOpen }, &modality, &mut rng);

        let image = Arc::new(GridImage::new(h, w, data)?);
        let exact = BoundingBox::new(x as i64, y as i64, sw as i64, sh as i64)?;
        let annotated = if loose {
            let (x0, y0) = (x.saturating_sub(1), y.saturating_sub(1));
            let (x1, y1) = ((x + sw + 1).min(w), (y + sh + 1).min(h));
            BoundingBox::new(x0 as i64, y0 as i64, (x1 - x0) as i64, (y1 - y0) as i64)?
        } else {
            exact
        };

        let base = TaskSample {
            task: Task::Diagnosis,
            image,
            instruction: diagnosis_prompt,
            gold_label: Some(class),
            gold_box: None,
            gold_answer: None,
            closed_options: None,
            modality: Some(modality.clone()),
            reliable: true,
        };
        per_task[1].push(TaskSample {
            task: Task::Grounding,
            instruction: grounding_prompt,
            gold_label: None,
            gold_box: Some(annotated),
            reliable: !loose,
            ..base.clone()
        });
        per_task[2].push(if closed {
            TaskSample {
                task: Task::Vqa,
                instruction: vqa_prompt.clone(),
                gold_label: None,
                gold_answer: Some(CLASS_NAMES[class].to_string()),
                closed_options: Some(options.clone()),
                ..base.clone()
            }
        } else {
            TaskSample {
                task: Task::Vqa,
                instruction: vqa_prompt,
                gold_label: None,
                gold_answer: Some(quadrant_answer(&exact, w, h)),
                ..base.clone()
            }
        });
        per_task[0].push(base);
    }

    let samples = per_task.into_iter().flatten().collect();
    Ok(DatasetSplit { samples, provenance: Provenance { seed, source: serde_json::to_value(config)?, derivations: Vec::new() } })
}

#[derive(Debug, Serialize, Deserialize)]
struct ImageRecord {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleRecord {
    task: Task,
    image: ImageRecord,
    instruction: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<i64>,
    #[serde(default, rename = "box", skip_serializing_if = "Option::is_none")]
    bbox: Option<[i64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    options: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    modality: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    reliable: Option<bool>,
}

impl SampleRecord {
    fn from_sample(s: &TaskSample) -> Self {
        Self {
            task: s.task,
            image: ImageRecord { h: s.image.height(), w: s.image.width(), data: s.image.data().to_vec() },
            instruction: s.instruction.clone(),
            label: s.gold_label.map(|l| l as i64),
            bbox: s.gold_box.map(Into::into),
            answer: s.gold_answer.clone(),
            options: s.closed_options.clone(),
            modality: s.modality.clone(),
            reliable: (!s.reliable).then_some(false),
        }
    }

    fn into_sample(self, line: usize) -> Result<TaskSample> {
        let schema = |message: String| Error::Schema { line, message };
        let missing = |field: &str| Error::Parse { line, message: format!("missing required field `{field}`") };
        let image = GridImage::new(self.image.h, self.image.w, self.image.data).map_err(|e| schema(format!("invalid image: {e}")))?;
        let gold_box = match self.bbox {
            Some(b) => Some(BoundingBox::try_from(b).map_err(|_| schema("invalid box".into()))?),
            None => None,
        };
        let gold_label = match self.label {
            Some(l) if l < 0 || l as usize >= CLASS_NAMES.len() => return Err(schema(format!("invalid label {l}"))),
            l => l.map(|l| l as usize),
        };
        match self.task {
            Task::Diagnosis if gold_label.is_none() => return Err(missing("label")),
            Task::Grounding if gold_box.is_none() => return Err(missing("box")),
            Task::Vqa if self.answer.is_none() => return Err(missing("answer")),
            _ => {}
        }
        // Drop gold fields that belong to other tasks.
        let sample = TaskSample {
            task: self.task,
            image: Arc::new(image),
            instruction: self.instruction,
            gold_label: gold_label.filter(|_| self.task == Task::Diagnosis),
            gold_box: gold_box.filter(|_| self.task == Task::Grounding),
            gold_answer: self.answer.filter(|_| self.task == Task::Vqa),
            closed_options: self.options.filter(|_| self.task == Task::Vqa),
            modality: self.modality,
            reliable: self.reliable.unwrap_or(true),
        };
        sample.validate().map_err(|e| schema(e.to_string()))?;
        Ok(sample)
    }
}

/// Reads one sample per line. With `task` set, records of any other task are
/// rejected.
pub fn load_jsonl(path: &Path, task: Option<Task>) -> Result<DatasetSplit> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut samples = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SampleRecord = serde_json::from_str(&line).map_err(|e| Error::Parse { line: line_no, message: e.to_string() })?;
        if let Some(expected) = task {
            if record.task != expected {
                return Err(Error::Schema { line: line_no, message: format!("expected task {expected}, found {}", record.task) });
            }
        }
        samples.push(record.into_sample(line_no)?);
    }
    if samples.is_empty() {
        log::warn!("{}: no samples", path.display());
    }
    Ok(DatasetSplit {
        samples,
        provenance: Provenance {
            seed: 0,
            source: serde_json::json!({ "jsonl": path.display().to_string(), "task": task }),
            derivations: Vec::new(),
        },
    })
}

pub fn to_jsonl(split: &DatasetSplit) -> Result<String> {
    let mut out = String::new();
    for s in &split.samples {
        out.push_str(&serde_json::to_string(&SampleRecord::from_sample(s))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_jsonl(split: &DatasetSplit, path: &Path) -> Result<()> {
    let text = to_jsonl(split)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Stratum key: task plus class label where the record has one.
fn stratum(s: &TaskSample) -> (Task, Option<usize>) {
    (s.task, s.gold_label)
}

fn ceil_count(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Draws `⌈fraction·n⌉` samples, allocated across strata proportionally
/// (largest remainder), uniformly without replacement inside each stratum.
/// The result keeps the original sample order.
pub fn subset_fraction(split: &DatasetSplit, fraction: f64, seed: u64) -> Result<DatasetSplit> {
    let chosen = fraction_indices(split, fraction, seed)?;
    if fraction == 1.0 {
        return Ok(split.clone());
    }
    Ok(split.subset(&chosen, format!("fraction={fraction},seed={seed}")))
}

/// Sorted indices selected by [`subset_fraction`].
pub fn fraction_indices(split: &DatasetSplit, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Argument(format!("fraction {fraction} not in (0, 1]")));
    }
    if split.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if fraction == 1.0 {
        return Ok((0..split.len()).collect());
    }
    stratified_sample(split, ceil_count(fraction, split.len()), |_| true, seed)
}

/// Draws `target` samples allocated across the (task, label) strata of
/// `split` in proportion to stratum size (largest remainder). Inside each
/// stratum only members accepted by `draw_from` are drawn, uniformly
/// without replacement. Returns sorted indices.
pub fn stratified_sample(split: &DatasetSplit, target: usize, draw_from: impl Fn(&TaskSample) -> bool, seed: u64) -> Result<Vec<usize>> {
    if target > split.len() {
        return Err(Error::Argument(format!("cannot draw {target} of {} samples", split.len())));
    }
    let mut strata: BTreeMap<(Task, Option<usize>), Vec<usize>> = BTreeMap::new();
    for (i, s) in split.samples.iter().enumerate() {
        strata.entry(stratum(s)).or_default().push(i);
    }
    let sizes: Vec<usize> = strata.values().map(Vec::len).collect();
    let alloc = allocate(&sizes, target);

    let mut rng = seed::rng_for(seed, "subset-fraction");
    let mut chosen = Vec::with_capacity(target);
    for (((task, label), members), take) in strata.iter().zip(alloc) {
        let pool: Vec<usize> = members.iter().copied().filter(|&i| draw_from(&split.samples[i])).collect();
        if pool.len() < take {
            let label = label.map_or_else(|| "-".to_string(), |l| l.to_string());
            return Err(Error::Argument(format!("stratum {task}/{label} has {} eligible samples, {take} needed", pool.len())));
        }
        chosen.extend(sample_indices(&mut rng, pool.len(), take).into_iter().map(|j| pool[j]));
    }
    chosen.sort_unstable();
    Ok(chosen)
}

/// Largest-remainder apportionment of `target` over groups of `sizes`.
fn allocate(sizes: &[usize], target: usize) -> Vec<usize> {
    let n: usize = sizes.iter().sum();
    let mut alloc: Vec<(usize, f64)> = sizes
        .iter()
        .map(|&size| {
            let exact = target as f64 * size as f64 / n as f64;
            let base = ((exact + 1e-9).floor() as usize).min(size);
            (base, exact - base as f64)
        })
        .collect();
    let mut remaining = target - alloc.iter().map(|a| a.0).sum::<usize>();
    let mut order: Vec<usize> = (0..alloc.len()).collect();
    order.sort_by(|&a, &b| alloc[b].1.total_cmp(&alloc[a].1).then(a.cmp(&b)));
    for &k in order.iter().cycle() {
        if remaining == 0 {
            break;
        }
        if alloc[k].0 < sizes[k] {
            alloc[k].0 += 1;
            remaining -= 1;
        }
    }
    alloc.into_iter().map(|a| a.0).collect()
}

/// Exactly `k` labelled samples per class present in the split.
pub fn subset_kshot(split: &DatasetSplit, k: usize, seed: u64) -> Result<DatasetSplit> {
    let chosen = kshot_indices(split, k, seed)?;
    Ok(split.subset(&chosen, format!("kshot={k},seed={seed}")))
}

/// Sorted indices selected by [`subset_kshot`].
pub fn kshot_indices(split: &DatasetSplit, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::Argument("k must be at least 1".into()));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in split.samples.iter().enumerate() {
        if let Some(l) = s.gold_label {
            by_class.entry(l).or_default().push(i);
        }
    }
    if by_class.is_empty() {
        return Err(Error::Argument("k-shot subsetting needs labelled samples".into()));
    }
    let mut rng = seed::rng_for(seed, "subset-kshot");
    let mut chosen = Vec::with_capacity(k * by_class.len());
    for (&class, members) in &by_class {
        if members.len() < k {
            return Err(Error::InsufficientClass { class, available: members.len(), required: k });
        }
        chosen.extend(sample_indices(&mut rng, members.len(), k).into_iter().map(|j| members[j]));
    }
    chosen.sort_unstable();
    Ok(chosen)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(n: usize, classes: usize, noise: f64) -> GeneratorConfig {
        GeneratorConfig { n, classes, noise_level: noise, ..GeneratorConfig::default() }
    }

    #[test]
    fn counts_and_shared_images() {
        let split = generate_planted_shapes(&config(10, 3, 0.1), 1).unwrap();
        assert_eq!(split.len(), 30);
        for task in Task::ALL {
            assert_eq!(split.filter_task(task).len(), 10);
        }
        for i in 0..10 {
            assert!(Arc::ptr_eq(&split.samples[i].image, &split.samples[10 + i].image));
            assert!(Arc::ptr_eq(&split.samples[i].image, &split.samples[20 + i].image));
        }
        for s in &split.samples {
            s.validate().unwrap();
        }
    }

    #[test]
    fn noise_free_images_are_binary_and_boxes_are_tight() {
        let split = generate_planted_shapes(&config(60, 8, 0.0), 3).unwrap();
        for s in split.samples.iter().filter(|s| s.task == Task::Grounding) {
            let b = s.gold_box.unwrap();
            let img = &s.image;
            let (mut min_r, mut min_c, mut max_r, mut max_c) = (usize::MAX, usize::MAX, 0, 0);
            for r in 0..img.height() {
                for c in 0..img.width() {
                    let v = img.get(r, c);
                    assert!(v == 0.0 || v == 1.0);
                    if v == 1.0 {
                        min_r = min_r.min(r);
                        min_c = min_c.min(c);
                        max_r = max_r.max(r);
                        max_c = max_c.max(c);
                    }
                }
            }
            assert_eq!(b, BoundingBox::new(min_c as i64, min_r as i64, (max_c - min_c + 1) as i64, (max_r - min_r + 1) as i64).unwrap());
        }
    }

    #[test]
    fn loose_annotations_are_flagged() {
        let cfg = GeneratorConfig { annotation_noise: 0.5, ..config(200, 3, 0.0) };
        let split = generate_planted_shapes(&cfg, 9).unwrap();
        let grounding = split.filter_task(Task::Grounding);
        let unreliable = grounding.samples.iter().filter(|s| !s.reliable).count();
        assert!(unreliable > 60 && unreliable < 140, "{unreliable}");
        assert!(split.samples.iter().filter(|s| s.task != Task::Grounding).all(|s| s.reliable));
        for s in grounding.samples.iter().filter(|s| !s.reliable) {
            let b = s.gold_box.unwrap();
            // a loose box has empty border rows/columns wherever it was not clipped
            let border_empty = (b.x as usize..b.right() as usize).all(|c| s.image.get(b.y as usize, c) == 0.0) || b.y == 0;
            assert!(border_empty);
        }
    }

    #[test]
    fn deterministic() {
        let a = generate_planted_shapes(&config(20, 4, 0.2), 5).unwrap();
        let b = generate_planted_shapes(&config(20, 4, 0.2), 5).unwrap();
        assert_eq!(to_jsonl(&a).unwrap(), to_jsonl(&b).unwrap());
        let c = generate_planted_shapes(&config(20, 4, 0.2), 6).unwrap();
        assert_ne!(to_jsonl(&a).unwrap(), to_jsonl(&c).unwrap());
    }

    #[test]
    fn oversized_shapes_rejected() {
        let cfg = GeneratorConfig { height: 8, width: 8, max_size: 7, ..config(5, 3, 0.0) };
        assert!(matches!(generate_planted_shapes(&cfg, 1), Err(Error::Config(m)) if m.contains("larger than")));
        assert!(generate_planted_shapes(&config(0, 3, 0.0), 1).is_err());
        assert!(generate_planted_shapes(&config(5, 9, 0.0), 1).is_err());
    }

    fn labelled(classes: &[usize]) -> DatasetSplit {
        let image = Arc::new(GridImage::zeros(8, 8).unwrap());
        DatasetSplit {
            samples: classes
                .iter()
                .map(|&c| TaskSample {
                    task: Task::Diagnosis,
                    image: image.clone(),
                    instruction: "x".into(),
                    gold_label: Some(c),
                    gold_box: None,
                    gold_answer: None,
                    closed_options: None,
                    modality: None,
                    reliable: true,
                })
                .collect(),
            provenance: Provenance { seed: 0, source: serde_json::Value::Null, derivations: vec![] },
        }
    }

    fn class_counts(split: &DatasetSplit) -> BTreeMap<usize, usize> {
        let mut m = BTreeMap::new();
        for s in &split.samples {
            *m.entry(s.gold_label.unwrap()).or_insert(0) += 1;
        }
        m
    }

    #[test]
    fn fraction_identity_and_ceiling() {
        let split = labelled(&[0, 1, 2]);
        assert_eq!(subset_fraction(&split, 1.0, 3).unwrap(), split);
        assert_eq!(subset_fraction(&split, 0.2, 3).unwrap().len(), 1);
        assert!(subset_fraction(&split, 0.0, 3).is_err());
        assert!(subset_fraction(&split, 1.5, 3).is_err());
        assert!(subset_fraction(&labelled(&[]), 0.5, 3).is_err());
    }

    #[test]
    fn fraction_is_stratified() {
        let classes: Vec<usize> = (0..100).map(|i| i % 4).collect();
        let split = labelled(&classes);
        for seed in 0..20 {
            let sub = subset_fraction(&split, 0.2, seed).unwrap();
            assert_eq!(sub.len(), 20);
            assert!(class_counts(&sub).values().all(|&n| n == 5));
            assert_eq!(sub, subset_fraction(&split, 0.2, seed).unwrap());
        }
    }

    #[test]
    fn stratified_sample_allocates_over_all_members_but_draws_eligible() {
        // 40 of class 0 (half eligible), 20 of class 1 (all eligible)
        let classes: Vec<usize> = (0..60).map(|i| (i >= 40) as usize).collect();
        let mut split = labelled(&classes);
        for (i, s) in split.samples.iter_mut().enumerate() {
            s.reliable = i >= 40 || i % 2 == 0;
        }
        for seed in 0..10 {
            let idx = stratified_sample(&split, 15, |s| s.reliable, seed).unwrap();
            assert_eq!(idx.len(), 15);
            assert!(idx.windows(2).all(|w| w[0] < w[1]));
            assert!(idx.iter().all(|&i| split.samples[i].reliable));
            assert_eq!(idx.iter().filter(|&&i| i < 40).count(), 10);
        }
        let few = stratified_sample(&split, 60, |s| s.reliable, 0).unwrap_err().to_string();
        assert!(few.contains("20 eligible samples, 40 needed"), "{few}");
    }

    #[test]
    fn allocation_matches_target() {
        assert_eq!(allocate(&[5, 3, 2], 5), vec![3, 1, 1]);
        assert_eq!(allocate(&[1, 1, 1], 2).iter().sum::<usize>(), 2);
        assert_eq!(allocate(&[4, 4], 8), vec![4, 4]);
        assert_eq!(allocate(&[0, 7], 3), vec![0, 3]);
    }

    #[test]
    fn generated_instructions_name_modality_and_task() {
        let split = generate_planted_shapes(&config(300, 3, 0.0), 5).unwrap();
        let mut distinct = std::collections::BTreeSet::new();
        for s in &split.samples {
            let text = s.instruction.to_lowercase();
            assert!(text.contains(s.modality.as_deref().unwrap()), "{text}");
            let keyword = match s.task {
                Task::Diagnosis => "diagnos",
                Task::Grounding => {
                    if text.contains("locate") {
                        "locate"
                    } else {
                        "finding"
                    }
                }
                Task::Vqa if s.closed_options.is_some() => "shape",
                Task::Vqa => {
                    if text.contains("where") {
                        "where"
                    } else {
                        "finding"
                    }
                }
            };
            assert!(text.contains(keyword), "{text}");
            assert!(!text.contains('{'), "{text}");
            distinct.insert(text);
        }
        assert!(distinct.len() > 300);
    }

    #[test]
    fn kshot_counts() {
        let classes: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let split = labelled(&classes);
        let sub = subset_kshot(&split, 4, 1).unwrap();
        assert_eq!(sub.len(), 12);
        let full = subset_kshot(&split, 10, 1).unwrap();
        assert_eq!(full.len(), 30);
        assert!(matches!(subset_kshot(&labelled(&[0, 0, 1]), 2, 1), Err(Error::InsufficientClass { class: 1, .. })));
    }

    #[test]
    fn kshot_seeds_vary_selection_not_counts() {
        let classes: Vec<usize> = (0..60).map(|i| i % 3).collect();
        let split = labelled(&classes);
        let reference = kshot_indices(&split, 4, 0).unwrap();
        let mut differing = 0;
        for seed in 0..100 {
            let sub = subset_kshot(&split, 4, seed).unwrap();
            assert!(class_counts(&sub).values().all(|&n| n == 4));
            assert_eq!(kshot_indices(&split, 4, seed).unwrap(), kshot_indices(&split, 4, seed).unwrap());
            differing += (kshot_indices(&split, 4, seed).unwrap() != reference) as usize;
        }
        // 1/C(20,4)^3 chance of a repeat per seed
        assert_eq!(differing, 99);
    }
}
