//! Experiment configuration and the stages of a run, each writing its
//! artifacts into one output directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::data::{generate_planted_shapes, load_jsonl, write_jsonl, DatasetSplit, GeneratorConfig};
use crate::error::{Error, Result};
use crate::grpo::{prepare_rft_examples, select_rft_subset, train_rft, write_diagnostics_csv, GrpoConfig, RftOutcome};
use crate::metrics::{
    data_efficiency_sweep, default_templates, evaluate, prompt_robustness, sweep_csv, EvalContext, EvalReport, PromptRobustness, SweepRow,
    DEFAULT_FRACTIONS, DEFAULT_THRESHOLDS,
};
use crate::policy::{dims_for, load_checkpoint, save_checkpoint, PolicyConfig, PolicyDims, PolicyParams};
use crate::rewards::RewardConfig;
use crate::seed;
use crate::sft::{prepare_examples, train_sft, write_loss_csv, SftConfig, SftOutcome};
use crate::vocab::Vocabulary;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Generator settings of the training split.
    pub generator: GeneratorConfig,
    /// Images in the held-out split, which always has exact boxes.
    pub heldout_n: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { generator: GeneratorConfig { n: 2000, annotation_noise: 0.8, ..GeneratorConfig::default() }, heldout_n: 500 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Side of the square pixel-encoder patch.
    pub patch: usize,
    /// Connector output width `d_m`.
    pub d_m: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { patch: 2, d_m: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub thresholds: Vec<f64>,
    /// Data fractions of the efficiency sweep.
    pub fractions: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { thresholds: DEFAULT_THRESHOLDS.to_vec(), fractions: DEFAULT_FRACTIONS.to_vec() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every stage seed is derived from it.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub policy: PolicyConfig,
    pub sft: SftConfig,
    pub rft: GrpoConfig,
    pub rewards: RewardConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            out_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            encoder: EncoderConfig::default(),
            policy: PolicyConfig::default(),
            sft: SftConfig::default(),
            rft: GrpoConfig::default(),
            rewards: RewardConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Reads a JSON or (by `.toml` extension) TOML file.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))
        } else {
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
        }
    }

    /// Applies a `dotted.path=value` override. The value is read as JSON
    /// when it parses, otherwise as a string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment.split_once('=').ok_or_else(|| Error::Argument(format!("override {assignment:?} is not key=value")))?;
        let key = key.trim();
        let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut tree = serde_json::to_value(&*self)?;
        let mut node = &mut tree;
        for part in key.split('.') {
            node = node
                .as_object_mut()
                .and_then(|m| m.get_mut(part))
                .ok_or_else(|| Error::Config(format!("{key}: unknown configuration key")))?;
        }
        *node = value;
        *self = serde_json::from_value(tree).map_err(|e| Error::Config(format!("{key}: {e}")))?;
        Ok(())
    }

    /// Fills the stage seeds from the master seed and validates.
    pub fn resolve(mut self) -> Result<Self> {
        self.sft.seed = seed::derive(self.seed, "sft");
        self.rft.seed = seed::derive(self.seed, "rft");
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.generator.validate()?;
        if self.data.heldout_n == 0 {
            return Err(Error::Config("data.heldout_n: must be positive".into()));
        }
        self.policy.validate()?;
        self.sft.validate()?;
        self.rft.validate()?;
        self.rewards.validate()?;
        if self.encoder.d_m == 0 {
            return Err(Error::Config("encoder.d_m: must be positive".into()));
        }
        if self.eval.thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::Config("eval.thresholds: must lie in [0, 1]".into()));
        }
        if self.eval.fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return Err(Error::Config("eval.fractions: must lie in (0, 1]".into()));
        }
        self.dims().map(|_| ())
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::new(self.data.generator.height.max(self.data.generator.width))
    }

    pub fn dims(&self) -> Result<PolicyDims> {
        let g = &self.data.generator;
        dims_for(&self.vocabulary(), g.height, g.width, self.encoder.patch, self.encoder.d_m, &self.policy)
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serialises")
    }

    /// SHA-256 of the canonical (sorted-key) JSON of the configuration,
    /// excluding the output directory.
    pub fn hash(&self) -> String {
        let mut v = self.to_value();
        if let Some(m) = v.as_object_mut() {
            m.remove("out_dir");
        }
        format!("{:x}", Sha256::digest(v.to_string().as_bytes()))
    }
}

/// Artifact locations inside the output directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn train(&self) -> PathBuf {
        self.file("train.jsonl")
    }

    pub fn heldout(&self) -> PathBuf {
        self.file("heldout.jsonl")
    }

    /// `(body, header)` of a named checkpoint.
    pub fn checkpoint(&self, name: &str) -> (PathBuf, PathBuf) {
        (self.file(&format!("{name}.bin")), self.file(&format!("{name}.json")))
    }
}

/// Creates the output directory and writes the resolved configuration.
pub fn prepare_output(cfg: &ExperimentConfig) -> Result<RunPaths> {
    let paths = RunPaths::new(&cfg.out_dir);
    std::fs::create_dir_all(&paths.root).map_err(|e| Error::io(&paths.root, e))?;
    let echo = serde_json::json!({ "config_hash": cfg.hash(), "config": cfg.to_value() });
    write_text(&paths.file("config.resolved.json"), &(serde_json::to_string_pretty(&echo)? + "\n"))?;
    Ok(paths)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `<artifact>.meta.json` recording the producing configuration.
pub fn write_sidecar(artifact: &Path, cfg: &ExperimentConfig, extra: Value) -> Result<()> {
    let mut meta = serde_json::json!({ "artifact": artifact.file_name().map(|n| n.to_string_lossy()), "config_hash": cfg.hash() });
    if let (Some(m), Value::Object(e)) = (meta.as_object_mut(), extra) {
        m.extend(e);
    }
    let mut name = artifact.as_os_str().to_owned();
    name.push(".meta.json");
    write_text(Path::new(&name), &(serde_json::to_string_pretty(&meta)? + "\n"))
}

fn write_split(split: &DatasetSplit, path: &Path, cfg: &ExperimentConfig) -> Result<()> {
    write_jsonl(split, path)?;
    write_sidecar(path, cfg, serde_json::json!({ "records": split.len(), "provenance": split.provenance }))
}

/// Training split and exact-box held-out split.
pub fn generate_splits(cfg: &ExperimentConfig) -> Result<(DatasetSplit, DatasetSplit)> {
    let train = generate_planted_shapes(&cfg.data.generator, seed::derive(cfg.seed, "data-train"))?;
    let heldout_cfg = GeneratorConfig { n: cfg.data.heldout_n, annotation_noise: 0.0, ..cfg.data.generator.clone() };
    let heldout = generate_planted_shapes(&heldout_cfg, seed::derive(cfg.seed, "data-heldout"))?;
    Ok((train, heldout))
}

pub fn gen_data_stage(cfg: &ExperimentConfig, paths: &RunPaths) -> Result<(DatasetSplit, DatasetSplit)> {
    let (train, heldout) = generate_splits(cfg)?;
    write_split(&train, &paths.train(), cfg)?;
    write_split(&heldout, &paths.heldout(), cfg)?;
    Ok((train, heldout))
}

pub fn load_split(path: &Path) -> Result<DatasetSplit> {
    load_jsonl(path, None)
}

/// Freshly initialised policy for the configuration.
pub fn initial_params(cfg: &ExperimentConfig) -> Result<PolicyParams> {
    Ok(PolicyParams::init(cfg.dims()?, &cfg.policy, seed::derive(cfg.seed, "policy")))
}

pub fn run_sft(cfg: &ExperimentConfig, train: &DatasetSplit) -> Result<(PolicyParams, SftOutcome)> {
    let initial = initial_params(cfg)?;
    let examples = prepare_examples(&initial, &cfg.vocabulary(), train, cfg.encoder.patch)?;
    let outcome = train_sft(&initial, &examples, &cfg.sft)?;
    Ok((initial, outcome))
}

pub fn save_params(params: &PolicyParams, name: &str, cfg: &ExperimentConfig, paths: &RunPaths) -> Result<()> {
    let (bin, header) = paths.checkpoint(name);
    save_checkpoint(params, &bin, &header, Some(cfg.hash()))
}

pub fn load_params(name: &str, cfg: &ExperimentConfig, paths: &RunPaths) -> Result<PolicyParams> {
    let (bin, header) = paths.checkpoint(name);
    load_checkpoint(&bin, &header, Some(&cfg.dims()?))
}

pub fn train_sft_stage(cfg: &ExperimentConfig, paths: &RunPaths, train: &DatasetSplit) -> Result<PolicyParams> {
    let (_, outcome) = run_sft(cfg, train)?;
    save_params(&outcome.params, "sft", cfg, paths)?;
    let csv = paths.file("sft_loss.csv");
    write_loss_csv(&csv, &outcome.losses)?;
    write_sidecar(&csv, cfg, serde_json::json!({ "steps": outcome.losses.len() }))?;
    Ok(outcome.params)
}

pub fn run_rft(cfg: &ExperimentConfig, train: &DatasetSplit, sft: &PolicyParams) -> Result<(DatasetSplit, RftOutcome)> {
    let subset = select_rft_subset(train, &cfg.rft)?;
    let examples = prepare_rft_examples(sft, &subset, cfg.encoder.patch)?;
    let outcome = train_rft(sft, &examples, &cfg.rft, &cfg.vocabulary(), &cfg.rewards)?;
    Ok((subset, outcome))
}

pub fn train_rft_stage(cfg: &ExperimentConfig, paths: &RunPaths, train: &DatasetSplit, sft: &PolicyParams) -> Result<PolicyParams> {
    let (subset, outcome) = run_rft(cfg, train, sft)?;
    save_params(&outcome.params, "rft", cfg, paths)?;
    let csv = paths.file("rft_diagnostics.csv");
    write_diagnostics_csv(&csv, &outcome.diagnostics)?;
    write_sidecar(&csv, cfg, serde_json::json!({ "subset_size": subset.len(), "subset_provenance": subset.provenance }))?;
    Ok(outcome.params)
}

pub fn eval_context<'a>(cfg: &'a ExperimentConfig, vocab: &'a Vocabulary) -> EvalContext<'a> {
    EvalContext { vocab, patch: cfg.encoder.patch, thresholds: &cfg.eval.thresholds }
}

/// Evaluates `params` on `split` and stamps the report with the configuration.
pub fn evaluate_with(cfg: &ExperimentConfig, params: &PolicyParams, split: &DatasetSplit) -> Result<EvalReport> {
    let vocab = cfg.vocabulary();
    let mut report = evaluate(params, split, &eval_context(cfg, &vocab), None)?;
    report.config_hash = Some(cfg.hash());
    report.config = cfg.to_value();
    if let Some(m) = report.config.as_object_mut() {
        m.remove("out_dir");
    }
    Ok(report)
}

pub fn write_report(report: &EvalReport, name: &str, cfg: &ExperimentConfig, paths: &RunPaths) -> Result<()> {
    write_text(&paths.file(&format!("{name}.json")), &report.to_json()?)?;
    let csv = paths.file(&format!("{name}.csv"));
    write_text(&csv, &report.to_csv())?;
    write_sidecar(&csv, cfg, Value::Null)
}

pub fn sweep_stage(
    cfg: &ExperimentConfig,
    paths: &RunPaths,
    train: &DatasetSplit,
    heldout: &DatasetSplit,
    sft: &PolicyParams,
) -> Result<Vec<SweepRow>> {
    let vocab = cfg.vocabulary();
    let mut rows = data_efficiency_sweep(sft, train, heldout, &cfg.eval.fractions, &cfg.rft, &cfg.rewards, &eval_context(cfg, &vocab))?;
    for row in &mut rows {
        row.report.config_hash = Some(cfg.hash());
    }
    let csv = paths.file("sweep.csv");
    write_text(&csv, &sweep_csv(&rows))?;
    write_sidecar(&csv, cfg, serde_json::json!({ "fractions": cfg.eval.fractions }))?;
    write_text(&paths.file("sweep.json"), &(serde_json::to_string_pretty(&rows)? + "\n"))?;
    Ok(rows)
}

pub fn robustness(cfg: &ExperimentConfig, params: &PolicyParams, heldout: &DatasetSplit) -> Result<PromptRobustness> {
    let vocab = cfg.vocabulary();
    prompt_robustness(params, heldout, &eval_context(cfg, &vocab), &default_templates())
}

/// Everything the end-to-end pipeline produces.
#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub train: DatasetSplit,
    pub heldout: DatasetSplit,
    pub initial: PolicyParams,
    pub sft: PolicyParams,
    pub rft: PolicyParams,
    pub sft_report: EvalReport,
    pub rft_report: EvalReport,
}

/// Generate, SFT, RFT and evaluate, writing every artifact.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<PipelineOutcome> {
    let paths = prepare_output(cfg)?;
    let (train, heldout) = gen_data_stage(cfg, &paths)?;
    let initial = initial_params(cfg)?;
    let sft = train_sft_stage(cfg, &paths, &train)?;
    let sft_report = evaluate_with(cfg, &sft, &heldout)?;
    write_report(&sft_report, "eval_sft", cfg, &paths)?;
    let rft = train_rft_stage(cfg, &paths, &train, &sft)?;
    let rft_report = evaluate_with(cfg, &rft, &heldout)?;
    write_report(&rft_report, "eval_rft", cfg, &paths)?;
    Ok(PipelineOutcome { train, heldout, initial, sft, rft, sft_report, rft_report })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_follow_dotted_paths() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_override("rft.group_size=4").unwrap();
        cfg.apply_override("out_dir=/tmp/x").unwrap();
        cfg.apply_override("sft.optimizer.kind=\"sgd\"").unwrap();
        assert_eq!(cfg.rft.group_size, 4);
        assert_eq!(cfg.out_dir, PathBuf::from("/tmp/x"));
        assert_eq!(cfg.sft.optimizer.kind, crate::optim::OptimizerKind::Sgd);
        let err = cfg.apply_override("rft.groupsize=4").unwrap_err().to_string();
        assert!(err.contains("rft.groupsize"), "{err}");
        assert!(cfg.apply_override("rft.group_size=\"many\"").is_err());
        assert!(cfg.apply_override("novalue").is_err());
    }

    #[test]
    fn resolution_derives_seeds_and_validates() {
        let a = ExperimentConfig::default().resolve().unwrap();
        let b = ExperimentConfig { seed: 8, ..ExperimentConfig::default() }.resolve().unwrap();
        assert_ne!(a.sft.seed, b.sft.seed);
        assert_ne!(a.hash(), b.hash());
        let moved = ExperimentConfig { out_dir: "elsewhere".into(), ..a.clone() };
        assert_eq!(moved.hash(), a.hash());
        let mut bad = ExperimentConfig::default();
        bad.apply_override("rft.group_size=1").unwrap();
        assert!(bad.resolve().unwrap_err().to_string().contains("rft.group_size"));
    }

    #[test]
    fn toml_and_json_files() {
        let dir = tempfile::tempdir().unwrap();
        let toml_path = dir.path().join("c.toml");
        std::fs::write(&toml_path, "seed = 3\n[rft]\ngroup_size = 6\n").unwrap();
        let cfg = ExperimentConfig::from_path(&toml_path).unwrap();
        assert_eq!((cfg.seed, cfg.rft.group_size), (3, 6));
        let json_path = dir.path().join("c.json");
        std::fs::write(&json_path, r#"{"seed": 4, "sft": {"steps": 5}}"#).unwrap();
        let cfg = ExperimentConfig::from_path(&json_path).unwrap();
        assert_eq!((cfg.seed, cfg.sft.steps), (4, 5));
        std::fs::write(&json_path, r#"{"sedd": 4}"#).unwrap();
        assert!(ExperimentConfig::from_path(&json_path).is_err());
    }
}
