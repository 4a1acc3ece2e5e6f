//! End-to-end desk-scale experiments.
//!
//! One run: pre-train the initial and replacement models from scratch on
//! nested synthetic corpora, fine-tune through the task sequence with the
//! selected method, embed a held-out pool of classes never used for training,
//! and evaluate compatibility. Artifacts are plain JSON / CSV / FSET files
//! listed with their SHA-256 in a manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evaluator::{build_report, AcValue, CompatibilityReport, Metric, ReportOptions};
use crate::features::FeatureSet;
use crate::hyperball::mix_seed;
use crate::simplex::{Phase, SimplexClassifier};
use crate::trainer::sequence::{extract_features, pretrain_label, run_sequence, SequenceStep};
use crate::trainer::train::LabelMap;
use crate::trainer::{
    make_synthetic_dataset, train_er, train_model, Dataset, HocConfig, LinearHead, LossHistory,
    Method, RepresentationModel, TaskSequence, TaskSpec,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub cluster_spread: f64,
    /// Samples per class in the fine-tuning tasks.
    pub samples_per_class: usize,
    /// Samples per class in the pre-training corpora.
    pub pretrain_samples_per_class: usize,
    pub eval_classes: usize,
    pub eval_samples_per_class: usize,
    /// Seed offsets for the three disjoint class pools.
    pub pretrain_seed: u64,
    pub finetune_seed: u64,
    pub eval_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            input_dim: 16,
            hidden: vec![64, 64],
            cluster_spread: 1.0,
            samples_per_class: 300,
            pretrain_samples_per_class: 600,
            eval_classes: 10,
            eval_samples_per_class: 100,
            pretrain_seed: 1,
            finetune_seed: 2,
            eval_seed: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceConfig {
    pub tasks: usize,
    pub first_task_classes: usize,
    pub classes_per_task: usize,
    /// 0-based task indices at which a pre-trained model is swapped in.
    pub replacements: Vec<usize>,
    pub memory_per_class: usize,
    /// Corpus size (classes) of the initial model followed by one entry per
    /// replacement; corpora are nested.
    pub pretrain_classes: Vec<usize>,
}

impl Default for SequenceConfig {
    fn default() -> Self {
        Self {
            tasks: 7,
            first_task_classes: 6,
            classes_per_task: 1,
            replacements: vec![2, 4],
            memory_per_class: 20,
            pretrain_classes: vec![8, 16, 24],
        }
    }
}

impl SequenceConfig {
    pub fn total_classes(&self) -> usize {
        self.first_task_classes + self.classes_per_task * self.tasks.saturating_sub(1)
    }

    pub fn task_classes(&self, t: usize) -> std::ops::Range<u32> {
        let start = if t == 0 {
            0
        } else {
            self.first_task_classes + (t - 1) * self.classes_per_task
        };
        let len = if t == 0 {
            self.first_task_classes
        } else {
            self.classes_per_task
        };
        start as u32..(start + len) as u32
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub metric: Metric,
    pub def1_pairs: usize,
    pub gallery_fraction: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            metric: Metric::Cosine,
            def1_pairs: crate::evaluator::DEFAULT_DEF1_PAIRS,
            gallery_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub simplex_k: usize,
    pub data: DataConfig,
    pub sequence: SequenceConfig,
    pub method: Method,
    /// Fine-tuning settings.
    pub hoc: HocConfig,
    /// Settings for training the initial and replacement models from scratch
    /// (`lambda` is ignored).
    pub pretrain: HocConfig,
    pub eval: EvalConfig,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            simplex_k: 48,
            data: DataConfig::default(),
            sequence: SequenceConfig::default(),
            method: Method::Hoc,
            hoc: HocConfig {
                learning_rate: 0.1,
                epochs: 80,
                lr_schedule: vec![(55, 0.1), (72, 0.1)],
                ..HocConfig::default()
            },
            pretrain: HocConfig {
                lambda: 1.0,
                learning_rate: 0.05,
                epochs: 30,
                lr_schedule: vec![(20, 0.1), (26, 0.1)],
                ..HocConfig::default()
            },
            eval: EvalConfig::default(),
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let s = &self.sequence;
        if s.tasks == 0 {
            return Err(Error::Invalid("sequence needs at least one task".into()));
        }
        if s.first_task_classes == 0 || (s.tasks > 1 && s.classes_per_task == 0) {
            return Err(Error::Invalid("every task needs at least one class".into()));
        }
        for &r in &s.replacements {
            if r >= s.tasks {
                return Err(Error::Invalid(format!(
                    "replacement index {r} not below task count {}",
                    s.tasks
                )));
            }
        }
        let mut sorted = s.replacements.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != s.replacements.len() {
            return Err(Error::Invalid("duplicate replacement index".into()));
        }
        if s.pretrain_classes.len() != s.replacements.len() + 1 {
            return Err(Error::Invalid(format!(
                "pretrain_classes needs {} entries (initial model + one per replacement)",
                s.replacements.len() + 1
            )));
        }
        if s.pretrain_classes.iter().any(|&c| c < 2) {
            return Err(Error::Invalid("pre-training corpora need at least 2 classes".into()));
        }
        if self.simplex_k < 2 {
            return Err(Error::SimplexTooSmall(self.simplex_k));
        }
        let max_pre = s.pretrain_classes.iter().copied().max().unwrap_or(0);
        if self.method != Method::ErBaseline && max_pre + s.total_classes() > self.simplex_k {
            return Err(Error::Invalid(format!(
                "{max_pre} pre-training + {} fine-tuning classes exceed the {} pre-allocated prototypes",
                s.total_classes(),
                self.simplex_k
            )));
        }
        if s.total_classes() < 2 {
            return Err(Error::Invalid("fine-tuning needs at least 2 classes".into()));
        }
        if self.data.eval_classes < 2 {
            return Err(Error::Invalid("evaluation pool needs at least 2 classes".into()));
        }
        if !(self.eval.gallery_fraction > 0.0 && self.eval.gallery_fraction < 1.0) {
            return Err(Error::Invalid("gallery_fraction must lie in (0, 1)".into()));
        }
        self.hoc.validate()?;
        self.pretrain.validate()?;
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn embedding_dim(&self) -> usize {
        self.simplex_k - 1
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut s = vec![self.data.input_dim];
        s.extend(&self.data.hidden);
        s.push(self.embedding_dim());
        s
    }
}

/// The three class pools: pre-training, fine-tuning, evaluation.
#[derive(Debug, Clone)]
pub struct Pools {
    pub pretrain: Dataset,
    pub finetune: Dataset,
    pub eval: Dataset,
}

pub fn make_pools(cfg: &ExperimentConfig) -> Result<Pools> {
    let d = &cfg.data;
    let max_pre = cfg.sequence.pretrain_classes.iter().copied().max().unwrap_or(2);
    Ok(Pools {
        pretrain: make_synthetic_dataset(
            max_pre,
            d.pretrain_samples_per_class,
            d.input_dim,
            d.cluster_spread,
            mix_seed(cfg.seed, d.pretrain_seed, 0xDA7A),
        )?,
        finetune: make_synthetic_dataset(
            cfg.sequence.total_classes(),
            d.samples_per_class,
            d.input_dim,
            d.cluster_spread,
            mix_seed(cfg.seed, d.finetune_seed, 0xDA7A),
        )?,
        eval: make_synthetic_dataset(
            d.eval_classes,
            d.eval_samples_per_class,
            d.input_dim,
            d.cluster_spread,
            mix_seed(cfg.seed, d.eval_seed, 0xDA7A),
        )?,
    })
}

#[derive(Debug, Clone)]
pub struct PretrainedModel {
    pub model: RepresentationModel,
    pub head: Option<LinearHead>,
    pub history: LossHistory,
    pub classes: usize,
}

/// Trains the initial model and every replacement from scratch on nested
/// pre-training corpora. Fixed-simplex methods register the corpus classes
/// left-to-right on `cls`; the baseline trains its own linear head.
pub fn pretrain_models(
    cfg: &ExperimentConfig,
    pools: &Pools,
    cls: &mut SimplexClassifier,
) -> Result<Vec<PretrainedModel>> {
    let sizes = cfg.layer_sizes();
    let max_pre = cfg.sequence.pretrain_classes.iter().copied().max().unwrap_or(0);
    if cfg.method != Method::ErBaseline {
        let names: Vec<String> = (0..max_pre as u32).map(pretrain_label).collect();
        cls.assign_classes(&names, Phase::Pretrain)?;
    }
    let mut pcfg = cfg.pretrain.clone();
    pcfg.lambda = 1.0;
    let cls_ref: &SimplexClassifier = cls;
    cfg.sequence
        .pretrain_classes
        .par_iter()
        .enumerate()
        .map(|(i, &n)| {
            let classes: Vec<u32> = (0..n as u32).collect();
            let data = pools.pretrain.filter_classes(&classes);
            let seed = mix_seed(cfg.seed, 0x9E7, i as u64);
            let id = format!("pretrained-{i}-{n}c");
            let model = RepresentationModel::new(&sizes, id, seed)?;
            if cfg.method == Method::ErBaseline {
                let map: LabelMap = classes.iter().map(|&c| (c, c as usize)).collect();
                let head = LinearHead::new(cfg.embedding_dim(), n, mix_seed(seed, 1, 1));
                let (m, h, hist) = train_er(model, head, &data, &map, &pcfg, None, seed)?;
                Ok(PretrainedModel {
                    model: m,
                    head: Some(h),
                    history: hist,
                    classes: n,
                })
            } else {
                let map: LabelMap = classes
                    .iter()
                    .map(|&c| {
                        let idx = cls_ref
                            .index_of(&pretrain_label(c))
                            .expect("pre-training classes were just assigned");
                        (c, idx)
                    })
                    .collect();
                let (m, hist) = train_model(model, &data, &map, cls_ref, &pcfg, None, None, seed)?;
                Ok(PretrainedModel {
                    model: m,
                    head: None,
                    history: hist,
                    classes: n,
                })
            }
        })
        .collect()
}

pub fn build_sequence(cfg: &ExperimentConfig, pools: &Pools, pretrained: &[PretrainedModel]) -> TaskSequence {
    let s = &cfg.sequence;
    let tasks = (0..s.tasks)
        .map(|t| TaskSpec {
            classes: s.task_classes(t).collect(),
            samples_per_class: cfg.data.samples_per_class,
        })
        .collect();
    let replacements: BTreeMap<usize, RepresentationModel> = s
        .replacements
        .iter()
        .enumerate()
        .map(|(i, &t)| (t, pretrained[i + 1].model.clone()))
        .collect();
    TaskSequence {
        tasks,
        data: pools.finetune.clone(),
        initial: pretrained[0].model.clone(),
        replacements,
        memory_per_class: s.memory_per_class,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ExperimentConfig,
    pub artifacts: Vec<ArtifactEntry>,
    pub versions: BTreeMap<String, String>,
    pub wall_clock_seconds: f64,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes files below one directory and records their hashes.
struct ArtifactWriter {
    root: PathBuf,
    entries: Vec<ArtifactEntry>,
}

impl ArtifactWriter {
    fn new(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root)?;
        Ok(Self {
            root: root.to_path_buf(),
            entries: Vec::new(),
        })
    }

    fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&path, bytes)?;
        self.entries.push(ArtifactEntry {
            path: rel.to_string(),
            sha256: hex::encode(Sha256::digest(bytes)),
            bytes: bytes.len() as u64,
        });
        Ok(())
    }

    fn finish(mut self, cfg: &ExperimentConfig, started: Instant) -> Result<Vec<ArtifactEntry>> {
        let mut versions = BTreeMap::new();
        versions.insert(
            env!("CARGO_PKG_NAME").to_string(),
            env!("CARGO_PKG_VERSION").to_string(),
        );
        versions.insert("fset".to_string(), crate::features::FSET_VERSION.to_string());
        let manifest = Manifest {
            config: cfg.clone(),
            artifacts: self.entries.clone(),
            versions,
            wall_clock_seconds: started.elapsed().as_secs_f64(),
        };
        let text = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(self.root.join(MANIFEST_FILE), text)?;
        Ok(std::mem::take(&mut self.entries))
    }
}

/// Re-hashes every artifact listed in the manifest under `dir`; returns the
/// paths that are missing or changed.
pub fn verify_manifest(dir: &Path) -> Result<Vec<String>> {
    let manifest: Manifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    let mut bad = Vec::new();
    for a in &manifest.artifacts {
        match std::fs::read(dir.join(&a.path)) {
            Ok(bytes) if hex::encode(Sha256::digest(&bytes)) == a.sha256 => {}
            _ => bad.push(a.path.clone()),
        }
    }
    Ok(bad)
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub report: CompatibilityReport,
    pub steps: Vec<SequenceStep>,
    pub pretrained: Vec<PretrainedModel>,
    pub simplex: SimplexClassifier,
    pub artifacts: Vec<ArtifactEntry>,
}

impl ExperimentOutcome {
    pub fn feature_sets(&self) -> Vec<FeatureSet> {
        self.steps.iter().map(|s| s.features.clone()).collect()
    }
}

pub fn report_options(cfg: &ExperimentConfig) -> ReportOptions {
    ReportOptions {
        metric: cfg.eval.metric,
        gallery_fraction: cfg.eval.gallery_fraction,
        def1_pairs: cfg.eval.def1_pairs,
        seed: mix_seed(cfg.seed, 0xE7A1, 0),
    }
}

/// Pre-training, the task sequence and evaluation, persisted to
/// `cfg.output_dir` when set.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let started = Instant::now();
    cfg.validate()?;
    let pools = make_pools(cfg)?;
    let mut cls = SimplexClassifier::build(cfg.simplex_k)?;
    log::info!("pre-training {} models", cfg.sequence.pretrain_classes.len());
    let pretrained = pretrain_models(cfg, &pools, &mut cls)?;
    let seq = build_sequence(cfg, &pools, &pretrained);
    log::info!("running {} tasks with {}", cfg.sequence.tasks, cfg.method.as_str());
    let steps = run_sequence(
        &seq,
        &pools.eval,
        &mut cls,
        &cfg.hoc,
        cfg.method,
        mix_seed(cfg.seed, 0x5E0, 0),
    )?;
    let feature_sets: Vec<FeatureSet> = steps.iter().map(|s| s.features.clone()).collect();
    let report = build_report(&feature_sets, &report_options(cfg))?;

    let artifacts = match &cfg.output_dir {
        Some(dir) => persist(cfg, dir, &cls, &pretrained, &steps, &report, started)?,
        None => Vec::new(),
    };
    Ok(ExperimentOutcome {
        report,
        steps,
        pretrained,
        simplex: cls,
        artifacts,
    })
}

fn persist(
    cfg: &ExperimentConfig,
    dir: &Path,
    cls: &SimplexClassifier,
    pretrained: &[PretrainedModel],
    steps: &[SequenceStep],
    report: &CompatibilityReport,
    started: Instant,
) -> Result<Vec<ArtifactEntry>> {
    let mut w = ArtifactWriter::new(dir)?;
    w.write("config.json", cfg.to_json()?.as_bytes())?;
    if cfg.method != Method::ErBaseline {
        w.write(
            "simplex.json",
            serde_json::to_string_pretty(&cls.to_document())?.as_bytes(),
        )?;
    }
    for (i, p) in pretrained.iter().enumerate() {
        let ck = p.model.to_checkpoint(p.head.as_ref());
        w.write(&format!("pretrained/model_{i}.json"), serde_json::to_string(&ck)?.as_bytes())?;
        w.write(&format!("pretrained/loss_{i}.csv"), p.history.to_csv().as_bytes())?;
    }
    for s in steps {
        let t = s.task + 1;
        let ck = s.model.to_checkpoint(s.head.as_ref());
        w.write(&format!("checkpoints/task_{t:02}.json"), serde_json::to_string(&ck)?.as_bytes())?;
        w.write(&format!("features/task_{t:02}.fset"), &s.features.to_bytes())?;
        w.write(&format!("losses/task_{t:02}.csv"), s.history.to_csv().as_bytes())?;
    }
    w.write("report.json", report.to_json()?.as_bytes())?;
    w.write("matrix.csv", report.matrix.to_csv().as_bytes())?;
    w.finish(cfg, started)
}

/// Pre-training only; checkpoints written to `cfg.output_dir` when set.
pub fn run_pretrain(cfg: &ExperimentConfig) -> Result<Vec<PretrainedModel>> {
    let started = Instant::now();
    cfg.validate()?;
    let pools = make_pools(cfg)?;
    let mut cls = SimplexClassifier::build(cfg.simplex_k)?;
    let pretrained = pretrain_models(cfg, &pools, &mut cls)?;
    if let Some(dir) = &cfg.output_dir {
        let mut w = ArtifactWriter::new(dir)?;
        w.write("config.json", cfg.to_json()?.as_bytes())?;
        for (i, p) in pretrained.iter().enumerate() {
            let ck = p.model.to_checkpoint(p.head.as_ref());
            w.write(&format!("pretrained/model_{i}.json"), serde_json::to_string(&ck)?.as_bytes())?;
            w.write(&format!("pretrained/loss_{i}.csv"), p.history.to_csv().as_bytes())?;
            let fs = extract_features(&p.model, &pools.eval)?;
            w.write(&format!("pretrained/eval_{i}.fset"), &fs.to_bytes())?;
        }
        w.finish(cfg, started)?;
    }
    Ok(pretrained)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Lambda,
    Tau,
    LearningRate,
    MemoryPerClass,
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda" => Ok(Self::Lambda),
            "tau" => Ok(Self::Tau),
            "learning_rate" | "lr" => Ok(Self::LearningRate),
            "memory_per_class" | "memory" => Ok(Self::MemoryPerClass),
            other => Err(Error::Invalid(format!("unknown ablation axis {other:?}"))),
        }
    }
}

impl AblationAxis {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Lambda => "lambda",
            Self::Tau => "tau",
            Self::LearningRate => "learning_rate",
            Self::MemoryPerClass => "memory_per_class",
        }
    }
}

/// A sweep value; `All` only applies to the memory axis and stores every
/// sample of a class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum AblationValue {
    Number(f64),
    All,
}

impl FromStr for AblationValue {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            return Ok(Self::All);
        }
        s.parse::<f64>()
            .map(Self::Number)
            .map_err(|_| Error::Invalid(format!("bad sweep value {s:?}")))
    }
}

impl std::fmt::Display for AblationValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Number(v) => write!(f, "{v}"),
            Self::All => f.write_str("all"),
        }
    }
}

pub fn apply_ablation(
    base: &ExperimentConfig,
    axis: AblationAxis,
    value: AblationValue,
) -> Result<ExperimentConfig> {
    let mut cfg = base.clone();
    let num = |v: AblationValue| match v {
        AblationValue::Number(x) => Ok(x),
        AblationValue::All => Err(Error::Invalid(format!(
            "\"all\" is only valid on the memory axis, not {}",
            axis.as_str()
        ))),
    };
    match axis {
        AblationAxis::Lambda => cfg.hoc.lambda = num(value)?,
        AblationAxis::Tau => cfg.hoc.tau = num(value)?,
        AblationAxis::LearningRate => cfg.hoc.learning_rate = num(value)?,
        AblationAxis::MemoryPerClass => {
            cfg.sequence.memory_per_class = match value {
                AblationValue::All => cfg.data.samples_per_class,
                AblationValue::Number(x) if x >= 0.0 && x.fract() == 0.0 => x as usize,
                AblationValue::Number(x) => {
                    return Err(Error::Invalid(format!("memory size {x} is not a count")))
                }
            }
        }
    }
    if let (Some(dir), AblationValue::Number(_) | AblationValue::All) = (&base.output_dir, value) {
        cfg.output_dir = Some(dir.join(format!("{}_{}", axis.as_str(), value)));
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AblationRow {
    pub value: AblationValue,
    pub ac: AcValue,
    pub aa_final: f64,
}

/// One full experiment per value on the shared seed. Sweep points run in
/// parallel; each point is itself deterministic.
pub fn run_ablation(
    base: &ExperimentConfig,
    axis: AblationAxis,
    values: &[AblationValue],
) -> Result<Vec<AblationRow>> {
    let configs = values
        .iter()
        .map(|&v| apply_ablation(base, axis, v))
        .collect::<Result<Vec<_>>>()?;
    configs
        .par_iter()
        .zip(values.par_iter())
        .map(|(cfg, &value)| {
            let out = run_experiment(cfg)?;
            Ok(AblationRow {
                value,
                ac: out.report.ac,
                aa_final: out.report.aa_final(),
            })
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("value,ac,aa_final\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", r.value, r.ac, r.aa_final);
    }
    out
}
