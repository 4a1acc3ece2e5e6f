//! Sequential fine-tuning with asynchronous model replacement.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureSet;
use crate::hyperball::mix_seed;
use crate::simplex::{Phase, SimplexClassifier};

use super::data::{Dataset, ReplayMemory};
use super::network::{LinearHead, Provenance, RepresentationModel};
use super::train::{train_er, train_model, LabelMap, LossHistory};
use super::{HocConfig, Method};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub classes: Vec<u32>,
    /// Samples per class taken from the front of each class in the pool.
    pub samples_per_class: usize,
}

#[derive(Debug, Clone)]
pub struct TaskSequence {
    pub tasks: Vec<TaskSpec>,
    /// Pool holding the samples of every task class.
    pub data: Dataset,
    /// Model the sequence starts from.
    pub initial: RepresentationModel,
    /// 0-based task index → pre-trained model swapped in before that task.
    pub replacements: BTreeMap<usize, RepresentationModel>,
    pub memory_per_class: usize,
}

impl TaskSequence {
    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::Invalid("task sequence is empty".into()));
        }
        let mut seen = Vec::new();
        for (t, task) in self.tasks.iter().enumerate() {
            if task.classes.is_empty() {
                return Err(Error::Invalid(format!("task {t} has no classes")));
            }
            for c in &task.classes {
                if seen.contains(c) {
                    return Err(Error::Invalid(format!(
                        "class {c} appears in more than one task"
                    )));
                }
                seen.push(*c);
            }
        }
        for &t in self.replacements.keys() {
            if t >= self.tasks.len() {
                return Err(Error::Invalid(format!(
                    "replacement at task {t} but the sequence has {} tasks",
                    self.tasks.len()
                )));
            }
        }
        Ok(())
    }

    pub fn task_data(&self, t: usize) -> Dataset {
        let task = &self.tasks[t];
        let mut taken: BTreeMap<u32, usize> = BTreeMap::new();
        let idx: Vec<usize> = (0..self.data.len())
            .filter(|&i| {
                let l = self.data.labels[i];
                if !task.classes.contains(&l) {
                    return false;
                }
                let c = taken.entry(l).or_default();
                *c += 1;
                *c <= task.samples_per_class
            })
            .collect();
        self.data.select(&idx)
    }
}

/// Label under which a fine-tuning class is registered on the simplex.
pub fn finetune_label(class: u32) -> String {
    format!("ft{class}")
}

/// Label under which a pre-training class is registered on the simplex.
pub fn pretrain_label(class: u32) -> String {
    format!("pt{class}")
}

#[derive(Debug, Clone)]
pub struct SequenceStep {
    pub task: usize,
    pub features: FeatureSet,
    pub model: RepresentationModel,
    pub head: Option<LinearHead>,
    pub history: LossHistory,
}

/// Runs the sequence. At every task: swap in a scheduled replacement, fine-tune,
/// grow the replay memory with the new classes, then embed `eval`.
///
/// The contrastive term of `hoc` always uses the model that finished the
/// previous task (the initial model for task 0), also right after a
/// replacement.
pub fn run_sequence(
    seq: &TaskSequence,
    eval: &Dataset,
    cls: &mut SimplexClassifier,
    cfg: &HocConfig,
    method: Method,
    seed: u64,
) -> Result<Vec<SequenceStep>> {
    seq.validate()?;
    cfg.validate()?;
    let uses_simplex = method != Method::ErBaseline;
    let mut cfg = cfg.clone();
    if method == Method::SceOnly {
        cfg.lambda = 1.0;
    }
    let check_dim = |m: &RepresentationModel, reference: usize| -> Result<()> {
        if m.embedding_dim() != reference {
            return Err(Error::DimensionMismatch {
                expected: reference,
                actual: m.embedding_dim(),
            });
        }
        Ok(())
    };
    let reference_dim = if uses_simplex {
        cls.dim()
    } else {
        seq.initial.embedding_dim()
    };
    check_dim(&seq.initial, reference_dim)?;
    for m in seq.replacements.values() {
        check_dim(m, reference_dim)?;
    }

    let mut memory = ReplayMemory::new(seq.memory_per_class, seq.data.input_dim());
    let mut current = seq.initial.clone();
    let mut er_classes: LabelMap = BTreeMap::new();
    let mut steps = Vec::with_capacity(seq.tasks.len());

    for (t, task) in seq.tasks.iter().enumerate() {
        let mut run = || -> Result<SequenceStep> {
            let previous = current.clone();
            let model = match seq.replacements.get(&t) {
                Some(r) => {
                    let mut r = r.clone();
                    r.provenance = Provenance::Replaced;
                    r
                }
                None => current.clone(),
            };
            let data = seq.task_data(t);
            let train_seed = mix_seed(seed, t as u64, 1);
            let mem = (!memory.is_empty()).then_some(&memory);
            let (trained, head, history) = if uses_simplex {
                let names: Vec<String> = task.classes.iter().map(|&c| finetune_label(c)).collect();
                cls.assign_classes(&names, Phase::Finetune)?;
                let map = simplex_label_map(cls, &data, mem)?;
                let old = (cfg.lambda < 1.0).then_some(&previous);
                let (m, h) = train_model(model, &data, &map, cls, &cfg, old, mem, train_seed)?;
                (m, None, h)
            } else {
                for &c in &task.classes {
                    let next = er_classes.len();
                    er_classes.entry(c).or_insert(next);
                }
                let head = LinearHead::new(
                    model.embedding_dim(),
                    er_classes.len(),
                    mix_seed(seed, t as u64, 2),
                );
                let (m, h, hist) =
                    train_er(model, head, &data, &er_classes, &cfg, mem, train_seed)?;
                (m, Some(h), hist)
            };
            let mut trained = trained;
            if !seq.replacements.contains_key(&t) {
                trained.provenance = Provenance::Finetuned;
            }
            trained.model_id = format!("{}-t{}", method.as_str(), t);
            let features = extract_features(&trained, eval)?;
            Ok(SequenceStep {
                task: t,
                features,
                model: trained,
                head,
                history,
            })
        };
        let step = run().map_err(|e| e.at_task(t))?;
        memory
            .update(&seq.task_data(t))
            .map_err(|e| e.at_task(t))?;
        current = step.model.clone();
        steps.push(step);
    }
    Ok(steps)
}

fn simplex_label_map(
    cls: &SimplexClassifier,
    data: &Dataset,
    memory: Option<&ReplayMemory>,
) -> Result<LabelMap> {
    let mut map = LabelMap::new();
    let mut classes = data.classes();
    if let Some(m) = memory {
        classes.extend(m.data().classes());
    }
    for c in classes {
        let idx = cls
            .index_of(&finetune_label(c))
            .ok_or_else(|| Error::Invalid(format!("class {c} not assigned on the simplex")))?;
        map.insert(c, idx);
    }
    Ok(map)
}

/// Embeds every sample of `data` with `model`.
pub fn extract_features(model: &RepresentationModel, data: &Dataset) -> Result<FeatureSet> {
    let mut fs = FeatureSet::new(model.model_id.clone(), model.embedding_dim());
    for (v, &l) in model.embed(&data.inputs)?.into_iter().zip(&data.labels) {
        fs.push(l, v)?;
    }
    Ok(fs)
}
