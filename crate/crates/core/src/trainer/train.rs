use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hyperball::mix_seed;
use crate::linalg::Matrix;
use crate::simplex::SimplexClassifier;

use super::data::{Dataset, ReplayMemory};
use super::losses::{hoc_loss, softmax_cross_entropy};
use super::network::{Gradients, LinearHead, RepresentationModel};
use super::optim::{slots, Sgd};
use super::HocConfig;

/// Dataset class label → target index (prototype row, or head column).
pub type LabelMap = BTreeMap<u32, usize>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_sce: f64,
    pub loss_nce: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossHistory {
    pub epochs: Vec<EpochLoss>,
}

impl LossHistory {
    pub fn totals(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss_total).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss_total,loss_sce,loss_nce\n");
        for e in &self.epochs {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                e.epoch, e.loss_total, e.loss_sce, e.loss_nce
            );
        }
        out
    }
}

/// Loss value, its components and parameter gradients for one batch.
pub struct BatchResult {
    pub loss: f64,
    pub sce: f64,
    pub nce: f64,
    pub grads: Gradients,
}

/// Forward + HOC loss + backward on one batch. `old_features` are the frozen
/// previous model's features of the same inputs.
pub fn hoc_batch(
    model: &RepresentationModel,
    inputs: &Matrix,
    targets: &[usize],
    old_features: Option<&Matrix>,
    cls: &SimplexClassifier,
    cfg: &HocConfig,
) -> Result<BatchResult> {
    let cache = model.forward_cached(inputs)?;
    let out = hoc_loss(cache.output(), targets, old_features, cls, cfg)?;
    let grads = model.backward(&cache, &out.grad);
    Ok(BatchResult {
        loss: out.loss,
        sce: out.sce.unwrap_or(0.0),
        nce: out.nce.unwrap_or(0.0),
        grads,
    })
}

fn training_pool(data: &Dataset, memory: Option<&ReplayMemory>) -> Result<Dataset> {
    match memory {
        Some(m) if !m.is_empty() => data.concat(m.data()),
        _ => Ok(data.clone()),
    }
}

fn targets_for(pool: &Dataset, map: &LabelMap) -> Result<Vec<usize>> {
    pool.labels
        .iter()
        .map(|l| {
            map.get(l)
                .copied()
                .ok_or_else(|| Error::Invalid(format!("class {l} has no assigned target")))
        })
        .collect()
}

fn epoch_batches(n: usize, batch: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, epoch as u64, 0xBA7C));
    order.shuffle(&mut rng);
    order
        .chunks(batch)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

/// Mini-batch SGD on task data plus replay memory against the fixed simplex.
///
/// With `cfg.lambda < 1` the contrastive term is computed against `old_model`
/// (required). Optimiser state starts fresh.
#[allow(clippy::too_many_arguments)]
pub fn train_model(
    mut model: RepresentationModel,
    data: &Dataset,
    labels: &LabelMap,
    cls: &SimplexClassifier,
    cfg: &HocConfig,
    old_model: Option<&RepresentationModel>,
    memory: Option<&ReplayMemory>,
    seed: u64,
) -> Result<(RepresentationModel, LossHistory)> {
    cfg.validate()?;
    if model.embedding_dim() != cls.dim() {
        return Err(Error::DimensionMismatch {
            expected: cls.dim(),
            actual: model.embedding_dim(),
        });
    }
    if cfg.lambda < 1.0 && old_model.is_none() {
        return Err(Error::Invalid(
            "lambda < 1 needs a previous model for the contrastive term".into(),
        ));
    }
    let pool = training_pool(data, memory)?;
    let targets = targets_for(&pool, labels)?;
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut history = LossHistory::default();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let (mut sum, mut sum_sce, mut sum_nce, mut count) = (0.0, 0.0, 0.0, 0usize);
        for batch in epoch_batches(pool.len(), cfg.batch_size, seed, epoch) {
            let x = pool.select(&batch).inputs;
            let y: Vec<usize> = batch.iter().map(|&i| targets[i]).collect();
            let old = match old_model {
                Some(m) if cfg.lambda < 1.0 => Some(m.forward(&x)?),
                _ => None,
            };
            let r = hoc_batch(&model, &x, &y, old.as_ref(), cls, cfg)?;
            if !r.loss.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            opt.step(
                lr,
                slots(
                    &mut model.weights,
                    &mut model.biases,
                    &r.grads.weights,
                    &r.grads.biases,
                ),
            );
            sum += r.loss;
            sum_sce += r.sce;
            sum_nce += r.nce;
            count += 1;
        }
        let c = count.max(1) as f64;
        let e = EpochLoss {
            epoch,
            loss_total: sum / c,
            loss_sce: sum_sce / c,
            loss_nce: sum_nce / c,
        };
        if !e.loss_total.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        history.epochs.push(e);
    }
    Ok((model, history))
}

/// Plain cross-entropy through a trainable linear head (the experience-replay
/// baseline). Both the network and the head are updated.
#[allow(clippy::too_many_arguments)]
pub fn train_er(
    mut model: RepresentationModel,
    mut head: LinearHead,
    data: &Dataset,
    labels: &LabelMap,
    cfg: &HocConfig,
    memory: Option<&ReplayMemory>,
    seed: u64,
) -> Result<(RepresentationModel, LinearHead, LossHistory)> {
    cfg.validate()?;
    if head.weight.rows() != model.embedding_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.embedding_dim(),
            actual: head.weight.rows(),
        });
    }
    let pool = training_pool(data, memory)?;
    let targets = targets_for(&pool, labels)?;
    if let Some(&t) = targets.iter().find(|&&t| t >= head.classes()) {
        return Err(Error::UnassignedLabel(t));
    }
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut history = LossHistory::default();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let (mut sum, mut count) = (0.0, 0usize);
        for batch in epoch_batches(pool.len(), cfg.batch_size, seed, epoch) {
            let x = pool.select(&batch).inputs;
            let y: Vec<usize> = batch.iter().map(|&i| targets[i]).collect();
            let cache = model.forward_cached(&x)?;
            let feats = cache.output();
            let ce = softmax_cross_entropy(&head.forward(feats), &y)?;
            if !ce.loss.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            let (gw, gb, gf) = head.backward(feats, &ce.grad);
            let g = model.backward(&cache, &gf);
            let mut params_w: Vec<Matrix> = std::mem::take(&mut model.weights);
            let mut params_b: Vec<Vec<f64>> = std::mem::take(&mut model.biases);
            params_w.push(std::mem::replace(&mut head.weight, Matrix::zeros(0, 0)));
            params_b.push(std::mem::take(&mut head.bias));
            let mut grads_w = g.weights;
            let mut grads_b = g.biases;
            grads_w.push(gw);
            grads_b.push(gb);
            opt.step(lr, slots(&mut params_w, &mut params_b, &grads_w, &grads_b));
            head.weight = params_w.pop().expect("head weight");
            head.bias = params_b.pop().expect("head bias");
            model.weights = params_w;
            model.biases = params_b;
            sum += ce.loss;
            count += 1;
        }
        let total = sum / count.max(1) as f64;
        if !total.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        history.epochs.push(EpochLoss {
            epoch,
            loss_total: total,
            loss_sce: total,
            loss_nce: 0.0,
        });
    }
    Ok((model, head, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simplex::Phase;
    use crate::trainer::data::make_synthetic_dataset;

    fn setup(classes: usize) -> (Dataset, LabelMap, SimplexClassifier) {
        let ds = make_synthetic_dataset(classes, 40, 8, 0.3, 5).unwrap();
        let mut cls = SimplexClassifier::build(8).unwrap();
        let names: Vec<String> = (0..classes).map(|c| format!("c{c}")).collect();
        let a = cls.assign_classes(&names, Phase::Finetune).unwrap();
        let map = a
            .iter()
            .enumerate()
            .map(|(c, a)| (c as u32, a.prototype_index))
            .collect();
        (ds, map, cls)
    }

    #[test]
    fn sce_descends() {
        let (ds, map, cls) = setup(5);
        let model = RepresentationModel::new(&[8, 16, 7], "m", 1).unwrap();
        let cfg = HocConfig {
            lambda: 1.0,
            learning_rate: 0.05,
            epochs: 30,
            batch_size: 32,
            ..Default::default()
        };
        let (_, h) = train_model(model, &ds, &map, &cls, &cfg, None, None, 3).unwrap();
        let t = h.totals();
        assert_eq!(t.len(), 30);
        assert!(t[29] < t[0]);
    }

    #[test]
    fn zero_lr_leaves_parameters_untouched() {
        let (ds, map, cls) = setup(3);
        let model = RepresentationModel::new(&[8, 16, 7], "m", 1).unwrap();
        let old = RepresentationModel::new(&[8, 16, 7], "o", 2).unwrap();
        let cfg = HocConfig {
            learning_rate: 0.0,
            epochs: 3,
            batch_size: 16,
            ..Default::default()
        };
        let (trained, _) =
            train_model(model.clone(), &ds, &map, &cls, &cfg, Some(&old), None, 3).unwrap();
        assert_eq!(trained, model);
    }

    #[test]
    fn missing_old_model_rejected() {
        let (ds, map, cls) = setup(3);
        let model = RepresentationModel::new(&[8, 16, 7], "m", 1).unwrap();
        let cfg = HocConfig {
            epochs: 1,
            ..Default::default()
        };
        assert!(train_model(model, &ds, &map, &cls, &cfg, None, None, 0).is_err());
    }

    #[test]
    fn divergence_is_reported_with_epoch() {
        let (ds, map, cls) = setup(3);
        let model = RepresentationModel::new(&[8, 16, 7], "m", 1).unwrap();
        let cfg = HocConfig {
            lambda: 1.0,
            learning_rate: 1e12,
            momentum: 0.0,
            epochs: 20,
            batch_size: 16,
            ..Default::default()
        };
        match train_model(model, &ds, &map, &cls, &cfg, None, None, 0) {
            Err(Error::Diverged { epoch }) => assert!(epoch < 20),
            other => panic!("expected divergence, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn er_descends() {
        let (ds, _, _) = setup(4);
        let map: LabelMap = (0..4u32).map(|c| (c, c as usize)).collect();
        let model = RepresentationModel::new(&[8, 16, 7], "m", 1).unwrap();
        let head = LinearHead::new(7, 4, 2);
        let cfg = HocConfig {
            lambda: 1.0,
            learning_rate: 0.05,
            epochs: 20,
            batch_size: 32,
            ..Default::default()
        };
        let (_, _, h) = train_er(model, head, &ds, &map, &cfg, None, 0).unwrap();
        assert!(h.epochs[19].loss_total < h.epochs[0].loss_total);
    }

    #[test]
    fn history_csv() {
        let h = LossHistory {
            epochs: vec![EpochLoss {
                epoch: 0,
                loss_total: 1.5,
                loss_sce: 2.0,
                loss_nce: 1.0,
            }],
        };
        assert_eq!(h.to_csv(), "epoch,loss_total,loss_sce,loss_nce\n0,1.5,2,1\n");
    }
}
