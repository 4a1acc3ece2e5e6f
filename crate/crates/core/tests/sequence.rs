mod common;

use stationary_compat::harness::{build_sequence, make_pools, pretrain_models, run_experiment};
use stationary_compat::simplex::SimplexClassifier;
use stationary_compat::trainer::sequence::{extract_features, finetune_label, run_sequence};
use stationary_compat::trainer::{Method, Provenance, TaskSequence};
use stationary_compat::Error;

fn setup(cfg: &stationary_compat::harness::ExperimentConfig) -> (TaskSequence, stationary_compat::trainer::Dataset, SimplexClassifier) {
    let pools = make_pools(cfg).unwrap();
    let mut cls = SimplexClassifier::build(cfg.simplex_k).unwrap();
    let pre = pretrain_models(cfg, &pools, &mut cls).unwrap();
    (build_sequence(cfg, &pools, &pre), pools.eval, cls)
}

#[test]
fn seven_task_sequence_records_replacements() {
    let mut cfg = common::tiny_config();
    cfg.sequence.tasks = 7;
    cfg.sequence.first_task_classes = 2;
    cfg.sequence.replacements = vec![2, 4];
    cfg.sequence.pretrain_classes = vec![3, 4, 5];
    cfg.hoc.epochs = 2;
    let (seq, eval, mut cls) = setup(&cfg);
    let steps = run_sequence(&seq, &eval, &mut cls, &cfg.hoc, Method::Hoc, 1).unwrap();
    assert_eq!(steps.len(), 7);
    for s in &steps {
        let expected = if [2, 4].contains(&s.task) { Provenance::Replaced } else { Provenance::Finetuned };
        assert_eq!(s.model.provenance, expected, "task {}", s.task);
        assert_eq!(s.features.len(), eval.len());
        assert_eq!(s.history.epochs.len(), 2);
    }
    // fine-tune classes sit after the pre-training block, in arrival order
    let idx: Vec<usize> = (0..8).map(|c| cls.index_of(&finetune_label(c)).unwrap()).collect();
    assert!(idx.windows(2).all(|w| w[1] == w[0] - 1), "{idx:?}");
}

#[test]
fn same_seed_same_features() {
    let cfg = common::tiny_config();
    for method in [Method::Hoc, Method::SceOnly, Method::ErBaseline] {
        let run = || {
            let mut cfg = cfg.clone();
            cfg.method = method;
            let (seq, eval, mut cls) = setup(&cfg);
            run_sequence(&seq, &eval, &mut cls, &cfg.hoc, method, 9).unwrap()
        };
        let (a, b) = (run(), run());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.features.to_bytes(), y.features.to_bytes(), "{method:?} task {}", x.task);
        }
    }
}

#[test]
fn single_task_sequence() {
    let mut cfg = common::tiny_config();
    cfg.sequence.tasks = 1;
    cfg.sequence.replacements = vec![];
    cfg.sequence.pretrain_classes = vec![4];
    let out = run_experiment(&cfg).unwrap();
    assert_eq!(out.steps.len(), 1);
    assert_eq!(out.report.matrix.task_count(), 1);
    assert_eq!(out.report.aa.len(), 1);
    assert!(out.report.def1.is_empty());
    assert_eq!(out.report.ac.to_string(), "not_achieved");
}

#[test]
fn replacement_out_of_range_is_rejected() {
    let cfg = common::tiny_config();
    let (mut seq, eval, mut cls) = setup(&cfg);
    let m = seq.initial.clone();
    seq.replacements.insert(5, m);
    let err = run_sequence(&seq, &eval, &mut cls, &cfg.hoc, Method::Hoc, 0).unwrap_err();
    assert!(matches!(err, Error::Invalid(_)), "{err}");
}

#[test]
fn errors_carry_the_task_index() {
    let cfg = common::tiny_config();
    let (seq, eval, _) = setup(&cfg);
    // 3 + 1 classes fill a 4-simplex; the third task's class does not fit
    let mut cls = SimplexClassifier::build(4).unwrap();
    let mut small = seq.clone();
    for m in std::iter::once(&mut small.initial).chain(small.replacements.values_mut()) {
        *m = stationary_compat::trainer::RepresentationModel::new(&[8, 16, 3], "tiny", 0).unwrap();
    }
    let err = run_sequence(&small, &eval, &mut cls, &cfg.hoc, Method::Hoc, 0).unwrap_err();
    match err {
        Error::AtTask { task, source } => {
            assert_eq!(task, 2);
            assert!(matches!(*source, Error::CapacityExhausted { .. }), "{source}");
        }
        other => panic!("unexpected {other}"),
    }
}

/// Mean cosine between each old class's feature centroid and its prototype.
fn prototype_alignment(
    model: &stationary_compat::trainer::RepresentationModel,
    data: &stationary_compat::trainer::Dataset,
    cls: &SimplexClassifier,
    classes: &[u32],
) -> f64 {
    let fs = extract_features(model, data).unwrap();
    let mut total = 0.0;
    for &c in classes {
        let rows: Vec<&Vec<f32>> = fs.records.iter().filter(|r| r.label == c).map(|r| &r.vector).collect();
        let mut mean = vec![0.0f64; fs.dim];
        for r in &rows {
            for (m, v) in mean.iter_mut().zip(r.iter()) {
                *m += *v as f64 / rows.len() as f64;
            }
        }
        let w = cls.prototype(cls.index_of(&finetune_label(c)).unwrap());
        let dot: f64 = mean.iter().zip(w).map(|(a, b)| a * b).sum();
        let n = mean.iter().map(|x| x * x).sum::<f64>().sqrt() * w.iter().map(|x| x * x).sum::<f64>().sqrt();
        total += dot / n;
    }
    total / classes.len() as f64
}

#[test]
fn old_classes_stay_near_their_prototypes() {
    let mut cfg = stationary_compat::harness::ExperimentConfig::default();
    cfg.sequence.tasks = 3;
    cfg.sequence.replacements = vec![];
    cfg.sequence.pretrain_classes = vec![8];
    cfg.hoc.epochs = 20;
    cfg.hoc.lr_schedule = vec![(14, 0.1)];
    cfg.pretrain.epochs = 10;
    let (seq, eval, mut cls) = setup(&cfg);
    let steps = run_sequence(&seq, &eval, &mut cls, &cfg.hoc, Method::Hoc, 4).unwrap();
    let first: Vec<u32> = seq.tasks[0].classes.clone();
    let data = seq.task_data(0);
    for w in steps.windows(2) {
        let before = prototype_alignment(&w[0].model, &data, &cls, &first);
        let after = prototype_alignment(&w[1].model, &data, &cls, &first);
        assert!(after >= before - 0.05, "task {}: {before:.3} → {after:.3}", w[1].task);
    }
}
