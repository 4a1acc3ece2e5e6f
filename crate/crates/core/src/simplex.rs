//! The d-Simplex fixed classifier.
//!
//! `K` pre-allocated prototypes are the vertices of a regular simplex centred at
//! the origin in `d = K - 1` dimensions. Every prototype has norm `1/√K` and
//! every pair has cosine `-1/(K-1)`.
//!
//! Orientation: prototypes are stored row-major, one prototype per row
//! (a `K × d` matrix). Column-oriented `d × K` notation for the same classifier
//! is the transpose of what is stored here.
//!
//! Class labels are mapped to prototype rows from both ends: pre-training
//! consumes rows `0, 1, 2, …` and fine-tuning consumes rows `K-1, K-2, …`, so
//! the two phases never share a prototype.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Finetune,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Phase::Pretrain => f.write_str("pretrain"),
            Phase::Finetune => f.write_str("finetune"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassAssignment {
    #[serde(rename = "label")]
    pub class_label: String,
    #[serde(rename = "index")]
    pub prototype_index: usize,
    pub phase: Phase,
}

#[derive(Debug, Clone)]
pub struct SimplexClassifier {
    prototypes: Matrix,
    /// Next free row from the left.
    pretrain_cursor: usize,
    /// One past the next free row from the right; free rows are
    /// `pretrain_cursor..finetune_cursor`.
    finetune_cursor: usize,
    assignments: BTreeMap<String, ClassAssignment>,
}

impl SimplexClassifier {
    /// Builds the classifier for `k` pre-allocated classes.
    ///
    /// Identity block over a zero row, shift the last row by `(1-√K)/(K-1)`,
    /// centre the rows, then divide by the Frobenius norm.
    pub fn build(k: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::SimplexTooSmall(k));
        }
        let d = k - 1;
        let mut w = Matrix::zeros(k, d);
        for i in 0..d {
            w.set(i, i, 1.0);
        }
        let shift = (1.0 - (k as f64).sqrt()) / d as f64;
        for v in w.row_mut(d) {
            *v += shift;
        }
        let mut mean = vec![0.0; d];
        for i in 0..k {
            for (m, v) in mean.iter_mut().zip(w.row(i)) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= k as f64;
        }
        for i in 0..k {
            for (v, m) in w.row_mut(i).iter_mut().zip(&mean) {
                *v -= m;
            }
        }
        let fro = w.frobenius_norm();
        for v in w.as_mut_slice() {
            *v /= fro;
        }
        Ok(Self::from_prototypes(w))
    }

    /// Wraps an arbitrary `K × (K-1)` matrix with empty assignments. No
    /// geometric check is made; see [`SimplexClassifier::verify_etf`].
    pub fn from_prototypes(prototypes: Matrix) -> Self {
        let k = prototypes.rows();
        Self {
            prototypes,
            pretrain_cursor: 0,
            finetune_cursor: k,
            assignments: BTreeMap::new(),
        }
    }

    pub fn k(&self) -> usize {
        self.prototypes.rows()
    }

    pub fn dim(&self) -> usize {
        self.prototypes.cols()
    }

    pub fn prototypes(&self) -> &Matrix {
        &self.prototypes
    }

    pub fn prototype(&self, index: usize) -> &[f64] {
        self.prototypes.row(index)
    }

    pub fn pretrain_cursor(&self) -> usize {
        self.pretrain_cursor
    }

    pub fn finetune_cursor(&self) -> usize {
        self.finetune_cursor
    }

    pub fn free_prototypes(&self) -> usize {
        self.finetune_cursor - self.pretrain_cursor
    }

    pub fn assignment(&self, label: &str) -> Option<&ClassAssignment> {
        self.assignments.get(label)
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.assignments.get(label).map(|a| a.prototype_index)
    }

    pub fn is_assigned_index(&self, index: usize) -> bool {
        self.assignments
            .values()
            .any(|a| a.prototype_index == index)
    }

    /// All assignments ordered by prototype index.
    pub fn assignments(&self) -> Vec<ClassAssignment> {
        let mut out: Vec<_> = self.assignments.values().cloned().collect();
        out.sort_by_key(|a| a.prototype_index);
        out
    }

    /// Assigns prototypes to `labels` in order. Labels already assigned in the
    /// same phase keep their index; labels assigned in the other phase are
    /// rejected. The call is all-or-nothing.
    pub fn assign_classes<S: AsRef<str>>(
        &mut self,
        labels: &[S],
        phase: Phase,
    ) -> Result<Vec<ClassAssignment>> {
        let mut pre = self.pretrain_cursor;
        let mut fin = self.finetune_cursor;
        let mut planned: Vec<ClassAssignment> = Vec::with_capacity(labels.len());
        for label in labels {
            let label = label.as_ref();
            if let Some(existing) = self.assignments.get(label) {
                if existing.phase != phase {
                    return Err(Error::PhaseConflict {
                        label: label.to_string(),
                        index: existing.prototype_index,
                        phase: existing.phase.to_string(),
                    });
                }
                planned.push(existing.clone());
                continue;
            }
            if let Some(p) = planned.iter().find(|p| p.class_label == label) {
                planned.push(p.clone());
                continue;
            }
            if pre >= fin {
                return Err(Error::CapacityExhausted {
                    label: label.to_string(),
                    pretrain_cursor: pre,
                    finetune_cursor: fin,
                });
            }
            let index = match phase {
                Phase::Pretrain => {
                    pre += 1;
                    pre - 1
                }
                Phase::Finetune => {
                    fin -= 1;
                    fin
                }
            };
            planned.push(ClassAssignment {
                class_label: label.to_string(),
                prototype_index: index,
                phase,
            });
        }
        for a in &planned {
            self.assignments
                .entry(a.class_label.clone())
                .or_insert_with(|| a.clone());
        }
        self.pretrain_cursor = pre;
        self.finetune_cursor = fin;
        Ok(planned)
    }

    /// Checks the equal-norm, equal-angle and zero-centroid properties.
    pub fn verify_etf(&self, tol: f64) -> EtfDiagnostics {
        verify_prototypes(&self.prototypes, tol)
    }

    pub fn to_document(&self) -> SimplexDocument {
        SimplexDocument {
            k: self.k(),
            d: self.dim(),
            prototypes: self.prototypes.to_rows(),
            assignments: self.assignments(),
        }
    }

    pub fn from_document(doc: SimplexDocument) -> Result<Self> {
        if doc.k < 2 || doc.d != doc.k - 1 || doc.prototypes.len() != doc.k {
            return Err(Error::Format(format!(
                "simplex document shape k={} d={} rows={}",
                doc.k,
                doc.d,
                doc.prototypes.len()
            )));
        }
        if doc.prototypes.iter().any(|r| r.len() != doc.d) {
            return Err(Error::Format("prototype row length differs from d".into()));
        }
        let mut cls = Self::from_prototypes(Matrix::from_rows(&doc.prototypes));
        let mut taken = vec![false; doc.k];
        for a in doc.assignments {
            if a.prototype_index >= doc.k || taken[a.prototype_index] {
                return Err(Error::Format(format!(
                    "assignment index {} invalid or duplicated",
                    a.prototype_index
                )));
            }
            taken[a.prototype_index] = true;
            match a.phase {
                Phase::Pretrain => {
                    cls.pretrain_cursor = cls.pretrain_cursor.max(a.prototype_index + 1)
                }
                Phase::Finetune => {
                    cls.finetune_cursor = cls.finetune_cursor.min(a.prototype_index)
                }
            }
            if cls.assignments.insert(a.class_label.clone(), a).is_some() {
                return Err(Error::Format("duplicate label in assignments".into()));
            }
        }
        if cls.pretrain_cursor > cls.finetune_cursor {
            return Err(Error::Format(
                "pretrain and finetune assignments overlap".into(),
            ));
        }
        Ok(cls)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_document())?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_document(serde_json::from_str(&text)?)
    }
}

/// On-disk form of a classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimplexDocument {
    pub k: usize,
    pub d: usize,
    pub prototypes: Vec<Vec<f64>>,
    pub assignments: Vec<ClassAssignment>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EtfDiagnostics {
    /// max over rows of `|‖w_i‖ - 1/√K|`
    pub max_norm_deviation: f64,
    /// max over pairs of `|cos(w_i, w_j) + 1/(K-1)|`
    pub max_cosine_deviation: f64,
    /// `‖Σ_i w_i‖`
    pub centroid_norm: f64,
    pub tol: f64,
}

impl EtfDiagnostics {
    pub fn passed(&self) -> bool {
        self.max_norm_deviation <= self.tol
            && self.max_cosine_deviation <= self.tol
            && self.centroid_norm <= self.tol
    }
}

pub fn verify_prototypes(w: &Matrix, tol: f64) -> EtfDiagnostics {
    let k = w.rows();
    let target_norm = 1.0 / (k as f64).sqrt();
    let target_cos = if k > 1 { -1.0 / (k as f64 - 1.0) } else { 0.0 };
    let norms: Vec<f64> = (0..k).map(|i| norm(w.row(i))).collect();
    let max_norm_deviation = norms
        .iter()
        .map(|n| (n - target_norm).abs())
        .fold(0.0, f64::max);
    let max_cosine_deviation = (0..k)
        .into_par_iter()
        .map(|i| {
            let mut worst = 0.0f64;
            for j in (i + 1)..k {
                let c = dot(w.row(i), w.row(j)) / (norms[i] * norms[j]);
                worst = worst.max((c - target_cos).abs());
            }
            worst
        })
        .reduce(|| 0.0, f64::max);
    let mut centroid = vec![0.0; w.cols()];
    for i in 0..k {
        for (c, v) in centroid.iter_mut().zip(w.row(i)) {
            *c += v;
        }
    }
    EtfDiagnostics {
        max_norm_deviation,
        max_cosine_deviation,
        centroid_norm: norm(&centroid),
        tol,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn rejects_degenerate_k() {
        assert!(matches!(
            SimplexClassifier::build(1),
            Err(Error::SimplexTooSmall(1))
        ));
        assert!(SimplexClassifier::build(0).is_err());
    }

    #[test]
    fn k2_hand_values() {
        // [[1],[0]] -> [[1],[1-√2]] -> centred [[√2/2],[-√2/2]] -> unit Frobenius
        let cls = SimplexClassifier::build(2).unwrap();
        let h = std::f64::consts::SQRT_2 / 2.0;
        assert_abs_diff_eq!(cls.prototype(0)[0], h, epsilon = 1e-15);
        assert_abs_diff_eq!(cls.prototype(1)[0], -h, epsilon = 1e-15);
    }

    #[test]
    fn k3_norms_and_cosines() {
        let cls = SimplexClassifier::build(3).unwrap();
        for i in 0..3 {
            assert_abs_diff_eq!(norm(cls.prototype(i)), 0.577_350_269_189_625_8, epsilon = 1e-12);
        }
        let c = dot(cls.prototype(0), cls.prototype(2)) / (1.0 / 3.0);
        assert_abs_diff_eq!(c, -0.5, epsilon = 1e-12);
    }

    #[test]
    fn verify_detects_scaled_row_and_ignores_shuffle() {
        let cls = SimplexClassifier::build(16).unwrap();
        assert!(cls.verify_etf(1e-9).passed());

        let mut rows = cls.prototypes().to_rows();
        for v in &mut rows[3] {
            *v *= 2.0;
        }
        let bad = verify_prototypes(&Matrix::from_rows(&rows), 1e-9);
        assert!(!bad.passed());
        assert!(bad.max_norm_deviation > 0.1);

        let mut rows = cls.prototypes().to_rows();
        rows.reverse();
        rows.swap(0, 7);
        assert!(verify_prototypes(&Matrix::from_rows(&rows), 1e-9).passed());
    }

    #[test]
    fn assignment_directions() {
        let mut cls = SimplexClassifier::build(8).unwrap();
        let a = cls.assign_classes(&["a", "b"], Phase::Pretrain).unwrap();
        assert_eq!(a[0].prototype_index, 0);
        assert_eq!(a[1].prototype_index, 1);
        let f = cls.assign_classes(&["x", "y"], Phase::Finetune).unwrap();
        assert_eq!(f[0].prototype_index, 7);
        assert_eq!(f[1].prototype_index, 6);
        assert_eq!(cls.pretrain_cursor(), 2);
        assert_eq!(cls.finetune_cursor(), 6);
    }

    #[test]
    fn capacity_error_names_cursors() {
        let mut cls = SimplexClassifier::build(4).unwrap();
        cls.assign_classes(&["a", "b"], Phase::Pretrain).unwrap();
        let err = cls
            .assign_classes(&["x", "y", "z"], Phase::Finetune)
            .unwrap_err();
        match &err {
            Error::CapacityExhausted {
                label,
                pretrain_cursor,
                finetune_cursor,
            } => {
                assert_eq!(label, "z");
                assert_eq!((*pretrain_cursor, *finetune_cursor), (2, 2));
            }
            other => panic!("unexpected {other:?}"),
        }
        let msg = err.to_string();
        assert!(msg.contains("pretrain cursor at 2") && msg.contains("finetune cursor at 2"));
        // all-or-nothing: x and y were not consumed
        assert_eq!(cls.finetune_cursor(), 4);
        assert!(cls.assignment("x").is_none());
    }

    #[test]
    fn reassignment_is_idempotent_within_phase() {
        let mut cls = SimplexClassifier::build(8).unwrap();
        cls.assign_classes(&["a", "b"], Phase::Pretrain).unwrap();
        let again = cls.assign_classes(&["b", "c", "a"], Phase::Pretrain).unwrap();
        let idx: Vec<_> = again.iter().map(|a| a.prototype_index).collect();
        assert_eq!(idx, vec![1, 2, 0]);
        assert_eq!(cls.pretrain_cursor(), 3);
    }

    #[test]
    fn cross_phase_reuse_is_rejected() {
        let mut cls = SimplexClassifier::build(8).unwrap();
        cls.assign_classes(&["a"], Phase::Pretrain).unwrap();
        let err = cls.assign_classes(&["a"], Phase::Finetune).unwrap_err();
        assert!(matches!(err, Error::PhaseConflict { index: 0, .. }));
    }

    #[test]
    fn json_round_trip_is_exact() {
        let mut cls = SimplexClassifier::build(7).unwrap();
        cls.assign_classes(&["p0", "p1"], Phase::Pretrain).unwrap();
        cls.assign_classes(&["f0"], Phase::Finetune).unwrap();
        let text = serde_json::to_string(&cls.to_document()).unwrap();
        let back = SimplexClassifier::from_document(serde_json::from_str(&text).unwrap()).unwrap();
        assert_eq!(back.prototypes(), cls.prototypes());
        assert_eq!(back.assignments(), cls.assignments());
        assert_eq!(back.pretrain_cursor(), 2);
        assert_eq!(back.finetune_cursor(), 6);
    }

    #[test]
    fn document_with_overlap_is_rejected() {
        let cls = SimplexClassifier::build(3).unwrap();
        let mut doc = cls.to_document();
        doc.assignments = vec![
            ClassAssignment {
                class_label: "a".into(),
                prototype_index: 2,
                phase: Phase::Pretrain,
            },
            ClassAssignment {
                class_label: "b".into(),
                prototype_index: 1,
                phase: Phase::Finetune,
            },
        ];
        assert!(SimplexClassifier::from_document(doc).is_err());
    }
}
