//! Losses on batches of features with analytic gradients.
//!
//! All functions take features as a `B × d` matrix (one row per sample) and
//! return the loss together with its gradient with respect to those rows.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm, Matrix};
use crate::simplex::SimplexClassifier;

use super::HocConfig;

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub grad: Matrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

/// Options for the contrastive term.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NceOptions {
    /// Add the positive pair to the denominator (canonical infoNCE). Off by
    /// default: the denominator sums over the other samples only.
    #[serde(default)]
    pub include_positive: bool,
    #[serde(default)]
    pub reduction: Reduction,
}

/// `log Σ exp(v)` with the max trick.
fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn softmax_into(v: &[f64], out: &mut [f64]) {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, x) in out.iter_mut().zip(v) {
        *o = (x - m).exp();
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
}

/// Softmax cross-entropy against the fixed prototypes, averaged over the batch.
///
/// Logits are raw inner products `w_j · φ` over all `K` prototypes, including
/// those not yet assigned to any class, with no bias.
pub fn sce_loss(features: &Matrix, labels: &[usize], cls: &SimplexClassifier) -> Result<LossOutput> {
    let (b, d) = (features.rows(), features.cols());
    if d != cls.dim() {
        return Err(Error::DimensionMismatch {
            expected: cls.dim(),
            actual: d,
        });
    }
    if labels.len() != b {
        return Err(Error::Invalid(format!(
            "{} labels for {b} feature rows",
            labels.len()
        )));
    }
    if b == 0 {
        return Err(Error::Invalid("empty batch".into()));
    }
    let mut assigned = vec![false; cls.k()];
    for a in cls.assignments() {
        assigned[a.prototype_index] = true;
    }
    for &y in labels {
        if y >= cls.k() || !assigned[y] {
            return Err(Error::UnassignedLabel(y));
        }
    }
    let w = cls.prototypes();
    let logits = features.matmul_t(w);
    let mut probs = vec![0.0; cls.k()];
    let mut grad = Matrix::zeros(b, d);
    let mut loss = 0.0;
    let inv_b = 1.0 / b as f64;
    for (i, &y) in labels.iter().enumerate() {
        let z = logits.row(i);
        loss += log_sum_exp(z) - z[y];
        softmax_into(z, &mut probs);
        probs[y] -= 1.0;
        let g = grad.row_mut(i);
        for (j, &pj) in probs.iter().enumerate() {
            if pj == 0.0 {
                continue;
            }
            for (gk, wk) in g.iter_mut().zip(w.row(j)) {
                *gk += pj * wk * inv_b;
            }
        }
    }
    Ok(LossOutput {
        loss: loss * inv_b,
        grad,
    })
}

/// Contrastive loss between the current model's features and the previous
/// model's features of the same samples, on `τ`-scaled cosine similarity.
///
/// For sample `i` the positive is `(old_i, new_i)` and the denominator runs
/// over `(old_i, new_j)`, `j ≠ i` (plus `j = i` when `include_positive`).
/// `features_old` is treated as a constant.
pub fn nce_loss(
    features_new: &Matrix,
    features_old: &Matrix,
    tau: f64,
    opts: NceOptions,
) -> Result<LossOutput> {
    let b = features_new.rows();
    let d = features_new.cols();
    if features_old.rows() != b {
        return Err(Error::Invalid(format!(
            "old batch has {} rows, new batch {b}",
            features_old.rows()
        )));
    }
    if features_old.cols() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: features_old.cols(),
        });
    }
    if b < 2 {
        return Err(Error::Invalid(
            "contrastive loss needs a batch of at least 2".into(),
        ));
    }
    if !(tau > 0.0) {
        return Err(Error::Domain(format!("temperature must be positive, got {tau}")));
    }
    let unit = |m: &Matrix, which: &str| -> Result<(Matrix, Vec<f64>)> {
        let mut out = m.clone();
        let mut norms = Vec::with_capacity(b);
        for i in 0..b {
            let n = norm(m.row(i));
            if n == 0.0 || !n.is_finite() {
                return Err(Error::Domain(format!(
                    "{which} feature {i} has zero or non-finite norm; cosine undefined"
                )));
            }
            for v in out.row_mut(i) {
                *v /= n;
            }
            norms.push(n);
        }
        Ok((out, norms))
    };
    let (u, _) = unit(features_old, "old")?;
    let (v, new_norms) = unit(features_new, "new")?;

    // s[i][j] = τ · u_i · v_j
    let mut s = u.matmul_t(&v);
    for x in s.as_mut_slice() {
        *x *= tau;
    }

    // coef[i][j] = ∂L/∂s_ij
    let mut coef = Matrix::zeros(b, b);
    let mut loss = 0.0;
    let mut buf = Vec::with_capacity(b);
    let mut q = vec![0.0; b];
    for i in 0..b {
        let row = s.row(i);
        buf.clear();
        buf.extend(
            row.iter()
                .enumerate()
                .filter(|(j, _)| opts.include_positive || *j != i)
                .map(|(_, x)| *x),
        );
        loss += log_sum_exp(&buf) - row[i];
        softmax_into(&buf, &mut q[..buf.len()]);
        let c = coef.row_mut(i);
        let mut k = 0;
        for (j, cj) in c.iter_mut().enumerate() {
            if opts.include_positive || j != i {
                *cj = q[k];
                k += 1;
            }
        }
        c[i] -= 1.0;
    }
    let scale = match opts.reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean => 1.0 / b as f64,
    };

    // ∂L/∂v_j = τ Σ_i coef_ij u_i ; ∂L/∂new_j = (I − v_j v_jᵀ) ∂L/∂v_j / ‖new_j‖
    let gv = coef.t_matmul(&u);
    let mut grad = Matrix::zeros(b, d);
    for j in 0..b {
        let g = gv.row(j);
        let vj = v.row(j);
        let proj = dot(g, vj);
        let f = tau * scale / new_norms[j];
        for ((out, gk), vk) in grad.row_mut(j).iter_mut().zip(g).zip(vj) {
            *out = f * (gk - proj * vk);
        }
    }
    Ok(LossOutput {
        loss: loss * scale,
        grad,
    })
}

/// `λ · sce + (1 − λ) · nce`, both as per-batch means.
///
/// Terms with zero weight are not evaluated, so the endpoints reproduce the
/// component losses exactly.
pub fn hoc_loss(
    features_new: &Matrix,
    labels: &[usize],
    features_old: Option<&Matrix>,
    cls: &SimplexClassifier,
    cfg: &HocConfig,
) -> Result<HocOutput> {
    cfg.validate()?;
    let lambda = cfg.lambda;
    let sce = if lambda > 0.0 {
        Some(sce_loss(features_new, labels, cls)?)
    } else {
        None
    };
    let nce = if lambda < 1.0 {
        let old = features_old.ok_or_else(|| {
            Error::Invalid("contrastive term (lambda < 1) needs the previous model".into())
        })?;
        Some(nce_loss(
            features_new,
            old,
            cfg.tau,
            NceOptions {
                reduction: Reduction::Mean,
                ..cfg.nce
            },
        )?)
    } else {
        None
    };
    let (loss, grad) = match (&sce, &nce) {
        (Some(s), None) => (s.loss, s.grad.clone()),
        (None, Some(n)) => (n.loss, n.grad.clone()),
        (Some(s), Some(n)) => {
            let mut g = s.grad.clone();
            for (gv, (sv, nv)) in g
                .as_mut_slice()
                .iter_mut()
                .zip(s.grad.as_slice().iter().zip(n.grad.as_slice()))
            {
                *gv = lambda * sv + (1.0 - lambda) * nv;
            }
            (lambda * s.loss + (1.0 - lambda) * n.loss, g)
        }
        (None, None) => unreachable!("lambda is in [0, 1]"),
    };
    Ok(HocOutput {
        loss,
        grad,
        sce: sce.map(|s| s.loss),
        nce: nce.map(|n| n.loss),
    })
}

#[derive(Debug, Clone)]
pub struct HocOutput {
    pub loss: f64,
    pub grad: Matrix,
    pub sce: Option<f64>,
    pub nce: Option<f64>,
}

/// Mean cross-entropy of a trainable linear head's logits; gradient with
/// respect to the logits.
pub fn softmax_cross_entropy(logits: &Matrix, targets: &[usize]) -> Result<LossOutput> {
    let (b, c) = (logits.rows(), logits.cols());
    if targets.len() != b || b == 0 {
        return Err(Error::Invalid("cross-entropy batch/target mismatch".into()));
    }
    let mut grad = Matrix::zeros(b, c);
    let mut loss = 0.0;
    let inv_b = 1.0 / b as f64;
    for (i, &y) in targets.iter().enumerate() {
        if y >= c {
            return Err(Error::UnassignedLabel(y));
        }
        let z = logits.row(i);
        loss += log_sum_exp(z) - z[y];
        let g = grad.row_mut(i);
        softmax_into(z, g);
        g[y] -= 1.0;
        for v in g.iter_mut() {
            *v *= inv_b;
        }
    }
    Ok(LossOutput {
        loss: loss * inv_b,
        grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simplex::Phase;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn classifier(k: usize) -> SimplexClassifier {
        let mut cls = SimplexClassifier::build(k).unwrap();
        let labels: Vec<String> = (0..k).map(|i| format!("c{i}")).collect();
        cls.assign_classes(&labels, Phase::Pretrain).unwrap();
        cls
    }

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn sce_k2_hand_value() {
        let cls = classifier(2);
        let f = Matrix::from_rows(&[vec![1.0]]);
        let out = sce_loss(&f, &[0], &cls).unwrap();
        // −log σ(√2), evaluated independently
        assert_abs_diff_eq!(out.loss, 0.217_621_721_581_743_75, epsilon = 1e-12);
    }

    #[test]
    fn sce_zero_feature_is_log_k() {
        for k in [2, 5, 16] {
            let cls = classifier(k);
            let f = Matrix::zeros(3, k - 1);
            let out = sce_loss(&f, &[0, 1, 0], &cls).unwrap();
            assert_abs_diff_eq!(out.loss, (k as f64).ln(), epsilon = 1e-12);
        }
    }

    #[test]
    fn sce_rejects_unassigned() {
        let mut cls = SimplexClassifier::build(4).unwrap();
        cls.assign_classes(&["a"], Phase::Pretrain).unwrap();
        let f = Matrix::zeros(1, 3);
        assert!(matches!(
            sce_loss(&f, &[2], &cls),
            Err(Error::UnassignedLabel(2))
        ));
    }

    #[test]
    fn nce_orthonormal_hand_value() {
        let e = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let out = nce_loss(&e, &e, 10.0, NceOptions::default()).unwrap();
        assert_abs_diff_eq!(out.loss, -20.0, epsilon = 1e-12);
        let mean = nce_loss(
            &e,
            &e,
            10.0,
            NceOptions {
                reduction: Reduction::Mean,
                ..Default::default()
            },
        )
        .unwrap();
        assert_abs_diff_eq!(mean.loss, -10.0, epsilon = 1e-12);
    }

    #[test]
    fn nce_errors() {
        let one = Matrix::from_rows(&[vec![1.0, 0.0]]);
        assert!(nce_loss(&one, &one, 10.0, NceOptions::default()).is_err());
        let z = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]);
        let ok = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!(nce_loss(&z, &ok, 10.0, NceOptions::default()).is_err());
        assert!(nce_loss(&ok, &z, 10.0, NceOptions::default()).is_err());
    }

    #[test]
    fn nce_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_matrix(&mut rng, 6, 5);
        let b = random_matrix(&mut rng, 6, 5);
        let base = nce_loss(&a, &b, 10.0, NceOptions::default()).unwrap().loss;
        for c in [1e-3, 0.5, 7.0, 1e4] {
            let mut a2 = a.clone();
            a2.as_mut_slice().iter_mut().for_each(|v| *v *= c);
            let l = nce_loss(&a2, &b, 10.0, NceOptions::default()).unwrap().loss;
            assert!((l - base).abs() < 1e-9);
        }
    }

    #[test]
    fn including_positive_raises_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_matrix(&mut rng, 5, 4);
        let b = random_matrix(&mut rng, 5, 4);
        let printed = nce_loss(&a, &b, 5.0, NceOptions::default()).unwrap().loss;
        let canon = nce_loss(
            &a,
            &b,
            5.0,
            NceOptions {
                include_positive: true,
                ..Default::default()
            },
        )
        .unwrap()
        .loss;
        assert!(canon > printed);
    }

    #[test]
    fn hoc_endpoints_and_linearity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cls = classifier(8);
        let new = random_matrix(&mut rng, 6, 7);
        let old = random_matrix(&mut rng, 6, 7);
        let labels = [0, 3, 5, 7, 1, 3];
        let cfg = |lambda| HocConfig {
            lambda,
            ..HocConfig::default()
        };
        let sce = sce_loss(&new, &labels, &cls).unwrap();
        let nce = nce_loss(
            &new,
            &old,
            10.0,
            NceOptions {
                reduction: Reduction::Mean,
                ..Default::default()
            },
        )
        .unwrap();

        let h1 = hoc_loss(&new, &labels, Some(&old), &cls, &cfg(1.0)).unwrap();
        assert_eq!(h1.loss.to_bits(), sce.loss.to_bits());
        assert_eq!(h1.grad, sce.grad);
        let h1_no_old = hoc_loss(&new, &labels, None, &cls, &cfg(1.0)).unwrap();
        assert_eq!(h1_no_old.loss.to_bits(), sce.loss.to_bits());

        let h0 = hoc_loss(&new, &labels, Some(&old), &cls, &cfg(0.0)).unwrap();
        assert_eq!(h0.loss.to_bits(), nce.loss.to_bits());
        assert_eq!(h0.grad, nce.grad);

        let h = hoc_loss(&new, &labels, Some(&old), &cls, &cfg(0.1)).unwrap();
        assert!((h.loss - (0.1 * sce.loss + 0.9 * nce.loss)).abs() < 1e-12);

        assert!(hoc_loss(&new, &labels, None, &cls, &cfg(0.5)).is_err());
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let z = Matrix::zeros(2, 4);
        let out = softmax_cross_entropy(&z, &[0, 3]).unwrap();
        assert_abs_diff_eq!(out.loss, 4f64.ln(), epsilon = 1e-12);
        assert!(softmax_cross_entropy(&z, &[4, 0]).is_err());
    }
}
