//! Compatibility evaluation: 1:N retrieval, pairwise distance-inequality
//! checks between two models, compatibility matrices, AC and AA_t.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::features::FeatureSet;
use crate::hyperball::mix_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    /// `1 − cos(a, b)`
    #[default]
    Cosine,
    Euclidean,
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Metric::Cosine),
            "euclidean" => Ok(Metric::Euclidean),
            other => Err(Error::Invalid(format!("unknown metric {other:?}"))),
        }
    }
}

/// Vectors prepared for repeated distance evaluation.
struct Prepared {
    rows: Vec<Vec<f64>>,
    labels: Vec<u32>,
}

impl Prepared {
    fn new(fs: &FeatureSet, metric: Metric) -> Self {
        let rows = fs
            .records
            .iter()
            .map(|r| {
                let mut v: Vec<f64> = r.vector.iter().map(|&x| x as f64).collect();
                if metric == Metric::Cosine {
                    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    if n > 0.0 {
                        v.iter_mut().for_each(|x| *x /= n);
                    }
                }
                v
            })
            .collect();
        Self {
            rows,
            labels: fs.labels().collect(),
        }
    }
}

#[inline]
fn dist(metric: Metric, a: &[f64], b: &[f64]) -> f64 {
    match metric {
        Metric::Cosine => 1.0 - a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>(),
        Metric::Euclidean => a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt(),
    }
}

/// Distance between two raw feature vectors under `metric`. Zero vectors have
/// cosine distance 1 to everything.
pub fn feature_distance(metric: Metric, a: &[f32], b: &[f32]) -> f64 {
    let prep = |v: &[f32]| {
        let mut v: Vec<f64> = v.iter().map(|&x| x as f64).collect();
        if metric == Metric::Cosine {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 0.0 {
                v.iter_mut().for_each(|x| *x /= n);
            }
        }
        v
    };
    dist(metric, &prep(a), &prep(b))
}

/// Fraction of queries whose nearest gallery vector carries the same label.
/// Exhaustive search; ties go to the lowest gallery index.
pub fn retrieval_accuracy(query: &FeatureSet, gallery: &FeatureSet, metric: Metric) -> Result<f64> {
    if query.dim != gallery.dim {
        return Err(Error::DimensionMismatch {
            expected: gallery.dim,
            actual: query.dim,
        });
    }
    if gallery.is_empty() {
        return Err(Error::Invalid("gallery is empty".into()));
    }
    if query.is_empty() {
        return Err(Error::Invalid("query set is empty".into()));
    }
    let g = Prepared::new(gallery, metric);
    let q = Prepared::new(query, metric);
    let hits: usize = q
        .rows
        .par_iter()
        .zip(q.labels.par_iter())
        .map(|(qv, &ql)| {
            let mut best = f64::INFINITY;
            let mut best_idx = 0;
            for (j, gv) in g.rows.iter().enumerate() {
                let d = dist(metric, qv, gv);
                if d < best {
                    best = d;
                    best_idx = j;
                }
            }
            usize::from(g.labels[best_idx] == ql)
        })
        .sum();
    Ok(hits as f64 / q.rows.len() as f64)
}

/// Pairwise inequality statistics between an updated model (`new`, φ_t) and
/// an older one (`old`, φ_k) on the same samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Def1Stats {
    /// share of same-class pairs with `d(old_i, new_j) <= d(old_i, old_j)`
    pub frac_same_class_satisfied: f64,
    /// share of different-class pairs with `d(old_i, new_j) >= d(old_i, old_j)`
    pub frac_diff_class_satisfied: f64,
    pub e_same_kt: f64,
    pub e_same_kk: f64,
    pub e_diff_kt: f64,
    pub e_diff_kk: f64,
    pub same_pairs: usize,
    pub diff_pairs: usize,
}

pub const DEFAULT_DEF1_PAIRS: usize = 100_000;

/// Ordered pairs `(i, j)`, `i ≠ j`, either all of them or `max_pairs` drawn
/// uniformly with replacement.
fn pair_sample(
    labels: &[u32],
    same: bool,
    max_pairs: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<(usize, usize)> {
    let n = labels.len();
    let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let total: usize = if same {
        by_class.values().map(|v| v.len() * v.len().saturating_sub(1)).sum()
    } else {
        by_class.values().map(|v| v.len() * (n - v.len())).sum()
    };
    if total == 0 || max_pairs == 0 {
        return Vec::new();
    }
    if total <= max_pairs {
        let mut out = Vec::with_capacity(total);
        for i in 0..n {
            for j in 0..n {
                if i != j && (labels[i] == labels[j]) == same {
                    out.push((i, j));
                }
            }
        }
        return out;
    }
    let mut out = Vec::with_capacity(max_pairs);
    if same {
        let classes: Vec<&Vec<usize>> = by_class.values().collect();
        let weights: Vec<usize> = classes
            .iter()
            .map(|v| v.len() * v.len().saturating_sub(1))
            .collect();
        let pick = WeightedIndex::new(&weights).expect("some class has two samples");
        for _ in 0..max_pairs {
            let members = classes[pick.sample(rng)];
            let a = rng.random_range(0..members.len());
            let mut b = rng.random_range(0..members.len() - 1);
            if b >= a {
                b += 1;
            }
            out.push((members[a], members[b]));
        }
    } else {
        let weights: Vec<usize> = labels.iter().map(|l| n - by_class[l].len()).collect();
        let pick = WeightedIndex::new(&weights).expect("two classes present");
        for _ in 0..max_pairs {
            let i = pick.sample(rng);
            let j = loop {
                let j = rng.random_range(0..n);
                if labels[j] != labels[i] {
                    break j;
                }
            };
            out.push((i, j));
        }
    }
    out
}

/// Checks the same-class (`d(φ_k(x_i), φ_t(x_j)) ≤ d(φ_k(x_i), φ_k(x_j))`) and
/// different-class (`≥`) inequalities over sampled pairs, with the mean
/// distances on each side.
pub fn def1_check(
    set_new: &FeatureSet,
    set_old: &FeatureSet,
    metric: Metric,
    max_pairs: usize,
    seed: u64,
) -> Result<Def1Stats> {
    if set_new.dim != set_old.dim {
        return Err(Error::DimensionMismatch {
            expected: set_old.dim,
            actual: set_new.dim,
        });
    }
    if set_new.len() != set_old.len() {
        return Err(Error::Invalid(format!(
            "feature sets are not aligned: {} vs {} records",
            set_new.len(),
            set_old.len()
        )));
    }
    if let Some(i) = set_new
        .records
        .iter()
        .zip(&set_old.records)
        .position(|(a, b)| a.label != b.label)
    {
        return Err(Error::Invalid(format!(
            "feature sets are not aligned: labels differ at position {i}"
        )));
    }
    let new = Prepared::new(set_new, metric);
    let old = Prepared::new(set_old, metric);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let evaluate = |pairs: &[(usize, usize)], same: bool| -> (f64, f64, f64) {
        let (mut ok, mut skt, mut skk) = (0usize, 0.0, 0.0);
        for &(i, j) in pairs {
            let kt = dist(metric, &old.rows[i], &new.rows[j]);
            let kk = dist(metric, &old.rows[i], &old.rows[j]);
            if (same && kt <= kk) || (!same && kt >= kk) {
                ok += 1;
            }
            skt += kt;
            skk += kk;
        }
        let n = pairs.len().max(1) as f64;
        if pairs.is_empty() {
            (f64::NAN, f64::NAN, f64::NAN)
        } else {
            (ok as f64 / n, skt / n, skk / n)
        }
    };
    let same = pair_sample(&new.labels, true, max_pairs, &mut rng);
    let diff = pair_sample(&new.labels, false, max_pairs, &mut rng);
    let (fs, ekt_s, ekk_s) = evaluate(&same, true);
    let (fd, ekt_d, ekk_d) = evaluate(&diff, false);
    Ok(Def1Stats {
        frac_same_class_satisfied: fs,
        frac_diff_class_satisfied: fd,
        e_same_kt: ekt_s,
        e_same_kk: ekk_s,
        e_diff_kt: ekt_d,
        e_diff_kk: ekk_d,
        same_pairs: same.len(),
        diff_pairs: diff.len(),
    })
}

/// Lower-triangular matrix of retrieval accuracies; `entries[i][j]` (j ≤ i)
/// uses queries from model `i` against the gallery of model `j`. `None`
/// marks pairs that could not be evaluated (feature sizes differ).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompatibilityMatrix {
    pub entries: Vec<Vec<Option<f64>>>,
}

impl CompatibilityMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        for (i, r) in rows.iter().enumerate() {
            if r.len() != i + 1 {
                return Err(Error::Invalid(format!(
                    "row {i} of a lower-triangular matrix needs {} entries",
                    i + 1
                )));
            }
            if r.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Invalid(format!("row {i} has entries outside [0, 1]")));
            }
        }
        Ok(Self {
            entries: rows
                .into_iter()
                .map(|r| r.into_iter().map(Some).collect())
                .collect(),
        })
    }

    pub fn task_count(&self) -> usize {
        self.entries.len()
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.entries.get(i).and_then(|r| r.get(j)).copied().flatten()
    }

    /// Pair `(t, k)`, `k < t`, is compatible iff `M[t][k] > M[k][k]`.
    pub fn is_compatible(&self, t: usize, k: usize) -> bool {
        match (self.get(t, k), self.get(k, k)) {
            (Some(cross), Some(own)) => cross > own,
            _ => false,
        }
    }

    pub fn compatible_pairs(&self) -> usize {
        let t = self.task_count();
        (1..t)
            .map(|i| (0..i).filter(|&k| self.is_compatible(i, k)).count())
            .sum()
    }

    /// Compatible pairs over `T(T−1)/2`; `NotAchieved` when none is.
    pub fn average_compatibility(&self) -> AcValue {
        let t = self.task_count();
        let pairs = t * t.saturating_sub(1) / 2;
        let hits = self.compatible_pairs();
        if hits == 0 || pairs == 0 {
            AcValue::NotAchieved
        } else {
            AcValue::Value(hits as f64 / pairs as f64)
        }
    }

    /// `AA_t` for `t = 1..=T`: mean of all defined entries `M[i][j]`,
    /// `j ≤ i ≤ t` (normaliser `t(t+1)/2` when none is missing).
    pub fn average_accuracies(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.task_count());
        let (mut sum, mut n) = (0.0, 0usize);
        for row in &self.entries {
            for v in row.iter().flatten() {
                sum += v;
                n += 1;
            }
            out.push(if n == 0 { f64::NAN } else { sum / n as f64 });
        }
        out
    }

    /// Self-test at `t − 1` minus cross-test of model `t` against gallery
    /// `t − 1`.
    pub fn cross_test_drop(&self, t: usize) -> Option<f64> {
        if t == 0 {
            return None;
        }
        Some(self.get(t - 1, t - 1)? - self.get(t, t - 1)?)
    }

    pub fn to_csv(&self) -> String {
        let t = self.task_count();
        let mut out = String::from("query\\gallery");
        for j in 0..t {
            let _ = write!(out, ",{}", j + 1);
        }
        out.push('\n');
        for (i, row) in self.entries.iter().enumerate() {
            let _ = write!(out, "{}", i + 1);
            for j in 0..t {
                match row.get(j).copied().flatten() {
                    Some(v) => {
                        let _ = write!(out, ",{v}");
                    }
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AcValue {
    Value(f64),
    NotAchieved,
}

impl AcValue {
    pub fn value_or_zero(&self) -> f64 {
        match self {
            AcValue::Value(v) => *v,
            AcValue::NotAchieved => 0.0,
        }
    }
}

impl std::fmt::Display for AcValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AcValue::Value(v) => write!(f, "{v}"),
            AcValue::NotAchieved => f.write_str("not_achieved"),
        }
    }
}

impl Serialize for AcValue {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            AcValue::Value(v) => s.serialize_f64(*v),
            AcValue::NotAchieved => s.serialize_str("not_achieved"),
        }
    }
}

impl<'de> Deserialize<'de> for AcValue {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(AcValue::Value(v)),
            Raw::Str(s) if s == "not_achieved" => Ok(AcValue::NotAchieved),
            Raw::Str(s) => Err(serde::de::Error::custom(format!("bad ac value {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Def1Entry {
    /// newer model (φ_t), 1-based task number
    pub new: usize,
    /// older model (φ_k), 1-based task number
    pub old: usize,
    #[serde(flatten)]
    pub stats: Def1Stats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompatibilityReport {
    pub metric: Metric,
    pub matrix: CompatibilityMatrix,
    pub ac: AcValue,
    pub aa: Vec<f64>,
    pub def1: Vec<Def1Entry>,
    /// `(query model, gallery model)` pairs skipped for differing feature
    /// sizes, 1-based.
    #[serde(default)]
    pub skipped: Vec<(usize, usize)>,
}

impl CompatibilityReport {
    pub fn from_matrix(metric: Metric, matrix: CompatibilityMatrix) -> Self {
        Self {
            metric,
            ac: matrix.average_compatibility(),
            aa: matrix.average_accuracies(),
            matrix,
            def1: Vec::new(),
            skipped: Vec::new(),
        }
    }

    pub fn aa_final(&self) -> f64 {
        self.aa.last().copied().unwrap_or(f64::NAN)
    }

    /// JSON document `{metric, matrix, ac, aa, def1, skipped}` with the
    /// matrix as row arrays.
    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Doc<'a> {
            metric: Metric,
            matrix: &'a [Vec<Option<f64>>],
            ac: AcValue,
            aa: &'a [f64],
            def1: &'a [Def1Entry],
            skipped: &'a [(usize, usize)],
        }
        Ok(serde_json::to_string_pretty(&Doc {
            metric: self.metric,
            matrix: &self.matrix.entries,
            ac: self.ac,
            aa: &self.aa,
            def1: &self.def1,
            skipped: &self.skipped,
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Doc {
            metric: Metric,
            matrix: Vec<Vec<Option<f64>>>,
            ac: AcValue,
            aa: Vec<f64>,
            def1: Vec<Def1Entry>,
            #[serde(default)]
            skipped: Vec<(usize, usize)>,
        }
        let d: Doc = serde_json::from_str(text)?;
        Ok(Self {
            metric: d.metric,
            matrix: CompatibilityMatrix { entries: d.matrix },
            ac: d.ac,
            aa: d.aa,
            def1: d.def1,
            skipped: d.skipped,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportOptions {
    pub metric: Metric,
    /// Per class, this leading share of the evaluation samples forms the
    /// gallery; the rest are queries.
    pub gallery_fraction: f64,
    pub def1_pairs: usize,
    pub seed: u64,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self {
            metric: Metric::Cosine,
            gallery_fraction: 0.2,
            def1_pairs: DEFAULT_DEF1_PAIRS,
            seed: 0,
        }
    }
}

/// Per class, the first `ceil(frac · n_c)` records (gallery) and the rest
/// (queries).
pub fn split_gallery_query(fs: &FeatureSet, frac: f64) -> (FeatureSet, FeatureSet) {
    let mut per_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, r) in fs.records.iter().enumerate() {
        per_class.entry(r.label).or_default().push(i);
    }
    let (mut g, mut q) = (Vec::new(), Vec::new());
    for idx in per_class.values() {
        let n = (((idx.len() as f64) * frac).ceil() as usize).min(idx.len());
        g.extend_from_slice(&idx[..n]);
        q.extend_from_slice(&idx[n..]);
    }
    g.sort_unstable();
    q.sort_unstable();
    (fs.select(&g), fs.select(&q))
}

/// Builds the compatibility matrix, AC, AA_t and pairwise inequality
/// statistics for a sequence of feature sets (one per task, all extracted
/// from the same evaluation samples).
pub fn build_report(feature_sets: &[FeatureSet], opts: &ReportOptions) -> Result<CompatibilityReport> {
    if feature_sets.is_empty() {
        return Err(Error::Invalid("no feature sets to evaluate".into()));
    }
    let splits: Vec<(FeatureSet, FeatureSet)> = feature_sets
        .iter()
        .map(|fs| split_gallery_query(fs, opts.gallery_fraction))
        .collect();
    let t = feature_sets.len();
    let cells: Vec<(usize, usize)> = (0..t).flat_map(|i| (0..=i).map(move |j| (i, j))).collect();
    let values: Vec<Result<Option<f64>>> = cells
        .par_iter()
        .map(|&(i, j)| {
            if feature_sets[i].dim != feature_sets[j].dim {
                return Ok(None);
            }
            retrieval_accuracy(&splits[i].1, &splits[j].0, opts.metric).map(Some)
        })
        .collect();
    let mut entries: Vec<Vec<Option<f64>>> = (0..t).map(|i| vec![None; i + 1]).collect();
    let mut skipped = Vec::new();
    for (&(i, j), v) in cells.iter().zip(values) {
        let v = v?;
        if v.is_none() {
            skipped.push((i + 1, j + 1));
        }
        entries[i][j] = v;
    }
    let matrix = CompatibilityMatrix { entries };

    let pairs: Vec<(usize, usize)> = (1..t).flat_map(|i| (0..i).map(move |k| (i, k))).collect();
    let def1: Vec<Result<Option<Def1Entry>>> = pairs
        .par_iter()
        .map(|&(i, k)| {
            if feature_sets[i].dim != feature_sets[k].dim {
                return Ok(None);
            }
            let stats = def1_check(
                &feature_sets[i],
                &feature_sets[k],
                opts.metric,
                opts.def1_pairs,
                mix_seed(opts.seed, i as u64, k as u64),
            )?;
            Ok(Some(Def1Entry {
                new: i + 1,
                old: k + 1,
                stats,
            }))
        })
        .collect();
    let def1 = def1
        .into_iter()
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();

    let mut report = CompatibilityReport::from_matrix(opts.metric, matrix);
    report.def1 = def1;
    report.skipped = skipped;
    Ok(report)
}
