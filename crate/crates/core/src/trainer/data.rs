use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Inputs with integer class labels, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Matrix,
    pub labels: Vec<u32>,
}

impl Dataset {
    pub fn empty(input_dim: usize) -> Self {
        Self {
            inputs: Matrix::zeros(0, input_dim),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn classes(&self) -> Vec<u32> {
        let mut c: Vec<u32> = self.labels.clone();
        c.sort_unstable();
        c.dedup();
        c
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        let d = self.input_dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.inputs.row(i));
        }
        Dataset {
            inputs: Matrix::from_vec(indices.len(), d, data),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Samples whose label is in `classes`, in dataset order.
    pub fn filter_classes(&self, classes: &[u32]) -> Dataset {
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| classes.contains(&self.labels[i]))
            .collect();
        self.select(&idx)
    }

    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if self.input_dim() != other.input_dim() && !other.is_empty() && !self.is_empty() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                actual: other.input_dim(),
            });
        }
        let d = if self.is_empty() {
            other.input_dim()
        } else {
            self.input_dim()
        };
        let mut data = self.inputs.as_slice().to_vec();
        data.extend_from_slice(other.inputs.as_slice());
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Ok(Dataset {
            inputs: Matrix::from_vec(labels.len(), d, data),
            labels,
        })
    }

    /// Per class, the first `ceil(frac · n_c)` samples and the rest, both in
    /// dataset order.
    pub fn split_per_class(&self, frac: f64) -> (Vec<usize>, Vec<usize>) {
        let mut per_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, &l) in self.labels.iter().enumerate() {
            per_class.entry(l).or_default().push(i);
        }
        let (mut head, mut tail) = (Vec::new(), Vec::new());
        for idx in per_class.values() {
            let n = ((idx.len() as f64) * frac).ceil() as usize;
            head.extend_from_slice(&idx[..n.min(idx.len())]);
            tail.extend_from_slice(&idx[n.min(idx.len())..]);
        }
        head.sort_unstable();
        tail.sort_unstable();
        (head, tail)
    }
}

/// Gaussian class clusters: class means drawn from a standard normal in input
/// space, samples `mean + spread · N(0, I)`. Samples are grouped by class,
/// classes in label order `0..n_classes`.
pub fn make_synthetic_dataset(
    n_classes: usize,
    samples_per_class: usize,
    input_dim: usize,
    cluster_spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if n_classes < 2 {
        return Err(Error::Invalid(format!(
            "synthetic dataset needs at least 2 classes, got {n_classes}"
        )));
    }
    if input_dim == 0 {
        return Err(Error::Invalid("input dimension must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<Vec<f64>> = (0..n_classes)
        .map(|_| {
            (0..input_dim)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect()
        })
        .collect();
    let n = n_classes * samples_per_class;
    let mut data = Vec::with_capacity(n * input_dim);
    let mut labels = Vec::with_capacity(n);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..samples_per_class {
            for m in mean {
                let noise: f64 = StandardNormal.sample(&mut rng);
                data.push(m + cluster_spread * noise);
            }
            labels.push(c as u32);
        }
    }
    Ok(Dataset {
        inputs: Matrix::from_vec(n, input_dim, data),
        labels,
    })
}

/// Episodic memory: the first `per_class` samples of every class seen so far,
/// in dataset order.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayMemory {
    pub per_class: usize,
    data: Dataset,
}

impl ReplayMemory {
    pub fn new(per_class: usize, input_dim: usize) -> Self {
        Self {
            per_class,
            data: Dataset::empty(input_dim),
        }
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Stores up to `per_class` samples for each class of `task` not already
    /// in memory.
    pub fn update(&mut self, task: &Dataset) -> Result<()> {
        if self.per_class == 0 {
            return Ok(());
        }
        let known = self.data.classes();
        let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
        let mut keep = Vec::new();
        for (i, &l) in task.labels.iter().enumerate() {
            if known.contains(&l) {
                continue;
            }
            let c = counts.entry(l).or_default();
            if *c < self.per_class {
                *c += 1;
                keep.push(i);
            }
        }
        self.data = self.data.concat(&task.select(&keep))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::distance;

    #[test]
    fn zero_spread_collapses_classes() {
        let ds = make_synthetic_dataset(3, 5, 4, 0.0, 1).unwrap();
        for c in 0..3 {
            let first = ds.inputs.row(c * 5).to_vec();
            for i in 0..5 {
                assert_eq!(ds.inputs.row(c * 5 + i), first.as_slice());
            }
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = make_synthetic_dataset(4, 10, 6, 0.3, 7).unwrap();
        let b = make_synthetic_dataset(4, 10, 6, 0.3, 7).unwrap();
        assert_eq!(a, b);
        let c = make_synthetic_dataset(4, 10, 6, 0.3, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn class_means_are_distinct() {
        let ds = make_synthetic_dataset(12, 300, 32, 0.5, 3).unwrap();
        let mut means = vec![vec![0.0; 32]; 12];
        for (i, &l) in ds.labels.iter().enumerate() {
            for (m, v) in means[l as usize].iter_mut().zip(ds.inputs.row(i)) {
                *m += v / 300.0;
            }
        }
        for i in 0..12 {
            for j in (i + 1)..12 {
                assert!(distance(&means[i], &means[j]) > 0.0);
            }
        }
    }

    #[test]
    fn rejects_single_class() {
        assert!(make_synthetic_dataset(1, 5, 2, 0.1, 0).is_err());
    }

    #[test]
    fn memory_keeps_first_samples_per_new_class() {
        let ds = make_synthetic_dataset(3, 10, 2, 0.1, 0).unwrap();
        let mut mem = ReplayMemory::new(4, 2);
        mem.update(&ds.filter_classes(&[0, 1])).unwrap();
        assert_eq!(mem.len(), 8);
        assert_eq!(mem.data().inputs.row(0), ds.inputs.row(0));
        assert_eq!(mem.data().inputs.row(4), ds.inputs.row(10));
        // re-offering a known class adds nothing
        mem.update(&ds.filter_classes(&[1, 2])).unwrap();
        assert_eq!(mem.len(), 12);
        assert_eq!(mem.data().labels.iter().filter(|&&l| l == 1).count(), 4);

        let mut none = ReplayMemory::new(0, 2);
        none.update(&ds).unwrap();
        assert!(none.is_empty());
    }

    #[test]
    fn split_per_class_sizes() {
        let ds = make_synthetic_dataset(2, 10, 2, 0.1, 0).unwrap();
        let (g, q) = ds.split_per_class(0.2);
        assert_eq!(g, vec![0, 1, 10, 11]);
        assert_eq!(q.len(), 16);
    }
}
