use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Scratch,
    Finetuned,
    Replaced,
}

/// Dense feed-forward network: ReLU between layers, identity at the output.
///
/// Layer `l` maps `x ↦ x · W_l + b_l` with `W_l` stored as `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct RepresentationModel {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
    pub model_id: String,
    pub provenance: Provenance,
}

/// Intermediate values kept for back-propagation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer; `inputs[0]` is the batch itself.
    inputs: Vec<Matrix>,
    /// Pre-activation output of each layer.
    pre: Vec<Matrix>,
}

impl ForwardCache {
    pub fn output(&self) -> &Matrix {
        self.pre.last().expect("at least one layer")
    }
}

/// Parameter gradients, shaped like the model's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl RepresentationModel {
    /// He-uniform initialisation with zero biases. `sizes` lists every layer
    /// width from input to embedding.
    pub fn new(sizes: &[usize], model_id: impl Into<String>, seed: u64) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Invalid(format!("bad layer sizes {sizes:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / fan_in as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            weights.push(Matrix::from_vec(fan_in, fan_out, data));
            biases.push(vec![0.0; fan_out]);
        }
        Ok(Self {
            weights,
            biases,
            model_id: model_id.into(),
            provenance: Provenance::Scratch,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].rows()
    }

    pub fn embedding_dim(&self) -> usize {
        self.weights.last().expect("at least one layer").cols()
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(self.weights.iter().map(Matrix::cols));
        s
    }

    pub fn parameter_count(&self) -> usize {
        self.weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| w.rows() * w.cols() + b.len())
            .sum()
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                actual: x.cols(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward_cached(x)?.pre.pop().expect("at least one layer"))
    }

    pub fn forward_cached(&self, x: &Matrix) -> Result<ForwardCache> {
        self.check_input(x)?;
        let n = self.weights.len();
        let mut inputs = Vec::with_capacity(n);
        let mut pre = Vec::with_capacity(n);
        let mut h = x.clone();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = h.matmul(w);
            for i in 0..z.rows() {
                for (v, bj) in z.row_mut(i).iter_mut().zip(b) {
                    *v += bj;
                }
            }
            inputs.push(h);
            h = if l + 1 < n {
                let mut a = z.clone();
                a.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
                a
            } else {
                Matrix::zeros(0, 0)
            };
            pre.push(z);
        }
        Ok(ForwardCache { inputs, pre })
    }

    /// Back-propagates `grad_out` (gradient of the loss with respect to the
    /// network output) into parameter gradients.
    pub fn backward(&self, cache: &ForwardCache, grad_out: &Matrix) -> Gradients {
        let n = self.weights.len();
        let mut gw = vec![Matrix::zeros(0, 0); n];
        let mut gb = vec![Vec::new(); n];
        let mut delta = grad_out.clone();
        for l in (0..n).rev() {
            gw[l] = cache.inputs[l].t_matmul(&delta);
            let mut b = vec![0.0; delta.cols()];
            for i in 0..delta.rows() {
                for (bj, v) in b.iter_mut().zip(delta.row(i)) {
                    *bj += v;
                }
            }
            gb[l] = b;
            if l > 0 {
                let mut prev = delta.matmul_t(&self.weights[l]);
                let z = &cache.pre[l - 1];
                for (p, zv) in prev.as_mut_slice().iter_mut().zip(z.as_slice()) {
                    if *zv <= 0.0 {
                        *p = 0.0;
                    }
                }
                delta = prev;
            }
        }
        Gradients {
            weights: gw,
            biases: gb,
        }
    }

    /// Embeds the rows of `x` as `f32` vectors.
    pub fn embed(&self, x: &Matrix) -> Result<Vec<Vec<f32>>> {
        let out = self.forward(x)?;
        Ok((0..out.rows())
            .map(|i| out.row(i).iter().map(|&v| v as f32).collect())
            .collect())
    }

    pub fn to_checkpoint(&self, head: Option<&LinearHead>) -> Checkpoint {
        Checkpoint {
            model_id: self.model_id.clone(),
            provenance: self.provenance,
            layer_shapes: self
                .weights
                .iter()
                .map(|w| [w.rows(), w.cols()])
                .collect(),
            weights: self.weights.iter().map(|w| w.as_slice().to_vec()).collect(),
            biases: self.biases.clone(),
            head: head.map(|h| HeadCheckpoint {
                shape: [h.weight.rows(), h.weight.cols()],
                weight: h.weight.as_slice().to_vec(),
                bias: h.bias.clone(),
            }),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, Option<LinearHead>)> {
        let n = ck.layer_shapes.len();
        if n == 0 || ck.weights.len() != n || ck.biases.len() != n {
            return Err(Error::Format("checkpoint layer count mismatch".into()));
        }
        let mut weights = Vec::with_capacity(n);
        for (l, (&[r, c], w)) in ck.layer_shapes.iter().zip(&ck.weights).enumerate() {
            if w.len() != r * c || ck.biases[l].len() != c {
                return Err(Error::Format(format!("checkpoint layer {l} shape mismatch")));
            }
            if l > 0 && ck.layer_shapes[l - 1][1] != r {
                return Err(Error::Format(format!("checkpoint layer {l} does not chain")));
            }
            weights.push(Matrix::from_vec(r, c, w.clone()));
        }
        let head = match &ck.head {
            Some(h) => {
                let [r, c] = h.shape;
                if h.weight.len() != r * c || h.bias.len() != c {
                    return Err(Error::Format("checkpoint head shape mismatch".into()));
                }
                Some(LinearHead {
                    weight: Matrix::from_vec(r, c, h.weight.clone()),
                    bias: h.bias.clone(),
                })
            }
            None => None,
        };
        Ok((
            Self {
                weights,
                biases: ck.biases.clone(),
                model_id: ck.model_id.clone(),
                provenance: ck.provenance,
            },
            head,
        ))
    }
}

/// Trainable linear classifier used only by the experience-replay baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    /// `d × classes`
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl LinearHead {
    pub fn new(dim: usize, classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = (1.0 / dim as f64).sqrt();
        let data = (0..dim * classes)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self {
            weight: Matrix::from_vec(dim, classes, data),
            bias: vec![0.0; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, features: &Matrix) -> Matrix {
        let mut z = features.matmul(&self.weight);
        for i in 0..z.rows() {
            for (v, b) in z.row_mut(i).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        z
    }

    /// Returns `(∂W, ∂b, ∂features)`.
    pub fn backward(&self, features: &Matrix, grad_logits: &Matrix) -> (Matrix, Vec<f64>, Matrix) {
        let gw = features.t_matmul(grad_logits);
        let mut gb = vec![0.0; self.classes()];
        for i in 0..grad_logits.rows() {
            for (b, v) in gb.iter_mut().zip(grad_logits.row(i)) {
                *b += v;
            }
        }
        (gw, gb, grad_logits.matmul_t(&self.weight))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadCheckpoint {
    pub shape: [usize; 2],
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// JSON checkpoint; weights are flattened row-major `in × out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub model_id: String,
    pub provenance: Provenance,
    pub layer_shapes: Vec<[usize; 2]>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head: Option<HeadCheckpoint>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}
