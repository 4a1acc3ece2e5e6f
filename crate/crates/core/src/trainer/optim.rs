use crate::linalg::Matrix;

/// SGD with momentum and L2 weight decay:
/// `g ← g + wd·p`, `v ← μ·v + g`, `p ← p − lr·v`.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    momentum: f64,
    weight_decay: f64,
    buffers: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            buffers: Vec::new(),
        }
    }

    /// Drops the momentum buffers.
    pub fn reset(&mut self) {
        self.buffers.clear();
    }

    /// Updates every `(param, grad)` pair in order. The slot order must be the
    /// same on every call.
    pub fn step<'a>(
        &mut self,
        lr: f64,
        slots: impl IntoIterator<Item = (&'a mut [f64], &'a [f64])>,
    ) {
        for (k, (p, g)) in slots.into_iter().enumerate() {
            if self.buffers.len() <= k {
                self.buffers.push(vec![0.0; p.len()]);
            }
            let v = &mut self.buffers[k];
            debug_assert_eq!(v.len(), p.len());
            for ((pi, gi), vi) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                let g = gi + self.weight_decay * *pi;
                *vi = self.momentum * *vi + g;
                *pi -= lr * *vi;
            }
        }
    }
}

/// Flattens matrices and vectors into `(param, grad)` slots.
pub fn slots<'a>(
    params_w: &'a mut [Matrix],
    params_b: &'a mut [Vec<f64>],
    grads_w: &'a [Matrix],
    grads_b: &'a [Vec<f64>],
) -> Vec<(&'a mut [f64], &'a [f64])> {
    let mut out: Vec<(&mut [f64], &[f64])> = Vec::new();
    for ((w, b), (gw, gb)) in params_w
        .iter_mut()
        .zip(params_b.iter_mut())
        .zip(grads_w.iter().zip(grads_b))
    {
        out.push((w.as_mut_slice(), gw.as_slice()));
        out.push((b.as_mut_slice(), gb.as_slice()));
    }
    out
}
