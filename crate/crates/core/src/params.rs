//! Named parameter storage and the AdamW optimizer shared by every trainer.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::autograd::{Gradients, Mat};

/// Ordered map of parameter name to matrix. Iteration order is the sorted
/// name order, which keeps hashing and checkpoints stable.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.tensors.get_mut(name)
    }

    /// Panics when `name` is absent; model code only looks up names it created.
    pub fn expect(&self, name: &str) -> &Mat {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Mat> {
        self.tensors.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Mat)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(|m| m.len()).sum()
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, m) in &self.tensors {
            h.update(name.as_bytes());
            h.update((m.nrows() as u64).to_le_bytes());
            h.update((m.ncols() as u64).to_le_bytes());
            for v in m.iter() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

impl FromIterator<(String, Mat)> for ParamStore {
    fn from_iter<I: IntoIterator<Item = (String, Mat)>>(iter: I) -> Self {
        ParamStore {
            tensors: iter.into_iter().collect(),
        }
    }
}

/// Gaussian init with standard deviation `std`.
pub fn normal(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Mat {
    Mat::from_shape_fn((rows, cols), |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

/// Xavier-style init for a weight stored `(out, in)`.
pub fn linear_weight(rng: &mut impl Rng, out_dim: usize, in_dim: usize) -> Mat {
    normal(rng, out_dim, in_dim, (1.0 / in_dim as f64).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub warmup_steps: usize,
    /// Cosine decay of the learning rate to zero over this many steps.
    pub cosine_decay_steps: Option<usize>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: Some(1.0),
            warmup_steps: 0,
            cosine_decay_steps: None,
        }
    }
}

struct Moments {
    m: Mat,
    v: Mat,
}

pub struct AdamW {
    pub config: AdamWConfig,
    step: usize,
    moments: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Applies one update to every parameter that has a gradient. Parameters
    /// without gradients are left untouched bit for bit.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let c = self.config;
        let clip = match c.clip_norm {
            Some(max) => {
                let norm = grads
                    .by_name
                    .values()
                    .map(|g| g.iter().map(|v| v * v).sum::<f64>())
                    .sum::<f64>()
                    .sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let warm = if c.warmup_steps > 0 {
            (self.step as f64 / c.warmup_steps as f64).min(1.0)
        } else {
            1.0
        };
        let decay = match c.cosine_decay_steps {
            Some(total) if total > 0 => {
                let progress = ((self.step - 1) as f64 / total as f64).min(1.0);
                0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
            }
            _ => 1.0,
        };
        let lr = c.learning_rate * warm * decay;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);

        for (name, g) in &grads.by_name {
            let Some(p) = params.get_mut(name) else {
                continue;
            };
            let mom = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                m: Mat::zeros(p.raw_dim()),
                v: Mat::zeros(p.raw_dim()),
            });
            ndarray::Zip::from(&mut *p)
                .and(&mut mom.m)
                .and(&mut mom.v)
                .and(g)
                .for_each(|w, m, v, &gr| {
                    let gr = gr * clip;
                    *m = c.beta1 * *m + (1.0 - c.beta1) * gr;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * gr * gr;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *w -= lr * (mh / (vh.sqrt() + c.eps) + c.weight_decay * *w);
                });
        }
    }
}
