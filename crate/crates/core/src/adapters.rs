//! Low-rank adapters on the denoiser's linear layers.
//!
//! A target `name` with frozen weight `W (out, in)` gains factors
//! `A (rank, in)` and `B (out, rank)`; the layer computes
//! `x Wᵀ + (alpha / rank) · (x Aᵀ) Bᵀ`. `B` starts at zero, so a fresh
//! adapter leaves the base model's output untouched.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::checkpoint;
use crate::denoiser::{block_linear_names, block_modulation_names, head_linear_names, Denoiser};
use crate::error::{Error, Result};
use crate::params::{normal, ParamStore};

/// Tensor-name prefix shared by all adapter factors.
pub const LORA_PREFIX: &str = "lora.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    /// `None` selects [`default_targets`].
    pub targets: Option<Vec<String>>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 8,
            alpha: 8.0,
            targets: None,
        }
    }
}

impl LoraConfig {
    /// Rank and alpha 256, as used on full-size backbones.
    pub fn high_rank() -> Self {
        LoraConfig {
            rank: 256,
            alpha: 256.0,
            targets: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<String>,
    pub params: ParamStore,
}

#[derive(Serialize, Deserialize)]
struct AdapterMeta {
    rank: usize,
    alpha: f64,
    targets: Vec<String>,
}

const CHECKPOINT_KIND: &str = "lora-adapter";

fn a_name(target: &str) -> String {
    format!("{LORA_PREFIX}{target}.a")
}

fn b_name(target: &str) -> String {
    format!("{LORA_PREFIX}{target}.b")
}

/// Attention q/k/v/out, both MLP projections and the modulation projections
/// of every block, plus the output head.
pub fn default_targets(layers: usize) -> Vec<String> {
    let mut targets: Vec<String> = (0..layers)
        .flat_map(|l| block_linear_names(l).into_iter().chain(block_modulation_names(l)))
        .collect();
    targets.extend(head_linear_names());
    targets
}

fn target_dims(denoiser: &Denoiser, target: &str) -> Result<(usize, usize)> {
    denoiser
        .params
        .get(&format!("{target}.weight"))
        .map(|w| w.dim())
        .ok_or_else(|| Error::UnknownTarget(target.to_string()))
}

/// Builds a fresh adapter for `targets` on `denoiser`.
pub fn inject(denoiser: &Denoiser, targets: &[String], rank: usize, alpha: f64, seed: u64) -> Result<LoraAdapter> {
    if rank == 0 {
        return Err(Error::config("lora.rank", "must be >= 1"));
    }
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::config("lora.alpha", "must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    for target in targets {
        let (out_dim, in_dim) = target_dims(denoiser, target)?;
        let limit = out_dim.min(in_dim);
        if rank > limit {
            return Err(Error::RankTooLarge {
                target: target.clone(),
                rank,
                limit,
            });
        }
        params.insert(a_name(target), normal(&mut rng, rank, in_dim, (1.0 / in_dim as f64).sqrt()));
        params.insert(b_name(target), Mat::zeros((out_dim, rank)));
    }
    Ok(LoraAdapter {
        rank,
        alpha,
        targets: targets.to_vec(),
        params,
    })
}

/// Injects with a [`LoraConfig`].
pub fn inject_with(denoiser: &Denoiser, config: &LoraConfig, seed: u64) -> Result<LoraAdapter> {
    let targets = config
        .targets
        .clone()
        .unwrap_or_else(|| default_targets(denoiser.layers()));
    inject(denoiser, &targets, config.rank, config.alpha, seed)
}

/// `(alpha / rank) · (x Aᵀ) Bᵀ` for a batch of row vectors `x`.
pub fn lora_delta(x: &Mat, a: &Mat, b: &Mat, scale: f64) -> Mat {
    x.dot(&a.t()).dot(&b.t()) * scale
}

impl LoraAdapter {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn contains(&self, target: &str) -> bool {
        self.params.contains(&a_name(target))
    }

    /// `(A name, A, B name, B)` for an adapted target.
    pub fn factors(&self, target: &str) -> Option<(String, &Mat, String, &Mat)> {
        let an = a_name(target);
        let bn = b_name(target);
        let a = self.params.get(&an)?;
        let b = self.params.get(&bn)?;
        Some((an, a, bn, b))
    }

    /// Full-rank weight update `scale · B A` for a target.
    pub fn weight_delta(&self, target: &str) -> Option<Mat> {
        self.factors(target).map(|(_, a, _, b)| b.dot(a) * self.scale())
    }

    /// Same factors with the overall strength multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> LoraAdapter {
        LoraAdapter {
            alpha: self.alpha * factor,
            ..self.clone()
        }
    }

    /// Checks the adapter fits `denoiser` (targets exist, factor shapes agree).
    pub fn check_compatible(&self, denoiser: &Denoiser) -> Result<()> {
        for target in &self.targets {
            let (out_dim, in_dim) = target_dims(denoiser, target)?;
            let (_, a, _, b) = self
                .factors(target)
                .ok_or_else(|| Error::ConfigMismatch(format!("adapter has no factors for {target}")))?;
            if a.dim() != (self.rank, in_dim) || b.dim() != (out_dim, self.rank) {
                return Err(Error::ConfigMismatch(format!(
                    "{target}: factors {:?}/{:?} do not fit weight ({out_dim}, {in_dim}) at rank {}",
                    a.dim(),
                    b.dim(),
                    self.rank
                )));
            }
        }
        if self.params.len() != 2 * self.targets.len() {
            return Err(Error::ConfigMismatch("adapter holds tensors for undeclared targets".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = AdapterMeta {
            rank: self.rank,
            alpha: self.alpha,
            targets: self.targets.clone(),
        };
        checkpoint::save(path, CHECKPOINT_KIND, &meta, &self.params)
    }

    /// Loads an adapter and validates it against `denoiser`.
    pub fn load(path: &Path, denoiser: &Denoiser) -> Result<Self> {
        let (meta, params): (AdapterMeta, ParamStore) = checkpoint::load(path, CHECKPOINT_KIND)?;
        let adapter = LoraAdapter {
            rank: meta.rank,
            alpha: meta.alpha,
            targets: meta.targets,
            params,
        };
        adapter.check_compatible(denoiser)?;
        Ok(adapter)
    }
}

/// Folds the adapter into the base weights: `W ← W + scale · B A`.
///
/// The result is a plain denoiser; running it together with the same adapter
/// again applies the update twice.
pub fn merge(denoiser: &Denoiser, adapter: &LoraAdapter) -> Result<Denoiser> {
    adapter.check_compatible(denoiser)?;
    let mut merged = denoiser.clone();
    for target in &adapter.targets {
        let delta = adapter.weight_delta(target).expect("checked above");
        let w = merged
            .params
            .get_mut(&format!("{target}.weight"))
            .expect("checked above");
        *w += &delta;
    }
    Ok(merged)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Action, ClassTriple, Quality, Task};
    use crate::denoiser::{ConditioningSignal, DenoiserConfig};
    use crate::video::LatentTensor;
    use ndarray::Array4;
    use rand::Rng;
    use std::collections::BTreeSet;

    fn small() -> Denoiser {
        Denoiser::new(
            DenoiserConfig {
                layers: 2,
                width: 16,
                heads: 2,
                mlp_ratio: 2,
                patch: 2,
                latent_channels: 2,
                qk_normalization: true,
            },
            3,
        )
        .unwrap()
    }

    fn randomize_b(adapter: &mut LoraAdapter, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in adapter.targets.clone() {
            adapter
                .params
                .get_mut(&b_name(&t))
                .unwrap()
                .mapv_inplace(|_| rng.random_range(-0.3..0.3));
        }
    }

    fn input() -> (LatentTensor, ConditioningSignal) {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = LatentTensor::new(Array4::from_shape_fn((2, 4, 4, 2), |_| rng.random_range(-1.0..1.0))).unwrap();
        let c = ConditioningSignal::text(ClassTriple::new(Quality::Ideal, Action::Withdrawal, Task::Backhand));
        (x, c)
    }

    #[test]
    fn fresh_adapter_is_neutral() {
        let d = small();
        let a = inject_with(&d, &LoraConfig::default(), 1).unwrap();
        assert_eq!(a.targets.len(), 2 * 12 + 3);
        let (x, c) = input();
        let none = BTreeSet::new();
        assert_eq!(
            d.denoise(Some(&a), &x, 0.4, &c, &none).unwrap(),
            d.denoise(None, &x, 0.4, &c, &none).unwrap()
        );
    }

    #[test]
    fn merged_model_matches_adapted_model() {
        let d = small();
        let mut a = inject_with(&d, &LoraConfig::default(), 2).unwrap();
        randomize_b(&mut a, 4);
        let merged = merge(&d, &a).unwrap();
        let (x, c) = input();
        let none = BTreeSet::new();
        let adapted = d.denoise(Some(&a), &x, 0.6, &c, &none).unwrap();
        let folded = merged.denoise(None, &x, 0.6, &c, &none).unwrap();
        let err = (adapted.data() - folded.data()).mapv(f64::abs).fold(0.0, |m: f64, v| m.max(*v));
        assert!(err < 1e-5, "max diff {err}");
        let twice = merged.denoise(Some(&a), &x, 0.6, &c, &none).unwrap();
        let diff = (twice.data() - folded.data()).mapv(f64::abs).fold(0.0, |m: f64, v| m.max(*v));
        assert!(diff > 1e-4, "double application went unnoticed");
    }

    #[test]
    fn single_layer_delta() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = normal(&mut rng, 5, 7, 1.0);
        let a = normal(&mut rng, 3, 7, 1.0);
        let b = normal(&mut rng, 5, 3, 1.0);
        let x = normal(&mut rng, 4, 7, 1.0);
        let adapted = x.dot(&w.t()) + lora_delta(&x, &a, &b, 2.0 / 3.0);
        let merged = x.dot(&(&w + &(b.dot(&a) * (2.0 / 3.0))).t());
        let err = (&adapted - &merged).mapv(f64::abs).iter().cloned().fold(0.0, f64::max);
        assert!(err < 1e-12);
        let zero = lora_delta(&x, &a, &Mat::zeros((5, 3)), 1.0);
        assert!(zero.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn scaling_the_adapter_scales_the_update() {
        let d = small();
        let mut a = inject_with(&d, &LoraConfig::default(), 5).unwrap();
        randomize_b(&mut a, 6);
        let t = &a.targets[0];
        let one = a.weight_delta(t).unwrap();
        let half = a.scaled(0.5).weight_delta(t).unwrap();
        let err = (&one * 0.5 - &half).mapv(f64::abs).iter().cloned().fold(0.0, f64::max);
        assert!(err < 1e-12);
    }

    #[test]
    fn invalid_targets_and_ranks() {
        let d = small();
        assert!(matches!(
            inject(&d, &["blocks.9.attn.q".into()], 4, 4.0, 0),
            Err(Error::UnknownTarget(_))
        ));
        assert!(matches!(
            inject(&d, &["blocks.0.attn.q".into()], 17, 17.0, 0),
            Err(Error::RankTooLarge { rank: 17, limit: 16, .. })
        ));
    }

    #[test]
    fn save_load_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.swt");
        let d = small();
        let mut a = inject_with(&d, &LoraConfig::default(), 7).unwrap();
        randomize_b(&mut a, 8);
        a.save(&path).unwrap();
        assert_eq!(LoraAdapter::load(&path, &d).unwrap(), a);
        let wider = Denoiser::new(
            DenoiserConfig {
                width: 32,
                ..d.config
            },
            0,
        )
        .unwrap();
        assert!(matches!(LoraAdapter::load(&path, &wider), Err(Error::ConfigMismatch(_))));
        let shallow = Denoiser::new(
            DenoiserConfig {
                layers: 1,
                ..d.config
            },
            0,
        )
        .unwrap();
        assert!(matches!(LoraAdapter::load(&path, &shallow), Err(Error::UnknownTarget(_))));
    }
}
