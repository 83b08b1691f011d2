//! Rectified-flow training and Euler sampling in latent space.
//!
//! Convention: `x_t = (1 − t)·x0 + t·x1` with data `x0` and Gaussian noise
//! `x1`; the model regresses `v = x1 − x0`. Sampling integrates from `t = 1`
//! down to `t = 0` with `x ← x − Δt · v̂`.

use std::path::Path;
use std::time::Instant;

use ndarray::{Array4, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::adapters::{inject_with, LoraAdapter, LoraConfig, LORA_PREFIX};
use crate::autograd::{Gradients, Graph, Trainable};
use crate::codec::Codec;
use crate::dataset::{parse_caption, Bucket, ClassTriple, DatasetManifest};
use crate::denoiser::{apply_first_frame_conditioning, ConditioningSignal, Denoiser};
use crate::error::{Error, Result};
use crate::guidance::{guided_velocity, AdaptedDenoiser, GuidanceConfig, VelocityModel};
use crate::params::{AdamW, AdamWConfig};
use crate::video::{read_frames, LatentTensor, VideoTensor};

#[derive(Clone, Debug, PartialEq)]
pub struct FlowMatchSample {
    pub x0: LatentTensor,
    pub x1: LatentTensor,
    pub t: f64,
    pub x_t: LatentTensor,
    pub v_target: LatentTensor,
}

impl FlowMatchSample {
    pub fn new(x0: LatentTensor, x1: LatentTensor, t: f64) -> Result<Self> {
        x0.ensure_same_shape(&x1)?;
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::precondition(format!("timestep {t} outside [0, 1]")));
        }
        let x_t = LatentTensor::new(x0.data() * (1.0 - t) + x1.data() * t)?;
        let v_target = LatentTensor::new(x1.data() - x0.data())?;
        Ok(FlowMatchSample {
            x0,
            x1,
            t,
            x_t,
            v_target,
        })
    }
}

/// Mean over unmasked latent positions `(t', h', w')` of the squared
/// channel-vector error. Frames flagged in `clean_frames` are excluded.
pub fn masked_velocity_loss(pred: &LatentTensor, target: &LatentTensor, clean_frames: &[bool]) -> Result<f64> {
    pred.ensure_same_shape(target)?;
    let (frames, h, w, _) = pred.shape();
    let mut total = 0.0;
    let mut positions = 0usize;
    for f in 0..frames {
        if clean_frames.get(f).copied().unwrap_or(false) {
            continue;
        }
        let diff = &pred.data().index_axis(Axis(0), f) - &target.data().index_axis(Axis(0), f);
        total += diff.iter().map(|d| d * d).sum::<f64>();
        positions += h * w;
    }
    if positions == 0 {
        return Err(Error::precondition("every frame is masked out of the loss"));
    }
    Ok(total / positions as f64)
}

/// A pre-encoded training clip.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub latent: LatentTensor,
    pub class: ClassTriple,
}

/// One drawn training sample with its (possibly dropped) conditioning.
#[derive(Clone, Debug)]
pub struct Draw {
    pub sample: FlowMatchSample,
    pub cond: ConditioningSignal,
}

fn standard_normal(rng: &mut impl Rng, shape: (usize, usize, usize, usize)) -> Result<LatentTensor> {
    LatentTensor::new(Array4::from_shape_simple_fn(shape, || rng.sample(StandardNormal)))
}

/// Draws `t ~ U(0, 1)`, noise and condition dropout for each example, in order.
pub fn draw_batch(
    rng: &mut impl Rng,
    batch: &[&TrainingExample],
    condition_dropout: f64,
    image_conditioning: bool,
) -> Result<Vec<Draw>> {
    batch
        .iter()
        .map(|ex| {
            let t: f64 = rng.random();
            let x1 = standard_normal(rng, ex.latent.shape())?;
            let dropped = rng.random::<f64>() < condition_dropout;
            let class = (!dropped).then_some(ex.class);
            let cond = if image_conditioning {
                ConditioningSignal::image(class, ex.latent.first_frame(), ex.latent.shape().0)
            } else {
                match class {
                    Some(c) => ConditioningSignal::text(c),
                    None => ConditioningSignal::null(),
                }
            };
            Ok(Draw {
                sample: FlowMatchSample::new(ex.latent.clone(), x1, t)?,
                cond,
            })
        })
        .collect()
}

/// Batch-mean flow-matching loss and its gradients for the `trainable`
/// parameters.
pub fn flow_matching_objective(
    denoiser: &Denoiser,
    adapter: Option<&LoraAdapter>,
    draws: &[Draw],
    trainable: &Trainable,
) -> Result<(f64, Gradients)> {
    if draws.is_empty() {
        return Err(Error::precondition("empty batch"));
    }
    let weight = 1.0 / draws.len() as f64;
    let mut loss = 0.0;
    let mut grads = Gradients::default();
    let no_skip = Default::default();
    for d in draws {
        let x_t = if d.cond.is_image_conditioned() {
            apply_first_frame_conditioning(&d.sample.x_t, &d.cond)?
        } else {
            d.sample.x_t.clone()
        };
        let (frames, rows, cols) = denoiser.token_grid(x_t.shape())?;
        let clean = d.cond.conditioning_mask.clone().unwrap_or_default();
        let per_frame = rows * cols;
        let kept = (0..frames).filter(|f| !clean.get(*f).copied().unwrap_or(false)).count();
        if kept == 0 {
            return Err(Error::precondition("every frame is masked out of the loss"));
        }
        let positions = (kept * per_frame * denoiser.config.patch * denoiser.config.patch) as f64;
        let row_weights: Vec<f64> = (0..frames * per_frame)
            .map(|r| {
                if clean.get(r / per_frame).copied().unwrap_or(false) {
                    0.0
                } else {
                    1.0 / positions
                }
            })
            .collect();

        let mut g = Graph::with_trainable(trainable.clone());
        let pred = denoiser.forward(&mut g, adapter, &x_t, d.sample.t, &d.cond, &no_skip)?;
        let target = denoiser.patchify(&d.sample.v_target)?;
        let l = g.weighted_squared_error(pred, target, row_weights);
        loss += weight * g.value(l)[[0, 0]];
        if *trainable != Trainable::None {
            grads.accumulate(&g.backward(l), weight);
        }
    }
    Ok((loss, grads))
}

/// Loss value only, drawing the batch from `rng`.
pub fn flow_matching_loss(
    denoiser: &Denoiser,
    adapter: Option<&LoraAdapter>,
    batch: &[&TrainingExample],
    rng: &mut impl Rng,
    condition_dropout: f64,
    image_conditioning: bool,
) -> Result<f64> {
    let draws = draw_batch(rng, batch, condition_dropout, image_conditioning)?;
    Ok(flow_matching_objective(denoiser, adapter, &draws, &Trainable::None)?.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    FullFinetune,
    Lora,
}

/// Default epoch counts for the text-to-video and image-to-video variants.
pub const T2V_EPOCHS: usize = 3;
pub const I2V_EPOCHS: usize = 30;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    /// `None` uses the variant's default epoch count.
    pub epochs: Option<usize>,
    /// Overrides `epochs` with an exact optimizer step count.
    pub steps: Option<usize>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
    pub warmup_steps: usize,
    /// Decay the learning rate to zero along a cosine over the run.
    pub cosine_decay: bool,
    pub condition_dropout: f64,
    pub seed: u64,
    /// Train the image-to-video variant (clean first latent frame).
    pub image_conditioning: bool,
    pub lora: LoraConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Lora,
            epochs: None,
            steps: None,
            batch_size: 1,
            learning_rate: 3e-3,
            weight_decay: 0.0,
            clip_norm: Some(1.0),
            warmup_steps: 20,
            cosine_decay: false,
            condition_dropout: 0.1,
            seed: 0,
            image_conditioning: false,
            lora: LoraConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be >= 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config("train.learning_rate", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.condition_dropout) {
            return Err(Error::config("train.condition_dropout", "must lie in [0, 1]"));
        }
        if self.epochs == Some(0) || self.steps == Some(0) {
            return Err(Error::config("train.steps", "must be >= 1"));
        }
        Ok(())
    }

    pub fn total_steps(&self, examples: usize) -> usize {
        match self.steps {
            Some(s) => s,
            None => {
                let epochs = self.epochs.unwrap_or(if self.image_conditioning { I2V_EPOCHS } else { T2V_EPOCHS });
                epochs * examples.div_ceil(self.batch_size)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub denoiser: Denoiser,
    pub adapter: Option<LoraAdapter>,
    /// Batch loss per optimizer step.
    pub losses: Vec<f64>,
    /// Wall-clock seconds since the start of training, per step.
    pub elapsed: Vec<f64>,
    pub seconds: f64,
}

#[derive(Serialize)]
struct MetricsLine {
    step: usize,
    loss: f64,
    seconds: f64,
}

impl TrainOutcome {
    /// One JSON object per step: `{"step": 1, "loss": ..., "seconds": ...}`.
    pub fn metrics_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for (i, (&loss, &seconds)) in self.losses.iter().zip(&self.elapsed).enumerate() {
            out.push_str(&serde_json::to_string(&MetricsLine { step: i + 1, loss, seconds })?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Trains on pre-encoded examples. In LoRA mode the base denoiser is frozen
/// and returned unchanged.
pub fn train(examples: &[TrainingExample], denoiser: &Denoiser, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if examples.is_empty() {
        return Err(Error::EmptyManifest);
    }
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut base = denoiser.clone();
    let mut adapter = match config.mode {
        TrainMode::Lora => Some(inject_with(denoiser, &config.lora, config.seed ^ 0x5eed)?),
        TrainMode::FullFinetune => None,
    };
    let trainable = match config.mode {
        TrainMode::Lora => Trainable::Prefix(LORA_PREFIX.to_string()),
        TrainMode::FullFinetune => Trainable::All,
    };
    let total = config.total_steps(examples.len());
    let mut opt = AdamW::new(AdamWConfig {
        learning_rate: config.learning_rate,
        weight_decay: config.weight_decay,
        clip_norm: config.clip_norm,
        warmup_steps: config.warmup_steps,
        cosine_decay_steps: config.cosine_decay.then_some(total),
        ..AdamWConfig::default()
    });

    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut losses = Vec::with_capacity(total);
    let mut elapsed = Vec::with_capacity(total);
    for _ in 0..total {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size {
            if cursor == order.len() {
                order = (0..examples.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&examples[order[cursor]]);
            cursor += 1;
        }
        let draws = draw_batch(&mut rng, &batch, config.condition_dropout, config.image_conditioning)?;
        let (loss, grads) = flow_matching_objective(&base, adapter.as_ref(), &draws, &trainable)?;
        match adapter.as_mut() {
            Some(a) => opt.step(&mut a.params, &grads),
            None => opt.step(&mut base.params, &grads),
        }
        losses.push(loss);
        elapsed.push(started.elapsed().as_secs_f64());
    }
    Ok(TrainOutcome {
        denoiser: base,
        adapter,
        losses,
        elapsed,
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// Reads every manifest clip (paths relative to `root`) and encodes it once.
pub fn encode_manifest(manifest: &DatasetManifest, codec: &Codec, root: &Path) -> Result<Vec<TrainingExample>> {
    if manifest.is_empty() {
        return Err(Error::EmptyManifest);
    }
    manifest
        .records
        .iter()
        .map(|r| {
            let dir = root.join(&r.frames_path);
            let clip = read_frames(&dir)?;
            if clip.frames() != r.frame_count || clip.height() != r.height || clip.width() != r.width {
                return Err(Error::BucketMismatch {
                    clip_id: r.clip_id.clone(),
                    width: clip.width(),
                    height: clip.height(),
                    frame_count: clip.frames(),
                });
            }
            Ok(TrainingExample {
                latent: codec.encode(&clip)?,
                class: r.annotation.class(),
            })
        })
        .collect()
}

/// Integrates from `x_init` at `t = 1` to `t = 0` in `steps` Euler steps.
pub fn sample_from<M: VelocityModel + ?Sized>(
    model: &M,
    x_init: LatentTensor,
    cond: &ConditioningSignal,
    guidance: &GuidanceConfig,
    steps: usize,
) -> Result<LatentTensor> {
    if steps == 0 {
        return Err(Error::precondition("sampling needs at least one step"));
    }
    let pin = |x: LatentTensor| -> Result<LatentTensor> {
        if cond.is_image_conditioned() {
            apply_first_frame_conditioning(&x, cond)
        } else {
            Ok(x)
        }
    };
    let dt = 1.0 / steps as f64;
    let mut x = pin(x_init)?;
    for k in 0..steps {
        let t = 1.0 - k as f64 * dt;
        let v = guided_velocity(model, &x, t, cond, guidance)?;
        let next = x.data() - &(v.data() * dt);
        x = pin(LatentTensor::new(next)?)?;
    }
    Ok(x)
}

/// Samples a latent of `shape` starting from seeded Gaussian noise.
pub fn sample<M: VelocityModel + ?Sized>(
    model: &M,
    cond: &ConditioningSignal,
    guidance: &GuidanceConfig,
    steps: usize,
    shape: (usize, usize, usize, usize),
    seed: u64,
) -> Result<LatentTensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = standard_normal(&mut rng, shape)?;
    sample_from(model, x, cond, guidance, steps)
}

/// Everything needed to turn conditioning into pixels.
#[derive(Clone, Copy)]
pub struct Generator<'a> {
    pub denoiser: &'a Denoiser,
    pub adapter: Option<&'a LoraAdapter>,
    pub codec: &'a Codec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    /// `None` generates from the null condition.
    pub caption: Option<String>,
    pub guidance: GuidanceConfig,
    pub steps: usize,
    pub bucket: Bucket,
    pub seed: u64,
}

impl Generator<'_> {
    pub fn conditioning(&self, request: &GenerationRequest, first_frame: Option<&VideoTensor>) -> Result<ConditioningSignal> {
        let class = match &request.caption {
            Some(c) => {
                let (q, a, t) = parse_caption(c)?;
                Some(ClassTriple::new(q, a, t))
            }
            None => None,
        };
        let shape = self.latent_shape(request.bucket)?;
        match first_frame {
            None => Ok(match class {
                Some(c) => ConditioningSignal::text(c),
                None => ConditioningSignal::null(),
            }),
            Some(frame) => {
                let b = request.bucket;
                if frame.frames() != 1 || frame.height() != b.height || frame.width() != b.width {
                    return Err(Error::shape(format!(
                        "first frame {:?} does not match bucket {b}",
                        frame.shape()
                    )));
                }
                let latent = self.codec.encode(frame)?;
                Ok(ConditioningSignal::image(class, latent, shape.0))
            }
        }
    }

    pub fn latent_shape(&self, bucket: Bucket) -> Result<(usize, usize, usize, usize)> {
        self.codec.config.latent_shape(bucket.frame_count, bucket.height, bucket.width)
    }

    pub fn generate_latent(&self, request: &GenerationRequest, first_frame: Option<&VideoTensor>) -> Result<LatentTensor> {
        let cond = self.conditioning(request, first_frame)?;
        let shape = self.latent_shape(request.bucket)?;
        let model = AdaptedDenoiser::new(self.denoiser, self.adapter);
        sample(&model, &cond, &request.guidance, request.steps, shape, request.seed)
    }

    pub fn generate(&self, request: &GenerationRequest, first_frame: Option<&VideoTensor>) -> Result<VideoTensor> {
        self.codec.decode(&self.generate_latent(request, first_frame)?)
    }
}

/// Caption (or null) to decoded clip, optionally conditioned on a first frame.
pub fn generate_video(
    generator: Generator<'_>,
    request: &GenerationRequest,
    first_frame: Option<&VideoTensor>,
) -> Result<VideoTensor> {
    generator.generate(request, first_frame)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Action, Quality, Task};
    use crate::denoiser::DenoiserConfig;
    use std::collections::BTreeSet;

    fn scalar(v: f64) -> LatentTensor {
        LatentTensor::from_elem((1, 1, 1, 1), v)
    }

    #[test]
    fn hand_computed_examples() {
        let s = FlowMatchSample::new(scalar(0.0), scalar(1.0), 0.5).unwrap();
        assert_eq!(s.x_t, scalar(0.5));
        assert_eq!(s.v_target, scalar(1.0));
        assert_eq!(masked_velocity_loss(&scalar(0.0), &s.v_target, &[]).unwrap(), 1.0);
        assert_eq!(masked_velocity_loss(&s.v_target, &s.v_target, &[]).unwrap(), 0.0);
        let z = FlowMatchSample::new(scalar(0.0), scalar(0.0), 0.3).unwrap();
        assert_eq!(masked_velocity_loss(&scalar(0.0), &z.v_target, &[]).unwrap(), 0.0);
    }

    #[test]
    fn endpoints_of_the_path() {
        let x0 = LatentTensor::from_elem((2, 2, 2, 3), 0.25);
        let x1 = LatentTensor::from_elem((2, 2, 2, 3), -1.0);
        assert_eq!(FlowMatchSample::new(x0.clone(), x1.clone(), 0.0).unwrap().x_t, x0);
        assert_eq!(FlowMatchSample::new(x0.clone(), x1.clone(), 1.0).unwrap().x_t, x1);
        assert!(FlowMatchSample::new(x0, x1, 1.5).is_err());
    }

    #[test]
    fn clean_frames_are_excluded_from_the_loss() {
        let mut pred = Array4::zeros((3, 2, 2, 2));
        pred.index_axis_mut(Axis(0), 0).fill(10.0);
        let pred = LatentTensor::new(pred).unwrap();
        let target = LatentTensor::from_elem((3, 2, 2, 2), 1.0);
        // frames 1 and 2 have error 1 per channel, 2 channels
        assert_eq!(masked_velocity_loss(&pred, &target, &[true, false, false]).unwrap(), 2.0);
        assert!(masked_velocity_loss(&pred, &target, &[true, true, true]).is_err());
    }

    struct Identity;

    impl VelocityModel for Identity {
        fn velocity(&self, x: &LatentTensor, _: f64, _: &ConditioningSignal, _: &BTreeSet<usize>) -> Result<LatentTensor> {
            Ok(x.clone())
        }

        fn layers(&self) -> usize {
            1
        }
    }

    struct Constant(f64);

    impl VelocityModel for Constant {
        fn velocity(&self, x: &LatentTensor, _: f64, _: &ConditioningSignal, _: &BTreeSet<usize>) -> Result<LatentTensor> {
            Ok(LatentTensor::from_elem(x.shape(), self.0))
        }

        fn layers(&self) -> usize {
            1
        }
    }

    /// Euler error against `x(1) / e` for `dx/dt = x` run from 1 to 0.
    fn euler_error(steps: usize) -> f64 {
        let x = sample_from(&Identity, scalar(1.0), &ConditioningSignal::null(), &GuidanceConfig::none(), steps).unwrap();
        (x.data()[[0, 0, 0, 0]] - (-1.0f64).exp()).abs()
    }

    #[test]
    fn euler_error_shrinks_linearly_with_steps() {
        let (e4, e8, e16) = (euler_error(4), euler_error(8), euler_error(16));
        assert!((e4 / e8 / 2.0 - 1.0).abs() < 0.2, "{}", e4 / e8);
        assert!((e8 / e16 / 2.0 - 1.0).abs() < 0.2, "{}", e8 / e16);
        assert!(sample_from(&Identity, scalar(1.0), &ConditioningSignal::null(), &GuidanceConfig::none(), 0).is_err());
    }

    #[test]
    fn hand_integrated_sampler_steps() {
        let none = GuidanceConfig::none();
        let null = ConditioningSignal::null();
        let one = sample_from(&Constant(1.0), scalar(1.0), &null, &none, 1).unwrap();
        assert_eq!(one, scalar(0.0));
        // two steps of dt = 0.5: 1.0 -> 0.5 -> 0.0
        let half = sample_from(&Constant(1.0), scalar(1.0), &null, &none, 2).unwrap();
        assert_eq!(half, scalar(0.0));
        let after_first = scalar(1.0).data() - &(Constant(1.0).velocity(&scalar(1.0), 1.0, &null, &BTreeSet::new()).unwrap().data() * 0.5);
        assert_eq!(after_first[[0, 0, 0, 0]], 0.5);
        for steps in [1, 3, 7] {
            let x = sample(&Constant(0.0), &null, &none, steps, (2, 2, 2, 2), 9).unwrap();
            let noise = standard_normal(&mut ChaCha8Rng::seed_from_u64(9), (2, 2, 2, 2)).unwrap();
            assert_eq!(x, noise);
        }
        let a = sample(&Identity, &null, &none, 5, (2, 2, 2, 2), 4).unwrap();
        let b = sample(&Identity, &null, &none, 5, (2, 2, 2, 2), 4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn image_conditioned_sampling_keeps_the_first_frame() {
        let first = LatentTensor::from_elem((1, 2, 2, 1), 0.7);
        let cond = ConditioningSignal::image(None, first.clone(), 3);
        let x = sample(&Identity, &cond, &GuidanceConfig::none(), 5, (3, 2, 2, 1), 3).unwrap();
        assert_eq!(x.first_frame(), first);
    }

    fn tiny_denoiser() -> Denoiser {
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
            1,
        )
        .unwrap()
    }

    fn examples() -> Vec<TrainingExample> {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        ClassTriple::all()
            .into_iter()
            .take(4)
            .map(|class| TrainingExample {
                latent: standard_normal(&mut rng, (2, 4, 4, 2)).unwrap(),
                class,
            })
            .collect()
    }

    #[test]
    fn lora_training_freezes_the_base() {
        let d = tiny_denoiser();
        let cfg = TrainConfig {
            steps: Some(5),
            ..TrainConfig::default()
        };
        let out = train(&examples(), &d, &cfg).unwrap();
        assert_eq!(out.denoiser.params.content_hash(), d.params.content_hash());
        assert_eq!(out.losses.len(), 5);
        let a = out.adapter.unwrap();
        assert!(a.targets.iter().any(|t| a.weight_delta(t).unwrap().iter().any(|v| *v != 0.0)));
    }

    #[test]
    fn full_training_updates_the_base_and_is_deterministic() {
        let d = tiny_denoiser();
        let cfg = TrainConfig {
            mode: TrainMode::FullFinetune,
            steps: Some(4),
            batch_size: 2,
            ..TrainConfig::default()
        };
        let a = train(&examples(), &d, &cfg).unwrap();
        let b = train(&examples(), &d, &cfg).unwrap();
        assert!(a.adapter.is_none());
        assert_ne!(a.denoiser.params.content_hash(), d.params.content_hash());
        assert_eq!(a.denoiser.params.content_hash(), b.denoiser.params.content_hash());
        assert_eq!(a.losses, b.losses);
    }

    #[test]
    fn step_budget() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.total_steps(8), 24);
        let i2v = TrainConfig {
            image_conditioning: true,
            ..TrainConfig::default()
        };
        assert_eq!(i2v.total_steps(8), 240);
        let full = TrainConfig {
            mode: TrainMode::FullFinetune,
            batch_size: 3,
            ..TrainConfig::default()
        };
        assert_eq!(full.total_steps(8), 9);
        assert!(matches!(train(&[], &tiny_denoiser(), &cfg), Err(Error::EmptyManifest)));
    }

    #[test]
    fn loss_is_reproducible_and_dropout_selects_null() {
        let d = tiny_denoiser();
        let ex = examples();
        let batch: Vec<&TrainingExample> = ex.iter().collect();
        let l1 = flow_matching_loss(&d, None, &batch, &mut ChaCha8Rng::seed_from_u64(5), 0.1, false).unwrap();
        let l2 = flow_matching_loss(&d, None, &batch, &mut ChaCha8Rng::seed_from_u64(5), 0.1, false).unwrap();
        assert_eq!(l1, l2);
        let draws = draw_batch(&mut ChaCha8Rng::seed_from_u64(0), &batch, 1.0, false).unwrap();
        assert!(draws.iter().all(|d| d.cond.classes.is_none()));
        let draws = draw_batch(&mut ChaCha8Rng::seed_from_u64(0), &batch, 0.0, true).unwrap();
        assert!(draws.iter().all(|d| d.cond.classes.is_some() && d.cond.is_image_conditioned()));
    }

    #[test]
    fn caption_drives_the_condition() {
        let codec = Codec::new(Default::default(), 0).unwrap();
        let d = Denoiser::new(DenoiserConfig::default(), 0).unwrap();
        let g = Generator {
            denoiser: &d,
            adapter: None,
            codec: &codec,
        };
        let req = GenerationRequest {
            caption: Some("An ideal clip of a needle driving action during a railroad task.".into()),
            guidance: GuidanceConfig::default(),
            steps: 2,
            bucket: Bucket::new(64, 64, 17),
            seed: 0,
        };
        let cond = g.conditioning(&req, None).unwrap();
        assert_eq!(
            cond.classes,
            Some(ClassTriple::new(Quality::Ideal, Action::Driving, Task::Railroad).into())
        );
        let bad = GenerationRequest {
            caption: Some("a needle".into()),
            ..req.clone()
        };
        assert!(matches!(g.conditioning(&bad, None), Err(Error::MalformedCaption(_))));
        let video = g.generate(&req, None).unwrap();
        assert_eq!(video.shape(), (17, 64, 64, 3));
        assert_eq!(video, g.generate(&req, None).unwrap());
    }
}
