//! Compressive video autoencoder.
//!
//! Latent frame 0 encodes pixel frame 0 alone; every later latent frame
//! encodes a group of `temporal` consecutive pixel frames. Both paths are
//! patch-local MLPs over `spatial × spatial` tiles, so
//!
//! ```text
//! (T, H, W, 3)  ->  (1 + (T - 1) / f_t, H / f_s, W / f_s, C_lat)
//! ```
//!
//! Latents are standardized per channel with statistics measured on the
//! training clips after training.

use std::path::Path;

use ndarray::{s, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mat, Var};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::params::{linear_weight, AdamW, AdamWConfig, ParamStore};
pub use crate::video::{LatentTensor, VideoTensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecConfig {
    /// Spatial compression factor `f_s`.
    pub spatial: usize,
    /// Temporal compression factor `f_t`.
    pub temporal: usize,
    pub latent_channels: usize,
    pub hidden: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            spatial: 8,
            temporal: 4,
            latent_channels: 8,
            hidden: 256,
        }
    }
}

impl CodecConfig {
    /// Compression of the full-scale reference model.
    pub fn reference() -> Self {
        CodecConfig {
            spatial: 32,
            temporal: 8,
            latent_channels: 128,
            hidden: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("codec.spatial", self.spatial),
            ("codec.temporal", self.temporal),
            ("codec.latent_channels", self.latent_channels),
            ("codec.hidden", self.hidden),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be >= 1"));
            }
        }
        Ok(())
    }

    /// Latent shape for a pixel clip of `(T, H, W)`.
    pub fn latent_shape(&self, frames: usize, height: usize, width: usize) -> Result<(usize, usize, usize, usize)> {
        if height % self.spatial != 0 || width % self.spatial != 0 {
            return Err(Error::shape(format!(
                "height {height} and width {width} must be divisible by spatial factor {}",
                self.spatial
            )));
        }
        if frames == 0 || (frames - 1) % self.temporal != 0 {
            return Err(Error::shape(format!(
                "frame count {frames} must satisfy (T - 1) divisible by temporal factor {}",
                self.temporal
            )));
        }
        Ok((
            1 + (frames - 1) / self.temporal,
            height / self.spatial,
            width / self.spatial,
            self.latent_channels,
        ))
    }

    /// Pixel shape `(T, H, W, 3)` decoded from a latent of shape `(T', H', W', C)`.
    pub fn pixel_shape(&self, latent: (usize, usize, usize, usize)) -> Result<(usize, usize, usize, usize)> {
        let (t, h, w, c) = latent;
        if c != self.latent_channels || t == 0 || h == 0 || w == 0 {
            return Err(Error::shape(format!(
                "latent {latent:?} incompatible with {} latent channels",
                self.latent_channels
            )));
        }
        Ok((1 + (t - 1) * self.temporal, h * self.spatial, w * self.spatial, 3))
    }

    fn frame_patch_dim(&self) -> usize {
        self.spatial * self.spatial * 3
    }

    fn group_patch_dim(&self) -> usize {
        self.temporal * self.frame_patch_dim()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecTrainConfig {
    pub steps: usize,
    /// Patches per step; a quarter come from first frames.
    pub batch_patches: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        CodecTrainConfig {
            steps: 1000,
            batch_patches: 256,
            learning_rate: 2e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Codec {
    pub config: CodecConfig,
    pub params: ParamStore,
}

#[derive(Serialize, Deserialize)]
struct CodecMeta {
    config: CodecConfig,
}

const CHECKPOINT_KIND: &str = "codec";

#[derive(Clone, Copy)]
enum CodePath {
    First,
    Group,
}

impl CodePath {
    fn prefix(self) -> &'static str {
        match self {
            CodePath::First => "first",
            CodePath::Group => "group",
        }
    }
}

fn mlp(g: &mut Graph, params: &ParamStore, prefix: &str, x: Var, squash: bool) -> Var {
    let w1 = g.param(&format!("{prefix}.fc1.weight"), params.expect(&format!("{prefix}.fc1.weight")));
    let b1 = g.param(&format!("{prefix}.fc1.bias"), params.expect(&format!("{prefix}.fc1.bias")));
    let w2 = g.param(&format!("{prefix}.fc2.weight"), params.expect(&format!("{prefix}.fc2.weight")));
    let b2 = g.param(&format!("{prefix}.fc2.bias"), params.expect(&format!("{prefix}.fc2.bias")));
    let h = g.matmul_t(x, w1);
    let h = g.add_row(h, b1);
    let h = g.gelu(h);
    let y = g.matmul_t(h, w2);
    let y = g.add_row(y, b2);
    if squash {
        g.tanh(y)
    } else {
        y
    }
}

impl Codec {
    /// Freshly initialized codec with identity latent normalization.
    pub fn new(config: CodecConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let c = config.latent_channels;
        let hdim = config.hidden;
        for (path, dim) in [
            (CodePath::First, config.frame_patch_dim()),
            (CodePath::Group, config.group_patch_dim()),
        ] {
            let p = path.prefix();
            params.insert(format!("enc.{p}.fc1.weight"), linear_weight(&mut rng, hdim, dim));
            params.insert(format!("enc.{p}.fc1.bias"), Mat::zeros((1, hdim)));
            params.insert(format!("enc.{p}.fc2.weight"), linear_weight(&mut rng, c, hdim));
            params.insert(format!("enc.{p}.fc2.bias"), Mat::zeros((1, c)));
            params.insert(format!("dec.{p}.fc1.weight"), linear_weight(&mut rng, hdim, c));
            params.insert(format!("dec.{p}.fc1.bias"), Mat::zeros((1, hdim)));
            params.insert(format!("dec.{p}.fc2.weight"), linear_weight(&mut rng, dim, hdim));
            params.insert(format!("dec.{p}.fc2.bias"), Mat::zeros((1, dim)));
            params.insert(format!("norm.{p}.shift"), Mat::zeros((1, c)));
            params.insert(format!("norm.{p}.scale"), Mat::ones((1, c)));
        }
        Ok(Codec { config, params })
    }

    fn raw_encode(&self, g: &mut Graph, path: CodePath, patches: Mat) -> Var {
        let x = g.input(patches);
        mlp(g, &self.params, &format!("enc.{}", path.prefix()), x, false)
    }

    fn raw_decode(&self, g: &mut Graph, path: CodePath, codes: Var) -> Var {
        mlp(g, &self.params, &format!("dec.{}", path.prefix()), codes, true)
    }

    fn normalize(&self, path: CodePath, codes: &mut Mat, forward: bool) {
        let p = path.prefix();
        let shift = self.params.expect(&format!("norm.{p}.shift"));
        let scale = self.params.expect(&format!("norm.{p}.scale"));
        for mut row in codes.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = if forward {
                    (*v - shift[[0, j]]) / scale[[0, j]]
                } else {
                    *v * scale[[0, j]] + shift[[0, j]]
                };
            }
        }
    }

    /// Encodes a pixel clip. Fails with a shape error naming the violated
    /// divisibility law.
    pub fn encode(&self, clip: &VideoTensor) -> Result<LatentTensor> {
        let (t, h, w, _) = clip.shape();
        let (lt, lh, lw, c) = self.config.latent_shape(t, h, w)?;
        let mut out = Array4::zeros((lt, lh, lw, c));
        for frame in 0..lt {
            let (path, patches) = if frame == 0 {
                (CodePath::First, extract_patches(clip.data(), 0, 1, self.config.spatial))
            } else {
                let start = 1 + (frame - 1) * self.config.temporal;
                (
                    CodePath::Group,
                    extract_patches(clip.data(), start, self.config.temporal, self.config.spatial),
                )
            };
            let mut g = Graph::inference();
            let codes = self.raw_encode(&mut g, path, patches);
            let mut codes = g.value(codes).clone();
            self.normalize(path, &mut codes, true);
            for (r, row) in codes.rows().into_iter().enumerate() {
                out.slice_mut(s![frame, r / lw, r % lw, ..]).assign(&row);
            }
        }
        LatentTensor::new(out)
    }

    pub fn decode(&self, latent: &LatentTensor) -> Result<VideoTensor> {
        let (lt, lh, lw, c) = latent.shape();
        let (t, h, w, _) = self.config.pixel_shape(latent.shape())?;
        let mut out = Array4::zeros((t, h, w, 3));
        for frame in 0..lt {
            let mut codes = Mat::zeros((lh * lw, c));
            for r in 0..lh * lw {
                codes.row_mut(r).assign(&latent.data().slice(s![frame, r / lw, r % lw, ..]));
            }
            let path = if frame == 0 { CodePath::First } else { CodePath::Group };
            self.normalize(path, &mut codes, false);
            let mut g = Graph::inference();
            let z = g.input(codes);
            let pix = self.raw_decode(&mut g, path, z);
            let (start, len) = if frame == 0 {
                (0, 1)
            } else {
                (1 + (frame - 1) * self.config.temporal, self.config.temporal)
            };
            scatter_patches(&mut out, g.value(pix), start, len, self.config.spatial);
        }
        VideoTensor::new(out)
    }

    /// Mean squared pixel error of `decode(encode(clip))` against `clip`.
    pub fn reconstruction_mse(&self, clip: &VideoTensor) -> Result<f64> {
        let recon = self.decode(&self.encode(clip)?)?;
        Ok((recon.data() - clip.data()).mapv(|v| v * v).mean().unwrap_or(0.0))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, CHECKPOINT_KIND, &CodecMeta { config: self.config }, &self.params)
    }

    /// Loads a checkpoint, trusting its embedded config.
    pub fn load(path: &Path) -> Result<Self> {
        let (meta, params): (CodecMeta, ParamStore) = checkpoint::load(path, CHECKPOINT_KIND)?;
        let reference = Codec::new(meta.config, 0)?;
        checkpoint::check_shapes(&reference.params, &params)?;
        Ok(Codec {
            config: meta.config,
            params,
        })
    }

    /// Loads a checkpoint and requires it to match `expected`.
    pub fn load_expecting(path: &Path, expected: &CodecConfig) -> Result<Self> {
        let codec = Self::load(path)?;
        let found = codec.config;
        for (field, a, b) in [
            ("spatial", found.spatial, expected.spatial),
            ("temporal", found.temporal, expected.temporal),
            ("latent_channels", found.latent_channels, expected.latent_channels),
            ("hidden", found.hidden, expected.hidden),
        ] {
            if a != b {
                return Err(Error::corrupt(format!(
                    "codec field `{field}` is {a} in checkpoint but {b} in config"
                )));
            }
        }
        Ok(codec)
    }
}

// Rows are tiles in raster order; columns are (frame, dy, dx, channel).
fn extract_patches(data: &Array4<f64>, start: usize, len: usize, tile: usize) -> Mat {
    let (_, h, w, c) = data.dim();
    let (ph, pw) = (h / tile, w / tile);
    let mut out = Mat::zeros((ph * pw, len * tile * tile * c));
    for i in 0..ph {
        for j in 0..pw {
            let mut row = out.row_mut(i * pw + j);
            let mut k = 0;
            for f in start..start + len {
                for dy in 0..tile {
                    for dx in 0..tile {
                        for ch in 0..c {
                            row[k] = data[[f, i * tile + dy, j * tile + dx, ch]];
                            k += 1;
                        }
                    }
                }
            }
        }
    }
    out
}

fn scatter_patches(data: &mut Array4<f64>, patches: &Mat, start: usize, len: usize, tile: usize) {
    let (_, h, w, c) = data.dim();
    let pw = w / tile;
    for (r, row) in patches.rows().into_iter().enumerate() {
        let (i, j) = (r / pw, r % pw);
        debug_assert!(i * tile < h);
        let mut k = 0;
        for f in start..start + len {
            for dy in 0..tile {
                for dx in 0..tile {
                    for ch in 0..c {
                        data[[f, i * tile + dy, j * tile + dx, ch]] = row[k];
                        k += 1;
                    }
                }
            }
        }
    }
}

fn single_patch(data: &Array4<f64>, start: usize, len: usize, tile: usize, i: usize, j: usize) -> Vec<f64> {
    let c = data.dim().3;
    let mut v = Vec::with_capacity(len * tile * tile * c);
    for f in start..start + len {
        for dy in 0..tile {
            for dx in 0..tile {
                for ch in 0..c {
                    v.push(data[[f, i * tile + dy, j * tile + dx, ch]]);
                }
            }
        }
    }
    v
}

fn stack(rows: &[Vec<f64>], cols: usize) -> Mat {
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Mat::from_shape_vec((rows.len(), cols), flat).expect("uniform patch size")
}

/// Trains a codec on `clips` by sampling random tiles each step. Returns the
/// codec (with latent normalization fitted to `clips`) and the per-step
/// mean squared pixel error of the sampled batch.
pub fn train_codec(
    clips: &[VideoTensor],
    config: CodecConfig,
    train: &CodecTrainConfig,
) -> Result<(Codec, Vec<f64>)> {
    if train.steps == 0 {
        return Err(Error::precondition("codec training needs steps >= 1"));
    }
    if clips.is_empty() {
        return Err(Error::EmptyManifest);
    }
    if train.batch_patches < 4 {
        return Err(Error::config("codec_train.batch_patches", "must be >= 4"));
    }
    for clip in clips {
        let (t, h, w, _) = clip.shape();
        config.latent_shape(t, h, w)?;
    }
    let mut codec = Codec::new(config, train.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed ^ 0x00c0_dec0);
    let mut opt = AdamW::new(AdamWConfig {
        learning_rate: train.learning_rate,
        warmup_steps: 20,
        ..Default::default()
    });
    let n_first = train.batch_patches / 4;
    let n_group = train.batch_patches - n_first;
    let tile = config.spatial;
    let mut curve = Vec::with_capacity(train.steps);

    for _ in 0..train.steps {
        let mut first = Vec::with_capacity(n_first);
        let mut group = Vec::with_capacity(n_group);
        for k in 0..train.batch_patches {
            let clip = &clips[rng.random_range(0..clips.len())];
            let (t, h, w, _) = clip.shape();
            let (i, j) = (rng.random_range(0..h / tile), rng.random_range(0..w / tile));
            if k < n_first || t == 1 {
                first.push(single_patch(clip.data(), 0, 1, tile, i, j));
            } else {
                let groups = (t - 1) / config.temporal;
                let gi = rng.random_range(0..groups);
                group.push(single_patch(clip.data(), 1 + gi * config.temporal, config.temporal, tile, i, j));
            }
        }

        let mut g = Graph::new();
        let mut terms = Vec::new();
        let mut elements = 0usize;
        for (path, rows, dim) in [
            (CodePath::First, &first, config.frame_patch_dim()),
            (CodePath::Group, &group, config.group_patch_dim()),
        ] {
            if rows.is_empty() {
                continue;
            }
            let target = stack(rows, dim);
            let z = codec.raw_encode(&mut g, path, target.clone());
            let recon = codec.raw_decode(&mut g, path, z);
            elements += target.len();
            let n = target.nrows();
            terms.push(g.weighted_squared_error(recon, target, vec![1.0; n]));
        }
        let mut total = terms[0];
        for t in &terms[1..] {
            total = g.add(total, *t);
        }
        let loss = g.scale(total, 1.0 / elements as f64);
        curve.push(g.value(loss)[[0, 0]]);
        let grads = g.backward(loss);
        opt.step(&mut codec.params, &grads);
    }

    fit_normalization(&mut codec, clips)?;
    Ok((codec, curve))
}

// Per-channel mean/std of raw codes over every tile of every clip.
fn fit_normalization(codec: &mut Codec, clips: &[VideoTensor]) -> Result<()> {
    let config = codec.config;
    for path in [CodePath::First, CodePath::Group] {
        let mut all: Vec<Mat> = Vec::new();
        for clip in clips {
            let t = clip.frames();
            let ranges: Vec<(usize, usize)> = match path {
                CodePath::First => vec![(0, 1)],
                CodePath::Group => (0..(t - 1) / config.temporal)
                    .map(|gi| (1 + gi * config.temporal, config.temporal))
                    .collect(),
            };
            for (start, len) in ranges {
                let patches = extract_patches(clip.data(), start, len, config.spatial);
                let mut g = Graph::inference();
                let z = codec.raw_encode(&mut g, path, patches);
                all.push(g.value(z).clone());
            }
        }
        if all.is_empty() {
            continue;
        }
        let views: Vec<_> = all.iter().map(|m| m.view()).collect();
        let codes = ndarray::concatenate(Axis(0), &views).expect("same code width");
        let mean = codes.mean_axis(Axis(0)).expect("non-empty");
        let std = codes.std_axis(Axis(0), 0.0).mapv(|s| s.max(1e-3));
        let p = path.prefix();
        codec.params.insert(format!("norm.{p}.shift"), mean.insert_axis(Axis(0)));
        codec.params.insert(format!("norm.{p}.scale"), std.insert_axis(Axis(0)));
    }
    Ok(())
}
