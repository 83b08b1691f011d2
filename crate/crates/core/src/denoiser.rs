//! Spatiotemporal transformer predicting flow-matching velocity.
//!
//! Latents are cut into `patch × patch` spatial tokens per latent frame,
//! projected to `width`, and tagged with factorized 3-D sinusoidal positions
//! over `(t', h', w')`. A single conditioning token (sum of the quality,
//! action and task embeddings, or the reserved null embedding) is prepended
//! to the sequence.
//! Blocks are pre-norm attention + MLP with optional QK normalization; the
//! timestep embedding plus the conditioning vector drives per-block
//! shift/scale/gate modulation of the norms and residual branches.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::{s, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::LoraAdapter;
use crate::autograd::{Graph, Mat, Trainable, Var};
use crate::checkpoint;
use crate::dataset::ClassTriple;
use crate::error::{Error, Result};
use crate::params::{linear_weight, normal, ParamStore};
use crate::video::LatentTensor;

const LN_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Spatial token size in latent cells.
    pub patch: usize,
    pub latent_channels: usize,
    pub qk_normalization: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            layers: 4,
            width: 64,
            heads: 4,
            mlp_ratio: 4,
            patch: 2,
            latent_channels: 8,
            qk_normalization: true,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("denoiser.layers", self.layers),
            ("denoiser.width", self.width),
            ("denoiser.heads", self.heads),
            ("denoiser.mlp_ratio", self.mlp_ratio),
            ("denoiser.patch", self.patch),
            ("denoiser.latent_channels", self.latent_channels),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be >= 1"));
            }
        }
        if self.width % self.heads != 0 {
            return Err(Error::config(
                "denoiser.width",
                format!("{} is not divisible by {} heads", self.width, self.heads),
            ));
        }
        Ok(())
    }

    pub fn token_dim(&self) -> usize {
        self.patch * self.patch * self.latent_channels
    }
}

/// Raw class indices; `None` in [`ConditioningSignal::classes`] is the
/// reserved null condition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClassIds {
    pub quality: usize,
    pub action: usize,
    pub task: usize,
}

impl From<ClassTriple> for ClassIds {
    fn from(c: ClassTriple) -> Self {
        ClassIds {
            quality: c.quality.index(),
            action: c.action.index(),
            task: c.task.index(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningSignal {
    pub classes: Option<ClassIds>,
    /// `(1, H', W', C)` clean latent for image-to-video.
    pub first_frame_latent: Option<LatentTensor>,
    /// Per latent frame, `true` marks a clean conditioning frame.
    pub conditioning_mask: Option<Vec<bool>>,
}

impl ConditioningSignal {
    pub fn null() -> Self {
        ConditioningSignal {
            classes: None,
            first_frame_latent: None,
            conditioning_mask: None,
        }
    }

    pub fn text(class: ClassTriple) -> Self {
        ConditioningSignal {
            classes: Some(class.into()),
            ..Self::null()
        }
    }

    /// Caption plus first-frame conditioning over `latent_frames` frames.
    pub fn image(class: Option<ClassTriple>, first_frame: LatentTensor, latent_frames: usize) -> Self {
        let mut mask = vec![false; latent_frames];
        if let Some(m) = mask.first_mut() {
            *m = true;
        }
        ConditioningSignal {
            classes: class.map(Into::into),
            first_frame_latent: Some(first_frame),
            conditioning_mask: Some(mask),
        }
    }

    pub fn is_image_conditioned(&self) -> bool {
        self.first_frame_latent.is_some()
    }

    /// Same visual conditioning, classes replaced by the null condition.
    pub fn unconditional(&self) -> Self {
        ConditioningSignal {
            classes: None,
            ..self.clone()
        }
    }

    fn clean_frames(&self, latent_frames: usize) -> Vec<bool> {
        match &self.conditioning_mask {
            Some(m) => (0..latent_frames).map(|i| m.get(i).copied().unwrap_or(false)).collect(),
            None => vec![false; latent_frames],
        }
    }
}

/// Pins latent frame 0 to the conditioning latent; other frames are copied
/// unchanged.
pub fn apply_first_frame_conditioning(x_t: &LatentTensor, cond: &ConditioningSignal) -> Result<LatentTensor> {
    let first = cond
        .first_frame_latent
        .as_ref()
        .ok_or_else(|| Error::precondition("first-frame conditioning needs first_frame_latent"))?;
    let (_, h, w, c) = x_t.shape();
    if first.shape() != (1, h, w, c) {
        return Err(Error::shape(format!(
            "first-frame latent {:?} does not fit latent {:?}",
            first.shape(),
            x_t.shape()
        )));
    }
    let mut out = x_t.clone();
    out.data_mut()
        .slice_mut(s![0..1, .., .., ..])
        .assign(first.data());
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub params: ParamStore,
}

#[derive(Serialize, Deserialize)]
struct DenoiserMeta {
    config: DenoiserConfig,
}

const CHECKPOINT_KIND: &str = "denoiser";

pub(crate) fn block_linear_names(layer: usize) -> [String; 6] {
    [
        format!("blocks.{layer}.attn.q"),
        format!("blocks.{layer}.attn.k"),
        format!("blocks.{layer}.attn.v"),
        format!("blocks.{layer}.attn.out"),
        format!("blocks.{layer}.mlp.fc1"),
        format!("blocks.{layer}.mlp.fc2"),
    ]
}

/// Per-block shift/scale/gate projections of the conditioning vector.
pub(crate) fn block_modulation_names(layer: usize) -> Vec<String> {
    BLOCK_MODULATION.iter().map(|p| format!("blocks.{layer}.mod.{p}")).collect()
}

/// Final-norm modulation and the token output projection.
pub(crate) fn head_linear_names() -> Vec<String> {
    let mut names: Vec<String> = FINAL_MODULATION.iter().map(|p| format!("final.mod.{p}")).collect();
    names.push("final.out".into());
    names
}

fn insert_linear(params: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, out_dim: usize, in_dim: usize) {
    params.insert(format!("{name}.weight"), linear_weight(rng, out_dim, in_dim));
    params.insert(format!("{name}.bias"), Mat::zeros((1, out_dim)));
}

/// Modulation projections start near zero so each block starts close to the
/// plain norm with small residual gates.
fn insert_modulation(params: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, parts: &[&str], dim: usize) {
    for part in parts {
        let name = format!("{prefix}.{part}");
        insert_linear(params, rng, &name, dim, dim);
        params
            .get_mut(&format!("{name}.weight"))
            .expect("just inserted")
            .mapv_inplace(|w| w * 0.1);
    }
}

const BLOCK_MODULATION: [&str; 6] = ["shift1", "scale1", "gate1", "shift2", "scale2", "gate2"];
const FINAL_MODULATION: [&str; 2] = ["shift", "scale"];

/// Sinusoidal features of a scalar over `dim` columns (`dim` even).
fn sinusoid(value: f64, dim: usize, base: f64, out: &mut [f64]) {
    let half = dim / 2;
    for k in 0..half {
        let freq = base.powf(-(k as f64) / half.max(1) as f64);
        out[2 * k] = (value * freq).sin();
        out[2 * k + 1] = (value * freq).cos();
    }
}

/// Factorized 3-D sinusoidal positions for a `(t', h', w')` token grid.
pub fn positional_embedding(frames: usize, rows: usize, cols: usize, width: usize) -> Mat {
    let axis = 2 * (width / 6);
    let mut m = Mat::zeros((frames * rows * cols, width));
    for t in 0..frames {
        for i in 0..rows {
            for j in 0..cols {
                let r = (t * rows + i) * cols + j;
                let mut row = m.row_mut(r);
                let buf = row.as_slice_mut().expect("row-major");
                sinusoid(t as f64, axis, 100.0, &mut buf[..axis]);
                sinusoid(i as f64, axis, 100.0, &mut buf[axis..2 * axis]);
                sinusoid(j as f64, axis, 100.0, &mut buf[2 * axis..3 * axis]);
            }
        }
    }
    m
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.width;
        let mut p = ParamStore::new();
        insert_linear(&mut p, &mut rng, "embed.in", d, config.token_dim());
        insert_linear(&mut p, &mut rng, "time.fc1", d, d);
        insert_linear(&mut p, &mut rng, "time.fc2", d, d);
        p.insert("cond.quality", normal(&mut rng, 2, d, 1.0));
        p.insert("cond.action", normal(&mut rng, 4, d, 1.0));
        p.insert("cond.task", normal(&mut rng, 2, d, 1.0));
        p.insert("cond.null", normal(&mut rng, 1, d, 1.0));
        p.insert("cond.clean", normal(&mut rng, 1, d, 1.0));
        let hidden = d * config.mlp_ratio;
        for layer in 0..config.layers {
            let [q, k, v, out, fc1, fc2] = block_linear_names(layer);
            insert_modulation(&mut p, &mut rng, &format!("blocks.{layer}.mod"), &BLOCK_MODULATION, d);
            insert_linear(&mut p, &mut rng, &q, d, d);
            insert_linear(&mut p, &mut rng, &k, d, d);
            insert_linear(&mut p, &mut rng, &v, d, d);
            insert_linear(&mut p, &mut rng, &out, d, d);
            insert_linear(&mut p, &mut rng, &fc1, hidden, d);
            insert_linear(&mut p, &mut rng, &fc2, d, hidden);
        }
        insert_modulation(&mut p, &mut rng, "final.mod", &FINAL_MODULATION, d);
        insert_linear(&mut p, &mut rng, "final.out", config.token_dim(), d);
        p.get_mut("final.out.weight").expect("just inserted").mapv_inplace(|w| w * 0.1);
        Ok(Denoiser { config, params: p })
    }

    pub fn layers(&self) -> usize {
        self.config.layers
    }

    /// A model with the blocks in `skip` removed and the rest renumbered.
    pub fn without_layers(&self, skip: &BTreeSet<usize>) -> Result<Denoiser> {
        self.check_skip(skip)?;
        let kept: Vec<usize> = (0..self.config.layers).filter(|l| !skip.contains(l)).collect();
        let mut params = ParamStore::new();
        for (name, m) in self.params.iter() {
            if let Some(rest) = name.strip_prefix("blocks.") {
                let (idx, tail) = rest.split_once('.').expect("blocks.<i>.<name>");
                let idx: usize = idx.parse().expect("numeric block index");
                if let Some(new_idx) = kept.iter().position(|&k| k == idx) {
                    params.insert(format!("blocks.{new_idx}.{tail}"), m.clone());
                }
            } else {
                params.insert(name.clone(), m.clone());
            }
        }
        Ok(Denoiser {
            config: DenoiserConfig {
                layers: kept.len(),
                ..self.config
            },
            params,
        })
    }

    fn check_skip(&self, skip: &BTreeSet<usize>) -> Result<()> {
        match skip.iter().find(|&&l| l >= self.config.layers) {
            Some(&index) => Err(Error::InvalidLayerIndex {
                index,
                layers: self.config.layers,
            }),
            None => Ok(()),
        }
    }

    /// Token grid `(t', h'/p, w'/p)` for a latent shape.
    pub fn token_grid(&self, shape: (usize, usize, usize, usize)) -> Result<(usize, usize, usize)> {
        let (t, h, w, c) = shape;
        let p = self.config.patch;
        if c != self.config.latent_channels {
            return Err(Error::shape(format!(
                "latent has {c} channels, denoiser expects {}",
                self.config.latent_channels
            )));
        }
        if h % p != 0 || w % p != 0 {
            return Err(Error::shape(format!(
                "latent grid {h}x{w} not divisible by patch {p}"
            )));
        }
        Ok((t, h / p, w / p))
    }

    pub fn patchify(&self, x: &LatentTensor) -> Result<Mat> {
        let (t, rows, cols) = self.token_grid(x.shape())?;
        let p = self.config.patch;
        let c = self.config.latent_channels;
        let data = x.data();
        let mut out = Mat::zeros((t * rows * cols, self.config.token_dim()));
        for f in 0..t {
            for i in 0..rows {
                for j in 0..cols {
                    let mut row = out.row_mut((f * rows + i) * cols + j);
                    let mut k = 0;
                    for dy in 0..p {
                        for dx in 0..p {
                            for ch in 0..c {
                                row[k] = data[[f, i * p + dy, j * p + dx, ch]];
                                k += 1;
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn unpatchify(&self, tokens: &Mat, shape: (usize, usize, usize, usize)) -> Result<LatentTensor> {
        let (t, rows, cols) = self.token_grid(shape)?;
        let p = self.config.patch;
        let c = self.config.latent_channels;
        if tokens.dim() != (t * rows * cols, self.config.token_dim()) {
            return Err(Error::shape(format!("token matrix {:?} does not fit {shape:?}", tokens.dim())));
        }
        let mut data = Array4::zeros(shape);
        for f in 0..t {
            for i in 0..rows {
                for j in 0..cols {
                    let row = tokens.row((f * rows + i) * cols + j);
                    let mut k = 0;
                    for dy in 0..p {
                        for dx in 0..p {
                            for ch in 0..c {
                                data[[f, i * p + dy, j * p + dx, ch]] = row[k];
                                k += 1;
                            }
                        }
                    }
                }
            }
        }
        LatentTensor::new(data)
    }

    fn check_class_ids(ids: &ClassIds) -> Result<()> {
        if ids.quality >= 2 || ids.action >= 4 || ids.task >= 2 {
            return Err(Error::UnknownClassId(format!(
                "({}, {}, {})",
                ids.quality, ids.action, ids.task
            )));
        }
        Ok(())
    }

    fn condition_token(&self, g: &mut Graph, cond: &ConditioningSignal) -> Result<Var> {
        match &cond.classes {
            None => {
                let table = g.param("cond.null", self.params.expect("cond.null"));
                Ok(g.gather(table, &[0]))
            }
            Some(ids) => {
                Self::check_class_ids(ids)?;
                let q = g.param("cond.quality", self.params.expect("cond.quality"));
                let a = g.param("cond.action", self.params.expect("cond.action"));
                let t = g.param("cond.task", self.params.expect("cond.task"));
                let q = g.gather(q, &[ids.quality]);
                let a = g.gather(a, &[ids.action]);
                let t = g.gather(t, &[ids.task]);
                let qa = g.add(q, a);
                Ok(g.add(qa, t))
            }
        }
    }

    /// The conditioning vector `(1, width)` for a signal.
    pub fn embed_condition(&self, cond: &ConditioningSignal) -> Result<Mat> {
        let mut g = Graph::inference();
        let v = self.condition_token(&mut g, cond)?;
        Ok(g.value(v).clone())
    }

    fn linear(&self, g: &mut Graph, adapter: Option<&LoraAdapter>, name: &str, x: Var) -> Var {
        let w_name = format!("{name}.weight");
        let b_name = format!("{name}.bias");
        let w = g.param(&w_name, self.params.expect(&w_name));
        let b = g.param(&b_name, self.params.expect(&b_name));
        let y = g.matmul_t(x, w);
        let y = g.add_row(y, b);
        match adapter.and_then(|a| a.factors(name).map(|f| (a.scale(), f))) {
            Some((scale, (a_name, a, b_name, b))) => {
                let a = g.param(&a_name, a);
                let b = g.param(&b_name, b);
                let low = g.matmul_t(x, a);
                let delta = g.matmul_t(low, b);
                let delta = g.scale(delta, scale);
                g.add(y, delta)
            }
            None => y,
        }
    }

    /// `LN(x) · (1 + scale) + shift` with shift and scale projected from the
    /// global conditioning row.
    fn modulated_norm(&self, g: &mut Graph, adapter: Option<&LoraAdapter>, prefix: &str, suffix: &str, x: Var, c: Var) -> Var {
        let n = g.layer_norm(x, LN_EPS);
        let shift = self.linear(g, adapter, &format!("{prefix}.shift{suffix}"), c);
        let scale = self.linear(g, adapter, &format!("{prefix}.scale{suffix}"), c);
        let scaled = g.mul_row(n, scale);
        let n = g.add(n, scaled);
        g.add_row(n, shift)
    }

    fn time_embedding(&self, g: &mut Graph, adapter: Option<&LoraAdapter>, t: f64) -> Var {
        let d = self.config.width;
        let mut feats = Mat::zeros((1, d));
        let even = d - d % 2;
        sinusoid(t * 1000.0, even, 10_000.0, &mut feats.as_slice_mut().expect("row-major")[..even]);
        let x = g.input(feats);
        let h = self.linear(g, adapter, "time.fc1", x);
        let h = g.gelu(h);
        self.linear(g, adapter, "time.fc2", h)
    }

    /// Records the forward pass on `g` and returns the `(tokens, token_dim)`
    /// velocity prediction for the latent tokens (conditioning token removed).
    pub fn forward(
        &self,
        g: &mut Graph,
        adapter: Option<&LoraAdapter>,
        x_t: &LatentTensor,
        t: f64,
        cond: &ConditioningSignal,
        skip_layers: &BTreeSet<usize>,
    ) -> Result<Var> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::precondition(format!("timestep {t} outside [0, 1]")));
        }
        self.check_skip(skip_layers)?;
        let (frames, rows, cols) = self.token_grid(x_t.shape())?;
        let n_tokens = frames * rows * cols;

        let tokens = g.input(self.patchify(x_t)?);
        let mut h = self.linear(g, adapter, "embed.in", tokens);
        let pos = g.input(positional_embedding(frames, rows, cols, self.config.width));
        h = g.add(h, pos);

        let clean = cond.clean_frames(frames);
        if clean.iter().any(|&c| c) {
            let per_frame = rows * cols;
            let mask = Mat::from_shape_fn((n_tokens, 1), |(r, _)| {
                if clean[r / per_frame] {
                    1.0
                } else {
                    0.0
                }
            });
            let mask = g.input(mask);
            let marker = g.param("cond.clean", self.params.expect("cond.clean"));
            let marked = g.matmul(mask, marker);
            h = g.add(h, marked);
        }

        let cond_token = self.condition_token(g, cond)?;
        let mut seq = g.concat_rows(&[cond_token, h]);
        let temb = self.time_embedding(g, adapter, t);
        let global = g.add(temb, cond_token);
        let c = g.gelu(global);

        let heads = self.config.heads;
        for layer in (0..self.config.layers).filter(|l| !skip_layers.contains(l)) {
            let [q, k, v, out, fc1, fc2] = block_linear_names(layer);
            let modulation = format!("blocks.{layer}.mod");
            let a = self.modulated_norm(g, adapter, &modulation, "1", seq, c);
            let qv = self.linear(g, adapter, &q, a);
            let kv = self.linear(g, adapter, &k, a);
            let vv = self.linear(g, adapter, &v, a);
            let att = g.attention(qv, kv, vv, heads, self.config.qk_normalization);
            let att = self.linear(g, adapter, &out, att);
            let gate = self.linear(g, adapter, &format!("{modulation}.gate1"), c);
            let att = g.mul_row(att, gate);
            seq = g.add(seq, att);
            let m = self.modulated_norm(g, adapter, &modulation, "2", seq, c);
            let m = self.linear(g, adapter, &fc1, m);
            let m = g.gelu(m);
            let m = self.linear(g, adapter, &fc2, m);
            let gate = self.linear(g, adapter, &format!("{modulation}.gate2"), c);
            let m = g.mul_row(m, gate);
            seq = g.add(seq, m);
        }

        let out = self.modulated_norm(g, adapter, "final.mod", "", seq, c);
        let out = self.linear(g, adapter, "final.out", out);
        Ok(g.slice_rows(out, 1, 1 + n_tokens))
    }

    /// Velocity prediction for `x_t` at time `t`.
    pub fn denoise(
        &self,
        adapter: Option<&LoraAdapter>,
        x_t: &LatentTensor,
        t: f64,
        cond: &ConditioningSignal,
        skip_layers: &BTreeSet<usize>,
    ) -> Result<LatentTensor> {
        let mut g = Graph::with_trainable(Trainable::None);
        let out = self.forward(&mut g, adapter, x_t, t, cond, skip_layers)?;
        self.unpatchify(g.value(out), x_t.shape())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, CHECKPOINT_KIND, &DenoiserMeta { config: self.config }, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, params): (DenoiserMeta, ParamStore) = checkpoint::load(path, CHECKPOINT_KIND)?;
        let reference = Denoiser::new(meta.config, 0)?;
        checkpoint::check_shapes(&reference.params, &params)?;
        Ok(Denoiser {
            config: meta.config,
            params,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Action, Quality, Task};
    use rand::Rng;

    fn tiny() -> DenoiserConfig {
        DenoiserConfig {
            layers: 3,
            width: 24,
            heads: 2,
            mlp_ratio: 2,
            patch: 2,
            latent_channels: 3,
            qk_normalization: true,
        }
    }

    fn latent(shape: (usize, usize, usize, usize), seed: u64) -> LatentTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LatentTensor::new(Array4::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0))).unwrap()
    }

    fn ideal_driving() -> ConditioningSignal {
        ConditioningSignal::text(ClassTriple::new(Quality::Ideal, Action::Driving, Task::Railroad))
    }

    #[test]
    fn output_shape_matches_input_and_is_deterministic() {
        let d = Denoiser::new(tiny(), 0).unwrap();
        let x = latent((3, 4, 6, 3), 1);
        let a = d.denoise(None, &x, 0.3, &ideal_driving(), &BTreeSet::new()).unwrap();
        let b = d.denoise(None, &x, 0.3, &ideal_driving(), &BTreeSet::new()).unwrap();
        assert_eq!(a.shape(), x.shape());
        assert_eq!(a, b);
    }

    #[test]
    fn skipping_every_layer_leaves_the_final_projection_of_the_embedding() {
        let d = Denoiser::new(tiny(), 2).unwrap();
        let x = latent((2, 4, 4, 3), 3);
        let all: BTreeSet<usize> = (0..3).collect();
        let skipped = d.denoise(None, &x, 0.5, &ideal_driving(), &all).unwrap();
        let empty = d.without_layers(&all).unwrap();
        assert_eq!(empty.config.layers, 0);
        let direct = empty.denoise(None, &x, 0.5, &ideal_driving(), &BTreeSet::new()).unwrap();
        assert_eq!(skipped, direct);
    }

    #[test]
    fn skip_matches_model_built_without_those_layers() {
        let d = Denoiser::new(tiny(), 4).unwrap();
        let x = latent((2, 4, 4, 3), 5);
        let skip: BTreeSet<usize> = [1].into_iter().collect();
        let a = d.denoise(None, &x, 0.7, &ideal_driving(), &skip).unwrap();
        let b = d
            .without_layers(&skip)
            .unwrap()
            .denoise(None, &x, 0.7, &ideal_driving(), &BTreeSet::new())
            .unwrap();
        assert_eq!(a, b);
        let full = d.denoise(None, &x, 0.7, &ideal_driving(), &BTreeSet::new()).unwrap();
        assert_ne!(a, full);
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let d = Denoiser::new(tiny(), 0).unwrap();
        let x = latent((2, 4, 4, 3), 0);
        let bad_skip: BTreeSet<usize> = [3].into_iter().collect();
        assert!(matches!(
            d.denoise(None, &x, 0.5, &ideal_driving(), &bad_skip),
            Err(Error::InvalidLayerIndex { index: 3, layers: 3 })
        ));
        assert!(matches!(
            d.denoise(None, &latent((2, 4, 4, 2), 0), 0.5, &ideal_driving(), &BTreeSet::new()),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            d.denoise(None, &latent((2, 3, 4, 3), 0), 0.5, &ideal_driving(), &BTreeSet::new()),
            Err(Error::Shape(_))
        ));
        assert!(d.denoise(None, &x, 1.5, &ideal_driving(), &BTreeSet::new()).is_err());
    }

    #[test]
    fn qk_normalized_vectors_have_unit_norm() {
        let d = Denoiser::new(tiny(), 6).unwrap();
        let x = latent((2, 4, 4, 3), 7);
        let mut g = Graph::inference();
        d.forward(&mut g, None, &x, 0.2, &ideal_driving(), &BTreeSet::new()).unwrap();
        let probes = g.attention_probes();
        assert_eq!(probes.len(), 3);
        let head_dim = 24 / 2;
        for p in probes {
            for m in [p.queries, p.keys] {
                for row in m.rows() {
                    for h in 0..p.heads {
                        let n: f64 = row
                            .slice(s![h * head_dim..(h + 1) * head_dim])
                            .iter()
                            .map(|v| v * v)
                            .sum::<f64>()
                            .sqrt();
                        assert!((n - 1.0).abs() < 1e-5, "norm {n}");
                    }
                }
            }
        }
    }

    #[test]
    fn condition_embeddings() {
        let d = Denoiser::new(tiny(), 8).unwrap();
        let null = d.embed_condition(&ConditioningSignal::null()).unwrap();
        assert_eq!(&null, d.params.expect("cond.null"));
        let a = d.embed_condition(&ideal_driving()).unwrap();
        let b = d
            .embed_condition(&ConditioningSignal::text(ClassTriple::new(
                Quality::NonIdeal,
                Action::Driving,
                Task::Railroad,
            )))
            .unwrap();
        assert_ne!(a, b);
        let all: Vec<Mat> = ClassTriple::all()
            .into_iter()
            .map(|c| d.embed_condition(&ConditioningSignal::text(c)).unwrap())
            .collect();
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                assert_ne!(all[i], all[j]);
            }
            assert_ne!(all[i], null);
        }
        let bad = ConditioningSignal {
            classes: Some(ClassIds {
                quality: 0,
                action: 4,
                task: 0,
            }),
            ..ConditioningSignal::null()
        };
        assert!(matches!(d.embed_condition(&bad), Err(Error::UnknownClassId(_))));
    }

    #[test]
    fn first_frame_conditioning_substitutes_frame_zero_only() {
        let x = latent((3, 4, 4, 3), 9);
        let first = latent((1, 4, 4, 3), 10);
        let cond = ConditioningSignal::image(None, first.clone(), 3);
        let y = apply_first_frame_conditioning(&x, &cond).unwrap();
        assert_eq!(y.data().slice(s![0..1, .., .., ..]), first.data().view());
        assert_eq!(y.data().slice(s![1.., .., .., ..]), x.data().slice(s![1.., .., .., ..]));
        assert_eq!(cond.conditioning_mask, Some(vec![true, false, false]));
        assert!(matches!(
            apply_first_frame_conditioning(&x, &ConditioningSignal::null()),
            Err(Error::Precondition(_))
        ));
        let wrong = ConditioningSignal::image(None, latent((1, 2, 4, 3), 0), 3);
        assert!(matches!(apply_first_frame_conditioning(&x, &wrong), Err(Error::Shape(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.swt");
        let d = Denoiser::new(tiny(), 11).unwrap();
        d.save(&path).unwrap();
        assert_eq!(Denoiser::load(&path).unwrap(), d);
    }

    #[test]
    fn positions_are_distinct_per_token() {
        let p = positional_embedding(3, 4, 4, 64);
        for i in 0..p.nrows() {
            for j in i + 1..p.nrows() {
                assert_ne!(p.row(i), p.row(j));
            }
        }
    }
}
