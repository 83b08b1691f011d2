//! Reconstruction, latency and class-adherence scoring.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::{oracle_classify, Bucket, ClassTriple, OracleConfig};
use crate::diffusion::{GenerationRequest, Generator};
use crate::error::{Error, Result};
use crate::guidance::{GuidanceConfig, GuidanceMode};
use crate::video::VideoTensor;

pub const DEFAULT_LATENCY_RUNS: usize = 10;

/// Pixel range the reconstruction loss is measured in.
pub const PIXEL_RANGE: &str = "[0, 1]";

/// Mean squared error after mapping both clips from `[-1, 1]` to `[0, 1]`.
pub fn l2_reconstruction(generated: &VideoTensor, ground_truth: &VideoTensor) -> Result<f64> {
    if generated.shape() != ground_truth.shape() {
        return Err(Error::shape(format!(
            "generated {:?} vs ground truth {:?}",
            generated.shape(),
            ground_truth.shape()
        )));
    }
    // (a + 1) / 2 − (b + 1) / 2 = (a − b) / 2
    let sum: f64 = generated
        .data()
        .iter()
        .zip(ground_truth.data().iter())
        .map(|(a, b)| ((a - b) * 0.5).powi(2))
        .sum();
    Ok(sum / generated.data().len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean_s: f64,
    pub samples_s: Vec<f64>,
}

impl LatencyStats {
    pub fn runs(&self) -> usize {
        self.samples_s.len()
    }
}

/// Runs `f` once untimed, then `runs` (default 10) timed runs back to back.
pub fn benchmark_latency<F>(mut f: F, runs: Option<usize>) -> Result<LatencyStats>
where
    F: FnMut() -> Result<()>,
{
    let runs = runs.unwrap_or(DEFAULT_LATENCY_RUNS);
    if runs == 0 {
        return Err(Error::precondition("latency benchmark needs at least one run"));
    }
    f()?;
    let mut samples_s = Vec::with_capacity(runs);
    for _ in 0..runs {
        let start = Instant::now();
        f()?;
        samples_s.push(start.elapsed().as_secs_f64());
    }
    let mean_s = samples_s.iter().sum::<f64>() / runs as f64;
    Ok(LatencyStats { mean_s, samples_s })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class: ClassTriple,
    pub hits: usize,
    pub total: usize,
    pub untrackable: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdherenceReport {
    pub per_class: Vec<ClassScore>,
}

impl AdherenceReport {
    pub fn hits(&self) -> usize {
        self.per_class.iter().map(|c| c.hits).sum()
    }

    pub fn total(&self) -> usize {
        self.per_class.iter().map(|c| c.total).sum()
    }

    pub fn fraction(&self) -> f64 {
        self.hits() as f64 / self.total() as f64
    }
}

/// How adherence clips are sampled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdherenceConfig {
    pub guidance: GuidanceConfig,
    pub steps: usize,
    pub bucket: Bucket,
    pub seeds_per_class: usize,
    /// Clip `k` of every class uses seed `first_seed + k`.
    pub first_seed: u64,
    pub oracle: OracleConfig,
}

impl Default for AdherenceConfig {
    fn default() -> Self {
        AdherenceConfig {
            guidance: GuidanceConfig::default(),
            steps: 20,
            bucket: Bucket::new(64, 64, 17),
            seeds_per_class: 20,
            first_seed: 10_000,
            oracle: OracleConfig::default(),
        }
    }
}

/// Fraction of generated clips whose oracle (quality, task) matches the
/// prompt. Clips the oracle cannot track count as misses.
pub fn class_adherence(
    generator: Generator<'_>,
    classes: &[ClassTriple],
    config: &AdherenceConfig,
) -> Result<AdherenceReport> {
    if classes.is_empty() {
        return Err(Error::precondition("class adherence needs at least one class"));
    }
    if config.seeds_per_class == 0 {
        return Err(Error::precondition("class adherence needs at least one seed per class"));
    }
    let mut per_class = Vec::with_capacity(classes.len());
    for &class in classes {
        let mut score = ClassScore {
            class,
            hits: 0,
            total: 0,
            untrackable: 0,
        };
        for k in 0..config.seeds_per_class {
            let request = GenerationRequest {
                caption: Some(class.caption()),
                guidance: config.guidance.clone(),
                steps: config.steps,
                bucket: config.bucket,
                seed: config.first_seed + k as u64,
            };
            let clip = generator.generate(&request, None)?;
            score.total += 1;
            match oracle_classify(&clip, &config.oracle) {
                Ok((q, t)) if q == class.quality && t == class.task => score.hits += 1,
                Ok(_) => {}
                Err(Error::NoTrackableObject) => score.untrackable += 1,
                Err(e) => return Err(e),
            }
        }
        per_class.push(score);
    }
    Ok(AdherenceReport { per_class })
}

fn ln_choose(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (0..k).map(|i| ((n - i) as f64).ln() - ((i + 1) as f64).ln()).sum()
}

/// Central acceptance interval `[lo, hi]` (as fractions of `n`) of a
/// Binomial(`n`, `p`) count: each tail outside it holds at most
/// `(1 − level) / 2` of the mass.
pub fn binomial_interval(n: usize, p: f64, level: f64) -> Result<(f64, f64)> {
    if n == 0 || !(0.0..=1.0).contains(&p) || !(0.0..1.0).contains(&level) {
        return Err(Error::precondition("binomial interval needs n >= 1, p in [0, 1], level in [0, 1)"));
    }
    let pmf: Vec<f64> = (0..=n)
        .map(|k| {
            if p == 0.0 {
                return if k == 0 { 1.0 } else { 0.0 };
            }
            if p == 1.0 {
                return if k == n { 1.0 } else { 0.0 };
            }
            (ln_choose(n, k) + k as f64 * p.ln() + (n - k) as f64 * (1.0 - p).ln()).exp()
        })
        .collect();
    let tail = (1.0 - level) / 2.0;
    let mut lo = 0;
    let mut below = 0.0;
    while lo < n && below + pmf[lo] <= tail {
        below += pmf[lo];
        lo += 1;
    }
    let mut hi = n;
    let mut above = 0.0;
    while hi > lo && above + pmf[hi] <= tail {
        above += pmf[hi];
        hi -= 1;
    }
    Ok((lo as f64 / n as f64, hi as f64 / n as f64))
}

/// What a report row was measured with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub model_hash: String,
    pub adapter_hash: Option<String>,
    pub guidance_mode: GuidanceMode,
    pub guidance_scale: f64,
    pub steps: usize,
    pub bucket: Bucket,
    pub pixel_range: String,
}

impl Fingerprint {
    pub fn of(generator: Generator<'_>, guidance: &GuidanceConfig, steps: usize, bucket: Bucket) -> Self {
        Fingerprint {
            model_hash: generator.denoiser.params.content_hash(),
            adapter_hash: generator.adapter.map(|a| a.params.content_hash()),
            guidance_mode: guidance.mode,
            guidance_scale: guidance.scale,
            steps,
            bucket,
            pixel_range: PIXEL_RANGE.to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Row label, e.g. `"t2v (LoRA)"`.
    pub model: String,
    pub l2_loss: f64,
    pub latency_mean_s: f64,
    pub latency_runs: usize,
    pub latency_samples_s: Vec<f64>,
    pub class_adherence: Option<f64>,
    pub fingerprint: Fingerprint,
}

impl EvalReport {
    pub fn to_text(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let report: EvalReport = serde_json::from_str(text)?;
        if report.latency_runs == 0 || report.latency_runs != report.latency_samples_s.len() {
            return Err(Error::corrupt("report latency runs disagree with samples"));
        }
        Ok(report)
    }

    /// `| model | loss | time (s) |` row.
    pub fn table_row(&self) -> String {
        format!("| {} | {:.5} | {:.3} |", self.model, self.l2_loss, self.latency_mean_s)
    }
}

/// Header plus one row per report.
pub fn results_table(reports: &[EvalReport]) -> String {
    let mut out = String::from("| Model | Loss (L2 Reconstruction) | Inference Time (s) |\n|---|---|---|\n");
    for r in reports {
        let _ = writeln!(out, "{}", r.table_row());
    }
    out
}

/// A held-out clip and the caption it was labeled with.
#[derive(Clone, Debug)]
pub struct HeldOutClip {
    pub caption: String,
    pub clip: VideoTensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub model: String,
    pub guidance: GuidanceConfig,
    pub steps: usize,
    pub seed: u64,
    /// Condition on each held-out clip's first frame.
    pub image_conditioning: bool,
    pub latency_runs: Option<usize>,
}

/// Scores `generator` against held-out clips.
///
/// Each held-out clip is paired with one generation from its caption (and,
/// for image conditioning, its first frame) at its own resolution. Latency
/// is measured on the first pairing.
pub fn evaluate(generator: Generator<'_>, held_out: &[HeldOutClip], config: &EvalConfig) -> Result<EvalReport> {
    let first = held_out.first().ok_or(Error::EmptyManifest)?;
    let request_for = |h: &HeldOutClip| {
        let (t, height, width, _) = h.clip.shape();
        GenerationRequest {
            caption: Some(h.caption.clone()),
            guidance: config.guidance.clone(),
            steps: config.steps,
            bucket: Bucket::new(width, height, t),
            seed: config.seed,
        }
    };
    let first_frame = |h: &HeldOutClip| -> Result<Option<VideoTensor>> {
        if config.image_conditioning {
            Ok(Some(h.clip.slice_frames(0, 1)?))
        } else {
            Ok(None)
        }
    };
    let mut total = 0.0;
    for h in held_out {
        let generated = generator.generate(&request_for(h), first_frame(h)?.as_ref())?;
        total += l2_reconstruction(&generated, &h.clip)?;
    }
    let request = request_for(first);
    let frame = first_frame(first)?;
    let latency = benchmark_latency(|| generator.generate(&request, frame.as_ref()).map(drop), config.latency_runs)?;
    Ok(EvalReport {
        model: config.model.clone(),
        l2_loss: total / held_out.len() as f64,
        latency_mean_s: latency.mean_s,
        latency_runs: latency.runs(),
        latency_samples_s: latency.samples_s,
        class_adherence: None,
        fingerprint: Fingerprint::of(generator, &config.guidance, config.steps, request.bucket),
    })
}
