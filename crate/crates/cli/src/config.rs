//! Hierarchical run configuration loaded from TOML.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use suture_core::adapters::LoraConfig;
use suture_core::codec::{CodecConfig, CodecTrainConfig};
use suture_core::dataset::{Bucket, OracleConfig};
use suture_core::denoiser::DenoiserConfig;
use suture_core::diffusion::TrainConfig;
use suture_core::guidance::{GuidanceConfig, GuidanceMode};

use crate::error::{CliError, Result};

fn bucket_ser<S: Serializer>(b: &Bucket, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(&b.to_string())
}

fn bucket_de<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Bucket, D::Error> {
    let s = String::deserialize(d)?;
    s.parse().map_err(serde::de::Error::custom)
}

fn buckets_ser<S: Serializer>(b: &[Bucket], s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_seq(b.iter().map(|b| b.to_string()))
}

fn buckets_de<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<Bucket>, D::Error> {
    let v = Vec::<String>::deserialize(d)?;
    v.iter().map(|s| s.parse().map_err(serde::de::Error::custom)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Synthetic clips per class and bucket.
    pub seeds_per_class: usize,
    /// Declared training resolutions, `WxHxT`.
    #[serde(serialize_with = "buckets_ser", deserialize_with = "buckets_de")]
    pub buckets: Vec<Bucket>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            seeds_per_class: 8,
            buckets: vec![Bucket::new(64, 64, 17)],
        }
    }
}

/// Real-session ingestion: a session frame directory plus annotations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestConfig {
    pub session: Option<PathBuf>,
    pub annotations: Option<PathBuf>,
    pub fps: f64,
}

impl Default for IngestConfig {
    fn default() -> Self {
        IngestConfig {
            session: None,
            annotations: None,
            fps: 10.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub steps: usize,
    #[serde(serialize_with = "bucket_ser", deserialize_with = "bucket_de")]
    pub bucket: Bucket,
    pub caption: Option<String>,
    pub first_frame: Option<PathBuf>,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            steps: 20,
            bucket: Bucket::new(64, 64, 17),
            caption: None,
            first_frame: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Row label in the results table.
    pub model_label: String,
    pub latency_runs: usize,
    /// Held-out synthetic clips per class for the reconstruction loss.
    pub held_out_per_class: usize,
    /// Adherence clips per class; 0 skips adherence scoring.
    pub adherence_seeds_per_class: usize,
    pub adherence_first_seed: u64,
    /// Condition generations on each held-out clip's first frame.
    pub image_conditioning: bool,
    pub oracle: OracleConfig,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            model_label: "t2v".into(),
            latency_runs: 10,
            held_out_per_class: 1,
            adherence_seeds_per_class: 20,
            adherence_first_seed: 10_000,
            image_conditioning: false,
            oracle: OracleConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed; component seeds are derived from it.
    pub seed: u64,
    /// Artifact root.
    pub out: PathBuf,
    pub data: DataConfig,
    pub ingest: IngestConfig,
    pub codec: CodecConfig,
    pub codec_train: CodecTrainConfig,
    pub denoiser: DenoiserConfig,
    pub train: TrainConfig,
    pub guidance: GuidanceConfig,
    pub sample: SampleConfig,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            ingest: IngestConfig::default(),
            codec: CodecConfig::default(),
            codec_train: CodecTrainConfig::default(),
            denoiser: DenoiserConfig::default(),
            train: TrainConfig::default(),
            guidance: GuidanceConfig::default(),
            sample: SampleConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub guidance: Option<GuidanceMode>,
    pub scale: Option<f64>,
    pub steps: Option<usize>,
    pub bucket: Option<Bucket>,
    pub caption: Option<String>,
    pub first_frame: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::ConfigParse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|_| CliError::missing(path, "config file not found"))?;
        Self::from_toml(&text, path)
    }

    /// Applies overrides, propagates the root seed, and validates.
    pub fn resolve(mut self, o: &Overrides) -> Result<Self> {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        if let Some(mode) = o.guidance {
            // switching modes without a scale picks that mode's default scale
            let scale = o.scale.unwrap_or(GuidanceConfig::for_mode(mode).scale);
            self.guidance = GuidanceConfig {
                mode,
                scale,
                skip_layers: self.guidance.skip_layers.take(),
            };
        } else if let Some(scale) = o.scale {
            self.guidance.scale = scale;
        }
        if let Some(steps) = o.steps {
            self.sample.steps = steps;
        }
        if let Some(bucket) = o.bucket {
            self.sample.bucket = bucket;
        }
        if let Some(c) = &o.caption {
            self.sample.caption = Some(c.clone());
        }
        if let Some(f) = &o.first_frame {
            self.sample.first_frame = Some(f.clone());
        }
        self.codec_train.seed = self.seed;
        self.train.seed = self.seed;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.codec.validate()?;
        self.denoiser.validate()?;
        self.train.validate()?;
        if self.denoiser.latent_channels != self.codec.latent_channels {
            return Err(CliError::config(
                "denoiser.latent_channels",
                format!("must equal codec.latent_channels ({})", self.codec.latent_channels),
            ));
        }
        if self.data.buckets.is_empty() {
            return Err(CliError::config("data.buckets", "declare at least one bucket"));
        }
        for b in &self.data.buckets {
            self.check_bucket("data.buckets", *b)?;
        }
        self.check_bucket("sample.bucket", self.sample.bucket)?;
        if self.sample.steps == 0 {
            return Err(CliError::config("sample.steps", "must be >= 1"));
        }
        if self.codec_train.steps == 0 {
            return Err(CliError::config("codec_train.steps", "must be >= 1"));
        }
        if self.eval.latency_runs == 0 {
            return Err(CliError::config("eval.latency_runs", "must be >= 1"));
        }
        if !(self.ingest.fps > 0.0 && self.ingest.fps.is_finite()) {
            return Err(CliError::config("ingest.fps", "must be positive"));
        }
        if let Some(c) = &self.sample.caption {
            suture_core::dataset::parse_caption(c).map_err(|e| CliError::config("sample.caption", e.to_string()))?;
        }
        if let Some(f) = &self.sample.first_frame {
            if !f.is_file() {
                return Err(CliError::config("sample.first_frame", format!("{} is not a file", f.display())));
            }
        }
        self.guidance
            .validate(self.denoiser.layers)
            .map_err(|e| CliError::config("guidance", e.to_string()))?;
        let lora: &LoraConfig = &self.train.lora;
        if lora.rank == 0 || !(lora.alpha > 0.0) {
            return Err(CliError::config("train.lora", "rank must be >= 1 and alpha > 0"));
        }
        Ok(())
    }

    fn check_bucket(&self, field: &str, b: Bucket) -> Result<()> {
        b.check_temporal(self.codec.temporal)
            .and_then(|_| self.codec.latent_shape(b.frame_count, b.height, b.width))
            .and_then(|(_, h, w, _)| {
                if h % self.denoiser.patch != 0 || w % self.denoiser.patch != 0 {
                    Err(suture_core::Error::shape(format!(
                        "latent grid {h}x{w} not divisible by denoiser patch {}",
                        self.denoiser.patch
                    )))
                } else {
                    Ok(())
                }
            })
            .map_err(|e| CliError::config(field, format!("{b}: {e}")))
    }

    /// Complete resolved configuration, defaults included.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config is always representable")
    }
}
