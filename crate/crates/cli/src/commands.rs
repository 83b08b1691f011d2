//! Pipeline commands and their artifact directories.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};
use suture_core::adapters::LoraAdapter;
use suture_core::codec::{train_codec, Codec};
use suture_core::dataset::{
    build_manifest, cut_clips, read_annotations, synthesize_toy_clip, ClassTriple, ClipRecord, DatasetManifest,
    SubStitchAnnotation, ToyClipSpec,
};
use suture_core::denoiser::Denoiser;
use suture_core::diffusion::{encode_manifest, train, GenerationRequest, Generator, TrainMode};
use suture_core::eval::{benchmark_latency, class_adherence, evaluate, results_table, AdherenceConfig, EvalConfig, HeldOutClip};
use suture_core::video::{read_frames, read_image, write_frames, VideoTensor};

use crate::config::RunConfig;
use crate::error::{CliError, Result};

const STAMP: &str = "stamp.json";
const SYNTHETIC_SESSION: &str = "synthetic";
// held-out clips use seeds far from the training range
const HELD_OUT_SEED_OFFSET: u64 = 500_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    SynthData,
    Ingest,
    TrainCodec,
    Train,
    Generate,
    Evaluate,
    Bench,
}

/// Where every command reads and writes.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Layout { root: root.to_path_buf() }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn manifest(&self) -> PathBuf {
        self.data().join("manifest.jsonl")
    }

    pub fn codec_dir(&self) -> PathBuf {
        self.root.join("codec")
    }

    pub fn codec(&self) -> PathBuf {
        self.codec_dir().join("codec.swt")
    }

    pub fn train_dir(&self) -> PathBuf {
        self.root.join("train")
    }

    pub fn denoiser(&self) -> PathBuf {
        self.train_dir().join("denoiser.swt")
    }

    pub fn adapter(&self) -> PathBuf {
        self.train_dir().join("adapter.swt")
    }

    pub fn generate_dir(&self) -> PathBuf {
        self.root.join("generate")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn bench_dir(&self) -> PathBuf {
        self.root.join("bench")
    }
}

fn digest(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}

fn json<T: Serialize>(v: &T) -> Vec<u8> {
    serde_json::to_vec(v).expect("config types serialize")
}

fn file_hash(path: &Path, hint: &str) -> Result<String> {
    let bytes = fs::read(path).map_err(|_| CliError::missing(path, hint))?;
    Ok(digest(&[&bytes]))
}

/// Outcome of checking an output directory against the current settings.
enum Prepared {
    Fresh,
    UpToDate,
}

/// Creates `dir` for a run keyed by `key`. Existing output with the same key
/// is kept; anything else is refused unless `force`.
fn prepare(dir: &Path, key: &str, force: bool) -> Result<Prepared> {
    if dir.exists() {
        let stamp = fs::read_to_string(dir.join(STAMP)).ok();
        if stamp.as_deref() == Some(key) {
            return Ok(Prepared::UpToDate);
        }
        if !force {
            return Err(CliError::Conflict { dir: dir.to_path_buf() });
        }
        fs::remove_dir_all(dir)?;
    }
    fs::create_dir_all(dir)?;
    Ok(Prepared::Fresh)
}

fn finish(dir: &Path, key: &str) -> Result<()> {
    fs::write(dir.join(STAMP), key)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)? + "\n")?;
    Ok(())
}

pub struct Context {
    pub config: RunConfig,
    pub layout: Layout,
    pub force: bool,
}

impl Context {
    pub fn new(config: RunConfig, force: bool) -> Self {
        let layout = Layout::new(&config.out);
        Context { config, layout, force }
    }

    pub fn run(&self, command: Command) -> Result<()> {
        match command {
            Command::SynthData => self.synth_data(),
            Command::Ingest => self.ingest(),
            Command::TrainCodec => self.train_codec(),
            Command::Train => self.train(),
            Command::Generate => self.generate().map(|dir| println!("{}", dir.display())),
            Command::Evaluate => self.evaluate(),
            Command::Bench => self.bench(),
        }
    }

    fn skip(&self, what: &str, dir: &Path) {
        eprintln!("{what}: {} is up to date", dir.display());
    }

    fn synth_data(&self) -> Result<()> {
        let c = &self.config;
        let dir = self.layout.data();
        let key = digest(&[b"synth-data", &json(&c.seed), &json(&c.data), &json(&c.ingest.fps), &json(&c.codec.temporal)]);
        if let Prepared::UpToDate = prepare(&dir, &key, self.force)? {
            self.skip("synth-data", &dir);
            return Ok(());
        }
        let mut records = Vec::new();
        for bucket in &c.data.buckets {
            for class in ClassTriple::all() {
                for k in 0..c.data.seeds_per_class {
                    let annotation = SubStitchAnnotation {
                        session_id: SYNTHETIC_SESSION.into(),
                        task: class.task,
                        action: class.action,
                        quality: class.quality,
                        start_time: 0.0,
                        end_time: bucket.frame_count as f64 / c.ingest.fps,
                    };
                    let spec = ToyClipSpec {
                        annotation: annotation.clone(),
                        seed: c.seed * 1_000_000 + k as u64,
                        width: bucket.width,
                        height: bucket.height,
                        frame_count: bucket.frame_count,
                    };
                    let clip = synthesize_toy_clip(&spec)?;
                    let clip_id = format!("synth-{bucket}-{}-{k:03}", class.slug());
                    let frames_path = PathBuf::from("clips").join(&clip_id);
                    write_frames(&clip, &dir.join(&frames_path))?;
                    records.push(ClipRecord {
                        clip_id,
                        frames_path,
                        caption: class.caption(),
                        annotation,
                        width: bucket.width,
                        height: bucket.height,
                        frame_count: bucket.frame_count,
                    });
                }
            }
        }
        let manifest = build_manifest(records, &c.data.buckets, c.codec.temporal)?;
        manifest.write(&self.layout.manifest())?;
        eprintln!("synth-data: wrote {} clips to {}", manifest.len(), dir.display());
        finish(&dir, &key)
    }

    fn ingest(&self) -> Result<()> {
        let c = &self.config;
        let session = c
            .ingest
            .session
            .as_ref()
            .ok_or_else(|| CliError::config("ingest.session", "set the session frame directory"))?;
        let annotations = c
            .ingest
            .annotations
            .as_ref()
            .ok_or_else(|| CliError::config("ingest.annotations", "set the annotation file"))?;
        if !session.is_dir() {
            return Err(CliError::missing(session, "session frame directory"));
        }
        let annotation_hash = file_hash(annotations, "annotation file")?;
        let dir = self.layout.data();
        let key = digest(&[
            b"ingest",
            session.to_string_lossy().as_bytes(),
            annotation_hash.as_bytes(),
            &json(&c.ingest.fps),
            &json(&c.data.buckets),
        ]);
        if let Prepared::UpToDate = prepare(&dir, &key, self.force)? {
            self.skip("ingest", &dir);
            return Ok(());
        }
        let video = read_frames(session)?;
        let anns = read_annotations(annotations)?;
        let cut = cut_clips(&video, &anns, c.ingest.fps, Path::new("clips"))?;
        let mut records = Vec::with_capacity(cut.len());
        for clip in cut {
            write_frames(&clip.frames, &dir.join(&clip.record.frames_path))?;
            records.push(clip.record);
        }
        let manifest = build_manifest(records, &c.data.buckets, c.codec.temporal)?;
        manifest.write(&self.layout.manifest())?;
        eprintln!("ingest: wrote {} clips to {}", manifest.len(), dir.display());
        finish(&dir, &key)
    }

    fn manifest(&self) -> Result<(DatasetManifest, String)> {
        let path = self.layout.manifest();
        let hash = file_hash(&path, "run synth-data or ingest first")?;
        Ok((DatasetManifest::read(&path, self.config.codec.temporal)?, hash))
    }

    fn train_codec(&self) -> Result<()> {
        let c = &self.config;
        let (manifest, manifest_hash) = self.manifest()?;
        let dir = self.layout.codec_dir();
        let key = digest(&[b"train-codec", manifest_hash.as_bytes(), &json(&c.codec), &json(&c.codec_train)]);
        if let Prepared::UpToDate = prepare(&dir, &key, self.force)? {
            self.skip("train-codec", &dir);
            return Ok(());
        }
        let clips = manifest
            .records
            .iter()
            .map(|r| read_frames(&self.layout.data().join(&r.frames_path)))
            .collect::<suture_core::Result<Vec<_>>>()?;
        let (codec, curve) = train_codec(&clips, c.codec, &c.codec_train)?;
        codec.save(&self.layout.codec())?;
        let mut log = String::new();
        for (i, loss) in curve.iter().enumerate() {
            log += &serde_json::to_string(&serde_json::json!({ "step": i + 1, "loss": loss }))?;
            log.push('\n');
        }
        fs::write(dir.join("loss.jsonl"), log)?;
        eprintln!("train-codec: final loss {:.5}", curve.last().copied().unwrap_or(f64::NAN));
        finish(&dir, &key)
    }

    fn codec(&self) -> Result<(Codec, String)> {
        let path = self.layout.codec();
        let hash = file_hash(&path, "run train-codec first")?;
        Ok((Codec::load(&path)?, hash))
    }

    fn train(&self) -> Result<()> {
        let c = &self.config;
        let (manifest, manifest_hash) = self.manifest()?;
        let (codec, codec_hash) = self.codec()?;
        let dir = self.layout.train_dir();
        let key = digest(&[
            b"train",
            manifest_hash.as_bytes(),
            codec_hash.as_bytes(),
            &json(&c.denoiser),
            &json(&c.train),
        ]);
        if let Prepared::UpToDate = prepare(&dir, &key, self.force)? {
            self.skip("train", &dir);
            return Ok(());
        }
        let examples = encode_manifest(&manifest, &codec, &self.layout.data())?;
        let base = Denoiser::new(c.denoiser, c.seed)?;
        let outcome = train(&examples, &base, &c.train)?;
        outcome.denoiser.save(&self.layout.denoiser())?;
        if let Some(adapter) = &outcome.adapter {
            adapter.save(&self.layout.adapter())?;
        }
        fs::write(dir.join("metrics.jsonl"), outcome.metrics_jsonl()?)?;
        let mode = match c.train.mode {
            TrainMode::Lora => "lora",
            TrainMode::FullFinetune => "full_finetune",
        };
        eprintln!(
            "train: {mode}, {} steps in {:.1}s, last loss {:.4}",
            outcome.losses.len(),
            outcome.seconds,
            outcome.losses.last().copied().unwrap_or(f64::NAN)
        );
        finish(&dir, &key)
    }

    fn model(&self) -> Result<Model> {
        let (codec, codec_hash) = self.codec()?;
        let path = self.layout.denoiser();
        if !path.is_file() {
            return Err(CliError::missing(&path, "run train first"));
        }
        let denoiser = Denoiser::load(&path)?;
        let adapter_path = self.layout.adapter();
        let adapter = if adapter_path.is_file() {
            Some(LoraAdapter::load(&adapter_path, &denoiser)?)
        } else {
            None
        };
        Ok(Model {
            codec,
            codec_hash,
            denoiser,
            adapter,
        })
    }

    fn request(&self) -> GenerationRequest {
        let c = &self.config;
        GenerationRequest {
            caption: c.sample.caption.clone(),
            guidance: c.guidance.clone(),
            steps: c.sample.steps,
            bucket: c.sample.bucket,
            seed: c.seed,
        }
    }

    fn first_frame(&self) -> Result<Option<VideoTensor>> {
        match &self.config.sample.first_frame {
            Some(p) => Ok(Some(read_image(p)?)),
            None => Ok(None),
        }
    }

    /// Writes one generated clip and returns its directory.
    fn generate(&self) -> Result<PathBuf> {
        let model = self.model()?;
        let request = self.request();
        let first = self.first_frame()?;
        let class = match &request.caption {
            Some(caption) => {
                let (q, a, t) = suture_core::dataset::parse_caption(caption)?;
                ClassTriple::new(q, a, t).slug()
            }
            None => "null".into(),
        };
        let variant = if first.is_some() { "i2v" } else { "t2v" };
        let name = format!("{class}-{variant}-{}-{}-seed{}", request.guidance.mode, request.bucket, request.seed);
        let dir = self.layout.generate_dir().join(name);
        let metadata = GenerationMetadata {
            caption: request.caption.clone(),
            guidance_mode: request.guidance.mode.to_string(),
            guidance_scale: request.guidance.scale,
            skip_layers: (request.guidance.mode == suture_core::guidance::GuidanceMode::Stg)
                .then(|| request.guidance.resolved_skip_layers(model.denoiser.layers()).into_iter().collect()),
            steps: request.steps,
            bucket: request.bucket.to_string(),
            seed: request.seed,
            first_frame: self.config.sample.first_frame.clone(),
            denoiser_hash: model.denoiser.params.content_hash(),
            adapter_hash: model.adapter.as_ref().map(|a| a.params.content_hash()),
            codec_hash: model.codec_hash.clone(),
        };
        let first_hash = match &first {
            Some(f) => digest(&[&json(&f.data().iter().copied().collect::<Vec<f64>>())]),
            None => String::new(),
        };
        let key = digest(&[b"generate", &json(&metadata), first_hash.as_bytes()]);
        if let Prepared::UpToDate = prepare(&dir, &key, self.force)? {
            self.skip("generate", &dir);
            return Ok(dir);
        }
        let clip = model.generator().generate(&request, first.as_ref())?;
        write_frames(&clip, &dir.join("frames"))?;
        write_json(&dir.join("metadata.json"), &metadata)?;
        finish(&dir, &key)?;
        Ok(dir)
    }

    fn held_out(&self) -> Result<Vec<HeldOutClip>> {
        let c = &self.config;
        let b = c.sample.bucket;
        let mut out = Vec::new();
        for class in ClassTriple::all() {
            for k in 0..c.eval.held_out_per_class {
                let spec = ToyClipSpec {
                    annotation: SubStitchAnnotation {
                        session_id: SYNTHETIC_SESSION.into(),
                        task: class.task,
                        action: class.action,
                        quality: class.quality,
                        start_time: 0.0,
                        end_time: b.frame_count as f64 / c.ingest.fps,
                    },
                    seed: c.seed * 1_000_000 + HELD_OUT_SEED_OFFSET + k as u64,
                    width: b.width,
                    height: b.height,
                    frame_count: b.frame_count,
                };
                out.push(HeldOutClip {
                    caption: class.caption(),
                    clip: synthesize_toy_clip(&spec)?,
                });
            }
        }
        Ok(out)
    }

    fn evaluate(&self) -> Result<()> {
        let c = &self.config;
        let model = self.model()?;
        let dir = self.layout.eval_dir();
        let key = digest(&[
            b"evaluate",
            model.denoiser.params.content_hash().as_bytes(),
            &json(&model.adapter.as_ref().map(|a| a.params.content_hash())),
            model.codec_hash.as_bytes(),
            &json(&c.seed),
            &json(&c.guidance),
            &json(&c.sample),
            &json(&c.eval),
        ]);
        if let Prepared::UpToDate = prepare(&dir, &key, self.force)? {
            self.skip("evaluate", &dir);
            return Ok(());
        }
        let generator = model.generator();
        let held_out = self.held_out()?;
        let mut report = evaluate(
            generator,
            &held_out,
            &EvalConfig {
                model: c.eval.model_label.clone(),
                guidance: c.guidance.clone(),
                steps: c.sample.steps,
                seed: c.seed,
                image_conditioning: c.eval.image_conditioning,
                latency_runs: Some(c.eval.latency_runs),
            },
        )?;
        if c.eval.adherence_seeds_per_class > 0 {
            let adherence = class_adherence(
                generator,
                &ClassTriple::all(),
                &AdherenceConfig {
                    guidance: c.guidance.clone(),
                    steps: c.sample.steps,
                    bucket: c.sample.bucket,
                    seeds_per_class: c.eval.adherence_seeds_per_class,
                    first_seed: c.eval.adherence_first_seed,
                    oracle: c.eval.oracle,
                },
            )?;
            report.class_adherence = Some(adherence.fraction());
            write_json(&dir.join("adherence.json"), &adherence)?;
        }
        fs::write(dir.join("report.json"), report.to_text()? + "\n")?;
        fs::write(dir.join("table.md"), results_table(std::slice::from_ref(&report)))?;
        eprintln!(
            "evaluate: l2 {:.5}, latency {:.3}s over {} runs{}",
            report.l2_loss,
            report.latency_mean_s,
            report.latency_runs,
            report
                .class_adherence
                .map(|a| format!(", adherence {a:.3}"))
                .unwrap_or_default()
        );
        finish(&dir, &key)
    }

    /// Timing is never reproducible, so bench always overwrites its output.
    fn bench(&self) -> Result<()> {
        let model = self.model()?;
        let request = self.request();
        let first = self.first_frame()?;
        let generator = model.generator();
        let stats = benchmark_latency(
            || generator.generate(&request, first.as_ref()).map(drop),
            Some(self.config.eval.latency_runs),
        )?;
        let dir = self.layout.bench_dir();
        fs::create_dir_all(&dir)?;
        write_json(&dir.join("latency.json"), &stats)?;
        println!("mean {:.4}s over {} runs", stats.mean_s, stats.runs());
        Ok(())
    }
}

struct Model {
    codec: Codec,
    codec_hash: String,
    denoiser: Denoiser,
    adapter: Option<LoraAdapter>,
}

impl Model {
    fn generator(&self) -> Generator<'_> {
        Generator {
            denoiser: &self.denoiser,
            adapter: self.adapter.as_ref(),
            codec: &self.codec,
        }
    }
}

#[derive(Serialize)]
struct GenerationMetadata {
    caption: Option<String>,
    guidance_mode: String,
    guidance_scale: f64,
    skip_layers: Option<Vec<usize>>,
    steps: usize,
    bucket: String,
    seed: u64,
    first_frame: Option<PathBuf>,
    denoiser_hash: String,
    adapter_hash: Option<String>,
    codec_hash: String,
}
