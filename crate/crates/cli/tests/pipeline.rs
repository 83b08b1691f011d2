use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
[data]
seeds_per_class = 1
buckets = ["32x32x9"]
[codec_train]
steps = 20
batch_patches = 32
[denoiser]
layers = 2
width = 16
heads = 2
[train]
steps = 6
[sample]
steps = 2
bucket = "32x32x9"
[eval]
latency_runs = 2
adherence_seeds_per_class = 1
"#;

const PROMPT: &str = "An ideal clip of a needle positioning action during a railroad task.";

fn suture(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_suture"))
        .current_dir(dir)
        .env_remove("SUTURE_BACKEND")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = suture(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    dir
}

fn pipeline(dir: &Path, out: &str) -> PathBuf {
    for cmd in ["synth-data", "train-codec", "train", "evaluate"] {
        ok(dir, &["--config", "tiny.toml", "--out", out, cmd]);
    }
    let printed = ok(dir, &["--config", "tiny.toml", "--out", out, "generate", "--caption", PROMPT]);
    dir.join(String::from_utf8(printed.stdout).unwrap().trim())
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn losses(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            format!("{}:{}", v["step"], v["loss"])
        })
        .collect()
}

#[test]
fn synth_data_writes_one_record_per_class_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["--out", "run", "synth-data"]);
    let manifest = fs::read_to_string(dir.path().join("run/data/manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 128);
}

#[test]
fn training_before_the_codec_reports_the_missing_artifact() {
    let dir = workspace();
    let out = suture(dir.path(), &["--config", "tiny.toml", "--out", "run", "train"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("missing artifact"), "{}", stderr(&out));
    ok(dir.path(), &["--config", "tiny.toml", "--out", "run", "synth-data"]);
    let out = suture(dir.path(), &["--config", "tiny.toml", "--out", "run", "train"]);
    assert!(stderr(&out).contains("codec.swt"), "{}", stderr(&out));
}

#[test]
fn config_errors_name_the_field() {
    let dir = workspace();
    let out = suture(dir.path(), &["--config", "tiny.toml", "--steps", "0", "bench"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("sample.steps"), "{}", stderr(&out));
    fs::write(dir.path().join("bad.toml"), "[train]\nlearning_rat = 1.0\n").unwrap();
    let out = suture(dir.path(), &["--config", "bad.toml", "synth-data"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("learning_rat"), "{}", stderr(&out));
    let out = suture(dir.path(), &["--bucket", "32x32x8", "synth-data"]);
    assert!(stderr(&out).contains("sample.bucket"), "{}", stderr(&out));
}

#[test]
fn resolved_config_is_echoed_with_defaults() {
    let dir = workspace();
    let out = ok(dir.path(), &["--config", "tiny.toml", "--out", "run", "synth-data"]);
    let echo = stderr(&out);
    for key in ["learning_rate", "condition_dropout", "jerk_threshold", "latency_runs", "qk_normalization"] {
        assert!(echo.contains(key), "{key} missing from echo");
    }
}

#[test]
fn only_the_cpu_backend_is_accepted() {
    let dir = workspace();
    let out = Command::new(env!("CARGO_BIN_EXE_suture"))
        .current_dir(dir.path())
        .env("SUTURE_BACKEND", "gpu")
        .args(["synth-data"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(stderr(&out).contains("backend"));
}

#[test]
fn reruns_are_idempotent_or_refused() {
    let dir = workspace();
    ok(dir.path(), &["--config", "tiny.toml", "--out", "run", "synth-data"]);
    let manifest = dir.path().join("run/data/manifest.jsonl");
    let frame = dir
        .path()
        .join("run/data/clips/synth-32x32x9-ideal-positioning-railroad-000")
        .join(suture_core::video::frame_file_name(3));
    let before = fs::read(&manifest).unwrap();
    let pixels = fs::read(&frame).unwrap();
    let again = ok(dir.path(), &["--config", "tiny.toml", "--out", "run", "synth-data"]);
    assert!(stderr(&again).contains("up to date"));
    assert_eq!(fs::read(&manifest).unwrap(), before);
    let changed = suture(dir.path(), &["--config", "tiny.toml", "--out", "run", "--seed", "5", "synth-data"]);
    assert!(!changed.status.success());
    assert!(stderr(&changed).contains("--force"));
    ok(dir.path(), &["--config", "tiny.toml", "--out", "run", "--seed", "5", "--force", "synth-data"]);
    assert_eq!(fs::read(&manifest).unwrap(), before);
    assert_ne!(fs::read(&frame).unwrap(), pixels);
}

#[test]
fn generation_writes_frames_and_guidance_metadata() {
    let dir = workspace();
    let generated = pipeline(dir.path(), "run");
    let frames = fs::read_dir(generated.join("frames")).unwrap().count();
    assert_eq!(frames, 9);
    let meta: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(generated.join("metadata.json")).unwrap()).unwrap();
    assert_eq!(meta["caption"], PROMPT);
    assert_eq!(meta["guidance_mode"], "cfg");
    assert_eq!(meta["guidance_scale"], 3.0);
    assert_eq!(meta["steps"], 2);

    // image-to-video from the first generated frame, with STG
    let first = generated.join("frames").join(suture_core::video::frame_file_name(0));
    let first = first.to_str().unwrap();
    let printed = ok(
        dir.path(),
        &["--config", "tiny.toml", "--out", "run", "generate", "--guidance", "stg", "--first-frame", first],
    );
    let i2v = dir.path().join(String::from_utf8(printed.stdout).unwrap().trim());
    let meta: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(i2v.join("metadata.json")).unwrap()).unwrap();
    assert_eq!(meta["guidance_mode"], "stg");
    assert_eq!(meta["skip_layers"], serde_json::json!([0, 1]));

    let report = fs::read_to_string(dir.path().join("run/eval/report.json")).unwrap();
    let report = suture_core::eval::EvalReport::from_text(&report).unwrap();
    assert_eq!(report.latency_runs, 2);
    assert_eq!(report.fingerprint.steps, 2);
    let table = fs::read_to_string(dir.path().join("run/eval/table.md")).unwrap();
    assert!(table.contains(&report.table_row()));
}

#[test]
fn the_pipeline_is_bit_reproducible() {
    let dir = workspace();
    let a = pipeline(dir.path(), "a");
    let b = pipeline(dir.path(), "b");
    let (ra, rb) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(
        fs::read(ra.join("data/manifest.jsonl")).unwrap(),
        fs::read(rb.join("data/manifest.jsonl")).unwrap()
    );
    let data = files_under(&ra.join("data"));
    assert_eq!(data, files_under(&rb.join("data")));
    for f in &data {
        assert_eq!(fs::read(ra.join("data").join(f)).unwrap(), fs::read(rb.join("data").join(f)).unwrap());
    }
    assert_eq!(fs::read(ra.join("codec/codec.swt")).unwrap(), fs::read(rb.join("codec/codec.swt")).unwrap());
    assert_eq!(losses(&ra.join("train/metrics.jsonl")), losses(&rb.join("train/metrics.jsonl")));
    assert_eq!(fs::read(ra.join("train/adapter.swt")).unwrap(), fs::read(rb.join("train/adapter.swt")).unwrap());
    for f in files_under(&a.join("frames")) {
        assert_eq!(fs::read(a.join("frames").join(&f)).unwrap(), fs::read(b.join("frames").join(&f)).unwrap());
    }
    let report = |r: &Path| {
        let text = fs::read_to_string(r.join("eval/report.json")).unwrap();
        let rep = suture_core::eval::EvalReport::from_text(&text).unwrap();
        (rep.l2_loss, rep.class_adherence, rep.fingerprint)
    };
    assert_eq!(report(&ra), report(&rb));
}

#[test]
fn ingest_cuts_annotated_spans_into_bucketed_clips() {
    use suture_core::dataset::{synthesize_toy_clip, write_annotations, Action, Quality, SubStitchAnnotation, Task, ToyClipSpec};
    let dir = workspace();
    let ann = |start: f64, end: f64, quality| SubStitchAnnotation {
        session_id: "case7".into(),
        task: Task::Backhand,
        action: Action::Driving,
        quality,
        start_time: start,
        end_time: end,
    };
    let session = synthesize_toy_clip(&ToyClipSpec {
        annotation: ann(0.0, 3.3, Quality::Ideal),
        seed: 1,
        width: 32,
        height: 32,
        frame_count: 33,
    })
    .unwrap();
    suture_core::video::write_frames(&session, &dir.path().join("session")).unwrap();
    write_annotations(
        &dir.path().join("labels.jsonl"),
        &[ann(0.0, 0.9, Quality::Ideal), ann(1.2, 2.1, Quality::NonIdeal)],
    )
    .unwrap();
    let cfg = format!("{TINY}\n[ingest]\nsession = \"session\"\nannotations = \"labels.jsonl\"\nfps = 10.0\n");
    fs::write(dir.path().join("ingest.toml"), cfg).unwrap();
    ok(dir.path(), &["--config", "ingest.toml", "--out", "run", "ingest"]);
    let manifest = suture_core::dataset::DatasetManifest::read(&dir.path().join("run/data/manifest.jsonl"), 4).unwrap();
    assert_eq!(manifest.len(), 2);
    assert_eq!(manifest.records[1].caption, "A non-ideal clip of a needle driving action during a backhand task.");
    assert_eq!(manifest.records[0].frame_count, 9);

    let missing = suture(dir.path(), &["--config", "tiny.toml", "--out", "other", "ingest"]);
    assert!(stderr(&missing).contains("ingest.session"), "{}", stderr(&missing));
}
