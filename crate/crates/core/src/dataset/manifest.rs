use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{Action, ClipRecord, Quality, SubStitchAnnotation, Task};
use crate::error::{Error, Result};

/// A `(width, height, frame_count)` training resolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Bucket {
    pub width: usize,
    pub height: usize,
    pub frame_count: usize,
}

impl Bucket {
    pub fn new(width: usize, height: usize, frame_count: usize) -> Self {
        Bucket {
            width,
            height,
            frame_count,
        }
    }

    /// Checks the first-frame-preserving temporal law `T ≡ 1 (mod f_t)`.
    pub fn check_temporal(&self, temporal_compression: usize) -> Result<()> {
        if self.frame_count == 0 || (self.frame_count - 1) % temporal_compression != 0 {
            return Err(Error::InvalidBucket(format!(
                "{self}: frame count must be 1 mod {temporal_compression}"
            )));
        }
        Ok(())
    }
}

impl fmt::Display for Bucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.width, self.height, self.frame_count)
    }
}

impl FromStr for Bucket {
    type Err = Error;

    /// Parses `WxHxT`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<_> = s.split('x').map(|p| p.trim().parse::<usize>()).collect();
        match parts.as_slice() {
            [Ok(w), Ok(h), Ok(t)] if *w > 0 && *h > 0 && *t > 0 => Ok(Bucket::new(*w, *h, *t)),
            _ => Err(Error::InvalidBucket(format!("{s:?} is not WxHxT"))),
        }
    }
}

/// Ordered clip records plus the resolution buckets they fall into.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<ClipRecord>,
    pub buckets: Vec<Bucket>,
}

#[derive(Serialize, Deserialize)]
struct ManifestLine {
    clip_id: String,
    frames_path: PathBuf,
    caption: String,
    task: Task,
    action: Action,
    quality: Quality,
    width: usize,
    height: usize,
    frame_count: usize,
    session_id: String,
    start_time: f64,
    end_time: f64,
}

/// Validates records against the declared buckets. Record order is kept;
/// the bucket list is deduplicated, sorted, and restricted to buckets that
/// hold at least one record, so a manifest can be rebuilt from its lines.
pub fn build_manifest(
    records: Vec<ClipRecord>,
    buckets: &[Bucket],
    temporal_compression: usize,
) -> Result<DatasetManifest> {
    if temporal_compression == 0 {
        return Err(Error::precondition("temporal compression must be >= 1"));
    }
    for b in buckets {
        b.check_temporal(temporal_compression)?;
    }
    let mut used: Vec<Bucket> = Vec::new();
    for r in &records {
        r.validate()?;
        let b = r.bucket();
        if !buckets.contains(&b) {
            return Err(Error::BucketMismatch {
                clip_id: r.clip_id.clone(),
                width: r.width,
                height: r.height,
                frame_count: r.frame_count,
            });
        }
        if !used.contains(&b) {
            used.push(b);
        }
    }
    used.sort();
    Ok(DatasetManifest {
        records,
        buckets: used,
    })
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// One JSON record per line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            let line = ManifestLine {
                clip_id: r.clip_id.clone(),
                frames_path: r.frames_path.clone(),
                caption: r.caption.clone(),
                task: r.annotation.task,
                action: r.annotation.action,
                quality: r.annotation.quality,
                width: r.width,
                height: r.height,
                frame_count: r.frame_count,
                session_id: r.annotation.session_id.clone(),
                start_time: r.annotation.start_time,
                end_time: r.annotation.end_time,
            };
            out.push_str(&serde_json::to_string(&line)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str, temporal_compression: usize) -> Result<Self> {
        let mut records = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let l: ManifestLine = serde_json::from_str(line)?;
            records.push(ClipRecord {
                clip_id: l.clip_id,
                frames_path: l.frames_path,
                caption: l.caption,
                annotation: SubStitchAnnotation {
                    session_id: l.session_id,
                    task: l.task,
                    action: l.action,
                    quality: l.quality,
                    start_time: l.start_time,
                    end_time: l.end_time,
                },
                width: l.width,
                height: l.height,
                frame_count: l.frame_count,
            });
        }
        let mut buckets: Vec<Bucket> = records.iter().map(ClipRecord::bucket).collect();
        buckets.sort();
        buckets.dedup();
        build_manifest(records, &buckets, temporal_compression)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, self.to_jsonl()?)?;
        Ok(())
    }

    pub fn read(path: &Path, temporal_compression: usize) -> Result<Self> {
        Self::from_jsonl(&fs::read_to_string(path)?, temporal_compression)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::generate_caption;
    use proptest::prelude::*;

    fn record(id: &str, w: usize, h: usize, t: usize) -> ClipRecord {
        let annotation = SubStitchAnnotation {
            session_id: "s1".into(),
            task: Task::Railroad,
            action: Action::Targeting,
            quality: Quality::Ideal,
            start_time: 0.5,
            end_time: 2.25,
        };
        ClipRecord {
            clip_id: id.into(),
            frames_path: PathBuf::from("clips").join(id),
            caption: generate_caption(&annotation),
            annotation,
            width: w,
            height: h,
            frame_count: t,
        }
    }

    #[test]
    fn three_records_one_bucket() {
        let b = Bucket::new(64, 64, 17);
        let recs = (0..3).map(|i| record(&format!("c{i}"), 64, 64, 17)).collect();
        let m = build_manifest(recs, &[b], 4).unwrap();
        assert_eq!(m.buckets, vec![b]);
        assert_eq!(m.len(), 3);
        assert_eq!(m.records[2].clip_id, "c2");
    }

    #[test]
    fn mismatched_record_names_the_clip() {
        let err = build_manifest(
            vec![record("ok", 64, 64, 17), record("bad", 48, 48, 17)],
            &[Bucket::new(64, 64, 17)],
            4,
        )
        .unwrap_err();
        match err {
            Error::BucketMismatch { clip_id, .. } => assert_eq!(clip_id, "bad"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn frame_count_law_is_enforced_on_buckets() {
        assert!(build_manifest(vec![], &[Bucket::new(64, 64, 18)], 4).is_err());
        assert!(build_manifest(vec![], &[Bucket::new(96, 64, 49)], 8).is_ok());
    }

    #[test]
    fn caption_must_match_annotation() {
        let mut r = record("c", 64, 64, 17);
        r.caption = "A non-ideal clip of a needle targeting action during a railroad task.".into();
        assert!(build_manifest(vec![r], &[Bucket::new(64, 64, 17)], 4).is_err());
    }

    #[test]
    fn bucket_strings_parse() {
        assert_eq!("1024x576x49".parse::<Bucket>().unwrap(), Bucket::new(1024, 576, 49));
        assert_eq!(Bucket::new(960, 444, 65).to_string(), "960x444x65");
        assert!("64x64".parse::<Bucket>().is_err());
        assert!("0x64x17".parse::<Bucket>().is_err());
    }

    proptest! {
        #[test]
        fn jsonl_round_trip(ids in proptest::collection::vec("[a-z0-9_-]{1,12}", 0..8), wide in any::<bool>()) {
            let recs: Vec<_> = ids.iter().enumerate().map(|(i, id)| {
                if wide && i % 2 == 1 { record(id, 96, 64, 17) } else { record(id, 64, 64, 17) }
            }).collect();
            let m = build_manifest(recs, &[Bucket::new(96, 64, 17), Bucket::new(64, 64, 17)], 4).unwrap();
            let back = DatasetManifest::from_jsonl(&m.to_jsonl().unwrap(), 4).unwrap();
            prop_assert_eq!(back, m);
        }
    }
}
