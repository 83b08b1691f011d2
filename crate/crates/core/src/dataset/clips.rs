use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use super::{generate_caption, ClipRecord, SubStitchAnnotation};
use crate::error::{Error, Result};
use crate::video::VideoTensor;

// Guards floor() against products like 0.29 * 100 = 28.999999999999996.
const FRAME_EPS: f64 = 1e-9;

/// A clip cut from a session together with its pixels.
#[derive(Clone, Debug)]
pub struct CutClip {
    pub record: ClipRecord,
    pub frames: VideoTensor,
}

fn frame_index(seconds: f64, fps: f64) -> usize {
    (seconds * fps + FRAME_EPS).floor() as usize
}

/// Cuts one clip per annotation using the half-open frame range
/// `[floor(start·fps), floor(end·fps))`. Records point at
/// `clip_root/<clip_id>`; nothing is written to disk here.
pub fn cut_clips(
    session: &VideoTensor,
    annotations: &[SubStitchAnnotation],
    fps: f64,
    clip_root: &Path,
) -> Result<Vec<CutClip>> {
    if !(fps > 0.0 && fps.is_finite()) {
        return Err(Error::precondition(format!("fps must be positive, got {fps}")));
    }
    let total = session.frames();
    let mut out = Vec::with_capacity(annotations.len());
    for (i, ann) in annotations.iter().enumerate() {
        ann.validate()?;
        let start = frame_index(ann.start_time, fps);
        let end = frame_index(ann.end_time, fps);
        if end > total || start >= end {
            return Err(Error::SpanOutOfRange {
                session_id: ann.session_id.clone(),
                start: ann.start_time,
                end: ann.end_time,
                frames: total,
                fps,
            });
        }
        let frames = session.slice_frames(start, end)?;
        let clip_id = format!("{}-{:04}-{}", ann.session_id, i, ann.class().slug());
        let (t, h, w, _) = frames.shape();
        out.push(CutClip {
            record: ClipRecord {
                frames_path: clip_root.join(&clip_id),
                clip_id,
                caption: generate_caption(ann),
                annotation: ann.clone(),
                width: w,
                height: h,
                frame_count: t,
            },
            frames,
        });
    }
    Ok(out)
}

/// Reads one JSON annotation object per non-empty line.
pub fn read_annotations(path: &Path) -> Result<Vec<SubStitchAnnotation>> {
    let file = fs::File::open(path)?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ann: SubStitchAnnotation = serde_json::from_str(&line).map_err(|e| {
            Error::InvalidAnnotation(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        ann.validate()?;
        out.push(ann);
    }
    Ok(out)
}

pub fn write_annotations(path: &Path, annotations: &[SubStitchAnnotation]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for a in annotations {
        serde_json::to_writer(&mut f, a)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}
