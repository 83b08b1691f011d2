//! Sub-stitch taxonomy, captions, clip cutting, manifests, and the synthetic
//! clip generator with its tracking oracle.

mod caption;
mod clips;
mod manifest;
mod oracle;
mod synth;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use caption::{generate_caption, parse_caption};
pub use clips::{cut_clips, read_annotations, write_annotations, CutClip};
pub use manifest::{build_manifest, Bucket, DatasetManifest};
pub use oracle::{
    calibrate_jerk_threshold, jerk_statistic, oracle_classify, track_centroids, OracleConfig,
};
pub use synth::{synthesize_toy_clip, ToyClipSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Railroad,
    Backhand,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Positioning,
    Targeting,
    Driving,
    Withdrawal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quality {
    Ideal,
    NonIdeal,
}

impl Task {
    pub const ALL: [Task; 2] = [Task::Railroad, Task::Backhand];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Railroad => "railroad",
            Task::Backhand => "backhand",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl Action {
    pub const ALL: [Action; 4] = [
        Action::Positioning,
        Action::Targeting,
        Action::Driving,
        Action::Withdrawal,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Action::Positioning => "positioning",
            Action::Targeting => "targeting",
            Action::Driving => "driving",
            Action::Withdrawal => "withdrawal",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl Quality {
    pub const ALL: [Quality; 2] = [Quality::Ideal, Quality::NonIdeal];

    pub fn as_str(self) -> &'static str {
        match self {
            Quality::Ideal => "ideal",
            Quality::NonIdeal => "non_ideal",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

macro_rules! impl_from_str {
    ($ty:ty, $what:literal) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                <$ty>::ALL
                    .into_iter()
                    .find(|v| v.as_str() == s)
                    .ok_or_else(|| Error::InvalidAnnotation(format!("unknown {} {s:?}", $what)))
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

impl_from_str!(Task, "task");
impl_from_str!(Action, "action");
impl_from_str!(Quality, "quality");

/// One of the 16 caption classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ClassTriple {
    pub quality: Quality,
    pub action: Action,
    pub task: Task,
}

impl ClassTriple {
    pub const COUNT: usize = 16;

    pub fn new(quality: Quality, action: Action, task: Task) -> Self {
        ClassTriple {
            quality,
            action,
            task,
        }
    }

    /// All classes in `quality`-major, `action`, `task`-minor order.
    pub fn all() -> Vec<ClassTriple> {
        let mut out = Vec::with_capacity(Self::COUNT);
        for q in Quality::ALL {
            for a in Action::ALL {
                for t in Task::ALL {
                    out.push(ClassTriple::new(q, a, t));
                }
            }
        }
        out
    }

    pub fn index(self) -> usize {
        self.quality.index() * 8 + self.action.index() * 2 + self.task.index()
    }

    pub fn from_index(i: usize) -> Option<ClassTriple> {
        (i < Self::COUNT).then(|| {
            ClassTriple::new(Quality::ALL[i / 8], Action::ALL[(i / 2) % 4], Task::ALL[i % 2])
        })
    }

    pub fn caption(self) -> String {
        caption::caption_for(self.quality, self.action, self.task)
    }

    pub fn slug(self) -> String {
        format!("{}-{}-{}", self.quality, self.action, self.task)
    }
}

/// One expert label over a session video.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubStitchAnnotation {
    pub session_id: String,
    pub task: Task,
    pub action: Action,
    pub quality: Quality,
    pub start_time: f64,
    pub end_time: f64,
}

impl SubStitchAnnotation {
    pub fn class(&self) -> ClassTriple {
        ClassTriple::new(self.quality, self.action, self.task)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.start_time.is_finite() && self.end_time.is_finite()) {
            return Err(Error::InvalidAnnotation(format!(
                "{}: non-finite time span",
                self.session_id
            )));
        }
        if self.start_time < 0.0 || self.start_time >= self.end_time {
            return Err(Error::InvalidAnnotation(format!(
                "{}: need 0 <= start_time < end_time, got [{}, {})",
                self.session_id, self.start_time, self.end_time
            )));
        }
        Ok(())
    }
}

/// A captioned clip stored as a frame directory.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipRecord {
    pub clip_id: String,
    pub frames_path: std::path::PathBuf,
    pub caption: String,
    pub annotation: SubStitchAnnotation,
    pub width: usize,
    pub height: usize,
    pub frame_count: usize,
}

impl ClipRecord {
    pub fn bucket(&self) -> Bucket {
        Bucket::new(self.width, self.height, self.frame_count)
    }

    pub fn validate(&self) -> Result<()> {
        self.annotation.validate()?;
        if self.frame_count == 0 || self.width == 0 || self.height == 0 {
            return Err(Error::InvalidAnnotation(format!(
                "{}: empty clip dimensions",
                self.clip_id
            )));
        }
        if self.caption != generate_caption(&self.annotation) {
            return Err(Error::MalformedCaption(self.caption.clone()));
        }
        Ok(())
    }
}
