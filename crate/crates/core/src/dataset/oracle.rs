//! Frozen trajectory oracle for synthetic clips.
//!
//! The needle lives alone in the red channel, so tracking is a weighted
//! centroid per frame. Task comes from the sign of the net horizontal
//! displacement, quality from the mean third-difference magnitude of the
//! centroid track ("jerk") against a threshold calibrated once on generator
//! output and frozen in [`OracleConfig::default`].

use serde::{Deserialize, Serialize};

use super::{Quality, Task};
use crate::error::{Error, Result};
use crate::video::VideoTensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    /// Mean jerk (pixels / frame³) above which a clip is called non-ideal.
    pub jerk_threshold: f64,
    /// Minimum needle mass (in fully lit pixels) every frame must carry.
    pub min_mass: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            // calibrate_jerk_threshold over 100 generator clips (seeds 1000..1100,
            // all actions and tasks, 64x64x17); see tests below.
            jerk_threshold: FROZEN_JERK_THRESHOLD,
            min_mass: 1.0,
        }
    }
}

pub(crate) const FROZEN_JERK_THRESHOLD: f64 = 2.9575;

// red intensity in [0, 1] below this level carries no weight
const ACTIVATION_FLOOR: f64 = 0.25;

/// Weighted red-channel centroid `(x, y)` of every frame, in pixels.
pub fn track_centroids(clip: &VideoTensor, min_mass: f64) -> Result<Vec<(f64, f64)>> {
    let (frames, h, w, _) = clip.shape();
    let mut out = Vec::with_capacity(frames);
    for t in 0..frames {
        let frame = clip.frame(t);
        let (mut mass, mut sx, mut sy) = (0.0, 0.0, 0.0);
        for y in 0..h {
            for x in 0..w {
                let r = (frame[[y, x, 0]] + 1.0) * 0.5;
                let wgt = ((r - ACTIVATION_FLOOR) / (1.0 - ACTIVATION_FLOOR)).max(0.0);
                mass += wgt;
                sx += wgt * (x as f64 + 0.5);
                sy += wgt * (y as f64 + 0.5);
            }
        }
        if mass < min_mass {
            return Err(Error::NoTrackableObject);
        }
        out.push((sx / mass, sy / mass));
    }
    Ok(out)
}

/// Mean Euclidean norm of the third finite difference of a track.
pub fn jerk_statistic(track: &[(f64, f64)]) -> f64 {
    if track.len() < 4 {
        return 0.0;
    }
    let jerks: Vec<f64> = track
        .windows(4)
        .map(|w| {
            let jx = w[3].0 - 3.0 * w[2].0 + 3.0 * w[1].0 - w[0].0;
            let jy = w[3].1 - 3.0 * w[2].1 + 3.0 * w[1].1 - w[0].1;
            (jx * jx + jy * jy).sqrt()
        })
        .collect();
    jerks.iter().sum::<f64>() / jerks.len() as f64
}

/// Classifies a synthetic clip into `(quality, task)`.
pub fn oracle_classify(clip: &VideoTensor, config: &OracleConfig) -> Result<(Quality, Task)> {
    let track = track_centroids(clip, config.min_mass)?;
    let dx = track[track.len() - 1].0 - track[0].0;
    let task = if dx > 0.0 {
        Task::Railroad
    } else {
        Task::Backhand
    };
    let quality = if jerk_statistic(&track) > config.jerk_threshold {
        Quality::NonIdeal
    } else {
        Quality::Ideal
    };
    Ok((quality, task))
}

/// Picks the jerk threshold with the highest accuracy on labelled
/// statistics. Among equally accurate cut points the widest gap wins and
/// the threshold is its midpoint (maximum margin).
pub fn calibrate_jerk_threshold(samples: &[(f64, Quality)]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::precondition("calibration needs at least one sample"));
    }
    let mut sorted: Vec<(f64, Quality)> = samples.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total_non_ideal = sorted.iter().filter(|s| s.1 == Quality::NonIdeal).count();
    let n = sorted.len();
    // cut before index i: sorted[..i] are called ideal
    let mut best: Option<(usize, f64, f64)> = None;
    let mut ideal_below = 0usize;
    let mut non_ideal_below = 0usize;
    for i in 0..=n {
        let correct = ideal_below + (total_non_ideal - non_ideal_below);
        let (lo, hi) = match i {
            0 => (0.0, sorted[0].0),
            i if i == n => (sorted[n - 1].0, 2.0 * sorted[n - 1].0),
            i => (sorted[i - 1].0, sorted[i].0),
        };
        let gap = hi - lo;
        let better = match best {
            None => true,
            Some((c, g, _)) => correct > c || (correct == c && gap > g),
        };
        if better {
            best = Some((correct, gap, 0.5 * (lo + hi)));
        }
        if i < n {
            match sorted[i].1 {
                Quality::Ideal => ideal_below += 1,
                Quality::NonIdeal => non_ideal_below += 1,
            }
        }
    }
    Ok(best.expect("at least one cut point").2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synthesize_toy_clip, Action, SubStitchAnnotation, ToyClipSpec};

    fn spec(q: Quality, a: Action, t: Task, seed: u64) -> ToyClipSpec {
        ToyClipSpec {
            annotation: SubStitchAnnotation {
                session_id: "synthetic".into(),
                task: t,
                action: a,
                quality: q,
                start_time: 0.0,
                end_time: 1.7,
            },
            seed,
            width: 64,
            height: 64,
            frame_count: 17,
        }
    }

    fn calibration_set() -> Vec<(f64, Quality)> {
        (0..100u64)
            .map(|i| {
                let q = Quality::ALL[(i % 2) as usize];
                let a = Action::ALL[((i / 2) % 4) as usize];
                let t = Task::ALL[((i / 8) % 2) as usize];
                let clip = synthesize_toy_clip(&spec(q, a, t, 1000 + i)).unwrap();
                (jerk_statistic(&track_centroids(&clip, 1.0).unwrap()), q)
            })
            .collect()
    }

    #[test]
    fn frozen_threshold_separates_the_calibration_set() {
        let samples = calibration_set();
        let fresh = calibrate_jerk_threshold(&samples).unwrap();
        let max_ideal = samples
            .iter()
            .filter(|s| s.1 == Quality::Ideal)
            .map(|s| s.0)
            .fold(0.0, f64::max);
        let min_non_ideal = samples
            .iter()
            .filter(|s| s.1 == Quality::NonIdeal)
            .map(|s| s.0)
            .fold(f64::INFINITY, f64::min);
        assert!(max_ideal < FROZEN_JERK_THRESHOLD && FROZEN_JERK_THRESHOLD < min_non_ideal);
        assert!(max_ideal < fresh && fresh < min_non_ideal);
        assert!((fresh - FROZEN_JERK_THRESHOLD).abs() < 1e-3, "recalibrated to {fresh}");
    }

    #[test]
    fn ideal_railroad_driving_recovered_for_95_of_100_seeds() {
        let cfg = OracleConfig::default();
        let hits = (0..100)
            .filter(|&s| {
                let clip =
                    synthesize_toy_clip(&spec(Quality::Ideal, Action::Driving, Task::Railroad, s))
                        .unwrap();
                oracle_classify(&clip, &cfg).unwrap() == (Quality::Ideal, Task::Railroad)
            })
            .count();
        assert!(hits >= 95, "{hits}/100");
    }

    #[test]
    fn black_clip_is_untrackable() {
        let clip = VideoTensor::new(ndarray::Array4::from_elem((5, 16, 16, 3), -1.0)).unwrap();
        assert!(matches!(
            oracle_classify(&clip, &OracleConfig::default()),
            Err(Error::NoTrackableObject)
        ));
    }

    #[test]
    fn mirroring_flips_the_task() {
        let cfg = OracleConfig::default();
        for a in Action::ALL {
            let clip = synthesize_toy_clip(&spec(Quality::Ideal, a, Task::Railroad, 5)).unwrap();
            assert_eq!(oracle_classify(&clip, &cfg).unwrap().1, Task::Railroad);
            assert_eq!(oracle_classify(&clip.flip_horizontal(), &cfg).unwrap().1, Task::Backhand);
        }
    }

    #[test]
    fn calibration_picks_the_gap() {
        let samples = [
            (0.1, Quality::Ideal),
            (0.2, Quality::Ideal),
            (3.2, Quality::NonIdeal),
            (5.0, Quality::NonIdeal),
        ];
        let t = calibrate_jerk_threshold(&samples).unwrap();
        assert!((t - 1.7).abs() < 1e-12);
    }

    #[test]
    fn jerk_of_a_cubic_track_is_constant() {
        let track: Vec<(f64, f64)> = (0..8).map(|i| ((i as f64).powi(3), 0.0)).collect();
        assert!((jerk_statistic(&track) - 6.0).abs() < 1e-9);
        let line: Vec<(f64, f64)> = (0..8).map(|i| (2.0 * i as f64, 1.0)).collect();
        assert_eq!(jerk_statistic(&line), 0.0);
    }
}
