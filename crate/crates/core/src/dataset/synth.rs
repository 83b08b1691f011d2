//! Procedural stand-in for laparoscopic footage.
//!
//! Each clip is a semicircular "needle" stroke moving over a horizontal
//! "tissue" line. Channels are disjoint by construction: red carries the
//! needle, green the tissue, blue the remaining background. The action picks
//! the motion segment, the task its horizontal direction (railroad moves
//! left to right; backhand is the exact mirror image), and the quality the
//! path shape: ideal clips follow a smooth circular arc while rotating,
//! non-ideal clips follow a straight line with a fixed orientation plus
//! seeded per-frame jitter.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Action, Quality, SubStitchAnnotation, Task};
use crate::error::{Error, Result};
use crate::video::VideoTensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyClipSpec {
    pub annotation: SubStitchAnnotation,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub frame_count: usize,
}

const TISSUE_V: f64 = 0.62;
const TISSUE_HALF_WIDTH: f64 = 0.025;
const NEEDLE_RADIUS: f64 = 0.11;
const NEEDLE_HALF_WIDTH: f64 = 0.04;
const ARC_SAGITTA: f64 = 0.08;
const JITTER_STD: f64 = 0.03;
const ANGLE_JITTER_STD: f64 = 0.15;
const KEYFRAME_SPREAD: f64 = 0.04;
const ANGLE_SPREAD: f64 = 0.3;

struct Keyframes {
    start: (f64, f64),
    end: (f64, f64),
    angle_start: f64,
    angle_end: f64,
}

// Normalized (u, v) positions for the railroad direction.
fn keyframes(action: Action) -> Keyframes {
    match action {
        Action::Positioning => Keyframes {
            start: (0.36, 0.30),
            end: (0.58, 0.30),
            angle_start: FRAC_PI_2,
            angle_end: PI,
        },
        Action::Targeting => Keyframes {
            start: (0.24, 0.20),
            end: (0.60, 0.47),
            angle_start: FRAC_PI_4,
            angle_end: FRAC_PI_4 + 0.5,
        },
        Action::Driving => Keyframes {
            start: (0.28, 0.50),
            end: (0.70, 0.72),
            angle_start: 0.3,
            angle_end: 0.3 + FRAC_PI_2,
        },
        Action::Withdrawal => Keyframes {
            start: (0.40, 0.72),
            end: (0.80, 0.36),
            angle_start: FRAC_PI_2,
            angle_end: PI,
        },
    }
}

/// Needle center and stroke orientation per frame, in pixels/radians.
fn trajectory(spec: &ToyClipSpec, rng: &mut ChaCha8Rng) -> Vec<((f64, f64), f64)> {
    let scale = spec.width.min(spec.height) as f64;
    let (w, h) = (spec.width as f64, spec.height as f64);
    let k = keyframes(spec.annotation.action);
    let mut jitter_point = |(u, v): (f64, f64)| {
        let du = rng.random_range(-KEYFRAME_SPREAD..KEYFRAME_SPREAD);
        let dv = rng.random_range(-KEYFRAME_SPREAD..KEYFRAME_SPREAD);
        ((u + du) * w, (v + dv) * h)
    };
    let p0 = jitter_point(k.start);
    let p1 = jitter_point(k.end);
    let angle_offset = rng.random_range(-ANGLE_SPREAD..ANGLE_SPREAD);
    let (a0, a1) = (k.angle_start + angle_offset, k.angle_end + angle_offset);

    let n = spec.frame_count;
    let progress = |f: usize| if n == 1 { 0.0 } else { f as f64 / (n - 1) as f64 };
    match spec.annotation.quality {
        Quality::Ideal => {
            let arc = CircularArc::through(p0, p1, ARC_SAGITTA * scale);
            (0..n)
                .map(|f| {
                    let s = progress(f);
                    (arc.at(s), a0 + s * (a1 - a0))
                })
                .collect()
        }
        Quality::NonIdeal => {
            let pos = Normal::new(0.0, JITTER_STD * scale).expect("finite std");
            let ang = Normal::new(0.0, ANGLE_JITTER_STD).expect("finite std");
            (0..n)
                .map(|f| {
                    let s = progress(f);
                    let x = p0.0 + s * (p1.0 - p0.0) + pos.sample(rng);
                    let y = p0.1 + s * (p1.1 - p0.1) + pos.sample(rng);
                    ((x, y), a0 + ang.sample(rng))
                })
                .collect()
        }
    }
}

/// Circle arc from `p0` to `p1` bulging toward negative y by `sagitta`.
struct CircularArc {
    center: (f64, f64),
    radius: f64,
    phi0: f64,
    sweep: f64,
}

impl CircularArc {
    fn through(p0: (f64, f64), p1: (f64, f64), sagitta: f64) -> Self {
        let (dx, dy) = (p1.0 - p0.0, p1.1 - p0.1);
        let chord = (dx * dx + dy * dy).sqrt();
        let mid = ((p0.0 + p1.0) / 2.0, (p0.1 + p1.1) / 2.0);
        // unit normal pointing up the image
        let mut normal = (-dy / chord, dx / chord);
        if normal.1 > 0.0 {
            normal = (-normal.0, -normal.1);
        }
        let radius = (chord * chord / 4.0 + sagitta * sagitta) / (2.0 * sagitta);
        let center = (
            mid.0 + normal.0 * (sagitta - radius),
            mid.1 + normal.1 * (sagitta - radius),
        );
        let phi0 = (p0.1 - center.1).atan2(p0.0 - center.0);
        let phi1 = (p1.1 - center.1).atan2(p1.0 - center.0);
        let mut sweep = phi1 - phi0;
        while sweep > PI {
            sweep -= 2.0 * PI;
        }
        while sweep < -PI {
            sweep += 2.0 * PI;
        }
        CircularArc {
            center,
            radius,
            phi0,
            sweep,
        }
    }

    fn at(&self, s: f64) -> (f64, f64) {
        let phi = self.phi0 + s * self.sweep;
        (
            self.center.0 + self.radius * phi.cos(),
            self.center.1 + self.radius * phi.sin(),
        )
    }
}

// Distance from (px, py) to a half circle of radius r around c covering
// angles [angle, angle + pi].
fn distance_to_stroke(px: f64, py: f64, c: (f64, f64), r: f64, angle: f64) -> f64 {
    let (dx, dy) = (px - c.0, py - c.1);
    let rel = (dy.atan2(dx) - angle).rem_euclid(2.0 * PI);
    if rel <= PI {
        ((dx * dx + dy * dy).sqrt() - r).abs()
    } else {
        let e0 = (c.0 + r * angle.cos(), c.1 + r * angle.sin());
        let e1 = (c.0 - r * angle.cos(), c.1 - r * angle.sin());
        let d0 = ((px - e0.0).powi(2) + (py - e0.1).powi(2)).sqrt();
        let d1 = ((px - e1.0).powi(2) + (py - e1.1).powi(2)).sqrt();
        d0.min(d1)
    }
}

// One-pixel anti-aliasing ramp around a stroke of the given half width.
fn coverage(distance: f64, half_width: f64) -> f64 {
    (half_width + 0.5 - distance).clamp(0.0, 1.0)
}

/// Renders the clip described by `spec`. Pure in `spec`.
pub fn synthesize_toy_clip(spec: &ToyClipSpec) -> Result<VideoTensor> {
    spec.annotation.validate()?;
    if spec.width < 8 || spec.height < 8 || spec.frame_count == 0 {
        return Err(Error::precondition(format!(
            "toy clips need at least 8x8x1 pixels, got {}x{}x{}",
            spec.width, spec.height, spec.frame_count
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let track = trajectory(spec, &mut rng);
    let (w, h) = (spec.width, spec.height);
    let scale = w.min(h) as f64;
    let radius = NEEDLE_RADIUS * scale;
    let needle_hw = NEEDLE_HALF_WIDTH * scale;
    let tissue_y = TISSUE_V * h as f64;
    let tissue_hw = TISSUE_HALF_WIDTH * scale;

    let mut data = Array4::zeros((spec.frame_count, h, w, 3));
    for (t, &(center, angle)) in track.iter().enumerate() {
        for y in 0..h {
            let py = y as f64 + 0.5;
            let tissue = coverage((py - tissue_y).abs(), tissue_hw);
            for x in 0..w {
                // backhand is rendered as the mirror image of railroad
                let xs = match spec.annotation.task {
                    Task::Railroad => x,
                    Task::Backhand => w - 1 - x,
                };
                let px = xs as f64 + 0.5;
                let needle = coverage(distance_to_stroke(px, py, center, radius, angle), needle_hw);
                let background = 1.0 - needle.max(tissue);
                data[[t, y, x, 0]] = 2.0 * needle - 1.0;
                data[[t, y, x, 1]] = 2.0 * tissue - 1.0;
                data[[t, y, x, 2]] = 2.0 * background - 1.0;
            }
        }
    }
    VideoTensor::new(data)
}
