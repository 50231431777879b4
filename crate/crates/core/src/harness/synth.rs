//! Procedural single-object sequences with exact ground truth.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::BoundingBox;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Rect,
    Ellipse,
    /// Drawn per sequence.
    Any,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Motion {
    Static,
    /// Center moves by `(vx, vy)` pixels per frame.
    Linear {
        vx: f64,
        vy: f64,
    },
    /// Gaussian steps of standard deviation `step`, reflected at the borders.
    RandomWalk {
        step: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SequenceConfig {
    pub frame_width: usize,
    pub frame_height: usize,
    pub frames: usize,
    /// Side range of the object's unrotated extent, pixels.
    pub object_min: f64,
    pub object_max: f64,
    pub shape: ShapeKind,
    pub motion: Motion,
    /// Initial center; frame center for linear motion, random otherwise.
    pub start: Option<[f64; 2]>,
    /// Standard deviation of additive pixel noise on the `[0, 1]` scale.
    pub noise: f64,
    /// In-plane rotation per frame, radians.
    pub rotation_drift: f64,
    /// Standard deviation of the per-frame log scale step.
    pub scale_drift: f64,
}

impl Default for SequenceConfig {
    fn default() -> Self {
        SequenceConfig {
            frame_width: 96,
            frame_height: 96,
            frames: 8,
            object_min: 12.0,
            object_max: 20.0,
            shape: ShapeKind::Any,
            motion: Motion::RandomWalk { step: 3.0 },
            start: None,
            noise: 0.02,
            rotation_drift: 0.05,
            scale_drift: 0.03,
        }
    }
}

impl SequenceConfig {
    /// Motionless, noiseless, drift-free object.
    pub fn static_clean(frames: usize) -> Self {
        SequenceConfig {
            frames,
            motion: Motion::Static,
            noise: 0.0,
            rotation_drift: 0.0,
            scale_drift: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let side = self.frame_width.min(self.frame_height) as f64;
        if self.frames == 0 || side < 1.0 {
            return Err(Error::config(
                "harness.sequence needs at least one frame of positive size",
            ));
        }
        if !(self.object_min > 0.0 && self.object_min <= self.object_max) {
            return Err(Error::config(format!(
                "harness.sequence.object_min ({}) must be positive and <= object_max ({})",
                self.object_min, self.object_max
            )));
        }
        // the diagonal bounds the extent under any rotation
        if self.object_max * 2f64.sqrt() >= side {
            return Err(Error::config(format!(
                "object of side {} does not fit a {}×{} frame",
                self.object_max, self.frame_width, self.frame_height
            )));
        }
        if !(self.noise >= 0.0) || !(self.scale_drift >= 0.0) {
            return Err(Error::config("noise and scale_drift must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticSequence {
    /// `3×H×W` images with values in `[0, 1]`.
    pub frames: Vec<Tensor<f32>>,
    pub gt: Vec<BoundingBox>,
    pub config: SequenceConfig,
    pub seed: u64,
}

impl SyntheticSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn width(&self) -> usize {
        self.config.frame_width
    }

    pub fn height(&self) -> usize {
        self.config.frame_height
    }
}

#[derive(Clone, Copy, Debug)]
struct Appearance {
    rect: bool,
    color: [f64; 3],
    stripe: [f64; 3],
    freq: f64,
    phase: f64,
    bg: [f64; 3],
    bg_waves: [(f64, f64, f64, f64); 3],
}

impl Appearance {
    fn draw(rng: &mut ChaCha8Rng, shape: ShapeKind) -> Self {
        let rect = match shape {
            ShapeKind::Rect => true,
            ShapeKind::Ellipse => false,
            ShapeKind::Any => rng.random_bool(0.5),
        };
        let mut col = |lo: f64, hi: f64| [0; 3].map(|_| rng.random_range(lo..hi));
        let color = col(0.6, 1.0);
        let stripe = col(0.0, 0.4);
        let bg = col(0.2, 0.45);
        let bg_waves = [0; 3].map(|_| {
            (
                rng.random_range(0.05..0.3),
                rng.random_range(0.05..0.3),
                rng.random_range(0.0..2.0 * PI),
                rng.random_range(0.03..0.1),
            )
        });
        Appearance {
            rect,
            color,
            stripe,
            freq: rng.random_range(0.5..1.2),
            phase: rng.random_range(0.0..2.0 * PI),
            bg,
            bg_waves,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Pose {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    angle: f64,
}

impl Pose {
    fn half_extent(&self, rect: bool) -> (f64, f64) {
        let (a, b) = (self.w / 2.0, self.h / 2.0);
        let (c, s) = (self.angle.cos().abs(), self.angle.sin().abs());
        if rect {
            (a * c + b * s, a * s + b * c)
        } else {
            ((a * c).hypot(b * s), (a * s).hypot(b * c))
        }
    }

    fn bbox(&self, rect: bool) -> BoundingBox {
        let (ex, ey) = self.half_extent(rect);
        BoundingBox {
            x1: self.cx - ex,
            y1: self.cy - ey,
            x2: self.cx + ex,
            y2: self.cy + ey,
        }
    }
}

fn reflect_into(v: f64, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        return (lo + hi) / 2.0;
    }
    let span = hi - lo;
    let mut t = (v - lo).rem_euclid(2.0 * span);
    if t > span {
        t = 2.0 * span - t;
    }
    lo + t
}

fn render(
    app: &Appearance,
    pose: &Pose,
    cfg: &SequenceConfig,
    noise: &mut Option<(Normal<f64>, ChaCha8Rng)>,
) -> Tensor<f32> {
    let (w, h) = (cfg.frame_width, cfg.frame_height);
    let mut img = vec![0f32; 3 * w * h];
    let (sin, cos) = pose.angle.sin_cos();
    for py in 0..h {
        for px in 0..w {
            let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
            let (dx, dy) = (x - pose.cx, y - pose.cy);
            let u = dx * cos + dy * sin;
            let v = -dx * sin + dy * cos;
            let (a, b) = (pose.w / 2.0, pose.h / 2.0);
            let inside = if app.rect {
                u.abs() <= a && v.abs() <= b
            } else {
                (u / a).powi(2) + (v / b).powi(2) <= 1.0
            };
            for ch in 0..3 {
                let val = if inside {
                    let t = 0.5 + 0.5 * (app.freq * (u + 0.5 * v) + app.phase).sin();
                    app.color[ch] * (1.0 - 0.5 * t) + app.stripe[ch] * 0.5 * t
                } else {
                    let (fx, fy, ph, amp) = app.bg_waves[ch];
                    app.bg[ch] + amp * (fx * x + ph).sin() * (fy * y).cos()
                };
                let val = match noise {
                    Some((dist, rng)) => val + dist.sample(rng),
                    None => val,
                };
                img[(ch * h + py) * w + px] = val.clamp(0.0, 1.0) as f32;
            }
        }
    }
    Tensor::new(&[3, h, w], img).expect("frame shape is positive")
}

/// Deterministic in `(cfg, seed)`.
pub fn gen_sequence(cfg: &SequenceConfig, seed: u64) -> Result<SyntheticSequence> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let app = Appearance::draw(&mut rng, cfg.shape);
    let (fw, fh) = (cfg.frame_width as f64, cfg.frame_height as f64);
    let w0 = rng.random_range(cfg.object_min..=cfg.object_max);
    let h0 = rng.random_range(cfg.object_min..=cfg.object_max);
    let angle0 = if cfg.rotation_drift != 0.0 {
        rng.random_range(0.0..PI)
    } else {
        0.0
    };
    let mut pose = Pose {
        cx: 0.0,
        cy: 0.0,
        w: w0,
        h: h0,
        angle: angle0,
    };
    let (ex, ey) = pose.half_extent(app.rect);
    let (cx, cy) = match (cfg.start, cfg.motion) {
        (Some([x, y]), _) => (x, y),
        (None, Motion::Linear { .. }) => (fw / 2.0, fh / 2.0),
        (None, _) => (
            rng.random_range(ex..=fw - ex),
            rng.random_range(ey..=fh - ey),
        ),
    };
    pose.cx = cx;
    pose.cy = cy;

    let mut noise = (cfg.noise > 0.0).then(|| {
        let dist = Normal::new(0.0, cfg.noise).expect("noise sigma is finite");
        (dist, ChaCha8Rng::seed_from_u64(rng.random()))
    });
    let step = match cfg.motion {
        Motion::RandomWalk { step } if step > 0.0 => Some(
            Normal::new(0.0, step)
                .map_err(|e| Error::config(format!("harness.sequence.motion.step: {e}")))?,
        ),
        _ => None,
    };
    let scale = if cfg.scale_drift > 0.0 {
        Some(Normal::new(0.0, cfg.scale_drift).map_err(|e| Error::config(e.to_string()))?)
    } else {
        None
    };
    let max_side = (cfg.object_max * 1.5).min(fw.min(fh) / 2f64.sqrt() - 1.0);
    let min_side = cfg.object_min * 0.5;

    let mut frames = Vec::with_capacity(cfg.frames);
    let mut gt = Vec::with_capacity(cfg.frames);
    for t in 0..cfg.frames {
        if t > 0 {
            pose.angle += cfg.rotation_drift;
            if let Some(d) = &scale {
                let f = d.sample(&mut rng).exp();
                pose.w = (pose.w * f).clamp(min_side, max_side);
                pose.h = (pose.h * f).clamp(min_side, max_side);
            }
            let (ex, ey) = pose.half_extent(app.rect);
            match cfg.motion {
                Motion::Static => {}
                Motion::Linear { vx, vy } => {
                    pose.cx = cx + vx * t as f64;
                    pose.cy = cy + vy * t as f64;
                }
                Motion::RandomWalk { .. } => {
                    if let Some(d) = &step {
                        pose.cx += d.sample(&mut rng);
                        pose.cy += d.sample(&mut rng);
                    }
                    pose.cx = reflect_into(pose.cx, ex, fw - ex);
                    pose.cy = reflect_into(pose.cy, ey, fh - ey);
                }
            }
        }
        let bbox = pose.bbox(app.rect);
        if !bbox.is_within(fw, fh) {
            return Err(Error::config(format!(
                "object leaves the {}×{} frame at frame {t}: {bbox:?}",
                cfg.frame_width, cfg.frame_height
            )));
        }
        frames.push(render(&app, &pose, cfg, &mut noise));
        gt.push(bbox);
    }
    Ok(SyntheticSequence {
        frames,
        gt,
        config: *cfg,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn static_clean_frames_are_identical() {
        let s = gen_sequence(&SequenceConfig::static_clean(4), 3).unwrap();
        for t in 1..4 {
            assert!(s.frames[t].bit_eq(&s.frames[0]));
            assert_eq!(s.gt[t], s.gt[0]);
        }
    }

    #[test]
    fn same_seed_same_sequence() {
        let cfg = SequenceConfig::default();
        let a = gen_sequence(&cfg, 11).unwrap();
        let b = gen_sequence(&cfg, 11).unwrap();
        assert!(a.frames.iter().zip(&b.frames).all(|(x, y)| x.bit_eq(y)));
        assert_eq!(a.gt, b.gt);
        let c = gen_sequence(&cfg, 12).unwrap();
        assert!(!a.frames[0].bit_eq(&c.frames[0]));
    }

    #[test]
    fn linear_motion_follows_line() {
        let cfg = SequenceConfig {
            frames: 6,
            motion: Motion::Linear { vx: 2.5, vy: -1.0 },
            rotation_drift: 0.0,
            scale_drift: 0.0,
            ..SequenceConfig::default()
        };
        let s = gen_sequence(&cfg, 5).unwrap();
        for (t, b) in s.gt.iter().enumerate() {
            let (x, y) = b.center();
            assert!((x - (48.0 + 2.5 * t as f64)).abs() < 1e-12);
            assert!((y - (48.0 - 1.0 * t as f64)).abs() < 1e-12);
        }
    }

    #[test]
    fn oversized_object_is_config_error() {
        let cfg = SequenceConfig {
            object_min: 70.0,
            object_max: 80.0,
            ..SequenceConfig::default()
        };
        assert!(matches!(gen_sequence(&cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn leaving_the_frame_is_config_error() {
        let cfg = SequenceConfig {
            frames: 40,
            motion: Motion::Linear { vx: 3.0, vy: 0.0 },
            ..SequenceConfig::default()
        };
        assert!(matches!(gen_sequence(&cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn boxes_stay_inside_under_drift() {
        let cfg = SequenceConfig {
            frames: 30,
            motion: Motion::RandomWalk { step: 8.0 },
            scale_drift: 0.1,
            rotation_drift: 0.3,
            ..SequenceConfig::default()
        };
        for seed in 0..5 {
            let s = gen_sequence(&cfg, seed).unwrap();
            assert!(s.gt.iter().all(|b| b.is_within(96.0, 96.0) && b.x1 <= b.x2));
        }
    }

    #[test]
    fn reflect_stays_in_range() {
        assert_eq!(reflect_into(12.0, 0.0, 10.0), 8.0);
        assert_eq!(reflect_into(-3.0, 0.0, 10.0), 3.0);
        assert_eq!(reflect_into(5.0, 0.0, 10.0), 5.0);
    }
}
