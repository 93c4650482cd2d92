//! Synthetic scenes with moving solid shapes and look-alike distractors.
//!
//! Distractors copy a target's colour, shape and size but are labelled background
//! and drawn beneath every object, so a tracker relying on appearance alone is
//! attracted to them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::TrainingSequence;
use crate::error::{Error, Result};
use crate::grid::{LabelMask, RgbImage};

const PALETTE: [[u8; 3]; 8] = [
    [220, 40, 40],
    [40, 200, 60],
    [50, 80, 230],
    [230, 200, 30],
    [200, 40, 200],
    [30, 200, 210],
    [240, 130, 20],
    [150, 90, 40],
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Rect,
    Disc,
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSceneConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub objects: usize,
    pub distractors: usize,
    /// Largest per-axis displacement, in pixels, between consecutive waypoints.
    pub motion_amplitude: usize,
    /// Frames between waypoints.
    pub segment_frames: usize,
    pub object_size_min: usize,
    pub object_size_max: usize,
    pub shapes: ShapeKind,
    /// Positions are rounded to multiples of this many pixels.
    pub position_quantum: usize,
    pub seed: u64,
}

impl Default for SynthSceneConfig {
    fn default() -> Self {
        Self {
            frames: 10,
            height: 64,
            width: 64,
            objects: 1,
            distractors: 1,
            motion_amplitude: 8,
            segment_frames: 5,
            object_size_min: 12,
            object_size_max: 20,
            shapes: ShapeKind::Mixed,
            position_quantum: 1,
            seed: 0,
        }
    }
}

impl SynthSceneConfig {
    /// One motionless square on the 4-pixel lattice and no distractors.
    pub fn static_scene(seed: u64) -> Self {
        Self {
            distractors: 0,
            motion_amplitude: 0,
            object_size_min: 20,
            object_size_max: 20,
            shapes: ShapeKind::Rect,
            position_quantum: 4,
            seed,
            ..Self::default()
        }
    }

    /// A single square gliding at constant velocity along the 4-pixel lattice.
    pub fn translating_square(seed: u64) -> Self {
        Self {
            distractors: 0,
            motion_amplitude: 24,
            segment_frames: 10,
            object_size_min: 20,
            object_size_max: 20,
            shapes: ShapeKind::Rect,
            position_quantum: 4,
            seed,
            ..Self::default()
        }
    }

    /// One target and two look-alike distractors.
    pub fn distractor_scene(seed: u64) -> Self {
        Self {
            distractors: 2,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.frames == 0 {
            return bad("frame count must be positive".into());
        }
        if self.height < 16 || self.width < 16 {
            return bad(format!("scene is {}x{}, both sides must be at least 16", self.height, self.width));
        }
        if self.objects > 255 {
            return bad(format!("{} objects exceed the 255 available labels", self.objects));
        }
        if self.distractors > 0 && self.objects == 0 {
            return bad("distractors need at least one object to imitate".into());
        }
        if self.object_size_min == 0 || self.object_size_min > self.object_size_max {
            return bad(format!(
                "object size range {}..={} is empty",
                self.object_size_min, self.object_size_max
            ));
        }
        if self.object_size_max > self.height.min(self.width) {
            return bad(format!(
                "objects up to {} px do not fit in a {}x{} scene",
                self.object_size_max, self.height, self.width
            ));
        }
        if self.segment_frames == 0 || self.position_quantum == 0 {
            return bad("segment_frames and position_quantum must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shape {
    Rect,
    Disc,
}

impl Shape {
    fn covers(self, size: usize, dy: usize, dx: usize) -> bool {
        match self {
            Shape::Rect => true,
            Shape::Disc => {
                let c = (size as f64 - 1.0) / 2.0;
                let r = size as f64 / 2.0;
                (dy as f64 - c).powi(2) + (dx as f64 - c).powi(2) <= r * r
            }
        }
    }
}

struct Sprite {
    shape: Shape,
    size: usize,
    color: [u8; 3],
    /// Top-left corners at every waypoint.
    waypoints: Vec<(f64, f64)>,
}

impl Sprite {
    fn position(&self, t: usize, segment: usize, quantum: usize) -> (usize, usize) {
        let seg = (t / segment).min(self.waypoints.len() - 2);
        let frac = (t - seg * segment) as f64 / segment as f64;
        let (a, b) = (self.waypoints[seg], self.waypoints[seg + 1]);
        let snap = |v: f64| ((v / quantum as f64).round() as usize) * quantum;
        (snap(a.0 + (b.0 - a.0) * frac), snap(a.1 + (b.1 - a.1) * frac))
    }

    fn draw(&self, t: usize, cfg: &SynthSceneConfig, frame: &mut RgbImage, labels: Option<(&mut LabelMask, u8)>) {
        let (top, left) = self.position(t, cfg.segment_frames, cfg.position_quantum);
        let mut labels = labels;
        for dy in 0..self.size {
            for dx in 0..self.size {
                let (y, x) = (top + dy, left + dx);
                if y >= frame.height() || x >= frame.width() || !self.shape.covers(self.size, dy, dx) {
                    continue;
                }
                frame.set(y, x, self.color);
                if let Some((mask, id)) = labels.as_mut() {
                    let w = mask.width();
                    mask.labels_mut()[y * w + x] = *id;
                }
            }
        }
    }
}

/// Largest top-left coordinate keeping a sprite inside the frame, snapped down.
fn max_corner(extent: usize, size: usize, quantum: usize) -> f64 {
    ((extent - size) / quantum * quantum) as f64
}

fn waypoints(rng: &mut ChaCha8Rng, cfg: &SynthSceneConfig, size: usize, start: (f64, f64)) -> Vec<(f64, f64)> {
    let n = cfg.frames.div_ceil(cfg.segment_frames) + 1;
    let (ymax, xmax) = (
        max_corner(cfg.height, size, cfg.position_quantum),
        max_corner(cfg.width, size, cfg.position_quantum),
    );
    let amp = cfg.motion_amplitude as f64;
    let mut pts = vec![start];
    for _ in 1..n.max(2) {
        let (y, x) = *pts.last().expect("non-empty");
        let mut step = |v: f64, hi: f64| {
            if amp == 0.0 {
                v
            } else {
                (v + rng.gen_range(-amp..=amp)).clamp(0.0, hi)
            }
        };
        let ny = step(y, ymax);
        let nx = step(x, xmax);
        pts.push((ny, nx));
    }
    pts
}

fn random_corner(rng: &mut ChaCha8Rng, cfg: &SynthSceneConfig, size: usize) -> (f64, f64) {
    let q = cfg.position_quantum;
    let ycells = (cfg.height - size) / q;
    let xcells = (cfg.width - size) / q;
    ((rng.gen_range(0..=ycells) * q) as f64, (rng.gen_range(0..=xcells) * q) as f64)
}

fn background(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Result<RgbImage> {
    const TILE: usize = 4;
    let (th, tw) = (h.div_ceil(TILE), w.div_ceil(TILE));
    let tiles: Vec<[u8; 3]> = (0..th * tw)
        .map(|_| {
            let g = rng.gen_range(80u8..=140);
            [g, g.saturating_add(rng.gen_range(0..12)), g.saturating_sub(rng.gen_range(0..12))]
        })
        .collect();
    let mut img = RgbImage::filled(h, w, [0, 0, 0])?;
    for y in 0..h {
        for x in 0..w {
            img.set(y, x, tiles[(y / TILE) * tw + x / TILE]);
        }
    }
    Ok(img)
}

/// Renders a scene. Objects are labelled `1..=objects`, later ids drawn on top.
pub fn synth_sequence(cfg: &SynthSceneConfig) -> Result<TrainingSequence> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let bg = background(&mut rng, cfg.height, cfg.width)?;
    let mut objects = Vec::with_capacity(cfg.objects);
    for i in 0..cfg.objects {
        let size = rng.gen_range(cfg.object_size_min..=cfg.object_size_max);
        let shape = match cfg.shapes {
            ShapeKind::Rect => Shape::Rect,
            ShapeKind::Disc => Shape::Disc,
            ShapeKind::Mixed => {
                if rng.gen_bool(0.5) {
                    Shape::Rect
                } else {
                    Shape::Disc
                }
            }
        };
        let start = random_corner(&mut rng, cfg, size);
        let waypoints = waypoints(&mut rng, cfg, size, start);
        objects.push(Sprite {
            shape,
            size,
            color: PALETTE[i % PALETTE.len()],
            waypoints,
        });
    }
    let mut distractors = Vec::with_capacity(cfg.distractors);
    for d in 0..cfg.distractors {
        let target = &objects[d % cfg.objects];
        let (ty, tx) = target.waypoints[0];
        // Keep the look-alike clear of its target in the first frame.
        let mut start = None;
        for _ in 0..256 {
            let (y, x) = random_corner(&mut rng, cfg, target.size);
            if (y - ty).abs() >= target.size as f64 || (x - tx).abs() >= target.size as f64 {
                start = Some((y, x));
                break;
            }
        }
        let start = start.ok_or_else(|| {
            Error::Config(format!(
                "no room for distractor {d} beside its {}-pixel target in a {}x{} scene",
                target.size, cfg.height, cfg.width
            ))
        })?;
        let waypoints = waypoints(&mut rng, cfg, target.size, start);
        distractors.push(Sprite {
            shape: target.shape,
            size: target.size,
            color: target.color,
            waypoints,
        });
    }

    let mut frames = Vec::with_capacity(cfg.frames);
    let mut masks = Vec::with_capacity(cfg.frames);
    for t in 0..cfg.frames {
        let mut frame = bg.clone();
        let mut mask = LabelMask::background(cfg.height, cfg.width)?;
        for s in &distractors {
            s.draw(t, cfg, &mut frame, None);
        }
        for (i, s) in objects.iter().enumerate() {
            s.draw(t, cfg, &mut frame, Some((&mut mask, i as u8 + 1)));
        }
        frames.push(frame);
        masks.push(mask);
    }
    let ids = (1..=cfg.objects as u8).collect();
    TrainingSequence::new(frames, masks, ids)
}
