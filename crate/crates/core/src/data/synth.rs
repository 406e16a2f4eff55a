//! Synthetic scenes of filled oriented rectangles, one colour per class.

use std::f64::consts::FRAC_PI_2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::dota::Instance;
use crate::data::image::Image;
use crate::error::{Error, Result};
use crate::geometry::{rotated_iou, ConvexPolygon, OrientedBox};

const PALETTE: [[f64; 3]; 6] = [
    [0.95, 0.30, 0.25],
    [0.30, 0.90, 0.35],
    [0.30, 0.40, 0.95],
    [0.95, 0.90, 0.30],
    [0.85, 0.35, 0.90],
    [0.30, 0.90, 0.90],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Range of the long side in pixels.
    pub long_side: [f64; 2],
    /// Range of long side / short side.
    pub aspect: [f64; 2],
    pub max_iou: f64,
    pub background: f64,
    /// Per-channel colour jitter around the class colour.
    pub jitter: f64,
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise: f64,
    /// Placement attempts per object before giving up on it.
    pub attempts: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            width: 64,
            height: 64,
            classes: 3,
            min_objects: 1,
            max_objects: 5,
            long_side: [14.0, 28.0],
            aspect: [1.2, 2.0],
            max_iou: 0.3,
            background: 0.15,
            jitter: 0.05,
            noise: 0.03,
            attempts: 100,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.width == 0 || self.height == 0 {
            return bad(format!("image size {}x{} must be positive", self.width, self.height));
        }
        if self.classes == 0 || self.classes > PALETTE.len() {
            return bad(format!(
                "synthetic classes must be in 1..={}, got {}",
                PALETTE.len(),
                self.classes
            ));
        }
        if self.min_objects > self.max_objects {
            return bad(format!(
                "min_objects {} exceeds max_objects {}",
                self.min_objects, self.max_objects
            ));
        }
        let [l0, l1] = self.long_side;
        let [a0, a1] = self.aspect;
        if !(l0 > 0.0 && l0 <= l1 && a0 >= 1.0 && a0 <= a1) {
            return bad(format!(
                "size ranges {:?} / {:?} are invalid",
                self.long_side, self.aspect
            ));
        }
        if l1 >= self.width.min(self.height) as f64 {
            return bad(format!(
                "long side {} does not fit a {}x{} image",
                l1, self.width, self.height
            ));
        }
        if !(0.0..=1.0).contains(&self.max_iou) || self.noise < 0.0 || self.jitter < 0.0 {
            return bad("max_iou must be in [0, 1] and noise levels non-negative".into());
        }
        Ok(())
    }

    pub fn class_color(&self, class: usize) -> [f64; 3] {
        PALETTE[class % PALETTE.len()]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthScene {
    pub image: Image,
    pub instances: Vec<Instance>,
    /// Set when the placement budget ran out before the drawn object count.
    pub truncated: bool,
}

/// Area of the pixel `[col, col+1] x [row, row+1]` covered by `poly`.
pub fn pixel_coverage(poly: &ConvexPolygon, row: usize, col: usize) -> f64 {
    let (x, y) = (col as f64, row as f64);
    let px = ConvexPolygon::new(vec![[x, y], [x + 1.0, y], [x + 1.0, y + 1.0], [x, y + 1.0]]).expect("unit square");
    poly.intersect(&px).map_or(0.0, |p| p.area())
}

/// Composites `bbox` with exact area anti-aliasing.
pub fn paint_box(image: &mut Image, bbox: &OrientedBox, color: [f64; 3]) -> Result<()> {
    let poly = ConvexPolygon::from_box(bbox)?;
    let corners = bbox.corners();
    let lo = |k: usize| {
        corners
            .iter()
            .map(|c| c[k])
            .fold(f64::INFINITY, f64::min)
            .floor()
            .max(0.0) as usize
    };
    let hi = |k: usize, n: usize| {
        (corners
            .iter()
            .map(|c| c[k])
            .fold(f64::NEG_INFINITY, f64::max)
            .ceil()
            .max(0.0) as usize)
            .min(n)
    };
    let (c0, c1, r0, r1) = (lo(0), hi(0, image.width), lo(1), hi(1, image.height));
    let (w, ch) = (image.width, image.channels);
    for row in r0..r1 {
        for col in c0..c1 {
            let cov = pixel_coverage(&poly, row, col);
            if cov > 0.0 {
                let base = (row * w + col) * ch;
                for k in 0..ch {
                    let target = if ch == 1 {
                        color.iter().sum::<f64>() / 3.0
                    } else {
                        color[k]
                    };
                    let px = &mut image.data_mut()[base + k];
                    *px = *px * (1.0 - cov) + target * cov;
                }
            }
        }
    }
    Ok(())
}

/// Per-scene generator: stream `index` of the seed.
pub fn scene_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn draw_box(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<OrientedBox> {
    let long = rng.random_range(cfg.long_side[0]..=cfg.long_side[1]);
    let short = long / rng.random_range(cfg.aspect[0]..=cfg.aspect[1]);
    let theta = rng.random_range(-FRAC_PI_2..FRAC_PI_2);
    let (s, c) = theta.sin_cos();
    let half_x = 0.5 * (long * c.abs() + short * s.abs());
    let half_y = 0.5 * (long * s.abs() + short * c.abs());
    let cx = rng.random_range(half_x..=cfg.width as f64 - half_x);
    let cy = rng.random_range(half_y..=cfg.height as f64 - half_y);
    OrientedBox::new(cx, cy, long, short, theta)
}

pub fn synthesize_scene(seed: u64, index: u64, cfg: &SynthConfig) -> Result<SynthScene> {
    cfg.validate()?;
    let mut rng = scene_rng(seed, index);
    let count = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let mut instances: Vec<Instance> = Vec::with_capacity(count);
    let mut truncated = false;
    for _ in 0..count {
        let mut placed = None;
        for _ in 0..cfg.attempts {
            let b = draw_box(cfg, &mut rng)?;
            if instances.iter().all(|o| rotated_iou(&o.bbox, &b) <= cfg.max_iou) {
                placed = Some(b);
                break;
            }
        }
        match placed {
            Some(bbox) => instances.push(Instance {
                class: rng.random_range(0..cfg.classes),
                bbox,
                difficult: false,
            }),
            None => truncated = true,
        }
    }
    let mut image = Image::filled(cfg.height, cfg.width, 3, cfg.background)?;
    for inst in &instances {
        let base = cfg.class_color(inst.class);
        let color = base.map(|v| (v + rng.random_range(-cfg.jitter..=cfg.jitter)).clamp(0.0, 1.0));
        paint_box(&mut image, &inst.bbox, color)?;
    }
    if cfg.noise > 0.0 {
        let normal = Normal::new(0.0, cfg.noise).map_err(|e| Error::Config(e.to_string()))?;
        for v in image.data_mut() {
            *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    Ok(SynthScene {
        image,
        instances,
        truncated,
    })
}
