//! Synthetic culture-dish scenes: a textured circular dish on a dark
//! background with small soft-edged elliptical colonies whose tint and
//! elongation depend on their class.

mod manifest;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::{BBox, GroundTruth};
use crate::neck::INPUT_MULTIPLE;
use crate::tensor::Tensor;

pub use manifest::{
    generate_dataset, load_image, load_samples, read_dataset, save_image, subset, write_dataset, AnnotationRecord,
    CategoryRecord, DatasetManifest, ImageRecord, Sample,
};

/// Brightness outside the dish.
const OUTSIDE: f64 = 0.04;
/// Mean brightness of the dish floor.
const DISH: f64 = 0.32;
/// Width of the colony edge ramp in pixels.
const EDGE_PX: f64 = 1.5;
/// Dish radius as a fraction of the image side.
const DISH_FRACTION: f64 = 0.46;

/// Per-class colour weights (mean one, so the channel mean of a colony's
/// lift equals its contrast) and minor/major axis ratio.
const SIGNATURES: [([f64; 3], f64); 5] = [
    ([1.3, 1.0, 0.7], 1.0),
    ([0.7, 1.0, 1.3], 0.6),
    ([1.0, 1.3, 0.7], 0.85),
    ([1.0, 0.7, 1.3], 0.7),
    ([1.15, 1.15, 0.7], 0.9),
];

fn signature(class: usize) -> ([f64; 3], f64) {
    SIGNATURES[class % SIGNATURES.len()]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    /// Square image side in pixels.
    pub size: usize,
    /// Inclusive range of colonies per image.
    pub colonies: (usize, usize),
    /// Range of the major semi-axis in pixels.
    pub radius: (f64, f64),
    /// Range of the brightness lift of a colony over the dish.
    pub contrast: (f64, f64),
    /// Chance that a colony is placed touching an earlier one.
    pub overlap_prob: f64,
    pub num_classes: usize,
    /// Amplitude of the low-frequency dish texture.
    pub texture: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            size: 256,
            colonies: (0, 20),
            radius: (2.0, 10.0),
            contrast: (0.05, 0.3),
            overlap_prob: 0.3,
            num_classes: 5,
            texture: 0.05,
            seed: 0,
        }
    }
}

impl SceneSpec {
    /// Well separated, clearly visible colonies of two classes.
    pub fn easy(size: usize) -> Self {
        SceneSpec {
            size,
            colonies: (2, 6),
            radius: (4.0, 12.0),
            contrast: (0.3, 0.45),
            overlap_prob: 0.0,
            num_classes: 2,
            texture: 0.02,
            seed: 0,
        }
    }

    fn dish_radius(&self) -> f64 {
        DISH_FRACTION * self.size as f64
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("scene spec: {msg}")));
        if self.size == 0 || !self.size.is_multiple_of(INPUT_MULTIPLE) {
            return bad(format!("size {} must be a positive multiple of {INPUT_MULTIPLE}", self.size));
        }
        if self.colonies.0 > self.colonies.1 {
            return bad(format!("colony range {:?} is empty", self.colonies));
        }
        let (rmin, rmax) = self.radius;
        if !(rmin >= 2.0 && rmin <= rmax) {
            return bad(format!("radius range {:?} needs 2 <= min <= max", self.radius));
        }
        if rmax >= 0.5 * self.dish_radius() {
            return bad(format!("radius {rmax} does not fit the {:.1} px dish", self.dish_radius()));
        }
        let (c0, c1) = self.contrast;
        if !(0.0 <= c0 && c0 <= c1 && c1 <= 0.5) {
            return bad(format!("contrast range {:?} must lie in [0, 0.5]", self.contrast));
        }
        if !(0.0..=1.0).contains(&self.overlap_prob) {
            return bad(format!("overlap probability {} outside [0, 1]", self.overlap_prob));
        }
        if self.num_classes == 0 {
            return bad("at least one class".into());
        }
        if !(0.0..=0.1).contains(&self.texture) {
            return bad(format!("texture amplitude {} outside [0, 0.1]", self.texture));
        }
        Ok(())
    }

    /// Spec for image `index` of a dataset, seeded from `(seed, index)`.
    pub fn for_image(&self, index: u64) -> SceneSpec {
        SceneSpec { seed: image_seed(self.seed, index), ..self.clone() }
    }
}

/// Added to the master seed for the evaluation split so it never shares
/// scenes with the training split.
pub const EVAL_SEED_OFFSET: u64 = 0x0e7a_1000;

/// Independent per-image seed: a dedicated ChaCha stream per index.
pub fn image_seed(master: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(index);
    rng.random()
}

/// One rendered colony: a rotated ellipse.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Colony {
    pub class_id: usize,
    pub cx: f64,
    pub cy: f64,
    /// Semi-axes along and across `angle`.
    pub a: f64,
    pub b: f64,
    pub angle: f64,
    pub contrast: f64,
}

impl Colony {
    /// Tight axis-aligned bound of the ellipse.
    pub fn bounds(&self) -> BBox {
        let (s, c) = self.angle.sin_cos();
        let hw = (self.a * self.a * c * c + self.b * self.b * s * s).sqrt();
        let hh = (self.a * self.a * s * s + self.b * self.b * c * c).sqrt();
        BBox::new(self.cx - hw, self.cy - hh, self.cx + hw, self.cy + hh)
    }

    /// Coverage in [0, 1] at pixel centre `(x, y)`; exactly zero on and
    /// outside the ellipse.
    pub fn alpha(&self, x: f64, y: f64) -> f64 {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (dx * c + dy * s) / self.a;
        let v = (-dx * s + dy * c) / self.b;
        let rho = (u * u + v * v).sqrt();
        ((1.0 - rho) * self.b / EDGE_PX).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    /// `[3, H, W]` RGB in [0, 1].
    pub image: Tensor<f32>,
    pub gt: GroundTruth,
    pub colonies: Vec<Colony>,
}

fn sample_colonies(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<Colony> {
    let count = rng.random_range(spec.colonies.0..=spec.colonies.1);
    let centre = spec.size as f64 / 2.0;
    let dish = spec.dish_radius();
    let mut out: Vec<Colony> = Vec::with_capacity(count);
    for _ in 0..count {
        let class_id = rng.random_range(0..spec.num_classes);
        let (_, ratio) = signature(class_id);
        let a = rng.random_range(spec.radius.0..=spec.radius.1);
        let b = (a * ratio).max(2.0f64.min(a));
        let angle = rng.random_range(0.0..std::f64::consts::PI);
        let contrast = rng.random_range(spec.contrast.0..=spec.contrast.1);
        let reach = dish - a - EDGE_PX;
        let in_dish = |x: f64, y: f64| (x - centre).hypot(y - centre) <= reach;
        let touching = !out.is_empty() && rng.random_bool(spec.overlap_prob);
        let mut placed = None;
        for _ in 0..32 {
            let (x, y) = if touching {
                let other = out[rng.random_range(0..out.len())];
                let d = 0.7 * (a + other.a);
                let t = rng.random_range(0.0..std::f64::consts::TAU);
                (other.cx + d * t.cos(), other.cy + d * t.sin())
            } else {
                let r = reach * rng.random::<f64>().sqrt();
                let t = rng.random_range(0.0..std::f64::consts::TAU);
                (centre + r * t.cos(), centre + r * t.sin())
            };
            if !in_dish(x, y) {
                continue;
            }
            let clear = out.iter().all(|o| (o.cx - x).hypot(o.cy - y) > o.a + a + 2.0);
            placed = Some((x, y));
            if touching || clear {
                break;
            }
        }
        if let Some((cx, cy)) = placed {
            out.push(Colony { class_id, cx, cy, a, b, angle, contrast });
        }
    }
    out
}

/// Renders colonies onto a textured dish. The texture and pixel noise come
/// from `seed`.
pub fn render_scene(size: usize, texture: f64, colonies: &[Colony], seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            let fx = rng.random_range(0.5..3.0) / size as f64;
            let fy = rng.random_range(0.5..3.0) / size as f64;
            (fx, fy, rng.random_range(0.0..std::f64::consts::TAU))
        })
        .collect();
    let centre = size as f64 / 2.0;
    let dish = DISH_FRACTION * size as f64;
    let plane = size * size;
    let mut img = vec![0.0f64; 3 * plane];
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let inside = ((dish - (px - centre).hypot(py - centre)) / EDGE_PX).clamp(0.0, 1.0);
            let tex: f64 = waves
                .iter()
                .map(|(fx, fy, ph)| (std::f64::consts::TAU * (fx * px + fy * py) + ph).sin())
                .sum::<f64>()
                * texture
                / 3.0;
            let floor = OUTSIDE + inside * (DISH - OUTSIDE + tex);
            let noise = rng.random_range(-0.01..0.01);
            for ch in 0..3 {
                img[ch * plane + y * size + x] = floor + noise;
            }
        }
    }
    let mut objects = Vec::with_capacity(colonies.len());
    let limit = BBox::new(centre - dish, centre - dish, centre + dish, centre + dish).clip(size as f64, size as f64);
    for col in colonies {
        let (tint, _) = signature(col.class_id);
        let bb = col.bounds();
        let x0 = bb.x1.floor().max(0.0) as usize;
        let y0 = bb.y1.floor().max(0.0) as usize;
        let x1 = (bb.x2.ceil() as usize).min(size);
        let y1 = (bb.y2.ceil() as usize).min(size);
        for y in y0..y1 {
            for x in x0..x1 {
                let al = col.alpha(x as f64 + 0.5, y as f64 + 0.5);
                if al > 0.0 {
                    for ch in 0..3 {
                        img[ch * plane + y * size + x] += al * col.contrast * tint[ch];
                    }
                }
            }
        }
        let clipped = BBox::new(bb.x1.max(limit.x1), bb.y1.max(limit.y1), bb.x2.min(limit.x2), bb.y2.min(limit.y2));
        objects.push((col.class_id, clipped));
    }
    let data = img.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect();
    Scene {
        image: Tensor::from_vec(&[3, size, size], data).expect("sized above"),
        gt: GroundTruth::new(objects),
        colonies: colonies.to_vec(),
    }
}

pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let colonies = sample_colonies(spec, &mut rng);
    Ok(render_scene(spec.size, spec.texture, &colonies, rng.random()))
}

/// Mirrors an image `[3, H, W]` and its boxes left to right.
pub fn flip_horizontal(image: &Tensor<f32>, gt: &GroundTruth) -> (Tensor<f32>, GroundTruth) {
    let s = image.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let src = image.data();
    let mut out = vec![0.0f32; src.len()];
    for row in 0..c * h {
        for x in 0..w {
            out[row * w + x] = src[row * w + w - 1 - x];
        }
    }
    let wf = w as f64;
    let objects = gt.objects.iter().map(|(k, b)| (*k, BBox::new(wf - b.x2, b.y1, wf - b.x1, b.y2))).collect();
    (Tensor::from_vec(s, out).expect("same shape"), GroundTruth::new(objects))
}

#[cfg(test)]
mod tests;
