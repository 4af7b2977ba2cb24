//! Procedural "shapes" datasets for desk-scale runs.
//!
//! Each class is a texture pattern drawn inside a square object placed on a
//! noisy background. Classes also carry a preferred colour, which is only a
//! soft cue: a fraction of objects take a random palette colour instead.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{ClassId, Dataset, LabeledImage};
use crate::image::Image;
use crate::rng::{rng_for, stream, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Pattern {
    HStripes,
    VStripes,
    Checker,
    Disc,
    Diag,
    Ring,
    Dots,
    AntiDiag,
    Cross,
    Solid,
}

const PATTERNS: [(Pattern, &str); 10] = [
    (Pattern::HStripes, "hstripes"),
    (Pattern::VStripes, "vstripes"),
    (Pattern::Checker, "checker"),
    (Pattern::Disc, "disc"),
    (Pattern::Diag, "diag"),
    (Pattern::Ring, "ring"),
    (Pattern::Dots, "dots"),
    (Pattern::AntiDiag, "antidiag"),
    (Pattern::Cross, "cross"),
    (Pattern::Solid, "solid"),
];

const PALETTE: [[f32; 3]; 3] = [[0.85, 0.2, 0.2], [0.2, 0.75, 0.25], [0.2, 0.35, 0.9]];

pub const MAX_CLASSES: usize = PATTERNS.len();

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapesConfig {
    pub classes: usize,
    pub size: usize,
    pub min_object: usize,
    pub max_object: usize,
    /// Probability that an object ignores its class colour.
    pub color_noise: f32,
    pub pixel_noise: f32,
    /// Periodic textures are drawn at a random integer scale in
    /// `1..=max_texel`.
    pub max_texel: usize,
}

impl Default for ShapesConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            size: 16,
            min_object: 7,
            max_object: 11,
            color_noise: 0.35,
            pixel_noise: 0.06,
            max_texel: 2,
        }
    }
}

pub fn class_names(classes: usize) -> Vec<String> {
    PATTERNS[..classes].iter().map(|p| p.1.to_string()).collect()
}

impl ShapesConfig {
    pub fn render(&self, class: ClassId, rng: &mut Rng) -> Image {
        let n = self.size;
        let noise = Normal::new(0.0f32, self.pixel_noise).unwrap();
        let base: f32 = rng.gen_range(0.3..0.7);
        let bg = [
            base + rng.gen_range(-0.08..0.08),
            base + rng.gen_range(-0.08..0.08),
            base + rng.gen_range(-0.08..0.08),
        ];
        let color = if rng.gen::<f32>() < self.color_noise {
            *PALETTE.choose(rng).unwrap()
        } else {
            PALETTE[class as usize % PALETTE.len()]
        };
        let gain: f32 = rng.gen_range(0.85..1.05);
        let s = rng.gen_range(self.min_object..=self.max_object.min(n));
        let top = rng.gen_range(0..=n - s);
        let left = rng.gen_range(0..=n - s);
        let (ph1, ph2) = (rng.gen_range(0..4usize), rng.gen_range(0..4usize));
        let texel = rng.gen_range(1..=self.max_texel.max(1));
        let pattern = PATTERNS[class as usize].0;
        let mut img = Image::zeros(n, n);
        for y in 0..n {
            for x in 0..n {
                let inside = (top..top + s).contains(&y) && (left..left + s).contains(&x);
                let px = if inside {
                    let (v, u) = (y - top, x - left);
                    match shade(pattern, u, v, s, texel, (ph1, ph2)) {
                        Some(true) => color.map(|c| c * gain),
                        Some(false) => color.map(|c| c * 0.25),
                        None => bg,
                    }
                } else {
                    bg
                };
                for c in 0..3 {
                    img.set(c, y, x, (px[c] + noise.sample(rng)).clamp(0.0, 1.0));
                }
            }
        }
        img
    }

    /// `per_class` images of each class, ids starting at `first_id`.
    pub fn dataset(&self, per_class: usize, seed: u64, first_id: u64) -> Dataset {
        assert!(self.classes <= MAX_CLASSES);
        let mut images = Vec::with_capacity(per_class * self.classes);
        for _ in 0..per_class {
            for c in 0..self.classes as ClassId {
                let id = first_id + images.len() as u64;
                let mut rng = rng_for(seed, &[stream::DATA, id]);
                images.push(LabeledImage {
                    id,
                    pixels: self.render(c, &mut rng),
                    label: c,
                });
            }
        }
        Dataset {
            class_names: class_names(self.classes),
            images,
        }
    }
}

/// `Some(true)` for pattern foreground, `Some(false)` for the dark object
/// fill, `None` where the background shows through.
fn shade(p: Pattern, u: usize, v: usize, s: usize, texel: usize, (ph1, ph2): (usize, usize)) -> Option<bool> {
    let c = (s as f32 - 1.0) / 2.0;
    let r = ((u as f32 - c).powi(2) + (v as f32 - c).powi(2)).sqrt();
    let (tu, tv, ts) = (u / texel, v / texel, s / texel);
    match p {
        Pattern::HStripes => Some((tv + ph1) / 2 % 2 == 0),
        Pattern::VStripes => Some((tu + ph1) / 2 % 2 == 0),
        Pattern::Checker => Some(((tu + ph1) / 2 + (tv + ph2) / 2) % 2 == 0),
        Pattern::Diag => Some((tu + tv + ph1) / 2 % 2 == 0),
        Pattern::AntiDiag => Some((tu + ts + ph1 - tv) / 2 % 2 == 0),
        Pattern::Disc => (r <= c + 0.3).then_some(true),
        Pattern::Ring => (r <= c + 0.3).then_some(r >= c - 1.7),
        Pattern::Dots => Some((tu + ph1) % 3 == 0 && (tv + ph2) % 3 == 0),
        Pattern::Cross => {
            let near = |a: usize| (a as f32 - c).abs() <= 1.0;
            (near(u) || near(v)).then_some(true)
        }
        Pattern::Solid => Some(true),
    }
}

/// An image with the caption the toy backend is trained on.
#[derive(Clone, Debug)]
pub struct CaptionedImage {
    pub image: Image,
    pub caption: String,
}

/// Broad training corpus for the toy diffusion backend: whole images captioned
/// `a photo of <name>` and collages of uniformly random crops captioned
/// `a natural collage of <name> images`. Drawn independently of any dataset
/// that is later distilled.
pub fn foundation_corpus(
    shapes: &ShapesConfig,
    per_class: usize,
    collages_per_class: usize,
    patch: usize,
    grids: &[(usize, usize)],
    seed: u64,
) -> Vec<CaptionedImage> {
    let pool = shapes.dataset(per_class, seed, 0);
    let names = class_names(shapes.classes);
    let by_class = pool.by_class();
    let mut out = Vec::new();
    for img in &pool.images {
        out.push(CaptionedImage {
            image: img.pixels.clone(),
            caption: format!("a photo of {}", names[img.label as usize]),
        });
    }
    let n = shapes.size;
    for (&class, members) in &by_class {
        let mut rng = rng_for(seed, &[stream::COLLAGE, class as u64]);
        for _ in 0..collages_per_class {
            let grid = *grids.choose(&mut rng).unwrap();
            let (ch, cw) = (n / grid.0, n / grid.1);
            let mut canvas = Image::zeros(n, n);
            for k in 0..grid.0 * grid.1 {
                let src = members.choose(&mut rng).unwrap();
                let top = rng.gen_range(0..=n - patch);
                let left = rng.gen_range(0..=n - patch);
                let cell = src.pixels.crop(top, left, patch, patch).resize(ch, cw);
                canvas.paste(&cell, (k / grid.1) * ch, (k % grid.1) * cw);
            }
            out.push(CaptionedImage {
                image: canvas,
                caption: format!("a natural collage of {} images", names[class as usize]),
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_is_deterministic_and_balanced() {
        let cfg = ShapesConfig::default();
        let a = cfg.dataset(5, 11, 0);
        let b = cfg.dataset(5, 11, 0);
        assert_eq!(a.images, b.images);
        assert_eq!(a.summary().unwrap().per_class, vec![5; 4]);
        assert!(a.images.iter().all(|i| i.pixels.is_valid()));
    }

    #[test]
    fn classes_render_differently() {
        let cfg = ShapesConfig {
            classes: 10,
            pixel_noise: 0.0,
            ..Default::default()
        };
        let mut seen = std::collections::HashSet::new();
        for c in 0..10 {
            let mut rng = rng_for(1, &[]);
            seen.insert(cfg.render(c, &mut rng).digest());
        }
        assert_eq!(seen.len(), 10);
    }

    #[test]
    fn corpus_has_both_caption_kinds() {
        let cfg = ShapesConfig::default();
        let corpus = foundation_corpus(&cfg, 3, 2, 8, &[(2, 2)], 5);
        assert_eq!(corpus.len(), 12 + 8);
        assert!(corpus.iter().any(|c| c.caption == "a natural collage of disc images"));
        assert!(corpus.iter().any(|c| c.caption == "a photo of checker"));
    }
}
