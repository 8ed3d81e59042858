//! Procedural 28x28 digit-like glyphs: seven-segment stroke templates per
//! class with seeded jitter and noise, so nothing ever needs downloading.

use super::BaseSet;
use crate::error::{Error, Result};
use crate::rng::derive_rng;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub const GLYPH_SIZE: usize = 28;

#[derive(Clone, Copy, Debug)]
pub struct GlyphConfig {
    /// Maximum absolute translation, in pixels, per image.
    pub jitter_px: i32,
    /// Stroke intensity drawn uniformly from this range.
    pub intensity: (f64, f64),
    /// Additive Gaussian pixel noise (clipped back into [0,1]).
    pub noise_std: f64,
}

impl Default for GlyphConfig {
    fn default() -> Self {
        GlyphConfig { jitter_px: 2, intensity: (0.75, 1.0), noise_std: 0.05 }
    }
}

impl GlyphConfig {
    /// No jitter, unit intensity, no noise: every image equals its template.
    pub fn exact() -> Self {
        GlyphConfig { jitter_px: 0, intensity: (1.0, 1.0), noise_std: 0.0 }
    }
}

/// Segment rectangles (x0..=x1, y0..=y1) of a seven-segment layout in a
/// 28x28 frame: A top, B top-right, C bottom-right, D bottom, E bottom-left,
/// F top-left, G middle.
const SEGMENTS: [(usize, usize, usize, usize); 7] = [
    (9, 18, 4, 6),   // A
    (17, 19, 5, 13), // B
    (17, 19, 14, 22),// C
    (9, 18, 21, 23), // D
    (8, 10, 14, 22), // E
    (8, 10, 5, 13),  // F
    (9, 18, 12, 14), // G
];

const DIGIT_SEGMENTS: [&[usize]; 10] = [
    &[0, 1, 2, 3, 4, 5],    // 0
    &[1, 2],                // 1
    &[0, 1, 6, 4, 3],       // 2
    &[0, 1, 6, 2, 3],       // 3
    &[5, 6, 1, 2],          // 4
    &[0, 5, 6, 2, 3],       // 5
    &[0, 5, 6, 4, 3, 2],    // 6
    &[0, 1, 2],             // 7
    &[0, 1, 2, 3, 4, 5, 6], // 8
    &[0, 1, 2, 3, 5, 6],    // 9
];

/// Render the noiseless, unshifted template of one class.
pub fn glyph_template(class: usize) -> Vec<f32> {
    let mut img = vec![0.0f32; GLYPH_SIZE * GLYPH_SIZE];
    for &seg in DIGIT_SEGMENTS[class] {
        let (x0, x1, y0, y1) = SEGMENTS[seg];
        for y in y0..=y1 {
            for x in x0..=x1 {
                img[y * GLYPH_SIZE + x] = 1.0;
            }
        }
    }
    img
}

pub fn synth_glyphs(seed: u64, n_per_class: usize, class_count: usize) -> Result<BaseSet> {
    synth_glyphs_with(seed, n_per_class, class_count, &GlyphConfig::default())
}

pub fn synth_glyphs_with(
    seed: u64,
    n_per_class: usize,
    class_count: usize,
    cfg: &GlyphConfig,
) -> Result<BaseSet> {
    if class_count == 0 || class_count > 10 {
        return Err(Error::config(format!("class_count must be 1..=10, got {class_count}")));
    }
    let mut rng = derive_rng(seed, "glyphs", 0);
    let templates: Vec<Vec<f32>> = (0..class_count).map(glyph_template).collect();
    let n = n_per_class * class_count;
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % class_count;
        let dx = if cfg.jitter_px > 0 { rng.gen_range(-cfg.jitter_px..=cfg.jitter_px) } else { 0 };
        let dy = if cfg.jitter_px > 0 { rng.gen_range(-cfg.jitter_px..=cfg.jitter_px) } else { 0 };
        let intensity = if cfg.intensity.0 < cfg.intensity.1 {
            rng.gen_range(cfg.intensity.0..cfg.intensity.1)
        } else {
            cfg.intensity.0
        };
        let mut img = vec![0.0f32; GLYPH_SIZE * GLYPH_SIZE];
        for y in 0..GLYPH_SIZE {
            for x in 0..GLYPH_SIZE {
                let sy = y as i32 - dy;
                let sx = x as i32 - dx;
                if sy >= 0 && sy < GLYPH_SIZE as i32 && sx >= 0 && sx < GLYPH_SIZE as i32 {
                    let v = templates[class][sy as usize * GLYPH_SIZE + sx as usize];
                    img[y * GLYPH_SIZE + x] = (v as f64 * intensity) as f32;
                }
            }
        }
        if cfg.noise_std > 0.0 {
            for px in &mut img {
                let z: f64 = StandardNormal.sample(&mut rng);
                *px = ((*px as f64 + z * cfg.noise_std).clamp(0.0, 1.0)) as f32;
            }
        }
        images.push(img);
        labels.push(class);
    }
    Ok(BaseSet {
        images,
        labels,
        height: GLYPH_SIZE,
        width: GLYPH_SIZE,
        class_count,
        seed,
        kind: "glyphs".to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_reproduces_the_dataset() {
        let a = synth_glyphs(42, 5, 10).unwrap();
        let b = synth_glyphs(42, 5, 10).unwrap();
        assert_eq!(a.images, b.images);
        assert_eq!(a.labels, b.labels);
        let c = synth_glyphs(43, 5, 10).unwrap();
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn zero_jitter_collapses_to_templates() {
        let ds = synth_glyphs_with(7, 3, 4, &GlyphConfig::exact()).unwrap();
        for (img, &label) in ds.images.iter().zip(&ds.labels) {
            assert_eq!(img, &glyph_template(label));
        }
    }

    #[test]
    fn pixels_stay_in_unit_range_and_classes_cycle() {
        let ds = synth_glyphs(3, 20, 10).unwrap();
        assert_eq!(ds.images.len(), 200);
        for img in &ds.images {
            assert!(img.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
        for c in 0..10 {
            assert_eq!(ds.labels.iter().filter(|&&l| l == c).count(), 20);
        }
    }

    #[test]
    fn class_count_over_ten_is_config_error() {
        assert!(synth_glyphs(0, 1, 11).is_err());
        assert!(synth_glyphs(0, 1, 0).is_err());
    }

    #[test]
    fn templates_are_pairwise_distinct() {
        for a in 0..10 {
            for b in (a + 1)..10 {
                assert_ne!(glyph_template(a), glyph_template(b), "{a} vs {b}");
            }
        }
    }
}
