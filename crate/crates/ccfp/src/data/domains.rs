//! Multi-domain dataset construction: rotation domains and color-label
//! correlation domains. Base examples are partitioned round-robin across
//! domains, so domains are disjoint.

use super::{count_by_domain, dataset_checksum, BaseSet, DatasetMeta, DomainDataset, Example};
use crate::error::{Error, Result};
use crate::rng::derive_rng;
use rand::Rng;
use serde_json::json;

/// Rotate about the image center with bilinear interpolation; out-of-bounds
/// samples are zero.
pub fn rotate_image(img: &[f32], h: usize, w: usize, angle_degrees: f64) -> Vec<f32> {
    let theta = angle_degrees.to_radians();
    let (sin, cos) = theta.sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            // Inverse map: source position that lands on (x, y).
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            let sx = cos * dx + sin * dy + cx;
            let sy = -sin * dx + cos * dy + cy;
            let x0 = sx.floor();
            let y0 = sy.floor();
            let fx = sx - x0;
            let fy = sy - y0;
            let mut acc = 0.0f64;
            for (oy, wy) in [(0isize, 1.0 - fy), (1, fy)] {
                for (ox, wx) in [(0isize, 1.0 - fx), (1, fx)] {
                    let ix = x0 as isize + ox;
                    let iy = y0 as isize + oy;
                    if ix >= 0 && ix < w as isize && iy >= 0 && iy < h as isize {
                        acc += wy * wx * img[iy as usize * w + ix as usize] as f64;
                    }
                }
            }
            out[y * w + x] = acc as f32;
        }
    }
    out
}

/// One domain per angle; examples are assigned round-robin, labels preserved.
pub fn make_rotated_domains(base: &BaseSet, angles: &[f64]) -> Result<DomainDataset> {
    if angles.is_empty() {
        return Err(Error::config("make_rotated_domains: empty angle list"));
    }
    let domain_ids: Vec<usize> = angles.iter().map(|&a| a.round() as usize).collect();
    let mut examples = Vec::with_capacity(base.images.len());
    for (i, (img, &label)) in base.images.iter().zip(&base.labels).enumerate() {
        let di = i % angles.len();
        let rotated = if angles[di] == 0.0 {
            img.clone()
        } else {
            rotate_image(img, base.height, base.width, angles[di])
        };
        examples.push(Example { image: rotated, label, domain_id: domain_ids[di] });
    }
    let checksum = dataset_checksum(&examples);
    let counts = count_by_domain(&examples);
    Ok(DomainDataset {
        examples,
        domain_ids,
        image_shape: [1, base.height, base.width],
        class_count: base.class_count,
        metadata: DatasetMeta {
            kind: format!("rotated-{}", base.kind),
            seed: base.seed,
            params: json!({ "angles": angles, "base": base.kind, "n": base.images.len() }),
            counts,
            checksum,
        },
    })
}

/// One domain per correlation strength. Labels are binarized (low digits as
/// class 0), flipped with probability `label_noise`, and the glyph is placed
/// in the channel matching the label with probability equal to the domain's
/// correlation, else in the other channel. Output images are 2-channel.
pub fn make_colored_domains(
    base: &BaseSet,
    correlations: &[f64],
    label_noise: f64,
    seed: u64,
) -> Result<DomainDataset> {
    if correlations.is_empty() {
        return Err(Error::config("make_colored_domains: empty correlation list"));
    }
    if correlations.iter().any(|c| !(0.0..=1.0).contains(c)) {
        return Err(Error::config(format!("correlations must lie in [0,1], got {correlations:?}")));
    }
    if base.class_count < 2 {
        return Err(Error::config("make_colored_domains: base needs at least 2 classes"));
    }
    let domain_ids: Vec<usize> = correlations.iter().map(|&c| (c * 100.0).round() as usize).collect();
    let binarize_at = base.class_count.div_ceil(2);
    let plane = base.height * base.width;

    let mut rngs: Vec<_> =
        (0..correlations.len()).map(|di| derive_rng(seed, "color", di as u64)).collect();
    let mut examples = Vec::with_capacity(base.images.len());
    for (i, (img, &raw_label)) in base.images.iter().zip(&base.labels).enumerate() {
        let di = i % correlations.len();
        let rng = &mut rngs[di];
        let mut label = usize::from(raw_label >= binarize_at);
        if rng.gen_range(0.0..1.0) < label_noise {
            label = 1 - label;
        }
        let channel =
            if rng.gen_range(0.0..1.0) < correlations[di] { label } else { 1 - label };
        let mut image = vec![0.0f32; 2 * plane];
        image[channel * plane..(channel + 1) * plane].copy_from_slice(img);
        examples.push(Example { image, label, domain_id: domain_ids[di] });
    }
    let checksum = dataset_checksum(&examples);
    let counts = count_by_domain(&examples);
    Ok(DomainDataset {
        examples,
        domain_ids,
        image_shape: [2, base.height, base.width],
        class_count: 2,
        metadata: DatasetMeta {
            kind: format!("colored-{}", base.kind),
            seed,
            params: json!({
                "correlations": correlations,
                "label_noise": label_noise,
                "base": base.kind,
                "n": base.images.len(),
            }),
            counts,
            checksum,
        },
    })
}
