use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One augmentation. Geometric variants move image and label together;
/// intensity variants touch the image only.
#[derive(Clone, Debug, PartialEq)]
pub enum Transform {
    /// Shift by whole pixels `(dx, dy)`.
    Translate(i64, i64),
    /// Rotation about the image centre, degrees.
    Rotate(f64),
    /// Isotropic zoom about the image centre.
    Scale(f64),
    /// Smooth displacement: Gaussian-weighted control-point offsets.
    Elastic {
        points: Vec<(f64, f64, f64, f64)>,
        sigma: f64,
        max_disp: f64,
    },
    Gamma(f64),
    Brightness(f64),
    /// Additive noise with a fixed seed for the realization.
    Noise {
        std: f64,
        seed: u64,
    },
}

impl Transform {
    pub fn is_geometric(&self) -> bool {
        matches!(
            self,
            Transform::Translate(..) | Transform::Rotate(_) | Transform::Scale(_) | Transform::Elastic { .. }
        )
    }
}

/// Per-image stacked augmentation. Each transform is drawn independently with
/// probability `p`.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub p: f64,
    pub translate_frac: f64,
    pub rotation_deg: (f64, f64),
    pub scale: (f64, f64),
    pub elastic_grid: usize,
    pub elastic_sigma: f64,
    pub elastic_max_disp: f64,
    pub gamma: (f64, f64),
    pub brightness: f64,
    pub noise_std: f64,
    /// Translate, rotate, scale, elastic, gamma, brightness, noise.
    pub enabled: [bool; 7],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            p: 0.25,
            translate_frac: 0.10,
            rotation_deg: (-15.0, 15.0),
            scale: (0.9, 1.1),
            elastic_grid: 2,
            elastic_sigma: 10.0,
            elastic_max_disp: 3.0,
            gamma: (0.5, 2.0),
            brightness: 0.1,
            noise_std: 0.02,
            enabled: [true; 7],
        }
    }
}

impl AugmentConfig {
    /// Samples the transforms for one image, in the fixed stacking order.
    pub fn sample<R: Rng>(&self, size: (usize, usize), rng: &mut R) -> Vec<Transform> {
        let (h, w) = size;
        let mut out = Vec::new();
        let draw = |i: usize, rng: &mut R| self.enabled[i] && rng.gen::<f64>() < self.p;
        if draw(0, rng) {
            let (mx, my) = ((self.translate_frac * w as f64) as i64, (self.translate_frac * h as f64) as i64);
            out.push(Transform::Translate(rng.gen_range(-mx..=mx), rng.gen_range(-my..=my)));
        }
        if draw(1, rng) {
            out.push(Transform::Rotate(uniform(rng, self.rotation_deg)));
        }
        if draw(2, rng) {
            out.push(Transform::Scale(uniform(rng, self.scale)));
        }
        if draw(3, rng) {
            let g = self.elastic_grid.max(1);
            let mut points = Vec::with_capacity(g * g);
            for gy in 0..g {
                for gx in 0..g {
                    let cx = (gx as f64 + 0.5) * w as f64 / g as f64;
                    let cy = (gy as f64 + 0.5) * h as f64 / g as f64;
                    let m = self.elastic_max_disp;
                    points.push((cx, cy, rng.gen_range(-m..=m), rng.gen_range(-m..=m)));
                }
            }
            out.push(Transform::Elastic { points, sigma: self.elastic_sigma, max_disp: self.elastic_max_disp });
        }
        if draw(4, rng) {
            let (lo, hi) = (self.gamma.0.ln(), self.gamma.1.ln());
            out.push(Transform::Gamma(uniform(rng, (lo, hi)).exp()));
        }
        if draw(5, rng) {
            out.push(Transform::Brightness(rng.gen_range(-self.brightness..=self.brightness)));
        }
        if draw(6, rng) {
            out.push(Transform::Noise { std: rng.gen_range(0.0..=self.noise_std), seed: rng.gen() });
        }
        out
    }
}

fn uniform<R: Rng>(rng: &mut R, range: (f64, f64)) -> f64 {
    if range.1 > range.0 {
        rng.gen_range(range.0..=range.1)
    } else {
        range.0
    }
}

/// Maps an output pixel to its source coordinates.
fn source_coords(t: &Transform, x: f64, y: f64, h: usize, w: usize) -> (f64, f64) {
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    match t {
        Transform::Translate(dx, dy) => (x - *dx as f64, y - *dy as f64),
        Transform::Rotate(deg) => {
            let (s, c) = deg.to_radians().sin_cos();
            let (u, v) = (x - cx, y - cy);
            (c * u + s * v + cx, -s * u + c * v + cy)
        }
        Transform::Scale(f) => ((x - cx) / f + cx, (y - cy) / f + cy),
        Transform::Elastic { points, sigma, max_disp } => {
            let (mut dx, mut dy) = (0.0, 0.0);
            for (px, py, ox, oy) in points {
                let wgt = (-((x - px).powi(2) + (y - py).powi(2)) / (2.0 * sigma * sigma)).exp();
                dx += wgt * ox;
                dy += wgt * oy;
            }
            let mag = (dx * dx + dy * dy).sqrt();
            if mag > *max_disp {
                dx *= max_disp / mag;
                dy *= max_disp / mag;
            }
            (x + dx, y + dy)
        }
        _ => (x, y),
    }
}

/// Snaps values within 1e-9 of an integer, so exact grid maps stay exact.
fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r
    } else {
        v
    }
}

fn bilinear(img: &[f64], h: usize, w: usize, x: f64, y: f64) -> f64 {
    let (x, y) = (snap(x), snap(y));
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let px = |xi: f64, yi: f64| -> f64 {
        if xi < 0.0 || yi < 0.0 || xi >= w as f64 || yi >= h as f64 {
            0.0
        } else {
            img[yi as usize * w + xi as usize]
        }
    };
    if fx == 0.0 && fy == 0.0 {
        return px(x0, y0);
    }
    px(x0, y0) * (1.0 - fx) * (1.0 - fy)
        + px(x0 + 1.0, y0) * fx * (1.0 - fy)
        + px(x0, y0 + 1.0) * (1.0 - fx) * fy
        + px(x0 + 1.0, y0 + 1.0) * fx * fy
}

fn nearest(lbl: &[u8], h: usize, w: usize, x: f64, y: f64) -> u8 {
    let (xi, yi) = (snap(x).round(), snap(y).round());
    if xi < 0.0 || yi < 0.0 || xi >= w as f64 || yi >= h as f64 {
        0
    } else {
        lbl[yi as usize * w + xi as usize]
    }
}

/// Applies one transform to a single `h x w` image and its label map.
pub fn apply_transform(t: &Transform, image: &[f64], label: &[u8], h: usize, w: usize) -> (Vec<f64>, Vec<u8>) {
    if t.is_geometric() {
        let mut img = Vec::with_capacity(h * w);
        let mut lbl = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = source_coords(t, x as f64, y as f64, h, w);
                img.push(bilinear(image, h, w, sx, sy));
                lbl.push(nearest(label, h, w, sx, sy));
            }
        }
        return (img, lbl);
    }
    let img = match t {
        Transform::Gamma(g) => image.iter().map(|v| v.max(0.0).powf(*g).clamp(0.0, 1.0)).collect(),
        Transform::Brightness(b) => image.iter().map(|v| (v + b).clamp(0.0, 1.0)).collect(),
        Transform::Noise { std, seed } => {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(*seed);
            let n = Normal::new(0.0, *std).unwrap();
            image.iter().map(|v| (v + n.sample(&mut rng)).clamp(0.0, 1.0)).collect()
        }
        _ => unreachable!("geometric transforms handled above"),
    };
    (img, label.to_vec())
}

/// Augments every image of an `[N, 1, H, W]` batch independently.
pub fn augment_batch<R: Rng>(
    images: &Tensor,
    labels: &[u8],
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<(Tensor, Vec<u8>)> {
    let (n, c, h, w) = images.dims4()?;
    if c != 1 || labels.len() != n * h * w {
        return Err(Error::shape(format!(
            "augment_batch needs [N,1,H,W] images with matching labels, got {:?} and {} labels",
            images.shape(),
            labels.len()
        )));
    }
    let hw = h * w;
    let mut out_img = Vec::with_capacity(images.numel());
    let mut out_lbl = Vec::with_capacity(labels.len());
    for i in 0..n {
        let mut img = images.data()[i * hw..(i + 1) * hw].to_vec();
        let mut lbl = labels[i * hw..(i + 1) * hw].to_vec();
        for t in cfg.sample((h, w), rng) {
            (img, lbl) = apply_transform(&t, &img, &lbl, h, w);
        }
        out_img.extend(img);
        out_lbl.extend(lbl);
    }
    Ok((Tensor::new(images.shape().to_vec(), out_img)?, out_lbl))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::synth::generate_subject;

    fn dice(a: &[u8], b: &[u8], k: u8) -> f64 {
        let (mut inter, mut sa, mut sb) = (0.0, 0.0, 0.0);
        for (x, y) in a.iter().zip(b) {
            let (ia, ib) = (*x == k, *y == k);
            inter += (ia && ib) as u8 as f64;
            sa += ia as u8 as f64;
            sb += ib as u8 as f64;
        }
        if sa + sb == 0.0 {
            1.0
        } else {
            2.0 * inter / (sa + sb)
        }
    }

    #[test]
    fn zero_probability_is_identity() {
        let s = generate_subject(1, 2, 3, 32).unwrap();
        let cfg = AugmentConfig { p: 0.0, ..AugmentConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (img, lbl) = augment_batch(&s.slices, &s.labels, &cfg, &mut rng).unwrap();
        assert_eq!(img, s.slices);
        assert_eq!(lbl, s.labels);
    }

    #[test]
    fn half_turn_twice_is_identity() {
        let s = generate_subject(2, 2, 3, 32).unwrap();
        let cfg = AugmentConfig {
            p: 1.0,
            rotation_deg: (180.0, 180.0),
            enabled: [false, true, false, false, false, false, false],
            ..AugmentConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (once, l1) = augment_batch(&s.slices, &s.labels, &cfg, &mut rng).unwrap();
        assert_ne!(once, s.slices);
        let (twice, l2) = augment_batch(&once, &l1, &cfg, &mut rng).unwrap();
        assert_eq!(twice, s.slices);
        assert_eq!(l2, s.labels);
    }

    #[test]
    fn seeded_runs_reproduce() {
        let s = generate_subject(3, 4, 3, 32).unwrap();
        let cfg = AugmentConfig { p: 0.5, ..AugmentConfig::default() };
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            augment_batch(&s.slices, &s.labels, &cfg, &mut rng).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn intensity_transforms_leave_labels() {
        let s = generate_subject(4, 1, 3, 32).unwrap();
        let (h, w) = s.size();
        for t in [Transform::Gamma(1.7), Transform::Brightness(-0.05), Transform::Noise { std: 0.02, seed: 5 }] {
            let (img, lbl) = apply_transform(&t, s.slices.data(), &s.labels, h, w);
            assert_eq!(lbl, s.labels);
            assert_ne!(img, s.slices.data());
            assert!(img.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    /// Image encodes its own label; geometric transforms must keep them aligned.
    #[test]
    fn geometric_transforms_move_image_and_label_together() {
        let s = generate_subject(5, 1, 3, 64).unwrap();
        let (h, w) = s.size();
        let k = (s.n_classes - 1) as f64;
        let encoded: Vec<f64> = s.labels.iter().map(|l| *l as f64 / k).collect();
        let cfg = AugmentConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let elastic = loop {
            let all =
                AugmentConfig { p: 1.0, enabled: [false, false, false, true, false, false, false], ..cfg.clone() };
            if let Some(t) = all.sample((h, w), &mut rng).pop() {
                break t;
            }
        };
        let cases = [
            (Transform::Translate(6, -4), 1.0),
            (Transform::Rotate(180.0), 1.0),
            (Transform::Rotate(15.0), 0.95),
            (Transform::Rotate(-11.0), 0.95),
            (Transform::Scale(0.9), 0.95),
            (Transform::Scale(1.1), 0.95),
            (elastic, 0.95),
        ];
        for (t, min_dice) in cases {
            let (img, lbl) = apply_transform(&t, &encoded, &s.labels, h, w);
            let decoded: Vec<u8> = img.iter().map(|v| (v * k).round() as u8).collect();
            for c in 1..s.n_classes as u8 {
                let d = dice(&decoded, &lbl, c);
                assert!(d >= min_dice, "{t:?} class {c}: dice {d}");
            }
        }
    }
}
