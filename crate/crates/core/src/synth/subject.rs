use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::normalize::normalize_intensities;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A stack of 2D slices with per-pixel class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Subject {
    pub id: String,
    pub domain_id: u32,
    pub seed: u64,
    pub n_classes: usize,
    /// `[S, 1, H, W]`, intensities in `[0, 1]`.
    pub slices: Tensor,
    /// `S * H * W` class ids, row-major; 0 is background.
    pub labels: Vec<u8>,
}

impl Subject {
    pub fn new(
        id: String,
        domain_id: u32,
        seed: u64,
        n_classes: usize,
        slices: Tensor,
        labels: Vec<u8>,
    ) -> Result<Self> {
        let (_, c, _, _) = slices.dims4()?;
        if c != 1 {
            return Err(Error::shape(format!("subject slices need one channel, got {c}")));
        }
        if labels.len() != slices.numel() {
            return Err(Error::shape(format!("{} labels for {} pixels", labels.len(), slices.numel())));
        }
        if let Some(bad) = labels.iter().find(|l| **l as usize >= n_classes) {
            return Err(Error::invalid(format!("label {bad} outside 0..{n_classes}")));
        }
        Ok(Self { id, domain_id, seed, n_classes, slices, labels })
    }

    pub fn n_slices(&self) -> usize {
        self.slices.shape()[0]
    }

    /// `(height, width)`.
    pub fn size(&self) -> (usize, usize) {
        (self.slices.shape()[2], self.slices.shape()[3])
    }

    pub fn pixels_per_slice(&self) -> usize {
        let (h, w) = self.size();
        h * w
    }

    pub fn slice_labels(&self, i: usize) -> &[u8] {
        let n = self.pixels_per_slice();
        &self.labels[i * n..(i + 1) * n]
    }

    /// Slices `start..end` as an `[n, 1, H, W]` batch.
    pub fn batch(&self, start: usize, end: usize) -> Result<Tensor> {
        self.slices.slice_outer(start, end)
    }

    pub fn labels_range(&self, start: usize, end: usize) -> &[u8] {
        let n = self.pixels_per_slice();
        &self.labels[start * n..end * n]
    }
}

struct Blob {
    cx: f64,
    cy: f64,
    ra: f64,
    rb: f64,
    angle: f64,
    harmonics: [(f64, f64); 2],
}

impl Blob {
    fn contains(&self, x: f64, y: f64, scale: f64, shift: (f64, f64)) -> bool {
        let (dx, dy) = (x - self.cx - shift.0, y - self.cy - shift.1);
        let (c, s) = (self.angle.cos(), self.angle.sin());
        let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
        let theta = v.atan2(u);
        let wobble = 1.0
            + self.harmonics[0].0 * (2.0 * theta + self.harmonics[0].1).sin()
            + self.harmonics[1].0 * (3.0 * theta + self.harmonics[1].1).sin();
        let (a, b) = (self.ra * scale * wobble, self.rb * scale * wobble);
        (u / a).powi(2) + (v / b).powi(2) <= 1.0
    }
}

fn random_blob(rng: &mut ChaCha8Rng, cx: f64, cy: f64, ra: f64, aspect: (f64, f64)) -> Blob {
    Blob {
        cx,
        cy,
        ra,
        rb: ra * rng.gen_range(aspect.0..aspect.1),
        angle: rng.gen_range(0.0..std::f64::consts::PI),
        harmonics: [
            (rng.gen_range(0.0..0.12), rng.gen_range(0.0..std::f64::consts::TAU)),
            (rng.gen_range(0.0..0.08), rng.gen_range(0.0..std::f64::consts::TAU)),
        ],
    }
}

/// Smallest radius (pixels) the innermost class may have on any slice.
const MIN_INNER_RADIUS: f64 = 1.5;
const ORGAN_RADIUS: (f64, f64) = (0.20, 0.26);
const NEST_RATIO: (f64, f64) = (0.45, 0.55);
const MIN_SLICE_SCALE: f64 = 0.74;

/// A phantom volume: a body disk of background tissue containing nested
/// blob-shaped structures, one per foreground class, each in its own
/// intensity band with smooth texture and pixel noise. Deterministic in `seed`.
pub fn generate_subject(seed: u64, n_slices: usize, n_classes: usize, size: usize) -> Result<Subject> {
    if n_classes < 2 {
        return Err(Error::invalid(format!("need at least 2 classes, got {n_classes}")));
    }
    if n_slices == 0 {
        return Err(Error::invalid("need at least one slice"));
    }
    if n_classes > 255 {
        return Err(Error::invalid("at most 255 classes"));
    }
    let s = size as f64;
    let inner = s * ORGAN_RADIUS.0 * 0.75 * NEST_RATIO.0.powi(n_classes as i32 - 2) * MIN_SLICE_SCALE;
    if size < 16 || inner < MIN_INNER_RADIUS {
        return Err(Error::invalid(format!("size {size} too small for {n_classes} classes")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cx = s / 2.0 + rng.gen_range(-0.08..0.08) * s;
    let cy = s / 2.0 + rng.gen_range(-0.08..0.08) * s;
    let body = Blob {
        cx: s / 2.0,
        cy: s / 2.0,
        ra: s * rng.gen_range(0.42..0.47),
        rb: s * rng.gen_range(0.40..0.47),
        angle: 0.0,
        harmonics: [(0.0, 0.0), (0.0, 0.0)],
    };
    let organ_r = s * rng.gen_range(ORGAN_RADIUS.0..ORGAN_RADIUS.1);
    let mut blobs = vec![random_blob(&mut rng, cx, cy, organ_r, (0.75, 1.0))];
    for _ in 2..n_classes {
        let parent = blobs.last().unwrap();
        let r = parent.rb.min(parent.ra) * rng.gen_range(NEST_RATIO.0..NEST_RATIO.1);
        let off = parent.rb.min(parent.ra) - r;
        let (ox, oy) = (rng.gen_range(-0.5..0.5) * off, rng.gen_range(-0.5..0.5) * off);
        blobs.push(random_blob(&mut rng, parent.cx + ox, parent.cy + oy, r, (0.8, 1.0)));
    }
    let drift = (rng.gen_range(-0.05..0.05) * s, rng.gen_range(-0.05..0.05) * s);

    let air = 0.02;
    let mut levels = vec![0.30 + rng.gen_range(-0.03..0.03)];
    for k in 1..n_classes {
        levels.push(0.30 + 0.55 * k as f64 / (n_classes - 1) as f64 + rng.gen_range(-0.03..0.03));
    }
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.gen_range(0.01..0.025),
                rng.gen_range(1.0..4.0),
                rng.gen_range(0.0..std::f64::consts::PI),
                rng.gen_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let noise = Normal::new(0.0, 0.015).unwrap();

    let hw = size * size;
    let mut data = Vec::with_capacity(n_slices * hw);
    let mut labels = Vec::with_capacity(n_slices * hw);
    for si in 0..n_slices {
        let z = -1.0 + 2.0 * (si as f64 + 0.5) / n_slices as f64;
        let scale = (1.0 - 0.45 * z * z).sqrt();
        let shift = (drift.0 * z, drift.1 * z);
        for y in 0..size {
            for x in 0..size {
                let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
                let mut label = 0u8;
                for (k, blob) in blobs.iter().enumerate() {
                    if blob.contains(fx, fy, scale, shift) {
                        label = (k + 1) as u8;
                    } else {
                        break;
                    }
                }
                let base =
                    if label > 0 || body.contains(fx, fy, 1.0, (0.0, 0.0)) { levels[label as usize] } else { air };
                let texture: f64 = waves
                    .iter()
                    .map(|(amp, freq, dir, phase)| {
                        amp * (std::f64::consts::TAU * freq * (fx * dir.cos() + fy * dir.sin()) / s + phase + z).sin()
                    })
                    .sum();
                data.push(base + texture + noise.sample(&mut rng));
                labels.push(label);
            }
        }
    }
    normalize_intensities(&mut data)?;
    let slices = Tensor::new(vec![n_slices, 1, size, size], data)?;
    Subject::new(format!("subj-{seed}"), 0, seed, n_classes, slices, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_in_seed() {
        let a = generate_subject(42, 3, 3, 32).unwrap();
        let b = generate_subject(42, 3, 3, 32).unwrap();
        assert_eq!(a, b);
        let c = generate_subject(43, 3, 3, 32).unwrap();
        assert_ne!(a.slices, c.slices);
    }

    #[test]
    fn every_slice_contains_every_class() {
        for seed in 0..20 {
            for (k, size) in [(2, 32), (3, 64), (4, 96)] {
                let s = generate_subject(seed, 6, k, size).unwrap();
                for i in 0..s.n_slices() {
                    let mut seen = vec![false; k];
                    s.slice_labels(i).iter().for_each(|l| seen[*l as usize] = true);
                    assert!(seen.iter().all(|v| *v), "seed {seed} k {k} slice {i}: {seen:?}");
                }
            }
        }
    }

    #[test]
    fn intensities_within_unit_interval() {
        let s = generate_subject(5, 4, 3, 48).unwrap();
        let (lo, hi) = s.slices.data().iter().fold((f64::MAX, f64::MIN), |(a, b), v| (a.min(*v), b.max(*v)));
        assert!(lo >= 0.0 && hi <= 1.0);
        assert_eq!(lo, 0.0);
        assert_eq!(hi, 1.0);
    }

    #[test]
    fn rejects_bad_requests() {
        assert!(generate_subject(1, 2, 1, 32).is_err());
        assert!(generate_subject(1, 2, 3, 8).is_err());
        assert!(generate_subject(1, 2, 6, 24).is_err());
    }
}
