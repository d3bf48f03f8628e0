use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::subject::Subject;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Smooth multiplicative inhomogeneity: `exp(sum_b a_b * exp(-|p - c_b|^2 / (2 sigma^2)))`
/// with `a_b ~ U(-amplitude, amplitude)` and `sigma = size / 2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BiasField {
    pub amplitude: f64,
    pub n_bumps: usize,
}

/// An acquisition-style intensity shift.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShiftParams {
    pub gamma: f64,
    pub bias_field: BiasField,
    pub noise_std: f64,
    pub brightness_offset: f64,
}

impl ShiftParams {
    pub fn identity() -> Self {
        Self {
            gamma: 1.0,
            bias_field: BiasField { amplitude: 0.0, n_bumps: 3 },
            noise_std: 0.0,
            brightness_offset: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(0.3..=3.0).contains(&self.gamma) {
            return Err(Error::invalid(format!("gamma {} outside [0.3, 3]", self.gamma)));
        }
        if self.noise_std < 0.0 || self.bias_field.amplitude < 0.0 {
            return Err(Error::invalid("noise and bias amplitude must be non-negative"));
        }
        Ok(())
    }

    fn stream_seed(&self, subject_seed: u64) -> u64 {
        let mut h = subject_seed ^ 0x9e37_79b9_7f4a_7c15;
        for v in [
            self.gamma.to_bits(),
            self.bias_field.amplitude.to_bits(),
            self.bias_field.n_bumps as u64,
            self.noise_std.to_bits(),
            self.brightness_offset.to_bits(),
        ] {
            h = (h ^ v).wrapping_mul(0x1000_0000_01b3).rotate_left(29);
        }
        h
    }
}

/// Slice-wise `clip(v^gamma * bias + offset + noise)`. Labels are untouched.
pub fn apply_shift(subject: &Subject, params: &ShiftParams) -> Result<Subject> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.stream_seed(subject.seed));
    let (h, w) = subject.size();
    let sigma = h.max(w) as f64 / 2.0;
    let noise = Normal::new(0.0, params.noise_std).unwrap();
    let mut data = subject.slices.data().to_vec();
    for slice in data.chunks_mut(h * w) {
        let bumps: Vec<(f64, f64, f64)> = (0..params.bias_field.n_bumps)
            .map(|_| {
                let a = if params.bias_field.amplitude > 0.0 {
                    rng.gen_range(-params.bias_field.amplitude..=params.bias_field.amplitude)
                } else {
                    0.0
                };
                (rng.gen_range(0.0..w as f64), rng.gen_range(0.0..h as f64), a)
            })
            .collect();
        for (i, v) in slice.iter_mut().enumerate() {
            let (x, y) = ((i % w) as f64, (i / w) as f64);
            let log_bias: f64 = bumps
                .iter()
                .map(|(cx, cy, a)| a * (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * sigma * sigma)).exp())
                .sum();
            let eps = if params.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            *v = (v.powf(params.gamma) * log_bias.exp() + params.brightness_offset + eps).clamp(0.0, 1.0);
        }
    }
    let mut out = subject.clone();
    out.slices = Tensor::new(subject.slices.shape().to_vec(), data)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::generate_subject;

    #[test]
    fn identity_params_leave_subject_unchanged() {
        let s = generate_subject(3, 2, 3, 32).unwrap();
        assert_eq!(apply_shift(&s, &ShiftParams::identity()).unwrap(), s);
    }

    #[test]
    fn gamma_power_law() {
        let slices = Tensor::full(&[1, 1, 2, 2], 0.5);
        let s = Subject::new("t".into(), 0, 1, 2, slices, vec![0, 1, 0, 1]).unwrap();
        let p = ShiftParams { gamma: 2.0, ..ShiftParams::identity() };
        let out = apply_shift(&s, &p).unwrap();
        assert!(out.slices.data().iter().all(|v| (v - 0.25).abs() < 1e-15));
        assert_eq!(out.labels, s.labels);
    }

    #[test]
    fn deterministic_and_label_preserving() {
        let s = generate_subject(8, 3, 3, 32).unwrap();
        let p = ShiftParams {
            gamma: 2.0,
            bias_field: BiasField { amplitude: 0.3, n_bumps: 3 },
            noise_std: 0.02,
            brightness_offset: 0.05,
        };
        let a = apply_shift(&s, &p).unwrap();
        let b = apply_shift(&s, &p).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.labels, s.labels);
        assert!(a.slices.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_ne!(a.slices, s.slices);
    }

    #[test]
    fn rejects_out_of_range_gamma() {
        let s = generate_subject(8, 1, 2, 16).unwrap();
        let p = ShiftParams { gamma: 3.5, ..ShiftParams::identity() };
        assert!(apply_shift(&s, &p).is_err());
    }
}
