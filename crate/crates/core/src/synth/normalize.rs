use crate::error::{Error, Result};

/// Linear-interpolated percentile (`q` in `[0, 100]`) of unsorted values.
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("percentile of an empty set"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    Ok(percentile_sorted(&sorted, q))
}

fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = (q / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Maps the 1st percentile to 0 and the 99th to 1, then clips to `[0, 1]`.
pub fn normalize_intensities(volume: &mut [f64]) -> Result<()> {
    if volume.is_empty() {
        return Err(Error::invalid("empty volume"));
    }
    let mut sorted = volume.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let p1 = percentile_sorted(&sorted, 1.0);
    let p99 = percentile_sorted(&sorted, 99.0);
    if !(p99 > p1) {
        return Err(Error::invalid(format!("cannot normalize a (near-)constant volume: p1 = p99 = {p1}")));
    }
    let span = p99 - p1;
    for v in volume.iter_mut() {
        *v = ((*v - p1) / span).clamp(0.0, 1.0);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_grid_midpoint() {
        let grid: Vec<f64> = (0..=100).map(f64::from).collect();
        assert_eq!(percentile(&grid, 1.0).unwrap(), 1.0);
        assert_eq!(percentile(&grid, 99.0).unwrap(), 99.0);
        let mut v = grid.clone();
        normalize_intensities(&mut v).unwrap();
        assert!((v[50] - 0.5).abs() < 1e-15);
        assert_eq!(v[1], 0.0);
        assert_eq!(v[99], 1.0);
        // Outliers beyond p1/p99 clip.
        assert_eq!(v[0], 0.0);
        assert_eq!(v[100], 1.0);
    }

    #[test]
    fn constant_volume_is_an_error() {
        let mut v = vec![0.3; 50];
        assert!(normalize_intensities(&mut v).is_err());
    }

    #[test]
    fn idempotent_on_normalized_volume() {
        let mut v: Vec<f64> = (0..=100).map(|i| ((i as f64 - 1.0) / 98.0).clamp(0.0, 1.0)).collect();
        let before = v.clone();
        normalize_intensities(&mut v).unwrap();
        for (a, b) in v.iter().zip(&before) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
