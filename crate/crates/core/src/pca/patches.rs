use crate::error::{Error, Result};

/// Patch geometry and the active-patch threshold.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PcaConfig {
    /// Patch side length.
    pub r: usize,
    /// Stride between patch origins.
    pub d: usize,
    /// Foreground-probability threshold at the patch center.
    pub tau: f64,
    /// Number of principal components kept.
    pub g: usize,
}

impl Default for PcaConfig {
    fn default() -> Self {
        Self { r: 16, d: 8, tau: 0.8, g: 10 }
    }
}

impl PcaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.r == 0 || self.d == 0 || self.g == 0 {
            return Err(Error::invalid("patch size, stride and component count must be positive"));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::invalid(format!("tau {} outside [0, 1]", self.tau)));
        }
        if self.g > self.r * self.r {
            return Err(Error::invalid(format!("{} components exceed patch dimension {}", self.g, self.r * self.r)));
        }
        Ok(())
    }

    /// Offset of the central pixel inside a patch: `ceil(r/2) - 1`.
    pub fn center_offset(&self) -> usize {
        self.r.div_ceil(2) - 1
    }

    pub fn dim(&self) -> usize {
        self.r * self.r
    }
}

/// Top-left corner of a patch and its central pixel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchSite {
    pub top: usize,
    pub left: usize,
    pub center: (usize, usize),
}

/// All in-bounds patch origins on an `h x w` map with stride `d`, row-major.
pub fn patch_sites(h: usize, w: usize, r: usize, d: usize) -> Result<Vec<PatchSite>> {
    if r == 0 || d == 0 {
        return Err(Error::invalid("patch size and stride must be positive"));
    }
    if r > h || r > w {
        return Err(Error::shape(format!("patch size {r} exceeds feature map {h}x{w}")));
    }
    let c = r.div_ceil(2) - 1;
    let mut out = Vec::new();
    for top in (0..=h - r).step_by(d) {
        for left in (0..=w - r).step_by(d) {
            out.push(PatchSite { top, left, center: (top + c, left + c) });
        }
    }
    Ok(out)
}

/// Flat indices of a patch's pixels within a row-major plane starting at `plane_offset`.
pub fn patch_indices(site: &PatchSite, w: usize, r: usize, plane_offset: usize) -> impl Iterator<Item = usize> {
    let base = plane_offset + site.top * w + site.left;
    (0..r).flat_map(move |y| (0..r).map(move |x| base + y * w + x))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub site: PatchSite,
    pub values: Vec<f64>,
}

/// Row-major flattened patches of one `h x w` feature map.
pub fn extract_patches(feature: &[f64], h: usize, w: usize, r: usize, d: usize) -> Result<Vec<Patch>> {
    if feature.len() != h * w {
        return Err(Error::shape(format!("feature of {} values is not {h}x{w}", feature.len())));
    }
    Ok(patch_sites(h, w, r, d)?
        .into_iter()
        .map(|site| Patch { site, values: patch_indices(&site, w, r, 0).map(|i| feature[i]).collect() })
        .collect())
}

/// Sites whose central pixel has foreground probability strictly above `tau`.
pub fn filter_active<'a>(
    sites: impl IntoIterator<Item = &'a PatchSite>,
    fg_prob: &[f64],
    w: usize,
    tau: f64,
) -> Vec<PatchSite> {
    sites.into_iter().filter(|s| fg_prob[s.center.0 * w + s.center.1] > tau).copied().collect()
}

/// Patches whose central pixel has foreground probability strictly above `tau`.
pub fn filter_active_patches(patches: Vec<Patch>, fg_prob: &[f64], w: usize, tau: f64) -> Vec<Patch> {
    patches.into_iter().filter(|p| fg_prob[p.site.center.0 * w + p.site.center.1] > tau).collect()
}

/// Foreground probability `1 - p(background)` of one slice of `[N, K, H, W]` probabilities.
pub fn foreground_probability(probs: &[f64], k: usize, hw: usize, slice: usize) -> Vec<f64> {
    probs[slice * k * hw..slice * k * hw + hw].iter().map(|p| 1.0 - p).collect()
}
