//! Prior files.
//!
//! `FPR1` layout (little-endian):
//!
//! | field | type |
//! |---|---|
//! | magic | `b"FPR1"` |
//! | version | `u32` (= 1) |
//! | model fingerprint | `u64` |
//! | estimator (0 Gaussian, 1 KDE) | `u8` |
//! | subject count | `u32` |
//! | per subject: id (`u32` length + UTF-8), fingerprint `u64`, CNN entries, PCA entries | |
//! | basis flag | `u8`, followed by an `FPB1` section when 1 |
//!
//! Entry lists are a `u32` count followed by records `(l: u16, c: u16, kind: u8, payload)`
//! where kind 0 carries `mu, sigma` as `f64`, kind 1 carries `u_min, u_max: f64`,
//! `n_bins: u32` and the densities, and kind 2 is kind 1 followed by the
//! log-densities. PCA records use `(channel, component)` in place of
//! `(layer, channel)`. All indices are zero-based.
//!
//! `FPB1`: magic, `r, d: u32`, `tau: f64`, `g: u32`, channel count `u32`, then per
//! channel the dimension `u32`, the mean, the component count `u32`, each component,
//! and the eigenvalues.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::pdf::{ExpertPdf, GridPdf};
use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::pca::{ChannelBasis, PcaConfig, PrincipalBasis};

const MAGIC: &[u8; 4] = b"FPR1";
const BASIS_MAGIC: &[u8; 4] = b"FPB1";
const VERSION: u32 = 1;

/// `(layer, channel)` for CNN experts, `(channel, component)` for PCA experts; zero-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ExpertKey(pub u16, pub u16);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Estimator {
    Gaussian,
    Kde,
}

impl std::str::FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(Estimator::Gaussian),
            "kde" => Ok(Estimator::Kde),
            _ => Err(Error::Config(format!("unknown estimator '{s}' (gaussian|kde)"))),
        }
    }
}

impl std::fmt::Display for Estimator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Estimator::Gaussian => "gaussian",
            Estimator::Kde => "kde",
        })
    }
}

pub type ExpertMap = BTreeMap<ExpertKey, ExpertPdf>;

#[derive(Clone, Debug, PartialEq)]
pub struct SubjectPrior {
    pub subject_id: String,
    pub model_fingerprint: u64,
    pub cnn: ExpertMap,
    /// Empty when PCA experts are disabled.
    pub pca: ExpertMap,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PriorSet {
    pub model_fingerprint: u64,
    pub estimator: Estimator,
    pub subjects: Vec<SubjectPrior>,
    pub basis: Option<PrincipalBasis>,
}

/// A loaded prior and whether its fingerprint disagreed with the expected one.
#[derive(Clone, Debug)]
pub struct LoadedPrior {
    pub set: PriorSet,
    pub fingerprint_mismatch: bool,
}

impl PriorSet {
    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.subjects.first() else {
            return Err(Error::invalid("prior set has no subjects"));
        };
        for s in &self.subjects {
            if s.model_fingerprint != self.model_fingerprint {
                return Err(Error::Fingerprint { expected: self.model_fingerprint, found: s.model_fingerprint });
            }
            if !s.cnn.keys().eq(first.cnn.keys()) || !s.pca.keys().eq(first.pca.keys()) {
                return Err(Error::invalid(format!("subject '{}' has a different expert key set", s.subject_id)));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.u64(self.model_fingerprint);
        w.u8(match self.estimator {
            Estimator::Gaussian => 0,
            Estimator::Kde => 1,
        });
        w.u32(self.subjects.len() as u32);
        for s in &self.subjects {
            w.str(&s.subject_id);
            w.u64(s.model_fingerprint);
            write_entries(&mut w, &s.cnn);
            write_entries(&mut w, &s.pca);
        }
        match &self.basis {
            None => w.u8(0),
            Some(b) => {
                w.u8(1);
                write_basis(&mut w, b);
            }
        }
        w.into_inner()
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf);
        r.expect_magic(MAGIC)?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(format!("prior version {version}, expected {VERSION}")));
        }
        let model_fingerprint = r.u64()?;
        let estimator = match r.u8()? {
            0 => Estimator::Gaussian,
            1 => Estimator::Kde,
            e => return Err(Error::format(format!("unknown estimator tag {e}"))),
        };
        let n = r.u32()? as usize;
        let mut subjects = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let subject_id = r.str()?;
            let fp = r.u64()?;
            let cnn = read_entries(&mut r)?;
            let pca = read_entries(&mut r)?;
            subjects.push(SubjectPrior { subject_id, model_fingerprint: fp, cnn, pca });
        }
        let basis = match r.u8()? {
            0 => None,
            1 => Some(read_basis(&mut r)?),
            f => return Err(Error::format(format!("bad basis flag {f}"))),
        };
        r.finish()?;
        Ok(Self { model_fingerprint, estimator, subjects, basis })
    }
}

fn write_entries(w: &mut Writer, map: &ExpertMap) {
    w.u32(map.len() as u32);
    for (k, pdf) in map {
        w.u16(k.0);
        w.u16(k.1);
        match pdf {
            ExpertPdf::Gaussian { mu, sigma } => {
                w.u8(0);
                w.f64(*mu);
                w.f64(*sigma);
            }
            ExpertPdf::Grid(g) => {
                w.u8(if g.log_densities.is_some() { 2 } else { 1 });
                w.f64(g.u_min);
                w.f64(g.u_max);
                w.u32(g.n_bins() as u32);
                w.f64s(&g.densities);
                if let Some(l) = &g.log_densities {
                    w.f64s(l);
                }
            }
        }
    }
}

fn read_entries(r: &mut Reader<'_>) -> Result<ExpertMap> {
    let n = r.u32()? as usize;
    let mut map = BTreeMap::new();
    for _ in 0..n {
        let key = ExpertKey(r.u16()?, r.u16()?);
        let pdf = match r.u8()? {
            0 => ExpertPdf::Gaussian { mu: r.f64()?, sigma: r.f64()? },
            kind @ (1 | 2) => {
                let (lo, hi) = (r.f64()?, r.f64()?);
                let bins = r.u32()? as usize;
                let d = r.f64s(bins)?;
                let mut g = GridPdf::new(lo, hi, d).map_err(|e| Error::format(e.to_string()))?;
                if kind == 2 {
                    g.log_densities = Some(r.f64s(bins)?);
                }
                ExpertPdf::Grid(g)
            }
            k => return Err(Error::format(format!("unknown expert kind {k}"))),
        };
        if map.insert(key, pdf).is_some() {
            return Err(Error::format(format!("duplicate expert key {key:?}")));
        }
    }
    Ok(map)
}

pub(crate) fn write_basis(w: &mut Writer, b: &PrincipalBasis) {
    w.bytes(BASIS_MAGIC);
    w.u32(b.config.r as u32);
    w.u32(b.config.d as u32);
    w.f64(b.config.tau);
    w.u32(b.config.g as u32);
    w.u32(b.channels.len() as u32);
    for c in &b.channels {
        w.u32(c.dim() as u32);
        w.f64s(&c.mean);
        w.u32(c.components.len() as u32);
        for comp in &c.components {
            w.f64s(comp);
        }
        w.f64s(&c.eigenvalues);
    }
}

pub(crate) fn read_basis(r: &mut Reader<'_>) -> Result<PrincipalBasis> {
    r.expect_magic(BASIS_MAGIC)?;
    let config = PcaConfig { r: r.u32()? as usize, d: r.u32()? as usize, tau: r.f64()?, g: r.u32()? as usize };
    config.validate().map_err(|e| Error::format(e.to_string()))?;
    let n = r.u32()? as usize;
    let mut channels = Vec::with_capacity(n.min(4096));
    for _ in 0..n {
        let dim = r.u32()? as usize;
        let mean = r.f64s(dim)?;
        let g = r.u32()? as usize;
        let components = (0..g).map(|_| r.f64s(dim)).collect::<Result<Vec<_>>>()?;
        let eigenvalues = r.f64s(g)?;
        channels.push(ChannelBasis { mean, components, eigenvalues });
    }
    Ok(PrincipalBasis { config, channels })
}

pub fn save_prior(path: &Path, set: &PriorSet) -> Result<()> {
    fs::write(path, set.to_bytes())?;
    Ok(())
}

/// Loads a prior. A fingerprint differing from `expected` is reported through
/// [`LoadedPrior::fingerprint_mismatch`] rather than as an error.
pub fn load_prior(path: &Path, expected: Option<u64>) -> Result<LoadedPrior> {
    let set = PriorSet::from_bytes(&fs::read(path)?)?;
    let fingerprint_mismatch = expected.is_some_and(|fp| fp != set.model_fingerprint);
    if fingerprint_mismatch {
        log::warn!("prior {} was built from a different checkpoint", path.display());
    }
    Ok(LoadedPrior { set, fingerprint_mismatch })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prior::gaussian_grid;

    fn sample_set() -> PriorSet {
        let mk = |id: &str, shift: f64| {
            let mut cnn = ExpertMap::new();
            cnn.insert(ExpertKey(0, 0), ExpertPdf::gaussian(shift, 1.0));
            cnn.insert(ExpertKey(1, 3), ExpertPdf::Grid(gaussian_grid(shift, 0.5, -4.0, 4.0, 64).unwrap()));
            let mut pca = ExpertMap::new();
            pca.insert(ExpertKey(0, 1), ExpertPdf::gaussian(-shift, 0.25));
            SubjectPrior { subject_id: id.into(), model_fingerprint: 77, cnn, pca }
        };
        PriorSet {
            model_fingerprint: 77,
            estimator: Estimator::Gaussian,
            subjects: vec![mk("a", 0.1), mk("b", -0.7)],
            basis: Some(PrincipalBasis {
                config: PcaConfig { r: 2, d: 1, tau: 0.8, g: 1 },
                channels: vec![ChannelBasis {
                    mean: vec![0.5; 4],
                    components: vec![vec![0.5; 4]],
                    eigenvalues: vec![2.0],
                }],
            }),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.fpr");
        let set = sample_set();
        set.validate().unwrap();
        save_prior(&p, &set).unwrap();
        let loaded = load_prior(&p, Some(77)).unwrap();
        assert!(!loaded.fingerprint_mismatch);
        assert_eq!(loaded.set, set);
        assert_eq!(loaded.set.to_bytes(), set.to_bytes());
    }

    #[test]
    fn mismatch_is_flagged_not_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.fpr");
        save_prior(&p, &sample_set()).unwrap();
        assert!(load_prior(&p, Some(78)).unwrap().fingerprint_mismatch);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let bytes = sample_set().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(PriorSet::from_bytes(&bad), Err(Error::Format(_))));
        assert!(PriorSet::from_bytes(&bytes[..bytes.len() / 2]).is_err());
        let mut v2 = bytes;
        v2[4] = 2;
        assert!(PriorSet::from_bytes(&v2).is_err());
    }

    #[test]
    fn validation_catches_inconsistency() {
        let mut set = sample_set();
        set.subjects[1].model_fingerprint = 1;
        assert!(matches!(set.validate(), Err(Error::Fingerprint { .. })));
        let mut set = sample_set();
        set.subjects[1].cnn.remove(&ExpertKey(0, 0));
        assert!(set.validate().is_err());
    }
}
