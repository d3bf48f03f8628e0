//! Subject files.
//!
//! Layout (little-endian): magic `FSB1`, version `u32` = 1, id (`u32` length +
//! UTF-8), domain id `u32`, seed `u64`, class count `u8`, `S`, `H`, `W` as
//! `u32`, then `S*H*W` `f64` intensities and `S*H*W` `u8` labels.

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use super::subject::Subject;
use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"FSB1";
const VERSION: u32 = 1;

pub fn save_subject(path: &Path, subject: &Subject) -> Result<()> {
    let mut w = Writer::new();
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.str(&subject.id);
    w.u32(subject.domain_id);
    w.u64(subject.seed);
    w.u8(subject.n_classes as u8);
    let (s, _, h, wd) = subject.slices.dims4()?;
    for d in [s, h, wd] {
        w.u32(d as u32);
    }
    w.f64s(subject.slices.data());
    w.bytes(&subject.labels);
    fs::write(path, w.into_inner())?;
    Ok(())
}

pub fn load_subject(path: &Path) -> Result<Subject> {
    let buf = fs::read(path)?;
    let mut r = Reader::new(&buf);
    r.expect_magic(MAGIC)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(format!("subject file version {version}, expected {VERSION}")));
    }
    let id = r.str()?;
    let domain_id = r.u32()?;
    let seed = r.u64()?;
    let n_classes = r.u8()? as usize;
    let (s, h, w) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let n = s * h * w;
    if n > r.remaining() {
        return Err(Error::format("subject payload exceeds file size"));
    }
    let slices = Tensor::new(vec![s, 1, h, w], r.f64s(n)?)?;
    let labels = r.take(n)?.to_vec();
    r.finish()?;
    Subject::new(id, domain_id, seed, n_classes, slices, labels)
}

/// Writes `<stem>_sliceNN.png` (intensities) and `<stem>_sliceNN_label.png`
/// (labels scaled to the full grey range) into `dir`.
pub fn export_png(dir: &Path, stem: &str, subject: &Subject) -> Result<Vec<std::path::PathBuf>> {
    fs::create_dir_all(dir)?;
    let (h, w) = subject.size();
    let hw = h * w;
    let step = 255 / (subject.n_classes.max(2) - 1) as u32;
    let mut written = Vec::new();
    for i in 0..subject.n_slices() {
        let img: Vec<u8> = subject.slices.data()[i * hw..(i + 1) * hw]
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let lbl: Vec<u8> = subject.slice_labels(i).iter().map(|l| (*l as u32 * step) as u8).collect();
        for (suffix, pixels) in [("", img), ("_label", lbl)] {
            let path = dir.join(format!("{stem}_slice{i:02}{suffix}.png"));
            let file = BufWriter::new(fs::File::create(&path)?);
            let mut enc = png::Encoder::new(file, w as u32, h as u32);
            enc.set_color(png::ColorType::Grayscale);
            enc.set_depth(png::BitDepth::Eight);
            let mut writer = enc.write_header().map_err(|e| Error::format(e.to_string()))?;
            writer.write_image_data(&pixels).map_err(|e| Error::format(e.to_string()))?;
            written.push(path);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::generate_subject;

    #[test]
    fn round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate_subject(11, 2, 3, 32).unwrap();
        let p = dir.path().join("s.fsb");
        save_subject(&p, &s).unwrap();
        assert_eq!(load_subject(&p).unwrap(), s);

        let mut bytes = fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_subject(&p), Err(Error::Format(_))));
        bytes[0] = b'X';
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_subject(&p), Err(Error::Format(_))));
    }

    #[test]
    fn png_export_writes_two_files_per_slice() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate_subject(12, 3, 2, 16).unwrap();
        let files = export_png(dir.path(), "s", &s).unwrap();
        assert_eq!(files.len(), 6);
        assert!(files.iter().all(|f| f.exists()));
    }
}
