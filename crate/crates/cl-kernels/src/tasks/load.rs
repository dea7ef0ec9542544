//! Source-data loaders.
//!
//! Three on-disk formats feed the generators: IDX image/label pairs
//! (big-endian magic, u8 payload), CIFAR-100 binary batches (two label
//! bytes plus a 32x32x3 image per record, converted to grayscale), and
//! synthetic pools (either a literal `.npy` matrix or a JSON descriptor
//! that seeds a Gaussian pool).

use std::path::{Path, PathBuf};

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Deserialize;

use crate::rng::keyed_rng;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceFormat {
    Idx,
    CifarBinary,
    NpySynthetic,
}

/// Images as rows (grayscale pixel values) with integer class labels.
#[derive(Debug, Clone)]
pub struct LabeledPool {
    pub images: DMatrix<f64>,
    pub labels: Vec<i64>,
}

/// Load a labeled image pool.
///
/// For `Idx`, `path` names the images file; the labels file is found by
/// substituting `images -> labels` and `idx3 -> idx1` in the filename.
pub fn load_source(path: &Path, format: SourceFormat) -> Result<LabeledPool> {
    match format {
        SourceFormat::Idx => {
            let images = parse_idx_images(&std::fs::read(path)?)?;
            let labels = parse_idx_labels(&std::fs::read(idx_labels_path(path)?)?)?;
            if labels.len() != images.nrows() {
                return Err(Error::Parse(format!(
                    "IDX image/label count mismatch: {} images, {} labels",
                    images.nrows(),
                    labels.len()
                )));
            }
            Ok(LabeledPool { images, labels })
        }
        SourceFormat::CifarBinary => parse_cifar(&std::fs::read(path)?),
        SourceFormat::NpySynthetic => {
            let bytes = std::fs::read(path)?;
            if bytes.starts_with(b"\x93NUMPY") {
                let images = parse_npy(&bytes)?;
                let labels = vec![0; images.nrows()];
                Ok(LabeledPool { images, labels })
            } else {
                synthesize(&bytes)
            }
        }
    }
}

fn idx_labels_path(path: &Path) -> Result<PathBuf> {
    let name = path
        .file_name()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::Parse(format!("bad IDX path {path:?}")))?;
    let derived = name.replace("images", "labels").replace("idx3", "idx1");
    if derived == name {
        return Err(Error::Parse(format!(
            "cannot derive the IDX labels filename from {name:?}; expected \
             \"images\" or \"idx3\" in the name"
        )));
    }
    Ok(path.with_file_name(derived))
}

fn parse_idx_images(bytes: &[u8]) -> Result<DMatrix<f64>> {
    if bytes.len() < 16 {
        return Err(Error::Parse("IDX image file shorter than its header".into()));
    }
    let magic = BigEndian::read_u32(&bytes[0..4]);
    if magic != 0x0000_0803 {
        return Err(Error::Parse(format!(
            "IDX image magic {magic:#010x}, expected 0x00000803"
        )));
    }
    let n = BigEndian::read_u32(&bytes[4..8]) as usize;
    let rows = BigEndian::read_u32(&bytes[8..12]) as usize;
    let cols = BigEndian::read_u32(&bytes[12..16]) as usize;
    let pixels = rows * cols;
    if bytes.len() != 16 + n * pixels {
        return Err(Error::Parse(format!(
            "IDX image payload truncated: header promises {} bytes, file has {}",
            16 + n * pixels,
            bytes.len()
        )));
    }
    let mut images = DMatrix::zeros(n, pixels);
    for i in 0..n {
        for j in 0..pixels {
            images[(i, j)] = bytes[16 + i * pixels + j] as f64;
        }
    }
    Ok(images)
}

fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<i64>> {
    if bytes.len() < 8 {
        return Err(Error::Parse("IDX label file shorter than its header".into()));
    }
    let magic = BigEndian::read_u32(&bytes[0..4]);
    if magic != 0x0000_0801 {
        return Err(Error::Parse(format!(
            "IDX label magic {magic:#010x}, expected 0x00000801"
        )));
    }
    let n = BigEndian::read_u32(&bytes[4..8]) as usize;
    if bytes.len() != 8 + n {
        return Err(Error::Parse(format!(
            "IDX label payload truncated: header promises {} bytes, file has {}",
            8 + n,
            bytes.len()
        )));
    }
    Ok(bytes[8..].iter().map(|&b| b as i64).collect())
}

/// CIFAR-100 binary: per record a coarse and a fine label byte, then 3072
/// pixel bytes (1024 red, green, blue). The fine label is kept; channels
/// merge by luminance 0.299 R + 0.587 G + 0.114 B.
fn parse_cifar(bytes: &[u8]) -> Result<LabeledPool> {
    const RECORD: usize = 2 + 3 * 1024;
    if bytes.is_empty() || bytes.len() % RECORD != 0 {
        return Err(Error::Parse(format!(
            "CIFAR binary length {} is not a multiple of the {RECORD}-byte record",
            bytes.len()
        )));
    }
    let n = bytes.len() / RECORD;
    let mut images = DMatrix::zeros(n, 1024);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let rec = &bytes[i * RECORD..(i + 1) * RECORD];
        labels.push(rec[1] as i64);
        for j in 0..1024 {
            images[(i, j)] = 0.299 * rec[2 + j] as f64
                + 0.587 * rec[2 + 1024 + j] as f64
                + 0.114 * rec[2 + 2048 + j] as f64;
        }
    }
    Ok(LabeledPool { images, labels })
}

/// Minimal NumPy `.npy` reader: version 1, C-order, little-endian f8/f4,
/// two-dimensional.
fn parse_npy(bytes: &[u8]) -> Result<DMatrix<f64>> {
    if bytes.len() < 10 || bytes[6] != 1 {
        return Err(Error::Parse("only .npy format version 1 is supported".into()));
    }
    let header_len = LittleEndian::read_u16(&bytes[8..10]) as usize;
    let start = 10 + header_len;
    if bytes.len() < start {
        return Err(Error::Parse(".npy header truncated".into()));
    }
    let header = std::str::from_utf8(&bytes[10..start])
        .map_err(|_| Error::Parse(".npy header is not ASCII".into()))?;
    if header.contains("'fortran_order': True") {
        return Err(Error::Parse(".npy fortran_order arrays are unsupported".into()));
    }
    let width = if header.contains("'<f8'") {
        8
    } else if header.contains("'<f4'") {
        4
    } else {
        return Err(Error::Parse(format!(
            ".npy dtype must be '<f8' or '<f4', header: {}",
            header.trim_end()
        )));
    };
    let shape_src = header
        .split_once('(')
        .and_then(|(_, rest)| rest.split_once(')'))
        .map(|(inside, _)| inside)
        .ok_or_else(|| Error::Parse(".npy header has no shape tuple".into()))?;
    let dims: Vec<usize> = shape_src
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>().map_err(|e| Error::Parse(format!("bad .npy shape: {e}"))))
        .collect::<Result<_>>()?;
    if dims.len() != 2 {
        return Err(Error::Parse(format!(
            ".npy arrays must be 2-dimensional, got shape {dims:?}"
        )));
    }
    let (r, c) = (dims[0], dims[1]);
    if bytes.len() != start + r * c * width {
        return Err(Error::Parse(format!(
            ".npy payload truncated: shape ({r}, {c}) needs {} bytes, file has {}",
            r * c * width,
            bytes.len() - start
        )));
    }
    let read = |k: usize| -> f64 {
        let at = start + k * width;
        if width == 8 {
            LittleEndian::read_f64(&bytes[at..at + 8])
        } else {
            LittleEndian::read_f32(&bytes[at..at + 4]) as f64
        }
    };
    Ok(DMatrix::from_fn(r, c, |i, j| read(i * c + j)))
}

/// Descriptor for a seeded standard-normal pool with round-robin labels.
#[derive(Debug, Deserialize)]
struct SyntheticSpec {
    rows: usize,
    cols: usize,
    classes: usize,
    seed: u64,
}

fn synthesize(bytes: &[u8]) -> Result<LabeledPool> {
    let spec: SyntheticSpec = serde_json::from_slice(bytes).map_err(|e| {
        Error::Parse(format!(
            "synthetic pool descriptor must be JSON with rows/cols/classes/seed: {e}"
        ))
    })?;
    if spec.rows == 0 || spec.cols == 0 || spec.classes == 0 {
        return Err(Error::Parse(
            "synthetic pool needs positive rows, cols, and classes".into(),
        ));
    }
    let mut rng = keyed_rng(spec.seed, 0, "synthetic-pool");
    let mut images = DMatrix::zeros(spec.rows, spec.cols);
    for i in 0..spec.rows {
        for j in 0..spec.cols {
            images[(i, j)] = rng.sample(StandardNormal);
        }
    }
    let labels = (0..spec.rows).map(|i| (i % spec.classes) as i64).collect();
    Ok(LabeledPool { images, labels })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_image_bytes(n: u32, rows: u32, cols: u32) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [0x0000_0803u32, n, rows, cols] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend((0..n * rows * cols).map(|k| (k % 251) as u8));
        b
    }

    fn idx_label_bytes(labels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [0x0000_0801u32, labels.len() as u32] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend_from_slice(labels);
        b
    }

    #[test]
    fn idx_buffers_decode() {
        let images = parse_idx_images(&idx_image_bytes(2, 3, 4)).unwrap();
        assert_eq!(images.shape(), (2, 12));
        assert_eq!(images[(0, 0)], 0.0);
        assert_eq!(images[(1, 11)], 23.0);
        let labels = parse_idx_labels(&idx_label_bytes(&[7, 2])).unwrap();
        assert_eq!(labels, vec![7, 2]);
    }

    #[test]
    fn idx_rejects_bad_magic_and_truncation() {
        let mut bad = idx_image_bytes(2, 3, 4);
        bad[3] = 0x01;
        assert!(matches!(parse_idx_images(&bad), Err(Error::Parse(_))));
        let mut short = idx_image_bytes(2, 3, 4);
        short.pop();
        match parse_idx_images(&short) {
            Err(Error::Parse(msg)) => assert!(msg.contains("truncated")),
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn idx_files_pair_by_naming_convention() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("train-images-idx3-ubyte");
        std::fs::write(&img, idx_image_bytes(3, 2, 2)).unwrap();
        std::fs::write(
            dir.path().join("train-labels-idx1-ubyte"),
            idx_label_bytes(&[1, 0, 9]),
        )
        .unwrap();
        let pool = load_source(&img, SourceFormat::Idx).unwrap();
        assert_eq!(pool.images.shape(), (3, 4));
        assert_eq!(pool.labels, vec![1, 0, 9]);
        let odd = dir.path().join("pool.bin");
        std::fs::write(&odd, idx_image_bytes(1, 2, 2)).unwrap();
        assert!(matches!(
            load_source(&odd, SourceFormat::Idx),
            Err(Error::Parse(_))
        ));
    }

    #[test]
    fn cifar_records_decode_by_luminance() {
        let mut bytes = Vec::new();
        // Record 1: fine label 42, pure red at 255.
        bytes.extend_from_slice(&[3, 42]);
        bytes.extend(std::iter::repeat(255u8).take(1024));
        bytes.extend(std::iter::repeat(0u8).take(2048));
        // Record 2: fine label 7, equal channels at 100.
        bytes.extend_from_slice(&[1, 7]);
        bytes.extend(std::iter::repeat(100u8).take(3072));
        let pool = parse_cifar(&bytes).unwrap();
        assert_eq!(pool.labels, vec![42, 7]);
        assert_eq!(pool.images[(0, 0)], 0.299 * 255.0);
        let grey = (0.299 + 0.587 + 0.114) * 100.0;
        assert!((pool.images[(1, 512)] - grey).abs() < 1e-12);
        assert!(matches!(parse_cifar(&bytes[1..]), Err(Error::Parse(_))));
    }

    #[test]
    fn npy_matrices_parse_exactly() {
        let header = "{'descr': '<f8', 'fortran_order': False, 'shape': (2, 3), }\n";
        let mut bytes = b"\x93NUMPY\x01\x00".to_vec();
        bytes.extend_from_slice(&(header.len() as u16).to_le_bytes());
        bytes.extend_from_slice(header.as_bytes());
        let values: [f64; 6] = [1.5, -2.0, 0.25, 8.0, 1e-3, 40.0];
        for v in values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let m = parse_npy(&bytes).unwrap();
        assert_eq!(m.shape(), (2, 3));
        assert_eq!(m[(0, 1)], -2.0);
        assert_eq!(m[(1, 2)], 40.0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pool.npy");
        std::fs::write(&path, &bytes).unwrap();
        let pool = load_source(&path, SourceFormat::NpySynthetic).unwrap();
        assert_eq!(pool.labels, vec![0, 0]);
    }

    #[test]
    fn synthetic_descriptors_replay_under_their_seed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("synthetic.json");
        std::fs::write(&path, r#"{"rows":6,"cols":4,"classes":3,"seed":5}"#).unwrap();
        let a = load_source(&path, SourceFormat::NpySynthetic).unwrap();
        let b = load_source(&path, SourceFormat::NpySynthetic).unwrap();
        assert_eq!(a.images, b.images);
        assert_eq!(a.labels, vec![0, 1, 2, 0, 1, 2]);
        assert_eq!(a.images.shape(), (6, 4));
        let mean = a.images.iter().sum::<f64>() / 24.0;
        assert!(mean.abs() < 1.0);
    }
}
