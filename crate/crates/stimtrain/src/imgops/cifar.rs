//! CIFAR-10 binary reader.
//!
//! Record layout: 1 label byte then 3072 bytes of row-major R, G, B planes at
//! 32x32. Accepts either the standard directory layout (`data_batch_1..5.bin`
//! for train, `test_batch.bin` for test) or a single `.bin` file.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};

pub const RECORD_BYTES: usize = 3073;
pub const IMAGE_SIDE: usize = 32;
pub const CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Load a split with pixel values scaled to [0, 1], in file order.
pub fn load_cifar10_binary(path: &Path, split: Split) -> Result<Dataset> {
    let files: Vec<PathBuf> = if path.is_dir() {
        match split {
            Split::Train => (1..=5).map(|i| path.join(format!("data_batch_{i}.bin"))).collect(),
            Split::Test => vec![path.join("test_batch.bin")],
        }
    } else {
        vec![path.to_path_buf()]
    };

    let mut images = Vec::new();
    let mut labels = Vec::new();
    for file in &files {
        let bytes = fs::read(file).map_err(|e| Error::io(file.display().to_string(), e))?;
        parse_records(&bytes, &mut images, &mut labels)?;
    }
    let n = labels.len();
    let images = Array4::from_shape_vec((n, CHANNELS, IMAGE_SIDE, IMAGE_SIDE), images)
        .expect("record parser fills full images");
    Ok(Dataset { images, labels, num_classes: 10 })
}

fn parse_records(bytes: &[u8], images: &mut Vec<f32>, labels: &mut Vec<usize>) -> Result<()> {
    if bytes.len() % RECORD_BYTES != 0 {
        let complete = bytes.len() / RECORD_BYTES;
        return Err(Error::Format {
            offset: (complete * RECORD_BYTES) as u64,
            msg: format!(
                "bad record length: {} bytes is not a multiple of {RECORD_BYTES}",
                bytes.len()
            ),
        });
    }
    for (ri, rec) in bytes.chunks_exact(RECORD_BYTES).enumerate() {
        let label = rec[0];
        if label > 9 {
            return Err(Error::Format {
                offset: (ri * RECORD_BYTES) as u64,
                msg: format!("label {label} > 9"),
            });
        }
        labels.push(label as usize);
        images.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_fixture(records: &[(u8, u8)]) -> tempfile::NamedTempFile {
        let mut f = tempfile::Builder::new().suffix(".bin").tempfile().unwrap();
        for &(label, fill) in records {
            let mut rec = vec![fill; RECORD_BYTES];
            rec[0] = label;
            f.write_all(&rec).unwrap();
        }
        f.flush().unwrap();
        f
    }

    #[test]
    fn single_record_fixture() {
        let f = write_fixture(&[(7, 255)]);
        let ds = load_cifar10_binary(f.path(), Split::Train).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.labels, vec![7]);
        assert!(ds.images.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let mut f = tempfile::Builder::new().suffix(".bin").tempfile().unwrap();
        f.write_all(&vec![0u8; RECORD_BYTES + 100]).unwrap();
        f.flush().unwrap();
        let err = load_cifar10_binary(f.path(), Split::Train).unwrap_err();
        match err {
            Error::Format { offset, .. } => assert_eq!(offset, RECORD_BYTES as u64),
            other => panic!("expected format error, got {other}"),
        }
    }

    #[test]
    fn out_of_range_label_reports_record_offset() {
        let f = write_fixture(&[(3, 0), (10, 0)]);
        let err = load_cifar10_binary(f.path(), Split::Train).unwrap_err();
        match err {
            Error::Format { offset, msg } => {
                assert_eq!(offset, RECORD_BYTES as u64);
                assert!(msg.contains("label 10"));
            }
            other => panic!("expected format error, got {other}"),
        }
    }

    /// Independent minimal reader: raw byte arithmetic, no shared code path.
    fn oracle_first_image(bytes: &[u8]) -> (usize, Vec<f32>, f64) {
        let label = bytes[0] as usize;
        let mut pix = Vec::with_capacity(3072);
        let mut checksum = 0.0f64;
        for i in 0..3072 {
            let v = bytes[1 + i] as f32 / 255.0;
            pix.push(v);
            checksum += v as f64 * (i as f64 + 1.0);
        }
        (label, pix, checksum)
    }

    #[test]
    fn first_image_checksum_matches_independent_reader() {
        // deterministic pseudo-random record
        let mut bytes = vec![0u8; RECORD_BYTES * 2];
        let mut state = 0x1234_5678u32;
        for b in bytes.iter_mut() {
            state = state.wrapping_mul(1664525).wrapping_add(1013904223);
            *b = (state >> 24) as u8;
        }
        bytes[0] = 4;
        bytes[RECORD_BYTES] = 9;
        let mut f = tempfile::Builder::new().suffix(".bin").tempfile().unwrap();
        f.write_all(&bytes).unwrap();
        f.flush().unwrap();

        let ds = load_cifar10_binary(f.path(), Split::Test).unwrap();
        let (label, pix, checksum) = oracle_first_image(&bytes);
        assert_eq!(ds.labels[0], label);
        let img = ds.image(0);
        let flat: Vec<f32> = img.iter().copied().collect();
        assert_eq!(flat, pix);
        let got: f64 = flat.iter().enumerate().map(|(i, &v)| v as f64 * (i as f64 + 1.0)).sum();
        assert_eq!(got, checksum);
    }
}
