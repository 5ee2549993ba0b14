//! Checkpoint container: magic `STPP`, version, UTF-8 manifest, raw arrays.
//!
//! Layout:
//! ```text
//! "STPP" | version: u32 LE | manifest_len: u32 LE | manifest UTF-8 | data
//! ```
//! The manifest holds one line per array — `name \t d0,d1,... \t offset` —
//! with offsets in bytes relative to the start of the data section; arrays
//! are stored as raw little-endian f32 in manifest order. Round trips are
//! bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use super::params::ParameterSet;
use crate::error::{Error, Result};

pub const CONTAINER_MAGIC: &[u8; 4] = b"STPP";
pub const CONTAINER_VERSION: u32 = 1;

/// Write named f32 arrays in order.
pub fn write_container(path: &Path, entries: &[(String, &ArrayD<f32>)]) -> Result<()> {
    let mut manifest = String::new();
    let mut offset = 0u64;
    for (name, arr) in entries {
        let shape = arr.shape().iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",");
        manifest.push_str(&format!("{name}\t{shape}\t{offset}\n"));
        offset += 4 * arr.len() as u64;
    }
    let f = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(f);
    let io_err = |e| Error::io(path.display().to_string(), e);
    w.write_all(CONTAINER_MAGIC).map_err(io_err)?;
    w.write_all(&CONTAINER_VERSION.to_le_bytes()).map_err(io_err)?;
    w.write_all(&(manifest.len() as u32).to_le_bytes()).map_err(io_err)?;
    w.write_all(manifest.as_bytes()).map_err(io_err)?;
    for (_, arr) in entries {
        let arr = arr.as_standard_layout();
        for v in arr.iter() {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)?;
    Ok(())
}

/// Read all arrays back in manifest order.
pub fn read_container(path: &Path) -> Result<Vec<(String, ArrayD<f32>)>> {
    let f = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = BufReader::new(f);
    let mut head = [0u8; 12];
    r.read_exact(&mut head)
        .map_err(|_| Error::Format { offset: 0, msg: "truncated header".into() })?;
    if &head[0..4] != CONTAINER_MAGIC {
        return Err(Error::Format { offset: 0, msg: "bad magic, expected STPP".into() });
    }
    let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
    if version != CONTAINER_VERSION {
        return Err(Error::Format { offset: 4, msg: format!("unsupported version {version}") });
    }
    let manifest_len = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
    let mut manifest = vec![0u8; manifest_len];
    r.read_exact(&mut manifest)
        .map_err(|_| Error::Format { offset: 12, msg: "truncated manifest".into() })?;
    let manifest = String::from_utf8(manifest)
        .map_err(|_| Error::Format { offset: 12, msg: "manifest is not UTF-8".into() })?;

    let data_start = 12 + manifest_len as u64;
    let mut out = Vec::new();
    let mut expected_offset = 0u64;
    for (lineno, line) in manifest.lines().enumerate() {
        let mut parts = line.split('\t');
        let (name, shape_s, offset_s) = match (parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), Some(c)) => (a, b, c),
            _ => {
                return Err(Error::Format {
                    offset: data_start,
                    msg: format!("manifest line {} malformed", lineno + 1),
                })
            }
        };
        let shape: Vec<usize> = if shape_s.is_empty() {
            vec![]
        } else {
            shape_s
                .split(',')
                .map(|d| {
                    d.parse::<usize>().map_err(|_| Error::Format {
                        offset: data_start,
                        msg: format!("bad dimension `{d}` in manifest line {}", lineno + 1),
                    })
                })
                .collect::<Result<_>>()?
        };
        let offset: u64 = offset_s.parse().map_err(|_| Error::Format {
            offset: data_start,
            msg: format!("bad offset in manifest line {}", lineno + 1),
        })?;
        if offset != expected_offset {
            return Err(Error::Format {
                offset: data_start + offset,
                msg: format!("non-contiguous offset for {name}"),
            });
        }
        let len: usize = shape.iter().product();
        let mut bytes = vec![0u8; 4 * len];
        r.read_exact(&mut bytes).map_err(|_| Error::Format {
            offset: data_start + offset,
            msg: format!("truncated data for {name}"),
        })?;
        let vals: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        out.push((
            name.to_string(),
            ArrayD::from_shape_vec(IxDyn(&shape), vals).expect("shape/len agree"),
        ));
        expected_offset = offset + 4 * len as u64;
    }
    Ok(out)
}

impl ParameterSet<f32> {
    /// Save every entry (weights and running statistics) in registration order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let entries: Vec<(String, &ArrayD<f32>)> =
            self.iter().map(|(name, p)| (name.to_string(), &p.value)).collect();
        write_container(path, &entries)
    }

    /// Load values into matching entries; every entry must be present with
    /// the right shape. Extra arrays in the container are ignored so a
    /// trainer checkpoint (with optimizer state) loads as plain weights too.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        let arrays = read_container(path)?;
        let mut seen = 0usize;
        for (name, arr) in arrays {
            if !self.contains(&name) {
                continue;
            }
            let slot = self.get_mut(&name);
            if slot.shape() != arr.shape() {
                return Err(Error::Shape(format!(
                    "checkpoint array {name} has shape {:?}, parameter wants {:?}",
                    arr.shape(),
                    slot.shape()
                )));
            }
            slot.assign(&arr);
            seen += 1;
        }
        if seen != self.len() {
            return Err(Error::State(format!(
                "checkpoint covers {seen} of {} parameters",
                self.len()
            )));
        }
        Ok(())
    }
}
