//! CIFAR-10 binary ingestion: 3073-byte records (one label byte, then 3072
//! channel-major pixel bytes for a 32x32 RGB image), normalized to [0, 1].

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::Array3;

use super::Dataset;
use crate::error::{Error, Result};

pub const SIDE: usize = 32;
pub const CHANNELS: usize = 3;
pub const PIXEL_BYTES: usize = CHANNELS * SIDE * SIDE;
pub const RECORD_BYTES: usize = 1 + PIXEL_BYTES;
pub const NUM_LABELS: u32 = 10;

/// Per-class caps applied while loading, keeping file order. `None` loads
/// everything.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CifarLimits {
    pub train_per_class: Option<usize>,
    pub test_per_class: Option<usize>,
}

/// Reads one batch file into (label, image) pairs in record order.
pub fn read_cifar_file(path: &Path) -> Result<Vec<(u32, Array3<f64>)>> {
    let bytes = std::fs::read(path)?;
    if bytes.len() % RECORD_BYTES != 0 {
        let whole = bytes.len() / RECORD_BYTES;
        return Err(Error::Format {
            offset: (whole * RECORD_BYTES) as u64,
            msg: format!(
                "{} trailing bytes do not form a {RECORD_BYTES}-byte record",
                bytes.len() - whole * RECORD_BYTES
            ),
        });
    }
    let mut records = Vec::with_capacity(bytes.len() / RECORD_BYTES);
    for (i, chunk) in bytes.chunks_exact(RECORD_BYTES).enumerate() {
        let label = chunk[0] as u32;
        if label >= NUM_LABELS {
            return Err(Error::Format {
                offset: (i * RECORD_BYTES) as u64,
                msg: format!("label byte {label} outside 0..{NUM_LABELS}"),
            });
        }
        let pixels = &chunk[1..];
        let image = Array3::from_shape_fn((CHANNELS, SIDE, SIDE), |(c, y, x)| {
            pixels[c * SIDE * SIDE + y * SIDE + x] as f64 / 255.0
        });
        records.push((label, image));
    }
    Ok(records)
}

/// Writes records in the same binary layout; the inverse of
/// [`read_cifar_file`] up to the fixed /255 normalization.
pub fn write_cifar_file(path: &Path, records: &[(u8, Vec<u8>)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (i, (label, pixels)) in records.iter().enumerate() {
        if u32::from(*label) >= NUM_LABELS {
            return Err(Error::Argument(format!(
                "record {i}: label {label} outside 0..{NUM_LABELS}"
            )));
        }
        if pixels.len() != PIXEL_BYTES {
            return Err(Error::Argument(format!(
                "record {i}: {} pixel bytes, expected {PIXEL_BYTES}",
                pixels.len()
            )));
        }
        w.write_all(&[*label])?;
        w.write_all(pixels)?;
    }
    w.flush()?;
    Ok(())
}

fn group(
    records: Vec<(u32, Array3<f64>)>,
    cap: Option<usize>,
) -> BTreeMap<u32, Vec<Array3<f64>>> {
    let mut map: BTreeMap<u32, Vec<Array3<f64>>> = BTreeMap::new();
    for (label, image) in records {
        let bucket = map.entry(label).or_default();
        if cap.is_none_or(|c| bucket.len() < c) {
            bucket.push(image);
        }
    }
    map
}

/// Loads the standard directory layout: `data_batch_1.bin` through
/// `data_batch_5.bin` for training and `test_batch.bin` for testing.
pub fn load_cifar_dir(dir: &Path, limits: &CifarLimits) -> Result<Dataset> {
    let mut train_records = Vec::new();
    for i in 1..=5 {
        let path = dir.join(format!("data_batch_{i}.bin"));
        train_records.extend(read_cifar_file(&path)?);
    }
    let test_records = read_cifar_file(&dir.join("test_batch.bin"))?;
    Dataset::new(
        group(train_records, limits.train_per_class),
        group(test_records, limits.test_per_class),
        PIXEL_BYTES,
    )
}
