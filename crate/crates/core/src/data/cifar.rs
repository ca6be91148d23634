//! CIFAR-10 binary batches: each record is one label byte followed by
//! `3 * 32 * 32` channel-major pixel bytes.

use std::fs;
use std::path::{Path, PathBuf};

use super::{DataError, Dataset, Result};
use crate::tensor::Tensor;

pub const CLASSES: usize = 10;
pub const CHANNELS: usize = 3;
pub const SIDE: usize = 32;
pub const PIXELS: usize = CHANNELS * SIDE * SIDE;
pub const RECORD_BYTES: usize = 1 + PIXELS;

pub const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const TEST_FILE: &str = "test_batch.bin";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub label: u8,
    pub pixels: Vec<u8>,
}

/// Splits raw bytes into records of `1 + pixels` bytes, checking labels
/// against `classes`. `path` is only used in error messages.
pub fn parse_records(bytes: &[u8], pixels: usize, classes: usize, path: &Path) -> Result<Vec<Record>> {
    let record = 1 + pixels;
    if !bytes.len().is_multiple_of(record) {
        return Err(DataError::Truncated {
            path: path.to_path_buf(),
            len: bytes.len(),
            record,
        });
    }
    bytes
        .chunks_exact(record)
        .enumerate()
        .map(|(index, chunk)| {
            let label = chunk[0];
            if label as usize >= classes {
                return Err(DataError::BadLabel {
                    path: path.to_path_buf(),
                    index,
                    label,
                    classes,
                });
            }
            Ok(Record {
                label,
                pixels: chunk[1..].to_vec(),
            })
        })
        .collect()
}

pub fn encode_records(records: &[Record]) -> Vec<u8> {
    let mut out = Vec::with_capacity(records.iter().map(|r| 1 + r.pixels.len()).sum());
    for r in records {
        out.push(r.label);
        out.extend_from_slice(&r.pixels);
    }
    out
}

/// Reads one CIFAR-10 batch file.
pub fn read_batch_file(path: &Path) -> Result<Vec<Record>> {
    let bytes = fs::read(path).map_err(|source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            DataError::MissingFile(path.to_path_buf())
        } else {
            DataError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    })?;
    parse_records(&bytes, PIXELS, CLASSES, path)
}

/// Pixels scaled by `1/255`.
pub fn records_to_dataset(records: &[Record], dims: (usize, usize, usize), classes: usize) -> Result<Dataset> {
    let (c, h, w) = dims;
    let mut data = Vec::with_capacity(records.len() * c * h * w);
    for r in records {
        if r.pixels.len() != c * h * w {
            return Err(DataError::InvalidSize(format!(
                "record has {} pixels, expected {}",
                r.pixels.len(),
                c * h * w
            )));
        }
        data.extend(r.pixels.iter().map(|&p| p as f64 / 255.0));
    }
    let labels = records.iter().map(|r| r.label as usize).collect();
    Dataset::new(Tensor::new(vec![records.len(), c, h, w], data)?, labels, classes)
}

/// Quantizes a dataset back to records; `round(v * 255)` inverts the loader
/// exactly for data that came from bytes.
pub fn dataset_to_records(ds: &Dataset) -> Result<Vec<Record>> {
    if ds.class_count > 256 {
        return Err(DataError::InvalidSize(format!("{} classes do not fit a byte label", ds.class_count)));
    }
    let (c, h, w) = ds.sample_dims();
    let len = c * h * w;
    Ok(ds
        .labels
        .iter()
        .enumerate()
        .map(|(i, &label)| Record {
            label: label as u8,
            pixels: ds.images.data()[i * len..(i + 1) * len]
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
                .collect(),
        })
        .collect())
}

pub fn write_records(path: &Path, records: &[Record]) -> Result<()> {
    fs::write(path, encode_records(records)).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read_many(dir: &Path, files: &[&str], limit: Option<usize>) -> Result<Dataset> {
    let mut records = Vec::new();
    for f in files {
        if limit.is_some_and(|l| records.len() >= l) {
            break;
        }
        let path: PathBuf = dir.join(f);
        records.extend(read_batch_file(&path)?);
    }
    if let Some(l) = limit {
        records.truncate(l);
    }
    records_to_dataset(&records, (CHANNELS, SIDE, SIDE), CLASSES)
}

/// Loads the five training batches and the test batch from `dir`.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    load_cifar10_subset(dir, None, None)
}

/// Like [`load_cifar10`], keeping only the first `train`/`test` records.
pub fn load_cifar10_subset(dir: &Path, train: Option<usize>, test: Option<usize>) -> Result<(Dataset, Dataset)> {
    Ok((read_many(dir, &TRAIN_FILES, train)?, read_many(dir, &[TEST_FILE], test)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fake_records(n: usize, seed: u8) -> Vec<Record> {
        (0..n)
            .map(|i| Record {
                label: (i % 10) as u8,
                pixels: (0..PIXELS).map(|p| (p * 7 + i * 13 + seed as usize) as u8).collect(),
            })
            .collect()
    }

    #[test]
    fn byte_round_trip() {
        let recs = fake_records(4, 3);
        let bytes = encode_records(&recs);
        assert_eq!(bytes.len(), 4 * RECORD_BYTES);
        let parsed = parse_records(&bytes, PIXELS, CLASSES, Path::new("x")).unwrap();
        assert_eq!(parsed, recs);
        let ds = records_to_dataset(&parsed, (3, 32, 32), 10).unwrap();
        assert_eq!(encode_records(&dataset_to_records(&ds).unwrap()), bytes);
    }

    #[test]
    fn scaling_is_over_255() {
        let recs = vec![Record {
            label: 1,
            pixels: vec![0, 255, 51],
        }];
        let ds = records_to_dataset(&recs, (3, 1, 1), 2).unwrap();
        assert_eq!(ds.images.data(), &[0.0, 1.0, 0.2]);
    }

    #[test]
    fn truncated_and_bad_label() {
        let mut bytes = encode_records(&fake_records(2, 0));
        bytes.pop();
        assert!(matches!(
            parse_records(&bytes, PIXELS, CLASSES, Path::new("x")),
            Err(DataError::Truncated { .. })
        ));
        let mut bytes = encode_records(&fake_records(2, 0));
        bytes[RECORD_BYTES] = 10;
        assert!(matches!(
            parse_records(&bytes, PIXELS, CLASSES, Path::new("x")),
            Err(DataError::BadLabel { index: 1, label: 10, .. })
        ));
    }

    #[test]
    fn missing_file_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_cifar10(dir.path()).unwrap_err();
        assert!(matches!(err, DataError::MissingFile(ref p) if p.ends_with("data_batch_1.bin")));
    }

    #[test]
    fn subset_loads_from_directory() {
        let dir = tempfile::tempdir().unwrap();
        for (i, f) in TRAIN_FILES.iter().enumerate() {
            write_records(&dir.path().join(f), &fake_records(3, i as u8)).unwrap();
        }
        write_records(&dir.path().join(TEST_FILE), &fake_records(2, 9)).unwrap();
        let (train, test) = load_cifar10(dir.path()).unwrap();
        assert_eq!((train.len(), test.len()), (15, 2));
        let (train, _) = load_cifar10_subset(dir.path(), Some(4), None).unwrap();
        assert_eq!(train.len(), 4);
        assert_eq!(train.labels, vec![0, 1, 2, 0]);
    }
}
