use std::path::Path;

use super::{ChannelStats, Dataset, Split};
use crate::error::{Error, Result};
use crate::nn::Shape;

/// One label byte followed by 1024 red, 1024 green and 1024 blue bytes (32x32 row-major).
pub const CIFAR_RECORD_LEN: usize = 3073;
const PIXELS: usize = 3072;
const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
const TEST_FILE: &str = "test_batch.bin";

/// Parses CIFAR-10 binary records; pixels are scaled to `[0, 1]`.
pub fn parse_cifar10_records(bytes: &[u8]) -> Result<(Vec<f32>, Vec<usize>)> {
    let complete = bytes.len() / CIFAR_RECORD_LEN * CIFAR_RECORD_LEN;
    if complete != bytes.len() || bytes.is_empty() {
        return Err(Error::Data {
            offset: complete as u64,
            detail: format!(
                "file length {} is not a positive multiple of {CIFAR_RECORD_LEN}",
                bytes.len()
            ),
        });
    }
    let n = bytes.len() / CIFAR_RECORD_LEN;
    let mut images = Vec::with_capacity(n * PIXELS);
    let mut labels = Vec::with_capacity(n);
    for (i, record) in bytes.chunks_exact(CIFAR_RECORD_LEN).enumerate() {
        let label = record[0] as usize;
        if label >= 10 {
            return Err(Error::Data {
                offset: (i * CIFAR_RECORD_LEN) as u64,
                detail: format!("label byte {label} is not a CIFAR-10 class"),
            });
        }
        labels.push(label);
        images.extend(record[1..].iter().map(|&p| p as f32 / 255.0));
    }
    Ok((images, labels))
}

fn read_batch(path: &Path) -> Result<(Vec<f32>, Vec<usize>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_cifar10_records(&bytes).map_err(|e| match e {
        Error::Data { offset, detail } => Error::Data {
            offset,
            detail: format!("{}: {detail}", path.display()),
        },
        other => other,
    })
}

/// Loads `data_batch_{1..5}.bin` and `test_batch.bin` from `dir`, centered
/// with the training split's channel means.
pub fn load_cifar10_binary(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    let shape = Shape::new(3, 32, 32);
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for name in TRAIN_FILES {
        let (i, l) = read_batch(&dir.join(name))?;
        images.extend(i);
        labels.extend(l);
    }
    let mut train = Dataset::new(images, labels, shape, 10, Split::Train)?;
    let (ti, tl) = read_batch(&dir.join(TEST_FILE))?;
    let mut test = Dataset::new(ti, tl, shape, 10, Split::Test)?;
    let stats = ChannelStats::compute(&train);
    stats.apply(&mut train);
    stats.apply(&mut test);
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, fill: impl Fn(usize) -> u8) -> Vec<u8> {
        let mut r = vec![label];
        r.extend((0..PIXELS).map(fill));
        r
    }

    #[test]
    fn two_records() {
        let mut bytes = record(3, |i| (i % 256) as u8);
        bytes.extend(record(7, |_| 255));
        let (images, labels) = parse_cifar10_records(&bytes).unwrap();
        assert_eq!(labels, vec![3, 7]);
        assert_eq!(images.len(), 2 * PIXELS);
        assert_eq!(images[1], 1.0 / 255.0);
        // Green plane of record 0 starts at pixel 1024.
        assert_eq!(images[1024], 0.0);
        assert_eq!(images[PIXELS], 1.0);
    }

    #[test]
    fn truncated_file_names_offset_zero() {
        let err = parse_cifar10_records(&[0u8; 3072]).unwrap_err();
        assert!(matches!(err, Error::Data { offset: 0, .. }), "{err}");
        let mut bytes = record(1, |_| 0);
        bytes.extend([0u8; 10]);
        assert!(matches!(
            parse_cifar10_records(&bytes).unwrap_err(),
            Error::Data { offset: 3073, .. }
        ));
    }

    #[test]
    fn bad_label_rejected() {
        assert!(parse_cifar10_records(&record(10, |_| 0)).is_err());
    }
}
