//! Binary dataset file.
//!
//! ```text
//! "NNWD"  u32 version
//! u8 split (0 train, 1 test, 2 part) u32 part index
//! u32 channels, u32 height, u32 width, u32 classes, u32 count
//! u32 labels[count]
//! f32 pixels[count * channels * height * width]
//! u64 FNV-1a 64 of every preceding byte
//! ```

use std::path::Path;

use super::binary::{Reader, Writer};
use super::{read_file, write_atomic};
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::nn::Shape;

pub const DATASET_MAGIC: &[u8; 4] = b"NNWD";
pub const DATASET_FORMAT_VERSION: u32 = 1;

pub fn dataset_to_bytes(ds: &Dataset) -> Result<Vec<u8>> {
    ds.validate()?;
    let mut w = Writer::default();
    w.bytes(DATASET_MAGIC);
    w.u32(DATASET_FORMAT_VERSION as usize)?;
    let (tag, part) = match ds.split {
        Split::Train => (0, 0),
        Split::Test => (1, 0),
        Split::Part(i) => (2, i),
    };
    w.u8(tag);
    w.u32(part)?;
    for v in [ds.shape.channels, ds.shape.height, ds.shape.width, ds.num_classes, ds.len()] {
        w.u32(v)?;
    }
    for &l in &ds.labels {
        w.u32(l)?;
    }
    w.f32s(&ds.images);
    Ok(w.finish())
}

pub fn dataset_from_bytes(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader::open(bytes, DATASET_MAGIC, DATASET_FORMAT_VERSION, "dataset")?;
    let split = match (r.u8()?, r.u32()?) {
        (0, _) => Split::Train,
        (1, _) => Split::Test,
        (2, i) => Split::Part(i),
        (t, _) => return Err(Error::Invalid(format!("unknown split tag {t}"))),
    };
    let shape = Shape::new(r.u32()?, r.u32()?, r.u32()?);
    let num_classes = r.u32()?;
    let count = r.u32()?;
    let labels = (0..count).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let pixels = count
        .checked_mul(shape.len())
        .ok_or_else(|| Error::Invalid("dataset size overflow".into()))?;
    let images = r.f32s(pixels)?;
    r.end()?;
    Dataset::new(images, labels, shape, num_classes, split)
        .map_err(|e| Error::Invalid(format!("dataset file: {e}")))
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &dataset_to_bytes(ds)?)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    dataset_from_bytes(&read_file(path.as_ref())?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let ds = Dataset::new(
            vec![0.5, -1.0, 2.0, 0.25, 0.0, 3.5],
            vec![1, 0, 2],
            Shape::new(1, 1, 2),
            3,
            Split::Part(4),
        )
        .unwrap();
        let bytes = dataset_to_bytes(&ds).unwrap();
        assert_eq!(dataset_from_bytes(&bytes).unwrap(), ds);
        assert!(dataset_from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
