//! TOML key and payload files.
//!
//! A key file stores the family, shape, seed and target layer. Keys that
//! cannot be regenerated from those (or when asked) also carry the explicit
//! matrix as a row-major `values` array. Seeds are written as decimal
//! strings because TOML integers are signed 64-bit.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{read_file, write_atomic};
use crate::error::{Error, Result};
use crate::watermark::{KeyFamily, KeyMatrix, WatermarkBits};

pub const KEY_FORMAT_VERSION: u32 = 1;
pub const BITS_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyFile {
    pub version: u32,
    pub family: String,
    pub bits: usize,
    pub dim: usize,
    pub seed: String,
    pub layer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<f64>>,
}

impl KeyFile {
    pub fn new(key: &KeyMatrix, layer: &str, explicit: bool) -> Self {
        KeyFile {
            version: KEY_FORMAT_VERSION,
            family: key.family().to_string(),
            bits: key.bits(),
            dim: key.dim(),
            seed: key.seed().to_string(),
            layer: layer.to_string(),
            values: explicit.then(|| key.values().to_vec()),
        }
    }

    /// Rebuilds the key. An explicit matrix must satisfy the family
    /// invariants; otherwise the key is regenerated from the seed.
    pub fn to_key(&self) -> Result<KeyMatrix> {
        if self.version == 0 || self.version > KEY_FORMAT_VERSION {
            return Err(Error::Version { found: self.version, supported: KEY_FORMAT_VERSION });
        }
        let family: KeyFamily = self.family.parse().map_err(|e| Error::Invalid(format!("key file: {e}")))?;
        let seed: u64 = self
            .seed
            .parse()
            .map_err(|_| Error::Invalid(format!("key file: bad seed {:?}", self.seed)))?;
        match &self.values {
            Some(v) => KeyMatrix::from_values(family, self.bits, self.dim, seed, v.clone())
                .map_err(|e| Error::Invalid(format!("key file: {e}"))),
            None => KeyMatrix::generate(family, self.bits, self.dim, seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BitsFile {
    pub version: u32,
    pub bits: usize,
    pub payload: String,
}

pub fn save_key(key: &KeyMatrix, layer: &str, explicit: bool, path: impl AsRef<Path>) -> Result<()> {
    let text = toml::to_string(&KeyFile::new(key, layer, explicit))
        .map_err(|e| Error::config(format!("cannot encode key: {e}")))?;
    write_atomic(path.as_ref(), text.as_bytes())
}

/// Returns the key and its target layer.
pub fn load_key(path: impl AsRef<Path>) -> Result<(KeyMatrix, String)> {
    let doc: KeyFile = parse_toml(path.as_ref())?;
    Ok((doc.to_key()?, doc.layer))
}

pub fn save_bits(bits: &WatermarkBits, path: impl AsRef<Path>) -> Result<()> {
    let doc = BitsFile { version: BITS_FORMAT_VERSION, bits: bits.len(), payload: bits.to_string() };
    let text = toml::to_string(&doc).map_err(|e| Error::config(format!("cannot encode payload: {e}")))?;
    write_atomic(path.as_ref(), text.as_bytes())
}

pub fn load_bits(path: impl AsRef<Path>) -> Result<WatermarkBits> {
    let doc: BitsFile = parse_toml(path.as_ref())?;
    if doc.version == 0 || doc.version > BITS_FORMAT_VERSION {
        return Err(Error::Version { found: doc.version, supported: BITS_FORMAT_VERSION });
    }
    let bits: WatermarkBits = doc.payload.parse().map_err(|e| Error::Invalid(format!("payload file: {e}")))?;
    if bits.len() != doc.bits {
        return Err(Error::Invalid(format!(
            "payload file declares {} bits but holds {}",
            doc.bits,
            bits.len()
        )));
    }
    Ok(bits)
}

fn parse_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_file(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|_| Error::Invalid(format!("{} is not UTF-8", path.display())))?;
    toml::from_str(text).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_round_trips_with_and_without_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("k.toml");
        for family in KeyFamily::ALL {
            let key = KeyMatrix::generate(family, 5, 40, u64::MAX - 3).unwrap();
            for explicit in [false, true] {
                save_key(&key, "conv4", explicit, &path).unwrap();
                let (back, layer) = load_key(&path).unwrap();
                assert_eq!(back, key);
                assert_eq!(layer, "conv4");
            }
        }
    }

    #[test]
    fn tampered_explicit_key_rejected() {
        let key = KeyMatrix::generate(KeyFamily::Direct, 2, 6, 1).unwrap();
        let mut doc = KeyFile::new(&key, "conv1", true);
        doc.values.as_mut().unwrap()[0] = 0.5;
        assert!(matches!(doc.to_key(), Err(Error::Invalid(_))));
        let mut newer = KeyFile::new(&key, "conv1", false);
        newer.version = 9;
        assert!(matches!(newer.to_key(), Err(Error::Version { .. })));
    }

    #[test]
    fn bits_round_trip_and_length_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.toml");
        let bits: WatermarkBits = "10110".parse().unwrap();
        save_bits(&bits, &path).unwrap();
        assert_eq!(load_bits(&path).unwrap(), bits);
        std::fs::write(&path, "version = 1\nbits = 4\npayload = \"10110\"\n").unwrap();
        assert!(load_bits(&path).is_err());
    }
}
