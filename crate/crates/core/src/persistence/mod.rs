//! On-disk formats: binary model and dataset files, TOML key and payload
//! files, and CSV export of experiment records.

mod binary;
mod csv;
mod dataset_file;
mod key_file;
mod model_file;

pub use self::csv::{parse_record_csv, record_to_csv, write_record_csv, RECORD_CSV_HEADER};
pub use dataset_file::{dataset_from_bytes, dataset_to_bytes, load_dataset, save_dataset, DATASET_FORMAT_VERSION, DATASET_MAGIC};
pub use key_file::{load_bits, load_key, save_bits, save_key, BitsFile, KeyFile, BITS_FORMAT_VERSION, KEY_FORMAT_VERSION};
pub use model_file::{load_model, model_from_bytes, model_to_bytes, save_model, MODEL_FORMAT_VERSION, MODEL_MAGIC};

use std::path::Path;

use crate::error::{Error, Result};

/// Writes through a sibling temporary file and renames it into place, so a
/// crash never leaves a half-written file under `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}
