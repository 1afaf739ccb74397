use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// How the rows of a key matrix are constructed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KeyFamily {
    /// One `1` per row: each bit lives in a single mean parameter.
    Direct,
    /// One `+1` and one `-1` per row: each bit lives in a difference of two parameters.
    Diff,
    /// I.i.d. standard normal entries: each bit is spread over every parameter.
    Random,
}

impl KeyFamily {
    pub const ALL: [KeyFamily; 3] = [KeyFamily::Direct, KeyFamily::Diff, KeyFamily::Random];

    pub fn as_str(&self) -> &'static str {
        match self {
            KeyFamily::Direct => "direct",
            KeyFamily::Diff => "diff",
            KeyFamily::Random => "random",
        }
    }
}

impl fmt::Display for KeyFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for KeyFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(KeyFamily::Direct),
            "diff" => Ok(KeyFamily::Diff),
            "random" => Ok(KeyFamily::Random),
            other => Err(Error::config(format!(
                "unknown key family {other:?} (expected direct, diff or random)"
            ))),
        }
    }
}

/// Secret `T x M` projection used both to embed and to extract a watermark.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyMatrix {
    family: KeyFamily,
    bits: usize,
    dim: usize,
    seed: u64,
    values: Vec<f64>,
}

impl KeyMatrix {
    /// Deterministic key from `(family, T, M, seed)`.
    ///
    /// Draws from `SplitMix64::new(seed)`, row by row:
    /// - direct: column `below(M)` is set to 1;
    /// - diff: `plus = below(M)`, then `minus = below(M - 1)`, bumped by one
    ///   when `minus >= plus`, so the two columns always differ;
    /// - random: `normal()` for every entry in row-major order.
    ///
    /// Column choices are independent across rows, so two rows may share a column.
    pub fn generate(family: KeyFamily, bits: usize, dim: usize, seed: u64) -> Result<Self> {
        if bits == 0 || dim == 0 {
            return Err(Error::config("key needs T >= 1 and M >= 1"));
        }
        if family == KeyFamily::Diff && dim < 2 {
            return Err(Error::config("diff keys need M >= 2"));
        }
        let mut rng = SplitMix64::new(seed);
        let mut values = vec![0.0; bits * dim];
        for row in values.chunks_exact_mut(dim) {
            match family {
                KeyFamily::Direct => row[rng.below(dim as u64) as usize] = 1.0,
                KeyFamily::Diff => {
                    let plus = rng.below(dim as u64) as usize;
                    let mut minus = rng.below(dim as u64 - 1) as usize;
                    if minus >= plus {
                        minus += 1;
                    }
                    row[plus] = 1.0;
                    row[minus] = -1.0;
                }
                KeyFamily::Random => row.iter_mut().for_each(|x| *x = rng.normal()),
            }
        }
        Ok(KeyMatrix {
            family,
            bits,
            dim,
            seed,
            values,
        })
    }

    /// Key from explicit row-major values, checked against the family invariant.
    pub fn from_values(family: KeyFamily, bits: usize, dim: usize, seed: u64, values: Vec<f64>) -> Result<Self> {
        if bits == 0 || dim == 0 || values.len() != bits * dim {
            return Err(Error::Invalid(format!(
                "key matrix has {} values, expected {bits} x {dim}",
                values.len()
            )));
        }
        let key = KeyMatrix {
            family,
            bits,
            dim,
            seed,
            values,
        };
        key.check_family()?;
        Ok(key)
    }

    /// Verifies the structural invariant of the key's family.
    pub fn check_family(&self) -> Result<()> {
        for (j, row) in self.rows().enumerate() {
            let ok = match self.family {
                KeyFamily::Direct => {
                    row.iter().filter(|&&x| x == 1.0).count() == 1
                        && row.iter().all(|&x| x == 0.0 || x == 1.0)
                }
                KeyFamily::Diff => {
                    row.iter().filter(|&&x| x == 1.0).count() == 1
                        && row.iter().filter(|&&x| x == -1.0).count() == 1
                        && row.iter().all(|&x| x == 0.0 || x == 1.0 || x == -1.0)
                }
                KeyFamily::Random => row.iter().all(|x| x.is_finite()),
            };
            if !ok {
                return Err(Error::Invalid(format!(
                    "row {j} violates the {} key structure",
                    self.family
                )));
            }
        }
        Ok(())
    }

    pub fn family(&self) -> KeyFamily {
        self.family
    }

    /// Number of embedded bits `T`.
    pub fn bits(&self) -> usize {
        self.bits
    }

    /// Length `M` of the filter-mean vector the key projects.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.values[j * self.dim..(j + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.dim)
    }
}
