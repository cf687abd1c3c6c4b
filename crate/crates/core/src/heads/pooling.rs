use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::Matrix;
use crate::Float;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolingMode {
    /// Average of the valid token rows.
    Mean,
    /// Row 0, the sequence-level special token.
    Cls,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolingPosition {
    Before,
    After,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PoolingOp {
    pub mode: PoolingMode,
    pub position: PoolingPosition,
}

impl FromStr for PoolingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mean" => Ok(PoolingMode::Mean),
            "cls" => Ok(PoolingMode::Cls),
            other => Err(Error::InvalidConfig(format!("unknown pooling mode {other:?}"))),
        }
    }
}

impl FromStr for PoolingPosition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "before" => Ok(PoolingPosition::Before),
            "after" => Ok(PoolingPosition::After),
            other => Err(Error::InvalidConfig(format!(
                "unknown pooling position {other:?}"
            ))),
        }
    }
}

impl fmt::Display for PoolingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PoolingMode::Mean => "mean",
            PoolingMode::Cls => "cls",
        })
    }
}

impl fmt::Display for PoolingPosition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PoolingPosition::Before => "before",
            PoolingPosition::After => "after",
        })
    }
}

/// Pools a `t x h` encoding to an `h`-vector. Padding rows at and beyond
/// `valid_tokens` never contribute.
pub fn pool(z: &Matrix, mode: PoolingMode, valid_tokens: usize, cls_flag: bool) -> Result<Vec<Float>> {
    if valid_tokens == 0 || valid_tokens > z.rows() {
        return Err(Error::InvalidInput(format!(
            "valid_tokens {valid_tokens} outside 1..={}",
            z.rows()
        )));
    }
    match mode {
        PoolingMode::Cls => {
            if !cls_flag {
                return Err(Error::InvalidConfig(
                    "CLS pooling on encodings without a sequence-level token".into(),
                ));
            }
            Ok(z.row(0).to_vec())
        }
        PoolingMode::Mean => {
            let mut acc = vec![0f64; z.cols()];
            for r in 0..valid_tokens {
                for (a, &x) in acc.iter_mut().zip(z.row(r)) {
                    *a += x as f64;
                }
            }
            let n = valid_tokens as f64;
            Ok(acc.into_iter().map(|a| (a / n) as Float).collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_token_mean_equals_cls() {
        let z = Matrix::from_rows(&[vec![1.5, -2.0], vec![9.0, 9.0]]).unwrap();
        assert_eq!(pool(&z, PoolingMode::Mean, 1, true).unwrap(), vec![1.5, -2.0]);
        assert_eq!(pool(&z, PoolingMode::Cls, 1, true).unwrap(), vec![1.5, -2.0]);
    }

    #[test]
    fn mean_of_valid_rows() {
        let z = Matrix::from_rows(&[vec![1.0, 1.0], vec![3.0, 3.0], vec![0.0, 0.0]]).unwrap();
        assert_eq!(pool(&z, PoolingMode::Mean, 2, false).unwrap(), vec![2.0, 2.0]);
        let mut padded = z.clone();
        padded.row_mut(2).copy_from_slice(&[100.0, -100.0]);
        assert_eq!(
            pool(&padded, PoolingMode::Mean, 2, false).unwrap(),
            pool(&z, PoolingMode::Mean, 2, false).unwrap()
        );
    }

    #[test]
    fn errors() {
        let z = Matrix::zeros(2, 2);
        assert!(matches!(pool(&z, PoolingMode::Cls, 1, false), Err(Error::InvalidConfig(_))));
        assert!(pool(&z, PoolingMode::Mean, 0, false).is_err());
        assert!(pool(&z, PoolingMode::Mean, 3, false).is_err());
    }
}
