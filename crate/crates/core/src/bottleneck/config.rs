use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::{PoolingMode, PoolingOp, PoolingPosition};

/// Axis along which the encoding is cut into key-sized slices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Segmentation {
    /// Each token's hidden vector is cut into `h / d_key` contiguous slices.
    Hidden,
    /// Each hidden channel's token-axis vector is cut into `d_key`-long
    /// slices; trailing tokens that do not fill a slice are dropped.
    Token,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DecoderKind {
    #[serde(rename = "parametric")]
    Parametric,
    #[serde(rename = "non-parametric")]
    NonParametric,
}

macro_rules! str_enum {
    ($ty:ty { $($name:literal => $variant:expr),+ $(,)? }) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s.to_ascii_lowercase().as_str() {
                    $($name => Ok($variant),)+
                    other => Err(Error::InvalidConfig(format!(
                        concat!("unknown ", stringify!($ty), " {:?}"), other
                    ))),
                }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                $(if *self == $variant { return f.write_str($name); })+
                unreachable!()
            }
        }
    };
}

str_enum!(Segmentation { "hidden" => Segmentation::Hidden, "token" => Segmentation::Token });
str_enum!(DecoderKind {
    "parametric" => DecoderKind::Parametric,
    "non-parametric" => DecoderKind::NonParametric,
});

/// Shape of the encodings a bottleneck consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub t: usize,
    pub h: usize,
    pub cls_flag: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BottleneckConfig {
    pub segmentation: Segmentation,
    pub d_key: usize,
    /// Keys per head codebook (K).
    pub codebook_size: usize,
    pub d_value: usize,
    pub pooling: PoolingOp,
    pub decoder: DecoderKind,
    /// Weight on the old statistic in the EMA update.
    pub ema_decay: f64,
    pub init_epochs: usize,
}

impl Default for BottleneckConfig {
    fn default() -> Self {
        BottleneckConfig {
            segmentation: Segmentation::Hidden,
            d_key: 12,
            codebook_size: 4096,
            d_value: 12,
            pooling: PoolingOp {
                mode: PoolingMode::Mean,
                position: PoolingPosition::After,
            },
            decoder: DecoderKind::NonParametric,
            ema_decay: 0.2,
            init_epochs: 3,
        }
    }
}

impl BottleneckConfig {
    /// Value width used when none is given: the class count for the
    /// non-parametric decoder (its logits are the pooled values), `d_key`
    /// for the parametric one.
    pub fn default_d_value(decoder: DecoderKind, d_key: usize, num_classes: usize) -> usize {
        match decoder {
            DecoderKind::NonParametric => num_classes,
            DecoderKind::Parametric => d_key,
        }
    }

    pub fn validate(&self, layout: Layout) -> Result<()> {
        let err = |field: &str, msg: String| Err(Error::InvalidConfig(format!("{field}: {msg}")));
        if self.d_key == 0 {
            return err("d_key", "must be positive".into());
        }
        if self.codebook_size == 0 {
            return err("codebook_size", "must be positive".into());
        }
        if self.d_value == 0 {
            return err("d_value", "must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return err("ema_decay", format!("{} outside [0, 1]", self.ema_decay));
        }
        if layout.t == 0 || layout.h == 0 {
            return err("layout", "t and h must be positive".into());
        }
        match self.segmentation {
            Segmentation::Hidden => {
                if !layout.h.is_multiple_of(self.d_key) {
                    return err(
                        "d_key",
                        format!("{} does not divide hidden size {}", self.d_key, layout.h),
                    );
                }
            }
            Segmentation::Token => {
                if self.pooling.position == PoolingPosition::Before {
                    return err(
                        "pooling.position",
                        "token segmentation requires pooling after the bottleneck".into(),
                    );
                }
                if layout.t < self.d_key {
                    return err(
                        "d_key",
                        format!("{} exceeds token length {}", self.d_key, layout.t),
                    );
                }
            }
        }
        if self.pooling.mode == PoolingMode::Cls && !layout.cls_flag {
            return err(
                "pooling.mode",
                "CLS pooling needs encodings with a sequence-level token".into(),
            );
        }
        Ok(())
    }

    /// Number of heads (C): `h / d_key` for hidden segmentation,
    /// `floor(t / d_key)` for token segmentation.
    pub fn num_heads(&self, layout: Layout) -> usize {
        match self.segmentation {
            Segmentation::Hidden => layout.h / self.d_key,
            Segmentation::Token => layout.t / self.d_key,
        }
    }
}
