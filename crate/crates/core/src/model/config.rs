use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Encoder family and ablation switches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Cheap causal convolutions on Q/K/V, cheap-conv sequence head.
    C3Sasr,
    /// `C3Sasr` plus the context-weighted head `α·o_self + (1−α)·o_cxt`.
    C3Csasr,
    /// Plain self-attention encoder with linear feed-forward layers.
    Sasrec,
    /// `C3Sasr` with linear feed-forward layers in place of the cheap head.
    Ffn,
    /// `C3Sasr` without the convolutions in front of Q/K/V.
    NoCc,
    /// `C3Sasr` with full causal convolutions in place of cheap ones.
    RawConv,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::C3Sasr,
        Variant::C3Csasr,
        Variant::Sasrec,
        Variant::Ffn,
        Variant::NoCc,
        Variant::RawConv,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::C3Sasr => "C3SASR",
            Variant::C3Csasr => "C3CSASR",
            Variant::Sasrec => "SASRec",
            Variant::Ffn => "FFN",
            Variant::NoCc => "NoCC",
            Variant::RawConv => "RawConv",
        }
    }

    /// Whether Q/K/V inputs pass through a causal convolution.
    pub fn convolves_attention(self) -> bool {
        matches!(
            self,
            Variant::C3Sasr | Variant::C3Csasr | Variant::Ffn | Variant::RawConv
        )
    }

    /// Whether feed-forward transforms are convolutional (cheap or raw).
    pub fn convolutional_feed_forward(self) -> bool {
        matches!(
            self,
            Variant::C3Sasr | Variant::C3Csasr | Variant::NoCc | Variant::RawConv
        )
    }

    pub fn uses_raw_conv(self) -> bool {
        self == Variant::RawConv
    }

    pub fn has_context_head(self) -> bool {
        self == Variant::C3Csasr
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        Ok(match key.as_str() {
            "c3sasr" => Variant::C3Sasr,
            "c3csasr" => Variant::C3Csasr,
            "sasrec" => Variant::Sasrec,
            "ffn" => Variant::Ffn,
            "nocc" | "wocc" => Variant::NoCc,
            "rawconv" => Variant::RawConv,
            _ => return Err(Error::Config(format!("unknown variant `{s}`"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Item / sequence representation width `d` (even).
    pub dim: usize,
    /// Causal window `k` in front of Q and K.
    pub kernel_size: usize,
    /// Context window `k2` of the sequence head.
    pub head_kernel: usize,
    /// Weight of the self representation in the context-weighted head.
    pub alpha: f64,
    /// Weight of the calibration term in the training objective.
    pub lambda: f64,
    pub num_blocks: usize,
    pub max_len: usize,
    pub variant: Variant,
    pub dropout: f64,
    /// Apply a feed-forward sub-layer inside every attention block.
    pub block_ffn: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 64,
            kernel_size: 3,
            head_kernel: 3,
            alpha: 0.8,
            lambda: 0.0,
            num_blocks: 2,
            max_len: 50,
            variant: Variant::C3Sasr,
            dropout: 0.2,
            block_ffn: true,
        }
    }
}

impl ModelConfig {
    /// Defaults for long MovieLens-style histories.
    pub fn movielens() -> Self {
        ModelConfig {
            max_len: 200,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.dim % 2 != 0 {
            return Err(Error::Config(format!(
                "dim must be even and positive, got {}",
                self.dim
            )));
        }
        if self.kernel_size == 0 || self.head_kernel == 0 {
            return Err(Error::Config("kernel sizes must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!(
                "alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!(
                "lambda must lie in [0, 1], got {}",
                self.lambda
            )));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }
}
