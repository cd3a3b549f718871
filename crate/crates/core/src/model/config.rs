use std::fmt;

use crate::error::{Error, Result};

/// How parameters are divided between the contrastive and predictive tasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Everything shared; both heads read the same output.
    Simple,
    /// Final dense layer split in two row-halves.
    Split,
    /// Task-specific batch norms inside residual blocks.
    BatchNorm,
    /// 1x1 adapters applied to each conv output.
    Series,
    /// 1x1 adapters beside each conv.
    Parallel,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Simple,
        Variant::Split,
        Variant::BatchNorm,
        Variant::Series,
        Variant::Parallel,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Simple => "simple",
            Variant::Split => "split",
            Variant::BatchNorm => "bn",
            Variant::Series => "series",
            Variant::Parallel => "parallel",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown backbone variant `{s}` (simple, split, bn, series, parallel)"
                ))
            })
    }

    /// Variants that run a separate trunk pass per head.
    pub fn has_adapters(self) -> bool {
        matches!(self, Variant::BatchNorm | Variant::Series | Variant::Parallel)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub variant: Variant,
    /// Channel width of each stage; stages after the first halve resolution.
    pub widths: Vec<usize>,
    /// Residual blocks per stage.
    pub depth: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    /// 3x3 stride-2 max pool after the stem.
    pub stem_pool: bool,
    pub output_dim: usize,
    pub in_channels: usize,
}

impl BackboneConfig {
    /// Small four-stage network used for training at desk scale.
    pub fn desk(variant: Variant) -> Self {
        BackboneConfig {
            variant,
            widths: vec![16, 32, 64, 128],
            depth: 1,
            stem_kernel: 3,
            stem_stride: 2,
            stem_pool: false,
            output_dim: 64,
            in_channels: 3,
        }
    }

    /// ResNet-18 shape: 7x7 stem with pooling, two blocks per stage.
    pub fn resnet18(variant: Variant) -> Self {
        BackboneConfig {
            variant,
            widths: vec![64, 128, 256, 512],
            depth: 2,
            stem_kernel: 7,
            stem_stride: 2,
            stem_pool: true,
            output_dim: 1000,
            in_channels: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.widths.is_empty() || self.widths.contains(&0) {
            return bad(format!("widths must be non-empty and positive, got {:?}", self.widths));
        }
        if self.depth == 0 {
            return bad("depth must be >= 1".into());
        }
        if self.stem_kernel == 0 || self.stem_stride == 0 {
            return bad("stem kernel and stride must be >= 1".into());
        }
        if self.output_dim == 0 || self.in_channels == 0 {
            return bad("output dimension and input channels must be >= 1".into());
        }
        if self.variant == Variant::Split && self.output_dim % 2 != 0 {
            return bad(format!("split variant needs an even output dimension, got {}", self.output_dim));
        }
        Ok(())
    }
}
