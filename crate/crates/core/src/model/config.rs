use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::preproc::{GridSpec, ResidualMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    SingleEncoder,
    SingleEncoderSemantics,
    MultiEncoder,
    MultiEncoderJoint,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::SingleEncoder,
        Variant::SingleEncoderSemantics,
        Variant::MultiEncoder,
        Variant::MultiEncoderJoint,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::SingleEncoder => "single_encoder",
            Variant::SingleEncoderSemantics => "single_encoder_semantics",
            Variant::MultiEncoder => "multi_encoder",
            Variant::MultiEncoderJoint => "multi_encoder_joint",
        }
    }

    pub fn is_multi(&self) -> bool {
        matches!(self, Variant::MultiEncoder | Variant::MultiEncoderJoint)
    }

    pub fn has_joint(&self) -> bool {
        *self != Variant::MultiEncoder
    }

    pub fn uses_semantics(&self) -> bool {
        *self == Variant::SingleEncoderSemantics
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown variant {s:?}")))
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Internal layout of a downsampling block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BlockStyle {
    /// 5×5 and 3×3 branches side by side on the block input.
    Parallel,
    /// 3×3 branch applied to the 5×5 branch output.
    Sequential,
}

impl BlockStyle {
    pub fn as_str(&self) -> &'static str {
        match self {
            BlockStyle::Parallel => "parallel",
            BlockStyle::Sequential => "sequential",
        }
    }
}

impl FromStr for BlockStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "parallel" => Ok(BlockStyle::Parallel),
            "sequential" => Ok(BlockStyle::Sequential),
            other => Err(Error::InvalidConfig(format!("unknown block style {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ModelConfig {
    pub variant: Variant,
    pub residual_mode: ResidualMode,
    pub encoder_channels: [usize; 3],
    pub joint_channels: [usize; 4],
    /// Output widths of the upsampling blocks, coarsest first. Variants
    /// without the joint chain use the last three.
    pub decoder_channels: [usize; 5],
    pub rows: usize,
    pub cols: usize,
    pub block_style: BlockStyle,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk(Variant::MultiEncoderJoint, ResidualMode::Mul)
    }
}

impl ModelConfig {
    pub fn desk(variant: Variant, residual_mode: ResidualMode) -> Self {
        let spec = GridSpec::desk();
        ModelConfig {
            variant,
            residual_mode,
            encoder_channels: [8, 16, 32],
            joint_channels: [64, 64, 96, 96],
            decoder_channels: [64, 48, 32, 16, 8],
            rows: spec.rows(),
            cols: spec.cols(),
            block_style: BlockStyle::Parallel,
        }
    }

    pub fn paper(variant: Variant, residual_mode: ResidualMode) -> Self {
        let spec = GridSpec::paper();
        ModelConfig {
            variant,
            residual_mode,
            encoder_channels: [16, 32, 64],
            joint_channels: [128, 128, 192, 192],
            decoder_channels: [128, 96, 64, 32, 16],
            rows: spec.rows(),
            cols: spec.cols(),
            block_style: BlockStyle::Parallel,
        }
    }

    pub fn encoders(&self) -> usize {
        if self.variant.is_multi() {
            3
        } else {
            1
        }
    }

    /// Channels fed to each encoder: its frame(s), the residual and, for
    /// the semantics variant, one semantic image per frame.
    pub fn encoder_input_channels(&self) -> usize {
        match self.variant {
            Variant::MultiEncoder | Variant::MultiEncoderJoint => 2,
            Variant::SingleEncoder => 4,
            Variant::SingleEncoderSemantics => 7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 || self.rows % 32 != 0 || self.cols % 32 != 0 {
            return Err(Error::InvalidConfig(format!(
                "grid {}x{} must be non-empty and divisible by 32",
                self.rows, self.cols
            )));
        }
        let down = self.encoder_channels.iter().chain(&self.joint_channels);
        if down.clone().any(|&c| c == 0 || c % 2 != 0) {
            return Err(Error::InvalidConfig("encoder and joint channel counts must be positive and even".into()));
        }
        if self.decoder_channels.contains(&0) {
            return Err(Error::InvalidConfig("decoder channel counts must be positive".into()));
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let list = |v: &[usize]| v.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",");
        vec![
            ("variant".into(), self.variant.to_string()),
            ("residual_mode".into(), self.residual_mode.to_string()),
            ("encoder_channels".into(), list(&self.encoder_channels)),
            ("joint_channels".into(), list(&self.joint_channels)),
            ("decoder_channels".into(), list(&self.decoder_channels)),
            ("rows".into(), self.rows.to_string()),
            ("cols".into(), self.cols.to_string()),
            ("block_style".into(), self.block_style.as_str().into()),
        ]
    }

    pub fn from_pairs(map: &BTreeMap<&str, &str>) -> Result<Self> {
        let get = |k: &str| {
            map.get(k)
                .copied()
                .ok_or_else(|| Error::InvalidConfig(format!("missing model key `{k}`")))
        };
        let num = |k: &str| -> Result<usize> {
            let v = get(k)?;
            v.parse().map_err(|_| Error::InvalidConfig(format!("bad value {v:?} for `{k}`")))
        };
        fn list<const N: usize>(k: &str, v: &str) -> Result<[usize; N]> {
            let parsed: Vec<usize> = v
                .split(',')
                .map(|s| s.trim().parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::InvalidConfig(format!("bad channel list {v:?} for `{k}`")))?;
            parsed
                .try_into()
                .map_err(|_| Error::InvalidConfig(format!("`{k}` needs {N} entries")))
        }
        let cfg = ModelConfig {
            variant: get("variant")?.parse()?,
            residual_mode: get("residual_mode")?.parse()?,
            encoder_channels: list("encoder_channels", get("encoder_channels")?)?,
            joint_channels: list("joint_channels", get("joint_channels")?)?,
            decoder_channels: list("decoder_channels", get("decoder_channels")?)?,
            rows: num("rows")?,
            cols: num("cols")?,
            block_style: match map.get("block_style") {
                Some(s) => s.parse()?,
                None => BlockStyle::Parallel,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
