use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::blocks::sdta_split;
use crate::error::{Error, Result};

/// Token mixer used in the third stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attention {
    Sdta,
    /// Ablation variant, heavier channel attention.
    Mdta,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    S1,
    S2,
    S3,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::S1, Variant::S2, Variant::S3];

    pub fn config(self) -> ModelConfig {
        let (depths, dims) = match self {
            Variant::S1 => ([3, 8, 5], [128, 224, 320]),
            Variant::S2 => ([3, 9, 5], [128, 224, 448]),
            Variant::S3 => ([4, 9, 6], [128, 384, 448]),
        };
        ModelConfig {
            variant: self.to_string(),
            depths,
            dims,
            ffn_ratio: 2,
            num_classes: 1000,
            input_resolution: 224,
            attention: Attention::Sdta,
            bn_eps: 1e-5,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::S1 => "s1",
            Variant::S2 => "s2",
            Variant::S3 => "s3",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "s1" => Ok(Variant::S1),
            "s2" => Ok(Variant::S2),
            "s3" => Ok(Variant::S3),
            other => Err(Error::Config(format!("unknown variant `{other}` (expected s1, s2 or s3)"))),
        }
    }
}

/// Three-stage pyramid hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: String,
    pub depths: [usize; 3],
    pub dims: [usize; 3],
    pub ffn_ratio: usize,
    pub num_classes: usize,
    pub input_resolution: usize,
    pub attention: Attention,
    pub bn_eps: f64,
}

impl ModelConfig {
    pub fn with_attention(mut self, attention: Attention) -> Self {
        self.attention = attention;
        self
    }

    /// Widths of the four stride-2 stem convolutions: `dims[0]` / 8, 4, 2, 1.
    pub fn stem_channels(&self) -> [usize; 4] {
        let d = self.dims[0];
        [d / 8, d / 4, d / 2, d]
    }

    /// Feature-map side at the entry of each stage.
    pub fn stage_resolutions(&self, input: usize) -> [usize; 3] {
        let down = |s: usize| (s + 2 - 3) / 2 + 1;
        let s1 = (0..4).fold(input, |s, _| down(s));
        let s2 = down(s1);
        [s1, s2, down(s2)]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.depths.iter().any(|&d| d == 0) {
            return bad(format!("every stage needs at least one block, got {:?}", self.depths));
        }
        if self.dims[0] == 0 || self.dims[0] % 8 != 0 {
            return bad(format!("dims[0] = {} must be a positive multiple of 8", self.dims[0]));
        }
        if self.dims.iter().any(|&d| d == 0) {
            return bad("stage widths must be positive".into());
        }
        if self.attention == Attention::Sdta {
            sdta_split(self.dims[2]).map_err(|_| Error::Config(format!("dims[2] = {} must be divisible by 4", self.dims[2])))?;
        }
        if self.ffn_ratio == 0 || self.num_classes == 0 {
            return bad("ffn_ratio and num_classes must be positive".into());
        }
        if self.input_resolution == 0 || self.input_resolution % 16 != 0 {
            return bad(format!("input resolution {} must be a multiple of 16", self.input_resolution));
        }
        if !(self.bn_eps > 0.0) {
            return bad("bn_eps must be positive".into());
        }
        Ok(())
    }
}
