use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Family {
    ItrackerMhsa,
    Botnet,
    Hrnet,
    Resnest,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::ItrackerMhsa, Family::Botnet, Family::Hrnet, Family::Resnest];

    pub fn name(self) -> &'static str {
        match self {
            Family::ItrackerMhsa => "ITRACKER_MHSA",
            Family::Botnet => "BOTNET",
            Family::Hrnet => "HRNET",
            Family::Resnest => "RESNEST",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        Family::ALL
            .into_iter()
            .find(|f| f.name() == norm || (norm == "ITRACKER" && *f == Family::ItrackerMhsa))
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown architecture {s:?}; expected one of ITRACKER_MHSA, BOTNET, HRNET, RESNEST"
                ))
            })
    }
}

/// Per-family architecture knobs. Channel-like values are given at width
/// multiplier 1 and scaled by [`ModelConfig::ch`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FamilyParams {
    /// Fusion token width (ITRACKER_MHSA).
    pub d_model: usize,
    pub num_heads: usize,
    pub encoder_layers: usize,
    /// Attention heads inside bottleneck transformer blocks (BOTNET).
    pub bot_heads: usize,
    pub radix: usize,
    pub cardinality: usize,
    /// Parallel resolution branches (HRNET).
    pub branches: usize,
    /// Blocks per stage for all families.
    pub blocks_per_stage: usize,
    /// Hidden width of the regression heads (not scaled).
    pub head_hidden: usize,
}

impl Default for FamilyParams {
    fn default() -> Self {
        FamilyParams {
            d_model: 256,
            num_heads: 8,
            encoder_layers: 1,
            bot_heads: 4,
            radix: 2,
            cardinality: 1,
            branches: 4,
            blocks_per_stage: 1,
            head_hidden: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub family: Family,
    pub input_size: usize,
    pub width_multiplier: f64,
    #[serde(default)]
    pub family_params: FamilyParams,
    #[serde(default)]
    pub seed: u64,
}

pub const MIN_INPUT: usize = 32;
pub const MAX_INPUT: usize = 896;

impl ModelConfig {
    pub fn new(family: Family, input_size: usize, width_multiplier: f64, seed: u64) -> Self {
        ModelConfig {
            family,
            input_size,
            width_multiplier,
            family_params: FamilyParams::default(),
            seed,
        }
    }

    /// Scaled channel count: nearest multiple of 8, at least 8.
    pub fn ch(&self, c: usize) -> usize {
        scaled_width(c, self.width_multiplier)
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.family_params;
        let bad = |msg: String| Err(Error::Config(msg));
        if !(MIN_INPUT..=MAX_INPUT).contains(&self.input_size) {
            return bad(format!(
                "input_size {} outside {MIN_INPUT}..={MAX_INPUT}",
                self.input_size
            ));
        }
        if !(self.width_multiplier.is_finite() && self.width_multiplier > 0.0) {
            return bad(format!("width_multiplier must be positive, got {}", self.width_multiplier));
        }
        if p.blocks_per_stage == 0 || p.head_hidden == 0 {
            return bad("blocks_per_stage and head_hidden must be positive".into());
        }
        match self.family {
            Family::ItrackerMhsa => {
                let d = self.ch(p.d_model);
                if p.num_heads == 0 || !d.is_multiple_of(p.num_heads) {
                    return bad(format!("d_model {d} (scaled) is not divisible by {} heads", p.num_heads));
                }
                if p.encoder_layers == 0 {
                    return bad("encoder_layers must be at least 1".into());
                }
                if !self.input_size.is_multiple_of(4) {
                    return bad(format!("ITRACKER_MHSA input_size {} must be a multiple of 4", self.input_size));
                }
            }
            Family::Botnet => {
                for mid in [self.ch(512)] {
                    if p.bot_heads == 0 || mid % p.bot_heads != 0 {
                        return bad(format!("attention width {mid} is not divisible by {} heads", p.bot_heads));
                    }
                }
            }
            Family::Hrnet => {
                if !(1..=4).contains(&p.branches) {
                    return bad(format!("branches must be in 1..=4, got {}", p.branches));
                }
                let unit = 4 << (p.branches - 1);
                if !self.input_size.is_multiple_of(unit) {
                    return bad(format!(
                        "HRNET with {} branches needs input_size divisible by {unit}, got {}",
                        p.branches, self.input_size
                    ));
                }
            }
            Family::Resnest => {
                let kr = p.radix * p.cardinality;
                for c in [64, 128, 256, 512] {
                    let mid = self.ch(c);
                    if kr == 0 || !mid.is_multiple_of(kr) {
                        return bad(format!(
                            "split-attention width {mid} not divisible by cardinality {} x radix {}",
                            p.cardinality, p.radix
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    /// Canonical JSON text (fixed field order).
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ModelConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid model config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn scaled_width(c: usize, w: f64) -> usize {
    (((c as f64 * w) / 8.0).round() as usize * 8).max(8)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn width_scaling() {
        assert_eq!(scaled_width(1000, 1.0), 1000);
        assert_eq!(scaled_width(2048, 1.0), 2048);
        assert_eq!(scaled_width(1000, 0.125), 128);
        assert_eq!(scaled_width(2048, 0.125), 256);
        assert_eq!(scaled_width(64, 0.125), 8);
        assert_eq!(scaled_width(64, 0.01), 8);
    }

    #[test]
    fn family_names_parse() {
        assert_eq!("itracker-mhsa".parse::<Family>().unwrap(), Family::ItrackerMhsa);
        assert_eq!("HRNET".parse::<Family>().unwrap(), Family::Hrnet);
        assert!("vgg".parse::<Family>().is_err());
    }

    #[test]
    fn json_round_trip_and_rejections() {
        let cfg = ModelConfig::new(Family::Resnest, 64, 0.125, 9);
        assert_eq!(ModelConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        assert!(cfg.to_json().contains("\"RESNEST\""));
        assert!(ModelConfig::from_json(r#"{"family":"BOTNET","input_size":64,"width_multiplier":1,"bogus":1}"#).is_err());
        let mut bad = ModelConfig::new(Family::ItrackerMhsa, 64, 0.125, 0);
        bad.family_params.num_heads = 7;
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        assert!(ModelConfig::new(Family::Botnet, 16, 1.0, 0).validate().is_err());
        assert!(ModelConfig::new(Family::Hrnet, 48, 1.0, 0).validate().is_err());
    }
}
