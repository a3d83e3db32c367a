//! The mixture-of-experts layer: router, expert capacity, permutation plans,
//! block-diagonal topology construction, the dropless forward/backward pair,
//! a token-dropping baseline, and the load-balancing auxiliary loss.

mod layer;
mod permute;
mod router;

pub use layer::{
    dmoe_backward, dmoe_forward, dropping_forward, DmoeCache, DropStats, MoEGrads, MoEWeights,
};
pub use permute::{
    expert_capacity, make_permutation, padded_gather, padded_scatter, plan_topology,
    PermutationPlan,
};
pub use router::{
    load_balance_loss, router_backward, router_forward, softmax_backward, RouterAssignment,
};

use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::bcsr::FormatError;
use crate::dense::{ActivationKind, ShapeError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MoeError {
    #[error(transparent)]
    Shape(#[from] ShapeError),

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error("invalid config: {0}")]
    Config(String),
}

/// Token-overflow policy: never drop (pad every expert group), or cap each
/// expert at `capacity_factor` times the uniform-load expectation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CapacityMode {
    Dropless,
    Factor(f64),
}

impl CapacityMode {
    pub fn is_dropless(&self) -> bool {
        matches!(self, CapacityMode::Dropless)
    }
}

// JSON encoding: the string "dropless" or a positive number.
impl Serialize for CapacityMode {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            CapacityMode::Dropless => serializer.serialize_str("dropless"),
            CapacityMode::Factor(f) => serializer.serialize_f64(*f),
        }
    }
}

impl<'de> Deserialize<'de> for CapacityMode {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct ModeVisitor;

        impl Visitor<'_> for ModeVisitor {
            type Value = CapacityMode;

            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("\"dropless\" or a positive capacity factor")
            }

            fn visit_str<E: de::Error>(self, v: &str) -> Result<CapacityMode, E> {
                if v == "dropless" {
                    Ok(CapacityMode::Dropless)
                } else {
                    Err(E::custom(format!(
                        "capacity_factor must be \"dropless\" or a number, got \"{v}\""
                    )))
                }
            }

            fn visit_f64<E: de::Error>(self, v: f64) -> Result<CapacityMode, E> {
                if v > 0.0 && v.is_finite() {
                    Ok(CapacityMode::Factor(v))
                } else {
                    Err(E::custom(format!(
                        "capacity_factor must be positive, got {v}"
                    )))
                }
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> Result<CapacityMode, E> {
                self.visit_f64(v as f64)
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> Result<CapacityMode, E> {
                self.visit_f64(v as f64)
            }
        }

        deserializer.deserialize_any(ModeVisitor)
    }
}

/// Layer hyperparameters. `w1` holds every expert's first layer side by side
/// (`hidden_size × num_experts·ffn_hidden_size`) and `w2` the second layers
/// stacked (`num_experts·ffn_hidden_size × hidden_size`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MoEConfig {
    pub hidden_size: usize,
    pub ffn_hidden_size: usize,
    pub num_experts: usize,
    pub top_k: usize,
    pub block_size: usize,
    pub activation: ActivationKind,
    pub capacity_factor: CapacityMode,
    pub aux_loss_coefficient: f64,
    pub renormalize_gates: bool,
}

impl Default for MoEConfig {
    fn default() -> Self {
        Self {
            hidden_size: 16,
            ffn_hidden_size: 32,
            num_experts: 4,
            top_k: 1,
            block_size: 4,
            activation: ActivationKind::Gelu,
            capacity_factor: CapacityMode::Dropless,
            aux_loss_coefficient: 0.01,
            renormalize_gates: false,
        }
    }
}

/// Named model shapes. Every preset keeps `ffn_hidden_size = 4 × hidden_size`
/// and 64 top-1 experts with 128-wide blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Xs,
    Small,
    Medium,
}

impl std::str::FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "xs" => Ok(Preset::Xs),
            "small" => Ok(Preset::Small),
            "medium" => Ok(Preset::Medium),
            other => Err(format!(
                "unknown preset `{other}` (expected xs|small|medium)"
            )),
        }
    }
}

impl MoEConfig {
    pub fn preset(p: Preset) -> Self {
        let hidden_size = match p {
            Preset::Xs => 512,
            Preset::Small => 768,
            Preset::Medium => 1024,
        };
        Self {
            hidden_size,
            ffn_hidden_size: 4 * hidden_size,
            num_experts: 64,
            top_k: 1,
            block_size: 128,
            ..Self::default()
        }
    }

    /// Width of the concatenated expert first-layer outputs.
    pub fn inner_dim(&self) -> usize {
        self.num_experts * self.ffn_hidden_size
    }

    pub fn validate(&self) -> Result<(), MoeError> {
        if self.hidden_size == 0
            || self.ffn_hidden_size == 0
            || self.num_experts == 0
            || self.block_size == 0
        {
            return Err(MoeError::Config("sizes must be positive".into()));
        }
        if !self.ffn_hidden_size.is_multiple_of(self.block_size) {
            return Err(MoeError::Config(format!(
                "ffn_hidden_size {} not divisible by block_size {}",
                self.ffn_hidden_size, self.block_size
            )));
        }
        if self.top_k == 0 || self.top_k > self.num_experts {
            return Err(MoeError::Config(format!(
                "top_k {} must be in 1..={}",
                self.top_k, self.num_experts
            )));
        }
        if let CapacityMode::Factor(f) = self.capacity_factor {
            if !(f.is_finite() && f > 0.0) {
                return Err(MoeError::Config(format!(
                    "capacity_factor {f} must be positive"
                )));
            }
        }
        if self.aux_loss_coefficient < 0.0 {
            return Err(MoeError::Config(
                "aux_loss_coefficient must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_follow_four_x_ffn_rule() {
        let xs = MoEConfig::preset(Preset::Xs);
        assert_eq!((xs.hidden_size, xs.ffn_hidden_size), (512, 2048));
        assert_eq!((xs.num_experts, xs.top_k, xs.block_size), (64, 1, 128));
        assert_eq!(xs.inner_dim(), 131072);
        xs.validate().unwrap();

        let small = MoEConfig::preset(Preset::Small);
        assert_eq!((small.hidden_size, small.ffn_hidden_size), (768, 3072));
        let medium = MoEConfig::preset(Preset::Medium);
        assert_eq!((medium.hidden_size, medium.ffn_hidden_size), (1024, 4096));
    }

    #[test]
    fn validate_rejects_bad_configs() {
        let mut cfg = MoEConfig {
            top_k: 5,
            ..MoEConfig::default()
        };
        assert!(cfg.validate().is_err());
        cfg = MoEConfig {
            ffn_hidden_size: 30,
            ..MoEConfig::default()
        };
        assert!(cfg.validate().is_err());
        cfg = MoEConfig {
            capacity_factor: CapacityMode::Factor(0.0),
            ..MoEConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn capacity_mode_json_roundtrip() {
        let json = serde_json::to_string(&CapacityMode::Dropless).unwrap();
        assert_eq!(json, "\"dropless\"");
        let back: CapacityMode = serde_json::from_str(&json).unwrap();
        assert_eq!(back, CapacityMode::Dropless);

        let back: CapacityMode = serde_json::from_str("1.5").unwrap();
        assert_eq!(back, CapacityMode::Factor(1.5));
        assert!(serde_json::from_str::<CapacityMode>("\"nope\"").is_err());
        assert!(serde_json::from_str::<CapacityMode>("-1.0").is_err());
    }
}
