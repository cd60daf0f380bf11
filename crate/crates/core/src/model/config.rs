use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{GtnError, Result};

/// Which towers are built and how they are merged.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "step")]
    Step,
    #[serde(rename = "step+mask")]
    StepMask,
    #[serde(rename = "channel")]
    Channel,
    #[serde(rename = "channel+mask")]
    ChannelMask,
    #[serde(rename = "concat")]
    Concat,
    #[serde(rename = "gated")]
    Gated,
}

impl Variant {
    /// Ablation column order.
    pub const ALL: [Variant; 6] = [
        Variant::Step,
        Variant::StepMask,
        Variant::Channel,
        Variant::ChannelMask,
        Variant::Concat,
        Variant::Gated,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Step => "step",
            Variant::StepMask => "step+mask",
            Variant::Channel => "channel",
            Variant::ChannelMask => "channel+mask",
            Variant::Concat => "concat",
            Variant::Gated => "gated",
        }
    }

    pub fn has_step_tower(self) -> bool {
        !matches!(self, Variant::Channel | Variant::ChannelMask)
    }

    pub fn has_channel_tower(self) -> bool {
        !matches!(self, Variant::Step | Variant::StepMask)
    }

    /// Causal-mask flags `(step, channel)` implied by the variant.
    pub fn default_masks(self) -> (bool, bool) {
        match self {
            Variant::Step | Variant::Channel => (false, false),
            Variant::StepMask => (true, false),
            Variant::ChannelMask => (false, true),
            Variant::Concat | Variant::Gated => (true, true),
        }
    }

    /// Filesystem-safe name, used for ablation subdirectories.
    pub fn slug(self) -> String {
        self.name().replace('+', "_")
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = GtnError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s || v.slug() == s)
            .ok_or_else(|| {
                GtnError::Config(format!(
                    "unknown variant {s:?}; expected one of step, step+mask, channel, channel+mask, concat, gated"
                ))
            })
    }
}

/// How an encoder's token matrix is reduced to a fixed-width vector before
/// the tower feature projection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    /// Row-major flatten of all (padded) rows.
    Flatten,
    /// Mean over real rows.
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_channels: usize,
    pub max_len: usize,
    pub n_classes: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub d_tower: usize,
    pub dropout_p: f64,
    pub ln_eps: f64,
    pub variant: Variant,
    pub use_causal_mask_step: bool,
    pub use_causal_mask_channel: bool,
    pub reduction: Reduction,
}

impl ModelConfig {
    pub fn new(n_channels: usize, max_len: usize, n_classes: usize, variant: Variant) -> Self {
        let (use_causal_mask_step, use_causal_mask_channel) = variant.default_masks();
        ModelConfig {
            n_channels,
            max_len,
            n_classes,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_ff: 256,
            d_tower: 128,
            dropout_p: 0.2,
            ln_eps: 1e-5,
            variant,
            use_causal_mask_step,
            use_causal_mask_channel,
            reduction: Reduction::Flatten,
        }
    }

    /// Same hyperparameters with another variant and that variant's masks.
    pub fn with_variant(&self, variant: Variant) -> Self {
        let (s, c) = variant.default_masks();
        ModelConfig {
            variant,
            use_causal_mask_step: s,
            use_causal_mask_channel: c,
            ..self.clone()
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Width of the flattened (or pooled) step-tower output.
    pub fn step_flat_width(&self) -> usize {
        match self.reduction {
            Reduction::Flatten => self.max_len * self.d_model,
            Reduction::Mean => self.d_model,
        }
    }

    pub fn channel_flat_width(&self) -> usize {
        match self.reduction {
            Reduction::Flatten => self.n_channels * self.d_model,
            Reduction::Mean => self.d_model,
        }
    }

    /// Width of the classifier input.
    pub fn fused_width(&self) -> usize {
        match self.variant {
            Variant::Concat | Variant::Gated => 2 * self.d_tower,
            _ => self.d_tower,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_channels", self.n_channels),
            ("max_len", self.max_len),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("d_ff", self.d_ff),
            ("d_tower", self.d_tower),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(GtnError::Config(format!("{name} must be >= 1")));
            }
        }
        if self.n_classes < 2 {
            return Err(GtnError::Config("n_classes must be >= 2".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(GtnError::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(GtnError::Config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout_p
            )));
        }
        if !(self.ln_eps > 0.0) {
            return Err(GtnError::Config("ln_eps must be > 0".into()));
        }
        let (step, channel) = (self.use_causal_mask_step, self.use_causal_mask_channel);
        let consistent = match self.variant {
            Variant::Step => !step,
            Variant::StepMask => step,
            Variant::Channel => !channel,
            Variant::ChannelMask => channel,
            Variant::Concat | Variant::Gated => true,
        };
        if !consistent {
            return Err(GtnError::Config(format!(
                "mask flags (step={step}, channel={channel}) contradict variant {}",
                self.variant
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
            assert_eq!(v.slug().parse::<Variant>().unwrap(), v);
            let json = serde_json::to_string(&v).unwrap();
            assert_eq!(json, format!("\"{}\"", v.name()));
        }
        assert!("gate".parse::<Variant>().is_err());
    }

    #[test]
    fn validation() {
        let mut c = ModelConfig::new(3, 10, 2, Variant::Gated);
        c.validate().unwrap();
        c.n_heads = 5;
        assert!(c.validate().is_err());

        let mut c = ModelConfig::new(3, 10, 2, Variant::Step);
        c.use_causal_mask_step = true;
        assert!(c.validate().is_err());
        c.variant = Variant::StepMask;
        c.validate().unwrap();
    }

    #[test]
    fn towers_per_variant() {
        assert!(Variant::Gated.has_step_tower() && Variant::Gated.has_channel_tower());
        assert!(Variant::Concat.has_step_tower() && Variant::Concat.has_channel_tower());
        assert!(!Variant::Step.has_channel_tower());
        assert!(!Variant::ChannelMask.has_step_tower());
    }
}
