use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};

/// Where condition-adapter features enter the backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InjectionVariant {
    /// (a) condition pixels concatenated channel-wise at the patch embedding.
    InputConcat,
    /// (b) adapter features into the first half; backbone frozen.
    FirstHalfFrozen,
    /// (c) adapter features into the first half, co-trained.
    FirstHalf,
    /// (d) adapter features into the second half.
    SecondHalf,
    /// (e) adapter features into every `stride`-th block.
    Interval,
}

impl InjectionVariant {
    pub const ALL: [InjectionVariant; 5] = [
        InjectionVariant::InputConcat,
        InjectionVariant::FirstHalfFrozen,
        InjectionVariant::FirstHalf,
        InjectionVariant::SecondHalf,
        InjectionVariant::Interval,
    ];

    /// Name used by the `--inject` flag.
    pub fn flag(self) -> &'static str {
        match self {
            Self::InputConcat => "input",
            Self::FirstHalfFrozen => "first-frozen",
            Self::FirstHalf => "first",
            Self::SecondHalf => "second",
            Self::Interval => "interval",
        }
    }

    /// Row label of the condition-integration ablation table.
    pub fn row_label(self) -> &'static str {
        match self {
            Self::InputConcat => "(a) input",
            Self::FirstHalfFrozen => "(b) first-half frozen",
            Self::FirstHalf => "(c) first-half",
            Self::SecondHalf => "(d) second-half",
            Self::Interval => "(e) interval",
        }
    }
}

impl fmt::Display for InjectionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.flag())
    }
}

impl FromStr for InjectionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.flag() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown injection `{s}` (expected input, first-frozen, first, second or interval)"
                ))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InjectionPlan {
    pub variant: InjectionVariant,
    pub train_backbone: bool,
    #[serde(default = "default_stride")]
    pub stride: usize,
}

fn default_stride() -> usize {
    2
}

impl Default for InjectionPlan {
    fn default() -> Self {
        Self::new(InjectionVariant::FirstHalf)
    }
}

impl InjectionPlan {
    pub fn new(variant: InjectionVariant) -> Self {
        Self {
            variant,
            train_backbone: variant != InjectionVariant::FirstHalfFrozen,
            stride: default_stride(),
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let frozen = self.variant == InjectionVariant::FirstHalfFrozen;
        if self.train_backbone == frozen {
            return Err(Error::Config(format!(
                "plan {}: train_backbone must be {}",
                self.variant, !frozen
            )));
        }
        if self.stride == 0 {
            return Err(Error::Config("interval stride must be positive".into()));
        }
        Ok(())
    }

    pub fn uses_adapter(&self) -> bool {
        self.variant != InjectionVariant::InputConcat
    }

    /// Backbone block indices that receive an adapter feature, in order.
    pub fn sites(&self, num_blocks: usize) -> Vec<usize> {
        let half = num_blocks / 2;
        match self.variant {
            InjectionVariant::InputConcat => vec![],
            InjectionVariant::FirstHalf | InjectionVariant::FirstHalfFrozen => (0..half).collect(),
            InjectionVariant::SecondHalf => (half..num_blocks).collect(),
            InjectionVariant::Interval => (0..num_blocks).step_by(self.stride).collect(),
        }
    }

    /// Whether a parameter trains under this plan.
    pub fn is_trainable(&self, name: &str) -> bool {
        self.train_backbone || name.starts_with("adapter.")
    }
}

/// Condition signal handed to the backbone forward pass.
#[derive(Clone, Debug)]
pub enum Condition {
    /// Unconditional pass.
    None,
    /// Condition image for channel concatenation (variant a), model range.
    Concat(Tensor),
    /// One additive feature map per injection site.
    Features(Vec<Var>),
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn site_arithmetic() {
        let sites = |v| InjectionPlan::new(v).sites(8);
        assert_eq!(sites(InjectionVariant::FirstHalf), vec![0, 1, 2, 3]);
        assert_eq!(sites(InjectionVariant::FirstHalfFrozen), vec![0, 1, 2, 3]);
        assert_eq!(sites(InjectionVariant::SecondHalf), vec![4, 5, 6, 7]);
        assert_eq!(sites(InjectionVariant::Interval), vec![0, 2, 4, 6]);
        assert!(sites(InjectionVariant::InputConcat).is_empty());
        assert_eq!(
            InjectionPlan::new(InjectionVariant::Interval).with_stride(3).sites(8),
            vec![0, 3, 6]
        );
    }

    #[test]
    fn only_variant_b_freezes_backbone() {
        for v in InjectionVariant::ALL {
            let p = InjectionPlan::new(v);
            p.validate().unwrap();
            assert_eq!(p.train_backbone, v != InjectionVariant::FirstHalfFrozen);
        }
        let bad = InjectionPlan {
            train_backbone: true,
            ..InjectionPlan::new(InjectionVariant::FirstHalfFrozen)
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn flags_round_trip() {
        for v in InjectionVariant::ALL {
            assert_eq!(v.flag().parse::<InjectionVariant>().unwrap(), v);
        }
        assert!("sideways".parse::<InjectionVariant>().is_err());
    }
}
