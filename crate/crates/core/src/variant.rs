//! Registry of the ablation variants.

use crate::error::{Error, Result};
use crate::rda::AttentionKind;

/// Architecture and objective switches that distinguish the ablation rows.
#[derive(Clone, Debug, PartialEq)]
pub struct VariantSpec {
    pub name: String,
    /// Attention type at levels 1, 2, 3.
    pub attention: [AttentionKind; 3],
    pub value_dilated: bool,
    pub rows: usize,
    pub stride: usize,
    /// Feed one view as both inputs.
    pub mono: bool,
    /// Concatenate coarser disparity to finer features before attention.
    pub disparity_concat: bool,
    /// Replaces the configured consistency weight.
    pub alpha_override: Option<f64>,
}

pub const VARIANT_NAMES: [&str; 10] = [
    "ours", "TTT", "RTT", "RRR", "FD", "1row", "5row", "mono", "nocat", "noAC",
];

impl Default for VariantSpec {
    fn default() -> Self {
        use AttentionKind::*;
        VariantSpec {
            name: "ours".into(),
            attention: [Rda, Rda, Typical],
            value_dilated: false,
            rows: 3,
            stride: 2,
            mono: false,
            disparity_concat: true,
            alpha_override: None,
        }
    }
}

impl VariantSpec {
    /// Looks up a variant by name (case-insensitive; `default` aliases `ours`).
    pub fn named(name: &str) -> Result<Self> {
        use AttentionKind::*;
        let key = name.trim().to_ascii_lowercase();
        let key = key.strip_prefix("ours-").unwrap_or(&key);
        let base = VariantSpec::default();
        let spec = match key {
            "ours" | "default" => base,
            "ttt" => VariantSpec {
                attention: [Typical; 3],
                ..base
            },
            "rtt" => VariantSpec {
                attention: [Rda, Typical, Typical],
                ..base
            },
            "rrr" => VariantSpec {
                attention: [Rda; 3],
                ..base
            },
            "fd" => VariantSpec {
                value_dilated: true,
                ..base
            },
            "1row" => VariantSpec {
                rows: 1,
                stride: 1,
                ..base
            },
            "5row" => VariantSpec {
                rows: 5,
                stride: 2,
                ..base
            },
            "mono" => VariantSpec {
                mono: true,
                alpha_override: Some(0.0),
                ..base
            },
            "nocat" => VariantSpec {
                disparity_concat: false,
                ..base
            },
            "noac" => VariantSpec {
                alpha_override: Some(0.0),
                ..base
            },
            _ => {
                return Err(Error::Config(format!(
                    "unknown variant `{name}` (known: {})",
                    VARIANT_NAMES.join(", ")
                )))
            }
        };
        let canonical = VARIANT_NAMES
            .iter()
            .find(|n| n.eq_ignore_ascii_case(key))
            .copied()
            .unwrap_or("ours");
        Ok(VariantSpec {
            name: canonical.to_string(),
            ..spec
        })
    }

    pub fn alpha(&self, configured: f64) -> f64 {
        self.alpha_override.unwrap_or(configured)
    }
}
