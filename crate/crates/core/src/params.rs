//! Exact trainable-parameter accounting for adapted weight matrices.

use serde::{Deserialize, Serialize};

use crate::adapters::Scheme;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub trainable: u64,
    /// Percentage of `base_total` in thousandths of a percent, truncated.
    pub percent_milli: u64,
}

impl ParamCount {
    pub fn percent(&self) -> f64 {
        self.percent_milli as f64 / 1000.0
    }

    /// `"4194304 (0.062%)"`
    pub fn display(&self) -> String {
        format!(
            "{} ({}.{:03}%)",
            self.trainable,
            self.percent_milli / 1000,
            self.percent_milli % 1000
        )
    }
}

/// Trainable parameters of one adapted `d x k` matrix.
///
/// * LoRA: `r (d + k)`
/// * Split with `count` heads: `count * r (d + k)`
/// * Hydra with `count` experts: `r k + count * d r + r * count`
pub fn per_matrix(scheme: Scheme, d: u64, k: u64, r: u64, count: u64) -> u64 {
    match scheme {
        Scheme::Lora => r * (d + k),
        Scheme::Split => count * r * (d + k),
        Scheme::Hydra => r * k + count * d * r + r * count,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamQuery {
    pub scheme: Scheme,
    pub d: u64,
    pub k: u64,
    pub rank: u64,
    /// Experts (Hydra) or heads (Split); ignored for LoRA.
    pub count: u64,
    pub matrices_per_layer: u64,
    pub layers: u64,
    pub base_total: u64,
}

/// Total trainable count and its share of the base model, the percentage
/// truncated (not rounded) to three decimals.
pub fn param_count(q: &ParamQuery) -> Result<ParamCount> {
    for (name, v) in [
        ("d", q.d),
        ("k", q.k),
        ("rank", q.rank),
        ("count", q.count),
        ("matrices_per_layer", q.matrices_per_layer),
        ("layers", q.layers),
        ("base_total", q.base_total),
    ] {
        if v == 0 {
            return Err(Error::usage(format!("{name} must be at least 1")));
        }
    }
    let trainable =
        per_matrix(q.scheme, q.d, q.k, q.rank, q.count) * q.matrices_per_layer * q.layers;
    let percent_milli = (trainable as u128 * 100_000 / q.base_total as u128) as u64;
    Ok(ParamCount {
        trainable,
        percent_milli,
    })
}

/// Same as [`param_count`] with the scheme given by name.
pub fn param_count_named(scheme: &str, mut q: ParamQuery) -> Result<ParamCount> {
    q.scheme = scheme.parse()?;
    param_count(&q)
}
