//! Drift-ranked parameter retention.
//!
//! After training a task, each parameter has drifted `|prev − cur|` from the
//! value it started the task with. Retention keeps the previous value for the
//! `round(γ·P)` parameters that moved least and accepts the new value for the
//! rest, so only the largest updates survive. The threshold is a rank, not a
//! value: exactly `round(γ·P)` entries are kept, drift ties going to the lower
//! flat index.

use std::ops::Range;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterParams, FlatParamView};
use crate::error::{Error, Result};
use crate::rng;

pub const DEFAULT_GAMMA: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    DriftRanked,
    Random,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    /// One ranking over every adapter parameter.
    #[default]
    Global,
    /// The quota is applied within each matrix separately.
    PerMatrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetentionConfig {
    pub gamma: f64,
    #[serde(default)]
    pub strategy: Strategy,
    #[serde(default)]
    pub granularity: Granularity,
    /// Only consulted by the random strategy.
    #[serde(default)]
    pub seed: u64,
}

impl Default for RetentionConfig {
    fn default() -> Self {
        Self {
            gamma: DEFAULT_GAMMA,
            strategy: Strategy::DriftRanked,
            granularity: Granularity::Global,
            seed: 0,
        }
    }
}

impl RetentionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::config(format!(
                "retention gamma must lie in [0, 1], got {}",
                self.gamma
            )));
        }
        Ok(())
    }
}

/// Number of entries retained out of `p`: `round(γ·p)`, halves rounding up.
pub fn retained_count(gamma: f64, p: usize) -> usize {
    ((gamma * p as f64 + 0.5).floor() as usize).min(p)
}

/// Elementwise `|prev − cur|`.
pub fn drift(prev: &FlatParamView, cur: &FlatParamView) -> Result<FlatParamView> {
    check_lengths(prev, cur)?;
    Ok(FlatParamView(
        prev.0.iter().zip(&cur.0).map(|(a, b)| (a - b).abs()).collect(),
    ))
}

fn check_lengths(prev: &FlatParamView, cur: &FlatParamView) -> Result<()> {
    if prev.len() != cur.len() {
        return Err(Error::contract(format!(
            "retention: previous has {} parameters, current has {}",
            prev.len(),
            cur.len()
        )));
    }
    Ok(())
}

/// Flat indices that keep their previous value, sorted ascending.
pub fn retained_indices(
    prev: &FlatParamView,
    cur: &FlatParamView,
    cfg: &RetentionConfig,
    groups: &[Range<usize>],
) -> Result<Vec<usize>> {
    check_lengths(prev, cur)?;
    cfg.validate()?;
    let mut keep = Vec::new();
    let mut rng = rng::stream(cfg.seed, "retention/random");
    for g in groups {
        if g.end > prev.len() || g.start > g.end {
            return Err(Error::contract(format!(
                "retention group {g:?} outside {} parameters",
                prev.len()
            )));
        }
        let p = g.len();
        let r = retained_count(cfg.gamma, p);
        match cfg.strategy {
            Strategy::None => {}
            Strategy::DriftRanked => {
                let mut order: Vec<usize> = g.clone().collect();
                // stable sort keeps index order among equal drifts
                order.sort_by(|&a, &b| {
                    let da = (prev.0[a] - cur.0[a]).abs();
                    let db = (prev.0[b] - cur.0[b]).abs();
                    da.total_cmp(&db)
                });
                keep.extend_from_slice(&order[..r]);
            }
            Strategy::Random => {
                keep.extend(index::sample(&mut rng, p, r).into_iter().map(|i| g.start + i));
            }
        }
    }
    keep.sort_unstable();
    Ok(keep)
}

/// Merges `prev` into `cur`, treating the whole vector as one group.
pub fn merge(
    prev: &FlatParamView,
    cur: &FlatParamView,
    cfg: &RetentionConfig,
) -> Result<FlatParamView> {
    merge_grouped(prev, cur, cfg, &[0..prev.len()])
}

/// Merges with the quota applied independently within each group.
pub fn merge_grouped(
    prev: &FlatParamView,
    cur: &FlatParamView,
    cfg: &RetentionConfig,
    groups: &[Range<usize>],
) -> Result<FlatParamView> {
    let keep = retained_indices(prev, cur, cfg, groups)?;
    let mut out = cur.clone();
    for i in keep {
        out.0[i] = prev.0[i];
    }
    Ok(out)
}

/// Merges two adapters of the same shape, honoring the configured granularity.
pub fn merge_adapter(
    prev: &AdapterParams,
    cur: &AdapterParams,
    cfg: &RetentionConfig,
) -> Result<AdapterParams> {
    if prev.kind() != cur.kind() || prev.dim() != cur.dim() {
        return Err(Error::contract("retention: adapters differ in kind or dim"));
    }
    let (p, c) = (prev.flatten(), cur.flatten());
    let groups = match cfg.granularity {
        Granularity::Global => vec![0..p.len()],
        Granularity::PerMatrix => cur.matrix_ranges(),
    };
    cur.with_flat(&merge_grouped(&p, &c, cfg, &groups)?)
}
