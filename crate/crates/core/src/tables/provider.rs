use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{read_latency_csv, TableKey};
use crate::error::{Error, Result};

/// Everything a cost model may need to price one merged layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LatencyQuery {
    pub key: TableKey,
    pub in_channels: usize,
    pub out_channels: usize,
    pub groups: usize,
    pub stride: usize,
    pub kernel_size: usize,
    pub in_hw: Option<(usize, usize)>,
    pub out_hw: Option<(usize, usize)>,
}

impl LatencyQuery {
    /// Multiply-accumulates of the merged layer, when the output shape is known.
    pub fn macs(&self) -> Option<u64> {
        let (h, w) = self.out_hw?;
        let per_out = (self.in_channels / self.groups) * self.kernel_size * self.kernel_size;
        Some((h * w * self.out_channels * per_out) as u64)
    }
}

pub trait LatencyProvider: Sync {
    fn latency_ms(&self, query: &LatencyQuery) -> Result<f64>;
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyticConfig {
    pub device_constant_ns_per_mac: f64,
    #[serde(default = "one")]
    pub depthwise_multiplier: f64,
}

fn one() -> f64 {
    1.0
}

/// Latency proportional to the MAC count of the merged layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnalyticProvider {
    config: AnalyticConfig,
}

impl AnalyticProvider {
    pub fn new(config: AnalyticConfig) -> Result<Self> {
        let AnalyticConfig {
            device_constant_ns_per_mac: c,
            depthwise_multiplier: m,
        } = config;
        if !(c.is_finite() && c >= 0.0 && m.is_finite() && m >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "analytic provider constants must be finite and nonnegative, got {c} ns/MAC and multiplier {m}"
            )));
        }
        Ok(AnalyticProvider { config })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::new(serde_json::from_str(&text)?)
    }

    pub fn config(&self) -> AnalyticConfig {
        self.config
    }
}

impl LatencyProvider for AnalyticProvider {
    fn latency_ms(&self, query: &LatencyQuery) -> Result<f64> {
        let macs = query.macs().ok_or_else(|| Error::Provider {
            key: query.key,
            reason: "the analytic provider needs feature-map shapes".into(),
        })?;
        let mut ns = self.config.device_constant_ns_per_mac * macs as f64;
        if query.key.depthwise {
            ns *= self.config.depthwise_multiplier;
        }
        Ok(ns * 1e-6)
    }
}

/// Exact lookup in a measured table.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TableProvider {
    entries: BTreeMap<TableKey, f64>,
}

impl TableProvider {
    pub fn new(entries: BTreeMap<TableKey, f64>) -> Self {
        TableProvider { entries }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::new(read_latency_csv(path)?))
    }

    pub fn entries(&self) -> &BTreeMap<TableKey, f64> {
        &self.entries
    }
}

impl LatencyProvider for TableProvider {
    fn latency_ms(&self, query: &LatencyQuery) -> Result<f64> {
        self.entries
            .get(&query.key)
            .copied()
            .ok_or(Error::MissingKey(query.key))
    }
}
