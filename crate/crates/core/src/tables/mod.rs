//! Latency and importance lookup tables over merge segments.
//!
//! Entries are keyed by `(i, j, k, depthwise)`: segment `(i, j]` merged into a
//! single layer of kernel size `k`, flagged when the merged layer is a
//! depthwise convolution. Only admissible segments get entries; a key that is
//! absent is simply unusable by the planner.

mod io;
mod provider;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arch::NetworkDescriptor;
use crate::error::{Error, Result};

pub use io::{parse_latency_csv, read_importance, read_latency_csv, write_importance, write_latency_csv, LatencyRow};
pub use provider::{AnalyticConfig, AnalyticProvider, LatencyProvider, LatencyQuery, TableProvider};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TableKey {
    pub i: usize,
    pub j: usize,
    pub k: usize,
    pub depthwise: bool,
}

impl TableKey {
    pub fn new(i: usize, j: usize, k: usize, depthwise: bool) -> Self {
        TableKey { i, j, k, depthwise }
    }
}

impl fmt::Display for TableKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "(i={}, j={}, k={}, depthwise={})",
            self.i, self.j, self.k, self.depthwise as u8
        )
    }
}

/// Task metric of the network with segment `(i, j]` replaced by its merged
/// layer of size `k`, next to the metric of the original network.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawPerfMeasurement {
    pub i: usize,
    pub j: usize,
    pub k: usize,
    #[serde(default)]
    pub depthwise: bool,
    pub perf_pruned: f64,
    pub perf_original: f64,
}

impl RawPerfMeasurement {
    pub fn key(&self) -> TableKey {
        TableKey::new(self.i, self.j, self.k, self.depthwise)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostTables {
    pub latency: BTreeMap<TableKey, f64>,
    pub importance: BTreeMap<TableKey, f64>,
    /// `K_ij` for every admissible segment.
    pub feasible_sizes: BTreeMap<(usize, usize), BTreeSet<usize>>,
    pub k0: usize,
    pub layer_count: usize,
}

impl CostTables {
    /// Assembles tables for `net`, checking that latency and importance cover
    /// exactly the realizable keys of every admissible segment.
    pub fn new(
        net: &NetworkDescriptor,
        latency: BTreeMap<TableKey, f64>,
        importance: BTreeMap<TableKey, f64>,
    ) -> Result<Self> {
        let keys = table_keys(net)?;
        let expected: BTreeSet<TableKey> = keys.iter().copied().collect();
        for key in &keys {
            match latency.get(key) {
                None => return Err(Error::MissingKey(*key)),
                Some(t) if !(t.is_finite() && *t >= 0.0) => return Err(Error::NonFinite(*key)),
                _ => {}
            }
            match importance.get(key) {
                None => return Err(Error::MissingKey(*key)),
                Some(v) if !(v.is_finite() && *v > 0.0) => return Err(Error::NonFinite(*key)),
                _ => {}
            }
        }
        let latency: BTreeMap<_, _> = latency.into_iter().filter(|(k, _)| expected.contains(k)).collect();
        let importance: BTreeMap<_, _> = importance.into_iter().filter(|(k, _)| expected.contains(k)).collect();
        let mut feasible_sizes: BTreeMap<(usize, usize), BTreeSet<usize>> = BTreeMap::new();
        for key in &keys {
            feasible_sizes.entry((key.i, key.j)).or_default().insert(key.k);
        }
        Ok(CostTables {
            latency,
            importance,
            feasible_sizes,
            k0: net.kernel_sum(),
            layer_count: net.len(),
        })
    }

    /// Measures latencies through `provider` and normalizes `raw`.
    pub fn build(net: &NetworkDescriptor, provider: &dyn LatencyProvider, raw: &[RawPerfMeasurement]) -> Result<Self> {
        let latency = build_latency_table(net, provider)?;
        let importance = build_importance_table(raw)?;
        Self::new(net, latency, importance)
    }

    pub fn keys(&self) -> impl Iterator<Item = &TableKey> {
        self.latency.keys()
    }

    pub fn len(&self) -> usize {
        self.latency.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latency.is_empty()
    }

    /// Keys of segment `(i, j]` in `(k, depthwise)` order.
    pub fn segment_keys(&self, i: usize, j: usize) -> impl Iterator<Item = &TableKey> {
        let lo = TableKey::new(i, j, 0, false);
        let hi = TableKey::new(i, j, usize::MAX, true);
        self.latency.range(lo..=hi).map(|(k, _)| k)
    }

    pub fn entry(&self, key: &TableKey) -> Option<(f64, f64)> {
        Some((*self.latency.get(key)?, *self.importance.get(key)?))
    }

    /// Latency map in integer grid units of `T0 / P`.
    pub fn discretized(&self, t0_ms: f64, levels: u64) -> BTreeMap<TableKey, u64> {
        discretize(&self.latency, t0_ms, levels).0
    }
}

/// Kernel-size increments of a segment and which layers are forced in.
struct SegmentLayers {
    increments: Vec<usize>,
    forced: Vec<bool>,
    depthwise: Vec<bool>,
}

fn segment_layers(i: usize, j: usize, net: &NetworkDescriptor) -> SegmentLayers {
    SegmentLayers {
        increments: net.kernel_increments(i, j),
        forced: (i + 1..=j).map(|l| !net.is_substitutable(l)).collect(),
        depthwise: (i + 1..=j).map(|l| net.layer(l).is_depthwise()).collect(),
    }
}

pub(crate) fn check_segment(i: usize, j: usize, net: &NetworkDescriptor) -> Result<()> {
    if i >= j || j > net.len() {
        return Err(Error::SegmentNotAllowed {
            i,
            j,
            reason: format!("indices must satisfy 0 <= i < j <= {}", net.len()),
        });
    }
    if let Some(b) = net.first_barrier_in(i, j) {
        return Err(Error::SegmentNotAllowed {
            i,
            j,
            reason: format!("barrier at {b}"),
        });
    }
    Ok(())
}

/// `(k, depthwise)` pairs realizable on `(i, j]`, ascending.
///
/// Subset-sum reachability over the kernel increments, tracking whether a
/// non-depthwise layer has been kept. Forced layers are always added;
/// substitutable layers may be skipped.
pub fn enumerate_variants(i: usize, j: usize, net: &NetworkDescriptor) -> Result<Vec<(usize, bool)>> {
    check_segment(i, j, net)?;
    let seg = segment_layers(i, j, net);
    let max_sum: usize = seg.increments.iter().sum();
    // reach[s][std]: increment sum s reachable, std = some dense layer kept.
    let mut reach = vec![[false; 2]; max_sum + 1];
    reach[0][0] = true;
    let mut top = 0;
    for ((&inc, &forced), &dw) in seg.increments.iter().zip(&seg.forced).zip(&seg.depthwise) {
        let mut next = vec![[false; 2]; max_sum + 1];
        for s in 0..=top {
            for std in 0..2 {
                if !reach[s][std] {
                    continue;
                }
                if !forced {
                    next[s][std] = true;
                }
                let kept_std = if dw { std } else { 1 };
                next[s + inc][kept_std] = true;
            }
        }
        top += inc;
        reach = next;
    }
    let mut out = Vec::new();
    for (s, flags) in reach.iter().enumerate() {
        // depthwise = no dense layer kept, so `false` (dense) sorts first.
        if flags[1] {
            out.push((s + 1, false));
        }
        if flags[0] {
            out.push((s + 1, true));
        }
    }
    Ok(out)
}

/// `K_ij`: merged kernel sizes realizable on segment `(i, j]`.
pub fn enumerate_kernel_sizes(i: usize, j: usize, net: &NetworkDescriptor) -> Result<BTreeSet<usize>> {
    Ok(enumerate_variants(i, j, net)?.into_iter().map(|(k, _)| k).collect())
}

/// Every key the tables must cover for `net`, in key order.
pub fn table_keys(net: &NetworkDescriptor) -> Result<Vec<TableKey>> {
    let mut keys = Vec::new();
    for (i, j) in net.admissible_segments() {
        for (k, depthwise) in enumerate_variants(i, j, net)? {
            keys.push(TableKey::new(i, j, k, depthwise));
        }
    }
    Ok(keys)
}

/// Geometry of the merged layer behind `key`.
pub fn latency_query(net: &NetworkDescriptor, key: TableKey) -> LatencyQuery {
    let first = net.layer(key.i + 1);
    let last = net.layer(key.j);
    let stride = (key.i + 1..=key.j).map(|l| net.layer(l).stride).product();
    let in_channels = first.in_channels;
    LatencyQuery {
        key,
        in_channels,
        out_channels: last.out_channels,
        groups: if key.depthwise { in_channels } else { 1 },
        stride,
        kernel_size: key.k,
        in_hw: first.in_shape.map(|s| (s.height(), s.width())),
        out_hw: last.out_shape.map(|s| (s.height(), s.width())),
    }
}

/// Queries `provider` for every table key. Runs on the current rayon pool;
/// the result does not depend on scheduling.
pub fn build_latency_table(net: &NetworkDescriptor, provider: &dyn LatencyProvider) -> Result<BTreeMap<TableKey, f64>> {
    let keys = table_keys(net)?;
    let measured: Vec<Result<f64>> = keys
        .par_iter()
        .map(|key| provider.latency_ms(&latency_query(net, *key)))
        .collect();
    let mut table = BTreeMap::new();
    for (key, value) in keys.into_iter().zip(measured) {
        let value = value?;
        if !(value.is_finite() && value >= 0.0) {
            return Err(Error::Provider {
                key,
                reason: format!("latency {value} is not a nonnegative finite number"),
            });
        }
        table.insert(key, value);
    }
    Ok(table)
}

/// `I = exp(perf_pruned - perf_original)` per key.
pub fn build_importance_table(raw: &[RawPerfMeasurement]) -> Result<BTreeMap<TableKey, f64>> {
    let mut table = BTreeMap::new();
    for m in raw {
        let key = m.key();
        if !(m.perf_pruned.is_finite() && m.perf_original.is_finite()) {
            return Err(Error::NonFinite(key));
        }
        let value = (m.perf_pruned - m.perf_original).exp();
        if !(value.is_finite() && value > 0.0) {
            return Err(Error::NonFinite(key));
        }
        if table.insert(key, value).is_some() {
            return Err(Error::DuplicateKey(key));
        }
    }
    Ok(table)
}

/// `floor(t * P / T0)`.
pub fn discretize_value(latency_ms: f64, t0_ms: f64, levels: u64) -> u64 {
    let units = (latency_ms * levels as f64 / t0_ms).floor();
    if units <= 0.0 {
        0
    } else {
        units as u64
    }
}

/// Rounds every latency down onto the grid `{0, T0/P, ..., }`; the budget
/// itself maps to `P` units. Entries above the budget are kept.
pub fn discretize(latency: &BTreeMap<TableKey, f64>, t0_ms: f64, levels: u64) -> (BTreeMap<TableKey, u64>, u64) {
    let map = latency
        .iter()
        .map(|(key, &t)| (*key, discretize_value(t, t0_ms, levels)))
        .collect();
    (map, levels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{FeatureShape, LayerDescriptor, LayerKind};

    pub(crate) fn layer(index: usize, k: usize, channels_in: usize, channels_out: usize, dw: bool) -> LayerDescriptor {
        LayerDescriptor {
            index,
            kind: if dw {
                LayerKind::DepthwiseConv
            } else {
                LayerKind::StandardConv
            },
            kernel_size: k,
            stride: 1,
            in_channels: channels_in,
            out_channels: channels_out,
            groups: if dw { channels_in } else { 1 },
            in_shape: Some(FeatureShape::new(channels_in, 8, 8)),
            out_shape: Some(FeatureShape::new(channels_out, 8, 8)),
            l1_norm: Some(1.0),
            has_activation_after: false,
        }
    }

    #[test]
    fn kernel_size_examples() {
        let net = NetworkDescriptor::from_layers(
            "two",
            vec![layer(1, 3, 4, 4, false), layer(2, 3, 4, 4, false)],
            [],
            vec![],
        )
        .unwrap();
        assert_eq!(enumerate_kernel_sizes(0, 2, &net).unwrap(), BTreeSet::from([1, 3, 5]));

        let net = NetworkDescriptor::from_layers(
            "forced",
            vec![layer(1, 3, 4, 8, false), layer(2, 3, 8, 8, false)],
            [],
            vec![],
        )
        .unwrap();
        assert_eq!(enumerate_kernel_sizes(0, 2, &net).unwrap(), BTreeSet::from([3, 5]));
        assert_eq!(enumerate_kernel_sizes(0, 1, &net).unwrap(), BTreeSet::from([3]));
        assert_eq!(enumerate_kernel_sizes(1, 2, &net).unwrap(), BTreeSet::from([1, 3]));

        let net = NetworkDescriptor::from_layers("one", vec![layer(1, 1, 4, 4, false)], [], vec![]).unwrap();
        assert_eq!(enumerate_kernel_sizes(0, 1, &net).unwrap(), BTreeSet::from([1]));
    }

    #[test]
    fn depthwise_variants() {
        let net = NetworkDescriptor::from_layers(
            "dw",
            vec![
                layer(1, 3, 4, 4, true),
                layer(2, 1, 4, 4, false),
                layer(3, 3, 4, 4, true),
            ],
            [],
            vec![],
        )
        .unwrap();
        let v = enumerate_variants(0, 3, &net).unwrap();
        assert_eq!(
            v,
            vec![(1, false), (1, true), (3, false), (3, true), (5, false), (5, true)]
        );
        let v = enumerate_variants(1, 2, &net).unwrap();
        assert_eq!(v, vec![(1, false), (1, true)]);
    }

    #[test]
    fn disallowed_segment() {
        let net = NetworkDescriptor::from_layers(
            "b",
            vec![layer(1, 3, 4, 4, false), layer(2, 3, 4, 4, false)],
            [1],
            vec![],
        )
        .unwrap();
        assert!(matches!(
            enumerate_kernel_sizes(0, 2, &net),
            Err(Error::SegmentNotAllowed { .. })
        ));
    }

    #[test]
    fn importance_normalization() {
        let raw = [
            RawPerfMeasurement {
                i: 0,
                j: 1,
                k: 3,
                depthwise: false,
                perf_pruned: 0.7,
                perf_original: 0.7,
            },
            RawPerfMeasurement {
                i: 0,
                j: 1,
                k: 1,
                depthwise: true,
                perf_pruned: 0.2,
                perf_original: 0.7,
            },
        ];
        let t = build_importance_table(&raw).unwrap();
        assert_eq!(t[&TableKey::new(0, 1, 3, false)], 1.0);
        assert!((t[&TableKey::new(0, 1, 1, true)] - 0.6065306597126334).abs() < 1e-15);

        let dup = [raw[0], raw[0]];
        assert!(matches!(build_importance_table(&dup), Err(Error::DuplicateKey(_))));
        let mut nan = raw[0];
        nan.perf_pruned = f64::NAN;
        assert!(matches!(build_importance_table(&[nan]), Err(Error::NonFinite(_))));
    }

    #[test]
    fn discretization_examples() {
        assert_eq!(discretize_value(10.0, 10.0, 100), 100);
        assert_eq!(discretize_value(12.4, 12.4, 124), 124);
        assert_eq!(discretize_value(0.37, 10.0, 100), 3);
        assert_eq!(discretize_value(25.0, 10.0, 100), 250);
        assert_eq!(discretize_value(0.0, 10.0, 100), 0);
    }

    #[test]
    fn missing_keys_rejected() {
        let net = NetworkDescriptor::from_layers("one", vec![layer(1, 3, 4, 4, false)], [], vec![]).unwrap();
        let mut lat = BTreeMap::new();
        lat.insert(TableKey::new(0, 1, 3, false), 1.0);
        let imp = lat.clone();
        assert!(matches!(
            CostTables::new(&net, lat.clone(), imp.clone()),
            Err(Error::MissingKey(TableKey { k: 1, .. }))
        ));
        lat.insert(TableKey::new(0, 1, 1, true), 0.5);
        let mut imp2 = imp.clone();
        imp2.insert(TableKey::new(0, 1, 1, true), 0.5);
        let tables = CostTables::new(&net, lat, imp2).unwrap();
        assert_eq!(tables.len(), 2);
        assert_eq!(tables.k0, 3);
        assert_eq!(tables.feasible_sizes[&(0, 1)], BTreeSet::from([1, 3]));
    }
}
