//! Exhaustive reference solvers.
//!
//! Each oracle re-reads the raw network fields and enumerates every
//! configuration; nothing here calls into the planner, the keep-set solver
//! or the kernel-size enumeration.

use std::collections::BTreeSet;

use crate::arch::NetworkDescriptor;
use crate::budget::BudgetSpec;
use crate::error::{Error, Result};
use crate::tables::{CostTables, TableKey};

pub const PLAN_LAYER_LIMIT: usize = 12;
pub const KEEP_SET_SPAN_LIMIT: usize = 14;
pub const KNAPSACK_ITEM_LIMIT: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct OracleResult<W> {
    /// Best objective, `None` when nothing is feasible.
    pub objective: Option<f64>,
    pub witness: Option<W>,
    /// Number of configurations enumerated.
    pub explored: u64,
}

fn floor_units(latency_ms: f64, budget: &BudgetSpec) -> u64 {
    let x = (latency_ms * budget.levels as f64 / budget.t0_ms).floor();
    if x > 0.0 {
        x as u64
    } else {
        0
    }
}

/// Whether layers `(i, j]` may form one merged layer, from the raw barrier
/// and span lists.
fn legal_segment(net: &NetworkDescriptor, i: usize, j: usize) -> bool {
    if net.barriers().iter().any(|&b| i < b && b < j) {
        return false;
    }
    net.skip_add_spans().iter().all(|span| {
        let (s, e) = (span.start, span.end);
        let disjoint = j <= s || e <= i;
        let covers = i <= s && e <= j;
        let within = s <= i && j <= e;
        disjoint || covers || within
    })
}

/// Every `(A, k)` assignment: activation subsets by bitmask, then every
/// combination of table variants across the resulting segments.
pub fn brute_force_plan(
    tables: &CostTables,
    budget: &BudgetSpec,
    net: &NetworkDescriptor,
) -> Result<OracleResult<Vec<TableKey>>> {
    let count = net.len();
    if count > PLAN_LAYER_LIMIT {
        return Err(Error::GuardLimit {
            what: "layer count",
            value: count,
            limit: PLAN_LAYER_LIMIT,
        });
    }
    let capacity = budget.capacity();
    let mut best: Option<(f64, Vec<TableKey>)> = None;
    let mut explored = 0u64;

    for mask in 0u32..(1u32 << (count - 1)) {
        let mut bounds = vec![0];
        bounds.extend((1..count).filter(|p| mask & (1 << (p - 1)) != 0));
        bounds.push(count);
        let segs: Vec<(usize, usize)> = bounds.windows(2).map(|w| (w[0], w[1])).collect();
        if !segs.iter().all(|&(i, j)| legal_segment(net, i, j)) {
            continue;
        }
        let options: Vec<Vec<(TableKey, f64, f64)>> = segs
            .iter()
            .map(|&(i, j)| {
                tables
                    .latency
                    .iter()
                    .filter(|(key, _)| key.i == i && key.j == j)
                    .map(|(key, &t)| (*key, t, tables.importance[key]))
                    .collect()
            })
            .collect();
        if options.iter().any(Vec::is_empty) {
            continue;
        }
        let mut digits = vec![0usize; segs.len()];
        loop {
            explored += 1;
            let mut value = 0.0;
            let mut units = 0u64;
            for (n, &d) in digits.iter().enumerate() {
                let (_, t, imp) = options[n][d];
                value += imp;
                units += floor_units(t, budget);
            }
            if units <= capacity && best.as_ref().is_none_or(|(b, _)| value > *b) {
                best = Some((
                    value,
                    digits.iter().enumerate().map(|(n, &d)| options[n][d].0).collect(),
                ));
            }
            // odometer, last segment fastest
            let mut advanced = false;
            for n in (0..segs.len()).rev() {
                digits[n] += 1;
                if digits[n] < options[n].len() {
                    advanced = true;
                    break;
                }
                digits[n] = 0;
            }
            if !advanced {
                break;
            }
        }
    }
    Ok(OracleResult {
        objective: best.as_ref().map(|b| b.0),
        witness: best.map(|b| b.1),
        explored,
    })
}

/// Exhaustive search for the ℓ1-maximal keep set of `(i, j]` with merged
/// size `k`, optionally restricted to one depthwise outcome.
pub fn brute_force_keep_set(
    i: usize,
    j: usize,
    k: usize,
    depthwise: Option<bool>,
    net: &NetworkDescriptor,
) -> Result<OracleResult<BTreeSet<usize>>> {
    let span = j.saturating_sub(i);
    if span > KEEP_SET_SPAN_LIMIT {
        return Err(Error::GuardLimit {
            what: "segment length",
            value: span,
            limit: KEEP_SET_SPAN_LIMIT,
        });
    }
    let layers: Vec<_> = (i + 1..=j).map(|l| net.layer(l)).collect();
    let mut best: Option<(f64, BTreeSet<usize>)> = None;
    let mut explored = 0u64;
    for mask in (0u32..(1u32 << span)).rev() {
        explored += 1;
        let kept = |n: usize| mask & (1 << n) != 0;
        let ok = layers.iter().enumerate().all(|(n, layer)| {
            kept(n)
                || (!net.irreducible().contains(&layer.index)
                    && layer.stride == 1
                    && layer.in_channels == layer.out_channels)
        });
        if !ok {
            continue;
        }
        let mut size = 1;
        let mut stride = 1;
        let mut value = 0.0;
        let mut all_depthwise = true;
        for (n, layer) in layers.iter().enumerate() {
            if kept(n) {
                size += (layer.kernel_size - 1) * stride;
                value += layer.l1_norm.ok_or(Error::MissingNorm(layer.index))?;
                all_depthwise &= layer.groups == layer.in_channels && layer.groups == layer.out_channels;
            }
            stride *= layer.stride;
        }
        if size != k || depthwise.is_some_and(|d| d != all_depthwise) {
            continue;
        }
        if best.as_ref().is_none_or(|(b, _)| value > *b) {
            let set = (0..span).filter(|&n| kept(n)).map(|n| i + 1 + n).collect();
            best = Some((value, set));
        }
    }
    Ok(OracleResult {
        objective: best.as_ref().map(|b| b.0),
        witness: best.map(|b| b.1),
        explored,
    })
}

/// Exhaustive 0-1 knapsack with mandatory items; items are 1-based in the
/// witness.
pub fn brute_force_knapsack(
    values: &[f64],
    costs: &[u64],
    forced: &[bool],
    capacity: u64,
) -> Result<OracleResult<BTreeSet<usize>>> {
    let n = values.len();
    if n > KNAPSACK_ITEM_LIMIT {
        return Err(Error::GuardLimit {
            what: "item count",
            value: n,
            limit: KNAPSACK_ITEM_LIMIT,
        });
    }
    let mut best: Option<(f64, BTreeSet<usize>)> = None;
    let mut explored = 0u64;
    for mask in (0u32..(1u32 << n)).rev() {
        explored += 1;
        let take = |x: usize| mask & (1 << x) != 0;
        if (0..n).any(|x| forced[x] && !take(x)) {
            continue;
        }
        let cost: u64 = (0..n).filter(|&x| take(x)).map(|x| costs[x]).sum();
        if cost > capacity {
            continue;
        }
        let value = (0..n).filter(|&x| take(x)).fold(0.0, |acc, x| acc + values[x]);
        if best.as_ref().is_none_or(|(b, _)| value > *b) {
            best = Some((value, (0..n).filter(|&x| take(x)).map(|x| x + 1).collect()));
        }
    }
    Ok(OracleResult {
        objective: best.as_ref().map(|b| b.0),
        witness: best.map(|b| b.1),
        explored,
    })
}
