//! Exact planners over discretized latencies.
//!
//! [`solve`] runs the segment dynamic program
//!
//! ```text
//! M[0, t] = 0
//! M[l, t] = max over admissible (l', l], k:  M[l', t - T[l', l, k]] + I[l', l, k]
//! ```
//!
//! and backtracks the chosen segments. [`solve_layer_only`] is the layer
//! pruning baseline, a 0-1 knapsack over whole layers.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::arch::{NetworkDescriptor, SkipSpan};
use crate::budget::BudgetSpec;
use crate::error::{Error, Result};
use crate::keep_set::solve_keep_set_flagged;
use crate::tables::{CostTables, TableKey};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlanMode {
    LayerMerge,
    LayerOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanSegment {
    pub start: usize,
    pub end: usize,
    pub kernel_size: usize,
    pub depthwise: bool,
}

impl PlanSegment {
    pub fn key(&self) -> TableKey {
        TableKey::new(self.start, self.end, self.kernel_size, self.depthwise)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergePlan {
    pub mode: PlanMode,
    pub objective: f64,
    pub latency_units: u64,
    pub budget_units: u64,
    pub kept_activations: Vec<usize>,
    pub kept_convs: Vec<usize>,
    pub segments: Vec<PlanSegment>,
}

impl MergePlan {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("plan serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Choice {
    start: u32,
    k: u32,
    depthwise: bool,
    cost: u32,
}

/// The filled DP table together with its backpointers.
#[derive(Clone, Debug)]
pub struct DpState {
    width: usize,
    m: Vec<f64>,
    choice: Vec<Option<Choice>>,
    layer_count: usize,
}

impl DpState {
    /// `M[l, t]`, or `None` where no chain of segments fits.
    pub fn value(&self, l: usize, t: usize) -> Option<f64> {
        let v = self.m[l * self.width + t];
        (v != f64::NEG_INFINITY).then_some(v)
    }

    pub fn capacity(&self) -> usize {
        self.width - 1
    }

    pub fn layer_count(&self) -> usize {
        self.layer_count
    }

    /// The segment ending at `l` chosen for cell `(l, t)`.
    pub fn choice(&self, l: usize, t: usize) -> Option<(usize, usize, bool)> {
        self.choice[l * self.width + t].map(|c| (c.start as usize, c.k as usize, c.depthwise))
    }
}

struct Candidate {
    start: usize,
    k: usize,
    depthwise: bool,
    cost: usize,
    importance: f64,
}

/// Admissible candidates per segment end, ordered by `(start, k, depthwise)`.
fn candidates(tables: &CostTables, budget: &BudgetSpec, net: &NetworkDescriptor) -> Result<Vec<Vec<Candidate>>> {
    let count = net.len();
    if tables.layer_count != count {
        return Err(Error::InvalidArgument(format!(
            "tables describe {} layers, network has {count}",
            tables.layer_count
        )));
    }
    let mut out: Vec<Vec<Candidate>> = (0..=count).map(|_| Vec::new()).collect();
    for (i, j) in net.admissible_segments() {
        let mut any = false;
        for key in tables.segment_keys(i, j) {
            let (latency, importance) = tables.entry(key).ok_or(Error::MissingKey(*key))?;
            any = true;
            let units = budget.units(latency);
            if units > budget.capacity() {
                continue;
            }
            out[j].push(Candidate {
                start: i,
                k: key.k,
                depthwise: key.depthwise,
                cost: units as usize,
                importance,
            });
        }
        if !any {
            return Err(Error::MissingSegment { i, j });
        }
    }
    Ok(out)
}

/// Fills `M` and the backpointers.
pub fn run_dp(tables: &CostTables, budget: &BudgetSpec, net: &NetworkDescriptor) -> Result<DpState> {
    let cands = candidates(tables, budget, net)?;
    let count = net.len();
    let cap = usize::try_from(budget.capacity())
        .map_err(|_| Error::InvalidArgument("discretization level too large".into()))?;
    let width = cap + 1;
    let mut m = vec![f64::NEG_INFINITY; (count + 1) * width];
    let mut choice: Vec<Option<Choice>> = vec![None; (count + 1) * width];
    m[..width].fill(0.0);

    for l in 1..=count {
        let (done, rest) = m.split_at_mut(l * width);
        let row = &mut rest[..width];
        let choice_row = &mut choice[l * width..(l + 1) * width];
        // Candidates are visited in tie-break order and only a strictly
        // larger value replaces the incumbent.
        for c in &cands[l] {
            let prev = &done[c.start * width..(c.start + 1) * width];
            for t in c.cost..width {
                let base = prev[t - c.cost];
                if base == f64::NEG_INFINITY {
                    continue;
                }
                let v = base + c.importance;
                if v > row[t] {
                    row[t] = v;
                    choice_row[t] = Some(Choice {
                        start: c.start as u32,
                        k: c.k as u32,
                        depthwise: c.depthwise,
                        cost: c.cost as u32,
                    });
                }
            }
        }
    }
    Ok(DpState {
        width,
        m,
        choice,
        layer_count: count,
    })
}

/// Smallest total of discretized latencies over all complete segmentations.
pub fn minimum_units(tables: &CostTables, budget: &BudgetSpec, net: &NetworkDescriptor) -> Option<u64> {
    let count = net.len();
    let mut best: Vec<Option<u64>> = vec![None; count + 1];
    best[0] = Some(0);
    for (i, j) in net.admissible_segments() {
        let Some(base) = best[i] else { continue };
        for key in tables.segment_keys(i, j) {
            let units = budget.units(tables.latency[key]);
            let total = base + units;
            if best[j].is_none_or(|b| total < b) {
                best[j] = Some(total);
            }
        }
    }
    best[count]
}

fn infeasible(tables: &CostTables, budget: &BudgetSpec, net: &NetworkDescriptor) -> Error {
    match minimum_units(tables, budget, net) {
        Some(minimum) => Error::InfeasibleBudget {
            capacity: budget.capacity(),
            minimum,
        },
        None => Error::NoPlan,
    }
}

/// Optimal layer-merge plan for the discretized problem.
pub fn solve(tables: &CostTables, budget: &BudgetSpec, net: &NetworkDescriptor) -> Result<MergePlan> {
    let dp = run_dp(tables, budget, net)?;
    let count = net.len();
    let cap = dp.capacity();
    let Some(objective) = dp.value(count, cap) else {
        return Err(infeasible(tables, budget, net));
    };

    let mut segments = Vec::new();
    let (mut l, mut t) = (count, cap);
    let mut latency_units = 0u64;
    while l > 0 {
        let c = dp.choice[l * dp.width + t].expect("finite cell has a backpointer");
        segments.push(PlanSegment {
            start: c.start as usize,
            end: l,
            kernel_size: c.k as usize,
            depthwise: c.depthwise,
        });
        latency_units += c.cost as u64;
        t -= c.cost as usize;
        l = c.start as usize;
    }
    segments.reverse();

    let mut kept_convs = BTreeSet::new();
    for s in &segments {
        kept_convs.extend(solve_keep_set_flagged(s.start, s.end, s.kernel_size, s.depthwise, net)?.keep);
    }
    let kept_activations = segments[..segments.len() - 1].iter().map(|s| s.end).collect();

    Ok(MergePlan {
        mode: PlanMode::LayerMerge,
        objective,
        latency_units,
        budget_units: budget.levels,
        kept_activations,
        kept_convs: kept_convs.into_iter().collect(),
        segments,
    })
}

/// Layer-pruning baseline: keep the layers maximizing total importance under
/// the budget. Layers that cannot be replaced by the identity are always
/// kept. `importance[l - 1]` and `latency_ms[l - 1]` describe layer `l`.
pub fn solve_layer_only(
    importance: &[f64],
    latency_ms: &[f64],
    budget: &BudgetSpec,
    net: &NetworkDescriptor,
) -> Result<MergePlan> {
    let count = net.len();
    if importance.len() != count || latency_ms.len() != count {
        return Err(Error::InvalidArgument(format!(
            "layer-only maps must cover {count} layers, got {} importances and {} latencies",
            importance.len(),
            latency_ms.len()
        )));
    }
    for (n, (&v, &t)) in importance.iter().zip(latency_ms).enumerate() {
        if !v.is_finite() || !(t.is_finite() && t >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "layer {} has non-finite importance or latency",
                n + 1
            )));
        }
    }
    let costs: Vec<u64> = latency_ms.iter().map(|&t| budget.units(t)).collect();
    let forced: Vec<bool> = (1..=count).map(|l| !net.is_substitutable(l)).collect();
    let cap = budget.capacity();
    let minimum: u64 = costs.iter().zip(&forced).filter(|(_, &f)| f).map(|(c, _)| c).sum();
    if minimum > cap {
        return Err(Error::InfeasibleBudget { capacity: cap, minimum });
    }

    let (value, keep) = knapsack(importance, &costs, &forced, cap);
    let units: u64 = keep.iter().map(|&l| costs[l - 1]).sum();
    Ok(layer_only_plan(net, &keep, value, units, budget.levels))
}

/// 0-1 knapsack with mandatory items. Returns the best value and the chosen
/// items (1-based). An optional item is taken only when that strictly
/// improves the value.
pub fn knapsack(values: &[f64], costs: &[u64], forced: &[bool], capacity: u64) -> (f64, BTreeSet<usize>) {
    let n = values.len();
    let width = capacity as usize + 1;
    let mut table = vec![f64::NEG_INFINITY; (n + 1) * width];
    let mut take = vec![false; (n + 1) * width];
    table[..width].fill(0.0);
    for item in 1..=n {
        let cost = costs[item - 1] as usize;
        for t in 0..width {
            let skip = if forced[item - 1] {
                f64::NEG_INFINITY
            } else {
                table[(item - 1) * width + t]
            };
            let mut best = skip;
            let mut took = false;
            if t >= cost {
                let base = table[(item - 1) * width + t - cost];
                if base != f64::NEG_INFINITY {
                    let v = base + values[item - 1];
                    if v > best {
                        best = v;
                        took = true;
                    }
                }
            }
            table[item * width + t] = best;
            take[item * width + t] = took;
        }
    }
    let value = table[n * width + width - 1];
    let mut keep = BTreeSet::new();
    let mut t = width - 1;
    for item in (1..=n).rev() {
        if take[item * width + t] {
            keep.insert(item);
            t -= costs[item - 1] as usize;
        }
    }
    (value, keep)
}

/// One segment per layer: kept layers keep their kernel, removed layers
/// become `1x1` identities.
fn layer_only_plan(
    net: &NetworkDescriptor,
    keep: &BTreeSet<usize>,
    objective: f64,
    units: u64,
    levels: u64,
) -> MergePlan {
    let count = net.len();
    let segments = (1..=count)
        .map(|l| {
            let layer = net.layer(l);
            let kept = keep.contains(&l);
            PlanSegment {
                start: l - 1,
                end: l,
                kernel_size: if kept { layer.kernel_size } else { 1 },
                depthwise: !kept || layer.is_depthwise(),
            }
        })
        .collect();
    let kept_activations = keep
        .iter()
        .copied()
        .filter(|&l| l < count && net.layer(l).has_activation_after)
        .collect();
    MergePlan {
        mode: PlanMode::LayerOnly,
        objective,
        latency_units: units,
        budget_units: levels,
        kept_activations,
        kept_convs: keep.iter().copied().collect(),
        segments,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "violation", rename_all = "kebab-case")]
pub enum Violation {
    Partition {
        reason: String,
    },
    BarrierCrossed {
        start: usize,
        end: usize,
        barrier: usize,
    },
    SpanCrossed {
        start: usize,
        end: usize,
        span: SkipSpan,
    },
    MissingIrreducible {
        layer: usize,
    },
    UnknownLayer {
        layer: usize,
    },
    ActivationsMismatch {
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    KernelSizeMismatch {
        start: usize,
        end: usize,
        declared: usize,
        derived: usize,
    },
    DepthwiseMismatch {
        start: usize,
        end: usize,
        declared: bool,
        derived: bool,
    },
    KeepSetMismatch {
        start: usize,
        end: usize,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    KeepSetUnavailable {
        start: usize,
        end: usize,
        reason: String,
    },
    MissingKey {
        key: TableKey,
    },
    ObjectiveMismatch {
        declared: f64,
        recomputed: f64,
    },
    LatencyMismatch {
        declared: u64,
        recomputed: u64,
    },
    BudgetMismatch {
        declared: u64,
        expected: u64,
    },
    OverBudget {
        units: u64,
        capacity: u64,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Partition { reason } => write!(f, "segments do not partition the network: {reason}"),
            Violation::BarrierCrossed { start, end, barrier } => {
                write!(f, "segment ({start}, {end}] crosses the barrier at {barrier}")
            }
            Violation::SpanCrossed { start, end, span } => write!(
                f,
                "segment ({start}, {end}] cuts the skip-add span [{}, {}]",
                span.start, span.end
            ),
            Violation::MissingIrreducible { layer } => {
                write!(f, "irreducible layer {layer} is missing from the kept convolutions")
            }
            Violation::UnknownLayer { layer } => write!(f, "kept convolution {layer} does not exist"),
            Violation::ActivationsMismatch { expected, found } => {
                write!(f, "kept activations {found:?} should be {expected:?}")
            }
            Violation::KernelSizeMismatch {
                start,
                end,
                declared,
                derived,
            } => write!(
                f,
                "segment ({start}, {end}] declares kernel size {declared} but its kept layers give {derived}"
            ),
            Violation::DepthwiseMismatch {
                start,
                end,
                declared,
                derived,
            } => write!(
                f,
                "segment ({start}, {end}] declares depthwise={declared} but its kept layers give {derived}"
            ),
            Violation::KeepSetMismatch {
                start,
                end,
                expected,
                found,
            } => write!(
                f,
                "segment ({start}, {end}] keeps {found:?}; the l1-maximal keep set is {expected:?}"
            ),
            Violation::KeepSetUnavailable { start, end, reason } => {
                write!(f, "segment ({start}, {end}]: {reason}")
            }
            Violation::MissingKey { key } => write!(f, "no table entry for {key}"),
            Violation::ObjectiveMismatch { declared, recomputed } => {
                write!(f, "objective {declared} does not match the recomputed {recomputed}")
            }
            Violation::LatencyMismatch { declared, recomputed } => {
                write!(f, "latency {declared} units does not match the recomputed {recomputed}")
            }
            Violation::BudgetMismatch { declared, expected } => {
                write!(f, "plan was made for {declared} budget units, expected {expected}")
            }
            Violation::OverBudget { units, capacity } => {
                write!(f, "latency {units} units exceeds the admissible {capacity}")
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub passed: bool,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    fn from(violations: Vec<Violation>) -> Self {
        ValidationReport {
            passed: violations.is_empty(),
            violations,
        }
    }
}

fn close(a: f64, b: f64) -> bool {
    a == b || (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
}

/// Checks the structure shared by both plan modes: segment partition,
/// barriers, spans, R-inclusion and per-segment kernel sizes.
fn check_structure(plan: &MergePlan, net: &NetworkDescriptor, out: &mut Vec<Violation>) -> bool {
    let count = net.len();
    let kept: BTreeSet<usize> = plan.kept_convs.iter().copied().collect();
    if kept.len() != plan.kept_convs.len() {
        out.push(Violation::Partition {
            reason: "kept convolutions contain duplicates".into(),
        });
    }
    for &l in &kept {
        if l == 0 || l > count {
            out.push(Violation::UnknownLayer { layer: l });
        }
    }
    for &r in net.irreducible() {
        if !kept.contains(&r) {
            out.push(Violation::MissingIrreducible { layer: r });
        }
    }

    let mut pos = 0;
    for s in &plan.segments {
        if s.start != pos || s.end <= s.start || s.end > count {
            out.push(Violation::Partition {
                reason: format!("segment ({}, {}] does not start at {pos}", s.start, s.end),
            });
            return false;
        }
        pos = s.end;
    }
    if pos != count {
        out.push(Violation::Partition {
            reason: format!("segments end at {pos}, the network has {count} layers"),
        });
        return false;
    }

    for s in &plan.segments {
        if let Some(b) = net.first_barrier_in(s.start, s.end) {
            out.push(Violation::BarrierCrossed {
                start: s.start,
                end: s.end,
                barrier: b,
            });
        }
        if let Some(span) = net.crossed_span(s.start, s.end) {
            out.push(Violation::SpanCrossed {
                start: s.start,
                end: s.end,
                span,
            });
        }
        for l in s.start + 1..=s.end {
            if !kept.contains(&l) && !net.is_substitutable(l) && !net.irreducible().contains(&l) {
                out.push(Violation::KeepSetUnavailable {
                    start: s.start,
                    end: s.end,
                    reason: format!("layer {l} is dropped but cannot be replaced by the identity"),
                });
            }
        }
        let derived = net.merged_size_of(s.start, s.end, &kept);
        if derived != s.kernel_size {
            out.push(Violation::KernelSizeMismatch {
                start: s.start,
                end: s.end,
                declared: s.kernel_size,
                derived,
            });
        }
        let derived = net.merged_is_depthwise(s.start, s.end, &kept);
        if derived != s.depthwise {
            out.push(Violation::DepthwiseMismatch {
                start: s.start,
                end: s.end,
                declared: s.depthwise,
                derived,
            });
        }
    }
    true
}

fn check_budget(plan: &MergePlan, budget: &BudgetSpec, recomputed: u64, out: &mut Vec<Violation>) {
    if plan.budget_units != budget.levels {
        out.push(Violation::BudgetMismatch {
            declared: plan.budget_units,
            expected: budget.levels,
        });
    }
    if recomputed != plan.latency_units {
        out.push(Violation::LatencyMismatch {
            declared: plan.latency_units,
            recomputed,
        });
    }
    if recomputed > budget.capacity() {
        out.push(Violation::OverBudget {
            units: recomputed,
            capacity: budget.capacity(),
        });
    }
}

/// Re-derives everything a layer-merge plan claims and lists what does not
/// hold.
pub fn validate_plan(
    plan: &MergePlan,
    tables: &CostTables,
    budget: &BudgetSpec,
    net: &NetworkDescriptor,
) -> ValidationReport {
    let mut out = Vec::new();
    if plan.mode != PlanMode::LayerMerge {
        out.push(Violation::Partition {
            reason: "layer-only plans are checked with validate_layer_only_plan".into(),
        });
        return ValidationReport::from(out);
    }
    if !check_structure(plan, net, &mut out) {
        return ValidationReport::from(out);
    }

    let expected: Vec<usize> = plan.segments[..plan.segments.len() - 1].iter().map(|s| s.end).collect();
    if expected != plan.kept_activations {
        out.push(Violation::ActivationsMismatch {
            expected,
            found: plan.kept_activations.clone(),
        });
    }

    let kept: BTreeSet<usize> = plan.kept_convs.iter().copied().collect();
    let mut objective = 0.0;
    let mut units = 0u64;
    for s in &plan.segments {
        match tables.entry(&s.key()) {
            Some((latency, importance)) => {
                objective += importance;
                units += budget.units(latency);
            }
            None => out.push(Violation::MissingKey { key: s.key() }),
        }
        match solve_keep_set_flagged(s.start, s.end, s.kernel_size, s.depthwise, net) {
            Ok(best) => {
                let found: Vec<usize> = kept.range(s.start + 1..=s.end).copied().collect();
                let expected: Vec<usize> = best.keep.into_iter().collect();
                if found != expected {
                    out.push(Violation::KeepSetMismatch {
                        start: s.start,
                        end: s.end,
                        expected,
                        found,
                    });
                }
            }
            Err(e) => out.push(Violation::KeepSetUnavailable {
                start: s.start,
                end: s.end,
                reason: e.to_string(),
            }),
        }
    }
    if !close(objective, plan.objective) {
        out.push(Violation::ObjectiveMismatch {
            declared: plan.objective,
            recomputed: objective,
        });
    }
    check_budget(plan, budget, units, &mut out);
    ValidationReport::from(out)
}

/// Validation for plans produced by [`solve_layer_only`].
pub fn validate_layer_only_plan(
    plan: &MergePlan,
    importance: &[f64],
    latency_ms: &[f64],
    budget: &BudgetSpec,
    net: &NetworkDescriptor,
) -> ValidationReport {
    let mut out = Vec::new();
    let count = net.len();
    if importance.len() != count || latency_ms.len() != count {
        out.push(Violation::Partition {
            reason: format!("layer maps must cover {count} layers"),
        });
        return ValidationReport::from(out);
    }
    if plan.mode != PlanMode::LayerOnly {
        out.push(Violation::Partition {
            reason: "layer-merge plans are checked with validate_plan".into(),
        });
        return ValidationReport::from(out);
    }
    if !check_structure(plan, net, &mut out) {
        return ValidationReport::from(out);
    }
    if plan.segments.iter().any(|s| s.end != s.start + 1) {
        out.push(Violation::Partition {
            reason: "layer-only plans carry one segment per layer".into(),
        });
    }
    let kept: BTreeSet<usize> = plan
        .kept_convs
        .iter()
        .copied()
        .filter(|&l| l >= 1 && l <= count)
        .collect();
    let expected: Vec<usize> = kept
        .iter()
        .copied()
        .filter(|&l| l < count && net.layer(l).has_activation_after)
        .collect();
    if expected != plan.kept_activations {
        out.push(Violation::ActivationsMismatch {
            expected,
            found: plan.kept_activations.clone(),
        });
    }
    let objective: f64 = kept.iter().fold(0.0, |acc, &l| acc + importance[l - 1]);
    if !close(objective, plan.objective) {
        out.push(Violation::ObjectiveMismatch {
            declared: plan.objective,
            recomputed: objective,
        });
    }
    let units = kept.iter().map(|&l| budget.units(latency_ms[l - 1])).sum();
    check_budget(plan, budget, units, &mut out);
    ValidationReport::from(out)
}
