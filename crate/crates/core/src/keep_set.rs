//! Choice of the kept convolutions inside one merge segment.
//!
//! For a segment `(i, j]` and a target kernel size `k`, the kept layers must
//! include every layer that cannot be replaced by the identity and their
//! kernel increments must sum to exactly `k - 1`. Among those subsets the
//! one with the largest total ℓ1 norm is kept.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::arch::NetworkDescriptor;
use crate::error::{Error, Result};
use crate::tables::check_segment;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeepSetSolution {
    pub keep: BTreeSet<usize>,
    pub total_l1: f64,
    pub achieved_k: usize,
    pub depthwise_result: bool,
}

#[derive(Clone)]
struct Partial {
    value: f64,
    members: Vec<bool>,
}

impl Partial {
    /// Larger ℓ1 sum first; equal sums prefer the set that keeps the earliest
    /// layer where the two differ.
    fn beats(&self, other: &Partial) -> bool {
        if self.value != other.value {
            return self.value > other.value;
        }
        self.members > other.members
    }
}

fn better(slot: &mut Option<Partial>, candidate: Partial) {
    match slot {
        Some(current) if !candidate.beats(current) => {}
        _ => *slot = Some(candidate),
    }
}

/// Best kept subset for each `(increment sum, dense kept)` state.
fn run(i: usize, j: usize, net: &NetworkDescriptor) -> Result<Vec<[Option<Partial>; 2]>> {
    check_segment(i, j, net)?;
    let norms = (i + 1..=j)
        .map(|l| net.layer(l).l1_norm.ok_or(Error::MissingNorm(l)))
        .collect::<Result<Vec<f64>>>()?;
    let increments = net.kernel_increments(i, j);
    let max_sum: usize = increments.iter().sum();

    let mut states: Vec<[Option<Partial>; 2]> = vec![[None, None]; max_sum + 1];
    states[0][0] = Some(Partial {
        value: 0.0,
        members: Vec::new(),
    });
    for (pos, l) in (i + 1..=j).enumerate() {
        let forced = !net.is_substitutable(l);
        let dw = net.layer(l).is_depthwise();
        let mut next: Vec<[Option<Partial>; 2]> = vec![[None, None]; max_sum + 1];
        for (s, pair) in states.iter().enumerate() {
            for (dense, slot) in pair.iter().enumerate() {
                let Some(p) = slot else { continue };
                if !forced {
                    let mut members = p.members.clone();
                    members.push(false);
                    better(
                        &mut next[s][dense],
                        Partial {
                            value: p.value,
                            members,
                        },
                    );
                }
                let mut members = p.members.clone();
                members.push(true);
                let to = if dw { dense } else { 1 };
                better(
                    &mut next[s + increments[pos]][to],
                    Partial {
                        value: p.value + norms[pos],
                        members,
                    },
                );
            }
        }
        states = next;
    }
    Ok(states)
}

fn finish(i: usize, k: usize, p: Partial, depthwise: bool) -> KeepSetSolution {
    let keep = p
        .members
        .iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .map(|(pos, _)| i + 1 + pos)
        .collect();
    KeepSetSolution {
        keep,
        total_l1: p.value,
        achieved_k: k,
        depthwise_result: depthwise,
    }
}

/// ℓ1-maximal keep set realizing kernel size `k` on `(i, j]`, over both
/// depthwise outcomes.
pub fn solve_keep_set(i: usize, j: usize, k: usize, net: &NetworkDescriptor) -> Result<KeepSetSolution> {
    let states = run(i, j, net)?;
    let [dw, dense] = k
        .checked_sub(1)
        .and_then(|s| states.get(s).cloned())
        .unwrap_or([None, None]);
    match (dense, dw) {
        (None, None) => Err(Error::InfeasibleKernelSize { i, j, k }),
        (Some(d), None) => Ok(finish(i, k, d, false)),
        (None, Some(w)) => Ok(finish(i, k, w, true)),
        (Some(d), Some(w)) => Ok(if w.beats(&d) {
            finish(i, k, w, true)
        } else {
            finish(i, k, d, false)
        }),
    }
}

/// Like [`solve_keep_set`], restricted to keep sets whose merged layer is
/// (or is not) depthwise.
pub fn solve_keep_set_flagged(
    i: usize,
    j: usize,
    k: usize,
    depthwise: bool,
    net: &NetworkDescriptor,
) -> Result<KeepSetSolution> {
    let states = run(i, j, net)?;
    k.checked_sub(1)
        .and_then(|s| states.into_iter().nth(s))
        .and_then(|[dw, dense]| if depthwise { dw } else { dense })
        .map(|p| finish(i, k, p, depthwise))
        .ok_or(Error::InfeasibleKernelSize { i, j, k })
}

/// `C̃ = {1..i} ∪ keep ∪ {j+1..L}` and `Ã = {1..i} ∪ {j..L-1}`.
pub fn extend_sets(
    i: usize,
    j: usize,
    keep: &KeepSetSolution,
    layer_count: usize,
) -> (BTreeSet<usize>, BTreeSet<usize>) {
    let convs = (1..=i)
        .chain(keep.keep.iter().copied())
        .chain(j + 1..=layer_count)
        .collect();
    let activations = (1..=i).chain(j..layer_count).filter(|&a| a >= 1).collect();
    (convs, activations)
}
