//! Seeded random networks, tables and kernels for tests and benchmarks.

use std::collections::BTreeMap;

use ndarray::{Array1, Array3, Array4};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::arch::{FeatureShape, LayerDescriptor, LayerKind, NetworkDescriptor, SkipSpan};
use crate::error::Result;
use crate::kernel::{BatchNormParams, KernelTensor};
use crate::tables::{table_keys, CostTables};

#[derive(Clone, Debug)]
pub struct NetSpec {
    pub layers: usize,
    pub kernel_choices: Vec<usize>,
    pub channel_choices: Vec<usize>,
    pub spatial: usize,
    /// Probability that a layer changes its channel count.
    pub channel_change_prob: f64,
    pub stride_prob: f64,
    pub depthwise_prob: f64,
    pub barrier_prob: f64,
    pub span_prob: f64,
}

impl NetSpec {
    pub fn small(layers: usize) -> Self {
        NetSpec {
            layers,
            kernel_choices: vec![1, 3, 5],
            channel_choices: vec![2, 3, 4],
            spatial: 8,
            channel_change_prob: 0.25,
            stride_prob: 0.1,
            depthwise_prob: 0.15,
            barrier_prob: 0.15,
            span_prob: 0.3,
        }
    }
}

/// Random chain network. At most one strided layer appears between two
/// barriers, and skip-add spans only join positions of equal shape.
pub fn random_network<R: Rng>(rng: &mut R, spec: &NetSpec) -> NetworkDescriptor {
    let mut layers = Vec::with_capacity(spec.layers);
    let mut barriers = Vec::new();
    let mut channels = *spec.channel_choices.choose(rng).expect("channel choices");
    let mut hw = spec.spatial;
    let mut strided_in_run = false;
    for l in 1..=spec.layers {
        if l > 1 && rng.gen_bool(spec.barrier_prob) {
            barriers.push(l - 1);
            strided_in_run = false;
        }
        let k = *spec.kernel_choices.choose(rng).expect("kernel choices");
        let depthwise = rng.gen_bool(spec.depthwise_prob);
        let stride = if !strided_in_run && hw > 1 && rng.gen_bool(spec.stride_prob) {
            strided_in_run = true;
            2
        } else {
            1
        };
        let out_channels = if !depthwise && rng.gen_bool(spec.channel_change_prob) {
            *spec.channel_choices.choose(rng).expect("channel choices")
        } else {
            channels
        };
        let out_hw = hw.div_ceil(stride);
        let norm = if rng.gen_bool(0.3) {
            [0.5, 1.0, 2.0][rng.gen_range(0..3)]
        } else {
            rng.gen_range(0.05..4.0)
        };
        layers.push(LayerDescriptor {
            index: l,
            kind: if depthwise {
                LayerKind::DepthwiseConv
            } else {
                LayerKind::StandardConv
            },
            kernel_size: k,
            stride,
            in_channels: channels,
            out_channels,
            groups: if depthwise { channels } else { 1 },
            in_shape: Some(FeatureShape::new(channels, hw, hw)),
            out_shape: Some(FeatureShape::new(out_channels, out_hw, out_hw)),
            l1_norm: Some(norm),
            has_activation_after: l < spec.layers,
        });
        channels = out_channels;
        hw = out_hw;
    }

    let shape_at = |p: usize| -> FeatureShape {
        if p == 0 {
            layers[0].in_shape.expect("shapes")
        } else {
            layers[p - 1].out_shape.expect("shapes")
        }
    };
    let mut spans: Vec<SkipSpan> = Vec::new();
    let count = layers.len();
    for _ in 0..count {
        if !rng.gen_bool(spec.span_prob) {
            continue;
        }
        let s = rng.gen_range(0..count);
        let e = rng.gen_range(s + 1..=count);
        if shape_at(s) != shape_at(e) {
            continue;
        }
        // Every layer inside must keep the shape for the shortcut to be an
        // identity addition.
        if layers[s..e].iter().any(|l| l.changes_shape() == Some(true)) {
            continue;
        }
        let ok = spans.iter().all(|o| {
            let disjoint = e <= o.start || o.end <= s;
            let nested = (o.start <= s && e <= o.end) || (s <= o.start && o.end <= e);
            (disjoint || nested) && !(o.start == s && o.end == e)
        });
        if ok {
            spans.push(SkipSpan { start: s, end: e });
        }
    }
    NetworkDescriptor::from_layers("random", layers, barriers, spans).expect("generated network is valid")
}

/// Random latency and importance for every key of `net`. Latencies are in
/// `[0.05, 2.0)` ms; about a fifth of the importances repeat a small set of
/// values so that ties occur.
pub fn random_tables<R: Rng>(rng: &mut R, net: &NetworkDescriptor) -> Result<CostTables> {
    let mut latency = BTreeMap::new();
    let mut importance = BTreeMap::new();
    for key in table_keys(net)? {
        latency.insert(key, rng.gen_range(0.05..2.0));
        let imp = if rng.gen_bool(0.2) {
            [0.25, 0.5, 1.0][rng.gen_range(0..3)]
        } else {
            (-rng.gen_range(0.0..2.0f64)).exp()
        };
        importance.insert(key, imp);
    }
    CostTables::new(net, latency, importance)
}

/// Sum of the single-layer latencies `T[l-1, l, Ker(l)]`, the latency of the
/// unmodified network.
pub fn original_latency(tables: &CostTables, net: &NetworkDescriptor) -> f64 {
    (1..=net.len())
        .map(|l| {
            let layer = net.layer(l);
            tables
                .latency
                .get(&crate::tables::TableKey::new(
                    l - 1,
                    l,
                    layer.kernel_size,
                    layer.is_depthwise(),
                ))
                .copied()
                .unwrap_or(0.0)
        })
        .sum()
}

pub fn random_kernel<R: Rng>(
    rng: &mut R,
    out_channels: usize,
    in_channels: usize,
    k: usize,
    stride: usize,
    groups: usize,
) -> KernelTensor {
    let weights = Array4::from_shape_fn((out_channels, in_channels / groups, k, k), |_| rng.gen_range(-1.0..1.0));
    let bias = Array1::from_shape_fn(out_channels, |_| rng.gen_range(-1.0..1.0));
    KernelTensor::new(weights, bias, stride, groups).expect("consistent shapes")
}

/// One random kernel per layer of `net`, matching its descriptor.
pub fn random_kernels<R: Rng>(rng: &mut R, net: &NetworkDescriptor) -> Vec<KernelTensor> {
    net.layers()
        .iter()
        .map(|l| random_kernel(rng, l.out_channels, l.in_channels, l.kernel_size, l.stride, l.groups))
        .collect()
}

pub fn random_input<R: Rng>(rng: &mut R, channels: usize, h: usize, w: usize) -> Array3<f64> {
    Array3::from_shape_fn((channels, h, w), |_| rng.gen_range(-1.0..1.0))
}

pub fn random_batchnorm<R: Rng>(rng: &mut R, channels: usize) -> BatchNormParams {
    BatchNormParams {
        gamma: (0..channels).map(|_| rng.gen_range(0.5..1.5)).collect(),
        beta: (0..channels).map(|_| rng.gen_range(-0.5..0.5)).collect(),
        running_mean: (0..channels).map(|_| rng.gen_range(-0.5..0.5)).collect(),
        running_var: (0..channels).map(|_| rng.gen_range(0.1..2.0)).collect(),
        epsilon: 1e-5,
    }
}

/// A planning problem: network, tables and budget.
#[derive(Clone, Debug)]
pub struct PlanInstance {
    pub net: NetworkDescriptor,
    pub tables: CostTables,
    pub budget: crate::budget::BudgetSpec,
}

/// Random instance with `layers` layers, kernels from `{1, 3, 5}`, a
/// discretization level in `10..=50` and a budget between a fifth of and
/// slightly above the original latency.
pub fn random_plan_instance<R: Rng>(rng: &mut R, layers: usize) -> PlanInstance {
    use crate::budget::{BudgetSpec, ConstraintSense};
    let net = random_network(rng, &NetSpec::small(layers));
    let tables = random_tables(rng, &net).expect("tables cover the generated network");
    let original = original_latency(&tables, &net);
    let t0 = original * rng.gen_range(0.2..1.1);
    let levels = rng.gen_range(10..=50);
    let sense = if rng.gen_bool(0.5) {
        ConstraintSense::Strict
    } else {
        ConstraintSense::Inclusive
    };
    let budget = BudgetSpec::new(t0, Some(levels), sense).expect("positive budget");
    PlanInstance { net, tables, budget }
}

/// A barrier-free network of `layers` layers with kernels mostly 3, budget at
/// 60% of the original latency and `levels` discretization levels. With 100
/// layers `K0` lands near 300.
pub fn scale_instance(seed: u64, layers: usize, levels: u64) -> PlanInstance {
    use crate::budget::{BudgetSpec, ConstraintSense};
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let spec = NetSpec {
        layers,
        kernel_choices: vec![1, 3, 3, 3, 5],
        channel_choices: vec![8, 16],
        spatial: 32,
        channel_change_prob: 0.05,
        stride_prob: 0.0,
        depthwise_prob: 0.1,
        barrier_prob: 0.0,
        span_prob: 0.0,
    };
    let net = random_network(&mut rng, &spec);
    let tables = random_tables(&mut rng, &net).expect("tables cover the generated network");
    let t0 = original_latency(&tables, &net) * 0.6;
    let budget = BudgetSpec::new(t0, Some(levels), ConstraintSense::Strict).expect("positive budget");
    PlanInstance { net, tables, budget }
}

/// A barrier-free stack of `layers` convolutions that can be merged as a
/// whole: after a strided layer only `1x1` kernels follow. Channels stay
/// within `1..=max_channels`, the input is at most `max_hw` square.
pub fn random_stack<R: Rng>(rng: &mut R, layers: usize, max_channels: usize, max_hw: usize) -> NetworkDescriptor {
    let mut out = Vec::with_capacity(layers);
    let mut channels = rng.gen_range(1..=max_channels);
    let mut hw = rng.gen_range(4..=max_hw);
    let mut strided = false;
    for l in 1..=layers {
        let k = if strided { 1 } else { [1, 3, 5][rng.gen_range(0..3)] };
        let stride = if rng.gen_bool(0.3) { 2 } else { 1 };
        strided |= stride > 1;
        let depthwise = channels > 1 && rng.gen_bool(0.25);
        let out_channels = if !depthwise && rng.gen_bool(0.3) {
            rng.gen_range(1..=max_channels)
        } else {
            channels
        };
        let out_hw = hw.div_ceil(stride);
        out.push(LayerDescriptor {
            index: l,
            kind: if depthwise {
                LayerKind::DepthwiseConv
            } else {
                LayerKind::StandardConv
            },
            kernel_size: k,
            stride,
            in_channels: channels,
            out_channels,
            groups: if depthwise { channels } else { 1 },
            in_shape: Some(FeatureShape::new(channels, hw, hw)),
            out_shape: Some(FeatureShape::new(out_channels, out_hw, out_hw)),
            l1_norm: Some(rng.gen_range(0.1..2.0)),
            has_activation_after: l < layers,
        });
        channels = out_channels;
        hw = out_hw;
    }
    NetworkDescriptor::from_layers("stack", out, [], vec![]).expect("generated stack is valid")
}

/// Random keep set honoring the layers that cannot be dropped.
pub fn random_keep<R: Rng>(
    rng: &mut R,
    net: &NetworkDescriptor,
    start: usize,
    end: usize,
) -> std::collections::BTreeSet<usize> {
    (start + 1..=end)
        .filter(|&l| !net.is_substitutable(l) || rng.gen_bool(0.6))
        .collect()
}
