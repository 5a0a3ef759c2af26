use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use depthforge::fuse::{evaluate_sequential, merge_plan, pad_input, relative_error};
use depthforge::kernel::{fold_batchnorm, read_batchnorm, read_kernel, write_kernel};
use depthforge::oracle::{brute_force_knapsack, brute_force_plan};
use depthforge::planner::{self, validate_layer_only_plan, validate_plan, Violation};
use depthforge::synth::random_input;
use depthforge::tables::{
    build_latency_table, enumerate_variants, latency_query, read_importance, write_latency_csv, AnalyticProvider,
    LatencyProvider, TableProvider,
};
use depthforge::{
    BudgetSpec, ConstraintSense, CostTables, KernelTensor, MergePlan, NetworkDescriptor, PlanMode, TableKey,
};

use crate::{
    BudgetArgs, GenTablesArgs, LatencySource, MergeArgs, Mode, PlanArgs, Sense, SolveArgs, SweepArgs, VerifyArgs,
};

/// Largest relative deviation accepted between a merged kernel and the
/// layers it replaces.
const EQUIVALENCE_TOLERANCE: f64 = 1e-5;

fn load_net(path: &Path) -> Result<NetworkDescriptor> {
    NetworkDescriptor::load(path).with_context(|| format!("reading network {}", path.display()))
}

fn provider(source: &LatencySource) -> Result<Option<Box<dyn LatencyProvider>>> {
    Ok(match (&source.latency, &source.analytic) {
        (Some(path), _) => Some(Box::new(
            TableProvider::load(path).with_context(|| format!("reading latency table {}", path.display()))?,
        )),
        (None, Some(path)) => {
            Some(Box::new(AnalyticProvider::load(path).with_context(|| {
                format!("reading analytic config {}", path.display())
            })?))
        }
        (None, None) => None,
    })
}

fn require_provider(source: &LatencySource) -> Result<Box<dyn LatencyProvider>> {
    provider(source)?.ok_or_else(|| {
        anyhow!(depthforge::Error::InvalidArgument(
            "one of --latency or --analytic is required".into()
        ))
    })
}

fn single_layer_key(net: &NetworkDescriptor, l: usize) -> TableKey {
    let layer = net.layer(l);
    TableKey::new(l - 1, l, layer.kernel_size, layer.is_depthwise())
}

/// Per-layer latencies of the unmodified network.
fn layer_latencies(net: &NetworkDescriptor, provider: &dyn LatencyProvider) -> Result<Vec<f64>> {
    (1..=net.len())
        .map(|l| Ok(provider.latency_ms(&latency_query(net, single_layer_key(net, l)))?))
        .collect()
}

fn sense(s: Sense) -> ConstraintSense {
    match s {
        Sense::Strict => ConstraintSense::Strict,
        Sense::Inclusive => ConstraintSense::Inclusive,
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
struct LayerImportance {
    layer: usize,
    importance: f64,
}

/// Everything a solve needs, loaded once.
struct Problem {
    net: NetworkDescriptor,
    original_ms: f64,
    inputs: Inputs,
}

enum Inputs {
    Merge(CostTables),
    LayerOnly { importance: Vec<f64>, latency: Vec<f64> },
}

fn read_layer_importance(path: &Path, net: &NetworkDescriptor) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let rows: Vec<LayerImportance> = serde_json::from_str(&text).map_err(depthforge::Error::from)?;
    let mut out = vec![None; net.len()];
    for row in rows {
        if row.layer == 0 || row.layer > net.len() {
            bail!(depthforge::Error::InvalidArgument(format!(
                "importance for unknown layer {}",
                row.layer
            )));
        }
        if out[row.layer - 1].replace(row.importance).is_some() {
            bail!(depthforge::Error::InvalidArgument(format!(
                "duplicate importance for layer {}",
                row.layer
            )));
        }
    }
    out.into_iter()
        .enumerate()
        .map(|(n, v)| {
            v.ok_or_else(|| {
                anyhow!(depthforge::Error::InvalidArgument(format!(
                    "no importance for layer {}",
                    n + 1
                )))
            })
        })
        .collect()
}

fn load_problem(args: &SolveArgs) -> Result<Problem> {
    let net = load_net(&args.net)?;
    let provider = require_provider(&args.source)?;
    let latency = layer_latencies(&net, provider.as_ref())?;
    let original_ms = latency.iter().sum();
    let inputs = match args.mode {
        Mode::Merge => {
            let raw = read_importance(&args.importance)
                .with_context(|| format!("reading importance {}", args.importance.display()))?;
            Inputs::Merge(CostTables::build(&net, provider.as_ref(), &raw)?)
        }
        Mode::LayerOnly => Inputs::LayerOnly {
            importance: read_layer_importance(&args.importance, &net)?,
            latency,
        },
    };
    Ok(Problem {
        net,
        original_ms,
        inputs,
    })
}

fn budget_ms(args: &BudgetArgs, original_ms: f64) -> Result<f64> {
    match (args.budget_ms, args.budget_pct) {
        (Some(ms), _) => Ok(ms),
        (None, Some(pct)) => Ok(original_ms * pct / 100.0),
        (None, None) => bail!(depthforge::Error::InvalidArgument("a budget is required".into())),
    }
}

fn budget_spec(t0_ms: f64, args: &SolveArgs) -> Result<BudgetSpec> {
    Ok(BudgetSpec::new(t0_ms, args.disc, sense(args.sense))?)
}

impl Problem {
    fn solve(&self, budget: &BudgetSpec) -> depthforge::Result<MergePlan> {
        match &self.inputs {
            Inputs::Merge(tables) => planner::solve(tables, budget, &self.net),
            Inputs::LayerOnly { importance, latency } => {
                planner::solve_layer_only(importance, latency, budget, &self.net)
            }
        }
    }

    fn validate(&self, plan: &MergePlan, budget: &BudgetSpec) -> planner::ValidationReport {
        match &self.inputs {
            Inputs::Merge(tables) => validate_plan(plan, tables, budget, &self.net),
            Inputs::LayerOnly { importance, latency } => {
                validate_layer_only_plan(plan, importance, latency, budget, &self.net)
            }
        }
    }

    /// Latency in milliseconds of the network after applying `plan`.
    fn plan_latency_ms(&self, plan: &MergePlan) -> f64 {
        match &self.inputs {
            Inputs::Merge(tables) => plan.segments.iter().filter_map(|s| tables.latency.get(&s.key())).sum(),
            Inputs::LayerOnly { latency, .. } => plan.kept_convs.iter().map(|&l| latency[l - 1]).sum(),
        }
    }
}

fn write_output(out: Option<&PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

#[derive(Serialize)]
struct SegmentSizes {
    i: usize,
    j: usize,
    sizes: Vec<usize>,
    variants: Vec<Variant>,
}

#[derive(Serialize)]
struct Variant {
    k: usize,
    depthwise: bool,
}

#[derive(Serialize)]
struct KernelSizeReport {
    network: String,
    layers: usize,
    k0: usize,
    keys: usize,
    segments: Vec<SegmentSizes>,
}

pub fn gen_tables(args: &GenTablesArgs) -> Result<bool> {
    let net = load_net(&args.net)?;
    let mut report = KernelSizeReport {
        network: net.name().to_string(),
        layers: net.len(),
        k0: net.kernel_sum(),
        keys: 0,
        segments: Vec::new(),
    };
    let mut keys = Vec::new();
    for (i, j) in net.admissible_segments() {
        let variants = enumerate_variants(i, j, &net)?;
        let sizes: BTreeSet<usize> = variants.iter().map(|v| v.0).collect();
        keys.extend(variants.iter().map(|&(k, dw)| TableKey::new(i, j, k, dw)));
        report.segments.push(SegmentSizes {
            i,
            j,
            sizes: sizes.into_iter().collect(),
            variants: variants
                .into_iter()
                .map(|(k, depthwise)| Variant { k, depthwise })
                .collect(),
        });
    }
    report.keys = keys.len();

    let measured: Option<BTreeMap<TableKey, f64>> = match provider(&args.source)? {
        Some(p) => Some(build_latency_table(&net, p.as_ref())?),
        None => None,
    };
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let csv_path = args.out.join("latency.csv");
    let file = fs::File::create(&csv_path).with_context(|| format!("writing {}", csv_path.display()))?;
    write_latency_csv(
        std::io::BufWriter::new(file),
        keys.iter().map(|k| (k, measured.as_ref().map(|m| m[k]))),
    )?;
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    fs::write(args.out.join("kernel_sizes.json"), text)?;
    println!(
        "{}",
        serde_json::json!({
            "keys": report.keys,
            "segments": report.segments.len(),
            "k0": report.k0,
            "filled": measured.is_some(),
        })
    );
    Ok(true)
}

#[derive(Serialize)]
struct ReplacedLayer {
    index: usize,
    kept: bool,
    activation_after: bool,
    segment: (usize, usize),
}

#[derive(Serialize)]
struct ReplacedSegment {
    start: usize,
    end: usize,
    kernel_size: usize,
    depthwise: bool,
    kept_convs: Vec<usize>,
}

/// The network to fine-tune before the final merge: which convolutions are
/// replaced by the identity and which activations are removed.
#[derive(Serialize)]
struct ReplacedNetwork {
    network: String,
    mode: PlanMode,
    layers: Vec<ReplacedLayer>,
    segments: Vec<ReplacedSegment>,
}

fn replaced_network(net: &NetworkDescriptor, plan: &MergePlan) -> ReplacedNetwork {
    let kept: BTreeSet<usize> = plan.kept_convs.iter().copied().collect();
    let acts: BTreeSet<usize> = plan.kept_activations.iter().copied().collect();
    let layers = net
        .layers()
        .iter()
        .map(|layer| {
            let l = layer.index;
            let seg = plan.segments.iter().find(|s| s.start < l && l <= s.end);
            ReplacedLayer {
                index: l,
                kept: kept.contains(&l),
                activation_after: acts.contains(&l),
                segment: seg.map_or((l - 1, l), |s| (s.start, s.end)),
            }
        })
        .collect();
    let segments = plan
        .segments
        .iter()
        .map(|s| ReplacedSegment {
            start: s.start,
            end: s.end,
            kernel_size: s.kernel_size,
            depthwise: s.depthwise,
            kept_convs: kept.range(s.start + 1..=s.end).copied().collect(),
        })
        .collect();
    ReplacedNetwork {
        network: net.name().to_string(),
        mode: plan.mode,
        layers,
        segments,
    }
}

pub fn plan(args: &PlanArgs) -> Result<bool> {
    let problem = load_problem(&args.solve)?;
    let budget = budget_spec(budget_ms(&args.budget, problem.original_ms)?, &args.solve)?;
    let plan = problem.solve(&budget)?;
    write_output(args.out.as_ref(), &plan.to_json())?;
    if let Some(path) = &args.replaced {
        let mut text = serde_json::to_string_pretty(&replaced_network(&problem.net, &plan))?;
        text.push('\n');
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(true)
}

fn read_plan(path: &Path) -> Result<MergePlan> {
    let text = fs::read_to_string(path).with_context(|| format!("reading plan {}", path.display()))?;
    Ok(MergePlan::from_json(&text)?)
}

/// Layer kernels from `dir`, with any batch-norm sidecar folded in.
fn read_weights(dir: &Path, net: &NetworkDescriptor) -> Result<Vec<KernelTensor>> {
    (1..=net.len())
        .map(|l| {
            let stem = dir.join(format!("layer_{l}"));
            let kernel = read_kernel(&stem).with_context(|| format!("reading kernel {}", stem.display()))?;
            let bn = dir.join(format!("layer_{l}.bn.json"));
            Ok(if bn.exists() {
                fold_batchnorm(&kernel, &read_batchnorm(&bn)?)?
            } else {
                kernel
            })
        })
        .collect()
}

fn segment_stem(dir: &Path, start: usize, end: usize) -> PathBuf {
    dir.join(format!("segment_{start}_{end}"))
}

pub fn merge(args: &MergeArgs) -> Result<bool> {
    let net = load_net(&args.net)?;
    let plan = read_plan(&args.plan)?;
    let kernels = read_weights(&args.weights, &net)?;
    let merged = merge_plan(&net, &plan, &kernels)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let mut summary = Vec::new();
    for (seg, kernel) in plan.segments.iter().zip(&merged) {
        write_kernel(segment_stem(&args.out, seg.start, seg.end), kernel)?;
        summary.push(serde_json::json!({
            "start": seg.start,
            "end": seg.end,
            "kernel_size": kernel.kernel_size(),
            "stride": kernel.stride(),
            "groups": kernel.groups(),
        }));
    }
    println!("{}", serde_json::Value::Array(summary));
    Ok(true)
}

#[derive(Serialize)]
struct Equivalence {
    start: usize,
    end: usize,
    relative_error: f64,
    passed: bool,
}

#[derive(Serialize)]
struct OracleCheck {
    objective: Option<f64>,
    explored: u64,
    matches: bool,
}

#[derive(Serialize)]
struct VerifyReport {
    passed: bool,
    violations: Vec<Violation>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    equivalence: Vec<Equivalence>,
    #[serde(skip_serializing_if = "Option::is_none")]
    oracle: Option<OracleCheck>,
}

fn check_equivalence(
    net: &NetworkDescriptor,
    plan: &MergePlan,
    weights: &Path,
    merged_dir: Option<&Path>,
    seed: u64,
) -> Result<Vec<Equivalence>> {
    let kernels = read_weights(weights, net)?;
    let merged = match merged_dir {
        Some(dir) => plan
            .segments
            .iter()
            .map(|s| {
                let stem = segment_stem(dir, s.start, s.end);
                read_kernel(&stem).with_context(|| format!("reading merged kernel {}", stem.display()))
            })
            .collect::<Result<Vec<_>>>()?,
        None => merge_plan(net, plan, &kernels)?,
    };
    let keep: BTreeSet<usize> = plan.kept_convs.iter().copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (seg, kernel) in plan.segments.iter().zip(&merged) {
        let first = net.layer(seg.start + 1);
        let hw = first.in_shape.map_or(8, |s| s.height().min(s.width())).clamp(1, 10);
        let x = random_input(&mut rng, first.in_channels, hw, hw);
        let padded = pad_input(&x, kernel.kernel_size());
        let reference = evaluate_sequential(net, seg.start, seg.end, &keep, &kernels, &padded)?;
        let error =
            if kernel.in_channels() != first.in_channels || kernel.out_channels() != net.layer(seg.end).out_channels {
                f64::INFINITY
            } else {
                let actual = depthforge::kernel::conv_reference(&padded, kernel, 0)?;
                relative_error(&actual, &reference)
            };
        out.push(Equivalence {
            start: seg.start,
            end: seg.end,
            relative_error: error,
            passed: error <= EQUIVALENCE_TOLERANCE,
        });
    }
    Ok(out)
}

pub fn verify(args: &VerifyArgs) -> Result<bool> {
    let problem = load_problem(&args.solve)?;
    let budget = budget_spec(budget_ms(&args.budget, problem.original_ms)?, &args.solve)?;
    let plan = read_plan(&args.plan)?;
    let validation = problem.validate(&plan, &budget);

    // Kernels are only merged for plans whose structure is sound.
    let equivalence = match &args.weights {
        Some(dir) if validation.passed => {
            check_equivalence(&problem.net, &plan, dir, args.merged.as_deref(), args.seed)?
        }
        _ => Vec::new(),
    };

    let oracle = if args.oracle {
        let result = match &problem.inputs {
            Inputs::Merge(tables) => {
                let r = brute_force_plan(tables, &budget, &problem.net)?;
                (r.objective, r.explored)
            }
            Inputs::LayerOnly { importance, latency } => {
                let costs: Vec<u64> = latency.iter().map(|&t| budget.units(t)).collect();
                let forced: Vec<bool> = (1..=problem.net.len())
                    .map(|l| !problem.net.is_substitutable(l))
                    .collect();
                let r = brute_force_knapsack(importance, &costs, &forced, budget.capacity())?;
                (r.objective, r.explored)
            }
        };
        Some(OracleCheck {
            objective: result.0,
            explored: result.1,
            matches: result.0 == Some(plan.objective),
        })
    } else {
        None
    };

    let report = VerifyReport {
        passed: validation.passed && equivalence.iter().all(|e| e.passed) && oracle.as_ref().is_none_or(|o| o.matches),
        violations: validation.violations,
        equivalence,
        oracle,
    };
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    std::io::stdout().write_all(text.as_bytes())?;
    for v in &report.violations {
        eprintln!("violation: {v}");
    }
    Ok(report.passed)
}

#[derive(Serialize)]
struct SweepRow {
    budget_ms: f64,
    budget_units: u64,
    status: &'static str,
    objective: Option<f64>,
    latency_units: Option<u64>,
    latency_ms: Option<f64>,
    pareto: bool,
    kept_activations: String,
    kept_convs: String,
}

fn join(items: &[usize]) -> String {
    items.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

pub fn sweep(args: &SweepArgs) -> Result<bool> {
    let problem = load_problem(&args.solve)?;
    let budgets: Vec<f64> = if !args.budgets_ms.is_empty() {
        args.budgets_ms.clone()
    } else if !args.budgets_pct.is_empty() {
        args.budgets_pct
            .iter()
            .map(|p| problem.original_ms * p / 100.0)
            .collect()
    } else {
        bail!(depthforge::Error::InvalidArgument(
            "one of --budgets-ms or --budgets-pct is required".into()
        ));
    };
    let specs = budgets
        .iter()
        .map(|&t0| budget_spec(t0, &args.solve))
        .collect::<Result<Vec<_>>>()?;

    let solved: Vec<depthforge::Result<MergePlan>> = specs.par_iter().map(|b| problem.solve(b)).collect();
    let mut rows = Vec::with_capacity(specs.len());
    for (budget, result) in specs.iter().zip(solved) {
        let row = match result {
            Ok(plan) => SweepRow {
                budget_ms: budget.t0_ms,
                budget_units: budget.levels,
                status: "ok",
                objective: Some(plan.objective),
                latency_units: Some(plan.latency_units),
                latency_ms: Some(problem.plan_latency_ms(&plan)),
                pareto: false,
                kept_activations: join(&plan.kept_activations),
                kept_convs: join(&plan.kept_convs),
            },
            Err(depthforge::Error::InfeasibleBudget { .. } | depthforge::Error::NoPlan) => SweepRow {
                budget_ms: budget.t0_ms,
                budget_units: budget.levels,
                status: "infeasible",
                objective: None,
                latency_units: None,
                latency_ms: None,
                pareto: false,
                kept_activations: String::new(),
                kept_convs: String::new(),
            },
            Err(e) => return Err(e.into()),
        };
        rows.push(row);
    }
    // A plan is on the front when no other plan is at least as fast and
    // strictly more important, or strictly faster and at least as important.
    let points: Vec<Option<(f64, f64)>> = rows.iter().map(|r| r.latency_ms.zip(r.objective)).collect();
    for (n, row) in rows.iter_mut().enumerate() {
        let Some((t, v)) = points[n] else { continue };
        row.pareto = !points
            .iter()
            .flatten()
            .any(|&(t2, v2)| (t2 <= t && v2 > v) || (t2 < t && v2 >= v));
    }

    let mut wtr = csv::Writer::from_writer(Vec::new());
    for row in &rows {
        wtr.serialize(row)?;
    }
    let bytes = wtr.into_inner().map_err(|e| anyhow!(e.to_string()))?;
    write_output(args.out.as_ref(), &String::from_utf8(bytes)?)?;
    Ok(true)
}
