use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use depthforge::fuse::{evaluate_sequential, pad_input, relative_error};
use depthforge::kernel::{conv_reference, fold_batchnorm, read_batchnorm, read_kernel, write_kernel};
use depthforge::oracle::brute_force_plan;
use depthforge::planner::validate_plan;
use depthforge::tables::{read_importance, read_latency_csv, TableProvider};
use depthforge::{BudgetSpec, ConstraintSense, CostTables, MergePlan, NetworkDescriptor};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_depthforge"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_env(args: &[&str], key: &str, value: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_depthforge"))
        .args(args)
        .env(key, value)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn f(name: &str) -> String {
    fixture(name).to_str().unwrap().to_string()
}

fn solve_args(extra: &[&str]) -> Vec<String> {
    let mut v: Vec<String> = vec![
        "--net".into(),
        f("six_layer_net.json"),
        "--latency".into(),
        f("latency.csv"),
        "--importance".into(),
        f("importance.json"),
    ];
    v.extend(extra.iter().map(|x| x.to_string()));
    v
}

fn run_solve(cmd: &str, extra: &[&str]) -> Output {
    let mut args = vec![cmd.to_string()];
    args.extend(solve_args(extra));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    run(&refs)
}

fn fixture_tables() -> (NetworkDescriptor, CostTables) {
    let net = NetworkDescriptor::load(fixture("six_layer_net.json")).unwrap();
    let provider = TableProvider::load(fixture("latency.csv")).unwrap();
    let raw = read_importance(fixture("importance.json")).unwrap();
    let tables = CostTables::build(&net, &provider, &raw).unwrap();
    (net, tables)
}

fn sixty_percent(net: &NetworkDescriptor) -> BudgetSpec {
    let latency = read_latency_csv(fixture("latency.csv")).unwrap();
    let original: f64 = net
        .layers()
        .iter()
        .map(|l| latency[&depthforge::TableKey::new(l.index - 1, l.index, l.kernel_size, l.is_depthwise())])
        .sum();
    BudgetSpec::new(original * 60.0 / 100.0, None, ConstraintSense::Strict).unwrap()
}

#[test]
fn plan_is_deterministic_and_matches_golden() {
    let first = run_solve("plan", &["--budget-pct", "60"]);
    let second = run_solve("plan", &["--budget-pct", "60"]);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    assert_eq!(first.stdout, second.stdout);
    let golden = std::fs::read(fixture("golden_plan_60.json")).unwrap();
    assert_eq!(first.stdout, golden);
}

#[test]
fn golden_plan_is_optimal() {
    let (net, tables) = fixture_tables();
    let budget = sixty_percent(&net);
    let plan = MergePlan::from_json(&std::fs::read_to_string(fixture("golden_plan_60.json")).unwrap()).unwrap();
    let report = validate_plan(&plan, &tables, &budget, &net);
    assert!(report.passed, "{:?}", report.violations);
    let oracle = brute_force_plan(&tables, &budget, &net).unwrap();
    assert_eq!(oracle.objective, Some(plan.objective));
    // the golden plan merges layers 2 and 3 into one 1x1 layer
    assert!(plan.segments.iter().any(|s| (s.start, s.end) == (1, 3)));
}

#[test]
fn analytic_and_table_sources_agree_on_keys() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "gen-tables",
        "--net",
        &f("six_layer_net.json"),
        "--analytic",
        &f("analytic.json"),
        "--out",
        s(dir.path()),
    ]);
    assert!(out.status.success());
    let filled = read_latency_csv(dir.path().join("latency.csv")).unwrap();
    let fixture_keys: Vec<_> = read_latency_csv(fixture("latency.csv")).unwrap().into_keys().collect();
    assert_eq!(filled.keys().copied().collect::<Vec<_>>(), fixture_keys);

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("kernel_sizes.json")).unwrap()).unwrap();
    assert_eq!(report["keys"], 24);
    assert_eq!(report["k0"], 16);
    let seg = report["segments"]
        .as_array()
        .unwrap()
        .iter()
        .find(|s| s["i"] == 3 && s["j"] == 6)
        .unwrap();
    assert_eq!(seg["sizes"], serde_json::json!([1, 3, 5, 7]));
}

#[test]
fn skeleton_has_empty_latencies() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["gen-tables", "--net", &f("six_layer_net.json"), "--out", s(dir.path())]);
    assert!(out.status.success());
    let text = std::fs::read_to_string(dir.path().join("latency.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("i,j,k,depthwise,latency_ms"));
    assert_eq!(lines.next(), Some("0,1,3,0,"));
    assert_eq!(text.lines().count(), 25);
}

#[test]
fn thread_cap_does_not_change_tables() {
    let outputs: Vec<String> = ["1", "4"]
        .iter()
        .map(|threads| {
            let dir = tempfile::tempdir().unwrap();
            let out = run_env(
                &[
                    "gen-tables",
                    "--net",
                    &f("six_layer_net.json"),
                    "--analytic",
                    &f("analytic.json"),
                    "--out",
                    s(dir.path()),
                ],
                "DEPTHFORGE_THREADS",
                threads,
            );
            assert!(out.status.success());
            std::fs::read_to_string(dir.path().join("latency.csv")).unwrap()
        })
        .collect();
    assert_eq!(outputs[0], outputs[1]);

    let out = run_env(
        &["gen-tables", "--net", "x", "--out", "y"],
        "DEPTHFORGE_THREADS",
        "zero",
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn tampered_plan_fails_verification() {
    let mut plan = MergePlan::from_json(&std::fs::read_to_string(fixture("golden_plan_60.json")).unwrap()).unwrap();
    // join (1, 3] and (3, 4] across the barrier after layer 3
    let pos = plan.segments.iter().position(|s| (s.start, s.end) == (1, 3)).unwrap();
    plan.segments[pos].end = 4;
    plan.segments.remove(pos + 1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tampered.json");
    std::fs::write(&path, plan.to_json()).unwrap();

    let out = run_solve("verify", &["--budget-pct", "60", "--plan", s(&path)]);
    assert_eq!(out.status.code(), Some(1));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["passed"], false);
    let violations = report["violations"].as_array().unwrap();
    assert!(violations
        .iter()
        .any(|v| v["violation"] == "barrier-crossed" && v["barrier"] == 3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("crosses the barrier at 3"));
}

#[test]
fn golden_plan_verifies_with_weights_and_oracle() {
    let out = run_solve(
        "verify",
        &[
            "--budget-pct",
            "60",
            "--plan",
            &f("golden_plan_60.json"),
            "--weights",
            &f("weights_six_layer"),
            "--oracle",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["oracle"]["matches"], true);
    let eq = report["equivalence"].as_array().unwrap();
    assert_eq!(eq.len(), 5);
    assert!(eq.iter().all(|e| e["relative_error"].as_f64().unwrap() <= 1e-5));
}

#[test]
fn corrupted_merged_blob_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let merged = dir.path().join("merged");
    let out = run(&[
        "merge",
        "--net",
        &f("six_layer_net.json"),
        "--plan",
        &f("golden_plan_60.json"),
        "--weights",
        &f("weights_six_layer"),
        "--out",
        s(&merged),
    ]);
    assert!(out.status.success());
    let stem = merged.join("segment_4_5");
    let kernel = read_kernel(&stem).unwrap();
    let (mut w, b, stride, groups) = kernel.into_parts();
    w[[0, 0, 1, 1]] += 0.5;
    write_kernel(&stem, &depthforge::KernelTensor::new(w, b, stride, groups).unwrap()).unwrap();

    let verify = |merged: &Path| {
        run_solve(
            "verify",
            &[
                "--budget-pct",
                "60",
                "--plan",
                &f("golden_plan_60.json"),
                "--weights",
                &f("weights_six_layer"),
                "--merged",
                s(merged),
            ],
        )
    };
    let out = verify(&merged);
    assert_eq!(out.status.code(), Some(1));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let bad: Vec<_> = report["equivalence"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|e| e["passed"] == false)
        .map(|e| (e["start"].as_u64().unwrap(), e["end"].as_u64().unwrap()))
        .collect();
    assert_eq!(bad, vec![(4, 5)]);
}

#[test]
fn merge_two_convs_into_five_by_five() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "merge",
        "--net",
        &f("two_conv_net.json"),
        "--plan",
        &f("two_conv_plan.json"),
        "--weights",
        &f("weights_two_conv"),
        "--out",
        s(dir.path()),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let merged = read_kernel(dir.path().join("segment_0_2")).unwrap();
    assert_eq!(merged.kernel_size(), 5);
    assert_eq!(merged.weights().dim(), (2, 2, 5, 5));

    let net = NetworkDescriptor::load(fixture("two_conv_net.json")).unwrap();
    let weights = fixture("weights_two_conv");
    let first = fold_batchnorm(
        &read_kernel(weights.join("layer_1")).unwrap(),
        &read_batchnorm(weights.join("layer_1.bn.json")).unwrap(),
    )
    .unwrap();
    let kernels = vec![first, read_kernel(weights.join("layer_2")).unwrap()];
    let x = pad_input(&depthforge::synth::random_input(&mut seeded_rng(), 2, 6, 6), 2);
    let reference = evaluate_sequential(&net, 0, 2, &BTreeSet::from([1, 2]), &kernels, &x).unwrap();
    let actual = conv_reference(&x, &merged, 0).unwrap();
    assert!(relative_error(&actual, &reference) <= 1e-12);
}

fn seeded_rng() -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(3)
}

#[test]
fn replaced_network_spec() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("replaced.json");
    let out = run_solve("plan", &["--budget-pct", "60", "--replaced", s(&spec)]);
    assert!(out.status.success());
    let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&spec).unwrap()).unwrap();
    let layers = doc["layers"].as_array().unwrap();
    assert_eq!(layers.len(), 6);
    assert_eq!(layers[1]["kept"], false);
    assert_eq!(layers[1]["activation_after"], false);
    assert_eq!(layers[1]["segment"], serde_json::json!([1, 3]));
    let seg = doc["segments"]
        .as_array()
        .unwrap()
        .iter()
        .find(|s| s["start"] == 1)
        .unwrap();
    assert_eq!(seg["kept_convs"], serde_json::json!([3]));
}

#[test]
fn layer_only_mode() {
    let args = [
        "--net",
        &f("six_layer_net.json"),
        "--latency",
        &f("latency.csv"),
        "--importance",
        &f("layer_importance.json"),
        "--mode",
        "layer-only",
        "--budget-pct",
        "60",
    ];
    let mut plan_args = vec!["plan"];
    plan_args.extend(args);
    let out = run(&plan_args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let plan = MergePlan::from_json(std::str::from_utf8(&out.stdout).unwrap()).unwrap();
    assert_eq!(plan.segments.len(), 6);
    assert!(plan.kept_convs.contains(&1));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("plan.json");
    std::fs::write(&path, &out.stdout).unwrap();
    let mut verify_args = vec!["verify", "--plan", s(&path), "--oracle"];
    verify_args.extend(args);
    let out = run(&verify_args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
}

#[test]
fn sweep_writes_pareto_csv() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sweep.csv");
    let out = run_solve("sweep", &["--budgets-pct", "5,40,60,100", "--out", s(&path)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mut rdr = csv::Reader::from_path(&path).unwrap();
    assert_eq!(
        rdr.headers().unwrap().iter().collect::<Vec<_>>(),
        [
            "budget_ms",
            "budget_units",
            "status",
            "objective",
            "latency_units",
            "latency_ms",
            "pareto",
            "kept_activations",
            "kept_convs"
        ]
    );
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 4);
    assert_eq!(&rows[0][2], "infeasible");
    let objectives: Vec<f64> = rows[1..].iter().map(|r| r[3].parse().unwrap()).collect();
    assert!(objectives.windows(2).all(|w| w[0] <= w[1]));

    let single = run_solve("plan", &["--budget-pct", "60"]);
    let plan = MergePlan::from_json(std::str::from_utf8(&single.stdout).unwrap()).unwrap();
    assert_eq!(rows[2][3].parse::<f64>().unwrap(), plan.objective);
}

#[test]
fn errors_are_json_documents() {
    let out = run_solve("plan", &["--budget-pct", "5"]);
    assert_eq!(out.status.code(), Some(2));
    let doc: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(doc["error"], "infeasible-budget");
    assert!(doc["message"].as_str().unwrap().contains("cheapest plan needs"));

    let out = run(&[
        "plan",
        "--net",
        "/nonexistent.json",
        "--analytic",
        &f("analytic.json"),
        "--importance",
        &f("importance.json"),
        "--budget-ms",
        "10",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let doc: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(doc["error"], "io");

    let out = run_solve("plan", &["--budget-ms=-1"]);
    let doc: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(doc["error"], "invalid-argument");
}
