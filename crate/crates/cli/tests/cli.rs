use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use routelab::scheduler::{flops_equivalence_report, standard_schedules};
use tempfile::TempDir;

fn routelab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_routelab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = routelab(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let mut rdr = csv::Reader::from_path(path).unwrap();
    rdr.records().map(|r| r.unwrap().iter().map(String::from).collect()).collect()
}

const TINY: &str = r#"
seed = 7
[train.model]
n_layers = 1
hidden_dim = 16
n_heads = 2
n_experts = 4
expert_ffn_dim = 8
shared_ffn_dim = 16
vocab_size = 16
max_seq_len = 16
[train.optim]
total_steps = 20
eval_interval = 5
eval_samples_per_bin = 8
batch_size = 4
[train.data]
n_train = 64
n_eval = 16
seq_len = 16
[retrofit.data]
n_train = 64
n_eval = 16
seq_len = 16
"#;

fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.toml");
    fs::write(&path, TINY).unwrap();
    path
}

fn assert_same_tree(a: &Path, b: &Path) {
    let mut names: Vec<PathBuf> = Vec::new();
    collect(a, a, &mut names);
    let mut other = Vec::new();
    collect(b, b, &mut other);
    names.sort();
    other.sort();
    assert_eq!(names, other);
    for n in names {
        assert_eq!(fs::read(a.join(&n)).unwrap(), fs::read(b.join(&n)).unwrap(), "{}", n.display());
    }
}

fn collect(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) {
    for e in fs::read_dir(dir).unwrap() {
        let path = e.unwrap().path();
        if path.is_dir() {
            collect(root, &path, out);
        } else {
            out.push(path.strip_prefix(root).unwrap().to_path_buf());
        }
    }
}

#[test]
fn version_names_format() {
    let v = ok(&["--version"]);
    assert!(v.contains(env!("CARGO_PKG_VERSION")) && v.contains("format 1"), "{v}");
}

#[test]
fn route_demo_loads() {
    let dir = TempDir::new().unwrap();
    let ec = dir.path().join("ec");
    ok(&["route", "--demo", "--policy", "ec", "--c", "2", "--out", p(&ec)]);
    let loads: Vec<String> = csv_rows(&ec.join("loads.csv")).into_iter().map(|r| r[1].clone()).collect();
    assert_eq!(loads, ["2", "2", "2"]);
    let record: serde_json::Value = serde_json::from_slice(&fs::read(ec.join("assignment.json")).unwrap()).unwrap();
    assert_eq!(record["loads"], serde_json::json!([2, 2, 2]));
    assert_eq!(record["pairs"].as_array().unwrap().len(), 6);

    let tc = dir.path().join("tc");
    ok(&["route", "--demo", "--policy", "tc", "--k", "1", "--out", p(&tc)]);
    let loads: Vec<String> = csv_rows(&tc.join("loads.csv")).into_iter().map(|r| r[1].clone()).collect();
    assert_eq!(loads, ["1", "4", "1"]);

    let rnd = dir.path().join("rnd");
    ok(&["route", "--random", "30,5", "--policy", "ec", "--c", "4", "--out", p(&rnd)]);
    let loads: Vec<String> = csv_rows(&rnd.join("loads.csv")).into_iter().map(|r| r[1].clone()).collect();
    assert_eq!(loads, ["4"; 5]);
    assert_eq!(routelab(&["route", "--random", "30", "--policy", "ec", "--c", "4", "--out", p(&rnd)]).status.code(), Some(2));
}

#[test]
fn route_usage_and_parse_errors() {
    let dir = TempDir::new().unwrap();
    let out = routelab(&["route", "--demo", "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    let out = routelab(&["route", "--demo", "--policy", "tc", "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--k"));

    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "0.1,0.9\n0.2,0.8\n0.3,zz\n").unwrap();
    let out = routelab(&["route", "--scores", p(&bad), "--policy", "tc", "--k", "1", "--out", p(dir.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn schedule_check_defaults_and_narrow_range() {
    let dir = TempDir::new().unwrap();
    ok(&["schedule-check", "--out", p(dir.path())]);
    let rows = csv_rows(&dir.path().join("flops_equivalence.csv"));
    let lib = flops_equivalence_report(&standard_schedules(8.0, 32.0, 0.22).unwrap(), 20.0).unwrap();
    assert_eq!(rows.len(), 7);
    for (row, want) in rows.iter().zip(&lib) {
        assert_eq!(row[0], want.kind.to_string());
        assert_eq!(row[2].parse::<f64>().unwrap(), want.expected_k);
    }
    for row in rows.iter().filter(|r| !r[0].starts_with("gaussian")) {
        assert_eq!(format!("{:.2}", row[2].parse::<f64>().unwrap()), "20.00", "{row:?}");
    }

    let narrow = dir.path().join("narrow");
    ok(&["schedule-check", "--k-min", "2", "--k-max", "14", "--out", p(&narrow)]);
    for row in csv_rows(&narrow.join("flops_equivalence.csv")) {
        assert!((row[2].parse::<f64>().unwrap() - 8.0).abs() <= 0.02, "{row:?}");
    }

    assert_eq!(routelab(&["schedule-check", "--kinds", "", "--out", p(dir.path())]).status.code(), Some(2));
    assert_eq!(routelab(&["schedule-check", "--kinds", "zigzag", "--out", p(dir.path())]).status.code(), Some(2));
}

#[test]
fn train_is_deterministic_and_resumable() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["--config", p(&cfg), "train", "--out", p(&a)]);
    ok(&["--config", p(&cfg), "train", "--out", p(&b)]);
    assert_same_tree(&a, &b);
    for f in ["trace.csv", "layer_drop.csv", "checkpoint.json", "summary.json", "manifest.json"] {
        assert!(a.join(f).exists(), "{f}");
    }

    // Re-running from the manifest reproduces the run.
    let m = dir.path().join("m");
    ok(&["--config", p(&a.join("manifest.json")), "train", "--out", p(&m)]);
    assert_same_tree(&a, &m);

    let half = dir.path().join("half");
    let rest = dir.path().join("rest");
    ok(&["--config", p(&cfg), "train", "--steps", "10", "--out", p(&half)]);
    ok(&["--config", p(&cfg), "train", "--resume", p(&half.join("checkpoint.json")), "--out", p(&rest)]);
    assert_eq!(fs::read(rest.join("checkpoint.json")).unwrap(), fs::read(a.join("checkpoint.json")).unwrap());
    let steps: Vec<u64> = csv_rows(&rest.join("trace.csv")).iter().map(|r| r[0].parse().unwrap()).collect();
    assert_eq!((steps[0], *steps.last().unwrap()), (10, 20));

    let other = dir.path().join("other");
    ok(&["--config", p(&cfg), "--seed", "8", "train", "--out", p(&other)]);
    assert_ne!(fs::read(other.join("trace.csv")).unwrap(), fs::read(a.join("trace.csv")).unwrap());
}

fn summary(dir: &Path, file: &str) -> serde_json::Value {
    serde_json::from_slice(&fs::read(dir.join(file)).unwrap()).unwrap()
}

/// Static EC k = 8 against linear-reverse k in [2, 14] with E = 16: same
/// seed, so the same mask ratios, and the realized pair totals agree.
#[test]
fn paired_static_and_dynamic_runs_match_pairs() {
    let dir = TempDir::new().unwrap();
    let base = r#"
[train.model]
n_layers = 1
hidden_dim = 16
n_heads = 2
n_experts = 16
expert_ffn_dim = 4
shared_ffn_dim = 16
vocab_size = 16
max_seq_len = 32
[train.optim]
total_steps = 128
batch_size = 16
eval_interval = 128
eval_samples_per_bin = 4
[train.data]
n_train = 2048
n_eval = 16
seq_len = 32
"#;
    let st = dir.path().join("static.toml");
    fs::write(&st, format!("{base}[train.model.routing]\npolicy = \"expert_choice\"\nk = 8.0\n")).unwrap();
    let dy = dir.path().join("dynamic.toml");
    fs::write(
        &dy,
        format!(
            "{base}[train.model.routing]\npolicy = \"expert_choice\"\nk = 8.0\n\
             schedule = {{ kind = \"linear_reverse\", k_min = 2.0, k_max = 14.0, k_static = 8.0 }}\n"
        ),
    )
    .unwrap();
    ok(&["--config", p(&st), "train", "--out", p(&dir.path().join("s"))]);
    ok(&["--config", p(&dy), "train", "--out", p(&dir.path().join("d"))]);
    let s = summary(&dir.path().join("s"), "summary.json")["total_pairs"].as_f64().unwrap();
    let d = summary(&dir.path().join("d"), "summary.json")["total_pairs"].as_f64().unwrap();
    assert!(((d - s) / s).abs() < 0.02, "static {s} dynamic {d}");
    assert_eq!(s, (128 * 16 * 16 * 16) as f64, "c = round(8 * 32 / 16) per expert");
}

#[test]
fn retrofit_contract() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny_config(dir.path());
    let tc = dir.path().join("tc");
    ok(&["--config", p(&cfg), "train", "--out", p(&tc)]);
    let ckpt = tc.join("checkpoint.json");

    let zero = dir.path().join("zero");
    ok(&["--config", p(&cfg), "retrofit", "--checkpoint", p(&ckpt), "--out", p(&zero)]);
    let r = summary(&zero, "retrofit.json");
    assert_eq!(r["checksum_before"], r["checksum_after"]);
    assert_eq!(r["checksum_before"], summary(&tc, "summary.json")["model_checksum"]);
    assert!(r["post_retrofit_loss"].as_f64().unwrap().is_finite());

    // An EC checkpoint cannot be retrofitted again.
    let out = routelab(&["--config", p(&cfg), "retrofit", "--checkpoint", p(&zero.join("checkpoint.json")), "--out", p(&dir.path().join("x"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("token-choice"));

    // Dynamic EC: realized k follows the mask ratio.
    let dynamic = dir.path().join("dyn");
    ok(&[
        "--config", p(&cfg), "retrofit", "--checkpoint", p(&ckpt), "--schedule", "linear_reverse", "--k-min", "1",
        "--k-max", "4", "--finetune-steps", "5", "--out", p(&dynamic),
    ]);
    let ks: Vec<f64> = csv_rows(&dynamic.join("trace.csv"))
        .iter()
        .filter(|r| r[0] == "20")
        .map(|r| r[4].parse().unwrap())
        .collect();
    assert_eq!(ks.len(), 4);
    assert!(ks.windows(2).all(|w| w[1] < w[0]), "{ks:?}");
}

#[test]
fn analyze_outputs() {
    let dir = TempDir::new().unwrap();
    let trace = dir.path().join("trace.csv");
    let mut text = String::from("step,bin,mean_loss,token_count,realized_k,realized_pairs\n");
    for t in (0..=1000).step_by(50) {
        for (bin, eta) in [0.004f64, 0.003, 0.002, 0.001].iter().enumerate() {
            text += &format!("{t},{bin},{},10,1,1\n", 3.0 * (-eta * t as f64).exp());
        }
    }
    fs::write(&trace, text).unwrap();
    let out = dir.path().join("an");
    ok(&["analyze", "--trace", p(&trace), "--trace", p(&trace), "--geometric", "250:1000", "--out", p(&out)]);
    let rows = csv_rows(&out.join("convergence.csv"));
    let eta0: Vec<f64> = rows.iter().filter(|r| r[0] == "0").map(|r| r[3].parse().unwrap()).collect();
    assert_eq!(eta0.len(), 2);
    assert!(eta0.iter().all(|e| ((e - 0.004) / 0.004).abs() < 1e-9), "{eta0:?}");
    for r in csv_rows(&out.join("ratio.csv")) {
        assert_eq!(r[3], "1");
    }
    assert!(out.join("plot/loss_bin3.csv").exists() && out.join("plot/eta_stage1.csv").exists());

    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "step,bin,mean_loss,token_count,realized_k,realized_pairs\n0,0,1.0,1,1,1\n5,0,nan?,1,1,1\n").unwrap();
    let res = routelab(&["analyze", "--trace", p(&bad), "--out", p(&dir.path().join("b"))]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("line 3"), "{}", String::from_utf8_lossy(&res.stderr));
    assert_eq!(routelab(&["analyze", "--out", p(&dir.path().join("c"))]).status.code(), Some(2));
}

#[test]
fn simulate_ordering_and_determinism() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["--seed", "3", "simulate", "--steps", "8", "--out", p(&a)]);
    ok(&["--seed", "3", "simulate", "--steps", "8", "--out", p(&b)]);
    assert_same_tree(&a, &b);
    let ord = summary(&a, "ordering.json");
    assert_eq!(ord["ec_first"], true);
    assert_eq!(ord["cf_monotone"], true);
    let rows = csv_rows(&a.join("sim.csv"));
    assert_eq!(rows[0][0], "ec");
    let tp = |tag: &str| rows.iter().find(|r| r[0] == tag).unwrap()[2].parse::<f64>().unwrap();
    assert!(tp("tc_cf1") >= tp("tc_cf1.25") && tp("tc_cf1.25") >= tp("tc_cf1.5"));
    assert_eq!(rows.iter().find(|r| r[0] == "ec").unwrap()[3], "0");

    let c = dir.path().join("c");
    ok(&["--config", p(&a.join("manifest.json")), "simulate", "--out", p(&c)]);
    assert_same_tree(&a, &c);
}
