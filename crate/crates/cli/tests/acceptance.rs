//! Acceptance checks. Runs every criterion, prints one PASS/FAIL line for
//! each, and exits non-zero if any failed.
//!
//! `cargo test --release -p routelab-cli --test acceptance`

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use routelab::analysis::{all_layer_drop_log10, all_layer_drop_prob, convergence_rate, geometric_stages, StageSpec};
use routelab::diffusion::train::{overall_loss, MaskedBatch};
use routelab::diffusion::{
    generate_split, grad_check, EcRouting, GradCheckConfig, Model, ModelConfig, RoutingConfig, TrainConfig, Trainer,
};
use routelab::routing::demo_scores;
use routelab::scheduler::{expected_k, standard_schedules, DEFAULT_SIGMA, REPORT_RESOLUTION};
use routelab::sim::{
    compare_policies, reference_arch, reference_policies, reference_workload, ClusterConfig, StepCostModel,
    REFERENCE_TOKENS_PER_STEP,
};
use routelab::trace::N_BINS;
use routelab::{
    route_ec, route_tc, CapacitySchedule, EcConfig, LossRecord, LossTrace, ScoreMatrix, SchedulerKind, TcConfig,
};
use tempfile::TempDir;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// 1 ---------------------------------------------------------------------------

fn demo_loads() -> Outcome {
    let s = demo_scores();
    let tc = route_tc(&s, &TcConfig::dropless(1), None).map_err(err)?;
    let ec = route_ec(&s, &EcConfig { capacity: 2 }).map_err(err)?;
    // Oracle: per-token argmax and per-expert top-2, straight from the matrix.
    let mut tc_oracle = vec![0; 3];
    for t in 0..6 {
        let best = (0..3).fold(0, |b, e| if s.get(t, e) > s.get(t, b) { e } else { b });
        tc_oracle[best] += 1;
    }
    check(tc.per_expert_load() == [1, 4, 1] && tc_oracle == [1, 4, 1], || {
        format!("TC loads {:?}, argmax oracle {tc_oracle:?}", tc.per_expert_load())
    })?;
    check(ec.per_expert_load() == [2, 2, 2], || format!("EC loads {:?}", ec.per_expert_load()))?;
    Ok("TC top-1 loads 1/4/1, EC c=2 loads 2/2/2".into())
}

// 2 ---------------------------------------------------------------------------

fn ec_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n_instances = 10_000;
    for i in 0..n_instances {
        let n = rng.random_range(1..=48);
        let e = rng.random_range(1..=12);
        let c = rng.random_range(1..=n);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..e).map(|_| rng.random_range(-3.0..3.0)).collect())
            .collect();
        let s = ScoreMatrix::from_rows(&rows).map_err(err)?;
        let a = route_ec(&s, &EcConfig { capacity: c }).map_err(err)?;
        check(a.per_expert_load().iter().all(|&l| l == c), || {
            format!("instance {i} (N={n}, E={e}, c={c}): loads {:?}", a.per_expert_load())
        })?;
        check(a.total_pairs() == e * c, || format!("instance {i}: {} pairs, want {}", a.total_pairs(), e * c))?;
        // Each expert holds exactly its c highest-scoring tokens (lowest index on ties).
        for x in 0..e {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&p, &q| rows[q][x].total_cmp(&rows[p][x]).then(p.cmp(&q)));
            let want: BTreeSet<usize> = order[..c].iter().copied().collect();
            let got: BTreeSet<usize> = a.tokens_for_expert(x).into_iter().map(|(t, _)| t).collect();
            check(want == got, || format!("instance {i} expert {x}: {got:?} vs {want:?}"))?;
        }
    }
    Ok(format!("{n_instances} instances, every load equals c and pairs equal E*c"))
}

// 3 ---------------------------------------------------------------------------

/// Target expected top-k per schedule for k in [8, 32], sigma 0.22.
const TARGET_EXPECTED_K: [(SchedulerKind, f64); 7] = [
    (SchedulerKind::Static, 20.00),
    (SchedulerKind::Linear, 20.00),
    (SchedulerKind::LinearReverse, 20.00),
    (SchedulerKind::Cosine, 20.00),
    (SchedulerKind::CosineReverse, 20.00),
    (SchedulerKind::Gaussian, 20.02),
    (SchedulerKind::GaussianReverse, 19.98),
];

fn schedule_table() -> Outcome {
    let schedules = standard_schedules(8.0, 32.0, DEFAULT_SIGMA).map_err(err)?;
    let mut misses = Vec::new();
    let mut got_all = Vec::new();
    for (kind, want) in TARGET_EXPECTED_K {
        let s = schedules.iter().find(|s| s.kind == kind).ok_or(format!("no {kind} schedule"))?;
        let got = expected_k(s, REPORT_RESOLUTION).map_err(err)?;
        got_all.push(format!("{}={got:.6}", kind.name()));
        if (got - want).abs() > 0.005 {
            misses.push(format!("{} {got:.6} vs {want:.2} (off by {:.2e})", kind.name(), (got - want).abs()));
        }
    }
    check(misses.is_empty(), || format!("outside +-0.005: {}", misses.join("; ")))?;
    Ok(got_all.join(" "))
}

// 4 ---------------------------------------------------------------------------

fn trace_from(f: impl Fn(u64) -> f64, steps: impl Iterator<Item = u64>) -> LossTrace {
    LossTrace::new(
        steps
            .map(|t| LossRecord {
                step: t,
                bin: 0,
                mean_loss: f(t),
                token_count: 1,
                realized_k: 1.0,
                realized_pairs: 1,
            })
            .collect(),
    )
    .unwrap()
}

/// Independent OLS of ln(loss) on step.
fn ols_rate(points: &[(u64, f64)]) -> f64 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0 as f64).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1.ln()).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 as f64 - mx) * (p.1.ln() - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 as f64 - mx).powi(2)).sum();
    -sxy / sxx
}

fn estimator_oracle() -> Outcome {
    let stages = StageSpec::new(vec![(0, 2000)]).map_err(err)?;
    let mut worst_exact: f64 = 0.0;
    for (a, eta) in [(2.0, 1e-3), (0.5, 2e-3), (9.0, 1e-4)] {
        let trace = trace_from(|t| a * (-eta * t as f64).exp(), (0..200).map(|i| i * 10));
        let got = convergence_rate(&trace, &stages).map_err(err)?.eta[0][0].ok_or("missing cell")?;
        worst_exact = worst_exact.max(((got - eta) / eta).abs());
    }
    check(worst_exact < 1e-12, || format!("noiseless relative error {worst_exact:e}"))?;

    let eta = 1e-3;
    let mut worst_noisy: f64 = 0.0;
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise: Vec<f64> = (0..200).map(|_| rng.random_range(-0.01..0.01)).collect();
        let trace = trace_from(|t| 2.0 * (-eta * t as f64).exp() * (1.0 + noise[(t / 10) as usize]), (0..200).map(|i| i * 10));
        let got = convergence_rate(&trace, &stages).map_err(err)?.eta[0][0].ok_or("missing cell")?;
        let oracle = ols_rate(&trace.series(0));
        check(((got - oracle) / oracle).abs() < 1e-9, || format!("seed {seed}: estimator {got} vs OLS {oracle}"))?;
        worst_noisy = worst_noisy.max(((got - eta) / eta).abs());
    }
    check(worst_noisy < 0.05, || format!("noisy worst relative error {worst_noisy:.4}"))?;
    Ok(format!("noiseless max rel err {worst_exact:.1e}; 1% noise worst {:.2}% over 100 seeds", worst_noisy * 100.0))
}

// 5 ---------------------------------------------------------------------------

fn gradient_check() -> Outcome {
    let (corpus, _) = generate_split(5, 8, 0, 64, 64).map_err(err)?;
    let seqs: Vec<&[usize]> = corpus.sequences.iter().take(4).map(Vec::as_slice).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let batch = MaskedBatch::from_counts(&seqs, &[6, 22, 40, 60], 64, &mut rng).map_err(err)?;
    let schedule = CapacitySchedule::new(SchedulerKind::LinearReverse, 1.0, 4.0).map_err(err)?;
    let mut parts = Vec::new();
    for (name, routing) in [
        ("tc", RoutingConfig::TokenChoice(TcConfig::dropless(2))),
        ("ec", RoutingConfig::ExpertChoice(EcRouting::fixed(2.0))),
        ("ec+schedule", RoutingConfig::ExpertChoice(EcRouting::scheduled(schedule))),
    ] {
        let model = Model::new(ModelConfig { routing, ..ModelConfig::default() }, 11).map_err(err)?;
        let report = grad_check(&model, &batch, &GradCheckConfig::default()).map_err(err)?;
        check(report.n_checked >= 200, || format!("{name}: only {} coordinates checked", report.n_checked))?;
        check(report.max_rel_error < 1e-4, || format!("{name}: max relative error {:e}", report.max_rel_error))?;
        parts.push(format!("{name} {} coords max {:.1e}", report.n_checked, report.max_rel_error));
    }
    Ok(parts.join("; "))
}

// 6 ---------------------------------------------------------------------------

fn simulator_ordering() -> Outcome {
    let (e, g, k) = (64, 8, 8);
    let cfs = [1.0, 1.25, 1.5];
    let report = compare_policies(
        &reference_policies(k, &cfs, true),
        &reference_workload(50, 0),
        &ClusterConfig::contiguous(e, g).map_err(err)?,
        &StepCostModel::default(),
        &reference_arch(REFERENCE_TOKENS_PER_STEP, e, k as f64),
    )
    .map_err(err)?;
    let find = |tag: &str| report.rows.iter().find(|r| r.policy_tag == tag).ok_or(format!("no {tag} row"));
    let ec = find("ec")?;
    let best = report.rows.iter().map(|r| r.throughput_tflops).fold(f64::NEG_INFINITY, f64::max);
    check(ec.throughput_tflops >= best, || format!("EC {} below best {best}", ec.throughput_tflops))?;
    let bounded: Vec<f64> = cfs
        .iter()
        .map(|cf| find(&format!("tc_cf{cf}")).map(|r| r.throughput_tflops))
        .collect::<Result<_, _>>()?;
    check(bounded.windows(2).all(|w| w[1] <= w[0]), || format!("CF throughputs {bounded:?}"))?;
    check(ec.per_device_load_std == 0.0, || format!("EC device std {}", ec.per_device_load_std))?;
    let order: Vec<&str> = report.rows.iter().map(|r| r.policy_tag.as_str()).collect();
    Ok(format!("ranking {}; EC device std 0", order.join(" > ")))
}

// 7 ---------------------------------------------------------------------------

fn matched_flops() -> Outcome {
    let (corpus, _) = generate_split(7, 2048, 0, 64, 64).map_err(err)?;
    let model_cfg = |routing| ModelConfig { n_experts: 16, routing, ..ModelConfig::default() };
    let schedule = CapacitySchedule::new(SchedulerKind::LinearReverse, 2.0, 14.0)
        .and_then(|s| s.with_static_k(8.0))
        .map_err(err)?;
    let mut pairs = Vec::new();
    for routing in [
        RoutingConfig::ExpertChoice(EcRouting::fixed(8.0)),
        RoutingConfig::ExpertChoice(EcRouting::scheduled(schedule)),
    ] {
        let mut t = Trainer::new(Model::new(model_cfg(routing), 0).map_err(err)?, TrainConfig::default()).map_err(err)?;
        t.epoch(&corpus).map_err(err)?;
        pairs.push(t.total_pairs as f64);
    }
    let (st, dy) = (pairs[0], pairs[1]);
    // Static EC: c = round(8 * 64 / 16) = 32 tokens per expert per sequence.
    let layers = ModelConfig::default().n_layers as f64;
    let want_static = 2048.0 * 16.0 * 32.0 * layers;
    check(st == want_static, || format!("static pairs {st}, expected {want_static}"))?;
    let rel = (dy - st) / st;
    check(rel.abs() < 0.02, || format!("static {st} dynamic {dy} ({:+.2}%)", rel * 100.0))?;
    Ok(format!("one epoch: static {st} pairs, dynamic {dy} ({:+.2}%)", rel * 100.0))
}

// 8 ---------------------------------------------------------------------------

fn per_bin_monotonicity() -> Outcome {
    let (corpus, eval) = generate_split(1, 2048, 256, 64, 64).map_err(err)?;
    let routing = RoutingConfig::ExpertChoice(EcRouting::fixed(2.0));
    let mut t = Trainer::new(Model::new(ModelConfig { routing, ..ModelConfig::default() }, 0).map_err(err)?, TrainConfig::default())
        .map_err(err)?;
    let trace = t.run(&corpus, &eval, 2000).map_err(err)?;
    let report = convergence_rate(&trace, &geometric_stages(250, 2000).map_err(err)?).map_err(err)?;
    let last = report.stages.len() - 1;
    let etas: Vec<f64> = (0..N_BINS)
        .map(|b| report.eta[b][last].ok_or(format!("bin {b} final stage missing")))
        .collect::<Result<_, _>>()?;
    let shown = etas.iter().map(|x| format!("{x:.2e}")).collect::<Vec<_>>().join(", ");
    check(etas.windows(2).all(|w| w[1] <= w[0]), || format!("final-stage eta by bin [{shown}]"))?;
    let (a, b) = report.stages.windows()[last];
    Ok(format!("final stage {a}-{b} eta by bin [{shown}]"))
}

// 9 ---------------------------------------------------------------------------

fn final_loss(trace: &LossTrace) -> f64 {
    let last = trace.records.iter().map(|r| r.step).max().unwrap_or(0);
    let recs: Vec<LossRecord> = trace.records.iter().filter(|r| r.step == last).cloned().collect();
    overall_loss(&recs)
}

fn retrofit_contract() -> Outcome {
    let (corpus, eval) = generate_split(1, 2048, 256, 64, 64).map_err(err)?;
    let mut tc = Trainer::new(Model::new(ModelConfig::default(), 0).map_err(err)?, TrainConfig::default()).map_err(err)?;
    tc.run(&corpus, &eval, 500).map_err(err)?;
    let mut ec = tc.clone();
    let before = ec.model.checksum();
    ec.model = ec.model.retrofit_router(None).map_err(err)?;
    let after = ec.model.checksum();
    check(before == after, || format!("checksum {before} -> {after}"))?;
    check(matches!(ec.model.config().routing, RoutingConfig::ExpertChoice(_)), || "router not swapped".into())?;
    let post = final_loss(&ec.run(&corpus, &eval, 0).map_err(err)?);
    check(post.is_finite(), || format!("post-retrofit loss {post}"))?;
    let ec_loss = final_loss(&ec.run(&corpus, &eval, 500).map_err(err)?);
    let tc_loss = final_loss(&tc.run(&corpus, &eval, 500).map_err(err)?);
    check(ec_loss <= tc_loss, || format!("EC finetuned {ec_loss:.4} > TC baseline {tc_loss:.4}"))?;
    Ok(format!("checksum kept; post-retrofit {post:.4}; +500 steps EC {ec_loss:.4} vs TC {tc_loss:.4}"))
}

// 10 --------------------------------------------------------------------------

fn token_coverage() -> Outcome {
    let p = [0.01; 16];
    let log = all_layer_drop_log10(&p).map_err(err)?;
    check(log == -32.0, || format!("log10 {log}"))?;
    let prob = all_layer_drop_prob(&p).map_err(err)?;
    check(prob == 1e-32, || format!("probability {prob:e}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for i in 0..10_000 {
        let n = rng.random_range(1..=24);
        let mut p: Vec<f64> = (0..n).map(|_| rng.random_range(1e-6..1.0)).collect();
        let base = all_layer_drop_prob(&p).map_err(err)?;
        // Raising one layer's drop probability never lowers the product...
        let j = rng.random_range(0..n);
        p[j] = rng.random_range(p[j]..=1.0);
        let raised = all_layer_drop_prob(&p).map_err(err)?;
        check(raised >= base * (1.0 - 1e-12), || format!("case {i}: raised {raised:e} < {base:e}"))?;
        // ...and adding a layer never raises it.
        p.push(rng.random_range(0.0..=1.0));
        let deeper = all_layer_drop_prob(&p).map_err(err)?;
        check(deeper <= raised * (1.0 + 1e-12), || format!("case {i}: deeper {deeper:e} > {raised:e}"))?;
    }
    Ok("sixteen layers at 0.01 give exactly 1e-32; monotone over 10000 random cases".into())
}

// 11 --------------------------------------------------------------------------

const SMALL_RUN: &str = r#"
seed = 3
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
total_steps = 40
eval_interval = 10
eval_samples_per_bin = 8
batch_size = 4
[train.data]
n_train = 64
n_eval = 16
seq_len = 16
[retrofit]
finetune_steps = 20
baseline = true
[retrofit.data]
n_train = 64
n_eval = 16
seq_len = 16
"#;

fn cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_routelab")).args(args).output().map_err(err)?;
    check(out.status.success(), || format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr).trim()))
}

fn tree(root: &Path) -> Result<Vec<(PathBuf, Vec<u8>)>, String> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).map_err(err)? {
            let path = entry.map_err(err)?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let bytes = fs::read(&path).map_err(err)?;
                out.push((path.strip_prefix(root).unwrap().to_path_buf(), bytes));
            }
        }
    }
    out.sort();
    Ok(out)
}

fn determinism() -> Outcome {
    let dir = TempDir::new().map_err(err)?;
    let d = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    let cfg = d("run.toml");
    fs::write(&cfg, SMALL_RUN).map_err(err)?;
    let trace = d("train_a/trace.csv");
    let ckpt = d("train_a/checkpoint.json");
    let runs: Vec<(&str, Vec<&str>)> = vec![
        ("route", vec!["route", "--demo", "--policy", "ec", "--c", "2"]),
        ("route-random", vec!["route", "--random", "200,16", "--policy", "tc", "--k", "2", "--cf", "1.25"]),
        ("schedule-check", vec!["schedule-check"]),
        ("train", vec!["train"]),
        ("retrofit", vec!["retrofit", "--checkpoint", &ckpt, "--schedule", "linear_reverse", "--k-min", "1", "--k-max", "3"]),
        ("analyze", vec!["analyze", "--trace", &trace, "--trace", &trace, "--stages", "0:20,20:40"]),
        ("simulate", vec!["simulate", "--steps", "5"]),
    ];
    let mut names = Vec::new();
    for (name, args) in &runs {
        let mut trees = Vec::new();
        for rep in ["a", "b"] {
            let out = d(&format!("{}_{rep}", name.replace('-', "_")));
            let mut full = vec!["--config", cfg.as_str(), "--out", out.as_str()];
            full.extend(args.iter().copied());
            cli(&full)?;
            trees.push(tree(Path::new(&out))?);
        }
        check(!trees[0].is_empty(), || format!("{name}: no outputs"))?;
        let (a, b) = (&trees[0], &trees[1]);
        let names_a: Vec<_> = a.iter().map(|f| &f.0).collect();
        let names_b: Vec<_> = b.iter().map(|f| &f.0).collect();
        check(names_a == names_b, || format!("{name}: file sets differ"))?;
        for (fa, fb) in a.iter().zip(b) {
            check(fa.1 == fb.1, || format!("{name}: {} differs", fa.0.display()))?;
        }
        names.push(format!("{name} ({} files)", a.len()));
    }
    Ok(format!("byte-identical reruns: {}", names.join(", ")))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("6x3 demo loads", demo_loads),
        ("EC exactness", ec_exactness),
        ("expected-k table", schedule_table),
        ("convergence estimator", estimator_oracle),
        ("gradient check", gradient_check),
        ("simulator ordering", simulator_ordering),
        ("matched-FLOPs pairs", matched_flops),
        ("per-bin monotonicity", per_bin_monotonicity),
        ("retrofit contract", retrofit_contract),
        ("token coverage", token_coverage),
        ("CLI determinism", determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = (i + 1).to_string();
        if !filter.is_empty() && !filter.iter().any(|f| *f == id || name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = run();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {id:>2} {name} [{secs:.1}s]: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {id:>2} {name} [{secs:.1}s]: {detail}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
