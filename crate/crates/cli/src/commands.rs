use std::fmt;
use std::fs::File;

use anyhow::{bail, Context};
use routelab::analysis::{convergence_rate, eta_ratio, geometric_stages, ConvergenceReport, StageSpec};
use routelab::diffusion::checkpoint::Checkpoint;
use routelab::diffusion::train::overall_loss;
use routelab::diffusion::{generate_split, Corpus, Model, ModelConfig, Trainer};
use routelab::routing::{demo_scores, load_stats};
use routelab::scheduler::{flops_equivalence_report, CapacitySchedule};
use routelab::sim::{
    compare_policies, random_scores, reference_arch, reference_policies, ClusterConfig, ScoreDistribution,
    WorkloadSpec,
};
use routelab::trace::N_BINS;
use routelab::{route_ec, route_tc, EcConfig, LossRecord, LossTrace, ScoreMatrix, TcConfig};
use serde::Serialize;

use crate::config::{
    streams, sub_seed, AnalyzeSettings, DataSettings, RetrofitSettings, RouteSettings, ScheduleSettings,
    SimulateSettings, TrainSettings,
};
use crate::output::Output;

/// Bad or missing flags; exits with status 2.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

pub fn route(s: &RouteSettings, seed: u64, out: &mut Output) -> anyhow::Result<()> {
    let scores = if s.demo {
        demo_scores()
    } else if let Some(path) = &s.scores {
        let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
        ScoreMatrix::read_csv(file).with_context(|| format!("reading {}", path.display()))?
    } else if let Some((n, e)) = s.random {
        random_scores(n, e, sub_seed(seed, streams::SCORES))?
    } else {
        return Err(usage("route needs --demo, --scores FILE or --random TOKENS,EXPERTS"));
    };
    let assignment = match s.policy.as_deref() {
        Some("tc") => {
            let k = s.k.ok_or_else(|| usage("--policy tc needs --k"))?;
            let cfg = match s.cf {
                Some(cf) => TcConfig::bounded(k, cf),
                None => TcConfig::dropless(k),
            };
            route_tc(&scores, &cfg, None)?
        }
        Some("ec") => {
            let c = s.c.ok_or_else(|| usage("--policy ec needs --c"))?;
            route_ec(&scores, &EcConfig { capacity: c })?
        }
        Some(other) => return Err(usage(format!("unknown policy '{other}' (expected tc or ec)"))),
        None => return Err(usage("route needs --policy tc|ec")),
    };
    let stats = load_stats(&assignment, scores.n_tokens(), scores.n_experts())?;
    out.write_json("assignment.json", &assignment.to_record())?;
    out.write_csv("loads.csv", |w| {
        w.write_record(["expert", "load"])?;
        for (j, l) in stats.loads.iter().enumerate() {
            w.write_record([j.to_string(), l.to_string()])?;
        }
        Ok(())
    })?;
    out.write_csv("load_stats.csv", |w| {
        w.write_record(["policy", "n_tokens", "n_experts", "total_pairs", "drop_ratio", "max_over_mean", "load_std"])?;
        w.write_record([
            assignment.policy_tag().to_string(),
            scores.n_tokens().to_string(),
            scores.n_experts().to_string(),
            assignment.total_pairs().to_string(),
            stats.drop_ratio.to_string(),
            stats.max_over_mean.to_string(),
            stats.load_std.to_string(),
        ])?;
        Ok(())
    })?;
    let loads: Vec<String> = stats.loads.iter().map(usize::to_string).collect();
    println!("{}: loads ({}), dropped {}", assignment.policy_tag(), loads.join(","), assignment.dropped_tokens().len());
    Ok(())
}

pub fn schedule_check(s: &ScheduleSettings, out: &mut Output) -> anyhow::Result<()> {
    if s.kinds.is_empty() {
        return Err(usage("no scheduler kinds given"));
    }
    let baseline = s.baseline.unwrap_or(0.5 * (s.k_min + s.k_max));
    let schedules = s
        .kinds
        .iter()
        .map(|&kind| {
            CapacitySchedule::new(kind, s.k_min, s.k_max)?
                .with_sigma(s.sigma)?
                .with_static_k(baseline)
        })
        .collect::<routelab::Result<Vec<_>>>()?;
    let rows = flops_equivalence_report(&schedules, baseline)?;
    out.write_csv("flops_equivalence.csv", |w| {
        w.write_record(["kind", "expected_s", "expected_k", "delta", "flagged"])?;
        for r in &rows {
            w.write_record([
                r.kind.to_string(),
                r.expected_s.to_string(),
                r.expected_k.to_string(),
                r.delta.to_string(),
                r.flagged.to_string(),
            ])?;
        }
        Ok(())
    })?;
    println!("{:<18} {:>8} {:>8} {:>8}", "kind", "E[s]", "E[k]", "delta");
    for r in &rows {
        println!(
            "{:<18} {:>8.4} {:>8.2} {:>+8.3}{}",
            r.kind.to_string(),
            r.expected_s,
            r.expected_k,
            r.delta,
            if r.flagged { "  (flagged)" } else { "" }
        );
    }
    Ok(())
}

fn corpora(data: &DataSettings, model: &ModelConfig, seed: u64) -> anyhow::Result<(Corpus, Corpus)> {
    if data.seq_len > model.max_seq_len {
        bail!("seq_len {} exceeds max_seq_len {}", data.seq_len, model.max_seq_len);
    }
    Ok(generate_split(
        sub_seed(seed, streams::DATA),
        data.n_train,
        data.n_eval,
        data.seq_len,
        model.vocab_size,
    )?)
}

fn write_trace(out: &mut Output, name: &str, trace: &LossTrace) -> anyhow::Result<()> {
    let mut buf = Vec::new();
    trace.write_csv(&mut buf)?;
    out.write(name, &buf)
}

fn final_records(trace: &LossTrace) -> Vec<LossRecord> {
    let last = trace.records.last().map_or(0, |r| r.step);
    trace.records.iter().filter(|r| r.step == last).cloned().collect()
}

fn first_records(trace: &LossTrace) -> Vec<LossRecord> {
    let first = trace.records.first().map_or(0, |r| r.step);
    trace.records.iter().filter(|r| r.step == first).cloned().collect()
}

fn save_checkpoint(out: &mut Output, name: &str, trainer: &Trainer) -> anyhow::Result<()> {
    Checkpoint::from_trainer(trainer).save(&out.path(name))?;
    out.register(name);
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    routing: String,
    start_step: u64,
    end_step: u64,
    total_pairs: u64,
    final_loss: f64,
    final_loss_per_bin: Vec<f64>,
    per_layer_drop: Vec<f64>,
    all_layer_drop_prob: f64,
    model_checksum: String,
}

pub fn train(s: &mut TrainSettings, seed: u64, out: &mut Output) -> anyhow::Result<()> {
    s.optim.seed = sub_seed(seed, streams::TRAIN);
    let mut trainer = match &s.resume {
        Some(path) => {
            let mut t = Checkpoint::load(path)
                .and_then(Checkpoint::into_trainer)
                .with_context(|| format!("loading checkpoint {}", path.display()))?;
            // Everything but the step target comes from the checkpoint.
            t.cfg.total_steps = s.optim.total_steps;
            s.model = *t.model.config();
            s.optim = t.cfg;
            t
        }
        None => Trainer::new(Model::new(s.model, sub_seed(seed, streams::INIT))?, s.optim)?,
    };
    let (corpus, eval) = corpora(&s.data, &s.model, seed)?;
    let start_step = trainer.step;
    let n_steps = s.optim.total_steps.saturating_sub(start_step);
    let n_layers = s.model.n_layers;
    let mut drop_sum = vec![0.0; n_layers];
    let mut n_reports = 0u64;
    let trace = trainer
        .run_with(&corpus, &eval, n_steps, |rep| {
            for (acc, st) in drop_sum.iter_mut().zip(&rep.layer_stats) {
                *acc += st.drop_ratio;
            }
            n_reports += 1;
        })
        .context("training failed")?;
    let per_layer_drop: Vec<f64> = drop_sum.iter().map(|d| d / n_reports.max(1) as f64).collect();

    write_trace(out, "trace.csv", &trace)?;
    out.write_csv("layer_drop.csv", |w| {
        w.write_record(["layer", "drop_ratio"])?;
        for (l, d) in per_layer_drop.iter().enumerate() {
            w.write_record([l.to_string(), d.to_string()])?;
        }
        Ok(())
    })?;
    save_checkpoint(out, "checkpoint.json", &trainer)?;
    let last = final_records(&trace);
    let summary = TrainSummary {
        routing: s.model.routing.to_string(),
        start_step,
        end_step: trainer.step,
        total_pairs: trainer.total_pairs,
        final_loss: overall_loss(&last),
        final_loss_per_bin: last.iter().map(|r| r.mean_loss).collect(),
        all_layer_drop_prob: routelab::analysis::all_layer_drop_prob(&per_layer_drop)?,
        per_layer_drop,
        model_checksum: trainer.model.checksum(),
    };
    out.write_json("summary.json", &summary)?;
    println!(
        "trained {} -> {} steps ({}): loss {:.4}, routed pairs {}",
        start_step, trainer.step, summary.routing, summary.final_loss, summary.total_pairs
    );
    Ok(())
}

#[derive(Serialize)]
struct RetrofitSummary {
    from: String,
    to: String,
    checksum_before: String,
    checksum_after: String,
    pre_retrofit_loss: f64,
    post_retrofit_loss: f64,
    finetune_steps: u64,
    final_loss: f64,
    baseline_final_loss: Option<f64>,
}

pub fn retrofit(s: &RetrofitSettings, seed: u64, out: &mut Output) -> anyhow::Result<()> {
    let path = s.checkpoint.as_ref().ok_or_else(|| usage("retrofit needs --checkpoint"))?;
    let mut trainer = Checkpoint::load(path)
        .and_then(Checkpoint::into_trainer)
        .with_context(|| format!("loading checkpoint {}", path.display()))?;
    let model_cfg = *trainer.model.config();
    let (corpus, eval) = corpora(&s.data, &model_cfg, seed)?;

    let before = trainer.run(&corpus, &eval, 0)?;
    let mut baseline = s.baseline.then(|| trainer.clone());
    let schedule = match (s.schedule, s.k) {
        (Some(sched), _) => Some(sched),
        (None, Some(k)) => Some(CapacitySchedule::fixed(k)?),
        (None, None) => None,
    };
    let checksum_before = trainer.model.checksum();
    trainer.model = trainer.model.retrofit_router(schedule)?;
    let checksum_after = trainer.model.checksum();
    if checksum_before != checksum_after {
        bail!("retrofit changed the model parameters");
    }

    let trace = trainer.run(&corpus, &eval, s.finetune_steps)?;
    write_trace(out, "trace.csv", &trace)?;
    save_checkpoint(out, "checkpoint.json", &trainer)?;
    let baseline_final_loss = match baseline.as_mut() {
        Some(b) => {
            let bt = b.run(&corpus, &eval, s.finetune_steps)?;
            write_trace(out, "baseline_trace.csv", &bt)?;
            Some(overall_loss(&final_records(&bt)))
        }
        None => None,
    };
    let summary = RetrofitSummary {
        from: model_cfg.routing.to_string(),
        to: trainer.model.config().routing.to_string(),
        checksum_before,
        checksum_after,
        pre_retrofit_loss: overall_loss(&before.records),
        post_retrofit_loss: overall_loss(&first_records(&trace)),
        finetune_steps: s.finetune_steps,
        final_loss: overall_loss(&final_records(&trace)),
        baseline_final_loss,
    };
    out.write_json("retrofit.json", &summary)?;
    println!(
        "{} -> {}: loss {:.4} before, {:.4} after retrofit, {:.4} after {} steps{}",
        summary.from,
        summary.to,
        summary.pre_retrofit_loss,
        summary.post_retrofit_loss,
        summary.final_loss,
        s.finetune_steps,
        baseline_final_loss.map_or(String::new(), |b| format!(" (TC baseline {b:.4})"))
    );
    Ok(())
}

fn read_trace(path: &std::path::Path) -> anyhow::Result<LossTrace> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    LossTrace::read_csv(file).with_context(|| format!("reading {}", path.display()))
}

fn write_report(out: &mut Output, name: &str, report: &ConvergenceReport) -> anyhow::Result<()> {
    let mut buf = Vec::new();
    report.write_csv(&mut buf)?;
    out.write(name, &buf)?;
    if report.missing_cells() > 0 {
        eprintln!(
            "warning: {name}: {} bin/stage cell(s) have too few points and are left empty",
            report.missing_cells()
        );
    }
    Ok(())
}

pub fn analyze(s: &AnalyzeSettings, out: &mut Output) -> anyhow::Result<()> {
    let (main_path, rest) = match s.traces.split_first() {
        Some(x) => x,
        None => return Err(usage("analyze needs at least one --trace")),
    };
    if rest.len() > 1 {
        return Err(usage("analyze takes one or two traces"));
    }
    let trace = read_trace(main_path)?;
    let stages = match (&s.stages, s.geometric) {
        (Some(w), _) => StageSpec::new(w.clone())?,
        (None, Some((a, b))) => geometric_stages(a, b)?,
        (None, None) => {
            let lo = trace.records.iter().map(|r| r.step).min().unwrap_or(0);
            let hi = trace.records.iter().map(|r| r.step).max().unwrap_or(0);
            StageSpec::new(vec![(lo, hi.max(lo + 1))])?
        }
    };
    let report = convergence_rate(&trace, &stages)?;
    write_report(out, "convergence.csv", &report)?;

    for bin in 0..N_BINS {
        let series = trace.series(bin);
        out.write_csv(&format!("plot/loss_bin{bin}.csv"), |w| {
            w.write_record(["x", "y"])?;
            for (t, l) in series {
                w.write_record([t.to_string(), l.to_string()])?;
            }
            Ok(())
        })?;
    }
    for (stage, _) in stages.windows().iter().enumerate() {
        out.write_csv(&format!("plot/eta_stage{stage}.csv"), |w| {
            w.write_record(["x", "y"])?;
            for bin in 0..N_BINS {
                if let Some(eta) = report.eta[bin][stage] {
                    w.write_record([bin.to_string(), eta.to_string()])?;
                }
            }
            Ok(())
        })?;
    }

    if let Some(base_path) = rest.first() {
        let base = convergence_rate(&read_trace(base_path)?, &stages)?;
        write_report(out, "convergence_baseline.csv", &base)?;
        let ratio = eta_ratio(&report, &base)?;
        let mut buf = Vec::new();
        ratio.write_csv(&mut buf)?;
        out.write("ratio.csv", &buf)?;
    }
    for (stage, (a, b)) in stages.windows().iter().enumerate() {
        let cells: Vec<String> = (0..N_BINS)
            .map(|bin| report.eta[bin][stage].map_or("-".into(), |e| format!("{e:.3e}")))
            .collect();
        println!("stage [{a}, {b}): eta by bin {}", cells.join("  "));
    }
    Ok(())
}

#[derive(Serialize)]
struct Ordering {
    ranking: Vec<String>,
    ec_first: bool,
    cf_monotone: bool,
    violations: Vec<String>,
}

pub fn simulate(s: &SimulateSettings, seed: u64, out: &mut Output) -> anyhow::Result<()> {
    if s.cfs.iter().any(|cf| !cf.is_finite()) {
        return Err(usage("capacity factors must be finite"));
    }
    let score_distribution = if s.skew > 0.0 {
        ScoreDistribution::Zipf { s: s.skew }
    } else if s.skew == 0.0 {
        ScoreDistribution::Uniform
    } else {
        return Err(usage(format!("--skew must be >= 0, got {}", s.skew)));
    };
    let workload = WorkloadSpec {
        n_tokens_per_step: s.n_tokens,
        score_distribution,
        n_steps: s.n_steps,
        seed: sub_seed(seed, streams::WORKLOAD),
    };
    let cluster = ClusterConfig::contiguous(s.n_experts, s.n_devices)?;
    let policies = reference_policies(s.k, &s.cfs, s.dropless);
    let arch = reference_arch(s.n_tokens, s.n_experts, s.k as f64);
    let report = compare_policies(&policies, &workload, &cluster, &s.cost, &arch)?;

    out.write_csv("sim.csv", |w| {
        w.write_record(["policy", "mean_step_time", "throughput", "load_std", "drop_ratio"])?;
        for r in &report.rows {
            w.write_record([
                r.policy_tag.clone(),
                r.mean_step_time.to_string(),
                r.throughput_tflops.to_string(),
                r.per_device_load_std.to_string(),
                r.drop_ratio.to_string(),
            ])?;
        }
        Ok(())
    })?;
    let ordering = Ordering {
        ranking: report.rows.iter().map(|r| r.policy_tag.clone()).collect(),
        ec_first: report.rows.first().is_some_and(|r| r.policy_tag == "ec"),
        cf_monotone: report.cf_monotone,
        violations: report.violations.clone(),
    };
    out.write_json("ordering.json", &ordering)?;
    println!("{:<18} {:>12} {:>12} {:>10} {:>10}", "policy", "step_time", "TFLOP/s", "load_std", "drop");
    for r in &report.rows {
        println!(
            "{:<18} {:>12.6} {:>12.2} {:>10.2} {:>10.4}",
            r.policy_tag, r.mean_step_time, r.throughput_tflops, r.per_device_load_std, r.drop_ratio
        );
    }
    Ok(())
}
