//! Analytic expert-parallel straggler simulator.
//!
//! Each step is synchronous: every device waits for the one holding the most
//! routed tokens, so step time is `dense + overhead + cost * max_device_load`.
//! Score matrices are drawn per step from a skewed distribution and routed
//! with the policies in [`crate::routing`].

use rand::{Rng, SeedableRng};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gumbel};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{forward_flops, throughput, ArchSpec};
use crate::error::{Error, Result};
use crate::routing::{
    loss_free_bias_update, route_ec, route_tc, tc_expert_capacity, BalanceMode, BiasState,
    CapacityMode, EcConfig, RoutingAssignment, ScoreMatrix, TcConfig,
};
use crate::scheduler::capacity_from_k;

/// Converts a zipf exponent into router-logit skew: `logit_j = -ZIPF_LOGIT_SCALE * s * ln(rank_j)`
/// plus unit Gumbel noise, so top-1 choices follow `rank^(-ZIPF_LOGIT_SCALE * s)`.
/// With `s = 1.2` and 64 experts the top-1 imbalance factor is about 3x.
pub const ZIPF_LOGIT_SCALE: f64 = 1.0 / 3.0;

pub const DEFAULT_ZIPF_S: f64 = 1.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub n_devices: usize,
    /// Device of each expert.
    pub expert_device: Vec<usize>,
}

impl ClusterConfig {
    /// Experts `[g * E/G, (g+1) * E/G)` live on device `g`.
    pub fn contiguous(n_experts: usize, n_devices: usize) -> Result<Self> {
        if n_devices == 0 || n_experts == 0 || n_experts % n_devices != 0 {
            return Err(Error::config(format!(
                "{n_experts} experts cannot be split evenly over {n_devices} devices"
            )));
        }
        let per = n_experts / n_devices;
        Ok(Self {
            n_devices,
            expert_device: (0..n_experts).map(|j| j / per).collect(),
        })
    }

    pub fn with_mapping(n_devices: usize, expert_device: Vec<usize>) -> Result<Self> {
        if let Some(d) = expert_device.iter().find(|&&d| d >= n_devices) {
            return Err(Error::config(format!("expert mapped to missing device {d}")));
        }
        Ok(Self {
            n_devices,
            expert_device,
        })
    }

    pub fn n_experts(&self) -> usize {
        self.expert_device.len()
    }

    pub fn device_loads(&self, expert_loads: &[usize]) -> Result<Vec<usize>> {
        if expert_loads.len() > self.expert_device.len() {
            return Err(Error::config(format!(
                "expert {} has no device",
                self.expert_device.len()
            )));
        }
        let mut dev = vec![0usize; self.n_devices];
        for (j, &l) in expert_loads.iter().enumerate() {
            dev[self.expert_device[j]] += l;
        }
        Ok(dev)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepCostModel {
    pub per_token_expert_cost: f64,
    pub fixed_overhead: f64,
    pub dense_cost: f64,
}

impl Default for StepCostModel {
    fn default() -> Self {
        Self {
            per_token_expert_cost: 6e-6,
            fixed_overhead: 3e-3,
            dense_cost: 6e-3,
        }
    }
}

impl StepCostModel {
    fn validate(&self) -> Result<()> {
        let ok = [self.per_token_expert_cost, self.fixed_overhead, self.dense_cost]
            .iter()
            .all(|v| *v >= 0.0 && v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::config("step cost terms must be finite and non-negative"))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScoreDistribution {
    Uniform,
    Zipf { s: f64 },
    /// Recorded router scores, replayed cyclically.
    #[serde(skip)]
    Dump(Vec<ScoreMatrix>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub n_tokens_per_step: usize,
    pub score_distribution: ScoreDistribution,
    pub n_steps: usize,
    pub seed: u64,
}

impl WorkloadSpec {
    fn validate(&self, n_experts: usize) -> Result<()> {
        if self.n_tokens_per_step == 0 || self.n_steps == 0 {
            return Err(Error::config("workload needs positive token and step counts"));
        }
        match &self.score_distribution {
            ScoreDistribution::Zipf { s } if !(*s > 0.0) => {
                Err(Error::config(format!("zipf exponent must be > 0, got {s}")))
            }
            ScoreDistribution::Dump(m) if m.is_empty() => Err(Error::config("empty score dump")),
            ScoreDistribution::Dump(m)
                if m.iter().any(|x| x.n_experts() != n_experts || x.n_tokens() != self.n_tokens_per_step) =>
            {
                Err(Error::config("score dump shape disagrees with the workload"))
            }
            _ => Ok(()),
        }
    }

    /// Fixed expert-to-popularity-rank permutation for this workload.
    fn popularity_ranks(&self, n_experts: usize) -> Vec<usize> {
        let mut ranks: Vec<usize> = (1..=n_experts).collect();
        ranks.shuffle(&mut ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed_0f_e7e7));
        ranks
    }

    /// Score matrix of `step`; `amplification` scales the zipf skew.
    pub fn scores_at(&self, step: usize, n_experts: usize, amplification: f64) -> Result<ScoreMatrix> {
        let n = self.n_tokens_per_step;
        let bias: Vec<f64> = match &self.score_distribution {
            ScoreDistribution::Dump(m) => return Ok(m[step % m.len()].clone()),
            ScoreDistribution::Uniform => vec![0.0; n_experts],
            ScoreDistribution::Zipf { s } => self
                .popularity_ranks(n_experts)
                .into_iter()
                .map(|rank| -ZIPF_LOGIT_SCALE * s * amplification * (rank as f64).ln())
                .collect(),
        };
        let mut rng = step_rng(self.seed, step);
        let gumbel = Gumbel::new(0.0, 1.0).expect("valid gumbel");
        let data: Vec<f64> = (0..n * n_experts)
            .map(|idx| bias[idx % n_experts] + gumbel.sample(&mut rng))
            .collect();
        ScoreMatrix::new(ndarray::Array2::from_shape_vec((n, n_experts), data).expect("shape"))
    }
}

fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64 + 1);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum SimPolicy {
    /// Expert choice with capacity `round(k N / E)`.
    ExpertChoice { k: f64 },
    TokenChoice(TcConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySpec {
    pub name: String,
    pub policy: SimPolicy,
    /// Multiplies the zipf skew seen by this policy (1 = unchanged). Models
    /// the extra imbalance attributed to auxiliary-loss balancing.
    #[serde(default = "one")]
    pub skew_amplification: f64,
}

fn one() -> f64 {
    1.0
}

impl PolicySpec {
    pub fn new(name: impl Into<String>, policy: SimPolicy) -> Self {
        Self {
            name: name.into(),
            policy,
            skew_amplification: 1.0,
        }
    }

    pub fn with_skew_amplification(mut self, a: f64) -> Self {
        self.skew_amplification = a;
        self
    }

    fn capacity_factor(&self) -> Option<f64> {
        match self.policy {
            SimPolicy::TokenChoice(TcConfig {
                capacity: CapacityMode::Bounded { capacity_factor },
                ..
            }) => Some(capacity_factor),
            _ => None,
        }
    }
}

/// Skew amplification of the auxiliary-loss dropless TC variant in the
/// reference comparison.
pub const AUX_LOSS_SKEW_AMPLIFICATION: f64 = 2.5;

/// The reference comparison: EC, capacity-bounded TC over `cfs`, and the
/// dropless TC variants (no balancing, loss-free bias, auxiliary loss).
pub fn reference_policies(k: usize, cfs: &[f64], include_dropless: bool) -> Vec<PolicySpec> {
    let mut out = vec![PolicySpec::new("ec", SimPolicy::ExpertChoice { k: k as f64 })];
    for &cf in cfs {
        out.push(PolicySpec::new(
            format!("tc_cf{cf}"),
            SimPolicy::TokenChoice(TcConfig::bounded(k, cf)),
        ));
    }
    if include_dropless {
        out.push(PolicySpec::new(
            "tc_dropless",
            SimPolicy::TokenChoice(TcConfig::dropless(k)),
        ));
        out.push(PolicySpec::new(
            "tc_dropless_bias",
            SimPolicy::TokenChoice(TcConfig::dropless(k).with_balance(BalanceMode::LossFreeBias {
                update_rate: crate::routing::DEFAULT_BIAS_UPDATE_RATE,
            })),
        ));
        out.push(
            PolicySpec::new(
                "tc_dropless_aux",
                SimPolicy::TokenChoice(TcConfig::dropless(k).with_balance(BalanceMode::AuxLoss {
                    alpha: crate::routing::DEFAULT_AUX_ALPHA,
                })),
            )
            .with_skew_amplification(AUX_LOSS_SKEW_AMPLIFICATION),
        );
    }
    out
}

/// Synchronous step time: `dense + overhead + cost * max over devices`.
pub fn step_time(
    assignment: &RoutingAssignment,
    cluster: &ClusterConfig,
    cost: &StepCostModel,
) -> Result<f64> {
    if assignment.n_experts() > cluster.n_experts() {
        return Err(Error::config(format!(
            "assignment has {} experts, cluster maps {}",
            assignment.n_experts(),
            cluster.n_experts()
        )));
    }
    step_time_from_loads(assignment.per_expert_load(), cluster, cost)
}

fn step_time_from_loads(loads: &[usize], cluster: &ClusterConfig, cost: &StepCostModel) -> Result<f64> {
    let dev = cluster.device_loads(loads)?;
    let max = dev.iter().copied().max().unwrap_or(0);
    Ok(cost.dense_cost + cost.fixed_overhead + cost.per_token_expert_cost * max as f64)
}

/// Per-expert slots actually computed. Capacity-bounded TC runs fixed-size
/// expert buffers, so every expert pays for its full capacity.
fn computed_loads(assignment: &RoutingAssignment, policy: &SimPolicy) -> Vec<usize> {
    match policy {
        SimPolicy::TokenChoice(TcConfig {
            k,
            capacity: CapacityMode::Bounded { capacity_factor },
            ..
        }) => {
            let cap = tc_expert_capacity(*k, assignment.n_tokens(), assignment.n_experts(), *capacity_factor);
            vec![cap; assignment.n_experts()]
        }
        _ => assignment.per_expert_load().to_vec(),
    }
}

fn route_step(
    policy: &SimPolicy,
    scores: &ScoreMatrix,
    bias: Option<&BiasState>,
) -> Result<RoutingAssignment> {
    match policy {
        SimPolicy::ExpertChoice { k } => {
            let c = capacity_from_k(*k, scores.n_tokens(), scores.n_experts());
            route_ec(scores, &EcConfig { capacity: c })
        }
        SimPolicy::TokenChoice(cfg) => route_tc(scores, cfg, bias),
    }
}

fn population_std(xs: &[usize]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<usize>() as f64 / n;
    (xs.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub policy_tag: String,
    pub mean_step_time: f64,
    pub throughput_tflops: f64,
    /// Mean over steps of the across-device std of routed tokens.
    pub per_device_load_std: f64,
    pub drop_ratio: f64,
}

struct StepOutcome {
    time: f64,
    device_std: f64,
    drop_ratio: f64,
}

/// Routes `workload.n_steps` score matrices and aggregates step times.
/// Throughput uses the nominal `forward_flops(arch)`, which is an upper bound
/// for policies that drop tokens.
pub fn simulate_policy(
    policy: &PolicySpec,
    workload: &WorkloadSpec,
    cluster: &ClusterConfig,
    cost: &StepCostModel,
    arch: &ArchSpec,
) -> Result<SimResult> {
    let e = cluster.n_experts();
    workload.validate(e)?;
    cost.validate()?;
    if let SimPolicy::TokenChoice(cfg) = &policy.policy {
        cfg.validate(e)?;
    }

    let outcome = |step: usize, bias: Option<&BiasState>| -> Result<(StepOutcome, RoutingAssignment)> {
        let scores = workload.scores_at(step, e, policy.skew_amplification)?;
        let a = route_step(&policy.policy, &scores, bias)?;
        let loads = computed_loads(&a, &policy.policy);
        let time = step_time_from_loads(&loads, cluster, cost)?;
        let dev = cluster.device_loads(a.per_expert_load())?;
        let o = StepOutcome {
            time,
            device_std: population_std(&dev),
            drop_ratio: a.dropped_tokens().len() as f64 / a.n_tokens() as f64,
        };
        Ok((o, a))
    };

    let outcomes: Vec<StepOutcome> = match policy.policy {
        SimPolicy::TokenChoice(TcConfig {
            balance: BalanceMode::LossFreeBias { update_rate },
            ..
        }) => {
            // Bias state threads through the steps, so this path is sequential.
            let mut bias = BiasState::new(e, update_rate)?;
            let mut out = Vec::with_capacity(workload.n_steps);
            for step in 0..workload.n_steps {
                let (o, a) = outcome(step, Some(&bias))?;
                bias = loss_free_bias_update(&bias, a.per_expert_load())?;
                out.push(o);
            }
            out
        }
        _ => (0..workload.n_steps)
            .into_par_iter()
            .map(|step| outcome(step, None).map(|(o, _)| o))
            .collect::<Result<Vec<_>>>()?,
    };

    let n = outcomes.len() as f64;
    let mean_step_time = outcomes.iter().map(|o| o.time).sum::<f64>() / n;
    Ok(SimResult {
        policy_tag: policy.name.clone(),
        mean_step_time,
        throughput_tflops: throughput(forward_flops(arch), mean_step_time, cluster.n_devices)?,
        per_device_load_std: outcomes.iter().map(|o| o.device_std).sum::<f64>() / n,
        drop_ratio: outcomes.iter().map(|o| o.drop_ratio).sum::<f64>() / n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemorySnapshot {
    /// Peak routed tokens resident on each device over the stream.
    pub per_device_peak: Vec<usize>,
    pub std: f64,
}

pub fn memory_snapshot(
    assignments: &[RoutingAssignment],
    cluster: &ClusterConfig,
) -> Result<MemorySnapshot> {
    let mut peak = vec![0usize; cluster.n_devices];
    for a in assignments {
        for (p, l) in peak.iter_mut().zip(cluster.device_loads(a.per_expert_load())?) {
            *p = (*p).max(l);
        }
    }
    let std = if peak.is_empty() { 0.0 } else { population_std(&peak) };
    Ok(MemorySnapshot {
        per_device_peak: peak,
        std,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    /// Sorted by throughput, highest first; ties keep input order.
    pub rows: Vec<SimResult>,
    /// Throughput is non-increasing in the capacity factor across the
    /// capacity-bounded TC policies.
    pub cf_monotone: bool,
    pub violations: Vec<String>,
}

pub fn compare_policies(
    policies: &[PolicySpec],
    workload: &WorkloadSpec,
    cluster: &ClusterConfig,
    cost: &StepCostModel,
    arch: &ArchSpec,
) -> Result<ComparisonReport> {
    if policies.is_empty() {
        return Err(Error::input("no policies to compare"));
    }
    let results = policies
        .iter()
        .map(|p| simulate_policy(p, workload, cluster, cost, arch))
        .collect::<Result<Vec<_>>>()?;

    let mut bounded: Vec<(f64, &SimResult)> = policies
        .iter()
        .zip(&results)
        .filter_map(|(p, r)| p.capacity_factor().map(|cf| (cf, r)))
        .collect();
    bounded.sort_by(|a, b| a.0.total_cmp(&b.0));
    let violations: Vec<String> = bounded
        .windows(2)
        .filter(|w| w[1].1.throughput_tflops > w[0].1.throughput_tflops)
        .map(|w| {
            format!(
                "{} ({:.4}) faster than {} ({:.4}) despite a larger capacity factor",
                w[1].1.policy_tag, w[1].1.throughput_tflops, w[0].1.policy_tag, w[0].1.throughput_tflops
            )
        })
        .collect();

    let mut rows = results;
    rows.sort_by(|a, b| b.throughput_tflops.total_cmp(&a.throughput_tflops));
    Ok(ComparisonReport {
        rows,
        cf_monotone: violations.is_empty(),
        violations,
    })
}

/// Tokens routed per step in the reference workload (four 1024-token sequences).
pub const REFERENCE_TOKENS_PER_STEP: usize = 4096;

/// The reference workload: zipf(1.2)-skewed router logits.
pub fn reference_workload(n_steps: usize, seed: u64) -> WorkloadSpec {
    WorkloadSpec {
        n_tokens_per_step: REFERENCE_TOKENS_PER_STEP,
        score_distribution: ScoreDistribution::Zipf { s: DEFAULT_ZIPF_S },
        n_steps,
        seed,
    }
}

/// One fine-grained MoE layer plus shared experts, sized for `n_tokens`
/// tokens per step. Only used to turn step times into FLOP rates.
pub fn reference_arch(n_tokens: usize, n_experts: usize, k: f64) -> ArchSpec {
    let seq_len = 1024.min(n_tokens).max(1);
    ArchSpec {
        batch: n_tokens.div_ceil(seq_len),
        seq_len,
        n_layers: 1,
        hidden: 2048,
        expert_ffn: 1280,
        shared_ffn: 2 * 1280,
        routed_k: k,
        n_experts,
        vocab: 50_304,
    }
}

/// A uniform random score matrix, used by demos.
pub fn random_scores(n_tokens: usize, n_experts: usize, seed: u64) -> Result<ScoreMatrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n_tokens * n_experts).map(|_| rng.random::<f64>()).collect();
    ScoreMatrix::new(
        ndarray::Array2::from_shape_vec((n_tokens, n_experts), data)
            .map_err(|e| Error::input(e.to_string()))?,
    )
}
