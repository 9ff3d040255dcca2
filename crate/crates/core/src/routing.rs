//! Token-choice (TC) and expert-choice (EC) routing on raw router scores.
//!
//! Every policy here is a pure function of a [`ScoreMatrix`]: TC lets each
//! token pick its top-k experts (optionally capped per expert), EC lets each
//! expert pick its top-c tokens. Ties are always broken towards the lowest
//! index so that identical inputs give identical assignments.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default coefficient for the auxiliary load-balancing loss.
pub const DEFAULT_AUX_ALPHA: f64 = 0.01;

/// Default bias step for loss-free balancing.
pub const DEFAULT_BIAS_UPDATE_RATE: f64 = 0.001;

/// N×E router affinity scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    scores: Array2<f64>,
}

impl ScoreMatrix {
    pub fn new(scores: Array2<f64>) -> Result<Self> {
        let (n, e) = scores.dim();
        if n == 0 || e == 0 {
            return Err(Error::input(format!(
                "score matrix must be at least 1x1, got {n}x{e}"
            )));
        }
        if let Some(((i, j), v)) = scores.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::input(format!("score ({i}, {j}) is not finite: {v}")));
        }
        Ok(Self { scores })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let e = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != e) {
            return Err(Error::input("score rows have unequal lengths"));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let scores = Array2::from_shape_vec((n, e), flat)
            .map_err(|err| Error::input(err.to_string()))?;
        Self::new(scores)
    }

    /// Headerless CSV, one token per row and one expert per column. Rows
    /// starting with `#` are comments.
    pub fn read_csv<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(reader);
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(crate::trace::csv_err)?;
            let line = rec.position().map_or(0, |p| p.line());
            let row = rec
                .iter()
                .map(|f| {
                    f.parse::<f64>().map_err(|_| Error::Parse {
                        line,
                        message: format!("'{f}' is not a number"),
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(Error::Parse {
                line: 1,
                message: "no score rows".into(),
            });
        }
        Self::from_rows(&rows)
    }

    pub fn n_tokens(&self) -> usize {
        self.scores.nrows()
    }

    pub fn n_experts(&self) -> usize {
        self.scores.ncols()
    }

    #[inline]
    pub fn get(&self, token: usize, expert: usize) -> f64 {
        self.scores[[token, expert]]
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.scores.view()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.scores
    }

    /// Row-wise softmax over all experts.
    pub fn softmax_rows(&self) -> Array2<f64> {
        let mut probs = self.scores.clone();
        for mut row in probs.rows_mut() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        probs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum CapacityMode {
    Dropless,
    Bounded { capacity_factor: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum BalanceMode {
    None,
    AuxLoss { alpha: f64 },
    LossFreeBias { update_rate: f64 },
}

/// Token-choice routing configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TcConfig {
    pub k: usize,
    pub capacity: CapacityMode,
    pub balance: BalanceMode,
}

impl TcConfig {
    pub fn dropless(k: usize) -> Self {
        Self {
            k,
            capacity: CapacityMode::Dropless,
            balance: BalanceMode::None,
        }
    }

    pub fn bounded(k: usize, capacity_factor: f64) -> Self {
        Self {
            k,
            capacity: CapacityMode::Bounded { capacity_factor },
            balance: BalanceMode::None,
        }
    }

    pub fn with_balance(mut self, balance: BalanceMode) -> Self {
        self.balance = balance;
        self
    }

    pub fn validate(&self, n_experts: usize) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("top-k must be at least 1"));
        }
        if self.k > n_experts {
            return Err(Error::config(format!(
                "top-k {} exceeds the number of experts {n_experts}",
                self.k
            )));
        }
        if let CapacityMode::Bounded { capacity_factor } = self.capacity {
            if !(capacity_factor >= 1.0) || !capacity_factor.is_finite() {
                return Err(Error::config(format!(
                    "capacity factor must be a finite value >= 1, got {capacity_factor}"
                )));
            }
        }
        match self.balance {
            BalanceMode::AuxLoss { alpha } if !(alpha > 0.0) => {
                Err(Error::config(format!("aux-loss alpha must be > 0, got {alpha}")))
            }
            BalanceMode::LossFreeBias { update_rate } if !(update_rate > 0.0) => Err(
                Error::config(format!("bias update rate must be > 0, got {update_rate}")),
            ),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for TcConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "tc(k={}", self.k)?;
        match self.capacity {
            CapacityMode::Dropless => write!(f, ",dropless")?,
            CapacityMode::Bounded { capacity_factor } => write!(f, ",cf={capacity_factor}")?,
        }
        match self.balance {
            BalanceMode::None => {}
            BalanceMode::AuxLoss { alpha } => write!(f, ",aux={alpha}")?,
            BalanceMode::LossFreeBias { update_rate } => write!(f, ",bias={update_rate}")?,
        }
        write!(f, ")")
    }
}

/// Expert-choice routing configuration: tokens taken by every expert.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EcConfig {
    pub capacity: usize,
}

impl fmt::Display for EcConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ec(c={})", self.capacity)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    TokenChoice,
    ExpertChoice,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoutePair {
    pub token: usize,
    pub expert: usize,
    pub gate: f64,
}

/// A sparse token-expert assignment.
///
/// Pairs are kept sorted by `(token, expert)`; loads and the dropped-token set
/// are derived from the pairs on construction and cannot drift from them.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingAssignment {
    pairs: Vec<RoutePair>,
    per_expert_load: Vec<usize>,
    dropped_tokens: Vec<usize>,
    n_tokens: usize,
    policy: Policy,
    policy_tag: String,
}

impl RoutingAssignment {
    pub fn from_pairs(
        n_tokens: usize,
        n_experts: usize,
        mut pairs: Vec<RoutePair>,
        policy: Policy,
        policy_tag: impl Into<String>,
    ) -> Result<Self> {
        pairs.sort_by(|a, b| (a.token, a.expert).cmp(&(b.token, b.expert)));
        let mut per_expert_load = vec![0usize; n_experts];
        let mut covered = vec![false; n_tokens];
        for (idx, p) in pairs.iter().enumerate() {
            if p.token >= n_tokens || p.expert >= n_experts {
                return Err(Error::InconsistentAssignment(format!(
                    "pair ({}, {}) outside {n_tokens}x{n_experts}",
                    p.token, p.expert
                )));
            }
            if idx > 0 && pairs[idx - 1].token == p.token && pairs[idx - 1].expert == p.expert {
                return Err(Error::InconsistentAssignment(format!(
                    "duplicate pair ({}, {})",
                    p.token, p.expert
                )));
            }
            if !(p.gate.is_finite() && p.gate >= 0.0) {
                return Err(Error::InconsistentAssignment(format!(
                    "gate for ({}, {}) is {}",
                    p.token, p.expert, p.gate
                )));
            }
            per_expert_load[p.expert] += 1;
            covered[p.token] = true;
        }
        let dropped_tokens = (0..n_tokens).filter(|&i| !covered[i]).collect();
        Ok(Self {
            pairs,
            per_expert_load,
            dropped_tokens,
            n_tokens,
            policy,
            policy_tag: policy_tag.into(),
        })
    }

    pub fn pairs(&self) -> &[RoutePair] {
        &self.pairs
    }

    pub fn per_expert_load(&self) -> &[usize] {
        &self.per_expert_load
    }

    pub fn dropped_tokens(&self) -> &[usize] {
        &self.dropped_tokens
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn n_experts(&self) -> usize {
        self.per_expert_load.len()
    }

    pub fn policy(&self) -> Policy {
        self.policy
    }

    pub fn policy_tag(&self) -> &str {
        &self.policy_tag
    }

    pub fn total_pairs(&self) -> usize {
        self.pairs.len()
    }

    /// `(token, gate)` for every token routed to `expert`, ascending by token.
    pub fn tokens_for_expert(&self, expert: usize) -> Vec<(usize, f64)> {
        self.pairs
            .iter()
            .filter(|p| p.expert == expert)
            .map(|p| (p.token, p.gate))
            .collect()
    }

    /// `(expert, gate)` for every expert that took `token`, ascending by expert.
    pub fn experts_for_token(&self, token: usize) -> &[RoutePair] {
        let lo = self.pairs.partition_point(|p| p.token < token);
        let hi = self.pairs.partition_point(|p| p.token <= token);
        &self.pairs[lo..hi]
    }

    pub fn to_record(&self) -> AssignmentRecord {
        AssignmentRecord {
            policy_tag: self.policy_tag.clone(),
            pairs: self.pairs.iter().map(|p| (p.token, p.expert, p.gate)).collect(),
            loads: self.per_expert_load.clone(),
            dropped: self.dropped_tokens.clone(),
        }
    }
}

/// JSON form of an assignment: `{policy_tag, pairs: [[t, e, gate]...], loads, dropped}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentRecord {
    pub policy_tag: String,
    pub pairs: Vec<(usize, usize, f64)>,
    pub loads: Vec<usize>,
    pub dropped: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadStats {
    pub loads: Vec<usize>,
    pub drop_ratio: f64,
    pub max_over_mean: f64,
    pub load_std: f64,
}

/// Per-expert selection biases for loss-free balancing. Owned by the caller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasState {
    biases: Vec<f64>,
    update_rate: f64,
}

impl BiasState {
    pub fn new(n_experts: usize, update_rate: f64) -> Result<Self> {
        Self::from_biases(vec![0.0; n_experts], update_rate)
    }

    pub fn from_biases(biases: Vec<f64>, update_rate: f64) -> Result<Self> {
        if !(update_rate > 0.0 && update_rate.is_finite()) {
            return Err(Error::config(format!(
                "bias update rate must be > 0, got {update_rate}"
            )));
        }
        if biases.iter().any(|b| !b.is_finite()) {
            return Err(Error::input("biases must be finite"));
        }
        Ok(Self {
            biases,
            update_rate,
        })
    }

    pub fn biases(&self) -> &[f64] {
        &self.biases
    }

    pub fn update_rate(&self) -> f64 {
        self.update_rate
    }
}

/// Descending by value, ascending by index on ties.
fn rank_desc(a: (usize, f64), b: (usize, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// Indices of the `k` largest values, ordered best first.
pub(crate) fn top_k_indices(values: impl Iterator<Item = f64>, k: usize) -> Vec<usize> {
    let mut keyed: Vec<(usize, f64)> = values.enumerate().collect();
    if k == 0 {
        return Vec::new();
    }
    if k < keyed.len() {
        keyed.select_nth_unstable_by(k - 1, |a, b| rank_desc(*a, *b));
        keyed.truncate(k);
    }
    keyed.sort_by(|a, b| rank_desc(*a, *b));
    keyed.into_iter().map(|(i, _)| i).collect()
}

/// Per-expert token cap for capacity-bounded TC: `ceil(cf * k * N / E)`.
pub fn tc_expert_capacity(k: usize, n_tokens: usize, n_experts: usize, cf: f64) -> usize {
    assert!(k > 0 && n_tokens > 0 && n_experts > 0 && cf > 0.0);
    let exact = cf * (k * n_tokens) as f64 / n_experts as f64;
    // Absorb representation error so that e.g. 1.5 * 8 * 2048 / 64 stays 384.
    let rounded = exact.round();
    if (exact - rounded).abs() <= 1e-9 * exact.max(1.0) {
        rounded as usize
    } else {
        exact.ceil() as usize
    }
}

/// Token-choice routing. Selection uses `scores + bias` in loss-free-bias mode;
/// gates always use raw scores.
pub fn route_tc(
    scores: &ScoreMatrix,
    cfg: &TcConfig,
    bias: Option<&BiasState>,
) -> Result<RoutingAssignment> {
    let (n, e) = (scores.n_tokens(), scores.n_experts());
    cfg.validate(e)?;
    let bias = match cfg.balance {
        BalanceMode::LossFreeBias { .. } => {
            let b = bias.ok_or_else(|| {
                Error::config("loss-free bias balancing needs a bias state")
            })?;
            if b.biases.len() != e {
                return Err(Error::config(format!(
                    "bias state has {} entries for {e} experts",
                    b.biases.len()
                )));
            }
            Some(b.biases.as_slice())
        }
        _ => None,
    };

    let mut pairs = Vec::with_capacity(n * cfg.k);
    for i in 0..n {
        let row = scores.scores.row(i);
        let keyed = row
            .iter()
            .enumerate()
            .map(|(j, &s)| s + bias.map_or(0.0, |b| b[j]));
        for j in top_k_indices(keyed, cfg.k) {
            pairs.push(RoutePair {
                token: i,
                expert: j,
                gate: 0.0,
            });
        }
    }

    if let CapacityMode::Bounded { capacity_factor } = cfg.capacity {
        let cap = tc_expert_capacity(cfg.k, n, e, capacity_factor);
        let mut by_expert: Vec<Vec<usize>> = vec![Vec::new(); e];
        for p in &pairs {
            by_expert[p.expert].push(p.token);
        }
        let mut kept = Vec::with_capacity(pairs.len());
        for (j, tokens) in by_expert.iter().enumerate() {
            let keep = top_k_indices(tokens.iter().map(|&i| scores.get(i, j)), cap.min(tokens.len()));
            kept.extend(keep.into_iter().map(|slot| RoutePair {
                token: tokens[slot],
                expert: j,
                gate: 0.0,
            }));
        }
        pairs = kept;
    }

    let draft = RoutingAssignment::from_pairs(n, e, pairs, Policy::TokenChoice, cfg.to_string())?;
    compute_gates(scores, &draft, Policy::TokenChoice)
}

/// Expert-choice routing: every expert takes exactly `cfg.capacity` tokens.
pub fn route_ec(scores: &ScoreMatrix, cfg: &EcConfig) -> Result<RoutingAssignment> {
    let (n, e) = (scores.n_tokens(), scores.n_experts());
    if cfg.capacity == 0 || cfg.capacity > n {
        return Err(Error::config(format!(
            "expert capacity must be in [1, {n}], got {}",
            cfg.capacity
        )));
    }
    let mut pairs = Vec::with_capacity(e * cfg.capacity);
    for j in 0..e {
        let column = scores.scores.column(j);
        for i in top_k_indices(column.iter().copied(), cfg.capacity) {
            pairs.push(RoutePair {
                token: i,
                expert: j,
                gate: 0.0,
            });
        }
    }
    let draft = RoutingAssignment::from_pairs(n, e, pairs, Policy::ExpertChoice, cfg.to_string())?;
    compute_gates(scores, &draft, Policy::ExpertChoice)
}

/// Fills in gates for an assignment made from `scores`.
///
/// TC: softmax over the raw scores of the experts that kept the token.
/// EC: the token's softmax probability over all experts, not renormalized.
pub fn compute_gates(
    scores: &ScoreMatrix,
    assignment: &RoutingAssignment,
    policy: Policy,
) -> Result<RoutingAssignment> {
    if scores.n_tokens() != assignment.n_tokens() || scores.n_experts() != assignment.n_experts() {
        return Err(Error::input(format!(
            "assignment is {}x{} but scores are {}x{}",
            assignment.n_tokens(),
            assignment.n_experts(),
            scores.n_tokens(),
            scores.n_experts()
        )));
    }
    let mut out = assignment.clone();
    out.policy = policy;
    let mut start = 0;
    while start < out.pairs.len() {
        let token = out.pairs[start].token;
        let end = start + out.pairs[start..].partition_point(|p| p.token == token);
        let group = &mut out.pairs[start..end];
        match policy {
            Policy::TokenChoice => {
                let max = group
                    .iter()
                    .map(|p| scores.get(token, p.expert))
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for p in group.iter_mut() {
                    p.gate = (scores.get(token, p.expert) - max).exp();
                    sum += p.gate;
                }
                for p in group.iter_mut() {
                    p.gate /= sum;
                }
            }
            Policy::ExpertChoice => {
                let row = scores.scores.row(token);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = row.iter().map(|&s| (s - max).exp()).sum();
                for p in group.iter_mut() {
                    p.gate = (row[p.expert] - max).exp() / sum;
                }
            }
        }
        start = end;
    }
    Ok(out)
}

/// Gate-weighted sum of expert outputs per token.
///
/// `expert_outputs[j]` holds one row per token routed to expert `j`, in the
/// order of [`RoutingAssignment::tokens_for_expert`]. Dropped tokens get zeros.
pub fn combine_outputs(
    assignment: &RoutingAssignment,
    expert_outputs: &BTreeMap<usize, Array2<f64>>,
    token_inputs: ArrayView2<'_, f64>,
) -> Result<Array2<f64>> {
    let (n, d) = token_inputs.dim();
    if n != assignment.n_tokens() {
        return Err(Error::input(format!(
            "{n} token inputs for an assignment over {} tokens",
            assignment.n_tokens()
        )));
    }
    let mut y = Array2::<f64>::zeros((n, d));
    for j in 0..assignment.n_experts() {
        let routed = assignment.tokens_for_expert(j);
        if routed.is_empty() {
            continue;
        }
        let out = expert_outputs.get(&j).ok_or_else(|| {
            Error::InconsistentAssignment(format!("no output for expert {j}"))
        })?;
        if out.dim() != (routed.len(), d) {
            return Err(Error::InconsistentAssignment(format!(
                "expert {j} output is {:?}, expected ({}, {d})",
                out.dim(),
                routed.len()
            )));
        }
        for (row, (token, gate)) in routed.into_iter().enumerate() {
            y.row_mut(token).scaled_add(gate, &out.row(row));
        }
    }
    Ok(y)
}

/// Fraction of all tokens whose highest-scoring surviving expert is `j`.
pub fn top1_fractions(scores: &ScoreMatrix, assignment: &RoutingAssignment) -> Vec<f64> {
    let n = assignment.n_tokens() as f64;
    let mut f = vec![0.0; assignment.n_experts()];
    for token in 0..assignment.n_tokens() {
        let best = assignment
            .experts_for_token(token)
            .iter()
            .map(|p| (p.expert, scores.get(token, p.expert)))
            .min_by(|a, b| rank_desc(*a, *b));
        if let Some((j, _)) = best {
            f[j] += 1.0 / n;
        }
    }
    f
}

/// Switch-style balance loss `alpha * E * sum_j f_j * P_j`.
pub fn aux_load_balance_loss(
    scores: &ScoreMatrix,
    assignment: &RoutingAssignment,
    alpha: f64,
) -> Result<f64> {
    if scores.n_tokens() != assignment.n_tokens() || scores.n_experts() != assignment.n_experts() {
        return Err(Error::input("assignment and scores disagree in shape"));
    }
    let e = scores.n_experts();
    let f = top1_fractions(scores, assignment);
    let probs = scores.softmax_rows();
    let mean_probs = probs.mean_axis(ndarray::Axis(0)).expect("non-empty");
    let dot: f64 = f.iter().zip(mean_probs.iter()).map(|(a, b)| a * b).sum();
    Ok(alpha * e as f64 * dot)
}

/// Sign-of-deviation bias update: overloaded experts become less attractive.
pub fn loss_free_bias_update(bias: &BiasState, loads: &[usize]) -> Result<BiasState> {
    if loads.len() != bias.biases.len() {
        return Err(Error::input(format!(
            "{} loads for {} biases",
            loads.len(),
            bias.biases.len()
        )));
    }
    let total: usize = loads.iter().sum();
    let e = loads.len();
    let biases = bias
        .biases
        .iter()
        .zip(loads)
        // Compare load * E with the total to keep the mean test exact.
        .map(|(&b, &l)| match (l * e).cmp(&total) {
            Ordering::Greater => b - bias.update_rate,
            Ordering::Less => b + bias.update_rate,
            Ordering::Equal => b,
        })
        .collect();
    Ok(BiasState {
        biases,
        update_rate: bias.update_rate,
    })
}

pub fn load_stats(
    assignment: &RoutingAssignment,
    n_tokens: usize,
    n_experts: usize,
) -> Result<LoadStats> {
    if n_tokens != assignment.n_tokens() || n_experts != assignment.n_experts() {
        return Err(Error::input(format!(
            "stats requested for {n_tokens}x{n_experts}, assignment is {}x{}",
            assignment.n_tokens(),
            assignment.n_experts()
        )));
    }
    Ok(stats_from_loads(
        assignment.per_expert_load(),
        assignment.dropped_tokens().len(),
        n_tokens,
    ))
}

pub(crate) fn stats_from_loads(loads: &[usize], n_dropped: usize, n_tokens: usize) -> LoadStats {
    let e = loads.len() as f64;
    let mean = loads.iter().sum::<usize>() as f64 / e;
    let max = loads.iter().copied().max().unwrap_or(0) as f64;
    let var = loads.iter().map(|&l| (l as f64 - mean).powi(2)).sum::<f64>() / e;
    LoadStats {
        loads: loads.to_vec(),
        drop_ratio: n_dropped as f64 / n_tokens as f64,
        max_over_mean: if mean > 0.0 { max / mean } else { 1.0 },
        load_std: var.sqrt(),
    }
}

/// The 6x3 matrix used throughout the docs and CLI demo: top-1 loads are
/// (1, 4, 1) while EC with c = 2 gives (2, 2, 2).
pub fn demo_scores() -> ScoreMatrix {
    ScoreMatrix::from_rows(&[
        vec![0.90, 0.10, 0.00],
        vec![0.20, 0.70, 0.05],
        vec![0.10, 0.80, 0.10],
        vec![0.30, 0.60, 0.15],
        vec![0.40, 0.50, 0.30],
        vec![0.00, 0.20, 0.80],
    ])
    .expect("static matrix is valid")
}
