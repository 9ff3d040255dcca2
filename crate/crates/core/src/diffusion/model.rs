//! Masked diffusion transformer with MoE feed-forward layers.

use std::fmt;

use ndarray::{s, Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::tape::{Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::routing::{
    loss_free_bias_update, route_ec, route_tc, stats_from_loads, BalanceMode, BiasState, EcConfig,
    LoadStats, RoutingAssignment, ScoreMatrix, TcConfig,
};
use crate::scheduler::{capacity_from_k, k_of_r, CapacitySchedule};

/// Expert-choice routing with either a fixed effective top-k or a
/// mask-ratio-dependent schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EcRouting {
    pub k: f64,
    #[serde(default)]
    pub schedule: Option<CapacitySchedule>,
}

impl EcRouting {
    pub fn fixed(k: f64) -> Self {
        Self { k, schedule: None }
    }

    pub fn scheduled(schedule: CapacitySchedule) -> Self {
        Self {
            k: schedule.k_static,
            schedule: Some(schedule),
        }
    }

    /// Effective top-k at mask ratio `r`.
    pub fn k_at(&self, r: f64) -> Result<f64> {
        match &self.schedule {
            Some(s) => k_of_r(s, r),
            None => Ok(self.k),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum RoutingConfig {
    TokenChoice(TcConfig),
    ExpertChoice(EcRouting),
}

impl fmt::Display for RoutingConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RoutingConfig::TokenChoice(tc) => write!(f, "{tc}"),
            RoutingConfig::ExpertChoice(ec) => match &ec.schedule {
                Some(s) => write!(f, "ec({}, k={}..{})", s.kind, s.k_min, s.k_max),
                None => write!(f, "ec(k={})", ec.k),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub n_heads: usize,
    pub n_experts: usize,
    pub expert_ffn_dim: usize,
    pub n_shared_experts: usize,
    pub shared_ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub init_std: f64,
    pub routing: RoutingConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            hidden_dim: 64,
            n_heads: 4,
            n_experts: 8,
            expert_ffn_dim: 32,
            n_shared_experts: 1,
            shared_ffn_dim: 64,
            vocab_size: 64,
            max_seq_len: 64,
            init_std: 0.02,
            routing: RoutingConfig::TokenChoice(TcConfig::dropless(2)),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("hidden_dim", self.hidden_dim),
            ("n_heads", self.n_heads),
            ("n_experts", self.n_experts),
            ("expert_ffn_dim", self.expert_ffn_dim),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if !self.hidden_dim.is_multiple_of(self.n_heads) {
            return Err(Error::config(format!(
                "hidden_dim {} not divisible by n_heads {}",
                self.hidden_dim, self.n_heads
            )));
        }
        if self.n_shared_experts > 0 && self.shared_ffn_dim == 0 {
            return Err(Error::config("shared_ffn_dim must be positive"));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(Error::config("init_std must be positive"));
        }
        match &self.routing {
            RoutingConfig::TokenChoice(tc) => tc.validate(self.n_experts)?,
            RoutingConfig::ExpertChoice(ec) => {
                if let Some(s) = &ec.schedule {
                    s.validate()?;
                    if s.k_max.max(s.k_static) > self.n_experts as f64 {
                        return Err(Error::config(format!(
                            "schedule k up to {} exceeds {} experts",
                            s.k_max.max(s.k_static),
                            self.n_experts
                        )));
                    }
                } else if !(ec.k > 0.0 && ec.k <= self.n_experts as f64) {
                    return Err(Error::config(format!(
                        "ec k must be in (0, {}], got {}",
                        self.n_experts, ec.k
                    )));
                }
            }
        }
        Ok(())
    }

    /// Id of the mask token; it sits just past the predictable vocabulary.
    pub fn mask_token_id(&self) -> usize {
        self.vocab_size
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Embedding,
    Attention,
    Router,
    Expert,
    Norm,
    Output,
}

#[derive(Debug, Clone)]
struct LayerIdx {
    ln1: (usize, usize),
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    ln2: (usize, usize),
    router: usize,
    experts: Vec<[usize; 3]>,
    shared: Vec<[usize; 3]>,
}

#[derive(Debug, Clone)]
struct Layout {
    tok_emb: usize,
    pos_emb: usize,
    layers: Vec<LayerIdx>,
    ln_f: (usize, usize),
    out: usize,
}

#[derive(Clone, Copy)]
enum Init {
    Normal,
    Ones,
    Zeros,
}

struct ParamSpec {
    name: String,
    shape: (usize, usize),
    init: Init,
    group: ParamGroup,
}

fn build_layout(cfg: &ModelConfig) -> (Layout, Vec<ParamSpec>) {
    let mut specs: Vec<ParamSpec> = Vec::new();
    let mut add = |name: String, shape, init, group| {
        specs.push(ParamSpec {
            name,
            shape,
            init,
            group,
        });
        specs.len() - 1
    };
    let d = cfg.hidden_dim;
    let tok_emb = add("tok_emb".into(), (cfg.vocab_size + 1, d), Init::Normal, ParamGroup::Embedding);
    let pos_emb = add("pos_emb".into(), (cfg.max_seq_len, d), Init::Normal, ParamGroup::Embedding);
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        let ln1 = (
            add(p("ln1.gamma"), (1, d), Init::Ones, ParamGroup::Norm),
            add(p("ln1.beta"), (1, d), Init::Zeros, ParamGroup::Norm),
        );
        let wq = add(p("attn.wq"), (d, d), Init::Normal, ParamGroup::Attention);
        let wk = add(p("attn.wk"), (d, d), Init::Normal, ParamGroup::Attention);
        let wv = add(p("attn.wv"), (d, d), Init::Normal, ParamGroup::Attention);
        let wo = add(p("attn.wo"), (d, d), Init::Normal, ParamGroup::Attention);
        let ln2 = (
            add(p("ln2.gamma"), (1, d), Init::Ones, ParamGroup::Norm),
            add(p("ln2.beta"), (1, d), Init::Zeros, ParamGroup::Norm),
        );
        let router = add(p("router"), (d, cfg.n_experts), Init::Normal, ParamGroup::Router);
        let mut ffn = |prefix: String, f: usize| {
            [
                add(format!("{prefix}.w1"), (d, f), Init::Normal, ParamGroup::Expert),
                add(format!("{prefix}.w3"), (d, f), Init::Normal, ParamGroup::Expert),
                add(format!("{prefix}.w2"), (f, d), Init::Normal, ParamGroup::Expert),
            ]
        };
        let experts = (0..cfg.n_experts)
            .map(|j| ffn(p(&format!("experts.{j}")), cfg.expert_ffn_dim))
            .collect();
        let shared = (0..cfg.n_shared_experts)
            .map(|j| ffn(p(&format!("shared.{j}")), cfg.shared_ffn_dim))
            .collect();
        layers.push(LayerIdx {
            ln1,
            wq,
            wk,
            wv,
            wo,
            ln2,
            router,
            experts,
            shared,
        });
    }
    let ln_f = (
        add("ln_f.gamma".into(), (1, d), Init::Ones, ParamGroup::Norm),
        add("ln_f.beta".into(), (1, d), Init::Zeros, ParamGroup::Norm),
    );
    let out = add("out".into(), (d, cfg.vocab_size), Init::Normal, ParamGroup::Output);
    (
        Layout {
            tok_emb,
            pos_emb,
            layers,
            ln_f,
            out,
        },
        specs,
    )
}

/// Token ids (mask token allowed) for a batch of equal-length sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBatch {
    pub tokens: Vec<Vec<usize>>,
    /// Explicit position ids; `0..L` when absent.
    pub positions: Option<Vec<Vec<usize>>>,
    /// Mask ratio of each sequence; drives scheduled EC capacity.
    pub ratios: Vec<f64>,
}

impl SequenceBatch {
    pub fn new(tokens: Vec<Vec<usize>>, ratios: Vec<f64>) -> Self {
        Self {
            tokens,
            positions: None,
            ratios,
        }
    }

    pub fn n_sequences(&self) -> usize {
        self.tokens.len()
    }

    pub fn seq_len(&self) -> usize {
        self.tokens.first().map_or(0, Vec::len)
    }
}

/// Chosen `(token, expert)` pairs of one MoE layer, per sequence, with
/// sequence-local token indices.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LayerSelection {
    pub per_sequence: Vec<Vec<(usize, usize)>>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions<'a> {
    pub causal: bool,
    /// Replay these selections instead of routing live.
    pub frozen: Option<&'a [LayerSelection]>,
    /// Drop the routed-expert contribution, leaving only shared experts.
    pub zero_routed: bool,
}

pub struct ForwardOutput {
    /// `(B*L) x V`, row `b*L + i`.
    pub logits: Var,
    /// Tape leaves of the parameters, in [`Model::params`] order.
    pub params: Vec<Var>,
    /// Summed over layers; present only in auxiliary-loss mode.
    pub aux_loss: Option<Var>,
    pub selections: Vec<LayerSelection>,
    pub layer_loads: Vec<Vec<usize>>,
    pub layer_stats: Vec<LoadStats>,
    pub realized_pairs: u64,
    /// Per-sequence expert capacity in EC mode.
    pub capacities: Vec<usize>,
    /// Whether frozen selections coincide with what live routing would pick.
    pub selection_matches_live: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: Vec<Mat>,
    names: Vec<String>,
    groups: Vec<ParamGroup>,
    biases: Vec<BiasState>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (_, specs) = build_layout(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, config.init_std).map_err(|e| Error::config(e.to_string()))?;
        let params = specs
            .iter()
            .map(|sp| match sp.init {
                Init::Normal => Array2::from_shape_simple_fn(sp.shape, || normal.sample(&mut rng)),
                Init::Ones => Array2::ones(sp.shape),
                Init::Zeros => Array2::zeros(sp.shape),
            })
            .collect();
        Self::from_parts(config, params, None)
    }

    /// Rebuilds a model from explicit tensors, checking their shapes.
    pub fn from_parts(config: ModelConfig, params: Vec<Mat>, biases: Option<Vec<BiasState>>) -> Result<Self> {
        config.validate()?;
        let (_, specs) = build_layout(&config);
        if params.len() != specs.len() {
            return Err(Error::input(format!(
                "expected {} parameter tensors, got {}",
                specs.len(),
                params.len()
            )));
        }
        for (p, sp) in params.iter().zip(&specs) {
            if p.dim() != sp.shape {
                return Err(Error::input(format!(
                    "{} has shape {:?}, expected {:?}",
                    sp.name,
                    p.dim(),
                    sp.shape
                )));
            }
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::input(format!("{} has non-finite entries", sp.name)));
            }
        }
        let biases = match (biases, &config.routing) {
            (Some(b), _) => {
                if b.len() != config.n_layers || b.iter().any(|s| s.biases().len() != config.n_experts) {
                    return Err(Error::input("bias states do not match layers x experts"));
                }
                b
            }
            (None, RoutingConfig::TokenChoice(TcConfig {
                balance: BalanceMode::LossFreeBias { update_rate },
                ..
            })) => (0..config.n_layers)
                .map(|_| BiasState::new(config.n_experts, *update_rate))
                .collect::<Result<_>>()?,
            (None, _) => Vec::new(),
        };
        Ok(Self {
            config,
            names: specs.iter().map(|s| s.name.clone()).collect(),
            groups: specs.iter().map(|s| s.group).collect(),
            params,
            biases,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Mat] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Mat] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param_groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn n_scalars(&self) -> usize {
        self.params.iter().map(Mat::len).sum()
    }

    /// Per-layer loss-free bias states; empty unless that balance mode is on.
    pub fn biases(&self) -> &[BiasState] {
        &self.biases
    }

    /// SHA-256 over parameter names, shapes and little-endian f64 bits.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, p) in self.names.iter().zip(&self.params) {
            h.update(name.as_bytes());
            h.update((p.nrows() as u64).to_le_bytes());
            h.update((p.ncols() as u64).to_le_bytes());
            for v in p.iter() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Applies the loss-free bias rule to each layer's loads from the last step.
    pub fn update_biases(&mut self, layer_loads: &[Vec<usize>]) -> Result<()> {
        if self.biases.is_empty() {
            return Ok(());
        }
        if layer_loads.len() != self.biases.len() {
            return Err(Error::input("one load vector per layer expected"));
        }
        for (b, loads) in self.biases.iter_mut().zip(layer_loads) {
            *b = loss_free_bias_update(b, loads)?;
        }
        Ok(())
    }

    fn validate_batch(&self, batch: &SequenceBatch) -> Result<usize> {
        let b = batch.n_sequences();
        if b == 0 {
            return Err(Error::input("empty batch"));
        }
        let l = batch.seq_len();
        if l == 0 || l > self.config.max_seq_len {
            return Err(Error::input(format!(
                "sequence length {l} outside 1..={}",
                self.config.max_seq_len
            )));
        }
        if batch.tokens.iter().any(|s| s.len() != l) {
            return Err(Error::input("sequences in a batch must share one length"));
        }
        if batch.ratios.len() != b {
            return Err(Error::input(format!("{} ratios for {b} sequences", batch.ratios.len())));
        }
        if let Some(&r) = batch.ratios.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(Error::input(format!("mask ratio {r} outside [0, 1]")));
        }
        let mask = self.config.mask_token_id();
        if let Some(&t) = batch.tokens.iter().flatten().find(|&&t| t > mask) {
            return Err(Error::input(format!("token id {t} exceeds mask id {mask}")));
        }
        if let Some(pos) = &batch.positions {
            if pos.len() != b || pos.iter().any(|p| p.len() != l) {
                return Err(Error::input("position ids do not match token shape"));
            }
            if pos.iter().flatten().any(|&p| p >= self.config.max_seq_len) {
                return Err(Error::input("position id beyond max_seq_len"));
            }
        }
        Ok(l)
    }

    /// Live routing of one sequence's score block.
    fn route_sequence(&self, layer: usize, scores: &ScoreMatrix, ratio: f64) -> Result<(RoutingAssignment, Option<usize>)> {
        match &self.config.routing {
            RoutingConfig::TokenChoice(tc) => Ok((route_tc(scores, tc, self.biases.get(layer))?, None)),
            RoutingConfig::ExpertChoice(ec) => {
                let c = capacity_from_k(ec.k_at(ratio)?, scores.n_tokens(), scores.n_experts());
                Ok((route_ec(scores, &EcConfig { capacity: c })?, Some(c)))
            }
        }
    }

    fn ffn(tape: &mut Tape, x: Var, w: &[Var; 3]) -> Var {
        let a = tape.matmul(x, w[0]);
        let b = tape.matmul(x, w[1]);
        let a = tape.silu(a);
        let h = tape.mul(a, b);
        tape.matmul(h, w[2])
    }

    pub fn forward(&self, tape: &mut Tape, batch: &SequenceBatch, opts: &ForwardOptions<'_>) -> Result<ForwardOutput> {
        let l = self.validate_batch(batch)?;
        let cfg = &self.config;
        let (layout, _) = build_layout(cfg);
        let b = batch.n_sequences();
        let n = b * l;
        let e = cfg.n_experts;
        if let Some(frozen) = opts.frozen {
            if frozen.len() != cfg.n_layers || frozen.iter().any(|s| s.per_sequence.len() != b) {
                return Err(Error::input("frozen selections do not match layers x batch"));
            }
        }

        let pv: Vec<Var> = self.params.iter().map(|p| tape.leaf(p.clone())).collect();
        let ids: Vec<usize> = batch.tokens.iter().flatten().copied().collect();
        let pos: Vec<usize> = match &batch.positions {
            Some(p) => p.iter().flatten().copied().collect(),
            None => (0..b).flat_map(|_| 0..l).collect(),
        };
        let x = tape.embed(pv[layout.tok_emb], &ids);
        let p = tape.embed(pv[layout.pos_emb], &pos);
        let mut h = tape.add(x, p);

        let mut selections = Vec::with_capacity(cfg.n_layers);
        let mut layer_loads = Vec::with_capacity(cfg.n_layers);
        let mut layer_stats = Vec::with_capacity(cfg.n_layers);
        let mut aux_terms = Vec::new();
        let mut realized_pairs = 0u64;
        let mut capacities = Vec::new();
        let mut matches = true;

        for (li, lay) in layout.layers.iter().enumerate() {
            let u = tape.layer_norm(h, pv[lay.ln1.0], pv[lay.ln1.1]);
            let q = tape.matmul(u, pv[lay.wq]);
            let k = tape.matmul(u, pv[lay.wk]);
            let v = tape.matmul(u, pv[lay.wv]);
            let att = tape.attention(q, k, v, cfg.n_heads, l, opts.causal);
            let o = tape.matmul(att, pv[lay.wo]);
            h = tape.add(h, o);

            let u = tape.layer_norm(h, pv[lay.ln2.0], pv[lay.ln2.1]);
            let scores = tape.matmul(u, pv[lay.router]);
            let score_vals = tape.value(scores).clone();
            if score_vals.iter().any(|v| !v.is_finite()) {
                return Err(Error::input(format!("non-finite router scores in layer {li}")));
            }

            let mut selection = LayerSelection::default();
            for (bi, &ratio) in batch.ratios.iter().enumerate() {
                let block = ScoreMatrix::new(score_vals.slice(s![bi * l..(bi + 1) * l, ..]).to_owned())?;
                // Live routing always runs so frozen replays can report divergence.
                let (assignment, c) = self.route_sequence(li, &block, ratio)?;
                if li == 0 {
                    capacities.extend(c);
                }
                let live: Vec<(usize, usize)> = assignment.pairs().iter().map(|p| (p.token, p.expert)).collect();
                let chosen = match opts.frozen {
                    Some(f) => {
                        let c = f[li].per_sequence[bi].clone();
                        if c.iter().any(|&(t, j)| t >= l || j >= e) {
                            return Err(Error::input("frozen pair outside sequence x experts"));
                        }
                        matches &= live == c;
                        c
                    }
                    None => live,
                };
                selection.per_sequence.push(chosen);
            }

            let mut loads = vec![0usize; e];
            let mut covered = vec![false; n];
            let mut mask = Array2::from_elem((n, e), false);
            let mut expert_rows: Vec<Vec<usize>> = vec![Vec::new(); e];
            for (bi, pairs) in selection.per_sequence.iter().enumerate() {
                for &(t, j) in pairs {
                    let row = bi * l + t;
                    loads[j] += 1;
                    covered[row] = true;
                    mask[[row, j]] = true;
                    expert_rows[j].push(row);
                }
            }
            let pairs_here: usize = loads.iter().sum();
            realized_pairs += pairs_here as u64;
            let n_dropped = covered.iter().filter(|c| !**c).count();
            layer_stats.push(stats_from_loads(&loads, n_dropped, n));

            let is_tc = matches!(cfg.routing, RoutingConfig::TokenChoice(_));
            let gates = if is_tc {
                tape.softmax(scores, Some(&mask))
            } else {
                tape.softmax(scores, None)
            };

            if let RoutingConfig::TokenChoice(TcConfig {
                balance: BalanceMode::AuxLoss { alpha },
                ..
            }) = cfg.routing
            {
                // f_j from each token's best surviving expert (constant), P_j differentiable.
                let mut f = vec![0.0; e];
                for row in 0..n {
                    let mut best: Option<usize> = None;
                    for j in 0..e {
                        if mask[[row, j]] && best.is_none_or(|bj| score_vals[[row, j]] > score_vals[[row, bj]]) {
                            best = Some(j);
                        }
                    }
                    if let Some(j) = best {
                        f[j] += 1.0 / n as f64;
                    }
                }
                let probs = tape.softmax(scores, None);
                let w = Array2::from_shape_fn((n, e), |(_, j)| alpha * e as f64 * f[j] / n as f64);
                aux_terms.push(tape.weighted_sum(probs, w));
            }

            let mut terms = Vec::new();
            if !opts.zero_routed {
                let mut parts = Vec::new();
                for (j, rows) in expert_rows.iter_mut().enumerate() {
                    if rows.is_empty() {
                        continue;
                    }
                    rows.sort_unstable();
                    let xj = tape.gather_rows(u, rows);
                    let yj = Self::ffn(tape, xj, &[pv[lay.experts[j][0]], pv[lay.experts[j][1]], pv[lay.experts[j][2]]]);
                    let coords: Vec<(usize, usize)> = rows.iter().map(|&r| (r, j)).collect();
                    let gj = tape.gather_elems(gates, &coords);
                    parts.push((tape.mul_col(yj, gj), rows.clone()));
                }
                terms.push(tape.scatter_add(n, cfg.hidden_dim, parts));
            }
            for sh in &lay.shared {
                terms.push(Self::ffn(tape, u, &[pv[sh[0]], pv[sh[1]], pv[sh[2]]]));
            }
            if !terms.is_empty() {
                let moe = tape.sum(&terms);
                h = tape.add(h, moe);
            }

            layer_loads.push(loads);
            selections.push(selection);
        }

        let hf = tape.layer_norm(h, pv[layout.ln_f.0], pv[layout.ln_f.1]);
        let logits = tape.matmul(hf, pv[layout.out]);
        let aux_loss = if aux_terms.is_empty() {
            None
        } else {
            Some(tape.sum(&aux_terms))
        };
        Ok(ForwardOutput {
            logits,
            params: pv,
            aux_loss,
            selections,
            layer_loads,
            layer_stats,
            realized_pairs,
            capacities,
            selection_matches_live: matches,
        })
    }

    /// Logits as a `B x L x V` array.
    pub fn predict(&self, batch: &SequenceBatch) -> Result<Array3<f64>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, batch, &ForwardOptions::default())?;
        let (b, l) = (batch.n_sequences(), batch.seq_len());
        let logits = tape.value(out.logits).clone();
        Ok(logits
            .into_shape_with_order((b, l, self.config.vocab_size))
            .expect("logits are (B*L) x V"))
    }

    /// Same weights, expert-choice selection. Capacity follows the TC top-k
    /// (`c = round(k N / E)`) unless a schedule is given.
    pub fn retrofit_router(&self, schedule: Option<CapacitySchedule>) -> Result<Model> {
        let tc = match &self.config.routing {
            RoutingConfig::TokenChoice(tc) => *tc,
            RoutingConfig::ExpertChoice(_) => {
                return Err(Error::input("retrofit needs a token-choice model"));
            }
        };
        let routing = match schedule {
            Some(s) => EcRouting::scheduled(s),
            None => EcRouting::fixed(tc.k as f64),
        };
        let config = ModelConfig {
            routing: RoutingConfig::ExpertChoice(routing),
            ..self.config
        };
        Model::from_parts(config, self.params.clone(), None)
    }
}

/// Mean cross-entropy of `logits` rows against `(row, class)` targets.
pub fn masked_ce_loss(logits: &Mat, targets: &[(usize, usize)]) -> Result<f64> {
    if targets.is_empty() {
        return Err(Error::UndefinedLoss("no masked positions".into()));
    }
    let mut total = 0.0;
    for &(row, class) in targets {
        if row >= logits.nrows() || class >= logits.ncols() {
            return Err(Error::input(format!("target ({row}, {class}) outside logits")));
        }
        total += token_nll(logits.row(row).iter().copied(), logits[[row, class]]);
    }
    Ok(total / targets.len() as f64)
}

/// `-log softmax(row)[target]` via log-sum-exp.
pub(crate) fn token_nll(row: impl Iterator<Item = f64> + Clone, target_logit: f64) -> f64 {
    let max = row.clone().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.map(|v| (v - max).exp()).sum::<f64>().ln();
    lse - target_logit
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scheduler::SchedulerKind;

    fn small(routing: RoutingConfig) -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            hidden_dim: 16,
            n_heads: 2,
            n_experts: 4,
            expert_ffn_dim: 8,
            n_shared_experts: 1,
            shared_ffn_dim: 8,
            vocab_size: 10,
            max_seq_len: 12,
            init_std: 0.3,
            routing,
        }
    }

    fn batch(b: usize, l: usize, seed: usize) -> SequenceBatch {
        let tokens = (0..b)
            .map(|i| (0..l).map(|t| (i * 7 + t * 3 + seed) % 11).collect())
            .collect();
        SequenceBatch::new(tokens, (0..b).map(|i| (i as f64 + 0.5) / b as f64).collect())
    }

    #[test]
    fn shapes_and_validation() {
        let m = Model::new(small(RoutingConfig::TokenChoice(TcConfig::dropless(2))), 1).unwrap();
        let logits = m.predict(&batch(3, 12, 0)).unwrap();
        assert_eq!(logits.dim(), (3, 12, 10));
        assert!(m.predict(&batch(1, 13, 0)).is_err());
        let mut bad = batch(2, 5, 0);
        bad.tokens[1].pop();
        assert!(matches!(m.predict(&bad), Err(Error::InvalidInput(_))));
        let bad_cfg = ModelConfig { n_heads: 3, ..small(RoutingConfig::TokenChoice(TcConfig::dropless(2))) };
        assert!(Model::new(bad_cfg, 0).is_err());
    }

    #[test]
    fn scheduled_ec_capacity_at_full_mask() {
        let sched = CapacitySchedule::new(SchedulerKind::LinearReverse, 1.0, 3.0).unwrap();
        let m = Model::new(small(RoutingConfig::ExpertChoice(EcRouting::scheduled(sched))), 2).unwrap();
        let mut bt = batch(2, 12, 1);
        bt.ratios = vec![1.0, 0.0];
        let mut tape = Tape::new();
        let out = m.forward(&mut tape, &bt, &ForwardOptions::default()).unwrap();
        assert_eq!(out.capacities, vec![capacity_from_k(1.0, 12, 4), capacity_from_k(3.0, 12, 4)]);
        for sel in &out.selections {
            for j in 0..4 {
                assert_eq!(sel.per_sequence[0].iter().filter(|p| p.1 == j).count(), 3);
                assert_eq!(sel.per_sequence[1].iter().filter(|p| p.1 == j).count(), 9);
            }
        }
        assert_eq!(out.realized_pairs, 2 * (12 + 36));
    }

    #[test]
    fn bidirectional_attention() {
        let m = Model::new(small(RoutingConfig::ExpertChoice(EcRouting::fixed(2.0))), 3).unwrap();
        let bt = batch(1, 8, 2);
        let mut t1 = Tape::new();
        let a = m.forward(&mut t1, &bt, &ForwardOptions::default()).unwrap();
        let mut t2 = Tape::new();
        let c = m
            .forward(&mut t2, &bt, &ForwardOptions { causal: true, ..Default::default() })
            .unwrap();
        let diff = (t1.value(a.logits).row(0).to_owned() - t2.value(c.logits).row(0)).mapv(f64::abs);
        assert!(diff.iter().cloned().fold(0.0, f64::max) > 1e-6);
    }

    #[test]
    fn shared_expert_carries_signal() {
        let m = Model::new(small(RoutingConfig::TokenChoice(TcConfig::dropless(1))), 4).unwrap();
        let opts = ForwardOptions { zero_routed: true, ..Default::default() };
        let run = |bt: &SequenceBatch| {
            let mut t = Tape::new();
            let o = m.forward(&mut t, bt, &opts).unwrap();
            t.value(o.logits).clone()
        };
        let a = run(&batch(1, 6, 0));
        let b = run(&batch(1, 6, 5));
        assert!(a.iter().all(|v| v.is_finite()));
        assert!((&a - &b).iter().any(|v| v.abs() > 1e-9));
    }

    #[test]
    fn frozen_replay_matches() {
        let m = Model::new(small(RoutingConfig::TokenChoice(TcConfig::bounded(2, 1.0))), 5).unwrap();
        let bt = batch(2, 10, 3);
        let mut t1 = Tape::new();
        let live = m.forward(&mut t1, &bt, &ForwardOptions::default()).unwrap();
        let mut t2 = Tape::new();
        let replay = m
            .forward(&mut t2, &bt, &ForwardOptions { frozen: Some(&live.selections), ..Default::default() })
            .unwrap();
        assert!(replay.selection_matches_live);
        assert_eq!(t1.value(live.logits), t2.value(replay.logits));
    }

    #[test]
    fn retrofit_keeps_weights() {
        let m = Model::new(small(RoutingConfig::TokenChoice(TcConfig::dropless(2))), 6).unwrap();
        let r = m.retrofit_router(None).unwrap();
        assert_eq!(m.checksum(), r.checksum());
        assert_eq!(r.config().routing, RoutingConfig::ExpertChoice(EcRouting::fixed(2.0)));
        assert!(r.retrofit_router(None).is_err());
    }

    #[test]
    fn ce_loss_cases() {
        let uniform = Mat::zeros((2, 5));
        assert!((masked_ce_loss(&uniform, &[(0, 1), (1, 4)]).unwrap() - 5f64.ln()).abs() < 1e-12);
        let mut sharp = Mat::zeros((1, 3));
        sharp[[0, 2]] = 60.0;
        assert!(masked_ce_loss(&sharp, &[(0, 2)]).unwrap() < 1e-20);
        assert!(matches!(masked_ce_loss(&uniform, &[]), Err(Error::UndefinedLoss(_))));
    }
}
