//! Zero-computation-expert routing.
//!
//! Expert indices `0..n_ffn` are FFN experts and `n_ffn..n_ffn + n_zero` are
//! zero-computation (identity) experts. Selection ranks `R(x) + b` while the
//! gates are the unbiased router probabilities `R(x)`.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Threshold below which the LB-to-LM gradient ratio is considered healthy.
pub const RG_GUIDELINE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RouterConfig {
    pub n_ffn: usize,
    pub n_zero: usize,
    pub top_k: usize,
    pub expected_ffn: usize,
    /// Bias adaptation rate.
    pub mu: f64,
    /// Multiplicative decay of `mu` per bias update.
    pub mu_decay: f64,
    /// Apply the bias update once every this many batches.
    #[serde(default = "one")]
    pub update_every: usize,
    /// Renormalize the selected gates to sum to one.
    #[serde(default)]
    pub renormalize_gates: bool,
}

fn one() -> usize {
    1
}

impl RouterConfig {
    pub fn n_experts(&self) -> usize {
        self.n_ffn + self.n_zero
    }

    pub fn validate(&self) -> Result<()> {
        let e = self.n_experts();
        if self.n_ffn == 0 {
            return Err(Error::Config("router needs at least one FFN expert".into()));
        }
        if self.top_k == 0 || self.top_k > e {
            return Err(Error::Config(format!("top_k {} must be in 1..={e}", self.top_k)));
        }
        if self.n_zero == 0 {
            if self.expected_ffn != self.top_k {
                return Err(Error::Config("without zero-computation experts expected_ffn must equal top_k".into()));
            }
        } else {
            if self.expected_ffn == 0 || self.expected_ffn >= self.top_k {
                return Err(Error::Config(format!(
                    "need 1 <= expected_ffn ({}) < top_k ({})",
                    self.expected_ffn, self.top_k
                )));
            }
            if self.n_zero < self.top_k - self.expected_ffn {
                return Err(Error::Config(format!(
                    "{} zero experts cannot absorb top_k - expected_ffn = {}",
                    self.n_zero,
                    self.top_k - self.expected_ffn
                )));
            }
        }
        if self.expected_ffn > self.n_ffn {
            return Err(Error::Config("expected_ffn exceeds the FFN expert count".into()));
        }
        if !(self.mu >= 0.0) || !(self.mu_decay > 0.0 && self.mu_decay <= 1.0) {
            return Err(Error::Config("need mu >= 0 and 0 < mu_decay <= 1".into()));
        }
        if self.update_every == 0 {
            return Err(Error::Config("update_every must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-layer controller state: expert biases, adaptation rate and the
/// routed-token counters of the current global batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterState {
    pub config: RouterConfig,
    pub bias: Vec<f64>,
    pub mu: f64,
    pub counters: Vec<u64>,
    pub tokens: u64,
    batches_pending: usize,
}

impl RouterState {
    pub fn new(config: RouterConfig) -> Result<Self> {
        config.validate()?;
        let e = config.n_experts();
        Ok(Self { mu: config.mu, bias: vec![0.0; e], counters: vec![0; e], tokens: 0, batches_pending: 0, config })
    }

    pub fn is_zero_expert(&self, e: usize) -> bool {
        e >= self.config.n_ffn
    }

    /// Sets an FFN expert's bias. Zero-expert biases are pinned at 0.
    pub fn set_bias(&mut self, e: usize, value: f64) -> Result<()> {
        if self.is_zero_expert(e) {
            return Err(Error::State(format!("expert {e} is a zero-computation expert")));
        }
        self.bias[e] = value;
        Ok(())
    }

    pub fn observe(&mut self, decision: &RoutingDecision) {
        for experts in &decision.experts {
            for &e in experts {
                self.counters[e] += 1;
            }
        }
        self.tokens += decision.experts.len() as u64;
    }

    /// Applies the bias increment for a global batch of `t_all` tokens and
    /// resets the counters. Returns the increment.
    pub fn bias_update(&mut self, t_all: u64) -> Result<Vec<f64>> {
        if t_all == 0 {
            return Err(Error::EmptyBatch("bias update over zero tokens".into()));
        }
        let k = self.config.top_k as f64;
        let routed: u64 = self.counters.iter().sum();
        if routed != self.config.top_k as u64 * t_all {
            return Err(Error::State(format!(
                "{routed} routed slots, expected top_k * T_all = {}",
                self.config.top_k as u64 * t_all
            )));
        }
        let n = self.config.n_ffn as f64;
        let target = self.config.expected_ffn as f64 / (k * n);
        let delta: Vec<f64> = self
            .counters
            .iter()
            .enumerate()
            .map(
                |(i, &ti)| {
                    if self.is_zero_expert(i) {
                        0.0
                    } else {
                        self.mu * (target - ti as f64 / (k * t_all as f64))
                    }
                },
            )
            .collect();
        for (b, d) in self.bias.iter_mut().zip(&delta) {
            *b += d;
        }
        self.mu *= self.config.mu_decay;
        self.counters.fill(0);
        self.tokens = 0;
        Ok(delta)
    }

    /// Marks the end of a batch; applies the update every `update_every`
    /// batches.
    pub fn end_batch(&mut self) -> Result<Option<Vec<f64>>> {
        self.batches_pending += 1;
        if self.batches_pending < self.config.update_every {
            return Ok(None);
        }
        self.batches_pending = 0;
        let t = self.tokens;
        self.bias_update(t).map(Some)
    }
}

/// Per-token top-K selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    /// Selected experts per token, in rank order.
    pub experts: Vec<Vec<usize>>,
    /// Gate per selected expert.
    pub gates: Vec<Vec<f64>>,
    pub n_ffn: usize,
}

impl RoutingDecision {
    pub fn tokens(&self) -> usize {
        self.experts.len()
    }

    pub fn ffn_count(&self, t: usize) -> usize {
        self.experts[t].iter().filter(|&&e| e < self.n_ffn).count()
    }

    pub fn ffn_counts(&self) -> Vec<usize> {
        (0..self.tokens()).map(|t| self.ffn_count(t)).collect()
    }

    /// Mean and population standard deviation of activated FFN experts.
    pub fn ffn_stats(&self) -> (f64, f64) {
        mean_std(&self.ffn_counts().iter().map(|&c| c as f64).collect::<Vec<_>>())
    }

    /// Rows of `slot`-major `(token, slot)` pairs routed to expert `e`.
    pub fn assignments(&self, e: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (t, experts) in self.experts.iter().enumerate() {
            for (s, &x) in experts.iter().enumerate() {
                if x == e {
                    out.push((t, s));
                }
            }
        }
        out
    }
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let m = xs.iter().fold(0.0, |a, &b| a + b) / n;
    let v = xs.iter().fold(0.0, |a, &b| a + (b - m) * (b - m)) / n;
    (m, v.sqrt())
}

/// Router probabilities `softmax(x · W_r)` for `x: [T, d]`, `W_r: [d, E]`.
pub fn router_probs(x: &Tensor, w_r: &Tensor) -> Result<Tensor> {
    Ok(x.matmul(w_r)?.softmax_rows())
}

/// Top-K of `probs + bias` per row with ties broken by lowest index; gates
/// are the unbiased probabilities (optionally renormalized).
pub fn route_topk(probs: &Tensor, state: &RouterState) -> Result<RoutingDecision> {
    let cfg = &state.config;
    let e = cfg.n_experts();
    if cfg.top_k > e {
        return Err(Error::Config(format!("top_k {} exceeds {e} experts", cfg.top_k)));
    }
    if probs.cols() != e {
        return Err(Error::Dimension(format!("router output has {} columns, expected {e}", probs.cols())));
    }
    let mut experts = Vec::with_capacity(probs.rows());
    let mut gates = Vec::with_capacity(probs.rows());
    let mut taken = vec![false; e];
    for t in 0..probs.rows() {
        let row = probs.row(t);
        taken.fill(false);
        let mut sel = Vec::with_capacity(cfg.top_k);
        for _ in 0..cfg.top_k {
            let mut best: Option<(usize, f64)> = None;
            for (i, &p) in row.iter().enumerate() {
                if taken[i] {
                    continue;
                }
                let score = p + state.bias[i];
                if best.is_none_or(|(_, s)| score > s) {
                    best = Some((i, score));
                }
            }
            let (i, _) = best.expect("top_k <= experts");
            taken[i] = true;
            sel.push(i);
        }
        let mut g: Vec<f64> = sel.iter().map(|&i| row[i]).collect();
        if cfg.renormalize_gates {
            let s = g.iter().fold(0.0, |a, &b| a + b);
            for x in &mut g {
                *x /= s;
            }
        }
        experts.push(sel);
        gates.push(g);
    }
    Ok(RoutingDecision { experts, gates, n_ffn: cfg.n_ffn })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LbLossConfig {
    /// Balance factor.
    pub alpha: f64,
    /// Number of FFN expert groups.
    pub groups: usize,
}

impl LbLossConfig {
    pub fn validate(&self, n_ffn: usize) -> Result<()> {
        if self.groups == 0 || !n_ffn.is_multiple_of(self.groups) {
            return Err(Error::Config(format!("{} expert groups do not divide {n_ffn} FFN experts", self.groups)));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::Config("alpha must be >= 0".into()));
        }
        Ok(())
    }
}

/// Selection frequencies `f_j` (FFN groups, then the zero group when present)
/// and the resulting per-entry weights `α f_{group(i)} / T`, so that the loss
/// is `Σ_{t,i} w[t,i] · R(x_t)_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct LbTerms {
    pub frequencies: Vec<f64>,
    pub weights: Tensor,
}

/// Group of expert `i`: FFN groups `0..D`, zero group `D`.
fn group_of(i: usize, n_ffn: usize, group_size: usize, groups: usize) -> usize {
    if i < n_ffn {
        i / group_size
    } else {
        groups
    }
}

pub fn lb_terms(decision: &RoutingDecision, router: &RouterConfig, cfg: &LbLossConfig) -> Result<LbTerms> {
    cfg.validate(router.n_ffn)?;
    let t = decision.tokens();
    if t == 0 {
        return Err(Error::EmptyBatch("load-balance loss over zero tokens".into()));
    }
    let d = cfg.groups;
    let g = router.n_ffn / d;
    let e = router.n_experts();
    let mut counts = vec![0usize; d + 1];
    for experts in &decision.experts {
        for &x in experts {
            counts[group_of(x, router.n_ffn, g, d)] += 1;
        }
    }
    let tf = t as f64;
    let mut f: Vec<f64> =
        counts[..d].iter().map(|&c| d as f64 / (router.expected_ffn as f64 * tf) * c as f64).collect();
    if router.n_zero > 0 {
        let slack = (router.top_k - router.expected_ffn) as f64;
        f.push(counts[d] as f64 / (slack * tf));
    }
    let mut weights = Tensor::zeros(&[t, e]);
    for row in weights.data_mut().chunks_mut(e) {
        for (i, w) in row.iter_mut().enumerate() {
            let j = group_of(i, router.n_ffn, g, d);
            *w = f.get(j).map_or(0.0, |fj| cfg.alpha * fj / tf);
        }
    }
    Ok(LbTerms { frequencies: f, weights })
}

/// Device-level load-balance loss on the graph, differentiable w.r.t. `probs`.
pub fn lb_loss(
    g: &Graph,
    probs: Var,
    decision: &RoutingDecision,
    router: &RouterConfig,
    cfg: &LbLossConfig,
) -> Result<Var> {
    let terms = lb_terms(decision, router, cfg)?;
    g.weighted_sum(probs, terms.weights)
}

/// Plain-value load-balance loss.
pub fn lb_loss_value(
    probs: &Tensor,
    decision: &RoutingDecision,
    router: &RouterConfig,
    cfg: &LbLossConfig,
) -> Result<f64> {
    let terms = lb_terms(decision, router, cfg)?;
    if probs.shape() != terms.weights.shape() {
        return Err(Error::Dimension("probabilities do not match the routing decision".into()));
    }
    Ok(crate::diffcore::tensor::dot(probs.data(), terms.weights.data()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Similarity {
    pub value: f64,
    /// Expert vectors with zero norm left out of the average.
    pub excluded: usize,
}

/// Mean pairwise cosine similarity of expert weight vectors, the columns of
/// `w_r: [d, E]`.
pub fn router_similarity(w_r: &Tensor) -> Result<Similarity> {
    let (d, e) = w_r.dims2()?;
    if e < 2 {
        return Err(Error::Parameter("router similarity needs at least two experts".into()));
    }
    let cols: Vec<Vec<f64>> = (0..e).map(|j| (0..d).map(|i| w_r.at(i, j)).collect()).collect();
    let norms: Vec<f64> = cols.iter().map(|c| crate::diffcore::tensor::dot(c, c).sqrt()).collect();
    let valid: Vec<usize> = (0..e).filter(|&j| norms[j] > 0.0).collect();
    let excluded = e - valid.len();
    if valid.len() < 2 {
        return Err(Error::Parameter(format!("{excluded} of {e} expert vectors have zero norm")));
    }
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for (a, &i) in valid.iter().enumerate() {
        for &j in &valid[a + 1..] {
            sum += crate::diffcore::tensor::dot(&cols[i], &cols[j]) / (norms[i] * norms[j]);
            pairs += 1;
        }
    }
    Ok(Similarity { value: sum / pairs as f64, excluded })
}

/// Gradient w.r.t. the batch-mean probability vector from a per-token
/// gradient `[T, E]`: since `P̄ = mean_t p_t`, it is the column sum.
pub fn mean_prob_gradient(grad_probs: &Tensor) -> Vec<f64> {
    let e = grad_probs.cols();
    let mut out = vec![0.0; e];
    for row in grad_probs.data().chunks(e) {
        for (o, &g) in out.iter_mut().zip(row) {
            *o += g;
        }
    }
    out
}

/// Gradient of the unscaled load-balance loss w.r.t. `P̄`: `f_{group(i)}`.
pub fn lb_mean_prob_gradient(terms: &LbTerms, alpha: f64) -> Vec<f64> {
    let mut g = mean_prob_gradient(&terms.weights);
    if alpha > 0.0 {
        for x in &mut g {
            *x /= alpha;
        }
    }
    g
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradNormRatio {
    pub value: f64,
    /// Raised when the ratio reaches [`RG_GUIDELINE`].
    pub above_guideline: bool,
}

/// `‖α ∇L_LB‖₂ / ‖∇L_LM‖₂` on the batch-mean probability vector.
pub fn grad_norm_ratio(lb_grad: &[f64], lm_grad: &[f64], alpha: f64) -> Result<GradNormRatio> {
    if lb_grad.len() != lm_grad.len() {
        return Err(Error::Dimension("gradient lengths differ".into()));
    }
    let lm = lm_grad.iter().fold(0.0, |a, &b| a + b * b).sqrt();
    if lm == 0.0 {
        return Err(Error::UndefinedRatio("LM gradient norm is zero".into()));
    }
    let lb = lb_grad.iter().fold(0.0, |a, &b| a + (alpha * b) * (alpha * b)).sqrt();
    let value = lb / lm;
    Ok(GradNormRatio { value, above_guideline: value >= RG_GUIDELINE })
}

/// Exponential moving average of a per-batch statistic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ema {
    pub decay: f64,
    pub value: Option<f64>,
}

impl Ema {
    pub fn new(decay: f64) -> Self {
        Self { decay, value: None }
    }

    pub fn update(&mut self, x: f64) -> f64 {
        let v = match self.value {
            None => x,
            Some(prev) => self.decay * prev + (1.0 - self.decay) * x,
        };
        self.value = Some(v);
        v
    }
}
