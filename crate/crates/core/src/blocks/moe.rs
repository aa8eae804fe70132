//! Fine-grained expert bank with zero-computation experts.

use serde::{Deserialize, Serialize};

use super::{value, Bound, Ffn, InitScheme};
use crate::diffcore::{Graph, ParamClass, ParamId, ParamStore, RngState, Tensor, Var};
use crate::error::{Error, Result};
use crate::router::{route_topk, RouterConfig, RouterState, RoutingDecision};

/// How the variance-compensation factor is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GammaMode {
    /// `γ = m` on the FFN-expert contributions only.
    #[default]
    Compensated,
    /// `γ = m` on the whole sum, identity passthrough included.
    FullSum,
    /// `γ = 1`.
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MoeConfig {
    /// Fine-grained FFN experts (`m` times the unsegmented count).
    pub n_ffn: usize,
    pub n_zero: usize,
    pub top_k: usize,
    pub expected_ffn: usize,
    /// Intermediate width of one fine-grained expert.
    pub expert_inter: usize,
    pub segmentation: usize,
    #[serde(default)]
    pub gamma: GammaMode,
    #[serde(default)]
    pub renormalize_gates: bool,
}

impl MoeConfig {
    pub fn router_config(&self, mu: f64, mu_decay: f64, update_every: usize) -> RouterConfig {
        RouterConfig {
            n_ffn: self.n_ffn,
            n_zero: self.n_zero,
            top_k: self.top_k,
            expected_ffn: self.expected_ffn,
            mu,
            mu_decay,
            update_every,
            renormalize_gates: self.renormalize_gates,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.router_config(0.0, 1.0, 1).validate()?;
        if self.expert_inter == 0 {
            return Err(Error::Config("expert_inter must be positive".into()));
        }
        variance_gamma(self.segmentation).map_err(|e| Error::Config(e.to_string()))?;
        if !self.n_ffn.is_multiple_of(self.segmentation) {
            return Err(Error::Config(format!(
                "{} FFN experts are not a multiple of segmentation {}",
                self.n_ffn, self.segmentation
            )));
        }
        Ok(())
    }

    pub fn n_experts(&self) -> usize {
        self.n_ffn + self.n_zero
    }
}

/// `γ = sqrt(m · m) = m`.
pub fn variance_gamma(m: usize) -> Result<f64> {
    if m < 1 {
        return Err(Error::Parameter("segmentation factor must be >= 1".into()));
    }
    Ok(((m * m) as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertBank {
    pub experts: Vec<Ffn>,
    pub n_zero: usize,
    pub segmentation: usize,
    pub gamma: f64,
    pub gamma_on_identity: bool,
}

impl ExpertBank {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut RngState,
        init: &InitScheme,
        prefix: &str,
        d_model: usize,
        config: &MoeConfig,
    ) -> Result<Self> {
        let experts = (0..config.n_ffn)
            .map(|i| Ffn::init(store, rng, init, &format!("{prefix}.experts.{i}"), d_model, config.expert_inter))
            .collect::<Result<Vec<_>>>()?;
        let gamma = match config.gamma {
            GammaMode::Off => 1.0,
            _ => variance_gamma(config.segmentation)?,
        };
        Ok(Self {
            experts,
            n_zero: config.n_zero,
            segmentation: config.segmentation,
            gamma,
            gamma_on_identity: config.gamma == GammaMode::FullSum,
        })
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len() + self.n_zero
    }
}

/// Routed mixture `γ Σ_{FFN} g_i E_i(x) + Σ_{zero} g_i x` for `x: [T, d]`.
///
/// Gates are read from `probs: [T, E]` at the selected entries so they stay
/// differentiable; `probs` may be a constant for fixed gates.
pub fn moe_forward(
    g: &Graph,
    p: &Bound,
    x: Var,
    probs: Var,
    decision: &RoutingDecision,
    bank: &ExpertBank,
    renormalize: bool,
) -> Result<Var> {
    let shape = g.shape(x);
    let t = shape[0];
    let n_ffn = bank.experts.len();
    let e_total = bank.n_experts();
    if decision.tokens() != t {
        return Err(Error::Routing(format!("decision covers {} tokens, batch has {t}", decision.tokens())));
    }
    if decision.n_ffn != n_ffn {
        return Err(Error::Routing(format!("decision for {} FFN experts, bank has {n_ffn}", decision.n_ffn)));
    }
    if g.shape(probs) != [t, e_total] {
        return Err(Error::Dimension(format!("router probabilities {:?} for [{t}, {e_total}]", g.shape(probs))));
    }
    let mut rows: Vec<Vec<usize>> = vec![Vec::new(); e_total];
    for (tok, experts) in decision.experts.iter().enumerate() {
        for &e in experts {
            if e >= e_total {
                return Err(Error::Routing(format!("expert {e} out of range for {e_total} experts")));
            }
            rows[e].push(tok);
        }
    }
    let norm = if renormalize {
        let all: Vec<(usize, usize)> =
            decision.experts.iter().enumerate().flat_map(|(tok, es)| es.iter().map(move |&e| (tok, e))).collect();
        let tokens: Vec<usize> = all.iter().map(|&(tok, _)| tok).collect();
        let picked = g.pick(probs, &all)?;
        Some(g.recip(g.scatter_rows(picked, &tokens, t)?))
    } else {
        None
    };
    let gate = |pairs: &[(usize, usize)], toks: &[usize]| -> Result<Var> {
        let raw = g.pick(probs, pairs)?;
        match norm {
            Some(n) => g.mul(raw, g.gather_rows(n, toks)?),
            None => Ok(raw),
        }
    };

    let mut ffn_sum: Option<Var> = None;
    for (e, expert) in bank.experts.iter().enumerate() {
        let toks = &rows[e];
        if toks.is_empty() {
            continue;
        }
        let pairs: Vec<(usize, usize)> = toks.iter().map(|&tok| (tok, e)).collect();
        let y = expert.forward(g, p, g.gather_rows(x, toks)?)?;
        let contrib = g.scatter_rows(g.mul_col(y, gate(&pairs, toks)?)?, toks, t)?;
        ffn_sum = Some(match ffn_sum {
            Some(s) => g.add(s, contrib)?,
            None => contrib,
        });
    }
    let zero_pairs: Vec<(usize, usize)> =
        (n_ffn..e_total).flat_map(|e| rows[e].iter().map(move |&tok| (tok, e))).collect();
    let identity = if zero_pairs.is_empty() {
        None
    } else {
        let toks: Vec<usize> = zero_pairs.iter().map(|&(tok, _)| tok).collect();
        let gsum = g.scatter_rows(gate(&zero_pairs, &toks)?, &toks, t)?;
        Some(g.mul_col(x, gsum)?)
    };

    let gamma = bank.gamma;
    let out = match (ffn_sum, identity) {
        (Some(f), Some(i)) if bank.gamma_on_identity => g.scale(g.add(f, i)?, gamma),
        (Some(f), Some(i)) => g.add(g.scale(f, gamma), i)?,
        (Some(f), None) => g.scale(f, gamma),
        (None, Some(i)) if bank.gamma_on_identity => g.scale(i, gamma),
        (None, Some(i)) => i,
        (None, None) => g.constant(Tensor::zeros(&shape)),
    };
    Ok(out)
}

/// Where a layer's routing decision comes from.
#[derive(Debug, Clone, Copy)]
pub enum LayerRoute<'a> {
    /// Top-K under the controller's current biases.
    Live(&'a RouterState),
    /// A previously recorded decision, e.g. to keep selections fixed under
    /// finite-difference perturbations.
    Frozen(&'a RoutingDecision),
}

#[derive(Debug, Clone)]
pub struct LayerRouting {
    pub probs: Var,
    pub decision: RoutingDecision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoeBlock {
    pub config: MoeConfig,
    /// Router weights `[d_model, E]`.
    pub w_r: ParamId,
    pub bank: ExpertBank,
}

impl MoeBlock {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut RngState,
        init: &InitScheme,
        prefix: &str,
        d_model: usize,
        config: MoeConfig,
    ) -> Result<Self> {
        config.validate()?;
        let shape = [d_model, config.n_experts()];
        let w_r = init.add_with_variance(
            store,
            rng,
            format!("{prefix}.router"),
            &shape,
            ParamClass::Hidden,
            init.router_var,
        )?;
        let bank = ExpertBank::init(store, rng, init, prefix, d_model, &config)?;
        Ok(Self { config, w_r, bank })
    }

    pub fn forward(&self, g: &Graph, p: &Bound, x: Var, route: LayerRoute<'_>) -> Result<(Var, LayerRouting)> {
        let probs = g.softmax_rows(g.matmul(x, p.var(self.w_r))?);
        let decision = match route {
            LayerRoute::Live(state) => route_topk(&value(g, probs), state)?,
            LayerRoute::Frozen(d) => d.clone(),
        };
        let out = moe_forward(g, p, x, probs, &decision, &self.bank, self.config.renormalize_gates)?;
        Ok((out, LayerRouting { probs, decision }))
    }
}
