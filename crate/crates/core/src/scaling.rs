//! Width transfer of per-class hyperparameters and depth growth by stacking.

use serde::{Deserialize, Serialize};

use crate::blocks::{InitScheme, Model, ModelConfig};
use crate::diffcore::{ParamClass, ParamStore};
use crate::error::{Error, Result};
use crate::router::RouterState;
use crate::stability::{AdamState, PerClass};

/// Initialization variance and learning rate per parameter class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HParams {
    pub init_var: PerClass,
    pub lr: PerClass,
}

/// Class rule: embedding unchanged, hidden and unembedding divided by `s`.
pub fn transfer_factor(class: ParamClass, s: f64) -> f64 {
    match class {
        ParamClass::Embedding => 1.0,
        ParamClass::Hidden | ParamClass::Unembedding => s,
    }
}

fn check_factor(s: f64) -> Result<()> {
    if !(s > 0.0 && s.is_finite()) {
        return Err(Error::Parameter(format!("width factor must be > 0, got {s}")));
    }
    Ok(())
}

fn transfer_class(v: &PerClass, s: f64) -> PerClass {
    PerClass {
        embedding: v.embedding / transfer_factor(ParamClass::Embedding, s),
        hidden: v.hidden / transfer_factor(ParamClass::Hidden, s),
        unembedding: v.unembedding / transfer_factor(ParamClass::Unembedding, s),
    }
}

/// Maps proxy `(σ², η)` to a model `s` times wider.
pub fn transfer_hparams(proxy: &HParams, s: f64) -> Result<HParams> {
    check_factor(s)?;
    Ok(HParams { init_var: transfer_class(&proxy.init_var, s), lr: transfer_class(&proxy.lr, s) })
}

pub fn transfer_init(init: &InitScheme, s: f64) -> Result<InitScheme> {
    check_factor(s)?;
    Ok(InitScheme {
        distribution: init.distribution,
        embedding_var: init.embedding_var,
        hidden_var: init.hidden_var / s,
        unembedding_var: init.unembedding_var / s,
        router_var: init.router_var / s,
    })
}

fn scale_dim(name: &str, d: usize, s: f64) -> Result<usize> {
    let x = d as f64 * s;
    if x.fract() != 0.0 || x < 1.0 {
        return Err(Error::Parameter(format!("{name} = {d} scaled by {s} is not a positive integer")));
    }
    Ok(x as usize)
}

/// Widens every width dimension by `s` (head dimensions stay, the head
/// count scales) and transfers the init variances. Depth, expert counts and
/// routing are copied unchanged.
pub fn transfer_model_config(proxy: &ModelConfig, s: f64) -> Result<ModelConfig> {
    check_factor(s)?;
    let mut c = proxy.clone();
    c.d_model = scale_dim("d_model", proxy.d_model, s)?;
    c.dense_inter = scale_dim("dense_inter", proxy.dense_inter, s)?;
    c.attention.d_q = scale_dim("d_q", proxy.attention.d_q, s)?;
    c.attention.d_kv = scale_dim("d_kv", proxy.attention.d_kv, s)?;
    c.attention.heads = scale_dim("heads", proxy.attention.heads, s)?;
    c.moe.expert_inter = scale_dim("expert_inter", proxy.moe.expert_inter, s)?;
    c.init = transfer_init(&proxy.init, s)?;
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MomentPolicy {
    #[default]
    Reset,
    Duplicate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BiasPolicy {
    #[default]
    Duplicate,
    Reset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrowthPlan {
    /// Copies of the source layer stack.
    pub rate: usize,
    #[serde(default)]
    pub moments: MomentPolicy,
    #[serde(default)]
    pub bias: BiasPolicy,
}

impl GrowthPlan {
    pub fn new(rate: usize) -> Self {
        Self { rate, moments: MomentPolicy::Reset, bias: BiasPolicy::Duplicate }
    }

    fn validate(&self) -> Result<()> {
        if self.rate < 1 {
            return Err(Error::Parameter("growth rate must be >= 1".into()));
        }
        Ok(())
    }
}

/// Source name for a parameter of the grown model.
fn source_name(name: &str, n_layers: usize) -> String {
    if let Some(rest) = name.strip_prefix("layers.") {
        if let Some((idx, tail)) = rest.split_once('.') {
            if let Ok(i) = idx.parse::<usize>() {
                return format!("layers.{}.{tail}", i % n_layers);
            }
        }
    }
    name.to_string()
}

fn copy_by_name<T: Clone>(
    target: &ParamStore,
    source: &ParamStore,
    n_layers: usize,
    src_values: &[T],
) -> Result<Vec<T>> {
    target
        .iter()
        .map(|p| {
            let name = source_name(&p.name, n_layers);
            let id = source.find(&name).ok_or_else(|| Error::State(format!("source has no parameter {name}")))?;
            Ok(src_values[id.0].clone())
        })
        .collect()
}

/// Stacks `rate` copies of the layer sequence: `[l1..ln, l1..ln, ...]`.
/// Embedding, unembedding and the MTP head are carried over once.
pub fn stack_grow(model: &Model, plan: &GrowthPlan) -> Result<Model> {
    plan.validate()?;
    let n = model.layers.len();
    let mut cfg = model.config.clone();
    cfg.n_layers = n * plan.rate;
    let mut grown = Model::new(cfg, 0)?;
    let values: Vec<_> = model.store.iter().map(|p| p.value.clone()).collect();
    let copied = copy_by_name(&grown.store, &model.store, n, &values)?;
    for (p, v) in grown.store.iter_mut().zip(copied) {
        p.value = v;
    }
    Ok(grown)
}

/// Router controllers for the grown stack.
pub fn grow_routers(routers: &[RouterState], plan: &GrowthPlan) -> Result<Vec<RouterState>> {
    plan.validate()?;
    let mut out = Vec::with_capacity(routers.len() * plan.rate);
    for _ in 0..plan.rate {
        for r in routers {
            let mut r = r.clone();
            if plan.bias == BiasPolicy::Reset {
                r.bias.fill(0.0);
            }
            out.push(r);
        }
    }
    Ok(out)
}

/// Optimizer state for the grown model; the step counter is kept so the
/// learning-rate schedule continues where it was.
pub fn grow_optimizer(source: &Model, grown: &Model, adam: &AdamState, plan: &GrowthPlan) -> Result<AdamState> {
    plan.validate()?;
    let n = source.layers.len();
    let mut next = AdamState::new(&grown.store, adam.config)?;
    next.step = adam.step;
    if plan.moments == MomentPolicy::Duplicate {
        next.m = copy_by_name(&grown.store, &source.store, n, &adam.m)?;
        next.v = copy_by_name(&grown.store, &source.store, n, &adam.v)?;
    }
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hp() -> HParams {
        HParams { init_var: PerClass { embedding: 1.0, hidden: 0.02, unembedding: 0.01 }, lr: PerClass::uniform(3e-3) }
    }

    #[test]
    fn transfer_examples() {
        assert_eq!(transfer_hparams(&hp(), 1.0).unwrap(), hp());
        let t = transfer_hparams(&hp(), 8.0).unwrap();
        assert_eq!(t.lr.embedding, 3e-3);
        assert_eq!(t.lr.hidden, 3.75e-4);
        assert_eq!(t.init_var.hidden, 0.0025);
        assert!(matches!(transfer_hparams(&hp(), 0.0), Err(Error::Parameter(_))));
        assert!(transfer_hparams(&hp(), -2.0).is_err());
    }

    #[test]
    fn source_names() {
        assert_eq!(source_name("layers.5.mla1.w_dq", 2), "layers.1.mla1.w_dq");
        assert_eq!(source_name("embedding", 2), "embedding");
        assert_eq!(source_name("mtp.mla.w_o", 2), "mtp.mla.w_o");
    }

    #[test]
    fn model_config_transfer() {
        let mut proxy = ModelConfig::desk();
        proxy.d_model = 32;
        proxy.dense_inter = 64;
        proxy.attention.d_q = 8;
        proxy.attention.d_kv = 4;
        proxy.attention.heads = 1;
        proxy.moe.expert_inter = 8;
        proxy.init = InitScheme::for_width(32);
        let t = transfer_model_config(&proxy, 8.0).unwrap();
        assert_eq!((t.d_model, t.dense_inter, t.attention.d_q, t.attention.heads), (256, 512, 64, 8));
        assert_eq!(t.n_layers, proxy.n_layers);
        assert_eq!(t.moe.n_ffn, proxy.moe.n_ffn);
        assert_eq!(t.init.embedding_var, proxy.init.embedding_var);
        assert_eq!(t.init.hidden_var, proxy.init.hidden_var / 8.0);
        assert!(transfer_model_config(&proxy, 1.5).is_err());
    }
}
