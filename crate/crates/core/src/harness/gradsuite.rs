//! Finite-difference checks of every training loss on a small full model.

use serde::{Deserialize, Serialize};

use crate::blocks::{AttentionConfig, Batch, Bound, InitScheme, Model, ModelConfig, MoeConfig, Routing};
use crate::diffcore::{grad_check_with, GradCheckOptions, Graph, RngState, Var};
use crate::error::Result;
use crate::router::{lb_loss, LbLossConfig, RoutingDecision};
use crate::stability::{hidden_z_loss, ZLossConfig};

pub const LOSSES: [&str; 5] = ["lm", "lb", "z", "mtp", "total"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradSuiteEntry {
    pub loss: String,
    pub seed: u64,
    pub max_rel_error: f64,
    pub entries_checked: usize,
}

/// Two layers, width 8, vocabulary 11: small enough to perturb every
/// parameter tensor.
pub fn check_model_config() -> ModelConfig {
    let mut c = ModelConfig::desk();
    c.vocab = 11;
    c.d_model = 8;
    c.n_layers = 2;
    c.attention = AttentionConfig {
        heads: 2,
        d_q: 4,
        d_kv: 4,
        nope_dim: 2,
        rope_dim: 2,
        value_dim: 2,
        rope_base: 1e4,
        scale_correction: true,
    };
    c.dense_inter = 8;
    c.moe = MoeConfig { n_ffn: 4, n_zero: 2, top_k: 3, expected_ffn: 2, expert_inter: 3, segmentation: 2, ..c.moe };
    c.mtp = true;
    c.init = InitScheme::for_width(8);
    c
}

fn loss_on(g: &Graph, m: &Model, v: &[Var], batch: &Batch, decisions: &[RoutingDecision], which: &str) -> Result<Var> {
    let p = Bound::from_vars(v.to_vec());
    let out = m.forward(g, &p, batch, Routing::Frozen(decisions))?;
    let router = m.config.moe.router_config(0.0, 1.0, 1);
    let lb_cfg = LbLossConfig { alpha: 0.1, groups: 2 };
    let lm = || g.cross_entropy(out.logits, &out.targets);
    let lb = || -> Result<Var> {
        let mut acc = lb_loss(g, out.routing[0].probs, &out.routing[0].decision, &router, &lb_cfg)?;
        for r in &out.routing[1..] {
            acc = g.add(acc, lb_loss(g, r.probs, &r.decision, &router, &lb_cfg)?)?;
        }
        Ok(acc)
    };
    let z = || hidden_z_loss(g, out.hidden, &ZLossConfig { lambda: 0.01 });
    let mtp = || {
        let h = out.mtp.as_ref().expect("windows of 6 tokens");
        g.cross_entropy(h.logits, &h.targets)
    };
    match which {
        "lm" => lm(),
        "lb" => lb(),
        "z" => z(),
        "mtp" => mtp(),
        _ => {
            let t = g.add(g.add(lm()?, lb()?)?, z()?)?;
            g.add(t, g.scale(mtp()?, 0.1))
        }
    }
}

/// Checks each loss in [`LOSSES`] against central differences, with the
/// routing decisions frozen at the seed's initial forward pass.
pub fn loss_gradient_suite(seeds: &[u64], max_entries_per_param: usize) -> Result<Vec<GradSuiteEntry>> {
    let mut out = Vec::new();
    for &seed in seeds {
        let m = Model::new(check_model_config(), seed)?;
        let mut rng = RngState::new(seed).fork(7);
        let tokens = (0..2).map(|_| (0..6).map(|_| rng.below(11)).collect()).collect();
        let batch = Batch::new(tokens)?;
        let states = m.router_states(0.0, 1.0, 1)?;
        let decisions: Vec<RoutingDecision> = {
            let g = Graph::new();
            let p = Bound::new(&g, &m.store, false);
            m.forward(&g, &p, &batch, Routing::Live(&states))?.routing.into_iter().map(|r| r.decision).collect()
        };
        let params: Vec<_> = m.store.iter().map(|p| p.value.clone()).collect();
        for which in LOSSES {
            let rep = grad_check_with(
                |g, v| loss_on(g, &m, v, &batch, &decisions, which),
                &params,
                GradCheckOptions { max_entries_per_param: Some(max_entries_per_param), ..Default::default() },
            )?;
            out.push(GradSuiteEntry {
                loss: which.into(),
                seed,
                max_rel_error: rep.max_rel_error,
                entries_checked: rep.entries_checked,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_loss_passes_on_one_seed() {
        for e in loss_gradient_suite(&[11], 3).unwrap() {
            assert!(e.max_rel_error < 1e-4, "{e:?}");
            assert!(e.entries_checked > 0);
        }
    }
}
