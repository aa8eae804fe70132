#![allow(dead_code)]

use flashlab::blocks::{Batch, Bound, InitScheme, LayerRoute, Model, ModelConfig, Routing, SeqCtx};
use flashlab::diffcore::{Graph, ParamClass, RngState, Tensor};
use flashlab::router::RouterState;
use flashlab::scaling::{grow_routers, stack_grow, transfer_hparams, GrowthPlan, HParams};
use flashlab::stability::PerClass;

pub fn proxy() -> HParams {
    HParams {
        init_var: PerClass { embedding: 1.0, hidden: 0.02, unembedding: 0.005 },
        lr: PerClass { embedding: 3e-3, hidden: 3e-3, unembedding: 1e-3 },
    }
}

/// `(s, class, is_init_var, expected)` for every class and field at a
/// widening and a narrowing factor.
pub const TRANSFER_CASES: [(f64, ParamClass, bool, f64); 12] = [
    (8.0, ParamClass::Embedding, true, 1.0),
    (8.0, ParamClass::Embedding, false, 3e-3),
    (8.0, ParamClass::Hidden, true, 0.0025),
    (8.0, ParamClass::Hidden, false, 3.75e-4),
    (8.0, ParamClass::Unembedding, true, 0.000625),
    (8.0, ParamClass::Unembedding, false, 1.25e-4),
    (0.5, ParamClass::Embedding, true, 1.0),
    (0.5, ParamClass::Embedding, false, 3e-3),
    (0.5, ParamClass::Hidden, true, 0.04),
    (0.5, ParamClass::Hidden, false, 6e-3),
    (0.5, ParamClass::Unembedding, true, 0.01),
    (0.5, ParamClass::Unembedding, false, 2e-3),
];

/// Cases whose transferred value differs from the expected one.
pub fn transfer_case_failures() -> Vec<String> {
    let mut bad = Vec::new();
    for (s, class, is_var, want) in TRANSFER_CASES {
        let t = transfer_hparams(&proxy(), s).unwrap();
        let got = if is_var { t.init_var.get(class) } else { t.lr.get(class) };
        if got != want {
            bad.push(format!("s={s} {class:?} var={is_var}: {got} != {want}"));
        }
    }
    for (a, b) in [(2.0, 4.0), (8.0, 0.5), (0.25, 16.0), (1.0, 8.0)] {
        let two = transfer_hparams(&transfer_hparams(&proxy(), a).unwrap(), b).unwrap();
        if two != transfer_hparams(&proxy(), a * b).unwrap() {
            bad.push(format!("composition {a} then {b}"));
        }
    }
    bad
}

pub fn small_config() -> ModelConfig {
    let mut c = ModelConfig::desk();
    c.d_model = 16;
    c.n_layers = 2;
    c.attention.heads = 2;
    c.attention.d_q = 8;
    c.attention.d_kv = 8;
    c.attention.nope_dim = 4;
    c.attention.rope_dim = 4;
    c.attention.value_dim = 4;
    c.dense_inter = 16;
    c.moe.expert_inter = 4;
    c.init = InitScheme::for_width(16);
    c
}

/// Half model's layer stack applied twice, then the shared output head.
fn composed_logits(m: &Model, routers: &[RouterState], batch: &Batch) -> Tensor {
    let g = Graph::new();
    let p = Bound::new(&g, &m.store, false);
    let s = batch.len() - 1;
    let ids: Vec<usize> = batch.tokens.iter().flat_map(|t| t[..s].iter().copied()).collect();
    let ctx = SeqCtx::new(batch.size(), s);
    let mut x = g.gather_rows(p.var(m.embedding), &ids).unwrap();
    for _ in 0..2 {
        for (layer, r) in m.layers.iter().zip(routers) {
            x = layer.forward(&g, &p, x, &ctx, LayerRoute::Live(r)).unwrap().0;
        }
    }
    let logits = g.matmul(g.rms_norm(x), p.var(m.unembedding)).unwrap();
    g.value(logits).as_ref().clone()
}

fn logits(m: &Model, routers: &[RouterState], batch: &Batch) -> Tensor {
    let g = Graph::new();
    let p = Bound::new(&g, &m.store, false);
    let out = m.forward(&g, &p, batch, Routing::Live(routers)).unwrap();
    g.value(out.logits).as_ref().clone()
}

/// Largest absolute logit difference between the doubled model and the
/// composed half model over `inputs` random sequences.
pub fn growth_identity_error(inputs: usize) -> f64 {
    let small = Model::new(small_config(), 21).unwrap();
    let mut routers = small.router_states(1.0, 1.0, 1).unwrap();
    routers[1].set_bias(3, 0.02).unwrap();
    let plan = GrowthPlan::new(2);
    let grown = stack_grow(&small, &plan).unwrap();
    let grown_routers = grow_routers(&routers, &plan).unwrap();
    assert_eq!(grown.layers.len(), 4);
    let mut rng = RngState::new(5);
    let mut worst = 0.0f64;
    for _ in 0..inputs {
        let len = 2 + rng.below(9);
        let tokens = vec![(0..len).map(|_| rng.below(small.config.vocab)).collect()];
        let batch = Batch::new(tokens).unwrap();
        let a = logits(&grown, &grown_routers, &batch);
        let b = composed_logits(&small, &routers, &batch);
        worst = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(worst, f64::max);
    }
    worst
}
