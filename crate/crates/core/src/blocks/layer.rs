//! Layer assembly: shortcut-connected MoE and the interleaved baseline.
//!
//! Every block is pre-normalized with a parameter-free RMS norm `n`.
//!
//! ```text
//! shortcut:     a = x + MLA1(n x)     s = n a
//!               b = a + FFN(s)        c = b + MLA2(n b)
//!               out = c + MoE(s)
//!
//! interleaved:  a = x + MLA1(n x)     b = a + FFN(n a)
//!               c = b + MLA2(n b)     out = c + MoE(n c)
//! ```

use serde::{Deserialize, Serialize};

use super::{Bound, Ffn, InitScheme, LayerRoute, LayerRouting, Mla, MlaConfig, MoeBlock, MoeConfig, SeqCtx};
use crate::diffcore::{Graph, ParamStore, RngState, Var};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    /// MoE fed from the first attention block, merged at the end.
    #[default]
    Shortcut,
    Interleaved,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub kind: LayerKind,
    pub mla1: Mla,
    pub ffn: Ffn,
    pub mla2: Mla,
    pub moe: MoeBlock,
}

impl Layer {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut RngState,
        init: &InitScheme,
        prefix: &str,
        kind: LayerKind,
        mla: MlaConfig,
        dense_inter: usize,
        moe: MoeConfig,
    ) -> Result<Self> {
        let d = mla.d_model;
        Ok(Self {
            kind,
            mla1: Mla::init(store, rng, init, &format!("{prefix}.mla1"), mla)?,
            ffn: Ffn::init(store, rng, init, &format!("{prefix}.ffn"), d, dense_inter)?,
            mla2: Mla::init(store, rng, init, &format!("{prefix}.mla2"), mla)?,
            moe: MoeBlock::init(store, rng, init, &format!("{prefix}.moe"), d, moe)?,
        })
    }

    pub fn forward(
        &self,
        g: &Graph,
        p: &Bound,
        x: Var,
        ctx: &SeqCtx,
        route: LayerRoute<'_>,
    ) -> Result<(Var, LayerRouting)> {
        let a = g.add(x, self.mla1.forward(g, p, g.rms_norm(x), ctx)?)?;
        match self.kind {
            LayerKind::Shortcut => {
                let s = g.rms_norm(a);
                let (moe, routing) = self.moe.forward(g, p, s, route)?;
                let b = g.add(a, self.ffn.forward(g, p, s)?)?;
                let c = g.add(b, self.mla2.forward(g, p, g.rms_norm(b), ctx)?)?;
                Ok((g.add(c, moe)?, routing))
            }
            LayerKind::Interleaved => {
                let b = g.add(a, self.ffn.forward(g, p, g.rms_norm(a))?)?;
                let c = g.add(b, self.mla2.forward(g, p, g.rms_norm(b), ctx)?)?;
                let (moe, routing) = self.moe.forward(g, p, g.rms_norm(c), route)?;
                Ok((g.add(c, moe)?, routing))
            }
        }
    }

    pub fn num_scalars(&self, store: &ParamStore) -> usize {
        let mla: usize = self.mla1.params().iter().chain(&self.mla2.params()).map(|&id| store.value(id).len()).sum();
        let experts: usize = self.moe.bank.experts.iter().map(|e| e.num_scalars(store)).sum();
        mla + self.ffn.num_scalars(store) + experts + store.value(self.moe.w_r).len()
    }
}

/// Forward of one shortcut-connected layer.
pub fn scmoe_layer_forward(
    g: &Graph,
    p: &Bound,
    layer: &Layer,
    h: Var,
    ctx: &SeqCtx,
    route: LayerRoute<'_>,
) -> Result<(Var, LayerRouting)> {
    layer.forward(g, p, h, ctx, route)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::{value, GammaMode};
    use crate::diffcore::{seeded_init, InitDistribution, Tensor};
    use crate::router::{RouterState, RoutingDecision};

    fn mla_cfg(d: usize) -> MlaConfig {
        MlaConfig {
            d_model: d,
            d_q: d / 2,
            d_kv: d / 4,
            heads: 2,
            nope_dim: 4,
            rope_dim: 2,
            value_dim: 4,
            rope_base: 1e4,
            scale_correction: true,
        }
    }

    fn moe_cfg() -> MoeConfig {
        MoeConfig {
            n_ffn: 4,
            n_zero: 2,
            top_k: 3,
            expected_ffn: 2,
            expert_inter: 4,
            segmentation: 2,
            gamma: GammaMode::Compensated,
            renormalize_gates: false,
        }
    }

    fn layer(kind: LayerKind, seed: u64) -> (ParamStore, Layer) {
        let mut store = ParamStore::new();
        let mut rng = RngState::new(seed);
        let l = Layer::init(&mut store, &mut rng, &InitScheme::for_width(16), "l", kind, mla_cfg(16), 24, moe_cfg())
            .unwrap();
        (store, l)
    }

    fn input(rows: usize, seed: u64) -> Tensor {
        seeded_init(&[rows, 16], InitDistribution::TruncatedNormal, 1.0, &mut RngState::new(seed)).unwrap()
    }

    fn run(
        store: &ParamStore,
        l: &Layer,
        x: &Tensor,
        batch: usize,
        seq: usize,
        route: LayerRoute<'_>,
    ) -> (Tensor, RoutingDecision) {
        let g = Graph::new();
        let p = Bound::new(&g, store, false);
        let (out, r) = l.forward(&g, &p, g.constant(x.clone()), &SeqCtx::new(batch, seq), route).unwrap();
        (value(&g, out), r.decision)
    }

    #[test]
    fn shape_is_preserved() {
        for kind in [LayerKind::Shortcut, LayerKind::Interleaved] {
            let (store, l) = layer(kind, 0);
            let state = RouterState::new(moe_cfg().router_config(0.0, 1.0, 1)).unwrap();
            let (out, _) = run(&store, &l, &input(6, 1), 2, 3, LayerRoute::Live(&state));
            assert_eq!(out.shape(), &[6, 16]);
        }
    }

    #[test]
    fn zero_routing_and_zero_ffn_leave_attention_residuals() {
        let (mut store, l) = layer(LayerKind::Shortcut, 2);
        for id in [l.ffn.w_up, l.ffn.w_down] {
            store.get_mut(id).value.data_mut().fill(0.0);
        }
        let x = input(2, 3);
        // every slot a zero expert, gates read from the router probabilities
        let decision = RoutingDecision { experts: vec![vec![4, 5, 0]; 2], gates: vec![vec![]; 2], n_ffn: 4 };
        for e in l.moe.bank.experts.iter().take(1) {
            store.get_mut(e.w_down).value.data_mut().fill(0.0);
        }
        let (out, _) = run(&store, &l, &x, 1, 2, LayerRoute::Frozen(&decision));

        // hand-traced reference
        let g = Graph::new();
        let p = Bound::new(&g, &store, false);
        let ctx = SeqCtx::new(1, 2);
        let xv = g.constant(x);
        let a = g.add(xv, l.mla1.forward(&g, &p, g.rms_norm(xv), &ctx).unwrap()).unwrap();
        let c = g.add(a, l.mla2.forward(&g, &p, g.rms_norm(a), &ctx).unwrap()).unwrap();
        let s = g.rms_norm(a);
        let probs = value(&g, g.softmax_rows(g.matmul(s, p.var(l.moe.w_r)).unwrap()));
        let sv = value(&g, s);
        let cv = value(&g, c);
        for t in 0..2 {
            let gsum = probs.at(t, 4) + probs.at(t, 5);
            for j in 0..16 {
                let expect = cv.at(t, j) + gsum * sv.at(t, j);
                assert!((out.at(t, j) - expect).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn token_chunking_commutes() {
        for kind in [LayerKind::Shortcut, LayerKind::Interleaved] {
            let (store, l) = layer(kind, 4);
            let state = RouterState::new(moe_cfg().router_config(0.0, 1.0, 1)).unwrap();
            let x = input(12, 5);
            let (full, _) = run(&store, &l, &x, 4, 3, LayerRoute::Live(&state));
            let (first, _) = run(&store, &l, &x.slice_rows(0, 6).unwrap(), 2, 3, LayerRoute::Live(&state));
            let (second, _) = run(&store, &l, &x.slice_rows(6, 12).unwrap(), 2, 3, LayerRoute::Live(&state));
            assert_eq!(full, Tensor::concat_rows(&[&first, &second]).unwrap());
        }
    }
}
