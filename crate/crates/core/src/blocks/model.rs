//! Byte-level language model: embedding, MoE layers, final norm, untied
//! unembedding and an optional MTP head.

use serde::{Deserialize, Serialize};

use super::{
    mtp_forward, Bound, InitScheme, Layer, LayerKind, LayerRoute, LayerRouting, MlaConfig, MoeConfig, MtpHead,
    MtpOutput, SeqCtx,
};
use crate::diffcore::{Graph, ParamClass, ParamId, ParamStore, RngState, Var};
use crate::error::{Error, Result};
use crate::router::{RouterState, RoutingDecision};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub heads: usize,
    pub d_q: usize,
    pub d_kv: usize,
    pub nope_dim: usize,
    pub rope_dim: usize,
    pub value_dim: usize,
    pub rope_base: f64,
    pub scale_correction: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub n_layers: usize,
    #[serde(default)]
    pub layer_kind: LayerKind,
    pub attention: AttentionConfig,
    pub dense_inter: usize,
    pub moe: MoeConfig,
    pub mtp: bool,
    pub init: InitScheme,
}

impl ModelConfig {
    /// Four-layer desk model: 16 fine-grained FFN experts (m = 2), 8 zero
    /// experts, 6 selected per token with 4 expected FFN experts.
    pub fn desk() -> Self {
        let d_model = 128;
        Self {
            vocab: crate::harness::corpus::VOCAB_SIZE,
            d_model,
            n_layers: 4,
            layer_kind: LayerKind::Shortcut,
            attention: AttentionConfig {
                heads: 4,
                d_q: 32,
                d_kv: 16,
                nope_dim: 32,
                rope_dim: 16,
                value_dim: 32,
                rope_base: 1e6,
                scale_correction: true,
            },
            dense_inter: 256,
            moe: MoeConfig {
                n_ffn: 16,
                n_zero: 8,
                top_k: 6,
                expected_ffn: 4,
                expert_inter: 32,
                segmentation: 2,
                gamma: super::GammaMode::Compensated,
                renormalize_gates: false,
            },
            mtp: true,
            init: InitScheme::for_width(d_model),
        }
    }

    pub fn mla(&self) -> MlaConfig {
        let a = &self.attention;
        MlaConfig {
            d_model: self.d_model,
            d_q: a.d_q,
            d_kv: a.d_kv,
            heads: a.heads,
            nope_dim: a.nope_dim,
            rope_dim: a.rope_dim,
            value_dim: a.value_dim,
            rope_base: a.rope_base,
            scale_correction: a.scale_correction,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 || self.d_model == 0 || self.n_layers == 0 || self.dense_inter == 0 {
            return Err(Error::Config("vocab, d_model, n_layers and dense_inter must be positive".into()));
        }
        self.mla().validate()?;
        self.moe.validate()?;
        for class in ParamClass::ALL {
            let v = self.init.variance(class);
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{} init variance {v}", class.name())));
            }
        }
        if !(self.init.router_var >= 0.0 && self.init.router_var.is_finite()) {
            return Err(Error::Config(format!("router init variance {}", self.init.router_var)));
        }
        Ok(())
    }
}

/// Equal-length token sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub tokens: Vec<Vec<usize>>,
}

impl Batch {
    pub fn new(tokens: Vec<Vec<usize>>) -> Result<Self> {
        let len = tokens.first().map_or(0, |s| s.len());
        if tokens.is_empty() {
            return Err(Error::EmptyBatch("batch has no sequences".into()));
        }
        if len < 2 || tokens.iter().any(|s| s.len() != len) {
            return Err(Error::Dimension("sequences must share a length of at least 2".into()));
        }
        Ok(Self { tokens })
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn len(&self) -> usize {
        self.tokens[0].len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Where every layer's routing comes from.
#[derive(Debug, Clone, Copy)]
pub enum Routing<'a> {
    Live(&'a [RouterState]),
    Frozen(&'a [RoutingDecision]),
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Next-token logits `[B·S, V]` with `S = len - 1`.
    pub logits: Var,
    pub targets: Vec<usize>,
    /// Final hidden states before the output norm.
    pub hidden: Var,
    pub mtp: Option<MtpOutput>,
    /// The model has an MTP head but the sequences are too short for it.
    pub mtp_skipped: bool,
    pub routing: Vec<LayerRouting>,
    pub batch: usize,
    pub seq_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub total: usize,
    pub embedding: usize,
    pub unembedding: usize,
    pub per_layer: usize,
    pub mtp: usize,
    /// MTP head size relative to one layer.
    pub mtp_to_layer: f64,
    /// MTP head share of the whole model.
    pub mtp_share: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub embedding: ParamId,
    pub unembedding: ParamId,
    pub layers: Vec<Layer>,
    pub mtp: Option<MtpHead>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = RngState::new(seed);
        let init = config.init;
        let d = config.d_model;
        let embedding = init.add(&mut store, &mut rng, "embedding", &[config.vocab, d], ParamClass::Embedding)?;
        let layers = (0..config.n_layers)
            .map(|i| {
                Layer::init(
                    &mut store,
                    &mut rng,
                    &init,
                    &format!("layers.{i}"),
                    config.layer_kind,
                    config.mla(),
                    config.dense_inter,
                    config.moe,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let mtp = if config.mtp {
            Some(MtpHead::init(&mut store, &mut rng, &init, "mtp", config.mla(), config.dense_inter)?)
        } else {
            None
        };
        let unembedding = init.add(&mut store, &mut rng, "unembedding", &[d, config.vocab], ParamClass::Unembedding)?;
        Ok(Self { config, store, embedding, unembedding, layers, mtp })
    }

    pub fn router_states(&self, mu: f64, mu_decay: f64, update_every: usize) -> Result<Vec<RouterState>> {
        (0..self.layers.len())
            .map(|_| RouterState::new(self.config.moe.router_config(mu, mu_decay, update_every)))
            .collect()
    }

    pub fn forward(&self, g: &Graph, p: &Bound, batch: &Batch, routing: Routing<'_>) -> Result<ForwardOutput> {
        let n_routes = match routing {
            Routing::Live(s) => s.len(),
            Routing::Frozen(d) => d.len(),
        };
        if n_routes != self.layers.len() {
            return Err(Error::Routing(format!("{n_routes} routing entries for {} layers", self.layers.len())));
        }
        let vocab = self.config.vocab;
        if let Some(&bad) = batch.tokens.iter().flatten().find(|&&t| t >= vocab) {
            return Err(Error::Dimension(format!("token {bad} outside vocabulary {vocab}")));
        }
        let (b, len) = (batch.size(), batch.len());
        let s = len - 1;
        let ids: Vec<usize> = batch.tokens.iter().flat_map(|seq| seq[..s].iter().copied()).collect();
        let targets: Vec<usize> = batch.tokens.iter().flat_map(|seq| seq[1..].iter().copied()).collect();
        let emb = p.var(self.embedding);
        let ctx = SeqCtx::new(b, s);
        let mut x = g.gather_rows(emb, &ids)?;
        let mut routes = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let route = match routing {
                Routing::Live(states) => LayerRoute::Live(&states[i]),
                Routing::Frozen(ds) => LayerRoute::Frozen(&ds[i]),
            };
            let (y, r) = layer.forward(g, p, x, &ctx, route)?;
            x = y;
            routes.push(r);
        }
        let hidden = x;
        let unemb = p.var(self.unembedding);
        let logits = g.matmul(g.rms_norm(hidden), unemb)?;

        let mut mtp = None;
        let mut mtp_skipped = false;
        if let Some(head) = &self.mtp {
            if len >= 3 {
                let s2 = len - 2;
                let rows: Vec<usize> = (0..b).flat_map(|bi| (0..s2).map(move |t| bi * s + t)).collect();
                let next: Vec<usize> = batch.tokens.iter().flat_map(|seq| seq[1..=s2].iter().copied()).collect();
                let tgt: Vec<usize> = batch.tokens.iter().flat_map(|seq| seq[2..].iter().copied()).collect();
                let h = g.gather_rows(hidden, &rows)?;
                let e = g.gather_rows(emb, &next)?;
                let l = mtp_forward(g, p, head, h, e, unemb, &SeqCtx::new(b, s2))?;
                mtp = Some(MtpOutput { logits: l, targets: tgt, seq_len: s2 });
            } else {
                mtp_skipped = true;
            }
        }
        Ok(ForwardOutput { logits, targets, hidden, mtp, mtp_skipped, routing: routes, batch: b, seq_len: s })
    }

    pub fn param_report(&self) -> ParamReport {
        let st = &self.store;
        let embedding = st.value(self.embedding).len();
        let unembedding = st.value(self.unembedding).len();
        let per_layer = self.layers.first().map_or(0, |l| l.num_scalars(st));
        let mtp = self.mtp.as_ref().map_or(0, |h| h.num_scalars(st));
        let total = st.num_scalars();
        ParamReport {
            total,
            embedding,
            unembedding,
            per_layer,
            mtp,
            mtp_to_layer: if per_layer > 0 { mtp as f64 / per_layer as f64 } else { 0.0 },
            mtp_share: mtp as f64 / total as f64,
        }
    }

    /// Parameters that belong to the MTP head.
    pub fn mtp_params(&self) -> Vec<ParamId> {
        match &self.mtp {
            Some(h) => {
                let mut ids = vec![h.p_h, h.p_e, h.ffn.w_up, h.ffn.w_down];
                ids.extend(h.mla.params());
                ids
            }
            None => Vec::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::value;
    use crate::diffcore::grad_check_with;
    use crate::diffcore::GradCheckOptions;

    pub(crate) fn tiny(mtp: bool) -> ModelConfig {
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
        c.mtp = mtp;
        c.init = InitScheme::for_width(8);
        c
    }

    fn batch() -> Batch {
        Batch::new(vec![vec![1, 4, 2, 7, 3], vec![0, 10, 5, 5, 9]]).unwrap()
    }

    #[test]
    fn shapes_and_mtp_layout() {
        let m = Model::new(tiny(true), 0).unwrap();
        let states = m.router_states(0.0, 1.0, 1).unwrap();
        let g = Graph::new();
        let p = Bound::new(&g, &m.store, false);
        let out = m.forward(&g, &p, &batch(), Routing::Live(&states)).unwrap();
        assert_eq!(g.shape(out.logits), vec![8, 11]);
        assert_eq!(out.targets, vec![4, 2, 7, 3, 10, 5, 5, 9]);
        let mtp = out.mtp.unwrap();
        assert_eq!(g.shape(mtp.logits), vec![6, 11]);
        assert_eq!(mtp.targets, vec![2, 7, 3, 5, 5, 9]);

        let short = Batch::new(vec![vec![1, 2]]).unwrap();
        let out = m.forward(&g, &p, &short, Routing::Live(&states)).unwrap();
        assert!(out.mtp.is_none() && out.mtp_skipped);
    }

    #[test]
    fn zero_mtp_projections_give_uniform_logits() {
        let mut m = Model::new(tiny(true), 1).unwrap();
        let head = m.mtp.clone().unwrap();
        for id in [head.p_h, head.p_e] {
            m.store.get_mut(id).value.data_mut().fill(0.0);
        }
        let states = m.router_states(0.0, 1.0, 1).unwrap();
        let g = Graph::new();
        let p = Bound::new(&g, &m.store, false);
        let out = m.forward(&g, &p, &batch(), Routing::Live(&states)).unwrap();
        let mtp = out.mtp.unwrap();
        let loss = g.cross_entropy(mtp.logits, &mtp.targets).unwrap();
        assert!((g.value(loss).item() - 11f64.ln()).abs() < 1e-12);
        assert!(value(&g, mtp.logits).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn mtp_loss_gradient_check() {
        for seed in 0..3 {
            let m = Model::new(tiny(true), seed).unwrap();
            let states = m.router_states(0.0, 1.0, 1).unwrap();
            let decisions: Vec<RoutingDecision> = {
                let g = Graph::new();
                let p = Bound::new(&g, &m.store, false);
                m.forward(&g, &p, &batch(), Routing::Live(&states))
                    .unwrap()
                    .routing
                    .into_iter()
                    .map(|r| r.decision)
                    .collect()
            };
            let ids = m.mtp_params();
            let params: Vec<_> = m.store.iter().map(|p| p.value.clone()).collect();
            let report = grad_check_with(
                |g, v| {
                    let p = Bound::from_vars(v.to_vec());
                    let out = m.forward(g, &p, &batch(), Routing::Frozen(&decisions))?;
                    let mtp = out.mtp.expect("long enough");
                    g.cross_entropy(mtp.logits, &mtp.targets)
                },
                &params,
                GradCheckOptions { max_entries_per_param: Some(6), ..Default::default() },
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "seed {seed}: {report:?}");
            assert!(!ids.is_empty());
        }
    }

    #[test]
    fn mtp_head_is_small_next_to_a_layer() {
        let m = Model::new(ModelConfig::desk(), 0).unwrap();
        let r = m.param_report();
        assert!(r.mtp < r.per_layer, "{r:?}");
        assert_eq!(r.total, r.embedding + r.unembedding + 4 * r.per_layer + r.mtp);
    }
}
