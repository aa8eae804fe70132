//! Model building blocks and the full language model.

pub mod ffn;
pub mod layer;
pub mod mla;
pub mod model;
pub mod moe;
pub mod mtp;

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::diffcore::{
    seeded_init, Gradients, Graph, InitDistribution, ParamClass, ParamId, ParamStore, RngState, Tensor, Var,
};
use crate::error::Result;

pub use ffn::Ffn;
pub use layer::{scmoe_layer_forward, Layer, LayerKind};
pub use mla::{mla_scale_factors, Mla, MlaCache, MlaConfig};
pub use model::{AttentionConfig, Batch, ForwardOutput, Model, ModelConfig, ParamReport, Routing};
pub use moe::{moe_forward, variance_gamma, ExpertBank, GammaMode, LayerRoute, LayerRouting, MoeBlock, MoeConfig};
pub use mtp::{mtp_forward, MtpHead, MtpOutput};

/// Initialization variance per parameter class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitScheme {
    #[serde(default)]
    pub distribution: InitDistribution,
    pub embedding_var: f64,
    pub hidden_var: f64,
    pub unembedding_var: f64,
    /// Router weights (hidden class) start narrower so that initial gates
    /// are close to uniform.
    pub router_var: f64,
}

impl InitScheme {
    /// Unit-variance embeddings, `1/d` hidden weights and `1/(16 d)`
    /// unembedding, so the initial logits are close to uniform.
    pub fn for_width(d_model: usize) -> Self {
        let d = d_model as f64;
        Self {
            distribution: InitDistribution::TruncatedNormal,
            embedding_var: 1.0,
            hidden_var: 1.0 / d,
            unembedding_var: 1.0 / (16.0 * d),
            router_var: 0.01 / d,
        }
    }

    pub fn variance(&self, class: ParamClass) -> f64 {
        match class {
            ParamClass::Embedding => self.embedding_var,
            ParamClass::Hidden => self.hidden_var,
            ParamClass::Unembedding => self.unembedding_var,
        }
    }

    pub fn add(
        &self,
        store: &mut ParamStore,
        rng: &mut RngState,
        name: impl Into<String>,
        shape: &[usize],
        class: ParamClass,
    ) -> Result<ParamId> {
        self.add_with_variance(store, rng, name, shape, class, self.variance(class))
    }

    pub fn add_with_variance(
        &self,
        store: &mut ParamStore,
        rng: &mut RngState,
        name: impl Into<String>,
        shape: &[usize],
        class: ParamClass,
        variance: f64,
    ) -> Result<ParamId> {
        let t = seeded_init(shape, self.distribution, variance, rng)?;
        Ok(store.add(name, t, class))
    }
}

/// Graph variables for every parameter of a store.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Trainable leaves when `trainable`, constants otherwise.
    pub fn new(g: &Graph, store: &ParamStore, trainable: bool) -> Self {
        let vars = store
            .iter()
            .map(|p| if trainable { g.leaf(p.value.clone()) } else { g.constant(p.value.clone()) })
            .collect();
        Self { vars }
    }

    /// Binding from variables listed in parameter order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Adds the gradients of every bound parameter into `store`.
    pub fn accumulate(&self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        for (i, &v) in self.vars.iter().enumerate() {
            if let Some(gr) = grads.get(v) {
                store.accumulate_grad(ParamId(i), gr)?;
            }
        }
        Ok(())
    }
}

/// Row layout of a batch of equal-length sequences.
#[derive(Debug, Clone)]
pub struct SeqCtx {
    pub seq_len: usize,
    pub positions: Rc<Vec<f64>>,
}

impl SeqCtx {
    pub fn new(batch: usize, seq_len: usize) -> Self {
        let positions = (0..batch * seq_len).map(|r| (r % seq_len) as f64).collect();
        Self { seq_len, positions: Rc::new(positions) }
    }

    pub fn rows(&self) -> usize {
        self.positions.len()
    }
}

/// Row-wise plain tensor from a graph variable.
pub(crate) fn value(g: &Graph, v: Var) -> Tensor {
    (*g.value(v)).clone()
}
