//! Bias-free SiLU feed-forward block `silu(x W_up) W_down`.

use serde::{Deserialize, Serialize};

use super::{Bound, InitScheme};
use crate::diffcore::{Graph, ParamClass, ParamId, ParamStore, RngState, Var};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ffn {
    pub w_up: ParamId,
    pub w_down: ParamId,
}

impl Ffn {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut RngState,
        init: &InitScheme,
        prefix: &str,
        d_model: usize,
        inter: usize,
    ) -> Result<Self> {
        Ok(Self {
            w_up: init.add(store, rng, format!("{prefix}.w_up"), &[d_model, inter], ParamClass::Hidden)?,
            w_down: init.add(store, rng, format!("{prefix}.w_down"), &[inter, d_model], ParamClass::Hidden)?,
        })
    }

    pub fn forward(&self, g: &Graph, p: &Bound, x: Var) -> Result<Var> {
        let up = g.silu(g.matmul(x, p.var(self.w_up))?);
        g.matmul(up, p.var(self.w_down))
    }

    pub fn num_scalars(&self, store: &ParamStore) -> usize {
        store.value(self.w_up).len() + store.value(self.w_down).len()
    }
}
