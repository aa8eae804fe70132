//! Dense multi-token-prediction head.
//!
//! At position `t` the head combines the final hidden state `h_t` with the
//! embedding of token `t+1` and predicts token `t+2`:
//!
//! ```text
//! u0 = n(h_t) P_h + n(e_{t+1}) P_e
//! u1 = u0 + MLA(n u0)
//! u2 = u1 + FFN(n u1)
//! logits = n(u2) W_unemb        (unembedding shared with the main model)
//! ```

use serde::{Deserialize, Serialize};

use super::{Bound, Ffn, InitScheme, Mla, MlaConfig, SeqCtx};
use crate::diffcore::{Graph, ParamClass, ParamId, ParamStore, RngState, Var};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MtpHead {
    pub p_h: ParamId,
    pub p_e: ParamId,
    pub mla: Mla,
    pub ffn: Ffn,
}

impl MtpHead {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut RngState,
        init: &InitScheme,
        prefix: &str,
        mla: MlaConfig,
        dense_inter: usize,
    ) -> Result<Self> {
        let d = mla.d_model;
        Ok(Self {
            p_h: init.add(store, rng, format!("{prefix}.p_h"), &[d, d], ParamClass::Hidden)?,
            p_e: init.add(store, rng, format!("{prefix}.p_e"), &[d, d], ParamClass::Hidden)?,
            mla: Mla::init(store, rng, init, &format!("{prefix}.mla"), mla)?,
            ffn: Ffn::init(store, rng, init, &format!("{prefix}.ffn"), d, dense_inter)?,
        })
    }

    pub fn num_scalars(&self, store: &ParamStore) -> usize {
        let mla: usize = self.mla.params().iter().map(|&id| store.value(id).len()).sum();
        store.value(self.p_h).len() + store.value(self.p_e).len() + mla + self.ffn.num_scalars(store)
    }
}

/// Logits for `t+2` from `hidden: [R, d]` (pre-norm final states) and
/// `next_embed: [R, d]` (embeddings of the tokens at `t+1`).
pub fn mtp_forward(
    g: &Graph,
    p: &Bound,
    head: &MtpHead,
    hidden: Var,
    next_embed: Var,
    unembedding: Var,
    ctx: &SeqCtx,
) -> Result<Var> {
    let u0 =
        g.add(g.matmul(g.rms_norm(hidden), p.var(head.p_h))?, g.matmul(g.rms_norm(next_embed), p.var(head.p_e))?)?;
    let u1 = g.add(u0, head.mla.forward(g, p, g.rms_norm(u0), ctx)?)?;
    let u2 = g.add(u1, head.ffn.forward(g, p, g.rms_norm(u1))?)?;
    g.matmul(g.rms_norm(u2), unembedding)
}

/// MTP logits with their `t+2` targets.
#[derive(Debug, Clone)]
pub struct MtpOutput {
    pub logits: Var,
    pub targets: Vec<usize>,
    pub seq_len: usize,
}
