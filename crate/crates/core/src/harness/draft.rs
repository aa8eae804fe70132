//! Greedy draft acceptance of the MTP head against the main head.

use serde::{Deserialize, Serialize};

use crate::analytics::{acceptance_rate, Acceptance};
use crate::blocks::{Batch, Bound, Model, Routing};
use crate::diffcore::{Graph, RngState, Tensor};
use crate::error::{Error, Result};
use crate::router::RouterState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DraftSource {
    /// The model's own MTP head.
    Mtp,
    /// The main head's greedy token, i.e. a perfect draft.
    Target,
    /// Uniform random tokens.
    Random { seed: u64 },
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

fn argmax_rows(t: &Tensor) -> Vec<usize> {
    (0..t.rows()).map(|r| argmax(t.row(r))).collect()
}

/// Teacher-forced greedy acceptance over `windows`. At position `t` the
/// draft guesses token `t+2` from the state after token `t+1`; the target
/// is the main head's greedy prediction for the same token.
pub fn measure_acceptance(
    model: &Model,
    routers: &[RouterState],
    windows: &[Vec<usize>],
    draft: DraftSource,
) -> Result<Acceptance> {
    if windows.is_empty() {
        return Err(Error::EmptyBatch("no evaluation windows".into()));
    }
    if draft == DraftSource::Mtp && model.mtp.is_none() {
        return Err(Error::Config("model has no MTP head".into()));
    }
    let mut rng = match draft {
        DraftSource::Random { seed } => Some(RngState::new(seed)),
        _ => None,
    };
    let mut drafts = Vec::new();
    let mut targets = Vec::new();
    for w in windows {
        if w.len() < 3 {
            return Err(Error::EmptyBatch("windows need at least 3 tokens".into()));
        }
        let batch = Batch::new(vec![w.clone()])?;
        let g = Graph::new();
        let p = Bound::new(&g, &model.store, false);
        let out = model.forward(&g, &p, &batch, Routing::Live(routers))?;
        let main = argmax_rows(&g.value(out.logits));
        let s2 = w.len() - 2;
        let tgt = &main[1..=s2];
        match draft {
            DraftSource::Mtp => {
                let m = out.mtp.as_ref().ok_or_else(|| Error::State("MTP head produced no logits".into()))?;
                drafts.extend(argmax_rows(&g.value(m.logits)));
            }
            DraftSource::Target => drafts.extend_from_slice(tgt),
            DraftSource::Random { .. } => {
                let r = rng.as_mut().expect("seeded");
                drafts.extend((0..s2).map(|_| r.below(model.config.vocab)));
            }
        }
        targets.extend_from_slice(tgt);
    }
    acceptance_rate(&drafts, &targets)
}
