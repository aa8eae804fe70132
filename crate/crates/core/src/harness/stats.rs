//! Routing statistics over named corpora and the closed-loop bias
//! controller simulation.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::corpus::EOS;
use crate::blocks::{Batch, Bound, Model, Routing};
use crate::diffcore::{seeded_init, Graph, InitDistribution, RngState, Tensor};
use crate::error::{Error, Result};
use crate::router::{mean_std, route_topk, router_probs, RouterConfig, RouterState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSample {
    pub name: String,
    pub text: Vec<u8>,
}

impl CorpusSample {
    pub fn new(name: impl Into<String>, text: impl Into<Vec<u8>>) -> Self {
        Self { name: name.into(), text: text.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActivationStats {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub name: String,
    pub tokens: usize,
    pub per_layer: Vec<ActivationStats>,
    /// Over all (layer, token) pairs.
    pub overall: ActivationStats,
}

/// Activated FFN experts for one input token, per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenActivation {
    pub token: usize,
    pub counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingStatsReport {
    pub corpora: Vec<CorpusStats>,
    /// Per-token dump for each corpus, in text order.
    pub tokens: Vec<(String, Vec<TokenActivation>)>,
}

impl RoutingStatsReport {
    /// Corpus names ordered by mean activation, highest first.
    pub fn ordering(&self) -> Vec<String> {
        let mut v: Vec<&CorpusStats> = self.corpora.iter().collect();
        v.sort_by(|a, b| b.overall.mean.total_cmp(&a.overall.mean));
        v.into_iter().map(|c| c.name.clone()).collect()
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let n_layers = self.corpora.first().map_or(0, |c| c.per_layer.len());
        let _ = write!(s, "{:<16} {:>7}", "corpus", "tokens");
        for l in 0..n_layers {
            let _ = write!(s, " {:>13}", format!("layer {l}"));
        }
        let _ = writeln!(s, " {:>13}", "all");
        for c in &self.corpora {
            let _ = write!(s, "{:<16} {:>7}", c.name, c.tokens);
            for st in c.per_layer.iter().chain(std::iter::once(&c.overall)) {
                let _ = write!(s, " {:>13}", format!("{:.3}±{:.3}", st.mean, st.std));
            }
            let _ = writeln!(s);
        }
        s
    }

    /// Printable bytes with their layer-mean activation, for case studies.
    pub fn render_tokens(&self, corpus: &str, max: usize) -> Option<String> {
        let (_, toks) = self.tokens.iter().find(|(n, _)| n == corpus)?;
        let mut s = String::new();
        for t in toks.iter().take(max) {
            let mean = t.counts.iter().sum::<usize>() as f64 / t.counts.len().max(1) as f64;
            let ch = match t.token {
                b if b < 256 && (b as u8).is_ascii_graphic() => (b as u8 as char).to_string(),
                b if b < 256 && b as u8 == b' ' => "␣".into(),
                b => format!("<{b}>"),
            };
            let _ = writeln!(s, "{ch}\t{mean:.2}\t{:?}", t.counts);
        }
        Some(s)
    }
}

/// Routes each sample through `model` in windows of `seq_len` input tokens
/// (controllers read, never updated) and tabulates activated FFN experts.
pub fn routing_stats_report(
    model: &Model,
    routers: &[RouterState],
    samples: &[CorpusSample],
    seq_len: usize,
) -> Result<RoutingStatsReport> {
    if seq_len == 0 {
        return Err(Error::Config("seq_len must be >= 1".into()));
    }
    let n_layers = model.layers.len();
    let mut corpora = Vec::with_capacity(samples.len());
    let mut dumps = Vec::with_capacity(samples.len());
    for sample in samples {
        let ids: Vec<usize> = sample.text.iter().map(|&b| b as usize).collect();
        let mut per_layer: Vec<Vec<f64>> = vec![Vec::new(); n_layers];
        let mut dump = Vec::with_capacity(ids.len());
        for chunk in ids.chunks(seq_len) {
            // The appended EOS only serves as the last target.
            let mut window = chunk.to_vec();
            window.push(EOS);
            let batch = Batch::new(vec![window])?;
            let g = Graph::new();
            let p = Bound::new(&g, &model.store, false);
            let out = model.forward(&g, &p, &batch, Routing::Live(routers))?;
            for (t, &tok) in chunk.iter().enumerate() {
                let counts: Vec<usize> = out.routing.iter().map(|r| r.decision.ffn_count(t)).collect();
                for (l, &c) in counts.iter().enumerate() {
                    per_layer[l].push(c as f64);
                }
                dump.push(TokenActivation { token: tok, counts });
            }
        }
        let stats = |xs: &[f64]| {
            let (mean, std) = mean_std(xs);
            ActivationStats { mean, std }
        };
        let all: Vec<f64> = per_layer.iter().flatten().copied().collect();
        corpora.push(CorpusStats {
            name: sample.name.clone(),
            tokens: ids.len(),
            per_layer: per_layer.iter().map(|v| stats(v)).collect(),
            overall: stats(&all),
        });
        dumps.push((sample.name.clone(), dump));
    }
    Ok(RoutingStatsReport { corpora, tokens: dumps })
}

/// Closed-loop bias controller on a fixed router and a stationary token
/// distribution: a mixture of Gaussian clusters, so different tokens prefer
/// different experts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerSim {
    pub router: RouterConfig,
    pub d_model: usize,
    pub clusters: usize,
    /// Spread of cluster centres relative to the within-cluster noise.
    pub cluster_scale: f64,
    /// Standard deviation of router logits.
    pub logit_std: f64,
    pub tokens_per_batch: usize,
    pub steps: usize,
    pub warmup: usize,
    /// Length of the moving window for the running mean.
    pub window: usize,
    pub seed: u64,
}

impl ControllerSim {
    /// 16 FFN + 8 zero experts, top-6, target 4.
    pub fn desk(seed: u64) -> Self {
        Self {
            router: RouterConfig {
                n_ffn: 16,
                n_zero: 8,
                top_k: 6,
                expected_ffn: 4,
                mu: 1.0,
                mu_decay: 1.0,
                update_every: 1,
                renormalize_gates: false,
            },
            d_model: 32,
            clusters: 8,
            cluster_scale: 1.0,
            logit_std: 1.0,
            tokens_per_batch: 512,
            steps: 1500,
            warmup: 500,
            window: 20,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerTrace {
    /// Per-batch mean activated FFN experts.
    pub batch_mean: Vec<f64>,
    pub batch_std: Vec<f64>,
    /// Moving-window mean of `batch_mean`.
    pub running_mean: Vec<f64>,
    /// Largest `|running_mean − K_e| / K_e` after warm-up.
    pub max_rel_deviation: f64,
    /// Mean per-batch std after warm-up.
    pub post_warmup_std: f64,
    /// First step after which the running mean stays within 1% of `K_e`.
    pub settled_at: Option<usize>,
}

pub fn simulate_controller(sim: &ControllerSim) -> Result<ControllerTrace> {
    sim.router.validate()?;
    if sim.steps <= sim.warmup || sim.window == 0 || sim.tokens_per_batch == 0 || sim.clusters == 0 {
        return Err(Error::Config("need steps > warmup, window >= 1, tokens >= 1 and clusters >= 1".into()));
    }
    let mut rng = RngState::new(sim.seed);
    let e = sim.router.n_experts();
    let d = sim.d_model;
    let w_r =
        seeded_init(&[d, e], InitDistribution::TruncatedNormal, sim.logit_std * sim.logit_std / d as f64, &mut rng)?;
    let centres = seeded_init(
        &[sim.clusters, d],
        InitDistribution::TruncatedNormal,
        sim.cluster_scale * sim.cluster_scale,
        &mut rng,
    )?;
    let mut state = RouterState::new(sim.router)?;
    let mut tokens = rng.fork(1);
    let ke = sim.router.expected_ffn as f64;
    let mut trace = ControllerTrace {
        batch_mean: Vec::with_capacity(sim.steps),
        batch_std: Vec::with_capacity(sim.steps),
        running_mean: Vec::with_capacity(sim.steps),
        max_rel_deviation: 0.0,
        post_warmup_std: 0.0,
        settled_at: None,
    };
    let mut x = Tensor::zeros(&[sim.tokens_per_batch, d]);
    for step in 0..sim.steps {
        for t in 0..sim.tokens_per_batch {
            let c = tokens.below(sim.clusters);
            for j in 0..d {
                x.data_mut()[t * d + j] = centres.data()[c * d + j] + tokens.normal();
            }
        }
        let probs = router_probs(&x, &w_r)?;
        let decision = route_topk(&probs, &state)?;
        let (m, s) = decision.ffn_stats();
        state.observe(&decision);
        state.end_batch()?;
        trace.batch_mean.push(m);
        trace.batch_std.push(s);
        let lo = (step + 1).saturating_sub(sim.window);
        let w = &trace.batch_mean[lo..];
        trace.running_mean.push(w.iter().sum::<f64>() / w.len() as f64);
    }
    let post = &trace.running_mean[sim.warmup..];
    trace.max_rel_deviation = post.iter().map(|m| (m - ke).abs() / ke).fold(0.0, f64::max);
    let stds = &trace.batch_std[sim.warmup..];
    trace.post_warmup_std = stds.iter().sum::<f64>() / stds.len() as f64;
    let last_bad = trace.running_mean.iter().rposition(|m| (m - ke).abs() / ke >= 0.01);
    trace.settled_at = match last_bad {
        None => Some(0),
        Some(i) if i + 1 < sim.steps => Some(i + 1),
        Some(_) => None,
    };
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::ModelConfig;

    fn tiny_model() -> Model {
        let mut c = ModelConfig::desk();
        c.n_layers = 2;
        c.d_model = 32;
        c.attention.heads = 1;
        c.dense_inter = 32;
        c.moe.expert_inter = 8;
        c.init = crate::blocks::InitScheme::for_width(32);
        Model::new(c, 4).unwrap()
    }

    #[test]
    fn single_token_corpus_has_zero_std() {
        let m = tiny_model();
        let r = m.router_states(0.01, 1.0, 1).unwrap();
        let rep = routing_stats_report(&m, &r, &[CorpusSample::new("one", "a")], 8).unwrap();
        assert_eq!(rep.corpora[0].tokens, 1);
        assert!(rep.corpora[0].per_layer.iter().all(|s| s.std == 0.0));
        assert_eq!(rep.tokens[0].1.len(), 1);
    }

    #[test]
    fn report_counts_every_token_and_layer() {
        let m = tiny_model();
        let r = m.router_states(0.01, 1.0, 1).unwrap();
        let samples = [CorpusSample::new("prose", "the old river ran"), CorpusSample::new("code", "x = f(y);")];
        let rep = routing_stats_report(&m, &r, &samples, 5).unwrap();
        assert_eq!(rep.corpora[0].tokens, 17);
        assert_eq!(rep.corpora[1].per_layer.len(), 2);
        for c in &rep.corpora {
            assert!(c.overall.mean >= 0.0 && c.overall.mean <= 6.0);
        }
        assert_eq!(rep.ordering().len(), 2);
        assert!(rep.render().contains("prose"));
        assert!(rep.render_tokens("code", 3).unwrap().lines().count() == 3);
    }

    #[test]
    fn controller_converges_within_one_percent() {
        let mut sim = ControllerSim::desk(1);
        sim.steps = 800;
        sim.warmup = 400;
        let t = simulate_controller(&sim).unwrap();
        assert!(t.max_rel_deviation < 0.01, "{}", t.max_rel_deviation);
        assert!(t.post_warmup_std > 0.25, "{}", t.post_warmup_std);
    }

    #[test]
    fn controller_tracks_an_off_chance_target() {
        // Unbiased routing would activate about 16/24 * 6 = 4 FFN experts.
        let mut sim = ControllerSim::desk(2);
        sim.router.expected_ffn = 3;
        sim.steps = 800;
        sim.warmup = 400;
        assert!(simulate_controller(&sim).unwrap().max_rel_deviation < 0.01);
        sim.router.mu = 0.0;
        assert!(simulate_controller(&sim).unwrap().max_rel_deviation > 0.1);
    }
}
