//! Speculative-decoding arithmetic, KV-slot pre-allocation under an
//! overlapped multi-step scheduler, and a per-layer latency cost model.

use serde::{Deserialize, Serialize};

use crate::diffcore::RngState;
use crate::error::{Error, Result};

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Parameter(format!("acceptance rate {alpha} outside [0, 1]")));
    }
    Ok(())
}

/// Expected tokens emitted per verification step with `gamma` drafts under
/// independent per-token acceptance: `Σ_{j=0}^{γ} α^j`.
pub fn expected_accept_length(gamma: usize, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if gamma < 1 {
        return Err(Error::Parameter("need at least one draft token".into()));
    }
    let mut term = 1.0;
    let mut sum = 1.0;
    for _ in 0..gamma {
        term *= alpha;
        sum += term;
    }
    Ok(sum)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub trials: usize,
}

/// Simulated draft-verify steps: drafts are accepted left to right until the
/// first rejection, and the target always contributes one token.
pub fn simulate_accept_length(
    gamma: usize,
    alpha: f64,
    trials: usize,
    rng: &mut RngState,
) -> Result<MonteCarloEstimate> {
    check_alpha(alpha)?;
    if gamma < 1 || trials < 2 {
        return Err(Error::Parameter("need gamma >= 1 and at least two trials".into()));
    }
    let (mut s, mut s2) = (0.0, 0.0);
    for _ in 0..trials {
        let mut emitted = 1usize;
        for _ in 0..gamma {
            if !rng.bernoulli(alpha) {
                break;
            }
            emitted += 1;
        }
        let x = emitted as f64;
        s += x;
        s2 += x * x;
    }
    let n = trials as f64;
    let mean = s / n;
    let var = ((s2 - n * mean * mean) / (n - 1.0)).max(0.0);
    Ok(MonteCarloEstimate { mean, std_error: (var / n).sqrt(), trials })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpecDecParams {
    pub gamma: usize,
    pub alpha: f64,
    /// Draft latency relative to one target step.
    pub draft_ratio: f64,
    /// Verification latency relative to one target step.
    pub verify_ratio: f64,
}

/// Expected latency per token relative to plain decoding:
/// `(γ T_D/T_T + T_V/T_T) / Ω`.
pub fn specdec_cost_ratio(p: &SpecDecParams) -> Result<f64> {
    if !(p.draft_ratio >= 0.0 && p.verify_ratio >= 0.0) {
        return Err(Error::Parameter("latency ratios must be >= 0".into()));
    }
    let omega = expected_accept_length(p.gamma, p.alpha)?;
    Ok((p.gamma as f64 * p.draft_ratio + p.verify_ratio) / omega)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Acceptance {
    pub rate: f64,
    pub accepted: usize,
    pub total: usize,
}

/// Fraction of draft tokens equal to the target's greedy token.
pub fn acceptance_rate(drafts: &[usize], targets: &[usize]) -> Result<Acceptance> {
    if drafts.len() != targets.len() {
        return Err(Error::Dimension(format!("{} drafts for {} targets", drafts.len(), targets.len())));
    }
    if drafts.is_empty() {
        return Err(Error::EmptyBatch("no draft tokens to score".into()));
    }
    let accepted = drafts.iter().zip(targets).filter(|(a, b)| a == b).count();
    Ok(Acceptance { rate: accepted as f64 / drafts.len() as f64, accepted, total: drafts.len() })
}

/// Accept-length behaviours for the KV simulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KvSampler {
    Uniform,
    AlwaysMin,
    AlwaysMax,
    /// Whole iterations alternating between all-min and all-max.
    Alternate,
    /// Random runs of all-min or all-max iterations.
    Burst,
}

impl KvSampler {
    pub const ALL: [KvSampler; 5] =
        [KvSampler::Uniform, KvSampler::AlwaysMin, KvSampler::AlwaysMax, KvSampler::Alternate, KvSampler::Burst];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KvTrace {
    /// `R_i` for `i = 0..=iterations`.
    pub available: Vec<i64>,
    /// `A_i` for `i = 0..=iterations`.
    pub freed: Vec<i64>,
    pub lower: i64,
    pub upper: i64,
    pub violations: usize,
    /// Steps where the recurrence disagrees with `2(MTP+1)n − S_{i−1}`.
    pub closed_form_mismatches: usize,
}

/// Simulates `R_i = R_{i−1} − S_{i−1} + A_{i−1}` with `A_i = S_{i−1}`,
/// `S_i = Σ_s U_{i,s}`, `R_0 = (MTP+1) n` and `U_{−1,s} = MTP+1`, checking
/// `R_i ∈ [(MTP+1) n, (2 MTP+1) n]` for `i ≥ 1`.
///
/// `sampler(i, s)` is the accept length of slot `s` in iteration `i`.
pub fn kv_alloc_simulate<F>(n: usize, mtp: usize, iterations: usize, mut sampler: F) -> Result<KvTrace>
where
    F: FnMut(usize, usize) -> usize,
{
    if n == 0 || mtp == 0 {
        return Err(Error::Parameter("need n >= 1 and MTP >= 1".into()));
    }
    let (n_i, m) = (n as i64, mtp as i64);
    let lower = (m + 1) * n_i;
    let upper = (2 * m + 1) * n_i;
    let mut available = Vec::with_capacity(iterations + 1);
    let mut freed = Vec::with_capacity(iterations + 1);
    available.push((m + 1) * n_i);
    freed.push((m + 1) * n_i);
    let (mut violations, mut mismatches) = (0, 0);
    for i in 1..=iterations {
        let mut used = 0i64;
        for s in 0..n {
            let u = sampler(i - 1, s);
            if u < 1 || u > mtp + 1 {
                return Err(Error::Parameter(format!("accept length {u} outside [1, {}]", mtp + 1)));
            }
            used += u as i64;
        }
        let r = available[i - 1] - used + freed[i - 1];
        available.push(r);
        freed.push(used);
        if r < lower || r > upper {
            violations += 1;
        }
        if r != 2 * (m + 1) * n_i - used {
            mismatches += 1;
        }
    }
    Ok(KvTrace { available, freed, lower, upper, violations, closed_form_mismatches: mismatches })
}

/// Runs [`kv_alloc_simulate`] with one of the built-in samplers.
pub fn kv_alloc_with(n: usize, mtp: usize, iterations: usize, sampler: KvSampler, seed: u64) -> Result<KvTrace> {
    let mut rng = RngState::new(seed);
    let hi = mtp + 1;
    let mut burst_left = 0usize;
    let mut burst_val = 1usize;
    let mut last_iter = usize::MAX;
    kv_alloc_simulate(n, mtp, iterations, |i, _s| match sampler {
        KvSampler::Uniform => 1 + rng.below(hi),
        KvSampler::AlwaysMin => 1,
        KvSampler::AlwaysMax => hi,
        KvSampler::Alternate => {
            if i % 2 == 0 {
                1
            } else {
                hi
            }
        }
        KvSampler::Burst => {
            if i != last_iter {
                last_iter = i;
                if burst_left == 0 {
                    burst_left = 1 + rng.below(8);
                    burst_val = if rng.bernoulli(0.5) { 1 } else { hi };
                }
                burst_left -= 1;
            }
            burst_val
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Overlap {
    /// Single-batch overlap: module latencies add up.
    Sbo,
    /// Two-batch overlap, modeled as `max(compute, communication)`.
    Tbo,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub attention_us: f64,
    pub dispatch_us: f64,
    pub moe_us: f64,
    pub combine_us: f64,
    pub n_layer: usize,
    pub accept_factor: f64,
    pub strategy: Overlap,
    #[serde(default = "default_batch")]
    pub batch_per_device: f64,
    #[serde(default = "default_price")]
    pub price_per_device_hour: f64,
}

fn default_batch() -> f64 {
    96.0
}

fn default_price() -> f64 {
    2.0
}

impl CostModel {
    pub fn from_json(s: &str) -> Result<Self> {
        let cm: Self = serde_json::from_str(s).map_err(|e| Error::Config(format!("cost model: {e}")))?;
        cm.validate()?;
        Ok(cm)
    }

    pub fn validate(&self) -> Result<()> {
        let lat = [self.attention_us, self.dispatch_us, self.moe_us, self.combine_us];
        if lat.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::Config("latencies must be finite and >= 0".into()));
        }
        if !(self.accept_factor >= 1.0) || self.n_layer == 0 {
            return Err(Error::Config("need accept_factor >= 1 and n_layer >= 1".into()));
        }
        if !(self.batch_per_device > 0.0 && self.price_per_device_hour >= 0.0) {
            return Err(Error::Config("need batch_per_device > 0 and price >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TpotReport {
    pub per_layer_us: f64,
    pub tpot_ms: f64,
    pub price_per_million: f64,
    /// The overlap model is an approximation (TBO).
    pub approximate: bool,
}

pub fn tpot_theoretical(cm: &CostModel) -> Result<TpotReport> {
    cm.validate()?;
    let per_layer_us = match cm.strategy {
        Overlap::Sbo => cm.attention_us + cm.dispatch_us + cm.moe_us + cm.combine_us,
        Overlap::Tbo => (cm.attention_us + cm.moe_us).max(cm.dispatch_us + cm.combine_us),
    };
    let tpot_ms = cm.n_layer as f64 * per_layer_us / (1000.0 * cm.accept_factor);
    let tokens_per_hour = cm.batch_per_device * 3600.0 / (tpot_ms / 1000.0);
    let price_per_million = cm.price_per_device_hour * 1e6 / tokens_per_hour;
    Ok(TpotReport { per_layer_us, tpot_ms, price_per_million, approximate: cm.strategy == Overlap::Tbo })
}

/// Published per-layer module latencies with the reported TPOT (ms) and
/// price per million output tokens.
pub fn reference_cost_models() -> Vec<(&'static str, CostModel, f64, f64)> {
    let cm = |a, d, m, c, n, s| CostModel {
        attention_us: a,
        dispatch_us: d,
        moe_us: m,
        combine_us: c,
        n_layer: n,
        accept_factor: 1.8,
        strategy: s,
        batch_per_device: default_batch(),
        price_per_device_hour: default_price(),
    };
    vec![
        ("deepseek-v3-tbo", cm(471.0, 275.0, 77.0, 551.0, 61, Overlap::Tbo), 30.0, 0.17),
        ("qwen3-235b-tbo", cm(314.0, 157.0, 29.0, 315.0, 94, Overlap::Tbo), 26.2, 0.15),
        ("scmoe-sbo", cm(264.0, 236.0, 60.0, 472.0, 28, Overlap::Sbo), 16.0, 0.09),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn accept_length_examples() {
        assert_eq!(expected_accept_length(3, 0.0).unwrap(), 1.0);
        assert!((expected_accept_length(1, 0.9).unwrap() - 1.9).abs() < 1e-15);
        assert!((expected_accept_length(1, 0.8).unwrap() - 1.8).abs() < 1e-15);
        assert!(matches!(expected_accept_length(1, 1.1), Err(Error::Parameter(_))));
        let mc = simulate_accept_length(1, 0.9, 1_000_000, &mut RngState::new(0)).unwrap();
        assert!((mc.mean / 1.9 - 1.0).abs() < 0.005, "{mc:?}");
    }

    #[test]
    fn cost_ratio_examples() {
        let p = |gamma, alpha, d, v| SpecDecParams { gamma, alpha, draft_ratio: d, verify_ratio: v };
        let free = specdec_cost_ratio(&p(2, 0.7, 0.0, 1.0)).unwrap();
        assert!((free - 1.0 / expected_accept_length(2, 0.7).unwrap()).abs() < 1e-15);
        let r = specdec_cost_ratio(&p(1, 0.9, 0.0141, 1.0)).unwrap();
        assert!((r - 1.0141 / 1.9).abs() < 1e-15);
        assert!((r - 0.5337).abs() < 1e-4);
        assert_eq!(specdec_cost_ratio(&p(1, 1.0, 0.0, 1.0)).unwrap(), 0.5);
        // break-even: (γ d + 1) / Ω = 1
        let omega = expected_accept_length(1, 0.5).unwrap();
        assert!((specdec_cost_ratio(&p(1, 0.5, omega - 1.0, 1.0)).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn acceptance_counts() {
        let a = acceptance_rate(&[1, 2, 3, 4], &[1, 0, 3, 0]).unwrap();
        assert_eq!((a.rate, a.accepted), (0.5, 2));
        assert!(acceptance_rate(&[], &[]).is_err());
    }

    #[test]
    fn kv_hand_examples() {
        let all2 = kv_alloc_simulate(4, 1, 10, |_, _| 2).unwrap();
        assert!(all2.available[1..].iter().all(|&r| r == 8));
        let all1 = kv_alloc_simulate(4, 1, 10, |_, _| 1).unwrap();
        assert!(all1.available[1..].iter().all(|&r| r == 12));
        assert_eq!(all1.available[0], 8);
        assert!(matches!(kv_alloc_simulate(4, 1, 3, |_, _| 3), Err(Error::Parameter(_))));
    }

    #[test]
    fn kv_bound_for_every_sampler() {
        for s in KvSampler::ALL {
            for mtp in 1..=3 {
                let t = kv_alloc_with(4, mtp, 20_000, s, 7).unwrap();
                assert_eq!((t.violations, t.closed_form_mismatches), (0, 0), "{s:?} mtp={mtp}");
            }
        }
    }

    #[test]
    fn tpot_rows() {
        let rows = reference_cost_models();
        let sbo = tpot_theoretical(&rows[2].1).unwrap();
        assert_eq!(sbo.per_layer_us, 1032.0);
        assert!((sbo.tpot_ms - 16.0).abs() < 0.5);
        assert!((sbo.price_per_million - 0.09).abs() < 0.01);
        for (_, cm, tpot, _) in &rows[..2] {
            let r = tpot_theoretical(cm).unwrap();
            assert!((r.tpot_ms / tpot - 1.0).abs() < 0.15, "{r:?}");
            assert!(r.approximate);
        }
        let collapse = CostModel {
            attention_us: 300.0,
            dispatch_us: 0.0,
            moe_us: 200.0,
            combine_us: 0.0,
            n_layer: 1,
            accept_factor: 1.0,
            strategy: Overlap::Sbo,
            batch_per_device: 1.0,
            price_per_device_hour: 2.0,
        };
        assert_eq!(tpot_theoretical(&collapse).unwrap().tpot_ms, 0.5);
        assert!(matches!(CostModel::from_json(r#"{"attention_us": 1.0}"#), Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn omega_monotone_and_bounded(gamma in 1usize..8, a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let o = expected_accept_length(gamma, lo).unwrap();
            prop_assert!(o <= expected_accept_length(gamma, hi).unwrap());
            prop_assert!(o <= expected_accept_length(gamma + 1, lo).unwrap());
            prop_assert!(o <= gamma as f64 + 1.0);
        }

        #[test]
        fn sbo_is_linear(a in 0.0f64..500.0, d in 0.0f64..500.0, m in 0.0f64..500.0, c in 0.0f64..500.0) {
            let base = |att, dis, moe, com| CostModel {
                attention_us: att, dispatch_us: dis, moe_us: moe, combine_us: com,
                n_layer: 28, accept_factor: 1.8, strategy: Overlap::Sbo,
                batch_per_device: 96.0, price_per_device_hour: 2.0,
            };
            let t = |cm: CostModel| tpot_theoretical(&cm).unwrap().tpot_ms;
            let sum = t(base(a, 0.0, 0.0, 0.0)) + t(base(0.0, d, 0.0, 0.0)) + t(base(0.0, 0.0, m, 0.0)) + t(base(0.0, 0.0, 0.0, c));
            prop_assert!((t(base(a, d, m, c)) - sum).abs() < 1e-9);
        }
    }
}
