//! Paired multi-seed ablations with declared direction and tolerance.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::train::{run_trainer, EvalResult, MetricsRecord, Trainer};
use crate::blocks::LayerKind;
use crate::error::{Error, Result};
use crate::router::mean_std;
use crate::scaling::{grow_optimizer, grow_routers, stack_grow, GrowthPlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    ZeroExpertVsFixedTopk,
    ScmoeVsInterleaved,
    ZlossOnOff,
    GrowthVsRandom,
    EpsSweep,
}

impl Experiment {
    pub const ALL: [Experiment; 5] = [
        Experiment::ZeroExpertVsFixedTopk,
        Experiment::ScmoeVsInterleaved,
        Experiment::ZlossOnOff,
        Experiment::GrowthVsRandom,
        Experiment::EpsSweep,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::ZeroExpertVsFixedTopk => "zero-expert-vs-fixed-topk",
            Experiment::ScmoeVsInterleaved => "scmoe-vs-interleaved",
            Experiment::ZlossOnOff => "zloss-on-off",
            Experiment::GrowthVsRandom => "growth-vs-random",
            Experiment::EpsSweep => "eps-sweep",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|e| e.name() == s).ok_or_else(|| Error::Config(format!("unknown experiment {s:?}")))
    }
}

/// Knobs shared by every experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationOptions {
    pub base: RunConfig,
    pub seeds: Vec<u64>,
    /// Peak learning rate of the deliberately unstable z-loss config.
    pub unstable_lr: f64,
    /// λ of the z-loss arm.
    pub z_lambda_on: f64,
    /// Fraction of the token budget spent on the half-depth model before
    /// stacking.
    pub growth_fraction: f64,
}

impl Default for AblationOptions {
    fn default() -> Self {
        Self {
            base: RunConfig::small(),
            seeds: vec![0, 1, 2],
            unstable_lr: 3e-2,
            z_lambda_on: 1e-3,
            growth_fraction: 1.0 / 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub name: String,
    /// Validation LM loss at the end of each seed's run.
    pub final_losses: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    /// Training LM loss per step, one curve per seed.
    pub curves: Vec<Vec<f64>>,
    /// Experiment-specific per-seed scalars, e.g. the max hidden norm.
    pub extra: Vec<(String, Vec<f64>)>,
}

impl ArmSummary {
    pub fn metric(&self, key: &str) -> &[f64] {
        self.extra.iter().find(|(k, _)| k == key).map_or(&[], |(_, v)| v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub experiment: Experiment,
    pub direction: String,
    pub tolerance: String,
    pub seeds: Vec<u64>,
    pub arms: Vec<ArmSummary>,
    pub per_seed_pass: Vec<bool>,
    /// At least two thirds of the seeds hold the direction.
    pub passed: bool,
    pub notes: Vec<String>,
}

impl AblationReport {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "experiment: {}", self.experiment.name());
        let _ = writeln!(s, "direction:  {}", self.direction);
        let _ = writeln!(s, "tolerance:  {}", self.tolerance);
        let _ = writeln!(s, "{:<24} {:>10} {:>10}  per-seed final loss", "arm", "mean", "std");
        for a in &self.arms {
            let per: Vec<String> = a.final_losses.iter().map(|x| format!("{x:.4}")).collect();
            let _ = writeln!(s, "{:<24} {:>10.4} {:>10.4}  {}", a.name, a.mean, a.std, per.join(" "));
            for (k, v) in &a.extra {
                let per: Vec<String> = v.iter().map(|x| format!("{x:.4}")).collect();
                let _ = writeln!(s, "  {:<22} {}", k, per.join(" "));
            }
        }
        let marks: Vec<&str> = self.per_seed_pass.iter().map(|&p| if p { "ok" } else { "x" }).collect();
        let _ = writeln!(s, "per-seed: {}  verdict: {}", marks.join(" "), if self.passed { "PASS" } else { "FAIL" });
        for n in &self.notes {
            let _ = writeln!(s, "note: {n}");
        }
        s
    }
}

/// Every arm must train for the same steps, batch and window on the same
/// seeds and corpus.
pub fn check_budgets(arms: &[(String, Vec<RunConfig>)]) -> Result<()> {
    let Some((_, first)) = arms.first() else {
        return Err(Error::Config("no arms".into()));
    };
    let key = |c: &RunConfig| (c.schedule.steps, c.schedule.batch_size, c.schedule.seq_len, c.seed, c.corpus.clone());
    for (name, cfgs) in arms {
        if cfgs.len() != first.len() {
            return Err(Error::Config(format!("arm {name} has {} seeds, expected {}", cfgs.len(), first.len())));
        }
        for (a, b) in cfgs.iter().zip(first) {
            if key(a) != key(b) {
                return Err(Error::Config(format!("arm {name} does not share the token budget and seed set")));
            }
        }
    }
    Ok(())
}

struct ArmRun {
    records: Vec<MetricsRecord>,
    eval: EvalResult,
}

fn summarize(name: &str, runs: &[ArmRun], extra: Vec<(String, Vec<f64>)>) -> ArmSummary {
    let final_losses: Vec<f64> = runs.iter().map(|r| r.eval.lm_loss).collect();
    let (mean, std) = mean_std(&final_losses);
    let curves = runs.iter().map(|r| r.records.iter().map(|m| m.lm_loss).collect()).collect();
    ArmSummary { name: name.into(), final_losses, mean, std, curves, extra }
}

fn run_arm(cfgs: &[RunConfig], out: Option<&Path>, arm: &str) -> Result<Vec<ArmRun>> {
    cfgs.iter()
        .map(|c| {
            let dir = out.map(|o| o.join(arm).join(format!("seed{}", c.seed)));
            let r = run_trainer(Trainer::new(c.clone())?, dir.as_deref())?;
            Ok(ArmRun { records: r.records, eval: r.eval })
        })
        .collect()
}

fn seeded(base: &RunConfig, seeds: &[u64], tag: &str, edit: impl Fn(&mut RunConfig)) -> Vec<RunConfig> {
    seeds
        .iter()
        .map(|&s| {
            let mut c = base.clone();
            c.seed = s;
            c.tag = tag.into();
            edit(&mut c);
            c
        })
        .collect()
}

fn max_hidden_norm(r: &ArmRun) -> f64 {
    r.records.iter().map(|m| m.hidden_norm_max).fold(0.0, f64::max)
}

/// Mean activated FFN experts over the second half of training.
fn late_mean_ffn(r: &ArmRun) -> f64 {
    let half = &r.records[r.records.len() / 2..];
    half.iter().map(|m| m.mean_ffn_activated).sum::<f64>() / half.len() as f64
}

fn late_std_ffn(r: &ArmRun) -> f64 {
    let half = &r.records[r.records.len() / 2..];
    half.iter().map(|m| m.std_ffn_activated).sum::<f64>() / half.len() as f64
}

fn pass_rate(per_seed: &[bool]) -> bool {
    3 * per_seed.iter().filter(|&&p| p).count() >= 2 * per_seed.len()
}

/// Runs one experiment, writing per-run directories under `out` if given.
pub fn ablation(exp: Experiment, opts: &AblationOptions, out: Option<&Path>) -> Result<AblationReport> {
    opts.base.validate()?;
    if opts.seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let base = &opts.base;
    let seeds = &opts.seeds;
    let mut notes = Vec::new();
    let (direction, tolerance, arms, per_seed) = match exp {
        Experiment::ZeroExpertVsFixedTopk => {
            let ke = base.model.moe.expected_ffn;
            let zero = seeded(base, seeds, "zero-expert", |_| {});
            let fixed = seeded(base, seeds, "fixed-topk", |c| {
                c.model.moe.n_zero = 0;
                c.model.moe.top_k = ke;
            });
            if base.model.moe.n_zero == 0 {
                return Err(Error::Config("zero-expert arm needs n_zero > 0".into()));
            }
            let named = vec![("zero-expert".to_string(), zero), ("fixed-topk".to_string(), fixed)];
            check_budgets(&named)?;
            let a = run_arm(&named[0].1, out, "zero-expert")?;
            let b = run_arm(&named[1].1, out, "fixed-topk")?;
            let per_seed: Vec<bool> = a.iter().zip(&b).map(|(x, y)| x.eval.lm_loss <= y.eval.lm_loss).collect();
            let means: Vec<f64> = a.iter().map(late_mean_ffn).collect();
            let (mm, _) = mean_std(&means);
            notes.push(format!(
                "zero-expert arm activates {mm:.4} FFN experts per token on average over the second half (target {ke}, relative gap {:.3}%)",
                100.0 * (mm - ke as f64).abs() / ke as f64
            ));
            let extra = vec![
                ("late_mean_ffn".to_string(), means),
                ("late_std_ffn".to_string(), a.iter().map(late_std_ffn).collect()),
            ];
            (
                "zero-expert final loss <= fixed top-k final loss at matched expected FFN compute".to_string(),
                "none (paired per seed)".to_string(),
                vec![summarize("zero-expert", &a, extra), summarize("fixed-topk", &b, vec![])],
                per_seed,
            )
        }
        Experiment::ScmoeVsInterleaved => {
            let sc = seeded(base, seeds, "scmoe", |c| c.model.layer_kind = LayerKind::Shortcut);
            let il = seeded(base, seeds, "interleaved", |c| c.model.layer_kind = LayerKind::Interleaved);
            check_budgets(&[("scmoe".into(), sc.clone()), ("interleaved".into(), il.clone())])?;
            let a = run_arm(&sc, out, "scmoe")?;
            let b = run_arm(&il, out, "interleaved")?;
            let per_seed = a
                .iter()
                .zip(&b)
                .map(|(x, y)| (x.eval.lm_loss - y.eval.lm_loss).abs() < 0.02 * y.eval.lm_loss)
                .collect();
            (
                "shortcut and interleaved layers reach the same final loss".to_string(),
                "|difference| < 2% of the interleaved loss".to_string(),
                vec![summarize("scmoe", &a, vec![]), summarize("interleaved", &b, vec![])],
                per_seed,
            )
        }
        Experiment::ZlossOnOff => {
            let lr = opts.unstable_lr;
            let on_l = opts.z_lambda_on;
            let on = seeded(base, seeds, "zloss-on", |c| {
                c.optimizer.lr = crate::stability::PerClass::uniform(lr);
                c.loss.z_lambda = on_l;
            });
            let off = seeded(base, seeds, "zloss-off", |c| {
                c.optimizer.lr = crate::stability::PerClass::uniform(lr);
                c.loss.z_lambda = 0.0;
            });
            check_budgets(&[("on".into(), on.clone()), ("off".into(), off.clone())])?;
            let a = run_arm(&on, out, "zloss-on")?;
            let b = run_arm(&off, out, "zloss-off")?;
            let per_seed = a
                .iter()
                .zip(&b)
                .map(|(x, y)| max_hidden_norm(x) < max_hidden_norm(y) && x.eval.lm_loss <= 1.02 * y.eval.lm_loss)
                .collect();
            notes.push(format!("unstable config: uniform peak lr {lr}, lambda {on_l} vs 0"));
            (
                "z-loss lowers the max final hidden-state L2 norm".to_string(),
                "strictly lower max norm and LM loss at most 2% above the off arm".to_string(),
                vec![
                    summarize(
                        "zloss-on",
                        &a,
                        vec![("max_hidden_norm".into(), a.iter().map(max_hidden_norm).collect())],
                    ),
                    summarize(
                        "zloss-off",
                        &b,
                        vec![("max_hidden_norm".into(), b.iter().map(max_hidden_norm).collect())],
                    ),
                ],
                per_seed,
            )
        }
        Experiment::GrowthVsRandom => {
            let random = seeded(base, seeds, "random-init", |_| {});
            let grown = seeded(base, seeds, "grown", |_| {});
            check_budgets(&[("random".into(), random.clone()), ("grown".into(), grown.clone())])?;
            let b = run_arm(&random, out, "random-init")?;
            let mut a = Vec::new();
            let mut at_growth = Vec::new();
            for c in &grown {
                let (run, spike) = growth_run(c, opts.growth_fraction, out)?;
                a.push(run);
                at_growth.push(spike);
            }
            let p = growth_steps(base, opts.growth_fraction)?;
            let random_at: Vec<f64> = b.iter().map(|r| r.records[p].lm_loss).collect();
            let per_seed = a.iter().zip(&b).map(|(x, y)| x.eval.lm_loss < y.eval.lm_loss).collect();
            let crossings: Vec<f64> = a
                .iter()
                .zip(&b)
                .map(|(x, y)| crossover_step(&lm_curve(x), &lm_curve(y), p, 50).map_or(f64::NAN, |s| s as f64))
                .collect();
            notes.push(format!(
                "half-depth model trained for {p} of {} steps, then stacked twice; schedule position kept",
                base.schedule.steps
            ));
            (
                "grown model ends below the random-init model at equal tokens".to_string(),
                "strictly lower final loss".to_string(),
                vec![
                    summarize(
                        "grown",
                        &a,
                        vec![("loss_after_growth".into(), at_growth), ("crossover_step".into(), crossings)],
                    ),
                    summarize("random-init", &b, vec![("loss_at_growth_step".into(), random_at)]),
                ],
                per_seed,
            )
        }
        Experiment::EpsSweep => {
            let eps = [1e-16, 1e-12, 1e-3];
            let cfgs: Vec<(String, Vec<RunConfig>)> = eps
                .iter()
                .map(|&e| {
                    let name = format!("eps={e:e}");
                    (name.clone(), seeded(base, seeds, &name, |c| c.optimizer.eps = e))
                })
                .collect();
            check_budgets(&cfgs)?;
            let runs: Vec<Vec<ArmRun>> = cfgs.iter().map(|(n, c)| run_arm(c, out, n)).collect::<Result<_>>()?;
            let per_seed = runs[0]
                .iter()
                .zip(&runs[1])
                .map(|(x, y)| (x.eval.lm_loss - y.eval.lm_loss).abs() < 0.01 * x.eval.lm_loss)
                .collect();
            notes.push("eps=1e-3 arm is reported only; it sits near the gradient RMS".into());
            let arms = cfgs
                .iter()
                .zip(&runs)
                .map(|((n, _), r)| {
                    let flagged = r
                        .iter()
                        .map(|x| {
                            x.records.iter().filter(|m| m.eps_at_or_above_grad_rms).count() as f64
                                / x.records.len() as f64
                        })
                        .collect();
                    let min_rms = r
                        .iter()
                        .map(|x| x.records.iter().map(|m| m.grad_rms_min).fold(f64::INFINITY, f64::min))
                        .collect();
                    summarize(n, r, vec![("eps_flag_fraction".into(), flagged), ("min_grad_rms".into(), min_rms)])
                })
                .collect();
            (
                "eps 1e-16 and 1e-12 (both far below the gradient RMS) reach the same final loss".to_string(),
                "|difference| < 1%".to_string(),
                arms,
                per_seed,
            )
        }
    };
    let passed = pass_rate(&per_seed);
    Ok(AblationReport {
        experiment: exp,
        direction,
        tolerance,
        seeds: seeds.clone(),
        arms,
        per_seed_pass: per_seed,
        passed,
        notes,
    })
}

fn lm_curve(r: &ArmRun) -> Vec<f64> {
    r.records.iter().map(|m| m.lm_loss).collect()
}

fn moving_average(x: &[f64], window: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    let mut acc = 0.0;
    for i in 0..x.len() {
        acc += x[i];
        if i >= window {
            acc -= x[i - window];
        }
        out.push(acc / (i + 1).min(window) as f64);
    }
    out
}

/// First step at or after `from` where the smoothed `a` curve is below the
/// smoothed `b` curve and stays below until the end.
pub fn crossover_step(a: &[f64], b: &[f64], from: usize, window: usize) -> Option<usize> {
    let n = a.len().min(b.len());
    if from >= n {
        return None;
    }
    let (sa, sb) = (moving_average(&a[..n], window), moving_average(&b[..n], window));
    let last_above = (from..n).rev().find(|&i| sa[i] >= sb[i]);
    match last_above {
        None => Some(from),
        Some(i) if i + 1 < n => Some(i + 1),
        Some(_) => None,
    }
}

fn growth_steps(cfg: &RunConfig, fraction: f64) -> Result<usize> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config("growth_fraction must lie in (0, 1)".into()));
    }
    if !cfg.model.n_layers.is_multiple_of(2) {
        return Err(Error::Config("growth needs an even layer count".into()));
    }
    let p = (cfg.schedule.steps as f64 * fraction).round() as usize;
    if p == 0 || p >= cfg.schedule.steps {
        return Err(Error::Config("growth point must fall inside the schedule".into()));
    }
    Ok(p)
}

/// Trains a half-depth copy of `cfg` for the first part of the schedule,
/// stacks it to full depth and finishes the schedule. Returns the run and
/// the training loss on the first step after stacking.
fn growth_run(cfg: &RunConfig, fraction: f64, out: Option<&Path>) -> Result<(ArmRun, f64)> {
    let p = growth_steps(cfg, fraction)?;
    let mut half = cfg.clone();
    half.model.n_layers = cfg.model.n_layers / 2;
    half.tag = format!("{}-half", cfg.tag);
    let mut t = Trainer::new(half)?;
    let mut records = Vec::with_capacity(cfg.schedule.steps);
    while (t.step as usize) < p {
        records.push(t.train_step()?);
    }
    let t = regrow(t, cfg, &GrowthPlan::new(2))?;
    let dir = out.map(|o| o.join("grown").join(format!("seed{}", cfg.seed)));
    let r = run_trainer(t, dir.as_deref())?;
    let after = r.records.first().map_or(f64::NAN, |m| m.lm_loss);
    records.extend(r.records);
    Ok((ArmRun { records, eval: r.eval }, after))
}

/// Replaces the trainer's model by its stacked version, keeping the step,
/// batch stream and schedule position.
pub fn regrow(t: Trainer, target: &RunConfig, plan: &GrowthPlan) -> Result<Trainer> {
    let grown = stack_grow(&t.model, plan)?;
    if grown.config != target.model {
        return Err(Error::Config("grown model does not match the target config".into()));
    }
    let routers = grow_routers(&t.routers, plan)?;
    let adam = grow_optimizer(&t.model, &grown, &t.adam, plan)?;
    t.replace_model(target.clone(), grown, routers, adam)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crossover_detection() {
        let b = vec![1.0; 10];
        let a: Vec<f64> = (0..10).map(|i| 1.5 - 0.125 * i as f64).collect();
        assert_eq!(crossover_step(&a, &b, 0, 1), Some(5));
        assert_eq!(crossover_step(&b, &a, 0, 1), None);
        assert_eq!(crossover_step(&[0.0; 4], &b, 2, 3), Some(2));
        assert_eq!(crossover_step(&a, &b, 20, 1), None);
    }

    #[test]
    fn names_round_trip() {
        for e in Experiment::ALL {
            assert_eq!(Experiment::parse(e.name()).unwrap(), e);
            assert_eq!(serde_json::to_string(&e).unwrap(), format!("\"{}\"", e.name()));
        }
        assert!(Experiment::parse("nope").is_err());
    }

    #[test]
    fn mismatched_budgets_are_config_errors() {
        let base = RunConfig::small();
        let a = seeded(&base, &[0, 1], "a", |_| {});
        let b = seeded(&base, &[0, 1], "b", |c| c.schedule.steps += 1);
        assert!(matches!(check_budgets(&[("a".into(), a.clone()), ("b".into(), b)]), Err(Error::Config(_))));
        let c = seeded(&base, &[0, 2], "c", |_| {});
        assert!(check_budgets(&[("a".into(), a.clone()), ("c".into(), c)]).is_err());
        let d = seeded(&base, &[0, 1], "d", |c| c.model.layer_kind = LayerKind::Interleaved);
        check_budgets(&[("a".into(), a), ("d".into(), d)]).unwrap();
    }

    #[test]
    fn pass_rule_is_two_thirds() {
        assert!(pass_rate(&[true, true, false]));
        assert!(!pass_rate(&[true, false, false]));
        assert!(pass_rate(&[true]));
    }
}
