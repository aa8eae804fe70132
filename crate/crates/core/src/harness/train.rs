//! Training loop, metrics emission and checkpoints.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::corpus::{Corpus, Split};
use crate::blocks::{Batch, Bound, ForwardOutput, Model, Routing};
use crate::diffcore::{Checkpoint, Graph, RngState, Tensor, Var};
use crate::error::{Error, Result};
use crate::router::{
    grad_norm_ratio, lb_loss, lb_mean_prob_gradient, lb_terms, mean_prob_gradient, mean_std, router_similarity, Ema,
    LbLossConfig, RouterState,
};
use crate::stability::{hidden_z_loss, stability_report, AdamState, StepOutcome, ZLossConfig};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CONFIG_FILE: &str = "config.json";
pub const ABORT_FILE: &str = "abort.json";

/// One metrics line per optimizer step. Wall-clock time goes to a separate
/// file so this one stays bitwise reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub tag: String,
    pub lm_loss: f64,
    /// α-scaled, summed over layers.
    pub lb_loss: f64,
    /// λ-scaled.
    pub z_loss: f64,
    /// Unweighted MTP cross-entropy (`None` without a head).
    pub mtp_loss: Option<f64>,
    pub mtp_weight: f64,
    pub total_loss: f64,
    pub hidden_norm: f64,
    pub hidden_norm_max: f64,
    pub max_abs_activation: f64,
    pub grad_rms_min: f64,
    pub grad_rms_max: f64,
    pub grad_rms_by_class: Vec<[f64; 2]>,
    pub mean_ffn_activated: f64,
    pub std_ffn_activated: f64,
    /// Layer-mean gradient ratio, on steps where it is computed.
    #[serde(rename = "R_g")]
    pub r_g: Option<f64>,
    #[serde(rename = "R_g_ema")]
    pub r_g_ema: Option<f64>,
    pub router_sim: f64,
    pub lr_scale: f64,
    pub skipped_nonfinite_grad: bool,
    pub eps_at_or_above_grad_rms: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct TimingRecord {
    step: u64,
    wall_ms: f64,
}

/// Losses of one forward pass, still on the graph.
pub struct LossParts {
    pub lm: Var,
    pub lb: Var,
    pub z: Var,
    pub mtp: Option<Var>,
    pub total: Var,
}

/// Builds `L_LM + Σ_layers L_LB + L_Z + w·L_MTP` on `g`.
pub fn compose_loss(g: &Graph, cfg: &RunConfig, model: &Model, out: &ForwardOutput) -> Result<LossParts> {
    let lm = g.cross_entropy(out.logits, &out.targets)?;
    let lb_cfg = LbLossConfig { alpha: cfg.loss.alpha, groups: cfg.loss.lb_groups };
    let router_cfg =
        model.config.moe.router_config(cfg.controller.mu, cfg.controller.mu_decay, cfg.controller.update_every);
    let mut lb = g.constant(Tensor::scalar(0.0));
    for r in &out.routing {
        lb = g.add(lb, lb_loss(g, r.probs, &r.decision, &router_cfg, &lb_cfg)?)?;
    }
    let z = hidden_z_loss(g, out.hidden, &ZLossConfig { lambda: cfg.loss.z_lambda })?;
    let mtp = match &out.mtp {
        Some(m) => Some(g.cross_entropy(m.logits, &m.targets)?),
        None => None,
    };
    let mut total = g.add(g.add(lm, lb)?, z)?;
    if let Some(m) = mtp {
        total = g.add(total, g.scale(m, cfg.loss.mtp_weight))?;
    }
    Ok(LossParts { lm, lb, z, mtp, total })
}

/// Model, controllers and optimizer for one run.
pub struct Trainer {
    pub cfg: RunConfig,
    pub model: Model,
    pub routers: Vec<RouterState>,
    pub adam: AdamState,
    /// Steps taken by this trainer (indexes the schedule).
    pub step: u64,
    corpus: Corpus,
    batches: RngState,
    rg_ema: Ema,
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let corpus = cfg.corpus.load(cfg.validation_fraction)?;
        Self::with_corpus(cfg, corpus)
    }

    pub fn with_corpus(cfg: RunConfig, corpus: Corpus) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(cfg.model.clone(), cfg.seed)?;
        let c = cfg.controller;
        let routers = model.router_states(c.mu, c.mu_decay, c.update_every)?;
        let adam = AdamState::new(&model.store, cfg.optimizer)?;
        Self::from_parts(cfg, corpus, model, routers, adam)
    }

    /// Trains an existing model (e.g. a grown one) under `cfg`'s schedule.
    pub fn from_parts(
        cfg: RunConfig,
        corpus: Corpus,
        model: Model,
        routers: Vec<RouterState>,
        adam: AdamState,
    ) -> Result<Self> {
        cfg.validate()?;
        if routers.len() != model.layers.len() || adam.m.len() != model.store.len() {
            return Err(Error::State("routers or optimizer do not match the model".into()));
        }
        if corpus.part(Split::Train).len() < cfg.schedule.seq_len {
            return Err(Error::Config("training split shorter than one window".into()));
        }
        let batches = RngState::new(cfg.seed).fork(1);
        Ok(Self { cfg, model, routers, adam, step: 0, corpus, batches, rg_ema: Ema::new(0.9) })
    }

    /// Swaps in a different model (same corpus, batch stream and step).
    pub fn replace_model(
        self,
        cfg: RunConfig,
        model: Model,
        routers: Vec<RouterState>,
        adam: AdamState,
    ) -> Result<Self> {
        let Trainer { step, corpus, batches, rg_ema, .. } = self;
        let mut t = Self::from_parts(cfg, corpus, model, routers, adam)?;
        t.step = step;
        t.batches = batches;
        t.rg_ema = rg_ema;
        Ok(t)
    }

    pub fn corpus(&self) -> &Corpus {
        &self.corpus
    }

    pub fn done(&self) -> bool {
        self.step as usize >= self.cfg.schedule.steps
    }

    /// One optimizer step. A non-finite loss is an error (the caller keeps
    /// the last good checkpoint); a non-finite gradient skips the update.
    pub fn train_step(&mut self) -> Result<MetricsRecord> {
        let s = self.cfg.schedule;
        let batch = self.corpus.sample_batch(Split::Train, s.batch_size, s.seq_len, &mut self.batches)?;
        let g = Graph::new();
        let p = Bound::new(&g, &self.model.store, true);
        let out = self.model.forward(&g, &p, &batch, Routing::Live(&self.routers))?;
        let parts = compose_loss(&g, &self.cfg, &self.model, &out)?;
        let val = |v: Var| g.value(v).item();
        let total = val(parts.total);
        if !total.is_finite() {
            return Err(Error::NonFinite(format!("total loss {total} at step {}", self.step)));
        }

        let rg_now = (self.step as usize).is_multiple_of(self.cfg.rg_every);
        let r_g = if rg_now { Some(self.grad_ratio(&g, &out, parts.lm)?) } else { None };
        let r_g_ema = match r_g {
            Some(x) => Some(self.rg_ema.update(x)),
            None => self.rg_ema.value,
        };

        let grads = g.backward(parts.total)?;
        self.model.store.zero_grads();
        p.accumulate(&mut self.model.store, &grads)?;
        let hidden = g.value(out.hidden);
        let stab = stability_report(&self.model.store, &hidden, self.cfg.optimizer.eps);
        let lr_scale = s.lr_scale(self.step as usize);
        let outcome = self.adam.step(&mut self.model.store, lr_scale)?;

        let mut counts = Vec::new();
        for (state, r) in self.routers.iter_mut().zip(&out.routing) {
            counts.extend(r.decision.ffn_counts().into_iter().map(|c| c as f64));
            state.observe(&r.decision);
            state.end_batch()?;
        }
        let (mean_ffn, std_ffn) = mean_std(&counts);
        let mut sim = 0.0;
        for l in &self.model.layers {
            sim += router_similarity(self.model.store.value(l.moe.w_r))?.value;
        }
        let rec = MetricsRecord {
            step: self.step,
            tag: self.cfg.tag.clone(),
            lm_loss: val(parts.lm),
            lb_loss: val(parts.lb),
            z_loss: val(parts.z),
            mtp_loss: parts.mtp.map(val),
            mtp_weight: self.cfg.loss.mtp_weight,
            total_loss: total,
            hidden_norm: stab.hidden_norm,
            hidden_norm_max: stab.hidden_norm_max,
            max_abs_activation: stab.max_abs_activation,
            grad_rms_min: stab.grad_rms_min,
            grad_rms_max: stab.grad_rms_max,
            grad_rms_by_class: stab.grad_rms_by_class,
            mean_ffn_activated: mean_ffn,
            std_ffn_activated: std_ffn,
            r_g,
            r_g_ema,
            router_sim: sim / self.model.layers.len() as f64,
            lr_scale,
            skipped_nonfinite_grad: outcome == StepOutcome::SkippedNonFinite,
            eps_at_or_above_grad_rms: stab.eps_at_or_above_grad_rms,
        };
        self.step += 1;
        Ok(rec)
    }

    /// Mean over layers of `‖α∇L_LB‖ / ‖∇L_LM‖` on the mean routing
    /// probabilities, with the LM gradient from its own backward pass.
    fn grad_ratio(&self, g: &Graph, out: &ForwardOutput, lm: Var) -> Result<f64> {
        let lm_grads = g.backward(lm)?;
        let lb_cfg = LbLossConfig { alpha: self.cfg.loss.alpha, groups: self.cfg.loss.lb_groups };
        let mut acc = 0.0;
        for (state, r) in self.routers.iter().zip(&out.routing) {
            let terms = lb_terms(&r.decision, &state.config, &lb_cfg)?;
            let lb_g = lb_mean_prob_gradient(&terms, lb_cfg.alpha);
            let lm_g = mean_prob_gradient(&lm_grads.get_or_zeros(r.probs, g.value(r.probs).shape()));
            acc += grad_norm_ratio(&lb_g, &lm_g, lb_cfg.alpha)?.value;
        }
        Ok(acc / out.routing.len() as f64)
    }

    /// Mean LM and MTP cross-entropy over `n` fixed validation batches,
    /// routed by the current controllers without updating them.
    pub fn evaluate(&self, n: usize) -> Result<EvalResult> {
        evaluate(
            &self.model,
            &self.routers,
            &self.corpus,
            self.cfg.schedule.batch_size,
            self.cfg.schedule.seq_len,
            n,
            self.cfg.seed,
        )
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let meta = serde_json::json!({
            "step": self.step,
            "optimizer_step": self.adam.step,
            "model": self.model.config,
            "controller": self.cfg.controller,
            "router_mu": self.routers.iter().map(|r| r.mu).collect::<Vec<_>>(),
        });
        let mut ck = Checkpoint::new(self.cfg.checkpoint_dtype, meta);
        for p in self.model.store.iter() {
            ck.push(p.name.clone(), Some(p.class), p.value.clone());
        }
        for (i, r) in self.routers.iter().enumerate() {
            ck.push(format!("router_bias.{i}"), None, Tensor::new(vec![1, r.bias.len()], r.bias.clone()).expect("row"));
        }
        ck
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub lm_loss: f64,
    pub mtp_loss: Option<f64>,
    pub batches: usize,
}

/// Validation loss on `n` batches drawn from a stream fixed by `seed`.
pub fn evaluate(
    model: &Model,
    routers: &[RouterState],
    corpus: &Corpus,
    batch_size: usize,
    seq_len: usize,
    n: usize,
    seed: u64,
) -> Result<EvalResult> {
    if n == 0 {
        return Err(Error::EmptyBatch("no evaluation batches".into()));
    }
    let mut rng = RngState::new(seed).fork(2);
    let (mut lm, mut mtp) = (0.0, 0.0);
    let mut has_mtp = false;
    for _ in 0..n {
        let batch = corpus.sample_batch(Split::Validation, batch_size, seq_len, &mut rng)?;
        let (l, m) = eval_batch(model, routers, &batch)?;
        lm += l;
        if let Some(m) = m {
            mtp += m;
            has_mtp = true;
        }
    }
    Ok(EvalResult { lm_loss: lm / n as f64, mtp_loss: has_mtp.then(|| mtp / n as f64), batches: n })
}

fn eval_batch(model: &Model, routers: &[RouterState], batch: &Batch) -> Result<(f64, Option<f64>)> {
    let g = Graph::new();
    let p = Bound::new(&g, &model.store, false);
    let out = model.forward(&g, &p, batch, Routing::Live(routers))?;
    let lm = g.value(g.cross_entropy(out.logits, &out.targets)?).item();
    let mtp = match &out.mtp {
        Some(m) => Some(g.value(g.cross_entropy(m.logits, &m.targets)?).item()),
        None => None,
    };
    Ok((lm, mtp))
}

/// Rebuilds a model and its router biases from a checkpoint.
pub fn load_checkpoint(ck: &Checkpoint) -> Result<(Model, Vec<RouterState>)> {
    let meta = &ck.metadata;
    let cfg = serde_json::from_value(meta["model"].clone()).map_err(|e| Error::Format(format!("model config: {e}")))?;
    let ctrl: super::config::ControllerConfig =
        serde_json::from_value(meta["controller"].clone()).map_err(|e| Error::Format(format!("controller: {e}")))?;
    let mut model = Model::new(cfg, 0)?;
    for p in model.store.iter_mut() {
        let t = ck.get(&p.name).ok_or_else(|| Error::Format(format!("missing tensor {}", p.name)))?;
        if t.shape() != p.value.shape() {
            return Err(Error::Format(format!("shape mismatch for {}", p.name)));
        }
        p.value = t.clone();
    }
    let mut routers = model.router_states(ctrl.mu, ctrl.mu_decay, ctrl.update_every)?;
    for (i, r) in routers.iter_mut().enumerate() {
        let b = ck.get(&format!("router_bias.{i}")).ok_or_else(|| Error::Format(format!("missing router_bias.{i}")))?;
        if b.len() != r.bias.len() {
            return Err(Error::Format(format!("router_bias.{i} has {} entries", b.len())));
        }
        r.bias = b.data().to_vec();
    }
    Ok((model, routers))
}

/// Outcome of [`train_run`].
pub struct RunResult {
    pub records: Vec<MetricsRecord>,
    pub trainer: Trainer,
    pub eval: EvalResult,
    pub checkpoint_path: Option<PathBuf>,
}

/// Streams JSONL records to the run directory.
struct RunWriter {
    dir: PathBuf,
    metrics: BufWriter<File>,
    timing: BufWriter<File>,
}

impl RunWriter {
    fn create(dir: &Path, cfg: &RunConfig) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(CONFIG_FILE), cfg.to_json()?)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            metrics: BufWriter::new(File::create(dir.join(METRICS_FILE))?),
            timing: BufWriter::new(File::create(dir.join(TIMING_FILE))?),
        })
    }

    fn record(&mut self, rec: &MetricsRecord, wall_ms: f64) -> Result<()> {
        serde_json::to_writer(&mut self.metrics, rec)?;
        self.metrics.write_all(b"\n")?;
        self.metrics.flush()?;
        serde_json::to_writer(&mut self.timing, &TimingRecord { step: rec.step, wall_ms })?;
        self.timing.write_all(b"\n")?;
        self.timing.flush()?;
        Ok(())
    }

    fn checkpoint(&self, t: &Trainer) -> Result<PathBuf> {
        let path = self.dir.join(CHECKPOINT_FILE);
        t.checkpoint().write(&path)?;
        Ok(path)
    }
}

/// Trains `trainer` to the end of its schedule, writing metrics and
/// checkpoints under `out` (or `cfg.out_dir`) when given.
pub fn run_trainer(trainer: Trainer, out: Option<&Path>) -> Result<RunResult> {
    run_trainer_with(trainer, out, |_| {})
}

/// [`run_trainer`] with a hook called before every step (fault injection,
/// probes). On a non-finite loss the last periodic checkpoint is kept and
/// `abort.json` records the failing step.
pub fn run_trainer_with(
    mut trainer: Trainer,
    out: Option<&Path>,
    mut before_step: impl FnMut(&mut Trainer),
) -> Result<RunResult> {
    let dir = out.map(Path::to_path_buf).or_else(|| trainer.cfg.out_dir.clone());
    let mut writer = match &dir {
        Some(d) => Some(RunWriter::create(d, &trainer.cfg)?),
        None => None,
    };
    let mut records = Vec::with_capacity(trainer.cfg.schedule.steps);
    let mut checkpoint_path = None;
    while !trainer.done() {
        before_step(&mut trainer);
        let t0 = Instant::now();
        let rec = match trainer.train_step() {
            Ok(r) => r,
            Err(e) => {
                if let Some(w) = &writer {
                    let info = serde_json::json!({"step": trainer.step, "kind": e.kind(), "error": e.to_string()});
                    std::fs::write(w.dir.join(ABORT_FILE), info.to_string())?;
                }
                return Err(e);
            }
        };
        if let Some(w) = writer.as_mut() {
            w.record(&rec, t0.elapsed().as_secs_f64() * 1e3)?;
            if let Some(every) = trainer.cfg.checkpoint_every {
                if (trainer.step as usize).is_multiple_of(every) {
                    checkpoint_path = Some(w.checkpoint(&trainer)?);
                }
            }
        }
        records.push(rec);
    }
    if let Some(w) = &writer {
        checkpoint_path = Some(w.checkpoint(&trainer)?);
    }
    let eval = trainer.evaluate(trainer.cfg.eval_batches)?;
    Ok(RunResult { records, trainer, eval, checkpoint_path })
}

/// Builds the corpus, trains from scratch and evaluates.
pub fn train_run(cfg: RunConfig, out: Option<&Path>) -> Result<RunResult> {
    run_trainer(Trainer::new(cfg)?, out)
}
