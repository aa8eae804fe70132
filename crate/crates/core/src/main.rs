use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;
use sha2::{Digest, Sha256};

use flashlab::analytics::{
    expected_accept_length, kv_alloc_with, reference_cost_models, simulate_accept_length, specdec_cost_ratio,
    tpot_theoretical, CostModel, KvSampler, SpecDecParams,
};
use flashlab::diffcore::{Checkpoint, RngState};
use flashlab::harness::ablation::{ablation, AblationOptions, Experiment};
use flashlab::harness::config::RunConfig;
use flashlab::harness::corpus::{Corpus, Split};
use flashlab::harness::draft::{measure_acceptance, DraftSource};
use flashlab::harness::gradsuite::loss_gradient_suite;
use flashlab::harness::stats::{routing_stats_report, CorpusSample};
use flashlab::harness::train::{load_checkpoint, train_run, METRICS_FILE};
use flashlab::scaling::{grow_routers, stack_grow, transfer_hparams, transfer_model_config, GrowthPlan, HParams};
use flashlab::stability::PerClass;
use flashlab::{Error, Result};

#[derive(Parser)]
#[command(name = "flashlab", version, about = "Zero-computation-expert MoE laboratory")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one run from a JSON config.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Override the schedule length.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Run a multi-seed ablation and write its report.
    Ablate {
        #[arg(long)]
        experiment: String,
        /// First seed; `--seeds` consecutive seeds are used.
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        /// Base run config (defaults to the small preset).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stack a checkpoint's layers into a deeper checkpoint.
    Grow {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 2)]
        rate: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Transfer a proxy config (and optional per-class hparams) to a wider model.
    Transfer {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        factor: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Activated-FFN statistics of a checkpoint on named corpora.
    RouteStats {
        #[arg(long)]
        checkpoint: PathBuf,
        /// `name=path` pairs.
        #[arg(long = "corpus", required = true)]
        corpora: Vec<String>,
        #[arg(long, default_value_t = 64)]
        seq_len: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accept length and cost ratio of speculative decoding.
    Specdec {
        #[arg(long, default_value_t = 1)]
        gamma: usize,
        /// Acceptance rate; measured from `--checkpoint` when omitted.
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long, default_value_t = 0.0)]
        draft_ratio: f64,
        #[arg(long, default_value_t = 1.0)]
        verify_ratio: f64,
        /// Monte Carlo trials (needs `--seed`).
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// UTF-8 text for measuring acceptance (validation split is used).
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        seq_len: usize,
        #[arg(long, default_value_t = 64)]
        windows: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulate KV-slot pre-allocation under the overlapped scheduler.
    KvSim {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        mtp: usize,
        #[arg(long, default_value_t = 100_000)]
        iters: usize,
        #[arg(long, value_enum, default_value_t = SamplerArg::All)]
        sampler: SamplerArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Theoretical time per output token from per-layer latencies.
    Tpot {
        /// Cost-model JSON; all reference rows when omitted.
        #[arg(long)]
        cost: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every training loss.
    GradCheck {
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        instances: u64,
        #[arg(long, default_value_t = 4)]
        entries: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SamplerArg {
    All,
    Uniform,
    AlwaysMin,
    AlwaysMax,
    Alternate,
    Burst,
}

fn write_out(out: Option<&Path>, name: &str, body: &str) -> Result<()> {
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(name), body)?;
    }
    Ok(())
}

fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

fn train(config: Option<PathBuf>, seed: u64, out: PathBuf, steps: Option<usize>) -> Result<()> {
    let mut cfg = match config {
        Some(p) => RunConfig::read(&p)?,
        None => RunConfig::desk(),
    };
    cfg.seed = seed;
    if let Some(s) = steps {
        cfg.schedule.steps = s;
        cfg.schedule.warmup = cfg.schedule.warmup.min(s);
    }
    let corpus = cfg.corpus.load(cfg.validation_fraction)?;
    if corpus.is_small() {
        eprintln!("warning: corpus has {} bytes; at least 1 MiB is recommended", corpus.len());
    }
    let r = train_run(cfg, Some(&out))?;
    let last = r.records.last().expect("at least one step");
    let summary = json!({
        "steps": r.records.len(),
        "final_lm_loss": last.lm_loss,
        "validation_lm_loss": r.eval.lm_loss,
        "validation_mtp_loss": r.eval.mtp_loss,
        "metrics_sha256": sha256_file(&out.join(METRICS_FILE))?,
        "checkpoint": r.checkpoint_path,
    });
    write_out(Some(&out), "summary.json", &serde_json::to_string_pretty(&summary)?)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn ablate(
    experiment: &str,
    seed: u64,
    seeds: u64,
    config: Option<PathBuf>,
    steps: Option<usize>,
    out: PathBuf,
) -> Result<()> {
    let exp = Experiment::parse(experiment)?;
    let mut opts = AblationOptions { seeds: (seed..seed + seeds).collect(), ..Default::default() };
    if let Some(p) = config {
        opts.base = RunConfig::read(&p)?;
    }
    if let Some(s) = steps {
        opts.base.schedule.steps = s;
        opts.base.schedule.warmup = opts.base.schedule.warmup.min(s);
    }
    let report = ablation(exp, &opts, Some(&out))?;
    let text = report.render();
    write_out(Some(&out), "report.json", &serde_json::to_string_pretty(&report)?)?;
    write_out(Some(&out), "report.txt", &text)?;
    print!("{text}");
    Ok(())
}

fn grow(checkpoint: &Path, rate: usize, out: PathBuf) -> Result<()> {
    let ck = Checkpoint::read(checkpoint)?;
    let (model, routers) = load_checkpoint(&ck)?;
    let plan = GrowthPlan::new(rate);
    let grown = stack_grow(&model, &plan)?;
    let grown_routers = grow_routers(&routers, &plan)?;
    let mut meta = ck.metadata.clone();
    meta["model"] = serde_json::to_value(&grown.config)?;
    meta["grown_from_layers"] = json!(model.layers.len());
    let mut next = Checkpoint::new(ck.dtype, meta);
    for p in grown.store.iter() {
        next.push(p.name.clone(), Some(p.class), p.value.clone());
    }
    for (i, r) in grown_routers.iter().enumerate() {
        next.push(
            format!("router_bias.{i}"),
            None,
            flashlab::diffcore::Tensor::new(vec![1, r.bias.len()], r.bias.clone())?,
        );
    }
    std::fs::create_dir_all(&out)?;
    let path = out.join("checkpoint.bin");
    next.write(&path)?;
    println!("{}", json!({"layers": grown.layers.len(), "parameters": grown.store.num_scalars(), "checkpoint": path}));
    Ok(())
}

fn transfer(config: &Path, factor: f64, out: PathBuf) -> Result<()> {
    let proxy = RunConfig::read(config)?;
    let mut target = proxy.clone();
    target.model = transfer_model_config(&proxy.model, factor)?;
    let init = &proxy.model.init;
    let hp = HParams {
        init_var: PerClass {
            embedding: init.embedding_var,
            hidden: init.hidden_var,
            unembedding: init.unembedding_var,
        },
        lr: proxy.optimizer.lr,
    };
    let t = transfer_hparams(&hp, factor)?;
    target.optimizer.lr = t.lr;
    target.tag = format!("{}-x{factor}", proxy.tag);
    target.validate()?;
    write_out(Some(&out), "config.json", &target.to_json()?)?;
    let table = json!({"factor": factor, "proxy": hp, "target": t});
    write_out(Some(&out), "hparams.json", &serde_json::to_string_pretty(&table)?)?;
    println!("{}", serde_json::to_string_pretty(&table)?);
    Ok(())
}

fn route_stats(checkpoint: &Path, corpora: &[String], seq_len: usize, out: PathBuf) -> Result<()> {
    let ck = Checkpoint::read(checkpoint)?;
    let (model, routers) = load_checkpoint(&ck)?;
    let samples = corpora
        .iter()
        .map(|spec| {
            let (name, path) =
                spec.split_once('=').ok_or_else(|| Error::Config(format!("expected name=path, got {spec:?}")))?;
            Ok(CorpusSample::new(name, std::fs::read(path)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let report = routing_stats_report(&model, &routers, &samples, seq_len)?;
    write_out(Some(&out), "route_stats.json", &serde_json::to_string_pretty(&report)?)?;
    let text = report.render();
    write_out(Some(&out), "route_stats.txt", &text)?;
    for s in &samples {
        if let Some(t) = report.render_tokens(&s.name, usize::MAX) {
            write_out(Some(&out), &format!("tokens_{}.tsv", s.name), &t)?;
        }
    }
    print!("{text}");
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn specdec(
    gamma: usize,
    alpha: Option<f64>,
    draft_ratio: f64,
    verify_ratio: f64,
    trials: Option<usize>,
    seed: Option<u64>,
    checkpoint: Option<PathBuf>,
    corpus: Option<PathBuf>,
    seq_len: usize,
    windows: usize,
    out: Option<PathBuf>,
) -> Result<()> {
    let mut measured = None;
    let alpha = match (alpha, &checkpoint) {
        (Some(a), _) => a,
        (None, Some(ck)) => {
            let path = corpus.as_ref().ok_or_else(|| Error::Config("--checkpoint needs --corpus".into()))?;
            let (model, routers) = load_checkpoint(&Checkpoint::read(ck)?)?;
            let c = Corpus::from_file(path, 0.5)?;
            let w = c.windows(Split::Validation, seq_len, windows);
            let a = measure_acceptance(&model, &routers, &w, DraftSource::Mtp)?;
            measured = Some(a);
            a.rate
        }
        (None, None) => return Err(Error::Config("give --alpha or --checkpoint with --corpus".into())),
    };
    let omega = expected_accept_length(gamma, alpha)?;
    let ratio = specdec_cost_ratio(&SpecDecParams { gamma, alpha, draft_ratio, verify_ratio })?;
    let mc = match trials {
        Some(n) => {
            let s = seed.ok_or_else(|| Error::Config("--trials needs --seed".into()))?;
            Some(simulate_accept_length(gamma, alpha, n, &mut RngState::new(s))?)
        }
        None => None,
    };
    let body = json!({
        "gamma": gamma, "alpha": alpha, "accept_length": omega, "cost_ratio": ratio,
        "monte_carlo": mc, "measured": measured,
    });
    let text = serde_json::to_string_pretty(&body)?;
    write_out(out.as_deref(), "specdec.json", &text)?;
    println!("{text}");
    Ok(())
}

fn kv_sim(n: usize, mtp: usize, iters: usize, sampler: SamplerArg, seed: u64, out: Option<PathBuf>) -> Result<()> {
    let samplers: Vec<KvSampler> = match sampler {
        SamplerArg::All => KvSampler::ALL.to_vec(),
        SamplerArg::Uniform => vec![KvSampler::Uniform],
        SamplerArg::AlwaysMin => vec![KvSampler::AlwaysMin],
        SamplerArg::AlwaysMax => vec![KvSampler::AlwaysMax],
        SamplerArg::Alternate => vec![KvSampler::Alternate],
        SamplerArg::Burst => vec![KvSampler::Burst],
    };
    let mut violations = 0;
    let mut rows = Vec::new();
    let (mut lo, mut hi) = (0, 0);
    for s in samplers {
        let t = kv_alloc_with(n, mtp, iters, s, seed)?;
        violations += t.violations;
        lo = t.lower;
        hi = t.upper;
        let min = t.available.iter().copied().min().unwrap_or(0);
        let max = t.available.iter().copied().max().unwrap_or(0);
        rows.push(json!({"sampler": s, "violations": t.violations, "min": min, "max": max,
            "closed_form_mismatches": t.closed_form_mismatches}));
    }
    let body =
        json!({"n": n, "mtp": mtp, "iterations": iters, "bound": [lo, hi], "violations": violations, "samplers": rows});
    write_out(out.as_deref(), "kv_sim.json", &serde_json::to_string_pretty(&body)?)?;
    println!("bound: [{lo}, {hi}]");
    println!("violations: {violations}");
    Ok(())
}

fn tpot(cost: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let rows: Vec<(String, CostModel)> = match cost {
        Some(p) => vec![(p.display().to_string(), CostModel::from_json(&std::fs::read_to_string(&p)?)?)],
        None => reference_cost_models().into_iter().map(|(n, c, _, _)| (n.to_string(), c)).collect(),
    };
    let mut body = Vec::new();
    for (name, cm) in rows {
        let r = tpot_theoretical(&cm)?;
        let mark = if r.approximate { " (approximate overlap model)" } else { "" };
        println!("{name}: {:.0} ms, ${:.2} per million tokens{mark}", r.tpot_ms, r.price_per_million);
        body.push(json!({"name": name, "report": r}));
    }
    write_out(out.as_deref(), "tpot.json", &serde_json::to_string_pretty(&body)?)?;
    Ok(())
}

fn grad_check(seed: u64, instances: u64, entries: usize, out: Option<PathBuf>) -> Result<()> {
    let seeds: Vec<u64> = (seed..seed + instances).collect();
    let res = loss_gradient_suite(&seeds, entries)?;
    let worst = res.iter().map(|e| e.max_rel_error).fold(0.0, f64::max);
    for e in &res {
        println!(
            "{:<6} seed {:<4} max rel err {:.3e} over {} entries",
            e.loss, e.seed, e.max_rel_error, e.entries_checked
        );
    }
    write_out(out.as_deref(), "grad_check.json", &serde_json::to_string_pretty(&res)?)?;
    if worst >= 1e-4 {
        return Err(Error::Evaluation(format!("max relative error {worst:.3e} exceeds 1e-4")));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train { config, seed, out, steps } => train(config, seed, out, steps),
        Cmd::Ablate { experiment, seed, seeds, config, steps, out } => {
            ablate(&experiment, seed, seeds, config, steps, out)
        }
        Cmd::Grow { checkpoint, rate, out } => grow(&checkpoint, rate, out),
        Cmd::Transfer { config, factor, out } => transfer(&config, factor, out),
        Cmd::RouteStats { checkpoint, corpora, seq_len, out } => route_stats(&checkpoint, &corpora, seq_len, out),
        Cmd::Specdec {
            gamma,
            alpha,
            draft_ratio,
            verify_ratio,
            trials,
            seed,
            checkpoint,
            corpus,
            seq_len,
            windows,
            out,
        } => specdec(gamma, alpha, draft_ratio, verify_ratio, trials, seed, checkpoint, corpus, seq_len, windows, out),
        Cmd::KvSim { n, mtp, iters, sampler, seed, out } => kv_sim(n, mtp, iters, sampler, seed, out),
        Cmd::Tpot { cost, out } => tpot(cost, out),
        Cmd::GradCheck { seed, instances, entries, out } => grad_check(seed, instances, entries, out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({"error": e.kind(), "message": e.to_string()}));
            ExitCode::from(1)
        }
    }
}
