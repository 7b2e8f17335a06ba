use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use flowlab::experiments::{self, ExperimentConfig, MetricsInputs, SampleArgs, SweepArgs, VaeLossInputs};
use flowlab::samplers::Method;
use flowlab::{Error, Result};

#[derive(Parser)]
#[command(name = "flowlab", version, about = "Toy flow matching and diffusion experiments")]
struct Cli {
    /// Config file (TOML); its meaning depends on the subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory; stdout when omitted and the command allows it.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a field model and write a run directory.
    Train(TrainArgs),
    /// Draw samples from a trained run as CSV.
    Sample(SampleCli),
    /// Sampler × NFE × guidance grid with FD and W2 columns.
    Sweep(SweepCli),
    /// FD / KL / IS / embedding score from JSON-lines or CSV vector files.
    Metrics(MetricsCli),
    /// Similarity-threshold caption curation.
    FilterCaptions(FilterCli),
    /// Multi-resolution STFT and KL losses for raw signals.
    VaeLoss(VaeCli),
    /// Run the built-in invariant checks.
    Selftest(SelftestCli),
}

#[derive(Args)]
struct TrainArgs {
    /// Override any config field, e.g. `--set optim.lr=5e-4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    objective: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    p_uncond: Option<f64>,
}

#[derive(Args)]
struct SamplerFlags {
    #[arg(long)]
    method: Option<Method>,
    /// Integration steps (NFE for Euler).
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    w_cfg: Option<f64>,
    /// Apply CFG only on t in [0, 0.6].
    #[arg(long)]
    limited_interval: bool,
    #[arg(long)]
    w_ag: Option<f64>,
}

#[derive(Args)]
struct SampleCli {
    /// Run directory or checkpoint file.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Weaker run for autoguidance.
    #[arg(long)]
    bad_checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long)]
    label: Option<usize>,
    #[command(flatten)]
    sampler: SamplerFlags,
}

#[derive(Args)]
struct SweepCli {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "euler,heun")]
    methods: Vec<Method>,
    #[arg(long, value_delimiter = ',', default_value = "5,10,25,50")]
    steps: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1")]
    w_cfg: Vec<f64>,
    #[arg(long)]
    limited_interval: bool,
    #[arg(long, default_value_t = 1000)]
    n: usize,
}

#[derive(Args)]
struct MetricsCli {
    #[arg(long)]
    reference: PathBuf,
    #[arg(long)]
    generated: PathBuf,
    #[arg(long)]
    ref_posteriors: Option<PathBuf>,
    #[arg(long)]
    gen_posteriors: Option<PathBuf>,
    #[arg(long)]
    text_embeddings: Option<PathBuf>,
}

#[derive(Args)]
struct FilterCli {
    #[arg(long)]
    records: PathBuf,
    #[arg(long)]
    candidates: PathBuf,
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args)]
struct VaeCli {
    /// Raw little-endian f64 file, channel-interleaved.
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long)]
    estimate: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    channels: usize,
    #[arg(long, default_value_t = 44_100.0)]
    sample_rate: f64,
}

#[derive(Args)]
struct SelftestCli {
    /// Only run checks whose name contains this.
    #[arg(long)]
    filter: Option<String>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("error[E_USAGE]: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            let msg = e.to_string().split_whitespace().collect::<Vec<_>>().join(" ");
            eprintln!("error[{}]: {msg}", e.code());
            ExitCode::FAILURE
        }
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.into(), source: e })?;
            }
            std::fs::write(p, text).map_err(|e| Error::Io { path: p.into(), source: e })
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn sample_args(flags: &SamplerFlags, defaults: &experiments::SamplerDefaults) -> SampleArgs {
    let mut a = SampleArgs::from_defaults(defaults);
    if let Some(m) = flags.method {
        a.method = m;
    }
    if let Some(s) = flags.steps {
        a.steps = s;
    }
    if let Some(w) = flags.w_cfg {
        a.w_cfg = w;
    }
    if let Some(w) = flags.w_ag {
        a.w_ag = w;
    }
    a.limited_interval |= flags.limited_interval;
    a
}

fn run(cli: Cli) -> Result<ExitCode> {
    let seed = cli.seed;
    let out = cli.out.as_deref();
    match cli.cmd {
        Cmd::Train(t) => {
            let mut sets = Vec::new();
            for kv in &t.set {
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
                sets.push((k.trim().to_string(), v.trim().to_string()));
            }
            let named = [
                ("seed", seed.map(|s| s.to_string())),
                ("dataset.name", t.dataset.clone()),
                ("objective", t.objective.clone()),
                ("optim.steps", t.steps.map(|s| s.to_string())),
                ("optim.batch", t.batch.map(|s| s.to_string())),
                ("optim.lr", t.lr.map(|s| format!("{s:?}"))),
                ("p_uncond", t.p_uncond.map(|s| format!("{s:?}"))),
            ];
            for (k, v) in named {
                if let Some(v) = v {
                    sets.push((k.to_string(), v));
                }
            }
            let cfg = ExperimentConfig::load(cli.config.as_deref(), &sets)?;
            let dir = out.unwrap_or(Path::new("run"));
            let run = experiments::train(&cfg)?;
            run.save(dir)?;
            let r = &run.report;
            eprintln!("trained {} steps in {:.1}s -> {}", cfg.optim.steps, r.wall_time_s, dir.display());
            println!("{}", serde_json::to_string(&serde_json::json!({
                "run_dir": dir,
                "final_loss": r.loss_curve.last().map(|p| p.1),
                "epoch_means": r.epoch_means,
                "final_stats": r.final_stats,
            }))?);
        }
        Cmd::Sample(s) => {
            let defaults = match cli.config.as_deref() {
                Some(p) => ExperimentConfig::load(Some(p), &[])?.sampler,
                None => experiments::load_run(&s.checkpoint)?.0.sampler,
            };
            let mut args = sample_args(&s.sampler, &defaults);
            args.label = s.label;
            let csv = experiments::sample_cmd(&s.checkpoint, s.bad_checkpoint.as_deref(), s.n, &args, seed.unwrap_or(0))?;
            emit(out, &csv)?;
        }
        Cmd::Sweep(s) => {
            let args = SweepArgs {
                methods: s.methods,
                steps: s.steps,
                w_cfg: s.w_cfg,
                limited_interval: s.limited_interval,
                n_samples: s.n,
            };
            emit(out, &experiments::sweep_cmd(&s.checkpoint, &args, seed.unwrap_or(0))?)?;
        }
        Cmd::Metrics(m) => {
            let report = experiments::metrics_cmd(&MetricsInputs {
                reference: m.reference,
                generated: m.generated,
                ref_posteriors: m.ref_posteriors,
                gen_posteriors: m.gen_posteriors,
                text_embeddings: m.text_embeddings,
            })?;
            emit(out, &format!("{}\n", serde_json::to_string_pretty(&report)?))?;
        }
        Cmd::FilterCaptions(f) => {
            let cfg = experiments::load_filter_config(cli.config.as_deref(), f.threshold)?;
            let res = experiments::filter_cmd(&f.records, &f.candidates, &cfg)?;
            match out {
                Some(dir) => res.save(dir)?,
                None => print!("{}", res.accepted_jsonl),
            }
            eprintln!("{}", res.summary_json.replace('\n', " "));
        }
        Cmd::VaeLoss(v) => {
            let cfg = experiments::load_stft_config(cli.config.as_deref())?;
            let inputs = VaeLossInputs {
                reference: v.reference,
                estimate: v.estimate,
                channels: v.channels,
                sample_rate: v.sample_rate,
            };
            let report = experiments::vae_loss_cmd(&inputs, &cfg, seed.unwrap_or(0))?;
            emit(out, &format!("{}\n", serde_json::to_string_pretty(&report)?))?;
        }
        Cmd::Selftest(s) => {
            let results = flowlab::selftest::run(s.filter.as_deref());
            let mut text = String::new();
            for r in &results {
                text.push_str(&r.line());
                text.push('\n');
            }
            emit(out, &text)?;
            if out.is_some() {
                print!("{text}");
            }
            if results.is_empty() || results.iter().any(|r| !r.passed) {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
