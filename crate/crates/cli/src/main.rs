//! `latentguard`: synthetic data generation, probe training, evaluation,
//! scoring, pipeline simulation, benchmarking and a scoring service.

mod commands;
mod config;
mod error;
mod serve;

use std::io::{self, Write};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use latentguard_core::guard::Modality;
use latentguard_core::probes::ProbeKind;
use latentguard_core::store::Split;

use config::{parse_override, RunConfig};
use error::{CliError, EXIT_OK};

#[derive(Parser, Debug)]
#[command(name = "latentguard", version, about = "Latent-space safety probes for video diffusion pipelines")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override any config key, e.g. `--set train.lr=0.001`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE", value_parser = parse_override)]
    set: Vec<(String, String)>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic latent archive.
    Gen(GenArgs),
    /// Train a probe on an archive.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Score archived clips with a checkpoint.
    Score(ScoreArgs),
    /// Run simulated generation requests through the guarded pipeline.
    Pipeline(PipelineArgs),
    /// Measure probe forward latency.
    Bench(BenchArgs),
    /// Serve scoring requests over TCP, one JSON object per line.
    Serve(ServeArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Archive directory to create.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Total clips, split 4:1:1 across train/validation/test.
    #[arg(long)]
    clips: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    amplitude: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    noise_std: Option<f64>,
    /// channel_mean_shift, temporal_sinusoid or spatial_blob.
    #[arg(long)]
    signal: Option<String>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    archive: Option<PathBuf>,
    /// cnn_transformer or vanilla_3dcnn (or vanilla).
    #[arg(long)]
    probe: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory for checkpoints and logs.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    archive: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    archive: Option<PathBuf>,
    /// Score every clip of this split when no ids are given.
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    threshold: Option<f64>,
    /// Clip ids to score.
    clip_ids: Vec<String>,
}

#[derive(Args, Debug)]
struct PipelineArgs {
    /// Probe checkpoint; without one a freshly initialized probe is used.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    probe: Option<String>,
    /// Archive to replay latents from; synthetic latents otherwise.
    #[arg(long)]
    archive: Option<PathBuf>,
    #[arg(long)]
    requests: Option<usize>,
    /// t2v, i2v or v2v; cycles through all three when absent.
    #[arg(long)]
    modality: Option<String>,
    #[arg(long)]
    threshold: Option<f64>,
    /// suppress or flag_for_review.
    #[arg(long)]
    action: Option<String>,
    /// fail_closed or fail_open.
    #[arg(long)]
    on_error: Option<String>,
    #[arg(long)]
    decode_ms: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Probe kind to build when no checkpoint is given, or `all`.
    #[arg(long, default_value = "all")]
    probe: String,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    /// Disable the data-parallel kernels.
    #[arg(long)]
    sequential: bool,
    /// Also write the measurements as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ServeArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    archive: Option<PathBuf>,
    /// Address to bind, e.g. 127.0.0.1:7878 (port 0 picks a free port).
    #[arg(long)]
    bind: Option<String>,
    #[arg(long)]
    threshold: Option<f64>,
}

/// Collects flag overrides as `section.key=value` pairs.
#[derive(Default)]
struct Overrides(Vec<(String, String)>);

impl Overrides {
    fn opt<T: ToString>(&mut self, key: &str, v: &Option<T>) -> &mut Self {
        if let Some(v) = v {
            self.0.push((key.to_string(), v.to_string()));
        }
        self
    }

    fn path(&mut self, key: &str, v: &Option<PathBuf>) -> &mut Self {
        if let Some(v) = v {
            self.0.push((key.to_string(), v.to_string_lossy().into_owned()));
        }
        self
    }

    fn probe(&mut self, v: &Option<String>) -> Result<&mut Self, CliError> {
        if let Some(v) = v {
            let kind: ProbeKind = v.parse()?;
            self.0.push(("probe.kind".into(), kind.as_str().into()));
        }
        Ok(self)
    }
}

fn run(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    let mut o = Overrides::default();
    match &cli.command {
        Command::Gen(a) => {
            o.path("data.archive", &a.out)
                .opt("data.clips", &a.clips)
                .opt("data.amplitude", &a.amplitude)
                .opt("data.noise_std", &a.noise_std)
                .opt("data.signal", &a.signal.as_ref().map(|s| s.replace('-', "_")))
                .opt("data.frames", &a.frames)
                .opt("data.seed", &a.seed);
        }
        Command::Train(a) => {
            o.path("data.archive", &a.archive)
                .probe(&a.probe)?
                .opt("train.epochs", &a.epochs)
                .opt("train.batch_size", &a.batch)
                .opt("train.lr", &a.lr)
                .opt("train.seed", &a.seed)
                .path("train.out_dir", &a.out);
        }
        Command::Eval(a) => {
            o.path("probe.checkpoint", &a.checkpoint).path("data.archive", &a.archive);
        }
        Command::Score(a) => {
            o.path("probe.checkpoint", &a.checkpoint)
                .path("data.archive", &a.archive)
                .opt("guard.threshold", &a.threshold);
        }
        Command::Pipeline(a) => {
            o.path("probe.checkpoint", &a.checkpoint)
                .probe(&a.probe)?
                .path("data.archive", &a.archive)
                .opt("pipeline.requests", &a.requests)
                .opt("guard.threshold", &a.threshold)
                .opt("guard.action", &a.action)
                .opt("guard.on_error", &a.on_error)
                .opt("pipeline.decode_ms", &a.decode_ms)
                .path("pipeline.out_dir", &a.out);
        }
        Command::Bench(a) => {
            o.path("probe.checkpoint", &a.checkpoint)
                .opt("bench.runs", &a.runs)
                .opt("bench.warmup", &a.warmup)
                .opt("bench.batch", &a.batch)
                .opt("bench.frames", &a.frames);
            if a.sequential {
                o.0.push(("bench.sequential".into(), "true".into()));
            }
        }
        Command::Serve(a) => {
            o.path("probe.checkpoint", &a.checkpoint)
                .path("data.archive", &a.archive)
                .opt("serve.bind", &a.bind)
                .opt("guard.threshold", &a.threshold);
        }
    }
    // Explicit flags win over `--set`.
    let overrides: Vec<(String, String)> = cli.set.iter().cloned().chain(o.0).collect();
    let cfg = RunConfig::resolve(cli.config.as_deref(), &overrides)?;

    match &cli.command {
        Command::Gen(_) => commands::gen(&cfg, out),
        Command::Train(_) => commands::train(&cfg, out),
        Command::Eval(a) => commands::eval(&cfg, a.split.parse::<Split>()?, out),
        Command::Score(a) => {
            let split = a.split.as_deref().map(str::parse::<Split>).transpose()?;
            commands::score(&cfg, &a.clip_ids, split, out)
        }
        Command::Pipeline(a) => {
            let modality = a.modality.as_deref().map(str::parse::<Modality>).transpose()?;
            commands::pipeline(&cfg, modality, out)
        }
        Command::Bench(a) => {
            let kinds = match a.probe.as_str() {
                "all" => vec![ProbeKind::Vanilla3dcnn, ProbeKind::CnnTransformer],
                k => vec![k.parse::<ProbeKind>()?],
            };
            commands::bench(&cfg, &kinds, a.csv.as_deref(), out)
        }
        Command::Serve(_) => serve::serve(&cfg, out),
    }
}

fn main() {
    let cli = Cli::try_parse().unwrap_or_else(|e| e.exit());
    let stdout = io::stdout();
    let mut out = stdout.lock();
    let code = match run(cli, &mut out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = out.flush();
            eprintln!("error: {e}");
            e.code
        }
    };
    let _ = out.flush();
    std::process::exit(code);
}
