use std::path::{Path, PathBuf};
use std::process::ExitCode;

use candle_core::Device;
use clap::{Parser, Subcommand};
use pairedit::synth_data::{SynthSpec, SynthTask};
use pairedit::trainer::{cmd_edit, cmd_eval, cmd_synth, cmd_train, out_root, EditOptions, EvalOptions, RunConfig};
use pairedit::Error;

#[derive(Parser)]
#[command(name = "pairedit", version, about = "Few-shot paired image editing")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model; outputs go to $PAIREDIT_OUT/<run> (default ./runs/<run>).
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated ablation flags, replacing the config's `ablate`.
        #[arg(long)]
        ablate: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Extra `key=value` overrides, applied last.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Run directory name under the output root (default: config file stem).
        #[arg(long)]
        run: Option<String>,
        /// Continue from a checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Edit an image or every image in a folder.
    Edit {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "_edit")]
        suffix: String,
        /// Fail instead of resizing inputs of the wrong resolution.
        #[arg(long)]
        strict: bool,
    },
    /// Score edits of a pair folder against its targets.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Report directory (default: $PAIREDIT_OUT/eval).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Write a synthetic pair folder.
    Synth {
        #[arg(long)]
        task: String,
        #[arg(long)]
        m: usize,
        #[arg(long)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        force: bool,
    },
}

fn resolve_config(config: &Path, ablate: Option<&str>, seed: Option<u64>, set: &[String]) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(a) = ablate {
        cfg.set_ablations(a)?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    for kv in set {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::InvalidArgument(format!("--set expects key=value, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Error> {
    let dev = Device::Cpu;
    match cli.cmd {
        Cmd::Train { config, ablate, seed, set, run, resume } => {
            let cfg = resolve_config(&config, ablate.as_deref(), seed, &set)?;
            let name = run.unwrap_or_else(|| config.file_stem().and_then(|s| s.to_str()).unwrap_or("run").to_string());
            let out = cmd_train(&cfg, &out_root().join(name), resume.as_deref(), &dev)?;
            println!("checkpoint={}", out.checkpoint.display());
            if let Some(r) = out.final_eval {
                print!("{}", r.to_kv());
            }
        }
        Cmd::Edit { ckpt, input, steps, seed, suffix, strict } => {
            let recs = cmd_edit(&ckpt, &input, &EditOptions { steps, seed, suffix, strict }, &dev)?;
            for r in recs {
                println!("{} -> {} reference={}", r.input.display(), r.output.display(), r.reference);
            }
        }
        Cmd::Eval { ckpt, data, out, steps, seed, tau } => {
            let out = out.unwrap_or_else(|| out_root().join("eval"));
            let report = cmd_eval(&ckpt, &data, &out, &EvalOptions { steps, seed, tau }, &dev)?;
            print!("{}", report.to_kv());
        }
        Cmd::Synth { task, m, size, out, seed, force } => {
            let spec = SynthSpec { task: SynthTask::parse(&task)?, size, m, seed };
            let ds = cmd_synth(&spec, &out, force)?;
            println!("wrote {} pairs to {}", ds.m(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace(['\n', '\r'], " ");
            eprintln!("error kind={} msg={:?}", e.kind(), msg);
            ExitCode::from(2)
        }
    }
}
