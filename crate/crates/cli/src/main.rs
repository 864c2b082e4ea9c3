//! `burstsim`: distributed attention accounting, scheduling and numerical
//! checks from the command line.

mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{load_file, resolve, ConfigError, FileConfig, Format};

#[derive(Parser)]
#[command(
    name = "burstsim",
    version,
    about = "Distributed attention simulator and numerical checks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Run the seeded property suite; exits 1 if any check fails.
    Verify,
    /// Per-device communication volume and analytic time per strategy.
    Comm,
    /// Attention pair counts per device and per ring step.
    Balance,
    /// Event list of one ring pass under an overlap schedule.
    Timeline,
    /// Fused LM head loss against the naive version, plus logits footprint.
    Lmhead,
    /// Checkpoint storage and recompute model, with a toy gradient check.
    Checkpoint,
    /// Side-by-side comparison of ring, double ring and burst.
    Compare,
}

impl Command {
    /// Config sections the command reads.
    fn sections(self) -> &'static [&'static str] {
        match self {
            Command::Verify => &[],
            Command::Comm => &["model", "topology"],
            Command::Balance => &["model", "topology", "partition"],
            Command::Timeline => &["model", "topology", "timeline"],
            Command::Lmhead => &["model", "lmhead"],
            Command::Checkpoint => &["model", "partition", "checkpoint"],
            Command::Compare => &[
                "model",
                "topology",
                "partition",
                "lmhead",
                "checkpoint",
                "timeline",
            ],
        }
    }
}

/// Every flag overrides the matching config file value.
#[derive(Args, Default)]
struct Flags {
    /// TOML config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Sequence length, tokens.
    #[arg(long, global = true)]
    seq: Option<usize>,
    #[arg(long, global = true)]
    dim: Option<usize>,
    /// Vocabulary size, tokens.
    #[arg(long, global = true)]
    vocab: Option<usize>,
    /// Total devices.
    #[arg(long, global = true)]
    gpus: Option<usize>,
    #[arg(long, global = true)]
    nodes: Option<usize>,
    #[arg(long, global = true, value_name = "SECONDS")]
    lat_intra: Option<f64>,
    #[arg(long, global = true, value_name = "SECONDS")]
    lat_inter: Option<f64>,
    #[arg(long, global = true, value_name = "ELEMENTS_PER_SECOND")]
    bw_intra: Option<f64>,
    #[arg(long, global = true, value_name = "ELEMENTS_PER_SECOND")]
    bw_inter: Option<f64>,
    /// contiguous, zigzag, striped or block_striped.
    #[arg(long, global = true)]
    layout: Option<String>,
    #[arg(long, global = true, value_name = "TOKENS")]
    layout_block: Option<usize>,
    /// full, causal, sliding_window or block_sparse.
    #[arg(long, global = true)]
    mask: Option<String>,
    #[arg(long, global = true, value_name = "TOKENS")]
    window: Option<usize>,
    #[arg(long, global = true, value_name = "TOKENS")]
    mask_block: Option<usize>,
    #[arg(long, global = true, value_name = "TOKENS")]
    block_rows: Option<usize>,
    #[arg(long, global = true, value_name = "TOKENS")]
    block_vocab: Option<usize>,
    /// full_recompute, selective_pp, sequence_selective or all.
    #[arg(long, global = true)]
    policy: Option<String>,
    #[arg(long, global = true)]
    split: Option<f64>,
    /// none, activation or gradient.
    #[arg(long, global = true)]
    overlap: Option<String>,
    /// forward, ring_backward or burst_backward.
    #[arg(long, global = true)]
    pass: Option<String>,
    #[arg(long, global = true, value_name = "SECONDS")]
    compute_seconds: Option<f64>,
    /// table, csv or json.
    #[arg(long, global = true)]
    format: Option<String>,
    /// Write the report here instead of stdout.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

impl Flags {
    fn apply(&self, f: &mut FileConfig) {
        fn set<T: Clone>(dst: &mut Option<T>, src: &Option<T>) {
            if src.is_some() {
                dst.clone_from(src);
            }
        }
        set(&mut f.seed, &self.seed);
        set(&mut f.model.seq_len_tokens, &self.seq);
        set(&mut f.model.dim, &self.dim);
        set(&mut f.model.vocab_tokens, &self.vocab);
        set(&mut f.topology.devices, &self.gpus);
        set(&mut f.topology.nodes, &self.nodes);
        set(&mut f.topology.lat_intra_seconds, &self.lat_intra);
        set(&mut f.topology.lat_inter_seconds, &self.lat_inter);
        set(&mut f.topology.bw_intra_elements_per_second, &self.bw_intra);
        set(&mut f.topology.bw_inter_elements_per_second, &self.bw_inter);
        set(&mut f.partition.layout, &self.layout);
        set(&mut f.partition.layout_block_tokens, &self.layout_block);
        set(&mut f.partition.mask, &self.mask);
        set(&mut f.partition.window_tokens, &self.window);
        set(&mut f.partition.mask_block_tokens, &self.mask_block);
        set(&mut f.lmhead.block_rows_tokens, &self.block_rows);
        set(&mut f.lmhead.block_vocab_tokens, &self.block_vocab);
        set(&mut f.checkpoint.policy, &self.policy);
        set(&mut f.checkpoint.split, &self.split);
        set(&mut f.timeline.overlap, &self.overlap);
        set(&mut f.timeline.pass, &self.pass);
        set(
            &mut f.timeline.compute_seconds_per_step,
            &self.compute_seconds,
        );
        set(&mut f.output.format, &self.format);
        set(&mut f.output.path, &self.output);
    }
}

const EXIT_FAILED: u8 = 1;
const EXIT_CONFIG: u8 = 2;

fn run(cli: &Cli) -> anyhow::Result<bool> {
    let mut file = match &cli.flags.config {
        Some(p) => load_file(p)?,
        None => FileConfig::default(),
    };
    cli.flags.apply(&mut file);
    if cli.flags.threads == Some(0) {
        return Err(ConfigError(vec![config::Diagnostic {
            field: "threads".into(),
            message: "must be at least 1".into(),
        }])
        .into());
    }
    let cfg = resolve(&file, cli.command.sections())?;
    // Table output carries the seed itself.
    if cfg.format != Format::Table || cfg.output.is_some() {
        eprintln!("seed {}", cfg.seed);
    }

    let go = || match cli.command {
        Command::Verify => commands::verify(&cfg),
        Command::Comm => commands::comm(&cfg),
        Command::Balance => commands::balance(&cfg),
        Command::Timeline => commands::timeline(&cfg),
        Command::Lmhead => commands::lmhead(&cfg),
        Command::Checkpoint => commands::checkpoint(&cfg),
        Command::Compare => commands::compare_strategies(&cfg),
    };
    let report = match cli.flags.threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()?
            .install(go)?,
        None => go()?,
    };
    let text = report.render(cfg.format)?;
    match &cfg.output {
        Some(path) => std::fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(!report.failed)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_FAILED),
        Err(e) => match e.downcast_ref::<ConfigError>() {
            Some(c) => {
                eprint!("{c}");
                ExitCode::from(EXIT_CONFIG)
            }
            None => {
                eprintln!("error: {e:#}");
                ExitCode::from(EXIT_FAILED)
            }
        },
    }
}
