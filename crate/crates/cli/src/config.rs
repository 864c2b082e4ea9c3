//! Run configuration: a TOML file with sections, overlaid by command-line
//! flags, then resolved into validated core types.

use std::fmt;
use std::path::{Path, PathBuf};

use burst_core::checkpoint::CheckpointPolicy;
use burst_core::fabric::{OverlapKind, Pass, Topology};
use burst_core::lmhead::FusionConfig;
use burst_core::oracle::MaskSpec;
use burst_core::partition::{LayoutKind, ShardLayout};
use burst_core::Error;
use serde::Deserialize;

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub topology: TopologySection,
    #[serde(default)]
    pub partition: PartitionSection,
    #[serde(default)]
    pub lmhead: LmHeadSection,
    #[serde(default)]
    pub checkpoint: CheckpointSection,
    #[serde(default)]
    pub timeline: TimelineSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub seq_len_tokens: Option<usize>,
    pub dim: Option<usize>,
    pub vocab_tokens: Option<usize>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologySection {
    /// Total devices across all nodes.
    pub devices: Option<usize>,
    pub nodes: Option<usize>,
    pub lat_intra_seconds: Option<f64>,
    pub lat_inter_seconds: Option<f64>,
    pub bw_intra_elements_per_second: Option<f64>,
    pub bw_inter_elements_per_second: Option<f64>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSection {
    pub layout: Option<String>,
    pub layout_block_tokens: Option<usize>,
    pub mask: Option<String>,
    pub window_tokens: Option<usize>,
    pub mask_block_tokens: Option<usize>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmHeadSection {
    pub block_rows_tokens: Option<usize>,
    pub block_vocab_tokens: Option<usize>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointSection {
    /// `full_recompute`, `selective_pp`, `sequence_selective` or `all`.
    pub policy: Option<String>,
    pub split: Option<f64>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimelineSection {
    pub overlap: Option<String>,
    pub pass: Option<String>,
    pub compute_seconds_per_step: Option<f64>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub format: Option<String>,
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Table,
    Csv,
    Json,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub seq_len: usize,
    pub dim: usize,
    pub vocab: usize,
    pub topology: Topology,
    pub layout: LayoutKind,
    pub mask: MaskSpec,
    pub fusion: FusionConfig,
    pub policies: Vec<CheckpointPolicy>,
    pub overlap: OverlapKind,
    pub pass: Pass,
    pub compute_seconds_per_step: f64,
    pub format: Format,
    pub output: Option<PathBuf>,
}

impl RunConfig {
    pub fn devices(&self) -> usize {
        self.topology.devices()
    }

    /// The split used where a single sequence-selective policy is needed.
    pub fn sequence_policy(&self) -> CheckpointPolicy {
        self.policies
            .iter()
            .copied()
            .find(|p| matches!(p, CheckpointPolicy::SequenceSelective { .. }))
            .unwrap_or(CheckpointPolicy::SequenceSelective {
                split: burst_core::checkpoint::DEFAULT_SPLIT,
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostic {
    pub field: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError(pub Vec<Diagnostic>);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "invalid configuration:")?;
        for d in &self.0 {
            writeln!(f, "  {}: {}", d.field, d.message)?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigError {}

pub fn load_file(path: &Path) -> Result<FileConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        ConfigError(vec![Diagnostic {
            field: "config".into(),
            message: format!("cannot read {}: {e}", path.display()),
        }])
    })?;
    toml::from_str(&text).map_err(|e| {
        ConfigError(vec![Diagnostic {
            field: "config".into(),
            message: format!("{}: {}", path.display(), e.to_string().trim_end()),
        }])
    })
}

fn parse_layout(name: &str, block: Option<usize>, devices: usize) -> Option<LayoutKind> {
    Some(match name {
        "contiguous" => LayoutKind::Contiguous,
        "zigzag" => LayoutKind::Zigzag,
        "striped" => LayoutKind::Striped,
        "block_striped" => LayoutKind::BlockStriped {
            block_len: block.unwrap_or(devices),
        },
        _ => return None,
    })
}

fn parse_overlap(name: &str) -> Option<OverlapKind> {
    Some(match name {
        "none" => OverlapKind::None,
        "activation" => OverlapKind::Activation,
        "gradient" => OverlapKind::Gradient,
        _ => return None,
    })
}

fn parse_pass(name: &str) -> Option<Pass> {
    Some(match name {
        "forward" => Pass::Forward,
        "ring_backward" => Pass::RingBackward,
        "burst_backward" => Pass::BurstBackward,
        _ => return None,
    })
}

fn parse_format(name: &str) -> Option<Format> {
    Some(match name {
        "table" => Format::Table,
        "csv" => Format::Csv,
        "json" => Format::Json,
        _ => return None,
    })
}

#[derive(Default)]
struct Diags(Vec<Diagnostic>);

impl Diags {
    fn push(&mut self, field: &str, message: impl Into<String>) {
        self.0.push(Diagnostic {
            field: field.into(),
            message: message.into(),
        });
    }

    fn core(&mut self, field: &str, e: Error) {
        let field = match &e {
            Error::InvalidParameter { field: f, .. } => qualify(f).unwrap_or(field),
            _ => field,
        };
        self.push(field, e.to_string());
    }

    fn positive(&mut self, field: &str, v: usize) {
        if v == 0 {
            self.push(field, "must be at least 1");
        }
    }
}

/// Section-qualified name for a field reported by the core library.
fn qualify(core_field: &str) -> Option<&'static str> {
    Some(match core_field {
        "window" => "partition.window_tokens",
        "block_rows" => "lmhead.block_rows_tokens",
        "block_vocab" => "lmhead.block_vocab_tokens",
        "split" => "checkpoint.split",
        "lat_intra" => "topology.lat_intra_seconds",
        "lat_inter" => "topology.lat_inter_seconds",
        "bw_intra" => "topology.bw_intra_elements_per_second",
        "bw_inter" => "topology.bw_inter_elements_per_second",
        _ => return None,
    })
}

const DEFAULT_SEQ: usize = 64;
const DEFAULT_DIM: usize = 16;
const DEFAULT_VOCAB: usize = 1000;
const DEFAULT_DEVICES: usize = 4;

/// Validates everything a command reads up front so a bad run never starts.
/// Diagnostics are kept for the listed sections plus `output`; values from
/// other sections fall back to defaults when invalid.
pub fn resolve(file: &FileConfig, sections: &[&str]) -> Result<RunConfig, ConfigError> {
    let mut diags = Diags::default();
    let seed = file.seed.unwrap_or(0);
    let n = file.model.seq_len_tokens.unwrap_or(DEFAULT_SEQ);
    let dim = file.model.dim.unwrap_or(DEFAULT_DIM);
    let vocab = file.model.vocab_tokens.unwrap_or(DEFAULT_VOCAB);
    diags.positive("model.seq_len_tokens", n);
    diags.positive("model.dim", dim);
    diags.positive("model.vocab_tokens", vocab);

    let t = &file.topology;
    let devices = t.devices.unwrap_or(DEFAULT_DEVICES);
    let nodes = t.nodes.unwrap_or(1);
    diags.positive("topology.devices", devices);
    diags.positive("topology.nodes", nodes);
    let mut topology = None;
    if devices > 0 && nodes > 0 {
        if devices % nodes != 0 {
            diags.push(
                "topology.devices",
                format!("{devices} devices cannot be split evenly over {nodes} nodes"),
            );
        } else {
            match Topology::new(
                nodes,
                devices / nodes,
                t.lat_intra_seconds.unwrap_or(2e-6),
                t.lat_inter_seconds.unwrap_or(1e-5),
                t.bw_intra_elements_per_second.unwrap_or(1e11),
                t.bw_inter_elements_per_second.unwrap_or(1.25e10),
            ) {
                Ok(topo) => topology = Some(topo),
                Err(e) => diags.core("topology", e),
            }
        }
        if n > 0 && n % devices != 0 {
            diags.push(
                "topology.devices",
                format!("sequence length {n} is not divisible by {devices} devices"),
            );
        }
    }

    let p = &file.partition;
    let layout_name = p.layout.as_deref().unwrap_or("zigzag");
    let layout = parse_layout(layout_name, p.layout_block_tokens, devices);
    match layout {
        None => diags.push(
            "partition.layout",
            format!("unknown layout `{layout_name}`; expected contiguous, zigzag, striped or block_striped"),
        ),
        Some(kind) if n > 0 && devices > 0 => {
            if let Err(e) = ShardLayout::new(kind, n, devices) {
                let field = if matches!(kind, LayoutKind::BlockStriped { .. }) {
                    "partition.layout_block_tokens"
                } else {
                    "partition.layout"
                };
                diags.push(field, format!("{e} (layout {layout_name}, {devices} devices)"));
            }
        }
        Some(_) => {}
    }

    let mask_name = p.mask.as_deref().unwrap_or("causal");
    let mask = match mask_name {
        "full" => Some(MaskSpec::Full),
        "causal" => Some(MaskSpec::Causal),
        "sliding_window" => match p.window_tokens {
            Some(window) => Some(MaskSpec::SlidingWindow { window }),
            None => {
                diags.push(
                    "partition.window_tokens",
                    "required when mask = \"sliding_window\"",
                );
                None
            }
        },
        "block_sparse" => {
            let block = p.mask_block_tokens.unwrap_or((n / 8).max(1));
            match MaskSpec::seeded_block_sparse(n, block, seed) {
                Ok(m) => Some(m),
                Err(e) => {
                    diags.push("partition.mask_block_tokens", e.to_string());
                    None
                }
            }
        }
        other => {
            diags.push(
                "partition.mask",
                format!(
                    "unknown mask `{other}`; expected full, causal, sliding_window or block_sparse"
                ),
            );
            None
        }
    };
    if let Some(m) = &mask {
        if let Err(e) = m.validate(n) {
            diags.core("partition.mask", e);
        }
    }

    let fusion = FusionConfig {
        block_rows: file.lmhead.block_rows_tokens.unwrap_or(16),
        block_vocab: file.lmhead.block_vocab_tokens.unwrap_or(128),
    };
    if let Err(e) = fusion.validate() {
        diags.core("lmhead", e);
    }

    let split = file
        .checkpoint
        .split
        .unwrap_or(burst_core::checkpoint::DEFAULT_SPLIT);
    let seq_policy = CheckpointPolicy::SequenceSelective { split };
    let policy_name = file.checkpoint.policy.as_deref().unwrap_or("all");
    let policies = match policy_name {
        "all" => vec![
            CheckpointPolicy::FullRecompute,
            CheckpointPolicy::SelectivePp,
            seq_policy,
        ],
        "full_recompute" => vec![CheckpointPolicy::FullRecompute],
        "selective_pp" => vec![CheckpointPolicy::SelectivePp],
        "sequence_selective" => vec![seq_policy],
        other => {
            diags.push(
                "checkpoint.policy",
                format!("unknown policy `{other}`; expected full_recompute, selective_pp, sequence_selective or all"),
            );
            vec![]
        }
    };
    if n > 0 {
        if let Err(e) = seq_policy.boundary(n) {
            diags.core("checkpoint.split", e);
        }
    }

    let overlap_name = file.timeline.overlap.as_deref().unwrap_or("gradient");
    let overlap = parse_overlap(overlap_name);
    if overlap.is_none() {
        diags.push(
            "timeline.overlap",
            format!("unknown overlap `{overlap_name}`; expected none, activation or gradient"),
        );
    }
    let pass_name = file.timeline.pass.as_deref().unwrap_or("burst_backward");
    let pass = parse_pass(pass_name);
    if pass.is_none() {
        diags.push(
            "timeline.pass",
            format!(
                "unknown pass `{pass_name}`; expected forward, ring_backward or burst_backward"
            ),
        );
    }
    let compute = file.timeline.compute_seconds_per_step.unwrap_or(1e-5);
    if !(compute >= 0.0 && compute.is_finite()) {
        diags.push(
            "timeline.compute_seconds_per_step",
            "must be non-negative and finite",
        );
    }

    let format_name = file.output.format.as_deref().unwrap_or("table");
    let format = parse_format(format_name);
    if format.is_none() {
        diags.push(
            "output.format",
            format!("unknown format `{format_name}`; expected table, csv or json"),
        );
    }

    diags.0.retain(|d| {
        let section = d.field.split('.').next().unwrap_or("");
        section == "output" || sections.contains(&section)
    });
    if !diags.0.is_empty() {
        return Err(ConfigError(diags.0));
    }
    Ok(RunConfig {
        seed,
        seq_len: n,
        dim,
        vocab,
        topology: topology.unwrap_or_else(|| Topology::single_node(1, 1e-6, 1e9)),
        layout: layout.unwrap_or(LayoutKind::Contiguous),
        mask: mask.unwrap_or(MaskSpec::Causal),
        fusion,
        policies,
        overlap: overlap.unwrap_or(OverlapKind::None),
        pass: pass.unwrap_or(Pass::Forward),
        compute_seconds_per_step: compute,
        format: format.expect("output section is always checked"),
        output: file.output.path.clone(),
    })
}
