use crate::profile::ProfileName;
use clap::{Args, Parser, Subcommand, ValueEnum};
use neat_core::adaptation::AdaptMode;
use neat_core::language::DecomposerKind;
use neat_core::world::SplitKind;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Parser)]
#[command(
    name = "neat",
    version,
    about = "Negation-aware test-time adaptation on a toy dual encoder"
)]
pub struct Cli {
    /// Increase log verbosity (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a concept world and its evaluation splits.
    GenData(GenDataArgs),
    /// Contrastively pretrain the text encoder on affirmative captions.
    Pretrain(PretrainArgs),
    /// Adapt the layer norms of a checkpoint on a negated caption bundle.
    Adapt(AdaptArgs),
    /// Score a checkpoint on every split found in a data directory.
    Eval(EvalArgs),
    /// Compute MMD shift diagnostics and similarity histograms.
    Diagnose(DiagnoseArgs),
    /// Copy the layer norms of one checkpoint into another.
    Transplant(TransplantArgs),
    /// Run the whole pipeline and write a comparison table.
    Repro(ReproArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct Common {
    /// Root directory for every output of the command.
    #[arg(long, default_value = "neat-out")]
    pub out: PathBuf,

    /// Root seed; each stage derives its own seed from it.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Size preset for data, pretraining and adaptation.
    #[arg(long, value_enum, default_value_t = ProfileName::DeskDefault)]
    pub profile: ProfileName,
}

impl Common {
    pub fn new(out: impl Into<PathBuf>, seed: u64, profile: ProfileName) -> Self {
        Common {
            out: out.into(),
            seed,
            profile,
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.out.join("data")
    }
}

pub(crate) fn or_default(path: &Option<PathBuf>, default: impl FnOnce() -> PathBuf) -> PathBuf {
    path.clone().unwrap_or_else(default)
}

/// Parses a value through the type's serde representation.
fn serde_value<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn parse_split(s: &str) -> Result<SplitKind, String> {
    SplitKind::parse(s).ok_or_else(|| {
        let names: Vec<_> = SplitKind::ALL.iter().map(|k| k.as_str()).collect();
        format!("unknown split {s:?}; expected one of {}", names.join(", "))
    })
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: Common,

    /// Splits to generate (comma separated); all of them by default.
    #[arg(long, value_delimiter = ',', value_parser = parse_split)]
    pub split: Vec<SplitKind>,

    /// Item count for every generated split, overriding the profile.
    #[arg(long)]
    pub size: Option<usize>,

    #[arg(long)]
    pub concepts: Option<usize>,

    #[arg(long)]
    pub dim: Option<usize>,
}

impl GenDataArgs {
    pub fn new(common: Common) -> Self {
        GenDataArgs {
            common,
            split: Vec::new(),
            size: None,
            concepts: None,
            dim: None,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub common: Common,

    /// Affirmative bundle stem [default: OUT/data/pretrain_affirmative].
    #[arg(long)]
    pub bundle: Option<PathBuf>,

    #[arg(long)]
    pub steps: Option<usize>,

    #[arg(long)]
    pub lr: Option<f64>,

    #[arg(long)]
    pub batch_size: Option<usize>,
}

impl PretrainArgs {
    pub fn new(common: Common) -> Self {
        PretrainArgs {
            common,
            bundle: None,
            steps: None,
            lr: None,
            batch_size: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[default]
    Image,
    Video,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum HardestArg {
    Min,
    Max,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct AdaptArgs {
    #[command(flatten)]
    pub common: Common,

    /// Checkpoint to adapt [default: OUT/pretrained.ckpt].
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,

    /// Caption bundle stem [default: OUT/data/retrieval_neg].
    #[arg(long)]
    pub bundle: Option<PathBuf>,

    /// JSON file with any subset of the adaptation config fields.
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Temperature preset the config starts from.
    #[arg(long, value_enum, default_value_t = Preset::Image)]
    pub preset: Preset,

    /// Update schedule: `online` or `offline`.
    #[arg(long, value_parser = serde_value::<AdaptMode>)]
    pub mode: Option<AdaptMode>,

    /// Loss terms to switch off, e.g. `sr,tri`.
    #[arg(long)]
    pub disable: Option<String>,

    /// Candidate-selection temperature.
    #[arg(long)]
    pub tau1: Option<f64>,

    /// Reversion temperature.
    #[arg(long)]
    pub tau2: Option<f64>,

    /// Penalty weight on the negated part.
    #[arg(long)]
    pub alpha: Option<f64>,

    /// Weight of the textual debias term.
    #[arg(long)]
    pub lambda: Option<f64>,

    /// Captions per adaptation batch.
    #[arg(long)]
    pub batch_size: Option<usize>,

    /// Offline passes over the bundle.
    #[arg(long)]
    pub epochs: Option<usize>,

    /// Learning rate for the LN parameters.
    #[arg(long)]
    pub lr: Option<f64>,

    /// Decoupled weight decay.
    #[arg(long)]
    pub weight_decay: Option<f64>,

    /// Hardest-negative rule: least (min) or most (max) similar to the reversal.
    #[arg(long, value_enum)]
    pub hardest: Option<HardestArg>,

    /// `rule` or `llm`.
    #[arg(long, value_parser = serde_value::<DecomposerKind>, default_value = "rule")]
    pub decomposer: DecomposerKind,

    /// Chat-completions URL for `--decomposer llm`.
    #[arg(long)]
    pub llm_endpoint: Option<String>,

    /// Model name sent to the chat endpoint.
    #[arg(long)]
    pub llm_model: Option<String>,

    /// Per-request timeout.
    #[arg(long)]
    pub llm_timeout_secs: Option<u64>,

    /// Retries per caption before falling back to the rules.
    #[arg(long)]
    pub llm_retries: Option<u32>,
}

impl AdaptArgs {
    pub fn new(common: Common) -> Self {
        AdaptArgs {
            common,
            checkpoint: None,
            bundle: None,
            config: None,
            preset: Preset::Image,
            mode: None,
            disable: None,
            tau1: None,
            tau2: None,
            alpha: None,
            lambda: None,
            batch_size: None,
            epochs: None,
            lr: None,
            weight_decay: None,
            hardest: None,
            decomposer: DecomposerKind::Rule,
            llm_endpoint: None,
            llm_model: None,
            llm_timeout_secs: None,
            llm_retries: None,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,

    #[arg(long)]
    pub checkpoint: PathBuf,

    /// Directory holding the split bundles [default: OUT/data].
    #[arg(long)]
    pub data: Option<PathBuf>,

    /// Name recorded in the report [default: checkpoint file stem].
    #[arg(long)]
    pub label: Option<String>,

    /// `adapt.json` of the run that produced the checkpoint, hashed into the report.
    #[arg(long)]
    pub adapt_summary: Option<PathBuf>,
}

impl EvalArgs {
    pub fn new(common: Common, checkpoint: &Path) -> Self {
        EvalArgs {
            common,
            checkpoint: checkpoint.to_path_buf(),
            data: None,
            label: None,
            adapt_summary: None,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DiagnoseArgs {
    #[command(flatten)]
    pub common: Common,

    #[arg(long)]
    pub checkpoint: PathBuf,

    /// CLS_NEG bundle stem [default: OUT/data/cls_neg].
    #[arg(long)]
    pub bundle: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TransplantArgs {
    #[command(flatten)]
    pub common: Common,

    /// Checkpoint or layer-norm export to take the layer norms from.
    #[arg(long)]
    pub ln_from: PathBuf,

    /// Checkpoint receiving the layer norms.
    #[arg(long)]
    pub into: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ReproArgs {
    #[command(flatten)]
    pub common: Common,

    /// Also run the pretraining of an independently seeded sibling and
    /// transplant the adapted layer norms into it.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    pub transplant: bool,
}
