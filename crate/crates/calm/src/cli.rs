//! Command-line driver. Every command resolves a configuration (preset, then
//! the JSON file on top, then flags), runs, and writes `report.json` and
//! `config.resolved.json` into `--out`; training commands also write a
//! checkpoint into `--out/checkpoint`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use calm_core::config::{Modality, Precision, RunConfig};
use calm_core::corpus::{Split, Vocab};
use calm_core::train::{self, gradcheck_suite, GradCheckEntry, Store};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use crate::checkpoint::{self, Checkpoint};
use crate::data::{load_dataset, write_synth};
use crate::error::{format_err, io_err, CalmError, Result};
use crate::report::{config_hash, write_run, RunReport};

pub const CHECKPOINT_DIR: &str = "checkpoint";

#[derive(Debug, Parser)]
#[command(name = "calm", about = "Contrastive acoustic-language pretraining and emotion recognition")]
pub struct Cli {
    /// JSON configuration applied on top of the preset
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, default_value = "runs/latest")]
    pub out: PathBuf,
    #[arg(long, global = true, value_enum, default_value_t = Preset::Default)]
    pub preset: Preset,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// recipe-sized models
    Default,
    /// single-core sizes used by the test suite
    Tiny,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModalityArg {
    Audio,
    Text,
    Both,
}

impl From<ModalityArg> for Modality {
    fn from(m: ModalityArg) -> Self {
        match m {
            ModalityArg::Audio => Modality::Audio,
            ModalityArg::Text => Modality::Text,
            ModalityArg::Both => Modality::Both,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PrecisionArg {
    F32,
    F64,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic corpus as a manifest and WAV files
    Synth,
    /// Stage 0: masked language modeling on transcripts
    PretrainLm,
    /// Stage 1: contrastive acoustic-language pretraining
    PretrainCalp {
        /// stage-0 checkpoint (not needed when the language weight is zero)
        #[arg(long)]
        lm: Option<PathBuf>,
    },
    /// Stage 2: joint masked language and audio modeling
    PretrainAlt {
        #[arg(long)]
        lm: Option<PathBuf>,
        /// stage-1 checkpoint; without it the spectral transformer stays at initialization
        #[arg(long)]
        calp: Option<PathBuf>,
    },
    /// Stage 3: supervised fine-tuning of the emotion head
    Finetune {
        /// pretrained checkpoint; without it training starts from initialization
        #[arg(long)]
        backbone: Option<PathBuf>,
        #[arg(long, value_enum)]
        modality: Option<ModalityArg>,
        /// also train the multimodal transformer
        #[arg(long)]
        unfreeze: bool,
        #[arg(long)]
        supervision_fraction: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Evaluate a fine-tuned checkpoint
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        #[arg(long, value_enum, default_value_t = ModalityArg::Both)]
        modality: ModalityArg,
    },
    /// Finite-difference checks of every training loss; exits nonzero on failure
    Gradcheck {
        #[arg(long, value_enum)]
        precision: Option<PrecisionArg>,
        /// perturb the analytic gradients (harness self-test)
        #[arg(long)]
        corrupt_gradient: bool,
    },
    /// Pipeline-ordering and contrastive-weight ablations plus the patch sweep
    Ablate {
        #[arg(long)]
        skip_sweep: bool,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::PretrainLm => "pretrain-lm",
            Command::PretrainCalp { .. } => "pretrain-calp",
            Command::PretrainAlt { .. } => "pretrain-alt",
            Command::Finetune { .. } => "finetune",
            Command::Eval { .. } => "eval",
            Command::Gradcheck { .. } => "gradcheck",
            Command::Ablate { .. } => "ablate",
        }
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Preset, overlaid with the JSON file, overlaid with `--seed`.
pub fn resolve_config(preset: Preset, file: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let base = match preset {
        Preset::Default => RunConfig::default(),
        Preset::Tiny => RunConfig::tiny(),
    };
    let mut value = serde_json::to_value(&base).expect("config serializes");
    if let Some(path) = file {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let patch: Value = serde_json::from_str(&text).map_err(|e| format_err(path, e))?;
        if !patch.is_object() {
            return Err(format_err(path, "configuration must be a JSON object"));
        }
        merge(&mut value, patch);
    }
    let mut cfg: RunConfig =
        serde_json::from_value(value).map_err(|e| format_err(file.unwrap_or(Path::new("<preset>")), e))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_ckpt(path: &Path) -> Result<Checkpoint> {
    checkpoint::load(&checkpoint_dir(path))
}

/// Accepts either a run directory or its checkpoint directory.
pub fn checkpoint_dir(path: &Path) -> PathBuf {
    let nested = path.join(CHECKPOINT_DIR);
    if nested.join(checkpoint::INDEX).exists() {
        nested
    } else {
        path.to_path_buf()
    }
}

fn upstream_vocab(ckpts: &[Option<&Checkpoint>]) -> Result<Option<Vocab>> {
    let mut vocab: Option<Vocab> = None;
    for v in ckpts.iter().flatten().filter_map(|c| c.vocab.as_ref()) {
        match &vocab {
            Some(prev) if prev != v => return Err(CalmError::Usage("upstream checkpoints use different vocabularies".into())),
            _ => vocab = Some(v.clone()),
        }
    }
    Ok(vocab)
}

struct Outcome {
    result: Value,
    checkpoint: Option<(Store, Option<Vocab>, Vec<String>)>,
    success: bool,
}

fn json_of<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("result serializes")
}

fn gradcheck_outcome(entries: Vec<GradCheckEntry>, precision: Precision) -> Outcome {
    let success = entries.iter().all(|e| e.passed);
    Outcome { result: json!({ "precision": precision, "checks": entries, "passed": success }), checkpoint: None, success }
}

fn execute(cmd: &Command, cfg: &mut RunConfig, out: &Path) -> Result<Outcome> {
    let done = |result: Value, store: Store, vocab: Vocab, labels: Vec<String>| Outcome {
        result,
        checkpoint: Some((store, Some(vocab), labels)),
        success: true,
    };
    Ok(match cmd {
        Command::Synth => {
            let path = write_synth(cfg, out)?;
            let m = crate::manifest::load_manifest(&path)?;
            let counts: std::collections::BTreeMap<&str, usize> = m.split_counts().into_iter().map(|(s, n)| (s.as_str(), n)).collect();
            Outcome { result: json!({ "manifest": path, "utterances": m.records.len(), "splits": counts }), checkpoint: None, success: true }
        }
        Command::PretrainLm => {
            let ds = load_dataset(cfg, None)?;
            let (store, log) = train::stage0_lm(&ds, cfg)?;
            done(json!({ "log": json_of(&log), "vocab_size": ds.vocab.len() }), store, ds.vocab, ds.label_names)
        }
        Command::PretrainCalp { lm } => {
            let lm = lm.as_deref().map(load_ckpt).transpose()?;
            let ds = load_dataset(cfg, upstream_vocab(&[lm.as_ref()])?)?;
            let (store, log) = train::stage1_calp(&ds, lm.as_ref().map(|c| &c.store), cfg)?;
            let retrieval = train::final_retrieval(&log);
            done(json!({ "log": json_of(&log), "retrieval_top1": retrieval }), store, ds.vocab, ds.label_names)
        }
        Command::PretrainAlt { lm, calp } => {
            let lm = lm.as_deref().map(load_ckpt).transpose()?;
            let calp = calp.as_deref().map(load_ckpt).transpose()?;
            let ds = load_dataset(cfg, upstream_vocab(&[lm.as_ref(), calp.as_ref()])?)?;
            let (store, log) = train::stage2_alt(&ds, lm.as_ref().map(|c| &c.store), calp.as_ref().map(|c| &c.store), cfg)?;
            done(json!({ "log": json_of(&log) }), store, ds.vocab, ds.label_names)
        }
        Command::Finetune { backbone, modality, unfreeze, supervision_fraction, steps } => {
            if let Some(m) = modality {
                cfg.finetune.modality = (*m).into();
            }
            if *unfreeze {
                cfg.finetune.freeze = false;
            }
            if let Some(f) = supervision_fraction {
                cfg.finetune.supervision_fraction = *f;
            }
            if steps.is_some() {
                cfg.finetune.steps = *steps;
            }
            cfg.validate()?;
            let backbone = backbone.as_deref().map(load_ckpt).transpose()?;
            let ds = load_dataset(cfg, upstream_vocab(&[backbone.as_ref()])?)?;
            let (store, report) = train::stage3_finetune(&ds, backbone.as_ref().map(|c| &c.store), cfg)?;
            done(json_of(&report), store, ds.vocab, ds.label_names)
        }
        Command::Eval { checkpoint, split, modality } => {
            let ck = load_ckpt(checkpoint)?;
            // the architecture comes from the checkpoint; data settings from this run
            let mut model_cfg = ck.config.clone();
            model_cfg.data = cfg.data.clone();
            *cfg = model_cfg;
            let ds = load_dataset(cfg, ck.vocab.clone())?;
            if !ck.label_names.is_empty() && ck.label_names != ds.label_names {
                return Err(CalmError::Usage(format!(
                    "checkpoint labels {:?} differ from corpus labels {:?}",
                    ck.label_names, ds.label_names
                )));
            }
            let r = train::evaluate(&ck.store, &ds, cfg, (*split).into(), (*modality).into())?;
            Outcome { result: json!({ "checkpoint": ck.id, "evaluation": json_of(&r) }), checkpoint: None, success: true }
        }
        Command::Gradcheck { precision, corrupt_gradient } => {
            let mut gc = cfg.gradcheck;
            if let Some(p) = precision {
                gc.precision = if *p == PrecisionArg::F32 { Precision::F32 } else { Precision::F64 };
            }
            gc.corrupt_gradient |= *corrupt_gradient;
            let entries = match gc.precision {
                Precision::F64 => gradcheck_suite::<f64>(&gc, cfg.seed)?,
                Precision::F32 => gradcheck_suite::<f32>(&gc, cfg.seed)?,
            };
            gradcheck_outcome(entries, gc.precision)
        }
        Command::Ablate { skip_sweep } => {
            if cfg.data.manifest.is_some() {
                return Err(CalmError::Usage("ablations run on the synthetic corpus; remove data.manifest".into()));
            }
            let ablation = train::pipeline_ablation(cfg)?;
            let sweep = if *skip_sweep { None } else { Some(train::patch_sweep(cfg)?) };
            let result = json!({
                "ablation": json_of(&ablation),
                "means": {
                    "full": train::mean(&ablation.full),
                    "stage2_only": train::mean(&ablation.stage2_only),
                    "supervised_only": train::mean(&ablation.supervised_only),
                    "alpha_on": train::mean(&ablation.alpha_on),
                    "alpha_off": train::mean(&ablation.alpha_off),
                },
                "pipeline_ordered": ablation.pipeline_ordered(),
                "alpha_ordered": ablation.alpha_ordered(),
                "patch_sweep": sweep.as_ref().map(json_of),
            });
            Outcome { result, checkpoint: None, success: true }
        }
    })
}

/// Runs one command; returns the report and whether the command succeeded.
pub fn run(cli: &Cli) -> Result<(RunReport, bool)> {
    let mut cfg = resolve_config(cli.preset, cli.config.as_deref(), cli.seed)?;
    let start = Instant::now();
    fs::create_dir_all(&cli.out).map_err(io_err(&cli.out))?;
    let outcome = execute(&cli.command, &mut cfg, &cli.out)?;
    let checkpoint_id = match &outcome.checkpoint {
        Some((store, vocab, labels)) => Some(checkpoint::save(&cli.out.join(CHECKPOINT_DIR), store, &cfg, vocab.as_ref(), labels)?),
        None => None,
    };
    let report = RunReport {
        command: cli.command.name().to_string(),
        seed: cfg.seed,
        config_hash: config_hash(&cfg),
        checkpoint_id,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        result: outcome.result,
    };
    write_run(&cli.out, &report, &cfg)?;
    Ok((report, outcome.success))
}

/// Process entry point; the return value is the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok((report, ok)) => {
            println!("{}", serde_json::to_string_pretty(&report.result).expect("result serializes"));
            if ok {
                0
            } else {
                eprintln!("{} failed", report.command);
                1
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}
