//! Command-line entry points: corpus generation, both training stages,
//! index building, evaluation, gradient checks and the HTTP service.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::checkpoint::{self, Checkpoint, Stage};
use crate::corpus::{generate_synthetic_corpus, Manifest, Split};
use crate::error::{Error, Result};
use crate::gradcheck::{check_clip, check_combined, check_info_nce, check_lm, GradCheckReport, DEFAULT_EPS};
use crate::models::{ModelBundle, ModelConfig, EXTEND_NOISE};
use crate::retrieval::{eval_retrieval, eval_text_encoder, tool_selection_suite, RetrievalIndex};
use crate::service::{self, ServiceConfig, ServiceState};
use crate::tensor::Scalar;
use crate::text::{Mode, TemplateSet, Tokenizer};
use crate::training::{pretrain_base_lm, train_sticker_clip, train_sticker_llm, Precision, TrainConfig, TrainLog};

#[derive(Debug, Parser)]
#[command(name = "stickers", version, about = "Sticker retrieval with a dual encoder and a prompt-tuned language model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic sticker corpus.
    GenData {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 640)]
        n: usize,
        #[arg(long, default_value_t = 0.25)]
        animated_fraction: f64,
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
    /// Train the dual encoder; writes the checkpoint plus step and epoch logs.
    TrainClip {
        #[arg(long, default_value = "data")]
        data: PathBuf,
        /// JSON object overriding training defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "clip.ckpt")]
        out: PathBuf,
    },
    /// Pretrain the base language model if needed, add the retrieval tokens,
    /// and prompt-tune.
    TrainLlm {
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long, default_value = "clip.ckpt")]
        clip_checkpoint: PathBuf,
        /// JSON object overriding prompt-tuning defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// JSON object overriding base-pretraining defaults.
        #[arg(long)]
        pretrain_config: Option<PathBuf>,
        #[arg(long, default_value = "llm.ckpt")]
        out: PathBuf,
    },
    /// Embed one split's stickers with the checkpoint's vision encoder.
    BuildIndex {
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        #[arg(long, default_value = "index.json")]
        out: PathBuf,
    },
    /// Print retrieval or tool-selection reports as JSON lines.
    Eval {
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long, value_enum)]
        mode: EvalMode,
        /// Non-retrieval prompts for scenario (a).
        #[arg(long, default_value_t = 200)]
        n_plain: usize,
    },
    /// Compare analytic gradients with central differences.
    GradCheck {
        #[arg(long, value_enum)]
        component: GradComponent,
        #[arg(long, default_value_t = DEFAULT_EPS)]
        eps: f64,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        index: PathBuf,
        /// Corpus root; overrides the config file and `STICKER_DATA`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Overrides the config file and `STICKER_PORT`.
        #[arg(long)]
        port: Option<u16>,
        /// JSON or key=value service config.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EvalMode {
    T2i,
    I2i,
    It2i,
    Tools,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum GradComponent {
    Losses,
    Clip,
    Llm,
}

/// Runs one command, writing reports to stdout.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            seed,
            n,
            animated_fraction,
            out,
        } => {
            let m = generate_synthetic_corpus(seed, n, animated_fraction)?;
            m.save(&out)?;
            println!(
                "wrote {} stickers ({} train, {} test) to {}; digest {}",
                m.records.len(),
                m.split(Split::Train).len(),
                m.split(Split::Test).len(),
                out.display(),
                m.digest()
            );
        }
        Command::TrainClip { data, config, out } => {
            let manifest = Manifest::load(&data)?;
            let cfg = load_config(config.as_deref(), TrainConfig::clip_default())?;
            let tok = Tokenizer::standard();
            let mut bundle = ModelBundle::<f32>::new(ModelConfig::default(), &tok, cfg.seed)?;
            let log = in_precision(cfg.precision, &mut bundle, |b| b.train_clip(&cfg, &manifest, &tok))?;
            write_logs(&out, &log)?;
            checkpoint::save(&out, &bundle, &tok, Stage::Clip)?;
            let last = log.steps.last().map_or(f64::NAN, |s| s.loss);
            println!("trained dual encoder for {} steps, final loss {last:.6}; wrote {}", cfg.total_steps, out.display());
        }
        Command::TrainLlm {
            data,
            clip_checkpoint,
            config,
            pretrain_config,
            out,
        } => {
            let manifest = Manifest::load(&data)?;
            let cfg = load_config(config.as_deref(), TrainConfig::llm_default())?;
            let pre_cfg = load_config(pretrain_config.as_deref(), TrainConfig::pretrain_default())?;
            let ckpt = checkpoint::load(&clip_checkpoint)?;
            let tok = ckpt.tokenizer;
            let mut bundle = ckpt.bundle;
            match ckpt.stage {
                Stage::Initialized => {
                    return Err(Error::InvalidState(format!(
                        "{} holds an untrained dual encoder; run train-clip first",
                        clip_checkpoint.display()
                    )))
                }
                Stage::Llm => {
                    return Err(Error::InvalidState(format!(
                        "{} is already prompt-tuned",
                        clip_checkpoint.display()
                    )))
                }
                Stage::Clip => {
                    let log = in_precision(pre_cfg.precision, &mut bundle, |b| b.pretrain(&pre_cfg, &tok))?;
                    let path = with_suffix(&out, "pretrain.steps.jsonl");
                    log.write_steps(&path)?;
                    println!("pretrained base language model, final loss {:.6}", log.steps.last().map_or(f64::NAN, |s| s.loss));
                }
                Stage::LmPretrained => {}
            }
            bundle.extend_vocab(&tok, EXTEND_NOISE, cfg.seed)?;
            let templates = TemplateSet::default();
            let log = in_precision(cfg.precision, &mut bundle, |b| b.train_llm(&cfg, &manifest, &tok, &templates))?;
            write_logs(&out, &log)?;
            checkpoint::save(&out, &bundle, &tok, Stage::Llm)?;
            let last = log.steps.last().map_or(f64::NAN, |s| s.loss);
            println!("prompt-tuned for {} steps, final loss {last:.6}; wrote {}", cfg.total_steps, out.display());
        }
        Command::BuildIndex {
            data,
            checkpoint,
            split,
            out,
        } => {
            let manifest = Manifest::load(&data)?;
            let ckpt = checkpoint::load(&checkpoint)?;
            let records = match split {
                SplitArg::Train => manifest.split(Split::Train),
                SplitArg::Test => manifest.split(Split::Test),
                SplitArg::All => manifest.records.iter().collect(),
            };
            let index = RetrievalIndex::build(&records, &ckpt.bundle)?;
            index.save(&out)?;
            println!("indexed {} stickers; fingerprint {}; wrote {}", index.len(), index.encoder_fingerprint, out.display());
        }
        Command::Eval {
            data,
            checkpoint,
            index,
            mode,
            n_plain,
        } => {
            for line in eval_reports(&data, &checkpoint, &index, mode, n_plain)? {
                println!("{line}");
            }
        }
        Command::GradCheck { component, eps } => {
            for r in grad_check_reports(component, eps)? {
                println!("{}", serde_json::to_string(&r)?);
            }
        }
        Command::Serve {
            checkpoint,
            index,
            data,
            port,
            config,
        } => {
            let mut cfg = match &config {
                Some(p) => ServiceConfig::load(p)?,
                None => ServiceConfig::default(),
            }
            .with_env()?;
            if let Some(d) = data {
                cfg.data_root = d;
            }
            if let Some(p) = port {
                cfg.port = p;
            }
            // Refuse a mismatched index before binding the port.
            let ckpt = checkpoint::load(&checkpoint)?;
            let idx = RetrievalIndex::load(&index)?;
            idx.check_fingerprint(&ckpt.bundle.vision_fingerprint())?;
            let state_cfg = cfg.clone();
            let runtime = tokio::runtime::Runtime::new().map_err(|e| Error::io("tokio runtime", e))?;
            runtime.block_on(service::serve(cfg, move || load_service(ckpt, idx, state_cfg)))?;
        }
    }
    Ok(())
}

fn load_service(ckpt: Checkpoint, index: RetrievalIndex, config: ServiceConfig) -> Result<ServiceState> {
    let manifest = Manifest::load(&config.data_root)?;
    ServiceState::new(
        ckpt.bundle,
        ckpt.tokenizer,
        TemplateSet::default(),
        index,
        manifest.records,
        config,
        ckpt.digest,
    )
}

fn load_config(path: Option<&Path>, defaults: TrainConfig) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::load_with_defaults(p, defaults),
        None => Ok(defaults),
    }
}

/// Runs `f` on the bundle in the requested precision.
fn in_precision(
    precision: Precision,
    bundle: &mut ModelBundle<f32>,
    f: impl FnOnce(&mut dyn AnyBundle) -> Result<TrainLog>,
) -> Result<TrainLog> {
    match precision {
        Precision::Single => f(bundle),
        Precision::Double => {
            let mut wide = bundle.cast::<f64>();
            let log = f(&mut wide)?;
            *bundle = wide.cast();
            Ok(log)
        }
    }
}

/// Object-safe view of a bundle in either precision, so training closures
/// can be written once.
pub trait AnyBundle {
    fn train_clip(&mut self, cfg: &TrainConfig, m: &Manifest, tok: &Tokenizer) -> Result<TrainLog>;
    fn pretrain(&mut self, cfg: &TrainConfig, tok: &Tokenizer) -> Result<TrainLog>;
    fn train_llm(&mut self, cfg: &TrainConfig, m: &Manifest, tok: &Tokenizer, t: &TemplateSet) -> Result<TrainLog>;
}

impl<T: Scalar> AnyBundle for ModelBundle<T> {
    fn train_clip(&mut self, cfg: &TrainConfig, m: &Manifest, tok: &Tokenizer) -> Result<TrainLog> {
        train_sticker_clip(cfg, m, self, tok, None)
    }

    fn pretrain(&mut self, cfg: &TrainConfig, tok: &Tokenizer) -> Result<TrainLog> {
        pretrain_base_lm(cfg, self, tok)
    }

    fn train_llm(&mut self, cfg: &TrainConfig, m: &Manifest, tok: &Tokenizer, t: &TemplateSet) -> Result<TrainLog> {
        train_sticker_llm(cfg, m, self, tok, t, None)
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

fn write_logs(out: &Path, log: &TrainLog) -> Result<()> {
    log.write_steps(&with_suffix(out, "steps.jsonl"))?;
    log.write_epochs(&with_suffix(out, "epochs.jsonl"))
}

/// JSON report lines for `eval`. Text-to-image on a checkpoint without
/// retrieval tokens falls back to the dual encoder's text tower.
pub fn eval_reports(data: &Path, checkpoint: &Path, index: &Path, mode: EvalMode, n_plain: usize) -> Result<Vec<String>> {
    let manifest = Manifest::load(data)?;
    let ckpt = checkpoint::load(checkpoint)?;
    let index = RetrievalIndex::load(index)?;
    let bundle = &ckpt.bundle;
    let tok = &ckpt.tokenizer;
    index.check_fingerprint(&bundle.vision_fingerprint())?;
    let queries: Vec<_> = index.ids.iter().filter_map(|&id| manifest.get(id)).collect();
    if queries.len() != index.len() {
        return Err(Error::invalid("index holds ids that are not in the corpus"));
    }
    let templates = TemplateSet::default();
    let extended = bundle.lm.is_extended();
    let needs_llm = |what: &str| {
        Error::InvalidState(format!("{what} needs a prompt-tuned checkpoint; run train-llm first"))
    };
    let mut lines = Vec::new();
    match mode {
        EvalMode::T2i if !extended => {
            lines.push(serde_json::to_string(&eval_text_encoder(bundle, tok, &queries, &index)?)?);
        }
        EvalMode::Tools => {
            if !extended {
                return Err(needs_llm("tool selection"));
            }
            let embs = bundle.vision.encode_records(&queries)?;
            for r in tool_selection_suite(bundle, tok, &templates, &queries, &embs, n_plain, 1)? {
                lines.push(serde_json::to_string(&r)?);
            }
        }
        m => {
            let mode = match m {
                EvalMode::T2i => Mode::T2I,
                EvalMode::I2i => Mode::I2I,
                _ => Mode::IT2I,
            };
            if !extended {
                return Err(needs_llm(&format!("{} retrieval", mode.as_str())));
            }
            let embs = bundle.vision.encode_records(&queries)?;
            let report = eval_retrieval(bundle, tok, &templates, &queries, &embs, &index, mode)?;
            lines.push(serde_json::to_string(&report)?);
        }
    }
    Ok(lines)
}

/// Gradient-check reports for one component.
pub fn grad_check_reports(component: GradComponent, eps: f64) -> Result<Vec<GradCheckReport>> {
    Ok(match component {
        GradComponent::Losses => check_info_nce(4, 16, 0.07, 1, eps)?,
        GradComponent::Clip => vec![check_clip(2, eps)?],
        GradComponent::Llm => vec![check_lm(3, eps)?, check_combined(4, 1.0, eps)?],
    })
}
