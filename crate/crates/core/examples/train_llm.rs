//! Pretrains the base language model, extends it with the retrieval tokens,
//! prompt-tunes it against a trained dual encoder, and reports tool
//! selection and retrieval on the test split.
//!
//! `cargo run --example train_llm -- <clip-checkpoint> [llm-steps] [checkpoint-out]`

use std::path::Path;
use std::time::Instant;

use sticker_core::checkpoint::{self, Stage};
use sticker_core::corpus::{generate_synthetic_corpus, Split};
use sticker_core::models::EXTEND_NOISE;
use sticker_core::retrieval::{eval_retrieval, eval_tool_selection, plain_tool_prompts, tool_selection_suite, RetrievalIndex};
use sticker_core::text::{Mode, TemplateSet};
use sticker_core::training::{pretrain_base_lm, train_sticker_llm, TrainConfig};

fn main() -> sticker_core::Result<()> {
    env_logger::init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let Some(clip_path) = args.first() else {
        eprintln!("usage: train_llm <clip-checkpoint> [llm-steps] [checkpoint-out]");
        std::process::exit(2);
    };
    let ckpt = checkpoint::load(Path::new(clip_path))?;
    let tok = ckpt.tokenizer;
    let mut bundle = ckpt.bundle;
    let manifest = generate_synthetic_corpus(7, 640, 0.25)?;
    let templates = TemplateSet::default();

    if ckpt.stage == Stage::Clip {
        let start = Instant::now();
        let pre = pretrain_base_lm(&TrainConfig::pretrain_default(), &mut bundle, &tok)?;
        println!(
            "pretrained base LM in {:.1?}, final loss {:.4}",
            start.elapsed(),
            pre.steps.last().map_or(f64::NAN, |s| s.loss)
        );
    }
    let test = manifest.split(Split::Test);
    let test_embs = bundle.vision.encode_records(&test)?;
    let plain = plain_tool_prompts(&tok, 200, 1);
    println!("base model, scenario (a): {}", eval_tool_selection(&bundle, &tok, &plain, false)?);

    let mut cfg = TrainConfig::llm_default();
    if let Some(steps) = args.get(1) {
        cfg = cfg.with_steps(steps.parse().expect("steps must be an integer"));
    }
    bundle.extend_vocab(&tok, EXTEND_NOISE, cfg.seed)?;
    let index = RetrievalIndex::build(&test, &bundle)?;
    let untrained = eval_retrieval(&bundle, &tok, &templates, &test, &test_embs, &index, Mode::T2I)?;
    println!("untrained W_t t2i: {}", serde_json::to_string(&untrained)?);

    let start = Instant::now();
    let log = train_sticker_llm(&cfg, &manifest, &mut bundle, &tok, &templates, None)?;
    let last = log.steps.last().expect("at least one step");
    println!(
        "{} llm steps in {:.1?}: loss {:.4} (lm {:.4}, t2i {:.4}, i2t {:.4}, replay {:.4})",
        cfg.total_steps,
        start.elapsed(),
        last.loss,
        last.loss_c,
        last.loss_t2i,
        last.loss_i2t,
        last.loss_replay
    );
    for r in tool_selection_suite(&bundle, &tok, &templates, &test, &test_embs, 200, 1)? {
        println!("tools {}", serde_json::to_string(&r)?);
    }
    for mode in [Mode::T2I, Mode::I2I, Mode::IT2I] {
        let r = eval_retrieval(&bundle, &tok, &templates, &test, &test_embs, &index, mode)?;
        println!("retrieval {}", serde_json::to_string(&r)?);
    }
    if let Some(out) = args.get(2) {
        checkpoint::save(Path::new(out), &bundle, &tok, Stage::Llm)?;
        println!("wrote {out}");
    }
    Ok(())
}
