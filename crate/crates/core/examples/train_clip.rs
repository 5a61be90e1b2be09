//! Trains the dual encoder on the desk-scale corpus and reports text-to-image
//! recall on both splits.
//!
//! `cargo run --example train_clip -- [steps] [checkpoint-out]`

use std::path::Path;
use std::time::Instant;

use sticker_core::checkpoint::{self, Stage};
use sticker_core::corpus::{generate_synthetic_corpus, Split};
use sticker_core::models::{ModelBundle, ModelConfig};
use sticker_core::retrieval::{eval_text_encoder, RetrievalIndex};
use sticker_core::text::Tokenizer;
use sticker_core::training::{train_sticker_clip, TrainConfig};

fn main() -> sticker_core::Result<()> {
    env_logger::init();
    let mut cfg = TrainConfig::clip_default();
    let args: Vec<String> = std::env::args().skip(1).collect();
    if let Some(steps) = args.first() {
        cfg = cfg.with_steps(steps.parse().expect("steps must be an integer"));
    }
    let manifest = generate_synthetic_corpus(7, 640, 0.25)?;
    let tok = Tokenizer::standard();
    let mut bundle = ModelBundle::<f32>::new(ModelConfig::default(), &tok, cfg.seed)?;

    let start = Instant::now();
    let log = train_sticker_clip(&cfg, &manifest, &mut bundle, &tok, None)?;
    println!("{} steps in {:.1?}, final loss {:.4}, tau {:.4}", cfg.total_steps, start.elapsed(), log.steps.last().map_or(f64::NAN, |s| s.loss), bundle.tau());
    for e in &log.epochs {
        println!("epoch {:>3}  test r@1 {:.3} r@5 {:.3} r@10 {:.3}", e.epoch, e.r1, e.r5, e.r10);
    }
    for split in [Split::Train, Split::Test] {
        let records = manifest.split(split);
        let index = RetrievalIndex::build(&records, &bundle)?;
        let report = eval_text_encoder(&bundle, &tok, &records, &index)?;
        println!("{split:?}: {}", serde_json::to_string(&report)?);
    }
    if let Some(out) = args.get(1) {
        checkpoint::save(Path::new(out), &bundle, &tok, Stage::Clip)?;
        println!("wrote {out}");
    }
    Ok(())
}
