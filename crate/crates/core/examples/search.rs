//! Retrieval through a prompt-tuned checkpoint: one text, one image and one
//! image+text query against the test gallery.
//!
//! `cargo run --example search -- <llm-checkpoint> ["query text"]`

use std::path::Path;

use sticker_core::checkpoint;
use sticker_core::corpus::{generate_synthetic_corpus, Split};
use sticker_core::retrieval::{ret_query_embedding, QueryKind, RetQuery, RetrievalIndex};
use sticker_core::text::TemplateSet;

fn main() -> sticker_core::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let Some(path) = args.first() else {
        eprintln!("usage: search <llm-checkpoint> [\"query text\"]");
        std::process::exit(2);
    };
    let ckpt = checkpoint::load(Path::new(path))?;
    let (bundle, tok) = (ckpt.bundle, ckpt.tokenizer);
    let templates = TemplateSet::default();
    let manifest = generate_synthetic_corpus(7, 640, 0.25)?;
    let gallery = manifest.split(Split::Test);
    let index = RetrievalIndex::build(&gallery, &bundle)?;

    let text = args.get(1).cloned().unwrap_or_else(|| gallery[0].description.clone());
    let image = bundle.vision.encode_record(gallery[1])?;
    let queries = [
        (QueryKind::Text, Some(text.as_str()), None),
        (QueryKind::Image, None, Some(image.as_slice())),
        (QueryKind::ImageText, Some(text.as_str()), Some(image.as_slice())),
    ];
    let describe = |id: u32| gallery.iter().find(|r| r.id == id).map_or("", |r| r.description.as_str());
    println!("text: {text}\nimage: #{} {}", gallery[1].id, gallery[1].description);
    for (kind, text, image) in queries {
        let q = RetQuery {
            mode: kind.mode(),
            text,
            image,
        };
        let emb = ret_query_embedding(&bundle, &tok, &templates, &q)?;
        let found = index.search(&emb, 3, kind)?;
        println!("{kind:?}");
        for h in found.hits {
            println!("  #{:<3} {:.4}  {}", h.id, h.score, describe(h.id));
        }
    }
    Ok(())
}
