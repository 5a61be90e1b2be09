//! Generates the synthetic sticker corpus, writes it to disk, reads it back
//! and prints a few records.
//!
//! `cargo run --example gen_corpus -- [out-dir]`

use std::path::PathBuf;

use sticker_core::corpus::{generate_synthetic_corpus, Manifest, Split};

fn main() -> sticker_core::Result<()> {
    let out = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("sticker-corpus"), PathBuf::from);
    let manifest = generate_synthetic_corpus(7, 640, 0.25)?;
    manifest.save(&out)?;
    let reloaded = Manifest::load(&out)?;
    assert_eq!(reloaded, manifest);

    let animated = manifest.records.iter().filter(|r| r.is_animated()).count();
    println!(
        "{} stickers ({} train, {} test, {animated} animated) written to {}",
        manifest.records.len(),
        manifest.split(Split::Train).len(),
        manifest.split(Split::Test).len(),
        out.display()
    );
    for r in manifest.records.iter().take(5) {
        println!("#{:<3} {:>2} frame(s)  {}", r.id, r.frames.len(), r.description);
    }
    Ok(())
}
