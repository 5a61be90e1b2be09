//! Serves the HTTP API over the test gallery of a freshly generated corpus.
//!
//! `cargo run --example serve -- <llm-checkpoint> [port]`, then for example
//!
//! ```text
//! curl -s localhost:8080/search -H 'content-type: application/json' \
//!      -d '{"text": "a red cat waving", "k": 3}'
//! curl -s localhost:8080/chat -H 'content-type: application/json' \
//!      -d '{"message": "show me a sticker of a red cat waving"}'
//! ```

use std::path::Path;

use sticker_core::checkpoint;
use sticker_core::corpus::{generate_synthetic_corpus, Split};
use sticker_core::retrieval::RetrievalIndex;
use sticker_core::service::{self, ServiceConfig, ServiceState};
use sticker_core::text::TemplateSet;

fn main() -> sticker_core::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let Some(path) = args.first().cloned() else {
        eprintln!("usage: serve <llm-checkpoint> [port]");
        std::process::exit(2);
    };
    let mut config = ServiceConfig {
        data_root: std::env::temp_dir().join("sticker-serve-corpus"),
        ..ServiceConfig::default()
    };
    if let Some(port) = args.get(1) {
        config.port = port.parse().expect("port must be a number");
    }
    let state_config = config.clone();
    let load = move || {
        let manifest = generate_synthetic_corpus(7, 640, 0.25)?;
        manifest.save(&state_config.data_root)?;
        let ckpt = checkpoint::load(Path::new(&path))?;
        let gallery: Vec<_> = manifest.split(Split::Test).into_iter().cloned().collect();
        let refs: Vec<_> = gallery.iter().collect();
        let index = RetrievalIndex::build(&refs, &ckpt.bundle)?;
        ServiceState::new(
            ckpt.bundle,
            ckpt.tokenizer,
            TemplateSet::default(),
            index,
            gallery,
            state_config,
            ckpt.digest,
        )
    };
    let runtime = tokio::runtime::Runtime::new().map_err(|e| sticker_core::Error::io("tokio runtime", e))?;
    runtime.block_on(service::serve(config, load))
}
