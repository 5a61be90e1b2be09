//! Bidirectional transformer text encoder `E_φ`.

use rand::Rng;

use super::nn;
use super::vision::normalize_checked;
use super::EncoderConfig;
use crate::error::{Error, Result};
use crate::graph::{AttnSpec, Graph, NodeId};
use crate::params::ParamSet;
use crate::tensor::{Scalar, Tensor};
use crate::text::TEXT_CONTEXT;

#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoder<T: Scalar> {
    pub cfg: EncoderConfig,
    pub vocab: usize,
    pub embed_dim: usize,
    pub params: ParamSet<T>,
}

impl<T: Scalar> TextEncoder<T> {
    pub fn new<R: Rng + ?Sized>(cfg: EncoderConfig, vocab: usize, embed_dim: usize, rng: &mut R) -> Self {
        let mut ps = ParamSet::new("text");
        ps.insert("tok", Tensor::randn(vocab, cfg.width, nn::INIT_STD, rng));
        ps.insert("pos", Tensor::randn(TEXT_CONTEXT, cfg.width, nn::INIT_STD, rng));
        for i in 0..cfg.layers {
            nn::init_block(&mut ps, &format!("blocks.{i}"), cfg.width, cfg.ff, rng);
        }
        nn::init_layer_norm(&mut ps, "ln_f", cfg.width);
        nn::init_linear(&mut ps, "head", cfg.width, embed_dim, true, rng);
        TextEncoder {
            cfg,
            vocab,
            embed_dim,
            params: ps,
        }
    }

    fn check(&self, seqs: &[Vec<u32>]) -> Result<usize> {
        let mut longest = 0;
        for s in seqs {
            if s.is_empty() {
                return Err(Error::invalid("empty token sequence"));
            }
            if s.len() > TEXT_CONTEXT {
                return Err(Error::ContextOverflow {
                    len: s.len(),
                    limit: TEXT_CONTEXT,
                });
            }
            if let Some(&t) = s.iter().find(|&&t| t as usize >= self.vocab) {
                return Err(Error::invalid(format!("token {t} outside text vocabulary")));
            }
            longest = longest.max(s.len());
        }
        Ok(longest)
    }

    /// Raw encodings (one row per sequence) from the position-0 state.
    /// Sequences are right-padded; padded keys are masked out of attention.
    pub fn raw_graph<'a>(&'a self, g: &mut Graph<'a, T>, seqs: &[Vec<u32>], pad_id: u32) -> Result<NodeId> {
        let len = self.check(seqs)?;
        let batch = seqs.len();
        let mut ids = Vec::with_capacity(batch * len);
        let mut valid = Vec::with_capacity(batch * len);
        for s in seqs {
            for p in 0..len {
                ids.push(s.get(p).copied().unwrap_or(pad_id) as usize);
                valid.push(p < s.len());
            }
        }
        let tok = self.params.bind(g, "tok");
        let x = g.gather(tok, &ids);
        let pos = self.params.bind(g, "pos");
        let pos = g.gather(pos, &nn::position_ids(batch, len));
        let mut x = g.add(x, pos);
        for i in 0..self.cfg.layers {
            let spec = AttnSpec {
                batch,
                seq: len,
                heads: self.cfg.heads,
                causal: false,
                key_valid: Some(valid.clone()),
            };
            x = nn::block(g, &self.params, &format!("blocks.{i}"), x, spec);
        }
        let first: Vec<usize> = (0..batch).map(|b| b * len).collect();
        let x = g.gather(x, &first);
        let x = nn::layer_norm(g, &self.params, "ln_f", x);
        Ok(nn::linear(g, &self.params, "head", x))
    }

    /// Unit-norm embeddings, one row per sequence.
    pub fn batch_graph<'a>(&'a self, g: &mut Graph<'a, T>, seqs: &[Vec<u32>], pad_id: u32) -> Result<NodeId> {
        let raw = self.raw_graph(g, seqs, pad_id)?;
        Ok(g.l2_normalize(raw))
    }

    /// Encodes one token sequence (already starting with `<bos>`).
    pub fn encode(&self, tokens: &[u32], pad_id: u32) -> Result<Vec<T>> {
        let mut g = Graph::inference();
        let raw = self.raw_graph(&mut g, &[tokens.to_vec()], pad_id)?;
        normalize_checked(g.value(raw).row(0))
    }

    /// Unit-norm embeddings for many sequences, processed in chunks.
    pub fn encode_batch(&self, seqs: &[Vec<u32>], pad_id: u32) -> Result<Tensor<T>> {
        let mut out = Tensor::zeros(seqs.len(), self.embed_dim);
        for (c, chunk) in seqs.chunks(64).enumerate() {
            let mut g = Graph::inference();
            let raw = self.raw_graph(&mut g, chunk, pad_id)?;
            let raw = g.value(raw);
            for i in 0..chunk.len() {
                out.row_mut(c * 64 + i).copy_from_slice(&normalize_checked(raw.row(i))?);
            }
        }
        Ok(out)
    }
}
