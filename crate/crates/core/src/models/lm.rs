//! Causal transformer language model `p_θ` with an untied output head, the
//! retrieval projections, and vocabulary extension.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::nn;
use super::vision::normalize_checked;
use super::LmConfig;
use crate::error::{Error, Result};
use crate::graph::{AttnSpec, Graph, NodeId};
use crate::params::ParamSet;
use crate::tensor::{matmul, Scalar, Tensor};
use crate::text::SPECIAL_TOKENS;

/// Standard deviation of the noise added to mean-initialized new rows.
pub const EXTEND_NOISE: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct LanguageModel<T: Scalar> {
    pub cfg: LmConfig,
    /// Rows of the original vocabulary.
    pub base_vocab: usize,
    pub params: ParamSet<T>,
}

/// `W_t` (`D × d`) maps `<ret>` hidden states into the retrieval space;
/// `W_c` (`d × D`) maps visual embeddings into the LM input space.
#[derive(Clone, Debug, PartialEq)]
pub struct Projections<T: Scalar> {
    pub params: ParamSet<T>,
}

impl<T: Scalar> Projections<T> {
    pub fn new<R: Rng + ?Sized>(lm_width: usize, embed_dim: usize, rng: &mut R) -> Self {
        let mut ps = ParamSet::new("proj");
        // Fan-in scaling: an image embedding lands in the language model at
        // roughly the magnitude of a token embedding after its layer norm,
        // and small variations of the `<ret>` state are not suppressed.
        ps.insert("w_t", Tensor::randn(lm_width, embed_dim, 1.0 / (lm_width as f64).sqrt(), rng));
        ps.insert("w_c", Tensor::randn(embed_dim, lm_width, 1.0 / (embed_dim as f64).sqrt(), rng));
        Projections { params: ps }
    }

    pub fn w_t(&self) -> &Tensor<T> {
        self.params.get("w_t")
    }

    pub fn w_c(&self) -> &Tensor<T> {
        self.params.get("w_c")
    }
}

/// Visual inputs for a batch: `embeddings` has one row per slot, and
/// `slots[i] = (sequence index, position)` says where row `i` goes.
pub struct VisualInput {
    pub embeddings: NodeId,
    pub slots: Vec<(usize, usize)>,
}

/// Node handles from a batched forward pass over right-padded sequences of
/// common length `seq_len`; row `b * seq_len + t` is position `t` of
/// sequence `b`.
pub struct LmOutput {
    pub hiddens: NodeId,
    pub seq_len: usize,
}

impl<T: Scalar> LanguageModel<T> {
    pub fn new<R: Rng + ?Sized>(cfg: LmConfig, vocab: usize, rng: &mut R) -> Self {
        let mut ps = ParamSet::new("lm");
        ps.insert("tok", Tensor::randn(vocab, cfg.width, nn::INIT_STD, rng));
        ps.insert("pos", Tensor::randn(cfg.context, cfg.width, nn::INIT_STD, rng));
        for i in 0..cfg.layers {
            nn::init_block(&mut ps, &format!("blocks.{i}"), cfg.width, cfg.ff, rng);
        }
        nn::init_layer_norm(&mut ps, "ln_f", cfg.width);
        ps.insert("head", Tensor::randn(vocab, cfg.width, nn::INIT_STD, rng));
        LanguageModel {
            cfg,
            base_vocab: vocab,
            params: ps,
        }
    }

    /// Current number of vocabulary rows.
    pub fn vocab(&self) -> usize {
        self.params.get("tok").rows()
    }

    pub fn is_extended(&self) -> bool {
        self.vocab() > self.base_vocab
    }

    /// Copy of the model with five rows appended to the embedding table and
    /// the head, each initialized to the column mean of the existing rows
    /// plus gaussian noise.
    pub fn extended<R: Rng + ?Sized>(&self, noise_std: f64, rng: &mut R) -> Result<Self> {
        if self.is_extended() {
            return Err(Error::InvalidState("language model vocabulary already extended".into()));
        }
        let normal = Normal::new(0.0, noise_std).map_err(|e| Error::invalid(e.to_string()))?;
        let mut out = self.clone();
        for name in ["tok", "head"] {
            let table = out.params.get_mut(name).expect("vocabulary table");
            let (rows, cols) = table.shape();
            let mut mean = vec![0.0f64; cols];
            for r in 0..rows {
                for (m, v) in mean.iter_mut().zip(table.row(r)) {
                    *m += v.f64();
                }
            }
            let mut extra = Tensor::zeros(SPECIAL_TOKENS.len(), cols);
            for r in 0..SPECIAL_TOKENS.len() {
                for (c, m) in mean.iter().enumerate() {
                    extra.set(r, c, T::of(m / rows as f64 + normal.sample(rng)));
                }
            }
            table.append_rows(&extra)?;
        }
        Ok(out)
    }

    /// Copy restricted to the base vocabulary (drops any extension rows).
    pub fn truncated_to_base(&self) -> Self {
        let mut out = self.clone();
        for name in ["tok", "head"] {
            let t = out.params.get_mut(name).expect("vocabulary table");
            *t = t.head_rows(self.base_vocab);
        }
        out
    }

    fn check_tokens(&self, seqs: &[Vec<u32>]) -> Result<usize> {
        let vocab = self.vocab();
        let mut longest = 0;
        for s in seqs {
            if s.is_empty() {
                return Err(Error::invalid("empty token sequence"));
            }
            if s.len() > self.cfg.context {
                return Err(Error::ContextOverflow {
                    len: s.len(),
                    limit: self.cfg.context,
                });
            }
            if let Some(&t) = s.iter().find(|&&t| t as usize >= vocab) {
                return Err(Error::invalid(format!("token {t} outside vocabulary of {vocab}")));
            }
            longest = longest.max(s.len());
        }
        Ok(longest)
    }

    /// Batched forward pass up to the final layer norm. Visual slots have
    /// their input embedding replaced by `v W_c` before the first block.
    pub fn forward_graph<'a>(
        &'a self,
        g: &mut Graph<'a, T>,
        seqs: &[Vec<u32>],
        visual: Option<VisualInput>,
        proj: Option<&'a Projections<T>>,
        pad_id: u32,
    ) -> Result<LmOutput> {
        let len = self.check_tokens(seqs)?;
        let batch = seqs.len();
        let ids: Vec<usize> = seqs
            .iter()
            .flat_map(|s| (0..len).map(move |p| s.get(p).copied().unwrap_or(pad_id) as usize))
            .collect();
        let tok = self.params.bind(g, "tok");
        let mut x = g.gather(tok, &ids);
        if let Some(vis) = visual {
            let proj = proj.ok_or_else(|| Error::invalid("visual input requires projections"))?;
            let (rows, cols) = g.value(vis.embeddings).shape();
            let w_c = proj.params.bind(g, "w_c");
            if cols != g.value(w_c).rows() {
                return Err(Error::Shape(format!(
                    "visual embedding has dimension {cols}, expected {}",
                    g.value(w_c).rows()
                )));
            }
            if rows != vis.slots.len() {
                return Err(Error::Shape(format!("{rows} visual rows for {} slots", vis.slots.len())));
            }
            let mut idx = Vec::with_capacity(rows);
            for &(b, p) in &vis.slots {
                if b >= batch || p >= seqs[b].len() {
                    return Err(Error::invalid(format!("image slot ({b}, {p}) out of range")));
                }
                idx.push(b * len + p);
            }
            let projected = g.matmul(vis.embeddings, w_c);
            x = g.replace_rows(x, &idx, projected);
        }
        let pos = self.params.bind(g, "pos");
        let pos = g.gather(pos, &nn::position_ids(batch, len));
        x = g.add(x, pos);
        for i in 0..self.cfg.layers {
            let spec = AttnSpec {
                batch,
                seq: len,
                heads: self.cfg.heads,
                causal: true,
                key_valid: None,
            };
            x = nn::block(g, &self.params, &format!("blocks.{i}"), x, spec);
        }
        let hiddens = nn::layer_norm(g, &self.params, "ln_f", x);
        Ok(LmOutput { hiddens, seq_len: len })
    }

    /// Logits (`rows × vocab`) for hidden-state rows.
    pub fn logits_graph<'a>(&'a self, g: &mut Graph<'a, T>, hiddens: NodeId) -> NodeId {
        let head = self.params.bind(g, "head");
        g.matmul_nt(hiddens, head)
    }

    /// Single-sequence forward pass returning `(logits, hiddens)`, shaped
    /// `len × vocab` and `len × D`.
    pub fn forward(
        &self,
        tokens: &[u32],
        visual: Option<&[T]>,
        slot: Option<usize>,
        proj: Option<&Projections<T>>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut g = Graph::inference();
        let vis = match (visual, slot) {
            (Some(v), Some(s)) => Some(VisualInput {
                embeddings: g.constant(Tensor::from_vec(1, v.len(), v.to_vec())?),
                slots: vec![(0, s)],
            }),
            (None, None) => None,
            _ => return Err(Error::invalid("visual embedding and image slot must be given together")),
        };
        let out = self.forward_graph(&mut g, &[tokens.to_vec()], vis, proj, 0)?;
        let logits = self.logits_graph(&mut g, out.hiddens);
        Ok((g.value(logits).clone(), g.value(out.hiddens).clone()))
    }

    /// Argmax decoding (lowest id wins ties). Stops after emitting `eos` or
    /// any token in `stop`, or after `max_new` tokens; the stop token is
    /// included in the output.
    #[allow(clippy::too_many_arguments)]
    pub fn greedy_decode(
        &self,
        prompt: &[u32],
        visual: Option<&[T]>,
        slot: Option<usize>,
        proj: Option<&Projections<T>>,
        max_new: usize,
        eos: u32,
        stop: &[u32],
    ) -> Result<Vec<u32>> {
        let mut seq = prompt.to_vec();
        let mut out = Vec::new();
        while out.len() < max_new {
            if seq.len() >= self.cfg.context {
                break;
            }
            let mut g = Graph::inference();
            let vis = match (visual, slot) {
                (Some(v), Some(s)) => Some(VisualInput {
                    embeddings: g.constant(Tensor::from_vec(1, v.len(), v.to_vec())?),
                    slots: vec![(0, s)],
                }),
                (None, None) => None,
                _ => return Err(Error::invalid("visual embedding and image slot must be given together")),
            };
            let fwd = self.forward_graph(&mut g, &[seq.clone()], vis, proj, 0)?;
            let last = g.gather(fwd.hiddens, &[seq.len() - 1]);
            let logits = self.logits_graph(&mut g, last);
            let next = argmax(g.value(logits).row(0));
            out.push(next);
            seq.push(next);
            if next == eos || stop.contains(&next) {
                break;
            }
        }
        Ok(out)
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax<T: Scalar>(row: &[T]) -> u32 {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

/// Normalized `h W_t` for the hidden state at `ret_position`.
pub fn extract_ret_embedding<T: Scalar>(hiddens: &Tensor<T>, ret_position: usize, w_t: &Tensor<T>) -> Result<Vec<T>> {
    if ret_position >= hiddens.rows() {
        return Err(Error::invalid(format!(
            "<ret> position {ret_position} beyond {} hidden states",
            hiddens.rows()
        )));
    }
    if hiddens.cols() != w_t.rows() {
        return Err(Error::Shape(format!("hidden width {} vs W_t rows {}", hiddens.cols(), w_t.rows())));
    }
    let h = Tensor::from_vec(1, hiddens.cols(), hiddens.row(ret_position).to_vec())?;
    let projected = matmul(&h, false, w_t, false);
    normalize_checked(projected.data())
}
