//! Patch-based vision transformer `E_θ`.

use rand::Rng;

use super::nn;
use super::EncoderConfig;
use crate::corpus::{select_frames, Raster, StickerRecord, CHANNELS, IMAGE_SIZE};
use crate::error::{Error, Result};
use crate::graph::{AttnSpec, Graph, NodeId};
use crate::params::ParamSet;
use crate::tensor::{Scalar, Tensor};

pub const PATCH: usize = 8;
pub const N_PATCHES: usize = (IMAGE_SIZE / PATCH) * (IMAGE_SIZE / PATCH);
pub const PATCH_DIM: usize = PATCH * PATCH * CHANNELS;

/// Below this norm an averaged embedding is rejected as degenerate.
pub const MIN_NORM: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct VisionEncoder<T: Scalar> {
    pub cfg: EncoderConfig,
    pub embed_dim: usize,
    pub params: ParamSet<T>,
}

/// Row-major patches of one raster: `N_PATCHES × PATCH_DIM`, values centred
/// on zero.
pub fn patchify<T: Scalar>(raster: &Raster, out: &mut Vec<T>) {
    let per_side = IMAGE_SIZE / PATCH;
    for py in 0..per_side {
        for px in 0..per_side {
            for y in 0..PATCH {
                for x in 0..PATCH {
                    for c in 0..CHANNELS {
                        let v = raster.value(py * PATCH + y, px * PATCH + x, c) as f64 - 0.5;
                        out.push(T::of(v));
                    }
                }
            }
        }
    }
}

/// Distinct frames of a record's three-frame selection with the weight each
/// carries in the average.
fn frame_weights(record: &StickerRecord) -> Vec<(&Raster, f64)> {
    let frames = select_frames(record);
    let mut out: Vec<(&Raster, f64)> = Vec::new();
    for f in frames {
        match out.iter_mut().find(|(g, _)| std::ptr::eq(*g, f)) {
            Some(entry) => entry.1 += 1.0 / 3.0,
            None => out.push((f, 1.0 / 3.0)),
        }
    }
    out
}

impl<T: Scalar> VisionEncoder<T> {
    pub fn new<R: Rng + ?Sized>(cfg: EncoderConfig, embed_dim: usize, rng: &mut R) -> Self {
        let mut ps = ParamSet::new("vision");
        nn::init_linear(&mut ps, "patch", PATCH_DIM, cfg.width, true, rng);
        ps.insert("pos", Tensor::randn(N_PATCHES, cfg.width, nn::INIT_STD, rng));
        for i in 0..cfg.layers {
            nn::init_block(&mut ps, &format!("blocks.{i}"), cfg.width, cfg.ff, rng);
        }
        nn::init_layer_norm(&mut ps, "ln_f", cfg.width);
        nn::init_linear(&mut ps, "head", cfg.width, embed_dim, true, rng);
        VisionEncoder { cfg, embed_dim, params: ps }
    }

    /// Raw (unnormalized) per-frame encodings for `frames.len() / (N_PATCHES
    /// * PATCH_DIM)` stacked frames.
    pub fn frames_graph<'a>(&'a self, g: &mut Graph<'a, T>, patches: Tensor<T>) -> NodeId {
        let n_frames = patches.rows() / N_PATCHES;
        let x = g.constant(patches);
        let x = nn::linear(g, &self.params, "patch", x);
        let pos = self.params.bind(g, "pos");
        let pos = g.gather(pos, &nn::position_ids(n_frames, N_PATCHES));
        let mut x = g.add(x, pos);
        for i in 0..self.cfg.layers {
            let spec = AttnSpec {
                batch: n_frames,
                seq: N_PATCHES,
                heads: self.cfg.heads,
                causal: false,
                key_valid: None,
            };
            x = nn::block(g, &self.params, &format!("blocks.{i}"), x, spec);
        }
        let x = nn::layer_norm(g, &self.params, "ln_f", x);
        let pooled = g.mean_groups(x, N_PATCHES);
        nn::linear(g, &self.params, "head", pooled)
    }

    /// Unit-norm embeddings for a batch of records, one row each: frames
    /// are encoded independently, averaged over the three-frame selection,
    /// then L2-normalized.
    pub fn records_graph<'a>(&'a self, g: &mut Graph<'a, T>, records: &[&StickerRecord]) -> NodeId {
        let raw = self.averaged_graph(g, records);
        g.l2_normalize(raw)
    }

    fn averaged_graph<'a>(&'a self, g: &mut Graph<'a, T>, records: &[&StickerRecord]) -> NodeId {
        let weights: Vec<_> = records.iter().map(|r| frame_weights(r)).collect();
        let n_frames: usize = weights.iter().map(Vec::len).sum();
        let mut patches = Vec::with_capacity(n_frames * N_PATCHES * PATCH_DIM);
        let mut combine = Tensor::zeros(records.len(), n_frames);
        let mut col = 0;
        for (row, w) in weights.iter().enumerate() {
            for (raster, weight) in w {
                patchify(raster, &mut patches);
                combine.set(row, col, T::of(*weight));
                col += 1;
            }
        }
        let patches = Tensor::from_vec(n_frames * N_PATCHES, PATCH_DIM, patches).expect("patch layout");
        let raw = self.frames_graph(g, patches);
        let combine = g.constant(combine);
        g.matmul(combine, raw)
    }

    /// Encodes three frames (typically from [`select_frames`]) into one
    /// unit-norm embedding.
    pub fn encode_frames(&self, frames: [&Raster; 3]) -> Result<Vec<T>> {
        let mut patches = Vec::with_capacity(3 * N_PATCHES * PATCH_DIM);
        for f in frames {
            patchify(f, &mut patches);
        }
        let patches = Tensor::from_vec(3 * N_PATCHES, PATCH_DIM, patches)?;
        let mut g = Graph::inference();
        let raw = self.frames_graph(&mut g, patches);
        pool_frames(g.value(raw))
    }

    pub fn encode_record(&self, record: &StickerRecord) -> Result<Vec<T>> {
        self.encode_frames(select_frames(record))
    }

    /// Unit-norm embeddings for many records, processed in chunks.
    pub fn encode_records(&self, records: &[&StickerRecord]) -> Result<Tensor<T>> {
        let mut out = Tensor::zeros(records.len(), self.embed_dim);
        for (c, chunk) in records.chunks(64).enumerate() {
            let mut g = Graph::inference();
            let raw = self.averaged_graph(&mut g, chunk);
            let raw = g.value(raw);
            for i in 0..chunk.len() {
                let v = normalize_checked(raw.row(i))?;
                out.row_mut(c * 64 + i).copy_from_slice(&v);
            }
        }
        Ok(out)
    }
}

/// Averages per-frame encodings (one per row) and L2-normalizes the mean.
pub fn pool_frames<T: Scalar>(raw: &Tensor<T>) -> Result<Vec<T>> {
    if raw.rows() == 0 {
        return Err(Error::invalid("no frames to pool"));
    }
    let mut avg = vec![T::zero(); raw.cols()];
    for i in 0..raw.rows() {
        for (a, &v) in avg.iter_mut().zip(raw.row(i)) {
            *a += v;
        }
    }
    let n = T::of(raw.rows() as f64);
    for a in &mut avg {
        *a = *a / n;
    }
    normalize_checked(&avg)
}

pub(crate) fn normalize_checked<T: Scalar>(v: &[T]) -> Result<Vec<T>> {
    let norm = v.iter().map(|x| x.f64() * x.f64()).sum::<f64>().sqrt();
    if !(norm >= MIN_NORM) {
        return Err(Error::DegenerateEmbedding {
            norm,
            threshold: MIN_NORM,
        });
    }
    Ok(v.iter().map(|&x| T::of(x.f64() / norm)).collect())
}
