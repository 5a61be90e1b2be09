//! Contrastive and language-modelling losses, in plain form for evaluation
//! and testing and as graph nodes for training.

use crate::error::{Error, Result};
use crate::graph::{neg_log_softmax_at, Graph, NodeId};
use crate::tensor::{matmul, Scalar, Tensor};

/// Default weight of the contrastive terms in the combined objective.
pub const DEFAULT_LAMBDA: f64 = 1.0;

/// `N` text and `N` image embeddings, row `i` of each forming the positive
/// pair, compared at temperature `tau`.
#[derive(Clone, Copy, Debug)]
pub struct ContrastiveBatch<'a, T> {
    pub text_embs: &'a Tensor<T>,
    pub image_embs: &'a Tensor<T>,
    pub tau: T,
}

impl<T: Scalar> ContrastiveBatch<'_, T> {
    /// `S[i][j] = <T_i, I_j> / τ`.
    fn logits(&self) -> Result<Tensor<T>> {
        if !(self.tau > T::zero()) {
            return Err(Error::invalid(format!("temperature must be positive, got {}", self.tau.f64())));
        }
        let (n, d) = self.text_embs.shape();
        if n == 0 || self.image_embs.shape() != (n, d) {
            return Err(Error::Shape(format!(
                "text batch {:?} vs image batch {:?}",
                self.text_embs.shape(),
                self.image_embs.shape()
            )));
        }
        let mut s = matmul(self.text_embs, false, self.image_embs, true);
        s.scale_in_place(T::one() / self.tau);
        Ok(s)
    }
}

fn mean_diag_nll<T: Scalar>(s: &Tensor<T>) -> T {
    let n = s.rows();
    let total: T = (0..n).map(|i| neg_log_softmax_at(s.row(i), i)).sum();
    total / T::of(n as f64)
}

/// Text-to-image InfoNCE: each text must pick its image among the batch.
pub fn info_nce_t2i<T: Scalar>(batch: &ContrastiveBatch<'_, T>) -> Result<T> {
    Ok(mean_diag_nll(&batch.logits()?))
}

/// Image-to-text InfoNCE: each image must pick its text among the batch.
pub fn info_nce_i2t<T: Scalar>(batch: &ContrastiveBatch<'_, T>) -> Result<T> {
    Ok(mean_diag_nll(&batch.logits()?.transpose()))
}

/// Sum of both InfoNCE directions.
pub fn clip_total<T: Scalar>(batch: &ContrastiveBatch<'_, T>) -> Result<T> {
    let s = batch.logits()?;
    Ok(mean_diag_nll(&s) + mean_diag_nll(&s.transpose()))
}

/// Mean of `-log softmax(logits[t])[targets[t]]` over positions where
/// `loss_mask` is set.
pub fn lm_nll<T: Scalar>(logits: &Tensor<T>, targets: &[usize], loss_mask: &[bool]) -> Result<T> {
    if targets.len() != logits.rows() || loss_mask.len() != logits.rows() {
        return Err(Error::Shape(format!(
            "{} logit rows, {} targets, {} mask entries",
            logits.rows(),
            targets.len(),
            loss_mask.len()
        )));
    }
    let mut total = T::zero();
    let mut m = 0usize;
    for (t, (&target, &on)) in targets.iter().zip(loss_mask).enumerate() {
        if !on {
            continue;
        }
        if target >= logits.cols() {
            return Err(Error::invalid(format!("target {target} outside {} classes", logits.cols())));
        }
        total += neg_log_softmax_at(logits.row(t), target);
        m += 1;
    }
    if m == 0 {
        return Err(Error::invalid("loss mask selects no positions"));
    }
    Ok(total / T::of(m as f64))
}

/// `L_c + λ (L_t2i + L_i2t)`.
pub fn combined_loss(l_c: f64, l_t2i: f64, l_i2t: f64, lambda: f64) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(Error::invalid(format!("lambda must be non-negative, got {lambda}")));
    }
    Ok(l_c + lambda * (l_t2i + l_i2t))
}

/// Both InfoNCE directions as graph nodes. `text` and `image` hold unit-norm
/// rows; `inv_tau` is a `1 × 1` node holding `1/τ`.
pub fn info_nce_graph<T: Scalar>(g: &mut Graph<'_, T>, text: NodeId, image: NodeId, inv_tau: NodeId) -> (NodeId, NodeId) {
    let n = g.value(text).rows();
    let s = g.matmul_nt(text, image);
    let s = g.mul_scalar(s, inv_tau);
    let diag: Vec<usize> = (0..n).collect();
    let ones = vec![T::one(); n];
    let t2i = g.cross_entropy(s, &diag, &ones);
    let st = g.transpose(s);
    let i2t = g.cross_entropy(st, &diag, &ones);
    (t2i, i2t)
}

/// `1/τ = exp(-log_tau)` as a differentiable node.
pub fn inv_tau_graph<T: Scalar>(g: &mut Graph<'_, T>, log_tau: NodeId) -> NodeId {
    let neg = g.scale(log_tau, -1.0);
    g.exp(neg)
}

/// Per-step loss components.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub lm: f64,
    pub t2i: f64,
    pub i2t: f64,
}
