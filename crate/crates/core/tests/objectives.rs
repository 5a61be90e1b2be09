mod common;

use common::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sticker_core::gradcheck::{check_clip, check_combined, check_info_nce, check_lm, DEFAULT_EPS};
use sticker_core::objectives::{clip_total, combined_loss, info_nce_i2t, info_nce_t2i, lm_nll, ContrastiveBatch, DEFAULT_LAMBDA};
use sticker_core::tensor::Tensor;

fn batch<'a>(t: &'a Tensor<f64>, i: &'a Tensor<f64>, tau: f64) -> ContrastiveBatch<'a, f64> {
    ContrastiveBatch {
        text_embs: t,
        image_embs: i,
        tau,
    }
}

fn two_by_two(rows: [[f64; 2]; 2]) -> (Tensor<f64>, Tensor<f64>) {
    // With images as the identity basis, text rows are the similarity rows.
    let t = Tensor::from_vec(2, 2, rows.concat()).unwrap();
    let i = Tensor::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    (t, i)
}

#[test]
fn losses_match_brute_force_on_random_batches() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let n = rng.random_range(1..=8);
        let d = rng.random_range(2..=16);
        let tau = rng.random_range(0.01..2.0);
        let t = unit_rows(n, d, &mut rng);
        let i = unit_rows(n, d, &mut rng);
        let b = batch(&t, &i, tau);
        let t2i = oracle_t2i(&t, &i, tau);
        let i2t = oracle_i2t(&t, &i, tau);
        assert!((info_nce_t2i(&b).unwrap() - t2i).abs() <= 1e-9);
        assert!((info_nce_i2t(&b).unwrap() - i2t).abs() <= 1e-9);
        assert!((clip_total(&b).unwrap() - (t2i + i2t)).abs() <= 1e-9);
    }
}

#[test]
fn lm_nll_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..200 {
        let rows = rng.random_range(1..=8);
        let vocab = rng.random_range(2..=40);
        let logits = Tensor::randn(rows, vocab, 2.0, &mut rng);
        let targets: Vec<usize> = (0..rows).map(|_| rng.random_range(0..vocab)).collect();
        let mut mask: Vec<bool> = (0..rows).map(|_| rng.random_bool(0.6)).collect();
        mask[rng.random_range(0..rows)] = true;
        let got = lm_nll(&logits, &targets, &mask).unwrap();
        assert!((got - oracle_lm_nll(&logits, &targets, &mask)).abs() <= 1e-9);
    }
}

#[test]
fn two_pair_hand_case() {
    let (t, i) = two_by_two([[1.0, 0.0], [0.0, 1.0]]);
    let l = info_nce_t2i(&batch(&t, &i, 1.0)).unwrap();
    assert!((l - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);
    assert!((l - 0.31326).abs() < 1e-5);
}

#[test]
fn asymmetric_two_pair_case() {
    let (t, i) = two_by_two([[0.9, 0.1], [0.8, 0.7]]);
    let b = batch(&t, &i, 1.0);
    let want_t2i = (softmax_xent(&[0.9, 0.1], 0) + softmax_xent(&[0.8, 0.7], 1)) / 2.0;
    let want_i2t = (softmax_xent(&[0.9, 0.8], 0) + softmax_xent(&[0.1, 0.7], 1)) / 2.0;
    assert!((info_nce_t2i(&b).unwrap() - want_t2i).abs() < 1e-12);
    assert!((info_nce_i2t(&b).unwrap() - want_i2t).abs() < 1e-12);
}

#[test]
fn degenerate_batches() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let t = unit_rows(1, 5, &mut rng);
    let i = unit_rows(1, 5, &mut rng);
    let b = batch(&t, &i, 0.07);
    assert_eq!(info_nce_t2i(&b).unwrap(), 0.0);
    assert_eq!(info_nce_i2t(&b).unwrap(), 0.0);
    assert_eq!(clip_total(&b).unwrap(), 0.0);

    // Identical rows everywhere give uniform softmax.
    for n in [2usize, 5, 8] {
        let same = Tensor::from_vec(n, 2, [0.6, 0.8].repeat(n)).unwrap();
        for tau in [0.05, 1.0] {
            let l = info_nce_t2i(&batch(&same, &same, tau)).unwrap();
            assert!((l - (n as f64).ln()).abs() < 1e-12);
        }
    }
}

#[test]
fn symmetric_similarities_give_equal_directions() {
    let (t, i) = two_by_two([[0.3, -0.2], [-0.2, 0.9]]);
    let b = batch(&t, &i, 0.5);
    let t2i = info_nce_t2i(&b).unwrap();
    assert!((info_nce_i2t(&b).unwrap() - t2i).abs() < 1e-12);
    assert!((clip_total(&b).unwrap() - 2.0 * t2i).abs() < 1e-12);
}

#[test]
fn non_positive_temperature_is_rejected() {
    let (t, i) = two_by_two([[1.0, 0.0], [0.0, 1.0]]);
    assert!(info_nce_t2i(&batch(&t, &i, 0.0)).is_err());
    assert!(info_nce_i2t(&batch(&t, &i, -1.0)).is_err());
}

#[test]
fn lm_nll_fixed_cases() {
    let vocab = 155;
    let uniform = Tensor::filled(3, vocab, 0.25);
    let l = lm_nll(&uniform, &[0, 7, 154], &[true; 3]).unwrap();
    assert!((l - (vocab as f64).ln()).abs() < 1e-12);
    assert!((l - 5.0434).abs() < 1e-4);

    let logits = Tensor::from_vec(2, 3, vec![2.0, 0.0, -1.0, 5.0, 5.0, 5.0]).unwrap();
    let p = 2f64.exp() / (2f64.exp() + 1.0 + (-1f64).exp());
    let l = lm_nll(&logits, &[0, 1], &[true, false]).unwrap();
    assert!((l + p.ln()).abs() < 1e-12);

    let hand = Tensor::from_vec(3, 2, vec![0.0, 1.0, 3.0, -1.0, 0.5, 0.5]).unwrap();
    let want = ((1.0 + 1f64.exp()).ln() - 1.0 + (1.0 + (-4f64).exp()).ln() + 2f64.ln()) / 3.0;
    assert!((lm_nll(&hand, &[1, 0, 1], &[true; 3]).unwrap() - want).abs() < 1e-12);

    assert!(lm_nll(&hand, &[1, 0, 1], &[false; 3]).is_err());
    assert!(lm_nll(&hand, &[1, 0, 2], &[true; 3]).is_err());
}

#[test]
fn combined_loss_arithmetic() {
    assert!((combined_loss(0.5, 0.3, 0.3, 1.0).unwrap() - 1.1).abs() < 1e-12);
    assert_eq!(combined_loss(0.5, 0.3, 0.3, 0.0).unwrap(), 0.5);
    assert_eq!(DEFAULT_LAMBDA, 1.0);
    assert!(combined_loss(0.5, 0.3, 0.3, -0.1).is_err());
}

#[test]
fn info_nce_gradients() {
    for r in check_info_nce(3, 16, 0.07, 1, DEFAULT_EPS).unwrap() {
        assert!(r.max_rel_error <= 1e-4, "{r:?}");
        if r.component == "info_nce_t2i" {
            assert!(r.max_rel_error <= 1e-5, "{r:?}");
        }
    }
}

#[test]
fn language_model_gradients() {
    let r = check_lm(3, DEFAULT_EPS).unwrap();
    assert!(r.max_rel_error <= 1e-4, "{r:?}");
}

#[test]
fn combined_objective_gradients() {
    let r = check_combined(4, 1.0, DEFAULT_EPS).unwrap();
    assert!(r.max_rel_error <= 1e-4, "{r:?}");
    assert!(r.n_checked > 0);
}

/// The dual-encoder loss involves the sharpest nonlinearity (`1/τ ≈ 14`
/// over normalized features of both towers). At the default step the
/// central-difference truncation term alone reaches ~1e-3 on elements with
/// tiny gradients, so this check uses a smaller step; below that it is
/// limited by round-off on the key biases, whose true gradient is zero.
#[test]
fn dual_encoder_gradients() {
    let r = check_clip(2, 3e-4).unwrap();
    assert!(r.max_rel_error <= 1e-3, "{r:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn permuting_pairs_leaves_losses_unchanged(seed in any::<u64>(), n in 2usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = unit_rows(n, 6, &mut rng);
        let i = unit_rows(n, 6, &mut rng);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.rotate_left(1 + seed as usize % (n - 1));
        let pt = Tensor::from_rows(&perm.iter().map(|&p| t.row(p).to_vec()).collect::<Vec<_>>()).unwrap();
        let pi = Tensor::from_rows(&perm.iter().map(|&p| i.row(p).to_vec()).collect::<Vec<_>>()).unwrap();
        let a = batch(&t, &i, 0.1);
        let b = batch(&pt, &pi, 0.1);
        prop_assert!((info_nce_t2i(&a).unwrap() - info_nce_t2i(&b).unwrap()).abs() < 1e-10);
        prop_assert!((info_nce_i2t(&a).unwrap() - info_nce_i2t(&b).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn logit_shift_leaves_nll_unchanged(seed in any::<u64>(), shift in -50.0f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = Tensor::randn(4, 9, 1.5, &mut rng);
        let mut shifted = logits.clone();
        shifted.data_mut().iter_mut().for_each(|x| *x += shift);
        let targets = [0, 3, 8, 4];
        let mask = [true, true, false, true];
        let a: f64 = lm_nll(&logits, &targets, &mask).unwrap();
        let b = lm_nll(&shifted, &targets, &mask).unwrap();
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn raising_the_positive_similarity_lowers_the_loss(seed in any::<u64>(), bump in 0.01f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 4;
        // Build similarities directly: images are the identity basis.
        let mut sims: Vec<f64> = (0..n * n).map(|_| rng.random_range(-0.5..0.5)).collect();
        let eye = Tensor::from_vec(n, n, (0..n * n).map(|k| if k % (n + 1) == 0 { 1.0 } else { 0.0 }).collect()).unwrap();
        let before = Tensor::from_vec(n, n, sims.clone()).unwrap();
        let target = rng.random_range(0..n);
        sims[target * n + target] += bump;
        let after = Tensor::from_vec(n, n, sims).unwrap();
        let lb = info_nce_t2i(&batch(&before, &eye, 0.2)).unwrap();
        let la = info_nce_t2i(&batch(&after, &eye, 0.2)).unwrap();
        prop_assert!(la < lb);
        let lb = info_nce_i2t(&batch(&before, &eye, 0.2)).unwrap();
        let la = info_nce_i2t(&batch(&after, &eye, 0.2)).unwrap();
        prop_assert!(la < lb);
    }

    #[test]
    fn losses_are_finite_at_the_temperature_floor(seed in any::<u64>(), n in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = unit_rows(n, 8, &mut rng);
        let i = unit_rows(n, 8, &mut rng);
        let l = clip_total(&batch(&t, &i, 1e-3)).unwrap();
        prop_assert!(l.is_finite() && l >= 0.0);
    }
}
