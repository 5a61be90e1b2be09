use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sticker_core::corpus::{generate_synthetic_corpus, select_frames};
use sticker_core::models::vision::pool_frames;
use sticker_core::models::{extract_ret_embedding, ModelBundle, ModelConfig};
use sticker_core::tensor::Tensor;
use sticker_core::text::{encoder_tokens, Special, Tokenizer};
use sticker_core::Error;

fn bundle(seed: u64) -> (Tokenizer, ModelBundle<f32>) {
    let tok = Tokenizer::standard();
    let b = ModelBundle::new(ModelConfig::default(), &tok, seed).unwrap();
    (tok, b)
}

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt()
}

#[test]
fn extend_vocab_shapes_and_mask() {
    let (tok, mut b) = bundle(1);
    let v = tok.base_size();
    let before = b.lm.clone();
    b.extend_vocab(&tok, 0.01, 3).unwrap();
    let d = b.config.embed_dim;
    let dd = b.config.lm.width;
    assert_eq!(b.lm.params.get("tok").rows(), v + 5);
    assert_eq!(b.lm.params.get("head").rows(), v + 5);
    assert_eq!(b.mask.count_true(), 5 * dd + 5 * dd + dd * d + d * dd);
    assert!(!b.mask.is_trainable("log_tau", 0));
    for name in ["tok", "head"] {
        let old = before.params.get(name);
        let new = b.lm.params.get(name);
        for r in 0..v {
            let a: Vec<u32> = old.row(r).iter().map(|x| x.to_bits()).collect();
            let c: Vec<u32> = new.row(r).iter().map(|x| x.to_bits()).collect();
            assert_eq!(a, c);
        }
    }
    assert!(matches!(b.extend_vocab(&tok, 0.01, 3), Err(Error::InvalidState(_))));
}

#[test]
fn new_rows_start_near_the_column_mean() {
    let (tok, mut b) = bundle(2);
    let v = tok.base_size();
    let old = b.lm.params.get("tok").clone();
    b.extend_vocab(&tok, 0.01, 5).unwrap();
    let new = b.lm.params.get("tok");
    let mut within = 0;
    let mut total = 0;
    for c in 0..old.cols() {
        let mean: f64 = (0..v).map(|r| old.get(r, c) as f64).sum::<f64>() / v as f64;
        for r in v..v + 5 {
            total += 1;
            if (new.get(r, c) as f64 - mean).abs() <= 0.03 {
                within += 1;
            }
        }
    }
    // 3σ covers 99.7% of gaussian draws.
    assert!(within as f64 / total as f64 > 0.99, "{within}/{total}");
}

#[test]
fn image_encoding_contracts() {
    let (_, b) = bundle(3);
    let m = generate_synthetic_corpus(7, 20, 0.5).unwrap();
    for r in &m.records {
        let e = b.vision.encode_record(r).unwrap();
        assert_eq!(e.len(), 64);
        assert!((norm(&e) - 1.0).abs() < 1e-6);
    }
    let f = &m.records[0].frames[0];
    let same = b.vision.encode_frames([f, f, f]).unwrap();
    let refs: Vec<_> = m.records.iter().collect();
    let batch = b.vision.encode_records(&refs).unwrap();
    let static_rec = m.records.iter().position(|r| r.frames.len() == 1).unwrap();
    let single = b.vision.encode_frames(select_frames(&m.records[static_rec])).unwrap();
    for (x, y) in single.iter().zip(batch.row(static_rec)) {
        assert!((x - y).abs() < 1e-5);
    }
    assert!((norm(&same) - 1.0).abs() < 1e-6);
}

#[test]
fn pooling_averages_before_normalizing() {
    let u = [3.0f64, -4.0, 0.0];
    let raw = Tensor::from_rows(&[u.to_vec(), u.iter().map(|x| -x).collect(), u.to_vec()]).unwrap();
    let out = pool_frames(&raw).unwrap();
    for (o, e) in out.iter().zip([0.6, -0.8, 0.0]) {
        assert!((o - e).abs() < 1e-12);
    }
    let cancel = Tensor::from_rows(&[u.to_vec(), u.iter().map(|x| -x).collect()]).unwrap();
    assert!(matches!(pool_frames(&cancel), Err(Error::DegenerateEmbedding { .. })));
}

#[test]
fn text_encoding_ignores_padding() {
    let (tok, b) = bundle(4);
    let ids = encoder_tokens("red cat waving", &tok);
    let pad = tok.pad_id();
    let e1 = b.text.encode(&ids, pad).unwrap();
    let batch = b
        .text
        .encode_batch(&[ids.clone(), encoder_tokens("a much longer blue dog sleeping text", &tok)], pad)
        .unwrap();
    assert!((norm(&e1) - 1.0).abs() < 1e-6);
    for (x, y) in e1.iter().zip(batch.row(0)) {
        assert!((x - y).abs() < 1e-6);
    }
    assert!(b.text.encode(&[], pad).is_err());
}

#[test]
fn lm_is_causal() {
    let (tok, b) = bundle(5);
    let ids: Vec<u32> = std::iter::once(tok.bos_id()).chain(tok.encode("copy: red cat")).collect();
    let (short, _) = b.lm.forward(&ids, None, None, None).unwrap();
    let mut longer = ids.clone();
    longer.extend(tok.encode(" xyz"));
    let (long, _) = b.lm.forward(&longer, None, None, None).unwrap();
    for t in 0..ids.len() {
        for (x, y) in short.row(t).iter().zip(long.row(t)) {
            assert!((x - y).abs() < 1e-6);
        }
    }
}

#[test]
fn visual_slot_substitution() {
    let (tok, mut b) = bundle(6);
    b.extend_vocab(&tok, 0.01, 1).unwrap();
    let prompt = vec![tok.bos_id(), tok.special(Special::Img), tok.slot_id(), tok.special(Special::ImgEnd)];
    let d = b.config.embed_dim;
    let zero = vec![0.0f32; d];
    let (with_zero, _) = b.lm.forward(&prompt, Some(&zero), Some(2), Some(&b.proj)).unwrap();
    // A zero visual embedding gives a zero slot input, as does a zeroed slot row.
    let mut zeroed = b.lm.clone();
    let slot = tok.slot_id() as usize;
    zeroed.params.get_mut("tok").unwrap().row_mut(slot).fill(0.0);
    let (zero_row, _) = zeroed.forward(&prompt, None, None, None).unwrap();
    assert_eq!(with_zero, zero_row);

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let v = Tensor::<f32>::randn(1, d, 1.0, &mut rng).into_vec();
    let v2: Vec<f32> = v.iter().map(|x| 2.0 * x).collect();
    let (a, _) = b.lm.forward(&prompt, Some(&v), Some(2), Some(&b.proj)).unwrap();
    let (c, _) = b.lm.forward(&prompt, Some(&v2), Some(2), Some(&b.proj)).unwrap();
    assert_ne!(a, c);

    assert!(b.lm.forward(&prompt, Some(&v), Some(9), Some(&b.proj)).is_err());
    assert!(b.lm.forward(&prompt, Some(&v[..3]), Some(2), Some(&b.proj)).is_err());
    assert!(b.lm.forward(&prompt, Some(&v), None, Some(&b.proj)).is_err());
}

#[test]
fn ret_embedding_is_scale_invariant() {
    let (tok, b) = bundle(7);
    let ids: Vec<u32> = std::iter::once(tok.bos_id()).chain(tok.encode("find")).collect();
    let (_, h) = b.lm.forward(&ids, None, None, None).unwrap();
    let e = extract_ret_embedding(&h, 1, b.proj.w_t()).unwrap();
    assert_eq!(e.len(), 64);
    assert!((norm(&e) - 1.0).abs() < 1e-6);
    let mut h3 = h.clone();
    h3.scale_in_place(3.0);
    let e3 = extract_ret_embedding(&h3, 1, b.proj.w_t()).unwrap();
    for (x, y) in e.iter().zip(&e3) {
        assert!((x - y).abs() < 1e-6);
    }
    let zero = Tensor::zeros(2, h.cols());
    assert!(matches!(
        extract_ret_embedding(&zero, 0, b.proj.w_t()),
        Err(Error::DegenerateEmbedding { .. })
    ));
}

#[test]
fn greedy_decoding() {
    let (tok, mut b) = bundle(8);
    let prompt: Vec<u32> = std::iter::once(tok.bos_id()).chain(tok.encode("add 1 and 2")).collect();
    let eos = tok.eos_id();
    assert!(b.lm.greedy_decode(&prompt, None, None, None, 0, eos, &[]).unwrap().is_empty());
    let a = b.lm.greedy_decode(&prompt, None, None, None, 12, eos, &[]).unwrap();
    let c = b.lm.greedy_decode(&prompt, None, None, None, 12, eos, &[]).unwrap();
    assert_eq!(a, c);
    assert!(a.iter().all(|&t| (t as usize) < tok.base_size()));
    // Forcing the head row of <ret> to dominate makes the extended LM emit it.
    b.extend_vocab(&tok, 0.01, 2).unwrap();
    let ret = tok.special(Special::Ret);
    let (_, h) = b.lm.forward(&prompt, None, None, None).unwrap();
    let last = h.row(prompt.len() - 1).to_vec();
    b.lm.params.get_mut("head").unwrap().row_mut(ret as usize).copy_from_slice(&last.iter().map(|x| x * 100.0).collect::<Vec<_>>());
    let out = b.lm.greedy_decode(&prompt, None, None, None, 12, eos, &[ret]).unwrap();
    assert_eq!(out, vec![ret]);
}

#[test]
fn extension_preserves_base_logits_exactly() {
    let (tok, b) = bundle(9);
    let mut ext = b.clone();
    ext.extend_vocab(&tok, 0.01, 4).unwrap();
    let v = tok.base_size();
    for text in ["copy: red cat", "reverse: abc", "add 3 and 4"] {
        let ids: Vec<u32> = std::iter::once(tok.bos_id()).chain(tok.encode(text)).collect();
        let (base, _) = b.lm.forward(&ids, None, None, None).unwrap();
        let (full, _) = ext.lm.forward(&ids, None, None, None).unwrap();
        for t in 0..ids.len() {
            let a: Vec<u32> = base.row(t).iter().map(|x| x.to_bits()).collect();
            let c: Vec<u32> = full.row(t)[..v].iter().map(|x| x.to_bits()).collect();
            assert_eq!(a, c);
        }
    }
    assert_eq!(ext.lm.truncated_to_base(), b.lm);
}
