//! Masked AdamW, gradient clipping and the warmup-cosine schedule.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::{ParamAccess, TrainableMask};
use crate::tensor::{Scalar, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moments per parameter plus the shared step counter.
#[derive(Clone, Debug, Default)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub moments: BTreeMap<String, (Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new() -> Self {
        OptimizerState {
            step: 0,
            moments: BTreeMap::new(),
        }
    }
}

/// One decoupled-weight-decay Adam step applied only where `mask` is true.
/// Masked-out elements keep their parameter and moment values bit for bit,
/// and parameters without a gradient are skipped entirely.
pub fn masked_step<T: Scalar, P: ParamAccess<T> + ?Sized>(
    params: &mut P,
    grads: &BTreeMap<String, Tensor<T>>,
    mask: &TrainableMask,
    state: &mut OptimizerState<T>,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);
    for (name, g) in grads {
        let Some(m) = mask.get(name) else { continue };
        if !m.iter().any(|&b| b) {
            continue;
        }
        let p = params
            .tensor_mut(name)
            .ok_or_else(|| Error::invalid(format!("gradient for unknown parameter {name}")))?;
        if p.shape() != g.shape() || m.len() != p.len() {
            return Err(Error::Shape(format!(
                "{name}: parameter {:?}, gradient {:?}, mask {}",
                p.shape(),
                g.shape(),
                m.len()
            )));
        }
        let (m1, m2) = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| (Tensor::zeros(p.rows(), p.cols()), Tensor::zeros(p.rows(), p.cols())));
        let (b1, b2) = (T::of(BETA1), T::of(BETA2));
        let (lr_t, wd, eps) = (T::of(lr), T::of(weight_decay), T::of(ADAM_EPS));
        let (bc1, bc2) = (T::of(bc1), T::of(bc2));
        let pd = p.data_mut();
        let (m1d, m2d) = (m1.data_mut(), m2.data_mut());
        for (i, &gi) in g.data().iter().enumerate() {
            if !m[i] {
                continue;
            }
            m1d[i] = b1 * m1d[i] + (T::one() - b1) * gi;
            m2d[i] = b2 * m2d[i] + (T::one() - b2) * gi * gi;
            let mhat = m1d[i] / bc1;
            let vhat = m2d[i] / bc2;
            if weight_decay != 0.0 {
                pd[i] -= lr_t * wd * pd[i];
            }
            pd[i] -= lr_t * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Rescales gradients so the global L2 norm over trainable elements is at
/// most `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut BTreeMap<String, Tensor<T>>, mask: &TrainableMask, max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for (name, g) in grads.iter() {
        let Some(m) = mask.get(name) else { continue };
        for (v, &on) in g.data().iter().zip(m) {
            if on {
                sq += v.f64() * v.f64();
            }
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = T::of(max_norm / norm);
        for g in grads.values_mut() {
            g.scale_in_place(s);
        }
    }
    norm
}

/// Linear warmup from 0 to `lr` over `warmup` steps, then half-cosine decay
/// to 0 at `total`.
pub fn cosine_lr(step: usize, lr: f64, warmup: usize, total: usize) -> f64 {
    if step < warmup {
        return lr * step as f64 / warmup as f64;
    }
    if step >= total {
        return 0.0;
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(name: &str, v: f64) -> BTreeMap<String, Tensor<f64>> {
        BTreeMap::from([(name.to_string(), Tensor::scalar(v))])
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = one("w", 0.5);
        let g = one("w", 1.0);
        let mut mask = TrainableMask::new();
        mask.set("w", vec![true]);
        let mut st = OptimizerState::new();
        masked_step(&mut p, &g, &mask, &mut st, 0.1, 0.0).unwrap();
        assert!((p["w"].item() - 0.4).abs() < 1e-8);
    }

    #[test]
    fn frozen_and_fixed_points() {
        let init = Tensor::from_vec(1, 3, vec![0.3f32, -1.0, 2.0]).unwrap();
        let mut p = BTreeMap::from([("w".to_string(), init.clone())]);
        let g = BTreeMap::from([("w".to_string(), Tensor::from_vec(1, 3, vec![1.0f32, -2.0, 0.5]).unwrap())]);
        let mut mask = TrainableMask::new();
        mask.set("w", vec![false; 3]);
        let mut st = OptimizerState::new();
        for _ in 0..10 {
            masked_step(&mut p, &g, &mask, &mut st, 0.1, 0.01).unwrap();
        }
        assert_eq!(p["w"], init);

        mask.set("w", vec![true, false, true]);
        let zero = BTreeMap::from([("w".to_string(), Tensor::zeros(1, 3))]);
        masked_step(&mut p, &zero, &mask, &mut st, 0.1, 0.0).unwrap();
        assert_eq!(p["w"], init);
        masked_step(&mut p, &g, &mask, &mut st, 0.1, 0.01).unwrap();
        assert_eq!(p["w"].data()[1].to_bits(), init.data()[1].to_bits());
        assert_ne!(p["w"].data()[0], init.data()[0]);
        assert_eq!(st.moments["w"].0.data()[1], 0.0);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut p = BTreeMap::from([("w".to_string(), Tensor::<f64>::zeros(2, 2))]);
        let g = BTreeMap::from([("w".to_string(), Tensor::zeros(1, 2))]);
        let mut mask = TrainableMask::new();
        mask.set("w", vec![true; 4]);
        let err = masked_step(&mut p, &g, &mask, &mut OptimizerState::new(), 0.1, 0.0);
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    #[test]
    fn schedule_shape() {
        let (lr, w, t) = (2e-3, 10, 110);
        assert_eq!(cosine_lr(0, lr, w, t), 0.0);
        assert!((cosine_lr(w, lr, w, t) - lr).abs() < 1e-15);
        assert!((cosine_lr(60, lr, w, t) - lr / 2.0).abs() < 1e-12);
        assert_eq!(cosine_lr(t, lr, w, t), 0.0);
        let mut prev = f64::INFINITY;
        for s in w..=t {
            let v = cosine_lr(s, lr, w, t);
            assert!(v >= 0.0 && v <= prev);
            prev = v;
        }
        assert_eq!(cosine_lr(5, lr, 0, 10), lr * 0.5);
    }

    #[test]
    fn clipping_bounds_trainable_norm() {
        let mut g = BTreeMap::from([
            ("a".to_string(), Tensor::from_vec(1, 2, vec![3.0f64, 4.0]).unwrap()),
            ("b".to_string(), Tensor::from_vec(1, 1, vec![100.0f64]).unwrap()),
        ]);
        let mut mask = TrainableMask::new();
        mask.set("a", vec![true, true]);
        mask.set("b", vec![false]);
        let n = clip_grad_norm(&mut g, &mask, 1.0);
        assert!((n - 5.0).abs() < 1e-12);
        assert!((g["a"].data()[0] - 0.6).abs() < 1e-12);
    }
}
