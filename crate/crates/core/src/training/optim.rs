use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};
use crate::training::TrainConfig;

/// AdamW moments and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Scalar> OptState<T> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self
    where
        T: 'a,
    {
        let m: Vec<Tensor<T>> = params.into_iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        Self {
            v: m.clone(),
            m,
            t: 0,
        }
    }
}

/// One AdamW update with decoupled weight decay applied only where
/// `decay[i]` is set. The step is rejected before any parameter changes if a
/// gradient is not finite.
pub fn adamw_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &[Tensor<T>],
    decay: &[bool],
    state: &mut OptState<T>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    let n = params.len();
    if grads.len() != n || decay.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::Contract("parameter, gradient and state lists differ in length".into()));
    }
    if !(lr >= 0.0) {
        return Err(Error::Contract(format!("learning rate must be non-negative, got {lr}")));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.m[i].shape() != p.shape() {
            return Err(Error::shape("adamw_step", p.shape(), g.shape()));
        }
        if !g.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient for parameter {i}")));
        }
    }
    state.t += 1;
    let [b1, b2] = cfg.betas;
    let bc1 = 1.0 - b1.powi(state.t as i32);
    let bc2 = 1.0 - b2.powi(state.t as i32);
    let (b1, b2) = (T::lit(b1), T::lit(b2));
    let (one, lr_t, eps) = (T::one(), T::lit(lr), T::lit(cfg.eps));
    let shrink = T::lit(1.0 - lr * cfg.weight_decay);
    let (bc1, bc2) = (T::lit(bc1), T::lit(bc2));
    for (i, p) in params.iter_mut().enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let g = grads[i].data();
        let apply_decay = decay[i] && cfg.weight_decay != 0.0;
        for (j, x) in p.data_mut().iter_mut().enumerate() {
            m[j] = b1 * m[j] + (one - b1) * g[j];
            v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
            if apply_decay {
                *x *= shrink;
            }
            let mh = m[j] / bc1;
            let vh = v[j] / bc2;
            *x -= lr_t * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

/// Linear warmup from 0 to `peak_lr`, then cosine decay to `min_lr` at
/// `steps`. Steps past the end stay at `min_lr`.
pub fn lr_schedule(step: usize, cfg: &TrainConfig) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.peak_lr * step as f64 / cfg.warmup_steps as f64;
    }
    if step >= cfg.steps {
        return if cfg.steps == 0 { cfg.peak_lr } else { cfg.min_lr };
    }
    let span = (cfg.steps - cfg.warmup_steps) as f64;
    let progress = (step - cfg.warmup_steps) as f64 / span;
    cfg.min_lr + 0.5 * (cfg.peak_lr - cfg.min_lr) * (1.0 + (PI * progress).cos())
}

/// Global L2 norm over all gradients.
pub fn global_norm<T: Scalar>(grads: &[Tensor<T>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|x| {
            let x = x.as_f64();
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `cap`; returns the
/// norm before clipping. `cap = 0` disables clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Tensor<T>], cap: f64) -> f64 {
    let norm = global_norm(grads);
    if cap > 0.0 && norm > cap {
        let s = T::lit(cap / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(wd: f64) -> TrainConfig {
        TrainConfig {
            betas: [0.9, 0.999],
            eps: 1e-8,
            weight_decay: wd,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_gradient_is_pure_decay() {
        let mut p = Tensor::<f64>::from_f64([3], &[1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let g = Tensor::zeros([3]);
        let mut st = OptState::new([&p]);
        adamw_step(&mut [&mut p], &[g], &[true], &mut st, 0.01, &cfg(0.1)).unwrap();
        for (a, b) in p.data().iter().zip(before.data()) {
            assert_eq!(*a, b * (1.0 - 0.01 * 0.1));
        }
        assert_eq!(st.t, 1);
    }

    #[test]
    fn first_step_hand_value() {
        let mut p = Tensor::<f64>::scalar(0.0);
        let mut st = OptState::new([&p]);
        adamw_step(&mut [&mut p], &[Tensor::scalar(1.0)], &[true], &mut st, 0.1, &cfg(0.0)).unwrap();
        assert!((p.item() + 0.1).abs() < 1e-8, "{}", p.item());
    }

    #[test]
    fn non_finite_gradient_rejected_without_side_effects() {
        let mut p = Tensor::<f32>::from_f64([2], &[1.0, 2.0]).unwrap();
        let mut st = OptState::new([&p]);
        let g = Tensor::from_f64([2], &[0.1, f64::NAN]).unwrap();
        let err = adamw_step(&mut [&mut p], &[g], &[false], &mut st, 0.1, &cfg(0.0));
        assert!(matches!(err, Err(Error::Numeric(_))));
        assert_eq!(p.data(), &[1.0, 2.0]);
        assert_eq!(st.t, 0);
    }

    #[test]
    fn schedule_endpoints() {
        let c = TrainConfig {
            steps: 1100,
            warmup_steps: 100,
            peak_lr: 1e-3,
            min_lr: 1e-4,
            ..TrainConfig::default()
        };
        assert_eq!(lr_schedule(0, &c), 0.0);
        assert_eq!(lr_schedule(50, &c), 5e-4);
        assert_eq!(lr_schedule(100, &c), 1e-3);
        assert!((lr_schedule(600, &c) - 5.5e-4).abs() < 1e-15);
        assert!((lr_schedule(1100, &c) - 1e-4).abs() < 1e-18);
    }

    proptest! {
        #[test]
        fn clipped_norm_respects_cap(
            a in prop::collection::vec(-100.0f64..100.0, 1..20),
            b in prop::collection::vec(-100.0f64..100.0, 1..20),
            cap in 0.01f64..10.0,
        ) {
            let mut g = vec![
                Tensor::<f64>::from_f64([a.len()], &a).unwrap(),
                Tensor::from_f64([b.len()], &b).unwrap(),
            ];
            let before = clip_grad_norm(&mut g, cap);
            let after = global_norm(&g);
            prop_assert!(after <= cap + 1e-6);
            if before <= cap {
                prop_assert!((after - before).abs() < 1e-12);
            }
        }
    }
}
