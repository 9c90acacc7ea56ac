//! Adam-family optimizer and the cosine learning-rate schedule.
//!
//! Moment buffers live in f64 regardless of the parameter scalar so that
//! resumed runs reproduce fresh runs bit for bit after a round trip through
//! the checkpoint container.

use ndarray::ArrayD;

use crate::params::ParamStore;
use crate::scalar::{sc, Scalar};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay; 0 disables it and gives plain Adam.
    pub weight_decay: f64,
}

impl AdamConfig {
    /// Plain Adam with the given betas.
    pub fn adam(beta1: f64, beta2: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    /// Decoupled weight decay on top of Adam.
    pub fn adamw(beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// First/second moment estimates, laid out like the parameter store.
pub struct AdamState {
    pub m: Vec<ArrayD<f64>>,
    pub v: Vec<ArrayD<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new<T: Scalar>(store: &ParamStore<T>) -> Self {
        let m = store
            .ids()
            .map(|id| ArrayD::zeros(store.get(id).raw_dim()))
            .collect::<Vec<_>>();
        let v = m.clone();
        Self { m, v, t: 0 }
    }
}

/// One optimizer step. `grads` is indexed like the store; `None` entries
/// (parameters unreached by the loss) are skipped entirely, including decay.
pub fn adam_step<T: Scalar>(
    store: &mut ParamStore<T>,
    state: &mut AdamState,
    grads: &[Option<ArrayD<T>>],
    lr: f64,
    cfg: &AdamConfig,
) {
    assert_eq!(grads.len(), store.len(), "gradient layout mismatch");
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for id in store.ids() {
        let Some(g) = &grads[id.index()] else {
            continue;
        };
        let i = id.index();
        let g64 = g.mapv(|x| x.to_f64().unwrap());
        state.m[i] = &state.m[i] * cfg.beta1 + &g64 * (1.0 - cfg.beta1);
        state.v[i] = &state.v[i] * cfg.beta2 + &(&g64 * &g64) * (1.0 - cfg.beta2);
        let p = store.get(id);
        let mut new = p.mapv(|x| x.to_f64().unwrap());
        if cfg.weight_decay != 0.0 {
            new = &new * (1.0 - lr * cfg.weight_decay);
        }
        let mhat = &state.m[i] / bc1;
        let vhat = &state.v[i] / bc2;
        let step = mhat / (vhat.mapv(f64::sqrt) + cfg.eps);
        new = new - step * lr;
        store.set(id, new.mapv(|x| sc::<T>(x)));
    }
}

/// Cosine decay from `lr_init` at step 0 to `lr_final` at step `total`.
/// Steps past `total` stay at `lr_final`.
pub fn cosine_lr(lr_init: f64, lr_final: f64, step: u64, total: u64) -> f64 {
    if total == 0 || step >= total {
        return lr_final;
    }
    let p = step as f64 / total as f64;
    lr_final + 0.5 * (lr_init - lr_final) * (1.0 + (std::f64::consts::PI * p).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::params;

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let target = 3.0f64;
        let id = store.register("x", params::full(&[1], 10.0f64));
        let mut state = AdamState::new(&store);
        let cfg = AdamConfig::adam(0.9, 0.99);
        for _ in 0..2000 {
            let tape = Tape::new();
            let x = tape.param(&store, id);
            let loss = x.add_scalar(-target).square().mean_all();
            tape.backward(&loss);
            let grads = tape.param_grads(&store);
            adam_step(&mut store, &mut state, &grads, 0.05, &cfg);
        }
        let x = store.get(id)[[0]];
        assert!((x - target).abs() < 1e-3, "converged to {x}");
    }

    #[test]
    fn first_step_moves_by_lr() {
        // With bias correction, step 1 moves by exactly lr * sign(g).
        let mut store = ParamStore::<f64>::new();
        let id = store.register("x", params::full(&[1], 1.0f64));
        let mut state = AdamState::new(&store);
        let grads = vec![Some(params::full(&[1], 0.25f64))];
        adam_step(&mut store, &mut state, &grads, 0.01, &AdamConfig::adam(0.9, 0.999));
        let x = store.get(id)[[0]];
        assert!((x - (1.0 - 0.01)).abs() < 1e-6, "{x}");
    }

    #[test]
    fn decay_is_decoupled_from_the_gradient() {
        let mut store = ParamStore::<f64>::new();
        let id = store.register("x", params::full(&[1], 2.0f64));
        let mut state = AdamState::new(&store);
        // Zero gradient: plain Adam must not move, AdamW must shrink.
        let grads = vec![Some(params::zeros::<f64>(&[1]))];
        adam_step(&mut store, &mut state, &grads, 0.1, &AdamConfig::adam(0.9, 0.999));
        assert_eq!(store.get(id)[[0]], 2.0);
        adam_step(
            &mut store,
            &mut state,
            &grads,
            0.1,
            &AdamConfig::adamw(0.9, 0.999, 0.01),
        );
        assert!((store.get(id)[[0]] - 2.0 * (1.0 - 0.1 * 0.01)).abs() < 1e-12);
    }

    #[test]
    fn skipped_params_keep_their_state() {
        let mut store = ParamStore::<f64>::new();
        let a = store.register("a", params::full(&[1], 1.0f64));
        let b = store.register("b", params::full(&[1], 1.0f64));
        let mut state = AdamState::new(&store);
        let grads = vec![Some(params::full(&[1], 1.0f64)), None];
        adam_step(
            &mut store,
            &mut state,
            &grads,
            0.1,
            &AdamConfig::adamw(0.9, 0.999, 0.5),
        );
        assert!(store.get(a)[[0]] < 1.0);
        assert_eq!(store.get(b)[[0]], 1.0);
        assert_eq!(state.v[b.index()][[0]], 0.0);
    }

    #[test]
    fn cosine_schedule_endpoints_and_midpoint() {
        assert_eq!(cosine_lr(1e-3, 1e-6, 0, 100), 1e-3);
        let mid = cosine_lr(1e-3, 1e-6, 50, 100);
        assert!((mid - (1e-6 + 0.5 * (1e-3 - 1e-6))).abs() < 1e-12);
        assert_eq!(cosine_lr(1e-3, 1e-6, 100, 100), 1e-6);
        assert_eq!(cosine_lr(1e-3, 1e-6, 150, 100), 1e-6);
        // Monotone non-increasing over the horizon.
        let mut prev = f64::INFINITY;
        for t in 0..=100 {
            let lr = cosine_lr(1e-3, 1e-6, t, 100);
            assert!(lr <= prev + 1e-15);
            prev = lr;
        }
    }
}
