//! AdamW with decoupled weight decay over named parameter stores.
//!
//! Moments are kept per parameter under `group/name` keys so one state can
//! cover the encoder and decoder jointly while the discriminator keeps its
//! own. Buffers are stored in f32 — the same precision the checkpoint format
//! persists — and the per-element recurrence runs in f64, so an interrupted
//! and a resumed run read identical f32 state and produce identical updates.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::ParameterStore;

use super::TrainConfig;

/// Step-size and moment hyperparameters for [`adamw_step`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWParams {
    /// Hyperparameters from a train config; `lr` is passed explicitly so the
    /// generator and discriminator can differ only in step size.
    pub fn from_config(cfg: &TrainConfig, lr: f64) -> Self {
        AdamWParams {
            lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
        }
    }
}

impl Default for AdamWParams {
    fn default() -> Self {
        AdamWParams::from_config(&TrainConfig::default(), TrainConfig::default().lr)
    }
}

/// First/second moment buffers plus the shared step counter `t`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamWState {
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
    t: u64,
}

impl AdamWState {
    pub fn new() -> Self {
        AdamWState::default()
    }

    /// Number of optimizer steps taken with this state.
    pub fn t(&self) -> u64 {
        self.t
    }

    /// First-moment buffers in key order (checkpoint serialization).
    pub fn first_moments(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.m.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    /// Second-moment buffers in key order (checkpoint serialization).
    pub fn second_moments(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.v.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    /// Rebuild a state from deserialized buffers.
    pub fn from_parts(
        m: BTreeMap<String, Vec<f32>>,
        v: BTreeMap<String, Vec<f32>>,
        t: u64,
    ) -> Result<Self> {
        if m.len() != v.len() || m.keys().zip(v.keys()).any(|(a, b)| a != b) {
            return Err(Error::Config(
                "optimizer moment buffers do not cover the same parameters".into(),
            ));
        }
        for (key, buf) in &m {
            if v[key].len() != buf.len() {
                return Err(Error::Config(format!(
                    "optimizer moment buffers for `{key}` differ in length"
                )));
            }
        }
        Ok(AdamWState { m, v, t })
    }
}

/// One AdamW step over every trainable parameter in `groups`:
///
/// ```text
/// m ← β₁·m + (1−β₁)·g        v ← β₂·v + (1−β₂)·g²
/// θ ← θ − lr·m̂/(√v̂ + eps) − lr·weight_decay·θ
/// ```
///
/// with bias-corrected `m̂ = m/(1−β₁ᵗ)`, `v̂ = v/(1−β₂ᵗ)`. The step counter
/// increments once per call regardless of group count, gradients are cleared
/// afterwards, and a trainable parameter without a gradient is an error.
pub fn adamw_step(
    groups: &mut [(&str, &mut ParameterStore<f32>)],
    state: &mut AdamWState,
    hp: &AdamWParams,
) -> Result<()> {
    state.t += 1;
    let bc1 = 1.0 - hp.beta1.powi(state.t as i32);
    let bc2 = 1.0 - hp.beta2.powi(state.t as i32);
    for (group, store) in groups.iter_mut() {
        for (name, tensor) in store.iter_mut() {
            if !tensor.requires_grad() {
                continue;
            }
            let key = format!("{group}/{name}");
            let grad = tensor
                .grad()
                .ok_or_else(|| Error::MissingGradient { name: key.clone() })?
                .clone();
            let n = tensor.value().numel();
            let m = state.m.entry(key.clone()).or_insert_with(|| vec![0.0; n]);
            let v = state.v.entry(key.clone()).or_insert_with(|| vec![0.0; n]);
            if m.len() != n || v.len() != n {
                return Err(Error::Config(format!(
                    "optimizer buffer for `{key}` has {} elements, parameter has {n}",
                    m.len()
                )));
            }
            let theta = tensor.value_mut().as_mut_slice();
            for (i, g) in grad.as_slice().iter().enumerate() {
                let g = *g as f64;
                let mi = hp.beta1 * (m[i] as f64) + (1.0 - hp.beta1) * g;
                let vi = hp.beta2 * (v[i] as f64) + (1.0 - hp.beta2) * g * g;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                let th = theta[i] as f64;
                theta[i] = (th - hp.lr * m_hat / (v_hat.sqrt() + hp.eps)
                    - hp.lr * hp.weight_decay * th) as f32;
            }
        }
    }
    for (_, store) in groups.iter_mut() {
        store.clear_grads();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Array, Shape, Tensor};

    fn store_with(name: &str, values: &[f32]) -> ParameterStore<f32> {
        let mut store = ParameterStore::new();
        let arr = Array::from_vec(Shape::new(&[values.len()]).unwrap(), values.to_vec()).unwrap();
        store.insert(name, Tensor::new(arr, true)).unwrap();
        store
    }

    fn set_grad(store: &mut ParameterStore<f32>, name: &str, g: &[f32]) {
        let arr = Array::from_vec(Shape::new(&[g.len()]).unwrap(), g.to_vec()).unwrap();
        let tensor = store.get_mut(name).unwrap();
        tensor.clear_grad();
        tensor.accumulate_grad(&arr);
    }

    /// Independent straight-line evaluation of one AdamW step in f64.
    fn oracle_step(theta: f64, g: f64, hp: &AdamWParams, t: u64) -> f64 {
        let m = (1.0 - hp.beta1) * g;
        let v = (1.0 - hp.beta2) * g * g;
        assert_eq!(t, 1, "oracle covers the first step only");
        let m_hat = m / (1.0 - hp.beta1);
        let v_hat = v / (1.0 - hp.beta2);
        theta - hp.lr * m_hat / (v_hat.sqrt() + hp.eps) - hp.lr * hp.weight_decay * theta
    }

    #[test]
    fn first_step_matches_the_hand_example() {
        // theta = 1, g = 0.5 at default hyperparameters: the update is
        // 1 - 1e-4 * (0.5 / (0.5 + 1e-8)) - 1e-4 * 0.01 * 1 = 0.999899000002.
        let hp = AdamWParams::default();
        let mut store = store_with("w", &[1.0]);
        set_grad(&mut store, "w", &[0.5]);
        let mut state = AdamWState::new();
        adamw_step(&mut [("g", &mut store)], &mut state, &hp).unwrap();
        let got = store.get("w").unwrap().value().as_slice()[0] as f64;
        let want = oracle_step(1.0, 0.5, &hp, 1);
        assert!((want - 0.999899000002).abs() < 1e-12, "oracle drifted: {want}");
        assert!((got - want).abs() < 1e-7, "got {got}, want {want}");
        assert_eq!(state.t(), 1);
    }

    #[test]
    fn zero_gradient_without_decay_leaves_parameters_untouched() {
        let hp = AdamWParams { weight_decay: 0.0, ..AdamWParams::default() };
        let mut store = store_with("w", &[0.25, -3.5]);
        set_grad(&mut store, "w", &[0.0, 0.0]);
        let mut state = AdamWState::new();
        adamw_step(&mut [("g", &mut store)], &mut state, &hp).unwrap();
        let got = store.get("w").unwrap().value().as_slice().to_vec();
        assert_eq!(got[0].to_bits(), 0.25f32.to_bits());
        assert_eq!(got[1].to_bits(), (-3.5f32).to_bits());
    }

    #[test]
    fn zero_gradient_with_decay_shrinks_toward_zero() {
        let hp = AdamWParams::default();
        let mut store = store_with("w", &[2.0]);
        let mut state = AdamWState::new();
        let mut prev = 2.0f32;
        for _ in 0..5 {
            set_grad(&mut store, "w", &[0.0]);
            adamw_step(&mut [("g", &mut store)], &mut state, &hp).unwrap();
            let now = store.get("w").unwrap().value().as_slice()[0];
            assert!(now < prev && now > 0.0);
            prev = now;
        }
    }

    #[test]
    fn constant_gradient_descends_monotonically() {
        let hp = AdamWParams { weight_decay: 0.0, ..AdamWParams::default() };
        let mut store = store_with("w", &[1.0]);
        let mut state = AdamWState::new();
        let mut prev = 1.0f32;
        for _ in 0..10 {
            set_grad(&mut store, "w", &[0.7]);
            adamw_step(&mut [("g", &mut store)], &mut state, &hp).unwrap();
            let now = store.get("w").unwrap().value().as_slice()[0];
            assert!(now < prev);
            prev = now;
        }
    }

    #[test]
    fn missing_gradient_is_an_error_naming_the_parameter() {
        let hp = AdamWParams::default();
        let mut store = store_with("w", &[1.0]);
        let mut state = AdamWState::new();
        let err = adamw_step(&mut [("m", &mut store)], &mut state, &hp).unwrap_err();
        match err {
            Error::MissingGradient { name } => assert_eq!(name, "m/w"),
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn step_counter_increments_once_across_groups() {
        let hp = AdamWParams::default();
        let mut a = store_with("w", &[1.0]);
        let mut b = store_with("w", &[1.0]);
        set_grad(&mut a, "w", &[0.1]);
        set_grad(&mut b, "w", &[0.2]);
        let mut state = AdamWState::new();
        adamw_step(&mut [("a", &mut a), ("b", &mut b)], &mut state, &hp).unwrap();
        assert_eq!(state.t(), 1);
        assert!(state.m.contains_key("a/w") && state.m.contains_key("b/w"));
    }

    #[test]
    fn gradients_are_cleared_after_the_step() {
        let hp = AdamWParams::default();
        let mut store = store_with("w", &[1.0]);
        set_grad(&mut store, "w", &[0.5]);
        let mut state = AdamWState::new();
        adamw_step(&mut [("g", &mut store)], &mut state, &hp).unwrap();
        assert!(store.get("w").unwrap().grad().is_none());
    }

    #[test]
    fn identical_runs_produce_identical_parameters() {
        let hp = AdamWParams::default();
        let run = || {
            let mut store = store_with("w", &[1.0, -0.5, 2.25]);
            let mut state = AdamWState::new();
            for k in 0..7 {
                set_grad(&mut store, "w", &[0.1 * k as f32, -0.3, 0.02]);
                adamw_step(&mut [("g", &mut store)], &mut state, &hp).unwrap();
            }
            store.get("w").unwrap().value().as_slice().to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(
            a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn moment_buffer_round_trip_preserves_state() {
        let hp = AdamWParams::default();
        let mut store = store_with("w", &[1.0]);
        set_grad(&mut store, "w", &[0.5]);
        let mut state = AdamWState::new();
        adamw_step(&mut [("g", &mut store)], &mut state, &hp).unwrap();
        let m: BTreeMap<String, Vec<f32>> =
            state.first_moments().map(|(k, v)| (k.to_string(), v.to_vec())).collect();
        let v: BTreeMap<String, Vec<f32>> =
            state.second_moments().map(|(k, v)| (k.to_string(), v.to_vec())).collect();
        let rebuilt = AdamWState::from_parts(m, v, state.t()).unwrap();
        assert_eq!(rebuilt, state);
    }

    #[test]
    fn mismatched_moment_buffers_are_rejected() {
        let mut m = BTreeMap::new();
        m.insert("g/w".to_string(), vec![0.0f32]);
        assert!(AdamWState::from_parts(m.clone(), BTreeMap::new(), 1).is_err());
        let mut v = BTreeMap::new();
        v.insert("g/w".to_string(), vec![0.0f32, 0.0]);
        assert!(AdamWState::from_parts(m, v, 1).is_err());
    }
}
