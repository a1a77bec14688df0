//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Result};
use crate::nn::Params;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 0.001, weight_decay: 0.0005, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moments for every parameter, in canonical order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    /// Number of updates applied so far.
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn zeros_like(params: &[Tensor]) -> Self {
        let z: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self { step: 0, m: z.clone(), v: z }
    }
}

/// One update of a single flat parameter. `t` is the 1-based step number.
///
/// `p ← p − lr·wd·p`, then `p ← p − lr·m̂/(√v̂ + eps)` with bias-corrected
/// moments `m̂ = m/(1−β₁ᵗ)`, `v̂ = v/(1−β₂ᵗ)`.
pub fn adamw_update(param: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], t: u64, cfg: &AdamWConfig) {
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..param.len() {
        param[i] -= cfg.lr * cfg.weight_decay * param[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
        let mh = m[i] / c1;
        let vh = v[i] / c2;
        param[i] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
    }
}

/// Applies one AdamW step to every leaf of `params`, pairing leaves with
/// `grads` and `state` in canonical order. State is created on first use.
pub fn adamw_step<T: Params<Tensor>>(params: &mut T, grads: &[Tensor], state: &mut AdamState, cfg: &AdamWConfig) -> Result<()> {
    let mut shapes = Vec::new();
    params.visit_mut("", &mut |_, t| shapes.push(t.shape().to_vec()));
    if grads.len() != shapes.len() {
        return contract_err(format!("{} gradients for {} parameters", grads.len(), shapes.len()));
    }
    if state.m.is_empty() && state.step == 0 {
        state.m = shapes.iter().map(|s| Tensor::zeros(s)).collect();
        state.v = state.m.clone();
    }
    if state.m.len() != shapes.len() || state.v.len() != shapes.len() {
        return contract_err(format!("optimizer state holds {} moments for {} parameters", state.m.len(), shapes.len()));
    }
    for (i, s) in shapes.iter().enumerate() {
        for (what, t) in [("gradient", &grads[i]), ("first moment", &state.m[i]), ("second moment", &state.v[i])] {
            if t.shape() != s.as_slice() {
                return contract_err(format!("{what} {i} has shape {:?}, parameter has {s:?}", t.shape()));
            }
        }
    }
    state.step += 1;
    let t = state.step;
    let mut i = 0;
    params.visit_mut("", &mut |_, p| {
        adamw_update(p.data_mut(), grads[i].data(), state.m[i].data_mut(), state.v[i].data_mut(), t, cfg);
        i += 1;
    });
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Conv;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_step(p: f64, g: f64, t: u64, m: &mut f64, v: &mut f64, cfg: &AdamWConfig) -> f64 {
        let mut pp = [p];
        let (mut mm, mut vv) = ([*m], [*v]);
        adamw_update(&mut pp, &[g], &mut mm, &mut vv, t, cfg);
        *m = mm[0];
        *v = vv[0];
        pp[0]
    }

    #[test]
    fn zero_grad_no_decay_is_fixed_point() {
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let (mut m, mut v) = (0.0, 0.0);
        assert_eq!(scalar_step(1.7, 0.0, 1, &mut m, &mut v, &cfg), 1.7);
    }

    #[test]
    fn zero_grad_decays_multiplicatively() {
        let cfg = AdamWConfig::default();
        let (mut m, mut v) = (0.0, 0.0);
        let p = scalar_step(2.0, 0.0, 1, &mut m, &mut v, &cfg);
        assert_eq!(p, 2.0 * (1.0 - 0.001 * 0.0005));
    }

    #[test]
    fn two_steps_match_hand_iteration() {
        let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.01, ..Default::default() };
        let (mut m, mut v) = (0.0, 0.0);
        let p1 = scalar_step(1.0, 1.0, 1, &mut m, &mut v, &cfg);
        let p2 = scalar_step(p1, 1.0, 2, &mut m, &mut v, &cfg);

        // hand-rolled: with constant gradient 1, m̂ = v̂ = 1 at every step
        let step = |p: f64| {
            let p = p - 0.1 * 0.01 * p;
            p - 0.1 * 1.0 / (1.0 + 1e-8)
        };
        let e1 = step(1.0);
        let e2 = step(e1);
        assert!((p1 - e1).abs() < 1e-15, "{p1} vs {e1}");
        assert!((p2 - e2).abs() < 1e-15, "{p2} vs {e2}");
        let m2 = 0.9 * 0.1 + 0.1;
        assert!((m - m2).abs() < 1e-15);
    }

    #[test]
    fn step_on_tree_and_shape_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut conv = Conv::pointwise(2, 3, &mut rng);
        let before = conv.weight.clone();
        let grads = vec![Tensor::ones(&[3, 2, 1, 1]), Tensor::ones(&[3])];
        let mut st = AdamState::default();
        adamw_step(&mut conv, &grads, &mut st, &AdamWConfig::default()).unwrap();
        assert_eq!(st.step, 1);
        assert!(conv.weight.data().iter().zip(before.data()).all(|(a, b)| a < b));
        let bad = vec![Tensor::ones(&[3]), Tensor::ones(&[3])];
        assert!(adamw_step(&mut conv, &bad, &mut st, &AdamWConfig::default()).is_err());
        assert!(adamw_step(&mut conv, &grads[..1], &mut st, &AdamWConfig::default()).is_err());
    }
}
