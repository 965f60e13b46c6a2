use log::error;

use crate::error::{Error, Result};
use crate::gradcore::Parameters;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moment estimates mirroring the parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Parameters,
    pub v: Parameters,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &Parameters) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. Non-finite gradients are rejected before
/// any state changes.
pub fn adam_step(params: &mut Parameters, grads: &Parameters, state: &mut AdamState, lr: f64) -> Result<()> {
    if !params.same_layout(grads) || !params.same_layout(&state.m) || !params.same_layout(&state.v) {
        return Err(Error::Dimension("gradient or moment layout does not match parameters".into()));
    }
    if let Some((name, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
        error!("non-finite gradient for `{name}`; batch aborted");
        return Err(Error::NonFinite("gradient"));
    }
    state.step += 1;
    let t = i32::try_from(state.step).unwrap_or(i32::MAX);
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for (name, p) in params.iter_mut() {
        let g = grads.get(name).expect("same layout");
        let m = state.m.get_mut(name).expect("same layout");
        let v = state.v.get_mut(name).expect("same layout");
        for (((p, &g), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + EPSILON);
        }
    }
    Ok(())
}

/// Global L2 norm over every gradient tensor.
pub fn grad_norm(grads: &Parameters) -> f64 {
    grads
        .iter()
        .flat_map(|(_, g)| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so that its global norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_grad_norm(grads: &mut Parameters, max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcore::Tensor;

    fn single(v: f64) -> Parameters {
        let mut p = Parameters::new();
        p.insert("w", Tensor::scalar(v)).unwrap();
        p
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = single(1.5);
        let mut state = AdamState::new(&p);
        adam_step(&mut p, &single(0.0), &mut state, 0.1).unwrap();
        assert_eq!(p, single(1.5));
    }

    #[test]
    fn first_step_moves_by_lr() {
        for g in [3.0, -0.02, 1e4] {
            let mut p = single(0.0);
            let mut state = AdamState::new(&p);
            adam_step(&mut p, &single(g), &mut state, 1e-3).unwrap();
            let moved = p.get("w").unwrap().item().unwrap();
            assert!((moved + 1e-3 * g.signum()).abs() < 1e-8, "g={g}: moved {moved}");
        }
    }

    #[test]
    fn two_steps_match_hand_computation() {
        let (lr, g1, g2) = (0.01, 0.5, -0.25);
        let mut p = single(1.0);
        let mut state = AdamState::new(&p);
        adam_step(&mut p, &single(g1), &mut state, lr).unwrap();
        adam_step(&mut p, &single(g2), &mut state, lr).unwrap();

        let m1 = 0.1 * g1;
        let v1 = 0.001 * g1 * g1;
        let x1 = 1.0 - lr * (m1 / 0.1) / ((v1 / 0.001f64).sqrt() + 1e-8);
        let m2 = 0.9 * m1 + 0.1 * g2;
        let v2 = 0.999 * v1 + 0.001 * g2 * g2;
        let x2 = x1 - lr * (m2 / (1.0 - 0.81)) / ((v2 / (1.0 - 0.999 * 0.999)).sqrt() + 1e-8);
        assert!((p.get("w").unwrap().item().unwrap() - x2).abs() < 1e-15);
        assert_eq!(state.step, 2);
    }

    #[test]
    fn nan_gradient_aborts_without_change() {
        let mut p = single(1.0);
        let mut state = AdamState::new(&p);
        let mut bad = single(0.0);
        bad.get_mut("w").unwrap().data_mut()[0] = f64::NAN;
        assert!(matches!(adam_step(&mut p, &bad, &mut state, 0.1), Err(Error::NonFinite(_))));
        assert_eq!(p, single(1.0));
        assert_eq!(state.step, 0);
    }

    #[test]
    fn clipping() {
        let mut g = Parameters::new();
        g.insert("a", Tensor::vector(vec![3.0, 4.0]).unwrap()).unwrap();
        assert_eq!(clip_grad_norm(&mut g, 10.0), 5.0);
        assert_eq!(g.get("a").unwrap().data(), &[3.0, 4.0]);
        clip_grad_norm(&mut g, 1.0);
        assert!((grad_norm(&g) - 1.0).abs() < 1e-15);
    }
}
