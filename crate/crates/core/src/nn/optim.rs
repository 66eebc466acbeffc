use serde::{Deserialize, Serialize};

use super::{Gradients, Mlp};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

fn check_grads(model: &Mlp, grads: &Gradients) -> Result<()> {
    if grads.weights.len() != model.layers().len() || grads.biases.len() != model.layers().len() {
        return Err(Error::shape("optimizer gradients", model.layers().len(), grads.weights.len()));
    }
    for (i, spec) in model.layers().iter().enumerate() {
        grads.weights[i].check_shape("optimizer weight gradient", spec.output_dim, spec.input_dim)?;
        if grads.biases[i].len() != spec.output_dim {
            return Err(Error::shape("optimizer bias gradient", spec.output_dim, grads.biases[i].len()));
        }
    }
    Ok(())
}

/// Plain gradient descent: `w ← w − ε ∇L`. Masked weights stay zero.
pub fn sgd_step(model: &mut Mlp, grads: &Gradients, lr: f64) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
    }
    check_grads(model, grads)?;
    for l in 0..model.layers().len() {
        for (w, g) in model.weight_mut(l).as_mut_slice().iter_mut().zip(grads.weights[l].as_slice()) {
            *w -= lr * g;
        }
        for (b, g) in model.bias_mut(l).iter_mut().zip(&grads.biases[l]) {
            *b -= lr * g;
        }
    }
    model.apply_masks();
    Ok(())
}

/// Moment estimates for bias-corrected Adam.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m_w: Vec<Matrix>,
    pub v_w: Vec<Matrix>,
    pub m_b: Vec<Vec<f64>>,
    pub v_b: Vec<Vec<f64>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(model: &Mlp) -> Self {
        Self::with_hyper(model, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyper(model: &Mlp, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zw: Vec<Matrix> = model
            .layers()
            .iter()
            .map(|s| Matrix::zeros(s.output_dim, s.input_dim))
            .collect();
        let zb: Vec<Vec<f64>> = model.layers().iter().map(|s| vec![0.0; s.output_dim]).collect();
        Self {
            m_w: zw.clone(),
            v_w: zw,
            m_b: zb.clone(),
            v_b: zb,
            step: 0,
            beta1,
            beta2,
            eps,
        }
    }

    fn matches(&self, model: &Mlp) -> bool {
        self.m_w.len() == model.layers().len()
            && model.layers().iter().enumerate().all(|(i, s)| {
                self.m_w[i].shape() == (s.output_dim, s.input_dim)
                    && self.v_w[i].shape() == (s.output_dim, s.input_dim)
                    && self.m_b[i].len() == s.output_dim
                    && self.v_b[i].len() == s.output_dim
            })
    }
}

#[inline]
fn adam_update(p: &mut f64, m: &mut f64, v: &mut f64, g: f64, lr: f64, s: &AdamState, c1: f64, c2: f64) {
    *m = s.beta1 * *m + (1.0 - s.beta1) * g;
    *v = s.beta2 * *v + (1.0 - s.beta2) * g * g;
    let m_hat = *m / c1;
    let v_hat = *v / c2;
    *p -= lr * m_hat / (v_hat.sqrt() + s.eps);
}

/// One bias-corrected Adam update. Masked weights and their moments stay zero.
pub fn adam_step(model: &mut Mlp, grads: &Gradients, state: &mut AdamState, lr: f64) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
    }
    check_grads(model, grads)?;
    if !state.matches(model) {
        return Err(Error::shape("adam_step state", "model-shaped moments", "mismatched moments"));
    }
    state.step += 1;
    let c1 = 1.0 - state.beta1.powi(state.step as i32);
    let c2 = 1.0 - state.beta2.powi(state.step as i32);
    let masks = model.masks().map(|m| m.to_vec());
    for l in 0..model.layers().len() {
        let mask = masks.as_ref().map(|m| &m[l]);
        let (mut m_w, mut v_w) = (std::mem::take(&mut state.m_w[l]), std::mem::take(&mut state.v_w[l]));
        {
            let w = model.weight_mut(l).as_mut_slice();
            let g = grads.weights[l].as_slice();
            for k in 0..w.len() {
                if mask.is_some_and(|m| m.as_slice()[k] == 0.0) {
                    w[k] = 0.0;
                    m_w.as_mut_slice()[k] = 0.0;
                    v_w.as_mut_slice()[k] = 0.0;
                    continue;
                }
                adam_update(&mut w[k], &mut m_w.as_mut_slice()[k], &mut v_w.as_mut_slice()[k], g[k], lr, state, c1, c2);
            }
        }
        state.m_w[l] = m_w;
        state.v_w[l] = v_w;
        let (mut m_b, mut v_b) = (std::mem::take(&mut state.m_b[l]), std::mem::take(&mut state.v_b[l]));
        for (k, b) in model.bias_mut(l).iter_mut().enumerate() {
            adam_update(b, &mut m_b[k], &mut v_b[k], grads.biases[l][k], lr, state, c1, c2);
        }
        state.m_b[l] = m_b;
        state.v_b[l] = v_b;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, LayerSpec};

    fn scalar_model(w: f64) -> Mlp {
        let spec = LayerSpec {
            input_dim: 1,
            output_dim: 1,
            activation: Activation::Identity,
        };
        Mlp::from_parts(vec![spec], vec![Matrix::from_vec(1, 1, vec![w]).unwrap()], vec![vec![0.0]], None).unwrap()
    }

    fn scalar_grads(g: f64) -> Gradients {
        Gradients {
            weights: vec![Matrix::from_vec(1, 1, vec![g]).unwrap()],
            biases: vec![vec![0.0]],
            hidden_outputs: vec![],
        }
    }

    #[test]
    fn sgd_direct_update() {
        let mut m = scalar_model(1.0);
        sgd_step(&mut m, &scalar_grads(0.5), 0.1).unwrap();
        assert!((m.weights()[0][(0, 0)] - 0.95).abs() < 1e-15);
        let before = m.clone();
        sgd_step(&mut m, &scalar_grads(0.0), 0.1).unwrap();
        assert_eq!(m, before);
        assert!(sgd_step(&mut m, &scalar_grads(0.0), 0.0).is_err());
    }

    #[test]
    fn sgd_respects_mask() {
        let mut m = scalar_model(1.0);
        m.set_masks(vec![Matrix::zeros(1, 1)]).unwrap();
        sgd_step(&mut m, &scalar_grads(-3.0), 0.1).unwrap();
        assert_eq!(m.weights()[0][(0, 0)], 0.0);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut m = scalar_model(2.0);
        let mut s = AdamState::new(&m);
        adam_step(&mut m, &scalar_grads(1.0), &mut s, 0.001).unwrap();
        // m̂ = 1, v̂ = 1, so the step is lr / (1 + eps).
        let expected = 2.0 - 0.001 / (1.0 + 1e-8);
        assert!((m.weights()[0][(0, 0)] - expected).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_gradient_no_change() {
        let mut m = scalar_model(2.0);
        let mut s = AdamState::new(&m);
        adam_step(&mut m, &scalar_grads(0.0), &mut s, 0.001).unwrap();
        assert_eq!(m.weights()[0][(0, 0)], 2.0);
    }

    #[test]
    fn adam_two_steps_match_scalar_reference() {
        // Independent scalar Adam.
        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8, 0.01);
        let grads = [0.7, 0.7];
        let (mut w, mut mm, mut vv) = (1.0f64, 0.0f64, 0.0f64);
        for (t, g) in grads.iter().enumerate() {
            let t = (t + 1) as i32;
            mm = b1 * mm + (1.0 - b1) * g;
            vv = b2 * vv + (1.0 - b2) * g * g;
            w -= lr * (mm / (1.0 - b1.powi(t))) / ((vv / (1.0 - b2.powi(t))).sqrt() + eps);
        }
        let mut m = scalar_model(1.0);
        let mut s = AdamState::new(&m);
        for g in grads {
            adam_step(&mut m, &scalar_grads(g), &mut s, lr).unwrap();
        }
        assert!((m.weights()[0][(0, 0)] - w).abs() < 1e-15);
        assert_eq!(s.step, 2);
    }

    #[test]
    fn adam_masked_moments_stay_zero() {
        let mut m = scalar_model(1.0);
        m.set_masks(vec![Matrix::zeros(1, 1)]).unwrap();
        let mut s = AdamState::new(&m);
        for _ in 0..3 {
            adam_step(&mut m, &scalar_grads(5.0), &mut s, 0.1).unwrap();
        }
        assert_eq!(m.weights()[0][(0, 0)], 0.0);
        assert_eq!(s.m_w[0][(0, 0)], 0.0);
        assert_eq!(s.v_w[0][(0, 0)], 0.0);
    }
}
