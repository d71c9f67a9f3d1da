use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{shape_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros = |t: &Tensor| Tensor::zeros(t.rows(), t.cols());
        Self {
            step: 0,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
        }
    }
}

/// One bias-corrected Adam update with decoupled weight decay
/// (`p -= lr·wd·p` applied alongside the adaptive step).
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(shape_err(
            "adam_step",
            format!(
                "{} params, {} grads, {} moments",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(shape_err(
                "adam_step",
                format!("param {i}: {:?} vs grad {:?}", p.shape(), g.shape()),
            ));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for (((pv, gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gv;
            *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gv * gv;
            let m_hat = *mv / bc1;
            let v_hat = *vv / bc2;
            let decay = cfg.lr * cfg.weight_decay * *pv;
            *pv -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps) + decay;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lr: f64, wd: f64) -> AdamConfig {
        AdamConfig {
            lr,
            weight_decay: wd,
            ..AdamConfig::default()
        }
    }

    #[test]
    fn zero_gradient_no_decay_is_identity() {
        let mut p = vec![Tensor::from_vec(1, 3, vec![0.5, -1.0, 2.0]).unwrap()];
        let before = p.clone();
        let g = vec![Tensor::zeros(1, 3)];
        let mut st = AdamState::new(&p);
        for _ in 0..10 {
            adam_step(&mut p, &g, &mut st, &cfg(1e-2, 0.0)).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn constant_gradient_gives_unit_ratio_steps() {
        // Bias correction makes m̂ = g and v̂ = g² exactly, so every step
        // moves by lr·g/(|g| + eps).
        let lr = 1e-3;
        let c = cfg(lr, 0.0);
        let grads = [0.3, -2.0, 7.5];
        let mut p = vec![Tensor::zeros(1, 3)];
        let g = vec![Tensor::from_vec(1, 3, grads.to_vec()).unwrap()];
        let mut st = AdamState::new(&p);
        let mut prev = p[0].clone();
        for _ in 0..200 {
            adam_step(&mut p, &g, &mut st, &c).unwrap();
            for (k, gk) in grads.iter().enumerate() {
                let step = p[0].get(0, k) - prev.get(0, k);
                let expected = -lr * gk / (gk.abs() + c.eps);
                assert!((step - expected).abs() < 1e-12, "{step} vs {expected}");
            }
            prev = p[0].clone();
        }
    }

    #[test]
    fn weight_decay_shrinks_geometrically() {
        let lr = 0.1;
        let mut p = vec![Tensor::from_vec(1, 2, vec![1.0, -3.0]).unwrap()];
        let g = vec![Tensor::zeros(1, 2)];
        let mut st = AdamState::new(&p);
        for _ in 0..5 {
            adam_step(&mut p, &g, &mut st, &cfg(lr, 1e-3)).unwrap();
        }
        let factor = (1.0 - lr * 1e-3f64).powi(5);
        assert!((p[0].get(0, 0) - factor).abs() < 1e-15);
        assert!((p[0].get(0, 1) + 3.0 * factor).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = vec![Tensor::zeros(1, 2)];
        let g = vec![Tensor::zeros(2, 1)];
        let mut st = AdamState::new(&p);
        assert!(adam_step(&mut p, &g, &mut st, &AdamConfig::default()).is_err());
    }
}
