//! AdamW with decoupled weight decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::graph::{GradientMap, GraphError, ParamSet};
use super::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamWHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWHyper {
    fn default() -> Self {
        AdamWHyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AdamWState {
    pub step: u64,
    first_moments: BTreeMap<String, Tensor>,
    second_moments: BTreeMap<String, Tensor>,
}

impl AdamWState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One AdamW update over every parameter named in `grads`. Parameters
/// without a gradient entry are left untouched.
pub fn sgd_adamw_step(
    params: &mut ParamSet,
    grads: &GradientMap,
    state: &mut AdamWState,
    hyper: &AdamWHyper,
) -> Result<(), GraphError> {
    if hyper.lr < 0.0 {
        return Err(GraphError::Invalid(format!(
            "negative learning rate {}",
            hyper.lr
        )));
    }
    if hyper.weight_decay < 0.0 {
        return Err(GraphError::Invalid(format!(
            "negative weight decay {}",
            hyper.weight_decay
        )));
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - hyper.beta1.powf(t);
    let bc2 = 1.0 - hyper.beta2.powf(t);

    for (name, grad) in grads {
        let param = params.get_mut(name).ok_or_else(|| {
            GraphError::Invalid(format!("gradient for unknown parameter {name}"))
        })?;
        if param.shape() != grad.shape() {
            return Err(GraphError::Invalid(format!(
                "gradient shape {:?} != parameter shape {:?} for {name}",
                grad.shape(),
                param.shape()
            )));
        }
        let m = state
            .first_moments
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(param.shape().to_vec()));
        let v = state
            .second_moments
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(param.shape().to_vec()));
        let pd = param.data_mut();
        for i in 0..pd.len() {
            let g = grad.data()[i];
            let mi = hyper.beta1 * m.data()[i] + (1.0 - hyper.beta1) * g;
            let vi = hyper.beta2 * v.data()[i] + (1.0 - hyper.beta2) * g * g;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let update = (mi / bc1) / ((vi / bc2).sqrt() + hyper.eps);
            pd[i] -= hyper.lr * update + hyper.lr * hyper.weight_decay * pd[i];
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::scalar(v));
        p
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut params = one_param(1.5);
        let mut grads = GradientMap::new();
        grads.insert("w".into(), Tensor::scalar(0.0));
        let mut state = AdamWState::new();
        sgd_adamw_step(&mut params, &grads, &mut state, &AdamWHyper::default()).unwrap();
        assert_eq!(params.get("w").unwrap().scalar_value(), 1.5);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn single_step_matches_hand_evaluation() {
        // grad 1, lr 0.1, betas (0.9, 0.999), eps 1e-8, no decay:
        // m_hat = 1, v_hat = 1, update = 1/(1 + 1e-8) -> param ~ 0.9
        let mut params = one_param(1.0);
        let mut grads = GradientMap::new();
        grads.insert("w".into(), Tensor::scalar(1.0));
        let mut state = AdamWState::new();
        let hyper = AdamWHyper {
            lr: 0.1,
            ..AdamWHyper::default()
        };
        sgd_adamw_step(&mut params, &grads, &mut state, &hyper).unwrap();
        let w = params.get("w").unwrap().scalar_value();
        assert!((w - 0.9).abs() < 1e-8, "w = {w}");
    }

    #[test]
    fn decoupled_decay_scales_param() {
        let mut params = one_param(1.0);
        let mut grads = GradientMap::new();
        grads.insert("w".into(), Tensor::scalar(0.0));
        let mut state = AdamWState::new();
        let hyper = AdamWHyper {
            lr: 0.1,
            weight_decay: 0.1,
            ..AdamWHyper::default()
        };
        sgd_adamw_step(&mut params, &grads, &mut state, &hyper).unwrap();
        let w = params.get("w").unwrap().scalar_value();
        assert!((w - 0.99).abs() < 1e-12, "w = {w}");
    }

    #[test]
    fn negative_lr_rejected() {
        let mut params = one_param(1.0);
        let grads = GradientMap::new();
        let mut state = AdamWState::new();
        let hyper = AdamWHyper {
            lr: -0.1,
            ..AdamWHyper::default()
        };
        assert!(sgd_adamw_step(&mut params, &grads, &mut state, &hyper).is_err());
    }
}
