use crate::error::{MarnError, Result};
use crate::model::ParamStore;
use crate::tensor::{Real, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment estimates, one tensor per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros: Vec<Tensor<T>> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn cast<U: Real>(&self) -> AdamState<U> {
        AdamState {
            step: self.step,
            m: self.m.iter().map(Tensor::cast).collect(),
            v: self.v.iter().map(Tensor::cast).collect(),
        }
    }
}

/// One bias-corrected Adam update. Gradients are validated before any
/// parameter is touched.
pub fn adam_step<T: Real>(params: &mut ParamStore<T>, grads: &[Tensor<T>], state: &mut AdamState<T>, lr: f64) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(MarnError::Shape(format!(
            "{} gradients and {} moment slots for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        let id = crate::model::ParamId(i);
        if g.shape() != params.get(id).shape() {
            return Err(MarnError::Shape(format!(
                "gradient of {} has shape {:?}, parameter {:?}",
                params.name(id),
                g.shape(),
                params.get(id).shape()
            )));
        }
        if !g.is_finite() {
            return Err(MarnError::Numeric(format!("non-finite gradient for {}", params.name(id))));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(BETA1), T::lit(BETA2));
    let (one, eps, lr) = (T::one(), T::lit(ADAM_EPS), T::lit(lr));
    let c1 = one - T::lit(BETA1.powi(t));
    let c2 = one - T::lit(BETA2.powi(t));
    for (i, p) in params.tensors_mut().iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            m[j] = b1 * m[j] + (one - b1) * g[j];
            v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
