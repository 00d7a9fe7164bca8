//! ADADELTA parameter updates (adaptive per-element step sizes, no global
//! learning rate).

use crate::error::TensorError;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-parameter ADADELTA accumulators.
///
/// `acc_grad` tracks E[g²] and `acc_update` tracks E[Δx²]; both decay with
/// rate `rho` and stay non-negative. Shapes always match the parameter.
#[derive(Clone, Debug)]
pub struct AdadeltaState<S: Scalar> {
    acc_grad: Vec<S>,
    acc_update: Vec<S>,
    rho: S,
    eps: S,
}

pub const DEFAULT_RHO: f64 = 0.95;
pub const DEFAULT_EPS: f64 = 1e-6;

impl<S: Scalar> AdadeltaState<S> {
    pub fn new(numel: usize, rho: f64, eps: f64) -> Result<Self, TensorError> {
        if !(0.0 < rho && rho < 1.0) {
            return Err(TensorError::InvalidTensor(format!(
                "adadelta decay rho must lie in (0, 1), got {rho}"
            )));
        }
        if eps <= 0.0 {
            return Err(TensorError::InvalidTensor(format!(
                "adadelta eps must be positive, got {eps}"
            )));
        }
        Ok(Self {
            acc_grad: vec![S::zero(); numel],
            acc_update: vec![S::zero(); numel],
            rho: S::from_f64(rho),
            eps: S::from_f64(eps),
        })
    }

    pub fn for_param(param: &Tensor<S>) -> Result<Self, TensorError> {
        Self::new(param.numel(), DEFAULT_RHO, DEFAULT_EPS)
    }

    pub fn acc_grad(&self) -> &[S] {
        &self.acc_grad
    }

    pub fn acc_update(&self) -> &[S] {
        &self.acc_update
    }
}

/// One ADADELTA step:
///
/// ```text
/// E[g²]  <- rho E[g²]  + (1 - rho) g²
/// dx      = -sqrt(E[dx²] + eps) / sqrt(E[g²] + eps) * g
/// E[dx²] <- rho E[dx²] + (1 - rho) dx²
/// x      <- x + dx
/// ```
pub fn adadelta_step<S: Scalar>(
    param: &mut Tensor<S>,
    state: &mut AdadeltaState<S>,
) -> Result<(), TensorError> {
    let grad = param
        .grad()
        .ok_or_else(|| TensorError::MissingGrad {
            name: "<unnamed>".to_string(),
        })?
        .to_vec();
    if state.acc_grad.len() != param.numel() {
        return Err(TensorError::StateShape {
            state: state.acc_grad.len(),
            param: param.numel(),
        });
    }
    let rho = state.rho;
    let one_minus = S::one() - rho;
    let eps = state.eps;
    let data = param.data_mut();
    for i in 0..data.len() {
        let g = grad[i];
        state.acc_grad[i] = rho * state.acc_grad[i] + one_minus * g * g;
        let dx = -((state.acc_update[i] + eps).sqrt() / (state.acc_grad[i] + eps).sqrt()) * g;
        state.acc_update[i] = rho * state.acc_update[i] + one_minus * dx * dx;
        data[i] = data[i] + dx;
    }
    Ok(())
}
