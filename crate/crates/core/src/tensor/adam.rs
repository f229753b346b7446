use super::{shape_err, Real, Tensor, TensorError};

/// Per-parameter Adam moments.
#[derive(Clone, Debug)]
pub struct AdamState<T = f32> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Real> AdamState<T> {
    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of `param` in place.
pub fn adam_step<T: Real>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    state: &mut AdamState<T>,
) -> Result<(), TensorError> {
    if param.shape() != grad.shape() || state.m.len() != param.numel() {
        return Err(shape_err(
            "adam_step",
            format!("param {:?}, grad {:?}, state {}", param.shape(), grad.shape(), state.m.len()),
        ));
    }
    state.step += 1;
    let (b1, b2) = (T::of(state.beta1), T::of(state.beta2));
    let one = T::one();
    let c1 = one - T::of(state.beta1.powi(state.step as i32));
    let c2 = one - T::of(state.beta2.powi(state.step as i32));
    let (lr, eps) = (T::of(state.lr), T::of(state.eps));
    for (((p, &g), m), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        let mhat = *m / c1;
        let vhat = *v / c2;
        *p = *p - lr * mhat / (vhat.sqrt() + eps);
    }
    Ok(())
}
