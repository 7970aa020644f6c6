use crate::error::{dim_err, Error, Result};
use crate::neural::{FeatureMap, GradBuffer};

/// Adam moment estimates for one [`FeatureMap`].
#[derive(Debug, Clone)]
pub struct AdamState {
    first: GradBuffer,
    second: GradBuffer,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    /// Fresh state with β1 = 0.9, β2 = 0.999, ε = 1e-8.
    pub fn new(fm: &FeatureMap) -> Self {
        Self {
            first: GradBuffer::zeros_for(fm),
            second: GradBuffer::zeros_for(fm),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update of `fm` in place.
pub fn adam_step(
    fm: &mut FeatureMap,
    grads: &GradBuffer,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if !grads.matches(fm) || !state.first.matches(fm) {
        return Err(dim_err(
            "adam_step",
            "gradients and state shaped like the map",
            "mismatch",
        ));
    }
    if !grads.is_finite() {
        return Err(Error::NonFinite("adam gradient"));
    }
    if !(lr >= 0.0) || !lr.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "learning rate must be >= 0, got {lr}"
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);

    let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    };

    for (li, layer) in fm.layers_mut().iter_mut().enumerate() {
        update(
            layer.weight.as_mut_slice(),
            grads.weights[li].as_slice(),
            state.first.weights[li].as_mut_slice(),
            state.second.weights[li].as_mut_slice(),
        );
        update(
            &mut layer.bias,
            &grads.biases[li],
            &mut state.first.biases[li],
            &mut state.second.biases[li],
        );
    }
    Ok(())
}
