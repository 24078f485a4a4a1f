use ndarray::{Array2, Zip};

use crate::error::{input, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment estimates for a list of parameter tensors.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    pub first_moment: Vec<Array2<f64>>,
    pub second_moment: Vec<Array2<f64>>,
    pub step_count: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, shapes: &[(usize, usize)]) -> Self {
        Self {
            config,
            first_moment: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
            second_moment: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
            step_count: 0,
        }
    }

    /// State sized for `params`.
    pub fn for_params(config: AdamConfig, params: &[&Array2<f64>]) -> Self {
        let shapes: Vec<_> = params.iter().map(|p| p.dim()).collect();
        Self::new(config, &shapes)
    }
}

/// One bias-corrected Adam update. A `None` gradient leaves that parameter
/// and its moments untouched.
pub fn adam_step(
    params: &mut [&mut Array2<f64>],
    grads: &[Option<&Array2<f64>>],
    state: &mut AdamState,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return input(format!(
            "adam_step: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.first_moment.len()
        ));
    }
    for (k, (p, g)) in params.iter().zip(grads).enumerate() {
        if state.first_moment[k].dim() != p.dim() || g.is_some_and(|g| g.dim() != p.dim()) {
            return input(format!("adam_step: shape mismatch for parameter {k}"));
        }
    }
    state.step_count += 1;
    let c = state.config;
    let t = state.step_count as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    for (k, p) in params.iter_mut().enumerate() {
        let m = &mut state.first_moment[k];
        let v = &mut state.second_moment[k];
        // Parameters without a gradient this step are skipped entirely.
        if let Some(g) = grads[k] {
            Zip::from(&mut **p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                *p -= c.learning_rate * (*m / bc1) / ((*v / bc2).sqrt() + c.epsilon);
            });
        }
    }
    Ok(())
}
