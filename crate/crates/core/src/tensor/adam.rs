use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments for a fixed list of tensors, plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    shapes: Vec<Vec<usize>>,
    step: u64,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let shapes: Vec<Vec<usize>> = params.into_iter().map(|t| t.shape().to_vec()).collect();
        let zeros = || shapes.iter().map(|s| vec![0.0; s.iter().product()]).collect();
        Self {
            first: zeros(),
            second: zeros(),
            shapes: shapes.clone(),
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn len(&self) -> usize {
        self.shapes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shapes.is_empty()
    }
}

/// One bias-corrected Adam update over `params`, reading each tensor's
/// `grad` (absent means zero). Tensors with `requires_grad == false` are
/// skipped entirely: neither the value nor its moments move.
pub fn adam_step(params: &mut [&mut Tensor], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if params.len() != state.shapes.len() {
        return Err(Error::shape(
            "adam_step",
            format!("{} tensors for a state tracking {}", params.len(), state.shapes.len()),
        ));
    }
    if let Some((p, s)) = params
        .iter()
        .zip(&state.shapes)
        .find(|(p, s)| p.shape() != s.as_slice())
    {
        return Err(Error::shape("adam_step", format!("{:?} tracked as {s:?}", p.shape())));
    }
    if !(0.0..1.0).contains(&cfg.beta1) || !(0.0..1.0).contains(&cfg.beta2) {
        return Err(Error::Config(format!(
            "adam betas ({}, {}) outside [0, 1)",
            cfg.beta1, cfg.beta2
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        if !p.requires_grad {
            continue;
        }
        let Some(grad) = p.grad.take() else {
            // Zero gradient still decays the moments.
            for (m, v) in state.first[i].iter_mut().zip(state.second[i].iter_mut()) {
                *m *= cfg.beta1;
                *v *= cfg.beta2;
            }
            let (m, v) = (&state.first[i], &state.second[i]);
            for (j, x) in p.data_mut().iter_mut().enumerate() {
                *x -= cfg.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + cfg.eps);
            }
            continue;
        };
        let m = &mut state.first[i];
        let v = &mut state.second[i];
        for (j, x) in p.data_mut().iter_mut().enumerate() {
            let g = grad[j];
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            *x -= cfg.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + cfg.eps);
        }
        p.grad = Some(grad);
    }
    Ok(())
}
