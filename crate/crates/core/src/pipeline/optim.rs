//! AdamW with decoupled weight decay, plus the cosine learning-rate schedule.

use super::PipelineError;

/// First/second-moment state for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

impl Moments {
    pub fn zeros(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// AdamW: Adam moments with weight decay applied directly to the parameter
/// (decoupled from the gradient-based update).
#[derive(Clone, Copy, Debug)]
pub struct AdamW {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl AdamW {
    pub fn new(weight_decay: f32) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    /// One update in place. `t` is the 1-based step count for bias
    /// correction; the same `t` must be used for every tensor in a step.
    pub fn step(&self, lr: f32, p: &mut [f32], g: &[f32], mom: &mut Moments, t: u32) {
        assert_eq!(p.len(), g.len(), "param/grad length mismatch");
        assert_eq!(p.len(), mom.m.len(), "param/moment length mismatch");
        assert!(t >= 1, "step count is 1-based");
        let bc1 = 1.0 - self.beta1.powi(t as i32);
        let bc2 = 1.0 - self.beta2.powi(t as i32);
        for i in 0..p.len() {
            mom.m[i] = self.beta1 * mom.m[i] + (1.0 - self.beta1) * g[i];
            mom.v[i] = self.beta2 * mom.v[i] + (1.0 - self.beta2) * g[i] * g[i];
            let m_hat = mom.m[i] / bc1;
            let v_hat = mom.v[i] / bc2;
            p[i] -= lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * p[i]);
        }
    }
}

/// Cosine decay from `lr0` at step 0 to `eta_min` at step `t_max`.
pub fn cosine_lr(step: usize, lr0: f32, eta_min: f32, t_max: usize) -> Result<f32, PipelineError> {
    if t_max == 0 {
        return Err(PipelineError::NonPositive {
            what: "t_max",
            got: 0.0,
        });
    }
    if step > t_max {
        return Err(PipelineError::StepOutOfRange { step, t_max });
    }
    let phase = std::f32::consts::PI * step as f32 / t_max as f32;
    Ok(eta_min + 0.5 * (lr0 - eta_min) * (1.0 + phase.cos()))
}
