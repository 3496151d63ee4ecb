/// Adam with bias correction and fixed `(0.9, 0.999, 1e-8)` hyperparameters.
///
/// Moments are allocated lazily per parameter slot; a slot whose gradient is
/// `None` is skipped and its moments are left untouched.
#[derive(Clone, Debug, Default)]
pub struct Adam {
    step: u64,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update at learning rate `lr` over aligned `(param, grad)` slots.
///
/// Panics if a slot's parameter and gradient lengths differ.
pub fn adam_step(opt: &mut Adam, slots: Vec<(&mut [f64], Option<&[f64]>)>, lr: f64) {
    opt.step += 1;
    let t = opt.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    if opt.moments.len() < slots.len() {
        opt.moments.resize(slots.len(), None);
    }
    for (slot, (params, grads)) in slots.into_iter().enumerate() {
        let Some(grads) = grads else { continue };
        assert_eq!(params.len(), grads.len(), "slot {slot}: parameter/gradient length mismatch");
        let (m, v) = opt.moments[slot].get_or_insert_with(|| (vec![0.0; params.len()], vec![0.0; params.len()]));
        for i in 0..params.len() {
            let g = grads[i];
            m[i] = BETA1 * m[i] + (1.0 - BETA1) * g;
            v[i] = BETA2 * v[i] + (1.0 - BETA2) * g * g;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + EPSILON);
        }
    }
}

/// Learning rate for round `t` of `total`: linear decay to zero.
pub fn round_lr(base_lr: f64, t: usize, total: usize) -> f64 {
    base_lr * (1.0 - t as f64 / total as f64)
}
