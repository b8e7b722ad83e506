//! Adam with decoupled weight decay and a cosine learning-rate schedule.

use memstream_tensor::Tensor;

use crate::error::{contract, Error, Result};
use crate::nn::ParamStore;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// `base_lr · ½(1 + cos(π·step/total))`, clamped at the endpoint.
pub fn cosine_lr(base_lr: f64, step: u64, total_steps: u64) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    let s = step.min(total_steps) as f64 / total_steps as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * s).cos())
}

#[derive(Clone, Debug)]
pub struct OptimState {
    first: Vec<Option<Tensor>>,
    second: Vec<Option<Tensor>>,
    pub step: u64,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub total_steps: u64,
}

impl OptimState {
    pub fn new(base_lr: f64, weight_decay: f64, total_steps: u64) -> Self {
        Self {
            first: Vec::new(),
            second: Vec::new(),
            step: 0,
            base_lr,
            weight_decay,
            total_steps,
        }
    }

    pub fn current_lr(&self) -> f64 {
        cosine_lr(self.base_lr, self.step, self.total_steps)
    }
}

/// One bias-corrected Adam update with decoupled weight decay.
///
/// Parameters without a gradient (unused this step) or marked frozen are left
/// untouched. Any non-finite gradient aborts before anything is modified.
pub fn adam_step(store: &mut ParamStore, grads: &[Option<Tensor>], st: &mut OptimState) -> Result<()> {
    if grads.len() != store.len() {
        return contract(format!("{} gradients for {} parameters", grads.len(), store.len()));
    }
    for ((_, p), g) in store.iter().zip(grads) {
        if let Some(g) = g {
            if g.shape() != p.value.shape() {
                return contract(format!("gradient for {} has shape {:?}, expected {:?}", p.name, g.shape(), p.value.shape()));
            }
            if !g.all_finite() {
                return Err(Error::Diverged(format!("non-finite gradient for parameter {}", p.name)));
            }
        }
    }
    if st.first.len() != store.len() {
        st.first = vec![None; store.len()];
        st.second = vec![None; store.len()];
    }
    let lr = st.current_lr();
    let t = (st.step + 1) as i32;
    let (c1, c2) = (1.0 - BETA1.powi(t), 1.0 - BETA2.powi(t));
    let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.trainable)).collect();
    for (i, (id, trainable)) in ids.into_iter().enumerate() {
        let (Some(g), true) = (&grads[i], trainable) else { continue };
        let m = st.first[i].get_or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
        let v = st.second[i].get_or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
        let p = store.get_mut(id);
        for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            *mv = BETA1 * *mv + (1.0 - BETA1) * gv;
            *vv = BETA2 * *vv + (1.0 - BETA2) * gv * gv;
            let mhat = *mv / c1;
            let vhat = *vv / c2;
            *pv -= lr * st.weight_decay * *pv;
            *pv -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }
    st.step += 1;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Init, ParamStore};

    fn scalar_store(v: f64) -> ParamStore {
        let mut s = ParamStore::new(0);
        let id = s.add("p", &[1], Init::Zeros);
        s.get_mut(id).data_mut()[0] = v;
        s
    }

    #[test]
    fn zero_grads_without_decay_leave_params() {
        let mut s = ParamStore::new(3);
        s.add("w", &[4, 3], Init::TruncNormal(1.0));
        let before = s.clone();
        let mut st = OptimState::new(1e-2, 0.0, 10);
        adam_step(&mut s, &[Some(Tensor::zeros(vec![4, 3]))], &mut st).unwrap();
        assert_eq!(s.get(s.id("w").unwrap()), before.get(before.id("w").unwrap()));
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = scalar_store(1.0);
        // total_steps = 0 keeps the schedule at base_lr.
        let mut st = OptimState::new(0.1, 0.0, 0);
        adam_step(&mut s, &[Some(Tensor::vector(vec![1.0]))], &mut st).unwrap();
        let p = s.get(s.id("p").unwrap()).data()[0];
        // m̂ = v̂ = 1, so the step is lr / (1 + eps).
        assert!((p - (1.0 - 0.1 / (1.0 + ADAM_EPS))).abs() < 1e-15);
    }

    #[test]
    fn cosine_schedule_shape() {
        assert_eq!(cosine_lr(3e-4, 0, 100), 3e-4);
        assert!(cosine_lr(3e-4, 100, 100).abs() < 1e-12);
        assert!((cosine_lr(1.0, 50, 100) - 0.5).abs() < 1e-12);
        let mut prev = f64::INFINITY;
        for s in 0..=100 {
            let lr = cosine_lr(1.0, s, 100);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut s = scalar_store(1.0);
        let mut st = OptimState::new(0.1, 0.0, 10);
        let err = adam_step(&mut s, &[Some(Tensor::vector(vec![f64::NAN]))], &mut st).unwrap_err();
        assert!(err.to_string().contains("parameter p"), "{err}");
        assert_eq!(s.get(s.id("p").unwrap()).data()[0], 1.0);
    }

    #[test]
    fn frozen_and_unused_params_untouched() {
        let mut s = ParamStore::new(0);
        let a = s.add("a", &[2], Init::Ones);
        let b = s.add("b", &[2], Init::Ones);
        s.set_trainable(a, false);
        let mut st = OptimState::new(0.1, 0.01, 10);
        adam_step(&mut s, &[Some(Tensor::ones(vec![2])), None], &mut st).unwrap();
        assert_eq!(s.get(a).data(), &[1.0, 1.0]);
        assert_eq!(s.get(b).data(), &[1.0, 1.0]);
        assert_eq!(st.step, 1);
    }
}
