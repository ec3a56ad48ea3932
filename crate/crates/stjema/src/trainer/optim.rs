//! Adaptive-moment optimizer with decoupled weight decay, plus the
//! learning-rate schedules used by the training loops.

use std::collections::BTreeMap;

use ndarray::Array2;

use crate::nn::params::ParamStore;

use super::TrainError;

/// Learning-rate schedule, evaluated as a multiplier on the base rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    Constant,
    /// Half-cosine from 1 at step 0 to 0 at step = total.
    CosineDecay,
    /// Linear warmup over the first 30% of steps, cosine decay after.
    OneCycle,
}

impl Schedule {
    /// Multiplier for `step` out of `total` (`step` counts from 0).
    pub fn multiplier(&self, step: usize, total: usize) -> f64 {
        let total = total.max(1);
        let frac = (step as f64 / total as f64).clamp(0.0, 1.0);
        match self {
            Schedule::Constant => 1.0,
            Schedule::CosineDecay => 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()),
            Schedule::OneCycle => {
                let warmup = (0.3 * total as f64).ceil().max(1.0);
                if (step as f64) < warmup {
                    (step as f64 + 1.0) / warmup
                } else {
                    let tail = (step as f64 - warmup) / (total as f64 - warmup).max(1.0);
                    0.5 * (1.0 + (std::f64::consts::PI * tail.clamp(0.0, 1.0)).cos())
                }
            }
        }
    }
}

/// First/second moment state for one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptSlot {
    pub m: Array2<f64>,
    pub v: Array2<f64>,
    /// Number of updates applied to this tensor (bias correction).
    pub t: u64,
}

/// Adaptive-moment optimizer with decoupled weight decay. Only tensors
/// present in the gradient map are touched, so frozen parameters are
/// never updated or decayed.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    slots: BTreeMap<String, OptSlot>,
}

impl AdamW {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        AdamW {
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            slots: BTreeMap::new(),
        }
    }

    /// Apply one update with the schedule multiplier `lr_mult`:
    /// moments are EMA-updated and bias-corrected per tensor, decay is
    /// applied directly to the parameter (decoupled from the gradient).
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Array2<f64>>,
        lr_mult: f64,
    ) -> Result<(), TrainError> {
        let lr = self.learning_rate * lr_mult;
        for (name, grad) in grads {
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(TrainError::NonFiniteGradient { name: name.clone() });
            }
            let value = params
                .get(name)
                .map_err(|_| TrainError::BadConfig(format!("gradient for unknown parameter {name}")))?;
            let slot = self.slots.entry(name.clone()).or_insert_with(|| OptSlot {
                m: Array2::zeros(grad.dim()),
                v: Array2::zeros(grad.dim()),
                t: 0,
            });
            if slot.m.dim() != grad.dim() || value.dim() != grad.dim() {
                return Err(TrainError::BadConfig(format!("gradient shape mismatch for {name}")));
            }
            slot.t += 1;
            let t = slot.t as f64;
            slot.m.zip_mut_with(grad, |m, g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            slot.v.zip_mut_with(grad, |v, g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            let bias1 = 1.0 - self.beta1.powf(t);
            let bias2 = 1.0 - self.beta2.powf(t);
            let m = &slot.m;
            let v = &slot.v;
            let eps = self.eps;
            let wd = self.weight_decay;
            let tensor = params.get_mut(name).expect("presence checked above");
            ndarray::Zip::from(tensor).and(m).and(v).for_each(|p, &m, &v| {
                let m_hat = m / bias1;
                let v_hat = v / bias2;
                *p -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * *p);
            });
        }
        Ok(())
    }

    /// Snapshot of the moment state for checkpointing.
    pub fn export_slots(&self) -> BTreeMap<String, OptSlot> {
        self.slots.clone()
    }

    /// Restore a previously exported moment state.
    pub fn import_slots(&mut self, slots: BTreeMap<String, OptSlot>) {
        self.slots = slots;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::Role;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn schedule_endpoints() {
        assert_eq!(Schedule::Constant.multiplier(0, 100), 1.0);
        assert_eq!(Schedule::Constant.multiplier(99, 100), 1.0);
        assert_abs_diff_eq!(Schedule::CosineDecay.multiplier(0, 100), 1.0);
        assert_abs_diff_eq!(Schedule::CosineDecay.multiplier(100, 100), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(Schedule::CosineDecay.multiplier(50, 100), 0.5);
        // One-cycle: ramp to 1 at the end of warmup, decay to 0.
        let w = Schedule::OneCycle;
        assert_abs_diff_eq!(w.multiplier(29, 100), 1.0); // warmup = 30 steps
        assert!(w.multiplier(0, 100) > 0.0);
        assert!(w.multiplier(10, 100) < w.multiplier(20, 100));
        assert_abs_diff_eq!(w.multiplier(100, 100), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn zero_gradient_zero_decay_leaves_params_unchanged() {
        let mut params = ParamStore::new();
        params.insert("w", Role::Head, array![[1.0, -2.0]]).unwrap();
        let mut opt = AdamW::new(0.1, 0.0);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), array![[0.0, 0.0]]);
        for _ in 0..5 {
            opt.step(&mut params, &grads, 1.0).unwrap();
        }
        assert_eq!(params.get("w").unwrap(), &array![[1.0, -2.0]]);
    }

    #[test]
    fn quadratic_converges_within_200_steps() {
        // f(x) = ½x² on a 1-dimensional parameter, gradient x, cosine
        // decay damping the terminal oscillation.
        let mut params = ParamStore::new();
        params.insert("x", Role::Head, array![[5.0]]).unwrap();
        let mut opt = AdamW::new(0.3, 0.0);
        for step in 0..200 {
            let x = params.get("x").unwrap()[(0, 0)];
            let mut grads = BTreeMap::new();
            grads.insert("x".to_string(), array![[x]]);
            let mult = Schedule::CosineDecay.multiplier(step, 200);
            opt.step(&mut params, &grads, mult).unwrap();
        }
        assert!(params.get("x").unwrap()[(0, 0)].abs() < 1e-3);
    }

    #[test]
    fn weight_decay_shrinks_without_gradient_signal() {
        let mut params = ParamStore::new();
        params.insert("w", Role::Head, array![[4.0]]).unwrap();
        let mut opt = AdamW::new(0.1, 0.5);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), array![[0.0]]);
        opt.step(&mut params, &grads, 1.0).unwrap();
        // p ← p − lr·wd·p = 4 − 0.1·0.5·4 = 3.8 (moment term is zero).
        assert_abs_diff_eq!(params.get("w").unwrap()[(0, 0)], 3.8, epsilon = 1e-12);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut params = ParamStore::new();
        params.insert("w", Role::Head, array![[1.0]]).unwrap();
        let mut opt = AdamW::new(0.1, 0.0);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), array![[f64::NAN]]);
        assert!(matches!(
            opt.step(&mut params, &grads, 1.0),
            Err(TrainError::NonFiniteGradient { .. })
        ));
    }

    #[test]
    fn slots_round_trip() {
        let mut params = ParamStore::new();
        params.insert("w", Role::Head, array![[1.0]]).unwrap();
        let mut opt = AdamW::new(0.1, 0.0);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), array![[0.3]]);
        opt.step(&mut params, &grads, 1.0).unwrap();
        let snapshot = opt.export_slots();
        assert_eq!(snapshot["w"].t, 1);

        let mut fresh = AdamW::new(0.1, 0.0);
        fresh.import_slots(snapshot.clone());
        let mut a = params.clone();
        let mut b = params.clone();
        opt.step(&mut a, &grads, 1.0).unwrap();
        fresh.step(&mut b, &grads, 1.0).unwrap();
        assert_eq!(a.get("w").unwrap(), b.get("w").unwrap());
    }
}
