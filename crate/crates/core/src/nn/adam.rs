//! Adam optimizer over flat parameter views.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Adam moment state for one network.
///
/// Defaults follow the usual `beta1 = 0.9`, `beta2 = 0.999`, `eps = 1e-8`
/// with bias-corrected moments.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(n_params: usize, lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. `params` and `grads` must cover the same layout
    /// used at construction (total length equal to `n_params`).
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        let np: usize = params.iter().map(|s| s.len()).sum();
        let ng: usize = grads.iter().map(|s| s.len()).sum();
        if np != self.m.len() || ng != self.m.len() || params.len() != grads.len() {
            return Err(Error::ShapeMismatch(format!(
                "adam state holds {} params, got {np} params / {ng} grads",
                self.m.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let mut off = 0;
        for (ps, gs) in params.iter_mut().zip(grads.iter()) {
            if ps.len() != gs.len() {
                return Err(Error::ShapeMismatch(
                    "parameter/gradient slice lengths differ".into(),
                ));
            }
            for (p, g) in ps.iter_mut().zip(gs.iter()) {
                let m = &mut self.m[off];
                let v = &mut self.v[off];
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
                off += 1;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn first_step_moves_by_learning_rate() {
        // From zero moments with grad 1 and lr 3e-4, bias correction makes the
        // first update exactly lr / (1 + eps)-ish.
        let mut st = AdamState::new(1, 3e-4);
        let mut p = [0.0f64];
        let g = [1.0f64];
        st.step(&mut [&mut p], &[&g]).unwrap();
        assert_abs_diff_eq!(p[0], -3e-4, epsilon = 1e-9);
    }

    #[test]
    fn constant_gradient_steps_approach_lr_magnitude() {
        let mut st = AdamState::new(1, 1e-2);
        let mut p = [0.0f64];
        let g = [0.5f64];
        let mut prev = 0.0;
        for _ in 0..200 {
            prev = p[0];
            st.step(&mut [&mut p], &[&g]).unwrap();
        }
        assert_abs_diff_eq!((p[0] - prev).abs(), 1e-2, epsilon = 1e-4);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut st = AdamState::new(3, 1e-3);
        let mut p = [0.0f64; 2];
        let g = [1.0f64; 2];
        assert!(st.step(&mut [&mut p], &[&g]).is_err());
    }

    #[test]
    fn state_round_trips_through_json() {
        let mut st = AdamState::new(2, 1e-3);
        let mut p = [0.1f64, -0.2];
        let g = [0.3f64, 0.4];
        st.step(&mut [&mut p], &[&g]).unwrap();
        let json = serde_json::to_string(&st).unwrap();
        let st2: AdamState = serde_json::from_str(&json).unwrap();
        let mut pa = p;
        let mut pb = p;
        let mut sa = st;
        let mut sb = st2;
        sa.step(&mut [&mut pa], &[&g]).unwrap();
        sb.step(&mut [&mut pb], &[&g]).unwrap();
        assert_eq!(pa, pb);
    }
}
