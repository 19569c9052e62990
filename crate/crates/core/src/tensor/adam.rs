use crate::error::{Error, Result};

use super::{Real, Tensor4};

/// Adam with bias-corrected moments.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Tensor4<T>>,
    pub v: Vec<Tensor4<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &[Tensor4<T>]) -> Self {
        AdamState {
            step: 0,
            m: params.iter().map(|p| Tensor4::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor4::zeros(p.shape())).collect(),
        }
    }
}

impl Adam {
    pub fn step<T: Real>(
        &self,
        lr: f64,
        params: &mut [Tensor4<T>],
        grads: &[Tensor4<T>],
        state: &mut AdamState<T>,
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
            return Err(Error::shape(
                "adam_step",
                format!(
                    "{} params, {} grads, {} moment buffers",
                    params.len(),
                    grads.len(),
                    state.m.len()
                ),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != state.m[i].shape() || p.shape() != state.v[i].shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("param {i}: {:?} vs grad {:?}", p.shape(), g.shape()),
                ));
            }
        }
        state.step += 1;
        let t = state.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (ob1, ob2) = (T::lit(1.0 - self.beta1), T::lit(1.0 - self.beta2));
        let step_size = T::lit(lr / bc1);
        let inv_sqrt_bc2 = T::lit(1.0 / bc2.sqrt());
        let eps = T::lit(self.eps);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(state.m.iter_mut().zip(state.v.iter_mut()))
        {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + ob1 * gv;
                *vv = b2 * *vv + ob2 * gv * gv;
                *pv -= step_size * *mv / ((*vv).sqrt() * inv_sqrt_bc2 + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor4<f64> {
        Tensor4::full([1, 1, 1, 1], v)
    }

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let adam = Adam::default();
        let mut params = vec![scalar(0.5)];
        let mut state = AdamState::new(&params);
        state.m[0] = scalar(0.2);
        state.v[0] = scalar(0.04);
        state.step = 3;
        let before_m = state.m[0].data()[0];
        let fresh = vec![scalar(0.5)];
        let mut fresh_state = AdamState::new(&fresh);
        let mut fresh_params = fresh.clone();
        adam.step(0.1, &mut fresh_params, &[scalar(0.0)], &mut fresh_state).unwrap();
        assert_eq!(fresh_params, fresh);
        adam.step(0.1, &mut params, &[scalar(0.0)], &mut state).unwrap();
        assert!(state.m[0].data()[0].abs() < before_m.abs());
        assert!(state.v[0].data()[0] < 0.04);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let adam = Adam::default();
        let mut params = vec![scalar(1.0)];
        let mut state = AdamState::new(&params);
        adam.step(0.1, &mut params, &[scalar(1.0)], &mut state).unwrap();
        assert!((1.0 - params[0].data()[0] - 0.1).abs() < 1e-6);
    }

    #[test]
    fn descends_quadratic_monotonically() {
        let adam = Adam::default();
        let mut params = vec![scalar(1.0)];
        let mut state = AdamState::new(&params);
        let mut prev = 1.0f64;
        for _ in 0..10 {
            let w = params[0].data()[0];
            adam.step(0.05, &mut params, &[scalar(2.0 * w)], &mut state).unwrap();
            let now = params[0].data()[0].abs();
            assert!(now < prev, "{now} !< {prev}");
            prev = now;
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let adam = Adam::default();
        let mut params = vec![scalar(1.0)];
        let mut state = AdamState::new(&params);
        let bad = Tensor4::zeros([1, 2, 1, 1]);
        assert!(adam.step(0.1, &mut params, &[bad], &mut state).is_err());
    }
}
