//! Adam and SGD (with or without heavy-ball momentum). Moments are held in
//! working precision and never quantized.

use crate::real::Real;

use super::config::OptimizerKind;
use super::model::Params;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const MOMENTUM: f64 = 0.9;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub kind: OptimizerKind,
    /// Number of updates applied so far.
    pub t: u64,
    /// Adam first moment or SGD momentum buffer.
    pub m: Option<Params<T>>,
    /// Adam second moment.
    pub v: Option<Params<T>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(kind: OptimizerKind, like: &Params<T>) -> Self {
        let zeros = || Some(Params::zeros_like(like));
        let (m, v) = match kind {
            OptimizerKind::Adam => (zeros(), zeros()),
            OptimizerKind::SgdMomentum => (zeros(), None),
            OptimizerKind::Sgd => (None, None),
        };
        OptimizerState { kind, t: 0, m, v }
    }

    /// Apply one update with learning rate `lr`.
    pub fn step(&mut self, params: &mut Params<T>, grads: &Params<T>, lr: f64) {
        self.t += 1;
        let lr_t = T::from_f64(lr);
        let g_all = grads.slices();
        match self.kind {
            OptimizerKind::Sgd => {
                for (w, g) in params.slices_mut().into_iter().zip(g_all) {
                    for (w, &g) in w.iter_mut().zip(g) {
                        *w -= lr_t * g;
                    }
                }
            }
            OptimizerKind::SgdMomentum => {
                let mu = T::from_f64(MOMENTUM);
                let m_all = self.m.as_mut().expect("momentum buffer").slices_mut();
                for ((w, m), g) in params.slices_mut().into_iter().zip(m_all).zip(g_all) {
                    for ((w, m), &g) in w.iter_mut().zip(m.iter_mut()).zip(g) {
                        *m = mu * *m + g;
                        *w -= lr_t * *m;
                    }
                }
            }
            OptimizerKind::Adam => {
                let b1 = T::from_f64(ADAM_BETA1);
                let b2 = T::from_f64(ADAM_BETA2);
                let c1 = T::from_f64(1.0 - ADAM_BETA1);
                let c2 = T::from_f64(1.0 - ADAM_BETA2);
                let bc1 = T::from_f64(1.0 - ADAM_BETA1.powi(self.t.min(i32::MAX as u64) as i32));
                let bc2 = T::from_f64(1.0 - ADAM_BETA2.powi(self.t.min(i32::MAX as u64) as i32));
                let eps = T::from_f64(ADAM_EPS);
                let m_all = self.m.as_mut().expect("first moment").slices_mut();
                let v_all = self.v.as_mut().expect("second moment").slices_mut();
                for (((w, m), v), g) in params
                    .slices_mut()
                    .into_iter()
                    .zip(m_all)
                    .zip(v_all)
                    .zip(g_all)
                {
                    for (((w, m), v), &g) in w.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
                        *m = b1 * *m + c1 * g;
                        *v = b2 * *v + c2 * g * g;
                        let mhat = *m / bc1;
                        let vhat = *v / bc2;
                        *w -= lr_t * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::proxy::model::LayerParams;
    use crate::tensor::Tensor;

    fn scalar(w: f64) -> Params<f64> {
        Params {
            layers: vec![LayerParams {
                w1: Tensor::from_f64(&[1, 1], &[w]).unwrap(),
                w2: Tensor::from_f64(&[1, 1], &[0.0]).unwrap(),
                gamma: None,
                beta: None,
            }],
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        for kind in [OptimizerKind::Adam, OptimizerKind::Sgd, OptimizerKind::SgdMomentum] {
            let mut p = scalar(0.3);
            let mut st = OptimizerState::new(kind, &p);
            st.step(&mut p, &scalar(0.0), 0.1);
            assert_eq!(p, scalar(0.3));
        }
    }

    #[test]
    fn sgd_step_is_exact() {
        let mut p = scalar(1.0);
        let mut st = OptimizerState::new(OptimizerKind::Sgd, &p);
        st.step(&mut p, &scalar(0.5), 0.25);
        assert_eq!(p.layers[0].w1.data[0], 1.0 - 0.25 * 0.5);
    }

    #[test]
    fn adam_first_step_matches_hand_trace() {
        let g = 0.02;
        let mut p = scalar(1.0);
        let mut st = OptimizerState::new(OptimizerKind::Adam, &p);
        st.step(&mut p, &scalar(g), 1e-3);
        let m = 0.1 * g;
        let v = 0.001 * g * g;
        let mhat = m / 0.1;
        let vhat = v / (1.0 - 0.999);
        let expected = 1.0 - 1e-3 * mhat / (vhat.sqrt() + 1e-8);
        assert!((p.layers[0].w1.data[0] - expected).abs() < 1e-15);
        // effectively w - lr * sign(g)
        assert!((p.layers[0].w1.data[0] - (1.0 - 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn momentum_accumulates() {
        let mut p = scalar(0.0);
        let mut st = OptimizerState::new(OptimizerKind::SgdMomentum, &p);
        st.step(&mut p, &scalar(1.0), 1.0);
        st.step(&mut p, &scalar(1.0), 1.0);
        assert!((p.layers[0].w1.data[0] + 1.0 + 1.9).abs() < 1e-12);
    }
}
