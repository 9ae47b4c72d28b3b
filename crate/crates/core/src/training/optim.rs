use crate::tensor::Tensor;

/// Warmup-then-inverse-square-root learning rate:
/// `hidden^-0.5 · min(step^-0.5, step · warmup^-1.5)`, `step ≥ 1`.
pub fn lr_schedule(step: u64, hidden_dim: usize, warmup_steps: u64) -> f64 {
    let s = step.max(1) as f64;
    let w = warmup_steps.max(1) as f64;
    (hidden_dim as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5))
}

/// Adam with bias correction; moment buffers mirror the parameter list.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, epsilon: f64, params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            beta1,
            beta2,
            epsilon,
            first_moment: zeros(),
            second_moment: zeros(),
        }
    }

    /// Applies update number `step` (1-based) in place.
    pub fn update(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64, step: u64) {
        let c1 = 1.0 - self.beta1.powf(step as f64);
        let c2 = 1.0 - self.beta2.powf(step as f64);
        let moments = self.first_moment.iter_mut().zip(self.second_moment.iter_mut());
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(moments) {
            let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_peaks_at_warmup() {
        let (d, w) = (384, 4000);
        let at = lr_schedule(w, d, w);
        assert!((at - (d as f64).powf(-0.5) * (w as f64).powf(-0.5)).abs() < 1e-18);
        let ratio = lr_schedule(2 * w, d, w) / at;
        assert!((ratio - 0.5f64.sqrt()).abs() < 1e-12);
        for s in 1..w {
            assert!(lr_schedule(s + 1, d, w) > lr_schedule(s, d, w));
        }
        for s in w..w + 2000 {
            assert!(lr_schedule(s + 1, d, w) < lr_schedule(s, d, w));
        }
    }

    #[test]
    fn first_adam_step_moves_by_lr_times_sign() {
        let mut p = vec![Tensor::from_vec(vec![1.0, -2.0, 0.5]).unwrap()];
        let g = vec![Tensor::from_vec(vec![0.3, -4.0, 0.0]).unwrap()];
        let mut adam = Adam::new(0.9, 0.98, 1e-9, &p);
        adam.update(&mut p, &g, 0.1, 1);
        let got = p[0].data();
        assert!((got[0] - 0.9).abs() < 1e-8);
        assert!((got[1] + 1.9).abs() < 1e-8);
        assert_eq!(got[2], 0.5);
    }

    #[test]
    fn adam_matches_hand_rolled_second_step() {
        let (b1, b2, eps, lr) = (0.9, 0.98, 1e-9, 0.01);
        let mut p = vec![Tensor::from_vec(vec![2.0]).unwrap()];
        let mut adam = Adam::new(b1, b2, eps, &p);
        let gs = [0.5, -1.5];
        let (mut m, mut v, mut x): (f64, f64, f64) = (0.0, 0.0, 2.0);
        for (k, &gv) in gs.iter().enumerate() {
            let t = (k + 1) as f64;
            m = b1 * m + (1.0 - b1) * gv;
            v = b2 * v + (1.0 - b2) * gv * gv;
            x -= lr * (m / (1.0 - b1.powf(t))) / ((v / (1.0 - b2.powf(t))).sqrt() + eps);
            adam.update(&mut p, &[Tensor::from_vec(vec![gv]).unwrap()], lr, k as u64 + 1);
        }
        assert!((p[0].data()[0] - x).abs() < 1e-15);
    }
}
