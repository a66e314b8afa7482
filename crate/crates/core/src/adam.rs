//! Adaptive moment estimation over a flat parameter vector with a per-entry
//! freeze mask.

/// Adam with bias correction; masked entries keep their value and moments.
#[derive(Clone, Debug)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64, mask: &[bool]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        assert_eq!(mask.len(), self.m.len());
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            if !mask[i] {
                continue;
            }
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / b1t;
            let v_hat = self.v[i] / b2t;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn descends_a_quadratic() {
        let mut x = vec![5.0f64, -3.0];
        let mut adam = Adam::new(2);
        let mask = vec![true, true];
        for _ in 0..2000 {
            let g: Vec<f64> = x.iter().map(|&xi| 2.0 * xi).collect();
            adam.step(&mut x, &g, 0.01, &mask);
        }
        assert!(x.iter().all(|&xi| xi.abs() < 1e-3));
    }

    #[test]
    fn mask_freezes_entries() {
        let mut x = vec![1.0f64, 1.0];
        let mut adam = Adam::new(2);
        for _ in 0..10 {
            adam.step(&mut x, &[1.0, 1.0], 0.1, &[true, false]);
        }
        assert!(x[0] < 1.0);
        assert_eq!(x[1], 1.0);
    }
}
