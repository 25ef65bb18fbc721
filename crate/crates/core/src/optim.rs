//! Adam with bias-corrected moment estimates.

use alloc::vec::Vec;

use crate::linalg::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    /// Moment buffers shaped like `shapes`, default decay rates.
    pub fn new(lr: f64, shapes: &[(usize, usize)]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. `grads[k]` of `None` leaves tensor `k` and its moments untouched.
    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[Option<Matrix>]) {
        assert_eq!(params.len(), self.m.len(), "parameter count changed");
        assert_eq!(grads.len(), self.m.len(), "gradient count mismatch");
        self.step += 1;
        let bc1 = 1.0 - libm::pow(self.beta1, self.step as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, self.step as f64);
        let lr_t = self.lr * libm::sqrt(bc2) / bc1;
        for (k, p) in params.iter_mut().enumerate() {
            let Some(g) = &grads[k] else { continue };
            assert_eq!(g.shape(), p.shape(), "gradient shape for tensor {k}");
            let m = self.m[k].as_mut_slice();
            let v = self.v[k].as_mut_slice();
            for (((pi, &gi), mi), vi) in p.as_mut_slice().iter_mut().zip(g.as_slice()).zip(m).zip(v) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *pi -= lr_t * *mi / (libm::sqrt(*vi) + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_in_sign_direction() {
        let mut p = Matrix::from_rows(&[&[1.0, -2.0, 0.5]]);
        let mut opt = Adam::new(0.1, &[(1, 3)]);
        let g = Matrix::from_rows(&[&[3.0, -0.01, 0.0]]);
        opt.step(&mut [&mut p], &[Some(g)]);
        assert!((p.get(0, 0) - 0.9).abs() < 1e-6);
        assert!((p.get(0, 1) + 1.9).abs() < 1e-4);
        assert_eq!(p.get(0, 2), 0.5);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = Matrix::from_rows(&[&[5.0, -3.0]]);
        let mut opt = Adam::new(0.05, &[(1, 2)]);
        for _ in 0..2000 {
            let g = p.map(|x| 2.0 * (x - 1.0));
            opt.step(&mut [&mut p], &[Some(g)]);
        }
        assert!((p.get(0, 0) - 1.0).abs() < 1e-3 && (p.get(0, 1) - 1.0).abs() < 1e-3);
    }

    #[test]
    fn missing_gradient_skips_tensor() {
        let mut a = Matrix::filled(1, 1, 1.0);
        let mut b = Matrix::filled(1, 1, 1.0);
        let mut opt = Adam::new(0.1, &[(1, 1), (1, 1)]);
        opt.step(&mut [&mut a, &mut b], &[None, Some(Matrix::filled(1, 1, 1.0))]);
        assert_eq!(a.get(0, 0), 1.0);
        assert!(b.get(0, 0) < 1.0);
    }
}
