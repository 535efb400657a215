use crate::error::{Result, TensorError};
use crate::matrix::Matrix;

/// Adaptive-moment optimiser state with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
}

impl Adam {
    /// Accumulators shaped like `params`.
    pub fn new(params: &[&Matrix], lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect(),
            second: params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[Matrix]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(TensorError::Shape(format!(
                "optimiser tracks {} tensors, got {} params and {} grads",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first) {
            p.check_same_shape(g)?;
            p.check_same_shape(m)?;
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i].as_slice();
            let m = self.first[i].as_mut_slice();
            let v = self.second[i].as_mut_slice();
            for (k, w) in p.as_mut_slice().iter_mut().enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mhat = m[k] / c1;
                let vhat = v[k] / c2;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = Matrix::row_vector(&[1.0, -2.0]);
        let mut opt = Adam::new(&[&p], 1e-3);
        opt.step(&mut [&mut p], &[Matrix::zeros(1, 2)]).unwrap();
        assert_eq!(p.as_slice(), &[1.0, -2.0]);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate_against_gradient() {
        let mut p = Matrix::row_vector(&[0.0, 0.0, 0.0]);
        let mut opt = Adam::new(&[&p], 1e-3);
        opt.step(&mut [&mut p], &[Matrix::row_vector(&[3.0, -0.5, 1e-2])]).unwrap();
        for (v, sign) in p.as_slice().iter().zip([-1.0, 1.0, -1.0]) {
            assert_eq!(v.signum(), sign);
            assert!((v.abs() - 1e-3).abs() < 1e-8, "{v}");
        }
    }

    #[test]
    fn quadratic_bowl_converges() {
        // f(x) = Σ cᵢ (xᵢ - tᵢ)², optimum at t.
        let target = [1.5, -0.75, 0.2];
        let curv = [1.0, 4.0, 0.5];
        let mut p = Matrix::row_vector(&[0.0, 0.0, 0.0]);
        let mut opt = Adam::new(&[&p], 0.05);
        let mut steps = 0;
        while steps < 2000 {
            let g: Vec<f64> = (0..3)
                .map(|i| 2.0 * curv[i] * (p.as_slice()[i] - target[i]))
                .collect();
            opt.step(&mut [&mut p], &[Matrix::row_vector(&g)]).unwrap();
            steps += 1;
        }
        for (v, t) in p.as_slice().iter().zip(target) {
            assert!((v - t).abs() < 1e-6, "{v} vs {t}");
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = Matrix::row_vector(&[0.0, 0.0]);
        let mut opt = Adam::new(&[&p], 1e-3);
        assert!(opt.step(&mut [&mut p], &[Matrix::zeros(2, 1)]).is_err());
        assert_eq!(opt.steps(), 0);
    }
}
