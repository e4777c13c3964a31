//! Adaptive-moment optimizer with bias correction.

use super::params::Params;
use super::tensor::{Matrix, Scalar};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Adam<T: Scalar> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Matrix<T>>,
    v: Vec<Matrix<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new<P: Params<T>>(params: &P) -> Self {
        let zeros: Vec<Matrix<T>> = params
            .tensors()
            .iter()
            .map(|(_, t)| Matrix::zeros(t.rows, t.cols))
            .collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update `θ ← θ − lr · m̂ / (√v̂ + ε)`; increments the step counter.
    pub fn step<P: Params<T>>(&mut self, params: &mut P, grads: &P, lr: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(Error::InvalidArgument(format!("learning rate must be positive, got {lr}")));
        }
        let g: Vec<&Matrix<T>> = grads.tensors().into_iter().map(|(_, t)| t).collect();
        let mut p = params.tensors_mut();
        if p.len() != g.len() || p.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer holds {} tensors, params {}, grads {}",
                self.m.len(),
                p.len(),
                g.len()
            )));
        }
        for (i, (pt, gt)) in p.iter().zip(&g).enumerate() {
            if pt.shape() != gt.shape() || pt.shape() != self.m[i].shape() {
                return Err(Error::Shape(format!(
                    "tensor {i}: param {:?}, grad {:?}, moment {:?}",
                    pt.shape(),
                    gt.shape(),
                    self.m[i].shape()
                )));
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - self.beta1), T::of(1.0 - self.beta2));
        let (lr_t, eps) = (T::of(lr), T::of(self.eps));
        let (bc1, bc2) = (T::of(bc1), T::of(bc2));

        for (i, pt) in p.iter_mut().enumerate() {
            let gt = g[i];
            let m = &mut self.m[i].data;
            let v = &mut self.v[i].data;
            for j in 0..pt.data.len() {
                let gj = gt.data[j];
                m[j] = b1 * m[j] + one_b1 * gj;
                v[j] = b2 * v[j] + one_b2 * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                pt.data[j] -= lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` in place so its global L2 norm is at most `max_norm`.
pub fn clip_global_norm<T: Scalar, P: Params<T>>(grads: &mut P, max_norm: f64) -> f64 {
    let n = grads.sq_norm().sqrt();
    if n > max_norm && n > 0.0 {
        grads.scale(T::of(max_norm / n));
    }
    n
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Clone)]
    struct Scalars(Matrix<f64>);

    impl Params<f64> for Scalars {
        fn tensors(&self) -> Vec<(String, &Matrix<f64>)> {
            vec![("w".into(), &self.0)]
        }
        fn tensors_mut(&mut self) -> Vec<&mut Matrix<f64>> {
            vec![&mut self.0]
        }
    }

    #[test]
    fn zero_gradient_leaves_params_but_advances_step() {
        let mut p = Scalars(Matrix::from_vec(1, 3, vec![1.0, -2.0, 0.5]));
        let before = p.0.clone();
        let mut opt = Adam::new(&p);
        let g = p.zeros_like();
        opt.step(&mut p, &g, 1e-3).unwrap();
        assert_eq!(p.0, before);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn first_update_magnitude_is_lr() {
        // t=1: m̂ = g, v̂ = g², so Δ = lr · g/(|g| + ε) ≈ lr
        let lr = 1e-3;
        let mut p = Scalars(Matrix::from_vec(1, 1, vec![0.0]));
        let mut opt = Adam::new(&p);
        let g = Scalars(Matrix::from_vec(1, 1, vec![1.0]));
        opt.step(&mut p, &g, lr).unwrap();
        assert!((p.0.data[0] + lr).abs() < 1e-10);
        // constant gradient keeps the step size at lr
        opt.step(&mut p, &g, lr).unwrap();
        assert!((p.0.data[0] + 2.0 * lr).abs() < 1e-9);
    }

    #[test]
    fn identical_runs_are_identical() {
        let run = || {
            let mut p = Scalars(Matrix::from_vec(1, 2, vec![0.3, -0.1]));
            let mut opt = Adam::new(&p);
            for k in 0..10 {
                let g = Scalars(Matrix::from_vec(1, 2, vec![(k as f64).sin(), 0.5]));
                opt.step(&mut p, &g, 0.01).unwrap();
            }
            p.0
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = Scalars(Matrix::zeros(1, 2));
        let mut opt = Adam::new(&p);
        let g = Scalars(Matrix::zeros(2, 1));
        assert!(matches!(opt.step(&mut p, &g, 0.1), Err(Error::Shape(_))));
        let same = p.clone();
        assert!(opt.step(&mut p, &same, 0.0).is_err());
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = Scalars(Matrix::from_vec(1, 2, vec![3.0, 4.0]));
        let n = clip_global_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        assert!((g.sq_norm().sqrt() - 1.0).abs() < 1e-12);
    }
}
