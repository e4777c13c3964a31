use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{Matrix, Scalar};

/// Affine map `y = x·W + b`, `W` is `in×out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear<T> {
    pub w: Matrix<T>,
    pub b: Matrix<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, std: f64, rng: &mut R) -> Self {
        Self {
            w: Matrix::randn(fan_in, fan_out, std, rng),
            b: Matrix::zeros(1, fan_out),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: Matrix::zeros(fan_in, fan_out),
            b: Matrix::zeros(1, fan_out),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.w.rows
    }

    pub fn fan_out(&self) -> usize {
        self.w.cols
    }

    pub fn forward(&self, x: &Matrix<T>) -> Matrix<T> {
        let mut y = x.matmul(&self.w);
        y.add_row_broadcast(&self.b);
        y
    }

    pub fn forward_vec(&self, x: &[T]) -> Vec<T> {
        let mut y = self.b.data.clone();
        for (i, &xi) in x.iter().enumerate() {
            for (yj, &wij) in y.iter_mut().zip(self.w.row(i)) {
                *yj += xi * wij;
            }
        }
        y
    }

    /// Accumulates parameter gradients into `g`, returns `dL/dx`.
    pub fn backward(&self, x: &Matrix<T>, dy: &Matrix<T>, g: &mut Linear<T>) -> Matrix<T> {
        x.t_matmul_acc(dy, &mut g.w);
        dy.col_sum_acc(&mut g.b);
        dy.matmul_t(&self.w)
    }

    pub fn backward_vec(&self, x: &[T], dy: &[T], g: &mut Linear<T>) -> Vec<T> {
        for (i, &xi) in x.iter().enumerate() {
            for (gw, &d) in g.w.row_mut(i).iter_mut().zip(dy) {
                *gw += xi * d;
            }
        }
        for (gb, &d) in g.b.data.iter_mut().zip(dy) {
            *gb += d;
        }
        (0..self.w.rows)
            .map(|i| super::tensor::dot(self.w.row(i), dy))
            .collect()
    }

    pub(crate) fn tensors_named(&self, prefix: &str) -> Vec<(String, &Matrix<T>)> {
        vec![(format!("{prefix}.w"), &self.w), (format!("{prefix}.b"), &self.b)]
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut Matrix<T>> {
        vec![&mut self.w, &mut self.b]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm<T> {
    pub gamma: Matrix<T>,
    pub beta: Matrix<T>,
}

pub(crate) const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub(crate) struct LnCache<T> {
    xhat: Matrix<T>,
    inv_std: Vec<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(d: usize) -> Self {
        Self {
            gamma: Matrix::filled(1, d, T::one()),
            beta: Matrix::zeros(1, d),
        }
    }

    pub(crate) fn forward(&self, x: &Matrix<T>) -> (Matrix<T>, LnCache<T>) {
        let d = x.cols;
        let mut xhat = Matrix::zeros(x.rows, d);
        let mut inv_std = Vec::with_capacity(x.rows);
        let dn = T::of(d as f64);
        for i in 0..x.rows {
            let r = x.row(i);
            let mean = r.iter().copied().sum::<T>() / dn;
            let var = r.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let is = T::one() / (var + T::of(LN_EPS)).sqrt();
            inv_std.push(is);
            for (o, &v) in xhat.row_mut(i).iter_mut().zip(r) {
                *o = (v - mean) * is;
            }
        }
        let mut y = xhat.clone();
        for i in 0..y.rows {
            for ((o, &g), &b) in y.row_mut(i).iter_mut().zip(&self.gamma.data).zip(&self.beta.data) {
                *o = *o * g + b;
            }
        }
        (y, LnCache { xhat, inv_std })
    }

    pub(crate) fn backward(&self, c: &LnCache<T>, dy: &Matrix<T>, g: &mut LayerNorm<T>) -> Matrix<T> {
        let d = dy.cols;
        let dn = T::of(d as f64);
        let mut dx = Matrix::zeros(dy.rows, d);
        for i in 0..dy.rows {
            let xh = c.xhat.row(i);
            let dyr = dy.row(i);
            let mut mean_dxh = T::zero();
            let mut mean_dxh_xh = T::zero();
            for j in 0..d {
                g.gamma.data[j] += dyr[j] * xh[j];
                g.beta.data[j] += dyr[j];
                let dxh = dyr[j] * self.gamma.data[j];
                mean_dxh += dxh;
                mean_dxh_xh += dxh * xh[j];
            }
            mean_dxh /= dn;
            mean_dxh_xh /= dn;
            let is = c.inv_std[i];
            for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
                let dxh = dyr[j] * self.gamma.data[j];
                *o = is * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
            }
        }
        dx
    }

    pub(crate) fn tensors_named(&self, prefix: &str) -> Vec<(String, &Matrix<T>)> {
        vec![
            (format!("{prefix}.gamma"), &self.gamma),
            (format!("{prefix}.beta"), &self.beta),
        ]
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut Matrix<T>> {
        vec![&mut self.gamma, &mut self.beta]
    }
}
