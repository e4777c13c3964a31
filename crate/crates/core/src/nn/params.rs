use sha2::{Digest, Sha256};

use super::tensor::{Matrix, Scalar};

/// A model whose trainable state is a fixed, ordered list of named matrices.
///
/// The same type doubles as its own gradient container.
pub trait Params<T: Scalar>: Clone + Send + Sync {
    /// Named tensors in a stable order.
    fn tensors(&self) -> Vec<(String, &Matrix<T>)>;

    /// Same order as [`Params::tensors`].
    fn tensors_mut(&mut self) -> Vec<&mut Matrix<T>>;

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill_zero();
        }
        z
    }

    fn add_assign(&mut self, other: &Self) {
        let src: Vec<&Matrix<T>> = other.tensors().into_iter().map(|(_, t)| t).collect();
        for (dst, s) in self.tensors_mut().into_iter().zip(src) {
            dst.add_assign(s);
        }
    }

    fn scale(&mut self, s: T) {
        for t in self.tensors_mut() {
            t.scale(s);
        }
    }

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    fn sq_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|(_, t)| t.data.iter())
            .map(|x| {
                let v = x.as_f64();
                v * v
            })
            .sum()
    }

    /// SHA-256 over names, shapes and little-endian values.
    fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.tensors() {
            h.update(name.as_bytes());
            h.update((t.rows as u64).to_le_bytes());
            h.update((t.cols as u64).to_le_bytes());
            for x in &t.data {
                h.update(x.as_f64().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Sums per-example gradients in their given order so results do not depend
/// on how the examples were scheduled.
pub fn sum_in_order<T: Scalar, P: Params<T>>(mut parts: Vec<P>) -> Option<P> {
    if parts.is_empty() {
        return None;
    }
    let mut acc = parts.remove(0);
    for p in &parts {
        acc.add_assign(p);
    }
    Some(acc)
}
