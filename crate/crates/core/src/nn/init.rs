use rand::Rng;
use rand_distr::StandardNormal;

use crate::nn::tensor::Tensor;
use crate::scalar::Scalar;

/// `[rows, cols]` matrix whose rows (if `rows <= cols`) or columns are
/// orthonormal: Gaussian draws orthonormalized by modified Gram-Schmidt,
/// run twice for stability.
pub fn orthogonal_init<T: Scalar, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor<T> {
    let (count, len) = if rows <= cols { (rows, cols) } else { (cols, rows) };
    let mut vecs: Vec<Vec<f64>> = (0..count)
        .map(|_| (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    for i in 0..count {
        for _pass in 0..2 {
            for j in 0..i {
                let dot: f64 = vecs[i].iter().zip(&vecs[j]).map(|(a, b)| a * b).sum();
                let (head, tail) = vecs.split_at_mut(i);
                tail[0].iter_mut().zip(&head[j]).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = vecs[i].iter().map(|a| a * a).sum::<f64>().sqrt();
        vecs[i].iter_mut().for_each(|a| *a /= norm);
    }
    let mut data = vec![T::zero(); rows * cols];
    for (i, v) in vecs.iter().enumerate() {
        for (j, &x) in v.iter().enumerate() {
            let (r, c) = if rows <= cols { (i, j) } else { (j, i) };
            data[r * cols + c] = T::of(x);
        }
    }
    Tensor::new(vec![rows, cols], data).expect("shape is consistent")
}

/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn uniform_fan_in<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.random_range(-bound..bound))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape is consistent")
}
