// SPDX-License-Identifier: MIT OR Apache-2.0

use ndarray::{Array2, ArrayView1, ArrayView2};

use crate::scalar::{log_sum_exp, softmax_in_place, Scalar};

/// Mean over rows of the summed squared error; gradient w.r.t. `pred`.
pub fn mse<T: Scalar>(pred: ArrayView2<T>, target: ArrayView2<T>) -> (T, Array2<T>) {
    let n = T::of(pred.nrows().max(1) as f64);
    let diff = &pred - &target;
    let loss = diff.iter().map(|d| *d * *d).sum::<T>() / n;
    let two = T::of(2.0);
    (loss, diff.mapv(|d| two * d / n))
}

/// Mean softmax cross-entropy of logit rows against class labels.
pub fn softmax_cross_entropy<T: Scalar>(logits: ArrayView2<T>, labels: ArrayView1<T>) -> (T, Array2<T>) {
    let n = T::of(logits.nrows().max(1) as f64);
    let mut grad = logits.as_standard_layout().into_owned();
    let mut loss = T::zero();
    for (r, mut g) in grad.outer_iter_mut().enumerate() {
        let y = labels[r].as_f64() as usize;
        loss += log_sum_exp(logits.row(r).iter().copied()) - logits[[r, y]];
        let row = g.as_slice_mut().expect("row is contiguous");
        softmax_in_place(row);
        row[y] -= T::one();
        for v in row.iter_mut() {
            *v /= n;
        }
    }
    (loss / n, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn mse_value() {
        let (l, g) = mse(array![[1.0f64], [3.0]].view(), array![[0.0], [1.0]].view());
        assert_eq!(l, 2.5);
        assert_eq!(g, array![[1.0], [2.0]]);
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let logits = array![[0.2f64, -1.0, 0.7], [1.5, 0.1, -0.3]];
        let labels = array![2.0, 0.0];
        let (_, g) = softmax_cross_entropy(logits.view(), labels.view());
        let h = 1e-6;
        for r in 0..2 {
            for c in 0..3 {
                let mut p = logits.clone();
                p[[r, c]] += h;
                let mut m = logits.clone();
                m[[r, c]] -= h;
                let n = (softmax_cross_entropy(p.view(), labels.view()).0
                    - softmax_cross_entropy(m.view(), labels.view()).0)
                    / (2.0 * h);
                assert!((n - g[[r, c]]).abs() < 1e-7);
            }
        }
    }
}
