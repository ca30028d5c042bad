//! Pointwise activations and channel-axis plumbing.

use crate::scalar::Scalar;

pub fn relu<T: Scalar>(input: &[T]) -> Vec<T> {
    input.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect()
}

pub fn relu_backward<T: Scalar>(input: &[T], grad_out: &[T], grad_input: &mut [T]) {
    for ((gi, &x), &g) in grad_input.iter_mut().zip(input).zip(grad_out) {
        if x > T::zero() {
            *gi += g;
        }
    }
}

/// Softmax over the channel axis of `[n, c, plane]`.
pub fn softmax_channels<T: Scalar>(input: &[T], n: usize, c: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); input.len()];
    for b in 0..n {
        let base = b * c * plane;
        for p in 0..plane {
            let mut max = T::neg_infinity();
            for k in 0..c {
                max = max.max(input[base + k * plane + p]);
            }
            let mut total = T::zero();
            for k in 0..c {
                let e = (input[base + k * plane + p] - max).exp();
                out[base + k * plane + p] = e;
                total += e;
            }
            for k in 0..c {
                out[base + k * plane + p] /= total;
            }
        }
    }
    out
}

pub fn softmax_channels_backward<T: Scalar>(
    probs: &[T],
    grad_out: &[T],
    n: usize,
    c: usize,
    plane: usize,
    grad_input: &mut [T],
) {
    for b in 0..n {
        let base = b * c * plane;
        for p in 0..plane {
            let mut dot = T::zero();
            for k in 0..c {
                let i = base + k * plane + p;
                dot += probs[i] * grad_out[i];
            }
            for k in 0..c {
                let i = base + k * plane + p;
                grad_input[i] += probs[i] * (grad_out[i] - dot);
            }
        }
    }
}

/// Adds `bias[c]` to every element of channel `c`.
pub fn add_channel_bias<T: Scalar>(input: &[T], bias: &[T], n: usize, plane: usize) -> Vec<T> {
    let c = bias.len();
    let mut out = input.to_vec();
    for b in 0..n {
        for (k, &bv) in bias.iter().enumerate() {
            let start = (b * c + k) * plane;
            for v in &mut out[start..start + plane] {
                *v += bv;
            }
        }
    }
    out
}

pub fn channel_sums<T: Scalar>(grad_out: &[T], n: usize, c: usize, plane: usize, out: &mut [T]) {
    for b in 0..n {
        for (k, o) in out.iter_mut().enumerate().take(c) {
            let start = (b * c + k) * plane;
            *o += grad_out[start..start + plane].iter().copied().sum::<T>();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_zeroes_negatives() {
        assert_eq!(relu(&[-2.0f64, 0.0, 3.0]), vec![0.0, 0.0, 3.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let out = softmax_channels(&[0.7f64; 4 * 6], 2, 4, 3);
        assert!(out.iter().all(|&p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn softmax_survives_large_logits() {
        let out = softmax_channels(&[1000.0f64, 0.0], 1, 2, 1);
        assert!(out.iter().all(|v| v.is_finite()));
        assert!((out[0] - 1.0).abs() < 1e-12);
    }
}
