use crate::scalar::Scalar;

/// 2x2 stride-2 max pooling over `planes` planes of `h x w`.
///
/// Returns the pooled values and, per output element, the flat input index of
/// the first (row-major) maximal element in its window.
pub fn maxpool2_forward<T: Scalar>(input: &[T], planes: usize, h: usize, w: usize) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut argmax = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for y in 0..oh {
            for x in 0..ow {
                let mut best = base + 2 * y * w + 2 * x;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * y + dy) * w + 2 * x + dx;
                    if input[idx] > input[best] {
                        best = idx;
                    }
                }
                out.push(input[best]);
                argmax.push(best);
            }
        }
    }
    (out, argmax)
}

pub fn maxpool2_backward<T: Scalar>(grad_out: &[T], argmax: &[usize], grad_input: &mut [T]) {
    for (g, &idx) in grad_out.iter().zip(argmax) {
        grad_input[idx] += *g;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn picks_window_maximum() {
        let (out, arg) = maxpool2_forward(&[1.0f64, 2.0, 3.0, 4.0], 1, 2, 2);
        assert_eq!(out, vec![4.0]);
        assert_eq!(arg, vec![3]);
    }

    #[test]
    fn ties_route_to_first_element() {
        let (out, arg) = maxpool2_forward(&[5.0f64, 5.0, 5.0, 5.0], 1, 2, 2);
        assert_eq!(out, vec![5.0]);
        assert_eq!(arg, vec![0]);
        let mut g = vec![0.0; 4];
        maxpool2_backward(&[1.0], &arg, &mut g);
        assert_eq!(g, vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn constant_plane_stays_constant() {
        let (out, _) = maxpool2_forward(&[0.3f32; 2 * 4 * 6], 2, 4, 6);
        assert_eq!(out.len(), 2 * 2 * 3);
        assert!(out.iter().all(|&v| v == 0.3));
    }
}
