//! Factor-2 bilinear upsampling, half-pixel centres (align-corners false).

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug)]
struct Tap<T> {
    lo: usize,
    hi: usize,
    frac: T,
}

/// Source taps for each of the `2 * len` output positions along one axis.
fn taps<T: Scalar>(len: usize) -> Vec<Tap<T>> {
    (0..2 * len)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(len - 1);
            let hi = (lo + 1).min(len - 1);
            Tap { lo, hi, frac: T::lit(src - lo as f64) }
        })
        .collect()
}

pub fn forward<T: Scalar>(input: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (ty, tx) = (taps::<T>(h), taps::<T>(w));
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); planes * oh * ow];
    let mut row = vec![T::zero(); ow];
    for p in 0..planes {
        let src = &input[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (oy, ry) in ty.iter().enumerate() {
            let (a, b) = (&src[ry.lo * w..(ry.lo + 1) * w], &src[ry.hi * w..(ry.hi + 1) * w]);
            let wy1 = ry.frac;
            let wy0 = T::one() - wy1;
            for (ox, rx) in tx.iter().enumerate() {
                let top = a[rx.lo] * (T::one() - rx.frac) + a[rx.hi] * rx.frac;
                let bot = b[rx.lo] * (T::one() - rx.frac) + b[rx.hi] * rx.frac;
                row[ox] = top * wy0 + bot * wy1;
            }
            dst[oy * ow..(oy + 1) * ow].copy_from_slice(&row);
        }
    }
    out
}

pub fn backward<T: Scalar>(grad_out: &[T], planes: usize, h: usize, w: usize, grad_input: &mut [T]) {
    let (ty, tx) = (taps::<T>(h), taps::<T>(w));
    let (oh, ow) = (2 * h, 2 * w);
    for p in 0..planes {
        let g = &grad_out[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut grad_input[p * h * w..(p + 1) * h * w];
        for (oy, ry) in ty.iter().enumerate() {
            let wy1 = ry.frac;
            let wy0 = T::one() - wy1;
            for (ox, rx) in tx.iter().enumerate() {
                let go = g[oy * ow + ox];
                let wx1 = rx.frac;
                let wx0 = T::one() - wx1;
                dst[ry.lo * w + rx.lo] += go * wy0 * wx0;
                dst[ry.lo * w + rx.hi] += go * wy0 * wx1;
                dst[ry.hi * w + rx.lo] += go * wy1 * wx0;
                dst[ry.hi * w + rx.hi] += go * wy1 * wx1;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_row() {
        // weights for output x: 0 -> x0, 1 -> .75x0+.25x1, 2 -> .25x0+.75x1, 3 -> x1
        let out = forward(&[0.0f64, 1.0], 1, 1, 2);
        assert_eq!(out, vec![0.0, 0.25, 0.75, 1.0, 0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn single_pixel_replicates() {
        assert_eq!(forward(&[2.5f64], 1, 1, 1), vec![2.5; 4]);
    }
}
