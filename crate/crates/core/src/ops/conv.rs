//! Same-padded 2D convolution via im2col + GEMM.

use crate::scalar::{MatView, Scalar};

/// Geometry of a stride-1, same-padded convolution with an odd square kernel.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

impl ConvGeom {
    fn pad(&self) -> usize {
        self.k / 2
    }

    fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn plane(&self) -> usize {
        self.h * self.w
    }
}

/// Valid output x-range for kernel column `kj`: `x + kj - pad` must land in `[0, w)`.
#[inline]
fn x_range(w: usize, kj: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kj);
    let hi = (w + pad).saturating_sub(kj).min(w);
    (lo, hi.max(lo))
}

fn im2col<T: Scalar>(g: &ConvGeom, img: &[T], col: &mut [T]) {
    let (h, w, k, pad) = (g.h, g.w, g.k, g.pad());
    let plane = g.plane();
    for c in 0..g.cin {
        let src = &img[c * plane..(c + 1) * plane];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut col[row * plane..(row + 1) * plane];
                let (x0, x1) = x_range(w, kj, pad);
                for y in 0..h {
                    let out = &mut dst[y * w..(y + 1) * w];
                    let iy = y as isize + ki as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let srow = &src[iy as usize * w..(iy as usize + 1) * w];
                    out[..x0].fill(T::zero());
                    out[x1..].fill(T::zero());
                    for x in x0..x1 {
                        out[x] = srow[x + kj - pad];
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(g: &ConvGeom, col: &[T], img: &mut [T]) {
    let (h, w, k, pad) = (g.h, g.w, g.k, g.pad());
    let plane = g.plane();
    for c in 0..g.cin {
        let dst = &mut img[c * plane..(c + 1) * plane];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &col[row * plane..(row + 1) * plane];
                let (x0, x1) = x_range(w, kj, pad);
                for y in 0..h {
                    let iy = y as isize + ki as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let drow = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                    let srow = &src[y * w..(y + 1) * w];
                    for x in x0..x1 {
                        drow[x + kj - pad] += srow[x];
                    }
                }
            }
        }
    }
}

pub fn forward<T: Scalar>(g: &ConvGeom, input: &[T], weight: &[T]) -> Vec<T> {
    let plane = g.plane();
    let rows = g.col_rows();
    let mut out = vec![T::zero(); g.n * g.cout * plane];
    let mut col = if g.k == 1 { Vec::new() } else { vec![T::zero(); rows * plane] };
    for n in 0..g.n {
        let img = &input[n * g.cin * plane..(n + 1) * g.cin * plane];
        let b: &[T] = if g.k == 1 {
            img
        } else {
            im2col(g, img, &mut col);
            &col
        };
        let dst = &mut out[n * g.cout * plane..(n + 1) * g.cout * plane];
        T::gemm(
            g.cout,
            rows,
            plane,
            weight,
            MatView::row_major(rows),
            b,
            MatView::row_major(plane),
            T::zero(),
            dst,
            MatView::row_major(plane),
        );
    }
    out
}

/// Accumulates input and weight gradients for the requested sides.
pub fn backward<T: Scalar>(
    g: &ConvGeom,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    mut grad_input: Option<&mut [T]>,
    mut grad_weight: Option<&mut [T]>,
) {
    let plane = g.plane();
    let rows = g.col_rows();
    let mut col = vec![T::zero(); rows * plane];
    for n in 0..g.n {
        let img = &input[n * g.cin * plane..(n + 1) * g.cin * plane];
        let dout = &grad_out[n * g.cout * plane..(n + 1) * g.cout * plane];
        if let Some(gw) = grad_weight.as_deref_mut() {
            let b: &[T] = if g.k == 1 {
                img
            } else {
                im2col(g, img, &mut col);
                &col
            };
            T::gemm(
                g.cout,
                plane,
                rows,
                dout,
                MatView::row_major(plane),
                b,
                MatView::transposed(plane),
                T::one(),
                gw,
                MatView::row_major(rows),
            );
        }
        if let Some(gi) = grad_input.as_deref_mut() {
            let dst = &mut gi[n * g.cin * plane..(n + 1) * g.cin * plane];
            if g.k == 1 {
                T::gemm(
                    rows,
                    g.cout,
                    plane,
                    weight,
                    MatView::transposed(rows),
                    dout,
                    MatView::row_major(plane),
                    T::one(),
                    dst,
                    MatView::row_major(plane),
                );
            } else {
                T::gemm(
                    rows,
                    g.cout,
                    plane,
                    weight,
                    MatView::transposed(rows),
                    dout,
                    MatView::row_major(plane),
                    T::zero(),
                    &mut col,
                    MatView::row_major(plane),
                );
                col2im_add(g, &col, dst);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct sliding-window sum, independent of im2col.
    fn naive(g: &ConvGeom, input: &[f64], weight: &[f64]) -> Vec<f64> {
        let p = g.pad() as isize;
        let mut out = vec![0.0; g.n * g.cout * g.h * g.w];
        for n in 0..g.n {
            for co in 0..g.cout {
                for y in 0..g.h {
                    for x in 0..g.w {
                        let mut acc = 0.0;
                        for ci in 0..g.cin {
                            for ki in 0..g.k {
                                for kj in 0..g.k {
                                    let iy = y as isize + ki as isize - p;
                                    let ix = x as isize + kj as isize - p;
                                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                        continue;
                                    }
                                    let iv = input[((n * g.cin + ci) * g.h + iy as usize) * g.w + ix as usize];
                                    let wv = weight[((co * g.cin + ci) * g.k + ki) * g.k + kj];
                                    acc += iv * wv;
                                }
                            }
                        }
                        out[((n * g.cout + co) * g.h + y) * g.w + x] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_sliding_window_on_odd_shapes() {
        for (h, w, k) in [(5, 7, 3), (1, 1, 3), (4, 3, 1), (2, 6, 3)] {
            let g = ConvGeom { n: 2, cin: 3, cout: 4, h, w, k };
            let input: Vec<f64> = (0..g.n * g.cin * h * w).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
            let weight: Vec<f64> = (0..g.cout * g.cin * k * k).map(|i| ((i * 13 % 7) as f64) * 0.25 - 0.7).collect();
            let got = forward(&g, &input, &weight);
            let want = naive(&g, &input, &weight);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <conv(x), r> == <x, conv^T r> and likewise for the weights.
        let g = ConvGeom { n: 2, cin: 2, cout: 3, h: 4, w: 5, k: 3 };
        let x: Vec<f64> = (0..g.n * g.cin * 20).map(|i| (i as f64 * 0.37).sin()).collect();
        let wt: Vec<f64> = (0..g.cout * g.cin * 9).map(|i| (i as f64 * 0.71).cos()).collect();
        let r: Vec<f64> = (0..g.n * g.cout * 20).map(|i| (i as f64 * 0.13).sin()).collect();
        let y = forward(&g, &x, &wt);
        let lhs: f64 = y.iter().zip(&r).map(|(a, b)| a * b).sum();
        let mut gx = vec![0.0; x.len()];
        let mut gw = vec![0.0; wt.len()];
        backward(&g, &x, &wt, &r, Some(&mut gx), Some(&mut gw));
        let via_x: f64 = gx.iter().zip(&x).map(|(a, b)| a * b).sum();
        let via_w: f64 = gw.iter().zip(&wt).map(|(a, b)| a * b).sum();
        assert!((lhs - via_x).abs() < 1e-10);
        assert!((lhs - via_w).abs() < 1e-10);
    }
}
