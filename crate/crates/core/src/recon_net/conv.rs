//! 3×3 zero-padded convolution as nine shifted GEMMs over a padded copy of
//! the input.
//!
//! With the planes stored as `(h+2)×(w+2)` and zero borders, tap `(ky, kx)`
//! reads the padded buffer at a constant flat offset, so every tap is one
//! `cout×cin` by `cin×n` product with no patch matrix. Positions on the
//! padded border receive garbage and are dropped when unpadding.

use crate::scalar::{Real, View};

pub(crate) const KERNEL: usize = 3;
const TAPS: usize = KERNEL * KERNEL;

/// Flat layout of a padded plane stack.
#[derive(Clone, Copy)]
struct Padded {
    wp: usize,
    plane: usize,
    /// First flat position whose 3×3 neighbourhood stays inside the plane.
    lo: usize,
    /// Number of positions computed per tap, starting at `lo`.
    n: usize,
}

impl Padded {
    fn new(h: usize, w: usize) -> Self {
        let wp = w + 2;
        let plane = (h + 2) * wp;
        let lo = wp + 1;
        Padded {
            wp,
            plane,
            lo,
            n: plane - 2 * lo,
        }
    }

    /// Start of the window read by tap `t` (offset `(ky-1, kx-1)` from `lo`).
    fn tap_start(self, t: usize) -> usize {
        (t / KERNEL) * self.wp + t % KERNEL
    }

    fn rows(self, at: usize) -> View {
        View {
            offset: at,
            row_stride: self.plane,
            col_stride: 1,
        }
    }

    fn cols(self, at: usize) -> View {
        View {
            offset: at,
            row_stride: 1,
            col_stride: self.plane,
        }
    }
}

fn pad_into<T: Real>(src: &[T], c: usize, h: usize, w: usize, dst: &mut Vec<T>) -> Padded {
    let p = Padded::new(h, w);
    dst.clear();
    dst.resize(c * p.plane, T::zero());
    for ch in 0..c {
        for i in 0..h {
            let s = &src[(ch * h + i) * w..(ch * h + i + 1) * w];
            let at = ch * p.plane + (i + 1) * p.wp + 1;
            dst[at..at + w].copy_from_slice(s);
        }
    }
    p
}

fn unpad<T: Real>(src: &[T], c: usize, h: usize, w: usize, p: Padded) -> Vec<T> {
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for i in 0..h {
            let at = ch * p.plane + (i + 1) * p.wp + 1;
            out.extend_from_slice(&src[at..at + w]);
        }
    }
    out
}

/// Tap `t` of a `cout×cin×3×3` weight as a `cout×cin` matrix.
fn weight_tap(cin: usize, t: usize) -> View {
    View {
        offset: t,
        row_stride: cin * TAPS,
        col_stride: TAPS,
    }
}

/// Same tap, transposed to `cin×cout`.
fn weight_tap_t(cin: usize, t: usize) -> View {
    View {
        offset: t,
        row_stride: TAPS,
        col_stride: cin * TAPS,
    }
}

/// `out = W * input + b`, `W` is `cout×cin×3×3`. `scratch` is reused
/// between calls.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_forward<T: Real>(
    input: &[T],
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    weight: &[T],
    bias: &[T],
    scratch: &mut Vec<T>,
) -> Vec<T> {
    let p = pad_into(input, cin, h, w, scratch);
    let mut out_p = vec![T::zero(); cout * p.plane];
    for t in 0..TAPS {
        T::gemm_view(
            cout,
            cin,
            p.n,
            weight,
            weight_tap(cin, t),
            scratch,
            p.rows(p.tap_start(t)),
            &mut out_p,
            p.rows(p.lo),
            t > 0,
        );
    }
    let mut out = unpad(&out_p, cout, h, w, p);
    for (row, &b) in out.chunks_exact_mut(h * w).zip(bias) {
        row.iter_mut().for_each(|v| *v += b);
    }
    out
}

pub(crate) struct ConvGrads<'a, T> {
    pub weight: Option<&'a mut [T]>,
    pub bias: Option<&'a mut [T]>,
}

/// Accumulates weight/bias gradients and returns the input gradient if asked.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward<T: Real>(
    input: &[T],
    grad_out: &[T],
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    weight: &[T],
    grads: ConvGrads<'_, T>,
    need_input_grad: bool,
    scratch: &mut Vec<T>,
) -> Option<Vec<T>> {
    let hw = h * w;
    if let Some(gb) = grads.bias {
        for (g, row) in gb.iter_mut().zip(grad_out.chunks_exact(hw)) {
            *g += row.iter().copied().sum::<T>();
        }
    }
    let mut g_p = Vec::new();
    let p = pad_into(grad_out, cout, h, w, &mut g_p);
    if let Some(gw) = grads.weight {
        pad_into(input, cin, h, w, scratch);
        // dW_t (cout×cin) += dOut (cout×n) · shifted inputᵀ (n×cin)
        for t in 0..TAPS {
            T::gemm_view(
                cout,
                p.n,
                cin,
                &g_p,
                p.rows(p.lo),
                scratch,
                p.cols(p.tap_start(t)),
                gw,
                weight_tap(cin, t),
                true,
            );
        }
    }
    if !need_input_grad {
        return None;
    }
    // the border of g_p is zero, so border garbage never reaches interior positions
    let mut din_p = vec![T::zero(); cin * p.plane];
    for t in 0..TAPS {
        T::gemm_view(
            cin,
            cout,
            p.n,
            weight,
            weight_tap_t(cin, t),
            &g_p,
            p.rows(p.lo),
            &mut din_p,
            p.rows(p.tap_start(t)),
            true,
        );
    }
    Some(unpad(&din_p, cin, h, w, p))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn direct_conv(input: &[f64], cin: usize, cout: usize, h: usize, w: usize, wt: &[f64], b: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; cout * h * w];
        for o in 0..cout {
            for i in 0..h {
                for j in 0..w {
                    let mut s = b[o];
                    for c in 0..cin {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (si, sj) = (i as isize + ky as isize - 1, j as isize + kx as isize - 1);
                                if si >= 0 && sj >= 0 && (si as usize) < h && (sj as usize) < w {
                                    s += wt[((o * cin + c) * 3 + ky) * 3 + kx]
                                        * input[(c * h + si as usize) * w + sj as usize];
                                }
                            }
                        }
                    }
                    out[(o * h + i) * w + j] = s;
                }
            }
        }
        out
    }

    fn seq(n: usize, a: f64) -> Vec<f64> {
        (0..n).map(|i| ((i as f64 + 1.0) * a).sin()).collect()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn matches_direct_convolution() {
        for (cin, cout, h, w) in [(3, 4, 5, 7), (2, 32, 8, 8), (1, 1, 1, 1), (2, 3, 3, 2)] {
            let x = seq(cin * h * w, 0.7);
            let wt = seq(cout * cin * 9, 0.3);
            let b = seq(cout, 1.1);
            let mut scratch = Vec::new();
            let got = conv_forward(&x, cin, cout, h, w, &wt, &b, &mut scratch);
            let want = direct_conv(&x, cin, cout, h, w, &wt, &b);
            for (g, e) in got.iter().zip(&want) {
                assert!((g - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_is_the_adjoint() {
        let (cin, cout, h, w) = (3, 2, 4, 6);
        let x = seq(cin * h * w, 0.9);
        let wt = seq(cout * cin * 9, 0.4);
        let g = seq(cout * h * w, 0.25);
        let zero = vec![0.0; cout];
        let mut scratch = Vec::new();
        let y = conv_forward(&x, cin, cout, h, w, &wt, &zero, &mut scratch);
        let mut gw = vec![0.0; wt.len()];
        let mut gb = vec![0.0; cout];
        let gx = conv_backward(
            &x,
            &g,
            cin,
            cout,
            h,
            w,
            &wt,
            ConvGrads {
                weight: Some(&mut gw),
                bias: Some(&mut gb),
            },
            true,
            &mut scratch,
        )
        .unwrap();
        // the map is bilinear in (x, W): <conv(x), g> = <x, dx> = <W, dW>
        let lhs = dot(&y, &g);
        assert!((lhs - dot(&x, &gx)).abs() < 1e-10);
        assert!((lhs - dot(&wt, &gw)).abs() < 1e-10);
        for (c, &b) in gb.iter().enumerate() {
            assert!((b - g[c * h * w..(c + 1) * h * w].iter().sum::<f64>()).abs() < 1e-12);
        }
    }

    #[test]
    fn weight_gradient_accumulates() {
        let (cin, cout, h, w) = (2, 2, 3, 3);
        let x = seq(cin * h * w, 0.5);
        let wt = seq(cout * cin * 9, 0.2);
        let g = seq(cout * h * w, 0.3);
        let mut scratch = Vec::new();
        let mut once = vec![0.0; wt.len()];
        let mut twice = vec![0.0; wt.len()];
        for (buf, reps) in [(&mut once, 1), (&mut twice, 2)] {
            for _ in 0..reps {
                let grads = ConvGrads {
                    weight: Some(&mut buf[..]),
                    bias: None,
                };
                assert!(conv_backward(&x, &g, cin, cout, h, w, &wt, grads, false, &mut scratch).is_none());
            }
        }
        for (a, b) in once.iter().zip(&twice) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }
}
