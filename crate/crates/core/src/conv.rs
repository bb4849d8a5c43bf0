//! Valid (unpadded) dilated 2-D convolution kernels via im2col + GEMM.
//!
//! Layouts: input `(c_in, h, w)`, kernel `(c_out, c_in, kh, kw)`, output
//! `(c_out, h - d(kh-1), w - d(kw-1))`. "Convolution" here is
//! cross-correlation, as in every deep-learning framework.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub dilation: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.h - self.dilation * (self.kh - 1)
    }

    pub fn out_w(&self) -> usize {
        self.w - self.dilation * (self.kw - 1)
    }

    fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

fn im2col(g: &ConvGeom, input: &[f64]) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    let mut cols = vec![0.0; g.patch() * plane];
    let mut row = 0;
    for c in 0..g.c_in {
        let chan = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let src = &chan[(oy + ky * g.dilation) * g.w + kx * g.dilation..];
                    dst[oy * ow..(oy + 1) * ow].copy_from_slice(&src[..ow]);
                }
                row += 1;
            }
        }
    }
    cols
}

fn col2im(g: &ConvGeom, cols: &[f64]) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    let mut out = vec![0.0; g.c_in * g.h * g.w];
    let mut row = 0;
    for c in 0..g.c_in {
        let chan = &mut out[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let base = (oy + ky * g.dilation) * g.w + kx * g.dilation;
                    for (d, s) in chan[base..base + ow]
                        .iter_mut()
                        .zip(&src[oy * ow..(oy + 1) * ow])
                    {
                        *d += s;
                    }
                }
                row += 1;
            }
        }
    }
    out
}

/// `c = a · b` for row-major `a (m×k)`, `b (k×n)`, optionally transposed.
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64]) {
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    // SAFETY: the slices hold exactly m·k, k·n and m·n elements and the
    // strides above address only those ranges.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn matmul(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    if m * n > 0 {
        gemm(m, k, n, a, a_t, b, b_t, &mut c);
    }
    c
}

/// Few output channels make the im2col buffer cost more than it saves.
fn use_direct(g: &ConvGeom) -> bool {
    DIRECT.with(|d| d.get()).unwrap_or(g.c_out * g.c_in <= 4)
}

thread_local! {
    static DIRECT: std::cell::Cell<Option<bool>> = const { std::cell::Cell::new(None) };
}

/// Forces (or, with `None`, releases) the direct path on this thread.
#[cfg(test)]
pub(crate) fn force_direct(v: Option<bool>) {
    DIRECT.with(|d| d.set(v));
}

fn direct_forward(g: &ConvGeom, input: &[f64], kernel: &[f64]) -> Vec<f64> {
    let (oh, ow, d) = (g.out_h(), g.out_w(), g.dilation);
    let mut out = vec![0.0; g.c_out * oh * ow];
    for co in 0..g.c_out {
        let dst = &mut out[co * oh * ow..(co + 1) * oh * ow];
        for ci in 0..g.c_in {
            let chan = &input[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let k = kernel[((co * g.c_in + ci) * g.kh + ky) * g.kw + kx];
                    for oy in 0..oh {
                        let src = &chan[(oy + ky * d) * g.w + kx * d..][..ow];
                        for (o, x) in dst[oy * ow..(oy + 1) * ow].iter_mut().zip(src) {
                            *o += k * x;
                        }
                    }
                }
            }
        }
    }
    out
}

fn direct_grad_input(g: &ConvGeom, kernel: &[f64], grad_out: &[f64]) -> Vec<f64> {
    let (oh, ow, d) = (g.out_h(), g.out_w(), g.dilation);
    let mut out = vec![0.0; g.c_in * g.h * g.w];
    for ci in 0..g.c_in {
        let chan = &mut out[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for co in 0..g.c_out {
            let go = &grad_out[co * oh * ow..(co + 1) * oh * ow];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let k = kernel[((co * g.c_in + ci) * g.kh + ky) * g.kw + kx];
                    for oy in 0..oh {
                        let dst = &mut chan[(oy + ky * d) * g.w + kx * d..][..ow];
                        for (o, x) in dst.iter_mut().zip(&go[oy * ow..(oy + 1) * ow]) {
                            *o += k * x;
                        }
                    }
                }
            }
        }
    }
    out
}

fn direct_grad_kernel(g: &ConvGeom, input: &[f64], grad_out: &[f64]) -> Vec<f64> {
    let (oh, ow, d) = (g.out_h(), g.out_w(), g.dilation);
    let mut out = vec![0.0; g.c_out * g.c_in * g.kh * g.kw];
    for co in 0..g.c_out {
        let go = &grad_out[co * oh * ow..(co + 1) * oh * ow];
        for ci in 0..g.c_in {
            let chan = &input[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let mut acc = 0.0;
                    for oy in 0..oh {
                        let src = &chan[(oy + ky * d) * g.w + kx * d..][..ow];
                        acc += src
                            .iter()
                            .zip(&go[oy * ow..(oy + 1) * ow])
                            .map(|(a, b)| a * b)
                            .sum::<f64>();
                    }
                    out[((co * g.c_in + ci) * g.kh + ky) * g.kw + kx] = acc;
                }
            }
        }
    }
    out
}

pub(crate) fn forward(g: &ConvGeom, input: &[f64], kernel: &[f64]) -> Vec<f64> {
    if use_direct(g) {
        return direct_forward(g, input, kernel);
    }
    let cols = im2col(g, input);
    matmul(
        g.c_out,
        g.patch(),
        g.out_plane(),
        kernel,
        false,
        &cols,
        false,
    )
}

/// Gradients `(d_input, d_kernel)` given the upstream gradient of the
/// output; each is computed only when requested.
pub(crate) fn backward(
    g: &ConvGeom,
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    want_input: bool,
    want_kernel: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    if use_direct(g) {
        return (
            want_input.then(|| direct_grad_input(g, kernel, grad_out)),
            want_kernel.then(|| direct_grad_kernel(g, input, grad_out)),
        );
    }
    let d_kernel = want_kernel.then(|| {
        let cols = im2col(g, input);
        matmul(
            g.c_out,
            g.out_plane(),
            g.patch(),
            grad_out,
            false,
            &cols,
            true,
        )
    });
    let d_input = want_input.then(|| {
        let d_cols = matmul(
            g.patch(),
            g.c_out,
            g.out_plane(),
            kernel,
            true,
            grad_out,
            false,
        );
        col2im(g, &d_cols)
    });
    (d_input, d_kernel)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn direct(g: &ConvGeom, x: &[f64], k: &[f64]) -> Vec<f64> {
        let (oh, ow) = (g.out_h(), g.out_w());
        let mut out = vec![0.0; g.c_out * oh * ow];
        for co in 0..g.c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..g.c_in {
                        for ky in 0..g.kh {
                            for kx in 0..g.kw {
                                let iy = oy + ky * g.dilation;
                                let ix = ox + kx * g.dilation;
                                acc += x[(ci * g.h + iy) * g.w + ix]
                                    * k[((co * g.c_in + ci) * g.kh + ky) * g.kw + kx];
                            }
                        }
                    }
                    out[(co * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn gemm_conv_matches_direct_loops() {
        let g = ConvGeom {
            c_in: 3,
            h: 9,
            w: 7,
            c_out: 2,
            kh: 3,
            kw: 3,
            dilation: 2,
        };
        let x: Vec<f64> = (0..3 * 9 * 7)
            .map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.1)
            .collect();
        let k: Vec<f64> = (0..2 * 3 * 9)
            .map(|i| ((i * 13 % 7) as f64 - 3.0) * 0.2)
            .collect();
        let a = forward(&g, &x, &k);
        let b = direct(&g, &x, &k);
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn direct_and_gemm_paths_agree() {
        let g = ConvGeom {
            c_in: 3,
            h: 9,
            w: 8,
            c_out: 4,
            kh: 3,
            kw: 3,
            dilation: 2,
        };
        let x: Vec<f64> = (0..3 * 9 * 8)
            .map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.1)
            .collect();
        let k: Vec<f64> = (0..4 * 3 * 9)
            .map(|i| ((i * 13 % 7) as f64 - 3.0) * 0.2)
            .collect();
        let go: Vec<f64> = (0..4 * g.out_h() * g.out_w())
            .map(|i| ((i * 5 % 9) as f64 - 4.0) * 0.3)
            .collect();
        let mut runs = Vec::new();
        for direct in [false, true] {
            force_direct(Some(direct));
            let y = forward(&g, &x, &k);
            let (di, dk) = backward(&g, &x, &k, &go, true, true);
            runs.push((y, di.unwrap(), dk.unwrap()));
        }
        force_direct(None);
        let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(p, q)| (p - q).abs() < 1e-12);
        assert!(close(&runs[0].0, &runs[1].0));
        assert!(close(&runs[0].1, &runs[1].1));
        assert!(close(&runs[0].2, &runs[1].2));
        assert_eq!(backward(&g, &x, &k, &go, false, true).0, None);
    }

    #[test]
    fn transposed_matmul() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        assert_eq!(
            matmul(2, 2, 2, &a, false, &b, false),
            vec![19.0, 22.0, 43.0, 50.0]
        );
        assert_eq!(
            matmul(2, 2, 2, &a, true, &b, false),
            vec![26.0, 30.0, 38.0, 44.0]
        );
        assert_eq!(
            matmul(2, 2, 2, &a, false, &b, true),
            vec![17.0, 23.0, 39.0, 53.0]
        );
    }
}
