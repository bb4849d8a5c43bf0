//! Centered, orthonormal 2-D FFT over the two spatial axes preceding the
//! complex axis: `fftshift ∘ FFT ∘ ifftshift`, scaled by `1/sqrt(nx·ny)`.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftDirection, FftPlanner};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

thread_local! {
    static PLANS: RefCell<(FftPlanner<f64>, HashMap<(usize, bool), Arc<dyn Fft<f64>>>)> =
        RefCell::new((FftPlanner::new(), HashMap::new()));
}

fn plan(n: usize, forward: bool) -> Arc<dyn Fft<f64>> {
    PLANS.with(|cell| {
        let mut guard = cell.borrow_mut();
        let (planner, cache) = &mut *guard;
        cache
            .entry((n, forward))
            .or_insert_with(|| {
                let dir = if forward {
                    FftDirection::Forward
                } else {
                    FftDirection::Inverse
                };
                planner.plan_fft(n, dir)
            })
            .clone()
    })
}

/// Extents `(batch, nx, ny)` of a complex tensor `(..., nx, ny, 2)`.
pub(crate) fn complex_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    let nd = shape.len();
    if nd < 3 || shape[nd - 1] != 2 {
        return Err(Error::shape(
            op,
            format!("expected (..., nx, ny, 2), got {shape:?}"),
        ));
    }
    let (nx, ny) = (shape[nd - 3], shape[nd - 2]);
    let batch = shape[..nd - 3].iter().product();
    Ok((batch, nx, ny))
}

fn transform(input: &Tensor, forward: bool) -> Result<Tensor> {
    let op = if forward { "fft2c" } else { "ifft2c" };
    let (batch, nx, ny) = complex_dims(op, input.shape())?;
    let row_plan = plan(ny, forward);
    let col_plan = plan(nx, forward);
    let scale = 1.0 / ((nx * ny) as f64).sqrt();
    let plane = nx * ny;
    let (hx, hy) = (nx / 2, ny / 2);

    let mut out = vec![0.0; input.len()];
    let mut buf = vec![Complex64::new(0.0, 0.0); plane];
    let mut col = vec![Complex64::new(0.0, 0.0); nx];
    let mut scratch = vec![
        Complex64::new(0.0, 0.0);
        row_plan
            .get_inplace_scratch_len()
            .max(col_plan.get_inplace_scratch_len())
    ];
    let src = input.data();

    for b in 0..batch {
        let base = b * plane * 2;
        // ifftshift on the way in: buf[i][j] = x[(i + hx) % nx][(j + hy) % ny].
        for i in 0..nx {
            let si = (i + hx) % nx;
            for j in 0..ny {
                let sj = (j + hy) % ny;
                let k = base + 2 * (si * ny + sj);
                buf[i * ny + j] = Complex64::new(src[k], src[k + 1]);
            }
        }
        for row in buf.chunks_exact_mut(ny) {
            row_plan.process_with_scratch(row, &mut scratch);
        }
        for j in 0..ny {
            for i in 0..nx {
                col[i] = buf[i * ny + j];
            }
            col_plan.process_with_scratch(&mut col, &mut scratch);
            for i in 0..nx {
                buf[i * ny + j] = col[i];
            }
        }
        // fftshift on the way out: out[(i + hx) % nx] = buf[i].
        for i in 0..nx {
            let di = (i + hx) % nx;
            for j in 0..ny {
                let dj = (j + hy) % ny;
                let v = buf[i * ny + j] * scale;
                let k = base + 2 * (di * ny + dj);
                out[k] = v.re;
                out[k + 1] = v.im;
            }
        }
    }
    Ok(Tensor::from_parts(input.shape().to_vec(), out))
}

pub fn fft2c(input: &Tensor) -> Result<Tensor> {
    transform(input, true)
}

pub fn ifft2c(input: &Tensor) -> Result<Tensor> {
    transform(input, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_complex(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Direct O(n²) centered DFT over one (nx, ny) plane.
    fn dft_oracle(x: &Tensor, sign: f64) -> Tensor {
        let s = x.shape();
        let (nx, ny) = (s[0], s[1]);
        let cx = nx as f64 / 2.0;
        let cy = ny as f64 / 2.0;
        let (cx, cy) = (cx.floor(), cy.floor());
        let d = x.data();
        let mut out = vec![0.0; x.len()];
        for u in 0..nx {
            for v in 0..ny {
                let (mut re, mut im) = (0.0, 0.0);
                for p in 0..nx {
                    for q in 0..ny {
                        let ph = sign
                            * 2.0
                            * std::f64::consts::PI
                            * ((u as f64 - cx) * (p as f64 - cx) / nx as f64
                                + (v as f64 - cy) * (q as f64 - cy) / ny as f64);
                        let (a, b) = (d[2 * (p * ny + q)], d[2 * (p * ny + q) + 1]);
                        re += a * ph.cos() - b * ph.sin();
                        im += a * ph.sin() + b * ph.cos();
                    }
                }
                let sc = 1.0 / ((nx * ny) as f64).sqrt();
                out[2 * (u * ny + v)] = re * sc;
                out[2 * (u * ny + v) + 1] = im * sc;
            }
        }
        Tensor::from_parts(s.to_vec(), out)
    }

    #[test]
    fn matches_direct_dft_even_and_odd() {
        for (nx, ny) in [(8, 8), (6, 10), (5, 7), (4, 9)] {
            let x = random_complex(&[nx, ny, 2], (nx * 100 + ny) as u64);
            let fwd = fft2c(&x).unwrap();
            assert!(
                fwd.max_abs_diff(&dft_oracle(&x, -1.0)).unwrap() < 1e-10,
                "{nx}x{ny}"
            );
            let inv = ifft2c(&x).unwrap();
            assert!(
                inv.max_abs_diff(&dft_oracle(&x, 1.0)).unwrap() < 1e-10,
                "{nx}x{ny}"
            );
        }
    }

    #[test]
    fn round_trip_and_batching() {
        let x = random_complex(&[3, 8, 8, 2], 11);
        let back = ifft2c(&fft2c(&x).unwrap()).unwrap();
        assert!(back.max_abs_diff(&x).unwrap() < 1e-10);
        let per = fft2c(&x.index_axis0(1).unwrap()).unwrap();
        let batched = fft2c(&x).unwrap().index_axis0(1).unwrap();
        assert_eq!(per, batched);
    }

    #[test]
    fn dc_lands_at_center() {
        let x = Tensor::ones(&[4, 4, 1])
            .to_complex()
            .reshape(&[4, 4, 2])
            .unwrap();
        let k = fft2c(&x).unwrap();
        // Constant image: all energy in the (2, 2) bin, value sqrt(16) = 4.
        assert!((k.data()[2 * (2 * 4 + 2)] - 4.0).abs() < 1e-12);
        assert!((k.norm_sq() - 16.0).abs() < 1e-10);
    }

    #[test]
    fn rejects_non_complex() {
        assert!(fft2c(&Tensor::zeros(&[4, 4])).is_err());
        assert!(ifft2c(&Tensor::zeros(&[4, 4, 3])).is_err());
    }
}
