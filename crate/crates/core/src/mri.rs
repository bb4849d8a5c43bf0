//! Multi-coil Cartesian MRI measurement model.
//!
//! `A_{M,S} = U_M ∘ F ∘ E_S` maps a complex image to subsampled multi-coil
//! k-space and `A* = R_S ∘ F⁻¹ ∘ U_M` maps back. Each operator exists twice:
//! a plain [`Tensor`] version and a differentiable [`Var`] version used
//! inside models and losses.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::fft::{fft2c, ifft2c};
use crate::sampling::SamplingMask;
use crate::tensor::Tensor;

/// Guard added under the square root when normalizing coil maps.
pub const RSS_EPS: f64 = 1e-12;

/// Multi-coil k-space `(n_c, n_x, n_y, 2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiCoilKSpace(Tensor);

/// Coil sensitivities `(n_c, n_x, n_y, 2)`, RSS-normalized where nonzero.
#[derive(Clone, Debug, PartialEq)]
pub struct SensitivityMaps(Tensor);

/// Single complex image `(n_x, n_y, 2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexImage(Tensor);

fn check_multicoil(op: &'static str, t: &Tensor) -> Result<()> {
    if t.ndim() != 4 || t.shape()[3] != 2 || t.shape()[0] == 0 {
        return Err(Error::shape(
            op,
            format!("expected (n_c, n_x, n_y, 2), got {:?}", t.shape()),
        ));
    }
    Ok(())
}

impl MultiCoilKSpace {
    pub fn new(data: Tensor) -> Result<Self> {
        check_multicoil("kspace", &data)?;
        Ok(MultiCoilKSpace(data))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn coils(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.0.shape()[1], self.0.shape()[2])
    }
}

impl SensitivityMaps {
    /// Accepts maps that already satisfy `Σ_k |S^k|² = 1` (to 1e-8) at every
    /// pixel where any coil is nonzero.
    pub fn new(data: Tensor) -> Result<Self> {
        check_multicoil("maps", &data)?;
        let worst = rss_deviation(&data);
        if worst > 1e-8 {
            return Err(Error::invalid(format!(
                "maps are not RSS-normalized (deviation {worst:.3e})"
            )));
        }
        Ok(SensitivityMaps(data))
    }

    /// Divides raw coil profiles by their pointwise RSS. Pixels where all
    /// coils vanish stay zero.
    pub fn normalized(raw: Tensor) -> Result<Self> {
        check_multicoil("maps", &raw)?;
        let (nc, plane) = (raw.shape()[0], raw.shape()[1] * raw.shape()[2]);
        let mut rss = vec![0.0; plane];
        for k in 0..nc {
            for (p, r) in rss.iter_mut().enumerate() {
                let i = 2 * (k * plane + p);
                *r += raw.data()[i].powi(2) + raw.data()[i + 1].powi(2);
            }
        }
        let mut out = raw.clone();
        for k in 0..nc {
            for (p, r) in rss.iter().enumerate() {
                let i = 2 * (k * plane + p);
                let s = if *r > 0.0 { 1.0 / r.sqrt() } else { 0.0 };
                out.data_mut()[i] *= s;
                out.data_mut()[i + 1] *= s;
            }
        }
        Ok(SensitivityMaps(out))
    }

    /// Unit maps for a single coil.
    pub fn single_coil_unit(nx: usize, ny: usize) -> Self {
        SensitivityMaps(Tensor::ones(&[1, nx, ny]).to_complex())
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn coils(&self) -> usize {
        self.0.shape()[0]
    }
}

/// Largest `|Σ_k |S^k(p)|² − 1|` over pixels where any coil is nonzero.
pub fn rss_deviation(maps: &Tensor) -> f64 {
    let (nc, plane) = (maps.shape()[0], maps.shape()[1] * maps.shape()[2]);
    let mut worst = 0.0f64;
    for p in 0..plane {
        let s: f64 = (0..nc)
            .map(|k| {
                let i = 2 * (k * plane + p);
                maps.data()[i].powi(2) + maps.data()[i + 1].powi(2)
            })
            .sum();
        if s > 0.0 {
            worst = worst.max((s - 1.0).abs());
        }
    }
    worst
}

impl ComplexImage {
    pub fn new(data: Tensor) -> Result<Self> {
        if data.ndim() != 3 || data.shape()[2] != 2 {
            return Err(Error::shape(
                "image",
                format!("expected (n_x, n_y, 2), got {:?}", data.shape()),
            ));
        }
        if !data.all_finite() {
            return Err(Error::NonFinite("in complex image".into()));
        }
        Ok(ComplexImage(data))
    }

    pub fn from_real(real: &Tensor) -> Result<Self> {
        ComplexImage::new(real.to_complex())
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.0.shape()[0], self.0.shape()[1])
    }

    pub fn magnitude(&self) -> Tensor {
        self.0.complex_abs().expect("complex image")
    }
}

fn check_mask(op: &'static str, mask: &SamplingMask, nx: usize, ny: usize) -> Result<()> {
    if (mask.nx(), mask.ny()) != (nx, ny) {
        return Err(Error::shape(
            op,
            format!("mask {}x{} vs data {nx}x{ny}", mask.nx(), mask.ny()),
        ));
    }
    Ok(())
}

fn check_maps(
    op: &'static str,
    maps: &SensitivityMaps,
    nc: Option<usize>,
    nx: usize,
    ny: usize,
) -> Result<()> {
    let s = maps.tensor().shape();
    if (s[1], s[2]) != (nx, ny) || nc.is_some_and(|c| c != s[0]) {
        return Err(Error::shape(
            op,
            format!("maps {s:?} vs data {nc:?}x{nx}x{ny}"),
        ));
    }
    Ok(())
}

fn complex_mul_plain(a: &[f64], b: &[f64], conj_b: bool) -> (f64, f64) {
    let bi = if conj_b { -b[1] } else { b[1] };
    (a[0] * b[0] - a[1] * bi, a[0] * bi + a[1] * b[0])
}

/// Root-sum-of-squares combination `(Σ_k |F⁻¹ y^k|²)^{1/2}`, shape `(n_x, n_y)`.
pub fn rss_reconstruct(y: &MultiCoilKSpace) -> Tensor {
    let coil_images = ifft2c(y.tensor()).expect("validated k-space");
    rss_combine(&coil_images)
}

/// RSS over the coil axis of `(n_c, n_x, n_y, 2)` coil images.
pub fn rss_combine(coil_images: &Tensor) -> Tensor {
    let (nc, nx, ny) = (
        coil_images.shape()[0],
        coil_images.shape()[1],
        coil_images.shape()[2],
    );
    let plane = nx * ny;
    let d = coil_images.data();
    Tensor::from_fn(&[nx, ny], |p| {
        (0..nc)
            .map(|k| d[2 * (k * plane + p)].powi(2) + d[2 * (k * plane + p) + 1].powi(2))
            .sum::<f64>()
            .sqrt()
    })
}

/// Expand: `S^k · x` for every coil.
pub fn expand(x: &ComplexImage, maps: &SensitivityMaps) -> Result<Tensor> {
    let (nx, ny) = x.dims();
    check_maps("expand", maps, None, nx, ny)?;
    let s = maps.tensor();
    let mut out = vec![0.0; s.len()];
    for (o, (sc, xc)) in out.chunks_exact_mut(2).zip(
        s.data()
            .chunks_exact(2)
            .zip(x.tensor().data().chunks_exact(2).cycle()),
    ) {
        let (re, im) = complex_mul_plain(sc, xc, false);
        o[0] = re;
        o[1] = im;
    }
    Ok(Tensor::from_parts(s.shape().to_vec(), out))
}

/// Reduce: `Σ_k conj(S^k) · x^k`.
pub fn reduce(coil_images: &Tensor, maps: &SensitivityMaps) -> Result<ComplexImage> {
    check_multicoil("reduce", coil_images)?;
    let (nc, nx, ny) = (
        coil_images.shape()[0],
        coil_images.shape()[1],
        coil_images.shape()[2],
    );
    check_maps("reduce", maps, Some(nc), nx, ny)?;
    let plane = nx * ny;
    let mut out = vec![0.0; plane * 2];
    for k in 0..nc {
        for p in 0..plane {
            let i = 2 * (k * plane + p);
            let (re, im) = complex_mul_plain(
                &coil_images.data()[i..i + 2],
                &maps.tensor().data()[i..i + 2],
                true,
            );
            out[2 * p] += re;
            out[2 * p + 1] += im;
        }
    }
    ComplexImage::new(Tensor::from_parts(vec![nx, ny, 2], out))
}

/// SENSE combination `|Σ_k conj(S^k) F⁻¹ y^k|`.
pub fn sense_reconstruct(y: &MultiCoilKSpace, maps: &SensitivityMaps) -> Result<Tensor> {
    if y.coils() != maps.coils() {
        return Err(Error::shape(
            "sense_reconstruct",
            format!("{} coils vs {} maps", y.coils(), maps.coils()),
        ));
    }
    Ok(reduce(&ifft2c(y.tensor())?, maps)?.magnitude())
}

pub fn apply_mask(y: &MultiCoilKSpace, mask: &SamplingMask) -> Result<MultiCoilKSpace> {
    let (nx, ny) = y.dims();
    check_mask("apply_mask", mask, nx, ny)?;
    Ok(MultiCoilKSpace(crate::autograd::apply_mask_kernel(
        y.tensor(),
        mask.grid(),
    )))
}

/// `A_{M,S}(x) = U_M F E_S x`.
pub fn forward_operator(
    x: &ComplexImage,
    mask: &SamplingMask,
    maps: &SensitivityMaps,
) -> Result<MultiCoilKSpace> {
    let (nx, ny) = x.dims();
    check_mask("forward_operator", mask, nx, ny)?;
    let k = MultiCoilKSpace(fft2c(&expand(x, maps)?)?);
    apply_mask(&k, mask)
}

/// `A*_{M,S}(y) = R_S F⁻¹ U_M y`.
pub fn adjoint_operator(
    y: &MultiCoilKSpace,
    mask: &SamplingMask,
    maps: &SensitivityMaps,
) -> Result<ComplexImage> {
    let (nx, ny) = y.dims();
    check_mask("adjoint_operator", mask, nx, ny)?;
    check_maps("adjoint_operator", maps, Some(y.coils()), nx, ny)?;
    reduce(&ifft2c(apply_mask(y, mask)?.tensor())?, maps)
}

/// `A_{M,S}(x) + e` with complex Gaussian noise of per-component standard
/// deviation `sigma`, added on sampled locations only.
pub fn simulate_acquisition(
    x: &ComplexImage,
    mask: &SamplingMask,
    maps: &SensitivityMaps,
    sigma: f64,
    seed: u64,
) -> Result<MultiCoilKSpace> {
    if !(sigma >= 0.0) {
        return Err(Error::invalid(format!(
            "noise sigma must be >= 0, got {sigma}"
        )));
    }
    let mut y = forward_operator(x, mask, maps)?.into_tensor();
    if sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, sigma).expect("sigma checked");
        let plane = mask.grid().len();
        let grid = mask.grid().clone();
        for (i, c) in y.data_mut().chunks_exact_mut(2).enumerate() {
            if grid.data()[i % plane] == 1.0 {
                c[0] += noise.sample(&mut rng);
                c[1] += noise.sample(&mut rng);
            }
        }
    }
    MultiCoilKSpace::new(y)
}

// Differentiable counterparts. Shapes follow the plain versions.

/// `E_S`: `(n_x, n_y, 2)` image and `(n_c, n_x, n_y, 2)` maps to coil images.
pub fn expand_var<'t>(x: Var<'t>, maps: Var<'t>) -> Result<Var<'t>> {
    maps.complex_mul(x)
}

/// `R_S`: coil images to one image.
pub fn reduce_var<'t>(coil_images: Var<'t>, maps: Var<'t>) -> Result<Var<'t>> {
    coil_images.complex_mul(maps.complex_conj()?)?.sum_axis(0)
}

/// `F ∘ E_S` (no subsampling).
pub fn image_to_kspace<'t>(x: Var<'t>, maps: Var<'t>) -> Result<Var<'t>> {
    expand_var(x, maps)?.fft2c()
}

/// `R_S ∘ F⁻¹` (no subsampling).
pub fn kspace_to_image<'t>(y: Var<'t>, maps: Var<'t>) -> Result<Var<'t>> {
    reduce_var(y.ifft2c()?, maps)
}

pub fn forward_var<'t>(x: Var<'t>, mask: &Arc<Tensor>, maps: Var<'t>) -> Result<Var<'t>> {
    image_to_kspace(x, maps)?.mask_apply(mask)
}

pub fn adjoint_var<'t>(y: Var<'t>, mask: &Arc<Tensor>, maps: Var<'t>) -> Result<Var<'t>> {
    kspace_to_image(y.mask_apply(mask)?, maps)
}

/// `RSS ∘ F⁻¹` on the tape, shape `(n_x, n_y)`.
pub fn rss_var(y: Var<'_>) -> Result<Var<'_>> {
    let coil = y.ifft2c()?;
    let nd = coil.shape().len();
    coil.square()?.sum_axis(nd - 1)?.sum_axis(0)?.sqrt()
}

/// Data consistency `DC_M(w1, w2) = U_M(w1) + U_{M^c}(w2)`.
pub fn dc_var<'t>(w1: Var<'t>, w2: Var<'t>, mask: &Arc<Tensor>) -> Result<Var<'t>> {
    if w1.shape() != w2.shape() {
        return Err(Error::shape(
            "dc",
            format!("{:?} vs {:?}", w1.shape(), w2.shape()),
        ));
    }
    let complement = Arc::new(mask.map(|v| 1.0 - v));
    w1.mask_apply(mask)?.add(w2.mask_apply(&complement)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::sampling::make_random_uniform_mask;
    use crate::tensor::complex_inner;
    use rand::Rng;

    fn rand_t(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn rand_maps(nc: usize, nx: usize, ny: usize, seed: u64) -> SensitivityMaps {
        SensitivityMaps::normalized(rand_t(&[nc, nx, ny, 2], seed)).unwrap()
    }

    /// Direct O(n²) inverse centered DFT of one plane, for the RSS oracle.
    fn idft_plane(x: &[f64], nx: usize, ny: usize) -> Vec<f64> {
        let (cx, cy) = ((nx / 2) as f64, (ny / 2) as f64);
        let mut out = vec![0.0; nx * ny * 2];
        for p in 0..nx {
            for q in 0..ny {
                let (mut re, mut im) = (0.0, 0.0);
                for u in 0..nx {
                    for v in 0..ny {
                        let ph = 2.0
                            * std::f64::consts::PI
                            * ((u as f64 - cx) * (p as f64 - cx) / nx as f64
                                + (v as f64 - cy) * (q as f64 - cy) / ny as f64);
                        let (a, b) = (x[2 * (u * ny + v)], x[2 * (u * ny + v) + 1]);
                        re += a * ph.cos() - b * ph.sin();
                        im += a * ph.sin() + b * ph.cos();
                    }
                }
                let s = 1.0 / ((nx * ny) as f64).sqrt();
                out[2 * (p * ny + q)] = re * s;
                out[2 * (p * ny + q) + 1] = im * s;
            }
        }
        out
    }

    #[test]
    fn rss_matches_direct_dft_oracle() {
        let (nc, n) = (4, 16);
        let y = MultiCoilKSpace::new(rand_t(&[nc, n, n, 2], 1)).unwrap();
        let got = rss_reconstruct(&y);
        let plane = n * n * 2;
        let coils: Vec<Vec<f64>> = (0..nc)
            .map(|k| idft_plane(&y.tensor().data()[k * plane..(k + 1) * plane], n, n))
            .collect();
        for p in 0..n * n {
            let want: f64 = coils
                .iter()
                .map(|c| c[2 * p].powi(2) + c[2 * p + 1].powi(2))
                .sum::<f64>()
                .sqrt();
            assert!((got.data()[p] - want).abs() < 1e-9);
        }
    }

    #[test]
    fn rss_single_coil_is_modulus_and_zero_maps_to_zero() {
        let m = rand_t(&[8, 8, 2], 2);
        let y = MultiCoilKSpace::new(fft2c(&m).unwrap().reshape(&[1, 8, 8, 2]).unwrap()).unwrap();
        let got = rss_reconstruct(&y);
        assert!(got.max_abs_diff(&m.complex_abs().unwrap()).unwrap() < 1e-10);
        let z = MultiCoilKSpace::new(Tensor::zeros(&[3, 8, 8, 2])).unwrap();
        assert_eq!(rss_reconstruct(&z), Tensor::zeros(&[8, 8]));
    }

    #[test]
    fn sense_recovers_real_nonnegative_image() {
        let x = ComplexImage::from_real(&rand_t(&[8, 8], 3).map(f64::abs)).unwrap();
        let maps = rand_maps(3, 8, 8, 4);
        let y = MultiCoilKSpace::new(fft2c(&expand(&x, &maps).unwrap()).unwrap()).unwrap();
        let got = sense_reconstruct(&y, &maps).unwrap();
        assert!(got.max_abs_diff(&x.magnitude()).unwrap() < 1e-9);
        let z = MultiCoilKSpace::new(Tensor::zeros(&[3, 8, 8, 2])).unwrap();
        assert_eq!(
            sense_reconstruct(&z, &maps).unwrap(),
            Tensor::zeros(&[8, 8])
        );
        assert!(sense_reconstruct(&z, &rand_maps(2, 8, 8, 5)).is_err());
    }

    #[test]
    fn sense_matches_loop_oracle() {
        let (nc, n) = (2, 6);
        let y = MultiCoilKSpace::new(rand_t(&[nc, n, n, 2], 6)).unwrap();
        let maps = rand_maps(nc, n, n, 7);
        let coil = ifft2c(y.tensor()).unwrap();
        let (c, s) = (coil.data(), maps.tensor().data());
        let got = sense_reconstruct(&y, &maps).unwrap();
        for p in 0..n * n {
            let (mut re, mut im) = (0.0, 0.0);
            for k in 0..nc {
                let i = 2 * (k * n * n + p);
                re += c[i] * s[i] + c[i + 1] * s[i + 1];
                im += c[i + 1] * s[i] - c[i] * s[i + 1];
            }
            assert!((got.data()[p] - re.hypot(im)).abs() < 1e-12);
        }
    }

    #[test]
    fn mask_examples() {
        let y = MultiCoilKSpace::new(rand_t(&[2, 8, 8, 2], 8)).unwrap();
        assert_eq!(apply_mask(&y, &SamplingMask::full(8, 8)).unwrap(), y);
        let zero = SamplingMask::new(Tensor::zeros(&[8, 8]), None, None).unwrap();
        assert_eq!(
            apply_mask(&y, &zero).unwrap().tensor(),
            &Tensor::zeros(&[2, 8, 8, 2])
        );
        let m = make_random_uniform_mask(8, 8, 2.0, 0.25, 1).unwrap();
        let once = apply_mask(&y, &m).unwrap();
        assert_eq!(apply_mask(&once, &m).unwrap(), once);
        assert!(apply_mask(&y, &SamplingMask::full(8, 4)).is_err());
    }

    #[test]
    fn forward_and_adjoint_special_cases() {
        let (nx, ny) = (8, 6);
        let x = ComplexImage::new(rand_t(&[nx, ny, 2], 9)).unwrap();
        let full = SamplingMask::full(nx, ny);
        let unit = SensitivityMaps::single_coil_unit(nx, ny);
        let k = forward_operator(&x, &full, &unit).unwrap();
        let want = fft2c(x.tensor()).unwrap().reshape(&[1, nx, ny, 2]).unwrap();
        assert!(k.tensor().max_abs_diff(&want).unwrap() < 1e-14);

        let y = MultiCoilKSpace::new(rand_t(&[1, nx, ny, 2], 10)).unwrap();
        let back = adjoint_operator(&y, &full, &unit).unwrap();
        let want = ifft2c(&y.tensor().index_axis0(0).unwrap()).unwrap();
        assert!(back.tensor().max_abs_diff(&want).unwrap() < 1e-14);

        let maps = rand_maps(3, nx, ny, 11);
        let zero = ComplexImage::new(Tensor::zeros(&[nx, ny, 2])).unwrap();
        assert_eq!(
            forward_operator(&zero, &full, &maps).unwrap().tensor(),
            &Tensor::zeros(&[3, nx, ny, 2])
        );
        let zy = MultiCoilKSpace::new(Tensor::zeros(&[3, nx, ny, 2])).unwrap();
        assert_eq!(
            adjoint_operator(&zy, &full, &maps).unwrap().tensor(),
            &Tensor::zeros(&[nx, ny, 2])
        );
    }

    #[test]
    fn tape_operators_match_plain_operators() {
        let (nc, n) = (3, 8);
        let x = ComplexImage::new(rand_t(&[n, n, 2], 12)).unwrap();
        let maps = rand_maps(nc, n, n, 13);
        let m = make_random_uniform_mask(n, n, 2.0, 0.25, 3).unwrap();
        let y = MultiCoilKSpace::new(rand_t(&[nc, n, n, 2], 14)).unwrap();
        let tape = Tape::new();
        let (xv, sv, yv) = (
            tape.constant(x.tensor().clone()),
            tape.constant(maps.tensor().clone()),
            tape.constant(y.tensor().clone()),
        );
        let a = forward_var(xv, m.grid(), sv).unwrap().value();
        assert!(
            a.max_abs_diff(forward_operator(&x, &m, &maps).unwrap().tensor())
                .unwrap()
                < 1e-14
        );
        let b = adjoint_var(yv, m.grid(), sv).unwrap().value();
        assert!(
            b.max_abs_diff(adjoint_operator(&y, &m, &maps).unwrap().tensor())
                .unwrap()
                < 1e-14
        );
        let r = rss_var(yv).unwrap().value();
        assert!(r.max_abs_diff(&rss_reconstruct(&y)).unwrap() < 1e-14);
    }

    #[test]
    fn adjointness() {
        let (nc, nx, ny) = (3, 8, 10);
        let x = ComplexImage::new(rand_t(&[nx, ny, 2], 15)).unwrap();
        let y = MultiCoilKSpace::new(rand_t(&[nc, nx, ny, 2], 16)).unwrap();
        let maps = rand_maps(nc, nx, ny, 17);
        let m = make_random_uniform_mask(nx, ny, 2.0, 0.2, 4).unwrap();
        let lhs = complex_inner(
            forward_operator(&x, &m, &maps).unwrap().tensor(),
            y.tensor(),
        )
        .unwrap()
        .0;
        let rhs = complex_inner(
            x.tensor(),
            adjoint_operator(&y, &m, &maps).unwrap().tensor(),
        )
        .unwrap()
        .0;
        assert!((lhs - rhs).abs() / lhs.abs().max(rhs.abs()) < 1e-10);
    }

    #[test]
    fn acquisition_noise() {
        let n = 16;
        let x = ComplexImage::new(rand_t(&[n, n, 2], 18)).unwrap();
        let maps = rand_maps(2, n, n, 19);
        let m = make_random_uniform_mask(n, n, 2.0, 0.25, 5).unwrap();
        let clean = simulate_acquisition(&x, &m, &maps, 0.0, 1).unwrap();
        assert_eq!(clean, forward_operator(&x, &m, &maps).unwrap());
        let a = simulate_acquisition(&x, &m, &maps, 0.1, 7).unwrap();
        let b = simulate_acquisition(&x, &m, &maps, 0.1, 7).unwrap();
        assert_eq!(a, b);
        assert!(simulate_acquisition(&x, &m, &maps, -1.0, 0).is_err());
        // Unsampled entries stay exactly zero.
        let plane = n * n;
        for (i, c) in a.tensor().data().chunks_exact(2).enumerate() {
            if m.grid().data()[i % plane] == 0.0 {
                assert_eq!(c, [0.0, 0.0]);
            }
        }
    }

    #[test]
    fn noise_std_matches_sigma() {
        // 64×64 full mask, 13 coils: 2·13·4096 ≈ 1.06e5 noise samples.
        let n = 64;
        let x = ComplexImage::new(Tensor::zeros(&[n, n, 2])).unwrap();
        let maps = rand_maps(13, n, n, 20);
        let y = simulate_acquisition(&x, &SamplingMask::full(n, n), &maps, 0.1, 3).unwrap();
        let d = y.tensor().data();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (d.len() - 1) as f64;
        assert!(d.len() >= 100_000);
        assert!((var.sqrt() / 0.1 - 1.0).abs() < 0.02, "{}", var.sqrt());
    }

    #[test]
    fn normalized_maps_and_validation() {
        let maps = rand_maps(4, 8, 8, 21);
        assert!(rss_deviation(maps.tensor()) < 1e-12);
        assert!(SensitivityMaps::new(maps.tensor().clone()).is_ok());
        assert!(SensitivityMaps::new(maps.tensor().scale(2.0)).is_err());
        let zeros = SensitivityMaps::normalized(Tensor::zeros(&[2, 4, 4, 2])).unwrap();
        assert_eq!(zeros.tensor(), &Tensor::zeros(&[2, 4, 4, 2]));
    }

    #[test]
    fn dc_identities() {
        let tape = Tape::new();
        let w1 = tape.constant(rand_t(&[2, 6, 6, 2], 22));
        let w2 = tape.constant(rand_t(&[2, 6, 6, 2], 23));
        let m = make_random_uniform_mask(6, 6, 2.0, 0.34, 1).unwrap();
        let full = SamplingMask::full(6, 6);
        let empty = SamplingMask::new(Tensor::zeros(&[6, 6]), None, None).unwrap();
        assert_eq!(*dc_var(w1, w2, full.grid()).unwrap().value(), *w1.value());
        assert_eq!(*dc_var(w1, w2, empty.grid()).unwrap().value(), *w2.value());
        let d = dc_var(w1, w2, m.grid()).unwrap();
        assert_eq!(
            *d.mask_apply(m.grid()).unwrap().value(),
            *w1.mask_apply(m.grid()).unwrap().value()
        );
        let dd = dc_var(w1, d, m.grid()).unwrap();
        assert_eq!(*dd.value(), *d.value());
    }
}
