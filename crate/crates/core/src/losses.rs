//! Image-quality metrics and the dual-domain training losses.
//!
//! Every metric has a differentiable form taking [`Var`]s and a plain form
//! taking [`Tensor`]s; the plain forms run the same graph on a throwaway
//! tape. Real images are `(n_x, n_y)`; k-space tensors are compared as real
//! arrays, so complex values contribute `|re| + |im|` to 1-norms.

use std::sync::{Arc, OnceLock};

use crate::autograd::{Pad2, PadMode, Tape, Var};
use crate::error::{Error, Result};
use crate::models::{BoundParams, ModelInput, Reconstructor};
use crate::mri::{self, MultiCoilKSpace};
use crate::sampling::SamplingMask;
use crate::tensor::Tensor;

/// SSIM window side.
pub const SSIM_WINDOW: usize = 7;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Laplacian-of-Gaussian kernel side and width for HFEN.
pub const LOG_SIZE: usize = 15;
pub const LOG_SIGMA: f64 = 2.5;

/// Group weights of the composite losses.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    /// Multiplies `(1 − SSIM) + L1` in the image loss.
    pub image_group: f64,
    /// Multiplies `NMSE + NMAE` in the k-space loss.
    pub kspace_group: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            image_group: 2.0,
            kspace_group: 2.0,
        }
    }
}

fn check_pair(op: &'static str, a: &Var<'_>, b: &Var<'_>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn check_image(op: &'static str, a: &Var<'_>, min_side: usize) -> Result<(usize, usize)> {
    let s = a.shape();
    if s.len() != 2 || s[0] < min_side || s[1] < min_side {
        return Err(Error::shape(
            op,
            format!("expected a 2-D image of side >= {min_side}, got {s:?}"),
        ));
    }
    Ok((s[0], s[1]))
}

/// Data range `max − min` of a reference image, or 1 for a constant image.
pub fn data_range(reference: &Tensor) -> f64 {
    let l = reference.max() - reference.min();
    if l > 0.0 {
        l
    } else {
        1.0
    }
}

fn box_filter<'t>(x: Var<'t>, kernel: Var<'t>) -> Result<Var<'t>> {
    let (h, w) = (x.shape()[0], x.shape()[1]);
    let out = x.reshape(&[1, h, w])?.conv2d(kernel, 1)?;
    let (oh, ow) = (out.shape()[1], out.shape()[2]);
    out.reshape(&[oh, ow])
}

/// Mean SSIM over all 7×7 windows (stride 1, uniform weights, sample
/// covariance) with stabilizers derived from `range`.
pub fn ssim_var<'t>(a: Var<'t>, b: Var<'t>, range: f64) -> Result<Var<'t>> {
    check_pair("ssim", &a, &b)?;
    check_image("ssim", &a, SSIM_WINDOW)?;
    if !(range > 0.0) {
        return Err(Error::invalid(format!(
            "SSIM data range must be positive, got {range}"
        )));
    }
    let np = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let tape = a.tape();
    let kernel = tape.constant(Tensor::full(&[1, 1, SSIM_WINDOW, SSIM_WINDOW], 1.0 / np));
    let cov_norm = np / (np - 1.0);
    let c1 = (SSIM_K1 * range).powi(2);
    let c2 = (SSIM_K2 * range).powi(2);

    let mu_a = box_filter(a, kernel)?;
    let mu_b = box_filter(b, kernel)?;
    let e_aa = box_filter(a.square()?, kernel)?;
    let e_bb = box_filter(b.square()?, kernel)?;
    let e_ab = box_filter(a.mul(b)?, kernel)?;
    let mu_ab = mu_a.mul(mu_b)?;
    let (mu_aa, mu_bb) = (mu_a.square()?, mu_b.square()?);
    let var_a = e_aa.sub(mu_aa)?.scalar_mul(cov_norm)?;
    let var_b = e_bb.sub(mu_bb)?.scalar_mul(cov_norm)?;
    let cov = e_ab.sub(mu_ab)?.scalar_mul(cov_norm)?;

    let num = mu_ab
        .scalar_mul(2.0)?
        .add_scalar(c1)?
        .mul(cov.scalar_mul(2.0)?.add_scalar(c2)?)?;
    let den = mu_aa
        .add(mu_bb)?
        .add_scalar(c1)?
        .mul(var_a.add(var_b)?.add_scalar(c2)?)?;
    num.div(den)?.mean()
}

/// SSIM of `a` against the reference `b`, with range taken from `b`.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    ssim_with_range(a, b, data_range(b))
}

pub fn ssim_with_range(a: &Tensor, b: &Tensor, range: f64) -> Result<f64> {
    let tape = Tape::new();
    ssim_var(tape.constant(a.clone()), tape.constant(b.clone()), range)?
        .value()
        .item()
}

/// 15×15 Laplacian-of-Gaussian kernel with σ = 2.5, shifted to zero sum.
pub fn log_kernel() -> &'static Arc<Tensor> {
    static KERNEL: OnceLock<Arc<Tensor>> = OnceLock::new();
    KERNEL.get_or_init(|| {
        let n = LOG_SIZE;
        let c = (n / 2) as f64;
        let s2 = LOG_SIGMA * LOG_SIGMA;
        let r2 = |i: usize| {
            let (y, x) = ((i / n) as f64 - c, (i % n) as f64 - c);
            x * x + y * y
        };
        let g: Vec<f64> = (0..n * n).map(|i| (-r2(i) / (2.0 * s2)).exp()).collect();
        let total: f64 = g.iter().sum();
        let h: Vec<f64> = (0..n * n)
            .map(|i| g[i] / total * (r2(i) - 2.0 * s2) / (s2 * s2))
            .collect();
        let mean = h.iter().sum::<f64>() / (n * n) as f64;
        Arc::new(Tensor::from_fn(&[1, 1, n, n], |i| h[i] - mean))
    })
}

/// LoG-filtered image, same size as the input, reflect-padded.
pub fn log_filter<'t>(x: Var<'t>) -> Result<Var<'t>> {
    let (h, w) = check_image("log_filter", &x, LOG_SIZE / 2 + 1)?;
    let kernel = x.tape().constant((**log_kernel()).clone());
    let padded = x
        .reshape(&[1, h, w])?
        .pad(Pad2::uniform(LOG_SIZE / 2), PadMode::Reflect)?;
    padded.conv2d(kernel, 1)?.reshape(&[h, w])
}

fn norm_k<'t>(x: Var<'t>, k: u8) -> Result<Var<'t>> {
    match k {
        1 => x.abs()?.sum(),
        2 => x.square()?.sum()?.sqrt(),
        _ => Err(Error::invalid(format!(
            "HFEN order must be 1 or 2, got {k}"
        ))),
    }
}

/// `‖G(a) − G(b)‖_k / ‖G(b)‖_k`.
pub fn hfen_var<'t>(a: Var<'t>, b: Var<'t>, k: u8) -> Result<Var<'t>> {
    check_pair("hfen", &a, &b)?;
    let (ga, gb) = (log_filter(a)?, log_filter(b)?);
    let den = norm_k(gb, k)?;
    // A flat image filters to rounding noise only.
    let scale = norm_k(b, k)?.value().data()[0];
    if den.value().data()[0] <= 1e-12 * scale {
        return Err(Error::invalid(
            "HFEN reference has no high-frequency content",
        ));
    }
    norm_k(ga.sub(gb)?, k)?.div(den)
}

pub fn hfen(a: &Tensor, b: &Tensor, k: u8) -> Result<f64> {
    let tape = Tape::new();
    hfen_var(tape.constant(a.clone()), tape.constant(b.clone()), k)?
        .value()
        .item()
}

fn reference_norm<'t>(op: &'static str, norm: Var<'t>) -> Result<Var<'t>> {
    if norm.value().data()[0] == 0.0 {
        return Err(Error::invalid(format!("{op}: reference has zero norm")));
    }
    Ok(norm)
}

/// `‖a − b‖²₂ / ‖a‖²₂` with `a` the reference.
pub fn nmse_var<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    check_pair("nmse", &a, &b)?;
    let den = reference_norm("nmse", a.square()?.sum()?)?;
    a.sub(b)?.square()?.sum()?.div(den)
}

/// `‖a − b‖₁ / ‖a‖₁` with `a` the reference.
pub fn nmae_var<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    check_pair("nmae", &a, &b)?;
    let den = reference_norm("nmae", a.abs()?.sum()?)?;
    a.sub(b)?.abs()?.sum()?.div(den)
}

/// Mean absolute error.
pub fn l1_var<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    check_pair("l1", &a, &b)?;
    a.sub(b)?.abs()?.mean()
}

fn plain(
    f: for<'t> fn(Var<'t>, Var<'t>) -> Result<Var<'t>>,
    a: &Tensor,
    b: &Tensor,
) -> Result<f64> {
    let tape = Tape::new();
    f(tape.constant(a.clone()), tape.constant(b.clone()))?
        .value()
        .item()
}

pub fn nmse(a: &Tensor, b: &Tensor) -> Result<f64> {
    plain(nmse_var, a, b)
}

pub fn nmae(a: &Tensor, b: &Tensor) -> Result<f64> {
    plain(nmae_var, a, b)
}

pub fn l1(a: &Tensor, b: &Tensor) -> Result<f64> {
    plain(l1_var, a, b)
}

/// `10·log₁₀(max(gt)² / mse(gt, pred))`; infinite for a perfect prediction.
pub fn psnr(gt: &Tensor, pred: &Tensor) -> Result<f64> {
    let diff = gt.sub(pred)?;
    let mse = diff.norm_sq() / diff.len() as f64;
    let peak = gt.max();
    if !(peak > 0.0) {
        return Err(Error::invalid("psnr: reference maximum must be positive"));
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// `w·(1 − SSIM + L1) + HFEN₁ + HFEN₂` of `pred` against `gt`.
pub fn image_loss_var<'t>(gt: Var<'t>, pred: Var<'t>, weights: &LossWeights) -> Result<Var<'t>> {
    check_pair("image_loss", &gt, &pred)?;
    let range = data_range(&gt.value());
    let s = ssim_var(pred, gt, range)?;
    let group = s
        .scalar_mul(-1.0)?
        .add_scalar(1.0)?
        .add(l1_var(gt, pred)?)?;
    group
        .scalar_mul(weights.image_group)?
        .add(hfen_var(pred, gt, 1)?)?
        .add(hfen_var(pred, gt, 2)?)
}

/// `w·(NMSE + NMAE)` of `pred` against `gt`.
pub fn kspace_loss_var<'t>(gt: Var<'t>, pred: Var<'t>, weights: &LossWeights) -> Result<Var<'t>> {
    nmse_var(gt, pred)?
        .add(nmae_var(gt, pred)?)?
        .scalar_mul(weights.kspace_group)
}

pub fn image_loss(gt: &Tensor, pred: &Tensor) -> Result<f64> {
    let tape = Tape::new();
    image_loss_var(
        tape.constant(gt.clone()),
        tape.constant(pred.clone()),
        &LossWeights::default(),
    )?
    .value()
    .item()
}

pub fn kspace_loss(gt: &Tensor, pred: &Tensor) -> Result<f64> {
    let tape = Tape::new();
    kspace_loss_var(
        tape.constant(gt.clone()),
        tape.constant(pred.clone()),
        &LossWeights::default(),
    )?
    .value()
    .item()
}

/// Fully-sampled training sample with its retrospective mask.
#[derive(Clone, Debug)]
pub struct SupervisedSample {
    pub kspace: MultiCoilKSpace,
    /// RSS ground-truth image `(n_x, n_y)`.
    pub gt: Tensor,
    pub mask: SamplingMask,
}

/// Subsampled sample `ỹ_M` split into disjoint Θ (loss) and Λ (input).
#[derive(Clone, Debug)]
pub struct SelfSupervisedSample {
    pub kspace: MultiCoilKSpace,
    pub mask: SamplingMask,
    pub theta: SamplingMask,
    pub lambda: SamplingMask,
}

impl SelfSupervisedSample {
    /// Checks `Θ ∩ Λ = ∅`, `Θ ∪ Λ = M` and that both parts are nonempty.
    pub fn new(
        kspace: MultiCoilKSpace,
        mask: SamplingMask,
        theta: SamplingMask,
        lambda: SamplingMask,
    ) -> Result<Self> {
        let (m, t, l) = (mask.grid(), theta.grid(), lambda.grid());
        if m.shape() != t.shape() || m.shape() != l.shape() {
            return Err(Error::shape(
                "partition",
                format!("{:?}, {:?}, {:?}", m.shape(), t.shape(), l.shape()),
            ));
        }
        if theta.count() == 0 || lambda.count() == 0 {
            return Err(Error::invalid("partition has an empty part"));
        }
        let ok = m
            .data()
            .iter()
            .zip(t.data())
            .zip(l.data())
            .all(|((m, t), l)| t * l == 0.0 && t + l == *m);
        if !ok {
            return Err(Error::invalid(
                "partition parts are not a disjoint split of the mask",
            ));
        }
        Ok(SelfSupervisedSample {
            kspace: mri::apply_mask(&kspace, &mask)?,
            mask,
            theta,
            lambda,
        })
    }
}

/// Supervised loss of one sample: image loss on `|f(x̃)|` plus k-space loss
/// on `DC_M(ỹ, F E_S f(x̃))` against the fully-sampled `y`.
pub fn sl_sample_loss<'t>(
    model: &dyn Reconstructor,
    params: &BoundParams<'t>,
    sample: &SupervisedSample,
    weights: &LossWeights,
) -> Result<Var<'t>> {
    let tape = params.tape();
    let input = ModelInput::from_acquisition(&sample.kspace, &sample.mask)?;
    let out = model.reconstruct(params, &input)?;
    let ytil = tape.constant(input.kspace.clone());
    let pred = mri::dc_var(
        ytil,
        mri::image_to_kspace(out.image, out.maps)?,
        &input.mask,
    )?;
    let kloss = kspace_loss_var(tape.constant(sample.kspace.tensor().clone()), pred, weights)?;
    let iloss = image_loss_var(
        tape.constant(sample.gt.clone()),
        out.image.complex_abs()?,
        weights,
    )?;
    iloss.add(kloss)
}

/// Self-supervised loss of one sample: the model sees `ỹ_Λ` and its
/// prediction restricted to Θ, `ŷ_ΘΛ`, is compared with `ỹ_Θ` in k-space and
/// `|R_S F⁻¹ ŷ_ΘΛ|` with `RSS F⁻¹ ỹ_Θ` in the image domain.
pub fn ssl_sample_loss<'t>(
    model: &dyn Reconstructor,
    params: &BoundParams<'t>,
    sample: &SelfSupervisedSample,
    weights: &LossWeights,
) -> Result<Var<'t>> {
    let tape = params.tape();
    let input = ModelInput::from_partition(&sample.kspace, &sample.mask, &sample.lambda)?;
    let out = model.reconstruct(params, &input)?;
    let y_lambda = tape.constant(input.kspace.clone());
    let pred = mri::dc_var(
        y_lambda,
        mri::image_to_kspace(out.image, out.maps)?,
        &input.mask,
    )?;
    let pred_theta = pred.mask_apply(sample.theta.grid())?;
    let y_theta = mri::apply_mask(&sample.kspace, &sample.theta)?;
    let kloss = kspace_loss_var(tape.constant(y_theta.tensor().clone()), pred_theta, weights)?;
    let x_theta = mri::rss_reconstruct(&y_theta);
    let x_hat = mri::kspace_to_image(pred_theta, out.maps)?.complex_abs()?;
    let iloss = image_loss_var(tape.constant(x_theta), x_hat, weights)?;
    kloss.add(iloss)
}

fn batch_mean<'t, S>(
    batch: &[S],
    mut f: impl FnMut(&S) -> Result<Var<'t>>,
) -> Result<Option<Var<'t>>> {
    if batch.is_empty() {
        return Ok(None);
    }
    let mut total = f(&batch[0])?;
    for s in &batch[1..] {
        total = total.add(f(s)?)?;
    }
    Ok(Some(total.scalar_mul(1.0 / batch.len() as f64)?))
}

/// Mean supervised loss over a proxy batch.
pub fn sl_loss<'t>(
    model: &dyn Reconstructor,
    params: &BoundParams<'t>,
    batch: &[SupervisedSample],
    weights: &LossWeights,
) -> Result<Var<'t>> {
    batch_mean(batch, |s| sl_sample_loss(model, params, s, weights))?
        .ok_or_else(|| Error::invalid("supervised batch is empty"))
}

/// Mean self-supervised loss over a target batch.
pub fn ssl_loss<'t>(
    model: &dyn Reconstructor,
    params: &BoundParams<'t>,
    batch: &[SelfSupervisedSample],
    weights: &LossWeights,
) -> Result<Var<'t>> {
    batch_mean(batch, |s| ssl_sample_loss(model, params, s, weights))?
        .ok_or_else(|| Error::invalid("self-supervised batch is empty"))
}

/// `sl_loss + ssl_loss`; either batch may be empty, not both.
pub fn jssl_loss<'t>(
    model: &dyn Reconstructor,
    params: &BoundParams<'t>,
    proxy: &[SupervisedSample],
    target: &[SelfSupervisedSample],
    weights: &LossWeights,
) -> Result<Var<'t>> {
    let sl = batch_mean(proxy, |s| sl_sample_loss(model, params, s, weights))?;
    let ssl = batch_mean(target, |s| ssl_sample_loss(model, params, s, weights))?;
    match (sl, ssl) {
        (Some(a), Some(b)) => a.add(b),
        (Some(a), None) => Ok(a),
        (None, Some(b)) => Ok(b),
        (None, None) => Err(Error::invalid("both proxy and target batches are empty")),
    }
}
