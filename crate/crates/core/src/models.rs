//! Toy-scale reconstruction networks.
//!
//! Every model first estimates coil maps from the ACS region of its input
//! and refines them with a small residual CNN (the SME), then runs one of
//! three reconstructors:
//!
//! * `vsharp`: unrolled ADMM with a learned denoiser z-step, a
//!   gradient-descent x-step and a multiplier u-step;
//! * `image_refiner`: residual CNN on the zero-filled image;
//! * `kspace_gd`: k-space gradient descent with a CNN correction term.
//!
//! Parameters live in a [`ParamStore`] and are bound to a [`Tape`] per step.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Pad2, PadMode, Tape, Var};
use crate::error::{Error, Result};
use crate::fft::ifft2c;
use crate::mri::{self, MultiCoilKSpace, SensitivityMaps};
use crate::sampling::SamplingMask;
use crate::tensor::Tensor;
use crate::tnsr;

/// Guard under the square root when renormalizing refined maps.
pub const SME_EPS: f64 = 1e-14;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Vsharp,
    ImageRefiner,
    KspaceGd,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [
        ModelKind::Vsharp,
        ModelKind::ImageRefiner,
        ModelKind::KspaceGd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Vsharp => "vsharp",
            ModelKind::ImageRefiner => "image_refiner",
            ModelKind::KspaceGd => "kspace_gd",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "vsharp" => Ok(ModelKind::Vsharp),
            "image_refiner" => Ok(ModelKind::ImageRefiner),
            "kspace_gd" => Ok(ModelKind::KspaceGd),
            _ => Err(Error::invalid(format!("unknown model kind '{s}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnrollConfig {
    /// Outer iterations.
    pub t: usize,
    /// Inner gradient steps of the vSHARP x-step.
    pub t_x: usize,
    pub channels: usize,
    /// Conv layers per CNN block.
    pub depth: usize,
}

impl Default for UnrollConfig {
    fn default() -> Self {
        UnrollConfig {
            t: 4,
            t_x: 4,
            channels: 8,
            depth: 3,
        }
    }
}

impl UnrollConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t == 0 || self.t_x == 0 {
            return Err(Error::invalid(format!(
                "T and T_x must be >= 1, got {} and {}",
                self.t, self.t_x
            )));
        }
        if self.channels == 0 || self.depth < 2 {
            return Err(Error::invalid(
                "CNN blocks need >= 1 channel and >= 2 layers",
            ));
        }
        Ok(())
    }
}

/// Named, ordered parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        match self.names.iter().position(|n| *n == name) {
            Some(i) => self.tensors[i] = value,
            None => {
                self.names.push(name);
                self.tensors.push(value);
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Adds `N(0, scale²)` noise to every entry; used to move off the
    /// zero-initialized residual layers in tests.
    pub fn jitter(&mut self, scale: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, scale).expect("finite scale");
        for t in &mut self.tensors {
            for v in t.data_mut() {
                *v += normal.sample(&mut rng);
            }
        }
    }

    /// Registers every tensor as a trainable leaf on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundParams<'t> {
        BoundParams {
            tape,
            vars: self.tensors.iter().map(|t| tape.param(t.clone())).collect(),
            index: self
                .names
                .iter()
                .enumerate()
                .map(|(i, n)| (n.clone(), i))
                .collect(),
        }
    }

    /// Same as [`bind`](Self::bind) but as constants, for inference.
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> BoundParams<'t> {
        BoundParams {
            tape,
            vars: self
                .tensors
                .iter()
                .map(|t| tape.constant(t.clone()))
                .collect(),
            index: self
                .names
                .iter()
                .enumerate()
                .map(|(i, n)| (n.clone(), i))
                .collect(),
        }
    }
}

/// Parameters registered on one tape.
pub struct BoundParams<'t> {
    tape: &'t Tape,
    vars: Vec<Var<'t>>,
    index: HashMap<String, usize>,
}

impl<'t> BoundParams<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::invalid(format!("missing parameter '{name}'")))
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }

    /// Gradients in store order.
    pub fn gradients(&self, grads: &Gradients) -> Vec<Tensor> {
        self.vars
            .iter()
            .map(|v| grads.get(*v).unwrap_or_else(|| Tensor::zeros(&v.shape())))
            .collect()
    }
}

/// What a model sees: masked k-space, its mask, and the region usable for
/// sensitivity estimation.
#[derive(Clone, Debug)]
pub struct ModelInput {
    pub kspace: Tensor,
    pub mask: Arc<Tensor>,
    pub acs: Arc<Tensor>,
}

impl ModelInput {
    /// `ỹ = U_M y` with the ACS band of `mask` (or all of `mask` when it
    /// carries no ACS metadata) as calibration region.
    pub fn from_acquisition(y: &MultiCoilKSpace, mask: &SamplingMask) -> Result<Self> {
        let kspace = mri::apply_mask(y, mask)?.into_tensor();
        let acs = match mask.acs_band_grid() {
            Some(band) => band.zip_map(mask.grid(), |a, b| a * b)?,
            None => (**mask.grid()).clone(),
        };
        Ok(ModelInput {
            kspace,
            mask: mask.grid().clone(),
            acs: Arc::new(acs),
        })
    }

    /// The Λ-projected input of a self-supervised sample: `ỹ_Λ` with the ACS
    /// band of `mask` restricted to Λ.
    pub fn from_partition(
        y: &MultiCoilKSpace,
        mask: &SamplingMask,
        lambda: &SamplingMask,
    ) -> Result<Self> {
        let kspace = mri::apply_mask(y, lambda)?.into_tensor();
        let band = mask
            .acs_band_grid()
            .unwrap_or_else(|| (**mask.grid()).clone());
        let acs = band.zip_map(lambda.grid(), |a, b| a * b)?;
        Ok(ModelInput {
            kspace,
            mask: lambda.grid().clone(),
            acs: Arc::new(acs),
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.kspace.shape();
        (s[0], s[1], s[2])
    }
}

/// Complex image `(n_x, n_y, 2)` and the coil maps it was reconstructed with.
#[derive(Clone, Copy)]
pub struct ModelOutput<'t> {
    pub image: Var<'t>,
    pub maps: Var<'t>,
}

/// Anything that maps a [`ModelInput`] to a [`ModelOutput`] on a tape.
pub trait Reconstructor {
    fn reconstruct<'t>(
        &self,
        params: &BoundParams<'t>,
        input: &ModelInput,
    ) -> Result<ModelOutput<'t>>;
}

/// Coil maps from the k-space inside `region`: per-coil inverse FFT
/// divided by the RSS. All-zero data yields all-zero maps.
pub fn estimate_sensitivities_in(y: &Tensor, region: &Tensor) -> Result<SensitivityMaps> {
    if region.sum() == 0.0 {
        return Err(Error::invalid(
            "empty ACS region; cannot estimate coil sensitivities",
        ));
    }
    let k = crate::autograd::apply_mask_kernel(y, region);
    SensitivityMaps::normalized(ifft2c(&k)?)
}

/// Initial maps from the ACS band of `mask`.
pub fn estimate_sensitivities(y: &MultiCoilKSpace, mask: &SamplingMask) -> Result<SensitivityMaps> {
    let band = mask
        .acs_band_grid()
        .ok_or_else(|| Error::invalid("mask has no ACS band"))?
        .zip_map(mask.grid(), |a, b| a * b)?;
    estimate_sensitivities_in(y.tensor(), &band)
}

fn to_channels(x: Var<'_>) -> Result<Var<'_>> {
    x.permute(&[2, 0, 1])
}

fn from_channels(x: Var<'_>) -> Result<Var<'_>> {
    x.permute(&[1, 2, 0])
}

fn broadcast<'t>(s: Var<'t>, shape: &[usize]) -> Result<Var<'t>> {
    s.reshape(&vec![1; shape.len()])?.expand(shape)
}

/// Same-size conv with bias.
fn conv_layer<'t>(
    x: Var<'t>,
    w: Var<'t>,
    b: Var<'t>,
    dilation: usize,
    mode: PadMode,
) -> Result<Var<'t>> {
    let k = w.shape()[2];
    let y = x
        .pad(Pad2::uniform(dilation * (k - 1) / 2), mode)?
        .conv2d(w, dilation)?;
    let s = y.shape();
    y.add(b.reshape(&[s[0], 1, 1])?.expand(&s)?)
}

/// Plain CNN `c_in → c → … → c_out` with ReLU between layers.
fn cnn<'t>(p: &BoundParams<'t>, prefix: &str, x: Var<'t>, depth: usize) -> Result<Var<'t>> {
    let mut h = x;
    for l in 0..depth {
        h = conv_layer(
            h,
            p.get(&format!("{prefix}.{l}.w"))?,
            p.get(&format!("{prefix}.{l}.b"))?,
            1,
            PadMode::Zero,
        )?;
        if l + 1 < depth {
            h = h.relu()?;
        }
    }
    Ok(h)
}

fn init_cnn(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    c_in: usize,
    c: usize,
    c_out: usize,
    depth: usize,
) {
    for l in 0..depth {
        let ci = if l == 0 { c_in } else { c };
        let co = if l + 1 == depth { c_out } else { c };
        let w = if l + 1 == depth {
            Tensor::zeros(&[co, ci, 3, 3])
        } else {
            he_normal(rng, &[co, ci, 3, 3])
        };
        store.insert(format!("{prefix}.{l}.w"), w);
        store.insert(format!("{prefix}.{l}.b"), Tensor::zeros(&[co]));
    }
}

fn he_normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive fan-in");
    Tensor::from_fn(shape, |_| normal.sample(rng))
}

/// SME: residual CNN on each coil map followed by RSS renormalization.
pub fn sme_refine<'t>(p: &BoundParams<'t>, initial: Var<'t>, depth: usize) -> Result<Var<'t>> {
    let s = initial.shape();
    let (nc, nx, ny) = (s[0], s[1], s[2]);
    let mut coils = Vec::with_capacity(nc);
    for k in 0..nc {
        let c = initial.slice(0, k, 1)?.reshape(&[nx, ny, 2])?;
        let r = from_channels(cnn(p, "sme", to_channels(c)?, depth)?)?;
        coils.push(c.add(r)?.reshape(&[1, nx, ny, 2])?);
    }
    let refined = Var::concat(&coils, 0)?;
    let rss = refined
        .square()?
        .sum_axis(3)?
        .sum_axis(0)?
        .add_scalar(SME_EPS)?
        .sqrt()?;
    refined.div(rss.reshape(&[1, nx, ny, 1])?.expand(&s)?)
}

/// `DC_M(w1, w2) = U_M(w1) + U_{M^c}(w2)`.
pub fn dc_operator<'t>(w1: Var<'t>, w2: Var<'t>, mask: &Arc<Tensor>) -> Result<Var<'t>> {
    mri::dc_var(w1, w2, mask)
}

/// Step size `η = 2/(1+μ)·sigmoid(θ)`, inside the stable range of the
/// x-step objective whose gradient is Lipschitz with constant `≤ 1 + μ`.
pub fn x_step_size<'t>(theta: Var<'t>, mu: Var<'t>) -> Result<Var<'t>> {
    let two = theta.tape().constant(Tensor::scalar(2.0));
    two.div(mu.add_scalar(1.0)?)?.mul(theta.sigmoid()?)
}

/// One gradient step on `½‖A x − ỹ‖² + (μ/2)‖x − z + u/μ‖²`.
#[allow(clippy::too_many_arguments)]
pub fn x_step<'t>(
    x: Var<'t>,
    z: Var<'t>,
    u: Var<'t>,
    mu: Var<'t>,
    eta: Var<'t>,
    y: Var<'t>,
    mask: &Arc<Tensor>,
    maps: Var<'t>,
) -> Result<Var<'t>> {
    let shape = x.shape();
    let residual = mri::forward_var(x, mask, maps)?.sub(y)?;
    let fidelity = mri::adjoint_var(residual, mask, maps)?;
    let grad = fidelity
        .add(broadcast(mu, &shape)?.mul(x.sub(z)?)?)?
        .add(u)?;
    x.sub(broadcast(eta, &shape)?.mul(grad)?)
}

/// Value of the x-step objective, for monitoring.
#[allow(clippy::too_many_arguments)]
pub fn x_step_objective<'t>(
    x: Var<'t>,
    z: Var<'t>,
    u: Var<'t>,
    mu: Var<'t>,
    y: Var<'t>,
    mask: &Arc<Tensor>,
    maps: Var<'t>,
) -> Result<Var<'t>> {
    let shape = x.shape();
    let fid = mri::forward_var(x, mask, maps)?.sub(y)?.square()?.sum()?;
    let shifted = x.sub(z)?.add(u.div(broadcast(mu, &shape)?)?)?;
    let prox = mu.mul(shifted.square()?.sum()?)?;
    fid.add(prox)?.scalar_mul(0.5)
}

fn ensure_finite(v: Var<'_>, what: &str) -> Result<()> {
    if v.value().all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// Unrolled ADMM. Returns `x_T`.
pub fn vsharp_forward<'t>(
    p: &BoundParams<'t>,
    cfg: &UnrollConfig,
    y: Var<'t>,
    mask: &Arc<Tensor>,
    maps: Var<'t>,
) -> Result<Var<'t>> {
    let x0 = mri::adjoint_var(y, mask, maps)?;
    let shape = x0.shape();
    let u0 = conv_layer(
        to_channels(x0)?,
        p.get("vsharp.u0.w")?,
        p.get("vsharp.u0.b")?,
        2,
        PadMode::Replicate,
    )?;
    let (mut x, mut z, mut u) = (x0, x0, from_channels(u0)?);
    for t in 0..cfg.t {
        let mu = p.get(&format!("vsharp.{t}.log_mu"))?.exp()?;
        let scaled_u = u.div(broadcast(mu, &shape)?)?;
        let h_in = Var::concat(
            &[to_channels(z)?, to_channels(x)?, to_channels(scaled_u)?],
            0,
        )?;
        z = z.add(from_channels(cnn(
            p,
            &format!("vsharp.{t}.denoiser"),
            h_in,
            cfg.depth,
        )?)?)?;
        let eta = x_step_size(p.get(&format!("vsharp.{t}.eta"))?, mu)?;
        for _ in 0..cfg.t_x {
            x = x_step(x, z, u, mu, eta, y, mask, maps)?;
        }
        u = u.add(broadcast(mu, &shape)?.mul(x.sub(z)?)?)?;
        ensure_finite(x, &format!("vsharp iteration {t}"))?;
    }
    Ok(x)
}

/// Residual CNN on the zero-filled image.
pub fn image_refiner_forward<'t>(
    p: &BoundParams<'t>,
    cfg: &UnrollConfig,
    x: Var<'t>,
) -> Result<Var<'t>> {
    x.add(from_channels(cnn(
        p,
        "refiner",
        to_channels(x)?,
        cfg.depth,
    )?)?)
}

/// `y_{t+1} = y_t − η_t U_M(y_t − ỹ) + F E_S CNN_t(R_S F⁻¹ y_t)`, returning
/// `R_S F⁻¹ y_T`.
pub fn kspace_gd_forward<'t>(
    p: &BoundParams<'t>,
    cfg: &UnrollConfig,
    y: Var<'t>,
    mask: &Arc<Tensor>,
    maps: Var<'t>,
) -> Result<Var<'t>> {
    let shape = y.shape();
    let mut yt = y;
    for t in 0..cfg.t {
        let eta = broadcast(p.get(&format!("kgd.{t}.eta"))?, &shape)?;
        let img = mri::kspace_to_image(yt, maps)?;
        let corr = from_channels(cnn(
            p,
            &format!("kgd.{t}.cnn"),
            to_channels(img)?,
            cfg.depth,
        )?)?;
        let fidelity = eta.mul(yt.sub(y)?.mask_apply(mask)?)?;
        yt = yt.sub(fidelity)?.add(mri::image_to_kspace(corr, maps)?)?;
        ensure_finite(yt, &format!("k-space step {t}"))?;
    }
    mri::kspace_to_image(yt, maps)
}

/// A reconstructor kind with its unroll configuration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub kind: ModelKind,
    pub cfg: UnrollConfig,
}

impl Model {
    pub fn new(kind: ModelKind, cfg: UnrollConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Model { kind, cfg })
    }

    /// Fresh parameters: He-normal hidden layers, zero final layers (every
    /// CNN starts as the identity residual), `μ = 1`, `η = 0.1`.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = self.cfg.channels;
        init_cnn(&mut store, &mut rng, "sme", 2, c, 2, self.cfg.depth);
        match self.kind {
            ModelKind::Vsharp => {
                store.insert("vsharp.u0.w", Tensor::zeros(&[2, 2, 3, 3]));
                store.insert("vsharp.u0.b", Tensor::zeros(&[2]));
                // sigmoid(θ)·2/(1+μ) = 0.1 at μ = 1.
                let theta = (0.1f64 / 0.9).ln();
                for t in 0..self.cfg.t {
                    init_cnn(
                        &mut store,
                        &mut rng,
                        &format!("vsharp.{t}.denoiser"),
                        6,
                        c,
                        2,
                        self.cfg.depth,
                    );
                    store.insert(format!("vsharp.{t}.log_mu"), Tensor::scalar(0.0));
                    store.insert(format!("vsharp.{t}.eta"), Tensor::scalar(theta));
                }
            }
            ModelKind::ImageRefiner => {
                init_cnn(&mut store, &mut rng, "refiner", 2, c, 2, self.cfg.depth)
            }
            ModelKind::KspaceGd => {
                for t in 0..self.cfg.t {
                    init_cnn(
                        &mut store,
                        &mut rng,
                        &format!("kgd.{t}.cnn"),
                        2,
                        c,
                        2,
                        self.cfg.depth,
                    );
                    store.insert(format!("kgd.{t}.eta"), Tensor::scalar(1.0));
                }
            }
        }
        store
    }

    /// Initial ACS maps refined by the SME.
    pub fn maps<'t>(&self, p: &BoundParams<'t>, input: &ModelInput) -> Result<Var<'t>> {
        let initial = estimate_sensitivities_in(&input.kspace, &input.acs)?;
        sme_refine(p, p.tape().constant(initial.into_tensor()), self.cfg.depth)
    }
}

/// Peak of the zero-filled RSS image, or 1 for all-zero input.
pub fn input_scale(kspace: &Tensor) -> Result<f64> {
    let peak = mri::rss_combine(&ifft2c(kspace)?).max();
    Ok(if peak > 0.0 { peak } else { 1.0 })
}

impl Reconstructor for Model {
    /// Runs the network on k-space divided by [`input_scale`] and rescales the
    /// image, so the learned weights see every sample at unit peak intensity.
    fn reconstruct<'t>(&self, p: &BoundParams<'t>, input: &ModelInput) -> Result<ModelOutput<'t>> {
        let maps = self.maps(p, input)?;
        let scale = input_scale(&input.kspace)?;
        let y = p.tape().constant(input.kspace.map(|v| v / scale));
        let image = match self.kind {
            ModelKind::Vsharp => vsharp_forward(p, &self.cfg, y, &input.mask, maps)?,
            ModelKind::ImageRefiner => {
                image_refiner_forward(p, &self.cfg, mri::adjoint_var(y, &input.mask, maps)?)?
            }
            ModelKind::KspaceGd => kspace_gd_forward(p, &self.cfg, y, &input.mask, maps)?,
        };
        Ok(ModelOutput {
            image: image.scalar_mul(scale)?,
            maps,
        })
    }
}

/// Inference path of a training setup.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InferenceMode {
    Sl,
    Ssl,
    Jssl,
}

/// Magnitude reconstruction `(n_x, n_y)`. SL and JSSL return `|f(x̃)|`; SSL
/// first re-imposes the acquired samples in k-space.
pub fn infer(
    mode: InferenceMode,
    model: &dyn Reconstructor,
    params: &ParamStore,
    input: &ModelInput,
) -> Result<Tensor> {
    let tape = Tape::new();
    let p = params.bind_frozen(&tape);
    let out = model.reconstruct(&p, input)?;
    let img = match mode {
        InferenceMode::Sl | InferenceMode::Jssl => out.image,
        InferenceMode::Ssl => {
            let y = tape.constant(input.kspace.clone());
            let pred = mri::image_to_kspace(out.image, out.maps)?;
            mri::kspace_to_image(dc_operator(y, pred, &input.mask)?, out.maps)?
        }
    };
    Ok((*img.complex_abs()?.value()).clone())
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    model_kind: ModelKind,
    cfg: UnrollConfig,
    #[serde(default)]
    meta: BTreeMap<String, String>,
    params: Vec<ParamEntry>,
}

/// A model, its parameters, and free-form string metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub params: ParamStore,
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    /// Writes `manifest.json` plus one `.tnsr` blob per parameter into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut params = Vec::with_capacity(self.params.len());
        for (i, (name, t)) in self
            .params
            .names()
            .iter()
            .zip(self.params.tensors())
            .enumerate()
        {
            let file = format!("p{i:03}.tnsr");
            tnsr::save(dir.join(&file), t)?;
            params.push(ParamEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                file,
            });
        }
        let manifest = Manifest {
            model_kind: self.model.kind,
            cfg: self.model.cfg,
            meta: self.meta.clone(),
            params,
        };
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        let model = Model::new(manifest.model_kind, manifest.cfg)?;
        let mut params = ParamStore::new();
        for entry in manifest.params {
            let t = tnsr::load(dir.join(&entry.file))?;
            if t.shape() != entry.shape.as_slice() {
                return Err(Error::format(
                    dir.join(&entry.file),
                    format!(
                        "shape {:?} does not match manifest {:?}",
                        t.shape(),
                        entry.shape
                    ),
                ));
            }
            params.insert(entry.name, t);
        }
        let expected = model.init_params(0);
        if expected.names() != params.names() {
            return Err(Error::format(
                &path,
                "parameter names do not match the model layout",
            ));
        }
        Ok(Checkpoint {
            model,
            params,
            meta: manifest.meta,
        })
    }
}
