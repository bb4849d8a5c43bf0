//! Training setups, batching, Adam and the training loop.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::data::{
    derive_seed, epoch_order, load_sample, DatasetManifest, Family, SampleRecord, Split,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, mean_ssim, EvalProtocol};
use crate::losses::{jssl_loss, LossWeights, SelfSupervisedSample, SupervisedSample};
use crate::models::{Checkpoint, InferenceMode, Model, ModelKind, ParamStore, UnrollConfig};
use crate::sampling::{
    acs_fraction_for, gaussian_partition, make_mask, sample_partition_ratio, MaskScheme,
    PartitionSpec, Phase, RatioMode, DEFAULT_PARTITION_SIGMA,
};
use crate::tensor::Tensor;
use crate::tnsr;

/// The six training setups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Setup {
    #[serde(rename = "ssl")]
    Ssl,
    #[serde(rename = "ssl-all")]
    SslAll,
    #[serde(rename = "sl")]
    Sl,
    #[serde(rename = "sl-all")]
    SlAll,
    #[serde(rename = "sl-proxy")]
    SlProxy,
    #[serde(rename = "jssl")]
    Jssl,
}

const PROXIES: [Family; 2] = [Family::ProxyA, Family::ProxyB];

impl Setup {
    pub const ALL: [Setup; 6] = [
        Setup::Ssl,
        Setup::SslAll,
        Setup::Sl,
        Setup::SlAll,
        Setup::SlProxy,
        Setup::Jssl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Setup::Ssl => "ssl",
            Setup::SslAll => "ssl-all",
            Setup::Sl => "sl",
            Setup::SlAll => "sl-all",
            Setup::SlProxy => "sl-proxy",
            Setup::Jssl => "jssl",
        }
    }

    pub fn inference_mode(self) -> InferenceMode {
        match self {
            Setup::Ssl | Setup::SslAll => InferenceMode::Ssl,
            Setup::Jssl => InferenceMode::Jssl,
            Setup::Sl | Setup::SlAll | Setup::SlProxy => InferenceMode::Sl,
        }
    }

    /// Families trained with the supervised loss.
    pub fn supervised_families(self) -> &'static [Family] {
        match self {
            Setup::Ssl | Setup::SslAll => &[],
            Setup::Sl => &[Family::Target],
            Setup::SlAll => &Family::ALL,
            Setup::SlProxy | Setup::Jssl => &PROXIES,
        }
    }

    /// Families trained with the self-supervised loss.
    pub fn self_supervised_families(self) -> &'static [Family] {
        match self {
            Setup::Ssl | Setup::Jssl => &[Family::Target],
            Setup::SslAll => &Family::ALL,
            Setup::Sl | Setup::SlAll | Setup::SlProxy => &[],
        }
    }

    /// Whether target ground truth enters training.
    pub fn uses_target_gt(self) -> bool {
        self.supervised_families().contains(&Family::Target)
    }
}

impl fmt::Display for Setup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Setup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('_', "-");
        Setup::ALL
            .into_iter()
            .find(|k| k.name() == norm)
            .ok_or_else(|| Error::invalid(format!("unknown setup '{s}'")))
    }
}

/// How the partition of every self-supervised sample is drawn.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionPolicy {
    pub mode: RatioMode,
    pub sigma: f64,
    pub acs_window: usize,
}

impl Default for PartitionPolicy {
    fn default() -> Self {
        PartitionPolicy {
            mode: RatioMode::Range,
            sigma: DEFAULT_PARTITION_SIGMA,
            acs_window: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub setup: Setup,
    pub model_kind: ModelKind,
    pub unroll: UnrollConfig,
    pub accelerations: Vec<u32>,
    pub scheme: MaskScheme,
    pub partition: PartitionPolicy,
    pub weights: LossWeights,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    /// Samples per loss term and step.
    pub batch_size: usize,
    pub max_iters: usize,
    pub seed: u64,
    pub log_every: usize,
    pub val_every: usize,
    /// Repetitions of each target training sample in its pool.
    pub target_oversample: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            setup: Setup::Jssl,
            model_kind: ModelKind::Vsharp,
            unroll: UnrollConfig::default(),
            accelerations: vec![4, 8],
            scheme: MaskScheme::Equispaced,
            partition: PartitionPolicy::default(),
            weights: LossWeights::default(),
            lr: 0.003,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay_factor: 0.8,
            decay_every: 2000,
            batch_size: 2,
            max_iters: 5000,
            seed: 0,
            log_every: 10,
            val_every: 250,
            target_oversample: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.unroll.validate()?;
        if self.accelerations.is_empty() {
            return Err(Error::invalid("no training accelerations"));
        }
        for &r in &self.accelerations {
            acs_fraction_for(r, Phase::Train)?;
        }
        let positive = [
            ("lr", self.lr),
            ("eps", self.eps),
            ("decay_factor", self.decay_factor),
        ];
        if let Some((name, v)) = positive.iter().find(|(_, v)| !(*v > 0.0)) {
            return Err(Error::invalid(format!("{name} must be positive, got {v}")));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(format!(
                    "{name} must lie in [0, 1), got {b}"
                )));
            }
        }
        if self.decay_every == 0
            || self.batch_size == 0
            || self.log_every == 0
            || self.val_every == 0
        {
            return Err(Error::invalid(
                "decay_every, batch_size, log_every and val_every must be >= 1",
            ));
        }
        if self.target_oversample == 0 {
            return Err(Error::invalid("target_oversample must be >= 1"));
        }
        if !(self.partition.sigma > 0.0) {
            return Err(Error::invalid("partition sigma must be positive"));
        }
        Ok(())
    }

    pub fn model(&self) -> Result<Model> {
        Model::new(self.model_kind, self.unroll)
    }
}

/// Step-decayed learning rate `lr₀ · factor^⌊iter / N⌋`.
pub fn lr_at(iter: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr * cfg.decay_factor.powi((iter / cfg.decay_every) as i32)
}

/// First and second moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl From<&TrainConfig> for AdamHyper {
    fn from(c: &TrainConfig) -> Self {
        AdamHyper {
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    h: AdamHyper,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(
            "adam_step",
            format!(
                "{} params, {} grads, {} moments",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::shape(
                "adam_step",
                format!("{:?} vs {:?}", p.shape(), g.shape()),
            ));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - h.beta1.powi(t);
    let c2 = 1.0 - h.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let p = params[i].data_mut();
        for k in 0..p.len() {
            m[k] = h.beta1 * m[k] + (1.0 - h.beta1) * g[k];
            v[k] = h.beta2 * v[k] + (1.0 - h.beta2) * g[k] * g[k];
            p[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + h.eps);
        }
    }
    Ok(())
}

/// One training sample as scheduled by a [`BatchPlan`].
#[derive(Clone, Debug, PartialEq)]
pub struct BatchItem {
    pub record: SampleRecord,
    pub acceleration: u32,
    pub mask_seed: u64,
    /// Present for self-supervised items.
    pub partition: Option<PartitionSpec>,
    pub epoch: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub iter: usize,
    pub supervised: Vec<BatchItem>,
    pub self_supervised: Vec<BatchItem>,
}

/// Stateless schedule: batch `i` depends only on the config and `i`, so a
/// resumed run sees exactly the batches it would have seen.
#[derive(Clone, Debug)]
pub struct BatchPlan {
    cfg: TrainConfig,
    supervised: Vec<SampleRecord>,
    self_supervised: Vec<SampleRecord>,
}

fn pool(manifest: &DatasetManifest, families: &[Family], oversample: usize) -> Vec<SampleRecord> {
    manifest
        .select(Split::Train, families)
        .into_iter()
        .flat_map(|r| {
            let n = if r.family == Family::Target {
                oversample
            } else {
                1
            };
            std::iter::repeat_n(r, n)
        })
        .collect()
}

impl BatchPlan {
    pub fn new(cfg: &TrainConfig, manifest: &DatasetManifest) -> Result<Self> {
        cfg.validate()?;
        let supervised = pool(
            manifest,
            cfg.setup.supervised_families(),
            cfg.target_oversample,
        );
        let self_supervised = pool(
            manifest,
            cfg.setup.self_supervised_families(),
            cfg.target_oversample,
        );
        let check = |families: &[Family], pool: &[SampleRecord], kind: &str| -> Result<()> {
            for f in families {
                if !pool.iter().any(|r| r.family == *f) {
                    return Err(Error::invalid(format!(
                        "setup '{}' needs {kind} training samples of family '{f}', none found",
                        cfg.setup
                    )));
                }
            }
            Ok(())
        };
        check(cfg.setup.supervised_families(), &supervised, "supervised")?;
        check(
            cfg.setup.self_supervised_families(),
            &self_supervised,
            "self-supervised",
        )?;
        Ok(BatchPlan {
            cfg: cfg.clone(),
            supervised,
            self_supervised,
        })
    }

    pub fn supervised_pool(&self) -> &[SampleRecord] {
        &self.supervised
    }

    pub fn self_supervised_pool(&self) -> &[SampleRecord] {
        &self.self_supervised
    }

    fn item(
        &self,
        pool: &[SampleRecord],
        tag: u64,
        global: u64,
        with_partition: bool,
    ) -> BatchItem {
        let n = pool.len() as u64;
        let epoch = global / n;
        let order = epoch_order(pool.len(), self.cfg.seed ^ tag, epoch);
        let record = pool[order[(global % n) as usize]].clone();
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed ^ tag, &format!("item{global}")));
        let acceleration =
            self.cfg.accelerations[rng.random_range(0..self.cfg.accelerations.len())];
        let mask_seed = rng.random();
        let partition = with_partition.then(|| PartitionSpec {
            q: sample_partition_ratio(self.cfg.partition.mode, &mut rng),
            sigma: self.cfg.partition.sigma,
            acs_window: self.cfg.partition.acs_window,
            seed: rng.random(),
        });
        BatchItem {
            record,
            acceleration,
            mask_seed,
            partition,
            epoch,
        }
    }

    pub fn batch(&self, iter: usize) -> Batch {
        let bs = self.cfg.batch_size as u64;
        let items = |pool: &[SampleRecord], tag: u64, ssl: bool| -> Vec<BatchItem> {
            if pool.is_empty() {
                return Vec::new();
            }
            (0..bs)
                .map(|j| self.item(pool, tag, iter as u64 * bs + j, ssl))
                .collect()
        };
        Batch {
            iter,
            supervised: items(&self.supervised, 0x5u64 << 56, false),
            self_supervised: items(&self.self_supervised, 0x55u64 << 56, true),
        }
    }
}

/// Batches `0, 1, 2, …` of `cfg` over the training split of `manifest`.
pub fn build_batches(
    cfg: &TrainConfig,
    manifest: &DatasetManifest,
) -> Result<impl Iterator<Item = Batch>> {
    let plan = BatchPlan::new(cfg, manifest)?;
    Ok((0..).map(move |i| plan.batch(i)))
}

/// Loaded, subsampled and partitioned samples of one batch.
pub struct MaterializedBatch {
    pub supervised: Vec<SupervisedSample>,
    pub self_supervised: Vec<SelfSupervisedSample>,
}

fn item_mask(
    item: &BatchItem,
    scheme: MaskScheme,
    nx: usize,
    ny: usize,
) -> Result<crate::sampling::SamplingMask> {
    let acs = acs_fraction_for(item.acceleration, Phase::Train)?;
    make_mask(
        scheme,
        nx,
        ny,
        item.acceleration as f64,
        acs,
        item.mask_seed,
    )
}

pub fn materialize(batch: &Batch, root: &Path, scheme: MaskScheme) -> Result<MaterializedBatch> {
    let mut supervised = Vec::with_capacity(batch.supervised.len());
    for item in &batch.supervised {
        let s = load_sample(root, &item.record)?;
        let (nx, ny) = s.kspace.dims();
        let mask = item_mask(item, scheme, nx, ny)?;
        supervised.push(SupervisedSample {
            kspace: s.kspace,
            gt: s.gt,
            mask,
        });
    }
    let mut self_supervised = Vec::with_capacity(batch.self_supervised.len());
    for item in &batch.self_supervised {
        let s = load_sample(root, &item.record)?;
        let (nx, ny) = s.kspace.dims();
        let mask = item_mask(item, scheme, nx, ny)?;
        let spec = item
            .partition
            .expect("self-supervised items carry a partition");
        let part = gaussian_partition(&mask, &spec)?;
        self_supervised.push(SelfSupervisedSample::new(
            s.kspace,
            mask,
            part.theta,
            part.lambda,
        )?);
    }
    Ok(MaterializedBatch {
        supervised,
        self_supervised,
    })
}

/// Loss of the setup on one batch; gradients when `with_grad`.
pub fn batch_loss(
    model: &Model,
    params: &ParamStore,
    batch: &MaterializedBatch,
    weights: &LossWeights,
    with_grad: bool,
) -> Result<(f64, Option<Vec<Tensor>>)> {
    let tape = Tape::new();
    let p = if with_grad {
        params.bind(&tape)
    } else {
        params.bind_frozen(&tape)
    };
    let loss = jssl_loss(
        model,
        &p,
        &batch.supervised,
        &batch.self_supervised,
        weights,
    )?;
    let value = loss.value().item()?;
    if !value.is_finite() || !with_grad {
        return Ok((value, None));
    }
    let grads = tape.backward(loss)?;
    Ok((value, Some(p.gradients(&grads))))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub iter: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValEntry {
    pub iter: usize,
    pub ssim: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub train: Vec<LogEntry>,
    pub validation: Vec<ValEntry>,
}

/// Everything needed to continue a run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub iter: usize,
    pub params: ParamStore,
    pub adam: AdamState,
    pub best: Option<ValEntry>,
    pub log: TrainLog,
}

#[derive(Serialize, Deserialize)]
struct StateManifest {
    iter: usize,
    step: u64,
    best: Option<ValEntry>,
}

pub const BEST_DIR: &str = "best";
pub const STATE_DIR: &str = "state";
pub const LOG_FILE: &str = "log.json";
pub const CONFIG_FILE: &str = "config.json";

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

impl TrainState {
    fn save(&self, model: Model, dir: &Path) -> Result<()> {
        Checkpoint {
            model,
            params: self.params.clone(),
            meta: BTreeMap::new(),
        }
        .save(dir)?;
        for (i, (m, v)) in self.adam.m.iter().zip(&self.adam.v).enumerate() {
            tnsr::save(dir.join(format!("m{i:03}.tnsr")), m)?;
            tnsr::save(dir.join(format!("v{i:03}.tnsr")), v)?;
        }
        write_json(
            &dir.join("state.json"),
            &StateManifest {
                iter: self.iter,
                step: self.adam.step,
                best: self.best,
            },
        )?;
        write_json(&dir.join(LOG_FILE), &self.log)
    }

    fn load(model: Model, dir: &Path) -> Result<Self> {
        let ck = Checkpoint::load(dir)?;
        if ck.model != model {
            return Err(Error::format(
                dir,
                "saved state belongs to a different model",
            ));
        }
        let sm: StateManifest = read_json(&dir.join("state.json"))?;
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (i, p) in ck.params.tensors().iter().enumerate() {
            for (prefix, out) in [("m", &mut m), ("v", &mut v)] {
                let path = dir.join(format!("{prefix}{i:03}.tnsr"));
                let t = tnsr::load(&path)?;
                if t.shape() != p.shape() {
                    return Err(Error::format(
                        path,
                        "moment shape does not match its parameter",
                    ));
                }
                out.push(t);
            }
        }
        let log = read_json(&dir.join(LOG_FILE))?;
        Ok(TrainState {
            iter: sm.iter,
            params: ck.params,
            adam: AdamState {
                m,
                v,
                step: sm.step,
            },
            best: sm.best,
            log,
        })
    }
}

/// Outcome of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub log: TrainLog,
}

/// Mean validation SSIM over the target validation split.
pub fn validate_model(
    cfg: &TrainConfig,
    model: &Model,
    params: &ParamStore,
    root: &Path,
    records: &[SampleRecord],
) -> Result<f64> {
    let ck = Checkpoint {
        model: *model,
        params: params.clone(),
        meta: BTreeMap::new(),
    };
    let protocol = EvalProtocol {
        scheme: cfg.scheme,
        seed: cfg.seed ^ 0x7a1,
    };
    let results = evaluate(
        &ck,
        cfg.setup.inference_mode(),
        root,
        records,
        &cfg.accelerations,
        &protocol,
        "val",
    )?;
    let records: Vec<_> = results.into_iter().map(|(r, _)| r).collect();
    Ok(mean_ssim(&records))
}

fn best_checkpoint(
    cfg: &TrainConfig,
    model: Model,
    params: ParamStore,
    best: &ValEntry,
) -> Checkpoint {
    let mut meta = BTreeMap::new();
    meta.insert("setup".to_string(), cfg.setup.name().to_string());
    meta.insert("iter".to_string(), best.iter.to_string());
    meta.insert("val_ssim".to_string(), format!("{:.6}", best.ssim));
    Checkpoint {
        model,
        params,
        meta,
    }
}

/// Runs (or resumes, when `out/state` exists and `resume` is set) training
/// up to `cfg.max_iters`, validating every `val_every` steps and at the end.
/// Writes `out/best`, `out/state`, `out/log.json` and `out/config.json`.
pub fn train(
    cfg: &TrainConfig,
    manifest: &DatasetManifest,
    root: &Path,
    out: &Path,
    resume: bool,
    mut progress: impl FnMut(&LogEntry),
) -> Result<TrainOutcome> {
    let plan = BatchPlan::new(cfg, manifest)?;
    let model = cfg.model()?;
    let val_records = manifest.select(Split::Val, &[Family::Target]);
    if val_records.is_empty() {
        return Err(Error::invalid("no target validation samples"));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_json(&out.join(CONFIG_FILE), cfg)?;
    let state_dir = out.join(STATE_DIR);
    let mut state = if resume && state_dir.join("state.json").exists() {
        TrainState::load(model, &state_dir)?
    } else {
        let params = model.init_params(cfg.seed);
        let adam = AdamState::new(params.tensors());
        TrainState {
            iter: 0,
            params,
            adam,
            best: None,
            log: TrainLog::default(),
        }
    };
    let hyper = AdamHyper::from(cfg);

    while state.iter < cfg.max_iters {
        let iter = state.iter;
        let batch = materialize(&plan.batch(iter), root, cfg.scheme)?;
        let (loss, grads) = batch_loss(&model, &state.params, &batch, &cfg.weights, true)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { iter, loss });
        }
        let lr = lr_at(iter, cfg);
        let grads = grads.expect("gradients requested");
        if let Some(bad) = grads.iter().position(|g| !g.all_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of '{}' at iteration {iter}",
                state.params.names()[bad]
            )));
        }
        adam_step(
            state.params.tensors_mut(),
            &grads,
            &mut state.adam,
            lr,
            hyper,
        )?;
        state.iter += 1;
        if iter % cfg.log_every == 0 {
            let entry = LogEntry { iter, loss, lr };
            progress(&entry);
            state.log.train.push(entry);
        }
        if state.iter % cfg.val_every == 0 || state.iter == cfg.max_iters {
            let ssim = validate_model(cfg, &model, &state.params, root, &val_records)?;
            let entry = ValEntry {
                iter: state.iter,
                ssim,
            };
            state.log.validation.push(entry);
            if state.best.is_none_or(|b| ssim > b.ssim) {
                state.best = Some(entry);
                best_checkpoint(cfg, model, state.params.clone(), &entry)
                    .save(&out.join(BEST_DIR))?;
            }
            state.save(model, &state_dir)?;
        }
    }
    let best = match state.best {
        Some(b) => Checkpoint::load(&out.join(BEST_DIR)).map(|mut ck| {
            ck.meta.insert("iter".to_string(), b.iter.to_string());
            ck
        })?,
        None => {
            // Zero iterations requested: the initialization is the best seen.
            let ssim = validate_model(cfg, &model, &state.params, root, &val_records)?;
            let entry = ValEntry { iter: 0, ssim };
            let ck = best_checkpoint(cfg, model, state.params.clone(), &entry);
            ck.save(&out.join(BEST_DIR))?;
            ck
        }
    };
    write_json(&out.join(LOG_FILE), &state.log)?;
    Ok(TrainOutcome {
        best,
        log: state.log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_dataset, DatasetConfig, SplitCount};

    #[test]
    fn adam_first_step_closed_form() {
        let h = AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        let mut p = vec![Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap()];
        let g = vec![Tensor::new(vec![3], vec![0.3, -4.0, 0.0]).unwrap()];
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &g, &mut s, 0.01, h).unwrap();
        // m̂ = g, v̂ = g², so the step is lr·g/(|g| + eps).
        let expect = [
            1.0 - 0.01 * 0.3 / (0.3 + 1e-8),
            -2.0 + 0.01 * 4.0 / (4.0 + 1e-8),
            0.5,
        ];
        for (a, b) in p[0].data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
        // Zero gradients from a zero state leave parameters untouched.
        let mut q = vec![Tensor::ones(&[2])];
        let mut s = AdamState::new(&q);
        adam_step(&mut q, &[Tensor::zeros(&[2])], &mut s, 0.1, h).unwrap();
        assert_eq!(q[0], Tensor::ones(&[2]));
        assert!(adam_step(&mut q, &[Tensor::zeros(&[3])], &mut s, 0.1, h).is_err());
    }

    #[test]
    fn adam_descends_quadratic() {
        // f(p) = ½‖p − c‖² with noisy gradients.
        let c = [3.0, -1.0];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = vec![Tensor::zeros(&[2])];
        let mut s = AdamState::new(&p);
        let h = AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        let mut losses = Vec::new();
        for _ in 0..100 {
            let d: Vec<f64> = p[0].data().iter().zip(c).map(|(a, b)| a - b).collect();
            losses.push(0.5 * d.iter().map(|x| x * x).sum::<f64>());
            let g: Vec<f64> = d
                .iter()
                .map(|x| x + 0.1 * (rng.random::<f64>() - 0.5))
                .collect();
            adam_step(&mut p, &[Tensor::new(vec![2], g).unwrap()], &mut s, 0.05, h).unwrap();
        }
        let n = losses.len() as f64;
        let xm = (n - 1.0) / 2.0;
        let ym = losses.iter().sum::<f64>() / n;
        let slope: f64 = losses
            .iter()
            .enumerate()
            .map(|(i, y)| (i as f64 - xm) * (y - ym))
            .sum();
        assert!(slope < 0.0);
        assert!(losses[99] < 0.05 * losses[0]);
    }

    #[test]
    fn learning_rate_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg), 0.003);
        assert_eq!(lr_at(1999, &cfg), 0.003);
        assert!((lr_at(4000, &cfg) - 0.003 * 0.64).abs() < 1e-15);
        assert!((1..10_000).all(|i| lr_at(i, &cfg) <= lr_at(i - 1, &cfg)));
    }

    #[test]
    fn setup_names_and_modes() {
        for s in Setup::ALL {
            assert_eq!(s.name().parse::<Setup>().unwrap(), s);
            let json = serde_json::to_string(&s).unwrap();
            assert_eq!(json, format!("\"{}\"", s.name()));
        }
        assert_eq!("SSL_ALL".parse::<Setup>().unwrap(), Setup::SslAll);
        assert!("semi".parse::<Setup>().is_err());
        assert_eq!(Setup::SslAll.inference_mode(), InferenceMode::Ssl);
        assert_eq!(Setup::SlProxy.inference_mode(), InferenceMode::Sl);
        assert!(!Setup::Jssl.uses_target_gt());
        assert!(Setup::Sl.uses_target_gt());
    }

    fn manifest(families: &[Family]) -> DatasetManifest {
        let mut records = Vec::new();
        for &family in families {
            for split in [Split::Train, Split::Val] {
                for i in 0..5 {
                    records.push(SampleRecord {
                        id: format!("{family}-{}-{i}", split.name()),
                        family,
                        split,
                        kspace: String::new(),
                        maps: String::new(),
                        gt: String::new(),
                        n_c: 2,
                        seed: i,
                    });
                }
            }
        }
        DatasetManifest {
            nx: 32,
            ny: 32,
            coils: 2,
            records,
        }
    }

    #[test]
    fn batches_follow_setups() {
        let m = manifest(&Family::ALL);
        let cfg = |setup| TrainConfig {
            setup,
            ..TrainConfig::default()
        };
        let mut jssl = build_batches(&cfg(Setup::Jssl), &m).unwrap();
        let b = jssl.next().unwrap();
        assert_eq!((b.supervised.len(), b.self_supervised.len()), (2, 2));
        assert!(b
            .supervised
            .iter()
            .all(|i| i.record.family.is_proxy() && i.partition.is_none()));
        assert!(b
            .self_supervised
            .iter()
            .all(|i| i.record.family == Family::Target && i.partition.is_some()));

        let plan = BatchPlan::new(&cfg(Setup::SlProxy), &m).unwrap();
        let epoch = plan.supervised_pool().len();
        for b in (0..epoch).map(|i| plan.batch(i)) {
            assert!(b.self_supervised.is_empty());
            assert!(b
                .supervised
                .iter()
                .all(|i| i.record.family != Family::Target));
        }

        let plan = BatchPlan::new(&cfg(Setup::SslAll), &m).unwrap();
        assert!(plan.supervised_pool().is_empty());
        assert_eq!(plan.self_supervised_pool().len(), 5 + 5 + 10);

        for b in (0..20).map(|i| BatchPlan::new(&cfg(Setup::Sl), &m).unwrap().batch(i)) {
            assert!(b
                .supervised
                .iter()
                .all(|i| i.record.family == Family::Target));
            assert!(b
                .supervised
                .iter()
                .all(|i| [4, 8].contains(&i.acceleration)));
        }

        let target_only = manifest(&[Family::Target]);
        assert!(BatchPlan::new(&cfg(Setup::SlProxy), &target_only).is_err());
        assert!(BatchPlan::new(&cfg(Setup::Jssl), &target_only).is_err());
        assert!(BatchPlan::new(&cfg(Setup::Ssl), &target_only).is_ok());
    }

    #[test]
    fn partitions_change_across_epochs() {
        let m = manifest(&Family::ALL);
        let cfg = TrainConfig {
            setup: Setup::Ssl,
            batch_size: 1,
            target_oversample: 1,
            ..TrainConfig::default()
        };
        let plan = BatchPlan::new(&cfg, &m).unwrap();
        let n = plan.self_supervised_pool().len();
        let id = plan.batch(0).self_supervised[0].record.id.clone();
        let mut seen = Vec::new();
        for i in 0..3 * n {
            let item = plan.batch(i).self_supervised.remove(0);
            if item.record.id == id {
                seen.push((item.epoch, item.partition.unwrap().seed, item.mask_seed));
            }
        }
        assert_eq!(seen.iter().map(|s| s.0).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert!(seen[0].1 != seen[1].1 && seen[1].1 != seen[2].1 && seen[0].1 != seen[2].1);
        assert_eq!(plan.batch(7), plan.batch(7));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig {
                accelerations: vec![2],
                ..TrainConfig::default()
            },
            TrainConfig {
                accelerations: vec![],
                ..TrainConfig::default()
            },
            TrainConfig {
                beta1: 1.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                lr: 0.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                batch_size: 0,
                ..TrainConfig::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
        let json = r#"{"setup": "sl-proxy", "lr": 0.001}"#;
        let cfg: TrainConfig = serde_json::from_str(json).unwrap();
        assert_eq!(
            (cfg.setup, cfg.lr, cfg.batch_size),
            (Setup::SlProxy, 0.001, 2)
        );
        assert!(serde_json::from_str::<TrainConfig>(r#"{"lr_typo": 1}"#).is_err());
    }

    fn tiny_dataset(dir: &Path) -> DatasetManifest {
        let mut counts = Vec::new();
        for family in Family::ALL {
            counts.push(SplitCount {
                family,
                split: Split::Train,
                count: 3,
            });
        }
        counts.push(SplitCount {
            family: Family::Target,
            split: Split::Val,
            count: 2,
        });
        let cfg = DatasetConfig {
            nx: 32,
            ny: 32,
            coils: 2,
            noise_sigma: 0.0,
            counts,
            seed: 11,
        };
        build_dataset(&cfg, dir).unwrap()
    }

    fn tiny_config(setup: Setup, max_iters: usize) -> TrainConfig {
        TrainConfig {
            setup,
            model_kind: ModelKind::ImageRefiner,
            unroll: UnrollConfig {
                t: 1,
                t_x: 1,
                channels: 4,
                depth: 2,
            },
            max_iters,
            log_every: 1,
            val_every: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn first_loss_is_pure_and_resume_is_exact() {
        let data = tempfile::tempdir().unwrap();
        let m = tiny_dataset(data.path());
        let cfg = tiny_config(Setup::Jssl, 8);

        let plan = BatchPlan::new(&cfg, &m).unwrap();
        let model = cfg.model().unwrap();
        let batch = materialize(&plan.batch(0), data.path(), cfg.scheme).unwrap();
        let (standalone, _) = batch_loss(
            &model,
            &model.init_params(cfg.seed),
            &batch,
            &cfg.weights,
            false,
        )
        .unwrap();

        let full = tempfile::tempdir().unwrap();
        let a = train(&cfg, &m, data.path(), full.path(), false, |_| {}).unwrap();
        assert!((a.log.train[0].loss - standalone).abs() < 1e-12);
        assert_eq!(a.log.train.len(), 8);
        assert_eq!(
            a.log.validation.iter().map(|v| v.iter).collect::<Vec<_>>(),
            vec![4, 8]
        );

        let split = tempfile::tempdir().unwrap();
        train(
            &tiny_config(Setup::Jssl, 4),
            &m,
            data.path(),
            split.path(),
            false,
            |_| {},
        )
        .unwrap();
        let b = train(&cfg, &m, data.path(), split.path(), true, |_| {}).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.best.params, b.best.params);

        let loaded = Checkpoint::load(&full.path().join(BEST_DIR)).unwrap();
        assert_eq!(loaded.meta["setup"], "jssl");
    }

    #[test]
    fn divergence_is_reported() {
        let data = tempfile::tempdir().unwrap();
        let m = tiny_dataset(data.path());
        let cfg = TrainConfig {
            lr: 1e200,
            ..tiny_config(Setup::Sl, 6)
        };
        let out = tempfile::tempdir().unwrap();
        match train(&cfg, &m, data.path(), out.path(), false, |_| {}) {
            Err(Error::Diverged { iter, .. }) => assert!(iter >= 1),
            Err(Error::NonFinite(_)) => {}
            other => panic!("expected divergence, got {:?}", other.map(|o| o.log)),
        }
    }
}
