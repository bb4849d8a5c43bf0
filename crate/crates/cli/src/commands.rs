use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use jssl_core::data::{
    self, build_dataset, DatasetConfig, DatasetManifest, Family, Split, SplitCount,
};
use jssl_core::eval::{self, zero_filled, EvalProtocol, EvalRecord};
use jssl_core::models::{Checkpoint, ModelKind};
use jssl_core::report::{self, SampleImages};
use jssl_core::sampling::{
    acs_fraction_for, gaussian_partition, load_mask, make_mask, save_mask, MaskMeta, MaskScheme,
    PartitionSpec, Phase, SamplingMask, DEFAULT_PARTITION_SIGMA, SUPPORTED_ACCELERATIONS,
};
use jssl_core::theory::{prop1_simulate, prop2_simulate, MixtureSpec, RegressionSpec};
use jssl_core::tnsr;
use jssl_core::train::{self, Setup, TrainConfig, BEST_DIR};

use crate::config;
use crate::{CliError, Common};

type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
    write_text(path, &text)
}

fn parse_scheme(s: &str) -> std::result::Result<MaskScheme, String> {
    serde_json::from_value(serde_json::Value::String(s.replace('-', "_")))
        .map_err(|_| format!("unknown scheme '{s}' (equispaced, random_uniform)"))
}

fn parse_phase(s: &str) -> std::result::Result<Phase, String> {
    match s {
        "train" => Ok(Phase::Train),
        "inference" => Ok(Phase::Inference),
        _ => Err(format!("unknown phase '{s}' (train, inference)")),
    }
}

fn data_root(flag: Option<PathBuf>) -> PathBuf {
    flag.unwrap_or_else(data::default_data_dir)
}

// ---------------------------------------------------------------- synth

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    nx: Option<usize>,
    #[arg(long)]
    ny: Option<usize>,
    #[arg(long)]
    coils: Option<usize>,
    /// K-space noise standard deviation.
    #[arg(long)]
    noise: Option<f64>,
    /// Sample count as FAMILY:SPLIT=N, e.g. target:test=30. Repeatable;
    /// replaces the count of that family and split.
    #[arg(long = "count", value_name = "FAMILY:SPLIT=N")]
    counts: Vec<String>,
}

fn parse_count(s: &str) -> Result<SplitCount> {
    let bad = || CliError::Usage(format!("bad --count '{s}', expected FAMILY:SPLIT=N"));
    let (key, n) = s.split_once('=').ok_or_else(bad)?;
    let (family, split) = key.split_once(':').ok_or_else(bad)?;
    let family: Family = family.parse().map_err(|_| bad())?;
    let split = Split::ALL
        .into_iter()
        .find(|x| x.name() == split)
        .ok_or_else(bad)?;
    Ok(SplitCount {
        family,
        split,
        count: n.parse().map_err(|_| bad())?,
    })
}

pub fn synth(c: &Common, a: SynthArgs) -> Result<()> {
    let mut cfg: DatasetConfig = config::load(c.config.as_deref())?;
    if let Some(v) = a.nx {
        cfg.nx = v;
    }
    if let Some(v) = a.ny {
        cfg.ny = v;
    }
    if let Some(v) = a.coils {
        cfg.coils = v;
    }
    if let Some(v) = a.noise {
        cfg.noise_sigma = v;
    }
    if let Some(v) = c.seed {
        cfg.seed = v;
    }
    for s in &a.counts {
        let sc = parse_count(s)?;
        match cfg
            .counts
            .iter_mut()
            .find(|x| x.family == sc.family && x.split == sc.split)
        {
            Some(x) => x.count = sc.count,
            None => cfg.counts.push(sc),
        }
    }
    let manifest = build_dataset(&cfg, &a.out)?;
    print!("{}", manifest_summary(&manifest, &a.out));
    Ok(())
}

fn manifest_summary(m: &DatasetManifest, root: &Path) -> String {
    let mut s = format!(
        "{} samples ({}x{}, {} coils) in {}\n{:<8} {:>6} {:>6} {:>6}\n",
        m.records.len(),
        m.nx,
        m.ny,
        m.coils,
        root.display(),
        "family",
        "train",
        "val",
        "test"
    );
    for f in Family::ALL {
        let n = |split| {
            m.records
                .iter()
                .filter(|r| r.family == f && r.split == split)
                .count()
        };
        let _ = writeln!(
            s,
            "{:<8} {:>6} {:>6} {:>6}",
            f.name(),
            n(Split::Train),
            n(Split::Val),
            n(Split::Test)
        );
    }
    s
}

// ---------------------------------------------------------------- mask

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskConfig {
    pub scheme: MaskScheme,
    pub r: u32,
    pub nx: usize,
    pub ny: usize,
    /// Overrides the ACS fraction of the acceleration table.
    pub acs_fraction: Option<f64>,
    pub phase: Phase,
    pub seed: u64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            scheme: MaskScheme::Equispaced,
            r: 4,
            nx: 64,
            ny: 64,
            acs_fraction: None,
            phase: Phase::Inference,
            seed: 0,
        }
    }
}

impl MaskConfig {
    fn build(&self) -> Result<SamplingMask> {
        let table = acs_fraction_for(self.r, self.phase)?;
        let acs = self.acs_fraction.unwrap_or(table);
        Ok(make_mask(
            self.scheme,
            self.nx,
            self.ny,
            self.r as f64,
            acs,
            self.seed,
        )?)
    }

    fn meta(&self, mask: &SamplingMask) -> MaskMeta {
        let scheme = serde_json::to_value(self.scheme).expect("scheme serializes");
        MaskMeta {
            acceleration: mask.acceleration(),
            acs_fraction: mask.acs_fraction(),
            seed: self.seed,
            scheme: scheme.as_str().unwrap_or_default().to_string(),
        }
    }
}

#[derive(Args, Debug, Default)]
pub struct MaskFlags {
    /// equispaced or random_uniform.
    #[arg(long, value_parser = parse_scheme)]
    scheme: Option<MaskScheme>,
    /// Acceleration factor (2, 4, 8, 12 or 16).
    #[arg(long)]
    r: Option<u32>,
    #[arg(long)]
    nx: Option<usize>,
    #[arg(long)]
    ny: Option<usize>,
    /// ACS fraction; defaults to the acceleration table.
    #[arg(long)]
    acs: Option<f64>,
    /// ACS table to use: train or inference.
    #[arg(long, value_parser = parse_phase)]
    phase: Option<Phase>,
}

impl MaskFlags {
    fn apply(&self, cfg: &mut MaskConfig) {
        if let Some(v) = self.scheme {
            cfg.scheme = v;
        }
        if let Some(v) = self.r {
            cfg.r = v;
        }
        if let Some(v) = self.nx {
            cfg.nx = v;
        }
        if let Some(v) = self.ny {
            cfg.ny = v;
        }
        if let Some(v) = self.acs {
            cfg.acs_fraction = Some(v);
        }
        if let Some(v) = self.phase {
            cfg.phase = v;
        }
    }
}

#[derive(Args, Debug)]
pub struct MaskArgs {
    /// Output path stem; writes STEM.tnsr, STEM.json and STEM.pgm.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    mask: MaskFlags,
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => create_dir(p),
        _ => Ok(()),
    }
}

fn mask_line(m: &SamplingMask) -> String {
    let cols = m.sampled_columns().len();
    let acs = m
        .acs_fraction()
        .map_or(0, |f| jssl_core::sampling::acs_columns(m.ny(), f));
    format!(
        "sampled columns: {cols} of {} (ACS {acs}), positions {}, effective R {:.3}",
        m.ny(),
        m.count(),
        m.ny() as f64 / cols.max(1) as f64
    )
}

pub fn mask(c: &Common, a: MaskArgs) -> Result<()> {
    let mut cfg: MaskConfig = config::load(c.config.as_deref())?;
    a.mask.apply(&mut cfg);
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    let m = cfg.build()?;
    ensure_parent(&a.out)?;
    save_mask(&a.out, &m, &cfg.meta(&m))?;
    report::write_pgm(&a.out.with_extension("pgm"), m.grid(), 1.0)?;
    println!("{}", mask_line(&m));
    Ok(())
}

// ---------------------------------------------------------------- partition

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionConfig {
    pub mask: MaskConfig,
    pub q: f64,
    pub sigma: f64,
    pub window: usize,
    pub seed: u64,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        PartitionConfig {
            mask: MaskConfig::default(),
            q: 0.5,
            sigma: DEFAULT_PARTITION_SIGMA,
            window: 4,
            seed: 0,
        }
    }
}

#[derive(Args, Debug)]
pub struct PartitionArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Stem of a mask written by `mask`; generated from the mask flags when
    /// absent.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Target ratio |Θ|/|M|.
    #[arg(long)]
    q: Option<f64>,
    /// Gaussian standard deviation in pixels.
    #[arg(long)]
    sigma: Option<f64>,
    /// Side of the central window kept in the input subset.
    #[arg(long)]
    window: Option<usize>,
    #[command(flatten)]
    mask_flags: MaskFlags,
}

#[derive(Serialize)]
struct PartitionSummary {
    q: f64,
    ratio_before_window: f64,
    mask_count: usize,
    theta_count: usize,
    lambda_count: usize,
    seed: u64,
}

pub fn partition(c: &Common, a: PartitionArgs) -> Result<()> {
    let mut cfg: PartitionConfig = config::load(c.config.as_deref())?;
    a.mask_flags.apply(&mut cfg.mask);
    if let Some(v) = a.q {
        cfg.q = v;
    }
    if let Some(v) = a.sigma {
        cfg.sigma = v;
    }
    if let Some(v) = a.window {
        cfg.window = v;
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
        cfg.mask.seed = data::derive_seed(s, "mask");
    }
    let m = match &a.mask {
        Some(stem) => load_mask(stem)?.0,
        None => cfg.mask.build()?,
    };
    let spec = PartitionSpec {
        q: cfg.q,
        sigma: cfg.sigma,
        acs_window: cfg.window,
        seed: cfg.seed,
    };
    let p = gaussian_partition(&m, &spec)?;
    create_dir(&a.out)?;
    for (name, set) in [("mask", &m), ("theta", &p.theta), ("lambda", &p.lambda)] {
        tnsr::save(a.out.join(format!("{name}.tnsr")), set.grid())?;
        report::write_pgm(&a.out.join(format!("{name}.pgm")), set.grid(), 1.0)?;
    }
    let summary = PartitionSummary {
        q: cfg.q,
        ratio_before_window: p.ratio_before_window,
        mask_count: m.count(),
        theta_count: p.theta.count(),
        lambda_count: p.lambda.count(),
        seed: cfg.seed,
    };
    write_json(&a.out.join("partition.json"), &summary)?;
    println!(
        "|M| = {}, |Θ| = {}, |Λ| = {}; ratio before window {:.4} (q = {}), after {:.4}",
        summary.mask_count,
        summary.theta_count,
        summary.lambda_count,
        summary.ratio_before_window,
        cfg.q,
        summary.theta_count as f64 / summary.mask_count as f64
    );
    Ok(())
}

// ---------------------------------------------------------------- train

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset root (default: $JSSL_DATA_DIR or ./data).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for checkpoints and logs.
    #[arg(long)]
    out: PathBuf,
    /// jssl, ssl, ssl-all, sl, sl-all or sl-proxy.
    #[arg(long)]
    setup: Option<Setup>,
    /// vsharp, image_refiner or kspace_gd.
    #[arg(long)]
    model: Option<ModelKind>,
    /// Training iterations.
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Comma-separated training accelerations.
    #[arg(long, value_delimiter = ',')]
    accelerations: Option<Vec<u32>>,
    #[arg(long, value_parser = parse_scheme)]
    scheme: Option<MaskScheme>,
    /// Unrolled iterations.
    #[arg(long)]
    t: Option<usize>,
    /// Inner gradient steps of the data-consistency x-step.
    #[arg(long)]
    tx: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    val_every: Option<usize>,
    #[arg(long)]
    log_every: Option<usize>,
    /// Continue from OUT/state if present.
    #[arg(long)]
    resume: bool,
}

pub fn train_config(c: &Common, a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg: TrainConfig = config::load(c.config.as_deref())?;
    macro_rules! set {
        ($flag:expr => $($field:tt)+) => {
            if let Some(v) = $flag.clone() {
                cfg.$($field)+ = v;
            }
        };
    }
    set!(a.setup => setup);
    set!(a.model => model_kind);
    set!(a.iters => max_iters);
    set!(a.lr => lr);
    set!(a.batch_size => batch_size);
    set!(a.accelerations => accelerations);
    set!(a.scheme => scheme);
    set!(a.t => unroll.t);
    set!(a.tx => unroll.t_x);
    set!(a.channels => unroll.channels);
    set!(a.depth => unroll.depth);
    set!(a.val_every => val_every);
    set!(a.log_every => log_every);
    set!(c.seed => seed);
    cfg.validate()?;
    Ok(cfg)
}

pub fn train(c: &Common, a: TrainArgs) -> Result<()> {
    let cfg = train_config(c, &a)?;
    let root = data_root(a.data.clone());
    let manifest = DatasetManifest::load(&root)?;
    println!(
        "training {} ({}, {} parameters) for {} iterations",
        cfg.setup,
        cfg.model_kind.name(),
        cfg.model()?.init_params(cfg.seed).count(),
        cfg.max_iters
    );
    let outcome = train::train(&cfg, &manifest, &root, &a.out, a.resume, |e| {
        println!("iter {:>6}  loss {:.6e}  lr {:.3e}", e.iter, e.loss, e.lr);
    })?;
    for v in &outcome.log.validation {
        println!("val  {:>6}  ssim {:.6}", v.iter, v.ssim);
    }
    let meta = &outcome.best.meta;
    println!(
        "best checkpoint {} (iter {}, val ssim {})",
        a.out.join(BEST_DIR).display(),
        meta.get("iter").map_or("?", String::as_str),
        meta.get("val_ssim").map_or("?", String::as_str)
    );
    Ok(())
}

// ---------------------------------------------------------------- eval

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub accelerations: Vec<u32>,
    pub scheme: MaskScheme,
    pub seed: u64,
    /// Test samples whose reconstructions are kept for image grids.
    pub images: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            accelerations: SUPPORTED_ACCELERATIONS.to_vec(),
            scheme: MaskScheme::Equispaced,
            seed: 0,
            images: 3,
        }
    }
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint directory, or a training output directory containing best/.
    #[arg(long, required_unless_present = "zero_filled")]
    checkpoint: Option<PathBuf>,
    /// Evaluate zero-filled RSS instead of a model.
    #[arg(long, conflicts_with = "checkpoint")]
    zero_filled: bool,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Name recorded in the results (default: the checkpoint's setup).
    #[arg(long)]
    setup: Option<String>,
    /// Comma-separated test accelerations.
    #[arg(long, value_delimiter = ',')]
    accelerations: Option<Vec<u32>>,
    #[arg(long, value_parser = parse_scheme)]
    scheme: Option<MaskScheme>,
    /// Number of test samples whose reconstructions are saved.
    #[arg(long)]
    images: Option<usize>,
}

/// Written next to `records.csv`; lists the saved reconstructions.
#[derive(Debug, Serialize, Deserialize)]
struct EvalIndex {
    setup: String,
    accelerations: Vec<u32>,
    /// Sample ids with saved images (`images/<id>_gt.tnsr`,
    /// `images/<id>_R<r>.tnsr`).
    image_samples: Vec<String>,
    checkpoint: BTreeMap<String, String>,
}

const IMAGES_DIR: &str = "images";
const RECORDS_FILE: &str = "records.csv";
const INDEX_FILE: &str = "eval.json";

pub fn eval(c: &Common, a: EvalArgs) -> Result<()> {
    let mut cfg: EvalConfig = config::load(c.config.as_deref())?;
    if let Some(v) = a.accelerations.clone() {
        cfg.accelerations = v;
    }
    if let Some(v) = a.scheme {
        cfg.scheme = v;
    }
    if let Some(v) = a.images {
        cfg.images = v;
    }
    if let Some(v) = c.seed {
        cfg.seed = v;
    }
    let root = data_root(a.data.clone());
    let manifest = DatasetManifest::load(&root)?;
    let test = manifest.select(Split::Test, &[Family::Target]);
    if test.is_empty() {
        return Err(CliError::Usage(format!(
            "no target test samples in {}",
            root.display()
        )));
    }
    let protocol = EvalProtocol {
        scheme: cfg.scheme,
        seed: cfg.seed,
    };
    let (setup, results, meta) = if a.zero_filled {
        let setup = a.setup.clone().unwrap_or_else(|| "zf".into());
        let results = eval::evaluate_with(
            &root,
            &test,
            &cfg.accelerations,
            &protocol,
            &setup,
            zero_filled,
        )?;
        (setup, results, BTreeMap::new())
    } else {
        let dir = a.checkpoint.clone().expect("required by clap");
        let dir = if dir.join(BEST_DIR).is_dir() {
            dir.join(BEST_DIR)
        } else {
            dir
        };
        let ck = Checkpoint::load(&dir)?;
        let trained: Setup = ck
            .meta
            .get("setup")
            .ok_or_else(|| {
                CliError::Usage(format!("{} has no setup in its metadata", dir.display()))
            })?
            .parse()?;
        let setup = a
            .setup
            .clone()
            .unwrap_or_else(|| trained.name().to_string());
        let results = eval::evaluate(
            &ck,
            trained.inference_mode(),
            &root,
            &test,
            &cfg.accelerations,
            &protocol,
            &setup,
        )?;
        (setup, results, ck.meta.clone())
    };

    create_dir(&a.out.join(IMAGES_DIR))?;
    let records: Vec<EvalRecord> = results.iter().map(|(r, _)| r.clone()).collect();
    write_text(&a.out.join(RECORDS_FILE), &report::records_csv(&records))?;
    let keep: Vec<String> = test.iter().take(cfg.images).map(|r| r.id.clone()).collect();
    for rec in test.iter().take(cfg.images) {
        let gt = data::load_sample(&root, rec)?.gt;
        tnsr::save(
            a.out.join(IMAGES_DIR).join(format!("{}_gt.tnsr", rec.id)),
            &gt,
        )?;
    }
    for (r, img) in &results {
        if keep.contains(&r.sample_id) {
            tnsr::save(
                a.out
                    .join(IMAGES_DIR)
                    .join(format!("{}_R{}.tnsr", r.sample_id, r.r)),
                img,
            )?;
        }
    }
    let index = EvalIndex {
        setup: setup.clone(),
        accelerations: cfg.accelerations.clone(),
        image_samples: keep,
        checkpoint: meta,
    };
    write_json(&a.out.join(INDEX_FILE), &index)?;
    println!(
        "{} records for {setup} on {} test samples",
        records.len(),
        test.len()
    );
    for &r in &cfg.accelerations {
        let at: Vec<&EvalRecord> = records.iter().filter(|x| x.r == r).collect();
        let mean =
            |f: fn(&EvalRecord) -> f64| at.iter().map(|x| f(x)).sum::<f64>() / at.len() as f64;
        println!(
            "R={r:<3} ssim {:.4}  psnr {:.2}  nmse {:.4e}",
            mean(|x| x.ssim),
            mean(|x| x.psnr),
            mean(|x| x.nmse)
        );
    }
    Ok(())
}

// ---------------------------------------------------------------- report

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Evaluation output directories.
    #[arg(long, num_args = 1.., required = true)]
    inputs: Vec<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

pub fn report(c: &Common, a: ReportArgs) -> Result<()> {
    if let Some(path) = &c.config {
        // No tunables; still reject a malformed or non-empty config.
        let _: serde_json::Map<String, serde_json::Value> = config::load(Some(path))?;
    }
    let mut records = Vec::new();
    let mut images: BTreeMap<String, SampleImages> = BTreeMap::new();
    for dir in &a.inputs {
        let path = dir.join(RECORDS_FILE);
        let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        records.extend(report::parse_records_csv(&text, &path)?);
        let path = dir.join(INDEX_FILE);
        let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        let index: EvalIndex = serde_json::from_str(&text)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        for id in &index.image_samples {
            let entry = images.entry(id.clone()).or_default();
            let load = |name: String| tnsr::load(dir.join(IMAGES_DIR).join(name));
            if entry.gt.is_none() {
                entry.gt = Some(load(format!("{id}_gt.tnsr"))?);
            }
            for &r in &index.accelerations {
                entry
                    .recons
                    .insert((index.setup.clone(), r), load(format!("{id}_R{r}.tnsr"))?);
            }
        }
    }
    // Grids need every setup for each sample; keep samples common to all.
    let setups: std::collections::BTreeSet<&str> =
        records.iter().map(|r| r.setup.as_str()).collect();
    images.retain(|_, s| {
        let have: std::collections::BTreeSet<&str> =
            s.recons.keys().map(|k| k.0.as_str()).collect();
        have == setups
    });
    let rows = report::report(&records, &images, &a.out)?;
    print!("{}", report::summary_table(&rows));
    let tests = report::comparisons(&records)?;
    let shown: Vec<_> = tests
        .iter()
        .filter(|t| t.metric == jssl_core::stats::Metric::Ssim)
        .collect();
    if !shown.is_empty() {
        println!("\npaired SSIM tests (a - b)");
        for t in shown {
            println!(
                "{:<8} - {:<8} R={:<3} n={:<4} diff {:+.4}  t p={:.2e}  wilcoxon p={:.2e}{}",
                t.a,
                t.b,
                t.r,
                t.test.n,
                t.test.mean_diff,
                t.test.t.p_value,
                t.test.wilcoxon.p_value,
                if t.test.wilcoxon_significant {
                    " *"
                } else {
                    ""
                }
            );
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- theory

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheoryConfig {
    pub prop1: MixtureSpec,
    pub prop2: RegressionSpec,
    pub x_query: Vec<f64>,
    /// Random regression specs in the risk-bound sweep.
    pub sweep: usize,
    pub sweep_trials: usize,
    pub seed: u64,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        TheoryConfig {
            prop1: MixtureSpec {
                mu1: 0.0,
                mu2: 0.1,
                sigma1: 1.0,
                sigma2: 1.0,
                n: 10,
                k: 10_000,
                trials: 10_000,
                seed: 0,
            },
            prop2: RegressionSpec {
                sigma: 1.0,
                eps: 0.3,
                eps_tilde: 0.5,
                w: vec![0.5, 0.5],
                w_tilde: vec![0.6, 0.3],
                k: 50,
                trials: 10_000,
                seed: 0,
            },
            x_query: vec![1.0, -2.0],
            sweep: 20,
            sweep_trials: 2000,
            seed: 0,
        }
    }
}

#[derive(Args, Debug)]
pub struct TheoryArgs {
    /// Monte-Carlo trials for both propositions.
    #[arg(long)]
    trials: Option<usize>,
    /// Number of random specs in the risk-bound sweep.
    #[arg(long)]
    sweep: Option<usize>,
    /// Directory for theory.csv and sweep.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Relative tolerance on the risk bound; the bound's variance term uses
/// `1/K` where the finite-sample value is `1/(K − p − 1)`.
const BOUND_SLACK: f64 = 0.05;

fn sweep_spec(seed: u64, i: usize, trials: usize) -> RegressionSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(data::derive_seed(seed, &format!("sweep{i}")));
    let p = rng.random_range(1..=4);
    let w: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w_tilde = w.iter().map(|v| v + rng.random_range(-0.3..0.3)).collect();
    RegressionSpec {
        sigma: rng.random_range(0.5..2.0),
        eps: rng.random_range(0.2..1.0),
        eps_tilde: rng.random_range(0.2..1.0),
        w,
        w_tilde,
        k: rng.random_range(30..200),
        trials,
        seed: rng.random(),
    }
}

pub fn theory(c: &Common, a: TheoryArgs) -> Result<()> {
    let mut cfg: TheoryConfig = config::load(c.config.as_deref())?;
    if let Some(t) = a.trials {
        cfg.prop1.trials = t;
        cfg.prop2.trials = t;
    }
    if let Some(v) = a.sweep {
        cfg.sweep = v;
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
        cfg.prop1.seed = data::derive_seed(s, "prop1");
        cfg.prop2.seed = data::derive_seed(s, "prop2");
    }
    let p1 = prop1_simulate(&cfg.prop1)?;
    let p2 = prop2_simulate(&cfg.prop2, std::slice::from_ref(&cfg.x_query))?;

    let mut csv = String::from("quantity,simulated,std_error,analytic,exact\n");
    let mut table = format!(
        "{:<18} {:>14} {:>12} {:>14} {:>14}\n",
        "quantity", "simulated", "std error", "analytic", "exact"
    );
    let mut row = |name: &str, sim: f64, se: Option<f64>, analytic: f64, exact: f64| {
        let se_s = se.map_or(String::new(), |v| format!("{v:.6e}"));
        let _ = writeln!(csv, "{name},{sim:.9e},{se_s},{analytic:.9e},{exact:.9e}");
        let _ = writeln!(
            table,
            "{name:<18} {sim:>14.6e} {:>12} {analytic:>14.6e} {exact:>14.6e}",
            se.map_or("-".to_string(), |v| format!("{v:.2e}"))
        );
    };
    row(
        "prop1_mse_xbar",
        p1.mse_xbar,
        Some(p1.se_xbar),
        p1.analytic_mse_xbar,
        p1.analytic_mse_xbar,
    );
    row(
        "prop1_mse_xtilde",
        p1.mse_xtilde,
        Some(p1.se_xtilde),
        p1.analytic_mse_xtilde,
        p1.exact_mse_xtilde,
    );
    row(
        "prop2_bias",
        p2.bias_hat,
        Some(p2.bias_se),
        p2.analytic_bias,
        p2.analytic_bias,
    );
    row(
        "prop2_variance",
        p2.var_hat,
        None,
        p2.analytic_var,
        p2.exact_var,
    );
    row(
        "prop2_risk",
        p2.risk_hat,
        Some(p2.risk_se),
        p2.risk_bound,
        p2.exact_risk,
    );
    print!(
        "prop 1: N={} K={} trials={}\nprop 2: p={} K={} trials={}\n{table}",
        cfg.prop1.n,
        cfg.prop1.k,
        cfg.prop1.trials,
        cfg.prop2.p(),
        cfg.prop2.k,
        cfg.prop2.trials
    );
    println!(
        "pooled estimator {} the target-only estimator",
        if p1.mse_xtilde < p1.mse_xbar {
            "beats"
        } else {
            "does not beat"
        }
    );

    let mut sweep = String::from("spec,p,k,risk_hat,risk_se,risk_bound,exact_risk,within_bound\n");
    let mut held = 0;
    for i in 0..cfg.sweep {
        let spec = sweep_spec(cfg.seed, i, cfg.sweep_trials);
        let r = prop2_simulate(&spec, &[vec![1.0; spec.p()]])?;
        let ok = r.risk_hat <= r.risk_bound * (1.0 + BOUND_SLACK);
        held += ok as usize;
        let _ = writeln!(
            sweep,
            "{i},{},{},{:.9e},{:.3e},{:.9e},{:.9e},{ok}",
            spec.p(),
            spec.k,
            r.risk_hat,
            r.risk_se,
            r.risk_bound,
            r.exact_risk
        );
    }
    if cfg.sweep > 0 {
        println!(
            "risk within 5% of the bound in {held} of {} random specs",
            cfg.sweep
        );
    }
    if let Some(out) = &a.out {
        create_dir(out)?;
        write_text(&out.join("theory.csv"), &csv)?;
        write_text(&out.join("sweep.csv"), &sweep)?;
    }
    Ok(())
}
