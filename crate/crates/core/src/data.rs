//! Synthetic multi-coil datasets.
//!
//! Phantoms are sums of rotated ellipses drawn from three families with
//! disjoint parameter ranges, so that a model supervised on the proxy
//! families meets a genuine domain shift on the target family. Each image
//! carries a smooth low-order phase.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::fft2c;
use crate::mri::{self, ComplexImage, MultiCoilKSpace, SensitivityMaps};
use crate::tensor::Tensor;
use crate::tnsr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    ProxyA,
    ProxyB,
    Target,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::ProxyA, Family::ProxyB, Family::Target];

    pub fn name(self) -> &'static str {
        match self {
            Family::ProxyA => "proxy_a",
            Family::ProxyB => "proxy_b",
            Family::Target => "target",
        }
    }

    pub fn is_proxy(self) -> bool {
        self != Family::Target
    }

    fn params(self) -> FamilyParams {
        match self {
            Family::ProxyA => FamilyParams {
                body_radius: (0.72, 0.85),
                aspect: (0.85, 1.0),
                base: (0.25, 0.35),
                inner_count: (4, 7),
                inner_radius: (0.10, 0.25),
                inner_aspect: (0.6, 1.0),
                inner_delta: (0.15, 0.45),
            },
            Family::ProxyB => FamilyParams {
                body_radius: (0.80, 0.92),
                aspect: (0.45, 0.62),
                base: (0.18, 0.28),
                inner_count: (2, 4),
                inner_radius: (0.15, 0.35),
                inner_aspect: (0.25, 0.5),
                inner_delta: (0.25, 0.55),
            },
            Family::Target => FamilyParams {
                body_radius: (0.60, 0.72),
                aspect: (0.68, 0.84),
                base: (0.68, 0.80),
                inner_count: (6, 10),
                inner_radius: (0.04, 0.12),
                inner_aspect: (0.5, 1.0),
                inner_delta: (0.10, 0.30),
            },
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s.replace('-', "_"))
            .ok_or_else(|| Error::invalid(format!("unknown family '{s}'")))
    }
}

/// Parameter ranges of one family. Coordinates are relative to the half
/// field of view, so `1.0` reaches the edge.
#[derive(Clone, Copy, Debug)]
struct FamilyParams {
    body_radius: (f64, f64),
    aspect: (f64, f64),
    base: (f64, f64),
    inner_count: (usize, usize),
    inner_radius: (f64, f64),
    inner_aspect: (f64, f64),
    /// Magnitude of the signed intensity offset of inner ellipses.
    inner_delta: (f64, f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub family: Family,
    pub nx: usize,
    pub ny: usize,
    pub seed: u64,
}

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
    value: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    rng.random_range(lo..=hi)
}

/// Ellipse phantom `(n_x, n_y, 2)` with magnitude in `[0, 1]` and a smooth
/// bilinear phase.
pub fn make_phantom(spec: &PhantomSpec) -> Result<ComplexImage> {
    if spec.nx < 32 || spec.ny < 32 {
        return Err(Error::invalid(format!(
            "phantom extents must be >= 32, got {}x{}",
            spec.nx, spec.ny
        )));
    }
    let p = spec.family.params();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let angle = rng.random_range(0.0..std::f64::consts::PI);
    let r = uniform(&mut rng, p.body_radius);
    let body = Ellipse {
        cx: rng.random_range(-0.05..0.05),
        cy: rng.random_range(-0.05..0.05),
        a: r,
        b: r * uniform(&mut rng, p.aspect),
        cos: angle.cos(),
        sin: angle.sin(),
        value: uniform(&mut rng, p.base),
    };
    let n_inner = rng.random_range(p.inner_count.0..=p.inner_count.1);
    let mut inner = Vec::with_capacity(n_inner);
    for _ in 0..n_inner {
        let a = uniform(&mut rng, p.inner_radius);
        // Centers stay inside the body's inscribed circle.
        let rho = rng.random_range(0.0..(body.b - a).max(0.0) + 1e-9);
        let phi = rng.random_range(0.0..2.0 * std::f64::consts::PI);
        let t = rng.random_range(0.0..std::f64::consts::PI);
        let sign = if rng.random_bool(0.6) { 1.0 } else { -1.0 };
        inner.push(Ellipse {
            cx: body.cx + rho * phi.cos(),
            cy: body.cy + rho * phi.sin(),
            a,
            b: a * uniform(&mut rng, p.inner_aspect),
            cos: t.cos(),
            sin: t.sin(),
            value: sign * uniform(&mut rng, p.inner_delta),
        });
    }
    let phase: [f64; 4] = std::array::from_fn(|_| rng.random_range(-0.5..0.5));

    let (nx, ny) = (spec.nx, spec.ny);
    let data = Tensor::from_fn(&[nx, ny, 2], |i| {
        let (row, col) = ((i / 2) / ny, (i / 2) % ny);
        let x = 2.0 * row as f64 / nx as f64 - 1.0;
        let y = 2.0 * col as f64 / ny as f64 - 1.0;
        let mut m = 0.0;
        if body.contains(x, y) {
            m = body.value;
            for e in &inner {
                if e.contains(x, y) {
                    m += e.value;
                }
            }
        }
        let m = m.clamp(0.0, 1.0);
        let ph = phase[0] + phase[1] * x + phase[2] * y + phase[3] * x * y;
        if i % 2 == 0 {
            m * ph.cos()
        } else {
            m * ph.sin()
        }
    });
    ComplexImage::new(data)
}

/// Gaussian-blob coil profiles centered on a ring around the field of view,
/// each with a smooth linear phase, RSS-normalized.
pub fn make_coil_maps(nc: usize, nx: usize, ny: usize, seed: u64) -> Result<SensitivityMaps> {
    if nc < 2 {
        return Err(Error::invalid(format!("need at least 2 coils, got {nc}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coils: Vec<[f64; 5]> = (0..nc)
        .map(|k| {
            let ang =
                2.0 * std::f64::consts::PI * (k as f64 + rng.random_range(-0.15..0.15)) / nc as f64;
            let ring = rng.random_range(1.1..1.3);
            let width = rng.random_range(0.8..1.0);
            let (gx, gy) = (rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8));
            [ring * ang.cos(), ring * ang.sin(), width, gx, gy]
        })
        .collect();
    let raw = Tensor::from_fn(&[nc, nx, ny, 2], |i| {
        let k = i / (nx * ny * 2);
        let p = (i / 2) % (nx * ny);
        let x = 2.0 * (p / ny) as f64 / nx as f64 - 1.0;
        let y = 2.0 * (p % ny) as f64 / ny as f64 - 1.0;
        let [cx, cy, w, gx, gy] = coils[k];
        let mag = (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * w * w)).exp();
        let ph = gx * x + gy * y;
        if i % 2 == 0 {
            mag * ph.cos()
        } else {
            mag * ph.sin()
        }
    });
    SensitivityMaps::normalized(raw)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitCount {
    pub family: Family,
    pub split: Split,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub nx: usize,
    pub ny: usize,
    pub coils: usize,
    /// Per-component k-space noise standard deviation.
    pub noise_sigma: f64,
    pub counts: Vec<SplitCount>,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        let c = |family, split, count| SplitCount {
            family,
            split,
            count,
        };
        DatasetConfig {
            nx: 64,
            ny: 64,
            coils: 4,
            noise_sigma: 0.0,
            counts: vec![
                c(Family::ProxyA, Split::Train, 200),
                c(Family::ProxyB, Split::Train, 200),
                c(Family::Target, Split::Train, 100),
                c(Family::Target, Split::Val, 30),
                c(Family::Target, Split::Test, 30),
            ],
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub family: Family,
    pub split: Split,
    /// Paths relative to the dataset root.
    pub kspace: String,
    pub maps: String,
    pub gt: String,
    pub n_c: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub nx: usize,
    pub ny: usize,
    pub coils: usize,
    pub records: Vec<SampleRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl DatasetManifest {
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        m.validate()
            .map_err(|e| Error::format(&path, e.to_string()))?;
        Ok(m)
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        let path = root.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Ids are unique, hence splits are disjoint.
    pub fn validate(&self) -> Result<()> {
        let mut ids: Vec<&str> = self.records.iter().map(|r| r.id.as_str()).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::invalid(format!("duplicate sample id '{}'", w[0])));
        }
        Ok(())
    }

    pub fn select(&self, split: Split, families: &[Family]) -> Vec<SampleRecord> {
        self.records
            .iter()
            .filter(|r| r.split == split && families.contains(&r.family))
            .cloned()
            .collect()
    }
}

/// One loaded sample.
#[derive(Clone, Debug)]
pub struct Sample {
    pub record: SampleRecord,
    pub kspace: MultiCoilKSpace,
    pub maps: SensitivityMaps,
    pub gt: Tensor,
}

pub fn load_sample(root: &Path, record: &SampleRecord) -> Result<Sample> {
    let kspace = MultiCoilKSpace::new(tnsr::load(root.join(&record.kspace))?)?;
    let maps_t = tnsr::load(root.join(&record.maps))?;
    let maps = SensitivityMaps::new(maps_t)
        .map_err(|e| Error::format(root.join(&record.maps), e.to_string()))?;
    let gt = tnsr::load(root.join(&record.gt))?;
    Ok(Sample {
        record: record.clone(),
        kspace,
        maps,
        gt,
    })
}

/// FNV-1a of `id`, mixed with the dataset seed.
pub fn derive_seed(base: u64, id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ base.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Tensors of one synthesized sample: `(y, S, gt)`.
pub fn synthesize(
    cfg: &DatasetConfig,
    family: Family,
    seed: u64,
) -> Result<(MultiCoilKSpace, SensitivityMaps, Tensor)> {
    let x = make_phantom(&PhantomSpec {
        family,
        nx: cfg.nx,
        ny: cfg.ny,
        seed,
    })?;
    let maps = make_coil_maps(cfg.coils, cfg.nx, cfg.ny, seed ^ 0x5eed)?;
    let mut y = fft2c(&mri::expand(&x, &maps)?)?;
    if cfg.noise_sigma > 0.0 {
        let full = crate::sampling::SamplingMask::full(cfg.nx, cfg.ny);
        y = mri::simulate_acquisition(&x, &full, &maps, cfg.noise_sigma, seed ^ 0x0015e)?
            .into_tensor();
    }
    let y = MultiCoilKSpace::new(y)?;
    let gt = mri::rss_reconstruct(&y);
    Ok((y, maps, gt))
}

/// Generates every sample of `cfg` under `root/<split>/` and writes the
/// manifest. Samples are independent and generated in parallel.
pub fn build_dataset(cfg: &DatasetConfig, root: &Path) -> Result<DatasetManifest> {
    if cfg.noise_sigma < 0.0 {
        return Err(Error::invalid("noise sigma must be >= 0"));
    }
    let mut records = Vec::new();
    for c in &cfg.counts {
        for i in 0..c.count {
            let id = format!("{}-{}-{i:04}", c.family, c.split.name());
            let dir = c.split.name();
            records.push(SampleRecord {
                kspace: format!("{dir}/{id}.y.tnsr"),
                maps: format!("{dir}/{id}.S.tnsr"),
                gt: format!("{dir}/{id}.gt.tnsr"),
                seed: derive_seed(cfg.seed, &id),
                id,
                family: c.family,
                split: c.split,
                n_c: cfg.coils,
            });
        }
    }
    let manifest = DatasetManifest {
        nx: cfg.nx,
        ny: cfg.ny,
        coils: cfg.coils,
        records,
    };
    manifest.validate()?;
    for split in Split::ALL {
        let dir = root.join(split.name());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    manifest
        .records
        .par_iter()
        .try_for_each(|r| -> Result<()> {
            let (y, maps, gt) = synthesize(cfg, r.family, r.seed)?;
            tnsr::save(root.join(&r.kspace), y.tensor())?;
            tnsr::save(root.join(&r.maps), maps.tensor())?;
            tnsr::save(root.join(&r.gt), &gt)
        })?;
    manifest.save(root)?;
    Ok(manifest)
}

/// Repeats every record of `family` `factor` times (others once).
pub fn oversample(
    records: &[SampleRecord],
    family: Family,
    factor: usize,
) -> Result<Vec<SampleRecord>> {
    if factor == 0 {
        return Err(Error::invalid("oversampling factor must be >= 1"));
    }
    if !records.iter().any(|r| r.family == family) {
        return Err(Error::invalid(format!(
            "no records of family '{family}' to oversample"
        )));
    }
    Ok(records
        .iter()
        .flat_map(|r| {
            let n = if r.family == family { factor } else { 1 };
            std::iter::repeat_n(r.clone(), n)
        })
        .collect())
}

/// Visiting order of a pool of `n` items in `epoch`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(epoch.wrapping_mul(0x9e37_79b9)));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Default data root: `$JSSL_DATA_DIR` or `./data`.
pub fn default_data_dir() -> PathBuf {
    std::env::var_os("JSSL_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(family: Family, seed: u64) -> PhantomSpec {
        PhantomSpec {
            family,
            nx: 32,
            ny: 32,
            seed,
        }
    }

    fn mean_intensity(family: Family, seed: u64) -> f64 {
        let m = make_phantom(&spec(family, seed)).unwrap().magnitude();
        m.sum() / m.len() as f64
    }

    /// Two-sample Kolmogorov-Smirnov statistic.
    fn ks(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        let mut d: f64 = 0.0;
        for &v in a.iter().chain(&b) {
            let fa = a.partition_point(|x| *x <= v) as f64 / a.len() as f64;
            let fb = b.partition_point(|x| *x <= v) as f64 / b.len() as f64;
            d = d.max((fa - fb).abs());
        }
        d
    }

    #[test]
    fn phantom_determinism_and_range() {
        for f in Family::ALL {
            let a = make_phantom(&spec(f, 3)).unwrap();
            assert_eq!(a, make_phantom(&spec(f, 3)).unwrap());
            assert!(a.magnitude().max() <= 1.0 + 1e-12);
            assert!(a.magnitude().max() > 0.0);
            // Nonzero phase somewhere.
            assert!(a.tensor().data().chunks(2).any(|c| c[1].abs() > 1e-3));
        }
        assert!(make_phantom(&PhantomSpec {
            family: Family::Target,
            nx: 16,
            ny: 64,
            seed: 0
        })
        .is_err());
    }

    #[test]
    fn families_are_separated() {
        let a: Vec<f64> = (0..100)
            .map(|s| mean_intensity(Family::ProxyA, s))
            .collect();
        let t: Vec<f64> = (0..100)
            .map(|s| mean_intensity(Family::Target, 1000 + s))
            .collect();
        assert!(ks(a.clone(), t.clone()) > 0.2);
        // Mean-intensity threshold classifier.
        let thr = 0.5 * (a.iter().sum::<f64>() / 100.0 + t.iter().sum::<f64>() / 100.0);
        let above_t = t.iter().filter(|v| **v > thr).count();
        let below_a = a.iter().filter(|v| **v <= thr).count();
        let acc = (above_t + below_a) as f64 / 200.0;
        let acc = acc.max(1.0 - acc);
        assert!(acc > 0.8, "{acc}");
    }

    #[test]
    fn coil_maps() {
        let s = make_coil_maps(4, 64, 64, 1).unwrap();
        assert!(mri::rss_deviation(s.tensor()) < 1e-10);
        assert_eq!(s, make_coil_maps(4, 64, 64, 1).unwrap());
        assert!(make_coil_maps(1, 8, 8, 0).is_err());
        let (nc, n) = (4, 64);
        let d = s.tensor().data();
        let mut worst: f64 = 0.0;
        for k in 0..nc {
            for i in 0..n {
                for j in 0..n - 1 {
                    for c in 0..2 {
                        let a = d[2 * ((k * n + i) * n + j) + c];
                        let b = d[2 * ((k * n + i) * n + j + 1) + c];
                        let e = d[2 * ((k * n + j) * n + i) + c];
                        let f = d[2 * ((k * n + j + 1) * n + i) + c];
                        worst = worst.max((a - b).abs()).max((e - f).abs());
                    }
                }
            }
        }
        assert!(worst < 0.5, "{worst}");
    }

    #[test]
    fn small_dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig {
            nx: 32,
            ny: 32,
            coils: 2,
            counts: vec![
                SplitCount {
                    family: Family::ProxyA,
                    split: Split::Train,
                    count: 2,
                },
                SplitCount {
                    family: Family::Target,
                    split: Split::Test,
                    count: 2,
                },
            ],
            ..DatasetConfig::default()
        };
        let m = build_dataset(&cfg, dir.path()).unwrap();
        assert_eq!(m.records.len(), 4);
        assert_eq!(DatasetManifest::load(dir.path()).unwrap(), m);
        for r in &m.records {
            let s = load_sample(dir.path(), r).unwrap();
            assert_eq!(s.gt, mri::rss_reconstruct(&s.kspace));
            let (y, maps, gt) = synthesize(&cfg, r.family, r.seed).unwrap();
            assert_eq!((&y, &maps, &gt), (&s.kspace, &s.maps, &s.gt));
            // k-space agrees with gt through the stored maps.
            let sense = mri::sense_reconstruct(&s.kspace, &s.maps).unwrap();
            assert!(sense.max_abs_diff(&s.gt).unwrap() < 1e-10);
            assert!(dir
                .path()
                .join(&r.kspace)
                .starts_with(dir.path().join(r.split.name())));
        }
        assert_eq!(m.select(Split::Test, &[Family::Target]).len(), 2);
    }

    #[test]
    fn manifest_rejects_duplicates() {
        let r = SampleRecord {
            id: "a".into(),
            family: Family::Target,
            split: Split::Train,
            kspace: String::new(),
            maps: String::new(),
            gt: String::new(),
            n_c: 2,
            seed: 0,
        };
        let m = DatasetManifest {
            nx: 32,
            ny: 32,
            coils: 2,
            records: vec![
                r.clone(),
                SampleRecord {
                    split: Split::Test,
                    ..r
                },
            ],
        };
        assert!(m.validate().is_err());
    }

    #[test]
    fn oversampling_and_epoch_order() {
        let mk = |id: &str, family| SampleRecord {
            id: id.into(),
            family,
            split: Split::Train,
            kspace: String::new(),
            maps: String::new(),
            gt: String::new(),
            n_c: 2,
            seed: 0,
        };
        let recs = vec![
            mk("a", Family::Target),
            mk("b", Family::ProxyA),
            mk("c", Family::Target),
        ];
        assert_eq!(oversample(&recs, Family::Target, 1).unwrap(), recs);
        assert_eq!(oversample(&recs, Family::Target, 2).unwrap().len(), 5);
        assert!(oversample(&recs, Family::ProxyB, 2).is_err());
        assert!(oversample(&recs, Family::Target, 0).is_err());
        let orders: Vec<_> = (0..5).map(|e| epoch_order(20, 7, e)).collect();
        for i in 0..5 {
            for j in i + 1..5 {
                assert_ne!(orders[i], orders[j]);
            }
        }
        assert_eq!(epoch_order(20, 7, 3), orders[3]);
    }

    #[test]
    fn family_names_round_trip() {
        for f in Family::ALL {
            assert_eq!(f.name().parse::<Family>().unwrap(), f);
        }
        assert!("brain".parse::<Family>().is_err());
    }
}
