//! Cartesian subsampling masks and the Gaussian k-space partitioner used for
//! self-supervised training.
//!
//! Mask generators work column-wise (full readout rows, phase-encode columns
//! subsampled); the partitioner works on individual `(row, column)` pixels.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::tnsr;

/// Accelerations with a defined ACS fraction.
pub const SUPPORTED_ACCELERATIONS: [u32; 5] = [2, 4, 8, 12, 16];

/// Partition ratios drawn in range mode.
pub const PARTITION_RATIOS: [f64; 6] = [0.3, 0.4, 0.5, 0.6, 0.7, 0.8];

pub const DEFAULT_PARTITION_SIGMA: f64 = 3.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Train,
    Inference,
}

/// ACS fraction (of the phase-encode extent) retained at acceleration `r`.
/// `r = 2` is an inference-only setting.
pub fn acs_fraction_for(r: u32, phase: Phase) -> Result<f64> {
    let frac = match r {
        2 => 0.16,
        4 => 0.08,
        8 => 0.04,
        12 => 0.03,
        16 => 0.02,
        _ => return Err(Error::invalid(format!("unsupported acceleration {r}"))),
    };
    if r == 2 && phase == Phase::Train {
        return Err(Error::invalid("acceleration 2 is only used at inference"));
    }
    Ok(frac)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskScheme {
    Equispaced,
    RandomUniform,
}

/// Binary sampling set over the `(n_x, n_y)` k-space grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingMask {
    grid: Arc<Tensor>,
    acceleration: Option<f64>,
    acs_fraction: Option<f64>,
}

/// Number of ACS columns for a fraction of `ny`, rounding half away from zero.
pub fn acs_columns(ny: usize, fraction: f64) -> usize {
    (fraction * ny as f64).round() as usize
}

/// Column range of the centered ACS band of `n` columns.
pub fn acs_band(ny: usize, n: usize) -> std::ops::Range<usize> {
    let start = (ny / 2).saturating_sub(n / 2);
    start..(start + n).min(ny)
}

impl SamplingMask {
    pub fn new(grid: Tensor, acceleration: Option<f64>, acs_fraction: Option<f64>) -> Result<Self> {
        if grid.ndim() != 2 {
            return Err(Error::shape(
                "mask",
                format!("expected (nx, ny), got {:?}", grid.shape()),
            ));
        }
        if grid.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::invalid("mask entries must be 0 or 1"));
        }
        if let Some(f) = acs_fraction {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::invalid(format!("ACS fraction {f} outside [0, 1]")));
            }
        }
        let mask = SamplingMask {
            grid: Arc::new(grid),
            acceleration,
            acs_fraction,
        };
        if let Some(band) = mask.acs_band_grid() {
            let covered = band
                .data()
                .iter()
                .zip(mask.grid.data())
                .all(|(&b, &m)| b == 0.0 || m == 1.0);
            if !covered {
                return Err(Error::invalid("ACS band is not fully sampled"));
            }
        }
        Ok(mask)
    }

    pub fn full(nx: usize, ny: usize) -> Self {
        SamplingMask {
            grid: Arc::new(Tensor::ones(&[nx, ny])),
            acceleration: Some(1.0),
            acs_fraction: None,
        }
    }

    pub fn from_columns(nx: usize, ny: usize, cols: &[usize]) -> Result<Self> {
        let mut g = Tensor::zeros(&[nx, ny]);
        for &c in cols {
            if c >= ny {
                return Err(Error::invalid(format!(
                    "column {c} out of range for ny = {ny}"
                )));
            }
            for r in 0..nx {
                g.data_mut()[r * ny + c] = 1.0;
            }
        }
        Ok(SamplingMask {
            grid: Arc::new(g),
            acceleration: None,
            acs_fraction: None,
        })
    }

    pub fn grid(&self) -> &Arc<Tensor> {
        &self.grid
    }

    pub fn nx(&self) -> usize {
        self.grid.shape()[0]
    }

    pub fn ny(&self) -> usize {
        self.grid.shape()[1]
    }

    pub fn acceleration(&self) -> Option<f64> {
        self.acceleration
    }

    pub fn acs_fraction(&self) -> Option<f64> {
        self.acs_fraction
    }

    pub fn count(&self) -> usize {
        self.grid.data().iter().filter(|&&v| v == 1.0).count()
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        self.grid.data()[row * self.ny() + col] == 1.0
    }

    /// Columns with at least one sampled entry.
    pub fn sampled_columns(&self) -> Vec<usize> {
        let (nx, ny) = (self.nx(), self.ny());
        (0..ny)
            .filter(|&c| (0..nx).any(|r| self.grid.data()[r * ny + c] == 1.0))
            .collect()
    }

    /// Grid marking the ACS band columns, when an ACS fraction is recorded.
    pub fn acs_band_grid(&self) -> Option<Tensor> {
        let f = self.acs_fraction?;
        let (nx, ny) = (self.nx(), self.ny());
        let band = acs_band(ny, acs_columns(ny, f));
        Some(Tensor::from_fn(&[nx, ny], |i| {
            band.contains(&(i % ny)) as u8 as f64
        }))
    }

    /// Elementwise complement.
    pub fn complement(&self) -> SamplingMask {
        SamplingMask {
            grid: Arc::new(self.grid.map(|v| 1.0 - v)),
            acceleration: None,
            acs_fraction: None,
        }
    }

    fn with_grid(&self, grid: Tensor) -> SamplingMask {
        SamplingMask {
            grid: Arc::new(grid),
            acceleration: None,
            acs_fraction: None,
        }
    }
}

fn check_dims(nx: usize, ny: usize, r: f64, acs_fraction: f64) -> Result<usize> {
    if nx == 0 || ny == 0 {
        return Err(Error::invalid("mask extents must be positive"));
    }
    if !(r >= 1.0) || !r.is_finite() {
        return Err(Error::invalid(format!(
            "acceleration must be >= 1, got {r}"
        )));
    }
    if !(0.0..=1.0).contains(&acs_fraction) {
        return Err(Error::invalid(format!(
            "ACS fraction {acs_fraction} outside [0, 1]"
        )));
    }
    let n_acs = acs_columns(ny, acs_fraction);
    let target = ny as f64 / r;
    if n_acs as f64 > target + 1.0 {
        return Err(Error::invalid(format!(
            "infeasible mask: {n_acs} ACS columns exceed the budget of {target:.1} columns at R = {r}"
        )));
    }
    Ok(n_acs)
}

/// ACS band plus equispaced columns at a seeded random offset; total
/// sampled columns within one of `ny / r`.
pub fn make_equispaced_mask(
    nx: usize,
    ny: usize,
    r: f64,
    acs_fraction: f64,
    seed: u64,
) -> Result<SamplingMask> {
    let n_acs = check_dims(nx, ny, r, acs_fraction)?;
    let band = acs_band(ny, n_acs);
    let target = ny as f64 / r;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let needed = target - n_acs as f64;

    let count_for = |step: usize, offset: usize| -> usize {
        n_acs
            + (offset..ny)
                .step_by(step)
                .filter(|c| !band.contains(c))
                .count()
    };
    let mut cols: Option<Vec<usize>> = None;
    if needed <= 0.5 {
        cols = Some(Vec::new());
    } else {
        let ideal = (ny - n_acs) as f64 / needed;
        let mut steps: Vec<usize> = (1..=ny).collect();
        steps.sort_by(|a, b| {
            (*a as f64 - ideal)
                .abs()
                .total_cmp(&(*b as f64 - ideal).abs())
        });
        let draw: usize = rng.random_range(0..ny);
        'search: for step in steps {
            let start = draw % step;
            for k in 0..step {
                let offset = (start + k) % step;
                if (count_for(step, offset) as f64 - target).abs() <= 1.0 {
                    cols = Some((offset..ny).step_by(step).collect());
                    break 'search;
                }
            }
        }
    }
    let mut cols = cols.ok_or_else(|| {
        Error::invalid(format!(
            "no equispaced pattern meets the budget for ny = {ny}, R = {r}"
        ))
    })?;
    cols.extend(band);
    cols.sort_unstable();
    cols.dedup();
    let m = SamplingMask::from_columns(nx, ny, &cols)?;
    Ok(SamplingMask {
        acceleration: Some(r),
        acs_fraction: Some(acs_fraction),
        ..m
    })
}

/// ACS band plus `round(ny / r) − n_acs` columns drawn uniformly without
/// replacement from outside the band.
pub fn make_random_uniform_mask(
    nx: usize,
    ny: usize,
    r: f64,
    acs_fraction: f64,
    seed: u64,
) -> Result<SamplingMask> {
    let n_acs = check_dims(nx, ny, r, acs_fraction)?;
    let band = acs_band(ny, n_acs);
    let total = ((ny as f64 / r).round() as usize).max(n_acs);
    let outside: Vec<usize> = (0..ny).filter(|c| !band.contains(c)).collect();
    let k = (total - n_acs).min(outside.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cols: Vec<usize> = index::sample(&mut rng, outside.len(), k)
        .into_iter()
        .map(|i| outside[i])
        .collect();
    cols.extend(band);
    cols.sort_unstable();
    let m = SamplingMask::from_columns(nx, ny, &cols)?;
    Ok(SamplingMask {
        acceleration: Some(r),
        acs_fraction: Some(acs_fraction),
        ..m
    })
}

pub fn make_mask(
    scheme: MaskScheme,
    nx: usize,
    ny: usize,
    r: f64,
    acs_fraction: f64,
    seed: u64,
) -> Result<SamplingMask> {
    match scheme {
        MaskScheme::Equispaced => make_equispaced_mask(nx, ny, r, acs_fraction, seed),
        MaskScheme::RandomUniform => make_random_uniform_mask(nx, ny, r, acs_fraction, seed),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    /// Target ratio |Θ| / |M|.
    pub q: f64,
    /// Standard deviation (pixels) of the Gaussian around the k-space center.
    pub sigma: f64,
    /// Side of the centered window always assigned to Λ.
    pub acs_window: usize,
    pub seed: u64,
}

/// Outcome of [`gaussian_partition`].
#[derive(Clone, Debug)]
pub struct Partition {
    /// Loss-target subset.
    pub theta: SamplingMask,
    /// Model-input subset.
    pub lambda: SamplingMask,
    /// |Θ| / |M| when the draw loop stopped, before the window reassignment.
    pub ratio_before_window: f64,
}

/// Splits `mask` into disjoint Θ (Gaussian-drawn around the center until
/// |Θ|/|M| first reaches `q`) and Λ = M \ Θ, then moves the centered
/// `w × w` window into Λ.
pub fn gaussian_partition(mask: &SamplingMask, spec: &PartitionSpec) -> Result<Partition> {
    if !(spec.q > 0.0 && spec.q < 1.0) {
        return Err(Error::invalid(format!(
            "partition ratio q = {} outside (0, 1)",
            spec.q
        )));
    }
    if !(spec.sigma > 0.0) {
        return Err(Error::invalid(format!(
            "partition sigma must be positive, got {}",
            spec.sigma
        )));
    }
    let m_count = mask.count();
    if m_count == 0 {
        return Err(Error::invalid("cannot partition an empty mask"));
    }
    if spec.acs_window * spec.acs_window > m_count {
        return Err(Error::invalid(format!(
            "ACS window {0}x{0} exceeds the {m_count} sampled positions",
            spec.acs_window
        )));
    }
    let (nx, ny) = (mask.nx(), mask.ny());
    let mut theta = vec![0.0; nx * ny];
    let mut chosen = 0usize;
    let reached = |c: usize| c as f64 / m_count as f64 >= spec.q;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let row_dist = Normal::new(nx as f64 / 2.0, spec.sigma).expect("sigma checked positive");
    let col_dist = Normal::new(ny as f64 / 2.0, spec.sigma).expect("sigma checked positive");
    let budget = 100 * m_count;
    let mut draws = 0usize;
    while !reached(chosen) && draws < budget {
        draws += 1;
        let r = row_dist.sample(&mut rng).round();
        let c = col_dist.sample(&mut rng).round();
        if r < 0.0 || c < 0.0 || r >= nx as f64 || c >= ny as f64 {
            continue;
        }
        let i = r as usize * ny + c as usize;
        if mask.grid.data()[i] == 1.0 && theta[i] == 0.0 {
            theta[i] = 1.0;
            chosen += 1;
        }
    }
    if !reached(chosen) {
        // Rejection stalled; finish uniformly over the untouched positions.
        let remaining: Vec<usize> = (0..nx * ny)
            .filter(|&i| mask.grid.data()[i] == 1.0 && theta[i] == 0.0)
            .collect();
        let mut needed = 0;
        while !reached(chosen + needed) {
            needed += 1;
        }
        for k in index::sample(&mut rng, remaining.len(), needed) {
            theta[remaining[k]] = 1.0;
        }
        chosen += needed;
    }
    let ratio_before_window = chosen as f64 / m_count as f64;

    let w = spec.acs_window;
    let (r0, c0) = (
        (nx / 2).saturating_sub(w / 2),
        (ny / 2).saturating_sub(w / 2),
    );
    for r in r0..(r0 + w).min(nx) {
        for c in c0..(c0 + w).min(ny) {
            theta[r * ny + c] = 0.0;
        }
    }
    let lambda: Vec<f64> = mask
        .grid
        .data()
        .iter()
        .zip(&theta)
        .map(|(&m, &t)| m - t)
        .collect();
    Ok(Partition {
        theta: mask.with_grid(Tensor::from_parts(vec![nx, ny], theta)),
        lambda: mask.with_grid(Tensor::from_parts(vec![nx, ny], lambda)),
        ratio_before_window,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RatioMode {
    Fixed,
    Range,
}

/// Partition ratio q: 0.5 in fixed mode, else uniform over
/// [`PARTITION_RATIOS`].
pub fn sample_partition_ratio<R: Rng + ?Sized>(mode: RatioMode, rng: &mut R) -> f64 {
    match mode {
        RatioMode::Fixed => 0.5,
        RatioMode::Range => PARTITION_RATIOS[rng.random_range(0..PARTITION_RATIOS.len())],
    }
}

/// Sidecar metadata written next to a mask's `.tnsr` file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskMeta {
    pub acceleration: Option<f64>,
    pub acs_fraction: Option<f64>,
    pub seed: u64,
    pub scheme: String,
}

/// Writes `<stem>.tnsr` and `<stem>.json`.
pub fn save_mask(stem: &Path, mask: &SamplingMask, meta: &MaskMeta) -> Result<()> {
    tnsr::save(stem.with_extension("tnsr"), &mask.grid)?;
    let json = serde_json::to_string_pretty(meta).expect("mask metadata serializes");
    let path = stem.with_extension("json");
    fs::write(&path, json + "\n").map_err(|e| Error::io(path, e))
}

pub fn load_mask(stem: &Path) -> Result<(SamplingMask, MaskMeta)> {
    let grid = tnsr::load(stem.with_extension("tnsr"))?;
    let path = stem.with_extension("json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: MaskMeta =
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    let mask = SamplingMask::new(grid, meta.acceleration, meta.acs_fraction)?;
    Ok((mask, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn acs_table() {
        assert_eq!(acs_fraction_for(4, Phase::Train).unwrap(), 0.08);
        assert_eq!(acs_fraction_for(16, Phase::Inference).unwrap(), 0.02);
        assert_eq!(acs_fraction_for(2, Phase::Inference).unwrap(), 0.16);
        assert!(acs_fraction_for(2, Phase::Train).is_err());
        assert!(acs_fraction_for(6, Phase::Inference).is_err());
    }

    #[test]
    fn unit_acceleration_is_full() {
        for scheme in [MaskScheme::Equispaced, MaskScheme::RandomUniform] {
            let m = make_mask(scheme, 8, 12, 1.0, 0.0, 3).unwrap();
            assert_eq!(m.count(), 96);
        }
    }

    #[test]
    fn equispaced_counts() {
        let m = make_equispaced_mask(4, 64, 4.0, 0.08, 1).unwrap();
        let cols = m.sampled_columns();
        assert!((cols.len() as i64 - 16).abs() <= 1, "{}", cols.len());
        for c in acs_band(64, 5) {
            assert!(cols.contains(&c));
        }
        assert_eq!(acs_band(64, 5), 30..35);
        assert_eq!(m, make_equispaced_mask(4, 64, 4.0, 0.08, 1).unwrap());
    }

    #[test]
    fn random_uniform_counts() {
        let m = make_random_uniform_mask(4, 100, 4.0, 0.08, 5).unwrap();
        assert_eq!(m.sampled_columns().len(), 25);
        assert_eq!(acs_columns(100, 0.08), 8);
        let masks: Vec<_> = (0..10)
            .map(|s| make_random_uniform_mask(4, 100, 4.0, 0.08, s).unwrap())
            .collect();
        for i in 0..10 {
            for j in i + 1..10 {
                assert_ne!(masks[i], masks[j]);
            }
        }
    }

    #[test]
    fn infeasible_acs_rejected() {
        assert!(make_equispaced_mask(4, 64, 8.0, 0.5, 0).is_err());
        assert!(make_random_uniform_mask(4, 64, 0.5, 0.0, 0).is_err());
    }

    #[test]
    fn acs_rounding_is_half_away_from_zero() {
        // 0.08 · 50 = 4.0; 0.03 · 50 = 1.5 -> 2; 0.02 · 25 = 0.5 -> 1.
        assert_eq!(acs_columns(50, 0.08), 4);
        assert_eq!(acs_columns(50, 0.03), 2);
        assert_eq!(acs_columns(25, 0.02), 1);
    }

    #[test]
    fn partition_minimal_ratio_draws_one_pixel() {
        let m = make_equispaced_mask(16, 16, 4.0, 0.08, 0).unwrap();
        let spec = PartitionSpec {
            q: 1.0 / m.count() as f64,
            sigma: 3.5,
            acs_window: 0,
            seed: 2,
        };
        let p = gaussian_partition(&m, &spec).unwrap();
        assert_eq!(p.theta.count(), 1);
        assert_eq!(p.lambda.count(), m.count() - 1);
    }

    #[test]
    fn partition_rejects_bad_specs() {
        let m = make_equispaced_mask(16, 16, 4.0, 0.08, 0).unwrap();
        for q in [0.0, 1.0, -0.1, 1.5] {
            let spec = PartitionSpec {
                q,
                sigma: 3.5,
                acs_window: 0,
                seed: 0,
            };
            assert!(gaussian_partition(&m, &spec).is_err());
        }
        let spec = PartitionSpec {
            q: 0.5,
            sigma: 3.5,
            acs_window: 100,
            seed: 0,
        };
        assert!(gaussian_partition(&m, &spec).is_err());
        let empty = SamplingMask::new(Tensor::zeros(&[4, 4]), None, None).unwrap();
        let spec = PartitionSpec {
            q: 0.5,
            sigma: 3.5,
            acs_window: 0,
            seed: 0,
        };
        assert!(gaussian_partition(&empty, &spec).is_err());
    }

    #[test]
    fn window_goes_to_lambda() {
        let m = make_equispaced_mask(32, 32, 4.0, 0.08, 0).unwrap();
        let spec = PartitionSpec {
            q: 0.8,
            sigma: 3.5,
            acs_window: 4,
            seed: 9,
        };
        let p = gaussian_partition(&m, &spec).unwrap();
        for r in 14..18 {
            for c in 14..18 {
                if m.contains(r, c) {
                    assert!(p.lambda.contains(r, c) && !p.theta.contains(r, c));
                }
            }
        }
    }

    #[test]
    fn ratio_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_partition_ratio(RatioMode::Fixed, &mut rng), 0.5);
        let mut counts = [0usize; 6];
        for _ in 0..10_000 {
            let q = sample_partition_ratio(RatioMode::Range, &mut rng);
            counts[PARTITION_RATIOS.iter().position(|&v| v == q).unwrap()] += 1;
        }
        for c in counts {
            assert!((c as f64 / 1e4 - 1.0 / 6.0).abs() < 0.02, "{counts:?}");
        }
        let a = sample_partition_ratio(RatioMode::Range, &mut ChaCha8Rng::seed_from_u64(42));
        let b = sample_partition_ratio(RatioMode::Range, &mut ChaCha8Rng::seed_from_u64(42));
        assert_eq!(a, b);
    }

    #[test]
    fn mask_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("m");
        let m = make_random_uniform_mask(8, 32, 4.0, 0.08, 1).unwrap();
        let meta = MaskMeta {
            acceleration: Some(4.0),
            acs_fraction: Some(0.08),
            seed: 1,
            scheme: "random_uniform".into(),
        };
        save_mask(&stem, &m, &meta).unwrap();
        let (back, meta2) = load_mask(&stem).unwrap();
        assert_eq!(back, m);
        assert_eq!(meta2, meta);
    }

    #[test]
    fn new_validates_band() {
        let g = Tensor::zeros(&[4, 10]);
        assert!(SamplingMask::new(g.clone(), Some(4.0), Some(0.2)).is_err());
        assert!(SamplingMask::new(g, None, None).is_ok());
        assert!(SamplingMask::new(Tensor::full(&[2, 2], 0.5), None, None).is_err());
    }
}
