//! Paired significance tests.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};
use crate::eval::EvalRecord;

/// Significance level used to flag results.
pub const ALPHA: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub statistic: f64,
    pub p_value: f64,
    pub df: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Wilcoxon {
    /// `min(W⁺, W⁻)`.
    pub statistic: f64,
    pub w_plus: f64,
    pub w_minus: f64,
    /// Nonzero differences entering the ranking.
    pub n_ranked: usize,
    pub z: f64,
    pub p_value: f64,
}

/// Two-sided paired t-test on differences `d`.
pub fn paired_t(d: &[f64]) -> Result<TTest> {
    let n = d.len();
    if n < 2 {
        return Err(Error::invalid("paired t-test needs at least 2 pairs"));
    }
    let nf = n as f64;
    let mean = d.iter().sum::<f64>() / nf;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    let df = nf - 1.0;
    if var == 0.0 {
        return Ok(if mean == 0.0 {
            TTest {
                statistic: 0.0,
                p_value: 1.0,
                df,
            }
        } else {
            TTest {
                statistic: mean.signum() * f64::INFINITY,
                p_value: 0.0,
                df,
            }
        });
    }
    let t = mean / (var / nf).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).expect("df > 0");
    Ok(TTest {
        statistic: t,
        p_value: (2.0 * dist.cdf(-t.abs())).min(1.0),
        df,
    })
}

/// Average ranks (1-based) of `v`, ties sharing the mean of their ranks.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[idx[k]] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Wilcoxon signed-rank test, normal approximation with tie correction.
/// Zero differences are dropped; with none left the result is `p = 1`.
pub fn wilcoxon_signed_rank(d: &[f64]) -> Wilcoxon {
    let nz: Vec<f64> = d.iter().copied().filter(|x| *x != 0.0).collect();
    let n = nz.len();
    if n == 0 {
        return Wilcoxon {
            statistic: 0.0,
            w_plus: 0.0,
            w_minus: 0.0,
            n_ranked: 0,
            z: 0.0,
            p_value: 1.0,
        };
    }
    let abs: Vec<f64> = nz.iter().map(|x| x.abs()).collect();
    let ranks = average_ranks(&abs);
    let w_plus: f64 = nz
        .iter()
        .zip(&ranks)
        .filter(|(x, _)| **x > 0.0)
        .fold(0.0, |acc, (_, r)| acc + r);
    let nf = n as f64;
    let total = nf * (nf + 1.0) / 2.0;
    let w_minus = total - w_plus;

    let mut sorted = abs.clone();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let mean = total / 2.0;
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    let (z, p) = if var > 0.0 {
        let z = (w_plus - mean) / var.sqrt();
        let normal = Normal::standard();
        (z, (2.0 * normal.cdf(-z.abs())).min(1.0))
    } else {
        (0.0, 1.0)
    };
    Wilcoxon {
        statistic: w_plus.min(w_minus),
        w_plus,
        w_minus,
        n_ranked: n,
        z,
        p_value: p,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Ssim,
    Psnr,
    Nmse,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Ssim => "ssim",
            Metric::Psnr => "psnr",
            Metric::Nmse => "nmse",
        }
    }

    pub fn of(self, r: &EvalRecord) -> f64 {
        match self {
            Metric::Ssim => r.ssim,
            Metric::Psnr => r.psnr,
            Metric::Nmse => r.nmse,
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ssim" => Ok(Metric::Ssim),
            "psnr" => Ok(Metric::Psnr),
            "nmse" => Ok(Metric::Nmse),
            _ => Err(Error::invalid(format!("unknown metric '{s}'"))),
        }
    }
}

/// Both paired tests on `a − b`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedTest {
    pub n: usize,
    pub mean_diff: f64,
    pub t: TTest,
    pub wilcoxon: Wilcoxon,
    pub t_significant: bool,
    pub wilcoxon_significant: bool,
}

/// Minimum number of pairs accepted by [`paired_test`].
pub const MIN_PAIRS: usize = 6;

/// Pairs `a` and `b` by (sample id, R) and tests the metric differences.
pub fn paired_test(a: &[EvalRecord], b: &[EvalRecord], metric: Metric) -> Result<PairedTest> {
    let key = |r: &EvalRecord| (r.sample_id.clone(), r.r);
    let mut index = std::collections::BTreeMap::new();
    for r in b {
        if index.insert(key(r), metric.of(r)).is_some() {
            return Err(Error::invalid(format!(
                "duplicate record {} at R={}",
                r.sample_id, r.r
            )));
        }
    }
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "record sets differ in size: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let d = a
        .iter()
        .map(|r| {
            index.get(&key(r)).map(|v| metric.of(r) - v).ok_or_else(|| {
                Error::invalid(format!(
                    "record {} at R={} has no partner",
                    r.sample_id, r.r
                ))
            })
        })
        .collect::<Result<Vec<f64>>>()?;
    if d.len() < MIN_PAIRS {
        return Err(Error::invalid(format!(
            "paired tests need at least {MIN_PAIRS} pairs, got {}",
            d.len()
        )));
    }
    let t = paired_t(&d)?;
    let wilcoxon = wilcoxon_signed_rank(&d);
    Ok(PairedTest {
        n: d.len(),
        mean_diff: d.iter().sum::<f64>() / d.len() as f64,
        t,
        wilcoxon,
        t_significant: t.p_value < ALPHA,
        wilcoxon_significant: wilcoxon.p_value < ALPHA,
    })
}
