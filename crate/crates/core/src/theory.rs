//! Monte-Carlo checks of the two bias–variance propositions motivating
//! joint training: pooling proxy samples into a mean estimate, and least
//! squares fitted on proxy labels.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum number of Monte-Carlo trials.
pub const MIN_TRIALS: usize = 1000;

fn trial_rng(seed: u64, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    rng
}

/// Mean and standard error of the mean.
fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Target `N(μ₁, σ₁²)` with `N` samples and proxy `N(μ₂, σ₂²)` with `K`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub mu1: f64,
    pub mu2: f64,
    pub sigma1: f64,
    pub sigma2: f64,
    pub n: usize,
    pub k: usize,
    pub trials: usize,
    pub seed: u64,
}

impl MixtureSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma1 > 0.0 && self.sigma2 > 0.0) {
            return Err(Error::invalid("standard deviations must be positive"));
        }
        if self.n == 0 || self.k == 0 {
            return Err(Error::invalid("N and K must be positive"));
        }
        if self.trials < MIN_TRIALS {
            return Err(Error::invalid(format!(
                "need at least {MIN_TRIALS} trials, got {}",
                self.trials
            )));
        }
        Ok(())
    }

    /// Whether `(μ₁ − μ₂)² < c σ₁² / N`.
    pub fn satisfies(&self, c: f64) -> bool {
        (self.mu1 - self.mu2).powi(2) < c * self.sigma1 * self.sigma1 / self.n as f64
    }

    pub fn analytic_mse_xbar(&self) -> f64 {
        self.sigma1 * self.sigma1 / self.n as f64
    }

    /// Mixture-model MSE of the pooled mean with `π = N/(N+K)`.
    pub fn analytic_mse_xtilde(&self) -> f64 {
        let total = (self.n + self.k) as f64;
        let pi = self.n as f64 / total;
        let d2 = (self.mu1 - self.mu2).powi(2);
        (1.0 - pi).powi(2) * d2
            + (pi * self.sigma1.powi(2) + (1.0 - pi) * self.sigma2.powi(2) + pi * (1.0 - pi) * d2)
                / total
    }

    /// MSE of the pooled mean with the group sizes held fixed.
    pub fn exact_mse_xtilde(&self) -> f64 {
        let total = (self.n + self.k) as f64;
        let bias = self.k as f64 * (self.mu2 - self.mu1) / total;
        bias * bias
            + (self.n as f64 * self.sigma1.powi(2) + self.k as f64 * self.sigma2.powi(2))
                / total.powi(2)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prop1Result {
    pub mse_xbar: f64,
    pub mse_xtilde: f64,
    /// Monte-Carlo standard errors of the two MSEs.
    pub se_xbar: f64,
    pub se_xtilde: f64,
    pub analytic_mse_xbar: f64,
    pub analytic_mse_xtilde: f64,
    pub exact_mse_xtilde: f64,
}

/// Squared errors of `x̄` (target samples only) and `x̃` (target and proxy
/// pooled) against `μ₁`, averaged over trials. The proxy sum is drawn as a
/// single `N(Kμ₂, Kσ₂²)` variate, which has exactly the law of the sum of
/// `K` independent draws.
pub fn prop1_simulate(spec: &MixtureSpec) -> Result<Prop1Result> {
    spec.validate()?;
    let p1 = Normal::new(spec.mu1, spec.sigma1).expect("validated");
    let k = spec.k as f64;
    let proxy_sum = Normal::new(k * spec.mu2, k.sqrt() * spec.sigma2).expect("validated");
    let errs: Vec<(f64, f64)> = (0..spec.trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = trial_rng(spec.seed, t as u64);
            let target: f64 = (0..spec.n).map(|_| p1.sample(&mut rng)).sum();
            let pooled = (target + proxy_sum.sample(&mut rng)) / (spec.n + spec.k) as f64;
            let xbar = target / spec.n as f64;
            ((xbar - spec.mu1).powi(2), (pooled - spec.mu1).powi(2))
        })
        .collect();
    let (a, b): (Vec<f64>, Vec<f64>) = errs.into_iter().unzip();
    let (mse_xbar, se_xbar) = mean_se(&a);
    let (mse_xtilde, se_xtilde) = mean_se(&b);
    Ok(Prop1Result {
        mse_xbar,
        mse_xtilde,
        se_xbar,
        se_xtilde,
        analytic_mse_xbar: spec.analytic_mse_xbar(),
        analytic_mse_xtilde: spec.analytic_mse_xtilde(),
        exact_mse_xtilde: spec.exact_mse_xtilde(),
    })
}

/// Inputs `x ~ N(0, σ² I_p)`; target labels `wᵀx + N(0, ε²)`, training
/// labels `w̃ᵀx + N(0, ε̃²)` on `K` samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionSpec {
    pub sigma: f64,
    pub eps: f64,
    pub eps_tilde: f64,
    pub w: Vec<f64>,
    pub w_tilde: Vec<f64>,
    pub k: usize,
    pub trials: usize,
    pub seed: u64,
}

impl RegressionSpec {
    pub fn p(&self) -> usize {
        self.w.len()
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.p();
        if p == 0 || self.w_tilde.len() != p {
            return Err(Error::invalid(format!(
                "w has {p} entries, w~ has {}",
                self.w_tilde.len()
            )));
        }
        if self.k <= p {
            return Err(Error::invalid(format!(
                "K = {} must exceed p = {p}",
                self.k
            )));
        }
        if !(self.sigma > 0.0 && self.eps > 0.0 && self.eps_tilde > 0.0) {
            return Err(Error::invalid("sigma, eps and eps~ must be positive"));
        }
        if self.trials < MIN_TRIALS {
            return Err(Error::invalid(format!(
                "need at least {MIN_TRIALS} trials, got {}",
                self.trials
            )));
        }
        Ok(())
    }

    fn dw_sq(&self) -> f64 {
        self.w
            .iter()
            .zip(&self.w_tilde)
            .map(|(a, b)| (b - a).powi(2))
            .sum()
    }

    pub fn analytic_bias(&self, x: &[f64]) -> f64 {
        self.w_tilde
            .iter()
            .zip(&self.w)
            .zip(x)
            .map(|((b, a), x)| (b - a) * x)
            .sum()
    }

    /// `ε̃² ‖x‖² / (σ² K)`.
    pub fn analytic_var(&self, x: &[f64]) -> f64 {
        self.eps_tilde.powi(2) * x.iter().map(|v| v * v).sum::<f64>()
            / (self.sigma.powi(2) * self.k as f64)
    }

    /// `ε̃² ‖x‖² / (σ² (K − p − 1))`, from the inverse-Wishart mean; needs
    /// `K > p + 1`.
    pub fn exact_var(&self, x: &[f64]) -> f64 {
        let dof = self.k as f64 - self.p() as f64 - 1.0;
        self.eps_tilde.powi(2) * x.iter().map(|v| v * v).sum::<f64>() / (self.sigma.powi(2) * dof)
    }

    /// `p σ² ‖w̃ − w‖² + p ε̃² / K + ε²`.
    pub fn risk_bound(&self) -> f64 {
        let p = self.p() as f64;
        p * self.sigma.powi(2) * self.dw_sq()
            + p * self.eps_tilde.powi(2) / self.k as f64
            + self.eps.powi(2)
    }

    /// `σ² ‖w̃ − w‖² + p ε̃² / (K − p − 1) + ε²`.
    pub fn exact_risk(&self) -> f64 {
        let p = self.p() as f64;
        self.sigma.powi(2) * self.dw_sq()
            + p * self.eps_tilde.powi(2) / (self.k as f64 - p - 1.0)
            + self.eps.powi(2)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prop2Result {
    pub bias_hat: f64,
    pub bias_se: f64,
    pub var_hat: f64,
    pub risk_hat: f64,
    pub risk_se: f64,
    pub analytic_bias: f64,
    pub analytic_var: f64,
    pub exact_var: f64,
    pub risk_bound: f64,
    pub exact_risk: f64,
    /// Training sets redrawn because the normal matrix was singular.
    pub resampled: usize,
    /// Mean prediction at each query point.
    pub mean_predictions: Vec<f64>,
}

/// Least-squares weights via Householder QR, or `None` when `X` is rank
/// deficient.
fn least_squares(x: &DMatrix<f64>, y: &DVector<f64>) -> Option<DVector<f64>> {
    let p = x.ncols();
    let qr = x.clone().qr();
    let r = qr.r();
    let scale = r.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if r.diagonal()
        .iter()
        .any(|v| v.abs() <= 1e-12 * scale.max(f64::MIN_POSITIVE))
    {
        return None;
    }
    let qty = qr.q().transpose() * y;
    r.solve_upper_triangular(&qty.rows(0, p).into_owned())
}

/// Fits least squares on fresh training sets and records predictions at
/// `queries[0]` (bias, variance) and at every query (mean prediction). The
/// risk of each fit is evaluated in closed form over the test distribution:
/// `σ² ‖ŵ − w‖² + ε²`.
pub fn prop2_simulate(spec: &RegressionSpec, queries: &[Vec<f64>]) -> Result<Prop2Result> {
    spec.validate()?;
    let p = spec.p();
    let xq = queries
        .first()
        .ok_or_else(|| Error::invalid("at least one query point required"))?;
    if queries.iter().any(|q| q.len() != p) {
        return Err(Error::invalid(format!(
            "query points must have {p} entries"
        )));
    }
    let w_tilde = DVector::from_column_slice(&spec.w_tilde);
    let w = DVector::from_column_slice(&spec.w);
    let fits: Vec<(DVector<f64>, usize)> = (0..spec.trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = trial_rng(spec.seed, t as u64);
            let mut redraws = 0;
            loop {
                let x = DMatrix::from_fn(spec.k, p, |_, _| {
                    spec.sigma * Distribution::<f64>::sample(&StandardNormal, &mut rng)
                });
                let noise = DVector::from_fn(spec.k, |_, _| {
                    spec.eps_tilde * Distribution::<f64>::sample(&StandardNormal, &mut rng)
                });
                let y = &x * &w_tilde + noise;
                match least_squares(&x, &y) {
                    Some(fit) => return (fit, redraws),
                    None => redraws += 1,
                }
            }
        })
        .collect();
    let resampled = fits.iter().map(|f| f.1).sum();
    let predict =
        |fit: &DVector<f64>, q: &[f64]| fit.iter().zip(q).map(|(a, b)| a * b).sum::<f64>();
    let truth: f64 = spec.w.iter().zip(xq).map(|(a, b)| a * b).sum();
    let errors: Vec<f64> = fits.iter().map(|(f, _)| predict(f, xq) - truth).collect();
    let (bias_hat, bias_se) = mean_se(&errors);
    let n = errors.len() as f64;
    let var_hat = errors.iter().map(|e| (e - bias_hat).powi(2)).sum::<f64>() / (n - 1.0);
    let risks: Vec<f64> = fits
        .iter()
        .map(|(f, _)| spec.sigma.powi(2) * (f - &w).norm_squared() + spec.eps.powi(2))
        .collect();
    let (risk_hat, risk_se) = mean_se(&risks);
    let mean_predictions = queries
        .iter()
        .map(|q| fits.iter().map(|(f, _)| predict(f, q)).sum::<f64>() / n)
        .collect();
    Ok(Prop2Result {
        bias_hat,
        bias_se,
        var_hat,
        risk_hat,
        risk_se,
        analytic_bias: spec.analytic_bias(xq),
        analytic_var: spec.analytic_var(xq),
        exact_var: spec.exact_var(xq),
        risk_bound: spec.risk_bound(),
        exact_risk: spec.exact_risk(),
        resampled,
        mean_predictions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn mixture(
        mu1: f64,
        mu2: f64,
        s1: f64,
        s2: f64,
        n: usize,
        k: usize,
        trials: usize,
    ) -> MixtureSpec {
        MixtureSpec {
            mu1,
            mu2,
            sigma1: s1,
            sigma2: s2,
            n,
            k,
            trials,
            seed: 42,
        }
    }

    #[test]
    fn collapsed_mixture() {
        let spec = mixture(1.0, 1.0, 2.0, 2.0, 5, 20, 20_000);
        assert!((spec.analytic_mse_xbar() - 4.0 / 5.0).abs() < 1e-15);
        assert!((spec.analytic_mse_xtilde() - 4.0 / 25.0).abs() < 1e-15);
        let r = prop1_simulate(&spec).unwrap();
        assert!(
            (r.mse_xbar - r.analytic_mse_xbar).abs() < 3.0 * r.se_xbar,
            "{r:?}"
        );
        assert!(
            (r.mse_xtilde - r.analytic_mse_xtilde).abs() < 3.0 * r.se_xtilde,
            "{r:?}"
        );
    }

    #[test]
    fn pooling_helps_when_means_are_close() {
        // (μ₁ − μ₂)² = 0.01 < 0.5 · 1 / 10.
        let spec = mixture(0.0, 0.1, 1.0, 1.0, 10, 10_000, 10_000);
        assert!(spec.satisfies(0.5));
        let r = prop1_simulate(&spec).unwrap();
        assert!(r.mse_xtilde < r.mse_xbar);
        assert!(
            (r.mse_xtilde - r.analytic_mse_xtilde).abs() < 3.0 * r.se_xtilde,
            "{r:?}"
        );
    }

    #[test]
    fn pooling_hurts_when_means_are_far() {
        let spec = mixture(0.0, 10.0, 1.0, 1.0, 10, 100, 2_000);
        assert!(!spec.satisfies(1.0));
        assert!(spec.analytic_mse_xtilde() > spec.analytic_mse_xbar());
        let r = prop1_simulate(&spec).unwrap();
        assert!(r.mse_xtilde > r.mse_xbar);
        assert!(prop1_simulate(&mixture(0.0, 0.0, 0.0, 1.0, 1, 1, 2000)).is_err());
        assert!(prop1_simulate(&mixture(0.0, 0.0, 1.0, 1.0, 1, 1, 10)).is_err());
    }

    #[test]
    fn prop1_is_deterministic() {
        let spec = mixture(0.0, 0.2, 1.0, 1.5, 4, 50, 1000);
        assert_eq!(
            prop1_simulate(&spec).unwrap(),
            prop1_simulate(&spec).unwrap()
        );
    }

    #[test]
    fn error_shrinks_with_trials() {
        let small = prop1_simulate(&mixture(0.0, 0.3, 1.0, 2.0, 8, 40, 1000)).unwrap();
        let large = prop1_simulate(&mixture(0.0, 0.3, 1.0, 2.0, 8, 40, 4000)).unwrap();
        for ratio in [
            small.se_xbar / large.se_xbar,
            small.se_xtilde / large.se_xtilde,
        ] {
            assert!((1.0..4.0).contains(&ratio), "{ratio}");
        }
    }

    fn regression(w: Vec<f64>, w_tilde: Vec<f64>, k: usize, trials: usize) -> RegressionSpec {
        RegressionSpec {
            sigma: 1.0,
            eps: 0.3,
            eps_tilde: 0.5,
            w,
            w_tilde,
            k,
            trials,
            seed: 9,
        }
    }

    #[test]
    fn unbiased_and_linear_when_weights_agree() {
        let spec = regression(vec![1.0, -2.0], vec![1.0, -2.0], 20, 5000);
        let q1 = vec![0.7, 1.3];
        let q2 = vec![-1.1, 0.4];
        let qs = vec![
            q1.clone(),
            q2.clone(),
            vec![q1[0] + 2.0 * q2[0], q1[1] + 2.0 * q2[1]],
        ];
        let r = prop2_simulate(&spec, &qs).unwrap();
        assert_eq!(r.analytic_bias, 0.0);
        assert!(r.bias_hat.abs() < 3.0 * r.bias_se, "{r:?}");
        let m = &r.mean_predictions;
        assert!((m[2] - (m[0] + 2.0 * m[1])).abs() < 1e-10);
        assert_eq!(r.resampled, 0);
    }

    #[test]
    fn variance_small_sample() {
        // K = 50 with p = 2: the finite-sample variance carries 1/(K − p − 1).
        let spec = regression(vec![0.5, 0.5], vec![0.6, 0.3], 50, 100_000);
        let x = vec![1.0, -2.0];
        let r = prop2_simulate(&spec, &[x.clone()]).unwrap();
        assert!((r.analytic_var - 0.25 * 5.0 / 50.0).abs() < 1e-15);
        assert!((r.var_hat / r.exact_var - 1.0).abs() < 0.05, "{r:?}");
        assert!((r.bias_hat - r.analytic_bias).abs() < 3.0 * r.bias_se);
        assert!((r.risk_hat - r.exact_risk).abs() < 3.0 * r.risk_se);
    }

    #[test]
    fn risk_under_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for i in 0..20 {
            let p = rng.random_range(1..=4);
            let w: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..1.0)).collect();
            let w_tilde: Vec<f64> = w.iter().map(|v| v + rng.random_range(-0.3..0.3)).collect();
            let spec = RegressionSpec {
                sigma: rng.random_range(0.5..2.0),
                eps: rng.random_range(0.2..1.0),
                eps_tilde: rng.random_range(0.2..1.0),
                w,
                w_tilde,
                k: rng.random_range(30..200),
                trials: 2000,
                seed: i,
            };
            let r = prop2_simulate(&spec, &[vec![1.0; p]]).unwrap();
            assert!(r.risk_hat <= r.risk_bound * 1.05, "{spec:?} {r:?}");
        }
        let bad = RegressionSpec {
            k: 2,
            ..regression(vec![1.0, 1.0], vec![1.0, 1.0], 2, 1000)
        };
        assert!(prop2_simulate(&bad, &[vec![1.0, 1.0]]).is_err());
    }

    #[test]
    fn singular_design_detected() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
        assert!(least_squares(&x, &DVector::from_column_slice(&[1.0, 2.0, 3.0])).is_none());
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let fit = least_squares(&x, &DVector::from_column_slice(&[1.0, 2.0, 3.0])).unwrap();
        assert!((fit[0] - 1.0).abs() < 1e-12 && (fit[1] - 2.0).abs() < 1e-12);
    }
}
