//! Indian buffet process baseline: a Beta process prior with mass `theta` and
//! concentration `c`, Levy density `theta * c * s^{-1} (1 - s)^{c - 1}`.

use serde::{Deserialize, Serialize};

use crate::data::{ActivityMatrix, ModelKind, SufficientStats, UserActivity};
use crate::error::{Error, Result};
use crate::fit::FitConfig;
use crate::sampling::{sample_poisson, RngStream};
use crate::special::log_beta;

use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IbpParams {
    pub theta: f64,
    pub c: f64,
}

impl IbpParams {
    pub fn new(theta: f64, c: f64) -> Result<Self> {
        for (name, v) in [("theta", theta), ("c", c)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::domain(format!("IBP {name} must be positive and finite, got {v}")));
            }
        }
        Ok(Self { theta, c })
    }
}

/// Denominator offset in the predictive sum `sum_j c / (c + j - offset)`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IbpIndexing {
    /// `c / (c + j - 1)`, matching the fitted marginal.
    #[default]
    Shifted,
    /// `c / (c + j)`.
    Unshifted,
}

/// `sum_{i=1}^{d} c / (c + i - 1)`.
fn harmonic(c: f64, d: u32) -> f64 {
    (1..=d).map(|i| c / (c + i as f64 - 1.0)).sum()
}

/// Log marginal `N ln theta - theta H(c) + sum_i [ln c + ln B(M_i, d - M_i + c)]`
/// (up to a term free of `theta` and `c`).
pub fn ibp_log_marginal(stats: &SufficientStats, params: &IbpParams) -> Result<f64> {
    if stats.kind != ModelKind::Bernoulli {
        return Err(Error::input("the IBP baseline needs Bernoulli (activity count) statistics"));
    }
    let n = stats.n_users() as f64;
    let d = stats.d as f64;
    let mut total = n * params.theta.ln() - params.theta * harmonic(params.c, stats.d) + n * params.c.ln();
    for (m, mult) in stats.histogram() {
        let m = m as f64;
        total += mult as f64 * log_beta(m, d - m + params.c)?;
    }
    Ok(total)
}

/// Profile log marginal with `theta` at its maximizer `N / H(c)`.
fn profile(stats: &SufficientStats, ln_c: f64) -> f64 {
    let c = ln_c.exp();
    let theta = stats.n_users() as f64 / harmonic(c, stats.d);
    IbpParams::new(theta, c)
        .and_then(|p| ibp_log_marginal(stats, &p))
        .ok()
        .filter(|v| v.is_finite())
        .unwrap_or(f64::NEG_INFINITY)
}

const LN_C_RANGE: (f64, f64) = (-9.0, 14.0);
const SCAN_POINTS: usize = 93;

/// Maximum marginal likelihood `(theta, c)`.
///
/// `c` is found by a log-scale scan followed by golden-section refinement
/// around the best scan point; `theta` then has a closed form.
pub fn ibp_fit(stats: &SufficientStats, cfg: &FitConfig) -> Result<IbpParams> {
    if stats.kind != ModelKind::Bernoulli {
        return Err(Error::input("the IBP baseline needs Bernoulli (activity count) statistics"));
    }
    if stats.n_users() == 0 {
        return Err(Error::input("cannot fit the IBP baseline without any observed user"));
    }
    let step = (LN_C_RANGE.1 - LN_C_RANGE.0) / (SCAN_POINTS - 1) as f64;
    let scan: Vec<f64> = (0..SCAN_POINTS)
        .map(|i| profile(stats, LN_C_RANGE.0 + i as f64 * step))
        .collect();
    let best = scan
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
        .expect("scan is non-empty");
    if scan[best] == f64::NEG_INFINITY {
        return Err(Error::Numerical("IBP marginal is not finite anywhere on the scan".into()));
    }
    let mut a = LN_C_RANGE.0 + best.saturating_sub(1) as f64 * step;
    let mut b = LN_C_RANGE.0 + (best + 1).min(SCAN_POINTS - 1) as f64 * step;
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = b - ratio * (b - a);
    let mut x2 = a + ratio * (b - a);
    let (mut f1, mut f2) = (profile(stats, x1), profile(stats, x2));
    for _ in 0..cfg.max_iters {
        if b - a < cfg.tol {
            break;
        }
        if f1 >= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - ratio * (b - a);
            f1 = profile(stats, x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + ratio * (b - a);
            f2 = profile(stats, x2);
        }
    }
    let c = (0.5 * (a + b)).exp();
    IbpParams::new(stats.n_users() as f64 / harmonic(c, stats.d), c)
}

/// Poisson mean of the number of new users on days `d+1..=d+horizon`.
pub fn ibp_predict_new_users(params: &IbpParams, d: u32, horizon: u32, indexing: IbpIndexing) -> Result<f64> {
    if horizon == 0 {
        return Err(Error::input("prediction horizon must be at least one day"));
    }
    let offset = match indexing {
        IbpIndexing::Shifted => 1.0,
        IbpIndexing::Unshifted => 0.0,
    };
    let c = params.c;
    let sum: f64 = (d + 1..=d + horizon).map(|j| c / (c + j as f64 - offset)).sum();
    Ok(params.theta * sum)
}

/// Sequential two-parameter IBP: on day `n` each seen user returns with
/// probability `m_k / (c + n - 1)` and `Poisson(theta c / (c + n - 1))` new
/// users arrive.
pub fn simulate_ibp(params: &IbpParams, days: u32, rng: &mut RngStream) -> Result<ActivityMatrix> {
    if days == 0 {
        return Err(Error::input("simulation needs at least one day"));
    }
    let mut users: Vec<Vec<u32>> = Vec::new();
    for n in 1..=days {
        let denom = params.c + n as f64 - 1.0;
        for active in users.iter_mut() {
            if rng.random::<f64>() * denom < active.len() as f64 {
                active.push(n);
            }
        }
        let arrivals = sample_poisson(params.theta * params.c / denom, rng)?;
        users.extend((0..arrivals).map(|_| vec![n]));
    }
    let users = users
        .into_iter()
        .enumerate()
        .map(|(i, days)| UserActivity {
            id: format!("u{i}"),
            days,
        })
        .collect();
    ActivityMatrix::new(days, users)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bm(d: u32, counts: Vec<u32>) -> SufficientStats {
        SufficientStats::new(d, ModelKind::Bernoulli, counts).unwrap()
    }

    #[test]
    fn predict_examples() {
        let p = IbpParams::new(1.0, 1.0).unwrap();
        assert_eq!(ibp_predict_new_users(&p, 0, 1, IbpIndexing::Shifted).unwrap(), 1.0);
        assert_eq!(ibp_predict_new_users(&p, 0, 1, IbpIndexing::Unshifted).unwrap(), 0.5);
        let a = ibp_predict_new_users(&p, 3, 4, IbpIndexing::Shifted).unwrap();
        let b = ibp_predict_new_users(&p, 3, 5, IbpIndexing::Shifted).unwrap();
        assert!(a < b);
        let double = ibp_predict_new_users(&IbpParams::new(2.0, 1.0).unwrap(), 3, 4, IbpIndexing::Shifted).unwrap();
        assert!((double - 2.0 * a).abs() < 1e-14);
        assert!(ibp_predict_new_users(&p, 3, 0, IbpIndexing::Shifted).is_err());
    }

    #[test]
    fn profile_identity_at_fit() {
        let stats = bm(10, vec![1, 1, 1, 2, 3, 5, 10, 1, 4, 2, 1, 1]);
        let p = ibp_fit(&stats, &FitConfig::default()).unwrap();
        assert!((p.theta * harmonic(p.c, 10) - 12.0).abs() < 1e-9);
    }

    #[test]
    fn fit_is_a_local_maximum() {
        let stats = bm(10, vec![1, 1, 1, 2, 3, 5, 10, 1, 4, 2, 1, 1]);
        let p = ibp_fit(&stats, &FitConfig::default()).unwrap();
        let at = ibp_log_marginal(&stats, &p).unwrap();
        for scale in [0.9, 1.1] {
            let c = p.c * scale;
            let q = IbpParams::new(12.0 / harmonic(c, 10), c).unwrap();
            assert!(ibp_log_marginal(&stats, &q).unwrap() <= at + 1e-9);
        }
        let off = IbpParams::new(p.theta * 1.2, p.c).unwrap();
        assert!(ibp_log_marginal(&stats, &off).unwrap() < at);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(ibp_fit(&bm(3, vec![]), &FitConfig::default()).is_err());
        let gm = SufficientStats::new(3, ModelKind::Geometric, vec![1]).unwrap();
        assert!(ibp_fit(&gm, &FitConfig::default()).is_err());
        assert!(IbpParams::new(0.0, 1.0).is_err());
    }

    #[test]
    fn simulation_mean_count() {
        let p = IbpParams::new(5.0, 2.0).unwrap();
        let mut rng = RngStream::new(31, 0);
        let reps = 4000;
        let total: usize = (0..reps).map(|_| simulate_ibp(&p, 10, &mut rng).unwrap().n_users()).sum();
        let expected = 5.0 * harmonic(2.0, 10);
        assert!((total as f64 / reps as f64 - expected).abs() < 0.25);
    }
}
