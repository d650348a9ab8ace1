//! The Bernoulli and Geometric activity models under an SB-SP prior:
//! marginal likelihoods, conjugate posterior summaries and the predictive law
//! of the number of new users.

use serde::{Deserialize, Serialize};

use crate::data::{ModelKind, SufficientStats};
use crate::error::{Error, Result};
use crate::sampling::{sample_beta, NegBin, RngStream};
use crate::scalar::Real;
use crate::special::{check_alpha, gamma_accum, ln_gamma, log_beta, GammaTable};

/// The SB-SP triple `(alpha, c, beta)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyper<F> {
    pub alpha: F,
    pub c: F,
    pub beta: F,
}

impl<F: Real> Hyper<F> {
    pub fn new(alpha: F, c: F, beta: F) -> Result<Self> {
        let h = Self { alpha, c, beta };
        h.validate()?;
        Ok(h)
    }

    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        if !(self.c > F::zero()) || !self.c.is_finite() {
            return Err(Error::domain(format!("c must be positive, got {}", self.c)));
        }
        if !(self.beta > F::zero()) || !self.beta.is_finite() {
            return Err(Error::domain(format!("beta must be positive, got {}", self.beta)));
        }
        Ok(())
    }
}

/// Posterior of the latent scale: `Delta^{-alpha} | data ~ Gamma(N_d + c + 1, beta + gamma_d)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Posterior<F> {
    pub hyper: Hyper<F>,
    pub stats: SufficientStats,
    /// `gamma_0^d`
    pub gamma_d: F,
    pub delta_shape: F,
    pub delta_rate: F,
}

/// Terms shared by both marginals: everything except the per-user Beta product.
fn log_prefactor<F: Real>(n: u64, d: u32, hyper: &Hyper<F>) -> Result<F> {
    hyper.validate()?;
    let Hyper { alpha, c, beta } = *hyper;
    let nf = F::from_count(n);
    let gamma_d = gamma_accum(alpha, 0, d as u64)?;
    let shape = nf + c + F::one();
    Ok(nf * alpha.ln() + (c + F::one()) * beta.ln() - shape * (beta + gamma_d).ln() + ln_gamma(shape)
        - ln_gamma(c + F::one()))
}

fn expect_kind(stats: &SufficientStats, kind: ModelKind) -> Result<()> {
    if stats.kind == kind {
        Ok(())
    } else {
        Err(Error::input(format!(
            "expected {kind:?} statistics, got {:?}",
            stats.kind
        )))
    }
}

/// Log marginal likelihood of daily activity `Z_1..Z_d`:
/// `alpha^N beta^{c+1} (beta+gamma_d)^{-(N+c+1)} Gamma(N+c+1)/Gamma(c+1) prod_i B(M_i - alpha, d - M_i + 1)`.
pub fn log_marginal_bernoulli<F: Real>(stats: &SufficientStats, hyper: &Hyper<F>) -> Result<F> {
    expect_kind(stats, ModelKind::Bernoulli)?;
    let mut total = log_prefactor(stats.n_users(), stats.d, hyper)?;
    let d = F::from_count(stats.d as u64);
    for (m, mult) in stats.histogram() {
        let m = F::from_count(m as u64);
        total = total + F::from_count(mult) * log_beta(m - hyper.alpha, d - m + F::one())?;
    }
    Ok(total)
}

/// Log marginal likelihood of first trigger days: same prefactor with
/// `prod_i B(1 - alpha, Y_i)`.
pub fn log_marginal_geometric<F: Real>(stats: &SufficientStats, hyper: &Hyper<F>) -> Result<F> {
    expect_kind(stats, ModelKind::Geometric)?;
    let mut total = log_prefactor(stats.n_users(), stats.d, hyper)?;
    let one_minus = F::one() - hyper.alpha;
    for (y, mult) in stats.histogram() {
        total = total + F::from_count(mult) * log_beta(one_minus, F::from_count(y as u64))?;
    }
    Ok(total)
}

pub fn log_marginal<F: Real>(stats: &SufficientStats, hyper: &Hyper<F>) -> Result<F> {
    match stats.kind {
        ModelKind::Bernoulli => log_marginal_bernoulli(stats, hyper),
        ModelKind::Geometric => log_marginal_geometric(stats, hyper),
    }
}

pub fn posterior<F: Real>(stats: &SufficientStats, hyper: &Hyper<F>) -> Result<Posterior<F>> {
    hyper.validate()?;
    let gamma_d = gamma_accum(hyper.alpha, 0, stats.d as u64)?;
    Ok(Posterior {
        hyper: *hyper,
        stats: stats.clone(),
        gamma_d,
        delta_shape: F::from_count(stats.n_users()) + hyper.c + F::one(),
        delta_rate: hyper.beta + gamma_d,
    })
}

impl<F: Real> Posterior<F> {
    pub fn d(&self) -> u32 {
        self.stats.d
    }

    pub fn n_users(&self) -> u64 {
        self.stats.n_users()
    }

    /// Posterior mean of `Delta^{-alpha}`.
    pub fn delta_mean(&self) -> F {
        self.delta_shape / self.delta_rate
    }

    /// Law of the number of new users first active in days `d+1..=d+horizon`:
    /// `NegBin(N_d + c + 1, (beta + gamma_d) / (beta + gamma_d + gamma_d^D))`.
    pub fn predict_new_users(&self, horizon: u32) -> Result<NegBin<F>> {
        if horizon == 0 {
            return Err(Error::input("prediction horizon must be at least one day"));
        }
        let future = gamma_accum(self.hyper.alpha, self.d() as u64, horizon as u64)?;
        NegBin::new(self.delta_shape, self.delta_rate / (self.delta_rate + future))
    }

    /// `E[N_{d+l} | data]` for `l = 1..=horizon`, i.e.
    /// `N_d + (shape / rate) * gamma_d^l`.
    pub fn trajectory_means(&self, horizon: u32) -> Result<Vec<F>> {
        let mut table = GammaTable::new(self.hyper.alpha)?;
        Ok(self.trajectory_means_with(&mut table, horizon))
    }

    pub(crate) fn trajectory_means_with(&self, table: &mut GammaTable<F>, horizon: u32) -> Vec<F> {
        let base = F::from_count(self.n_users());
        let scale = self.delta_mean();
        let d = self.d() as u64;
        let mut acc = F::zero();
        (1..=horizon as u64)
            .map(|l| {
                acc = acc + self.hyper.alpha * table.beta_term(d + l);
                base + scale * acc
            })
            .collect()
    }
}

impl Posterior<f64> {
    /// One posterior jump per observed user: `Beta(M_i - alpha, d - M_i + 1)`
    /// under the Bernoulli model, `Beta(1 - alpha, Y_i)` under the Geometric
    /// one. Neither depends on the latent scale.
    pub fn sample_seen_user_jumps(&self, rng: &mut RngStream) -> Result<Vec<f64>> {
        let alpha = self.hyper.alpha;
        let d = self.d() as f64;
        self.stats
            .counts
            .iter()
            .map(|&k| {
                let k = k as f64;
                match self.stats.kind {
                    ModelKind::Bernoulli => sample_beta(k - alpha, d - k + 1.0, rng),
                    ModelKind::Geometric => sample_beta(1.0 - alpha, k, rng),
                }
            })
            .collect()
    }
}
