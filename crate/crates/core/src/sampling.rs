//! Seeded random streams and the handful of laws the algorithms draw from.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Gamma, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::special::ln_gamma;

/// A reproducible random stream identified by `(seed, stream_id)`.
///
/// Backed by ChaCha8, whose 64-bit stream selector gives independent
/// sequences for every replication index without any coordination.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            rng,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Independent stream keyed by this stream's identity and `index`; does not
    /// advance `self`.
    pub fn child(&self, index: u64) -> RngStream {
        let derived = splitmix64(self.seed ^ splitmix64(self.stream_id.wrapping_add(0x5851_f42d)));
        RngStream::new(derived, index)
    }

    /// Uniform draw in the open interval (0, 1).
    pub fn uniform_open(&mut self) -> f64 {
        loop {
            let u: f64 = self.rng.random();
            if u > 0.0 {
                return u;
            }
        }
    }

    pub fn exponential(&mut self) -> f64 {
        -self.uniform_open().ln()
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

/// Negative binomial law with pmf `C(k + r - 1, k) p^r (1 - p)^k`.
///
/// `r` may be any positive real; `p` is the success probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NegBin<F> {
    pub r: F,
    pub p: F,
}

impl<F: Real> NegBin<F> {
    pub fn new(r: F, p: F) -> Result<Self> {
        if !(r > F::zero()) || !r.is_finite() {
            return Err(Error::domain(format!("negative binomial size must be positive, got {r}")));
        }
        if !(p > F::zero() && p <= F::one()) {
            return Err(Error::domain(format!("negative binomial p must lie in (0, 1], got {p}")));
        }
        Ok(Self { r, p })
    }

    pub fn mean(&self) -> F {
        self.r * (F::one() - self.p) / self.p
    }

    pub fn variance(&self) -> F {
        self.r * (F::one() - self.p) / (self.p * self.p)
    }

    pub fn ln_pmf(&self, k: u64) -> F {
        let kf = F::from_count(k);
        let fail = F::one() - self.p;
        if fail == F::zero() {
            return if k == 0 { F::zero() } else { F::neg_infinity() };
        }
        ln_gamma(kf + self.r) - ln_gamma(self.r) - ln_gamma(kf + F::one())
            + self.r * self.p.ln()
            + kf * (-self.p).ln_1p()
    }

    pub fn pmf(&self, k: u64) -> F {
        self.ln_pmf(k).exp()
    }

    /// Smallest `k` with `P(X <= k) >= q`, accumulated by the pmf recurrence.
    pub fn quantile(&self, q: F) -> u64 {
        let fail = F::one() - self.p;
        let mut mass = self.pmf(0);
        let mut cdf = mass;
        let mut k = 0u64;
        // Far tails: the loop is bounded by a generous multiple of the sd.
        let cap = (self.mean() + F::lit(60.0) * self.variance().sqrt() + F::lit(100.0))
            .to_u64()
            .unwrap_or(u64::MAX);
        while cdf < q && k < cap {
            k += 1;
            mass = mass * fail * (F::from_count(k - 1) + self.r) / F::from_count(k);
            if mass < F::min_positive_value() {
                // Underflowed or subnormal: the recurrence would lose all
                // precision, so evaluate in log space until the mass is normal.
                mass = self.pmf(k);
            }
            cdf = cdf + mass;
        }
        k
    }
}

fn check_positive(name: &str, x: f64) -> Result<()> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(Error::domain(format!("{name} must be positive and finite, got {x}")))
    }
}

/// Gamma draw with the given shape and *rate*.
pub fn sample_gamma(shape: f64, rate: f64, rng: &mut RngStream) -> Result<f64> {
    check_positive("gamma shape", shape)?;
    check_positive("gamma rate", rate)?;
    let law = Gamma::new(shape, 1.0 / rate).map_err(|e| Error::domain(e.to_string()))?;
    Ok(law.sample(rng))
}

pub fn sample_poisson(mean: f64, rng: &mut RngStream) -> Result<u64> {
    if !(mean >= 0.0) || !mean.is_finite() {
        return Err(Error::domain(format!("poisson mean must be finite and >= 0, got {mean}")));
    }
    if mean == 0.0 {
        return Ok(0);
    }
    let law = Poisson::new(mean).map_err(|e| Error::domain(e.to_string()))?;
    Ok(law.sample(rng) as u64)
}

/// Gamma-Poisson mixture draw, exact for real-valued `r`.
pub fn sample_negbin(law: &NegBin<f64>, rng: &mut RngStream) -> Result<u64> {
    let fail = 1.0 - law.p;
    if fail <= 0.0 {
        return Ok(0);
    }
    let lambda = sample_gamma(law.r, law.p / fail, rng)?;
    sample_poisson(lambda, rng)
}

pub fn sample_beta(a: f64, b: f64, rng: &mut RngStream) -> Result<f64> {
    check_positive("beta a", a)?;
    check_positive("beta b", b)?;
    let law = Beta::new(a, b).map_err(|e| Error::domain(e.to_string()))?;
    Ok(law.sample(rng))
}

/// Draw an index with probability proportional to `exp(log_weights[i])`.
pub fn sample_categorical_logw(log_weights: &[f64], rng: &mut RngStream) -> Result<usize> {
    let cat = Categorical::from_log_weights(log_weights)?;
    Ok(cat.sample(rng))
}

/// Inverse-cdf sampler for a fixed categorical law.
#[derive(Debug, Clone)]
pub struct Categorical {
    cdf: Vec<f64>,
}

impl Categorical {
    pub fn from_log_weights(log_weights: &[f64]) -> Result<Self> {
        if log_weights.is_empty() {
            return Err(Error::domain("categorical law needs at least one weight"));
        }
        if log_weights.iter().any(|w| w.is_nan() || *w == f64::INFINITY) {
            return Err(Error::domain("categorical log-weights must not be NaN or +inf"));
        }
        let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::domain("all categorical weights are zero"));
        }
        let mut cdf = Vec::with_capacity(log_weights.len());
        let mut acc = 0.0;
        for w in log_weights {
            acc += (w - max).exp();
            cdf.push(acc);
        }
        for c in &mut cdf {
            *c /= acc;
        }
        Ok(Self { cdf })
    }

    pub fn len(&self) -> usize {
        self.cdf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cdf.is_empty()
    }

    pub fn probability(&self, i: usize) -> f64 {
        if i == 0 {
            self.cdf[0]
        } else {
            self.cdf[i] - self.cdf[i - 1]
        }
    }

    pub fn sample(&self, rng: &mut RngStream) -> usize {
        let u: f64 = rng.random();
        let idx = self.cdf.partition_point(|&c| c <= u);
        idx.min(self.cdf.len() - 1)
    }
}
