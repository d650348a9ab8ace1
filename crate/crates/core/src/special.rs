//! Log-space Gamma/Beta evaluation and the accumulants built on them.
//!
//! Every marginal likelihood, posterior and predictive law in this crate is a
//! product of Beta functions `B(1 - alpha, y)` or `B(M - alpha, d - M + 1)`,
//! and the accumulant
//!
//! ```text
//! gamma_a^b = alpha * sum_{i=1}^{b} B(1 - alpha, a + i)
//! ```
//!
//! which is the expected number of first-time users on days `a+1..=a+b` per
//! unit of the latent rate. All products are formed in log space since
//! `Gamma(N + c + 1)` overflows long before realistic user counts.

use crate::error::{Error, Result};
use crate::scalar::Real;

const LANCZOS_G: f64 = 7.0;
#[allow(clippy::excessive_precision)]
const LANCZOS_COEF: [f64; 9] = [
    0.999_999_999_999_809_93,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_13,
    -176.615_029_162_140_59,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_571_6e-6,
    1.505_632_735_149_311_6e-7,
];

/// `ln Gamma(x)` for `x > 0` (Lanczos, g = 7).
pub fn ln_gamma<F: Real>(x: F) -> F {
    debug_assert!(x > F::zero());
    let half = F::lit(0.5);
    if x < half {
        // Gamma(x) = Gamma(x + 1) / x keeps the series in its accurate range.
        return ln_gamma(x + F::one()) - x.ln();
    }
    let z = x - F::one();
    let mut acc = F::lit(LANCZOS_COEF[0]);
    for (k, &c) in LANCZOS_COEF.iter().enumerate().skip(1) {
        acc = acc + F::lit(c) / (z + F::from_count(k as u64));
    }
    let t = z + F::lit(LANCZOS_G) + half;
    let half_ln_two_pi = F::lit(0.918_938_533_204_672_8);
    half_ln_two_pi + (z + half) * t.ln() - t + acc.ln()
}

/// `ln B(x, y) = ln Gamma(x) + ln Gamma(y) - ln Gamma(x + y)`.
pub fn log_beta<F: Real>(x: F, y: F) -> Result<F> {
    if !(x > F::zero()) || !(y > F::zero()) || !x.is_finite() || !y.is_finite() {
        return Err(Error::domain(format!(
            "log_beta requires positive finite arguments, got ({x}, {y})"
        )));
    }
    Ok(ln_gamma(x) + ln_gamma(y) - ln_gamma(x + y))
}

pub(crate) fn check_alpha<F: Real>(alpha: F) -> Result<()> {
    if alpha > F::zero() && alpha < F::one() {
        Ok(())
    } else {
        Err(Error::domain(format!(
            "stability index must lie in (0, 1), got {alpha}"
        )))
    }
}

/// `gamma_a^b = alpha * sum_{i=1}^{b} B(1 - alpha, a + i)`, summed term by term.
///
/// `b = 0` yields zero (empty horizon).
pub fn gamma_accum<F: Real>(alpha: F, a: u64, b: u64) -> Result<F> {
    check_alpha(alpha)?;
    let one_minus = F::one() - alpha;
    let mut sum = F::zero();
    for i in 1..=b {
        sum = sum + log_beta(one_minus, F::from_count(a + i))?.exp();
    }
    Ok(alpha * sum)
}

/// Cached `B(1 - alpha, y)` values and their prefix sums for a fixed `alpha`.
///
/// Planning code asks for `gamma_a^b` at many `(a, b)` pairs with the same
/// stability index; the table grows on demand.
#[derive(Debug, Clone)]
pub struct GammaTable<F> {
    alpha: F,
    // terms[y - 1] = B(1 - alpha, y)
    terms: Vec<F>,
    // prefix[n] = sum_{y=1}^{n} B(1 - alpha, y)
    prefix: Vec<F>,
}

impl<F: Real> GammaTable<F> {
    pub fn new(alpha: F) -> Result<Self> {
        check_alpha(alpha)?;
        Ok(Self {
            alpha,
            terms: Vec::new(),
            prefix: vec![F::zero()],
        })
    }

    pub fn alpha(&self) -> F {
        self.alpha
    }

    fn extend_to(&mut self, n: u64) {
        let one_minus = F::one() - self.alpha;
        while (self.terms.len() as u64) < n {
            let y = self.terms.len() as u64 + 1;
            let t = (ln_gamma(one_minus) + ln_gamma(F::from_count(y))
                - ln_gamma(one_minus + F::from_count(y)))
            .exp();
            self.terms.push(t);
            let last = *self.prefix.last().expect("prefix starts non-empty");
            self.prefix.push(last + t);
        }
    }

    /// `B(1 - alpha, y)` for `y >= 1`.
    pub fn beta_term(&mut self, y: u64) -> F {
        assert!(y >= 1, "beta_term is defined for y >= 1");
        self.extend_to(y);
        self.terms[(y - 1) as usize]
    }

    /// `gamma_a^b`.
    pub fn accum(&mut self, a: u64, b: u64) -> F {
        if b == 0 {
            return F::zero();
        }
        self.extend_to(a + b);
        let lo = a as usize;
        let hi = (a + b) as usize;
        // Short ranges far into the table lose digits to prefix differencing.
        let sum = if b <= 64 {
            self.terms[lo..hi].iter().copied().sum()
        } else {
            self.prefix[hi] - self.prefix[lo]
        };
        self.alpha * sum
    }
}

fn rel_tolerance<F: Real>() -> F {
    F::epsilon() * F::lit(4096.0)
}

/// Tail integral `T(v) = int_v^1 (1 - s)^d s^{-1-alpha} ds` of the posterior
/// Levy density of the unseen users (without the `alpha * Delta^{-alpha}`
/// factor).
///
/// Evaluated through the alternating binomial expansion
/// `sum_k C(d,k) (-1)^k (1 - v^{k-alpha}) / (k - alpha)` whenever its rounding
/// error bound is below the working tolerance. Otherwise `v >= 1/2` uses the
/// all-positive expansion of `s^{-1-alpha}` around `s = 1`, and `v < 1/2`
/// adds adaptive Gauss-Kronrod quadrature over `[v, 1/2]` in `u = ln s`.
pub fn stable_tail_integral<F: Real>(v: F, d: u64, alpha: F) -> Result<F> {
    check_alpha(alpha)?;
    if !(v > F::zero() && v < F::one()) {
        return Err(Error::domain(format!(
            "tail integral needs v in (0, 1), got {v}"
        )));
    }
    if let Some(t) = binomial_tail(v, d, alpha) {
        return Ok(t);
    }
    let half = F::lit(0.5);
    if v >= half {
        return Ok(series_near_one(v, d, alpha));
    }
    let upper = series_near_one(half, d, alpha);
    let df = F::from_count(d);
    let integrand = |u: F| (df * (-u.exp_m1()).ln() - alpha * u).exp();
    let lower = adaptive_gauss_kronrod(integrand, v.ln(), half.ln(), rel_tolerance())?;
    Ok(upper + lower)
}

fn binomial_tail<F: Real>(v: F, d: u64, alpha: F) -> Option<F> {
    let ln_v = v.ln();
    let mut sum = F::zero();
    let mut abs_sum = F::zero();
    let mut binom = F::one();
    for k in 0..=d {
        if k > 0 {
            binom = binom * F::from_count(d - k + 1) / F::from_count(k);
        }
        let e = F::from_count(k) - alpha;
        // (1 - v^e) / e without cancellation in the numerator
        let piece = -(e * ln_v).exp_m1() / e;
        let term = if k % 2 == 0 { binom * piece } else { -binom * piece };
        sum = sum + term;
        abs_sum = abs_sum + term.abs();
    }
    let bound = F::epsilon() * abs_sum * F::from_count(d + 1);
    (sum > F::zero() && bound <= rel_tolerance::<F>() * sum).then_some(sum)
}

fn series_near_one<F: Real>(v: F, d: u64, alpha: F) -> F {
    let t = F::one() - v;
    let mut coef = F::one();
    let mut tpow = F::one();
    let mut sum = F::zero();
    for m in 0..4000u64 {
        let term = coef * tpow / F::from_count(d + m + 1);
        sum = sum + term;
        if term <= F::epsilon() * sum {
            break;
        }
        coef = coef * (F::one() + alpha + F::from_count(m)) / F::from_count(m + 1);
        tpow = tpow * t;
    }
    sum * t.powi((d + 1) as i32)
}

const GK_NODES: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const GK_WEIGHTS_K: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
// Gauss weights for the odd-indexed Kronrod nodes (1, 3, 5, 7).
const GK_WEIGHTS_G: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15<F: Real, G: Fn(F) -> F>(f: &G, a: F, b: F) -> (F, F) {
    let half = F::lit(0.5);
    let mid = half * (a + b);
    let rad = half * (b - a);
    let fc = f(mid);
    let mut kron = fc * F::lit(GK_WEIGHTS_K[7]);
    let mut gauss = fc * F::lit(GK_WEIGHTS_G[3]);
    for j in 0..7 {
        let x = rad * F::lit(GK_NODES[j]);
        let pair = f(mid - x) + f(mid + x);
        kron = kron + F::lit(GK_WEIGHTS_K[j]) * pair;
        if j % 2 == 1 {
            gauss = gauss + F::lit(GK_WEIGHTS_G[j / 2]) * pair;
        }
    }
    (kron * rad, ((kron - gauss) * rad).abs())
}

/// Globally adaptive 7-15 Gauss-Kronrod on `[a, b]` with a relative tolerance.
pub(crate) fn adaptive_gauss_kronrod<F: Real, G: Fn(F) -> F>(
    f: G,
    a: F,
    b: F,
    rel_tol: F,
) -> Result<F> {
    let (v0, e0) = gk15(&f, a, b);
    let mut parts = vec![(a, b, v0, e0)];
    for _ in 0..2000 {
        let total: F = parts.iter().map(|p| p.2).sum();
        let err: F = parts.iter().map(|p| p.3).sum();
        if err <= rel_tol * total.abs() || err <= F::min_positive_value() {
            return Ok(total);
        }
        let (worst, _) = parts
            .iter()
            .enumerate()
            .max_by(|x, y| x.1 .3.partial_cmp(&y.1 .3).expect("finite error"))
            .expect("non-empty partition");
        let (lo, hi, _, _) = parts.swap_remove(worst);
        let mid = F::lit(0.5) * (lo + hi);
        let (vl, el) = gk15(&f, lo, mid);
        let (vr, er) = gk15(&f, mid, hi);
        parts.push((lo, mid, vl, el));
        parts.push((mid, hi, vr, er));
    }
    Err(Error::Numerical(
        "adaptive quadrature did not reach tolerance".into(),
    ))
}
