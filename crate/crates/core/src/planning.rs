//! How many more days until the experiment has seen `M` distinct users?
//!
//! Three estimators of `D_M`: inverse regression on the predictive mean, a
//! slice through a global credible band, and direct posterior simulation of
//! the new users' first trigger days. The Ferguson-Klass sampler of the
//! unseen-user measure lives here too.

use std::fmt;
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::generators::trigger_day_law;
use crate::sampling::{sample_gamma, sample_negbin, sample_poisson, Categorical, NegBin, RngStream};
use crate::special::{ln_gamma, stable_tail_integral, GammaTable};
use crate::PosteriorState;

/// Cap used when the point estimate only seeds another procedure.
const POINT_CAP: u32 = 100_000;
/// Right-censoring threshold of `posterior_dm`: `d_up` is doubled at most this often.
pub const MAX_DOUBLINGS: u32 = 6;

/// A number of days, or "not reached within the horizon".
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DayBound {
    Days(u32),
    Censored,
}

impl DayBound {
    pub fn days(self) -> Option<u32> {
        match self {
            DayBound::Days(n) => Some(n),
            DayBound::Censored => None,
        }
    }

    pub fn is_censored(self) -> bool {
        self == DayBound::Censored
    }
}

impl fmt::Display for DayBound {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DayBound::Days(n) => write!(f, "{n}"),
            DayBound::Censored => f.write_str("censored"),
        }
    }
}

impl Serialize for DayBound {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            DayBound::Days(n) => s.serialize_u32(*n),
            DayBound::Censored => s.serialize_str("censored"),
        }
    }
}

impl<'de> Deserialize<'de> for DayBound {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Days(u32),
            Tag(String),
        }
        match Repr::deserialize(d)? {
            Repr::Days(n) => Ok(DayBound::Days(n)),
            Repr::Tag(t) if t == "censored" => Ok(DayBound::Censored),
            Repr::Tag(t) => Err(serde::de::Error::custom(format!("expected a day count or \"censored\", got {t:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IntervalMethod {
    Inversion,
    Posterior,
}

/// Simultaneous credible band for the cumulative user count on days
/// `d+1..=d+horizon`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CredibleBand {
    pub level: f64,
    pub d: u32,
    pub horizon: u32,
    pub n_observed: u64,
    pub lo: Vec<u64>,
    pub hi: Vec<u64>,
    /// Predictive mean trajectory.
    pub mean: Vec<f64>,
    pub trajectories_kept: usize,
}

impl CredibleBand {
    /// Writes `day,lo,mean,hi` rows with absolute day indices.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["day", "lo", "mean", "hi"])?;
        for l in 0..self.horizon as usize {
            w.write_record([
                (self.d as usize + l + 1).to_string(),
                self.lo[l].to_string(),
                format!("{:.6}", self.mean[l]),
                self.hi[l].to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::Io {
            path: "<band csv>".into(),
            source: e,
        })?;
        Ok(())
    }
}

/// Interval estimate of `D_M`, counted in days after `d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DmInterval {
    pub target_m: u64,
    pub point: DayBound,
    /// Posterior median; only set by the simulation method.
    pub median: Option<DayBound>,
    pub lower: DayBound,
    pub upper: DayBound,
    pub method: IntervalMethod,
    pub level: f64,
    /// Window used by the last posterior draw.
    pub d_up_final: Option<u32>,
    pub n_censored: usize,
}

/// New users of one posterior draw: `k` first trigger days in `d+1..=d+d_up`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NewUserDraw {
    pub k: u64,
    pub trigger_days: Vec<u32>,
}

fn check_level(level: f64) -> Result<()> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(Error::input(format!("credible level must lie in (0, 1), got {level}")))
    }
}

fn check_target(post: &PosteriorState, target_m: u64) -> Result<()> {
    if target_m <= post.n_users() {
        Err(Error::input(format!(
            "target M = {target_m} is already attained ({} users observed)",
            post.n_users()
        )))
    } else {
        Ok(())
    }
}

/// Smallest `l <= d_cap` whose predictive mean total reaches `target_m`.
///
/// Returns zero days when the target is already attained.
pub fn point_estimate_dm(post: &PosteriorState, target_m: u64, d_cap: u32) -> Result<DayBound> {
    if d_cap == 0 {
        return Err(Error::input("day cap must be at least 1"));
    }
    if target_m <= post.n_users() {
        return Ok(DayBound::Days(0));
    }
    let mut table = GammaTable::new(post.hyper.alpha)?;
    Ok(first_reaching(&post.trajectory_means_with(&mut table, d_cap), target_m))
}

fn first_reaching(means: &[f64], target_m: u64) -> DayBound {
    // Tolerate rounding in closed-form cases that land exactly on M.
    let goal = target_m as f64 * (1.0 - 1e-12);
    means
        .iter()
        .position(|&m| m >= goal)
        .map_or(DayBound::Censored, |i| DayBound::Days(i as u32 + 1))
}

fn gamma_ln_pdf(x: f64, shape: f64, rate: f64) -> f64 {
    shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * x.ln() - rate * x
}

fn poisson_ln_pmf(n: u64, mean: f64) -> f64 {
    if mean == 0.0 {
        return if n == 0 { 0.0 } else { f64::NEG_INFINITY };
    }
    n as f64 * mean.ln() - mean - ln_gamma(n as f64 + 1.0)
}

/// Monte Carlo global band from `q` joint draws of `(Delta^{-alpha}, N*_l)`,
/// keeping the `ceil(level * q)` draws of highest joint density.
pub fn global_band(post: &PosteriorState, level: f64, horizon: u32, q: usize, rng: &mut RngStream) -> Result<CredibleBand> {
    check_level(level)?;
    if q < 100 {
        return Err(Error::input(format!("band needs at least 100 simulated trajectories, got {q}")));
    }
    if horizon == 0 {
        return Err(Error::input("band horizon must be at least one day"));
    }
    let h = horizon as usize;
    let mut table = GammaTable::new(post.hyper.alpha)?;
    let d = post.d() as u64;
    let weights: Vec<f64> = (1..=horizon as u64)
        .map(|l| post.hyper.alpha * table.beta_term(d + l))
        .collect();
    let base = post.n_users();

    let mut paths = vec![0u64; q * h];
    let mut scores = Vec::with_capacity(q);
    for (i, path) in paths.chunks_exact_mut(h).enumerate() {
        let zeta = sample_gamma(post.delta_shape, post.delta_rate, rng)?;
        let mut score = gamma_ln_pdf(zeta, post.delta_shape, post.delta_rate);
        let mut total = base;
        for (slot, w) in path.iter_mut().zip(&weights) {
            let mean = zeta * w;
            let n = sample_poisson(mean, rng)?;
            score += poisson_ln_pmf(n, mean);
            total += n;
            *slot = total;
        }
        scores.push((score, i));
    }
    // Highest density first; earlier draws win ties.
    scores.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let kept = ((level * q as f64) - 1e-9).ceil() as usize;
    let mut lo = vec![u64::MAX; h];
    let mut hi = vec![0u64; h];
    for &(_, i) in &scores[..kept] {
        for (l, &v) in paths[i * h..(i + 1) * h].iter().enumerate() {
            lo[l] = lo[l].min(v);
            hi[l] = hi[l].max(v);
        }
    }
    Ok(CredibleBand {
        level,
        d: post.d(),
        horizon,
        n_observed: base,
        lo,
        hi,
        mean: post.trajectory_means_with(&mut table, horizon),
        trajectories_kept: kept,
    })
}

/// Slices a band at `target_m`: the optimistic edge gives the lower end, the
/// pessimistic edge the upper end.
///
/// Fails when even the optimistic edge stays below `target_m`; the caller
/// should widen the horizon.
pub fn invert_band(band: &CredibleBand, target_m: u64) -> Result<DmInterval> {
    if target_m <= band.n_observed {
        return Err(Error::input(format!(
            "target M = {target_m} is already attained ({} users observed)",
            band.n_observed
        )));
    }
    let first = |edge: &[u64]| edge.iter().position(|&v| v >= target_m).map(|i| i as u32 + 1);
    let lower = first(&band.hi).ok_or_else(|| {
        Error::input(format!(
            "band horizon of {} days is too short to reach M = {target_m}; increase the horizon",
            band.horizon
        ))
    })?;
    let upper = first(&band.lo).map_or(DayBound::Censored, DayBound::Days);
    Ok(DmInterval {
        target_m,
        point: first_reaching(&band.mean, target_m),
        median: None,
        lower: DayBound::Days(lower),
        upper,
        method: IntervalMethod::Inversion,
        level: band.level,
        d_up_final: None,
        n_censored: 0,
    })
}

/// Reusable sampler for the new users over a fixed window: a negative
/// binomial count and independent categorical trigger days.
#[derive(Debug, Clone)]
pub struct NewUserSampler {
    d: u32,
    d_up: u32,
    count: NegBin<f64>,
    days: Categorical,
}

impl NewUserSampler {
    pub fn new(post: &PosteriorState, d_up: u32) -> Result<Self> {
        Self::with_table(post, d_up, &mut GammaTable::new(post.hyper.alpha)?)
    }

    fn with_table(post: &PosteriorState, d_up: u32, table: &mut GammaTable<f64>) -> Result<Self> {
        if d_up == 0 {
            return Err(Error::input("sampling window must be at least one day"));
        }
        let d = post.d() as u64;
        let rate = post.delta_rate;
        let count = NegBin::new(post.delta_shape, rate / (rate + table.accum(d, d_up as u64)))?;
        let days = trigger_day_law(table, d + 1, d + d_up as u64)?;
        Ok(Self {
            d: post.d(),
            d_up,
            count,
            days,
        })
    }

    pub fn count_law(&self) -> &NegBin<f64> {
        &self.count
    }

    pub fn d_up(&self) -> u32 {
        self.d_up
    }

    pub fn sample(&self, rng: &mut RngStream) -> Result<NewUserDraw> {
        let k = sample_negbin(&self.count, rng)?;
        let trigger_days = (0..k).map(|_| self.d + 1 + self.days.sample(rng) as u32).collect();
        Ok(NewUserDraw { k, trigger_days })
    }

    /// `r`-th smallest trigger day (1-based, counted after `d`) of one draw,
    /// or `None` when fewer than `r` users arrive.
    fn order_statistic(&self, r: u64, rng: &mut RngStream, hist: &mut Vec<u64>) -> Result<Option<u32>> {
        let k = sample_negbin(&self.count, rng)?;
        if k < r {
            return Ok(None);
        }
        hist.clear();
        hist.resize(self.d_up as usize, 0);
        for _ in 0..k {
            hist[self.days.sample(rng)] += 1;
        }
        let mut seen = 0;
        for (i, &c) in hist.iter().enumerate() {
            seen += c;
            if seen >= r {
                return Ok(Some(i as u32 + 1));
            }
        }
        unreachable!("k >= r users were placed in the histogram")
    }
}

/// One posterior draw of the new users first active in `d+1..=d+d_up`.
pub fn sample_new_user_triggers(post: &PosteriorState, d_up: u32, rng: &mut RngStream) -> Result<NewUserDraw> {
    NewUserSampler::new(post, d_up)?.sample(rng)
}

/// Empirical quantile `x_(ceil(q n))` of sorted data.
fn sorted_quantile(sorted: &[DayBound], q: f64) -> DayBound {
    let n = sorted.len();
    let idx = ((q * n as f64) - 1e-9).ceil().max(1.0) as usize;
    sorted[idx.min(n) - 1]
}

/// Posterior samples of `D_M` and their equal-tailed interval.
///
/// The window starts at three times the point estimate and is doubled while a
/// draw has fewer than `M - N_d` new users; after [`MAX_DOUBLINGS`] doublings
/// the draw is right-censored.
pub fn posterior_dm(
    post: &PosteriorState,
    target_m: u64,
    k_mc: usize,
    level: f64,
    rng: &mut RngStream,
) -> Result<(Vec<DayBound>, DmInterval)> {
    check_target(post, target_m)?;
    check_level(level)?;
    if k_mc < 100 {
        return Err(Error::input(format!("posterior D_M needs at least 100 draws, got {k_mc}")));
    }
    let need = target_m - post.n_users();
    let start = point_estimate_dm(post, target_m, POINT_CAP)?.days().unwrap_or(POINT_CAP);
    let mut table = GammaTable::new(post.hyper.alpha)?;
    let mut samplers: Vec<NewUserSampler> = Vec::new();
    let mut hist = Vec::new();
    let mut samples = Vec::with_capacity(k_mc);
    let mut d_up_final = 0;
    for _ in 0..k_mc {
        let mut outcome = DayBound::Censored;
        for level_idx in 0..=MAX_DOUBLINGS as usize {
            if samplers.len() <= level_idx {
                let d_up = start.saturating_mul(3).saturating_mul(1 << level_idx).max(1);
                samplers.push(NewUserSampler::with_table(post, d_up, &mut table)?);
            }
            let sampler = &samplers[level_idx];
            d_up_final = sampler.d_up;
            if let Some(day) = sampler.order_statistic(need, rng, &mut hist)? {
                outcome = DayBound::Days(day);
                break;
            }
        }
        samples.push(outcome);
    }

    let mut sorted = samples.clone();
    sorted.sort_unstable();
    let n_censored = sorted.iter().filter(|s| s.is_censored()).count();
    let tail = (1.0 - level) / 2.0;
    let point = if n_censored > 0 {
        DayBound::Censored
    } else {
        let total: u64 = sorted.iter().filter_map(|s| s.days()).map(u64::from).sum();
        DayBound::Days((total as f64 / k_mc as f64).ceil() as u32)
    };
    let interval = DmInterval {
        target_m,
        point,
        median: Some(sorted_quantile(&sorted, 0.5)),
        lower: sorted_quantile(&sorted, tail),
        upper: sorted_quantile(&sorted, 1.0 - tail),
        method: IntervalMethod::Posterior,
        level,
        d_up_final: Some(d_up_final),
        n_censored,
    };
    Ok((samples, interval))
}

/// When to stop generating Ferguson-Klass jumps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruncationRule {
    /// Stop once a jump's chance of triggering within `d_up` days falls below `delta`.
    Adaptive { d_up: u32, delta: f64 },
    FixedJumps(usize),
}

impl TruncationRule {
    pub fn adaptive(d_up: u32) -> Self {
        TruncationRule::Adaptive { d_up, delta: 1e-5 }
    }
}

/// Unseen-user jumps in decreasing order with their first trigger days.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FergusonKlassDraw {
    /// The latent `Delta^{-alpha}` of this draw.
    pub zeta: f64,
    pub jumps: Vec<f64>,
    pub trigger_days: Vec<u64>,
}

impl FergusonKlassDraw {
    /// Number of users first triggered in `d+1..=d+d_up`.
    pub fn count_within(&self, d: u32, d_up: u32) -> usize {
        let last = d as u64 + d_up as u64;
        self.trigger_days.iter().filter(|&&y| y <= last).count()
    }
}

const BISECT_TOL: f64 = 1e-12;
const BISECT_MAX_ITERS: usize = 200;

/// Bisection for `T(tau) = target` on `(0, upper)`; `T` is decreasing.
fn bisect_tail(target: f64, d: u64, alpha: f64, upper: f64) -> Result<f64> {
    let (mut lo, mut hi) = (0.0f64, upper);
    for _ in 0..BISECT_MAX_ITERS {
        let mid = 0.5 * (lo + hi);
        if hi - lo < BISECT_TOL {
            return Ok(mid);
        }
        if stable_tail_integral(mid, d, alpha)? > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::Numerical(format!(
        "jump bisection did not reach {BISECT_TOL:e} in {BISECT_MAX_ITERS} iterations"
    )))
}

/// Solves `alpha * zeta * T(tau) = e` for `tau` in `(0, upper)`.
fn solve_jump(e: f64, zeta: f64, d: u64, alpha: f64, upper: f64) -> Result<f64> {
    let target = e / (alpha * zeta);
    if d == 0 {
        // T(v) = (v^{-alpha} - 1) / alpha
        return Ok((1.0 + alpha * target).powf(-1.0 / alpha));
    }
    bisect_tail(target, d, alpha, upper)
}

/// Bisection without the closed form, for checking it.
#[doc(hidden)]
pub fn solve_jump_bisection(e: f64, zeta: f64, d: u64, alpha: f64) -> Result<f64> {
    bisect_tail(e / (alpha * zeta), d, alpha, 1.0)
}

/// Ferguson-Klass simulation of the unseen-user part of the posterior.
///
/// Jumps solve `alpha * zeta * T(tau_l) = E_l` at unit-rate Poisson arrival
/// times `E_l`; user `l` first triggers on day `d + Geom(tau_l)`.
pub fn ferguson_klass_new_measure(
    post: &PosteriorState,
    trunc: TruncationRule,
    rng: &mut RngStream,
) -> Result<FergusonKlassDraw> {
    let alpha = post.hyper.alpha;
    let d = post.d() as u64;
    if let TruncationRule::Adaptive { d_up, delta } = trunc {
        if d_up == 0 || !(delta > 0.0 && delta < 1.0) {
            return Err(Error::input("adaptive truncation needs d_up >= 1 and delta in (0, 1)"));
        }
    }
    let zeta = sample_gamma(post.delta_shape, post.delta_rate, rng)?;
    let mut jumps = Vec::new();
    let mut trigger_days = Vec::new();
    let mut e = 0.0;
    let mut upper = 1.0;
    loop {
        if let TruncationRule::FixedJumps(n) = trunc {
            if jumps.len() >= n {
                break;
            }
        }
        e += rng.exponential();
        let tau = solve_jump(e, zeta, d, alpha, upper)?;
        if let TruncationRule::Adaptive { d_up, delta } = trunc {
            // P(Geom(tau) <= d_up) = 1 - (1 - tau)^d_up
            if -(d_up as f64 * (-tau).ln_1p()).exp_m1() < delta {
                break;
            }
        }
        if tau <= 0.0 {
            return Err(Error::Numerical("jump underflowed to zero".into()));
        }
        let u: f64 = 1.0 - rng.random::<f64>();
        let wait = (u.ln() / (-tau).ln_1p()).floor() + 1.0;
        trigger_days.push(d + wait.min(u64::MAX as f64 / 2.0) as u64);
        jumps.push(tau);
        upper = tau;
    }
    Ok(FergusonKlassDraw {
        zeta,
        jumps,
        trigger_days,
    })
}
