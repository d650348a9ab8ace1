//! Synthetic activity data: the prior generative schemes of both models, the
//! DG1/DG2 simulation designs and a Zipf-distributed user population.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ActivityMatrix, Trigger, TriggerData, UserActivity};
use crate::error::{Error, Result};
use crate::model::Hyper;
use crate::sampling::{sample_beta, sample_negbin, Categorical, NegBin, RngStream};
use crate::special::GammaTable;
use crate::HyperParams;

fn check_days(days: u32) -> Result<()> {
    if days == 0 {
        Err(Error::input("simulation needs at least one day"))
    } else {
        Ok(())
    }
}

/// Law of the number of users first seen on days `seen+1..=seen+horizon`
/// given `n_seen` users so far.
pub(crate) fn new_user_law(
    table: &mut GammaTable<f64>,
    hyper: &HyperParams,
    n_seen: u64,
    seen: u32,
    horizon: u32,
) -> Result<NegBin<f64>> {
    let rate = hyper.beta + table.accum(0, seen as u64);
    let future = table.accum(seen as u64, horizon as u64);
    NegBin::new(n_seen as f64 + hyper.c + 1.0, rate / (rate + future))
}

/// Sequential (Indian-buffet style) simulation of the Bernoulli model.
///
/// On day `t + 1` every user already active on `m` of the first `t` days is
/// active again with probability `(m - alpha) / (t - alpha + 1)`, and a
/// negative binomial number of new users appears.
pub fn generate_bernoulli_prior(hyper: &HyperParams, days: u32, rng: &mut RngStream) -> Result<ActivityMatrix> {
    check_days(days)?;
    hyper.validate()?;
    let mut table = GammaTable::new(hyper.alpha)?;
    let mut users: Vec<Vec<u32>> = Vec::new();
    for day in 1..=days {
        let prev = (day - 1) as f64;
        let denom = prev - hyper.alpha + 1.0;
        for active in users.iter_mut() {
            let p = (active.len() as f64 - hyper.alpha) / denom;
            if rng.random::<f64>() < p {
                active.push(day);
            }
        }
        let law = new_user_law(&mut table, hyper, users.len() as u64, day - 1, 1)?;
        let arrivals = sample_negbin(&law, rng)?;
        users.extend((0..arrivals).map(|_| vec![day]));
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

/// Categorical law over `first..=last` proportional to `B(1 - alpha, y)`.
pub(crate) fn trigger_day_law(table: &mut GammaTable<f64>, first: u64, last: u64) -> Result<Categorical> {
    let log_w: Vec<f64> = (first..=last).map(|y| table.beta_term(y).ln()).collect();
    Categorical::from_log_weights(&log_w)
}

/// Compound-Poisson form of the Geometric model: a negative binomial number
/// of users with i.i.d. first trigger days, `P(Y = y) ∝ B(1 - alpha, y)`.
pub fn generate_geometric_prior(hyper: &HyperParams, days: u32, rng: &mut RngStream) -> Result<TriggerData> {
    check_days(days)?;
    hyper.validate()?;
    let mut table = GammaTable::new(hyper.alpha)?;
    let law = new_user_law(&mut table, hyper, 0, 0, days)?;
    let k = sample_negbin(&law, rng)?;
    let cat = trigger_day_law(&mut table, 1, days as u64)?;
    let triggers = (0..k)
        .map(|i| Trigger {
            id: format!("u{i}"),
            first_day: cat.sample(rng) as u32 + 1,
        })
        .collect();
    TriggerData::new(days, triggers)
}

/// DG2: Geometric-model first triggers followed by sparse, user-specific
/// repeat activity. After day `Y_i` a user is active with probability
/// `eps_i * (1 - alpha) / (1 - alpha + Y_i)`, `eps_i ~ U(0, 1/2)`.
pub fn generate_dg2(hyper: &HyperParams, days: u32, rng: &mut RngStream) -> Result<ActivityMatrix> {
    let triggers = generate_geometric_prior(hyper, days, rng)?;
    let one_minus = 1.0 - hyper.alpha;
    let users = triggers
        .triggers()
        .iter()
        .map(|t| {
            let eps = 0.5 * rng.random::<f64>();
            let p = eps * one_minus / (one_minus + t.first_day as f64);
            let mut active = vec![t.first_day];
            active.extend((t.first_day + 1..=days).filter(|_| rng.random::<f64>() < p));
            UserActivity {
                id: t.id.clone(),
                days: active,
            }
        })
        .collect();
    ActivityMatrix::new(days, users)
}

/// Hyperparameters of the DG1/DG2 designs: `alpha ~ Beta(a, b)`, fixed `c`, `beta`.
pub fn draw_design_hyper(alpha_prior: (f64, f64), c: f64, beta: f64, rng: &mut RngStream) -> Result<HyperParams> {
    let alpha = sample_beta(alpha_prior.0, alpha_prior.1, rng)?;
    // Beta draws can round to the closed endpoints.
    Hyper::new(alpha.clamp(1e-9, 1.0 - 1e-9), c, beta)
}

/// A finite pool where user `i` (1-based) is active on any day with
/// probability `i^{-tail_gamma}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZipfPopulation {
    pub pool_size: u64,
    pub tail_gamma: f64,
}

impl ZipfPopulation {
    pub fn new(pool_size: u64, tail_gamma: f64) -> Result<Self> {
        if pool_size == 0 {
            return Err(Error::input("Zipf pool must contain at least one user"));
        }
        if !(tail_gamma > 0.0) || !tail_gamma.is_finite() {
            return Err(Error::input(format!("Zipf tail parameter must be positive, got {tail_gamma}")));
        }
        Ok(Self { pool_size, tail_gamma })
    }

    pub fn daily_prob(&self, i: u64) -> f64 {
        (i as f64).powf(-self.tail_gamma)
    }

    /// `E[N_d] = sum_i 1 - (1 - p_i)^d`.
    pub fn expected_observed(&self, days: u32) -> f64 {
        (1..=self.pool_size)
            .map(|i| -(days as f64 * (-self.daily_prob(i)).ln_1p()).exp_m1())
            .sum()
    }

    /// Users active on one day, in increasing index order.
    ///
    /// Thinned geometric skipping: from index `i` the envelope `p_i` bounds all
    /// later probabilities, so the next candidate is `Geom(p_i)` slots away and
    /// is kept with probability `p_j / p_i`. Cost scales with the active set,
    /// not the pool.
    pub fn active_on_day(&self, rng: &mut RngStream, out: &mut Vec<u64>) {
        out.clear();
        let mut i = 1u64;
        while i <= self.pool_size {
            let envelope = self.daily_prob(i);
            let j = if envelope >= 1.0 {
                i
            } else {
                let skip = (rng.uniform_open().ln() / (-envelope).ln_1p()).floor();
                if skip >= (self.pool_size - i + 1) as f64 {
                    break;
                }
                i + skip as u64
            };
            let p = self.daily_prob(j);
            if p >= envelope || rng.random::<f64>() * envelope < p {
                out.push(j);
            }
            i = j + 1;
        }
    }
}

/// Day-by-day Zipf activity simulation that can be continued past the
/// training window.
#[derive(Debug, Clone)]
pub struct ZipfSimulator {
    pop: ZipfPopulation,
    rng: RngStream,
    day: u32,
    index: HashMap<u64, usize>,
    users: Vec<(u64, Vec<u32>)>,
    scratch: Vec<u64>,
}

impl ZipfSimulator {
    pub fn new(pop: ZipfPopulation, rng: RngStream) -> Self {
        Self {
            pop,
            rng,
            day: 0,
            index: HashMap::new(),
            users: Vec::new(),
            scratch: Vec::new(),
        }
    }

    pub fn day(&self) -> u32 {
        self.day
    }

    pub fn n_seen(&self) -> u64 {
        self.users.len() as u64
    }

    /// Simulates the next day; returns the number of first-time users.
    pub fn step(&mut self) -> u64 {
        self.day += 1;
        let mut scratch = std::mem::take(&mut self.scratch);
        self.pop.active_on_day(&mut self.rng, &mut scratch);
        let mut fresh = 0;
        for &i in &scratch {
            match self.index.get(&i) {
                Some(&slot) => self.users[slot].1.push(self.day),
                None => {
                    self.index.insert(i, self.users.len());
                    self.users.push((i, vec![self.day]));
                    fresh += 1;
                }
            }
        }
        self.scratch = scratch;
        fresh
    }

    pub fn activity(&self) -> Result<ActivityMatrix> {
        let users = self
            .users
            .iter()
            .map(|(i, days)| UserActivity {
                id: format!("z{i}"),
                days: days.clone(),
            })
            .collect();
        ActivityMatrix::new(self.day.max(1), users)
    }
}

/// Independent daily Bernoulli activity for a Zipf pool; only users active at
/// least once appear.
pub fn generate_zipf(pop: &ZipfPopulation, days: u32, rng: &mut RngStream) -> Result<ActivityMatrix> {
    check_days(days)?;
    let mut sim = ZipfSimulator::new(*pop, RngStream::new(rng.random(), 0));
    for _ in 0..days {
        sim.step();
    }
    sim.activity()
}
