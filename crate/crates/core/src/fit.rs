//! Empirical Bayes: maximize the marginal likelihood over `(alpha, c, beta)`.
//!
//! Nelder-Mead runs in unconstrained coordinates `(logit alpha, ln c, ln beta)`
//! from several starting points taken from a coarse grid.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ModelKind, SufficientStats};
use crate::error::{Error, Result};
use crate::model::{log_marginal, Hyper};
use crate::HyperParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub model: ModelKind,
    pub n_starts: usize,
    pub max_iters: usize,
    pub tol: f64,
    /// Replaces the default start grid when set.
    pub start_grid: Option<Vec<HyperParams>>,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::Geometric,
            n_starts: 8,
            max_iters: 2000,
            tol: 1e-8,
            start_grid: None,
        }
    }
}

impl FitConfig {
    pub fn for_model(model: ModelKind) -> Self {
        Self {
            model,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_starts == 0 {
            return Err(Error::input("n_starts must be at least 1"));
        }
        if !(self.tol > 0.0) {
            return Err(Error::input(format!("tol must be positive, got {}", self.tol)));
        }
        if self.max_iters == 0 {
            return Err(Error::input("max_iters must be at least 1"));
        }
        if let Some(grid) = &self.start_grid {
            if grid.is_empty() {
                return Err(Error::input("start_grid must not be empty"));
            }
            for h in grid {
                h.validate()?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub hyper: HyperParams,
    pub log_marginal: f64,
    pub converged: bool,
    pub n_evals: usize,
    /// Best objective (negative log marginal) after each iteration of the winning start.
    pub trace: Vec<f64>,
}

/// `{0.1, .., 0.9} x {1, .., 1e4} x {0.1, 1, 10}`.
pub fn default_grid() -> Vec<HyperParams> {
    let mut grid = Vec::with_capacity(75);
    for alpha in [0.1, 0.3, 0.5, 0.7, 0.9] {
        for c in [1.0, 10.0, 100.0, 1e3, 1e4] {
            for beta in [0.1, 1.0, 10.0] {
                grid.push(Hyper { alpha, c, beta });
            }
        }
    }
    grid
}

const COORD_LIMIT: f64 = 30.0;

fn to_coords(h: &HyperParams) -> [f64; 3] {
    [(h.alpha / (1.0 - h.alpha)).ln(), h.c.ln(), h.beta.ln()]
}

fn from_coords(x: &[f64; 3]) -> HyperParams {
    let x = x.map(|v| v.clamp(-COORD_LIMIT, COORD_LIMIT));
    Hyper {
        alpha: 1.0 / (1.0 + (-x[0]).exp()),
        c: x[1].exp(),
        beta: x[2].exp(),
    }
}

fn objective(stats: &SufficientStats, h: &HyperParams) -> f64 {
    match log_marginal(stats, h) {
        Ok(v) if v.is_finite() => -v,
        _ => f64::INFINITY,
    }
}

struct Simplex {
    best: [f64; 3],
    value: f64,
    converged: bool,
    n_evals: usize,
    trace: Vec<f64>,
}

fn nelder_mead(f: impl Fn(&[f64; 3]) -> f64, x0: [f64; 3], max_iters: usize, tol: f64) -> Simplex {
    const STEP: f64 = 1.0;
    const X_TOL: f64 = 1e-6;
    let mut n_evals = 0;
    let mut eval = |x: &[f64; 3]| {
        n_evals += 1;
        f(x)
    };
    let mut pts: Vec<([f64; 3], f64)> = Vec::with_capacity(4);
    pts.push((x0, eval(&x0)));
    for i in 0..3 {
        let mut x = x0;
        x[i] += STEP;
        pts.push((x, eval(&x)));
    }
    let mut trace = Vec::new();
    let mut converged = false;
    for _ in 0..max_iters {
        pts.sort_by(|a, b| a.1.total_cmp(&b.1));
        trace.push(pts[0].1);
        let diameter = pts[1..]
            .iter()
            .flat_map(|(x, _)| x.iter().zip(&pts[0].0).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        let spread = pts[3].1 - pts[0].1;
        if diameter < X_TOL || (spread.is_finite() && spread < tol) {
            converged = true;
            break;
        }
        let mut centroid = [0.0; 3];
        for (x, _) in &pts[..3] {
            for k in 0..3 {
                centroid[k] += x[k] / 3.0;
            }
        }
        let toward = |t: f64| -> [f64; 3] {
            let worst = pts[3].0;
            [0, 1, 2].map(|k| centroid[k] + t * (worst[k] - centroid[k]))
        };
        let xr = toward(-1.0);
        let fr = eval(&xr);
        if fr < pts[0].1 {
            let xe = toward(-2.0);
            let fe = eval(&xe);
            pts[3] = if fe < fr { (xe, fe) } else { (xr, fr) };
            continue;
        }
        if fr < pts[2].1 {
            pts[3] = (xr, fr);
            continue;
        }
        let (xc, fc) = if fr < pts[3].1 {
            let xc = toward(-0.5);
            (xc, eval(&xc))
        } else {
            let xc = toward(0.5);
            (xc, eval(&xc))
        };
        if fc < pts[3].1.min(fr) {
            pts[3] = (xc, fc);
            continue;
        }
        let best = pts[0].0;
        for p in &mut pts[1..] {
            p.0 = [0, 1, 2].map(|k| best[k] + 0.5 * (p.0[k] - best[k]));
            p.1 = eval(&p.0);
        }
    }
    pts.sort_by(|a, b| a.1.total_cmp(&b.1));
    Simplex {
        best: pts[0].0,
        value: pts[0].1,
        converged,
        n_evals,
        trace,
    }
}

/// Maximum marginal likelihood hyperparameters.
///
/// Every start runs independently; the best objective wins and ties go to the
/// earliest start, so the result does not depend on the thread count.
pub fn fit(stats: &SufficientStats, cfg: &FitConfig) -> Result<FitResult> {
    cfg.validate()?;
    if stats.kind != cfg.model {
        return Err(Error::input(format!(
            "fit configured for {:?} but statistics are {:?}",
            cfg.model, stats.kind
        )));
    }
    if stats.n_users() == 0 {
        return Err(Error::input("cannot fit hyperparameters without any observed user"));
    }
    let grid = cfg.start_grid.clone().unwrap_or_else(default_grid);
    let mut scored: Vec<(f64, usize)> = grid
        .iter()
        .enumerate()
        .map(|(i, h)| (objective(stats, h), i))
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let starts: Vec<[f64; 3]> = scored
        .iter()
        .take(cfg.n_starts)
        .map(|&(_, i)| to_coords(&grid[i]))
        .collect();

    let runs: Vec<Simplex> = starts
        .par_iter()
        .map(|x0| nelder_mead(|x| objective(stats, &from_coords(x)), *x0, cfg.max_iters, cfg.tol))
        .collect();
    let n_evals = grid.len() + runs.iter().map(|r| r.n_evals).sum::<usize>();
    let winner = runs
        .into_iter()
        .enumerate()
        .min_by(|a, b| a.1.value.total_cmp(&b.1.value).then(a.0.cmp(&b.0)))
        .map(|(_, r)| r)
        .expect("at least one start");
    if !winner.value.is_finite() {
        return Err(Error::Numerical("marginal likelihood is not finite at any start".into()));
    }
    let hyper = from_coords(&winner.best);
    Ok(FitResult {
        hyper,
        log_marginal: log_marginal(stats, &hyper)?,
        converged: winner.converged,
        n_evals,
        trace: winner.trace,
    })
}

/// Log marginal likelihood at each grid point, in grid order.
pub fn profile_objective(
    stats: &SufficientStats,
    model: ModelKind,
    grid: &[HyperParams],
) -> Result<Vec<(HyperParams, f64)>> {
    if grid.is_empty() {
        return Err(Error::input("profile grid must not be empty"));
    }
    if stats.kind != model {
        return Err(Error::input(format!("expected {model:?} statistics, got {:?}", stats.kind)));
    }
    grid.iter().map(|h| Ok((*h, log_marginal(stats, h)?))).collect()
}
