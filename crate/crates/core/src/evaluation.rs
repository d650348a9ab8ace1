//! Error metrics, top-k rankings and the seeded benchmark harness.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{ibp_fit, ibp_predict_new_users, IbpIndexing};
use crate::data::{ActivityMatrix, ModelKind, UserActivity};
use crate::error::{Error, Result};
use crate::fit::{fit, FitConfig};
use crate::generators::{
    draw_design_hyper, generate_bernoulli_prior, generate_dg2, generate_geometric_prior, ZipfPopulation,
    ZipfSimulator,
};
use crate::model::posterior;
use crate::planning::{global_band, invert_band, point_estimate_dm, posterior_dm, DayBound, DmInterval};
use crate::sampling::RngStream;
use crate::HyperParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub experiment_id: String,
    pub model_name: String,
    pub predicted: f64,
    pub actual: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorMetrics {
    pub abs_err: f64,
    pub rel_err: f64,
    /// Accuracy `1 - min(rel_err, 1)`.
    pub eta: f64,
}

pub fn error_metrics(predicted: f64, actual: u64) -> Result<ErrorMetrics> {
    if actual == 0 {
        return Err(Error::input("relative error is undefined when the actual count is zero"));
    }
    let abs_err = (actual as f64 - predicted).abs();
    let rel_err = abs_err / actual as f64;
    Ok(ErrorMetrics {
        abs_err,
        rel_err,
        eta: 1.0 - rel_err.min(1.0),
    })
}

/// `counts[model][k - 1]` = experiments where `model` ranks in the top `k`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopkTable {
    pub k_max: usize,
    pub n_experiments: usize,
    pub counts: BTreeMap<String, Vec<u64>>,
}

impl TopkTable {
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["model_name".to_string()];
        header.extend((1..=self.k_max).map(|k| format!("top{k}")));
        w.write_record(&header)?;
        for (model, counts) in &self.counts {
            let mut row = vec![model.clone()];
            row.extend(counts.iter().map(u64::to_string));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::Io {
            path: "<top-k csv>".into(),
            source: e,
        })
    }
}

/// Ranks models by absolute error within each experiment (ties by model name)
/// and counts top-k memberships.
pub fn topk_ranking(records: &[PredictionRecord], k_max: usize) -> Result<TopkTable> {
    let mut by_exp: BTreeMap<&str, Vec<(&str, f64)>> = BTreeMap::new();
    for r in records {
        by_exp
            .entry(&r.experiment_id)
            .or_default()
            .push((&r.model_name, (r.actual as f64 - r.predicted).abs()));
    }
    let mut models: Option<BTreeSet<&str>> = None;
    for (exp, rows) in &by_exp {
        let set: BTreeSet<&str> = rows.iter().map(|r| r.0).collect();
        if set.len() != rows.len() {
            return Err(Error::input(format!("experiment {exp} lists a model more than once")));
        }
        match &models {
            None => models = Some(set),
            Some(m) if *m != set => {
                return Err(Error::input(format!("experiment {exp} has a different model set than the others")))
            }
            Some(_) => {}
        }
    }
    let models = models.unwrap_or_default();
    if k_max == 0 || (k_max > models.len() && !models.is_empty()) {
        return Err(Error::input(format!(
            "k_max must lie in 1..={}, got {k_max}",
            models.len()
        )));
    }
    let mut counts: BTreeMap<String, Vec<u64>> = models.iter().map(|m| (m.to_string(), vec![0; k_max])).collect();
    for rows in by_exp.values_mut() {
        rows.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(b.0)));
        for (rank, (model, _)) in rows.iter().enumerate() {
            for k in rank..k_max {
                counts.get_mut(*model).expect("model registered")[k] += 1;
            }
        }
    }
    Ok(TopkTable {
        k_max,
        n_experiments: by_exp.len(),
        counts,
    })
}

/// Reads `experiment_id,model_name,predicted_new_users` rows.
pub fn read_external_predictions(path: &Path) -> Result<Vec<(String, String, f64)>> {
    let file = File::open(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let header: Vec<String> = reader.headers()?.iter().map(|h| h.trim_start_matches('\u{feff}').to_string()).collect();
    if header != ["experiment_id", "model_name", "predicted_new_users"] {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            msg: "expected header experiment_id,model_name,predicted_new_users".into(),
        });
    }
    let mut out = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row?;
        let line = i as u64 + 2;
        let bad = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        if row.len() != 3 {
            return Err(bad(format!("expected 3 fields, found {}", row.len())));
        }
        let value: f64 = row[2]
            .parse()
            .map_err(|_| bad(format!("predicted_new_users {:?} is not a number", &row[2])))?;
        if !value.is_finite() {
            return Err(bad("predicted_new_users must be finite".into()));
        }
        out.push((row[0].to_string(), row[1].to_string(), value));
    }
    Ok(out)
}

fn default_alpha_prior() -> (f64, f64) {
    (4.0, 10.0)
}
fn default_design_c() -> f64 {
    2500.0
}
fn default_design_beta() -> f64 {
    0.5
}
fn default_pool() -> u64 {
    1_000_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum GeneratorSpec {
    Dg1 {
        #[serde(default = "default_alpha_prior")]
        alpha_prior: (f64, f64),
        /// Fixes alpha instead of drawing it.
        #[serde(default)]
        alpha: Option<f64>,
        #[serde(default = "default_design_c")]
        c: f64,
        #[serde(default = "default_design_beta")]
        beta: f64,
    },
    Dg2 {
        #[serde(default = "default_alpha_prior")]
        alpha_prior: (f64, f64),
        #[serde(default)]
        alpha: Option<f64>,
        #[serde(default = "default_design_c")]
        c: f64,
        #[serde(default = "default_design_beta")]
        beta: f64,
    },
    Zipf {
        gammas: Vec<f64>,
        #[serde(default = "default_pool")]
        pool: u64,
    },
    BmPrior {
        hyper: HyperParams,
    },
    GmPrior {
        hyper: HyperParams,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelSpec {
    Gm,
    Bm,
    Ibp,
    /// Posterior predictive under the generating hyperparameters.
    Oracle,
}

impl ModelSpec {
    pub fn name(self) -> &'static str {
        match self {
            ModelSpec::Gm => "gm",
            ModelSpec::Bm => "bm",
            ModelSpec::Ibp => "ibp",
            ModelSpec::Oracle => "oracle",
        }
    }
}

fn default_models() -> Vec<ModelSpec> {
    vec![ModelSpec::Gm, ModelSpec::Bm, ModelSpec::Ibp, ModelSpec::Oracle]
}
fn default_level() -> f64 {
    0.95
}
fn default_q() -> usize {
    2000
}
fn default_k_mc() -> usize {
    1000
}
fn default_max_days() -> u32 {
    120
}
fn default_multipliers() -> Vec<f64> {
    vec![1.5]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskSpec {
    /// Predict the number of new users over `horizon_days`.
    Predict {
        #[serde(default = "default_models")]
        models: Vec<ModelSpec>,
    },
    /// Interval estimates of the days needed to reach `multiplier * N_d` users.
    DmInterval {
        #[serde(default = "default_multipliers")]
        target_multipliers: Vec<f64>,
        #[serde(default = "default_level")]
        level: f64,
        #[serde(default = "default_q")]
        q: usize,
        #[serde(default = "default_k_mc")]
        k_mc: usize,
        /// Truth is right-censored beyond this many days.
        #[serde(default = "default_max_days")]
        max_days: u32,
        /// Band horizon in days; by default three times the point estimate of `D_M`.
        #[serde(default)]
        band_horizon: Option<u32>,
        #[serde(default)]
        model: ModelKind,
    },
}

fn default_horizon() -> u32 {
    14
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub replications: usize,
    pub train_days: u32,
    #[serde(default = "default_horizon")]
    pub horizon_days: u32,
    pub generator: GeneratorSpec,
    pub task: TaskSpec,
    #[serde(default)]
    pub external_predictions: Option<PathBuf>,
    #[serde(default)]
    pub ibp_indexing: IbpIndexing,
    #[serde(default)]
    pub fit: Option<FitConfig>,
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_days == 0 || self.horizon_days == 0 {
            return Err(Error::input("train_days and horizon_days must be at least 1"));
        }
        match &self.generator {
            GeneratorSpec::Zipf { gammas, pool } => {
                if gammas.is_empty() {
                    return Err(Error::input("zipf generator needs at least one gamma"));
                }
                for &g in gammas {
                    ZipfPopulation::new(*pool, g)?;
                }
            }
            GeneratorSpec::Dg1 { alpha, c, beta, alpha_prior } | GeneratorSpec::Dg2 { alpha, c, beta, alpha_prior } => {
                HyperParams::new(alpha.unwrap_or(0.5), *c, *beta)?;
                if !(alpha_prior.0 > 0.0 && alpha_prior.1 > 0.0) {
                    return Err(Error::input("alpha_prior parameters must be positive"));
                }
            }
            GeneratorSpec::BmPrior { hyper } | GeneratorSpec::GmPrior { hyper } => hyper.validate()?,
        }
        if let TaskSpec::DmInterval {
            target_multipliers,
            level,
            q,
            k_mc,
            max_days,
            band_horizon,
            ..
        } = &self.task
        {
            if target_multipliers.iter().any(|&m| !(m > 1.0)) {
                return Err(Error::input("target multipliers must exceed 1"));
            }
            if !(*level > 0.0 && *level < 1.0) || *q < 100 || *k_mc < 100 || *max_days == 0 || *band_horizon == Some(0) {
                return Err(Error::input(
                    "dm_interval needs level in (0,1), q >= 100, k_mc >= 100, max_days >= 1 and band_horizon >= 1",
                ));
            }
        }
        if let Some(f) = &self.fit {
            f.validate()?;
        }
        Ok(())
    }

    fn settings(&self) -> Vec<String> {
        match &self.generator {
            GeneratorSpec::Zipf { gammas, .. } => gammas.iter().map(|g| format!("zipf-g{g}")).collect(),
            GeneratorSpec::Dg1 { .. } => vec!["dg1".into()],
            GeneratorSpec::Dg2 { .. } => vec!["dg2".into()],
            GeneratorSpec::BmPrior { .. } => vec!["bm-prior".into()],
            GeneratorSpec::GmPrior { .. } => vec!["gm-prior".into()],
        }
    }

    fn fit_config(&self, model: ModelKind) -> FitConfig {
        FitConfig {
            model,
            ..self.fit.clone().unwrap_or_default()
        }
    }
}

/// Simulated dataset with the hyperparameters and model family that produced it.
struct Generated {
    data: ActivityMatrix,
    truth: Option<(HyperParams, ModelKind)>,
}

fn triggers_as_activity(days: u32, t: crate::data::TriggerData) -> Result<ActivityMatrix> {
    let users = t
        .triggers()
        .iter()
        .map(|t| UserActivity {
            id: t.id.clone(),
            days: vec![t.first_day],
        })
        .collect();
    ActivityMatrix::new(days, users)
}

fn generate(spec: &GeneratorSpec, setting: usize, days: u32, rng: &mut RngStream) -> Result<Generated> {
    let design = |alpha_prior: (f64, f64), alpha: Option<f64>, c: f64, beta: f64, rng: &mut RngStream| match alpha {
        Some(a) => HyperParams::new(a, c, beta),
        None => draw_design_hyper(alpha_prior, c, beta, rng),
    };
    Ok(match spec {
        GeneratorSpec::Dg1 { alpha_prior, alpha, c, beta } => {
            let h = design(*alpha_prior, *alpha, *c, *beta, rng)?;
            Generated {
                data: generate_bernoulli_prior(&h, days, rng)?,
                truth: Some((h, ModelKind::Bernoulli)),
            }
        }
        GeneratorSpec::Dg2 { alpha_prior, alpha, c, beta } => {
            let h = design(*alpha_prior, *alpha, *c, *beta, rng)?;
            Generated {
                data: generate_dg2(&h, days, rng)?,
                truth: Some((h, ModelKind::Geometric)),
            }
        }
        GeneratorSpec::Zipf { gammas, pool } => {
            let pop = ZipfPopulation::new(*pool, gammas[setting])?;
            let mut sim = ZipfSimulator::new(pop, rng.child(1));
            for _ in 0..days {
                sim.step();
            }
            Generated {
                data: sim.activity()?,
                truth: None,
            }
        }
        GeneratorSpec::BmPrior { hyper } => Generated {
            data: generate_bernoulli_prior(hyper, days, rng)?,
            truth: Some((*hyper, ModelKind::Bernoulli)),
        },
        GeneratorSpec::GmPrior { hyper } => Generated {
            data: triggers_as_activity(days, generate_geometric_prior(hyper, days, rng)?)?,
            truth: Some((*hyper, ModelKind::Geometric)),
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelPrediction {
    pub model_name: String,
    pub predicted: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<ErrorMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetOutcome {
    pub multiplier: f64,
    pub target_m: u64,
    pub truth: DayBound,
    pub posterior: Option<DmInterval>,
    pub inversion: Option<DmInterval>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub errors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub experiment_id: String,
    pub setting: String,
    pub replication: usize,
    pub n_observed: Option<u64>,
    pub actual_new_users: Option<u64>,
    pub true_hyper: Option<HyperParams>,
    pub fitted_hyper: Option<HyperParams>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub predictions: Vec<ModelPrediction>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub targets: Vec<TargetOutcome>,
    pub error: Option<String>,
}

impl ReplicationRecord {
    fn new(experiment_id: String, setting: String, replication: usize) -> Self {
        Self {
            experiment_id,
            setting,
            replication,
            n_observed: None,
            actual_new_users: None,
            true_hyper: None,
            fitted_hyper: None,
            predictions: Vec::new(),
            targets: Vec::new(),
            error: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub n: usize,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

/// Quartiles with linear interpolation between order statistics.
pub fn quartiles(values: &[f64]) -> Option<Quartiles> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let at = |p: f64| {
        let pos = p * (v.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
    };
    Some(Quartiles {
        n: v.len(),
        q1: at(0.25),
        median: at(0.5),
        q3: at(0.75),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSummary {
    pub setting: String,
    pub model_name: String,
    pub abs_err: Option<Quartiles>,
    pub rel_err: Option<Quartiles>,
    pub eta: Option<Quartiles>,
    pub n_failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalSummary {
    pub setting: String,
    pub multiplier: f64,
    pub n: usize,
    pub posterior_coverage: Option<f64>,
    pub inversion_coverage: Option<f64>,
    pub posterior_length: Option<Quartiles>,
    pub inversion_length: Option<Quartiles>,
    /// Share of replications where the inversion interval is at least as long.
    pub inversion_not_shorter: Option<f64>,
    pub n_posterior_censored: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub predictions: Vec<PredictionSummary>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub topk: Option<TopkTable>,
    /// Experiments left out of the ranking because a model failed or was missing.
    pub excluded_from_ranking: usize,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub intervals: Vec<IntervalSummary>,
    pub n_failed_replications: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub config_echo: BenchmarkConfig,
    pub per_replication: Vec<ReplicationRecord>,
    pub aggregates: Aggregates,
}

/// Runs every replication of every setting on its own child stream of `rng`,
/// in parallel; the report does not depend on scheduling.
pub fn run_benchmark(config: &BenchmarkConfig, rng: &RngStream) -> Result<BenchmarkReport> {
    config.validate()?;
    let external = match &config.external_predictions {
        Some(path) => read_external_predictions(path)?,
        None => Vec::new(),
    };
    let mut external_by_exp: HashMap<String, Vec<(String, f64)>> = HashMap::new();
    for (exp, model, value) in external {
        external_by_exp.entry(exp).or_default().push((model, value));
    }
    let settings = config.settings();
    let jobs: Vec<(usize, usize)> = (0..settings.len())
        .flat_map(|s| (0..config.replications).map(move |r| (s, r)))
        .collect();
    let per_replication: Vec<ReplicationRecord> = jobs
        .par_iter()
        .map(|&(s, r)| {
            let mut stream = rng.child(((s as u64) << 32) | r as u64);
            let id = format!("{}-r{:03}", settings[s], r);
            let mut record = ReplicationRecord::new(id, settings[s].clone(), r);
            if let Err(e) = run_replication(config, s, &mut stream, &external_by_exp, &mut record) {
                record.error = Some(e.to_string());
            }
            record
        })
        .collect();
    let aggregates = aggregate(config, &settings, &per_replication)?;
    Ok(BenchmarkReport {
        config_echo: config.clone(),
        per_replication,
        aggregates,
    })
}

fn run_replication(
    config: &BenchmarkConfig,
    setting: usize,
    rng: &mut RngStream,
    external: &HashMap<String, Vec<(String, f64)>>,
    record: &mut ReplicationRecord,
) -> Result<()> {
    let d = config.train_days;
    match &config.task {
        TaskSpec::Predict { models } => {
            let big_d = config.horizon_days;
            let gen = generate(&config.generator, setting, d + big_d, rng)?;
            record.true_hyper = gen.truth.map(|t| t.0);
            let train = gen.data.restrict(d)?;
            let actual = gen.data.new_users_between(d, big_d);
            record.n_observed = Some(train.n_users() as u64);
            record.actual_new_users = Some(actual);
            for &m in models {
                let predicted = match m {
                    ModelSpec::Gm | ModelSpec::Bm => {
                        let kind = if m == ModelSpec::Gm {
                            ModelKind::Geometric
                        } else {
                            ModelKind::Bernoulli
                        };
                        let stats = train.stats(kind);
                        fit(&stats, &config.fit_config(kind))
                            .and_then(|f| posterior(&stats, &f.hyper))
                            .and_then(|p| p.predict_new_users(big_d))
                            .map(|law| law.mean())
                    }
                    ModelSpec::Ibp => ibp_fit(&train.bernoulli_stats(), &config.fit_config(ModelKind::Bernoulli))
                        .and_then(|p| ibp_predict_new_users(&p, d, big_d, config.ibp_indexing)),
                    ModelSpec::Oracle => match gen.truth {
                        Some((h, kind)) => posterior(&train.stats(kind), &h)
                            .and_then(|p| p.predict_new_users(big_d))
                            .map(|law| law.mean()),
                        // no generating hyperparameters to compare against
                        None => continue,
                    },
                };
                record.predictions.push(scored(m.name().to_string(), predicted, actual));
            }
            if let Some(rows) = external.get(&record.experiment_id) {
                for (model, value) in rows {
                    record.predictions.push(scored(model.clone(), Ok(*value), actual));
                }
            }
        }
        TaskSpec::DmInterval {
            target_multipliers,
            level,
            q,
            k_mc,
            max_days,
            band_horizon,
            model,
        } => {
            let gen = generate(&config.generator, setting, d + max_days, rng)?;
            record.true_hyper = gen.truth.map(|t| t.0);
            let train = gen.data.restrict(d)?;
            let n_d = train.n_users() as u64;
            record.n_observed = Some(n_d);
            let stats = train.stats(*model);
            let fitted = fit(&stats, &config.fit_config(*model))?;
            record.fitted_hyper = Some(fitted.hyper);
            let post = posterior(&stats, &fitted.hyper)?;

            let mut per_day = vec![0u64; (d + max_days) as usize + 1];
            for u in gen.data.users() {
                per_day[u.days[0] as usize] += 1;
            }
            let cumulative: Vec<u64> = per_day
                .iter()
                .scan(0, |acc, &x| {
                    *acc += x;
                    Some(*acc)
                })
                .collect();
            for &mult in target_multipliers {
                let target_m = (mult * n_d as f64).ceil() as u64;
                let truth = (d + 1..=d + max_days)
                    .find(|&t| cumulative[t as usize] >= target_m)
                    .map_or(DayBound::Censored, |t| DayBound::Days(t - d));
                let mut outcome = TargetOutcome {
                    multiplier: mult,
                    target_m,
                    truth,
                    posterior: None,
                    inversion: None,
                    errors: Vec::new(),
                };
                match posterior_dm(&post, target_m, *k_mc, *level, rng) {
                    Ok((_, iv)) => outcome.posterior = Some(iv),
                    Err(e) => outcome.errors.push(format!("posterior: {e}")),
                }
                let horizon = match band_horizon {
                    Some(h) => Ok(*h),
                    None => point_estimate_dm(&post, target_m, *max_days)
                        .map(|p| p.days().map_or(*max_days, |days| 3 * days.max(1))),
                };
                let inversion = horizon
                    .and_then(|h| global_band(&post, *level, h, *q, rng))
                    .and_then(|band| invert_band(&band, target_m));
                match inversion {
                    Ok(iv) => outcome.inversion = Some(iv),
                    Err(e) => outcome.errors.push(format!("inversion: {e}")),
                }
                record.targets.push(outcome);
            }
        }
    }
    Ok(())
}

fn scored(model_name: String, predicted: Result<f64>, actual: u64) -> ModelPrediction {
    match predicted {
        Ok(p) => ModelPrediction {
            model_name,
            predicted: p,
            metrics: error_metrics(p, actual).ok(),
            error: None,
        },
        Err(e) => ModelPrediction {
            model_name,
            predicted: f64::NAN,
            metrics: None,
            error: Some(e.to_string()),
        },
    }
}

/// Whether `[lower, upper]` contains the realized `D_M`.
pub fn covers(iv: &DmInterval, truth: DayBound) -> bool {
    iv.lower <= truth && truth <= iv.upper
}

/// `upper - lower` in days; `None` when the upper end is censored.
pub fn interval_length(iv: &DmInterval) -> Option<u32> {
    match (iv.lower, iv.upper) {
        (DayBound::Days(lo), DayBound::Days(hi)) => Some(hi.saturating_sub(lo)),
        _ => None,
    }
}

fn aggregate(config: &BenchmarkConfig, settings: &[String], records: &[ReplicationRecord]) -> Result<Aggregates> {
    let mut agg = Aggregates {
        n_failed_replications: records.iter().filter(|r| r.error.is_some()).count(),
        ..Aggregates::default()
    };
    match &config.task {
        TaskSpec::Predict { .. } => {
            let mut names: BTreeSet<&str> = BTreeSet::new();
            for r in records {
                names.extend(r.predictions.iter().map(|p| p.model_name.as_str()));
            }
            for setting in settings {
                for &name in &names {
                    let rows: Vec<&ModelPrediction> = records
                        .iter()
                        .filter(|r| &r.setting == setting)
                        .flat_map(|r| r.predictions.iter().filter(|p| p.model_name == name))
                        .collect();
                    let pick = |f: fn(&ErrorMetrics) -> f64| {
                        quartiles(&rows.iter().filter_map(|p| p.metrics.as_ref().map(f)).collect::<Vec<_>>())
                    };
                    agg.predictions.push(PredictionSummary {
                        setting: setting.clone(),
                        model_name: name.to_string(),
                        abs_err: pick(|m| m.abs_err),
                        rel_err: pick(|m| m.rel_err),
                        eta: pick(|m| m.eta),
                        n_failed: rows.iter().filter(|p| p.error.is_some()).count(),
                    });
                }
            }
            let mut ranked = Vec::new();
            for r in records {
                let complete = r.error.is_none()
                    && r.predictions.len() == names.len()
                    && r.predictions.iter().all(|p| p.error.is_none());
                if !complete {
                    agg.excluded_from_ranking += 1;
                    continue;
                }
                let actual = r.actual_new_users.unwrap_or(0);
                ranked.extend(r.predictions.iter().map(|p| PredictionRecord {
                    experiment_id: r.experiment_id.clone(),
                    model_name: p.model_name.clone(),
                    predicted: p.predicted,
                    actual,
                }));
            }
            if !ranked.is_empty() {
                agg.topk = Some(topk_ranking(&ranked, names.len())?);
            }
        }
        TaskSpec::DmInterval { target_multipliers, .. } => {
            for setting in settings {
                for &mult in target_multipliers {
                    let outcomes: Vec<&TargetOutcome> = records
                        .iter()
                        .filter(|r| &r.setting == setting)
                        .flat_map(|r| r.targets.iter().filter(|t| t.multiplier == mult))
                        .collect();
                    let coverage = |get: fn(&TargetOutcome) -> Option<&DmInterval>| {
                        let hits: Vec<bool> = outcomes
                            .iter()
                            .filter_map(|t| get(t).map(|iv| covers(iv, t.truth)))
                            .collect();
                        (!hits.is_empty()).then(|| hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
                    };
                    let lengths = |get: fn(&TargetOutcome) -> Option<&DmInterval>| {
                        let v: Vec<f64> = outcomes
                            .iter()
                            .filter_map(|t| get(t).and_then(interval_length))
                            .map(f64::from)
                            .collect();
                        quartiles(&v)
                    };
                    let paired: Vec<bool> = outcomes
                        .iter()
                        .filter_map(|t| match (&t.posterior, &t.inversion) {
                            (Some(p), Some(i)) => Some(inversion_not_shorter(i, p)),
                            _ => None,
                        })
                        .collect();
                    agg.intervals.push(IntervalSummary {
                        setting: setting.clone(),
                        multiplier: mult,
                        n: outcomes.len(),
                        posterior_coverage: coverage(|t| t.posterior.as_ref()),
                        inversion_coverage: coverage(|t| t.inversion.as_ref()),
                        posterior_length: lengths(|t| t.posterior.as_ref()),
                        inversion_length: lengths(|t| t.inversion.as_ref()),
                        inversion_not_shorter: (!paired.is_empty())
                            .then(|| paired.iter().filter(|&&b| b).count() as f64 / paired.len() as f64),
                        n_posterior_censored: outcomes
                            .iter()
                            .filter(|t| t.posterior.as_ref().is_some_and(|p| p.n_censored > 0))
                            .count(),
                    });
                }
            }
        }
    }
    Ok(agg)
}

/// Compares lengths with a censored upper end counting as infinitely long.
pub fn inversion_not_shorter(inversion: &DmInterval, posterior: &DmInterval) -> bool {
    match (interval_length(inversion), interval_length(posterior)) {
        (None, _) => true,
        (Some(_), None) => false,
        (Some(i), Some(p)) => i >= p,
    }
}

impl BenchmarkReport {
    /// Writes `report.json` and the CSV tables into `dir`; returns the paths.
    pub fn write_to_dir(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
        let create = |name: &str| -> Result<(PathBuf, File)> {
            let path = dir.join(name);
            let file = File::create(&path).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            Ok((path, file))
        };
        let mut written = Vec::new();

        let (path, file) = create("report.json")?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), self)?;
        written.push(path);

        match &self.config_echo.task {
            TaskSpec::Predict { .. } => {
                let (path, file) = create("predictions.csv")?;
                let mut w = csv::Writer::from_writer(file);
                w.write_record(["experiment_id", "setting", "model_name", "predicted", "actual", "abs_err", "rel_err", "eta"])?;
                for r in &self.per_replication {
                    for p in &r.predictions {
                        let m = p.metrics;
                        w.write_record([
                            r.experiment_id.clone(),
                            r.setting.clone(),
                            p.model_name.clone(),
                            p.predicted.to_string(),
                            r.actual_new_users.map(|a| a.to_string()).unwrap_or_default(),
                            m.map(|m| m.abs_err.to_string()).unwrap_or_default(),
                            m.map(|m| m.rel_err.to_string()).unwrap_or_default(),
                            m.map(|m| m.eta.to_string()).unwrap_or_default(),
                        ])?;
                    }
                }
                w.flush().map_err(|e| Error::Io { path: path.clone(), source: e })?;
                written.push(path);

                let (path, file) = create("prediction_summary.csv")?;
                let mut w = csv::Writer::from_writer(file);
                w.write_record(["setting", "model_name", "n", "abs_q1", "abs_median", "abs_q3", "rel_q1", "rel_median", "rel_q3", "eta_median", "n_failed"])?;
                let fmt = |q: Option<Quartiles>, f: fn(&Quartiles) -> f64| q.map(|q| f(&q).to_string()).unwrap_or_default();
                for s in &self.aggregates.predictions {
                    w.write_record([
                        s.setting.clone(),
                        s.model_name.clone(),
                        s.abs_err.map_or(0, |q| q.n).to_string(),
                        fmt(s.abs_err, |q| q.q1),
                        fmt(s.abs_err, |q| q.median),
                        fmt(s.abs_err, |q| q.q3),
                        fmt(s.rel_err, |q| q.q1),
                        fmt(s.rel_err, |q| q.median),
                        fmt(s.rel_err, |q| q.q3),
                        fmt(s.eta, |q| q.median),
                        s.n_failed.to_string(),
                    ])?;
                }
                w.flush().map_err(|e| Error::Io { path: path.clone(), source: e })?;
                written.push(path);

                if let Some(t) = &self.aggregates.topk {
                    let (path, file) = create("topk.csv")?;
                    t.write_csv(file)?;
                    written.push(path);
                }
            }
            TaskSpec::DmInterval { .. } => {
                let (path, file) = create("intervals.csv")?;
                let mut w = csv::Writer::from_writer(file);
                w.write_record(["experiment_id", "setting", "multiplier", "target_m", "truth", "method", "point", "lower", "upper", "covered"])?;
                for r in &self.per_replication {
                    for t in &r.targets {
                        for iv in [&t.posterior, &t.inversion].into_iter().flatten() {
                            w.write_record([
                                r.experiment_id.clone(),
                                r.setting.clone(),
                                t.multiplier.to_string(),
                                t.target_m.to_string(),
                                t.truth.to_string(),
                                serde_json::to_value(iv.method)?.as_str().unwrap_or_default().to_string(),
                                iv.point.to_string(),
                                iv.lower.to_string(),
                                iv.upper.to_string(),
                                covers(iv, t.truth).to_string(),
                            ])?;
                        }
                    }
                }
                w.flush().map_err(|e| Error::Io { path: path.clone(), source: e })?;
                written.push(path);

                let (path, file) = create("interval_summary.csv")?;
                let mut w = csv::Writer::from_writer(file);
                w.write_record(["setting", "multiplier", "n", "posterior_coverage", "inversion_coverage", "posterior_median_length", "inversion_median_length", "inversion_not_shorter"])?;
                let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
                for s in &self.aggregates.intervals {
                    w.write_record([
                        s.setting.clone(),
                        s.multiplier.to_string(),
                        s.n.to_string(),
                        opt(s.posterior_coverage),
                        opt(s.inversion_coverage),
                        opt(s.posterior_length.map(|q| q.median)),
                        opt(s.inversion_length.map(|q| q.median)),
                        opt(s.inversion_not_shorter),
                    ])?;
                }
                w.flush().map_err(|e| Error::Io { path: path.clone(), source: e })?;
                written.push(path);
            }
        }
        Ok(written)
    }
}
