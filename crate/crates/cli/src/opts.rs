use std::path::{Path, PathBuf};

use clap::ValueEnum;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use sbsp_core::ModelKind;

use crate::CliError;

/// Declares a command's option set. Every field is optional so that a JSON
/// config file and the command line can be layered, flags last.
macro_rules! options {
    ($(#[$meta:meta])* struct $name:ident { $( $(#[$fmeta:meta])* $field:ident : $ty:ty, )* }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Default, clap::Args, Serialize, Deserialize)]
        #[serde(deny_unknown_fields)]
        pub struct $name {
            $(
                $(#[$fmeta])*
                #[arg(long)]
                #[serde(default, skip_serializing_if = "Option::is_none")]
                pub $field: Option<$ty>,
            )*
        }

        impl $name {
            /// Fields set on `top` replace those of `self`.
            pub fn overlay(mut self, top: Self) -> Self {
                $( if top.$field.is_some() { self.$field = top.$field; } )*
                self
            }
        }
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlanMethod {
    Inversion,
    Posterior,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorKind {
    Dg1,
    Dg2,
    Zipf,
    BmPrior,
    GmPrior,
}

options! {
    struct FitOpts {
        /// Observation model: gm (first trigger days) or bm (daily activity).
        model: ModelKind,
        /// Activity CSV (`user_id,day`) or trigger CSV (`user_id,first_day`).
        input: PathBuf,
        /// Number of observed days; defaults to the last day in the input.
        d: u32,
        /// Output file; stdout when absent.
        output: PathBuf,
        seed: u64,
        threads: usize,
        /// Nelder-Mead restarts.
        n_starts: usize,
        max_iters: usize,
        tol: f64,
    }
}

options! {
    struct PredictOpts {
        model: ModelKind,
        input: PathBuf,
        d: u32,
        output: PathBuf,
        seed: u64,
        threads: usize,
        /// Skip fitting and use these hyperparameters (all three required).
        alpha: f64,
        c: f64,
        beta: f64,
        /// Number of future days `D`.
        horizon: u32,
        n_starts: usize,
        max_iters: usize,
        tol: f64,
    }
}

options! {
    struct PlanOpts {
        model: ModelKind,
        input: PathBuf,
        d: u32,
        output: PathBuf,
        seed: u64,
        threads: usize,
        alpha: f64,
        c: f64,
        beta: f64,
        /// Absolute user target `M`.
        target: u64,
        /// Target as a multiple of the users seen so far.
        target_mult: f64,
        method: PlanMethod,
        level: f64,
        /// Trajectories simulated for the credible band.
        q: usize,
        /// Posterior draws of `D_M`.
        k_mc: usize,
        /// Band horizon in days; three times the point estimate by default.
        band_horizon: u32,
        /// Cap on the point-estimate search.
        max_days: u32,
        /// Where to write the band CSV; next to `--output` by default.
        band_csv: PathBuf,
        n_starts: usize,
        max_iters: usize,
        tol: f64,
    }
}

options! {
    struct SimulateOpts {
        gen: GeneratorKind,
        days: u32,
        output: PathBuf,
        seed: u64,
        threads: usize,
        /// Fixes alpha; drawn from Beta(alpha_prior) otherwise.
        alpha: f64,
        c: f64,
        beta: f64,
        /// Zipf tail exponent.
        gamma: f64,
        /// Zipf pool size.
        pool: u64,
    }
}

/// Reads a JSON option set, rejecting unknown keys.
pub fn load_config<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
}
