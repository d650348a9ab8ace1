//! Forecasting of new active users and experiment-duration planning under
//! stable Beta-scaled process priors.
//!
//! The numerical core (special functions, marginal likelihoods, predictive
//! laws) is generic over the floating point type through [`Real`]. Monte Carlo
//! machinery, data generation and fitting run in `f64`; the aliases at the
//! bottom of this file name the concrete types used there.

// `!(x > 0.0)` also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod fit;
pub mod generators;
pub mod model;
pub mod planning;
pub mod sampling;
pub mod scalar;
pub mod special;

pub use error::{Error, Result};
pub use scalar::Real;

pub use data::{ActivityMatrix, ModelKind, SufficientStats, TriggerData};
pub use fit::{FitConfig, FitResult};
pub use planning::{CredibleBand, DayBound, DmInterval, NewUserDraw};
pub use sampling::RngStream;

/// SB-SP hyperparameters in double precision.
pub type HyperParams = model::Hyper<f64>;
/// Posterior summary in double precision.
pub type PosteriorState = model::Posterior<f64>;
/// Negative binomial law in double precision.
pub type NegBinLaw = sampling::NegBin<f64>;

/// Single precision variants, mostly useful for cheap bulk evaluation.
pub type HyperParamsF32 = model::Hyper<f32>;
pub type PosteriorStateF32 = model::Posterior<f32>;
pub type NegBinLawF32 = sampling::NegBin<f32>;
