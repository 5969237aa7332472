//! Online prediction under unbounded feedback delays.
//!
//! A predictor sees, at step `n`, every outcome revealed so far (possibly with
//! arbitrarily long delays) and combines a pool of forecasters through the
//! pairwise-test selector in [`evop`].

pub mod bounds;
pub mod environments;
pub mod evop;
pub mod forecasters;
pub mod harness;
pub mod loss;
pub mod metrics;
pub mod model;

pub use environments::{EnvSpec, Environment};
pub use evop::{evop_predict, max_score, rel_score, test_seq, Decision, EvopConfig, EvopState};
pub use forecasters::{Forecaster, ForecasterPool, ForecasterSpec};
pub use loss::LossSpec;
pub use metrics::RunLedger;
pub use model::{Observation, ObservationLog, Outcome, Prediction, Subsequence};
