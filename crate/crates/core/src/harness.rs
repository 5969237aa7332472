//! Experiment runner: JSON configs, seeded runs, CSV and report emission.
//!
//! Seeds: run `i` uses the first `u64` of ChaCha8 seeded with the master seed
//! on stream `i`, so adding runs never changes existing ones.
//!
//! Per-run files (under the output directory):
//! * `run_<i>.csv`: `n, pred_<name>…, loss_<name>…, evop_choice, evop_pred`,
//!   with cumulative losses and floats as `{:.16e}`. Abstentions are empty.
//!   Unless `per_step` is set, a step is written only when it is the first or
//!   last step, a block end, or some prediction or the EvOp choice differs
//!   from the previous step; omitted steps repeat the previous row's
//!   predictions.
//! * `blocks_<i>.csv` (block-structured environments): per-block coin, block
//!   loss and block-end regret of every forecaster and of EvOp.
//! * `run_<i>.json`: config echo, derived seed, RNG identifier, end marker.
//!
//! Plus `summary.csv` (one row per run) and `report.txt` (one line per
//! scenario assertion).

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use num_bigint::BigUint;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bounds::{
    convergence_probability, steps_for_probability, verify_concentration, BoundParams, BoundsError,
    ConcentrationReport, GeneratorSpec, Growth, GrowthFn, GrowthFunctions, m_for_margin,
};
use crate::environments::{BlockLayout, EndMarker, EnvError, EnvSpec};
use crate::evop::{evop_predict, EvopConfig, EvopError, EvopState, DEFAULT_EPSILON};
use crate::forecasters::{ForecasterPool, ForecasterSpec, PoolError};
use crate::loss::LossSpec;
use crate::metrics::{average_regret, block_report, convergence_step, regret, BlockRow, MetricsError, RunLedger};
use crate::model::{ObservationLog, Prediction, Subsequence};

pub const RNG_ID: &str = "ChaCha8Rng(seed_from_u64(master), stream = run index), first u64";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Evop(#[from] EvopError),
    #[error(transparent)]
    Bounds(#[from] BoundsError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn config_err(msg: impl Into<String>) -> HarnessError {
    HarnessError::Config(msg.into())
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    PsharpRegretSwing,
    Impossibility,
    EvopConvergence,
    Concentration,
    BoundVsEmpirical,
    Custom,
}

impl Scenario {
    fn simulates(self) -> bool {
        !matches!(self, Scenario::Concentration)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvopSettings {
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

impl Default for EvopSettings {
    fn default() -> Self {
        EvopSettings {
            epsilon: DEFAULT_EPSILON,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedSettings {
    #[serde(default = "one_seed")]
    pub count: usize,
    #[serde(default)]
    pub master_seed: u64,
}

fn one_seed() -> usize {
    1
}

impl Default for SeedSettings {
    fn default() -> Self {
        SeedSettings {
            count: 1,
            master_seed: 0,
        }
    }
}

/// Thresholds and roles used by scenario assertions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checks {
    /// Name of the optimal forecaster.
    #[serde(default)]
    pub target: Option<String>,
    /// Comparison class for the swing check; defaults to every other member.
    #[serde(default)]
    pub competitors: Option<Vec<String>>,
    #[serde(default = "default_swing")]
    pub swing_ratio: f64,
    #[serde(default = "default_regret")]
    pub regret_threshold: f64,
    /// First block end that enters swing and regret checks.
    #[serde(default = "default_from_block")]
    pub from_block: u64,
    #[serde(default = "default_success")]
    pub success_fraction: f64,
    #[serde(default = "default_tol")]
    pub tolerance: f64,
}

fn default_swing() -> f64 {
    0.14
}
fn default_regret() -> f64 {
    0.1
}
fn default_from_block() -> u64 {
    2
}
fn default_success() -> f64 {
    0.95
}
fn default_tol() -> f64 {
    1e-9
}

impl Default for Checks {
    fn default() -> Self {
        Checks {
            target: None,
            competitors: None,
            swing_ratio: default_swing(),
            regret_threshold: default_regret(),
            from_block: default_from_block(),
            success_fraction: default_success(),
            tolerance: default_tol(),
        }
    }
}

/// Inputs of the convergence-time bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundSection {
    #[serde(default = "two")]
    pub rho: f64,
    #[serde(default = "two")]
    pub kappa: f64,
    /// Defaults to the EvOp epsilon.
    #[serde(default)]
    pub epsilon: Option<f64>,
    #[serde(default)]
    pub m: Option<u64>,
    /// Disagreement margin; picks the smallest `m` with `1/m < delta`.
    #[serde(default)]
    pub delta: Option<f64>,
    /// Defaults to the target's pool index.
    #[serde(default)]
    pub z: Option<u64>,
    /// Defaults to the pool size.
    #[serde(default)]
    pub pool_size: Option<u64>,
    #[serde(default)]
    pub h: Option<GrowthFn>,
    #[serde(default)]
    pub g: Option<GrowthFn>,
    /// Target failure probability for the step bound.
    #[serde(default)]
    pub p: Option<f64>,
    /// Horizon for the probability bound.
    #[serde(default)]
    pub horizon: Option<u64>,
    #[serde(default = "default_cap")]
    pub cap: u64,
}

fn two() -> f64 {
    2.0
}
fn default_cap() -> u64 {
    1_000_000_000_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorCase {
    pub generator: GeneratorSpec,
    #[serde(default = "yes")]
    pub expect_pass: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConcentrationSection {
    pub generators: Vec<GeneratorCase>,
    #[serde(default = "default_increments")]
    pub increments: usize,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_lambdas")]
    pub lambdas: Vec<f64>,
}

fn default_increments() -> usize {
    100
}
fn default_trials() -> usize {
    100_000
}
fn default_lambdas() -> Vec<f64> {
    vec![1.0, 2.0, 5.0, 10.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    #[serde(default)]
    pub environment: Option<EnvSpec>,
    #[serde(default)]
    pub pool: Vec<ForecasterSpec>,
    #[serde(default)]
    pub evop: EvopSettings,
    #[serde(default)]
    pub horizon: Option<u64>,
    #[serde(default)]
    pub seeds: SeedSettings,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub per_step: bool,
    #[serde(default)]
    pub checks: Checks,
    #[serde(default)]
    pub bound: Option<BoundSection>,
    #[serde(default)]
    pub concentration: Option<ConcentrationSection>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        serde_json::from_str(text).map_err(|e| config_err(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Checks the invariants a scenario relies on.
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.seeds.count == 0 {
            return Err(config_err("seed count must be at least 1"));
        }
        if !(self.evop.epsilon > 0.0 && self.evop.epsilon < 1.0) {
            return Err(config_err(format!("epsilon {} outside (0, 1)", self.evop.epsilon)));
        }
        if self.scenario.simulates() {
            match self.horizon {
                None => return Err(config_err("horizon is required")),
                Some(0) => return Err(config_err("horizon must be at least 1")),
                _ => {}
            }
            if self.environment.is_none() {
                return Err(config_err("environment is required"));
            }
            if self.pool.is_empty() {
                return Err(config_err("pool is required"));
            }
            let pool = ForecasterPool::from_specs(&self.pool)?;
            for name in self.checks.target.iter().chain(self.checks.competitors.iter().flatten()) {
                if pool.index_of(name).is_none() {
                    return Err(config_err(format!("unknown forecaster {name:?} in checks")));
                }
            }
        }
        let needs_target = matches!(
            self.scenario,
            Scenario::PsharpRegretSwing | Scenario::EvopConvergence | Scenario::BoundVsEmpirical
        );
        if needs_target && self.checks.target.is_none() {
            return Err(config_err("checks.target is required for this scenario"));
        }
        let needs_blocks = matches!(self.scenario, Scenario::PsharpRegretSwing | Scenario::Impossibility);
        if needs_blocks && !self.environment.as_ref().is_some_and(|e| e.is_block_structured()) {
            return Err(config_err("scenario needs a block-structured environment"));
        }
        match self.scenario {
            Scenario::Concentration if self.concentration.is_none() => {
                return Err(config_err("concentration section is required"))
            }
            Scenario::BoundVsEmpirical => {
                let section = self.bound.as_ref().ok_or_else(|| config_err("bound section is required"))?;
                if section.cap < self.horizon.unwrap_or(0) {
                    return Err(config_err("bound cap must be at least the horizon"));
                }
                self.bound_inputs()?;
            }
            _ => {}
        }
        Ok(())
    }

    /// Bound parameters and growth functions, filling defaults from the pool
    /// and checks.
    pub fn bound_inputs(&self) -> Result<(BoundParams, GrowthFunctions), HarnessError> {
        let s = self.bound.as_ref().ok_or_else(|| config_err("bound section is required"))?;
        let h = s.h.clone().ok_or_else(|| config_err("bound.h is required"))?;
        let g = s.g.clone().ok_or_else(|| config_err("bound.g is required"))?;
        let m = match (s.m, s.delta) {
            (Some(m), None) => m,
            (None, Some(d)) if d > 0.0 => m_for_margin(d),
            (None, Some(d)) => return Err(config_err(format!("delta {d} must be positive"))),
            (None, None) => return Err(config_err("bound needs m or delta")),
            (Some(_), Some(_)) => return Err(config_err("give bound.m or bound.delta, not both")),
        };
        let pool = if self.pool.is_empty() {
            None
        } else {
            Some(ForecasterPool::from_specs(&self.pool)?)
        };
        let z = match (s.z, &pool, &self.checks.target) {
            (Some(z), _, _) => z,
            (None, Some(pool), Some(t)) => pool.index_of(t).ok_or_else(|| config_err(format!("unknown target {t:?}")))? as u64,
            _ => return Err(config_err("bound needs z or a pool with checks.target")),
        };
        let pool_size = match (s.pool_size, &pool) {
            (Some(p), _) => p,
            (None, Some(pool)) => pool.len() as u64,
            (None, None) => return Err(config_err("bound needs pool_size or a pool")),
        };
        let params = BoundParams::new(s.rho, s.kappa, s.epsilon.unwrap_or(self.evop.epsilon), m, z, pool_size)?;
        Ok((params, GrowthFunctions { h, g }))
    }
}

/// Seed of run `index` under `master`.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(index);
    rng.next_u64()
}

// ---------------------------------------------------------------------------
// Single runs
// ---------------------------------------------------------------------------

/// Everything recorded during one seeded run.
pub struct RunOutcome {
    pub index: usize,
    pub seed: u64,
    /// Pool members first, EvOp last.
    pub ledger: RunLedger,
    pub choices: Vec<usize>,
    pub layout: Option<BlockLayout>,
    pub end: Option<EndMarker>,
    pub pool_names: Vec<String>,
}

impl RunOutcome {
    pub fn steps(&self) -> u64 {
        self.ledger.len()
    }

    pub fn evop_series(&self) -> usize {
        self.pool_names.len()
    }
}

pub fn build_evop(config: &ExperimentConfig) -> Result<EvopConfig, HarnessError> {
    let pool = ForecasterPool::from_specs(&config.pool)?;
    Ok(EvopConfig::new(config.evop.epsilon, LossSpec::squared_error(), pool)?)
}

/// Runs seed `index` to the horizon or until the environment stops.
pub fn simulate(config: &ExperimentConfig, index: usize) -> Result<RunOutcome, HarnessError> {
    let horizon = config.horizon.ok_or_else(|| config_err("horizon is required"))?;
    let env_spec = config.environment.as_ref().ok_or_else(|| config_err("environment is required"))?;
    let seed = derive_seed(config.seeds.master_seed, index as u64);
    let mut env = env_spec.build(seed)?;
    let mut state = EvopState::new(build_evop(config)?);
    let pool_names = state.config().pool.names().to_vec();
    let mut names = pool_names.clone();
    names.push("evop".into());
    let mut ledger = RunLedger::new(names);
    let mut choices = Vec::new();
    let mut row: Vec<Option<Prediction>> = Vec::with_capacity(pool_names.len() + 1);
    for n in 1..=horizon {
        let Some(step) = env.step() else { break };
        let decision = state.observe(step.observation)?;
        row.clear();
        row.extend_from_slice(state.predictions_at(n));
        row.push(Some(decision.prediction));
        ledger.record(step.outcome, &row, &state.config().loss);
        choices.push(decision.choice);
    }
    Ok(RunOutcome {
        index,
        seed,
        ledger,
        choices,
        layout: env.block_layout(),
        end: env.end_marker(),
        pool_names,
    })
}

/// First step where the naive and incremental predictors differ, if any.
/// Decisions are compared bit for bit, including every `MaxScore`.
pub fn compare_implementations(config: &ExperimentConfig, index: usize) -> Result<Option<u64>, HarnessError> {
    let horizon = config.horizon.ok_or_else(|| config_err("horizon is required"))?;
    let env_spec = config.environment.as_ref().ok_or_else(|| config_err("environment is required"))?;
    let seed = derive_seed(config.seeds.master_seed, index as u64);
    let mut env = env_spec.build(seed)?;
    let mut state = EvopState::new(build_evop(config)?);
    let naive_config = build_evop(config)?;
    let mut log = ObservationLog::new();
    for n in 1..=horizon {
        let Some(step) = env.step() else { break };
        log.append(step.observation.clone()).map_err(EvopError::from)?;
        let fast = state.observe(step.observation)?;
        let slow = evop_predict(&naive_config, &log)?;
        if !same_decision(&fast, &slow) {
            return Ok(Some(n));
        }
    }
    Ok(None)
}

fn same_decision(a: &crate::evop::Decision, b: &crate::evop::Decision) -> bool {
    let bits = |p: &Prediction| p.coords().iter().map(|c| c.to_bits()).collect::<Vec<_>>();
    a.choice == b.choice
        && bits(&a.prediction) == bits(&b.prediction)
        && a.max_scores.len() == b.max_scores.len()
        && a.max_scores.iter().zip(&b.max_scores).all(|(x, y)| {
            x.value.to_bits() == y.value.to_bits() && x.j == y.j && x.m == y.m
        })
}

// ---------------------------------------------------------------------------
// Per-run analysis
// ---------------------------------------------------------------------------

/// Per-run quantities that feed the summary.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedSummary {
    pub index: usize,
    pub seed: u64,
    pub steps: u64,
    pub end: String,
    /// First step from which EvOp matches the target.
    pub convergence_step: Option<u64>,
    /// Whether EvOp matches the target throughout the final window.
    pub final_window_match: Option<bool>,
    /// Smallest `regret(target) / S_k` over checked block ends.
    pub min_swing_ratio: Option<f64>,
    /// Largest average EvOp regret over checked block ends.
    pub max_avg_regret: Option<f64>,
}

fn pool_index(run: &RunOutcome, name: &str) -> Result<usize, HarnessError> {
    run.pool_names
        .iter()
        .position(|n| n == name)
        .ok_or_else(|| config_err(format!("unknown forecaster {name:?}")))
}

/// Complete block ends at or after `from_block`.
fn checked_block_ends(run: &RunOutcome, from_block: u64) -> Vec<u64> {
    let Some(layout) = run.layout else { return Vec::new() };
    let mut ends = Vec::new();
    let mut k = from_block.max(1);
    while let Some(end) = layout.end(k) {
        if end > run.steps() {
            break;
        }
        ends.push(end);
        k += 1;
    }
    ends
}

/// First step of the window checked for convergence: the start of the block
/// holding the last step, or the second half of the run without blocks.
pub fn final_window_start(run: &RunOutcome) -> u64 {
    let last = run.steps();
    match run.layout {
        Some(layout) => {
            let k = layout.block_of(last);
            if k == 1 {
                1
            } else {
                layout.end(k - 1).expect("earlier block fits") + 1
            }
        }
        None => last / 2 + 1,
    }
}

pub fn summarize(run: &RunOutcome, checks: &Checks) -> Result<SeedSummary, HarnessError> {
    let evop = run.evop_series();
    let pool: Vec<usize> = (0..run.pool_names.len()).collect();
    let target = checks.target.as_deref().map(|t| pool_index(run, t)).transpose()?;

    let (convergence, window) = match target {
        Some(z) if run.steps() > 0 => {
            let evop_preds = run.ledger.predictions(evop);
            let target_preds = run.ledger.predictions(z);
            let step = convergence_step(evop_preds, target_preds, checks.tolerance);
            let start = final_window_start(run);
            let window = ((start - 1) as usize..run.steps() as usize).all(|i| match (&evop_preds[i], &target_preds[i]) {
                (Some(a), Some(b)) => a.distance(b) <= checks.tolerance,
                _ => false,
            });
            (step, Some(window))
        }
        _ => (None, None),
    };

    let ends = checked_block_ends(run, checks.from_block);
    let swing = match target {
        Some(z) if !ends.is_empty() => {
            let competitors: Vec<usize> = match &checks.competitors {
                Some(names) => names.iter().map(|n| pool_index(run, n)).collect::<Result<_, _>>()?,
                None => pool.iter().copied().filter(|&c| c != z).collect(),
            };
            let mut worst = f64::INFINITY;
            for &end in &ends {
                let r = regret(&run.ledger, z, &competitors, &Subsequence::contiguous(end), end as usize)?;
                worst = worst.min(r / end as f64);
            }
            Some(worst)
        }
        _ => None,
    };
    let max_avg = if ends.is_empty() {
        None
    } else {
        let mut best = f64::NEG_INFINITY;
        for &end in &ends {
            let r = average_regret(&run.ledger, evop, &pool, &Subsequence::contiguous(end), end as usize)?;
            best = best.max(r);
        }
        Some(best)
    };

    Ok(SeedSummary {
        index: run.index,
        seed: run.seed,
        steps: run.steps(),
        end: end_label(run.end),
        convergence_step: convergence,
        final_window_match: window,
        min_swing_ratio: swing,
        max_avg_regret: max_avg,
    })
}

fn end_label(end: Option<EndMarker>) -> String {
    match end {
        None => "horizon".into(),
        Some(EndMarker::EndOfSequence { steps }) => format!("end-of-sequence@{steps}"),
        Some(EndMarker::HorizonTruncated { horizon, block }) => format!("truncated@{horizon}/block{block}"),
    }
}

// ---------------------------------------------------------------------------
// CSV output
// ---------------------------------------------------------------------------

fn fmt_f64(out: &mut String, x: f64) {
    write!(out, "{x:.16e}").expect("string write");
}

fn fmt_pred(out: &mut String, p: Option<&Prediction>) {
    if let Some(p) = p {
        for (i, c) in p.coords().iter().enumerate() {
            if i > 0 {
                out.push(';');
            }
            fmt_f64(out, *c);
        }
    }
}

fn pred_bits(p: &Option<Prediction>) -> Option<Vec<u64>> {
    p.as_ref().map(|p| p.coords().iter().map(|c| c.to_bits()).collect())
}

pub fn run_csv_header(names: &[String]) -> String {
    let mut h = String::from("n");
    for n in names {
        write!(h, ",pred_{n}").expect("string write");
    }
    for n in names {
        write!(h, ",loss_{n}").expect("string write");
    }
    h.push_str(",evop_choice,evop_pred");
    h
}

/// Whether step `n` differs from step `n - 1` in the outcome, the choice or
/// any prediction.
fn step_changes(run: &RunOutcome, n: u64) -> bool {
    let idx = (n - 1) as usize;
    run.choices[idx] != run.choices[idx - 1]
        || run.ledger.truth(n) != run.ledger.truth(n - 1)
        || (0..=run.evop_series()).any(|s| {
            let preds = run.ledger.predictions(s);
            pred_bits(&preds[idx]) != pred_bits(&preds[idx - 1])
        })
}

/// Writes the per-run CSV and returns the number of data rows. Unless
/// `per_step`, a step is written only when it is the first or last step, a
/// block end, or differs from a neighbouring step, so every skipped step
/// repeats its predecessor's predictions, outcome and per-step losses.
pub fn write_run_csv(run: &RunOutcome, path: &Path, per_step: bool) -> Result<u64, HarnessError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let p = run.pool_names.len();
    let evop = run.evop_series();
    writeln!(w, "{}", run_csv_header(&run.pool_names)).map_err(io_err(path))?;
    let last = run.steps();
    let mut rows = 0;
    let mut line = String::new();
    for n in 1..=last {
        let idx = (n - 1) as usize;
        let emit = per_step
            || n == 1
            || n == last
            || run.layout.is_some_and(|l| l.end(l.block_of(n)) == Some(n))
            || step_changes(run, n)
            || step_changes(run, n + 1);
        if !emit {
            continue;
        }
        line.clear();
        write!(line, "{n}").expect("string write");
        for s in 0..p {
            line.push(',');
            fmt_pred(&mut line, run.ledger.prediction(s, n));
        }
        for s in 0..p {
            line.push(',');
            fmt_f64(&mut line, run.ledger.cumulative_loss(s, n));
        }
        write!(line, ",{},", run.choices[idx]).expect("string write");
        fmt_pred(&mut line, run.ledger.prediction(evop, n));
        writeln!(w, "{line}").map_err(io_err(path))?;
        rows += 1;
    }
    w.flush().map_err(io_err(path))?;
    Ok(rows)
}

pub fn write_blocks_csv(run: &RunOutcome, rows: &[BlockRow], path: &Path) -> Result<(), HarnessError> {
    let mut names = run.pool_names.clone();
    names.push("evop".into());
    let mut out = String::from("block,start,end,complete,coin");
    for n in &names {
        write!(out, ",block_loss_{n}").expect("string write");
    }
    for n in &names {
        write!(out, ",regret_{n}").expect("string write");
    }
    out.push('\n');
    for r in rows {
        write!(out, "{},{},{},{},{}", r.block, r.start, r.end, r.complete, r.coin).expect("string write");
        for l in &r.block_loss {
            out.push(',');
            fmt_f64(&mut out, *l);
        }
        for g in &r.regret {
            out.push(',');
            if let Some(g) = g {
                fmt_f64(&mut out, *g);
            }
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(io_err(path))
}

fn opt_f64(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.16e}")).unwrap_or_default()
}

fn opt_u64(x: Option<u64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

pub const SUMMARY_HEADER: &str =
    "run,seed,steps,end,convergence_step,final_window_match,min_swing_ratio,max_avg_regret";

/// `n_emp` is empty for runs that never converged; `n_theory` is an integer or
/// `Overflow(cap)`.
pub const BOUND_COMPARE_HEADER: &str = "run,seed,n_emp,p,t,n_theory";

fn summary_line(s: &SeedSummary) -> String {
    format!(
        "{},{},{},{},{},{},{},{}",
        s.index,
        s.seed,
        s.steps,
        s.end,
        opt_u64(s.convergence_step),
        s.final_window_match.map(|b| b.to_string()).unwrap_or_default(),
        opt_f64(s.min_swing_ratio),
        opt_f64(s.max_avg_regret),
    )
}

// ---------------------------------------------------------------------------
// Scenario driver
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Assertion {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl Assertion {
    fn new(name: &str, pass: bool, detail: String) -> Self {
        Assertion {
            name: name.into(),
            pass,
            detail,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Report {
    pub lines: Vec<String>,
    pub assertions: Vec<Assertion>,
    pub summaries: Vec<SeedSummary>,
    pub concentration: Vec<ConcentrationReport>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.assertions.iter().all(|a| a.pass)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for l in &self.lines {
            out.push_str(l);
            out.push('\n');
        }
        for a in &self.assertions {
            writeln!(out, "{} {}: {}", if a.pass { "PASS" } else { "FAIL" }, a.name, a.detail).expect("string write");
        }
        out
    }
}

/// Output options shared by every subcommand.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
}

fn ensure_dir(dir: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

/// Executes every seed, writes all files and evaluates the scenario's
/// assertions.
pub fn run(config: &ExperimentConfig) -> Result<Report, HarnessError> {
    config.validate()?;
    let out_dir = config.output_dir.clone();
    if let Some(dir) = &out_dir {
        ensure_dir(dir)?;
    }
    let mut report = Report::default();
    report.lines.push(format!("scenario: {:?}", config.scenario));

    if config.scenario == Scenario::Concentration {
        let section = config.concentration.as_ref().expect("validated");
        concentration(section, config.seeds.master_seed, out_dir.as_deref(), &mut report)?;
        finish(&report, out_dir.as_deref())?;
        return Ok(report);
    }

    let summaries: Vec<SeedSummary> = (0..config.seeds.count)
        .into_par_iter()
        .map(|i| run_one(config, i, out_dir.as_deref()))
        .collect::<Result<_, _>>()?;

    if let Some(dir) = &out_dir {
        let mut text = String::from(SUMMARY_HEADER);
        text.push('\n');
        for s in &summaries {
            text.push_str(&summary_line(s));
            text.push('\n');
        }
        let path = dir.join("summary.csv");
        fs::write(&path, text).map_err(io_err(&path))?;
    }
    report.lines.push(format!("runs: {}", summaries.len()));
    evaluate(config, &summaries, out_dir.as_deref(), &mut report)?;
    report.summaries = summaries;
    finish(&report, out_dir.as_deref())?;
    Ok(report)
}

fn run_one(config: &ExperimentConfig, i: usize, out_dir: Option<&Path>) -> Result<SeedSummary, HarnessError> {
    let outcome = simulate(config, i)?;
    if let Some(dir) = out_dir {
        write_run_csv(&outcome, &dir.join(format!("run_{i}.csv")), config.per_step)?;
        if let Some(layout) = outcome.layout {
            let pool: Vec<usize> = (0..outcome.pool_names.len()).collect();
            let rows = block_report(&outcome.ledger, layout, &pool);
            write_blocks_csv(&outcome, &rows, &dir.join(format!("blocks_{i}.csv")))?;
        }
        let mut echo = config.clone();
        echo.output_dir = None;
        let meta = serde_json::json!({
            "crate": env!("CARGO_PKG_NAME"),
            "version": env!("CARGO_PKG_VERSION"),
            "rng": RNG_ID,
            "run": i,
            "seed": outcome.seed,
            "steps": outcome.steps(),
            "end": outcome.end,
            "config": echo,
        });
        let path = dir.join(format!("run_{i}.json"));
        fs::write(&path, serde_json::to_string_pretty(&meta).expect("json")).map_err(io_err(&path))?;
    }
    summarize(&outcome, &config.checks)
}

fn finish(report: &Report, out_dir: Option<&Path>) -> Result<(), HarnessError> {
    if let Some(dir) = out_dir {
        let path = dir.join("report.txt");
        fs::write(&path, report.render()).map_err(io_err(&path))?;
    }
    Ok(())
}

fn fraction(count: usize, total: usize) -> f64 {
    count as f64 / total as f64
}

/// Median of a sorted, nonempty list (lower middle for even lengths).
fn median(sorted: &[u64]) -> u64 {
    sorted[(sorted.len() - 1) / 2]
}

fn evaluate(
    config: &ExperimentConfig,
    summaries: &[SeedSummary],
    out_dir: Option<&Path>,
    report: &mut Report,
) -> Result<(), HarnessError> {
    let checks = &config.checks;
    let total = summaries.len();
    let mut converged: Vec<u64> = summaries.iter().filter_map(|s| s.convergence_step).collect();
    converged.sort_unstable();
    if !converged.is_empty() {
        report.lines.push(format!(
            "convergence_step: defined in {}/{} runs, median {}",
            converged.len(),
            total,
            median(&converged)
        ));
    }
    match config.scenario {
        Scenario::PsharpRegretSwing => {
            let ok = summaries
                .iter()
                .filter(|s| s.min_swing_ratio.is_some_and(|r| r >= checks.swing_ratio))
                .count();
            let worst = summaries.iter().filter_map(|s| s.min_swing_ratio).fold(f64::INFINITY, f64::min);
            report.assertions.push(Assertion::new(
                "regret-swing",
                ok == total,
                format!(
                    "regret/S_k >= {} at every block end from block {} in {ok}/{total} runs (worst {worst:.6})",
                    checks.swing_ratio, checks.from_block
                ),
            ));
        }
        Scenario::Impossibility => {
            let ok = summaries
                .iter()
                .filter(|s| s.max_avg_regret.is_some_and(|r| r >= checks.regret_threshold))
                .count();
            report.assertions.push(Assertion::new(
                "impossibility",
                fraction(ok, total) >= checks.success_fraction,
                format!(
                    "max block-end average regret >= {} in {ok}/{total} runs (need {})",
                    checks.regret_threshold, checks.success_fraction
                ),
            ));
        }
        Scenario::EvopConvergence => {
            let ok = summaries.iter().filter(|s| s.final_window_match == Some(true)).count();
            report.assertions.push(Assertion::new(
                "convergence",
                fraction(ok, total) >= checks.success_fraction,
                format!(
                    "EvOp matches {} over the final window in {ok}/{total} runs (need {})",
                    checks.target.as_deref().unwrap_or("?"),
                    checks.success_fraction
                ),
            ));
        }
        Scenario::BoundVsEmpirical => bound_vs_empirical(config, summaries, out_dir, report)?,
        Scenario::Custom | Scenario::Concentration => {}
    }
    Ok(())
}

/// Failure probability matched to the observed success rate: `1 - s`, or
/// `1/(runs + 1)` when every run converged.
pub fn empirical_failure_rate(converged: usize, total: usize) -> Option<f64> {
    if converged == 0 {
        return None;
    }
    if converged == total {
        return Some(1.0 / (total as f64 + 1.0));
    }
    Some(1.0 - fraction(converged, total))
}

fn bound_vs_empirical(
    config: &ExperimentConfig,
    summaries: &[SeedSummary],
    out_dir: Option<&Path>,
    report: &mut Report,
) -> Result<(), HarnessError> {
    let (params, funcs) = config.bound_inputs()?;
    let section = config.bound.as_ref().expect("validated");
    let cap = BigUint::from(section.cap);
    let empirical: Vec<u64> = summaries.iter().filter_map(|s| s.convergence_step).collect();
    let Some(p) = empirical_failure_rate(empirical.len(), summaries.len()) else {
        report.assertions.push(Assertion::new(
            "bound-vs-empirical",
            true,
            "no run converged; nothing to compare".into(),
        ));
        return Ok(());
    };
    let theory = steps_for_probability(&params, &funcs, p, &cap)?;
    let covers = |n: u64| match &theory.steps {
        Growth::Exact(v) => *v >= BigUint::from(n),
        Growth::Overflow(c) => *c >= BigUint::from(n),
    };
    let ok = empirical.iter().filter(|&&n| covers(n)).count();
    let worst = empirical.iter().max().copied().unwrap_or(0);
    report.lines.push(format!("p: {p}"));
    report.lines.push(format!("t: {}", theory.t));
    report.lines.push(format!("N_theory: {}", theory.steps));
    report.lines.push(format!("N_emp max: {worst}"));
    if let Some(dir) = out_dir {
        let mut csv = String::from(BOUND_COMPARE_HEADER);
        csv.push('\n');
        for s in summaries {
            let n_emp = s.convergence_step.map(|n| n.to_string()).unwrap_or_default();
            csv.push_str(&format!("{},{},{n_emp},{p:.16e},{},{}\n", s.index, s.seed, theory.t, theory.steps));
        }
        let path = dir.join("bound_compare.csv");
        fs::write(&path, csv).map_err(io_err(&path))?;
    }
    report.assertions.push(Assertion::new(
        "bound-vs-empirical",
        ok == empirical.len(),
        format!("N_theory = {} >= N_emp in {ok}/{} runs", theory.steps, empirical.len()),
    ));
    Ok(())
}

fn concentration(
    section: &ConcentrationSection,
    master_seed: u64,
    out_dir: Option<&Path>,
    report: &mut Report,
) -> Result<(), HarnessError> {
    let mut csv = String::from("generator,lambda,empirical,bound,std_error,pass\n");
    for (idx, case) in section.generators.iter().enumerate() {
        let r = verify_concentration(
            &case.generator,
            section.increments,
            section.trials,
            &section.lambdas,
            derive_seed(master_seed, idx as u64),
        )?;
        let label = serde_json::to_string(&case.generator).expect("json");
        for t in &r.tails {
            writeln!(
                csv,
                "\"{}\",{:.16e},{:.16e},{:.16e},{:.16e},{}",
                label.replace('"', "\"\""),
                t.lambda,
                t.empirical,
                t.bound,
                t.std_error,
                t.pass
            )
            .expect("string write");
            report.lines.push(format!(
                "{label} lambda={} empirical={:.6} bound={:.6} se={:.2e} {}",
                t.lambda,
                t.empirical,
                t.bound,
                t.std_error,
                if t.pass { "ok" } else { "exceeds" }
            ));
        }
        report.assertions.push(Assertion::new(
            &format!("concentration[{idx}]"),
            r.passed() == case.expect_pass,
            format!(
                "{label}: bound {} (expected {}), mean r = {:.3e}",
                if r.passed() { "holds" } else { "fails" },
                if case.expect_pass { "holds" } else { "fails" },
                r.mean_r
            ),
        ));
        report.concentration.push(r);
    }
    if let Some(dir) = out_dir {
        let path = dir.join("concentration.csv");
        fs::write(&path, csv).map_err(io_err(&path))?;
    }
    Ok(())
}

/// The `verify` subcommand: the concentration section of any config.
pub fn verify(config: &ExperimentConfig) -> Result<Report, HarnessError> {
    let section = config
        .concentration
        .as_ref()
        .ok_or_else(|| config_err("concentration section is required"))?;
    if let Some(dir) = &config.output_dir {
        ensure_dir(dir)?;
    }
    let mut report = Report::default();
    concentration(section, config.seeds.master_seed, config.output_dir.as_deref(), &mut report)?;
    finish(&report, config.output_dir.as_deref())?;
    Ok(report)
}

/// The `bound` subcommand: derived constants, the step bound for `p` and the
/// probability bound at `horizon`, whichever are configured.
pub fn bound(config: &ExperimentConfig) -> Result<Report, HarnessError> {
    let (params, funcs) = config.bound_inputs()?;
    let section = config.bound.as_ref().expect("checked by bound_inputs");
    let mut report = Report::default();
    report.lines.push(format!(
        "rho={} kappa={} epsilon={} m={} z={} pool_size={}",
        params.rho, params.kappa, params.epsilon, params.m, params.z, params.pool_size
    ));
    report.lines.push(format!("b={} alpha={} c={}", params.b(), params.alpha(), params.c()));
    if section.p.is_none() && section.horizon.is_none() {
        return Err(config_err("bound needs p or horizon"));
    }
    if let Some(p) = section.p {
        let r = steps_for_probability(&params, &funcs, p, &BigUint::from(section.cap))?;
        report.lines.push(format!("p={p} t={} N={}", r.t, r.steps));
    }
    if let Some(h) = section.horizon {
        let r = convergence_probability(&params, &funcs, &BigUint::from(h))?;
        report.lines.push(format!("T={h} t={} probability={}", r.t, r.probability));
    }
    if let Some(dir) = &config.output_dir {
        ensure_dir(dir)?;
    }
    finish(&report, config.output_dir.as_deref())?;
    Ok(report)
}

/// The `compare` subcommand: naive against incremental EvOp on every seed.
pub fn compare(config: &ExperimentConfig) -> Result<Report, HarnessError> {
    config.validate()?;
    let mismatches: Vec<Option<u64>> = (0..config.seeds.count)
        .into_par_iter()
        .map(|i| compare_implementations(config, i))
        .collect::<Result<_, _>>()?;
    let mut report = Report::default();
    for (i, m) in mismatches.iter().enumerate() {
        if let Some(n) = m {
            report.lines.push(format!("run {i}: first mismatch at step {n}"));
        }
    }
    let bad = mismatches.iter().filter(|m| m.is_some()).count();
    report.assertions.push(Assertion::new(
        "naive-equals-incremental",
        bad == 0,
        format!("{}/{} runs identical", mismatches.len() - bad, mismatches.len()),
    ));
    if let Some(dir) = &config.output_dir {
        ensure_dir(dir)?;
    }
    finish(&report, config.output_dir.as_deref())?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn psharp_config(horizon: u64) -> ExperimentConfig {
        ExperimentConfig::from_json(&format!(
            r#"{{
                "scenario": "custom",
                "environment": {{"kind": "psharp", "base": 10}},
                "pool": [
                    {{"kind": "constant", "p": 0.5, "name": "fstar"}},
                    {{"kind": "constant", "p": 1.0, "name": "f1"}},
                    {{"kind": "constant", "p": 0.0, "name": "f0"}}
                ],
                "horizon": {horizon},
                "checks": {{"target": "fstar"}}
            }}"#
        ))
        .unwrap()
    }

    #[test]
    fn seeds_are_counter_based() {
        let a: Vec<u64> = (0..5).map(|i| derive_seed(7, i)).collect();
        let b: Vec<u64> = (0..10).map(|i| derive_seed(7, i)).collect();
        assert_eq!(a[..], b[..5]);
        assert_ne!(derive_seed(7, 0), derive_seed(8, 0));
        let unique: std::collections::HashSet<_> = b.iter().collect();
        assert_eq!(unique.len(), 10);
    }

    #[test]
    fn config_rejects_bad_input() {
        let mut c = psharp_config(10);
        c.horizon = Some(0);
        assert!(matches!(c.validate(), Err(HarnessError::Config(_))));
        let mut c = psharp_config(10);
        c.seeds.count = 0;
        assert!(c.validate().is_err());
        assert!(ExperimentConfig::from_json(r#"{"scenario": "custom", "bogus": 1}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"scenario": "nope"}"#).is_err());
        let mut c = psharp_config(10);
        c.checks.target = Some("missing".into());
        assert!(c.validate().is_err());
    }

    #[test]
    fn header_layout() {
        let names = vec!["a".to_string(), "b".to_string()];
        assert_eq!(run_csv_header(&names), "n,pred_a,pred_b,loss_a,loss_b,evop_choice,evop_pred");
    }

    #[test]
    fn float_format_round_trips() {
        for x in [0.1, 1.0 / 3.0, 2777.75, 1e-300, 0.0] {
            let mut s = String::new();
            fmt_f64(&mut s, x);
            assert_eq!(s.parse::<f64>().unwrap().to_bits(), x.to_bits(), "{s}");
        }
    }

    #[test]
    fn short_psharp_run() {
        let run = simulate(&psharp_config(111), 0).unwrap();
        assert_eq!(run.steps(), 111);
        assert_eq!(run.ledger.cumulative_loss(0, 111), 0.25 * 111.0);
        let s = summarize(&run, &run_checks()).unwrap();
        assert_eq!(s.final_window_match, Some(true));
        assert_eq!(final_window_start(&run), 12);
    }

    fn run_checks() -> Checks {
        Checks {
            target: Some("fstar".into()),
            ..Checks::default()
        }
    }

    #[test]
    fn compact_rows_keep_changes_and_block_ends() {
        let run = simulate(&psharp_config(111), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.csv");
        let compact = write_run_csv(&run, &path, false).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let ns: Vec<u64> = text.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
        for end in [1, 11, 111] {
            assert!(ns.contains(&end));
        }
        assert_eq!(compact as usize, ns.len());
        let full = write_run_csv(&run, &path, true).unwrap();
        assert_eq!(full, 111);
    }

    #[test]
    fn empirical_failure_rates() {
        assert_eq!(empirical_failure_rate(0, 10), None);
        assert_eq!(empirical_failure_rate(10, 10), Some(1.0 / 11.0));
        assert!((empirical_failure_rate(9, 10).unwrap() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn bound_needs_growth_functions() {
        let mut c = psharp_config(10);
        c.bound = Some(BoundSection {
            rho: 2.0,
            kappa: 2.0,
            epsilon: None,
            m: Some(3),
            delta: None,
            z: None,
            pool_size: None,
            h: None,
            g: Some(GrowthFn::PsharpReveal { base: 10 }),
            p: Some(0.5),
            horizon: None,
            cap: default_cap(),
        });
        assert!(matches!(bound(&c), Err(HarnessError::Config(_))));
        c.bound.as_mut().unwrap().h = Some(GrowthFn::Affine { mul: 1, add: 1 });
        let r = bound(&c).unwrap();
        assert!(r.render().contains("N=Overflow(1000000000000)"), "{}", r.render());
    }
}
