//! The eventually-optimal predictor.
//!
//! Forecasters are compared pairwise on greedily built independent
//! subsequences of steps where they disagree by more than `1/m`. A pair
//! `(i, j, m)` is scored by the loss difference of `f_i` and `f_j` on that
//! subsequence, minus a bias `ρε/(2m²)` per element in favour of `f_i`. Each
//! forecaster's worst score `max_{j,m} i - j - m + RelScore(i, j, m)` is its
//! `MaxScore`, and the prediction of the defined forecaster with the smallest
//! `MaxScore` is returned.
//!
//! Two implementations are provided. The free functions ([`test_seq`],
//! [`rel_score`], [`max_score`], [`evop_predict`]) recompute everything from
//! the log. [`EvopState`] updates every pair once per observation and must
//! agree with them bit for bit.
//!
//! Search bounds: `RelScore(i, j, m)` never exceeds `L_max` times the number of
//! revealed outcomes, since every element scores a distinct revealed index.
//! Any `(j, m)` with `j + m` above that bound plus one is strictly worse than
//! the `(1, 0)` baseline `i - 1`, so the max only visits finitely many pairs.
//! The min only visits `i <= MaxScore(k) + 1`, `k` the first defined index.

use thiserror::Error;

use crate::forecasters::ForecasterPool;
use crate::loss::LossSpec;
use crate::model::{LogView, ModelError, Observation, ObservationLog, Prediction};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvopError {
    #[error("epsilon must lie in (0, 1), got {0}")]
    InvalidEpsilon(f64),
    #[error("no pool member is defined at step {0}")]
    NoDefinedForecaster(u64),
    #[error("forecaster index {0} outside the pool")]
    BadIndex(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub const DEFAULT_EPSILON: f64 = 0.5;

pub struct EvopConfig {
    epsilon: f64,
    pub loss: LossSpec,
    pub pool: ForecasterPool,
}

impl std::fmt::Debug for EvopConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EvopConfig")
            .field("epsilon", &self.epsilon)
            .field("loss", &self.loss)
            .field("pool", &self.pool)
            .finish()
    }
}

impl EvopConfig {
    pub fn new(epsilon: f64, loss: LossSpec, pool: ForecasterPool) -> Result<Self, EvopError> {
        if !(epsilon > 0.0 && epsilon < 1.0) {
            return Err(EvopError::InvalidEpsilon(epsilon));
        }
        Ok(EvopConfig { epsilon, loss, pool })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Per-element bias `ρε/(2m²)`; zero for `m = 0`, which never scores.
    pub fn penalty(&self, m: u64) -> f64 {
        if m == 0 {
            return 0.0;
        }
        self.loss.rho * self.epsilon / (2.0 * (m * m) as f64)
    }

    /// Upper bound on any `RelScore` given the number of revealed outcomes.
    fn score_bound(&self, revealed: u64) -> f64 {
        self.loss.max_loss * revealed as f64
    }

    fn check_index(&self, i: usize) -> Result<(), EvopError> {
        if i == 0 || i > self.pool.len() {
            return Err(EvopError::BadIndex(i));
        }
        Ok(())
    }
}

/// `‖y_i - y_j‖ > 1/m`, with `1/0 = ∞`.
#[inline]
fn disagrees(d: f64, m: u64) -> bool {
    m != 0 && d > 1.0 / m as f64
}

#[inline]
fn candidate_value(i: usize, j: usize, m: u64, score: f64) -> f64 {
    (i as f64 - j as f64 - m as f64) + score
}

/// One completed element: disagreement at step `t`, feedback on `x_t` first
/// available in `ō_k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Element {
    pub t: u64,
    pub k: u64,
}

/// Output of the greedy subsequence builder.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TestSeq {
    pub elements: Vec<Element>,
    /// A disagreement still waiting for feedback.
    pub pending: Option<u64>,
}

impl TestSeq {
    pub fn indices(&self) -> Vec<u64> {
        self.elements.iter().map(|e| e.t).collect()
    }
}

/// Predictions of every pool member on every prefix `ō_1 … ō_n`.
struct PredictionTable {
    rows: Vec<Vec<Option<Prediction>>>,
}

impl PredictionTable {
    fn compute(pool: &ForecasterPool, log: &LogView<'_>) -> Self {
        let full = log.log();
        let rows = (1..=log.len())
            .map(|k| pool.predict_all(&full.prefix(k)))
            .collect();
        PredictionTable { rows }
    }

    fn get(&self, k: u64, i: usize) -> Option<&Prediction> {
        self.rows[(k - 1) as usize][i - 1].as_ref()
    }
}

/// Literal transcription of the pseudocode over steps `1..=n`.
fn scan(table: &PredictionTable, log: &LogView<'_>, i: usize, j: usize, m: u64) -> TestSeq {
    let mut out = TestSeq::default();
    for k in 1..=log.len() {
        if let Some(t) = out.pending {
            if log.reveal_time(t).is_some_and(|r| r <= k) {
                out.elements.push(Element { t, k });
                out.pending = None;
                continue;
            }
        }
        if out.pending.is_none() {
            if let (Some(yi), Some(yj)) = (table.get(k, i), table.get(k, j)) {
                if disagrees(yi.distance(yj), m) {
                    out.pending = Some(k);
                }
            }
        }
    }
    out
}

fn score_elements(
    config: &EvopConfig,
    table: &PredictionTable,
    log: &LogView<'_>,
    seq: &TestSeq,
    i: usize,
    j: usize,
    m: u64,
) -> f64 {
    let penalty = config.penalty(m);
    seq.elements.iter().fold(0.0, |acc, e| {
        let x = log.lookup(e.t).expect("completed elements are revealed");
        let yi = table.get(e.t, i).expect("defined at disagreement");
        let yj = table.get(e.t, j).expect("defined at disagreement");
        acc + (config.loss.eval(x, yi) - config.loss.eval(x, yj) - penalty)
    })
}

/// Result of a max over `(j, m)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaxScore {
    pub value: f64,
    pub j: usize,
    pub m: u64,
}

fn max_score_from<F: FnMut(usize, u64) -> f64>(
    i: usize,
    pool_size: usize,
    bound: f64,
    mut rel_score: F,
) -> MaxScore {
    let mut best = MaxScore {
        value: f64::NEG_INFINITY,
        j: 0,
        m: 0,
    };
    for j in 1..=pool_size {
        let mut m = 0u64;
        while (j as u64 + m) as f64 <= bound + 1.0 {
            let score = if m == 0 || i == j { 0.0 } else { rel_score(j, m) };
            let value = candidate_value(i, j, m, score);
            if value > best.value {
                best = MaxScore { value, j, m };
            }
            m += 1;
        }
    }
    best
}

/// The prediction EvOp makes on a log, and why.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    /// 1-based index of the followed forecaster.
    pub choice: usize,
    pub prediction: Prediction,
    /// `MaxScore(i)` for every pool member, defined or not.
    pub max_scores: Vec<MaxScore>,
}

fn select(
    preds: &[Option<Prediction>],
    max_scores: Vec<MaxScore>,
    n: u64,
) -> Result<Decision, EvopError> {
    let first = preds
        .iter()
        .position(|p| p.is_some())
        .ok_or(EvopError::NoDefinedForecaster(n))?
        + 1;
    let limit = max_scores[first - 1].value + 1.0;
    let mut choice = first;
    for i in first + 1..=preds.len() {
        if i as f64 > limit {
            break;
        }
        if preds[i - 1].is_some() && max_scores[i - 1].value < max_scores[choice - 1].value {
            choice = i;
        }
    }
    Ok(Decision {
        choice,
        prediction: preds[choice - 1].clone().expect("chosen member is defined"),
        max_scores,
    })
}

/// `TestSeq(i, j, m)` on the whole log.
pub fn test_seq(pool: &ForecasterPool, i: usize, j: usize, m: u64, log: &ObservationLog) -> TestSeq {
    let view = log.view();
    let table = PredictionTable::compute(pool, &view);
    scan(&table, &view, i, j, m)
}

/// `RelScore(i, j, m)`; lower is better for `f_i`.
pub fn rel_score(
    config: &EvopConfig,
    i: usize,
    j: usize,
    m: u64,
    log: &ObservationLog,
) -> Result<f64, EvopError> {
    config.check_index(i)?;
    config.check_index(j)?;
    let view = log.view();
    let table = PredictionTable::compute(&config.pool, &view);
    let seq = scan(&table, &view, i, j, m);
    Ok(score_elements(config, &table, &view, &seq, i, j, m))
}

fn naive_max_score(config: &EvopConfig, table: &PredictionTable, view: &LogView<'_>, i: usize) -> MaxScore {
    let bound = config.score_bound(view.revealed_count());
    max_score_from(i, config.pool.len(), bound, |j, m| {
        let seq = scan(table, view, i, j, m);
        score_elements(config, table, view, &seq, i, j, m)
    })
}

/// `MaxScore(i)` on the whole log.
pub fn max_score(config: &EvopConfig, i: usize, log: &ObservationLog) -> Result<MaxScore, EvopError> {
    config.check_index(i)?;
    let view = log.view();
    let table = PredictionTable::compute(&config.pool, &view);
    Ok(naive_max_score(config, &table, &view, i))
}

/// EvOp's prediction of `x_n` from `ō_n`, recomputed from scratch.
pub fn evop_predict(config: &EvopConfig, log: &ObservationLog) -> Result<Decision, EvopError> {
    let view = log.view();
    let table = PredictionTable::compute(&config.pool, &view);
    let scores = (1..=config.pool.len())
        .map(|i| naive_max_score(config, &table, &view, i))
        .collect();
    let preds = config.pool.predict_all(&view);
    select(&preds, scores, log.len())
}

// ---------------------------------------------------------------------------
// Incremental implementation
// ---------------------------------------------------------------------------

/// Running `TestSeq`/`RelScore` state of one `(i, j, m)` triple.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredPair {
    pub i: usize,
    pub j: usize,
    pub m: u64,
    pub completed: u64,
    pub last: Option<Element>,
    pub pending: Option<u64>,
    pub score: f64,
}

impl ScoredPair {
    fn new(i: usize, j: usize, m: u64) -> Self {
        ScoredPair {
            i,
            j,
            m,
            completed: 0,
            last: None,
            pending: None,
            score: 0.0,
        }
    }

    /// Processes step `k`, whose predictions are `history[k - 1]`.
    fn advance(&mut self, k: u64, config: &EvopConfig, log: &ObservationLog, history: &[Vec<Option<Prediction>>]) {
        if let Some(t) = self.pending {
            if log.reveal_time(t).is_some_and(|r| r <= k) {
                let x = log.lookup(t).expect("revealed");
                let row = &history[(t - 1) as usize];
                let yi = row[self.i - 1].as_ref().expect("defined at disagreement");
                let yj = row[self.j - 1].as_ref().expect("defined at disagreement");
                self.score += config.loss.eval(x, yi) - config.loss.eval(x, yj) - config.penalty(self.m);
                self.completed += 1;
                self.last = Some(Element { t, k });
                self.pending = None;
                return;
            }
            return;
        }
        let row = &history[(k - 1) as usize];
        if let (Some(yi), Some(yj)) = (&row[self.i - 1], &row[self.j - 1]) {
            if disagrees(yi.distance(yj), self.m) {
                self.pending = Some(k);
            }
        }
    }
}

/// EvOp maintained across observations.
pub struct EvopState {
    config: EvopConfig,
    log: ObservationLog,
    history: Vec<Vec<Option<Prediction>>>,
    // pairs[(i-1) * P + (j-1)][m-1] for i != j and 1 <= m <= m_cap
    pairs: Vec<Vec<ScoredPair>>,
    m_cap: u64,
}

impl EvopState {
    pub fn new(config: EvopConfig) -> Self {
        let p = config.pool.len();
        EvopState {
            config,
            log: ObservationLog::new(),
            history: Vec::new(),
            pairs: vec![Vec::new(); p * p],
            m_cap: 0,
        }
    }

    pub fn config(&self) -> &EvopConfig {
        &self.config
    }

    pub fn log(&self) -> &ObservationLog {
        &self.log
    }

    /// Predictions of every pool member at step `k`.
    pub fn predictions_at(&self, k: u64) -> &[Option<Prediction>] {
        &self.history[(k - 1) as usize]
    }

    pub fn pair(&self, i: usize, j: usize, m: u64) -> Option<&ScoredPair> {
        let p = self.config.pool.len();
        if m == 0 || i == j {
            return None;
        }
        self.pairs[(i - 1) * p + (j - 1)].get((m - 1) as usize)
    }

    /// Appends `obs_n` and returns the prediction of `x_n`.
    pub fn observe(&mut self, obs: Observation) -> Result<Decision, EvopError> {
        self.log.append(obs)?;
        let n = self.log.len();
        let preds = self.config.pool.predict_all(&self.log.view());
        self.history.push(preds);

        let p = self.config.pool.len();
        for track in &mut self.pairs {
            for pair in track.iter_mut() {
                pair.advance(n, &self.config, &self.log, &self.history);
            }
        }

        let bound = self.config.score_bound(self.log.revealed_count());
        let wanted = bound.floor() as u64;
        if wanted > self.m_cap {
            for i in 1..=p {
                for j in 1..=p {
                    if i == j {
                        continue;
                    }
                    let track = &mut self.pairs[(i - 1) * p + (j - 1)];
                    for m in self.m_cap + 1..=wanted {
                        let mut pair = ScoredPair::new(i, j, m);
                        for k in 1..=n {
                            pair.advance(k, &self.config, &self.log, &self.history);
                        }
                        track.push(pair);
                    }
                }
            }
            self.m_cap = wanted;
        }

        let scores = (1..=p)
            .map(|i| {
                max_score_from(i, p, bound, |j, m| {
                    self.pairs[(i - 1) * p + (j - 1)][(m - 1) as usize].score
                })
            })
            .collect();
        select(&self.history[(n - 1) as usize], scores, n)
    }
}
