//! Outcomes, predictions, observations and the append-only observation log.
//!
//! Indices are 1-based everywhere: `x_1` is the first outcome and `obs_1` the
//! first observation. A forecaster predicting `x_n` sees the log prefix of
//! length `n`, i.e. every observation up to and including `obs_n`.

use std::collections::HashMap;
use std::fmt;

use smallvec::SmallVec;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("observation reveals index {index} as {new}, but it was revealed as {old} at step {step}")]
    ConsistencyViolation {
        index: u64,
        old: Outcome,
        new: Outcome,
        step: u64,
    },
    #[error("observation reveals index {0} more than once")]
    DuplicateIndex(u64),
    #[error("outcome index must be >= 1")]
    ZeroIndex,
    #[error("subsequence must be strictly increasing and 1-based")]
    NotIncreasing,
    #[error("prediction has a non-finite coordinate")]
    NonFinite,
    #[error("prediction must have at least one coordinate")]
    EmptyPrediction,
}

/// A single outcome symbol.
///
/// The coin environments use the binary alphabet `{H, T}`; other symbols are
/// carried opaquely.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Outcome(u8);

impl Outcome {
    pub const HEADS: Outcome = Outcome(b'H');
    pub const TAILS: Outcome = Outcome(b'T');

    pub const fn symbol(sym: u8) -> Self {
        Outcome(sym)
    }

    pub fn from_bool(heads: bool) -> Self {
        if heads {
            Self::HEADS
        } else {
            Self::TAILS
        }
    }

    pub fn as_byte(self) -> u8 {
        self.0
    }

    pub fn is_heads(self) -> bool {
        self == Self::HEADS
    }

    /// 1.0 for heads, 0.0 otherwise.
    pub fn indicator(self) -> f64 {
        if self.is_heads() {
            1.0
        } else {
            0.0
        }
    }
}

impl fmt::Debug for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0 as char)
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0 as char)
    }
}

/// A finite outcome alphabet.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alphabet(Vec<Outcome>);

impl Alphabet {
    pub fn binary() -> Self {
        Alphabet(vec![Outcome::HEADS, Outcome::TAILS])
    }

    pub fn new(symbols: Vec<Outcome>) -> Self {
        Alphabet(symbols)
    }

    pub fn contains(&self, x: Outcome) -> bool {
        self.0.contains(&x)
    }

    pub fn symbols(&self) -> &[Outcome] {
        &self.0
    }
}

/// A point of the prediction set, a real vector of fixed dimension.
///
/// Coin environments use `d = 1` with the coordinate read as P(heads).
#[derive(Clone, PartialEq)]
pub struct Prediction(SmallVec<[f64; 2]>);

impl Prediction {
    pub fn scalar(p: f64) -> Self {
        Prediction(SmallVec::from_slice(&[p]))
    }

    pub fn new(coords: &[f64]) -> Result<Self, ModelError> {
        if coords.is_empty() {
            return Err(ModelError::EmptyPrediction);
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(ModelError::NonFinite);
        }
        Ok(Prediction(SmallVec::from_slice(coords)))
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// First coordinate; the probability of heads for coin predictions.
    pub fn value(&self) -> f64 {
        self.0[0]
    }

    /// Euclidean distance.
    pub fn distance(&self, other: &Prediction) -> f64 {
        debug_assert_eq!(self.dim(), other.dim());
        if self.dim() == 1 {
            return (self.0[0] - other.0[0]).abs();
        }
        self.0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

impl fmt::Debug for Prediction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.dim() == 1 {
            write!(f, "{}", self.0[0])
        } else {
            f.debug_list().entries(self.0.iter()).finish()
        }
    }
}

/// `obs_i`: a finite partial map from outcome indices to outcomes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Observation {
    reveals: Vec<(u64, Outcome)>,
}

impl Observation {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn new(reveals: Vec<(u64, Outcome)>) -> Result<Self, ModelError> {
        let mut seen = std::collections::HashSet::with_capacity(reveals.len());
        for &(t, _) in &reveals {
            if t == 0 {
                return Err(ModelError::ZeroIndex);
            }
            if !seen.insert(t) {
                return Err(ModelError::DuplicateIndex(t));
            }
        }
        Ok(Observation { reveals })
    }

    pub fn reveals(&self) -> &[(u64, Outcome)] {
        &self.reveals
    }

    pub fn is_empty(&self) -> bool {
        self.reveals.is_empty()
    }

    pub fn get(&self, t: u64) -> Option<Outcome> {
        self.reveals.iter().find(|(i, _)| *i == t).map(|(_, x)| *x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Reveal {
    outcome: Outcome,
    step: u64,
}

/// `ō_n`: every observation so far, with a first-reveal index for O(1)
/// lookups.
#[derive(Debug, Clone, Default)]
pub struct ObservationLog {
    steps: Vec<Observation>,
    revealed: HashMap<u64, Reveal>,
    // cumulative counts of distinct revealed indices (and heads among them)
    // after each step; entry 0 is the empty prefix
    cum_revealed: Vec<u64>,
    cum_heads: Vec<u64>,
}

impl ObservationLog {
    pub fn new() -> Self {
        ObservationLog {
            steps: Vec::new(),
            revealed: HashMap::new(),
            cum_revealed: vec![0],
            cum_heads: vec![0],
        }
    }

    pub fn len(&self) -> u64 {
        self.steps.len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Appends `obs_{n+1}`. On error the log is left unchanged.
    pub fn append(&mut self, obs: Observation) -> Result<(), ModelError> {
        let step = self.len() + 1;
        for &(t, x) in obs.reveals() {
            if let Some(prev) = self.revealed.get(&t) {
                if prev.outcome != x {
                    return Err(ModelError::ConsistencyViolation {
                        index: t,
                        old: prev.outcome,
                        new: x,
                        step: prev.step,
                    });
                }
            }
        }
        let mut fresh = 0;
        let mut heads = 0;
        for &(t, x) in obs.reveals() {
            self.revealed.entry(t).or_insert_with(|| {
                fresh += 1;
                if x.is_heads() {
                    heads += 1;
                }
                Reveal { outcome: x, step }
            });
        }
        let last = self.cum_revealed.len() - 1;
        self.cum_revealed.push(self.cum_revealed[last] + fresh);
        self.cum_heads.push(self.cum_heads[last] + heads);
        self.steps.push(obs);
        Ok(())
    }

    /// `ō_n(t)` for the whole log.
    pub fn lookup(&self, t: u64) -> Option<Outcome> {
        self.revealed.get(&t).map(|r| r.outcome)
    }

    /// The minimal step `k` with `t ∈ Dom(obs_k)`.
    pub fn reveal_time(&self, t: u64) -> Option<u64> {
        self.revealed.get(&t).map(|r| r.step)
    }

    pub fn observation(&self, k: u64) -> Option<&Observation> {
        if k == 0 {
            return None;
        }
        self.steps.get((k - 1) as usize)
    }

    pub fn revealed_count(&self) -> u64 {
        self.view().revealed_count()
    }

    /// The full log as a view.
    pub fn view(&self) -> LogView<'_> {
        LogView {
            log: self,
            len: self.len(),
        }
    }

    /// The prefix `ō_k`. Panics if `k` exceeds the log length.
    pub fn prefix(&self, k: u64) -> LogView<'_> {
        assert!(k <= self.len(), "prefix {k} beyond log length {}", self.len());
        LogView { log: self, len: k }
    }
}

/// A read-only prefix `ō_k` of an [`ObservationLog`].
///
/// Forecasters receive views, so one log can answer queries for every
/// earlier prefix.
#[derive(Clone, Copy)]
pub struct LogView<'a> {
    log: &'a ObservationLog,
    len: u64,
}

impl<'a> LogView<'a> {
    /// Number of observations in the prefix; also the index of the outcome
    /// currently being predicted.
    pub fn len(&self) -> u64 {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn lookup(&self, t: u64) -> Option<Outcome> {
        match self.log.revealed.get(&t) {
            Some(r) if r.step <= self.len => Some(r.outcome),
            _ => None,
        }
    }

    pub fn reveal_time(&self, t: u64) -> Option<u64> {
        match self.log.revealed.get(&t) {
            Some(r) if r.step <= self.len => Some(r.step),
            _ => None,
        }
    }

    pub fn revealed_count(&self) -> u64 {
        self.log.cum_revealed[self.len as usize]
    }

    pub fn heads_count(&self) -> u64 {
        self.log.cum_heads[self.len as usize]
    }

    pub fn log(&self) -> &'a ObservationLog {
        self.log
    }
}

/// A strictly increasing list of 1-based outcome indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subsequence(Vec<u64>);

impl Subsequence {
    pub fn new(indices: Vec<u64>) -> Result<Self, ModelError> {
        if indices.first() == Some(&0) {
            return Err(ModelError::ZeroIndex);
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ModelError::NotIncreasing);
        }
        Ok(Subsequence(indices))
    }

    /// `1, 2, …, n`.
    pub fn contiguous(n: u64) -> Self {
        Subsequence((1..=n).collect())
    }

    pub fn indices(&self) -> &[u64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Whether every element after the first is predicted at or after feedback on
/// its predecessor: `reveal_time(s_{i-1}) <= s_i` for all `i > 1`.
pub fn is_independent(s: &Subsequence, log: &ObservationLog) -> bool {
    s.indices().windows(2).all(|w| match log.reveal_time(w[0]) {
        Some(k) => k <= w[1],
        None => false,
    })
}
