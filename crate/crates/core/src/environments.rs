//! Seeded generators of coupled outcome/observation streams.
//!
//! Every environment hides `x_n` from forecasters and emits `obs_n` as a
//! delta: only indices not revealed before. The accumulated log is the same
//! as if every observation re-revealed the full known prefix.
//!
//! The delayed-coin chain (`PSharp`) flips coin `k` once and replays it for a
//! whole block of `B^(k-1)` steps; `obs_n` reveals the first
//! `⌈log_B(n(B-1)/B)⌉` outcomes, so nothing about the coin being predicted is
//! visible while its block lasts.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Alphabet, Observation, Outcome};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid environment parameters: {0}")]
    InvalidParams(String),
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("failed to read sequence file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// One emitted step: the hidden outcome and the public observation.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub n: u64,
    pub outcome: Outcome,
    pub observation: Observation,
}

/// Why an environment stopped producing steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum EndMarker {
    /// A finite sequence ran out after `steps` outcomes.
    EndOfSequence { steps: u64 },
    /// A block would have extended past the configured cap.
    HorizonTruncated { horizon: u64, block: u64 },
}

pub trait Environment: Send {
    fn name(&self) -> String;
    fn alphabet(&self) -> &Alphabet;
    /// Emits step `n + 1`, or `None` once the environment is exhausted.
    fn step(&mut self) -> Option<Step>;
    /// Oracle access to an already generated outcome. Metrics only.
    fn truth(&self, t: u64) -> Option<Outcome>;
    fn end_marker(&self) -> Option<EndMarker> {
        None
    }
    /// Block structure for the delayed-coin family.
    fn block_layout(&self) -> Option<BlockLayout> {
        None
    }
}

// ---------------------------------------------------------------------------
// Delayed-coin arithmetic
// ---------------------------------------------------------------------------

/// How block lengths grow with the coin index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BlockGrowth {
    /// Block `k` has `B^(k-1)` steps.
    #[default]
    Exponential,
    /// Block `k` has `B^(B^k)` steps.
    DoublyExponential,
}

/// Block boundaries of a delayed-coin environment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockLayout {
    pub base: u64,
    pub growth: BlockGrowth,
}

impl BlockLayout {
    pub fn new(base: u64, growth: BlockGrowth) -> Self {
        BlockLayout { base, growth }
    }

    /// Length of block `k >= 1`, `None` past `u64`.
    pub fn length(&self, k: u64) -> Option<u64> {
        let b = self.base;
        match self.growth {
            BlockGrowth::Exponential => b.checked_pow(u32::try_from(k - 1).ok()?),
            BlockGrowth::DoublyExponential => {
                let e = b.checked_pow(u32::try_from(k).ok()?)?;
                b.checked_pow(u32::try_from(e).ok()?)
            }
        }
    }

    /// Last step of block `k` (`S_k`), `None` past `u64`.
    pub fn end(&self, k: u64) -> Option<u64> {
        let mut total: u64 = 0;
        for i in 1..=k {
            total = total.checked_add(self.length(i)?)?;
        }
        Some(total)
    }

    /// The block containing step `n >= 1`.
    pub fn block_of(&self, n: u64) -> u64 {
        assert!(n >= 1, "steps are 1-based");
        let mut k = 1;
        let mut end: u64 = 0;
        loop {
            match self.length(k).and_then(|l| end.checked_add(l)) {
                Some(e) if e < n => {
                    end = e;
                    k += 1;
                }
                _ => return k,
            }
        }
    }
}

/// The coin index `k` with `S_{k-1} < n <= S_k`, `S_k = Σ_{i<=k} B^(i-1)`.
pub fn psharp_block_index(n: u64, base: u64) -> u64 {
    BlockLayout::new(base, BlockGrowth::Exponential).block_of(n)
}

/// `⌈log_B(n(B-1)/B)⌉` clamped at 0, in exact integer arithmetic.
///
/// The count is at least `c` exactly when `n(B-1) > B^c`.
pub fn reveal_count(n: u64, base: u64) -> u64 {
    assert!(base >= 2);
    let lhs = n as u128 * (base as u128 - 1);
    let mut power = base as u128;
    let mut count = 0;
    while lhs > power {
        count += 1;
        power = match power.checked_mul(base as u128) {
            Some(p) => p,
            None => break,
        };
    }
    count
}

/// `⌈log₁₀(0.9 n)⌉` clamped at 0.
pub fn psharp_reveal_count(n: u64) -> u64 {
    reveal_count(n, 10)
}

/// Smallest `n` with `reveal_count(n, base) >= c`.
pub fn first_step_revealing(c: u64, base: u64) -> Option<u64> {
    if c == 0 {
        return Some(1);
    }
    let power = (base as u128).checked_pow(u32::try_from(c).ok()?)?;
    u64::try_from(power / (base as u128 - 1) + 1).ok()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PSharpParams {
    pub base: u64,
    #[serde(default = "fair")]
    pub bias: f64,
    #[serde(default)]
    pub growth: BlockGrowth,
    /// Last step a doubly-exponential run may reach.
    #[serde(default)]
    pub horizon_cap: Option<u64>,
}

fn fair() -> f64 {
    0.5
}

impl Default for PSharpParams {
    fn default() -> Self {
        PSharpParams {
            base: 10,
            bias: 0.5,
            growth: BlockGrowth::Exponential,
            horizon_cap: None,
        }
    }
}

impl PSharpParams {
    pub fn with_base(base: u64) -> Self {
        PSharpParams {
            base,
            ..Default::default()
        }
    }

    fn validate(&self) -> Result<(), EnvError> {
        if self.base < 2 {
            return Err(EnvError::InvalidParams(format!("base {} < 2", self.base)));
        }
        if !(0.0..=1.0).contains(&self.bias) {
            return Err(EnvError::InvalidParams(format!("bias {} outside [0, 1]", self.bias)));
        }
        if self.growth == BlockGrowth::DoublyExponential && self.horizon_cap.is_none() {
            return Err(EnvError::InvalidParams(
                "doubly-exponential blocks need a horizon_cap".into(),
            ));
        }
        Ok(())
    }
}

enum CoinSource {
    Random(Box<ChaCha8Rng>),
    Scripted(Vec<Outcome>),
}

/// The delayed-coin chain and its doubly-exponential variant.
pub struct PSharp {
    params: PSharpParams,
    layout: BlockLayout,
    source: CoinSource,
    coins: Vec<Outcome>,
    block_end: u64,
    n: u64,
    revealed: u64,
    end: Option<EndMarker>,
}

/// A delayed-coin environment drawing each coin with `params.bias`.
pub fn make_psharp(params: PSharpParams, seed: u64) -> Result<PSharp, EnvError> {
    params.validate()?;
    Ok(PSharp::build(params, CoinSource::Random(Box::new(ChaCha8Rng::seed_from_u64(seed)))))
}

impl PSharp {
    /// A delayed-coin environment whose coins are fixed in advance; it ends
    /// after the last scripted block.
    pub fn scripted(params: PSharpParams, coins: Vec<Outcome>) -> Result<Self, EnvError> {
        params.validate()?;
        Ok(Self::build(params, CoinSource::Scripted(coins)))
    }

    fn build(params: PSharpParams, source: CoinSource) -> Self {
        PSharp {
            layout: BlockLayout::new(params.base, params.growth),
            params,
            source,
            coins: Vec::new(),
            block_end: 0,
            n: 0,
            revealed: 0,
            end: None,
        }
    }

    pub fn params(&self) -> &PSharpParams {
        &self.params
    }

    pub fn coins(&self) -> &[Outcome] {
        &self.coins
    }

    fn next_coin(&mut self) -> Option<Outcome> {
        match &mut self.source {
            CoinSource::Random(rng) => Some(Outcome::from_bool(rng.gen_bool(self.params.bias))),
            CoinSource::Scripted(script) => script.get(self.coins.len()).copied(),
        }
    }
}

impl Environment for PSharp {
    fn name(&self) -> String {
        let family = match self.params.growth {
            BlockGrowth::Exponential => "psharp",
            BlockGrowth::DoublyExponential => "psharp2",
        };
        format!("{family}(base={}, bias={})", self.params.base, self.params.bias)
    }

    fn alphabet(&self) -> &Alphabet {
        static BINARY: std::sync::OnceLock<Alphabet> = std::sync::OnceLock::new();
        BINARY.get_or_init(Alphabet::binary)
    }

    fn step(&mut self) -> Option<Step> {
        if self.end.is_some() {
            return None;
        }
        let n = self.n + 1;
        if let Some(cap) = self.params.horizon_cap {
            if n > cap {
                self.end = Some(EndMarker::HorizonTruncated {
                    horizon: cap,
                    block: self.coins.len() as u64,
                });
                return None;
            }
        }
        if n > self.block_end {
            let k = self.coins.len() as u64 + 1;
            let Some(coin) = self.next_coin() else {
                self.end = Some(EndMarker::EndOfSequence { steps: self.n });
                return None;
            };
            self.coins.push(coin);
            self.block_end = self
                .block_end
                .saturating_add(self.layout.length(k).unwrap_or(u64::MAX));
        }
        self.n = n;
        let count = reveal_count(n, self.params.base);
        let reveals = (self.revealed + 1..=count)
            .map(|t| (t, self.truth(t).expect("revealed prefix is generated")))
            .collect();
        self.revealed = count.max(self.revealed);
        Some(Step {
            n,
            outcome: *self.coins.last().expect("coin drawn"),
            observation: Observation::new(reveals).expect("distinct indices"),
        })
    }

    fn truth(&self, t: u64) -> Option<Outcome> {
        if t == 0 || t > self.n {
            return None;
        }
        self.coins.get((self.layout.block_of(t) - 1) as usize).copied()
    }

    fn end_marker(&self) -> Option<EndMarker> {
        self.end
    }

    fn block_layout(&self) -> Option<BlockLayout> {
        Some(self.layout)
    }
}

// ---------------------------------------------------------------------------
// Delays and the i.i.d. control
// ---------------------------------------------------------------------------

/// Reveal delay as a function of the outcome index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum DelaySpec {
    Constant { steps: u64 },
    /// `⌊factor · t⌋`
    Proportional { factor: f64 },
    /// `⌊t^exponent⌋`
    Power { exponent: f64 },
    /// `delays[(t - 1) mod len]`
    Table { delays: Vec<u64> },
}

impl DelaySpec {
    pub fn delay(&self, t: u64) -> u64 {
        match self {
            DelaySpec::Constant { steps } => *steps,
            DelaySpec::Proportional { factor } => (factor * t as f64).floor() as u64,
            DelaySpec::Power { exponent } => (t as f64).powf(*exponent).floor() as u64,
            DelaySpec::Table { delays } => delays[((t - 1) % delays.len() as u64) as usize],
        }
    }

    /// The step whose observation reveals `x_t`. A zero delay still means
    /// feedback arrives with the next observation, after `x_t` is predicted.
    pub fn reveal_step(&self, t: u64) -> u64 {
        t.saturating_add(self.delay(t).max(1))
    }

    fn validate(&self) -> Result<(), EnvError> {
        match self {
            DelaySpec::Proportional { factor } if !(factor.is_finite() && *factor >= 0.0) => {
                Err(EnvError::InvalidParams(format!("delay factor {factor}")))
            }
            DelaySpec::Power { exponent } if !(exponent.is_finite() && *exponent >= 0.0) => {
                Err(EnvError::InvalidParams(format!("delay exponent {exponent}")))
            }
            DelaySpec::Table { delays } if delays.is_empty() => {
                Err(EnvError::InvalidParams("empty delay table".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Pending reveals keyed by the step that delivers them.
#[derive(Debug, Default)]
struct RevealQueue(BTreeMap<u64, Vec<u64>>);

impl RevealQueue {
    fn schedule(&mut self, step: u64, t: u64) {
        self.0.entry(step).or_default().push(t);
    }

    fn take(&mut self, step: u64) -> Vec<u64> {
        self.0.remove(&step).unwrap_or_default()
    }
}

/// I.i.d. Bernoulli(`q`) outcomes (`H` with probability `q`) revealed after a
/// configurable delay.
pub struct IidBernoulli {
    q: f64,
    delay: DelaySpec,
    rng: ChaCha8Rng,
    outcomes: Vec<Outcome>,
    queue: RevealQueue,
    alphabet: Alphabet,
}

pub fn make_iid_bernoulli(q: f64, delay: DelaySpec, seed: u64) -> Result<IidBernoulli, EnvError> {
    if !(0.0..=1.0).contains(&q) {
        return Err(EnvError::InvalidParams(format!("q = {q} outside [0, 1]")));
    }
    delay.validate()?;
    Ok(IidBernoulli {
        q,
        delay,
        rng: ChaCha8Rng::seed_from_u64(seed),
        outcomes: Vec::new(),
        queue: RevealQueue::default(),
        alphabet: Alphabet::binary(),
    })
}

impl IidBernoulli {
    pub fn q(&self) -> f64 {
        self.q
    }
}

impl Environment for IidBernoulli {
    fn name(&self) -> String {
        format!("iid-bernoulli(q={}, delay={:?})", self.q, self.delay)
    }

    fn alphabet(&self) -> &Alphabet {
        &self.alphabet
    }

    fn step(&mut self) -> Option<Step> {
        let n = self.outcomes.len() as u64 + 1;
        let x = Outcome::from_bool(self.rng.gen_bool(self.q));
        self.outcomes.push(x);
        self.queue.schedule(self.delay.reveal_step(n), n);
        let reveals = self
            .queue
            .take(n)
            .into_iter()
            .map(|t| (t, self.outcomes[(t - 1) as usize]))
            .collect();
        Some(Step {
            n,
            outcome: x,
            observation: Observation::new(reveals).expect("distinct indices"),
        })
    }

    fn truth(&self, t: u64) -> Option<Outcome> {
        t.checked_sub(1).and_then(|i| self.outcomes.get(i as usize)).copied()
    }
}

// ---------------------------------------------------------------------------
// File-backed deterministic sequences
// ---------------------------------------------------------------------------

/// When each outcome of a file-backed sequence is revealed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum RevealSchedule {
    /// `x_t` is revealed by `obs_{t+1}`.
    Immediate,
    /// The delayed-coin prefix rule with the given base.
    Psharp { base: u64 },
    Delayed { delay: DelaySpec },
}

/// How digit symbols map onto heads/tails.
///
/// `H`/`T` map to themselves. Without a target digit, `1` is heads and `0`
/// tails; with one, a digit is heads exactly when it equals the target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DigitMapping {
    pub target: Option<u8>,
}

/// Parses a sequence file: one symbol per byte, whitespace ignored, `#`
/// starts a comment running to end of line.
pub fn parse_sequence(text: &str, mapping: DigitMapping) -> Result<Vec<Outcome>, EnvError> {
    let mut out = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        for (col, byte) in line.bytes().enumerate() {
            let x = match byte {
                b'#' => break,
                b'H' => Outcome::HEADS,
                b'T' => Outcome::TAILS,
                b'0'..=b'9' => match mapping.target {
                    Some(target) => Outcome::from_bool(byte == target),
                    None if byte == b'1' => Outcome::HEADS,
                    None if byte == b'0' => Outcome::TAILS,
                    None => {
                        return Err(EnvError::Parse {
                            line: line_no + 1,
                            column: col + 1,
                            message: format!(
                                "digit '{}' needs a target digit to map onto heads/tails",
                                byte as char
                            ),
                        })
                    }
                },
                b if b.is_ascii_whitespace() => continue,
                other => {
                    return Err(EnvError::Parse {
                        line: line_no + 1,
                        column: col + 1,
                        message: format!("unexpected symbol {:?}", other as char),
                    })
                }
            };
            out.push(x);
        }
    }
    Ok(out)
}

/// A fixed outcome sequence with a reveal schedule.
pub struct Deterministic {
    label: String,
    outcomes: Vec<Outcome>,
    schedule: RevealSchedule,
    n: u64,
    revealed_prefix: u64,
    queue: RevealQueue,
    end: Option<EndMarker>,
    alphabet: Alphabet,
}

impl Deterministic {
    pub fn new(label: impl Into<String>, outcomes: Vec<Outcome>, schedule: RevealSchedule) -> Result<Self, EnvError> {
        match &schedule {
            RevealSchedule::Psharp { base } if *base < 2 => {
                return Err(EnvError::InvalidParams(format!("base {base} < 2")))
            }
            RevealSchedule::Delayed { delay } => delay.validate()?,
            _ => {}
        }
        Ok(Deterministic {
            label: label.into(),
            outcomes,
            schedule,
            n: 0,
            revealed_prefix: 0,
            queue: RevealQueue::default(),
            end: None,
            alphabet: Alphabet::binary(),
        })
    }

    pub fn len(&self) -> usize {
        self.outcomes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outcomes.is_empty()
    }
}

/// Loads a sequence file as an environment.
pub fn make_deterministic(
    path: &Path,
    schedule: RevealSchedule,
    mapping: DigitMapping,
) -> Result<Deterministic, EnvError> {
    let text = std::fs::read_to_string(path).map_err(|source| EnvError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let outcomes = parse_sequence(&text, mapping)?;
    Deterministic::new(path.display().to_string(), outcomes, schedule)
}

impl Environment for Deterministic {
    fn name(&self) -> String {
        format!("deterministic({}, {:?})", self.label, self.schedule)
    }

    fn alphabet(&self) -> &Alphabet {
        &self.alphabet
    }

    fn step(&mut self) -> Option<Step> {
        if self.end.is_some() {
            return None;
        }
        let n = self.n + 1;
        let Some(&x) = self.outcomes.get((n - 1) as usize) else {
            self.end = Some(EndMarker::EndOfSequence { steps: self.n });
            return None;
        };
        self.n = n;
        let indices: Vec<u64> = match &self.schedule {
            RevealSchedule::Immediate => {
                if n > 1 {
                    vec![n - 1]
                } else {
                    vec![]
                }
            }
            RevealSchedule::Psharp { base } => {
                let count = reveal_count(n, *base);
                let fresh = (self.revealed_prefix + 1..=count).collect();
                self.revealed_prefix = self.revealed_prefix.max(count);
                fresh
            }
            RevealSchedule::Delayed { delay } => {
                self.queue.schedule(delay.reveal_step(n), n);
                self.queue.take(n)
            }
        };
        let reveals = indices
            .into_iter()
            .map(|t| (t, self.outcomes[(t - 1) as usize]))
            .collect();
        Some(Step {
            n,
            outcome: x,
            observation: Observation::new(reveals).expect("distinct indices"),
        })
    }

    fn truth(&self, t: u64) -> Option<Outcome> {
        if t == 0 || t > self.n {
            return None;
        }
        self.outcomes.get((t - 1) as usize).copied()
    }

    fn end_marker(&self) -> Option<EndMarker> {
        self.end
    }

    fn block_layout(&self) -> Option<BlockLayout> {
        match self.schedule {
            RevealSchedule::Psharp { base } => Some(BlockLayout::new(base, BlockGrowth::Exponential)),
            _ => None,
        }
    }
}

// ---------------------------------------------------------------------------
// Declarative construction
// ---------------------------------------------------------------------------

/// An environment as declared in an experiment config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum EnvSpec {
    Psharp {
        #[serde(default = "ten")]
        base: u64,
        #[serde(default = "fair")]
        bias: f64,
        #[serde(default)]
        growth: BlockGrowth,
        #[serde(default)]
        horizon_cap: Option<u64>,
        /// Fixed coins instead of random draws.
        #[serde(default)]
        coins: Option<String>,
    },
    IidBernoulli {
        q: f64,
        delay: DelaySpec,
    },
    Deterministic {
        path: String,
        schedule: RevealSchedule,
        #[serde(default)]
        target_digit: Option<char>,
    },
}

fn ten() -> u64 {
    10
}

impl EnvSpec {
    pub fn build(&self, seed: u64) -> Result<Box<dyn Environment>, EnvError> {
        Ok(match self {
            EnvSpec::Psharp {
                base,
                bias,
                growth,
                horizon_cap,
                coins,
            } => {
                let params = PSharpParams {
                    base: *base,
                    bias: *bias,
                    growth: *growth,
                    horizon_cap: *horizon_cap,
                };
                match coins {
                    Some(script) => Box::new(PSharp::scripted(
                        params,
                        parse_sequence(script, DigitMapping::default())?,
                    )?),
                    None => Box::new(make_psharp(params, seed)?),
                }
            }
            EnvSpec::IidBernoulli { q, delay } => Box::new(make_iid_bernoulli(*q, delay.clone(), seed)?),
            EnvSpec::Deterministic {
                path,
                schedule,
                target_digit,
            } => {
                let target = match target_digit {
                    Some(c) if c.is_ascii_digit() => Some(*c as u8),
                    Some(c) => {
                        return Err(EnvError::InvalidParams(format!("target digit {c:?}")))
                    }
                    None => None,
                };
                Box::new(make_deterministic(
                    Path::new(path),
                    schedule.clone(),
                    DigitMapping { target },
                )?)
            }
        })
    }

    /// Whether the spec describes a delayed-coin block structure.
    pub fn is_block_structured(&self) -> bool {
        matches!(
            self,
            EnvSpec::Psharp { .. }
                | EnvSpec::Deterministic {
                    schedule: RevealSchedule::Psharp { .. },
                    ..
                }
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ObservationLog;

    /// Block index by brute-force prefix sums.
    fn block_by_prefix_sums(n: u64, base: u64) -> u64 {
        let mut s = 0u64;
        let mut k = 0;
        while s < n {
            k += 1;
            s += base.pow((k - 1) as u32);
        }
        k
    }

    /// Reveal count by scanning `c` against `10^(c-1) < 0.9 n` in integers:
    /// `⌈log₁₀(0.9n)⌉ >= c  ⇔  0.9n > 10^(c-1)  ⇔  9n > 10^c`.
    fn reveal_count_oracle(n: u64) -> u64 {
        (1..40u32).take_while(|&c| 9 * n as u128 > 10u128.pow(c)).count() as u64
    }

    #[test]
    fn block_index_examples() {
        assert_eq!(psharp_block_index(1, 10), 1);
        assert_eq!(psharp_block_index(5, 10), 2);
        assert_eq!(psharp_block_index(112, 10), 4);
        assert_eq!(psharp_block_index(111, 10), 3);
        assert_eq!(psharp_block_index(12, 10), 3);
        for base in [2, 3, 10] {
            for n in 1..5_000 {
                assert_eq!(psharp_block_index(n, base), block_by_prefix_sums(n, base));
            }
        }
    }

    #[test]
    fn new_coin_steps_match_block_starts() {
        // new coins start at 2, 12, 112, 1112
        let layout = BlockLayout::new(10, BlockGrowth::Exponential);
        let starts: Vec<u64> = (1..=4).map(|k| layout.end(k).unwrap() + 1).collect();
        assert_eq!(starts, vec![2, 12, 112, 1112]);
    }

    #[test]
    fn reveal_count_examples() {
        assert_eq!(psharp_reveal_count(1), 0);
        assert_eq!(psharp_reveal_count(12), 2);
        assert_eq!(psharp_reveal_count(11), 1);
        for n in 1..200_000 {
            assert_eq!(psharp_reveal_count(n), reveal_count_oracle(n), "n={n}");
        }
    }

    #[test]
    fn first_step_revealing_is_the_threshold() {
        for base in [2, 3, 10] {
            for c in 0..8 {
                let n = first_step_revealing(c, base).unwrap();
                assert!(reveal_count(n, base) >= c);
                if n > 1 {
                    assert!(reveal_count(n - 1, base) < c);
                }
            }
        }
        assert_eq!(first_step_revealing(1, 10), Some(2));
        assert_eq!(first_step_revealing(2, 10), Some(12));
    }

    #[test]
    fn current_block_is_never_revealed() {
        for base in [2, 3, 10] {
            let layout = BlockLayout::new(base, BlockGrowth::Exponential);
            for k in 2..=7 {
                let start = layout.end(k - 1).unwrap() + 1;
                let end = layout.end(k).unwrap();
                assert!(reveal_count(end, base) < start, "base {base} block {k}");
            }
        }
    }

    #[test]
    fn psharp_is_deterministic_and_blockwise_constant() {
        let mut a = make_psharp(PSharpParams::default(), 9).unwrap();
        let mut b = make_psharp(PSharpParams::default(), 9).unwrap();
        let mut log = ObservationLog::new();
        let layout = BlockLayout::new(10, BlockGrowth::Exponential);
        for _ in 0..10_000 {
            let sa = a.step().unwrap();
            assert_eq!(Some(sa.clone()), b.step());
            let k = layout.block_of(sa.n);
            assert_eq!(sa.outcome, a.coins()[(k - 1) as usize]);
            let start = layout.end(k - 1).unwrap_or(0) + 1;
            for &(t, x) in sa.observation.reveals() {
                assert!(t < start, "revealed index {t} inside current block");
                assert_eq!(Some(x), a.truth(t));
            }
            log.append(sa.observation).unwrap();
        }
        assert_eq!(log.revealed_count(), psharp_reveal_count(10_000));
    }

    #[test]
    fn psharp_coin_frequency() {
        // one coin per block, 1000 seeded coins, base 2 to keep blocks cheap
        let mut heads = 0;
        let trials = 1000;
        for seed in 0..trials {
            let mut env = make_psharp(PSharpParams { bias: 0.3, ..PSharpParams::with_base(2) }, seed).unwrap();
            env.step();
            heads += env.coins()[0].is_heads() as u32;
        }
        let p = heads as f64 / trials as f64;
        let sigma = (0.3f64 * 0.7 / trials as f64).sqrt();
        assert!((p - 0.3).abs() <= 3.0 * sigma, "p = {p}");
    }

    #[test]
    fn doubly_exponential_truncates() {
        let params = PSharpParams {
            base: 2,
            bias: 0.5,
            growth: BlockGrowth::DoublyExponential,
            horizon_cap: Some(100),
        };
        let layout = BlockLayout::new(2, BlockGrowth::DoublyExponential);
        assert_eq!(layout.length(1), Some(4));
        assert_eq!(layout.length(2), Some(16));
        assert_eq!(layout.length(3), Some(256));
        let mut env = make_psharp(params, 1).unwrap();
        let mut steps = 0;
        while env.step().is_some() {
            steps += 1;
        }
        assert_eq!(steps, 100);
        assert_eq!(
            env.end_marker(),
            Some(EndMarker::HorizonTruncated { horizon: 100, block: 3 })
        );
        let missing_cap = PSharpParams {
            horizon_cap: None,
            ..params
        };
        assert!(make_psharp(missing_cap, 1).is_err());
    }

    #[test]
    fn iid_reveal_times() {
        let mut env = make_iid_bernoulli(0.5, DelaySpec::Proportional { factor: 1.0 }, 3).unwrap();
        let mut log = ObservationLog::new();
        for _ in 0..400 {
            log.append(env.step().unwrap().observation).unwrap();
        }
        for t in 1..=200 {
            assert_eq!(log.reveal_time(t), Some(2 * t));
            assert_eq!(log.lookup(t), env.truth(t));
        }
    }

    #[test]
    fn iid_immediate_feedback_and_corner_bias() {
        let mut env = make_iid_bernoulli(1.0, DelaySpec::Constant { steps: 0 }, 0).unwrap();
        let first = env.step().unwrap();
        assert!(first.observation.is_empty());
        for n in 2..100 {
            let s = env.step().unwrap();
            assert_eq!(s.outcome, Outcome::HEADS);
            assert_eq!(s.observation.reveals(), &[(n - 1, Outcome::HEADS)]);
        }
        assert!(make_iid_bernoulli(1.5, DelaySpec::Constant { steps: 0 }, 0).is_err());
    }

    #[test]
    fn parse_sequence_rules() {
        let text = "# header\nHT HT\nTT # trailing\n";
        let xs = parse_sequence(text, DigitMapping::default()).unwrap();
        assert_eq!(xs.len(), 6);
        assert_eq!(xs[0], Outcome::HEADS);
        let digits = parse_sequence("3717", DigitMapping { target: Some(b'7') }).unwrap();
        assert_eq!(
            digits,
            vec![Outcome::TAILS, Outcome::HEADS, Outcome::TAILS, Outcome::HEADS]
        );
        assert!(matches!(
            parse_sequence("HX", DigitMapping::default()),
            Err(EnvError::Parse { line: 1, column: 2, .. })
        ));
        assert!(parse_sequence("5", DigitMapping::default()).is_err());
    }

    #[test]
    fn deterministic_schedules() {
        let xs = parse_sequence(&"HT".repeat(50), DigitMapping::default()).unwrap();
        let mut env = Deterministic::new("mem", xs.clone(), RevealSchedule::Immediate).unwrap();
        let mut log = ObservationLog::new();
        while let Some(s) = env.step() {
            log.append(s.observation).unwrap();
        }
        assert_eq!(log.len(), 100);
        assert_eq!(env.end_marker(), Some(EndMarker::EndOfSequence { steps: 100 }));
        for t in 1..100 {
            assert_eq!(log.reveal_time(t), Some(t + 1));
        }

        // same reveal pattern as the coin chain, file outcomes
        let mut file_env = Deterministic::new("mem", xs, RevealSchedule::Psharp { base: 10 }).unwrap();
        let mut coin_env = make_psharp(PSharpParams::default(), 5).unwrap();
        for _ in 0..100 {
            let a = file_env.step().unwrap().observation;
            let b = coin_env.step().unwrap().observation;
            let ia: Vec<u64> = a.reveals().iter().map(|r| r.0).collect();
            let ib: Vec<u64> = b.reveals().iter().map(|r| r.0).collect();
            assert_eq!(ia, ib);
        }
    }
}
