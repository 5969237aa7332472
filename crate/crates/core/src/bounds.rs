//! Tail bounds and convergence-time bounds.
//!
//! * [`lemma3_bound`]: `P(Σ r_i - v_i >= λ) <= exp(-2λ/a²)` for increments with
//!   `E[r | past] <= 0` and `|r| <= a√v`, plus a Monte Carlo check of it.
//! * [`relscore_tail`]: probability that the score of an optimal forecaster
//!   against one rival ever reaches `Λ`.
//! * [`convergence_probability`] / [`steps_for_probability`]: how long until
//!   the predictor has locked onto the optimal forecaster, driven by iterating
//!   `h ∘ g` in exact big-integer arithmetic.
//!
//! Every probability is clamped to `[0, 1]`.

use num_bigint::BigUint;
use num_traits::{One, ToPrimitive, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BoundsError {
    #[error("{name} must be positive, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("at least 1000 trials are required, got {0}")]
    TooFewTrials(usize),
    #[error("generator broke |r| <= a·sqrt(v) in trial {trial}: r = {r}, v = {v}, a = {a}")]
    GeneratorContractViolation { trial: usize, r: f64, v: f64, a: f64 },
    #[error("probability target must lie in (0, 1), got {0}")]
    BadProbability(f64),
    #[error("epsilon must lie in (0, 1), got {0}")]
    BadEpsilon(f64),
    #[error("m must be at least 1")]
    ZeroM,
    #[error("growth table has no entry for {0}")]
    OutsideTable(String),
    #[error("h∘g does not increase at {0}")]
    NotIncreasing(String),
    #[error("no t below 2^62 reaches the target probability")]
    Unreachable,
}

fn positive(name: &'static str, value: f64) -> Result<(), BoundsError> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(BoundsError::NonPositive { name, value })
    }
}

/// `exp(-2λ/a²)`.
pub fn lemma3_bound(lambda: f64, a: f64) -> Result<f64, BoundsError> {
    positive("lambda", lambda)?;
    positive("a", a)?;
    Ok((-2.0 * lambda / (a * a)).exp())
}

// ---------------------------------------------------------------------------
// Monte Carlo verification
// ---------------------------------------------------------------------------

/// Increments `(r_i, v_i)` of one trial together with the envelope constant.
#[derive(Debug, Clone, PartialEq)]
pub struct MartingaleSample {
    pub increments: Vec<(f64, f64)>,
    pub a: f64,
}

/// Random increment sequences for the concentration check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum GeneratorSpec {
    /// `r ≡ 0`, `v ≡ 0`.
    Zero,
    /// A Bayes-optimal prediction of a `bias` coin against a fixed rival under
    /// squared error: `r = -∇ℒ(x, y*)(y' - y*)`, `v = (ρ/2)(y' - y*)²`.
    OptimalVsRival { bias: f64, rival: f64 },
    /// As above with the rival drawn uniformly from `[0, 1]` each step.
    OptimalVsRandomRival { bias: f64 },
    /// `r = ±a√v` with equal probability, constant `v`.
    SymmetricExtreme { v: f64, a: f64 },
    /// `r = +a√v` always: satisfies the envelope but drifts upward.
    PositiveDrift { v: f64, a: f64 },
}

const SQ_RHO: f64 = 2.0;
const SQ_KAPPA: f64 = 2.0;

impl GeneratorSpec {
    /// The delayed-coin generator: fair coin, optimal 0.5 against the gambler 1.
    pub fn psharp_pair() -> Self {
        GeneratorSpec::OptimalVsRival { bias: 0.5, rival: 1.0 }
    }

    pub fn a(&self) -> f64 {
        match self {
            GeneratorSpec::Zero => 1.0,
            GeneratorSpec::OptimalVsRival { .. } | GeneratorSpec::OptimalVsRandomRival { .. } => {
                SQ_KAPPA * 2f64.sqrt() / SQ_RHO.sqrt()
            }
            GeneratorSpec::SymmetricExtreme { a, .. } | GeneratorSpec::PositiveDrift { a, .. } => *a,
        }
    }

    fn optimal_increment<R: Rng>(rng: &mut R, bias: f64, rival: f64) -> (f64, f64) {
        let x = if rng.gen_bool(bias) { 1.0 } else { 0.0 };
        let grad = 2.0 * (bias - x);
        let gap = rival - bias;
        (-grad * gap, 0.5 * SQ_RHO * gap * gap)
    }

    fn fill<R: Rng>(&self, rng: &mut R, n: usize, out: &mut Vec<(f64, f64)>) {
        out.clear();
        for _ in 0..n {
            let inc = match *self {
                GeneratorSpec::Zero => (0.0, 0.0),
                GeneratorSpec::OptimalVsRival { bias, rival } => Self::optimal_increment(rng, bias, rival),
                GeneratorSpec::OptimalVsRandomRival { bias } => {
                    let rival = rng.gen::<f64>();
                    Self::optimal_increment(rng, bias, rival)
                }
                GeneratorSpec::SymmetricExtreme { v, a } => {
                    let r = a * v.sqrt();
                    (if rng.gen_bool(0.5) { r } else { -r }, v)
                }
                GeneratorSpec::PositiveDrift { v, a } => (a * v.sqrt(), v),
            };
            out.push(inc);
        }
    }

    /// One seeded sample.
    pub fn sample(&self, n: usize, seed: u64) -> MartingaleSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut increments = Vec::with_capacity(n);
        self.fill(&mut rng, n, &mut increments);
        MartingaleSample {
            increments,
            a: self.a(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TailCheck {
    pub lambda: f64,
    pub empirical: f64,
    pub bound: f64,
    /// Binomial standard error at the bound.
    pub std_error: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConcentrationReport {
    pub generator: GeneratorSpec,
    pub a: f64,
    pub trials: usize,
    pub increments: usize,
    /// Average `r` over all increments; positive values expose a generator
    /// that breaks `E[r | past] <= 0`.
    pub mean_r: f64,
    pub tails: Vec<TailCheck>,
}

impl ConcentrationReport {
    pub fn passed(&self) -> bool {
        self.tails.iter().all(|t| t.pass)
    }
}

/// Envelope slack for `|r| <= a√v` in floating point.
const ENVELOPE_TOL: f64 = 1e-12;

/// Runs `trials` independent trials of `n_increments` increments and compares
/// the empirical tail `P(Σ r - v >= λ)` with [`lemma3_bound`] at each `λ`.
///
/// Trial `i` draws from the ChaCha8 stream `i` of `seed`, so results do not
/// depend on thread scheduling.
pub fn verify_concentration(
    generator: &GeneratorSpec,
    n_increments: usize,
    trials: usize,
    lambdas: &[f64],
    seed: u64,
) -> Result<ConcentrationReport, BoundsError> {
    if trials < 1000 {
        return Err(BoundsError::TooFewTrials(trials));
    }
    let a = generator.a();
    let bounds = lambdas
        .iter()
        .map(|&l| lemma3_bound(l, a))
        .collect::<Result<Vec<_>, _>>()?;

    let per_trial: Vec<Result<(f64, f64), BoundsError>> = (0..trials)
        .into_par_iter()
        .map_init(Vec::new, |buf, trial| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(trial as u64);
            generator.fill(&mut rng, n_increments, buf);
            let mut total = 0.0;
            let mut r_sum = 0.0;
            for &(r, v) in buf.iter() {
                if r.abs() > a * v.sqrt() + ENVELOPE_TOL {
                    return Err(BoundsError::GeneratorContractViolation { trial, r, v, a });
                }
                total += r - v;
                r_sum += r;
            }
            Ok((total, r_sum))
        })
        .collect();

    let mut sums = Vec::with_capacity(trials);
    let mut r_total = 0.0;
    for res in per_trial {
        let (s, r) = res?;
        sums.push(s);
        r_total += r;
    }
    let tails = lambdas
        .iter()
        .zip(bounds)
        .map(|(&lambda, bound)| {
            let hits = sums.iter().filter(|&&s| s >= lambda).count();
            let empirical = hits as f64 / trials as f64;
            let std_error = (bound * (1.0 - bound) / trials as f64).sqrt();
            TailCheck {
                lambda,
                empirical,
                bound,
                std_error,
                pass: empirical <= bound + 3.0 * std_error,
            }
        })
        .collect();
    Ok(ConcentrationReport {
        generator: generator.clone(),
        a,
        trials,
        increments: n_increments,
        mean_r: r_total / (trials * n_increments.max(1)) as f64,
        tails,
    })
}

// ---------------------------------------------------------------------------
// Score tails
// ---------------------------------------------------------------------------

/// Loss constants, tolerance and pool position entering the tail bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundParams {
    pub rho: f64,
    pub kappa: f64,
    pub epsilon: f64,
    /// Disagreement granularity: pairs are compared when they differ by
    /// more than `1/m`.
    pub m: u64,
    /// 1-based index of the optimal forecaster.
    pub z: u64,
    pub pool_size: u64,
}

impl BoundParams {
    pub fn new(rho: f64, kappa: f64, epsilon: f64, m: u64, z: u64, pool_size: u64) -> Result<Self, BoundsError> {
        let p = BoundParams {
            rho,
            kappa,
            epsilon,
            m,
            z,
            pool_size,
        };
        p.validate()?;
        Ok(p)
    }

    /// Picks the smallest `m` with `1/m < delta`.
    pub fn with_margin(rho: f64, kappa: f64, epsilon: f64, delta: f64, z: u64, pool_size: u64) -> Result<Self, BoundsError> {
        positive("delta", delta)?;
        Self::new(rho, kappa, epsilon, m_for_margin(delta), z, pool_size)
    }

    /// Squared error with `ε = 0.5`, pool `{0.5, 1, 0}` with the optimal
    /// forecaster first: the delayed-coin setting.
    pub fn psharp() -> Self {
        BoundParams::with_margin(2.0, 2.0, 0.5, 0.5, 1, 3).expect("valid preset")
    }

    pub fn validate(&self) -> Result<(), BoundsError> {
        positive("rho", self.rho)?;
        positive("kappa", self.kappa)?;
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(BoundsError::BadEpsilon(self.epsilon));
        }
        if self.m == 0 {
            return Err(BoundsError::ZeroM);
        }
        Ok(())
    }

    /// `b = ρ/κ²`
    pub fn b(&self) -> f64 {
        self.rho / (self.kappa * self.kappa)
    }

    /// `α = ρ(1-ε)/(8m²)`
    pub fn alpha(&self) -> f64 {
        let m = self.m as f64;
        self.rho * (1.0 - self.epsilon) / (8.0 * m * m)
    }

    /// `c = ρ²(1-ε)²/(16m²κ²)`
    pub fn c(&self) -> f64 {
        let m = self.m as f64;
        let one_minus = 1.0 - self.epsilon;
        self.rho * self.rho * one_minus * one_minus / (16.0 * m * m * self.kappa * self.kappa)
    }
}

/// Smallest `m` with `1/m < delta`.
pub fn m_for_margin(delta: f64) -> u64 {
    (1.0 / delta).floor() as u64 + 1
}

fn clamp01(p: f64) -> f64 {
    if p.is_nan() {
        return 0.0;
    }
    p.clamp(0.0, 1.0)
}

/// `exp(-bΛ) / (1 - exp(-bρε/2))`: chance that the optimal forecaster's score
/// against a single rival ever reaches `Λ`.
pub fn relscore_tail(params: &BoundParams, big_lambda: f64) -> f64 {
    let b = params.b();
    clamp01((-b * big_lambda).exp() / (1.0 - (-b * params.rho * params.epsilon / 2.0).exp()))
}

/// The single-rival tail at `Λ = λ + m + j`, summed over all `j, m >= 1`:
/// `exp(-b(λ+2)) / ((1 - exp(-bρε/2))(1 - exp(-b))²)`.
pub fn relscore_tail_all_pairs(params: &BoundParams, lambda: f64) -> f64 {
    clamp01(all_pairs_unclamped(params, lambda))
}

fn all_pairs_unclamped(params: &BoundParams, lambda: f64) -> f64 {
    let b = params.b();
    let first = 1.0 - (-b * params.rho * params.epsilon / 2.0).exp();
    let second = 1.0 - (-b).exp();
    (-b * (lambda + 2.0)).exp() / (first * second * second)
}

/// Smallest `λ >= 0` whose all-pairs tail is at most `p`; the optimal
/// forecaster's `MaxScore` stays below `z + λ` with probability `>= 1 - p`.
pub fn score_cap(params: &BoundParams, p: f64) -> Result<f64, BoundsError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(BoundsError::BadProbability(p));
    }
    // all_pairs(λ) = K exp(-bλ)  ⇒  λ = ln(K/p)/b
    let k = all_pairs_unclamped(params, 0.0);
    Ok(((k / p).ln() / params.b()).max(0.0) + params.z as f64)
}

// ---------------------------------------------------------------------------
// Growth functions and convergence time
// ---------------------------------------------------------------------------

/// A monotone integer function used as a disagreement-gap or feedback-delay
/// bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum GrowthFn {
    /// `mul · t + add`
    Affine { mul: u64, add: u64 },
    /// Smallest `n` whose delayed-coin observation reveals `x_t`:
    /// `⌊B^t/(B-1)⌋ + 1`.
    PsharpReveal { base: u64 },
    /// `values[t]`; arguments past the table are errors.
    Table { values: Vec<u64> },
}

impl GrowthFn {
    /// `Ok(None)` when the value exceeds `cap`.
    pub fn eval(&self, t: &BigUint, cap: &BigUint) -> Result<Option<BigUint>, BoundsError> {
        let value = match self {
            GrowthFn::Affine { mul, add } => t * BigUint::from(*mul) + BigUint::from(*add),
            GrowthFn::PsharpReveal { base } => {
                // B^t/(B-1) >= 2^(t-1), so beyond bits(cap) + 1 it must overflow
                if *t > BigUint::from(cap.bits() + 1) {
                    return Ok(None);
                }
                let exp = t.to_u32().expect("bounded by cap bits");
                let b = BigUint::from(*base);
                b.pow(exp) / (BigUint::from(*base) - 1u32) + 1u32
            }
            GrowthFn::Table { values } => {
                let idx = t
                    .to_usize()
                    .filter(|&i| i < values.len())
                    .ok_or_else(|| BoundsError::OutsideTable(t.to_string()))?;
                BigUint::from(values[idx])
            }
        };
        Ok(if value > *cap { None } else { Some(value) })
    }
}

/// `h` bounds how long until the optimal forecaster and every rival disagree
/// by more than `1/m`; `g` bounds when `x_t` is revealed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrowthFunctions {
    pub h: GrowthFn,
    pub g: GrowthFn,
}

impl GrowthFunctions {
    /// Delayed-coin preset: constant rivals disagree with 0.5 at every step,
    /// so `h(t) = t + 1`; `g` is the reveal threshold.
    pub fn psharp(base: u64) -> Self {
        GrowthFunctions {
            h: GrowthFn::Affine { mul: 1, add: 1 },
            g: GrowthFn::PsharpReveal { base },
        }
    }

    /// Immediate feedback with rivals that always disagree.
    pub fn immediate() -> Self {
        GrowthFunctions {
            h: GrowthFn::Affine { mul: 1, add: 1 },
            g: GrowthFn::Affine { mul: 1, add: 1 },
        }
    }
}

/// An exact value or a marker that it passed the cap.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Growth {
    Exact(BigUint),
    Overflow(BigUint),
}

impl std::fmt::Display for Growth {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Growth::Exact(v) => write!(f, "{v}"),
            Growth::Overflow(cap) => write!(f, "Overflow({cap})"),
        }
    }
}

impl Growth {
    pub fn exact(&self) -> Option<&BigUint> {
        match self {
            Growth::Exact(v) => Some(v),
            Growth::Overflow(_) => None,
        }
    }
}

fn hg_step(funcs: &GrowthFunctions, v: &BigUint, cap: &BigUint) -> Result<Option<BigUint>, BoundsError> {
    match funcs.g.eval(v, cap)? {
        Some(after_g) => funcs.h.eval(&after_g, cap),
        None => Ok(None),
    }
}

/// `Some(d)` when `h ∘ g` is the translation `x ↦ x + d`.
fn translation(funcs: &GrowthFunctions) -> Option<u64> {
    match (&funcs.h, &funcs.g) {
        (GrowthFn::Affine { mul: 1, add: ha }, GrowthFn::Affine { mul: 1, add: ga }) => ha.checked_add(*ga),
        _ => None,
    }
}

/// `(h ∘ g)^t(1)`, or `Overflow(cap)` once an intermediate value passes `cap`.
pub fn compose_hg(funcs: &GrowthFunctions, t: u64, cap: &BigUint) -> Result<Growth, BoundsError> {
    let mut v = BigUint::one();
    if v > *cap {
        return Ok(Growth::Overflow(cap.clone()));
    }
    if let Some(d) = translation(funcs) {
        v += BigUint::from(t) * BigUint::from(d);
        return Ok(if v > *cap { Growth::Overflow(cap.clone()) } else { Growth::Exact(v) });
    }
    for _ in 0..t {
        match hg_step(funcs, &v, cap)? {
            Some(next) => v = next,
            None => return Ok(Growth::Overflow(cap.clone())),
        }
    }
    Ok(Growth::Exact(v))
}

/// Largest `t` with `(h ∘ g)^t(1) <= horizon`.
pub fn max_iterations_within(funcs: &GrowthFunctions, horizon: &BigUint) -> Result<u64, BoundsError> {
    if horizon.is_zero() {
        return Ok(0);
    }
    if let Some(d) = translation(funcs) {
        if d == 0 {
            return Err(BoundsError::NotIncreasing("1".into()));
        }
        let t = (horizon - 1u32) / BigUint::from(d);
        return Ok(t.to_u64().unwrap_or(u64::MAX));
    }
    let mut v = BigUint::one();
    let mut t = 0;
    while let Some(next) = hg_step(funcs, &v, horizon)? {
        if next <= v {
            return Err(BoundsError::NotIncreasing(v.to_string()));
        }
        v = next;
        t += 1;
    }
    Ok(t)
}

/// Probability that the predictor may still deviate from the optimal
/// forecaster after `t` guaranteed comparisons.
pub fn failure_probability(params: &BoundParams, t: u64) -> f64 {
    let b = params.b();
    let c = params.c();
    let z = params.z as f64;
    let pool = params.pool_size as f64;
    let lambda = params.alpha() * t as f64 - params.m as f64 - z + pool;
    let first = (-b * (lambda + 2.0 - z)).exp()
        / ((1.0 - (-b * params.rho * params.epsilon / 2.0).exp()) * (1.0 - (-b).exp()).powi(2));
    let second = pool * (-(t as f64) * c).exp() / (1.0 - (-c).exp());
    first + second
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceProbability {
    /// Iterations of `h ∘ g` that fit in the horizon.
    pub t: u64,
    pub probability: f64,
}

/// Lower bound on the probability that the predictor follows the optimal
/// forecaster at every step after `horizon`.
pub fn convergence_probability(
    params: &BoundParams,
    funcs: &GrowthFunctions,
    horizon: &BigUint,
) -> Result<ConvergenceProbability, BoundsError> {
    params.validate()?;
    let t = max_iterations_within(funcs, horizon)?;
    Ok(ConvergenceProbability {
        t,
        probability: clamp01(1.0 - failure_probability(params, t)),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepsBound {
    /// Smallest `t` whose failure probability is below `p`.
    pub t: u64,
    /// `(h ∘ g)^t(1)` or the overflow marker.
    pub steps: Growth,
}

/// Steps after which the predictor follows the optimal forecaster with
/// probability at least `1 - p`.
pub fn steps_for_probability(
    params: &BoundParams,
    funcs: &GrowthFunctions,
    p: f64,
    cap: &BigUint,
) -> Result<StepsBound, BoundsError> {
    params.validate()?;
    if !(p > 0.0 && p < 1.0) {
        return Err(BoundsError::BadProbability(p));
    }
    let t = smallest_t_below(params, p)?;
    Ok(StepsBound {
        t,
        steps: compose_hg(funcs, t, cap)?,
    })
}

fn smallest_t_below(params: &BoundParams, p: f64) -> Result<u64, BoundsError> {
    if failure_probability(params, 0) < p {
        return Ok(0);
    }
    let mut hi: u64 = 1;
    while failure_probability(params, hi) >= p {
        if hi >= 1 << 62 {
            return Err(BoundsError::Unreachable);
        }
        hi *= 2;
    }
    let mut lo = hi / 2; // failure(lo) >= p
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if failure_probability(params, mid) < p {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}
