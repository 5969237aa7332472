//! Loss functions with declared strong-convexity and Lipschitz constants, and
//! randomized validators that catch a misdeclared constant.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::model::{Alphabet, Outcome, Prediction};

/// Absolute slack allowed by the convexity and Lipschitz validators.
pub const VIOLATION_TOL: f64 = 1e-9;
/// Relative tolerance of the finite-difference gradient check.
pub const GRADIENT_REL_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("sample count must be at least 1")]
    NoSamples,
}

/// The convex prediction set a loss is declared on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PredictionDomain {
    /// `[0, 1]`, one coordinate.
    UnitInterval,
}

impl PredictionDomain {
    pub fn contains(&self, y: &Prediction) -> bool {
        match self {
            PredictionDomain::UnitInterval => {
                y.dim() == 1 && (0.0..=1.0).contains(&y.value())
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Prediction {
        match self {
            PredictionDomain::UnitInterval => Prediction::scalar(rng.gen::<f64>()),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            PredictionDomain::UnitInterval => 1,
        }
    }
}

/// A loss `ℒ(x, y)` with its declared constants.
#[derive(Clone)]
pub struct LossSpec {
    pub name: &'static str,
    /// Strong convexity constant.
    pub rho: f64,
    /// Lipschitz constant.
    pub kappa: f64,
    /// Upper bound of the loss on the domain.
    pub max_loss: f64,
    pub domain: PredictionDomain,
    pub alphabet: Alphabet,
    eval: fn(Outcome, &Prediction) -> f64,
    grad: fn(Outcome, &Prediction) -> Prediction,
}

impl std::fmt::Debug for LossSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LossSpec")
            .field("name", &self.name)
            .field("rho", &self.rho)
            .field("kappa", &self.kappa)
            .field("max_loss", &self.max_loss)
            .finish()
    }
}

fn squared_eval(x: Outcome, y: &Prediction) -> f64 {
    let d = x.indicator() - y.value();
    d * d
}

fn squared_grad(x: Outcome, y: &Prediction) -> Prediction {
    Prediction::scalar(2.0 * (y.value() - x.indicator()))
}

impl LossSpec {
    /// `ℒ(H, p) = (1-p)²`, `ℒ(T, p) = p²` on `[0, 1]`.
    pub fn squared_error() -> Self {
        LossSpec {
            name: "squared_error",
            rho: 2.0,
            kappa: 2.0,
            max_loss: 1.0,
            domain: PredictionDomain::UnitInterval,
            alphabet: Alphabet::binary(),
            eval: squared_eval,
            grad: squared_grad,
        }
    }

    /// Same loss, different declared constants. Used to exercise validators.
    pub fn with_constants(mut self, rho: f64, kappa: f64) -> Self {
        self.rho = rho;
        self.kappa = kappa;
        self
    }

    #[inline]
    pub fn eval(&self, x: Outcome, y: &Prediction) -> f64 {
        (self.eval)(x, y)
    }

    /// Gradient in the prediction argument.
    #[inline]
    pub fn grad(&self, x: Outcome, y: &Prediction) -> Prediction {
        (self.grad)(x, y)
    }

    fn sample_outcome<R: Rng + ?Sized>(&self, rng: &mut R) -> Outcome {
        let symbols = self.alphabet.symbols();
        symbols[rng.gen_range(0..symbols.len())]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidationReport {
    pub samples: usize,
    pub violations: usize,
    /// Smallest slack observed; negative when the inequality fails.
    pub worst_margin: f64,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

fn dot(a: &Prediction, b: &[f64]) -> f64 {
    a.coords().iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Checks `ℒ(x,y') >= ℒ(x,y) + ∇ℒ(x,y)·(y'-y) + (ρ/2)‖y'-y‖²` on random triples.
pub fn check_strong_convexity(
    spec: &LossSpec,
    samples: usize,
    seed: u64,
) -> Result<ValidationReport, LossError> {
    if samples == 0 {
        return Err(LossError::NoSamples);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = 0;
    let mut worst = f64::INFINITY;
    for _ in 0..samples {
        let x = spec.sample_outcome(&mut rng);
        let y = spec.domain.sample(&mut rng);
        let y2 = spec.domain.sample(&mut rng);
        let diff: Vec<f64> = y2
            .coords()
            .iter()
            .zip(y.coords())
            .map(|(a, b)| a - b)
            .collect();
        let sq: f64 = diff.iter().map(|d| d * d).sum();
        let rhs = spec.eval(x, &y) + dot(&spec.grad(x, &y), &diff) + 0.5 * spec.rho * sq;
        let margin = spec.eval(x, &y2) - rhs;
        worst = worst.min(margin);
        if margin < -VIOLATION_TOL {
            violations += 1;
        }
    }
    Ok(ValidationReport {
        samples,
        violations,
        worst_margin: worst,
    })
}

/// Checks `|ℒ(x,y) - ℒ(x,y')| <= κ‖y - y'‖` on random triples.
pub fn check_lipschitz(
    spec: &LossSpec,
    samples: usize,
    seed: u64,
) -> Result<ValidationReport, LossError> {
    if samples == 0 {
        return Err(LossError::NoSamples);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = 0;
    let mut worst = f64::INFINITY;
    for _ in 0..samples {
        let x = spec.sample_outcome(&mut rng);
        let y = spec.domain.sample(&mut rng);
        let y2 = spec.domain.sample(&mut rng);
        let margin = spec.kappa * y.distance(&y2) - (spec.eval(x, &y) - spec.eval(x, &y2)).abs();
        worst = worst.min(margin);
        if margin < -VIOLATION_TOL {
            violations += 1;
        }
    }
    Ok(ValidationReport {
        samples,
        violations,
        worst_margin: worst,
    })
}

/// Compares `grad` against central differences of `eval` at interior points.
/// Returns the number of coordinates exceeding [`GRADIENT_REL_TOL`].
pub fn check_gradient(spec: &LossSpec, samples: usize, seed: u64) -> Result<usize, LossError> {
    if samples == 0 {
        return Err(LossError::NoSamples);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-5;
    let mut bad = 0;
    for _ in 0..samples {
        let x = spec.sample_outcome(&mut rng);
        let y = spec.domain.sample(&mut rng);
        let g = spec.grad(x, &y);
        for d in 0..y.dim() {
            let mut up = y.coords().to_vec();
            let mut down = y.coords().to_vec();
            up[d] += h;
            down[d] -= h;
            let up = Prediction::new(&up).expect("finite");
            let down = Prediction::new(&down).expect("finite");
            let fd = (spec.eval(x, &up) - spec.eval(x, &down)) / (2.0 * h);
            let g_d = g.coords()[d];
            if (g_d - fd).abs() > GRADIENT_REL_TOL * g_d.abs().max(1.0) {
                bad += 1;
            }
        }
    }
    Ok(bad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn squared_error_values() {
        let l = LossSpec::squared_error();
        assert_eq!(l.eval(Outcome::HEADS, &Prediction::scalar(0.5)), 0.25);
        assert_eq!(l.eval(Outcome::TAILS, &Prediction::scalar(0.0)), 0.0);
        assert_eq!(l.eval(Outcome::TAILS, &Prediction::scalar(1.0)), 1.0);
        assert_eq!((l.rho, l.kappa, l.max_loss), (2.0, 2.0, 1.0));
    }

    #[test]
    fn declared_constants_validate() {
        let l = LossSpec::squared_error();
        let c = check_strong_convexity(&l, 10_000, 1).unwrap();
        assert_eq!(c.violations, 0, "{c:?}");
        let k = check_lipschitz(&l, 10_000, 2).unwrap();
        assert_eq!(k.violations, 0, "{k:?}");
        assert_eq!(check_gradient(&l, 1_000, 3).unwrap(), 0);
    }

    #[test]
    fn misdeclared_constants_are_caught() {
        let too_convex = LossSpec::squared_error().with_constants(10.0, 2.0);
        assert!(check_strong_convexity(&too_convex, 10_000, 4).unwrap().violations > 0);
        let too_flat = LossSpec::squared_error().with_constants(2.0, 0.5);
        assert!(check_lipschitz(&too_flat, 10_000, 5).unwrap().violations > 0);
    }

    #[test]
    fn zero_samples_rejected() {
        let l = LossSpec::squared_error();
        assert_eq!(check_strong_convexity(&l, 0, 0), Err(LossError::NoSamples));
        assert_eq!(check_lipschitz(&l, 0, 0), Err(LossError::NoSamples));
    }

    #[test]
    fn identical_points_have_zero_difference() {
        let l = LossSpec::squared_error();
        let y = Prediction::scalar(0.3);
        for x in [Outcome::HEADS, Outcome::TAILS] {
            assert!((l.eval(x, &y) - l.eval(x, &y)).abs() <= l.kappa * y.distance(&y));
        }
    }
}
