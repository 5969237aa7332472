//! Forecasters: partial maps from an observation-log prefix to a prediction.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{LogView, Prediction};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PoolError {
    #[error("forecaster pool is empty")]
    Empty,
    #[error("no pool member is defined everywhere")]
    NoTotalMember,
    #[error("duplicate forecaster name {0:?}")]
    DuplicateName(String),
    #[error("invalid forecaster parameters: {0}")]
    InvalidParams(String),
}

/// A (possibly partial) predictor of `x_n` from `ō_n`.
///
/// `predict` must be a pure function of the view.
pub trait Forecaster: Send + Sync {
    fn name(&self) -> String;
    fn predict(&self, log: &LogView<'_>) -> Option<Prediction>;
    /// True when the forecaster never abstains.
    fn is_total(&self) -> bool;
}

/// Always predicts the same point.
#[derive(Debug, Clone)]
pub struct Constant {
    value: Prediction,
}

pub fn constant(p: f64) -> Constant {
    Constant {
        value: Prediction::scalar(p),
    }
}

impl Forecaster for Constant {
    fn name(&self) -> String {
        match self.value.dim() {
            1 => format!("const{:?}", self.value.value()),
            _ => format!("const{:?}", self.value),
        }
    }

    fn predict(&self, _log: &LogView<'_>) -> Option<Prediction> {
        Some(self.value.clone())
    }

    fn is_total(&self) -> bool {
        true
    }
}

/// Laplace-style frequency of heads among all revealed outcomes:
/// `(heads + a) / (revealed + a + b)`.
#[derive(Debug, Clone)]
pub struct EmpiricalFrequency {
    a: f64,
    b: f64,
}

pub fn empirical_frequency(a: f64, b: f64) -> Result<EmpiricalFrequency, PoolError> {
    if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) {
        return Err(PoolError::InvalidParams(format!(
            "pseudocounts must be positive, got ({a}, {b})"
        )));
    }
    Ok(EmpiricalFrequency { a, b })
}

impl Forecaster for EmpiricalFrequency {
    fn name(&self) -> String {
        format!("freq{}_{}", self.a, self.b)
    }

    fn predict(&self, log: &LogView<'_>) -> Option<Prediction> {
        let heads = log.heads_count() as f64;
        let seen = log.revealed_count() as f64;
        Some(Prediction::scalar((heads + self.a) / (seen + self.a + self.b)))
    }

    fn is_total(&self) -> bool {
        true
    }
}

/// Which step indices a forecaster is defined on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum StepPredicate {
    Always,
    Never,
    /// `n ≡ offset (mod period)`
    Periodic { period: u64, offset: u64 },
    /// `n >= step`
    From { step: u64 },
    /// `n <= step`
    Until { step: u64 },
}

impl StepPredicate {
    pub fn accepts(&self, n: u64) -> bool {
        match *self {
            StepPredicate::Always => true,
            StepPredicate::Never => false,
            StepPredicate::Periodic { period, offset } => period > 0 && n % period == offset % period,
            StepPredicate::From { step } => n >= step,
            StepPredicate::Until { step } => n <= step,
        }
    }
}

/// Delegates to `base` on accepted steps and abstains elsewhere.
pub struct Abstaining {
    base: Box<dyn Forecaster>,
    defined_on: StepPredicate,
}

pub fn abstaining(base: Box<dyn Forecaster>, defined_on: StepPredicate) -> Abstaining {
    Abstaining { base, defined_on }
}

impl Forecaster for Abstaining {
    fn name(&self) -> String {
        format!("{}@{:?}", self.base.name(), self.defined_on)
    }

    fn predict(&self, log: &LogView<'_>) -> Option<Prediction> {
        if self.defined_on.accepts(log.len()) {
            self.base.predict(log)
        } else {
            None
        }
    }

    fn is_total(&self) -> bool {
        self.base.is_total() && self.defined_on == StepPredicate::Always
    }
}

/// Declarative forecaster, as written in experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum ForecasterSpec {
    Constant {
        p: f64,
        #[serde(default)]
        name: Option<String>,
    },
    EmpiricalFrequency {
        #[serde(default = "one")]
        a: f64,
        #[serde(default = "one")]
        b: f64,
        #[serde(default)]
        name: Option<String>,
    },
    Abstaining {
        base: Box<ForecasterSpec>,
        defined_on: StepPredicate,
        #[serde(default)]
        name: Option<String>,
    },
}

fn one() -> f64 {
    1.0
}

struct Named {
    name: String,
    inner: Box<dyn Forecaster>,
}

impl Forecaster for Named {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn predict(&self, log: &LogView<'_>) -> Option<Prediction> {
        self.inner.predict(log)
    }

    fn is_total(&self) -> bool {
        self.inner.is_total()
    }
}

impl ForecasterSpec {
    pub fn build(&self) -> Result<Box<dyn Forecaster>, PoolError> {
        let (inner, name): (Box<dyn Forecaster>, &Option<String>) = match self {
            ForecasterSpec::Constant { p, name } => {
                if !(0.0..=1.0).contains(p) {
                    return Err(PoolError::InvalidParams(format!("constant {p} outside [0, 1]")));
                }
                (Box::new(constant(*p)), name)
            }
            ForecasterSpec::EmpiricalFrequency { a, b, name } => {
                (Box::new(empirical_frequency(*a, *b)?), name)
            }
            ForecasterSpec::Abstaining {
                base,
                defined_on,
                name,
            } => (Box::new(abstaining(base.build()?, *defined_on)), name),
        };
        Ok(match name {
            Some(name) => Box::new(Named {
                name: name.clone(),
                inner,
            }),
            None => inner,
        })
    }
}

/// A finite enumeration `f_1, …, f_P`. Indices are 1-based.
pub struct ForecasterPool {
    members: Vec<Box<dyn Forecaster>>,
    names: Vec<String>,
}

impl fmt::Debug for ForecasterPool {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_tuple("ForecasterPool").field(&self.names).finish()
    }
}

impl ForecasterPool {
    pub fn new(members: Vec<Box<dyn Forecaster>>) -> Result<Self, PoolError> {
        if members.is_empty() {
            return Err(PoolError::Empty);
        }
        if !members.iter().any(|m| m.is_total()) {
            return Err(PoolError::NoTotalMember);
        }
        let names: Vec<String> = members.iter().map(|m| m.name()).collect();
        let mut seen = HashSet::new();
        for n in &names {
            if !seen.insert(n) {
                return Err(PoolError::DuplicateName(n.clone()));
            }
        }
        Ok(ForecasterPool { members, names })
    }

    pub fn from_specs(specs: &[ForecasterSpec]) -> Result<Self, PoolError> {
        Self::new(specs.iter().map(|s| s.build()).collect::<Result<_, _>>()?)
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// `f_i`, 1-based.
    pub fn get(&self, i: usize) -> &dyn Forecaster {
        self.members[i - 1].as_ref()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// 1-based index of the member with this name.
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name).map(|i| i + 1)
    }

    /// Predictions of every member on one prefix, in pool order.
    pub fn predict_all(&self, log: &LogView<'_>) -> Vec<Option<Prediction>> {
        self.members.iter().map(|m| m.predict(log)).collect()
    }
}
