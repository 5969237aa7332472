//! Oracle-side loss accounting: regret, convergence detection and per-block
//! tables for the delayed-coin family.
//!
//! The ledger scores every prediction against the true outcome, whether or
//! not that outcome is ever revealed to forecasters.

use thiserror::Error;

use crate::environments::BlockLayout;
use crate::loss::LossSpec;
use crate::model::{Outcome, Prediction, Subsequence};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("no competitor is defined on the whole subsequence")]
    EmptyComparisonClass,
    #[error("series {0} is not defined on the whole subsequence")]
    NotDefined(String),
    #[error("subsequence has {len} elements, fewer than n = {n}")]
    TooShort { len: usize, n: usize },
    #[error("index {0} is beyond the recorded run")]
    BeyondRun(u64),
    #[error("unknown series {0}")]
    UnknownSeries(usize),
}

/// Predictions and losses of several named series over one run.
///
/// Series are addressed by their 0-based position in `names`.
#[derive(Debug, Clone)]
pub struct RunLedger {
    names: Vec<String>,
    preds: Vec<Vec<Option<Prediction>>>,
    losses: Vec<Vec<Option<f64>>>,
    // cumulative loss / undefined count through step k, entry 0 = empty prefix
    cum_loss: Vec<Vec<f64>>,
    cum_undefined: Vec<Vec<u64>>,
    truth: Vec<Outcome>,
}

impl RunLedger {
    pub fn new(names: Vec<String>) -> Self {
        let s = names.len();
        RunLedger {
            names,
            preds: vec![Vec::new(); s],
            losses: vec![Vec::new(); s],
            cum_loss: vec![vec![0.0]; s],
            cum_undefined: vec![vec![0]; s],
            truth: Vec::new(),
        }
    }

    /// Records step `len() + 1`; `preds` is in series order.
    pub fn record(&mut self, truth: Outcome, preds: &[Option<Prediction>], loss: &LossSpec) {
        assert_eq!(preds.len(), self.names.len(), "one prediction slot per series");
        self.truth.push(truth);
        for (s, p) in preds.iter().enumerate() {
            let l = p.as_ref().map(|y| loss.eval(truth, y));
            let last_loss = *self.cum_loss[s].last().expect("seeded");
            let last_undef = *self.cum_undefined[s].last().expect("seeded");
            self.cum_loss[s].push(last_loss + l.unwrap_or(0.0));
            self.cum_undefined[s].push(last_undef + l.is_none() as u64);
            self.losses[s].push(l);
            self.preds[s].push(p.clone());
        }
    }

    pub fn len(&self) -> u64 {
        self.truth.len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.truth.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn series(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn truth(&self, n: u64) -> Option<Outcome> {
        n.checked_sub(1).and_then(|i| self.truth.get(i as usize)).copied()
    }

    pub fn prediction(&self, series: usize, n: u64) -> Option<&Prediction> {
        self.preds[series].get((n - 1) as usize)?.as_ref()
    }

    pub fn predictions(&self, series: usize) -> &[Option<Prediction>] {
        &self.preds[series]
    }

    pub fn loss(&self, series: usize, n: u64) -> Option<f64> {
        *self.losses[series].get((n - 1) as usize)?
    }

    /// Loss through step `n`, counting only steps where the series predicted.
    pub fn cumulative_loss(&self, series: usize, n: u64) -> f64 {
        self.cum_loss[series][n as usize]
    }

    fn check_series(&self, s: usize) -> Result<(), MetricsError> {
        if s >= self.names.len() {
            return Err(MetricsError::UnknownSeries(s));
        }
        Ok(())
    }

    /// Total loss of `series` on `indices`, or `None` if it abstains on one.
    fn loss_on(&self, series: usize, indices: &[u64]) -> Result<Option<f64>, MetricsError> {
        let Some(&last) = indices.last() else {
            return Ok(Some(0.0));
        };
        if last > self.len() {
            return Err(MetricsError::BeyondRun(last));
        }
        let contiguous = indices[0] == 1 && last == indices.len() as u64;
        if contiguous {
            if self.cum_undefined[series][last as usize] > 0 {
                return Ok(None);
            }
            return Ok(Some(self.cum_loss[series][last as usize]));
        }
        let mut total = 0.0;
        for &t in indices {
            match self.losses[series][(t - 1) as usize] {
                Some(l) => total += l,
                None => return Ok(None),
            }
        }
        Ok(Some(total))
    }
}

/// Loss of `f` on `s_1..s_n` minus the smallest loss among `competitors`
/// defined on all of those indices.
pub fn regret(
    ledger: &RunLedger,
    f: usize,
    competitors: &[usize],
    s: &Subsequence,
    n: usize,
) -> Result<f64, MetricsError> {
    ledger.check_series(f)?;
    if n > s.len() {
        return Err(MetricsError::TooShort { len: s.len(), n });
    }
    let indices = &s.indices()[..n];
    let own = ledger
        .loss_on(f, indices)?
        .ok_or_else(|| MetricsError::NotDefined(ledger.names[f].clone()))?;
    let mut best: Option<f64> = None;
    for &c in competitors {
        ledger.check_series(c)?;
        if let Some(l) = ledger.loss_on(c, indices)? {
            best = Some(best.map_or(l, |b: f64| b.min(l)));
        }
    }
    best.map(|b| own - b).ok_or(MetricsError::EmptyComparisonClass)
}

/// `regret / n`.
pub fn average_regret(
    ledger: &RunLedger,
    f: usize,
    competitors: &[usize],
    s: &Subsequence,
    n: usize,
) -> Result<f64, MetricsError> {
    Ok(regret(ledger, f, competitors, s, n)? / n as f64)
}

/// Smallest `N` such that every recorded step `n >= N` has
/// `‖evop_n - target_n‖ <= tol`. Steps where either stream is absent are not
/// recorded. `None` if the last recorded step is still off.
pub fn convergence_step(
    evop: &[Option<Prediction>],
    target: &[Option<Prediction>],
    tol: f64,
) -> Option<u64> {
    assert_eq!(evop.len(), target.len(), "streams must be aligned");
    let mut last_bad: Option<usize> = None;
    let mut last_recorded: Option<usize> = None;
    for (idx, (a, b)) in evop.iter().zip(target).enumerate() {
        if let (Some(a), Some(b)) = (a, b) {
            last_recorded = Some(idx);
            if a.distance(b) > tol {
                last_bad = Some(idx);
            }
        }
    }
    match (last_bad, last_recorded) {
        (Some(bad), Some(rec)) if bad == rec => None,
        (Some(bad), _) => Some(bad as u64 + 2),
        (None, _) => Some(1),
    }
}

/// One row of a per-block table.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockRow {
    pub block: u64,
    pub start: u64,
    pub end: u64,
    /// False when the run stopped inside the block.
    pub complete: bool,
    pub coin: Outcome,
    /// Loss accumulated inside the block, per series.
    pub block_loss: Vec<f64>,
    /// Regret through the block end w.r.t. `competitors` minus the series
    /// itself; `None` when undefined.
    pub regret: Vec<Option<f64>>,
}

/// Per-block losses and block-end regrets of a delayed-coin run.
pub fn block_report(ledger: &RunLedger, layout: BlockLayout, competitors: &[usize]) -> Vec<BlockRow> {
    let mut rows = Vec::new();
    let total = ledger.len();
    let mut start = 1u64;
    let mut k = 1u64;
    while start <= total {
        let full_end = layout
            .length(k)
            .and_then(|l| (start - 1).checked_add(l))
            .unwrap_or(u64::MAX);
        let end = full_end.min(total);
        let prefix = Subsequence::contiguous(end);
        let series = ledger.names().len();
        let block_loss = (0..series)
            .map(|s| ledger.cumulative_loss(s, end) - ledger.cumulative_loss(s, start - 1))
            .collect();
        let regrets = (0..series)
            .map(|s| {
                let others: Vec<usize> = competitors.iter().copied().filter(|&c| c != s).collect();
                regret(ledger, s, &others, &prefix, end as usize).ok()
            })
            .collect();
        rows.push(BlockRow {
            block: k,
            start,
            end,
            complete: end == full_end,
            coin: ledger.truth(start).expect("recorded"),
            block_loss,
            regret: regrets,
        });
        start = end + 1;
        k += 1;
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ledger(truth: &[Outcome], series: &[&[Option<f64>]]) -> RunLedger {
        let mut l = RunLedger::new((0..series.len()).map(|s| format!("s{s}")).collect());
        let loss = LossSpec::squared_error();
        for (n, &x) in truth.iter().enumerate() {
            let preds: Vec<Option<Prediction>> =
                series.iter().map(|s| s[n].map(Prediction::scalar)).collect();
            l.record(x, &preds, &loss);
        }
        l
    }

    const H: Outcome = Outcome::HEADS;
    const T: Outcome = Outcome::TAILS;

    #[test]
    fn self_comparison_is_zero() {
        let l = ledger(&[H, T, H], &[&[Some(0.3), Some(0.6), Some(0.2)]]);
        let s = Subsequence::contiguous(3);
        assert_eq!(regret(&l, 0, &[0], &s, 3).unwrap(), 0.0);
    }

    #[test]
    fn best_series_has_nonpositive_regret() {
        let l = ledger(
            &[H, H, T],
            &[&[Some(1.0), Some(1.0), Some(0.0)], &[Some(0.5), Some(0.5), Some(0.5)]],
        );
        let s = Subsequence::contiguous(3);
        assert!(regret(&l, 0, &[1], &s, 3).unwrap() <= 0.0);
        assert_eq!(regret(&l, 1, &[0], &s, 3).unwrap(), 0.75);
        assert_eq!(average_regret(&l, 1, &[0], &s, 3).unwrap(), 0.25);
        // antisymmetry of pairwise regret
        let r01 = regret(&l, 0, &[1], &s, 2).unwrap();
        let r10 = regret(&l, 1, &[0], &s, 2).unwrap();
        assert_eq!(r01, -r10);
    }

    #[test]
    fn competitors_must_be_defined() {
        let l = ledger(
            &[H, T],
            &[&[Some(0.5), Some(0.5)], &[None, Some(1.0)]],
        );
        let all = Subsequence::contiguous(2);
        assert_eq!(regret(&l, 0, &[1], &all, 2), Err(MetricsError::EmptyComparisonClass));
        let tail = Subsequence::new(vec![2]).unwrap();
        assert_eq!(regret(&l, 0, &[1], &tail, 1).unwrap(), 0.25 - 1.0);
        assert!(matches!(regret(&l, 1, &[0], &all, 2), Err(MetricsError::NotDefined(_))));
        assert!(matches!(regret(&l, 0, &[1], &all, 3), Err(MetricsError::TooShort { .. })));
    }

    #[test]
    fn convergence_step_cases() {
        let a: Vec<Option<Prediction>> = (0..50).map(|_| Some(Prediction::scalar(0.5))).collect();
        assert_eq!(convergence_step(&a, &a, 1e-9), Some(1));
        let b: Vec<Option<Prediction>> = (1..=50)
            .map(|n| Some(Prediction::scalar(if n <= 37 { 1.0 } else { 0.5 })))
            .collect();
        assert_eq!(convergence_step(&b, &a, 1e-9), Some(38));
        let c: Vec<Option<Prediction>> = (1..=50)
            .map(|n| Some(Prediction::scalar(if n == 50 { 1.0 } else { 0.5 })))
            .collect();
        assert_eq!(convergence_step(&c, &a, 1e-9), None);
    }

    #[test]
    fn block_table_for_fixed_coins() {
        // base 2: blocks of 1, 2, 4 steps with coins H, T, H
        let truth = [H, T, T, H, H, H, H];
        let fstar = [Some(0.5); 7];
        let gambler = [Some(1.0); 7];
        let l = ledger(&truth, &[&fstar, &gambler]);
        let rows = block_report(&l, BlockLayout::new(2, crate::environments::BlockGrowth::Exponential), &[0, 1]);
        assert_eq!(rows.len(), 3);
        assert_eq!((rows[2].start, rows[2].end), (4, 7));
        assert_eq!(rows[1].block_loss, vec![0.5, 2.0]);
        assert_eq!(rows[2].block_loss, vec![1.0, 0.0]);
        assert_eq!(rows[2].regret[0], Some(1.75 - 2.0));
        assert!(rows.iter().all(|r| r.complete));
    }
}
