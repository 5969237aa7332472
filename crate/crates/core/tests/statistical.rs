//! Seeded statistical checks of the selector's score dynamics.

use evop_core::bounds::{score_cap, BoundParams};
use evop_core::environments::EnvSpec;
use evop_core::evop::{EvopConfig, EvopState};
use evop_core::forecasters::{ForecasterPool, ForecasterSpec};
use evop_core::harness::{self, derive_seed, ExperimentConfig};
use evop_core::loss::LossSpec;
use evop_core::metrics::average_regret;
use evop_core::model::Subsequence;

fn pool(json: &str) -> ForecasterPool {
    let specs: Vec<ForecasterSpec> = serde_json::from_str(json).unwrap();
    ForecasterPool::from_specs(&specs).unwrap()
}

/// Runs the selector on `env` and records `MaxScore(i)` after every step.
fn score_trace(env: &EnvSpec, pool_json: &str, seed: u64, steps: u64, i: usize) -> Vec<f64> {
    let mut env = env.build(seed).unwrap();
    let config = EvopConfig::new(0.5, LossSpec::squared_error(), pool(pool_json)).unwrap();
    let mut state = EvopState::new(config);
    let mut trace = Vec::with_capacity(steps as usize);
    for _ in 0..steps {
        let step = env.step().expect("environment keeps producing");
        let decision = state.observe(step.observation).unwrap();
        trace.push(decision.max_scores[i - 1].value);
    }
    trace
}

const GAMBLERS_FIRST: &str = r#"[
    {"kind": "constant", "p": 1.0},
    {"kind": "constant", "p": 0.0},
    {"kind": "constant", "p": 0.5}
]"#;

#[test]
fn optimal_score_stays_below_tail_cap_on_delayed_coins() {
    let seeds = 200;
    let mut params = BoundParams::psharp();
    params.z = 3;
    let cap = score_cap(&params, 0.05).unwrap();
    let env = EnvSpec::Psharp {
        base: 10,
        bias: 0.5,
        growth: Default::default(),
        horizon_cap: None,
        coins: None,
    };
    let mut below = 0;
    for s in 0..seeds {
        let trace = score_trace(&env, GAMBLERS_FIRST, derive_seed(11, s), 100_000, 3);
        let peak = trace.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(peak >= 2.0, "score below its baseline: {peak}");
        if peak < cap {
            below += 1;
        }
    }
    assert!(below as f64 >= 0.95 * seeds as f64, "{below}/{seeds} below {cap}");
}

#[test]
fn gambler_score_grows_under_immediate_feedback() {
    let seeds = 50;
    let env = EnvSpec::IidBernoulli {
        q: 0.5,
        delay: evop_core::environments::DelaySpec::Constant { steps: 0 },
    };
    let checkpoints = [250u64, 500, 1000, 2000];
    let mut increasing = 0;
    for s in 0..seeds {
        let trace = score_trace(&env, GAMBLERS_FIRST, derive_seed(12, s), 2000, 1);
        let values: Vec<f64> = checkpoints.iter().map(|&n| trace[(n - 1) as usize]).collect();
        if values.windows(2).all(|w| w[1] > w[0]) {
            increasing += 1;
        }
    }
    assert!(increasing as f64 >= 0.95 * seeds as f64, "{increasing}/{seeds}");
}

#[test]
fn average_regret_vanishes_under_immediate_feedback() {
    let cfg = ExperimentConfig::from_json(
        r#"{"scenario": "custom",
            "environment": {"kind": "iid-bernoulli", "q": 0.7, "delay": {"kind": "constant", "steps": 0}},
            "pool": [
                {"kind": "constant", "p": 1.0, "name": "f1"},
                {"kind": "constant", "p": 0.0, "name": "f0"},
                {"kind": "constant", "p": 0.7, "name": "fstar"}
            ],
            "horizon": 4000, "seeds": {"count": 20, "master_seed": 5}}"#,
    )
    .unwrap();
    let competitors = [0, 1, 2];
    for index in 0..cfg.seeds.count {
        let run = harness::simulate(&cfg, index).unwrap();
        let evop = run.evop_series();
        let early = average_regret(&run.ledger, evop, &competitors, &Subsequence::contiguous(500), 500).unwrap();
        let late = average_regret(&run.ledger, evop, &competitors, &Subsequence::contiguous(4000), 4000).unwrap();
        assert!(late < 0.02, "seed {index}: average regret {late} at n = 4000");
        assert!(late <= early.max(0.0) + 0.01, "seed {index}: {early} then {late}");
    }
}
