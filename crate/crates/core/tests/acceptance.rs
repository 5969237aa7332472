//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.

use std::path::Path;
use std::time::{Duration, Instant};

use num_bigint::BigUint;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use evop_core::bounds::{
    compose_hg, convergence_probability, steps_for_probability, verify_concentration, BoundParams,
    GeneratorSpec, Growth, GrowthFn, GrowthFunctions,
};
use evop_core::environments::{EnvSpec, RevealSchedule};
use evop_core::evop::test_seq;
use evop_core::forecasters::{ForecasterPool, ForecasterSpec, StepPredicate};
use evop_core::harness::{self, ExperimentConfig};
use evop_core::metrics::regret;
use evop_core::model::{is_independent, ObservationLog, Subsequence};

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

const S5: u64 = 11111;

fn psharp_pool_json(with_freq: bool) -> String {
    let mut members = vec![
        r#"{"kind": "constant", "p": 0.5, "name": "fstar"}"#,
        r#"{"kind": "constant", "p": 1.0, "name": "f1"}"#,
        r#"{"kind": "constant", "p": 0.0, "name": "f0"}"#,
    ];
    if with_freq {
        members.push(r#"{"kind": "empirical-frequency", "name": "freq"}"#);
    }
    format!("[{}]", members.join(","))
}

fn config(json: &str) -> ExperimentConfig {
    ExperimentConfig::from_json(json).expect("acceptance config parses")
}

fn criterion_1() -> Outcome {
    let cfg = config(&format!(
        r#"{{"scenario": "custom", "environment": {{"kind": "psharp", "base": 10}},
            "pool": {}, "horizon": {S5}, "seeds": {{"count": 1, "master_seed": 1}}}}"#,
        psharp_pool_json(false)
    ));
    let run = harness::simulate(&cfg, 0).expect("run");
    let loss = run.ledger.cumulative_loss(0, S5);
    check(
        run.steps() == S5 && (loss - 2777.75).abs() <= 1e-9,
        format!("f* cumulative loss at n = {S5}: {loss}"),
    )
}

fn criterion_2() -> Outcome {
    let cfg = config(&format!(
        r#"{{"scenario": "custom", "environment": {{"kind": "psharp", "base": 10, "coins": "TTTTH"}},
            "pool": {}, "horizon": {S5}}}"#,
        psharp_pool_json(false)
    ));
    let run = harness::simulate(&cfg, 0).expect("run");
    let r = regret(&run.ledger, 0, &[1], &Subsequence::contiguous(S5), S5 as usize).expect("regret");
    check(
        (r - 1666.75).abs() <= 1e-9 && r >= 0.15 * S5 as f64,
        format!("regret(f*) w.r.t. {{f1}} = {r}, 0.15 n = {}", 0.15 * S5 as f64),
    )
}

fn scenario(json: &str, out: &Path) -> harness::Report {
    let mut cfg = config(json);
    cfg.output_dir = Some(out.to_path_buf());
    harness::run(&cfg).expect("scenario runs")
}

fn criterion_3(out: &Path) -> Outcome {
    let report = scenario(
        &format!(
            r#"{{"scenario": "psharp-regret-swing", "environment": {{"kind": "psharp", "base": 10}},
                "pool": {}, "horizon": {S5}, "seeds": {{"count": 200, "master_seed": 3}},
                "checks": {{"target": "fstar", "competitors": ["f0", "f1"], "swing_ratio": 0.14, "from_block": 2}}}}"#,
            psharp_pool_json(false)
        ),
        out,
    );
    check(report.passed(), report.assertions[0].detail.clone())
}

fn criterion_4(out: &Path) -> Outcome {
    let report = scenario(
        &format!(
            r#"{{"scenario": "impossibility", "environment": {{"kind": "psharp", "base": 10}},
                "pool": {}, "horizon": {S5}, "seeds": {{"count": 200, "master_seed": 4}},
                "checks": {{"regret_threshold": 0.1, "success_fraction": 0.95, "from_block": 2}}}}"#,
            psharp_pool_json(false)
        ),
        out,
    );
    check(report.passed(), report.assertions[0].detail.clone())
}

fn criterion_5(out: &Path) -> Outcome {
    let report = scenario(
        &format!(
            r#"{{"scenario": "evop-convergence", "environment": {{"kind": "psharp", "base": 10}},
                "pool": {}, "horizon": 100000, "seeds": {{"count": 100, "master_seed": 5}},
                "checks": {{"target": "fstar", "tolerance": 1e-9, "success_fraction": 0.95}}}}"#,
            psharp_pool_json(true)
        ),
        out,
    );
    let median = report
        .lines
        .iter()
        .find(|l| l.starts_with("convergence_step"))
        .cloned()
        .unwrap_or_else(|| "convergence_step: never defined".into());
    check(report.passed(), format!("{}; {median}", report.assertions[0].detail))
}

fn criterion_6() -> Outcome {
    let lambdas = [1.0, 2.0, 5.0, 10.0];
    let main = verify_concentration(&GeneratorSpec::psharp_pair(), 100, 100_000, &lambdas, 6).expect("generator");
    let control =
        verify_concentration(&GeneratorSpec::PositiveDrift { v: 0.01, a: 2.0 }, 100, 100_000, &lambdas, 6).expect("control");
    let tails: Vec<String> = main
        .tails
        .iter()
        .map(|t| format!("λ={} {:.2e}<={:.2e}", t.lambda, t.empirical, t.bound))
        .collect();
    check(
        main.a == 2.0 && main.passed() && !control.passed(),
        format!(
            "a = {}; {}; negative control flagged: {}",
            main.a,
            tails.join(", "),
            !control.passed()
        ),
    )
}

fn random_pool(rng: &mut ChaCha8Rng) -> Vec<ForecasterSpec> {
    let size = rng.gen_range(1..=5);
    let mut candidates: Vec<ForecasterSpec> = [0.0, 0.25, 0.5, 0.75, 1.0]
        .iter()
        .map(|&p| ForecasterSpec::Constant { p, name: None })
        .collect();
    candidates.push(ForecasterSpec::EmpiricalFrequency {
        a: 1.0,
        b: 1.0,
        name: None,
    });
    candidates.push(ForecasterSpec::Abstaining {
        base: Box::new(ForecasterSpec::Constant { p: 0.9, name: None }),
        defined_on: StepPredicate::Periodic { period: 3, offset: 1 },
        name: None,
    });
    candidates.push(ForecasterSpec::Abstaining {
        base: Box::new(ForecasterSpec::EmpiricalFrequency {
            a: 2.0,
            b: 1.0,
            name: None,
        }),
        defined_on: StepPredicate::From { step: 50 },
        name: None,
    });
    candidates.shuffle(rng);
    let mut pool: Vec<ForecasterSpec> = candidates.into_iter().take(size).collect();
    if ForecasterPool::from_specs(&pool).is_err() {
        pool[0] = ForecasterSpec::Constant { p: 0.6, name: None };
    }
    pool
}

fn random_digits(rng: &mut ChaCha8Rng, n: usize) -> String {
    (0..n).map(|_| if rng.gen_bool(0.5) { '1' } else { '0' }).collect()
}

fn equivalence_env(idx: usize, rng: &mut ChaCha8Rng, dir: &Path) -> EnvSpec {
    match idx % 4 {
        0 => EnvSpec::Psharp {
            base: rng.gen_range(2..=4),
            bias: rng.gen_range(0.2..0.8),
            growth: Default::default(),
            horizon_cap: None,
            coins: None,
        },
        1 => EnvSpec::IidBernoulli {
            q: rng.gen_range(0.1..0.9),
            delay: evop_core::environments::DelaySpec::Power { exponent: 3.0 },
        },
        2 => {
            let path = dir.join(format!("seq_{idx}.txt"));
            std::fs::write(&path, random_digits(rng, 2000)).expect("write sequence");
            EnvSpec::Deterministic {
                path: path.to_string_lossy().into_owned(),
                schedule: RevealSchedule::Psharp { base: rng.gen_range(2..=3) },
                target_digit: None,
            }
        }
        _ => EnvSpec::Psharp {
            base: 2,
            bias: 0.5,
            growth: Default::default(),
            horizon_cap: None,
            coins: Some(random_digits(rng, 12)),
        },
    }
}

fn criterion_7(dir: &Path) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut identical = 0;
    let mut notes = Vec::new();
    for idx in 0..20 {
        let env = equivalence_env(idx, &mut rng, dir);
        let cfg = ExperimentConfig {
            scenario: harness::Scenario::Custom,
            environment: Some(env),
            pool: random_pool(&mut rng),
            evop: Default::default(),
            horizon: Some(2000),
            seeds: harness::SeedSettings {
                count: 1,
                master_seed: 700 + idx as u64,
            },
            output_dir: None,
            per_step: false,
            checks: Default::default(),
            bound: None,
            concentration: None,
        };
        match harness::compare_implementations(&cfg, 0).expect("comparison runs") {
            None => identical += 1,
            Some(n) => notes.push(format!("env {idx} differs at step {n}")),
        }
    }
    check(identical == 20, format!("{identical}/20 environments bit-identical through n = 2000 {}", notes.join("; ")))
}

fn criterion_8(out: &Path) -> Outcome {
    let cap = BigUint::from(10u64).pow(12);
    let params = BoundParams::psharp();
    let funcs = GrowthFunctions::psharp(10);
    let preset = steps_for_probability(&params, &funcs, 0.5, &cap).expect("preset");
    let overflows = preset.steps == Growth::Overflow(cap.clone());

    let mut monotone = true;
    let mut last = 0.0;
    let toy = GrowthFunctions::immediate();
    for e in 0..=40u32 {
        let horizon = BigUint::from(2u64).pow(e) * 3u32;
        let p = convergence_probability(&params, &toy, &horizon).expect("probability").probability;
        monotone &= p >= last;
        last = p;
    }

    let mut grid = Vec::new();
    for &(rho, kappa) in &[(2.0, 2.0), (1.0, 1.5)] {
        for &epsilon in &[0.25, 0.75] {
            for &m in &[3, 5] {
                for &g_add in &[1, 7] {
                    for &p in &[0.5, 0.1, 0.01] {
                        grid.push((rho, kappa, epsilon, m, g_add, p));
                    }
                }
            }
        }
    }
    grid.push((2.0, 2.0, 0.5, 3, 1, 0.9));
    grid.push((2.0, 2.0, 0.5, 3, 1, 1e-6));
    let mut round_trips = 0;
    for &(rho, kappa, epsilon, m, g_add, p) in &grid {
        let params = BoundParams::new(rho, kappa, epsilon, m, 1, 3).expect("params");
        let funcs = GrowthFunctions {
            h: GrowthFn::Affine { mul: 1, add: 1 },
            g: GrowthFn::Affine { mul: 1, add: g_add },
        };
        let r = steps_for_probability(&params, &funcs, p, &cap).expect("steps");
        if let Some(n) = r.steps.exact() {
            let q = convergence_probability(&params, &funcs, n).expect("probability");
            if q.probability >= 1.0 - p {
                round_trips += 1;
            }
        }
    }
    let grid = grid.len();
    assert_eq!(compose_hg(&toy, 0, &cap).expect("compose"), Growth::Exact(BigUint::from(1u32)));

    let report = scenario(
        r#"{"scenario": "bound-vs-empirical",
            "environment": {"kind": "iid-bernoulli", "q": 0.5, "delay": {"kind": "constant", "steps": 0}},
            "pool": [
                {"kind": "constant", "p": 1.0, "name": "f1"},
                {"kind": "constant", "p": 0.0, "name": "f0"},
                {"kind": "constant", "p": 0.5, "name": "fstar"}
            ],
            "horizon": 1500, "seeds": {"count": 20, "master_seed": 8},
            "checks": {"target": "fstar"},
            "bound": {"m": 3, "h": {"kind": "affine", "mul": 1, "add": 1}, "g": {"kind": "affine", "mul": 1, "add": 1}}}"#,
        out,
    );
    let n_theory = report.lines.iter().find(|l| l.starts_with("N_theory")).cloned().unwrap_or_default();
    let n_emp = report.lines.iter().find(|l| l.starts_with("N_emp")).cloned().unwrap_or_default();
    check(
        overflows && monotone && round_trips == 50 && report.passed(),
        format!(
            "P# p=0.5 -> {}; monotone in T: {monotone}; round trip {round_trips}/{grid}; {n_theory}, {n_emp}",
            preset.steps
        ),
    )
}

fn criterion_9(dir: &Path) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut calls = 0;
    let mut good = 0;
    let mut env_idx = 0;
    while calls < 10_000 {
        let env_spec = equivalence_env(env_idx, &mut rng, dir);
        env_idx += 1;
        let mut env = env_spec.build(rng.gen()).expect("env");
        let n = rng.gen_range(20..=300);
        let mut log = ObservationLog::new();
        for _ in 0..n {
            let Some(step) = env.step() else { break };
            log.append(step.observation).expect("consistent");
        }
        let pool = ForecasterPool::from_specs(&random_pool(&mut rng)).expect("pool");
        for _ in 0..20 {
            let i = rng.gen_range(1..=pool.len());
            let j = rng.gen_range(1..=pool.len());
            let m = rng.gen_range(1..=8);
            let seq = test_seq(&pool, i, j, m, &log);
            let interleaved = seq.elements.iter().all(|e| e.t < e.k)
                && seq.elements.windows(2).all(|w| w[0].k < w[1].t);
            let independent = is_independent(&Subsequence::new(seq.indices()).expect("increasing"), &log);
            if interleaved && independent {
                good += 1;
            }
            calls += 1;
        }
    }
    check(good == calls, format!("{good}/{calls} test sequences interleaved and independent"))
}

type Criterion = (&'static str, Duration, Box<dyn Fn() -> Outcome>);

fn main() {
    let work = tempfile::tempdir().expect("tempdir");
    let sub = |name: &str| {
        let p = work.path().join(name);
        std::fs::create_dir_all(&p).expect("mkdir");
        p
    };
    let criteria: Vec<Criterion> = vec![
        ("1 f* loss rate", Duration::from_secs(1), Box::new(criterion_1)),
        ("2 15% regret swing", Duration::from_secs(1), Box::new(criterion_2)),
        ("3 swing in every seed", Duration::from_secs(10), Box::new({
            let d = sub("c3");
            move || criterion_3(&d)
        })),
        ("4 consistency impossibility", Duration::from_secs(30), Box::new({
            let d = sub("c4");
            move || criterion_4(&d)
        })),
        ("5 convergence to f*", Duration::from_secs(600), Box::new({
            let d = sub("c5");
            move || criterion_5(&d)
        })),
        ("6 martingale tail bound", Duration::from_secs(30), Box::new(criterion_6)),
        ("7 naive = incremental", Duration::from_secs(60), Box::new({
            let d = sub("c7");
            move || criterion_7(&d)
        })),
        ("8 bound weakness and validity", Duration::from_secs(10), Box::new({
            let d = sub("c8");
            move || criterion_8(&d)
        })),
        ("9 independence invariant", Duration::from_secs(10), Box::new({
            let d = sub("c9");
            move || criterion_9(&d)
        })),
    ];
    // optional filters: criterion numbers to run
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, budget, run) in criteria {
        if !only.is_empty() && !only.iter().any(|o| name.split(' ').next() == Some(o.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = run();
        let elapsed = start.elapsed();
        let in_time = elapsed <= budget;
        let pass = outcome.pass && in_time;
        if !pass {
            failed += 1;
        }
        println!(
            "{} criterion {name}: {} [{:.2}s, budget {}s{}]",
            if pass { "PASS" } else { "FAIL" },
            outcome.detail,
            elapsed.as_secs_f64(),
            budget.as_secs(),
            if in_time { "" } else { ", over budget" }
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
