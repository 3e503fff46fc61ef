//! End-to-end acceptance checks. Prints one `[PASS]` or `[FAIL]` line per
//! criterion and exits non-zero if any criterion fails.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;
use webnav::agent::network::param_count;
use webnav::agent::{Ablation, LearnedPolicy, PolicyParams, Vocabulary};
use webnav::dom::RefMode;
use webnav::env::{self, oracle_policy, TaskName, WORDS};
use webnav::eval::*;
use webnav::pipeline::*;
use webnav::planner::translate_utterance;
use webnav::trainer::*;

const ORACLE_BUDGET: Duration = Duration::from_secs(30);
const BC_BUDGET: Duration = Duration::from_secs(300);
const ATTACK_BUDGET: Duration = Duration::from_secs(600);
const CE_TOLERANCE: f64 = 1e-4;
const VMPO_TOLERANCE: f64 = 1e-3;
const PSI_TOLERANCE: f64 = 1e-6;
const RETURNS_TOLERANCE: f64 = 1e-12;
const BC_MIN_ACCURACY: f64 = 0.90;
const RL_MAX_DROP: f64 = 0.10;
const BASELINE_MIN_DROP: f64 = 0.10;
const POLICY_MAX_DROP: f64 = 0.05;
const NO_VISION_BAND: f64 = 0.03;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn demos(tasks: &[TaskName], per_task: usize, seed: u64, mode: RefMode) -> Vec<ProcessedEpisode> {
    generate_demonstrations(tasks, per_task, seed, mode, NoiseProfile::None)
        .unwrap()
        .iter()
        .map(clean_actions)
        .collect()
}

fn oracle_solves_everything() -> Outcome {
    let start = Instant::now();
    let mut failures = 0;
    for task in TaskName::ALL {
        for seed in 0..100 {
            let (mut s, _) = env::reset(task, seed, RefMode::Ordered).map_err(|e| e.to_string())?;
            while !s.terminated {
                let a = oracle_policy(&s);
                s.step(&a).map_err(|e| e.to_string())?;
            }
            failures += usize::from(s.raw_reward != 1.0);
        }
    }
    let took = start.elapsed();
    check(
        failures == 0 && took < ORACLE_BUDGET,
        format!("800 episodes, {failures} failures, {took:.2?} (budget {ORACLE_BUDGET:?})"),
    )
}

fn pipeline_matches_brute_force() -> Outcome {
    let mut mismatches = 0;
    for seed in 0..1000 {
        let raw = random_stream(seed, 30);
        let got = clean_actions(&raw);
        let want = brute_clean(&raw);
        let same = got.steps.len() == want.len()
            && got
                .steps
                .iter()
                .zip(&want)
                .all(|(s, (i, a))| &s.action == a && s.snapshot == raw.snapshots[*i]);
        mismatches += usize::from(!same);
    }
    let ep = |task: &str, i: usize| ProcessedEpisode {
        id: format!("{task}-{i}"),
        task: task.into(),
        utterance: String::new(),
        steps: vec![],
    };
    let mut data: Vec<ProcessedEpisode> = (0..400).map(|i| ep("a", i)).collect();
    data.extend((0..151).map(|i| ep("b", i)));
    data.extend((0..20).map(|i| ep("c", i)));
    let stats = dataset_stats(&downsample(data, 150, 0).map_err(|e| e.to_string())?);
    let caps = stats.per_task_counts.values().copied().collect::<Vec<_>>();
    check(
        mismatches == 0 && caps == [150, 150, 20],
        format!("{mismatches}/1000 stream mismatches; per-task counts after cap {caps:?}"),
    )
}

fn plans_reproduce() -> Outcome {
    let flight = r#"{"Departure City":"Philadelphia","Destination City":"Charlotte","Ticket Type":"Return flight","Departure Day":4,"Returning Day":26,"Passengers":2}"#;
    let a = translate_utterance("book-flight-simplified", flight).map_err(|e| e.to_string())?.to_line();
    let b = translate_utterance("click-collapsible", "Expand the section below and click submit.")
        .map_err(|e| e.to_string())?
        .to_line();
    check(
        a == "Select Departure City Philadelphia; Select Destination City Charlotte; Select the Departure Day to 4;"
            && b == "Expand the section below; click submit;",
        format!("`{a}` / `{b}`"),
    )
}

fn gradients_match() -> Outcome {
    let ce = (0..20).map(ce_fd_worst).fold(0.0, f64::max);
    let vmpo = (0..20).map(|s| vmpo_fd_worst(s, 16)).fold(0.0, f64::max);
    check(
        ce < CE_TOLERANCE && vmpo < VMPO_TOLERANCE,
        format!("worst relative error: ce {ce:.2e} (< {CE_TOLERANCE:e}), vmpo {vmpo:.2e} (< {VMPO_TOLERANCE:e}), 20 instances each"),
    )
}

fn vmpo_mechanics() -> Outcome {
    let mut worst_psi: f64 = 0.0;
    let mut bad_selection = 0;
    for seed in 0..50 {
        let (params, target, batch) = random_vmpo_batch(seed, 5 + seed as usize);
        let cfg = RlConfig::default();
        let (diag, _) =
            vmpo_loss(&params, &target, &batch, cfg.vmpo_eta, cfg.vmpo_alpha, None).map_err(|e| e.to_string())?;
        worst_psi = worst_psi.max((diag.psi_weights.iter().sum::<f64>() - 1.0).abs());
        bad_selection += usize::from(diag.selected.len() != batch.len().div_ceil(2));
    }
    let (mut params, _, batch) = random_vmpo_batch(99, 8);
    let cfg = RlConfig::default();
    let mut state = VmpoState::new(&params, &cfg);
    for _ in 0..20 {
        vmpo_update(&mut params, &mut state, &batch, &cfg).map_err(|e| e.to_string())?;
    }
    let mut worst_ret: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for len in 0..40 {
        let rewards: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        for (a, b) in compute_returns(&rewards, cfg.gamma).iter().zip(brute_returns(&rewards, 0.9)) {
            worst_ret = worst_ret.max((a - b).abs());
        }
    }
    check(
        worst_psi <= PSI_TOLERANCE
            && bad_selection == 0
            && state.target_syncs == [5, 10, 15, 20]
            && cfg.target_update_period == 5
            && worst_ret <= RETURNS_TOLERANCE,
        format!(
            "psi sum error {worst_psi:.1e}, {bad_selection} bad selections, syncs at {:?}, returns error {worst_ret:.1e} (gamma {})",
            state.target_syncs, cfg.gamma
        ),
    )
}

fn learning_at_desk_scale() -> Outcome {
    let start = Instant::now();
    let tasks = [TaskName::ClickButton, TaskName::EnterText];
    let data = demos(&tasks, 100, 1, RefMode::Ordered);
    let vocab = build_vocabulary(&data);
    let (examples, _) = build_examples(&data, &vocab, Ablation::None).map_err(|e| e.to_string())?;
    let cfg = RlConfig::default();
    let mut params = PolicyParams::init(0);
    let mut adam = AdamState::new(param_count());
    train_bc(&mut params, &mut adam, &examples, 300, &cfg, 0).map_err(|e| e.to_string())?;
    let policy = LearnedPolicy::new(params.clone(), vocab.clone(), "bc");
    let bc = evaluate_accuracy(&policy, &tasks, 100, 1000, RefMode::Ordered, Ablation::None).map_err(|e| e.to_string())?;
    let bc_time = start.elapsed();
    let cb_before = bc.per_task_accuracy["click-button"];
    let et = bc.per_task_accuracy["enter-text"];

    let eval = EvalSpec {
        tasks: vec![TaskName::ClickButton],
        episodes_per_task: 100,
        seed: 1000,
        ref_mode: RefMode::Ordered,
    };
    let schedule = [PhaseSpec {
        offline_steps: 0,
        online_episodes: 400,
    }];
    let rl = run_alternating(&mut params, &vocab, &[TaskName::ClickButton], RefMode::Ordered, &data, &cfg, &schedule, &eval)
        .map_err(|e| e.to_string())?;
    let cb_after = rl.phases[0].eval_accuracy;
    let drop = cb_before - cb_after;
    check(
        cb_before >= BC_MIN_ACCURACY && et >= BC_MIN_ACCURACY && bc_time < BC_BUDGET && drop <= RL_MAX_DROP,
        format!(
            "BC click-button {:.1}%, enter-text {:.1}% in {bc_time:.1?}; after {} V-MPO updates click-button {:.1}% (drop {:+.1} points)",
            100.0 * cb_before,
            100.0 * et,
            rl.vmpo.updates,
            100.0 * cb_after,
            100.0 * drop
        ),
    )
}

fn attack_direction() -> Outcome {
    let start = Instant::now();
    let suite = AttackConfig::suite();
    let cfg = AttackConfig {
        tasks: suite.clone(),
        episodes_per_task: 100,
        eval_seed: 2000,
        bc_steps: 300,
        train: RlConfig::default(),
    };
    let reports = run_ref_attack(
        &demos(&suite, 100, 5, RefMode::Ordered),
        &demos(&suite, 100, 5, RefMode::Randomized),
        &cfg,
    )
    .map_err(|e| e.to_string())?;
    let took = start.elapsed();
    let find = |policy: &str, mode| {
        reports
            .iter()
            .find(|r| r.policy.starts_with(policy) && r.trained_on == mode)
            .expect("four reports")
    };
    let baseline = find("baseline", RefMode::Ordered);
    let policy = find("policy", RefMode::Randomized);
    check(
        baseline.drop >= BASELINE_MIN_DROP && policy.drop < POLICY_MAX_DROP && took < ATTACK_BUDGET,
        format!(
            "baseline(ordered) {:.1}% -> {:.1}% (drop {:.1}); policy(randomized) {:.1}% -> {:.1}% (drop {:.1}); {took:.1?}",
            100.0 * baseline.accuracy_ordered_test,
            100.0 * baseline.accuracy_randomized_test,
            100.0 * baseline.drop,
            100.0 * policy.accuracy_ordered_test,
            100.0 * policy.accuracy_randomized_test,
            100.0 * policy.drop
        ),
    )
}

fn ablation_harness() -> Outcome {
    let vocab = Vocabulary::build(WORDS.iter().copied());
    let mut leaks = 0;
    let mut decisions = 0;
    for task in TaskName::ALL {
        for seed in 0..10 {
            let (l, d) = ablation_leaks(task, seed, &vocab);
            leaks += l;
            decisions += d;
        }
    }
    let suite = AttackConfig::suite();
    let policy = train_tiny_policy(&demos(&suite, 100, 3, RefMode::Ordered), 300, &RlConfig::default(), "policy")
        .map_err(|e| e.to_string())?;
    let reports = run_ablation(
        &policy,
        &[Ablation::NoHistory, Ablation::NoVision, Ablation::NoPlan],
        &suite,
        100,
        3000,
        RefMode::Ordered,
    )
    .map_err(|e| e.to_string())?;
    let paired = reports.windows(2).all(|w| w[0].seeds == w[1].seeds);
    let acc = |m: Ablation, t: &str| reports.iter().find(|r| r.ablation == m).map(|r| r.per_task_accuracy[t]);
    let vision_delta = acc(Ablation::NoVision, "click-button").unwrap_or(f64::NAN)
        - acc(Ablation::None, "click-button").unwrap_or(f64::NAN);
    let summary: Vec<String> = reports
        .iter()
        .map(|r| format!("{} {:.1}%", r.ablation, 100.0 * r.average))
        .collect();
    check(
        reports.len() == 4 && paired && leaks == 0 && vision_delta.abs() <= NO_VISION_BAND,
        format!(
            "{}; feature leaks {leaks} over {decisions} decisions; no_vision click-button delta {:+.1} points; paired seeds {paired}",
            summary.join(", "),
            100.0 * vision_delta
        ),
    )
}

fn rouge_matches_brute_force() -> Outcome {
    let mut mismatches = 0;
    let mut identical_ok = true;
    for seed in 0..100 {
        let (a, b) = random_token_pair(seed);
        let s = rouge_scores(&a, &b);
        mismatches += usize::from((s.rouge1_f1, s.rouge_l_f1) != brute_rouge(&a, &b));
        if !a.is_empty() {
            let same = rouge_scores(&a, &a);
            identical_ok &= same.rouge1_f1 == 1.0 && same.rouge_l_f1 == 1.0;
        }
    }
    check(
        mismatches == 0 && identical_ok,
        format!("{mismatches}/100 mismatches; identical sequences score 1.0: {identical_ok}"),
    )
}

fn cli_is_reproducible() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let first = run_cli_pipeline(a.path(), "1");
    let second = run_cli_pipeline(b.path(), "2");
    let differing: Vec<&str> = first
        .iter()
        .zip(&second)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    check(
        first.len() == second.len() && differing.is_empty(),
        format!("{} output files compared across two runs; differing: {differing:?}", first.len()),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("environment oracles", oracle_solves_everything),
        ("pipeline oracle equivalence", pipeline_matches_brute_force),
        ("plan fidelity", plans_reproduce),
        ("gradient integrity", gradients_match),
        ("V-MPO mechanics", vmpo_mechanics),
        ("learning at desk scale", learning_at_desk_scale),
        ("attack direction", attack_direction),
        ("ablation harness", ablation_harness),
        ("ROUGE correctness", rouge_matches_brute_force),
        ("CLI reproducibility", cli_is_reproducible),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let tag = if outcome.is_ok() { "PASS" } else { "FAIL" };
        let detail = outcome.unwrap_or_else(|e| e);
        println!("[{tag}] {:>2} {name}: {detail} ({:.1?})", i + 1, start.elapsed());
        failed += usize::from(tag == "FAIL");
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
