mod common;

use proptest::prelude::*;

use common::{brute_rouge, random_token_pair};
use webnav::agent::{Ablation, MemorizingBaseline, OraclePolicy, RandomPolicy};
use webnav::dom::RefMode;
use webnav::env::{self, Action, TaskName};
use webnav::eval::*;
use webnav::pipeline::{clean_actions, generate_demonstrations, NoiseProfile};
use webnav::planner::{hierarchical_rollout, translate_utterance, Plan};

#[test]
fn documented_plans_reproduce_verbatim() {
    let flight = r#"{"Departure City":"Philadelphia","Destination City":"Charlotte","Ticket Type":"Return flight","Departure Day":4,"Returning Day":26,"Passengers":2}"#;
    assert_eq!(
        translate_utterance("book-flight-simplified", flight).unwrap().to_line(),
        "Select Departure City Philadelphia; Select Destination City Charlotte; Select the Departure Day to 4;"
    );
    assert_eq!(
        translate_utterance("click-collapsible", "Expand the section below and click submit.").unwrap().to_line(),
        "Expand the section below; click submit;"
    );
}

fn clause() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(vec!["click", "the", "red", "box", "enter", "submit", "\"a b\""]), 1..5)
        .prop_map(|w| w.join(" "))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn translation_is_deterministic(clauses in prop::collection::vec(clause(), 1..5), joiner in prop::sample::select(vec![" and ", " and then ", "; ", ", and "])) {
        let utterance = format!("{}.", clauses.join(joiner));
        let a = translate_utterance("click-collapsible", &utterance);
        let b = translate_utterance("click-collapsible", &utterance);
        prop_assert_eq!(&a, &b);
        let plan = a.unwrap();
        prop_assert!(plan.subtasks().iter().all(|s| !s.trim().is_empty()));
    }

    #[test]
    fn subtask_traces_concatenate_to_actions(task in prop::sample::select(TaskName::ALL.to_vec()), seed in 0u64..10_000, pseed in any::<u64>(), extra in 0usize..20, budget in 1u32..5) {
        let (mut s, _) = env::reset(task, seed, RefMode::Randomized).unwrap();
        let mut subtasks = translate_utterance(task.as_str(), &s.utterance).unwrap().subtasks().to_vec();
        subtasks.extend((0..extra).map(|i| format!("extra {i}")));
        let plan = Plan::new(subtasks).unwrap();
        let r = hierarchical_rollout(&mut s, &RandomPolicy { seed: pseed }, &plan, budget, Ablation::None).unwrap();
        let flat: Vec<Action> = r.subtask_trace.iter().flat_map(|t| t.actions.clone()).collect();
        prop_assert_eq!(&flat, &r.actions);
        prop_assert!(r.actions.len() as u32 <= s.max_steps);
        prop_assert_eq!(r.actions.len() as u32, s.steps_used);
    }
}

#[test]
fn rouge_matches_brute_force() {
    for seed in 0..100 {
        let (a, b) = random_token_pair(seed);
        let s = rouge_scores(&a, &b);
        let (r1, rl) = brute_rouge(&a, &b);
        assert_eq!((s.rouge1_f1, s.rouge_l_f1), (r1, rl), "{a:?} vs {b:?}");
        if !a.is_empty() {
            let same = rouge_scores(&a, &a);
            assert_eq!((same.rouge1_f1, same.rouge_l_f1), (1.0, 1.0));
        }
    }
}

#[test]
fn action_rouge_tokenizes_serialized_actions() {
    let s = action_rouge(&[Action::click(5)], &[Action::click(6)]);
    assert!((s.rouge1_f1 - 2.0 / 3.0).abs() < 1e-15);
}

#[test]
fn average_is_the_mean_of_tasks() {
    let tasks = [TaskName::ClickButton, TaskName::ClickCheckboxes, TaskName::EnterText];
    let r = evaluate_accuracy(&RandomPolicy { seed: 4 }, &tasks, 40, 0, RefMode::Ordered, Ablation::None).unwrap();
    let mean = r.per_task_accuracy.values().sum::<f64>() / 3.0;
    assert_eq!(r.average, mean);
    assert!(r.per_task_accuracy.values().all(|a| (0.0..=1.0).contains(a)));
    for v in r.per_task_accuracy.values() {
        assert_eq!((v * 40.0).round() / 40.0, *v);
    }
}

#[test]
fn oracle_has_no_attack_drop() {
    let suite = AttackConfig::suite();
    let o = evaluate_accuracy(&OraclePolicy, &suite, 50, 7, RefMode::Ordered, Ablation::None).unwrap();
    let r = evaluate_accuracy(&OraclePolicy, &suite, 50, 7, RefMode::Randomized, Ablation::None).unwrap();
    assert_eq!(o.average, 1.0);
    assert_eq!(o.average - r.average, 0.0);
}

#[test]
fn memorizing_baseline_degrades_on_randomized_refs() {
    let suite = AttackConfig::suite();
    for data_seed in 0..3 {
        let raw = generate_demonstrations(&suite, 30, data_seed, RefMode::Ordered, NoiseProfile::None).unwrap();
        let eps: Vec<_> = raw.iter().map(clean_actions).collect();
        let baseline = MemorizingBaseline::fit(&eps);
        let o = evaluate_accuracy(&baseline, &suite, 60, 500, RefMode::Ordered, Ablation::None).unwrap();
        let r = evaluate_accuracy(&baseline, &suite, 60, 500, RefMode::Randomized, Ablation::None).unwrap();
        assert!(o.average >= r.average, "{} < {}", o.average, r.average);
        assert_eq!(o.seeds, r.seeds);
    }
}

#[test]
fn ablation_conditions_share_seeds() {
    let tasks = [TaskName::ClickButton, TaskName::ChooseColor];
    let reports = run_ablation(&OraclePolicy, &[Ablation::NoVision, Ablation::NoPlan], &tasks, 20, 11, RefMode::Ordered).unwrap();
    let conds: Vec<_> = reports.iter().map(|r| r.ablation).collect();
    assert_eq!(conds, vec![Ablation::None, Ablation::NoVision, Ablation::NoPlan]);
    assert!(reports.windows(2).all(|w| w[0].seeds == w[1].seeds));
}

#[test]
fn reports_are_emitted_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let tasks = [TaskName::ClickButton, TaskName::EnterText, TaskName::UseSpinner];
    let reports = run_ablation(&RandomPolicy { seed: 1 }, &[Ablation::NoHistory], &tasks, 10, 0, RefMode::Ordered).unwrap();
    let (c1, t1) = (dir.path().join("a.csv"), dir.path().join("a.txt"));
    let (c2, t2) = (dir.path().join("b.csv"), dir.path().join("b.txt"));
    emit_report(&reports, &c1, &t1).unwrap();
    emit_report(&reports, &c2, &t2).unwrap();
    let csv = std::fs::read_to_string(&c1).unwrap();
    assert_eq!(csv.lines().count(), 1 + 6);
    assert_eq!(csv, std::fs::read_to_string(&c2).unwrap());
    assert_eq!(std::fs::read(&t1).unwrap(), std::fs::read(&t2).unwrap());

    emit_report(&[], &c1, &t1).unwrap();
    assert_eq!(std::fs::read_to_string(&c1).unwrap().lines().count(), 1);
}
