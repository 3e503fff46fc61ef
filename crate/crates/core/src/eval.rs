//! Accuracy benchmarking, ROUGE over action strings, the reference
//! randomization attack, ablation runs and report files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{Ablation, AgentError, LearnedPolicy, MemorizingBaseline, Policy, PolicyParams};
use crate::dom::RefMode;
use crate::env::{self, Action, TaskName};
use crate::pipeline::ProcessedEpisode;
use crate::planner::{flat_rollout, hierarchical_rollout, translate_utterance, EpisodeResult, Plan};
use crate::trainer::{build_examples, build_vocabulary, train_bc, AdamState, RlConfig, TrainError};
use crate::agent::network::param_count;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Per-task success rates of one evaluation condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub policy: String,
    pub ref_mode: RefMode,
    pub ablation: Ablation,
    pub episodes_per_task: usize,
    pub per_task_accuracy: BTreeMap<String, f64>,
    /// Mean of the per-task accuracies.
    pub average: f64,
    /// Episode seeds used for each task, for paired comparisons.
    pub seeds: BTreeMap<String, Vec<u64>>,
}

impl EvalReport {
    /// `policy/ref_mode/ablation`.
    pub fn condition(&self) -> String {
        format!("{}/{}/{}", self.policy, self.ref_mode, self.ablation)
    }
}

/// Runs one evaluation episode: hierarchically with the rule-based plan,
/// or flat under `no_plan`.
pub fn run_episode(
    policy: &dyn Policy,
    task: TaskName,
    seed: u64,
    ref_mode: RefMode,
    ablation: Ablation,
) -> Result<EpisodeResult, AgentError> {
    let (mut state, _) = env::reset(task, seed, ref_mode)?;
    if ablation == Ablation::NoPlan {
        return flat_rollout(&mut state, policy, ablation);
    }
    let plan = translate_utterance(task.as_str(), &state.utterance).unwrap_or_else(|_| Plan::single(&state.utterance));
    let budget = state.max_steps;
    hierarchical_rollout(&mut state, policy, &plan, budget, ablation)
}

/// Episode results for seeds `seed..seed + episodes_per_task` of every task,
/// in task order then seed order.
pub fn evaluate_episodes(
    policy: &dyn Policy,
    tasks: &[TaskName],
    episodes_per_task: usize,
    seed: u64,
    ref_mode: RefMode,
    ablation: Ablation,
) -> Result<Vec<EpisodeResult>, AgentError> {
    let jobs: Vec<(TaskName, u64)> = tasks
        .iter()
        .flat_map(|&t| (0..episodes_per_task as u64).map(move |i| (t, seed.wrapping_add(i))))
        .collect();
    jobs.par_iter()
        .map(|&(t, s)| run_episode(policy, t, s, ref_mode, ablation))
        .collect()
}

pub fn evaluate_accuracy(
    policy: &dyn Policy,
    tasks: &[TaskName],
    episodes_per_task: usize,
    seed: u64,
    ref_mode: RefMode,
    ablation: Ablation,
) -> Result<EvalReport, AgentError> {
    let results = evaluate_episodes(policy, tasks, episodes_per_task, seed, ref_mode, ablation)?;
    let mut successes: BTreeMap<String, usize> = BTreeMap::new();
    let mut seeds: BTreeMap<String, Vec<u64>> = BTreeMap::new();
    for &t in tasks {
        successes.insert(t.as_str().to_string(), 0);
        seeds.insert(t.as_str().to_string(), Vec::new());
    }
    for r in &results {
        let key = r.task.as_str();
        *successes.get_mut(key).expect("task registered") += usize::from(r.success);
        seeds.get_mut(key).expect("task registered").push(r.seed);
    }
    let per_task_accuracy: BTreeMap<String, f64> = successes
        .into_iter()
        .map(|(t, k)| {
            let acc = if episodes_per_task == 0 { 0.0 } else { k as f64 / episodes_per_task as f64 };
            (t, acc)
        })
        .collect();
    let average = if per_task_accuracy.is_empty() {
        0.0
    } else {
        per_task_accuracy.values().sum::<f64>() / per_task_accuracy.len() as f64
    };
    Ok(EvalReport {
        policy: policy.id(),
        ref_mode,
        ablation,
        episodes_per_task,
        per_task_accuracy,
        average,
        seeds,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RougeScores {
    pub rouge1_f1: f64,
    pub rouge_l_f1: f64,
}

fn f1(matches: usize, cand_len: usize, ref_len: usize) -> f64 {
    if matches == 0 {
        0.0
    } else {
        2.0 * matches as f64 / (cand_len + ref_len) as f64
    }
}

fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

fn unigram_counts<'a>(s: &[&'a str]) -> BTreeMap<&'a str, usize> {
    let mut m = BTreeMap::new();
    for t in s {
        *m.entry(*t).or_insert(0) += 1;
    }
    m
}

/// ROUGE-1 F1 from clipped unigram overlap and ROUGE-L F1 from the longest
/// common subsequence. Both are 0 when either sequence is empty.
pub fn rouge_scores<S: AsRef<str>>(candidate: &[S], reference: &[S]) -> RougeScores {
    if candidate.is_empty() || reference.is_empty() {
        return RougeScores {
            rouge1_f1: 0.0,
            rouge_l_f1: 0.0,
        };
    }
    let cand: Vec<&str> = candidate.iter().map(AsRef::as_ref).collect();
    let refr: Vec<&str> = reference.iter().map(AsRef::as_ref).collect();
    let (c, r) = (unigram_counts(&cand), unigram_counts(&refr));
    let overlap = c.iter().map(|(t, n)| (*n).min(r.get(t).copied().unwrap_or(0))).sum();
    RougeScores {
        rouge1_f1: f1(overlap, cand.len(), refr.len()),
        rouge_l_f1: f1(lcs_len(&cand, &refr), cand.len(), refr.len()),
    }
}

/// ROUGE over whitespace-split serialized action sequences.
pub fn action_rouge(candidate: &[Action], reference: &[Action]) -> RougeScores {
    let toks = |a: &[Action]| -> Vec<String> {
        a.iter()
            .flat_map(|x| x.to_string().split_whitespace().map(str::to_string).collect::<Vec<_>>())
            .collect()
    };
    rouge_scores(&toks(candidate), &toks(reference))
}

/// Accuracy of one trained policy before and after ref randomization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub policy: String,
    pub trained_on: RefMode,
    pub accuracy_ordered_test: f64,
    pub accuracy_randomized_test: f64,
    /// `accuracy_ordered_test - accuracy_randomized_test`.
    pub drop: f64,
}

/// One line of the attack JSON output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub policy: String,
    pub trained_on: RefMode,
    pub test_mode: RefMode,
    pub accuracy: f64,
}

impl AttackReport {
    pub fn records(&self) -> [AttackRecord; 2] {
        let rec = |test_mode, accuracy| AttackRecord {
            policy: self.policy.clone(),
            trained_on: self.trained_on,
            test_mode,
            accuracy,
        };
        [
            rec(RefMode::Ordered, self.accuracy_ordered_test),
            rec(RefMode::Randomized, self.accuracy_randomized_test),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    pub tasks: Vec<TaskName>,
    pub episodes_per_task: usize,
    /// First evaluation seed; both test modes reuse the same seeds.
    pub eval_seed: u64,
    pub bc_steps: usize,
    pub train: RlConfig,
}

impl AttackConfig {
    pub fn suite() -> Vec<TaskName> {
        vec![TaskName::ClickButton, TaskName::EnterText, TaskName::ClickCollapsible]
    }
}

/// Trains the tiny policy with behavioral cloning on `dataset`.
pub fn train_tiny_policy(
    dataset: &[ProcessedEpisode],
    steps: usize,
    cfg: &RlConfig,
    label: &str,
) -> Result<LearnedPolicy, TrainError> {
    let vocab = build_vocabulary(dataset);
    let (examples, _) = build_examples(dataset, &vocab, Ablation::None)?;
    let mut params = PolicyParams::init(cfg.seed);
    let mut adam = AdamState::new(param_count());
    train_bc(&mut params, &mut adam, &examples, steps, cfg, cfg.seed)?;
    Ok(LearnedPolicy::new(params, vocab, label))
}

fn attack_report(
    policy: &dyn Policy,
    trained_on: RefMode,
    cfg: &AttackConfig,
) -> Result<AttackReport, AgentError> {
    let acc = |mode| {
        evaluate_accuracy(policy, &cfg.tasks, cfg.episodes_per_task, cfg.eval_seed, mode, Ablation::None)
            .map(|r| r.average)
    };
    let ordered = acc(RefMode::Ordered)?;
    let randomized = acc(RefMode::Randomized)?;
    Ok(AttackReport {
        policy: policy.id(),
        trained_on,
        accuracy_ordered_test: ordered,
        accuracy_randomized_test: randomized,
        drop: ordered - randomized,
    })
}

/// Trains the memorizing baseline and the tiny policy on each training
/// set and tests each on ordered and randomized refs. Reports come in the
/// order baseline/ordered, policy/ordered, baseline/randomized,
/// policy/randomized.
pub fn run_ref_attack(
    train_ordered: &[ProcessedEpisode],
    train_randomized: &[ProcessedEpisode],
    cfg: &AttackConfig,
) -> Result<Vec<AttackReport>, EvalError> {
    let mut out = Vec::with_capacity(4);
    for (mode, data) in [(RefMode::Ordered, train_ordered), (RefMode::Randomized, train_randomized)] {
        let baseline = MemorizingBaseline::fit(data);
        out.push(attack_report(&baseline, mode, cfg)?);
        let policy = train_tiny_policy(data, cfg.bc_steps, &cfg.train, "policy")?;
        out.push(attack_report(&policy, mode, cfg)?);
    }
    Ok(out)
}

/// Evaluates `policy` under the unablated condition and every requested
/// mode, all on the same seeds.
pub fn run_ablation(
    policy: &dyn Policy,
    modes: &[Ablation],
    tasks: &[TaskName],
    episodes_per_task: usize,
    seed: u64,
    ref_mode: RefMode,
) -> Result<Vec<EvalReport>, AgentError> {
    let mut conditions = vec![Ablation::None];
    conditions.extend(modes.iter().copied().filter(|&m| m != Ablation::None));
    conditions.dedup();
    conditions
        .into_iter()
        .map(|m| evaluate_accuracy(policy, tasks, episodes_per_task, seed, ref_mode, m))
        .collect()
}

/// CSV with one `condition,task,accuracy` row per report and task.
pub fn write_report_csv(reports: &[EvalReport], w: impl Write) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["condition", "task", "accuracy"])?;
    for r in reports {
        let cond = r.condition();
        for (task, acc) in &r.per_task_accuracy {
            out.write_record([cond.as_str(), task, &format!("{acc:.4}")])?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Fixed-width table: one row per task, one column per condition, and an
/// average row.
pub fn render_table(reports: &[EvalReport]) -> String {
    let mut tasks: Vec<&str> = Vec::new();
    for r in reports {
        for t in r.per_task_accuracy.keys() {
            if !tasks.contains(&t.as_str()) {
                tasks.push(t);
            }
        }
    }
    let conds: Vec<String> = reports.iter().map(EvalReport::condition).collect();
    let first = tasks.iter().map(|t| t.len()).chain(["task".len(), "average".len()]).max().unwrap_or(4);
    let widths: Vec<usize> = conds.iter().map(|c| c.len().max(7)).collect();
    let mut s = String::new();
    let _ = write!(s, "{:<first$}", "task");
    for (c, w) in conds.iter().zip(&widths) {
        let _ = write!(s, "  {c:>w$}");
    }
    s.push('\n');
    let cell = |v: Option<f64>| v.map(|x| format!("{:.1}%", 100.0 * x)).unwrap_or_else(|| "-".into());
    for t in &tasks {
        let _ = write!(s, "{t:<first$}");
        for (r, w) in reports.iter().zip(&widths) {
            let _ = write!(s, "  {:>w$}", cell(r.per_task_accuracy.get(*t).copied()));
        }
        s.push('\n');
    }
    let _ = write!(s, "{:<first$}", "average");
    for (r, w) in reports.iter().zip(&widths) {
        let _ = write!(s, "  {:>w$}", cell(Some(r.average)));
    }
    s.push('\n');
    s
}

/// Writes the CSV report and the text table.
pub fn emit_report(
    reports: &[EvalReport],
    csv_path: &std::path::Path,
    table_path: &std::path::Path,
) -> Result<(), EvalError> {
    write_report_csv(reports, std::io::BufWriter::new(std::fs::File::create(csv_path)?))?;
    std::fs::write(table_path, render_table(reports))?;
    Ok(())
}
