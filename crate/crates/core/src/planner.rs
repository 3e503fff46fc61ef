//! Rule-based plan translation and the hierarchical rollout loop.
//!
//! A plan is an ordered list of imperative subtask utterances. Key-value
//! utterances (the flight form) expand to one `Select …` subtask per field;
//! compound imperatives are split on connectives. During a rollout the
//! policy is conditioned on one subtask at a time and advances when it
//! raises its done flag.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{Ablation, AgentError, Decision, Policy, PolicyContext};
use crate::dom::DomSnapshot;
use crate::env::{Action, EnvState, TaskName};
use crate::pipeline::ProcessedEpisode;
use crate::text::tokenize;

/// Clause connectives, longest first.
pub const CONNECTIVES: [&str; 4] = [" and then ", ", and ", " and ", "; "];

/// Flight-form fields in plan order, with their subtask templates.
const FLIGHT_FIELDS: [(&str, &str); 3] = [
    ("Departure City", "Select Departure City {}"),
    ("Destination City", "Select Destination City {}"),
    ("Departure Day", "Select the Departure Day to {}"),
];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PlanError {
    #[error("no translation rule for task `{0}`")]
    NoRule(String),
    #[error("cannot translate utterance: {0}")]
    Translation(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Plan {
    subtasks: Vec<String>,
}

impl TryFrom<Vec<String>> for Plan {
    type Error = PlanError;

    fn try_from(subtasks: Vec<String>) -> Result<Self, PlanError> {
        Plan::new(subtasks)
    }
}

impl From<Plan> for Vec<String> {
    fn from(p: Plan) -> Self {
        p.subtasks
    }
}

impl Plan {
    pub fn new(subtasks: Vec<String>) -> Result<Self, PlanError> {
        if subtasks.is_empty() || subtasks.iter().any(|s| s.trim().is_empty()) {
            return Err(PlanError::Translation("plans need at least one non-empty subtask".into()));
        }
        Ok(Self { subtasks })
    }

    /// A one-subtask plan holding the whole utterance.
    pub fn single(utterance: &str) -> Self {
        Self {
            subtasks: vec![utterance.to_string()],
        }
    }

    pub fn subtasks(&self) -> &[String] {
        &self.subtasks
    }

    pub fn len(&self) -> usize {
        self.subtasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subtasks.is_empty()
    }

    /// Subtasks joined as `a; b; c;`.
    pub fn to_line(&self) -> String {
        self.subtasks.iter().map(|s| format!("{s};")).collect::<Vec<_>>().join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanExample {
    pub task: String,
    pub utterance: String,
    pub subtasks: Plan,
}

fn strip_trailing_punctuation(s: &str) -> &str {
    s.trim().trim_end_matches(['.', '!', '?', ';', ',']).trim_end()
}

/// Splits on connectives outside double quotes, trying the longest
/// connective first at each position.
fn split_clauses(utterance: &str) -> Vec<String> {
    let text = strip_trailing_punctuation(utterance);
    let mut clauses = Vec::new();
    let mut start = 0;
    let mut i = 0;
    let mut quoted = false;
    let bytes = text.as_bytes();
    'scan: while i < text.len() {
        if bytes[i] == b'"' {
            quoted = !quoted;
        } else if !quoted {
            for c in CONNECTIVES {
                if text[i..].starts_with(c) {
                    clauses.push(text[start..i].to_string());
                    i += c.len();
                    start = i;
                    continue 'scan;
                }
            }
        }
        i += 1;
    }
    clauses.push(text[start..].to_string());
    clauses
        .iter()
        .map(|c| strip_trailing_punctuation(c).to_string())
        .filter(|c| !c.is_empty())
        .collect()
}

fn translate_flight(utterance: &str) -> Result<Plan, PlanError> {
    let v: serde_json::Value = serde_json::from_str(utterance.trim())
        .map_err(|e| PlanError::Translation(format!("expected a JSON object: {e}")))?;
    let obj = v
        .as_object()
        .ok_or_else(|| PlanError::Translation("expected a JSON object".into()))?;
    let subtasks = FLIGHT_FIELDS
        .iter()
        .map(|(key, template)| {
            let value = match obj.get(*key) {
                Some(serde_json::Value::String(s)) => s.clone(),
                Some(serde_json::Value::Number(n)) => n.to_string(),
                Some(_) => return Err(PlanError::Translation(format!("field `{key}` is not a scalar"))),
                None => return Err(PlanError::Translation(format!("missing field `{key}`"))),
            };
            Ok(template.replace("{}", &value))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Plan::new(subtasks)
}

/// Deterministic rule-based decomposition of an utterance.
pub fn translate_utterance(task: &str, utterance: &str) -> Result<Plan, PlanError> {
    let task: TaskName = task.parse().map_err(|_| PlanError::NoRule(task.to_string()))?;
    match task {
        TaskName::BookFlightSimplified => translate_flight(utterance),
        _ => {
            let clauses = split_clauses(utterance);
            if clauses.is_empty() {
                return Err(PlanError::Translation(format!("no clauses in `{utterance}`")));
            }
            Plan::new(clauses)
        }
    }
}

/// One plan example per episode; episodes that cannot be translated are
/// dropped and counted.
pub fn derive_plan_dataset(episodes: &[ProcessedEpisode]) -> (Vec<PlanExample>, usize) {
    let mut out = Vec::with_capacity(episodes.len());
    let mut dropped = 0;
    for ep in episodes {
        match translate_utterance(&ep.task, &ep.utterance) {
            Ok(plan) => out.push(PlanExample {
                task: ep.task.clone(),
                utterance: ep.utterance.clone(),
                subtasks: plan,
            }),
            Err(_) => dropped += 1,
        }
    }
    (out, dropped)
}

/// Tokens describing an action's target: its text, `id` and `class`, its
/// parent's text, `id` and `class`, and any typed text.
fn target_tokens(snapshot: &DomSnapshot, action: &Action) -> Vec<String> {
    let mut toks = Vec::new();
    let mut describe = |n: &crate::dom::DomNode| {
        toks.extend(tokenize(&n.text));
        for key in ["id", "class"] {
            if let Some(v) = n.attrs.get(key) {
                toks.extend(tokenize(v));
            }
        }
    };
    if let Some(n) = snapshot.node(action.target()) {
        describe(n);
    }
    if let Some(p) = snapshot.parent(action.target()) {
        describe(p);
    }
    toks.extend(tokenize(action.text()));
    toks
}

/// Assigns each step to a subtask. Starting from the first subtask, each
/// step moves to the subtask at or after the current one whose tokens
/// overlap most with the target description (earliest on ties); with no
/// overlap at all it stays on the current subtask.
pub fn align_plan(plan: &Plan, ep: &ProcessedEpisode) -> Vec<usize> {
    let subtask_tokens: Vec<Vec<String>> = plan.subtasks().iter().map(|s| tokenize(s)).collect();
    let mut current = 0;
    ep.steps
        .iter()
        .map(|step| {
            let desc = target_tokens(&step.snapshot, &step.action);
            let score = |j: usize| subtask_tokens[j].iter().filter(|t| desc.contains(t)).count();
            let mut best = current;
            for j in current..plan.len() {
                if score(j) > score(best) {
                    best = j;
                }
            }
            current = best;
            current
        })
        .collect()
}

/// Per-step (subtask, done target) pairs for behavioral cloning. The done
/// target is set on the last step of each aligned subtask span.
pub fn step_supervision(ep: &ProcessedEpisode) -> Result<Vec<(String, bool)>, PlanError> {
    let plan = translate_utterance(&ep.task, &ep.utterance)?;
    let align = align_plan(&plan, ep);
    Ok(align
        .iter()
        .enumerate()
        .map(|(i, &j)| {
            let last = align.get(i + 1).is_none_or(|&next| next != j);
            (plan.subtasks()[j].clone(), last)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubtaskTrace {
    pub subtask: String,
    pub actions: Vec<Action>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub task: TaskName,
    pub seed: u64,
    /// Discounted terminal reward; 0 if the episode never terminated.
    pub reward: f64,
    pub raw_reward: f64,
    pub success: bool,
    pub actions: Vec<Action>,
    pub subtask_trace: Vec<SubtaskTrace>,
}

/// Decision source for rollouts; lets training code observe every query.
pub type Decider<'a> = dyn FnMut(&PolicyContext<'_>) -> Result<Decision, AgentError> + 'a;

fn finish(state: &EnvState, reward: f64, actions: Vec<Action>, subtask_trace: Vec<SubtaskTrace>) -> EpisodeResult {
    let raw = if state.terminated { state.raw_reward } else { 0.0 };
    EpisodeResult {
        task: state.task.name,
        seed: state.task.seed,
        reward,
        raw_reward: raw,
        success: raw > 0.0,
        actions,
        subtask_trace,
    }
}

/// Runs the plan's subtasks in order. Each subtask gets up to
/// `per_subtask_budget` actions and ends early when the policy raises its
/// done flag; the episode stops as soon as the environment terminates. A
/// plan that runs out before the environment terminates counts as a
/// failure with reward 0.
pub fn rollout_with(
    state: &mut EnvState,
    plan: &Plan,
    per_subtask_budget: u32,
    ablation: Ablation,
    decide: &mut Decider<'_>,
) -> Result<EpisodeResult, AgentError> {
    let mut actions = Vec::new();
    let mut trace = Vec::new();
    let mut reward = 0.0;
    for subtask in plan.subtasks() {
        if state.terminated {
            break;
        }
        let mut taken = Vec::new();
        for _ in 0..per_subtask_budget {
            let obs = state.observation()?;
            let decision = decide(&PolicyContext {
                state,
                observation: &obs,
                history: &actions,
                subtask,
                ablation,
            })?;
            let result = state.step(&decision.action)?;
            actions.push(decision.action.clone());
            taken.push(decision.action);
            if result.terminated {
                reward = result.reward;
                break;
            }
            if decision.subtask_done {
                break;
            }
        }
        trace.push(SubtaskTrace {
            subtask: subtask.clone(),
            actions: taken,
        });
    }
    Ok(finish(state, reward, actions, trace))
}

pub fn hierarchical_rollout(
    state: &mut EnvState,
    policy: &dyn Policy,
    plan: &Plan,
    per_subtask_budget: u32,
    ablation: Ablation,
) -> Result<EpisodeResult, AgentError> {
    rollout_with(state, plan, per_subtask_budget, ablation, &mut |ctx| policy.act(ctx))
}

/// Runs without a plan: the policy sees the full utterance as its subtask
/// and the done flag is ignored.
pub fn flat_rollout(state: &mut EnvState, policy: &dyn Policy, ablation: Ablation) -> Result<EpisodeResult, AgentError> {
    let plan = Plan::single(&state.utterance.clone());
    let budget = state.max_steps;
    rollout_with(state, &plan, budget, ablation, &mut |ctx| {
        policy.act(ctx).map(|d| Decision {
            subtask_done: false,
            ..d
        })
    })
}
