//! Scripted solutions computed from the hidden goal.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{reset, Action, EnvError, EnvState, Goal, TaskName};
use crate::dom::{DomSnapshot, Ref, RefMode};

/// The next scripted action and the index of the solution phase it belongs
/// to. Phases line up one-to-one with the subtasks of the task's plan.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleStep {
    pub action: Action,
    pub phase: usize,
}

fn ref_of(state: &EnvState, path: &[usize]) -> Ref {
    state
        .snapshot
        .node_at(path)
        .and_then(|n| n.ref_id)
        .expect("goal paths resolve to ref-bearing nodes")
}

/// Next action of the optimal script for the current state.
pub fn oracle_step(state: &EnvState) -> OracleStep {
    let click = |path: &[usize], phase| OracleStep {
        action: Action::click(ref_of(state, path)),
        phase,
    };
    match &state.goal {
        Goal::ClickButton { buttons, target } => click(&buttons[*target], 0),
        Goal::Checkboxes {
            boxes,
            targets,
            submit,
        } => {
            let wrong = (0..boxes.len()).find(|&i| {
                state.snapshot.node_at(&boxes[i]).unwrap().flags.checked != targets.contains(&i)
            });
            match wrong {
                Some(i) => click(&boxes[i], 0),
                None => click(submit, 1),
            }
        }
        Goal::ChooseColor {
            swatches,
            target,
            submit,
        } => {
            if state.snapshot.node_at(&swatches[*target]).unwrap().flags.selected {
                click(submit, 1)
            } else {
                click(&swatches[*target], 0)
            }
        }
        Goal::EnterText { input, text, submit } => {
            if state.snapshot.node_at(input).unwrap().value == *text {
                click(submit, 1)
            } else {
                OracleStep {
                    action: Action::type_text(ref_of(state, input), text.clone()),
                    phase: 0,
                }
            }
        }
        Goal::Spinner {
            input,
            up,
            down,
            target,
            submit,
        } => {
            let current: i64 = state.snapshot.node_at(input).unwrap().value.trim().parse().unwrap_or(0);
            if current < *target {
                click(up, 0)
            } else if current > *target {
                click(down, 0)
            } else {
                click(submit, 1)
            }
        }
        Goal::Collapsible {
            header,
            section,
            submit,
        } => {
            if state.snapshot.node_at(&section[0].0).unwrap().bbox.area() == 0 {
                click(header, 0)
            } else {
                click(submit, 1)
            }
        }
        Goal::BookFlight { selects, targets } => {
            let (phase, path) = selects
                .iter()
                .enumerate()
                .find(|(i, p)| state.snapshot.node_at(p).unwrap().value != targets[*i])
                .expect("an active book-flight episode has an unmatched select");
            let select = state.snapshot.node_at(path).unwrap();
            let option = select
                .children
                .iter()
                .position(|o| o.text == targets[phase])
                .expect("target option exists");
            let mut option_path = path.clone();
            option_path.push(option);
            click(&option_path, phase)
        }
    }
}

/// Next action of the optimal script.
pub fn oracle_policy(state: &EnvState) -> Action {
    oracle_step(state).action
}

/// Number of solution phases (and plan subtasks) for a task.
pub fn oracle_phase_count(task: TaskName) -> usize {
    match task {
        TaskName::ClickButton => 1,
        TaskName::BookFlightSimplified => 3,
        _ => 2,
    }
}

/// One exported step of an episode; `dom` is the page before the action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub task: TaskName,
    pub seed: u64,
    pub step: u32,
    pub action: Action,
    pub reward: f64,
    pub terminated: bool,
    pub dom: DomSnapshot,
}

/// Runs the oracle to termination and returns the per-step trace.
pub fn oracle_trace(task: TaskName, seed: u64, ref_mode: RefMode) -> Result<Vec<TraceRecord>, EnvError> {
    let (mut state, _) = reset(task, seed, ref_mode)?;
    let mut out = Vec::new();
    while !state.terminated {
        let dom = state.snapshot.clone();
        let action = oracle_policy(&state);
        let result = state.step(&action)?;
        out.push(TraceRecord {
            task,
            seed,
            step: state.steps_used,
            action,
            reward: result.reward,
            terminated: result.terminated,
            dom,
        });
    }
    Ok(out)
}

/// Writes records as JSON lines.
pub fn write_trace_jsonl(records: &[TraceRecord], mut w: impl Write) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
