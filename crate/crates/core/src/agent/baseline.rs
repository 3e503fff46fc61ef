//! A policy that memorizes which ref was acted on at each step index.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{AgentError, Decision, Policy, PolicyContext};
use crate::env::Action;
use crate::pipeline::ProcessedEpisode;
use crate::planner::step_supervision;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineEntry {
    pub task: String,
    pub step: usize,
    pub action: Action,
    pub subtask_done: bool,
}

/// For each `(task, step index)`, the most frequent training action. It
/// never looks at the page.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemorizingBaseline {
    pub entries: Vec<BaselineEntry>,
    #[serde(skip)]
    table: BTreeMap<(String, usize), (Action, bool)>,
}

impl MemorizingBaseline {
    /// Frequency argmax per `(task, step)`; ties go to the lower ref, then
    /// to clicks before typing. The done flag is the majority vote of the
    /// plan-aligned done targets.
    pub fn fit(dataset: &[ProcessedEpisode]) -> Self {
        let mut counts: BTreeMap<(String, usize), BTreeMap<Action, usize>> = BTreeMap::new();
        let mut done_votes: BTreeMap<(String, usize), (usize, usize)> = BTreeMap::new();
        for ep in dataset {
            let done = step_supervision(ep)
                .map(|s| s.into_iter().map(|(_, d)| d).collect())
                .unwrap_or_else(|_| (0..ep.steps.len()).map(|i| i + 1 == ep.steps.len()).collect::<Vec<_>>());
            for (i, step) in ep.steps.iter().enumerate() {
                let key = (ep.task.clone(), i);
                *counts.entry(key.clone()).or_default().entry(step.action.clone()).or_insert(0) += 1;
                let v = done_votes.entry(key).or_insert((0, 0));
                if done[i] {
                    v.0 += 1;
                } else {
                    v.1 += 1;
                }
            }
        }
        let entries = counts
            .into_iter()
            .map(|((task, step), c)| {
                let action = c
                    .into_iter()
                    .min_by(|(a, na), (b, nb)| {
                        nb.cmp(na)
                            .then(a.target().cmp(&b.target()))
                            .then(a.cmp(b))
                    })
                    .map(|(a, _)| a)
                    .expect("nonempty counts");
                let (yes, no) = done_votes[&(task.clone(), step)];
                BaselineEntry {
                    task,
                    step,
                    action,
                    subtask_done: yes > no,
                }
            })
            .collect();
        Self::from_entries(entries)
    }

    pub fn from_entries(entries: Vec<BaselineEntry>) -> Self {
        let table = entries
            .iter()
            .map(|e| ((e.task.clone(), e.step), (e.action.clone(), e.subtask_done)))
            .collect();
        Self { entries, table }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("baseline serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, AgentError> {
        let raw: MemorizingBaseline = serde_json::from_str(s).map_err(|e| AgentError::Format(e.to_string()))?;
        Ok(Self::from_entries(raw.entries))
    }

    /// The memorized decision for a step; `click ref 1` when nothing was
    /// recorded.
    pub fn predict(&self, task: &str, step: usize) -> (Action, bool) {
        self.table
            .get(&(task.to_string(), step))
            .cloned()
            .unwrap_or((Action::click(1), false))
    }
}

impl Policy for MemorizingBaseline {
    fn id(&self) -> String {
        "baseline".into()
    }

    fn act(&self, ctx: &PolicyContext<'_>) -> Result<Decision, AgentError> {
        let (action, subtask_done) = self.predict(ctx.state.task.name.as_str(), ctx.history.len());
        Ok(Decision { action, subtask_done })
    }
}
