//! Seedable MiniWoB-style task environments.
//!
//! Each task is a deterministic state machine over a [`DomSnapshot`]. The
//! action space has two members, [`Action::Click`] and [`Action::TypeText`],
//! episodes are capped at `max_steps` actions, and a successful episode is
//! rewarded `1 - steps_used / max_steps`. The tree structure and refs of an
//! instance never change after `reset`; steps only edit node content.

mod oracle;
mod tasks;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dom::{self, DomError, DomNode, DomSnapshot, RasterGrid, Ref, RefMode, RefPermutation, MAX_REFS};
use crate::text::tokenize;

pub use oracle::{oracle_phase_count, oracle_policy, oracle_step, oracle_trace, write_trace_jsonl, OracleStep, TraceRecord};
pub use tasks::{synonym_groups, CITIES, COLORS, WORDS};

/// Default episode step budget.
pub const DEFAULT_MAX_STEPS: u32 = 10;
/// Maximum number of keydown tokens in typed text.
pub const MAX_TYPED_TOKENS: usize = 8;

pub(crate) type NodePath = Vec<usize>;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EnvError {
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("episode already terminated")]
    EpisodeTerminated,
    #[error("invalid action: {0}")]
    InvalidAction(String),
    #[error(transparent)]
    Dom(#[from] DomError),
}

/// The whole action space.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Action {
    Click {
        #[serde(rename = "ref")]
        target: Ref,
    },
    TypeText {
        #[serde(rename = "ref")]
        target: Ref,
        text: String,
    },
}

impl Action {
    pub fn click(target: Ref) -> Self {
        Action::Click { target }
    }

    pub fn type_text(target: Ref, text: impl Into<String>) -> Self {
        Action::TypeText {
            target,
            text: text.into(),
        }
    }

    pub fn target(&self) -> Ref {
        match self {
            Action::Click { target } | Action::TypeText { target, .. } => *target,
        }
    }

    pub fn text(&self) -> &str {
        match self {
            Action::Click { .. } => "",
            Action::TypeText { text, .. } => text,
        }
    }

    pub fn is_click(&self) -> bool {
        matches!(self, Action::Click { .. })
    }

    pub fn with_target(&self, target: Ref) -> Self {
        match self {
            Action::Click { .. } => Action::Click { target },
            Action::TypeText { text, .. } => Action::TypeText {
                target,
                text: text.clone(),
            },
        }
    }

    /// The same action aimed at the relabeled ref, if the ref is in the
    /// permutation's domain.
    pub fn permuted(&self, perm: &RefPermutation) -> Option<Self> {
        perm.apply(self.target()).map(|r| self.with_target(r))
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let r = self.target();
        if r == 0 || usize::from(r) > MAX_REFS {
            return Err(EnvError::InvalidAction(format!("ref {r} outside 1..={MAX_REFS}")));
        }
        if tokenize(self.text()).len() > MAX_TYPED_TOKENS {
            return Err(EnvError::InvalidAction(format!(
                "typed text has more than {MAX_TYPED_TOKENS} tokens"
            )));
        }
        Ok(())
    }
}

impl fmt::Display for Action {
    /// `click ref 5` or `type_text ref 7 hello`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::Click { target } => write!(f, "click ref {target}"),
            Action::TypeText { target, text } => write!(f, "type_text ref {target} {text}"),
        }
    }
}

impl FromStr for Action {
    type Err = EnvError;

    /// Parses the [`fmt::Display`] form, `click ref N` or
    /// `type_text ref N text...`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || EnvError::InvalidAction(format!("cannot parse `{s}`"));
        let mut parts = s.trim().splitn(4, ' ');
        let kind = parts.next().ok_or_else(bad)?;
        if parts.next() != Some("ref") {
            return Err(bad());
        }
        let target: Ref = parts.next().and_then(|t| t.parse().ok()).ok_or_else(bad)?;
        let action = match (kind, parts.next()) {
            ("click", None) => Action::click(target),
            ("type_text", Some(text)) => Action::type_text(target, text),
            _ => return Err(bad()),
        };
        action.validate()?;
        Ok(action)
    }
}

/// The fixed task registry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskName {
    ClickButton,
    ClickCheckboxes,
    ClickCheckboxesSoft,
    ChooseColor,
    EnterText,
    UseSpinner,
    ClickCollapsible,
    BookFlightSimplified,
}

impl TaskName {
    pub const ALL: [TaskName; 8] = [
        TaskName::ClickButton,
        TaskName::ClickCheckboxes,
        TaskName::ClickCheckboxesSoft,
        TaskName::ChooseColor,
        TaskName::EnterText,
        TaskName::UseSpinner,
        TaskName::ClickCollapsible,
        TaskName::BookFlightSimplified,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            TaskName::ClickButton => "click-button",
            TaskName::ClickCheckboxes => "click-checkboxes",
            TaskName::ClickCheckboxesSoft => "click-checkboxes-soft",
            TaskName::ChooseColor => "choose-color",
            TaskName::EnterText => "enter-text",
            TaskName::UseSpinner => "use-spinner",
            TaskName::ClickCollapsible => "click-collapsible",
            TaskName::BookFlightSimplified => "book-flight-simplified",
        }
    }

    /// Parses `all` or a comma-separated list of task names.
    pub fn parse_list(s: &str) -> Result<Vec<TaskName>, EnvError> {
        if s.trim() == "all" {
            return Ok(TaskName::ALL.to_vec());
        }
        s.split(',').map(|t| t.trim().parse()).collect()
    }
}

impl fmt::Display for TaskName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskName {
    type Err = EnvError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaskName::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| EnvError::UnknownTask(s.to_string()))
    }
}

/// A task instance descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: TaskName,
    pub seed: u64,
}

/// What the agent sees.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub utterance: String,
    pub snapshot: DomSnapshot,
    pub raster: RasterGrid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Observation,
    /// Discounted reward; nonzero only on the terminal step.
    pub reward: f64,
    /// Undiscounted outcome in {-1, 0, 1}.
    pub raw_reward: f64,
    pub terminated: bool,
}

/// Hidden per-instance goal. Nodes are addressed by tree path, so the goal
/// is unaffected by ref relabeling.
#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Goal {
    ClickButton {
        buttons: Vec<NodePath>,
        target: usize,
    },
    Checkboxes {
        boxes: Vec<NodePath>,
        targets: Vec<usize>,
        submit: NodePath,
    },
    ChooseColor {
        swatches: Vec<NodePath>,
        target: usize,
        submit: NodePath,
    },
    EnterText {
        input: NodePath,
        text: String,
        submit: NodePath,
    },
    Spinner {
        input: NodePath,
        up: NodePath,
        down: NodePath,
        target: i64,
        submit: NodePath,
    },
    Collapsible {
        header: NodePath,
        /// (path, expanded bbox) for the section and everything inside it.
        section: Vec<(NodePath, dom::BBox)>,
        submit: NodePath,
    },
    BookFlight {
        selects: Vec<NodePath>,
        targets: Vec<String>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub task: TaskSpec,
    pub ref_mode: RefMode,
    pub utterance: String,
    pub snapshot: DomSnapshot,
    pub steps_used: u32,
    pub max_steps: u32,
    pub terminated: bool,
    pub raw_reward: f64,
    pub(crate) goal: Goal,
}

/// Starts a new episode. Identical `(task, seed, ref_mode)` always produce
/// the same utterance, DOM and hidden goal.
pub fn reset(task: TaskName, seed: u64, ref_mode: RefMode) -> Result<(EnvState, Observation), EnvError> {
    let instance = tasks::generate(task, seed);
    let ref_seed = crate::text::mix_seed(seed, 0x0A55_16E5);
    let snapshot = dom::assign_refs(instance.root, ref_mode, ref_seed)?;
    let state = EnvState {
        task: TaskSpec { name: task, seed },
        ref_mode,
        utterance: instance.utterance,
        snapshot,
        steps_used: 0,
        max_steps: DEFAULT_MAX_STEPS,
        terminated: false,
        raw_reward: 0.0,
        goal: instance.goal,
    };
    let obs = state.observation()?;
    Ok((state, obs))
}

/// [`reset`] with the task given by name.
pub fn reset_by_name(task: &str, seed: u64, ref_mode: RefMode) -> Result<(EnvState, Observation), EnvError> {
    reset(task.parse()?, seed, ref_mode)
}

/// Discounted reward for a terminal outcome after `steps_used` of `max_steps`.
pub fn discounted_reward(raw: f64, steps_used: u32, max_steps: u32) -> f64 {
    if raw > 0.0 {
        raw * (1.0 - f64::from(steps_used) / f64::from(max_steps))
    } else {
        raw
    }
}

impl EnvState {
    pub fn observation(&self) -> Result<Observation, EnvError> {
        Ok(Observation {
            utterance: self.utterance.clone(),
            raster: dom::rasterize(&self.snapshot)?,
            snapshot: self.snapshot.clone(),
        })
    }

    /// Whether the episode ended in success.
    pub fn succeeded(&self) -> bool {
        self.terminated && self.raw_reward > 0.0
    }

    /// The same instance with every ref relabeled through `perm`.
    pub fn permuted(&self, perm: &RefPermutation) -> Result<EnvState, EnvError> {
        Ok(EnvState {
            snapshot: dom::permute_refs(&self.snapshot, perm)?,
            ..self.clone()
        })
    }

    /// Applies one action.
    ///
    /// Actions naming a ref that is absent or invisible (zero-area) use up
    /// a step without changing the page.
    pub fn step(&mut self, action: &Action) -> Result<StepResult, EnvError> {
        if self.terminated {
            return Err(EnvError::EpisodeTerminated);
        }
        action.validate()?;
        self.steps_used += 1;
        let target = self
            .snapshot
            .path_of(action.target())
            .map(<[usize]>::to_vec)
            .filter(|p| {
                self.snapshot
                    .node_at(p)
                    .map(|n| n.bbox.area() > 0)
                    .unwrap_or(false)
            });
        if let Some(path) = target {
            let outcome = match action {
                Action::Click { .. } => self.apply_click(&path)?,
                Action::TypeText { text, .. } => self.apply_type(&path, text)?,
            };
            if let Some(raw) = outcome.or_else(|| self.check_auto_success()) {
                self.terminated = true;
                self.raw_reward = raw;
            }
        }
        if !self.terminated && self.steps_used >= self.max_steps {
            self.terminated = true;
            self.raw_reward = -1.0;
        }
        let reward = if self.terminated {
            discounted_reward(self.raw_reward, self.steps_used, self.max_steps)
        } else {
            0.0
        };
        Ok(StepResult {
            observation: self.observation()?,
            reward,
            raw_reward: if self.terminated { self.raw_reward } else { 0.0 },
            terminated: self.terminated,
        })
    }

    fn node(&self, path: &[usize]) -> &DomNode {
        self.snapshot.node_at(path).expect("goal paths are valid")
    }

    fn edit(&mut self, f: impl FnOnce(&mut DomNode)) -> Result<(), EnvError> {
        self.snapshot.update(f)?;
        Ok(())
    }

    /// Returns a terminal raw reward when the click ends the episode.
    fn apply_click(&mut self, path: &NodePath) -> Result<Option<f64>, EnvError> {
        match &self.goal {
            Goal::ClickButton { buttons, target } => {
                if let Some(i) = buttons.iter().position(|b| b == path) {
                    return Ok(Some(if i == *target { 1.0 } else { -1.0 }));
                }
            }
            Goal::Checkboxes {
                boxes,
                targets,
                submit,
            } if path == submit => {
                let checked: Vec<usize> = (0..boxes.len())
                    .filter(|&i| self.node(&boxes[i]).flags.checked)
                    .collect();
                return Ok(Some(if &checked == targets { 1.0 } else { -1.0 }));
            }
            Goal::ChooseColor {
                swatches,
                target,
                submit,
            } => {
                if path == submit {
                    let ok = self.node(&swatches[*target]).flags.selected;
                    return Ok(Some(if ok { 1.0 } else { -1.0 }));
                }
                if swatches.contains(path) {
                    let swatches = swatches.clone();
                    let chosen = path.clone();
                    self.edit(|root| {
                        for s in &swatches {
                            root.node_at_mut(s).unwrap().flags.selected = *s == chosen;
                        }
                    })?;
                    return Ok(None);
                }
            }
            Goal::EnterText { input, text, submit } if path == submit => {
                let ok = self.node(input).value == *text;
                return Ok(Some(if ok { 1.0 } else { -1.0 }));
            }
            Goal::Spinner {
                input,
                up,
                down,
                target,
                submit,
            } => {
                let current = self.node(input).value.trim().parse::<i64>().ok();
                if path == submit {
                    return Ok(Some(if current == Some(*target) { 1.0 } else { -1.0 }));
                }
                if path == up || path == down {
                    let delta = if path == up { 1 } else { -1 };
                    let next = current.unwrap_or(0) + delta;
                    let input = input.clone();
                    self.edit(|root| root.node_at_mut(&input).unwrap().value = next.to_string())?;
                    return Ok(None);
                }
            }
            Goal::Collapsible {
                header,
                section,
                submit,
            } => {
                if path == submit {
                    return Ok(Some(1.0));
                }
                if path == header {
                    let section = section.clone();
                    let anchor = section[0].1;
                    self.edit(|root| {
                        let expanded = root.node_at(&section[0].0).unwrap().bbox.h > 0;
                        for (p, b) in &section {
                            root.node_at_mut(p).unwrap().bbox = if expanded {
                                dom::BBox::new(anchor.x, anchor.y, 0, 0)
                            } else {
                                *b
                            };
                        }
                    })?;
                    return Ok(None);
                }
            }
            _ => {}
        }
        self.generic_click(path)?;
        Ok(None)
    }

    fn generic_click(&mut self, path: &NodePath) -> Result<(), EnvError> {
        let tag = self.node(path).tag.clone();
        match tag.as_str() {
            "input_checkbox" => self.edit(|root| {
                let n = root.node_at_mut(path).unwrap();
                n.flags.checked = !n.flags.checked;
            }),
            "option" => self.select_option(path),
            "input_text" => self.focus(path),
            _ => Ok(()),
        }
    }

    fn select_option(&mut self, path: &NodePath) -> Result<(), EnvError> {
        let Some((&idx, parent)) = path.split_last() else {
            return Ok(());
        };
        if self.node(parent).tag != "select" {
            return Ok(());
        }
        self.edit(|root| {
            let select = root.node_at_mut(parent).unwrap();
            for (i, o) in select.children.iter_mut().enumerate() {
                o.flags.selected = i == idx;
            }
            select.value = select.children[idx].text.clone();
        })
    }

    fn focus(&mut self, path: &NodePath) -> Result<(), EnvError> {
        self.edit(|root| {
            fn clear(n: &mut DomNode) {
                n.flags.focused = false;
                n.children.iter_mut().for_each(clear);
            }
            clear(root);
            root.node_at_mut(path).unwrap().flags.focused = true;
        })
    }

    fn apply_type(&mut self, path: &NodePath, text: &str) -> Result<Option<f64>, EnvError> {
        let node = self.node(path);
        match node.tag.as_str() {
            "input_text" => {
                self.focus(path)?;
                let text = text.to_string();
                self.edit(|root| root.node_at_mut(path).unwrap().value = text)?;
            }
            "select" => {
                if let Some(i) = node
                    .children
                    .iter()
                    .position(|o| o.text.eq_ignore_ascii_case(text.trim()))
                {
                    let mut p = path.clone();
                    p.push(i);
                    self.select_option(&p)?;
                }
            }
            _ => {}
        }
        Ok(None)
    }

    fn check_auto_success(&self) -> Option<f64> {
        match &self.goal {
            Goal::BookFlight { selects, targets } => selects
                .iter()
                .zip(targets)
                .all(|(p, t)| self.node(p).value == *t)
                .then_some(1.0),
            _ => None,
        }
    }
}
