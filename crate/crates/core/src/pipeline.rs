//! Demonstration ingestion, cleaning and down-sampling.
//!
//! Raw demonstrations are event streams (clicks and single keydowns) paired
//! with the page snapshot each event was recorded against. Cleaning turns
//! them into [`ProcessedEpisode`]s of whole [`Action`]s by applying, in
//! order:
//!
//! 1. drop clicks on `body` nodes;
//! 2. merge each maximal run of consecutive keydowns on one ref into a
//!    single `type_text` action;
//! 3. keep only the last `type_text` per ref;
//! 4. drop exact-duplicate actions, keeping the last occurrence.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::dom::{DomSnapshot, Ref, RefMode, RefPermutation, MAX_REFS};
use crate::env::{self, Action, EnvError, TaskName, TraceRecord, WORDS};
use crate::text::{mix_seed, stable_hash};

/// Non-character keys accepted in keydown events. They are recorded but
/// contribute no text when keydowns are merged.
pub const CONTROL_KEYS: [&str; 14] = [
    "Shift",
    "Control",
    "Alt",
    "Meta",
    "CapsLock",
    "Tab",
    "Enter",
    "Escape",
    "Backspace",
    "Delete",
    "ArrowLeft",
    "ArrowRight",
    "ArrowUp",
    "ArrowDown",
];

/// Default per-task episode cap for [`downsample`].
pub const DEFAULT_CAP: usize = 150;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("field `{field}`: {message}")]
    Schema { field: String, message: String },
    #[error("line {line}: {source}")]
    Line {
        line: usize,
        #[source]
        source: Box<PipelineError>,
    },
    #[error("invalid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("down-sampling cap must be positive")]
    ZeroCap,
    #[error("patch: {0}")]
    Patch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Env(#[from] EnvError),
}

fn schema(field: impl Into<String>, message: impl Into<String>) -> PipelineError {
    PipelineError::Schema {
        field: field.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Click,
    Keydown,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawEvent {
    #[serde(rename = "type")]
    pub kind: EventKind,
    #[serde(rename = "ref")]
    pub target: Ref,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key: Option<String>,
    pub timestamp: u64,
}

impl RawEvent {
    pub fn click(target: Ref, timestamp: u64) -> Self {
        Self {
            kind: EventKind::Click,
            target,
            key: None,
            timestamp,
        }
    }

    pub fn keydown(target: Ref, key: impl Into<String>, timestamp: u64) -> Self {
        Self {
            kind: EventKind::Keydown,
            target,
            key: Some(key.into()),
            timestamp,
        }
    }
}

/// A recorded demonstration; `snapshots[i]` is the page `events[i]` was
/// recorded against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawDemonstration {
    pub id: String,
    pub task: String,
    pub utterance: String,
    pub events: Vec<RawEvent>,
    pub snapshots: Vec<DomSnapshot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessedStep {
    pub snapshot: DomSnapshot,
    pub action: Action,
}

/// A cleaned demonstration: the unit of behavioral-cloning data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessedEpisode {
    pub id: String,
    pub task: String,
    pub utterance: String,
    pub steps: Vec<ProcessedStep>,
}

impl ProcessedEpisode {
    pub fn actions(&self) -> impl Iterator<Item = &Action> {
        self.steps.iter().map(|s| &s.action)
    }

    /// Checks the post-cleaning invariants: no body clicks, at most one
    /// `type_text` per ref, no repeated action.
    pub fn check_invariants(&self) -> Result<(), String> {
        let mut typed = std::collections::HashSet::new();
        let mut seen = std::collections::HashSet::new();
        for (i, s) in self.steps.iter().enumerate() {
            if s.action.is_click() && s.snapshot.node(s.action.target()).is_some_and(|n| n.tag == "body") {
                return Err(format!("step {i} clicks body"));
            }
            if !s.action.is_click() && !typed.insert(s.action.target()) {
                return Err(format!("step {i} types into ref {} again", s.action.target()));
            }
            if !seen.insert(&s.action) {
                return Err(format!("step {i} repeats {}", s.action));
            }
        }
        Ok(())
    }

    /// The same episode with refs relabeled by a fresh scatter permutation
    /// per step. Returns `None` if a step's action targets a ref absent from
    /// its snapshot.
    pub fn relabeled(&self, seed: u64) -> Option<ProcessedEpisode> {
        let mut steps = Vec::with_capacity(self.steps.len());
        let perm_seed = mix_seed(seed, stable_hash(&self.id));
        let perm = RefPermutation::scatter(self.steps.first()?.snapshot.refs(), perm_seed).ok()?;
        for s in &self.steps {
            if perm.domain() != s.snapshot.ref_set() {
                return None;
            }
            steps.push(ProcessedStep {
                snapshot: crate::dom::permute_refs(&s.snapshot, &perm).ok()?,
                action: s.action.permuted(&perm)?,
            });
        }
        Some(ProcessedEpisode {
            steps,
            ..self.clone()
        })
    }
}

fn is_valid_key(key: &str) -> bool {
    key.chars().count() == 1 || CONTROL_KEYS.contains(&key)
}

fn get<'a>(obj: &'a Map<String, Value>, field: &str, path: &str) -> Result<&'a Value, PipelineError> {
    obj.get(field).ok_or_else(|| schema(format!("{path}{field}"), "missing"))
}

fn get_str(obj: &Map<String, Value>, field: &str, path: &str) -> Result<String, PipelineError> {
    get(obj, field, path)?
        .as_str()
        .map(str::to_string)
        .ok_or_else(|| schema(format!("{path}{field}"), "expected a string"))
}

fn get_u64(obj: &Map<String, Value>, field: &str, path: &str) -> Result<u64, PipelineError> {
    get(obj, field, path)?
        .as_u64()
        .ok_or_else(|| schema(format!("{path}{field}"), "expected a non-negative integer"))
}

fn parse_event(v: &Value, i: usize) -> Result<RawEvent, PipelineError> {
    let path = format!("events[{i}].");
    let obj = v
        .as_object()
        .ok_or_else(|| schema(format!("events[{i}]"), "expected an object"))?;
    let kind = match get_str(obj, "type", &path)?.as_str() {
        "click" => EventKind::Click,
        "keydown" => EventKind::Keydown,
        other => return Err(schema(format!("{path}type"), format!("unknown event type `{other}`"))),
    };
    let target = get_u64(obj, "ref", &path)?;
    if target == 0 || target > MAX_REFS as u64 {
        return Err(schema(format!("{path}ref"), format!("{target} outside 1..={MAX_REFS}")));
    }
    let key = match (kind, obj.get("key")) {
        (EventKind::Keydown, Some(Value::String(k))) if is_valid_key(k) => Some(k.clone()),
        (EventKind::Keydown, Some(Value::String(k))) => {
            return Err(schema(format!("{path}key"), format!("`{k}` is not a single character or control key")))
        }
        (EventKind::Keydown, Some(_)) => return Err(schema(format!("{path}key"), "expected a string")),
        (EventKind::Keydown, None) => return Err(schema(format!("{path}key"), "missing")),
        (EventKind::Click, None | Some(Value::Null)) => None,
        (EventKind::Click, Some(_)) => return Err(schema(format!("{path}key"), "clicks carry no key")),
    };
    let timestamp = get_u64(obj, "timestamp", &path)?;
    Ok(RawEvent {
        kind,
        target: target as Ref,
        key,
        timestamp,
    })
}

/// Parses and validates one demonstration record.
pub fn parse_demonstration(json: &str) -> Result<RawDemonstration, PipelineError> {
    let v: Value = serde_json::from_str(json)?;
    let obj = v.as_object().ok_or_else(|| schema("$", "expected an object"))?;
    let id = get_str(obj, "id", "")?;
    let task = get_str(obj, "task", "")?;
    let utterance = get_str(obj, "utterance", "")?;
    let events = get(obj, "events", "")?
        .as_array()
        .ok_or_else(|| schema("events", "expected an array"))?
        .iter()
        .enumerate()
        .map(|(i, e)| parse_event(e, i))
        .collect::<Result<Vec<_>, _>>()?;
    for i in 1..events.len() {
        if events[i].timestamp < events[i - 1].timestamp {
            return Err(schema(format!("events[{i}].timestamp"), "timestamps must be nondecreasing"));
        }
    }
    let snapshots = get(obj, "snapshots", "")?
        .as_array()
        .ok_or_else(|| schema("snapshots", "expected an array"))?
        .iter()
        .enumerate()
        .map(|(i, s)| {
            DomSnapshot::deserialize(s).map_err(|e| schema(format!("snapshots[{i}]"), e.to_string()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    if snapshots.len() != events.len() {
        return Err(schema(
            "snapshots",
            format!("{} snapshots for {} events", snapshots.len(), events.len()),
        ));
    }
    Ok(RawDemonstration {
        id,
        task,
        utterance,
        events,
        snapshots,
    })
}

/// Removes exact duplicates, keeping the last occurrence of each.
fn dedup_keep_last<T, K: Eq + std::hash::Hash>(items: Vec<T>, key: impl Fn(&T) -> K) -> Vec<T> {
    let mut last = HashMap::new();
    for (i, it) in items.iter().enumerate() {
        last.insert(key(it), i);
    }
    items
        .into_iter()
        .enumerate()
        .filter(|(i, it)| last[&key(it)] == *i)
        .map(|(_, it)| it)
        .collect()
}

/// Applies the four cleaning rules.
pub fn clean_actions(raw: &RawDemonstration) -> ProcessedEpisode {
    // rule 1
    let kept = raw.events.iter().zip(&raw.snapshots).filter(|(e, s)| {
        !(e.kind == EventKind::Click && s.node(e.target).is_some_and(|n| n.tag == "body"))
    });
    // rule 2
    let mut merged: Vec<ProcessedStep> = Vec::new();
    let mut open_run = false;
    for (e, s) in kept {
        match e.kind {
            EventKind::Click => {
                merged.push(ProcessedStep {
                    snapshot: s.clone(),
                    action: Action::click(e.target),
                });
                open_run = false;
            }
            EventKind::Keydown => {
                let key = e.key.as_deref().unwrap_or_default();
                let ch = if CONTROL_KEYS.contains(&key) { "" } else { key };
                match merged.last_mut() {
                    Some(ProcessedStep {
                        action: Action::TypeText { target, text },
                        ..
                    }) if open_run && *target == e.target => text.push_str(ch),
                    _ => merged.push(ProcessedStep {
                        snapshot: s.clone(),
                        action: Action::type_text(e.target, ch),
                    }),
                }
                open_run = true;
            }
        }
    }
    // rule 3
    let mut last_typed = HashMap::new();
    for (i, s) in merged.iter().enumerate() {
        if !s.action.is_click() {
            last_typed.insert(s.action.target(), i);
        }
    }
    let merged: Vec<ProcessedStep> = merged
        .into_iter()
        .enumerate()
        .filter(|(i, s)| s.action.is_click() || last_typed[&s.action.target()] == *i)
        .map(|(_, s)| s)
        .collect();
    // rule 4
    let steps = dedup_keep_last(merged, |s| s.action.clone());
    ProcessedEpisode {
        id: raw.id.clone(),
        task: raw.task.clone(),
        utterance: raw.utterance.clone(),
        steps,
    }
}

/// Turns a processed episode back into an event stream: one click event per
/// click, one keydown per character per `type_text` (a lone `Shift` for
/// empty text).
pub fn rewrap(ep: &ProcessedEpisode) -> RawDemonstration {
    let mut events = Vec::new();
    let mut snapshots = Vec::new();
    let mut t = 0;
    for s in &ep.steps {
        let keys: Vec<String> = match &s.action {
            Action::Click { target } => {
                events.push(RawEvent::click(*target, t));
                snapshots.push(s.snapshot.clone());
                t += 1;
                continue;
            }
            Action::TypeText { text, .. } if text.is_empty() => vec!["Shift".into()],
            Action::TypeText { text, .. } => text.chars().map(String::from).collect(),
        };
        for k in keys {
            events.push(RawEvent::keydown(s.action.target(), k, t));
            snapshots.push(s.snapshot.clone());
            t += 1;
        }
    }
    RawDemonstration {
        id: ep.id.clone(),
        task: ep.task.clone(),
        utterance: ep.utterance.clone(),
        events,
        snapshots,
    }
}

/// A manual correction: replace (or, with `action: null`, delete) one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Patch {
    pub episode: String,
    pub index: usize,
    pub action: Option<Action>,
}

pub fn parse_patches(json: &str) -> Result<Vec<Patch>, PipelineError> {
    Ok(serde_json::from_str(json)?)
}

/// Applies patches. Deletions within one episode are applied from the
/// highest index down so indices always refer to the unpatched episode.
pub fn apply_patches(episodes: &mut [ProcessedEpisode], patches: &[Patch]) -> Result<(), PipelineError> {
    let mut by_episode: BTreeMap<&str, Vec<&Patch>> = BTreeMap::new();
    for p in patches {
        by_episode.entry(p.episode.as_str()).or_default().push(p);
    }
    for (id, mut ps) in by_episode {
        let ep = episodes
            .iter_mut()
            .find(|e| e.id == id)
            .ok_or_else(|| PipelineError::Patch(format!("no episode `{id}`")))?;
        ps.sort_by_key(|p| std::cmp::Reverse(p.index));
        for p in ps {
            if p.index >= ep.steps.len() {
                return Err(PipelineError::Patch(format!(
                    "episode `{id}` has no step {}",
                    p.index
                )));
            }
            match &p.action {
                Some(a) => {
                    a.validate()?;
                    ep.steps[p.index].action = a.clone();
                }
                None => {
                    ep.steps.remove(p.index);
                }
            }
        }
    }
    Ok(())
}

/// Keeps at most `cap` episodes per task, chosen uniformly with a per-task
/// seeded sampler; the original order is preserved.
pub fn downsample(
    dataset: Vec<ProcessedEpisode>,
    cap: usize,
    seed: u64,
) -> Result<Vec<ProcessedEpisode>, PipelineError> {
    if cap == 0 {
        return Err(PipelineError::ZeroCap);
    }
    let mut by_task: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, ep) in dataset.iter().enumerate() {
        by_task.entry(ep.task.as_str()).or_default().push(i);
    }
    let mut keep = vec![false; dataset.len()];
    for (task, idx) in by_task {
        if idx.len() <= cap {
            idx.iter().for_each(|&i| keep[i] = true);
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, stable_hash(task)));
            for j in rand::seq::index::sample(&mut rng, idx.len(), cap) {
                keep[idx[j]] = true;
            }
        }
    }
    Ok(dataset
        .into_iter()
        .zip(keep)
        .filter(|(_, k)| *k)
        .map(|(e, _)| e)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetStats {
    pub per_task_counts: BTreeMap<String, usize>,
    pub mean_per_task: f64,
}

pub fn dataset_stats(dataset: &[ProcessedEpisode]) -> DatasetStats {
    let mut per_task_counts = BTreeMap::new();
    for ep in dataset {
        *per_task_counts.entry(ep.task.clone()).or_insert(0) += 1;
    }
    let mean_per_task = if per_task_counts.is_empty() {
        0.0
    } else {
        dataset.len() as f64 / per_task_counts.len() as f64
    };
    DatasetStats {
        per_task_counts,
        mean_per_task,
    }
}

/// Writes `task,count` rows.
pub fn write_stats_csv(stats: &DatasetStats, w: impl Write) -> Result<(), PipelineError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["task", "count"])?;
    for (task, n) in &stats.per_task_counts {
        out.write_record([task.as_str(), &n.to_string()])?;
    }
    out.flush()?;
    Ok(())
}

/// Writes any serializable records as JSON lines.
pub fn write_jsonl<T: Serialize>(items: &[T], mut w: impl Write) -> Result<(), PipelineError> {
    for it in items {
        serde_json::to_writer(&mut w, it)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_lines<T>(r: impl BufRead, parse: impl Fn(&str) -> Result<T, PipelineError>) -> Result<Vec<T>, PipelineError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse(&line).map_err(|e| PipelineError::Line {
            line: i + 1,
            source: Box::new(e),
        })?);
    }
    Ok(out)
}

pub fn read_demonstrations(r: impl BufRead) -> Result<Vec<RawDemonstration>, PipelineError> {
    read_lines(r, parse_demonstration)
}

pub fn read_episodes(r: impl BufRead) -> Result<Vec<ProcessedEpisode>, PipelineError> {
    read_lines(r, |l| Ok(serde_json::from_str(l)?))
}

/// Serializes a demonstration to the raw JSON schema.
pub fn demonstration_to_json(demo: &RawDemonstration) -> String {
    json!(demo).to_string()
}

/// Kinds of recording noise injected by [`generate_demonstrations`], each
/// exercising one cleaning rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseProfile {
    None,
    /// Repeated clicks on the same element.
    DupClicks,
    /// Clicks on the page body.
    StrayBody,
    /// A mistyped entry, a refocusing click, then the correct entry.
    Retype,
    All,
}

impl NoiseProfile {
    fn has(self, p: NoiseProfile) -> bool {
        self == p || self == NoiseProfile::All
    }
}

impl std::str::FromStr for NoiseProfile {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Self::None),
            "dup-clicks" => Ok(Self::DupClicks),
            "stray-body" => Ok(Self::StrayBody),
            "retype" => Ok(Self::Retype),
            "all" => Ok(Self::All),
            _ => Err(format!(
                "unknown noise profile `{s}` (expected none|dup-clicks|stray-body|retype|all)"
            )),
        }
    }
}

struct Recorder {
    events: Vec<RawEvent>,
    snapshots: Vec<DomSnapshot>,
    clock: u64,
}

impl Recorder {
    fn push(&mut self, rng: &mut ChaCha8Rng, event: impl FnOnce(u64) -> RawEvent, snapshot: &DomSnapshot) {
        self.clock += rng.gen_range(40..400);
        self.events.push(event(self.clock));
        self.snapshots.push(snapshot.clone());
    }

    fn type_text(&mut self, rng: &mut ChaCha8Rng, target: Ref, text: &str, snapshot: &DomSnapshot) {
        for c in text.chars() {
            self.push(rng, |t| RawEvent::keydown(target, c.to_string(), t), snapshot);
        }
    }
}

/// Seed of the `index`-th generated episode of a task.
pub fn demo_seed(seed: u64, task: TaskName, index: u64) -> u64 {
    mix_seed(seed.wrapping_add(index), stable_hash(task.as_str()))
}

/// Converts an oracle trace into a raw demonstration, with optional noise.
pub fn demonstration_from_trace(
    id: impl Into<String>,
    utterance: impl Into<String>,
    trace: &[TraceRecord],
    noise: NoiseProfile,
    noise_seed: u64,
) -> RawDemonstration {
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let mut rec = Recorder {
        events: Vec::new(),
        snapshots: Vec::new(),
        clock: 0,
    };
    for step in trace {
        let dom = &step.dom;
        let body = dom.root().ref_id.expect("snapshot roots carry refs");
        if noise.has(NoiseProfile::StrayBody) && rng.gen_bool(0.4) {
            rec.push(&mut rng, |t| RawEvent::click(body, t), dom);
        }
        match &step.action {
            Action::Click { target } => {
                let copies = if noise.has(NoiseProfile::DupClicks) && rng.gen_bool(0.5) { 2 } else { 1 };
                for _ in 0..copies {
                    rec.push(&mut rng, |t| RawEvent::click(*target, t), dom);
                }
            }
            Action::TypeText { target, text } => {
                if noise.has(NoiseProfile::Retype) {
                    let typo = WORDS.choose(&mut rng).unwrap();
                    rec.type_text(&mut rng, *target, typo, dom);
                    rec.push(&mut rng, |t| RawEvent::click(*target, t), dom);
                }
                if noise != NoiseProfile::None && rng.gen_bool(0.3) {
                    rec.push(&mut rng, |t| RawEvent::keydown(*target, "Shift", t), dom);
                }
                rec.type_text(&mut rng, *target, text, dom);
            }
        }
    }
    let first = trace.first().map(|r| r.task.as_str()).unwrap_or_default();
    RawDemonstration {
        id: id.into(),
        task: first.to_string(),
        utterance: utterance.into(),
        events: rec.events,
        snapshots: rec.snapshots,
    }
}

/// Runs the oracle on `count` instances per task and records noisy event
/// streams.
pub fn generate_demonstrations(
    tasks: &[TaskName],
    count: usize,
    seed: u64,
    ref_mode: RefMode,
    noise: NoiseProfile,
) -> Result<Vec<RawDemonstration>, PipelineError> {
    let mut out = Vec::with_capacity(tasks.len() * count);
    for &task in tasks {
        for i in 0..count as u64 {
            let s = demo_seed(seed, task, i);
            let (state, _) = env::reset(task, s, ref_mode)?;
            let trace = env::oracle_trace(task, s, ref_mode)?;
            out.push(demonstration_from_trace(
                format!("{task}-{i}"),
                state.utterance,
                &trace,
                noise,
                mix_seed(s, 0xD1_5EA5E),
            ));
        }
    }
    Ok(out)
}
