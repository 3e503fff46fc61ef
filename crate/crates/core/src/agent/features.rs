//! Observation encoding.
//!
//! An observation becomes a dense vector with five fixed segments plus one
//! feature row per candidate ref. The ref head scores candidates through
//! their rows, so what the policy learns does not depend on the numeric
//! value of a ref.

use std::collections::HashSet;

use super::vocab::Vocabulary;
use super::Ablation;
use crate::dom::{tag_code, DomNode, DomSnapshot, Ref, NUM_TAG_CODES, OTHER_TAG_CODE, PAGE_SIZE};
use crate::env::{synonym_groups, Action, Observation, MAX_TYPED_TOKENS};
use crate::text::{quoted_span, stable_hash, tokenize};

pub const UTTERANCE_DIM: usize = 256;
pub const SUBTASK_DIM: usize = 256;
pub const DOM_DIM: usize = 128;
pub const RASTER_DIM: usize = 1024;
pub const HISTORY_DIM: usize = 64;
pub const FEATURE_DIM: usize = UTTERANCE_DIM + SUBTASK_DIM + DOM_DIM + RASTER_DIM + HISTORY_DIM;

pub const UTTERANCE_RANGE: std::ops::Range<usize> = 0..UTTERANCE_DIM;
pub const SUBTASK_RANGE: std::ops::Range<usize> = UTTERANCE_DIM..UTTERANCE_DIM + SUBTASK_DIM;
pub const DOM_RANGE: std::ops::Range<usize> = SUBTASK_RANGE.end..SUBTASK_RANGE.end + DOM_DIM;
pub const RASTER_RANGE: std::ops::Range<usize> = DOM_RANGE.end..DOM_RANGE.end + RASTER_DIM;
pub const HISTORY_RANGE: std::ops::Range<usize> = RASTER_RANGE.end..FEATURE_DIM;

/// Subtask-independent columns of a candidate row.
pub const STATIC_DIM: usize = 32;
/// Columns relating a candidate to the current subtask.
pub const QUERY_DIM: usize = 8;
pub const ROW_DIM: usize = STATIC_DIM + QUERY_DIM;

/// Number of past actions encoded in the history segment.
pub const HISTORY_LEN: usize = 4;
const HISTORY_SLOT: usize = HISTORY_DIM / HISTORY_LEN;

/// One candidate element.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub target: Ref,
    pub row: [f64; ROW_DIM],
}

/// Everything the network reads for one decision.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub dense: Vec<f64>,
    /// Candidates in increasing ref order.
    pub candidates: Vec<Candidate>,
    /// Vocabulary indices of the tokens quoted in the subtask, one per
    /// keydown slot.
    pub copy_tokens: Vec<usize>,
}

impl Encoded {
    pub fn refs(&self) -> impl Iterator<Item = Ref> + '_ {
        self.candidates.iter().map(|c| c.target)
    }
}

fn hashed_bow(text: &str, out: &mut [f64]) {
    for tok in tokenize(text) {
        out[(stable_hash(&tok) % out.len() as u64) as usize] = 1.0;
    }
}

fn node_tokens(node: &DomNode) -> Vec<String> {
    tokenize(&node.text)
}

fn attr_tokens(node: &DomNode) -> Vec<String> {
    let mut t = Vec::new();
    for key in ["id", "class"] {
        if let Some(v) = node.attrs.get(key) {
            t.extend(tokenize(v));
        }
    }
    t
}

fn numeric(node: &DomNode) -> Option<i64> {
    node.value
        .trim()
        .parse()
        .ok()
        .or_else(|| node.text.trim().parse().ok())
}

fn static_row(node: &DomNode, depth: usize) -> [f64; STATIC_DIM] {
    let mut r = [0.0; STATIC_DIM];
    let code = tag_code(&node.tag).min(OTHER_TAG_CODE) as usize;
    r[code - 1] = 1.0;
    let b = node.bbox;
    let page = f64::from(PAGE_SIZE);
    r[14] = f64::from(u8::from(node.flags.checked));
    r[15] = f64::from(u8::from(node.flags.selected));
    r[16] = f64::from(u8::from(node.flags.focused));
    r[17] = f64::from(b.x) / page;
    r[18] = f64::from(b.y) / page;
    r[19] = f64::from(b.w) / page;
    r[20] = f64::from(b.h) / page;
    r[21] = f64::from(u8::from(b.area() > 0));
    r[22] = f64::from(u8::from(!node.value.is_empty()));
    r[23] = f64::from(u8::from(!node.text.is_empty()));
    r[24] = f64::from(u8::from(node.children.is_empty()));
    r[25] = depth as f64 / 8.0;
    r[26] = (node.children.len() as f64 / 8.0).min(1.0);
    r[27] = node
        .value
        .trim()
        .parse::<f64>()
        .map(|v| (v / 10.0).clamp(-1.0, 1.0))
        .unwrap_or(0.0);
    r[28] = (node.text.chars().count() as f64 / 16.0).min(1.0);
    r[29] = (f64::from(b.x) + f64::from(b.w) / 2.0) / page;
    r[30] = (f64::from(b.y) + f64::from(b.h) / 2.0) / page;
    r[31] = f64::from(u8::from(b.area() > 0 && b.y + b.h <= 50 && b.w < PAGE_SIZE));
    r
}

struct Query {
    tokens: Vec<String>,
    quoted: Option<String>,
    numbers: Vec<i64>,
    related: HashSet<&'static str>,
}

impl Query {
    fn new(subtask: &str) -> Self {
        let tokens = tokenize(subtask);
        let numbers = tokens.iter().filter_map(|t| t.parse().ok()).collect();
        let mut related = HashSet::new();
        for group in synonym_groups() {
            if group.iter().any(|w| tokens.iter().any(|t| t == w)) {
                related.extend(group.iter().copied());
            }
        }
        Self {
            quoted: quoted_span(subtask).map(|q| q.trim().to_lowercase()),
            tokens,
            numbers,
            related,
        }
    }

    fn row(&self, node: &DomNode, parent: Option<&DomNode>) -> [f64; QUERY_DIM] {
        let text = node_tokens(node);
        let attrs = attr_tokens(node);
        let parent_tokens: Vec<String> = parent
            .map(|p| node_tokens(p).into_iter().chain(attr_tokens(p)).collect())
            .unwrap_or_default();
        let overlap = |toks: &[String]| crate::text::overlap_fraction(toks, &self.tokens);
        let quoted = self.quoted.as_deref().filter(|q| !q.is_empty());
        let any = text.iter().chain(&attrs).any(|t| self.tokens.contains(t));
        let related = text
            .iter()
            .any(|t| self.related.contains(t.as_str()) && !self.tokens.contains(t));
        [
            overlap(&text),
            overlap(&attrs),
            overlap(&parent_tokens),
            f64::from(u8::from(quoted.is_some_and(|q| node.text.trim().eq_ignore_ascii_case(q)))),
            f64::from(u8::from(quoted.is_some_and(|q| node.value.trim().eq_ignore_ascii_case(q)))),
            f64::from(u8::from(numeric(node).is_some_and(|n| self.numbers.contains(&n)))),
            f64::from(u8::from(any)),
            f64::from(u8::from(related)),
        ]
    }
}

/// Encodes one decision point.
///
/// `no_plan` replaces the subtask by the full utterance, `no_vision` zeroes
/// the raster segment and `no_history` zeroes the history segment; nothing
/// else changes.
pub fn encode_features(
    obs: &Observation,
    history: &[Action],
    subtask: &str,
    ablation: Ablation,
    vocab: &Vocabulary,
) -> Encoded {
    let subtask = if ablation == Ablation::NoPlan { obs.utterance.as_str() } else { subtask };
    let snapshot = &obs.snapshot;
    let mut dense = vec![0.0; FEATURE_DIM];
    hashed_bow(&obs.utterance, &mut dense[UTTERANCE_RANGE]);
    hashed_bow(subtask, &mut dense[SUBTASK_RANGE]);

    let query = Query::new(subtask);
    let mut candidates = Vec::with_capacity(snapshot.len());
    let mut pooled = [[0.0; STATIC_DIM]; 4];
    let (mut visible, mut marked) = (0usize, 0usize);
    for (&r, path) in snapshot.ref_index() {
        let node = snapshot.node_at(path).expect("indexed path");
        let s = static_row(node, path.len());
        if node.bbox.area() > 0 {
            visible += 1;
            for k in 0..STATIC_DIM {
                pooled[0][k] += s[k];
                pooled[1][k] = f64::max(pooled[1][k], s[k]);
            }
        }
        if node.flags.focused {
            pooled[2] = s;
        }
        if node.flags.checked || node.flags.selected {
            marked += 1;
            for k in 0..STATIC_DIM {
                pooled[3][k] += s[k];
            }
        }
        let q = query.row(node, snapshot.parent(r));
        let mut row = [0.0; ROW_DIM];
        row[..STATIC_DIM].copy_from_slice(&s);
        row[STATIC_DIM..].copy_from_slice(&q);
        candidates.push(Candidate { target: r, row });
    }
    pooled[0].iter_mut().for_each(|x| *x /= visible.max(1) as f64);
    pooled[3].iter_mut().for_each(|x| *x /= marked.max(1) as f64);
    for (i, p) in pooled.iter().enumerate() {
        let start = DOM_RANGE.start + i * STATIC_DIM;
        dense[start..start + STATIC_DIM].copy_from_slice(p);
    }

    if ablation != Ablation::NoVision {
        let scale = NUM_TAG_CODES as f64;
        for (d, &c) in dense[RASTER_RANGE].iter_mut().zip(obs.raster.cells()) {
            *d = f64::from(c) / scale;
        }
    }

    if ablation != Ablation::NoHistory {
        encode_history(history, snapshot, &mut dense[HISTORY_RANGE]);
    }

    let copy_tokens = quoted_span(subtask)
        .map(|q| tokenize(q).iter().filter_map(|t| vocab.lookup(t)).take(MAX_TYPED_TOKENS).collect())
        .unwrap_or_default();

    Encoded {
        dense,
        candidates,
        copy_tokens,
    }
}

fn encode_history(history: &[Action], snapshot: &DomSnapshot, out: &mut [f64]) {
    for (slot, action) in history.iter().rev().take(HISTORY_LEN).enumerate() {
        let o = &mut out[slot * HISTORY_SLOT..(slot + 1) * HISTORY_SLOT];
        o[usize::from(!action.is_click())] = 1.0;
        if let Some(node) = snapshot.node(action.target()) {
            o[1 + tag_code(&node.tag) as usize] = 1.0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dom::RefMode;
    use crate::env::{oracle_policy, reset, TaskName};

    fn vocab() -> Vocabulary {
        Vocabulary::build(crate::env::WORDS.iter().copied())
    }

    #[test]
    fn dimensions_add_up() {
        assert_eq!(FEATURE_DIM, 1728);
        assert_eq!(HISTORY_RANGE.len(), 64);
        assert_eq!(DOM_DIM, 4 * STATIC_DIM);
        assert_eq!(HISTORY_SLOT, 2 + NUM_TAG_CODES);
    }

    #[test]
    fn ablations_touch_only_their_segment() {
        let v = vocab();
        for task in TaskName::ALL {
            let (mut s, _) = reset(task, 3, RefMode::Ordered).unwrap();
            let a = oracle_policy(&s);
            s.step(&a).unwrap();
            let obs = s.observation().unwrap();
            let hist = vec![a];
            let base = encode_features(&obs, &hist, "click submit", Ablation::None, &v);
            assert_eq!(base, encode_features(&obs, &hist, "click submit", Ablation::None, &v));
            for (mode, range) in [
                (Ablation::NoHistory, HISTORY_RANGE),
                (Ablation::NoVision, RASTER_RANGE),
                (Ablation::NoPlan, SUBTASK_RANGE),
            ] {
                let e = encode_features(&obs, &hist, "click submit", mode, &v);
                for i in 0..FEATURE_DIM {
                    if !range.contains(&i) {
                        assert_eq!(e.dense[i], base.dense[i], "{mode:?} coordinate {i}");
                    }
                }
                if mode != Ablation::NoPlan {
                    assert!(e.dense[range.clone()].iter().all(|&x| x == 0.0));
                    assert_eq!(e.candidates, base.candidates);
                }
            }
        }
    }

    #[test]
    fn quoted_word_marks_the_matching_button() {
        let v = vocab();
        let (s, obs) = reset(TaskName::ClickButton, 8, RefMode::Randomized).unwrap();
        let e = encode_features(&obs, &[], &s.utterance, Ablation::None, &v);
        let target = oracle_policy(&s).target();
        for c in &e.candidates {
            assert_eq!(c.row[STATIC_DIM + 3] == 1.0, c.target == target);
        }
        assert_eq!(e.copy_tokens.len(), 1);
    }
}
