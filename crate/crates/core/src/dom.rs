//! DOM trees with reference numbers.
//!
//! A [`DomSnapshot`] is the agent's structured observation: an attributed
//! element tree in which every node carries a unique reference number
//! ("ref") in `1..=500`. Refs are the only handle an action can use to name
//! an element, so they can be assigned in document order or scrambled to
//! check whether a model reads element content or just memorizes positions.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pipeline::ProcessedEpisode;

/// Reference number of a DOM element.
pub type Ref = u16;

/// Highest assignable ref; also the width of the policy's ref head.
pub const MAX_REFS: usize = 500;
/// Page edge length in abstract page units.
pub const PAGE_SIZE: i32 = 160;
/// Raster edge length in cells.
pub const RASTER_SIZE: usize = 32;
const RASTER_SCALE: i32 = PAGE_SIZE / RASTER_SIZE as i32;

/// Tags with a dedicated raster code, in code order starting at 1.
pub const TAG_TABLE: [&str; 13] = [
    "body",
    "div",
    "span",
    "p",
    "h3",
    "label",
    "button",
    "input_text",
    "input_checkbox",
    "select",
    "option",
    "a",
    "form",
];
/// Code shared by every tag missing from [`TAG_TABLE`].
pub const OTHER_TAG_CODE: u8 = TAG_TABLE.len() as u8 + 1;
/// Number of nonzero tag codes.
pub const NUM_TAG_CODES: usize = TAG_TABLE.len() + 1;

/// Raster code for a tag, in `1..=NUM_TAG_CODES`.
pub fn tag_code(tag: &str) -> u8 {
    TAG_TABLE
        .iter()
        .position(|t| *t == tag)
        .map(|i| i as u8 + 1)
        .unwrap_or(OTHER_TAG_CODE)
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DomError {
    #[error("tree has {0} nodes, capacity is {MAX_REFS}")]
    Capacity(usize),
    #[error("node at {0:?} already has a ref")]
    RefsAlreadyAssigned(Vec<usize>),
    #[error("node at {0:?} has no ref")]
    MissingRef(Vec<usize>),
    #[error("ref {0} is used more than once")]
    DuplicateRef(Ref),
    #[error("ref {0} is outside 1..={MAX_REFS}")]
    RefOutOfRange(Ref),
    #[error("node at {0:?} has an empty tag")]
    EmptyTag(Vec<usize>),
    #[error("bbox of node at {0:?} is not contained in its parent")]
    BBoxNotContained(Vec<usize>),
    #[error("bbox of node at {0:?} lies outside the {PAGE_SIZE}x{PAGE_SIZE} page")]
    OutOfPage(Vec<usize>),
    #[error("invalid permutation: {0}")]
    InvalidPermutation(String),
}

/// Axis-aligned rectangle in page units. Serialized as `[x, y, w, h]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(from = "[i32; 4]", into = "[i32; 4]")]
pub struct BBox {
    pub x: i32,
    pub y: i32,
    pub w: i32,
    pub h: i32,
}

impl BBox {
    pub const fn new(x: i32, y: i32, w: i32, h: i32) -> Self {
        Self { x, y, w, h }
    }

    pub const fn page() -> Self {
        Self::new(0, 0, PAGE_SIZE, PAGE_SIZE)
    }

    pub fn area(&self) -> i64 {
        i64::from(self.w.max(0)) * i64::from(self.h.max(0))
    }

    pub fn contains(&self, other: &BBox) -> bool {
        other.x >= self.x
            && other.y >= self.y
            && other.x + other.w <= self.x + self.w
            && other.y + other.h <= self.y + self.h
    }

    pub fn within_page(&self) -> bool {
        self.w >= 0 && self.h >= 0 && BBox::page().contains(self)
    }
}

impl From<[i32; 4]> for BBox {
    fn from(v: [i32; 4]) -> Self {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [i32; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

/// Boolean element state. Serialized as a list of the set flag names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Flags {
    pub checked: bool,
    pub selected: bool,
    pub focused: bool,
}

impl TryFrom<Vec<String>> for Flags {
    type Error = String;

    fn try_from(names: Vec<String>) -> Result<Self, Self::Error> {
        let mut flags = Flags::default();
        for name in names {
            match name.as_str() {
                "checked" => flags.checked = true,
                "selected" => flags.selected = true,
                "focused" => flags.focused = true,
                other => return Err(format!("unknown flag `{other}`")),
            }
        }
        Ok(flags)
    }
}

impl From<Flags> for Vec<String> {
    fn from(f: Flags) -> Self {
        f.names().iter().map(|s| s.to_string()).collect()
    }
}

impl Flags {
    pub fn names(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self.checked {
            out.push("checked");
        }
        if self.selected {
            out.push("selected");
        }
        if self.focused {
            out.push("focused");
        }
        out
    }
}

/// One element of the page.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomNode {
    pub tag: String,
    #[serde(rename = "ref", default)]
    pub ref_id: Option<Ref>,
    #[serde(default)]
    pub attrs: BTreeMap<String, String>,
    #[serde(default)]
    pub text: String,
    #[serde(default)]
    pub value: String,
    #[serde(default)]
    pub flags: Flags,
    #[serde(default)]
    pub bbox: BBox,
    #[serde(default)]
    pub children: Vec<DomNode>,
}

impl DomNode {
    pub fn new(tag: impl Into<String>, bbox: BBox) -> Self {
        Self {
            tag: tag.into(),
            ref_id: None,
            attrs: BTreeMap::new(),
            text: String::new(),
            value: String::new(),
            flags: Flags::default(),
            bbox,
            children: Vec::new(),
        }
    }

    pub fn with_text(mut self, text: impl Into<String>) -> Self {
        self.text = text.into();
        self
    }

    pub fn with_value(mut self, value: impl Into<String>) -> Self {
        self.value = value.into();
        self
    }

    pub fn with_attr(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.attrs.insert(key.into(), value.into());
        self
    }

    pub fn with_child(mut self, child: DomNode) -> Self {
        self.children.push(child);
        self
    }

    pub fn with_children(mut self, children: impl IntoIterator<Item = DomNode>) -> Self {
        self.children.extend(children);
        self
    }

    pub fn id(&self) -> Option<&str> {
        self.attrs.get("id").map(String::as_str)
    }

    pub fn class(&self) -> Option<&str> {
        self.attrs.get("class").map(String::as_str)
    }

    pub fn has_class(&self, class: &str) -> bool {
        self.class()
            .map(|c| c.split_whitespace().any(|c| c == class))
            .unwrap_or(false)
    }

    /// Number of nodes in this subtree, including `self`.
    pub fn count(&self) -> usize {
        1 + self.children.iter().map(DomNode::count).sum::<usize>()
    }

    pub fn node_at(&self, path: &[usize]) -> Option<&DomNode> {
        path.iter().try_fold(self, |n, &i| n.children.get(i))
    }

    pub fn node_at_mut(&mut self, path: &[usize]) -> Option<&mut DomNode> {
        path.iter().try_fold(self, |n, &i| n.children.get_mut(i))
    }

    /// Visits every node in depth-first preorder with its path from `self`.
    pub fn walk<'a>(&'a self, f: &mut impl FnMut(&[usize], &'a DomNode)) {
        fn go<'a>(n: &'a DomNode, path: &mut Vec<usize>, f: &mut impl FnMut(&[usize], &'a DomNode)) {
            f(path, n);
            for (i, c) in n.children.iter().enumerate() {
                path.push(i);
                go(c, path, f);
                path.pop();
            }
        }
        go(self, &mut Vec::new(), f);
    }

    fn walk_mut(&mut self, f: &mut impl FnMut(&mut DomNode)) {
        f(self);
        for c in &mut self.children {
            c.walk_mut(f);
        }
    }
}

/// Ref numbering scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RefMode {
    /// Depth-first preorder numbering `1..=N`.
    Ordered,
    /// Seeded random injection into `1..=500`.
    Randomized,
}

impl fmt::Display for RefMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RefMode::Ordered => "ordered",
            RefMode::Randomized => "randomized",
        })
    }
}

impl FromStr for RefMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ordered" => Ok(RefMode::Ordered),
            "randomized" => Ok(RefMode::Randomized),
            other => Err(format!("unknown ref mode `{other}` (expected ordered|randomized)")),
        }
    }
}

/// A validated tree whose nodes all carry unique refs.
///
/// Serializes as the bare root node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "DomNode", into = "DomNode")]
pub struct DomSnapshot {
    root: DomNode,
    ref_index: BTreeMap<Ref, Vec<usize>>,
}

impl TryFrom<DomNode> for DomSnapshot {
    type Error = DomError;

    fn try_from(root: DomNode) -> Result<Self, Self::Error> {
        DomSnapshot::from_root(root)
    }
}

impl From<DomSnapshot> for DomNode {
    fn from(s: DomSnapshot) -> Self {
        s.root
    }
}

impl DomSnapshot {
    /// Validates a fully-numbered tree and indexes it.
    pub fn from_root(root: DomNode) -> Result<Self, DomError> {
        let n = root.count();
        if n > MAX_REFS {
            return Err(DomError::Capacity(n));
        }
        let mut ref_index = BTreeMap::new();
        let mut err = None;
        root.walk(&mut |path, node| {
            if err.is_some() {
                return;
            }
            if node.tag.is_empty() {
                err = Some(DomError::EmptyTag(path.to_vec()));
                return;
            }
            let Some(r) = node.ref_id else {
                err = Some(DomError::MissingRef(path.to_vec()));
                return;
            };
            if r == 0 || usize::from(r) > MAX_REFS {
                err = Some(DomError::RefOutOfRange(r));
                return;
            }
            if ref_index.insert(r, path.to_vec()).is_some() {
                err = Some(DomError::DuplicateRef(r));
                return;
            }
            for (i, c) in node.children.iter().enumerate() {
                if !node.bbox.contains(&c.bbox) {
                    let mut p = path.to_vec();
                    p.push(i);
                    err = Some(DomError::BBoxNotContained(p));
                    return;
                }
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(Self { root, ref_index }),
        }
    }

    pub fn root(&self) -> &DomNode {
        &self.root
    }

    pub fn ref_index(&self) -> &BTreeMap<Ref, Vec<usize>> {
        &self.ref_index
    }

    pub fn len(&self) -> usize {
        self.ref_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ref_index.is_empty()
    }

    pub fn refs(&self) -> impl Iterator<Item = Ref> + '_ {
        self.ref_index.keys().copied()
    }

    pub fn ref_set(&self) -> BTreeSet<Ref> {
        self.refs().collect()
    }

    pub fn contains_ref(&self, r: Ref) -> bool {
        self.ref_index.contains_key(&r)
    }

    pub fn path_of(&self, r: Ref) -> Option<&[usize]> {
        self.ref_index.get(&r).map(Vec::as_slice)
    }

    pub fn node(&self, r: Ref) -> Option<&DomNode> {
        self.path_of(r).and_then(|p| self.root.node_at(p))
    }

    pub fn node_at(&self, path: &[usize]) -> Option<&DomNode> {
        self.root.node_at(path)
    }

    /// Parent of the node with ref `r`.
    pub fn parent(&self, r: Ref) -> Option<&DomNode> {
        let path = self.path_of(r)?;
        let (_, parent) = path.split_last()?;
        self.root.node_at(parent)
    }

    /// Depth-first preorder refs.
    pub fn preorder_refs(&self) -> Vec<Ref> {
        let mut out = Vec::with_capacity(self.len());
        self.root.walk(&mut |_, n| out.extend(n.ref_id));
        out
    }

    /// Mutates node content in place. The closure must not change tree
    /// structure or refs; the result is re-validated.
    pub fn update(&mut self, f: impl FnOnce(&mut DomNode)) -> Result<(), DomError> {
        let mut root = self.root.clone();
        f(&mut root);
        *self = DomSnapshot::from_root(root)?;
        Ok(())
    }
}

/// Numbers every node of an unnumbered tree.
///
/// Ordered mode uses depth-first preorder `1..=N`. Randomized mode draws a
/// uniformly random `N`-subset of `1..=500` and assigns it to nodes in a
/// uniformly random order, deterministically in `seed`.
pub fn assign_refs(mut root: DomNode, mode: RefMode, seed: u64) -> Result<DomSnapshot, DomError> {
    let n = root.count();
    if n > MAX_REFS {
        return Err(DomError::Capacity(n));
    }
    let mut assigned = None;
    root.walk(&mut |path, node| {
        if assigned.is_none() && node.ref_id.is_some() {
            assigned = Some(path.to_vec());
        }
    });
    if let Some(path) = assigned {
        return Err(DomError::RefsAlreadyAssigned(path));
    }
    let labels: Vec<Ref> = match mode {
        RefMode::Ordered => (1..=n as Ref).collect(),
        RefMode::Randomized => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rand::seq::index::sample(&mut rng, MAX_REFS, n)
                .into_iter()
                .map(|i| i as Ref + 1)
                .collect()
        }
    };
    let mut it = labels.into_iter();
    root.walk_mut(&mut |node| node.ref_id = it.next());
    DomSnapshot::from_root(root)
}

/// An injective relabeling of a ref set.
///
/// The image may be the domain itself (a true permutation) or any other
/// equally sized subset of `1..=500`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefPermutation {
    mapping: BTreeMap<Ref, Ref>,
    seed: u64,
}

impl RefPermutation {
    pub fn from_mapping(mapping: BTreeMap<Ref, Ref>, seed: u64) -> Result<Self, DomError> {
        let mut image = BTreeSet::new();
        for (&from, &to) in &mapping {
            for r in [from, to] {
                if r == 0 || usize::from(r) > MAX_REFS {
                    return Err(DomError::InvalidPermutation(format!("ref {r} out of range")));
                }
            }
            if !image.insert(to) {
                return Err(DomError::InvalidPermutation(format!("ref {to} is hit twice")));
            }
        }
        Ok(Self { mapping, seed })
    }

    pub fn identity(refs: impl IntoIterator<Item = Ref>) -> Self {
        Self {
            mapping: refs.into_iter().map(|r| (r, r)).collect(),
            seed: 0,
        }
    }

    /// Uniform random bijection of `refs` onto itself.
    pub fn shuffle(refs: impl IntoIterator<Item = Ref>, seed: u64) -> Self {
        let domain: Vec<Ref> = refs.into_iter().collect::<BTreeSet<_>>().into_iter().collect();
        let mut image = domain.clone();
        image.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Self {
            mapping: domain.into_iter().zip(image).collect(),
            seed,
        }
    }

    /// Uniform random injection of `refs` into `1..=500`.
    pub fn scatter(refs: impl IntoIterator<Item = Ref>, seed: u64) -> Result<Self, DomError> {
        let domain: Vec<Ref> = refs.into_iter().collect::<BTreeSet<_>>().into_iter().collect();
        if domain.len() > MAX_REFS {
            return Err(DomError::Capacity(domain.len()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image = rand::seq::index::sample(&mut rng, MAX_REFS, domain.len());
        Self::from_mapping(
            domain
                .into_iter()
                .zip(image.into_iter().map(|i| i as Ref + 1))
                .collect(),
            seed,
        )
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn mapping(&self) -> &BTreeMap<Ref, Ref> {
        &self.mapping
    }

    pub fn apply(&self, r: Ref) -> Option<Ref> {
        self.mapping.get(&r).copied()
    }

    pub fn domain(&self) -> BTreeSet<Ref> {
        self.mapping.keys().copied().collect()
    }

    pub fn inverse(&self) -> Self {
        Self {
            mapping: self.mapping.iter().map(|(&a, &b)| (b, a)).collect(),
            seed: self.seed,
        }
    }
}

/// Relabels every ref of `snapshot` through `perm`.
pub fn permute_refs(snapshot: &DomSnapshot, perm: &RefPermutation) -> Result<DomSnapshot, DomError> {
    if perm.domain() != snapshot.ref_set() {
        return Err(DomError::InvalidPermutation(
            "domain does not equal the snapshot's ref set".into(),
        ));
    }
    let mut root = snapshot.root.clone();
    root.walk_mut(&mut |n| n.ref_id = n.ref_id.and_then(|r| perm.apply(r)));
    DomSnapshot::from_root(root)
}

/// Renders a snapshot as nested s-expressions.
///
/// Each node becomes `(tag ref=R id=.. class=.. text="…" value="…" flags… children…)`.
/// Empty attributes, text and value are omitted. Attributes other than `id`
/// and `class` follow them in key order. Geometry is not rendered; it is
/// carried by the raster channel.
pub fn serialize_dom(snapshot: &DomSnapshot) -> String {
    let mut out = String::new();
    write_node(&snapshot.root, &mut out);
    out
}

fn write_node(n: &DomNode, out: &mut String) {
    out.push('(');
    out.push_str(&n.tag);
    if let Some(r) = n.ref_id {
        let _ = write!(out, " ref={r}");
    }
    let ordered = ["id", "class"]
        .into_iter()
        .filter_map(|k| n.attrs.get_key_value(k))
        .chain(n.attrs.iter().filter(|(k, _)| *k != "id" && *k != "class"));
    for (k, v) in ordered {
        if v.is_empty() {
            continue;
        }
        out.push(' ');
        out.push_str(k);
        out.push('=');
        if is_bare(v) {
            out.push_str(v);
        } else {
            push_quoted(v, out);
        }
    }
    if !n.text.is_empty() {
        out.push_str(" text=");
        push_quoted(&n.text, out);
    }
    if !n.value.is_empty() {
        out.push_str(" value=");
        push_quoted(&n.value, out);
    }
    for f in n.flags.names() {
        out.push(' ');
        out.push_str(f);
    }
    for c in &n.children {
        out.push(' ');
        write_node(c, out);
    }
    out.push(')');
}

fn is_bare(v: &str) -> bool {
    v.chars()
        .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.' | ':' | '#' | '/'))
}

fn push_quoted(s: &str, out: &mut String) {
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            c => out.push(c),
        }
    }
    out.push('"');
}

/// Coarse symbolic rendering of the page: one tag code per 5×5 block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RasterGrid {
    cells: Vec<u8>,
}

impl RasterGrid {
    pub fn empty() -> Self {
        Self {
            cells: vec![0; RASTER_SIZE * RASTER_SIZE],
        }
    }

    /// Row-major cells.
    pub fn cells(&self) -> &[u8] {
        &self.cells
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.cells[row * RASTER_SIZE + col]
    }

    pub fn count(&self, code: u8) -> usize {
        self.cells.iter().filter(|&&c| c == code).count()
    }

    pub fn painted(&self) -> usize {
        self.cells.iter().filter(|&&c| c != 0).count()
    }
}

/// Paints nodes in document order; a cell takes the code of the last node
/// whose bbox contains the cell's center.
pub fn rasterize(snapshot: &DomSnapshot) -> Result<RasterGrid, DomError> {
    let mut grid = RasterGrid::empty();
    let mut err = None;
    snapshot.root.walk(&mut |path, n| {
        if err.is_some() {
            return;
        }
        if !n.bbox.within_page() {
            err = Some(DomError::OutOfPage(path.to_vec()));
            return;
        }
        let code = tag_code(&n.tag);
        let b = n.bbox;
        // cell c has center (2c+1)*SCALE/2; compare in doubled units
        let covers = |c: usize, lo: i32, len: i32| {
            let center2 = (2 * c as i32 + 1) * RASTER_SCALE;
            2 * lo <= center2 && center2 < 2 * (lo + len)
        };
        for row in 0..RASTER_SIZE {
            if !covers(row, b.y, b.h) {
                continue;
            }
            for col in 0..RASTER_SIZE {
                if covers(col, b.x, b.w) {
                    grid.cells[row * RASTER_SIZE + col] = code;
                }
            }
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(grid),
    }
}

/// How often each ref is the target of a recorded action.
pub fn ref_distribution(episodes: &[ProcessedEpisode]) -> BTreeMap<Ref, usize> {
    let mut hist = BTreeMap::new();
    for ep in episodes {
        for step in &ep.steps {
            *hist.entry(step.action.target()).or_insert(0) += 1;
        }
    }
    hist
}
