mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{all_paths, random_tree};
use webnav::dom::*;
use webnav::env::{self, discounted_reward, oracle_phase_count, oracle_policy, Action, EnvState, TaskName, WORDS};

fn leaf(tag: &str) -> DomNode {
    DomNode::new(tag, BBox::new(0, 0, 10, 10))
}

#[test]
fn single_node_gets_ref_one() {
    let snap = assign_refs(leaf("div"), RefMode::Ordered, 0).unwrap();
    assert_eq!(snap.preorder_refs(), vec![1]);
}

#[test]
fn chain_is_numbered_in_preorder() {
    let root = leaf("div").with_child(leaf("span").with_child(leaf("p")));
    let snap = assign_refs(root, RefMode::Ordered, 0).unwrap();
    assert_eq!(snap.preorder_refs(), vec![1, 2, 3]);
}

#[test]
fn randomized_refs_depend_only_on_seed() {
    let tree = random_tree(3, 40);
    let a = assign_refs(tree.clone(), RefMode::Randomized, 9).unwrap();
    let b = assign_refs(tree.clone(), RefMode::Randomized, 9).unwrap();
    let c = assign_refs(tree, RefMode::Randomized, 10).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.preorder_refs(), c.preorder_refs());
}

#[test]
fn button_serializes_as_documented() {
    let root = leaf("div")
        .with_child(leaf("span"))
        .with_child(leaf("span"))
        .with_child(leaf("button").with_text("ok"));
    let snap = assign_refs(root, RefMode::Ordered, 0).unwrap();
    let s = serialize_dom(&snap);
    assert!(s.contains(r#"(button ref=4 text="ok")"#), "{s}");
}

#[test]
fn capacity_is_enforced() {
    let root = DomNode::new("body", BBox::page()).with_children((0..500).map(|_| leaf("div")));
    assert_eq!(assign_refs(root, RefMode::Ordered, 0), Err(DomError::Capacity(501)));
}

#[test]
fn full_page_node_covers_every_cell() {
    let snap = assign_refs(DomNode::new("div", BBox::page()), RefMode::Ordered, 0).unwrap();
    let grid = rasterize(&snap).unwrap();
    assert_eq!(grid.painted(), RASTER_SIZE * RASTER_SIZE);
    assert_eq!(grid.count(tag_code("div")), 1024);
}

#[test]
fn quadrants_split_the_grid_evenly() {
    let half = PAGE_SIZE / 2;
    let quads = [("div", 0, 0), ("span", half, 0), ("button", 0, half), ("label", half, half)];
    let root = DomNode::new("body", BBox::page())
        .with_children(quads.iter().map(|&(t, x, y)| DomNode::new(t, BBox::new(x, y, half, half))));
    let grid = rasterize(&assign_refs(root, RefMode::Ordered, 0).unwrap()).unwrap();
    for (t, _, _) in quads {
        assert_eq!(grid.count(tag_code(t)), 256, "{t}");
    }
    assert_eq!(grid.count(tag_code("body")), 0);
}

#[test]
fn ref_distribution_counts_targets() {
    use webnav::pipeline::{ProcessedEpisode, ProcessedStep};
    let page = common::stream_page(0);
    let step = |a: Action| ProcessedStep {
        snapshot: page.clone(),
        action: a,
    };
    let ep = ProcessedEpisode {
        id: "e".into(),
        task: "t".into(),
        utterance: String::new(),
        steps: vec![step(Action::click(2)), step(Action::type_text(3, "a")), step(Action::click(2))],
    };
    let hist = ref_distribution(&[ep]);
    assert_eq!(hist.into_iter().collect::<Vec<_>>(), vec![(2, 2), (3, 1)]);
}

/// Changes exactly one rendered field of the node at `path`.
fn mutate(root: &mut DomNode, path: &[usize], kind: u8) {
    let n = root.node_at_mut(path).unwrap();
    match kind % 7 {
        0 => n.text = format!("{}!", n.text),
        1 => n.value = format!("{}?", n.value),
        2 => n.tag = format!("{}x", n.tag),
        3 => n.flags.checked = !n.flags.checked,
        4 => n.flags.selected = !n.flags.selected,
        5 => {
            let v = n.attrs.get("data-k").cloned().unwrap_or_default();
            n.attrs.insert("data-k".into(), format!("{v}v"));
        }
        _ => {
            if n.children.pop().is_none() {
                n.flags.focused = !n.flags.focused;
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn refs_are_unique_and_bounded(seed in any::<u64>(), ref_seed in any::<u64>(), randomized in any::<bool>()) {
        let tree = random_tree(seed, 120);
        let n = tree.count();
        let mode = if randomized { RefMode::Randomized } else { RefMode::Ordered };
        let snap = assign_refs(tree, mode, ref_seed).unwrap();
        let refs = snap.preorder_refs();
        prop_assert_eq!(refs.len(), n);
        prop_assert_eq!(refs.iter().collect::<BTreeSet<_>>().len(), n);
        prop_assert!(refs.iter().all(|&r| r >= 1 && usize::from(r) <= MAX_REFS));
        if !randomized {
            prop_assert_eq!(refs, (1..=n as Ref).collect::<Vec<_>>());
        }
    }

    #[test]
    fn permutation_round_trips(seed in any::<u64>(), perm_seed in any::<u64>(), scatter in any::<bool>()) {
        let snap = assign_refs(random_tree(seed, 80), RefMode::Ordered, 0).unwrap();
        let perm = if scatter {
            RefPermutation::scatter(snap.refs(), perm_seed).unwrap()
        } else {
            RefPermutation::shuffle(snap.refs(), perm_seed)
        };
        let moved = permute_refs(&snap, &perm).unwrap();
        prop_assert_eq!(moved.len(), snap.len());
        for r in snap.refs() {
            prop_assert_eq!(moved.node(perm.apply(r).unwrap()).unwrap().tag.as_str(), snap.node(r).unwrap().tag.as_str());
        }
        let back = permute_refs(&moved, &perm.inverse()).unwrap();
        prop_assert_eq!(back, snap);
    }

    #[test]
    fn serialization_separates_rendered_fields(seed in any::<u64>(), pick in any::<usize>(), kind in any::<u8>()) {
        let snap = assign_refs(random_tree(seed, 60), RefMode::Ordered, 0).unwrap();
        let same = DomSnapshot::from_root(snap.root().clone()).unwrap();
        prop_assert_eq!(serialize_dom(&snap), serialize_dom(&same));

        let paths = all_paths(snap.root());
        let path = &paths[pick % paths.len()];
        let mut root = snap.root().clone();
        mutate(&mut root, path, kind);
        let other = DomSnapshot::from_root(root).unwrap();
        prop_assert_ne!(serialize_dom(&snap), serialize_dom(&other));
    }

    #[test]
    fn serialization_separates_refs(seed in any::<u64>(), perm_seed in any::<u64>()) {
        let snap = assign_refs(random_tree(seed, 60), RefMode::Ordered, 0).unwrap();
        let perm = RefPermutation::scatter(snap.refs(), perm_seed).unwrap();
        prop_assume!(perm.mapping().iter().any(|(a, b)| a != b));
        prop_assert_ne!(serialize_dom(&snap), serialize_dom(&permute_refs(&snap, &perm).unwrap()));
    }

    #[test]
    fn raster_counts_are_bounded(seed in any::<u64>()) {
        let snap = assign_refs(random_tree(seed, 80), RefMode::Ordered, 0).unwrap();
        let grid = rasterize(&snap).unwrap();
        let total: usize = (1..=NUM_TAG_CODES as u8).map(|c| grid.count(c)).sum();
        prop_assert_eq!(total, grid.painted());
        prop_assert!(total <= RASTER_SIZE * RASTER_SIZE);
        prop_assert!(grid.cells().iter().all(|&c| usize::from(c) <= NUM_TAG_CODES));
        // the root covers the page, so every cell is painted
        prop_assert_eq!(total, RASTER_SIZE * RASTER_SIZE);
    }
}

fn random_action(state: &EnvState, rng: &mut ChaCha8Rng) -> Action {
    let refs: Vec<Ref> = state.snapshot.refs().collect();
    let target = refs[rng.gen_range(0..refs.len())];
    if rng.gen_bool(0.5) {
        Action::click(target)
    } else {
        Action::type_text(target, WORDS[rng.gen_range(0..WORDS.len())])
    }
}

fn any_task() -> impl Strategy<Value = TaskName> {
    prop::sample::select(TaskName::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn env_is_deterministic(task in any_task(), seed in any::<u64>(), act_seed in any::<u64>(), randomized in any::<bool>()) {
        let mode = if randomized { RefMode::Randomized } else { RefMode::Ordered };
        let (mut a, oa) = env::reset(task, seed, mode).unwrap();
        let (mut b, ob) = env::reset(task, seed, mode).unwrap();
        prop_assert_eq!(oa, ob);
        let mut rng = ChaCha8Rng::seed_from_u64(act_seed);
        while !a.terminated {
            let act = random_action(&a, &mut rng);
            let ra = a.step(&act).unwrap();
            let rb = b.step(&act).unwrap();
            prop_assert_eq!(ra, rb);
        }
        prop_assert!(b.terminated);
    }

    #[test]
    fn rewards_are_invariant_to_relabeling(task in any_task(), seed in any::<u64>(), act_seed in any::<u64>(), perm_seed in any::<u64>()) {
        let (mut a, _) = env::reset(task, seed, RefMode::Ordered).unwrap();
        let perm = RefPermutation::scatter(a.snapshot.refs(), perm_seed).unwrap();
        let mut b = a.permuted(&perm).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(act_seed);
        while !a.terminated {
            let act = if rng.gen_bool(0.5) { oracle_policy(&a) } else { random_action(&a, &mut rng) };
            let ra = a.step(&act).unwrap();
            let rb = b.step(&act.permuted(&perm).unwrap()).unwrap();
            prop_assert_eq!(ra.reward, rb.reward);
            prop_assert_eq!(ra.terminated, rb.terminated);
            prop_assert_eq!(serialize_dom(&permute_refs(&a.snapshot, &perm).unwrap()), serialize_dom(&b.snapshot));
        }
    }

    #[test]
    fn rewards_stay_in_range(task in any_task(), seed in any::<u64>(), act_seed in any::<u64>()) {
        let (mut s, _) = env::reset(task, seed, RefMode::Randomized).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(act_seed);
        while !s.terminated {
            let r = s.step(&random_action(&s, &mut rng)).unwrap();
            prop_assert!((-1.0..=1.0).contains(&r.reward));
            prop_assert!(r.terminated || r.reward == 0.0);
        }
    }

    #[test]
    fn positive_rewards_shrink_with_steps(raw in 0.01f64..=1.0, max_steps in 2u32..=20) {
        for t in 1..max_steps {
            prop_assert!(discounted_reward(raw, t + 1, max_steps) < discounted_reward(raw, t, max_steps));
        }
        prop_assert_eq!(discounted_reward(-1.0, 1, max_steps), -1.0);
    }
}

#[test]
fn oracle_solves_every_task() {
    for task in TaskName::ALL {
        for seed in 0..100 {
            for mode in [RefMode::Ordered, RefMode::Randomized] {
                let (mut s, _) = env::reset(task, seed, mode).unwrap();
                while !s.terminated {
                    let a = oracle_policy(&s);
                    s.step(&a).unwrap();
                }
                assert!(s.succeeded(), "{task:?} seed {seed} {mode}");
                assert!(s.steps_used as usize >= oracle_phase_count(task));
                assert!(s.steps_used <= s.max_steps);
            }
        }
    }
}

#[test]
fn invalid_actions_are_rejected() {
    let (mut s, _) = env::reset(TaskName::EnterText, 0, RefMode::Ordered).unwrap();
    assert!(s.step(&Action::click(0)).is_err());
    assert_eq!(s.steps_used, 0);
    assert!("click ref x".parse::<Action>().is_err());
    assert!("type_text ref 3".parse::<Action>().is_err());
}
