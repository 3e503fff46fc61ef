//! Independent reference implementations used to check the library.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use webnav::agent::heads::{ce_loss, ActionChoice, PolicyOutput, Target};
use webnav::agent::network::param_count;
use webnav::agent::vocab::VOCAB_SIZE;
use webnav::agent::PolicyParams;
use webnav::dom::{assign_refs, BBox, DomNode, DomSnapshot, Ref, RefMode};
use webnav::env::{Action, TaskName, MAX_TYPED_TOKENS};
use webnav::pipeline::{EventKind, RawDemonstration, RawEvent, CONTROL_KEYS};
use webnav::trainer::{collect_episode, enqueue_trajectory, vmpo_loss, BatchStep, FrozenWeights, RlConfig};

/// A page with a body, buttons and inputs, tagged with `step` so that every
/// event gets a distinguishable snapshot.
pub fn stream_page(step: usize) -> DomSnapshot {
    let root = DomNode::new("body", BBox::page())
        .with_attr("data-step", step.to_string())
        .with_child(DomNode::new("button", BBox::new(0, 0, 30, 20)).with_text("ok"))
        .with_child(DomNode::new("input_text", BBox::new(0, 30, 60, 20)))
        .with_child(DomNode::new("input_text", BBox::new(0, 60, 60, 20)))
        .with_child(DomNode::new("div", BBox::new(0, 90, 60, 20)).with_text("note"))
        .with_child(DomNode::new("button", BBox::new(40, 0, 30, 20)).with_text("cancel"));
    assign_refs(root, RefMode::Ordered, 0).unwrap()
}

/// A random raw event stream of at most `max_events` events.
pub fn random_stream(seed: u64, max_events: usize) -> RawDemonstration {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(0..=max_events);
    let keys = ["a", "b", "c", " ", "1", "Shift", "Backspace"];
    let mut t = 0u64;
    let mut events = Vec::with_capacity(n);
    let mut snapshots = Vec::with_capacity(n);
    for i in 0..n {
        let snap = stream_page(i);
        let refs: Vec<Ref> = snap.refs().collect();
        let target = refs[rng.gen_range(0..refs.len())];
        t += rng.gen_range(0..3);
        events.push(if rng.gen_bool(0.45) {
            RawEvent::click(target, t)
        } else {
            RawEvent::keydown(target, keys[rng.gen_range(0..keys.len())], t)
        });
        snapshots.push(snap);
    }
    RawDemonstration {
        id: format!("stream-{seed}"),
        task: "stream".into(),
        utterance: String::new(),
        events,
        snapshots,
    }
}

/// The four cleaning rules applied literally, one pass per rule, returning
/// `(index of the snapshot's event, action)` pairs.
pub fn brute_clean(raw: &RawDemonstration) -> Vec<(usize, Action)> {
    let n = raw.events.len();
    let is_body_click = |i: usize| {
        let e = &raw.events[i];
        e.kind == EventKind::Click && raw.snapshots[i].node(e.target).map(|n| n.tag.as_str()) == Some("body")
    };
    let survivors: Vec<usize> = (0..n).filter(|&i| !is_body_click(i)).collect();

    let mut merged: Vec<(usize, Action)> = Vec::new();
    let mut k = 0;
    while k < survivors.len() {
        let e = &raw.events[survivors[k]];
        if e.kind == EventKind::Click {
            merged.push((survivors[k], Action::click(e.target)));
            k += 1;
            continue;
        }
        let mut j = k;
        while j + 1 < survivors.len() {
            let next = &raw.events[survivors[j + 1]];
            if next.kind == EventKind::Keydown && next.target == e.target {
                j += 1;
            } else {
                break;
            }
        }
        let mut text = String::new();
        for &idx in &survivors[k..=j] {
            let key = raw.events[idx].key.clone().unwrap_or_default();
            if !CONTROL_KEYS.contains(&key.as_str()) {
                text += &key;
            }
        }
        merged.push((survivors[k], Action::type_text(e.target, text)));
        k = j + 1;
    }

    let typed_later = |a: usize, list: &[(usize, Action)]| {
        list.iter()
            .skip(a + 1)
            .any(|(_, b)| !b.is_click() && b.target() == list[a].1.target())
    };
    let rule3: Vec<(usize, Action)> = (0..merged.len())
        .filter(|&a| merged[a].1.is_click() || !typed_later(a, &merged))
        .map(|a| merged[a].clone())
        .collect();

    (0..rule3.len())
        .filter(|&a| !rule3.iter().skip(a + 1).any(|(_, b)| *b == rule3[a].1))
        .map(|a| rule3[a].clone())
        .collect()
}

/// ROUGE-1 and ROUGE-L F1 by explicit counting and exhaustive subsequence
/// search (sequences up to 16 tokens).
pub fn brute_rouge(c: &[String], r: &[String]) -> (f64, f64) {
    if c.is_empty() || r.is_empty() {
        return (0.0, 0.0);
    }
    let mut seen: Vec<&String> = Vec::new();
    let mut overlap = 0;
    for tok in c {
        if seen.contains(&tok) {
            continue;
        }
        seen.push(tok);
        let in_c = c.iter().filter(|t| *t == tok).count();
        let in_r = r.iter().filter(|t| *t == tok).count();
        overlap += in_c.min(in_r);
    }
    assert!(c.len() <= 16);
    let is_subseq = |sub: &[&String]| {
        let mut it = r.iter();
        sub.iter().all(|s| it.any(|x| x == *s))
    };
    let mut lcs = 0;
    for mask in 0u32..(1 << c.len()) {
        let len = mask.count_ones() as usize;
        if len <= lcs {
            continue;
        }
        let sub: Vec<&String> = (0..c.len()).filter(|i| mask >> i & 1 == 1).map(|i| &c[i]).collect();
        if is_subseq(&sub) {
            lcs = len;
        }
    }
    let f = |m: usize| if m == 0 { 0.0 } else { 2.0 * m as f64 / (c.len() + r.len()) as f64 };
    (f(overlap), f(lcs))
}

/// `G_t = sum_k gamma^k r_{t+k}` by direct summation.
pub fn brute_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    (0..rewards.len())
        .map(|t| (t..rewards.len()).map(|k| gamma.powi((k - t) as i32) * rewards[k]).sum())
        .collect()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-9 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// A random output/target pair for the cross-entropy check.
pub fn random_ce_instance(seed: u64) -> (PolicyOutput, Target, Vec<Ref>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = PolicyOutput::zeros();
    out.action_type_logit = rng.gen_range(-3.0..3.0);
    out.subtask_done_logit = rng.gen_range(-3.0..3.0);
    out.ref_logits.iter_mut().for_each(|x| *x = rng.gen_range(-2.0..2.0));
    out.keydown_logits.iter_mut().for_each(|x| *x = rng.gen_range(-2.0..2.0));
    let refs: Vec<Ref> = (0..8).map(|_| rng.gen_range(1..=500)).collect();
    let type_text = rng.gen_bool(0.5);
    let mut slots = [0usize; MAX_TYPED_TOKENS];
    if type_text {
        let len = rng.gen_range(1..=MAX_TYPED_TOKENS);
        for s in slots.iter_mut().take(len) {
            *s = rng.gen_range(1..VOCAB_SIZE);
        }
    }
    let target = Target {
        choice: ActionChoice {
            type_text,
            target: refs[rng.gen_range(0..refs.len())],
            slots,
        },
        subtask_done: rng.gen_bool(0.5),
    };
    (out, target, refs)
}

/// Central differences of `ce_loss` against its analytic gradient on the
/// scalar heads, the target ref, random refs and keydown logits. Returns the
/// worst relative error.
pub fn ce_fd_worst(seed: u64) -> f64 {
    let (out, target, _) = random_ce_instance(seed);
    let (_, grad) = ce_loss(&out, &target);
    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xFD);
    let mut worst: f64 = 0.0;
    let mut check = |get: &dyn Fn(&mut PolicyOutput) -> &mut f64, analytic: f64| {
        let mut plus = out.clone();
        *get(&mut plus) += h;
        let mut minus = out.clone();
        *get(&mut minus) -= h;
        let fd = (ce_loss(&plus, &target).0 - ce_loss(&minus, &target).0) / (2.0 * h);
        worst = worst.max(rel_err(fd, analytic));
    };
    check(&|o| &mut o.action_type_logit, grad.action_type_logit);
    check(&|o| &mut o.subtask_done_logit, grad.subtask_done_logit);
    let t = usize::from(target.choice.target) - 1;
    check(&|o| &mut o.ref_logits[t], grad.ref_logits[t]);
    for _ in 0..8 {
        let i = rng.gen_range(0..500);
        check(&move |o| &mut o.ref_logits[i], grad.ref_logits[i]);
    }
    for s in 0..MAX_TYPED_TOKENS {
        let v = target.choice.slots[s];
        let i = s * VOCAB_SIZE + v;
        check(&move |o| &mut o.keydown_logits[i], grad.keydown_logits[i]);
        let j = s * VOCAB_SIZE + rng.gen_range(0..VOCAB_SIZE);
        check(&move |o| &mut o.keydown_logits[j], grad.keydown_logits[j]);
    }
    worst
}

/// A learner batch gathered by sampling from a random network.
pub fn random_vmpo_batch(seed: u64, max_steps: usize) -> (PolicyParams, PolicyParams, Vec<BatchStep>) {
    let params = PolicyParams::init(seed);
    let mut target = PolicyParams::init(seed.wrapping_add(7));
    for (t, p) in target.data.iter_mut().zip(&params.data) {
        *t = 0.7 * *p + 0.3 * *t;
    }
    let vocab = webnav::agent::Vocabulary::build(webnav::env::WORDS.iter().copied());
    let cfg = RlConfig::default();
    let mut queue = std::collections::VecDeque::new();
    let mut e = 0u64;
    while queue.len() < max_steps {
        let task = TaskName::ALL[((seed + e) % 8) as usize];
        let c = collect_episode(&params, &vocab, task, seed * 31 + e, RefMode::Randomized, &cfg).unwrap();
        enqueue_trajectory(&mut queue, c.trajectory, cfg.gamma);
        e += 1;
    }
    let batch: Vec<BatchStep> = queue.into_iter().take(max_steps).collect();
    (params, target, batch)
}

/// Central differences of the V-MPO total loss with respect to network
/// parameters, with the top-half selection and weights held fixed. Checks
/// the largest-gradient coordinate of every block plus random ones.
pub fn vmpo_fd_worst(seed: u64, batch_len: usize) -> f64 {
    let (params, target, batch) = random_vmpo_batch(seed, batch_len);
    let (eta, alpha) = (0.2, 0.1);
    let (diag, grad) = vmpo_loss(&params, &target, &batch, eta, alpha, None).unwrap();
    let frozen = FrozenWeights {
        selected: diag.selected.clone(),
        psi: diag.psi_weights.clone(),
    };
    let mut coords: Vec<usize> = webnav::agent::network::Block::ALL
        .iter()
        .filter_map(|b| b.range().max_by(|&i, &j| grad[i].abs().total_cmp(&grad[j].abs())))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    coords.extend((0..8).map(|_| rng.gen_range(0..param_count())));
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in coords {
        let mut p = params.clone();
        p.data[i] += h;
        let lp = vmpo_loss(&p, &target, &batch, eta, alpha, Some(&frozen)).unwrap().0.total_loss;
        p.data[i] -= 2.0 * h;
        let lm = vmpo_loss(&p, &target, &batch, eta, alpha, Some(&frozen)).unwrap().0.total_loss;
        let fd = (lp - lm) / (2.0 * h);
        if fd.abs().max(grad[i].abs()) > 1e-6 {
            worst = worst.max(rel_err(fd, grad[i]));
        }
    }
    worst
}

/// A random tree of at most `max_nodes` nodes whose boxes nest inside
/// their parents. Texts include quotes and backslashes.
pub fn random_tree(seed: u64, max_nodes: usize) -> DomNode {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = rng.gen_range(1..=max_nodes);
    let mut count = 1;
    let mut root = DomNode::new("body", BBox::page());
    grow(&mut root, &mut rng, &mut count, target, 0);
    root
}

const TAGS: [&str; 8] = ["div", "span", "button", "input_text", "input_checkbox", "label", "p", "custom"];
const TEXTS: [&str; 6] = ["", "ok", "say \"hi\"", "back\\slash", "two words", "x"];

fn grow(node: &mut DomNode, rng: &mut ChaCha8Rng, count: &mut usize, target: usize, depth: usize) {
    while *count < target && depth < 6 && rng.gen_bool(0.7) {
        let p = node.bbox;
        let w = rng.gen_range(0..=p.w);
        let h = rng.gen_range(0..=p.h);
        let x = p.x + rng.gen_range(0..=p.w - w);
        let y = p.y + rng.gen_range(0..=p.h - h);
        let mut child = DomNode::new(TAGS[rng.gen_range(0..TAGS.len())], BBox::new(x, y, w, h))
            .with_text(TEXTS[rng.gen_range(0..TEXTS.len())]);
        if rng.gen_bool(0.3) {
            child = child.with_value(TEXTS[rng.gen_range(1..TEXTS.len())]);
        }
        if rng.gen_bool(0.3) {
            child = child.with_attr("id", format!("n{}", *count));
        }
        if rng.gen_bool(0.2) {
            child = child.with_attr("class", "c");
        }
        child.flags.checked = rng.gen_bool(0.2);
        child.flags.focused = rng.gen_bool(0.1);
        *count += 1;
        grow(&mut child, rng, count, target, depth + 1);
        node.children.push(child);
    }
}

/// Every path of a tree in preorder.
pub fn all_paths(root: &DomNode) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    root.walk(&mut |p, _| out.push(p.to_vec()));
    out
}

/// Counts coordinates that an ablation changed outside its designated
/// segment, over every decision of an oracle-driven hierarchical episode.
/// Also returns the number of decisions inspected.
pub fn ablation_leaks(task: TaskName, seed: u64, vocab: &webnav::agent::Vocabulary) -> (usize, usize) {
    use webnav::agent::features::*;
    use webnav::agent::{encode_features, Ablation, OraclePolicy, Policy};
    use webnav::planner::{rollout_with, translate_utterance};

    let (mut state, _) = webnav::env::reset(task, seed, RefMode::Ordered).unwrap();
    let plan = translate_utterance(task.as_str(), &state.utterance).unwrap();
    let mut leaks = 0;
    let mut decisions = 0;
    let budget = state.max_steps;
    rollout_with(&mut state, &plan, budget, Ablation::None, &mut |ctx| {
        decisions += 1;
        let base = encode_features(ctx.observation, ctx.history, ctx.subtask, Ablation::None, vocab);
        for ablation in [Ablation::NoHistory, Ablation::NoVision, Ablation::NoPlan] {
            let enc = encode_features(ctx.observation, ctx.history, ctx.subtask, ablation, vocab);
            let allowed = match ablation {
                Ablation::NoHistory => HISTORY_RANGE,
                Ablation::NoVision => RASTER_RANGE,
                _ => SUBTASK_RANGE,
            };
            for (i, (a, b)) in base.dense.iter().zip(&enc.dense).enumerate() {
                if a != b && !allowed.contains(&i) {
                    leaks += 1;
                }
            }
            if matches!(ablation, Ablation::NoHistory | Ablation::NoVision) {
                leaks += enc.dense[allowed].iter().filter(|&&x| x != 0.0).count();
                leaks += usize::from(enc.copy_tokens != base.copy_tokens);
            }
            leaks += usize::from(enc.candidates.len() != base.candidates.len());
            for (c, d) in base.candidates.iter().zip(&enc.candidates) {
                let limit = if ablation == Ablation::NoPlan { STATIC_DIM } else { ROW_DIM };
                leaks += usize::from(c.target != d.target);
                leaks += c.row[..limit].iter().zip(&d.row[..limit]).filter(|(x, y)| x != y).count();
            }
        }
        OraclePolicy.act(ctx)
    })
    .unwrap();
    (leaks, decisions)
}

/// A random pair of token sequences over a small alphabet, each at most
/// 12 tokens and possibly empty.
pub fn random_token_pair(seed: u64) -> (Vec<String>, Vec<String>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let alphabet = ["click", "ref", "1", "2", "3", "type_text", "hello", "x"];
    let seq = |rng: &mut ChaCha8Rng| -> Vec<String> {
        let n = rng.gen_range(0..=12);
        (0..n).map(|_| alphabet[rng.gen_range(0..alphabet.len())].to_string()).collect()
    };
    let a = seq(&mut rng);
    let b = seq(&mut rng);
    (a, b)
}

/// Path of the bundled smoke dataset.
pub fn smoke_demos() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("data/smoke_demos.jsonl")
}

/// Runs the `webnav` binary and returns its exit code and stderr.
pub fn webnav(args: &[&str]) -> (i32, String) {
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_webnav"))
        .args(args)
        .output()
        .expect("binary runs");
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stderr).into_owned())
}

/// Runs every subcommand once on the smoke dataset inside `dir` and
/// returns each produced file (manifests excluded) with its contents, in
/// name order. Panics if a command fails.
pub fn run_cli_pipeline(dir: &std::path::Path, jobs: &str) -> Vec<(String, Vec<u8>)> {
    let smoke = smoke_demos();
    let p = |name: &str| dir.join(name).to_string_lossy().into_owned();
    let smoke = smoke.to_string_lossy().into_owned();
    let steps: Vec<Vec<String>> = vec![
        vec!["gen-demos", "--tasks", "click-button,enter-text", "--count", "3", "--ref-mode", "randomized", "--out", &p("rdemos.jsonl")],
        vec!["process", "--in", &smoke, "--out", &p("processed.jsonl")],
        vec!["process", "--in", &p("rdemos.jsonl"), "--out", &p("rprocessed.jsonl")],
        vec!["gen-plans", "--in", &p("processed.jsonl"), "--out", &p("plans.jsonl")],
        vec!["stats", "--in", &p("processed.jsonl"), "--out", &p("stats.csv")],
        vec!["train-bc", "--in", &p("processed.jsonl"), "--steps", "15", "--metrics", &p("bc.csv"), "--out", &p("policy.bin")],
        vec!["train-bc", "--in", &p("processed.jsonl"), "--model", "baseline", "--out", &p("baseline.json")],
        vec![
            "train-rl", "--demos", &p("processed.jsonl"), "--init", &p("policy.bin"), "--schedule", "5:0,0:8",
            "--eval-episodes", "5", "--metrics", &p("rl.csv"), "--out", &p("rl.bin"),
        ],
        vec![
            "evaluate", "--policy", &p("policy.bin"), "--tasks", "click-button,enter-text", "--episodes", "10",
            "--json", &p("eval.json"), "--out", &p("eval.csv"),
        ],
        vec!["evaluate", "--policy", &p("baseline.json"), "--tasks", "click-button", "--episodes", "10", "--out", &p("eval_baseline.csv")],
        vec![
            "attack", "--ordered", &p("processed.jsonl"), "--randomized", &p("rprocessed.jsonl"), "--tasks", "click-button",
            "--episodes", "5", "--bc-steps", "5", "--out", &p("attack.json"),
        ],
        vec![
            "ablate", "--policy", &p("policy.bin"), "--tasks", "click-button", "--episodes", "5", "--table", &p("ablate.txt"),
            "--json", &p("ablate.json"), "--out", &p("ablate.csv"),
        ],
        vec!["report", "--in", &p("eval.json"), "--in", &p("ablate.json"), "--table", &p("report.txt"), "--out", &p("report.csv")],
    ]
    .into_iter()
    .map(|s| s.into_iter().map(String::from).collect())
    .collect();
    for step in &steps {
        let mut args: Vec<&str> = vec!["--seed", "7", "--jobs", jobs];
        args.extend(step.iter().map(String::as_str));
        let (code, err) = webnav(&args);
        assert_eq!(code, 0, "{step:?}: {err}");
    }
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|path| !path.to_string_lossy().ends_with(".manifest.json"))
        .map(|path| (path.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&path).unwrap()))
        .collect();
    files.sort();
    files
}
