//! Output layer contract: logits, decoding, sampling and the CE loss.

use rand::Rng;

use super::vocab::{Vocabulary, PAD, VOCAB_SIZE};
use super::AgentError;
use crate::dom::{DomSnapshot, Ref, MAX_REFS};
use crate::env::{Action, MAX_TYPED_TOKENS};

/// Raw outputs of the policy. A sigmoid above one half on the action-type
/// logit means `type_text`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutput {
    pub action_type_logit: f64,
    /// `ref_logits[r - 1]` scores ref `r`.
    pub ref_logits: Vec<f64>,
    /// Slot-major `MAX_TYPED_TOKENS × VOCAB_SIZE`.
    pub keydown_logits: Vec<f64>,
    pub subtask_done_logit: f64,
}

impl PolicyOutput {
    pub fn zeros() -> Self {
        Self {
            action_type_logit: 0.0,
            ref_logits: vec![0.0; MAX_REFS],
            keydown_logits: vec![0.0; MAX_TYPED_TOKENS * VOCAB_SIZE],
            subtask_done_logit: 0.0,
        }
    }

    pub fn slot(&self, s: usize) -> &[f64] {
        &self.keydown_logits[s * VOCAB_SIZE..(s + 1) * VOCAB_SIZE]
    }

    pub fn slot_mut(&mut self, s: usize) -> &mut [f64] {
        &mut self.keydown_logits[s * VOCAB_SIZE..(s + 1) * VOCAB_SIZE]
    }

    pub fn is_finite(&self) -> bool {
        self.action_type_logit.is_finite()
            && self.subtask_done_logit.is_finite()
            && self.ref_logits.iter().all(|x| x.is_finite())
            && self.keydown_logits.iter().all(|x| x.is_finite())
    }

    /// Adds `scale * other` in place.
    pub fn add_scaled(&mut self, other: &PolicyOutput, scale: f64) {
        self.action_type_logit += scale * other.action_type_logit;
        self.subtask_done_logit += scale * other.subtask_done_logit;
        for (a, b) in self.ref_logits.iter_mut().zip(&other.ref_logits) {
            *a += scale * b;
        }
        for (a, b) in self.keydown_logits.iter_mut().zip(&other.keydown_logits) {
            *a += scale * b;
        }
    }
}

/// An action in head coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ActionChoice {
    pub type_text: bool,
    pub target: Ref,
    pub slots: [usize; MAX_TYPED_TOKENS],
}

impl ActionChoice {
    pub fn from_action(action: &Action, vocab: &Vocabulary) -> Result<Self, AgentError> {
        action.validate()?;
        Ok(Self {
            type_text: !action.is_click(),
            target: action.target(),
            slots: if action.is_click() {
                [PAD; MAX_TYPED_TOKENS]
            } else {
                vocab.encode_text(action.text())?
            },
        })
    }

    pub fn to_action(&self, vocab: &Vocabulary) -> Action {
        if self.type_text {
            Action::type_text(self.target, vocab.decode(&self.slots))
        } else {
            Action::click(self.target)
        }
    }
}

/// Supervision target for one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Target {
    pub choice: ActionChoice,
    pub subtask_done: bool,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Softmax over the whole slice.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits.iter().map(|&x| (x - m).exp()).collect();
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= z);
    p
}

pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + logits.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

/// Refs present in the snapshot, ascending.
fn present_refs(snapshot: &DomSnapshot) -> Result<Vec<Ref>, AgentError> {
    let refs: Vec<Ref> = snapshot.refs().collect();
    if refs.is_empty() {
        return Err(AgentError::Decode("snapshot has no refs".into()));
    }
    Ok(refs)
}

/// Softmax over the ref logits restricted to `refs`; returns
/// probabilities aligned with `refs`.
pub fn masked_ref_probs(out: &PolicyOutput, refs: &[Ref]) -> Vec<f64> {
    let logits: Vec<f64> = refs.iter().map(|&r| out.ref_logits[usize::from(r) - 1]).collect();
    softmax(&logits)
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding. Ties go to the lowest ref or token index.
pub fn decode_greedy(
    out: &PolicyOutput,
    snapshot: &DomSnapshot,
    vocab: &Vocabulary,
) -> Result<(Action, bool), AgentError> {
    let refs = present_refs(snapshot)?;
    let logits: Vec<f64> = refs.iter().map(|&r| out.ref_logits[usize::from(r) - 1]).collect();
    let target = refs[argmax(&logits)];
    let type_text = sigmoid(out.action_type_logit) > 0.5;
    let mut slots = [PAD; MAX_TYPED_TOKENS];
    if type_text {
        for (s, slot) in slots.iter_mut().enumerate() {
            *slot = argmax(out.slot(s));
        }
    }
    let choice = ActionChoice {
        type_text,
        target,
        slots,
    };
    Ok((choice.to_action(vocab), sigmoid(out.subtask_done_logit) > 0.5))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sampled {
    pub action: Action,
    pub choice: ActionChoice,
    pub log_prob: f64,
}

fn sample_index(p: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &q) in p.iter().enumerate() {
        acc += q;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

/// Samples an action: Bernoulli action type, categorical ref over present
/// refs, and independent categorical slots when typing.
pub fn sample_action(
    out: &PolicyOutput,
    snapshot: &DomSnapshot,
    vocab: &Vocabulary,
    rng: &mut impl Rng,
) -> Result<Sampled, AgentError> {
    let refs = present_refs(snapshot)?;
    let p_type = sigmoid(out.action_type_logit);
    let type_text = rng.gen::<f64>() < p_type;
    let probs = masked_ref_probs(out, &refs);
    let target = refs[sample_index(&probs, rng)];
    let mut slots = [PAD; MAX_TYPED_TOKENS];
    if type_text {
        for (s, slot) in slots.iter_mut().enumerate() {
            *slot = sample_index(&softmax(out.slot(s)), rng);
        }
    }
    let choice = ActionChoice {
        type_text,
        target,
        slots,
    };
    let log_prob = log_prob(out, &refs, &choice);
    Ok(Sampled {
        action: choice.to_action(vocab),
        choice,
        log_prob,
    })
}

/// Joint log-probability of `choice` under the sampling distribution; when
/// `grad` is given, adds the gradient of the log-probability with respect to
/// the logits, scaled by `scale`.
pub fn log_prob_with_grad(
    out: &PolicyOutput,
    refs: &[Ref],
    choice: &ActionChoice,
    grad: Option<(&mut PolicyOutput, f64)>,
) -> f64 {
    let x = out.action_type_logit;
    let y = if choice.type_text { 1.0 } else { 0.0 };
    // log sigmoid(x) = -softplus(-x); log(1 - sigmoid(x)) = -softplus(x)
    let mut lp = if choice.type_text { -softplus(-x) } else { -softplus(x) };
    let probs = masked_ref_probs(out, refs);
    let k = refs
        .iter()
        .position(|&r| r == choice.target)
        .expect("chosen ref is present");
    lp += probs[k].ln();
    let mut slot_probs = Vec::new();
    if choice.type_text {
        for s in 0..MAX_TYPED_TOKENS {
            let l = out.slot(s);
            lp += l[choice.slots[s]] - log_sum_exp(l);
            if grad.is_some() {
                slot_probs.push(softmax(l));
            }
        }
    }
    if let Some((g, scale)) = grad {
        g.action_type_logit += scale * (y - sigmoid(x));
        for (i, &r) in refs.iter().enumerate() {
            let onehot = if i == k { 1.0 } else { 0.0 };
            g.ref_logits[usize::from(r) - 1] += scale * (onehot - probs[i]);
        }
        for (s, p) in slot_probs.iter().enumerate() {
            let gs = g.slot_mut(s);
            for (v, &pv) in p.iter().enumerate() {
                gs[v] -= scale * pv;
            }
            gs[choice.slots[s]] += scale;
        }
    }
    lp
}

pub fn log_prob(out: &PolicyOutput, refs: &[Ref], choice: &ActionChoice) -> f64 {
    log_prob_with_grad(out, refs, choice, None)
}

/// Cross-entropy loss of one supervised step and its gradient with respect
/// to the logits: BCE on the action type, CE over all 500 ref logits, CE on
/// each keydown slot for typing targets only, and BCE on the done flag.
pub fn ce_loss(out: &PolicyOutput, target: &Target) -> (f64, PolicyOutput) {
    let mut g = PolicyOutput::zeros();
    let c = &target.choice;
    let bce = |x: f64, y: bool| {
        let loss = if y { softplus(-x) } else { softplus(x) };
        (loss, sigmoid(x) - f64::from(u8::from(y)))
    };
    let (mut loss, gt) = bce(out.action_type_logit, c.type_text);
    g.action_type_logit = gt;

    let t = usize::from(c.target) - 1;
    loss += log_sum_exp(&out.ref_logits) - out.ref_logits[t];
    g.ref_logits = softmax(&out.ref_logits);
    g.ref_logits[t] -= 1.0;

    if c.type_text {
        for s in 0..MAX_TYPED_TOKENS {
            let l = out.slot(s);
            loss += log_sum_exp(l) - l[c.slots[s]];
            let p = softmax(l);
            let gs = g.slot_mut(s);
            gs.copy_from_slice(&p);
            gs[c.slots[s]] -= 1.0;
        }
    }

    let (ld, gd) = bce(out.subtask_done_logit, target.subtask_done);
    loss += ld;
    g.subtask_done_logit = gd;
    (loss, g)
}

/// `KL(p_target || p)` between masked ref distributions and its gradient
/// with respect to the logits of `out`, scaled by `scale`.
pub fn ref_kl_with_grad(
    target: &PolicyOutput,
    out: &PolicyOutput,
    refs: &[Ref],
    grad: Option<(&mut PolicyOutput, f64)>,
) -> f64 {
    let pt = masked_ref_probs(target, refs);
    let p = masked_ref_probs(out, refs);
    let kl = pt
        .iter()
        .zip(&p)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| a * (a.ln() - b.ln()))
        .sum();
    if let Some((g, scale)) = grad {
        for (i, &r) in refs.iter().enumerate() {
            g.ref_logits[usize::from(r) - 1] += scale * (p[i] - pt[i]);
        }
    }
    kl
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dom::{assign_refs, BBox, DomNode, RefMode};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn snapshot(n: usize) -> DomSnapshot {
        let root = DomNode::new("body", BBox::page()).with_children(
            (1..n).map(|i| DomNode::new("button", BBox::new(0, i as i32 * 10, 10, 10))),
        );
        assign_refs(root, RefMode::Ordered, 0).unwrap()
    }

    fn vocab() -> Vocabulary {
        Vocabulary::build(["hello world"])
    }

    #[test]
    fn greedy_masks_absent_refs() {
        let v = vocab();
        let s = snapshot(3);
        let mut out = PolicyOutput::zeros();
        out.ref_logits[9] = 5.0;
        out.ref_logits[1] = 2.0;
        out.action_type_logit = -3.0;
        let (a, done) = decode_greedy(&out, &s, &v).unwrap();
        assert_eq!(a, Action::click(2));
        assert!(!done);
    }

    #[test]
    fn greedy_pad_truncation() {
        let v = vocab();
        let mut out = PolicyOutput::zeros();
        out.action_type_logit = 3.0;
        out.ref_logits[0] = 1.0;
        out.slot_mut(0)[v.lookup("hello").unwrap()] = 4.0;
        for s in 1..MAX_TYPED_TOKENS {
            out.slot_mut(s)[PAD] = 1.0;
        }
        out.slot_mut(3)[v.lookup("world").unwrap()] = 9.0;
        let (a, _) = decode_greedy(&out, &snapshot(2), &v).unwrap();
        assert_eq!(a, Action::type_text(1, "hello"));
    }

    #[test]
    fn one_ref_snapshot_is_certain() {
        let v = vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut out = PolicyOutput::zeros();
        out.action_type_logit = -50.0;
        let s = sample_action(&out, &snapshot(1), &v, &mut rng).unwrap();
        assert_eq!(s.action, Action::click(1));
        assert!(s.log_prob.abs() < 1e-12);
    }

    #[test]
    fn uniform_ce_ref_term() {
        let out = PolicyOutput::zeros();
        let target = Target {
            choice: ActionChoice {
                type_text: false,
                target: 17,
                slots: [PAD; MAX_TYPED_TOKENS],
            },
            subtask_done: false,
        };
        let (loss, _) = ce_loss(&out, &target);
        let expected = 500f64.ln() + 2.0 * 2f64.ln();
        assert!((loss - expected).abs() < 1e-12);
    }

    #[test]
    fn confident_prediction_has_near_zero_loss() {
        let mut out = PolicyOutput::zeros();
        out.action_type_logit = 60.0;
        out.subtask_done_logit = 60.0;
        out.ref_logits[4] = 60.0;
        for s in 0..MAX_TYPED_TOKENS {
            out.slot_mut(s)[if s == 0 { 3 } else { PAD }] = 60.0;
        }
        let mut slots = [PAD; MAX_TYPED_TOKENS];
        slots[0] = 3;
        let target = Target {
            choice: ActionChoice {
                type_text: true,
                target: 5,
                slots,
            },
            subtask_done: true,
        };
        let (loss, _) = ce_loss(&out, &target);
        assert!((0.0..1e-20).contains(&loss), "{loss}");
    }

    #[test]
    fn kl_of_identical_distributions_is_zero() {
        let mut out = PolicyOutput::zeros();
        out.ref_logits[0] = 1.3;
        out.ref_logits[2] = -0.4;
        let kl = ref_kl_with_grad(&out, &out, &[1, 2, 3], None);
        assert!(kl.abs() < 1e-15);
    }
}
