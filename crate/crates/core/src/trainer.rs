//! Behavioral cloning, V-MPO and the alternating offline/online schedule.

use std::collections::VecDeque;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::features::encode_features;
use crate::agent::heads::{
    ce_loss, log_prob_with_grad, ref_kl_with_grad, sample_action, sigmoid, ActionChoice, Target,
};
use crate::agent::network::{param_count, Block, OutputGrad, PolicyParams};
use crate::agent::{Ablation, AgentError, Decision, Encoded, LearnedPolicy, Vocabulary};
use crate::dom::{rasterize, DomError, Ref, RefMode};
use crate::env::{self, Action, EnvError, Observation, TaskName, CITIES, COLORS, WORDS};
use crate::pipeline::{ProcessedEpisode, ProcessedStep};
use crate::planner::{rollout_with, step_supervision, translate_utterance, EpisodeResult, Plan};
use crate::text::{mix_seed, stable_hash};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Dom(#[from] DomError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Optimizer and V-MPO hyperparameters. The defaults of the first block
/// are the published V-MPO settings; the rest are local choices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlConfig {
    pub learning_rate: f64,
    pub adam_b1: f64,
    pub adam_b2: f64,
    pub weight_decay: f64,
    pub vmpo_alpha: f64,
    pub vmpo_eta: f64,
    pub gamma: f64,
    pub batch_size_sl: usize,
    pub unroll_length: usize,
    pub target_update_period: u64,
    pub max_steps_per_episode: u32,

    pub adam_eps: f64,
    /// Learning rate of the offline (behavioral-cloning) phases.
    pub bc_learning_rate: f64,
    /// Treat eta and alpha as Lagrange multipliers adapted online.
    pub learned_multipliers: bool,
    /// KL bound for the adapted alpha.
    pub eps_alpha: f64,
    /// Temperature bound for the adapted eta.
    pub eps_eta: f64,
    pub multiplier_learning_rate: f64,
    pub success_buffer_capacity: usize,
    /// Keep the shared encoder layer fixed during online updates.
    pub freeze_encoder_during_rl: bool,
    pub seed: u64,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            adam_b1: 0.9,
            adam_b2: 0.999,
            weight_decay: 0.1,
            vmpo_alpha: 0.1,
            vmpo_eta: 0.2,
            gamma: 0.9,
            batch_size_sl: 120,
            unroll_length: 64,
            target_update_period: 5,
            max_steps_per_episode: env::DEFAULT_MAX_STEPS,
            adam_eps: 1e-8,
            bc_learning_rate: 1e-3,
            learned_multipliers: false,
            eps_alpha: 0.01,
            eps_eta: 0.1,
            multiplier_learning_rate: 0.01,
            success_buffer_capacity: 2000,
            freeze_encoder_during_rl: false,
            seed: 0,
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("bc_learning_rate", self.bc_learning_rate),
            ("adam_b1", self.adam_b1),
            ("adam_b2", self.adam_b2),
            ("adam_eps", self.adam_eps),
            ("vmpo_alpha", self.vmpo_alpha),
            ("vmpo_eta", self.vmpo_eta),
            ("gamma", self.gamma),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(TrainError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.weight_decay < 0.0 {
            return Err(TrainError::Config("weight_decay must be non-negative".into()));
        }
        if self.adam_b1 >= 1.0 || self.adam_b2 >= 1.0 {
            return Err(TrainError::Config("Adam betas must be below 1".into()));
        }
        if self.gamma > 1.0 {
            return Err(TrainError::Config("gamma must lie in (0, 1]".into()));
        }
        for (name, v) in [
            ("batch_size_sl", self.batch_size_sl),
            ("unroll_length", self.unroll_length),
            ("target_update_period", self.target_update_period as usize),
            ("max_steps_per_episode", self.max_steps_per_episode as usize),
            ("success_buffer_capacity", self.success_buffer_capacity),
        ] {
            if v == 0 {
                return Err(TrainError::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// Parses a flat `key = value` file; missing keys keep their defaults.
    pub fn from_config_text(text: &str) -> Result<Self, TrainError> {
        let cfg: RlConfig = toml::from_str(text).map_err(|e| TrainError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_config_text(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Adam moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// Per-parameter flags derived from the block layout.
#[derive(Debug, Clone)]
pub struct ParamMasks {
    /// Weight decay applies.
    pub decay: Vec<bool>,
    /// The parameter is updated at all.
    pub trainable: Vec<bool>,
}

impl ParamMasks {
    pub fn for_policy(freeze_encoder: bool) -> Self {
        let mut decay = vec![false; param_count()];
        let mut trainable = vec![true; param_count()];
        for b in Block::ALL {
            for i in b.range() {
                decay[i] = !b.is_bias();
                trainable[i] = !(freeze_encoder && b.is_encoder());
            }
        }
        Self { decay, trainable }
    }
}

/// Adam with bias correction and decoupled weight decay on the
/// parameters whose `decay` flag is set.
pub fn adam_step(
    params: &mut [f64],
    grad: &[f64],
    lr: f64,
    cfg: &RlConfig,
    state: &mut AdamState,
    masks: &ParamMasks,
) -> Result<(), TrainError> {
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(TrainError::Numeric(format!("gradient {i} is not finite")));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.adam_b1.powi(t);
    let c2 = 1.0 - cfg.adam_b2.powi(t);
    for i in 0..params.len() {
        if !masks.trainable[i] {
            continue;
        }
        let g = grad[i];
        state.m[i] = cfg.adam_b1 * state.m[i] + (1.0 - cfg.adam_b1) * g;
        state.v[i] = cfg.adam_b2 * state.v[i] + (1.0 - cfg.adam_b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        let mut update = m_hat / (v_hat.sqrt() + cfg.adam_eps);
        if masks.decay[i] {
            update += cfg.weight_decay * params[i];
        }
        params[i] -= lr * update;
    }
    Ok(())
}

/// One supervised decision point.
#[derive(Debug, Clone)]
pub struct Example {
    pub enc: Encoded,
    pub target: Target,
}

/// Vocabulary over the training data plus every word the task generators
/// can emit.
pub fn build_vocabulary(episodes: &[ProcessedEpisode]) -> Vocabulary {
    let mut texts: Vec<String> = Vec::new();
    for ep in episodes {
        texts.push(ep.utterance.clone());
        for s in &ep.steps {
            texts.push(s.action.text().to_string());
            s.snapshot.root().walk(&mut |_, n| {
                texts.push(n.text.clone());
                texts.extend(n.attrs.values().cloned());
            });
        }
    }
    let lexicon = WORDS
        .iter()
        .chain(COLORS.iter())
        .chain(CITIES.iter())
        .copied()
        .chain(env::synonym_groups().iter().flatten().copied())
        .map(str::to_string)
        .chain((0..=31).map(|n| n.to_string()));
    texts.extend(lexicon);
    Vocabulary::build(texts.iter().map(String::as_str))
}

fn observation_of(utterance: &str, step: &ProcessedStep) -> Result<Observation, TrainError> {
    Ok(Observation {
        utterance: utterance.to_string(),
        raster: rasterize(&step.snapshot)?,
        snapshot: step.snapshot.clone(),
    })
}

/// Encodes every step of every episode with plan-aligned subtasks and done
/// targets. Episodes whose actions cannot be expressed in the vocabulary
/// are skipped; the count of skipped episodes is returned.
pub fn build_examples(
    episodes: &[ProcessedEpisode],
    vocab: &Vocabulary,
    ablation: Ablation,
) -> Result<(Vec<Example>, usize), TrainError> {
    let per_episode: Vec<Result<Option<Vec<Example>>, TrainError>> = episodes
        .par_iter()
        .map(|ep| {
            let supervision = step_supervision(ep).unwrap_or_else(|_| {
                (0..ep.steps.len())
                    .map(|i| (ep.utterance.clone(), i + 1 == ep.steps.len()))
                    .collect()
            });
            let mut out = Vec::with_capacity(ep.steps.len());
            let mut history: Vec<Action> = Vec::new();
            for (step, (subtask, done)) in ep.steps.iter().zip(supervision) {
                let choice = match ActionChoice::from_action(&step.action, vocab) {
                    Ok(c) => c,
                    Err(AgentError::UnknownToken(_) | AgentError::TooManyTokens(_)) => return Ok(None),
                    Err(e) => return Err(e.into()),
                };
                let obs = observation_of(&ep.utterance, step)?;
                out.push(Example {
                    enc: encode_features(&obs, &history, &subtask, ablation, vocab),
                    target: Target {
                        choice,
                        subtask_done: done,
                    },
                });
                history.push(step.action.clone());
            }
            Ok(Some(out))
        })
        .collect();
    let mut examples = Vec::new();
    let mut skipped = 0;
    for r in per_episode {
        match r? {
            Some(ex) => examples.extend(ex),
            None => skipped += 1,
        }
    }
    Ok((examples, skipped))
}

const GRAD_CHUNK: usize = 20;

/// Mean CE loss and gradient over `batch`. Chunks are reduced in a fixed
/// order so results do not depend on thread scheduling.
pub fn batch_gradient(params: &PolicyParams, batch: &[&Example]) -> (f64, Vec<f64>) {
    let parts: Vec<(f64, Vec<f64>)> = batch
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut grad = vec![0.0; param_count()];
            let mut loss = 0.0;
            for ex in chunk {
                let fwd = params.forward(&ex.enc);
                let (l, g) = ce_loss(&fwd.output, &ex.target);
                loss += l;
                params.backward(
                    &ex.enc,
                    &fwd.cache,
                    &OutputGrad {
                        logits: g,
                        value: 0.0,
                    },
                    &mut grad,
                );
            }
            (loss, grad)
        })
        .collect();
    let n = batch.len().max(1) as f64;
    let mut grad = vec![0.0; param_count()];
    let mut loss = 0.0;
    for (l, g) in parts {
        loss += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    grad.iter_mut().for_each(|g| *g /= n);
    (loss / n, grad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BcReport {
    /// Mean batch loss per optimizer step.
    pub losses: Vec<f64>,
    /// Examples contributing to each step's gradient.
    pub batch_sizes: Vec<usize>,
}

/// Mini-batch behavioral cloning. Batches of `batch_size_sl` examples are
/// cut from a stream of seeded epoch permutations, so every step sees a
/// full batch even when the dataset is smaller than one.
pub fn train_bc(
    params: &mut PolicyParams,
    adam: &mut AdamState,
    examples: &[Example],
    steps: usize,
    cfg: &RlConfig,
    seed: u64,
) -> Result<BcReport, TrainError> {
    cfg.validate()?;
    if examples.is_empty() && steps > 0 {
        return Err(TrainError::Config("behavioral cloning needs a non-empty dataset".into()));
    }
    let masks = ParamMasks::for_policy(false);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xBC));
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut report = BcReport {
        losses: Vec::with_capacity(steps),
        batch_sizes: Vec::with_capacity(steps),
    };
    for _ in 0..steps {
        let mut batch = Vec::with_capacity(cfg.batch_size_sl);
        while batch.len() < cfg.batch_size_sl {
            if cursor == order.len() {
                order = (0..examples.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&examples[order[cursor]]);
            cursor += 1;
        }
        let (loss, grad) = batch_gradient(params, &batch);
        adam_step(&mut params.data, &grad, cfg.bc_learning_rate, cfg, adam, &masks)?;
        report.losses.push(loss);
        report.batch_sizes.push(batch.len());
    }
    Ok(report)
}

/// Fraction of examples whose greedy decoding reproduces the target action.
pub fn action_accuracy(params: &PolicyParams, vocab: &Vocabulary, examples: &[Example]) -> f64 {
    if examples.is_empty() {
        return 0.0;
    }
    let hits: usize = examples
        .par_iter()
        .map(|ex| {
            let out = params.forward(&ex.enc).output;
            let refs: Vec<Ref> = ex.enc.refs().collect();
            let logits: Vec<f64> = refs.iter().map(|&r| out.ref_logits[usize::from(r) - 1]).collect();
            let best = refs[logits
                .iter()
                .enumerate()
                .fold(0, |m, (i, &x)| if x > logits[m] { i } else { m })];
            let type_text = sigmoid(out.action_type_logit) > 0.5;
            let mut ok = best == ex.target.choice.target && type_text == ex.target.choice.type_text;
            if ok && type_text {
                let predicted = crate::agent::ActionChoice {
                    type_text,
                    target: best,
                    slots: std::array::from_fn(|s| {
                        let l = out.slot(s);
                        l.iter().enumerate().fold(0, |m, (i, &x)| if x > l[m] { i } else { m })
                    }),
                };
                ok = predicted.to_action(vocab) == ex.target.choice.to_action(vocab);
            }
            usize::from(ok)
        })
        .sum();
    hits as f64 / examples.len() as f64
}

/// `G_t = r_t + gamma * G_{t+1}`, computed backwards.
pub fn compute_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        out[t] = acc;
    }
    out
}

/// One online decision.
#[derive(Debug, Clone)]
pub struct StepSample {
    pub enc: Encoded,
    pub refs: Vec<Ref>,
    pub choice: ActionChoice,
    /// Log-probability under the collecting policy.
    pub log_prob: f64,
    pub reward: f64,
    pub terminated: bool,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub steps: Vec<StepSample>,
}

impl Trajectory {
    pub fn rewards(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.reward).collect()
    }
}

/// A learner-batch entry: a step and its return.
#[derive(Debug, Clone)]
pub struct BatchStep {
    pub sample: StepSample,
    pub ret: f64,
}

/// Computes per-episode returns and appends the steps to `queue`.
pub fn enqueue_trajectory(queue: &mut VecDeque<BatchStep>, traj: Trajectory, gamma: f64) {
    let returns = compute_returns(&traj.rewards(), gamma);
    for (sample, ret) in traj.steps.into_iter().zip(returns) {
        queue.push_back(BatchStep { sample, ret });
    }
}

/// Selection and weights of one V-MPO update.
#[derive(Debug, Clone, PartialEq)]
pub struct VmpoBatch {
    pub advantages: Vec<f64>,
    /// Indices of the top half of steps by advantage, best first.
    pub selected: Vec<usize>,
    /// Weights over `selected`, in the same order.
    pub psi_weights: Vec<f64>,
    pub eta: f64,
    pub alpha: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub kl: f64,
    pub total_loss: f64,
}

/// Top `ceil(n/2)` indices by advantage, ties to the lower index.
pub fn select_top_half(advantages: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..advantages.len()).collect();
    idx.sort_by(|&a, &b| advantages[b].total_cmp(&advantages[a]).then(a.cmp(&b)));
    idx.truncate(advantages.len().div_ceil(2));
    idx
}

/// `psi_i = exp(A_i / eta) / sum_j exp(A_j / eta)` over the selected steps.
pub fn psi_weights(advantages: &[f64], selected: &[usize], eta: f64) -> Vec<f64> {
    let scaled: Vec<f64> = selected.iter().map(|&i| advantages[i] / eta).collect();
    crate::agent::heads::softmax(&scaled)
}

/// Selection and weights held fixed while differentiating the loss.
#[derive(Debug, Clone)]
pub struct FrozenWeights {
    pub selected: Vec<usize>,
    pub psi: Vec<f64>,
}

/// V-MPO objective and its gradient:
/// `-sum_sel psi_i log pi(a_i|s_i) + 1/2 mean (G - V)^2 + alpha * mean KL(pi_target || pi)`,
/// with the KL taken over the masked ref distribution. Advantages use the
/// current value head but are treated as constants.
pub fn vmpo_loss(
    params: &PolicyParams,
    target: &PolicyParams,
    batch: &[BatchStep],
    eta: f64,
    alpha: f64,
    frozen: Option<&FrozenWeights>,
) -> Result<(VmpoBatch, Vec<f64>), TrainError> {
    if eta.is_nan() || eta <= 0.0 {
        return Err(TrainError::Config(format!("eta must be positive, got {eta}")));
    }
    if batch.is_empty() {
        return Err(TrainError::Config("empty V-MPO batch".into()));
    }
    let fwd: Vec<_> = batch.par_iter().map(|b| params.forward(&b.sample.enc)).collect();
    let tgt: Vec<_> = batch.par_iter().map(|b| target.forward(&b.sample.enc).output).collect();
    let advantages: Vec<f64> = batch.iter().zip(&fwd).map(|(b, f)| b.ret - f.value).collect();
    let (selected, psi) = match frozen {
        Some(fw) => (fw.selected.clone(), fw.psi.clone()),
        None => {
            let sel = select_top_half(&advantages);
            let psi = psi_weights(&advantages, &sel, eta);
            (sel, psi)
        }
    };
    let n = batch.len() as f64;
    let mut weight = vec![0.0; batch.len()];
    for (&i, &w) in selected.iter().zip(&psi) {
        weight[i] = w;
    }
    let parts: Vec<(f64, f64, f64, Vec<f64>)> = (0..batch.len())
        .collect::<Vec<_>>()
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut grad = vec![0.0; param_count()];
            let (mut pl, mut vl, mut kl) = (0.0, 0.0, 0.0);
            for &i in chunk {
                let s = &batch[i].sample;
                let f = &fwd[i];
                let mut g = OutputGrad::zeros();
                if weight[i] != 0.0 {
                    pl -= weight[i] * log_prob_with_grad(&f.output, &s.refs, &s.choice, Some((&mut g.logits, -weight[i])));
                }
                let err = batch[i].ret - f.value;
                vl += 0.5 * err * err / n;
                g.value = -err / n;
                kl += ref_kl_with_grad(&tgt[i], &f.output, &s.refs, Some((&mut g.logits, alpha / n)));
                params.backward(&s.enc, &f.cache, &g, &mut grad);
            }
            (pl, vl, kl, grad)
        })
        .collect();
    let mut grad = vec![0.0; param_count()];
    let (mut policy_loss, mut value_loss, mut kl_sum) = (0.0, 0.0, 0.0);
    for (pl, vl, kl, g) in parts {
        policy_loss += pl;
        value_loss += vl;
        kl_sum += kl;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    let kl = kl_sum / n;
    let total_loss = policy_loss + value_loss + alpha * kl;
    Ok((
        VmpoBatch {
            advantages,
            selected,
            psi_weights: psi,
            eta,
            alpha,
            policy_loss,
            value_loss,
            kl,
            total_loss,
        },
        grad,
    ))
}

/// Learner state carried across V-MPO updates.
#[derive(Debug, Clone)]
pub struct VmpoState {
    pub target: PolicyParams,
    pub adam: AdamState,
    pub updates: u64,
    /// Update counts at which the target network was refreshed.
    pub target_syncs: Vec<u64>,
    pub eta: f64,
    pub alpha: f64,
}

impl VmpoState {
    pub fn new(params: &PolicyParams, cfg: &RlConfig) -> Self {
        Self {
            target: params.clone(),
            adam: AdamState::new(param_count()),
            updates: 0,
            target_syncs: Vec::new(),
            eta: cfg.vmpo_eta,
            alpha: cfg.vmpo_alpha,
        }
    }
}

/// One V-MPO learner step. The target network is refreshed after every
/// `target_update_period`-th update.
pub fn vmpo_update(
    params: &mut PolicyParams,
    state: &mut VmpoState,
    batch: &[BatchStep],
    cfg: &RlConfig,
) -> Result<VmpoBatch, TrainError> {
    let (diag, grad) = vmpo_loss(params, &state.target, batch, state.eta, state.alpha, None)?;
    let masks = ParamMasks::for_policy(cfg.freeze_encoder_during_rl);
    adam_step(&mut params.data, &grad, cfg.learning_rate, cfg, &mut state.adam, &masks)?;
    if cfg.learned_multipliers {
        adapt_multipliers(state, &diag, cfg);
    }
    state.updates += 1;
    if state.updates.is_multiple_of(cfg.target_update_period) {
        state.target = params.clone();
        state.target_syncs.push(state.updates);
    }
    Ok(diag)
}

/// Gradient steps on the V-MPO temperature and KL multiplier losses
/// `eta * eps_eta + eta * ln mean_sel exp(A / eta)` and
/// `alpha * (eps_alpha - KL)`, in log space.
fn adapt_multipliers(state: &mut VmpoState, diag: &VmpoBatch, cfg: &RlConfig) {
    let eta = state.eta;
    let scaled: Vec<f64> = diag.selected.iter().map(|&i| diag.advantages[i] / eta).collect();
    let lme = crate::agent::heads::log_sum_exp(&scaled) - (scaled.len() as f64).ln();
    let weighted: f64 = diag
        .selected
        .iter()
        .zip(&diag.psi_weights)
        .map(|(&i, w)| w * diag.advantages[i])
        .sum();
    let d_eta = cfg.eps_eta + lme - weighted / eta;
    let d_alpha = cfg.eps_alpha - diag.kl;
    let lr = cfg.multiplier_learning_rate;
    state.eta = (eta * (-lr * d_eta * eta).exp()).max(1e-3);
    state.alpha = (state.alpha * (-lr * d_alpha * state.alpha).exp()).clamp(1e-4, 1e3);
}

/// FIFO store of successful online episodes.
#[derive(Debug, Clone)]
pub struct SuccessBuffer {
    capacity: usize,
    episodes: VecDeque<ProcessedEpisode>,
}

impl SuccessBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            episodes: VecDeque::new(),
        }
    }

    /// Admits the episode if its reward is positive; returns whether it was
    /// admitted.
    pub fn offer(&mut self, episode: ProcessedEpisode, reward: f64) -> bool {
        if reward <= 0.0 || self.capacity == 0 {
            return false;
        }
        if self.episodes.len() == self.capacity {
            self.episodes.pop_front();
        }
        self.episodes.push_back(episode);
        true
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn episodes(&self) -> impl Iterator<Item = &ProcessedEpisode> {
        self.episodes.iter()
    }
}

/// An online episode: the trajectory for the learner and the same episode
/// as demonstration data.
pub struct Collected {
    pub trajectory: Trajectory,
    pub episode: ProcessedEpisode,
    pub result: EpisodeResult,
}

/// Runs one hierarchical episode with sampled actions.
pub fn collect_episode(
    params: &PolicyParams,
    vocab: &Vocabulary,
    task: TaskName,
    seed: u64,
    ref_mode: RefMode,
    cfg: &RlConfig,
) -> Result<Collected, TrainError> {
    let (mut state, _) = env::reset(task, seed, ref_mode)?;
    state.max_steps = cfg.max_steps_per_episode;
    let plan = translate_utterance(task.as_str(), &state.utterance).unwrap_or_else(|_| Plan::single(&state.utterance));
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x05A4_D91E));
    let mut samples = Vec::new();
    let mut steps = Vec::new();
    let result = rollout_with(&mut state, &plan, cfg.max_steps_per_episode, Ablation::None, &mut |ctx| {
        let enc = encode_features(ctx.observation, ctx.history, ctx.subtask, ctx.ablation, vocab);
        let fwd = params.forward(&enc);
        let s = sample_action(&fwd.output, &ctx.observation.snapshot, vocab, &mut rng)?;
        steps.push(ProcessedStep {
            snapshot: ctx.observation.snapshot.clone(),
            action: s.action.clone(),
        });
        samples.push(StepSample {
            refs: enc.refs().collect(),
            enc,
            choice: s.choice,
            log_prob: s.log_prob,
            reward: 0.0,
            terminated: false,
        });
        Ok(Decision {
            action: s.action,
            subtask_done: sigmoid(fwd.output.subtask_done_logit) > 0.5,
        })
    })?;
    if let Some(last) = samples.last_mut() {
        last.reward = result.reward;
        last.terminated = state.terminated;
    }
    Ok(Collected {
        trajectory: Trajectory { steps: samples },
        episode: ProcessedEpisode {
            id: format!("online-{task}-{seed}"),
            task: task.as_str().to_string(),
            utterance: state.utterance.clone(),
            steps,
        },
        result,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseSpec {
    pub offline_steps: usize,
    pub online_episodes: usize,
}

/// Where and how per-phase accuracy is measured.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSpec {
    pub tasks: Vec<TaskName>,
    pub episodes_per_task: usize,
    pub seed: u64,
    pub ref_mode: RefMode,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhaseMetrics {
    pub phase: usize,
    pub offline_steps: usize,
    pub offline_examples: usize,
    pub online_episodes: usize,
    pub online_successes: usize,
    pub vmpo_updates: usize,
    pub buffer_size: usize,
    pub final_loss: Option<f64>,
    pub eval_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub phase: usize,
    pub step: usize,
    pub loss: Option<f64>,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct AlternatingReport {
    pub phases: Vec<PhaseMetrics>,
    pub rows: Vec<MetricRow>,
    pub vmpo: VmpoState,
}

pub fn write_metrics_csv(rows: &[MetricRow], w: impl Write) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["phase", "step", "loss", "accuracy"])?;
    let fmt = |x: Option<f64>| x.map(|v| format!("{v:.6}")).unwrap_or_default();
    for r in rows {
        out.write_record([r.phase.to_string(), r.step.to_string(), fmt(r.loss), fmt(r.accuracy)])?;
    }
    out.flush()?;
    Ok(())
}

/// Alternates offline and online phases. Offline phases train on the
/// demonstrations plus everything in the success buffer; online phases
/// collect sampled episodes round-robin over `tasks`, run a V-MPO update
/// per `unroll_length` collected steps (a partial batch left at the end
/// of a phase is discarded) and admit successes to the buffer. The target
/// network is reset to the current parameters when an online phase follows
/// offline training. Accuracy is evaluated after every phase.
#[allow(clippy::too_many_arguments)]
pub fn run_alternating(
    params: &mut PolicyParams,
    vocab: &Vocabulary,
    tasks: &[TaskName],
    train_ref_mode: RefMode,
    demos: &[ProcessedEpisode],
    cfg: &RlConfig,
    schedule: &[PhaseSpec],
    eval: &EvalSpec,
) -> Result<AlternatingReport, TrainError> {
    cfg.validate()?;
    if schedule.is_empty() {
        return Err(TrainError::Config("empty schedule".into()));
    }
    let (demo_examples, _) = build_examples(demos, vocab, Ablation::None)?;
    let mut buffer = SuccessBuffer::new(cfg.success_buffer_capacity);
    let mut bc_adam = AdamState::new(param_count());
    let mut vmpo = VmpoState::new(params, cfg);
    let mut trained_offline = false;
    let mut phases = Vec::new();
    let mut rows = Vec::new();
    for (p, spec) in schedule.iter().enumerate() {
        let mut examples = demo_examples.clone();
        let buffered: Vec<ProcessedEpisode> = buffer.episodes().cloned().collect();
        examples.extend(build_examples(&buffered, vocab, Ablation::None)?.0);
        let mut final_loss = None;
        let mut step = 0;
        if spec.offline_steps > 0 {
            let report = train_bc(params, &mut bc_adam, &examples, spec.offline_steps, cfg, mix_seed(cfg.seed, p as u64))?;
            for l in &report.losses {
                rows.push(MetricRow {
                    phase: p,
                    step,
                    loss: Some(*l),
                    accuracy: None,
                });
                step += 1;
            }
            final_loss = report.losses.last().copied();
        }
        trained_offline |= spec.offline_steps > 0;
        if trained_offline && spec.online_episodes > 0 {
            vmpo.target = params.clone();
            trained_offline = false;
        }
        let mut queue = VecDeque::new();
        let (mut successes, mut updates) = (0, 0);
        for e in 0..spec.online_episodes {
            if tasks.is_empty() {
                break;
            }
            let task = tasks[e % tasks.len()];
            let seed = mix_seed(mix_seed(cfg.seed, 0x0004_17E5 + p as u64), e as u64 ^ stable_hash(task.as_str()));
            let c = collect_episode(params, vocab, task, seed, train_ref_mode, cfg)?;
            if buffer.offer(c.episode, c.result.raw_reward) {
                successes += 1;
            }
            enqueue_trajectory(&mut queue, c.trajectory, cfg.gamma);
            while queue.len() >= cfg.unroll_length {
                let batch: Vec<BatchStep> = queue.drain(..cfg.unroll_length).collect();
                let diag = vmpo_update(params, &mut vmpo, &batch, cfg)?;
                rows.push(MetricRow {
                    phase: p,
                    step,
                    loss: Some(diag.total_loss),
                    accuracy: None,
                });
                step += 1;
                updates += 1;
                final_loss = Some(diag.total_loss);
            }
        }
        let policy = LearnedPolicy::new(params.clone(), vocab.clone(), "training");
        let report = crate::eval::evaluate_accuracy(
            &policy,
            &eval.tasks,
            eval.episodes_per_task,
            eval.seed,
            eval.ref_mode,
            Ablation::None,
        )?;
        rows.push(MetricRow {
            phase: p,
            step,
            loss: None,
            accuracy: Some(report.average),
        });
        phases.push(PhaseMetrics {
            phase: p,
            offline_steps: spec.offline_steps,
            offline_examples: if spec.offline_steps > 0 { examples.len() } else { 0 },
            online_episodes: spec.online_episodes,
            online_successes: successes,
            vmpo_updates: updates,
            buffer_size: buffer.len(),
            final_loss,
            eval_accuracy: report.average,
        });
    }
    Ok(AlternatingReport {
        phases,
        rows,
        vmpo,
    })
}
