//! Policies and everything they share: feature encoding, the output heads,
//! the trainable network, and scripted or memorizing reference policies.

pub mod baseline;
pub mod features;
pub mod heads;
pub mod network;
pub mod vocab;

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::IteratorRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{oracle_step, Action, EnvError, EnvState, Observation};
use crate::text::mix_seed;

pub use baseline::MemorizingBaseline;
pub use features::{encode_features, Encoded, FEATURE_DIM};
pub use heads::{ce_loss, decode_greedy, sample_action, ActionChoice, PolicyOutput, Target};
pub use network::PolicyParams;
pub use vocab::Vocabulary;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("token `{0}` is not in the vocabulary")]
    UnknownToken(String),
    #[error("text has {0} tokens, more than the keydown head holds")]
    TooManyTokens(usize),
    #[error("cannot decode: {0}")]
    Decode(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("bad format: {0}")]
    Format(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Which input channel to remove.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    None,
    NoHistory,
    NoVision,
    NoPlan,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::None, Ablation::NoHistory, Ablation::NoVision, Ablation::NoPlan];

    pub fn as_str(&self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::NoHistory => "no_history",
            Ablation::NoVision => "no_vision",
            Ablation::NoPlan => "no_plan",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| format!("unknown ablation `{s}` (expected none|no_history|no_vision|no_plan)"))
    }
}

/// What a policy may look at when choosing the next action.
///
/// Only scripted policies read `state`; it carries the hidden goal.
pub struct PolicyContext<'a> {
    pub state: &'a EnvState,
    pub observation: &'a Observation,
    /// Actions taken so far in the episode, oldest first.
    pub history: &'a [Action],
    pub subtask: &'a str,
    pub ablation: Ablation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub action: Action,
    /// The policy believes the current subtask is finished after this action.
    pub subtask_done: bool,
}

pub trait Policy: Sync {
    fn id(&self) -> String;
    fn act(&self, ctx: &PolicyContext<'_>) -> Result<Decision, AgentError>;
}

/// Follows the scripted solution. Declares a subtask done when the next
/// scripted action belongs to a later phase or the episode ends.
#[derive(Debug, Clone, Copy, Default)]
pub struct OraclePolicy;

impl Policy for OraclePolicy {
    fn id(&self) -> String {
        "oracle".into()
    }

    fn act(&self, ctx: &PolicyContext<'_>) -> Result<Decision, AgentError> {
        let step = oracle_step(ctx.state);
        let mut next = ctx.state.clone();
        next.max_steps = u32::MAX;
        let result = next.step(&step.action)?;
        let subtask_done = result.terminated || oracle_step(&next).phase != step.phase;
        Ok(Decision {
            action: step.action,
            subtask_done,
        })
    }
}

/// Clicks a uniformly random element; never declares a subtask done.
#[derive(Debug, Clone, Copy)]
pub struct RandomPolicy {
    pub seed: u64,
}

impl Policy for RandomPolicy {
    fn id(&self) -> String {
        "random".into()
    }

    fn act(&self, ctx: &PolicyContext<'_>) -> Result<Decision, AgentError> {
        let seed = mix_seed(mix_seed(self.seed, ctx.state.task.seed), u64::from(ctx.state.steps_used));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let target = ctx
            .observation
            .snapshot
            .refs()
            .choose(&mut rng)
            .ok_or_else(|| AgentError::Decode("snapshot has no refs".into()))?;
        Ok(Decision {
            action: Action::click(target),
            subtask_done: false,
        })
    }
}

/// The trained network with greedy decoding.
#[derive(Debug, Clone)]
pub struct LearnedPolicy {
    pub params: PolicyParams,
    pub vocab: Vocabulary,
    pub label: String,
}

/// Path of the vocabulary file stored next to a checkpoint.
pub fn vocab_path(checkpoint: &Path) -> PathBuf {
    let mut p = checkpoint.as_os_str().to_owned();
    p.push(".vocab");
    PathBuf::from(p)
}

impl LearnedPolicy {
    pub fn new(params: PolicyParams, vocab: Vocabulary, label: impl Into<String>) -> Self {
        Self {
            params,
            vocab,
            label: label.into(),
        }
    }

    pub fn decide(&self, enc: &Encoded, obs: &Observation) -> Result<Decision, AgentError> {
        let fwd = self.params.forward(enc);
        if !fwd.output.is_finite() {
            return Err(AgentError::Numeric("non-finite logits".into()));
        }
        let (action, subtask_done) = decode_greedy(&fwd.output, &obs.snapshot, &self.vocab)?;
        Ok(Decision { action, subtask_done })
    }

    /// Writes the checkpoint and its vocabulary file.
    pub fn save(&self, checkpoint: &Path) -> Result<(), AgentError> {
        self.params.write(BufWriter::new(File::create(checkpoint)?))?;
        self.vocab.write(BufWriter::new(File::create(vocab_path(checkpoint))?))?;
        Ok(())
    }

    pub fn load(checkpoint: &Path) -> Result<Self, AgentError> {
        let params = PolicyParams::read(BufReader::new(File::open(checkpoint)?))?;
        let vocab = Vocabulary::read(BufReader::new(File::open(vocab_path(checkpoint))?))?;
        Ok(Self::new(params, vocab, checkpoint.display().to_string()))
    }
}

impl Policy for LearnedPolicy {
    fn id(&self) -> String {
        self.label.clone()
    }

    fn act(&self, ctx: &PolicyContext<'_>) -> Result<Decision, AgentError> {
        let enc = encode_features(ctx.observation, ctx.history, ctx.subtask, ctx.ablation, &self.vocab);
        self.decide(&enc, ctx.observation)
    }
}
