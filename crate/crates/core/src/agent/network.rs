//! The policy network: one tanh hidden layer feeding the output heads.
//!
//! * action type, done flag and value: linear in the hidden state;
//! * ref logits: a per-ref linear score plus a pointer term
//!   `row(r) · (W_ptr h + b_ptr)` for every candidate `r`;
//! * keydown logits: slot `s`, token `v` scores `E[v] · (P_s h + c_s)` with
//!   a rank-3 token embedding `E`, plus a learned bonus for copying the
//!   `s`-th quoted subtask token (or PAD once the quote is exhausted).
//!
//! Parameters live in one flat vector so optimizers and checkpoints can
//! treat them uniformly.

use std::io::{Read, Write};
use std::ops::Range;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::features::{Encoded, FEATURE_DIM, ROW_DIM};
use super::heads::PolicyOutput;
use super::vocab::{PAD, VOCAB_SIZE};
use super::AgentError;
use crate::dom::MAX_REFS;
use crate::env::MAX_TYPED_TOKENS;

pub const HIDDEN_DIM: usize = 128;
/// Rank of the keydown token embedding.
pub const KEY_RANK: usize = 3;
/// Initial logit bonus for copying a quoted token into its keydown slot.
pub const COPY_BONUS_INIT: f64 = 10.0;

const H: usize = HIDDEN_DIM;
const S: usize = MAX_TYPED_TOKENS;

/// Named parameter blocks in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Block {
    W1,
    B1,
    WType,
    BType,
    WRef,
    BRef,
    WPtr,
    BPtr,
    KdProj,
    KdBias,
    KdEmb,
    KdCopy,
    WDone,
    BDone,
    WValue,
    BValue,
}

impl Block {
    pub const ALL: [Block; 16] = [
        Block::W1,
        Block::B1,
        Block::WType,
        Block::BType,
        Block::WRef,
        Block::BRef,
        Block::WPtr,
        Block::BPtr,
        Block::KdProj,
        Block::KdBias,
        Block::KdEmb,
        Block::KdCopy,
        Block::WDone,
        Block::BDone,
        Block::WValue,
        Block::BValue,
    ];

    pub fn shape(self) -> (usize, usize) {
        match self {
            Block::W1 => (H, FEATURE_DIM),
            Block::B1 => (H, 1),
            Block::WType | Block::WDone | Block::WValue => (1, H),
            Block::BType | Block::BDone | Block::BValue => (1, 1),
            Block::WRef => (MAX_REFS, H),
            Block::BRef => (MAX_REFS, 1),
            Block::WPtr => (ROW_DIM, H),
            Block::BPtr => (ROW_DIM, 1),
            Block::KdProj => (S * KEY_RANK, H),
            Block::KdBias => (S * KEY_RANK, 1),
            Block::KdEmb => (VOCAB_SIZE, KEY_RANK),
            Block::KdCopy => (S, 2),
        }
    }

    pub fn len(self) -> usize {
        let (r, c) = self.shape();
        r * c
    }

    /// Bias vectors are exempt from weight decay.
    pub fn is_bias(self) -> bool {
        matches!(
            self,
            Block::B1 | Block::BType | Block::BRef | Block::BPtr | Block::KdBias | Block::BDone | Block::BValue
        )
    }

    /// Blocks of the shared encoder layer.
    pub fn is_encoder(self) -> bool {
        matches!(self, Block::W1 | Block::B1)
    }

    pub fn range(self) -> Range<usize> {
        let start: usize = Block::ALL.iter().take_while(|b| **b != self).map(|b| b.len()).sum();
        start..start + self.len()
    }
}

pub fn param_count() -> usize {
    Block::ALL.iter().map(|b| b.len()).sum()
}

/// Flat parameter vector with a fixed block layout.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub data: Vec<f64>,
}

/// Block offsets, computed once.
#[derive(Debug, Clone)]
struct Offsets {
    w1: usize,
    b1: usize,
    w_type: usize,
    b_type: usize,
    w_ref: usize,
    b_ref: usize,
    w_ptr: usize,
    b_ptr: usize,
    kd_proj: usize,
    kd_bias: usize,
    kd_emb: usize,
    kd_copy: usize,
    w_done: usize,
    b_done: usize,
    w_value: usize,
    b_value: usize,
}

fn offsets() -> &'static Offsets {
    static O: std::sync::OnceLock<Offsets> = std::sync::OnceLock::new();
    O.get_or_init(|| Offsets {
        w1: Block::W1.range().start,
        b1: Block::B1.range().start,
        w_type: Block::WType.range().start,
        b_type: Block::BType.range().start,
        w_ref: Block::WRef.range().start,
        b_ref: Block::BRef.range().start,
        w_ptr: Block::WPtr.range().start,
        b_ptr: Block::BPtr.range().start,
        kd_proj: Block::KdProj.range().start,
        kd_bias: Block::KdBias.range().start,
        kd_emb: Block::KdEmb.range().start,
        kd_copy: Block::KdCopy.range().start,
        w_done: Block::WDone.range().start,
        b_done: Block::BDone.range().start,
        w_value: Block::WValue.range().start,
        b_value: Block::BValue.range().start,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub hidden: Vec<f64>,
    key_z: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Forward {
    pub output: PolicyOutput,
    pub value: f64,
    pub cache: ForwardCache,
}

/// Gradient of a scalar objective with respect to the network outputs.
#[derive(Debug, Clone)]
pub struct OutputGrad {
    pub logits: PolicyOutput,
    pub value: f64,
}

impl OutputGrad {
    pub fn zeros() -> Self {
        Self {
            logits: PolicyOutput::zeros(),
            value: 0.0,
        }
    }
}

impl PolicyParams {
    pub fn zeros() -> Self {
        Self {
            data: vec![0.0; param_count()],
        }
    }

    /// Scaled uniform initialization of weights; biases start at zero and
    /// the copy bonus at [`COPY_BONUS_INIT`].
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros();
        for b in Block::ALL {
            if b == Block::KdCopy {
                p.data[b.range()].fill(COPY_BONUS_INIT);
                continue;
            }
            if b.is_bias() {
                continue;
            }
            let fan_in = match b {
                Block::KdEmb => KEY_RANK,
                _ => b.shape().1,
            } as f64;
            let scale = (3.0 / fan_in).sqrt();
            for x in &mut p.data[b.range()] {
                *x = rng.gen_range(-scale..scale);
            }
        }
        p
    }

    pub fn block(&self, b: Block) -> &[f64] {
        &self.data[b.range()]
    }

    pub fn block_mut(&mut self, b: Block) -> &mut [f64] {
        &mut self.data[b.range()]
    }

    pub fn check_finite(&self) -> Result<(), AgentError> {
        match self.data.iter().position(|x| !x.is_finite()) {
            Some(i) => Err(AgentError::Numeric(format!("parameter {i} is not finite"))),
            None => Ok(()),
        }
    }

    pub fn forward(&self, enc: &Encoded) -> Forward {
        let o = offsets();
        let d = &self.data;
        let f = &enc.dense;
        let nz: Vec<(usize, f64)> = f.iter().copied().enumerate().filter(|(_, x)| *x != 0.0).collect();
        let mut hidden = vec![0.0; H];
        for (i, h) in hidden.iter_mut().enumerate() {
            let row = &d[o.w1 + i * FEATURE_DIM..o.w1 + (i + 1) * FEATURE_DIM];
            let pre = d[o.b1 + i] + nz.iter().map(|&(j, x)| row[j] * x).sum::<f64>();
            *h = pre.tanh();
        }
        let lin = |w: usize, b: usize| d[b] + dot(&d[w..w + H], &hidden);

        let mut out = PolicyOutput::zeros();
        out.action_type_logit = lin(o.w_type, o.b_type);
        out.subtask_done_logit = lin(o.w_done, o.b_done);
        let value = lin(o.w_value, o.b_value);

        for (r, l) in out.ref_logits.iter_mut().enumerate() {
            *l = d[o.b_ref + r] + dot(&d[o.w_ref + r * H..o.w_ref + (r + 1) * H], &hidden);
        }
        let pointer: Vec<f64> = (0..ROW_DIM)
            .map(|j| d[o.b_ptr + j] + dot(&d[o.w_ptr + j * H..o.w_ptr + (j + 1) * H], &hidden))
            .collect();
        for c in &enc.candidates {
            out.ref_logits[usize::from(c.target) - 1] += dot(&c.row, &pointer);
        }

        let key_z: Vec<f64> = (0..S * KEY_RANK)
            .map(|k| d[o.kd_bias + k] + dot(&d[o.kd_proj + k * H..o.kd_proj + (k + 1) * H], &hidden))
            .collect();
        let emb = &d[o.kd_emb..o.kd_emb + VOCAB_SIZE * KEY_RANK];
        for s in 0..S {
            let z = &key_z[s * KEY_RANK..(s + 1) * KEY_RANK];
            let slot = out.slot_mut(s);
            for (v, l) in slot.iter_mut().enumerate() {
                let e = &emb[v * KEY_RANK..(v + 1) * KEY_RANK];
                *l = e[0] * z[0] + e[1] * z[1] + e[2] * z[2];
            }
            match enc.copy_tokens.get(s) {
                Some(&t) => slot[t] += d[o.kd_copy + 2 * s],
                None => slot[PAD] += d[o.kd_copy + 2 * s + 1],
            }
        }

        Forward {
            output: out,
            value,
            cache: ForwardCache {
                hidden,
                key_z,
            },
        }
    }

    /// Accumulates `d objective / d params` into `grad` given the gradient
    /// with respect to the outputs of [`PolicyParams::forward`].
    pub fn backward(&self, enc: &Encoded, cache: &ForwardCache, g: &OutputGrad, grad: &mut [f64]) {
        let o = offsets();
        let d = &self.data;
        let h = &cache.hidden;
        let mut dh = vec![0.0; H];

        for (dl, w, b) in [
            (g.logits.action_type_logit, o.w_type, o.b_type),
            (g.logits.subtask_done_logit, o.w_done, o.b_done),
            (g.value, o.w_value, o.b_value),
        ] {
            if dl != 0.0 {
                axpy(dl, h, &mut grad[w..w + H]);
                grad[b] += dl;
                axpy(dl, &d[w..w + H], &mut dh);
            }
        }

        for (r, &dl) in g.logits.ref_logits.iter().enumerate() {
            if dl != 0.0 {
                axpy(dl, h, &mut grad[o.w_ref + r * H..o.w_ref + (r + 1) * H]);
                grad[o.b_ref + r] += dl;
                axpy(dl, &d[o.w_ref + r * H..o.w_ref + (r + 1) * H], &mut dh);
            }
        }
        let mut dptr = [0.0; ROW_DIM];
        for c in &enc.candidates {
            let dl = g.logits.ref_logits[usize::from(c.target) - 1];
            if dl != 0.0 {
                axpy(dl, &c.row, &mut dptr);
            }
        }
        for (j, &dp) in dptr.iter().enumerate() {
            if dp != 0.0 {
                axpy(dp, h, &mut grad[o.w_ptr + j * H..o.w_ptr + (j + 1) * H]);
                grad[o.b_ptr + j] += dp;
                axpy(dp, &d[o.w_ptr + j * H..o.w_ptr + (j + 1) * H], &mut dh);
            }
        }

        let emb = &d[o.kd_emb..o.kd_emb + VOCAB_SIZE * KEY_RANK];
        for s in 0..S {
            let gs = g.logits.slot(s);
            if gs.iter().all(|&x| x == 0.0) {
                continue;
            }
            let z = &cache.key_z[s * KEY_RANK..(s + 1) * KEY_RANK];
            let mut dz = [0.0; KEY_RANK];
            for (v, &dl) in gs.iter().enumerate() {
                if dl == 0.0 {
                    continue;
                }
                let e = &emb[v * KEY_RANK..(v + 1) * KEY_RANK];
                let ge = &mut grad[o.kd_emb + v * KEY_RANK..o.kd_emb + (v + 1) * KEY_RANK];
                for k in 0..KEY_RANK {
                    ge[k] += dl * z[k];
                    dz[k] += dl * e[k];
                }
            }
            match enc.copy_tokens.get(s) {
                Some(&t) => grad[o.kd_copy + 2 * s] += gs[t],
                None => grad[o.kd_copy + 2 * s + 1] += gs[PAD],
            }
            for (k, &dzk) in dz.iter().enumerate() {
                let row = s * KEY_RANK + k;
                axpy(dzk, h, &mut grad[o.kd_proj + row * H..o.kd_proj + (row + 1) * H]);
                grad[o.kd_bias + row] += dzk;
                axpy(dzk, &d[o.kd_proj + row * H..o.kd_proj + (row + 1) * H], &mut dh);
            }
        }

        let nz: Vec<(usize, f64)> = enc
            .dense
            .iter()
            .copied()
            .enumerate()
            .filter(|(_, x)| *x != 0.0)
            .collect();
        for i in 0..H {
            let da = dh[i] * (1.0 - h[i] * h[i]);
            if da == 0.0 {
                continue;
            }
            grad[o.b1 + i] += da;
            let row = &mut grad[o.w1 + i * FEATURE_DIM..o.w1 + (i + 1) * FEATURE_DIM];
            for &(j, x) in &nz {
                row[j] += da * x;
            }
        }
    }

    const MAGIC: &'static [u8; 8] = b"WEBNAVP1";

    /// Binary checkpoint: magic, a length-prefixed JSON header describing
    /// the block layout, then little-endian `f64` values.
    pub fn write(&self, mut w: impl Write) -> Result<(), AgentError> {
        let header = CheckpointHeader::current();
        let json = serde_json::to_vec(&header).map_err(|e| AgentError::Format(e.to_string()))?;
        w.write_all(Self::MAGIC)?;
        w.write_u32::<LittleEndian>(json.len() as u32)?;
        w.write_all(&json)?;
        for &x in &self.data {
            w.write_f64::<LittleEndian>(x)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(mut r: impl Read) -> Result<Self, AgentError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != Self::MAGIC {
            return Err(AgentError::Format("not a policy checkpoint".into()));
        }
        let len = r.read_u32::<LittleEndian>()? as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)?;
        let header: CheckpointHeader =
            serde_json::from_slice(&json).map_err(|e| AgentError::Format(format!("checkpoint header: {e}")))?;
        if header != CheckpointHeader::current() {
            return Err(AgentError::Format("checkpoint layout does not match this build".into()));
        }
        let mut data = vec![0.0; param_count()];
        r.read_f64_into::<LittleEndian>(&mut data)?;
        let p = Self { data };
        p.check_finite()?;
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    blocks: Vec<(Block, usize, usize)>,
}

impl CheckpointHeader {
    fn current() -> Self {
        Self {
            blocks: Block::ALL
                .iter()
                .map(|&b| {
                    let (r, c) = b.shape();
                    (b, r, c)
                })
                .collect(),
        }
    }
}
