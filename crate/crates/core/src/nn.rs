//! Pre-norm multi-head attention and MLP layers built from tape ops.

use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::SeedRng;
use crate::tape::{Tape, Var};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn init<T: Real>(store: &mut ParamStore<T>, prefix: &str, width: usize) -> Result<Self> {
        Ok(Self {
            gain: store.init_ones(&format!("{prefix}.g"), &[width])?,
            bias: store.init_zeros(&format!("{prefix}.b"), &[width])?,
        })
    }

    pub fn lookup<T: Real>(store: &ParamStore<T>, prefix: &str) -> Result<Self> {
        Ok(Self {
            gain: lookup(store, &format!("{prefix}.g"))?,
            bias: lookup(store, &format!("{prefix}.b"))?,
        })
    }

    pub fn apply<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, p[self.gain], p[self.bias])
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LinearParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl LinearParams {
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut SeedRng,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.init_weight(&format!("{prefix}.w"), &[fan_in, fan_out], rng)?,
            bias: store.init_zeros(&format!("{prefix}.b"), &[fan_out])?,
        })
    }

    pub fn lookup<T: Real>(store: &ParamStore<T>, prefix: &str) -> Result<Self> {
        Ok(Self {
            weight: lookup(store, &format!("{prefix}.w"))?,
            bias: lookup(store, &format!("{prefix}.b"))?,
        })
    }

    pub fn apply<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.linear(x, p[self.weight], p[self.bias])
    }
}

pub(crate) fn lookup<T: Real>(store: &ParamStore<T>, name: &str) -> Result<ParamId> {
    store
        .id(name)
        .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
}

/// Pre-norm self-attention over `groups` independent sequences of `len`
/// tokens each, stored as `groups·len` consecutive rows.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub norm: LayerNormParams,
    pub qkv: LinearParams,
    pub out: LinearParams,
}

impl AttentionParams {
    pub fn init<T: Real>(store: &mut ParamStore<T>, prefix: &str, width: usize, rng: &mut SeedRng) -> Result<Self> {
        Ok(Self {
            norm: LayerNormParams::init(store, &format!("{prefix}.norm"), width)?,
            qkv: LinearParams::init(store, &format!("{prefix}.qkv"), width, 3 * width, rng)?,
            out: LinearParams::init(store, &format!("{prefix}.out"), width, width, rng)?,
        })
    }

    pub fn lookup<T: Real>(store: &ParamStore<T>, prefix: &str) -> Result<Self> {
        Ok(Self {
            norm: LayerNormParams::lookup(store, &format!("{prefix}.norm"))?,
            qkv: LinearParams::lookup(store, &format!("{prefix}.qkv"))?,
            out: LinearParams::lookup(store, &format!("{prefix}.out"))?,
        })
    }

    /// Returns the attention branch output (no residual), same shape as `x`.
    pub fn apply<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        groups: usize,
        len: usize,
        heads: usize,
    ) -> Result<Var> {
        let width = tape.shape(x)[1];
        let head_dim = width / heads;
        let h = self.norm.apply(tape, p, x)?;
        let qkv = self.qkv.apply(tape, p, h)?;
        let qkv = tape.reshape(qkv, &[groups, len, 3, heads, head_dim])?;
        let qkv = tape.permute(qkv, &[2, 0, 3, 1, 4])?;
        let gh = groups * heads;
        let qkv = tape.reshape(qkv, &[3 * gh, len, head_dim])?;
        let q = tape.slice(qkv, 0, 0, gh)?;
        let k = tape.slice(qkv, 0, gh, gh)?;
        let v = tape.slice(qkv, 0, 2 * gh, gh)?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (head_dim as f64).sqrt())?;
        let weights = tape.softmax(scores, 2)?;
        let ctx = tape.matmul(weights, v)?;
        let ctx = tape.reshape(ctx, &[groups, heads, len, head_dim])?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[groups * len, width])?;
        self.out.apply(tape, p, ctx)
    }
}

/// Pre-norm two-layer GELU MLP with 4× expansion.
#[derive(Clone, Copy, Debug)]
pub struct MlpParams {
    pub norm: LayerNormParams,
    pub fc1: LinearParams,
    pub fc2: LinearParams,
}

impl MlpParams {
    pub fn init<T: Real>(store: &mut ParamStore<T>, prefix: &str, width: usize, rng: &mut SeedRng) -> Result<Self> {
        Ok(Self {
            norm: LayerNormParams::init(store, &format!("{prefix}.norm"), width)?,
            fc1: LinearParams::init(store, &format!("{prefix}.fc1"), width, 4 * width, rng)?,
            fc2: LinearParams::init(store, &format!("{prefix}.fc2"), 4 * width, width, rng)?,
        })
    }

    pub fn lookup<T: Real>(store: &ParamStore<T>, prefix: &str) -> Result<Self> {
        Ok(Self {
            norm: LayerNormParams::lookup(store, &format!("{prefix}.norm"))?,
            fc1: LinearParams::lookup(store, &format!("{prefix}.fc1"))?,
            fc2: LinearParams::lookup(store, &format!("{prefix}.fc2"))?,
        })
    }

    pub fn apply<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.norm.apply(tape, p, x)?;
        let h = self.fc1.apply(tape, p, h)?;
        let h = tape.gelu(h)?;
        self.fc2.apply(tape, p, h)
    }
}

/// Standard pre-norm transformer block with joint attention over each sequence.
#[derive(Clone, Copy, Debug)]
pub struct TransformerBlock {
    pub attn: AttentionParams,
    pub mlp: MlpParams,
}

impl TransformerBlock {
    pub fn init<T: Real>(store: &mut ParamStore<T>, prefix: &str, width: usize, rng: &mut SeedRng) -> Result<Self> {
        Ok(Self {
            attn: AttentionParams::init(store, &format!("{prefix}.attn"), width, rng)?,
            mlp: MlpParams::init(store, &format!("{prefix}.mlp"), width, rng)?,
        })
    }

    pub fn lookup<T: Real>(store: &ParamStore<T>, prefix: &str) -> Result<Self> {
        Ok(Self {
            attn: AttentionParams::lookup(store, &format!("{prefix}.attn"))?,
            mlp: MlpParams::lookup(store, &format!("{prefix}.mlp"))?,
        })
    }

    pub fn apply<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        groups: usize,
        len: usize,
        heads: usize,
    ) -> Result<Var> {
        let a = self.attn.apply(tape, p, x, groups, len, heads)?;
        let x = tape.add(x, a)?;
        let m = self.mlp.apply(tape, p, x)?;
        tape.add(x, m)
    }
}
