//! Network building blocks recorded onto a tape: linear layers, layer norm,
//! pre-norm transformer blocks, and the residual MLP used by the policies.
//!
//! Each block owns its parameter names (`<prefix>.w` etc.), registers them
//! once into a [`ParamStore`], and replays itself onto any tape.

use crate::error::Result;
use crate::params::{Init, ParamStore};
use crate::tape::{AttnWeights, Tape, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Linear {
    prefix: String,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(prefix: impl Into<String>, fan_in: usize, fan_out: usize) -> Self {
        Linear { prefix: prefix.into(), fan_in, fan_out }
    }

    pub fn register(&self, store: &mut ParamStore) -> Result<()> {
        store.register(&format!("{}.w", self.prefix), self.fan_in, self.fan_out, Init::Glorot)?;
        store.register(&format!("{}.b", self.prefix), 1, self.fan_out, Init::Zeros)
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, &format!("{}.w", self.prefix))?;
        let b = tape.param(store, &format!("{}.b", self.prefix))?;
        tape.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    prefix: String,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(prefix: impl Into<String>, dim: usize) -> Self {
        LayerNorm { prefix: prefix.into(), dim }
    }

    pub fn register(&self, store: &mut ParamStore) -> Result<()> {
        store.register(&format!("{}.g", self.prefix), 1, self.dim, Init::Ones)?;
        store.register(&format!("{}.b", self.prefix), 1, self.dim, Init::Zeros)
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, &format!("{}.g", self.prefix))?;
        let b = tape.param(store, &format!("{}.b", self.prefix))?;
        tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }
}

#[derive(Clone, Debug)]
pub struct Attention {
    prefix: String,
    pub width: usize,
    pub heads: usize,
}

impl Attention {
    pub fn new(prefix: impl Into<String>, width: usize, heads: usize) -> Self {
        Attention { prefix: prefix.into(), width, heads }
    }

    pub fn register(&self, store: &mut ParamStore) -> Result<()> {
        for part in ["wq", "wk", "wv", "wo"] {
            store.register(&format!("{}.{part}", self.prefix), self.width, self.width, Init::Glorot)?;
        }
        for part in ["bq", "bv", "bo"] {
            store.register(&format!("{}.{part}", self.prefix), 1, self.width, Init::Zeros)?;
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    pub fn apply(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        q_in: Var,
        kv_in: Var,
        batch: usize,
        q_seq: usize,
        kv_seq: usize,
    ) -> Result<Var> {
        let p = |tape: &mut Tape, part: &str| tape.param(store, &format!("{}.{part}", self.prefix));
        let weights = AttnWeights {
            wq: p(tape, "wq")?,
            wk: p(tape, "wk")?,
            wv: p(tape, "wv")?,
            wo: p(tape, "wo")?,
            bq: p(tape, "bq")?,
            bv: p(tape, "bv")?,
            bo: p(tape, "bo")?,
        };
        tape.attention(q_in, kv_in, weights, batch, q_seq, kv_seq, self.heads)
    }
}

/// Pre-norm transformer block: x + Attn(LN(x)), then x + FFN(LN(x)).
/// When `cross` is present the block inserts a cross-attention sublayer
/// between self-attention and the feed-forward.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub self_attn: Attention,
    pub cross_attn: Option<Attention>,
    norm1: LayerNorm,
    norm_cross: Option<LayerNorm>,
    norm2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

impl TransformerBlock {
    pub fn new(prefix: &str, width: usize, heads: usize, cross: bool) -> Self {
        let ff_hidden = 4 * width;
        TransformerBlock {
            self_attn: Attention::new(format!("{prefix}.attn"), width, heads),
            cross_attn: cross.then(|| Attention::new(format!("{prefix}.xattn"), width, heads)),
            norm1: LayerNorm::new(format!("{prefix}.ln1"), width),
            norm_cross: cross.then(|| LayerNorm::new(format!("{prefix}.lnx"), width)),
            norm2: LayerNorm::new(format!("{prefix}.ln2"), width),
            ff1: Linear::new(format!("{prefix}.ff1"), width, ff_hidden),
            ff2: Linear::new(format!("{prefix}.ff2"), ff_hidden, width),
        }
    }

    pub fn register(&self, store: &mut ParamStore) -> Result<()> {
        self.self_attn.register(store)?;
        if let Some(x) = &self.cross_attn {
            x.register(store)?;
        }
        self.norm1.register(store)?;
        if let Some(n) = &self.norm_cross {
            n.register(store)?;
        }
        self.norm2.register(store)?;
        self.ff1.register(store)?;
        self.ff2.register(store)
    }

    /// `kv` supplies the cross-attention keys/values (required iff the block
    /// was built with `cross`).
    #[allow(clippy::too_many_arguments)]
    pub fn apply(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        kv: Option<(Var, usize)>, // (packed kv, kv_seq)
        batch: usize,
        seq: usize,
    ) -> Result<Var> {
        let normed = self.norm1.apply(tape, store, x)?;
        let attn = self.self_attn.apply(tape, store, normed, normed, batch, seq, seq)?;
        let mut h = tape.add(x, attn)?;

        if let (Some(xattn), Some(lnx)) = (&self.cross_attn, &self.norm_cross) {
            let (kv, kv_seq) = kv.expect("cross block needs kv input");
            let normed = lnx.apply(tape, store, h)?;
            let cross = xattn.apply(tape, store, normed, kv, batch, seq, kv_seq)?;
            h = tape.add(h, cross)?;
        }

        let normed = self.norm2.apply(tape, store, h)?;
        let ff = self.ff1.apply(tape, store, normed)?;
        let ff = tape.gelu(ff);
        let ff = self.ff2.apply(tape, store, ff)?;
        tape.add(h, ff)
    }
}

/// Residual MLP block: x + W2·gelu(W1·LN(x)).
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    norm: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl ResidualBlock {
    pub fn new(prefix: &str, width: usize) -> Self {
        ResidualBlock {
            norm: LayerNorm::new(format!("{prefix}.ln"), width),
            fc1: Linear::new(format!("{prefix}.fc1"), width, width),
            fc2: Linear::new(format!("{prefix}.fc2"), width, width),
        }
    }

    pub fn register(&self, store: &mut ParamStore) -> Result<()> {
        self.norm.register(store)?;
        self.fc1.register(store)?;
        self.fc2.register(store)
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.norm.apply(tape, store, x)?;
        let h = self.fc1.apply(tape, store, h)?;
        let h = tape.gelu(h);
        let h = self.fc2.apply(tape, store, h)?;
        tape.add(x, h)
    }
}

/// Sinusoidal embedding of a scalar position (diffusion step index or flow
/// time). Computed outside the tape; enters graphs as a constant.
pub fn sinusoidal_embedding(pos: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (10_000f64).powf(-(i as f64) / half as f64);
        out.push((pos * freq).sin());
        out.push((pos * freq).cos());
    }
    while out.len() < dim {
        out.push(0.0);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sinusoidal_is_injective_on_step_grid() {
        let embs: Vec<Vec<f64>> = (1..=50).map(|k| sinusoidal_embedding(k as f64, 16)).collect();
        for i in 0..embs.len() {
            for j in (i + 1)..embs.len() {
                let d2: f64 = embs[i]
                    .iter()
                    .zip(&embs[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                assert!(d2 > 1e-9, "steps {} and {} collide", i + 1, j + 1);
            }
        }
    }
}
