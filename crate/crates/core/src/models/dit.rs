//! Toy-scale diffusion transformer.
//!
//! Each block has three residual branches (self-attention with RoPE,
//! cross-attention over the text sequence, gelu_tanh feed-forward), each
//! wrapped by AdaLN driven by the timestep embedding:
//!
//! `h ← h + gate ⊙ branch(LN(h) ⊙ scale + shift)`
//!
//! The AdaLN maps start with zero weight and bias `(scale, shift, gate) =
//! (1, 0, 1)`, so at initialization they pass features through unchanged.
//! The final projection starts at zero, so a fresh model outputs zeros.

use serde::{Deserialize, Serialize};

use super::{check_batch, dropout, sinusoidal_embed, Conditioning, FieldModel, Linear};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::optim::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiTConfig {
    /// Features per token; a `(B, D)` batch is read as `D / latent_dim` tokens.
    pub latent_dim: usize,
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub rope_base: f64,
    pub p_dropout: f64,
    pub cond_dim: usize,
    pub num_classes: usize,
    /// Flattened data dimension `D`.
    pub data_dim: usize,
}

impl Default for DiTConfig {
    fn default() -> Self {
        Self {
            latent_dim: 1,
            depth: 2,
            width: 16,
            heads: 2,
            rope_base: 16384.0,
            p_dropout: 0.1,
            cond_dim: 8,
            num_classes: 0,
            data_dim: 2,
        }
    }
}

impl DiTConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.width == 0 || self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return bad(format!("width {} must be a positive multiple of heads {}", self.width, self.heads));
        }
        if !(self.width / self.heads).is_multiple_of(2) {
            return bad(format!("head dim {} must be even for RoPE", self.width / self.heads));
        }
        if !(self.rope_base > 0.0) {
            return bad(format!("rope_base must be positive, got {}", self.rope_base));
        }
        if !(0.0..1.0).contains(&self.p_dropout) {
            return bad(format!("p_dropout must be in [0, 1), got {}", self.p_dropout));
        }
        if self.latent_dim == 0 || !self.data_dim.is_multiple_of(self.latent_dim) {
            return bad(format!("data_dim {} is not a multiple of latent_dim {}", self.data_dim, self.latent_dim));
        }
        if self.depth == 0 || self.cond_dim == 0 {
            return bad("depth and cond_dim must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}

/// Conditioning-dependent `(scale, shift[, gate])`, each `width` wide.
#[derive(Debug, Clone, Copy)]
pub struct AdaLn {
    pub linear: Linear,
    pub width: usize,
    pub gated: bool,
}

pub struct Modulation {
    pub scale: Var,
    pub shift: Var,
    pub gate: Option<Var>,
}

impl AdaLn {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, gated: bool) -> Self {
        let parts = if gated { 3 } else { 2 };
        let mut bias = vec![0.0; parts * width];
        bias[..width].iter_mut().for_each(|b| *b = 1.0);
        if gated {
            bias[2 * width..].iter_mut().for_each(|b| *b = 1.0);
        }
        let linear = Linear::with_values(
            store,
            name,
            Tensor::zeros(&[width, parts * width]),
            Tensor::vector(bias),
        );
        Self { linear, width, gated }
    }

    /// `cond` has shape `(1, width)`.
    pub fn modulation(&self, tape: &mut Tape, store: &ParamStore, cond: Var) -> Result<Modulation> {
        let all = self.linear.forward(tape, store, cond)?;
        let w = self.width;
        Ok(Modulation {
            scale: tape.slice(all, 1, 0, w)?,
            shift: tape.slice(all, 1, w, 2 * w)?,
            gate: if self.gated {
                Some(tape.slice(all, 1, 2 * w, 3 * w)?)
            } else {
                None
            },
        })
    }
}

/// `h + gate ⊙ branch(LN(h) ⊙ scale + shift)`; without a gate the branch output is returned as is.
pub fn adaln_modulate<F>(
    tape: &mut Tape,
    store: &ParamStore,
    h: Var,
    cond: Var,
    ada: &AdaLn,
    branch: F,
) -> Result<Var>
where
    F: FnOnce(&mut Tape, Var) -> Result<Var>,
{
    if tape.shape(h).last() != Some(&ada.width) {
        return Err(Error::shape("adaln_modulate", tape.shape(h), &[ada.width]));
    }
    let m = ada.modulation(tape, store, cond)?;
    let normed = tape.layer_norm(h)?;
    let scaled = tape.mul(normed, m.scale)?;
    let modulated = tape.add(scaled, m.shift)?;
    let out = branch(tape, modulated)?;
    match m.gate {
        Some(gate) => {
            let gated = tape.mul(out, gate)?;
            tape.add(h, gated)
        }
        None => Ok(out),
    }
}

/// Per-position rotation tables for interleaved pairs `(2i, 2i+1)` of each head.
#[derive(Debug, Clone)]
pub struct RopeCache {
    pub cos: Tensor,
    pub sin: Tensor,
    rotate: Tensor,
}

impl RopeCache {
    /// `θ_{p,i} = p · base^{−2i/d}` for head dim `d`, repeated over `heads`.
    pub fn new(positions: &[f64], base: f64, head_dim: usize, heads: usize) -> Result<Self> {
        if head_dim == 0 || !head_dim.is_multiple_of(2) {
            return Err(Error::Contract(format!("RoPE head dim must be even, got {head_dim}")));
        }
        let width = head_dim * heads;
        let mut cos = Vec::with_capacity(positions.len() * width);
        let mut sin = Vec::with_capacity(positions.len() * width);
        for &p in positions {
            for _ in 0..heads {
                for i in 0..head_dim / 2 {
                    let theta = p * base.powf(-2.0 * i as f64 / head_dim as f64);
                    cos.extend([theta.cos(); 2]);
                    sin.extend([theta.sin(); 2]);
                }
            }
        }
        let mut rotate = Tensor::zeros(&[width, width]);
        let r = rotate.data_mut();
        for i in (0..width).step_by(2) {
            // (x R)[i] = −x[i+1], (x R)[i+1] = x[i]
            r[(i + 1) * width + i] = -1.0;
            r[i * width + i + 1] = 1.0;
        }
        Ok(Self {
            cos: Tensor::matrix(positions.len(), width, cos)?,
            sin: Tensor::matrix(positions.len(), width, sin)?,
            rotate,
        })
    }

    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let cos = tape.constant(self.cos.clone());
        let sin = tape.constant(self.sin.clone());
        let rot = tape.constant(self.rotate.clone());
        let xc = tape.mul(x, cos)?;
        let xr = tape.matmul(x, rot)?;
        let xs = tape.mul(xr, sin)?;
        tape.add(xc, xs)
    }
}

/// Rotates `q` and `k` (shape `(L, heads·head_dim)`) by their positions.
pub fn rope_apply(
    tape: &mut Tape,
    q: Var,
    k: Var,
    positions: &[f64],
    base: f64,
    heads: usize,
) -> Result<(Var, Var)> {
    let width = tape.shape(q)[1];
    if heads == 0 || !width.is_multiple_of(heads) {
        return Err(Error::Contract(format!("width {width} not divisible by {heads} heads")));
    }
    let cache = RopeCache::new(positions, base, width / heads, heads)?;
    Ok((cache.apply(tape, q)?, cache.apply(tape, k)?))
}

/// Value-level RoPE for a single `(L, d)` block.
pub fn rope_rotate(x: &Tensor, positions: &[f64], base: f64) -> Result<Tensor> {
    let mut tape = Tape::inference();
    let xv = tape.constant(x.clone());
    let cache = RopeCache::new(positions, base, x.cols(), 1)?;
    let out = cache.apply(&mut tape, xv)?;
    Ok(tape.value(out).clone())
}

/// Multi-head scaled dot-product attention without projections.
///
/// `q: (Lq, W)`, `k, v: (Lk, W)`; heads are contiguous column blocks.
pub fn attention(tape: &mut Tape, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    let (qs, ks, vs) = (tape.shape(q).to_vec(), tape.shape(k).to_vec(), tape.shape(v).to_vec());
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 || qs[1] != ks[1] || ks != vs {
        return Err(Error::shape("attention", &qs, &ks));
    }
    let width = qs[1];
    if heads == 0 || width % heads != 0 {
        return Err(Error::Contract(format!("width {width} not divisible by {heads} heads")));
    }
    let dh = width / heads;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice(q, 1, h * dh, (h + 1) * dh)?;
        let kh = tape.slice(k, 1, h * dh, (h + 1) * dh)?;
        let vh = tape.slice(v, 1, h * dh, (h + 1) * dh)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let weights = tape.softmax(scores)?;
        outs.push(tape.matmul(weights, vh)?);
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        tape.concat(&outs, 1)
    }
}

/// Attention layer with q/k/v/output projections.
#[derive(Debug, Clone, Copy)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, heads: usize, rng: &mut Rng) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), width, width, 1.0, rng),
            k: Linear::new(store, &format!("{name}.k"), width, width, 1.0, rng),
            v: Linear::new(store, &format!("{name}.v"), width, width, 1.0, rng),
            out: Linear::new(store, &format!("{name}.out"), width, width, 1.0, rng),
            heads,
        }
    }

    /// `rope` carries `(query positions, key positions, base)` for self-attention.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x_q: Var,
        x_kv: Var,
        rope: Option<(&[f64], &[f64], f64)>,
    ) -> Result<Var> {
        let mut q = self.q.forward(tape, store, x_q)?;
        let mut k = self.k.forward(tape, store, x_kv)?;
        let v = self.v.forward(tape, store, x_kv)?;
        if let Some((pq, pk, base)) = rope {
            let width = tape.shape(q)[1];
            let dh = width / self.heads;
            q = RopeCache::new(pq, base, dh, self.heads)?.apply(tape, q)?;
            k = RopeCache::new(pk, base, dh, self.heads)?.apply(tape, k)?;
        }
        let a = attention(tape, q, k, v, self.heads)?;
        self.out.forward(tape, store, a)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DiTBlock {
    pub ada_self: AdaLn,
    pub ada_cross: AdaLn,
    pub ada_ff: AdaLn,
    pub self_attn: Attention,
    pub cross_attn: Attention,
    pub ff_in: Linear,
    pub ff_out: Linear,
}

impl DiTBlock {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &DiTConfig, rng: &mut Rng) -> Self {
        let w = cfg.width;
        Self {
            ada_self: AdaLn::new(store, &format!("{name}.ada_self"), w, true),
            ada_cross: AdaLn::new(store, &format!("{name}.ada_cross"), w, true),
            ada_ff: AdaLn::new(store, &format!("{name}.ada_ff"), w, true),
            self_attn: Attention::new(store, &format!("{name}.self_attn"), w, cfg.heads, rng),
            cross_attn: Attention::new(store, &format!("{name}.cross_attn"), w, cfg.heads, rng),
            ff_in: Linear::new(store, &format!("{name}.ff_in"), w, 4 * w, 1.0, rng),
            ff_out: Linear::new(store, &format!("{name}.ff_out"), 4 * w, w, 1.0, rng),
        }
    }
}

/// One block: self-attention (RoPE) → cross-attention → feed-forward, each AdaLN-wrapped.
///
/// `h: (L, width)`, `t_embed: (1, width)`, `text_seq: (L_text, width)`.
/// Dropout is applied to each branch output only when `rng` is `Some`.
#[allow(clippy::too_many_arguments)]
pub fn dit_block_forward(
    tape: &mut Tape,
    store: &ParamStore,
    block: &DiTBlock,
    h: Var,
    t_embed: Var,
    text_seq: Var,
    cfg: &DiTConfig,
    mut rng: Option<&mut Rng>,
) -> Result<Var> {
    let seq = tape.shape(h)[0];
    if tape.shape(text_seq)[1] != cfg.width {
        return Err(Error::shape("dit_block_forward", tape.shape(h), tape.shape(text_seq)));
    }
    let pos: Vec<f64> = (0..seq).map(|p| p as f64).collect();
    let p = cfg.p_dropout;

    let h = adaln_modulate(tape, store, h, t_embed, &block.ada_self, |tape, x| {
        let a = block.self_attn.forward(tape, store, x, x, Some((&pos, &pos, cfg.rope_base)))?;
        dropout(tape, a, p, rng.as_deref_mut())
    })?;
    let h = adaln_modulate(tape, store, h, t_embed, &block.ada_cross, |tape, x| {
        let a = block.cross_attn.forward(tape, store, x, text_seq, None)?;
        dropout(tape, a, p, rng.as_deref_mut())
    })?;
    adaln_modulate(tape, store, h, t_embed, &block.ada_ff, |tape, x| {
        let z = block.ff_in.forward(tape, store, x)?;
        let z = tape.gelu_tanh(z)?;
        let z = block.ff_out.forward(tape, store, z)?;
        dropout(tape, z, p, rng)
    })
}

#[derive(Debug, Clone)]
pub struct DiT {
    cfg: DiTConfig,
    store: ParamStore,
    in_proj: Linear,
    t_in: Linear,
    t_out: Linear,
    text_proj: Linear,
    class_table: Option<ParamId>,
    null_text: ParamId,
    pub blocks: Vec<DiTBlock>,
    final_ada: AdaLn,
    out_proj: Linear,
}

impl DiT {
    pub fn new(cfg: DiTConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let w = cfg.width;
        let in_proj = Linear::new(&mut store, "dit.in_proj", cfg.latent_dim, w, 1.0, rng);
        let t_in = Linear::new(&mut store, "dit.t_embed.0", w, w, 1.0, rng);
        let t_out = Linear::new(&mut store, "dit.t_embed.1", w, w, 1.0, rng);
        let text_proj = Linear::new(&mut store, "dit.text_proj", cfg.cond_dim, w, 1.0, rng);
        let class_table = (cfg.num_classes > 0)
            .then(|| store.add("dit.class_embed", rng.normal_tensor(&[cfg.num_classes, cfg.cond_dim])));
        let null_text = store.add("dit.null_text", rng.normal_tensor(&[1, cfg.cond_dim]));
        let blocks = (0..cfg.depth)
            .map(|i| DiTBlock::new(&mut store, &format!("dit.block{i}"), &cfg, rng))
            .collect();
        let final_ada = AdaLn::new(&mut store, "dit.final_ada", w, false);
        let out_proj = Linear::zeros(&mut store, "dit.out_proj", w, cfg.latent_dim);
        Ok(Self {
            cfg,
            store,
            in_proj,
            t_in,
            t_out,
            text_proj,
            class_table,
            null_text,
            blocks,
            final_ada,
            out_proj,
        })
    }

    pub fn config(&self) -> &DiTConfig {
        &self.cfg
    }

    /// Timestep embedding `(1, width)` feeding every AdaLN.
    pub fn t_embedding(&self, tape: &mut Tape, t: f64) -> Result<Var> {
        let e = tape.constant(Tensor::matrix(1, self.cfg.width, sinusoidal_embed(t, self.cfg.width)?)?);
        let z = self.t_in.forward(tape, &self.store, e)?;
        let z = tape.gelu_tanh(z)?;
        let z = self.t_out.forward(tape, &self.store, z)?;
        tape.gelu_tanh(z)
    }

    /// Projects a `(L_text, cond_dim)` sequence to the model width.
    pub fn text_embedding(&self, tape: &mut Tape, text: Var) -> Result<Var> {
        self.text_proj.forward(tape, &self.store, text)
    }

    fn raw_text(&self, tape: &mut Tape, cond: Option<&CondRow<'_>>) -> Result<Var> {
        match cond {
            None => Ok(tape.param(&self.store, self.null_text)),
            Some(CondRow::Label(c)) => {
                let table = self
                    .class_table
                    .ok_or_else(|| Error::Contract("model has no class embeddings".into()))?;
                if *c >= self.cfg.num_classes {
                    return Err(Error::Contract(format!("label {c} out of range")));
                }
                let table = tape.param(&self.store, table);
                tape.slice(table, 0, *c, *c + 1)
            }
            Some(CondRow::Text(seq)) => {
                if seq.rank() != 2 || seq.cols() != self.cfg.cond_dim {
                    return Err(Error::shape("text_seq", seq.shape(), &[0, self.cfg.cond_dim]));
                }
                Ok(tape.constant((*seq).clone()))
            }
        }
    }

    /// Full forward for one sequence: `latent_seq: (L, latent_dim)`, `text_seq: (L_text, cond_dim)`.
    pub fn forward_seq(
        &self,
        tape: &mut Tape,
        latent_seq: Var,
        t: f64,
        text_seq: Var,
        mut rng: Option<&mut Rng>,
    ) -> Result<Var> {
        let shape = tape.shape(latent_seq);
        if shape.len() != 2 || shape[1] != self.cfg.latent_dim {
            return Err(Error::shape("dit_forward", shape, &[0, self.cfg.latent_dim]));
        }
        let c = self.t_embedding(tape, t)?;
        let text = self.text_embedding(tape, text_seq)?;
        let mut h = self.in_proj.forward(tape, &self.store, latent_seq)?;
        for block in &self.blocks {
            h = dit_block_forward(tape, &self.store, block, h, c, text, &self.cfg, rng.as_deref_mut())?;
        }
        let out_proj = self.out_proj;
        let store = &self.store;
        adaln_modulate(tape, store, h, c, &self.final_ada, |tape, x| out_proj.forward(tape, store, x))
    }
}

enum CondRow<'a> {
    Label(usize),
    Text(&'a Tensor),
}

impl FieldModel for DiT {
    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn data_dim(&self) -> usize {
        self.cfg.data_dim
    }

    fn forward(
        &self,
        tape: &mut Tape,
        x: Var,
        t: &[f64],
        cond: &Conditioning,
        mut rng: Option<&mut Rng>,
    ) -> Result<Var> {
        let b = check_batch(tape, x, t, cond, self.cfg.data_dim)?;
        let tokens = self.cfg.data_dim / self.cfg.latent_dim;
        let mut rows = Vec::with_capacity(b);
        for i in 0..b {
            let row = tape.slice(x, 0, i, i + 1)?;
            let seq = tape.reshape(row, &[tokens, self.cfg.latent_dim])?;
            let cond_row = match cond {
                Conditioning::Labels(v) => v[i].map(CondRow::Label),
                Conditioning::Text(v) => v[i].as_ref().map(CondRow::Text),
            };
            let text = self.raw_text(tape, cond_row.as_ref())?;
            let out = self.forward_seq(tape, seq, t[i], text, rng.as_deref_mut())?;
            rows.push(tape.reshape(out, &[1, self.cfg.data_dim])?);
        }
        if rows.len() == 1 {
            Ok(rows[0])
        } else {
            tape.concat(&rows, 0)
        }
    }
}
