//! Conditional vector-field networks.
//!
//! Both models map a batch `x` of shape `(B, D)`, per-row timesteps and a
//! per-row [`Conditioning`] to a prediction of the same shape.

mod dit;
mod mlp;

pub use dit::{
    adaln_modulate, attention, dit_block_forward, rope_apply, rope_rotate, AdaLn, Attention, DiT, DiTBlock,
    DiTConfig, RopeCache,
};
pub use mlp::{MlpConfig, MlpField};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::optim::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Per-row conditioning. `None` entries select the model's learned null embedding.
#[derive(Debug, Clone, PartialEq)]
pub enum Conditioning {
    Labels(Vec<Option<usize>>),
    /// Text-embedding sequences of shape `(text_len, cond_dim)`.
    Text(Vec<Option<Tensor>>),
}

impl Conditioning {
    pub fn unconditional(rows: usize) -> Self {
        Conditioning::Labels(vec![None; rows])
    }

    pub fn labels(labels: &[usize]) -> Self {
        Conditioning::Labels(labels.iter().map(|&l| Some(l)).collect())
    }

    /// Same rows, every entry replaced by the null embedding.
    pub fn to_null(&self) -> Self {
        match self {
            Conditioning::Labels(v) => Conditioning::Labels(vec![None; v.len()]),
            Conditioning::Text(v) => Conditioning::Text(vec![None; v.len()]),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Conditioning::Labels(v) => v.len(),
            Conditioning::Text(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn rows(&self, start: usize, end: usize) -> Self {
        match self {
            Conditioning::Labels(v) => Conditioning::Labels(v[start..end].to_vec()),
            Conditioning::Text(v) => Conditioning::Text(v[start..end].to_vec()),
        }
    }
}

/// Replaces `cond` by the null embedding with probability `p_uncond`.
pub fn cfg_dropout_condition<T>(cond: T, rng: &mut Rng, p_uncond: f64) -> Option<T> {
    if rng.bernoulli(p_uncond.clamp(0.0, 1.0)) {
        None
    } else {
        Some(cond)
    }
}

/// Applies [`cfg_dropout_condition`] independently to every row.
pub fn cfg_dropout_rows(cond: &Conditioning, rng: &mut Rng, p_uncond: f64) -> Conditioning {
    match cond {
        Conditioning::Labels(v) => {
            Conditioning::Labels(v.iter().map(|c| c.and_then(|c| cfg_dropout_condition(c, rng, p_uncond))).collect())
        }
        Conditioning::Text(v) => Conditioning::Text(
            v.iter()
                .map(|c| c.clone().and_then(|c| cfg_dropout_condition(c, rng, p_uncond)))
                .collect(),
        ),
    }
}

/// Interleaved `[sin(f₀t), cos(f₀t), sin(f₁t), …]` with `f_i` geometric from 1 to 10⁴.
pub fn sinusoidal_embed(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::Contract(format!("sinusoidal embedding dim must be even and positive, got {dim}")));
    }
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = if half == 1 {
            1.0
        } else {
            10f64.powf(4.0 * i as f64 / (half - 1) as f64)
        };
        out.push((freq * t).sin());
        out.push((freq * t).cos());
    }
    Ok(out)
}

/// `(B, dim)` matrix of embeddings, one row per timestep.
pub fn sinusoidal_embed_rows(ts: &[f64], dim: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        data.extend(sinusoidal_embed(t, dim)?);
    }
    Tensor::matrix(ts.len(), dim, data)
}

/// Dense layer `x·W + b` with `W: (in, out)`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// LeCun-normal weights scaled by `gain`, zero bias.
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, gain: f64, rng: &mut Rng) -> Self {
        let std = gain / (fan_in as f64).sqrt();
        let w = rng.normal_tensor(&[fan_in, fan_out]).scale(std);
        Self {
            weight: store.add(format!("{name}.weight"), w),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out])),
            fan_in,
            fan_out,
        }
    }

    /// Weight and bias set to exactly zero.
    pub fn zeros(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self::with_values(store, name, Tensor::zeros(&[fan_in, fan_out]), Tensor::zeros(&[fan_out]))
    }

    pub fn with_values(store: &mut ParamStore, name: &str, weight: Tensor, bias: Tensor) -> Self {
        let (fan_in, fan_out) = (weight.shape()[0], weight.shape()[1]);
        Self {
            weight: store.add(format!("{name}.weight"), weight),
            bias: store.add(format!("{name}.bias"), bias),
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let xw = tape.matmul(x, w)?;
        tape.add(xw, b)
    }
}

/// Inverted dropout: zeroes entries with probability `p` and rescales the rest.
pub fn dropout(tape: &mut Tape, x: Var, p: f64, rng: Option<&mut Rng>) -> Result<Var> {
    let Some(rng) = rng else { return Ok(x) };
    if p <= 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - p);
    let shape = tape.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let mask: Vec<f64> = (0..n).map(|_| if rng.bernoulli(p) { 0.0 } else { keep }).collect();
    let mask = tape.constant(Tensor::from_vec(shape, mask)?);
    tape.mul(x, mask)
}

/// Kind tag stored next to checkpoints so a run can be rebuilt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Mlp(MlpConfig),
    Dit(DiTConfig),
}

/// A trainable conditional field over `(B, D)` batches.
pub trait FieldModel: Send + Sync {
    fn store(&self) -> &ParamStore;

    fn store_mut(&mut self) -> &mut ParamStore;

    fn data_dim(&self) -> usize;

    /// Records the forward pass. `dropout_rng` is `Some` only in training mode.
    fn forward(
        &self,
        tape: &mut Tape,
        x: Var,
        t: &[f64],
        cond: &Conditioning,
        dropout_rng: Option<&mut Rng>,
    ) -> Result<Var>;

    /// Evaluation-mode prediction without gradient bookkeeping.
    fn predict(&self, x: &Tensor, t: &[f64], cond: &Conditioning) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, xv, t, cond, None)?;
        Ok(tape.value(out).clone())
    }
}

pub fn build_model(spec: &ModelSpec, rng: &mut Rng) -> Result<Box<dyn FieldModel>> {
    Ok(match spec {
        ModelSpec::Mlp(cfg) => Box::new(MlpField::new(cfg.clone(), rng)?),
        ModelSpec::Dit(cfg) => Box::new(DiT::new(cfg.clone(), rng)?),
    })
}

pub(crate) fn check_batch(tape: &Tape, x: Var, t: &[f64], cond: &Conditioning, dim: usize) -> Result<usize> {
    let shape = tape.shape(x);
    if shape.len() != 2 || shape[1] != dim {
        return Err(Error::shape("field input", shape, &[shape.first().copied().unwrap_or(0), dim]));
    }
    let b = shape[0];
    if t.len() != b || cond.len() != b {
        return Err(Error::Contract(format!(
            "batch of {b} rows got {} timesteps and {} conditions",
            t.len(),
            cond.len()
        )));
    }
    Ok(b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embedding_at_zero() {
        let e = sinusoidal_embed(0.0, 8).unwrap();
        for pair in e.chunks(2) {
            assert_eq!(pair, &[0.0, 1.0]);
        }
    }

    #[test]
    fn embedding_norm_is_half_dim() {
        for &t in &[0.1, 0.37, 0.9] {
            let e = sinusoidal_embed(t, 16).unwrap();
            let n2: f64 = e.iter().map(|v| v * v).sum();
            assert!((n2 - 8.0).abs() < 1e-12);
        }
    }

    #[test]
    fn odd_dim_rejected() {
        assert!(matches!(sinusoidal_embed(0.5, 7), Err(Error::Contract(_))));
    }

    #[test]
    fn distinct_timesteps_distinct_embeddings() {
        let grid: Vec<Vec<f64>> = (1..=100).map(|i| sinusoidal_embed(i as f64 / 101.0, 16).unwrap()).collect();
        let mut min_dist = f64::INFINITY;
        for i in 0..grid.len() {
            for j in i + 1..grid.len() {
                let d: f64 = grid[i].iter().zip(&grid[j]).map(|(a, b)| (a - b).powi(2)).sum();
                min_dist = min_dist.min(d.sqrt());
            }
        }
        assert!(min_dist > 0.0);
    }

    #[test]
    fn cfg_dropout_extremes_and_rate() {
        let mut rng = Rng::new(5);
        assert!((0..1000).all(|_| cfg_dropout_condition(1, &mut rng, 0.0).is_some()));
        assert!((0..1000).all(|_| cfg_dropout_condition(1, &mut rng, 1.0).is_none()));
        let n = 100_000;
        let dropped = (0..n).filter(|_| cfg_dropout_condition(1, &mut rng, 0.1).is_none()).count();
        let rate = dropped as f64 / n as f64;
        assert!((rate - 0.1).abs() < 0.005, "{rate}");
    }
}
