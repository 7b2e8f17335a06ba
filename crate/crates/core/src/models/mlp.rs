use serde::{Deserialize, Serialize};

use super::{check_batch, sinusoidal_embed_rows, Conditioning, FieldModel, Linear};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::optim::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlpConfig {
    pub data_dim: usize,
    pub hidden: usize,
    /// Number of hidden layers.
    pub depth: usize,
    pub t_embed_dim: usize,
    pub cond_dim: usize,
    /// Class count for label conditioning; 0 for unconditional data.
    pub num_classes: usize,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            data_dim: 2,
            hidden: 64,
            depth: 3,
            t_embed_dim: 16,
            cond_dim: 8,
            num_classes: 0,
        }
    }
}

/// `gelu_tanh` MLP over `concat(x, embed(t), embed(cond))`.
#[derive(Debug, Clone)]
pub struct MlpField {
    cfg: MlpConfig,
    store: ParamStore,
    layers: Vec<Linear>,
    class_table: Option<ParamId>,
    null_embed: ParamId,
}

impl MlpField {
    pub fn new(cfg: MlpConfig, rng: &mut Rng) -> Result<Self> {
        if cfg.data_dim == 0 || cfg.hidden == 0 || cfg.depth == 0 || cfg.cond_dim == 0 {
            return Err(Error::Config(format!("invalid MLP config {cfg:?}")));
        }
        if cfg.t_embed_dim == 0 || !cfg.t_embed_dim.is_multiple_of(2) {
            return Err(Error::Config("t_embed_dim must be even and positive".into()));
        }
        let mut store = ParamStore::new();
        let mut layers = Vec::with_capacity(cfg.depth + 1);
        let mut fan_in = cfg.data_dim + cfg.t_embed_dim + cfg.cond_dim;
        for i in 0..cfg.depth {
            layers.push(Linear::new(&mut store, &format!("mlp.{i}"), fan_in, cfg.hidden, 1.0, rng));
            fan_in = cfg.hidden;
        }
        layers.push(Linear::new(&mut store, "mlp.out", fan_in, cfg.data_dim, 0.5, rng));
        let class_table = (cfg.num_classes > 0)
            .then(|| store.add("mlp.class_embed", rng.normal_tensor(&[cfg.num_classes, cfg.cond_dim])));
        let null_embed = store.add("mlp.null_embed", rng.normal_tensor(&[1, cfg.cond_dim]));
        Ok(Self {
            cfg,
            store,
            layers,
            class_table,
            null_embed,
        })
    }

    pub fn config(&self) -> &MlpConfig {
        &self.cfg
    }

    fn cond_embedding(&self, tape: &mut Tape, cond: &Conditioning) -> Result<Var> {
        let Conditioning::Labels(labels) = cond else {
            return Err(Error::Contract("the MLP field takes label conditioning".into()));
        };
        let slots = self.cfg.num_classes + 1;
        let mut one_hot = Tensor::zeros(&[labels.len(), slots]);
        for (i, l) in labels.iter().enumerate() {
            let slot = match l {
                Some(c) if *c < self.cfg.num_classes => *c,
                Some(c) => {
                    return Err(Error::Contract(format!(
                        "label {c} out of range for {} classes",
                        self.cfg.num_classes
                    )))
                }
                None => self.cfg.num_classes,
            };
            one_hot.data_mut()[i * slots + slot] = 1.0;
        }
        let null = tape.param(&self.store, self.null_embed);
        let table = match self.class_table {
            Some(id) => {
                let classes = tape.param(&self.store, id);
                tape.concat(&[classes, null], 0)?
            }
            None => null,
        };
        let one_hot = tape.constant(one_hot);
        tape.matmul(one_hot, table)
    }
}

impl FieldModel for MlpField {
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
        _dropout_rng: Option<&mut Rng>,
    ) -> Result<Var> {
        check_batch(tape, x, t, cond, self.cfg.data_dim)?;
        let temb = tape.constant(sinusoidal_embed_rows(t, self.cfg.t_embed_dim)?);
        let cemb = self.cond_embedding(tape, cond)?;
        let mut h = tape.concat(&[x, temb, cemb], 1)?;
        let (last, hidden) = self.layers.split_last().expect("at least one layer");
        for layer in hidden {
            let z = layer.forward(tape, &self.store, h)?;
            h = tape.gelu_tanh(z)?;
        }
        last.forward(tape, &self.store, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check_params, GradCheckConfig};

    #[test]
    fn output_shape_matches_input() {
        let cfg = MlpConfig {
            num_classes: 3,
            ..MlpConfig::default()
        };
        let m = MlpField::new(cfg, &mut Rng::new(0)).unwrap();
        let x = Tensor::zeros(&[5, 2]);
        let cond = Conditioning::Labels(vec![Some(0), None, Some(2), Some(1), None]);
        let y = m.predict(&x, &[0.1, 0.2, 0.3, 0.4, 0.5], &cond).unwrap();
        assert_eq!(y.shape(), &[5, 2]);
    }

    #[test]
    fn bad_label_rejected() {
        let m = MlpField::new(MlpConfig::default(), &mut Rng::new(0)).unwrap();
        let x = Tensor::zeros(&[1, 2]);
        assert!(m.predict(&x, &[0.5], &Conditioning::labels(&[0])).is_err());
    }

    #[test]
    fn every_parameter_passes_grad_check() {
        let cfg = MlpConfig {
            hidden: 8,
            depth: 2,
            t_embed_dim: 4,
            cond_dim: 3,
            num_classes: 2,
            ..MlpConfig::default()
        };
        let m = MlpField::new(cfg, &mut Rng::new(1)).unwrap();
        let x = Rng::new(2).normal_tensor(&[3, 2]);
        let cond = Conditioning::Labels(vec![Some(0), Some(1), None]);
        let t = [0.2, 0.5, 0.8];
        let report = grad_check_params(
            m.store(),
            |tape, store| {
                let mut probe = m.clone();
                *probe.store_mut() = store.clone();
                let xv = tape.constant(x.clone());
                let y = probe.forward(tape, xv, &t, &cond, None)?;
                let sq = tape.square(y)?;
                tape.sum(sq)
            },
            GradCheckConfig::new(1e-5, 1e-4),
            1,
        );
        assert!(report.passed(), "max rel err {}", report.max_rel_err());
    }
}
