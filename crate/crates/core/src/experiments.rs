//! Toy 2D datasets, the training loop, and the command implementations
//! behind the `flowlab` binary.

use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::captions::{self, FilterConfig};
use crate::diffusion::{training_loss, LossSpec, LossWeighting, NoiseSchedule, Objective, TimestepSampler};
use crate::error::{Error, Result};
use crate::metrics::{self, fit_gaussian, frechet_distance, frechet_distance_sets, wasserstein2, GaussianStats};
use crate::models::{build_model, cfg_dropout_rows, Conditioning, FieldModel, MlpConfig, ModelSpec};
use crate::optim::{AdamW, Checkpoint, Ema};
use crate::rng::Rng;
use crate::samplers::{self, guided_field, model_field, GuidanceSpec, Method, SamplerConfig, SweepConfig, VectorField};
use crate::tensor::Tensor;
use crate::vae_losses::{self, StereoSignal, StftConfig};
use crate::autodiff::Tape;

/// Sample count cap for the assignment-based W2 estimate.
pub const W2_MAX_POINTS: usize = 512;

const STREAM_INIT: u64 = 1;
const STREAM_DATA: u64 = 2;
const STREAM_TRAIN: u64 = 3;
const STREAM_DROPOUT: u64 = 4;
const STREAM_EVAL: u64 = 5;
const STREAM_NOISE: u64 = 6;
const STREAM_TARGET: u64 = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetName {
    #[default]
    GaussMixture,
    TwoMoons,
    CondCheckerboard,
}

impl DatasetName {
    pub fn num_classes(self) -> usize {
        match self {
            DatasetName::CondCheckerboard => 4,
            _ => 0,
        }
    }
}

impl FromStr for DatasetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gauss_mixture" => Ok(DatasetName::GaussMixture),
            "two_moons" => Ok(DatasetName::TwoMoons),
            "cond_checkerboard" => Ok(DatasetName::CondCheckerboard),
            other => Err(Error::Config(format!("unknown dataset {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDataset {
    pub name: DatasetName,
    /// `(n, 2)`.
    pub points: Tensor,
    pub labels: Option<Vec<usize>>,
}

impl ToyDataset {
    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub const MIXTURE_CENTER: f64 = 2.0;
pub const MIXTURE_STD: f64 = 0.3;

/// Mean and covariance of the four-Gaussian mixture: zero mean and
/// `(c² + σ²)·I`, since the center signs are independent.
pub fn gauss_mixture_moments() -> (Vec<f64>, Tensor) {
    let v = MIXTURE_CENTER * MIXTURE_CENTER + MIXTURE_STD * MIXTURE_STD;
    (vec![0.0, 0.0], Tensor::eye(2).scale(v))
}

/// Exact mean and covariance of a toy dataset's generating distribution.
pub fn target_moments(name: DatasetName) -> GaussianStats {
    let (mean, cov) = match name {
        DatasetName::GaussMixture => gauss_mixture_moments(),
        DatasetName::TwoMoons => {
            // θ ~ U(0, π): E[sin θ] = 2/π, E[cos θ] = E[sin θ cos θ] = 0,
            // Var[cos θ] = 1/2, Var[sin θ] = 1/2 − 4/π². Moon means sit at
            // (±0.5, ±d) around the overall mean.
            let pi = std::f64::consts::PI;
            let d = 2.0 / pi - 0.25;
            let noise = 0.01;
            let vx = 0.5 + 0.25 + noise;
            let vy = 0.5 - 4.0 / (pi * pi) + d * d + noise;
            let cxy = -0.5 * d;
            (vec![0.0, 0.0], Tensor::matrix(2, 2, vec![vx, cxy, cxy, vy]).expect("2x2"))
        }
        DatasetName::CondCheckerboard => {
            // uniform over the on-cells: per-cell variance 1/12 plus the
            // spread of cell centers
            let cells = checkerboard_cells();
            let k = cells.len() as f64;
            let centers: Vec<(f64, f64)> = cells.iter().map(|c| (c.0 + 0.5, c.1 + 0.5)).collect();
            let mx = centers.iter().map(|c| c.0).sum::<f64>() / k;
            let my = centers.iter().map(|c| c.1).sum::<f64>() / k;
            let sxx = centers.iter().map(|c| (c.0 - mx).powi(2)).sum::<f64>() / k + 1.0 / 12.0;
            let syy = centers.iter().map(|c| (c.1 - my).powi(2)).sum::<f64>() / k + 1.0 / 12.0;
            let sxy = centers.iter().map(|c| (c.0 - mx) * (c.1 - my)).sum::<f64>() / k;
            (vec![mx, my], Tensor::matrix(2, 2, vec![sxx, sxy, sxy, syy]).expect("2x2"))
        }
    };
    GaussianStats { mean, cov }
}

/// The "on" cells of the 4×4 checkerboard over [−2, 2]²: `(x0, y0, class)`
/// with unit-size cells starting at `(x0, y0)`; the class is the quadrant.
pub fn checkerboard_cells() -> Vec<(f64, f64, usize)> {
    let mut cells = Vec::new();
    for i in 0..4 {
        for j in 0..4 {
            if (i + j) % 2 == 0 {
                let (x0, y0) = (-2.0 + i as f64, -2.0 + j as f64);
                let class = usize::from(x0 >= 0.0) + 2 * usize::from(y0 >= 0.0);
                cells.push((x0, y0, class));
            }
        }
    }
    cells
}

/// Class of the checkerboard cell whose center is nearest to `p`.
pub fn nearest_cell_class(p: &[f64]) -> usize {
    checkerboard_cells()
        .into_iter()
        .map(|(x0, y0, c)| ((p[0] - x0 - 0.5).powi(2) + (p[1] - y0 - 0.5).powi(2), c))
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .expect("non-empty board")
        .1
}

pub fn gen_toy_dataset(name: DatasetName, n: usize, seed: u64) -> Result<ToyDataset> {
    if n == 0 {
        return Err(Error::Contract("dataset size must be at least 1".into()));
    }
    let mut rng = Rng::new(seed);
    let mut pts = Vec::with_capacity(2 * n);
    let mut labels = Vec::new();
    match name {
        DatasetName::GaussMixture => {
            for _ in 0..n {
                let k = rng.below(4);
                let cx = if k & 1 == 0 { -MIXTURE_CENTER } else { MIXTURE_CENTER };
                let cy = if k & 2 == 0 { -MIXTURE_CENTER } else { MIXTURE_CENTER };
                pts.push(cx + MIXTURE_STD * rng.normal());
                pts.push(cy + MIXTURE_STD * rng.normal());
            }
        }
        DatasetName::TwoMoons => {
            for _ in 0..n {
                let theta = std::f64::consts::PI * rng.uniform();
                let (x, y) = if rng.bernoulli(0.5) {
                    (theta.cos(), theta.sin())
                } else {
                    (1.0 - theta.cos(), 0.5 - theta.sin())
                };
                pts.push(x - 0.5 + 0.1 * rng.normal());
                pts.push(y - 0.25 + 0.1 * rng.normal());
            }
        }
        DatasetName::CondCheckerboard => {
            let cells = checkerboard_cells();
            for _ in 0..n {
                let class = rng.below(4);
                let options: Vec<_> = cells.iter().filter(|c| c.2 == class).collect();
                let (x0, y0, _) = options[rng.below(options.len())];
                pts.push(x0 + rng.uniform());
                pts.push(y0 + rng.uniform());
                labels.push(class);
            }
        }
    }
    Ok(ToyDataset {
        name,
        points: Tensor::matrix(n, 2, pts)?,
        labels: (name.num_classes() > 0).then_some(labels),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub name: DatasetName,
    /// Size of the fixed training pool batches are drawn from.
    pub pool: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            name: DatasetName::GaussMixture,
            pool: 20_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch: usize,
    /// Weight EMA decay; the saved model holds the averaged weights. 0 disables.
    pub ema_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            steps: 3000,
            batch: 256,
            ema_decay: 0.9993,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerDefaults {
    pub method: Method,
    pub steps: usize,
    pub w_cfg: f64,
    /// Switch CFG off for `t > 0.6`.
    pub limited_interval: bool,
    pub w_ag: f64,
    /// Samples drawn for the end-of-training statistics.
    pub n_eval: usize,
}

impl Default for SamplerDefaults {
    fn default() -> Self {
        Self {
            method: Method::Euler,
            steps: 100,
            w_cfg: 3.5,
            limited_interval: false,
            w_ag: 1.0,
            n_eval: 10_000,
        }
    }
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec::Mlp(MlpConfig::default())
    }
}

impl ModelSpec {
    /// Same architecture with data and class dimensions set for a dataset.
    pub fn for_data(&self, data_dim: usize, num_classes: usize) -> Self {
        match self {
            ModelSpec::Mlp(c) => ModelSpec::Mlp(MlpConfig { data_dim, num_classes, ..c.clone() }),
            ModelSpec::Dit(c) => ModelSpec::Dit(crate::models::DiTConfig { data_dim, num_classes, ..c.clone() }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub p_uncond: f64,
    pub objective: Objective,
    pub schedule: NoiseSchedule,
    pub log_every: usize,
    /// Steps per "epoch" for the epoch-mean loss summary.
    pub epoch_len: usize,
    pub dataset: DatasetConfig,
    pub model: ModelSpec,
    pub t_sampler: TimestepSampler,
    pub weighting: LossWeighting,
    pub optim: OptimConfig,
    pub sampler: SamplerDefaults,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            p_uncond: 0.1,
            objective: Objective::Otcfm,
            schedule: NoiseSchedule::Cosine,
            log_every: 50,
            epoch_len: 500,
            dataset: DatasetConfig::default(),
            model: ModelSpec::default(),
            t_sampler: TimestepSampler::logit_normal(),
            weighting: LossWeighting::Unit,
            optim: OptimConfig::default(),
            sampler: SamplerDefaults::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.optim.steps == 0 || self.optim.batch == 0 {
            return bad("optim.steps and optim.batch must be at least 1".into());
        }
        if !(self.optim.lr > 0.0) {
            return bad(format!("optim.lr must be positive, got {}", self.optim.lr));
        }
        if !(0.0..1.0).contains(&self.optim.ema_decay) {
            return bad(format!("optim.ema_decay must be in [0, 1), got {}", self.optim.ema_decay));
        }
        if !(0.0..=1.0).contains(&self.p_uncond) {
            return bad(format!("p_uncond must be in [0, 1], got {}", self.p_uncond));
        }
        if self.log_every == 0 || self.epoch_len == 0 {
            return bad("log_every and epoch_len must be at least 1".into());
        }
        if self.dataset.pool == 0 {
            return bad("dataset.pool must be at least 1".into());
        }
        if self.sampler.steps == 0 {
            return bad("sampler.steps must be at least 1".into());
        }
        if let (Objective::Otcfm, LossWeighting::MinSnrGamma { .. }) = (self.objective, self.weighting) {
            return bad("min-SNR weighting applies to the v-diffusion objective".into());
        }
        Ok(())
    }

    pub fn loss_spec(&self) -> LossSpec {
        LossSpec {
            objective: self.objective,
            sampler: self.t_sampler,
            weighting: self.weighting,
            schedule: self.schedule,
        }
    }

    /// Model spec resolved against the dataset.
    pub fn resolved_model(&self) -> ModelSpec {
        self.model.for_data(2, self.dataset.name.num_classes())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Defaults, overlaid with the optional file, overlaid with `key=value`
    /// overrides (dotted keys, TOML values; bare words are strings).
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse()
                    .map_err(|e: toml::de::Error| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for (key, value) in overrides {
            set_dotted(&mut table, key, value)?;
        }
        let cfg: Self = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_toml_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Sets `a.b.c = value` inside `table`, creating intermediate tables.
pub fn set_dotted(table: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {p} is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_toml_value(raw));
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleStats {
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
    /// Empirical 2-Wasserstein distance to fresh data samples.
    pub w2_to_target: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    /// `(steps completed, mean loss over the window since the last entry)`.
    pub loss_curve: Vec<(usize, f64)>,
    pub epoch_means: Vec<f64>,
    pub final_stats: SampleStats,
    /// Not written to disk, so run directories stay byte-reproducible.
    #[serde(skip)]
    pub wall_time_s: f64,
}

impl RunReport {
    pub fn first_epoch_mean(&self) -> Option<f64> {
        self.epoch_means.first().copied()
    }

    pub fn final_epoch_mean(&self) -> Option<f64> {
        self.epoch_means.last().copied()
    }

    pub fn loss_csv(&self) -> String {
        let mut out = String::from("step,loss\n");
        for (s, l) in &self.loss_curve {
            out.push_str(&format!("{s},{}\n", samplers::fmt_sig6(*l)));
        }
        out
    }
}

pub struct TrainedRun {
    pub config: ExperimentConfig,
    pub model: Box<dyn FieldModel>,
    pub report: RunReport,
}

impl TrainedRun {
    pub fn checkpoint(&self) -> Checkpoint {
        self.model.store().to_checkpoint()
    }

    /// Writes `checkpoint.json`, `config.toml`, `report.json` and `loss.csv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.checkpoint().save(&dir.join(CHECKPOINT_FILE))?;
        write(&dir.join(CONFIG_FILE), &self.config.to_toml()?)?;
        write(&dir.join("report.json"), &serde_json::to_string_pretty(&self.report)?)?;
        write(&dir.join("loss.csv"), &self.report.loss_csv())
    }
}

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const CONFIG_FILE: &str = "config.toml";

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn gather_rows(points: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let d = points.cols();
    let mut data = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        data.extend_from_slice(points.row(i));
    }
    Tensor::matrix(idx.len(), d, data)
}

/// Runs the training loop and evaluates the final model.
pub fn train(config: &ExperimentConfig) -> Result<TrainedRun> {
    config.validate()?;
    let start = Instant::now();
    let seed = config.seed;
    let spec = config.resolved_model();
    let mut model = build_model(&spec, &mut Rng::derive(seed, STREAM_INIT))?;
    let data = gen_toy_dataset(config.dataset.name, config.dataset.pool, Rng::derive(seed, STREAM_DATA).next_u64())?;
    let opt = AdamW {
        lr: config.optim.lr,
        beta1: config.optim.beta1,
        beta2: config.optim.beta2,
        eps: config.optim.eps,
        weight_decay: config.optim.weight_decay,
    };
    let loss_spec = config.loss_spec();
    let mut rng = Rng::derive(seed, STREAM_TRAIN);
    let mut drop_rng = Rng::derive(seed, STREAM_DROPOUT);
    let mut ema = (config.optim.ema_decay > 0.0).then(|| Ema::new(model.store(), config.optim.ema_decay));

    let mut curve = Vec::new();
    let mut epoch_means = Vec::new();
    let (mut window, mut window_n) = (0.0, 0usize);
    let (mut epoch, mut epoch_n) = (0.0, 0usize);
    let steps = config.optim.steps;
    for step in 0..steps {
        let idx: Vec<usize> = (0..config.optim.batch).map(|_| rng.below(data.len())).collect();
        let x0 = gather_rows(&data.points, &idx)?;
        let cond = match &data.labels {
            Some(l) => Conditioning::Labels(idx.iter().map(|&i| Some(l[i])).collect()),
            None => Conditioning::unconditional(idx.len()),
        };
        let cond = cfg_dropout_rows(&cond, &mut rng, config.p_uncond);
        let diverged = |e: Error| match e {
            Error::NonFinite(_) => Error::Diverged {
                step,
                last_good: step.checked_sub(1),
            },
            other => other,
        };
        let mut tape = Tape::new();
        let m: &dyn FieldModel = model.as_ref();
        let loss = training_loss(
            &mut tape,
            |tape, x_t, t| m.forward(tape, x_t, t, &cond, Some(&mut drop_rng)),
            &x0,
            &loss_spec,
            &mut rng,
        )
        .map_err(diverged)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(diverged(Error::NonFinite("loss".into())));
        }
        tape.backward_into(loss, model.store_mut())?;
        opt.step(model.store_mut()).map_err(diverged)?;
        if let Some(e) = &mut ema {
            e.update(model.store());
        }

        window += value;
        window_n += 1;
        epoch += value;
        epoch_n += 1;
        let done = step + 1;
        if done % config.log_every == 0 || done == steps {
            curve.push((done, window / window_n as f64));
            (window, window_n) = (0.0, 0);
        }
        if done % config.epoch_len == 0 || done == steps {
            epoch_means.push(epoch / epoch_n as f64);
            (epoch, epoch_n) = (0.0, 0);
        }
    }

    if let Some(e) = &ema {
        e.copy_to(model.store_mut());
    }
    let final_stats = evaluate_samples(model.as_ref(), config, Rng::derive(seed, STREAM_EVAL).next_u64())?;
    Ok(TrainedRun {
        config: config.clone(),
        model,
        report: RunReport {
            loss_curve: curve,
            epoch_means,
            final_stats,
            wall_time_s: start.elapsed().as_secs_f64(),
        },
    })
}

fn sample_stats(samples: &Tensor, target: &Tensor) -> Result<SampleStats> {
    let g = fit_gaussian(samples)?;
    let n = samples.rows().min(target.rows()).min(W2_MAX_POINTS);
    let idx: Vec<usize> = (0..n).collect();
    let w2 = wasserstein2(&gather_rows(samples, &idx)?, &gather_rows(target, &idx)?)?;
    Ok(SampleStats {
        mean: g.mean,
        cov: (0..g.cov.rows()).map(|i| g.cov.row(i).to_vec()).collect(),
        w2_to_target: w2,
    })
}

fn evaluate_samples(model: &dyn FieldModel, config: &ExperimentConfig, seed: u64) -> Result<SampleStats> {
    let n = config.sampler.n_eval.max(2);
    let args = SampleArgs::from_defaults(&config.sampler);
    let (samples, _) = generate(model, None, config, n, &args, seed)?;
    let target = gen_toy_dataset(config.dataset.name, n, Rng::derive(seed, STREAM_TARGET).next_u64())?;
    sample_stats(&samples, &target.points)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleArgs {
    pub method: Method,
    pub steps: usize,
    pub w_cfg: f64,
    pub limited_interval: bool,
    pub w_ag: f64,
    /// Prompt every sample with this class; otherwise classes cycle.
    pub label: Option<usize>,
}

impl SampleArgs {
    pub fn from_defaults(d: &SamplerDefaults) -> Self {
        Self {
            method: d.method,
            steps: d.steps,
            w_cfg: d.w_cfg,
            limited_interval: d.limited_interval,
            w_ag: d.w_ag,
            label: None,
        }
    }

    fn guidance(&self) -> GuidanceSpec {
        GuidanceSpec {
            w_cfg: self.w_cfg,
            cfg_interval: self.limited_interval.then_some(GuidanceSpec::LIMITED_INTERVAL),
            w_ag: self.w_ag,
        }
    }
}

fn conditioning_for(config: &ExperimentConfig, n: usize, label: Option<usize>) -> Result<(Conditioning, Option<Vec<usize>>)> {
    let classes = config.dataset.name.num_classes();
    if classes == 0 {
        if label.is_some() {
            return Err(Error::Config(format!("dataset {:?} is unconditional", config.dataset.name)));
        }
        return Ok((Conditioning::unconditional(n), None));
    }
    if let Some(l) = label {
        if l >= classes {
            return Err(Error::Config(format!("label {l} out of range for {classes} classes")));
        }
    }
    let labels: Vec<usize> = (0..n).map(|i| label.unwrap_or(i % classes)).collect();
    Ok((Conditioning::labels(&labels), Some(labels)))
}

/// Integrates `n` trajectories from seeded standard-normal noise.
///
/// Guidance is applied only to conditional datasets; on unconditional data
/// the conditional and null branches coincide.
pub fn generate(
    model: &dyn FieldModel,
    bad_model: Option<&dyn FieldModel>,
    config: &ExperimentConfig,
    n: usize,
    args: &SampleArgs,
    seed: u64,
) -> Result<(Tensor, Option<Vec<usize>>)> {
    if args.steps == 0 {
        return Err(Error::Contract("NFE must be at least 1".into()));
    }
    let (cond, labels) = conditioning_for(config, n, args.label)?;
    let dim = model.data_dim();
    if n == 0 {
        return Ok((Tensor::zeros(&[0, dim]), labels));
    }
    let x_init = Rng::derive(seed, STREAM_NOISE).normal_tensor(&[n, dim]);
    let field = model_field(model, config.objective, config.schedule);
    let bad = bad_model.map(|b| model_field(b, config.objective, config.schedule));
    let mut spec = args.guidance();
    if labels.is_none() {
        spec.w_cfg = 1.0;
    }
    let guided = guided_field(&field, bad.as_ref().map(|b| b as &dyn VectorField), spec)?;
    let out = samplers::sample(&guided, &x_init, &cond, &SamplerConfig { method: args.method, steps: args.steps })?;
    Ok((out.x, labels))
}

/// Loads a run saved by [`TrainedRun::save`]; `path` is the checkpoint file
/// or its directory.
pub fn load_run(path: &Path) -> Result<(ExperimentConfig, Box<dyn FieldModel>)> {
    if !path.exists() {
        return Err(Error::io(path, std::io::Error::from(std::io::ErrorKind::NotFound)));
    }
    let ckpt_path: PathBuf = if path.is_dir() { path.join(CHECKPOINT_FILE) } else { path.to_path_buf() };
    let dir = ckpt_path.parent().unwrap_or(Path::new("."));
    let cfg_path = dir.join(CONFIG_FILE);
    let text = std::fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
    let config = ExperimentConfig::from_toml(&text)?;
    let ckpt = Checkpoint::load(&ckpt_path)?;
    let mut model = build_model(&config.resolved_model(), &mut Rng::new(0))?;
    model.store_mut().load_checkpoint(&ckpt)?;
    Ok((config, model))
}

/// CSV `x,y[,label]` of generated samples.
pub fn samples_csv(samples: &Tensor, labels: Option<&[usize]>) -> String {
    let mut out = String::from(if labels.is_some() { "x,y,label\n" } else { "x,y\n" });
    for i in 0..samples.rows() {
        let r = samples.row(i);
        out.push_str(&format!("{},{}", r[0], r[1]));
        if let Some(l) = labels {
            out.push_str(&format!(",{}", l[i]));
        }
        out.push('\n');
    }
    out
}

/// Samples from a saved run; `bad` is a weaker run used for autoguidance
/// when `args.w_ag != 1`.
pub fn sample_cmd(checkpoint: &Path, bad: Option<&Path>, n: usize, args: &SampleArgs, seed: u64) -> Result<String> {
    let (config, model) = load_run(checkpoint)?;
    let bad_model = bad.map(load_run).transpose()?.map(|(_, m)| m);
    let (x, labels) = generate(model.as_ref(), bad_model.as_deref(), &config, n, args, seed)?;
    Ok(samples_csv(&x, labels.as_deref()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepArgs {
    pub methods: Vec<Method>,
    pub steps: Vec<usize>,
    pub w_cfg: Vec<f64>,
    pub limited_interval: bool,
    pub n_samples: usize,
}

/// Sweep table with FD to the exact target moments and a W2 estimate against
/// a sampled target.
pub fn sweep_model(
    model: &dyn FieldModel,
    config: &ExperimentConfig,
    args: &SweepArgs,
    seed: u64,
) -> Result<samplers::SweepTable> {
    if args.steps.contains(&0) {
        return Err(Error::Contract("NFE must be at least 1".into()));
    }
    let n = args.n_samples;
    let (cond, labels) = conditioning_for(config, n, None)?;
    let target = gen_toy_dataset(config.dataset.name, n.max(2), Rng::derive(seed, STREAM_TARGET).next_u64())?.points;
    let field = model_field(model, config.objective, config.schedule);
    let moments = target_moments(config.dataset.name);
    let fd = |x: &Tensor| frechet_distance(&fit_gaussian(x)?, &moments);
    let w2 = |x: &Tensor| {
        let k = x.rows().min(W2_MAX_POINTS);
        let idx: Vec<usize> = (0..k).collect();
        wasserstein2(&gather_rows(x, &idx)?, &gather_rows(&target, &idx)?)
    };
    let w_cfg = if labels.is_some() { args.w_cfg.clone() } else { args.w_cfg.iter().map(|_| 1.0).collect() };
    let cfg = SweepConfig {
        methods: args.methods.clone(),
        steps: args.steps.clone(),
        w_cfg,
        w_ag: 1.0,
        cfg_interval: args.limited_interval.then_some(GuidanceSpec::LIMITED_INTERVAL),
        n_samples: n,
        seed: Rng::derive(seed, STREAM_NOISE).next_u64(),
    };
    samplers::sweep(&field, None, &cond, model.data_dim(), &[("fd", &fd), ("w2", &w2)], &cfg)
}

pub fn sweep_cmd(checkpoint: &Path, args: &SweepArgs, seed: u64) -> Result<String> {
    let (config, model) = load_run(checkpoint)?;
    Ok(sweep_model(model.as_ref(), &config, args, seed)?.to_csv())
}

#[derive(Debug, Clone, Default)]
pub struct MetricsInputs {
    pub reference: PathBuf,
    pub generated: PathBuf,
    pub ref_posteriors: Option<PathBuf>,
    pub gen_posteriors: Option<PathBuf>,
    /// Text embeddings paired row by row with the generated embeddings.
    pub text_embeddings: Option<PathBuf>,
}

const NOT_COMPUTED: &str = "not computed";

/// Metric report as JSON; metrics without inputs carry a "not computed" marker.
pub fn metrics_cmd(inputs: &MetricsInputs) -> Result<Value> {
    let (_, reference) = metrics::read_vectors(&inputs.reference)?;
    let (_, generated) = metrics::read_vectors(&inputs.generated)?;
    let fd = frechet_distance_sets(&reference, &generated)?;
    let gen_post = inputs.gen_posteriors.as_deref().map(metrics::read_vectors).transpose()?;
    let ref_post = inputs.ref_posteriors.as_deref().map(metrics::read_vectors).transpose()?;
    let kl = match (&ref_post, &gen_post) {
        (Some((_, r)), Some((_, g))) => json!(metrics::paired_kl(r, g)?),
        _ => json!(NOT_COMPUTED),
    };
    let is = match &gen_post {
        Some((_, g)) => json!(metrics::inception_score(g)?),
        None => json!(NOT_COMPUTED),
    };
    let clap = match inputs.text_embeddings.as_deref() {
        Some(p) => {
            let (_, text) = metrics::read_vectors(p)?;
            json!(metrics::embedding_score(&text, &generated)?)
        }
        None => json!(NOT_COMPUTED),
    };
    Ok(json!({
        "fd": fd,
        "paired_kl": kl,
        "inception_score": is,
        "embedding_score": clap,
        "n_reference": reference.rows(),
        "n_generated": generated.rows(),
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutputs {
    pub accepted_jsonl: String,
    pub summary_json: String,
    pub histogram_csv: String,
    pub summary: captions::DatasetSummary,
}

/// Loads a filter config from TOML (all fields optional), then applies the
/// threshold override.
pub fn load_filter_config(path: Option<&Path>, threshold: Option<f64>) -> Result<FilterConfig> {
    let mut cfg: FilterConfig = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => FilterConfig::default(),
    };
    if let Some(t) = threshold {
        cfg.threshold = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn filter_cmd(records: &Path, candidates: &Path, cfg: &FilterConfig) -> Result<FilterOutputs> {
    let records = captions::read_records(records)?;
    let candidates = captions::read_candidates(candidates)?;
    let (accepted, summary) = captions::build_dataset(&records, &candidates, cfg, &captions::toy_embedder)?;
    Ok(FilterOutputs {
        accepted_jsonl: captions::to_jsonl(&accepted)?,
        summary_json: serde_json::to_string_pretty(&summary)?,
        histogram_csv: summary.histogram_csv(),
        summary,
    })
}

impl FilterOutputs {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write(&dir.join("accepted.jsonl"), &self.accepted_jsonl)?;
        write(&dir.join("summary.json"), &self.summary_json)?;
        write(&dir.join("histogram.csv"), &self.histogram_csv)
    }
}

pub fn load_stft_config(path: Option<&Path>) -> Result<StftConfig> {
    let cfg: StftConfig = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => StftConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Clone)]
pub struct VaeLossInputs {
    pub reference: Option<PathBuf>,
    pub estimate: Option<PathBuf>,
    pub channels: usize,
    pub sample_rate: f64,
}

/// Loss report for two raw signals, or for a seeded synthetic pair (a chirp
/// plus noise against a perturbed copy) when no files are given.
pub fn vae_loss_cmd(inputs: &VaeLossInputs, cfg: &StftConfig, seed: u64) -> Result<Value> {
    if inputs.channels == 0 {
        return Err(Error::Config("channels must be at least 1".into()));
    }
    let (x, x_hat) = match (&inputs.reference, &inputs.estimate) {
        (Some(r), Some(e)) => (
            vae_losses::read_raw_f64(r, inputs.channels)?,
            vae_losses::read_raw_f64(e, inputs.channels)?,
        ),
        (None, None) => {
            let mut rng = Rng::new(seed);
            let n = 16384;
            let sr = inputs.sample_rate;
            let mut x = Vec::new();
            let mut y = Vec::new();
            for c in 0..inputs.channels {
                let base: Vec<f64> = vae_losses::chirp(200.0 * (c + 1) as f64, 4000.0, sr, n)
                    .iter()
                    .zip(vae_losses::white_noise(n, 0.05, &mut rng))
                    .map(|(a, b)| a + b)
                    .collect();
                let est: Vec<f64> = base.iter().map(|v| v + 0.01 * rng.normal()).collect();
                x.push(base);
                y.push(est);
            }
            (x, y)
        }
        _ => return Err(Error::Config("give both --reference and --estimate, or neither".into())),
    };
    let mono = |a: &[f64], b: &[f64]| -> Result<Value> {
        let terms = vae_losses::mrstft_terms(a, b, cfg)?;
        Ok(json!({
            "mrstft": terms.iter().map(|t| t.spectral_convergence + t.log_magnitude).sum::<f64>(),
            "per_resolution": cfg.resolutions.iter().zip(&terms).map(|(r, t)| json!({
                "fft_size": r.fft_size, "hop": r.hop, "win_length": r.win_length,
                "spectral_convergence": t.spectral_convergence,
                "log_magnitude": t.log_magnitude,
            })).collect::<Vec<_>>(),
        }))
    };
    let mut report = serde_json::Map::new();
    report.insert("channels".into(), json!(inputs.channels));
    report.insert("samples".into(), json!(x[0].len()));
    for (c, (a, b)) in x.iter().zip(&x_hat).enumerate() {
        report.insert(format!("channel{c}"), mono(a, b)?);
    }
    if inputs.channels == 2 {
        let sx = StereoSignal::new(x[0].clone(), x[1].clone(), inputs.sample_rate)?;
        let sy = StereoSignal::new(x_hat[0].clone(), x_hat[1].clone(), inputs.sample_rate)?;
        report.insert("stereo_mrstft".into(), json!(vae_losses::stereo_mrstft_loss(&sx, &sy, cfg)?));
    }
    Ok(Value::Object(report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn datasets_are_deterministic() {
        for name in [DatasetName::GaussMixture, DatasetName::TwoMoons, DatasetName::CondCheckerboard] {
            assert_eq!(gen_toy_dataset(name, 100, 3).unwrap(), gen_toy_dataset(name, 100, 3).unwrap());
        }
        assert!(gen_toy_dataset(DatasetName::GaussMixture, 0, 0).is_err());
        assert!("spirals".parse::<DatasetName>().is_err());
    }

    #[test]
    fn mixture_mean_is_near_zero() {
        let d = gen_toy_dataset(DatasetName::GaussMixture, 10_000, 4).unwrap();
        let g = fit_gaussian(&d.points).unwrap();
        assert!(g.mean.iter().all(|m| m.abs() < 0.1), "{:?}", g.mean);
        let (_, cov) = gauss_mixture_moments();
        assert!(g.cov.sub(&cov).unwrap().norm() < 0.2);
    }

    #[test]
    fn target_moments_match_large_samples() {
        for name in [DatasetName::GaussMixture, DatasetName::TwoMoons, DatasetName::CondCheckerboard] {
            let d = gen_toy_dataset(name, 200_000, 8).unwrap();
            let g = fit_gaussian(&d.points).unwrap();
            let t = target_moments(name);
            let dm = g.mean.iter().zip(&t.mean).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(dm < 0.02, "{name:?} mean {:?} vs {:?}", g.mean, t.mean);
            assert!(g.cov.max_abs_diff(&t.cov) < 0.03, "{name:?} cov {:?} vs {:?}", g.cov, t.cov);
        }
    }

    #[test]
    fn checkerboard_labels_match_cells() {
        let d = gen_toy_dataset(DatasetName::CondCheckerboard, 400, 5).unwrap();
        let labels = d.labels.unwrap();
        for c in 0..4 {
            assert!(labels.contains(&c));
        }
        for i in 0..d.points.rows() {
            assert_eq!(nearest_cell_class(d.points.row(i)), labels[i]);
        }
    }

    #[test]
    fn config_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "seed = 5\n[optim]\nlr = 0.01\nsteps = 7\n").unwrap();
        let cfg = ExperimentConfig::load(Some(&p), &[("optim.steps".into(), "9".into())]).unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.optim.lr, 0.01);
        assert_eq!(cfg.optim.steps, 9);
        assert_eq!(cfg.optim.batch, 256);
        let cfg = ExperimentConfig::load(None, &[("dataset.name".into(), "two_moons".into())]).unwrap();
        assert_eq!(cfg.dataset.name, DatasetName::TwoMoons);
        assert!(ExperimentConfig::load(None, &[("optim.steps".into(), "0".into())]).is_err());
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    fn tiny() -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.optim.steps = 2;
        c.optim.batch = 16;
        c.sampler.steps = 5;
        c.sampler.n_eval = 32;
        c.dataset.pool = 100;
        c
    }

    #[test]
    fn two_step_run_logs_once_and_reloads() {
        let run = train(&tiny()).unwrap();
        assert_eq!(run.report.loss_curve.len(), 1);
        assert_eq!(run.report.loss_curve[0].0, 2);
        let dir = tempfile::tempdir().unwrap();
        run.save(dir.path()).unwrap();
        let (cfg, model) = load_run(dir.path()).unwrap();
        assert_eq!(cfg, run.config);
        assert_eq!(model.store().to_checkpoint(), run.checkpoint());
    }

    #[test]
    fn sampling_csv_edges() {
        let run = train(&tiny()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        run.save(dir.path()).unwrap();
        let args = SampleArgs::from_defaults(&run.config.sampler);
        assert_eq!(sample_cmd(dir.path(), None, 0, &args, 1).unwrap(), "x,y\n");
        let a = sample_cmd(dir.path(), None, 5, &args, 1).unwrap();
        assert_eq!(a, sample_cmd(dir.path(), None, 5, &args, 1).unwrap());
        assert_eq!(a.lines().count(), 6);
        let zero = SampleArgs { steps: 0, ..args };
        assert!(sample_cmd(dir.path(), None, 5, &zero, 1).is_err());
    }

    #[test]
    fn divergence_reports_last_good_step() {
        let mut c = tiny();
        c.optim.lr = 1e300;
        c.optim.steps = 50;
        match train(&c) {
            Err(Error::Diverged { step, last_good }) => assert_eq!(last_good, step.checked_sub(1)),
            other => panic!("expected divergence, got {:?}", other.map(|r| r.report)),
        }
    }
}
