//! Forward processes, prediction targets, timestep samplers and training
//! losses for v-diffusion and OT conditional flow matching.
//!
//! Time runs from data (`t = 0`) to noise (`t = 1`).

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Timesteps drawn for training and weighting stay inside `[T_CLAMP, 1 − T_CLAMP]`.
pub const T_CLAMP: f64 = 1e-5;

const SINGULAR_COEF: f64 = 1e-12;

pub fn clamp_t(t: f64) -> f64 {
    t.clamp(T_CLAMP, 1.0 - T_CLAMP)
}

fn check_t(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::Domain { what: "t", value: t })
    }
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::shape(op, a.shape(), b.shape()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseSchedule {
    /// `ᾱ_t = cos²(πt/2)`.
    #[default]
    Cosine,
}

impl NoiseSchedule {
    pub fn alpha_at(self, t: f64) -> Result<f64> {
        check_t(t)?;
        Ok(match self {
            NoiseSchedule::Cosine => (std::f64::consts::FRAC_PI_2 * t).cos().powi(2),
        })
    }

    /// `(√ᾱ_t, √(1−ᾱ_t))`.
    pub fn coefficients(self, t: f64) -> Result<(f64, f64)> {
        check_t(t)?;
        Ok(match self {
            NoiseSchedule::Cosine => {
                let phi = std::f64::consts::FRAC_PI_2 * t;
                (phi.cos(), phi.sin())
            }
        })
    }

    pub fn snr(self, t: f64) -> Result<f64> {
        let a = self.alpha_at(t)?;
        Ok(a / (1.0 - a))
    }

    /// Factor turning a v-prediction into the probability-flow velocity `dx/dt`.
    ///
    /// With `x_t = cos φ·x0 + sin φ·ε`, `φ = πt/2`, the derivative is `(π/2)·v`.
    pub fn v_to_velocity(self) -> f64 {
        match self {
            NoiseSchedule::Cosine => std::f64::consts::FRAC_PI_2,
        }
    }
}

pub fn alpha_at(schedule: NoiseSchedule, t: f64) -> Result<f64> {
    schedule.alpha_at(t)
}

/// `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε`.
pub fn diffuse(x0: &Tensor, eps: &Tensor, t: f64, schedule: NoiseSchedule) -> Result<Tensor> {
    check_same("diffuse", x0, eps)?;
    let (a, s) = schedule.coefficients(t)?;
    x0.zip_same(eps, "diffuse", |x, e| a * x + s * e)
}

/// `v = √ᾱ_t·ε − √(1−ᾱ_t)·x0`.
pub fn v_target(x0: &Tensor, eps: &Tensor, t: f64, schedule: NoiseSchedule) -> Result<Tensor> {
    check_same("v_target", x0, eps)?;
    let (a, s) = schedule.coefficients(t)?;
    x0.zip_same(eps, "v_target", |x, e| a * e - s * x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionKind {
    Eps,
    X0,
    V,
    /// Straight-path velocity `ε − x0`; only meaningful for OT-CFM.
    Velocity,
}

/// Converts between ε, x0 and v predictions given the current state `x_t`.
///
/// With `a = √ᾱ`, `s = √(1−ᾱ)` and `a² + s² = 1`:
/// `x0 = a·x_t − s·v`, `ε = s·x_t + a·v`, `x0 = (x_t − s·ε)/a`, `ε = (x_t − a·x0)/s`.
pub fn convert_prediction(
    pred: &Tensor,
    from: PredictionKind,
    to: PredictionKind,
    x_t: &Tensor,
    t: f64,
    schedule: NoiseSchedule,
) -> Result<Tensor> {
    use PredictionKind::*;
    if from == Velocity || to == Velocity {
        return Err(Error::Contract(
            "velocity predictions belong to the OT-CFM path and cannot be converted through a noise schedule".into(),
        ));
    }
    check_same("convert_prediction", pred, x_t)?;
    let (a, s) = schedule.coefficients(t)?;
    if from == to {
        return Ok(pred.clone());
    }
    let need = |coef: f64| {
        if coef.abs() < SINGULAR_COEF {
            Err(Error::Singular { t, coef })
        } else {
            Ok(coef)
        }
    };
    // Reduce everything to (x0, eps) first.
    let (x0, eps) = match from {
        V => (
            x_t.zip_same(pred, "convert", |x, v| a * x - s * v)?,
            x_t.zip_same(pred, "convert", |x, v| s * x + a * v)?,
        ),
        Eps => {
            let a = need(a)?;
            (x_t.zip_same(pred, "convert", |x, e| (x - s * e) / a)?, pred.clone())
        }
        X0 => {
            let s = need(s)?;
            (pred.clone(), x_t.zip_same(pred, "convert", |x, x0| (x - a * x0) / s)?)
        }
        Velocity => unreachable!(),
    };
    Ok(match to {
        Eps => eps,
        X0 => x0,
        V => eps.zip_same(&x0, "convert", |e, x| a * e - s * x)?,
        Velocity => unreachable!(),
    })
}

/// One draw of the forward process together with its regression target.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSample {
    pub x0: Tensor,
    pub eps: Tensor,
    pub t: f64,
    pub x_t: Tensor,
    pub target: Tensor,
}

/// Straight interpolation `x_t = (1−t)·x0 + t·ε` with target `ε − x0`.
pub fn otcfm_path(x0: &Tensor, eps: &Tensor, t: f64) -> Result<PathSample> {
    check_same("otcfm_path", x0, eps)?;
    check_t(t)?;
    Ok(PathSample {
        x_t: x0.zip_same(eps, "otcfm_path", |x, e| (1.0 - t) * x + t * e)?,
        target: x0.zip_same(eps, "otcfm_path", |x, e| e - x)?,
        x0: x0.clone(),
        eps: eps.clone(),
        t,
    })
}

/// Diffusion path with the target for `kind` (ε, x0 or v).
pub fn diffusion_path(
    x0: &Tensor,
    eps: &Tensor,
    t: f64,
    schedule: NoiseSchedule,
    kind: PredictionKind,
) -> Result<PathSample> {
    let x_t = diffuse(x0, eps, t, schedule)?;
    let target = match kind {
        PredictionKind::Eps => eps.clone(),
        PredictionKind::X0 => x0.clone(),
        PredictionKind::V => v_target(x0, eps, t, schedule)?,
        PredictionKind::Velocity => {
            return Err(Error::Contract("velocity target requires the OT-CFM path".into()))
        }
    };
    Ok(PathSample {
        x0: x0.clone(),
        eps: eps.clone(),
        t,
        x_t,
        target,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TimestepSampler {
    Uniform,
    /// `t = σ(z)`, `z ~ N(mean, std²)`.
    LogitNormal { mean: f64, std: f64 },
}

impl Default for TimestepSampler {
    fn default() -> Self {
        TimestepSampler::LogitNormal { mean: 0.0, std: 1.0 }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl TimestepSampler {
    pub fn logit_normal() -> Self {
        Self::default()
    }

    pub fn sample(&self, rng: &mut Rng) -> f64 {
        match *self {
            TimestepSampler::Uniform => clamp_t(rng.uniform()),
            TimestepSampler::LogitNormal { .. } => self.from_normal(rng.normal()),
        }
    }

    /// Maps a standard-normal draw `z` to a timestep; `Uniform` ignores the
    /// normal and uses `Φ(z)`.
    pub fn from_normal(&self, z: f64) -> f64 {
        match *self {
            TimestepSampler::Uniform => clamp_t(0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2))),
            TimestepSampler::LogitNormal { mean, std } => clamp_t(sigmoid(mean + std * z)),
        }
    }
}

pub fn sample_t(sampler: &TimestepSampler, rng: &mut Rng) -> f64 {
    sampler.sample(rng)
}

/// Error function: Maclaurin series below |x| = 2, continued fraction above.
pub fn erf(x: f64) -> f64 {
    1.0 - erfc(x)
}

fn erfc(x: f64) -> f64 {
    let ax = x.abs();
    let r = if ax < 2.0 {
        let mut sum = ax;
        let mut term = ax;
        let x2 = ax * ax;
        let mut n = 0.0;
        loop {
            n += 1.0;
            term *= -x2 / n;
            let add = term / (2.0 * n + 1.0);
            sum += add;
            if add.abs() < 1e-17 * sum.abs() {
                break;
            }
        }
        1.0 - 2.0 / std::f64::consts::PI.sqrt() * sum
    } else {
        // Lentz's method on the Laplace continued fraction.
        let x2 = ax * ax;
        let mut f = ax;
        let mut c = ax;
        let mut d = 0.0;
        for k in 1..200 {
            let an = k as f64 / 2.0;
            d = ax + an * d;
            d = 1.0 / d;
            c = ax + an / c;
            let delta = c * d;
            f *= delta;
            if (delta - 1.0).abs() < 1e-16 {
                break;
            }
        }
        (-x2).exp() / (f * std::f64::consts::PI.sqrt())
    };
    if x >= 0.0 {
        r
    } else {
        2.0 - r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LossWeighting {
    #[default]
    Unit,
    MinSnrGamma { gamma: f64 },
}

/// Min-SNR-γ weight: `min(SNR, γ)/SNR` for ε and `min(SNR, γ)/(SNR + 1)` for v.
///
/// `t` is clamped to `[T_CLAMP, 1 − T_CLAMP]` first, so the weight is finite
/// and continuous everywhere.
pub fn minsnr_weight(t: f64, gamma: f64, schedule: NoiseSchedule, kind: PredictionKind) -> Result<f64> {
    if gamma <= 0.0 || !gamma.is_finite() {
        return Err(Error::Domain {
            what: "gamma",
            value: gamma,
        });
    }
    check_t(t)?;
    let snr = schedule.snr(clamp_t(t))?;
    let capped = snr.min(gamma);
    match kind {
        PredictionKind::Eps => Ok(capped / snr),
        PredictionKind::V => Ok(capped / (snr + 1.0)),
        other => Err(Error::Contract(format!("min-SNR weighting is defined for eps and v, not {other:?}"))),
    }
}

impl LossWeighting {
    pub fn weight(&self, t: f64, schedule: NoiseSchedule, kind: PredictionKind) -> Result<f64> {
        match *self {
            LossWeighting::Unit => Ok(1.0),
            LossWeighting::MinSnrGamma { gamma } => minsnr_weight(t, gamma, schedule, kind),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// v-prediction on the cosine schedule.
    VDiffusion,
    #[default]
    Otcfm,
}

impl Objective {
    pub fn prediction(self) -> PredictionKind {
        match self {
            Objective::VDiffusion => PredictionKind::V,
            Objective::Otcfm => PredictionKind::Velocity,
        }
    }
}

/// Everything one training step needs besides the field itself.
#[derive(Debug, Clone, Copy)]
pub struct LossSpec {
    pub objective: Objective,
    pub sampler: TimestepSampler,
    pub weighting: LossWeighting,
    pub schedule: NoiseSchedule,
}

impl Default for LossSpec {
    fn default() -> Self {
        Self {
            objective: Objective::Otcfm,
            sampler: TimestepSampler::logit_normal(),
            weighting: LossWeighting::Unit,
            schedule: NoiseSchedule::Cosine,
        }
    }
}

/// A per-row training batch: `x_t`, the target, the sampled `t` and the weights.
#[derive(Debug, Clone)]
pub struct TrainingBatch {
    pub x_t: Tensor,
    pub target: Tensor,
    pub t: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Draws one independent `(t, ε)` per row of `x0` (shape `(B, D)`) and forms
/// the noised inputs and regression targets.
pub fn make_training_batch(x0: &Tensor, spec: &LossSpec, rng: &mut Rng) -> Result<TrainingBatch> {
    if x0.rank() != 2 {
        return Err(Error::Contract(format!("training batch must be (B, D), got {:?}", x0.shape())));
    }
    let (b, d) = (x0.rows(), x0.cols());
    if b == 0 {
        return Err(Error::Empty("training batch"));
    }
    let mut x_t = Vec::with_capacity(b * d);
    let mut target = Vec::with_capacity(b * d);
    let mut ts = Vec::with_capacity(b);
    let mut weights = Vec::with_capacity(b);
    let kind = spec.objective.prediction();
    for i in 0..b {
        let t = spec.sampler.sample(rng);
        let row = Tensor::vector(x0.row(i).to_vec());
        let eps = rng.normal_tensor(&[d]);
        let path = match spec.objective {
            Objective::Otcfm => otcfm_path(&row, &eps, t)?,
            Objective::VDiffusion => diffusion_path(&row, &eps, t, spec.schedule, kind)?,
        };
        let w = match (spec.objective, spec.weighting) {
            (_, LossWeighting::Unit) => 1.0,
            (Objective::VDiffusion, w) => w.weight(t, spec.schedule, kind)?,
            (Objective::Otcfm, LossWeighting::MinSnrGamma { .. }) => {
                return Err(Error::Config("min-SNR weighting applies to the v-diffusion objective".into()))
            }
        };
        x_t.extend_from_slice(path.x_t.data());
        target.extend_from_slice(path.target.data());
        ts.push(t);
        weights.push(w);
    }
    Ok(TrainingBatch {
        x_t: Tensor::matrix(b, d, x_t)?,
        target: Tensor::matrix(b, d, target)?,
        t: ts,
        weights,
    })
}

/// Weighted squared error `(1/(B·D)) Σ_i w_i ‖pred_i − target_i‖²` on the tape.
pub fn weighted_mse(tape: &mut Tape, pred: Var, target: &Tensor, weights: &[f64]) -> Result<Var> {
    if tape.shape(pred) != target.shape() {
        return Err(Error::shape("training_loss", tape.shape(pred), target.shape()));
    }
    let target = tape.constant(target.clone());
    let diff = tape.sub(pred, target)?;
    let sq = tape.square(diff)?;
    let per_row = tape.sum_last(sq)?;
    let w = tape.constant(Tensor::vector(weights.to_vec()));
    let weighted = tape.mul(per_row, w)?;
    let total = tape.sum(weighted)?;
    let n = tape.value(target).len() as f64;
    tape.scale(total, 1.0 / n)
}

/// Builds the training loss for a batch of clean data `x0` (shape `(B, D)`).
///
/// `field(tape, x_t, t)` must return a `(B, D)` prediction; conditioning is
/// whatever the closure captures.
pub fn training_loss<F>(tape: &mut Tape, field: F, x0: &Tensor, spec: &LossSpec, rng: &mut Rng) -> Result<Var>
where
    F: FnOnce(&mut Tape, Var, &[f64]) -> Result<Var>,
{
    let batch = make_training_batch(x0, spec, rng)?;
    let x_t = tape.constant(batch.x_t.clone());
    let pred = field(tape, x_t, &batch.t)?;
    weighted_mse(tape, pred, &batch.target, &batch.weights)
}

#[cfg(test)]
mod tests {
    use super::*;

    const COS: NoiseSchedule = NoiseSchedule::Cosine;

    fn s(v: f64) -> Tensor {
        Tensor::vector(vec![v])
    }

    #[test]
    fn alpha_endpoints_and_midpoint() {
        assert_eq!(alpha_at(COS, 0.0).unwrap(), 1.0);
        assert!(alpha_at(COS, 1.0).unwrap() < 1e-12);
        assert!((alpha_at(COS, 0.5).unwrap() - 0.5).abs() < 1e-15);
        assert!(matches!(alpha_at(COS, 1.5), Err(Error::Domain { .. })));
        assert!(matches!(alpha_at(COS, -0.1), Err(Error::Domain { .. })));
    }

    #[test]
    fn alpha_strictly_decreasing() {
        let mut prev = 1.0;
        for i in 1..=1000 {
            let a = alpha_at(COS, i as f64 / 1000.0).unwrap();
            assert!(a < prev);
            prev = a;
        }
    }

    #[test]
    fn diffuse_examples() {
        let (x0, e) = (s(2.0), s(1.0));
        assert_eq!(diffuse(&x0, &e, 0.0, COS).unwrap(), x0);
        assert!((diffuse(&x0, &e, 1.0, COS).unwrap().item() - 1.0).abs() < 1e-15);
        let mid = diffuse(&x0, &e, 0.5, COS).unwrap().item();
        assert!((mid - 3.0 / 2f64.sqrt()).abs() < 1e-12, "{mid}");
        assert!(diffuse(&x0, &Tensor::zeros(&[2]), 0.5, COS).is_err());
    }

    #[test]
    fn v_target_examples() {
        let (x0, e) = (s(2.0), s(1.0));
        assert_eq!(v_target(&x0, &e, 0.0, COS).unwrap().item(), 1.0);
        assert!((v_target(&x0, &e, 1.0, COS).unwrap().item() + 2.0).abs() < 1e-15);
        let mid = v_target(&x0, &e, 0.5, COS).unwrap().item();
        assert!((mid + 1.0 / 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn conversion_solves_the_two_by_two_system() {
        let x_t = s(3.0 / 2f64.sqrt());
        let v = s(-1.0 / 2f64.sqrt());
        let x0 = convert_prediction(&v, PredictionKind::V, PredictionKind::X0, &x_t, 0.5, COS).unwrap();
        let eps = convert_prediction(&v, PredictionKind::V, PredictionKind::Eps, &x_t, 0.5, COS).unwrap();
        assert!((x0.item() - 2.0).abs() < 1e-12);
        assert!((eps.item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn conversion_singular_near_endpoints() {
        let x = s(1.0);
        assert!(matches!(
            convert_prediction(&x, PredictionKind::Eps, PredictionKind::X0, &x, 1.0, COS),
            Err(Error::Singular { .. })
        ));
        assert!(matches!(
            convert_prediction(&x, PredictionKind::X0, PredictionKind::Eps, &x, 0.0, COS),
            Err(Error::Singular { .. })
        ));
        assert!(convert_prediction(&x, PredictionKind::Velocity, PredictionKind::V, &x, 0.5, COS).is_err());
    }

    #[test]
    fn otcfm_examples() {
        let p = otcfm_path(&s(2.0), &s(0.0), 0.25).unwrap();
        assert_eq!(p.x_t.item(), 1.5);
        assert_eq!(p.target.item(), -2.0);
        let p0 = otcfm_path(&s(2.0), &s(5.0), 0.0).unwrap();
        assert_eq!(p0.x_t.item(), 2.0);
        assert_eq!(p0.target.item(), 3.0);
        assert_eq!(otcfm_path(&s(2.0), &s(5.0), 1.0).unwrap().x_t.item(), 5.0);
    }

    #[test]
    fn logit_normal_at_zero_is_half() {
        assert_eq!(TimestepSampler::logit_normal().from_normal(0.0), 0.5);
    }

    #[test]
    fn samples_are_clamped() {
        let ln = TimestepSampler::LogitNormal { mean: 0.0, std: 50.0 };
        let mut rng = Rng::new(1);
        for _ in 0..10_000 {
            let t = ln.sample(&mut rng);
            assert!((T_CLAMP..=1.0 - T_CLAMP).contains(&t));
        }
    }

    #[test]
    fn minsnr_examples() {
        // SNR = 1 at t = 0.5; SNR = 10 where cos² = 10/11.
        let t1 = 0.5;
        let t10 = (10f64 / 11.0).sqrt().acos() / std::f64::consts::FRAC_PI_2;
        let w = |t, k| minsnr_weight(t, 5.0, COS, k).unwrap();
        assert!((w(t1, PredictionKind::Eps) - 1.0).abs() < 1e-12);
        assert!((w(t10, PredictionKind::Eps) - 0.5).abs() < 1e-12);
        assert!((w(t1, PredictionKind::V) - 0.5).abs() < 1e-12);
        assert!(w(0.0, PredictionKind::Eps).is_finite());
        assert!(minsnr_weight(0.5, 5.0, COS, PredictionKind::X0).is_err());
    }

    #[test]
    fn erf_reference_values() {
        // Standard table values.
        assert!((erf(0.5) - 0.520_499_877_813_046_5).abs() < 1e-14);
        assert!((erf(1.0) - 0.842_700_792_949_714_9).abs() < 1e-14);
        assert!((erf(2.5) - 0.999_593_047_982_555).abs() < 1e-14);
        assert!((erf(-1.0) + 0.842_700_792_949_714_9).abs() < 1e-14);
    }

    #[test]
    fn loss_is_zero_for_exact_field_and_one_for_unit_offset() {
        let x0 = Tensor::matrix(3, 2, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let spec = LossSpec::default();
        let batch = make_training_batch(&x0, &spec, &mut Rng::new(4)).unwrap();

        let mut tape = Tape::new();
        let loss = training_loss(&mut tape, |tape, _, _| Ok(tape.constant(batch.target.clone())), &x0, &spec, &mut Rng::new(4))
            .unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);

        let mut tape = Tape::new();
        let shifted = batch.target.map(|v| v + 1.0);
        let loss = training_loss(&mut tape, |tape, _, _| Ok(tape.constant(shifted)), &x0, &spec, &mut Rng::new(4)).unwrap();
        assert!((tape.value(loss).item() - 1.0).abs() < 1e-12);
    }

    // For Gaussian x0 and ε the best linear predictor of ε − x0 from x_t has
    // slope (2t−1)/((1−t)²+t²); gradient descent on the loss should find it.
    #[test]
    fn linear_fit_recovers_gaussian_regression_slope() {
        use crate::optim::{AdamW, ParamStore};
        let mut rng = Rng::new(21);
        let n = 50_000;
        let x0 = rng.normal_tensor(&[n]);
        let eps = rng.normal_tensor(&[n]);
        let opt = AdamW { lr: 0.05, ..AdamW::default() };
        for t in [0.2, 0.5, 0.8] {
            let path = otcfm_path(&x0, &eps, t).unwrap();
            let mut store = ParamStore::new();
            let a = store.add("a", Tensor::vector(vec![0.0]));
            for _ in 0..300 {
                let mut tape = Tape::new();
                let w = tape.param(&store, a);
                let x = tape.constant(path.x_t.clone());
                let pred = tape.mul(x, w).unwrap();
                let loss = weighted_mse(&mut tape, pred, &path.target, &vec![1.0; n]).unwrap();
                tape.backward_into(loss, &mut store).unwrap();
                opt.step(&mut store).unwrap();
            }
            let fitted = store.value(a).item();
            let exact = (2.0 * t - 1.0) / ((1.0 - t) * (1.0 - t) + t * t);
            assert!((fitted - exact).abs() < 1e-2, "t={t}: {fitted} vs {exact}");
        }
    }
}
