//! Deterministic ODE samplers from `t = 1` (noise) to `t = 0` (data), with
//! classifier-free guidance and autoguidance.

use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{NoiseSchedule, Objective};
use crate::error::{Error, Result};
use crate::models::{Conditioning, FieldModel};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Anything that returns a velocity `dx/dt` for a batch at a shared time.
pub trait VectorField: Sync {
    fn velocity(&self, x: &Tensor, t: f64, cond: &Conditioning) -> Result<Tensor>;
}

type FieldFn<'a> = dyn Fn(&Tensor, f64, &Conditioning) -> Result<Tensor> + Sync + 'a;

/// A velocity function with a call counter.
pub struct OdeField<'a> {
    f: Box<FieldFn<'a>>,
    calls: AtomicUsize,
}

impl<'a> OdeField<'a> {
    pub fn new(f: impl Fn(&Tensor, f64, &Conditioning) -> Result<Tensor> + Sync + 'a) -> Self {
        Self {
            f: Box::new(f),
            calls: AtomicUsize::new(0),
        }
    }

    /// Number of evaluations so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::SeqCst);
    }
}

impl VectorField for OdeField<'_> {
    fn velocity(&self, x: &Tensor, t: f64, cond: &Conditioning) -> Result<Tensor> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        (self.f)(x, t, cond)
    }
}

/// Wraps a trained model as a sampling field.
///
/// OT-CFM models predict `dx/dt` directly; v-prediction models are rescaled
/// by the schedule's velocity factor.
pub fn model_field<'a>(model: &'a dyn FieldModel, objective: Objective, schedule: NoiseSchedule) -> OdeField<'a> {
    let factor = match objective {
        Objective::Otcfm => 1.0,
        Objective::VDiffusion => schedule.v_to_velocity(),
    };
    OdeField::new(move |x, t, cond| {
        let ts = vec![t; x.rows()];
        let out = model.predict(x, &ts, cond)?;
        Ok(if factor == 1.0 { out } else { out.scale(factor) })
    })
}

/// `steps + 1` equally spaced knots from 1 down to 0.
pub fn make_t_grid(steps: usize) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(Error::Contract("sampler needs at least one step".into()));
    }
    Ok((0..=steps).map(|i| (steps - i) as f64 / steps as f64).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Euler,
    Heun,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Euler => "euler",
            Method::Heun => "heun",
        }
    }

    pub fn nfe(self, steps: usize) -> usize {
        match self {
            Method::Euler => steps,
            Method::Heun => (2 * steps).saturating_sub(1),
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "euler" => Ok(Method::Euler),
            "heun" => Ok(Method::Heun),
            other => Err(Error::Config(format!("unknown sampler method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub method: Method,
    pub steps: usize,
}

impl SamplerConfig {
    pub fn nfe(&self) -> usize {
        self.method.nfe(self.steps)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    pub x: Tensor,
    /// Evaluations of the (possibly guided) field.
    pub nfe: usize,
}

fn check_state(x: &Tensor, step: usize) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("sampler state at step {step}")))
    }
}

fn axpy(x: &Tensor, a: f64, d: &Tensor) -> Result<Tensor> {
    x.zip_same(d, "sampler_step", |x, d| x + a * d)
}

/// Explicit Euler over the uniform grid.
pub fn euler_sample(field: &dyn VectorField, x_init: &Tensor, cond: &Conditioning, steps: usize) -> Result<SampleOutput> {
    let grid = make_t_grid(steps)?;
    let mut x = x_init.clone();
    let mut nfe = 0;
    for i in 0..steps {
        let d = field.velocity(&x, grid[i], cond)?;
        nfe += 1;
        x = axpy(&x, grid[i + 1] - grid[i], &d)?;
        check_state(&x, i)?;
    }
    Ok(SampleOutput { x, nfe })
}

/// Heun (trapezoidal predictor-corrector); the last step is plain Euler,
/// so `steps` steps cost `2·steps − 1` evaluations.
pub fn heun_sample(field: &dyn VectorField, x_init: &Tensor, cond: &Conditioning, steps: usize) -> Result<SampleOutput> {
    let grid = make_t_grid(steps)?;
    let mut x = x_init.clone();
    let mut nfe = 0;
    for i in 0..steps {
        let dt = grid[i + 1] - grid[i];
        let d = field.velocity(&x, grid[i], cond)?;
        nfe += 1;
        let pred = axpy(&x, dt, &d)?;
        if i + 1 == steps {
            x = pred;
        } else {
            check_state(&pred, i)?;
            let d2 = field.velocity(&pred, grid[i + 1], cond)?;
            nfe += 1;
            let avg = d.zip_same(&d2, "heun", |a, b| 0.5 * (a + b))?;
            x = axpy(&x, dt, &avg)?;
        }
        check_state(&x, i)?;
    }
    Ok(SampleOutput { x, nfe })
}

pub fn sample(field: &dyn VectorField, x_init: &Tensor, cond: &Conditioning, cfg: &SamplerConfig) -> Result<SampleOutput> {
    match cfg.method {
        Method::Euler => euler_sample(field, x_init, cond, cfg.steps),
        Method::Heun => heun_sample(field, x_init, cond, cfg.steps),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceSpec {
    pub w_cfg: f64,
    /// Closed time interval where CFG is applied; `None` means everywhere.
    pub cfg_interval: Option<(f64, f64)>,
    pub w_ag: f64,
}

impl Default for GuidanceSpec {
    fn default() -> Self {
        Self {
            w_cfg: 1.0,
            cfg_interval: None,
            w_ag: 1.0,
        }
    }
}

impl GuidanceSpec {
    pub fn cfg(w_cfg: f64) -> Self {
        Self {
            w_cfg,
            ..Self::default()
        }
    }

    /// CFG switched off for the first 40% of the trajectory, `t ∈ (0.6, 1]`.
    pub const LIMITED_INTERVAL: (f64, f64) = (0.0, 0.6);

    fn cfg_active_at(&self, t: f64) -> bool {
        self.w_cfg != 1.0 && self.cfg_interval.is_none_or(|(lo, hi)| t >= lo && t <= hi)
    }
}

/// CFG followed by autoguidance on top of a conditional field.
///
/// The unconditional branch reuses `cond_field` with null conditioning, so
/// its evaluations land on the same counter.
pub struct GuidedField<'a> {
    cond_field: &'a dyn VectorField,
    bad_field: Option<&'a dyn VectorField>,
    spec: GuidanceSpec,
}

pub fn guided_field<'a>(
    cond_field: &'a dyn VectorField,
    bad_field: Option<&'a dyn VectorField>,
    spec: GuidanceSpec,
) -> Result<GuidedField<'a>> {
    for (name, w) in [("w_cfg", spec.w_cfg), ("w_ag", spec.w_ag)] {
        if !(w >= 0.0) || !w.is_finite() {
            return Err(Error::Domain { what: name, value: w });
        }
    }
    if spec.w_ag != 1.0 && bad_field.is_none() {
        return Err(Error::Contract(format!("autoguidance scale {} needs a bad model", spec.w_ag)));
    }
    if let Some((lo, hi)) = spec.cfg_interval {
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(Error::Contract(format!("cfg interval [{lo}, {hi}] is not inside [0, 1]")));
        }
    }
    Ok(GuidedField {
        cond_field,
        bad_field,
        spec,
    })
}

/// `base + w·(v − base)`, elementwise.
pub fn guidance_combine(v: &Tensor, base: &Tensor, w: f64) -> Result<Tensor> {
    v.zip_same(base, "guidance", |v, b| b + w * (v - b))
}

impl VectorField for GuidedField<'_> {
    fn velocity(&self, x: &Tensor, t: f64, cond: &Conditioning) -> Result<Tensor> {
        let mut v = self.cond_field.velocity(x, t, cond)?;
        if self.spec.cfg_active_at(t) {
            let v_uncond = self.cond_field.velocity(x, t, &cond.to_null())?;
            v = guidance_combine(&v, &v_uncond, self.spec.w_cfg)?;
        }
        if self.spec.w_ag != 1.0 {
            if let Some(bad) = self.bad_field {
                let v_bad = bad.velocity(x, t, cond)?;
                v = guidance_combine(&v, &v_bad, self.spec.w_ag)?;
            }
        }
        Ok(v)
    }
}

/// A named statistic of a generated `(n, D)` sample set.
pub type MetricFn<'a> = (&'a str, &'a (dyn Fn(&Tensor) -> Result<f64> + Sync));

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub methods: Vec<Method>,
    /// Solver step counts; each row reports the resulting NFE.
    pub steps: Vec<usize>,
    pub w_cfg: Vec<f64>,
    pub w_ag: f64,
    pub cfg_interval: Option<(f64, f64)>,
    pub n_samples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub method: Method,
    pub steps: usize,
    pub nfe: usize,
    pub w_cfg: f64,
    pub w_ag: f64,
    pub metrics: std::result::Result<Vec<f64>, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub metric_names: Vec<String>,
    pub rows: Vec<SweepRow>,
}

/// Runs every `(method, steps, w_cfg)` combination, in that nesting order.
///
/// Every row starts from the same seeded initial noise, so differences
/// between rows come from the solver and guidance settings only. Rows run
/// in parallel; a failing row keeps its slot with the error message.
pub fn sweep(
    cond_field: &dyn VectorField,
    bad_field: Option<&dyn VectorField>,
    cond: &Conditioning,
    dim: usize,
    metrics: &[MetricFn<'_>],
    cfg: &SweepConfig,
) -> Result<SweepTable> {
    if cond.len() != cfg.n_samples {
        return Err(Error::Contract(format!(
            "{} conditions for {} samples",
            cond.len(),
            cfg.n_samples
        )));
    }
    let x_init = Rng::derive(cfg.seed, 0).normal_tensor(&[cfg.n_samples, dim]);
    let mut grid = Vec::new();
    for &method in &cfg.methods {
        for &steps in &cfg.steps {
            for &w_cfg in &cfg.w_cfg {
                grid.push((method, steps, w_cfg));
            }
        }
    }
    let rows = grid
        .par_iter()
        .map(|&(method, steps, w_cfg)| {
            let run = || -> Result<Vec<f64>> {
                let spec = GuidanceSpec {
                    w_cfg,
                    cfg_interval: cfg.cfg_interval,
                    w_ag: cfg.w_ag,
                };
                let field = guided_field(cond_field, bad_field, spec)?;
                let out = sample(&field, &x_init, cond, &SamplerConfig { method, steps })?;
                metrics.iter().map(|(_, f)| f(&out.x)).collect()
            };
            SweepRow {
                method,
                steps,
                nfe: method.nfe(steps),
                w_cfg,
                w_ag: cfg.w_ag,
                metrics: run().map_err(|e| format!("error[{}]: {e}", e.code())),
            }
        })
        .collect();
    Ok(SweepTable {
        metric_names: metrics.iter().map(|(n, _)| n.to_string()).collect(),
        rows,
    })
}

/// Formats with at most 6 significant digits.
pub fn fmt_sig6(v: f64) -> String {
    if !v.is_finite() {
        return format!("{v}");
    }
    let rounded: f64 = format!("{v:.5e}").parse().expect("round-trip of formatted float");
    format!("{rounded}")
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,steps,nfe,w_cfg,w_ag");
        for name in &self.metric_names {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(
                out,
                "{},{},{},{},{}",
                r.method.name(),
                r.steps,
                r.nfe,
                fmt_sig6(r.w_cfg),
                fmt_sig6(r.w_ag)
            );
            match &r.metrics {
                Ok(values) => values.iter().for_each(|v| {
                    out.push(',');
                    out.push_str(&fmt_sig6(*v));
                }),
                Err(_) => self.metric_names.iter().for_each(|_| out.push_str(",ERR")),
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant(c: f64) -> OdeField<'static> {
        OdeField::new(move |x, _, _| Ok(Tensor::full(x.shape(), c)))
    }

    fn linear() -> OdeField<'static> {
        OdeField::new(|x, _, _| Ok(x.clone()))
    }

    fn one() -> (Tensor, Conditioning) {
        (Tensor::full(&[1, 1], 1.0), Conditioning::unconditional(1))
    }

    #[test]
    fn grid_examples() {
        assert_eq!(make_t_grid(1).unwrap(), vec![1.0, 0.0]);
        assert_eq!(make_t_grid(4).unwrap(), vec![1.0, 0.75, 0.5, 0.25, 0.0]);
        let g = make_t_grid(7).unwrap();
        for w in g.windows(2) {
            assert!((w[1] - w[0] + 1.0 / 7.0).abs() < 1e-15);
        }
        assert!(make_t_grid(0).is_err());
    }

    #[test]
    fn constant_field_is_exact_for_both_methods() {
        let (x, c) = one();
        for steps in [1, 5, 13] {
            let f = constant(2.0);
            let e = euler_sample(&f, &x, &c, steps).unwrap();
            assert_eq!(e.x.item(), -1.0);
            assert_eq!(f.calls(), steps);
            let h = heun_sample(&f, &x, &c, steps).unwrap();
            assert_eq!(h.x, e.x);
            assert_eq!(h.nfe, 2 * steps - 1);
        }
    }

    #[test]
    fn heun_fifty_steps_costs_ninety_nine() {
        let (x, c) = one();
        let f = linear();
        let out = heun_sample(&f, &x, &c, 50).unwrap();
        assert_eq!(out.nfe, 99);
        assert_eq!(f.calls(), 99);
    }

    #[test]
    fn convergence_orders_on_exponential() {
        let (x, c) = one();
        let err = |m: Method, n: usize| {
            let out = sample(&linear(), &x, &c, &SamplerConfig { method: m, steps: n }).unwrap();
            (out.x.item() - (-1f64).exp()).abs()
        };
        for (m, expect) in [(Method::Euler, 2.0), (Method::Heun, 4.0)] {
            let ratio = err(m, 20) / err(m, 40);
            assert!((ratio - expect).abs() < 0.5, "{m:?} {ratio}");
        }
    }

    #[test]
    fn guidance_arithmetic() {
        let cond_field = OdeField::new(|x, _, c: &Conditioning| {
            let v = if c == &c.to_null() { 1.0 } else { 2.0 };
            Ok(Tensor::full(x.shape(), v))
        });
        let bad = constant(1.0);
        let x = Tensor::zeros(&[1, 1]);
        let c = Conditioning::labels(&[0]);

        let g = guided_field(&cond_field, None, GuidanceSpec::cfg(1.0)).unwrap();
        assert_eq!(g.velocity(&x, 0.5, &c).unwrap().item(), 2.0);
        let g = guided_field(&cond_field, None, GuidanceSpec::cfg(3.0)).unwrap();
        assert_eq!(g.velocity(&x, 0.5, &c).unwrap().item(), 4.0);

        let only_ag = GuidanceSpec { w_ag: 2.0, ..GuidanceSpec::default() };
        let g = guided_field(&cond_field, Some(&bad), only_ag).unwrap();
        assert_eq!(g.velocity(&x, 0.5, &c).unwrap().item(), 3.0);

        assert!(guided_field(&cond_field, None, only_ag).is_err());
    }

    #[test]
    fn guidance_call_accounting() {
        let (x, c) = one();
        let base = linear();
        let bad = linear();
        let spec = GuidanceSpec { w_cfg: 3.0, cfg_interval: None, w_ag: 2.0 };
        let g = guided_field(&base, Some(&bad), spec).unwrap();
        let out = euler_sample(&g, &x, &c, 10).unwrap();
        assert_eq!(out.nfe, 10);
        assert_eq!(base.calls(), 20);
        assert_eq!(bad.calls(), 10);
    }

    #[test]
    fn limited_interval_skips_early_steps() {
        let (x, c) = one();
        let base = linear();
        let spec = GuidanceSpec {
            w_cfg: 3.0,
            cfg_interval: Some(GuidanceSpec::LIMITED_INTERVAL),
            w_ag: 1.0,
        };
        let g = guided_field(&base, None, spec).unwrap();
        euler_sample(&g, &x, &c, 10).unwrap();
        // knots 1.0 .. 0.1; CFG on at 0.6 and below (6 of them)
        assert_eq!(base.calls(), 10 + 6);
    }

    #[test]
    fn non_finite_state_names_step() {
        let (x, c) = one();
        let f = OdeField::new(|x, t, _| Ok(Tensor::full(x.shape(), if t < 0.7 { f64::INFINITY } else { 0.0 })));
        let err = euler_sample(&f, &x, &c, 10).unwrap_err();
        assert!(err.to_string().contains("step 4"), "{err}");
    }

    #[test]
    fn sweep_rows_are_ordered_and_reproducible() {
        let f = linear();
        let mean: &(dyn Fn(&Tensor) -> Result<f64> + Sync) = &|x: &Tensor| Ok(x.mean());
        let failing: &(dyn Fn(&Tensor) -> Result<f64> + Sync) = &|_: &Tensor| Err(Error::Empty("samples"));
        let cfg = SweepConfig {
            methods: vec![Method::Euler, Method::Heun],
            steps: vec![2, 8],
            w_cfg: vec![1.0],
            w_ag: 1.0,
            cfg_interval: None,
            n_samples: 16,
            seed: 3,
        };
        let cond = Conditioning::unconditional(16);
        let a = sweep(&f, None, &cond, 2, &[("mean", mean)], &cfg).unwrap();
        let b = sweep(&f, None, &cond, 2, &[("mean", mean)], &cfg).unwrap();
        assert_eq!(a, b);
        let order: Vec<_> = a.rows.iter().map(|r| (r.method, r.steps, r.nfe)).collect();
        assert_eq!(
            order,
            vec![(Method::Euler, 2, 2), (Method::Euler, 8, 8), (Method::Heun, 2, 3), (Method::Heun, 8, 15)]
        );
        let csv = a.to_csv();
        assert!(csv.starts_with("method,steps,nfe,w_cfg,w_ag,mean\n"));
        assert_eq!(csv.lines().count(), 5);

        let bad = sweep(&f, None, &cond, 2, &[("mean", mean), ("x", failing)], &cfg).unwrap();
        assert_eq!(bad.rows.len(), 4);
        assert!(bad.to_csv().lines().nth(1).unwrap().ends_with(",ERR,ERR"));
    }

    #[test]
    fn six_significant_digits() {
        assert_eq!(fmt_sig6(0.123456789), "0.123457");
        assert_eq!(fmt_sig6(3.0), "3");
        assert_eq!(fmt_sig6(1234567.0), "1234570");
        assert_eq!(fmt_sig6(-2.5e-9), "-0.0000000025");
    }
}
