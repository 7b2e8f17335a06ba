//! Central-difference verification of reverse-mode gradients.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::optim::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub h: f64,
    /// Maximum relative error per coordinate.
    pub tol: f64,
    /// Lower bound on the relative-error denominator, so that gradients
    /// near zero are compared absolutely at this scale.
    pub floor: f64,
}

impl GradCheckConfig {
    pub fn new(h: f64, tol: f64) -> Self {
        Self { h, tol, floor: 1e-3 }
    }
}

#[derive(Debug, Clone)]
pub struct CoordCheck {
    /// Which input tensor (or parameter name) the coordinate belongs to.
    pub input: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub coords: Vec<CoordCheck>,
    /// Set when the function itself could not be evaluated.
    pub error: Option<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.error.is_none() && !self.coords.is_empty() && self.coords.iter().all(|c| c.pass)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.coords.iter().map(|c| c.rel_err).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CoordCheck> {
        self.coords.iter().filter(|c| !c.pass)
    }

    fn failed(message: String) -> Self {
        Self {
            coords: vec![],
            error: Some(message),
        }
    }
}

fn compare(cfg: &GradCheckConfig, input: String, index: usize, analytic: f64, numeric: f64) -> CoordCheck {
    let denom = analytic.abs().max(numeric.abs()).max(cfg.floor);
    let rel_err = (analytic - numeric).abs() / denom;
    CoordCheck {
        input,
        index,
        analytic,
        numeric,
        rel_err,
        pass: rel_err <= cfg.tol,
    }
}

fn eval_scalar<F>(f: &F, point: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = point.iter().map(|t| tape.constant(t.clone())).collect();
    let root = f(&mut tape, &vars)?;
    Ok(tape.value(root).item())
}

/// Compares the tape gradient of scalar `f` at `point` against
/// `(f(x+h) − f(x−h)) / 2h`, coordinate by coordinate.
pub fn grad_check<F>(f: F, point: &[Tensor], cfg: GradCheckConfig) -> GradCheckReport
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let analytic = (|| -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = point.iter().map(|t| tape.leaf(t.clone())).collect();
        let root = f(&mut tape, &vars)?;
        let grads = tape.backward(root)?;
        Ok(vars
            .iter()
            .zip(point)
            .map(|(v, t)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect())
    })();
    let analytic = match analytic {
        Ok(a) => a,
        Err(e) => return GradCheckReport::failed(e.to_string()),
    };

    let mut report = GradCheckReport::default();
    let mut probe: Vec<Tensor> = point.to_vec();
    for (k, t) in point.iter().enumerate() {
        for i in 0..t.len() {
            let x0 = t.data()[i];
            probe[k].data_mut()[i] = x0 + cfg.h;
            let plus = eval_scalar(&f, &probe);
            probe[k].data_mut()[i] = x0 - cfg.h;
            let minus = eval_scalar(&f, &probe);
            probe[k].data_mut()[i] = x0;
            match (plus, minus) {
                (Ok(p), Ok(m)) => {
                    let numeric = (p - m) / (2.0 * cfg.h);
                    report
                        .coords
                        .push(compare(&cfg, format!("input{k}"), i, analytic[k].data()[i], numeric));
                }
                (Err(e), _) | (_, Err(e)) => {
                    report.error = Some(e.to_string());
                    return report;
                }
            }
        }
    }
    report
}

/// Gradient check over every coordinate of every parameter in `store`.
///
/// `stride` > 1 checks every `stride`-th coordinate of each parameter
/// (always including the first) to bound the cost on larger models.
pub fn grad_check_params<F>(store: &ParamStore, f: F, cfg: GradCheckConfig, stride: usize) -> GradCheckReport
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let analytic = (|| -> Result<ParamStore> {
        let mut tape = Tape::new();
        let root = f(&mut tape, store)?;
        let mut with_grads = store.clone();
        tape.backward_into(root, &mut with_grads)?;
        Ok(with_grads)
    })();
    let analytic = match analytic {
        Ok(a) => a,
        Err(e) => return GradCheckReport::failed(e.to_string()),
    };

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let root = f(&mut tape, s)?;
        Ok(tape.value(root).item())
    };

    let mut report = GradCheckReport::default();
    let mut probe = store.clone();
    for id in store.ids() {
        let p = store.get(id);
        for i in (0..p.value.len()).step_by(stride.max(1)) {
            let x0 = p.value.data()[i];
            probe.value_mut(id).data_mut()[i] = x0 + cfg.h;
            let plus = eval(&probe);
            probe.value_mut(id).data_mut()[i] = x0 - cfg.h;
            let minus = eval(&probe);
            probe.value_mut(id).data_mut()[i] = x0;
            match (plus, minus) {
                (Ok(a), Ok(b)) => {
                    let numeric = (a - b) / (2.0 * cfg.h);
                    let g = analytic.get(id).grad.data()[i];
                    report.coords.push(compare(&cfg, p.name.clone(), i, g, numeric));
                }
                (Err(e), _) | (_, Err(e)) => {
                    report.error = Some(format!("{}: {e}", p.name));
                    return report;
                }
            }
        }
    }
    report
}
