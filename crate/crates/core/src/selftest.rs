//! Fast invariant suite run by `flowlab selftest`.

use std::time::Instant;

use crate::autodiff::Tape;
use crate::captions::{self, FilterConfig};
use crate::diffusion::{convert_prediction, NoiseSchedule, PredictionKind, TimestepSampler};
use crate::error::{Error, Result};
use crate::experiments::{train, ExperimentConfig};
use crate::gradcheck::{grad_check, grad_check_params, GradCheckConfig, GradCheckReport};
use crate::metrics::{frechet_distance_sets, inception_score, paired_kl};
use crate::models::{adaln_modulate, rope_rotate, AdaLn, Conditioning, DiT, DiTConfig, FieldModel, MlpConfig, MlpField};
use crate::optim::ParamStore;
use crate::rng::Rng;
use crate::samplers::{euler_sample, guided_field, heun_sample, GuidanceSpec, Method, OdeField, VectorField};
use crate::tensor::Tensor;
use crate::vae_losses::{self, gaussian_kl_loss, mrstft_loss_tape, mrstft_terms, Resolution, StftConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl CheckResult {
    pub fn line(&self) -> String {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        format!("{tag} {} ({:.1}s): {}", self.name, self.seconds, self.detail)
    }
}

type Check = fn() -> Result<String>;

pub const CHECKS: &[(&str, Check)] = &[
    ("grad_primitives", grad_primitives),
    ("grad_models", grad_models),
    ("grad_mrstft", grad_mrstft),
    ("parameterization_roundtrip", parameterization_roundtrip),
    ("solver_order", solver_order),
    ("guidance_identities", guidance_identities),
    ("metric_oracles", metric_oracles),
    ("vae_losses", vae_loss_values),
    ("dit_init", dit_init),
    ("caption_pipeline", caption_pipeline),
    ("logit_normal", logit_normal),
    ("train_determinism", train_determinism),
];

/// Runs every check, or those whose name contains `filter`.
pub fn run(filter: Option<&str>) -> Vec<CheckResult> {
    CHECKS
        .iter()
        .filter(|(name, _)| filter.is_none_or(|f| name.contains(f)))
        .map(|&(name, check)| {
            let start = Instant::now();
            let (passed, detail) = match check() {
                Ok(d) => (true, d),
                Err(e) => (false, format!("error[{}]: {e}", e.code())),
            };
            CheckResult {
                name,
                passed,
                detail,
                seconds: start.elapsed().as_secs_f64(),
            }
        })
        .collect()
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Contract(msg()))
    }
}

fn report_ok(what: &str, r: &GradCheckReport) -> Result<String> {
    if let Some(e) = &r.error {
        return Err(Error::Contract(format!("{what}: {e}")));
    }
    let worst = r.failures().next();
    ensure(r.passed(), || {
        let c = worst.expect("failed report has a failing coordinate");
        format!("{what}: {}[{}] analytic {} numeric {}", c.input, c.index, c.analytic, c.numeric)
    })?;
    Ok(format!("{what} max rel err {:.2e} over {} coords", r.max_rel_err(), r.coords.len()))
}

fn grad_primitives() -> Result<String> {
    let mut rng = Rng::new(11);
    let a = rng.normal_tensor(&[3, 4]);
    let b = rng.normal_tensor(&[4, 2]);
    let c = rng.uniform_tensor(&[3, 2], 0.5, 2.0);
    let r = grad_check(
        |tape, v| {
            let m = tape.matmul(v[0], v[1])?;
            let g = tape.gelu_tanh(m)?;
            let d = tape.div(g, v[2])?;
            let th = tape.tanh(d)?;
            let e = tape.exp(th)?;
            let lc = tape.log(v[2])?;
            let s = tape.mul(e, lc)?;
            let sm = tape.softmax(m)?;
            let ln = tape.layer_norm(v[0])?;
            let t1 = tape.sum(s)?;
            let sq = tape.square(sm)?;
            let t2 = tape.sum(sq)?;
            let ln3 = tape.pointwise(ln, |x| x * x * x, |x, _| 3.0 * x * x)?;
            let t3 = tape.mean(ln3)?;
            let sq2 = tape.sqrt(v[2])?;
            let t4 = tape.sum(sq2)?;
            let x = tape.add(t1, t2)?;
            let y = tape.add(t3, t4)?;
            tape.add(x, y)
        },
        &[a, b, c],
        GradCheckConfig::new(1e-6, 1e-5),
    );
    report_ok("primitives", &r)
}

fn grad_models() -> Result<String> {
    let mlp = MlpField::new(
        MlpConfig { hidden: 8, depth: 2, t_embed_dim: 4, cond_dim: 3, num_classes: 2, ..MlpConfig::default() },
        &mut Rng::new(1),
    )?;
    let x = Rng::new(2).normal_tensor(&[3, 2]);
    let cond = Conditioning::Labels(vec![Some(0), Some(1), None]);
    let t = [0.2, 0.5, 0.8];
    let r = grad_check_params(
        mlp.store(),
        |tape, store| {
            let mut probe = mlp.clone();
            *probe.store_mut() = store.clone();
            let xv = tape.constant(x.clone());
            let y = probe.forward(tape, xv, &t, &cond, None)?;
            let sq = tape.square(y)?;
            tape.sum(sq)
        },
        GradCheckConfig::new(1e-5, 1e-4),
        1,
    );
    let mlp_line = report_ok("mlp", &r)?;

    let cfg = DiTConfig { depth: 2, width: 16, heads: 2, data_dim: 4, cond_dim: 3, num_classes: 2, ..DiTConfig::default() };
    let mut rng = Rng::new(5);
    let mut dit = DiT::new(cfg, &mut rng)?;
    // move off the zero init so every parameter carries gradient
    let ids: Vec<_> = dit.store().ids().collect();
    for id in ids {
        let shape = dit.store().value(id).shape().to_vec();
        let noise = rng.normal_tensor(&shape).scale(0.2);
        let v = dit.store_mut().value_mut(id);
        *v = v.add(&noise)?;
    }
    let x = rng.normal_tensor(&[2, 4]);
    let cond = Conditioning::Labels(vec![Some(1), None]);
    let t = [0.3, 0.7];
    let r = grad_check_params(
        dit.store(),
        |tape, store| {
            let mut probe = dit.clone();
            *probe.store_mut() = store.clone();
            let xv = tape.constant(x.clone());
            let y = probe.forward(tape, xv, &t, &cond, None)?;
            let sq = tape.square(y)?;
            tape.sum(sq)
        },
        GradCheckConfig::new(1e-5, 1e-4),
        7,
    );
    Ok(format!("{mlp_line}; {}", report_ok("dit", &r)?))
}

fn grad_mrstft() -> Result<String> {
    let cfg = StftConfig::single(Resolution::new(64, 16, 64)?);
    let mut rng = Rng::new(3);
    let x = vae_losses::white_noise(256, 1.0, &mut rng);
    let x_hat: Vec<f64> = x.iter().map(|v| v + 0.3 * rng.normal()).collect();
    let r = grad_check(
        |tape, v| mrstft_loss_tape(tape, &x, v[0], &cfg),
        &[Tensor::vector(x_hat)],
        GradCheckConfig::new(1e-6, 1e-4),
    );
    report_ok("mrstft", &r)
}

fn parameterization_roundtrip() -> Result<String> {
    use PredictionKind::*;
    let mut rng = Rng::new(21);
    let schedule = NoiseSchedule::Cosine;
    let mut worst: f64 = 0.0;
    let kinds = [Eps, X0, V];
    for _ in 0..10_000 {
        let x0 = Tensor::vector(vec![rng.normal()]);
        let eps = Tensor::vector(vec![rng.normal()]);
        let t = rng.uniform_range(0.1, 0.9);
        let x_t = crate::diffusion::diffuse(&x0, &eps, t, schedule)?;
        let v = crate::diffusion::v_target(&x0, &eps, t, schedule)?;
        let truth = [eps.clone(), x0.clone(), v];
        for (i, from) in kinds.iter().enumerate() {
            for (j, to) in kinds.iter().enumerate() {
                let got = convert_prediction(&truth[i], *from, *to, &x_t, t, schedule)?;
                worst = worst.max(got.max_abs_diff(&truth[j]));
            }
        }
    }
    ensure(worst <= 1e-10, || format!("max round-trip error {worst:e}"))?;
    Ok(format!("10000 tuples, max error {worst:.1e}"))
}

/// Slope of `log err` against `log steps` for `dx/dt = x` integrated from 1 to 0.
pub fn solver_slope(method: Method) -> Result<f64> {
    let field = OdeField::new(|x: &Tensor, _t, _c: &Conditioning| Ok(x.clone()));
    let x1 = Tensor::matrix(1, 1, vec![1.0])?;
    let exact = (-1.0f64).exp();
    let cond = Conditioning::unconditional(1);
    let steps = [8usize, 16, 32, 64];
    let mut pts = Vec::new();
    for &n in &steps {
        let out = match method {
            Method::Euler => euler_sample(&field, &x1, &cond, n)?,
            Method::Heun => heun_sample(&field, &x1, &cond, n)?,
        };
        pts.push(((n as f64).ln(), (out.x.data()[0] - exact).abs().ln()));
    }
    let k = pts.len() as f64;
    let (mx, my) = (pts.iter().map(|p| p.0).sum::<f64>() / k, pts.iter().map(|p| p.1).sum::<f64>() / k);
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Ok(-sxy / sxx)
}

fn solver_order() -> Result<String> {
    let euler = solver_slope(Method::Euler)?;
    let heun = solver_slope(Method::Heun)?;
    let field = OdeField::new(|x: &Tensor, _t, _c: &Conditioning| Ok(x.clone()));
    let out = heun_sample(&field, &Tensor::matrix(1, 1, vec![1.0])?, &Conditioning::unconditional(1), 50)?;
    ensure((euler - 1.0).abs() <= 0.2, || format!("euler slope {euler}"))?;
    ensure((heun - 2.0).abs() <= 0.2, || format!("heun slope {heun}"))?;
    ensure(out.nfe == 99 && field.calls() == 99, || format!("heun nfe {} calls {}", out.nfe, field.calls()))?;
    Ok(format!("euler slope {euler:.3}, heun slope {heun:.3}, heun nfe(50) = 99"))
}

fn guidance_identities() -> Result<String> {
    let cond_field = OdeField::new(|x: &Tensor, t, c: &Conditioning| {
        let on = match c {
            Conditioning::Labels(l) => l.iter().map(|v| v.is_some() as u8 as f64).collect(),
            Conditioning::Text(v) => v.iter().map(|v| v.is_some() as u8 as f64).collect::<Vec<_>>(),
        };
        let mut out = x.clone();
        for (i, row) in out.data_mut().chunks_mut(x.cols()).enumerate() {
            for v in row.iter_mut() {
                *v = 1.0 + on[i] + 0.1 * *v * t;
            }
        }
        Ok(out)
    });
    let bad = OdeField::new(|x: &Tensor, _t, _c: &Conditioning| Ok(x.scale(0.5)));
    let x = Rng::new(4).normal_tensor(&[3, 2]);
    let cond = Conditioning::labels(&[0, 1, 2]);
    let base = cond_field.velocity(&x, 0.4, &cond)?;
    let plain = guided_field(&cond_field, Some(&bad as &dyn VectorField), GuidanceSpec::default())?;
    ensure(plain.velocity(&x, 0.4, &cond)? == base, || "w_cfg = w_ag = 1 changed the field".into())?;

    let zero = Tensor::zeros(&[1, 1]);
    let g = guided_field(&cond_field, None, GuidanceSpec::cfg(3.0))?;
    let v = g.velocity(&zero, 0.5, &Conditioning::labels(&[0]))?.data()[0];
    ensure(v == 4.0, || format!("cfg hand value {v}, expected 4"))?;
    Ok("identity bit-exact; 1 + 3·(2 − 1) = 4".into())
}

fn metric_oracles() -> Result<String> {
    let mut rng = Rng::new(8);
    let a = rng.normal_tensor(&[200, 4]);
    let same = frechet_distance_sets(&a, &a)?;
    ensure(same <= 1e-8, || format!("FD(identical) = {same}"))?;
    let col = Tensor::matrix(200, 1, (0..200).map(|i| a.row(i)[0]).collect())?;
    let fd1 = frechet_distance_sets(&col, &col.map(|v| v + 1.0))?;
    ensure((fd1 - 1.0).abs() <= 1e-6, || format!("FD(shift 1) = {fd1}"))?;
    let c = 7;
    let onehots = Tensor::eye(c);
    let is = inception_score(&onehots)?;
    ensure((is - c as f64).abs() <= 1e-6, || format!("IS = {is}"))?;
    let p = Tensor::matrix(2, 3, vec![0.2, 0.3, 0.5, 0.6, 0.3, 0.1])?;
    let kl = paired_kl(&p, &p)?;
    ensure(kl == 0.0, || format!("KL(identical) = {kl}"))?;
    Ok(format!("FD same {same:.1e}, FD shift {fd1:.9}, IS {is:.9}, KL {kl}"))
}

fn vae_loss_values() -> Result<String> {
    let cfg = StftConfig::default();
    let mut rng = Rng::new(2);
    let x: Vec<f64> = vae_losses::chirp(100.0, 6000.0, 16000.0, 8192)
        .iter()
        .zip(vae_losses::white_noise(8192, 0.1, &mut rng))
        .map(|(a, b)| a + b)
        .collect();
    let same = vae_losses::mrstft_loss(&x, &x, &cfg)?;
    ensure(same == 0.0, || format!("MRSTFT(identical) = {same}"))?;
    let half: Vec<f64> = x.iter().map(|v| 0.5 * v).collect();
    for t in mrstft_terms(&x, &half, &cfg)? {
        ensure((t.spectral_convergence - 0.5).abs() <= 1e-6, || format!("SC = {}", t.spectral_convergence))?;
    }
    let kl = gaussian_kl_loss(&[1.0], &[0.0])?;
    ensure(kl == 0.5, || format!("KL(1, 0) = {kl}"))?;
    let zero_kl = gaussian_kl_loss(&[0.0; 4], &[0.0; 4])?;
    ensure(zero_kl == 0.0, || format!("KL(0, 0) = {zero_kl}"))?;
    Ok("identical inputs give 0, SC(0.5x) = 0.5 per resolution, KL(1, 0) = 0.5".into())
}

fn dit_init() -> Result<String> {
    let m = DiT::new(DiTConfig { data_dim: 4, num_classes: 2, ..DiTConfig::default() }, &mut Rng::new(0))?;
    let x = Rng::new(1).normal_tensor(&[3, 4]);
    let y = m.predict(&x, &[0.1, 0.5, 0.9], &Conditioning::Labels(vec![Some(0), None, Some(1)]))?;
    ensure(y.data().iter().all(|&v| v == 0.0), || "fresh output is not zero".into())?;

    let mut store = ParamStore::new();
    let ada = AdaLn::new(&mut store, "a", 6, true);
    let mut tape = Tape::new();
    let h = tape.constant(Rng::new(3).normal_tensor(&[4, 6]));
    let c = tape.constant(Rng::new(4).normal_tensor(&[1, 6]));
    let out = adaln_modulate(&mut tape, &store, h, c, &ada, |_, x| Ok(x))?;
    let ln = tape.layer_norm(h)?;
    let expect = tape.value(h).add(tape.value(ln))?;
    let ada_err = tape.value(out).max_abs_diff(&expect);
    ensure(ada_err < 1e-12, || format!("AdaLN deviates from LN by {ada_err}"))?;

    let mut rng = Rng::new(7);
    let q = rng.normal_tensor(&[1, 8]);
    let k = rng.normal_tensor(&[1, 8]);
    let score = |m: f64, n: f64| -> Result<f64> { Ok(rope_rotate(&q, &[m], 16384.0)?.dot(&rope_rotate(&k, &[n], 16384.0)?)) };
    let mut worst: f64 = 0.0;
    for &(m, n) in &[(3.0, 1.0), (10.0, 4.0), (0.0, 9.0)] {
        for shift in [1.0, 7.0, 250.0] {
            worst = worst.max((score(m, n)? - score(m + shift, n + shift)?).abs());
        }
    }
    ensure(worst <= 1e-10, || format!("RoPE shift error {worst:e}"))?;
    Ok(format!("zero output, AdaLN = LN, RoPE shift error {worst:.1e}"))
}

fn caption_pipeline() -> Result<String> {
    let corpus = captions::planted_corpus(40, 16, 9);
    let cfg = FilterConfig::default();
    ensure(cfg.threshold == 0.45, || format!("default threshold {}", cfg.threshold))?;
    let embed = |s: &str| captions::toy_embedder(s);
    let (acc, summary) = captions::build_dataset(&corpus.records, &corpus.candidates, &cfg, &embed)?;
    let expect = corpus.expected_summary(&cfg);
    ensure(summary == expect, || format!("summary {summary:?} != planted {expect:?}"))?;
    let (acc2, summary2) = captions::build_dataset(&corpus.records, &corpus.candidates, &cfg, &embed)?;
    ensure(captions::to_jsonl(&acc)? == captions::to_jsonl(&acc2)? && summary == summary2, || "rerun differs".into())?;
    let mut prev = usize::MAX;
    for th in [0.0, 0.2, 0.45, 0.6, 0.9] {
        let c = FilterConfig { threshold: th, ..cfg.clone() };
        let (_, s) = captions::build_dataset(&corpus.records, &corpus.candidates, &c, &embed)?;
        ensure(s.accepted <= prev, || format!("accepted count rose at threshold {th}"))?;
        prev = s.accepted;
    }
    Ok(format!("{} accepted, {} below threshold, {} keyword", summary.accepted, summary.rejected_threshold, summary.rejected_keyword))
}

fn logit_normal() -> Result<String> {
    let s = TimestepSampler::logit_normal();
    let mut rng = Rng::new(12);
    let mut ts: Vec<f64> = (0..100_000).map(|_| s.sample(&mut rng)).collect();
    ts.sort_by(f64::total_cmp);
    let median = 0.5 * (ts[49_999] + ts[50_000]);
    let mass = ts.iter().filter(|&&t| (0.25..=0.75).contains(&t)).count() as f64 / ts.len() as f64;
    ensure((median - 0.5).abs() <= 0.01, || format!("median {median}"))?;
    ensure((mass - 0.728).abs() <= 0.01, || format!("mass {mass}"))?;
    Ok(format!("median {median:.4}, mass in [0.25, 0.75] {mass:.4}"))
}

fn train_determinism() -> Result<String> {
    let mut c = ExperimentConfig::default();
    c.optim.steps = 20;
    c.optim.batch = 32;
    c.dataset.pool = 500;
    c.sampler.steps = 10;
    c.sampler.n_eval = 64;
    let a = train(&c)?;
    let b = train(&c)?;
    ensure(a.checkpoint().to_json()? == b.checkpoint().to_json()?, || "checkpoints differ".into())?;
    ensure(a.report.loss_curve == b.report.loss_curve, || "loss curves differ".into())?;
    Ok("two 20-step runs give identical checkpoints".into())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn filter_selects_by_name() {
        let r = run(Some("logit"));
        assert_eq!(r.len(), 1);
        assert!(r[0].passed, "{}", r[0].line());
    }

    #[test]
    fn solver_slopes_match_orders() {
        assert!((solver_slope(Method::Euler).unwrap() - 1.0).abs() < 0.2);
        assert!((solver_slope(Method::Heun).unwrap() - 2.0).abs() < 0.2);
    }
}
