//! Cosine schedule, ε/x0/v conversions, min-SNR weights and the
//! logit-normal timestep density.

use flowlab::diffusion::{
    convert_prediction, diffusion_path, minsnr_weight, otcfm_path, NoiseSchedule, PredictionKind, TimestepSampler,
};
use flowlab::rng::Rng;
use flowlab::Result;

fn main() -> Result<()> {
    let sched = NoiseSchedule::Cosine;
    println!("   t   alpha      snr  w_eps(5)  w_v(5)");
    for t in [0.05, 0.25, 0.5, 0.75, 0.95] {
        println!(
            "{t:.2}  {:.4}  {:>7.3}  {:.4}    {:.4}",
            sched.alpha_at(t)?,
            sched.snr(t)?,
            minsnr_weight(t, 5.0, sched, PredictionKind::Eps)?,
            minsnr_weight(t, 5.0, sched, PredictionKind::V)?
        );
    }

    let mut rng = Rng::new(4);
    let x0 = rng.normal_tensor(&[3]);
    let eps = rng.normal_tensor(&[3]);
    let t = 0.3;
    let path = diffusion_path(&x0, &eps, t, sched, PredictionKind::V)?;
    let x0_back = convert_prediction(&path.target, PredictionKind::V, PredictionKind::X0, &path.x_t, t, sched)?;
    let eps_back = convert_prediction(&path.target, PredictionKind::V, PredictionKind::Eps, &path.x_t, t, sched)?;
    println!("v → x0 round trip error {:.1e}, v → ε {:.1e}", x0_back.max_abs_diff(&x0), eps_back.max_abs_diff(&eps));

    let ot = otcfm_path(&x0, &eps, t)?;
    println!("OT-CFM at t = {t}: x_t {:.3?}, target {:.3?}", ot.x_t.data(), ot.target.data());

    let sampler = TimestepSampler::logit_normal();
    let mut hist = [0usize; 10];
    for _ in 0..100_000 {
        hist[((sampler.sample(&mut rng) * 10.0) as usize).min(9)] += 1;
    }
    println!("logit-normal t histogram, bins of 0.1:");
    for (i, c) in hist.iter().enumerate() {
        println!("  {:.1}-{:.1} {:>6} {}", i as f64 / 10.0, (i + 1) as f64 / 10.0, c, "#".repeat(c / 500));
    }
    Ok(())
}
