//! The diffusion transformer on 2D data: zero output at init, RoPE as a
//! rotation, then a short OT-CFM run on two moons.

use flowlab::experiments::{target_moments, train, DatasetConfig, DatasetName, ExperimentConfig, OptimConfig, SamplerDefaults};
use flowlab::models::{rope_rotate, Conditioning, DiT, DiTConfig, FieldModel, ModelSpec};
use flowlab::rng::Rng;
use flowlab::Result;

fn main() -> Result<()> {
    let dit = DiT::new(DiTConfig { num_classes: 4, ..DiTConfig::default() }, &mut Rng::new(0))?;
    let x = Rng::new(1).normal_tensor(&[8, 2]);
    let out = dit.predict(&x, &[0.3; 8], &Conditioning::labels(&[0, 1, 2, 3, 0, 1, 2, 3]))?;
    println!("{} parameters, max |output| at init {}", dit.store().num_scalars(), out.data().iter().fold(0f64, |m, v| m.max(v.abs())));

    let q = Rng::new(2).normal_tensor(&[4, 8]);
    let rotated = rope_rotate(&q, &[0.0, 1.0, 2.0, 3.0], 16384.0)?;
    println!("RoPE keeps the norm: before {:.6} after {:.6}", q.norm(), rotated.norm());

    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(400);
    let cfg = ExperimentConfig {
        dataset: DatasetConfig { name: DatasetName::TwoMoons, pool: 4000 },
        model: ModelSpec::Dit(DiTConfig::default()),
        optim: OptimConfig { steps, batch: 64, ema_decay: 0.99, ..OptimConfig::default() },
        sampler: SamplerDefaults { steps: 20, n_eval: 2000, ..SamplerDefaults::default() },
        log_every: 50,
        epoch_len: 100,
        ..ExperimentConfig::default()
    };
    let run = train(&cfg)?;
    let r = &run.report;
    println!("epoch mean loss: {:.4?}", r.epoch_means);
    let exact = target_moments(DatasetName::TwoMoons);
    println!("sample mean {:.3?}, exact {:.3?}", r.final_stats.mean, exact.mean);
    println!("sample cov {:.3?}, exact {:.3?}", r.final_stats.cov, [exact.cov.row(0), exact.cov.row(1)]);
    println!("{:.1}s", r.wall_time_s);
    Ok(())
}
