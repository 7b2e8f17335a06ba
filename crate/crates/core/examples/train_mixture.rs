//! Train the MLP field on the four-Gaussian mixture with OT-CFM and compare
//! the sampled covariance to the analytic one.

use flowlab::experiments::{gauss_mixture_moments, train, ExperimentConfig};

fn main() -> flowlab::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let cfg = ExperimentConfig { seed, ..ExperimentConfig::default() };
    let run = train(&cfg)?;
    let r = &run.report;
    println!("epoch means: {:?}", r.epoch_means);
    println!("sample mean: {:?}", r.final_stats.mean);
    println!("sample cov:  {:?}", r.final_stats.cov);
    let (_, cov) = gauss_mixture_moments();
    let diff: f64 = (0..2)
        .flat_map(|i| (0..2).map(move |j| (i, j)))
        .map(|(i, j)| (r.final_stats.cov[i][j] - cov.row(i)[j]).powi(2))
        .sum::<f64>()
        .sqrt();
    println!("cov error (Frobenius): {diff:.4}");
    println!("w2 to target: {:.4}", r.final_stats.w2_to_target);
    println!("wall time: {:.1}s", r.wall_time_s);
    Ok(())
}
