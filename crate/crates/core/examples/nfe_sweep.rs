//! Sweep solver, step count and CFG weight over an exact Gaussian field and
//! print the table as CSV.

use flowlab::metrics::{fit_gaussian, frechet_distance, wasserstein2, GaussianStats};
use flowlab::models::Conditioning;
use flowlab::rng::Rng;
use flowlab::samplers::{sweep, Method, MetricFn, OdeField, SweepConfig};
use flowlab::tensor::Tensor;
use flowlab::Result;

const MU: [f64; 2] = [1.0, -1.0];
const S2: f64 = 0.25;

fn velocity(x: &Tensor, t: f64, cond: &Conditioning) -> Result<Tensor> {
    let Conditioning::Labels(labels) = cond else { unreachable!() };
    let mut out = Vec::with_capacity(x.len());
    for (i, label) in labels.iter().enumerate() {
        let (mu, s2) = if label.is_some() { (MU, S2) } else { ([0.0; 2], 1.0) };
        let den = (1.0 - t).powi(2) * s2 + t * t;
        for (j, &xj) in x.row(i).iter().enumerate() {
            let r = xj - (1.0 - t) * mu[j];
            out.push(t / den * r - mu[j] - (1.0 - t) * s2 / den * r);
        }
    }
    Tensor::matrix(x.rows(), 2, out)
}

fn main() -> Result<()> {
    let n = 2000;
    let exact = GaussianStats { mean: MU.to_vec(), cov: Tensor::eye(2).scale(S2) };
    let mut rng = Rng::new(1);
    let target = Tensor::from_rows(
        &(0..512).map(|_| vec![MU[0] + S2.sqrt() * rng.normal(), MU[1] + S2.sqrt() * rng.normal()]).collect::<Vec<_>>(),
    )?;

    let fd = |x: &Tensor| frechet_distance(&fit_gaussian(x)?, &exact);
    let w2 = |x: &Tensor| wasserstein2(&x.slice(0, 0, 512)?, &target);
    let metrics: [MetricFn; 2] = [("fd", &fd), ("w2", &w2)];

    let cfg = SweepConfig {
        methods: vec![Method::Euler, Method::Heun],
        steps: vec![2, 5, 10, 25],
        w_cfg: vec![1.0, 2.0],
        w_ag: 1.0,
        cfg_interval: None,
        n_samples: n,
        seed: 7,
    };
    let field = OdeField::new(velocity);
    let table = sweep(&field, None, &Conditioning::labels(&vec![0; n]), 2, &metrics, &cfg)?;
    print!("{}", table.to_csv());
    Ok(())
}
