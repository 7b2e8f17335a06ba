//! FD, paired KL, IS, embedding score and empirical W2 on small synthetic sets.

use flowlab::metrics::{
    embedding_score, fit_gaussian, frechet_distance_sets, hungarian, inception_score, paired_kl, wasserstein2,
};
use flowlab::rng::Rng;
use flowlab::tensor::Tensor;
use flowlab::Result;

fn shifted(rng: &mut Rng, n: usize, d: usize, shift: f64, scale: f64) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| shift + scale * rng.normal()).collect()).collect();
    Tensor::from_rows(&rows)
}

fn main() -> Result<()> {
    let mut rng = Rng::new(3);
    let reference = shifted(&mut rng, 5000, 4, 0.0, 1.0)?;
    for (shift, scale) in [(0.0, 1.0), (0.5, 1.0), (0.0, 2.0)] {
        let generated = shifted(&mut rng, 5000, 4, shift, scale)?;
        // exact value for isotropic Gaussians: d·(shift² + (scale − 1)²)
        let exact = 4.0 * (shift * shift + (scale - 1.0) * (scale - 1.0));
        println!("shift {shift}, scale {scale}: FD {:.4} (population {exact:.4})", frechet_distance_sets(&reference, &generated)?);
    }
    let stats = fit_gaussian(&reference)?;
    println!("reference mean {:.3?}", stats.mean);

    let p = Tensor::from_rows(&[vec![0.7, 0.2, 0.1], vec![0.1, 0.8, 0.1], vec![0.2, 0.2, 0.6]])?;
    let q = Tensor::from_rows(&[vec![0.6, 0.3, 0.1], vec![0.2, 0.6, 0.2], vec![0.1, 0.1, 0.8]])?;
    println!("paired KL(p‖q) {:.4}, KL(p‖p) {}", paired_kl(&p, &q)?, paired_kl(&p, &p)?);
    println!("IS(p) {:.4}, IS(one-hot ×3) {:.4}", inception_score(&p)?, inception_score(&Tensor::eye(3))?);

    let text = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]])?;
    let audio = Tensor::from_rows(&[vec![1.0, 1.0], vec![0.0, 2.0]])?;
    println!("embedding score {:.4}", embedding_score(&text, &audio)?);

    let cost = Tensor::from_rows(&[vec![4.0, 1.0, 3.0], vec![2.0, 0.0, 5.0], vec![3.0, 2.0, 2.0]])?;
    println!("hungarian assignment {:?}", hungarian(&cost)?);
    let a = shifted(&mut rng, 200, 2, 0.0, 1.0)?;
    let b = a.map(|v| v + 0.3);
    println!("W2 of a set and its 0.3-shift (each axis) {:.4}, exact {:.4}", wasserstein2(&a, &b)?, (2.0 * 0.09f64).sqrt());
    Ok(())
}
