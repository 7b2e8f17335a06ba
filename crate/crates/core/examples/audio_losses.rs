//! Multi-resolution STFT loss on test tones, the mid/side stereo variant,
//! adversarial and feature-matching terms, and the latent KL.

use flowlab::rng::Rng;
use flowlab::tensor::Tensor;
use flowlab::vae_losses::{
    chirp, feature_matching_loss, gaussian_kl_loss, hinge_adv_loss, mrstft_loss, mrstft_terms, sine,
    stereo_mrstft_loss, white_noise, DiscriminatorTaps, StereoSignal, StftConfig,
};
use flowlab::Result;

fn main() -> Result<()> {
    let sr = 16_000.0;
    let n = 8192;
    let cfg = StftConfig::default();
    let x = sine(440.0, sr, n, 0.5);

    let mut rng = Rng::new(5);
    let noisy: Vec<f64> = x.iter().zip(white_noise(n, 0.05, &mut rng)).map(|(a, b)| a + b).collect();
    let candidates = [
        ("same", x.clone()),
        ("half amplitude", x.iter().map(|v| 0.5 * v).collect()),
        ("plus noise", noisy),
        ("445 Hz", sine(445.0, sr, n, 0.5)),
        ("chirp", chirp(200.0, 2000.0, sr, n).iter().map(|v| 0.5 * v).collect()),
    ];
    for (name, y) in &candidates {
        let terms = mrstft_terms(&x, y, &cfg)?;
        let sc: Vec<String> = terms.iter().map(|t| format!("{:.3}", t.spectral_convergence)).collect();
        println!("{name:>15}: loss {:.4}, SC per resolution [{}]", mrstft_loss(&x, y, &cfg)?, sc.join(", "));
    }

    let st = StereoSignal::new(sine(440.0, sr, n, 0.5), sine(660.0, sr, n, 0.3), sr)?;
    // a swap only flips the side signal's sign, which magnitudes cannot see
    let mid: Vec<f64> = st.sum().iter().map(|v| 0.5 * v).collect();
    let mono = StereoSignal::new(mid.clone(), mid, sr)?;
    println!(
        "stereo vs itself {}, vs swap {}, vs mono downmix {:.4}",
        stereo_mrstft_loss(&st, &st, &cfg)?,
        stereo_mrstft_loss(&st, &st.swapped(), &cfg)?,
        stereo_mrstft_loss(&st, &mono, &cfg)?
    );

    let taps = |score: f64, feat: f64| DiscriminatorTaps {
        scores: vec![Tensor::vector(vec![score; 4])],
        features: vec![vec![Tensor::vector(vec![feat; 8]), Tensor::vector(vec![2.0 * feat; 8])]],
    };
    let (real, fake) = (taps(1.5, 2.0), taps(-0.5, 1.0));
    println!("hinge {:.4}, feature matching {:.4}", hinge_adv_loss(&real, &fake)?, feature_matching_loss(&real, &fake)?);
    println!("KL N(0,1) {}, KL N(1,1) {}", gaussian_kl_loss(&[0.0], &[0.0])?, gaussian_kl_loss(&[1.0], &[0.0])?);
    Ok(())
}
