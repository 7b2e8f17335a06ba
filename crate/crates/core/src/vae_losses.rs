//! Waveform autoencoder losses: multi-resolution STFT (mono and stereo
//! sum/difference), hinge adversarial, feature matching and Gaussian KL.
//!
//! Spectrograms are computed two ways. [`stft_mag`] uses an FFT on plain
//! buffers; [`stft_mag_tape`] builds the same magnitudes on the autodiff
//! tape from an explicit DFT matrix so the loss can be differentiated.

use std::f64::consts::PI;
use std::path::Path;
use std::rc::Rc;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Magnitude floor inside the log-ratio term.
pub const LOG_MAG_FLOOR: f64 = 1e-7;
/// Power floor on the tape so `sqrt` stays differentiable at silent bins.
const TAPE_POWER_FLOOR: f64 = 1e-24;
const FEATURE_DENOM_FLOOR: f64 = 1e-12;
pub const LOGVAR_RANGE: (f64, f64) = (-30.0, 20.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resolution {
    pub fft_size: usize,
    pub hop: usize,
    pub win_length: usize,
}

impl Resolution {
    pub fn new(fft_size: usize, hop: usize, win_length: usize) -> Result<Self> {
        let r = Self { fft_size, hop, win_length };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hop == 0 || self.hop > self.win_length || self.win_length > self.fft_size {
            return Err(Error::Config(format!(
                "STFT resolution needs 0 < hop ≤ win_length ≤ fft_size, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn frames(&self, len: usize) -> usize {
        1 + len / self.hop
    }

    /// Periodic Hann window of `win_length`, centered in `fft_size` zeros.
    pub fn window(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.fft_size];
        let offset = (self.fft_size - self.win_length) / 2;
        for i in 0..self.win_length {
            w[offset + i] = 0.5 - 0.5 * (2.0 * PI * i as f64 / self.win_length as f64).cos();
        }
        w
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len < self.win_length || len <= self.fft_size / 2 {
            return Err(Error::Contract(format!(
                "signal of {len} samples is too short for STFT {}/{}/{}",
                self.fft_size, self.hop, self.win_length
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StftConfig {
    pub resolutions: Vec<Resolution>,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            resolutions: vec![
                Resolution { fft_size: 512, hop: 128, win_length: 512 },
                Resolution { fft_size: 1024, hop: 256, win_length: 1024 },
                Resolution { fft_size: 2048, hop: 512, win_length: 2048 },
            ],
        }
    }
}

impl StftConfig {
    pub fn single(r: Resolution) -> Self {
        Self { resolutions: vec![r] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolutions.is_empty() {
            return Err(Error::Config("at least one STFT resolution is required".into()));
        }
        self.resolutions.iter().try_for_each(Resolution::validate)
    }
}

/// Sample indices of the reflect-padded signal, `pad` on each side.
fn reflect_indices(len: usize, pad: usize) -> Vec<usize> {
    (0..len + 2 * pad)
        .map(|i| {
            let j = i as isize - pad as isize;
            if j < 0 {
                (-j) as usize
            } else if j as usize >= len {
                2 * (len - 1) - j as usize
            } else {
                j as usize
            }
        })
        .collect()
}

/// Flat source index of every `(frame, tap)` sample after center padding.
fn frame_indices(len: usize, r: &Resolution) -> Vec<usize> {
    let padded = reflect_indices(len, r.fft_size / 2);
    let frames = r.frames(len);
    let mut idx = Vec::with_capacity(frames * r.fft_size);
    for f in 0..frames {
        idx.extend_from_slice(&padded[f * r.hop..f * r.hop + r.fft_size]);
    }
    idx
}

/// Hann-windowed magnitude spectrogram, shape `(frames, fft_size/2 + 1)`.
pub fn stft_mag(signal: &[f64], r: &Resolution) -> Result<Tensor> {
    r.validate()?;
    r.check_len(signal.len())?;
    if signal.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("STFT input".into()));
    }
    let window = r.window();
    let idx = frame_indices(signal.len(), r);
    let frames = r.frames(signal.len());
    let bins = r.bins();
    let fft = FftPlanner::new().plan_fft_forward(r.fft_size);
    let mut out = Vec::with_capacity(frames * bins);
    let mut buf = vec![Complex::new(0.0, 0.0); r.fft_size];
    for f in 0..frames {
        for (k, b) in buf.iter_mut().enumerate() {
            *b = Complex::new(signal[idx[f * r.fft_size + k]] * window[k], 0.0);
        }
        fft.process(&mut buf);
        out.extend(buf[..bins].iter().map(|c| c.norm()));
    }
    Tensor::matrix(frames, bins, out)
}

/// [`stft_mag`] on the tape. `x` holds the samples (any shape, row-major).
pub fn stft_mag_tape(tape: &mut Tape, x: Var, r: &Resolution) -> Result<Var> {
    r.validate()?;
    let len = tape.value(x).len();
    r.check_len(len)?;
    let frames = r.frames(len);
    let bins = r.bins();
    let n = r.fft_size;
    let framed = tape.gather(x, Rc::new(frame_indices(len, r)), &[frames, n])?;
    let window = r.window();
    let mut cos = vec![0.0; n * bins];
    let mut sin = vec![0.0; n * bins];
    for t in 0..n {
        for k in 0..bins {
            let phase = 2.0 * PI * ((t * k) % n) as f64 / n as f64;
            cos[t * bins + k] = window[t] * phase.cos();
            sin[t * bins + k] = -window[t] * phase.sin();
        }
    }
    let cos = tape.constant(Tensor::matrix(n, bins, cos)?);
    let sin = tape.constant(Tensor::matrix(n, bins, sin)?);
    let re = tape.matmul(framed, cos)?;
    let im = tape.matmul(framed, sin)?;
    let re2 = tape.square(re)?;
    let im2 = tape.square(im)?;
    let power = tape.add(re2, im2)?;
    let power = tape.clamp_min(power, TAPE_POWER_FLOOR)?;
    tape.sqrt(power)
}

fn frobenius(m: &Tensor) -> f64 {
    m.data().iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Per-resolution terms of the multi-resolution STFT loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MrstftTerms {
    /// `‖S − Ŝ‖_F / ‖S‖_F`.
    pub spectral_convergence: f64,
    /// `(1/T)·‖log S − log Ŝ‖₁`.
    pub log_magnitude: f64,
}

pub fn mrstft_terms(x: &[f64], x_hat: &[f64], cfg: &StftConfig) -> Result<Vec<MrstftTerms>> {
    cfg.validate()?;
    if x.len() != x_hat.len() {
        return Err(Error::shape("mrstft_loss", &[x.len()], &[x_hat.len()]));
    }
    cfg.resolutions
        .iter()
        .map(|r| {
            let s = stft_mag(x, r)?;
            let s_hat = stft_mag(x_hat, r)?;
            let norm = frobenius(&s);
            if norm == 0.0 {
                return Err(Error::DegenerateReference(format!(
                    "reference spectrogram is silent at fft size {}",
                    r.fft_size
                )));
            }
            let diff = s.sub(&s_hat)?;
            let log_l1: f64 = s
                .data()
                .iter()
                .zip(s_hat.data())
                .map(|(a, b)| (a.max(LOG_MAG_FLOOR).ln() - b.max(LOG_MAG_FLOOR).ln()).abs())
                .sum();
            Ok(MrstftTerms {
                spectral_convergence: frobenius(&diff) / norm,
                log_magnitude: log_l1 / s.rows() as f64,
            })
        })
        .collect()
}

/// `Σ_i [‖S_i(x) − S_i(x̂)‖_F / ‖S_i(x)‖_F + (1/T_i)·‖log S_i(x) − log S_i(x̂)‖₁]`.
pub fn mrstft_loss(x: &[f64], x_hat: &[f64], cfg: &StftConfig) -> Result<f64> {
    Ok(mrstft_terms(x, x_hat, cfg)?
        .iter()
        .map(|t| t.spectral_convergence + t.log_magnitude)
        .sum())
}

/// Differentiable MRSTFT loss with respect to `x_hat`; the reference is constant.
pub fn mrstft_loss_tape(tape: &mut Tape, x: &[f64], x_hat: Var, cfg: &StftConfig) -> Result<Var> {
    cfg.validate()?;
    if x.len() != tape.value(x_hat).len() {
        return Err(Error::shape("mrstft_loss", &[x.len()], tape.value(x_hat).shape()));
    }
    let mut total = None;
    for r in &cfg.resolutions {
        let s = stft_mag(x, r)?;
        let norm = frobenius(&s);
        if norm == 0.0 {
            return Err(Error::DegenerateReference(format!(
                "reference spectrogram is silent at fft size {}",
                r.fft_size
            )));
        }
        let frames = s.rows() as f64;
        let log_s = tape.constant(s.map(|v| v.max(LOG_MAG_FLOOR).ln()));
        let s = tape.constant(s);
        let s_hat = stft_mag_tape(tape, x_hat, r)?;

        let diff = tape.sub(s, s_hat)?;
        let sq = tape.square(diff)?;
        let sum = tape.sum(sq)?;
        let fro = tape.sqrt(sum)?;
        let sc = tape.scale(fro, 1.0 / norm)?;

        let floored = tape.clamp_min(s_hat, LOG_MAG_FLOOR)?;
        let log_hat = tape.log(floored)?;
        let d = tape.sub(log_s, log_hat)?;
        let a = tape.abs(d)?;
        let l1 = tape.sum(a)?;
        let lm = tape.scale(l1, 1.0 / frames)?;

        let term = tape.add(sc, lm)?;
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    Ok(total.expect("validated non-empty"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StereoSignal {
    pub left: Vec<f64>,
    pub right: Vec<f64>,
    pub sample_rate: f64,
}

impl StereoSignal {
    pub fn new(left: Vec<f64>, right: Vec<f64>, sample_rate: f64) -> Result<Self> {
        if left.len() != right.len() {
            return Err(Error::shape("stereo signal", &[left.len()], &[right.len()]));
        }
        if left.iter().chain(&right).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("stereo signal".into()));
        }
        Ok(Self { left, right, sample_rate })
    }

    pub fn sum(&self) -> Vec<f64> {
        self.left.iter().zip(&self.right).map(|(l, r)| l + r).collect()
    }

    pub fn diff(&self) -> Vec<f64> {
        self.left.iter().zip(&self.right).map(|(l, r)| l - r).collect()
    }

    pub fn swapped(&self) -> Self {
        Self {
            left: self.right.clone(),
            right: self.left.clone(),
            sample_rate: self.sample_rate,
        }
    }
}

/// `L(x_sum, x̂_sum) + L(x_diff, x̂_diff)`.
pub fn stereo_mrstft_loss(x: &StereoSignal, x_hat: &StereoSignal, cfg: &StftConfig) -> Result<f64> {
    if x.left.len() != x_hat.left.len() {
        return Err(Error::shape("stereo_mrstft_loss", &[x.left.len()], &[x_hat.left.len()]));
    }
    let sum = mrstft_loss(&x.sum(), &x_hat.sum(), cfg)?;
    let diff = mrstft_loss(&x.diff(), &x_hat.diff(), cfg)?;
    Ok(sum + diff)
}

/// Per-discriminator outputs: final score map and intermediate features.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorTaps {
    pub scores: Vec<Tensor>,
    /// `features[k][l]` is layer `l` of discriminator `k`.
    pub features: Vec<Vec<Tensor>>,
}

/// `Σ_k [max(0, 1 − D_k(x)) + max(0, 1 + D_k(x̂))]`, each hinge averaged
/// over the elements of its score map.
pub fn hinge_adv_loss(real: &DiscriminatorTaps, fake: &DiscriminatorTaps) -> Result<f64> {
    if real.scores.len() != fake.scores.len() {
        return Err(Error::shape("hinge_adv_loss", &[real.scores.len()], &[fake.scores.len()]));
    }
    let mut total = 0.0;
    for (r, f) in real.scores.iter().zip(&fake.scores) {
        if r.is_empty() || f.is_empty() {
            return Err(Error::Empty("discriminator score"));
        }
        total += r.data().iter().map(|d| (1.0 - d).max(0.0)).sum::<f64>() / r.len() as f64;
        total += f.data().iter().map(|d| (1.0 + d).max(0.0)).sum::<f64>() / f.len() as f64;
    }
    Ok(total)
}

/// Mean over all taps of `mean|D(x) − D(x̂)| / mean|D(x)|`.
pub fn feature_matching_loss(real: &DiscriminatorTaps, fake: &DiscriminatorTaps) -> Result<f64> {
    if real.features.len() != fake.features.len() {
        return Err(Error::shape("feature_matching_loss", &[real.features.len()], &[fake.features.len()]));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (rk, fk) in real.features.iter().zip(&fake.features) {
        if rk.len() != fk.len() {
            return Err(Error::shape("feature_matching_loss", &[rk.len()], &[fk.len()]));
        }
        for (r, f) in rk.iter().zip(fk) {
            if r.shape() != f.shape() {
                return Err(Error::shape("feature_matching_loss", r.shape(), f.shape()));
            }
            if r.is_empty() {
                return Err(Error::Empty("feature tap"));
            }
            let diff: f64 = r.data().iter().zip(f.data()).map(|(a, b)| (a - b).abs()).sum::<f64>();
            let scale: f64 = r.data().iter().map(|a| a.abs()).sum::<f64>();
            total += (diff / r.len() as f64) / (scale / r.len() as f64).max(FEATURE_DENOM_FLOOR);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Empty("discriminator features"));
    }
    Ok(total / count as f64)
}

/// `½·Σ (μ² + σ² − 1 − log σ²)` with `log σ²` clamped to [`LOGVAR_RANGE`].
pub fn gaussian_kl_loss(mean: &[f64], logvar: &[f64]) -> Result<f64> {
    if mean.len() != logvar.len() {
        return Err(Error::shape("gaussian_kl_loss", &[mean.len()], &[logvar.len()]));
    }
    if mean.iter().chain(logvar).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("latent posterior".into()));
    }
    Ok(0.5
        * mean
            .iter()
            .zip(logvar)
            .map(|(m, lv)| {
                let lv = lv.clamp(LOGVAR_RANGE.0, LOGVAR_RANGE.1);
                m * m + lv.exp() - 1.0 - lv
            })
            .sum::<f64>())
}

pub fn sine(freq: f64, sample_rate: f64, n: usize, amplitude: f64) -> Vec<f64> {
    (0..n)
        .map(|i| amplitude * (2.0 * PI * freq * i as f64 / sample_rate).sin())
        .collect()
}

/// Linear chirp from `f0` to `f1` Hz over `n` samples.
pub fn chirp(f0: f64, f1: f64, sample_rate: f64, n: usize) -> Vec<f64> {
    let dur = n as f64 / sample_rate;
    (0..n)
        .map(|i| {
            let t = i as f64 / sample_rate;
            (2.0 * PI * (f0 * t + 0.5 * (f1 - f0) / dur * t * t)).sin()
        })
        .collect()
}

pub fn white_noise(n: usize, std: f64, rng: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| std * rng.normal()).collect()
}

/// Headerless little-endian f64 samples, `channels`-interleaved.
pub fn read_raw_f64(path: &Path, channels: usize) -> Result<Vec<Vec<f64>>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_raw_f64(&bytes, channels).map_err(|e| match e {
        Error::Contract(m) => Error::Contract(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn decode_raw_f64(bytes: &[u8], channels: usize) -> Result<Vec<Vec<f64>>> {
    if channels == 0 {
        return Err(Error::Contract("channel count must be positive".into()));
    }
    if !bytes.len().is_multiple_of(8 * channels) {
        return Err(Error::Contract(format!(
            "{} bytes is not a whole number of {channels}-channel f64 frames",
            bytes.len()
        )));
    }
    let mut out = vec![Vec::with_capacity(bytes.len() / 8 / channels); channels];
    for (i, chunk) in bytes.chunks_exact(8).enumerate() {
        let v = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        out[i % channels].push(v);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, GradCheckConfig};

    fn small() -> Resolution {
        Resolution::new(64, 16, 64).unwrap()
    }

    #[test]
    fn reflect_padding_mirrors_without_edge_repeat() {
        assert_eq!(reflect_indices(4, 2), vec![2, 1, 0, 1, 2, 3, 2, 1]);
    }

    #[test]
    fn sine_energy_sits_in_its_bin() {
        let r = Resolution::new(256, 64, 256).unwrap();
        let k = 20;
        let x = sine(k as f64 * 16000.0 / 256.0, 16000.0, 2048, 1.0);
        let s = stft_mag(&x, &r).unwrap();
        // an interior frame, away from the reflected edges
        let row = s.row(s.rows() / 2);
        let e: Vec<f64> = row.iter().map(|v| v * v).collect();
        let total: f64 = e.iter().sum();
        let argmax = (0..e.len()).max_by(|&a, &b| e[a].total_cmp(&e[b])).unwrap();
        assert_eq!(argmax, k);
        // Hann main lobe: bin k carries 1/4 / (1/4 + 2/16) = 2/3, k±1 the rest
        assert!((e[k] / total - 2.0 / 3.0).abs() < 1e-3);
        assert!((e[k - 1] + e[k] + e[k + 1]) / total > 0.9);
    }

    #[test]
    fn zero_signal_gives_zero_magnitudes() {
        let s = stft_mag(&[0.0; 200], &small()).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn windowed_parseval_per_frame() {
        let r = small();
        let x = white_noise(300, 1.0, &mut Rng::new(1));
        let s = stft_mag(&x, &r).unwrap();
        let idx = frame_indices(x.len(), &r);
        let w = r.window();
        let n = r.fft_size;
        for f in 0..s.rows() {
            let time: f64 = (0..n).map(|t| (x[idx[f * n + t]] * w[t]).powi(2)).sum();
            let row = s.row(f);
            let last = row.len() - 1;
            let freq: f64 = row[0].powi(2) + row[last].powi(2) + 2.0 * row[1..last].iter().map(|v| v * v).sum::<f64>();
            assert!((freq / n as f64 - time).abs() < 1e-9 * time.max(1.0));
        }
    }

    #[test]
    fn fft_and_dft_routes_agree() {
        let r = Resolution::new(64, 16, 48).unwrap();
        let x = chirp(100.0, 3000.0, 8000.0, 257);
        let plain = stft_mag(&x, &r).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::vector(x));
        let m = stft_mag_tape(&mut tape, xv, &r).unwrap();
        assert!(tape.value(m).max_abs_diff(&plain) < 1e-9);
    }

    #[test]
    fn too_short_signal_rejected() {
        assert!(matches!(stft_mag(&[1.0; 63], &small()), Err(Error::Contract(_))));
    }

    #[test]
    fn mrstft_examples() {
        let cfg = StftConfig::default();
        let x = white_noise(4096, 0.5, &mut Rng::new(2));
        assert_eq!(mrstft_loss(&x, &x, &cfg).unwrap(), 0.0);
        let half: Vec<f64> = x.iter().map(|v| 0.5 * v).collect();
        for t in mrstft_terms(&x, &half, &cfg).unwrap() {
            assert!((t.spectral_convergence - 0.5).abs() < 1e-12);
        }
        assert!(matches!(
            mrstft_loss(&[0.0; 4096], &x, &cfg),
            Err(Error::DegenerateReference(_))
        ));
    }

    #[test]
    fn mrstft_tape_matches_plain_and_grad_checks() {
        let cfg = StftConfig::single(Resolution::new(64, 16, 64).unwrap());
        let mut rng = Rng::new(3);
        let x = white_noise(256, 1.0, &mut rng);
        let x_hat: Vec<f64> = x.iter().map(|v| v + 0.3 * rng.normal()).collect();
        let plain = mrstft_loss(&x, &x_hat, &cfg).unwrap();
        let mut tape = Tape::new();
        let xv = tape.leaf(Tensor::vector(x_hat.clone()));
        let l = mrstft_loss_tape(&mut tape, &x, xv, &cfg).unwrap();
        assert!((tape.value(l).item() - plain).abs() < 1e-9);

        let report = grad_check(
            |tape, v| mrstft_loss_tape(tape, &x, v[0], &cfg),
            &[Tensor::vector(x_hat)],
            GradCheckConfig::new(1e-6, 1e-4),
        );
        assert!(report.passed(), "{} {:?}", report.max_rel_err(), report.failures().next());
    }

    #[test]
    fn stereo_examples() {
        let cfg = StftConfig::single(Resolution::new(128, 32, 128).unwrap());
        let mut rng = Rng::new(4);
        let x = StereoSignal::new(white_noise(512, 1.0, &mut rng), white_noise(512, 1.0, &mut rng), 16000.0).unwrap();
        assert_eq!(stereo_mrstft_loss(&x, &x, &cfg).unwrap(), 0.0);

        let y = StereoSignal::new(white_noise(512, 1.0, &mut rng), white_noise(512, 1.0, &mut rng), 16000.0).unwrap();
        let a = stereo_mrstft_loss(&x, &y, &cfg).unwrap();
        let b = stereo_mrstft_loss(&x, &y.swapped(), &cfg).unwrap();
        assert_eq!(a, b);
        let parts = mrstft_loss(&x.sum(), &y.sum(), &cfg).unwrap() + mrstft_loss(&x.diff(), &y.diff(), &cfg).unwrap();
        assert_eq!(a.to_bits(), parts.to_bits());

        let mono = white_noise(512, 1.0, &mut rng);
        let m = StereoSignal::new(mono.clone(), mono, 16000.0).unwrap();
        assert!(matches!(stereo_mrstft_loss(&m, &y, &cfg), Err(Error::DegenerateReference(_))));
    }

    fn taps(scores: &[f64], feats: &[f64]) -> DiscriminatorTaps {
        DiscriminatorTaps {
            scores: scores.iter().map(|&s| Tensor::vector(vec![s])).collect(),
            features: vec![feats.iter().map(|&f| Tensor::vector(vec![f])).collect()],
        }
    }

    #[test]
    fn adversarial_examples() {
        assert_eq!(hinge_adv_loss(&taps(&[1.0, 1.0], &[]), &taps(&[-1.0, -1.0], &[])).unwrap(), 0.0);
        let l = hinge_adv_loss(&taps(&[0.5], &[]), &taps(&[-0.2], &[])).unwrap();
        assert!((l - 1.3).abs() < 1e-12);
        assert!(hinge_adv_loss(&taps(&[0.5], &[]), &taps(&[0.1, 0.2], &[])).is_err());

        assert_eq!(feature_matching_loss(&taps(&[], &[2.0]), &taps(&[], &[2.0])).unwrap(), 0.0);
        assert_eq!(feature_matching_loss(&taps(&[], &[2.0]), &taps(&[], &[1.0])).unwrap(), 0.5);
        let a = feature_matching_loss(&taps(&[], &[2.0, -3.0]), &taps(&[], &[1.0, 0.5])).unwrap();
        let b = feature_matching_loss(&taps(&[], &[14.0, -21.0]), &taps(&[], &[7.0, 3.5])).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn kl_examples() {
        assert_eq!(gaussian_kl_loss(&[0.0, 0.0], &[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(gaussian_kl_loss(&[1.0], &[0.0]).unwrap(), 0.5);
        assert!(gaussian_kl_loss(&[0.0], &[0.1]).unwrap() > 0.0);
        assert!(gaussian_kl_loss(&[0.0], &[-1e6]).unwrap().is_finite());
    }

    #[test]
    fn raw_decoding() {
        let mut bytes = vec![];
        for v in [1.0f64, -1.0, 2.0, -2.0] {
            bytes.extend(v.to_le_bytes());
        }
        let ch = decode_raw_f64(&bytes, 2).unwrap();
        assert_eq!(ch, vec![vec![1.0, 2.0], vec![-1.0, -2.0]]);
        assert!(decode_raw_f64(&bytes[..12], 1).is_err());
    }
}
