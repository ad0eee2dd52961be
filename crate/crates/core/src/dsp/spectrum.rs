use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::Waveform;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Periodic Hann window of length `n`.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Number of full frames of length `n_fft` at spacing `hop` (no centering).
pub fn frame_count(len: usize, n_fft: usize, hop: usize) -> Option<usize> {
    (len >= n_fft && hop > 0).then(|| (len - n_fft) / hop + 1)
}

/// Power spectrogram `|DFT|²` of Hann-windowed frames, shaped
/// `[(n_fft/2 + 1) × frames]`. Frame `t` covers samples
/// `[t·hop, t·hop + n_fft)`.
pub fn stft_power(x: &Waveform, n_fft: usize, hop: usize) -> Result<Tensor> {
    if n_fft < 2 || hop == 0 {
        return Err(Error::Config(format!("invalid STFT geometry n_fft={n_fft}, hop={hop}")));
    }
    let frames = frame_count(x.len(), n_fft, hop).ok_or(Error::InputTooShort {
        needed: n_fft,
        got: x.len(),
    })?;
    let bins = n_fft / 2 + 1;
    let window = hann_window(n_fft);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut out = vec![0.0; bins * frames];
    let samples = x.samples();
    for t in 0..frames {
        let frame = &samples[t * hop..t * hop + n_fft];
        for ((b, s), w) in buf.iter_mut().zip(frame).zip(&window) {
            *b = Complex::new(s * w, 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for (k, c) in buf.iter().take(bins).enumerate() {
            out[k * frames + t] = c.norm_sqr();
        }
    }
    Tensor::new(&[bins, frames], out)
}
