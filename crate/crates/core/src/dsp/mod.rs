//! Waveform handling and the log-Mel front end.

mod mel;
mod spectrum;
mod wav;

use serde::{Deserialize, Serialize};

pub use mel::{hz_to_mel, mel_to_hz, MelFilterbank};
pub use spectrum::{frame_count, hann_window, stft_power};
pub use wav::{load_wav, write_wav, SampleFormat};

use crate::error::{Error, Result};
use crate::tensor::{concat, conv1d, Tape, Tensor, Var};

/// A mono clip.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
    source_id: String,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32, source_id: impl Into<String>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Contract("waveform must hold at least one sample".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::NumericDomain {
                op: "Waveform::new",
                detail: format!("sample {i} is not finite"),
            });
        }
        if sample_rate == 0 {
            return Err(Error::Contract("sample rate must be positive".into()));
        }
        Ok(Self {
            samples,
            sample_rate,
            source_id: source_id.into(),
        })
    }

    pub fn with_source_id(mut self, source_id: impl Into<String>) -> Self {
        self.source_id = source_id.into();
        self
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// The clip as a `[1 × L]` matrix.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, self.samples.len()], self.samples.clone()).expect("non-empty waveform")
    }
}

/// Spectral front-end settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DspConfig {
    pub sample_rate: u32,
    pub clip_seconds: f64,
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub n_frames: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub log_eps: f64,
}

impl Default for DspConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            clip_seconds: 10.0,
            n_fft: 1024,
            hop: 512,
            n_mels: 128,
            n_frames: 312,
            f_min: 0.0,
            f_max: 8000.0,
            log_eps: 1e-10,
        }
    }
}

impl DspConfig {
    pub fn clip_len(&self) -> usize {
        (self.clip_seconds * f64::from(self.sample_rate)).round() as usize
    }

    pub fn filterbank(&self) -> Result<MelFilterbank> {
        MelFilterbank::new(self.n_mels, self.n_fft, self.sample_rate, self.f_min, self.f_max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    LogMel,
    Temporal,
    Enhanced,
}

/// An `M × N` (frequency × time) feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralFeature {
    pub data: Tensor,
    pub kind: FeatureKind,
    pub clip_id: String,
}

impl SpectralFeature {
    pub fn new(data: Tensor, kind: FeatureKind, clip_id: impl Into<String>) -> Result<Self> {
        data.dims2()?;
        if !data.all_finite() {
            return Err(Error::NumericDomain {
                op: "SpectralFeature::new",
                detail: "feature holds non-finite entries".into(),
            });
        }
        Ok(Self {
            data,
            kind,
            clip_id: clip_id.into(),
        })
    }

    pub fn n_mels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn n_frames(&self) -> usize {
        self.data.shape()[1]
    }
}

/// Crops trailing frames, or repeats the last frame, until the time axis has
/// exactly `n` columns.
pub fn fit_frames(x: &Tensor, n: usize) -> Result<Tensor> {
    let (rows, cols) = x.dims2()?;
    Tensor::new(
        &[rows, n],
        (0..rows * n)
            .map(|k| x.at(k / n, (k % n).min(cols - 1)))
            .collect(),
    )
}

/// [`fit_frames`] recorded on a tape.
pub fn fit_frames_var<'t>(x: Var<'t>, n: usize) -> Result<Var<'t>> {
    let shape = x.shape();
    let [_, cols] = shape[..] else {
        return Err(Error::shape("fit_frames", &shape, &[n]));
    };
    if cols >= n {
        return x.narrow(1, 0, n);
    }
    let last = x.narrow(1, cols - 1, 1)?;
    let mut parts = vec![x];
    parts.extend(std::iter::repeat(last).take(n - cols));
    concat(&parts, 1)
}

/// `ln(fb · |STFT|² + eps)` fitted to `n_frames` columns.
pub fn log_mel(x: &Waveform, fb: &MelFilterbank, cfg: &DspConfig) -> Result<SpectralFeature> {
    if fb.n_fft != cfg.n_fft {
        return Err(Error::Config(format!(
            "filterbank built for n_fft={} but config uses {}",
            fb.n_fft, cfg.n_fft
        )));
    }
    let power = stft_power(x, cfg.n_fft, cfg.hop)?;
    let (bins, frames) = power.dims2()?;
    let m = fb.n_mels();
    let mut mel = vec![0.0; m * frames];
    crate::tensor::gemm(m, bins, frames, fb.matrix().data(), false, power.data(), false, 0.0, &mut mel);
    mel.iter_mut().for_each(|v| *v = (*v + cfg.log_eps).ln());
    let mel = Tensor::new(&[m, frames], mel)?;
    SpectralFeature::new(fit_frames(&mel, cfg.n_frames)?, FeatureKind::LogMel, x.source_id())
}

/// Differentiable log-Mel of a `[1 × L]` waveform.
///
/// The DFT is expressed as a strided convolution with windowed cosine and sine
/// kernels, so gradients reach the waveform. Agrees with [`log_mel`].
pub fn log_mel_on_tape<'t>(tape: &'t Tape, wave: Var<'t>, fb: &MelFilterbank, cfg: &DspConfig) -> Result<Var<'t>> {
    let n = cfg.n_fft;
    let bins = n / 2 + 1;
    let window = hann_window(n);
    let kernels = Tensor::from_fn(&[2 * bins, 1, n], |idx| {
        let (row, i) = (idx / n, idx % n);
        let k = row % bins;
        let angle = 2.0 * std::f64::consts::PI * (k * i % n) as f64 / n as f64;
        window[i] * if row < bins { angle.cos() } else { angle.sin() }
    });
    let spec = conv1d(wave, tape.constant(kernels), None, cfg.hop, 0)?;
    let re = spec.narrow(0, 0, bins)?;
    let im = spec.narrow(0, bins, bins)?;
    let power = re.mul(re)?.add(im.mul(im)?)?;
    let mel = tape.constant(fb.matrix().clone()).matmul(power)?;
    fit_frames_var(mel.add_scalar(cfg.log_eps).ln()?, cfg.n_frames)
}
