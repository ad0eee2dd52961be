use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dsp::Waveform;
use crate::error::{Error, Result};

/// Defect injected into anomalous clips.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AnomalyRecipe {
    /// A steady sinusoid at `f_anom` Hz, `amplitude_db` relative to the
    /// fundamental's amplitude.
    NarrowbandHfTone { f_anom: f64, amplitude_db: f64 },
    /// Every harmonic shifted by `cents`.
    HarmonicDetune { cents: f64 },
    /// Decaying broadband clicks at `rate` per second.
    TransientClicks { rate: f64 },
}

impl AnomalyRecipe {
    pub fn narrowband(f_anom: f64) -> Self {
        Self::NarrowbandHfTone {
            f_anom,
            amplitude_db: -10.0,
        }
    }
}

/// A synthetic machine: a harmonic stack over white noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthMachineSpec {
    pub machine_type: String,
    pub machine_id: String,
    pub fundamental_hz: f64,
    /// Amplitude of harmonic `k + 1`.
    pub harmonic_amplitudes: Vec<f64>,
    /// Standard deviation of the additive white noise.
    pub noise_level: f64,
    /// Relative per-clip spread of the fundamental.
    #[serde(default = "default_jitter")]
    pub f0_jitter: f64,
    pub anomaly: AnomalyRecipe,
}

fn default_jitter() -> f64 {
    0.005
}

impl SynthMachineSpec {
    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let nyquist = f64::from(sample_rate) / 2.0;
        let name = format!("{}/{}", self.machine_type, self.machine_id);
        if !(self.fundamental_hz > 0.0 && self.fundamental_hz < nyquist) {
            return Err(Error::Config(format!("{name}: fundamental must lie in (0, {nyquist}) Hz")));
        }
        if self.harmonic_amplitudes.iter().any(|a| !a.is_finite() || *a < 0.0)
            || !(self.noise_level.is_finite() && self.noise_level >= 0.0)
            || !(0.0..0.5).contains(&self.f0_jitter)
        {
            return Err(Error::Config(format!("{name}: amplitudes, noise and jitter must be finite and non-negative")));
        }
        match self.anomaly {
            AnomalyRecipe::NarrowbandHfTone { f_anom, amplitude_db } => {
                if !(f_anom > 0.0 && f_anom < nyquist) || !amplitude_db.is_finite() {
                    return Err(Error::Config(format!(
                        "{name}: anomaly tone {f_anom} Hz must lie in (0, {nyquist}) Hz"
                    )));
                }
            }
            AnomalyRecipe::HarmonicDetune { cents } if !cents.is_finite() => {
                return Err(Error::Config(format!("{name}: detune must be finite")));
            }
            AnomalyRecipe::TransientClicks { rate } if !(rate.is_finite() && rate > 0.0) => {
                return Err(Error::Config(format!("{name}: click rate must be positive")));
            }
            _ => {}
        }
        Ok(())
    }
}

/// Adds `amp·sin(2π f t + phase)` using a rotating phasor.
fn add_sine(out: &mut [f64], hz: f64, amp: f64, phase: f64, sample_rate: f64) {
    let step = TAU * hz / sample_rate;
    let (ds, dc) = step.sin_cos();
    let (mut s, mut c) = phase.sin_cos();
    for x in out.iter_mut() {
        *x += amp * s;
        (s, c) = (s * dc + c * ds, c * dc - s * ds);
    }
}

/// A clip of `len` samples. The normal part depends only on `(spec, seed)`,
/// so an anomalous clip minus the normal clip of the same seed is exactly the
/// injected defect (up to clipping at ±1).
pub fn synth_clip(spec: &SynthMachineSpec, anomalous: bool, seed: u64, sample_rate: u32, len: usize) -> Result<Waveform> {
    spec.validate(sample_rate)?;
    if len == 0 {
        return Err(Error::Config("clip length must be positive".into()));
    }
    let sr = f64::from(sample_rate);
    let nyquist = sr / 2.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f0 = spec.fundamental_hz * (1.0 + spec.f0_jitter * rng.gen_range(-1.0..1.0));
    let detune = match (anomalous, &spec.anomaly) {
        (true, AnomalyRecipe::HarmonicDetune { cents }) => 2f64.powf(cents / 1200.0),
        _ => 1.0,
    };
    let mut x = vec![0.0; len];
    for (k, &a) in spec.harmonic_amplitudes.iter().enumerate() {
        let gain = rng.gen_range(0.85..1.15);
        let phase = rng.gen_range(0.0..TAU);
        let hz = f0 * (k + 1) as f64 * detune;
        if a > 0.0 && hz < nyquist {
            add_sine(&mut x, hz, a * gain, phase, sr);
        }
    }
    if spec.noise_level > 0.0 {
        let noise = Normal::new(0.0, spec.noise_level).expect("validated noise level");
        x.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
    }

    if anomalous {
        let mut defect = ChaCha8Rng::seed_from_u64(seed);
        defect.set_stream(1);
        let fundamental = spec.harmonic_amplitudes.first().copied().unwrap_or(0.0);
        match spec.anomaly {
            AnomalyRecipe::NarrowbandHfTone { f_anom, amplitude_db } => {
                let amp = fundamental * 10f64.powf(amplitude_db / 20.0);
                add_sine(&mut x, f_anom, amp, defect.gen_range(0.0..TAU), sr);
            }
            AnomalyRecipe::HarmonicDetune { .. } => {}
            AnomalyRecipe::TransientClicks { rate } => {
                let count = ((rate * len as f64 / sr).round() as usize).max(1);
                let decay = (-1.0 / (0.002 * sr)).exp();
                for _ in 0..count {
                    let start = defect.gen_range(0..len);
                    let mut amp = 4.0 * fundamental;
                    for v in &mut x[start..] {
                        *v += amp * defect.gen_range(-1.0..1.0);
                        amp *= decay;
                        if amp < 1e-6 {
                            break;
                        }
                    }
                }
            }
        }
    }
    x.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
    Waveform::new(x, sample_rate, format!("{}_{}_{seed}", spec.machine_type, spec.machine_id))
}

/// Harmonic number nearest `hz` for fundamental `f0`.
fn harmonic_near(f0: f64, hz: f64) -> usize {
    ((hz / f0).round() as usize).max(1)
}

/// The default corpus: four machine types with two IDs each.
///
/// Within a type both IDs share the fundamental and the low harmonics and
/// differ only in a cluster of high harmonics (around 4.8 kHz for `id_00`,
/// 7 kHz for `id_01`), so telling the IDs apart requires the upper band.
pub fn default_specs(anomaly: &AnomalyRecipe) -> Vec<SynthMachineSpec> {
    let types = [
        ("fan", 105.0, 0.8, 0.004),
        ("pump", 85.0, 1.1, 0.003),
        ("slider", 140.0, 0.6, 0.005),
        ("valve", 62.0, 1.4, 0.003),
    ];
    let clusters = [("id_00", 4800.0), ("id_01", 7000.0)];
    let mut specs = Vec::new();
    for (machine_type, f0, decay, noise) in types {
        for (machine_id, centre) in clusters {
            let top = harmonic_near(f0, centre) + 1;
            let mut amps = vec![0.0; top];
            for (k, a) in amps.iter_mut().enumerate().take(12) {
                *a = 0.1 * ((k + 1) as f64).powf(-decay);
            }
            for k in top - 3..top {
                amps[k] = 0.015;
            }
            specs.push(SynthMachineSpec {
                machine_type: machine_type.into(),
                machine_id: machine_id.into(),
                fundamental_hz: f0,
                harmonic_amplitudes: amps,
                noise_level: noise,
                f0_jitter: default_jitter(),
                anomaly: anomaly.clone(),
            });
        }
    }
    specs
}
