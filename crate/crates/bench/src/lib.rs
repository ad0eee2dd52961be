//! Shared fixtures for the benchmarks.

use afpa_core::corpus::{default_specs, synth_clip, AnomalyRecipe};
use afpa_core::dsp::{DspConfig, Waveform};
use afpa_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A default-length clip of the first synthetic machine.
pub fn clip(cfg: &DspConfig, anomalous: bool) -> Waveform {
    let spec = &default_specs(&AnomalyRecipe::narrowband(6000.0))[0];
    synth_clip(spec, anomalous, 1, cfg.sample_rate, cfg.clip_len()).expect("default spec is valid")
}

pub fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}
