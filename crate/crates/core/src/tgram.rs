//! Learnable temporal encoder mapping a raw waveform to an `M × N` feature.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dsp::{fit_frames_var, DspConfig, FeatureKind, SpectralFeature, Waveform};
use crate::error::Result;
use crate::params::{join, ParamTree};
use crate::tensor::{conv1d, layer_norm, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TgramConfig {
    pub blocks: usize,
    pub slope: f64,
    pub ln_eps: f64,
}

impl Default for TgramConfig {
    fn default() -> Self {
        Self {
            blocks: 3,
            slope: 0.01,
            ln_eps: 1e-5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TgramBlock<T> {
    pub ln_gamma: T,
    pub ln_beta: T,
    pub conv: T,
}

/// Front convolution `[M × 1 × n_fft]` followed by `[LayerNorm, LeakyReLU,
/// Conv1d(M → M, k = 3)]` blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct TgramNetParams<T = Tensor> {
    pub front: T,
    pub blocks: Vec<TgramBlock<T>>,
}

impl<T> ParamTree<T> for TgramNetParams<T> {
    type Mapped<U> = TgramNetParams<U>;

    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> TgramNetParams<U> {
        TgramNetParams {
            front: f(&self.front),
            blocks: self
                .blocks
                .iter()
                .map(|b| TgramBlock {
                    ln_gamma: f(&b.ln_gamma),
                    ln_beta: f(&b.ln_beta),
                    conv: f(&b.conv),
                })
                .collect(),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        out.push((join(prefix, "front"), &self.front));
        for (i, b) in self.blocks.iter().enumerate() {
            let p = join(prefix, &format!("block{i}"));
            out.push((join(&p, "ln_gamma"), &b.ln_gamma));
            out.push((join(&p, "ln_beta"), &b.ln_beta));
            out.push((join(&p, "conv"), &b.conv));
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut T)>) {
        out.push((join(prefix, "front"), &mut self.front));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = join(prefix, &format!("block{i}"));
            out.push((join(&p, "ln_gamma"), &mut b.ln_gamma));
            out.push((join(&p, "ln_beta"), &mut b.ln_beta));
            out.push((join(&p, "conv"), &mut b.conv));
        }
    }
}

fn gaussian(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let normal = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| normal.sample(rng))
}

impl TgramNetParams {
    /// He-style Gaussian initialization; LayerNorm starts as the identity
    /// affine map.
    pub fn init(dsp: &DspConfig, cfg: &TgramConfig, rng: &mut impl Rng) -> Self {
        let m = dsp.n_mels;
        Self {
            front: gaussian(&[m, 1, dsp.n_fft], (2.0 / dsp.n_fft as f64).sqrt(), rng),
            blocks: (0..cfg.blocks)
                .map(|_| TgramBlock {
                    ln_gamma: Tensor::full(&[m], 1.0),
                    ln_beta: Tensor::zeros(&[m]),
                    conv: gaussian(&[m, m, 3], (2.0 / (3 * m) as f64).sqrt(), rng),
                })
                .collect(),
        }
    }
}

/// Temporal feature `X_T` of a `[1 × L]` waveform.
///
/// The front convolution is padded by `n_fft / 2` on both sides, so frame `t`
/// is centred on sample `t·hop`; the result is cropped or edge-padded to
/// `n_frames` columns exactly like the log-Mel.
pub fn tgram_forward<'t>(
    wave: Var<'t>,
    p: &TgramNetParams<Var<'t>>,
    dsp: &DspConfig,
    cfg: &TgramConfig,
) -> Result<Var<'t>> {
    let x = conv1d(wave, p.front, None, dsp.hop, dsp.n_fft / 2)?;
    let mut x = fit_frames_var(x, dsp.n_frames)?;
    for b in &p.blocks {
        let h = layer_norm(x, Some(b.ln_gamma), Some(b.ln_beta), 0, cfg.ln_eps)?.leaky_relu(cfg.slope);
        x = conv1d(h, b.conv, None, 1, 1)?;
    }
    Ok(x)
}

/// [`tgram_forward`] on a throwaway tape.
pub fn tgram_feature(x: &Waveform, p: &TgramNetParams, dsp: &DspConfig, cfg: &TgramConfig) -> Result<SpectralFeature> {
    let tape = Tape::new();
    let bound = p.map(&mut |t: &Tensor| tape.constant(t.clone()));
    let out = tgram_forward(tape.constant(x.to_tensor()), &bound, dsp, cfg)?;
    SpectralFeature::new(out.to_tensor(), FeatureKind::Temporal, x.source_id())
}
