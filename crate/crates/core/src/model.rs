//! Machine-ID classifier with ArcFace logits, and the full feature pipeline
//! feeding it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::afpa::{fuse, residual_enhance, AfpaConfig, AfpaParams, FrequencyPattern};
use crate::dsp::{log_mel, DspConfig, MelFilterbank, Waveform};
use crate::error::{Error, Result};
use crate::params::{join, ParamTree};
use crate::tensor::{
    arc_margin, cross_entropy_with_logits, depthwise_conv2d, global_avg_pool, layer_norm, linear,
    log_sum_exp, pointwise_conv2d, Tape, Tensor, Var,
};
use crate::tgram::{tgram_forward, TgramConfig, TgramNetParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    /// Output channels of the depthwise-separable blocks.
    pub widths: Vec<usize>,
    pub embedding_dim: usize,
    pub kernel: usize,
    pub slope: f64,
    pub ln_eps: f64,
    /// Additive angular margin in radians.
    pub margin: f64,
    pub scale: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            widths: vec![32, 64, 64, 128],
            embedding_dim: 128,
            kernel: 3,
            slope: 0.01,
            ln_eps: 1e-5,
            margin: 1.0,
            scale: 30.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeparableBlock<T> {
    pub depthwise: T,
    pub pointwise: T,
    pub ln_gamma: T,
    pub ln_beta: T,
}

/// Depthwise-separable blocks (stride 2), global average pooling, a linear
/// embedding layer and the ArcFace class-weight matrix `[C × E]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierParams<T = Tensor> {
    pub blocks: Vec<SeparableBlock<T>>,
    pub embed_w: T,
    pub embed_b: T,
    pub class_w: T,
}

impl<T> ParamTree<T> for ClassifierParams<T> {
    type Mapped<U> = ClassifierParams<U>;

    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> ClassifierParams<U> {
        ClassifierParams {
            blocks: self
                .blocks
                .iter()
                .map(|b| SeparableBlock {
                    depthwise: f(&b.depthwise),
                    pointwise: f(&b.pointwise),
                    ln_gamma: f(&b.ln_gamma),
                    ln_beta: f(&b.ln_beta),
                })
                .collect(),
            embed_w: f(&self.embed_w),
            embed_b: f(&self.embed_b),
            class_w: f(&self.class_w),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        for (i, b) in self.blocks.iter().enumerate() {
            let p = join(prefix, &format!("block{i}"));
            out.push((join(&p, "depthwise"), &b.depthwise));
            out.push((join(&p, "pointwise"), &b.pointwise));
            out.push((join(&p, "ln_gamma"), &b.ln_gamma));
            out.push((join(&p, "ln_beta"), &b.ln_beta));
        }
        out.push((join(prefix, "embed_w"), &self.embed_w));
        out.push((join(prefix, "embed_b"), &self.embed_b));
        out.push((join(prefix, "class_w"), &self.class_w));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut T)>) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = join(prefix, &format!("block{i}"));
            out.push((join(&p, "depthwise"), &mut b.depthwise));
            out.push((join(&p, "pointwise"), &mut b.pointwise));
            out.push((join(&p, "ln_gamma"), &mut b.ln_gamma));
            out.push((join(&p, "ln_beta"), &mut b.ln_beta));
        }
        out.push((join(prefix, "embed_w"), &mut self.embed_w));
        out.push((join(prefix, "embed_b"), &mut self.embed_b));
        out.push((join(prefix, "class_w"), &mut self.class_w));
    }
}

fn gaussian(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let normal = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| normal.sample(rng))
}

impl ClassifierParams {
    pub fn init(cfg: &ClassifierConfig, classes: usize, rng: &mut impl Rng) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {classes}")));
        }
        if cfg.widths.is_empty() || cfg.kernel == 0 || cfg.embedding_dim == 0 {
            return Err(Error::Config("classifier needs widths, a kernel size and an embedding size".into()));
        }
        let k = cfg.kernel;
        let mut c_in = 2;
        let mut blocks = Vec::with_capacity(cfg.widths.len());
        for &c_out in &cfg.widths {
            blocks.push(SeparableBlock {
                depthwise: gaussian(&[c_in, k, k], (2.0 / (k * k) as f64).sqrt(), rng),
                pointwise: gaussian(&[c_out, c_in], (2.0 / c_in as f64).sqrt(), rng),
                ln_gamma: Tensor::full(&[c_out], 1.0),
                ln_beta: Tensor::zeros(&[c_out]),
            });
            c_in = c_out;
        }
        let e = cfg.embedding_dim;
        Ok(Self {
            blocks,
            embed_w: gaussian(&[e, c_in], (1.0 / c_in as f64).sqrt(), rng),
            embed_b: Tensor::zeros(&[e]),
            class_w: gaussian(&[classes, e], 1.0, rng),
        })
    }

    pub fn classes(&self) -> usize {
        self.class_w.shape()[0]
    }
}

/// Unnormalized embedding of a fused `[2 × M × N]` input.
pub fn classifier_forward<'t>(x: Var<'t>, p: &ClassifierParams<Var<'t>>, cfg: &ClassifierConfig) -> Result<Var<'t>> {
    let shape = x.shape();
    if shape.len() != 3 || shape[0] != 2 {
        return Err(Error::shape("classifier_forward", &shape, &[2, 0, 0]));
    }
    let mut h = x;
    for b in &p.blocks {
        h = depthwise_conv2d(h, b.depthwise, None, 2, cfg.kernel / 2)?;
        h = pointwise_conv2d(h, b.pointwise, None)?;
        h = layer_norm(h, Some(b.ln_gamma), Some(b.ln_beta), 0, cfg.ln_eps)?.leaky_relu(cfg.slope);
    }
    linear(global_avg_pool(h)?, p.embed_w, Some(p.embed_b))
}

/// Cosine similarities between the normalized embedding and every
/// normalized class weight, shaped `[C]`.
pub fn class_cosines<'t>(embedding: Var<'t>, class_w: Var<'t>) -> Result<Var<'t>> {
    linear(embedding.l2_normalize()?, class_w.l2_normalize()?, None)
}

/// ArcFace logits. With a target the target logit is `s·cos(θ_t + m)`;
/// without one every logit is the margin-free `s·cos θ_c`.
pub fn arcface_logits<'t>(
    embedding: Var<'t>,
    class_w: Var<'t>,
    target: Option<usize>,
    margin: f64,
    scale: f64,
) -> Result<Var<'t>> {
    let cos = class_cosines(embedding, class_w)?;
    match target {
        Some(t) => arc_margin(cos, t, margin, scale),
        None => Ok(cos.scale(scale)),
    }
}

/// Softmax cross-entropy of ArcFace logits.
pub fn id_loss<'t>(logits: Var<'t>, target: usize) -> Result<Var<'t>> {
    cross_entropy_with_logits(logits, target)
}

/// `−ln p(claimed)` under `softmax(logits)`.
///
/// Evaluated as `ln(1 + Σ_{c≠claimed} e^{l_c − l_claimed})` so that scores
/// of confidently recognised clips keep full relative precision.
pub fn score_from_logits(logits: &[f64], claimed: usize) -> Result<f64> {
    let Some(&own) = logits.get(claimed) else {
        return Err(Error::Contract(format!(
            "claimed class {claimed} out of range for {} classes",
            logits.len()
        )));
    };
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::NumericDomain {
            op: "anomaly_score",
            detail: "non-finite logits".into(),
        });
    }
    if logits.iter().all(|l| l - own <= 700.0) {
        let rest: f64 = logits
            .iter()
            .enumerate()
            .filter(|&(c, _)| c != claimed)
            .map(|(_, l)| (l - own).exp())
            .sum();
        Ok(rest.ln_1p())
    } else {
        Ok(log_sum_exp(logits) - own)
    }
}

/// Anomaly score of a fused input against its claimed class, using
/// margin-free logits.
pub fn anomaly_score<'t>(x: Var<'t>, p: &ClassifierParams<Var<'t>>, cfg: &ClassifierConfig, claimed: usize) -> Result<f64> {
    let e = classifier_forward(x, p, cfg)?;
    let logits = arcface_logits(e, p.class_w, None, cfg.margin, cfg.scale)?;
    score_from_logits(logits.value().data(), claimed)
}

/// One machine instance and its class index.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct IdLabel {
    pub machine_type: String,
    pub machine_id: String,
    pub class_index: usize,
}

/// Stable bijection between `(machine_type, machine_id)` pairs and class
/// indices, ordered lexicographically.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassMap {
    labels: Vec<IdLabel>,
}

impl ClassMap {
    pub fn from_pairs<I, A, B>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (A, B)>,
        A: Into<String>,
        B: Into<String>,
    {
        let mut keys: Vec<(String, String)> = pairs.into_iter().map(|(a, b)| (a.into(), b.into())).collect();
        keys.sort();
        keys.dedup();
        Self {
            labels: keys
                .into_iter()
                .enumerate()
                .map(|(class_index, (machine_type, machine_id))| IdLabel {
                    machine_type,
                    machine_id,
                    class_index,
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[IdLabel] {
        &self.labels
    }

    pub fn get(&self, machine_type: &str, machine_id: &str) -> Option<&IdLabel> {
        self.labels
            .iter()
            .find(|l| l.machine_type == machine_type && l.machine_id == machine_id)
    }

    pub fn label(&self, class_index: usize) -> Option<&IdLabel> {
        self.labels.get(class_index)
    }
}

/// Per-Mel-bin standardization applied to the log-Mel before it enters the
/// network. Bins whose training values are (nearly) constant keep unit
/// scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureStats {
    /// The identity transform for `n_mels` bins.
    pub fn identity(n_mels: usize) -> Self {
        Self {
            mean: vec![0.0; n_mels],
            std: vec![1.0; n_mels],
        }
    }

    /// The same shift and scale for every bin.
    pub fn uniform(n_mels: usize, mean: f64, std: f64) -> Self {
        Self {
            mean: vec![mean; n_mels],
            std: vec![std; n_mels],
        }
    }

    pub fn n_mels(&self) -> usize {
        self.mean.len()
    }

    /// Mean and standard deviation of every row over all frames of all
    /// `M x N` features.
    pub fn fit<'a>(features: impl IntoIterator<Item = &'a Tensor>) -> Result<Self> {
        let mut acc: Option<(usize, Vec<f64>, Vec<f64>)> = None;
        for f in features {
            let (m, n) = f.dims2()?;
            let (count, sum, sq) = acc.get_or_insert_with(|| (0, vec![0.0; m], vec![0.0; m]));
            if sum.len() != m {
                return Err(Error::shape("feature statistics", &[sum.len()], &[m]));
            }
            *count += n;
            for r in 0..m {
                let row = f.row(r);
                sum[r] += row.iter().sum::<f64>();
                sq[r] += row.iter().map(|v| v * v).sum::<f64>();
            }
        }
        let Some((count, sum, sq)) = acc.filter(|a| a.0 > 0) else {
            return Err(Error::Contract("no features to standardize".into()));
        };
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let sd = (q / n - m * m).max(0.0).sqrt();
                if sd > 1e-8 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    fn check(&self, m: usize) -> Result<()> {
        if self.mean.len() != m || self.std.len() != m {
            return Err(Error::shape("standardize", &[self.mean.len(), self.std.len()], &[m]));
        }
        if self.std.iter().any(|s| !(s.is_finite() && *s > 0.0)) || self.mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("feature statistics must be finite with positive scale".into()));
        }
        Ok(())
    }

    /// `(x - mean) / std` row by row, on the tape.
    pub fn apply<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        let [m, n] = shape[..] else {
            return Err(Error::shape("standardize", &shape, &[self.n_mels(), 0]));
        };
        self.check(m)?;
        let tape = x.tape();
        let shift = tape.constant(Tensor::from_fn(&[m, n], |i| -self.mean[i / n]));
        let scale = tape.constant(Tensor::from_fn(&[m, n], |i| 1.0 / self.std[i / n]));
        x.add(shift)?.mul(scale)
    }
}

/// Every configurable piece of the network.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub dsp: DspConfig,
    pub tgram: TgramConfig,
    pub afpa: AfpaConfig,
    pub classifier: ClassifierConfig,
    pub use_afpa: bool,
}

/// All trainable tensors. `afpa` is absent in the backbone configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = Tensor> {
    pub tgram: TgramNetParams<T>,
    pub afpa: Option<AfpaParams<T>>,
    pub classifier: ClassifierParams<T>,
}

impl<T> ParamTree<T> for ModelParams<T> {
    type Mapped<U> = ModelParams<U>;

    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> ModelParams<U> {
        ModelParams {
            tgram: self.tgram.map(f),
            afpa: self.afpa.as_ref().map(|a| a.map(f)),
            classifier: self.classifier.map(f),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        self.tgram.visit(&join(prefix, "tgram"), out);
        if let Some(a) = &self.afpa {
            a.visit(&join(prefix, "afpa"), out);
        }
        self.classifier.visit(&join(prefix, "classifier"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut T)>) {
        self.tgram.visit_mut(&join(prefix, "tgram"), out);
        if let Some(a) = &mut self.afpa {
            a.visit_mut(&join(prefix, "afpa"), out);
        }
        self.classifier.visit_mut(&join(prefix, "classifier"), out);
    }
}

impl ModelParams {
    /// Draws every tensor from one seeded stream, in a fixed order.
    pub fn init(arch: &Architecture, classes: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tgram = TgramNetParams::init(&arch.dsp, &arch.tgram, &mut rng);
        let afpa = AfpaParams::init(arch.dsp.n_frames, &arch.afpa, &mut rng)?;
        let classifier = ClassifierParams::init(&arch.classifier, classes, &mut rng)?;
        Ok(Self {
            tgram,
            afpa: arch.use_afpa.then_some(afpa),
            classifier,
        })
    }
}

/// Intermediate values of one forward pass.
pub struct Forward<'t> {
    pub spectral: Var<'t>,
    pub temporal: Var<'t>,
    pub embedding: Var<'t>,
    /// Per-head attention maps (empty without AFPA).
    pub maps: Vec<Var<'t>>,
}

/// Waveform and its log-Mel to embedding: standardize the log-Mel, enhance it
/// with AFPA when enabled, fuse with the temporal feature and classify.
pub fn forward<'t>(
    wave: Var<'t>,
    log_mel: Var<'t>,
    p: &ModelParams<Var<'t>>,
    arch: &Architecture,
    stats: &FeatureStats,
) -> Result<Forward<'t>> {
    let x = stats.apply(log_mel)?;
    let (spectral, maps) = match (&p.afpa, arch.use_afpa) {
        (Some(a), true) => residual_enhance(x, a, arch.afpa.heads)?,
        (None, false) => (x, Vec::new()),
        _ => {
            return Err(Error::Contract(
                "attention parameters must be present exactly when use_afpa is set".into(),
            ))
        }
    };
    let temporal = tgram_forward(wave, &p.tgram, &arch.dsp, &arch.tgram)?;
    let embedding = classifier_forward(fuse(spectral, temporal)?, &p.classifier, &arch.classifier)?;
    Ok(Forward {
        spectral,
        temporal,
        embedding,
        maps,
    })
}

/// Training objective for one clip: ArcFace cross-entropy against `target`.
pub fn clip_loss<'t>(
    wave: Var<'t>,
    log_mel: Var<'t>,
    p: &ModelParams<Var<'t>>,
    arch: &Architecture,
    stats: &FeatureStats,
    target: usize,
) -> Result<Var<'t>> {
    let f = forward(wave, log_mel, p, arch, stats)?;
    let c = &arch.classifier;
    id_loss(arcface_logits(f.embedding, p.classifier.class_w, Some(target), c.margin, c.scale)?, target)
}

/// Everything inference produces for one clip.
#[derive(Clone, Debug)]
pub struct Inference {
    /// Margin-free logits.
    pub logits: Vec<f64>,
    pub embedding: Tensor,
    pub enhanced: Option<Tensor>,
    pub pattern: Option<FrequencyPattern>,
}

/// A trained network with its class map and input statistics.
#[derive(Clone, Debug)]
pub struct Model {
    pub arch: Architecture,
    pub params: ModelParams,
    pub classes: ClassMap,
    pub stats: FeatureStats,
    filterbank: MelFilterbank,
}

impl Model {
    pub fn new(arch: Architecture, params: ModelParams, classes: ClassMap, stats: FeatureStats) -> Result<Self> {
        if params.afpa.is_some() != arch.use_afpa {
            return Err(Error::Contract("attention parameters disagree with use_afpa".into()));
        }
        if params.classifier.classes() != classes.len() {
            return Err(Error::Contract(format!(
                "classifier has {} classes but the class map lists {}",
                params.classifier.classes(),
                classes.len()
            )));
        }
        stats.check(arch.dsp.n_mels)?;
        let filterbank = arch.dsp.filterbank()?;
        Ok(Self {
            arch,
            params,
            classes,
            stats,
            filterbank,
        })
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    /// Log-Mel of a clip under this model's front-end settings.
    pub fn log_mel(&self, wave: &Waveform) -> Result<Tensor> {
        Ok(log_mel(wave, &self.filterbank, &self.arch.dsp)?.data)
    }

    /// Forward pass on a precomputed log-Mel.
    pub fn infer_with(&self, wave: &Waveform, log_mel: &Tensor) -> Result<Inference> {
        let tape = Tape::new();
        let p = self.params.map(&mut |t: &Tensor| tape.constant(t.clone()));
        let f = forward(
            tape.constant(wave.to_tensor()),
            tape.constant(log_mel.clone()),
            &p,
            &self.arch,
            &self.stats,
        )?;
        let c = &self.arch.classifier;
        let logits = arcface_logits(f.embedding, p.classifier.class_w, None, c.margin, c.scale)?;
        let pattern = if f.maps.is_empty() {
            None
        } else {
            Some(FrequencyPattern::new(
                f.maps.iter().map(Var::to_tensor).collect(),
                wave.source_id(),
            )?)
        };
        let logits = logits.value().data().to_vec();
        Ok(Inference {
            logits,
            embedding: f.embedding.to_tensor(),
            enhanced: self.arch.use_afpa.then(|| f.spectral.to_tensor()),
            pattern,
        })
    }

    pub fn infer(&self, wave: &Waveform) -> Result<Inference> {
        self.infer_with(wave, &self.log_mel(wave)?)
    }

    /// Anomaly score of a clip against its claimed class.
    pub fn score_with(&self, wave: &Waveform, log_mel: &Tensor, claimed: usize) -> Result<f64> {
        score_from_logits(&self.infer_with(wave, log_mel)?.logits, claimed)
    }
}
