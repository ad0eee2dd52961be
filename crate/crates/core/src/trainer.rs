//! Adam with per-step cosine annealing over mini-batches of normal clips.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, ManifestEntry, Split};
use crate::dsp::Waveform;
use crate::error::{Error, Result};
use crate::model::{clip_loss, Architecture, ClassMap, FeatureStats, Model, ModelParams};
use crate::params::{bind, ParamTree};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Share of each ID's normal clips held out for loss monitoring.
    pub validation_fraction: f64,
    pub use_afpa: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_max: 1e-4,
            lr_min: 0.0,
            epochs: 30,
            batch_size: 4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            validation_fraction: 0.1,
            use_afpa: true,
        }
    }
}

impl TrainConfig {
    /// The full-length schedule of 200 epochs.
    pub fn full_schedule() -> Self {
        Self {
            epochs: 200,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("trainer: {m}")));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.lr_min >= 0.0 && self.lr_max > self.lr_min && self.lr_max.is_finite()) {
            return bad("need lr_max > lr_min >= 0");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0) {
            return bad("Adam betas must lie in [0, 1) and eps must be positive");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad("validation_fraction must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Learning rate after `step` of `total_steps` optimizer steps.
pub fn cosine_lr(step: usize, total_steps: usize, cfg: &TrainConfig) -> Result<f64> {
    if total_steps == 0 || step > total_steps {
        return Err(Error::Contract(format!("cosine_lr: step {step} outside 0..={total_steps}")));
    }
    if step == total_steps {
        return Ok(cfg.lr_min);
    }
    let t = step as f64 / total_steps as f64;
    Ok(cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + (PI * t).cos()))
}

/// Adam moments, one pair per parameter in [`ParamTree::named`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new<P: ParamTree<Tensor>>(params: &P) -> Self {
        let zeros: Vec<Tensor> = params.named().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step<P: ParamTree<Tensor>>(
    params: &mut P,
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    let mut named = params.named_mut();
    if named.len() != grads.len() || named.len() != state.m.len() {
        return Err(Error::Contract(format!(
            "adam_step: {} parameters, {} gradients, {} moments",
            named.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((name, p), (g, m)) in named.iter().zip(grads.iter().zip(&state.m)) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::shape("adam_step", p.shape(), g.shape()));
        }
        if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NumericAbort(format!(
                "gradient of {name} is not finite at element {i} (step {})",
                state.step + 1
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (c1, c2) = (1.0 - cfg.beta1.powi(t), 1.0 - cfg.beta2.powi(t));
    for (((_, p), g), (m, v)) in named.iter_mut().zip(grads).zip(state.m.iter_mut().zip(&mut state.v)) {
        let p = p.data_mut();
        for (k, &g) in g.data().iter().enumerate() {
            let mk = &mut m.data_mut()[k];
            *mk = cfg.beta1 * *mk + (1.0 - cfg.beta1) * g;
            let vk = &mut v.data_mut()[k];
            *vk = cfg.beta2 * *vk + (1.0 - cfg.beta2) * g * g;
            p[k] -= lr * (*mk / c1) / ((*vk / c2).sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Everything the optimizer carries between steps.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub adam: AdamState,
    pub lr: f64,
    pub best_validation_loss: Option<f64>,
    pub rng: ChaCha8Rng,
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 0 for the untrained model.
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    #[serde(skip)]
    pub validation_loss: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochLog>,
    pub best_validation_loss: Option<f64>,
}

/// The training log as CSV with header `epoch,mean_loss,lr`.
pub fn log_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,mean_loss,lr\n");
    for row in log {
        out.push_str(&format!("{},{},{}\n", row.epoch, row.mean_loss, row.lr));
    }
    out
}

/// A decoded training clip with its precomputed log-Mel.
struct Example {
    wave: Tensor,
    log_mel: Tensor,
    target: usize,
}

fn load_examples(data: &Dataset, entries: &[&ManifestEntry], classes: &ClassMap, arch: &Architecture) -> Result<Vec<Example>> {
    let fb = arch.dsp.filterbank()?;
    entries
        .par_iter()
        .map(|e| {
            let wave: Waveform = data.load(e)?;
            if wave.sample_rate() != arch.dsp.sample_rate {
                return Err(Error::Data {
                    path: e.path(data.root()),
                    detail: format!("sample rate {} differs from the configured {}", wave.sample_rate(), arch.dsp.sample_rate),
                });
            }
            let log_mel = crate::dsp::log_mel(&wave, &fb, &arch.dsp)?.data;
            Ok(Example {
                wave: wave.to_tensor(),
                log_mel,
                target: classes
                    .get(&e.machine_type, &e.machine_id)
                    .expect("classes come from these entries")
                    .class_index,
            })
        })
        .collect()
}

/// Loss and parameter gradients of one clip.
fn clip_gradient(params: &ModelParams, ex: &Example, arch: &Architecture, stats: &FeatureStats) -> Result<(f64, Vec<Tensor>)> {
    let tape = Tape::new();
    let p = bind(&tape, params);
    let loss = clip_loss(
        tape.constant(ex.wave.clone()),
        tape.constant(ex.log_mel.clone()),
        &p,
        arch,
        stats,
        ex.target,
    )?;
    let value = loss.item()?;
    tape.backward(loss)?;
    let grads = p
        .named()
        .iter()
        .map(|(_, v)| v.grad().unwrap_or_else(|| Tensor::zeros(&v.shape())))
        .collect();
    Ok((value, grads))
}

fn clip_loss_value(params: &ModelParams, ex: &Example, arch: &Architecture, stats: &FeatureStats) -> Result<f64> {
    let tape = Tape::new();
    let p = params.map(&mut |t: &Tensor| tape.constant(t.clone()));
    clip_loss(
        tape.constant(ex.wave.clone()),
        tape.constant(ex.log_mel.clone()),
        &p,
        arch,
        stats,
        ex.target,
    )?
    .item()
}

fn mean_loss(params: &ModelParams, examples: &[Example], arch: &Architecture, stats: &FeatureStats) -> Result<Option<f64>> {
    if examples.is_empty() {
        return Ok(None);
    }
    let losses: Vec<f64> = examples
        .par_iter()
        .map(|ex| clip_loss_value(params, ex, arch, stats))
        .collect::<Result<_>>()?;
    Ok(Some(losses.iter().sum::<f64>() / losses.len() as f64))
}

/// Splits each ID's normal training clips into (train, validation), drawing
/// the held-out clips with `rng`.
fn hold_out<'a>(entries: &[&'a ManifestEntry], fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<&'a ManifestEntry>, Vec<&'a ManifestEntry>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut i = 0;
    while i < entries.len() {
        let key = (&entries[i].machine_type, &entries[i].machine_id);
        let end = i + entries[i..]
            .iter()
            .take_while(|e| (&e.machine_type, &e.machine_id) == key)
            .count();
        let mut group: Vec<&ManifestEntry> = entries[i..end].to_vec();
        group.shuffle(rng);
        let k = ((group.len() as f64 * fraction).round() as usize).min(group.len() - 1);
        let (v, t) = group.split_at(k);
        val.extend_from_slice(v);
        train.extend_from_slice(t);
        i = end;
    }
    train.sort_by(|a, b| a.clip.cmp(&b.clip));
    val.sort_by(|a, b| a.clip.cmp(&b.clip));
    (train, val)
}

/// Trains a fresh model on the normal training clips of `data`. The returned
/// parameters are rounded to 32-bit so that a saved checkpoint reproduces
/// them exactly. `on_epoch` sees every log row as it is produced.
pub fn train(
    data: &Dataset,
    arch: &Architecture,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if arch.use_afpa != cfg.use_afpa {
        return Err(Error::Config("architecture and trainer disagree on use_afpa".into()));
    }
    let entries: Vec<&ManifestEntry> = data.split(Split::TrainNormal).collect();
    if entries.is_empty() {
        return Err(Error::Data {
            path: data.root().to_path_buf(),
            detail: "no training clips found under */*/train_normal".into(),
        });
    }
    let classes = ClassMap::from_pairs(entries.iter().map(|e| (e.machine_type.clone(), e.machine_id.clone())));
    if classes.len() < 2 {
        return Err(Error::Data {
            path: data.root().to_path_buf(),
            detail: format!("training needs at least 2 machine IDs, found {}", classes.len()),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let (train_entries, val_entries) = hold_out(&entries, cfg.validation_fraction, &mut rng);
    let train_set = load_examples(data, &train_entries, &classes, arch)?;
    let val_set = load_examples(data, &val_entries, &classes, arch)?;
    let stats = FeatureStats::fit(train_set.iter().map(|e| &e.log_mel))?;

    let mut params = ModelParams::init(arch, classes.len(), cfg.seed)?;
    let mut state = TrainState {
        adam: AdamState::new(&params),
        lr: cfg.lr_max,
        best_validation_loss: None,
        rng,
    };
    let batches_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches_per_epoch;

    let mut log = Vec::with_capacity(cfg.epochs + 1);
    let initial = EpochLog {
        epoch: 0,
        mean_loss: mean_loss(&params, &train_set, arch, &stats)?.expect("training set is not empty"),
        lr: state.lr,
        validation_loss: mean_loss(&params, &val_set, arch, &stats)?,
    };
    on_epoch(&initial);
    log.push(initial);

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut state.rng);
        let mut epoch_loss = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            // Short batches are filled by repeating their own clips.
            let batch: Vec<usize> = (0..cfg.batch_size).map(|k| chunk[k % chunk.len()]).collect();
            let results: Vec<(f64, Vec<Tensor>)> = batch
                .par_iter()
                .map(|&i| clip_gradient(&params, &train_set[i], arch, &stats))
                .collect::<Result<_>>()?;
            let mut loss = 0.0;
            let mut grads: Vec<Tensor> = state.adam.m.iter().map(|m| Tensor::zeros(m.shape())).collect();
            for (l, g) in &results {
                loss += l;
                for (acc, g) in grads.iter_mut().zip(g) {
                    acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
                }
            }
            let n = batch.len() as f64;
            loss /= n;
            if !loss.is_finite() {
                return Err(Error::NumericAbort(format!("loss is {loss} at epoch {epoch}, batch {}", b + 1)));
            }
            grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v /= n));
            let step = (epoch - 1) * batches_per_epoch + b;
            state.lr = cosine_lr(step, total_steps, cfg)?;
            adam_step(&mut params, &grads, &mut state.adam, state.lr, cfg)
                .map_err(|e| match e {
                    Error::NumericAbort(m) => Error::NumericAbort(format!("{m} at epoch {epoch}, batch {}", b + 1)),
                    other => other,
                })?;
            epoch_loss += loss;
        }
        let validation_loss = mean_loss(&params, &val_set, arch, &stats)?;
        if let Some(v) = validation_loss {
            state.best_validation_loss = Some(state.best_validation_loss.map_or(v, |b: f64| b.min(v)));
        }
        let row = EpochLog {
            epoch,
            mean_loss: epoch_loss / batches_per_epoch as f64,
            lr: state.lr,
            validation_loss,
        };
        on_epoch(&row);
        log.push(row);
    }

    for (_, t) in params.named_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = f64::from(*v as f32));
    }
    Ok(TrainOutcome {
        model: Model::new(arch.clone(), params, classes, stats)?,
        log,
        best_validation_loss: state.best_validation_loss,
    })
}
