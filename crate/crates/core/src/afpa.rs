//! Segmented multi-head self-attention over frequency components.
//!
//! The log-Mel `X_F [M × N]` is projected with `N × N` matrices to `Q, K, V`,
//! which are split column-wise into `I` time segments of width `n = N / I`.
//! Each segment attends across frequency rows:
//! `D_i = softmax_rows(Q_i K_iᵀ / √n)`, `A_i = D_i V_i`. The `A_i` are joined
//! back along time and added to `X_F`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{find, tensor_read, tensor_write};
use crate::dsp::{FeatureKind, SpectralFeature};
use crate::error::{Error, Result};
use crate::params::{join, ParamTree};
use crate::tensor::{concat, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AfpaConfig {
    pub heads: usize,
    /// Standard deviation of the Gaussian perturbation added to the identity
    /// at initialization.
    pub init_std: f64,
}

impl Default for AfpaConfig {
    fn default() -> Self {
        Self {
            heads: 6,
            init_std: 0.02,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AfpaParams<T = Tensor> {
    pub w_q: T,
    pub w_k: T,
    pub w_v: T,
}

impl<T> ParamTree<T> for AfpaParams<T> {
    type Mapped<U> = AfpaParams<U>;

    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> AfpaParams<U> {
        AfpaParams {
            w_q: f(&self.w_q),
            w_k: f(&self.w_k),
            w_v: f(&self.w_v),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        out.push((join(prefix, "w_q"), &self.w_q));
        out.push((join(prefix, "w_k"), &self.w_k));
        out.push((join(prefix, "w_v"), &self.w_v));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut T)>) {
        out.push((join(prefix, "w_q"), &mut self.w_q));
        out.push((join(prefix, "w_k"), &mut self.w_k));
        out.push((join(prefix, "w_v"), &mut self.w_v));
    }
}

impl AfpaParams {
    /// `I_N + N(0, init_std²)` for each projection.
    pub fn init(n_frames: usize, cfg: &AfpaConfig, rng: &mut impl Rng) -> Result<Self> {
        segment_width(n_frames, cfg.heads)?;
        let normal = Normal::new(0.0, cfg.init_std)
            .map_err(|_| Error::Config(format!("invalid init_std {}", cfg.init_std)))?;
        let mut draw = || {
            Tensor::from_fn(&[n_frames, n_frames], |k| {
                let diag = if k / n_frames == k % n_frames { 1.0 } else { 0.0 };
                diag + normal.sample(rng)
            })
        };
        Ok(Self {
            w_q: draw(),
            w_k: draw(),
            w_v: draw(),
        })
    }

    pub fn identity(n_frames: usize) -> Self {
        Self {
            w_q: Tensor::eye(n_frames),
            w_k: Tensor::eye(n_frames),
            w_v: Tensor::eye(n_frames),
        }
    }
}

/// Segment width `N / I`, or a configuration error if `I` does not divide `N`.
pub fn segment_width(n_frames: usize, heads: usize) -> Result<usize> {
    if heads == 0 || n_frames % heads != 0 {
        return Err(Error::Config(format!(
            "{n_frames} time frames cannot be split into {heads} equal segments"
        )));
    }
    Ok(n_frames / heads)
}

/// Splits `[M × N]` into `I` consecutive column blocks `[M × N/I]`.
pub fn segment(x: &Tensor, heads: usize) -> Result<Vec<Tensor>> {
    let (rows, cols) = x.dims2()?;
    let n = segment_width(cols, heads)?;
    (0..heads)
        .map(|i| Tensor::new(&[rows, n], (0..rows).flat_map(|r| x.row(r)[i * n..(i + 1) * n].to_vec()).collect()))
        .collect()
}

/// `(X·W_Q, X·W_K, X·W_V)` on the full feature.
pub fn project_qkv<'t>(x: Var<'t>, p: &AfpaParams<Var<'t>>) -> Result<(Var<'t>, Var<'t>, Var<'t>)> {
    Ok((x.matmul(p.w_q)?, x.matmul(p.w_k)?, x.matmul(p.w_v)?))
}

/// One head: returns `(A_i, D_i)` with `D_i = softmax_rows(Q_i K_iᵀ / √n)`
/// and `A_i = D_i V_i`, where `n` is the segment width.
pub fn attention_head<'t>(q: Var<'t>, k: Var<'t>, v: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    if qs.len() != 2 || qs != ks || qs != vs {
        return Err(Error::shape("attention_head", &qs, if qs != ks { &ks } else { &vs }));
    }
    let n = qs[1] as f64;
    let d = q.matmul(k.transpose()?)?.scale(1.0 / n.sqrt()).softmax_rows()?;
    Ok((d.matmul(v)?, d))
}

/// Multi-head attention with heads joined along time; also returns every `D_i`.
pub fn mhsa<'t>(x: Var<'t>, p: &AfpaParams<Var<'t>>, heads: usize) -> Result<(Var<'t>, Vec<Var<'t>>)> {
    let shape = x.shape();
    let [_, cols] = shape[..] else {
        return Err(Error::shape("mhsa", &shape, &p.w_q.shape()));
    };
    let n = segment_width(cols, heads)?;
    let (q, k, v) = project_qkv(x, p)?;
    let mut outs = Vec::with_capacity(heads);
    let mut maps = Vec::with_capacity(heads);
    for i in 0..heads {
        let (a, d) = attention_head(q.narrow(1, i * n, n)?, k.narrow(1, i * n, n)?, v.narrow(1, i * n, n)?)?;
        outs.push(a);
        maps.push(d);
    }
    Ok((concat(&outs, 1)?, maps))
}

/// `X̂_F = mhsa(X_F) + X_F`.
pub fn residual_enhance<'t>(x: Var<'t>, p: &AfpaParams<Var<'t>>, heads: usize) -> Result<(Var<'t>, Vec<Var<'t>>)> {
    let (out, maps) = mhsa(x, p, heads)?;
    Ok((out.add(x)?, maps))
}

/// Stacks two `[M × N]` maps into `[2 × M × N]`: channel 0 is the spectral
/// input, channel 1 the temporal feature.
pub fn fuse<'t>(spectral: Var<'t>, temporal: Var<'t>) -> Result<Var<'t>> {
    let (a, b) = (spectral.shape(), temporal.shape());
    if a.len() != 2 || a != b {
        return Err(Error::shape("fuse", &a, &b));
    }
    let lift = |v: Var<'t>| v.reshape(&[1, a[0], a[1]]);
    concat(&[lift(spectral)?, lift(temporal)?], 0)
}

/// Per-head attention maps and their mean.
#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyPattern {
    pub maps: Vec<Tensor>,
    pub pooled: Tensor,
    pub clip_id: String,
}

impl FrequencyPattern {
    pub fn new(maps: Vec<Tensor>, clip_id: impl Into<String>) -> Result<Self> {
        let first = maps
            .first()
            .ok_or_else(|| Error::Contract("a frequency pattern needs at least one map".into()))?;
        let (m, m2) = first.dims2()?;
        if m != m2 {
            return Err(Error::shape("FrequencyPattern", first.shape(), &[m, m]));
        }
        let mut pooled = vec![0.0; m * m];
        for d in &maps {
            if d.shape() != first.shape() {
                return Err(Error::shape("FrequencyPattern", first.shape(), d.shape()));
            }
            pooled.iter_mut().zip(d.data()).for_each(|(p, v)| *p += v);
        }
        let heads = maps.len() as f64;
        pooled.iter_mut().for_each(|p| *p /= heads);
        Ok(Self {
            pooled: Tensor::new(&[m, m], pooled)?,
            maps,
            clip_id: clip_id.into(),
        })
    }

    pub fn n_mels(&self) -> usize {
        self.pooled.shape()[0]
    }

    /// Largest deviation of any row sum from 1 over all maps.
    pub fn stochasticity_error(&self) -> f64 {
        let m = self.n_mels();
        self.maps
            .iter()
            .flat_map(|d| (0..m).map(move |r| (d.row(r).iter().sum::<f64>() - 1.0).abs()))
            .fold(0.0, f64::max)
    }

    /// Mean over query rows of the pooled attention mass received by the key
    /// columns `cols`.
    pub fn column_mass(&self, cols: &[usize]) -> f64 {
        let m = self.n_mels();
        if cols.is_empty() {
            return 0.0;
        }
        let total: f64 = (0..m).map(|r| cols.iter().map(|&c| self.pooled.at(r, c)).sum::<f64>()).sum();
        total / (m * cols.len()) as f64
    }
}

/// Enhanced feature and attention pattern of a stored feature.
pub fn enhance(x: &SpectralFeature, p: &AfpaParams, heads: usize) -> Result<(SpectralFeature, FrequencyPattern)> {
    let tape = Tape::new();
    let bound = p.map(&mut |t: &Tensor| tape.constant(t.clone()));
    let (out, maps) = residual_enhance(tape.constant(x.data.clone()), &bound, heads)?;
    let pattern = FrequencyPattern::new(maps.iter().map(Var::to_tensor).collect(), x.clip_id.clone())?;
    Ok((SpectralFeature::new(out.to_tensor(), FeatureKind::Enhanced, x.clip_id.clone())?, pattern))
}

/// `prefix` with `suffix` appended to its final component.
pub fn suffixed(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    s.into()
}

/// Writes `<prefix>.pattern.aft` (tensors `pooled`, `head0`, `head1`, …) and
/// `<prefix>.pattern.csv` (the pooled map, one row per query frequency).
pub fn export_pattern(pattern: &FrequencyPattern, prefix: &Path) -> Result<()> {
    let mut entries = vec![("pooled".to_string(), pattern.pooled.clone())];
    entries.extend(pattern.maps.iter().enumerate().map(|(i, d)| (format!("head{i}"), d.clone())));
    tensor_write(suffixed(prefix, ".pattern.aft"), &entries)?;

    let m = pattern.n_mels();
    let mut csv = String::new();
    for r in 0..m {
        for (c, v) in pattern.pooled.row(r).iter().enumerate() {
            if c > 0 {
                csv.push(',');
            }
            write!(csv, "{v}").expect("write to String");
        }
        csv.push('\n');
    }
    let path = suffixed(prefix, ".pattern.csv");
    fs::write(&path, csv).map_err(|e| Error::io(&path, e))
}

/// Reads a `.pattern.aft` file written by [`export_pattern`].
pub fn read_pattern(path: &Path) -> Result<FrequencyPattern> {
    let entries = tensor_read(path)?;
    let missing = |what: &str| Error::Format {
        path: path.to_path_buf(),
        detail: format!("missing tensor {what}"),
    };
    let pooled = find(&entries, "pooled").ok_or_else(|| missing("pooled"))?.clone();
    let maps: Vec<Tensor> = (0..)
        .map_while(|i| find(&entries, &format!("head{i}")).cloned())
        .collect();
    if maps.is_empty() {
        return Err(missing("head0"));
    }
    let clip_id = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(FrequencyPattern { maps, pooled, clip_id })
}
