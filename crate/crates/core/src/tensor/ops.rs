//! Differentiable primitives. Each forward constructor records an [`Op`] whose
//! backward rule is implemented in [`Op::backward`].

use super::array::split_axis;
use super::gemm::gemm;
use super::tape::{Node, Var};
use super::Tensor;
use crate::error::{Error, Result};

pub(crate) enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        a: usize,
        factor: f64,
    },
    AddScalar {
        a: usize,
    },
    Ln {
        a: usize,
    },
    Sum {
        a: usize,
    },
    Mean {
        a: usize,
    },
    LeakyRelu {
        a: usize,
        slope: f64,
    },
    LayerNorm {
        x: usize,
        gamma: Option<usize>,
        beta: Option<usize>,
        axis: usize,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Narrow {
        a: usize,
        axis: usize,
        start: usize,
    },
    Transpose {
        a: usize,
    },
    Reshape {
        a: usize,
    },
    MeanAxis {
        a: usize,
        axis: usize,
    },
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    Conv1d {
        x: usize,
        w: usize,
        b: Option<usize>,
        stride: usize,
        padding: usize,
        cols: Tensor,
    },
    DepthwiseConv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        stride: usize,
        padding: usize,
    },
    PointwiseConv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    SoftmaxRows {
        a: usize,
    },
    CrossEntropy {
        logits: usize,
        target: usize,
        probs: Vec<f64>,
    },
    L2Normalize {
        a: usize,
        norms: Vec<f64>,
    },
    ArcMargin {
        cos: usize,
        target: usize,
        margin: f64,
        scale: f64,
    },
    Pick {
        a: usize,
        index: usize,
    },
}

/// Lower clamp applied to vector norms before division.
const NORM_FLOOR: f64 = 1e-12;
/// Cosines are clamped to `[-1 + COS_CLAMP, 1 - COS_CLAMP]` before `acos`.
pub const COS_CLAMP: f64 = 1e-7;

fn rg(nodes: &[Node], ids: &[usize]) -> bool {
    ids.iter().any(|&i| nodes[i].requires_grad)
}

fn conv_out_len(len: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = len + 2 * padding;
    (stride >= 1 && padded >= k).then(|| (padded - k) / stride + 1)
}

impl<'t> Var<'t> {
    /// Matrix product of `[p×q]` and `[q×r]`.
    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&rhs)?;
        let (out, req) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[rhs.id].value);
            let ((p, q), (q2, r)) = match (a.dims2(), b.dims2()) {
                (Ok(x), Ok(y)) => (x, y),
                _ => return Err(Error::shape("matmul", a.shape(), b.shape())),
            };
            if q != q2 {
                return Err(Error::shape("matmul", a.shape(), b.shape()));
            }
            let mut c = vec![0.0; p * r];
            gemm(p, q, r, a.data(), false, b.data(), false, 0.0, &mut c);
            (Tensor::new(&[p, r], c)?, rg(&nodes, &[self.id, rhs.id]))
        };
        Ok(self.tape.push(out, Op::MatMul { a: self.id, b: rhs.id }, req))
    }

    fn binary(self, rhs: Var<'t>, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, bool)> {
        self.same_tape(&rhs)?;
        let nodes = self.tape.nodes.borrow();
        let (a, b) = (&nodes[self.id].value, &nodes[rhs.id].value);
        if a.shape() != b.shape() {
            return Err(Error::shape(name, a.shape(), b.shape()));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok((Tensor::new(a.shape(), data)?, rg(&nodes, &[self.id, rhs.id])))
    }

    fn unary(self, f: impl Fn(f64) -> f64) -> (Tensor, bool) {
        let nodes = self.tape.nodes.borrow();
        let node = &nodes[self.id];
        (node.value.map(f), node.requires_grad)
    }

    /// Elementwise sum of equally shaped tensors.
    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let (out, req) = self.binary(rhs, "add", |x, y| x + y)?;
        Ok(self.tape.push(out, Op::Add { a: self.id, b: rhs.id }, req))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let (out, req) = self.binary(rhs, "mul", |x, y| x * y)?;
        Ok(self.tape.push(out, Op::Mul { a: self.id, b: rhs.id }, req))
    }

    pub fn scale(self, factor: f64) -> Var<'t> {
        let (out, req) = self.unary(|x| x * factor);
        self.tape.push(out, Op::Scale { a: self.id, factor }, req)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let (out, req) = self.unary(|x| x + c);
        self.tape.push(out, Op::AddScalar { a: self.id }, req)
    }

    /// Natural logarithm; every entry must be strictly positive.
    pub fn ln(self) -> Result<Var<'t>> {
        if self.value().data().iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::NumericDomain {
                op: "ln",
                detail: "non-positive or non-finite input".into(),
            });
        }
        let (out, req) = self.unary(f64::ln);
        Ok(self.tape.push(out, Op::Ln { a: self.id }, req))
    }

    pub fn sum(self) -> Var<'t> {
        let (s, req) = {
            let nodes = self.tape.nodes.borrow();
            (nodes[self.id].value.sum(), nodes[self.id].requires_grad)
        };
        self.tape.push(Tensor::scalar(s), Op::Sum { a: self.id }, req)
    }

    pub fn mean(self) -> Var<'t> {
        let (s, req) = {
            let nodes = self.tape.nodes.borrow();
            let v = &nodes[self.id].value;
            (v.sum() / v.len() as f64, nodes[self.id].requires_grad)
        };
        self.tape.push(Tensor::scalar(s), Op::Mean { a: self.id }, req)
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        let (out, req) = self.unary(|x| if x > 0.0 { x } else { slope * x });
        self.tape.push(out, Op::LeakyRelu { a: self.id, slope }, req)
    }

    /// Transpose of a matrix.
    pub fn transpose(self) -> Result<Var<'t>> {
        let (out, req) = {
            let nodes = self.tape.nodes.borrow();
            (nodes[self.id].value.transpose()?, nodes[self.id].requires_grad)
        };
        Ok(self.tape.push(out, Op::Transpose { a: self.id }, req))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let (out, req) = {
            let nodes = self.tape.nodes.borrow();
            (nodes[self.id].value.clone().reshape(shape)?, nodes[self.id].requires_grad)
        };
        Ok(self.tape.push(out, Op::Reshape { a: self.id }, req))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let (out, req) = {
            let nodes = self.tape.nodes.borrow();
            let v = &nodes[self.id].value;
            if axis >= v.rank() || len == 0 || start + len > v.shape()[axis] {
                return Err(Error::shape("narrow", v.shape(), &[axis, start, len]));
            }
            let (outer, full, inner) = split_axis(v.shape(), axis);
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * full + start) * inner;
                data.extend_from_slice(&v.data()[base..base + len * inner]);
            }
            let mut shape = v.shape().to_vec();
            shape[axis] = len;
            (Tensor::new(&shape, data)?, nodes[self.id].requires_grad)
        };
        Ok(self.tape.push(out, Op::Narrow { a: self.id, axis, start }, req))
    }

    /// Mean over `axis`, removing it from the shape.
    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        let (out, req) = {
            let nodes = self.tape.nodes.borrow();
            let v = &nodes[self.id].value;
            if axis >= v.rank() {
                return Err(Error::shape("mean_axis", v.shape(), &[axis]));
            }
            let (outer, len, inner) = split_axis(v.shape(), axis);
            let mut data = vec![0.0; outer * inner];
            for o in 0..outer {
                for l in 0..len {
                    let src = &v.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                    for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            data.iter_mut().for_each(|d| *d /= len as f64);
            let mut shape = v.shape().to_vec();
            shape.remove(axis);
            (Tensor::new(&shape, data)?, nodes[self.id].requires_grad)
        };
        Ok(self.tape.push(out, Op::MeanAxis { a: self.id, axis }, req))
    }

    /// Softmax along the last axis, with max subtraction for stability.
    pub fn softmax_rows(self) -> Result<Var<'t>> {
        let (out, req) = {
            let nodes = self.tape.nodes.borrow();
            let v = &nodes[self.id].value;
            if !v.all_finite() {
                return Err(Error::NumericDomain {
                    op: "softmax_rows",
                    detail: "non-finite input".into(),
                });
            }
            if v.rank() == 0 {
                return Err(Error::shape("softmax_rows", v.shape(), &[]));
            }
            let cols = *v.shape().last().unwrap();
            let mut data = v.data().to_vec();
            for row in data.chunks_mut(cols) {
                softmax_in_place(row);
            }
            (Tensor::new(v.shape(), data)?, nodes[self.id].requires_grad)
        };
        Ok(self.tape.push(out, Op::SoftmaxRows { a: self.id }, req))
    }

    /// Scales every vector along the last axis to unit L2 norm.
    pub fn l2_normalize(self) -> Result<Var<'t>> {
        let (out, norms, req) = {
            let nodes = self.tape.nodes.borrow();
            let v = &nodes[self.id].value;
            if v.rank() == 0 {
                return Err(Error::shape("l2_normalize", v.shape(), &[]));
            }
            let cols = *v.shape().last().unwrap();
            let mut data = v.data().to_vec();
            let mut norms = Vec::with_capacity(data.len() / cols);
            for row in data.chunks_mut(cols) {
                let n = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_FLOOR);
                row.iter_mut().for_each(|x| *x /= n);
                norms.push(n);
            }
            (Tensor::new(v.shape(), data)?, norms, nodes[self.id].requires_grad)
        };
        Ok(self.tape.push(out, Op::L2Normalize { a: self.id, norms }, req))
    }

    /// Selects one element (row-major flat index) as a scalar.
    pub fn pick(self, index: usize) -> Result<Var<'t>> {
        let (out, req) = {
            let nodes = self.tape.nodes.borrow();
            let v = &nodes[self.id].value;
            let Some(&x) = v.data().get(index) else {
                return Err(Error::shape("pick", v.shape(), &[index]));
            };
            (Tensor::scalar(x), nodes[self.id].requires_grad)
        };
        Ok(self.tape.push(out, Op::Pick { a: self.id, index }, req))
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    row.iter_mut().for_each(|x| *x /= total);
}

/// Concatenates tensors of equal rank along `axis`.
pub fn concat<'t>(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
    let first = *parts
        .first()
        .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
    for p in parts {
        first.same_tape(p)?;
    }
    let (out, req) = {
        let nodes = first.tape.nodes.borrow();
        let base = nodes[first.id].value.shape().to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", &base, &[axis]));
        }
        let mut total = 0;
        for p in parts {
            let s = nodes[p.id].value.shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let v = &nodes[p.id].value;
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        (Tensor::new(&shape, data)?, rg(&nodes, &ids))
    };
    let ids = parts.iter().map(|p| p.id).collect();
    Ok(first.tape.push(out, Op::Concat { parts: ids, axis }, req))
}

/// Layer normalization over `axis`, optionally followed by a per-position
/// affine map whose parameters have length `shape[axis]`.
pub fn layer_norm<'t>(
    x: Var<'t>,
    gamma: Option<Var<'t>>,
    beta: Option<Var<'t>>,
    axis: usize,
    eps: f64,
) -> Result<Var<'t>> {
    for p in gamma.iter().chain(beta.iter()) {
        x.same_tape(p)?;
    }
    let (out, xhat, inv_std, req) = {
        let nodes = x.tape.nodes.borrow();
        let v = &nodes[x.id].value;
        if axis >= v.rank() {
            return Err(Error::shape("layer_norm", v.shape(), &[axis]));
        }
        let (outer, len, inner) = split_axis(v.shape(), axis);
        for p in gamma.iter().chain(beta.iter()) {
            let s = nodes[p.id].value.shape();
            if s != [len] {
                return Err(Error::shape("layer_norm", v.shape(), s));
            }
        }
        let src = v.data();
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + i;
                let mean = (0..len).map(|l| src[idx(l)]).sum::<f64>() / len as f64;
                let var = (0..len).map(|l| (src[idx(l)] - mean).powi(2)).sum::<f64>() / len as f64;
                let s = 1.0 / (var + eps).sqrt();
                inv_std[o * inner + i] = s;
                for l in 0..len {
                    xhat[idx(l)] = (src[idx(l)] - mean) * s;
                }
            }
        }
        let mut out = xhat.clone();
        if gamma.is_some() || beta.is_some() {
            let g = gamma.map(|p| nodes[p.id].value.data());
            let b = beta.map(|p| nodes[p.id].value.data());
            for o in 0..outer {
                for l in 0..len {
                    let (gl, bl) = (g.map_or(1.0, |g| g[l]), b.map_or(0.0, |b| b[l]));
                    for y in &mut out[(o * len + l) * inner..(o * len + l + 1) * inner] {
                        *y = *y * gl + bl;
                    }
                }
            }
        }
        let mut ids = vec![x.id];
        ids.extend(gamma.iter().chain(beta.iter()).map(|p| p.id));
        (
            Tensor::new(v.shape(), out)?,
            Tensor::new(v.shape(), xhat)?,
            inv_std,
            rg(&nodes, &ids),
        )
    };
    Ok(x.tape.push(
        out,
        Op::LayerNorm {
            x: x.id,
            gamma: gamma.map(|p| p.id),
            beta: beta.map(|p| p.id),
            axis,
            xhat,
            inv_std,
        },
        req,
    ))
}

/// Affine map `w · x + b` for a vector `x` of length `d_in` and weights
/// `[d_out × d_in]`.
pub fn linear<'t>(x: Var<'t>, w: Var<'t>, b: Option<Var<'t>>) -> Result<Var<'t>> {
    x.same_tape(&w)?;
    if let Some(b) = &b {
        x.same_tape(b)?;
    }
    let (out, req) = {
        let nodes = x.tape.nodes.borrow();
        let (xv, wv) = (&nodes[x.id].value, &nodes[w.id].value);
        let (d_out, d_in) = wv.dims2()?;
        if xv.shape() != [d_in] {
            return Err(Error::shape("linear", xv.shape(), wv.shape()));
        }
        let mut y = match b {
            Some(b) => {
                let bv = &nodes[b.id].value;
                if bv.shape() != [d_out] {
                    return Err(Error::shape("linear", bv.shape(), &[d_out]));
                }
                bv.data().to_vec()
            }
            None => vec![0.0; d_out],
        };
        gemm(d_out, d_in, 1, wv.data(), false, xv.data(), false, 1.0, &mut y);
        let mut ids = vec![x.id, w.id];
        ids.extend(b.map(|b| b.id));
        (Tensor::new(&[d_out], y)?, rg(&nodes, &ids))
    };
    Ok(x.tape.push(
        out,
        Op::Linear {
            x: x.id,
            w: w.id,
            b: b.map(|b| b.id),
        },
        req,
    ))
}

fn check_bias(nodes: &[Node], b: Option<Var<'_>>, channels: usize, op: &'static str) -> Result<()> {
    if let Some(b) = b {
        let s = nodes[b.id].value.shape();
        if s != [channels] {
            return Err(Error::shape(op, s, &[channels]));
        }
    }
    Ok(())
}

/// 1-D cross-correlation of `x: [C_in × L]` with `w: [C_out × C_in × k]`.
pub fn conv1d<'t>(
    x: Var<'t>,
    w: Var<'t>,
    b: Option<Var<'t>>,
    stride: usize,
    padding: usize,
) -> Result<Var<'t>> {
    x.same_tape(&w)?;
    if let Some(b) = &b {
        x.same_tape(b)?;
    }
    let (out, cols, req) = {
        let nodes = x.tape.nodes.borrow();
        let (xv, wv) = (&nodes[x.id].value, &nodes[w.id].value);
        let (c_in, len) = xv.dims2().map_err(|_| Error::shape("conv1d", xv.shape(), wv.shape()))?;
        let [c_out, wc_in, k] = wv.shape()[..] else {
            return Err(Error::shape("conv1d", xv.shape(), wv.shape()));
        };
        if wc_in != c_in {
            return Err(Error::shape("conv1d", xv.shape(), wv.shape()));
        }
        let Some(l_out) = conv_out_len(len, k, stride, padding) else {
            return Err(Error::shape("conv1d", xv.shape(), wv.shape()));
        };
        check_bias(&nodes, b, c_out, "conv1d")?;

        let src = xv.data();
        let mut cols = vec![0.0; c_in * k * l_out];
        for c in 0..c_in {
            let row = &src[c * len..(c + 1) * len];
            for t in 0..k {
                let dst = &mut cols[(c * k + t) * l_out..(c * k + t + 1) * l_out];
                for (o, d) in dst.iter_mut().enumerate() {
                    let j = o * stride + t;
                    if j >= padding && j - padding < len {
                        *d = row[j - padding];
                    }
                }
            }
        }
        let mut y = vec![0.0; c_out * l_out];
        if let Some(b) = b {
            for (co, chunk) in y.chunks_mut(l_out).enumerate() {
                chunk.fill(nodes[b.id].value.data()[co]);
            }
        }
        gemm(c_out, c_in * k, l_out, wv.data(), false, &cols, false, 1.0, &mut y);
        let mut ids = vec![x.id, w.id];
        ids.extend(b.map(|b| b.id));
        (
            Tensor::new(&[c_out, l_out], y)?,
            Tensor::new(&[c_in * k, l_out], cols)?,
            rg(&nodes, &ids),
        )
    };
    Ok(x.tape.push(
        out,
        Op::Conv1d {
            x: x.id,
            w: w.id,
            b: b.map(|b| b.id),
            stride,
            padding,
            cols,
        },
        req,
    ))
}

/// Per-channel 2-D cross-correlation of `x: [C × H × W]` with square kernels
/// `w: [C × k × k]`.
pub fn depthwise_conv2d<'t>(
    x: Var<'t>,
    w: Var<'t>,
    b: Option<Var<'t>>,
    stride: usize,
    padding: usize,
) -> Result<Var<'t>> {
    x.same_tape(&w)?;
    if let Some(b) = &b {
        x.same_tape(b)?;
    }
    let (out, req) = {
        let nodes = x.tape.nodes.borrow();
        let (xv, wv) = (&nodes[x.id].value, &nodes[w.id].value);
        let ([c, h, wd], [wc, kh, kw]) = (xv.shape(), wv.shape()) else {
            return Err(Error::shape("depthwise_conv2d", xv.shape(), wv.shape()));
        };
        let (c, h, wd, kh, kw) = (*c, *h, *wd, *kh, *kw);
        if *wc != c {
            return Err(Error::shape("depthwise_conv2d", xv.shape(), wv.shape()));
        }
        let (Some(ho), Some(wo)) = (conv_out_len(h, kh, stride, padding), conv_out_len(wd, kw, stride, padding)) else {
            return Err(Error::shape("depthwise_conv2d", xv.shape(), wv.shape()));
        };
        check_bias(&nodes, b, c, "depthwise_conv2d")?;
        let (src, ker) = (xv.data(), wv.data());
        let mut y = vec![0.0; c * ho * wo];
        for ch in 0..c {
            let bias = b.map_or(0.0, |b| nodes[b.id].value.data()[ch]);
            let plane = &src[ch * h * wd..(ch + 1) * h * wd];
            let kern = &ker[ch * kh * kw..(ch + 1) * kh * kw];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias;
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            acc += plane[iy as usize * wd + ix as usize] * kern[ky * kw + kx];
                        }
                    }
                    y[(ch * ho + oy) * wo + ox] = acc;
                }
            }
        }
        let mut ids = vec![x.id, w.id];
        ids.extend(b.map(|b| b.id));
        (Tensor::new(&[c, ho, wo], y)?, rg(&nodes, &ids))
    };
    Ok(x.tape.push(
        out,
        Op::DepthwiseConv2d {
            x: x.id,
            w: w.id,
            b: b.map(|b| b.id),
            stride,
            padding,
        },
        req,
    ))
}

/// 1×1 convolution mixing channels: `x: [C_in × H × W]`, `w: [C_out × C_in]`.
pub fn pointwise_conv2d<'t>(x: Var<'t>, w: Var<'t>, b: Option<Var<'t>>) -> Result<Var<'t>> {
    x.same_tape(&w)?;
    if let Some(b) = &b {
        x.same_tape(b)?;
    }
    let (out, req) = {
        let nodes = x.tape.nodes.borrow();
        let (xv, wv) = (&nodes[x.id].value, &nodes[w.id].value);
        let [c_in, h, wd] = xv.shape()[..] else {
            return Err(Error::shape("pointwise_conv2d", xv.shape(), wv.shape()));
        };
        let (c_out, wc_in) = wv.dims2()?;
        if wc_in != c_in {
            return Err(Error::shape("pointwise_conv2d", xv.shape(), wv.shape()));
        }
        check_bias(&nodes, b, c_out, "pointwise_conv2d")?;
        let hw = h * wd;
        let mut y = vec![0.0; c_out * hw];
        if let Some(b) = b {
            for (co, chunk) in y.chunks_mut(hw).enumerate() {
                chunk.fill(nodes[b.id].value.data()[co]);
            }
        }
        gemm(c_out, c_in, hw, wv.data(), false, xv.data(), false, 1.0, &mut y);
        let mut ids = vec![x.id, w.id];
        ids.extend(b.map(|b| b.id));
        (Tensor::new(&[c_out, h, wd], y)?, rg(&nodes, &ids))
    };
    Ok(x.tape.push(
        out,
        Op::PointwiseConv2d {
            x: x.id,
            w: w.id,
            b: b.map(|b| b.id),
        },
        req,
    ))
}

/// Averages a `[C × H × W]` map over its spatial extent, giving `[C]`.
pub fn global_avg_pool<'t>(x: Var<'t>) -> Result<Var<'t>> {
    let shape = x.shape();
    let [c, h, w] = shape[..] else {
        return Err(Error::shape("global_avg_pool", &shape, &[]));
    };
    x.reshape(&[c, h * w])?.mean_axis(1)
}

/// Softmax cross-entropy of logits `[C]` against a class index.
pub fn cross_entropy_with_logits<'t>(logits: Var<'t>, target: usize) -> Result<Var<'t>> {
    let (loss, probs, req) = {
        let nodes = logits.tape.nodes.borrow();
        let v = &nodes[logits.id].value;
        if v.rank() != 1 || target >= v.len() {
            return Err(Error::shape("cross_entropy_with_logits", v.shape(), &[target]));
        }
        if !v.all_finite() {
            return Err(Error::NumericDomain {
                op: "cross_entropy_with_logits",
                detail: "non-finite logits".into(),
            });
        }
        let lse = log_sum_exp(v.data());
        let probs: Vec<f64> = v.data().iter().map(|&l| (l - lse).exp()).collect();
        (lse - v.data()[target], probs, nodes[logits.id].requires_grad)
    };
    Ok(logits.tape.push(
        Tensor::scalar(loss),
        Op::CrossEntropy {
            logits: logits.id,
            target,
            probs,
        },
        req,
    ))
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// Target-class transform of the additive angular margin, together with its
/// derivative with respect to the cosine.
///
/// `cos(θ + m)` is evaluated as `c·cos m − sin θ·sin m`, so no `acos` is
/// needed on that branch. Past `θ + m > π` the monotone surrogate
/// `cos θ − m·sin(m)·θ` is used. Cosines are clamped to
/// `[−1 + COS_CLAMP, 1 − COS_CLAMP]` before `acos` and before dividing by
/// `sin θ`; the derivative is zero outside that range.
pub fn angular_margin(cos: f64, margin: f64) -> (f64, f64) {
    let lo = -1.0 + COS_CLAMP;
    let hi = 1.0 - COS_CLAMP;
    let clamped = !(lo..=hi).contains(&cos);
    let c = cos.clamp(-1.0, 1.0);
    let cc = cos.clamp(lo, hi);
    let sin_cc = (1.0 - cc * cc).sqrt();
    // θ + m ≤ π  ⇔  cos θ ≥ cos(π − m)
    let (value, deriv) = if c >= -margin.cos() {
        let sin_theta = (1.0 - c * c).sqrt();
        (
            c * margin.cos() - sin_theta * margin.sin(),
            margin.cos() + cc * margin.sin() / sin_cc,
        )
    } else {
        let k = margin * margin.sin();
        (c - k * cc.acos(), 1.0 + k / sin_cc)
    };
    (value, if clamped { 0.0 } else { deriv })
}

/// ArcFace logits from cosines `[C]`: `s·φ(cos θ_t)` for the target class and
/// `s·cos θ_c` elsewhere.
pub fn arc_margin<'t>(cos: Var<'t>, target: usize, margin: f64, scale: f64) -> Result<Var<'t>> {
    let (out, req) = {
        let nodes = cos.tape.nodes.borrow();
        let v = &nodes[cos.id].value;
        if v.rank() != 1 || target >= v.len() {
            return Err(Error::Contract(format!(
                "target {target} out of range for {} classes",
                v.len()
            )));
        }
        let mut data: Vec<f64> = v.data().iter().map(|c| c * scale).collect();
        data[target] = scale * angular_margin(v.data()[target], margin).0;
        (Tensor::new(v.shape(), data)?, nodes[cos.id].requires_grad)
    };
    Ok(cos.tape.push(
        out,
        Op::ArcMargin {
            cos: cos.id,
            target,
            margin,
            scale,
        },
        req,
    ))
}

impl Op {
    /// Applies the backward rule: given the upstream gradient `g` of this
    /// node's output `out`, emits input gradients through `acc`.
    pub(crate) fn backward(&self, nodes: &[Node], out: &Tensor, g: &Tensor, acc: &mut dyn FnMut(usize, Tensor)) {
        let val = |id: usize| &nodes[id].value;
        let wants = |id: usize| nodes[id].requires_grad;
        match self {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                let (p, q) = av.dims2().unwrap();
                let r = bv.shape()[1];
                if wants(*a) {
                    let mut da = vec![0.0; p * q];
                    gemm(p, r, q, g.data(), false, bv.data(), true, 0.0, &mut da);
                    acc(*a, Tensor::new(&[p, q], da).unwrap());
                }
                if wants(*b) {
                    let mut db = vec![0.0; q * r];
                    gemm(q, p, r, av.data(), true, g.data(), false, 0.0, &mut db);
                    acc(*b, Tensor::new(&[q, r], db).unwrap());
                }
            }
            Op::Add { a, b } => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Mul { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                if wants(*a) {
                    let d = g.data().iter().zip(bv.data()).map(|(g, y)| g * y).collect();
                    acc(*a, Tensor::new(g.shape(), d).unwrap());
                }
                if wants(*b) {
                    let d = g.data().iter().zip(av.data()).map(|(g, x)| g * x).collect();
                    acc(*b, Tensor::new(g.shape(), d).unwrap());
                }
            }
            Op::Scale { a, factor } => acc(*a, g.map(|v| v * factor)),
            Op::AddScalar { a } => acc(*a, g.clone()),
            Op::Ln { a } => {
                let d = g.data().iter().zip(val(*a).data()).map(|(g, x)| g / x).collect();
                acc(*a, Tensor::new(g.shape(), d).unwrap());
            }
            Op::Sum { a } => acc(*a, Tensor::full(val(*a).shape(), g.data()[0])),
            Op::Mean { a } => {
                let v = val(*a);
                acc(*a, Tensor::full(v.shape(), g.data()[0] / v.len() as f64));
            }
            Op::LeakyRelu { a, slope } => {
                let d = g
                    .data()
                    .iter()
                    .zip(val(*a).data())
                    .map(|(g, &x)| if x > 0.0 { *g } else { g * slope })
                    .collect();
                acc(*a, Tensor::new(g.shape(), d).unwrap());
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                axis,
                xhat,
                inv_std,
            } => {
                let (outer, len, inner) = split_axis(xhat.shape(), *axis);
                let gd = g.data();
                let xh = xhat.data();
                let gam = gamma.map(|p| val(p).data());
                if let Some(p) = gamma.filter(|&p| wants(p)) {
                    let mut dg = vec![0.0; len];
                    for o in 0..outer {
                        for (l, d) in dg.iter_mut().enumerate() {
                            let base = (o * len + l) * inner;
                            *d += (0..inner).map(|i| gd[base + i] * xh[base + i]).sum::<f64>();
                        }
                    }
                    acc(p, Tensor::new(&[len], dg).unwrap());
                }
                if let Some(p) = beta.filter(|&p| wants(p)) {
                    let mut db = vec![0.0; len];
                    for o in 0..outer {
                        for (l, d) in db.iter_mut().enumerate() {
                            let base = (o * len + l) * inner;
                            *d += gd[base..base + inner].iter().sum::<f64>();
                        }
                    }
                    acc(p, Tensor::new(&[len], db).unwrap());
                }
                if wants(*x) {
                    let mut dx = vec![0.0; gd.len()];
                    let mut dxhat = vec![0.0; len];
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |l: usize| (o * len + l) * inner + i;
                            let (mut m1, mut m2) = (0.0, 0.0);
                            for (l, d) in dxhat.iter_mut().enumerate() {
                                *d = gd[idx(l)] * gam.map_or(1.0, |g| g[l]);
                                m1 += *d;
                                m2 += *d * xh[idx(l)];
                            }
                            m1 /= len as f64;
                            m2 /= len as f64;
                            let s = inv_std[o * inner + i];
                            for (l, d) in dxhat.iter().enumerate() {
                                dx[idx(l)] = s * (d - m1 - xh[idx(l)] * m2);
                            }
                        }
                    }
                    acc(*x, Tensor::new(xhat.shape(), dx).unwrap());
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(out.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let shape = val(p).shape();
                    let len = shape[*axis];
                    if wants(p) {
                        let mut d = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            d.extend_from_slice(&g.data()[base..base + len * inner]);
                        }
                        acc(p, Tensor::new(shape, d).unwrap());
                    }
                    offset += len;
                }
            }
            Op::Narrow { a, axis, start } => {
                let shape = val(*a).shape();
                let (outer, full, inner) = split_axis(shape, *axis);
                let len = out.shape()[*axis];
                let mut d = vec![0.0; outer * full * inner];
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    d[base..base + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                acc(*a, Tensor::new(shape, d).unwrap());
            }
            Op::Transpose { a } => acc(*a, g.transpose().unwrap()),
            Op::Reshape { a } => acc(*a, g.clone().reshape(val(*a).shape()).unwrap()),
            Op::MeanAxis { a, axis } => {
                let shape = val(*a).shape();
                let (outer, len, inner) = split_axis(shape, *axis);
                let mut d = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        for i in 0..inner {
                            d[(o * len + l) * inner + i] = g.data()[o * inner + i] / len as f64;
                        }
                    }
                }
                acc(*a, Tensor::new(shape, d).unwrap());
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (val(*x), val(*w));
                let (d_out, d_in) = wv.dims2().unwrap();
                if wants(*w) {
                    let mut dw = vec![0.0; d_out * d_in];
                    gemm(d_out, 1, d_in, g.data(), false, xv.data(), false, 0.0, &mut dw);
                    acc(*w, Tensor::new(&[d_out, d_in], dw).unwrap());
                }
                if wants(*x) {
                    let mut dx = vec![0.0; d_in];
                    gemm(d_in, d_out, 1, wv.data(), true, g.data(), false, 0.0, &mut dx);
                    acc(*x, Tensor::new(&[d_in], dx).unwrap());
                }
                if let Some(b) = b {
                    acc(*b, g.clone());
                }
            }
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                padding,
                cols,
            } => {
                let (xv, wv) = (val(*x), val(*w));
                let (c_in, len) = xv.dims2().unwrap();
                let (c_out, k) = (wv.shape()[0], wv.shape()[2]);
                let l_out = out.shape()[1];
                if wants(*w) {
                    let mut dw = vec![0.0; c_out * c_in * k];
                    gemm(c_out, l_out, c_in * k, g.data(), false, cols.data(), true, 0.0, &mut dw);
                    acc(*w, Tensor::new(wv.shape(), dw).unwrap());
                }
                if wants(*x) {
                    let mut dcols = vec![0.0; c_in * k * l_out];
                    gemm(c_in * k, c_out, l_out, wv.data(), true, g.data(), false, 0.0, &mut dcols);
                    let mut dx = vec![0.0; c_in * len];
                    for c in 0..c_in {
                        for t in 0..k {
                            let src = &dcols[(c * k + t) * l_out..(c * k + t + 1) * l_out];
                            for (o, d) in src.iter().enumerate() {
                                let j = o * stride + t;
                                if j >= *padding && j - padding < len {
                                    dx[c * len + j - padding] += d;
                                }
                            }
                        }
                    }
                    acc(*x, Tensor::new(xv.shape(), dx).unwrap());
                }
                if let Some(b) = b {
                    let db = g.data().chunks(l_out).map(|r| r.iter().sum()).collect();
                    acc(*b, Tensor::new(&[c_out], db).unwrap());
                }
            }
            Op::DepthwiseConv2d {
                x,
                w,
                b,
                stride,
                padding,
            } => {
                let (xv, wv) = (val(*x), val(*w));
                let (c, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let (kh, kw) = (wv.shape()[1], wv.shape()[2]);
                let (ho, wo) = (out.shape()[1], out.shape()[2]);
                let (want_x, want_w) = (wants(*x), wants(*w));
                let mut dx = vec![0.0; if want_x { c * h * wd } else { 0 }];
                let mut dw = vec![0.0; if want_w { c * kh * kw } else { 0 }];
                let (src, ker, gd) = (xv.data(), wv.data(), g.data());
                for ch in 0..c {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let go = gd[(ch * ho + oy) * wo + ox];
                            if go == 0.0 {
                                continue;
                            }
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - *padding as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as isize - *padding as isize;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    let xi = (ch * h + iy as usize) * wd + ix as usize;
                                    let ki = (ch * kh + ky) * kw + kx;
                                    if want_x {
                                        dx[xi] += go * ker[ki];
                                    }
                                    if want_w {
                                        dw[ki] += go * src[xi];
                                    }
                                }
                            }
                        }
                    }
                }
                if want_x {
                    acc(*x, Tensor::new(xv.shape(), dx).unwrap());
                }
                if want_w {
                    acc(*w, Tensor::new(wv.shape(), dw).unwrap());
                }
                if let Some(b) = b {
                    let db = gd.chunks(ho * wo).map(|r| r.iter().sum()).collect();
                    acc(*b, Tensor::new(&[c], db).unwrap());
                }
            }
            Op::PointwiseConv2d { x, w, b } => {
                let (xv, wv) = (val(*x), val(*w));
                let (c_out, c_in) = wv.dims2().unwrap();
                let hw = xv.shape()[1] * xv.shape()[2];
                if wants(*w) {
                    let mut dw = vec![0.0; c_out * c_in];
                    gemm(c_out, hw, c_in, g.data(), false, xv.data(), true, 0.0, &mut dw);
                    acc(*w, Tensor::new(wv.shape(), dw).unwrap());
                }
                if wants(*x) {
                    let mut dx = vec![0.0; c_in * hw];
                    gemm(c_in, c_out, hw, wv.data(), true, g.data(), false, 0.0, &mut dx);
                    acc(*x, Tensor::new(xv.shape(), dx).unwrap());
                }
                if let Some(b) = b {
                    let db = g.data().chunks(hw).map(|r| r.iter().sum()).collect();
                    acc(*b, Tensor::new(&[c_out], db).unwrap());
                }
            }
            Op::SoftmaxRows { a } => {
                let cols = *out.shape().last().unwrap();
                let mut d = vec![0.0; out.len()];
                for ((dr, yr), gr) in d.chunks_mut(cols).zip(out.data().chunks(cols)).zip(g.data().chunks(cols)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for ((d, y), g) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = y * (g - dot);
                    }
                }
                acc(*a, Tensor::new(out.shape(), d).unwrap());
            }
            Op::CrossEntropy { logits, target, probs } => {
                let scale = g.data()[0];
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                d[*target] -= scale;
                acc(*logits, Tensor::new(&[probs.len()], d).unwrap());
            }
            Op::L2Normalize { a, norms } => {
                let cols = *out.shape().last().unwrap();
                let mut d = vec![0.0; out.len()];
                for (((dr, yr), gr), n) in d
                    .chunks_mut(cols)
                    .zip(out.data().chunks(cols))
                    .zip(g.data().chunks(cols))
                    .zip(norms)
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for ((d, y), g) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = (g - y * dot) / n;
                    }
                }
                acc(*a, Tensor::new(out.shape(), d).unwrap());
            }
            Op::ArcMargin {
                cos,
                target,
                margin,
                scale,
            } => {
                let mut d: Vec<f64> = g.data().iter().map(|g| g * scale).collect();
                let (_, deriv) = angular_margin(val(*cos).data()[*target], *margin);
                d[*target] *= deriv;
                acc(*cos, Tensor::new(out.shape(), d).unwrap());
            }
            Op::Pick { a, index } => {
                let shape = val(*a).shape();
                let mut d = Tensor::zeros(shape);
                d.data_mut()[*index] = g.data()[0];
                acc(*a, d);
            }
        }
    }
}
