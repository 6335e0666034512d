//! Forward operations. Each constructor computes the output value and
//! records an [`Op`] so [`backward`](crate::numeric::backward) can route
//! gradients. Reductions and normalizers accumulate in `f64`.

use rand::RngExt;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numeric::tensor::Tensor;
use crate::numeric::Float;

pub(crate) enum Op<T: Float> {
    Matmul { a: Tensor<T>, b: Tensor<T> },
    Transpose { a: Tensor<T> },
    Add { a: Tensor<T>, b: Tensor<T> },
    Mul { a: Tensor<T>, b: Tensor<T> },
    Scale { a: Tensor<T>, c: T },
    AddScalar { a: Tensor<T> },
    BroadcastAdd { a: Tensor<T>, bias: Tensor<T> },
    Concat { parts: Vec<Tensor<T>>, axis: usize },
    Slice { a: Tensor<T>, axis: usize, start: usize },
    Reshape { a: Tensor<T> },
    Tanh { a: Tensor<T> },
    Sigmoid { a: Tensor<T> },
    Relu { a: Tensor<T> },
    Softmax { a: Tensor<T>, axis: usize },
    LogSoftmax { a: Tensor<T>, axis: usize },
    EmbeddingLookup { table: Tensor<T>, ids: Vec<u32> },
    LayerNorm { x: Tensor<T>, gamma: Tensor<T>, beta: Tensor<T>, mean: Vec<T>, rstd: Vec<T> },
    Dropout { a: Tensor<T>, mask: Vec<T> },
    CrossEntropy { logits: Tensor<T>, targets: Vec<u32> },
    Sum { a: Tensor<T> },
    Mean { a: Tensor<T> },
    MeanRows { a: Tensor<T> },
}

impl<T: Float> Op<T> {
    pub(crate) fn parents(&self) -> Vec<Tensor<T>> {
        match self {
            Op::Matmul { a, b } | Op::Add { a, b } | Op::Mul { a, b } => vec![a.clone(), b.clone()],
            Op::BroadcastAdd { a, bias } => vec![a.clone(), bias.clone()],
            Op::Concat { parts, .. } => parts.clone(),
            Op::LayerNorm { x, gamma, beta, .. } => vec![x.clone(), gamma.clone(), beta.clone()],
            Op::EmbeddingLookup { table, .. } => vec![table.clone()],
            Op::CrossEntropy { logits, .. } => vec![logits.clone()],
            Op::Transpose { a }
            | Op::Scale { a, .. }
            | Op::AddScalar { a }
            | Op::Slice { a, .. }
            | Op::Reshape { a }
            | Op::Tanh { a }
            | Op::Sigmoid { a }
            | Op::Relu { a }
            | Op::Softmax { a, .. }
            | Op::LogSoftmax { a, .. }
            | Op::Dropout { a, .. }
            | Op::Sum { a }
            | Op::Mean { a }
            | Op::MeanRows { a } => vec![a.clone()],
        }
    }

    pub(crate) fn into_parents(self) -> Vec<Tensor<T>> {
        match self {
            Op::Matmul { a, b } | Op::Add { a, b } | Op::Mul { a, b } => vec![a, b],
            Op::BroadcastAdd { a, bias } => vec![a, bias],
            Op::Concat { parts, .. } => parts,
            Op::LayerNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::EmbeddingLookup { table, .. } => vec![table],
            Op::CrossEntropy { logits, .. } => vec![logits],
            Op::Transpose { a }
            | Op::Scale { a, .. }
            | Op::AddScalar { a }
            | Op::Slice { a, .. }
            | Op::Reshape { a }
            | Op::Tanh { a }
            | Op::Sigmoid { a }
            | Op::Relu { a }
            | Op::Softmax { a, .. }
            | Op::LogSoftmax { a, .. }
            | Op::Dropout { a, .. }
            | Op::Sum { a }
            | Op::Mean { a }
            | Op::MeanRows { a } => vec![a],
        }
    }
}

/// Splits a shape at `axis` into (outer, lane, inner) extents.
pub(crate) fn lane_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let lane = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, lane, inner)
}

fn require_2d<T: Float>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize)> {
    let shape = t.shape();
    if shape.len() != 2 {
        return Err(Error::ShapeMismatch {
            op,
            lhs: shape,
            rhs: vec![],
        });
    }
    Ok((shape[0], shape[1]))
}

impl<T: Float> Tensor<T> {
    /// Matrix product of two 2-D tensors, `[m,k] @ [k,n] -> [m,n]`.
    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, k) = require_2d(self, "matmul")?;
        let (k2, n) = require_2d(rhs, "matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(),
                rhs: rhs.shape(),
            });
        }
        let mut out = vec![T::ZERO; m * n];
        T::gemm(m, k, n, T::ONE, &self.data(), false, &rhs.data(), false, T::ZERO, &mut out);
        Ok(Tensor::derived(
            vec![m, n],
            out,
            Op::Matmul {
                a: self.clone(),
                b: rhs.clone(),
            },
        ))
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&self) -> Result<Tensor<T>> {
        let (r, c) = require_2d(self, "transpose")?;
        let data = self.data();
        let mut out = vec![T::ZERO; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = data[i * c + j];
            }
        }
        drop(data);
        Ok(Tensor::derived(vec![c, r], out, Op::Transpose { a: self.clone() }))
    }

    /// Elementwise sum; shapes must match exactly.
    pub fn add(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape() != rhs.shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: self.shape(),
                rhs: rhs.shape(),
            });
        }
        let out = self
            .data()
            .iter()
            .zip(rhs.data().iter())
            .map(|(&x, &y)| T::from_f64(x.to_f64() + y.to_f64()))
            .collect();
        Ok(Tensor::derived(
            self.shape(),
            out,
            Op::Add {
                a: self.clone(),
                b: rhs.clone(),
            },
        ))
    }

    /// Elementwise (Hadamard) product; shapes must match exactly.
    pub fn mul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape() != rhs.shape() {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: self.shape(),
                rhs: rhs.shape(),
            });
        }
        let out = self
            .data()
            .iter()
            .zip(rhs.data().iter())
            .map(|(&x, &y)| T::from_f64(x.to_f64() * y.to_f64()))
            .collect();
        Ok(Tensor::derived(
            self.shape(),
            out,
            Op::Mul {
                a: self.clone(),
                b: rhs.clone(),
            },
        ))
    }

    /// Multiplies every element by a constant.
    pub fn scale(&self, c: f64) -> Tensor<T> {
        let out = self.data().iter().map(|&x| T::from_f64(x.to_f64() * c)).collect();
        Tensor::derived(
            self.shape(),
            out,
            Op::Scale {
                a: self.clone(),
                c: T::from_f64(c),
            },
        )
    }

    /// Adds a constant to every element.
    pub fn add_scalar(&self, c: f64) -> Tensor<T> {
        let out = self.data().iter().map(|&x| T::from_f64(x.to_f64() + c)).collect();
        Tensor::derived(self.shape(), out, Op::AddScalar { a: self.clone() })
    }

    /// Adds a vector along the last axis: `[.., c] + [c]`.
    pub fn broadcast_add(&self, bias: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = self.shape();
        let bias_shape = bias.shape();
        let c = *shape.last().unwrap_or(&0);
        if bias_shape != vec![c] {
            return Err(Error::ShapeMismatch {
                op: "broadcast_add",
                lhs: shape,
                rhs: bias_shape,
            });
        }
        let bias_data = bias.data();
        let out = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| T::from_f64(x.to_f64() + bias_data[i % c].to_f64()))
            .collect();
        drop(bias_data);
        Ok(Tensor::derived(
            self.shape(),
            out,
            Op::BroadcastAdd {
                a: self.clone(),
                bias: bias.clone(),
            },
        ))
    }

    /// Concatenates tensors along `axis`; all other extents must match.
    pub fn concat(parts: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        if parts.is_empty() {
            return Err(Error::Invalid("concat of zero tensors".into()));
        }
        let first = parts[0].shape();
        if axis >= first.len() {
            return Err(Error::Invalid(format!(
                "concat axis {axis} out of range for shape {first:?}"
            )));
        }
        let mut axis_total = 0;
        for p in parts {
            let s = p.shape();
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s,
                });
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let (outer, _, inner) = lane_dims(&out_shape, axis);
        let mut out = vec![T::ZERO; out_shape.iter().product()];
        let mut offset = 0;
        for p in parts {
            let lane = p.shape()[axis];
            let data = p.data();
            for o in 0..outer {
                let src = o * lane * inner;
                let dst = (o * axis_total + offset) * inner;
                out[dst..dst + lane * inner].copy_from_slice(&data[src..src + lane * inner]);
            }
            offset += lane;
        }
        Ok(Tensor::derived(
            out_shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// Copies `len` consecutive entries of `axis` starting at `start`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        let shape = self.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::Invalid(format!(
                "slice [{start}, {start}+{len}) on axis {axis} out of range for shape {shape:?}"
            )));
        }
        let (outer, lane, inner) = lane_dims(&shape, axis);
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let data = self.data();
        let mut out = vec![T::ZERO; outer * len * inner];
        for o in 0..outer {
            let src = (o * lane + start) * inner;
            let dst = o * len * inner;
            out[dst..dst + len * inner].copy_from_slice(&data[src..src + len * inner]);
        }
        drop(data);
        Ok(Tensor::derived(
            out_shape,
            out,
            Op::Slice {
                a: self.clone(),
                axis,
                start,
            },
        ))
    }

    /// Reinterprets the tensor with a new shape of equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        let expect: usize = shape.iter().product();
        if expect != self.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor::derived(shape.to_vec(), self.to_vec(), Op::Reshape { a: self.clone() }))
    }

    pub fn tanh(&self) -> Tensor<T> {
        let out = self.data().iter().map(|&x| x.tanh()).collect();
        Tensor::derived(self.shape(), out, Op::Tanh { a: self.clone() })
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        let out = self
            .data()
            .iter()
            .map(|&x| T::from_f64(1.0 / (1.0 + (-x.to_f64()).exp())))
            .collect();
        Tensor::derived(self.shape(), out, Op::Sigmoid { a: self.clone() })
    }

    pub fn relu(&self) -> Tensor<T> {
        let out = self
            .data()
            .iter()
            .map(|&x| if x > T::ZERO { x } else { T::ZERO })
            .collect();
        Tensor::derived(self.shape(), out, Op::Relu { a: self.clone() })
    }

    /// Softmax along `axis`, numerically stabilized by the lane max.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::Invalid(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let (outer, lane, inner) = lane_dims(&shape, axis);
        let data = self.data();
        let mut out = vec![T::ZERO; data.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * lane + j) * inner + i;
                let max = (0..lane)
                    .map(|j| data[idx(j)].to_f64())
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..lane {
                    let e = (data[idx(j)].to_f64() - max).exp();
                    out[idx(j)] = T::from_f64(e);
                    sum += e;
                }
                for j in 0..lane {
                    out[idx(j)] = T::from_f64(out[idx(j)].to_f64() / sum);
                }
            }
        }
        drop(data);
        Ok(Tensor::derived(shape, out, Op::Softmax { a: self.clone(), axis }))
    }

    /// Log-softmax along `axis` via a stabilized log-sum-exp.
    pub fn log_softmax(&self, axis: usize) -> Result<Tensor<T>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::Invalid(format!(
                "log_softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let (outer, lane, inner) = lane_dims(&shape, axis);
        let data = self.data();
        let mut out = vec![T::ZERO; data.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * lane + j) * inner + i;
                let max = (0..lane)
                    .map(|j| data[idx(j)].to_f64())
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..lane {
                    sum += (data[idx(j)].to_f64() - max).exp();
                }
                let lse = max + sum.ln();
                for j in 0..lane {
                    out[idx(j)] = T::from_f64(data[idx(j)].to_f64() - lse);
                }
            }
        }
        drop(data);
        Ok(Tensor::derived(shape, out, Op::LogSoftmax { a: self.clone(), axis }))
    }

    /// Gathers rows of a `[v, d]` table: `ids` of length `n` yield `[n, d]`.
    pub fn embedding_lookup(&self, ids: &[u32]) -> Result<Tensor<T>> {
        let (v, d) = require_2d(self, "embedding_lookup")?;
        let data = self.data();
        let mut out = vec![T::ZERO; ids.len() * d];
        for (row, &id) in ids.iter().enumerate() {
            if id as usize >= v {
                return Err(Error::UnknownId { id, vocab: v });
            }
            out[row * d..(row + 1) * d].copy_from_slice(&data[id as usize * d..(id as usize + 1) * d]);
        }
        drop(data);
        Ok(Tensor::derived(
            vec![ids.len(), d],
            out,
            Op::EmbeddingLookup {
                table: self.clone(),
                ids: ids.to_vec(),
            },
        ))
    }

    /// Layer normalization over the last axis with learned `gamma`/`beta`.
    pub fn layer_norm(&self, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
        let shape = self.shape();
        let c = *shape.last().ok_or_else(|| Error::Invalid("layer_norm on 0-d tensor".into()))?;
        if gamma.shape() != vec![c] || beta.shape() != vec![c] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: shape,
                rhs: gamma.shape(),
            });
        }
        let rows = self.len() / c;
        let data = self.data();
        let gamma_d = gamma.data();
        let beta_d = beta.data();
        let mut out = vec![T::ZERO; data.len()];
        let mut means = vec![T::ZERO; rows];
        let mut rstds = vec![T::ZERO; rows];
        for r in 0..rows {
            let lane = &data[r * c..(r + 1) * c];
            let mean = lane.iter().map(|x| x.to_f64()).sum::<f64>() / c as f64;
            let var = lane.iter().map(|x| (x.to_f64() - mean).powi(2)).sum::<f64>() / c as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            means[r] = T::from_f64(mean);
            rstds[r] = T::from_f64(rstd);
            for j in 0..c {
                let xhat = (lane[j].to_f64() - mean) * rstd;
                out[r * c + j] = T::from_f64(xhat * gamma_d[j].to_f64() + beta_d[j].to_f64());
            }
        }
        drop(data);
        drop(gamma_d);
        drop(beta_d);
        Ok(Tensor::derived(
            shape,
            out,
            Op::LayerNorm {
                x: self.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                mean: means,
                rstd: rstds,
            },
        ))
    }

    /// Inverted dropout: keeps each element with probability `1 - rate`,
    /// scaling survivors by `1/(1 - rate)`. Identity when not training or
    /// when `rate` is zero.
    pub fn dropout(&self, rate: f64, training: bool, rng: &mut ChaCha8Rng) -> Result<Tensor<T>> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate must lie in [0, 1), got {rate}")));
        }
        if !training || rate == 0.0 {
            return Ok(self.clone());
        }
        let keep = 1.0 - rate;
        let scale = 1.0 / keep;
        let mask: Vec<T> = (0..self.len())
            .map(|_| {
                if rng.random::<f64>() < keep {
                    T::from_f64(scale)
                } else {
                    T::ZERO
                }
            })
            .collect();
        let out = self
            .data()
            .iter()
            .zip(&mask)
            .map(|(&x, &m)| T::from_f64(x.to_f64() * m.to_f64()))
            .collect();
        Ok(Tensor::derived(
            self.shape(),
            out,
            Op::Dropout {
                a: self.clone(),
                mask,
            },
        ))
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum(&self) -> Tensor<T> {
        let total: f64 = self.data().iter().map(|x| x.to_f64()).sum();
        Tensor::derived(vec![1], vec![T::from_f64(total)], Op::Sum { a: self.clone() })
    }

    /// Mean of all elements, as a scalar tensor.
    pub fn mean(&self) -> Tensor<T> {
        let total: f64 = self.data().iter().map(|x| x.to_f64()).sum();
        let n = self.len().max(1) as f64;
        Tensor::derived(vec![1], vec![T::from_f64(total / n)], Op::Mean { a: self.clone() })
    }

    /// Column means of a 2-D tensor: `[r, c] -> [c]`.
    pub fn mean_rows(&self) -> Result<Tensor<T>> {
        let (r, c) = require_2d(self, "mean_rows")?;
        if r == 0 {
            return Err(Error::Invalid("mean_rows over zero rows".into()));
        }
        let data = self.data();
        let mut out = vec![0.0f64; c];
        for row in 0..r {
            for j in 0..c {
                out[j] += data[row * c + j].to_f64();
            }
        }
        drop(data);
        let out: Vec<T> = out.into_iter().map(|x| T::from_f64(x / r as f64)).collect();
        Ok(Tensor::derived(vec![c], out, Op::MeanRows { a: self.clone() }))
    }
}

/// Mean over positions of `-log softmax(logits)[t, target_t]`.
///
/// `logits` is `[n, v]`; `targets` supplies one class id per row.
pub fn cross_entropy<T: Float>(logits: &Tensor<T>, targets: &[u32]) -> Result<Tensor<T>> {
    let shape = logits.shape();
    if shape.len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            lhs: shape,
            rhs: vec![targets.len()],
        });
    }
    let (n, v) = (shape[0], shape[1]);
    if targets.len() != n || n == 0 {
        return Err(Error::Invalid(format!(
            "cross_entropy: {} targets for {} logit rows",
            targets.len(),
            n
        )));
    }
    let data = logits.data();
    let mut total = 0.0f64;
    for (row, &t) in targets.iter().enumerate() {
        if t as usize >= v {
            return Err(Error::UnknownId { id: t, vocab: v });
        }
        let lane = &data[row * v..(row + 1) * v];
        let max = lane.iter().map(|x| x.to_f64()).fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = lane.iter().map(|x| (x.to_f64() - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - lane[t as usize].to_f64();
    }
    drop(data);
    Ok(Tensor::derived(
        vec![1],
        vec![T::from_f64(total / n as f64)],
        Op::CrossEntropy {
            logits: logits.clone(),
            targets: targets.to_vec(),
        },
    ))
}
