//! Reverse-mode gradient propagation.
//!
//! Each backward call walks the graph once with its own set of
//! intermediate buffers and then adds the results into the persistent
//! `grad` of every trainable leaf, so repeated calls accumulate exactly.

use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};
use crate::numeric::ops::{lane_dims, Op};
use crate::numeric::tensor::Tensor;
use crate::numeric::Float;

struct GradSink<T: Float> {
    bufs: HashMap<usize, Vec<T>>,
}

impl<T: Float> GradSink<T> {
    /// Hands the op a zero-initialized (or previously written) buffer for
    /// `parent` to add its contribution into. Skipped when the parent has
    /// no gradient path.
    fn add(&mut self, parent: &Tensor<T>, f: impl FnOnce(&mut [T])) {
        if !parent.needs_grad() {
            return;
        }
        let buf = self
            .bufs
            .entry(parent.ptr())
            .or_insert_with(|| vec![T::ZERO; parent.len()]);
        f(buf);
    }
}

/// Accumulates `d loss / d leaf` into every trainable ancestor of `loss`.
///
/// `loss` must be scalar. Calling twice without zeroing doubles the
/// stored gradients.
pub fn backward<T: Float>(loss: &Tensor<T>) -> Result<()> {
    if loss.len() != 1 {
        return Err(Error::Invalid(format!(
            "backward requires a scalar loss, got shape {:?}",
            loss.shape()
        )));
    }

    // Post-order DFS; reversing it yields children before parents.
    let mut topo: Vec<Tensor<T>> = Vec::new();
    let mut visited: HashSet<usize> = HashSet::new();
    let mut stack: Vec<(Tensor<T>, bool)> = vec![(loss.clone(), false)];
    while let Some((node, expanded)) = stack.pop() {
        if expanded {
            topo.push(node);
            continue;
        }
        if !visited.insert(node.ptr()) {
            continue;
        }
        stack.push((node.clone(), true));
        let inner = node.inner.borrow();
        if let Some(op) = &inner.op {
            for parent in op.parents() {
                if parent.needs_grad() && !visited.contains(&parent.ptr()) {
                    stack.push((parent, false));
                }
            }
        }
    }

    let mut sink = GradSink {
        bufs: HashMap::new(),
    };
    sink.bufs.insert(loss.ptr(), vec![T::ONE]);

    for node in topo.iter().rev() {
        let Some(g) = sink.bufs.remove(&node.ptr()) else {
            continue;
        };
        if node.requires_grad() {
            node.accumulate_grad(&g);
        }
        let inner = node.inner.borrow();
        if let Some(op) = &inner.op {
            op_backward(op, &inner.data, &g, &mut sink);
        }
    }
    Ok(())
}

/// Routes the output gradient `g` of one node into its parents.
/// `out_data` is the node's own forward value (several ops reuse it).
fn op_backward<T: Float>(op: &Op<T>, out_data: &[T], g: &[T], sink: &mut GradSink<T>) {
    match op {
        Op::Matmul { a, b } => {
            let (m, k) = {
                let s = a.shape();
                (s[0], s[1])
            };
            let n = b.shape()[1];
            sink.add(a, |buf| {
                T::gemm(m, n, k, T::ONE, g, false, &b.data(), true, T::ONE, buf);
            });
            sink.add(b, |buf| {
                T::gemm(k, m, n, T::ONE, &a.data(), true, g, false, T::ONE, buf);
            });
        }
        Op::Transpose { a } => {
            let (r, c) = {
                let s = a.shape();
                (s[0], s[1])
            };
            sink.add(a, |buf| {
                for i in 0..r {
                    for j in 0..c {
                        buf[i * c + j] = T::from_f64(buf[i * c + j].to_f64() + g[j * r + i].to_f64());
                    }
                }
            });
        }
        Op::Add { a, b } => {
            for parent in [a, b] {
                sink.add(parent, |buf| add_into(buf, g));
            }
        }
        Op::Mul { a, b } => {
            sink.add(a, |buf| {
                let bd = b.data();
                for (i, dst) in buf.iter_mut().enumerate() {
                    *dst = T::from_f64(dst.to_f64() + g[i].to_f64() * bd[i].to_f64());
                }
            });
            sink.add(b, |buf| {
                let ad = a.data();
                for (i, dst) in buf.iter_mut().enumerate() {
                    *dst = T::from_f64(dst.to_f64() + g[i].to_f64() * ad[i].to_f64());
                }
            });
        }
        Op::Scale { a, c } => {
            sink.add(a, |buf| {
                for (dst, &gi) in buf.iter_mut().zip(g) {
                    *dst = T::from_f64(dst.to_f64() + gi.to_f64() * c.to_f64());
                }
            });
        }
        Op::AddScalar { a } => {
            sink.add(a, |buf| add_into(buf, g));
        }
        Op::BroadcastAdd { a, bias } => {
            sink.add(a, |buf| add_into(buf, g));
            sink.add(bias, |buf| {
                let c = buf.len();
                let mut acc = vec![0.0f64; c];
                for (i, &gi) in g.iter().enumerate() {
                    acc[i % c] += gi.to_f64();
                }
                for (dst, s) in buf.iter_mut().zip(acc) {
                    *dst = T::from_f64(dst.to_f64() + s);
                }
            });
        }
        Op::Concat { parts, axis } => {
            let out_shape = {
                let mut s = parts[0].shape();
                s[*axis] = parts.iter().map(|p| p.shape()[*axis]).sum();
                s
            };
            let (outer, total_lane, inner) = lane_dims(&out_shape, *axis);
            let mut offset = 0;
            for part in parts {
                let lane = part.shape()[*axis];
                sink.add(part, |buf| {
                    for o in 0..outer {
                        let src = (o * total_lane + offset) * inner;
                        let dst = o * lane * inner;
                        for i in 0..lane * inner {
                            buf[dst + i] = T::from_f64(buf[dst + i].to_f64() + g[src + i].to_f64());
                        }
                    }
                });
                offset += lane;
            }
        }
        Op::Slice { a, axis, start } => {
            let shape = a.shape();
            let (outer, lane, inner) = lane_dims(&shape, *axis);
            let len = g.len() / (outer * inner).max(1);
            sink.add(a, |buf| {
                for o in 0..outer {
                    let dst = (o * lane + start) * inner;
                    let src = o * len * inner;
                    for i in 0..len * inner {
                        buf[dst + i] = T::from_f64(buf[dst + i].to_f64() + g[src + i].to_f64());
                    }
                }
            });
        }
        Op::Reshape { a } => {
            sink.add(a, |buf| add_into(buf, g));
        }
        Op::Tanh { a } => {
            sink.add(a, |buf| {
                for (i, dst) in buf.iter_mut().enumerate() {
                    let y = out_data[i].to_f64();
                    *dst = T::from_f64(dst.to_f64() + g[i].to_f64() * (1.0 - y * y));
                }
            });
        }
        Op::Sigmoid { a } => {
            sink.add(a, |buf| {
                for (i, dst) in buf.iter_mut().enumerate() {
                    let y = out_data[i].to_f64();
                    *dst = T::from_f64(dst.to_f64() + g[i].to_f64() * y * (1.0 - y));
                }
            });
        }
        Op::Relu { a } => {
            sink.add(a, |buf| {
                let ad = a.data();
                for (i, dst) in buf.iter_mut().enumerate() {
                    if ad[i] > T::ZERO {
                        *dst = T::from_f64(dst.to_f64() + g[i].to_f64());
                    }
                }
            });
        }
        Op::Softmax { a, axis } => {
            let shape = a.shape();
            let (outer, lane, inner) = lane_dims(&shape, *axis);
            sink.add(a, |buf| {
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * lane + j) * inner + i;
                        let mut dot = 0.0f64;
                        for j in 0..lane {
                            dot += g[idx(j)].to_f64() * out_data[idx(j)].to_f64();
                        }
                        for j in 0..lane {
                            let y = out_data[idx(j)].to_f64();
                            let contrib = y * (g[idx(j)].to_f64() - dot);
                            buf[idx(j)] = T::from_f64(buf[idx(j)].to_f64() + contrib);
                        }
                    }
                }
            });
        }
        Op::LogSoftmax { a, axis } => {
            let shape = a.shape();
            let (outer, lane, inner) = lane_dims(&shape, *axis);
            sink.add(a, |buf| {
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * lane + j) * inner + i;
                        let mut gsum = 0.0f64;
                        for j in 0..lane {
                            gsum += g[idx(j)].to_f64();
                        }
                        for j in 0..lane {
                            let p = out_data[idx(j)].to_f64().exp();
                            let contrib = g[idx(j)].to_f64() - p * gsum;
                            buf[idx(j)] = T::from_f64(buf[idx(j)].to_f64() + contrib);
                        }
                    }
                }
            });
        }
        Op::EmbeddingLookup { table, ids } => {
            let d = table.shape()[1];
            sink.add(table, |buf| {
                for (row, &id) in ids.iter().enumerate() {
                    let dst = id as usize * d;
                    let src = row * d;
                    for j in 0..d {
                        buf[dst + j] = T::from_f64(buf[dst + j].to_f64() + g[src + j].to_f64());
                    }
                }
            });
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            mean,
            rstd,
        } => {
            let c = gamma.len();
            let rows = x.len() / c;
            sink.add(x, |buf| {
                let xd = x.data();
                let gd = gamma.data();
                for r in 0..rows {
                    let mu = mean[r].to_f64();
                    let rs = rstd[r].to_f64();
                    let mut mean_dxhat = 0.0f64;
                    let mut mean_dxhat_xhat = 0.0f64;
                    for j in 0..c {
                        let xhat = (xd[r * c + j].to_f64() - mu) * rs;
                        let dxhat = g[r * c + j].to_f64() * gd[j].to_f64();
                        mean_dxhat += dxhat;
                        mean_dxhat_xhat += dxhat * xhat;
                    }
                    mean_dxhat /= c as f64;
                    mean_dxhat_xhat /= c as f64;
                    for j in 0..c {
                        let xhat = (xd[r * c + j].to_f64() - mu) * rs;
                        let dxhat = g[r * c + j].to_f64() * gd[j].to_f64();
                        let dx = rs * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                        buf[r * c + j] = T::from_f64(buf[r * c + j].to_f64() + dx);
                    }
                }
            });
            sink.add(gamma, |buf| {
                let xd = x.data();
                for j in 0..c {
                    let mut acc = 0.0f64;
                    for r in 0..rows {
                        let xhat = (xd[r * c + j].to_f64() - mean[r].to_f64()) * rstd[r].to_f64();
                        acc += g[r * c + j].to_f64() * xhat;
                    }
                    buf[j] = T::from_f64(buf[j].to_f64() + acc);
                }
            });
            sink.add(beta, |buf| {
                for j in 0..c {
                    let mut acc = 0.0f64;
                    for r in 0..rows {
                        acc += g[r * c + j].to_f64();
                    }
                    buf[j] = T::from_f64(buf[j].to_f64() + acc);
                }
            });
        }
        Op::Dropout { a, mask } => {
            sink.add(a, |buf| {
                for (i, dst) in buf.iter_mut().enumerate() {
                    *dst = T::from_f64(dst.to_f64() + g[i].to_f64() * mask[i].to_f64());
                }
            });
        }
        Op::CrossEntropy { logits, targets } => {
            let v = logits.shape()[1];
            let n = targets.len();
            let gs = g[0].to_f64() / n as f64;
            sink.add(logits, |buf| {
                let ld = logits.data();
                for (row, &t) in targets.iter().enumerate() {
                    let lane = &ld[row * v..(row + 1) * v];
                    let max = lane.iter().map(|x| x.to_f64()).fold(f64::NEG_INFINITY, f64::max);
                    let sum: f64 = lane.iter().map(|x| (x.to_f64() - max).exp()).sum();
                    for (j, &logit) in lane.iter().enumerate() {
                        let p = (logit.to_f64() - max).exp() / sum;
                        let indicator = if j == t as usize { 1.0 } else { 0.0 };
                        let idx = row * v + j;
                        buf[idx] = T::from_f64(buf[idx].to_f64() + gs * (p - indicator));
                    }
                }
            });
        }
        Op::Sum { a } => {
            let gs = g[0];
            sink.add(a, |buf| {
                for dst in buf.iter_mut() {
                    *dst = T::from_f64(dst.to_f64() + gs.to_f64());
                }
            });
        }
        Op::Mean { a } => {
            let gs = g[0].to_f64() / a.len().max(1) as f64;
            sink.add(a, |buf| {
                for dst in buf.iter_mut() {
                    *dst = T::from_f64(dst.to_f64() + gs);
                }
            });
        }
        Op::MeanRows { a } => {
            let shape = a.shape();
            let (r, c) = (shape[0], shape[1]);
            sink.add(a, |buf| {
                for row in 0..r {
                    for j in 0..c {
                        let contrib = g[j].to_f64() / r as f64;
                        buf[row * c + j] = T::from_f64(buf[row * c + j].to_f64() + contrib);
                    }
                }
            });
        }
    }
}

fn add_into<T: Float>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = T::from_f64(d.to_f64() + s.to_f64());
    }
}
