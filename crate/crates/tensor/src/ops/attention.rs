//! Softmax and scaled dot-product attention.
//!
//! Rows are normalised with the row maximum subtracted first. Multi-head
//! attention splits the feature axis into equal contiguous chunks, runs an
//! independent single head on each and concatenates the results.

use crate::error::{dim_err, Result, TensorError};
use crate::ops::basic::split_axis;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

fn softmax_rows_inplace(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    row.iter_mut().for_each(|v| *v *= inv);
}

/// Softmax along `axis` on a plain tensor.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(dim_err("softmax_axis", format!("axis {axis} invalid for {:?}", x.shape())));
    }
    let (outer, len, inner) = split_axis(x.shape(), axis);
    let mut out = x.clone();
    let d = out.data_mut();
    let mut buf = vec![0.0; len];
    for o in 0..outer {
        for i in 0..inner {
            for k in 0..len {
                buf[k] = d[(o * len + k) * inner + i];
            }
            softmax_rows_inplace(&mut buf);
            for k in 0..len {
                d[(o * len + k) * inner + i] = buf[k];
            }
        }
    }
    Ok(out)
}

/// Attention probabilities `[heads, n_q, n_k]` for the given projections.
pub fn attention_weights(q: &Tensor, k: &Tensor, heads: usize, d_grad: usize) -> Result<Tensor> {
    let (nq, nk, d) = check_qk("attention_weights", q, k, heads, d_grad)?;
    let dh = d / heads;
    let scale = 1.0 / (d_grad as f64).sqrt();
    let mut probs = vec![0.0; heads * nq * nk];
    for h in 0..heads {
        for i in 0..nq {
            let row = &mut probs[(h * nq + i) * nk..][..nk];
            let qi = &q.data()[i * d + h * dh..][..dh];
            for (j, r) in row.iter_mut().enumerate() {
                let kj = &k.data()[j * d + h * dh..][..dh];
                *r = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
            }
            softmax_rows_inplace(row);
        }
    }
    Tensor::new(vec![heads, nq, nk], probs)
}

fn check_qk(op: &'static str, q: &Tensor, k: &Tensor, heads: usize, d_grad: usize) -> Result<(usize, usize, usize)> {
    if q.rank() != 2 || k.rank() != 2 {
        return Err(dim_err(op, format!("Q and K must be rank 2, got {:?} and {:?}", q.shape(), k.shape())));
    }
    let (nq, d) = (q.shape()[0], q.shape()[1]);
    let nk = k.shape()[0];
    if nk == 0 {
        return Err(TensorError::EmptyKeys { op });
    }
    if k.shape()[1] != d {
        return Err(dim_err(op, format!("Q has feature dim {d}, K has {}", k.shape()[1])));
    }
    if heads == 0 || d % heads != 0 {
        return Err(TensorError::InvalidArgument(format!("{op}: {heads} heads do not divide dim {d}")));
    }
    if d_grad == 0 {
        return Err(TensorError::InvalidArgument(format!("{op}: d_grad must be > 0")));
    }
    Ok((nq, nk, d))
}

impl Tape {
    pub fn softmax_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = softmax(self.value(x), axis)?;
        self.record("softmax_axis", &[x], out, Box::new(move |args| {
            let y = args.output;
            let (outer, len, inner) = split_axis(y.shape(), axis);
            let (yd, gd) = (y.data(), args.grad.data());
            let mut dx = vec![0.0; yd.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |k: usize| (o * len + k) * inner + i;
                    let dot: f64 = (0..len).map(|k| yd[idx(k)] * gd[idx(k)]).sum();
                    for k in 0..len {
                        dx[idx(k)] = yd[idx(k)] * (gd[idx(k)] - dot);
                    }
                }
            }
            Ok(vec![Some(Tensor::new(y.shape().to_vec(), dx)?)])
        }))
    }

    /// Single-head `Softmax(Q K^T / sqrt(d_grad)) V`.
    pub fn scaled_dot_product_attention(&mut self, q: Var, k: Var, v: Var, d_grad: usize) -> Result<Var> {
        self.multi_head_attention(q, k, v, 1, d_grad)
    }

    /// `Q [n_q,d]`, `K [n_k,d]`, `V [n_k,d_v]`; `heads` must divide both `d`
    /// and `d_v`. Every head uses the same `1/sqrt(d_grad)` scale.
    pub fn multi_head_attention(&mut self, q: Var, k: Var, v: Var, heads: usize, d_grad: usize) -> Result<Var> {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let (nq, nk, d) = check_qk("attention", vq, vk, heads, d_grad)?;
        if vv.rank() != 2 || vv.shape()[0] != nk || vv.shape()[1] % heads != 0 {
            return Err(dim_err("attention", format!("V {:?} does not match {nk} keys and {heads} heads", vv.shape())));
        }
        let dv = vv.shape()[1];
        let (dh, dvh) = (d / heads, dv / heads);
        let probs = attention_weights(vq, vk, heads, d_grad)?;
        let mut out = vec![0.0; nq * dv];
        for h in 0..heads {
            for i in 0..nq {
                let p = &probs.data()[(h * nq + i) * nk..][..nk];
                let o = &mut out[i * dv + h * dvh..][..dvh];
                for (j, &pij) in p.iter().enumerate() {
                    let vj = &vv.data()[j * dv + h * dvh..][..dvh];
                    o.iter_mut().zip(vj).for_each(|(a, b)| *a += pij * b);
                }
            }
        }
        let out = Tensor::new(vec![nq, dv], out)?;
        let scale = 1.0 / (d_grad as f64).sqrt();
        self.record("attention", &[q, k, v], out, Box::new(move |args| {
            let (qd, kd, vd) = (args.inputs[0].data(), args.inputs[1].data(), args.inputs[2].data());
            let g = args.grad.data();
            let p = probs.data();
            let mut dq = vec![0.0; nq * d];
            let mut dk = vec![0.0; nk * d];
            let mut dvv = vec![0.0; nk * dv];
            let mut ds = vec![0.0; nk];
            for h in 0..heads {
                for i in 0..nq {
                    let prow = &p[(h * nq + i) * nk..][..nk];
                    let gi = &g[i * dv + h * dvh..][..dvh];
                    // dP_ij = <dO_i, V_j>; dS = P * (dP - <P, dP>)
                    let mut dot = 0.0;
                    for j in 0..nk {
                        let vj = &vd[j * dv + h * dvh..][..dvh];
                        let dp: f64 = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                        ds[j] = dp;
                        dot += prow[j] * dp;
                        let dvj = &mut dvv[j * dv + h * dvh..][..dvh];
                        dvj.iter_mut().zip(gi).for_each(|(a, b)| *a += prow[j] * b);
                    }
                    let qi = &qd[i * d + h * dh..][..dh];
                    for j in 0..nk {
                        let s = prow[j] * (ds[j] - dot) * scale;
                        if s == 0.0 {
                            continue;
                        }
                        let kj = &kd[j * d + h * dh..][..dh];
                        let dqi = &mut dq[i * d + h * dh..][..dh];
                        dqi.iter_mut().zip(kj).for_each(|(a, b)| *a += s * b);
                        let dkj = &mut dk[j * d + h * dh..][..dh];
                        dkj.iter_mut().zip(qi).for_each(|(a, b)| *a += s * b);
                    }
                }
            }
            Ok(vec![
                Some(Tensor::new(vec![nq, d], dq)?),
                Some(Tensor::new(vec![nk, d], dk)?),
                Some(Tensor::new(vec![nk, dv], dvv)?),
            ])
        }))
    }
}
