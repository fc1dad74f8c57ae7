//! Elementwise, reduction, shape and matrix ops.

use crate::error::{dim_err, Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            expected: a.shape().to_vec(),
            got: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

/// Splits `shape` around `axis` into (outer, len, inner) element counts.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tape {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("add", va, vb)?;
        let out = zip_map(va, vb, |x, y| x + y);
        self.record("add", &[a, b], out, Box::new(|args| {
            Ok(vec![Some(args.grad.clone()), Some(args.grad.clone())])
        }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("sub", va, vb)?;
        let out = zip_map(va, vb, |x, y| x - y);
        self.record("sub", &[a, b], out, Box::new(|args| {
            Ok(vec![Some(args.grad.clone()), Some(args.grad.map(|g| -g))])
        }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("mul", va, vb)?;
        let out = zip_map(va, vb, |x, y| x * y);
        self.record("mul", &[a, b], out, Box::new(|args| {
            let ga = args.needs[0].then(|| zip_map(args.grad, args.inputs[1], |g, y| g * y));
            let gb = args.needs[1].then(|| zip_map(args.grad, args.inputs[0], |g, x| g * x));
            Ok(vec![ga, gb])
        }))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * s);
        self.record("scale", &[a], out, Box::new(move |args| Ok(vec![Some(args.grad.map(|g| g * s))])))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(0.0));
        self.record("relu", &[a], out, Box::new(|args| {
            Ok(vec![Some(zip_map(args.grad, args.inputs[0], |g, x| if x > 0.0 { g } else { 0.0 }))])
        }))
    }

    /// Adds `bias[c]` to every element whose index along `axis` is `c`.
    pub fn add_bias(&mut self, x: Var, bias: Var, axis: usize) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        if axis >= vx.rank() || vb.shape() != [vx.shape()[axis]] {
            return Err(dim_err(
                "add_bias",
                format!("bias {:?} does not match axis {axis} of {:?}", vb.shape(), vx.shape()),
            ));
        }
        let (outer, len, inner) = split_axis(vx.shape(), axis);
        let mut out = vx.clone();
        {
            let d = out.data_mut();
            for o in 0..outer {
                for c in 0..len {
                    let b = vb.data()[c];
                    let base = (o * len + c) * inner;
                    d[base..base + inner].iter_mut().for_each(|v| *v += b);
                }
            }
        }
        self.record("add_bias", &[x, bias], out, Box::new(move |args| {
            let gb = args.needs[1].then(|| {
                let g = args.grad.data();
                let mut acc = vec![0.0; len];
                for o in 0..outer {
                    for (c, a) in acc.iter_mut().enumerate() {
                        let base = (o * len + c) * inner;
                        *a += g[base..base + inner].iter().sum::<f64>();
                    }
                }
                Tensor::new(vec![len], acc).expect("bias shape")
            });
            Ok(vec![Some(args.grad.clone()), gb])
        }))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.record("sum", &[a], out, Box::new(|args| {
            Ok(vec![Some(Tensor::full(args.inputs[0].shape(), args.grad.data()[0]))])
        }))
    }

    /// Mean over one axis; the axis is removed from the shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let va = self.value(a);
        if axis >= va.rank() || va.shape()[axis] == 0 {
            return Err(dim_err("mean_axis", format!("axis {axis} invalid for {:?}", va.shape())));
        }
        let (outer, len, inner) = split_axis(va.shape(), axis);
        let mut shape = va.shape().to_vec();
        shape.remove(axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let src = &va.data()[(o * len + k) * inner..(o * len + k + 1) * inner];
                out[o * inner..(o + 1) * inner].iter_mut().zip(src).for_each(|(d, s)| *d += s);
            }
        }
        let inv = 1.0 / len as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let out = Tensor::new(shape, out)?;
        self.record("mean_axis", &[a], out, Box::new(move |args| {
            let in_shape = args.inputs[0].shape().to_vec();
            let mut g = vec![0.0; outer * len * inner];
            for o in 0..outer {
                let src = &args.grad.data()[o * inner..(o + 1) * inner];
                for k in 0..len {
                    g[(o * len + k) * inner..(o * len + k + 1) * inner]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(d, s)| *d = s * inv);
                }
            }
            Ok(vec![Some(Tensor::new(in_shape, g)?)])
        }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        self.record("reshape", &[a], out, Box::new(|args| {
            Ok(vec![Some(args.grad.reshape(args.inputs[0].shape())?)])
        }))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let out = self.value(a).permute(perm)?;
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        self.record("permute", &[a], out, Box::new(move |args| Ok(vec![Some(args.grad.permute(&inverse)?)])))
    }

    /// Concatenates along `axis`; every other axis must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| dim_err("concat", "no inputs"))?;
        let base_shape = self.shape(*first).to_vec();
        if axis >= base_shape.len() {
            return Err(dim_err("concat", format!("axis {axis} out of range for {base_shape:?}")));
        }
        let mut lens = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            let agrees = s.len() == base_shape.len()
                && s.iter().zip(&base_shape).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !agrees {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    expected: base_shape.clone(),
                    got: s.to_vec(),
                });
            }
            lens.push(s[axis]);
        }
        let total: usize = lens.iter().sum();
        let (outer, _, inner) = split_axis(&base_shape, axis);
        let mut shape = base_shape.clone();
        shape[axis] = total;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&x, &len) in xs.iter().zip(&lens) {
                let d = self.value(x).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let out = Tensor::new(shape, out)?;
        self.record("concat", xs, out, Box::new(move |args| {
            let g = args.grad.data();
            let mut grads: Vec<Vec<f64>> = lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
            let mut off = 0;
            for _ in 0..outer {
                for (buf, &len) in grads.iter_mut().zip(&lens) {
                    buf.extend_from_slice(&g[off..off + len * inner]);
                    off += len * inner;
                }
            }
            grads
                .into_iter()
                .zip(&args.inputs)
                .map(|(buf, x)| Tensor::new(x.shape().to_vec(), buf).map(Some))
                .collect()
        }))
    }

    /// `[n,k] x [k,m] -> [n,m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 2 || vb.rank() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(dim_err(
                "matmul",
                format!("cannot multiply {:?} by {:?}", va.shape(), vb.shape()),
            ));
        }
        let (n, k, m) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let out = Tensor::new(vec![n, m], matmul_raw(va.data(), vb.data(), n, k, m))?;
        self.record("matmul", &[a, b], out, Box::new(move |args| {
            let (a, b, g) = (args.inputs[0].data(), args.inputs[1].data(), args.grad.data());
            let ga = args.needs[0].then(|| {
                // g [n,m] x b^T [m,k]
                let mut out = vec![0.0; n * k];
                for i in 0..n {
                    for j in 0..m {
                        let gij = g[i * m + j];
                        if gij == 0.0 {
                            continue;
                        }
                        for p in 0..k {
                            out[i * k + p] += gij * b[p * m + j];
                        }
                    }
                }
                Tensor::new(vec![n, k], out).expect("shape")
            });
            let gb = args.needs[1].then(|| {
                // a^T [k,n] x g [n,m]
                let mut out = vec![0.0; k * m];
                for i in 0..n {
                    for p in 0..k {
                        let aip = a[i * k + p];
                        let row = &mut out[p * m..(p + 1) * m];
                        row.iter_mut().zip(&g[i * m..(i + 1) * m]).for_each(|(o, gv)| *o += aip * gv);
                    }
                }
                Tensor::new(vec![k, m], out).expect("shape")
            });
            Ok(vec![ga, gb])
        }))
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a[i * k + p];
            row.iter_mut().zip(&b[p * m..(p + 1) * m]).for_each(|(o, bv)| *o += aip * bv);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_then_backward_splits_gradient() {
        let mut tape = Tape::new();
        let a = tape.variable(Tensor::new(vec![1, 2], vec![1., 2.]).unwrap());
        let b = tape.variable(Tensor::new(vec![1, 1], vec![3.]).unwrap());
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c).data(), &[1., 2., 3.]);
        let w = tape.constant(Tensor::new(vec![1, 3], vec![10., 20., 30.]).unwrap());
        let p = tape.mul(c, w).unwrap();
        let s = tape.sum(p).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[10., 20.]);
        assert_eq!(g.get(b).unwrap().data(), &[30.]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(TensorError::Dimension { op: "matmul", .. })));
    }

    #[test]
    fn mean_axis_averages() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(vec![2, 2], vec![1., 2., 3., 4.]).unwrap());
        let m = tape.mean_axis(a, 0).unwrap();
        assert_eq!(tape.value(m).data(), &[2., 3.]);
    }
}
