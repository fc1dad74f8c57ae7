//! Voxel-wise losses on `[C, H, W, D]` logits, recorded on the tape as
//! fused ops.

use occ_tensor::{Tape, Tensor, Var};

use crate::error::{CoreError, Result};
use crate::grid::LabelGrid;

struct Voxels {
    classes: usize,
    n: usize,
    /// Indices of voxels that count.
    active: Vec<usize>,
}

fn voxels(tape: &Tape, logits: Var, labels: &LabelGrid, ignore: Option<&[bool]>) -> Result<Voxels> {
    let s = tape.shape(logits);
    let n = labels.len();
    if s.is_empty() || s[1..].iter().product::<usize>() != n {
        return Err(CoreError::Shape(format!("logits {s:?} against {n} labels")));
    }
    let classes = s[0];
    if let Some(&bad) = labels.data.iter().find(|&&l| l as usize >= classes) {
        return Err(CoreError::Shape(format!("label {bad} outside {classes} classes")));
    }
    if let Some(m) = ignore {
        if m.len() != n {
            return Err(CoreError::Shape(format!("ignore mask has {} entries for {n} voxels", m.len())));
        }
    }
    let active: Vec<usize> = (0..n).filter(|&j| !ignore.is_some_and(|m| m[j])).collect();
    if active.is_empty() {
        return Err(CoreError::Undefined("every voxel is ignored; loss is undefined".into()));
    }
    Ok(Voxels { classes, n, active })
}

/// Log-sum-exp over the class axis for voxel `j`.
#[inline]
fn lse(z: &[f64], c: usize, n: usize, j: usize) -> f64 {
    let mut m = f64::NEG_INFINITY;
    for k in 0..c {
        m = m.max(z[k * n + j]);
    }
    let mut s = 0.0;
    for k in 0..c {
        s += (z[k * n + j] - m).exp();
    }
    m + s.ln()
}

/// Mean of `-log softmax(z)[label]` over non-ignored voxels.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &LabelGrid, ignore: Option<&[bool]>) -> Result<Var> {
    focal(tape, logits, labels, 0.0, 1.0, ignore)
}

/// Mean of `-alpha (1 - p)^gamma log p` with `p` the true-class probability.
pub fn focal(
    tape: &mut Tape,
    logits: Var,
    labels: &LabelGrid,
    gamma: f64,
    alpha: f64,
    ignore: Option<&[bool]>,
) -> Result<Var> {
    if gamma < 0.0 {
        return Err(CoreError::Config(format!("focal gamma must be >= 0, got {gamma}")));
    }
    let Voxels { classes: c, n, active } = voxels(tape, logits, labels, ignore)?;
    let z = tape.value(logits).data();
    let inv = 1.0 / active.len() as f64;
    let mut total = 0.0;
    // per active voxel: (lse, dL/dz scale for the (delta - p) factor)
    let mut cache = Vec::with_capacity(active.len());
    for &j in &active {
        let l = lse(z, c, n, j);
        let t = labels.data[j] as usize;
        let logp = z[t * n + j] - l;
        let p = logp.exp();
        let q = 1.0 - p;
        let w = if gamma == 0.0 { 1.0 } else { q.max(0.0).powf(gamma) };
        total += -alpha * w * logp;
        let extra = if gamma == 0.0 || q <= 0.0 {
            0.0
        } else {
            gamma * q.powf(gamma - 1.0) * p * logp
        };
        cache.push((l, -alpha * (w - extra) * inv));
    }
    let labels = labels.data.clone();
    let value = Tensor::scalar(total * inv);
    let op = if gamma == 0.0 && alpha == 1.0 { "cross_entropy" } else { "focal" };
    Ok(tape.record(op, &[logits], value, Box::new(move |args| {
        let g0 = args.grad.data()[0];
        let z = args.inputs[0].data();
        let mut dz = vec![0.0; z.len()];
        for (&j, &(l, scale)) in active.iter().zip(&cache) {
            let t = labels[j] as usize;
            for k in 0..c {
                let pk = (z[k * n + j] - l).exp();
                let delta = if k == t { 1.0 } else { 0.0 };
                dz[k * n + j] = g0 * scale * (delta - pk);
            }
        }
        Ok(vec![Some(Tensor::new(args.inputs[0].shape().to_vec(), dz)?)])
    }))?)
}

/// `lambda * mean |x - target|`.
pub fn l1(tape: &mut Tape, x: Var, target: &Tensor, lambda: f64) -> Result<Var> {
    if lambda < 0.0 {
        return Err(CoreError::Config(format!("l1 weight must be >= 0, got {lambda}")));
    }
    if tape.shape(x) != target.shape() {
        return Err(CoreError::Shape(format!("l1 input {:?} vs target {:?}", tape.shape(x), target.shape())));
    }
    let xv = tape.value(x).data();
    let n = xv.len().max(1) as f64;
    let sum: f64 = xv.iter().zip(target.data()).map(|(a, b)| (a - b).abs()).sum();
    let target = target.clone();
    Ok(tape.record("l1", &[x], Tensor::scalar(lambda * sum / n), Box::new(move |args| {
        let g = args.grad.data()[0] * lambda / n;
        let d = args.inputs[0]
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| {
                if a > b {
                    g
                } else if a < b {
                    -g
                } else {
                    0.0
                }
            })
            .collect();
        Ok(vec![Some(Tensor::new(args.inputs[0].shape().to_vec(), d)?)])
    }))?)
}

/// Which voxels the L1 correction target covers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum L1Target {
    /// `kappa * onehot(labels) - base_logits` everywhere.
    Dense,
    /// The same where the base argmax is wrong, zero elsewhere.
    #[default]
    Mispredicted,
}

/// L1 target for the additive correction under `mode`.
pub fn l1_target(base_logits: &Tensor, labels: &LabelGrid, kappa: f64, mode: L1Target) -> Result<Tensor> {
    let mut t = correction_target(base_logits, labels, kappa)?;
    if mode == L1Target::Dense {
        return Ok(t);
    }
    let n = labels.len();
    let c = base_logits.shape()[0];
    let pred = base_logits.argmax_axis0();
    let d = t.data_mut();
    for (j, &l) in labels.data.iter().enumerate() {
        if pred[j] == l as usize {
            for k in 0..c {
                d[k * n + j] = 0.0;
            }
        }
    }
    Ok(t)
}

/// Ideal additive correction `kappa * onehot(labels) - base_logits`.
pub fn correction_target(base_logits: &Tensor, labels: &LabelGrid, kappa: f64) -> Result<Tensor> {
    let s = base_logits.shape();
    let n = labels.len();
    if s.is_empty() || s[1..].iter().product::<usize>() != n {
        return Err(CoreError::Shape(format!("logits {s:?} against {n} labels")));
    }
    let mut t = base_logits.map(|v| -v);
    let d = t.data_mut();
    for (j, &l) in labels.data.iter().enumerate() {
        d[l as usize * n + j] += kappa;
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(data: &[u8]) -> LabelGrid {
        LabelGrid::new([1, 1, data.len()], data.to_vec()).unwrap()
    }

    fn scalar(tape: &Tape, v: Var) -> f64 {
        tape.value(v).data()[0]
    }

    #[test]
    fn uniform_logits_give_ln_c() {
        let mut tape = Tape::new();
        let z = tape.variable(Tensor::zeros(&[4, 1, 1, 3]));
        let l = cross_entropy(&mut tape, z, &grid(&[0, 2, 3]), None).unwrap();
        assert!((scalar(&tape, l) - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_prediction_has_near_zero_loss() {
        let mut tape = Tape::new();
        let z = tape.variable(Tensor::new(vec![2, 1, 1, 1], vec![50.0, -50.0]).unwrap());
        let l = cross_entropy(&mut tape, z, &grid(&[0]), None).unwrap();
        assert!(scalar(&tape, l) < 1e-40);
    }

    #[test]
    fn focal_closed_form() {
        // p_true = 0.9 with two classes: logits (ln 0.9, ln 0.1)
        let mut tape = Tape::new();
        let z = tape.variable(Tensor::new(vec![2, 1, 1, 1], vec![0.9f64.ln(), 0.1f64.ln()]).unwrap());
        let l = focal(&mut tape, z, &grid(&[0]), 2.0, 1.0, None).unwrap();
        let want = 0.01 * -(0.9f64.ln());
        assert!((scalar(&tape, l) - want).abs() < 1e-15);
        assert!((want - 1.054e-3).abs() < 1e-6);
    }

    #[test]
    fn all_ignored_is_an_error() {
        let mut tape = Tape::new();
        let z = tape.variable(Tensor::zeros(&[2, 1, 1, 2]));
        assert!(cross_entropy(&mut tape, z, &grid(&[0, 1]), Some(&[true, true])).is_err());
        let l = cross_entropy(&mut tape, z, &grid(&[0, 1]), Some(&[true, false])).unwrap();
        assert!((scalar(&tape, l) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn l1_cases() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let same = Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let l = l1(&mut tape, x, &same, 1.0).unwrap();
        assert_eq!(scalar(&tape, l), 0.0);
        let off = Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 5.0]).unwrap();
        let l = l1(&mut tape, x, &off, 1.0).unwrap();
        assert_eq!(scalar(&tape, l), 0.25);
        let l = l1(&mut tape, x, &off, 0.0).unwrap();
        assert_eq!(scalar(&tape, l), 0.0);
    }

    #[test]
    fn target_makes_argmax_the_label() {
        let base = Tensor::new(vec![2, 1, 1, 2], vec![3.0, -1.0, 0.5, 2.0]).unwrap();
        let labels = grid(&[1, 0]);
        let t = correction_target(&base, &labels, 5.0).unwrap();
        let fixed: Vec<f64> = base.data().iter().zip(t.data()).map(|(a, b)| a + b).collect();
        assert_eq!(fixed, [0.0, 5.0, 5.0, 0.0]);
    }

    #[test]
    fn mispredicted_target_skips_correct_voxels() {
        // voxel 0 predicted 0 (label 1, wrong); voxel 1 predicted 1 (label 1, right)
        let base = Tensor::new(vec![2, 1, 1, 2], vec![3.0, -1.0, 0.5, 2.0]).unwrap();
        let labels = grid(&[1, 1]);
        let dense = l1_target(&base, &labels, 5.0, L1Target::Dense).unwrap();
        let masked = l1_target(&base, &labels, 5.0, L1Target::Mispredicted).unwrap();
        assert_eq!(dense.data(), &[-3.0, 1.0, 4.5, 3.0]);
        assert_eq!(masked.data(), &[-3.0, 0.0, 4.5, 0.0]);
    }
}
