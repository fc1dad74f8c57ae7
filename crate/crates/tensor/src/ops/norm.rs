//! Batch normalisation over `[B, C, ...]`.

use crate::error::{dim_err, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

/// Running statistics kept beside the learned affine parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            momentum: 0.1,
        }
    }

    /// Folds one batch in; `var` is the unbiased batch variance.
    pub fn update(&mut self, batch: &BatchStats) {
        let m = self.momentum;
        for c in 0..self.mean.len() {
            self.mean[c] = (1.0 - m) * self.mean[c] + m * batch.mean[c];
            self.var[c] = (1.0 - m) * self.var[c] + m * batch.unbiased_var[c];
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub unbiased_var: Vec<f64>,
}

impl Tape {
    /// Normalises per channel (axis 1). In `Train` mode the batch statistics
    /// are used and returned; `Eval` mode reads `running`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        mode: NormMode,
        running: &RunningStats,
    ) -> Result<(Var, Option<BatchStats>)> {
        let vx = self.value(x);
        let shape = vx.shape().to_vec();
        if shape.len() < 2 {
            return Err(dim_err("batch_norm", format!("needs [B, C, ...], got {shape:?}")));
        }
        let (b, c) = (shape[0], shape[1]);
        let spatial: usize = shape[2..].iter().product();
        let n = b * spatial;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || running.mean.len() != c {
            return Err(dim_err("batch_norm", format!("affine/statistics must have {c} channels")));
        }
        if mode == NormMode::Train && n < 2 {
            return Err(dim_err("batch_norm", format!("train mode needs >= 2 values per channel, got {n}")));
        }
        let xd = vx.data();
        let at = move |bi: usize, ci: usize| (bi * c + ci) * spatial;

        let (mean, var) = match mode {
            NormMode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ci in 0..c {
                    let mut s = 0.0;
                    for bi in 0..b {
                        s += xd[at(bi, ci)..][..spatial].iter().sum::<f64>();
                    }
                    let mu = s / n as f64;
                    let mut ss = 0.0;
                    for bi in 0..b {
                        ss += xd[at(bi, ci)..][..spatial].iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
                    }
                    mean[ci] = mu;
                    var[ci] = ss / n as f64;
                }
                (mean, var)
            }
            NormMode::Eval => (running.mean.clone(), running.var.clone()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, bt) = (self.value(gamma).data().to_vec(), self.value(beta).data().to_vec());
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for bi in 0..b {
            for ci in 0..c {
                let o = at(bi, ci);
                for i in o..o + spatial {
                    xhat[i] = (xd[i] - mean[ci]) * inv_std[ci];
                    out[i] = g[ci] * xhat[i] + bt[ci];
                }
            }
        }
        let stats = (mode == NormMode::Train).then(|| BatchStats {
            unbiased_var: var.iter().map(|v| v * n as f64 / (n as f64 - 1.0)).collect(),
            mean: mean.clone(),
        });
        let out = Tensor::new(shape.clone(), out)?;
        let y = self.record("batch_norm", &[x, gamma, beta], out, Box::new(move |args| {
            let dy = args.grad.data();
            let g = args.inputs[1].data();
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            let mut dx = vec![0.0; dy.len()];
            for ci in 0..c {
                let (mut sum_dy, mut sum_dy_xhat) = (0.0, 0.0);
                for bi in 0..b {
                    let o = at(bi, ci);
                    for i in o..o + spatial {
                        sum_dy += dy[i];
                        sum_dy_xhat += dy[i] * xhat[i];
                    }
                }
                dgamma[ci] = sum_dy_xhat;
                dbeta[ci] = sum_dy;
                if !args.needs[0] {
                    continue;
                }
                let k = g[ci] * inv_std[ci];
                for bi in 0..b {
                    let o = at(bi, ci);
                    for i in o..o + spatial {
                        dx[i] = match mode {
                            NormMode::Eval => k * dy[i],
                            NormMode::Train => {
                                k * (dy[i] - sum_dy / n as f64 - xhat[i] * sum_dy_xhat / n as f64)
                            }
                        };
                    }
                }
            }
            Ok(vec![
                args.needs[0].then(|| Tensor::new(shape.clone(), dx)).transpose()?,
                Some(Tensor::new(vec![c], dgamma)?),
                Some(Tensor::new(vec![c], dbeta)?),
            ])
        }))?;
        Ok((y, stats))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bn(x: Tensor, g: &[f64], b: &[f64], eps: f64) -> Tensor {
        let c = g.len();
        let mut tape = Tape::new();
        let x = tape.constant(x);
        let g = tape.constant(Tensor::new(vec![c], g.to_vec()).unwrap());
        let b = tape.constant(Tensor::new(vec![c], b.to_vec()).unwrap());
        let (y, _) = tape.batch_norm(x, g, b, eps, NormMode::Train, &RunningStats::new(c)).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn hand_normalised_channel() {
        let y = bn(Tensor::new(vec![2, 1], vec![1.0, 3.0]).unwrap(), &[2.0], &[1.0], 1e-12);
        assert!((y.data()[0] + 1.0).abs() < 1e-9);
        assert!((y.data()[1] - 3.0).abs() < 1e-9);
    }

    #[test]
    fn constant_channel_goes_to_zero() {
        let y = bn(Tensor::full(&[3, 1, 2], 4.2), &[1.0], &[0.0], 1e-5);
        assert!(y.data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn standardised_input_passes_through() {
        let x = Tensor::new(vec![4, 1], vec![-1.0, 1.0, -1.0, 1.0]).unwrap();
        let y = bn(x.clone(), &[1.0], &[0.0], 1e-12);
        assert!(y.max_abs_diff(&x) < 1e-9);
    }

    #[test]
    fn train_mode_moments() {
        let x = Tensor::from_fn(&[3, 2, 5], |i| ((i * 37) % 11) as f64 * 0.7 - 1.3);
        let y = bn(x, &[1.0, 1.0], &[0.0, 0.0], 1e-10);
        for c in 0..2 {
            let vals: Vec<f64> = (0..3).flat_map(|b| (0..5).map(move |s| (b, s))).map(|(b, s)| y.get(&[b, c, s])).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-6 && (var - 1.0).abs() < 1e-6, "channel {c}: {mean} {var}");
        }
    }

    #[test]
    fn train_mode_needs_two_values() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 1]));
        let g = tape.constant(Tensor::full(&[1], 1.0));
        let b = tape.constant(Tensor::zeros(&[1]));
        assert!(tape.batch_norm(x, g, b, 1e-5, NormMode::Train, &RunningStats::new(1)).is_err());
        assert!(tape.batch_norm(x, g, b, 1e-5, NormMode::Eval, &RunningStats::new(1)).is_ok());
    }
}
