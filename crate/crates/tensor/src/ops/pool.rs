//! Non-overlapping patch averaging.

use crate::error::{dim_err, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

impl Tape {
    /// `[B,C,H,W] -> [B,C,H/p,W/p]` by averaging each `p x p` patch.
    /// Trailing rows/columns that do not fill a patch are dropped.
    pub fn patch_mean(&mut self, x: Var, p: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(dim_err("patch_mean", format!("expects [B,C,H,W], got {s:?}")));
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        if p == 0 || p > h || p > w {
            return Err(dim_err("patch_mean", format!("patch {p} does not fit in {h}x{w}")));
        }
        let (ph, pw) = (h / p, w / p);
        let inv = 1.0 / (p * p) as f64;
        let xd = self.value(x).data();
        let mut out = vec![0.0; b * c * ph * pw];
        for plane in 0..b * c {
            let src = &xd[plane * h * w..][..h * w];
            let dst = &mut out[plane * ph * pw..][..ph * pw];
            for r in 0..ph * p {
                for col in 0..pw * p {
                    dst[(r / p) * pw + col / p] += src[r * w + col];
                }
            }
            dst.iter_mut().for_each(|v| *v *= inv);
        }
        let out = Tensor::new(vec![b, c, ph, pw], out)?;
        self.record("patch_mean", &[x], out, Box::new(move |args| {
            let g = args.grad.data();
            let mut dx = vec![0.0; b * c * h * w];
            for plane in 0..b * c {
                let gs = &g[plane * ph * pw..][..ph * pw];
                let dst = &mut dx[plane * h * w..][..h * w];
                for r in 0..ph * p {
                    for col in 0..pw * p {
                        dst[r * w + col] = gs[(r / p) * pw + col / p] * inv;
                    }
                }
            }
            Ok(vec![Some(Tensor::new(vec![b, c, h, w], dx)?)])
        }))
    }
}
