//! 2D/3D convolution and 3D transposed convolution.
//!
//! Everything runs through one 5-D kernel set on `[B, C, H, W, D]` inputs
//! with `[Cout, Cin, kh, kw, kd]` weights. `conv2d` is the `D = 1` case and
//! the transposed convolution forward is exactly the input-gradient of
//! `conv3d`, so the two stay adjoint by construction. The kernels lower each
//! batch item to an im2col matrix and one GEMM; the direct loop versions
//! are kept as a reference.

use crate::error::{dim_err, Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dOpts {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl Conv3dOpts {
    pub fn uniform(stride: usize, padding: usize) -> Self {
        Self {
            stride: [stride; 3],
            padding: [padding; 3],
        }
    }
}

impl Default for Conv3dOpts {
    fn default() -> Self {
        Self::uniform(1, 1)
    }
}

const AXES: [&str; 3] = ["H", "W", "D"];

fn check_5d(op: &'static str, what: &str, t: &Tensor) -> Result<[usize; 5]> {
    <[usize; 5]>::try_from(t.shape()).map_err(|_| dim_err(op, format!("{what} must be rank 5, got {:?}", t.shape())))
}

fn check_opts(op: &'static str, opts: &Conv3dOpts) -> Result<()> {
    if opts.stride.contains(&0) {
        return Err(TensorError::InvalidArgument(format!("{op}: stride must be >= 1")));
    }
    Ok(())
}

fn conv_out_shape(op: &'static str, x: [usize; 5], k: [usize; 5], opts: &Conv3dOpts) -> Result<[usize; 5]> {
    if x[1] != k[1] {
        return Err(dim_err(op, format!("axis C: input has {} channels, kernel expects {}", x[1], k[1])));
    }
    let mut out = [x[0], k[0], 0, 0, 0];
    for a in 0..3 {
        let padded = x[2 + a] + 2 * opts.padding[a];
        if k[2 + a] > padded || x[2 + a] == 0 {
            return Err(dim_err(
                op,
                format!("axis {}: kernel {} exceeds padded input {}", AXES[a], k[2 + a], padded),
            ));
        }
        out[2 + a] = (padded - k[2 + a]) / opts.stride[a] + 1;
    }
    Ok(out)
}

/// Output positions `o` in `[lo, hi)` for which `o*s + koff - p` lands in `[0, len)`.
#[inline]
fn valid(out_len: usize, in_len: usize, s: usize, koff: usize, p: usize) -> (usize, usize) {
    let lo = if p > koff { (p - koff).div_ceil(s) } else { 0 };
    let hi = if in_len + p > koff {
        out_len.min((in_len + p - koff).div_ceil(s))
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Visits every (input offset, output offset) pair touched by one kernel tap
/// for a single channel plane. `f(in_off, out_off, run)` receives contiguous
/// runs along the innermost axis when its stride is one.
#[inline]
fn for_each_tap(
    ins: [usize; 3],
    outs: [usize; 3],
    koff: [usize; 3],
    opts: &Conv3dOpts,
    mut f: impl FnMut(usize, usize, usize, usize),
) {
    let [s0, s1, s2] = opts.stride;
    let [p0, p1, p2] = opts.padding;
    let (h_lo, h_hi) = valid(outs[0], ins[0], s0, koff[0], p0);
    let (w_lo, w_hi) = valid(outs[1], ins[1], s1, koff[1], p1);
    let (d_lo, d_hi) = valid(outs[2], ins[2], s2, koff[2], p2);
    if d_lo >= d_hi {
        return;
    }
    for oh in h_lo..h_hi {
        let ih = oh * s0 + koff[0] - p0;
        for ow in w_lo..w_hi {
            let iw = ow * s1 + koff[1] - p1;
            let out_row = (oh * outs[1] + ow) * outs[2];
            let in_row = (ih * ins[1] + iw) * ins[2];
            let id0 = d_lo * s2 + koff[2] - p2;
            f(in_row + id0, out_row + d_lo, d_hi - d_lo, s2);
        }
    }
}

/// `c = a * b (+ c when accumulate)` on row-major buffers with explicit
/// strides for `a` and `b`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_s: (usize, usize), b: &[f64], b_s: (usize, usize), c: &mut [f64], accumulate: bool) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(0.0);
        }
        return;
    }
    if m.min(n) <= SKINNY {
        return gemm_skinny(m, k, n, a, a_s, b, b_s, c, accumulate);
    }
    // SAFETY: the strides describe in-bounds m x k, k x n and m x n views of
    // the given slices, which the callers size exactly.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_s.0 as isize,
            a_s.1 as isize,
            b.as_ptr(),
            b_s.0 as isize,
            b_s.1 as isize,
            if accumulate { 1.0 } else { 0.0 },
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Below this many rows or columns a packed GEMM spends more time copying
/// than multiplying.
const SKINNY: usize = 8;

/// Row-axpy (`b` rows contiguous) or dot-product (`b` columns contiguous)
/// form of [`gemm`] with a fixed summation order.
#[allow(clippy::too_many_arguments)]
fn gemm_skinny(m: usize, k: usize, n: usize, a: &[f64], a_s: (usize, usize), b: &[f64], b_s: (usize, usize), c: &mut [f64], accumulate: bool) {
    if !accumulate {
        c[..m * n].fill(0.0);
    }
    if b_s.1 == 1 {
        for i in 0..m {
            let ci = &mut c[i * n..][..n];
            for p in 0..k {
                let w = a[i * a_s.0 + p * a_s.1];
                if w != 0.0 {
                    let bp = &b[p * b_s.0..][..n];
                    ci.iter_mut().zip(bp).for_each(|(c, b)| *c += w * b);
                }
            }
        }
    } else {
        debug_assert_eq!((a_s.1, b_s.0), (1, 1));
        for i in 0..m {
            let ai = &a[i * a_s.0..][..k];
            for j in 0..n {
                c[i * n + j] += dot(ai, &b[j * b_s.1..][..k]);
            }
        }
    }
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    let mut lanes = [0.0f64; 4];
    let (xc, yc) = (x.chunks_exact(4), y.chunks_exact(4));
    let (xr, yr) = (xc.remainder(), yc.remainder());
    for (u, v) in xc.zip(yc) {
        for l in 0..4 {
            lanes[l] += u[l] * v[l];
        }
    }
    let tail: f64 = xr.iter().zip(yr).map(|(u, v)| u * v).sum();
    (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]) + tail
}

struct Lowering {
    xs: [usize; 5],
    ks: [usize; 5],
    os: [usize; 5],
    opts: Conv3dOpts,
}

impl Lowering {
    fn taps(&self) -> usize {
        self.ks[2] * self.ks[3] * self.ks[4]
    }

    fn rows(&self) -> usize {
        self.ks[1] * self.taps()
    }

    fn in_plane(&self) -> usize {
        self.xs[2] * self.xs[3] * self.xs[4]
    }

    fn out_plane(&self) -> usize {
        self.os[2] * self.os[3] * self.os[4]
    }

    fn koff(&self, t: usize) -> [usize; 3] {
        let ks = self.ks;
        [t / (ks[3] * ks[4]), (t / ks[4]) % ks[3], t % ks[4]]
    }

    /// `col[(ci, t), o] = x[ci, tap(o, t)]`; padding taps keep the zeros
    /// `col` must already hold there.
    fn im2col(&self, x: &[f64], col: &mut [f64]) {
        let (taps, np, ip) = (self.taps(), self.out_plane(), self.in_plane());
        let (ins, outs) = ([self.xs[2], self.xs[3], self.xs[4]], [self.os[2], self.os[3], self.os[4]]);
        for ci in 0..self.ks[1] {
            let xi = &x[ci * ip..][..ip];
            for t in 0..taps {
                let row = &mut col[(ci * taps + t) * np..][..np];
                for_each_tap(ins, outs, self.koff(t), &self.opts, |i, o, n, s| {
                    if s == 1 {
                        row[o..o + n].copy_from_slice(&xi[i..i + n]);
                    } else {
                        for j in 0..n {
                            row[o + j] = xi[i + j * s];
                        }
                    }
                });
            }
        }
    }

    /// Adjoint of [`Lowering::im2col`]: scatter-adds `col` into `x`.
    fn col2im(&self, col: &[f64], x: &mut [f64]) {
        let (taps, np, ip) = (self.taps(), self.out_plane(), self.in_plane());
        let (ins, outs) = ([self.xs[2], self.xs[3], self.xs[4]], [self.os[2], self.os[3], self.os[4]]);
        for ci in 0..self.ks[1] {
            let xi = &mut x[ci * ip..][..ip];
            for t in 0..taps {
                let row = &col[(ci * taps + t) * np..][..np];
                for_each_tap(ins, outs, self.koff(t), &self.opts, |i, o, n, s| {
                    if s == 1 {
                        xi[i..i + n].iter_mut().zip(&row[o..o + n]).for_each(|(x, c)| *x += c);
                    } else {
                        for j in 0..n {
                            xi[i + j * s] += row[o + j];
                        }
                    }
                });
            }
        }
    }
}

/// Forward convolution on `[B,Cin,H,W,D]` with `[Cout,Cin,kh,kw,kd]`.
pub fn conv3d_forward(x: &Tensor, k: &Tensor, opts: &Conv3dOpts) -> Result<Tensor> {
    check_opts("conv3d", opts)?;
    let xs = check_5d("conv3d", "input", x)?;
    let ks = check_5d("conv3d", "kernel", k)?;
    let os = conv_out_shape("conv3d", xs, ks, opts)?;
    let low = Lowering { xs, ks, os, opts: *opts };
    let (rows, np, ip) = (low.rows(), low.out_plane(), low.in_plane());
    let mut y = Tensor::zeros(&os);
    let mut col = vec![0.0; rows * np];
    let yd = y.data_mut();
    for b in 0..xs[0] {
        if b > 0 {
            col.fill(0.0);
        }
        low.im2col(&x.data()[b * xs[1] * ip..][..xs[1] * ip], &mut col);
        gemm(ks[0], rows, np, k.data(), (rows, 1), &col, (np, 1), &mut yd[b * os[1] * np..][..os[1] * np], false);
    }
    Ok(y)
}

/// Adjoint of [`conv3d_forward`] with respect to its input.
pub fn conv3d_backward_input(dy: &Tensor, k: &Tensor, in_spatial: [usize; 3], opts: &Conv3dOpts) -> Result<Tensor> {
    check_opts("conv3d_backward_input", opts)?;
    let os = check_5d("conv3d_backward_input", "gradient", dy)?;
    let ks = check_5d("conv3d_backward_input", "kernel", k)?;
    if os[1] != ks[0] {
        return Err(dim_err(
            "conv3d_backward_input",
            format!("axis C: {} channels against kernel output {}", os[1], ks[0]),
        ));
    }
    let xs = [os[0], ks[1], in_spatial[0], in_spatial[1], in_spatial[2]];
    let expect = conv_out_shape("conv3d_backward_input", xs, ks, opts)?;
    if expect[2..] != os[2..] {
        return Err(dim_err(
            "conv3d_backward_input",
            format!("spatial {:?} does not map to {:?}", in_spatial, &os[2..]),
        ));
    }
    let low = Lowering { xs, ks, os, opts: *opts };
    let (rows, np, ip) = (low.rows(), low.out_plane(), low.in_plane());
    let mut dx = Tensor::zeros(&xs);
    let mut col = vec![0.0; rows * np];
    let dxd = dx.data_mut();
    for b in 0..xs[0] {
        gemm(rows, ks[0], np, k.data(), (1, rows), &dy.data()[b * os[1] * np..][..os[1] * np], (np, 1), &mut col, false);
        low.col2im(&col, &mut dxd[b * xs[1] * ip..][..xs[1] * ip]);
    }
    Ok(dx)
}

/// Gradient of [`conv3d_forward`] with respect to its kernel.
pub fn conv3d_backward_kernel(dy: &Tensor, x: &Tensor, k_shape: [usize; 5], opts: &Conv3dOpts) -> Result<Tensor> {
    check_opts("conv3d_backward_kernel", opts)?;
    let os = check_5d("conv3d_backward_kernel", "gradient", dy)?;
    let xs = check_5d("conv3d_backward_kernel", "input", x)?;
    let ks = k_shape;
    let expect = conv_out_shape("conv3d_backward_kernel", xs, ks, opts)?;
    if expect != os {
        return Err(TensorError::ShapeMismatch {
            op: "conv3d_backward_kernel",
            expected: expect.to_vec(),
            got: os.to_vec(),
        });
    }
    let low = Lowering { xs, ks, os, opts: *opts };
    let (rows, np, ip) = (low.rows(), low.out_plane(), low.in_plane());
    let mut dk = Tensor::zeros(&ks);
    let mut col = vec![0.0; rows * np];
    for b in 0..xs[0] {
        if b > 0 {
            col.fill(0.0);
        }
        low.im2col(&x.data()[b * xs[1] * ip..][..xs[1] * ip], &mut col);
        gemm(ks[0], np, rows, &dy.data()[b * os[1] * np..][..os[1] * np], (np, 1), &col, (1, np), dk.data_mut(), true);
    }
    Ok(dk)
}

/// Direct-loop forward convolution on `[B,Cin,H,W,D]` with `[Cout,Cin,kh,kw,kd]`.
pub fn conv3d_forward_direct(x: &Tensor, k: &Tensor, opts: &Conv3dOpts) -> Result<Tensor> {
    check_opts("conv3d", opts)?;
    let xs = check_5d("conv3d", "input", x)?;
    let ks = check_5d("conv3d", "kernel", k)?;
    let os = conv_out_shape("conv3d", xs, ks, opts)?;
    let mut y = Tensor::zeros(&os);
    let in_plane = xs[2] * xs[3] * xs[4];
    let out_plane = os[2] * os[3] * os[4];
    let ktaps = ks[2] * ks[3] * ks[4];
    let (xd, kd) = (x.data(), k.data());
    let yd = y.data_mut();
    for b in 0..xs[0] {
        for co in 0..ks[0] {
            let yo = &mut yd[(b * os[1] + co) * out_plane..][..out_plane];
            for ci in 0..xs[1] {
                let xi = &xd[(b * xs[1] + ci) * in_plane..][..in_plane];
                let kbase = (co * ks[1] + ci) * ktaps;
                for t in 0..ktaps {
                    let w = kd[kbase + t];
                    let koff = [t / (ks[3] * ks[4]), (t / ks[4]) % ks[3], t % ks[4]];
                    for_each_tap([xs[2], xs[3], xs[4]], [os[2], os[3], os[4]], koff, opts, |i, o, n, s| {
                        if s == 1 {
                            yo[o..o + n].iter_mut().zip(&xi[i..i + n]).for_each(|(y, x)| *y += w * x);
                        } else {
                            for j in 0..n {
                                yo[o + j] += w * xi[i + j * s];
                            }
                        }
                    });
                }
            }
        }
    }
    Ok(y)
}

/// Direct-loop adjoint of [`conv3d_forward`] with respect to its input.
pub fn conv3d_backward_input_direct(dy: &Tensor, k: &Tensor, in_spatial: [usize; 3], opts: &Conv3dOpts) -> Result<Tensor> {
    check_opts("conv3d_backward_input", opts)?;
    let os = check_5d("conv3d_backward_input", "gradient", dy)?;
    let ks = check_5d("conv3d_backward_input", "kernel", k)?;
    if os[1] != ks[0] {
        return Err(dim_err(
            "conv3d_backward_input",
            format!("axis C: {} channels against kernel output {}", os[1], ks[0]),
        ));
    }
    let xs = [os[0], ks[1], in_spatial[0], in_spatial[1], in_spatial[2]];
    let expect = conv_out_shape("conv3d_backward_input", xs, ks, opts)?;
    if expect[2..] != os[2..] {
        return Err(dim_err(
            "conv3d_backward_input",
            format!("spatial {:?} does not map to {:?}", in_spatial, &os[2..]),
        ));
    }
    let mut dx = Tensor::zeros(&xs);
    let in_plane = xs[2] * xs[3] * xs[4];
    let out_plane = os[2] * os[3] * os[4];
    let ktaps = ks[2] * ks[3] * ks[4];
    let (gd, kd) = (dy.data(), k.data());
    let dxd = dx.data_mut();
    for b in 0..xs[0] {
        for ci in 0..xs[1] {
            let xi = &mut dxd[(b * xs[1] + ci) * in_plane..][..in_plane];
            for co in 0..ks[0] {
                let go = &gd[(b * os[1] + co) * out_plane..][..out_plane];
                let kbase = (co * ks[1] + ci) * ktaps;
                for t in 0..ktaps {
                    let w = kd[kbase + t];
                    let koff = [t / (ks[3] * ks[4]), (t / ks[4]) % ks[3], t % ks[4]];
                    for_each_tap([xs[2], xs[3], xs[4]], [os[2], os[3], os[4]], koff, opts, |i, o, n, s| {
                        if s == 1 {
                            xi[i..i + n].iter_mut().zip(&go[o..o + n]).for_each(|(x, g)| *x += w * g);
                        } else {
                            for j in 0..n {
                                xi[i + j * s] += w * go[o + j];
                            }
                        }
                    });
                }
            }
        }
    }
    Ok(dx)
}

/// Direct-loop gradient of [`conv3d_forward`] with respect to its kernel.
pub fn conv3d_backward_kernel_direct(dy: &Tensor, x: &Tensor, k_shape: [usize; 5], opts: &Conv3dOpts) -> Result<Tensor> {
    check_opts("conv3d_backward_kernel", opts)?;
    let os = check_5d("conv3d_backward_kernel", "gradient", dy)?;
    let xs = check_5d("conv3d_backward_kernel", "input", x)?;
    let ks = k_shape;
    let expect = conv_out_shape("conv3d_backward_kernel", xs, ks, opts)?;
    if expect != os {
        return Err(TensorError::ShapeMismatch {
            op: "conv3d_backward_kernel",
            expected: expect.to_vec(),
            got: os.to_vec(),
        });
    }
    let mut dk = Tensor::zeros(&ks);
    let in_plane = xs[2] * xs[3] * xs[4];
    let out_plane = os[2] * os[3] * os[4];
    let ktaps = ks[2] * ks[3] * ks[4];
    let (gd, xd) = (dy.data(), x.data());
    let dkd = dk.data_mut();
    for b in 0..xs[0] {
        for co in 0..ks[0] {
            let go = &gd[(b * os[1] + co) * out_plane..][..out_plane];
            for ci in 0..xs[1] {
                let xi = &xd[(b * xs[1] + ci) * in_plane..][..in_plane];
                let kbase = (co * ks[1] + ci) * ktaps;
                for t in 0..ktaps {
                    let koff = [t / (ks[3] * ks[4]), (t / ks[4]) % ks[3], t % ks[4]];
                    let mut acc = 0.0;
                    for_each_tap([xs[2], xs[3], xs[4]], [os[2], os[3], os[4]], koff, opts, |i, o, n, s| {
                        if s == 1 {
                            acc += go[o..o + n].iter().zip(&xi[i..i + n]).map(|(g, x)| g * x).sum::<f64>();
                        } else {
                            for j in 0..n {
                                acc += go[o + j] * xi[i + j * s];
                            }
                        }
                    });
                    dkd[kbase + t] += acc;
                }
            }
        }
    }
    Ok(dk)
}

/// Forward of the transposed convolution: `[B,Cin,..]` with kernel
/// `[Cin,Cout,k..]` gives spatial size `(in-1)*stride - 2*pad + k`.
pub fn conv_transpose3d_forward(x: &Tensor, k: &Tensor, opts: &Conv3dOpts) -> Result<Tensor> {
    check_opts("conv_transpose3d", opts)?;
    let xs = check_5d("conv_transpose3d", "input", x)?;
    let ks = check_5d("conv_transpose3d", "kernel", k)?;
    if xs[1] != ks[0] {
        return Err(dim_err(
            "conv_transpose3d",
            format!("axis C: input has {} channels, kernel expects {}", xs[1], ks[0]),
        ));
    }
    let mut out = [0usize; 3];
    for a in 0..3 {
        let full = (xs[2 + a].max(1) - 1) * opts.stride[a] + ks[2 + a];
        if xs[2 + a] == 0 || full <= 2 * opts.padding[a] {
            return Err(dim_err(
                "conv_transpose3d",
                format!("axis {}: padding {} leaves no output", AXES[a], opts.padding[a]),
            ));
        }
        out[a] = full - 2 * opts.padding[a];
    }
    conv3d_backward_input(x, k, out, opts)
}

impl Tape {
    /// `[B,Cin,H,W] * [Cout,Cin,kh,kw]` with square stride and padding.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, padding: usize) -> Result<Var> {
        let (xs, kshape) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        if xs.len() != 4 || kshape.len() != 4 {
            return Err(dim_err("conv2d", format!("expects rank-4 input and kernel, got {xs:?} and {kshape:?}")));
        }
        // H, W go in the two innermost slots so rows stay contiguous
        let x5 = self.reshape(x, &[xs[0], xs[1], 1, xs[2], xs[3]])?;
        let k5 = self.reshape(k, &[kshape[0], kshape[1], 1, kshape[2], kshape[3]])?;
        let opts = Conv3dOpts {
            stride: [1, stride, stride],
            padding: [0, padding, padding],
        };
        let y5 = self.conv3d(x5, k5, opts).map_err(|e| rename(e, "conv2d"))?;
        let ys = self.shape(y5).to_vec();
        self.reshape(y5, &[ys[0], ys[1], ys[3], ys[4]])
    }

    pub fn conv3d(&mut self, x: Var, k: Var, opts: Conv3dOpts) -> Result<Var> {
        let out = conv3d_forward(self.value(x), self.value(k), &opts)?;
        self.record("conv3d", &[x, k], out, Box::new(move |args| {
            let (x, k) = (args.inputs[0], args.inputs[1]);
            let xs = x.shape();
            let gx = if args.needs[0] {
                Some(conv3d_backward_input(args.grad, k, [xs[2], xs[3], xs[4]], &opts)?)
            } else {
                None
            };
            let gk = if args.needs[1] {
                let ks = <[usize; 5]>::try_from(k.shape()).expect("rank 5");
                Some(conv3d_backward_kernel(args.grad, x, ks, &opts)?)
            } else {
                None
            };
            Ok(vec![gx, gk])
        }))
    }

    pub fn conv_transpose3d(&mut self, x: Var, k: Var, opts: Conv3dOpts) -> Result<Var> {
        let out = conv_transpose3d_forward(self.value(x), self.value(k), &opts)?;
        self.record("conv_transpose3d", &[x, k], out, Box::new(move |args| {
            let (x, k) = (args.inputs[0], args.inputs[1]);
            let gx = if args.needs[0] {
                Some(conv3d_forward(args.grad, k, &opts)?)
            } else {
                None
            };
            let gk = if args.needs[1] {
                let ks = <[usize; 5]>::try_from(k.shape()).expect("rank 5");
                // roles swap: the transposed input plays the conv output
                Some(conv3d_backward_kernel(x, args.grad, ks, &opts)?)
            } else {
                None
            };
            Ok(vec![gx, gk])
        }))
    }
}

fn rename(e: TensorError, op: &'static str) -> TensorError {
    match e {
        TensorError::Dimension { msg, .. } => TensorError::Dimension {
            op,
            msg: msg.replace("axis W", "axis H").replace("axis D", "axis W"),
        },
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[1., 2., 3., 4.]));
        let k = tape.constant(t(&[1, 1, 1, 1], &[1.]));
        let y = tape.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(tape.value(y), &t(&[1, 1, 2, 2], &[1., 2., 3., 4.]));
    }

    #[test]
    fn conv2d_ones_kernel_sums_window() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[1., 2., 3., 4.]));
        let k = tape.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
        let y = tape.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(tape.value(y), &t(&[1, 1, 1, 1], &[10.]));
    }

    #[test]
    fn conv2d_zero_kernel_gives_zeros() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3, 5, 4], |i| i as f64 * 0.3 - 2.0));
        let k = tape.constant(Tensor::zeros(&[2, 3, 3, 3]));
        let y = tape.conv2d(x, k, 2, 1).unwrap();
        assert_eq!(tape.shape(y), &[2, 2, 3, 2]);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv2d_shape_formula_and_errors() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 7, 9]));
        let k = tape.constant(Tensor::zeros(&[4, 2, 3, 2]));
        let y = tape.conv2d(x, k, 2, 1).unwrap();
        // (7+2-3)/2+1 = 4, (9+2-2)/2+1 = 5
        assert_eq!(tape.shape(y), &[1, 4, 4, 5]);

        let bad = tape.constant(Tensor::zeros(&[4, 3, 3, 3]));
        let err = tape.conv2d(x, bad, 1, 1).unwrap_err();
        assert!(err.to_string().contains("axis C"), "{err}");
        let huge = tape.constant(Tensor::zeros(&[1, 2, 10, 1]));
        let err = tape.conv2d(x, huge, 1, 0).unwrap_err();
        assert!(err.to_string().contains("axis H"), "{err}");
    }

    #[test]
    fn conv3d_center_kernel_is_identity() {
        let x = Tensor::from_fn(&[1, 1, 3, 4, 2], |i| (i as f64).sin());
        let mut k = Tensor::zeros(&[1, 1, 3, 3, 3]);
        k.data_mut()[13] = 1.0;
        let y = conv3d_forward(&x, &k, &Conv3dOpts::default()).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv3d_ones_kernel_spreads_one_hot_to_clipped_neighbourhood() {
        let dims = [4usize, 3, 2];
        let mut x = Tensor::zeros(&[1, 1, 4, 3, 2]);
        let hot = [0usize, 1, 1];
        x.data_mut()[(hot[0] * 3 + hot[1]) * 2 + hot[2]] = 1.0;
        let k = Tensor::full(&[1, 1, 3, 3, 3], 1.0);
        let y = conv3d_forward(&x, &k, &Conv3dOpts::default()).unwrap();
        // enumerate the expected 27-neighbourhood directly
        for h in 0..dims[0] {
            for w in 0..dims[1] {
                for d in 0..dims[2] {
                    let near = [h, w, d].iter().zip(hot).all(|(&a, b)| a.abs_diff(b) <= 1);
                    let want = if near { 1.0 } else { 0.0 };
                    assert_eq!(y.get(&[0, 0, h, w, d]), want, "at {h},{w},{d}");
                }
            }
        }
    }

    #[test]
    fn conv_transpose3d_identity_and_zero() {
        let x = Tensor::from_fn(&[1, 2, 2, 3, 2], |i| i as f64);
        let mut k = Tensor::zeros(&[2, 2, 1, 1, 1]);
        k.data_mut()[0] = 1.0;
        k.data_mut()[3] = 1.0;
        let y = conv_transpose3d_forward(&x, &k, &Conv3dOpts::uniform(1, 0)).unwrap();
        assert_eq!(y, x);
        let z = conv_transpose3d_forward(&Tensor::zeros(&[1, 2, 2, 2, 2]), &Tensor::full(&[2, 3, 2, 2, 2], 0.7), &Conv3dOpts::uniform(2, 0)).unwrap();
        assert_eq!(z.shape(), &[1, 3, 4, 4, 4]);
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_transpose3d_output_size() {
        let x = Tensor::zeros(&[1, 3, 8, 8, 1]);
        let k = Tensor::zeros(&[3, 5, 4, 4, 4]);
        let opts = Conv3dOpts {
            stride: [2, 2, 4],
            padding: [1, 1, 0],
        };
        let y = conv_transpose3d_forward(&x, &k, &opts).unwrap();
        assert_eq!(y.shape(), &[1, 5, 16, 16, 4]);
    }

    #[test]
    fn zero_stride_rejected() {
        let x = Tensor::zeros(&[1, 1, 2, 2, 2]);
        let k = Tensor::zeros(&[1, 1, 1, 1, 1]);
        assert!(conv3d_forward(&x, &k, &Conv3dOpts::uniform(0, 0)).is_err());
    }
}
