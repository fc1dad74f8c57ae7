//! The correction plug-in.
//!
//! Current static features, the static features of the last `L` keyframes
//! and the motion features of the intervals between them are tokenised by
//! one shared 1x1 projection plus `p x p` patch averaging. Two cross-
//! attention streams use history and motion tokens as queries against the
//! current tokens as keys and values; the projected current keys form the
//! third stream. Each stream is decoded to a `[C, H, W, D]` correction by
//! two transposed 3-D convolutions and the three are merged by a 3x3x3
//! convolution (late aggregation). The result is added to the frozen base
//! logits.

use std::collections::VecDeque;

use occ_tensor::ops::norm::{BatchStats, RunningStats};
use occ_tensor::{softmax, Conv3dOpts, NormMode, ParamId, ParamStore, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::base::{BaseNet, BaseShape};
use crate::error::{CoreError, Result};
use crate::motion::{interval_motion, PairPolicy};
use crate::nn::{zero_param, ConvParams, Init};

pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    /// Concatenate the streams in token space and decode once.
    Early,
    /// Decode every stream separately and merge the corrections.
    #[default]
    Late,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamMask {
    pub sta: bool,
    pub cur: bool,
    pub mot: bool,
}

impl Default for StreamMask {
    fn default() -> Self {
        Self {
            sta: true,
            cur: true,
            mot: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MotionConfig {
    pub pair_policy: PairPolicy,
    pub downsample: usize,
}

impl Default for MotionConfig {
    fn default() -> Self {
        Self {
            pair_policy: PairPolicy::Consecutive,
            downsample: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PluginConfig {
    /// Temporal window length.
    #[serde(rename = "L")]
    pub window: usize,
    pub p: usize,
    pub d_token: usize,
    pub d_grad: usize,
    pub heads: usize,
    pub aggregation: Aggregation,
    pub streams: StreamMask,
    pub motion: MotionConfig,
    /// Current tokens query the history and motion tokens instead of the
    /// other way round.
    pub swap_qkv: bool,
    /// One key/value projection of the current tokens serves both streams.
    pub shared_kv: bool,
    /// Adds the projected queries to each attention output.
    pub query_residual: bool,
    pub decoder_channels: usize,
}

impl Default for PluginConfig {
    fn default() -> Self {
        Self {
            window: 1,
            p: 4,
            d_token: 16,
            d_grad: 16,
            heads: 2,
            aggregation: Aggregation::Late,
            streams: StreamMask::default(),
            motion: MotionConfig::default(),
            swap_qkv: false,
            shared_kv: true,
            query_residual: true,
            decoder_channels: 8,
        }
    }
}

impl PluginConfig {
    /// Token width 32 and 6x6 patches.
    pub fn wide_preset() -> Self {
        Self {
            p: 6,
            d_token: 32,
            d_grad: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self, shape: &BaseShape) -> Result<()> {
        let s = self.streams;
        if !(s.sta || s.cur || s.mot) {
            return Err(CoreError::Config(
                "all three streams disabled; run the base network alone instead".into(),
            ));
        }
        if self.p == 0 || shape.h % self.p != 0 || shape.w % self.p != 0 {
            return Err(CoreError::Config(format!(
                "patch size {} must divide the {}x{} feature map for the decoder to restore the grid",
                self.p, shape.h, shape.w
            )));
        }
        if self.d_token == 0 || self.d_grad == 0 || self.heads == 0 || self.d_token % self.heads != 0 {
            return Err(CoreError::Config(format!(
                "d_token {} must be a positive multiple of heads {}, d_grad {} positive",
                self.d_token, self.heads, self.d_grad
            )));
        }
        let f = self.motion.downsample;
        if f == 0 || shape.h % f != 0 || shape.w % f != 0 {
            return Err(CoreError::Config(format!("motion downsample {f} must divide {}x{}", shape.h, shape.w)));
        }
        if self.decoder_channels == 0 {
            return Err(CoreError::Config("decoder_channels must be positive".into()));
        }
        Ok(())
    }
}

/// Splits an upsampling factor into two strides, the second being the
/// largest divisor not above its square root.
pub fn split_factor(f: usize) -> (usize, usize) {
    let g = (1..=f).filter(|g| f % g == 0 && g * g <= f).max().unwrap_or(1);
    (f / g, g)
}

/// `(kernel, padding)` so that a transposed convolution with this stride
/// multiplies the size exactly by `stride`.
pub fn deconv_geometry(stride: usize) -> (usize, usize) {
    match stride {
        1 => (3, 1),
        s if s % 2 == 0 => (2 * s, s / 2),
        s => (s, 0),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenOrigin {
    CurrentStatic,
    HistoryStatic,
    Motion,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenIndex {
    pub time: usize,
    pub view: usize,
    pub row: usize,
    pub col: usize,
}

/// Tokens `[count, 1, d_token]` with the patch each came from.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSet {
    pub tokens: Tensor,
    pub origin: TokenOrigin,
    pub index: Vec<TokenIndex>,
}

impl TokenSet {
    pub fn count(&self) -> usize {
        self.tokens.shape()[0]
    }
}

/// Number of tokens for `views` maps of `h x w` with `p x p` patches and
/// `time` stacked steps.
pub fn token_count(views: usize, h: usize, w: usize, p: usize, time: usize) -> usize {
    views * (h / p) * (w / p) * time
}

/// Features `[T*V, c, h, w]` to tokens `[T*V*(h/p)*(w/p), d]`, ordered by
/// time, view, patch row, patch column.
pub fn tokenize_var(tape: &mut Tape, x: Var, weight: Var, bias: Var, p: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 {
        return Err(CoreError::Shape(format!("tokenize expects [B, c, h, w], got {s:?}")));
    }
    if p == 0 || p > s[2] || p > s[3] {
        return Err(CoreError::Config(format!("patch {p} does not fit a {}x{} map", s[2], s[3])));
    }
    let y = tape.conv2d(x, weight, 1, 0)?;
    let y = tape.add_bias(y, bias, 1)?;
    let y = tape.patch_mean(y, p)?;
    let ys = tape.shape(y).to_vec();
    let y = tape.permute(y, &[0, 2, 3, 1])?;
    Ok(tape.reshape(y, &[ys[0] * ys[2] * ys[3], ys[1]])?)
}

/// Value-level tokenisation of `[T*V, c, h, w]` features with a
/// `[d, c, 1, 1]` projection; `views` splits the leading axis.
pub fn tokenize(
    features: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    p: usize,
    views: usize,
    origin: TokenOrigin,
) -> Result<TokenSet> {
    let mut tape = Tape::new();
    let (x, w, b) = (
        tape.constant(features.clone()),
        tape.constant(weight.clone()),
        tape.constant(bias.clone()),
    );
    let t = tokenize_var(&mut tape, x, w, b, p)?;
    let tokens = tape.value(t).clone();
    let s = features.shape();
    let (ph, pw) = (s[2] / p, s[3] / p);
    if views == 0 || s[0] % views != 0 {
        return Err(CoreError::Shape(format!("{} feature maps do not split into {views} views", s[0])));
    }
    let mut index = Vec::with_capacity(tokens.shape()[0]);
    for b in 0..s[0] {
        for row in 0..ph {
            for col in 0..pw {
                index.push(TokenIndex {
                    time: b / views,
                    view: b % views,
                    row,
                    col,
                });
            }
        }
    }
    let d = tokens.shape()[1];
    Ok(TokenSet {
        tokens: tokens.reshape(&[index.len(), 1, d])?,
        origin,
        index,
    })
}

/// `softmax(O' + dO)` along the class axis.
pub fn fuse(base_logits: &Tensor, delta: &Tensor) -> Result<Tensor> {
    if base_logits.shape() != delta.shape() {
        return Err(CoreError::Shape(format!(
            "base logits {:?} vs correction {:?}",
            base_logits.shape(),
            delta.shape()
        )));
    }
    let sum = Tensor::new(
        base_logits.shape().to_vec(),
        base_logits.data().iter().zip(delta.data()).map(|(a, b)| a + b).collect(),
    )?;
    Ok(softmax(&sum, 0)?)
}

#[derive(Clone, Debug)]
struct Head {
    up1: ConvParams,
    up2: ConvParams,
    opts1: Conv3dOpts,
    opts2: Conv3dOpts,
}

impl Head {
    fn new(init: &mut Init, store: &mut ParamStore, name: &str, cin: usize, hidden: usize, cout: usize, p: usize, depth: usize) -> Self {
        let (h1, h2) = split_factor(p);
        let (d1, d2) = split_factor(depth);
        let layer = |s: [usize; 3]| {
            let g = s.map(deconv_geometry);
            (
                [g[0].0, g[1].0, g[2].0],
                Conv3dOpts {
                    stride: s,
                    padding: [g[0].1, g[1].1, g[2].1],
                },
            )
        };
        let (k1, opts1) = layer([h1, h1, d1]);
        let (k2, opts2) = layer([h2, h2, d2]);
        let up1 = ConvParams::deconv3d(init, store, &format!("{name}.0"), cin, hidden, k1, opts1.stride);
        let up2 = ConvParams::deconv3d(init, store, &format!("{name}.1"), hidden, cout, k2, opts2.stride);
        Self { up1, up2, opts1, opts2 }
    }

    fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w1 = tape.param(store, self.up1.weight);
        let y = tape.conv_transpose3d(x, w1, self.opts1)?;
        let y = self.up1.bias_on(tape, store, y)?;
        let y = tape.relu(y)?;
        let w2 = tape.param(store, self.up2.weight);
        let y = tape.conv_transpose3d(y, w2, self.opts2)?;
        self.up2.bias_on(tape, store, y)
    }
}

#[derive(Clone, Copy, Debug)]
struct MotionLayer {
    weight: ParamId,
    gamma: ParamId,
    beta: ParamId,
}

/// Stream order used for heads, constants and the aggregation input.
pub const STREAMS: [&str; 3] = ["sta", "mot", "cur"];

/// Static features and the motion stack of the interval that follows them.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowEntry {
    /// `[V, c, h, w]`
    pub statics: Tensor,
    /// `[V, slices * (C+1), h, w]`
    pub motion: Tensor,
}

/// FIFO of at most `capacity` entries, oldest first.
#[derive(Clone, Debug)]
pub struct TemporalWindow {
    capacity: usize,
    entries: VecDeque<WindowEntry>,
    previous: Option<Tensor>,
    pub evictions: usize,
}

impl TemporalWindow {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            entries: VecDeque::with_capacity(capacity + 1),
            previous: None,
            evictions: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Appends an entry, evicting the oldest beyond capacity.
    pub fn push(&mut self, entry: WindowEntry) -> Option<WindowEntry> {
        if self.capacity == 0 {
            return None;
        }
        self.entries.push_back(entry);
        if self.entries.len() > self.capacity {
            self.evictions += 1;
            self.entries.pop_front()
        } else {
            None
        }
    }

    pub fn entries(&self) -> Vec<WindowEntry> {
        self.entries.iter().cloned().collect()
    }
}

#[derive(Clone, Debug)]
pub struct Correction {
    /// `[C, H, W, D]`
    pub delta: Var,
    /// Per-stream corrections `[1, C, H, W, D]` (late aggregation), in
    /// [`STREAMS`] order; `None` where a learned constant stood in.
    pub streams: [Option<Var>; 3],
    pub batch_stats: Vec<BatchStats>,
}

/// Attention outputs and the current-stream tokens, each `[n, d]`.
#[derive(Clone, Copy, Debug)]
pub struct StreamTokens {
    pub f_sta: Option<Var>,
    pub f_mot: Option<Var>,
    pub f_cur: Var,
}

#[derive(Clone, Debug)]
pub struct OccLinker {
    pub cfg: PluginConfig,
    pub shape: BaseShape,
    pub substeps: usize,
    pub store: ParamStore,
    pub running: Vec<RunningStats>,
    motion: Vec<MotionLayer>,
    upsample: Option<Tensor>,
    tokenizer: ConvParams,
    wq: [ParamId; 2],
    wk: [ParamId; 2],
    wv: [ParamId; 2],
    heads: Vec<Head>,
    missing: [ParamId; 3],
    aggregate: ConvParams,
}

pub const PLUGIN_PREFIX: &str = "occlinker.";

impl OccLinker {
    pub fn new(cfg: PluginConfig, shape: BaseShape, substeps: usize, seed: u64) -> Result<Self> {
        cfg.validate(&shape)?;
        let mut store = ParamStore::new();
        let mut init = Init::new(seed, 20);
        let (c, d) = (shape.channels, cfg.d_token);
        let slices = cfg.motion.pair_policy.slices(substeps);
        if slices == 0 {
            return Err(CoreError::Config(format!("{substeps} substeps give no frame differences")));
        }
        let mut motion = Vec::new();
        let mut cin = slices * shape.in_channels;
        for l in 0..3 {
            let name = format!("occlinker.motion_encoder.{l}");
            let weight = init.uniform(&mut store, &format!("{name}.weight"), &[c, cin, 3, 3], cin * 9);
            let gamma = init.constant(&mut store, &format!("{name}.bn_gamma"), &[c], 1.0);
            let beta = init.constant(&mut store, &format!("{name}.bn_beta"), &[c], 0.0);
            motion.push(MotionLayer { weight, gamma, beta });
            cin = c;
        }
        let f = cfg.motion.downsample;
        let upsample = (f > 1).then(|| {
            Tensor::from_fn(&[c, c, 1, f, f], |i| if i / (f * f) % (c + 1) == 0 { 1.0 } else { 0.0 })
        });
        let tokenizer = ConvParams::conv2d(&mut init, &mut store, "occlinker.tokenizer", c, d, 1, true);
        let mut mat = |name: &str| init.uniform(&mut store, name, &[d, d], d);
        let wq = [mat("occlinker.W_sta_Q"), mat("occlinker.W_mot_Q")];
        let wk_cur = mat("occlinker.W_cur_K");
        let wv_cur = mat("occlinker.W_cur_V");
        let (wk, wv) = if cfg.shared_kv {
            ([wk_cur, wk_cur], [wv_cur, wv_cur])
        } else {
            ([wk_cur, mat("occlinker.W_mot_K")], [wv_cur, mat("occlinker.W_mot_V")])
        };
        let (classes, hidden) = (shape.classes, cfg.decoder_channels);
        let (heads, missing, aggregate) = match cfg.aggregation {
            Aggregation::Late => {
                let heads = STREAMS
                    .iter()
                    .map(|s| {
                        Head::new(&mut init, &mut store, &format!("occlinker.decoder.{s}"), d, hidden, classes, cfg.p, shape.depth)
                    })
                    .collect();
                let missing = STREAMS.map(|s| init.constant(&mut store, &format!("occlinker.missing.{s}"), &[classes], 0.0));
                let agg = ConvParams::conv3d(&mut init, &mut store, "occlinker.aggregate", 3 * classes, classes, [3, 3, 3]);
                (heads, missing, agg)
            }
            Aggregation::Early => {
                let heads = vec![Head::new(&mut init, &mut store, "occlinker.decoder.joint", 3 * d, hidden, classes, cfg.p, shape.depth)];
                let missing = STREAMS.map(|s| init.constant(&mut store, &format!("occlinker.missing_token.{s}"), &[d], 0.0));
                let agg = ConvParams::conv3d(&mut init, &mut store, "occlinker.aggregate", classes, classes, [3, 3, 3]);
                (heads, missing, agg)
            }
        };
        // the correction starts at exactly zero, so an untrained plug-in
        // leaves the base prediction unchanged
        zero_param(&mut store, aggregate.weight);
        zero_param(&mut store, aggregate.bias.expect("aggregate has a bias"));
        Ok(Self {
            cfg,
            shape,
            substeps,
            store,
            running: (0..3).map(|_| RunningStats::new(c)).collect(),
            motion,
            upsample,
            tokenizer,
            wq,
            wk,
            wv,
            heads,
            missing,
            aggregate,
        })
    }

    pub fn motion_slices(&self) -> usize {
        self.cfg.motion.pair_policy.slices(self.substeps)
    }

    pub fn motion_shape(&self) -> [usize; 4] {
        let s = self.shape;
        [s.views, self.motion_slices() * s.in_channels, s.h, s.w]
    }

    /// Difference stack of one interval's intermediate frames.
    pub fn motion_stack(&self, frames: &[Tensor], interval: usize) -> Result<Tensor> {
        let s = self.shape;
        interval_motion(
            frames,
            interval,
            self.cfg.motion.pair_policy,
            self.substeps,
            &[s.views, s.in_channels, s.h, s.w],
        )
    }

    /// Motion stacks `[B, slices*(C+1), h, w]` to features `[B, c, h, w]`.
    pub fn motion_encode_var(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        mode: NormMode,
    ) -> Result<(Var, Vec<BatchStats>)> {
        let s = tape.shape(x).to_vec();
        let want = self.motion_shape();
        if s.len() != 4 || s[1..] != want[1..] {
            return Err(CoreError::Shape(format!("motion stack {s:?}, expected [B, {}, {}, {}]", want[1], want[2], want[3])));
        }
        let f = self.cfg.motion.downsample;
        let mut x = if f > 1 { tape.patch_mean(x, f)? } else { x };
        let mut stats = Vec::new();
        for (layer, running) in self.motion.iter().zip(&self.running) {
            let w = tape.param(store, layer.weight);
            let y = tape.conv2d(x, w, 1, 1)?;
            let (g, b) = (tape.param(store, layer.gamma), tape.param(store, layer.beta));
            let (y, st) = tape.batch_norm(y, g, b, BN_EPS, mode, running)?;
            stats.extend(st);
            x = tape.relu(y)?;
        }
        if let Some(k) = &self.upsample {
            let ys = tape.shape(x).to_vec();
            let x5 = tape.reshape(x, &[ys[0], ys[1], 1, ys[2], ys[3]])?;
            let k = tape.constant(k.clone());
            let opts = Conv3dOpts {
                stride: [1, f, f],
                padding: [0, 0, 0],
            };
            let up = tape.conv_transpose3d(x5, k, opts)?;
            x = tape.reshape(up, &[ys[0], ys[1], ys[2] * f, ys[3] * f])?;
        }
        Ok((x, stats))
    }

    pub fn tokenize_features(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.tokenizer.weight);
        let b = tape.param(store, self.tokenizer.bias.expect("tokenizer bias"));
        tokenize_var(tape, x, w, b, self.cfg.p)
    }

    fn attend(&self, tape: &mut Tape, store: &ParamStore, stream: usize, queries: Var, keys: Var) -> Result<Var> {
        let wq = tape.param(store, self.wq[stream]);
        let wk = tape.param(store, self.wk[stream]);
        let wv = tape.param(store, self.wv[stream]);
        let q = tape.matmul(queries, wq)?;
        let k = tape.matmul(keys, wk)?;
        let v = tape.matmul(keys, wv)?;
        let f = tape.multi_head_attention(q, k, v, self.cfg.heads, self.cfg.d_grad)?;
        if self.cfg.query_residual {
            Ok(tape.add(f, q)?)
        } else {
            Ok(f)
        }
    }

    /// Cross-attention of history and motion tokens against the current
    /// tokens (or the reverse under `swap_qkv`), plus `f_cur = K_cur`.
    pub fn dual_cross_attention(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x_sta: Option<Var>,
        x_mot: Option<Var>,
        x_cur: Var,
    ) -> Result<StreamTokens> {
        let run = |tape: &mut Tape, stream: usize, x: Option<Var>| -> Result<Option<Var>> {
            match x {
                None => Ok(None),
                Some(x) if self.cfg.swap_qkv => self.attend(tape, store, stream, x_cur, x).map(Some),
                Some(x) => self.attend(tape, store, stream, x, x_cur).map(Some),
            }
        };
        let f_sta = run(tape, 0, x_sta)?;
        let f_mot = run(tape, 1, x_mot)?;
        let wk = tape.param(store, self.wk[0]);
        let f_cur = tape.matmul(x_cur, wk)?;
        Ok(StreamTokens { f_sta, f_mot, f_cur })
    }

    /// Tokens `[T*N, d]` averaged over `T`, then laid out as the patch grid
    /// volume `[1, d, H/p, W/p, 1]`.
    fn to_volume(&self, tape: &mut Tape, tokens: Var) -> Result<Var> {
        let s = self.shape;
        let (ph, pw) = (s.h / self.cfg.p, s.w / self.cfg.p);
        let n = s.views * ph * pw;
        let ts = tape.shape(tokens).to_vec();
        if ts[0] == 0 || ts[0] % n != 0 {
            return Err(CoreError::Shape(format!("{} tokens do not tile a {n}-patch grid", ts[0])));
        }
        let t = ts[0] / n;
        let x = if t > 1 {
            let x = tape.reshape(tokens, &[t, n, ts[1]])?;
            tape.mean_axis(x, 0)?
        } else {
            tokens
        };
        let x = tape.permute(x, &[1, 0])?;
        Ok(tape.reshape(x, &[1, ts[1], s.views * ph, pw, 1])?)
    }

    fn reduce_tokens(&self, tape: &mut Tape, tokens: Var) -> Result<Var> {
        let s = self.shape;
        let n = s.views * (s.h / self.cfg.p) * (s.w / self.cfg.p);
        let ts = tape.shape(tokens).to_vec();
        if ts[0] == n {
            return Ok(tokens);
        }
        if ts[0] == 0 || ts[0] % n != 0 {
            return Err(CoreError::Shape(format!("{} tokens do not tile a {n}-patch grid", ts[0])));
        }
        let x = tape.reshape(tokens, &[ts[0] / n, n, ts[1]])?;
        Ok(tape.mean_axis(x, 0)?)
    }

    fn grid_dims(&self) -> [usize; 5] {
        let s = self.shape;
        [1, s.classes, s.views * s.h, s.w, s.depth]
    }

    fn constant_volume(&self, tape: &mut Tape, store: &ParamStore, stream: usize) -> Result<Var> {
        let z = tape.constant(Tensor::zeros(&self.grid_dims()));
        let c = tape.param(store, self.missing[stream]);
        Ok(tape.add_bias(z, c, 1)?)
    }

    /// Decodes the streams into `[C, H, W, D]`, replacing absent or masked
    /// streams with learned constants.
    pub fn decode_correction(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        tokens: &StreamTokens,
    ) -> Result<(Var, [Option<Var>; 3])> {
        let mask = self.cfg.streams;
        let active = [
            tokens.f_sta.filter(|_| mask.sta),
            tokens.f_mot.filter(|_| mask.mot),
            Some(tokens.f_cur).filter(|_| mask.cur),
        ];
        let s = self.shape;
        let out = [s.classes, s.views * s.h, s.w, s.depth];
        match self.cfg.aggregation {
            Aggregation::Late => {
                let mut vols = Vec::with_capacity(3);
                let mut decoded = [None; 3];
                for (i, tok) in active.iter().enumerate() {
                    let v = match tok {
                        Some(t) => {
                            let x = self.to_volume(tape, *t)?;
                            let y = self.heads[i].apply(tape, store, x)?;
                            decoded[i] = Some(y);
                            y
                        }
                        None => self.constant_volume(tape, store, i)?,
                    };
                    vols.push(v);
                }
                let cat = tape.concat(&vols, 1)?;
                let w = tape.param(store, self.aggregate.weight);
                let y = tape.conv3d(cat, w, Conv3dOpts::default())?;
                let y = self.aggregate.bias_on(tape, store, y)?;
                Ok((tape.reshape(y, &out)?, decoded))
            }
            Aggregation::Early => {
                let n = s.views * (s.h / self.cfg.p) * (s.w / self.cfg.p);
                let mut parts = Vec::with_capacity(3);
                for (i, tok) in active.iter().enumerate() {
                    let t = match tok {
                        Some(t) => self.reduce_tokens(tape, *t)?,
                        None => {
                            let z = tape.constant(Tensor::zeros(&[n, self.cfg.d_token]));
                            let c = tape.param(store, self.missing[i]);
                            tape.add_bias(z, c, 1)?
                        }
                    };
                    parts.push(t);
                }
                let joint = tape.concat(&parts, 1)?;
                let x = self.to_volume(tape, joint)?;
                let y = self.heads[0].apply(tape, store, x)?;
                let w = tape.param(store, self.aggregate.weight);
                let y = tape.conv3d(y, w, Conv3dOpts::default())?;
                let y = self.aggregate.bias_on(tape, store, y)?;
                Ok((tape.reshape(y, &out)?, [None; 3]))
            }
        }
    }

    /// Full correction for one step. `history` holds the window entries,
    /// oldest first; only the last `L` are used.
    pub fn forward_with(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        current: &Tensor,
        history: &[WindowEntry],
        mode: NormMode,
    ) -> Result<Correction> {
        let fs = self.shape.feature_shape();
        if current.shape() != fs {
            return Err(CoreError::Shape(format!("current features {:?}, expected {fs:?}", current.shape())));
        }
        let used = &history[history.len().saturating_sub(self.cfg.window)..];
        let x = tape.constant(current.clone());
        let x_cur = self.tokenize_features(tape, store, x)?;

        let stack = |parts: Vec<&Tensor>, what: &str, want: [usize; 4]| -> Result<Tensor> {
            let mut data = Vec::new();
            for p in &parts {
                if p.shape() != want {
                    return Err(CoreError::Shape(format!("{what} {:?}, expected {want:?}", p.shape())));
                }
                data.extend_from_slice(p.data());
            }
            Ok(Tensor::new(vec![parts.len() * want[0], want[1], want[2], want[3]], data)?)
        };
        let mut batch_stats = Vec::new();
        let x_sta = if self.cfg.streams.sta && !used.is_empty() {
            let h = stack(used.iter().map(|e| &e.statics).collect(), "history features", fs)?;
            let h = tape.constant(h);
            Some(self.tokenize_features(tape, store, h)?)
        } else {
            None
        };
        let x_mot = if self.cfg.streams.mot && !used.is_empty() {
            let m = stack(used.iter().map(|e| &e.motion).collect(), "motion stack", self.motion_shape())?;
            let m = tape.constant(m);
            let (feat, st) = self.motion_encode_var(tape, store, m, mode)?;
            batch_stats = st;
            Some(self.tokenize_features(tape, store, feat)?)
        } else {
            None
        };
        let tokens = self.dual_cross_attention(tape, store, x_sta, x_mot, x_cur)?;
        let (delta, streams) = self.decode_correction(tape, store, &tokens)?;
        Ok(Correction {
            delta,
            streams,
            batch_stats,
        })
    }

    pub fn forward(&self, tape: &mut Tape, current: &Tensor, history: &[WindowEntry], mode: NormMode) -> Result<Correction> {
        self.forward_with(tape, &self.store, current, history, mode)
    }

    /// Inference-mode correction `[C, H, W, D]`.
    pub fn correction(&self, current: &Tensor, history: &[WindowEntry]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let c = self.forward(&mut tape, current, history, NormMode::Eval)?;
        Ok(tape.value(c.delta).clone())
    }

    pub fn update_running(&mut self, stats: &[BatchStats]) {
        for (r, s) in self.running.iter_mut().zip(stats) {
            r.update(s);
        }
    }

    pub fn missing_param(&self, stream: usize) -> ParamId {
        self.missing[stream]
    }

    pub fn aggregate_params(&self) -> ConvParams {
        self.aggregate
    }

    pub fn tokenizer_params(&self) -> ConvParams {
        self.tokenizer
    }

    /// Parameter ids of a decoder head (`[STREAMS]` index, or 0 for the
    /// joint head of early aggregation): `(layer 1, layer 2)`.
    pub fn head_params(&self, i: usize) -> (ConvParams, ConvParams) {
        (self.heads[i].up1, self.heads[i].up2)
    }
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    pub probabilities: Tensor,
    pub base_logits: Tensor,
    pub correction: Tensor,
}

/// One online step: base inference on the current keyframe, window update
/// with the previous keyframe's features and the motion of the interval
/// leading here, correction, fusion. `intermediates` are the frames
/// between the previous keyframe and this one (`None` at scene start).
pub fn step(
    base: &BaseNet,
    plugin: &OccLinker,
    window: &mut TemporalWindow,
    keyframe: &Tensor,
    intermediates: Option<&[Tensor]>,
    interval: usize,
) -> Result<StepOutput> {
    let s_t = base.encode_static(keyframe)?;
    let base_logits = base.decode_occupancy(&s_t)?;
    if let (Some(prev), Some(frames)) = (window.previous.take(), intermediates) {
        let motion = plugin.motion_stack(frames, interval)?;
        window.push(WindowEntry { statics: prev, motion });
    }
    let correction = plugin.correction(&s_t, &window.entries())?;
    let probabilities = fuse(&base_logits, &correction)?;
    window.previous = Some(s_t);
    Ok(StepOutput {
        probabilities,
        base_logits,
        correction,
    })
}
