//! Finite-difference gradient suite over every layer of the base network
//! and the plug-in, at toy shapes. Shared by the test suites.

use occ_tensor::ops::norm::RunningStats;
use occ_tensor::{grad_check, grad_check_params, Conv3dOpts, GradCheckReport, NormMode, ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::base::{BaseNet, BaseShape};
use crate::error::Result;
use crate::grid::LabelGrid;
use crate::loss::{cross_entropy, focal, l1};
use crate::motion::PairPolicy;
use crate::occlinker::{Aggregation, OccLinker, PluginConfig, StreamMask, WindowEntry};

/// Largest allowed finite-difference step: at toy shapes the plug-in's
/// smallest gradient components are limited by rounding, not truncation.
pub const STEP: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCase {
    pub name: String,
    pub report: GradCheckReport,
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Sum of `y` weighted by a fixed random tensor.
fn weighted(tape: &mut Tape, y: Var, seed: u64) -> occ_tensor::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let w = tape.constant(rand_t(&mut rng, tape.shape(y)));
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

/// Toy base shape: 2 views of 2x2, 3 classes, depth 2, 2 feature channels.
pub fn toy_shape() -> BaseShape {
    BaseShape {
        views: 2,
        in_channels: 4,
        channels: 2,
        classes: 3,
        h: 2,
        w: 2,
        depth: 2,
    }
}

pub fn toy_plugin_config() -> PluginConfig {
    PluginConfig {
        window: 1,
        p: 1,
        d_token: 4,
        d_grad: 4,
        heads: 2,
        decoder_channels: 2,
        ..PluginConfig::default()
    }
}

/// Replaces every parameter with uniform noise, `±1/sqrt(fan_in)` for
/// weights, so zero-initialised layers do not hide gradients while
/// activations stay of order one.
pub fn randomize(store: &mut ParamStore, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.name.clone(), p.value.shape().to_vec())).collect();
    for (id, name, shape) in ids {
        let t = if name.ends_with("bn_gamma") {
            Tensor::from_fn(&shape, |_| rng.gen_range(0.5..1.5))
        } else if shape.len() >= 2 {
            let fan_in = shape.iter().product::<usize>() / shape[0];
            let b = 1.0 / (fan_in as f64).sqrt();
            Tensor::from_fn(&shape, |_| rng.gen_range(-b..b))
        } else {
            Tensor::from_fn(&shape, |_| rng.gen_range(-0.5..0.5))
        };
        store.load_value(id, t)?;
    }
    Ok(())
}

fn op_cases(seed: u64) -> Result<Vec<GradCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut run = |name: &str, inputs: Vec<Tensor>, f: &dyn Fn(&mut Tape, &[Var]) -> occ_tensor::Result<Var>| -> Result<()> {
        let report = grad_check(
            |t, v| {
                let y = f(t, v)?;
                weighted(t, y, seed)
            },
            &inputs,
            STEP,
        )?;
        out.push(GradCase {
            name: name.into(),
            report,
        });
        Ok(())
    };
    let r = &mut rng;
    run("conv2d", vec![rand_t(r, &[2, 2, 4, 4]), rand_t(r, &[3, 2, 3, 3])], &|t, v| t.conv2d(v[0], v[1], 1, 1))?;
    run("conv3d", vec![rand_t(r, &[1, 3, 3, 3, 2]), rand_t(r, &[2, 3, 3, 3, 3])], &|t, v| {
        t.conv3d(v[0], v[1], Conv3dOpts::default())
    })?;
    run("conv_transpose3d", vec![rand_t(r, &[1, 2, 2, 2, 1]), rand_t(r, &[2, 2, 4, 4, 2])], &|t, v| {
        t.conv_transpose3d(
            v[0],
            v[1],
            Conv3dOpts {
                stride: [2, 2, 2],
                padding: [1, 1, 0],
            },
        )
    })?;
    let running = RunningStats::new(3);
    run(
        "batch_norm",
        vec![rand_t(r, &[2, 3, 2, 2]), rand_t(r, &[3]), rand_t(r, &[3])],
        &|t, v| Ok(t.batch_norm(v[0], v[1], v[2], 1e-5, NormMode::Train, &running)?.0),
    )?;
    run("softmax", vec![rand_t(r, &[3, 4])], &|t, v| t.softmax_axis(v[0], 0))?;
    run(
        "multi_head_attention",
        vec![rand_t(r, &[3, 4]), rand_t(r, &[5, 4]), rand_t(r, &[5, 4])],
        &|t, v| t.multi_head_attention(v[0], v[1], v[2], 2, 4),
    )?;
    run("patch_mean", vec![rand_t(r, &[2, 2, 4, 4])], &|t, v| t.patch_mean(v[0], 2))?;
    run("matmul", vec![rand_t(r, &[3, 4]), rand_t(r, &[4, 2])], &|t, v| t.matmul(v[0], v[1]))?;
    let labels = LabelGrid::new([2, 2, 2], (0..8).map(|_| r.gen_range(0..3u8)).collect())?;
    let target = rand_t(r, &[3, 2, 2, 2]);
    let logits = rand_t(r, &[3, 2, 2, 2]);
    for (name, which) in [("cross_entropy", 0), ("focal", 1), ("l1", 2)] {
        let report = grad_check(
            |t, v| {
                let res = match which {
                    0 => cross_entropy(t, v[0], &labels, None),
                    1 => focal(t, v[0], &labels, 2.0, 0.5, None),
                    _ => l1(t, v[0], &target, 0.1),
                };
                res.map_err(to_tensor_err)
            },
            std::slice::from_ref(&logits),
            STEP,
        )?;
        out.push(GradCase {
            name: name.into(),
            report,
        });
    }
    Ok(out)
}

fn base_case(seed: u64) -> Result<GradCase> {
    let mut base = BaseNet::new(toy_shape(), seed);
    randomize(&mut base.store, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let images = rand_t(&mut rng, &toy_shape().image_shape());
    let report = grad_check_params(
        |t, store| {
            let mut b = base.clone();
            b.store = store.clone();
            let x = t.constant(images.clone());
            let s = b.encode_var(t, x).map_err(to_tensor_err)?;
            let o = b.decode_var(t, s).map_err(to_tensor_err)?;
            weighted(t, o, seed)
        },
        &base.store,
        STEP,
    )?;
    Ok(GradCase {
        name: "base network".into(),
        report,
    })
}

fn to_tensor_err(e: crate::error::CoreError) -> occ_tensor::TensorError {
    match e {
        crate::error::CoreError::Tensor(t) => t,
        other => occ_tensor::TensorError::InvalidArgument(other.to_string()),
    }
}

/// Inputs for one toy plug-in step: current features and `window` history
/// entries.
pub fn toy_inputs(plugin: &OccLinker, seed: u64) -> (Tensor, Vec<WindowEntry>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xFEED);
    let fs = plugin.shape.feature_shape();
    let cur = rand_t(&mut rng, &fs);
    let hist = (0..plugin.cfg.window)
        .map(|_| WindowEntry {
            statics: rand_t(&mut rng, &fs),
            motion: rand_t(&mut rng, &plugin.motion_shape()),
        })
        .collect();
    (cur, hist)
}

/// Randomly weighted sum of a toy plug-in step's correction, checked over
/// every plug-in parameter.
pub fn plugin_case(name: &str, cfg: PluginConfig, seed: u64) -> Result<GradCase> {
    let mut plugin = OccLinker::new(cfg, toy_shape(), 3, seed)?;
    randomize(&mut plugin.store, seed)?;
    let (cur, hist) = toy_inputs(&plugin, seed);
    let report = grad_check_params(
        |t, store| {
            let c = plugin.forward_with(t, store, &cur, &hist, NormMode::Train).map_err(to_tensor_err)?;
            weighted(t, c.delta, seed)
        },
        &plugin.store,
        STEP,
    )?;
    Ok(GradCase {
        name: name.into(),
        report,
    })
}

/// Combined training loss `ce + focal + lambda * l1` on random logits.
fn training_loss_case(seed: u64) -> Result<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xBA5E);
    let shape = toy_shape().logit_shape();
    let n: usize = shape[1..].iter().product();
    let labels = LabelGrid::new([shape[1], shape[2], shape[3]], (0..n).map(|_| rng.gen_range(0..shape[0] as u8)).collect())?;
    let base = rand_t(&mut rng, &shape);
    let target = rand_t(&mut rng, &shape);
    let delta = rand_t(&mut rng, &shape);
    let report = grad_check(
        |t, v| {
            let b = t.constant(base.clone());
            let logits = t.add(b, v[0])?;
            let ce = cross_entropy(t, logits, &labels, None).map_err(to_tensor_err)?;
            let fo = focal(t, logits, &labels, 2.0, 1.0, None).map_err(to_tensor_err)?;
            let reg = l1(t, v[0], &target, 0.1).map_err(to_tensor_err)?;
            let s = t.add(ce, fo)?;
            t.add(s, reg)
        },
        &[delta],
        STEP,
    )?;
    Ok(GradCase {
        name: "training loss".into(),
        report,
    })
}

/// Plug-in variants covered by the suite.
pub fn plugin_variants() -> Vec<(&'static str, PluginConfig)> {
    let base = toy_plugin_config();
    vec![
        ("plugin late aggregation", base),
        (
            "plugin early aggregation",
            PluginConfig {
                aggregation: Aggregation::Early,
                ..base
            },
        ),
        ("plugin swapped queries", PluginConfig { swap_qkv: true, ..base }),
        (
            "plugin per-stream keys, no query residual",
            PluginConfig {
                shared_kv: false,
                query_residual: false,
                ..base
            },
        ),
        (
            "plugin window 2, all pairs",
            PluginConfig {
                window: 2,
                motion: crate::occlinker::MotionConfig {
                    pair_policy: PairPolicy::AllPairs,
                    downsample: 2,
                },
                ..base
            },
        ),
        (
            "plugin without history stream",
            PluginConfig {
                streams: StreamMask {
                    sta: false,
                    cur: true,
                    mot: true,
                },
                ..base
            },
        ),
    ]
}

/// Every op, loss, the base network and each plug-in variant for one seed.
pub fn gradient_suite(seed: u64) -> Result<Vec<GradCase>> {
    let mut cases = op_cases(seed)?;
    cases.push(training_loss_case(seed)?);
    cases.push(base_case(seed)?);
    for (name, cfg) in plugin_variants() {
        cases.push(plugin_case(name, cfg, seed)?);
    }
    Ok(cases)
}
