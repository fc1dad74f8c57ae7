//! Base pre-training, plug-in training against a frozen base, and scene
//! prediction for evaluation.

use occ_tensor::{NormMode, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::base::{BaseConfig, BaseNet};
use crate::error::{CoreError, Result};
use crate::grid::LabelGrid;
use crate::loss::{cross_entropy, focal, l1, l1_target, L1Target};
use crate::metrics::{consistency_report, evaluate_scene, Confusion, SceneEval};
use crate::occlinker::{step, OccLinker, TemporalWindow, WindowEntry};
use crate::optim::{AdamW, AdamWConfig};
use crate::taxonomy::{ClassTaxonomy, Group};
use crate::world::Episode;

const SHUFFLE_STREAM: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Weight of the L1 correction term.
    pub lambda: f64,
    /// Logit margin of the ideal correction target.
    pub kappa: f64,
    pub l1_target: L1Target,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    /// Evaluate on the validation episodes after every epoch.
    pub validate: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2,
            lr: 2e-3,
            weight_decay: 1e-2,
            lambda: 0.1,
            kappa: 5.0,
            l1_target: L1Target::default(),
            focal_gamma: 2.0,
            focal_alpha: 1.0,
            validate: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    pub total: f64,
    pub ce: f64,
    pub focal: f64,
    pub l1: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Validation metrics, all on the 0-100 scale.
    pub val: Option<ValidationMetrics>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationMetrics {
    pub iou: f64,
    pub miou: Option<f64>,
    pub s_m: f64,
    pub s_s: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub losses: Vec<LossReport>,
    pub epochs: Vec<EpochSummary>,
}

/// Frozen-base outputs of one episode, computed once before training.
#[derive(Clone, Debug)]
pub struct PreparedEpisode {
    /// Static features per keyframe `[V, c, h, w]`.
    pub features: Vec<Tensor>,
    /// Base logits per keyframe `[C, H, W, D]`.
    pub logits: Vec<Tensor>,
    /// Motion stack per interval.
    pub motion: Vec<Tensor>,
    pub labels: Vec<LabelGrid>,
    pub taxonomy: ClassTaxonomy,
}

impl PreparedEpisode {
    pub fn new(base: &BaseNet, plugin: &OccLinker, ep: &Episode) -> Result<Self> {
        let mut features = Vec::with_capacity(ep.num_keyframes());
        let mut logits = Vec::with_capacity(ep.num_keyframes());
        for kf in &ep.keyframes {
            let s = base.encode_static(kf)?;
            logits.push(base.decode_occupancy(&s)?);
            features.push(s);
        }
        let motion = ep
            .intermediates
            .iter()
            .enumerate()
            .map(|(i, frames)| plugin.motion_stack(frames, i))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            features,
            logits,
            motion,
            labels: ep.labels.clone(),
            taxonomy: ep.taxonomy.clone(),
        })
    }

    /// Window contents at keyframe `t` for a window of `len` entries.
    pub fn history(&self, t: usize, len: usize) -> Vec<WindowEntry> {
        (t.saturating_sub(len)..t)
            .map(|j| WindowEntry {
                statics: self.features[j].clone(),
                motion: self.motion[j].clone(),
            })
            .collect()
    }

    pub fn base_predictions(&self) -> Result<Vec<LabelGrid>> {
        self.logits.iter().map(LabelGrid::from_logits).collect()
    }

    /// Plug-in predictions from the cached base outputs; same result as
    /// running [`step`] online.
    pub fn plugin_predictions(&self, plugin: &OccLinker) -> Result<Vec<LabelGrid>> {
        (0..self.features.len())
            .map(|t| {
                let delta = plugin.correction(&self.features[t], &self.history(t, plugin.cfg.window))?;
                LabelGrid::from_logits(&add(&self.logits[t], &delta)?)
            })
            .collect()
    }
}

fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(CoreError::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(Tensor::new(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect())?)
}

fn check_finite(v: f64, seed: u64, step: usize, what: &str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(CoreError::Diverged {
            seed,
            step,
            msg: format!("{what} loss is {v}"),
        })
    }
}

/// Trains the base with cross-entropy on unoccluded renders.
pub fn train_base(base: &mut BaseNet, episodes: &[Episode], cfg: &BaseConfig, seed: u64) -> Result<Vec<LossReport>> {
    if base.is_frozen() {
        return Err(CoreError::Config("base network is frozen".into()));
    }
    let mut samples = Vec::new();
    for (e, ep) in episodes.iter().enumerate() {
        for t in 0..ep.num_keyframes() {
            samples.push((e, t, ep.clean_keyframe(t)?));
        }
    }
    let mut opt = AdamW::for_trainable(
        AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
        &base.store,
    );
    let mut rng = shuffle_rng(seed);
    let mut losses = Vec::new();
    for _ in 0..cfg.epochs {
        samples.shuffle(&mut rng);
        for (e, t, img) in &samples {
            let mut tape = Tape::new();
            let x = tape.constant(img.clone());
            let s = base.encode_var(&mut tape, x)?;
            let o = base.decode_var(&mut tape, s)?;
            let loss = cross_entropy(&mut tape, o, &episodes[*e].labels[*t], None)?;
            let v = tape.value(loss).data()[0];
            check_finite(v, seed, losses.len(), "base")?;
            let grads = tape.backward(loss)?.by_param();
            drop(tape);
            opt.step(&mut base.store, &grads)?;
            losses.push(LossReport {
                step: losses.len(),
                total: v,
                ce: v,
                focal: 0.0,
                l1: 0.0,
            });
        }
    }
    Ok(losses)
}

fn shuffle_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SHUFFLE_STREAM);
    rng
}

/// Mean occupancy mIoU (0-100) of `base` on the clean renders.
pub fn base_miou(base: &BaseNet, episodes: &[Episode]) -> Result<f64> {
    let classes = base.shape.classes;
    let mut conf = Confusion::new(classes);
    let tax = episodes
        .first()
        .map(|e| e.taxonomy.clone())
        .ok_or_else(|| CoreError::Undefined("no episodes to score".into()))?;
    for ep in episodes {
        for t in 0..ep.num_keyframes() {
            conf.add(&base.predict(&ep.clean_keyframe(t)?)?, &ep.labels[t], &tax)?;
        }
    }
    conf.miou(&tax, Group::All)
        .ok_or_else(|| CoreError::Undefined("no class present".into()))
}

/// Trains the plug-in on cached base outputs. The base must be frozen.
pub fn train_plugin(
    base: &BaseNet,
    plugin: &mut OccLinker,
    train: &[PreparedEpisode],
    val: &[PreparedEpisode],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainReport> {
    if !base.is_frozen() {
        return Err(CoreError::Config("freeze the base network before training the plug-in".into()));
    }
    let mut samples: Vec<(usize, usize)> = train
        .iter()
        .enumerate()
        .flat_map(|(e, p)| (0..p.features.len()).map(move |t| (e, t)))
        .collect();
    let mut opt = AdamW::for_trainable(
        AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
        &plugin.store,
    );
    let mut rng = shuffle_rng(seed);
    let mut report = TrainReport::default();
    for epoch in 0..cfg.epochs {
        samples.shuffle(&mut rng);
        let mut sum = 0.0;
        for &(e, t) in &samples {
            let ep = &train[e];
            let history = ep.history(t, plugin.cfg.window);
            let mut tape = Tape::new();
            let corr = plugin.forward(&mut tape, &ep.features[t], &history, NormMode::Train)?;
            let base_logits = tape.constant(ep.logits[t].clone());
            let logits = tape.add(base_logits, corr.delta)?;
            let labels = &ep.labels[t];
            let ce = cross_entropy(&mut tape, logits, labels, None)?;
            let fo = focal(&mut tape, logits, labels, cfg.focal_gamma, cfg.focal_alpha, None)?;
            let target = l1_target(&ep.logits[t], labels, cfg.kappa, cfg.l1_target)?;
            let reg = l1(&mut tape, corr.delta, &target, cfg.lambda)?;
            let total = tape.add(ce, fo)?;
            let total = tape.add(total, reg)?;
            let r = LossReport {
                step: report.losses.len(),
                total: tape.value(total).data()[0],
                ce: tape.value(ce).data()[0],
                focal: tape.value(fo).data()[0],
                l1: tape.value(reg).data()[0],
            };
            check_finite(r.total, seed, r.step, "plug-in")?;
            let grads = tape.backward(total)?.by_param();
            drop(tape);
            opt.step(&mut plugin.store, &grads)?;
            plugin.update_running(&corr.batch_stats);
            sum += r.total;
            report.losses.push(r);
        }
        let mut summary = EpochSummary {
            epoch,
            mean_loss: sum / samples.len().max(1) as f64,
            val: None,
        };
        if cfg.validate && !val.is_empty() {
            summary.val = Some(validate(plugin, val)?);
        }
        log::info!("epoch {epoch}: loss {:.4} val {:?}", summary.mean_loss, summary.val);
        report.epochs.push(summary);
    }
    Ok(report)
}

fn validate(plugin: &OccLinker, val: &[PreparedEpisode]) -> Result<ValidationMetrics> {
    let mut scenes = Vec::with_capacity(val.len());
    let tax = &val[0].taxonomy;
    let mut conf = Confusion::new(tax.num_classes());
    for p in val {
        let preds = p.plugin_predictions(plugin)?;
        for (pr, gt) in preds.iter().zip(&p.labels) {
            conf.add(pr, gt, tax)?;
        }
        scenes.push(preds);
    }
    let rep = consistency_report(&scenes, tax)?;
    Ok(ValidationMetrics {
        iou: conf.iou(),
        miou: conf.miou(tax, Group::All),
        s_m: 100.0 * rep.mean_s_m,
        s_s: 100.0 * rep.mean_s_s,
    })
}

/// Base-only predictions for every keyframe of the (occluded) episode.
pub fn predict_base(base: &BaseNet, ep: &Episode) -> Result<Vec<LabelGrid>> {
    ep.keyframes.iter().map(|kf| base.predict(kf)).collect()
}

/// Online plug-in predictions, one [`step`] per keyframe.
pub fn predict_plugin(base: &BaseNet, plugin: &OccLinker, ep: &Episode) -> Result<Vec<LabelGrid>> {
    let mut window = TemporalWindow::new(plugin.cfg.window);
    let mut out = Vec::with_capacity(ep.num_keyframes());
    for (t, kf) in ep.keyframes.iter().enumerate() {
        let prev = t.checked_sub(1);
        let frames = prev.map(|i| ep.intermediates[i].as_slice());
        let o = step(base, plugin, &mut window, kf, frames, prev.unwrap_or(0))?;
        out.push(LabelGrid::from_logits(&o.probabilities)?);
    }
    Ok(out)
}

pub fn evaluate(preds: &[LabelGrid], ep: &Episode) -> Result<SceneEval> {
    evaluate_scene(preds, &ep.labels, &ep.taxonomy)
}

/// Hidden movers the predictions lose: over every (keyframe, mover) pair
/// where the schedule hides the mover, counts those with fewer than half
/// of its voxels predicted as its class. Returns `(missed, hidden)`.
pub fn occlusion_misses(preds: &[LabelGrid], ep: &Episode) -> (usize, usize) {
    let (mut missed, mut hidden) = (0, 0);
    for (t, (pred, flags)) in preds.iter().zip(&ep.occlusion).enumerate() {
        for (m, _) in ep.movers.iter().zip(flags).filter(|(_, &h)| h) {
            let vox = m.voxels(t as f64, pred.dims);
            let hit = vox.iter().filter(|&&v| pred.data[v] == m.class).count();
            hidden += 1;
            if 2 * hit < vox.len() {
                missed += 1;
            }
        }
    }
    (missed, hidden)
}
