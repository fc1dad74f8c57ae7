//! Run stages shared by the commands and the acceptance harness.

use occlinker_core::episode_io::Dataset;
use occlinker_core::training::{
    base_miou, predict_base, predict_plugin, train_base, train_plugin, LossReport, PreparedEpisode, TrainConfig,
    TrainReport,
};
use occlinker_core::{generate_episode, BaseNet, BaseShape, Episode, LabelGrid, OccLinker, PluginConfig, SceneSpec};
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::error::{CliError, Result};

/// Clean-render mIoU a base must reach before plug-in results mean much.
pub const BASE_GATE: f64 = 85.0;

/// Worker count from `OCCLINKER_THREADS`, default 1.
pub fn threads() -> Result<usize> {
    match std::env::var("OCCLINKER_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(CliError::usage(format!("OCCLINKER_THREADS must be a positive integer, got {v:?}"))),
        },
    }
}

pub fn pool() -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads()?)
        .build()
        .map_err(|e| CliError::Failed(format!("thread pool: {e}")))
}

fn episodes(scene: &SceneSpec, seeds: &[u64]) -> Result<Vec<Episode>> {
    let pool = pool()?;
    pool.install(|| {
        seeds
            .par_iter()
            .map(|&seed| generate_episode(&SceneSpec { seed, ..scene.clone() }).map_err(CliError::from))
            .collect()
    })
}

pub fn make_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let (train, held) = cfg.episode_seeds();
    Ok(Dataset {
        train: episodes(&cfg.world.scene, &train)?,
        heldout: episodes(&cfg.world.scene, &held)?,
    })
}

pub fn base_shape(cfg: &RunConfig, ds: &Dataset) -> Result<BaseShape> {
    let spec = &ds
        .train
        .first()
        .ok_or_else(|| CliError::usage("dataset has no training episodes"))?
        .spec;
    Ok(BaseShape::new(spec, cfg.base.channels))
}

/// Trains a fresh base on the training split; the result is not frozen.
pub fn fit_base(cfg: &RunConfig, ds: &Dataset) -> Result<(BaseNet, Vec<LossReport>)> {
    let mut base = BaseNet::new(base_shape(cfg, ds)?, cfg.seed);
    let losses = train_base(&mut base, &ds.train, &cfg.base, cfg.seed)?;
    Ok((base, losses))
}

/// Clean-render mIoU of the base on the held-out split.
pub fn base_gate_score(base: &BaseNet, ds: &Dataset) -> Result<f64> {
    Ok(base_miou(base, &ds.heldout)?)
}

/// Trains a plug-in against a frozen base.
pub fn fit_plugin(
    seed: u64,
    base: &BaseNet,
    ds: &Dataset,
    plugin: PluginConfig,
    train: &TrainConfig,
) -> Result<(OccLinker, TrainReport)> {
    let substeps = ds.train.first().map(|e| e.spec.substeps).unwrap_or(2);
    let mut p = OccLinker::new(plugin, base.shape, substeps, seed)?;
    let prep = |eps: &[Episode]| eps.iter().map(|e| PreparedEpisode::new(base, &p, e)).collect::<occlinker_core::Result<Vec<_>>>();
    let tr = prep(&ds.train)?;
    let val = if train.validate { prep(&ds.heldout)? } else { Vec::new() };
    let report = train_plugin(base, &mut p, &tr, &val, train, seed)?;
    Ok((p, report))
}

/// Online predictions for every episode: base only, or with the plug-in.
pub fn predict(base: &BaseNet, plugin: Option<&OccLinker>, eps: &[Episode]) -> Result<Vec<Vec<LabelGrid>>> {
    let pool = pool()?;
    pool.install(|| {
        eps.par_iter()
            .map(|ep| match plugin {
                Some(p) => predict_plugin(base, p, ep),
                None => predict_base(base, ep),
            })
            .map(|r| r.map_err(CliError::from))
            .collect()
    })
}
