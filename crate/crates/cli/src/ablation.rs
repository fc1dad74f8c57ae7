//! Ablation matrix: stream masks (M0-M4 and the swapped-query M4 variant),
//! window lengths, aggregation strategy and the L1 weight.
//!
//! `M0` and `L0` run the frozen base alone; every other variant trains its
//! own plug-in from the run config with one setting changed.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use occlinker_core::episode_io::Dataset;
use occlinker_core::occlinker::StreamMask;
use occlinker_core::training::TrainConfig;
use occlinker_core::{Aggregation, BaseNet, PluginConfig};
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::eval::{evaluate, write_csv, write_eval_csv, Summary};
use crate::pipeline::{fit_plugin, pool, predict};

pub const COLUMNS: [&str; 9] = ["variant", "status", "IoU", "mIoU_all", "mIoU_gmo", "mIoU_gso", "S_m", "S_s", "note"];

#[derive(Clone, Debug, PartialEq)]
pub enum Variant {
    BaseOnly,
    Plugin { plugin: PluginConfig, train: TrainConfig },
}

fn masked(cfg: &RunConfig, sta: bool, cur: bool, mot: bool) -> PluginConfig {
    PluginConfig {
        streams: StreamMask { sta, cur, mot },
        ..cfg.plugin
    }
}

/// Resolves a variant name against the run config.
pub fn resolve(name: &str, cfg: &RunConfig) -> Result<Variant> {
    let plugin = |p: PluginConfig| Variant::Plugin {
        plugin: p,
        train: cfg.train.clone(),
    };
    let v = match name {
        "M0" | "L0" => Variant::BaseOnly,
        "M1" => plugin(masked(cfg, false, true, true)),
        "M2" => plugin(masked(cfg, true, false, true)),
        "M3" => plugin(masked(cfg, true, true, false)),
        "M4" => plugin(masked(cfg, true, true, true)),
        "M4-swap" => plugin(PluginConfig {
            swap_qkv: true,
            ..masked(cfg, true, true, true)
        }),
        "early" | "S1" => plugin(PluginConfig {
            aggregation: Aggregation::Early,
            ..cfg.plugin
        }),
        "late" | "S2" => plugin(PluginConfig {
            aggregation: Aggregation::Late,
            ..cfg.plugin
        }),
        _ => {
            if let Some(l) = name.strip_prefix('L') {
                let window = l.parse().map_err(|_| CliError::usage(format!("bad window variant {name:?}")))?;
                plugin(PluginConfig { window, ..cfg.plugin })
            } else if let Some(x) = name.strip_prefix("lambda=") {
                let lambda: f64 = x.parse().map_err(|_| CliError::usage(format!("bad lambda variant {name:?}")))?;
                if !(lambda >= 0.0 && lambda.is_finite()) {
                    return Err(CliError::usage(format!("lambda must be finite and >= 0 in {name:?}")));
                }
                Variant::Plugin {
                    plugin: cfg.plugin,
                    train: TrainConfig { lambda, ..cfg.train.clone() },
                }
            } else {
                return Err(CliError::usage(format!(
                    "unknown variant {name:?}; expected M0-M4, M4-swap, L<n>, early, late or lambda=<x>"
                )));
            }
        }
    };
    Ok(v)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub summary: Option<Summary>,
    /// Error text when the variant failed.
    pub error: Option<String>,
}

impl AblationRow {
    pub fn fields(&self) -> Vec<String> {
        let f = |v: Option<f64>| v.map_or_else(|| "n/a".into(), |x| format!("{x:.2}"));
        let s = self.summary;
        vec![
            self.variant.clone(),
            if self.error.is_none() { "ok" } else { "failed" }.into(),
            f(s.map(|s| s.iou)),
            f(s.and_then(|s| s.miou_all)),
            f(s.and_then(|s| s.miou_gmo)),
            f(s.and_then(|s| s.miou_gso)),
            f(s.map(|s| s.s_m)),
            f(s.map(|s| s.s_s)),
            self.error.clone().unwrap_or_default(),
        ]
    }
}

fn run_variant(name: &str, cfg: &RunConfig, base: &BaseNet, ds: &Dataset, out: Option<&Path>) -> Result<Summary> {
    let names: Vec<String> = (0..ds.heldout.len()).map(|i| format!("heldout_{i:03}")).collect();
    let gts: Vec<_> = ds.heldout.iter().map(|e| e.labels.clone()).collect();
    let tax = &ds.heldout.first().ok_or_else(|| CliError::usage("no held-out episodes"))?.taxonomy;
    let preds = match resolve(name, cfg)? {
        Variant::BaseOnly => predict(base, None, &ds.heldout)?,
        Variant::Plugin { plugin, train } => {
            let (p, _) = fit_plugin(cfg.seed, base, ds, plugin, &train)?;
            predict(base, Some(&p), &ds.heldout)?
        }
    };
    let table = evaluate(&names, &preds, &gts, tax)?;
    if let Some(dir) = out {
        let vdir = dir.join("variants").join(name);
        std::fs::create_dir_all(&vdir).map_err(|e| CliError::io(&vdir, e))?;
        write_eval_csv(&vdir.join("report.csv"), &table)?;
    }
    Ok(table.summary)
}

/// Runs every variant against one frozen base. A failing variant (error or
/// panic) yields a `failed` row; the others still run.
pub fn run_ablation(cfg: &RunConfig, base: &BaseNet, ds: &Dataset, variants: &[String], out: Option<&Path>) -> Result<Vec<AblationRow>> {
    if !base.is_frozen() {
        return Err(CliError::usage("ablation needs a frozen base"));
    }
    for v in variants {
        resolve(v, cfg)?;
    }
    let pool = pool()?;
    let rows = pool.install(|| {
        variants
            .par_iter()
            .map(|name| {
                let r = catch_unwind(AssertUnwindSafe(|| run_variant(name, cfg, base, ds, out)));
                let r = match r {
                    Ok(r) => r,
                    Err(p) => Err(CliError::Failed(format!(
                        "panicked: {}",
                        p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default()
                    ))),
                };
                match r {
                    Ok(s) => AblationRow {
                        variant: name.clone(),
                        summary: Some(s),
                        error: None,
                    },
                    Err(e) => {
                        log::error!("variant {name} failed: {e}");
                        AblationRow {
                            variant: name.clone(),
                            summary: None,
                            error: Some(e.to_string()),
                        }
                    }
                }
            })
            .collect()
    });
    Ok(rows)
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    write_csv(path, &COLUMNS, rows.iter().map(AblationRow::fields))
}
