//! Evaluation tables and their CSV form. Every percentage and disparity is
//! on the 0-100 scale with two decimals; undefined values print `n/a`.

use std::path::Path;

use occlinker_core::metrics::{evaluate_scene, Confusion};
use occlinker_core::{ClassTaxonomy, Group, LabelGrid};
use serde::Serialize;

use crate::error::{CliError, Result};

pub const COLUMNS: [&str; 12] = [
    "scene", "frame", "IoU", "mIoU_all", "mIoU_gmo", "mIoU_gso", "delta_m", "delta_s", "N_mc", "N_sc", "S_m", "S_s",
];

/// Label of the per-scene summary rows and the all-scene row.
pub const ALL: &str = "all";
pub const MEAN_SCENE: &str = "mean";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalRow {
    pub scene: String,
    pub frame: String,
    pub iou: Option<f64>,
    pub miou_all: Option<f64>,
    pub miou_gmo: Option<f64>,
    pub miou_gso: Option<f64>,
    pub delta_m: Option<f64>,
    pub delta_s: Option<f64>,
    pub n_mc: Option<u64>,
    pub n_sc: Option<u64>,
    pub s_m: Option<f64>,
    pub s_s: Option<f64>,
}

/// Dataset-level scores, 0-100.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub iou: f64,
    pub miou_all: Option<f64>,
    pub miou_gmo: Option<f64>,
    pub miou_gso: Option<f64>,
    pub s_m: f64,
    pub s_s: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalTable {
    pub rows: Vec<EvalRow>,
    pub summary: Summary,
}

fn fmt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.2}"))
}

impl EvalRow {
    pub fn fields(&self) -> Vec<String> {
        vec![
            self.scene.clone(),
            self.frame.clone(),
            fmt(self.iou),
            fmt(self.miou_all),
            fmt(self.miou_gmo),
            fmt(self.miou_gso),
            fmt(self.delta_m),
            fmt(self.delta_s),
            self.n_mc.map_or_else(|| "n/a".into(), |n| n.to_string()),
            self.n_sc.map_or_else(|| "n/a".into(), |n| n.to_string()),
            fmt(self.s_m),
            fmt(self.s_s),
        ]
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = xs.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Per-frame rows (disparity against the previous frame), one summary
/// row per scene and a final row over all scenes.
pub fn evaluate(names: &[String], preds: &[Vec<LabelGrid>], gts: &[Vec<LabelGrid>], tax: &ClassTaxonomy) -> Result<EvalTable> {
    if names.is_empty() || names.len() != preds.len() || preds.len() != gts.len() {
        return Err(CliError::usage(format!(
            "{} scene names, {} predicted scenes, {} ground-truth scenes",
            names.len(),
            preds.len(),
            gts.len()
        )));
    }
    let mut rows = Vec::new();
    let mut total = Confusion::new(tax.num_classes());
    let (mut sm, mut ss, mut dm, mut ds, mut nmc, mut nsc) = (Vec::new(), Vec::new(), Vec::new(), Vec::new(), 0, 0);
    for ((name, p), g) in names.iter().zip(preds).zip(gts) {
        let ev = evaluate_scene(p, g, tax)?;
        for (k, f) in ev.frames.iter().enumerate() {
            rows.push(EvalRow {
                scene: name.clone(),
                frame: k.to_string(),
                iou: Some(f.iou),
                miou_all: f.miou_all,
                miou_gmo: f.miou_gmo,
                miou_gso: f.miou_gso,
                delta_m: f.disparity.map(|d| 100.0 * d.delta_m),
                delta_s: f.disparity.map(|d| 100.0 * d.delta_s),
                n_mc: f.disparity.map(|d| d.n_mc),
                n_sc: f.disparity.map(|d| d.n_sc),
                s_m: None,
                s_s: None,
            });
        }
        let pairs = &ev.consistency.pairs;
        let (scene_dm, scene_ds) = (
            mean(pairs.iter().map(|d| 100.0 * d.delta_m)),
            mean(pairs.iter().map(|d| 100.0 * d.delta_s)),
        );
        let (scene_nmc, scene_nsc) = (pairs.iter().map(|d| d.n_mc).sum::<u64>(), pairs.iter().map(|d| d.n_sc).sum::<u64>());
        rows.push(EvalRow {
            scene: name.clone(),
            frame: ALL.into(),
            iou: Some(ev.confusion.iou()),
            miou_all: ev.confusion.miou(tax, Group::All),
            miou_gmo: ev.confusion.miou(tax, Group::Gmo),
            miou_gso: ev.confusion.miou(tax, Group::Gso),
            delta_m: scene_dm,
            delta_s: scene_ds,
            n_mc: Some(scene_nmc),
            n_sc: Some(scene_nsc),
            s_m: Some(100.0 * ev.consistency.s_m),
            s_s: Some(100.0 * ev.consistency.s_s),
        });
        total.merge(&ev.confusion);
        sm.push(100.0 * ev.consistency.s_m);
        ss.push(100.0 * ev.consistency.s_s);
        dm.extend(scene_dm);
        ds.extend(scene_ds);
        nmc += scene_nmc;
        nsc += scene_nsc;
    }
    let summary = Summary {
        iou: total.iou(),
        miou_all: total.miou(tax, Group::All),
        miou_gmo: total.miou(tax, Group::Gmo),
        miou_gso: total.miou(tax, Group::Gso),
        s_m: mean(sm.into_iter()).expect("at least one scene"),
        s_s: mean(ss.into_iter()).expect("at least one scene"),
    };
    rows.push(EvalRow {
        scene: MEAN_SCENE.into(),
        frame: ALL.into(),
        iou: Some(summary.iou),
        miou_all: summary.miou_all,
        miou_gmo: summary.miou_gmo,
        miou_gso: summary.miou_gso,
        delta_m: mean(dm.into_iter()),
        delta_s: mean(ds.into_iter()),
        n_mc: Some(nmc),
        n_sc: Some(nsc),
        s_m: Some(summary.s_m),
        s_s: Some(summary.s_s),
    });
    Ok(EvalTable { rows, summary })
}

pub fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::io(path, e))?;
    w.write_record(header).map_err(|e| CliError::io(path, e))?;
    for r in rows {
        w.write_record(&r).map_err(|e| CliError::io(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn write_eval_csv(path: &Path, table: &EvalTable) -> Result<()> {
    write_csv(path, &COLUMNS, table.rows.iter().map(EvalRow::fields))
}
