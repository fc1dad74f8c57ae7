//! Subcommands. Every command writes the effective configuration
//! (`config.toml`) and the content hashes of its inputs (`inputs.json`)
//! into `--out` before doing any work.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use occ_tensor::Tensor;
use occlinker_core::checkpoint::{load_base, load_plugin, save_base, save_plugin};
use occlinker_core::episode_io::{export_dataset, import_dataset, read_json, write_json, Dataset, DatasetManifest};
use occlinker_core::training::{LossReport, TrainReport};
use occlinker_core::{BaseNet, ClassTaxonomy, LabelGrid, SceneSpec};
use serde::Serialize;

use crate::ablation::{run_ablation, write_ablation_csv};
use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::eval::{evaluate, write_csv, write_eval_csv, EvalTable};
use crate::hash::input_manifest;
use crate::pipeline::{base_gate_score, fit_base, fit_plugin, make_dataset, predict, BASE_GATE};
use crate::report::build_report;

#[derive(Debug, Parser)]
#[command(name = "occlinker", version, about = "Temporal deflickering plug-in for occupancy prediction")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run seed; overrides the config value and is required without one.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a train/held-out FlickerWorld dataset.
    GenData {
        /// Scene specification (TOML) replacing the config's scene template.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        heldout: Option<usize>,
    },
    /// Train the base network on clean renders.
    TrainBase {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train a plug-in against a frozen base.
    TrainPlugin {
        /// Base run directory or checkpoint directory.
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score predictions on the held-out split.
    Eval {
        /// Dataset whose held-out split is the ground truth.
        #[arg(long, alias = "data")]
        gt: PathBuf,
        /// Class taxonomy (JSON); defaults to the dataset's own.
        #[arg(long)]
        taxonomy: Option<PathBuf>,
        /// Directory of `<episode>.oclt` label stacks.
        #[arg(long, conflicts_with_all = ["base", "plugin"])]
        pred: Option<PathBuf>,
        /// Base run or checkpoint directory to predict with.
        #[arg(long, required_unless_present = "pred")]
        base: Option<PathBuf>,
        /// Plug-in run or checkpoint directory applied on top of `--base`.
        #[arg(long, requires = "base")]
        plugin: Option<PathBuf>,
    },
    /// Run the ablation matrix against one frozen base.
    Ablate {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated variant names; defaults to the config list.
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<String>>,
    },
    /// Merge evaluation CSVs of several runs.
    Report {
        /// Run directories or CSV files.
        runs: Vec<PathBuf>,
    },
    /// Data, base, plug-in and evaluation in one go.
    Pipeline,
}

/// Writes the config echo and the input hashes.
fn provenance(out: &Path, cfg: &RunConfig, inputs: &[(&str, &Path)]) -> Result<()> {
    if let Some((role, p)) = inputs.iter().find(|(_, p)| !p.exists()) {
        return Err(CliError::usage(format!("{}: {role} input not found", p.display())));
    }
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let toml = cfg.to_toml();
    fs::write(out.join("config.toml"), &toml).map_err(|e| CliError::io(out, e))?;
    let man = input_manifest(inputs, &toml)?;
    write_json(&out.join("inputs.json"), &man)?;
    Ok(())
}

fn load_config(g: &Global) -> Result<RunConfig> {
    match (&g.config, g.seed) {
        (Some(p), seed) => {
            let mut c = RunConfig::load(p)?;
            if let Some(s) = seed {
                c.seed = s;
            }
            Ok(c)
        }
        (None, Some(s)) => Ok(RunConfig::with_seed(s)),
        (None, None) => Err(CliError::usage("--seed is required without --config")),
    }
}

/// `dir/checkpoint` for a run directory, else `dir` itself.
pub fn checkpoint_dir(dir: &Path) -> PathBuf {
    let sub = dir.join("checkpoint");
    if sub.is_dir() {
        sub
    } else {
        dir.to_path_buf()
    }
}

fn load_frozen_base(dir: &Path) -> Result<BaseNet> {
    let mut b = load_base(&checkpoint_dir(dir))?;
    b.freeze();
    Ok(b)
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    if !dir.join("manifest.json").is_file() {
        return Err(CliError::usage(format!("{}: not a dataset (no manifest.json)", dir.display())));
    }
    Ok(import_dataset(dir)?)
}

fn heldout_names(dir: &Path) -> Result<Vec<String>> {
    let man: DatasetManifest = read_json(&dir.join("manifest.json"))?;
    Ok(man.heldout)
}

/// Labels of one episode as a `[M, H, W, D]` tensor.
pub fn stack_labels(grids: &[LabelGrid]) -> Result<Tensor> {
    let dims = grids.first().ok_or_else(|| CliError::usage("empty prediction"))?.dims;
    let data = grids.iter().flat_map(|g| g.data.iter().map(|&c| c as f64)).collect();
    Ok(Tensor::new(vec![grids.len(), dims[0], dims[1], dims[2]], data)?)
}

pub fn unstack_labels(t: &Tensor, classes: usize, path: &Path) -> Result<Vec<LabelGrid>> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(CliError::io(path, format!("expected [M, H, W, D] labels, got {s:?}")));
    }
    let n = s[1] * s[2] * s[3];
    t.data()
        .chunks(n)
        .map(|c| {
            let g = Tensor::new(s[1..].to_vec(), c.to_vec())?;
            LabelGrid::from_tensor(&g, classes).map_err(|e| CliError::io(path, e))
        })
        .collect()
}

fn write_losses(path: &Path, losses: &[LossReport]) -> Result<()> {
    let rows = losses.iter().map(|l| {
        vec![
            l.step.to_string(),
            format!("{:.6}", l.total),
            format!("{:.6}", l.ce),
            format!("{:.6}", l.focal),
            format!("{:.6}", l.l1),
        ]
    });
    write_csv(path, &["step", "total", "ce", "focal", "l1"], rows)
}

fn write_epochs(path: &Path, rep: &TrainReport) -> Result<()> {
    let f = |v: Option<f64>| v.map_or_else(|| "n/a".into(), |x| format!("{x:.2}"));
    let rows = rep.epochs.iter().map(|e| {
        vec![
            e.epoch.to_string(),
            format!("{:.6}", e.mean_loss),
            f(e.val.map(|v| v.iou)),
            f(e.val.and_then(|v| v.miou)),
            f(e.val.map(|v| v.s_m)),
            f(e.val.map(|v| v.s_s)),
        ]
    });
    write_csv(path, &["epoch", "mean_loss", "val_IoU", "val_mIoU", "val_S_m", "val_S_s"], rows)
}

#[derive(Serialize)]
struct BaseMetrics {
    miou: f64,
    gate: f64,
    pass: bool,
    checksum: String,
}

#[derive(Serialize)]
struct PluginMetrics {
    base_checksum: String,
    epochs: usize,
    final_loss: Option<f64>,
}

fn write_json_pretty<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(v).map_err(|e| CliError::io(path, e))?;
    fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

fn gen_data(cfg: &RunConfig, out: &Path) -> Result<Dataset> {
    let ds = make_dataset(cfg)?;
    export_dataset(&ds, out)?;
    log::info!("wrote {} train and {} held-out episodes to {}", ds.train.len(), ds.heldout.len(), out.display());
    Ok(ds)
}

fn train_base_cmd(cfg: &RunConfig, ds: &Dataset, out: &Path) -> Result<BaseNet> {
    let (mut base, losses) = fit_base(cfg, ds)?;
    save_base(&base, &out.join("checkpoint"))?;
    write_losses(&out.join("loss.csv"), &losses)?;
    base.freeze();
    let miou = base_gate_score(&base, ds)?;
    let pass = miou >= BASE_GATE;
    if !pass {
        log::warn!("base held-out mIoU {miou:.2} is below the {BASE_GATE} gate");
    }
    write_json_pretty(
        &out.join("base_metrics.json"),
        &BaseMetrics {
            miou,
            gate: BASE_GATE,
            pass,
            checksum: base.checksum(),
        },
    )?;
    Ok(base)
}

fn train_plugin_cmd(cfg: &RunConfig, base: &BaseNet, ds: &Dataset, out: &Path) -> Result<occlinker_core::OccLinker> {
    if !base.is_frozen() {
        return Err(CliError::usage("plug-in training needs a frozen base"));
    }
    let before = base.checksum();
    let (plugin, rep) = fit_plugin(cfg.seed, base, ds, cfg.plugin, &cfg.train)?;
    let after = base.checksum();
    if before != after {
        return Err(CliError::Failed(format!("base checksum changed during plug-in training: {before} -> {after}")));
    }
    save_plugin(&plugin, &out.join("checkpoint"))?;
    write_losses(&out.join("loss.csv"), &rep.losses)?;
    write_epochs(&out.join("epochs.csv"), &rep)?;
    write_json_pretty(
        &out.join("plugin_metrics.json"),
        &PluginMetrics {
            base_checksum: after,
            epochs: rep.epochs.len(),
            final_loss: rep.epochs.last().map(|e| e.mean_loss),
        },
    )?;
    Ok(plugin)
}

fn write_eval(out: &Path, table: &EvalTable) -> Result<()> {
    write_eval_csv(&out.join("report.csv"), table)?;
    write_json_pretty(&out.join("summary.json"), &table.summary)
}

fn eval_heldout(
    ds: &Dataset,
    names: &[String],
    preds: &[Vec<LabelGrid>],
    tax: &ClassTaxonomy,
    out: &Path,
) -> Result<EvalTable> {
    let gts: Vec<_> = ds.heldout.iter().map(|e| e.labels.clone()).collect();
    let table = evaluate(names, preds, &gts, tax)?;
    write_eval(out, &table)?;
    Ok(table)
}

fn required_out(g: &Global) -> Result<&Path> {
    g.out.as_deref().ok_or_else(|| CliError::usage("--out is required"))
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.global)?;
    let out = required_out(&cli.global)?;
    crate::pipeline::threads()?;
    match cli.command {
        Command::GenData { spec, episodes, heldout } => {
            let mut cfg = cfg;
            if let Some(p) = &spec {
                let text = fs::read_to_string(p).map_err(|e| CliError::usage(format!("{}: {e}", p.display())))?;
                cfg.world.scene =
                    toml::from_str::<SceneSpec>(&text).map_err(|e| CliError::usage(format!("{}: {e}", p.display())))?;
            }
            cfg.world.train_episodes = episodes.unwrap_or(cfg.world.train_episodes);
            cfg.world.heldout_episodes = heldout.unwrap_or(cfg.world.heldout_episodes);
            let inputs: Vec<(&str, &Path)> = spec.as_deref().map(|p| ("spec", p)).into_iter().collect();
            provenance(out, &cfg, &inputs)?;
            gen_data(&cfg, out)?;
        }
        Command::TrainBase { data, epochs } => {
            let mut cfg = cfg;
            cfg.base.epochs = epochs.unwrap_or(cfg.base.epochs);
            provenance(out, &cfg, &[("data", &data)])?;
            let ds = load_dataset(&data)?;
            train_base_cmd(&cfg, &ds, out)?;
        }
        Command::TrainPlugin { base, data, epochs } => {
            let mut cfg = cfg;
            cfg.train.epochs = epochs.unwrap_or(cfg.train.epochs);
            let ckpt = checkpoint_dir(&base);
            provenance(out, &cfg, &[("base", &ckpt), ("data", &data)])?;
            let b = load_frozen_base(&base)?;
            let ds = load_dataset(&data)?;
            train_plugin_cmd(&cfg, &b, &ds, out)?;
        }
        Command::Eval {
            gt,
            taxonomy,
            pred,
            base,
            plugin,
        } => {
            let mut inputs: Vec<(&str, PathBuf)> = vec![("gt", gt.clone())];
            if let Some(t) = &taxonomy {
                if !t.is_file() {
                    return Err(CliError::usage(format!("{}: taxonomy file not found", t.display())));
                }
                inputs.push(("taxonomy", t.clone()));
            }
            inputs.extend(pred.iter().map(|p| ("pred", p.clone())));
            inputs.extend(base.iter().map(|p| ("base", checkpoint_dir(p))));
            inputs.extend(plugin.iter().map(|p| ("plugin", checkpoint_dir(p))));
            let refs: Vec<(&str, &Path)> = inputs.iter().map(|(r, p)| (*r, p.as_path())).collect();
            provenance(out, &cfg, &refs)?;

            let ds = load_dataset(&gt)?;
            let names = heldout_names(&gt)?;
            let tax = match &taxonomy {
                Some(t) => {
                    let tax: ClassTaxonomy = read_json(t)?;
                    ClassTaxonomy::new(tax.names, tax.tags).map_err(|e| CliError::usage(format!("{}: {e}", t.display())))?
                }
                None => ds.heldout.first().ok_or_else(|| CliError::usage("dataset has no held-out episodes"))?.taxonomy.clone(),
            };
            let preds = match (&pred, &base) {
                (Some(dir), _) => names
                    .iter()
                    .map(|n| {
                        let p = dir.join(format!("{n}.oclt"));
                        let t = occ_tensor::io::load(&p).map_err(|e| CliError::io(&p, e))?;
                        unstack_labels(&t, tax.num_classes(), &p)
                    })
                    .collect::<Result<Vec<_>>>()?,
                (None, Some(b)) => {
                    let b = load_frozen_base(b)?;
                    let p = plugin.as_deref().map(|p| load_plugin(&checkpoint_dir(p))).transpose()?;
                    let preds = predict(&b, p.as_ref(), &ds.heldout)?;
                    let pdir = out.join("pred");
                    fs::create_dir_all(&pdir).map_err(|e| CliError::io(&pdir, e))?;
                    for (n, g) in names.iter().zip(&preds) {
                        occ_tensor::io::save(&pdir.join(format!("{n}.oclt")), &stack_labels(g)?)?;
                    }
                    preds
                }
                (None, None) => unreachable!("clap requires --pred or --base"),
            };
            let t = eval_heldout(&ds, &names, &preds, &tax, out)?;
            log::info!("IoU {:.2}, S_m {:.2}, S_s {:.2}", t.summary.iou, t.summary.s_m, t.summary.s_s);
        }
        Command::Ablate { base, data, variants } => {
            let ckpt = checkpoint_dir(&base);
            provenance(out, &cfg, &[("base", &ckpt), ("data", &data)])?;
            let b = load_frozen_base(&base)?;
            let ds = load_dataset(&data)?;
            let variants = variants.unwrap_or_else(|| cfg.eval.variants.clone());
            let rows = run_ablation(&cfg, &b, &ds, &variants, Some(out))?;
            write_ablation_csv(&out.join("ablation.csv"), &rows)?;
            let failed: Vec<_> = rows.iter().filter(|r| r.error.is_some()).map(|r| r.variant.as_str()).collect();
            if !failed.is_empty() {
                return Err(CliError::Failed(format!("variants failed: {}", failed.join(", "))));
            }
        }
        Command::Report { runs } => {
            if runs.is_empty() {
                return Err(CliError::usage("report needs at least one run directory or CSV"));
            }
            let existing: Vec<(&str, &Path)> = runs.iter().filter(|p| p.exists()).map(|p| ("run", p.as_path())).collect();
            provenance(out, &cfg, &existing)?;
            let o = build_report(&runs, out)?;
            log::info!("merged {} runs, flagged {}", o.runs, o.flagged.len());
        }
        Command::Pipeline => {
            provenance(out, &cfg, &[])?;
            run_pipeline(&cfg, out)?;
        }
    }
    Ok(())
}

/// Full smoke run under `out`: `data/`, `base/`, `plugin/`, `eval/base/`
/// and `eval/plugin/`.
pub fn run_pipeline(cfg: &RunConfig, out: &Path) -> Result<()> {
    let data = out.join("data");
    let ds = gen_data(cfg, &data)?;
    let base_dir = out.join("base");
    fs::create_dir_all(&base_dir).map_err(|e| CliError::io(&base_dir, e))?;
    let base = train_base_cmd(cfg, &ds, &base_dir)?;
    let plugin_dir = out.join("plugin");
    fs::create_dir_all(&plugin_dir).map_err(|e| CliError::io(&plugin_dir, e))?;
    let plugin = train_plugin_cmd(cfg, &base, &ds, &plugin_dir)?;
    let names = heldout_names(&data)?;
    let tax = &ds.heldout.first().ok_or_else(|| CliError::usage("no held-out episodes"))?.taxonomy;
    for (label, p) in [("base", None), ("plugin", Some(&plugin))] {
        let dir = out.join("eval").join(label);
        fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        let preds = predict(&base, p, &ds.heldout)?;
        eval_heldout(&ds, &names, &preds, tax, &dir)?;
    }
    Ok(())
}
