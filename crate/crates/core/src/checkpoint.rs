//! Checkpoint directories: `manifest.json`, one OCLT file per parameter
//! under `params/` and one per normalisation buffer under `buffers/`.

use std::fs;
use std::path::{Path, PathBuf};

use occ_tensor::ops::norm::RunningStats;
use occ_tensor::{io, ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::base::{load_by_name, store_checksum, BaseNet, BaseShape};
use crate::episode_io::{read_json, write_json};
use crate::error::{CoreError, Result};
use crate::occlinker::{OccLinker, PluginConfig};

pub const CHECKPOINT_FORMAT: &str = "occlinker-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Base,
    Plugin,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub frozen: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub kind: Kind,
    pub shape: BaseShape,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plugin: Option<PluginConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub substeps: Option<usize>,
    pub params: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub buffers: Vec<TensorEntry>,
    /// [`store_checksum`] of the parameters.
    pub checksum: String,
}

fn write_params(store: &ParamStore, dir: &Path) -> Result<Vec<TensorEntry>> {
    let pdir = dir.join("params");
    fs::create_dir_all(&pdir).map_err(|e| CoreError::file(&pdir, e))?;
    store
        .iter()
        .map(|(_, p)| {
            let file = format!("params/{}.oclt", p.name);
            io::save(&dir.join(&file), &p.value)?;
            Ok(TensorEntry {
                name: p.name.clone(),
                file,
                shape: p.value.shape().to_vec(),
                frozen: p.frozen,
            })
        })
        .collect()
}

fn write_buffers(running: &[RunningStats], prefix: &str, dir: &Path) -> Result<Vec<TensorEntry>> {
    if running.is_empty() {
        return Ok(Vec::new());
    }
    let bdir = dir.join("buffers");
    fs::create_dir_all(&bdir).map_err(|e| CoreError::file(&bdir, e))?;
    let mut out = Vec::new();
    for (i, r) in running.iter().enumerate() {
        for (what, v) in [("running_mean", &r.mean), ("running_var", &r.var)] {
            let name = format!("{prefix}.{i}.{what}");
            let file = format!("buffers/{name}.oclt");
            let t = Tensor::new(vec![v.len()], v.clone())?;
            io::save(&dir.join(&file), &t)?;
            out.push(TensorEntry {
                name,
                file,
                shape: vec![v.len()],
                frozen: false,
            });
        }
    }
    Ok(out)
}

fn read_entry(dir: &Path, e: &TensorEntry) -> Result<Tensor> {
    let path: PathBuf = dir.join(&e.file);
    let t = io::load(&path)?;
    if t.shape() != e.shape {
        return Err(CoreError::file(
            &path,
            format!("holds {:?}, manifest says {:?}", t.shape(), e.shape),
        ));
    }
    Ok(t)
}

fn read_manifest(dir: &Path, kind: Kind) -> Result<Manifest> {
    let m: Manifest = read_json(&dir.join("manifest.json"))?;
    if m.format != CHECKPOINT_FORMAT || m.version != CHECKPOINT_VERSION {
        return Err(CoreError::file(
            dir.join("manifest.json"),
            format!("unsupported checkpoint {} v{}", m.format, m.version),
        ));
    }
    if m.kind != kind {
        return Err(CoreError::file(dir, format!("expected a {kind:?} checkpoint, found {:?}", m.kind)));
    }
    Ok(m)
}

fn load_store(dir: &Path, m: &Manifest, into: &mut ParamStore) -> Result<()> {
    let mut loaded = ParamStore::new();
    for e in &m.params {
        loaded.add(e.name.clone(), read_entry(dir, e)?);
    }
    if loaded.len() != into.len() {
        return Err(CoreError::file(
            dir,
            format!("{} parameters on disk, model has {}", loaded.len(), into.len()),
        ));
    }
    load_by_name(into, &loaded)?;
    let sum = store_checksum(into);
    if sum != m.checksum {
        return Err(CoreError::file(dir, format!("checksum {sum} does not match manifest {}", m.checksum)));
    }
    Ok(())
}

pub fn save_base(base: &BaseNet, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CoreError::file(dir, e))?;
    let m = Manifest {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        kind: Kind::Base,
        shape: base.shape,
        plugin: None,
        substeps: None,
        params: write_params(&base.store, dir)?,
        buffers: Vec::new(),
        checksum: base.checksum(),
    };
    write_json(&dir.join("manifest.json"), &m)
}

/// Loads a base network; frozen flags are restored as saved.
pub fn load_base(dir: &Path) -> Result<BaseNet> {
    let m = read_manifest(dir, Kind::Base)?;
    let mut base = BaseNet::new(m.shape, 0);
    load_store(dir, &m, &mut base.store)?;
    if m.params.iter().all(|e| e.frozen) {
        base.freeze();
    }
    Ok(base)
}

pub fn save_plugin(plugin: &OccLinker, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CoreError::file(dir, e))?;
    let m = Manifest {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        kind: Kind::Plugin,
        shape: plugin.shape,
        plugin: Some(plugin.cfg),
        substeps: Some(plugin.substeps),
        params: write_params(&plugin.store, dir)?,
        buffers: write_buffers(&plugin.running, "occlinker.motion_encoder", dir)?,
        checksum: store_checksum(&plugin.store),
    };
    write_json(&dir.join("manifest.json"), &m)
}

pub fn load_plugin(dir: &Path) -> Result<OccLinker> {
    let m = read_manifest(dir, Kind::Plugin)?;
    let missing = |what: &str| CoreError::file(dir, format!("plugin manifest lacks {what}"));
    let cfg = m.plugin.ok_or_else(|| missing("plugin config"))?;
    let substeps = m.substeps.ok_or_else(|| missing("substeps"))?;
    let mut plugin = OccLinker::new(cfg, m.shape, substeps, 0)?;
    load_store(dir, &m, &mut plugin.store)?;
    if m.buffers.len() != 2 * plugin.running.len() {
        return Err(CoreError::file(
            dir,
            format!("{} buffers on disk, expected {}", m.buffers.len(), 2 * plugin.running.len()),
        ));
    }
    for (r, pair) in plugin.running.iter_mut().zip(m.buffers.chunks(2)) {
        r.mean = read_entry(dir, &pair[0])?.data().to_vec();
        r.var = read_entry(dir, &pair[1])?.data().to_vec();
    }
    Ok(plugin)
}

/// Checksum recorded in a checkpoint manifest, without loading tensors.
pub fn manifest_checksum(dir: &Path) -> Result<String> {
    let m: Manifest = read_json(&dir.join("manifest.json"))?;
    Ok(m.checksum)
}
