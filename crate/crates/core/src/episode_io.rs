//! Episode and dataset directories: a `manifest.json` plus one OCLT tensor
//! file per array.

use std::fs;
use std::path::{Path, PathBuf};

use occ_tensor::{io, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::grid::LabelGrid;
use crate::taxonomy::ClassTaxonomy;
use crate::world::{Episode, MoverPlan, SceneSpec};

pub const EPISODE_FORMAT: &str = "flickerworld-episode";
pub const DATASET_FORMAT: &str = "flickerworld-dataset";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpisodeManifest {
    pub format: String,
    pub version: u32,
    pub keyframes: usize,
    pub views: usize,
    pub substeps: usize,
    pub classes: usize,
    pub spec: SceneSpec,
    pub taxonomy: ClassTaxonomy,
    pub movers: Vec<MoverPlan>,
    pub occlusion: Vec<Vec<bool>>,
    pub labels: ArrayEntry,
    pub keyframe_images: ArrayEntry,
    pub intermediate_images: ArrayEntry,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ego_poses: Option<Vec<[f64; 7]>>,
}

fn stack(parts: &[&Tensor], lead: &[usize]) -> Result<Tensor> {
    let inner: Vec<usize> = match parts.first() {
        Some(t) => t.shape().to_vec(),
        None => Vec::new(),
    };
    let mut data = Vec::with_capacity(parts.len() * inner.iter().product::<usize>());
    for p in parts {
        if p.shape() != inner.as_slice() {
            return Err(CoreError::Shape(format!("cannot stack {:?} with {:?}", p.shape(), inner)));
        }
        data.extend_from_slice(p.data());
    }
    let shape: Vec<usize> = lead.iter().chain(inner.iter()).copied().collect();
    Ok(Tensor::new(shape, data)?)
}

fn unstack(t: &Tensor, lead: usize) -> Vec<Tensor> {
    let inner = &t.shape()[lead..];
    let n: usize = inner.iter().product();
    t.data()
        .chunks(n.max(1))
        .take(t.shape()[..lead].iter().product())
        .map(|c| Tensor::new(inner.to_vec(), c.to_vec()).expect("chunk size"))
        .collect()
}

fn save(dir: &Path, name: &str, t: &Tensor) -> Result<ArrayEntry> {
    io::save(&dir.join(name), t)?;
    Ok(ArrayEntry {
        file: name.to_string(),
        shape: t.shape().to_vec(),
    })
}

fn load(dir: &Path, entry: &ArrayEntry) -> Result<Tensor> {
    let path = dir.join(&entry.file);
    let t = io::load(&path)?;
    if t.shape() != entry.shape.as_slice() {
        return Err(CoreError::file(
            path,
            format!("shape {:?} differs from manifest {:?}", t.shape(), entry.shape),
        ));
    }
    Ok(t)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CoreError::file(path, e))?;
    fs::write(path, text + "\n").map_err(|e| CoreError::file(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CoreError::file(path, e))?;
    serde_json::from_str(&text).map_err(|e| CoreError::file(path, e))
}

pub fn export_episode(ep: &Episode, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CoreError::file(dir, e))?;
    let m = ep.num_keyframes();
    let labels: Vec<Tensor> = ep.labels.iter().map(LabelGrid::to_tensor).collect();
    let labels = stack(&labels.iter().collect::<Vec<_>>(), &[m])?;
    let keyframes = stack(&ep.keyframes.iter().collect::<Vec<_>>(), &[m])?;
    let inter: Vec<&Tensor> = ep.intermediates.iter().flatten().collect();
    let inter = if inter.is_empty() {
        let (h, w) = ep.spec.view_dims();
        Tensor::zeros(&[0, ep.spec.substeps, ep.spec.views, ep.spec.classes + 1, h, w])
    } else {
        stack(&inter, &[ep.intermediates.len(), ep.spec.substeps])?
    };
    let manifest = EpisodeManifest {
        format: EPISODE_FORMAT.into(),
        version: FORMAT_VERSION,
        keyframes: m,
        views: ep.spec.views,
        substeps: ep.spec.substeps,
        classes: ep.spec.classes,
        spec: ep.spec.clone(),
        taxonomy: ep.taxonomy.clone(),
        movers: ep.movers.clone(),
        occlusion: ep.occlusion.clone(),
        labels: save(dir, "labels.oclt", &labels)?,
        keyframe_images: save(dir, "keyframes.oclt", &keyframes)?,
        intermediate_images: save(dir, "intermediates.oclt", &inter)?,
        ego_poses: ep.ego_poses.clone(),
    };
    write_json(&dir.join("manifest.json"), &manifest)
}

pub fn import_episode(dir: &Path) -> Result<Episode> {
    let mpath = dir.join("manifest.json");
    let man: EpisodeManifest = read_json(&mpath)?;
    if man.format != EPISODE_FORMAT || man.version != FORMAT_VERSION {
        return Err(CoreError::file(
            &mpath,
            format!("unsupported format {} v{}", man.format, man.version),
        ));
    }
    man.taxonomy.validate()?;
    let labels_t = load(dir, &man.labels)?;
    let keys_t = load(dir, &man.keyframe_images)?;
    let inter_t = load(dir, &man.intermediate_images)?;
    let (h, w) = man.spec.view_dims();
    let m = man.keyframes;
    let img = [man.views, man.classes + 1, h, w];
    let expect = |t: &Tensor, lead: &[usize], file: &str| -> Result<()> {
        let want: Vec<usize> = lead.iter().chain(img.iter()).copied().collect();
        if t.shape() != want.as_slice() {
            return Err(CoreError::file(dir.join(file), format!("shape {:?}, expected {want:?}", t.shape())));
        }
        Ok(())
    };
    expect(&keys_t, &[m], &man.keyframe_images.file)?;
    expect(&inter_t, &[m.saturating_sub(1), man.substeps], &man.intermediate_images.file)?;
    let grid = man.spec.grid;
    if labels_t.shape() != [m, grid[0], grid[1], grid[2]] {
        return Err(CoreError::file(dir.join(&man.labels.file), "label array does not match the spec grid"));
    }
    let labels = unstack(&labels_t, 1)
        .iter()
        .map(|t| LabelGrid::from_tensor(t, man.classes))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| CoreError::file(dir.join(&man.labels.file), e))?;
    let flat = unstack(&inter_t, 2);
    let intermediates = flat.chunks(man.substeps.max(1)).map(|c| c.to_vec()).collect();
    Ok(Episode {
        spec: man.spec,
        taxonomy: man.taxonomy,
        movers: man.movers,
        occlusion: man.occlusion,
        labels,
        keyframes: unstack(&keys_t, 1),
        intermediates,
        ego_poses: man.ego_poses,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub train: Vec<String>,
    pub heldout: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<Episode>,
    pub heldout: Vec<Episode>,
}

pub fn export_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CoreError::file(dir, e))?;
    let mut man = DatasetManifest {
        format: DATASET_FORMAT.into(),
        version: FORMAT_VERSION,
        train: Vec::new(),
        heldout: Vec::new(),
    };
    for (split, eps, names) in [("train", &ds.train, &mut man.train), ("heldout", &ds.heldout, &mut man.heldout)] {
        for (i, ep) in eps.iter().enumerate() {
            let name = format!("{split}_{i:03}");
            export_episode(ep, &dir.join(&name))?;
            names.push(name);
        }
    }
    write_json(&dir.join("manifest.json"), &man)
}

pub fn import_dataset(dir: &Path) -> Result<Dataset> {
    let mpath: PathBuf = dir.join("manifest.json");
    let man: DatasetManifest = read_json(&mpath)?;
    if man.format != DATASET_FORMAT || man.version != FORMAT_VERSION {
        return Err(CoreError::file(&mpath, format!("unsupported format {} v{}", man.format, man.version)));
    }
    let load = |names: &[String]| names.iter().map(|n| import_episode(&dir.join(n))).collect::<Result<Vec<_>>>();
    Ok(Dataset {
        train: load(&man.train)?,
        heldout: load(&man.heldout)?,
    })
}
