//! Occupancy accuracy (IoU, grouped mIoU) and temporal consistency.
//!
//! A voxel pair `(a, b)` from consecutive frames is a moving-object change
//! (MOC) when either label is GMO and a static-object change (SOC) when both
//! are GSO. `delta_m` is the fraction of MOC voxels whose labels differ,
//! `delta_s` likewise over SOC voxels; an empty region gives 0. A scene
//! scores `S = 1 - mean(delta)` over its consecutive pairs. Percentages are
//! on a 0-100 scale, consistency values on 0-1.

use crate::error::{CoreError, Result};
use crate::grid::LabelGrid;
use crate::taxonomy::{ClassTaxonomy, Group, Tag};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Change {
    Moc,
    Soc,
    Neither,
}

pub fn classify_change(a: usize, b: usize, taxonomy: &ClassTaxonomy) -> Change {
    let (ta, tb) = (taxonomy.tag(a), taxonomy.tag(b));
    if ta == Tag::Gmo || tb == Tag::Gmo {
        Change::Moc
    } else if ta == Tag::Gso && tb == Tag::Gso {
        Change::Soc
    } else {
        Change::Neither
    }
}

fn check_pair(a: &LabelGrid, b: &LabelGrid, taxonomy: &ClassTaxonomy) -> Result<()> {
    if a.dims != b.dims {
        return Err(CoreError::Shape(format!("grids {:?} and {:?}", a.dims, b.dims)));
    }
    let c = taxonomy.num_classes();
    if let Some(&v) = a.data.iter().chain(&b.data).find(|&&v| v as usize >= c) {
        return Err(CoreError::Shape(format!("label {v} outside a {c}-class taxonomy")));
    }
    Ok(())
}

/// Class-agnostic occupancy IoU; two empty grids score 100.
pub fn iou(pred: &LabelGrid, gt: &LabelGrid, taxonomy: &ClassTaxonomy) -> Result<f64> {
    let mut c = Confusion::new(taxonomy.num_classes());
    c.add(pred, gt, taxonomy)?;
    Ok(c.iou())
}

/// Mean per-class IoU over the group's classes that appear in either grid;
/// `None` when no such class appears.
pub fn miou_grouped(pred: &LabelGrid, gt: &LabelGrid, taxonomy: &ClassTaxonomy, group: Group) -> Result<Option<f64>> {
    let mut c = Confusion::new(taxonomy.num_classes());
    c.add(pred, gt, taxonomy)?;
    Ok(c.miou(taxonomy, group))
}

/// Running intersection/union counts so scene- and dataset-level scores
/// aggregate voxels rather than averaging per-frame percentages.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub occ_inter: u64,
    pub occ_union: u64,
    pub inter: Vec<u64>,
    pub union: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Self {
            occ_inter: 0,
            occ_union: 0,
            inter: vec![0; classes],
            union: vec![0; classes],
        }
    }

    pub fn add(&mut self, pred: &LabelGrid, gt: &LabelGrid, taxonomy: &ClassTaxonomy) -> Result<()> {
        check_pair(pred, gt, taxonomy)?;
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            let (p, g) = (p as usize, g as usize);
            let (po, go) = (taxonomy.is_occupied(p), taxonomy.is_occupied(g));
            self.occ_inter += (po && go) as u64;
            self.occ_union += (po || go) as u64;
            if p == g {
                self.inter[p] += 1;
                self.union[p] += 1;
            } else {
                self.union[p] += 1;
                self.union[g] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Confusion) {
        self.occ_inter += other.occ_inter;
        self.occ_union += other.occ_union;
        for (a, b) in self.inter.iter_mut().zip(&other.inter) {
            *a += b;
        }
        for (a, b) in self.union.iter_mut().zip(&other.union) {
            *a += b;
        }
    }

    pub fn iou(&self) -> f64 {
        if self.occ_union == 0 {
            100.0
        } else {
            100.0 * self.occ_inter as f64 / self.occ_union as f64
        }
    }

    pub fn miou(&self, taxonomy: &ClassTaxonomy, group: Group) -> Option<f64> {
        let ious: Vec<f64> = (0..self.inter.len())
            .filter(|&c| taxonomy.in_group(c, group) && self.union[c] > 0)
            .map(|c| self.inter[c] as f64 / self.union[c] as f64)
            .collect();
        (!ious.is_empty()).then(|| 100.0 * ious.iter().sum::<f64>() / ious.len() as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Disparity {
    pub delta_m: f64,
    pub delta_s: f64,
    pub n_mc: u64,
    pub n_sc: u64,
    pub changed_m: u64,
    pub changed_s: u64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn frame_disparity(a: &LabelGrid, b: &LabelGrid, taxonomy: &ClassTaxonomy) -> Result<Disparity> {
    check_pair(a, b, taxonomy)?;
    let c = taxonomy.num_classes();
    let table: Vec<Change> = (0..c * c).map(|k| classify_change(k / c, k % c, taxonomy)).collect();
    let (mut n_mc, mut n_sc, mut changed_m, mut changed_s) = (0u64, 0u64, 0u64, 0u64);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        let differ = (x != y) as u64;
        match table[x as usize * c + y as usize] {
            Change::Moc => {
                n_mc += 1;
                changed_m += differ;
            }
            Change::Soc => {
                n_sc += 1;
                changed_s += differ;
            }
            Change::Neither => {}
        }
    }
    Ok(Disparity {
        delta_m: ratio(changed_m, n_mc),
        delta_s: ratio(changed_s, n_sc),
        n_mc,
        n_sc,
        changed_m,
        changed_s,
    })
}

/// Reference implementation: a literal walk over every voxel with the
/// nine tag pairs spelled out.
pub fn oracle_disparity(a: &LabelGrid, b: &LabelGrid, taxonomy: &ClassTaxonomy) -> (f64, f64) {
    use Tag::*;
    let mut moc_total = 0u64;
    let mut moc_diff = 0u64;
    let mut soc_total = 0u64;
    let mut soc_diff = 0u64;
    for h in 0..a.dims[0] {
        for w in 0..a.dims[1] {
            for d in 0..a.dims[2] {
                let (li, lj) = (a.get(h, w, d), b.get(h, w, d));
                let (is_moc, is_soc) = match (taxonomy.tag(li as usize), taxonomy.tag(lj as usize)) {
                    (Gmo, Gmo) => (true, false),
                    (Gmo, Gso) => (true, false),
                    (Gmo, Unoccupied) => (true, false),
                    (Gso, Gmo) => (true, false),
                    (Unoccupied, Gmo) => (true, false),
                    (Gso, Gso) => (false, true),
                    (Gso, Unoccupied) => (false, false),
                    (Unoccupied, Gso) => (false, false),
                    (Unoccupied, Unoccupied) => (false, false),
                };
                let delta = if li != lj { 1 } else { 0 };
                if is_moc {
                    moc_total += 1;
                    moc_diff += delta;
                }
                if is_soc {
                    soc_total += 1;
                    soc_diff += delta;
                }
            }
        }
    }
    let dm = if moc_total > 0 { moc_diff as f64 / moc_total as f64 } else { 0.0 };
    let ds = if soc_total > 0 { soc_diff as f64 / soc_total as f64 } else { 0.0 };
    (dm, ds)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConsistency {
    pub s_m: f64,
    pub s_s: f64,
    /// `pairs[k]` compares frames k and k+1.
    pub pairs: Vec<Disparity>,
}

pub fn temporal_consistency(frames: &[LabelGrid], taxonomy: &ClassTaxonomy) -> Result<SceneConsistency> {
    if frames.len() < 2 {
        return Err(CoreError::Undefined(format!(
            "temporal consistency needs at least 2 frames, got {}",
            frames.len()
        )));
    }
    let pairs = frames
        .windows(2)
        .map(|w| frame_disparity(&w[0], &w[1], taxonomy))
        .collect::<Result<Vec<_>>>()?;
    let n = pairs.len() as f64;
    Ok(SceneConsistency {
        s_m: 1.0 - pairs.iter().map(|p| p.delta_m).sum::<f64>() / n,
        s_s: 1.0 - pairs.iter().map(|p| p.delta_s).sum::<f64>() / n,
        pairs,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyReport {
    pub scenes: Vec<SceneConsistency>,
    pub mean_s_m: f64,
    pub mean_s_s: f64,
}

pub fn consistency_report(scenes: &[Vec<LabelGrid>], taxonomy: &ClassTaxonomy) -> Result<ConsistencyReport> {
    let scenes = scenes
        .iter()
        .map(|s| temporal_consistency(s, taxonomy))
        .collect::<Result<Vec<_>>>()?;
    if scenes.is_empty() {
        return Err(CoreError::Undefined("no scenes to report".into()));
    }
    let n = scenes.len() as f64;
    Ok(ConsistencyReport {
        mean_s_m: scenes.iter().map(|s| s.s_m).sum::<f64>() / n,
        mean_s_s: scenes.iter().map(|s| s.s_s).sum::<f64>() / n,
        scenes,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameEval {
    pub iou: f64,
    pub miou_all: Option<f64>,
    pub miou_gmo: Option<f64>,
    pub miou_gso: Option<f64>,
    /// Against the previous frame; `None` for the first.
    pub disparity: Option<Disparity>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneEval {
    pub frames: Vec<FrameEval>,
    pub confusion: Confusion,
    pub consistency: SceneConsistency,
}

pub fn evaluate_scene(preds: &[LabelGrid], gts: &[LabelGrid], taxonomy: &ClassTaxonomy) -> Result<SceneEval> {
    if preds.len() != gts.len() {
        return Err(CoreError::Shape(format!("{} predicted frames, {} ground-truth", preds.len(), gts.len())));
    }
    let consistency = temporal_consistency(preds, taxonomy)?;
    let mut total = Confusion::new(taxonomy.num_classes());
    let mut frames = Vec::with_capacity(preds.len());
    for (k, (p, g)) in preds.iter().zip(gts).enumerate() {
        let mut c = Confusion::new(taxonomy.num_classes());
        c.add(p, g, taxonomy)?;
        total.merge(&c);
        frames.push(FrameEval {
            iou: c.iou(),
            miou_all: c.miou(taxonomy, Group::All),
            miou_gmo: c.miou(taxonomy, Group::Gmo),
            miou_gso: c.miou(taxonomy, Group::Gso),
            disparity: k.checked_sub(1).map(|j| consistency.pairs[j]),
        });
    }
    Ok(SceneEval {
        frames,
        confusion: total,
        consistency,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tax() -> ClassTaxonomy {
        ClassTaxonomy::synthetic(4).unwrap()
    }

    fn grid(data: &[u8]) -> LabelGrid {
        LabelGrid::new([1, 1, data.len()], data.to_vec()).unwrap()
    }

    #[test]
    fn iou_cases() {
        let t = tax();
        let g = grid(&[1, 1, 2, 2, 0, 0]);
        assert_eq!(iou(&g, &g, &t).unwrap(), 100.0);
        assert_eq!(iou(&grid(&[0, 0, 0, 0, 1, 1]), &g, &t).unwrap(), 0.0);
        assert_eq!(iou(&grid(&[1, 1, 0, 0, 0, 0]), &g, &t).unwrap(), 50.0);
        assert_eq!(iou(&grid(&[0; 6]), &grid(&[0; 6]), &t).unwrap(), 100.0);
    }

    #[test]
    fn grouped_miou() {
        let t = tax();
        let gt = grid(&[3, 3, 1, 1, 0, 0]);
        let pred = grid(&[3, 3, 0, 0, 1, 1]);
        assert_eq!(miou_grouped(&pred, &gt, &t, Group::Gmo).unwrap(), Some(100.0));
        assert_eq!(miou_grouped(&pred, &gt, &t, Group::Gso).unwrap(), Some(0.0));
        assert_eq!(miou_grouped(&pred, &gt, &t, Group::All).unwrap(), Some(50.0));
        assert_eq!(miou_grouped(&grid(&[0, 1]), &grid(&[0, 1]), &t, Group::Gmo).unwrap(), None);
    }

    #[test]
    fn change_categories() {
        let t = tax();
        assert_eq!(classify_change(3, 0, &t), Change::Moc);
        assert_eq!(classify_change(1, 2, &t), Change::Soc);
        assert_eq!(classify_change(0, 1, &t), Change::Neither);
        assert_eq!(classify_change(0, 0, &t), Change::Neither);
    }

    #[test]
    fn one_mover_voxel_among_ten() {
        let t = tax();
        let mut a = vec![3u8; 9];
        a.push(0);
        let mut b = vec![3u8; 9];
        b.push(3);
        let d = frame_disparity(&grid(&a), &grid(&b), &t).unwrap();
        assert_eq!((d.n_mc, d.changed_m), (10, 1));
        assert!((d.delta_m - 0.1).abs() < 1e-15);
        assert_eq!(d.delta_s, 0.0);
    }

    #[test]
    fn consistency_closed_forms() {
        let t = tax();
        let same = vec![grid(&[1, 3]); 4];
        let s = temporal_consistency(&same, &t).unwrap();
        assert_eq!((s.s_m, s.s_s), (1.0, 1.0));
        let blink: Vec<LabelGrid> = (0..5).map(|k| grid(&[if k % 2 == 0 { 3 } else { 0 }])).collect();
        assert_eq!(temporal_consistency(&blink, &t).unwrap().s_m, 0.0);
        // pairs with delta_m 0.2 and 0.4 average to 0.3
        let f0 = grid(&[3, 3, 3, 3, 3, 0, 0, 0, 0, 0]);
        let f1 = grid(&[3, 3, 3, 3, 0, 0, 0, 0, 0, 0]);
        let f2 = grid(&[3, 3, 3, 0, 3, 0, 0, 0, 0, 0]);
        let s = temporal_consistency(&[f0, f1, f2], &t).unwrap();
        assert!((s.pairs[0].delta_m - 0.2).abs() < 1e-15 && (s.pairs[1].delta_m - 0.4).abs() < 1e-15);
        assert!((s.s_m - 0.7).abs() < 1e-12);
        assert!(temporal_consistency(&[grid(&[0])], &t).is_err());
    }
}
