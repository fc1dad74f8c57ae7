//! FlickerWorld: a fixed-frame voxel world with a ground layer, static
//! walls and boxes moving at constant velocity, observed by top-down
//! orthographic cameras. Each view covers one band of `H / views` rows and
//! renders, per column, a one-hot of the highest occupied class (channel 0
//! for an empty column) plus a height channel `(d_top + 1) / D`.
//!
//! Keyframes may hide movers (the occlusion schedule); intermediate frames
//! between keyframes never do. Labels always contain every mover.

use occ_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::grid::LabelGrid;
use crate::taxonomy::{ClassTaxonomy, Tag};

const WORLD_STREAM: u64 = 0;
const OCCLUSION_STREAM: u64 = 1;
const MAX_TRIES: usize = 500;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    /// `[H, W, D]`
    pub grid: [usize; 3],
    pub classes: usize,
    pub views: usize,
    pub keyframes: usize,
    pub substeps: usize,
    pub movers_min: usize,
    pub movers_max: usize,
    /// Box extent `[h, w, d]`.
    pub mover_size: [usize; 3],
    /// Largest per-keyframe displacement along H or W.
    pub max_speed: usize,
    pub walls: usize,
    pub occlusion: OcclusionSpec,
    /// When non-empty these replace the random movers.
    pub scripted_movers: Vec<MoverPlan>,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            grid: [32, 32, 8],
            classes: 4,
            views: 2,
            keyframes: 20,
            substeps: 3,
            movers_min: 1,
            movers_max: 2,
            mover_size: [4, 4, 2],
            max_speed: 1,
            walls: 2,
            occlusion: OcclusionSpec::default(),
            scripted_movers: Vec::new(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OcclusionSpec {
    /// Chance per keyframe that a visible mover starts an occluded run.
    pub rate: f64,
    pub max_run: usize,
    /// Explicit schedule; overrides `rate` when non-empty.
    pub windows: Vec<OcclusionWindow>,
}

impl Default for OcclusionSpec {
    fn default() -> Self {
        Self {
            rate: 0.25,
            max_run: 2,
            windows: Vec::new(),
        }
    }
}

/// Mover `mover` is hidden in keyframes `start..end`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OcclusionWindow {
    pub mover: usize,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoverPlan {
    /// Lowest corner `[h, w, d]` at time 0.
    pub start: [usize; 3],
    /// Displacement per keyframe `[dh, dw, dd]`.
    pub velocity: [i64; 3],
    pub size: [usize; 3],
    pub class: u8,
}

impl MoverPlan {
    pub fn origin_at(&self, tau: f64) -> [i64; 3] {
        let mut o = [0i64; 3];
        for a in 0..3 {
            o[a] = self.start[a] as i64 + (self.velocity[a] as f64 * tau).round() as i64;
        }
        o
    }

    fn in_bounds(&self, tau: f64, dims: [usize; 3]) -> bool {
        let o = self.origin_at(tau);
        (0..3).all(|a| o[a] >= 0 && o[a] as usize + self.size[a] <= dims[a])
    }

    fn overlaps(&self, other: &MoverPlan, tau: f64) -> bool {
        let (a, b) = (self.origin_at(tau), other.origin_at(tau));
        (0..3).all(|k| a[k] < b[k] + other.size[k] as i64 && b[k] < a[k] + self.size[k] as i64)
    }

    /// Voxel indices covered at time `tau`; the plan must be in bounds.
    pub fn voxels(&self, tau: f64, dims: [usize; 3]) -> Vec<usize> {
        let o = self.origin_at(tau).map(|v| v as usize);
        let mut out = Vec::with_capacity(self.size.iter().product());
        for h in o[0]..o[0] + self.size[0] {
            for w in o[1]..o[1] + self.size[1] {
                for d in o[2]..o[2] + self.size[2] {
                    out.push((h * dims[1] + w) * dims[2] + d);
                }
            }
        }
        out
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let [h, w, d] = self.grid;
        if h == 0 || w == 0 || d == 0 {
            return Err(CoreError::Spec(format!("grid {:?} has an empty axis", self.grid)));
        }
        if self.classes < 3 || self.classes > 255 {
            return Err(CoreError::Spec(format!("classes must be in 3..=255, got {}", self.classes)));
        }
        if self.substeps < 2 {
            return Err(CoreError::Spec(format!("need at least 2 substeps per interval, got {}", self.substeps)));
        }
        if self.keyframes < 1 {
            return Err(CoreError::Spec("need at least one keyframe".into()));
        }
        if self.views == 0 || h % self.views != 0 {
            return Err(CoreError::Spec(format!("{} views do not split {h} rows evenly", self.views)));
        }
        if self.movers_min > self.movers_max {
            return Err(CoreError::Spec("movers_min exceeds movers_max".into()));
        }
        let s = self.mover_size;
        if s.contains(&0) || s[0] > h || s[1] > w || s[2] + 1 > d {
            return Err(CoreError::Spec(format!("mover size {s:?} does not fit above the ground in {:?}", self.grid)));
        }
        if !(0.0..=1.0).contains(&self.occlusion.rate) {
            return Err(CoreError::Spec(format!("occlusion rate {} outside [0, 1]", self.occlusion.rate)));
        }
        Ok(())
    }

    /// Image size `(h, w)` of one view.
    pub fn view_dims(&self) -> (usize, usize) {
        (self.grid[0] / self.views, self.grid[1])
    }

    pub fn image_channels(&self) -> usize {
        self.classes + 1
    }

    /// Time of intermediate frame `k` in interval `i`.
    pub fn substep_time(&self, i: usize, k: usize) -> f64 {
        i as f64 + k as f64 / self.substeps as f64
    }

    fn all_times(&self) -> Vec<f64> {
        let mut ts: Vec<f64> = (0..self.keyframes).map(|i| i as f64).collect();
        for i in 0..self.keyframes.saturating_sub(1) {
            for k in 1..self.substeps {
                ts.push(self.substep_time(i, k));
            }
        }
        ts
    }
}

/// Static structure plus mover plans; enough to render any instant.
#[derive(Clone, Debug, PartialEq)]
pub struct WorldState {
    pub statics: LabelGrid,
    pub movers: Vec<MoverPlan>,
}

impl WorldState {
    /// Labels at time `tau` with the movers flagged in `hidden` left out.
    pub fn grid_at(&self, tau: f64, hidden: &[bool]) -> LabelGrid {
        let mut g = self.statics.clone();
        for (j, m) in self.movers.iter().enumerate() {
            if hidden.get(j).copied().unwrap_or(false) {
                continue;
            }
            for v in m.voxels(tau, g.dims) {
                g.data[v] = m.class;
            }
        }
        g
    }
}

/// Renders one top-down view of `grid` as a `[C + 1, H / views, W]` image.
pub fn render_view(grid: &LabelGrid, classes: usize, views: usize, view: usize) -> Result<Tensor> {
    let [hh, ww, dd] = grid.dims;
    if view >= views || views == 0 || hh % views != 0 {
        return Err(CoreError::Spec(format!("view {view} invalid for {views} views over {hh} rows")));
    }
    let rows = hh / views;
    let mut img = Tensor::zeros(&[classes + 1, rows, ww]);
    let plane = rows * ww;
    let data = img.data_mut();
    for r in 0..rows {
        let h = view * rows + r;
        for w in 0..ww {
            let mut top = None;
            for d in (0..dd).rev() {
                let c = grid.get(h, w, d);
                if c != 0 {
                    top = Some((c as usize, d));
                    break;
                }
            }
            let px = r * ww + w;
            match top {
                Some((c, d)) => {
                    data[c * plane + px] = 1.0;
                    data[classes * plane + px] = (d + 1) as f64 / dd as f64;
                }
                None => data[px] = 1.0,
            }
        }
    }
    Ok(img)
}

/// All views stacked as `[views, C + 1, H / views, W]`.
pub fn render_views(grid: &LabelGrid, classes: usize, views: usize) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut shape = vec![views];
    for v in 0..views {
        let img = render_view(grid, classes, views, v)?;
        if v == 0 {
            shape.extend_from_slice(img.shape());
        }
        data.extend_from_slice(img.data());
    }
    Ok(Tensor::new(shape, data)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub spec: SceneSpec,
    pub taxonomy: ClassTaxonomy,
    pub movers: Vec<MoverPlan>,
    /// `[keyframe][mover]`, true when the mover is hidden in that keyframe.
    pub occlusion: Vec<Vec<bool>>,
    pub labels: Vec<LabelGrid>,
    /// Per keyframe `[views, C + 1, h, w]`.
    pub keyframes: Vec<Tensor>,
    /// Per interval `i` (keyframe i to i+1), `K` frames at times `i + k/K`.
    pub intermediates: Vec<Vec<Tensor>>,
    /// Carried through export/import only; nothing consumes it.
    pub ego_poses: Option<Vec<[f64; 7]>>,
}

impl Episode {
    pub fn num_keyframes(&self) -> usize {
        self.labels.len()
    }

    /// Rebuilds the static world (labels with every moving class cleared).
    pub fn world(&self) -> WorldState {
        let mut statics = self.labels[0].clone();
        for v in statics.data.iter_mut() {
            if self.taxonomy.tag(*v as usize) == Tag::Gmo {
                *v = 0;
            }
        }
        WorldState {
            statics,
            movers: self.movers.clone(),
        }
    }

    /// Keyframe `i` rendered with nothing hidden.
    pub fn clean_keyframe(&self, i: usize) -> Result<Tensor> {
        render_views(&self.labels[i], self.spec.classes, self.spec.views)
    }

    pub fn occluded_frames(&self) -> usize {
        self.occlusion.iter().filter(|f| f.iter().any(|&o| o)).count()
    }
}

pub fn generate_episode(spec: &SceneSpec) -> Result<Episode> {
    spec.validate()?;
    let taxonomy = ClassTaxonomy::synthetic(spec.classes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(WORLD_STREAM);

    let movers = if spec.scripted_movers.is_empty() {
        sample_movers(spec, &taxonomy, &mut rng)?
    } else {
        check_scripted(spec, &spec.scripted_movers)?;
        spec.scripted_movers.clone()
    };
    let statics = build_statics(spec, &taxonomy, &movers, &mut rng);
    let occlusion = schedule_occlusion(spec, movers.len())?;

    let world = WorldState { statics, movers };
    let m = spec.keyframes;
    let mut labels = Vec::with_capacity(m);
    let mut keyframes = Vec::with_capacity(m);
    for (i, hidden) in occlusion.iter().enumerate() {
        labels.push(world.grid_at(i as f64, &[]));
        keyframes.push(render_views(&world.grid_at(i as f64, hidden), spec.classes, spec.views)?);
    }
    let mut intermediates = Vec::with_capacity(m.saturating_sub(1));
    for i in 0..m.saturating_sub(1) {
        let frames = (0..spec.substeps)
            .map(|k| render_views(&world.grid_at(spec.substep_time(i, k), &[]), spec.classes, spec.views))
            .collect::<Result<Vec<_>>>()?;
        intermediates.push(frames);
    }
    Ok(Episode {
        spec: spec.clone(),
        taxonomy,
        movers: world.movers,
        occlusion,
        labels,
        keyframes,
        intermediates,
        ego_poses: Some(vec![[0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]; m]),
    })
}

fn check_scripted(spec: &SceneSpec, movers: &[MoverPlan]) -> Result<()> {
    let last = (spec.keyframes - 1) as f64;
    for (j, m) in movers.iter().enumerate() {
        if m.start[2] == 0 {
            return Err(CoreError::Spec(format!("mover {j} must start above the ground layer")));
        }
        if (m.class as usize) >= spec.classes || spec.classes < 3 {
            return Err(CoreError::Spec(format!("mover {j} class {} out of range", m.class)));
        }
        if !m.in_bounds(0.0, spec.grid) || !m.in_bounds(last, spec.grid) {
            return Err(CoreError::Spec(format!("infeasible mover trajectory: mover {j} leaves the grid")));
        }
    }
    let times = spec.all_times();
    for a in 0..movers.len() {
        for b in a + 1..movers.len() {
            if times.iter().any(|&t| movers[a].overlaps(&movers[b], t)) {
                return Err(CoreError::Spec(format!("infeasible mover trajectory: movers {a} and {b} collide")));
            }
        }
    }
    Ok(())
}

fn start_range(extent: usize, size: usize, v: i64, travel: i64) -> Option<(usize, usize)> {
    let lo = (-v * travel).max(0);
    let hi = (extent as i64 - size as i64).min(extent as i64 - size as i64 - v * travel);
    (lo <= hi).then_some((lo as usize, hi as usize))
}

fn sample_movers(spec: &SceneSpec, taxonomy: &ClassTaxonomy, rng: &mut ChaCha8Rng) -> Result<Vec<MoverPlan>> {
    let count = rng.gen_range(spec.movers_min..=spec.movers_max);
    let gmo = taxonomy.classes_with(Tag::Gmo);
    let travel = (spec.keyframes - 1) as i64;
    let speed = spec.max_speed as i64;
    let times = spec.all_times();
    let mut movers: Vec<MoverPlan> = Vec::with_capacity(count);
    for j in 0..count {
        let mut placed = None;
        for _ in 0..MAX_TRIES {
            let vel = [rng.gen_range(-speed..=speed), rng.gen_range(-speed..=speed), 0];
            if speed > 0 && vel[0] == 0 && vel[1] == 0 {
                continue;
            }
            let (Some(rh), Some(rw)) = (
                start_range(spec.grid[0], spec.mover_size[0], vel[0], travel),
                start_range(spec.grid[1], spec.mover_size[1], vel[1], travel),
            ) else {
                continue;
            };
            let plan = MoverPlan {
                start: [rng.gen_range(rh.0..=rh.1), rng.gen_range(rw.0..=rw.1), 1],
                velocity: vel,
                size: spec.mover_size,
                class: gmo[j % gmo.len()] as u8,
            };
            if movers.iter().all(|o| times.iter().all(|&t| !plan.overlaps(o, t))) {
                placed = Some(plan);
                break;
            }
        }
        match placed {
            Some(p) => movers.push(p),
            None => {
                return Err(CoreError::Spec(format!(
                    "infeasible mover trajectory: could not place mover {j} after {MAX_TRIES} attempts"
                )))
            }
        }
    }
    Ok(movers)
}

fn build_statics(spec: &SceneSpec, taxonomy: &ClassTaxonomy, movers: &[MoverPlan], rng: &mut ChaCha8Rng) -> LabelGrid {
    let [hh, ww, dd] = spec.grid;
    let mut g = LabelGrid::filled(spec.grid, 0);
    for h in 0..hh {
        for w in 0..ww {
            g.set(h, w, 0, 1);
        }
    }
    let wall = taxonomy.names.iter().position(|n| n == "wall");
    let Some(wall) = wall else { return g };

    // columns any mover ever passes over stay free of walls
    let mut swept = vec![false; hh * ww];
    for m in movers {
        for t in spec.all_times() {
            let o = m.origin_at(t);
            for h in o[0] as usize..o[0] as usize + m.size[0] {
                for w in o[1] as usize..o[1] as usize + m.size[1] {
                    swept[h * ww + w] = true;
                }
            }
        }
    }
    let max_height = (dd / 2).max(1);
    for _ in 0..spec.walls {
        for _ in 0..MAX_TRIES {
            let along_w = rng.gen_bool(0.5);
            let len = rng.gen_range(4..=10usize);
            let height = rng.gen_range(1..=max_height);
            let (eh, ew) = if along_w { (1, len) } else { (len, 1) };
            if eh > hh || ew > ww || height + 1 > dd {
                break;
            }
            let (h0, w0) = (rng.gen_range(0..=hh - eh), rng.gen_range(0..=ww - ew));
            let clear = (h0..h0 + eh).all(|h| (w0..w0 + ew).all(|w| !swept[h * ww + w]));
            if clear {
                for h in h0..h0 + eh {
                    for w in w0..w0 + ew {
                        for d in 1..=height {
                            g.set(h, w, d, wall as u8);
                        }
                    }
                }
                break;
            }
        }
    }
    g
}

fn schedule_occlusion(spec: &SceneSpec, movers: usize) -> Result<Vec<Vec<bool>>> {
    let m = spec.keyframes;
    let mut sched = vec![vec![false; movers]; m];
    let occ = &spec.occlusion;
    if !occ.windows.is_empty() {
        for w in &occ.windows {
            if w.mover >= movers || w.start > w.end || w.end > m {
                return Err(CoreError::Spec(format!("occlusion window {w:?} outside {movers} movers x {m} keyframes")));
            }
            for f in &mut sched[w.start..w.end] {
                f[w.mover] = true;
            }
        }
        return Ok(sched);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(OCCLUSION_STREAM);
    for j in 0..movers {
        // frame 0 stays visible so every scene opens with a clean observation
        let mut t = 1;
        while t < m {
            if occ.max_run > 0 && rng.gen_bool(occ.rate) {
                let run = rng.gen_range(1..=occ.max_run);
                for f in &mut sched[t..(t + run).min(m)] {
                    f[j] = true;
                }
                t += run + 1;
            } else {
                t += 1;
            }
        }
    }
    Ok(sched)
}
