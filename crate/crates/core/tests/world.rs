use occlinker_core::motion::{frame_difference, PairPolicy};
use occlinker_core::world::{render_views, MoverPlan, OcclusionSpec, OcclusionWindow};
use occlinker_core::{generate_episode, SceneSpec, Tag};
use proptest::prelude::*;

fn mover(start: [usize; 3], velocity: [i64; 3]) -> MoverPlan {
    MoverPlan {
        start,
        velocity,
        size: [4, 4, 2],
        class: 3,
    }
}

#[test]
fn same_seed_same_episode() {
    let spec = SceneSpec { seed: 7, ..SceneSpec::default() };
    assert_eq!(generate_episode(&spec).unwrap(), generate_episode(&spec).unwrap());
    let other = SceneSpec { seed: 8, ..SceneSpec::default() };
    assert_ne!(generate_episode(&spec).unwrap().labels, generate_episode(&other).unwrap().labels);
}

#[test]
fn no_movers_means_no_change() {
    let spec = SceneSpec {
        movers_min: 0,
        movers_max: 0,
        seed: 3,
        ..SceneSpec::default()
    };
    let ep = generate_episode(&spec).unwrap();
    assert!(ep.keyframes.windows(2).all(|w| w[0] == w[1]));
    assert!(ep.labels.windows(2).all(|w| w[0] == w[1]));
    let shape = ep.keyframes[0].shape().to_vec();
    for (i, frames) in ep.intermediates.iter().enumerate() {
        for s in frame_difference(frames, i, PairPolicy::AllPairs, spec.substeps, &shape).unwrap() {
            assert!(s.image.data().iter().all(|&v| v == 0.0));
        }
    }
}

#[test]
fn scripted_mover_shifts_one_column_per_keyframe() {
    let spec = SceneSpec {
        scripted_movers: vec![mover([10, 2, 1], [0, 1, 0])],
        keyframes: 6,
        walls: 0,
        ..SceneSpec::default()
    };
    let ep = generate_episode(&spec).unwrap();
    let [hh, ww, dd] = spec.grid;
    for t in 1..ep.num_keyframes() {
        let (prev, cur) = (&ep.labels[t - 1], &ep.labels[t]);
        for h in 0..hh {
            for w in 1..ww {
                for d in 0..dd {
                    let was_box = prev.get(h, w - 1, d) == 3;
                    assert_eq!(cur.get(h, w, d) == 3, was_box, "t {t} at ({h},{w},{d})");
                }
            }
        }
        let count = cur.data.iter().filter(|&&c| c == 3).count();
        assert_eq!(count, 32);
    }
}

#[test]
fn infeasible_trajectory_is_rejected() {
    let spec = SceneSpec {
        scripted_movers: vec![mover([10, 20, 1], [0, 1, 0])],
        ..SceneSpec::default()
    };
    let err = generate_episode(&spec).unwrap_err().to_string();
    assert!(err.contains("infeasible"), "{err}");

    let spec = SceneSpec { substeps: 1, ..SceneSpec::default() };
    assert!(generate_episode(&spec).is_err());
    let spec = SceneSpec { classes: 2, ..SceneSpec::default() };
    assert!(generate_episode(&spec).is_err());
}

#[test]
fn occlusion_changes_observations_only() {
    let clear = SceneSpec {
        occlusion: OcclusionSpec {
            rate: 0.0,
            ..OcclusionSpec::default()
        },
        seed: 11,
        ..SceneSpec::default()
    };
    let hidden = SceneSpec {
        occlusion: OcclusionSpec {
            windows: vec![OcclusionWindow { mover: 0, start: 3, end: 6 }],
            ..OcclusionSpec::default()
        },
        ..clear.clone()
    };
    let a = generate_episode(&clear).unwrap();
    let b = generate_episode(&hidden).unwrap();
    assert_eq!(a.labels, b.labels);
    assert_eq!(a.intermediates, b.intermediates);
    assert_eq!(b.occluded_frames(), 3);

    let views = clear.views;
    let (rows, ww) = clear.view_dims();
    let plane = rows * ww;
    for t in 0..a.num_keyframes() {
        let (ka, kb) = (&a.keyframes[t], &b.keyframes[t]);
        if !(3..6).contains(&t) {
            assert_eq!(ka, kb, "keyframe {t}");
            continue;
        }
        assert_ne!(ka, kb);
        // every changed pixel lies in a column the hidden mover covers
        let cover = b.movers[0].voxels(t as f64, clear.grid);
        let columns: Vec<(usize, usize)> = cover.iter().map(|v| (v / (ww * clear.grid[2]), v / clear.grid[2] % ww)).collect();
        for (i, (x, y)) in ka.data().iter().zip(kb.data()).enumerate() {
            if x != y {
                let px = i % plane;
                let view = i / (plane * (clear.classes + 1));
                let (h, w) = (view * rows + px / ww, px % ww);
                assert!(columns.contains(&(h, w)), "pixel ({h},{w}) changed outside the mover");
            }
        }
        assert_eq!(*ka, render_views(&a.labels[t], clear.classes, views).unwrap());
    }
}

#[test]
fn labels_always_contain_movers() {
    for seed in 0..5 {
        let ep = generate_episode(&SceneSpec { seed, ..SceneSpec::default() }).unwrap();
        for (t, grid) in ep.labels.iter().enumerate() {
            for m in &ep.movers {
                for v in m.voxels(t as f64, grid.dims) {
                    assert_eq!(grid.data[v], m.class);
                    assert_eq!(ep.taxonomy.tag(m.class as usize), Tag::Gmo);
                }
            }
        }
    }
}

#[test]
fn views_agree_on_mover_columns() {
    let spec = SceneSpec {
        scripted_movers: vec![mover([14, 5, 1], [0, 1, 0])],
        walls: 0,
        occlusion: OcclusionSpec {
            rate: 0.0,
            ..OcclusionSpec::default()
        },
        ..SceneSpec::default()
    };
    let ep = generate_episode(&spec).unwrap();
    let (rows, ww) = spec.view_dims();
    let c = spec.classes + 1;
    for (t, kf) in ep.keyframes.iter().enumerate() {
        // box channel pixels across both bands equal the mover footprint
        let mut lit = 0;
        for v in 0..spec.views {
            let off = (v * c + 3) * rows * ww;
            lit += kf.data()[off..off + rows * ww].iter().filter(|&&x| x == 1.0).count();
        }
        let foot = ep.labels[t]
            .data
            .chunks(spec.grid[2])
            .filter(|col| col.contains(&3))
            .count();
        assert_eq!(lit, foot);
        assert_eq!(foot, 16);
    }
}

#[test]
fn pose_metadata_is_inert() {
    let mut ep = generate_episode(&SceneSpec { seed: 2, ..SceneSpec::default() }).unwrap();
    let before = (ep.labels.clone(), ep.keyframes.clone(), ep.intermediates.clone());
    ep.ego_poses = None;
    assert_eq!(before, (ep.labels.clone(), ep.keyframes.clone(), ep.intermediates.clone()));
}

#[test]
fn moving_box_gives_difference_dipole() {
    let spec = SceneSpec {
        scripted_movers: vec![mover([4, 4, 1], [0, 3, 0])],
        substeps: 3,
        walls: 0,
        keyframes: 4,
        ..SceneSpec::default()
    };
    let ep = generate_episode(&spec).unwrap();
    let shape = ep.keyframes[0].shape().to_vec();
    let slices = frame_difference(&ep.intermediates[0], 0, PairPolicy::Consecutive, 3, &shape).unwrap();
    assert_eq!(slices.len(), 2);
    let (rows, ww) = spec.view_dims();
    let box_plane = 3 * rows * ww;
    let diff = &slices[0].image.data()[box_plane..box_plane + rows * ww];
    // the box advances one column: its trailing column vanishes, a new leading one appears
    for r in 0..rows {
        for w in 0..ww {
            let v = diff[r * ww + w];
            let in_rows = (4..8).contains(&r);
            let expect = match w {
                4 if in_rows => -1.0,
                8 if in_rows => 1.0,
                _ => 0.0,
            };
            assert_eq!(v, expect, "({r},{w})");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn schedules_respect_bounds(seed in 0u64..10_000, rate in 0.0f64..1.0, max_run in 0usize..4) {
        let spec = SceneSpec {
            keyframes: 8,
            occlusion: OcclusionSpec { rate, max_run, windows: vec![] },
            seed,
            ..SceneSpec::default()
        };
        let ep = generate_episode(&spec).unwrap();
        prop_assert_eq!(ep.occlusion.len(), 8);
        prop_assert!(ep.occlusion[0].iter().all(|&o| !o));
        for j in 0..ep.movers.len() {
            let mut run = 0;
            for f in &ep.occlusion {
                run = if f[j] { run + 1 } else { 0 };
                prop_assert!(run <= max_run);
            }
        }
        for (t, g) in ep.labels.iter().enumerate() {
            prop_assert!(g.data.iter().all(|&c| (c as usize) < spec.classes));
            for m in &ep.movers {
                let o = m.origin_at(t as f64);
                prop_assert!((0..3).all(|a| o[a] >= 0 && o[a] as usize + m.size[a] <= spec.grid[a]));
            }
        }
    }
}
