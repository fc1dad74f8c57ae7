use occlinker_core::metrics::{
    consistency_report, frame_disparity, iou, miou_grouped, oracle_disparity, temporal_consistency,
};
use occlinker_core::{ClassTaxonomy, Group, LabelGrid, Tag};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DIMS: [usize; 3] = [8, 8, 4];

fn taxonomy() -> ClassTaxonomy {
    let names = ["empty", "ground", "wall", "car", "person", "vegetation"];
    let tags = [Tag::Unoccupied, Tag::Gso, Tag::Gso, Tag::Gmo, Tag::Gmo, Tag::Gso];
    ClassTaxonomy::new(names.map(String::from).to_vec(), tags.to_vec()).unwrap()
}

fn random_grid(rng: &mut ChaCha8Rng, classes: u8) -> LabelGrid {
    // bias towards empty so every region type shows up
    let data = (0..DIMS.iter().product::<usize>())
        .map(|_| if rng.gen_bool(0.4) { 0 } else { rng.gen_range(0..classes) })
        .collect();
    LabelGrid::new(DIMS, data).unwrap()
}

fn permute(g: &LabelGrid, perm: &[usize]) -> LabelGrid {
    LabelGrid::new(g.dims, g.data.iter().map(|&c| perm[c as usize] as u8).collect()).unwrap()
}

fn permute_taxonomy(t: &ClassTaxonomy, perm: &[usize]) -> ClassTaxonomy {
    let mut names = vec![String::new(); perm.len()];
    let mut tags = vec![Tag::Unoccupied; perm.len()];
    for (old, &new) in perm.iter().enumerate() {
        names[new] = t.names[old].clone();
        tags[new] = t.tags[old];
    }
    ClassTaxonomy::new(names, tags).unwrap()
}

#[test]
fn disparity_matches_oracle_on_1000_pairs() {
    let tax = taxonomy();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for k in 0..1000 {
        let a = random_grid(&mut rng, 6);
        let b = random_grid(&mut rng, 6);
        let fast = frame_disparity(&a, &b, &tax).unwrap();
        let (dm, ds) = oracle_disparity(&a, &b, &tax);
        assert_eq!((fast.delta_m, fast.delta_s), (dm, ds), "pair {k}");

        let back = frame_disparity(&b, &a, &tax).unwrap();
        assert_eq!(fast, back, "pair {k} is not symmetric");
        assert!((0.0..=1.0).contains(&fast.delta_m) && (0.0..=1.0).contains(&fast.delta_s));
        assert!(fast.changed_m <= fast.n_mc && fast.changed_s <= fast.n_sc);
        assert!(fast.n_mc + fast.n_sc <= a.len() as u64);
    }
}

#[test]
fn oracle_edge_cases() {
    let tax = taxonomy();
    let empty = LabelGrid::filled(DIMS, 0);
    assert_eq!(oracle_disparity(&empty, &empty, &tax), (0.0, 0.0));
    let d = frame_disparity(&empty, &empty, &tax).unwrap();
    assert_eq!((d.n_mc, d.n_sc), (0, 0));

    let gmo = LabelGrid::filled(DIMS, 3);
    let gso = LabelGrid::filled(DIMS, 1);
    let d = frame_disparity(&gmo, &gso, &tax).unwrap();
    assert_eq!((d.delta_m, d.n_mc, d.n_sc), (1.0, 256, 0));
    assert_eq!(oracle_disparity(&gmo, &gso, &tax), (1.0, 0.0));

    let other = LabelGrid::new([1, 1, 3], vec![0, 0, 0]).unwrap();
    assert!(frame_disparity(&empty, &other, &tax).is_err());
}

#[test]
fn scores_stay_in_range() {
    let tax = taxonomy();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let scenes: Vec<Vec<LabelGrid>> = (0..4).map(|_| (0..6).map(|_| random_grid(&mut rng, 6)).collect()).collect();
    let rep = consistency_report(&scenes, &tax).unwrap();
    for s in &rep.scenes {
        assert!((0.0..=1.0).contains(&s.s_m) && (0.0..=1.0).contains(&s.s_s));
    }
    assert!((0.0..=1.0).contains(&rep.mean_s_m) && (0.0..=1.0).contains(&rep.mean_s_s));
    assert!(temporal_consistency(&scenes[0][..1], &tax).is_err());
    assert!(consistency_report(&[], &tax).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metrics_ignore_class_relabelling(seed in any::<u64>(), perm in Just((0..6usize).collect::<Vec<_>>()).prop_shuffle()) {
        let tax = taxonomy();
        let ptax = permute_taxonomy(&tax, &perm);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames: Vec<LabelGrid> = (0..3).map(|_| random_grid(&mut rng, 6)).collect();
        let moved: Vec<LabelGrid> = frames.iter().map(|g| permute(g, &perm)).collect();

        let a = frame_disparity(&frames[0], &frames[1], &tax).unwrap();
        let b = frame_disparity(&moved[0], &moved[1], &ptax).unwrap();
        prop_assert_eq!(a, b);
        let sa = temporal_consistency(&frames, &tax).unwrap();
        let sb = temporal_consistency(&moved, &ptax).unwrap();
        prop_assert_eq!((sa.s_m, sa.s_s), (sb.s_m, sb.s_s));
        prop_assert_eq!(iou(&frames[0], &frames[2], &tax).unwrap(), iou(&moved[0], &moved[2], &ptax).unwrap());
        for g in [Group::All, Group::Gmo, Group::Gso] {
            let x = miou_grouped(&frames[0], &frames[2], &tax, g).unwrap();
            let y = miou_grouped(&moved[0], &moved[2], &ptax, g).unwrap();
            match (x, y) {
                (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-9),
                (x, y) => prop_assert_eq!(x, y),
            }
        }
    }

    #[test]
    fn disparity_oracle_agrees_on_random_pairs(seed in any::<u64>()) {
        let tax = taxonomy();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (random_grid(&mut rng, 6), random_grid(&mut rng, 6));
        let d = frame_disparity(&a, &b, &tax).unwrap();
        prop_assert_eq!((d.delta_m, d.delta_s), oracle_disparity(&a, &b, &tax));
    }
}
