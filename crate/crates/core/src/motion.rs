//! Frame differences between intermediate frames of one keyframe interval.

use occ_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairPolicy {
    /// `(k, k + 1)` for every k.
    #[default]
    Consecutive,
    /// First against last frame only.
    Endpoints,
    /// Every `a < b`.
    AllPairs,
}

impl PairPolicy {
    pub fn pairs(self, frames: usize) -> Vec<(usize, usize)> {
        if frames < 2 {
            return Vec::new();
        }
        match self {
            PairPolicy::Consecutive => (0..frames - 1).map(|k| (k, k + 1)).collect(),
            PairPolicy::Endpoints => vec![(0, frames - 1)],
            PairPolicy::AllPairs => (0..frames)
                .flat_map(|a| (a + 1..frames).map(move |b| (a, b)))
                .collect(),
        }
    }

    pub fn slices(self, frames: usize) -> usize {
        self.pairs(frames).len()
    }
}

/// One difference image `frames[tau_b] - frames[tau_a]` of interval `interval`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffSlice {
    pub interval: usize,
    pub tau_a: usize,
    pub tau_b: usize,
    pub image: Tensor,
}

/// Difference slices of one interval. With fewer than two frames the
/// interval is skipped: a warning is logged and zero slices (as many as
/// `substeps` frames would give) stand in.
pub fn frame_difference(
    frames: &[Tensor],
    interval: usize,
    policy: PairPolicy,
    substeps: usize,
    image_shape: &[usize],
) -> Result<Vec<DiffSlice>> {
    for f in frames {
        if f.shape() != image_shape {
            return Err(CoreError::Shape(format!("frame {:?}, expected {image_shape:?}", f.shape())));
        }
    }
    if frames.len() < 2 {
        log::warn!("interval {interval} has {} intermediate frames; using zero motion", frames.len());
        return Ok(policy
            .pairs(substeps)
            .into_iter()
            .map(|(a, b)| DiffSlice {
                interval,
                tau_a: a,
                tau_b: b,
                image: Tensor::zeros(image_shape),
            })
            .collect());
    }
    Ok(policy
        .pairs(frames.len())
        .into_iter()
        .map(|(a, b)| {
            let data = frames[b].data().iter().zip(frames[a].data()).map(|(x, y)| x - y).collect();
            DiffSlice {
                interval,
                tau_a: a,
                tau_b: b,
                image: Tensor::new(image_shape.to_vec(), data).expect("same shape"),
            }
        })
        .collect())
}

/// Stacks slices of `[V, ch, h, w]` along the channel axis per view:
/// `[V, slices * ch, h, w]`.
pub fn stack_slices(slices: &[DiffSlice]) -> Result<Tensor> {
    let first = slices
        .first()
        .ok_or_else(|| CoreError::Shape("motion stack needs at least one slice".into()))?;
    let s = first.image.shape();
    if s.len() != 4 {
        return Err(CoreError::Shape(format!("slice images must be [V, ch, h, w], got {s:?}")));
    }
    let (v, per_view) = (s[0], s[1] * s[2] * s[3]);
    let mut data = Vec::with_capacity(slices.len() * first.image.numel());
    for view in 0..v {
        for sl in slices {
            data.extend_from_slice(&sl.image.data()[view * per_view..][..per_view]);
        }
    }
    Ok(Tensor::new(vec![v, slices.len() * s[1], s[2], s[3]], data)?)
}

/// Difference stack for one interval, ready for the motion encoder.
pub fn interval_motion(
    frames: &[Tensor],
    interval: usize,
    policy: PairPolicy,
    substeps: usize,
    image_shape: &[usize],
) -> Result<Tensor> {
    stack_slices(&frame_difference(frames, interval, policy, substeps, image_shape)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_counts() {
        assert_eq!(PairPolicy::Consecutive.pairs(3), [(0, 1), (1, 2)]);
        assert_eq!(PairPolicy::Endpoints.pairs(3), [(0, 2)]);
        assert_eq!(PairPolicy::AllPairs.slices(4), 6);
        assert_eq!(PairPolicy::Consecutive.slices(1), 0);
    }

    #[test]
    fn identical_frames_give_zero() {
        let f = Tensor::full(&[1, 2, 2, 2], 0.5);
        let s = frame_difference(&[f.clone(), f.clone(), f], 0, PairPolicy::Consecutive, 3, &[1, 2, 2, 2]).unwrap();
        assert_eq!(s.len(), 2);
        assert!(s.iter().all(|d| d.image.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn short_interval_substitutes_zero_slices() {
        let f = Tensor::full(&[1, 1, 1, 1], 1.0);
        let s = frame_difference(&[f], 4, PairPolicy::Consecutive, 3, &[1, 1, 1, 1]).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].interval, 4);
        assert_eq!(s[1].image.sum(), 0.0);
    }

    #[test]
    fn stacking_interleaves_per_view() {
        let a = DiffSlice { interval: 0, tau_a: 0, tau_b: 1, image: Tensor::new(vec![2, 1, 1, 1], vec![1.0, 2.0]).unwrap() };
        let b = DiffSlice { interval: 0, tau_a: 1, tau_b: 2, image: Tensor::new(vec![2, 1, 1, 1], vec![3.0, 4.0]).unwrap() };
        let t = stack_slices(&[a, b]).unwrap();
        assert_eq!(t.shape(), &[2, 2, 1, 1]);
        assert_eq!(t.data(), &[1.0, 3.0, 2.0, 4.0]);
    }
}
