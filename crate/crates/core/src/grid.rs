//! Hard-label voxel grids, laid out `[H, W, D]` row-major to match the
//! `[C, H, W, D]` logit tensors.

use occ_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelGrid {
    pub dims: [usize; 3],
    pub data: Vec<u8>,
}

impl LabelGrid {
    pub fn filled(dims: [usize; 3], class: u8) -> Self {
        Self {
            dims,
            data: vec![class; dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn new(dims: [usize; 3], data: Vec<u8>) -> Result<Self> {
        if data.len() != dims.iter().product::<usize>() {
            return Err(CoreError::Shape(format!("{} labels for grid {dims:?}", data.len())));
        }
        Ok(Self { dims, data })
    }

    #[inline]
    pub fn index(&self, h: usize, w: usize, d: usize) -> usize {
        (h * self.dims[1] + w) * self.dims[2] + d
    }

    pub fn get(&self, h: usize, w: usize, d: usize) -> u8 {
        self.data[self.index(h, w, d)]
    }

    pub fn set(&mut self, h: usize, w: usize, d: usize, class: u8) {
        let i = self.index(h, w, d);
        self.data[i] = class;
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Per-voxel argmax of `[C, H, W, D]` logits or probabilities.
    pub fn from_logits(logits: &Tensor) -> Result<Self> {
        let s = logits.shape();
        if s.len() != 4 {
            return Err(CoreError::Shape(format!("expected [C, H, W, D] logits, got {s:?}")));
        }
        let data = logits.argmax_axis0().into_iter().map(|c| c as u8).collect();
        Self::new([s[1], s[2], s[3]], data)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.dims.to_vec(), self.data.iter().map(|&c| c as f64).collect()).expect("dims match")
    }

    pub fn from_tensor(t: &Tensor, classes: usize) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 {
            return Err(CoreError::Shape(format!("expected [H, W, D] labels, got {s:?}")));
        }
        let mut data = Vec::with_capacity(t.numel());
        for &v in t.data() {
            if v < 0.0 || v.fract() != 0.0 || v as usize >= classes {
                return Err(CoreError::Shape(format!("label value {v} is not a class id below {classes}")));
            }
            data.push(v as u8);
        }
        Self::new([s[0], s[1], s[2]], data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_of_logits() {
        let logits = Tensor::new(vec![2, 1, 1, 2], vec![0.0, 3.0, 1.0, 2.0]).unwrap();
        let g = LabelGrid::from_logits(&logits).unwrap();
        assert_eq!(g.data, [1, 0]);
        assert_eq!(g.dims, [1, 1, 2]);
    }

    #[test]
    fn tensor_round_trip_rejects_bad_ids() {
        let g = LabelGrid::new([1, 2, 2], vec![0, 1, 2, 3]).unwrap();
        assert_eq!(LabelGrid::from_tensor(&g.to_tensor(), 4).unwrap(), g);
        assert!(LabelGrid::from_tensor(&g.to_tensor(), 3).is_err());
    }
}
