//! Toy base occupancy network. The static encoder runs two 3x3
//! convolutions per view with shared weights; the decoder stitches the
//! view bands back into the full `H x W` plane, applies one 3x3
//! convolution and lifts to `[C, H, W, D]` logits with a 1x1 projection
//! producing `C` logits per depth slice.

use occ_tensor::{ParamStore, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};
use crate::grid::LabelGrid;
use crate::nn::{ConvParams, Init};
use crate::world::SceneSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaseConfig {
    pub channels: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for BaseConfig {
    fn default() -> Self {
        Self {
            channels: 8,
            epochs: 4,
            lr: 1e-2,
            weight_decay: 0.0,
        }
    }
}

/// Fixed shapes of the base network, derived from the scene spec.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaseShape {
    pub views: usize,
    pub in_channels: usize,
    pub channels: usize,
    pub classes: usize,
    /// View image size.
    pub h: usize,
    pub w: usize,
    pub depth: usize,
}

impl BaseShape {
    pub fn new(spec: &SceneSpec, channels: usize) -> Self {
        let (h, w) = spec.view_dims();
        Self {
            views: spec.views,
            in_channels: spec.image_channels(),
            channels,
            classes: spec.classes,
            h,
            w,
            depth: spec.grid[2],
        }
    }

    pub fn feature_shape(&self) -> [usize; 4] {
        [self.views, self.channels, self.h, self.w]
    }

    pub fn image_shape(&self) -> [usize; 4] {
        [self.views, self.in_channels, self.h, self.w]
    }

    pub fn logit_shape(&self) -> [usize; 4] {
        [self.classes, self.views * self.h, self.w, self.depth]
    }
}

#[derive(Clone, Debug)]
pub struct BaseNet {
    pub shape: BaseShape,
    pub store: ParamStore,
    enc1: ConvParams,
    enc2: ConvParams,
    dec: ConvParams,
    lift: ConvParams,
}

pub const BASE_PREFIX: &str = "base.";

impl BaseNet {
    pub fn new(shape: BaseShape, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut init = Init::new(seed, 10);
        let c = shape.channels;
        let enc1 = ConvParams::conv2d(&mut init, &mut store, "base.encoder.conv1", shape.in_channels, c, 3, true);
        let enc2 = ConvParams::conv2d(&mut init, &mut store, "base.encoder.conv2", c, c, 3, true);
        let dec = ConvParams::conv2d(&mut init, &mut store, "base.decoder.conv", c, c, 3, true);
        let lift =
            ConvParams::conv2d(&mut init, &mut store, "base.decoder.lift", c, shape.classes * shape.depth, 1, true);
        Self {
            shape,
            store,
            enc1,
            enc2,
            dec,
            lift,
        }
    }

    /// Images `[V, C+1, h, w]` to static features `[V, c, h, w]`.
    pub fn encode_var(&self, tape: &mut Tape, images: Var) -> Result<Var> {
        if tape.shape(images) != self.shape.image_shape() {
            return Err(CoreError::Shape(format!(
                "images {:?}, expected {:?}",
                tape.shape(images),
                self.shape.image_shape()
            )));
        }
        let x = self.enc1.apply2d(tape, &self.store, images, 1, 1)?;
        let x = tape.relu(x)?;
        let x = self.enc2.apply2d(tape, &self.store, x, 1, 1)?;
        Ok(tape.relu(x)?)
    }

    /// Static features `[V, c, h, w]` to logits `[C, H, W, D]`.
    pub fn decode_var(&self, tape: &mut Tape, s: Var) -> Result<Var> {
        let sh = self.shape;
        if tape.shape(s) != sh.feature_shape() {
            return Err(CoreError::Shape(format!(
                "features {:?}, expected {:?}",
                tape.shape(s),
                sh.feature_shape()
            )));
        }
        let x = tape.permute(s, &[1, 0, 2, 3])?;
        let x = tape.reshape(x, &[1, sh.channels, sh.views * sh.h, sh.w])?;
        let x = self.dec.apply2d(tape, &self.store, x, 1, 1)?;
        let x = tape.relu(x)?;
        let x = self.lift.apply2d(tape, &self.store, x, 1, 0)?;
        let x = tape.reshape(x, &[sh.classes, sh.depth, sh.views * sh.h, sh.w])?;
        Ok(tape.permute(x, &[0, 2, 3, 1])?)
    }

    pub fn encode_static(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        let s = self.encode_var(&mut tape, x)?;
        Ok(tape.value(s).clone())
    }

    pub fn decode_occupancy(&self, s: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(s.clone());
        let o = self.decode_var(&mut tape, x)?;
        Ok(tape.value(o).clone())
    }

    pub fn predict(&self, images: &Tensor) -> Result<LabelGrid> {
        let s = self.encode_static(images)?;
        LabelGrid::from_logits(&self.decode_occupancy(&s)?)
    }

    pub fn freeze(&mut self) {
        self.store.freeze_prefix(BASE_PREFIX);
    }

    pub fn is_frozen(&self) -> bool {
        self.store.iter().all(|(_, p)| p.frozen)
    }

    pub fn checksum(&self) -> String {
        store_checksum(&self.store)
    }

    /// Loads values by parameter name from another store.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        load_by_name(&mut self.store, other)
    }
}

/// Copies every parameter of `dst` from the same-named entry of `src`.
pub fn load_by_name(dst: &mut ParamStore, src: &ParamStore) -> Result<()> {
    let ids: Vec<_> = dst.iter().map(|(id, p)| (id, p.name.clone())).collect();
    for (id, name) in ids {
        let sid = src
            .find(&name)
            .ok_or_else(|| CoreError::Config(format!("checkpoint lacks parameter {name}")))?;
        dst.load_value(id, src.value(sid).clone())?;
    }
    Ok(())
}

/// SHA-256 over every parameter name, shape and value, in store order.
pub fn store_checksum(store: &ParamStore) -> String {
    let mut h = Sha256::new();
    for (_, p) in store.iter() {
        h.update(p.name.as_bytes());
        h.update([0u8]);
        for &d in p.value.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for &v in p.value.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}
