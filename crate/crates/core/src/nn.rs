//! Parameter initialisation and small layer helpers shared by the base
//! network and the plug-in.

use occ_tensor::{ParamId, ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

/// Uniform `±1/sqrt(fan_in)` initialiser on a seeded stream.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { rng }
    }

    pub fn uniform(&mut self, store: &mut ParamStore, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let t = Tensor::from_fn(shape, |_| self.rng.gen_range(-bound..bound));
        store.add(name, t)
    }

    pub fn constant(&mut self, store: &mut ParamStore, name: &str, shape: &[usize], value: f64) -> ParamId {
        store.add(name, Tensor::full(shape, value))
    }
}

/// Weight and bias of one convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvParams {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl ConvParams {
    pub fn conv2d(
        init: &mut Init,
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        bias: bool,
    ) -> Self {
        let fan_in = cin * k * k;
        let weight = init.uniform(store, &format!("{name}.weight"), &[cout, cin, k, k], fan_in);
        let bias = bias.then(|| init.uniform(store, &format!("{name}.bias"), &[cout], fan_in));
        Self { weight, bias }
    }

    /// `[Cout, Cin, k..]` for a forward 3-D convolution.
    pub fn conv3d(init: &mut Init, store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: [usize; 3]) -> Self {
        let fan_in = cin * k.iter().product::<usize>();
        let weight = init.uniform(store, &format!("{name}.weight"), &[cout, cin, k[0], k[1], k[2]], fan_in);
        let bias = Some(init.uniform(store, &format!("{name}.bias"), &[cout], fan_in));
        Self { weight, bias }
    }

    /// `[Cin, Cout, k..]` for a transposed 3-D convolution.
    pub fn deconv3d(
        init: &mut Init,
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: [usize; 3],
        stride: [usize; 3],
    ) -> Self {
        // each output voxel sees about cin * prod(k / stride) taps
        let taps: usize = (0..3).map(|a| k[a].div_ceil(stride[a])).product();
        let fan_in = cin * taps;
        let weight = init.uniform(store, &format!("{name}.weight"), &[cin, cout, k[0], k[1], k[2]], fan_in);
        let bias = Some(init.uniform(store, &format!("{name}.bias"), &[cout], fan_in));
        Self { weight, bias }
    }

    pub fn apply2d(&self, tape: &mut Tape, store: &ParamStore, x: Var, stride: usize, padding: usize) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let y = tape.conv2d(x, w, stride, padding)?;
        self.bias_on(tape, store, y)
    }

    pub fn bias_on(&self, tape: &mut Tape, store: &ParamStore, y: Var) -> Result<Var> {
        match self.bias {
            Some(b) => {
                let b = tape.param(store, b);
                Ok(tape.add_bias(y, b, 1)?)
            }
            None => Ok(y),
        }
    }
}

/// Replaces a parameter's value with zeros (used for zero-initialised
/// output layers).
pub fn zero_param(store: &mut ParamStore, id: ParamId) {
    let shape = store.value(id).shape().to_vec();
    store.load_value(id, Tensor::zeros(&shape)).expect("same shape");
}
