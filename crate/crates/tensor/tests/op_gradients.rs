use occ_tensor::ops::norm::RunningStats;
use occ_tensor::{grad_check, Conv3dOpts, NormMode, Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;
const H: f64 = 1e-6;
const SEEDS: [u64; 3] = [0, 1, 2];

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Weights the output with a fixed random tensor so every output element
/// contributes a distinct gradient.
fn weighted(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    let w = rand_t(&mut rng, tape.shape(y));
    let w = tape.constant(w);
    tape.mul(y, w)
}

fn check<F>(name: &str, inputs: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor>, f: F)
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var> + Copy,
{
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs = inputs(&mut rng);
        let report = grad_check(
            |t, v| {
                let y = f(t, v)?;
                weighted(t, y, seed)
            },
            &xs,
            H,
        )
        .unwrap();
        assert!(report.max_rel_error < TOL, "{name} seed {seed}: {report:?}");
    }
}

#[test]
fn elementwise_ops() {
    check("add", |r| vec![rand_t(r, &[3, 4]), rand_t(r, &[3, 4])], |t, v| t.add(v[0], v[1]));
    check("sub", |r| vec![rand_t(r, &[3, 4]), rand_t(r, &[3, 4])], |t, v| t.sub(v[0], v[1]));
    check("mul", |r| vec![rand_t(r, &[3, 4]), rand_t(r, &[3, 4])], |t, v| t.mul(v[0], v[1]));
    check("scale", |r| vec![rand_t(r, &[5])], |t, v| t.scale(v[0], -2.5));
    check("relu", |r| vec![rand_t(r, &[4, 4])], |t, v| t.relu(v[0]));
    check("add_bias", |r| vec![rand_t(r, &[2, 3, 4]), rand_t(r, &[3])], |t, v| t.add_bias(v[0], v[1], 1));
}

#[test]
fn shape_ops() {
    check("mean_axis", |r| vec![rand_t(r, &[2, 3, 4])], |t, v| t.mean_axis(v[0], 1));
    check("reshape", |r| vec![rand_t(r, &[2, 6])], |t, v| t.reshape(v[0], &[3, 4]));
    check("permute", |r| vec![rand_t(r, &[2, 3, 4])], |t, v| t.permute(v[0], &[2, 0, 1]));
    check(
        "concat",
        |r| vec![rand_t(r, &[2, 3]), rand_t(r, &[2, 1]), rand_t(r, &[2, 2])],
        |t, v| t.concat(&[v[0], v[1], v[2]], 1),
    );
    check("matmul", |r| vec![rand_t(r, &[3, 4]), rand_t(r, &[4, 2])], |t, v| t.matmul(v[0], v[1]));
}

#[test]
fn convolutions() {
    check("conv2d", |r| vec![rand_t(r, &[2, 2, 5, 4]), rand_t(r, &[3, 2, 3, 3])], |t, v| t.conv2d(v[0], v[1], 1, 1));
    check("conv2d strided", |r| vec![rand_t(r, &[1, 2, 5, 5]), rand_t(r, &[2, 2, 3, 3])], |t, v| {
        t.conv2d(v[0], v[1], 2, 0)
    });
    check("conv3d", |r| vec![rand_t(r, &[1, 2, 3, 3, 2]), rand_t(r, &[2, 2, 3, 3, 3])], |t, v| {
        t.conv3d(v[0], v[1], Conv3dOpts::default())
    });
    check("conv_transpose3d", |r| vec![rand_t(r, &[1, 2, 2, 2, 1]), rand_t(r, &[2, 3, 4, 4, 2])], |t, v| {
        t.conv_transpose3d(v[0], v[1], Conv3dOpts { stride: [2, 2, 2], padding: [1, 1, 0] })
    });
}

#[test]
fn normalisation_attention_pooling() {
    check("batch_norm train", |r| vec![rand_t(r, &[2, 3, 2, 2]), rand_t(r, &[3]), rand_t(r, &[3])], |t, v| {
        Ok(t.batch_norm(v[0], v[1], v[2], 1e-5, NormMode::Train, &RunningStats::new(3))?.0)
    });
    check("batch_norm eval", |r| vec![rand_t(r, &[2, 3, 2]), rand_t(r, &[3]), rand_t(r, &[3])], |t, v| {
        let mut rs = RunningStats::new(3);
        rs.mean = vec![0.1, -0.2, 0.3];
        rs.var = vec![0.5, 1.5, 2.0];
        Ok(t.batch_norm(v[0], v[1], v[2], 1e-5, NormMode::Eval, &rs)?.0)
    });
    check("softmax", |r| vec![rand_t(r, &[3, 4])], |t, v| t.softmax_axis(v[0], 1));
    check("attention", |r| vec![rand_t(r, &[3, 4]), rand_t(r, &[5, 4]), rand_t(r, &[5, 4])], |t, v| {
        t.scaled_dot_product_attention(v[0], v[1], v[2], 4)
    });
    check("multi-head", |r| vec![rand_t(r, &[3, 4]), rand_t(r, &[5, 4]), rand_t(r, &[5, 4])], |t, v| {
        t.multi_head_attention(v[0], v[1], v[2], 2, 4)
    });
    check("patch_mean", |r| vec![rand_t(r, &[1, 2, 5, 7])], |t, v| t.patch_mean(v[0], 2));
}

#[test]
fn non_finite_forward_names_the_op() {
    let mut tape = Tape::new();
    let x = tape.variable(Tensor::new(vec![1], vec![f64::MAX]).unwrap());
    let err = tape.scale(x, 10.0).unwrap_err().to_string();
    assert!(err.contains("scale"), "{err}");
}
