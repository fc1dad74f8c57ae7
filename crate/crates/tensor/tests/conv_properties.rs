use occ_tensor::{conv3d_forward, conv_transpose3d_forward, io, Conv3dOpts, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn lin(a: f64, x: &Tensor, b: f64, y: &Tensor) -> Tensor {
    Tensor::new(x.shape().to_vec(), x.data().iter().zip(y.data()).map(|(u, v)| a * u + b * v).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv3d_is_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0, stride in 1usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, y, k) = (rand_t(&mut rng, &[1, 2, 4, 3, 3]), rand_t(&mut rng, &[1, 2, 4, 3, 3]), rand_t(&mut rng, &[2, 2, 3, 3, 3]));
        let opts = Conv3dOpts::uniform(stride, 1);
        let lhs = conv3d_forward(&lin(a, &x, b, &y), &k, &opts).unwrap();
        let rhs = lin(a, &conv3d_forward(&x, &k, &opts).unwrap(), b, &conv3d_forward(&y, &k, &opts).unwrap());
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-10);
    }

    #[test]
    fn conv_transpose3d_is_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, y, k) = (rand_t(&mut rng, &[1, 2, 2, 3, 2]), rand_t(&mut rng, &[1, 2, 2, 3, 2]), rand_t(&mut rng, &[2, 3, 4, 4, 2]));
        let opts = Conv3dOpts { stride: [2, 2, 1], padding: [1, 1, 0] };
        let lhs = conv_transpose3d_forward(&lin(a, &x, b, &y), &k, &opts).unwrap();
        let rhs = lin(a, &conv_transpose3d_forward(&x, &k, &opts).unwrap(), b, &conv_transpose3d_forward(&y, &k, &opts).unwrap());
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-10);
    }

    #[test]
    fn conv2d_is_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, y, k) = (rand_t(&mut rng, &[2, 3, 5, 6]), rand_t(&mut rng, &[2, 3, 5, 6]), rand_t(&mut rng, &[2, 3, 3, 3]));
        let run = |x: &Tensor| {
            let mut tape = Tape::new();
            let (xv, kv) = (tape.constant(x.clone()), tape.constant(k.clone()));
            let out = tape.conv2d(xv, kv, 1, 1).unwrap();
            tape.value(out).clone()
        };
        let lhs = run(&lin(a, &x, b, &y));
        let rhs = lin(a, &run(&x), b, &run(&y));
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-10);
    }

    /// <conv3d(x, k), y> == <x, conv_transpose3d(y, k)>
    #[test]
    fn transpose_is_adjoint(seed in any::<u64>(), stride in 1usize..3, pad in 0usize..2) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_t(&mut rng, &[1, 2, 2, 2, 2]);
        let k = rand_t(&mut rng, &[3, 2, 2, 2, 2]);
        let opts = Conv3dOpts::uniform(stride, pad);
        let cx = conv3d_forward(&x, &k, &opts).unwrap();
        let y = rand_t(&mut rng, cx.shape());
        let ty = conv_transpose3d_forward(&y, &k, &opts).unwrap();
        prop_assume!(ty.shape() == x.shape());
        prop_assert!((cx.dot(&y) - x.dot(&ty)).abs() < 1e-10);
    }
}

#[test]
fn adjoint_on_2x2x2() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = rand_t(&mut rng, &[1, 1, 2, 2, 2]);
    let y = rand_t(&mut rng, &[1, 1, 2, 2, 2]);
    let k = rand_t(&mut rng, &[1, 1, 3, 3, 3]);
    let opts = Conv3dOpts::default();
    let lhs = conv3d_forward(&x, &k, &opts).unwrap().dot(&y);
    let rhs = x.dot(&conv_transpose3d_forward(&y, &k, &opts).unwrap());
    assert!((lhs - rhs).abs() < 1e-12);
}

#[test]
fn repeated_runs_are_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::new();
        let x = tape.variable(rand_t(&mut rng, &[1, 3, 6, 6]));
        let k = tape.variable(rand_t(&mut rng, &[4, 3, 3, 3]));
        let q = tape.variable(rand_t(&mut rng, &[5, 4]));
        let y = tape.conv2d(x, k, 1, 1).unwrap();
        let y = tape.relu(y).unwrap();
        let tok = tape.patch_mean(y, 2).unwrap();
        let tok = tape.reshape(tok, &[4, 9]).unwrap();
        let tok = tape.permute(tok, &[1, 0]).unwrap();
        let a = tape.multi_head_attention(q, tok, tok, 2, 4).unwrap();
        let s = tape.sum(a).unwrap();
        let g = tape.backward(s).unwrap();
        (io::encode(tape.value(a)), io::encode(g.get(k).unwrap()))
    };
    assert_eq!(run(), run());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lowered_kernels_match_direct_loops(
        seed in any::<u64>(),
        b in 1usize..3,
        cin in 1usize..4,
        cout in 1usize..4,
        dims in prop::array::uniform3(1usize..6),
        kdims in prop::array::uniform3(1usize..4),
        stride in prop::array::uniform3(1usize..4),
        pad in prop::array::uniform3(0usize..2),
    ) {
        use occ_tensor::ops::conv::*;
        let opts = Conv3dOpts { stride, padding: pad };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_t(&mut rng, &[b, cin, dims[0], dims[1], dims[2]]);
        let k = rand_t(&mut rng, &[cout, cin, kdims[0], kdims[1], kdims[2]]);
        let Ok(y) = conv3d_forward_direct(&x, &k, &opts) else {
            prop_assert!(conv3d_forward(&x, &k, &opts).is_err());
            return Ok(());
        };
        prop_assert!(conv3d_forward(&x, &k, &opts).unwrap().max_abs_diff(&y) < 1e-12);
        let dy = rand_t(&mut rng, y.shape());
        let dx = conv3d_backward_input(&dy, &k, dims, &opts).unwrap();
        prop_assert!(dx.max_abs_diff(&conv3d_backward_input_direct(&dy, &k, dims, &opts).unwrap()) < 1e-12);
        let ks = [cout, cin, kdims[0], kdims[1], kdims[2]];
        let dk = conv3d_backward_kernel(&dy, &x, ks, &opts).unwrap();
        prop_assert!(dk.max_abs_diff(&conv3d_backward_kernel_direct(&dy, &x, ks, &opts).unwrap()) < 1e-12);
    }
}
