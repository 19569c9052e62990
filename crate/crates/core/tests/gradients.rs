mod common;

use cfsdcn::blocks::{BlockOptions, Cfsab, Cfsdcb};
use cfsdcn::network::{Cfsdcn, ModelConfig};
use cfsdcn::nn::{Init, ParamStore};
use cfsdcn::tensor::gradcheck::{check_gradients, project, Coords, REL_TOL};
use cfsdcn::tensor::{Conv2dSpec, Tape, Tensor4, Var};
use cfsdcn::Result;
use common::{module_gradcheck, randomize, rng, uniform};
use proptest::prelude::*;
use rand::Rng;

fn check(inputs: &[Tensor4<f64>], seed: u64, build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) -> f64 {
    check_gradients(inputs, Coords::All, seed, |t, v| {
        let y = build(t, v)?;
        project(t, y, seed)
    })
    .unwrap()
    .max_rel_err()
}

/// Random offsets whose fractional parts stay away from the bilinear kinks.
fn off_lattice(shape: [usize; 4], r: &mut impl Rng) -> Tensor4<f64> {
    Tensor4::from_fn(shape, |_| r.random_range(-2i32..2) as f64 + r.random_range(0.1..0.9))
}

proptest! {
    #![proptest_config(common::fixed(50))]

    #[test]
    fn conv2d_matches_finite_differences(seed in any::<u64>()) {
        let mut r = rng(seed);
        let groups = [1, 2][r.random_range(0..2)];
        let cin = groups * r.random_range(1..3);
        let cout = groups * r.random_range(1..3);
        let k = r.random_range(1..4);
        let stride = r.random_range(1..3);
        let padding = r.random_range(0..=k / 2 + 1);
        let spec = Conv2dSpec { stride, padding, groups };
        let h = r.random_range(k..6);
        let inputs = [
            uniform([r.random_range(1..3), cin, h, h + 1], -1.0, 1.0, &mut r),
            uniform([cout, cin / groups, k, k], -1.0, 1.0, &mut r),
            uniform([1, cout, 1, 1], -1.0, 1.0, &mut r),
        ];
        let err = check(&inputs, seed, |t, v| t.conv2d(v[0], v[1], Some(v[2]), spec));
        prop_assert!(err < REL_TOL, "{spec:?}: {err}");
    }

    #[test]
    fn depthwise_matches_finite_differences(seed in any::<u64>()) {
        let mut r = rng(seed);
        let c = r.random_range(1..4);
        let k = [3, 5, 7][r.random_range(0..3)];
        let inputs = [
            uniform([1, c, r.random_range(2..7), r.random_range(2..7)], -1.0, 1.0, &mut r),
            uniform([c, 1, k, k], -1.0, 1.0, &mut r),
            uniform([1, c, 1, 1], -1.0, 1.0, &mut r),
        ];
        let err = check(&inputs, seed, |t, v| t.depthwise_conv2d(v[0], v[1], Some(v[2]), k / 2));
        prop_assert!(err < REL_TOL, "{err}");
    }

    #[test]
    fn pointwise_matches_finite_differences(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (cin, cout) = (r.random_range(1..5), r.random_range(1..5));
        let inputs = [
            uniform([r.random_range(1..3), cin, 3, 4], -1.0, 1.0, &mut r),
            uniform([cout, cin, 1, 1], -1.0, 1.0, &mut r),
            uniform([1, cout, 1, 1], -1.0, 1.0, &mut r),
        ];
        let err = check(&inputs, seed, |t, v| t.pointwise_conv(v[0], v[1], Some(v[2])));
        prop_assert!(err < REL_TOL, "{err}");
    }

    #[test]
    fn conv_transpose_matches_finite_differences(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (cin, cout, k) = (r.random_range(1..4), r.random_range(1..4), r.random_range(1..4));
        let stride = r.random_range(1..3);
        let inputs = [
            uniform([1, cin, r.random_range(1..4), r.random_range(1..4)], -1.0, 1.0, &mut r),
            uniform([cin, cout, k, k], -1.0, 1.0, &mut r),
            uniform([1, cout, 1, 1], -1.0, 1.0, &mut r),
        ];
        let err = check(&inputs, seed, |t, v| t.conv_transpose2d(v[0], v[1], Some(v[2]), stride));
        prop_assert!(err < REL_TOL, "{err}");
    }

    #[test]
    fn grouped_softmax_matches_finite_differences(seed in any::<u64>()) {
        let mut r = rng(seed);
        let group = r.random_range(1..6);
        let groups = r.random_range(1..4);
        let inputs = [uniform([1, group * groups, 3, 3], -3.0, 3.0, &mut r)];
        let err = check(&inputs, seed, |t, v| t.softmax_over_group(v[0], group));
        prop_assert!(err < REL_TOL, "{err}");
    }

    #[test]
    fn elementwise_graph_matches_finite_differences(seed in any::<u64>()) {
        let mut r = rng(seed);
        let shape = [r.random_range(1..3), r.random_range(1..4), 3, 3];
        let inputs = [
            uniform(shape, -2.0, 2.0, &mut r),
            uniform(shape, -2.0, 2.0, &mut r),
            uniform(shape, -2.0, 2.0, &mut r),
        ];
        let err = check(&inputs, seed, |t, v| {
            let m = t.mul(v[0], v[1])?;
            let a = t.add(m, v[2])?;
            let g = t.gelu(a);
            let s = t.scale(g, 0.7);
            t.concat_channels(s, v[0])
        });
        prop_assert!(err < REL_TOL, "{err}");
    }

    #[test]
    fn layer_norm_and_losses_match_finite_differences(seed in any::<u64>()) {
        let mut r = rng(seed);
        let c = r.random_range(2..6);
        let inputs = [
            uniform([2, c, 3, 2], -2.0, 2.0, &mut r),
            uniform([1, c, 1, 1], 0.5, 1.5, &mut r),
            uniform([1, c, 1, 1], -0.5, 0.5, &mut r),
        ];
        let target = uniform([2, c, 3, 2], -1.0, 1.0, &mut r);
        let err = check_gradients(&inputs, Coords::All, seed, |t, v| {
            let y = t.layer_norm_channels(v[0], v[1], v[2], 1e-5)?;
            let tg = t.constant(target.clone());
            let mse = t.mse_loss(y, tg)?;
            let p = project(t, y, seed)?;
            t.add(mse, p)
        })
        .unwrap()
        .max_rel_err();
        prop_assert!(err < REL_TOL, "{err}");
    }

    #[test]
    fn deform_aggregate_matches_finite_differences(seed in any::<u64>()) {
        let mut r = rng(seed);
        let groups = [1, 2][r.random_range(0..2)];
        let c = groups * r.random_range(1..3);
        let (h, w) = (r.random_range(2..5), r.random_range(2..5));
        let taps = 9;
        let inputs = [
            uniform([1, c, h, w], -1.0, 1.0, &mut r),
            off_lattice([1, 2 * groups * taps, h, w], &mut r),
            uniform([1, groups * taps, h, w], -1.0, 1.0, &mut r),
            uniform([c, c, 1, 1], -1.0, 1.0, &mut r),
        ];
        let err = check(&inputs, seed, |t, v| {
            let agg = t.deform_aggregate(v[0], v[1], v[2], groups, 3)?;
            t.pointwise_conv(agg, v[3], None)
        });
        prop_assert!(err < REL_TOL, "{err}");
    }
}

fn block_input(c: usize, seed: u64) -> Tensor4<f64> {
    uniform([1, c, 5, 6], -1.0, 1.0, &mut rng(seed ^ 0x77))
}

proptest! {
    #![proptest_config(common::fixed(20))]

    #[test]
    fn cfsab_matches_finite_differences(seed in any::<u64>()) {
        let mut store = ParamStore::<f64>::new();
        let ab = Cfsab::new(&mut store, &mut Init::new(seed), "ab", 8, 3).unwrap();
        randomize(&mut store, seed);
        let err = module_gradcheck(&store, &block_input(8, seed), 6, seed, |ctx, x| ab.forward(ctx, x)).unwrap();
        prop_assert!(err < REL_TOL, "{err}");
    }

    #[test]
    fn deformable_mixer_matches_finite_differences(seed in any::<u64>()) {
        let mut store = ParamStore::<f64>::new();
        let opts = BlockOptions { groups: Some(2), lcs_kernel: 3, ..BlockOptions::default() };
        let block = Cfsdcb::new(&mut store, &mut Init::new(seed), "b", 8, &opts).unwrap();
        randomize(&mut store, seed);
        let err = module_gradcheck(&store, &block_input(8, seed), 6, seed, |ctx, x| block.mixer.forward(ctx, x)).unwrap();
        prop_assert!(err < REL_TOL, "{err}");
    }

    #[test]
    fn cfsdcb_matches_finite_differences(seed in any::<u64>()) {
        let mut store = ParamStore::<f64>::new();
        let opts = BlockOptions { groups: Some(2), lcs_kernel: 3, ..BlockOptions::default() };
        let block = Cfsdcb::new(&mut store, &mut Init::new(seed), "b", 8, &opts).unwrap();
        randomize(&mut store, seed);
        let err = module_gradcheck(&store, &block_input(8, seed), 4, seed, |ctx, x| block.forward(ctx, x)).unwrap();
        prop_assert!(err < REL_TOL, "{err}");
    }

    #[test]
    fn tiny_network_matches_finite_differences(seed in any::<u64>()) {
        let cfg = ModelConfig::new(4, [1, 1, 1]).with_bands(2);
        let (net, mut store) = Cfsdcn::new::<f64>(&cfg, seed).unwrap();
        randomize(&mut store, seed);
        let input = uniform([1, 4, 8, 8], 0.0, 1.0, &mut rng(seed));
        let err = module_gradcheck(&store, &input, 2, seed, |ctx, x| net.forward(ctx, x)).unwrap();
        prop_assert!(err < REL_TOL, "{err}");
    }
}

#[test]
fn zero_initialised_heads_still_receive_gradient() {
    let mut store = ParamStore::<f64>::new();
    let block = Cfsdcb::new(&mut store, &mut Init::new(3), "b", 8, &BlockOptions::default()).unwrap();
    let mut ctx = cfsdcn::nn::Ctx::trainable(&store);
    let x = ctx.tape.constant(block_input(8, 3));
    let y = block.forward(&mut ctx, x).unwrap();
    let l = project(&mut ctx.tape, y, 9).unwrap();
    let mut grads = ctx.tape.backward(l).unwrap();
    let g = ctx.param_grads(&mut grads);
    let id = store.find("b.deform.offset.weight").unwrap();
    assert!(g[id.index()].max_abs() > 0.0);
}
