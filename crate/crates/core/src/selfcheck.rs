//! Finite-difference self check of every differentiable building block,
//! exposed so the command line can run it on a fresh build.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::blocks::{BlockOptions, Cfsab, Cfsdcb};
use crate::error::{Error, Result};
use crate::network::{Cfsdcn, ModelConfig};
use crate::nn::{Ctx, Init, ParamStore};
use crate::tensor::gradcheck::{check_gradients, project, random_tensor, rel_error, Coords, FD_STEP, REL_TOL};
use crate::tensor::{Conv2dSpec, Tape, Tensor4, Var};

pub const MODULES: &[&str] = &[
    "conv2d",
    "depthwise",
    "pointwise",
    "conv_transpose",
    "softmax_grouped",
    "layer_norm",
    "deform_conv",
    "cfsab",
    "cfsdcb",
    "cfsdcn_tiny",
];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckRow {
    pub module: String,
    pub seeds: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn op_check(inputs: &[Tensor4<f64>], seed: u64, build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) -> Result<f64> {
    let report = check_gradients(inputs, Coords::All, seed, |t, v| {
        let y = build(t, v)?;
        project(t, y, seed)
    })?;
    Ok(report.max_rel_err())
}

/// Random parameters; offset heads stay small with fractional biases so
/// sampling points avoid the bilinear kinks on the integer lattice.
fn randomize(store: &mut ParamStore<f64>, seed: u64) {
    let mut r = rng(seed ^ 0x5151);
    let names = store.names().to_vec();
    for (name, value) in names.iter().zip(store.values_mut()) {
        let shape = value.shape();
        *value = if name.ends_with(".offset.weight") {
            random_tensor(shape, -0.01, 0.01, &mut r)
        } else if name.ends_with(".offset.bias") {
            random_tensor(shape, 0.3, 0.7, &mut r)
        } else if name.ends_with(".gamma") {
            random_tensor(shape, 0.7, 1.3, &mut r)
        } else {
            random_tensor(shape, -0.5, 0.5, &mut r)
        };
    }
}

/// Worst relative error over the input and every parameter tensor, with
/// `per_tensor` sampled coordinates each.
fn module_check<F>(store: &ParamStore<f64>, input: &Tensor4<f64>, per_tensor: usize, seed: u64, build: F) -> Result<f64>
where
    F: Fn(&mut Ctx<f64>, Var) -> Result<Var>,
{
    let loss = |store: &ParamStore<f64>, input: &Tensor4<f64>| -> Result<f64> {
        let mut ctx = Ctx::frozen(store);
        let x = ctx.tape.constant(input.clone());
        let y = build(&mut ctx, x)?;
        let l = project(&mut ctx.tape, y, seed)?;
        Ok(ctx.tape.scalar(l))
    };
    let mut ctx = Ctx::trainable(store);
    let x = ctx.tape.leaf(input.clone());
    let y = build(&mut ctx, x)?;
    let l = project(&mut ctx.tape, y, seed)?;
    let mut grads = ctx.tape.backward(l)?;
    let gx = grads.take(x).unwrap_or_else(|| Tensor4::zeros(input.shape()));
    let mut analytic = ctx.param_grads(&mut grads);
    analytic.push(gx);

    let mut r = rng(seed ^ 0xabcd);
    let mut store = store.clone();
    let mut input = input.clone();
    let mut worst = 0.0f64;
    for (t, a) in analytic.iter().enumerate() {
        let floor = (1e-3 * a.max_abs()).max(1e-6);
        let picks: Vec<usize> = if a.len() <= per_tensor {
            (0..a.len()).collect()
        } else {
            (0..per_tensor).map(|_| r.random_range(0..a.len())).collect()
        };
        for j in picks {
            let cell = |s: &mut ParamStore<f64>, i: &mut Tensor4<f64>, v: Option<f64>| {
                let c = if t < s.len() { &mut s.values_mut()[t].data_mut()[j] } else { &mut i.data_mut()[j] };
                let old = *c;
                if let Some(v) = v {
                    *c = v;
                }
                old
            };
            let orig = cell(&mut store, &mut input, None);
            cell(&mut store, &mut input, Some(orig + FD_STEP));
            let plus = loss(&store, &input)?;
            cell(&mut store, &mut input, Some(orig - FD_STEP));
            let minus = loss(&store, &input)?;
            cell(&mut store, &mut input, Some(orig));
            worst = worst.max(rel_error(a.data()[j], (plus - minus) / (2.0 * FD_STEP), floor));
        }
    }
    Ok(worst)
}

fn check_one(module: &str, seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    match module {
        "conv2d" => {
            let spec = Conv2dSpec { stride: 2, padding: 1, groups: 2 };
            let inputs = [
                random_tensor([2, 4, 5, 6], -1.0, 1.0, &mut r),
                random_tensor([4, 2, 3, 3], -1.0, 1.0, &mut r),
                random_tensor([1, 4, 1, 1], -1.0, 1.0, &mut r),
            ];
            op_check(&inputs, seed, |t, v| t.conv2d(v[0], v[1], Some(v[2]), spec))
        }
        "depthwise" => {
            let inputs = [
                random_tensor([1, 3, 6, 5], -1.0, 1.0, &mut r),
                random_tensor([3, 1, 5, 5], -1.0, 1.0, &mut r),
                random_tensor([1, 3, 1, 1], -1.0, 1.0, &mut r),
            ];
            op_check(&inputs, seed, |t, v| t.depthwise_conv2d(v[0], v[1], Some(v[2]), 2))
        }
        "pointwise" => {
            let inputs = [
                random_tensor([2, 3, 3, 4], -1.0, 1.0, &mut r),
                random_tensor([4, 3, 1, 1], -1.0, 1.0, &mut r),
                random_tensor([1, 4, 1, 1], -1.0, 1.0, &mut r),
            ];
            op_check(&inputs, seed, |t, v| t.pointwise_conv(v[0], v[1], Some(v[2])))
        }
        "conv_transpose" => {
            let inputs = [
                random_tensor([1, 3, 3, 2], -1.0, 1.0, &mut r),
                random_tensor([3, 2, 2, 2], -1.0, 1.0, &mut r),
                random_tensor([1, 2, 1, 1], -1.0, 1.0, &mut r),
            ];
            op_check(&inputs, seed, |t, v| t.conv_transpose2d(v[0], v[1], Some(v[2]), 2))
        }
        "softmax_grouped" => {
            let inputs = [random_tensor([1, 18, 3, 3], -3.0, 3.0, &mut r)];
            op_check(&inputs, seed, |t, v| t.softmax_over_group(v[0], 9))
        }
        "layer_norm" => {
            let inputs = [
                random_tensor([2, 4, 3, 2], -2.0, 2.0, &mut r),
                random_tensor([1, 4, 1, 1], 0.5, 1.5, &mut r),
                random_tensor([1, 4, 1, 1], -0.5, 0.5, &mut r),
            ];
            op_check(&inputs, seed, |t, v| t.layer_norm_channels(v[0], v[1], v[2], 1e-5))
        }
        "deform_conv" => {
            let offsets = Tensor4::from_fn([1, 36, 4, 4], |_| r.random_range(-2i32..2) as f64 + r.random_range(0.1..0.9));
            let inputs = [
                random_tensor([1, 4, 4, 4], -1.0, 1.0, &mut r),
                offsets,
                random_tensor([1, 18, 4, 4], -1.0, 1.0, &mut r),
                random_tensor([4, 4, 1, 1], -1.0, 1.0, &mut r),
            ];
            op_check(&inputs, seed, |t, v| {
                let m = t.softmax_over_group(v[2], 9)?;
                let agg = t.deform_aggregate(v[0], v[1], m, 2, 3)?;
                t.pointwise_conv(agg, v[3], None)
            })
        }
        "cfsab" => {
            let mut store = ParamStore::new();
            let ab = Cfsab::new(&mut store, &mut Init::new(seed), "ab", 8, 3)?;
            randomize(&mut store, seed);
            let x = random_tensor([1, 8, 5, 6], -1.0, 1.0, &mut r);
            module_check(&store, &x, 6, seed, |ctx, v| ab.forward(ctx, v))
        }
        "cfsdcb" => {
            let mut store = ParamStore::new();
            let opts = BlockOptions { groups: Some(2), lcs_kernel: 3, ..BlockOptions::default() };
            let block = Cfsdcb::new(&mut store, &mut Init::new(seed), "b", 8, &opts)?;
            randomize(&mut store, seed);
            let x = random_tensor([1, 8, 5, 6], -1.0, 1.0, &mut r);
            module_check(&store, &x, 4, seed, |ctx, v| block.forward(ctx, v))
        }
        "cfsdcn_tiny" => {
            let cfg = ModelConfig::new(4, [1, 1, 1]).with_bands(2);
            let (net, mut store) = Cfsdcn::new::<f64>(&cfg, seed)?;
            randomize(&mut store, seed);
            let x = random_tensor([1, 4, 8, 8], 0.0, 1.0, &mut r);
            module_check(&store, &x, 2, seed, |ctx, v| net.forward(ctx, v))
        }
        other => Err(Error::Config(format!("unknown module '{other}' (one of {})", MODULES.join(", ")))),
    }
}

/// Checks `module` (or every module) over seeds `0..seeds`.
pub fn run(module: Option<&str>, seeds: usize) -> Result<Vec<CheckRow>> {
    let modules: Vec<&str> = match module {
        Some(m) if MODULES.contains(&m) => vec![m],
        Some(m) => return Err(Error::Config(format!("unknown module '{m}' (one of {})", MODULES.join(", ")))),
        None => MODULES.to_vec(),
    };
    modules
        .into_iter()
        .map(|m| {
            let worst = (0..seeds as u64).try_fold(0.0f64, |w, s| Ok::<_, Error>(w.max(check_one(m, s)?)))?;
            Ok(CheckRow {
                module: m.to_string(),
                seeds,
                max_rel_err: worst,
                passed: worst < REL_TOL,
            })
        })
        .collect()
}
