#![allow(dead_code)]

use cfsdcn::nn::{Ctx, ParamStore};
use cfsdcn::tensor::gradcheck::{project, rel_error, FD_STEP};
use cfsdcn::tensor::{Tensor4, Var};
use cfsdcn::Result;
use proptest::test_runner::{Config, RngSeed};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Deterministic proptest configuration with `cases` cases.
pub fn fixed(cases: u32) -> Config {
    Config {
        cases,
        failure_persistence: None,
        rng_seed: RngSeed::Fixed(0x5eed),
        ..Config::default()
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: [usize; 4], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor4<f64> {
    Tensor4::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Replaces every parameter with random values. Offset heads get a small
/// weight and a fractional bias so sampling points stay off the integer
/// lattice, where the bilinear kernel has kinks.
pub fn randomize(store: &mut ParamStore<f64>, seed: u64) {
    let mut r = rng(seed);
    let names = store.names().to_vec();
    for (name, value) in names.iter().zip(store.values_mut()) {
        let shape = value.shape();
        *value = if name.ends_with(".offset.weight") {
            uniform(shape, -0.01, 0.01, &mut r)
        } else if name.ends_with(".offset.bias") {
            uniform(shape, 0.3, 0.7, &mut r)
        } else if name.ends_with(".gamma") {
            uniform(shape, 0.7, 1.3, &mut r)
        } else {
            uniform(shape, -0.5, 0.5, &mut r)
        };
    }
}

/// Largest relative error between reverse-mode and central-difference
/// gradients of a module, over its input and every parameter tensor.
/// `per_tensor` coordinates are sampled from each tensor.
pub fn module_gradcheck<F>(store: &ParamStore<f64>, input: &Tensor4<f64>, per_tensor: usize, seed: u64, build: F) -> Result<f64>
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
    let gp = ctx.param_grads(&mut grads);

    let mut r = rng(seed ^ 0xabcd);
    let mut worst = 0.0f64;
    let mut store = store.clone();
    let mut input = input.clone();
    for t in 0..=gp.len() {
        let analytic = if t < gp.len() { &gp[t] } else { &gx };
        let floor = (1e-3 * analytic.max_abs()).max(1e-6);
        let len = analytic.len();
        let picks: Vec<usize> = if len <= per_tensor {
            (0..len).collect()
        } else {
            (0..per_tensor).map(|_| r.random_range(0..len)).collect()
        };
        for j in picks {
            let orig = set_coord(&mut store, &mut input, t, j, None);
            set_coord(&mut store, &mut input, t, j, Some(orig + FD_STEP));
            let plus = loss(&store, &input)?;
            set_coord(&mut store, &mut input, t, j, Some(orig - FD_STEP));
            let minus = loss(&store, &input)?;
            set_coord(&mut store, &mut input, t, j, Some(orig));
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(rel_error(analytic.data()[j], numeric, floor));
        }
    }
    Ok(worst)
}

/// Coordinate `j` of parameter tensor `t`, or of the input when `t` is past
/// the last parameter. Writes `value` when given and returns the old value.
fn set_coord(store: &mut ParamStore<f64>, input: &mut Tensor4<f64>, t: usize, j: usize, value: Option<f64>) -> f64 {
    let cell = if t < store.len() {
        &mut store.values_mut()[t].data_mut()[j]
    } else {
        &mut input.data_mut()[j]
    };
    let old = *cell;
    if let Some(v) = value {
        *cell = v;
    }
    old
}
