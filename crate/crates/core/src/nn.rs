//! Parameter storage and the small set of layers the network is built from.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{conv_out_size, Conv2dSpec, Gradients, Real, Shape4, Tape, Tensor4, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named learnable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor4<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor4<T>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor4<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor4<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor4<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor4<T>] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total number of learnable scalars.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Scalars in every tensor whose name starts with `prefix`.
    pub fn num_scalars_with_prefix(&self, prefix: &str) -> usize {
        self.names
            .iter()
            .zip(&self.values)
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, v)| v.len())
            .sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(|v| v.cast()).collect(),
        }
    }

    /// Replaces the values, keeping names; shapes must match.
    pub fn load_values(&mut self, values: Vec<Tensor4<T>>) -> Result<()> {
        if values.len() != self.values.len() {
            return Err(Error::shape(
                "load_values",
                format!("{} tensors for {} parameters", values.len(), self.values.len()),
            ));
        }
        for (i, v) in values.iter().enumerate() {
            if v.shape() != self.values[i].shape() {
                return Err(Error::shape(
                    "load_values",
                    format!("{}: {:?} vs {:?}", self.names[i], v.shape(), self.values[i].shape()),
                ));
            }
        }
        self.values = values;
        Ok(())
    }
}

/// A tape with every parameter of a store bound as a leaf.
pub struct Ctx<T> {
    pub tape: Tape<T>,
    params: Vec<Var>,
}

impl<T: Real> Ctx<T> {
    /// Binds parameters as trainable leaves.
    pub fn trainable(store: &ParamStore<T>) -> Self {
        let mut tape = Tape::new();
        let params = store.values().iter().map(|v| tape.leaf(v.clone())).collect();
        Ctx { tape, params }
    }

    /// Binds parameters as constants; no gradients are tracked for them.
    pub fn frozen(store: &ParamStore<T>) -> Self {
        let mut tape = Tape::new();
        let params = store.values().iter().map(|v| tape.constant(v.clone())).collect();
        Ctx { tape, params }
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.params[id.0]
    }

    pub fn param_vars(&self) -> &[Var] {
        &self.params
    }

    /// Gradient for every parameter in store order (zeros where unused).
    pub fn param_grads(&self, grads: &mut Gradients<T>) -> Vec<Tensor4<T>> {
        self.params
            .iter()
            .map(|&v| {
                grads
                    .take(v)
                    .unwrap_or_else(|| Tensor4::zeros(self.tape.value(v).shape()))
            })
            .collect()
    }
}

/// Seeded initialiser: uniform in `±1/sqrt(fan_in)`.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn uniform<T: Real>(&mut self, shape: Shape4, bound: f64) -> Tensor4<T> {
        let rng = &mut self.rng;
        Tensor4::from_fn(shape, |_| T::lit(rng.random_range(-bound..bound)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitKind {
    Uniform,
    Zeros,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: Conv2dSpec,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        spec: Conv2dSpec,
        bias: bool,
        kind: InitKind,
    ) -> Self {
        let shape = [cout, cin / spec.groups, k, k];
        let fan_in = (cin / spec.groups) * k * k;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let (w, b) = match kind {
            InitKind::Uniform => (init.uniform(shape, bound), init.uniform([1, cout, 1, 1], bound)),
            InitKind::Zeros => (Tensor4::zeros(shape), Tensor4::zeros([1, cout, 1, 1])),
        };
        let weight = store.add(format!("{name}.weight"), w);
        let bias = bias.then(|| store.add(format!("{name}.bias"), b));
        Conv2d { weight, bias, spec }
    }

    pub fn pointwise<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        cin: usize,
        cout: usize,
        kind: InitKind,
    ) -> Self {
        Self::new(store, init, name, cin, cout, 1, Conv2dSpec::default(), true, kind)
    }

    pub fn depthwise<T: Real>(store: &mut ParamStore<T>, init: &mut Init, name: &str, c: usize, k: usize) -> Self {
        Self::new(
            store,
            init,
            name,
            c,
            c,
            k,
            Conv2dSpec::same(k).with_groups(c),
            true,
            InitKind::Uniform,
        )
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let (w, b) = (ctx.p(self.weight), self.bias.map(|b| ctx.p(b)));
        ctx.tape.conv2d(x, w, b, self.spec)
    }

    /// Output shape and multiply-accumulate count for an input of `shape`.
    pub fn cost<T: Real>(&self, store: &ParamStore<T>, shape: Shape4) -> Result<(Shape4, u64)> {
        let [cout, cin_g, k, _] = store.get(self.weight).shape();
        let [n, _, h, w] = shape;
        let s = self.spec;
        let (Some(oh), Some(ow)) = (
            conv_out_size(h, k, s.stride, s.padding),
            conv_out_size(w, k, s.stride, s.padding),
        ) else {
            return Err(Error::shape("conv cost", format!("kernel {k} too large for {h}x{w}")));
        };
        Ok(([n, cout, oh, ow], (n * cout * oh * ow * cin_g * k * k) as u64))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
}

impl ConvTranspose2d {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        bias: bool,
    ) -> Self {
        let bound = 1.0 / ((cout * k * k) as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), init.uniform([cin, cout, k, k], bound));
        let bias = bias.then(|| store.add(format!("{name}.bias"), init.uniform([1, cout, 1, 1], bound)));
        ConvTranspose2d { weight, bias, stride }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let (w, b) = (ctx.p(self.weight), self.bias.map(|b| ctx.p(b)));
        ctx.tape.conv_transpose2d(x, w, b, self.stride)
    }

    pub fn cost<T: Real>(&self, store: &ParamStore<T>, shape: Shape4) -> (Shape4, u64) {
        let [cin, cout, k, _] = store.get(self.weight).shape();
        let [n, _, h, w] = shape;
        let out = [n, cout, (h - 1) * self.stride + k, (w - 1) * self.stride + k];
        (out, (n * cin * h * w * cout * k * k) as u64)
    }
}

/// Layer normalisation over channels at each pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, c: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor4::ones([1, c, 1, 1])),
            beta: store.add(format!("{name}.beta"), Tensor4::zeros([1, c, 1, 1])),
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let (g, b) = (ctx.p(self.gamma), ctx.p(self.beta));
        ctx.tape.layer_norm_channels(x, g, b, LN_EPS)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pointwise_28_to_28_has_812_params() {
        let mut store = ParamStore::<f32>::new();
        let mut init = Init::new(0);
        Conv2d::pointwise(&mut store, &mut init, "fuse", 28, 28, InitKind::Uniform);
        assert_eq!(store.num_scalars(), 28 * 28 + 28);
        assert_eq!(store.num_scalars(), 812);
    }

    #[test]
    fn conv_cost_matches_tape_macs() {
        let mut store = ParamStore::<f32>::new();
        let mut init = Init::new(1);
        let conv = Conv2d::new(
            &mut store,
            &mut init,
            "down",
            4,
            8,
            4,
            Conv2dSpec { stride: 2, padding: 1, groups: 1 },
            false,
            InitKind::Uniform,
        );
        let mut ctx = Ctx::frozen(&store);
        let x = ctx.tape.constant(Tensor4::ones([2, 4, 8, 8]));
        let y = conv.forward(&mut ctx, x).unwrap();
        let (shape, macs) = conv.cost(&store, [2, 4, 8, 8]).unwrap();
        assert_eq!(shape, ctx.tape.value(y).shape());
        assert_eq!(macs, ctx.tape.macs());
    }

    #[test]
    fn frozen_context_tracks_no_grads() {
        let mut store = ParamStore::<f64>::new();
        let mut init = Init::new(2);
        let conv = Conv2d::pointwise(&mut store, &mut init, "p", 2, 2, InitKind::Uniform);
        let mut ctx = Ctx::frozen(&store);
        let x = ctx.tape.constant(Tensor4::ones([1, 2, 2, 2]));
        let y = conv.forward(&mut ctx, x).unwrap();
        assert!(!ctx.tape.requires_grad(y));
    }
}
