use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::error::{Error, Result};

use super::{check_same_shape, BackwardCtx, Op, Real, Tape, Tensor4, Var};

type Grads<T> = Vec<Option<Tensor4<T>>>;

fn zip_map<T: Real>(a: &Tensor4<T>, b: &Tensor4<T>, f: impl Fn(T, T) -> T) -> Tensor4<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor4::from_vec(a.shape(), data).expect("same shape")
}

struct AddOp([Var; 2]);

impl<T: Real> Op<T> for AddOp {
    fn name(&self) -> &'static str {
        "add"
    }
    fn inputs(&self) -> &[Var] {
        &self.0
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>, _: &Tensor4<T>, g: &Tensor4<T>) -> Grads<T> {
        self.0
            .iter()
            .map(|&v| ctx.needs_grad(v).then(|| g.clone()))
            .collect()
    }
}

struct MulOp([Var; 2]);

impl<T: Real> Op<T> for MulOp {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn inputs(&self) -> &[Var] {
        &self.0
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>, _: &Tensor4<T>, g: &Tensor4<T>) -> Grads<T> {
        let [a, b] = self.0;
        vec![
            ctx.needs_grad(a).then(|| zip_map(g, ctx.value(b), |g, y| g * y)),
            ctx.needs_grad(b).then(|| zip_map(g, ctx.value(a), |g, x| g * x)),
        ]
    }
}

struct ScaleOp {
    input: [Var; 1],
    factor: f64,
}

impl<T: Real> Op<T> for ScaleOp {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn inputs(&self) -> &[Var] {
        &self.input
    }
    fn backward(&self, _: &BackwardCtx<'_, T>, _: &Tensor4<T>, g: &Tensor4<T>) -> Grads<T> {
        let s = T::lit(self.factor);
        vec![Some(g.map(|v| v * s))]
    }
}

#[inline]
fn gelu_f64(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

#[inline]
fn gelu_grad_f64(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    cdf + x * pdf
}

struct GeluOp([Var; 1]);

impl<T: Real> Op<T> for GeluOp {
    fn name(&self) -> &'static str {
        "gelu"
    }
    fn inputs(&self) -> &[Var] {
        &self.0
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>, _: &Tensor4<T>, g: &Tensor4<T>) -> Grads<T> {
        let x = ctx.value(self.0[0]);
        vec![Some(zip_map(g, x, |g, x| g * T::lit(gelu_grad_f64(x.to_f64c()))))]
    }
}

struct ConcatOp {
    inputs: [Var; 2],
    split: usize,
}

impl<T: Real> Op<T> for ConcatOp {
    fn name(&self) -> &'static str {
        "concat_channels"
    }
    fn inputs(&self) -> &[Var] {
        &self.inputs
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>, _: &Tensor4<T>, g: &Tensor4<T>) -> Grads<T> {
        let [n, c, h, w] = g.shape();
        let hw = h * w;
        let parts = [(0, self.split), (self.split, c)];
        self.inputs
            .iter()
            .zip(parts)
            .map(|(&v, (lo, hi))| {
                ctx.needs_grad(v).then(|| {
                    let mut data = Vec::with_capacity(n * (hi - lo) * hw);
                    for b in 0..n {
                        data.extend_from_slice(&g.data()[(b * c + lo) * hw..(b * c + hi) * hw]);
                    }
                    Tensor4::from_vec([n, hi - lo, h, w], data).expect("split sizes")
                })
            })
            .collect()
    }
}

struct SoftmaxGroupOp {
    input: [Var; 1],
    group: usize,
}

impl<T: Real> Op<T> for SoftmaxGroupOp {
    fn name(&self) -> &'static str {
        "softmax_over_group"
    }
    fn inputs(&self) -> &[Var] {
        &self.input
    }
    fn backward(&self, _: &BackwardCtx<'_, T>, y: &Tensor4<T>, g: &Tensor4<T>) -> Grads<T> {
        let [n, c, h, w] = y.shape();
        let hw = h * w;
        let mut gx = Tensor4::zeros(y.shape());
        let (ys, gs) = (y.data(), g.data());
        let out = gx.data_mut();
        for b in 0..n {
            for grp in 0..c / self.group {
                let base = (b * c + grp * self.group) * hw;
                for p in 0..hw {
                    let mut dot = T::zero();
                    for k in 0..self.group {
                        let i = base + k * hw + p;
                        dot += ys[i] * gs[i];
                    }
                    for k in 0..self.group {
                        let i = base + k * hw + p;
                        out[i] = ys[i] * (gs[i] - dot);
                    }
                }
            }
        }
        vec![Some(gx)]
    }
}

struct LayerNormOp {
    inputs: [Var; 3],
    xhat: Tensor4<T0>,
    rstd: Vec<T0>,
}

// Saved statistics are kept in f64 so the op struct stays non-generic.
type T0 = f64;

impl<T: Real> Op<T> for LayerNormOp {
    fn name(&self) -> &'static str {
        "layer_norm"
    }
    fn inputs(&self) -> &[Var] {
        &self.inputs
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>, _: &Tensor4<T>, g: &Tensor4<T>) -> Grads<T> {
        let [n, c, h, w] = g.shape();
        let hw = h * w;
        let gamma = ctx.value(self.inputs[1]).data();
        let xh = self.xhat.data();
        let gs = g.data();
        let [_, need_gamma, need_beta] = self.inputs.map(|v| ctx.needs_grad(v));
        let mut gx = ctx.needs_grad(self.inputs[0]).then(|| Tensor4::<T>::zeros(g.shape()));
        let mut ggamma = vec![0.0f64; c];
        let mut gbeta = vec![0.0f64; c];
        let inv_c = 1.0 / c as f64;
        let mut mean_g = vec![0.0f64; hw];
        let mut mean_gx = vec![0.0f64; hw];
        for b in 0..n {
            mean_g.fill(0.0);
            mean_gx.fill(0.0);
            for ch in 0..c {
                let gam = gamma[ch].to_f64c();
                let base = (b * c + ch) * hw;
                let (mut sg, mut sb) = (0.0, 0.0);
                for p in 0..hw {
                    let gv = gs[base + p].to_f64c();
                    let xv = xh[base + p];
                    let gh = gv * gam;
                    mean_g[p] += gh;
                    mean_gx[p] += gh * xv;
                    sg += gv * xv;
                    sb += gv;
                }
                ggamma[ch] += sg;
                gbeta[ch] += sb;
            }
            if let Some(gx) = gx.as_mut() {
                let out = gx.data_mut();
                for ch in 0..c {
                    let gam = gamma[ch].to_f64c();
                    let base = (b * c + ch) * hw;
                    for p in 0..hw {
                        let gh = gs[base + p].to_f64c() * gam;
                        let r = self.rstd[b * hw + p];
                        out[base + p] = T::lit(
                            r * (gh - mean_g[p] * inv_c - xh[base + p] * mean_gx[p] * inv_c),
                        );
                    }
                }
            }
        }
        let to_t = |v: Vec<f64>| {
            Tensor4::from_vec([1, c, 1, 1], v.into_iter().map(T::lit).collect()).expect("c")
        };
        vec![
            gx,
            need_gamma.then(|| to_t(ggamma)),
            need_beta.then(|| to_t(gbeta)),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum LossKind {
    Mse,
    L1,
}

struct LossOp {
    inputs: [Var; 2],
    kind: LossKind,
}

impl<T: Real> Op<T> for LossOp {
    fn name(&self) -> &'static str {
        match self.kind {
            LossKind::Mse => "mse_loss",
            LossKind::L1 => "l1_loss",
        }
    }
    fn inputs(&self) -> &[Var] {
        &self.inputs
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>, _: &Tensor4<T>, g: &Tensor4<T>) -> Grads<T> {
        let [a, b] = self.inputs;
        let (av, bv) = (ctx.value(a), ctx.value(b));
        let scale = g.data()[0] / T::lit(av.len() as f64);
        let da = match self.kind {
            LossKind::Mse => zip_map(av, bv, |x, y| T::lit(2.0) * (x - y) * scale),
            LossKind::L1 => zip_map(av, bv, |x, y| {
                let d = x - y;
                if d > T::zero() {
                    scale
                } else if d < T::zero() {
                    -scale
                } else {
                    T::zero()
                }
            }),
        };
        let db = ctx.needs_grad(b).then(|| da.map(|v| -v));
        vec![ctx.needs_grad(a).then_some(da), db]
    }
}

struct SumOp([Var; 1]);

impl<T: Real> Op<T> for SumOp {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn inputs(&self) -> &[Var] {
        &self.0
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>, _: &Tensor4<T>, g: &Tensor4<T>) -> Grads<T> {
        vec![Some(Tensor4::full(ctx.value(self.0[0]).shape(), g.data()[0]))]
    }
}

impl<T: Real> Tape<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same_shape("add", self.value(a).shape(), self.value(b).shape())?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(out, Box::new(AddOp([a, b])), 0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same_shape("mul", self.value(a).shape(), self.value(b).shape())?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let macs = out.len() as u64;
        Ok(self.push(out, Box::new(MulOp([a, b])), macs))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let s = T::lit(factor);
        let out = self.value(x).map(|v| v * s);
        self.push(out, Box::new(ScaleOp { input: [x], factor }), 0)
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| T::lit(gelu_f64(v.to_f64c())));
        self.push(out, Box::new(GeluOp([x])), 0)
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let split = self.value(a).c();
        let out = Tensor4::concat_channels_raw(self.value(a), self.value(b))?;
        Ok(self.push(out, Box::new(ConcatOp { inputs: [a, b], split }), 0))
    }

    /// Softmax over each contiguous run of `group` channels, per pixel.
    pub fn softmax_over_group(&mut self, x: Var, group: usize) -> Result<Var> {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape();
        if group == 0 || c % group != 0 {
            return Err(Error::shape(
                "softmax_over_group",
                format!("{c} channels not divisible into groups of {group}"),
            ));
        }
        let hw = h * w;
        let mut out = Tensor4::zeros(xv.shape());
        let (xs, ys) = (xv.data(), out.data_mut());
        for b in 0..n {
            for grp in 0..c / group {
                let base = (b * c + grp * group) * hw;
                for p in 0..hw {
                    let mut m = T::neg_infinity();
                    for k in 0..group {
                        m = m.max(xs[base + k * hw + p]);
                    }
                    let mut z = T::zero();
                    for k in 0..group {
                        let e = (xs[base + k * hw + p] - m).exp();
                        ys[base + k * hw + p] = e;
                        z += e;
                    }
                    for k in 0..group {
                        ys[base + k * hw + p] = ys[base + k * hw + p] / z;
                    }
                }
            }
        }
        Ok(self.push(out, Box::new(SoftmaxGroupOp { input: [x], group }), 0))
    }

    /// Layer normalisation across channels at every pixel; `gamma`, `beta` are `(1, c, 1, 1)`.
    pub fn layer_norm_channels(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape();
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape() != [1, c, 1, 1] {
                return Err(Error::shape(
                    "layer_norm_channels",
                    format!("{name} shape {:?}, expected [1, {c}, 1, 1]", self.value(v).shape()),
                ));
            }
        }
        let hw = h * w;
        let xs = xv.data();
        let mut xhat = Tensor4::<f64>::zeros(xv.shape());
        let mut rstd = vec![0.0f64; n * hw];
        let mut mean = vec![0.0f64; hw];
        let mut var = vec![0.0f64; hw];
        let inv_c = 1.0 / c as f64;
        for b in 0..n {
            mean.fill(0.0);
            var.fill(0.0);
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                for p in 0..hw {
                    mean[p] += xs[base + p].to_f64c();
                }
            }
            mean.iter_mut().for_each(|m| *m *= inv_c);
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                for p in 0..hw {
                    let d = xs[base + p].to_f64c() - mean[p];
                    var[p] += d * d;
                }
            }
            for p in 0..hw {
                rstd[b * hw + p] = 1.0 / (var[p] * inv_c + eps).sqrt();
            }
            let xh = xhat.data_mut();
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                for p in 0..hw {
                    xh[base + p] = (xs[base + p].to_f64c() - mean[p]) * rstd[b * hw + p];
                }
            }
        }
        let (gs, bs) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = Tensor4::<T>::zeros(xv.shape());
        let os = out.data_mut();
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                for p in 0..hw {
                    os[base + p] = T::lit(xhat.data()[base + p]) * gs[ch] + bs[ch];
                }
            }
        }
        Ok(self.push(
            out,
            Box::new(LayerNormOp {
                inputs: [x, gamma, beta],
                xhat,
                rstd,
            }),
            0,
        ))
    }

    fn loss(&mut self, pred: Var, target: Var, kind: LossKind) -> Result<Var> {
        let (a, b) = (self.value(pred), self.value(target));
        check_same_shape("loss", a.shape(), b.shape())?;
        let mut acc = 0.0f64;
        for (&x, &y) in a.data().iter().zip(b.data()) {
            let d = (x - y).to_f64c();
            acc += match kind {
                LossKind::Mse => d * d,
                LossKind::L1 => d.abs(),
            };
        }
        let v = T::lit(acc / a.len() as f64);
        let out = Tensor4::full([1, 1, 1, 1], v);
        Ok(self.push(out, Box::new(LossOp { inputs: [pred, target], kind }), 0))
    }

    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.loss(pred, target, LossKind::Mse)
    }

    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.loss(pred, target, LossKind::L1)
    }

    /// Sum of all elements into a `(1, 1, 1, 1)` scalar.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self
            .value(x)
            .data()
            .iter()
            .fold(0.0f64, |acc, v| acc + v.to_f64c());
        self.push(Tensor4::full([1, 1, 1, 1], T::lit(s)), Box::new(SumOp([x])), 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mul_by_ones_is_identity() {
        let mut t = Tape::<f64>::new();
        let xv = Tensor4::from_fn([1, 2, 3, 3], |[_, c, y, x]| (c * 9 + y * 3 + x) as f64 - 4.0);
        let x = t.constant(xv.clone());
        let ones = t.constant(Tensor4::ones([1, 2, 3, 3]));
        let y = t.mul(x, ones).unwrap();
        assert_eq!(t.value(y), &xv);
    }

    #[test]
    fn softmax_of_identical_values_is_uniform() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor4::full([2, 12, 2, 2], 0.37));
        let y = t.softmax_over_group(x, 4).unwrap();
        for v in t.value(y).data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_groups_sum_to_one() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor4::from_fn([1, 6, 2, 3], |[_, c, y, x]| ((c * 7 + y * 3 + x) as f64).sin() * 3.0));
        let y = t.softmax_over_group(x, 3).unwrap();
        let yv = t.value(y);
        for g in 0..2 {
            for p in 0..6 {
                let s: f64 = (0..3).map(|k| yv.data()[(g * 3 + k) * 6 + p]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
        assert!(t.softmax_over_group(x, 4).is_err());
    }

    #[test]
    fn concat_then_backward_splits() {
        let mut t = Tape::<f64>::new();
        let a = t.leaf(Tensor4::ones([2, 1, 2, 2]));
        let b = t.leaf(Tensor4::ones([2, 3, 2, 2]));
        let c = t.concat_channels(a, b).unwrap();
        assert_eq!(t.value(c).shape(), [2, 4, 2, 2]);
        let w = t.constant(Tensor4::from_fn([2, 4, 2, 2], |[n, c, _, _]| (n * 4 + c) as f64));
        let p = t.mul(c, w).unwrap();
        let s = t.sum_all(p);
        let g = t.backward(s).unwrap();
        assert!(g.get(a).unwrap().data().iter().zip([0.0, 0.0, 0.0, 0.0, 4.0, 4.0, 4.0, 4.0]).all(|(&x, y)| x == y));
        assert_eq!(g.get(b).unwrap().at([1, 2, 0, 0]), 7.0);
    }

    #[test]
    fn layer_norm_output_is_standardised() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor4::from_fn([1, 5, 2, 2], |[_, c, y, x]| (c * c + y + 2 * x) as f64));
        let g = t.constant(Tensor4::ones([1, 5, 1, 1]));
        let b = t.constant(Tensor4::zeros([1, 5, 1, 1]));
        let y = t.layer_norm_channels(x, g, b, 0.0).unwrap();
        let yv = t.value(y);
        for p in 0..4 {
            let vals: Vec<f64> = (0..5).map(|c| yv.data()[c * 4 + p]).collect();
            let m = vals.iter().sum::<f64>() / 5.0;
            let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 5.0;
            assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn mse_of_known_difference() {
        let mut t = Tape::<f64>::new();
        let a = t.leaf(Tensor4::full([1, 1, 2, 2], 0.1));
        let b = t.constant(Tensor4::zeros([1, 1, 2, 2]));
        let l = t.mse_loss(a, b).unwrap();
        assert!((t.scalar(l) - 0.01).abs() < 1e-15);
        let g = t.backward(l).unwrap();
        assert!((g.get(a).unwrap().data()[0] - 0.05).abs() < 1e-15);
        assert!(g.get(b).is_none());
    }

    #[test]
    fn gelu_reference_values() {
        assert_eq!(gelu_f64(0.0), 0.0);
        assert!((gelu_f64(1.0) - 0.841_344_746_068_542_9).abs() < 1e-12);
        assert!((gelu_f64(-1.0) + 0.158_655_253_931_457_05).abs() < 1e-12);
    }
}
