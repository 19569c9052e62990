//! Direct-loop convolution kernels.
//!
//! Every kernel writes disjoint output planes from independent rayon tasks and
//! accumulates in a fixed loop order, so results do not depend on the worker
//! count.

use rayon::prelude::*;

use crate::error::{Error, Result};

use super::{gemm, Op, Real, Tape, Tensor4, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Conv2dSpec {
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }
}

impl Conv2dSpec {
    pub fn same(k: usize) -> Self {
        Conv2dSpec {
            stride: 1,
            padding: k / 2,
            groups: 1,
        }
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }
}

pub fn conv_out_size(size: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    if padded < k || stride == 0 {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Output columns `ox` whose input column `ox*s + kx - p` lies in `[0, w)`.
#[inline]
fn valid_range(out: usize, w: usize, s: usize, kx: usize, p: usize) -> (usize, usize) {
    // ox*s >= p - kx
    let lo = if p > kx { (p - kx).div_ceil(s) } else { 0 };
    // ox*s + kx - p <= w - 1
    let hi = if w + p > kx {
        ((w - 1 + p - kx) / s + 1).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

struct ConvDims {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    oh: usize,
    ow: usize,
    cin_g: usize,
    cout_g: usize,
}

fn conv_dims<T: Real>(
    x: &Tensor4<T>,
    weight: &Tensor4<T>,
    bias: Option<&Tensor4<T>>,
    spec: Conv2dSpec,
) -> Result<ConvDims> {
    let [n, cin, h, w] = x.shape();
    let [cout, wcin, kh, kw] = weight.shape();
    let g = spec.groups;
    if g == 0 || cin % g != 0 || cout % g != 0 {
        return Err(Error::shape(
            "conv2d",
            format!("channels in={cin} out={cout} not divisible by groups={g}"),
        ));
    }
    if wcin != cin / g {
        return Err(Error::shape(
            "conv2d",
            format!(
                "weight expects {wcin} input channels per group, input has {} (c={cin}, groups={g})",
                cin / g
            ),
        ));
    }
    if kh != kw {
        return Err(Error::shape("conv2d", format!("non-square kernel {kh}x{kw}")));
    }
    if let Some(b) = bias {
        if b.shape() != [1, cout, 1, 1] {
            return Err(Error::shape(
                "conv2d",
                format!("bias shape {:?}, expected [1, {cout}, 1, 1]", b.shape()),
            ));
        }
    }
    let oh = conv_out_size(h, kh, spec.stride, spec.padding);
    let ow = conv_out_size(w, kw, spec.stride, spec.padding);
    let (Some(oh), Some(ow)) = (oh, ow) else {
        return Err(Error::shape(
            "conv2d",
            format!("kernel {kh} larger than padded input {h}x{w} (padding {})", spec.padding),
        ));
    };
    Ok(ConvDims {
        n,
        cin,
        h,
        w,
        cout,
        k: kh,
        oh,
        ow,
        cin_g: cin / g,
        cout_g: cout / g,
    })
}

impl ConvDims {
    fn depthwise(&self) -> bool {
        self.cin_g == 1 && self.cout_g == 1
    }

    fn groups(&self) -> usize {
        self.cin / self.cin_g
    }

    /// Rows of the unfolded input per group.
    fn patch(&self) -> usize {
        self.cin_g * self.k * self.k
    }
}

fn is_pointwise(d: &ConvDims, spec: Conv2dSpec) -> bool {
    d.k == 1 && spec.stride == 1 && spec.padding == 0
}

/// Unfolds the channels `c0..c0 + d.cin_g` of one image into a
/// `(cin_g * k * k) x (oh * ow)` matrix.
fn im2col<T: Real>(img: &[T], c0: usize, d: &ConvDims, spec: Conv2dSpec, cols: &mut [T]) {
    let (s, p) = (spec.stride, spec.padding);
    let plane_out = d.oh * d.ow;
    for ci in 0..d.cin_g {
        let src = &img[(c0 + ci) * d.h * d.w..][..d.h * d.w];
        for ky in 0..d.k {
            for kx in 0..d.k {
                let dst = &mut cols[((ci * d.k + ky) * d.k + kx) * plane_out..][..plane_out];
                let (lo, hi) = valid_range(d.ow, d.w, s, kx, p);
                for oy in 0..d.oh {
                    let orow = &mut dst[oy * d.ow..][..d.ow];
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy as usize >= d.h || lo >= hi {
                        orow.fill(T::zero());
                        continue;
                    }
                    let row = &src[iy as usize * d.w..][..d.w];
                    orow[..lo].fill(T::zero());
                    orow[hi..].fill(T::zero());
                    if s == 1 {
                        let off = lo + kx - p;
                        orow[lo..hi].copy_from_slice(&row[off..off + hi - lo]);
                    } else {
                        for ox in lo..hi {
                            orow[ox] = row[ox * s + kx - p];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates the matrix back into image channels.
fn col2im<T: Real>(cols: &[T], c0: usize, d: &ConvDims, spec: Conv2dSpec, img: &mut [T]) {
    let (s, p) = (spec.stride, spec.padding);
    let plane_out = d.oh * d.ow;
    for ci in 0..d.cin_g {
        let dst = &mut img[(c0 + ci) * d.h * d.w..][..d.h * d.w];
        for ky in 0..d.k {
            for kx in 0..d.k {
                let src = &cols[((ci * d.k + ky) * d.k + kx) * plane_out..][..plane_out];
                let (lo, hi) = valid_range(d.ow, d.w, s, kx, p);
                if lo >= hi {
                    continue;
                }
                for oy in 0..d.oh {
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy as usize >= d.h {
                        continue;
                    }
                    let row = &mut dst[iy as usize * d.w..][..d.w];
                    let crow = &src[oy * d.ow..][..d.ow];
                    if s == 1 {
                        let off = lo + kx - p;
                        for (v, &c) in row[off..off + hi - lo].iter_mut().zip(&crow[lo..hi]) {
                            *v += c;
                        }
                    } else {
                        for ox in lo..hi {
                            row[ox * s + kx - p] += crow[ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution without recording. Zero padding.
pub fn conv2d_raw<T: Real>(
    x: &Tensor4<T>,
    weight: &Tensor4<T>,
    bias: Option<&Tensor4<T>>,
    spec: Conv2dSpec,
) -> Result<Tensor4<T>> {
    let d = conv_dims(x, weight, bias, spec)?;
    let mut out = Tensor4::zeros([d.n, d.cout, d.oh, d.ow]);
    if let Some(bt) = bias {
        for (plane, &b) in out.data_mut().chunks_mut(d.oh * d.ow).zip(bt.data().iter().cycle()) {
            plane.fill(b);
        }
    }
    if d.depthwise() {
        depthwise_forward(x, weight, &d, spec, &mut out);
        return Ok(out);
    }
    let xs = x.data();
    let ws = weight.data();
    let (kp, po) = (d.patch(), d.oh * d.ow);
    let pointwise = is_pointwise(&d, spec);
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); kp * po] };
    for b in 0..d.n {
        let img = &xs[b * d.cin * d.h * d.w..][..d.cin * d.h * d.w];
        for g in 0..d.groups() {
            let c0 = g * d.cin_g;
            let m: &[T] = if pointwise {
                &img[c0 * po..][..kp * po]
            } else {
                im2col(img, c0, &d, spec, &mut cols);
                &cols
            };
            let wg = &ws[g * d.cout_g * kp..][..d.cout_g * kp];
            let dst = &mut out.data_mut()[(b * d.cout + g * d.cout_g) * po..][..d.cout_g * po];
            gemm::gemm_nn(d.cout_g, kp, po, wg, m, dst);
        }
    }
    Ok(out)
}

fn depthwise_forward<T: Real>(x: &Tensor4<T>, weight: &Tensor4<T>, d: &ConvDims, spec: Conv2dSpec, out: &mut Tensor4<T>) {
    let (s, p) = (spec.stride, spec.padding);
    let xs = x.data();
    let ws = weight.data();
    let plane_in = d.h * d.w;
    out.data_mut()
        .par_chunks_mut(d.oh * d.ow)
        .enumerate()
        .for_each(|(idx, dst)| {
            let (b, c) = (idx / d.cout, idx % d.cout);
            let src = &xs[(b * d.cin + c) * plane_in..][..plane_in];
            let wk = &ws[c * d.k * d.k..][..d.k * d.k];
            for ky in 0..d.k {
                for kx in 0..d.k {
                    let wv = wk[ky * d.k + kx];
                    let (lo, hi) = valid_range(d.ow, d.w, s, kx, p);
                    if lo >= hi {
                        continue;
                    }
                    for oy in 0..d.oh {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy as usize >= d.h {
                            continue;
                        }
                        let row = &src[iy as usize * d.w..][..d.w];
                        let orow = &mut dst[oy * d.ow..][..d.ow];
                        if s == 1 {
                            let off = lo + kx - p;
                            gemm::axpy(&mut orow[lo..hi], wv, &row[off..off + hi - lo]);
                        } else {
                            for ox in lo..hi {
                                orow[ox] += wv * row[ox * s + kx - p];
                            }
                        }
                    }
                }
            }
        });
}

fn depthwise_grad_input<T: Real>(gout: &Tensor4<T>, weight: &Tensor4<T>, d: &ConvDims, spec: Conv2dSpec) -> Tensor4<T> {
    let (s, p) = (spec.stride, spec.padding);
    let mut gin = Tensor4::zeros([d.n, d.cin, d.h, d.w]);
    let gs = gout.data();
    let ws = weight.data();
    let plane_out = d.oh * d.ow;
    gin.data_mut()
        .par_chunks_mut(d.h * d.w)
        .enumerate()
        .for_each(|(idx, dst)| {
            let (b, c) = (idx / d.cin, idx % d.cin);
            let src = &gs[(b * d.cout + c) * plane_out..][..plane_out];
            let wk = &ws[c * d.k * d.k..][..d.k * d.k];
            for ky in 0..d.k {
                for kx in 0..d.k {
                    let wv = wk[ky * d.k + kx];
                    let (lo, hi) = valid_range(d.ow, d.w, s, kx, p);
                    if lo >= hi {
                        continue;
                    }
                    for oy in 0..d.oh {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy as usize >= d.h {
                            continue;
                        }
                        let row = &mut dst[iy as usize * d.w..][..d.w];
                        let grow = &src[oy * d.ow..][..d.ow];
                        if s == 1 {
                            let off = lo + kx - p;
                            gemm::axpy(&mut row[off..off + hi - lo], wv, &grow[lo..hi]);
                        } else {
                            for ox in lo..hi {
                                row[ox * s + kx - p] += wv * grow[ox];
                            }
                        }
                    }
                }
            }
        });
    gin
}

fn depthwise_grad_weight<T: Real>(gout: &Tensor4<T>, x: &Tensor4<T>, d: &ConvDims, spec: Conv2dSpec) -> Tensor4<T> {
    let (s, p) = (spec.stride, spec.padding);
    let mut gw = Tensor4::zeros([d.cout, 1, d.k, d.k]);
    let gs = gout.data();
    let xs = x.data();
    let plane_out = d.oh * d.ow;
    let plane_in = d.h * d.w;
    gw.data_mut()
        .par_chunks_mut(d.k * d.k)
        .enumerate()
        .for_each(|(c, wk)| {
            for b in 0..d.n {
                let go = &gs[(b * d.cout + c) * plane_out..][..plane_out];
                let src = &xs[(b * d.cin + c) * plane_in..][..plane_in];
                for ky in 0..d.k {
                    for kx in 0..d.k {
                        let (lo, hi) = valid_range(d.ow, d.w, s, kx, p);
                        if lo >= hi {
                            continue;
                        }
                        let mut acc = T::zero();
                        for oy in 0..d.oh {
                            let iy = (oy * s + ky) as isize - p as isize;
                            if iy < 0 || iy as usize >= d.h {
                                continue;
                            }
                            let row = &src[iy as usize * d.w..][..d.w];
                            let grow = &go[oy * d.ow..][..d.ow];
                            if s == 1 {
                                let off = lo + kx - p;
                                acc += gemm::dot(&grow[lo..hi], &row[off..off + hi - lo]);
                            } else {
                                for ox in lo..hi {
                                    acc += grow[ox] * row[ox * s + kx - p];
                                }
                            }
                        }
                        wk[ky * d.k + kx] += acc;
                    }
                }
            }
        });
    gw
}

/// Input and weight gradients of a dense or grouped convolution.
fn conv2d_grads<T: Real>(
    gout: &Tensor4<T>,
    x: &Tensor4<T>,
    weight: &Tensor4<T>,
    d: &ConvDims,
    spec: Conv2dSpec,
    want_input: bool,
    want_weight: bool,
) -> (Option<Tensor4<T>>, Option<Tensor4<T>>) {
    if d.depthwise() {
        return (
            want_input.then(|| depthwise_grad_input(gout, weight, d, spec)),
            want_weight.then(|| depthwise_grad_weight(gout, x, d, spec)),
        );
    }
    let (kp, po, pi) = (d.patch(), d.oh * d.ow, d.h * d.w);
    let pointwise = is_pointwise(d, spec);
    let mut gin = want_input.then(|| Tensor4::zeros(x.shape()));
    let mut gw = want_weight.then(|| Tensor4::zeros(weight.shape()));
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); kp * po] };
    let mut gcols = if pointwise { Vec::new() } else { vec![T::zero(); kp * po] };
    let (xs, ws, gs) = (x.data(), weight.data(), gout.data());
    for b in 0..d.n {
        let img = &xs[b * d.cin * pi..][..d.cin * pi];
        for g in 0..d.groups() {
            let c0 = g * d.cin_g;
            let wg = &ws[g * d.cout_g * kp..][..d.cout_g * kp];
            let go = &gs[(b * d.cout + g * d.cout_g) * po..][..d.cout_g * po];
            if let Some(gin) = gin.as_mut() {
                let gimg = &mut gin.data_mut()[b * d.cin * pi..][..d.cin * pi];
                if pointwise {
                    gemm::gemm_tn(kp, d.cout_g, po, wg, go, &mut gimg[c0 * pi..][..kp * pi]);
                } else {
                    gcols.fill(T::zero());
                    gemm::gemm_tn(kp, d.cout_g, po, wg, go, &mut gcols);
                    col2im(&gcols, c0, d, spec, gimg);
                }
            }
            if let Some(gw) = gw.as_mut() {
                let m: &[T] = if pointwise {
                    &img[c0 * pi..][..kp * pi]
                } else {
                    im2col(img, c0, d, spec, &mut cols);
                    &cols
                };
                let dst = &mut gw.data_mut()[g * d.cout_g * kp..][..d.cout_g * kp];
                gemm::gemm_nt(d.cout_g, po, kp, go, m, dst);
            }
        }
    }
    (gin, gw)
}

pub(crate) fn bias_grad<T: Real>(gout: &Tensor4<T>) -> Tensor4<T> {
    let [n, c, _, _] = gout.shape();
    let mut gb = Tensor4::zeros([1, c, 1, 1]);
    for o in 0..c {
        let mut acc = T::zero();
        for b in 0..n {
            acc += gout.plane(b, o).iter().copied().sum::<T>();
        }
        gb.data_mut()[o] = acc;
    }
    gb
}

struct Conv2dOp {
    inputs: Vec<Var>,
    spec: Conv2dSpec,
}

impl<T: Real> Op<T> for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn backward(
        &self,
        ctx: &super::BackwardCtx<'_, T>,
        _out: &Tensor4<T>,
        grad_out: &Tensor4<T>,
    ) -> Vec<Option<Tensor4<T>>> {
        let x = ctx.value(self.inputs[0]);
        let w = ctx.value(self.inputs[1]);
        let bias = self.inputs.get(2).map(|&b| ctx.value(b));
        let d = conv_dims(x, w, bias, self.spec).expect("shapes validated on forward");
        let (gin, gw) = conv2d_grads(
            grad_out,
            x,
            w,
            &d,
            self.spec,
            ctx.needs_grad(self.inputs[0]),
            ctx.needs_grad(self.inputs[1]),
        );
        let mut grads = vec![gin, gw];
        if let Some(&b) = self.inputs.get(2) {
            grads.push(ctx.needs_grad(b).then(|| bias_grad(grad_out)));
        }
        grads
    }
}

/// Transposed convolution with `padding = 0`; weight layout `(cin, cout, k, k)`.
pub fn conv_transpose2d_raw<T: Real>(
    x: &Tensor4<T>,
    weight: &Tensor4<T>,
    bias: Option<&Tensor4<T>>,
    stride: usize,
) -> Result<Tensor4<T>> {
    let (d, s) = tconv_dims(x, weight, bias, stride)?;
    let mut out = Tensor4::zeros([d.n, d.cout, d.oh, d.ow]);
    if let Some(bt) = bias {
        for (plane, &b) in out.data_mut().chunks_mut(d.oh * d.ow).zip(bt.data().iter().cycle()) {
            plane.fill(b);
        }
    }
    let (pi, m) = (d.h * d.w, d.cout * d.k * d.k);
    let mut z = vec![T::zero(); m * pi];
    for b in 0..d.n {
        z.fill(T::zero());
        gemm::gemm_tn(m, d.cin, pi, weight.data(), &x.data()[b * d.cin * pi..][..d.cin * pi], &mut z);
        let dst = &mut out.data_mut()[b * d.cout * d.oh * d.ow..][..d.cout * d.oh * d.ow];
        tconv_scatter(&z, &d, s, dst);
    }
    Ok(out)
}

/// Adds `z[(o, ky, kx), (iy, ix)]` into `out[o, iy*s + ky, ix*s + kx]`.
fn tconv_scatter<T: Real>(z: &[T], d: &ConvDims, s: usize, out: &mut [T]) {
    let pi = d.h * d.w;
    for o in 0..d.cout {
        let plane = &mut out[o * d.oh * d.ow..][..d.oh * d.ow];
        for ky in 0..d.k {
            for kx in 0..d.k {
                let src = &z[((o * d.k + ky) * d.k + kx) * pi..][..pi];
                for iy in 0..d.h {
                    let orow = &mut plane[(iy * s + ky) * d.ow..][..d.ow];
                    for (ix, &v) in src[iy * d.w..][..d.w].iter().enumerate() {
                        orow[ix * s + kx] += v;
                    }
                }
            }
        }
    }
}

/// Adjoint of [`tconv_scatter`].
fn tconv_gather<T: Real>(gout: &[T], d: &ConvDims, s: usize, g: &mut [T]) {
    let pi = d.h * d.w;
    for o in 0..d.cout {
        let plane = &gout[o * d.oh * d.ow..][..d.oh * d.ow];
        for ky in 0..d.k {
            for kx in 0..d.k {
                let dst = &mut g[((o * d.k + ky) * d.k + kx) * pi..][..pi];
                for iy in 0..d.h {
                    let orow = &plane[(iy * s + ky) * d.ow..][..d.ow];
                    for (ix, v) in dst[iy * d.w..][..d.w].iter_mut().enumerate() {
                        *v = orow[ix * s + kx];
                    }
                }
            }
        }
    }
}

fn tconv_dims<T: Real>(
    x: &Tensor4<T>,
    weight: &Tensor4<T>,
    bias: Option<&Tensor4<T>>,
    stride: usize,
) -> Result<(ConvDims, usize)> {
    let [n, cin, h, w] = x.shape();
    let [wcin, cout, kh, kw] = weight.shape();
    if wcin != cin || kh != kw || stride == 0 {
        return Err(Error::shape(
            "conv_transpose2d",
            format!("input {:?} incompatible with weight {:?}", x.shape(), weight.shape()),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [1, cout, 1, 1] {
            return Err(Error::shape(
                "conv_transpose2d",
                format!("bias shape {:?}", b.shape()),
            ));
        }
    }
    if h == 0 || w == 0 {
        return Err(Error::shape("conv_transpose2d", "empty input"));
    }
    let oh = (h - 1) * stride + kh;
    let ow = (w - 1) * stride + kw;
    Ok((
        ConvDims {
            n,
            cin,
            h,
            w,
            cout,
            k: kh,
            oh,
            ow,
            cin_g: cin,
            cout_g: cout,
        },
        stride,
    ))
}

struct ConvTranspose2dOp {
    inputs: Vec<Var>,
    stride: usize,
}

impl<T: Real> Op<T> for ConvTranspose2dOp {
    fn name(&self) -> &'static str {
        "conv_transpose2d"
    }

    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn backward(
        &self,
        ctx: &super::BackwardCtx<'_, T>,
        _out: &Tensor4<T>,
        grad_out: &Tensor4<T>,
    ) -> Vec<Option<Tensor4<T>>> {
        let x = ctx.value(self.inputs[0]);
        let w = ctx.value(self.inputs[1]);
        let bias = self.inputs.get(2).map(|&b| ctx.value(b));
        let (d, s) = tconv_dims(x, w, bias, self.stride).expect("validated on forward");
        let (pi, m, po) = (d.h * d.w, d.cout * d.k * d.k, d.oh * d.ow);
        let mut gin = ctx.needs_grad(self.inputs[0]).then(|| Tensor4::zeros(x.shape()));
        let mut gw = ctx.needs_grad(self.inputs[1]).then(|| Tensor4::zeros(w.shape()));
        let mut g = vec![T::zero(); m * pi];
        for b in 0..d.n {
            tconv_gather(&grad_out.data()[b * d.cout * po..][..d.cout * po], &d, s, &mut g);
            if let Some(gin) = gin.as_mut() {
                let dst = &mut gin.data_mut()[b * d.cin * pi..][..d.cin * pi];
                gemm::gemm_nn(d.cin, m, pi, w.data(), &g, dst);
            }
            if let Some(gw) = gw.as_mut() {
                let xb = &x.data()[b * d.cin * pi..][..d.cin * pi];
                gemm::gemm_nt(d.cin, pi, m, xb, &g, gw.data_mut());
            }
        }
        let mut grads = vec![gin, gw];
        if let Some(&b) = self.inputs.get(2) {
            grads.push(ctx.needs_grad(b).then(|| bias_grad(grad_out)));
        }
        grads
    }
}

impl<T: Real> Tape<T> {
    /// 2-D convolution, weight `(cout, cin/groups, k, k)`, bias `(1, cout, 1, 1)`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let out = conv2d_raw(
            self.value(x),
            self.value(weight),
            bias.map(|b| self.value(b)),
            spec,
        )?;
        let [n, cout, oh, ow] = out.shape();
        let [_, cin_g, k, _] = self.value(weight).shape();
        let macs = (n * cout * oh * ow * cin_g * k * k) as u64;
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        Ok(self.push(out, Box::new(Conv2dOp { inputs, spec }), macs))
    }

    /// Per-channel spatial filter, weight `(c, 1, k, k)`, same-size output for odd `k`.
    pub fn depthwise_conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, padding: usize) -> Result<Var> {
        let c = self.value(x).c();
        let ws = self.value(weight).shape();
        if ws[0] != c || ws[1] != 1 {
            return Err(Error::shape(
                "depthwise_conv2d",
                format!("weight {:?} for {c} channels, expected [{c}, 1, k, k]", ws),
            ));
        }
        self.conv2d(
            x,
            weight,
            bias,
            Conv2dSpec {
                stride: 1,
                padding,
                groups: c,
            },
        )
    }

    /// 1x1 convolution, weight `(cout, cin, 1, 1)`.
    pub fn pointwise_conv(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let ws = self.value(weight).shape();
        if ws[2] != 1 || ws[3] != 1 {
            return Err(Error::shape(
                "pointwise_conv",
                format!("weight {:?} is not 1x1", ws),
            ));
        }
        self.conv2d(x, weight, bias, Conv2dSpec::default())
    }

    /// Transposed convolution (no padding), weight `(cin, cout, k, k)`.
    pub fn conv_transpose2d(&mut self, x: Var, weight: Var, bias: Option<Var>, stride: usize) -> Result<Var> {
        let out = conv_transpose2d_raw(
            self.value(x),
            self.value(weight),
            bias.map(|b| self.value(b)),
            stride,
        )?;
        let [n, cin, h, w] = self.value(x).shape();
        let [_, cout, k, _] = self.value(weight).shape();
        let macs = (n * cin * h * w * cout * k * k) as u64;
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        Ok(self.push(out, Box::new(ConvTranspose2dOp { inputs, stride }), macs))
    }
}
