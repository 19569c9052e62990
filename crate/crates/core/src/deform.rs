//! Grouped deformable convolution.
//!
//! For every output pixel `p0`, group `g` and kernel tap `k`, the input slice
//! of group `g` is read by bilinear interpolation at `p0 + p_k + dp_gk`, scaled
//! by the modulation scalar `m_gk`, and summed over taps. A shared pointwise
//! projection then mixes the concatenated group outputs.
//!
//! Field layouts for `n` images of `h x w` with `G` groups and `K` taps:
//! - offsets `(n, 2*G*K, h, w)`: channel `2*(g*K + k)` is the row offset,
//!   `2*(g*K + k) + 1` the column offset;
//! - modulation `(n, G*K, h, w)`: channel `g*K + k`.

use std::ops::Range;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Ctx, Init, InitKind, ParamStore};
use crate::tensor::{BackwardCtx, Op, Real, Shape4, Tape, Tensor4, Var};

/// Multiply-accumulates charged per sampled value: four bilinear taps plus the
/// modulation product.
pub const MACS_PER_SAMPLE: u64 = 5;

/// Kernel taps relative to `p0`, row-major over `{-r..=r}^2`.
pub fn base_taps(kernel: usize) -> Vec<(isize, isize)> {
    let r = (kernel / 2) as isize;
    let mut taps = Vec::with_capacity(kernel * kernel);
    for dy in -r..=r {
        for dx in -r..=r {
            taps.push((dy, dx));
        }
    }
    taps
}

/// Bilinear read of one `h x w` plane at a fractional location; pixels outside
/// the plane read as zero.
pub fn bilinear_plane<T: Real>(plane: &[T], h: usize, w: usize, py: T, px: T) -> T {
    let c = Corners::new(py, px, h, w);
    let mut acc = T::zero();
    for i in 0..4 {
        if c.valid[i] {
            acc += c.weight[i] * plane[c.index[i]];
        }
    }
    acc
}

/// Bilinear read of `channels` of batch item `n` at `(py, px)`.
pub fn bilinear_sample<T: Real>(x: &Tensor4<T>, n: usize, channels: Range<usize>, py: T, px: T) -> Vec<T> {
    let (h, w) = (x.h(), x.w());
    channels
        .map(|c| bilinear_plane(x.plane(n, c), h, w, py, px))
        .collect()
}

/// Four integer neighbours of a fractional location with their weights.
/// Corner order: (y0, x0), (y0, x0+1), (y0+1, x0), (y0+1, x0+1).
#[derive(Clone, Copy)]
struct Corners<T> {
    index: [usize; 4],
    valid: [bool; 4],
    weight: [T; 4],
    ly: T,
    lx: T,
}

impl<T: Real> Corners<T> {
    #[inline]
    fn new(py: T, px: T, h: usize, w: usize) -> Self {
        let fy = py.floor();
        let fx = px.floor();
        let ly = py - fy;
        let lx = px - fx;
        let (hy, hx) = (T::one() - ly, T::one() - lx);
        let weight = [hy * hx, hy * lx, ly * hx, ly * lx];
        let mut index = [0usize; 4];
        let mut valid = [false; 4];
        // Coordinates beyond isize range are far outside any plane.
        if let (Some(y0), Some(x0)) = (fy.to_isize(), fx.to_isize()) {
            let ys = [y0, y0, y0.saturating_add(1), y0.saturating_add(1)];
            let xs = [x0, x0.saturating_add(1), x0, x0.saturating_add(1)];
            for i in 0..4 {
                if ys[i] >= 0 && (ys[i] as usize) < h && xs[i] >= 0 && (xs[i] as usize) < w {
                    valid[i] = true;
                    index[i] = ys[i] as usize * w + xs[i] as usize;
                }
            }
        }
        Corners {
            index,
            valid,
            weight,
            ly,
            lx,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Dims {
    c: usize,
    h: usize,
    w: usize,
    groups: usize,
    taps: usize,
}

fn check_fields<T: Real>(
    x: &Tensor4<T>,
    offsets: &Tensor4<T>,
    modulation: &Tensor4<T>,
    groups: usize,
    kernel: usize,
) -> Result<Dims> {
    let [n, c, h, w] = x.shape();
    if kernel.is_multiple_of(2) || kernel == 0 {
        return Err(Error::shape("deform_conv", format!("kernel {kernel} must be odd")));
    }
    if groups == 0 || c % groups != 0 {
        return Err(Error::shape(
            "deform_conv",
            format!("{c} channels not divisible by {groups} groups"),
        ));
    }
    let taps = kernel * kernel;
    let want_off = [n, 2 * groups * taps, h, w];
    let want_mod = [n, groups * taps, h, w];
    if offsets.shape() != want_off {
        return Err(Error::shape(
            "deform_conv",
            format!("offsets {:?}, expected {:?}", offsets.shape(), want_off),
        ));
    }
    if modulation.shape() != want_mod {
        return Err(Error::shape(
            "deform_conv",
            format!("modulation {:?}, expected {:?}", modulation.shape(), want_mod),
        ));
    }
    Ok(Dims {
        c,
        h,
        w,
        groups,
        taps,
    })
}

/// Sampling table for one (batch, group): corners for every (pixel, tap).
fn corner_table<T: Real>(offsets: &Tensor4<T>, d: &Dims, b: usize, g: usize, taps: &[(isize, isize)]) -> Vec<Corners<T>> {
    let hw = d.h * d.w;
    let mut table = Vec::with_capacity(hw * d.taps);
    for y in 0..d.h {
        for x in 0..d.w {
            let p = y * d.w + x;
            for (k, &(ty, tx)) in taps.iter().enumerate() {
                let ch = 2 * (g * d.taps + k);
                let dy = offsets.plane(b, ch)[p];
                let dx = offsets.plane(b, ch + 1)[p];
                let py = T::lit((y as isize + ty) as f64) + dy;
                let px = T::lit((x as isize + tx) as f64) + dx;
                table.push(Corners::new(py, px, d.h, d.w));
            }
        }
    }
    table
}

/// Per-group modulated aggregation; output has the input's shape.
pub fn deform_aggregate_raw<T: Real>(
    x: &Tensor4<T>,
    offsets: &Tensor4<T>,
    modulation: &Tensor4<T>,
    groups: usize,
    kernel: usize,
) -> Result<Tensor4<T>> {
    let d = check_fields(x, offsets, modulation, groups, kernel)?;
    if !offsets.is_finite() {
        return Err(Error::NonFinite("deformable offsets".into()));
    }
    let taps = base_taps(kernel);
    let cg = d.c / d.groups;
    let hw = d.h * d.w;
    let mut out = Tensor4::zeros(x.shape());
    out.data_mut()
        .par_chunks_mut(cg * hw)
        .enumerate()
        .for_each(|(idx, dst)| {
            let (b, g) = (idx / d.groups, idx % d.groups);
            let table = corner_table(offsets, &d, b, g, &taps);
            let mods: Vec<&[T]> = (0..d.taps).map(|k| modulation.plane(b, g * d.taps + k)).collect();
            for ci in 0..cg {
                let src = x.plane(b, g * cg + ci);
                let plane = &mut dst[ci * hw..][..hw];
                for (p, v) in plane.iter_mut().enumerate() {
                    let mut acc = T::zero();
                    for k in 0..d.taps {
                        let cr = &table[p * d.taps + k];
                        let mut s = T::zero();
                        for i in 0..4 {
                            if cr.valid[i] {
                                s += cr.weight[i] * src[cr.index[i]];
                            }
                        }
                        acc += mods[k][p] * s;
                    }
                    *v = acc;
                }
            }
        });
    Ok(out)
}

/// Gradients of the aggregation with respect to input, offsets and modulation.
pub fn deform_aggregate_backward<T: Real>(
    x: &Tensor4<T>,
    offsets: &Tensor4<T>,
    modulation: &Tensor4<T>,
    grad_out: &Tensor4<T>,
    groups: usize,
    kernel: usize,
) -> Result<(Tensor4<T>, Tensor4<T>, Tensor4<T>)> {
    let d = check_fields(x, offsets, modulation, groups, kernel)?;
    let taps = base_taps(kernel);
    let cg = d.c / d.groups;
    let hw = d.h * d.w;
    let mut gx = Tensor4::zeros(x.shape());
    let mut goff = Tensor4::zeros(offsets.shape());
    let mut gmod = Tensor4::zeros(modulation.shape());
    gx.data_mut()
        .par_chunks_mut(cg * hw)
        .zip(goff.data_mut().par_chunks_mut(2 * d.taps * hw))
        .zip(gmod.data_mut().par_chunks_mut(d.taps * hw))
        .enumerate()
        .for_each(|(idx, ((gx_chunk, goff_chunk), gmod_chunk))| {
            let (b, g) = (idx / d.groups, idx % d.groups);
            let table = corner_table(offsets, &d, b, g, &taps);
            let mods: Vec<&[T]> = (0..d.taps).map(|k| modulation.plane(b, g * d.taps + k)).collect();
            // Per (pixel, tap) channel sums: value, d/dy, d/dx.
            let mut s_val = vec![T::zero(); hw * d.taps];
            let mut s_dy = vec![T::zero(); hw * d.taps];
            let mut s_dx = vec![T::zero(); hw * d.taps];
            for ci in 0..cg {
                let c = g * cg + ci;
                let src = x.plane(b, c);
                let go = grad_out.plane(b, c);
                let gdst = &mut gx_chunk[ci * hw..][..hw];
                for p in 0..hw {
                    let gv = go[p];
                    for k in 0..d.taps {
                        let j = p * d.taps + k;
                        let cr = &table[j];
                        let mut v = [T::zero(); 4];
                        for i in 0..4 {
                            if cr.valid[i] {
                                v[i] = src[cr.index[i]];
                            }
                        }
                        let sample = cr.weight[0] * v[0] + cr.weight[1] * v[1] + cr.weight[2] * v[2] + cr.weight[3] * v[3];
                        let (ly, lx) = (cr.ly, cr.lx);
                        let dy = (T::one() - lx) * (v[2] - v[0]) + lx * (v[3] - v[1]);
                        let dx = (T::one() - ly) * (v[1] - v[0]) + ly * (v[3] - v[2]);
                        s_val[j] += gv * sample;
                        s_dy[j] += gv * dy;
                        s_dx[j] += gv * dx;
                        let gm = gv * mods[k][p];
                        for i in 0..4 {
                            if cr.valid[i] {
                                gdst[cr.index[i]] += gm * cr.weight[i];
                            }
                        }
                    }
                }
            }
            for k in 0..d.taps {
                let m = mods[k];
                let (gy_plane, rest) = goff_chunk[2 * k * hw..].split_at_mut(hw);
                let gx_plane = &mut rest[..hw];
                let gm_plane = &mut gmod_chunk[k * hw..][..hw];
                for p in 0..hw {
                    let j = p * d.taps + k;
                    gm_plane[p] = s_val[j];
                    gy_plane[p] = m[p] * s_dy[j];
                    gx_plane[p] = m[p] * s_dx[j];
                }
            }
        });
    Ok((gx, goff, gmod))
}

struct DeformAggregateOp {
    inputs: [Var; 3],
    groups: usize,
    kernel: usize,
}

impl<T: Real> Op<T> for DeformAggregateOp {
    fn name(&self) -> &'static str {
        "deform_aggregate"
    }

    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>, _out: &Tensor4<T>, grad_out: &Tensor4<T>) -> Vec<Option<Tensor4<T>>> {
        let [x, off, m] = self.inputs;
        let (gx, goff, gm) = deform_aggregate_backward(
            ctx.value(x),
            ctx.value(off),
            ctx.value(m),
            grad_out,
            self.groups,
            self.kernel,
        )
        .expect("shapes validated on forward");
        vec![
            ctx.needs_grad(x).then_some(gx),
            ctx.needs_grad(off).then_some(goff),
            ctx.needs_grad(m).then_some(gm),
        ]
    }
}

pub fn aggregate_macs(shape: Shape4, kernel: usize) -> u64 {
    shape.iter().product::<usize>() as u64 * (kernel * kernel) as u64 * MACS_PER_SAMPLE
}

impl<T: Real> Tape<T> {
    /// Records the grouped modulated sampling (before the output projection).
    pub fn deform_aggregate(&mut self, x: Var, offsets: Var, modulation: Var, groups: usize, kernel: usize) -> Result<Var> {
        let out = deform_aggregate_raw(self.value(x), self.value(offsets), self.value(modulation), groups, kernel)?;
        let macs = aggregate_macs(out.shape(), kernel);
        Ok(self.push(
            out,
            Box::new(DeformAggregateOp {
                inputs: [x, offsets, modulation],
                groups,
                kernel,
            }),
            macs,
        ))
    }
}

/// Learnables of a grouped deformable convolution: the offset/modulation heads
/// and the shared output projection.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformParams {
    pub channels: usize,
    pub groups: usize,
    pub kernel: usize,
    pub head_dw: Conv2d,
    pub offset_head: Conv2d,
    pub mask_head: Conv2d,
    pub proj: Conv2d,
}

/// Predicted sampling displacements and softmax-normalised modulation.
#[derive(Clone, Copy, Debug)]
pub struct OffsetField {
    pub offsets: Var,
    pub modulation: Var,
}

impl DeformParams {
    pub fn new<T: Real>(store: &mut ParamStore<T>, init: &mut Init, name: &str, channels: usize, groups: usize, kernel: usize) -> Result<Self> {
        if groups == 0 || !channels.is_multiple_of(groups) {
            return Err(Error::Config(format!(
                "{channels} channels not divisible by {groups} deformable groups"
            )));
        }
        if kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("deformable kernel {kernel} must be odd")));
        }
        let taps = kernel * kernel;
        Ok(DeformParams {
            channels,
            groups,
            kernel,
            head_dw: Conv2d::depthwise(store, init, &format!("{name}.head_dw"), channels, 3),
            offset_head: Conv2d::pointwise(store, init, &format!("{name}.offset"), channels, 2 * groups * taps, InitKind::Zeros),
            mask_head: Conv2d::pointwise(store, init, &format!("{name}.mask"), channels, groups * taps, InitKind::Zeros),
            proj: Conv2d::pointwise(store, init, &format!("{name}.proj"), channels, channels, InitKind::Uniform),
        })
    }

    pub fn taps(&self) -> usize {
        self.kernel * self.kernel
    }

    /// Offsets and modulation from a guidance feature map.
    pub fn predict_offsets<T: Real>(&self, ctx: &mut Ctx<T>, feat: Var) -> Result<OffsetField> {
        let c = ctx.tape.value(feat).c();
        if c != self.channels {
            return Err(Error::shape(
                "predict_offsets",
                format!("guidance has {c} channels, heads expect {}", self.channels),
            ));
        }
        let hidden = self.head_dw.forward(ctx, feat)?;
        let offsets = self.offset_head.forward(ctx, hidden)?;
        let logits = self.mask_head.forward(ctx, hidden)?;
        let modulation = ctx.tape.softmax_over_group(logits, self.taps())?;
        Ok(OffsetField { offsets, modulation })
    }

    /// Deformable sampling of `x` followed by the output projection.
    pub fn apply<T: Real>(&self, ctx: &mut Ctx<T>, x: Var, field: OffsetField) -> Result<Var> {
        let agg = ctx
            .tape
            .deform_aggregate(x, field.offsets, field.modulation, self.groups, self.kernel)?;
        self.proj.forward(ctx, agg)
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var, guidance: Var) -> Result<Var> {
        let field = self.predict_offsets(ctx, guidance)?;
        self.apply(ctx, x, field)
    }

    pub fn cost<T: Real>(&self, store: &ParamStore<T>, shape: Shape4) -> Result<u64> {
        let mut macs = 0;
        for conv in [&self.head_dw, &self.offset_head, &self.mask_head, &self.proj] {
            macs += conv.cost(store, shape)?.1;
        }
        Ok(macs + aggregate_macs(shape, self.kernel))
    }
}
