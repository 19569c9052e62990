//! Coarse-fine spectral-aware building blocks.

use serde::{Deserialize, Serialize};

use crate::deform::DeformParams;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Ctx, Init, InitKind, LayerNorm, ParamStore};
use crate::tensor::{Real, Shape4, Var};

pub const FFN_EXPANSION: usize = 2;

/// Knobs shared by every block of a network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockOptions {
    pub lcs_kernel: usize,
    /// Deformable groups; `None` means `channels / 16`, at least 1.
    pub groups: Option<usize>,
    pub cfsab: bool,
    pub dcb: bool,
    pub sample_from_coarse: bool,
}

impl Default for BlockOptions {
    fn default() -> Self {
        BlockOptions {
            lcs_kernel: 7,
            groups: None,
            cfsab: true,
            dcb: true,
            sample_from_coarse: false,
        }
    }
}

impl BlockOptions {
    pub fn groups_for(&self, channels: usize) -> usize {
        self.groups.unwrap_or((channels / 16).max(1))
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if !channels.is_multiple_of(4) || channels == 0 {
            return Err(Error::Config(format!("channel count {channels} must be a positive multiple of 4")));
        }
        if self.lcs_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("LCS kernel {} must be odd", self.lcs_kernel)));
        }
        if !self.dcb && (self.cfsab || self.sample_from_coarse) {
            return Err(Error::Config("the spectral-aware branch requires the deformable mixer".into()));
        }
        if self.sample_from_coarse && !self.cfsab {
            return Err(Error::Config("sampling from the coarse map requires the spectral-aware branch".into()));
        }
        let g = self.groups_for(channels);
        if g == 0 || !channels.is_multiple_of(g) {
            return Err(Error::Config(format!("{channels} channels not divisible by {g} groups")));
        }
        Ok(())
    }
}

/// Fine branch plus the large-kernel coarse gate.
#[derive(Clone, Debug, PartialEq)]
pub struct Cfsab {
    pub fine_pointwise: Conv2d,
    pub fine_depthwise: Conv2d,
    pub lcs_down: Conv2d,
    pub lcs_depthwise: Conv2d,
    pub lcs_up: Conv2d,
}

impl Cfsab {
    pub fn new<T: Real>(store: &mut ParamStore<T>, init: &mut Init, name: &str, c: usize, lcs_kernel: usize) -> Result<Self> {
        if !c.is_multiple_of(4) || c == 0 {
            return Err(Error::Config(format!("channel count {c} must be a positive multiple of 4")));
        }
        let q = c / 4;
        Ok(Cfsab {
            fine_pointwise: Conv2d::pointwise(store, init, &format!("{name}.fine_pw"), c, c, InitKind::Uniform),
            fine_depthwise: Conv2d::depthwise(store, init, &format!("{name}.fine_dw"), c, 3),
            lcs_down: Conv2d::pointwise(store, init, &format!("{name}.lcs_down"), c, q, InitKind::Uniform),
            lcs_depthwise: Conv2d::depthwise(store, init, &format!("{name}.lcs_dw"), q, lcs_kernel),
            lcs_up: Conv2d::pointwise(store, init, &format!("{name}.lcs_up"), q, c, InitKind::Uniform),
        })
    }

    pub fn fine_branch<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let p = self.fine_pointwise.forward(ctx, x)?;
        let d = self.fine_depthwise.forward(ctx, x)?;
        ctx.tape.add(d, p)
    }

    /// Gate map computed from the fine features.
    pub fn lcs_weight<T: Real>(&self, ctx: &mut Ctx<T>, fine: Var) -> Result<Var> {
        let down = self.lcs_down.forward(ctx, fine)?;
        let lk = self.lcs_depthwise.forward(ctx, down)?;
        self.lcs_up.forward(ctx, lk)
    }

    pub fn lcs<T: Real>(&self, ctx: &mut Ctx<T>, fine: Var) -> Result<Var> {
        let weight = self.lcs_weight(ctx, fine)?;
        ctx.tape.mul(weight, fine)
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let fine = self.fine_branch(ctx, x)?;
        self.lcs(ctx, fine)
    }

    pub fn cost<T: Real>(&self, store: &ParamStore<T>, shape: Shape4) -> Result<u64> {
        let [n, c, h, w] = shape;
        let q = [n, c / 4, h, w];
        Ok(self.fine_pointwise.cost(store, shape)?.1
            + self.fine_depthwise.cost(store, shape)?.1
            + self.lcs_down.cost(store, shape)?.1
            + self.lcs_depthwise.cost(store, q)?.1
            + self.lcs_up.cost(store, q)?.1
            + (n * c * h * w) as u64)
    }
}

/// Token mixer of a block.
#[derive(Clone, Debug, PartialEq)]
pub enum Mixer {
    /// Deformable convolution, optionally guided by the spectral-aware branch.
    Deform {
        cfsab: Option<Cfsab>,
        deform: DeformParams,
        sample_from_coarse: bool,
    },
    /// Depthwise 3x3 followed by a pointwise projection.
    Plain { depthwise: Conv2d, pointwise: Conv2d },
}

impl Mixer {
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        match self {
            Mixer::Deform {
                cfsab,
                deform,
                sample_from_coarse,
            } => match cfsab {
                Some(ab) => {
                    let coarse = ab.forward(ctx, x)?;
                    let field = deform.predict_offsets(ctx, coarse)?;
                    let src = if *sample_from_coarse { coarse } else { x };
                    deform.apply(ctx, src, field)
                }
                None => deform.forward(ctx, x, x),
            },
            Mixer::Plain { depthwise, pointwise } => {
                let d = depthwise.forward(ctx, x)?;
                pointwise.forward(ctx, d)
            }
        }
    }

    pub fn cost<T: Real>(&self, store: &ParamStore<T>, shape: Shape4) -> Result<u64> {
        match self {
            Mixer::Deform { cfsab, deform, .. } => {
                let ab = match cfsab {
                    Some(ab) => ab.cost(store, shape)?,
                    None => 0,
                };
                Ok(ab + deform.cost(store, shape)?)
            }
            Mixer::Plain { depthwise, pointwise } => {
                Ok(depthwise.cost(store, shape)?.1 + pointwise.cost(store, shape)?.1)
            }
        }
    }
}

/// Pre-norm residual block: `x + mixer(LN(x))`, then `+ FFN(LN(.))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Cfsdcb {
    pub channels: usize,
    pub norm1: LayerNorm,
    pub mixer: Mixer,
    pub norm2: LayerNorm,
    pub ffn_in: Conv2d,
    pub ffn_out: Conv2d,
}

impl Cfsdcb {
    pub fn new<T: Real>(store: &mut ParamStore<T>, init: &mut Init, name: &str, c: usize, opts: &BlockOptions) -> Result<Self> {
        opts.validate(c)?;
        let norm1 = LayerNorm::new(store, &format!("{name}.norm1"), c);
        let mixer = if opts.dcb {
            let cfsab = if opts.cfsab {
                Some(Cfsab::new(store, init, &format!("{name}.cfsab"), c, opts.lcs_kernel)?)
            } else {
                None
            };
            let deform = DeformParams::new(store, init, &format!("{name}.deform"), c, opts.groups_for(c), 3)?;
            Mixer::Deform {
                cfsab,
                deform,
                sample_from_coarse: opts.sample_from_coarse,
            }
        } else {
            Mixer::Plain {
                depthwise: Conv2d::depthwise(store, init, &format!("{name}.mix_dw"), c, 3),
                pointwise: Conv2d::pointwise(store, init, &format!("{name}.mix_pw"), c, c, InitKind::Uniform),
            }
        };
        let norm2 = LayerNorm::new(store, &format!("{name}.norm2"), c);
        let hidden = FFN_EXPANSION * c;
        Ok(Cfsdcb {
            channels: c,
            norm1,
            mixer,
            norm2,
            ffn_in: Conv2d::pointwise(store, init, &format!("{name}.ffn_in"), c, hidden, InitKind::Uniform),
            ffn_out: Conv2d::pointwise(store, init, &format!("{name}.ffn_out"), hidden, c, InitKind::Uniform),
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let c = ctx.tape.value(x).c();
        if c != self.channels {
            return Err(Error::shape("cfsdcb", format!("input has {c} channels, block expects {}", self.channels)));
        }
        let n1 = self.norm1.forward(ctx, x)?;
        let mixed = self.mixer.forward(ctx, n1)?;
        let x = ctx.tape.add(x, mixed)?;
        let n2 = self.norm2.forward(ctx, x)?;
        let hidden = self.ffn_in.forward(ctx, n2)?;
        let act = ctx.tape.gelu(hidden);
        let out = self.ffn_out.forward(ctx, act)?;
        ctx.tape.add(x, out)
    }

    /// Multiply-accumulates for an input of `shape`. Additions, normalisation
    /// and activations are not charged.
    pub fn cost<T: Real>(&self, store: &ParamStore<T>, shape: Shape4) -> Result<u64> {
        let [n, c, h, w] = shape;
        let hidden = [n, FFN_EXPANSION * c, h, w];
        Ok(self.mixer.cost(store, shape)? + self.ffn_in.cost(store, shape)?.1 + self.ffn_out.cost(store, hidden)?.1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn count(opts: BlockOptions, c: usize) -> usize {
        let mut store = ParamStore::<f32>::new();
        Cfsdcb::new(&mut store, &mut Init::new(0), "b", c, &opts).unwrap();
        store.num_scalars()
    }

    #[test]
    fn bottleneck_is_quarter_width() {
        let mut store = ParamStore::<f32>::new();
        let ab = Cfsab::new(&mut store, &mut Init::new(1), "ab", 8, 7).unwrap();
        assert_eq!(store.get(ab.lcs_down.weight).shape(), [2, 8, 1, 1]);
        assert_eq!(store.get(ab.lcs_depthwise.weight).shape(), [2, 1, 7, 7]);
        assert_eq!(store.get(ab.lcs_up.weight).shape(), [8, 2, 1, 1]);
        assert!(Cfsab::new(&mut store, &mut Init::new(1), "bad", 6, 7).is_err());
    }

    #[test]
    fn cfsab_adds_exactly_its_weights() {
        let c = 16;
        let on = count(BlockOptions::default(), c);
        let off = count(BlockOptions { cfsab: false, ..Default::default() }, c);
        let q = c / 4;
        let cfsab = (c * c + c) + (9 * c + c) + (c * q + q) + (49 * q + q) + (q * c + c);
        assert_eq!(on - off, cfsab);
    }

    #[test]
    fn invalid_flag_combinations_rejected() {
        let opts = BlockOptions {
            dcb: false,
            ..Default::default()
        };
        assert!(opts.validate(16).is_err());
        let opts = BlockOptions {
            cfsab: false,
            sample_from_coarse: true,
            ..Default::default()
        };
        assert!(opts.validate(16).is_err());
        assert!(BlockOptions::default().validate(12).is_ok());
        assert!(BlockOptions { groups: Some(3), ..Default::default() }.validate(16).is_err());
    }

    #[test]
    fn default_groups() {
        let o = BlockOptions::default();
        assert_eq!(o.groups_for(8), 1);
        assert_eq!(o.groups_for(32), 2);
        assert_eq!(o.groups_for(112), 7);
    }
}
