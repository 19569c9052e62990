//! U-shaped reconstruction network built from spectral-aware blocks.

use serde::{Deserialize, Serialize};

use crate::blocks::{BlockOptions, Cfsdcb};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Ctx, Init, InitKind, ParamStore};
use crate::optics::{self, DispersionSpec, Mask3D, Measurement};
use crate::tensor::{Conv2dSpec, Real, Shape4, Tensor4, Var};

pub use crate::nn::ConvTranspose2d;

fn default_bands() -> usize {
    28
}
fn default_depth() -> usize {
    2
}
fn default_lcs() -> usize {
    7
}
fn default_variant() -> String {
    "custom".into()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_variant")]
    pub variant: String,
    #[serde(default = "default_bands")]
    pub bands: usize,
    pub channels: usize,
    /// Blocks per encoder level, per decoder level, and in the bottleneck.
    pub blocks: [usize; 3],
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_lcs")]
    pub lcs_kernel: usize,
    #[serde(default)]
    pub groups: Option<usize>,
    #[serde(default)]
    pub disable_dcb: bool,
    #[serde(default)]
    pub disable_cfsab: bool,
    #[serde(default)]
    pub sample_from_coarse: bool,
}

impl ModelConfig {
    pub fn new(channels: usize, blocks: [usize; 3]) -> Self {
        ModelConfig {
            variant: default_variant(),
            bands: default_bands(),
            channels,
            blocks,
            depth: default_depth(),
            lcs_kernel: default_lcs(),
            groups: None,
            disable_dcb: false,
            disable_cfsab: false,
            sample_from_coarse: false,
        }
    }

    fn named(mut self, name: &str) -> Self {
        self.variant = name.into();
        self
    }

    fn preset_of((channels, blocks): (usize, [usize; 3]), name: &str) -> Self {
        ModelConfig {
            depth: PRESET_DEPTH,
            ..ModelConfig::new(channels, blocks).named(name)
        }
    }

    pub fn small() -> Self {
        Self::preset_of(SMALL, "S")
    }

    pub fn medium() -> Self {
        Self::preset_of(MEDIUM, "M")
    }

    pub fn large() -> Self {
        Self::preset_of(LARGE, "L")
    }

    /// Small enough to train on a laptop core in minutes.
    pub fn tiny(bands: usize) -> Self {
        ModelConfig {
            bands,
            ..ModelConfig::new(16, [1, 1, 1]).named("tiny")
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "s" | "small" => Ok(Self::small()),
            "m" | "medium" => Ok(Self::medium()),
            "l" | "large" => Ok(Self::large()),
            "tiny" => Ok(Self::tiny(8)),
            other => Err(Error::Config(format!("unknown model preset '{other}'"))),
        }
    }

    pub fn with_bands(mut self, bands: usize) -> Self {
        self.bands = bands;
        self
    }

    pub fn block_options(&self) -> BlockOptions {
        BlockOptions {
            lcs_kernel: self.lcs_kernel,
            groups: self.groups,
            cfsab: !self.disable_cfsab && !self.disable_dcb,
            dcb: !self.disable_dcb,
            sample_from_coarse: self.sample_from_coarse,
        }
    }

    pub fn level_channels(&self, level: usize) -> usize {
        self.channels << level
    }

    /// Spatial sizes must be divisible by this.
    pub fn spatial_multiple(&self) -> usize {
        1 << self.depth
    }

    pub fn validate(&self) -> Result<()> {
        if self.bands == 0 {
            return Err(Error::Config("bands must be positive".into()));
        }
        if self.blocks.contains(&0) {
            return Err(Error::Config(format!("block counts {:?} must all be at least 1", self.blocks)));
        }
        if self.depth > 6 {
            return Err(Error::Config(format!("depth {} is unreasonably large", self.depth)));
        }
        if self.sample_from_coarse && self.disable_cfsab {
            return Err(Error::Config("sample_from_coarse requires the spectral-aware branch".into()));
        }
        if self.disable_dcb && self.sample_from_coarse {
            return Err(Error::Config("sample_from_coarse requires the deformable mixer".into()));
        }
        let opts = self.block_options();
        for level in 0..=self.depth {
            opts.validate(self.level_channels(level))?;
        }
        Ok(())
    }

    pub fn check_spatial(&self, h: usize, w: usize) -> Result<()> {
        let m = self.spatial_multiple();
        if h == 0 || w == 0 || !h.is_multiple_of(m) || !w.is_multiple_of(m) {
            return Err(Error::shape(
                "cfsdcn",
                format!("spatial size {h}x{w} must be a positive multiple of {m}"),
            ));
        }
        Ok(())
    }
}

/// (base channels, [encoder, decoder, bottleneck] blocks) of the presets,
/// all built with `PRESET_DEPTH` scale changes.
pub const SMALL: (usize, [usize; 3]) = (16, [3, 3, 2]);
pub const MEDIUM: (usize, [usize; 3]) = (24, [3, 3, 2]);
pub const LARGE: (usize, [usize; 3]) = (32, [3, 3, 1]);
pub const PRESET_DEPTH: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLevel {
    pub blocks: Vec<Cfsdcb>,
    pub down: Conv2d,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLevel {
    pub up: ConvTranspose2d,
    pub fuse: Conv2d,
    pub blocks: Vec<Cfsdcb>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cfsdcn {
    pub config: ModelConfig,
    pub fusion: Conv2d,
    pub embed: Conv2d,
    pub encoder: Vec<EncoderLevel>,
    pub bottleneck: Vec<Cfsdcb>,
    /// Ordered from the deepest level up.
    pub decoder: Vec<DecoderLevel>,
    pub output: Conv2d,
}

impl Cfsdcn {
    pub fn new<T: Real>(config: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let n = config.bands;
        let opts = config.block_options();
        let fusion = Conv2d::pointwise(&mut store, &mut init, "fusion", 2 * n, n, InitKind::Zeros);
        let fw = store.get_mut(fusion.weight);
        for b in 0..n {
            fw.set([b, b, 0, 0], T::one());
        }
        let c0 = config.channels;
        let embed = Conv2d::new(
            &mut store,
            &mut init,
            "embed",
            n,
            c0,
            3,
            Conv2dSpec::same(3),
            true,
            InitKind::Uniform,
        );
        let mut encoder = Vec::with_capacity(config.depth);
        for level in 0..config.depth {
            let c = config.level_channels(level);
            let blocks = (0..config.blocks[0])
                .map(|i| Cfsdcb::new(&mut store, &mut init, &format!("enc{level}.block{i}"), c, &opts))
                .collect::<Result<Vec<_>>>()?;
            let down = Conv2d::new(
                &mut store,
                &mut init,
                &format!("enc{level}.down"),
                c,
                2 * c,
                4,
                Conv2dSpec {
                    stride: 2,
                    padding: 1,
                    groups: 1,
                },
                false,
                InitKind::Uniform,
            );
            encoder.push(EncoderLevel { blocks, down });
        }
        let cb = config.level_channels(config.depth);
        let bottleneck = (0..config.blocks[2])
            .map(|i| Cfsdcb::new(&mut store, &mut init, &format!("bottleneck.block{i}"), cb, &opts))
            .collect::<Result<Vec<_>>>()?;
        let mut decoder = Vec::with_capacity(config.depth);
        for level in (0..config.depth).rev() {
            let c = config.level_channels(level);
            let up = ConvTranspose2d::new(&mut store, &mut init, &format!("dec{level}.up"), 2 * c, c, 2, 2, true);
            let fuse = Conv2d::pointwise(&mut store, &mut init, &format!("dec{level}.fuse"), 2 * c, c, InitKind::Uniform);
            let blocks = (0..config.blocks[1])
                .map(|i| Cfsdcb::new(&mut store, &mut init, &format!("dec{level}.block{i}"), c, &opts))
                .collect::<Result<Vec<_>>>()?;
            decoder.push(DecoderLevel { up, fuse, blocks });
        }
        let output = Conv2d::new(
            &mut store,
            &mut init,
            "output",
            c0,
            n,
            3,
            Conv2dSpec::same(3),
            true,
            InitKind::Zeros,
        );
        let model = Cfsdcn {
            config: config.clone(),
            fusion,
            embed,
            encoder,
            bottleneck,
            decoder,
            output,
        };
        Ok((model, store))
    }

    /// `X = fusion(concat(H, M))`; `input` holds both halves stacked on channels.
    pub fn initialize<T: Real>(&self, ctx: &mut Ctx<T>, input: Var) -> Result<Var> {
        let [_, c, h, w] = ctx.tape.value(input).shape();
        if c != 2 * self.config.bands {
            return Err(Error::shape(
                "cfsdcn input",
                format!("expected {} channels (shift-back and mask), got {c}", 2 * self.config.bands),
            ));
        }
        self.config.check_spatial(h, w)?;
        self.fusion.forward(ctx, input)
    }

    /// `X' = X + R` for an initialised cube `x`.
    pub fn refine<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let [_, c, h, w] = ctx.tape.value(x).shape();
        if c != self.config.bands {
            return Err(Error::shape("cfsdcn", format!("expected {} bands, got {c}", self.config.bands)));
        }
        self.config.check_spatial(h, w)?;
        let mut f = self.embed.forward(ctx, x)?;
        let mut skips = Vec::with_capacity(self.encoder.len());
        for level in &self.encoder {
            for b in &level.blocks {
                f = b.forward(ctx, f)?;
            }
            skips.push(f);
            f = level.down.forward(ctx, f)?;
        }
        for b in &self.bottleneck {
            f = b.forward(ctx, f)?;
        }
        for level in &self.decoder {
            let skip = skips.pop().expect("one skip per level");
            let up = level.up.forward(ctx, f)?;
            let cat = ctx.tape.concat_channels(up, skip)?;
            f = level.fuse.forward(ctx, cat)?;
            for b in &level.blocks {
                f = b.forward(ctx, f)?;
            }
        }
        let r = self.output.forward(ctx, f)?;
        ctx.tape.add(x, r)
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, input: Var) -> Result<Var> {
        let x = self.initialize(ctx, input)?;
        self.refine(ctx, x)
    }

    /// Inference without gradient tracking.
    pub fn reconstruct<T: Real>(&self, store: &ParamStore<T>, input: &Tensor4<T>) -> Result<Tensor4<T>> {
        let mut ctx = Ctx::frozen(store);
        let x = ctx.tape.constant(input.clone());
        let out = self.forward(&mut ctx, x)?;
        Ok(ctx.tape.value(out).clone())
    }

    /// Analytic multiply-accumulate count for a network input of `shape`.
    pub fn count_macs<T: Real>(&self, store: &ParamStore<T>, shape: Shape4) -> Result<u64> {
        let [n, c, h, w] = shape;
        if c != 2 * self.config.bands {
            return Err(Error::shape("count", format!("expected {} input channels, got {c}", 2 * self.config.bands)));
        }
        self.config.check_spatial(h, w)?;
        let (s, mut macs) = self.fusion.cost(store, shape)?;
        let (mut s, m) = self.embed.cost(store, s)?;
        macs += m;
        let mut skips = Vec::new();
        for level in &self.encoder {
            for b in &level.blocks {
                macs += b.cost(store, s)?;
            }
            skips.push(s);
            let (next, m) = level.down.cost(store, s)?;
            macs += m;
            s = next;
        }
        for b in &self.bottleneck {
            macs += b.cost(store, s)?;
        }
        for level in &self.decoder {
            let skip = skips.pop().expect("one skip per level");
            let (up, m) = level.up.cost(store, s);
            macs += m;
            let cat = [n, up[1] + skip[1], up[2], up[3]];
            let (next, m) = level.fuse.cost(store, cat)?;
            macs += m;
            s = next;
            for b in &level.blocks {
                macs += b.cost(store, s)?;
            }
        }
        macs += self.output.cost(store, s)?.1;
        Ok(macs)
    }

    /// Floating point operations, counted as two per multiply-accumulate.
    pub fn count_flops<T: Real>(&self, store: &ParamStore<T>, shape: Shape4) -> Result<u64> {
        Ok(2 * self.count_macs(store, shape)?)
    }

    pub fn input_shape(&self, h: usize, w: usize) -> Shape4 {
        [1, 2 * self.config.bands, h, w]
    }
}

pub fn count_params<T: Real>(store: &ParamStore<T>) -> usize {
    store.num_scalars()
}

/// Scale applied to the shift-back cube so that a half-open mask roughly
/// preserves the scene's intensity.
pub fn shift_back_scale(bands: usize) -> f64 {
    2.0 / bands as f64
}

/// The shift-back cube (scaled) stacked with the 3-D mask, shape
/// `(1, 2 * bands, h, w)`.
pub fn network_input<T: Real>(y: &Measurement, mask: &Mask3D, spec: &DispersionSpec) -> Result<Tensor4<T>> {
    let h = optics::shift_back_to(y, spec, mask.w)?;
    if h.h != mask.h || h.bands != mask.bands {
        return Err(Error::shape(
            "network input",
            format!(
                "shift-back cube {}x{}x{} vs mask {}x{}x{}",
                h.h, h.w, h.bands, mask.h, mask.w, mask.bands
            ),
        ));
    }
    let scale = T::lit(shift_back_scale(spec.bands));
    let hb = h.to_tensor::<T>().map(|v| v * scale);
    let mb = mask.to_cube().to_tensor::<T>();
    Tensor4::concat_channels_raw(&hb, &mb)
}
