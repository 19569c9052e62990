//! Procedural scenes and training batch construction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::network_input;
use crate::optics::{self, DispersionSpec, HsiCube, Mask2D, MaskMode, NoiseSpec};
use crate::tensor::{Real, Tensor4};

/// Smooth spectrum: a baseline plus a few Gaussian bumps over the band axis.
fn random_spectrum(bands: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let base = rng.random_range(0.05..0.3);
    let bumps: Vec<(f64, f64, f64)> = (0..rng.random_range(1..=3))
        .map(|_| {
            (
                rng.random_range(-0.2..1.2),
                rng.random_range(0.15..0.6),
                rng.random_range(0.2..0.7),
            )
        })
        .collect();
    (0..bands)
        .map(|b| {
            let t = if bands > 1 { b as f64 / (bands - 1) as f64 } else { 0.5 };
            let v = base
                + bumps
                    .iter()
                    .map(|&(c, s, a)| a * (-(t - c).powi(2) / (2.0 * s * s)).exp())
                    .sum::<f64>();
            v as f32
        })
        .collect()
}

/// A scene of piecewise-constant-material shapes over a smoothly shaded
/// background; every material has its own smooth spectrum.
pub fn synthetic_scene(h: usize, w: usize, bands: usize, seed: u64) -> HsiCube {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let background = random_spectrum(bands, &mut rng);
    let (gy, gx) = (rng.random_range(-0.3..0.3f32), rng.random_range(-0.3..0.3f32));
    let mut material = vec![usize::MAX; h * w];
    let mut spectra = Vec::new();
    let shapes = rng.random_range(3..=6);
    for s in 0..shapes {
        spectra.push(random_spectrum(bands, &mut rng));
        let cy = rng.random_range(0.0..h as f64);
        let cx = rng.random_range(0.0..w as f64);
        let ry = rng.random_range(0.1..0.35) * h as f64;
        let rx = rng.random_range(0.1..0.35) * w as f64;
        let disc = rng.random_bool(0.5);
        for y in 0..h {
            for x in 0..w {
                let dy = (y as f64 - cy) / ry;
                let dx = (x as f64 - cx) / rx;
                let inside = if disc {
                    dy * dy + dx * dx <= 1.0
                } else {
                    dy.abs() <= 1.0 && dx.abs() <= 1.0
                };
                if inside {
                    material[y * w + x] = s;
                }
            }
        }
    }
    let mut cube = HsiCube::from_fn(h, w, bands, |b, y, x| {
        let m = material[y * w + x];
        if m == usize::MAX {
            let shade = 1.0 + gy * (y as f32 / h as f32 - 0.5) + gx * (x as f32 / w as f32 - 0.5);
            background[b] * shade
        } else {
            spectra[m][b]
        }
    });
    cube.normalize();
    cube
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<HsiCube>,
    pub test: Vec<HsiCube>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub train: usize,
    pub test: usize,
    pub h: usize,
    pub w: usize,
    pub bands: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            train: 8,
            test: 2,
            h: 64,
            w: 64,
            bands: 8,
            seed: 2024,
        }
    }
}

pub fn synthetic_dataset(spec: &SyntheticSpec) -> Dataset {
    let scene = |i: usize| synthetic_scene(spec.h, spec.w, spec.bands, spec.seed.wrapping_add(i as u64));
    Dataset {
        train: (0..spec.train).map(scene).collect(),
        test: (spec.train..spec.train + spec.test).map(scene).collect(),
    }
}

/// Geometric augmentation applied to a crop: counter-clockwise quarter turns,
/// then optional flips.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Augmentation {
    pub quarter_turns: usize,
    pub flip_h: bool,
    pub flip_v: bool,
}

impl Augmentation {
    pub fn apply(&self, cube: &HsiCube) -> HsiCube {
        let mut c = cube.rot90(self.quarter_turns);
        if self.flip_h {
            c = c.flip_horizontal();
        }
        if self.flip_v {
            c = c.flip_vertical();
        }
        c
    }

    pub fn random(rng: &mut impl Rng, rotate: bool, flip: bool) -> Self {
        Augmentation {
            quarter_turns: if rotate { rng.random_range(0..4) } else { 0 },
            flip_h: flip && rng.random_bool(0.5),
            flip_v: flip && rng.random_bool(0.5),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchOptions {
    pub batch_size: usize,
    pub crop: usize,
    #[serde(default)]
    pub rotate: bool,
    #[serde(default)]
    pub flip: bool,
    #[serde(default)]
    pub noise: NoiseSpec,
    #[serde(default)]
    pub mask_mode: MaskMode,
}

/// Crop position, augmentation and noise seed of one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleDraw {
    pub scene: usize,
    pub y0: usize,
    pub x0: usize,
    pub augment: Augmentation,
    pub noise_seed: u64,
}

impl SampleDraw {
    pub fn random(scenes: &[HsiCube], opts: &BatchOptions, rng: &mut impl Rng) -> Result<Self> {
        if scenes.is_empty() {
            return Err(Error::Missing("no scenes to sample from".into()));
        }
        let scene = rng.random_range(0..scenes.len());
        let s = &scenes[scene];
        if s.h < opts.crop || s.w < opts.crop {
            return Err(Error::shape(
                "make_batch",
                format!("scene {scene} is {}x{}, smaller than crop {}", s.h, s.w, opts.crop),
            ));
        }
        Ok(SampleDraw {
            scene,
            y0: rng.random_range(0..=s.h - opts.crop),
            x0: rng.random_range(0..=s.w - opts.crop),
            augment: Augmentation::random(rng, opts.rotate, opts.flip),
            noise_seed: rng.random(),
        })
    }
}

/// Network inputs `(n, 2 * bands, crop, crop)` and clean targets
/// `(n, bands, crop, crop)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    pub input: Tensor4<T>,
    pub target: Tensor4<T>,
}

/// The augmented ground-truth crop for a draw.
pub fn draw_cube(scenes: &[HsiCube], crop: usize, draw: &SampleDraw) -> Result<HsiCube> {
    let s = scenes
        .get(draw.scene)
        .ok_or_else(|| Error::Missing(format!("scene {}", draw.scene)))?;
    Ok(draw.augment.apply(&s.crop(draw.y0, draw.x0, crop, crop)?))
}

/// Simulated network input for a clean cube seen through `mask`.
pub fn sample_input<T: Real>(
    cube: &HsiCube,
    mask: &Mask2D,
    spec: &DispersionSpec,
    noise: NoiseSpec,
    mode: MaskMode,
    seed: u64,
) -> Result<Tensor4<T>> {
    let y = optics::simulate(cube, mask, spec, noise, seed)?;
    let m3 = optics::build_mask3d(mask, spec, mode);
    network_input(&y, &m3, spec)
}

/// The mask window used for crops of side `crop`.
pub fn crop_mask(mask: &Mask2D, crop: usize) -> Result<Mask2D> {
    if mask.h < crop || mask.w < crop {
        return Err(Error::shape(
            "make_batch",
            format!("mask {}x{} is smaller than crop {crop}", mask.h, mask.w),
        ));
    }
    mask.crop(0, 0, crop, crop)
}

pub fn make_batch_from_draws<T: Real>(
    scenes: &[HsiCube],
    mask: &Mask2D,
    spec: &DispersionSpec,
    opts: &BatchOptions,
    draws: &[SampleDraw],
) -> Result<Batch<T>> {
    let mask = crop_mask(mask, opts.crop)?;
    let mut inputs = Vec::with_capacity(draws.len());
    let mut targets = Vec::with_capacity(draws.len());
    for d in draws {
        let cube = draw_cube(scenes, opts.crop, d)?;
        inputs.push(sample_input(&cube, &mask, spec, opts.noise, opts.mask_mode, d.noise_seed)?);
        targets.push(cube.to_tensor());
    }
    Ok(Batch {
        input: Tensor4::stack(&inputs)?,
        target: Tensor4::stack(&targets)?,
    })
}

/// Draws `opts.batch_size` random samples; fully determined by `seed`.
pub fn make_batch<T: Real>(
    scenes: &[HsiCube],
    mask: &Mask2D,
    spec: &DispersionSpec,
    opts: &BatchOptions,
    seed: u64,
) -> Result<Batch<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws = (0..opts.batch_size)
        .map(|_| SampleDraw::random(scenes, opts, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    make_batch_from_draws(scenes, mask, spec, opts, &draws)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_normalised_and_deterministic() {
        let a = synthetic_scene(32, 32, 8, 5);
        assert_eq!(a, synthetic_scene(32, 32, 8, 5));
        assert_ne!(a, synthetic_scene(32, 32, 8, 6));
        let max = a.data.iter().copied().fold(0.0f32, f32::max);
        assert_eq!(max, 1.0);
        assert!(a.data.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn full_size_crop_without_augmentation_is_the_scene() {
        let scenes = vec![synthetic_scene(16, 16, 4, 1)];
        let opts = BatchOptions {
            batch_size: 1,
            crop: 16,
            rotate: false,
            flip: false,
            noise: NoiseSpec::None,
            mask_mode: MaskMode::Shifted,
        };
        let mask = Mask2D::random(16, 16, 0.5, 3).unwrap();
        let spec = DispersionSpec::new(2, 4);
        let b1 = make_batch::<f32>(&scenes, &mask, &spec, &opts, 1).unwrap();
        let b2 = make_batch::<f32>(&scenes, &mask, &spec, &opts, 99).unwrap();
        assert_eq!(b1, b2);
        assert_eq!(b1.target, scenes[0].to_tensor());
        assert_eq!(b1.input.shape(), [1, 8, 16, 16]);
    }

    #[test]
    fn too_small_scene_is_an_error() {
        let scenes = vec![synthetic_scene(8, 8, 2, 1)];
        let opts = BatchOptions {
            batch_size: 1,
            crop: 16,
            rotate: true,
            flip: true,
            noise: NoiseSpec::None,
            mask_mode: MaskMode::Shifted,
        };
        let err = make_batch::<f32>(&scenes, &Mask2D::ones(16, 16), &DispersionSpec::new(1, 2), &opts, 0);
        assert_eq!(err.unwrap_err().kind(), "shape");
    }
}
