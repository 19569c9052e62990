//! CASSI degradation model: coded-aperture modulation, spectral dispersion,
//! detector integration with optional noise, and the shift-back inverse used to
//! initialise reconstruction.
//!
//! Band `n` (0-based) is displaced by `step * n` columns on the detector, so
//! band 0 is the unshifted reference and a measurement of a `W`-wide scene is
//! `W + step * (bands - 1)` columns wide.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor4};

/// Hyperspectral cube stored band-major, row-major: `data[(b * h + y) * w + x]`.
#[derive(Clone, Debug, PartialEq)]
pub struct HsiCube {
    pub h: usize,
    pub w: usize,
    pub bands: usize,
    pub data: Vec<f32>,
    pub wavelengths: Option<Vec<f32>>,
}

impl HsiCube {
    pub fn new(h: usize, w: usize, bands: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != h * w * bands {
            return Err(Error::shape(
                "hsi_cube",
                format!("{h}x{w}x{bands} needs {} values, got {}", h * w * bands, data.len()),
            ));
        }
        Ok(HsiCube {
            h,
            w,
            bands,
            data,
            wavelengths: None,
        })
    }

    pub fn zeros(h: usize, w: usize, bands: usize) -> Self {
        HsiCube {
            h,
            w,
            bands,
            data: vec![0.0; h * w * bands],
            wavelengths: None,
        }
    }

    pub fn from_fn(h: usize, w: usize, bands: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(h * w * bands);
        for b in 0..bands {
            for y in 0..h {
                for x in 0..w {
                    data.push(f(b, y, x));
                }
            }
        }
        HsiCube {
            h,
            w,
            bands,
            data,
            wavelengths: None,
        }
    }

    #[inline]
    pub fn get(&self, band: usize, y: usize, x: usize) -> f32 {
        self.data[(band * self.h + y) * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, band: usize, y: usize, x: usize, v: f32) {
        self.data[(band * self.h + y) * self.w + x] = v;
    }

    pub fn band(&self, b: usize) -> &[f32] {
        &self.data[b * self.h * self.w..(b + 1) * self.h * self.w]
    }

    pub fn band_mut(&mut self, b: usize) -> &mut [f32] {
        let hw = self.h * self.w;
        &mut self.data[b * hw..(b + 1) * hw]
    }

    pub fn with_wavelengths(mut self, wl: Vec<f32>) -> Self {
        self.wavelengths = Some(wl);
        self
    }

    /// Divides by the global maximum so values land in `[0, 1]`.
    /// Negative inputs are clamped to zero first; an all-zero cube is unchanged.
    pub fn normalize(&mut self) {
        for v in &mut self.data {
            *v = v.max(0.0);
        }
        let max = self.data.iter().copied().fold(0.0f32, f32::max);
        if max > 0.0 {
            for v in &mut self.data {
                *v /= max;
            }
        }
    }

    /// View as a `(1, bands, h, w)` tensor.
    pub fn to_tensor<T: Real>(&self) -> Tensor4<T> {
        Tensor4::from_vec(
            [1, self.bands, self.h, self.w],
            self.data.iter().map(|&v| T::lit(v as f64)).collect(),
        )
        .expect("cube length invariant")
    }

    /// Batch item `i` of a `(n, bands, h, w)` tensor.
    pub fn from_tensor<T: Real>(t: &Tensor4<T>, i: usize) -> HsiCube {
        let [_, c, h, w] = t.shape();
        let item = t.batch_item(i);
        HsiCube {
            h,
            w,
            bands: c,
            data: item.data().iter().map(|v| v.to_f64c() as f32).collect(),
            wavelengths: None,
        }
    }

    /// Rotates every band by `quarter_turns * 90` degrees counter-clockwise.
    pub fn rot90(&self, quarter_turns: usize) -> HsiCube {
        let k = quarter_turns % 4;
        if k == 0 {
            return self.clone();
        }
        let (h, w) = (self.h, self.w);
        let (nh, nw) = if k % 2 == 1 { (w, h) } else { (h, w) };
        let mut out = HsiCube::zeros(nh, nw, self.bands);
        out.wavelengths = self.wavelengths.clone();
        for b in 0..self.bands {
            for y in 0..nh {
                for x in 0..nw {
                    let (sy, sx) = match k {
                        1 => (x, w - 1 - y),
                        2 => (h - 1 - y, w - 1 - x),
                        _ => (h - 1 - x, y),
                    };
                    out.set(b, y, x, self.get(b, sy, sx));
                }
            }
        }
        out
    }

    pub fn flip_horizontal(&self) -> HsiCube {
        let mut out = self.clone();
        for b in 0..self.bands {
            for y in 0..self.h {
                for x in 0..self.w {
                    out.set(b, y, x, self.get(b, y, self.w - 1 - x));
                }
            }
        }
        out
    }

    pub fn flip_vertical(&self) -> HsiCube {
        let mut out = self.clone();
        for b in 0..self.bands {
            for y in 0..self.h {
                for x in 0..self.w {
                    out.set(b, y, x, self.get(b, self.h - 1 - y, x));
                }
            }
        }
        out
    }

    pub fn crop(&self, y0: usize, x0: usize, ch: usize, cw: usize) -> Result<HsiCube> {
        if y0 + ch > self.h || x0 + cw > self.w {
            return Err(Error::shape(
                "crop",
                format!("{ch}x{cw} at ({y0},{x0}) exceeds {}x{}", self.h, self.w),
            ));
        }
        let mut out = HsiCube::from_fn(ch, cw, self.bands, |b, y, x| self.get(b, y0 + y, x0 + x));
        out.wavelengths = self.wavelengths.clone();
        Ok(out)
    }
}

/// Physical coded aperture `M*`, row-major `h x w`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask2D {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Mask2D {
    pub fn new(h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::shape(
                "mask2d",
                format!("{h}x{w} needs {} values, got {}", h * w, data.len()),
            ));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Config(format!("mask value {v} outside [0, 1]")));
        }
        Ok(Mask2D { h, w, data })
    }

    pub fn ones(h: usize, w: usize) -> Self {
        Mask2D {
            h,
            w,
            data: vec![1.0; h * w],
        }
    }

    /// Binary mask with each pixel open with probability `density`.
    pub fn random(h: usize, w: usize, density: f64, seed: u64) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::Config(format!("mask dimensions {h}x{w} must be positive")));
        }
        if !(0.0..=1.0).contains(&density) {
            return Err(Error::Config(format!("mask density {density} outside [0, 1]")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..h * w)
            .map(|_| if rng.random_bool(density) { 1.0 } else { 0.0 })
            .collect();
        Ok(Mask2D { h, w, data })
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.w + x]
    }

    pub fn crop(&self, y0: usize, x0: usize, ch: usize, cw: usize) -> Result<Mask2D> {
        if y0 + ch > self.h || x0 + cw > self.w {
            return Err(Error::shape(
                "mask crop",
                format!("{ch}x{cw} at ({y0},{x0}) exceeds {}x{}", self.h, self.w),
            ));
        }
        let mut data = Vec::with_capacity(ch * cw);
        for y in 0..ch {
            data.extend_from_slice(&self.data[(y0 + y) * self.w + x0..][..cw]);
        }
        Ok(Mask2D { h: ch, w: cw, data })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DispersionSpec {
    /// Detector columns per band index.
    pub step: usize,
    pub bands: usize,
    /// Index of the reference wavelength. Shifts are measured from band 0 so
    /// that `shift_back` inverts `disperse` exactly; this field is metadata.
    #[serde(default)]
    pub center_band: usize,
}

impl DispersionSpec {
    pub fn new(step: usize, bands: usize) -> Self {
        DispersionSpec {
            step,
            bands,
            center_band: 0,
        }
    }

    #[inline]
    pub fn shift(&self, band: usize) -> usize {
        self.step * band
    }

    pub fn measurement_width(&self, w: usize) -> usize {
        w + self.step * self.bands.saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.bands == 0 {
            return Err(Error::Config("dispersion needs at least one band".into()));
        }
        if self.center_band >= self.bands {
            return Err(Error::Config(format!(
                "center band {} outside 0..{}",
                self.center_band, self.bands
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseSpec {
    #[default]
    None,
    Gaussian {
        sigma: f64,
    },
    Shot {
        bits: u32,
    },
}

/// 2-D detector frame, row-major `h x w`.
#[derive(Clone, Debug, PartialEq)]
pub struct Measurement {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
    pub noise: NoiseSpec,
}

impl Measurement {
    pub fn new(h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::shape(
                "measurement",
                format!("{h}x{w} needs {} values, got {}", h * w, data.len()),
            ));
        }
        Ok(Measurement {
            h,
            w,
            data,
            noise: NoiseSpec::None,
        })
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.w + x]
    }

    pub fn to_cube(&self) -> HsiCube {
        HsiCube {
            h: self.h,
            w: self.w,
            bands: 1,
            data: self.data.clone(),
            wavelengths: None,
        }
    }

    pub fn from_cube(cube: &HsiCube) -> Result<Self> {
        if cube.bands != 1 {
            return Err(Error::shape(
                "measurement",
                format!("expected a single-band frame, got {} bands", cube.bands),
            ));
        }
        Measurement::new(cube.h, cube.w, cube.data.clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Band `n` is `M*` shifted right by the band's dispersion and cropped to `w`.
    #[default]
    Shifted,
    /// Every band is a copy of `M*`.
    Replicate,
}

/// Per-band mask cube, band-major like [`HsiCube`].
#[derive(Clone, Debug, PartialEq)]
pub struct Mask3D {
    pub h: usize,
    pub w: usize,
    pub bands: usize,
    pub data: Vec<f32>,
}

impl Mask3D {
    #[inline]
    pub fn get(&self, band: usize, y: usize, x: usize) -> f32 {
        self.data[(band * self.h + y) * self.w + x]
    }

    pub fn to_cube(&self) -> HsiCube {
        HsiCube {
            h: self.h,
            w: self.w,
            bands: self.bands,
            data: self.data.clone(),
            wavelengths: None,
        }
    }
}

/// Every band multiplied elementwise by the coded aperture.
pub fn modulate(f: &HsiCube, m: &Mask2D) -> Result<HsiCube> {
    if (f.h, f.w) != (m.h, m.w) {
        return Err(Error::shape(
            "modulate",
            format!("cube {}x{} vs mask {}x{}", f.h, f.w, m.h, m.w),
        ));
    }
    let mut out = f.clone();
    for b in 0..f.bands {
        for (v, &mv) in out.band_mut(b).iter_mut().zip(&m.data) {
            *v *= mv;
        }
    }
    Ok(out)
}

/// Places band `n` at column offset `step * n` of a `w + step*(bands-1)` wide cube.
pub fn disperse(f: &HsiCube, spec: &DispersionSpec) -> Result<HsiCube> {
    if spec.bands != f.bands {
        return Err(Error::shape(
            "disperse",
            format!("dispersion for {} bands, cube has {}", spec.bands, f.bands),
        ));
    }
    let wd = spec.measurement_width(f.w);
    let mut out = HsiCube::zeros(f.h, wd, f.bands);
    for b in 0..f.bands {
        let off = spec.shift(b);
        for y in 0..f.h {
            let src = &f.data[(b * f.h + y) * f.w..][..f.w];
            out.data[(b * f.h + y) * wd + off..][..f.w].copy_from_slice(src);
        }
    }
    Ok(out)
}

/// Sums the dispersed bands onto the detector and adds the requested noise.
pub fn integrate(dispersed: &HsiCube, noise: NoiseSpec, seed: u64) -> Result<Measurement> {
    let hw = dispersed.h * dispersed.w;
    let mut acc = vec![0.0f64; hw];
    for b in 0..dispersed.bands {
        for (a, &v) in acc.iter_mut().zip(dispersed.band(b)) {
            *a += v as f64;
        }
    }
    let clean = Measurement {
        h: dispersed.h,
        w: dispersed.w,
        data: acc.into_iter().map(|v| v as f32).collect(),
        noise: NoiseSpec::None,
    };
    add_noise(clean, noise, seed)
}

pub fn add_noise(mut y: Measurement, noise: NoiseSpec, seed: u64) -> Result<Measurement> {
    match noise {
        NoiseSpec::None => Ok(y),
        NoiseSpec::Gaussian { sigma } => {
            let dist = Normal::new(0.0, sigma)
                .map_err(|e| Error::Config(format!("gaussian noise sigma {sigma}: {e}")))?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for v in &mut y.data {
                *v += dist.sample(&mut rng) as f32;
            }
            y.noise = noise;
            Ok(y)
        }
        NoiseSpec::Shot { bits } => apply_shot_noise(&y, bits, seed),
    }
}

/// Full forward model: modulate, disperse, integrate.
pub fn simulate(f: &HsiCube, m: &Mask2D, spec: &DispersionSpec, noise: NoiseSpec, seed: u64) -> Result<Measurement> {
    integrate(&disperse(&modulate(f, m)?, spec)?, noise, seed)
}

/// Band `n` of the result is measurement columns `[step*n, step*n + w)`.
pub fn shift_back(y: &Measurement, spec: &DispersionSpec) -> Result<HsiCube> {
    let extra = spec.step * spec.bands.saturating_sub(1);
    if spec.bands == 0 || y.w <= extra {
        return Err(Error::shape(
            "shift_back",
            format!(
                "measurement width {} too small for {} bands at step {}",
                y.w, spec.bands, spec.step
            ),
        ));
    }
    let w = y.w - extra;
    let mut out = HsiCube::zeros(y.h, w, spec.bands);
    for b in 0..spec.bands {
        let off = spec.shift(b);
        for r in 0..y.h {
            let src = &y.data[r * y.w + off..][..w];
            out.data[(b * y.h + r) * w..][..w].copy_from_slice(src);
        }
    }
    Ok(out)
}

/// Shift-back that also checks the recovered width against the scene width.
pub fn shift_back_to(y: &Measurement, spec: &DispersionSpec, w: usize) -> Result<HsiCube> {
    if y.w != spec.measurement_width(w) {
        return Err(Error::shape(
            "shift_back",
            format!(
                "measurement width {} != {} + {}*({}-1)",
                y.w, w, spec.step, spec.bands
            ),
        ));
    }
    shift_back(y, spec)
}

pub fn build_mask3d(m: &Mask2D, spec: &DispersionSpec, mode: MaskMode) -> Mask3D {
    let (h, w) = (m.h, m.w);
    let mut data = vec![0.0f32; h * w * spec.bands];
    for b in 0..spec.bands {
        let off = match mode {
            MaskMode::Shifted => spec.shift(b),
            MaskMode::Replicate => 0,
        };
        for y in 0..h {
            for x in off.min(w)..w {
                data[(b * h + y) * w + x] = m.get(y, x - off);
            }
        }
    }
    Mask3D {
        h,
        w,
        bands: spec.bands,
        data,
    }
}

/// Poisson noise at a detector depth of `bits`: the frame is scaled so its
/// peak maps to `2^bits - 1` counts, each pixel is sampled, and the counts are
/// scaled back.
pub fn apply_shot_noise(y: &Measurement, bits: u32, seed: u64) -> Result<Measurement> {
    if let Some((index, &v)) = y.data.iter().enumerate().find(|(_, v)| **v < 0.0 || !v.is_finite()) {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("measurement pixel {index}")));
        }
        return Err(Error::NegativeMeasurement {
            index,
            value: v as f64,
        });
    }
    if bits == 0 || bits > 31 {
        return Err(Error::Config(format!("shot noise bit depth {bits} outside 1..=31")));
    }
    let levels = ((1u64 << bits) - 1) as f64;
    let peak = y.data.iter().copied().fold(0.0f32, f32::max) as f64;
    let mut out = y.clone();
    out.noise = NoiseSpec::Shot { bits };
    if peak == 0.0 {
        return Ok(out);
    }
    let scale = levels / peak;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in &mut out.data {
        let lambda = *v as f64 * scale;
        if lambda > 0.0 {
            let counts: f64 = Poisson::new(lambda)
                .map_err(|e| Error::Config(format!("poisson rate {lambda}: {e}")))?
                .sample(&mut rng);
            *v = (counts / scale) as f32;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize, bands: usize) -> HsiCube {
        HsiCube::from_fn(h, w, bands, |b, y, x| ((b * 31 + y * 7 + x * 3) % 17) as f32 / 17.0)
    }

    #[test]
    fn identity_and_zero_masks() {
        let f = ramp(4, 5, 3);
        assert_eq!(modulate(&f, &Mask2D::ones(4, 5)).unwrap(), f);
        let z = modulate(&f, &Mask2D::new(4, 5, vec![0.0; 20]).unwrap()).unwrap();
        assert!(z.data.iter().all(|&v| v == 0.0));
        assert!(modulate(&f, &Mask2D::ones(5, 4)).is_err());
    }

    #[test]
    fn modulate_single_pixel_oracle() {
        let f = ramp(6, 7, 4);
        let m = Mask2D::random(6, 7, 0.5, 3).unwrap();
        let out = modulate(&f, &m).unwrap();
        for (b, y, x) in [(0, 0, 0), (3, 5, 6), (2, 1, 4)] {
            assert_eq!(out.get(b, y, x), f.get(b, y, x) * m.data[y * 7 + x]);
        }
    }

    #[test]
    fn small_dispersion_layout() {
        let f = HsiCube::new(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let d = disperse(&f, &DispersionSpec::new(2, 2)).unwrap();
        assert_eq!(d.w, 4);
        assert_eq!(d.band(0), &[1.0, 2.0, 0.0, 0.0]);
        assert_eq!(d.band(1), &[0.0, 0.0, 3.0, 4.0]);
    }

    #[test]
    fn zero_step_keeps_columns() {
        let f = ramp(3, 4, 3);
        let spec = DispersionSpec::new(0, 3);
        assert_eq!(disperse(&f, &spec).unwrap(), f);
        let y = integrate(&disperse(&f, &spec).unwrap(), NoiseSpec::None, 0).unwrap();
        let back = shift_back(&y, &spec).unwrap();
        for b in 0..3 {
            assert_eq!(back.band(b), y.data.as_slice());
        }
    }

    #[test]
    fn integrate_constant_bands() {
        let f = HsiCube::from_fn(2, 3, 2, |b, _, _| if b == 0 { 0.25 } else { 0.5 });
        let y = integrate(&disperse(&f, &DispersionSpec::new(1, 2)).unwrap(), NoiseSpec::None, 0).unwrap();
        assert_eq!(y.w, 4);
        for r in 0..2 {
            assert_eq!(y.get(r, 0), 0.25);
            assert_eq!(y.get(r, 1), 0.75);
            assert_eq!(y.get(r, 2), 0.75);
            assert_eq!(y.get(r, 3), 0.5);
        }
    }

    #[test]
    fn single_band_round_trip() {
        let f = ramp(5, 6, 1);
        let spec = DispersionSpec::new(2, 1);
        let y = simulate(&f, &Mask2D::ones(5, 6), &spec, NoiseSpec::None, 0).unwrap();
        assert_eq!(y.data, f.data);
        assert_eq!(shift_back(&y, &spec).unwrap(), f);
    }

    #[test]
    fn benchmark_measurement_width() {
        assert_eq!(DispersionSpec::new(2, 28).measurement_width(256), 310);
    }

    #[test]
    fn shift_back_rejects_bad_width() {
        let y = Measurement::new(2, 5, vec![0.0; 10]).unwrap();
        assert!(shift_back(&y, &DispersionSpec::new(3, 3)).is_err());
        assert!(shift_back_to(&y, &DispersionSpec::new(1, 3), 4).is_err());
        assert!(shift_back_to(&y, &DispersionSpec::new(1, 3), 3).is_ok());
    }

    #[test]
    fn mask3d_conventions() {
        let m = Mask2D::random(4, 6, 0.5, 9).unwrap();
        let spec = DispersionSpec::new(2, 3);
        let shifted = build_mask3d(&m, &spec, MaskMode::Shifted);
        let replicate = build_mask3d(&m, &spec, MaskMode::Replicate);
        for b in 0..3 {
            for y in 0..4 {
                for x in 0..6 {
                    assert_eq!(replicate.get(b, y, x), m.get(y, x));
                    let expect = if x >= 2 * b { m.get(y, x - 2 * b) } else { 0.0 };
                    assert_eq!(shifted.get(b, y, x), expect);
                }
            }
        }
        let flat = build_mask3d(&m, &DispersionSpec::new(0, 3), MaskMode::Shifted);
        assert_eq!(flat, replicate);
    }

    #[test]
    fn all_ones_mask3d_replicate() {
        let m3 = build_mask3d(&Mask2D::ones(3, 3), &DispersionSpec::new(1, 4), MaskMode::Replicate);
        assert!(m3.data.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn shot_noise_edge_cases() {
        let zero = Measurement::new(2, 2, vec![0.0; 4]).unwrap();
        assert_eq!(apply_shot_noise(&zero, 11, 1).unwrap().data, zero.data);
        let neg = Measurement::new(1, 2, vec![0.5, -0.1]).unwrap();
        assert!(matches!(
            apply_shot_noise(&neg, 11, 1),
            Err(Error::NegativeMeasurement { index: 1, .. })
        ));
    }

    #[test]
    fn rotations_compose() {
        let f = ramp(3, 5, 2);
        assert_eq!(f.rot90(4), f);
        assert_eq!(f.rot90(1).rot90(3), f);
        assert_eq!(f.rot90(2), f.flip_horizontal().flip_vertical());
        let r = f.rot90(1);
        assert_eq!((r.h, r.w), (5, 3));
        assert_eq!(r.get(0, 0, 0), f.get(0, 0, 4));
    }

    #[test]
    fn normalize_maps_max_to_one() {
        let mut f = HsiCube::from_fn(2, 3, 2, |b, y, x| (b * 6 + y * 3 + x) as f32 * 2.0);
        f.normalize();
        assert_eq!(f.data.iter().copied().fold(0.0, f32::max), 1.0);
        assert_eq!(f.get(1, 0, 0), 12.0 / 22.0);
    }
}
