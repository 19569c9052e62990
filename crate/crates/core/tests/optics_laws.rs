mod common;

use cfsdcn::optics::*;
use common::rng;
use proptest::prelude::*;
use rand::Rng;

fn random_cube(h: usize, w: usize, bands: usize, seed: u64) -> HsiCube {
    let mut r = rng(seed);
    HsiCube::from_fn(h, w, bands, |_, _, _| r.random_range(0.0..1.0))
}

proptest! {
    #![proptest_config(common::fixed(64))]

    #[test]
    fn shift_back_inverts_disperse_exactly(h in 1usize..8, w in 1usize..10, bands in 1usize..8, step in 0usize..4, seed in any::<u64>()) {
        let f = random_cube(h, w, bands, seed);
        let spec = DispersionSpec::new(step, bands);
        let d = disperse(&f, &spec).unwrap();
        // Each dispersed band read back at its own offset is the original band.
        for b in 0..bands {
            let single = Measurement::new(h, d.w, d.band(b).to_vec()).unwrap();
            let recovered = shift_back(&single, &spec).unwrap();
            prop_assert_eq!(recovered.band(b), f.band(b));
        }
    }

    #[test]
    fn measurement_width_law(h in 1usize..6, w in 1usize..12, bands in 1usize..30, step in 0usize..5) {
        let f = HsiCube::zeros(h, w, bands);
        let spec = DispersionSpec::new(step, bands);
        let y = simulate(&f, &Mask2D::ones(h, w), &spec, NoiseSpec::None, 0).unwrap();
        prop_assert_eq!(y.w, w + step * (bands - 1));
        prop_assert_eq!(y.h, h);
    }

    #[test]
    fn noiseless_integrate_is_linear(h in 1usize..6, w in 1usize..8, bands in 1usize..6, alpha in -2.0f32..2.0, beta in -2.0f32..2.0, seed in any::<u64>()) {
        let f1 = random_cube(h, w, bands, seed);
        let f2 = random_cube(h, w, bands, seed ^ 1);
        let mix = HsiCube::new(h, w, bands, f1.data.iter().zip(&f2.data).map(|(a, b)| alpha * a + beta * b).collect()).unwrap();
        let y = integrate(&mix, NoiseSpec::None, 0).unwrap();
        let y1 = integrate(&f1, NoiseSpec::None, 0).unwrap();
        let y2 = integrate(&f2, NoiseSpec::None, 0).unwrap();
        for i in 0..y.data.len() {
            let expect = alpha * y1.data[i] + beta * y2.data[i];
            prop_assert!((y.data[i] - expect).abs() <= 1e-5, "{} vs {}", y.data[i], expect);
        }
    }

    #[test]
    fn binary_modulation_is_idempotent(h in 1usize..8, w in 1usize..8, bands in 1usize..5, seed in any::<u64>()) {
        let f = random_cube(h, w, bands, seed);
        let m = Mask2D::random(h, w, 0.5, seed).unwrap();
        let once = modulate(&f, &m).unwrap();
        prop_assert_eq!(modulate(&once, &m).unwrap(), once);
    }

    #[test]
    fn modulation_is_pointwise(h in 1usize..8, w in 1usize..8, bands in 1usize..5, seed in any::<u64>()) {
        let f = random_cube(h, w, bands, seed);
        let m = Mask2D::random(h, w, 0.5, seed ^ 3).unwrap();
        let out = modulate(&f, &m).unwrap();
        let mut r = rng(seed);
        let (b, y, x) = (r.random_range(0..bands), r.random_range(0..h), r.random_range(0..w));
        prop_assert_eq!(out.get(b, y, x), f.get(b, y, x) * m.get(y, x));
    }

    #[test]
    fn mask3d_bands_are_shifted_crops(h in 1usize..6, w in 1usize..10, bands in 1usize..6, step in 0usize..3, seed in any::<u64>()) {
        let m = Mask2D::random(h, w, 0.5, seed).unwrap();
        let spec = DispersionSpec::new(step, bands);
        let shifted = build_mask3d(&m, &spec, MaskMode::Shifted);
        let replicated = build_mask3d(&m, &spec, MaskMode::Replicate);
        for b in 0..bands {
            for y in 0..h {
                for x in 0..w {
                    let expect = if x >= step * b { m.get(y, x - step * b) } else { 0.0 };
                    prop_assert_eq!(shifted.get(b, y, x), expect);
                    prop_assert_eq!(replicated.get(b, y, x), m.get(y, x));
                }
            }
        }
    }
}

#[test]
fn benchmark_geometry_is_310_columns_wide() {
    let spec = DispersionSpec::new(2, 28);
    assert_eq!(spec.measurement_width(256), 310);
}

#[test]
fn dispersion_places_second_band_at_columns_two_and_three() {
    let f = HsiCube::new(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let d = disperse(&f, &DispersionSpec::new(2, 2)).unwrap();
    assert_eq!(d.w, 4);
    assert_eq!(d.band(0), &[1.0, 2.0, 0.0, 0.0]);
    assert_eq!(d.band(1), &[0.0, 0.0, 3.0, 4.0]);
}

#[test]
fn identity_and_zero_masks() {
    let f = random_cube(3, 4, 2, 1);
    assert_eq!(modulate(&f, &Mask2D::ones(3, 4)).unwrap(), f);
    let zero = Mask2D::new(3, 4, vec![0.0; 12]).unwrap();
    assert!(modulate(&f, &zero).unwrap().data.iter().all(|&v| v == 0.0));
    assert!(modulate(&f, &Mask2D::ones(3, 5)).is_err());
}

#[test]
fn single_band_measurement_is_the_band() {
    let f = random_cube(4, 5, 1, 2);
    let spec = DispersionSpec::new(0, 1);
    let y = simulate(&f, &Mask2D::ones(4, 5), &spec, NoiseSpec::None, 0).unwrap();
    assert_eq!(y.data, f.data);
    assert_eq!(shift_back(&y, &spec).unwrap(), f);
}

#[test]
fn zero_step_shift_back_copies_the_frame() {
    let y = Measurement::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let h = shift_back(&y, &DispersionSpec::new(0, 3)).unwrap();
    for b in 0..3 {
        assert_eq!(h.band(b), y.data.as_slice());
    }
}

#[test]
fn two_constant_bands_sum_in_the_overlap() {
    let (a, b) = (0.25f32, 0.5f32);
    let f = HsiCube::from_fn(2, 4, 2, |band, _, _| if band == 0 { a } else { b });
    let y = simulate(&f, &Mask2D::ones(2, 4), &DispersionSpec::new(1, 2), NoiseSpec::None, 0).unwrap();
    for r in 0..2 {
        for c in 1..4 {
            assert_eq!(y.get(r, c), a + b);
        }
    }
}

#[test]
fn shot_noise_is_unbiased_with_poisson_variance() {
    let value = 0.4f32;
    let bits = 11;
    let levels = ((1u32 << bits) - 1) as f64;
    // One bright pixel pins the scale; the rest are the constant under test.
    let mut data = vec![value; 10_001];
    data[0] = 1.0;
    let y = Measurement::new(1, data.len(), data).unwrap();
    let noisy = apply_shot_noise(&y, bits, 42).unwrap();
    let samples: Vec<f64> = noisy.data[1..].iter().map(|&v| v as f64).collect();
    let mean = samples.iter().sum::<f64>() / samples.len() as f64;
    assert!((mean - value as f64).abs() / (value as f64) < 0.01, "mean {mean}");
    let counts: Vec<f64> = samples.iter().map(|v| v * levels).collect();
    let cm = counts.iter().sum::<f64>() / counts.len() as f64;
    let var = counts.iter().map(|c| (c - cm).powi(2)).sum::<f64>() / (counts.len() - 1) as f64;
    assert!((var / cm - 1.0).abs() < 0.1, "variance {var} vs mean {cm}");
}

#[test]
fn shot_noise_edge_cases() {
    let zero = Measurement::new(2, 2, vec![0.0; 4]).unwrap();
    assert_eq!(apply_shot_noise(&zero, 11, 1).unwrap().data, zero.data);
    let neg = Measurement::new(1, 2, vec![0.5, -0.1]).unwrap();
    assert_eq!(apply_shot_noise(&neg, 11, 1).unwrap_err().kind(), "negative_input");
    let y = Measurement::new(1, 3, vec![0.1, 0.5, 0.9]).unwrap();
    assert_eq!(apply_shot_noise(&y, 11, 9).unwrap(), apply_shot_noise(&y, 11, 9).unwrap());
}

#[test]
fn mask_generation_density() {
    let m = Mask2D::random(256, 256, 0.5, 7).unwrap();
    let frac = m.data.iter().sum::<f32>() as f64 / m.data.len() as f64;
    assert!((frac - 0.5).abs() < 0.01, "{frac}");
    assert!(Mask2D::random(4, 4, 1.0, 0).unwrap().data.iter().all(|&v| v == 1.0));
    assert_eq!(Mask2D::random(8, 8, 0.5, 3).unwrap(), Mask2D::random(8, 8, 0.5, 3).unwrap());
    assert!(Mask2D::random(0, 4, 0.5, 0).is_err());
}
