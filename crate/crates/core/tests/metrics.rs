mod common;

use cfsdcn::data::synthetic_scene;
use cfsdcn::metrics::*;
use cfsdcn::optics::HsiCube;
use cfsdcn::train::{MetricReport, SceneMetrics};
use common::rng;
use proptest::prelude::*;
use rand::Rng;

fn noisy(c: &HsiCube, sigma: f32, seed: u64) -> HsiCube {
    let mut r = rng(seed);
    HsiCube::new(c.h, c.w, c.bands, c.data.iter().map(|v| v + sigma * r.random_range(-1.0f32..1.0)).collect()).unwrap()
}

#[test]
fn psnr_of_one_percent_mse_is_twenty_db() {
    assert_eq!(psnr_from_mse(0.01, 1.0), 20.0);
    let reference = HsiCube::zeros(4, 4, 3);
    let x = HsiCube::from_fn(4, 4, 3, |_, _, _| 0.1);
    assert!((psnr(&x, &reference, 1.0).unwrap() - 20.0).abs() < 1e-5);
    assert!((psnr_with(&x, &reference, 1.0, PsnrMode::WholeCube).unwrap() - 20.0).abs() < 1e-5);
}

#[test]
fn identical_cubes_hit_the_cap_and_unit_ssim() {
    let c = synthetic_scene(24, 24, 3, 1);
    assert_eq!(psnr(&c, &c, 1.0).unwrap(), PSNR_CAP_DB);
    assert!((ssim(&c, &c).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn mismatched_shapes_are_rejected() {
    let a = HsiCube::zeros(12, 12, 2);
    let b = HsiCube::zeros(12, 12, 3);
    assert_eq!(psnr(&a, &b, 1.0).unwrap_err().kind(), "shape");
    assert_eq!(ssim(&a, &b).unwrap_err().kind(), "shape");
}

#[test]
fn inverted_cube_scores_below_a_noisy_copy() {
    let c = synthetic_scene(32, 32, 4, 5);
    let inverted = HsiCube::new(c.h, c.w, c.bands, c.data.iter().map(|v| 1.0 - v).collect()).unwrap();
    assert!(ssim(&inverted, &c).unwrap() < ssim(&noisy(&c, 0.05, 2), &c).unwrap());
}

#[test]
fn report_means_are_column_means() {
    let scenes = vec![
        SceneMetrics { scene_id: "a".into(), psnr_db: 30.0, ssim: 0.9 },
        SceneMetrics { scene_id: "b".into(), psnr_db: 20.0, ssim: 0.5 },
        SceneMetrics { scene_id: "c".into(), psnr_db: 25.0, ssim: 0.7 },
    ];
    let r = MetricReport::from_scenes(scenes, 0.0);
    assert!((r.mean_psnr_db - 25.0).abs() < 1e-12);
    assert!((r.mean_ssim - 0.7).abs() < 1e-12);
    let csv = r.to_csv();
    assert!(csv.starts_with("scene_id,psnr_db,ssim\n"));
    assert_eq!(csv.lines().count(), 5);
}

proptest! {
    #![proptest_config(common::fixed(32))]

    #[test]
    fn ssim_is_symmetric_and_bounded(seed in any::<u64>(), sigma in 0.0f32..0.5) {
        let c = synthetic_scene(16, 16, 2, seed);
        let n = noisy(&c, sigma, seed);
        let (ab, ba) = (ssim(&n, &c).unwrap(), ssim(&c, &n).unwrap());
        prop_assert!((ab - ba).abs() <= 1e-12, "{ab} vs {ba}");
        prop_assert!((-1.0..=1.0).contains(&ab));
    }

    #[test]
    fn psnr_decreases_with_mse(a in 1e-6f64..1.0, b in 1e-6f64..1.0) {
        prop_assume!(a < b);
        prop_assert!(psnr_from_mse(a, 1.0) >= psnr_from_mse(b, 1.0));
    }
}
