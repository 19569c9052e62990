mod common;

use cfsdcn::io::*;
use cfsdcn::network::{Cfsdcn, ModelConfig};
use cfsdcn::optics::{HsiCube, Mask2D, Measurement, NoiseSpec};
use cfsdcn::tensor::AdamState;
use proptest::prelude::*;
use tempfile::tempdir;

proptest! {
    #![proptest_config(common::fixed(32))]

    #[test]
    fn hsc_round_trip_is_bit_exact(
        (h, w, bands, data) in (1usize..6, 1usize..6, 1usize..4).prop_flat_map(|(h, w, b)| {
            (Just(h), Just(w), Just(b), proptest::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), h * w * b))
        })
    ) {
        let dir = tempdir().unwrap();
        let cube = HsiCube::new(h, w, bands, data).unwrap();
        write_cube(&dir.path().join("c"), &cube).unwrap();
        let back = read_cube(&dir.path().join("c.json")).unwrap();
        prop_assert_eq!(back.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), cube.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        prop_assert_eq!((back.h, back.w, back.bands), (h, w, bands));
    }
}

#[test]
fn sidecar_matches_documented_header() {
    let dir = tempdir().unwrap();
    let cube = HsiCube::zeros(2, 3, 4).with_wavelengths(vec![450.0, 500.0, 550.0, 600.0]);
    let (json, bin) = write_cube(&dir.path().join("scene"), &cube).unwrap();
    let header: serde_json::Value = serde_json::from_slice(&std::fs::read(&json).unwrap()).unwrap();
    assert_eq!(header["h"], 2);
    assert_eq!(header["w"], 3);
    assert_eq!(header["bands"], 4);
    assert_eq!(header["dtype"], "f32le");
    assert_eq!(header["layout"], "band-major,row-major");
    assert_eq!(std::fs::metadata(bin).unwrap().len(), 2 * 3 * 4 * 4);
    assert_eq!(read_cube(&json).unwrap(), cube);
}

#[test]
fn truncated_blob_reports_both_sizes() {
    let dir = tempdir().unwrap();
    let (_, bin) = write_cube(&dir.path().join("t"), &HsiCube::zeros(2, 2, 2)).unwrap();
    let bytes = std::fs::read(&bin).unwrap();
    std::fs::write(&bin, &bytes[..bytes.len() - 3]).unwrap();
    let err = read_cube(&bin).unwrap_err();
    assert_eq!(err.kind(), "size_mismatch");
    let msg = err.to_string();
    assert!(msg.contains("32") && msg.contains("29"), "{msg}");
}

#[test]
fn malformed_header_and_missing_files() {
    let dir = tempdir().unwrap();
    std::fs::write(dir.path().join("bad.json"), "{\"h\": 2}").unwrap();
    assert_eq!(read_cube(&dir.path().join("bad")).unwrap_err().kind(), "format");
    assert_eq!(read_cube(&dir.path().join("absent")).unwrap_err().kind(), "missing");
    let header = r#"{"h":1,"w":1,"bands":1,"dtype":"f64le","layout":"band-major,row-major"}"#;
    std::fs::write(dir.path().join("wide.json"), header).unwrap();
    std::fs::write(dir.path().join("wide.bin"), [0u8; 8]).unwrap();
    assert_eq!(read_cube(&dir.path().join("wide")).unwrap_err().kind(), "format");
}

#[test]
fn masks_and_measurements_round_trip() {
    let dir = tempdir().unwrap();
    let mask = Mask2D::random(5, 7, 0.5, 1).unwrap();
    write_mask(&dir.path().join("m"), &mask).unwrap();
    assert_eq!(read_mask(&dir.path().join("m")).unwrap(), mask);
    let mut y = Measurement::new(2, 3, vec![0.5, 1.5, 2.5, 3.5, 4.5, 5.5]).unwrap();
    y.noise = NoiseSpec::Shot { bits: 11 };
    write_measurement(&dir.path().join("y"), &y).unwrap();
    assert_eq!(read_measurement(&dir.path().join("y")).unwrap(), y);
    assert_eq!(read_mask(&dir.path().join("y")).unwrap_err().kind(), "config");
}

#[test]
fn ingest_normalises_a_ramp_to_unit_peak() {
    let dir = tempdir().unwrap();
    let ramp = HsiCube::from_fn(3, 4, 2, |b, y, x| (b * 12 + y * 4 + x) as f32 * 10.0);
    write_cube(&dir.path().join("ramp"), &ramp).unwrap();
    let cube = ingest_cube(&dir.path().join("ramp"), CubeFormat::Hsc, Normalization::Auto).unwrap();
    let max = cube.data.iter().copied().fold(f32::MIN, f32::max);
    assert_eq!(max, 1.0);
    for (a, b) in cube.data.iter().zip(&ramp.data) {
        assert!((a - b / 230.0).abs() < 1e-6);
    }
    let unit = HsiCube::from_fn(2, 2, 1, |_, y, x| (y * 2 + x) as f32 * 0.1);
    write_cube(&dir.path().join("unit"), &unit).unwrap();
    assert_eq!(ingest_cube(&dir.path().join("unit"), CubeFormat::Hsc, Normalization::Auto).unwrap(), unit);
}

#[test]
fn flat_import_handles_layouts_and_sizes() {
    let dir = tempdir().unwrap();
    // Two bands of a 1x2 image stored pixel-major as u16.
    let values: [u16; 4] = [10, 20, 30, 40];
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    let path = dir.path().join("raw.bin");
    std::fs::write(&path, &bytes).unwrap();
    let spec = FlatSpec { h: 1, w: 2, bands: 2, dtype: FlatDtype::U16le, layout: FlatLayout::PixelMajor };
    let cube = read_flat(&path, spec).unwrap();
    assert_eq!(cube.band(0), &[10.0, 30.0]);
    assert_eq!(cube.band(1), &[20.0, 40.0]);
    let norm = ingest_cube(&path, CubeFormat::Flat(spec), Normalization::Auto).unwrap();
    assert_eq!(norm.band(1), &[0.5, 1.0]);
    let bad = FlatSpec { bands: 3, ..spec };
    let err = read_flat(&path, bad).unwrap_err();
    assert_eq!(err.kind(), "size_mismatch");
    assert!(err.to_string().contains("12") && err.to_string().contains('8'));
}

#[test]
fn checkpoint_round_trip_keeps_weights_and_optimiser_state() {
    let dir = tempdir().unwrap();
    let cfg = ModelConfig::tiny(4);
    let (_, params) = Cfsdcn::new::<f32>(&cfg, 3).unwrap();
    let mut adam = AdamState::new(params.values());
    adam.step = 17;
    adam.m[0].data_mut()[0] = 0.25;
    adam.v[1].data_mut()[0] = 0.5;
    let ckpt = Checkpoint { config: cfg.clone(), params: params.clone(), adam: Some(adam.clone()), epoch: 4 };
    let path = dir.path().join("ckpt");
    save_checkpoint(&path, &ckpt).unwrap();
    let back = load_checkpoint(&path, |m| Ok(Cfsdcn::new::<f32>(m, 0)?.1)).unwrap();
    assert_eq!(back.config, cfg);
    assert_eq!(back.params, params);
    assert_eq!(back.adam, Some(adam));
    assert_eq!(back.epoch, 4);
}

#[test]
fn checkpoint_rejects_a_foreign_layout() {
    let dir = tempdir().unwrap();
    let (_, params) = Cfsdcn::new::<f32>(&ModelConfig::tiny(4), 0).unwrap();
    let ckpt = Checkpoint { config: ModelConfig::tiny(4), params, adam: None, epoch: 0 };
    save_checkpoint(&dir.path().join("c"), &ckpt).unwrap();
    let other = ModelConfig::tiny(6);
    let err = load_checkpoint(&dir.path().join("c"), |_| Ok(Cfsdcn::new::<f32>(&other, 0)?.1)).unwrap_err();
    assert!(matches!(err.kind(), "format" | "shape"), "{err}");
}
