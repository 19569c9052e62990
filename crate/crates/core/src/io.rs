//! On-disk formats: HSC cubes (JSON sidecar plus raw `f32le` blob), flat
//! binary import, and model checkpoints.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::ModelConfig;
use crate::nn::ParamStore;
use crate::optics::{HsiCube, Mask2D, Measurement, NoiseSpec};
use crate::tensor::{AdamState, Tensor4};

pub const HSC_DTYPE: &str = "f32le";
pub const HSC_LAYOUT: &str = "band-major,row-major";
pub const CHECKPOINT_FORMAT: &str = "cfsdcn-checkpoint/1";

/// Sidecar (`.json`) and blob (`.bin`) paths for a stem, ignoring either
/// extension if one was given.
pub fn paired_paths(path: &Path) -> (PathBuf, PathBuf) {
    let stem = match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("bin") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let with = |ext: &str| {
        let mut s = stem.clone().into_os_string();
        s.push(".");
        s.push(ext);
        PathBuf::from(s)
    };
    (with("json"), with("bin"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HscHeader {
    pub h: usize,
    pub w: usize,
    pub bands: usize,
    pub dtype: String,
    pub layout: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wavelengths: Option<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseSpec>,
}

impl HscHeader {
    pub fn new(h: usize, w: usize, bands: usize) -> Self {
        HscHeader {
            h,
            w,
            bands,
            dtype: HSC_DTYPE.into(),
            layout: HSC_LAYOUT.into(),
            wavelengths: None,
            noise: None,
        }
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        _ => Ok(()),
    }
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Missing(path.display().to_string()),
        _ => Error::io(path, e),
    })
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format {
        path: path.into(),
        reason: e.to_string(),
    })?;
    write_bytes(path, format!("{text}\n").as_bytes())
}

pub fn read_json<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<D> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Format {
        path: path.into(),
        reason: e.to_string(),
    })
}

pub fn f32_to_le_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn le_bytes_to_f32(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

fn read_f32_exact(path: &Path, count: usize) -> Result<Vec<f32>> {
    let bytes = read_bytes(path)?;
    let expected = count as u64 * 4;
    if bytes.len() as u64 != expected {
        return Err(Error::SizeMismatch {
            path: path.into(),
            expected,
            actual: bytes.len() as u64,
        });
    }
    Ok(le_bytes_to_f32(&bytes))
}

/// Writes `header` and `data`; returns the (sidecar, blob) paths.
pub fn write_hsc(path: &Path, header: &HscHeader, data: &[f32]) -> Result<(PathBuf, PathBuf)> {
    let (json, bin) = paired_paths(path);
    if data.len() != header.h * header.w * header.bands {
        return Err(Error::shape(
            "write_hsc",
            format!("{}x{}x{} header for {} values", header.h, header.w, header.bands, data.len()),
        ));
    }
    write_json(&json, header)?;
    write_bytes(&bin, &f32_to_le_bytes(data))?;
    Ok((json, bin))
}

pub fn read_hsc(path: &Path) -> Result<(HscHeader, Vec<f32>)> {
    let (json, bin) = paired_paths(path);
    let header: HscHeader = read_json(&json)?;
    if header.dtype != HSC_DTYPE {
        return Err(Error::Format {
            path: json,
            reason: format!("unsupported dtype '{}', expected '{HSC_DTYPE}'", header.dtype),
        });
    }
    if header.layout != HSC_LAYOUT {
        return Err(Error::Format {
            path: json,
            reason: format!("unsupported layout '{}', expected '{HSC_LAYOUT}'", header.layout),
        });
    }
    if header.h == 0 || header.w == 0 || header.bands == 0 {
        return Err(Error::Format {
            path: json,
            reason: format!("empty dimensions {}x{}x{}", header.h, header.w, header.bands),
        });
    }
    let data = read_f32_exact(&bin, header.h * header.w * header.bands)?;
    Ok((header, data))
}

pub fn write_cube(path: &Path, cube: &HsiCube) -> Result<(PathBuf, PathBuf)> {
    let mut header = HscHeader::new(cube.h, cube.w, cube.bands);
    header.wavelengths = cube.wavelengths.clone();
    write_hsc(path, &header, &cube.data)
}

pub fn read_cube(path: &Path) -> Result<HsiCube> {
    let (header, data) = read_hsc(path)?;
    let cube = HsiCube::new(header.h, header.w, header.bands, data)?;
    Ok(match header.wavelengths {
        Some(wl) => cube.with_wavelengths(wl),
        None => cube,
    })
}

pub fn write_mask(path: &Path, mask: &Mask2D) -> Result<(PathBuf, PathBuf)> {
    write_hsc(path, &HscHeader::new(mask.h, mask.w, 1), &mask.data)
}

pub fn read_mask(path: &Path) -> Result<Mask2D> {
    let (header, data) = read_hsc(path)?;
    if header.bands != 1 {
        return Err(Error::Format {
            path: path.into(),
            reason: format!("a mask must have one band, found {}", header.bands),
        });
    }
    Mask2D::new(header.h, header.w, data)
}

pub fn write_measurement(path: &Path, y: &Measurement) -> Result<(PathBuf, PathBuf)> {
    let mut header = HscHeader::new(y.h, y.w, 1);
    header.noise = Some(y.noise);
    write_hsc(path, &header, &y.data)
}

pub fn read_measurement(path: &Path) -> Result<Measurement> {
    let (header, data) = read_hsc(path)?;
    if header.bands != 1 {
        return Err(Error::Format {
            path: path.into(),
            reason: format!("a measurement must have one band, found {}", header.bands),
        });
    }
    let mut y = Measurement::new(header.h, header.w, data)?;
    y.noise = header.noise.unwrap_or_default();
    Ok(y)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlatDtype {
    U8,
    U16le,
    F32le,
    F64le,
}

impl FlatDtype {
    pub fn size(self) -> usize {
        match self {
            FlatDtype::U8 => 1,
            FlatDtype::U16le => 2,
            FlatDtype::F32le => 4,
            FlatDtype::F64le => 8,
        }
    }

    fn decode(self, c: &[u8]) -> f32 {
        match self {
            FlatDtype::U8 => c[0] as f32,
            FlatDtype::U16le => u16::from_le_bytes([c[0], c[1]]) as f32,
            FlatDtype::F32le => f32::from_le_bytes([c[0], c[1], c[2], c[3]]),
            FlatDtype::F64le => f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]) as f32,
        }
    }
}

impl std::str::FromStr for FlatDtype {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "u8" => Ok(FlatDtype::U8),
            "u16le" => Ok(FlatDtype::U16le),
            "f32le" => Ok(FlatDtype::F32le),
            "f64le" => Ok(FlatDtype::F64le),
            _ => Err(Error::Config(format!("unknown dtype '{s}' (u8, u16le, f32le, f64le)"))),
        }
    }
}

/// Sample order of a flat file.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlatLayout {
    /// All of band 0, then band 1, ... (row-major within a band).
    BandMajor,
    /// All bands of pixel (0,0), then pixel (0,1), ...
    PixelMajor,
}

impl std::str::FromStr for FlatLayout {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "band-major" | "band_major" | "bsq" => Ok(FlatLayout::BandMajor),
            "pixel-major" | "pixel_major" | "bip" => Ok(FlatLayout::PixelMajor),
            _ => Err(Error::Config(format!("unknown layout '{s}' (band-major, pixel-major)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FlatSpec {
    pub h: usize,
    pub w: usize,
    pub bands: usize,
    pub dtype: FlatDtype,
    pub layout: FlatLayout,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CubeFormat {
    Hsc,
    Flat(FlatSpec),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Divide by the maximum only when values fall outside `[0, 1]`.
    #[default]
    Auto,
    /// Always divide by the maximum.
    Max,
    None,
}

pub fn read_flat(path: &Path, spec: FlatSpec) -> Result<HsiCube> {
    let FlatSpec { h, w, bands, dtype, layout } = spec;
    if h == 0 || w == 0 || bands == 0 {
        return Err(Error::Config(format!("flat dimensions {h}x{w}x{bands} must be positive")));
    }
    let bytes = read_bytes(path)?;
    let expected = (h * w * bands * dtype.size()) as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::SizeMismatch {
            path: path.into(),
            expected,
            actual: bytes.len() as u64,
        });
    }
    let values: Vec<f32> = bytes.chunks_exact(dtype.size()).map(|c| dtype.decode(c)).collect();
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{} sample {i}", path.display())));
    }
    let data = match layout {
        FlatLayout::BandMajor => values,
        FlatLayout::PixelMajor => {
            let hw = h * w;
            let mut out = vec![0.0; values.len()];
            for p in 0..hw {
                for b in 0..bands {
                    out[b * hw + p] = values[p * bands + b];
                }
            }
            out
        }
    };
    HsiCube::new(h, w, bands, data)
}

/// Loads a cube and maps it into `[0, 1]`.
pub fn ingest_cube(path: &Path, format: CubeFormat, norm: Normalization) -> Result<HsiCube> {
    let mut cube = match format {
        CubeFormat::Hsc => read_cube(path)?,
        CubeFormat::Flat(spec) => read_flat(path, spec)?,
    };
    if cube.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(path.display().to_string()));
    }
    let in_range = cube.data.iter().all(|v| (0.0..=1.0).contains(v));
    match norm {
        Normalization::Auto if !in_range => cube.normalize(),
        Normalization::Max => cube.normalize(),
        _ => {}
    }
    Ok(cube)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 4],
    /// Byte offset into the blob.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub config: ModelConfig,
    pub epoch: usize,
    #[serde(default)]
    pub adam_step: Option<u64>,
    pub blob: String,
    pub blob_bytes: u64,
    pub tensors: Vec<TensorEntry>,
}

/// Weights plus optional optimiser state.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
    pub adam: Option<AdamState<f32>>,
    pub epoch: usize,
}

const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(PathBuf, PathBuf)> {
    let (json, bin) = paired_paths(path);
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    let mut push = |name: String, t: &Tensor4<f32>| {
        tensors.push(TensorEntry {
            name,
            shape: t.shape(),
            offset: blob.len() as u64,
        });
        blob.extend(f32_to_le_bytes(t.data()));
    };
    for (name, t) in ckpt.params.names().iter().zip(ckpt.params.values()) {
        push(name.clone(), t);
    }
    if let Some(adam) = &ckpt.adam {
        if adam.m.len() != ckpt.params.len() || adam.v.len() != ckpt.params.len() {
            return Err(Error::shape("checkpoint", "optimiser state does not match parameters"));
        }
        for (name, t) in ckpt.params.names().iter().zip(&adam.m) {
            push(format!("{ADAM_M}{name}"), t);
        }
        for (name, t) in ckpt.params.names().iter().zip(&adam.v) {
            push(format!("{ADAM_V}{name}"), t);
        }
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        config: ckpt.config.clone(),
        epoch: ckpt.epoch,
        adam_step: ckpt.adam.as_ref().map(|a| a.step),
        blob: bin
            .file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_default(),
        blob_bytes: blob.len() as u64,
        tensors,
    };
    write_bytes(&bin, &blob)?;
    write_json(&json, &manifest)?;
    Ok((json, bin))
}

/// Reads a checkpoint; `template` supplies the expected parameter layout.
pub fn load_checkpoint(path: &Path, template: impl FnOnce(&ModelConfig) -> Result<ParamStore<f32>>) -> Result<Checkpoint> {
    let (json, _) = paired_paths(path);
    let manifest: CheckpointManifest = read_json(&json)?;
    let fail = |reason: String| Error::Format {
        path: json.clone(),
        reason,
    };
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(fail(format!("format tag '{}', expected '{CHECKPOINT_FORMAT}'", manifest.format)));
    }
    let bin = json.with_file_name(&manifest.blob);
    let blob = read_bytes(&bin)?;
    if blob.len() as u64 != manifest.blob_bytes {
        return Err(Error::SizeMismatch {
            path: bin,
            expected: manifest.blob_bytes,
            actual: blob.len() as u64,
        });
    }
    let read = |entry: &TensorEntry| -> Result<Tensor4<f32>> {
        let count: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + 4 * count;
        if end > blob.len() {
            return Err(fail(format!("tensor '{}' runs past the blob", entry.name)));
        }
        Tensor4::from_vec(entry.shape, le_bytes_to_f32(&blob[start..end]))
    };
    let mut params = template(&manifest.config)?;
    let by_name = |name: &str| manifest.tensors.iter().find(|e| e.name == name);
    let mut values = Vec::with_capacity(params.len());
    for name in params.names() {
        let entry = by_name(name).ok_or_else(|| fail(format!("missing tensor '{name}'")))?;
        values.push(read(entry)?);
    }
    let known = params.len() * if manifest.adam_step.is_some() { 3 } else { 1 };
    if manifest.tensors.len() != known {
        return Err(fail(format!("{} tensors, expected {known}", manifest.tensors.len())));
    }
    let adam = match manifest.adam_step {
        Some(step) => {
            let mut m = Vec::with_capacity(params.len());
            let mut v = Vec::with_capacity(params.len());
            for name in params.names() {
                let em = by_name(&format!("{ADAM_M}{name}")).ok_or_else(|| fail(format!("missing moment for '{name}'")))?;
                let ev = by_name(&format!("{ADAM_V}{name}")).ok_or_else(|| fail(format!("missing moment for '{name}'")))?;
                m.push(read(em)?);
                v.push(read(ev)?);
            }
            Some(AdamState { step, m, v })
        }
        None => None,
    };
    params.load_values(values)?;
    if let Some(a) = &adam {
        for (i, p) in params.values().iter().enumerate() {
            if a.m[i].shape() != p.shape() || a.v[i].shape() != p.shape() {
                return Err(fail(format!("moment shape mismatch for '{}'", params.names()[i])));
            }
        }
    }
    Ok(Checkpoint {
        config: manifest.config,
        params,
        adam,
        epoch: manifest.epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paired_paths_strip_known_extensions() {
        let (j, b) = paired_paths(Path::new("out/cube.json"));
        assert_eq!((j.to_str().unwrap(), b.to_str().unwrap()), ("out/cube.json", "out/cube.bin"));
        let (j, b) = paired_paths(Path::new("out/cube.v2"));
        assert_eq!((j.to_str().unwrap(), b.to_str().unwrap()), ("out/cube.v2.json", "out/cube.v2.bin"));
    }

    #[test]
    fn cube_round_trip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c");
        let cube = HsiCube::from_fn(3, 4, 2, |b, y, x| (b * 12 + y * 4 + x) as f32 / 24.0).with_wavelengths(vec![450.0, 460.0]);
        write_cube(&p, &cube).unwrap();
        assert_eq!(read_cube(&p).unwrap(), cube);
        let (_, bin) = paired_paths(&p);
        let bytes = fs::read(&bin).unwrap();
        fs::write(&bin, &bytes[..bytes.len() - 3]).unwrap();
        match read_cube(&p) {
            Err(Error::SizeMismatch { expected, actual, .. }) => assert_eq!((expected, actual), (96, 93)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn header_rejects_unknown_dtype() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m");
        write_mask(&p, &Mask2D::ones(2, 2)).unwrap();
        let (json, _) = paired_paths(&p);
        let text = fs::read_to_string(&json).unwrap().replace("f32le", "f16le");
        fs::write(&json, text).unwrap();
        assert_eq!(read_mask(&p).unwrap_err().kind(), "format");
    }

    #[test]
    fn flat_pixel_major_transposes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("raw.u16");
        // 1x2 pixels, 3 bands, interleaved by pixel.
        let samples: [u16; 6] = [1, 2, 3, 4, 5, 6];
        fs::write(&p, samples.iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<_>>()).unwrap();
        let spec = FlatSpec {
            h: 1,
            w: 2,
            bands: 3,
            dtype: FlatDtype::U16le,
            layout: FlatLayout::PixelMajor,
        };
        let cube = ingest_cube(&p, CubeFormat::Flat(spec), Normalization::Auto).unwrap();
        assert_eq!(cube.data, vec![1.0 / 6.0, 4.0 / 6.0, 2.0 / 6.0, 5.0 / 6.0, 0.5, 1.0]);
    }
}
