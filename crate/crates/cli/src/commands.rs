use std::path::{Path, PathBuf};

use cfsdcn::data::{synthetic_dataset, Dataset, SyntheticSpec};
use cfsdcn::io::{self, CubeFormat, FlatSpec, Normalization};
use cfsdcn::metrics::PsnrMode;
use cfsdcn::network::{count_params, network_input, Cfsdcn, ModelConfig};
use cfsdcn::optics::{self, DispersionSpec, HsiCube, Mask2D, MaskMode, NoiseSpec};
use cfsdcn::train::{ablation_csv, evaluate_model, evaluate_with, lcs_ablation, shift_back_baseline, spectral_curves_csv, train, EvalSetup, RunConfig};
use cfsdcn::{selfcheck, Error};
use serde::Serialize;

use crate::manifest::{beside, RunManifest};
use crate::{Command, EvaluateArgs, FormatArg, MaskModeArg, NormArg, PsnrModeArg};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("{failed} of {total} gradient checks exceed the tolerance")]
    GradCheck { failed: usize, total: usize },
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::GradCheck { .. } => "gradcheck",
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

impl From<MaskModeArg> for MaskMode {
    fn from(m: MaskModeArg) -> Self {
        match m {
            MaskModeArg::Shifted => MaskMode::Shifted,
            MaskModeArg::Replicate => MaskMode::Replicate,
        }
    }
}

/// `none`, `gaussian:<sigma>` or `shot:<bits>`.
pub fn parse_noise(s: &str) -> cfsdcn::Result<NoiseSpec> {
    let bad = || Error::Config(format!("bad noise spec '{s}' (none, gaussian:<sigma>, shot:<bits>)"));
    match s.split_once(':') {
        None if s == "none" => Ok(NoiseSpec::None),
        Some(("gaussian", v)) => Ok(NoiseSpec::Gaussian { sigma: v.parse().map_err(|_| bad())? }),
        Some(("shot", v)) => Ok(NoiseSpec::Shot { bits: v.parse().map_err(|_| bad())? }),
        _ => Err(bad()),
    }
}

/// Cube files in `path` (sorted by name), or `path` itself when it is a file.
pub fn load_cubes(path: &Path) -> cfsdcn::Result<Vec<HsiCube>> {
    if !path.is_dir() {
        return Ok(vec![io::read_cube(path)?]);
    }
    let entries = std::fs::read_dir(path).map_err(|e| Error::Io { path: path.into(), source: e })?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            name.ends_with(".json") && !name.ends_with(".manifest.json")
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Missing(format!("no cube files in {}", path.display())));
    }
    files.iter().map(|f| io::read_cube(f)).collect()
}

fn load_dataset(dir: &Path) -> cfsdcn::Result<Dataset> {
    let test_dir = dir.join("test");
    Ok(Dataset {
        train: load_cubes(&dir.join("train"))?,
        test: if test_dir.exists() { load_cubes(&test_dir)? } else { Vec::new() },
    })
}

fn load_model(ckpt: &Path) -> cfsdcn::Result<(Cfsdcn, cfsdcn::nn::ParamStore<f32>)> {
    let ckpt = io::load_checkpoint(ckpt, |m| Ok(Cfsdcn::new::<f32>(m, 0)?.1))?;
    let (net, _) = Cfsdcn::new::<f32>(&ckpt.config, 0)?;
    Ok((net, ckpt.params))
}

fn load_config(path: &Path, seed: Option<u64>) -> cfsdcn::Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

#[derive(Serialize)]
struct CountReport {
    variant: String,
    params: usize,
    gflops: f64,
    input_shape: [usize; 4],
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::GenMask { h, w, density, seed, out } => {
            let mask = Mask2D::random(h, w, density, seed)?;
            let mut m = RunManifest::start("gen-mask")
                .config(serde_json::json!({ "h": h, "w": w, "density": density }))
                .seed("mask", seed);
            m.add_pair(io::write_mask(&out, &mask)?);
            m.finish(&beside(&out))?;
        }
        Command::Simulate { cube, mask, step, noise, seed, out } => {
            let noise_spec = parse_noise(&noise)?;
            let f = io::read_cube(&cube)?;
            let m2 = io::read_mask(&mask)?;
            let spec = DispersionSpec::new(step, f.bands);
            let y = optics::simulate(&f, &m2, &spec, noise_spec, seed)?;
            let mut m = RunManifest::start("simulate")
                .config(serde_json::json!({ "cube": cube, "mask": mask, "step": step, "noise": noise_spec }))
                .seed("noise", seed);
            m.add_pair(io::write_measurement(&out, &y)?);
            m.finish(&beside(&out))?;
        }
        Command::ShiftBack { measurement, step, bands, out } => {
            let y = io::read_measurement(&measurement)?;
            let cube = optics::shift_back(&y, &DispersionSpec::new(step, bands))?;
            let mut m = RunManifest::start("shift-back")
                .config(serde_json::json!({ "measurement": measurement, "step": step, "bands": bands }));
            m.add_pair(io::write_cube(&out, &cube)?);
            m.finish(&beside(&out))?;
        }
        Command::Train { config, data, out, resume, seed } => {
            let cfg = load_config(&config, seed)?;
            let dataset = load_dataset(&data)?;
            let outputs = train(&cfg, &dataset, &out, resume)?;
            let config_copy = out.join("config.toml");
            io::write_bytes(&config_copy, cfg.to_toml().as_bytes())?;
            let mut m = RunManifest::start("train")
                .config(&cfg)
                .seed("train", cfg.train.seed)
                .seed("mask", cfg.data.mask_seed);
            m.add(config_copy);
            m.add(outputs.checkpoint);
            m.add(outputs.checkpoint_blob);
            m.add(outputs.loss_csv);
            m.finish(&out.join("manifest.json"))?;
            println!("epochs={} final_loss={}", outputs.epochs_completed, outputs.final_loss.map_or("none".into(), |l| format!("{l:.6e}")));
        }
        Command::Reconstruct { ckpt, measurement, mask, step, mask_mode, out } => {
            let (net, params) = load_model(&ckpt)?;
            let y = io::read_measurement(&measurement)?;
            let m2 = io::read_mask(&mask)?;
            let spec = DispersionSpec::new(step, net.config.bands);
            let w = y.w.checked_sub(spec.shift(spec.bands - 1)).filter(|&w| w > 0).ok_or_else(|| {
                Error::Config(format!("measurement width {} is too narrow for {} bands at step {step}", y.w, spec.bands))
            })?;
            let m2 = m2.crop(0, 0, y.h, w)?;
            let m3 = optics::build_mask3d(&m2, &spec, mask_mode.into());
            let input = network_input::<f32>(&y, &m3, &spec)?;
            let recon = net.reconstruct(&params, &input)?;
            let mut m = RunManifest::start("reconstruct")
                .config(serde_json::json!({ "ckpt": ckpt, "measurement": measurement, "mask": mask, "step": step, "mask_mode": MaskMode::from(mask_mode) }));
            m.add_pair(io::write_cube(&out, &HsiCube::from_tensor(&recon, 0))?);
            m.finish(&beside(&out))?;
        }
        Command::Evaluate(args) => evaluate(args)?,
        Command::Gradcheck { module, seeds, out } => {
            let rows = selfcheck::run(module.as_deref(), seeds)?;
            let mut csv = String::from("module,seeds,max_rel_err,status\n");
            println!("{:<16} {:>5} {:>12}  status", "module", "seeds", "max_rel_err");
            for r in &rows {
                let status = if r.passed { "PASS" } else { "FAIL" };
                println!("{:<16} {:>5} {:>12.3e}  {status}", r.module, r.seeds, r.max_rel_err);
                csv.push_str(&format!("{},{},{:e},{status}\n", r.module, r.seeds, r.max_rel_err));
            }
            if let Some(out) = out {
                io::write_bytes(&out, csv.as_bytes())?;
                let mut m = RunManifest::start("gradcheck").config(serde_json::json!({ "module": module, "seeds": seeds }));
                m.add(&out);
                m.finish(&beside(&out))?;
            }
            let failed = rows.iter().filter(|r| !r.passed).count();
            if failed > 0 {
                return Err(CliError::GradCheck { failed, total: rows.len() });
            }
        }
        Command::Count { config, preset, size } => {
            let model = match (config, preset) {
                (Some(path), _) => RunConfig::load(&path)?.model,
                (None, Some(p)) => ModelConfig::preset(&p)?,
                (None, None) => return Err(Error::Config("--config or --preset is required".into()).into()),
            };
            let (net, params) = Cfsdcn::new::<f32>(&model, 0)?;
            let shape = net.input_shape(size, size);
            let report = CountReport {
                variant: model.variant.clone(),
                params: count_params(&params),
                gflops: net.count_flops(&params, shape)? as f64 / 1e9,
                input_shape: shape,
            };
            println!("{}", serde_json::to_string(&report).expect("plain data"));
        }
        Command::SynthData { out, train, test, h, w, bands, seed } => {
            let spec = SyntheticSpec { train, test, h, w, bands, seed };
            let data = synthetic_dataset(&spec);
            let mut m = RunManifest::start("synth-data").config(spec).seed("scenes", seed);
            for (split, cubes) in [("train", &data.train), ("test", &data.test)] {
                for (i, c) in cubes.iter().enumerate() {
                    m.add_pair(io::write_cube(&out.join(split).join(format!("scene{:02}", i + 1)), c)?);
                }
            }
            m.finish(&out.join("manifest.json"))?;
        }
        Command::AblateLcs { config, data, out, kernels, seed } => {
            let cfg = load_config(&config, seed)?;
            let dataset = load_dataset(&data)?;
            let rows = lcs_ablation(&cfg, &kernels, &dataset, &out)?;
            print!("{}", ablation_csv(&rows));
            let mut m = RunManifest::start("ablate-lcs")
                .config(serde_json::json!({ "run": cfg, "kernels": kernels }))
                .seed("train", cfg.train.seed)
                .seed("mask", cfg.data.mask_seed);
            for k in &kernels {
                let dir = out.join(format!("lcs{k}"));
                for f in ["checkpoint.json", "checkpoint.bin", "loss.csv", "metrics.csv", "metrics.json"] {
                    m.add(dir.join(f));
                }
            }
            m.add(out.join("lcs_ablation.csv"));
            m.finish(&out.join("manifest.json"))?;
        }
        Command::Ingest { input, format, h, w, bands, dtype, layout, norm, out } => {
            let format = match format {
                FormatArg::Hsc => CubeFormat::Hsc,
                FormatArg::Flat => {
                    let need = |v: Option<usize>, n: &str| v.ok_or_else(|| Error::Config(format!("--{n} is required for flat input")));
                    CubeFormat::Flat(FlatSpec {
                        h: need(h, "h")?,
                        w: need(w, "w")?,
                        bands: need(bands, "bands")?,
                        dtype: dtype.parse()?,
                        layout: layout.parse()?,
                    })
                }
            };
            let norm = match norm {
                NormArg::Auto => Normalization::Auto,
                NormArg::Max => Normalization::Max,
                NormArg::None => Normalization::None,
            };
            let cube = io::ingest_cube(&input, format, norm)?;
            let mut m = RunManifest::start("ingest")
                .config(serde_json::json!({ "input": input, "format": format!("{format:?}"), "normalization": norm }));
            m.add_pair(io::write_cube(&out, &cube)?);
            m.finish(&beside(&out))?;
        }
    }
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let scenes = load_cubes(&a.scenes)?;
    let mask = io::read_mask(&a.mask)?;
    let noise = parse_noise(&a.noise)?;
    let bands = scenes[0].bands;
    let spec = DispersionSpec::new(a.step, bands);
    let setup = EvalSetup {
        mask: &mask,
        spec: &spec,
        noise,
        mask_mode: a.mask_mode.into(),
        psnr_mode: match a.psnr_mode {
            PsnrModeArg::PerBand => PsnrMode::PerBand,
            PsnrModeArg::WholeCube => PsnrMode::WholeCube,
        },
        seed: a.seed,
    };
    let (report, curves) = match &a.ckpt {
        Some(ckpt) => {
            let (net, params) = load_model(ckpt)?;
            if net.config.bands != bands {
                return Err(Error::Config(format!("scenes have {bands} bands, model expects {}", net.config.bands)).into());
            }
            evaluate_model(&net, &params, &scenes, &setup)?
        }
        None => evaluate_with(&scenes, &setup, shift_back_baseline)?,
    };
    let (csv, json, curves_csv) = (a.out.join("metrics.csv"), a.out.join("metrics.json"), a.out.join("spectral_curves.csv"));
    report.write(&csv, &json)?;
    io::write_bytes(&curves_csv, spectral_curves_csv(&curves).as_bytes())?;
    print!("{}", report.to_csv());
    let mut m = RunManifest::start("evaluate")
        .config(serde_json::json!({
            "ckpt": a.ckpt, "baseline": a.baseline, "scenes": a.scenes, "mask": a.mask, "step": a.step,
            "noise": noise, "mask_mode": setup.mask_mode, "psnr_mode": setup.psnr_mode,
        }))
        .seed("noise", a.seed);
    m.add(csv);
    m.add(json);
    m.add(curves_csv);
    m.finish(&a.out.join("manifest.json"))?;
    Ok(())
}
