//! Training loop, evaluation reports and the LCS kernel ablation.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{make_batch, sample_input, Batch, BatchOptions, Dataset};
use crate::error::{Error, Result};
use crate::io::{self, Checkpoint};
use crate::metrics::{psnr_with, ssim, PsnrMode};
use crate::network::{Cfsdcn, ModelConfig};
use crate::nn::{Ctx, ParamStore};
use crate::optics::{DispersionSpec, HsiCube, Mask2D, MaskMode, NoiseSpec};
use crate::tensor::{Adam, AdamState, Tensor4};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Mse,
    L1,
}

fn d_epochs() -> usize {
    500
}
fn d_lr() -> f64 {
    4e-4
}
fn d_decay() -> f64 {
    0.5
}
fn d_lr_step() -> usize {
    50
}
fn d_batch() -> usize {
    5
}
fn d_crop() -> usize {
    256
}
fn d_one() -> usize {
    1
}
fn d_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_decay")]
    pub lr_decay: f64,
    #[serde(default = "d_lr_step")]
    pub lr_step_epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_crop")]
    pub crop: usize,
    /// Random crops drawn per training scene per epoch.
    #[serde(default = "d_one")]
    pub samples_per_scene: usize,
    #[serde(default = "d_true")]
    pub rotate: bool,
    #[serde(default = "d_true")]
    pub flip: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub loss: LossKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: d_epochs(),
            lr: d_lr(),
            lr_decay: d_decay(),
            lr_step_epochs: d_lr_step(),
            batch_size: d_batch(),
            crop: d_crop(),
            samples_per_scene: d_one(),
            rotate: true,
            flip: true,
            seed: 0,
            loss: LossKind::Mse,
        }
    }
}

impl TrainConfig {
    /// Step schedule: `lr * decay^floor(epoch / step)`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let k = epoch / self.lr_step_epochs.max(1);
        self.lr * self.lr_decay.powi(k as i32)
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be finite and non-negative", self.lr)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay.is_finite()) {
            return Err(Error::Config(format!("lr_decay {} must be positive", self.lr_decay)));
        }
        if self.batch_size == 0 || self.samples_per_scene == 0 {
            return Err(Error::Config("batch_size and samples_per_scene must be positive".into()));
        }
        let m = model.spatial_multiple();
        if self.crop == 0 || !self.crop.is_multiple_of(m) {
            return Err(Error::Config(format!("crop {} must be a positive multiple of {m}", self.crop)));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, scenes: usize) -> usize {
        (scenes * self.samples_per_scene).div_ceil(self.batch_size).max(1)
    }
}

fn d_step() -> usize {
    2
}
fn d_density() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default = "d_step")]
    pub step: usize,
    #[serde(default = "d_density")]
    pub mask_density: f64,
    #[serde(default)]
    pub mask_seed: u64,
    #[serde(default)]
    pub mask_mode: MaskMode,
    #[serde(default)]
    pub noise: NoiseSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            step: d_step(),
            mask_density: d_density(),
            mask_seed: 0,
            mask_mode: MaskMode::Shifted,
            noise: NoiseSpec::None,
        }
    }
}

impl DataConfig {
    pub fn dispersion(&self, bands: usize) -> DispersionSpec {
        DispersionSpec::new(self.step, bands)
    }

    pub fn mask(&self, h: usize, w: usize) -> Result<Mask2D> {
        Mask2D::random(h, w, self.mask_density, self.mask_seed)
    }
}

/// The full text configuration: `[model]`, `[train]` and `[data]` tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().replace('\n', " ")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Missing(path.display().to_string()),
            _ => Error::io(path, e),
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration is always representable")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate(&self.model)?;
        self.data.dispersion(self.model.bands).validate()
    }

    pub fn batch_options(&self) -> BatchOptions {
        BatchOptions {
            batch_size: self.train.batch_size,
            crop: self.train.crop,
            rotate: self.train.rotate,
            flip: self.train.flip,
            noise: self.data.noise,
            mask_mode: self.data.mask_mode,
        }
    }

    /// Configuration used by the desk-scale checks: 8 bands, 64x64 crops.
    pub fn desk_scale() -> Self {
        RunConfig {
            model: ModelConfig::tiny(8),
            train: TrainConfig {
                epochs: 40,
                lr: 2e-3,
                lr_step_epochs: 15,
                batch_size: 4,
                crop: 64,
                samples_per_scene: 2,
                seed: 7,
                ..Default::default()
            },
            data: DataConfig::default(),
        }
    }
}

/// SplitMix64 finaliser, used to derive independent sub-seeds.
pub fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug)]
pub struct Trainer {
    pub net: Cfsdcn,
    pub params: ParamStore<f32>,
    pub adam: AdamState<f32>,
    pub optimizer: Adam,
    pub cfg: TrainConfig,
    /// Index of the next epoch to run.
    pub epoch: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

impl Trainer {
    pub fn new(model: &ModelConfig, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate(model)?;
        let (net, params) = Cfsdcn::new::<f32>(model, cfg.seed)?;
        let adam = AdamState::new(params.values());
        Ok(Trainer {
            net,
            params,
            adam,
            optimizer: Adam::default(),
            cfg: cfg.clone(),
            epoch: 0,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate(&ckpt.config)?;
        let (net, _) = Cfsdcn::new::<f32>(&ckpt.config, cfg.seed)?;
        let adam = ckpt.adam.unwrap_or_else(|| AdamState::new(ckpt.params.values()));
        Ok(Trainer {
            net,
            params: ckpt.params,
            adam,
            optimizer: Adam::default(),
            cfg: cfg.clone(),
            epoch: ckpt.epoch,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.net.config.clone(),
            params: self.params.clone(),
            adam: Some(self.adam.clone()),
            epoch: self.epoch,
        }
    }

    fn loss_and_grads(&self, batch: &Batch<f32>) -> Result<(f64, Vec<Tensor4<f32>>)> {
        let mut ctx = Ctx::trainable(&self.params);
        let x = ctx.tape.constant(batch.input.clone());
        let target = ctx.tape.constant(batch.target.clone());
        let out = self.net.forward(&mut ctx, x)?;
        let loss = match self.cfg.loss {
            LossKind::Mse => ctx.tape.mse_loss(out, target)?,
            LossKind::L1 => ctx.tape.l1_loss(out, target)?,
        };
        let value = ctx.tape.scalar(loss) as f64;
        if !value.is_finite() {
            return Ok((value, Vec::new()));
        }
        let mut grads = ctx.tape.backward(loss)?;
        Ok((value, ctx.param_grads(&mut grads)))
    }

    /// Loss of the current weights on `batch`.
    pub fn loss(&self, batch: &Batch<f32>) -> Result<f64> {
        let mut ctx = Ctx::frozen(&self.params);
        let x = ctx.tape.constant(batch.input.clone());
        let target = ctx.tape.constant(batch.target.clone());
        let out = self.net.forward(&mut ctx, x)?;
        let loss = match self.cfg.loss {
            LossKind::Mse => ctx.tape.mse_loss(out, target)?,
            LossKind::L1 => ctx.tape.l1_loss(out, target)?,
        };
        Ok(ctx.tape.scalar(loss) as f64)
    }

    /// One optimiser step; returns the loss before the update.
    pub fn step(&mut self, batch: &Batch<f32>, lr: f64) -> Result<f64> {
        let (loss, grads) = self.loss_and_grads(batch)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss {loss} at epoch {}", self.epoch)));
        }
        self.optimizer.step(lr, self.params.values_mut(), &grads, &mut self.adam)?;
        Ok(loss)
    }

    /// Runs the epoch with index `self.epoch`, then advances it.
    pub fn run_epoch(&mut self, scenes: &[HsiCube], mask: &Mask2D, spec: &DispersionSpec, opts: &BatchOptions) -> Result<Vec<StepRecord>> {
        let lr = self.cfg.lr_at(self.epoch);
        let steps = self.cfg.steps_per_epoch(scenes.len());
        let mut records = Vec::with_capacity(steps);
        for step in 0..steps {
            let seed = mix_seed(self.cfg.seed, self.epoch as u64, step as u64);
            let batch = make_batch::<f32>(scenes, mask, spec, opts, seed)?;
            let loss = self.step(&batch, lr)?;
            records.push(StepRecord {
                epoch: self.epoch,
                step,
                lr,
                loss,
            });
        }
        self.epoch += 1;
        Ok(records)
    }

    pub fn reconstruct(&self, input: &Tensor4<f32>) -> Result<Tensor4<f32>> {
        self.net.reconstruct(&self.params, input)
    }
}

pub const LOSS_CSV_HEADER: &str = "epoch,step,lr,loss";

fn loss_rows(records: &[StepRecord]) -> String {
    let mut s = String::new();
    for r in records {
        let _ = writeln!(s, "{},{},{:e},{:.9e}", r.epoch, r.step, r.lr, r.loss);
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutputs {
    pub checkpoint: PathBuf,
    pub checkpoint_blob: PathBuf,
    pub loss_csv: PathBuf,
    pub epochs_completed: usize,
    pub final_loss: Option<f64>,
}

/// Trains to `cfg.train.epochs`, checkpointing after every epoch. With
/// `resume`, continues from `out_dir/checkpoint` when present.
pub fn train(cfg: &RunConfig, data: &Dataset, out_dir: &Path, resume: bool) -> Result<TrainOutputs> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::Missing("training scenes".into()));
    }
    let bands = data.train[0].bands;
    if bands != cfg.model.bands {
        return Err(Error::Config(format!("data has {bands} bands, model expects {}", cfg.model.bands)));
    }
    let spec = cfg.data.dispersion(bands);
    let mask = cfg.data.mask(cfg.train.crop, cfg.train.crop)?;
    let opts = cfg.batch_options();
    let ckpt_path = out_dir.join("checkpoint");
    let (ckpt_json, ckpt_bin) = io::paired_paths(&ckpt_path);
    let loss_csv = out_dir.join("loss.csv");

    let mut trainer = if resume && ckpt_json.exists() {
        let ckpt = io::load_checkpoint(&ckpt_path, |m| Ok(Cfsdcn::new::<f32>(m, 0)?.1))?;
        if ckpt.config != cfg.model {
            return Err(Error::Config("checkpoint model configuration differs from the run configuration".into()));
        }
        Trainer::from_checkpoint(ckpt, &cfg.train)?
    } else {
        Trainer::new(&cfg.model, &cfg.train)?
    };

    let mut csv = format!("{LOSS_CSV_HEADER}\n");
    if trainer.epoch > 0 {
        let old = std::fs::read_to_string(&loss_csv).unwrap_or_default();
        for line in old.lines().skip(1) {
            let epoch = line.split(',').next().and_then(|e| e.parse::<usize>().ok());
            if epoch.is_some_and(|e| e < trainer.epoch) {
                csv.push_str(line);
                csv.push('\n');
            }
        }
    }
    io::write_bytes(&loss_csv, csv.as_bytes())?;

    let mut final_loss = None;
    while trainer.epoch < cfg.train.epochs {
        let records = match trainer.run_epoch(&data.train, &mask, &spec, &opts) {
            Ok(r) => r,
            Err(e @ Error::NonFinite(_)) => {
                let dump = NonFiniteDump::capture(&trainer, &e);
                io::write_json(&out_dir.join("nonfinite_dump.json"), &dump)?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        final_loss = records.last().map(|r| r.loss);
        csv.push_str(&loss_rows(&records));
        io::write_bytes(&loss_csv, csv.as_bytes())?;
        io::save_checkpoint(&ckpt_path, &trainer.checkpoint())?;
    }
    if !ckpt_json.exists() {
        io::save_checkpoint(&ckpt_path, &trainer.checkpoint())?;
    }
    Ok(TrainOutputs {
        checkpoint: ckpt_json,
        checkpoint_blob: ckpt_bin,
        loss_csv,
        epochs_completed: trainer.epoch,
        final_loss,
    })
}

#[derive(Clone, Debug, Serialize)]
struct NonFiniteDump {
    error: String,
    epoch: usize,
    adam_step: u64,
    lr: f64,
    param_max_abs: Vec<(String, f32)>,
    non_finite_params: Vec<String>,
}

impl NonFiniteDump {
    fn capture(t: &Trainer, e: &Error) -> Self {
        let names = t.params.names();
        let values = t.params.values();
        NonFiniteDump {
            error: e.to_string(),
            epoch: t.epoch,
            adam_step: t.adam.step,
            lr: t.cfg.lr_at(t.epoch),
            param_max_abs: names.iter().zip(values).map(|(n, v)| (n.clone(), v.max_abs())).collect(),
            non_finite_params: names
                .iter()
                .zip(values)
                .filter(|(_, v)| !v.is_finite())
                .map(|(n, _)| n.clone())
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMetrics {
    pub scene_id: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub scenes: Vec<SceneMetrics>,
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
    pub params: Option<usize>,
    pub gflops: Option<f64>,
    pub input_shape: Option<[usize; 4]>,
    pub runtime_secs: f64,
}

impl MetricReport {
    pub fn from_scenes(scenes: Vec<SceneMetrics>, runtime_secs: f64) -> Self {
        let n = scenes.len().max(1) as f64;
        MetricReport {
            mean_psnr_db: scenes.iter().map(|s| s.psnr_db).sum::<f64>() / n,
            mean_ssim: scenes.iter().map(|s| s.ssim).sum::<f64>() / n,
            scenes,
            params: None,
            gflops: None,
            input_shape: None,
            runtime_secs,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("scene_id,psnr_db,ssim\n");
        for m in &self.scenes {
            let _ = writeln!(s, "{},{:.6},{:.6}", m.scene_id, m.psnr_db, m.ssim);
        }
        let _ = writeln!(s, "mean,{:.6},{:.6}", self.mean_psnr_db, self.mean_ssim);
        s
    }

    pub fn write(&self, csv: &Path, json: &Path) -> Result<()> {
        io::write_bytes(csv, self.to_csv().as_bytes())?;
        io::write_json(json, self)
    }
}

/// Per-band mean intensities of a reconstruction and its reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralCurve {
    pub scene_id: String,
    pub reference: Vec<f64>,
    pub reconstruction: Vec<f64>,
}

pub fn spectral_curve(scene_id: &str, recon: &HsiCube, reference: &HsiCube) -> SpectralCurve {
    let mean = |c: &HsiCube, b: usize| c.band(b).iter().map(|&v| v as f64).sum::<f64>() / (c.h * c.w) as f64;
    SpectralCurve {
        scene_id: scene_id.into(),
        reference: (0..reference.bands).map(|b| mean(reference, b)).collect(),
        reconstruction: (0..recon.bands).map(|b| mean(recon, b)).collect(),
    }
}

pub fn spectral_curves_csv(curves: &[SpectralCurve]) -> String {
    let mut s = String::from("scene_id,band,reference,reconstruction\n");
    for c in curves {
        for (b, (r, x)) in c.reference.iter().zip(&c.reconstruction).enumerate() {
            let _ = writeln!(s, "{},{b},{r:.6},{x:.6}", c.scene_id);
        }
    }
    s
}

/// How test measurements are simulated.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalSetup<'a> {
    pub mask: &'a Mask2D,
    pub spec: &'a DispersionSpec,
    pub noise: NoiseSpec,
    pub mask_mode: MaskMode,
    pub psnr_mode: PsnrMode,
    pub seed: u64,
}

/// Metrics of `reconstruct` over `scenes`, evaluated in parallel and
/// aggregated in scene order.
pub fn evaluate_with<F>(scenes: &[HsiCube], setup: &EvalSetup<'_>, reconstruct: F) -> Result<(MetricReport, Vec<SpectralCurve>)>
where
    F: Fn(&Tensor4<f32>) -> Result<Tensor4<f32>> + Sync,
{
    if scenes.is_empty() {
        return Err(Error::Missing("no test scenes".into()));
    }
    let start = Instant::now();
    let results = scenes
        .par_iter()
        .enumerate()
        .map(|(i, scene)| -> Result<(SceneMetrics, SpectralCurve)> {
            if setup.mask.h < scene.h || setup.mask.w < scene.w {
                return Err(Error::shape(
                    "evaluate",
                    format!("mask {}x{} smaller than scene {}x{}", setup.mask.h, setup.mask.w, scene.h, scene.w),
                ));
            }
            let mask = setup.mask.crop(0, 0, scene.h, scene.w)?;
            let input = sample_input::<f32>(scene, &mask, setup.spec, setup.noise, setup.mask_mode, mix_seed(setup.seed, i as u64, 0))?;
            let out = reconstruct(&input)?;
            let recon = HsiCube::from_tensor(&out, 0);
            let id = format!("scene{:02}", i + 1);
            let metrics = SceneMetrics {
                scene_id: id.clone(),
                psnr_db: psnr_with(&recon, scene, 1.0, setup.psnr_mode)?,
                ssim: ssim(&recon, scene)?,
            };
            Ok((metrics, spectral_curve(&id, &recon, scene)))
        })
        .collect::<Result<Vec<_>>>()?;
    let (metrics, curves): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    Ok((MetricReport::from_scenes(metrics, start.elapsed().as_secs_f64()), curves))
}

/// The scaled shift-back cube carried in the first half of a network input.
pub fn shift_back_baseline(input: &Tensor4<f32>) -> Result<Tensor4<f32>> {
    let [n, c, h, w] = input.shape();
    if c % 2 != 0 {
        return Err(Error::shape("baseline", format!("input has odd channel count {c}")));
    }
    let bands = c / 2;
    Ok(Tensor4::from_fn([n, bands, h, w], |[i, b, y, x]| input.at([i, b, y, x])))
}

pub fn evaluate_model(
    net: &Cfsdcn,
    params: &ParamStore<f32>,
    scenes: &[HsiCube],
    setup: &EvalSetup<'_>,
) -> Result<(MetricReport, Vec<SpectralCurve>)> {
    let (mut report, curves) = evaluate_with(scenes, setup, |x| net.reconstruct(params, x))?;
    let shape = net.input_shape(scenes[0].h, scenes[0].w);
    report.params = Some(params.num_scalars());
    report.gflops = Some(net.count_flops(params, shape)? as f64 / 1e9);
    report.input_shape = Some(shape);
    Ok((report, curves))
}

/// Reference spatial size for reported FLOPs.
pub const FLOPS_REFERENCE_SIZE: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub lcs_kernel: usize,
    pub psnr_db: f64,
    pub ssim: f64,
    pub params: usize,
    pub gflops: f64,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("lcs_kernel,psnr_db,ssim,params,gflops\n");
    for r in rows {
        let _ = writeln!(s, "{},{:.6},{:.6},{},{:.6}", r.lcs_kernel, r.psnr_db, r.ssim, r.params, r.gflops);
    }
    s
}

/// Trains and evaluates one model per LCS kernel size. FLOPs are reported at
/// a `FLOPS_REFERENCE_SIZE` square input.
pub fn lcs_ablation(base: &RunConfig, kernels: &[usize], data: &Dataset, out_dir: &Path) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(kernels.len());
    for &k in kernels {
        let mut cfg = base.clone();
        cfg.model.lcs_kernel = k;
        cfg.model.variant = format!("{}-lcs{k}", base.model.variant);
        let dir = out_dir.join(format!("lcs{k}"));
        let outputs = train(&cfg, data, &dir, false)?;
        let ckpt = io::load_checkpoint(&outputs.checkpoint, |m| Ok(Cfsdcn::new::<f32>(m, 0)?.1))?;
        let (net, _) = Cfsdcn::new::<f32>(&ckpt.config, 0)?;
        let h = data.test.first().map(|s| s.h).ok_or_else(|| Error::Missing("test scenes".into()))?;
        let mask = cfg.data.mask(h, h)?;
        let spec = cfg.data.dispersion(cfg.model.bands);
        let setup = EvalSetup {
            mask: &mask,
            spec: &spec,
            noise: cfg.data.noise,
            mask_mode: cfg.data.mask_mode,
            psnr_mode: PsnrMode::PerBand,
            seed: cfg.train.seed,
        };
        let (report, _) = evaluate_model(&net, &ckpt.params, &data.test, &setup)?;
        report.write(&dir.join("metrics.csv"), &dir.join("metrics.json"))?;
        let reference = net.input_shape(FLOPS_REFERENCE_SIZE, FLOPS_REFERENCE_SIZE);
        rows.push(AblationRow {
            lcs_kernel: k,
            psnr_db: report.mean_psnr_db,
            ssim: report.mean_ssim,
            params: ckpt.params.num_scalars(),
            gflops: net.count_flops(&ckpt.params, reference)? as f64 / 1e9,
        });
    }
    io::write_bytes(&out_dir.join("lcs_ablation.csv"), ablation_csv(&rows).as_bytes())?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_halves_every_fifty_epochs() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0), 4e-4);
        assert_eq!(cfg.lr_at(49), 4e-4);
        assert_eq!(cfg.lr_at(50), 2e-4);
        assert!((cfg.lr_at(101) - 1e-4).abs() < 1e-18);
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let ok = "[model]\nchannels = 16\nblocks = [1, 1, 1]\nbands = 8\n[train]\ncrop = 64\n";
        let cfg = RunConfig::from_toml(ok).unwrap();
        assert_eq!(cfg.model.depth, 2);
        assert_eq!(cfg.train.batch_size, 5);
        let typo = "[model]\nchannels = 16\nblocks = [1, 1, 1]\nchanels = 3\n";
        assert_eq!(RunConfig::from_toml(typo).unwrap_err().kind(), "config");
        let bad_crop = "[model]\nchannels = 16\nblocks = [1, 1, 1]\n[train]\ncrop = 30\n";
        assert!(RunConfig::from_toml(bad_crop).is_err());
    }

    #[test]
    fn config_toml_round_trip() {
        let mut cfg = RunConfig::desk_scale();
        cfg.data.noise = NoiseSpec::Shot { bits: 11 };
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn report_csv_has_summary_row() {
        let r = MetricReport::from_scenes(
            vec![
                SceneMetrics {
                    scene_id: "a".into(),
                    psnr_db: 30.0,
                    ssim: 0.8,
                },
                SceneMetrics {
                    scene_id: "b".into(),
                    psnr_db: 20.0,
                    ssim: 0.6,
                },
            ],
            0.0,
        );
        assert_eq!(r.mean_psnr_db, 25.0);
        assert!((r.mean_ssim - 0.7).abs() < 1e-12);
        assert!(r.to_csv().ends_with("mean,25.000000,0.700000\n"));
    }
}
