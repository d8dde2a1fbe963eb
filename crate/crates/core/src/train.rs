//! End-to-end optimization: photometric + total-variation loss, Adam
//! updates with split learning rates and exponential decay, and the
//! alpha-mask refresh schedule.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::appearance::Model;
use crate::autodiff::{Activation, GradTensor, Tape};
use crate::error::{Error, Result};
use crate::field::{update_alpha_mask, AlphaMask, VMGrid};
use crate::render::{composite_batch, render_image, Ray, RayBundle, RenderConfig};
use crate::scene_io::{psnr, save_checkpoint, SceneDataset};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_rays: usize,
    /// Learning rate for grid factors.
    pub lr_grid: f64,
    /// Learning rate for network weights and illumination codes.
    pub lr_network: f64,
    pub lr_decay_factor: f64,
    /// Iterations over which the decay factor is reached; 0 means the
    /// full run length.
    pub lr_decay_span: usize,
    /// λ: weight of the TV regularizer against the photometric term.
    pub tv_weight: f64,
    /// λ1: vector-factor TV sub-weight.
    pub tv_vector_weight: f64,
    /// λ2: matrix-factor TV sub-weight.
    pub tv_matrix_weight: f64,
    pub mask_update_iters: Vec<usize>,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 100_000,
            batch_rays: 5000,
            lr_grid: 0.02,
            lr_network: 1e-3,
            lr_decay_factor: 0.1,
            lr_decay_span: 0,
            tv_weight: 1.0,
            tv_vector_weight: 0.01,
            tv_matrix_weight: 0.01,
            mask_update_iters: vec![1000, 2000, 3000, 4000, 5000, 6000, 7000],
            seed: 0,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_rays == 0 {
            return Err(Error::Config("batch_rays must be >= 1".into()));
        }
        for (name, v) in [
            ("lr_grid", self.lr_grid),
            ("lr_network", self.lr_network),
            ("tv_weight", self.tv_weight),
            ("tv_vector_weight", self.tv_vector_weight),
            ("tv_matrix_weight", self.tv_matrix_weight),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Mean over all ray-channel entries of the squared error.
pub fn photometric_loss(tape: &Tape, pred: &GradTensor, gt: &GradTensor) -> Result<GradTensor> {
    if pred.shape() != gt.shape() {
        return Err(Error::dim(format!(
            "photometric batch shapes differ: {:?} vs {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    let diff = tape.sub(pred, gt)?;
    tape.mean_all(&tape.hadamard(&diff, &diff)?)
}

const TV_EPS: f64 = 1e-8;

fn tv_term(tape: &Tape, t: &GradTensor, shape3: Option<[usize; 3]>) -> Result<GradTensor> {
    // sum over axis-adjacent squared differences, smoothed square root
    let mut total: Option<GradTensor> = None;
    let views: Vec<(GradTensor, usize)> = match shape3 {
        None => vec![(t.clone(), 1)],
        Some(s) => vec![(tape.reshape(t, &s)?, 1), (tape.reshape(t, &s)?, 2)],
    };
    for (view, axis) in views {
        let n = view.shape()[axis];
        if n < 2 {
            continue;
        }
        let a = tape.narrow(&view, axis, 0, n - 1)?;
        let b = tape.narrow(&view, axis, 1, n - 1)?;
        let d = tape.sub(&b, &a)?;
        let sq = tape.hadamard(&d, &d)?;
        let smoothed = tape.affine(&sq, 1.0, TV_EPS)?;
        let root = tape.unary(&smoothed, Activation::Sqrt)?;
        let s = tape.sum_all(&root)?;
        total = Some(match total {
            None => s,
            Some(acc) => tape.add(&acc, &s)?,
        });
    }
    Ok(total.unwrap_or_else(|| GradTensor::scalar(0.0)))
}

/// Total-variation regularizer over every factor of the grid:
/// `(1/P) Σ (λ1·√(Δ²V + ε) + λ2·√(Δ²M + ε))` with `P` the total factor
/// parameter count. Matrix factors are penalized along both plane axes.
pub fn tv_loss(tape: &Tape, grid: &VMGrid, lambda_v: f64, lambda_m: f64) -> Result<GradTensor> {
    let mut param_count = 0usize;
    let mut vec_total: Option<GradTensor> = None;
    let mut mat_total: Option<GradTensor> = None;
    for factors in [&grid.density, &grid.appearance] {
        for (m, f) in factors.iter().enumerate() {
            param_count += f.vector.numel() + f.matrix.numel();
            let v = tv_term(tape, &f.vector, None)?;
            vec_total = Some(match vec_total {
                None => v,
                Some(acc) => tape.add(&acc, &v)?,
            });
            let (a, b) = crate::field::plane_axes(m);
            let r = f.matrix.shape()[0];
            let shape3 = [r, grid.resolution[a], grid.resolution[b]];
            let mt = tv_term(tape, &f.matrix, Some(shape3))?;
            mat_total = Some(match mat_total {
                None => mt,
                Some(acc) => tape.add(&acc, &mt)?,
            });
        }
    }
    let scale = 1.0 / param_count.max(1) as f64;
    let v = tape.affine(&vec_total.unwrap(), lambda_v * scale, 0.0)?;
    let m = tape.affine(&mat_total.unwrap(), lambda_m * scale, 0.0)?;
    tape.add(&v, &m)
}

/// Adam with per-parameter moment accumulators.
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step_count: u64,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(params: &[(String, GradTensor)]) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            step_count: 0,
            moments: params
                .iter()
                .map(|(_, t)| (vec![0.0; t.numel()], vec![0.0; t.numel()]))
                .collect(),
        }
    }

    /// One update over all parameters; `lrs[i]` is the rate for `params[i]`.
    /// Every parameter must have a populated gradient.
    pub fn step(&mut self, params: &[(String, GradTensor)], lrs: &[f64]) -> Result<()> {
        if params.len() != self.moments.len() || params.len() != lrs.len() {
            return Err(Error::contract("optimizer state misaligned with params"));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (((name, p), (m, v)), &lr) in params.iter().zip(self.moments.iter_mut()).zip(lrs) {
            let grad = p.grad().ok_or_else(|| {
                Error::contract(format!("parameter '{name}' has no gradient"))
            })?;
            if grad.len() != m.len() {
                return Err(Error::contract(format!(
                    "parameter '{name}' gradient length changed"
                )));
            }
            let mut vals = p.to_vec();
            for i in 0..vals.len() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                vals[i] -= lr * mh / (vh.sqrt() + self.eps);
            }
            p.set_values(&vals)?;
        }
        Ok(())
    }

    pub fn to_blob(&self) -> crate::scene_io::OptBlob {
        crate::scene_io::OptBlob {
            step: self.step_count,
            moments: self.moments.clone(),
        }
    }

    pub fn from_blob(blob: crate::scene_io::OptBlob) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            step_count: blob.step,
            moments: blob.moments,
        }
    }
}

/// One metrics log line.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsRecord {
    pub iteration: usize,
    pub loss: f64,
    pub psnr: f64,
}

pub struct TrainReport {
    pub records: Vec<MetricsRecord>,
    pub final_loss: f64,
    pub mask: Option<AlphaMask>,
    pub optimizer: Adam,
}

/// Total training loss for one sampled bundle, returned with its
/// photometric part: `(photometric + λ·TV, photometric)`.
pub fn batch_loss_parts(
    tape: &Tape,
    model: &Model,
    bundle: &RayBundle,
    gt: &GradTensor,
    cfg: &TrainConfig,
    background: [f64; 3],
) -> Result<(GradTensor, GradTensor)> {
    let sigma = model.grid.density_batch(tape, &bundle.positions)?;
    let radiance = model.radiance_batch(tape, &bundle.positions, &bundle.dirs, &bundle.illum)?;
    let pred = composite_batch(tape, &sigma, &radiance, bundle, background)?;
    let photo = photometric_loss(tape, &pred, gt)?;
    if cfg.tv_weight == 0.0 {
        return Ok((photo.clone(), photo));
    }
    let tv = tv_loss(tape, &model.grid, cfg.tv_vector_weight, cfg.tv_matrix_weight)?;
    let total = tape.add(&photo, &tape.affine(&tv, cfg.tv_weight, 0.0)?)?;
    Ok((total, photo))
}

/// Total training loss for one sampled bundle: photometric + λ·TV.
pub fn batch_loss(
    tape: &Tape,
    model: &Model,
    bundle: &RayBundle,
    gt: &GradTensor,
    cfg: &TrainConfig,
    background: [f64; 3],
) -> Result<GradTensor> {
    Ok(batch_loss_parts(tape, model, bundle, gt, cfg, background)?.0)
}

pub struct TrainOptions<'a> {
    pub metrics_path: Option<&'a Path>,
    /// Where to write the diagnostic snapshot if the loss goes non-finite,
    /// together with the config echo stored in it.
    pub snapshot: Option<(PathBuf, String)>,
}

impl Default for TrainOptions<'_> {
    fn default() -> Self {
        TrainOptions {
            metrics_path: None,
            snapshot: None,
        }
    }
}

struct PixelRay {
    ray: Ray,
    illum: usize,
    gt: [f64; 3],
}

fn collect_rays(dataset: &SceneDataset) -> Result<Vec<PixelRay>> {
    let mut out = Vec::new();
    for frame in &dataset.frames {
        let cam = &frame.camera;
        let rays = crate::render::generate_rays(
            cam,
            &crate::render::frame_pixels(cam.width, cam.height),
        )?;
        for (i, ray) in rays.into_iter().enumerate() {
            out.push(PixelRay {
                ray,
                illum: frame.illumination,
                gt: frame.image.pixels[i],
            });
        }
    }
    Ok(out)
}

fn psnr_from_mse(mse: f64) -> f64 {
    if mse < 1e-12 {
        120.0
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// Jointly optimize grid factors and network parameters on random ray
/// batches; refreshes the alpha mask on the configured schedule and emits
/// periodic metrics records. Deterministic for a fixed seed.
pub fn train(
    model: &Model,
    dataset: &SceneDataset,
    render_cfg: &RenderConfig,
    cfg: &TrainConfig,
    options: TrainOptions,
) -> Result<TrainReport> {
    cfg.validate()?;
    if dataset.frames.is_empty() {
        return Err(Error::contract("training dataset is empty"));
    }
    let pixel_rays = collect_rays(dataset)?;
    let params = model.named_params();
    let mut adam = Adam::new(&params);
    let (near, far) = (
        dataset.frames[0].camera.near,
        dataset.frames[0].camera.far,
    );
    let decay_span = if cfg.lr_decay_span == 0 {
        cfg.iterations.max(1)
    } else {
        cfg.lr_decay_span
    };
    let delta_ref = (far - near) / render_cfg.samples_per_ray as f64;

    let mut writer = match options.metrics_path {
        Some(p) => {
            if let Some(parent) = p.parent() {
                if !parent.as_os_str().is_empty() {
                    fs::create_dir_all(parent)?;
                }
            }
            Some(std::io::BufWriter::new(fs::File::create(p)?))
        }
        None => None,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut mask: Option<AlphaMask> = None;
    let mut records = Vec::new();
    let mut last_loss = f64::NAN;

    for it in 0..cfg.iterations {
        let decay = cfg
            .lr_decay_factor
            .powf(it as f64 / decay_span as f64);
        let lrs: Vec<f64> = params
            .iter()
            .map(|(name, _)| {
                if name.starts_with("grid.") {
                    cfg.lr_grid * decay
                } else {
                    cfg.lr_network * decay
                }
            })
            .collect();

        let mut batch_rays = Vec::with_capacity(cfg.batch_rays);
        let mut illum = Vec::with_capacity(cfg.batch_rays);
        let mut gt = Vec::with_capacity(cfg.batch_rays * 3);
        for _ in 0..cfg.batch_rays {
            let idx = rng.gen_range(0..pixel_rays.len());
            let pr = &pixel_rays[idx];
            batch_rays.push(pr.ray);
            illum.push(pr.illum);
            gt.extend_from_slice(&pr.gt);
        }
        let gt = GradTensor::constant(&[cfg.batch_rays, 3], gt)?;

        let bundle = {
            let mut jit_closure = || rng.gen::<f64>();
            let jit: Option<&mut dyn FnMut() -> f64> = if render_cfg.stratified_jitter {
                Some(&mut jit_closure)
            } else {
                None
            };
            RayBundle::build(
                &batch_rays,
                &illum,
                render_cfg,
                mask.as_ref(),
                &model.grid.bounds,
                near,
                far,
                jit,
            )?
        };

        let tape = Tape::new();
        let (loss_val, photo_val) = if bundle.num_samples() == 0 {
            // nothing to differentiate; the whole batch composites to background
            let mut mse = 0.0;
            gt.with_values(|g| {
                for (i, v) in g.iter().enumerate() {
                    let d = render_cfg.background[i % 3] - v;
                    mse += d * d;
                }
                mse /= g.len() as f64;
            });
            (mse, mse)
        } else {
            let (loss, photo_t) =
                batch_loss_parts(&tape, model, &bundle, &gt, cfg, render_cfg.background)?;
            let v = loss.value();
            let photo = photo_t.value();
            if !v.is_finite() {
                if let Some((path, echo)) = &options.snapshot {
                    save_checkpoint(&params, echo, Some(&adam.to_blob()), path)?;
                    return Err(Error::NonFiniteLoss {
                        iteration: it,
                        snapshot: path.clone(),
                    });
                }
                return Err(Error::NonFiniteLoss {
                    iteration: it,
                    snapshot: PathBuf::from("<no snapshot configured>"),
                });
            }
            for (_, p) in &params {
                p.zero_grad();
            }
            tape.backward(&loss)?;
            adam.step(&params, &lrs)?;
            (v, photo)
        };
        last_loss = loss_val;

        if cfg.mask_update_iters.contains(&(it + 1)) {
            let base = mask.take().unwrap_or_else(|| {
                AlphaMask::all_occupied(model.grid.resolution, model.grid.bounds, 0.01)
            });
            mask = Some(update_alpha_mask(&model.grid, &base, delta_ref)?);
        }

        let should_log =
            it == 0 || (it + 1) % cfg.log_every.max(1) == 0 || it + 1 == cfg.iterations;
        if should_log {
            let rec = MetricsRecord {
                iteration: it,
                loss: loss_val,
                psnr: psnr_from_mse(photo_val),
            };
            if let Some(w) = writer.as_mut() {
                let line = serde_json::to_string(&rec)
                    .map_err(|e| Error::Contract(format!("metrics serialization: {e}")))?;
                writeln!(w, "{line}")?;
            }
            records.push(rec);
        }
    }
    if let Some(mut w) = writer {
        w.flush()?;
    }
    Ok(TrainReport {
        records,
        final_loss: last_loss,
        mask,
        optimizer: adam,
    })
}

/// Refresh an occupancy mask from the model's current density field.
pub fn refreshed_mask(
    model: &Model,
    render_cfg: &RenderConfig,
    near: f64,
    far: f64,
    threshold: f64,
) -> Result<AlphaMask> {
    let base = AlphaMask::all_occupied(model.grid.resolution, model.grid.bounds, threshold);
    let delta_ref = (far - near) / render_cfg.samples_per_ray as f64;
    update_alpha_mask(&model.grid, &base, delta_ref)
}

/// Mean held-out PSNR: renders every frame (8-bit quantized, like the PNGs
/// the renderer would ship) and compares against the stored images.
pub fn eval_mean_psnr(
    model: &Model,
    dataset: &SceneDataset,
    render_cfg: &RenderConfig,
    mask: Option<&AlphaMask>,
) -> Result<f64> {
    let mut total = 0.0;
    for frame in &dataset.frames {
        let img = render_image(model, &frame.camera, render_cfg, mask, frame.illumination)?;
        total += psnr(&img.quantized(), &frame.image)?;
    }
    Ok(total / dataset.frames.len().max(1) as f64)
}
