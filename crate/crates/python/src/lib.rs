//! Python bindings: scene generation, training, rendering, evaluation, and
//! point queries against a trained model.

use std::path::{Path, PathBuf};

use pyo3::exceptions::PyRuntimeError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use glintfield::appearance::Model as CoreModel;
use glintfield::config::{restore_model, RunConfig, SceneFile};
use glintfield::field::AlphaMask;
use glintfield::render::render_image;
use glintfield::scene_io::{
    generate_scene, load_checkpoint, load_dataset, psnr, read_image, save_checkpoint,
    save_dataset, ssim, write_image,
};
use glintfield::train::{eval_mean_psnr, refreshed_mask, train as train_loop, TrainOptions};

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

/// Ray-trace a synthetic scene description (TOML) into a dataset directory.
/// Returns the number of frames written.
#[pyfunction]
#[pyo3(signature = (spec_path, out_dir, seed=None))]
fn make_scene(spec_path: &str, out_dir: &str, seed: Option<u64>) -> PyResult<usize> {
    let mut file = SceneFile::load(Path::new(spec_path)).map_err(err)?;
    if let Some(s) = seed {
        file.scene.seed = s;
    }
    let out = Path::new(out_dir);
    let mut total = 0;
    for (split, n) in [("train", file.n_train), ("test", file.n_test)] {
        if n == 0 {
            continue;
        }
        let ds = generate_scene(&file.scene, n, file.resolution, split, file.near, file.far)
            .map_err(err)?;
        save_dataset(&ds, out).map_err(err)?;
        total += ds.frames.len();
    }
    Ok(total)
}

/// Train a model and write checkpoint + metrics log. Returns a dict with
/// `checkpoint`, `metrics`, `final_loss`, and `iterations`.
#[pyfunction]
#[pyo3(signature = (dataset, out_dir, config_path=None, seed=None, variant=None, iterations=None, lr=None))]
fn train(
    py: Python<'_>,
    dataset: &str,
    out_dir: &str,
    config_path: Option<&str>,
    seed: Option<u64>,
    variant: Option<&str>,
    iterations: Option<usize>,
    lr: Option<f64>,
) -> PyResult<Py<PyDict>> {
    let mut cfg = match config_path {
        Some(p) => RunConfig::load(Path::new(p)).map_err(err)?,
        None => RunConfig::default(),
    };
    cfg.dataset = Some(PathBuf::from(dataset));
    if let Some(s) = seed {
        cfg.seed = s;
        cfg.train.seed = s;
    }
    if let Some(v) = variant {
        cfg.variant = v.to_string();
    }
    if let Some(it) = iterations {
        cfg.train.iterations = it;
    }
    if let Some(lr) = lr {
        cfg.train.lr_grid = lr;
        cfg.train.lr_network = lr;
    }
    cfg.validate().map_err(err)?;

    let out = PathBuf::from(out_dir);
    std::fs::create_dir_all(&out).map_err(err)?;
    let ds = load_dataset(
        Path::new(dataset),
        "train",
        cfg.render.near,
        cfg.render.far,
    )
    .map_err(err)?;
    let model = cfg.build_model(ds.n_conditions).map_err(err)?;
    let echo = cfg.to_toml().map_err(err)?;
    let metrics = out.join("metrics.jsonl");
    let report = train_loop(
        &model,
        &ds,
        &cfg.render_config(true),
        &cfg.train,
        TrainOptions {
            metrics_path: Some(&metrics),
            snapshot: Some((out.join("nan_snapshot.ckpt"), echo.clone())),
        },
    )
    .map_err(err)?;
    let ckpt = out.join("checkpoint_final.ckpt");
    save_checkpoint(
        &model.named_params(),
        &echo,
        Some(&report.optimizer.to_blob()),
        &ckpt,
    )
    .map_err(err)?;

    let result = PyDict::new(py);
    result.set_item("checkpoint", ckpt.display().to_string())?;
    result.set_item("metrics", metrics.display().to_string())?;
    result.set_item("final_loss", report.final_loss)?;
    result.set_item("iterations", cfg.train.iterations)?;
    Ok(result.into())
}

/// PSNR between two PNG files, in dB.
#[pyfunction]
fn psnr_files(a: &str, b: &str) -> PyResult<f64> {
    let ia = read_image(Path::new(a)).map_err(err)?.rgb;
    let ib = read_image(Path::new(b)).map_err(err)?.rgb;
    psnr(&ia, &ib).map_err(err)
}

/// Single-scale SSIM between two PNG files.
#[pyfunction]
fn ssim_files(a: &str, b: &str) -> PyResult<f64> {
    let ia = read_image(Path::new(a)).map_err(err)?.rgb;
    let ib = read_image(Path::new(b)).map_err(err)?.rgb;
    ssim(&ia, &ib).map_err(err)
}

/// A trained radiance field loaded from a checkpoint.
#[pyclass]
struct Model {
    config: RunConfig,
    model: CoreModel,
    mask: AlphaMask,
}

#[pymethods]
impl Model {
    /// Load a checkpoint written by `train`.
    #[staticmethod]
    fn load(checkpoint: &str) -> PyResult<Self> {
        let data = load_checkpoint(Path::new(checkpoint)).map_err(err)?;
        let (config, model) = restore_model(&data).map_err(err)?;
        let rc = config.render_config(false);
        let mask = refreshed_mask(
            &model,
            &rc,
            config.render.near,
            config.render.far,
            config.grid.alpha_threshold,
        )
        .map_err(err)?;
        Ok(Model {
            config,
            model,
            mask,
        })
    }

    fn variant(&self) -> String {
        self.model.variant().as_str().to_string()
    }

    fn num_parameters(&self) -> usize {
        self.model
            .named_params()
            .iter()
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Volume density at a world point.
    fn density(&self, x: [f64; 3]) -> PyResult<f64> {
        let tape = glintfield::autodiff::Tape::inference();
        Ok(self.model.grid.density_at(&tape, x).map_err(err)?.value())
    }

    /// Outgoing radiance at a world point along a unit view direction.
    #[pyo3(signature = (x, d, illumination=0))]
    fn radiance(&self, x: [f64; 3], d: [f64; 3], illumination: usize) -> PyResult<[f64; 3]> {
        let tape = glintfield::autodiff::Tape::inference();
        let rgb = self
            .model
            .radiance(&tape, x, d, illumination)
            .map_err(err)?
            .to_vec();
        Ok([rgb[0], rgb[1], rgb[2]])
    }

    /// Render a dataset split to PNG frames; returns the frame count.
    fn render_split(&self, dataset: &str, split: &str, out_dir: &str) -> PyResult<usize> {
        let ds = load_dataset(
            Path::new(dataset),
            split,
            self.config.render.near,
            self.config.render.far,
        )
        .map_err(err)?;
        let rc = self.config.render_config(false);
        let out = Path::new(out_dir);
        for (i, frame) in ds.frames.iter().enumerate() {
            let img = render_image(
                &self.model,
                &frame.camera,
                &rc,
                Some(&self.mask),
                frame.illumination,
            )
            .map_err(err)?;
            write_image(&img, &out.join(format!("render_{i:03}.png"))).map_err(err)?;
        }
        Ok(ds.frames.len())
    }

    /// Mean held-out PSNR over a dataset split.
    fn evaluate(&self, dataset: &str, split: &str) -> PyResult<f64> {
        let ds = load_dataset(
            Path::new(dataset),
            split,
            self.config.render.near,
            self.config.render.far,
        )
        .map_err(err)?;
        let rc = self.config.render_config(false);
        eval_mean_psnr(&self.model, &ds, &rc, Some(&self.mask)).map_err(err)
    }
}

#[pymodule]
fn glintfield_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(make_scene, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(psnr_files, m)?)?;
    m.add_function(wrap_pyfunction!(ssim_files, m)?)?;
    m.add_class::<Model>()?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
