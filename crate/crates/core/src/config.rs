//! Run configuration: a nestable key-value document (TOML) covering grid,
//! appearance, render, and training settings. Unknown keys are rejected;
//! missing keys fall back to the defaults recorded here.

use std::path::{Path, PathBuf};

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::appearance::{AblationVariant, AppearanceModel, AppearanceSpec, Model};
use crate::error::{Error, Result};
use crate::field::{Aabb, VMGrid};
use crate::render::RenderConfig;
use crate::scene_io::{CheckpointData, SyntheticSceneSpec};
use crate::train::TrainConfig;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSettings {
    pub resolution: [usize; 3],
    pub bounds_min: [f64; 3],
    pub bounds_max: [f64; 3],
    pub density_ranks: [usize; 3],
    pub appearance_ranks: [usize; 3],
    pub init_std: f64,
    pub alpha_threshold: f64,
}

impl Default for GridSettings {
    fn default() -> Self {
        GridSettings {
            resolution: [48, 48, 48],
            bounds_min: [-1.5; 3],
            bounds_max: [1.5; 3],
            density_ranks: [16, 16, 16],
            appearance_ranks: [48, 48, 48],
            init_std: 0.1,
            alpha_threshold: 0.01,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppearanceSettings {
    /// N_p: neural basis count.
    pub n_bases: usize,
    /// N_w: FiLM modulation width.
    pub film_width: usize,
    /// D: illumination embedding dimension.
    pub illum_dim: usize,
    /// L: positional encoding frequency levels.
    pub posenc_levels: usize,
    pub trunk_depth: usize,
    pub trunk_width: usize,
    pub integrator_width: usize,
    /// Also feed r(d) into the trunk in modes that modulate raw d.
    pub trunk_view_input: bool,
    /// Force the z^s path off even for multi-illumination data.
    pub disable_illum_codes: bool,
    pub leaky_slope: f64,
}

impl Default for AppearanceSettings {
    fn default() -> Self {
        AppearanceSettings {
            n_bases: 16,
            film_width: 32,
            illum_dim: 32,
            posenc_levels: 2,
            trunk_depth: 8,
            trunk_width: 256,
            integrator_width: 128,
            trunk_view_input: false,
            disable_illum_codes: false,
            leaky_slope: 0.01,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderSettings {
    pub samples_per_ray: usize,
    pub near: f64,
    pub far: f64,
    pub stratified_jitter: bool,
    pub background: [f64; 3],
}

impl Default for RenderSettings {
    fn default() -> Self {
        RenderSettings {
            samples_per_ray: 64,
            near: 2.0,
            far: 6.0,
            stratified_jitter: true,
            background: [1.0; 3],
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub variant: String,
    pub dataset: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub deterministic: bool,
    pub grid: GridSettings,
    pub appearance: AppearanceSettings,
    pub render: RenderSettings,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            variant: "full".to_string(),
            dataset: None,
            out_dir: None,
            deterministic: false,
            grid: GridSettings::default(),
            appearance: AppearanceSettings::default(),
            render: RenderSettings::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("reading {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)
            .map_err(|e| Error::Config(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        AblationVariant::parse(&self.variant)?;
        self.train.validate()?;
        if self.render.samples_per_ray < 2 {
            return Err(Error::Config("render.samples_per_ray must be >= 2".into()));
        }
        if self.render.near >= self.render.far {
            return Err(Error::Config("render.near must be < render.far".into()));
        }
        Ok(())
    }

    /// Exact serialized form, stored in checkpoints as the config echo.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("config serialize: {e}")))
    }

    pub fn ablation_variant(&self) -> AblationVariant {
        AblationVariant::parse(&self.variant).expect("validated variant")
    }

    pub fn render_config(&self, jitter: bool) -> RenderConfig {
        RenderConfig {
            samples_per_ray: self.render.samples_per_ray,
            stratified_jitter: jitter && self.render.stratified_jitter,
            background: self.render.background,
        }
    }

    /// Build a freshly initialized model for `n_conditions` lighting
    /// conditions, seeded from `self.seed`.
    pub fn build_model(&self, n_conditions: usize) -> Result<Model> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let grid = VMGrid::new(
            self.grid.resolution,
            Aabb::new(self.grid.bounds_min, self.grid.bounds_max),
            self.grid.density_ranks,
            self.grid.appearance_ranks,
            self.grid.init_std,
            &mut rng,
        )?;
        let spec = AppearanceSpec {
            feature_dim: self.grid.appearance_ranks.iter().sum(),
            n_bases: self.appearance.n_bases,
            film_width: self.appearance.film_width,
            illum_dim: self.appearance.illum_dim,
            n_conditions,
            use_illum_codes: !self.appearance.disable_illum_codes,
            posenc_levels: self.appearance.posenc_levels,
            trunk_depth: self.appearance.trunk_depth,
            trunk_width: self.appearance.trunk_width,
            integrator_width: self.appearance.integrator_width,
            trunk_view_input: self.appearance.trunk_view_input,
            variant: self.ablation_variant(),
            leaky_slope: self.appearance.leaky_slope,
        };
        let appearance = AppearanceModel::new(spec, &mut rng);
        Model::new(grid, appearance)
    }
}

/// Rebuild `(config, model)` from checkpoint contents. The number of
/// illumination conditions is inferred from the stored `illum.z` blob.
pub fn restore_model(data: &CheckpointData) -> Result<(RunConfig, Model)> {
    let cfg = RunConfig::parse(&data.config_echo)
        .map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;
    let n_conditions = data
        .params
        .iter()
        .find(|(name, _, _)| name == "illum.z")
        .map(|(_, shape, _)| shape[0])
        .unwrap_or(1);
    let model = cfg.build_model(n_conditions)?;
    let named = model.named_params();
    if named.len() != data.params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} parameters, model expects {}",
            data.params.len(),
            named.len()
        )));
    }
    let mut by_name: std::collections::HashMap<&str, &crate::autodiff::GradTensor> =
        named.iter().map(|(n, t)| (n.as_str(), t)).collect();
    for (name, shape, values) in &data.params {
        let tensor = by_name.remove(name.as_str()).ok_or_else(|| {
            Error::Checkpoint(format!("unexpected parameter '{name}' in checkpoint"))
        })?;
        if tensor.shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "parameter '{name}' shape {:?} does not match model {:?}",
                shape,
                tensor.shape()
            )));
        }
        tensor.set_values(values)?;
    }
    Ok((cfg, model))
}

/// Scene description file for `make-scene`: the analytic scene plus the
/// dataset layout to render.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFile {
    #[serde(default = "default_n_train")]
    pub n_train: usize,
    #[serde(default = "default_n_test")]
    pub n_test: usize,
    #[serde(default = "default_resolution")]
    pub resolution: usize,
    #[serde(default = "default_near")]
    pub near: f64,
    #[serde(default = "default_far")]
    pub far: f64,
    pub scene: SyntheticSceneSpec,
}

fn default_n_train() -> usize {
    20
}

fn default_n_test() -> usize {
    5
}

fn default_resolution() -> usize {
    64
}

fn default_near() -> f64 {
    2.0
}

fn default_far() -> f64 {
    6.0
}

impl SceneFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("reading {}: {e}", path.display())))?;
        let file: SceneFile = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("scene file parse error: {e}")))?;
        file.scene.validate()?;
        Ok(file)
    }
}
