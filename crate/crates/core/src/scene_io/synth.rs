use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::render::{frame_pixels, generate_rays, Camera};

use super::dataset::{Frame, SceneDataset};
use super::image::ImageF64;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SphereSpec {
    pub center: [f64; 3],
    pub radius: f64,
    /// Diffuse albedo ρ_d.
    pub albedo: [f64; 3],
    /// Specular strength ρ_s.
    #[serde(default)]
    pub specular: f64,
    /// Blinn-Phong exponent α_s.
    #[serde(default = "default_shininess")]
    pub shininess: f64,
}

fn default_shininess() -> f64 {
    32.0
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Light {
    /// `direction` is the direction the light travels (toward the scene).
    Directional {
        direction: [f64; 3],
        intensity: [f64; 3],
    },
    Point {
        position: [f64; 3],
        intensity: [f64; 3],
    },
}

impl Light {
    fn intensity(&self) -> [f64; 3] {
        match self {
            Light::Directional { intensity, .. } | Light::Point { intensity, .. } => *intensity,
        }
    }
}

/// Analytic scene: spheres shaded with Lambertian + Blinn-Phong terms under
/// one or more lighting conditions, ray-traced exactly (no shadows or
/// interreflection, so every pixel has a closed form).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSceneSpec {
    pub spheres: Vec<SphereSpec>,
    /// Single-condition shorthand (S = 1).
    #[serde(default)]
    pub lights: Vec<Light>,
    /// Multi-illumination mode: one light set per condition (S = len).
    #[serde(default)]
    pub illuminations: Vec<Vec<Light>>,
    #[serde(default = "default_ambient")]
    pub ambient: [f64; 3],
    #[serde(default = "default_background")]
    pub background: [f64; 3],
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_camera_distance")]
    pub camera_distance: f64,
    #[serde(default = "default_camera_angle_x")]
    pub camera_angle_x: f64,
}

fn default_ambient() -> [f64; 3] {
    [0.05; 3]
}

fn default_background() -> [f64; 3] {
    [1.0; 3]
}

fn default_camera_distance() -> f64 {
    4.0
}

fn default_camera_angle_x() -> f64 {
    0.6911112
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.spheres.is_empty() {
            return Err(Error::Config("scene needs at least one sphere".into()));
        }
        for s in &self.spheres {
            if s.radius <= 0.0 {
                return Err(Error::Config(format!("sphere radius {} must be > 0", s.radius)));
            }
        }
        for set in self.conditions() {
            for l in set {
                if l.intensity().iter().any(|&v| v < 0.0) {
                    return Err(Error::Config("light intensities must be >= 0".into()));
                }
            }
        }
        Ok(())
    }

    /// Lighting conditions; `illuminations` wins over the `lights` shorthand.
    pub fn conditions(&self) -> Vec<Vec<Light>> {
        if self.illuminations.is_empty() {
            vec![self.lights.clone()]
        } else {
            self.illuminations.clone()
        }
    }
}

fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = norm(v);
    [v[0] / n, v[1] / n, v[2] / n]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Nearest sphere hit along `origin + t·dir` with `t > 1e-9`.
fn nearest_hit(spheres: &[SphereSpec], origin: [f64; 3], dir: [f64; 3]) -> Option<(f64, usize)> {
    let mut best: Option<(f64, usize)> = None;
    for (i, s) in spheres.iter().enumerate() {
        let oc = [
            origin[0] - s.center[0],
            origin[1] - s.center[1],
            origin[2] - s.center[2],
        ];
        let b = dot(oc, dir);
        let c = dot(oc, oc) - s.radius * s.radius;
        let disc = b * b - c;
        if disc < 0.0 {
            continue;
        }
        let sq = disc.sqrt();
        for t in [-b - sq, -b + sq] {
            if t > 1e-9 && best.map_or(true, |(bt, _)| t < bt) {
                best = Some((t, i));
            }
        }
    }
    best
}

/// Closed-form shading for one camera ray:
/// `ambient·ρ_d + Σ_lights [ρ_d·max(0, n·ω) + ρ_s·max(0, n·h)^α]·L_i`,
/// clamped to [0,1]; misses return the background.
pub fn shade(
    spheres: &[SphereSpec],
    lights: &[Light],
    ambient: [f64; 3],
    background: [f64; 3],
    origin: [f64; 3],
    dir: [f64; 3],
) -> [f64; 3] {
    let Some((t, i)) = nearest_hit(spheres, origin, dir) else {
        return background;
    };
    let s = &spheres[i];
    let p = [
        origin[0] + t * dir[0],
        origin[1] + t * dir[1],
        origin[2] + t * dir[2],
    ];
    let n = normalize([
        p[0] - s.center[0],
        p[1] - s.center[1],
        p[2] - s.center[2],
    ]);
    let view = [-dir[0], -dir[1], -dir[2]];
    let mut c = [
        ambient[0] * s.albedo[0],
        ambient[1] * s.albedo[1],
        ambient[2] * s.albedo[2],
    ];
    for light in lights {
        let (omega, li) = match light {
            Light::Directional {
                direction,
                intensity,
            } => {
                let d = normalize(*direction);
                ([-d[0], -d[1], -d[2]], *intensity)
            }
            Light::Point {
                position,
                intensity,
            } => (
                normalize([position[0] - p[0], position[1] - p[1], position[2] - p[2]]),
                *intensity,
            ),
        };
        let ndl = dot(n, omega).max(0.0);
        let half = [omega[0] + view[0], omega[1] + view[1], omega[2] + view[2]];
        let spec = if norm(half) > 1e-12 {
            let h = normalize(half);
            s.specular * dot(n, h).max(0.0).powf(s.shininess)
        } else {
            0.0
        };
        for ch in 0..3 {
            c[ch] += (s.albedo[ch] * ndl + spec) * li[ch];
        }
    }
    [
        c[0].clamp(0.0, 1.0),
        c[1].clamp(0.0, 1.0),
        c[2].clamp(0.0, 1.0),
    ]
}

/// Camera-to-world pose at `eye` looking at the origin, world up +z.
pub fn look_at_origin(eye: [f64; 3]) -> [[f64; 4]; 4] {
    let backward = normalize(eye);
    let up = [0.0, 0.0, 1.0];
    let right = normalize(cross(up, backward));
    let cam_up = cross(backward, right);
    let mut pose = [[0.0; 4]; 4];
    for i in 0..3 {
        pose[i][0] = right[i];
        pose[i][1] = cam_up[i];
        pose[i][2] = backward[i];
        pose[i][3] = eye[i];
    }
    pose[3][3] = 1.0;
    pose
}

fn split_hash(seed: u64, split: &str) -> u64 {
    let mut h = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1);
    for b in split.bytes() {
        h = h.wrapping_mul(31).wrapping_add(b as u64);
    }
    h
}

/// Ray-trace `n_views` posed images on an upper-hemisphere orbit around the
/// origin. Deterministic per (spec.seed, split); illumination indices cycle
/// through the spec's conditions.
pub fn generate_scene(
    spec: &SyntheticSceneSpec,
    n_views: usize,
    resolution: usize,
    split: &str,
    near: f64,
    far: f64,
) -> Result<SceneDataset> {
    if n_views == 0 {
        return Err(Error::Config("n_views must be >= 1".into()));
    }
    spec.validate()?;
    let conditions = spec.conditions();
    let s_count = conditions.len();
    let mut rng = ChaCha8Rng::seed_from_u64(split_hash(spec.seed, split));
    let golden = 2.399963229728653; // radians

    let mut frames = Vec::with_capacity(n_views);
    for k in 0..n_views {
        let colat: f64 = rng.gen_range(0.45..1.25);
        let azim = k as f64 * golden + rng.gen_range(-0.15..0.15);
        let rho = spec.camera_distance;
        let eye = [
            rho * colat.sin() * azim.cos(),
            rho * colat.sin() * azim.sin(),
            rho * colat.cos(),
        ];
        let camera = Camera::from_angle_x(
            resolution,
            resolution,
            spec.camera_angle_x,
            look_at_origin(eye),
            near,
            far,
        )?;
        let illumination = k % s_count;
        let lights = &conditions[illumination];
        let rays = generate_rays(&camera, &frame_pixels(resolution, resolution))?;
        let pixels: Vec<[f64; 3]> = rays
            .par_iter()
            .map(|r| {
                shade(
                    &spec.spheres,
                    lights,
                    spec.ambient,
                    spec.background,
                    r.origin,
                    r.direction,
                )
            })
            .collect();
        frames.push(Frame {
            image: ImageF64 {
                width: resolution,
                height: resolution,
                pixels,
            },
            camera,
            illumination,
        });
    }
    Ok(SceneDataset {
        frames,
        split: split.to_string(),
        n_conditions: s_count,
    })
}
