//! Camera rays, point sampling with empty-space skipping, and the
//! differentiable volume integration `C = Σ T_x (1 - exp(-σ_x Δ_x)) L_x`
//! with `T_x = exp(-Σ_{j<x} σ_j Δ_j)`, composited over a background.

use rayon::prelude::*;
use std::sync::Arc;

use crate::appearance::Model;
use crate::autodiff::{Activation, GradTensor, Tape};
use crate::error::{Error, Result};
use crate::field::{Aabb, AlphaMask};
use crate::scene_io::ImageF64;

/// Pinhole camera with an OpenGL-style camera-to-world pose
/// (columns: right, up, backward; the camera looks down -z).
#[derive(Clone, Debug)]
pub struct Camera {
    pub width: usize,
    pub height: usize,
    /// Focal length in pixels.
    pub focal: f64,
    pub pose: [[f64; 4]; 4],
    pub near: f64,
    pub far: f64,
}

impl Camera {
    pub fn new(
        width: usize,
        height: usize,
        focal: f64,
        pose: [[f64; 4]; 4],
        near: f64,
        far: f64,
    ) -> Result<Self> {
        // the rotation block must be orthonormal
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| pose[k][i] * pose[k][j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > 1e-6 {
                    return Err(Error::contract(format!(
                        "camera pose rotation block is not orthonormal (col {} · col {} = {})",
                        i, j, dot
                    )));
                }
            }
        }
        Ok(Camera {
            width,
            height,
            focal,
            pose,
            near,
            far,
        })
    }

    /// Focal from the horizontal field of view: `0.5·W / tan(0.5·angle)`.
    pub fn from_angle_x(
        width: usize,
        height: usize,
        camera_angle_x: f64,
        pose: [[f64; 4]; 4],
        near: f64,
        far: f64,
    ) -> Result<Self> {
        let focal = 0.5 * width as f64 / (0.5 * camera_angle_x).tan();
        Camera::new(width, height, focal, pose, near, far)
    }

    pub fn camera_angle_x(&self) -> f64 {
        2.0 * (0.5 * self.width as f64 / self.focal).atan()
    }

    pub fn position(&self) -> [f64; 3] {
        [self.pose[0][3], self.pose[1][3], self.pose[2][3]]
    }

    fn rotate(&self, v: [f64; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for i in 0..3 {
            out[i] = self.pose[i][0] * v[0] + self.pose[i][1] * v[1] + self.pose[i][2] * v[2];
        }
        out
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Ray {
    pub origin: [f64; 3],
    pub direction: [f64; 3],
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

/// Rays through the centers of the given pixels.
pub fn generate_rays(cam: &Camera, pixels: &[(f64, f64)]) -> Result<Vec<Ray>> {
    let origin = cam.position();
    let mut rays = Vec::with_capacity(pixels.len());
    for &(u, v) in pixels {
        if u < 0.0 || u >= cam.width as f64 || v < 0.0 || v >= cam.height as f64 {
            return Err(Error::contract(format!(
                "pixel ({u}, {v}) outside {}x{} frame",
                cam.width, cam.height
            )));
        }
        let x = (u + 0.5 - 0.5 * cam.width as f64) / cam.focal;
        let y = -(v + 0.5 - 0.5 * cam.height as f64) / cam.focal;
        let dir = normalize(cam.rotate([x, y, -1.0]));
        rays.push(Ray {
            origin,
            direction: dir,
        });
    }
    Ok(rays)
}

/// All pixel coordinates of a frame in row-major order.
pub fn frame_pixels(width: usize, height: usize) -> Vec<(f64, f64)> {
    let mut px = Vec::with_capacity(width * height);
    for v in 0..height {
        for u in 0..width {
            px.push((u as f64, v as f64));
        }
    }
    px
}

#[derive(Clone, Copy, Debug)]
pub struct RenderConfig {
    pub samples_per_ray: usize,
    pub stratified_jitter: bool,
    pub background: [f64; 3],
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            samples_per_ray: 64,
            stratified_jitter: false,
            background: [1.0, 1.0, 1.0],
        }
    }
}

/// Ordered samples along one ray. Shading fields are filled by
/// [`SampleSet::compute_shading`] once densities are known.
#[derive(Clone, Debug, Default)]
pub struct SampleSet {
    pub ts: Vec<f64>,
    pub positions: Vec<[f64; 3]>,
    pub deltas: Vec<f64>,
    pub densities: Vec<f64>,
    pub transmittances: Vec<f64>,
    pub weights: Vec<f64>,
    /// Transmittance left after the last sample.
    pub residual: f64,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Fill transmittances and compositing weights from per-sample densities.
    pub fn compute_shading(&mut self, densities: &[f64]) {
        assert_eq!(densities.len(), self.len());
        self.densities = densities.to_vec();
        self.transmittances.clear();
        self.weights.clear();
        let mut t = 1.0;
        for (&sigma, &delta) in densities.iter().zip(&self.deltas) {
            self.transmittances.push(t);
            let alpha = 1.0 - (-sigma * delta).exp();
            self.weights.push(t * alpha);
            t *= (-sigma * delta).exp();
        }
        self.residual = t;
    }
}

/// Uniform (optionally jittered) samples along `ray`, clipped to the scene
/// bounds; samples falling in mask-empty voxels are dropped and their step
/// merges into the previous interval. A ray that misses the bounds yields an
/// empty set (the pixel composites to pure background).
pub fn sample_ray(
    ray: &Ray,
    cfg: &RenderConfig,
    mask: Option<&AlphaMask>,
    bounds: &Aabb,
    near: f64,
    far: f64,
    mut jitter: Option<&mut dyn FnMut() -> f64>,
) -> Result<SampleSet> {
    if near >= far {
        return Err(Error::contract(format!("near {near} must be < far {far}")));
    }
    if cfg.samples_per_ray < 2 {
        return Err(Error::contract("samples_per_ray must be at least 2"));
    }
    let mut set = SampleSet::default();
    let Some((t0, t1)) = bounds.clip_ray(ray.origin, ray.direction, near, far) else {
        return Ok(set);
    };
    if t1 <= t0 {
        return Ok(set);
    }
    let n = cfg.samples_per_ray;
    let h = (t1 - t0) / n as f64;
    for i in 0..n {
        let u = match jitter.as_deref_mut() {
            Some(j) if cfg.stratified_jitter => j(),
            _ => 0.0,
        };
        let t = t0 + (i as f64 + u) * h;
        let p = [
            ray.origin[0] + t * ray.direction[0],
            ray.origin[1] + t * ray.direction[1],
            ray.origin[2] + t * ray.direction[2],
        ];
        if let Some(m) = mask {
            if !m.is_occupied(p) {
                continue;
            }
        }
        set.ts.push(t);
        set.positions.push(p);
    }
    // deltas from consecutive retained samples; the final step runs to the
    // clipped exit point so merged intervals stay accounted for
    for i in 0..set.ts.len() {
        let next = if i + 1 < set.ts.len() { set.ts[i + 1] } else { t1 };
        set.deltas.push(next - set.ts[i]);
    }
    Ok(set)
}

/// Reference (non-differentiable) integration of a single ray per the
/// compositing equation; `radiance[i]` is `L_o` at sample `i`.
pub fn integrate(samples: &SampleSet, radiance: &[[f64; 3]], cfg: &RenderConfig) -> [f64; 3] {
    assert_eq!(samples.weights.len(), radiance.len(), "call compute_shading first");
    let mut c = [0.0; 3];
    let mut wsum = 0.0;
    for (w, l) in samples.weights.iter().zip(radiance) {
        for ch in 0..3 {
            c[ch] += w * l[ch];
        }
        wsum += w;
    }
    for ch in 0..3 {
        c[ch] += (1.0 - wsum) * cfg.background[ch];
    }
    c
}

/// Flattened per-sample batch over many rays, for the differentiable path.
pub struct RayBundle {
    pub positions: Vec<[f64; 3]>,
    pub dirs: Vec<[f64; 3]>,
    pub illum: Vec<usize>,
    pub deltas: Vec<f64>,
    /// Segment boundaries: samples of ray `i` occupy `offsets[i]..offsets[i+1]`.
    pub offsets: Arc<Vec<usize>>,
}

impl RayBundle {
    pub fn build(
        rays: &[Ray],
        illum_per_ray: &[usize],
        cfg: &RenderConfig,
        mask: Option<&AlphaMask>,
        bounds: &Aabb,
        near: f64,
        far: f64,
        mut jitter: Option<&mut dyn FnMut() -> f64>,
    ) -> Result<Self> {
        let mut positions = Vec::new();
        let mut dirs = Vec::new();
        let mut illum = Vec::new();
        let mut deltas = Vec::new();
        let mut offsets = Vec::with_capacity(rays.len() + 1);
        offsets.push(0);
        for (ri, ray) in rays.iter().enumerate() {
            let j: Option<&mut dyn FnMut() -> f64> = match jitter {
                Some(ref mut j) => Some(&mut **j),
                None => None,
            };
            let set = sample_ray(ray, cfg, mask, bounds, near, far, j)?;
            for i in 0..set.len() {
                positions.push(set.positions[i]);
                dirs.push(ray.direction);
                illum.push(illum_per_ray.get(ri).copied().unwrap_or(0));
                deltas.push(set.deltas[i]);
            }
            offsets.push(positions.len());
        }
        Ok(RayBundle {
            positions,
            dirs,
            illum,
            deltas,
            offsets: Arc::new(offsets),
        })
    }

    pub fn num_rays(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn num_samples(&self) -> usize {
        self.positions.len()
    }
}

/// Differentiable compositing of per-sample densities and radiance into
/// per-ray colors `(B, 3)` over a constant background.
pub fn composite_batch(
    tape: &Tape,
    sigma: &GradTensor,
    radiance: &GradTensor,
    bundle: &RayBundle,
    background: [f64; 3],
) -> Result<GradTensor> {
    let p = bundle.num_samples();
    let b = bundle.num_rays();
    if sigma.shape() != [p] || radiance.shape() != [p, 3] {
        return Err(Error::dim(format!(
            "composite expects sigma (P) and radiance (P,3) with P={}, got {:?} and {:?}",
            p,
            sigma.shape(),
            radiance.shape()
        )));
    }
    let deltas = GradTensor::constant(&[p], bundle.deltas.clone())?;
    let sigma_dt = tape.hadamard(sigma, &deltas)?;
    // T_x = exp(-Σ_{j<x} σΔ), alpha_x = 1 - exp(-σΔ)
    let tau = tape.segment_cumsum_exclusive(&sigma_dt, &bundle.offsets)?;
    let trans = tape.exp(&tape.unary(&tau, Activation::Neg)?)?;
    let alpha = tape.affine(&tape.exp(&tape.unary(&sigma_dt, Activation::Neg)?)?, -1.0, 1.0)?;
    let weights = tape.hadamard(&trans, &alpha)?;

    let w_col = tape.reshape(&weights, &[p, 1])?;
    let w3 = tape.repeat_cols(&w_col, 3)?;
    let weighted = tape.hadamard(&w3, radiance)?;
    let foreground = tape.segment_sum(&weighted, &bundle.offsets)?;

    let wsum = tape.segment_sum(&weights, &bundle.offsets)?;
    let residual = tape.affine(&wsum, -1.0, 1.0)?;
    let r3 = tape.repeat_cols(&tape.reshape(&residual, &[b, 1])?, 3)?;
    let bg = GradTensor::constant(&[3], background.to_vec())?;
    let bg_term = tape.hadamard(&r3, &bg)?;
    tape.add(&foreground, &bg_term)
}

/// Render per-ray colors (forward only). Ray chunks shard across workers
/// with read-only model access; output assembly is position-addressed so
/// the result does not depend on scheduling.
pub fn render_rays(
    model: &Model,
    rays: &[Ray],
    illum: &[usize],
    cfg: &RenderConfig,
    mask: Option<&AlphaMask>,
    near: f64,
    far: f64,
) -> Result<Vec<[f64; 3]>> {
    const CHUNK: usize = 2048;
    let bounds = model.grid.bounds;
    let chunks: Vec<(usize, &[Ray])> = rays
        .chunks(CHUNK)
        .enumerate()
        .map(|(i, c)| (i * CHUNK, c))
        .collect();
    let results: Result<Vec<(usize, Vec<[f64; 3]>)>> = chunks
        .par_iter()
        .map(|&(start, chunk)| {
            let tape = Tape::inference();
            let ill: Vec<usize> = (0..chunk.len())
                .map(|i| illum.get(start + i).copied().unwrap_or(0))
                .collect();
            let bundle = RayBundle::build(chunk, &ill, cfg, mask, &bounds, near, far, None)?;
            let colors = if bundle.num_samples() == 0 {
                vec![cfg.background; chunk.len()]
            } else {
                let sigma = model.grid.density_batch(&tape, &bundle.positions)?;
                let radiance =
                    model.radiance_batch(&tape, &bundle.positions, &bundle.dirs, &bundle.illum)?;
                let c = composite_batch(&tape, &sigma, &radiance, &bundle, cfg.background)?;
                let vals = c.to_vec();
                (0..chunk.len())
                    .map(|i| [vals[i * 3], vals[i * 3 + 1], vals[i * 3 + 2]])
                    .collect()
            };
            Ok((start, colors))
        })
        .collect();
    let mut out = vec![[0.0; 3]; rays.len()];
    for (start, colors) in results? {
        for (i, c) in colors.into_iter().enumerate() {
            out[start + i] = c;
        }
    }
    Ok(out)
}

/// Full-frame render, clamped to [0,1].
pub fn render_image(
    model: &Model,
    cam: &Camera,
    cfg: &RenderConfig,
    mask: Option<&AlphaMask>,
    illum: usize,
) -> Result<ImageF64> {
    let rays = generate_rays(cam, &frame_pixels(cam.width, cam.height))?;
    let ill = vec![illum; rays.len()];
    let colors = render_rays(model, &rays, &ill, cfg, mask, cam.near, cam.far)?;
    let pixels = colors
        .into_iter()
        .map(|c| {
            [
                c[0].clamp(0.0, 1.0),
                c[1].clamp(0.0, 1.0),
                c[2].clamp(0.0, 1.0),
            ]
        })
        .collect();
    Ok(ImageF64 {
        width: cam.width,
        height: cam.height,
        pixels,
    })
}
