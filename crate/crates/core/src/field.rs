//! Vector-matrix factorized volumetric field.
//!
//! The density and appearance feature volumes are stored per axis as a stack
//! of line factors `(R, N_axis)` and complementary-plane factors
//! `(R, N_a * N_b)`. A feature query interpolates the line factor linearly
//! and the plane factor bilinearly, multiplies the two, and concatenates the
//! per-axis rank blocks into one feature vector (8-corner product semantics).

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{GradTensor, Reduce, Tape};
use crate::error::{Error, Result};

/// Axis-aligned box in world units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Self {
        Aabb { min, max }
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] - 1e-12 && p[a] <= self.max[a] + 1e-12)
    }

    /// Normalize a point to [0,1]^3 box coordinates.
    pub fn normalized(&self, p: [f64; 3]) -> [f64; 3] {
        let mut u = [0.0; 3];
        for a in 0..3 {
            u[a] = (p[a] - self.min[a]) / (self.max[a] - self.min[a]);
        }
        u
    }

    /// Slab intersection of `origin + t*dir` with the box, restricted to
    /// `[t_min, t_max]`. Returns `None` when the ray misses.
    pub fn clip_ray(
        &self,
        origin: [f64; 3],
        dir: [f64; 3],
        t_min: f64,
        t_max: f64,
    ) -> Option<(f64, f64)> {
        let mut t0 = t_min;
        let mut t1 = t_max;
        for a in 0..3 {
            if dir[a].abs() < 1e-15 {
                if origin[a] < self.min[a] || origin[a] > self.max[a] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[a];
            let (mut near, mut far) = (
                (self.min[a] - origin[a]) * inv,
                (self.max[a] - origin[a]) * inv,
            );
            if near > far {
                std::mem::swap(&mut near, &mut far);
            }
            t0 = t0.max(near);
            t1 = t1.min(far);
            if t0 > t1 {
                return None;
            }
        }
        Some((t0, t1))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureKind {
    Density,
    Appearance,
}

/// One axis of the decomposition: a line factor and its complementary
/// plane factor, both with `R` rank slices.
pub struct AxisFactors {
    /// `(R, N_axis)`
    pub vector: GradTensor,
    /// `(R, N_a * N_b)` where `(a, b)` are the other two axes in ascending
    /// order, flattened as `ia * N_b + ib`.
    pub matrix: GradTensor,
}

pub struct VMGrid {
    pub resolution: [usize; 3],
    pub bounds: Aabb,
    pub density: [AxisFactors; 3],
    pub appearance: [AxisFactors; 3],
}

/// The two axes complementary to `axis`, ascending.
pub fn plane_axes(axis: usize) -> (usize, usize) {
    match axis {
        0 => (1, 2),
        1 => (0, 2),
        2 => (0, 1),
        _ => unreachable!("axis must be 0..3"),
    }
}

fn init_factors(
    resolution: [usize; 3],
    ranks: [usize; 3],
    std: f64,
    rng: &mut impl Rng,
) -> [AxisFactors; 3] {
    let normal = Normal::new(0.0, std.max(1e-12)).expect("std must be finite");
    let mut make = |shape: [usize; 2]| {
        let n = shape[0] * shape[1];
        let vals: Vec<f64> = if std == 0.0 {
            vec![0.0; n]
        } else {
            (0..n).map(|_| normal.sample(rng)).collect()
        };
        GradTensor::param(&shape, vals).unwrap()
    };
    std::array::from_fn(|m| {
        let (a, b) = plane_axes(m);
        AxisFactors {
            vector: make([ranks[m], resolution[m]]),
            matrix: make([ranks[m], resolution[a] * resolution[b]]),
        }
    })
}

impl VMGrid {
    pub fn new(
        resolution: [usize; 3],
        bounds: Aabb,
        density_ranks: [usize; 3],
        appearance_ranks: [usize; 3],
        init_std: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if resolution.iter().any(|&n| n < 2) {
            return Err(Error::dim("grid resolution must be at least 2 per axis"));
        }
        Ok(VMGrid {
            resolution,
            bounds,
            density: init_factors(resolution, density_ranks, init_std, rng),
            appearance: init_factors(resolution, appearance_ranks, init_std, rng),
        })
    }

    pub fn factors(&self, kind: FeatureKind) -> &[AxisFactors; 3] {
        match kind {
            FeatureKind::Density => &self.density,
            FeatureKind::Appearance => &self.appearance,
        }
    }

    pub fn ranks(&self, kind: FeatureKind) -> [usize; 3] {
        let f = self.factors(kind);
        std::array::from_fn(|m| f[m].vector.shape()[0])
    }

    /// Length of the concatenated feature vector for `kind`.
    pub fn feature_dim(&self, kind: FeatureKind) -> usize {
        self.ranks(kind).iter().sum()
    }

    pub fn named_params(&self) -> Vec<(String, GradTensor)> {
        let mut out = Vec::new();
        for (kind, name) in [
            (FeatureKind::Density, "density"),
            (FeatureKind::Appearance, "appearance"),
        ] {
            for (m, axis) in ["x", "y", "z"].iter().enumerate() {
                let f = &self.factors(kind)[m];
                out.push((format!("grid.{name}.{axis}.vector"), f.vector.clone()));
                out.push((format!("grid.{name}.{axis}.matrix"), f.matrix.clone()));
            }
        }
        out
    }

    /// Per-axis `(i0, frac)` interpolation coordinates for a batch of
    /// in-bounds points. Grid nodes sit at `u * (N-1)` in box coordinates.
    fn grid_coords(&self, points: &[[f64; 3]]) -> Result<[(Vec<usize>, Vec<f64>); 3]> {
        let mut coords: [(Vec<usize>, Vec<f64>); 3] = std::array::from_fn(|_| {
            (
                Vec::with_capacity(points.len()),
                Vec::with_capacity(points.len()),
            )
        });
        for p in points {
            if !self.bounds.contains(*p) {
                return Err(Error::OutOfBounds(format!(
                    "point {:?} outside grid bounds {:?}..{:?}",
                    p, self.bounds.min, self.bounds.max
                )));
            }
            let u = self.bounds.normalized(*p);
            for a in 0..3 {
                let n = self.resolution[a];
                let g = (u[a].clamp(0.0, 1.0)) * (n as f64 - 1.0);
                let i0 = (g.floor() as usize).min(n - 2);
                coords[a].0.push(i0);
                coords[a].1.push(g - i0 as f64);
            }
        }
        Ok(coords)
    }

    /// Batched feature query: `(P, R^1 + R^2 + R^3)`, differentiable with
    /// respect to every factor entry.
    pub fn query_features_batch(
        &self,
        tape: &Tape,
        points: &[[f64; 3]],
        kind: FeatureKind,
    ) -> Result<GradTensor> {
        let p = points.len();
        let coords = self.grid_coords(points)?;
        let mut parts = Vec::with_capacity(3);
        for m in 0..3 {
            let f = &self.factors(kind)[m];

            // line factor: linear interpolation along axis m
            let (i0, frac) = &coords[m];
            let idx0 = Arc::new(i0.clone());
            let idx1 = Arc::new(i0.iter().map(|&i| i + 1).collect::<Vec<_>>());
            let w0 = GradTensor::constant(&[p], frac.iter().map(|&f| 1.0 - f).collect())?;
            let w1 = GradTensor::constant(&[p], frac.clone())?;
            let v0 = tape.hadamard(&tape.index_select(&f.vector, 1, &idx0)?, &w0)?;
            let v1 = tape.hadamard(&tape.index_select(&f.vector, 1, &idx1)?, &w1)?;
            let line = tape.add(&v0, &v1)?;

            // plane factor: bilinear interpolation over the other two axes
            let (a, b) = plane_axes(m);
            let nb = self.resolution[b];
            let (a0, fa) = &coords[a];
            let (b0, fb) = &coords[b];
            let mut plane: Option<GradTensor> = None;
            for (da, db) in [(0usize, 0usize), (0, 1), (1, 0), (1, 1)] {
                let idx: Vec<usize> = a0
                    .iter()
                    .zip(b0)
                    .map(|(&ia, &ib)| (ia + da) * nb + (ib + db))
                    .collect();
                let w: Vec<f64> = fa
                    .iter()
                    .zip(fb)
                    .map(|(&fa, &fb)| {
                        let wa = if da == 0 { 1.0 - fa } else { fa };
                        let wb = if db == 0 { 1.0 - fb } else { fb };
                        wa * wb
                    })
                    .collect();
                let wt = GradTensor::constant(&[p], w)?;
                let term =
                    tape.hadamard(&tape.index_select(&f.matrix, 1, &Arc::new(idx))?, &wt)?;
                plane = Some(match plane {
                    None => term,
                    Some(acc) => tape.add(&acc, &term)?,
                });
            }

            // (R, P) component, transposed so rank blocks concatenate per point
            let comp = tape.hadamard(&line, &plane.unwrap())?;
            parts.push(tape.transpose(&comp)?);
        }
        let refs: Vec<&GradTensor> = parts.iter().collect();
        tape.concat(&refs, 1)
    }

    /// Single-point feature query, returned as a flat `(C)` vector.
    pub fn query_features(
        &self,
        tape: &Tape,
        point: [f64; 3],
        kind: FeatureKind,
    ) -> Result<GradTensor> {
        let feats = self.query_features_batch(tape, &[point], kind)?;
        let c = feats.shape()[1];
        tape.reshape(&feats, &[c])
    }

    /// Batched density: `σ = ReLU(Σ feature entries)`, shape `(P)`.
    pub fn density_batch(&self, tape: &Tape, points: &[[f64; 3]]) -> Result<GradTensor> {
        let feats = self.query_features_batch(tape, points, FeatureKind::Density)?;
        let summed = tape.reduce(&feats, Reduce::Sum, Some(1))?;
        tape.relu(&summed)
    }

    /// Density at one point as a scalar tensor.
    pub fn density_at(&self, tape: &Tape, point: [f64; 3]) -> Result<GradTensor> {
        let d = self.density_batch(tape, &[point])?;
        tape.reshape(&d, &[])
    }

    /// World position of grid node `(i, j, k)`.
    pub fn node_position(&self, idx: [usize; 3]) -> [f64; 3] {
        let mut p = [0.0; 3];
        for a in 0..3 {
            let t = idx[a] as f64 / (self.resolution[a] as f64 - 1.0);
            p[a] = self.bounds.min[a] + t * (self.bounds.max[a] - self.bounds.min[a]);
        }
        p
    }
}

/// Binary occupancy grid used to skip empty space during ray sampling.
#[derive(Clone)]
pub struct AlphaMask {
    pub resolution: [usize; 3],
    pub bounds: Aabb,
    pub threshold: f64,
    occupancy: Vec<bool>,
}

impl AlphaMask {
    pub fn all_occupied(resolution: [usize; 3], bounds: Aabb, threshold: f64) -> Self {
        let n = resolution.iter().product();
        AlphaMask {
            resolution,
            bounds,
            threshold,
            occupancy: vec![true; n],
        }
    }

    /// Occupancy from a predicate over voxel centers.
    pub fn from_fn(
        resolution: [usize; 3],
        bounds: Aabb,
        threshold: f64,
        f: impl Fn([f64; 3]) -> bool,
    ) -> Self {
        let mut mask = Self::all_occupied(resolution, bounds, threshold);
        let mut occ = Vec::with_capacity(mask.occupancy.len());
        for i in 0..resolution[0] {
            for j in 0..resolution[1] {
                for k in 0..resolution[2] {
                    occ.push(f(mask.voxel_center([i, j, k])));
                }
            }
        }
        mask.occupancy = occ;
        mask
    }

    fn voxel_index(&self, p: [f64; 3]) -> Option<usize> {
        if !self.bounds.contains(p) {
            return None;
        }
        let u = self.bounds.normalized(p);
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let n = self.resolution[a];
            idx[a] = ((u[a] * n as f64) as usize).min(n - 1);
        }
        Some((idx[0] * self.resolution[1] + idx[1]) * self.resolution[2] + idx[2])
    }

    /// Whether the voxel containing `p` is occupied; out-of-bounds is empty.
    pub fn is_occupied(&self, p: [f64; 3]) -> bool {
        self.voxel_index(p).map_or(false, |i| self.occupancy[i])
    }

    pub fn occupied_count(&self) -> usize {
        self.occupancy.iter().filter(|&&o| o).count()
    }

    pub fn voxel_center(&self, idx: [usize; 3]) -> [f64; 3] {
        let mut p = [0.0; 3];
        for a in 0..3 {
            let t = (idx[a] as f64 + 0.5) / self.resolution[a] as f64;
            p[a] = self.bounds.min[a] + t * (self.bounds.max[a] - self.bounds.min[a]);
        }
        p
    }
}

/// Refresh the occupancy mask: a voxel is occupied iff the sampled opacity
/// `1 - exp(-σ·Δ)` at its center reaches the mask threshold.
pub fn update_alpha_mask(grid: &VMGrid, mask: &AlphaMask, delta_ref: f64) -> Result<AlphaMask> {
    const CHUNK: usize = 16384;
    let res = mask.resolution;
    let total = res[0] * res[1] * res[2];
    let mut occupancy = vec![false; total];
    let mut centers = Vec::with_capacity(total.min(CHUNK));
    let mut flat = Vec::with_capacity(total.min(CHUNK));

    let flush = |centers: &mut Vec<[f64; 3]>,
                 flat: &mut Vec<usize>,
                 occupancy: &mut Vec<bool>|
     -> Result<()> {
        if centers.is_empty() {
            return Ok(());
        }
        let tape = Tape::inference();
        let sigma = grid.density_batch(&tape, centers)?;
        sigma.with_values(|sv| {
            for (&i, &s) in flat.iter().zip(sv) {
                let alpha = 1.0 - (-s * delta_ref).exp();
                occupancy[i] = alpha >= mask.threshold;
            }
        });
        centers.clear();
        flat.clear();
        Ok(())
    };

    for i in 0..res[0] {
        for j in 0..res[1] {
            for k in 0..res[2] {
                centers.push(mask.voxel_center([i, j, k]));
                flat.push((i * res[1] + j) * res[2] + k);
                if centers.len() >= CHUNK {
                    flush(&mut centers, &mut flat, &mut occupancy)?;
                }
            }
        }
    }
    flush(&mut centers, &mut flat, &mut occupancy)?;

    Ok(AlphaMask {
        resolution: res,
        bounds: mask.bounds,
        threshold: mask.threshold,
        occupancy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_bounds() -> Aabb {
        Aabb::new([-1.0, -1.0, -1.0], [1.0, 1.0, 1.0])
    }

    fn small_grid(seed: u64) -> VMGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        VMGrid::new([5, 6, 7], unit_bounds(), [2, 2, 2], [3, 3, 3], 0.3, &mut rng).unwrap()
    }

    fn rand_point(rng: &mut ChaCha8Rng) -> [f64; 3] {
        std::array::from_fn(|_| rng.gen_range(-0.999..0.999))
    }

    /// Independent evaluation: trilinear blend of the 8 corner products of
    /// the cell containing `p`.
    fn corner_product_oracle(grid: &VMGrid, p: [f64; 3], kind: FeatureKind) -> Vec<f64> {
        let u = grid.bounds.normalized(p);
        let mut i0 = [0usize; 3];
        let mut f = [0.0; 3];
        for a in 0..3 {
            let n = grid.resolution[a];
            let g = u[a].clamp(0.0, 1.0) * (n as f64 - 1.0);
            i0[a] = (g.floor() as usize).min(n - 2);
            f[a] = g - i0[a] as f64;
        }
        let mut out = Vec::new();
        for m in 0..3 {
            let factors = &grid.factors(kind)[m];
            let (a, b) = plane_axes(m);
            let nb = grid.resolution[b];
            let vec = factors.vector.to_vec();
            let mat = factors.matrix.to_vec();
            let nv = factors.vector.shape()[1];
            let nm = factors.matrix.shape()[1];
            let r = factors.vector.shape()[0];
            for rr in 0..r {
                let mut acc = 0.0;
                for dx in 0..2usize {
                    for dy in 0..2usize {
                        for dz in 0..2usize {
                            let d = [dx, dy, dz];
                            let w: f64 = (0..3)
                                .map(|ax| if d[ax] == 0 { 1.0 - f[ax] } else { f[ax] })
                                .product();
                            let vm = vec[rr * nv + i0[m] + d[m]];
                            let pm = mat[rr * nm + (i0[a] + d[a]) * nb + (i0[b] + d[b])];
                            acc += w * vm * pm;
                        }
                    }
                }
                out.push(acc);
            }
        }
        out
    }

    #[test]
    fn constant_rank1_grid_gives_unit_feature() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let grid =
            VMGrid::new([4, 4, 4], unit_bounds(), [1, 1, 1], [1, 1, 1], 0.1, &mut rng).unwrap();
        // axis X factors all ones, other axes zero
        grid.density[0].vector.set_values(&[1.0; 4]).unwrap();
        grid.density[0].matrix.set_values(&[1.0; 16]).unwrap();
        for m in 1..3 {
            let nv = grid.density[m].vector.numel();
            let nm = grid.density[m].matrix.numel();
            grid.density[m].vector.set_values(&vec![0.0; nv]).unwrap();
            grid.density[m].matrix.set_values(&vec![0.0; nm]).unwrap();
        }
        let tape = Tape::inference();
        for _ in 0..20 {
            let p = rand_point(&mut rng);
            let feats = grid
                .query_features(&tape, p, FeatureKind::Density)
                .unwrap()
                .to_vec();
            assert!((feats[0] - 1.0).abs() < 1e-12, "axis X entry {}", feats[0]);
        }
    }

    #[test]
    fn node_queries_match_direct_factor_products() {
        let grid = small_grid(1);
        let tape = Tape::inference();
        for idx in [[0usize, 0, 0], [4, 5, 6], [2, 3, 1], [1, 0, 6]] {
            let p = grid.node_position(idx);
            let feats = grid
                .query_features(&tape, p, FeatureKind::Appearance)
                .unwrap()
                .to_vec();
            let mut expect = Vec::new();
            for m in 0..3 {
                let f = &grid.appearance[m];
                let (a, b) = plane_axes(m);
                let nb = grid.resolution[b];
                let vec = f.vector.to_vec();
                let mat = f.matrix.to_vec();
                let nv = f.vector.shape()[1];
                let nm = f.matrix.shape()[1];
                for r in 0..f.vector.shape()[0] {
                    expect.push(vec[r * nv + idx[m]] * mat[r * nm + idx[a] * nb + idx[b]]);
                }
            }
            for (got, want) in feats.iter().zip(&expect) {
                assert!((got - want).abs() < 1e-12, "{} vs {}", got, want);
            }
        }
    }

    #[test]
    fn interior_queries_match_corner_product_oracle() {
        let grid = small_grid(2);
        let tape = Tape::inference();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let p = rand_point(&mut rng);
            for kind in [FeatureKind::Density, FeatureKind::Appearance] {
                let got = grid.query_features(&tape, p, kind).unwrap().to_vec();
                let want = corner_product_oracle(&grid, p, kind);
                for (g, w) in got.iter().zip(&want) {
                    assert!((g - w).abs() < 1e-10, "{} vs {}", g, w);
                }
            }
        }
    }

    #[test]
    fn features_linear_along_single_axis() {
        let grid = small_grid(4);
        let tape = Tape::inference();
        // two points in the same cell differing along x only
        let p0 = [0.05, 0.3, -0.2];
        let p1 = [0.12, 0.3, -0.2];
        let mid = [(p0[0] + p1[0]) / 2.0, 0.3, -0.2];
        let f0 = grid
            .query_features(&tape, p0, FeatureKind::Appearance)
            .unwrap()
            .to_vec();
        let f1 = grid
            .query_features(&tape, p1, FeatureKind::Appearance)
            .unwrap()
            .to_vec();
        let fm = grid
            .query_features(&tape, mid, FeatureKind::Appearance)
            .unwrap()
            .to_vec();
        for i in 0..fm.len() {
            assert!((fm[i] - 0.5 * (f0[i] + f1[i])).abs() < 1e-10);
        }
    }

    #[test]
    fn out_of_bounds_query_signals() {
        let grid = small_grid(5);
        let tape = Tape::inference();
        let r = grid.query_features(&tape, [2.0, 0.0, 0.0], FeatureKind::Density);
        assert!(matches!(r, Err(Error::OutOfBounds(_))));
    }

    #[test]
    fn density_zero_and_relu_clamp() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let grid =
            VMGrid::new([4, 4, 4], unit_bounds(), [2, 2, 2], [2, 2, 2], 0.0, &mut rng).unwrap();
        let tape = Tape::inference();
        assert_eq!(
            grid.density_at(&tape, [0.1, 0.2, 0.3]).unwrap().value(),
            0.0
        );

        // force a negative feature sum: ReLU clamps to zero
        let grid = small_grid(7);
        for m in 0..3 {
            let nv = grid.density[m].vector.numel();
            grid.density[m].vector.set_values(&vec![-1.0; nv]).unwrap();
            let nm = grid.density[m].matrix.numel();
            grid.density[m].matrix.set_values(&vec![1.0; nm]).unwrap();
        }
        assert_eq!(grid.density_at(&tape, [0.0, 0.0, 0.0]).unwrap().value(), 0.0);
    }

    #[test]
    fn density_matches_sum_then_relu_of_feature_oracle() {
        let grid = small_grid(8);
        let tape = Tape::inference();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let p = rand_point(&mut rng);
            let sigma = grid.density_at(&tape, p).unwrap().value();
            let want = corner_product_oracle(&grid, p, FeatureKind::Density)
                .iter()
                .sum::<f64>()
                .max(0.0);
            assert!((sigma - want).abs() < 1e-10);
        }
    }

    #[test]
    fn density_invariant_under_rank_slice_permutation() {
        let grid = small_grid(10);
        let tape = Tape::inference();
        let p = [0.31, -0.42, 0.17];
        let before = grid.density_at(&tape, p).unwrap().value();

        // swap rank slices 0 and 1 on axis Y (vector and matrix together)
        let f = &grid.density[1];
        let mut v = f.vector.to_vec();
        let n = f.vector.shape()[1];
        for j in 0..n {
            v.swap(j, n + j);
        }
        f.vector.set_values(&v).unwrap();
        let mut m = f.matrix.to_vec();
        let nm = f.matrix.shape()[1];
        for j in 0..nm {
            m.swap(j, nm + j);
        }
        f.matrix.set_values(&m).unwrap();

        let after = grid.density_at(&tape, p).unwrap().value();
        assert_eq!(before.to_bits(), after.to_bits());
    }

    #[test]
    fn feature_gradients_match_finite_differences() {
        let grid = small_grid(11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let points: Vec<[f64; 3]> = (0..5).map(|_| rand_point(&mut rng)).collect();
        for m in 0..3 {
            for t in [&grid.appearance[m].vector, &grid.appearance[m].matrix] {
                let pts = points.clone();
                let err = finite_diff_check(
                    |tape, _| {
                        let feats =
                            grid.query_features_batch(tape, &pts, FeatureKind::Appearance)?;
                        tape.sum_all(&feats)
                    },
                    t,
                    1e-4,
                )
                .unwrap();
                assert!(err < 1e-6, "axis {} factor grad rel err {}", m, err);
            }
        }
    }

    #[test]
    fn zero_density_grid_gives_empty_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let grid =
            VMGrid::new([6, 6, 6], unit_bounds(), [2, 2, 2], [2, 2, 2], 0.0, &mut rng).unwrap();
        let mask = AlphaMask::all_occupied([6, 6, 6], grid.bounds, 0.01);
        let refreshed = update_alpha_mask(&grid, &mask, 0.05).unwrap();
        assert_eq!(refreshed.occupied_count(), 0);
    }

    #[test]
    fn uniform_density_with_half_alpha_fills_mask() {
        // choose sigma so 1 - exp(-sigma * delta) = 0.5
        let delta = 0.1;
        let sigma = (2.0f64).ln() / delta;
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let grid =
            VMGrid::new([5, 5, 5], unit_bounds(), [1, 1, 1], [1, 1, 1], 0.0, &mut rng).unwrap();
        grid.density[0].vector.set_values(&[sigma; 5]).unwrap();
        grid.density[0].matrix.set_values(&[1.0; 25]).unwrap();
        let mask = AlphaMask::all_occupied([5, 5, 5], grid.bounds, 0.01);
        let refreshed = update_alpha_mask(&grid, &mask, delta).unwrap();
        assert_eq!(refreshed.occupied_count(), 125);
    }

    #[test]
    fn high_density_sphere_mask_covers_sphere_interior() {
        // a sphere is exactly representable as per-slice discs: one-hot line
        // factor per rank, disc indicator in the plane factor
        let res = 16usize;
        let radius = 0.6;
        let sigma = 200.0;
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let grid = VMGrid::new(
            [res, res, res],
            unit_bounds(),
            [res, 1, 1],
            [1, 1, 1],
            0.0,
            &mut rng,
        )
        .unwrap();
        let mut v = vec![0.0; res * res];
        for r in 0..res {
            v[r * res + r] = 1.0;
        }
        grid.density[0].vector.set_values(&v).unwrap();
        let mut m = vec![0.0; res * res * res];
        let node = |i: usize| -1.0 + 2.0 * i as f64 / (res as f64 - 1.0);
        for r in 0..res {
            let x = node(r);
            for j in 0..res {
                for k in 0..res {
                    let (y, z) = (node(j), node(k));
                    if x * x + y * y + z * z <= radius * radius {
                        m[r * res * res + j * res + k] = sigma;
                    }
                }
            }
        }
        grid.density[0].matrix.set_values(&m).unwrap();

        let mask = AlphaMask::all_occupied([res, res, res], grid.bounds, 0.01);
        let refreshed = update_alpha_mask(&grid, &mask, 0.05).unwrap();

        // every voxel whose center is well inside the sphere must be occupied
        let mut interior = 0;
        for i in 0..res {
            for j in 0..res {
                for k in 0..res {
                    let c = refreshed.voxel_center([i, j, k]);
                    let r2 = c[0] * c[0] + c[1] * c[1] + c[2] * c[2];
                    if r2 <= (radius - 0.25) * (radius - 0.25) {
                        interior += 1;
                        assert!(
                            refreshed.is_occupied(c),
                            "interior voxel {:?} not occupied",
                            [i, j, k]
                        );
                    }
                }
            }
        }
        assert!(interior > 0, "test sphere too small for the grid");
        assert!(refreshed.occupied_count() >= interior);
    }
}
