//! Shared fixtures for unit tests.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::appearance::{AblationVariant, AppearanceModel, AppearanceSpec, Model};
use crate::field::{Aabb, VMGrid};

pub(crate) fn unit(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

pub(crate) fn rand_dir(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        let n2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
        if n2 > 1e-3 {
            return unit(v);
        }
    }
}

/// Small model over a 4^3 grid: feature dim 9, four bases, narrow trunk.
pub(crate) fn tiny_model(variant: AblationVariant, n_conditions: usize, seed: u64) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = VMGrid::new(
        [4, 4, 4],
        Aabb::new([-1.0; 3], [1.0; 3]),
        [2, 2, 2],
        [3, 3, 3],
        0.2,
        &mut rng,
    )
    .unwrap();
    let spec = AppearanceSpec {
        feature_dim: 9,
        n_bases: 4,
        film_width: 4,
        illum_dim: 3,
        n_conditions,
        use_illum_codes: true,
        posenc_levels: 2,
        trunk_depth: 2,
        trunk_width: 8,
        integrator_width: 8,
        trunk_view_input: false,
        variant,
        leaky_slope: 0.01,
    };
    let appearance = AppearanceModel::new(spec, &mut rng);
    Model::new(grid, appearance).unwrap()
}
