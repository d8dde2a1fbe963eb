use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::finite_diff_check;
use crate::field::Aabb;

fn unit(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn rand_dir(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        let n2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
        if n2 > 1e-3 {
            return unit(v);
        }
    }
}

fn tiny_spec(variant: AblationVariant, n_conditions: usize) -> AppearanceSpec {
    AppearanceSpec {
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
    }
}

fn tiny_model(variant: AblationVariant, n_conditions: usize, seed: u64) -> Model {
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
    let appearance = AppearanceModel::new(tiny_spec(variant, n_conditions), &mut rng);
    Model::new(grid, appearance).unwrap()
}

fn zero_film(model: &Model) {
    let film = model.appearance.coeff.as_ref().unwrap().film.as_ref().unwrap();
    film.w.set_values(&vec![0.0; film.w.numel()]).unwrap();
    film.b.set_values(&vec![0.0; film.b.numel()]).unwrap();
}

#[test]
fn posenc_zero_input_pattern() {
    let pe = PosEncConfig {
        num_frequencies: 2,
        include_input: true,
    };
    assert_eq!(pe.encode(&[0.0]), vec![0.0, 0.0, 1.0, 0.0, 1.0]);
}

#[test]
fn posenc_length_and_input_prefix() {
    let pe = PosEncConfig {
        num_frequencies: 2,
        include_input: true,
    };
    let v = [0.3, -0.7, 0.1];
    let enc = pe.encode(&v);
    assert_eq!(enc.len(), 15);
    assert_eq!(pe.encoded_len(3), 15);
    assert_eq!(&enc[..3], &v);
}

#[test]
fn project_basis_zero_and_selection() {
    let tape = Tape::new();
    let feats = GradTensor::constant(&[1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();

    let zero = BasisProjection {
        w: GradTensor::zeros_param(&[4, 2]),
    };
    assert_eq!(zero.project(&tape, &feats).unwrap().to_vec(), vec![0.0, 0.0]);

    // one-hot columns select feature entries
    let mut w = vec![0.0; 8];
    w[2 * 2] = 1.0; // column 0 <- feature 2
    w[1 * 2 + 1] = 1.0; // column 1 <- feature 1
    let sel = BasisProjection {
        w: GradTensor::param(&[4, 2], w).unwrap(),
    };
    assert_eq!(sel.project(&tape, &feats).unwrap().to_vec(), vec![3.0, 2.0]);
}

#[test]
fn project_basis_matches_matvec_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let c = 6;
    let np = 5;
    let w: Vec<f64> = (0..c * np).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let feats: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let basis = BasisProjection {
        w: GradTensor::param(&[c, np], w.clone()).unwrap(),
    };
    let tape = Tape::new();
    let t = GradTensor::constant(&[1, c], feats.clone()).unwrap();
    let got = basis.project(&tape, &t).unwrap().to_vec();
    for n in 0..np {
        let want: f64 = (0..c).map(|i| w[i * np + n] * feats[i]).sum();
        assert!((got[n] - want).abs() < 1e-12);
    }
}

#[test]
fn film_zeroed_gives_zero_coefficients() {
    let model = tiny_model(AblationVariant::Full, 1, 21);
    zero_film(&model);
    let tape = Tape::inference();
    let pos = [[0.2, -0.1, 0.4]];
    let dirs = [rand_dir(&mut ChaCha8Rng::seed_from_u64(1))];
    let feats = model
        .grid
        .query_features_batch(&tape, &pos, FeatureKind::Appearance)
        .unwrap();
    let k = model
        .appearance
        .coefficients(&tape, &feats, &pos, &dirs, &[0])
        .unwrap();
    assert!(k.to_vec().iter().all(|&v| v == 0.0));
}

#[test]
fn bias_only_film_is_direction_independent() {
    let model = tiny_model(AblationVariant::Full, 1, 22);
    let film = model.appearance.coeff.as_ref().unwrap().film.as_ref().unwrap();
    film.w.set_values(&vec![0.0; film.w.numel()]).unwrap();
    // leave the b_x block nonzero, zero the W_x block
    let nw = model.appearance.spec.film_width;
    let mut bias = vec![0.0; film.b.numel()];
    for (i, b) in bias.iter_mut().enumerate().skip(nw * 3) {
        *b = 0.3 + i as f64 * 0.1;
    }
    film.b.set_values(&bias).unwrap();

    let tape = Tape::inference();
    let pos = [[0.2, -0.1, 0.4]];
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let feats = model
        .grid
        .query_features_batch(&tape, &pos, FeatureKind::Appearance)
        .unwrap();
    let k1 = model
        .appearance
        .coefficients(&tape, &feats, &pos, &[rand_dir(&mut rng)], &[0])
        .unwrap()
        .to_vec();
    let k2 = model
        .appearance
        .coefficients(&tape, &feats, &pos, &[rand_dir(&mut rng)], &[0])
        .unwrap()
        .to_vec();
    assert_eq!(k1, k2);
}

#[test]
fn non_unit_direction_rejected() {
    let model = tiny_model(AblationVariant::Full, 1, 23);
    let tape = Tape::inference();
    let r = model.radiance(&tape, [0.0, 0.0, 0.0], [1.0, 1.0, 0.0], 0);
    assert!(matches!(r, Err(crate::Error::Contract(_))));
}

#[test]
fn coefficient_gradients_match_finite_differences() {
    let model = tiny_model(AblationVariant::Full, 1, 24);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pos = [[0.2, -0.1, 0.4], [-0.5, 0.3, 0.1]];
    let dirs = [rand_dir(&mut rng), rand_dir(&mut rng)];
    for (name, t) in model.appearance.named_params() {
        let err = finite_diff_check(
            |tape, _| {
                let feats = model
                    .grid
                    .query_features_batch(tape, &pos, FeatureKind::Appearance)?;
                let k = model.appearance.coefficients(tape, &feats, &pos, &dirs, &[0, 0])?;
                tape.sum_all(&k)
            },
            &t,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-4, "{} grad rel err {}", name, err);
    }
}

#[test]
fn integrator_zero_weights_give_half() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let integ = IntegratorNet::new(6, 8, &mut rng);
    for l in [&integ.l1, &integ.l2, &integ.l3] {
        l.w.set_values(&vec![0.0; l.w.numel()]).unwrap();
        l.b.set_values(&vec![0.0; l.b.numel()]).unwrap();
    }
    let tape = Tape::inference();
    let x = GradTensor::constant(&[2, 6], vec![0.5; 12]).unwrap();
    let out = integ.forward(&tape, &x).unwrap().to_vec();
    assert_eq!(out, vec![0.5; 6]);
}

#[test]
fn integrator_output_strictly_inside_unit_cube() {
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    let integ = IntegratorNet::new(5, 8, &mut rng);
    let tape = Tape::inference();
    for _ in 0..20 {
        let x: Vec<f64> = (0..5).map(|_| rng.gen_range(-20.0..20.0)).collect();
        let t = GradTensor::constant(&[1, 5], x).unwrap();
        let out = integ.forward(&tape, &t).unwrap().to_vec();
        assert!(out.iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

#[test]
fn integrator_matches_hand_rolled_forward() {
    let mut rng = ChaCha8Rng::seed_from_u64(27);
    let in_dim = 5;
    let width = 7;
    let integ = IntegratorNet::new(in_dim, width, &mut rng);
    let x: Vec<f64> = (0..in_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();

    // independent layer-by-layer evaluation
    let dense = |w: &GradTensor, b: &GradTensor, x: &[f64]| -> Vec<f64> {
        let (wi, wo) = (w.shape()[0], w.shape()[1]);
        let wv = w.to_vec();
        let bv = b.to_vec();
        (0..wo)
            .map(|j| bv[j] + (0..wi).map(|i| x[i] * wv[i * wo + j]).sum::<f64>())
            .collect()
    };
    let relu = |v: Vec<f64>| v.into_iter().map(|x| x.max(0.0)).collect::<Vec<f64>>();
    let h1 = relu(dense(&integ.l1.w, &integ.l1.b, &x));
    let h2 = relu(dense(&integ.l2.w, &integ.l2.b, &h1));
    let out = dense(&integ.l3.w, &integ.l3.b, &h2);
    let want: Vec<f64> = out.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect();

    let tape = Tape::inference();
    let t = GradTensor::constant(&[1, in_dim], x).unwrap();
    let got = integ.forward(&tape, &t).unwrap().to_vec();
    for (g, w) in got.iter().zip(&want) {
        assert!((g - w).abs() < 1e-12);
    }
}

#[test]
fn full_equals_raw_features_with_identity_basis() {
    // N_p == feature_dim and W = I make H == T_c exactly
    let mut rng = ChaCha8Rng::seed_from_u64(28);
    let grid = VMGrid::new(
        [4, 4, 4],
        Aabb::new([-1.0; 3], [1.0; 3]),
        [2, 2, 2],
        [3, 3, 3],
        0.2,
        &mut rng,
    )
    .unwrap();
    let mut spec = tiny_spec(AblationVariant::Full, 1);
    spec.n_bases = spec.feature_dim;
    let appearance = AppearanceModel::new(spec, &mut rng);
    let mut model = Model::new(grid, appearance).unwrap();

    let c = model.appearance.spec.feature_dim;
    let mut eye = vec![0.0; c * c];
    for i in 0..c {
        eye[i * c + i] = 1.0;
    }
    model.appearance.basis.as_ref().unwrap().w.set_values(&eye).unwrap();

    let tape = Tape::inference();
    let pos = [0.25, -0.3, 0.55];
    let dir = rand_dir(&mut rng);
    let full = model.radiance(&tape, pos, dir, 0).unwrap().to_vec();
    model.set_variant(AblationVariant::RawFeatures);
    let raw = model.radiance(&tape, pos, dir, 0).unwrap().to_vec();
    for (a, b) in full.iter().zip(&raw) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn radiance_is_pure() {
    let model = tiny_model(AblationVariant::Full, 1, 29);
    let tape = Tape::inference();
    let d = unit([0.3, -0.5, 0.8]);
    let a = model.radiance(&tape, [0.1, 0.2, 0.3], d, 0).unwrap().to_vec();
    let b = model.radiance(&tape, [0.1, 0.2, 0.3], d, 0).unwrap().to_vec();
    assert_eq!(a, b);
}

#[test]
fn radiance_gradients_flow_to_appearance_factors() {
    let model = tiny_model(AblationVariant::Full, 1, 30);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let pos = [[0.2, -0.1, 0.4], [-0.5, 0.3, 0.1]];
    let dirs = [rand_dir(&mut rng), rand_dir(&mut rng)];
    for m in 0..3 {
        let err = finite_diff_check(
            |tape, _| {
                let rgb = model.radiance_batch(tape, &pos, &dirs, &[0, 0])?;
                tape.sum_all(&rgb)
            },
            &model.grid.appearance[m].vector,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-4, "axis {} rel err {}", m, err);
    }
}

#[test]
fn film_zeroed_radiance_constant_in_direction() {
    let model = tiny_model(AblationVariant::Full, 1, 31);
    zero_film(&model);
    let tape = Tape::inference();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let base = model
        .radiance(&tape, [0.1, -0.2, 0.3], rand_dir(&mut rng), 0)
        .unwrap()
        .to_vec();
    let mut max_dev: f64 = 0.0;
    for _ in 0..100 {
        let out = model
            .radiance(&tape, [0.1, -0.2, 0.3], rand_dir(&mut rng), 0)
            .unwrap()
            .to_vec();
        for c in 0..3 {
            max_dev = max_dev.max((out[c] - base[c]).abs());
        }
    }
    assert!(max_dev < 1e-12, "max deviation {}", max_dev);
}

#[test]
fn raw_film_map_is_affine_in_direction() {
    let model = tiny_model(AblationVariant::Full, 1, 32);
    let tape = Tape::inference();
    let pos = [[0.2, -0.1, 0.4]];
    let feats = model
        .grid
        .query_features_batch(&tape, &pos, FeatureKind::Appearance)
        .unwrap();
    let h = model.appearance.basis_features(&tape, &feats).unwrap();
    let coeff = model.appearance.coeff.as_ref().unwrap();
    let dir_for_ctx = [unit([0.4, 0.3, -0.8])];
    let ctx = model
        .appearance
        .trunk_context(&tape, &pos, &dir_for_ctx, &[0], &h)
        .unwrap();
    let (wx, bx) = coeff.film_params(&tape, &ctx).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let eval = |d: [f64; 3]| -> Vec<f64> {
        let dt = GradTensor::constant(&[1, 3], d.to_vec()).unwrap();
        coeff.apply_film(&tape, &wx, &bx, &dt).unwrap().to_vec()
    };
    for _ in 0..20 {
        let d1: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        let d2: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        let alpha: f64 = rng.gen_range(-0.5..1.5);
        let mix: [f64; 3] = std::array::from_fn(|i| alpha * d1[i] + (1.0 - alpha) * d2[i]);
        let k1 = eval(d1);
        let k2 = eval(d2);
        let km = eval(mix);
        for i in 0..k1.len() {
            let want = alpha * k1[i] + (1.0 - alpha) * k2[i];
            assert!((km[i] - want).abs() < 1e-10, "{} vs {}", km[i], want);
        }
    }
}

#[test]
fn single_condition_output_ignores_code_contents() {
    let model = tiny_model(AblationVariant::Full, 1, 33);
    assert!(!model.appearance.illum.active);
    let tape = Tape::inference();
    let d = unit([0.1, 0.7, -0.7]);
    let before = model.radiance(&tape, [0.0, 0.1, 0.2], d, 0).unwrap().to_vec();
    let n = model.appearance.illum.z.numel();
    model.appearance.illum.z.set_values(&vec![42.0; n]).unwrap();
    let after = model.radiance(&tape, [0.0, 0.1, 0.2], d, 0).unwrap().to_vec();
    for (a, b) in before.iter().zip(&after) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn multi_condition_codes_change_output() {
    let model = tiny_model(AblationVariant::Full, 2, 34);
    assert!(model.appearance.illum.active);
    let tape = Tape::inference();
    let d = unit([0.1, 0.7, -0.7]);
    let a = model.radiance(&tape, [0.0, 0.1, 0.2], d, 0).unwrap().to_vec();
    let b = model.radiance(&tape, [0.0, 0.1, 0.2], d, 1).unwrap().to_vec();
    assert_ne!(a, b);
}

#[test]
fn all_variants_produce_valid_rgb_and_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let pos = [[0.2, -0.1, 0.4], [-0.5, 0.3, 0.1]];
    let dirs = [rand_dir(&mut rng), rand_dir(&mut rng)];
    for (i, variant) in [
        AblationVariant::Full,
        AblationVariant::NoDecomposition,
        AblationVariant::LinearBlend,
        AblationVariant::ConcatConditioning,
        AblationVariant::RawFeatures,
    ]
    .into_iter()
    .enumerate()
    {
        let model = tiny_model(variant, 2, 40 + i as u64);
        let tape = Tape::inference();
        let rgb = model.radiance_batch(&tape, &pos, &dirs, &[0, 1]).unwrap();
        assert_eq!(rgb.shape(), &[2, 3]);
        assert!(rgb.to_vec().iter().all(|&v| v > 0.0 && v < 1.0));

        // gradients flow through every variant's parameter set
        let params = model.named_params();
        for (name, t) in params.iter().take(3).chain(params.iter().rev().take(3)) {
            let err = finite_diff_check(
                |tape, _| {
                    let rgb = model.radiance_batch(tape, &pos, &dirs, &[0, 1])?;
                    tape.sum_all(&rgb)
                },
                t,
                1e-4,
            )
            .unwrap();
            assert!(
                err < 1e-4,
                "variant {} param {} rel err {}",
                variant.as_str(),
                name,
                err
            );
        }
    }
}
