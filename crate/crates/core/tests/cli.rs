//! End-to-end checks of the command-line surface: every subcommand runs
//! against tiny fixtures through the real binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use glintfield::config::RunConfig;
use glintfield::scene_io::{load_checkpoint, load_dataset, psnr, read_image, save_checkpoint, ssim};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_glintfield"))
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn glintfield");
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn write_scene_spec(dir: &Path) -> PathBuf {
    let path = dir.join("scene.toml");
    fs::write(
        &path,
        r#"
n_train = 3
n_test = 2
resolution = 20

[scene]
seed = 5
ambient = [0.05, 0.05, 0.05]

[[scene.spheres]]
center = [0.0, 0.0, 0.0]
radius = 0.8
albedo = [0.3, 0.4, 0.7]
specular = 0.8
shininess = 64.0

[[scene.lights]]
direction = [-0.4, 0.3, -1.0]
intensity = [1.0, 1.0, 1.0]
"#,
    )
    .unwrap();
    path
}

fn write_run_config(dir: &Path, dataset: &Path, iters: usize) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(
        &path,
        format!(
            r#"
seed = 1
dataset = "{}"

[grid]
resolution = [10, 10, 10]
density_ranks = [2, 2, 2]
appearance_ranks = [3, 3, 3]

[appearance]
n_bases = 3
film_width = 4
illum_dim = 4
trunk_depth = 2
trunk_width = 12
integrator_width = 12

[render]
samples_per_ray = 16

[train]
iterations = {iters}
batch_rays = 48
log_every = 5
"#,
            dataset.display()
        ),
    )
    .unwrap();
    path
}

#[test]
fn make_scene_writes_expected_tree_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = write_scene_spec(tmp.path());
    let out_a = tmp.path().join("data_a");
    let out_b = tmp.path().join("data_b");
    run_ok(bin().args(["make-scene", "--spec"]).arg(&spec).arg("--out").arg(&out_a));
    run_ok(bin().args(["make-scene", "--spec"]).arg(&spec).arg("--out").arg(&out_b));

    for split in ["train", "test"] {
        assert!(out_a.join(format!("transforms_{split}.json")).exists());
    }
    for i in 0..3 {
        let a = fs::read(out_a.join(format!("train/r_{i}.png"))).unwrap();
        let b = fs::read(out_b.join(format!("train/r_{i}.png"))).unwrap();
        assert_eq!(a, b, "regenerated PNG differs for frame {i}");
    }

    // loaded-back poses sit on the configured camera orbit
    let ds = load_dataset(&out_a, "train", 2.0, 6.0).unwrap();
    assert_eq!(ds.frames.len(), 3);
    for f in &ds.frames {
        let p = f.camera.position();
        let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        assert!((r - 4.0).abs() < 1e-9, "camera radius {r}");
        assert!(p[2] > 0.0, "camera below the upper hemisphere");
    }
}

#[test]
fn train_smoke_run_writes_loadable_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = write_scene_spec(tmp.path());
    let data = tmp.path().join("data");
    run_ok(bin().args(["make-scene", "--spec"]).arg(&spec).arg("--out").arg(&data));
    let cfg = write_run_config(tmp.path(), &data, 10);
    let out = tmp.path().join("run");
    run_ok(bin().args(["train", "--config"]).arg(&cfg).arg("--out").arg(&out));

    let ckpt = out.join("checkpoint_final.ckpt");
    assert!(ckpt.exists());
    assert!(out.join("metrics.jsonl").exists());
    let data = load_checkpoint(&ckpt).unwrap();
    let (_, model) = glintfield::config::restore_model(&data).unwrap();
    assert!(!model.named_params().is_empty());
}

#[test]
fn zero_lr_training_keeps_initial_parameters() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = write_scene_spec(tmp.path());
    let data = tmp.path().join("data");
    run_ok(bin().args(["make-scene", "--spec"]).arg(&spec).arg("--out").arg(&data));
    let cfg_path = write_run_config(tmp.path(), &data, 6);
    let out = tmp.path().join("run");
    run_ok(
        bin()
            .args(["train", "--config"])
            .arg(&cfg_path)
            .arg("--out")
            .arg(&out)
            .args(["--lr", "0"]),
    );

    // model construction is deterministic per seed, so a fresh build gives
    // the exact initial parameters
    let data = load_checkpoint(&out.join("checkpoint_final.ckpt")).unwrap();
    let cfg = RunConfig::parse(&data.config_echo).unwrap();
    let initial = cfg.build_model(1).unwrap();
    for ((name, tensor), (cname, _, cvals)) in
        initial.named_params().iter().zip(&data.params)
    {
        assert_eq!(name, cname);
        let init = tensor.to_vec();
        assert_eq!(
            init.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            cvals.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            "parameter {name} changed under --lr 0"
        );
    }
}

fn zero_density_checkpoint(dir: &Path, dataset: &Path) -> PathBuf {
    let mut cfg = RunConfig::default();
    cfg.grid.resolution = [8, 8, 8];
    cfg.grid.density_ranks = [2, 2, 2];
    cfg.grid.appearance_ranks = [3, 3, 3];
    cfg.appearance.n_bases = 3;
    cfg.appearance.film_width = 4;
    cfg.appearance.illum_dim = 4;
    cfg.appearance.trunk_depth = 2;
    cfg.appearance.trunk_width = 8;
    cfg.appearance.integrator_width = 8;
    cfg.render.samples_per_ray = 12;
    cfg.dataset = Some(dataset.to_path_buf());
    let model = cfg.build_model(1).unwrap();
    for axis in &model.grid.density {
        axis.vector
            .set_values(&vec![0.0; axis.vector.numel()])
            .unwrap();
        axis.matrix
            .set_values(&vec![0.0; axis.matrix.numel()])
            .unwrap();
    }
    let path = dir.join("zero_density.ckpt");
    save_checkpoint(
        &model.named_params(),
        &cfg.to_toml().unwrap(),
        None,
        &path,
    )
    .unwrap();
    path
}

#[test]
fn render_zero_density_gives_white_frames_and_is_stable() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = write_scene_spec(tmp.path());
    let data = tmp.path().join("data");
    run_ok(bin().args(["make-scene", "--spec"]).arg(&spec).arg("--out").arg(&data));
    let ckpt = zero_density_checkpoint(tmp.path(), &data);

    let out_a = tmp.path().join("render_a");
    let out_b = tmp.path().join("render_b");
    for out in [&out_a, &out_b] {
        run_ok(
            bin()
                .args(["render", "--checkpoint"])
                .arg(&ckpt)
                .args(["--split", "test", "--out"])
                .arg(out),
        );
    }

    // count matches the split, frames are pure white, re-render is bitwise stable
    let ds = load_dataset(&data, "test", 2.0, 6.0).unwrap();
    let frames: Vec<_> = fs::read_dir(&out_a)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    assert_eq!(frames.len(), ds.frames.len());
    for i in 0..ds.frames.len() {
        let name = format!("render_{i:03}.png");
        let img = read_image(&out_a.join(&name)).unwrap().rgb;
        assert!(img.pixels.iter().all(|p| *p == [1.0; 3]), "{name} not white");
        assert_eq!(
            fs::read(out_a.join(&name)).unwrap(),
            fs::read(out_b.join(&name)).unwrap(),
            "{name} differs between renders"
        );
    }
}

#[test]
fn eval_reports_parseable_records_and_matches_recomputation() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = write_scene_spec(tmp.path());
    let data = tmp.path().join("data");
    run_ok(bin().args(["make-scene", "--spec"]).arg(&spec).arg("--out").arg(&data));
    let cfg = write_run_config(tmp.path(), &data, 8);
    let run_dir = tmp.path().join("run");
    run_ok(bin().args(["train", "--config"]).arg(&cfg).arg("--out").arg(&run_dir));
    let ckpt = run_dir.join("checkpoint_final.ckpt");

    let out = run_ok(
        bin()
            .args(["eval", "--checkpoint"])
            .arg(&ckpt)
            .args(["--split", "test"]),
    );
    let stdout = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<serde_json::Value> = stdout
        .lines()
        .map(|l| serde_json::from_str(l).expect("eval line must be JSON"))
        .collect();
    let ds = load_dataset(&data, "test", 2.0, 6.0).unwrap();
    assert_eq!(lines.len(), ds.frames.len() + 1, "per-frame records + summary");
    let summary = lines.last().unwrap();
    assert_eq!(summary["frames"], ds.frames.len());

    // recompute the metrics from rendered PNGs; eval quantizes identically,
    // so the figures agree to float precision
    let render_dir = tmp.path().join("render");
    run_ok(
        bin()
            .args(["render", "--checkpoint"])
            .arg(&ckpt)
            .args(["--split", "test", "--out"])
            .arg(&render_dir),
    );
    let mut mean_psnr = 0.0;
    let mut mean_ssim = 0.0;
    for (i, frame) in ds.frames.iter().enumerate() {
        let img = read_image(&render_dir.join(format!("render_{i:03}.png")))
            .unwrap()
            .rgb;
        let p = psnr(&img, &frame.image).unwrap();
        let s = ssim(&img, &frame.image).unwrap();
        assert!(
            (p - lines[i]["psnr"].as_f64().unwrap()).abs() < 1e-9,
            "frame {i} psnr mismatch"
        );
        assert!(
            (s - lines[i]["ssim"].as_f64().unwrap()).abs() < 1e-9,
            "frame {i} ssim mismatch"
        );
        mean_psnr += p;
        mean_ssim += s;
    }
    mean_psnr /= ds.frames.len() as f64;
    mean_ssim /= ds.frames.len() as f64;
    assert!((mean_psnr - summary["mean_psnr"].as_f64().unwrap()).abs() < 1e-9);
    assert!((mean_ssim - summary["mean_ssim"].as_f64().unwrap()).abs() < 1e-9);
}

#[test]
fn eval_of_identical_images_caps_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    // an all-white dataset rendered by a zero-density model reproduces the
    // ground truth exactly
    let data = tmp.path().join("data");
    fs::create_dir_all(data.join("test")).unwrap();
    let mut white = glintfield::scene_io::ImageF64::new(20, 20);
    for p in white.pixels.iter_mut() {
        *p = [1.0; 3];
    }
    let mut frames = Vec::new();
    for i in 0..2 {
        glintfield::scene_io::write_image(&white, &data.join(format!("test/r_{i}.png"))).unwrap();
        frames.push(serde_json::json!({
            "file_path": format!("./test/r_{i}"),
            "transform_matrix": [
                [1.0, 0.0, 0.0, 0.0],
                [0.0, 1.0, 0.0, 0.0],
                [0.0, 0.0, 1.0, 4.0],
                [0.0, 0.0, 0.0, 1.0]
            ]
        }));
    }
    fs::write(
        data.join("transforms_test.json"),
        serde_json::to_string(&serde_json::json!({
            "camera_angle_x": 0.69,
            "frames": frames,
        }))
        .unwrap(),
    )
    .unwrap();
    let ckpt = zero_density_checkpoint(tmp.path(), &data);

    let out = run_ok(
        bin()
            .args(["eval", "--checkpoint"])
            .arg(&ckpt)
            .args(["--split", "test"]),
    );
    let stdout = String::from_utf8(out.stdout).unwrap();
    let summary: serde_json::Value =
        serde_json::from_str(stdout.lines().last().unwrap()).unwrap();
    assert_eq!(summary["mean_psnr"].as_f64().unwrap(), 120.0);
    assert!((summary["mean_ssim"].as_f64().unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn sweep_emits_one_row_per_basis_count_with_shared_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = write_scene_spec(tmp.path());
    let data = tmp.path().join("data");
    run_ok(bin().args(["make-scene", "--spec"]).arg(&spec).arg("--out").arg(&data));
    let cfg = write_run_config(tmp.path(), &data, 6);
    let out = tmp.path().join("sweep");
    run_ok(
        bin()
            .args(["sweep-np", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&out)
            .args(["--np", "2,4"]),
    );
    let rows: Vec<serde_json::Value> = fs::read_to_string(out.join("sweep.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["n_bases"], 2);
    assert_eq!(rows[1]["n_bases"], 4);
    assert_eq!(rows[0]["seed"], rows[1]["seed"]);

    // the per-point runs differ only in n_bases
    for (row, np) in rows.iter().zip([2usize, 4]) {
        let sub_cfg = RunConfig::load(&out.join(format!("np{np}/run_config.toml"))).unwrap();
        assert_eq!(sub_cfg.appearance.n_bases, np);
        assert_eq!(sub_cfg.seed, row["seed"].as_u64().unwrap());
    }
}

#[test]
fn env_var_overrides_output_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = write_scene_spec(tmp.path());
    let env_out = tmp.path().join("env_out");
    run_ok(
        bin()
            .env("GLINTFIELD_OUT_DIR", &env_out)
            .args(["make-scene", "--spec"])
            .arg(&spec),
    );
    assert!(env_out.join("transforms_train.json").exists());
}

#[test]
fn errors_exit_nonzero() {
    let out = bin()
        .args(["train", "--config", "/nonexistent/config.toml"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let out = bin()
        .args(["eval", "--checkpoint", "/nonexistent.ckpt"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}
