use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::render::Camera;

use super::image::{read_image, write_image, ImageF64};

/// One posed view: image, camera, and its lighting condition index.
pub struct Frame {
    pub image: ImageF64,
    pub camera: Camera,
    pub illumination: usize,
}

/// Posed images for one split.
pub struct SceneDataset {
    pub frames: Vec<Frame>,
    pub split: String,
    /// Number of distinct illumination conditions `S`.
    pub n_conditions: usize,
}

impl SceneDataset {
    pub fn width(&self) -> usize {
        self.frames.first().map_or(0, |f| f.image.width)
    }

    pub fn height(&self) -> usize {
        self.frames.first().map_or(0, |f| f.image.height)
    }
}

#[derive(Serialize, Deserialize)]
struct TransformsFile {
    camera_angle_x: f64,
    frames: Vec<TransformsFrame>,
}

#[derive(Serialize, Deserialize)]
struct TransformsFrame {
    file_path: String,
    transform_matrix: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    illumination: Option<usize>,
}

/// Load `transforms_{split}.json` plus its PNG frames. RGBA images are
/// composited over white; cameras get the shared `camera_angle_x` focal and
/// the caller-provided near/far planes.
pub fn load_dataset(root: &Path, split: &str, near: f64, far: f64) -> Result<SceneDataset> {
    let tf_path = root.join(format!("transforms_{split}.json"));
    let text = fs::read_to_string(&tf_path)
        .map_err(|e| Error::Load(format!("reading {}: {e}", tf_path.display())))?;
    let tf: TransformsFile = serde_json::from_str(&text)
        .map_err(|e| Error::Load(format!("parsing {}: {e}", tf_path.display())))?;

    let mut frames = Vec::with_capacity(tf.frames.len());
    let mut n_conditions = 1;
    for entry in &tf.frames {
        let mut rel = entry.file_path.clone();
        if Path::new(&rel).extension().is_none() {
            rel.push_str(".png");
        }
        let img_path = root.join(&rel);
        let loaded = read_image(&img_path)
            .map_err(|e| Error::Load(format!("frame '{}': {e}", entry.file_path)))?;
        let mut image = loaded.rgb;
        if let Some(alpha) = loaded.alpha {
            // alpha over white
            for (px, a) in image.pixels.iter_mut().zip(alpha) {
                for c in px.iter_mut() {
                    *c = *c * a + (1.0 - a);
                }
            }
        }
        if entry.transform_matrix.len() != 4
            || entry.transform_matrix.iter().any(|row| row.len() != 4)
        {
            return Err(Error::Load(format!(
                "frame '{}': transform_matrix is not 4x4",
                entry.file_path
            )));
        }
        let mut pose = [[0.0; 4]; 4];
        for (i, row) in entry.transform_matrix.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                pose[i][j] = *v;
            }
        }
        let camera = Camera::from_angle_x(
            image.width,
            image.height,
            tf.camera_angle_x,
            pose,
            near,
            far,
        )
        .map_err(|e| Error::Load(format!("frame '{}': {e}", entry.file_path)))?;
        let illumination = entry.illumination.unwrap_or(0);
        n_conditions = n_conditions.max(illumination + 1);
        frames.push(Frame {
            image,
            camera,
            illumination,
        });
    }
    Ok(SceneDataset {
        frames,
        split: split.to_string(),
        n_conditions,
    })
}

/// Write a dataset to the transforms/PNG layout this loader reads back.
pub fn save_dataset(dataset: &SceneDataset, root: &Path) -> Result<()> {
    let split = &dataset.split;
    fs::create_dir_all(root.join(split))?;
    let mut frames = Vec::with_capacity(dataset.frames.len());
    let mut angle_x = 0.8;
    for (i, frame) in dataset.frames.iter().enumerate() {
        let rel = format!("./{split}/r_{i}");
        write_image(&frame.image, &root.join(format!("{split}/r_{i}.png")))?;
        let pose = frame.camera.pose;
        angle_x = frame.camera.camera_angle_x();
        frames.push(TransformsFrame {
            file_path: rel,
            transform_matrix: pose.iter().map(|r| r.to_vec()).collect(),
            illumination: if dataset.n_conditions > 1 {
                Some(frame.illumination)
            } else {
                None
            },
        });
    }
    let tf = TransformsFile {
        camera_angle_x: angle_x,
        frames,
    };
    let json = serde_json::to_string_pretty(&tf)
        .map_err(|e| Error::Load(format!("serializing transforms: {e}")))?;
    let path = root.join(format!("transforms_{split}.json"));
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, json)?;
    fs::rename(&tmp, &path)?;
    Ok(())
}
