//! Scene input/output: NeRF-synthetic-style dataset loading and writing,
//! analytic synthetic-scene generation (the ground-truth oracle), image
//! metrics, PNG I/O, and checkpointing.

mod checkpoint;
mod dataset;
mod image;
mod metrics;
mod synth;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointData, OptBlob};
pub use dataset::{load_dataset, save_dataset, Frame, SceneDataset};
pub use image::{read_image, write_image, ImageF64, LoadedImage};
pub use metrics::{psnr, ssim};
pub use synth::{generate_scene, look_at_origin, shade, Light, SphereSpec, SyntheticSceneSpec};
