use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Dense RGB image with values in [0,1] (row-major).
#[derive(Clone, Debug, PartialEq)]
pub struct ImageF64 {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[f64; 3]>,
}

impl ImageF64 {
    pub fn new(width: usize, height: usize) -> Self {
        ImageF64 {
            width,
            height,
            pixels: vec![[0.0; 3]; width * height],
        }
    }

    pub fn px(&self, x: usize, y: usize) -> [f64; 3] {
        self.pixels[y * self.width + x]
    }

    pub fn set_px(&mut self, x: usize, y: usize, c: [f64; 3]) {
        self.pixels[y * self.width + x] = c;
    }

    /// Snap every channel to the 8-bit grid (`round(255·clamp(v)) / 255`),
    /// i.e. the values a PNG round trip would produce.
    pub fn quantized(&self) -> ImageF64 {
        let pixels = self
            .pixels
            .iter()
            .map(|p| std::array::from_fn(|c| quantize_channel(p[c]) as f64 / 255.0))
            .collect();
        ImageF64 {
            width: self.width,
            height: self.height,
            pixels,
        }
    }
}

fn quantize_channel(v: f64) -> u8 {
    (255.0 * v.clamp(0.0, 1.0)).round() as u8
}

/// Write an 8-bit RGB PNG; channels quantize as `round(255·clamp(v,0,1))`.
/// The file lands via temp-then-rename so partial writes never surface.
pub fn write_image(img: &ImageF64, path: &Path) -> Result<()> {
    let mut out = ::image::RgbImage::new(img.width as u32, img.height as u32);
    for y in 0..img.height {
        for x in 0..img.width {
            let p = img.px(x, y);
            out.put_pixel(
                x as u32,
                y as u32,
                ::image::Rgb([
                    quantize_channel(p[0]),
                    quantize_channel(p[1]),
                    quantize_channel(p[2]),
                ]),
            );
        }
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("png.tmp");
    out.save_with_format(&tmp, ::image::ImageFormat::Png)
        .map_err(|e| Error::Load(format!("writing {}: {e}", tmp.display())))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// An image read back from disk; `alpha` present only for RGBA sources.
pub struct LoadedImage {
    pub rgb: ImageF64,
    pub alpha: Option<Vec<f64>>,
}

/// Read an 8-bit PNG as RGB(A) in [0,1] (values divide by 255).
pub fn read_image(path: &Path) -> Result<LoadedImage> {
    let img = ::image::open(path)
        .map_err(|e| Error::Load(format!("reading {}: {e}", path.display())))?;
    let (width, height) = (img.width() as usize, img.height() as usize);
    match img {
        ::image::DynamicImage::ImageRgba8(rgba) => {
            let mut rgb = ImageF64::new(width, height);
            let mut alpha = Vec::with_capacity(width * height);
            for (i, p) in rgba.pixels().enumerate() {
                rgb.pixels[i] = [
                    p.0[0] as f64 / 255.0,
                    p.0[1] as f64 / 255.0,
                    p.0[2] as f64 / 255.0,
                ];
                alpha.push(p.0[3] as f64 / 255.0);
            }
            Ok(LoadedImage {
                rgb,
                alpha: Some(alpha),
            })
        }
        other => {
            let buf = other.to_rgb8();
            let mut rgb = ImageF64::new(width, height);
            for (i, p) in buf.pixels().enumerate() {
                rgb.pixels[i] = [
                    p.0[0] as f64 / 255.0,
                    p.0[1] as f64 / 255.0,
                    p.0[2] as f64 / 255.0,
                ];
            }
            Ok(LoadedImage { rgb, alpha: None })
        }
    }
}
