//! 8-bit RGB PNG and binary PPM, mapped to `[0, 1]` by `/255`.

use std::fs;
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageFormat, RgbImage};
use omlc_core::ImageTensor;

use crate::error::{CliError, CliResult};

pub const EXTENSIONS: [&str; 2] = ["png", "ppm"];

fn format_of(path: &Path) -> CliResult<ImageFormat> {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => Ok(ImageFormat::Png),
        Some("ppm") => Ok(ImageFormat::Pnm),
        _ => Err(CliError::usage(format!("{}: expected a .png or .ppm file", path.display()))),
    }
}

fn image_err(path: &Path, e: image::ImageError) -> CliError {
    match e {
        image::ImageError::IoError(source) => CliError::io(path, source),
        other => CliError::Image {
            path: path.to_path_buf(),
            msg: other.to_string(),
        },
    }
}

pub fn to_tensor(img: &RgbImage) -> ImageTensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    let mut v = vec![0.0; 3 * h * w];
    for (i, px) in raw.chunks_exact(3).enumerate() {
        for c in 0..3 {
            v[c * h * w + i] = px[c] as f64 / 255.0;
        }
    }
    ImageTensor::new(h, w, v).expect("8-bit values are in range")
}

/// Rounds to the nearest 8-bit level.
pub fn to_rgb8(x: &ImageTensor) -> RgbImage {
    let (h, w) = (x.height(), x.width());
    let t = x.as_tensor();
    let mut raw = Vec::with_capacity(3 * h * w);
    for i in 0..h * w {
        for c in 0..3 {
            raw.push((t.data[c * h * w + i] * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer size matches")
}

pub fn read_image(path: &Path) -> CliResult<ImageTensor> {
    let format = format_of(path)?;
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    let img = image::load_from_memory_with_format(&bytes, format).map_err(|e| image_err(path, e))?;
    Ok(to_tensor(&img.to_rgb8()))
}

pub fn write_image(path: &Path, x: &ImageTensor) -> CliResult<()> {
    let img = to_rgb8(x);
    match format_of(path)? {
        ImageFormat::Pnm => {
            let mut buf = Vec::new();
            PnmEncoder::new(&mut buf)
                .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
                .write_image(img.as_raw(), img.width(), img.height(), ExtendedColorType::Rgb8)
                .map_err(|e| image_err(path, e))?;
            fs::write(path, buf).map_err(|e| CliError::io(path, e))
        }
        format => img.save_with_format(path, format).map_err(|e| image_err(path, e)),
    }
}

/// Image files directly inside `dir`, sorted by name.
pub fn list_images(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| CliError::io(dir, e))? {
        let p = entry.map_err(|e| CliError::io(dir, e))?.path();
        let ext = p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if p.is_file() && ext.is_some_and(|e| EXTENSIONS.contains(&e.as_str())) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

pub fn read_dataset(dir: &Path) -> CliResult<Vec<ImageTensor>> {
    let files = list_images(dir)?;
    if files.is_empty() {
        return Err(CliError::usage(format!("{}: no .png or .ppm images", dir.display())));
    }
    files.iter().map(|p| read_image(p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_and_ppm_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let v: Vec<f64> = (0..3 * 5 * 7).map(|i| ((i * 29) % 256) as f64 / 255.0).collect();
        let x = ImageTensor::new(5, 7, v).unwrap();
        for name in ["a.png", "b.ppm"] {
            let p = dir.path().join(name);
            write_image(&p, &x).unwrap();
            assert_eq!(read_image(&p).unwrap(), x);
        }
        assert!(fs::read(dir.path().join("b.ppm")).unwrap().starts_with(b"P6"));
        assert_eq!(list_images(dir.path()).unwrap().len(), 2);
        assert!(read_image(&dir.path().join("c.jpg")).is_err());
    }
}
