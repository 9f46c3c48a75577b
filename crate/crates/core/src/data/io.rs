use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{DynamicImage, GrayImage, ImageBuffer, Luma, Rgb};

use super::SegSample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MASK_CUTOFF: u8 = 127;

fn is_png(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

fn list_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn resize_if_needed(img: DynamicImage, size: usize) -> DynamicImage {
    let s = size as u32;
    if img.width() == s && img.height() == s {
        img
    } else {
        img.resize_exact(s, s, FilterType::Triangle)
    }
}

fn image_tensor(img: DynamicImage, size: usize) -> Result<Tensor> {
    let img = resize_if_needed(img, size);
    let hw = size * size;
    if img.color().has_color() {
        let rgb = img.to_rgb8();
        let mut data = vec![0.0; 3 * hw];
        for (i, px) in rgb.pixels().enumerate() {
            for c in 0..3 {
                data[c * hw + i] = px.0[c] as f64 / 255.0;
            }
        }
        Tensor::new([3, size, size], data)
    } else {
        let data = img.to_luma8().pixels().map(|p| p.0[0] as f64 / 255.0).collect();
        Tensor::new([1, size, size], data)
    }
}

fn mask_tensor(img: DynamicImage, size: usize) -> Result<Tensor> {
    let gray = DynamicImage::ImageLuma8(img.to_luma8());
    let data = resize_if_needed(gray, size)
        .to_luma8()
        .pixels()
        .map(|p| if p.0[0] > MASK_CUTOFF { 1.0 } else { 0.0 })
        .collect();
    Tensor::new([1, size, size], data)
}

/// Pairs `images/<name>.png` with `masks/<name>.png`, scales images to
/// `[0,1]`, binarizes masks and resizes both to `size × size` (bilinear).
pub fn load_image_dir(images: &Path, masks: &Path, size: usize) -> Result<Vec<SegSample>> {
    let image_files = list_files(images)?;
    let mask_files = list_files(masks)?;
    for f in image_files.iter().chain(&mask_files) {
        if !is_png(f) {
            return Err(Error::UnsupportedFormat(f.clone()));
        }
    }
    for m in &mask_files {
        if !images.join(m.file_name().expect("file name")).is_file() {
            return Err(Error::Unpaired(m.clone()));
        }
    }
    image_files
        .iter()
        .map(|path| {
            let mask_path = masks.join(path.file_name().expect("file name"));
            if !mask_path.is_file() {
                return Err(Error::Unpaired(path.clone()));
            }
            let img = image::open(path)?;
            let mask = image::open(&mask_path)?;
            SegSample::new(image_tensor(img, size)?, mask_tensor(mask, size)?)
        })
        .collect()
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write the image (grayscale or RGB) and the mask as 8-bit PNGs.
pub fn save_sample_png(sample: &SegSample, image_path: &Path, mask_path: &Path) -> Result<()> {
    let (h, w) = sample.size();
    let hw = h * w;
    let data = sample.image.data();
    match sample.channels() {
        1 => {
            let buf: GrayImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
                Luma([quantize(data[y as usize * w + x as usize])])
            });
            buf.save(image_path)?;
        }
        3 => {
            let buf: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
                let i = y as usize * w + x as usize;
                Rgb([quantize(data[i]), quantize(data[hw + i]), quantize(data[2 * hw + i])])
            });
            buf.save(image_path)?;
        }
        c => {
            return Err(Error::shape("save_sample_png", format!("{c} channels; expected 1 or 3")));
        }
    }
    let m = sample.mask.data();
    let mask: GrayImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Luma([if m[y as usize * w + x as usize] != 0.0 { 255 } else { 0 }])
    });
    mask.save(mask_path)?;
    Ok(())
}
