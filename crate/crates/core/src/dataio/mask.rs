//! Binary masks stored as 8-bit single-channel PNG (foreground 255).

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageReader, RgbImage};

use crate::error::{Error, Result};

/// Values above this byte are read as foreground.
pub const MASK_THRESHOLD: u8 = 127;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    values: Vec<u8>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, values: Vec<u8>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::shape("mask.values", width * height, values.len()));
        }
        if values.iter().any(|&v| v > 1) {
            return Err(Error::Data("mask values must be 0 or 1".into()));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![0; width * height],
        }
    }

    /// Binarizes probabilities with a strict `p > threshold` rule.
    pub fn from_probabilities(width: usize, height: usize, probs: &[f32], threshold: f32) -> Result<Self> {
        if probs.len() != width * height {
            return Err(Error::shape("probabilities", width * height, probs.len()));
        }
        let values = probs.iter().map(|&p| u8::from(p > threshold)).collect();
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.values[y * self.width + x] == 1
    }

    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        self.values[y * self.width + x] = u8::from(on);
    }

    pub fn count(&self) -> usize {
        self.values.iter().map(|&v| v as usize).sum()
    }

    pub fn to_image(&self) -> GrayImage {
        let buf = self.values.iter().map(|&v| v * 255).collect();
        GrayImage::from_raw(self.width as u32, self.height as u32, buf).expect("mask buffer size")
    }

    pub fn from_image(img: &GrayImage) -> Self {
        Self {
            width: img.width() as usize,
            height: img.height() as usize,
            values: img.as_raw().iter().map(|&v| u8::from(v > MASK_THRESHOLD)).collect(),
        }
    }
}

fn open_image(path: &Path) -> Result<DynamicImage> {
    let reader = ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    Ok(reader.with_guessed_format().map_err(|e| Error::io(path, e))?.decode()?)
}

/// Reads an 8-bit single-channel PNG; anything else is a format error.
pub fn read_gray_png(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    match open_image(path)? {
        DynamicImage::ImageLuma8(img) => Ok(img),
        other => Err(Error::Format(format!(
            "{}: expected 8-bit single-channel PNG, found {:?}",
            path.display(),
            other.color()
        ))),
    }
}

pub fn write_mask(mask: &BinaryMask, path: impl AsRef<Path>) -> Result<()> {
    mask.to_image().save(path.as_ref())?;
    Ok(())
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    Ok(BinaryMask::from_image(&read_gray_png(path)?))
}

/// Stores a probability map as an 8-bit PNG (`round(p * 255)`).
pub fn write_probability_png(width: usize, height: usize, probs: &[f32], path: impl AsRef<Path>) -> Result<()> {
    if probs.len() != width * height {
        return Err(Error::shape("probabilities", width * height, probs.len()));
    }
    let buf = probs
        .iter()
        .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    GrayImage::from_raw(width as u32, height as u32, buf)
        .expect("probability buffer size")
        .save(path.as_ref())?;
    Ok(())
}

pub fn read_probability_png(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<f32>)> {
    let img = read_gray_png(path)?;
    let probs = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
    Ok((img.width() as usize, img.height() as usize, probs))
}

pub fn write_frame(frame: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    frame.save(path.as_ref())?;
    Ok(())
}

pub fn read_frame(path: impl AsRef<Path>) -> Result<RgbImage> {
    Ok(open_image(path.as_ref())?.to_rgb8())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn roundtrip(mask: &BinaryMask) -> BinaryMask {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        write_mask(mask, &path).unwrap();
        read_mask(&path).unwrap()
    }

    #[test]
    fn empty_mask_roundtrips() {
        let m = BinaryMask::empty(4, 4);
        assert_eq!(roundtrip(&m), m);
    }

    #[test]
    fn checkerboard_roundtrips() {
        let values = (0..64).map(|i| ((i % 8 + i / 8) % 2) as u8).collect();
        let m = BinaryMask::new(8, 8, values).unwrap();
        assert_eq!(roundtrip(&m), m);
    }

    #[test]
    fn antialiased_values_threshold_at_127() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("aa.png");
        GrayImage::from_raw(3, 1, vec![200, 127, 128]).unwrap().save(&path).unwrap();
        assert_eq!(read_mask(&path).unwrap().values(), &[1, 0, 1]);
    }

    #[test]
    fn multichannel_and_16bit_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let rgb = dir.path().join("rgb.png");
        RgbImage::new(2, 2).save(&rgb).unwrap();
        assert!(matches!(read_mask(&rgb), Err(Error::Format(_))));

        let deep = dir.path().join("deep.png");
        image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(2, 2).save(&deep).unwrap();
        assert!(matches!(read_mask(&deep), Err(Error::Format(_))));
    }

    #[test]
    fn non_binary_values_rejected() {
        assert!(BinaryMask::new(2, 1, vec![0, 2]).is_err());
        assert!(BinaryMask::new(2, 2, vec![0, 1]).is_err());
    }
}
