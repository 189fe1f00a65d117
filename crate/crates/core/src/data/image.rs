use std::path::Path;

use image::{ColorType, ImageFormat};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// 8-bit RGB pixels, row-major, interleaved.
#[derive(Clone, PartialEq, Eq)]
pub struct RgbBuffer {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl std::fmt::Debug for RgbBuffer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "RgbBuffer({}x{})", self.width, self.height)
    }
}

impl RgbBuffer {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::domain(format!(
                "{width}x{height} RGB buffer needs {} bytes, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(RgbBuffer { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let data = rgb.iter().copied().cycle().take(width * height * 3).collect();
        RgbBuffer { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn pixels(&self) -> impl Iterator<Item = &[u8]> {
        self.data.chunks_exact(3)
    }

    pub fn crop(&self, x: usize, y: usize, width: usize, height: usize) -> Result<RgbBuffer> {
        if x + width > self.width || y + height > self.height {
            return Err(Error::domain(format!(
                "crop {width}x{height}+{x}+{y} exceeds {}x{} image",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(width * height * 3);
        for row in y..y + height {
            let start = (row * self.width + x) * 3;
            data.extend_from_slice(&self.data[start..start + width * 3]);
        }
        Ok(RgbBuffer { width, height, data })
    }

    /// Copies `src` into this buffer with its top-left corner at `(x, y)`.
    pub fn paste(&mut self, src: &RgbBuffer, x: usize, y: usize) {
        for row in 0..src.height {
            let dst = ((y + row) * self.width + x) * 3;
            let s = row * src.width * 3;
            self.data[dst..dst + src.width * 3].copy_from_slice(&src.data[s..s + src.width * 3]);
        }
    }

    /// Channel-first `[3, height, width]` tensor with values scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let plane = self.width * self.height;
        let mut out = vec![0.0; 3 * plane];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + i] = f64::from(px[c]) / 255.0;
            }
        }
        Tensor::new(vec![3, self.height, self.width], out).expect("consistent extents")
    }

    /// Reads a PNG (RGB or RGBA, alpha dropped) or binary PPM file.
    pub fn load(path: &Path) -> Result<RgbBuffer> {
        let ingest = |message: String| Error::Ingest {
            path: path.to_path_buf(),
            message,
        };
        let img = image::ImageReader::open(path)
            .map_err(|e| ingest(e.to_string()))?
            .with_guessed_format()
            .map_err(|e| ingest(e.to_string()))?;
        match img.format() {
            Some(ImageFormat::Png) | Some(ImageFormat::Pnm) => {}
            other => {
                return Err(ingest(format!(
                    "unsupported image format {other:?}; expected PNG or PPM"
                )))
            }
        }
        let rgb = img.decode().map_err(|e| ingest(e.to_string()))?.to_rgb8();
        let (w, h) = rgb.dimensions();
        RgbBuffer::new(w as usize, h as usize, rgb.into_raw())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        image::save_buffer_with_format(
            path,
            &self.data,
            self.width as u32,
            self.height as u32,
            ColorType::Rgb8,
            ImageFormat::Png,
        )?;
        Ok(())
    }
}

pub fn save_gray_png(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<()> {
    image::save_buffer_with_format(path, data, width as u32, height as u32, ColorType::L8, ImageFormat::Png)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(w: usize, h: usize) -> RgbBuffer {
        let data = (0..w * h * 3).map(|i| (i * 7 % 256) as u8).collect();
        RgbBuffer::new(w, h, data).unwrap()
    }

    #[test]
    fn crop_and_paste_round_trip() {
        let img = gradient(10, 7);
        let c = img.crop(3, 2, 4, 5).unwrap();
        assert_eq!(c.pixel(0, 0), img.pixel(3, 2));
        assert_eq!(c.pixel(3, 4), img.pixel(6, 6));
        let mut blank = RgbBuffer::filled(10, 7, [0, 0, 0]);
        blank.paste(&c, 3, 2);
        assert_eq!(blank.crop(3, 2, 4, 5).unwrap(), c);
        assert!(img.crop(8, 0, 4, 1).is_err());
    }

    #[test]
    fn tensor_is_channel_first_and_scaled() {
        let mut img = RgbBuffer::filled(2, 1, [0, 0, 0]);
        img.set_pixel(1, 0, [255, 51, 0]);
        let t = img.to_tensor();
        assert_eq!(t.shape(), &[3, 1, 2]);
        assert_eq!(t.data(), &[0.0, 1.0, 0.0, 0.2, 0.0, 0.0]);
    }

    #[test]
    fn png_and_ppm_load() {
        let dir = tempfile::tempdir().unwrap();
        let img = gradient(5, 4);
        let png = dir.path().join("a.png");
        img.save_png(&png).unwrap();
        assert_eq!(RgbBuffer::load(&png).unwrap(), img);

        let ppm = dir.path().join("a.ppm");
        let mut bytes = b"P6\n5 4\n255\n".to_vec();
        bytes.extend_from_slice(img.data());
        std::fs::write(&ppm, bytes).unwrap();
        assert_eq!(RgbBuffer::load(&ppm).unwrap(), img);

        let rgba = dir.path().join("b.png");
        let data: Vec<u8> = img.pixels().flat_map(|p| [p[0], p[1], p[2], 17]).collect();
        image::save_buffer(&rgba, &data, 5, 4, ColorType::Rgba8).unwrap();
        assert_eq!(RgbBuffer::load(&rgba).unwrap(), img);

        let missing = RgbBuffer::load(&dir.path().join("none.png")).unwrap_err();
        assert!(matches!(missing, Error::Ingest { .. }));
    }
}
