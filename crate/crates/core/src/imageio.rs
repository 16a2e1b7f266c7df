//! RGB float images and 8-bit PNG output.

use std::path::Path;

use crate::error::{Error, Result};

/// Row-major RGB image with channel values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn black(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::shape("image", &[height, width, 3], &[data.len()]));
        }
        Ok(Self { width, height, data })
    }

    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        let o = (y * self.width + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, px: [f64; 3]) {
        let o = (y * self.width + x) * 3;
        self.data[o..o + 3].copy_from_slice(&px);
    }

    /// 8-bit quantization: clamp to `[0, 1]`, scale by 255, round.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| {
                let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
                (v * 255.0).round() as u8
            })
            .collect()
    }
}

pub fn encode_png(img: &Image) -> Result<Vec<u8>> {
    encode_rgb8_png(img.width, img.height, &img.to_rgb8())
}

pub fn encode_rgb8_png(width: usize, height: usize, rgb: &[u8]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut buf, width as u32, height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc
            .write_header()
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        w.write_image_data(rgb)
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    Ok(buf)
}

pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    std::fs::write(path, encode_png(img)?)?;
    Ok(())
}

/// Reads an 8-bit RGB PNG back into `[0, 1]` floats.
pub fn read_png(path: &Path) -> Result<Image> {
    let dec = png::Decoder::new(std::fs::File::open(path)?);
    let mut reader = dec.read_info().map_err(|e| Error::Io(std::io::Error::other(e)))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Config(format!("{}: expected 8-bit RGB", path.display())));
    }
    let data = buf[..info.buffer_size()].iter().map(|&b| b as f64 / 255.0).collect();
    Image::new(info.width as usize, info.height as usize, data)
}
