//! Float rasters and the PFM on-disk format.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major float32 raster with 1 or 3 interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatImage {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl FloatImage {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Data(format!("unsupported channel count {channels}")));
        }
        if data.len() != width * height * channels {
            return Err(Error::Data(format!(
                "raster data length {} does not match {width}x{height}x{channels}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite sample at pixel ({}, {})",
                (i / channels) % width,
                (i / channels) / width
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Self {
        Self::new(width, height, channels, vec![value; width * height * channels])
            .expect("constant raster is valid")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, col: usize, row: usize, channel: usize) -> f32 {
        self.data[(row * self.width + col) * self.channels + channel]
    }

    pub fn set(&mut self, col: usize, row: usize, channel: usize, value: f32) {
        assert!(value.is_finite(), "raster samples must be finite");
        let i = (row * self.width + col) * self.channels + channel;
        self.data[i] = value;
    }

    pub fn pixel3(&self, col: usize, row: usize) -> [f32; 3] {
        let i = (row * self.width + col) * self.channels;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Nearest-neighbour resampling to a new size.
    pub fn resize_nearest(&self, width: usize, height: usize) -> Self {
        let mut data = Vec::with_capacity(width * height * self.channels);
        for row in 0..height {
            let src_row = ((row as f64 + 0.5) * self.height as f64 / height as f64) as usize;
            let src_row = src_row.min(self.height - 1);
            for col in 0..width {
                let src_col = ((col as f64 + 0.5) * self.width as f64 / width as f64) as usize;
                let src_col = src_col.min(self.width - 1);
                let i = (src_row * self.width + src_col) * self.channels;
                data.extend_from_slice(&self.data[i..i + self.channels]);
            }
        }
        Self {
            width,
            height,
            channels: self.channels,
            data,
        }
    }

    /// Encodes as little-endian PFM ("PF" for 3 channels, "Pf" for 1).
    ///
    /// PFM stores scanlines bottom-to-top; rows are flipped on the way out.
    pub fn to_pfm_bytes(&self) -> Vec<u8> {
        let tag = if self.channels == 3 { "PF" } else { "Pf" };
        let mut out = format!("{tag}\n{} {}\n-1.0\n", self.width, self.height).into_bytes();
        out.reserve(self.data.len() * 4);
        let stride = self.width * self.channels;
        for row in (0..self.height).rev() {
            for v in &self.data[row * stride..(row + 1) * stride] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_pfm_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut reader = BufReader::new(bytes);
        let mut header = Vec::new();
        // Three whitespace-separated header tokens may span lines.
        let mut tokens: Vec<String> = Vec::new();
        while tokens.len() < 4 {
            header.clear();
            let n = reader
                .read_until(b'\n', &mut header)
                .map_err(|e| e.to_string())?;
            if n == 0 {
                return Err("truncated PFM header".into());
            }
            let line = std::str::from_utf8(&header).map_err(|_| "non-ASCII PFM header")?;
            tokens.extend(line.split_whitespace().map(str::to_owned));
        }
        let channels = match tokens[0].as_str() {
            "PF" => 3,
            "Pf" => 1,
            other => return Err(format!("bad PFM magic {other:?}")),
        };
        let width: usize = tokens[1].parse().map_err(|_| "bad PFM width")?;
        let height: usize = tokens[2].parse().map_err(|_| "bad PFM height")?;
        let scale: f32 = tokens[3].parse().map_err(|_| "bad PFM scale")?;
        let little = scale < 0.0;
        let count = width * height * channels;
        let mut raw = vec![0u8; count * 4];
        reader
            .read_exact(&mut raw)
            .map_err(|_| format!("expected {count} float samples"))?;
        let stride = width * channels;
        let mut data = vec![0f32; count];
        for (i, chunk) in raw.chunks_exact(4).enumerate() {
            let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
            let v = if little {
                f32::from_le_bytes(b)
            } else {
                f32::from_be_bytes(b)
            };
            let file_row = i / stride;
            let row = height - 1 - file_row;
            data[row * stride + i % stride] = v;
        }
        FloatImage::new(width, height, channels, data).map_err(|e| e.to_string())
    }

    pub fn read_pfm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_pfm_bytes(&bytes).map_err(|msg| Error::format(path, msg))
    }

    pub fn write_pfm(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_pfm_bytes())
            .map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_bad_length_and_nan() {
        assert!(FloatImage::new(2, 2, 3, vec![0.0; 11]).is_err());
        let mut d = vec![0.0; 4];
        d[3] = f32::NAN;
        assert!(FloatImage::new(2, 2, 1, d).is_err());
        assert!(FloatImage::new(1, 1, 2, vec![0.0; 2]).is_err());
    }

    #[test]
    fn pfm_rows_are_stored_bottom_up() {
        let img = FloatImage::new(1, 2, 1, vec![1.0, 2.0]).unwrap();
        let bytes = img.to_pfm_bytes();
        let header_len = "Pf\n1 2\n-1.0\n".len();
        assert_eq!(&bytes[header_len..header_len + 4], &2.0f32.to_le_bytes());
    }

    #[test]
    fn reads_big_endian_pfm() {
        let mut bytes = b"Pf\n2 1\n1.0\n".to_vec();
        bytes.extend_from_slice(&3.5f32.to_be_bytes());
        bytes.extend_from_slice(&(-1.0f32).to_be_bytes());
        let img = FloatImage::from_pfm_bytes(&bytes).unwrap();
        assert_eq!(img.data(), &[3.5, -1.0]);
    }

    #[test]
    fn truncated_pfm_is_rejected() {
        let bytes = b"PF\n4 4\n-1.0\n\0\0\0\0".to_vec();
        assert!(FloatImage::from_pfm_bytes(&bytes).is_err());
    }

    proptest! {
        #[test]
        fn pfm_roundtrip(w in 1usize..6, h in 1usize..6, three in any::<bool>(), seed in any::<u64>()) {
            let c = if three { 3 } else { 1 };
            let data: Vec<f32> = (0..w * h * c)
                .map(|i| ((i as u64).wrapping_mul(seed | 1) % 1000) as f32 * 0.37 - 100.0)
                .collect();
            let img = FloatImage::new(w, h, c, data).unwrap();
            let back = FloatImage::from_pfm_bytes(&img.to_pfm_bytes()).unwrap();
            prop_assert_eq!(back, img);
        }
    }
}
