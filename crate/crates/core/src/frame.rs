//! Float images, 8-bit PNG conversion and the raw float32 tensor dump.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Linear RGB image in `[0, 1]` with an optional foreground mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// `H × W × 3`, row-major.
    pub rgb: Vec<f32>,
    /// `H × W`; present when the source carried an alpha channel.
    pub mask: Option<Vec<f32>>,
}

impl Image {
    pub fn new(width: usize, height: usize, rgb: Vec<f32>, mask: Option<Vec<f32>>) -> Result<Self> {
        if rgb.len() != width * height * 3 {
            return Err(Error::Shape(format!("{} rgb values for a {width}×{height} image", rgb.len())));
        }
        if let Some(m) = &mask {
            if m.len() != width * height {
                return Err(Error::Shape(format!("{} mask values for a {width}×{height} image", m.len())));
            }
        }
        Ok(Self { width, height, rgb, mask })
    }

    pub fn filled(width: usize, height: usize, color: [f32; 3]) -> Self {
        Self {
            width,
            height,
            rgb: color.iter().copied().cycle().take(width * height * 3).collect(),
            mask: None,
        }
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let has_alpha = img.color().has_alpha();
        let rgba = img.to_rgba8();
        let (w, h) = (rgba.width() as usize, rgba.height() as usize);
        let mut rgb = Vec::with_capacity(w * h * 3);
        let mut mask = Vec::with_capacity(w * h);
        for p in rgba.pixels() {
            rgb.extend(p.0[..3].iter().map(|&c| c as f32 / 255.0));
            mask.push(p.0[3] as f32 / 255.0);
        }
        Ok(Self {
            width: w,
            height: h,
            rgb,
            mask: has_alpha.then_some(mask),
        })
    }

    /// Writes RGB, or RGBA when a mask is present.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        save_png(path, self.width, self.height, &self.rgb, self.mask.as_deref())
    }
}

pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes `H × W × 3` floats (plus optional alpha) as an 8-bit PNG.
pub fn save_png(path: &Path, width: usize, height: usize, rgb: &[f32], alpha: Option<&[f32]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let (w, h) = (width as u32, height as u32);
    let result = match alpha {
        Some(a) => {
            let buf: Vec<u8> = (0..width * height)
                .flat_map(|i| [to_u8(rgb[3 * i]), to_u8(rgb[3 * i + 1]), to_u8(rgb[3 * i + 2]), to_u8(a[i])])
                .collect();
            image::RgbaImage::from_raw(w, h, buf).expect("buffer sized from dimensions").save(path)
        }
        None => {
            let buf: Vec<u8> = rgb.iter().map(|&v| to_u8(v)).collect();
            image::RgbImage::from_raw(w, h, buf).expect("buffer sized from dimensions").save(path)
        }
    };
    result.map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub const RAW_MAGIC: [u8; 4] = *b"F32T";

/// `H × W × C` float32 tensor as stored by the raw dump format.
#[derive(Clone, Debug, PartialEq)]
pub struct RawTensor {
    pub height: u32,
    pub width: u32,
    pub channels: u32,
    pub data: Vec<f32>,
}

impl RawTensor {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.data.len() * 4);
        out.extend_from_slice(&RAW_MAGIC);
        for d in [self.height, self.width, self.channels] {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || bytes[..4] != RAW_MAGIC {
            return Err(Error::format("raw tensor", "bad magic"));
        }
        let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        let (height, width, channels) = (dim(0), dim(1), dim(2));
        let n = height as usize * width as usize * channels as usize;
        if bytes.len() != 16 + 4 * n {
            return Err(Error::format("raw tensor", format!("expected {n} values, found {} bytes of payload", bytes.len() - 16)));
        }
        let data = bytes[16..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let rgb: Vec<f32> = (0..4 * 3 * 3).map(|i| i as f32 / 35.0).collect();
        let mask: Vec<f32> = (0..12).map(|i| i as f32 / 11.0).collect();
        let img = Image::new(4, 3, rgb, Some(mask)).unwrap();
        let p = dir.path().join("a/b.png");
        img.save_png(&p).unwrap();
        let back = Image::load_png(&p).unwrap();
        assert_eq!((back.width, back.height), (4, 3));
        for (a, b) in img.rgb.iter().zip(&back.rgb) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
        let (m0, m1) = (img.mask.unwrap(), back.mask.unwrap());
        assert!(m0.iter().zip(&m1).all(|(a, b)| (a - b).abs() <= 0.5 / 255.0 + 1e-6));
    }

    #[test]
    fn rgb_png_has_no_mask() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.png");
        Image::filled(2, 2, [1.0, 0.0, 0.5]).save_png(&p).unwrap();
        assert!(Image::load_png(&p).unwrap().mask.is_none());
    }

    #[test]
    fn missing_png_names_path() {
        let e = Image::load_png(Path::new("/nonexistent/x.png")).unwrap_err();
        assert!(e.to_string().contains("/nonexistent/x.png"));
    }

    #[test]
    fn raw_dump_layout() {
        let t = RawTensor {
            height: 1,
            width: 2,
            channels: 1,
            data: vec![1.0, -2.5],
        };
        let b = t.to_bytes();
        assert_eq!(b.len(), 24);
        assert_eq!(&b[..4], b"F32T");
        assert_eq!(&b[4..8], &1u32.to_le_bytes());
        assert_eq!(&b[8..12], &2u32.to_le_bytes());
        assert_eq!(&b[16..20], &1.0f32.to_le_bytes());
        assert_eq!(RawTensor::from_bytes(&b).unwrap(), t);
        assert!(RawTensor::from_bytes(&b[..20]).is_err());
    }
}
