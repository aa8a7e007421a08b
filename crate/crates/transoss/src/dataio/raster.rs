//! Raster containers: 8-bit RGB PNG for optical chips, and a minimal
//! float container for SAR ("SARF": magic, u32 height, u32 width,
//! little-endian f32 samples, row-major).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::ModalityTag;

const SARF_MAGIC: &[u8; 4] = b"SARF";

/// Row-major, channel-interleaved float image (values in whatever range
/// the producing step defines).
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f32>,
}

impl Raster {
    pub fn new(h: usize, w: usize, c: usize) -> Self {
        Raster {
            h,
            w,
            c,
            data: vec![0.0; h * w * c],
        }
    }

    pub fn from_data(h: usize, w: usize, c: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), h * w * c, "raster data length mismatch");
        Raster { h, w, c, data }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, ch: usize) -> f32 {
        self.data[(y * self.w + x) * self.c + ch]
    }

    #[inline]
    pub fn at_mut(&mut self, y: usize, x: usize, ch: usize) -> &mut f32 {
        &mut self.data[(y * self.w + x) * self.c + ch]
    }
}

/// Writes an RGB raster (values clamped from [0,1]) as an 8-bit PNG.
pub fn save_optical_png(path: &Path, raster: &Raster) -> Result<()> {
    if raster.c != 3 {
        return Err(Error::Image {
            path: path.display().to_string(),
            message: format!("optical raster must have 3 channels, got {}", raster.c),
        });
    }
    let bytes: Vec<u8> = raster
        .data
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = image::RgbImage::from_raw(raster.w as u32, raster.h as u32, bytes)
        .expect("raster dims and buffer length agree");
    img.save(path).map_err(|e| Error::Image {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Writes a single-channel 8-bit PNG (used for ground-truth masks).
pub fn save_gray_png(path: &Path, raster: &Raster) -> Result<()> {
    if raster.c != 1 {
        return Err(Error::Image {
            path: path.display().to_string(),
            message: format!("gray raster must have 1 channel, got {}", raster.c),
        });
    }
    let bytes: Vec<u8> = raster
        .data
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = image::GrayImage::from_raw(raster.w as u32, raster.h as u32, bytes)
        .expect("raster dims and buffer length agree");
    img.save(path).map_err(|e| Error::Image {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Reads an 8-bit PNG into a 3-channel raster scaled to [0,1].
pub fn load_optical_png(path: &Path) -> Result<Raster> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.display().to_string(),
            message: e.to_string(),
        })?
        .into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f32> = img.into_raw().iter().map(|&b| b as f32 / 255.0).collect();
    Ok(Raster::from_data(h, w, 3, data))
}

/// Writes raw float SAR samples; lossless round trip with [`read_sarf`].
pub fn write_sarf(path: &Path, raster: &Raster) -> Result<()> {
    if raster.c != 1 {
        return Err(Error::Image {
            path: path.display().to_string(),
            message: format!("SAR raster must have 1 channel, got {}", raster.c),
        });
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let werr = |e| Error::io(path, e);
    out.write_all(SARF_MAGIC).map_err(werr)?;
    out.write_all(&(raster.h as u32).to_le_bytes()).map_err(werr)?;
    out.write_all(&(raster.w as u32).to_le_bytes()).map_err(werr)?;
    for &v in &raster.data {
        out.write_all(&v.to_le_bytes()).map_err(werr)?;
    }
    out.flush().map_err(werr)
}

/// Reads a SARF file back into a single-channel raster (raw amplitudes,
/// no radiometric processing).
pub fn read_sarf(path: &Path) -> Result<Raster> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut input = BufReader::new(file);
    let bad = |message: String| Error::Image {
        path: path.display().to_string(),
        message,
    };
    let mut magic = [0u8; 4];
    input
        .read_exact(&mut magic)
        .map_err(|e| Error::io(path, e))?;
    if &magic != SARF_MAGIC {
        return Err(bad(format!("bad magic {magic:?}, expected \"SARF\"")));
    }
    let mut word = [0u8; 4];
    input.read_exact(&mut word).map_err(|e| Error::io(path, e))?;
    let h = u32::from_le_bytes(word) as usize;
    input.read_exact(&mut word).map_err(|e| Error::io(path, e))?;
    let w = u32::from_le_bytes(word) as usize;
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() != h * w * 4 {
        return Err(bad(format!(
            "payload holds {} bytes, header implies {}",
            bytes.len(),
            h * w * 4
        )));
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|chunk| f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]))
        .collect();
    Ok(Raster::from_data(h, w, 1, data))
}

/// Log-compresses SAR amplitudes and rescales each image to [0,1].
/// A constant image (zero dynamic range) maps to 0.5 everywhere.
pub fn sar_to_unit_range(raster: &mut Raster) {
    for v in &mut raster.data {
        *v = (1.0 + v.max(0.0)).ln();
    }
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for &v in &raster.data {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi > lo {
        let span = hi - lo;
        for v in &mut raster.data {
            *v = (*v - lo) / span;
        }
    } else {
        for v in &mut raster.data {
            *v = 0.5;
        }
    }
}

/// Loads a raster and applies the modality's radiometric convention:
/// optical PNGs come back in [0,1]; SAR amplitudes are log-compressed
/// and min-max scaled per image.
pub fn load_raster(path: &Path, modality: ModalityTag) -> Result<Raster> {
    match modality {
        ModalityTag::Optical => {
            let r = load_optical_png(path)?;
            debug_assert_eq!(r.c, 3);
            Ok(r)
        }
        ModalityTag::Sar => {
            let mut r = read_sarf(path)?;
            sar_to_unit_range(&mut r);
            Ok(r)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sarf_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("0001_s00_c2_sar.sarf");
        let data: Vec<f32> = (0..24).map(|i| (i as f32 * 0.37).sin().abs() * 9.0).collect();
        let src = Raster::from_data(4, 6, 1, data);
        write_sarf(&path, &src).unwrap();
        let back = read_sarf(&path).unwrap();
        assert_eq!(src, back);
    }

    #[test]
    fn sarf_rejects_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.sarf");
        std::fs::write(&path, b"SURF\x01\x00\x00\x00\x01\x00\x00\x00....").unwrap();
        assert!(read_sarf(&path).is_err());
        let trunc = dir.path().join("trunc.sarf");
        std::fs::write(&trunc, b"SARF\x02\x00\x00\x00\x02\x00\x00\x00\x00\x00").unwrap();
        assert!(read_sarf(&trunc).is_err());
    }

    #[test]
    fn png_round_trip_preserves_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("0001_s00_c1_opt.png");
        let data: Vec<f32> = (0..36).map(|i| (i % 256) as f32 / 255.0).collect();
        let src = Raster::from_data(3, 4, 3, data);
        save_optical_png(&path, &src).unwrap();
        let back = load_optical_png(&path).unwrap();
        assert_eq!(back.h, 3);
        assert_eq!(back.w, 4);
        for (a, b) in src.data.iter().zip(&back.data) {
            assert!((a - b).abs() < 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn all_zero_optical_loads_as_zero() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("0000_s00_c1_opt.png");
        save_optical_png(&path, &Raster::new(2, 2, 3)).unwrap();
        let back = load_raster(&path, ModalityTag::Optical).unwrap();
        assert!(back.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_sar_becomes_half() {
        let mut r = Raster::from_data(2, 2, 1, vec![7.5; 4]);
        sar_to_unit_range(&mut r);
        assert!(r.data.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn sar_scaling_hits_unit_range() {
        let mut r = Raster::from_data(1, 4, 1, vec![0.0, 1.0, 3.0, 10.0]);
        sar_to_unit_range(&mut r);
        assert_eq!(r.data[0], 0.0);
        assert_eq!(r.data[3], 1.0);
        assert!(r.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        // log compression keeps ordering
        assert!(r.data[1] < r.data[2]);
    }
}
