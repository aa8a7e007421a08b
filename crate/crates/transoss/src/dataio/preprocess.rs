//! From decoded rasters to model-ready tensors: orientation
//! canonicalization, bilinear resize, per-channel standardization, and
//! metric size features.

use crate::dataio::manifest::{DatasetStats, ImageItem};
use crate::dataio::raster::Raster;
use crate::error::{Error, Result};
use crate::model::ModalityTag;
use crate::tensor::Tensor;

/// Ship-size inputs for the size embedding: standardized width and
/// length plus the raw (unit-free) length/width aspect ratio.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SizeFeatures {
    pub i_w: f64,
    pub i_h: f64,
    pub aspect: f64,
}

impl SizeFeatures {
    pub fn as_array(self) -> [f64; 3] {
        [self.i_w, self.i_h, self.aspect]
    }
}

#[derive(Debug, Clone)]
pub struct PreprocessConfig {
    pub target_h: usize,
    pub target_w: usize,
    /// Rotate 90 degrees when the source is taller than wide, so the
    /// long (length) axis always runs horizontally.
    pub canonicalize_orientation: bool,
    /// Apply dataset-statistics standardization; requires stats.
    pub standardize: bool,
}

impl PreprocessConfig {
    pub fn for_model(input_h: usize, input_w: usize) -> Self {
        PreprocessConfig {
            target_h: input_h,
            target_w: input_w,
            canonicalize_orientation: true,
            standardize: true,
        }
    }
}

/// Rotates 90 degrees clockwise (bottom edge becomes the left edge);
/// output is `w x h`.
pub fn rotate90(src: &Raster) -> Raster {
    let mut out = Raster::new(src.w, src.h, src.c);
    for y in 0..src.w {
        for x in 0..src.h {
            for ch in 0..src.c {
                *out.at_mut(y, x, ch) = src.at(src.h - 1 - x, y, ch);
            }
        }
    }
    out
}

/// Bilinear resize with pixel-center alignment. Matching dimensions
/// reproduce the input exactly.
pub fn bilinear_resize(src: &Raster, out_h: usize, out_w: usize) -> Raster {
    if src.h == out_h && src.w == out_w {
        return src.clone();
    }
    let mut out = Raster::new(out_h, out_w, src.c);
    let sy = src.h as f64 / out_h as f64;
    let sx = src.w as f64 / out_w as f64;
    for y in 0..out_h {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (src.h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(src.h - 1);
        let wy = fy - y0 as f64;
        for x in 0..out_w {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (src.w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(src.w - 1);
            let wx = fx - x0 as f64;
            for ch in 0..src.c {
                let v00 = src.at(y0, x0, ch) as f64;
                let v01 = src.at(y0, x1, ch) as f64;
                let v10 = src.at(y1, x0, ch) as f64;
                let v11 = src.at(y1, x1, ch) as f64;
                let top = v00 + (v01 - v00) * wx;
                let bot = v10 + (v11 - v10) * wx;
                *out.at_mut(y, x, ch) = (top + (bot - top) * wy) as f32;
            }
        }
    }
    out
}

/// Metric size features from source crop extents. Length is the larger
/// extent, width the smaller, so the features do not depend on crop
/// orientation; only the first two are z-scored.
pub fn size_features(src_h: u32, src_w: u32, gsd_m: f64, stats: &DatasetStats) -> SizeFeatures {
    let a = src_h as f64 * gsd_m;
    let b = src_w as f64 * gsd_m;
    let (len_m, wid_m) = if a >= b { (a, b) } else { (b, a) };
    SizeFeatures {
        i_w: (wid_m - stats.wid_mean) / stats.wid_std,
        i_h: (len_m - stats.len_mean) / stats.len_std,
        aspect: len_m / wid_m,
    }
}

/// Full pipeline for one item: orientation, resize, standardization,
/// channel-major tensor layout, and size features.
pub fn preprocess(
    item: &ImageItem,
    cfg: &PreprocessConfig,
    stats: Option<&DatasetStats>,
) -> Result<(Tensor<f64>, SizeFeatures)> {
    let stats = match (cfg.standardize, stats) {
        (true, None) => {
            return Err(Error::Config(
                "standardization requested but no dataset statistics supplied".into(),
            ))
        }
        (true, Some(s)) => s.clone(),
        (false, _) => DatasetStats::identity(),
    };
    let oriented = if cfg.canonicalize_orientation && item.pixels.h > item.pixels.w {
        rotate90(&item.pixels)
    } else {
        item.pixels.clone()
    };
    let resized = bilinear_resize(&oriented, cfg.target_h, cfg.target_w);
    let c = resized.c;
    let (h, w) = (resized.h, resized.w);
    let mut data = vec![0.0f64; c * h * w];
    for ch in 0..c {
        let (mean, std) = match item.modality {
            ModalityTag::Optical => (stats.opt_mean[ch], stats.opt_std[ch]),
            ModalityTag::Sar => (stats.sar_mean, stats.sar_std),
        };
        for y in 0..h {
            for x in 0..w {
                data[ch * h * w + y * w + x] = (resized.at(y, x, ch) as f64 - mean) / std;
            }
        }
    }
    let size = size_features(item.source_h_px, item.source_w_px, item.gsd_m, &stats);
    Ok((Tensor::from_vec(vec![c, h, w], data), size))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item_from(pixels: Raster, modality: ModalityTag, src_h: u32, src_w: u32) -> ImageItem {
        ImageItem {
            pixels,
            modality,
            object_id: 1,
            sequence_id: 0,
            camera_id: 1,
            gsd_m: 0.75,
            source_h_px: src_h,
            source_w_px: src_w,
        }
    }

    #[test]
    fn resize_identity_when_dims_match() {
        let data: Vec<f32> = (0..24).map(|i| i as f32).collect();
        let src = Raster::from_data(2, 4, 3, data.clone());
        let out = bilinear_resize(&src, 2, 4);
        assert_eq!(out.data, data);
    }

    #[test]
    fn resize_halves_constant_and_gradient_images() {
        let src = Raster::from_data(2, 2, 1, vec![5.0; 4]);
        let out = bilinear_resize(&src, 1, 1);
        assert_eq!(out.data, vec![5.0]);

        // 1x4 ramp downsampled to 1x2: centers at src x=0.5 and x=2.5
        let ramp = Raster::from_data(1, 4, 1, vec![0.0, 1.0, 2.0, 3.0]);
        let half = bilinear_resize(&ramp, 1, 2);
        assert_eq!(half.data, vec![0.5, 2.5]);
    }

    #[test]
    fn rotation_makes_long_side_horizontal() {
        // 3 tall x 2 wide, distinct values
        let src = Raster::from_data(3, 2, 1, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let rot = rotate90(&src);
        assert_eq!((rot.h, rot.w), (2, 3));
        // clockwise: left column (1,3,5) becomes the top row reversed
        assert_eq!(rot.data, vec![5.0, 3.0, 1.0, 6.0, 4.0, 2.0]);
    }

    #[test]
    fn size_features_hand_case() {
        let stats = DatasetStats::identity();
        let sf = size_features(50, 100, 0.75, &stats);
        assert_eq!(sf.i_h, 75.0);
        assert_eq!(sf.i_w, 37.5);
        assert_eq!(sf.aspect, 2.0);
        // orientation of the crop does not matter
        let sf_rot = size_features(100, 50, 0.75, &stats);
        assert_eq!(sf, sf_rot);
    }

    #[test]
    fn size_features_standardize() {
        let mut stats = DatasetStats::identity();
        stats.len_mean = 60.0;
        stats.len_std = 15.0;
        stats.wid_mean = 20.0;
        stats.wid_std = 5.0;
        let sf = size_features(40, 120, 0.75, &stats); // 90 m x 30 m
        assert_eq!(sf.i_h, 2.0);
        assert_eq!(sf.i_w, 2.0);
        assert_eq!(sf.aspect, 3.0);
    }

    #[test]
    fn preprocess_requires_stats_when_standardizing() {
        let item = item_from(Raster::new(4, 8, 3), ModalityTag::Optical, 4, 8);
        let cfg = PreprocessConfig::for_model(4, 8);
        assert!(preprocess(&item, &cfg, None).is_err());
        assert!(preprocess(&item, &cfg, Some(&DatasetStats::identity())).is_ok());
    }

    #[test]
    fn preprocess_layout_is_channel_major() {
        let mut px = Raster::new(1, 2, 3);
        *px.at_mut(0, 0, 0) = 0.1;
        *px.at_mut(0, 1, 0) = 0.2;
        *px.at_mut(0, 0, 1) = 0.3;
        *px.at_mut(0, 1, 1) = 0.4;
        *px.at_mut(0, 0, 2) = 0.5;
        *px.at_mut(0, 1, 2) = 0.6;
        let item = item_from(px, ModalityTag::Optical, 1, 2);
        let cfg = PreprocessConfig {
            target_h: 1,
            target_w: 2,
            canonicalize_orientation: false,
            standardize: false,
        };
        let (t, _) = preprocess(&item, &cfg, None).unwrap();
        assert_eq!(t.shape(), &[3, 1, 2]);
        let got: Vec<f64> = t.data().to_vec();
        let want = [0.1f32, 0.2, 0.3, 0.4, 0.5, 0.6];
        for (g, w) in got.iter().zip(want.iter()) {
            assert!((g - *w as f64).abs() < 1e-7);
        }
    }

    #[test]
    fn standardization_centers_channels() {
        let mut stats = DatasetStats::identity();
        stats.sar_mean = 0.5;
        stats.sar_std = 0.25;
        let mut px = Raster::new(2, 2, 1);
        px.data.copy_from_slice(&[0.5, 0.75, 0.25, 0.5]);
        let item = item_from(px, ModalityTag::Sar, 2, 2);
        let cfg = PreprocessConfig {
            target_h: 2,
            target_w: 2,
            canonicalize_orientation: true,
            standardize: true,
        };
        let (t, _) = preprocess(&item, &cfg, Some(&stats)).unwrap();
        assert_eq!(t.data(), &[0.0, 1.0, -1.0, 0.0]);
    }

    #[test]
    fn tall_sources_are_canonicalized_before_resize() {
        // 8 tall x 4 wide source into a 2x4 target: without rotation the
        // aspect mapping would squash; with canonicalization the long axis
        // lands on the wide output axis.
        let mut px = Raster::new(8, 4, 1);
        for y in 0..8 {
            for x in 0..4 {
                *px.at_mut(y, x, 0) = y as f32;
            }
        }
        let item = item_from(px, ModalityTag::Sar, 8, 4);
        let cfg = PreprocessConfig {
            target_h: 2,
            target_w: 4,
            canonicalize_orientation: true,
            standardize: false,
        };
        let (t, _) = preprocess(&item, &cfg, None).unwrap();
        assert_eq!(t.shape(), &[1, 2, 4]);
        // after rotation the gradient runs along x, so columns differ
        let row0: Vec<f64> = (0..4).map(|x| t.data()[x]).collect();
        assert!(row0.windows(2).all(|w| (w[0] - w[1]).abs() > 1e-9));
    }
}
