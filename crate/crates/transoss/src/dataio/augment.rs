//! Training-time augmentation on channel-major tensors: horizontal
//! flip, pad-then-random-crop, and random erasing. Evaluation never
//! calls into this module.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    /// Zero-pad this many pixels on every side, then crop back at a
    /// random offset. 0 disables the crop entirely.
    pub crop_pad: usize,
    pub erase_prob: f64,
    /// Erased area as a fraction of the image, sampled uniformly.
    pub erase_area: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_prob: 0.5,
            crop_pad: 4,
            erase_prob: 0.5,
            erase_area: (0.02, 0.4),
        }
    }
}

impl AugmentConfig {
    /// All transforms off; `augment` becomes the identity.
    pub fn disabled() -> Self {
        AugmentConfig {
            flip_prob: 0.0,
            crop_pad: 0,
            erase_prob: 0.0,
            erase_area: (0.02, 0.4),
        }
    }
}

/// Mirrors the image about the vertical axis.
pub fn hflip(t: &Tensor<f64>) -> Tensor<f64> {
    let (c, h, w) = dims3(t);
    let mut out = t.data().to_vec();
    for ch in 0..c {
        for y in 0..h {
            let row = ch * h * w + y * w;
            out[row..row + w].reverse();
        }
    }
    Tensor::from_vec(t.shape().to_vec(), out)
}

fn dims3(t: &Tensor<f64>) -> (usize, usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 3, "augment expects [C, H, W] tensors");
    (s[0], s[1], s[2])
}

fn pad_crop(t: &Tensor<f64>, pad: usize, dy: usize, dx: usize) -> Tensor<f64> {
    let (c, h, w) = dims3(t);
    let src = t.data();
    let mut out = vec![0.0f64; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            // position in the padded canvas, mapped back to source coords
            let sy = (y + dy) as isize - pad as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = (x + dx) as isize - pad as isize;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                out[ch * h * w + y * w + x] = src[ch * h * w + sy as usize * w + sx as usize];
            }
        }
    }
    Tensor::from_vec(t.shape().to_vec(), out)
}

fn erase(t: &mut Tensor<f64>, y0: usize, x0: usize, eh: usize, ew: usize) {
    let (c, h, w) = dims3(t);
    let data = t.data_mut();
    for ch in 0..c {
        for y in y0..(y0 + eh).min(h) {
            for x in x0..(x0 + ew).min(w) {
                data[ch * h * w + y * w + x] = 0.0;
            }
        }
    }
}

/// Applies the configured stochastic transforms. The draw sequence is
/// fixed (flip coin, crop offsets, erase coin, erase geometry) so a
/// given rng state always produces the same output.
pub fn augment(t: &Tensor<f64>, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let (_, h, w) = dims3(t);
    let mut out = if cfg.flip_prob > 0.0 && rng.gen_bool(cfg.flip_prob) {
        hflip(t)
    } else {
        t.clone()
    };
    if cfg.crop_pad > 0 {
        let dy = rng.gen_range(0..=2 * cfg.crop_pad);
        let dx = rng.gen_range(0..=2 * cfg.crop_pad);
        out = pad_crop(&out, cfg.crop_pad, dy, dx);
    }
    if cfg.erase_prob > 0.0 && rng.gen_bool(cfg.erase_prob) {
        let frac = rng.gen_range(cfg.erase_area.0..=cfg.erase_area.1);
        let ratio = rng.gen_range(0.3..=3.3);
        let area = frac * (h * w) as f64;
        let eh = ((area * ratio).sqrt().round() as usize).clamp(1, h);
        let ew = ((area / ratio).sqrt().round() as usize).clamp(1, w);
        let y0 = rng.gen_range(0..=h - eh);
        let x0 = rng.gen_range(0..=w - ew);
        erase(&mut out, y0, x0, eh, ew);
    }
    out
}
