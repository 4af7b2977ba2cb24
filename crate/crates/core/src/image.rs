//! Planar RGB float images and the single resampler used across the pipeline.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::Result;

pub const CHANNELS: usize = 3;

/// Three-channel image stored channel-major (`c * h * w + y * w + x`).
/// Values are nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), CHANNELS * height * width, "pixel buffer size");
        Self {
            height,
            width,
            data,
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::new(height, width, vec![0.0; CHANNELS * height * width])
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let plane = height * width;
        let mut data = Vec::with_capacity(CHANNELS * plane);
        for v in rgb {
            data.extend(std::iter::repeat(v).take(plane));
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn is_valid(&self) -> bool {
        self.data
            .iter()
            .all(|v| v.is_finite() && (0.0..=1.0).contains(v))
    }

    pub fn clamp01(mut self) -> Self {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
        self
    }

    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Image {
        assert!(top + h <= self.height && left + w <= self.width, "crop out of bounds");
        let mut out = Vec::with_capacity(CHANNELS * h * w);
        for c in 0..CHANNELS {
            for y in top..top + h {
                let row = (c * self.height + y) * self.width;
                out.extend_from_slice(&self.data[row + left..row + left + w]);
            }
        }
        Image::new(h, w, out)
    }

    pub fn paste(&mut self, src: &Image, top: usize, left: usize) {
        assert!(top + src.height <= self.height && left + src.width <= self.width);
        for c in 0..CHANNELS {
            for y in 0..src.height {
                let dst = (c * self.height + top + y) * self.width + left;
                let s = (c * src.height + y) * src.width;
                self.data[dst..dst + src.width].copy_from_slice(&src.data[s..s + src.width]);
            }
        }
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut out = self.clone();
        for c in 0..CHANNELS {
            for y in 0..self.height {
                let row = (c * self.height + y) * self.width;
                out.data[row..row + self.width].reverse();
            }
        }
        out
    }

    /// Bilinear resize with antialiasing on downscale (triangle filter whose
    /// support widens with the scale factor). Equal dims return an exact copy.
    pub fn resize(&self, out_h: usize, out_w: usize) -> Image {
        if (out_h, out_w) == self.dims() {
            return self.clone();
        }
        let rows = filter_taps(self.height, out_h);
        let cols = filter_taps(self.width, out_w);
        // Horizontal pass then vertical pass.
        let mut tmp = vec![0.0f32; CHANNELS * self.height * out_w];
        for c in 0..CHANNELS {
            for y in 0..self.height {
                let src = &self.data[(c * self.height + y) * self.width..][..self.width];
                let dst = &mut tmp[(c * self.height + y) * out_w..][..out_w];
                for (x, taps) in cols.iter().enumerate() {
                    dst[x] = taps.iter().map(|&(i, wt)| src[i] * wt).sum();
                }
            }
        }
        let mut out = vec![0.0f32; CHANNELS * out_h * out_w];
        for c in 0..CHANNELS {
            for (y, taps) in rows.iter().enumerate() {
                let dst = (c * out_h + y) * out_w;
                for &(i, wt) in taps {
                    let src = &tmp[(c * self.height + i) * out_w..][..out_w];
                    for x in 0..out_w {
                        out[dst + x] += src[x] * wt;
                    }
                }
            }
        }
        Image::new(out_h, out_w, out)
    }

    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update((self.height as u64).to_le_bytes());
        h.update((self.width as u64).to_le_bytes());
        for v in &self.data {
            h.update(v.to_bits().to_le_bytes());
        }
        h.finalize().into()
    }

    pub fn digest_hex(&self) -> String {
        hex::encode(self.digest())
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let px = |c| (self.get(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Image {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = Image::zeros(h, w);
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..CHANNELS {
                out.set(c, y as usize, x as usize, p.0[c] as f32 / 255.0);
            }
        }
        out
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Image> {
        crate::audit::record(path);
        let img = image::open(path)?.to_rgb8();
        Ok(Image::from_rgb8(&img))
    }
}

/// Per-output-index list of `(source index, weight)`; weights sum to 1.
fn filter_taps(in_len: usize, out_len: usize) -> Vec<Vec<(usize, f32)>> {
    let scale = in_len as f64 / out_len as f64;
    let support = scale.max(1.0);
    (0..out_len)
        .map(|i| {
            let center = (i as f64 + 0.5) * scale;
            let lo = (center - support).floor().max(0.0) as usize;
            let hi = ((center + support).ceil() as usize).min(in_len);
            let mut taps: Vec<(usize, f64)> = (lo..hi)
                .filter_map(|j| {
                    let d = ((j as f64 + 0.5) - center).abs() / support;
                    (d < 1.0).then_some((j, 1.0 - d))
                })
                .collect();
            if taps.is_empty() {
                let j = (center.floor() as usize).min(in_len - 1);
                taps.push((j, 1.0));
            }
            let total: f64 = taps.iter().map(|t| t.1).sum();
            taps.into_iter().map(|(j, w)| (j, (w / total) as f32)).collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Image {
        let data = (0..CHANNELS * h * w).map(|i| (i % 97) as f32 / 97.0).collect();
        Image::new(h, w, data)
    }

    #[test]
    fn crop_then_paste_restores_region() {
        let img = ramp(8, 10);
        let patch = img.crop(2, 3, 4, 5);
        assert_eq!(patch.get(1, 0, 0), img.get(1, 2, 3));
        let mut canvas = Image::zeros(8, 10);
        canvas.paste(&patch, 2, 3);
        assert_eq!(canvas.crop(2, 3, 4, 5), patch);
    }

    #[test]
    fn resize_identity_and_constant() {
        let img = ramp(6, 6);
        assert_eq!(img.resize(6, 6), img);
        let flat = Image::filled(5, 7, [0.25, 0.5, 0.75]);
        for (h, w) in [(16, 16), (2, 3), (10, 1)] {
            let r = flat.resize(h, w);
            assert!(r.data().iter().enumerate().all(|(i, v)| {
                let c = i / (h * w);
                (v - [0.25, 0.5, 0.75][c]).abs() < 1e-6
            }));
        }
    }

    #[test]
    fn downscale_preserves_linear_ramp_in_interior() {
        let mut img = Image::zeros(8, 8);
        for y in 0..8 {
            for x in 0..8 {
                img.set(0, y, x, x as f32 / 8.0);
            }
        }
        let r = img.resize(8, 4);
        // output column 1 is centred between source columns 2 and 3
        assert!((r.get(0, 3, 1) - 2.5 / 8.0).abs() < 1e-6);
        assert!((r.get(0, 3, 2) - 4.5 / 8.0).abs() < 1e-6);
    }

    #[test]
    fn png_roundtrip_quantizes_to_u8() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        let img = ramp(3, 4);
        img.save_png(&p).unwrap();
        let back = Image::load(&p).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }
}
