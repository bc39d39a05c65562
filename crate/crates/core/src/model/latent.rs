use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::tensor::{Real, Tensor};

/// Clip metadata embedded as conditioning.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MicroConditions {
    /// `(height, width)` in pixels.
    pub original_resolution: (u32, u32),
    /// `(top, left)` in pixels.
    pub crop_coords: (u32, u32),
    pub sampling_stride: u32,
    pub num_frames: u32,
}

impl MicroConditions {
    pub fn for_clip(height: usize, width: usize, frames: usize) -> Self {
        Self {
            original_resolution: (height as u32, width as u32),
            crop_coords: (0, 0),
            sampling_stride: 1,
            num_frames: frames as u32,
        }
    }
}

/// A `[T, H, W, C]` latent clip.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoLatent<E> {
    pub data: Tensor<E>,
    pub micro: MicroConditions,
}

impl<E: Real> VideoLatent<E> {
    pub fn new(data: Tensor<E>, micro: MicroConditions) -> Result<Self> {
        if data.ndim() != 4 || data.shape()[0] == 0 {
            return shape_err("video_latent", format!("expected [T, H, W, C], got {:?}", data.shape()));
        }
        Ok(Self { data, micro })
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn frame_len(&self) -> usize {
        self.data.shape()[1..].iter().product()
    }

    pub fn frame(&self, f: usize) -> &[E] {
        let n = self.frame_len();
        &self.data.data()[f * n..(f + 1) * n]
    }

    pub fn frame_mut(&mut self, f: usize) -> &mut [E] {
        let n = self.frame_len();
        &mut self.data.data_mut()[f * n..(f + 1) * n]
    }
}

/// 8-bit RGB video, `[T, H, W, 3]` row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PixelVideo {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl PixelVideo {
    pub fn new(frames: usize, height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != frames * height * width * 3 {
            return shape_err("pixel_video", format!("{} bytes for {frames}x{height}x{width}x3", data.len()));
        }
        Ok(Self {
            frames,
            height,
            width,
            data,
        })
    }

    pub fn black(frames: usize, height: usize, width: usize) -> Self {
        Self {
            frames,
            height,
            width,
            data: vec![0; frames * height * width * 3],
        }
    }

    pub fn frame(&self, f: usize) -> &[u8] {
        let n = self.height * self.width * 3;
        &self.data[f * n..(f + 1) * n]
    }

    pub fn single_frame(&self, f: usize) -> PixelVideo {
        PixelVideo {
            frames: 1,
            height: self.height,
            width: self.width,
            data: self.frame(f).to_vec(),
        }
    }

    /// Concatenates clips of equal frame geometry along time.
    pub fn concat(parts: &[PixelVideo]) -> Result<PixelVideo> {
        let Some(first) = parts.first() else {
            return shape_err("pixel_video", "no clips to concatenate");
        };
        let mut data = Vec::new();
        let mut frames = 0;
        for p in parts {
            if (p.height, p.width) != (first.height, first.width) {
                return shape_err("pixel_video", "mismatched frame geometry");
            }
            frames += p.frames;
            data.extend_from_slice(&p.data);
        }
        PixelVideo::new(frames, first.height, first.width, data)
    }
}

pub const LATENT_CHANNELS: usize = 12;

/// Fixed exactly-invertible pixel codec: each 2x2 RGB block maps to its average plus
/// three Haar detail coefficients per color, giving a `[T, H/2, W/2, 12]` latent with
/// pixel values first mapped to `[-1, 1]`.
pub struct ToyCodec;

impl ToyCodec {
    pub fn encode<E: Real>(video: &PixelVideo) -> Result<Tensor<E>> {
        let (t, h, w) = (video.frames, video.height, video.width);
        if h % 2 != 0 || w % 2 != 0 {
            return shape_err("codec", format!("frame {h}x{w} is not divisible by 2"));
        }
        let (lh, lw) = (h / 2, w / 2);
        let px = |f: usize, y: usize, x: usize, c: usize| {
            video.data[((f * h + y) * w + x) * 3 + c] as f64 / 255.0 * 2.0 - 1.0
        };
        let mut out = Vec::with_capacity(t * lh * lw * LATENT_CHANNELS);
        for f in 0..t {
            for y in 0..lh {
                for x in 0..lw {
                    let mut cell = [0.0f64; LATENT_CHANNELS];
                    for c in 0..3 {
                        let a = px(f, 2 * y, 2 * x, c);
                        let b = px(f, 2 * y, 2 * x + 1, c);
                        let cc = px(f, 2 * y + 1, 2 * x, c);
                        let d = px(f, 2 * y + 1, 2 * x + 1, c);
                        cell[c] = (a + b + cc + d) / 4.0;
                        cell[3 + c] = (a - b + cc - d) / 4.0;
                        cell[6 + c] = (a + b - cc - d) / 4.0;
                        cell[9 + c] = (a - b - cc + d) / 4.0;
                    }
                    out.extend(cell.iter().map(|&v| E::from_f64(v)));
                }
            }
        }
        Tensor::new([t, lh, lw, LATENT_CHANNELS], out)
    }

    pub fn decode<E: Real>(latent: &Tensor<E>) -> Result<PixelVideo> {
        let s = latent.shape();
        if s.len() != 4 || s[3] != LATENT_CHANNELS {
            return shape_err("codec", format!("expected [T, H, W, {LATENT_CHANNELS}], got {s:?}"));
        }
        let (t, lh, lw) = (s[0], s[1], s[2]);
        let (h, w) = (2 * lh, 2 * lw);
        let mut data = vec![0u8; t * h * w * 3];
        let quantize = |v: f64| (((v + 1.0) / 2.0).clamp(0.0, 1.0) * 255.0).round() as u8;
        let ld = latent.data();
        for f in 0..t {
            for y in 0..lh {
                for x in 0..lw {
                    let base = ((f * lh + y) * lw + x) * LATENT_CHANNELS;
                    for c in 0..3 {
                        let ll = ld[base + c].to_f64();
                        let hd = ld[base + 3 + c].to_f64();
                        let vd = ld[base + 6 + c].to_f64();
                        let dd = ld[base + 9 + c].to_f64();
                        let vals = [
                            (2 * y, 2 * x, ll + hd + vd + dd),
                            (2 * y, 2 * x + 1, ll - hd + vd - dd),
                            (2 * y + 1, 2 * x, ll + hd - vd - dd),
                            (2 * y + 1, 2 * x + 1, ll - hd - vd + dd),
                        ];
                        for (py, pxx, v) in vals {
                            data[((f * h + py) * w + pxx) * 3 + c] = quantize(v);
                        }
                    }
                }
            }
        }
        PixelVideo::new(t, h, w, data)
    }
}
