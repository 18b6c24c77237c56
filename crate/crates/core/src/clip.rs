//! Frame sequences, fixed-length clips, and the raw `CSLC` clip file.
//!
//! `CSLC` layout (little-endian): magic `CSLC`, then frame count, height and
//! width as `u32`, then `frames·height·width·3` 32-bit floats in
//! frame-row-column-channel order. The same format stores whole videos.

use std::path::Path;

use crate::binio::{put_f32s, read_file, write_atomic, ByteReader};
use crate::error::{Error, Result};

pub const CLIP_MAGIC: &[u8; 4] = b"CSLC";

/// `frames × height × width × 3` pixels, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Frames {
    frames: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Frames {
    pub fn new(frames: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if frames == 0 {
            return Err(Error::EmptyVideo);
        }
        if height == 0 || width == 0 || data.len() != frames * height * width * 3 {
            return Err(Error::shape("frames", &[frames, height, width, 3], &[data.len()]));
        }
        Ok(Self {
            frames,
            height,
            width,
            data,
        })
    }

    pub fn from_frames(frames: &[Vec<f32>], height: usize, width: usize) -> Result<Self> {
        let data: Vec<f32> = frames.iter().flatten().copied().collect();
        Self::new(frames.len(), height, width, data)
    }

    pub fn len(&self) -> usize {
        self.frames
    }

    pub fn is_empty(&self) -> bool {
        self.frames == 0
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn frame_size(&self) -> usize {
        self.height * self.width * 3
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.frame_size();
        &self.data[t * n..(t + 1) * n]
    }

    /// Frames `[start, start + len)`.
    pub fn window(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.frames {
            return Err(Error::Contract(format!(
                "window [{start}, {}) outside video of {} frames",
                start + len,
                self.frames
            )));
        }
        let n = self.frame_size();
        Self::new(len, self.height, self.width, self.data[start * n..(start + len) * n].to_vec())
    }

    /// Builds a sequence by picking frames by index (repeats allowed).
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let n = self.frame_size();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            if i >= self.frames {
                return Err(Error::Contract(format!("frame {i} outside video of {} frames", self.frames)));
            }
            data.extend_from_slice(self.frame(i));
        }
        Self::new(indices.len(), self.height, self.width, data)
    }

    pub fn hflip(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for row in self.data.chunks(self.width * 3) {
            for px in row.chunks(3).rev() {
                data.extend_from_slice(px);
            }
        }
        Self { data, ..self.clone() }
    }

    /// Adds `delta` to every channel, clamped to `[0, 1]`.
    pub fn brighten(&self, delta: f32) -> Self {
        Self {
            data: self.data.iter().map(|&v| (v + delta).clamp(0.0, 1.0)).collect(),
            ..self.clone()
        }
    }

    /// Translates content by `(dx, dy)` pixels, replicating edge pixels.
    pub fn shift(&self, dx: i32, dy: i32) -> Self {
        let (h, w) = (self.height as i32, self.width as i32);
        let mut data = vec![0.0; self.data.len()];
        for t in 0..self.frames {
            let src = self.frame(t);
            let dst = &mut data[t * self.frame_size()..(t + 1) * self.frame_size()];
            for y in 0..h {
                let sy = (y - dy).clamp(0, h - 1);
                for x in 0..w {
                    let sx = (x - dx).clamp(0, w - 1);
                    let d = ((y * w + x) * 3) as usize;
                    let s = ((sy * w + sx) * 3) as usize;
                    dst[d..d + 3].copy_from_slice(&src[s..s + 3]);
                }
            }
        }
        Self { data, ..self.clone() }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.data.len() * 4);
        out.extend_from_slice(CLIP_MAGIC);
        for d in [self.frames, self.height, self.width] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        put_f32s(&mut out, &self.data);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(CLIP_MAGIC)?;
        let frames = r.u32("frame count")? as usize;
        let height = r.u32("height")? as usize;
        let width = r.u32("width")? as usize;
        if frames == 0 || height == 0 || width == 0 {
            return Err(Error::format(4, "zero dimension in clip header"));
        }
        let n = frames
            .checked_mul(height)
            .and_then(|x| x.checked_mul(width))
            .and_then(|x| x.checked_mul(3))
            .ok_or_else(|| Error::format(4, "clip dimensions overflow"))?;
        let data = r.f32s(n, "pixel payload")?;
        if !r.is_at_end() {
            return Err(Error::format(r.offset(), "trailing bytes after pixels"));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::format(16 + 4 * i as u64, "non-finite pixel"));
        }
        Self::new(frames, height, width, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&read_file(path)?)
    }
}

/// A model-input clip; pixel values are clamped to `[0, 1]` on construction.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipTensor(Frames);

impl ClipTensor {
    pub fn new(frames: Frames) -> Self {
        let data = frames.data.iter().map(|&v| v.clamp(0.0, 1.0)).collect();
        Self(Frames { data, ..frames })
    }

    pub fn frames(&self) -> &Frames {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.frames
    }

    pub fn is_empty(&self) -> bool {
        self.0.frames == 0
    }

    pub fn hflip(&self) -> Self {
        Self(self.0.hflip())
    }

    /// Cuts the clip into `patch × patch` squares: one row of `patch²·3`
    /// values per (frame, spatial index), frame-major, spatial index in
    /// raster order, and (dy, dx, channel) order within a row.
    pub fn patchify(&self, patch: usize) -> Vec<f32> {
        let f = &self.0;
        let (gh, gw) = (f.height / patch, f.width / patch);
        let mut out = Vec::with_capacity(f.data.len());
        for t in 0..f.frames {
            let frame = f.frame(t);
            for py in 0..gh {
                for px in 0..gw {
                    for dy in 0..patch {
                        let y = py * patch + dy;
                        let start = (y * f.width + px * patch) * 3;
                        out.extend_from_slice(&frame[start..start + patch * 3]);
                    }
                }
            }
        }
        out
    }
}

/// Inverse of [`ClipTensor::patchify`].
pub fn unpatchify(
    rows: &[f32],
    frames: usize,
    height: usize,
    width: usize,
    patch: usize,
) -> Result<Frames> {
    if rows.len() != frames * height * width * 3 || !height.is_multiple_of(patch) || !width.is_multiple_of(patch) {
        return Err(Error::shape("unpatchify", &[frames, height, width, patch], &[rows.len()]));
    }
    let (gh, gw) = (height / patch, width / patch);
    let mut data = vec![0.0; rows.len()];
    let mut src = rows.chunks(patch * 3);
    for t in 0..frames {
        let frame = &mut data[t * height * width * 3..(t + 1) * height * width * 3];
        for py in 0..gh {
            for px in 0..gw {
                for dy in 0..patch {
                    let y = py * patch + dy;
                    let start = (y * width + px * patch) * 3;
                    frame[start..start + patch * 3].copy_from_slice(src.next().unwrap());
                }
            }
        }
    }
    Frames::new(frames, height, width, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(frames: usize, h: usize, w: usize) -> Frames {
        let n = frames * h * w * 3;
        Frames::new(frames, h, w, (0..n).map(|i| i as f32 / n as f32).collect()).unwrap()
    }

    #[test]
    fn hflip_involution() {
        let f = ramp(2, 3, 5);
        assert_eq!(f.hflip().hflip(), f);
    }

    #[test]
    fn hflip_width_one_unchanged() {
        let f = ramp(3, 4, 1);
        assert_eq!(f.hflip(), f);
    }

    #[test]
    fn hflip_moves_column_zero_to_last() {
        let (h, w) = (2, 4);
        let mut data = vec![0.0; h * w * 3];
        data[0..3].copy_from_slice(&[1.0, 1.0, 1.0]);
        let f = Frames::new(1, h, w, data).unwrap().hflip();
        let last = (w - 1) * 3;
        assert_eq!(&f.data()[last..last + 3], &[1.0, 1.0, 1.0]);
        assert_eq!(f.data().iter().filter(|&&v| v == 1.0).count(), 3);
    }

    #[test]
    fn clip_values_clamped() {
        let f = Frames::new(1, 1, 1, vec![-0.5, 0.5, 1.5]).unwrap();
        assert_eq!(ClipTensor::new(f).frames().data(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn patchify_roundtrip() {
        let clip = ClipTensor::new(ramp(2, 8, 8));
        let rows = clip.patchify(4);
        assert_eq!(rows.len(), 2 * 8 * 8 * 3);
        let back = unpatchify(&rows, 2, 8, 8, 4).unwrap();
        assert_eq!(&back, clip.frames());
        // first row is the top-left 4×4 square of frame 0
        assert_eq!(&rows[..12], &clip.frames().frame(0)[..12]);
        assert_eq!(&rows[12..24], &clip.frames().frame(0)[8 * 3..8 * 3 + 12]);
    }

    #[test]
    fn cslc_roundtrip_and_truncation() {
        let f = ramp(3, 2, 2);
        let bytes = f.encode();
        assert_eq!(Frames::decode(&bytes).unwrap(), f);
        assert!(matches!(Frames::decode(&bytes[..bytes.len() - 2]), Err(Error::Format { .. })));
        assert!(matches!(Frames::decode(b"XXXX"), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn shift_replicates_edges() {
        let f = Frames::new(1, 1, 3, vec![0.1, 0.1, 0.1, 0.2, 0.2, 0.2, 0.3, 0.3, 0.3]).unwrap();
        let s = f.shift(1, 0);
        assert_eq!(s.data(), &[0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.2, 0.2, 0.2]);
    }
}
