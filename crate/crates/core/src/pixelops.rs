//! Pixel rearrangement (PixelShuffle / PixelUnshuffle), aspect-preserving
//! pad + resize, and PNG conversion for [`ImageTensor`].
//!
//! The shuffle index convention is channel-major:
//! `out[c, h*r + i, w*r + j] = x[c*r*r + i*r + j, h, w]`.
//! The slice kernels [`shuffle_into`] and [`unshuffle_into`] are the single
//! implementation of that convention; the autograd graph calls them too.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A `channels x height x width` image or feature map stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::shape(format!(
                "image dimensions must be positive, got {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::shape(format!(
                "buffer of {} values does not match {channels}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(channels, height, width, vec![value; channels * height * width])
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Result<Self> {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::new(channels, height, width, data)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `(channels, height, width)`
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn channel(&self, c: usize) -> &[f32] {
        let plane = self.height * self.width;
        &self.data[c * plane..(c + 1) * plane]
    }

    /// True when every value lies in `[0, 1]`.
    pub fn is_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Snap every value onto the 8-bit grid `k / 255`, as a PNG round-trip would.
    pub fn quantize_u8(&mut self) {
        for v in &mut self.data {
            *v = f32::from(to_u8(*v)) / 255.0;
        }
    }

    pub fn same_shape(&self, other: &ImageTensor) -> bool {
        self.shape() == other.shape()
    }

    /// Decode an 8-bit RGB PNG (other colour types are converted to RGB).
    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path.as_ref())?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let raw = img.into_raw();
        let plane = w * h;
        let mut data = vec![0.0f32; 3 * plane];
        for (i, px) in raw.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * plane + i] = f32::from(px[c]) / 255.0;
            }
        }
        Self::new(3, h, w, data)
    }

    /// Encode a 3-channel image as 8-bit RGB PNG with round-half-even.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let img = self.to_rgb8()?;
        img.save_with_format(path.as_ref(), image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn to_rgb8(&self) -> Result<image::RgbImage> {
        if self.channels != 3 {
            return Err(Error::shape(format!(
                "PNG export needs 3 channels, got {}",
                self.channels
            )));
        }
        let plane = self.height * self.width;
        let mut raw = Vec::with_capacity(3 * plane);
        for i in 0..plane {
            for c in 0..3 {
                raw.push(to_u8(self.data[c * plane + i]));
            }
        }
        image::RgbImage::from_raw(self.width as u32, self.height as u32, raw)
            .ok_or_else(|| Error::shape("rgb buffer size mismatch"))
    }
}

/// `[0,1]` real to 8-bit with round-half-even.
pub fn to_u8(v: f32) -> u8 {
    (v * 255.0).round_ties_even().clamp(0.0, 255.0) as u8
}

/// Slice kernel for PixelShuffle over one `c x h x w` plane stack.
///
/// `dst` receives `(c / r²) x (h*r) x (w*r)` values.
pub fn shuffle_into(src: &[f32], c: usize, h: usize, w: usize, r: usize, dst: &mut [f32]) {
    let oc = c / (r * r);
    let (oh, ow) = (h * r, w * r);
    debug_assert_eq!(src.len(), c * h * w);
    debug_assert_eq!(dst.len(), oc * oh * ow);
    for co in 0..oc {
        for i in 0..r {
            for j in 0..r {
                let ci = co * r * r + i * r + j;
                let src_plane = &src[ci * h * w..(ci + 1) * h * w];
                for y in 0..h {
                    let row = &src_plane[y * w..(y + 1) * w];
                    let base = (co * oh + y * r + i) * ow + j;
                    for (x, &v) in row.iter().enumerate() {
                        dst[base + x * r] = v;
                    }
                }
            }
        }
    }
}

/// Slice kernel for PixelUnshuffle, the exact inverse of [`shuffle_into`].
///
/// `src` is `c x h x w`; `dst` receives `(c*r²) x (h/r) x (w/r)` values.
pub fn unshuffle_into(src: &[f32], c: usize, h: usize, w: usize, r: usize, dst: &mut [f32]) {
    let (ih, iw) = (h / r, w / r);
    debug_assert_eq!(src.len(), c * h * w);
    debug_assert_eq!(dst.len(), c * r * r * ih * iw);
    for co in 0..c {
        for i in 0..r {
            for j in 0..r {
                let ci = co * r * r + i * r + j;
                let dst_plane = &mut dst[ci * ih * iw..(ci + 1) * ih * iw];
                for y in 0..ih {
                    let base = (co * h + y * r + i) * w + j;
                    let row = &mut dst_plane[y * iw..(y + 1) * iw];
                    for (x, out) in row.iter_mut().enumerate() {
                        *out = src[base + x * r];
                    }
                }
            }
        }
    }
}

pub(crate) fn check_shuffle(c: usize, r: usize) -> Result<()> {
    if r == 0 {
        return Err(Error::shape("shuffle factor must be positive"));
    }
    if !c.is_multiple_of(r * r) {
        return Err(Error::shape(format!(
            "pixel_shuffle needs channels divisible by r^2: C={c}, r={r}"
        )));
    }
    Ok(())
}

pub(crate) fn check_unshuffle(h: usize, w: usize, r: usize) -> Result<()> {
    if r == 0 {
        return Err(Error::shape("shuffle factor must be positive"));
    }
    if !h.is_multiple_of(r) || !w.is_multiple_of(r) {
        return Err(Error::shape(format!(
            "pixel_unshuffle needs spatial dims divisible by r: H={h}, W={w}, r={r}"
        )));
    }
    Ok(())
}

/// Move `r²` channel groups into `r x r` spatial neighbourhoods.
pub fn pixel_shuffle(x: &ImageTensor, r: usize) -> Result<ImageTensor> {
    let (c, h, w) = x.shape();
    check_shuffle(c, r)?;
    let mut out = vec![0.0; x.len()];
    shuffle_into(x.data(), c, h, w, r, &mut out);
    ImageTensor::new(c / (r * r), h * r, w * r, out)
}

/// Inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle(x: &ImageTensor, r: usize) -> Result<ImageTensor> {
    let (c, h, w) = x.shape();
    check_unshuffle(h, w, r)?;
    let mut out = vec![0.0; x.len()];
    unshuffle_into(x.data(), c, h, w, r, &mut out);
    ImageTensor::new(c * r * r, h / r, w / r, out)
}

/// How the canvas is filled when padding to the target aspect ratio.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PadMode {
    #[default]
    Zero,
    Edge,
}

/// Pad the deficient axis symmetrically to the `target_w:target_h` aspect,
/// then bilinearly resize to `target_h x target_w`.
pub fn pad_and_resize(
    img: &ImageTensor,
    target_w: usize,
    target_h: usize,
    mode: PadMode,
) -> Result<ImageTensor> {
    if img.channels() != 3 {
        return Err(Error::arg(format!(
            "pad_and_resize expects 3 channels, got {}",
            img.channels()
        )));
    }
    if target_w == 0 || target_h == 0 {
        return Err(Error::arg("target size must be positive"));
    }
    let (_, h, w) = img.shape();
    if (h, w) == (target_h, target_w) {
        return Ok(img.clone());
    }
    let (ph, pw) = padded_extent(h, w, target_w, target_h);
    let padded = pad_centered(img, ph, pw, mode)?;
    resize_bilinear(&padded, target_h, target_w)
}

/// Canvas size after padding only the deficient axis (rounded up).
pub fn padded_extent(h: usize, w: usize, target_w: usize, target_h: usize) -> (usize, usize) {
    // Compare w/h against target_w/target_h without floating point.
    if w * target_h > h * target_w {
        let ph = (w * target_h).div_ceil(target_w);
        (ph, w)
    } else if w * target_h < h * target_w {
        let pw = (h * target_w).div_ceil(target_h);
        (h, pw)
    } else {
        (h, w)
    }
}

fn pad_centered(img: &ImageTensor, ph: usize, pw: usize, mode: PadMode) -> Result<ImageTensor> {
    let (c, h, w) = img.shape();
    let top = (ph - h) / 2;
    let left = (pw - w) / 2;
    ImageTensor::from_fn(c, ph, pw, |ch, y, x| {
        let inside_y = y >= top && y < top + h;
        let inside_x = x >= left && x < left + w;
        match (inside_y && inside_x, mode) {
            (true, _) => img.get(ch, y - top, x - left),
            (false, PadMode::Zero) => 0.0,
            (false, PadMode::Edge) => {
                let sy = y.saturating_sub(top).min(h - 1);
                let sx = x.saturating_sub(left).min(w - 1);
                img.get(ch, sy, sx)
            }
        }
    })
}

/// Half-pixel-centre bilinear resampling weights for one axis.
pub(crate) fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f32)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let frac = (s - i0 as f64) as f32;
            (i0, i1, frac)
        })
        .collect()
}

pub fn resize_bilinear(img: &ImageTensor, out_h: usize, out_w: usize) -> Result<ImageTensor> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::arg("resize target must be positive"));
    }
    let (c, h, w) = img.shape();
    if (h, w) == (out_h, out_w) {
        return Ok(img.clone());
    }
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    ImageTensor::from_fn(c, out_h, out_w, |ch, y, x| {
        let (y0, y1, fy) = ty[y];
        let (x0, x1, fx) = tx[x];
        let top = img.get(ch, y0, x0) * (1.0 - fx) + img.get(ch, y0, x1) * fx;
        let bottom = img.get(ch, y1, x0) * (1.0 - fx) + img.get(ch, y1, x1) * fx;
        top * (1.0 - fy) + bottom * fy
    })
}
