//! Multi-scale per-pixel features: raw intensity, then for every window
//! size a box mean, a box standard deviation and the gradient magnitude of
//! the box-mean map. Borders use mirror padding without edge repetition.

use crate::data::PatchRecord;
use crate::scalar::Scalar;

use super::LearnerError;

/// Channel-major feature tensor (`channels × height × width`).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    /// Same values laid out pixel-major, the layout used for dot products.
    pub fn to_pixel_major(&self) -> PixelFeatures<T> {
        let n = self.height * self.width;
        let mut data = vec![T::zero(); n * self.channels];
        for c in 0..self.channels {
            for (i, &v) in self.channel(c).iter().enumerate() {
                data[i * self.channels + c] = v;
            }
        }
        PixelFeatures { pixels: n, features: self.channels, data }
    }
}

/// Pixel-major feature matrix (`pixels × features`).
#[derive(Debug, Clone, PartialEq)]
pub struct PixelFeatures<T> {
    pub pixels: usize,
    pub features: usize,
    pub data: Vec<T>,
}

impl<T> PixelFeatures<T> {
    #[inline]
    pub fn pixel(&self, i: usize) -> &[T] {
        &self.data[i * self.features..(i + 1) * self.features]
    }
}

pub fn feature_count(image_channels: usize, scales: &[usize]) -> usize {
    image_channels * (1 + 3 * scales.len())
}

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as isize;
    let r = if i < 0 { -i } else if i >= n { 2 * (n - 1) - i } else { i };
    r as usize
}

/// Computes the feature tensor of `patch`.
///
/// Channel order: raw intensities for every image channel, then per scale
/// `[box mean × C, box std × C, gradient magnitude × C]`.
pub fn extract_features<T: Scalar>(patch: &PatchRecord, scales: &[usize]) -> Result<FeatureMap<T>, LearnerError> {
    let (h, w) = (patch.height, patch.width);
    for &s in scales {
        if s > h.min(w) {
            return Err(LearnerError::ScaleTooLarge { scale: s, side: h.min(w) });
        }
    }
    let n = h * w;
    let cc = patch.channels;
    let channels = feature_count(cc, scales);
    let mut data = Vec::with_capacity(channels * n);
    for c in 0..cc {
        data.extend(patch.channel(c).iter().map(|&v| T::lit(v as f64)));
    }
    for &s in scales {
        let mut means = Vec::with_capacity(cc * n);
        let mut stds = Vec::with_capacity(cc * n);
        let mut grads = Vec::with_capacity(cc * n);
        for c in 0..cc {
            let (m, sd) = box_stats::<T>(patch.channel(c), h, w, s);
            grads.extend(gradient_magnitude(&m, h, w));
            means.extend(m);
            stds.extend(sd);
        }
        data.extend(means);
        data.extend(stds);
        data.extend(grads);
    }
    Ok(FeatureMap { channels, height: h, width: w, data })
}

/// Box mean and population standard deviation over `scale × scale` windows.
///
/// Sums run over offsets from the first pixel, so a constant image yields
/// exactly its value as mean and exactly zero deviation.
pub fn box_stats<T: Scalar>(plane: &[f32], h: usize, w: usize, scale: usize) -> (Vec<T>, Vec<T>) {
    let r = (scale / 2) as isize;
    let reference = T::lit(plane[0] as f64);
    let (ph, pw) = (h + 2 * r as usize, w + 2 * r as usize);
    // Integral images of offsets and squared offsets over the padded plane.
    let mut s1 = vec![T::zero(); (ph + 1) * (pw + 1)];
    let mut s2 = vec![T::zero(); (ph + 1) * (pw + 1)];
    for y in 0..ph {
        let sy = reflect(y as isize - r, h);
        let mut row1 = T::zero();
        let mut row2 = T::zero();
        for x in 0..pw {
            let sx = reflect(x as isize - r, w);
            let o = T::lit(plane[sy * w + sx] as f64) - reference;
            row1 = row1 + o;
            row2 = row2 + o * o;
            let idx = (y + 1) * (pw + 1) + x + 1;
            s1[idx] = s1[idx - (pw + 1)] + row1;
            s2[idx] = s2[idx - (pw + 1)] + row2;
        }
    }
    let count = T::from_count(scale * scale);
    let k = scale;
    let window = |s: &[T], y: usize, x: usize| {
        let a = y * (pw + 1) + x;
        let b = (y + k) * (pw + 1) + x;
        s[b + k] - s[b] - s[a + k] + s[a]
    };
    let mut means = Vec::with_capacity(h * w);
    let mut stds = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let m1 = window(&s1, y, x) / count;
            let m2 = window(&s2, y, x) / count;
            let var = (m2 - m1 * m1).max(T::zero());
            means.push(reference + m1);
            stds.push(var.sqrt());
        }
    }
    (means, stds)
}

/// Central-difference gradient magnitude with mirrored borders.
pub fn gradient_magnitude<T: Scalar>(plane: &[T], h: usize, w: usize) -> Vec<T> {
    let half = T::lit(0.5);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let xl = reflect(x as isize - 1, w);
            let xr = reflect(x as isize + 1, w);
            let yu = reflect(y as isize - 1, h);
            let yd = reflect(y as isize + 1, h);
            let gx = (plane[y * w + xr] - plane[y * w + xl]) * half;
            let gy = (plane[yd * w + x] - plane[yu * w + x]) * half;
            out.push((gx * gx + gy * gy).sqrt());
        }
    }
    out
}
