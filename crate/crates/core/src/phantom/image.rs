use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ImageError {
    #[error("image is {height}x{width} but holds {len} pixels")]
    Size { height: usize, width: usize, len: usize },
    #[error("images differ in size: {0:?} vs {1:?}")]
    Mismatch((usize, usize), (usize, usize)),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("no images given")]
    Empty,
    #[error("asked for {k} images, only {n} given")]
    TooFew { k: usize, n: usize },
}

/// Row-major grayscale image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self, ImageError> {
        if height == 0 || width == 0 || pixels.len() != height * width {
            return Err(ImageError::Size {
                height,
                width,
                len: pixels.len(),
            });
        }
        Ok(Self { height, width, pixels })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            pixels: vec![0.0; height * width],
        }
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

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    pub fn clamped(&self) -> Self {
        Self {
            pixels: self.pixels.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
            ..*self
        }
    }

    pub fn is_finite(&self) -> bool {
        self.pixels.iter().all(|v| v.is_finite())
    }

    pub fn mean_abs_diff(&self, other: &Image) -> Result<f64, ImageError> {
        if self.dims() != other.dims() {
            return Err(ImageError::Mismatch(self.dims(), other.dims()));
        }
        let s: f64 = self.pixels.iter().zip(&other.pixels).map(|(a, b)| (a - b).abs()).sum();
        Ok(s / self.pixels.len() as f64)
    }

    /// Intensity-weighted centroid `(col, row)` in pixel-center coordinates.
    pub fn centroid(&self) -> (f64, f64) {
        let (mut sx, mut sy, mut m) = (0.0, 0.0, 0.0);
        for r in 0..self.height {
            for c in 0..self.width {
                let v = self.get(r, c);
                sx += v * c as f64;
                sy += v * r as f64;
                m += v;
            }
        }
        if m == 0.0 {
            return ((self.width as f64 - 1.0) / 2.0, (self.height as f64 - 1.0) / 2.0);
        }
        (sx / m, sy / m)
    }
}

/// Pixel-wise mean of the first `k` images.
pub fn canonical_mean(samples: &[Image], k: usize) -> Result<Image, ImageError> {
    if samples.is_empty() || k == 0 {
        return Err(ImageError::Empty);
    }
    if k > samples.len() {
        return Err(ImageError::TooFew { k, n: samples.len() });
    }
    let dims = samples[0].dims();
    let mut acc = vec![0.0; dims.0 * dims.1];
    for img in &samples[..k] {
        if img.dims() != dims {
            return Err(ImageError::Mismatch(dims, img.dims()));
        }
        for (a, v) in acc.iter_mut().zip(&img.pixels) {
            *a += v;
        }
    }
    for a in &mut acc {
        *a /= k as f64;
    }
    Image::new(dims.0, dims.1, acc)
}

/// Number of images averaged into the canonical reference by default.
pub const CANONICAL_MEAN_COUNT: usize = 500;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_of_copies_is_the_image() {
        let img = Image::new(2, 2, vec![0.1, 0.9, 0.3, 0.7]).unwrap();
        let m = canonical_mean(&vec![img.clone(); 5], 5).unwrap();
        for (a, b) in m.pixels().iter().zip(img.pixels()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(canonical_mean(&[], 3).is_err());
    }

    #[test]
    fn mean_stays_in_unit_range() {
        let imgs: Vec<Image> = (0..7)
            .map(|i| Image::new(1, 3, vec![i as f64 / 7.0, 1.0, 0.0]).unwrap())
            .collect();
        let m = canonical_mean(&imgs, 4).unwrap();
        assert!(m.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!((m.pixels()[0] - 6.0 / 28.0).abs() < 1e-15);
    }
}
