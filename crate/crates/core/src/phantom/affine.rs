use serde::{Deserialize, Serialize};

use super::image::{Image, ImageError};

/// Affine posture: per-axis scale, translation as a fraction of image width,
/// and rotation in radians.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PostureParams {
    pub s_x: f64,
    pub s_y: f64,
    pub t_x: f64,
    pub t_y: f64,
    pub theta: f64,
}

impl PostureParams {
    pub const IDENTITY: Self = Self {
        s_x: 1.0,
        s_y: 1.0,
        t_x: 0.0,
        t_y: 0.0,
        theta: 0.0,
    };

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    pub fn to_array(&self) -> [f64; 5] {
        [self.s_x, self.s_y, self.t_x, self.t_y, self.theta]
    }

    pub fn from_array(a: [f64; 5]) -> Self {
        Self {
            s_x: a[0],
            s_y: a[1],
            t_x: a[2],
            t_y: a[3],
            theta: a[4],
        }
    }

    /// Pixel-space map for an image of `width` columns: scale about the
    /// center, then rotate, then translate.
    pub fn to_affine(&self, height: usize, width: usize) -> Affine {
        let (sin, cos) = self.theta.sin_cos();
        let (cx, cy) = (width as f64 / 2.0, height as f64 / 2.0);
        let w = width as f64;
        // p = R·S·(q − c) + c + t·W
        let a = [[cos * self.s_x, -sin * self.s_y], [sin * self.s_x, cos * self.s_y]];
        let tx = cx + self.t_x * w - (a[0][0] * cx + a[0][1] * cy);
        let ty = cy + self.t_y * w - (a[1][0] * cx + a[1][1] * cy);
        Affine {
            m: [[a[0][0], a[0][1], tx], [a[1][0], a[1][1], ty]],
        }
    }
}

/// 2×3 affine map on continuous pixel coordinates (pixel centers at `i + 0.5`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine {
    pub m: [[f64; 3]; 2],
}

impl Affine {
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.m;
        (m[0][0] * x + m[0][1] * y + m[0][2], m[1][0] * x + m[1][1] * y + m[1][2])
    }

    pub fn inverse(&self) -> Option<Affine> {
        let m = &self.m;
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        if det.abs() < 1e-12 || !det.is_finite() {
            return None;
        }
        let i00 = m[1][1] / det;
        let i01 = -m[0][1] / det;
        let i10 = -m[1][0] / det;
        let i11 = m[0][0] / det;
        Some(Affine {
            m: [
                [i00, i01, -(i00 * m[0][2] + i01 * m[1][2])],
                [i10, i11, -(i10 * m[0][2] + i11 * m[1][2])],
            ],
        })
    }

    /// `self ∘ other`
    pub fn compose(&self, other: &Affine) -> Affine {
        let (a, b) = (&self.m, &other.m);
        let mut m = [[0.0; 3]; 2];
        for r in 0..2 {
            for c in 0..3 {
                m[r][c] = a[r][0] * b[0][c] + a[r][1] * b[1][c] + if c == 2 { a[r][2] } else { 0.0 };
            }
        }
        Affine { m }
    }
}

/// Resamples `image` under the forward map `map` with bilinear
/// interpolation; samples falling outside the source frame read as 0.
pub fn warp(image: &Image, map: &Affine) -> Result<Image, ImageError> {
    if map.m.iter().flatten().any(|v| !v.is_finite()) {
        return Err(ImageError::NonFinite("affine map"));
    }
    let inv = map.inverse().ok_or(ImageError::NonFinite("affine inverse"))?;
    let (h, w) = image.dims();
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let (sx, sy) = inv.apply(c as f64 + 0.5, r as f64 + 0.5);
            out[r * w + c] = bilinear(image, sx - 0.5, sy - 0.5).clamp(0.0, 1.0);
        }
    }
    Image::new(h, w, out)
}

/// Applies posture `psi` to `image`.
pub fn apply_affine(image: &Image, psi: &PostureParams) -> Result<Image, ImageError> {
    if !psi.is_finite() {
        return Err(ImageError::NonFinite("posture"));
    }
    if *psi == PostureParams::IDENTITY {
        return Ok(image.clamped());
    }
    warp(image, &psi.to_affine(image.height(), image.width()))
}

fn bilinear(img: &Image, x: f64, y: f64) -> f64 {
    let (h, w) = (img.height() as isize, img.width() as isize);
    let x0 = x.floor();
    let y0 = y.floor();
    let (fx, fy) = (x - x0, y - y0);
    let (x0, y0) = (x0 as isize, y0 as isize);
    let px = |r: isize, c: isize| -> f64 {
        if r < 0 || c < 0 || r >= h || c >= w {
            0.0
        } else {
            img.get(r as usize, c as usize)
        }
    };
    let top = px(y0, x0) * (1.0 - fx) + px(y0, x0 + 1) * fx;
    let bottom = px(y0 + 1, x0) * (1.0 - fx) + px(y0 + 1, x0 + 1) * fx;
    top * (1.0 - fy) + bottom * fy
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob(h: usize, w: usize, cx: f64, cy: f64, sigma: f64) -> Image {
        let mut px = vec![0.0; h * w];
        for r in 0..h {
            for c in 0..w {
                let d2 = (c as f64 - cx).powi(2) + (r as f64 - cy).powi(2);
                px[r * w + c] = (-d2 / (2.0 * sigma * sigma)).exp();
            }
        }
        Image::new(h, w, px).unwrap()
    }

    #[test]
    fn identity_is_a_no_op() {
        let img = blob(32, 32, 13.0, 17.0, 4.0);
        assert_eq!(apply_affine(&img, &PostureParams::IDENTITY).unwrap(), img);
        let warped = warp(&img, &PostureParams::IDENTITY.to_affine(32, 32)).unwrap();
        assert_eq!(warped, img);
    }

    #[test]
    fn translation_by_a_quarter_width_shifts_centroid_eight_pixels() {
        let img = blob(32, 32, 10.0, 15.5, 2.5);
        let (c0, r0) = img.centroid();
        let psi = PostureParams {
            t_x: 0.25,
            ..PostureParams::IDENTITY
        };
        let (c1, r1) = apply_affine(&img, &psi).unwrap().centroid();
        assert!((c1 - c0 - 8.0).abs() < 0.5, "shift {}", c1 - c0);
        assert!((r1 - r0).abs() < 0.5);
    }

    #[test]
    fn round_trip_through_inverse_is_close() {
        let img = blob(32, 32, 16.0, 15.0, 5.0);
        let psi = PostureParams {
            s_x: 1.1,
            s_y: 0.92,
            t_x: 0.05,
            t_y: -0.04,
            theta: 0.12,
        };
        let fwd = psi.to_affine(32, 32);
        let there = warp(&img, &fwd).unwrap();
        let back = warp(&there, &fwd.inverse().unwrap()).unwrap();
        assert!(img.mean_abs_diff(&back).unwrap() < 0.02);
    }

    #[test]
    fn non_finite_posture_is_rejected() {
        let img = Image::zeros(4, 4);
        let psi = PostureParams {
            theta: f64::NAN,
            ..PostureParams::IDENTITY
        };
        assert!(apply_affine(&img, &psi).is_err());
    }

    #[test]
    fn composed_translations_add() {
        let img = blob(32, 32, 15.0, 16.0, 4.0);
        let a = PostureParams {
            t_x: 0.05,
            t_y: 0.02,
            ..PostureParams::IDENTITY
        };
        let b = PostureParams {
            t_x: -0.02,
            t_y: 0.06,
            ..PostureParams::IDENTITY
        };
        let sum = PostureParams {
            t_x: 0.03,
            t_y: 0.08,
            ..PostureParams::IDENTITY
        };
        let twice = apply_affine(&apply_affine(&img, &a).unwrap(), &b).unwrap();
        let once = apply_affine(&img, &sum).unwrap();
        assert!(twice.mean_abs_diff(&once).unwrap() < 0.02);
    }
}
