//! Analytic rendering of the chest phantom.
//!
//! Coordinates are normalized: `u` runs left to right and `v` top to bottom,
//! both over `[-1, 1]`. Sides follow the radiographic convention, so the
//! patient's left lung is drawn on the image right.

use super::affine::Affine;
use super::{Opacity, OpacitySize, PhantomAttrs, Side};
use crate::numcore::RngStream;

const SUPERSAMPLE: usize = 4;

const BODY: f64 = 0.50;
const LUNG: f64 = 0.12;
const MEDIASTINUM: f64 = 0.70;
const HEART: f64 = 0.82;
const DEVICE: f64 = 1.0;

/// Small per-sample deviations of the anatomy, drawn from the jitter seed.
#[derive(Clone, Copy, Debug)]
struct Jitter {
    body_rx: f64,
    lung_rx: f64,
    lung_ry: f64,
    lung_cy: f64,
    heart_cx: f64,
    heart_cy: f64,
    blob_du: f64,
    blob_dv: f64,
    lead: [f64; 4],
}

impl Jitter {
    fn draw(seed: u64) -> Self {
        let mut s = RngStream::new(seed, "phantom/jitter");
        let mut j = |amp: f64| s.uniform_in(-amp, amp);
        Self {
            body_rx: j(0.02),
            lung_rx: j(0.015),
            lung_ry: j(0.02),
            lung_cy: j(0.015),
            heart_cx: j(0.02),
            heart_cy: j(0.015),
            blob_du: j(1.0),
            blob_dv: j(1.0),
            lead: [j(0.05), j(0.05), j(0.04), j(0.04)],
        }
    }
}

fn in_ellipse(u: f64, v: f64, cu: f64, cv: f64, ru: f64, rv: f64) -> bool {
    let a = (u - cu) / ru;
    let b = (v - cv) / rv;
    a * a + b * b <= 1.0
}

fn side_sign(side: Side) -> f64 {
    match side {
        Side::Left => 1.0,
        Side::Right => -1.0,
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0);
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

struct Scene {
    attrs: PhantomAttrs,
    jit: Jitter,
    lung_rx: f64,
    lung_ry: f64,
    lung_cy: f64,
    heart: (f64, f64, f64, f64),
    blob: Option<(f64, f64, f64)>,
    lead: [(f64, f64); 3],
}

impl Scene {
    fn new(attrs: &PhantomAttrs) -> Self {
        let jit = Jitter::draw(attrs.jitter_seed);
        let lung_rx = 0.25 + jit.lung_rx;
        let lung_ry = 0.50 + jit.lung_ry;
        let lung_cy = -0.08 + jit.lung_cy;
        let (hrx, hry) = if attrs.cardiomegaly { (0.31, 0.23) } else { (0.19, 0.15) };
        let heart = (0.07 + jit.heart_cx, 0.22 + jit.heart_cy, hrx, hry);
        let blob = attrs.opacity.map(|Opacity { side, size }| {
            let sigma = match size {
                OpacitySize::Small => 0.08,
                OpacitySize::Large => 0.13,
            };
            (
                side_sign(side) * 0.34 + 0.05 * jit.blob_du,
                -0.12 + 0.14 * jit.blob_dv,
                sigma,
            )
        });
        let lead = [
            (-0.50 + jit.lead[0], -0.78 + jit.lead[1]),
            (-0.28 + jit.lead[2], -0.30 + jit.lead[3]),
            (0.02 + jit.lead[2], 0.18 + jit.lead[1]),
        ];
        Self {
            attrs: attrs.clone(),
            jit,
            lung_rx,
            lung_ry,
            lung_cy,
            heart,
            blob,
            lead,
        }
    }

    fn diaphragm(&self, u: f64, cu: f64) -> f64 {
        let x = (u - cu) / self.lung_rx;
        0.30 + 0.12 * x * x
    }

    fn intensity(&self, u: f64, v: f64) -> f64 {
        if !in_ellipse(u, v, 0.0, 0.02, 0.80 + self.jit.body_rx, 0.93) {
            return 0.0;
        }
        let mut value = BODY;
        if u.abs() < 0.09 && v > -0.88 && v < 0.45 {
            value = MEDIASTINUM;
        }
        for cu in [-0.34, 0.34] {
            let d = self.diaphragm(u, cu);
            if in_ellipse(u, v, cu, self.lung_cy, self.lung_rx, self.lung_ry) && v < d {
                value = LUNG;
                if self.attrs.effusion && v > d - 0.24 {
                    value += 0.58 * (v - (d - 0.24)) / 0.24;
                }
            }
        }
        let (hu, hv, hru, hrv) = self.heart;
        if in_ellipse(u, v, hu, hv, hru, hrv) {
            value = HEART;
        }
        if let Some((bu, bv, sigma)) = self.blob {
            let d2 = (u - bu).powi(2) + (v - bv).powi(2);
            value += 0.6 * (-d2 / (2.0 * sigma * sigma)).exp();
        }
        if self.attrs.device {
            let d = segment_distance((u, v), self.lead[0], self.lead[1])
                .min(segment_distance((u, v), self.lead[1], self.lead[2]));
            if d < 0.035 {
                value = DEVICE;
            }
        }
        value.clamp(0.0, 1.0)
    }
}

/// Renders the phantom for `attrs` on an `h × w` grid under posture `map`
/// (a forward pixel-space map; identity gives the canonical pose). Every
/// supersample is pulled back through the inverse map and evaluated
/// analytically; points that land outside the canonical frame read as 0.
pub(crate) fn render(attrs: &PhantomAttrs, map: &Affine, h: usize, w: usize) -> Vec<f64> {
    let scene = Scene::new(attrs);
    let inv = map.inverse().unwrap_or(*map);
    let mut out = vec![0.0; h * w];
    let n = SUPERSAMPLE as f64;
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let x = c as f64 + (sx as f64 + 0.5) / n;
                    let y = r as f64 + (sy as f64 + 0.5) / n;
                    let (qx, qy) = inv.apply(x, y);
                    let u = qx / w as f64 * 2.0 - 1.0;
                    let v = qy / h as f64 * 2.0 - 1.0;
                    if u.abs() <= 1.0 && v.abs() <= 1.0 {
                        acc += scene.intensity(u, v);
                    }
                }
            }
            out[r * w + c] = (acc / (n * n)).clamp(0.0, 1.0);
        }
    }
    out
}
