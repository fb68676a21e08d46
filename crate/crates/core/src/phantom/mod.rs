//! Procedural chest phantoms with known posture, attribute labels and
//! template reports.

mod affine;
mod image;
pub mod io;
mod render;
mod report;

pub use affine::{apply_affine, warp, Affine, PostureParams};
pub use image::{canonical_mean, Image, ImageError, CANONICAL_MEAN_COUNT};
pub use report::{labels_from_report, make_report};

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::numcore::{sha256_hex, RngStream};

/// Number of label classes: effusion, cardiomegaly, opacity, device.
pub const K_LABELS: usize = 4;
pub const DEFAULT_IMAGE_SIZE: usize = 32;
pub const DEFAULT_N_TRAIN: usize = 5000;
pub const DEFAULT_N_TEST: usize = 1000;
pub const DATASET_VERSION: u32 = 1;

pub const SCALE_RANGE: (f64, f64) = (0.85, 1.15);
pub const MAX_TRANSLATION: f64 = 0.10;
pub const MAX_ROTATION: f64 = 0.15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpacitySize {
    Small,
    Large,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Opacity {
    pub side: Side,
    pub size: OpacitySize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhantomAttrs {
    pub effusion: bool,
    pub cardiomegaly: bool,
    pub opacity: Option<Opacity>,
    pub device: bool,
    pub jitter_seed: u64,
}

impl PhantomAttrs {
    pub fn negative(jitter_seed: u64) -> Self {
        Self {
            effusion: false,
            cardiomegaly: false,
            opacity: None,
            device: false,
            jitter_seed,
        }
    }

    pub fn labels(&self) -> [u8; K_LABELS] {
        [
            self.effusion as u8,
            self.cardiomegaly as u8,
            self.opacity.is_some() as u8,
            self.device as u8,
        ]
    }

    /// Same findings, ignoring anatomical jitter.
    pub fn same_findings(&self, other: &Self) -> bool {
        self.effusion == other.effusion
            && self.cardiomegaly == other.cardiomegaly
            && self.opacity == other.opacity
            && self.device == other.device
    }

    fn sample(stream: &mut RngStream) -> Self {
        let effusion = stream.bernoulli(0.5);
        let cardiomegaly = stream.bernoulli(0.5);
        let opacity = stream.bernoulli(0.5).then(|| Opacity {
            side: if stream.bernoulli(0.5) { Side::Left } else { Side::Right },
            size: if stream.bernoulli(0.5) {
                OpacitySize::Small
            } else {
                OpacitySize::Large
            },
        });
        let device = stream.bernoulli(0.5);
        Self {
            effusion,
            cardiomegaly,
            opacity,
            device,
            jitter_seed: stream.next_u64(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSample {
    pub image: Image,
    pub attrs: PhantomAttrs,
    pub psi_true: PostureParams,
    pub report: String,
    pub labels: [u8; K_LABELS],
}

/// Draws a posture uniformly from the generator's documented ranges.
pub fn sample_posture(stream: &mut RngStream) -> PostureParams {
    let (lo, hi) = SCALE_RANGE;
    PostureParams {
        s_x: stream.uniform_in(lo, hi),
        s_y: stream.uniform_in(lo, hi),
        t_x: stream.uniform_in(-MAX_TRANSLATION, MAX_TRANSLATION),
        t_y: stream.uniform_in(-MAX_TRANSLATION, MAX_TRANSLATION),
        theta: stream.uniform_in(-MAX_ROTATION, MAX_ROTATION),
    }
}

/// Renders `attrs` under posture `psi` at `size × size`.
pub fn render_phantom(attrs: &PhantomAttrs, psi: &PostureParams, size: usize) -> Result<Image, ImageError> {
    if !psi.is_finite() {
        return Err(ImageError::NonFinite("posture"));
    }
    let map = psi.to_affine(size, size);
    Image::new(size, size, render::render(attrs, &map, size, size))
}

/// One phantom at the default 32×32 size.
pub fn generate_sample(stream: &mut RngStream) -> PhantomSample {
    generate_sample_sized(stream, DEFAULT_IMAGE_SIZE)
}

pub fn generate_sample_sized(stream: &mut RngStream, size: usize) -> PhantomSample {
    let attrs = PhantomAttrs::sample(stream);
    let psi_true = sample_posture(stream);
    let report = make_report(&attrs, stream);
    let image = render_phantom(&attrs, &psi_true, size).expect("sampled posture is finite");
    PhantomSample {
        labels: attrs.labels(),
        image,
        attrs,
        psi_true,
        report,
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub image_size: usize,
    pub version: u32,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        format!(
            "seed={}\nn_train={}\nn_test={}\nimage_size={}\nversion={}\n",
            self.seed, self.n_train, self.n_test, self.image_size, self.version
        )
    }

    /// Hash identifying the dataset this manifest describes.
    pub fn hash(&self) -> String {
        sha256_hex(self.to_text().as_bytes())[..16].to_string()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<PhantomSample>,
    pub test: Vec<PhantomSample>,
    pub manifest: Manifest,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DatasetError {
    #[error("split sizes must be at least 1 (train {n_train}, test {n_test})")]
    EmptySplit { n_train: usize, n_test: usize },
    #[error("image size must be at least 8, got {0}")]
    ImageSize(usize),
}

pub fn sample_stream(master_seed: u64, split: &str, index: usize) -> RngStream {
    RngStream::new(master_seed, format!("phantom/{split}/{index}"))
}

pub fn make_dataset(master_seed: u64, n_train: usize, n_test: usize) -> Result<Dataset, DatasetError> {
    make_dataset_sized(master_seed, n_train, n_test, DEFAULT_IMAGE_SIZE)
}

/// Train and test splits, each sample drawn from its own labelled stream.
pub fn make_dataset_sized(
    master_seed: u64,
    n_train: usize,
    n_test: usize,
    image_size: usize,
) -> Result<Dataset, DatasetError> {
    if n_train == 0 || n_test == 0 {
        return Err(DatasetError::EmptySplit { n_train, n_test });
    }
    if image_size < 8 {
        return Err(DatasetError::ImageSize(image_size));
    }
    let split = |name: &str, n: usize| -> Vec<PhantomSample> {
        (0..n)
            .map(|i| generate_sample_sized(&mut sample_stream(master_seed, name, i), image_size))
            .collect()
    };
    Ok(Dataset {
        train: split("train", n_train),
        test: split("test", n_test),
        manifest: Manifest {
            seed: master_seed,
            n_train,
            n_test,
            image_size,
            version: DATASET_VERSION,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_stream_same_sample() {
        let a = generate_sample(&mut RngStream::new(4, "s"));
        let b = generate_sample(&mut RngStream::new(4, "s"));
        assert_eq!(a, b);
        assert!(a.image.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn all_negative_attrs_give_zero_labels() {
        assert_eq!(PhantomAttrs::negative(3).labels(), [0, 0, 0, 0]);
    }

    #[test]
    fn posture_ranges_hold_over_many_draws() {
        let mut s = RngStream::new(1, "psi");
        for _ in 0..10_000 {
            let p = sample_posture(&mut s);
            for v in [p.s_x, p.s_y] {
                assert!((0.85..=1.15).contains(&v));
            }
            assert!(p.t_x.abs() <= 0.10 && p.t_y.abs() <= 0.10);
            assert!(p.theta.abs() <= 0.15);
        }
    }

    #[test]
    fn findings_are_visible() {
        let base = PhantomAttrs::negative(11);
        let id = PostureParams::IDENTITY;
        let plain = render_phantom(&base, &id, 32).unwrap();
        let variants = [
            PhantomAttrs { effusion: true, ..base.clone() },
            PhantomAttrs { cardiomegaly: true, ..base.clone() },
            PhantomAttrs {
                opacity: Some(Opacity {
                    side: Side::Left,
                    size: OpacitySize::Small,
                }),
                ..base.clone()
            },
            PhantomAttrs { device: true, ..base.clone() },
        ];
        for v in &variants {
            let img = render_phantom(v, &id, 32).unwrap();
            assert!(img.mean_abs_diff(&plain).unwrap() > 0.004, "{v:?}");
        }
    }

    #[test]
    fn left_opacity_lands_on_image_right() {
        let base = PhantomAttrs::negative(2);
        let id = PostureParams::IDENTITY;
        let plain = render_phantom(&base, &id, 32).unwrap();
        let with = |side| {
            render_phantom(
                &PhantomAttrs {
                    opacity: Some(Opacity {
                        side,
                        size: OpacitySize::Large,
                    }),
                    ..base.clone()
                },
                &id,
                32,
            )
            .unwrap()
        };
        let excess_col = |img: &Image| {
            let (mut m, mut sx) = (0.0, 0.0);
            for r in 0..32 {
                for c in 0..32 {
                    let d = img.get(r, c) - plain.get(r, c);
                    m += d;
                    sx += d * c as f64;
                }
            }
            sx / m
        };
        assert!(excess_col(&with(Side::Left)) > 16.0);
        assert!(excess_col(&with(Side::Right)) < 16.0);
    }

    #[test]
    fn splits_use_disjoint_streams_and_replay() {
        let a = make_dataset(5, 6, 4).unwrap();
        let b = make_dataset(5, 6, 4).unwrap();
        assert_eq!(a.manifest, b.manifest);
        assert_eq!(a, b);
        for t in &a.test {
            assert!(a.train.iter().all(|s| s.image != t.image));
        }
        assert!(make_dataset(5, 0, 4).is_err());
    }

    #[test]
    fn report_keywords_recover_labels() {
        let mut s = RngStream::new(8, "r");
        for _ in 0..500 {
            let smp = generate_sample(&mut s);
            assert_eq!(labels_from_report(&smp.report), smp.labels, "{}", smp.report);
            assert!(!smp.report.is_empty());
        }
    }
}
