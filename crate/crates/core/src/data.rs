//! Synthetic multi-organ images with exact masks, and spatial augmentation.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::blocks::SIZE_MULTIPLE;
use crate::error::{cfg_err, dim_err, Result};
use crate::tensor::{LabelMap, Tensor};

/// Generator settings. Class 0 is background; organs are painted in class
/// order, so later classes occlude earlier ones and regions stay disjoint.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub image_size: usize,
    pub num_classes: usize,
    /// Inclusive range of blobs per organ class.
    pub blobs_per_class: (usize, usize),
    /// Per-class `(mean, std)` of the intensity jitter applied per image.
    pub intensity_bands: Vec<(f64, f64)>,
    pub noise_std: f64,
    /// Classes drawn as a single tiny blob.
    pub small_class_ids: Vec<u8>,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            num_classes: 4,
            blobs_per_class: (1, 2),
            intensity_bands: vec![(0.0, 0.05), (1.0, 0.1), (-1.0, 0.1), (2.0, 0.1)],
            noise_std: 0.25,
            small_class_ids: vec![3],
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || !self.image_size.is_multiple_of(SIZE_MULTIPLE) {
            return Err(cfg_err!(
                "image_size must be a positive multiple of {}, got {}",
                SIZE_MULTIPLE,
                self.image_size
            ));
        }
        if self.num_classes < 2 || self.num_classes > 256 {
            return Err(cfg_err!(
                "num_classes must be in 2..=256, got {}",
                self.num_classes
            ));
        }
        if self.intensity_bands.len() != self.num_classes {
            return Err(cfg_err!(
                "intensity_bands has {} entries for {} classes",
                self.intensity_bands.len(),
                self.num_classes
            ));
        }
        let (lo, hi) = self.blobs_per_class;
        if lo == 0 || lo > hi {
            return Err(cfg_err!(
                "blobs_per_class must be a nonempty range starting at >= 1, got {lo}..={hi}"
            ));
        }
        if let Some(c) = self
            .small_class_ids
            .iter()
            .find(|&&c| c == 0 || c as usize >= self.num_classes)
        {
            return Err(cfg_err!("small class {} is not an organ class", c));
        }
        if !(self.noise_std >= 0.0) {
            return Err(cfg_err!("noise_std must be >= 0, got {}", self.noise_std));
        }
        Ok(())
    }
}

/// One single-channel image and its mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `1 × H × W`
    pub image: Tensor,
    pub mask: LabelMap,
}

/// Stacked images `B × 1 × H × W` with their masks.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub images: Tensor,
    pub masks: Vec<LabelMap>,
}

impl Batch {
    pub fn from_samples(samples: &[&Sample]) -> Result<Batch> {
        let images: Vec<Tensor> = samples.iter().map(|s| s.image.clone()).collect();
        Ok(Batch {
            images: Tensor::stack(&images)?,
            masks: samples.iter().map(|s| s.mask.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }
}

/// Star-shaped blob: an ellipse whose radius is modulated by a low-frequency sinusoid.
struct Blob {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    angle: f64,
    wobble: f64,
    lobes: f64,
    phase: f64,
}

impl Blob {
    fn draw(rng: &mut ChaCha8Rng, size: f64, radius: (f64, f64)) -> Blob {
        let ry = rng.gen_range(radius.0..radius.1);
        let rx = rng.gen_range(radius.0..radius.1);
        let margin = ry.max(rx) + 1.0;
        Blob {
            cy: rng.gen_range(margin..size - margin),
            cx: rng.gen_range(margin..size - margin),
            ry,
            rx,
            angle: rng.gen_range(0.0..PI),
            wobble: rng.gen_range(0.0..0.2),
            lobes: rng.gen_range(2..5) as f64,
            phase: rng.gen_range(0.0..2.0 * PI),
        }
    }

    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let (s, c) = (libm::sin(self.angle), libm::cos(self.angle));
        let u = (c * dx + s * dy) / self.rx;
        let v = (-s * dx + c * dy) / self.ry;
        let theta = libm::atan2(v, u);
        let r = 1.0 + self.wobble * libm::sin(self.lobes * theta + self.phase);
        u * u + v * v <= r * r
    }
}

fn generate_one(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Sample {
    let n = spec.image_size;
    let size = n as f64;
    let mut mask = LabelMap::filled(n, n, 0);
    let mut classes: Vec<u8> = (1..spec.num_classes as u8)
        .filter(|c| !spec.small_class_ids.contains(c))
        .collect();
    classes.extend(spec.small_class_ids.iter().copied());
    for c in classes {
        let small = spec.small_class_ids.contains(&c);
        let (count, radius) = if small {
            (1, (size * 0.045, size * 0.07))
        } else {
            (
                rng.gen_range(spec.blobs_per_class.0..=spec.blobs_per_class.1),
                (size * 0.1, size * 0.22),
            )
        };
        for _ in 0..count {
            let blob = Blob::draw(rng, size, radius);
            for y in 0..n {
                for x in 0..n {
                    if blob.contains(y as f64 + 0.5, x as f64 + 0.5) {
                        mask.set(y, x, c);
                    }
                }
            }
        }
    }
    let means: Vec<f64> = spec
        .intensity_bands
        .iter()
        .map(|&(m, s)| {
            let z: f64 = StandardNormal.sample(rng);
            m + s * z
        })
        .collect();
    let image = Tensor::from_fn(&[1, n, n], |i| {
        let z: f64 = StandardNormal.sample(rng);
        (means[mask.labels()[i] as usize] + spec.noise_std * z) as f32
    });
    Sample { image, mask }
}

/// `n` deterministic samples; sample `i` depends only on `(seed, i)`.
pub fn generate(spec: &SynthSpec, n: usize) -> Result<Vec<Sample>> {
    spec.validate()?;
    Ok((0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64);
            generate_one(spec, &mut rng)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AugOp {
    HFlip,
    VFlip,
    /// Quarter turn counter-clockwise (square images only).
    Rot90,
}

fn remap<U: Copy>(src: &[U], h: usize, w: usize, op: AugOp) -> Vec<U> {
    (0..h * w)
        .map(|i| {
            let (r, c) = (i / w, i % w);
            let (sr, sc) = match op {
                AugOp::HFlip => (r, w - 1 - c),
                AugOp::VFlip => (h - 1 - r, c),
                // output (r, c) takes input (c, w - 1 - r)
                AugOp::Rot90 => (c, w - 1 - r),
            };
            src[sr * w + sc]
        })
        .collect()
}

/// Apply one spatial transform to every channel of the image and to the mask.
pub fn apply(sample: &Sample, op: AugOp) -> Result<Sample> {
    let s = sample.image.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    if h != sample.mask.height() || w != sample.mask.width() {
        return Err(dim_err!(
            "image {:?} and mask {}x{} disagree",
            s,
            sample.mask.height(),
            sample.mask.width()
        ));
    }
    if op == AugOp::Rot90 && h != w {
        return Err(dim_err!("rot90 needs a square image, got {}x{}", h, w));
    }
    let mut data = Vec::with_capacity(sample.image.len());
    for ch in 0..c {
        data.extend(remap(
            &sample.image.data()[ch * h * w..(ch + 1) * h * w],
            h,
            w,
            op,
        ));
    }
    Ok(Sample {
        image: Tensor::new(s, data)?,
        mask: LabelMap::new(h, w, remap(sample.mask.labels(), h, w, op))?,
    })
}

/// Each op fires with probability 1/2 per sample (rot90 turns 1 to 3 times).
pub fn augment(samples: &[Sample], ops: &[AugOp], seed: u64) -> Result<Vec<Sample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    samples
        .iter()
        .map(|s| {
            let mut out = s.clone();
            for &op in ops {
                if rng.gen_bool(0.5) {
                    let turns = if op == AugOp::Rot90 {
                        rng.gen_range(1..4)
                    } else {
                        1
                    };
                    for _ in 0..turns {
                        out = apply(&out, op)?;
                    }
                }
            }
            Ok(out)
        })
        .collect()
}
