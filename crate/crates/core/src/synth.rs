//! Seeded synthetic face and occlusion corpus.
//!
//! Faces of one class are random convex combinations of a few smooth,
//! nonnegative basis images, so each class spans a low-dimensional cone.
//! Occlusions overwrite a region with a category texture: a dark or bright
//! level, a fixed smooth pattern, a stripe pattern and a few per-instance
//! variation modes.

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Result, SocError};
use crate::model::{Block, BlockKind, BlockedDictionary, ImageVector, OcclusionMask};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegionKind {
    /// Fixed rectangle, horizontally centered, in the upper part of the image.
    Rectangle,
    /// Rectangle of the same size at a random position.
    RandomRectangle,
    /// Bottom rows.
    LowerBand,
    /// Top rows.
    UpperBand,
}

impl fmt::Display for RegionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RegionKind::Rectangle => "rectangle",
            RegionKind::RandomRectangle => "random-rectangle",
            RegionKind::LowerBand => "lower-band",
            RegionKind::UpperBand => "upper-band",
        })
    }
}

impl FromStr for RegionKind {
    type Err = SocError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rectangle" => Ok(RegionKind::Rectangle),
            "random-rectangle" => Ok(RegionKind::RandomRectangle),
            "lower-band" => Ok(RegionKind::LowerBand),
            "upper-band" => Ok(RegionKind::UpperBand),
            other => Err(SocError::UnknownShape(other.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OcclusionShape {
    pub name: String,
    pub region: RegionKind,
    pub fraction: f64,
}

impl OcclusionShape {
    pub fn new(name: impl Into<String>, region: RegionKind, fraction: f64) -> Self {
        Self {
            name: name.into(),
            region,
            fraction,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub classes: usize,
    /// Training (gallery) images per class.
    pub samples_per_class: usize,
    pub test_per_class: usize,
    pub height: usize,
    pub width: usize,
    pub subspace_dim: usize,
    pub occlusion_shapes: Vec<OcclusionShape>,
    pub noise_sigma: f64,
    /// Scale of the class-specific part of each face relative to the shared mean face.
    pub class_contrast: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: 20,
            samples_per_class: 7,
            test_per_class: 7,
            height: 83,
            width: 60,
            subspace_dim: 3,
            occlusion_shapes: vec![
                OcclusionShape::new("sunglasses", RegionKind::Rectangle, 0.25),
                OcclusionShape::new("scarf", RegionKind::LowerBand, 0.6),
            ],
            noise_sigma: 0.01,
            class_contrast: 1.0,
            seed: 1,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SocError::BadSpec(m));
        if self.classes == 0 || self.height == 0 || self.width == 0 {
            return bad("classes, height and width must be positive".into());
        }
        if self.subspace_dim == 0 || self.subspace_dim > self.samples_per_class {
            return bad(format!(
                "subspace_dim {} must be in 1..={}",
                self.subspace_dim, self.samples_per_class
            ));
        }
        if !(self.noise_sigma >= 0.0) || !(self.class_contrast >= 0.0) {
            return bad("noise_sigma and class_contrast must be >= 0".into());
        }
        for s in &self.occlusion_shapes {
            if !(s.fraction > 0.0 && s.fraction < 1.0) {
                return bad(format!("area fraction of `{}` must be in (0, 1)", s.name));
            }
        }
        Ok(())
    }

    pub fn m(&self) -> usize {
        self.height * self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn occlusion(&self, name: &str) -> Result<&OcclusionShape> {
        self.occlusion_shapes
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| SocError::UnknownShape(name.to_string()))
    }
}

/// Label of face class `c` (zero-based).
pub fn class_label(c: usize) -> String {
    format!("s{:03}", c + 1)
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn str_hash(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Independent generator for one (seed, stream, a, b) tuple.
fn stream_rng(seed: u64, stream: &str, a: u64, b: u64) -> ChaCha8Rng {
    let k = splitmix(splitmix(splitmix(seed ^ str_hash(stream)) ^ a) ^ b);
    ChaCha8Rng::seed_from_u64(k)
}

/// Zero-mean, unit-variance low-pass noise (separable binomial filter).
fn smooth_field(rng: &mut ChaCha8Rng, h: usize, w: usize, passes: usize) -> Vec<f64> {
    let mut f: Vec<f64> = (0..h * w).map(|_| StandardNormal.sample(rng)).collect();
    const K: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];
    let mut tmp = vec![0.0; h * w];
    let clampi = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    for _ in 0..passes {
        for r in 0..h {
            for c in 0..w {
                tmp[r * w + c] = (0..5)
                    .map(|k| K[k] * f[r * w + clampi(c as isize + k as isize - 2, w)])
                    .sum();
            }
        }
        for r in 0..h {
            for c in 0..w {
                f[r * w + c] = (0..5)
                    .map(|k| K[k] * tmp[clampi(r as isize + k as isize - 2, h) * w + c])
                    .sum();
            }
        }
    }
    let n = f.len() as f64;
    let mean = f.iter().sum::<f64>() / n;
    let sd = (f.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let sd = if sd > 0.0 { sd } else { 1.0 };
    f.iter().map(|v| (v - mean) / sd).collect()
}

fn face_passes(spec: &SynthSpec) -> usize {
    let s = spec.height.min(spec.width) / 12;
    (s * s).max(1)
}

/// Basis images of face classes; class `c` is defined for any `c`, including
/// classes outside the gallery.
pub struct FaceModel<'a> {
    spec: &'a SynthSpec,
    mean: Vec<f64>,
}

impl<'a> FaceModel<'a> {
    pub fn new(spec: &'a SynthSpec) -> Self {
        let (h, w) = spec.shape();
        let mean = smooth_field(
            &mut stream_rng(spec.seed, "mean-face", 0, 0),
            h,
            w,
            face_passes(spec),
        );
        Self { spec, mean }
    }

    pub fn class_bases(&self, c: usize) -> Vec<Vec<f64>> {
        let spec = self.spec;
        let (h, w) = spec.shape();
        let passes = face_passes(spec);
        let class = smooth_field(&mut stream_rng(spec.seed, "class", c as u64, 0), h, w, passes);
        (0..spec.subspace_dim)
            .map(|j| {
                let var = smooth_field(
                    &mut stream_rng(spec.seed, "class-mode", c as u64, j as u64),
                    h,
                    w,
                    passes,
                );
                (0..h * w)
                    .map(|i| {
                        (0.5 + 0.12 * self.mean[i]
                            + spec.class_contrast * 0.08 * class[i]
                            + 0.05 * var[i])
                            .clamp(0.02, 1.0)
                    })
                    .collect()
            })
            .collect()
    }

    /// One image from the cone of `bases`; `stream` separates training and test draws.
    pub fn sample(&self, bases: &[Vec<f64>], c: usize, stream: &str, index: usize) -> ImageVector {
        let spec = self.spec;
        let m = spec.m();
        let mut rng = stream_rng(spec.seed, stream, c as u64, index as u64);
        let weights: Vec<f64> = (0..bases.len()).map(|_| rng.random_range(0.1..1.0)).collect();
        let total: f64 = weights.iter().sum();
        let gain = rng.random_range(0.8..1.0);
        let mut v = vec![0.0; m];
        for (wj, b) in weights.iter().zip(bases) {
            for i in 0..m {
                v[i] += gain * wj / total * b[i];
            }
        }
        if spec.noise_sigma > 0.0 {
            for x in v.iter_mut() {
                let n: f64 = StandardNormal.sample(&mut rng);
                *x = (*x + spec.noise_sigma * n).clamp(0.0, 1.0);
            }
        }
        ImageVector::new(spec.shape(), v).expect("shape matches length")
    }
}

/// Half the peak-to-peak contrast of the occluder stripes.
const STRIPE_AMPLITUDE: f64 = 0.15;

/// One face image of class `c`.
pub fn face_sample(spec: &SynthSpec, c: usize, stream: &str, index: usize) -> ImageVector {
    let model = FaceModel::new(spec);
    model.sample(&model.class_bases(c), c, stream, index)
}

/// Training dictionary (one face block per class) and labeled test images.
pub fn generate_gallery(spec: &SynthSpec) -> Result<(BlockedDictionary, Vec<(ImageVector, String)>)> {
    spec.validate()?;
    let mut cols = Vec::with_capacity(spec.classes * spec.samples_per_class);
    let mut blocks = Vec::with_capacity(spec.classes);
    let mut test = Vec::with_capacity(spec.classes * spec.test_per_class);
    let model = FaceModel::new(spec);
    for c in 0..spec.classes {
        let bases = model.class_bases(c);
        let start = cols.len();
        for i in 0..spec.samples_per_class {
            cols.push(model.sample(&bases, c, "train", i).data().clone());
        }
        blocks.push(Block::new(class_label(c), BlockKind::Face, start..cols.len()));
        for i in 0..spec.test_per_class {
            test.push((model.sample(&bases, c, "test", i), class_label(c)));
        }
    }
    let dict = BlockedDictionary::from_columns(spec.shape(), &cols, blocks)?;
    Ok((dict, test))
}

/// Occluded pixels of a region covering exactly `⌊fraction·m⌋` pixels.
pub fn region_pixels(
    shape: (usize, usize),
    region: RegionKind,
    fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let (h, w) = shape;
    let count = ((fraction * (h * w) as f64).floor() as usize).min(h * w);
    if count == 0 {
        return Vec::new();
    }
    // fill `count` pixels row by row inside columns [c0, c0 + cols), starting at row r0
    let fill = |r0: usize, c0: usize, cols: usize, upward: bool| -> Vec<usize> {
        let mut px = Vec::with_capacity(count);
        let mut k = 0;
        while px.len() < count {
            let r = if upward { r0 - k } else { r0 + k };
            for c in c0..c0 + cols {
                if px.len() < count {
                    px.push(r * w + c);
                }
            }
            k += 1;
        }
        px
    };
    match region {
        RegionKind::LowerBand => fill(h - 1, 0, w, true),
        RegionKind::UpperBand => fill(0, 0, w, false),
        RegionKind::Rectangle | RegionKind::RandomRectangle => {
            let cols = ((count as f64 * 1.6).sqrt().round() as usize)
                .max(count.div_ceil(h))
                .clamp(1, w);
            let rows = count.div_ceil(cols);
            let (top, left) = if region == RegionKind::Rectangle {
                (((0.2 * h as f64).round() as usize).min(h - rows), (w - cols) / 2)
            } else {
                (rng.random_range(0..=h - rows), rng.random_range(0..=w - cols))
            };
            fill(top, left, cols, false)
        }
    }
}

/// Texture of an occlusion category, instance `instance`.
///
/// The category fixes the level, a smooth pattern and a stripe pattern; the
/// instance draws the variation modes and a gain.
pub fn occlusion_texture(spec: &SynthSpec, category: &str, instance: u64) -> Vec<f64> {
    let (h, w) = spec.shape();
    let passes = (face_passes(spec) / 4).max(1);
    let mut crng = stream_rng(spec.seed, "texture", str_hash(category), 0);
    let dark = crng.random_bool(0.5);
    let level = if dark {
        crng.random_range(0.15..0.3)
    } else {
        crng.random_range(0.7..0.85)
    };
    let base = smooth_field(&mut crng, h, w, passes);
    let modes: Vec<Vec<f64>> = (0..3).map(|_| smooth_field(&mut crng, h, w, passes)).collect();
    // woven or printed fabric: a square wave of random direction and period
    let angle = crng.random_range(0.0..std::f64::consts::PI);
    let period = crng.random_range(3.0..6.0);
    let phase = crng.random_range(0.0..1.0);
    let (dr, dc) = (angle.sin() / period, angle.cos() / period);
    let mut irng = stream_rng(spec.seed, "texture-instance", str_hash(category), instance);
    let coef: Vec<f64> = (0..3).map(|_| StandardNormal.sample(&mut irng)).collect();
    let gain = irng.random_range(0.85..1.15);
    (0..h * w)
        .map(|i| {
            let (r, c) = ((i / w) as f64, (i % w) as f64);
            let stripe = if (r * dr + c * dc + phase).rem_euclid(1.0) < 0.5 { 1.0 } else { -1.0 };
            let mut v = 0.1 * base[i] + STRIPE_AMPLITUDE * stripe;
            for (cm, md) in coef.iter().zip(&modes) {
                v += 0.04 * cm * md[i];
            }
            (gain * (level + v)).clamp(0.0, 1.0)
        })
        .collect()
}

/// Overwrites the region of occlusion `shape_name` with its category texture.
pub fn apply_occlusion(
    img: &ImageVector,
    shape_name: &str,
    spec: &SynthSpec,
    instance: u64,
) -> Result<(ImageVector, OcclusionMask)> {
    let shape = spec.occlusion(shape_name)?;
    apply_occlusion_with(img, shape, spec, instance)
}

/// As [`apply_occlusion`] for a shape that need not be listed in `spec`.
pub fn apply_occlusion_with(
    img: &ImageVector,
    shape: &OcclusionShape,
    spec: &SynthSpec,
    instance: u64,
) -> Result<(ImageVector, OcclusionMask)> {
    if img.shape() != spec.shape() {
        return Err(SocError::DimMismatch {
            expected: spec.m(),
            got: img.len(),
        });
    }
    let mut rng = stream_rng(spec.seed, "region", str_hash(&shape.name), instance);
    let px = region_pixels(spec.shape(), shape.region, shape.fraction, &mut rng);
    let texture = occlusion_texture(spec, &shape.name, instance);
    let mut v: Vec<f64> = img.as_slice().to_vec();
    let mut support = vec![1u8; v.len()];
    for &i in &px {
        let mut t = texture[i];
        if spec.noise_sigma > 0.0 {
            let n: f64 = StandardNormal.sample(&mut rng);
            t = (t + spec.noise_sigma * n).clamp(0.0, 1.0);
        }
        v[i] = t;
        support[i] = 0;
    }
    Ok((
        ImageVector::from_dvector(img.shape(), DVector::from_vec(v))?,
        OcclusionMask::new(img.shape(), support)?,
    ))
}
