//! Spatial augmentation applied to images and labels in lockstep.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::sample::{Image, Mask, Sample};
use crate::error::{Error, Result};
use crate::nn::bilinear_resize;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum PreprocessStep {
    /// Bilinear for images, nearest-neighbour for labels.
    Resize { height: usize, width: usize },
    RandomCrop { height: usize, width: usize },
    RandomHFlip { p: f64 },
    /// Per-channel block maximum for images, block top-left for labels.
    MaxPoolDownsample { kernel: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct PreprocessSpec {
    pub steps: Vec<PreprocessStep>,
    pub seed: u64,
}

impl PreprocessSpec {
    /// Target-domain chain: crop, flip, max pool.
    pub fn target(crop: usize, pool: usize, seed: u64) -> Self {
        Self {
            steps: vec![
                PreprocessStep::RandomCrop { height: crop, width: crop },
                PreprocessStep::RandomHFlip { p: 0.5 },
                PreprocessStep::MaxPoolDownsample { kernel: pool },
            ],
            seed,
        }
    }

    /// Proximity-domain chain: the target chain preceded by a resize.
    pub fn proximity(resize: (usize, usize), crop: usize, pool: usize, seed: u64) -> Self {
        let mut spec = Self::target(crop, pool, seed);
        spec.steps.insert(0, PreprocessStep::Resize { height: resize.0, width: resize.1 });
        spec
    }

    /// Deterministic evaluation chain: only the max pool.
    pub fn eval(pool: usize) -> Self {
        Self {
            steps: vec![PreprocessStep::MaxPoolDownsample { kernel: pool }],
            seed: 0,
        }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }

    /// Spatial size after all steps, or an error if a step cannot apply.
    pub fn output_size(&self, mut h: usize, mut w: usize) -> Result<(usize, usize)> {
        for step in &self.steps {
            (h, w) = match *step {
                PreprocessStep::Resize { height, width } => (height, width),
                PreprocessStep::RandomCrop { height, width } => {
                    if height > h || width > w {
                        return Err(Error::InvalidArgument(format!("crop {height}x{width} exceeds {h}x{w}")));
                    }
                    (height, width)
                }
                PreprocessStep::RandomHFlip { .. } => (h, w),
                PreprocessStep::MaxPoolDownsample { kernel } => {
                    if kernel == 0 || h % kernel != 0 || w % kernel != 0 {
                        return Err(Error::InvalidArgument(format!("max pool kernel {kernel} does not divide {h}x{w}")));
                    }
                    (h / kernel, w / kernel)
                }
            };
        }
        Ok((h, w))
    }
}

/// Resize factor for proximity images: at least `target_width / width`, and
/// large enough that the shorter side reaches `crop`.
pub fn proximity_resize(height: usize, width: usize, crop: usize, target_width: usize) -> (usize, usize) {
    let factor = (target_width as f64 / width as f64).max(crop as f64 / height.min(width) as f64);
    let h = ((height as f64 * factor).ceil() as usize).max(crop);
    let w = ((width as f64 * factor).ceil() as usize).max(crop);
    (h, w)
}

fn crop_image(img: &Image, top: usize, left: usize, h: usize, w: usize) -> Image {
    let mut out = Image::new(img.channels, h, w);
    for c in 0..img.channels {
        for y in 0..h {
            for x in 0..w {
                out.set(c, y, x, img.get(c, top + y, left + x));
            }
        }
    }
    out
}

fn crop_mask(m: &Mask, top: usize, left: usize, h: usize, w: usize) -> Mask {
    let mut out = Mask::new(h, w);
    for y in 0..h {
        for x in 0..w {
            out.set(y, x, m.get(top + y, left + x));
        }
    }
    out
}

fn flip_image(img: &mut Image) {
    let w = img.width;
    for row in img.data.chunks_mut(w) {
        row.reverse();
    }
}

fn flip_mask(m: &mut Mask) {
    let w = m.width;
    for row in m.data.chunks_mut(w) {
        row.reverse();
    }
}

fn maxpool_image(img: &Image, k: usize) -> Image {
    let (h, w) = (img.height / k, img.width / k);
    let mut out = Image::new(img.channels, h, w);
    for c in 0..img.channels {
        for y in 0..h {
            for x in 0..w {
                let mut m = f32::NEG_INFINITY;
                for dy in 0..k {
                    for dx in 0..k {
                        m = m.max(img.get(c, y * k + dy, x * k + dx));
                    }
                }
                out.set(c, y, x, m);
            }
        }
    }
    out
}

fn nearest_mask(m: &Mask, h: usize, w: usize) -> Mask {
    let mut out = Mask::new(h, w);
    for y in 0..h {
        let sy = (y * m.height / h).min(m.height - 1);
        for x in 0..w {
            let sx = (x * m.width / w).min(m.width - 1);
            out.set(y, x, m.get(sy, sx));
        }
    }
    out
}

/// Applies `spec.steps` in order, drawing randomness from `rng`.
pub fn preprocess(sample: &Sample, spec: &PreprocessSpec, rng: &mut impl Rng) -> Result<Sample> {
    spec.output_size(sample.image.height, sample.image.width)
        .map_err(|e| Error::InvalidArgument(format!("sample {}: {e}", sample.id)))?;
    let mut image = sample.image.clone();
    let mut label = sample.label.clone();
    for step in &spec.steps {
        match *step {
            PreprocessStep::Resize { height, width } => {
                if (height, width) != (image.height, image.width) {
                    image = Image::from_tensor(&bilinear_resize(&image.to_tensor(), height, width));
                    label = label.map(|m| nearest_mask(&m, height, width));
                }
            }
            PreprocessStep::RandomCrop { height, width } => {
                let top = rng.random_range(0..=image.height - height);
                let left = rng.random_range(0..=image.width - width);
                image = crop_image(&image, top, left, height, width);
                label = label.map(|m| crop_mask(&m, top, left, height, width));
            }
            PreprocessStep::RandomHFlip { p } => {
                if rng.random_bool(p.clamp(0.0, 1.0)) {
                    flip_image(&mut image);
                    if let Some(m) = &mut label {
                        flip_mask(m);
                    }
                }
            }
            PreprocessStep::MaxPoolDownsample { kernel } => {
                let (h, w) = (image.height / kernel, image.width / kernel);
                image = maxpool_image(&image, kernel);
                label = label.map(|m| nearest_mask(&m, h, w));
            }
        }
    }
    Ok(Sample {
        id: sample.id.clone(),
        image,
        label,
        domain: sample.domain,
        tags: sample.tags.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::sample::Domain;
    use proptest::prelude::*;

    /// Image whose channels encode the source row and column; label encodes
    /// both too so lockstep can be checked pixel by pixel.
    fn coordinate_sample(h: usize, w: usize) -> Sample {
        let mut image = Image::new(3, h, w);
        let mut label = Mask::new(h, w);
        for y in 0..h {
            for x in 0..w {
                image.set(0, y, x, y as f32);
                image.set(1, y, x, x as f32);
                image.set(2, y, x, 0.5);
                label.set(y, x, ((y * w + x) % 251) as u8);
            }
        }
        Sample { id: "coord".into(), image, label: Some(label), domain: Domain::Target, tags: vec![] }
    }

    #[test]
    fn full_size_chain_produces_quarter_resolution() {
        let spec = PreprocessSpec::target(512, 2, 0);
        assert_eq!(spec.output_size(1024, 2048).unwrap(), (256, 256));
    }

    #[test]
    fn identity_spec_is_a_no_op() {
        let s = coordinate_sample(5, 7);
        let out = preprocess(&s, &PreprocessSpec::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(out, s);
    }

    #[test]
    fn maxpool_matches_blockwise_maximum() {
        let vals: [f32; 16] = [0.1, 0.9, 0.3, 0.2, 0.4, 0.5, 0.8, 0.7, 0.6, 0.0, 0.25, 0.35, 0.15, 0.05, 0.45, 0.95];
        let mut image = Image::new(1, 4, 4);
        image.data.copy_from_slice(&vals);
        let s = Sample { id: "m".into(), image, label: None, domain: Domain::Target, tags: vec![] };
        let spec = PreprocessSpec { steps: vec![PreprocessStep::MaxPoolDownsample { kernel: 2 }], seed: 0 };
        let out = preprocess(&s, &spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        // brute-force block maxima
        let mut expected = [f32::MIN; 4];
        for y in 0..4 {
            for x in 0..4 {
                let b = (y / 2) * 2 + x / 2;
                expected[b] = expected[b].max(vals[y * 4 + x]);
            }
        }
        assert_eq!(out.image.data, expected);
    }

    #[test]
    fn oversized_crop_and_indivisible_pool_fail() {
        let s = coordinate_sample(8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let crop = PreprocessSpec { steps: vec![PreprocessStep::RandomCrop { height: 9, width: 4 }], seed: 0 };
        assert!(preprocess(&s, &crop, &mut rng).is_err());
        let pool = PreprocessSpec { steps: vec![PreprocessStep::MaxPoolDownsample { kernel: 3 }], seed: 0 };
        assert!(preprocess(&s, &pool, &mut rng).is_err());
    }

    #[test]
    fn proximity_resize_covers_crop() {
        let (h, w) = proximity_resize(370, 1224, 512, 2048);
        assert!(h >= 512 && w >= 2048);
        assert_eq!(proximity_resize(40, 80, 48, 64), (48, 96));
    }

    proptest! {
        #[test]
        fn crop_and_flip_move_image_and_label_together(h in 4usize..20, w in 4usize..20, seed in 0u64..1000) {
            let s = coordinate_sample(h, w);
            let spec = PreprocessSpec {
                steps: vec![
                    PreprocessStep::RandomCrop { height: h / 2 + 1, width: w / 2 + 1 },
                    PreprocessStep::RandomHFlip { p: 0.5 },
                ],
                seed,
            };
            let out = preprocess(&s, &spec, &mut spec.rng()).unwrap();
            let label = out.label.as_ref().unwrap();
            prop_assert_eq!(out.image.channels, 3);
            for y in 0..out.image.height {
                for x in 0..out.image.width {
                    let sy = out.image.get(0, y, x) as usize;
                    let sx = out.image.get(1, y, x) as usize;
                    prop_assert_eq!(label.get(y, x), ((sy * w + sx) % 251) as u8);
                }
            }
        }

        #[test]
        fn maxpool_label_is_block_origin(k in 1usize..4, bh in 1usize..6, bw in 1usize..6) {
            let s = coordinate_sample(k * bh, k * bw);
            let spec = PreprocessSpec { steps: vec![PreprocessStep::MaxPoolDownsample { kernel: k }], seed: 0 };
            let out = preprocess(&s, &spec, &mut spec.rng()).unwrap();
            let label = out.label.unwrap();
            for y in 0..bh {
                for x in 0..bw {
                    prop_assert_eq!(label.get(y, x), (((y * k) * (k * bw) + x * k) % 251) as u8);
                    // the coordinate channels max out at the block's far corner
                    prop_assert_eq!(out.image.get(0, y, x) as usize, y * k + k - 1);
                }
            }
        }
    }
}
