//! Procedural road scenes standing in for the source, target and proximity
//! domains at desk scale.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::sample::{ClassMap, Domain, DomainDataset, Image, Mask, Sample};
use crate::error::{Error, Result};
use crate::rng::derive_seed as stream_seed;

pub const SHADOW_TAG: &str = "shadow";

/// Appearance distribution of one synthetic domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneStyle {
    /// Width divided by height of the generated images.
    pub aspect: f64,
    /// Global illumination multiplier range.
    pub brightness: (f64, f64),
    /// Per-channel color cast.
    pub tint: [f64; 3],
    /// Gray level of the road surface.
    pub road_tone: (f64, f64),
    /// Amplitude of the ground texture.
    pub texture: f64,
    /// Mean brightness of the ground.
    pub ground_tone: (f64, f64),
    /// How far the ground hue leans from gray toward green.
    pub ground_saturation: (f64, f64),
    /// Chance that a scene contains a shadow band.
    pub shadow_prob: f64,
    /// Multiplier applied inside a shadow band.
    pub shadow_strength: (f64, f64),
    /// Thickness of the band as a fraction of the image height.
    pub shadow_width: (f64, f64),
    /// Number of gray distractor blocks on the ground.
    pub distractors: (usize, usize),
    /// Pixel noise standard deviation.
    pub noise: f64,
}

impl SceneStyle {
    /// Narrow, clean style of the data-scarce target domain.
    pub fn target() -> Self {
        Self {
            aspect: 1.0,
            brightness: (0.95, 1.05),
            tint: [1.0, 1.0, 1.0],
            road_tone: (0.28, 0.36),
            texture: 0.12,
            ground_tone: (0.5, 0.6),
            ground_saturation: (0.0, 0.3),
            shadow_prob: 0.0,
            shadow_strength: (0.35, 0.55),
            shadow_width: (0.25, 0.45),
            distractors: (0, 0),
            noise: 0.02,
        }
    }

    /// Target geometry with a shifted look and frequent shadows.
    pub fn proximity() -> Self {
        Self {
            aspect: 2.0,
            brightness: (0.75, 1.1),
            tint: [1.05, 1.0, 0.9],
            road_tone: (0.28, 0.45),
            texture: 0.12,
            ground_tone: (0.45, 0.65),
            ground_saturation: (0.0, 0.4),
            shadow_prob: 0.7,
            shadow_strength: (0.35, 0.55),
            shadow_width: (0.25, 0.45),
            distractors: (0, 3),
            noise: 0.03,
        }
    }

    /// Broad style of the large labelled source domain.
    pub fn source() -> Self {
        Self {
            aspect: 1.0,
            brightness: (0.6, 1.2),
            tint: [1.0, 1.0, 1.0],
            road_tone: (0.22, 0.5),
            texture: 0.12,
            ground_tone: (0.2, 0.7),
            ground_saturation: (0.0, 1.0),
            shadow_prob: 0.5,
            shadow_strength: (0.3, 0.6),
            shadow_width: (0.2, 0.45),
            distractors: (0, 4),
            noise: 0.03,
        }
    }

    /// Held-out images: target geometry under broader conditions, with
    /// shadows and clutter the target set never shows.
    pub fn validation() -> Self {
        Self {
            brightness: (0.65, 1.15),
            road_tone: (0.25, 0.45),
            ground_tone: (0.4, 0.7),
            shadow_prob: 0.5,
            distractors: (0, 4),
            ..Self::target()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    /// Height of every generated image; width follows the style aspect.
    pub image_size: usize,
    pub n_source: usize,
    pub n_train_target: usize,
    pub n_proximity: usize,
    pub n_validation: usize,
    pub source: SceneStyle,
    pub target: SceneStyle,
    pub proximity: SceneStyle,
    pub validation: SceneStyle,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            n_source: 200,
            n_train_target: 12,
            n_proximity: 100,
            n_validation: 40,
            source: SceneStyle::source(),
            target: SceneStyle::target(),
            proximity: SceneStyle::proximity(),
            validation: SceneStyle::validation(),
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 32 {
            return Err(Error::InvalidArgument(format!("synthetic image size must be at least 32, got {}", self.image_size)));
        }
        if self.n_source == 0 || self.n_train_target == 0 || self.n_proximity == 0 {
            return Err(Error::InvalidArgument("synthetic domain counts must be at least 1".into()));
        }
        Ok(())
    }
}

fn range(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Scene geometry shared by image and label.
struct Road {
    horizon: f64,
    vanish_x: f64,
    bottom_left: f64,
    bottom_right: f64,
}

impl Road {
    /// Road span at row `y`, or `None` above the horizon.
    fn span(&self, y: f64) -> Option<(f64, f64)> {
        if y <= self.horizon {
            return None;
        }
        let t = (y - self.horizon) / (1.0 - self.horizon);
        Some((
            self.vanish_x + (self.bottom_left - self.vanish_x) * t,
            self.vanish_x + (self.bottom_right - self.vanish_x) * t,
        ))
    }
}

struct Wave {
    fx: f64,
    fy: f64,
    phase: f64,
}

fn render(style: &SceneStyle, height: usize, rng: &mut ChaCha8Rng) -> (Image, Mask, bool) {
    let width = ((height as f64 * style.aspect).round() as usize).max(1);
    let road = Road {
        horizon: rng.random_range(0.3..0.5),
        vanish_x: rng.random_range(0.3..0.7),
        bottom_left: rng.random_range(-0.3..0.25),
        bottom_right: rng.random_range(0.75..1.3),
    };
    let brightness = range(rng, style.brightness);
    let road_tone = range(rng, style.road_tone);
    let tone = range(rng, style.ground_tone);
    let sat = range(rng, style.ground_saturation);
    let ground = [tone * (1.0 + 0.1 * sat), tone * (1.0 + 0.25 * sat), tone * (1.0 - 0.35 * sat)];
    let sky_top = [0.45, 0.65, 0.95];
    let sky_bottom = [0.8, 0.88, 0.97];
    let waves: Vec<Wave> = (0..3)
        .map(|_| Wave {
            fx: rng.random_range(6.0..30.0),
            fy: rng.random_range(6.0..30.0),
            phase: rng.random_range(0.0..std::f64::consts::TAU),
        })
        .collect();
    let n_blocks = rng.random_range(style.distractors.0..=style.distractors.1.max(style.distractors.0));
    let blocks: Vec<(f64, f64, f64, f64, f64)> = (0..n_blocks)
        .map(|_| {
            let y0 = rng.random_range(road.horizon..0.95);
            let x0 = rng.random_range(0.0..0.9);
            (y0, x0, rng.random_range(0.04..0.15), rng.random_range(0.04..0.12), rng.random_range(0.45..0.7))
        })
        .collect();
    let shadow = rng.random_bool(style.shadow_prob.clamp(0.0, 1.0));
    // Band between two parallel lines n·p = c0 and n·p = c0 + thickness.
    let angle = rng.random_range(-1.2f64..1.2);
    let (ny, nx) = (angle.cos(), angle.sin());
    let band_c0 = rng.random_range(0.45..0.8);
    let band_thickness = range(rng, style.shadow_width);
    let shadow_factor = range(rng, style.shadow_strength);
    let lane_phase = rng.random_range(0.0..1.0);

    let mut image = Image::new(3, height, width);
    let mut label = Mask::new(height, width);
    let mut shadow_pixels = 0usize;
    for py in 0..height {
        let y = (py as f64 + 0.5) / height as f64;
        let span = road.span(y);
        for px in 0..width {
            let x = (px as f64 + 0.5) / width as f64;
            let mut rgb;
            let mut on_ground = false;
            match span {
                None => {
                    let t = y / road.horizon;
                    rgb = [0, 1, 2].map(|c| sky_top[c] + (sky_bottom[c] - sky_top[c]) * t);
                }
                Some((l, r)) if x >= l && x <= r => {
                    label.set(py, px, 1);
                    let grain: f64 = rng.random_range(-0.02..0.02);
                    rgb = [road_tone + grain; 3];
                    let mid = 0.5 * (l + r);
                    let lane_w = 0.012 + 0.02 * (r - l);
                    let dash = ((y * 14.0 + lane_phase) % 1.0) < 0.5;
                    if (x - mid).abs() < lane_w && dash {
                        rgb = [0.92; 3];
                    }
                }
                Some(_) => {
                    on_ground = true;
                    let tex: f64 = waves
                        .iter()
                        .map(|w| (w.fx * x + w.fy * y + w.phase).sin())
                        .sum::<f64>()
                        / 3.0;
                    let t = style.texture * (tex + rng.random_range(-0.8..0.8));
                    rgb = [0, 1, 2].map(|c| ground[c] + t);
                }
            }
            if on_ground {
                for &(by, bx, bh, bw, tone) in &blocks {
                    if y >= by && y < by + bh && x >= bx && x < bx + bw {
                        rgb = [tone; 3];
                    }
                }
            }
            if span.is_some() && shadow {
                let d = ny * y + nx * x;
                if d >= band_c0 && d < band_c0 + band_thickness {
                    // shadows are lit by the sky, so they turn slightly blue
                    rgb = [rgb[0] * shadow_factor * 0.85, rgb[1] * shadow_factor * 0.95, rgb[2] * shadow_factor * 1.15];
                    shadow_pixels += 1;
                }
            }
            for c in 0..3 {
                let noise = if style.noise > 0.0 { rng.random_range(-style.noise..style.noise) } else { 0.0 };
                let v = rgb[c] * brightness * style.tint[c] + noise;
                image.set(c, py, px, v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    (image, label, shadow_pixels > 0)
}

/// Generates `n` scenes of one domain. `label` controls whether masks are kept.
pub fn generate_domain(domain: Domain, style: &SceneStyle, n: usize, height: usize, labeled: bool, seed: u64) -> Result<DomainDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prefix = domain.to_string().to_ascii_lowercase();
    let samples = (0..n)
        .map(|i| {
            let (image, label, shadow) = render(style, height, &mut rng);
            Sample {
                id: format!("{prefix}_{i:05}"),
                image,
                label: labeled.then_some(label),
                domain,
                tags: if shadow { vec![SHADOW_TAG.to_string()] } else { vec![] },
            }
        })
        .collect();
    DomainDataset::new(domain, 2, ClassMap::Identity, samples)
}

/// Returns `(source, target, proximity)`. Proximity scenes are unlabeled.
pub fn make_synthetic_domains(config: &SyntheticConfig) -> Result<(DomainDataset, DomainDataset, DomainDataset)> {
    config.validate()?;
    let h = config.image_size;
    let source = generate_domain(Domain::Source, &config.source, config.n_source, h, true, stream_seed(config.seed, 1))?;
    let target = generate_domain(Domain::Target, &config.target, config.n_train_target, h, true, stream_seed(config.seed, 2))?;
    let proximity = generate_domain(Domain::Proximity, &config.proximity, config.n_proximity, h, false, stream_seed(config.seed, 3))?;
    Ok((source, target, proximity))
}

/// Labelled evaluation split in the target look.
pub fn make_synthetic_validation(config: &SyntheticConfig) -> Result<DomainDataset> {
    config.validate()?;
    let mut ds = generate_domain(
        Domain::Target,
        &config.validation,
        config.n_validation,
        config.image_size,
        true,
        stream_seed(config.seed, 4),
    )?;
    for s in &mut ds.samples {
        s.id = format!("val_{}", &s.id["target_".len()..]);
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            image_size: 32,
            n_source: 6,
            n_train_target: 8,
            n_proximity: 12,
            n_validation: 6,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = make_synthetic_domains(&small()).unwrap();
        let b = make_synthetic_domains(&small()).unwrap();
        assert_eq!(a, b);
        let other = make_synthetic_domains(&SyntheticConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a.1, other.1);
    }

    #[test]
    fn shadows_only_where_enabled() {
        let (_, target, proximity) = make_synthetic_domains(&small()).unwrap();
        assert!(target.samples.iter().all(|s| !s.has_tag(SHADOW_TAG)));
        assert!(proximity.samples.iter().any(|s| s.has_tag(SHADOW_TAG)));
    }

    #[test]
    fn labels_are_binary_and_values_in_range() {
        let (source, target, proximity) = make_synthetic_domains(&small()).unwrap();
        for s in source.samples.iter().chain(&target.samples) {
            let m = s.label.as_ref().unwrap();
            assert!(m.data.iter().all(|&v| v <= 1));
            assert!(m.data.contains(&1) && m.data.contains(&0));
            assert!(s.image.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert!(proximity.samples.iter().all(|s| s.label.is_none()));
        assert_eq!(proximity.samples[0].image.width, 64);
        let val = make_synthetic_validation(&small()).unwrap();
        assert_eq!(val.len(), 6);
        assert!(val.samples[0].id.starts_with("val_"));
    }

    #[test]
    fn rejects_tiny_images() {
        assert!(make_synthetic_domains(&SyntheticConfig { image_size: 16, ..small() }).is_err());
    }
}
