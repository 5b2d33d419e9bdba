//! Directory datasets: `<root>/images/*.{png,jpg,jpeg}` with optional
//! single-channel `<root>/labels/<basename>.png`, paired by basename.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use super::sample::{ClassMap, Domain, DomainDataset, Image, Mask, Sample};
use crate::error::{Error, Result};

const IMAGE_EXTS: [&str; 3] = ["png", "jpg", "jpeg"];

fn list_by_stem(dir: &Path, exts: &[&str]) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if ext.is_some_and(|e| exts.contains(&e.as_str())) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path);
            }
        }
    }
    Ok(out)
}

fn read_image(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|source| Error::Image { path: path.into(), source })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Image::new(3, h, w);
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out.set(c, y as usize, x as usize, px[c] as f32 / 255.0);
        }
    }
    Ok(out)
}

fn read_mask(path: &Path, class_map: &ClassMap) -> Result<Mask> {
    let img = image::open(path)
        .map_err(|source| Error::Image { path: path.into(), source })?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.pixels().map(|p| class_map.apply(p[0])).collect();
    Mask::from_vec(h, w, data)
}

/// Loads a dataset sorted by sample id. Target and source domains require a
/// label for every image.
pub fn load_dataset(root: impl AsRef<Path>, domain: Domain, n_classes: usize, class_map: ClassMap) -> Result<DomainDataset> {
    let root = root.as_ref();
    let images_dir = root.join("images");
    if !images_dir.is_dir() {
        return Err(Error::Dataset(format!("{} has no images/ directory", root.display())));
    }
    let images = list_by_stem(&images_dir, &IMAGE_EXTS)?;
    let labels = list_by_stem(&root.join("labels"), &["png"])?;
    let needs_labels = domain != Domain::Proximity;
    let missing: Vec<String> = images.keys().filter(|id| !labels.contains_key(*id)).cloned().collect();
    if needs_labels && !missing.is_empty() {
        return Err(Error::MissingLabels(missing));
    }
    let mut samples = Vec::with_capacity(images.len());
    for (id, path) in &images {
        let image = read_image(path)?;
        let label = match labels.get(id) {
            Some(lp) => Some(read_mask(lp, &class_map)?),
            None => None,
        };
        samples.push(Sample {
            id: id.clone(),
            image,
            label,
            domain,
            tags: Vec::new(),
        });
    }
    DomainDataset::new(domain, n_classes, class_map, samples)
}

/// Writes `images/<id>.png` and, for labeled samples, `labels/<id>.png`.
pub fn write_dataset(dataset: &DomainDataset, root: impl AsRef<Path>) -> Result<()> {
    let root = root.as_ref();
    let images_dir = root.join("images");
    let labels_dir = root.join("labels");
    fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    fs::create_dir_all(&labels_dir).map_err(|e| Error::io(&labels_dir, e))?;
    for s in &dataset.samples {
        let img = &s.image;
        let rgb: RgbImage = ImageBuffer::from_fn(img.width as u32, img.height as u32, |x, y| {
            let px = |c: usize| {
                let c = c.min(img.channels - 1);
                (img.get(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8
            };
            Rgb([px(0), px(1), px(2)])
        });
        let path = images_dir.join(format!("{}.png", s.id));
        rgb.save(&path).map_err(|source| Error::Image { path: path.clone(), source })?;
        if let Some(mask) = &s.label {
            let gray: GrayImage = ImageBuffer::from_fn(mask.width as u32, mask.height as u32, |x, y| {
                Luma([mask.get(y as usize, x as usize)])
            });
            let path = labels_dir.join(format!("{}.png", s.id));
            gray.save(&path).map_err(|source| Error::Image { path: path.clone(), source })?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(id: &str, labeled: bool) -> Sample {
        let mut image = Image::new(3, 4, 6);
        for (i, v) in image.data.iter_mut().enumerate() {
            *v = (i % 255) as f32 / 255.0;
        }
        Sample {
            id: id.into(),
            image,
            label: labeled.then(|| Mask::from_vec(4, 6, (0..24).map(|i| (i % 2) as u8).collect()).unwrap()),
            domain: Domain::Target,
            tags: vec![],
        }
    }

    #[test]
    fn round_trip_through_directory() {
        let dir = tempfile::tempdir().unwrap();
        let ds = DomainDataset::new(Domain::Target, 2, ClassMap::Identity, vec![tiny("b", true), tiny("a", true)]).unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path(), Domain::Target, 2, ClassMap::Identity).unwrap();
        let ids: Vec<&str> = back.samples.iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, ["a", "b"]);
        assert_eq!(back.samples[0].label, ds.samples[1].label);
        for (a, b) in back.samples[0].image.data.iter().zip(&ds.samples[1].image.data) {
            assert!((a - b).abs() < 1.0 / 255.0);
        }
    }

    #[test]
    fn missing_target_label_names_sample() {
        let dir = tempfile::tempdir().unwrap();
        let ds = DomainDataset::new(Domain::Target, 2, ClassMap::Identity, vec![tiny("a", false), tiny("b", true)]).unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let err = load_dataset(dir.path(), Domain::Target, 2, ClassMap::Identity).unwrap_err();
        assert!(matches!(&err, Error::MissingLabels(ids) if ids == &["a".to_string()]), "{err}");
    }

    #[test]
    fn proximity_without_labels_loads() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = tiny("p", false);
        s.domain = Domain::Proximity;
        let ds = DomainDataset::new(Domain::Proximity, 2, ClassMap::Identity, vec![s]).unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path(), Domain::Proximity, 2, ClassMap::Identity).unwrap();
        assert!(back.samples.iter().all(|s| s.label.is_none()));
    }

    #[test]
    fn class_map_folds_unmapped_ids_to_background() {
        let map = ClassMap::binary(&[7]);
        assert_eq!(map.apply(7), 1);
        assert_eq!(map.apply(3), 0);
        assert_eq!(map.apply(255), 255);
    }
}
