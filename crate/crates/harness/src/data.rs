//! In-memory datasets and the folder format.
//!
//! A folder holds `images/NAME.png` (8-bit RGB) and `masks/NAME.pgm` (8-bit
//! grey; `.png` masks are accepted too). Mask grey values map to classes
//! through an optional `palette.json`, a JSON array whose position `i` is the
//! grey value of class `i`. Without a palette, the sorted distinct values
//! found across all masks define the classes.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use farmamba_core::{Float, Tensor};
use image::imageops::{self, FilterType};
use image::{GrayImage, RgbImage};

use crate::{HarnessError, Result};

/// One image (HWC, RGB, 8-bit) with its label map (HW, class indices).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub image: Vec<u8>,
    pub mask: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub samples: Vec<Sample>,
    /// File stems when loaded from disk.
    pub names: Vec<String>,
}

impl Dataset {
    pub fn new(height: usize, width: usize, num_classes: usize, samples: Vec<Sample>) -> Result<Self> {
        for (i, s) in samples.iter().enumerate() {
            if s.image.len() != 3 * height * width || s.mask.len() != height * width {
                return Err(HarnessError::Data(format!("sample {i} does not match {height}x{width}")));
            }
            if let Some(&m) = s.mask.iter().find(|&&m| m as usize >= num_classes) {
                return Err(HarnessError::Data(format!("sample {i} has label {m} >= {num_classes} classes")));
            }
        }
        let names = (0..samples.len()).map(|i| format!("{i:05}")).collect();
        Ok(Self {
            height,
            width,
            num_classes,
            samples,
            names,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `[B,3,H,W]` images scaled to [0,1] plus flattened labels.
    pub fn batch<T: Float>(&self, idx: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let (h, w) = (self.height, self.width);
        let mut data = vec![T::default(); idx.len() * 3 * h * w];
        let mut labels = Vec::with_capacity(idx.len() * h * w);
        for (b, &i) in idx.iter().enumerate() {
            let s = &self.samples[i];
            for p in 0..h * w {
                for c in 0..3 {
                    data[(b * 3 + c) * h * w + p] = T::from_f64(s.image[3 * p + c] as f64 / 255.0);
                }
            }
            labels.extend(s.mask.iter().map(|&m| m as usize));
        }
        (Tensor::new(vec![idx.len(), 3, h, w], data).expect("batch shape"), labels)
    }

    /// Fraction of pixels in each class.
    pub fn class_histogram(&self) -> Vec<f64> {
        let mut counts = vec![0u64; self.num_classes];
        for s in &self.samples {
            for &m in &s.mask {
                counts[m as usize] += 1;
            }
        }
        let total: u64 = counts.iter().sum();
        counts.iter().map(|&c| c as f64 / total.max(1) as f64).collect()
    }

    /// Concatenates two datasets of the same geometry.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if (self.height, self.width, self.num_classes) != (other.height, other.width, other.num_classes) {
            return Err(HarnessError::Data("cannot concatenate datasets of different geometry".into()));
        }
        let mut out = self.clone();
        out.samples.extend(other.samples.iter().cloned());
        out.names.extend(other.names.iter().cloned());
        Ok(out)
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
            names: idx.iter().map(|&i| self.names[i].clone()).collect(),
            ..self.clone()
        }
    }

    /// Grey value written for class `c`, spread over 0..=255.
    pub fn palette(&self) -> Vec<u8> {
        let k = self.num_classes.max(2) - 1;
        (0..self.num_classes).map(|c| (c * 255 / k) as u8).collect()
    }

    /// Writes the folder layout described in the module docs.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let (imgs, masks) = (dir.join("images"), dir.join("masks"));
        for d in [&imgs, &masks] {
            std::fs::create_dir_all(d).map_err(|e| HarnessError::io(d, e))?;
        }
        let palette = self.palette();
        let pal_path = dir.join("palette.json");
        std::fs::write(&pal_path, serde_json::to_string(&palette).expect("palette json"))
            .map_err(|e| HarnessError::io(&pal_path, e))?;
        let (w, h) = (self.width as u32, self.height as u32);
        for (s, name) in self.samples.iter().zip(&self.names) {
            let img = RgbImage::from_raw(w, h, s.image.clone()).expect("image buffer");
            let p = imgs.join(format!("{name}.png"));
            img.save(&p).map_err(|e| HarnessError::io(&p, e))?;
            let grey: Vec<u8> = s.mask.iter().map(|&m| palette[m as usize]).collect();
            let m = GrayImage::from_raw(w, h, grey).expect("mask buffer");
            let p = masks.join(format!("{name}.pgm"));
            m.save(&p).map_err(|e| HarnessError::io(&p, e))?;
        }
        Ok(())
    }

    /// Loads a folder, resizing to `size x size` when `size` is given.
    pub fn load(dir: &Path, size: Option<usize>) -> Result<Dataset> {
        let images = list_stems(&dir.join("images"), &["png"])?;
        let masks = list_stems(&dir.join("masks"), &["pgm", "png"])?;
        if images.is_empty() && masks.is_empty() {
            return Err(HarnessError::Data(format!("no pairs found in {}", dir.display())));
        }
        let orphans: Vec<String> = images
            .keys()
            .filter(|k| !masks.contains_key(*k))
            .map(|k| format!("images/{k}"))
            .chain(masks.keys().filter(|k| !images.contains_key(*k)).map(|k| format!("masks/{k}")))
            .collect();
        if !orphans.is_empty() {
            return Err(HarnessError::Data(format!("orphan files without a partner: {}", orphans.join(", "))));
        }

        let mut raw = Vec::with_capacity(images.len());
        for (stem, ipath) in &images {
            let img = image::open(ipath).map_err(|e| HarnessError::io(ipath, e))?.to_rgb8();
            let mpath = &masks[stem];
            let mask = image::open(mpath).map_err(|e| HarnessError::io(mpath, e))?.to_luma8();
            if img.dimensions() != mask.dimensions() {
                return Err(HarnessError::Data(format!("{stem}: image and mask sizes differ")));
            }
            raw.push((stem.clone(), img, mask));
        }

        let pal_path = dir.join("palette.json");
        let palette: Vec<u8> = if pal_path.exists() {
            let text = std::fs::read_to_string(&pal_path).map_err(|e| HarnessError::io(&pal_path, e))?;
            serde_json::from_str(&text).map_err(|e| HarnessError::io(&pal_path, e))?
        } else {
            let seen: BTreeSet<u8> = raw.iter().flat_map(|(_, _, m)| m.as_raw().iter().copied()).collect();
            seen.into_iter().collect()
        };
        if palette.len() < 2 {
            return Err(HarnessError::Data(format!("palette needs at least 2 classes, got {palette:?}")));
        }
        let mut lut = [None; 256];
        for (c, &v) in palette.iter().enumerate() {
            lut[v as usize] = Some(c as u8);
        }

        let (w0, h0) = raw[0].1.dimensions();
        let (tw, th) = match size {
            Some(s) => (s as u32, s as u32),
            None => (w0, h0),
        };
        let mut samples = Vec::with_capacity(raw.len());
        let mut names = Vec::with_capacity(raw.len());
        for (stem, img, mask) in raw {
            let mut labels = Vec::with_capacity(mask.as_raw().len());
            for &v in mask.as_raw() {
                labels.push(lut[v as usize].ok_or_else(|| {
                    HarnessError::Data(format!("{stem}: mask value {v} is not in the palette {palette:?}"))
                })?);
            }
            let label_img = GrayImage::from_raw(mask.width(), mask.height(), labels).expect("label buffer");
            let (img, label_img) = if img.dimensions() == (tw, th) {
                (img, label_img)
            } else {
                (
                    imageops::resize(&img, tw, th, FilterType::Triangle),
                    imageops::resize(&label_img, tw, th, FilterType::Nearest),
                )
            };
            samples.push(Sample {
                image: img.into_raw(),
                mask: label_img.into_raw(),
            });
            names.push(stem);
        }
        let mut ds = Dataset::new(th as usize, tw as usize, palette.len(), samples)?;
        ds.names = names;
        Ok(ds)
    }
}

fn list_stems(dir: &Path, exts: &[&str]) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    if !dir.exists() {
        return Ok(out);
    }
    for entry in std::fs::read_dir(dir).map_err(|e| HarnessError::io(dir, e))? {
        let path = entry.map_err(|e| HarnessError::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        let Some(ext) = ext.filter(|e| exts.contains(&e.as_str())) else {
            continue;
        };
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        if out.insert(stem.clone(), path.clone()).is_some() {
            return Err(HarnessError::Data(format!("{stem} appears with more than one extension (.{ext})")));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::SyntheticSpec;

    fn small() -> Dataset {
        let spec = SyntheticSpec {
            n_train: 5,
            n_val: 0,
            size: 32,
            ..SyntheticSpec::default()
        };
        spec.generate().unwrap().0
    }

    #[test]
    fn save_then_load_roundtrips() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path(), None).unwrap();
        assert_eq!(back, ds);
        let (a, la) = ds.batch::<f64>(&[0, 3]);
        let (b, lb) = back.batch::<f64>(&[0, 3]);
        assert!(a.max_abs_diff(&b) <= 0.5 / 255.0);
        assert_eq!(la, lb);
    }

    #[test]
    fn empty_dir_reports_no_pairs() {
        let dir = tempfile::tempdir().unwrap();
        let err = Dataset::load(dir.path(), None).unwrap_err().to_string();
        assert!(err.contains("no pairs found"), "{err}");
    }

    #[test]
    fn orphans_and_unknown_colours_are_errors() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        std::fs::remove_file(dir.path().join("masks/00002.pgm")).unwrap();
        let err = Dataset::load(dir.path(), None).unwrap_err().to_string();
        assert!(err.contains("orphan") && err.contains("images/00002"), "{err}");

        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        std::fs::write(dir.path().join("palette.json"), "[0, 255]").unwrap();
        let err = Dataset::load(dir.path(), None).unwrap_err().to_string();
        assert!(err.contains("not in the palette"), "{err}");
    }

    #[test]
    fn classes_are_inferred_without_palette() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        std::fs::remove_file(dir.path().join("palette.json")).unwrap();
        let back = Dataset::load(dir.path(), None).unwrap();
        assert_eq!(back.num_classes, 3);
        assert_eq!(back.samples, ds.samples);
    }

    #[test]
    fn resize_on_load() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let big = Dataset::load(dir.path(), Some(64)).unwrap();
        assert_eq!((big.height, big.width), (64, 64));
        // nearest-neighbour upscaling by 2 keeps every label
        assert_eq!(big.samples[0].mask[0], ds.samples[0].mask[0]);
        assert!(big.samples.iter().all(|s| s.mask.iter().all(|&m| m < 3)));
    }
}
