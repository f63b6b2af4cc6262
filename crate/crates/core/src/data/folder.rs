//! One-directory-per-class PNG datasets.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::{assign_splits, DataSource, Dataset, DatasetManifest, SampleEntry, SampleOrigin};
use crate::augment::resize_bilinear;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    // Byte order of the file name, independent of locale and platform.
    out.sort_by(|a, b| a.file_name().map(|n| n.as_encoded_bytes()).cmp(&b.file_name().map(|n| n.as_encoded_bytes())));
    Ok(out)
}

fn is_png(p: &Path) -> bool {
    p.is_file()
        && p.extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

/// Decodes a PNG into `[channels × size × size]` with values `v / 255`.
pub(crate) fn decode_png(path: &Path, image_size: usize, channels: usize) -> Result<Tensor> {
    let decode_err = |detail: String| Error::Decode {
        path: path.to_path_buf(),
        detail,
    };
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| decode_err(e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = match channels {
        1 => img.to_luma8().into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        3 => {
            let raw = img.to_rgb8().into_raw();
            let mut planar = vec![0.0; 3 * h * w];
            for (p, px) in raw.chunks_exact(3).enumerate() {
                for c in 0..3 {
                    planar[c * h * w + p] = px[c] as f64 / 255.0;
                }
            }
            planar
        }
        n => return Err(Error::Config(format!("unsupported channel count {n}; use 1 or 3"))),
    };
    let t = Tensor::new(vec![channels, h, w], data).map_err(|e| decode_err(e.to_string()))?;
    if h == image_size && w == image_size {
        Ok(t)
    } else {
        Ok(resize_bilinear(&t, image_size, image_size))
    }
}

/// Reads `root/<class>/*.png`; classes and files are taken in byte order of
/// their names.
pub fn load_folder_dataset(root: &Path, image_size: usize, channels: usize, train_fraction: f64, seed: u64) -> Result<Dataset> {
    let class_dirs: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if class_dirs.is_empty() {
        return Err(Error::Manifest(format!("{} has no class directories", root.display())));
    }
    let mut class_names = Vec::new();
    let mut files = Vec::new();
    for (class_id, dir) in class_dirs.iter().enumerate() {
        let pngs: Vec<PathBuf> = sorted_entries(dir)?.into_iter().filter(|p| is_png(p)).collect();
        if pngs.is_empty() {
            return Err(Error::Manifest(format!("class directory {} contains no PNG files", dir.display())));
        }
        class_names.push(dir.file_name().unwrap_or_default().to_string_lossy().into_owned());
        files.extend(pngs.into_iter().map(|p| (p, class_id)));
    }
    let images: Vec<Tensor> = files
        .par_iter()
        .map(|(p, _)| decode_png(p, image_size, channels))
        .collect::<Result<_>>()?;
    let class_ids: Vec<usize> = files.iter().map(|(_, c)| *c).collect();
    let splits = assign_splits(&class_ids, class_names.len(), train_fraction, seed)?;
    let samples = files
        .iter()
        .zip(splits)
        .enumerate()
        .map(|(id, ((p, class_id), split))| {
            let rel = p.strip_prefix(root).unwrap_or(p);
            SampleEntry {
                id,
                origin: SampleOrigin::File {
                    path: rel.to_string_lossy().into_owned(),
                },
                class_id: *class_id,
                split,
            }
        })
        .collect();
    let manifest = DatasetManifest {
        source: DataSource::Folder {
            root: root.to_string_lossy().into_owned(),
        },
        image_size,
        channels,
        class_names,
        samples,
    };
    Ok(Dataset { manifest, images })
}

/// Writes `images` as 8-bit PNGs under `root/<class>/<id>.png`.
pub(crate) fn write_pngs(root: &Path, data: &Dataset) -> Result<()> {
    for name in &data.manifest.class_names {
        let dir = root.join(name);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    data.manifest
        .samples
        .par_iter()
        .zip(&data.images)
        .try_for_each(|(s, img)| {
            let path = root
                .join(&data.manifest.class_names[s.class_id])
                .join(format!("{:05}.png", s.id));
            write_png(&path, img)
        })
}

pub(crate) fn write_png(path: &Path, img: &Tensor) -> Result<()> {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let d = img.data();
    let result = match c {
        1 => image::GrayImage::from_raw(w as u32, h as u32, d.iter().map(|&v| q(v)).collect())
            .expect("buffer matches dimensions")
            .save(path),
        3 => {
            let mut raw = Vec::with_capacity(3 * h * w);
            for p in 0..h * w {
                for ch in 0..3 {
                    raw.push(q(d[ch * h * w + p]));
                }
            }
            image::RgbImage::from_raw(w as u32, h as u32, raw)
                .expect("buffer matches dimensions")
                .save(path)
        }
        n => return Err(Error::Config(format!("cannot write a {n}-channel PNG"))),
    };
    result.map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}
