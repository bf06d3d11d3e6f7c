//! Image files and manifests.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::Label;

pub const IMAGE_EXTENSIONS: [&str; 4] = ["png", "pgm", "ppm", "pnm"];

/// One manifest row: `path,label,family,seed`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub path: String,
    pub label: Label,
    pub family: String,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::data(path, e.to_string()))?;
        let mut rows: Vec<ManifestRow> = Vec::new();
        for r in rdr.deserialize() {
            let row: ManifestRow = r.map_err(|e| Error::data(path, e.to_string()))?;
            if rows.iter().any(|o| o.path == row.path) {
                return Err(Error::data(path, format!("duplicate path {}", row.path)));
            }
            rows.push(row);
        }
        Ok(Self { rows })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn to_data_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::data(path, e.to_string())
}

/// Decodes PNG or PGM/PPM; 8-bit value `v` maps to `v / 255`.
pub fn load_image(path: &Path) -> Result<Image> {
    let dynimg = ::image::open(path).map_err(|e| to_data_error(path, e))?;
    let (w, h) = (dynimg.width() as usize, dynimg.height() as usize);
    let color = dynimg.color();
    if color.has_color() {
        let rgb = dynimg.to_rgb8();
        Image::new(
            w,
            h,
            3,
            rgb.into_raw()
                .into_iter()
                .map(|v| v as f64 / 255.0)
                .collect(),
        )
    } else {
        let g = dynimg.to_luma8();
        Image::new(
            w,
            h,
            1,
            g.into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        )
    }
    .map_err(|e| to_data_error(path, e))
}

/// Writes an 8-bit image (values rounded and clamped); format from extension.
pub fn save_image(img: &Image, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = img
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let (w, h) = (img.width() as u32, img.height() as u32);
    let res = if img.channels() == 1 {
        ::image::GrayImage::from_raw(w, h, bytes)
            .expect("buffer size")
            .save(path)
    } else {
        ::image::RgbImage::from_raw(w, h, bytes)
            .expect("buffer size")
            .save(path)
    };
    res.map_err(|e| to_data_error(path, e))
}

/// Image files in `dir`, sorted lexicographically.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| to_data_error(dir, e))?;
    let mut paths = Vec::new();
    for e in entries {
        let p = e.map_err(|e| to_data_error(dir, e))?.path();
        let ext = p
            .extension()
            .and_then(|x| x.to_str())
            .map(|x| x.to_ascii_lowercase());
        if p.is_file() && ext.is_some_and(|x| IMAGE_EXTENSIONS.contains(&x.as_str())) {
            paths.push(p);
        }
    }
    paths.sort();
    if paths.is_empty() {
        return Err(Error::data(dir, "no PNG/PGM/PPM images found"));
    }
    Ok(paths)
}

fn check_uniform(images: &[Image], paths: &[PathBuf]) -> Result<()> {
    if let Some(first) = images.first() {
        for (img, p) in images.iter().zip(paths) {
            if img.dims() != first.dims() {
                return Err(Error::data(
                    p,
                    format!(
                        "size {:?} differs from {:?} of {}",
                        img.dims(),
                        first.dims(),
                        paths[0].display()
                    ),
                ));
            }
        }
    }
    Ok(())
}

/// Loads every image of a directory in lexicographic order.
pub fn load_dir(dir: &Path) -> Result<Vec<Image>> {
    let paths = list_images(dir)?;
    let images = paths
        .iter()
        .map(|p| load_image(p))
        .collect::<Result<Vec<_>>>()?;
    check_uniform(&images, &paths)?;
    Ok(images)
}

/// A labeled image loaded from disk.
#[derive(Debug, Clone)]
pub struct LoadedImage {
    pub path: PathBuf,
    pub image: Image,
    pub label: Label,
    pub family: String,
}

/// Loads a manifest (paths relative to its directory) in row order.
pub fn load_manifest(path: &Path) -> Result<Vec<LoadedImage>> {
    let m = Manifest::read(path)?;
    if m.rows.is_empty() {
        return Err(Error::data(path, "manifest has no rows"));
    }
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::with_capacity(m.rows.len());
    for r in m.rows {
        let p = base.join(&r.path);
        out.push(LoadedImage {
            image: load_image(&p)?,
            path: p,
            label: r.label,
            family: r.family,
        });
    }
    let images: Vec<Image> = out.iter().map(|l| l.image.clone()).collect();
    let paths: Vec<PathBuf> = out.iter().map(|l| l.path.clone()).collect();
    check_uniform(&images, &paths)?;
    Ok(out)
}

/// Loads either a manifest CSV or a directory of images. Directory images get
/// `default_label` and the directory name as family.
pub fn load_images(source: &Path, default_label: Label) -> Result<Vec<LoadedImage>> {
    if source.is_file() && source.extension().is_some_and(|e| e == "csv") {
        return load_manifest(source);
    }
    let paths = list_images(source)?;
    let family = source
        .file_name()
        .and_then(|f| f.to_str())
        .unwrap_or("images")
        .to_string();
    let mut out = Vec::with_capacity(paths.len());
    for p in paths {
        out.push(LoadedImage {
            image: load_image(&p)?,
            path: p,
            label: default_label,
            family: family.clone(),
        });
    }
    let images: Vec<Image> = out.iter().map(|l| l.image.clone()).collect();
    let paths: Vec<PathBuf> = out.iter().map(|l| l.path.clone()).collect();
    check_uniform(&images, &paths)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_scaling_rule() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pgm");
        std::fs::write(&p, b"P5\n2 1\n255\n\x80\xff").unwrap();
        let img = load_image(&p).unwrap();
        assert_eq!(img.data(), &[128.0 / 255.0, 1.0]);
    }

    #[test]
    fn png_pgm_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_fn(5, 4, 1, |x, y, _| ((x * 37 + y * 11) % 256) as f64 / 255.0);
        let png = dir.path().join("a.png");
        let pgm = dir.path().join("a.pgm");
        save_image(&img, &png).unwrap();
        save_image(&load_image(&png).unwrap(), &pgm).unwrap();
        assert_eq!(load_image(&pgm).unwrap(), img);
    }

    #[test]
    fn empty_dir_and_unreadable_files_are_data_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_dir(dir.path()), Err(Error::Data { .. })));
        let bad = dir.path().join("bad.png");
        std::fs::write(&bad, b"not a png").unwrap();
        match load_dir(dir.path()) {
            Err(Error::Data { path, .. }) => assert_eq!(path, bad),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn mixed_sizes_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_image(&Image::zeros(4, 4, 1), &dir.path().join("a.png")).unwrap();
        save_image(&Image::zeros(8, 4, 1), &dir.path().join("b.png")).unwrap();
        assert!(matches!(load_dir(dir.path()), Err(Error::Data { .. })));
    }

    #[test]
    fn manifest_round_trip_and_order() {
        let dir = tempfile::tempdir().unwrap();
        let a = Image::filled(4, 4, 1, 0.0);
        let b = Image::filled(4, 4, 1, 1.0);
        save_image(&a, &dir.path().join("z.png")).unwrap();
        save_image(&b, &dir.path().join("a.png")).unwrap();
        let m = Manifest {
            rows: vec![
                ManifestRow {
                    path: "z.png".into(),
                    label: Label::Real,
                    family: "real".into(),
                    seed: 1,
                },
                ManifestRow {
                    path: "a.png".into(),
                    label: Label::Fake,
                    family: "fake-a".into(),
                    seed: 2,
                },
            ],
        };
        let mp = dir.path().join("manifest.csv");
        m.write(&mp).unwrap();
        assert_eq!(
            std::fs::read_to_string(&mp).unwrap().lines().next(),
            Some("path,label,family,seed")
        );
        assert_eq!(Manifest::read(&mp).unwrap(), m);
        let loaded = load_images(&mp, Label::Real).unwrap();
        assert_eq!(loaded[0].image, a);
        assert_eq!(loaded[1].label, Label::Fake);
    }
}
