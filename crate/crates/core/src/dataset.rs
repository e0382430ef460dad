//! Labeled grayscale image collections and the on-disk `<root>/<class>/<sample>.png|.pgm` layout.

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{GrayImage, ImageBuffer, Luma};

use crate::diffcore::Array;
use crate::error::{Error, Result};

/// Images (`1 x h x w`, values in `[0, 1]`) with dense class labels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub images: Vec<Array>,
    pub labels: Vec<usize>,
    /// `class/sample` names, one per image.
    pub names: Vec<String>,
    pub classes: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Indices of each class's samples, in dataset order.
    pub fn by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.classes.len()];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }

    /// Splits every class's samples: the first `per_class` go to the first set.
    pub fn split_per_class(&self, per_class: usize) -> (Dataset, Dataset) {
        let mut a = self.empty_like();
        let mut b = self.empty_like();
        for members in self.by_class() {
            for (j, &i) in members.iter().enumerate() {
                let dst = if j < per_class { &mut a } else { &mut b };
                dst.push(self.images[i].clone(), self.labels[i], self.names[i].clone());
            }
        }
        (a, b)
    }

    fn empty_like(&self) -> Dataset {
        Dataset {
            classes: self.classes.clone(),
            ..Dataset::default()
        }
    }

    pub fn push(&mut self, image: Array, label: usize, name: String) {
        self.images.push(image);
        self.labels.push(label);
        self.names.push(name);
    }

    pub fn image_size(&self) -> Option<(usize, usize)> {
        self.images.first().map(|a| {
            let s = a.shape();
            (s[s.len() - 2], s[s.len() - 1])
        })
    }
}

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("png" | "pgm")
    )
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

/// Loads an 8-bit grayscale PNG or PGM as `1 x h x w` in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Array> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let g = img.to_luma8();
    let (w, h) = g.dimensions();
    let data = g.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    Array::new(vec![1, h as usize, w as usize], data)
}

/// Writes `1 x h x w` (or `h x w`) values, clamped to `[0, 1]`, as 8-bit grayscale;
/// the container follows the extension.
pub fn save_image(path: &Path, image: &Array) -> Result<()> {
    let (_, h, w) = image.dims3()?;
    let bytes = image.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let buf = GrayImage::from_raw(w as u32, h as u32, bytes).expect("buffer size");
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Bilinear (triangle-filter) resize of a single-channel image.
pub fn resize(image: &Array, h: usize, w: usize) -> Result<Array> {
    let (_, ih, iw) = image.dims3()?;
    let buf: ImageBuffer<Luma<f32>, Vec<f32>> =
        ImageBuffer::from_raw(iw as u32, ih as u32, image.data().to_vec()).expect("buffer size");
    let out = imageops::resize(&buf, w as u32, h as u32, FilterType::Triangle);
    Array::new(vec![1, h, w], out.into_raw())
}

/// Reads `<root>/<class>/<sample>.{png,pgm}`; classes and samples in
/// lexicographic order. Images of another size are resized to `h x w`.
pub fn ingest(root: &Path, h: usize, w: usize) -> Result<Dataset> {
    if !root.is_dir() {
        return Err(Error::Data(format!("{} is not a directory", root.display())));
    }
    let mut ds = Dataset::default();
    for class_dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let files: Vec<PathBuf> = sorted_entries(&class_dir)?
            .into_iter()
            .filter(|p| p.is_file() && is_image(p))
            .collect();
        let class = class_dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
        if files.is_empty() {
            log::warn!("skipping empty class directory {}", class_dir.display());
            continue;
        }
        let label = ds.classes.len();
        ds.classes.push(class.clone());
        for f in files {
            let mut img = load_image(&f)?;
            let (_, ih, iw) = img.dims3()?;
            if (ih, iw) != (h, w) {
                log::warn!("{}: resizing {ih}x{iw} to {h}x{w}", f.display());
                img = resize(&img, h, w)?;
            }
            let stem = f.file_stem().unwrap_or_default().to_string_lossy();
            ds.push(img, label, format!("{class}/{stem}"));
        }
    }
    if ds.is_empty() {
        return Err(Error::Data(format!("no images under {}", root.display())));
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(h: usize, w: usize) -> Array {
        Array::from_fn(&[1, h, w], |i| ((i * 7) % 256) as f32 / 255.0)
    }

    #[test]
    fn ingest_sorted_layout() {
        let dir = tempfile::tempdir().unwrap();
        for c in ["b", "a"] {
            fs::create_dir(dir.path().join(c)).unwrap();
            for s in ["2", "0", "1"] {
                save_image(&dir.path().join(c).join(format!("{s}.png")), &gradient(64, 144)).unwrap();
            }
        }
        fs::create_dir(dir.path().join("empty")).unwrap();
        fs::write(dir.path().join("a").join("notes.txt"), "x").unwrap();
        let ds = ingest(dir.path(), 64, 144).unwrap();
        assert_eq!(ds.len(), 6);
        assert_eq!(ds.classes, vec!["a", "b"]);
        assert_eq!(ds.names[..3], ["a/0", "a/1", "a/2"]);
        assert_eq!(ds.labels, vec![0, 0, 0, 1, 1, 1]);
        assert_eq!(ds.images[0], gradient(64, 144));
        assert_eq!(ds, ingest(dir.path(), 64, 144).unwrap());
    }

    #[test]
    fn resizes_other_geometry() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("c")).unwrap();
        save_image(&dir.path().join("c/x.png"), &Array::full(&[1, 128, 288], 0.6)).unwrap();
        let ds = ingest(dir.path(), 64, 144).unwrap();
        assert_eq!(ds.images[0].shape(), &[1, 64, 144]);
        let v = (0.6f32 * 255.0).round() / 255.0;
        assert!(ds.images[0].data().iter().all(|&p| (p - v).abs() < 1e-5));
    }

    #[test]
    fn png_and_pgm_agree() {
        let dir = tempfile::tempdir().unwrap();
        let img = gradient(8, 12);
        save_image(&dir.path().join("a.png"), &img).unwrap();
        save_image(&dir.path().join("a.pgm"), &img).unwrap();
        assert_eq!(load_image(&dir.path().join("a.png")).unwrap(), load_image(&dir.path().join("a.pgm")).unwrap());
    }

    #[test]
    fn unreadable_file_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("c")).unwrap();
        fs::write(dir.path().join("c/broken.png"), b"not a png").unwrap();
        let e = ingest(dir.path(), 64, 144).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(ingest(&dir.path().join("missing"), 64, 144).is_err());
    }

    #[test]
    fn split_keeps_class_order() {
        let mut ds = Dataset {
            classes: vec!["a".into(), "b".into()],
            ..Dataset::default()
        };
        for i in 0..6 {
            ds.push(Array::full(&[1, 2, 2], i as f32), i / 3, format!("{i}"));
        }
        let (a, b) = ds.split_per_class(2);
        assert_eq!(a.names, ["0", "1", "3", "4"]);
        assert_eq!(b.names, ["2", "5"]);
        assert_eq!(b.labels, [0, 1]);
    }
}
