use std::path::Path;
use std::sync::Arc;

use image::imageops::FilterType;

use super::{Dataset, Sample};
use crate::error::{Error, Result};

const EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Decode an image file into a 3 x H x W buffer in [0, 1], resized
/// bilinearly to `(h, w)` when needed.
pub fn read_image(path: &Path, (h, w): (usize, usize)) -> Result<Vec<f32>> {
    let img = image::open(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut rgb = img.to_rgb8();
    if rgb.width() as usize != w || rgb.height() as usize != h {
        rgb = image::imageops::resize(&rgb, w as u32, h as u32, FilterType::Triangle);
    }
    let mut out = vec![0f32; 3 * h * w];
    for (x, y, p) in rgb.enumerate_pixels() {
        for c in 0..3 {
            out[c * h * w + y as usize * w + x as usize] = p[c] as f32 / 255.0;
        }
    }
    Ok(out)
}

/// Load `root/<class_name>/<image>` trees. Classes are indexed by sorted
/// directory name; image ids are `<class_name>/<file_name>`.
pub fn load_dataset(root: impl AsRef<Path>, image_size: (usize, usize)) -> Result<Dataset> {
    let root = root.as_ref();
    if !root.is_dir() {
        return Err(Error::MissingFile(root.to_path_buf()));
    }
    let mut class_dirs: Vec<_> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.path())
        .collect();
    class_dirs.sort();
    if class_dirs.len() < 2 {
        return Err(Error::Data(format!(
            "{} must contain at least two class directories",
            root.display()
        )));
    }
    let mut samples = Vec::new();
    let mut class_names = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        let class_name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let mut files: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| {
                p.is_file()
                    && p.extension()
                        .and_then(|e| e.to_str())
                        .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
            })
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Data(format!("class directory {} has no images", dir.display())));
        }
        for path in files {
            let pixels = read_image(&path, image_size)?;
            let file_name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            samples.push(Sample {
                image_id: format!("{class_name}/{file_name}"),
                label,
                path: Some(path),
                pixels: Arc::new(pixels),
            });
        }
        class_names.push(class_name);
    }
    Ok(Dataset {
        samples,
        class_names,
        image_size,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{Rgb, RgbImage};

    fn write_png(path: &Path, w: u32, h: u32, color: [u8; 3]) {
        RgbImage::from_pixel(w, h, Rgb(color)).save(path).unwrap();
    }

    #[test]
    fn sorted_class_assignment_and_resize() {
        let dir = tempfile::tempdir().unwrap();
        for (class, color) in [("b", [0, 0, 255]), ("a", [255, 0, 0])] {
            std::fs::create_dir(dir.path().join(class)).unwrap();
            for i in 0..3 {
                write_png(&dir.path().join(class).join(format!("{i}.png")), 20, 10, color);
            }
        }
        let ds = load_dataset(dir.path(), (8, 8)).unwrap();
        assert_eq!(ds.class_names, vec!["a", "b"]);
        assert_eq!(ds.len(), 6);
        assert_eq!(ds.samples[0].label, 0);
        assert_eq!(ds.samples[0].image_id, "a/0.png");
        assert_eq!(ds.samples[0].pixels.len(), 3 * 64);
        // class a is pure red
        assert_eq!(ds.samples[0].pixels[0], 1.0);
        assert_eq!(ds.samples[0].pixels[64], 0.0);
        assert_eq!(ds.samples[5].label, 1);
        ds.validate().unwrap();
    }

    #[test]
    fn empty_class_dir_rejected_by_name() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("cats")).unwrap();
        std::fs::create_dir(dir.path().join("dogs")).unwrap();
        write_png(&dir.path().join("cats").join("0.png"), 4, 4, [1, 2, 3]);
        let err = load_dataset(dir.path(), (4, 4)).unwrap_err();
        assert!(err.to_string().contains("dogs"), "{err}");
    }

    #[test]
    fn undecodable_file_rejected_with_path() {
        let dir = tempfile::tempdir().unwrap();
        for class in ["x", "y"] {
            std::fs::create_dir(dir.path().join(class)).unwrap();
            write_png(&dir.path().join(class).join("ok.png"), 4, 4, [9, 9, 9]);
        }
        std::fs::write(dir.path().join("y").join("broken.png"), b"not an image").unwrap();
        let err = load_dataset(dir.path(), (4, 4)).unwrap_err();
        assert!(err.to_string().contains("broken.png"), "{err}");
    }

    #[test]
    fn missing_root_names_path() {
        let err = load_dataset("/definitely/not/here", (4, 4)).unwrap_err();
        assert!(err.to_string().contains("/definitely/not/here"));
    }
}
