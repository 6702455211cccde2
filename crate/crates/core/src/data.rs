//! Image datasets: directory loading and the procedural shapes set.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use walkdir::WalkDir;

use crate::error::{invalid, Result};
use crate::imaging;
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Images `[N,3,S,S]` in `[-1, 1]`, optionally labelled.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub images: Tensor<T>,
    pub labels: Option<Vec<usize>>,
    pub classes: Vec<String>,
}

impl<T: Real> Dataset<T> {
    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image_size(&self) -> usize {
        self.images.shape()[2]
    }

    /// Rows `indices` as one batch.
    pub fn batch(&self, indices: &[usize]) -> Tensor<T> {
        gather(&self.images, indices)
    }

    /// First `n` images and the rest.
    pub fn split(&self, n: usize) -> Result<(Self, Self)> {
        if n == 0 || n >= self.len() {
            return Err(invalid(format!("cannot split {} images at {n}", self.len())));
        }
        let part = |a: usize, b: usize| Dataset {
            images: self.images.slice_rows(a, b).expect("in range"),
            labels: self.labels.as_ref().map(|l| l[a..b].to_vec()),
            classes: self.classes.clone(),
        };
        Ok((part(0, n), part(n, self.len())))
    }

    pub fn cast<U: Real>(&self) -> Dataset<U> {
        Dataset {
            images: self.images.cast(),
            labels: self.labels.clone(),
            classes: self.classes.clone(),
        }
    }
}

/// Rows of a batch-major tensor in the given order.
pub fn gather<T: Real>(t: &Tensor<T>, indices: &[usize]) -> Tensor<T> {
    let row: usize = t.shape()[1..].iter().product();
    let mut data = Vec::with_capacity(indices.len() * row);
    for &i in indices {
        data.extend_from_slice(&t.data()[i * row..(i + 1) * row]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = indices.len();
    Tensor::new(shape, data).expect("consistent extents")
}

/// Where and how to read an image folder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSpec {
    pub root: PathBuf,
    pub size: u32,
    pub center_crop: bool,
}

fn accepted(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

/// Load every PNG/JPEG under `spec.root` in lexicographic path order.
///
/// Images inside a first-level subdirectory take that directory's name as
/// their class; labels are kept only if every image has one. Unreadable
/// files are skipped with a warning.
pub fn load_dir<T: Real>(spec: &DatasetSpec) -> Result<Dataset<T>> {
    let mut files = Vec::new();
    for entry in WalkDir::new(&spec.root).sort_by_file_name() {
        let entry = entry.map_err(|e| invalid(format!("reading {}: {e}", spec.root.display())))?;
        if entry.file_type().is_file() {
            if accepted(entry.path()) {
                files.push(entry.into_path());
            } else {
                log::warn!("skipping {} (not PNG or JPEG)", entry.path().display());
            }
        }
    }
    let mut classes: Vec<String> = Vec::new();
    let mut labels = Vec::new();
    let mut data = Vec::new();
    let mut count = 0;
    for path in files {
        let img = match std::fs::read(&path).map_err(crate::Error::from).and_then(|b| imaging::decode(&b)) {
            Ok(img) => img,
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                continue;
            }
        };
        let rgb = imaging::prepare(&img, spec.size, spec.center_crop);
        let unit: Tensor<T> = imaging::rgb_to_unit(&rgb);
        data.extend(imaging::to_model(&unit).into_data());
        count += 1;
        let rel = path.strip_prefix(&spec.root).unwrap_or(&path);
        let class = (rel.components().count() > 1)
            .then(|| rel.components().next().map(|c| c.as_os_str().to_string_lossy().into_owned()))
            .flatten();
        labels.push(class.map(|c| match classes.iter().position(|k| *k == c) {
            Some(i) => i,
            None => {
                classes.push(c);
                classes.len() - 1
            }
        }));
    }
    if count == 0 {
        return Err(invalid(format!("no readable images under {}", spec.root.display())));
    }
    let s = spec.size as usize;
    let labels: Option<Vec<usize>> = labels.into_iter().collect();
    Ok(Dataset {
        images: Tensor::new([count, 3, s, s], data)?,
        classes: if labels.is_some() { classes } else { Vec::new() },
        labels,
    })
}

pub const SHAPE_KINDS: [&str; 2] = ["ellipse", "rectangle"];
pub const HUES: [(&str, f64); 5] = [("red", 0.0), ("yellow", 60.0), ("green", 120.0), ("cyan", 190.0), ("purple", 280.0)];
const BACKGROUND: f64 = 0.12;
const SUPERSAMPLE: usize = 3;

/// HSV with `h` in degrees to RGB in `[0, 1]`.
fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = (h.rem_euclid(360.0)) / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// One procedural image `[3,S,S]` in `[0, 1]` of class `label`
/// (`shape_kind · 5 + hue`).
pub fn draw_shape<R: Rng + ?Sized>(size: usize, label: usize, rng: &mut R) -> Vec<f64> {
    let (kind, hue) = (label / HUES.len(), label % HUES.len());
    let s = size as f64;
    let color = hsv(
        HUES[hue].1 + rng.random_range(-12.0..12.0),
        rng.random_range(0.65..1.0),
        rng.random_range(0.7..1.0),
    );
    let (cx, cy) = (rng.random_range(0.3..0.7) * s, rng.random_range(0.3..0.7) * s);
    let (a, b) = (rng.random_range(0.12..0.3) * s, rng.random_range(0.12..0.3) * s);
    let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let (ct, st) = (theta.cos(), theta.sin());
    let inside = |px: f64, py: f64| {
        let (dx, dy) = (px - cx, py - cy);
        let (u, v) = ((dx * ct + dy * st) / a, (-dx * st + dy * ct) / b);
        if kind == 0 {
            u * u + v * v <= 1.0
        } else {
            u.abs() <= 1.0 && v.abs() <= 1.0
        }
    };
    let plane = size * size;
    let mut out = vec![BACKGROUND; 3 * plane];
    let n = SUPERSAMPLE as f64;
    for y in 0..size {
        for x in 0..size {
            let mut hits = 0usize;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    hits += inside(x as f64 + (sx as f64 + 0.5) / n, y as f64 + (sy as f64 + 0.5) / n) as usize;
                }
            }
            let cover = hits as f64 / (n * n);
            for c in 0..3 {
                out[c * plane + y * size + x] = BACKGROUND * (1.0 - cover) + color[c] * cover;
            }
        }
    }
    out
}

/// `n` shapes images with balanced classes, deterministic in `seed`.
pub fn synthetic_shapes<T: Real>(n: usize, size: usize, seed: u64) -> Dataset<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = SHAPE_KINDS.len() * HUES.len();
    let mut data = Vec::with_capacity(n * 3 * size * size);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % k;
        data.extend(draw_shape(size, label, &mut rng).into_iter().map(|v| T::lit(2.0 * v - 1.0)));
        labels.push(label);
    }
    Dataset {
        images: Tensor::new([n, 3, size, size], data).expect("consistent extents"),
        labels: Some(labels),
        classes: shape_class_names(),
    }
}

pub fn shape_class_names() -> Vec<String> {
    SHAPE_KINDS
        .iter()
        .flat_map(|k| HUES.iter().map(move |(h, _)| format!("{h}_{k}")))
        .collect()
}

/// Write a dataset as PNGs under `root/<class>/<index>.png`.
pub fn write_png_dir<T: Real>(data: &Dataset<T>, root: &Path) -> Result<()> {
    for i in 0..data.len() {
        let dir = match &data.labels {
            Some(l) => root.join(&data.classes[l[i]]),
            None => root.to_path_buf(),
        };
        std::fs::create_dir_all(&dir)?;
        let unit = imaging::to_unit(&data.images.slice_rows(i, i + 1)?);
        imaging::unit_to_rgb(&unit)?.save(dir.join(format!("{i:06}.png")))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_are_deterministic_and_balanced() {
        let a = synthetic_shapes::<f32>(40, 16, 3);
        assert_eq!(a, synthetic_shapes::<f32>(40, 16, 3));
        assert_ne!(a.images, synthetic_shapes::<f32>(40, 16, 4).images);
        let labels = a.labels.as_ref().unwrap();
        for k in 0..10 {
            assert_eq!(labels.iter().filter(|&&l| l == k).count(), 4);
        }
        assert!(a.images.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(a.classes.len(), 10);
    }

    #[test]
    fn hsv_primaries() {
        let close = |a: [f64; 3], b: [f64; 3]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12);
        assert!(close(hsv(0.0, 1.0, 1.0), [1.0, 0.0, 0.0]));
        assert!(close(hsv(120.0, 1.0, 1.0), [0.0, 1.0, 0.0]));
        assert!(close(hsv(240.0, 1.0, 1.0), [0.0, 0.0, 1.0]));
    }

    #[test]
    fn gather_reorders_rows() {
        let t = Tensor::<f64>::from_fn([3, 2], |i| i as f64);
        assert_eq!(gather(&t, &[2, 0]).data(), &[4.0, 5.0, 0.0, 1.0]);
    }
}
