//! Toy datasets and the IDX file format.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{RngStream, Tensor};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Value range of a dataset's coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataRange {
    /// Pixels in `[0, 1]`.
    Unit,
    /// Unconstrained points.
    Unbounded,
}

impl DataRange {
    pub fn clamp(self, x: &Tensor) -> Tensor {
        match self {
            DataRange::Unit => x.clamp(0.0, 1.0),
            DataRange::Unbounded => x.clone(),
        }
    }

    pub fn contains(self, v: f32) -> bool {
        match self {
            DataRange::Unit => (0.0..=1.0).contains(&v),
            DataRange::Unbounded => v.is_finite(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    #[serde(rename = "gaussian_mixture_2d")]
    GaussianMixture2d {
        #[serde(default = "two")]
        classes: usize,
        #[serde(default = "default_per_class")]
        per_class: usize,
        #[serde(default = "default_radius")]
        radius: f32,
        #[serde(default = "default_std")]
        std: f32,
        #[serde(default)]
        seed: u64,
    },
    #[serde(rename = "synthetic_shapes_16x16")]
    SyntheticShapes16x16 {
        #[serde(default = "four")]
        classes: usize,
        #[serde(default = "default_per_class")]
        per_class: usize,
        #[serde(default)]
        seed: u64,
    },
    IdxImages {
        images: PathBuf,
        labels: PathBuf,
    },
}

fn two() -> usize {
    2
}
fn four() -> usize {
    4
}
fn default_per_class() -> usize {
    200
}
fn default_radius() -> f32 {
    1.0
}
fn default_std() -> f32 {
    0.1
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::SyntheticShapes16x16 { classes: 4, per_class: 200, seed: 0 }
    }
}

/// Labeled rows of flattened samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[n, dim]`
    pub data: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub range: DataRange,
    /// `(height, width)` for image data.
    pub image_size: Option<(usize, usize)>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.data.cols()
    }

    pub fn indices_of(&self, class: usize) -> Vec<usize> {
        self.labels.iter().enumerate().filter(|(_, &l)| l == class).map(|(i, _)| i).collect()
    }

    pub fn class_data(&self, class: usize) -> Tensor {
        self.data.select_rows(&self.indices_of(class))
    }
}

pub fn load_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    match spec {
        DatasetSpec::GaussianMixture2d { classes, per_class, radius, std, seed } => {
            Ok(gaussian_mixture_2d(*classes, *per_class, *radius, *std, *seed))
        }
        DatasetSpec::SyntheticShapes16x16 { classes, per_class, seed } => {
            synthetic_shapes(*classes, *per_class, *seed)
        }
        DatasetSpec::IdxImages { images, labels } => read_idx_dataset(images, labels),
    }
}

/// `classes` isotropic Gaussians with means evenly spaced on a circle.
pub fn gaussian_mixture_2d(classes: usize, per_class: usize, radius: f32, std: f32, seed: u64) -> Dataset {
    let mut rng = RngStream::new(seed);
    let mut data = Vec::with_capacity(classes * per_class * 2);
    let mut labels = Vec::with_capacity(classes * per_class);
    for c in 0..classes {
        let angle = std::f32::consts::TAU * c as f32 / classes as f32;
        let (mx, my) = (radius * angle.cos(), radius * angle.sin());
        let noise = rng.gaussian(&[per_class, 2]);
        for p in noise.data().chunks_exact(2) {
            data.push(mx + std * p[0]);
            data.push(my + std * p[1]);
            labels.push(c);
        }
    }
    Dataset {
        data: Tensor::from_parts(vec![labels.len(), 2], data),
        labels,
        classes,
        range: DataRange::Unbounded,
        image_size: None,
    }
}

pub const SHAPE_SIDE: usize = 16;
pub const SHAPE_NAMES: [&str; 6] = ["square", "disc", "cross", "ring", "hbars", "diagonal"];

/// 16×16 grayscale shapes with jittered position, size and intensity.
/// Class `k` draws shape `SHAPE_NAMES[k]`.
pub fn synthetic_shapes(classes: usize, per_class: usize, seed: u64) -> Result<Dataset> {
    if classes == 0 || classes > SHAPE_NAMES.len() {
        return Err(Error::Config(format!("synthetic shapes support 1..={} classes", SHAPE_NAMES.len())));
    }
    let mut rng = RngStream::new(seed);
    let n = SHAPE_SIDE;
    let mut data = Vec::with_capacity(classes * per_class * n * n);
    let mut labels = Vec::new();
    for c in 0..classes {
        for _ in 0..per_class {
            let cx = 7.5 + rng.uniform_int(0, 4) as f32 - 2.0;
            let cy = 7.5 + rng.uniform_int(0, 4) as f32 - 2.0;
            let size = 3.0 + 2.0 * rng.uniform() as f32;
            let fg = 0.7 + 0.3 * rng.uniform() as f32;
            let bg = 0.1 * rng.uniform() as f32;
            for y in 0..n {
                for x in 0..n {
                    let dx = x as f32 - cx;
                    let dy = y as f32 - cy;
                    let r = (dx * dx + dy * dy).sqrt();
                    let inside = match c {
                        0 => dx.abs() <= size && dy.abs() <= size,
                        1 => r <= size + 0.5,
                        2 => (dx.abs() <= 1.0 && dy.abs() <= size + 1.0) || (dy.abs() <= 1.0 && dx.abs() <= size + 1.0),
                        3 => (r - size - 0.5).abs() <= 1.0,
                        4 => dx.abs() <= size + 1.0 && ((dy + 3.0).abs() <= 0.8 || (dy - 3.0).abs() <= 0.8),
                        _ => (dx - dy).abs() <= 1.2 && dx.abs() <= size + 1.0,
                    };
                    data.push(if inside { fg } else { bg });
                }
            }
            labels.push(c);
        }
    }
    Ok(Dataset {
        data: Tensor::new(vec![labels.len(), n * n], data)?,
        labels,
        classes,
        range: DataRange::Unit,
        image_size: Some((n, n)),
    })
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    let chunk = bytes
        .get(at..at + 4)
        .ok_or(Error::Truncated { expected: at + 4, found: bytes.len() })?;
    Ok(u32::from_be_bytes(chunk.try_into().expect("4 bytes")))
}

/// Decodes an IDX image file (`u8` pixels, 3 dimensions) into `[n, h*w]` in `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(Tensor, (usize, usize))> {
    let magic = read_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Magic { found: magic, expected: IDX_IMAGES_MAGIC });
    }
    let n = read_u32(bytes, 4)? as usize;
    let h = read_u32(bytes, 8)? as usize;
    let w = read_u32(bytes, 12)? as usize;
    let expected = 16 + n * h * w;
    if bytes.len() < expected {
        return Err(Error::Truncated { expected, found: bytes.len() });
    }
    let data = bytes[16..expected].iter().map(|&b| b as f32 / 255.0).collect();
    Ok((Tensor::new(vec![n, h * w], data)?, (h, w)))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = read_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Magic { found: magic, expected: IDX_LABELS_MAGIC });
    }
    let n = read_u32(bytes, 4)? as usize;
    let expected = 8 + n;
    if bytes.len() < expected {
        return Err(Error::Truncated { expected, found: bytes.len() });
    }
    Ok(bytes[8..expected].iter().map(|&b| b as usize).collect())
}

pub fn read_idx_dataset(images: &Path, labels: &Path) -> Result<Dataset> {
    let (data, size) = parse_idx_images(&std::fs::read(images)?)?;
    let labels = parse_idx_labels(&std::fs::read(labels)?)?;
    if labels.len() != data.rows() {
        return Err(Error::CountMismatch { images: data.rows(), labels: labels.len() });
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    Ok(Dataset { data, labels, classes, range: DataRange::Unit, image_size: Some(size) })
}

/// Encodes `[n, h*w]` pixels in `[0, 1]` as an IDX image file.
pub fn encode_idx_images(data: &Tensor, height: usize, width: usize) -> Result<Vec<u8>> {
    if data.cols() != height * width {
        return Err(Error::Dimension(format!("rows of {} vs {height}x{width}", data.cols())));
    }
    let mut out = Vec::with_capacity(16 + data.len());
    for v in [IDX_IMAGES_MAGIC, data.rows() as u32, height as u32, width as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend(data.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn encode_idx_labels(labels: &[usize]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend(labels.iter().map(|&l| l as u8));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_image_fixture() -> Vec<u8> {
        let mut b = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2];
        b.extend_from_slice(&[0, 255, 51, 102, 10, 20, 30, 40]);
        b
    }

    #[test]
    fn hand_built_idx_decodes() {
        let (t, size) = parse_idx_images(&two_image_fixture()).unwrap();
        assert_eq!(size, (2, 2));
        assert_eq!(t.shape(), &[2, 4]);
        let expected: Vec<f32> = [0u8, 255, 51, 102, 10, 20, 30, 40].iter().map(|&b| b as f32 / 255.0).collect();
        assert_eq!(t.data(), expected.as_slice());
    }

    #[test]
    fn truncated_idx_names_expected_length() {
        let mut b = two_image_fixture();
        b.pop();
        match parse_idx_images(&b) {
            Err(Error::Truncated { expected, found }) => {
                assert_eq!(expected, 24);
                assert_eq!(found, 23);
            }
            other => panic!("{other:?}"),
        }
        let msg = parse_idx_images(&b).unwrap_err().to_string();
        assert!(msg.contains("24"), "{msg}");
    }

    #[test]
    fn wrong_magic_rejected() {
        let b = two_image_fixture();
        assert!(matches!(parse_idx_labels(&b), Err(Error::Magic { .. })));
    }

    #[test]
    fn label_count_mismatch() {
        let dir = std::env::temp_dir().join(format!("advdm-idx-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let (img, lab) = (dir.join("img"), dir.join("lab"));
        std::fs::write(&img, two_image_fixture()).unwrap();
        std::fs::write(&lab, encode_idx_labels(&[1, 0, 1])).unwrap();
        assert!(matches!(read_idx_dataset(&img, &lab), Err(Error::CountMismatch { .. })));
        std::fs::write(&lab, encode_idx_labels(&[1, 0])).unwrap();
        let ds = read_idx_dataset(&img, &lab).unwrap();
        assert_eq!(ds.classes, 2);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn shapes_are_deterministic_and_in_range() {
        let a = synthetic_shapes(4, 10, 3).unwrap();
        let b = synthetic_shapes(4, 10, 3).unwrap();
        assert_eq!(a, b);
        let bytes_a = encode_idx_images(&a.data, 16, 16).unwrap();
        assert_eq!(bytes_a, encode_idx_images(&b.data, 16, 16).unwrap());
        assert!(a.data.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(a.indices_of(2).len(), 10);
        assert!(a.labels.iter().all(|&l| l < 4));
    }

    #[test]
    fn mixture_labels_dense() {
        let m = gaussian_mixture_2d(2, 50, 1.0, 0.1, 0);
        assert_eq!(m.len(), 100);
        assert_eq!(m.classes, 2);
        assert_eq!(m.dim(), 2);
    }
}
