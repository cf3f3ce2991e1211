//! Dataset ingestion: CIFAR-10 binary batches, a directory of images with a
//! labels index, and a seeded synthetic two-blob generator.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
pub const BLOB_SIZE: usize = 16;
pub const BLOB_RECORD: usize = 1 + 3 * BLOB_SIZE * BLOB_SIZE;

/// Per-channel `(x / 255 - mean) / std` constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn cifar10() -> Self {
        Self { mean: vec![0.4914, 0.4822, 0.4465], std: vec![0.2470, 0.2435, 0.2616] }
    }

    pub fn imagenet() -> Self {
        Self { mean: vec![0.485, 0.456, 0.406], std: vec![0.229, 0.224, 0.225] }
    }

    pub fn centered() -> Self {
        Self { mean: vec![0.5; 3], std: vec![0.5; 3] }
    }

    fn check(&self, channels: usize) -> Result<()> {
        if self.mean.len() != channels || self.std.len() != channels || self.std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config(format!("normalization needs {channels} means and positive stds")));
        }
        Ok(())
    }
}

/// Where a dataset comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    Cifar10 { path: PathBuf },
    ImageDir { path: PathBuf, size: (usize, usize) },
    Blobs { count: usize, seed: u64 },
}

impl DatasetSource {
    pub fn default_normalization(&self) -> Normalization {
        match self {
            DatasetSource::Cifar10 { .. } => Normalization::cifar10(),
            DatasetSource::ImageDir { .. } => Normalization::imagenet(),
            DatasetSource::Blobs { .. } => Normalization::centered(),
        }
    }

    pub fn load(&self, norm: &Normalization) -> Result<Dataset> {
        match self {
            DatasetSource::Cifar10 { path } => {
                let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
                let raw = parse_records(&bytes, 3, 32, 32).map_err(|msg| Error::format(path, msg))?;
                Dataset::from_raw(raw, norm, 10)
            }
            DatasetSource::ImageDir { path, size } => Dataset::from_raw(read_image_dir(path, *size)?, norm, 0),
            DatasetSource::Blobs { count, seed } => {
                let bytes = two_blob_bytes(*count, *seed);
                let raw = parse_records(&bytes, 3, BLOB_SIZE, BLOB_SIZE).expect("generator emits whole records");
                Dataset::from_raw(raw, norm, 2)
            }
        }
    }
}

/// Raw 8-bit images with labels, `[c, h, w]` each.
#[derive(Clone, Debug, PartialEq)]
pub struct RawImages {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<Vec<u8>>,
    pub labels: Vec<usize>,
}

/// Splits `1 label byte + c*h*w pixel bytes` records.
pub fn parse_records(bytes: &[u8], c: usize, h: usize, w: usize) -> std::result::Result<RawImages, String> {
    let rec = 1 + c * h * w;
    if !bytes.len().is_multiple_of(rec) {
        let whole = bytes.len() / rec;
        return Err(format!(
            "truncated record {whole}: file has {} bytes, {} past the last complete {rec}-byte record at offset {}",
            bytes.len(),
            bytes.len() - whole * rec,
            whole * rec
        ));
    }
    let mut pixels = Vec::with_capacity(bytes.len() / rec);
    let mut labels = Vec::with_capacity(bytes.len() / rec);
    for r in bytes.chunks(rec) {
        labels.push(r[0] as usize);
        pixels.push(r[1..].to_vec());
    }
    Ok(RawImages { channels: c, height: h, width: w, pixels, labels })
}

/// Reads `labels.txt` (lines `relative/path label`) under `dir`, resizing
/// every image to `size` (height, width).
pub fn read_image_dir(dir: &Path, size: (usize, usize)) -> Result<RawImages> {
    let index = dir.join("labels.txt");
    let text = fs::read_to_string(&index).map_err(|e| Error::io(&index, e))?;
    let (h, w) = size;
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (file, label) = line
            .rsplit_once(char::is_whitespace)
            .ok_or_else(|| Error::format(&index, format!("line {}: expected `path label`", lineno + 1)))?;
        let label: usize = label
            .parse()
            .map_err(|_| Error::format(&index, format!("line {}: bad label {label:?}", lineno + 1)))?;
        let path = dir.join(file.trim());
        let img = image::open(&path).map_err(|e| Error::format(&path, e.to_string()))?;
        let img = img.resize_exact(w as u32, h as u32, image::imageops::FilterType::Triangle).to_rgb8();
        let mut chw = vec![0u8; 3 * h * w];
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                chw[c * h * w + y as usize * w + x as usize] = p[c];
            }
        }
        pixels.push(chw);
        labels.push(label);
    }
    if pixels.is_empty() {
        return Err(Error::Data(format!("{} lists no images", index.display())));
    }
    Ok(RawImages { channels: 3, height: h, width: w, pixels, labels })
}

/// Seeded two-class 16x16 RGB images in `label + pixels` records.
///
/// Class 0 has a bright blob in the upper-left quadrant, class 1 in the
/// lower-right; blob position, width, brightness and tint vary per image,
/// over uniform background noise.
pub fn two_blob_bytes(count: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 12.0).unwrap();
    let s = BLOB_SIZE;
    let mut out = Vec::with_capacity(count * BLOB_RECORD);
    for i in 0..count {
        let label = (i % 2) as u8;
        let (lo, hi) = if label == 0 { (2.5, 6.5) } else { (9.5, 13.5) };
        let cy = rng.gen_range(lo..hi);
        let cx = rng.gen_range(lo..hi);
        let sigma: f64 = rng.gen_range(1.2..2.4);
        let peak: f64 = rng.gen_range(150.0..230.0);
        let tint: [f64; 3] = [rng.gen_range(0.6..1.0), rng.gen_range(0.6..1.0), rng.gen_range(0.6..1.0)];
        let base: f64 = rng.gen_range(20.0..50.0);
        out.push(label);
        for t in tint {
            for y in 0..s {
                for x in 0..s {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    let v = base + peak * t * (-d2 / (2.0 * sigma * sigma)).exp() + noise.sample(&mut rng);
                    out.push(v.round().clamp(0.0, 255.0) as u8);
                }
            }
        }
    }
    out
}

/// Normalized images `[n, c, h, w]` with labels.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub normalization: Normalization,
}

impl Dataset {
    /// `num_classes = 0` infers the count from the largest label.
    pub fn from_raw(raw: RawImages, norm: &Normalization, num_classes: usize) -> Result<Self> {
        norm.check(raw.channels)?;
        if raw.pixels.is_empty() {
            return Err(Error::Data("dataset has no records".into()));
        }
        let inferred = raw.labels.iter().max().map_or(0, |m| m + 1);
        let num_classes = if num_classes == 0 { inferred } else { num_classes };
        if inferred > num_classes {
            return Err(Error::Data(format!("label {} out of range for {num_classes} classes", inferred - 1)));
        }
        let plane = raw.height * raw.width;
        let mut data = Vec::with_capacity(raw.pixels.len() * raw.channels * plane);
        for px in &raw.pixels {
            for (i, &b) in px.iter().enumerate() {
                let c = i / plane;
                data.push((b as f64 / 255.0 - norm.mean[c]) / norm.std[c]);
            }
        }
        let images = Tensor::from_vec(&[raw.pixels.len(), raw.channels, raw.height, raw.width], data)?;
        Ok(Self { images, labels: raw.labels, num_classes, normalization: norm.clone() })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Image shape `(c, h, w)`.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        let items: Vec<Tensor> = idx.iter().map(|&i| self.images.index_outer(i)).collect();
        Ok(Self {
            images: Tensor::stack(&items)?,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            normalization: self.normalization.clone(),
        })
    }

    /// Undoes the normalization of sample `i`, giving `[c, h, w]` values in `[0, 1]`.
    pub fn denormalized(&self, i: usize) -> Tensor {
        let t = self.images.index_outer(i);
        let plane = t.shape()[1] * t.shape()[2];
        let data = t
            .data()
            .iter()
            .enumerate()
            .map(|(j, v)| (v * self.normalization.std[j / plane] + self.normalization.mean[j / plane]).clamp(0.0, 1.0))
            .collect();
        Tensor::from_vec(t.shape(), data).unwrap()
    }

    /// Sample indices grouped by label.
    pub fn by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_stream_is_seeded() {
        let a = two_blob_bytes(20, 7);
        assert_eq!(a, two_blob_bytes(20, 7));
        assert_ne!(a, two_blob_bytes(20, 8));
        assert_eq!(a.len(), 20 * BLOB_RECORD);
        let raw = parse_records(&a, 3, 16, 16).unwrap();
        assert_eq!(raw.labels.iter().filter(|&&l| l == 1).count(), 10);
    }

    #[test]
    fn truncated_records_are_diagnosed() {
        let mut bytes = two_blob_bytes(3, 1);
        bytes.truncate(bytes.len() - 5);
        let err = parse_records(&bytes, 3, 16, 16).unwrap_err();
        assert!(err.contains("truncated record 2"), "{err}");
        assert!(err.contains(&format!("offset {}", 2 * BLOB_RECORD)), "{err}");
    }

    #[test]
    fn normalization_round_trips() {
        let ds = DatasetSource::Blobs { count: 4, seed: 3 }.load(&Normalization::centered()).unwrap();
        assert_eq!(ds.image_shape(), (3, 16, 16));
        let raw = parse_records(&two_blob_bytes(4, 3), 3, 16, 16).unwrap();
        let back = ds.denormalized(1);
        for (v, &b) in back.data().iter().zip(&raw.pixels[1]) {
            assert!((v - b as f64 / 255.0).abs() < 1e-12);
        }
        assert_eq!(ds.by_class(), vec![vec![0, 2], vec![1, 3]]);
    }

    #[test]
    fn cifar_file_with_ten_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("batch.bin");
        let mut bytes = Vec::new();
        for i in 0..10u8 {
            bytes.push(i);
            bytes.extend(std::iter::repeat_n(i * 20, 3072));
        }
        fs::write(&path, &bytes).unwrap();
        let ds = DatasetSource::Cifar10 { path: path.clone() }.load(&Normalization::cifar10()).unwrap();
        assert_eq!(ds.len(), 10);
        assert_eq!(ds.labels, (0..10).collect::<Vec<_>>());
        fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        let err = DatasetSource::Cifar10 { path }.load(&Normalization::cifar10()).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn image_directory_with_index() {
        let dir = tempfile::tempdir().unwrap();
        for (name, v) in [("a.png", 0u8), ("b.png", 255u8)] {
            let img = image::RgbImage::from_pixel(8, 8, image::Rgb([v, v, v]));
            img.save(dir.path().join(name)).unwrap();
        }
        fs::write(dir.path().join("labels.txt"), "a.png 0\nb.png 1\n").unwrap();
        let src = DatasetSource::ImageDir { path: dir.path().to_path_buf(), size: (4, 4) };
        let ds = src.load(&Normalization::centered()).unwrap();
        assert_eq!(ds.image_shape(), (3, 4, 4));
        assert_eq!(ds.num_classes, 2);
        assert!(ds.images.index_outer(0).data().iter().all(|&v| (v + 1.0).abs() < 1e-12));
        assert!(ds.images.index_outer(1).data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }
}
