//! Image datasets in the CIFAR-10 binary record layout.
//!
//! A record is one label byte followed by the R, G and B planes of the
//! image, each row-major. CIFAR-10 records are 3073 bytes (32×32 pixels);
//! synthetic sets may use other square sizes with the same layout.

use std::fs;
use std::path::{Path, PathBuf};

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{uniform01, Purpose, StreamKey};
use crate::tensor::{Real, Tensor};

pub const CHANNELS: usize = 3;
pub const CIFAR_SIZE: usize = 32;
pub const CIFAR_CLASSES: usize = 10;
pub const CIFAR_RECORD: usize = 1 + CHANNELS * CIFAR_SIZE * CIFAR_SIZE;

/// Per-channel normalisation applied to pixels scaled to `[0, 1]`.
pub const MEAN: [f64; 3] = [0.4914, 0.4822, 0.4465];
pub const STD: [f64; 3] = [0.2470, 0.2435, 0.2616];

/// Labels and raw pixel bytes of square RGB images.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    image_size: usize,
    classes: usize,
    labels: Vec<u8>,
    pixels: Vec<u8>,
}

/// A minibatch: normalised images and integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl<T: Real> Batch<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// One-hot rows `[N, classes]`, optionally label-smoothed.
    pub fn targets(&self, smoothing: f64) -> Vec<T> {
        let c = self.classes;
        let off = T::lit(smoothing / c as f64);
        let on = T::lit(1.0 - smoothing + smoothing / c as f64);
        let mut out = vec![off; self.labels.len() * c];
        for (row, &y) in self.labels.iter().enumerate() {
            out[row * c + y] = on;
        }
        out
    }

    pub fn cast<U: Real>(&self) -> Batch<U> {
        Batch {
            images: self.images.cast(),
            labels: self.labels.clone(),
            classes: self.classes,
        }
    }
}

impl Dataset {
    pub fn new(image_size: usize, classes: usize, labels: Vec<u8>, pixels: Vec<u8>) -> Result<Self> {
        if image_size == 0 || classes == 0 || classes > 256 {
            return Err(Error::Config(format!(
                "invalid dataset geometry: image-size {image_size}, classes {classes}"
            )));
        }
        if pixels.len() != labels.len() * CHANNELS * image_size * image_size {
            return Err(Error::Format("pixel buffer does not match label count".into()));
        }
        if let Some(pos) = labels.iter().position(|&l| l as usize >= classes) {
            return Err(Error::Format(format!(
                "record {pos} has label {} but there are {classes} classes",
                labels[pos]
            )));
        }
        Ok(Dataset {
            image_size,
            classes,
            labels,
            pixels,
        })
    }

    /// Parses concatenated records.
    pub fn from_records(bytes: &[u8], image_size: usize, classes: usize) -> Result<Self> {
        let rec = record_len(image_size);
        if bytes.len() % rec != 0 {
            return Err(Error::Format(format!(
                "file length {} is not a multiple of the {rec}-byte record size",
                bytes.len()
            )));
        }
        let n = bytes.len() / rec;
        let mut labels = Vec::with_capacity(n);
        let mut pixels = Vec::with_capacity(n * (rec - 1));
        for r in bytes.chunks_exact(rec) {
            labels.push(r[0]);
            pixels.extend_from_slice(&r[1..]);
        }
        Self::new(image_size, classes, labels, pixels)
    }

    pub fn to_records(&self) -> Vec<u8> {
        let px = self.pixels_per_image();
        let mut out = Vec::with_capacity(self.len() * (px + 1));
        for (i, &l) in self.labels.iter().enumerate() {
            out.push(l);
            out.extend_from_slice(&self.pixels[i * px..(i + 1) * px]);
        }
        out
    }

    pub fn load(path: &Path, image_size: usize, classes: usize) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_records(&bytes, image_size, classes)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_records())?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn pixels_per_image(&self) -> usize {
        CHANNELS * self.image_size * self.image_size
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let px = self.pixels_per_image();
        &self.pixels[i * px..(i + 1) * px]
    }

    /// The first `n` records (or all of them).
    pub fn truncate(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            image_size: self.image_size,
            classes: self.classes,
            labels: self.labels[..n].to_vec(),
            pixels: self.pixels[..n * self.pixels_per_image()].to_vec(),
        }
    }

    /// Normalised batch of the given records.
    pub fn batch<T: Real>(&self, indices: &[usize]) -> Batch<T> {
        let s = self.image_size;
        let px = self.pixels_per_image();
        let mut data = Vec::with_capacity(indices.len() * px);
        let scale: Vec<(f64, f64)> = (0..CHANNELS).map(|c| (MEAN[c], 1.0 / STD[c])).collect();
        for &i in indices {
            for (j, &b) in self.image(i).iter().enumerate() {
                let (m, inv) = scale[j / (s * s)];
                data.push(T::lit((b as f64 / 255.0 - m) * inv));
            }
        }
        Batch {
            images: Tensor::new(vec![indices.len(), CHANNELS, s, s], data)
                .expect("batch geometry is consistent"),
            labels: indices.iter().map(|&i| self.labels[i] as usize).collect(),
            classes: self.classes,
        }
    }
}

pub fn record_len(image_size: usize) -> usize {
    1 + CHANNELS * image_size * image_size
}

/// Train and test splits.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
}

/// Reads `data_batch_1.bin` .. `data_batch_5.bin` and `test_batch.bin`
/// from a CIFAR-10 binary directory. Missing training batches are skipped
/// as long as at least one is present.
pub fn load_cifar10(dir: &Path) -> Result<Splits> {
    let mut bytes = Vec::new();
    let mut found = 0;
    for i in 1..=5 {
        let p = dir.join(format!("data_batch_{i}.bin"));
        if p.exists() {
            bytes.extend(read_cifar_file(&p)?);
            found += 1;
        }
    }
    if found == 0 {
        return Err(Error::Format(format!(
            "no data_batch_*.bin files under {}",
            dir.display()
        )));
    }
    let test = read_cifar_file(&dir.join("test_batch.bin"))?;
    Ok(Splits {
        train: Dataset::from_records(&bytes, CIFAR_SIZE, CIFAR_CLASSES)?,
        test: Dataset::from_records(&test, CIFAR_SIZE, CIFAR_CLASSES)?,
    })
}

fn read_cifar_file(path: &PathBuf) -> Result<Vec<u8>> {
    let bytes = fs::read(path)?;
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Format(format!(
            "{}: length {} is not a multiple of {CIFAR_RECORD}",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes)
}

/// Parameters of the synthetic class-conditional blob images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    pub per_class: usize,
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    /// Peak blob amplitude in units of the pixel noise deviation.
    #[serde(default = "default_separation")]
    pub separation: f64,
    /// Pixel noise standard deviation, in byte units.
    #[serde(default = "default_noise")]
    pub noise: f64,
    /// Gaussian blobs per class pattern.
    #[serde(default = "default_blobs")]
    pub blobs: usize,
    /// Maximum per-sample translation of the class pattern, in pixels.
    #[serde(default)]
    pub jitter: usize,
    /// Noise stream index; splits of one seed share class patterns.
    #[serde(default)]
    pub split: u64,
}

fn default_classes() -> usize {
    CIFAR_CLASSES
}
fn default_image_size() -> usize {
    CIFAR_SIZE
}
fn default_separation() -> f64 {
    4.0
}
fn default_noise() -> f64 {
    24.0
}
fn default_blobs() -> usize {
    3
}

impl SynthSpec {
    pub fn new(seed: u64, per_class: usize, classes: usize, image_size: usize) -> Self {
        SynthSpec {
            seed,
            per_class,
            classes,
            image_size,
            separation: default_separation(),
            noise: default_noise(),
            blobs: default_blobs(),
            jitter: 0,
            split: 0,
        }
    }

    /// Class mean patterns in `[-1, 1]`, `[classes][3 * s * s]`.
    pub fn patterns(&self) -> Vec<Vec<f64>> {
        let s = self.image_size;
        (0..self.classes)
            .map(|k| {
                let mut rng = StreamKey::new(self.seed, Purpose::SynthPattern, k as u64).rng();
                let mut p = vec![0.0; CHANNELS * s * s];
                for _ in 0..self.blobs {
                    let cy = uniform01(&mut rng) * s as f64;
                    let cx = uniform01(&mut rng) * s as f64;
                    let radius = s as f64 * (0.1 + 0.15 * uniform01(&mut rng));
                    let colour: Vec<f64> = (0..CHANNELS)
                        .map(|_| 2.0 * uniform01(&mut rng) - 1.0)
                        .collect();
                    for (c, col) in colour.iter().enumerate() {
                        for y in 0..s {
                            for x in 0..s {
                                let d2 = (y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2);
                                p[(c * s + y) * s + x] += col * (-d2 / (2.0 * radius * radius)).exp();
                            }
                        }
                    }
                }
                let peak = p.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                if peak > 0.0 {
                    p.iter_mut().for_each(|v| *v /= peak);
                }
                p
            })
            .collect()
    }
}

/// Deterministic synthetic dataset: class pattern, optional translation,
/// Gaussian pixel noise, quantised to bytes. Samples are interleaved by
/// class (`0, 1, .., classes-1, 0, 1, ..`).
pub fn gen_synth(spec: &SynthSpec) -> Result<Dataset> {
    if spec.classes < 2 {
        return Err(Error::Config("synthetic data needs at least 2 classes".into()));
    }
    if spec.image_size == 0 || !(spec.noise >= 0.0) || !spec.separation.is_finite() {
        return Err(Error::Config("invalid synthetic image parameters".into()));
    }
    let s = spec.image_size;
    let patterns = spec.patterns();
    let amp = spec.separation * spec.noise;
    let n = spec.per_class * spec.classes;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * CHANNELS * s * s);
    let mut rng = StreamKey::new(spec.seed, Purpose::SynthNoise, spec.split).rng();
    let span = 2 * spec.jitter + 1;
    for i in 0..n {
        let k = i % spec.classes;
        labels.push(k as u8);
        let dy = (uniform01(&mut rng) * span as f64) as usize;
        let dx = (uniform01(&mut rng) * span as f64) as usize;
        for c in 0..CHANNELS {
            for y in 0..s {
                let sy = (y + s * span - dy + spec.jitter) % s;
                for x in 0..s {
                    let sx = (x + s * span - dx + spec.jitter) % s;
                    let e: f64 = StandardNormal.sample(&mut rng);
                    let v = 128.0 + amp * patterns[k][(c * s + sy) * s + sx] + spec.noise * e;
                    pixels.push(v.round().clamp(0.0, 255.0) as u8);
                }
            }
        }
    }
    Dataset::new(s, spec.classes, labels, pixels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_roundtrip_and_labels() {
        let mut bytes = Vec::new();
        for i in 0..10u8 {
            bytes.push(if i == 0 { 6 } else { i % 10 });
            bytes.extend((0..3072).map(|j| (j % 251) as u8 ^ i));
        }
        let d = Dataset::from_records(&bytes, 32, 10).unwrap();
        assert_eq!(d.len(), 10);
        let b = d.batch::<f32>(&[0]);
        assert_eq!(b.labels, vec![6]);
        let t = b.targets(0.0);
        assert_eq!(t.iter().position(|&v| v == 1.0), Some(6));
        assert_eq!(d.to_records(), bytes);
    }

    #[test]
    fn rejects_truncated_and_bad_label() {
        let bytes = vec![0u8; CIFAR_RECORD * 2 - 5];
        let err = Dataset::from_records(&bytes, 32, 10).unwrap_err();
        assert!(err.to_string().contains("3073"), "{err}");
        let mut bytes = vec![0u8; CIFAR_RECORD];
        bytes[0] = 10;
        assert!(matches!(Dataset::from_records(&bytes, 32, 10), Err(Error::Format(_))));
    }

    #[test]
    fn normalisation_constants() {
        let mut bytes = vec![3u8];
        bytes.extend(std::iter::repeat(255u8).take(3072));
        let d = Dataset::from_records(&bytes, 32, 10).unwrap();
        let b = d.batch::<f64>(&[0]);
        for c in 0..3 {
            let want = (1.0 - MEAN[c]) / STD[c];
            assert!((b.images.data()[c * 1024] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn smoothed_targets_sum_to_one() {
        let b = Batch::<f64> {
            images: Tensor::zeros(&[2, 3, 1, 1]),
            labels: vec![0, 2],
            classes: 4,
        };
        let t = b.targets(0.1);
        for row in t.chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!((t[0] - 0.925).abs() < 1e-12 && (t[1] - 0.025).abs() < 1e-12);
    }

    #[test]
    fn synth_is_deterministic() {
        let spec = SynthSpec::new(5, 4, 3, 8);
        let a = gen_synth(&spec).unwrap();
        assert_eq!(a, gen_synth(&spec).unwrap());
        assert_eq!(a.len(), 12);
        assert_eq!(&a.labels()[..4], &[0, 1, 2, 0]);
        let other = gen_synth(&SynthSpec::new(6, 4, 3, 8)).unwrap();
        assert_ne!(a, other);
        let empty = gen_synth(&SynthSpec::new(5, 0, 3, 8)).unwrap();
        assert!(empty.is_empty());
        assert!(gen_synth(&SynthSpec::new(5, 4, 1, 8)).is_err());
    }
}
