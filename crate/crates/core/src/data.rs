//! Labelled image datasets: procedural textures and the CIFAR-100 binary format.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{contract_err, shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Images stored as `f32` NCHW in `[0, 1]` with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Vec<f32>,
    labels: Vec<usize>,
    channels: usize,
    height: usize,
    width: usize,
    num_classes: usize,
}

impl Dataset {
    pub fn new(
        images: Vec<f32>,
        labels: Vec<usize>,
        [channels, height, width]: [usize; 3],
        num_classes: usize,
    ) -> Result<Self> {
        let per = channels * height * width;
        if per == 0 || images.len() != labels.len() * per {
            return Err(shape_err!("{} labels need {} pixels, got {}", labels.len(), labels.len() * per, images.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Data(format!("label {bad} outside 0..{num_classes}")));
        }
        Ok(Self { images, labels, channels, height, width, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn pixels(&self) -> &[f32] {
        &self.images
    }

    fn per_image(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let p = self.per_image();
        &self.images[i * p..(i + 1) * p]
    }

    /// Samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut images = Vec::with_capacity(indices.len() * self.per_image());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Dataset {
            images,
            labels,
            channels: self.channels,
            height: self.height,
            width: self.width,
            num_classes: self.num_classes,
        }
    }

    /// Concatenation of `parts`; all must share image shape and class count.
    pub fn concat(parts: &[&Dataset]) -> Result<Dataset> {
        let first = parts.first().ok_or_else(|| contract_err!("cannot concatenate zero datasets"))?;
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for p in parts {
            if p.image_shape() != first.image_shape() || p.num_classes != first.num_classes {
                return Err(shape_err!("datasets with different shapes cannot be joined"));
            }
            images.extend_from_slice(&p.images);
            labels.extend_from_slice(&p.labels);
        }
        Dataset::new(images, labels, first.image_shape(), first.num_classes)
    }

    /// Images at `indices` as an NCHW tensor.
    pub fn batch<S: Scalar>(&self, indices: &[usize]) -> Result<Tensor<S>> {
        let mut data = Vec::with_capacity(indices.len() * self.per_image());
        for &i in indices {
            data.extend(self.image(i).iter().map(|&v| S::lit(v as f64)));
        }
        Tensor::from_vec(&[indices.len(), self.channels, self.height, self.width], data)
    }

    pub fn images_tensor<S: Scalar>(&self) -> Result<Tensor<S>> {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }

    /// Distinct labels in ascending order.
    pub fn classes(&self) -> Vec<usize> {
        let mut seen = vec![false; self.num_classes];
        self.labels.iter().for_each(|&l| seen[l] = true);
        (0..self.num_classes).filter(|&c| seen[c]).collect()
    }
}

/// Parameters of the procedural texture generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub eval_per_class: usize,
    pub image_size: usize,
    pub seed: u64,
    #[serde(default = "default_noise")]
    pub noise: f64,
}

fn default_noise() -> f64 {
    0.05
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self { num_classes: 10, train_per_class: 100, eval_per_class: 50, image_size: 32, seed: 0, noise: 0.05 }
    }
}

/// Train and eval splits drawn from the same distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub eval: Dataset,
}

struct ClassStyle {
    angle: f64,
    freq: f64,
}

fn class_styles(n: usize) -> Vec<ClassStyle> {
    // Orientation in [0°, 90°] so a horizontal flip never maps one class onto
    // another; two spatial frequencies double the number of distinct classes.
    let n_orient = n.div_ceil(2).max(1);
    (0..n)
        .map(|k| {
            let o = k % n_orient;
            let angle = if n_orient == 1 { 0.0 } else { 0.5 * PI * o as f64 / (n_orient - 1) as f64 };
            let freq = if k / n_orient == 0 { 3.0 } else { 6.0 };
            ClassStyle { angle, freq }
        })
        .collect()
}

fn render(style: &ClassStyle, size: usize, noise: f64, rng: &mut ChaCha8Rng, out: &mut Vec<f32>) {
    let jitter = rng.gen_range(-0.2..0.2);
    let phase = rng.gen_range(0.0..2.0 * PI);
    let amp = rng.gen_range(0.1..0.4);
    // colour carries no class information
    let tint: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.35..0.65));
    let (s, c) = (style.angle + jitter).sin_cos();
    let k = 2.0 * PI * style.freq / size as f64;
    let gauss = Normal::new(0.0, noise.max(1e-12)).expect("valid std");
    for tint in tint {
        for y in 0..size {
            for x in 0..size {
                let u = c * x as f64 + s * y as f64;
                let v = tint + amp * (k * u + phase).sin() + if noise > 0.0 { gauss.sample(rng) } else { 0.0 };
                out.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }
}

/// Oriented sinusoidal textures, one orientation/frequency pair per class,
/// with random phase, amplitude, colour, small orientation jitter and pixel
/// noise.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Splits> {
    if spec.num_classes < 2 || spec.train_per_class == 0 || spec.eval_per_class == 0 || spec.image_size < 16 {
        return Err(contract_err!("synthetic data needs >= 2 classes, non-empty splits and images >= 16 px"));
    }
    let styles = class_styles(spec.num_classes);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut make = |per_class: usize| {
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for i in 0..per_class * spec.num_classes {
            let label = i % spec.num_classes;
            render(&styles[label], spec.image_size, spec.noise, &mut rng, &mut images);
            labels.push(label);
        }
        Dataset::new(images, labels, [3, spec.image_size, spec.image_size], spec.num_classes)
    };
    let train = make(spec.train_per_class)?;
    let eval = make(spec.eval_per_class)?;
    Ok(Splits { train, eval })
}

const CIFAR_RECORD: usize = 2 + 3 * 32 * 32;

/// Parses a CIFAR-100 binary file: per record one coarse label byte, one fine
/// label byte and 3072 channel-major pixel bytes. Fine labels are used.
pub fn parse_cifar100(bytes: &[u8]) -> Result<Dataset> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Format(format!(
            "CIFAR-100 file has {} bytes, not a positive multiple of the {CIFAR_RECORD}-byte record",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut images = Vec::with_capacity(n * (CIFAR_RECORD - 2));
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks(CIFAR_RECORD) {
        labels.push(rec[1] as usize);
        images.extend(rec[2..].iter().map(|&b| b as f32 / 255.0));
    }
    Dataset::new(images, labels, [3, 32, 32], 100)
}

pub fn load_cifar100_binary(path: &Path) -> Result<Dataset> {
    parse_cifar100(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec { num_classes: 4, train_per_class: 3, eval_per_class: 2, image_size: 16, seed: 9, noise: 0.05 }
    }

    #[test]
    fn synthetic_shapes_and_balance() {
        let s = gen_synthetic(&small()).unwrap();
        assert_eq!(s.train.len(), 12);
        assert_eq!(s.eval.len(), 8);
        assert_eq!(s.train.image_shape(), [3, 16, 16]);
        for c in 0..4 {
            assert_eq!(s.train.labels().iter().filter(|&&l| l == c).count(), 3);
        }
        assert!(s.train.pixels().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn synthetic_is_seed_deterministic() {
        assert_eq!(gen_synthetic(&small()).unwrap(), gen_synthetic(&small()).unwrap());
        let other = SyntheticSpec { seed: 10, ..small() };
        assert_ne!(gen_synthetic(&small()).unwrap(), gen_synthetic(&other).unwrap());
    }

    #[test]
    fn class_styles_are_distinct() {
        let st = class_styles(10);
        for i in 0..10 {
            for j in i + 1..10 {
                assert!(st[i].angle != st[j].angle || st[i].freq != st[j].freq);
            }
        }
    }

    #[test]
    fn subset_and_concat() {
        let s = gen_synthetic(&small()).unwrap();
        let a = s.train.subset(&[0, 5]);
        assert_eq!(a.labels(), &[0, 1]);
        assert_eq!(a.image(1), s.train.image(5));
        let b = Dataset::concat(&[&a, &s.eval]).unwrap();
        assert_eq!(b.len(), 10);
        assert_eq!(b.classes(), vec![0, 1, 2, 3]);
        let t: Tensor<f64> = a.images_tensor().unwrap();
        assert_eq!(t.shape(), &[2, 3, 16, 16]);
    }

    #[test]
    fn cifar_record_parsing() {
        let mut bytes = vec![0u8; 2 * CIFAR_RECORD];
        bytes[1] = 42;
        bytes[2] = 255;
        bytes[CIFAR_RECORD + 1] = 7;
        let d = parse_cifar100(&bytes).unwrap();
        assert_eq!(d.labels(), &[42, 7]);
        assert_eq!(d.image(0)[0], 1.0);
        let err = parse_cifar100(&bytes[..CIFAR_RECORD + 5]).unwrap_err();
        assert!(matches!(&err, Error::Format(m) if m.contains("3079 bytes") && m.contains("3074")), "{err}");
    }

    #[test]
    fn bad_labels_are_rejected() {
        assert!(matches!(Dataset::new(vec![0.0; 3], vec![5], [3, 1, 1], 2), Err(Error::Data(_))));
    }
}
