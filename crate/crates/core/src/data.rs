//! Seeded hierarchical synthetic images.
//!
//! Every superclass owns a random base pattern; its subclasses are the base
//! plus a small seeded perturbation, so classes sharing a superclass look
//! alike. Samples add Gaussian pixel noise, are clamped to `[0, 1]` and
//! quantized to multiples of 1/255 (the on-disk resolution).

use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Tensor;
use crate::{Error, Result};

const PROTOTYPE_STREAM: u64 = 0;
const TRAIN_STREAM: u64 = 1;
const TEST_STREAM: u64 = 2;
const PROBE_SHIFT_STREAM: u64 = 3;
const PROBE_SAMPLE_STREAM: u64 = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub num_superclasses: usize,
    pub subclasses_per_superclass: usize,
    /// Images are `image_side × image_side` grayscale.
    pub image_side: usize,
    /// Scale of the per-subclass perturbation of the superclass base.
    pub within_super_shift: f64,
    pub noise_sigma: f64,
    pub train_count: usize,
    pub test_count: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_superclasses: 4,
            subclasses_per_superclass: 2,
            image_side: 16,
            within_super_shift: 0.03,
            noise_sigma: 0.08,
            train_count: 2000,
            test_count: 500,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn num_classes(&self) -> usize {
        self.num_superclasses * self.subclasses_per_superclass
    }

    pub fn pixels(&self) -> usize {
        self.image_side * self.image_side
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_superclasses == 0
            || self.subclasses_per_superclass == 0
            || self.image_side == 0
            || self.train_count == 0
            || self.test_count == 0
        {
            return Err(Error::InvalidSpec(format!(
                "counts must be at least 1: {self:?}"
            )));
        }
        if self.num_classes() > usize::from(u16::MAX) {
            return Err(Error::InvalidSpec(format!(
                "too many classes: {}",
                self.num_classes()
            )));
        }
        if self.noise_sigma < 0.0 || !self.noise_sigma.is_finite() {
            return Err(Error::InvalidSpec(format!(
                "noise_sigma must be >= 0, got {}",
                self.noise_sigma
            )));
        }
        if self.within_super_shift < 0.0 || !self.within_super_shift.is_finite() {
            return Err(Error::InvalidSpec(format!(
                "within_super_shift must be >= 0, got {}",
                self.within_super_shift
            )));
        }
        Ok(())
    }

    /// Superclass of every class: class `c` belongs to `c / subclasses`.
    pub fn superclass_map(&self) -> Vec<usize> {
        (0..self.num_classes())
            .map(|c| c / self.subclasses_per_superclass)
            .collect()
    }
}

/// Labelled images with their class hierarchy. Immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    image_side: usize,
    num_superclasses: usize,
    superclass_of: Vec<usize>,
    labels: Vec<usize>,
    pixels: Vec<f64>,
}

impl Dataset {
    pub fn new(
        image_side: usize,
        num_superclasses: usize,
        superclass_of: Vec<usize>,
        labels: Vec<usize>,
        pixels: Vec<f64>,
    ) -> Result<Self> {
        let per_image = image_side * image_side;
        if image_side == 0 || pixels.len() != labels.len() * per_image {
            return Err(Error::InvalidSpec(format!(
                "{} pixels for {} images of side {image_side}",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(&s) = superclass_of.iter().find(|&&s| s >= num_superclasses) {
            return Err(Error::InvalidSpec(format!(
                "superclass {s} out of range {num_superclasses}"
            )));
        }
        if let Some(&label) = labels.iter().find(|&&y| y >= superclass_of.len()) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: superclass_of.len(),
            });
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidSpec("pixels must lie in [0, 1]".into()));
        }
        Ok(Self {
            image_side,
            num_superclasses,
            superclass_of,
            labels,
            pixels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_side(&self) -> usize {
        self.image_side
    }

    pub fn pixels_per_image(&self) -> usize {
        self.image_side * self.image_side
    }

    pub fn num_classes(&self) -> usize {
        self.superclass_of.len()
    }

    pub fn num_superclasses(&self) -> usize {
        self.num_superclasses
    }

    pub fn superclass_of(&self) -> &[usize] {
        &self.superclass_of
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let p = self.pixels_per_image();
        &self.pixels[i * p..(i + 1) * p]
    }

    /// Images `indices` as a `len × pixels` matrix plus their labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        if indices.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut data = Vec::with_capacity(indices.len() * self.pixels_per_image());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        Ok((
            Tensor::matrix(indices.len(), self.pixels_per_image(), data)?,
            labels,
        ))
    }

    /// Consecutive batches of at most `size` samples, in index order.
    pub fn chunks(&self, size: usize) -> impl Iterator<Item = Vec<usize>> + '_ {
        let size = size.max(1);
        (0..self.len())
            .step_by(size)
            .map(move |start| (start..(start + size).min(self.len())).collect())
    }
}

/// Rounds to the nearest multiple of 1/255.
pub fn quantize(v: f64) -> f64 {
    libm::round(v.clamp(0.0, 1.0) * 255.0) / 255.0
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Class prototypes, one row per class, pixels in `[0, 1]`.
pub fn class_prototypes(spec: &SyntheticSpec) -> Result<Tensor> {
    spec.validate()?;
    let mut rng = rng(spec.seed, PROTOTYPE_STREAM);
    let pixels = spec.pixels();
    let mut data = Vec::with_capacity(spec.num_classes() * pixels);
    for _ in 0..spec.num_superclasses {
        let base: Vec<f64> = (0..pixels).map(|_| rng.random::<f64>()).collect();
        for _ in 0..spec.subclasses_per_superclass {
            data.extend(base.iter().map(|&b| {
                let delta: f64 = StandardNormal.sample(&mut rng);
                (b + spec.within_super_shift * delta).clamp(0.0, 1.0)
            }));
        }
    }
    Tensor::matrix(spec.num_classes(), pixels, data)
}

fn sample_split(
    spec: &SyntheticSpec,
    prototypes: &Tensor,
    count: usize,
    mut rng: ChaCha8Rng,
) -> Result<Dataset> {
    let classes = spec.num_classes();
    let labels: Vec<usize> = (0..count).map(|i| i % classes).collect();
    let mut pixels = Vec::with_capacity(count * spec.pixels());
    for &y in &labels {
        pixels.extend(prototypes.row(y).iter().map(|&p| {
            let noise: f64 = StandardNormal.sample(&mut rng);
            quantize(p + spec.noise_sigma * noise)
        }));
    }
    Dataset::new(
        spec.image_side,
        spec.num_superclasses,
        spec.superclass_map(),
        labels,
        pixels,
    )
}

/// Train and test splits drawn from disjoint random streams.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(Dataset, Dataset)> {
    let prototypes = class_prototypes(spec)?;
    let train = sample_split(
        spec,
        &prototypes,
        spec.train_count,
        rng(spec.seed, TRAIN_STREAM),
    )?;
    let test = sample_split(
        spec,
        &prototypes,
        spec.test_count,
        rng(spec.seed, TEST_STREAM),
    )?;
    Ok((train, test))
}

/// A distribution-shifted test set: the same classes with every prototype
/// moved by `shift · N(0, 1)` per pixel, drawn from `probe_seed`.
pub fn generate_shifted_probe(
    spec: &SyntheticSpec,
    probe_seed: u64,
    shift: f64,
) -> Result<Dataset> {
    if shift < 0.0 || !shift.is_finite() {
        return Err(Error::InvalidSpec(format!(
            "probe shift must be >= 0, got {shift}"
        )));
    }
    let prototypes = class_prototypes(spec)?;
    let mut shift_rng = rng(probe_seed, PROBE_SHIFT_STREAM);
    let moved: Vec<f64> = prototypes
        .data()
        .iter()
        .map(|&p| {
            let delta: f64 = StandardNormal.sample(&mut shift_rng);
            (p + shift * delta).clamp(0.0, 1.0)
        })
        .collect();
    let moved = Tensor::new(prototypes.shape().to_vec(), moved)?;
    sample_split(
        spec,
        &moved,
        spec.test_count,
        rng(probe_seed, PROBE_SAMPLE_STREAM),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            image_side: 4,
            train_count: 37,
            test_count: 11,
            seed: 9,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn deterministic_and_in_range() {
        let (a, b) = generate_synthetic(&small()).unwrap();
        let (c, d) = generate_synthetic(&small()).unwrap();
        assert_eq!(a, c);
        assert_eq!(b, d);
        assert!(a.pixels().iter().all(|p| (0.0..=1.0).contains(p)));
        assert!(a.pixels().iter().all(|&p| quantize(p) == p));
        assert_ne!(a.image(0), b.image(0));
    }

    #[test]
    fn balanced_labels_with_total_superclass_map() {
        let (train, _) = generate_synthetic(&small()).unwrap();
        let mut counts = alloc::vec![0usize; train.num_classes()];
        for &y in train.labels() {
            counts[y] += 1;
            assert!(y < train.superclass_of().len());
        }
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(hi - lo <= 1);
        assert_eq!(train.superclass_of(), &[0, 0, 1, 1, 2, 2, 3, 3]);
    }

    #[test]
    fn invalid_specs() {
        for spec in [
            SyntheticSpec {
                num_superclasses: 0,
                ..small()
            },
            SyntheticSpec {
                train_count: 0,
                ..small()
            },
            SyntheticSpec {
                noise_sigma: -0.1,
                ..small()
            },
            SyntheticSpec {
                within_super_shift: f64::NAN,
                ..small()
            },
        ] {
            assert!(matches!(
                generate_synthetic(&spec),
                Err(Error::InvalidSpec(_))
            ));
        }
    }

    #[test]
    fn probe_differs_but_keeps_classes() {
        let probe = generate_shifted_probe(&small(), 77, 0.1).unwrap();
        let (_, test) = generate_synthetic(&small()).unwrap();
        assert_eq!(probe.labels(), test.labels());
        assert_ne!(probe.pixels(), test.pixels());
        assert_eq!(probe, generate_shifted_probe(&small(), 77, 0.1).unwrap());
    }

    #[test]
    fn empty_batch_is_an_error() {
        let (train, _) = generate_synthetic(&small()).unwrap();
        assert_eq!(train.batch(&[]).unwrap_err(), Error::EmptyDataset);
        let sizes: Vec<usize> = train.chunks(10).map(|c| c.len()).collect();
        assert_eq!(sizes, [10, 10, 10, 7]);
    }
}
