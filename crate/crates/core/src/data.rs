//! Synthetic identity data: unit anchors on the input sphere, clean and
//! corrupted noisy images around them, and the sampler that pairs each
//! identity image with `k` class images of the same label.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dcc::Label;
use crate::encoder::FeatureExtractor;
use crate::error::{Error, Result};
use crate::numerics::{axpy, l2_normalize, Mat};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticDatasetSpec {
    pub identities: usize,
    pub input_dim: usize,
    /// Per-coordinate noise std of clean images.
    pub noise_sigma: f64,
    /// Per-coordinate noise std of low-quality images.
    pub corrupt_sigma: f64,
    pub corrupt_prob: f64,
    pub images_per_identity: usize,
    /// Trailing images of each identity kept out of training.
    pub holdout_per_identity: usize,
    pub seed: u64,
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        Self {
            identities: 500,
            input_dim: 64,
            noise_sigma: 0.05,
            corrupt_sigma: 1.0,
            corrupt_prob: 0.1,
            images_per_identity: 8,
            holdout_per_identity: 2,
            seed: 0,
        }
    }
}

impl SyntheticDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: String| {
            Err(Error::Config {
                field: format!("dataset.{field}"),
                message,
            })
        };
        if self.identities < 2 {
            return bad("identities", format!("need at least 2, got {}", self.identities));
        }
        if self.input_dim == 0 {
            return bad("input_dim", "must be >= 1".into());
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return bad("noise_sigma", format!("must be finite and >= 0, got {}", self.noise_sigma));
        }
        if !(self.corrupt_sigma >= self.noise_sigma) || !self.corrupt_sigma.is_finite() {
            return bad(
                "corrupt_sigma",
                format!("must be finite and >= noise_sigma, got {}", self.corrupt_sigma),
            );
        }
        if !(0.0..=1.0).contains(&self.corrupt_prob) {
            return bad("corrupt_prob", format!("must lie in [0, 1], got {}", self.corrupt_prob));
        }
        if self.holdout_per_identity >= self.images_per_identity {
            return bad(
                "holdout_per_identity",
                format!(
                    "must be below images_per_identity ({}), got {}",
                    self.images_per_identity, self.holdout_per_identity
                ),
            );
        }
        Ok(())
    }

    pub fn train_images_per_identity(&self) -> usize {
        self.images_per_identity - self.holdout_per_identity
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub pixels: Vec<f64>,
    pub corrupted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityRecord {
    pub label: Label,
    pub anchor: Vec<f64>,
    pub images: Vec<Image>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub spec: SyntheticDatasetSpec,
    pub identities: Vec<IdentityRecord>,
}

fn random_unit<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        if let Ok(u) = l2_normalize(&v) {
            return u;
        }
    }
}

fn noisy<R: Rng + ?Sized>(rng: &mut R, anchor: &[f64], sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return anchor.to_vec();
    }
    let dist = Normal::new(0.0, sigma).expect("finite sigma");
    loop {
        let v: Vec<f64> = anchor.iter().map(|a| a + dist.sample(rng)).collect();
        if let Ok(u) = l2_normalize(&v) {
            return u;
        }
    }
}

/// Draws every anchor and image from a ChaCha stream seeded by `spec.seed`.
pub fn make_dataset(spec: &SyntheticDatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let identities = (0..spec.identities)
        .map(|label| {
            let anchor = random_unit(&mut rng, spec.input_dim);
            let images = (0..spec.images_per_identity)
                .map(|_| {
                    let corrupted = spec.corrupt_prob > 0.0 && rng.random_bool(spec.corrupt_prob);
                    let sigma = if corrupted { spec.corrupt_sigma } else { spec.noise_sigma };
                    Image {
                        pixels: noisy(&mut rng, &anchor, sigma),
                        corrupted,
                    }
                })
                .collect();
            IdentityRecord { label, anchor, images }
        })
        .collect();
    Ok(Dataset {
        spec: spec.clone(),
        identities,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.identities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn train_images(&self, label: Label) -> &[Image] {
        let imgs = &self.identities[label].images;
        &imgs[..imgs.len() - self.spec.holdout_per_identity]
    }

    pub fn holdout_images(&self, label: Label) -> &[Image] {
        let imgs = &self.identities[label].images;
        &imgs[imgs.len() - self.spec.holdout_per_identity..]
    }

    pub fn train_image_count(&self) -> usize {
        self.len() * self.spec.train_images_per_identity()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SamplerMode {
    /// Every batch slot draws its identity uniformly and independently.
    Uniform,
    /// The first `duplicates` slots of each batch share one label.
    ConflictStress { duplicates: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledBatch {
    /// `B × input_dim`
    pub identity_images: Mat,
    /// `(B·k) × input_dim`; rows `b·k .. (b+1)·k` belong to sample `b`.
    pub class_images: Mat,
    pub labels: Vec<Label>,
    pub identity_corrupted: Vec<bool>,
    /// `B·k` flags aligned with `class_images`.
    pub class_corrupted: Vec<bool>,
    /// Index into the identity's training images, per sample.
    pub identity_index: Vec<usize>,
    /// `B·k` indices into the identity's training images.
    pub class_index: Vec<usize>,
    pub k: usize,
}

impl SampledBatch {
    pub fn batch_size(&self) -> usize {
        self.labels.len()
    }

    pub fn class_rows(&self, sample: usize) -> impl Iterator<Item = &[f64]> {
        (sample * self.k..(sample + 1) * self.k).map(move |r| self.class_images.row(r))
    }
}

/// Owns the sampling RNG so its state can be checkpointed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSampler {
    pub mode: SamplerMode,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(mode: SamplerMode, seed: u64) -> Self {
        Self {
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn sample(&mut self, dataset: &Dataset, batch: usize, k: usize) -> Result<SampledBatch> {
        sample_batch(dataset, batch, k, self.mode, &mut self.rng)
    }

    /// Draws images for the given labels instead of sampling labels.
    pub fn sample_for_labels(&mut self, dataset: &Dataset, labels: &[Label], k: usize) -> Result<SampledBatch> {
        check_k(dataset, k)?;
        if let Some(&bad) = labels.iter().find(|&&l| l >= dataset.len()) {
            return Err(Error::Index {
                index: bad,
                len: dataset.len(),
            });
        }
        Ok(draw_images(dataset, labels.to_vec(), k, &mut self.rng))
    }
}

fn check_k(dataset: &Dataset, k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Invalid("k must be >= 1".into()));
    }
    let train = dataset.spec.train_images_per_identity();
    if k + 1 > train {
        return Err(Error::Invalid(format!(
            "k + 1 = {} exceeds the {train} training images per identity",
            k + 1
        )));
    }
    Ok(())
}

pub fn sample_batch<R: Rng + ?Sized>(
    dataset: &Dataset,
    batch: usize,
    k: usize,
    mode: SamplerMode,
    rng: &mut R,
) -> Result<SampledBatch> {
    if batch == 0 {
        return Err(Error::Invalid("batch size must be >= 1".into()));
    }
    check_k(dataset, k)?;
    let mut labels = Vec::with_capacity(batch);
    match mode {
        SamplerMode::Uniform => {
            labels.extend((0..batch).map(|_| rng.random_range(0..dataset.len())));
        }
        SamplerMode::ConflictStress { duplicates } => {
            if duplicates > batch {
                return Err(Error::Invalid(format!(
                    "{duplicates} forced duplicates exceed batch size {batch}"
                )));
            }
            let shared = rng.random_range(0..dataset.len());
            labels.extend(std::iter::repeat_n(shared, duplicates));
            labels.extend((duplicates..batch).map(|_| rng.random_range(0..dataset.len())));
        }
    }
    Ok(draw_images(dataset, labels, k, rng))
}

fn draw_images<R: Rng + ?Sized>(dataset: &Dataset, labels: Vec<Label>, k: usize, rng: &mut R) -> SampledBatch {
    let batch = labels.len();
    let dim = dataset.input_dim();
    let train = dataset.spec.train_images_per_identity();
    let mut identity_images = Mat::zeros(batch, dim);
    let mut class_images = Mat::zeros(batch * k, dim);
    let mut identity_corrupted = Vec::with_capacity(batch);
    let mut class_corrupted = Vec::with_capacity(batch * k);
    let mut identity_index = Vec::with_capacity(batch);
    let mut class_index = Vec::with_capacity(batch * k);
    for (b, &label) in labels.iter().enumerate() {
        let images = dataset.train_images(label);
        let own = rng.random_range(0..train);
        identity_images.row_mut(b).copy_from_slice(&images[own].pixels);
        identity_corrupted.push(images[own].corrupted);
        identity_index.push(own);
        // k distinct picks among the other train - 1 images
        for (j, pick) in index::sample(rng, train - 1, k).into_iter().enumerate() {
            let idx = if pick >= own { pick + 1 } else { pick };
            class_images.row_mut(b * k + j).copy_from_slice(&images[idx].pixels);
            class_corrupted.push(images[idx].corrupted);
            class_index.push(idx);
        }
    }
    SampledBatch {
        identity_images,
        class_images,
        labels,
        identity_corrupted,
        class_corrupted,
        identity_index,
        class_index,
        k,
    }
}

/// Per identity, the normalized mean feature of its clean images (all of
/// them, training and held-out).
pub fn empirical_tcc<E: FeatureExtractor + ?Sized>(dataset: &Dataset, encoder: &E) -> Result<Mat> {
    let rows: Vec<Vec<f64>> = dataset
        .identities
        .par_iter()
        .map(|id| {
            let mut sum: Option<Vec<f64>> = None;
            for img in id.images.iter().filter(|i| !i.corrupted) {
                let f = encoder.extract(&img.pixels)?;
                match &mut sum {
                    Some(s) => axpy(1.0, &f, s),
                    None => sum = Some(f),
                }
            }
            let sum = sum.ok_or_else(|| {
                Error::Invalid(format!("identity {} has no clean images", id.label))
            })?;
            l2_normalize(&sum)
        })
        .collect::<Result<_>>()?;
    Mat::from_rows(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EncoderParams, NormalizedInput};
    use crate::numerics::norm;
    use approx::assert_abs_diff_eq;

    fn small_spec() -> SyntheticDatasetSpec {
        SyntheticDatasetSpec {
            identities: 20,
            input_dim: 8,
            images_per_identity: 6,
            holdout_per_identity: 1,
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn dataset_is_deterministic() {
        let a = make_dataset(&small_spec()).unwrap();
        let b = make_dataset(&small_spec()).unwrap();
        assert_eq!(a, b);
        let c = make_dataset(&SyntheticDatasetSpec { seed: 4, ..small_spec() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn noiseless_images_equal_anchor() {
        let spec = SyntheticDatasetSpec {
            noise_sigma: 0.0,
            corrupt_prob: 0.0,
            ..small_spec()
        };
        let ds = make_dataset(&spec).unwrap();
        for id in &ds.identities {
            assert_abs_diff_eq!(norm(&id.anchor), 1.0, epsilon = 1e-12);
            for img in &id.images {
                assert_eq!(img.pixels, id.anchor);
                assert!(!img.corrupted);
            }
        }
    }

    #[test]
    fn validation() {
        assert!(SyntheticDatasetSpec { identities: 1, ..small_spec() }.validate().is_err());
        assert!(SyntheticDatasetSpec { corrupt_sigma: 0.01, ..small_spec() }.validate().is_err());
        assert!(SyntheticDatasetSpec { corrupt_prob: 1.5, ..small_spec() }.validate().is_err());
        assert!(SyntheticDatasetSpec { holdout_per_identity: 6, ..small_spec() }.validate().is_err());
    }

    #[test]
    fn batch_shapes_and_exclusion() {
        let ds = make_dataset(&small_spec()).unwrap();
        let mut sampler = BatchSampler::new(SamplerMode::Uniform, 9);
        for _ in 0..50 {
            let b = sampler.sample(&ds, 7, 2).unwrap();
            assert_eq!(b.identity_images.rows(), 7);
            assert_eq!(b.class_images.rows(), 14);
            assert_eq!(b.class_images.cols(), 8);
            for s in 0..7 {
                let own = b.identity_index[s];
                let picks = &b.class_index[s * 2..s * 2 + 2];
                assert!(!picks.contains(&own));
                assert_ne!(picks[0], picks[1]);
                for (row, &idx) in b.class_rows(s).zip(picks) {
                    assert_eq!(row, ds.train_images(b.labels[s])[idx].pixels.as_slice());
                }
            }
        }
        assert!(sampler.sample(&ds, 4, 5).is_err());
    }

    #[test]
    fn conflict_stress_forces_duplicates() {
        let ds = make_dataset(&small_spec()).unwrap();
        let mut sampler = BatchSampler::new(SamplerMode::ConflictStress { duplicates: 3 }, 1);
        let b = sampler.sample(&ds, 5, 2).unwrap();
        assert_eq!(b.labels[0], b.labels[1]);
        assert_eq!(b.labels[1], b.labels[2]);
        let mut bad = BatchSampler::new(SamplerMode::ConflictStress { duplicates: 6 }, 1);
        assert!(bad.sample(&ds, 5, 2).is_err());
    }

    #[test]
    fn sampling_is_uniform_over_identities() {
        let spec = SyntheticDatasetSpec {
            identities: 100,
            input_dim: 2,
            images_per_identity: 4,
            holdout_per_identity: 1,
            ..Default::default()
        };
        let ds = make_dataset(&spec).unwrap();
        let mut sampler = BatchSampler::new(SamplerMode::Uniform, 5);
        let mut counts = vec![0usize; 100];
        for _ in 0..1000 {
            for l in sampler.sample(&ds, 100, 1).unwrap().labels {
                counts[l] += 1;
            }
        }
        let n = 100_000.0f64;
        let p = 0.01;
        let sigma = (n * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - n * p).abs() <= 3.0 * sigma + 1.0, "count {c}");
        }
    }

    #[test]
    fn tcc_of_noiseless_data_is_anchor() {
        let spec = SyntheticDatasetSpec {
            noise_sigma: 0.0,
            corrupt_prob: 0.0,
            ..small_spec()
        };
        let ds = make_dataset(&spec).unwrap();
        let tcc = empirical_tcc(&ds, &EncoderParams::identity(8)).unwrap();
        for (row, id) in tcc.iter_rows().zip(&ds.identities) {
            for (a, b) in row.iter().zip(&id.anchor) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-12);
            }
        }
        let again = empirical_tcc(&ds, &EncoderParams::identity(8)).unwrap();
        assert_eq!(tcc, again);
    }

    #[test]
    fn tcc_rows_are_unit_and_require_clean_images() {
        let ds = make_dataset(&small_spec()).unwrap();
        let tcc = empirical_tcc(&ds, &NormalizedInput).unwrap();
        for row in tcc.iter_rows() {
            assert_abs_diff_eq!(norm(row), 1.0, epsilon = 1e-12);
        }
        let all_bad = make_dataset(&SyntheticDatasetSpec { corrupt_prob: 1.0, ..small_spec() }).unwrap();
        assert!(empirical_tcc(&all_bad, &NormalizedInput).is_err());
    }
}
