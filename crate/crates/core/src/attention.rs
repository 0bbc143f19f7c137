//! Attention loader: builds a generative class center (GCC) for one identity
//! from its `k` class features.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{axpy, cosine_similarity, l2_normalize, norm, softmax, Mat};
use crate::similarity::check_unit;

/// How a GCC is formed from the class features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GccStrategy {
    /// Softmax over cosine similarity to the identity feature.
    Attention,
    /// Uniform weights `1/k`.
    Constant,
    /// The first class feature alone.
    Single,
}

impl GccStrategy {
    pub const ALL: [GccStrategy; 3] = [Self::Single, Self::Constant, Self::Attention];

    pub fn name(self) -> &'static str {
        match self {
            Self::Attention => "attention",
            Self::Constant => "constant",
            Self::Single => "single",
        }
    }
}

impl std::fmt::Display for GccStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// `k` unit-norm class features, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassFeatureSet {
    features: Mat,
}

impl ClassFeatureSet {
    pub fn new(features: Mat) -> Result<Self> {
        if features.rows() == 0 || features.cols() == 0 {
            return Err(Error::Empty);
        }
        for row in features.iter_rows() {
            check_unit(row)?;
        }
        Ok(Self { features })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(Mat::from_rows(rows)?)
    }

    pub fn k(&self) -> usize {
        self.features.rows()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Mat {
        &self.features
    }
}

/// Nonnegative weights over the class features that sum to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights(Vec<f64>);

impl AttentionWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Empty);
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Invalid("attention weights must be finite and nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Invalid(format!("attention weights sum to {total}, not 1")));
        }
        Ok(Self(weights))
    }

    pub fn uniform(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Empty);
        }
        Ok(Self(vec![1.0 / k as f64; k]))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Softmax over `cos(f, K_i)`.
pub fn attention_weights(feature: &[f64], class: &ClassFeatureSet) -> Result<AttentionWeights> {
    attention_weights_with_temperature(feature, class, 1.0)
}

/// Softmax over `cos(f, K_i) / temperature`.
pub fn attention_weights_with_temperature(
    feature: &[f64],
    class: &ClassFeatureSet,
    temperature: f64,
) -> Result<AttentionWeights> {
    if !(temperature > 0.0) {
        return Err(Error::Invalid(format!("temperature must be > 0, got {temperature}")));
    }
    let sims = class
        .features
        .iter_rows()
        .map(|k| cosine_similarity(feature, k).map(|c| c / temperature))
        .collect::<Result<Vec<_>>>()?;
    Ok(AttentionWeights(softmax(&sims)?))
}

/// `normalize(Σ α_i K_i)`.
pub fn generate_gcc(class: &ClassFeatureSet, weights: &AttentionWeights) -> Result<Vec<f64>> {
    if weights.0.len() != class.k() {
        return Err(Error::shape(class.k(), weights.0.len()));
    }
    let mut sum = vec![0.0; class.dim()];
    for (row, &a) in class.features.iter_rows().zip(&weights.0) {
        axpy(a, row, &mut sum);
    }
    // exactly antipodal features cancel
    if norm(&sum) <= 1e-12 {
        return Err(Error::DegenerateGcc);
    }
    l2_normalize(&sum)
}

pub fn constant_weight_gcc(class: &ClassFeatureSet) -> Result<Vec<f64>> {
    generate_gcc(class, &AttentionWeights::uniform(class.k())?)
}

pub fn single_image_gcc(class: &ClassFeatureSet) -> Vec<f64> {
    class.features.row(0).to_vec()
}

/// Dispatches on `strategy`. `feature` is only read by [`GccStrategy::Attention`].
pub fn build_gcc(
    strategy: GccStrategy,
    feature: &[f64],
    class: &ClassFeatureSet,
    temperature: f64,
) -> Result<Vec<f64>> {
    match strategy {
        GccStrategy::Attention => {
            let alpha = attention_weights_with_temperature(feature, class, temperature)?;
            generate_gcc(class, &alpha)
        }
        GccStrategy::Constant => constant_weight_gcc(class),
        GccStrategy::Single => Ok(single_image_gcc(class)),
    }
}
