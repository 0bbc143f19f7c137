//! Logits between a feature and a bank of class centers.
//!
//! Two similarity functions are supported: the plain inner product and the
//! additive angular margin form `s·cos(θ + m)` on the positive center,
//! `s·cos θ` everywhere else.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, norm, Mat};

/// Tolerance on `‖v‖ − 1` when unit inputs are required.
pub const UNIT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityMode {
    Plain,
    Arcface,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MarginConfig {
    pub scale: f64,
    /// Additive angular margin in radians.
    pub margin: f64,
    pub mode: SimilarityMode,
}

impl Default for MarginConfig {
    fn default() -> Self {
        Self {
            scale: 64.0,
            margin: 0.5,
            mode: SimilarityMode::Arcface,
        }
    }
}

impl MarginConfig {
    pub fn plain() -> Self {
        Self {
            mode: SimilarityMode::Plain,
            ..Self::default()
        }
    }

    pub fn arcface(scale: f64, margin: f64) -> Self {
        Self {
            scale,
            margin,
            mode: SimilarityMode::Arcface,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(Error::Invalid(format!("scale must be > 0, got {}", self.scale)));
        }
        if !(0.0..FRAC_PI_2).contains(&self.margin) {
            return Err(Error::Invalid(format!(
                "margin must lie in [0, pi/2), got {}",
                self.margin
            )));
        }
        Ok(())
    }

    /// Logit for a single center given the raw inner product `c = w·f`.
    pub fn logit(&self, c: f64, is_positive: bool) -> f64 {
        match self.mode {
            SimilarityMode::Plain => c,
            SimilarityMode::Arcface => {
                let c = c.clamp(-1.0, 1.0);
                if is_positive {
                    let theta = (c.acos() + self.margin).min(PI);
                    self.scale * theta.cos()
                } else {
                    self.scale * c
                }
            }
        }
    }

    /// Derivative of [`MarginConfig::logit`] w.r.t. the inner product `c`.
    ///
    /// On the positive center this is `s·sin(θ + m) / sin θ`, and 0 once
    /// `θ + m` is clamped at π.
    pub fn logit_slope(&self, c: f64, is_positive: bool) -> f64 {
        match self.mode {
            SimilarityMode::Plain => 1.0,
            SimilarityMode::Arcface => {
                if !is_positive || self.margin == 0.0 {
                    return self.scale;
                }
                let theta = c.clamp(-1.0, 1.0).acos();
                if theta + self.margin >= PI {
                    return 0.0;
                }
                let sin_theta = theta.sin().max(1e-12);
                self.scale * (theta + self.margin).sin() / sin_theta
            }
        }
    }
}

pub(crate) fn check_unit(v: &[f64]) -> Result<()> {
    let n = norm(v);
    if (n - 1.0).abs() > UNIT_TOLERANCE {
        return Err(Error::NotNormalized { norm: n });
    }
    Ok(())
}

/// Logits of `feature` against every row of `centers` (one center per row).
///
/// In arcface mode both the feature and all centers must be unit vectors.
pub fn logits(
    feature: &[f64],
    centers: &Mat,
    positive: Option<usize>,
    cfg: &MarginConfig,
) -> Result<Vec<f64>> {
    if feature.len() != centers.cols() {
        return Err(Error::shape(
            format!("feature of width {}", centers.cols()),
            feature.len(),
        ));
    }
    if let Some(p) = positive {
        if p >= centers.rows() {
            return Err(Error::Index {
                index: p,
                len: centers.rows(),
            });
        }
    }
    if cfg.mode == SimilarityMode::Arcface {
        check_unit(feature)?;
        for w in centers.iter_rows() {
            check_unit(w)?;
        }
    }
    Ok(centers
        .iter_rows()
        .enumerate()
        .map(|(j, w)| cfg.logit(dot(w, feature), Some(j) == positive))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::l2_normalize;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn unit_at_angle(theta: f64) -> Vec<f64> {
        vec![theta.cos(), theta.sin()]
    }

    #[test]
    fn arcface_positive_at_sixty_degrees() {
        let f = unit_at_angle(0.0);
        let centers = Mat::from_rows(&[unit_at_angle(PI / 3.0), unit_at_angle(PI / 3.0)]).unwrap();
        let z = logits(&f, &centers, Some(0), &MarginConfig::default()).unwrap();
        // direct trig: 64 cos(pi/3 + 0.5)
        assert_abs_diff_eq!(z[0], 64.0 * (PI / 3.0 + 0.5).cos(), epsilon = 1e-12);
        assert_abs_diff_eq!(z[0], 1.5106, epsilon = 1e-3);
        assert_abs_diff_eq!(z[1], 32.0, epsilon = 1e-12);
    }

    #[test]
    fn plain_self_similarity() {
        let f = l2_normalize(&[0.2, -0.4, 0.7]).unwrap();
        let centers = Mat::from_rows(&[f.clone(), vec![1.0, 0.0, 0.0]]).unwrap();
        let z = logits(&f, &centers, None, &MarginConfig::plain()).unwrap();
        assert_abs_diff_eq!(z[0], 1.0, epsilon = 1e-15);
        let g = [3.0, 4.0, 0.0];
        let z = logits(&g, &Mat::from_rows(&[g.to_vec()]).unwrap(), None, &MarginConfig::plain())
            .unwrap();
        assert_abs_diff_eq!(z[0], 25.0, epsilon = 1e-12);
    }

    #[test]
    fn errors() {
        let centers = Mat::from_rows(&[vec![2.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let f = [1.0, 0.0];
        assert!(matches!(
            logits(&f, &centers, Some(0), &MarginConfig::default()),
            Err(Error::NotNormalized { .. })
        ));
        assert!(matches!(
            logits(&f, &centers, Some(2), &MarginConfig::plain()),
            Err(Error::Index { .. })
        ));
        assert!(logits(&[1.0], &centers, None, &MarginConfig::plain()).is_err());
        assert!(MarginConfig::arcface(0.0, 0.5).validate().is_err());
        assert!(MarginConfig::arcface(64.0, FRAC_PI_2).validate().is_err());
        assert!(MarginConfig::default().validate().is_ok());
    }

    #[test]
    fn margin_clamped_at_pi() {
        let cfg = MarginConfig::default();
        assert_abs_diff_eq!(cfg.logit(-1.0, true), -64.0, epsilon = 1e-12);
        assert_abs_diff_eq!(cfg.logit((PI - 0.2).cos(), true), -64.0, epsilon = 1e-12);
        assert_eq!(cfg.logit_slope((PI - 0.2).cos(), true), 0.0);
    }

    #[test]
    fn slope_matches_finite_difference() {
        let cfg = MarginConfig::default();
        for &c in &[-0.7, -0.1, 0.0, 0.3, 0.85] {
            let h = 1e-6;
            let fd = (cfg.logit(c + h, true) - cfg.logit(c - h, true)) / (2.0 * h);
            assert_abs_diff_eq!(cfg.logit_slope(c, true), fd, epsilon = 1e-5 * fd.abs().max(1.0));
        }
    }

    proptest! {
        #[test]
        fn margin_is_a_penalty(theta in 0.0f64..(PI - 0.5)) {
            let cfg = MarginConfig::default();
            let c = theta.cos();
            prop_assert!(cfg.logit(c, true) <= cfg.scale * c + 1e-12);
        }

        #[test]
        fn zero_margin_is_scaled_plain(
            angles in prop::collection::vec(0.0f64..(2.0 * PI), 2..10),
            f_angle in 0.0f64..(2.0 * PI),
        ) {
            let f = unit_at_angle(f_angle);
            let rows: Vec<Vec<f64>> = angles.iter().map(|&a| unit_at_angle(a)).collect();
            let centers = Mat::from_rows(&rows).unwrap();
            let arc = logits(&f, &centers, Some(0), &MarginConfig::arcface(64.0, 0.0)).unwrap();
            let plain = logits(&f, &centers, Some(0), &MarginConfig::plain()).unwrap();
            for (a, p) in arc.iter().zip(&plain) {
                prop_assert!((a - 64.0 * p).abs() <= 1e-12);
            }
        }

        #[test]
        fn negative_ordering_agrees(
            angles in prop::collection::vec(0.0f64..(2.0 * PI), 3..10),
            f_angle in 0.0f64..(2.0 * PI),
        ) {
            let f = unit_at_angle(f_angle);
            let rows: Vec<Vec<f64>> = angles.iter().map(|&a| unit_at_angle(a)).collect();
            let centers = Mat::from_rows(&rows).unwrap();
            let arc = logits(&f, &centers, Some(0), &MarginConfig::default()).unwrap();
            let plain = logits(&f, &centers, Some(0), &MarginConfig::plain()).unwrap();
            for i in 1..arc.len() {
                for j in 1..arc.len() {
                    if plain[i] < plain[j] {
                        prop_assert!(arc[i] <= arc[j]);
                    }
                }
            }
        }
    }
}
