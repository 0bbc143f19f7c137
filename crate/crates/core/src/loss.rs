//! Softmax cross-entropy over a bank of class centers and its closed-form
//! gradients.
//!
//! The bank is any `S × D` matrix (one center per row): the DCC for AttFC,
//! the learned center matrix for the FC baseline. With inner-product logits
//! the gradients are
//!
//! ```text
//! ∂ℓ/∂f   = −(1 − p⁺) w⁺ + Σ_{j ∈ negatives} p⁻_j w⁻_j
//! ∂L/∂w_i = (1/B) [ −Σ_{x ∈ I⁺}(1 − p⁺_x) f_x + Σ_{y ∈ I⁻} p⁻_y f_y ]
//! ```
//!
//! where masked slots carry `p = 0` and so drop out of the negative sum. The
//! `*_margin` variants add the chain-rule factor of the angular margin logit.

use rayon::prelude::*;

use crate::dcc::masked_probabilities;
use crate::error::{Error, Result};
use crate::numerics::{axpy, dot, Mat};
use crate::similarity::{MarginConfig, SimilarityMode};

/// Floor applied to `p⁺` before the log.
pub const MIN_POSITIVE_PROB: f64 = 1e-300;

#[derive(Debug, Clone, PartialEq)]
pub struct BatchLossResult {
    /// `−(1/B) Σ log p⁺_i`
    pub loss: f64,
    /// `B × S`
    pub probabilities: Mat,
    pub positive_probs: Vec<f64>,
}

fn check_batch(features: &Mat, positive_slots: &[usize], conflicts: Option<&[Vec<usize>]>) -> Result<()> {
    let b = features.rows();
    if b == 0 {
        return Err(Error::Empty);
    }
    if positive_slots.len() != b {
        return Err(Error::shape(format!("{b} positive slots"), positive_slots.len()));
    }
    if let Some(c) = conflicts {
        if c.len() != b {
            return Err(Error::shape(format!("{b} conflict lists"), c.len()));
        }
    }
    Ok(())
}

/// Mean masked softmax loss of `features` (one per row) against `centers`.
pub fn batch_loss(
    features: &Mat,
    centers: &Mat,
    positive_slots: &[usize],
    conflicts: &[Vec<usize>],
    cfg: &MarginConfig,
) -> Result<BatchLossResult> {
    check_batch(features, positive_slots, Some(conflicts))?;
    let b = features.rows();
    let s = centers.rows();
    let rows: Vec<Vec<f64>> = (0..b)
        .into_par_iter()
        .map(|i| masked_probabilities(centers, features.row(i), positive_slots[i], &conflicts[i], cfg))
        .collect::<Result<_>>()?;

    let mut probabilities = Mat::zeros(b, s);
    let mut positive_probs = Vec::with_capacity(b);
    let mut total = 0.0;
    for (i, p) in rows.iter().enumerate() {
        let p_pos = p[positive_slots[i]];
        if p_pos == 0.0 {
            return Err(Error::PositiveMasked(positive_slots[i]));
        }
        total += p_pos.max(MIN_POSITIVE_PROB).ln();
        positive_probs.push(p_pos);
        probabilities.row_mut(i).copy_from_slice(p);
    }
    let loss = -total / b as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss {loss}")));
    }
    Ok(BatchLossResult {
        loss,
        probabilities,
        positive_probs,
    })
}

/// Inner-product feature gradient of one sample's loss `−log p⁺`.
pub fn grad_feature(probabilities: &[f64], centers: &Mat, positive_slot: usize) -> Result<Vec<f64>> {
    if probabilities.len() != centers.rows() {
        return Err(Error::shape(centers.rows(), probabilities.len()));
    }
    if positive_slot >= centers.rows() {
        return Err(Error::Index {
            index: positive_slot,
            len: centers.rows(),
        });
    }
    let mut grad = vec![0.0; centers.cols()];
    axpy(-(1.0 - probabilities[positive_slot]), centers.row(positive_slot), &mut grad);
    for (j, (w, &p)) in centers.iter_rows().zip(probabilities).enumerate() {
        if j != positive_slot && p != 0.0 {
            axpy(p, w, &mut grad);
        }
    }
    Ok(grad)
}

/// `∂ℓ/∂c_j` where `c_j = w_j · f`, including the margin-logit slope.
fn inner_product_grads(
    probabilities: &[f64],
    centers: &Mat,
    feature: &[f64],
    positive_slot: usize,
    cfg: &MarginConfig,
) -> Vec<f64> {
    probabilities
        .iter()
        .enumerate()
        .map(|(j, &p)| {
            let is_pos = j == positive_slot;
            let dz = p - if is_pos { 1.0 } else { 0.0 };
            if dz == 0.0 {
                return 0.0;
            }
            match cfg.mode {
                SimilarityMode::Plain => dz,
                SimilarityMode::Arcface => dz * cfg.logit_slope(dot(centers.row(j), feature), is_pos),
            }
        })
        .collect()
}

/// Feature gradient of one sample's loss under either similarity mode.
///
/// In arcface mode the gradient is taken w.r.t. the ambient coordinates of
/// the (unit) feature; chain through the normalization to reach raw inputs.
pub fn grad_feature_margin(
    probabilities: &[f64],
    centers: &Mat,
    feature: &[f64],
    positive_slot: usize,
    cfg: &MarginConfig,
) -> Result<Vec<f64>> {
    if cfg.mode == SimilarityMode::Plain {
        return grad_feature(probabilities, centers, positive_slot);
    }
    if probabilities.len() != centers.rows() {
        return Err(Error::shape(centers.rows(), probabilities.len()));
    }
    if feature.len() != centers.cols() {
        return Err(Error::shape(centers.cols(), feature.len()));
    }
    let g = inner_product_grads(probabilities, centers, feature, positive_slot, cfg);
    centers.matvec_t(&g)
}

/// Per-sample feature gradients of the batch-mean loss (`B × D`, scaled by `1/B`).
pub fn batch_feature_grads(
    result: &BatchLossResult,
    centers: &Mat,
    features: &Mat,
    positive_slots: &[usize],
    cfg: &MarginConfig,
) -> Result<Mat> {
    check_batch(features, positive_slots, None)?;
    let b = features.rows();
    let scale = 1.0 / b as f64;
    let rows: Vec<Vec<f64>> = (0..b)
        .into_par_iter()
        .map(|i| {
            grad_feature_margin(
                result.probabilities.row(i),
                centers,
                features.row(i),
                positive_slots[i],
                cfg,
            )
            .map(|g| g.into_iter().map(|x| x * scale).collect())
        })
        .collect::<Result<_>>()?;
    Mat::from_rows(&rows)
}

/// Inner-product center gradient of the batch-mean loss (`S × D`).
pub fn grad_centers(probabilities: &Mat, features: &Mat, positive_slots: &[usize]) -> Result<Mat> {
    check_batch(features, positive_slots, None)?;
    if probabilities.rows() != features.rows() {
        return Err(Error::shape(features.rows(), probabilities.rows()));
    }
    let b = features.rows();
    let s = probabilities.cols();
    let mut grad = Mat::zeros(s, features.cols());
    for (x, &pos) in positive_slots.iter().enumerate() {
        let f = features.row(x);
        let p = probabilities.row(x);
        if pos >= s {
            return Err(Error::Index { index: pos, len: s });
        }
        for (i, &pi) in p.iter().enumerate() {
            let coeff = if i == pos { -(1.0 - pi) } else { pi };
            if coeff != 0.0 {
                axpy(coeff / b as f64, f, grad.row_mut(i));
            }
        }
    }
    Ok(grad)
}

/// Center gradient of the batch-mean loss under either similarity mode.
pub fn grad_centers_margin(
    probabilities: &Mat,
    features: &Mat,
    centers: &Mat,
    positive_slots: &[usize],
    cfg: &MarginConfig,
) -> Result<Mat> {
    if cfg.mode == SimilarityMode::Plain {
        return grad_centers(probabilities, features, positive_slots);
    }
    check_batch(features, positive_slots, None)?;
    if probabilities.rows() != features.rows() || probabilities.cols() != centers.rows() {
        return Err(Error::shape(
            format!("{}x{} probabilities", features.rows(), centers.rows()),
            format!("{}x{}", probabilities.rows(), probabilities.cols()),
        ));
    }
    let b = features.rows();
    let mut grad = Mat::zeros(centers.rows(), centers.cols());
    for (x, &pos) in positive_slots.iter().enumerate() {
        let f = features.row(x);
        let g = inner_product_grads(probabilities.row(x), centers, f, pos, cfg);
        for (i, gi) in g.into_iter().enumerate() {
            if gi != 0.0 {
                axpy(gi / b as f64, f, grad.row_mut(i));
            }
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, l2_normalize, max_relative_error, DEFAULT_FD_STEP};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn uniform_two_way_is_ln2() {
        let centers = Mat::from_rows(&[vec![0.3, 0.4], vec![0.3, 0.4]]).unwrap();
        let f = Mat::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let r = batch_loss(&f, &centers, &[0], &[vec![]], &MarginConfig::plain()).unwrap();
        assert_abs_diff_eq!(r.loss, std::f64::consts::LN_2, epsilon = 1e-12);
    }

    #[test]
    fn masked_three_way_is_ln2() {
        let centers = Mat::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let f = Mat::from_rows(&[vec![0.6, 0.6]]).unwrap();
        let r = batch_loss(&f, &centers, &[2], &[vec![1]], &MarginConfig::plain()).unwrap();
        assert_abs_diff_eq!(r.loss, std::f64::consts::LN_2, epsilon = 1e-12);
        assert_eq!(r.probabilities[(0, 1)], 0.0);
    }

    #[test]
    fn confident_classification_has_near_zero_loss() {
        let centers = Mat::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        let f = Mat::from_rows(&[vec![40.0, 0.0]]).unwrap();
        let r = batch_loss(&f, &centers, &[0], &[vec![]], &MarginConfig::plain()).unwrap();
        assert!(r.loss < 1e-30);
        assert!(r.loss >= 0.0);
    }

    #[test]
    fn positive_conflict_is_an_error() {
        let centers = Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let f = Mat::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert!(batch_loss(&f, &centers, &[0], &[vec![0]], &MarginConfig::plain()).is_err());
        assert!(batch_loss(&f, &centers, &[0, 1], &[vec![]], &MarginConfig::plain()).is_err());
    }

    #[test]
    fn grad_feature_examples() {
        let centers = Mat::from_rows(&[vec![1.0, 2.0], vec![-3.0, 0.5]]).unwrap();
        assert_eq!(grad_feature(&[1.0, 0.0], &centers, 0).unwrap(), vec![0.0, 0.0]);
        // S = 2, p = (0.5, 0.5): 0.5 (w⁻ − w⁺)
        let g = grad_feature(&[0.5, 0.5], &centers, 0).unwrap();
        assert_eq!(g, vec![0.5 * (-3.0 - 1.0), 0.5 * (0.5 - 2.0)]);
    }

    #[test]
    fn grad_centers_examples() {
        let f = Mat::from_rows(&[vec![0.2, -0.7]]).unwrap();
        let p = Mat::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let g = grad_centers(&p, &f, &[0]).unwrap();
        assert!(g.as_slice().iter().all(|&x| x == 0.0));

        let p = Mat::from_rows(&[vec![0.3, 0.7]]).unwrap();
        let g = grad_centers(&p, &f, &[1]).unwrap();
        // positive column −(1 − p⁺) f, the other p⁻ f
        assert_abs_diff_eq!(g[(1, 0)], -(1.0 - 0.7) * 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(g[(1, 1)], -(1.0 - 0.7) * -0.7, epsilon = 1e-15);
        assert_abs_diff_eq!(g[(0, 0)], 0.3 * 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(g[(0, 1)], 0.3 * -0.7, epsilon = 1e-15);
    }

    #[test]
    fn plain_feature_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (d, s) = (8, 16);
        let centers = random_mat(&mut rng, s, d);
        let f = random_mat(&mut rng, 1, d);
        let cfg = MarginConfig::plain();
        let conflicts = vec![vec![3, 9]];
        let r = batch_loss(&f, &centers, &[5], &conflicts, &cfg).unwrap();
        let analytic = grad_feature(r.probabilities.row(0), &centers, 5).unwrap();
        let fd = finite_diff_grad(
            |x| {
                let fm = Mat::from_vec(1, d, x.to_vec()).unwrap();
                batch_loss(&fm, &centers, &[5], &conflicts, &cfg).unwrap().loss
            },
            f.row(0),
            DEFAULT_FD_STEP,
        )
        .unwrap();
        assert!(max_relative_error(&analytic, &fd, 1e-6) < 1e-5);
    }

    #[test]
    fn plain_center_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (b, d, s) = (4, 5, 7);
        let centers = random_mat(&mut rng, s, d);
        let f = random_mat(&mut rng, b, d);
        let slots = [0, 3, 3, 6];
        let conflicts = vec![vec![]; b];
        let cfg = MarginConfig::plain();
        let r = batch_loss(&f, &centers, &slots, &conflicts, &cfg).unwrap();
        let analytic = grad_centers(&r.probabilities, &f, &slots).unwrap();
        let fd = finite_diff_grad(
            |x| {
                let c = Mat::from_vec(s, d, x.to_vec()).unwrap();
                batch_loss(&f, &c, &slots, &conflicts, &cfg).unwrap().loss
            },
            centers.as_slice(),
            DEFAULT_FD_STEP,
        )
        .unwrap();
        assert!(max_relative_error(analytic.as_slice(), &fd, 1e-6) < 1e-5);
    }

    #[test]
    fn margin_feature_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (d, s) = (6, 9);
        let mut centers = random_mat(&mut rng, s, d);
        for i in 0..s {
            let u = l2_normalize(centers.row(i)).unwrap();
            centers.row_mut(i).copy_from_slice(&u);
        }
        let raw: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cfg = MarginConfig::arcface(8.0, 0.5);
        let loss_of = |x: &[f64]| {
            let fm = Mat::from_vec(1, d, l2_normalize(x).unwrap()).unwrap();
            batch_loss(&fm, &centers, &[2], &[vec![]], &cfg).unwrap().loss
        };
        let unit = l2_normalize(&raw).unwrap();
        let fm = Mat::from_vec(1, d, unit.clone()).unwrap();
        let r = batch_loss(&fm, &centers, &[2], &[vec![]], &cfg).unwrap();
        let g_unit = grad_feature_margin(r.probabilities.row(0), &centers, &unit, 2, &cfg).unwrap();
        let analytic = crate::numerics::normalize_backward(&raw, &g_unit).unwrap();
        let fd = finite_diff_grad(loss_of, &raw, DEFAULT_FD_STEP).unwrap();
        assert!(max_relative_error(&analytic, &fd, 1e-6) < 1e-4);
    }
}
