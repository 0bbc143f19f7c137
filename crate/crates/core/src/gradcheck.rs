//! Finite-difference audit of every analytic gradient in the crate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::loss::{batch_loss, grad_centers, grad_centers_margin, grad_feature, grad_feature_margin};
use crate::numerics::{dot, finite_diff_grad, l2_normalize, normalize_backward, normwise_relative_error, Mat, DEFAULT_FD_STEP};
use crate::similarity::MarginConfig;

/// Per-sample feature gradient from one probability row.
pub type FeatureGradFn = fn(&[f64], &Mat, usize) -> Result<Vec<f64>>;

pub const PLAIN_TOLERANCE: f64 = 1e-5;
pub const ARCFACE_TOLERANCE: f64 = 1e-4;
/// Smallest gradient scale used as the error denominator.
pub const ERROR_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradcheckOptions {
    pub trials: usize,
    /// Upper bounds; every trial draws its own sizes below them.
    pub max_dim: usize,
    pub max_slots: usize,
    pub max_batch: usize,
    pub seed: u64,
    /// ArcFace settings for the margin suites.
    pub margin: MarginConfig,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            trials: 100,
            max_dim: 16,
            max_slots: 32,
            max_batch: 8,
            seed: 0,
            margin: MarginConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub name: String,
    pub trials: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub suites: Vec<SuiteResult>,
}

impl GradcheckReport {
    pub fn all_passed(&self) -> bool {
        self.suites.iter().all(|s| s.passed)
    }
}

struct Instance {
    features: Mat,
    centers: Mat,
    slots: Vec<usize>,
    conflicts: Vec<Vec<usize>>,
}

fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Mat::from_vec(rows, cols, data).expect("sizes agree")
}

fn instance(rng: &mut ChaCha8Rng, opts: &GradcheckOptions, masked: bool) -> Instance {
    let d = rng.random_range(2..=opts.max_dim.max(2));
    let s = rng.random_range(3..=opts.max_slots.max(3));
    let b = rng.random_range(1..=opts.max_batch.max(1));
    let slots: Vec<usize> = (0..b).map(|_| rng.random_range(0..s)).collect();
    let conflicts = slots
        .iter()
        .map(|&pos| {
            if !masked {
                return Vec::new();
            }
            // at least one negative must survive
            let n = rng.random_range(1..=(s - 2));
            let mut others: Vec<usize> = (0..s).filter(|&j| j != pos).collect();
            for i in 0..n {
                let j = rng.random_range(i..others.len());
                others.swap(i, j);
            }
            others.truncate(n);
            others.sort_unstable();
            others
        })
        .collect();
    Instance {
        features: random_mat(rng, b, d),
        centers: random_mat(rng, s, d),
        slots,
        conflicts,
    }
}

fn unit_rows(m: &Mat) -> Result<Mat> {
    let rows: Vec<Vec<f64>> = m.iter_rows().map(l2_normalize).collect::<Result<_>>()?;
    Mat::from_rows(&rows)
}

fn loss_at(features: &Mat, centers: &Mat, inst: &Instance, cfg: &MarginConfig) -> f64 {
    batch_loss(features, centers, &inst.slots, &inst.conflicts, cfg)
        .map(|r| r.loss)
        .unwrap_or(f64::NAN)
}

/// Feature gradient of the batch mean via `feature_grad`, plain logits.
fn plain_feature_error(inst: &Instance, feature_grad: FeatureGradFn) -> Result<f64> {
    let cfg = MarginConfig::plain();
    let b = inst.features.rows();
    let r = batch_loss(&inst.features, &inst.centers, &inst.slots, &inst.conflicts, &cfg)?;
    let mut analytic = Vec::with_capacity(inst.features.as_slice().len());
    for i in 0..b {
        let g = feature_grad(r.probabilities.row(i), &inst.centers, inst.slots[i])?;
        analytic.extend(g.into_iter().map(|x| x / b as f64));
    }
    let (rows, cols) = (b, inst.features.cols());
    let fd = finite_diff_grad(
        |x| loss_at(&Mat::from_vec(rows, cols, x.to_vec()).expect("sizes agree"), &inst.centers, inst, &cfg),
        inst.features.as_slice(),
        DEFAULT_FD_STEP,
    )?;
    Ok(normwise_relative_error(&analytic, &fd, ERROR_FLOOR))
}

fn plain_center_error(inst: &Instance) -> Result<f64> {
    let cfg = MarginConfig::plain();
    let r = batch_loss(&inst.features, &inst.centers, &inst.slots, &inst.conflicts, &cfg)?;
    let analytic = grad_centers(&r.probabilities, &inst.features, &inst.slots)?;
    let (rows, cols) = (inst.centers.rows(), inst.centers.cols());
    let fd = finite_diff_grad(
        |x| loss_at(&inst.features, &Mat::from_vec(rows, cols, x.to_vec()).expect("sizes agree"), inst, &cfg),
        inst.centers.as_slice(),
        DEFAULT_FD_STEP,
    )?;
    Ok(normwise_relative_error(analytic.as_slice(), &fd, ERROR_FLOOR))
}

/// Margin gradients taken through the row normalization of raw inputs.
fn arcface_errors(inst: &Instance, cfg: &MarginConfig) -> Result<(f64, f64)> {
    let features = unit_rows(&inst.features)?;
    let centers = unit_rows(&inst.centers)?;
    let b = features.rows();
    let r = batch_loss(&features, &centers, &inst.slots, &inst.conflicts, cfg)?;

    let mut feat_analytic = Vec::new();
    for i in 0..b {
        let g = grad_feature_margin(r.probabilities.row(i), &centers, features.row(i), inst.slots[i], cfg)?;
        let g: Vec<f64> = g.into_iter().map(|x| x / b as f64).collect();
        feat_analytic.extend(normalize_backward(inst.features.row(i), &g)?);
    }
    let (fr, fc) = (b, features.cols());
    let fd_feat = finite_diff_grad(
        |x| match unit_rows(&Mat::from_vec(fr, fc, x.to_vec()).expect("sizes agree")) {
            Ok(f) => loss_at(&f, &centers, inst, cfg),
            Err(_) => f64::NAN,
        },
        inst.features.as_slice(),
        DEFAULT_FD_STEP,
    )?;

    let gc = grad_centers_margin(&r.probabilities, &features, &centers, &inst.slots, cfg)?;
    let mut center_analytic = Vec::new();
    for j in 0..centers.rows() {
        center_analytic.extend(normalize_backward(inst.centers.row(j), gc.row(j))?);
    }
    let (cr, cc) = (centers.rows(), centers.cols());
    let fd_centers = finite_diff_grad(
        |x| match unit_rows(&Mat::from_vec(cr, cc, x.to_vec()).expect("sizes agree")) {
            Ok(c) => loss_at(&features, &c, inst, cfg),
            Err(_) => f64::NAN,
        },
        inst.centers.as_slice(),
        DEFAULT_FD_STEP,
    )?;
    Ok((
        normwise_relative_error(&feat_analytic, &fd_feat, ERROR_FLOOR),
        normwise_relative_error(&center_analytic, &fd_centers, ERROR_FLOOR),
    ))
}

/// Backward of `L = g · encoder(x)` against perturbing every parameter.
fn encoder_error(rng: &mut ChaCha8Rng, opts: &GradcheckOptions) -> Result<f64> {
    let depth = rng.random_range(0..=2);
    let mut widths = vec![rng.random_range(2..=opts.max_dim.max(2))];
    for _ in 0..depth {
        widths.push(rng.random_range(2..=opts.max_dim.max(2)));
    }
    widths.push(rng.random_range(2..=opts.max_dim.max(2)));
    let params = EncoderParams::random(&widths, rng)?;
    let x: Vec<f64> = (0..widths[0]).map(|_| rng.random_range(-1.0..1.0)).collect();
    let g: Vec<f64> = (0..*widths.last().expect("non-empty")).map(|_| rng.random_range(-1.0..1.0)).collect();
    let (_, tape) = params.forward(&x)?;
    let grads = params.backward(&tape, &g)?;
    let mut worst: f64 = 0.0;
    let analytic = grads.buffers();
    for (bi, buf) in params.buffers().iter().enumerate() {
        let fd = finite_diff_grad(
            |v| {
                let mut p = params.clone();
                p.buffers_mut()[bi].copy_from_slice(v);
                p.embed(&x).map(|f| dot(&g, &f)).unwrap_or(f64::NAN)
            },
            buf,
            DEFAULT_FD_STEP,
        )?;
        worst = worst.max(normwise_relative_error(analytic[bi], &fd, ERROR_FLOOR));
    }
    Ok(worst)
}

pub fn run_gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    run_gradcheck_with(opts, grad_feature)
}

/// Same suites with a replaceable per-sample feature gradient.
pub fn run_gradcheck_with(opts: &GradcheckOptions, feature_grad: FeatureGradFn) -> Result<GradcheckReport> {
    if opts.trials == 0 {
        return Err(Error::EmptySuite);
    }
    if opts.max_dim < 2 || opts.max_slots < 3 || opts.max_batch == 0 {
        return Err(Error::Invalid("gradcheck needs dim >= 2, slots >= 3, batch >= 1".into()));
    }
    opts.margin.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut worst = [0.0f64; 6];
    for _ in 0..opts.trials {
        let open = instance(&mut rng, opts, false);
        let masked = instance(&mut rng, opts, true);
        worst[0] = worst[0].max(plain_feature_error(&open, feature_grad)?);
        worst[1] = worst[1].max(plain_center_error(&open)?);
        worst[2] = worst[2].max(plain_feature_error(&masked, feature_grad)?.max(plain_center_error(&masked)?));
        let (f, c) = arcface_errors(&masked, &opts.margin)?;
        worst[3] = worst[3].max(f);
        worst[4] = worst[4].max(c);
        worst[5] = worst[5].max(encoder_error(&mut rng, opts)?);
    }
    let names = [
        ("feature gradient, plain", PLAIN_TOLERANCE),
        ("center gradient, plain", PLAIN_TOLERANCE),
        ("masked feature and center gradients, plain", PLAIN_TOLERANCE),
        ("feature gradient, arcface", ARCFACE_TOLERANCE),
        ("center gradient, arcface", ARCFACE_TOLERANCE),
        ("encoder backward", PLAIN_TOLERANCE),
    ];
    Ok(GradcheckReport {
        suites: names
            .iter()
            .zip(worst)
            .map(|(&(name, tolerance), err)| SuiteResult {
                name: name.to_string(),
                trials: opts.trials,
                max_rel_error: err,
                tolerance,
                // NaN never passes
                passed: err <= tolerance,
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flipped(p: &[f64], centers: &Mat, pos: usize) -> Result<Vec<f64>> {
        Ok(grad_feature(p, centers, pos)?.into_iter().map(|x| -x).collect())
    }

    #[test]
    fn small_suite_passes() {
        let opts = GradcheckOptions { trials: 5, ..Default::default() };
        let report = run_gradcheck(&opts).unwrap();
        assert!(report.all_passed(), "{report:#?}");
        assert_eq!(report.suites.len(), 6);
    }

    #[test]
    fn sign_flip_is_caught() {
        let opts = GradcheckOptions { trials: 3, ..Default::default() };
        let report = run_gradcheck_with(&opts, flipped).unwrap();
        assert!(!report.suites[0].passed);
        assert!(!report.all_passed());
    }

    #[test]
    fn full_default_suite_passes() {
        let report = run_gradcheck(&GradcheckOptions::default()).unwrap();
        assert!(report.all_passed(), "{report:#?}");
    }

    #[test]
    fn zero_trials_is_an_empty_suite() {
        let opts = GradcheckOptions { trials: 0, ..Default::default() };
        let err = run_gradcheck(&opts).unwrap_err();
        assert_eq!(err.to_string(), "empty suite");
    }
}
