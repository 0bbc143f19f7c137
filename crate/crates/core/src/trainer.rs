//! Training loops for the AttFC head and the FC baseline, plus evaluation,
//! the GCC strategy study and head-size benchmarks.
//!
//! One AttFC iteration runs these phases in order:
//!
//! 1. sample a batch (identity image + `k` class images per sample)
//! 2. feature encoder on identity images, class encoder on class images
//! 3. attention loader builds one GCC per sample
//! 4. GCCs are enqueued into the DCC, overwriting the oldest batch
//! 5. conflicts (other slots with the same label) are collected per sample
//! 6. masked softmax loss against the whole DCC
//! 7. feature gradient, encoder backward, SGD on the feature encoder
//! 8. momentum update of the class encoder
//!
//! Nothing in phase 7 touches the DCC or the class encoder.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{build_gcc, ClassFeatureSet, GccStrategy};
use crate::data::{empirical_tcc, make_dataset, BatchSampler, Dataset, SampledBatch, SamplerMode, SyntheticDatasetSpec};
use crate::dcc::{capacity, DccState, Label};
use crate::encoder::{
    dcc_head_params, fc_head_params, momentum_update, sgd_step, EncoderParams, FeatureExtractor,
    LrSchedule, OptimizerState, ParamGrads, Tape,
};
use crate::error::{Error, Result};
use crate::loss::{batch_feature_grads, batch_loss, grad_centers_margin, BatchLossResult};
use crate::numerics::{
    dot, finite_diff_grad, l2_normalize, normalize_backward, Mat, DEFAULT_FD_STEP,
};
use crate::similarity::MarginConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadMode {
    Fc,
    Attfc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub dataset: SyntheticDatasetSpec,
    /// Output width `D` of both encoders.
    pub feature_dim: usize,
    /// Hidden widths of the encoder MLP.
    pub hidden: Vec<usize>,
    pub batch_size: usize,
    pub epochs: usize,
    /// Overrides `epochs × steps_per_epoch` when set.
    pub max_steps: Option<u64>,
    pub size_ratio: f64,
    pub k: usize,
    pub gamma: f64,
    pub margin: MarginConfig,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Apply weight decay to the FC baseline's learned centers.
    pub center_weight_decay: bool,
    pub head: HeadMode,
    pub strategy: GccStrategy,
    pub attention_temperature: f64,
    pub sampler: SamplerMode,
    /// Evaluate every this many steps; 0 means at the end of each epoch.
    pub eval_every: u64,
    /// Positive (and negative) pairs per verification run.
    pub eval_pairs: usize,
    /// Fill the `step_ms` column. Off by default so metric files are
    /// reproducible byte for byte.
    pub record_timing: bool,
    /// FC baseline: finite-difference check of the center gradient at every
    /// evaluation step.
    pub debug_gradcheck: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dataset: SyntheticDatasetSpec::default(),
            feature_dim: 512,
            hidden: vec![64],
            batch_size: 384,
            epochs: 5,
            max_steps: None,
            size_ratio: 0.3,
            k: 2,
            gamma: 0.999,
            margin: MarginConfig::default(),
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 0.0005,
            center_weight_decay: true,
            head: HeadMode::Attfc,
            strategy: GccStrategy::Attention,
            attention_temperature: 1.0,
            sampler: SamplerMode::Uniform,
            eval_every: 0,
            eval_pairs: 1000,
            record_timing: false,
            debug_gradcheck: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Desk-scale setup: 500 identities, `D = 32`, 64-wide inputs, `B = 64`,
    /// 20 epochs.
    pub fn toy() -> Self {
        Self {
            dataset: SyntheticDatasetSpec::default(),
            feature_dim: 32,
            batch_size: 64,
            epochs: 20,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: String| {
            Err(Error::Config {
                field: field.to_string(),
                message,
            })
        };
        self.dataset.validate()?;
        if self.feature_dim == 0 {
            return bad("feature_dim", "must be >= 1".into());
        }
        if self.hidden.contains(&0) {
            return bad("hidden", "widths must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be >= 1".into());
        }
        if self.epochs == 0 && self.max_steps.is_none() {
            return bad("epochs", "must be >= 1".into());
        }
        if self.max_steps == Some(0) {
            return bad("max_steps", "must be >= 1".into());
        }
        if self.k == 0 {
            return bad("k", "must be >= 1".into());
        }
        if self.k + 1 > self.dataset.train_images_per_identity() {
            return bad(
                "k",
                format!(
                    "k + 1 = {} exceeds the {} training images per identity",
                    self.k + 1,
                    self.dataset.train_images_per_identity()
                ),
            );
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma", format!("must lie in [0, 1], got {}", self.gamma));
        }
        if let Err(e) = self.margin.validate() {
            return bad("margin", e.to_string());
        }
        if !(self.lr0 >= 0.0) || !self.lr0.is_finite() {
            return bad("lr0", format!("must be finite and >= 0, got {}", self.lr0));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", format!("must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay", format!("must be >= 0, got {}", self.weight_decay));
        }
        if !(self.attention_temperature > 0.0) {
            return bad("attention_temperature", "must be > 0".into());
        }
        if let SamplerMode::ConflictStress { duplicates } = self.sampler {
            if duplicates > self.batch_size {
                return bad("sampler.duplicates", format!("exceeds batch size {}", self.batch_size));
            }
        }
        if self.head == HeadMode::Attfc {
            match capacity(self.dataset.identities, self.size_ratio, self.batch_size) {
                Ok(s) if s >= 2 => {}
                Ok(s) => return bad("size_ratio", format!("capacity {s} leaves no negative")),
                Err(e) => return bad("size_ratio", e.to_string()),
            }
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self) -> u64 {
        let images = self.dataset.identities * self.dataset.train_images_per_identity();
        images.div_ceil(self.batch_size).max(1) as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.max_steps
            .unwrap_or(self.epochs as u64 * self.steps_per_epoch())
    }

    pub fn encoder_widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden.len() + 2);
        w.push(self.dataset.input_dim);
        w.extend_from_slice(&self.hidden);
        w.push(self.feature_dim);
        w
    }

    /// Number of center slots in the classification head.
    pub fn head_slots(&self) -> Result<usize> {
        match self.head {
            HeadMode::Fc => Ok(self.dataset.identities),
            HeadMode::Attfc => capacity(self.dataset.identities, self.size_ratio, self.batch_size),
        }
    }

    fn is_eval_step(&self, step: u64) -> bool {
        let done = step + 1;
        let every = if self.eval_every == 0 {
            self.steps_per_epoch()
        } else {
            self.eval_every
        };
        done.is_multiple_of(every) || done == self.total_steps()
    }
}

/// Independent sub-seeds for the run's random streams.
fn sub_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_ENCODER: u64 = 1;
const STREAM_HEAD: u64 = 2;
const STREAM_SAMPLER: u64 = 3;
const STREAM_EVAL: u64 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum HeadState {
    Attfc {
        class_encoder: EncoderParams,
        dcc: DccState,
    },
    Fc {
        /// `N × D`, one unit-norm learned center per identity.
        centers: Mat,
    },
}

/// Everything needed to resume a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub config: TrainConfig,
    pub step: u64,
    pub feature_encoder: EncoderParams,
    /// Feature-encoder buffers, then (FC only) the center buffer.
    pub optimizer: OptimizerState,
    pub sampler: BatchSampler,
    pub eval_rng: ChaCha8Rng,
    pub head: HeadState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub conflicts: usize,
    pub gcc_tcc_cos: Option<f64>,
    pub verif_acc: Option<f64>,
    pub head_params: usize,
    pub step_ms: Option<f64>,
}

/// Analytic memory accounting at a declared precision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryEstimate {
    pub precision_bytes: usize,
    pub head_bytes: usize,
    pub encoder_bytes: usize,
    pub optimizer_bytes: usize,
    pub activation_bytes: usize,
    pub total_bytes: usize,
}

/// Forward results of one batch.
#[derive(Debug, Clone)]
pub struct EncodedBatch {
    /// `B × D`
    pub features: Mat,
    pub tapes: Vec<Tape>,
    /// One `k × D` set per sample (empty for the FC head).
    pub class_features: Vec<ClassFeatureSet>,
}

/// What one iteration did.
#[derive(Debug, Clone)]
pub struct StepReport {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub labels: Vec<Label>,
    /// Positive slot per sample (the DCC slot of its GCC, or its label for FC).
    pub positive_slots: Vec<usize>,
    pub conflicts: Vec<Vec<usize>>,
    /// `B × D` generated centers (AttFC) or the positive learned centers (FC).
    pub centers_used: Mat,
}

impl StepReport {
    pub fn conflict_count(&self) -> usize {
        self.conflicts.iter().map(Vec::len).sum()
    }
}

pub struct Trainer {
    state: TrainState,
    dataset: Dataset,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let dataset = make_dataset(&config.dataset)?;
        Self::with_dataset(config, dataset)
    }

    pub fn with_dataset(config: TrainConfig, dataset: Dataset) -> Result<Self> {
        config.validate()?;
        if dataset.spec != config.dataset {
            return Err(Error::Config {
                field: "dataset".into(),
                message: "dataset does not match the configured spec".into(),
            });
        }
        let mut enc_rng = ChaCha8Rng::seed_from_u64(sub_seed(config.seed, STREAM_ENCODER));
        let feature_encoder = EncoderParams::random(&config.encoder_widths(), &mut enc_rng)?;
        let head_seed = sub_seed(config.seed, STREAM_HEAD);
        let total = config.total_steps();
        let mut buffer_lens: Vec<usize> = feature_encoder.buffers().iter().map(|b| b.len()).collect();
        let head = match config.head {
            HeadMode::Attfc => {
                let s = capacity(config.dataset.identities, config.size_ratio, config.batch_size)?;
                HeadState::Attfc {
                    // exact copy of the feature encoder at step 0
                    class_encoder: feature_encoder.clone(),
                    dcc: DccState::new(config.feature_dim, s, head_seed)?,
                }
            }
            HeadMode::Fc => {
                let n = config.dataset.identities;
                let mut rng = ChaCha8Rng::seed_from_u64(head_seed);
                let mut centers = Mat::zeros(n, config.feature_dim);
                for i in 0..n {
                    let v: Vec<f64> = (0..config.feature_dim)
                        .map(|_| StandardNormal.sample(&mut rng))
                        .collect();
                    centers.row_mut(i).copy_from_slice(&l2_normalize(&v)?);
                }
                buffer_lens.push(n * config.feature_dim);
                HeadState::Fc { centers }
            }
        };
        let optimizer = OptimizerState::new(
            config.lr0,
            config.momentum,
            config.weight_decay,
            LrSchedule::Cosine,
            total,
            &buffer_lens,
        );
        let sampler = BatchSampler::new(config.sampler, sub_seed(config.seed, STREAM_SAMPLER));
        let eval_rng = ChaCha8Rng::seed_from_u64(sub_seed(config.seed, STREAM_EVAL));
        Ok(Self {
            state: TrainState {
                config,
                step: 0,
                feature_encoder,
                optimizer,
                sampler,
                eval_rng,
                head,
            },
            dataset,
        })
    }

    /// Resumes from a saved state; the dataset is regenerated from its spec.
    pub fn from_state(state: TrainState) -> Result<Self> {
        state.config.validate()?;
        let dataset = make_dataset(&state.config.dataset)?;
        Ok(Self { state, dataset })
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    pub fn config(&self) -> &TrainConfig {
        &self.state.config
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn feature_encoder(&self) -> &EncoderParams {
        &self.state.feature_encoder
    }

    pub fn class_encoder(&self) -> Option<&EncoderParams> {
        match &self.state.head {
            HeadState::Attfc { class_encoder, .. } => Some(class_encoder),
            HeadState::Fc { .. } => None,
        }
    }

    pub fn dcc(&self) -> Option<&DccState> {
        match &self.state.head {
            HeadState::Attfc { dcc, .. } => Some(dcc),
            HeadState::Fc { .. } => None,
        }
    }

    pub fn fc_centers(&self) -> Option<&Mat> {
        match &self.state.head {
            HeadState::Fc { centers } => Some(centers),
            HeadState::Attfc { .. } => None,
        }
    }

    pub fn step_index(&self) -> u64 {
        self.state.step
    }

    pub fn is_finished(&self) -> bool {
        self.state.step >= self.state.config.total_steps()
    }

    pub fn head_params(&self) -> usize {
        let d = self.state.config.feature_dim;
        match &self.state.head {
            HeadState::Attfc { dcc, .. } => dcc_head_params(d, dcc.capacity()),
            HeadState::Fc { centers } => fc_head_params(d, centers.rows()),
        }
    }

    pub fn memory_estimate(&self, precision_bytes: usize) -> MemoryEstimate {
        let cfg = &self.state.config;
        let enc = self.state.feature_encoder.param_count();
        let head = self.head_params();
        let (encoders, optimizer) = match self.state.head {
            HeadState::Attfc { .. } => (2 * enc, enc),
            HeadState::Fc { .. } => (enc, enc + head),
        };
        let widths: usize = cfg.encoder_widths().iter().sum();
        let images = match self.state.head {
            HeadState::Attfc { .. } => cfg.batch_size * (1 + cfg.k),
            HeadState::Fc { .. } => cfg.batch_size,
        };
        let slots = self.head_params() / cfg.feature_dim;
        // per-image layer activations plus the B × slots probability matrix
        let activations = images * widths + cfg.batch_size * slots;
        let total = head + encoders + optimizer + activations;
        MemoryEstimate {
            precision_bytes,
            head_bytes: head * precision_bytes,
            encoder_bytes: encoders * precision_bytes,
            optimizer_bytes: optimizer * precision_bytes,
            activation_bytes: activations * precision_bytes,
            total_bytes: total * precision_bytes,
        }
    }

    pub fn sample_batch(&mut self) -> Result<SampledBatch> {
        let cfg = &self.state.config;
        self.state.sampler.sample(&self.dataset, cfg.batch_size, cfg.k)
    }

    /// Phase 2–3: encoders and attention loader inputs.
    pub fn encode(&self, batch: &SampledBatch) -> Result<EncodedBatch> {
        let fe = &self.state.feature_encoder;
        let b = batch.batch_size();
        let forwards: Vec<(Vec<f64>, Tape)> = (0..b)
            .into_par_iter()
            .map(|i| fe.forward(batch.identity_images.row(i)))
            .collect::<Result<_>>()?;
        let (rows, tapes): (Vec<_>, Vec<_>) = forwards.into_iter().unzip();
        let features = Mat::from_rows(&rows)?;
        let class_features = match &self.state.head {
            HeadState::Attfc { class_encoder, .. } => (0..b)
                .into_par_iter()
                .map(|i| {
                    let rows = batch
                        .class_rows(i)
                        .map(|x| class_encoder.embed(x))
                        .collect::<Result<Vec<_>>>()?;
                    ClassFeatureSet::from_rows(&rows)
                })
                .collect::<Result<_>>()?,
            HeadState::Fc { .. } => Vec::new(),
        };
        Ok(EncodedBatch {
            features,
            tapes,
            class_features,
        })
    }

    /// Phase 3: one GCC per sample (`B × D`).
    pub fn build_gccs(&self, encoded: &EncodedBatch) -> Result<Mat> {
        let cfg = &self.state.config;
        let rows: Vec<Vec<f64>> = encoded
            .class_features
            .par_iter()
            .enumerate()
            .map(|(i, k)| build_gcc(cfg.strategy, encoded.features.row(i), k, cfg.attention_temperature))
            .collect::<Result<_>>()?;
        Mat::from_rows(&rows)
    }

    /// Phase 4: push the GCCs; returns the slot of each sample's GCC.
    pub fn enqueue(&mut self, gccs: &Mat, labels: &[Label]) -> Result<Vec<usize>> {
        match &mut self.state.head {
            HeadState::Attfc { dcc, .. } => dcc.enqueue_batch(gccs, labels),
            HeadState::Fc { .. } => Err(Error::Invalid("the FC head has no container".into())),
        }
    }

    /// Phase 5.
    pub fn find_conflicts(&self, labels: &[Label], slots: &[usize]) -> Vec<Vec<usize>> {
        match &self.state.head {
            HeadState::Attfc { dcc, .. } => labels
                .iter()
                .zip(slots)
                .map(|(&l, &s)| dcc.find_conflicts(l, s))
                .collect(),
            HeadState::Fc { .. } => vec![Vec::new(); labels.len()],
        }
    }

    fn bank(&self) -> &Mat {
        match &self.state.head {
            HeadState::Attfc { dcc, .. } => dcc.centers(),
            HeadState::Fc { centers } => centers,
        }
    }

    /// Phase 6.
    pub fn loss(&self, encoded: &EncodedBatch, slots: &[usize], conflicts: &[Vec<usize>]) -> Result<BatchLossResult> {
        batch_loss(&encoded.features, self.bank(), slots, conflicts, &self.state.config.margin)
    }

    fn encoder_grads(&self, encoded: &EncodedBatch, feature_grads: &Mat) -> Result<ParamGrads> {
        let fe = &self.state.feature_encoder;
        let per_sample: Vec<ParamGrads> = encoded
            .tapes
            .par_iter()
            .enumerate()
            .map(|(i, tape)| fe.backward(tape, feature_grads.row(i)))
            .collect::<Result<_>>()?;
        // fixed-order reduction keeps results independent of thread count
        let mut total = ParamGrads::zeros_like(fe);
        for g in &per_sample {
            total.add_assign(g);
        }
        Ok(total)
    }

    /// Phase 7: backward through the feature encoder and one SGD step. The FC
    /// head also updates (and re-normalizes) its learned centers.
    pub fn update_feature_encoder(
        &mut self,
        encoded: &EncodedBatch,
        result: &BatchLossResult,
        slots: &[usize],
    ) -> Result<f64> {
        let margin = self.state.config.margin;
        let feature_grads = batch_feature_grads(result, self.bank(), &encoded.features, slots, &margin)?;
        let enc_grads = self.encoder_grads(encoded, &feature_grads)?;
        match &mut self.state.head {
            HeadState::Attfc { .. } => sgd_step(&mut self.state.feature_encoder, &enc_grads, &mut self.state.optimizer),
            HeadState::Fc { centers } => {
                let center_grads = grad_centers_margin(&result.probabilities, &encoded.features, centers, slots, &margin)?;
                let mut grads = enc_grads.buffers();
                grads.push(center_grads.as_slice());
                let mut decay = vec![true; grads.len()];
                *decay.last_mut().expect("non-empty") = self.state.config.center_weight_decay;
                let mut params = self.state.feature_encoder.buffers_mut();
                params.push(centers.as_mut_slice());
                let lr = self.state.optimizer.step_buffers(&mut params, &grads, &decay)?;
                for i in 0..centers.rows() {
                    let u = l2_normalize(centers.row(i))?;
                    centers.row_mut(i).copy_from_slice(&u);
                }
                Ok(lr)
            }
        }
    }

    /// Phase 8.
    pub fn update_class_encoder(&mut self) -> Result<()> {
        let gamma = self.state.config.gamma;
        match &mut self.state.head {
            HeadState::Attfc { class_encoder, .. } => {
                momentum_update(class_encoder, &self.state.feature_encoder, gamma)
            }
            HeadState::Fc { .. } => Ok(()),
        }
    }

    /// One full iteration.
    pub fn step(&mut self) -> Result<StepReport> {
        let batch = self.sample_batch()?;
        let encoded = self.encode(&batch)?;
        let (slots, conflicts, centers_used) = match self.state.config.head {
            HeadMode::Attfc => {
                let gccs = self.build_gccs(&encoded)?;
                let slots = self.enqueue(&gccs, &batch.labels)?;
                let conflicts = self.find_conflicts(&batch.labels, &slots);
                (slots, conflicts, gccs)
            }
            HeadMode::Fc => {
                let slots = batch.labels.clone();
                let bank = self.bank();
                let rows: Vec<Vec<f64>> = slots.iter().map(|&s| bank.row(s).to_vec()).collect();
                (slots, vec![Vec::new(); batch.batch_size()], Mat::from_rows(&rows)?)
            }
        };
        let result = self.loss(&encoded, &slots, &conflicts)?;
        if !result.loss.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {}", self.state.step)));
        }
        if self.state.config.debug_gradcheck && self.state.config.is_eval_step(self.state.step) {
            self.check_center_gradient(&encoded, &result, &slots)?;
        }
        let lr = self.update_feature_encoder(&encoded, &result, &slots)?;
        self.update_class_encoder()?;
        if !self.state.feature_encoder.is_finite() {
            return Err(Error::NonFinite(format!("feature encoder after step {}", self.state.step)));
        }
        let report = StepReport {
            step: self.state.step,
            loss: result.loss,
            lr,
            labels: batch.labels,
            positive_slots: slots,
            conflicts,
            centers_used,
        };
        self.state.step += 1;
        Ok(report)
    }

    /// FC head: analytic center gradient against central differences on a
    /// few random rows, taken through the row normalization.
    fn check_center_gradient(&mut self, encoded: &EncodedBatch, result: &BatchLossResult, slots: &[usize]) -> Result<()> {
        let HeadState::Fc { centers } = &self.state.head else {
            return Ok(());
        };
        let margin = self.state.config.margin;
        let analytic = grad_centers_margin(&result.probabilities, &encoded.features, centers, slots, &margin)?;
        let conflicts = vec![Vec::new(); slots.len()];
        let mut projected = Vec::with_capacity(centers.rows());
        for r in 0..centers.rows() {
            projected.push(normalize_backward(centers.row(r), analytic.row(r))?);
        }
        // errors are measured against the scale of the whole gradient
        let scale = projected.iter().flatten().fold(1e-12, |m: f64, x| m.max(x.abs()));
        // one positive row plus two random rows
        let rows = [
            slots[self.state.eval_rng.random_range(0..slots.len())],
            self.state.eval_rng.random_range(0..centers.rows()),
            self.state.eval_rng.random_range(0..centers.rows()),
        ];
        for row in rows {
            let mut probe_bank = centers.clone();
            let fd = finite_diff_grad(
                |x| {
                    let u = l2_normalize(x).expect("perturbed row stays non-zero");
                    probe_bank.row_mut(row).copy_from_slice(&u);
                    batch_loss(&encoded.features, &probe_bank, slots, &conflicts, &margin)
                        .map(|r| r.loss)
                        .unwrap_or(f64::NAN)
                },
                centers.row(row),
                DEFAULT_FD_STEP,
            )?;
            let worst = projected[row]
                .iter()
                .zip(&fd)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            let err = if fd.iter().any(|x| x.is_nan()) { f64::INFINITY } else { worst / scale };
            if !(err <= 1e-4) {
                return Err(Error::Tolerance(format!(
                    "center gradient check failed on row {row}: relative error {err:.3e}"
                )));
            }
        }
        Ok(())
    }

    /// Mean cosine between the centers used this step and the empirical TCC
    /// of their labels under the current feature encoder.
    pub fn gcc_tcc_cos(&self, report: &StepReport) -> Result<f64> {
        let tcc = empirical_tcc(&self.dataset, &self.state.feature_encoder)?;
        let total: f64 = report
            .labels
            .iter()
            .enumerate()
            .map(|(i, &l)| dot(report.centers_used.row(i), tcc.row(l)))
            .sum();
        Ok(total / report.labels.len() as f64)
    }

    pub fn evaluate(&mut self) -> Result<f64> {
        evaluate_verification(
            &self.state.feature_encoder,
            &self.dataset,
            self.state.config.eval_pairs,
            &mut self.state.eval_rng,
        )
    }

    /// Runs one step and turns it into a metrics row.
    pub fn step_with_metrics(&mut self) -> Result<MetricsRecord> {
        let start = Instant::now();
        let eval = self.state.config.is_eval_step(self.state.step);
        let report = self.step()?;
        let elapsed = start.elapsed().as_secs_f64() * 1e3;
        let (gcc_tcc_cos, verif_acc) = if eval {
            (Some(self.gcc_tcc_cos(&report)?), Some(self.evaluate()?))
        } else {
            (None, None)
        };
        Ok(MetricsRecord {
            step: report.step,
            loss: report.loss,
            lr: report.lr,
            conflicts: report.conflict_count(),
            gcc_tcc_cos,
            verif_acc,
            head_params: self.head_params(),
            step_ms: self.state.config.record_timing.then_some(elapsed),
        })
    }

    /// Trains to completion, handing every metrics row to `sink`.
    pub fn run<F: FnMut(&MetricsRecord)>(&mut self, mut sink: F) -> Result<Vec<MetricsRecord>> {
        let mut records = Vec::new();
        while !self.is_finished() {
            let rec = self.step_with_metrics()?;
            sink(&rec);
            records.push(rec);
        }
        Ok(records)
    }
}

/// Trains an AttFC head (`cfg.head` is forced to `attfc`).
pub fn train_attfc(mut cfg: TrainConfig) -> Result<(Vec<MetricsRecord>, TrainState)> {
    cfg.head = HeadMode::Attfc;
    let mut t = Trainer::new(cfg)?;
    let records = t.run(|_| {})?;
    Ok((records, t.into_state()))
}

/// Trains the FC baseline (`cfg.head` is forced to `fc`).
pub fn train_fc_baseline(mut cfg: TrainConfig) -> Result<(Vec<MetricsRecord>, TrainState)> {
    cfg.head = HeadMode::Fc;
    let mut t = Trainer::new(cfg)?;
    let records = t.run(|_| {})?;
    Ok((records, t.into_state()))
}

/// Best-threshold accuracy over `pairs` positive and `pairs` negative
/// held-out pairs scored by cosine similarity.
pub fn evaluate_verification<E, R>(encoder: &E, dataset: &Dataset, pairs: usize, rng: &mut R) -> Result<f64>
where
    E: FeatureExtractor + ?Sized,
    R: Rng + ?Sized,
{
    if pairs == 0 {
        return Err(Error::Invalid("need at least one pair".into()));
    }
    let holdout = dataset.spec.holdout_per_identity;
    if holdout < 2 || dataset.len() < 2 {
        return Err(Error::Invalid(format!(
            "insufficient held-out images: positive pairs need 2 per identity, have {holdout}"
        )));
    }
    let mut jobs: Vec<(&[f64], &[f64], bool)> = Vec::with_capacity(2 * pairs);
    for _ in 0..pairs {
        let id = rng.random_range(0..dataset.len());
        let a = rng.random_range(0..holdout);
        let mut b = rng.random_range(0..holdout - 1);
        if b >= a {
            b += 1;
        }
        let imgs = dataset.holdout_images(id);
        jobs.push((&imgs[a].pixels, &imgs[b].pixels, true));
    }
    for _ in 0..pairs {
        let i = rng.random_range(0..dataset.len());
        let mut j = rng.random_range(0..dataset.len() - 1);
        if j >= i {
            j += 1;
        }
        let a = &dataset.holdout_images(i)[rng.random_range(0..holdout)].pixels;
        let b = &dataset.holdout_images(j)[rng.random_range(0..holdout)].pixels;
        jobs.push((a, b, false));
    }
    let scored: Vec<(f64, bool)> = jobs
        .par_iter()
        .map(|&(a, b, same)| Ok((dot(&encoder.extract(a)?, &encoder.extract(b)?), same)))
        .collect::<Result<_>>()?;
    Ok(best_threshold_accuracy(scored))
}

/// Accuracy of the best rule "same iff score ≥ t" over all thresholds.
pub fn best_threshold_accuracy(mut scored: Vec<(f64, bool)>) -> f64 {
    let n = scored.len();
    if n == 0 {
        return 0.0;
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let negatives = scored.iter().filter(|s| !s.1).count();
    // threshold above every score: everything predicted "different"
    let mut correct = negatives;
    let mut best = correct;
    let mut i = 0;
    while i < n {
        let score = scored[i].0;
        while i < n && scored[i].0 == score {
            if scored[i].1 {
                correct += 1;
            } else {
                correct -= 1;
            }
            i += 1;
        }
        best = best.max(correct);
    }
    best as f64 / n as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyStats {
    pub strategy: GccStrategy,
    pub mean_cos: f64,
    pub var_cos: f64,
}

/// Monte-Carlo GCC quality: for every identity, draw one identity image and
/// `k` class images (shared across strategies) and measure the cosine of
/// each strategy's GCC to the empirical TCC.
pub fn gcc_strategy_study<E: FeatureExtractor + ?Sized>(
    dataset: &Dataset,
    extractor: &E,
    k: usize,
    seed: u64,
) -> Result<Vec<StrategyStats>> {
    let tcc = empirical_tcc(dataset, extractor)?;
    let mut sampler = BatchSampler::new(SamplerMode::Uniform, seed);
    let mut cos: Vec<Vec<f64>> = vec![Vec::with_capacity(dataset.len()); GccStrategy::ALL.len()];
    let chunk = 256;
    let labels: Vec<Label> = (0..dataset.len()).collect();
    for ids in labels.chunks(chunk) {
        let batch = sampler.sample_for_labels(dataset, ids, k)?;
        let per_sample: Vec<Vec<f64>> = (0..ids.len())
            .into_par_iter()
            .map(|i| {
                let f = extractor.extract(batch.identity_images.row(i))?;
                let rows = batch
                    .class_rows(i)
                    .map(|x| extractor.extract(x))
                    .collect::<Result<Vec<_>>>()?;
                let set = ClassFeatureSet::from_rows(&rows)?;
                GccStrategy::ALL
                    .iter()
                    .map(|&s| build_gcc(s, &f, &set, 1.0).map(|g| dot(&g, tcc.row(ids[i]))))
                    .collect()
            })
            .collect::<Result<_>>()?;
        for row in per_sample {
            for (bucket, c) in cos.iter_mut().zip(row) {
                bucket.push(c);
            }
        }
    }
    Ok(GccStrategy::ALL
        .iter()
        .zip(cos)
        .map(|(&strategy, values)| {
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let var = values.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>() / n;
            StrategyStats {
                strategy,
                mean_cos: mean,
                var_cos: var,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub strategy: GccStrategy,
    pub k: usize,
    pub seed: u64,
    pub verif_acc: f64,
    pub gcc_tcc_cos: f64,
    pub step_ms: Option<f64>,
}

/// Trains one AttFC model per `(strategy, k)` with otherwise identical
/// configs and reports final verification accuracy and GCC quality.
pub fn compare_strategies(cfg: &TrainConfig, grid: &[(GccStrategy, usize)]) -> Result<Vec<CompareRow>> {
    grid.iter()
        .map(|&(strategy, k)| {
            let run_cfg = TrainConfig {
                strategy,
                k,
                head: HeadMode::Attfc,
                ..cfg.clone()
            };
            let seed = run_cfg.seed;
            let (records, _) = train_attfc(run_cfg)?;
            let last_eval = records
                .iter()
                .rev()
                .find(|r| r.verif_acc.is_some())
                .ok_or_else(|| Error::Invalid("run produced no evaluation".into()))?;
            let timed: Vec<f64> = records.iter().filter_map(|r| r.step_ms).collect();
            Ok(CompareRow {
                strategy,
                k,
                seed,
                verif_acc: last_eval.verif_acc.unwrap_or_default(),
                gcc_tcc_cos: last_eval.gcc_tcc_cos.unwrap_or_default(),
                step_ms: (!timed.is_empty()).then(|| timed.iter().sum::<f64>() / timed.len() as f64),
            })
        })
        .collect()
}

/// Strategies at `k = 2`, then the attention strategy over `k ∈ {2, 3, 4, 5}`.
pub fn default_compare_grid() -> Vec<(GccStrategy, usize)> {
    let mut grid: Vec<(GccStrategy, usize)> = GccStrategy::ALL.iter().map(|&s| (s, 2)).collect();
    grid.extend([3, 4, 5].map(|k| (GccStrategy::Attention, k)));
    grid
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub identities: usize,
    pub slots: usize,
    pub fc_params: usize,
    pub dcc_params: usize,
    pub fc_bytes: usize,
    pub dcc_bytes: usize,
    /// `dcc_params / fc_params`
    pub ratio: f64,
}

/// Head sizes of the FC layer versus a container of `capacity(N, r, B)` slots.
pub fn bench_heads(
    identities: &[usize],
    ratio: f64,
    dim: usize,
    batch: usize,
    precision_bytes: usize,
) -> Result<Vec<BenchRow>> {
    identities
        .iter()
        .map(|&n| {
            let slots = capacity(n, ratio, batch)?;
            let fc = fc_head_params(dim, n);
            let dcc = dcc_head_params(dim, slots);
            Ok(BenchRow {
                identities: n,
                slots,
                fc_params: fc,
                dcc_params: dcc,
                fc_bytes: fc * precision_bytes,
                dcc_bytes: dcc * precision_bytes,
                ratio: dcc as f64 / fc as f64,
            })
        })
        .collect()
}
