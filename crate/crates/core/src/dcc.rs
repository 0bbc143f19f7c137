//! Dynamic Class Container: a fixed-capacity FIFO queue of labeled class
//! centers standing in for the FC weight matrix, plus conflict masking.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{l2_normalize, softmax, Mat, MASK};
use crate::similarity::{check_unit, logits, MarginConfig};

/// Identity label.
pub type Label = usize;

/// Largest multiple of `batch` not exceeding `ratio · identities`.
pub fn capacity(identities: usize, ratio: f64, batch: usize) -> Result<usize> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Invalid(format!("size ratio must lie in (0, 1], got {ratio}")));
    }
    if batch == 0 {
        return Err(Error::Invalid("batch size must be >= 1".into()));
    }
    // slack absorbs r·N landing a hair below an exact multiple
    let batches = (ratio * identities as f64 / batch as f64 + 1e-9).floor() as usize;
    if batches == 0 {
        return Err(Error::RatioTooSmall {
            ratio,
            identities,
            batch,
        });
    }
    Ok(batches * batch)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DccState {
    /// One center per row, `S × D`.
    centers: Mat,
    labels: Vec<Option<Label>>,
    cursor: usize,
    /// Number of completed enqueues.
    enqueues: u64,
    /// Enqueue index that last wrote each slot (`None` for initial noise).
    written_at: Vec<Option<u64>>,
}

impl DccState {
    /// Columns drawn i.i.d. standard normal, then L2-normalized.
    pub fn new(dim: usize, capacity: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Invalid("feature dimension must be >= 1".into()));
        }
        if capacity < 2 {
            return Err(Error::Invalid(format!(
                "container capacity must be >= 2 to leave a negative, got {capacity}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut centers = Mat::zeros(capacity, dim);
        for slot in 0..capacity {
            // a zero draw has probability zero; redraw to stay total
            let unit = loop {
                let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                if let Ok(u) = l2_normalize(&v) {
                    break u;
                }
            };
            centers.row_mut(slot).copy_from_slice(&unit);
        }
        Ok(Self {
            centers,
            labels: vec![None; capacity],
            cursor: 0,
            enqueues: 0,
            written_at: vec![None; capacity],
        })
    }

    pub fn capacity(&self) -> usize {
        self.centers.rows()
    }

    pub fn dim(&self) -> usize {
        self.centers.cols()
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn enqueues(&self) -> u64 {
        self.enqueues
    }

    pub fn centers(&self) -> &Mat {
        &self.centers
    }

    pub fn center(&self, slot: usize) -> &[f64] {
        self.centers.row(slot)
    }

    pub fn labels(&self) -> &[Option<Label>] {
        &self.labels
    }

    pub fn label(&self, slot: usize) -> Option<Label> {
        self.labels[slot]
    }

    pub fn written_at(&self, slot: usize) -> Option<u64> {
        self.written_at[slot]
    }

    pub fn assigned_slots(&self) -> usize {
        self.labels.iter().filter(|l| l.is_some()).count()
    }

    /// Overwrites the `B` oldest slots starting at the cursor. Returns the
    /// slots written, in row order of `gccs`.
    pub fn enqueue_batch(&mut self, gccs: &Mat, labels: &[Label]) -> Result<Vec<usize>> {
        let batch = gccs.rows();
        if gccs.cols() != self.dim() {
            return Err(Error::shape(format!("GCC width {}", self.dim()), gccs.cols()));
        }
        if labels.len() != batch {
            return Err(Error::shape(format!("{batch} labels"), labels.len()));
        }
        if batch == 0 || batch > self.capacity() || !self.capacity().is_multiple_of(batch) {
            return Err(Error::Invalid(format!(
                "batch of {batch} must be >= 1 and divide capacity {}",
                self.capacity()
            )));
        }
        for row in gccs.iter_rows() {
            check_unit(row)?;
        }
        let s = self.capacity();
        let slots: Vec<usize> = (0..batch).map(|i| (self.cursor + i) % s).collect();
        for ((row, &label), &slot) in gccs.iter_rows().zip(labels).zip(&slots) {
            self.centers.row_mut(slot).copy_from_slice(row);
            self.labels[slot] = Some(label);
            self.written_at[slot] = Some(self.enqueues);
        }
        self.cursor = (self.cursor + batch) % s;
        self.enqueues += 1;
        Ok(slots)
    }

    /// Slots other than `own_slot` that carry `label`.
    pub fn find_conflicts(&self, label: Label, own_slot: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|&(slot, l)| slot != own_slot && *l == Some(label))
            .map(|(slot, _)| slot)
            .collect()
    }

    pub fn slots_with_label(&self, label: Label) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, l)| **l == Some(label))
            .map(|(slot, _)| slot)
            .collect()
    }

    pub fn masked_probabilities(
        &self,
        feature: &[f64],
        positive_slot: usize,
        conflict_slots: &[usize],
        cfg: &MarginConfig,
    ) -> Result<Vec<f64>> {
        masked_probabilities(&self.centers, feature, positive_slot, conflict_slots, cfg)
    }
}

/// Logits against every row of `centers`, with the conflict slots set to −∞
/// before the softmax.
pub fn masked_probabilities(
    centers: &Mat,
    feature: &[f64],
    positive_slot: usize,
    conflict_slots: &[usize],
    cfg: &MarginConfig,
) -> Result<Vec<f64>> {
    if conflict_slots.contains(&positive_slot) {
        return Err(Error::PositiveMasked(positive_slot));
    }
    let mut z = logits(feature, centers, Some(positive_slot), cfg)?;
    for &slot in conflict_slots {
        if slot >= z.len() {
            return Err(Error::Index {
                index: slot,
                len: z.len(),
            });
        }
        z[slot] = MASK;
    }
    softmax(&z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::norm;
    use crate::similarity::MarginConfig;
    use approx::assert_abs_diff_eq;

    #[test]
    fn capacity_reproduces_table_rows() {
        assert_eq!(capacity(93431, 0.3, 384).unwrap(), 27648);
        assert_eq!(capacity(411980, 0.1, 384).unwrap(), 41088);
        assert_eq!(capacity(1029950, 0.3, 384).unwrap(), 308736);
    }

    #[test]
    fn capacity_errors() {
        assert!(matches!(capacity(100, 0.3, 384), Err(Error::RatioTooSmall { .. })));
        assert!(capacity(100, 0.0, 10).is_err());
        assert!(capacity(100, 1.5, 10).is_err());
        assert!(capacity(100, 0.5, 0).is_err());
        assert_eq!(capacity(1280, 0.3, 384).unwrap(), 384);
    }

    #[test]
    fn init_is_deterministic_and_normalized() {
        let a = DccState::new(4, 8, 7).unwrap();
        let b = DccState::new(4, 8, 7).unwrap();
        assert_eq!(a, b);
        for slot in 0..8 {
            assert_abs_diff_eq!(norm(a.center(slot)), 1.0, epsilon = 1e-12);
        }
        assert!(a.labels().iter().all(Option::is_none));
        assert_eq!(a.cursor(), 0);
        assert_ne!(a, DccState::new(4, 8, 8).unwrap());
        assert!(DccState::new(4, 1, 0).is_err());
    }

    fn unit_rows(n: usize, d: usize, offset: usize) -> Mat {
        let mut m = Mat::zeros(n, d);
        for i in 0..n {
            m[(i, (i + offset) % d)] = 1.0;
        }
        m
    }

    #[test]
    fn fifo_order() {
        let mut dcc = DccState::new(3, 4, 1).unwrap();
        assert_eq!(dcc.enqueue_batch(&unit_rows(2, 3, 0), &[10, 11]).unwrap(), vec![0, 1]);
        assert_eq!(dcc.enqueue_batch(&unit_rows(2, 3, 1), &[12, 13]).unwrap(), vec![2, 3]);
        assert_eq!(dcc.assigned_slots(), 4);
        assert_eq!(dcc.labels(), &[Some(10), Some(11), Some(12), Some(13)]);
        let third = unit_rows(2, 3, 2);
        assert_eq!(dcc.enqueue_batch(&third, &[14, 15]).unwrap(), vec![0, 1]);
        assert_eq!(dcc.labels(), &[Some(14), Some(15), Some(12), Some(13)]);
        assert_eq!(dcc.cursor(), 2);
        // slot cursor - B holds the row just written
        assert_eq!(dcc.center(0), third.row(0));
    }

    #[test]
    fn enqueue_rejects_bad_shapes() {
        let mut dcc = DccState::new(3, 4, 1).unwrap();
        assert!(dcc.enqueue_batch(&unit_rows(2, 2, 0), &[1, 2]).is_err());
        assert!(dcc.enqueue_batch(&unit_rows(2, 3, 0), &[1]).is_err());
        assert!(dcc.enqueue_batch(&unit_rows(3, 3, 0), &[1, 2, 3]).is_err());
        let mut not_unit = unit_rows(2, 3, 0);
        not_unit[(0, 0)] = 2.0;
        assert!(dcc.enqueue_batch(&not_unit, &[1, 2]).is_err());
    }

    #[test]
    fn conflicts() {
        let mut dcc = DccState::new(3, 6, 1).unwrap();
        dcc.enqueue_batch(&unit_rows(2, 3, 0), &[1, 2]).unwrap();
        assert!(dcc.find_conflicts(1, 0).is_empty());
        dcc.enqueue_batch(&unit_rows(2, 3, 0), &[1, 3]).unwrap();
        dcc.enqueue_batch(&unit_rows(2, 3, 0), &[4, 1]).unwrap();
        assert_eq!(dcc.find_conflicts(1, 5), vec![0, 2]);
        assert_eq!(dcc.find_conflicts(1, 0), vec![2, 5]);
        assert!(!dcc.find_conflicts(1, 2).contains(&2));
    }

    #[test]
    fn masked_probability_examples() {
        let centers = Mat::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let f = [1.0, 0.0];
        let cfg = MarginConfig::plain();
        let p = masked_probabilities(&centers, &f, 0, &[2], &cfg).unwrap();
        assert_eq!(p, vec![0.5, 0.5, 0.0]);
        let p = masked_probabilities(&centers, &f, 1, &[0, 2], &cfg).unwrap();
        assert_eq!(p, vec![0.0, 1.0, 0.0]);
        let masked = masked_probabilities(&centers, &f, 1, &[], &cfg).unwrap();
        let plain = softmax(&logits(&f, &centers, Some(1), &cfg).unwrap()).unwrap();
        assert_eq!(masked, plain);
        assert!(matches!(
            masked_probabilities(&centers, &f, 1, &[1], &cfg),
            Err(Error::PositiveMasked(1))
        ));
    }
}
