//! Dynamic context memory: a class-partitioned store of training rows per
//! modality that serves as the context set.
//!
//! Rows of modality `m` are laid out class-major: partition `k` occupies rows
//! `k * per_class .. (k + 1) * per_class` and every row in it is labelled `k`.

use mnp_tensor::Tensor;
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::MultimodalBatch;
use crate::error::{MnpError, Result};

const CE_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum UpdateKind {
    #[default]
    Mse,
    Ce,
    Fifo,
    Random,
    Frozen,
}

/// Which targets compete for a class partition.
///
/// `ClassConsistent` only considers targets labelled `k` for partition `k`.
/// `Literal` picks one target from the whole batch and writes it into every
/// partition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum UpdateScope {
    #[default]
    ClassConsistent,
    Literal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct UpdateStrategy {
    pub kind: UpdateKind,
    pub scope: UpdateScope,
}

/// Per-target error used to pick the most informative target.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Mse,
    Ce,
}

/// One slot overwrite performed by [`ContextMemory::update`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Replacement {
    pub modality: usize,
    pub class: usize,
    /// Slot index within the class partition.
    pub slot: usize,
    /// Row index of the target in the batch.
    pub target: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContextMemory {
    num_classes: usize,
    per_class: usize,
    slots: Vec<Tensor>,
    fifo_next: Vec<Vec<usize>>,
}

fn per_target_error(kind: ErrorKind, truth: &[f64], pred: &[f64]) -> f64 {
    let k = truth.len() as f64;
    let total = truth.iter().zip(pred).fold(0.0, |acc, (&t, &p)| {
        acc + match kind {
            ErrorKind::Mse => (t - p) * (t - p),
            ErrorKind::Ce => -t * p.max(CE_CLAMP).ln(),
        }
    });
    total / k
}

/// Slot with the smallest mean attention over targets; lowest index on ties.
pub fn least_attended_slot(a_k: &Tensor) -> usize {
    let (n, m) = (a_k.rows(), a_k.cols());
    let mut best = 0;
    let mut best_val = f64::INFINITY;
    for c in 0..m {
        let mean = (0..n).fold(0.0, |acc, i| acc + a_k.get(i, c)) / n as f64;
        if mean < best_val {
            best_val = mean;
            best = c;
        }
    }
    best
}

/// Candidate target with the largest error; lowest index on ties.
pub fn hardest_target(
    truth: &Tensor,
    pred: &Tensor,
    kind: ErrorKind,
    candidates: impl IntoIterator<Item = usize>,
) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for j in candidates {
        let e = per_target_error(kind, truth.row_slice(j), pred.row_slice(j));
        if best.is_none_or(|(_, b)| e > b) {
            best = Some((j, e));
        }
    }
    best.map(|(j, _)| j)
}

/// `(i*, j*)`: least-attended slot of `a_k` and highest-error target over the whole batch.
pub fn select_replacement(a_k: &Tensor, truth: &Tensor, pred: &Tensor, kind: ErrorKind) -> Result<(usize, usize)> {
    if truth.rows() == 0 || a_k.rows() == 0 {
        return Err(MnpError::Contract("empty target batch".into()));
    }
    if truth.shape() != pred.shape() || a_k.rows() != truth.rows() {
        return Err(MnpError::Contract(format!(
            "attention {:?}, labels {:?}, predictions {:?}",
            a_k.shape(),
            truth.shape(),
            pred.shape()
        )));
    }
    let i = least_attended_slot(a_k);
    let j = hardest_target(truth, pred, kind, 0..truth.rows()).expect("nonempty batch");
    Ok((i, j))
}

impl ContextMemory {
    /// Samples `per_class` rows of each class without replacement. The same
    /// sample indices are used for every modality.
    pub fn init_random(train: &MultimodalBatch, per_class: usize, rng: &mut impl Rng) -> Result<Self> {
        if per_class == 0 {
            return Err(MnpError::Config("per-class memory size must be positive".into()));
        }
        let k = train.num_classes();
        let mut chosen = Vec::with_capacity(k * per_class);
        for class in 0..k {
            let members: Vec<usize> = (0..train.len()).filter(|&i| train.labels()[i] == class).collect();
            if members.len() < per_class {
                return Err(MnpError::MemoryInit {
                    class,
                    available: members.len(),
                    needed: per_class,
                });
            }
            let mut picks: Vec<usize> = sample(rng, members.len(), per_class).into_iter().collect();
            picks.sort_unstable();
            chosen.extend(picks.into_iter().map(|p| members[p]));
        }
        let slots = train.features().iter().map(|f| f.select_rows(&chosen)).collect();
        Ok(Self {
            num_classes: k,
            per_class,
            fifo_next: vec![vec![0; k]; train.num_modalities()],
            slots,
        })
    }

    pub fn from_parts(num_classes: usize, per_class: usize, slots: Vec<Tensor>, fifo_next: Vec<Vec<usize>>) -> Result<Self> {
        let n = num_classes * per_class;
        if slots.iter().any(|s| !s.is_matrix() || s.rows() != n) {
            return Err(MnpError::Contract(format!("memory blocks must have {n} rows")));
        }
        if fifo_next.len() != slots.len()
            || fifo_next.iter().any(|f| f.len() != num_classes || f.iter().any(|&p| p >= per_class))
        {
            return Err(MnpError::Contract("invalid FIFO pointers".into()));
        }
        Ok(Self {
            num_classes,
            per_class,
            slots,
            fifo_next,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn per_class(&self) -> usize {
        self.per_class
    }

    /// Total slots per modality.
    pub fn size(&self) -> usize {
        self.num_classes * self.per_class
    }

    pub fn num_modalities(&self) -> usize {
        self.slots.len()
    }

    /// `C^m_X`, all partitions stacked class-major.
    pub fn features(&self, m: usize) -> &Tensor {
        &self.slots[m]
    }

    pub fn fifo_pointers(&self) -> &[Vec<usize>] {
        &self.fifo_next
    }

    /// Class of every memory row.
    pub fn row_classes(&self) -> Vec<usize> {
        (0..self.size()).map(|r| r / self.per_class).collect()
    }

    /// `C^m_Y`: one-hot labels, identical for every modality.
    pub fn labels_one_hot(&self) -> Tensor {
        let mut t = Tensor::zeros(&[self.size(), self.num_classes]);
        for (r, c) in self.row_classes().into_iter().enumerate() {
            t.set(r, c, 1.0);
        }
        t
    }

    pub fn partition(&self, m: usize, class: usize) -> Tensor {
        let start = class * self.per_class;
        self.slots[m].slice_rows(start, start + self.per_class)
    }

    /// Columns of `attention` belonging to partition `class`.
    fn attention_block(&self, attention: &Tensor, class: usize) -> Tensor {
        let n = attention.rows();
        let start = class * self.per_class;
        let mut data = Vec::with_capacity(n * self.per_class);
        for i in 0..n {
            data.extend_from_slice(&attention.row_slice(i)[start..start + self.per_class]);
        }
        Tensor::matrix(n, self.per_class, data).expect("attention block")
    }

    fn write(&mut self, m: usize, class: usize, slot: usize, row: &[f64]) {
        let r = class * self.per_class + slot;
        self.slots[m].row_slice_mut(r).copy_from_slice(row);
    }

    /// Applies one update after an optimiser step.
    ///
    /// `attention[m]` is `A(T^m_X, C^m_X)` (`N_T x N^m`) and `predictions[m]`
    /// is the unimodal predictive probability for modality `m`, both from the
    /// forward pass of the same mini-batch.
    pub fn update(
        &mut self,
        batch: &MultimodalBatch,
        attention: &[Tensor],
        predictions: &[Tensor],
        strategy: UpdateStrategy,
    ) -> Result<Vec<Replacement>> {
        let error_kind = match strategy.kind {
            UpdateKind::Random | UpdateKind::Frozen => return Ok(Vec::new()),
            UpdateKind::Fifo => return Ok(self.update_fifo(batch)),
            UpdateKind::Mse => ErrorKind::Mse,
            UpdateKind::Ce => ErrorKind::Ce,
        };
        if batch.is_empty() {
            return Ok(Vec::new());
        }
        if attention.len() != self.num_modalities() || predictions.len() != self.num_modalities() {
            return Err(MnpError::Contract("one attention matrix and prediction per modality required".into()));
        }
        let truth = batch.one_hot();
        let labels = batch.labels();
        let mut log = Vec::new();
        for m in 0..self.num_modalities() {
            if attention[m].shape() != [batch.len(), self.size()] || predictions[m].shape() != truth.shape() {
                return Err(MnpError::Contract(format!(
                    "modality {m}: attention {:?}, predictions {:?}",
                    attention[m].shape(),
                    predictions[m].shape()
                )));
            }
            let global = match strategy.scope {
                UpdateScope::Literal => hardest_target(&truth, &predictions[m], error_kind, 0..batch.len()),
                UpdateScope::ClassConsistent => None,
            };
            for class in 0..self.num_classes {
                let target = match strategy.scope {
                    UpdateScope::Literal => global,
                    UpdateScope::ClassConsistent => hardest_target(
                        &truth,
                        &predictions[m],
                        error_kind,
                        (0..batch.len()).filter(|&j| labels[j] == class),
                    ),
                };
                let Some(target) = target else { continue };
                let slot = least_attended_slot(&self.attention_block(&attention[m], class));
                let row = batch.features()[m].row_slice(target).to_vec();
                self.write(m, class, slot, &row);
                log.push(Replacement {
                    modality: m,
                    class,
                    slot,
                    target,
                });
            }
        }
        Ok(log)
    }

    // The most recent same-class target of the batch replaces the oldest slot.
    fn update_fifo(&mut self, batch: &MultimodalBatch) -> Vec<Replacement> {
        let mut log = Vec::new();
        for class in 0..self.num_classes {
            let Some(target) = (0..batch.len()).rev().find(|&j| batch.labels()[j] == class) else {
                continue;
            };
            for m in 0..self.num_modalities() {
                let slot = self.fifo_next[m][class];
                let row = batch.features()[m].row_slice(target).to_vec();
                self.write(m, class, slot, &row);
                self.fifo_next[m][class] = (slot + 1) % self.per_class;
                log.push(Replacement {
                    modality: m,
                    class,
                    slot,
                    target,
                });
            }
        }
        log
    }
}
