//! Independent reference implementations used as test oracles, plus a
//! randomized driver for the context memory. The oracles favour obviousness
//! over speed and share no code with the library.
#![allow(dead_code)]

use mnp_core::data::MultimodalBatch;
use mnp_core::memory::{ContextMemory, UpdateKind, UpdateScope, UpdateStrategy};
use mnp_core::tensor::Tensor;
use rand::Rng;

/// Simplex projection by trying every nonempty support: for support `S` the
/// threshold is `tau = (sum_S z - 1) / |S|`, and `S` is the answer when it is
/// exactly the set of coordinates above `tau`.
pub fn sparsemax_oracle(z: &[f64]) -> Vec<f64> {
    let d = z.len();
    assert!((1..=20).contains(&d));
    for mask in 1u32..(1 << d) {
        let members: Vec<usize> = (0..d).filter(|&i| mask & (1 << i) != 0).collect();
        let tau = (members.iter().map(|&i| z[i]).sum::<f64>() - 1.0) / members.len() as f64;
        let consistent = (0..d).all(|i| {
            let inside = mask & (1 << i) != 0;
            if inside {
                z[i] > tau
            } else {
                z[i] <= tau
            }
        });
        if consistent {
            return z.iter().map(|&v| (v - tau).max(0.0)).collect();
        }
    }
    unreachable!("some support is always consistent")
}

/// Support of a probability row: indices with positive mass.
pub fn support(p: &[f64]) -> Vec<usize> {
    (0..p.len()).filter(|&i| p[i] > 0.0).collect()
}

/// Precision-weighted Gaussian fusion, one scalar at a time.
/// `parts[m] = (r, s, u, q)` as flat row-major slices of equal length.
pub fn fusion_oracle(parts: &[(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)]) -> (Vec<f64>, Vec<f64>) {
    let n = parts[0].0.len();
    let mut mean = vec![0.0; n];
    let mut var = vec![0.0; n];
    for k in 0..n {
        let mut precision = 0.0;
        let mut info = 0.0;
        for (r, s, u, q) in parts {
            precision += 1.0 / s[k] + 1.0 / q[k];
            info += r[k] / s[k] + u[k] / q[k];
        }
        var[k] = 1.0 / precision;
        mean[k] = info / precision;
    }
    (mean, var)
}

/// Fraction of (ID, OOD) pairs where the OOD score is larger, ties counting
/// one half.
pub fn auroc_oracle(id: &[f64], ood: &[f64]) -> f64 {
    let mut wins = 0.0;
    for &a in id {
        for &b in ood {
            if b > a {
                wins += 1.0;
            } else if b == a {
                wins += 0.5;
            }
        }
    }
    wins / (id.len() * ood.len()) as f64
}

/// Error of one target: squared error or cross-entropy summed over classes.
pub fn target_error(ce: bool, truth: &[f64], pred: &[f64]) -> f64 {
    truth
        .iter()
        .zip(pred)
        .map(|(&t, &p)| if ce { -t * p.max(1e-12).ln() } else { (t - p) * (t - p) })
        .sum()
}

/// Brute-force choice of `(slot, target)` for one class partition: over every
/// pair, the least mean attention slot and the largest-error same-class target,
/// ties going to the lower index.
///
/// `attention` is `n x slots` (this partition only), `errors[j]` is the error
/// of target `j`, and `eligible[j]` says whether target `j` has this class.
pub fn replacement_oracle(attention: &[Vec<f64>], errors: &[f64], eligible: &[bool]) -> Option<(usize, usize)> {
    let n = attention.len();
    let slots = attention[0].len();
    let col_mean = |c: usize| attention.iter().map(|row| row[c]).sum::<f64>() / n as f64;
    let mut best: Option<(usize, usize)> = None;
    for s in 0..slots {
        for j in 0..errors.len() {
            if !eligible[j] {
                continue;
            }
            // Pairs are visited in increasing index order, so only strict
            // improvements replace the incumbent.
            let better = match best {
                None => true,
                Some((bs, bj)) => col_mean(s) < col_mean(bs) || (s == bs && errors[j] > errors[bj]),
            };
            if better {
                best = Some((s, j));
            }
        }
    }
    best
}

/// Outcome of a randomized memory run.
#[derive(Debug, Default)]
pub struct DcmRun {
    pub updates: usize,
    /// Updates after which some partition held a row of another class.
    pub balance_violations: usize,
    /// Updates whose resulting memory differs from the brute-force oracle.
    pub oracle_mismatches: usize,
    /// Frozen or random updates that changed the memory.
    pub static_changes: usize,
}

/// Features whose first column is the label, so the class of every stored
/// row can be read back from the memory itself.
fn labelled_rows(rng: &mut impl Rng, labels: &[usize], dims: &[usize]) -> Vec<Tensor> {
    dims.iter()
        .map(|&d| {
            let mut t = Tensor::zeros(&[labels.len(), d]);
            for (i, &y) in labels.iter().enumerate() {
                t.set(i, 0, y as f64);
                for j in 1..d {
                    t.set(i, j, rng.random_range(-1.0..1.0));
                }
            }
            t
        })
        .collect()
}

/// Values on a coarse grid so that ties actually happen.
fn coarse(rng: &mut impl Rng, n: usize, cols: usize) -> Tensor {
    let data = (0..n * cols).map(|_| rng.random_range(0..5) as f64 / 4.0).collect();
    Tensor::matrix(n, cols, data).unwrap()
}

fn expected_after(
    memory: &ContextMemory,
    fifo: &mut [Vec<usize>],
    batch: &MultimodalBatch,
    attention: &[Tensor],
    predictions: &[Tensor],
    kind: UpdateKind,
) -> Vec<Tensor> {
    let (k, pc) = (memory.num_classes(), memory.per_class());
    let labels = batch.labels();
    let truth = batch.one_hot();
    let mut out: Vec<Tensor> = (0..memory.num_modalities()).map(|m| memory.features(m).clone()).collect();
    for (m, slots) in out.iter_mut().enumerate() {
        for class in 0..k {
            let eligible: Vec<bool> = labels.iter().map(|&y| y == class).collect();
            let choice = match kind {
                UpdateKind::Fifo => (0..labels.len()).rev().find(|&j| eligible[j]).map(|j| {
                    let slot = fifo[m][class];
                    fifo[m][class] = (slot + 1) % pc;
                    (slot, j)
                }),
                UpdateKind::Mse | UpdateKind::Ce => {
                    let block: Vec<Vec<f64>> = (0..batch.len())
                        .map(|i| attention[m].row_slice(i)[class * pc..(class + 1) * pc].to_vec())
                        .collect();
                    let errors: Vec<f64> = (0..batch.len())
                        .map(|j| target_error(kind == UpdateKind::Ce, truth.row_slice(j), predictions[m].row_slice(j)))
                        .collect();
                    replacement_oracle(&block, &errors, &eligible)
                }
                UpdateKind::Frozen | UpdateKind::Random => None,
            };
            if let Some((slot, j)) = choice {
                slots.row_slice_mut(class * pc + slot).copy_from_slice(batch.features()[m].row_slice(j));
            }
        }
    }
    out
}

/// Runs `updates` randomized class-consistent updates with batches of 1 to 8
/// targets, checking class balance after each and comparing every MSE, CE and
/// FIFO update against the oracle. Frozen and random updates must leave the
/// memory bitwise unchanged.
pub fn run_dcm(rng: &mut impl Rng, updates: usize) -> DcmRun {
    let (k, pc) = (3, 4);
    let dims = [3, 2];
    let init_labels: Vec<usize> = (0..k * pc).map(|r| r / pc).collect();
    let slots = labelled_rows(rng, &init_labels, &dims);
    let mut memory = ContextMemory::from_parts(k, pc, slots, vec![vec![0; k]; dims.len()]).unwrap();
    let mut fifo = vec![vec![0; k]; dims.len()];
    let kinds = [UpdateKind::Mse, UpdateKind::Ce, UpdateKind::Fifo, UpdateKind::Frozen, UpdateKind::Random];
    let mut run = DcmRun::default();
    for _ in 0..updates {
        let n = rng.random_range(1..=8);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let batch = MultimodalBatch::new(labelled_rows(rng, &labels, &dims), labels, k).unwrap();
        let attention: Vec<Tensor> = dims.iter().map(|_| coarse(rng, n, k * pc)).collect();
        let predictions: Vec<Tensor> = dims.iter().map(|_| coarse(rng, n, k)).collect();
        let kind = kinds[rng.random_range(0..kinds.len())];
        let before = memory.clone();
        let expected = expected_after(&memory, &mut fifo, &batch, &attention, &predictions, kind);
        let strategy = UpdateStrategy {
            kind,
            scope: UpdateScope::ClassConsistent,
        };
        memory.update(&batch, &attention, &predictions, strategy).unwrap();
        run.updates += 1;
        let actual: Vec<Tensor> = (0..dims.len()).map(|m| memory.features(m).clone()).collect();
        if actual != expected {
            run.oracle_mismatches += 1;
        }
        if matches!(kind, UpdateKind::Frozen | UpdateKind::Random) && memory != before {
            run.static_changes += 1;
        }
        let balanced = actual
            .iter()
            .all(|t| (0..k * pc).all(|r| t.get(r, 0) == (r / pc) as f64));
        if !balanced {
            run.balance_violations += 1;
        }
    }
    run
}
