//! Evaluation: confusion matrices and mIoU, optimal cluster-to-class
//! assignment, multi-label F1, and the pseudo-label replacement experiment.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::scalar::Scalar;

/// Rows are ground truth, columns are predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfusionMatrix {
    counts: Array2<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            counts: Array2::zeros((classes, classes)),
        }
    }

    pub fn add(&mut self, gt: usize, pred: usize) {
        self.counts[[gt, pred]] += 1;
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        self.counts += &other.counts;
    }

    pub fn counts(&self) -> &Array2<u64> {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.sum()
    }

    pub fn classes(&self) -> usize {
        self.counts.nrows()
    }
}

/// Mean intersection-over-union and the per-class vector. Classes with empty
/// union are excluded from the mean.
pub fn miou(cm: &ConfusionMatrix) -> Result<(f64, Vec<f64>)> {
    if cm.total() == 0 {
        return Err(invalid("confusion matrix is empty"));
    }
    let c = cm.classes();
    let mut per_class = vec![f64::NAN; c];
    let mut sum = 0.0;
    let mut used = 0usize;
    for k in 0..c {
        let tp = cm.counts[[k, k]];
        let fp: u64 = (0..c).filter(|&r| r != k).map(|r| cm.counts[[r, k]]).sum();
        let fn_: u64 = (0..c).filter(|&j| j != k).map(|j| cm.counts[[k, j]]).sum();
        let union = tp + fp + fn_;
        if union == 0 {
            continue;
        }
        let iou = tp as f64 / union as f64;
        per_class[k] = iou;
        sum += iou;
        used += 1;
    }
    if used == 0 {
        return Err(invalid("no class has a nonzero union"));
    }
    Ok((sum / used as f64, per_class))
}

/// Optimal bijection between cluster ids and class ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// `mapping[cluster] = class`.
    pub mapping: Vec<usize>,
    pub score: f64,
}

/// Maximum-score perfect matching on a square score matrix; among optimal
/// permutations the lexicographically smallest (row-major) is returned.
pub fn hungarian_match<F: Scalar>(score: &Array2<F>) -> Result<Assignment> {
    let (k, k2) = score.dim();
    if k != k2 {
        return Err(invalid(format!("score matrix must be square, got {k}x{k2}")));
    }
    if k == 0 {
        return Err(invalid("score matrix is empty"));
    }
    let s = score.mapv(|x| x.as_f64());
    let total = optimal_value(&s, &(0..k).collect::<Vec<_>>(), &(0..k).collect::<Vec<_>>());
    let tol = 1e-9 * total.abs().max(1.0);

    // Peel off rows in order, fixing the smallest column that still admits an
    // optimal completion; this realizes the lexicographic tie-break exactly.
    let mut cols: Vec<usize> = (0..k).collect();
    let mut mapping = vec![0usize; k];
    let mut acc = 0.0;
    for i in 0..k {
        let rows: Vec<usize> = (i + 1..k).collect();
        let mut chosen = None;
        for (ci, &j) in cols.iter().enumerate() {
            let rest_cols: Vec<usize> = cols
                .iter()
                .enumerate()
                .filter(|(x, _)| *x != ci)
                .map(|(_, &c)| c)
                .collect();
            let rest = optimal_value(&s, &rows, &rest_cols);
            if (acc + s[[i, j]] + rest - total).abs() <= tol {
                chosen = Some((ci, j));
                break;
            }
        }
        let (ci, j) = chosen.expect("an optimal completion always exists");
        mapping[i] = j;
        acc += s[[i, j]];
        cols.remove(ci);
    }
    Ok(Assignment {
        mapping,
        score: acc,
    })
}

/// Pads a rectangular score matrix with zero rows/columns into a square one
/// and matches; entries mapping to padding are dropped from the result.
pub fn hungarian_match_padded<F: Scalar>(score: &Array2<F>) -> Result<Vec<Option<usize>>> {
    let (r, c) = score.dim();
    let k = r.max(c);
    let mut padded = Array2::<F>::zeros((k, k));
    padded.slice_mut(ndarray::s![..r, ..c]).assign(score);
    let a = hungarian_match(&padded)?;
    Ok((0..r)
        .map(|i| {
            let j = a.mapping[i];
            (j < c).then_some(j)
        })
        .collect())
}

/// O(n³) assignment on the sub-problem given by `rows` × `cols` (must be the
/// same length), maximizing the total score.
fn optimal_value(s: &Array2<f64>, rows: &[usize], cols: &[usize]) -> f64 {
    let n = rows.len();
    debug_assert_eq!(n, cols.len());
    if n == 0 {
        return 0.0;
    }
    // Classic potentials formulation on the negated (minimization) matrix.
    let cost = |i: usize, j: usize| -s[[rows[i], cols[j]]];
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1]; // p[j] = row matched to column j (1-based)
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut total = 0.0;
    for j in 1..=n {
        total += s[[rows[p[j] - 1], cols[j - 1]]];
    }
    total
}

/// Micro and macro F1 over per-image label sets. Macro excludes classes with
/// no ground-truth and no predicted occurrences.
pub fn f1_scores(pred_sets: &[Vec<usize>], gt_sets: &[Vec<usize>]) -> Result<(f64, f64)> {
    if pred_sets.len() != gt_sets.len() {
        return Err(invalid(format!(
            "image count mismatch: {} vs {}",
            pred_sets.len(),
            gt_sets.len()
        )));
    }
    let classes = pred_sets
        .iter()
        .chain(gt_sets.iter())
        .flat_map(|s| s.iter())
        .max()
        .map_or(0, |&m| m + 1);
    let mut tp = vec![0u64; classes];
    let mut fp = vec![0u64; classes];
    let mut fn_ = vec![0u64; classes];
    for (pred, gt) in pred_sets.iter().zip(gt_sets.iter()) {
        for &c in pred {
            if gt.contains(&c) {
                tp[c] += 1;
            } else {
                fp[c] += 1;
            }
        }
        for &c in gt {
            if !pred.contains(&c) {
                fn_[c] += 1;
            }
        }
    }
    let tp_sum: u64 = tp.iter().sum();
    let fp_sum: u64 = fp.iter().sum();
    let fn_sum: u64 = fn_.iter().sum();
    let micro = f1_from(tp_sum, fp_sum, fn_sum);
    let mut macro_sum = 0.0;
    let mut macro_n = 0usize;
    for c in 0..classes {
        if tp[c] + fp[c] + fn_[c] == 0 {
            continue;
        }
        macro_sum += f1_from(tp[c], fp[c], fn_[c]);
        macro_n += 1;
    }
    let macro_f1 = if macro_n == 0 {
        0.0
    } else {
        macro_sum / macro_n as f64
    };
    Ok((micro, macro_f1))
}

fn f1_from(tp: u64, fp: u64, fn_: u64) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// Replaces exactly round(β·T) label sets (chosen by a seeded shuffle) with
/// their pseudo counterparts.
pub fn beta_mix(
    gt_labels: &[Vec<usize>],
    pseudo_labels: &[Vec<usize>],
    beta: f64,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(invalid(format!("beta must lie in [0,1], got {beta}")));
    }
    if gt_labels.len() != pseudo_labels.len() {
        return Err(invalid("label lists differ in length"));
    }
    let t = gt_labels.len();
    let replace = (beta * t as f64).round() as usize;
    let mut order: Vec<usize> = (0..t).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut out = gt_labels.to_vec();
    for &i in order.iter().take(replace) {
        out[i] = pseudo_labels[i].clone();
    }
    Ok(out)
}
