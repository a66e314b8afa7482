//! The class-area distribution: initialization from dataset frequencies,
//! per-image densities, the epoch-level EMA update, batch rescaling into the
//! transport column marginal, and divergence tracking.

use ndarray::Array1;

use crate::error::{invalid, shape_mismatch, Result};
use crate::measure::{DiscreteMeasure, MeasureRole};
use crate::ot::PredictionMatrix;
use crate::scalar::Scalar;

/// Slowly updated class-area estimate with its epoch counter and momentum.
///
/// Both network branches read one shared instance; there is deliberately no
/// per-branch copy, so the two branches' area bookkeeping cannot diverge.
#[derive(Clone, Debug, PartialEq)]
pub struct AreaState<F: Scalar> {
    pub a_tilde: DiscreteMeasure<F>,
    pub epoch: usize,
    pub gamma: F,
}

/// Relative class frequencies in the dataset and in the current batch.
#[derive(Clone, Debug)]
pub struct ClassFrequencies<F: Scalar> {
    pub nu_d: DiscreteMeasure<F>,
    /// Batch frequencies; zero for absent classes, entries in [0, 1].
    pub nu_b: Array1<F>,
}

/// Per-image class density: the mean of the image's prediction rows.
#[derive(Clone, Debug)]
pub struct ImageDensity<F: Scalar> {
    pub q: DiscreteMeasure<F>,
}

/// Area state at epoch zero equals the dataset class frequencies.
pub fn init_area<F: Scalar>(nu_d: DiscreteMeasure<F>, gamma: F) -> Result<AreaState<F>> {
    if gamma < F::zero() || gamma > F::one() {
        return Err(invalid(format!("gamma must lie in [0,1], got {gamma}")));
    }
    Ok(AreaState {
        a_tilde: nu_d,
        epoch: 0,
        gamma,
    })
}

/// Mean over the K patch rows of one image's predictions.
pub fn image_density<F: Scalar>(p_image: &PredictionMatrix<F>) -> Result<ImageDensity<F>> {
    let k = F::of(p_image.n_patches() as f64);
    let mut q = Array1::<F>::zeros(p_image.n_classes());
    for row in p_image.values().outer_iter() {
        q = q + &row;
    }
    q = q / k;
    Ok(ImageDensity {
        q: DiscreteMeasure::new(q, MeasureRole::AreaState)?,
    })
}

/// One EMA step: ã_m = (1−γ)·ã_{m−1} + γ·mean_density, epoch incremented.
pub fn ema_update<F: Scalar>(
    state: &AreaState<F>,
    mean_density: &DiscreteMeasure<F>,
    gamma: F,
) -> Result<AreaState<F>> {
    if gamma < F::zero() || gamma > F::one() {
        return Err(invalid(format!("gamma must lie in [0,1], got {gamma}")));
    }
    if mean_density.len() != state.a_tilde.len() {
        return Err(shape_mismatch(
            format!("{} classes", state.a_tilde.len()),
            format!("{} classes", mean_density.len()),
        ));
    }
    let updated = state
        .a_tilde
        .weights()
        .iter()
        .zip(mean_density.weights().iter())
        .map(|(&a, &d)| (F::one() - gamma) * a + gamma * d)
        .collect::<Array1<F>>();
    Ok(AreaState {
        a_tilde: DiscreteMeasure::new(updated, MeasureRole::AreaState)?,
        epoch: state.epoch + 1,
        gamma,
    })
}

/// Rescales the area estimate by the batch-to-dataset frequency ratio:
/// α ∝ (ν_b/ν_D)·ã elementwise, normalized to unit mass. Classes absent from
/// the batch get exactly zero mass.
pub fn batch_rescale<F: Scalar>(
    a_tilde: &DiscreteMeasure<F>,
    nu_b: &Array1<F>,
    nu_d: &DiscreteMeasure<F>,
) -> Result<DiscreteMeasure<F>> {
    let c = a_tilde.len();
    if nu_b.len() != c || nu_d.len() != c {
        return Err(shape_mismatch(
            format!("{c} classes"),
            format!("{} / {}", nu_b.len(), nu_d.len()),
        ));
    }
    if nu_b.iter().all(|&x| x == F::zero()) {
        return Err(invalid("batch frequencies are all zero"));
    }
    let mut alpha = Array1::<F>::zeros(c);
    for i in 0..c {
        if nu_b[i] == F::zero() {
            continue;
        }
        if nu_d.weights()[i] <= F::zero() {
            return Err(invalid(format!(
                "class {i} present in batch but has zero dataset frequency"
            )));
        }
        alpha[i] = nu_b[i] / nu_d.weights()[i] * a_tilde.weights()[i];
    }
    DiscreteMeasure::normalized(alpha, MeasureRole::AreaTarget)
}

/// Jensen-Shannon divergence, natural log: ½KL(p‖m) + ½KL(q‖m), m = ½(p+q).
pub fn js_divergence<F: Scalar>(p: &DiscreteMeasure<F>, q: &DiscreteMeasure<F>) -> Result<F> {
    if p.len() != q.len() {
        return Err(shape_mismatch(
            format!("{} bins", p.len()),
            format!("{} bins", q.len()),
        ));
    }
    let half = F::of(0.5);
    let kl_to_mid = |a: &Array1<F>, b: &Array1<F>| -> F {
        a.iter()
            .zip(b.iter())
            .map(|(&x, &y)| {
                if x > F::zero() {
                    let m = half * (x + y);
                    x * (x / m).ln()
                } else {
                    F::zero()
                }
            })
            .sum()
    };
    let d = half * kl_to_mid(p.weights(), q.weights()) + half * kl_to_mid(q.weights(), p.weights());
    // Clamp float noise on identical inputs.
    Ok(d.max(F::zero()))
}

/// Eq.-level EMA convergence: consecutive states are equal and both match the
/// dataset mean density, each within `tol` in max-abs.
pub fn ema_fixed_point<F: Scalar>(
    state_m: &AreaState<F>,
    state_prev: &AreaState<F>,
    mean_density: &DiscreteMeasure<F>,
    tol: F,
) -> Result<bool> {
    if state_m.a_tilde.len() != state_prev.a_tilde.len()
        || state_m.a_tilde.len() != mean_density.len()
    {
        return Err(shape_mismatch(
            format!("{} classes", state_m.a_tilde.len()),
            "mismatched lengths".to_string(),
        ));
    }
    let linf = |a: &Array1<F>, b: &Array1<F>| -> F {
        a.iter()
            .zip(b.iter())
            .map(|(&x, &y)| (x - y).abs())
            .fold(F::zero(), F::max)
    };
    let consec = linf(state_m.a_tilde.weights(), state_prev.a_tilde.weights());
    let to_mean = linf(state_m.a_tilde.weights(), mean_density.weights());
    Ok(consec <= tol && to_mean <= tol)
}

/// Relative class frequencies from multi-label sets: per class, the number of
/// images containing it, normalized by the total label occurrences.
pub fn class_frequencies<F: Scalar>(
    labels_per_image: &[Vec<usize>],
    class_count: usize,
) -> Result<DiscreteMeasure<F>> {
    if labels_per_image.is_empty() {
        return Err(invalid("label list is empty"));
    }
    let mut counts = vec![0usize; class_count];
    for labels in labels_per_image {
        for &c in labels {
            if c >= class_count {
                return Err(invalid(format!(
                    "label {c} out of range for {class_count} classes"
                )));
            }
            counts[c] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(invalid("no labels present"));
    }
    let weights = counts
        .iter()
        .map(|&c| F::of(c as f64 / total as f64))
        .collect::<Array1<F>>();
    DiscreteMeasure::normalized(weights, MeasureRole::Frequency)
}

/// Presence indicator of each class in the batch (the default batch-frequency
/// mode): 1 where present, 0 otherwise.
pub fn presence_indicator<F: Scalar>(
    labels_per_image: &[Vec<usize>],
    class_count: usize,
) -> Array1<F> {
    let mut nu = Array1::<F>::zeros(class_count);
    for labels in labels_per_image {
        for &c in labels {
            if c < class_count {
                nu[c] = F::one();
            }
        }
    }
    nu
}
