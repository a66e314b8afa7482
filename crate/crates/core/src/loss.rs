//! The match loss (cross-view cross-entropy against transport plans plus
//! coupling entropies), the multi-label BCE on pooled global scores, their
//! sum, and a finite-difference gradient checker.
//!
//! Transport plans are constants under differentiation: the analytic
//! gradients returned here flow only through the log-prediction terms.

use ndarray::Array2;

use crate::error::{invalid, shape_mismatch, Result};
use crate::ot::{coupling_entropy, CouplingMatrix, PredictionMatrix};
use crate::scalar::Scalar;

/// Loss components for one step. `total = match_term + mce` exactly.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown<F: Scalar> {
    pub match_term: F,
    pub mce: F,
    pub total: F,
    /// H(Q^ℓ) + H(Q^g), carried inside `match_term`.
    pub entropy_terms: F,
}

/// Match-loss value plus the analytic logit gradients for both branches.
#[derive(Clone, Debug)]
pub struct MatchLossResult<F: Scalar> {
    pub value: F,
    pub entropy_terms: F,
    pub d_logits_global: Array2<F>,
    pub d_logits_local: Array2<F>,
}

/// Cross-view match loss:
///
/// L = −Σ Q^g[g(i)]·log P^ℓ[i] − Σ Q^ℓ[i]·log P^g[g(i)] + H(Q^ℓ) + H(Q^g)
///
/// summed over local rows i with a valid global counterpart g(i). Rows whose
/// content is absent from the global view are excluded and the remaining
/// cross-term mass is renormalized to one, which also keeps the plan's native
/// unit normalization when the alignment is a bijection.
pub fn match_loss<F: Scalar>(
    p_g: &PredictionMatrix<F>,
    p_l: &PredictionMatrix<F>,
    q_g: &CouplingMatrix<F>,
    q_l: &CouplingMatrix<F>,
    mapping: &[Option<usize>],
) -> Result<MatchLossResult<F>> {
    match_loss_opts(p_g, p_l, q_g, q_l, mapping, false)
}

/// As [`match_loss`]; with `per_patch_average` each aligned row's plan slice
/// is normalized to unit mass and the cross terms are averaged over rows
/// instead of keeping the plan's own normalization.
pub fn match_loss_opts<F: Scalar>(
    p_g: &PredictionMatrix<F>,
    p_l: &PredictionMatrix<F>,
    q_g: &CouplingMatrix<F>,
    q_l: &CouplingMatrix<F>,
    mapping: &[Option<usize>],
    per_patch_average: bool,
) -> Result<MatchLossResult<F>> {
    let n = p_l.n_patches();
    let c = p_l.n_classes();
    if p_g.n_patches() != n || p_g.n_classes() != c {
        return Err(shape_mismatch(
            format!("{n}x{c}"),
            format!("{}x{}", p_g.n_patches(), p_g.n_classes()),
        ));
    }
    if q_g.values().dim() != (n, c) || q_l.values().dim() != (n, c) {
        return Err(shape_mismatch(
            format!("{n}x{c}"),
            format!("{:?}/{:?}", q_g.values().dim(), q_l.values().dim()),
        ));
    }
    if mapping.len() != n {
        return Err(invalid(format!(
            "alignment maps {} rows, predictions have {n}",
            mapping.len()
        )));
    }
    if mapping.iter().flatten().any(|&g| g >= n) {
        return Err(invalid("alignment target row out of range"));
    }

    // Included plan mass per cross term (renormalizes partial alignments).
    let valid = mapping.iter().flatten().count();
    let mut mass_g = F::zero();
    let mut mass_l = F::zero();
    for (i, m) in mapping.iter().enumerate() {
        if let Some(g) = m {
            mass_g += q_g.values().row(*g).sum();
            mass_l += q_l.values().row(i).sum();
        }
    }
    if mass_g <= F::zero() || mass_l <= F::zero() {
        return Err(invalid("no valid alignment rows with plan mass"));
    }

    let mut cross_lg = F::zero(); // −E_{Q^g}[log P^ℓ]
    let mut cross_gl = F::zero(); // −E_{Q^ℓ}[log P^g]
    let mut d_local = Array2::<F>::zeros((n, c));
    let mut d_global = Array2::<F>::zeros((n, c));
    let row_count = F::of(valid as f64);
    for (i, m) in mapping.iter().enumerate() {
        let Some(g) = m else { continue };
        let qg_row = q_g.values().row(*g);
        let ql_row = q_l.values().row(i);
        let pl_row = p_l.values().row(i);
        let pg_row = p_g.values().row(*g);
        // Plan-native normalization keeps total included mass 1; per-patch
        // averaging instead gives each aligned row unit target mass.
        let (w_g, w_l) = if per_patch_average {
            (
                F::one() / (qg_row.sum() * row_count),
                F::one() / (ql_row.sum() * row_count),
            )
        } else {
            (F::one() / mass_g, F::one() / mass_l)
        };
        let qg_sum = qg_row.sum() * w_g;
        let ql_sum = ql_row.sum() * w_l;
        for j in 0..c {
            let qg = qg_row[j] * w_g;
            let ql = ql_row[j] * w_l;
            cross_lg -= qg * pl_row[j].ln();
            cross_gl -= ql * pg_row[j].ln();
            // d(−Σ q log softmax(z))/dz = (Σ q)·p − q, with Q constant.
            d_local[[i, j]] += qg_sum * pl_row[j] - qg;
            d_global[[*g, j]] += ql_sum * pg_row[j] - ql;
        }
    }

    let entropy_terms = coupling_entropy(q_l) + coupling_entropy(q_g);
    Ok(MatchLossResult {
        value: cross_lg + cross_gl + entropy_terms,
        entropy_terms,
        d_logits_global: d_global,
        d_logits_local: d_local,
    })
}

/// MCE value with gradients w.r.t. the pooled scores, plus how many scores
/// hit the clamp.
#[derive(Clone, Debug)]
pub struct MceResult<F: Scalar> {
    pub value: F,
    pub d_scores: Array2<F>,
    pub clamped: usize,
}

const SCORE_CLAMP: f64 = 1e-7;

/// Multi-label binary cross-entropy between pooled per-class scores and
/// 0/1 label indicators, averaged over images and classes.
pub fn mce_loss<F: Scalar>(pooled: &Array2<F>, labels: &Array2<F>) -> Result<MceResult<F>> {
    if pooled.dim() != labels.dim() {
        return Err(shape_mismatch(
            format!("{:?}", labels.dim()),
            format!("{:?}", pooled.dim()),
        ));
    }
    let (t, c) = pooled.dim();
    let count = F::of((t * c) as f64);
    let lo = F::of(SCORE_CLAMP);
    let hi = F::one() - lo;
    let mut value = F::zero();
    let mut d_scores = Array2::<F>::zeros((t, c));
    let mut clamped = 0usize;
    for i in 0..t {
        for j in 0..c {
            let raw = pooled[[i, j]];
            let (s, was_clamped) = if raw < lo {
                (lo, true)
            } else if raw > hi {
                (hi, true)
            } else {
                (raw, false)
            };
            clamped += usize::from(was_clamped);
            let y = labels[[i, j]];
            value -= (y * s.ln() + (F::one() - y) * (F::one() - s).ln()) / count;
            if !was_clamped {
                d_scores[[i, j]] = (s - y) / (s * (F::one() - s)) / count;
            }
        }
    }
    Ok(MceResult {
        value,
        d_scores,
        clamped,
    })
}

/// Combines precomputed match and MCE values into the full objective.
pub fn pc2m_breakdown<F: Scalar>(match_term: F, entropy_terms: F, mce: F) -> LossBreakdown<F> {
    LossBreakdown {
        match_term,
        mce,
        total: match_term + mce,
        entropy_terms,
    }
}

/// Outcome of a finite-difference gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub checked: usize,
    pub tolerance: f64,
    pub pass: bool,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "grad-check: {} (max rel error {:.3e} at {}, {} parameters, tolerance {:.1e})",
            if self.pass { "PASS" } else { "FAIL" },
            self.max_rel_error,
            self.worst_param,
            self.checked,
            self.tolerance
        )
    }
}

/// Central-difference comparison of `analytic` against `loss_fn` evaluated at
/// ±h per coordinate. `layout` names the flat coordinates for reporting.
pub fn grad_check<F, L>(
    mut loss_fn: L,
    params: &[F],
    analytic: &[F],
    layout: &[(String, usize)],
    h: f64,
    tolerance: f64,
) -> GradCheckReport
where
    F: Scalar,
    L: FnMut(&[F]) -> F,
{
    assert_eq!(params.len(), analytic.len());
    let mut max_rel = 0.0f64;
    let mut worst = String::from("-");
    let hf = F::of(h);
    let mut scratch = params.to_vec();
    for i in 0..params.len() {
        let orig = scratch[i];
        scratch[i] = orig + hf;
        let plus = loss_fn(&scratch).as_f64();
        scratch[i] = orig - hf;
        let minus = loss_fn(&scratch).as_f64();
        scratch[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[i].as_f64();
        let denom = a.abs().max(numeric.abs()).max(1e-6);
        let rel = (a - numeric).abs() / denom;
        if rel > max_rel {
            max_rel = rel;
            worst = name_of(layout, i);
        }
    }
    GradCheckReport {
        max_rel_error: max_rel,
        worst_param: worst,
        checked: params.len(),
        tolerance,
        pass: max_rel <= tolerance,
    }
}

fn name_of(layout: &[(String, usize)], mut idx: usize) -> String {
    for (name, len) in layout {
        if idx < *len {
            return format!("{name}[{idx}]");
        }
        idx -= len;
    }
    format!("param[{idx}]")
}

/// Gradient of a loss with respect to softmax logits, given upstream dL/dP.
pub fn softmax_logit_grad<F: Scalar>(p: &Array2<F>, d_p: &Array2<F>) -> Array2<F> {
    let mut out = d_p.clone();
    crate::encoder::softmax_backward_rows_inplace(p, &mut out);
    out
}

/// Sum of elementwise squares, for gradient-norm logging.
pub fn l2_norm<F: Scalar>(slices: &[&[F]]) -> f64 {
    slices
        .iter()
        .flat_map(|s| s.iter())
        .map(|&x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Indicator matrix from per-image label sets.
pub fn label_indicator<F: Scalar>(labels: &[Vec<usize>], classes: usize) -> Array2<F> {
    let mut y = Array2::<F>::zeros((labels.len(), classes));
    for (i, set) in labels.iter().enumerate() {
        for &c in set {
            if c < classes {
                y[[i, c]] = F::one();
            }
        }
    }
    y
}

/// Argmax one-hot plan rows scaled to the uniform row marginal, used by the
/// no-transport ablation in place of a Sinkhorn coupling.
pub fn argmax_plan<F: Scalar>(p: &PredictionMatrix<F>) -> Array2<F> {
    let (n, c) = p.values().dim();
    let w = F::one() / F::of(n as f64);
    let mut q = Array2::<F>::zeros((n, c));
    for (i, row) in p.values().outer_iter().enumerate() {
        let mut best = F::neg_infinity();
        let mut best_j = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v > best {
                best = v;
                best_j = j;
            }
        }
        q[[i, best_j]] = w;
    }
    q
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::{make_patch_marginal, DiscreteMeasure, MeasureRole};
    use ndarray::array;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn coupling(values: Array2<f64>) -> CouplingMatrix<f64> {
        let n = values.nrows();
        let col = values.sum_axis(ndarray::Axis(0));
        CouplingMatrix::new(
            values,
            make_patch_marginal(n).unwrap(),
            DiscreteMeasure::new(col, MeasureRole::AreaTarget).unwrap(),
            1e-9,
        )
        .unwrap()
    }

    fn identity_mapping(n: usize) -> Vec<Option<usize>> {
        (0..n).map(Some).collect()
    }

    #[test]
    fn single_cell_match_loss_is_two() {
        let p = PredictionMatrix::new(array![[1.0 - 1e-12, 1e-12]]).unwrap();
        // Work with the genuinely 1x1 case through a 1-class coupling.
        let p1 = PredictionMatrix::new(array![[1.0]]).unwrap();
        let q = coupling(array![[1.0]]);
        let r = match_loss(&p1, &p1, &q, &q, &identity_mapping(1)).unwrap();
        assert!((r.value - 2.0).abs() < 1e-12);
        assert!((r.entropy_terms - 2.0).abs() < 1e-12);
        drop(p);
    }

    #[test]
    fn one_hot_plans_closed_form() {
        let p = PredictionMatrix::new(array![[0.75, 0.25], [0.25, 0.75]]).unwrap();
        let q = coupling(array![[0.5, 0.0], [0.0, 0.5]]);
        let r = match_loss(&p, &p, &q, &q, &identity_mapping(2)).unwrap();
        let cross = -2.0 * 0.75f64.ln();
        let entropies = 2.0 * (2.0f64.ln() + 1.0);
        assert!((r.value - (cross + entropies)).abs() < 1e-12);
    }

    #[test]
    fn cross_terms_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let n = rng.gen_range(2..6);
            let c = rng.gen_range(2..4);
            let p = random_pred(&mut rng, n, c);
            let q = coupling(random_plan(&mut rng, n, c));
            let r = match_loss(&p, &p, &q, &q, &identity_mapping(n)).unwrap();
            assert!(r.value - r.entropy_terms >= -1e-12);
            assert!(r.entropy_terms >= 0.0);
        }
    }

    fn random_pred(rng: &mut ChaCha8Rng, n: usize, c: usize) -> PredictionMatrix<f64> {
        let mut v = Array2::<f64>::zeros((n, c));
        for i in 0..n {
            let mut row: Vec<f64> = (0..c).map(|_| rng.gen_range(0.1..1.0)).collect();
            let s: f64 = row.iter().sum();
            for (j, x) in row.drain(..).enumerate() {
                v[[i, j]] = x / s;
            }
        }
        PredictionMatrix::new(v).unwrap()
    }

    fn random_plan(rng: &mut ChaCha8Rng, n: usize, c: usize) -> Array2<f64> {
        // Rows sum to 1/n exactly: a valid coupling against the uniform row
        // marginal with its own column sums as the column marginal.
        let mut v = Array2::<f64>::zeros((n, c));
        for i in 0..n {
            let mut row: Vec<f64> = (0..c).map(|_| rng.gen_range(0.1..1.0)).collect();
            let s: f64 = row.iter().sum::<f64>() * n as f64;
            for (j, x) in row.drain(..).enumerate() {
                v[[i, j]] = x / s;
            }
        }
        v
    }

    #[test]
    fn match_gradients_match_finite_differences_with_frozen_q() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let n = 4;
        let c = 3;
        let q_g = coupling(random_plan(&mut rng, n, c));
        let q_l = coupling(random_plan(&mut rng, n, c));
        // Random partial alignment (one invalid row).
        let mut mapping: Vec<Option<usize>> =
            (0..n).map(|_| Some(rng.gen_range(0..n))).collect();
        mapping[2] = None;

        let z_g = Array2::from_shape_fn((n, c), |_| rng.gen_range(-1.0..1.0));
        let z_l = Array2::from_shape_fn((n, c), |_| rng.gen_range(-1.0..1.0));
        let to_pred = |z: &Array2<f64>| {
            let mut p = z.clone();
            crate::encoder::softmax_rows_inplace(&mut p);
            PredictionMatrix::new(p).unwrap()
        };
        let loss = |z_g: &Array2<f64>, z_l: &Array2<f64>| -> f64 {
            match_loss(&to_pred(z_g), &to_pred(z_l), &q_g, &q_l, &mapping)
                .unwrap()
                .value
        };
        let r = match_loss(&to_pred(&z_g), &to_pred(&z_l), &q_g, &q_l, &mapping).unwrap();
        let h = 1e-5;
        for i in 0..n {
            for j in 0..c {
                let mut zp = z_g.clone();
                zp[[i, j]] += h;
                let mut zm = z_g.clone();
                zm[[i, j]] -= h;
                let num = (loss(&zp, &z_l) - loss(&zm, &z_l)) / (2.0 * h);
                let a = r.d_logits_global[[i, j]];
                let denom = a.abs().max(num.abs()).max(1e-6);
                assert!((a - num).abs() / denom < 1e-4, "global logit ({i},{j})");

                let mut zp = z_l.clone();
                zp[[i, j]] += h;
                let mut zm = z_l.clone();
                zm[[i, j]] -= h;
                let num = (loss(&z_g, &zp) - loss(&z_g, &zm)) / (2.0 * h);
                let a = r.d_logits_local[[i, j]];
                let denom = a.abs().max(num.abs()).max(1e-6);
                assert!((a - num).abs() / denom < 1e-4, "local logit ({i},{j})");
            }
        }
    }

    #[test]
    fn stop_gradient_contract() {
        // Analytic gradient equals finite differences with Q frozen and
        // differs from finite differences with Q recomputed from P.
        use crate::ot::{gibbs_kernel, sinkhorn};
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let n = 4;
        let c = 3;
        let delta = make_patch_marginal::<f64>(n).unwrap();
        let alpha = DiscreteMeasure::new(array![0.5, 0.3, 0.2], MeasureRole::AreaTarget).unwrap();
        let z = Array2::from_shape_fn((n, c), |_| rng.gen_range(-1.0..1.0));
        let mapping = identity_mapping(n);
        let to_pred = |z: &Array2<f64>| {
            let mut p = z.clone();
            crate::encoder::softmax_rows_inplace(&mut p);
            PredictionMatrix::new(p).unwrap()
        };
        let plan_of = |p: &PredictionMatrix<f64>| {
            sinkhorn(&gibbs_kernel(p, 1.0).unwrap(), &delta, &alpha, 1e-10, 10_000)
                .unwrap()
                .coupling
        };
        let p0 = to_pred(&z);
        let q0 = plan_of(&p0);
        let r = match_loss(&p0, &p0, &q0, &q0, &mapping).unwrap();
        let analytic = &r.d_logits_global + &r.d_logits_local;

        let frozen_loss = |z: &Array2<f64>| -> f64 {
            let p = to_pred(z);
            match_loss(&p, &p, &q0, &q0, &mapping).unwrap().value
        };
        let recomputed_loss = |z: &Array2<f64>| -> f64 {
            let p = to_pred(z);
            let q = plan_of(&p);
            match_loss(&p, &p, &q, &q, &mapping).unwrap().value
        };
        let h = 1e-5;
        let mut frozen_agrees = true;
        let mut recomputed_differs = false;
        for i in 0..n {
            for j in 0..c {
                let mut zp = z.clone();
                zp[[i, j]] += h;
                let mut zm = z.clone();
                zm[[i, j]] -= h;
                let num_frozen = (frozen_loss(&zp) - frozen_loss(&zm)) / (2.0 * h);
                let num_recomputed = (recomputed_loss(&zp) - recomputed_loss(&zm)) / (2.0 * h);
                let a = analytic[[i, j]];
                if (a - num_frozen).abs() / a.abs().max(num_frozen.abs()).max(1e-6) > 1e-4 {
                    frozen_agrees = false;
                }
                if (num_frozen - num_recomputed).abs() > 1e-6 {
                    recomputed_differs = true;
                }
            }
        }
        assert!(frozen_agrees);
        assert!(recomputed_differs);
    }

    #[test]
    fn mce_closed_forms() {
        let pooled = array![[0.5]];
        let labels = array![[1.0]];
        let r = mce_loss(&pooled, &labels).unwrap();
        assert!((r.value - 2.0f64.ln()).abs() < 1e-12);
        assert_eq!(r.clamped, 0);

        // Perfect scores after clamping are near-zero loss.
        let pooled = array![[1.0, 0.0], [0.0, 1.0]];
        let labels = array![[1.0, 0.0], [0.0, 1.0]];
        let r = mce_loss(&pooled, &labels).unwrap();
        assert!(r.value <= 1e-6);
        assert_eq!(r.clamped, 4);
    }

    #[test]
    fn mce_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let pooled = Array2::from_shape_fn((3, 4), |_| rng.gen_range(0.05..0.95));
        let labels = Array2::from_shape_fn((3, 4), |_| f64::from(rng.gen_bool(0.5)));
        let r = mce_loss(&pooled, &labels).unwrap();
        let h = 1e-6;
        for i in 0..3 {
            for j in 0..4 {
                let mut pp = pooled.clone();
                pp[[i, j]] += h;
                let mut pm = pooled.clone();
                pm[[i, j]] -= h;
                let num = (mce_loss(&pp, &labels).unwrap().value
                    - mce_loss(&pm, &labels).unwrap().value)
                    / (2.0 * h);
                let a = r.d_scores[[i, j]];
                let denom = a.abs().max(num.abs()).max(1e-6);
                assert!((a - num).abs() / denom < 1e-4);
            }
        }
    }

    #[test]
    fn breakdown_is_additive() {
        let b = pc2m_breakdown(2.0, 1.5, 2.0f64.ln());
        assert_eq!(b.total, 2.0 + 2.0f64.ln());
        assert_eq!(b.entropy_terms, 1.5);
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        for _ in 0..100 {
            let m: f64 = rng.gen_range(0.0..5.0);
            let e: f64 = rng.gen_range(0.0..3.0);
            let c: f64 = rng.gen_range(0.0..2.0);
            let b = pc2m_breakdown(m, e, c);
            assert_eq!(b.total, b.match_term + b.mce);
        }
    }

    #[test]
    fn grad_check_exact_for_linear_loss() {
        let params = vec![1.3f64, -0.7];
        let analytic = vec![3.0, 2.0];
        let layout = vec![("w".to_string(), 2)];
        let report = grad_check(
            |p: &[f64]| 3.0 * p[0] + 2.0 * p[1],
            &params,
            &analytic,
            &layout,
            1e-5,
            1e-10,
        );
        assert!(report.pass, "{report}");
        assert!(report.max_rel_error <= 1e-10);
    }

    #[test]
    fn grad_check_reports_worst_parameter() {
        let params = vec![0.5f64, 0.5];
        let analytic = vec![1.0, 5.0]; // second one is wrong on purpose
        let layout = vec![("a".to_string(), 1), ("b".to_string(), 1)];
        let report = grad_check(
            |p: &[f64]| p[0] + p[1],
            &params,
            &analytic,
            &layout,
            1e-5,
            1e-6,
        );
        assert!(!report.pass);
        assert_eq!(report.worst_param, "b[0]");
    }

    #[test]
    fn argmax_plan_rows_are_uniform_mass() {
        let p = PredictionMatrix::new(array![[0.7, 0.3], [0.2, 0.8]]).unwrap();
        let q = argmax_plan(&p);
        assert_eq!(q, array![[0.5, 0.0], [0.0, 0.5]]);
    }
}
