//! Property tests for the measure-level invariants.

use ndarray::{Array1, Array2};
use proptest::prelude::*;

use pc2m::area::{batch_rescale, ema_update, init_area, js_divergence};
use pc2m::loss::pc2m_breakdown;
use pc2m::measure::{DiscreteMeasure, MeasureRole};
use pc2m::metrics::beta_mix;
use pc2m::ot::{coupling_entropy, CouplingMatrix, PredictionMatrix};

fn simplex(len: usize) -> impl Strategy<Value = DiscreteMeasure<f64>> {
    prop::collection::vec(1e-3..1.0f64, len).prop_map(|raw| {
        DiscreteMeasure::normalized(Array1::from_vec(raw), MeasureRole::AreaState).unwrap()
    })
}

proptest! {
    #[test]
    fn js_symmetric_and_bounded((p, q) in (2usize..8).prop_flat_map(|c| (simplex(c), simplex(c)))) {
        let d_pq = js_divergence(&p, &q).unwrap();
        let d_qp = js_divergence(&q, &p).unwrap();
        prop_assert!((d_pq - d_qp).abs() < 1e-12);
        prop_assert!(d_pq >= 0.0);
        prop_assert!(d_pq <= 2.0f64.ln() + 1e-12);
        prop_assert!(js_divergence(&p, &p).unwrap() == 0.0);
    }

    #[test]
    fn ema_stays_on_simplex_between_endpoints(
        (a, d) in (2usize..8).prop_flat_map(|c| (simplex(c), simplex(c))),
        gamma in 0.0..=1.0f64,
    ) {
        let state = init_area(a.clone(), gamma).unwrap();
        let next = ema_update(&state, &d, gamma).unwrap();
        prop_assert!((next.a_tilde.weights().sum() - 1.0).abs() <= 1e-9);
        for i in 0..a.len() {
            let lo = a.weights()[i].min(d.weights()[i]) - 1e-12;
            let hi = a.weights()[i].max(d.weights()[i]) + 1e-12;
            prop_assert!(next.a_tilde.weights()[i] >= lo && next.a_tilde.weights()[i] <= hi);
        }
    }

    #[test]
    fn rescale_output_is_a_measure_with_matching_support(
        (a, nu_d) in (2usize..8).prop_flat_map(|c| (simplex(c), simplex(c))),
        mask_bits in prop::collection::vec(any::<bool>(), 8),
    ) {
        let c = a.len();
        let mut nu_b = Array1::<f64>::zeros(c);
        let mut any = false;
        for i in 0..c {
            if mask_bits[i % mask_bits.len()] {
                nu_b[i] = 1.0;
                any = true;
            }
        }
        if !any {
            nu_b[0] = 1.0;
        }
        let alpha = batch_rescale(&a, &nu_b, &nu_d).unwrap();
        prop_assert!((alpha.weights().sum() - 1.0).abs() <= 1e-9);
        for i in 0..c {
            prop_assert_eq!(alpha.weights()[i] > 0.0, nu_b[i] > 0.0);
        }
    }

    #[test]
    fn coupling_entropy_at_least_total_mass(rows in 1usize..6, cols in 2usize..5, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut v = Array2::<f64>::zeros((rows, cols));
        for i in 0..rows {
            let mut row: Vec<f64> = (0..cols).map(|_| rng.gen_range(0.05..1.0)).collect();
            let s: f64 = row.iter().sum::<f64>() * rows as f64;
            for (j, x) in row.drain(..).enumerate() {
                v[[i, j]] = x / s;
            }
        }
        let col = v.sum_axis(ndarray::Axis(0));
        let q = CouplingMatrix::new(
            v,
            pc2m::measure::make_patch_marginal(rows).unwrap(),
            DiscreteMeasure::new(col, MeasureRole::AreaTarget).unwrap(),
            1e-9,
        ).unwrap();
        // Entries <= 1, so H(Q) >= total mass = 1.
        prop_assert!(coupling_entropy(&q) >= 1.0 - 1e-12);
    }

    #[test]
    fn breakdown_total_is_exact_sum(m in 0.0..10.0f64, e in 0.0..5.0f64, c in 0.0..5.0f64) {
        let b = pc2m_breakdown(m, e, c);
        prop_assert_eq!(b.total, b.match_term + b.mce);
        prop_assert_eq!(b.entropy_terms, e);
    }

    #[test]
    fn beta_mix_replaces_exact_count(t in 1usize..40, beta in 0.0..=1.0f64, seed in any::<u64>()) {
        let gt: Vec<Vec<usize>> = (0..t).map(|i| vec![i]).collect();
        let pseudo: Vec<Vec<usize>> = (0..t).map(|i| vec![i + 1000]).collect();
        let mixed = beta_mix(&gt, &pseudo, beta, seed).unwrap();
        let replaced = mixed.iter().filter(|s| s[0] >= 1000).count();
        prop_assert_eq!(replaced, (beta * t as f64).round() as usize);
    }

    #[test]
    fn prediction_rows_validate_row_stochasticity(rows in 1usize..5, cols in 2usize..5, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut v = Array2::<f64>::zeros((rows, cols));
        for i in 0..rows {
            let mut row: Vec<f64> = (0..cols).map(|_| rng.gen_range(0.01..1.0)).collect();
            let s: f64 = row.iter().sum();
            for (j, x) in row.drain(..).enumerate() {
                v[[i, j]] = x / s;
            }
        }
        prop_assert!(PredictionMatrix::new(v.clone()).is_ok());
        v[[0, 0]] += 1e-5;
        prop_assert!(PredictionMatrix::new(v).is_err());
    }
}
