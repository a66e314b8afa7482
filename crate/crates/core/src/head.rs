//! Shared projection head: cosine-similarity logits with temperature,
//! softmax predictions, and per-image max pooling.
//!
//! One `ProjectionWeights` instance serves both network branches; callers
//! pass the same borrow to both forward passes, so an update through either
//! path is visible to the other by construction.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::encoder::{softmax_rows_inplace, PatchFeatures};
use crate::error::{invalid, Result};
use crate::ot::PredictionMatrix;
use crate::scalar::Scalar;

/// Dense e×|C| projection shared by the two branches.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionWeights<F: Scalar> {
    pub values: Array2<F>,
}

impl<F: Scalar> ProjectionWeights<F> {
    pub fn init(embed: usize, classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, 1.0 / (embed as f64).sqrt()).expect("valid std");
        Self {
            values: Array2::from_shape_fn((embed, classes), |_| {
                F::of(dist.sample(&mut rng))
            }),
        }
    }

    pub fn classes(&self) -> usize {
        self.values.ncols()
    }

    pub fn layout(&self) -> Vec<(String, usize)> {
        vec![("head.w".to_string(), self.values.len())]
    }

    pub fn flatten(&self) -> Vec<F> {
        self.values.iter().cloned().collect()
    }

    pub fn assign_from_flat(&mut self, flat: &[F]) {
        assert_eq!(flat.len(), self.values.len());
        for (dst, src) in self.values.iter_mut().zip(flat.iter()) {
            *dst = *src;
        }
    }
}

/// Forward intermediates for [`predict_backward`].
#[derive(Clone, Debug)]
pub struct PredictCache<F: Scalar> {
    f_hat: Array2<F>,
    f_norms: Array1<F>,
    w_hat: Array2<F>,
    w_norms: Array1<F>,
    p: Array2<F>,
    temperature: F,
}

const NORM_FLOOR: f64 = 1e-30;

/// Softmax over classes of the scaled cosine similarity between features and
/// class weights: P = softmax((F̂·Ŵ)/τ) with rows and weight columns
/// L2-normalized.
pub fn predict<F: Scalar>(
    f: &PatchFeatures<F>,
    w: &ProjectionWeights<F>,
    temperature: F,
) -> Result<PredictionMatrix<F>> {
    predict_with_cache(f, w, temperature).map(|(p, _)| p)
}

pub fn predict_with_cache<F: Scalar>(
    f: &PatchFeatures<F>,
    w: &ProjectionWeights<F>,
    temperature: F,
) -> Result<(PredictionMatrix<F>, PredictCache<F>)> {
    if temperature <= F::zero() || !temperature.is_finite() {
        return Err(invalid(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if f.values.ncols() != w.values.nrows() {
        return Err(invalid(format!(
            "feature dim {} does not match projection dim {}",
            f.values.ncols(),
            w.values.nrows()
        )));
    }
    let floor = F::of(NORM_FLOOR);
    let mut f_hat = f.values.clone();
    let mut f_norms = Array1::<F>::zeros(f_hat.nrows());
    for (mut row, n) in f_hat.outer_iter_mut().zip(f_norms.iter_mut()) {
        let norm = row.iter().map(|&x| x * x).sum::<F>().sqrt().max(floor);
        row.mapv_inplace(|x| x / norm);
        *n = norm;
    }
    let mut w_hat = w.values.clone();
    let mut w_norms = Array1::<F>::zeros(w_hat.ncols());
    for j in 0..w_hat.ncols() {
        let norm = w_hat
            .column(j)
            .iter()
            .map(|&x| x * x)
            .sum::<F>()
            .sqrt()
            .max(floor);
        w_hat.column_mut(j).mapv_inplace(|x| x / norm);
        w_norms[j] = norm;
    }
    let mut p = f_hat.dot(&w_hat) / temperature;
    softmax_rows_inplace(&mut p);
    let cache = PredictCache {
        f_hat,
        f_norms,
        w_hat,
        w_norms,
        p: p.clone(),
        temperature,
    };
    Ok((PredictionMatrix::new(p)?, cache))
}

impl<F: Scalar> PredictCache<F> {
    pub fn probabilities(&self) -> &Array2<F> {
        &self.p
    }
}

/// Backprop of logit gradients through the cosine head: returns gradients
/// with respect to the raw features and the raw projection weights.
pub fn predict_backward<F: Scalar>(
    cache: &PredictCache<F>,
    d_logits: &Array2<F>,
) -> (Array2<F>, Array2<F>) {
    let inv_t = F::one() / cache.temperature;
    // logits = F̂·Ŵ/τ
    let d_f_hat = d_logits.dot(&cache.w_hat.t()) * inv_t;
    let d_w_hat = cache.f_hat.t().dot(d_logits) * inv_t;
    // Row L2-normalization backward: df = (df̂ − f̂(f̂·df̂))/‖f‖.
    let mut d_f = d_f_hat;
    for ((mut drow, frow), &norm) in d_f
        .outer_iter_mut()
        .zip(cache.f_hat.outer_iter())
        .zip(cache.f_norms.iter())
    {
        let dot = drow
            .iter()
            .zip(frow.iter())
            .map(|(&a, &b)| a * b)
            .sum::<F>();
        for (d, &fh) in drow.iter_mut().zip(frow.iter()) {
            *d = (*d - fh * dot) / norm;
        }
    }
    // Column L2-normalization backward for the weights.
    let mut d_w = d_w_hat;
    for j in 0..d_w.ncols() {
        let dot = d_w
            .column(j)
            .iter()
            .zip(cache.w_hat.column(j).iter())
            .map(|(&a, &b)| a * b)
            .sum::<F>();
        let norm = cache.w_norms[j];
        let w_col: Vec<F> = cache.w_hat.column(j).iter().cloned().collect();
        for (d, wh) in d_w.column_mut(j).iter_mut().zip(w_col.iter()) {
            *d = (*d - *wh * dot) / norm;
        }
    }
    (d_f, d_w)
}

/// Per-class global max pooling over an image's patch predictions; also
/// returns the argmax patch row per class (first maximum on ties) for the
/// pooling backward pass.
pub fn pool_image_scores<F: Scalar>(p: &PredictionMatrix<F>) -> (Array1<F>, Vec<usize>) {
    let values = p.values();
    let c = values.ncols();
    let mut scores = Array1::<F>::zeros(c);
    let mut argmax = vec![0usize; c];
    for j in 0..c {
        let mut best = F::neg_infinity();
        let mut best_k = 0usize;
        for (k, &v) in values.column(j).iter().enumerate() {
            if v > best {
                best = v;
                best_k = k;
            }
        }
        scores[j] = best;
        argmax[j] = best_k;
    }
    (scores, argmax)
}

/// Mean pooling across patches, the alternative to [`pool_image_scores`];
/// the backward pass spreads the score gradient uniformly over rows.
pub fn pool_image_scores_mean<F: Scalar>(p: &PredictionMatrix<F>) -> Array1<F> {
    let values = p.values();
    let k = F::of(values.nrows() as f64);
    let mut scores = Array1::<F>::zeros(values.ncols());
    for j in 0..values.ncols() {
        scores[j] = values.column(j).iter().cloned().sum::<F>() / k;
    }
    scores
}
