//! Training orchestration: the two-branch loop with warm-up, per-batch
//! transport targets, the epoch-end area update, evaluation, the
//! unsupervised pipeline, and parameter sweeps.

use std::path::Path;
use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adam::Adam;
use crate::area::{
    batch_rescale, class_frequencies, ema_update, image_density, init_area, js_divergence,
    presence_indicator, AreaState,
};
use crate::config::{McePool, Mode, NuBatchMode, RunConfig};
use crate::encoder::{encode_backward, encode_with_cache, EncodeCache, EncoderParams, PatchFeatures};
use crate::error::{invalid, Error, Result};
use crate::head::{pool_image_scores, pool_image_scores_mean, predict_with_cache, ProjectionWeights};
use crate::image::ImageTensor;
use crate::io::{find_array, read_named_arrays, write_named_arrays, NamedArray};
use crate::loss::{
    argmax_plan, label_indicator, match_loss, match_loss_opts, mce_loss, pc2m_breakdown,
    softmax_logit_grad, LossBreakdown, MatchLossResult,
};
use crate::measure::{make_patch_marginal, DiscreteMeasure, MeasureRole};
use crate::metrics::{beta_mix, hungarian_match, miou, Assignment, ConfusionMatrix};
use crate::ot::{gibbs_kernel, marginal_violation, sinkhorn, CouplingMatrix, PredictionMatrix};
use crate::seeds::derive_seed;
use crate::spectral::{
    cluster_eigenvectors, crops_and_global_kmeans, eigendecompose, patch_affinity, PseudoLabelSet,
};
use crate::synth::{gen_dataset, ground_truth_area, patch_majority, LabeledImage};
use crate::view::{align_patches, make_views};

/// Encoder plus head: everything the optimizer touches.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainableParams {
    pub encoder: EncoderParams<f64>,
    pub head: ProjectionWeights<f64>,
}

impl TrainableParams {
    pub fn init(cfg: &RunConfig) -> Result<Self> {
        Ok(Self {
            encoder: EncoderParams::init(cfg.encoder, derive_seed(cfg.seed, &[10]))?,
            head: ProjectionWeights::init(
                cfg.encoder.embed,
                cfg.dataset.class_count,
                derive_seed(cfg.seed, &[11]),
            ),
        })
    }

    pub fn layout(&self) -> Vec<(String, usize)> {
        let mut l = self.encoder.layout();
        l.extend(self.head.layout());
        l
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut f = self.encoder.flatten();
        f.extend(self.head.flatten());
        f
    }

    pub fn assign_from_flat(&mut self, flat: &[f64]) {
        let enc_len: usize = self.encoder.layout().iter().map(|(_, l)| l).sum();
        self.encoder.assign_from_flat(&flat[..enc_len]);
        self.head.assign_from_flat(&flat[enc_len..]);
    }

    /// Per-entry trainability for the given phase: the head always trains,
    /// the mixing blocks unfreeze after warm-up, the patch embedding and
    /// positions stay frozen.
    pub fn mask(&self, warmup: bool) -> Vec<bool> {
        let mut mask = Vec::new();
        for (name, len) in self.layout() {
            let on = name.starts_with("head.") || (!warmup && name.starts_with("enc.blocks."));
            mask.extend(std::iter::repeat_n(on, len));
        }
        mask
    }
}

/// One epoch's summary row.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub match_loss: f64,
    pub mce_loss: f64,
    pub total_loss: f64,
    pub miou: f64,
    pub area_entropy: f64,
    pub djs_prev: f64,
    pub djs_star: f64,
    pub a_tilde: Vec<f64>,
    pub wall_secs: f64,
}

/// One optimizer step's summary row.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub match_loss: f64,
    pub mce_loss: f64,
    pub total_loss: f64,
    pub grad_norm: f64,
}

/// Evaluation output for one split.
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub confusion: ConfusionMatrix,
    pub miou: f64,
    pub per_class_iou: Vec<f64>,
}

/// Everything a finished run hands back.
#[derive(Clone, Debug)]
pub struct TrainRun {
    pub config: RunConfig,
    pub params: TrainableParams,
    pub area: AreaState<f64>,
    pub records: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    pub labels_used: Vec<Vec<usize>>,
    pub pseudo_sets: Option<Vec<PseudoLabelSet>>,
    pub assignment: Option<Assignment>,
    pub train_idx: Vec<usize>,
    pub heldout_idx: Vec<usize>,
    pub final_report: EvalReport,
}

/// Deterministic 80/20-style split by seeded shuffle.
pub fn split_indices(total: usize, heldout_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..total).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[4]));
    idx.shuffle(&mut rng);
    let heldout = (total as f64 * heldout_fraction).round() as usize;
    let heldout_idx: Vec<usize> = idx[..heldout].to_vec();
    let mut train_idx: Vec<usize> = idx[heldout..].to_vec();
    train_idx.sort_unstable();
    let mut heldout_idx = heldout_idx;
    heldout_idx.sort_unstable();
    (train_idx, heldout_idx)
}

/// Spectral pseudo-labels for every image: content-feature affinity, spectral
/// regions, crop features, one dataset-wide k-means with k = |C|.
pub fn pseudo_label_pipeline(
    cfg: &RunConfig,
    dataset: &[LabeledImage],
) -> Result<Vec<PseudoLabelSet>> {
    let feat_params = EncoderParams::<f64>::init(cfg.encoder, cfg.spectral_seed)?;
    let grid = cfg.encoder.view_side / cfg.encoder.patch;
    let mut regions = Vec::with_capacity(dataset.len());
    for img in dataset {
        let content = crate::encoder::encode_content(&img.image, &feat_params)?;
        let graph = patch_affinity(&content.values)?;
        let k_e = cfg.spectral_k_eigen.min(graph.a.nrows());
        let basis = eigendecompose(&graph, k_e)?;
        let rs = cluster_eigenvectors(
            &basis,
            cfg.spectral_regions,
            derive_seed(cfg.spectral_seed, &[5, img.image.id as u64]),
            grid,
        )?;
        regions.push(rs);
    }
    let images: Vec<ImageTensor<f64>> = dataset.iter().map(|d| d.image.clone()).collect();
    crops_and_global_kmeans(
        &images,
        &regions,
        &feat_params,
        cfg.dataset.class_count,
        derive_seed(cfg.spectral_seed, &[6]),
    )
}

/// Hungarian mapping from cluster ids (1..=k, as column index id−1) to class
/// ids, maximizing image-level overlap counts. Evaluation-only in the
/// unsupervised mode; applied before mixing in the β-mix mode.
pub fn map_clusters_to_classes(
    pseudo: &[PseudoLabelSet],
    gt: &[Vec<usize>],
    class_count: usize,
) -> Result<Assignment> {
    let mut overlap = Array2::<f64>::zeros((class_count, class_count));
    for (ps, gt_set) in pseudo.iter().zip(gt.iter()) {
        for &id in &ps.labels {
            let cluster = id - 1;
            for &c in gt_set {
                overlap[[cluster, c]] += 1.0;
            }
        }
    }
    hungarian_match(&overlap)
}

fn pseudo_to_label_sets(pseudo: &[PseudoLabelSet]) -> Vec<Vec<usize>> {
    pseudo
        .iter()
        .map(|s| s.labels.iter().map(|&id| id - 1).collect())
        .collect()
}

/// Label sets to train on, plus the raw pseudo-label sets and the
/// evaluation-only cluster-to-class assignment when a pipeline ran.
type PreparedLabels = (Vec<Vec<usize>>, Option<Vec<PseudoLabelSet>>, Option<Assignment>);

/// Resolves the label sets used for training per the configured mode.
fn prepare_labels(cfg: &RunConfig, dataset: &[LabeledImage]) -> Result<PreparedLabels> {
    let gt: Vec<Vec<usize>> = dataset.iter().map(|d| d.labels.clone()).collect();
    match cfg.mode {
        Mode::Weak => Ok((gt, None, None)),
        Mode::Unsupervised => {
            let pseudo = pseudo_label_pipeline(cfg, dataset)?;
            let assignment = map_clusters_to_classes(&pseudo, &gt, cfg.dataset.class_count)?;
            Ok((pseudo_to_label_sets(&pseudo), Some(pseudo), Some(assignment)))
        }
        Mode::BetaMix => {
            let pseudo = pseudo_label_pipeline(cfg, dataset)?;
            let assignment = map_clusters_to_classes(&pseudo, &gt, cfg.dataset.class_count)?;
            let mapped: Vec<Vec<usize>> = pseudo
                .iter()
                .map(|s| {
                    let mut v: Vec<usize> = s
                        .labels
                        .iter()
                        .map(|&id| assignment.mapping[id - 1])
                        .collect();
                    v.sort_unstable();
                    v.dedup();
                    v
                })
                .collect();
            let mixed = beta_mix(&gt, &mapped, cfg.beta, derive_seed(cfg.seed, &[7]))?;
            Ok((mixed, Some(pseudo), None))
        }
    }
}

struct BranchPass {
    caches: Vec<EncodeCache<f64>>,
    pred: PredictionMatrix<f64>,
    pred_cache: crate::head::PredictCache<f64>,
}

fn branch_forward(
    params: &TrainableParams,
    views: &[&ImageTensor<f64>],
    temperature: f64,
) -> Result<BranchPass> {
    let k = params.encoder.cfg.patches();
    let e = params.encoder.cfg.embed;
    let n = views.len() * k;
    let mut stacked = Array2::<f64>::zeros((n, e));
    let mut caches = Vec::with_capacity(views.len());
    for (i, view) in views.iter().enumerate() {
        let (f, cache) = encode_with_cache(view, &params.encoder)?;
        stacked
            .slice_mut(ndarray::s![i * k..(i + 1) * k, ..])
            .assign(&f.values);
        caches.push(cache);
    }
    let features = PatchFeatures { values: stacked };
    let (pred, pred_cache) = predict_with_cache(&features, &params.head, temperature)?;
    Ok(BranchPass {
        caches,
        pred,
        pred_cache,
    })
}

fn branch_backward(
    params: &TrainableParams,
    pass: &BranchPass,
    d_logits: &Array2<f64>,
    enc_grads: &mut EncoderParams<f64>,
    head_grad: &mut Array2<f64>,
) {
    let (d_f, d_w) = crate::head::predict_backward(&pass.pred_cache, d_logits);
    *head_grad += &d_w;
    let k = params.encoder.cfg.patches();
    for (i, cache) in pass.caches.iter().enumerate() {
        let slice = d_f.slice(ndarray::s![i * k..(i + 1) * k, ..]).to_owned();
        encode_backward(&params.encoder, cache, &slice, enc_grads);
    }
}

/// Transport plan for one branch, honoring the no-transport ablation and the
/// per-image option.
fn plans_for(
    cfg: &RunConfig,
    pred: &PredictionMatrix<f64>,
    alpha: &DiscreteMeasure<f64>,
    per_image_alphas: Option<&[DiscreteMeasure<f64>]>,
    eps: f64,
) -> Result<Array2<f64>> {
    if cfg.no_ot {
        return Ok(argmax_plan(pred));
    }
    let k_patches = cfg.encoder.patches();
    match per_image_alphas {
        None => {
            let kernel = gibbs_kernel(pred, eps)?;
            let delta = make_patch_marginal::<f64>(pred.n_patches())?;
            let r = sinkhorn(&kernel, &delta, alpha, cfg.sinkhorn_tol, cfg.sinkhorn_max_iter)?;
            Ok(r.coupling.values().clone())
        }
        Some(alphas) => {
            let mut q = Array2::<f64>::zeros(pred.values().dim());
            let delta = make_patch_marginal::<f64>(k_patches)?;
            let b = pred.n_patches() / k_patches;
            for i in 0..b {
                let block = pred
                    .values()
                    .slice(ndarray::s![i * k_patches..(i + 1) * k_patches, ..])
                    .to_owned();
                let p = PredictionMatrix::new(block)?;
                let kernel = gibbs_kernel(&p, eps)?;
                let r = sinkhorn(
                    &kernel,
                    &delta,
                    &alphas[i],
                    cfg.sinkhorn_tol,
                    cfg.sinkhorn_max_iter,
                )?;
                // Per-image plans carry mass 1 each; rescale so the stacked
                // batch plan keeps total mass 1 and rows sum to 1/N.
                q.slice_mut(ndarray::s![i * k_patches..(i + 1) * k_patches, ..])
                    .assign(&(r.coupling.values() / b as f64));
            }
            Ok(q)
        }
    }
}

fn coupling_from(values: Array2<f64>, alpha: &DiscreteMeasure<f64>) -> Result<CouplingMatrix<f64>> {
    let n = values.nrows();
    let delta = make_patch_marginal::<f64>(n)?;
    let v = marginal_violation(&values, &delta, alpha)?;
    // The argmax one-hot ablation and per-image stacking do not satisfy the
    // batch column marginal; validate against their own column sums then.
    if v <= 1e-3 {
        CouplingMatrix::new(values, delta, alpha.clone(), f64::max(v, 1e-12))
    } else {
        let col = values.sum_axis(ndarray::Axis(0));
        let col = DiscreteMeasure::new(col, MeasureRole::Frequency)?;
        let v2 = marginal_violation(&values, &delta, &col)?;
        CouplingMatrix::new(values, delta, col, f64::max(v2, 1e-12))
    }
}

/// Batch-level match loss with the configured pairing.
#[allow(clippy::too_many_arguments)]
fn batch_match_loss(
    cfg: &RunConfig,
    p_g: &PredictionMatrix<f64>,
    p_l: &PredictionMatrix<f64>,
    q_g: &CouplingMatrix<f64>,
    q_l: &CouplingMatrix<f64>,
    mapping: &[Option<usize>],
) -> Result<(MatchLossResult<f64>, Array2<f64>, Array2<f64>)> {
    if cfg.self_match {
        // Each branch matches its own plan: swap the prediction arguments so
        // the cross terms pair P with its own coupling, then swap the
        // gradient outputs back.
        let identity: Vec<Option<usize>> = (0..p_g.n_patches()).map(Some).collect();
        let r = match_loss_opts(p_l, p_g, q_g, q_l, &identity, cfg.match_per_patch_average)?;
        let d_g = r.d_logits_local.clone();
        let d_l = r.d_logits_global.clone();
        Ok((r, d_g, d_l))
    } else {
        let r = match_loss_opts(p_g, p_l, q_g, q_l, mapping, cfg.match_per_patch_average)?;
        let d_g = r.d_logits_global.clone();
        let d_l = r.d_logits_local.clone();
        Ok((r, d_g, d_l))
    }
}

/// Pooled-score BCE for the global branch with its pooling backward pass
/// (gradients routed to argmax rows for max pooling, spread uniformly for
/// mean pooling).
fn pooled_mce(
    cfg: &RunConfig,
    pred: &PredictionMatrix<f64>,
    images: usize,
    k_patches: usize,
    class_count: usize,
    labels: &Array2<f64>,
) -> Result<(crate::loss::MceResult<f64>, Array2<f64>)> {
    let mut pooled = Array2::<f64>::zeros((images, class_count));
    let mut argmax_rows: Vec<Vec<usize>> = Vec::with_capacity(images);
    for i in 0..images {
        let block = pred
            .values()
            .slice(ndarray::s![i * k_patches..(i + 1) * k_patches, ..])
            .to_owned();
        let p = PredictionMatrix::new(block)?;
        match cfg.mce_pool {
            McePool::Max => {
                let (scores, rows) = pool_image_scores(&p);
                pooled.row_mut(i).assign(&scores);
                argmax_rows.push(rows);
            }
            McePool::Mean => {
                pooled.row_mut(i).assign(&pool_image_scores_mean(&p));
                argmax_rows.push(Vec::new());
            }
        }
    }
    let mce = mce_loss(&pooled, labels)?;
    let mut d_p_pool = Array2::<f64>::zeros(pred.values().dim());
    match cfg.mce_pool {
        McePool::Max => {
            for (i, rows) in argmax_rows.iter().enumerate() {
                for (c, &k_star) in rows.iter().enumerate() {
                    d_p_pool[[i * k_patches + k_star, c]] += mce.d_scores[[i, c]];
                }
            }
        }
        McePool::Mean => {
            let inv_k = 1.0 / k_patches as f64;
            for i in 0..images {
                for c in 0..class_count {
                    for k in 0..k_patches {
                        d_p_pool[[i * k_patches + k, c]] += mce.d_scores[[i, c]] * inv_k;
                    }
                }
            }
        }
    }
    Ok((mce, d_p_pool))
}

/// Patch-argmax predictions of the plain (unaugmented) image.
pub fn predict_patches(
    params: &TrainableParams,
    image: &ImageTensor<f64>,
    temperature: f64,
) -> Result<Vec<usize>> {
    let f = crate::encoder::encode(image, &params.encoder)?;
    let p = crate::head::predict(&f, &params.head, temperature)?;
    Ok(p
        .values()
        .outer_iter()
        .map(|row| {
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}

/// Confusion and mIoU for arbitrary per-image patch predictions against the
/// patch-majority ground truth. `class_map` remaps predicted ids (the
/// unsupervised evaluation path).
pub fn evaluate_with<P>(
    mut predictor: P,
    dataset: &[LabeledImage],
    indices: &[usize],
    patch: usize,
    class_count: usize,
    class_map: Option<&[usize]>,
) -> Result<EvalReport>
where
    P: FnMut(&LabeledImage) -> Result<Vec<usize>>,
{
    let mut cm = ConfusionMatrix::new(class_count);
    for &i in indices {
        let img = &dataset[i];
        let gt = patch_majority(&img.mask, patch, class_count);
        let pred = predictor(img)?;
        if pred.len() != gt.len() {
            return Err(invalid(format!(
                "predictor returned {} patches, expected {}",
                pred.len(),
                gt.len()
            )));
        }
        for (g, p) in gt.iter().zip(pred.iter()) {
            let mapped = class_map.map_or(*p, |m| m[*p]);
            cm.add(*g, mapped);
        }
    }
    let (m, per_class) = miou(&cm)?;
    Ok(EvalReport {
        confusion: cm,
        miou: m,
        per_class_iou: per_class,
    })
}

/// Checkpoint evaluation entry point.
pub fn evaluate(
    params: &TrainableParams,
    temperature: f64,
    dataset: &[LabeledImage],
    indices: &[usize],
    class_count: usize,
    class_map: Option<&[usize]>,
) -> Result<EvalReport> {
    if class_count != params.head.classes() {
        return Err(invalid(format!(
            "checkpoint has {} classes, dataset has {class_count}",
            params.head.classes()
        )));
    }
    evaluate_with(
        |img| predict_patches(params, &img.image, temperature),
        dataset,
        indices,
        params.encoder.cfg.patch,
        class_count,
        class_map,
    )
}

/// The full training loop.
pub fn train(cfg: &RunConfig, dataset: &[LabeledImage]) -> Result<TrainRun> {
    cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
    if dataset.is_empty() {
        return Err(invalid("dataset is empty"));
    }
    let class_count = cfg.dataset.class_count;
    let (labels, pseudo_sets, assignment) = prepare_labels(cfg, dataset)?;
    let (train_idx, heldout_idx) = split_indices(dataset.len(), cfg.heldout_fraction, cfg.seed);

    let train_labels: Vec<Vec<usize>> = train_idx.iter().map(|&i| labels[i].clone()).collect();
    let nu_d = class_frequencies::<f64>(&train_labels, class_count)?;
    let alpha_star = ground_truth_area(
        &train_idx.iter().map(|&i| dataset[i].clone()).collect::<Vec<_>>(),
        class_count,
    )?;

    let mut params = TrainableParams::init(cfg)?;
    let mut flat = params.flatten();
    let mut adam = Adam::new(flat.len());
    let mut area = init_area(nu_d.clone(), cfg.gamma)?;

    let k_patches = cfg.encoder.patches();
    let class_map: Option<Vec<usize>> = assignment.as_ref().map(|a| a.mapping.clone());

    let mut records: Vec<EpochRecord> = Vec::with_capacity(cfg.epochs);
    let mut steps: Vec<StepRecord> = Vec::new();
    let mut step_counter = 0usize;

    for epoch in 0..cfg.epochs {
        let epoch_start = Instant::now();
        let warmup = epoch < cfg.warmup_epochs;
        let lr = if warmup {
            cfg.learning_rate
        } else {
            cfg.learning_rate * cfg.lr_decay
        };
        let eps = cfg.epsilon_at(epoch);
        let mask = params.mask(warmup);

        let mut order = train_idx.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[2, epoch as u64]));
        order.shuffle(&mut rng);

        let mut epoch_match = 0.0;
        let mut epoch_mce = 0.0;
        let mut batch_count = 0usize;
        // Density slots for the accumulate mode.
        let mut acc_density: Vec<Option<Array1<f64>>> = vec![None; dataset.len()];

        for batch in order.chunks(cfg.batch_size) {
            // Views and alignments.
            let mut views = Vec::with_capacity(batch.len());
            let mut alignments = Vec::with_capacity(batch.len());
            for &i in batch {
                let pair = make_views(
                    &dataset[i].image,
                    derive_seed(cfg.seed, &[3, epoch as u64, i as u64]),
                    &cfg.view,
                )?;
                alignments.push(align_patches(&pair, cfg.encoder.patch)?);
                views.push(pair);
            }
            let global_views: Vec<&ImageTensor<f64>> =
                views.iter().map(|v| &v.global_view).collect();
            let local_views: Vec<&ImageTensor<f64>> =
                views.iter().map(|v| &v.local_view).collect();

            let g_pass = branch_forward(&params, &global_views, cfg.temperature)?;
            let l_pass = branch_forward(&params, &local_views, cfg.temperature)?;

            // Batch-level alignment mapping with per-image offsets.
            let mut mapping: Vec<Option<usize>> = Vec::with_capacity(batch.len() * k_patches);
            for (img_idx, align) in alignments.iter().enumerate() {
                for m in &align.mapping {
                    mapping.push(m.map(|g| img_idx * k_patches + g));
                }
            }

            // Column marginal from the batch labels.
            let batch_labels: Vec<Vec<usize>> =
                batch.iter().map(|&i| labels[i].clone()).collect();
            let nu_b: Array1<f64> = match cfg.nu_b_mode {
                NuBatchMode::Indicator => presence_indicator(&batch_labels, class_count),
                NuBatchMode::Fractional => {
                    class_frequencies::<f64>(&batch_labels, class_count)?
                        .weights()
                        .clone()
                }
            };
            let alpha = batch_rescale(&area.a_tilde, &nu_b, &nu_d)?;
            let per_image_alphas: Option<Vec<DiscreteMeasure<f64>>> = if cfg.per_image_ot {
                Some(
                    batch_labels
                        .iter()
                        .map(|ls| {
                            let nu = match cfg.nu_b_mode {
                                NuBatchMode::Indicator => {
                                    presence_indicator(std::slice::from_ref(ls), class_count)
                                }
                                NuBatchMode::Fractional => {
                                    class_frequencies::<f64>(
                                        std::slice::from_ref(ls),
                                        class_count,
                                    )?
                                    .weights()
                                    .clone()
                                }
                            };
                            batch_rescale(&area.a_tilde, &nu, &nu_d)
                        })
                        .collect::<Result<_>>()?,
                )
            } else {
                None
            };

            let q_g_values =
                plans_for(cfg, &g_pass.pred, &alpha, per_image_alphas.as_deref(), eps)?;
            let q_l_values =
                plans_for(cfg, &l_pass.pred, &alpha, per_image_alphas.as_deref(), eps)?;
            let q_g = coupling_from(q_g_values, &alpha)?;
            let q_l = coupling_from(q_l_values, &alpha)?;

            let (match_result, d_match_g, d_match_l) =
                batch_match_loss(cfg, &g_pass.pred, &l_pass.pred, &q_g, &q_l, &mapping)?;

            // MCE on pooled global scores.
            let y = label_indicator::<f64>(&batch_labels, class_count);
            let (mce, d_p_pool) =
                pooled_mce(cfg, &g_pass.pred, batch.len(), k_patches, class_count, &y)?;
            let d_mce_logits = softmax_logit_grad(g_pass.pred.values(), &d_p_pool);

            let breakdown = pc2m_breakdown(match_result.value, match_result.entropy_terms, mce.value);
            if !breakdown.total.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss at epoch {epoch} step {step_counter}: match {} mce {}; batch images {:?}",
                    breakdown.match_term, breakdown.mce, batch
                )));
            }

            // Assemble gradients; during warm-up only the MCE path flows.
            let mut enc_grads = params.encoder.zeros_like();
            let mut head_grad = Array2::<f64>::zeros(params.head.values.dim());
            let d_g_total = if warmup {
                d_mce_logits.clone()
            } else {
                &d_match_g + &d_mce_logits
            };
            branch_backward(&params, &g_pass, &d_g_total, &mut enc_grads, &mut head_grad);
            if !warmup {
                branch_backward(&params, &l_pass, &d_match_l, &mut enc_grads, &mut head_grad);
            }

            let mut grads = enc_grads.flatten();
            grads.extend(head_grad.iter().cloned());
            let grad_norm = grads
                .iter()
                .zip(mask.iter())
                .filter(|(_, &m)| m)
                .map(|(g, _)| g * g)
                .sum::<f64>()
                .sqrt();
            if !grad_norm.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite gradient at epoch {epoch} step {step_counter}; batch images {:?}",
                    batch
                )));
            }

            adam.step(&mut flat, &grads, lr, &mask);
            params.assign_from_flat(&flat);

            // Accumulate-mode densities from the global branch, keyed by
            // dataset index so worker order cannot matter.
            if !cfg.strict_density {
                for (i, &img_idx) in batch.iter().enumerate() {
                    let block = g_pass
                        .pred
                        .values()
                        .slice(ndarray::s![i * k_patches..(i + 1) * k_patches, ..]);
                    let mut q = Array1::<f64>::zeros(class_count);
                    for row in block.outer_iter() {
                        q += &row;
                    }
                    acc_density[img_idx] = Some(q / k_patches as f64);
                }
            }

            steps.push(StepRecord {
                step: step_counter,
                match_loss: breakdown.match_term,
                mce_loss: breakdown.mce,
                total_loss: breakdown.total,
                grad_norm,
            });
            step_counter += 1;
            epoch_match += breakdown.match_term;
            epoch_mce += breakdown.mce;
            batch_count += 1;
        }

        // Offline area update: mean density over the training set, in fixed
        // index order for bit reproducibility.
        let mut mean_density = Array1::<f64>::zeros(class_count);
        for &i in &train_idx {
            let q = if cfg.strict_density {
                let f = crate::encoder::encode(&dataset[i].image, &params.encoder)?;
                let p = crate::head::predict(&f, &params.head, cfg.temperature)?;
                image_density(&p)?.q.weights().clone()
            } else {
                acc_density[i]
                    .clone()
                    .expect("every training image is visited each epoch")
            };
            mean_density += &q;
        }
        mean_density /= train_idx.len() as f64;
        let mean_density = DiscreteMeasure::new(mean_density, MeasureRole::AreaState)?;
        let prev_a = area.a_tilde.clone();
        area = ema_update(&area, &mean_density, cfg.gamma)?;

        let report = evaluate(
            &params,
            cfg.temperature,
            dataset,
            &heldout_idx,
            class_count,
            class_map.as_deref(),
        )?;

        let wall = if cfg.reproducible {
            0.0
        } else {
            epoch_start.elapsed().as_secs_f64()
        };
        records.push(EpochRecord {
            epoch,
            match_loss: epoch_match / batch_count.max(1) as f64,
            mce_loss: epoch_mce / batch_count.max(1) as f64,
            total_loss: (epoch_match + epoch_mce) / batch_count.max(1) as f64,
            miou: report.miou,
            area_entropy: area.a_tilde.entropy(),
            djs_prev: js_divergence(&area.a_tilde, &prev_a)?,
            djs_star: js_divergence(&alpha_star, &area.a_tilde)?,
            a_tilde: area.a_tilde.weights().to_vec(),
            wall_secs: wall,
        });
    }

    let final_report = evaluate(
        &params,
        cfg.temperature,
        dataset,
        &heldout_idx,
        class_count,
        class_map.as_deref(),
    )?;
    let labels_used = labels;
    Ok(TrainRun {
        config: cfg.clone(),
        params,
        area,
        records,
        steps,
        labels_used,
        pseudo_sets,
        assignment,
        train_idx,
        heldout_idx,
        final_report,
    })
}

/// Generates (or reuses) the configured dataset and trains.
pub fn train_from_config(cfg: &RunConfig) -> Result<TrainRun> {
    let dataset = gen_dataset(&cfg.dataset)?;
    train(cfg, &dataset)
}

/// Unsupervised entry point: forces the mode, returns the run together with
/// the raw pseudo-label sets for persistence.
pub fn run_unsupervised(cfg: &RunConfig, dataset: &[LabeledImage]) -> Result<TrainRun> {
    let mut cfg = cfg.clone();
    cfg.mode = Mode::Unsupervised;
    train(&cfg, dataset)
}

/// One sweep row: the swept value with the run's final summary.
#[derive(Clone, Debug)]
pub struct SweepRow {
    pub value: f64,
    pub seed: u64,
    pub miou: f64,
    pub area_entropy: f64,
    pub label_f1_micro: f64,
    pub label_f1_macro: f64,
}

/// Which parameter a sweep varies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    Gamma,
    Beta,
}

impl std::str::FromStr for SweepParam {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gamma" => Ok(SweepParam::Gamma),
            "beta" => Ok(SweepParam::Beta),
            other => Err(Error::Config(format!(
                "sweep parameter must be gamma|beta, got '{other}'"
            ))),
        }
    }
}

/// Trains once per value (shared seeds and dataset) and reports final mIoU,
/// area entropy, and the F1 of the labels actually used against ground truth.
pub fn sweep(
    base: &RunConfig,
    param: SweepParam,
    values: &[f64],
    dataset: &[LabeledImage],
) -> Result<Vec<SweepRow>> {
    if values.len() < 2 {
        return Err(Error::Config("sweep needs at least two values".into()));
    }
    let gt: Vec<Vec<usize>> = dataset.iter().map(|d| d.labels.clone()).collect();
    let mut rows = Vec::with_capacity(values.len());
    for &v in values {
        let mut cfg = base.clone();
        match param {
            SweepParam::Gamma => cfg.gamma = v,
            SweepParam::Beta => {
                cfg.mode = Mode::BetaMix;
                cfg.beta = v;
            }
        }
        let run = train(&cfg, dataset)?;
        let (micro, macro_f1) = crate::metrics::f1_scores(&run.labels_used, &gt)?;
        rows.push(SweepRow {
            value: v,
            seed: cfg.seed,
            miou: run.final_report.miou,
            area_entropy: run.area.a_tilde.entropy(),
            label_f1_micro: micro,
            label_f1_macro: macro_f1,
        });
    }
    Ok(rows)
}

/// Frozen inputs for the full-objective gradient check: plans and alignments
/// are constants, so the check exercises exactly the implemented gradient
/// path.
pub struct FrozenBatch {
    pub global_views: Vec<ImageTensor<f64>>,
    pub local_views: Vec<ImageTensor<f64>>,
    pub mapping: Vec<Option<usize>>,
    pub labels: Vec<Vec<usize>>,
    pub q_g: CouplingMatrix<f64>,
    pub q_l: CouplingMatrix<f64>,
    pub temperature: f64,
    pub class_count: usize,
}

/// Builds a small frozen batch from the first `b` images of a dataset using
/// the current parameters to produce the plans.
pub fn freeze_batch(
    cfg: &RunConfig,
    dataset: &[LabeledImage],
    params: &TrainableParams,
    b: usize,
) -> Result<FrozenBatch> {
    let class_count = cfg.dataset.class_count;
    let k_patches = cfg.encoder.patches();
    let mut global_views = Vec::new();
    let mut local_views = Vec::new();
    let mut mapping = Vec::new();
    let mut labels = Vec::new();
    for (i, img) in dataset.iter().take(b).enumerate() {
        let pair = make_views(&img.image, derive_seed(cfg.seed, &[13, i as u64]), &cfg.view)?;
        let align = align_patches(&pair, cfg.encoder.patch)?;
        for m in &align.mapping {
            mapping.push(m.map(|g| i * k_patches + g));
        }
        global_views.push(pair.global_view);
        local_views.push(pair.local_view);
        labels.push(img.labels.clone());
    }
    let g_refs: Vec<&ImageTensor<f64>> = global_views.iter().collect();
    let l_refs: Vec<&ImageTensor<f64>> = local_views.iter().collect();
    let g_pass = branch_forward(params, &g_refs, cfg.temperature)?;
    let l_pass = branch_forward(params, &l_refs, cfg.temperature)?;
    let nu_d = class_frequencies::<f64>(&labels, class_count)?;
    let nu_b = presence_indicator::<f64>(&labels, class_count);
    let alpha = batch_rescale(
        &init_area(nu_d.clone(), cfg.gamma)?.a_tilde,
        &nu_b,
        &nu_d,
    )?;
    let q_g = coupling_from(plans_for(cfg, &g_pass.pred, &alpha, None, 1.0)?, &alpha)?;
    let q_l = coupling_from(plans_for(cfg, &l_pass.pred, &alpha, None, 1.0)?, &alpha)?;
    Ok(FrozenBatch {
        global_views,
        local_views,
        mapping,
        labels,
        q_g,
        q_l,
        temperature: cfg.temperature,
        class_count,
    })
}

/// Full objective on a frozen batch: value only.
pub fn pc2m_value(params: &TrainableParams, batch: &FrozenBatch) -> Result<LossBreakdown<f64>> {
    pc2m_forward(params, batch).map(|(b, _, _)| b)
}

/// Full objective on a frozen batch with analytic flat gradients.
pub fn pc2m_value_and_grads(
    params: &TrainableParams,
    batch: &FrozenBatch,
) -> Result<(LossBreakdown<f64>, Vec<f64>)> {
    let (breakdown, d_g, d_l) = pc2m_forward(params, batch)?;
    let g_refs: Vec<&ImageTensor<f64>> = batch.global_views.iter().collect();
    let l_refs: Vec<&ImageTensor<f64>> = batch.local_views.iter().collect();
    let g_pass = branch_forward(params, &g_refs, batch.temperature)?;
    let l_pass = branch_forward(params, &l_refs, batch.temperature)?;
    let mut enc_grads = params.encoder.zeros_like();
    let mut head_grad = Array2::<f64>::zeros(params.head.values.dim());
    branch_backward(params, &g_pass, &d_g, &mut enc_grads, &mut head_grad);
    branch_backward(params, &l_pass, &d_l, &mut enc_grads, &mut head_grad);
    let mut grads = enc_grads.flatten();
    grads.extend(head_grad.iter().cloned());
    Ok((breakdown, grads))
}

fn pc2m_forward(
    params: &TrainableParams,
    batch: &FrozenBatch,
) -> Result<(LossBreakdown<f64>, Array2<f64>, Array2<f64>)> {
    let k_patches = params.encoder.cfg.patches();
    let g_refs: Vec<&ImageTensor<f64>> = batch.global_views.iter().collect();
    let l_refs: Vec<&ImageTensor<f64>> = batch.local_views.iter().collect();
    let g_pass = branch_forward(params, &g_refs, batch.temperature)?;
    let l_pass = branch_forward(params, &l_refs, batch.temperature)?;
    let match_result = match_loss(
        &g_pass.pred,
        &l_pass.pred,
        &batch.q_g,
        &batch.q_l,
        &batch.mapping,
    )?;
    let b = batch.global_views.len();
    let mut pooled = Array2::<f64>::zeros((b, batch.class_count));
    let mut argmax_rows = Vec::with_capacity(b);
    for i in 0..b {
        let block = g_pass
            .pred
            .values()
            .slice(ndarray::s![i * k_patches..(i + 1) * k_patches, ..])
            .to_owned();
        let p = PredictionMatrix::new(block)?;
        let (scores, rows) = pool_image_scores(&p);
        pooled.row_mut(i).assign(&scores);
        argmax_rows.push(rows);
    }
    let y = label_indicator::<f64>(&batch.labels, batch.class_count);
    let mce = mce_loss(&pooled, &y)?;
    let mut d_p_pool = Array2::<f64>::zeros(g_pass.pred.values().dim());
    for (i, rows) in argmax_rows.iter().enumerate() {
        for (c, &k_star) in rows.iter().enumerate() {
            d_p_pool[[i * k_patches + k_star, c]] += mce.d_scores[[i, c]];
        }
    }
    let d_mce = softmax_logit_grad(g_pass.pred.values(), &d_p_pool);
    let d_g = &match_result.d_logits_global + &d_mce;
    let d_l = match_result.d_logits_local.clone();
    Ok((
        pc2m_breakdown(match_result.value, match_result.entropy_terms, mce.value),
        d_g,
        d_l,
    ))
}

/// Checkpoint persistence: parameters, area state, and the scalars needed to
/// rebuild them.
pub fn save_checkpoint(
    path: &Path,
    params: &TrainableParams,
    area: &AreaState<f64>,
    temperature: f64,
) -> Result<()> {
    let cfg = params.encoder.cfg;
    let mut arrays = vec![
        NamedArray::scalar("meta.view_side", cfg.view_side as f64),
        NamedArray::scalar("meta.patch", cfg.patch as f64),
        NamedArray::scalar("meta.embed", cfg.embed as f64),
        NamedArray::scalar("meta.hidden", cfg.hidden as f64),
        NamedArray::scalar("meta.blocks", cfg.blocks as f64),
        NamedArray::scalar("meta.classes", params.head.classes() as f64),
        NamedArray::scalar("meta.temperature", temperature),
        NamedArray::scalar("meta.epoch", area.epoch as f64),
        NamedArray::scalar("meta.gamma", area.gamma),
        NamedArray::scalar("meta.encoder_seed", params.encoder.seed as f64),
    ];
    let flat = params.flatten();
    arrays.push(NamedArray::new("params.flat", vec![flat.len()], flat)?);
    arrays.push(NamedArray::new(
        "area.a_tilde",
        vec![area.a_tilde.len()],
        area.a_tilde.weights().to_vec(),
    )?);
    write_named_arrays(path, &arrays)
}

/// Loaded checkpoint contents.
pub struct Checkpoint {
    pub params: TrainableParams,
    pub area: AreaState<f64>,
    pub temperature: f64,
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let arrays = read_named_arrays(path)?;
    let scalar = |name: &str| -> Result<f64> { Ok(find_array(&arrays, name)?.data[0]) };
    let cfg = crate::encoder::EncoderConfig {
        view_side: scalar("meta.view_side")? as usize,
        patch: scalar("meta.patch")? as usize,
        embed: scalar("meta.embed")? as usize,
        hidden: scalar("meta.hidden")? as usize,
        blocks: scalar("meta.blocks")? as usize,
    };
    let classes = scalar("meta.classes")? as usize;
    let mut params = TrainableParams {
        encoder: EncoderParams::init(cfg, scalar("meta.encoder_seed")? as u64)?,
        head: ProjectionWeights::init(cfg.embed, classes, 0),
    };
    let flat = &find_array(&arrays, "params.flat")?.data;
    if flat.len() != params.flatten().len() {
        return Err(Error::Format(format!(
            "checkpoint has {} parameters, expected {}",
            flat.len(),
            params.flatten().len()
        )));
    }
    params.assign_from_flat(flat);
    let a = find_array(&arrays, "area.a_tilde")?;
    let area = AreaState {
        a_tilde: DiscreteMeasure::new(
            Array1::from_vec(a.data.clone()),
            MeasureRole::AreaState,
        )?,
        epoch: scalar("meta.epoch")? as usize,
        gamma: scalar("meta.gamma")?,
    };
    Ok(Checkpoint {
        params,
        area,
        temperature: scalar("meta.temperature")?,
    })
}
