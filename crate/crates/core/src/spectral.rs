//! Unsupervised pseudo-label generation: patch affinity graph, normalized
//! Laplacian, eigendecomposition, per-image region clustering, crop
//! extraction, and dataset-wide k-means over crop features.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{encode, EncoderParams};
use crate::error::{invalid, Error, Result};
use crate::image::{ImageTensor, Rect};
use crate::scalar::Scalar;

/// Patch affinity graph with its degree vector and normalized Laplacian
/// L = D^{−1/2}(D−A)D^{−1/2}.
#[derive(Clone, Debug)]
pub struct AffinityGraph<F: Scalar> {
    pub a: Array2<F>,
    pub degree: Array1<F>,
    pub laplacian: Array2<F>,
    /// Vertices whose degree needed the floor (all-zero feature rows).
    pub isolated: Vec<usize>,
}

const DEGREE_FLOOR: f64 = 1e-12;

/// Inner-product affinity of L2-normalized feature rows, rectified at zero.
pub fn patch_affinity<F: Scalar>(features: &Array2<F>) -> Result<AffinityGraph<F>> {
    if features.is_empty() {
        return Err(invalid("affinity needs at least one feature row"));
    }
    if features.iter().any(|x| !x.is_finite()) {
        return Err(invalid("features must be finite"));
    }
    let n = features.nrows();
    let mut normed = features.clone();
    let mut isolated = Vec::new();
    for (i, mut row) in normed.outer_iter_mut().enumerate() {
        let norm = row.iter().map(|&x| x * x).sum::<F>().sqrt();
        if norm > F::zero() {
            row.mapv_inplace(|x| x / norm);
        } else {
            isolated.push(i);
        }
    }
    let mut a = normed.dot(&normed.t());
    a.mapv_inplace(|x| x.max(F::zero()));
    // Exact symmetry despite float rounding in the product.
    for i in 0..n {
        for j in (i + 1)..n {
            let m = (a[[i, j]] + a[[j, i]]) / F::of(2.0);
            a[[i, j]] = m;
            a[[j, i]] = m;
        }
    }
    let mut degree = a.sum_axis(Axis(1));
    let floor = F::of(DEGREE_FLOOR);
    for (i, d) in degree.iter_mut().enumerate() {
        if *d <= F::zero() {
            *d = floor;
            if !isolated.contains(&i) {
                isolated.push(i);
            }
        }
    }
    let inv_sqrt: Array1<F> = degree.mapv(|d| F::one() / d.sqrt());
    let mut laplacian = Array2::<F>::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            let d_minus_a = if i == j {
                degree[i] - a[[i, j]]
            } else {
                -a[[i, j]]
            };
            laplacian[[i, j]] = inv_sqrt[i] * d_minus_a * inv_sqrt[j];
        }
    }
    Ok(AffinityGraph {
        a,
        degree,
        laplacian,
        isolated,
    })
}

/// Ascending eigenpairs of the Laplacian.
#[derive(Clone, Debug)]
pub struct EigenBasis<F: Scalar> {
    pub eigenvalues: Vec<F>,
    /// n×k_e matrix, column i pairs with `eigenvalues[i]`.
    pub eigenvectors: Array2<F>,
}

const EIGEN_RESIDUAL_TOL: f64 = 1e-6;
const JACOBI_MAX_SWEEPS: usize = 100;

/// The `k_e` smallest eigenpairs via cyclic Jacobi rotations (dense, exact
/// for the graph sizes used here). Residuals above 1e-6 are an error.
pub fn eigendecompose<F: Scalar>(g: &AffinityGraph<F>, k_e: usize) -> Result<EigenBasis<F>> {
    let n = g.laplacian.nrows();
    if k_e == 0 || k_e > n {
        return Err(invalid(format!(
            "requested {k_e} eigenpairs from a {n}-vertex graph"
        )));
    }
    let (values, vectors) = jacobi_eigen(&g.laplacian)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite"));
    let mut eigenvalues = Vec::with_capacity(k_e);
    let mut eigenvectors = Array2::<F>::zeros((n, k_e));
    for (out_col, &src) in order.iter().take(k_e).enumerate() {
        eigenvalues.push(values[src]);
        let mut col: Vec<F> = vectors.column(src).to_vec();
        canonical_sign(&mut col);
        for (i, &x) in col.iter().enumerate() {
            eigenvectors[[i, out_col]] = x;
        }
    }
    // Residual check against the original matrix.
    for (c, &lambda) in eigenvalues.iter().enumerate() {
        let v = eigenvectors.column(c);
        let lv = g.laplacian.dot(&v);
        let resid = lv
            .iter()
            .zip(v.iter())
            .map(|(&a, &b)| (a - lambda * b).abs())
            .fold(F::zero(), F::max);
        if resid.as_f64() > EIGEN_RESIDUAL_TOL {
            return Err(Error::EigenNotConverged {
                residual: resid.as_f64(),
            });
        }
    }
    Ok(EigenBasis {
        eigenvalues,
        eigenvectors,
    })
}

/// Flips a vector so its largest-magnitude entry is positive.
fn canonical_sign<F: Scalar>(v: &mut [F]) {
    let mut best = 0usize;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < F::zero() {
        for x in v.iter_mut() {
            *x = -*x;
        }
    }
}

/// Full symmetric eigendecomposition by cyclic Jacobi sweeps.
fn jacobi_eigen<F: Scalar>(m: &Array2<F>) -> Result<(Vec<F>, Array2<F>)> {
    let n = m.nrows();
    let mut a = m.clone();
    let mut v = Array2::<F>::eye(n);
    let scale = m
        .iter()
        .map(|x| x.abs())
        .fold(F::zero(), F::max)
        .max(F::one());
    let stop = F::of(1e-14) * scale;
    for _ in 0..JACOBI_MAX_SWEEPS {
        let off = off_diagonal_norm(&a);
        if off <= stop {
            break;
        }
        for p in 0..n - 1 {
            for q in (p + 1)..n {
                let apq = a[[p, q]];
                if apq.abs() <= stop / F::of((n * n) as f64) {
                    continue;
                }
                let app = a[[p, p]];
                let aqq = a[[q, q]];
                let tau = (aqq - app) / (F::of(2.0) * apq);
                let t = if tau >= F::zero() {
                    F::one() / (tau + (F::one() + tau * tau).sqrt())
                } else {
                    -F::one() / (-tau + (F::one() + tau * tau).sqrt())
                };
                let c = F::one() / (F::one() + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[[k, p]];
                    let akq = a[[k, q]];
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[[p, k]];
                    let aqk = a[[q, k]];
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let off = off_diagonal_norm(&a);
    if off > F::of(1e-8) * scale {
        return Err(Error::EigenNotConverged {
            residual: off.as_f64(),
        });
    }
    let values: Vec<F> = (0..n).map(|i| a[[i, i]]).collect();
    Ok((values, v))
}

fn off_diagonal_norm<F: Scalar>(a: &Array2<F>) -> F {
    let n = a.nrows();
    let mut s = F::zero();
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a[[i, j]] * a[[i, j]];
            }
        }
    }
    s.sqrt()
}

/// Inclusive patch-cell bounding box of one region.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RegionBox {
    pub row0: usize,
    pub col0: usize,
    pub row1: usize,
    pub col1: usize,
}

impl RegionBox {
    /// Pixel rectangle covered by the box for patch size `d`.
    pub fn pixel_rect(&self, d: usize) -> Rect {
        Rect {
            x: (self.col0 * d) as f64,
            y: (self.row0 * d) as f64,
            width: ((self.col1 - self.col0 + 1) * d) as f64,
            height: ((self.row1 - self.row0 + 1) * d) as f64,
        }
    }
}

/// Partition of the patch grid into regions with bounding boxes.
#[derive(Clone, Debug)]
pub struct RegionSet {
    /// Region id per patch (row-major grid order).
    pub assignments: Vec<usize>,
    pub boxes: Vec<RegionBox>,
    pub grid: usize,
    /// Set when fewer regions than requested could be formed.
    pub degenerate: bool,
}

/// K-means over eigenvector rows (the trivial first eigenvector excluded),
/// mapped back to the patch grid.
pub fn cluster_eigenvectors<F: Scalar>(
    basis: &EigenBasis<F>,
    n_regions: usize,
    seed: u64,
    grid: usize,
) -> Result<RegionSet> {
    if n_regions == 0 {
        return Err(invalid("need at least one region"));
    }
    let n = basis.eigenvectors.nrows();
    if grid * grid != n {
        return Err(invalid(format!(
            "eigenvector rows {n} do not form a {grid}x{grid} patch grid"
        )));
    }
    let cols = basis.eigenvectors.ncols();
    let data = if cols > 1 {
        basis
            .eigenvectors
            .slice(ndarray::s![.., 1..])
            .mapv(|x| x.as_f64())
    } else {
        basis.eigenvectors.mapv(|x| x.as_f64())
    };
    // Count distinct rows; degenerate inputs get fewer regions.
    let mut distinct: Vec<Vec<f64>> = Vec::new();
    for row in data.outer_iter() {
        let r: Vec<f64> = row.to_vec();
        if !distinct
            .iter()
            .any(|d| d.iter().zip(&r).all(|(a, b)| (a - b).abs() <= 1e-12))
        {
            distinct.push(r);
        }
    }
    let k = n_regions.min(distinct.len());
    let (mut assignments, _) = kmeans(&data, k, seed, 50);
    compact_labels(&mut assignments);
    let k_eff = assignments.iter().max().map_or(0, |&m| m + 1);
    let mut boxes = vec![
        RegionBox {
            row0: usize::MAX,
            col0: usize::MAX,
            row1: 0,
            col1: 0,
        };
        k_eff
    ];
    for (idx, &r) in assignments.iter().enumerate() {
        let row = idx / grid;
        let col = idx % grid;
        let b = &mut boxes[r];
        b.row0 = b.row0.min(row);
        b.col0 = b.col0.min(col);
        b.row1 = b.row1.max(row);
        b.col1 = b.col1.max(col);
    }
    Ok(RegionSet {
        assignments,
        boxes,
        grid,
        degenerate: k_eff < n_regions,
    })
}

/// Renumbers labels to 0..k by first appearance, dropping gaps from empty
/// clusters.
fn compact_labels(labels: &mut [usize]) {
    let mut map: Vec<Option<usize>> = vec![None; labels.iter().max().map_or(0, |&m| m + 1)];
    let mut next = 0usize;
    for l in labels.iter_mut() {
        let m = &mut map[*l];
        if m.is_none() {
            *m = Some(next);
            next += 1;
        }
        *l = m.unwrap();
    }
}

/// Seeded k-means++ with a fixed number of Lloyd iterations; ties break to
/// the lowest center index.
pub fn kmeans(data: &Array2<f64>, k: usize, seed: u64, iters: usize) -> (Vec<usize>, Array2<f64>) {
    let n = data.nrows();
    let dim = data.ncols();
    assert!(k >= 1 && k <= n, "k must lie in 1..=n");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = Array2::<f64>::zeros((k, dim));

    // k-means++ seeding.
    let first = rng.gen_range(0..n);
    centers.row_mut(0).assign(&data.row(first));
    let mut d2: Vec<f64> = (0..n)
        .map(|i| sq_dist(&data.row(i).to_vec(), &centers.row(0).to_vec()))
        .collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total <= 0.0 {
            // All points coincide with existing centers.
            rng.gen_range(0..n)
        } else {
            let mut target = rng.gen_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        };
        centers.row_mut(c).assign(&data.row(pick));
        for i in 0..n {
            let nd = sq_dist(&data.row(i).to_vec(), &centers.row(c).to_vec());
            if nd < d2[i] {
                d2[i] = nd;
            }
        }
    }

    let mut assignments = vec![0usize; n];
    for _ in 0..iters {
        // Assignment step.
        for i in 0..n {
            let mut best = f64::INFINITY;
            let mut best_c = 0usize;
            for c in 0..k {
                let d = sq_dist(&data.row(i).to_vec(), &centers.row(c).to_vec());
                if d < best {
                    best = d;
                    best_c = c;
                }
            }
            assignments[i] = best_c;
        }
        // Update step; empty clusters keep their previous center.
        let mut sums = Array2::<f64>::zeros((k, dim));
        let mut counts = vec![0usize; k];
        for (i, &c) in assignments.iter().enumerate() {
            let mut row = sums.row_mut(c);
            row += &data.row(i);
            counts[c] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for j in 0..dim {
                    centers[[c, j]] = sums[[c, j]] * inv;
                }
            }
        }
    }
    // Final assignment against the last centers.
    for i in 0..n {
        let mut best = f64::INFINITY;
        let mut best_c = 0usize;
        for c in 0..k {
            let d = sq_dist(&data.row(i).to_vec(), &centers.row(c).to_vec());
            if d < best {
                best = d;
                best_c = c;
            }
        }
        assignments[i] = best_c;
    }
    (assignments, centers)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Per-image cluster-id set, ids in 1..=k.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PseudoLabelSet {
    pub labels: Vec<usize>,
}

/// Crops every region's bounding box, resizes to the encoder input size,
/// pools the encoded patches into one feature per crop, and k-means all
/// crops dataset-wide; each image's pseudo-labels are its crops' cluster ids.
pub fn crops_and_global_kmeans<F: Scalar>(
    images: &[ImageTensor<F>],
    regions: &[RegionSet],
    params: &EncoderParams<F>,
    k: usize,
    seed: u64,
) -> Result<Vec<PseudoLabelSet>> {
    if images.len() != regions.len() {
        return Err(invalid("images and region sets differ in length"));
    }
    let d = params.cfg.patch;
    let mut feats: Vec<Vec<f64>> = Vec::new();
    let mut owner: Vec<usize> = Vec::new();
    for (idx, (img, rs)) in images.iter().zip(regions.iter()).enumerate() {
        if rs.assignments.is_empty() {
            return Err(invalid(format!("image {idx} has no regions")));
        }
        for b in &rs.boxes {
            let crop = img.crop_resize(b.pixel_rect(d), params.cfg.view_side)?;
            let f = encode(&crop, params)?;
            let pooled = f.values.mean_axis(Axis(0)).expect("non-empty");
            feats.push(pooled.iter().map(|x| x.as_f64()).collect());
            owner.push(idx);
        }
    }
    if k > feats.len() {
        return Err(invalid(format!(
            "k = {k} exceeds the number of crops ({})",
            feats.len()
        )));
    }
    let dim = feats[0].len();
    let data = Array2::from_shape_fn((feats.len(), dim), |(i, j)| feats[i][j]);
    let (assignments, _) = kmeans(&data, k, seed, 50);
    let mut out = vec![
        PseudoLabelSet {
            labels: Vec::new()
        };
        images.len()
    ];
    for (crop_idx, &img_idx) in owner.iter().enumerate() {
        let id = assignments[crop_idx] + 1;
        if !out[img_idx].labels.contains(&id) {
            out[img_idx].labels.push(id);
        }
    }
    for set in &mut out {
        set.labels.sort_unstable();
        debug_assert!(!set.labels.is_empty());
    }
    Ok(out)
}
