//! Deterministic synthetic dataset: textured geometric shapes on a
//! background, with exact per-pixel masks, multi-label sets, and a known
//! ground-truth class-area distribution.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Result};
use crate::image::ImageTensor;
use crate::measure::{DiscreteMeasure, MeasureRole};
use crate::seeds::derive_seed;

/// Flat color plus optional stripes; pixel noise is added on top.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassSignature {
    pub color: [f64; 3],
    pub stripes: Option<Stripes>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stripes {
    pub period: usize,
    pub amplitude: f64,
    pub vertical: bool,
}

/// Generator parameters. Class 0 is the background, present in every image;
/// `class_weights` weight the non-background classes.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub seed: u64,
    pub image_count: usize,
    pub class_count: usize,
    pub image_size: usize,
    pub signatures: Vec<ClassSignature>,
    pub shapes_per_image: (usize, usize),
    pub class_weights: Vec<f64>,
    pub noise_sigma: f64,
}

impl DatasetSpec {
    /// Desk-scale default: 5 classes (background + 4 shapes) on 32×32 images.
    pub fn desk(seed: u64, image_count: usize) -> Self {
        Self {
            seed,
            image_count,
            class_count: 5,
            image_size: 32,
            signatures: default_signatures(5),
            shapes_per_image: (1, 3),
            class_weights: vec![3.0, 0.8, 2.0, 0.8],
            noise_sigma: 0.05,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.class_count < 2 {
            return Err(invalid("need at least background plus one class"));
        }
        if self.signatures.len() != self.class_count {
            return Err(invalid(format!(
                "{} signatures for {} classes",
                self.signatures.len(),
                self.class_count
            )));
        }
        if self.class_weights.len() != self.class_count - 1 {
            return Err(invalid(
                "class_weights must cover the non-background classes",
            ));
        }
        if self.class_weights.iter().all(|&w| w <= 0.0) {
            return Err(invalid("at least one class weight must be positive"));
        }
        let (lo, hi) = self.shapes_per_image;
        if lo == 0 || lo > hi || hi > self.class_count - 1 {
            return Err(invalid(format!(
                "shapes-per-image range ({lo}, {hi}) invalid for {} shape classes",
                self.class_count - 1
            )));
        }
        if self.image_count == 0 || self.image_size < 8 {
            return Err(invalid("dataset must have images of size >= 8"));
        }
        Ok(())
    }
}

/// Distinct signatures with pairwise mean-color distance >= 0.3. The palette
/// deliberately contains two confusable pairs (red/orange and green/teal) so
/// unaided self-labelling has something to get wrong; the background carries
/// subtle stripes.
pub fn default_signatures(class_count: usize) -> Vec<ClassSignature> {
    let palette = [
        [0.15, 0.15, 0.15], // background: dark gray
        [0.85, 0.20, 0.20], // red
        [0.85, 0.52, 0.20], // orange, near red
        [0.20, 0.80, 0.25], // green
        [0.20, 0.80, 0.56], // teal, near green
        [0.80, 0.20, 0.80], // magenta
        [0.25, 0.30, 0.85], // blue
        [0.90, 0.90, 0.35], // yellow
    ];
    (0..class_count)
        .map(|c| ClassSignature {
            color: palette[c % palette.len()],
            stripes: (c == 0).then_some(Stripes {
                period: 4,
                amplitude: 0.06,
                vertical: false,
            }),
        })
        .collect()
}

/// One generated image with its dense mask and multi-label set.
#[derive(Clone, Debug)]
pub struct LabeledImage {
    pub image: ImageTensor<f64>,
    /// Per-pixel class index, class 0 = background.
    pub mask: Array2<u8>,
    /// Sorted set of classes present in the mask (always contains 0).
    pub labels: Vec<usize>,
}

#[derive(Clone, Copy)]
enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

/// Generates the dataset; bit-deterministic for a given spec, with per-image
/// seeds derived as hash(seed, index) so any evaluation order agrees.
pub fn gen_dataset(spec: &DatasetSpec) -> Result<Vec<LabeledImage>> {
    spec.validate()?;
    (0..spec.image_count)
        .map(|i| gen_image(spec, i, derive_seed(spec.seed, &[1, i as u64])))
        .collect()
}

fn gen_image(spec: &DatasetSpec, id: usize, seed: u64) -> Result<LabeledImage> {
    let n = spec.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = Array2::<u8>::zeros((n, n));

    let shape_count = rng.gen_range(spec.shapes_per_image.0..=spec.shapes_per_image.1);
    let classes = sample_distinct_weighted(&mut rng, &spec.class_weights, shape_count);

    let mut placed: Vec<(ShapeKind, usize, usize, usize, usize)> = Vec::new(); // kind, cy, cx, size, class
    for (order, &class) in classes.iter().enumerate() {
        // Later shapes start smaller so crowded images resolve quickly.
        let hi = (n / 4).saturating_sub(order).max(n / 6);
        let mut size = rng.gen_range(n / 6..=hi).max(3);
        let mut attempts = 0usize;
        loop {
            attempts += 1;
            if attempts > 100 {
                return Err(invalid(format!(
                    "could not place shape for class {class} in image {id} after 100 attempts"
                )));
            }
            let kind = match rng.gen_range(0..3) {
                0 => ShapeKind::Circle,
                1 => ShapeKind::Square,
                _ => ShapeKind::Triangle,
            };
            let cy = rng.gen_range(size..n - size);
            let cx = rng.gen_range(size..n - size);
            if !overlaps(&mask, kind, cy, cx, size) {
                stamp(&mut mask, kind, cy, cx, size, class as u8);
                placed.push((kind, cy, cx, size, class));
                break;
            }
            // Shrink on repeated failures so crowded images still resolve.
            if attempts % 3 == 0 && size > 3 {
                size -= 1;
            }
        }
    }

    // Render textures + noise over the mask.
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| invalid(e.to_string()))?;
    let mut pixels = Array3::<f64>::zeros((n, n, 3));
    for y in 0..n {
        for x in 0..n {
            let sig = &spec.signatures[mask[[y, x]] as usize];
            let stripe = sig.stripes.map_or(0.0, |s| {
                let coord = if s.vertical { x } else { y };
                if (coord / s.period) % 2 == 0 {
                    s.amplitude
                } else {
                    -s.amplitude
                }
            });
            for c in 0..3 {
                let v = sig.color[c] + stripe + noise.sample(&mut rng);
                pixels[[y, x, c]] = v.clamp(0.0, 1.0);
            }
        }
    }

    let mut labels: Vec<usize> = std::iter::once(0).chain(classes).collect();
    labels.sort_unstable();
    labels.dedup();
    Ok(LabeledImage {
        image: ImageTensor::new(pixels, id)?,
        mask,
        labels,
    })
}

fn sample_distinct_weighted(rng: &mut ChaCha8Rng, weights: &[f64], count: usize) -> Vec<usize> {
    let mut pool: Vec<(usize, f64)> = weights
        .iter()
        .enumerate()
        .filter(|(_, &w)| w > 0.0)
        .map(|(i, &w)| (i + 1, w))
        .collect();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count.min(pool.len()) {
        let total: f64 = pool.iter().map(|(_, w)| w).sum();
        let mut target = rng.gen_range(0.0..total);
        let mut pick = pool.len() - 1;
        for (idx, (_, w)) in pool.iter().enumerate() {
            if target < *w {
                pick = idx;
                break;
            }
            target -= w;
        }
        out.push(pool.remove(pick).0);
    }
    out
}

fn shape_covers(kind: ShapeKind, cy: usize, cx: usize, size: usize, y: usize, x: usize) -> bool {
    let dy = y as f64 - cy as f64;
    let dx = x as f64 - cx as f64;
    let s = size as f64;
    match kind {
        ShapeKind::Circle => dy * dy + dx * dx <= s * s,
        ShapeKind::Square => dy.abs() <= s && dx.abs() <= s,
        // Downward-pointing isoceles triangle.
        ShapeKind::Triangle => dy >= -s && dy <= s && dx.abs() <= (s - dy) / 2.0,
    }
}

fn overlaps(mask: &Array2<u8>, kind: ShapeKind, cy: usize, cx: usize, size: usize) -> bool {
    let n = mask.nrows();
    for y in cy.saturating_sub(size)..(cy + size + 1).min(n) {
        for x in cx.saturating_sub(size)..(cx + size + 1).min(n) {
            if mask[[y, x]] != 0 && shape_covers(kind, cy, cx, size, y, x) {
                return true;
            }
        }
    }
    false
}

fn stamp(mask: &mut Array2<u8>, kind: ShapeKind, cy: usize, cx: usize, size: usize, class: u8) {
    let n = mask.nrows();
    for y in cy.saturating_sub(size)..(cy + size + 1).min(n) {
        for x in cx.saturating_sub(size)..(cx + size + 1).min(n) {
            if shape_covers(kind, cy, cx, size, y, x) {
                mask[[y, x]] = class;
            }
        }
    }
}

/// Ground-truth mean class-area distribution: per image, the pixel fraction
/// of each class, averaged over the dataset and normalized.
pub fn ground_truth_area(dataset: &[LabeledImage], class_count: usize) -> Result<DiscreteMeasure<f64>> {
    if dataset.is_empty() {
        return Err(invalid("dataset is empty"));
    }
    let mut acc = vec![0.0f64; class_count];
    for img in dataset {
        let total = img.mask.len() as f64;
        for &c in img.mask.iter() {
            acc[c as usize] += 1.0 / total;
        }
    }
    let t = dataset.len() as f64;
    let weights = ndarray::Array1::from_iter(acc.into_iter().map(|a| a / t));
    DiscreteMeasure::normalized(weights, MeasureRole::AreaTarget)
}

/// Majority class per d×d patch cell (ties to the smallest class id).
pub fn patch_majority(mask: &Array2<u8>, patch: usize, class_count: usize) -> Vec<usize> {
    let n = mask.nrows();
    let grid = n / patch;
    let mut out = Vec::with_capacity(grid * grid);
    for pr in 0..grid {
        for pc in 0..grid {
            let mut counts = vec![0usize; class_count];
            for y in 0..patch {
                for x in 0..patch {
                    counts[mask[[pr * patch + y, pc * patch + x]] as usize] += 1;
                }
            }
            let mut best = 0usize;
            for (c, &cnt) in counts.iter().enumerate() {
                if cnt > counts[best] {
                    best = c;
                }
            }
            out.push(best);
        }
    }
    out
}
