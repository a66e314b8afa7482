//! Two-view augmentation with recorded geometry, and the local-to-global
//! patch correspondence derived from it.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::image::{ImageTensor, Rect};
use crate::scalar::Scalar;

/// Augmentation ranges. Crop fractions are relative to the original image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewConfig {
    /// Scale range of the near-full global view, as a side fraction.
    pub global_scale: (f64, f64),
    /// Area-fraction range of the local crop.
    pub local_area: (f64, f64),
    /// Max absolute brightness jitter applied to each view.
    pub jitter: f64,
}

impl Default for ViewConfig {
    fn default() -> Self {
        Self {
            global_scale: (0.9, 1.0),
            local_area: (0.2, 0.6),
            jitter: 0.35,
        }
    }
}

impl ViewConfig {
    /// No-op augmentation: both views equal the original image.
    pub fn identity() -> Self {
        Self {
            global_scale: (1.0, 1.0),
            local_area: (1.0, 1.0),
            jitter: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        let ranges = [self.global_scale, self.local_area];
        for (lo, hi) in ranges {
            if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
                return Err(invalid(format!(
                    "crop fractions must lie in (0,1] with lo <= hi, got ({lo}, {hi})"
                )));
            }
        }
        if self.jitter < 0.0 {
            return Err(invalid("jitter must be nonnegative"));
        }
        Ok(())
    }
}

/// A global and a local augmented view of one image, with the crop geometry
/// recorded in original-image coordinates.
#[derive(Clone, Debug)]
pub struct ViewPair<F: Scalar> {
    pub global_view: ImageTensor<F>,
    pub local_view: ImageTensor<F>,
    pub global_crop: Rect,
    pub local_crop: Rect,
    pub augmentation_seed: u64,
}

/// Samples the two augmented views. Deterministic given the seed.
pub fn make_views<F: Scalar>(
    image: &ImageTensor<F>,
    rng_seed: u64,
    cfg: &ViewConfig,
) -> Result<ViewPair<F>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let n = image.side();
    let nf = n as f64;

    let sample_rect = |rng: &mut ChaCha8Rng, side: f64| -> Rect {
        let max_off = nf - side;
        let x = if max_off > 0.0 {
            rng.gen_range(0.0..=max_off)
        } else {
            0.0
        };
        let y = if max_off > 0.0 {
            rng.gen_range(0.0..=max_off)
        } else {
            0.0
        };
        Rect {
            x,
            y,
            width: side,
            height: side,
        }
    };

    let g_scale = sample_in(&mut rng, cfg.global_scale);
    let global_crop = sample_rect(&mut rng, nf * g_scale);
    let l_area = sample_in(&mut rng, cfg.local_area);
    let local_crop = sample_rect(&mut rng, nf * l_area.sqrt());

    let g_jit = jitter_deltas(&mut rng, cfg.jitter);
    let l_jit = jitter_deltas(&mut rng, cfg.jitter);

    let global_view = image.crop_resize(global_crop, n)?.jitter_colors(g_jit);
    let local_view = image.crop_resize(local_crop, n)?.jitter_colors(l_jit);

    Ok(ViewPair {
        global_view,
        local_view,
        global_crop,
        local_crop,
        augmentation_seed: rng_seed,
    })
}

fn sample_in(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

fn jitter_deltas(rng: &mut ChaCha8Rng, jitter: f64) -> [f64; 3] {
    if jitter == 0.0 {
        [0.0; 3]
    } else {
        [
            rng.gen_range(-jitter..=jitter),
            rng.gen_range(-jitter..=jitter),
            rng.gen_range(-jitter..=jitter),
        ]
    }
}

/// For each local-view patch, the nearest global-view patch covering the same
/// original-image content, or `None` when the content lies outside the global
/// view.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchAlignment {
    /// `mapping[j]` is the global patch index for local patch `j`.
    pub mapping: Vec<Option<usize>>,
    /// Patch-grid side (both views share it).
    pub grid: usize,
}

impl PatchAlignment {
    pub fn valid_count(&self) -> usize {
        self.mapping.iter().filter(|m| m.is_some()).count()
    }

    pub fn is_identity(&self) -> bool {
        self.mapping
            .iter()
            .enumerate()
            .all(|(j, m)| *m == Some(j))
    }
}

/// Maps every local patch center through the inverse crop transforms into
/// global-view coordinates and snaps to the nearest global patch cell.
pub fn align_patches<F: Scalar>(pair: &ViewPair<F>, patch_size: usize) -> Result<PatchAlignment> {
    let n = pair.global_view.side();
    if patch_size == 0 || n % patch_size != 0 {
        return Err(invalid(format!(
            "patch size {patch_size} must divide view side {n}"
        )));
    }
    let grid = n / patch_size;
    let nf = n as f64;
    let mut mapping = Vec::with_capacity(grid * grid);
    for row in 0..grid {
        for col in 0..grid {
            // Local patch center in local-view pixel coordinates.
            let vx = (col as f64 + 0.5) * patch_size as f64;
            let vy = (row as f64 + 0.5) * patch_size as f64;
            // Into original-image coordinates through the local crop.
            let ox = pair.local_crop.x + vx / nf * pair.local_crop.width;
            let oy = pair.local_crop.y + vy / nf * pair.local_crop.height;
            if !pair.global_crop.contains_point(ox, oy) {
                mapping.push(None);
                continue;
            }
            // Into global-view pixel coordinates through the inverse global crop.
            let gx = (ox - pair.global_crop.x) / pair.global_crop.width * nf;
            let gy = (oy - pair.global_crop.y) / pair.global_crop.height * nf;
            let gcol = ((gx / patch_size as f64).floor() as usize).min(grid - 1);
            let grow = ((gy / patch_size as f64).floor() as usize).min(grid - 1);
            mapping.push(Some(grow * grid + gcol));
        }
    }
    Ok(PatchAlignment { mapping, grid })
}
