//! Small deterministic patch encoder shared by both branches: a linear patch
//! embedding with positional embeddings followed by self-attention mixing
//! blocks with layer scales. Forward passes cache every intermediate so the
//! backward pass can produce analytic gradients for all parameters.

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Result};
use crate::image::ImageTensor;
use crate::scalar::Scalar;

/// Encoder hyperparameters. `view_side` and `patch` fix the patch count
/// K = (view_side/patch)².
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncoderConfig {
    pub view_side: usize,
    pub patch: usize,
    pub embed: usize,
    pub hidden: usize,
    pub blocks: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            view_side: 32,
            patch: 8,
            embed: 64,
            hidden: 64,
            blocks: 2,
        }
    }
}

impl EncoderConfig {
    pub fn patches(&self) -> usize {
        let g = self.view_side / self.patch;
        g * g
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch * self.patch
    }

    fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.view_side % self.patch != 0 {
            return Err(invalid(format!(
                "patch size {} must divide view side {}",
                self.patch, self.view_side
            )));
        }
        if self.embed == 0 || self.hidden == 0 {
            return Err(invalid("embed and hidden dims must be positive"));
        }
        Ok(())
    }
}

/// One attention/mixing block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<F: Scalar> {
    pub w_q: Array2<F>,
    pub w_k: Array2<F>,
    pub w_v: Array2<F>,
    pub w_o: Array2<F>,
    pub ls_attn: Array1<F>,
    pub w1: Array2<F>,
    pub b1: Array1<F>,
    pub w2: Array2<F>,
    pub b2: Array1<F>,
    pub ls_mlp: Array1<F>,
}

/// All encoder parameters. Deterministically initialized from a seed; one
/// instance serves both branches.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<F: Scalar> {
    pub cfg: EncoderConfig,
    pub w_embed: Array2<F>,
    pub b_embed: Array1<F>,
    pub pos: Array2<F>,
    pub blocks: Vec<BlockParams<F>>,
    pub seed: u64,
}

/// K×e per-patch features for one view.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchFeatures<F: Scalar> {
    pub values: Array2<F>,
}

const LAYER_SCALE_INIT: f64 = 0.1;
const POS_INIT_STD: f64 = 0.02;

impl<F: Scalar> EncoderParams<F> {
    pub fn init(cfg: EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = |rows: usize, cols: usize, std: f64| -> Array2<F> {
            let dist = Normal::new(0.0, std).expect("valid std");
            Array2::from_shape_fn((rows, cols), |_| F::of(dist.sample(&mut rng)))
        };
        let pd = cfg.patch_dim();
        let e = cfg.embed;
        let h = cfg.hidden;
        let w_embed = normal(pd, e, 1.0 / (pd as f64).sqrt());
        let pos = normal(cfg.patches(), e, POS_INIT_STD);
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for _ in 0..cfg.blocks {
            blocks.push(BlockParams {
                w_q: normal(e, e, 1.0 / (e as f64).sqrt()),
                w_k: normal(e, e, 1.0 / (e as f64).sqrt()),
                w_v: normal(e, e, 1.0 / (e as f64).sqrt()),
                w_o: normal(e, e, 1.0 / (e as f64).sqrt()),
                ls_attn: Array1::from_elem(e, F::of(LAYER_SCALE_INIT)),
                w1: normal(e, h, 1.0 / (e as f64).sqrt()),
                b1: Array1::zeros(h),
                w2: normal(h, e, 1.0 / (h as f64).sqrt()),
                b2: Array1::zeros(e),
                ls_mlp: Array1::from_elem(e, F::of(LAYER_SCALE_INIT)),
            });
        }
        Ok(Self {
            cfg,
            w_embed,
            b_embed: Array1::zeros(e),
            pos,
            blocks,
            seed,
        })
    }

    /// All-zero parameters of the same shapes (for gradient accumulators).
    pub fn zeros_like(&self) -> Self {
        let e = self.cfg.embed;
        let h = self.cfg.hidden;
        Self {
            cfg: self.cfg,
            w_embed: Array2::zeros(self.w_embed.dim()),
            b_embed: Array1::zeros(e),
            pos: Array2::zeros(self.pos.dim()),
            blocks: self
                .blocks
                .iter()
                .map(|_| BlockParams {
                    w_q: Array2::zeros((e, e)),
                    w_k: Array2::zeros((e, e)),
                    w_v: Array2::zeros((e, e)),
                    w_o: Array2::zeros((e, e)),
                    ls_attn: Array1::zeros(e),
                    w1: Array2::zeros((e, h)),
                    b1: Array1::zeros(h),
                    w2: Array2::zeros((h, e)),
                    b2: Array1::zeros(e),
                    ls_mlp: Array1::zeros(e),
                })
                .collect(),
            seed: self.seed,
        }
    }

    /// Canonical (name, length) layout of the flattened parameter vector.
    pub fn layout(&self) -> Vec<(String, usize)> {
        let mut out = vec![
            ("enc.w_embed".to_string(), self.w_embed.len()),
            ("enc.b_embed".to_string(), self.b_embed.len()),
            ("enc.pos".to_string(), self.pos.len()),
        ];
        for (b, blk) in self.blocks.iter().enumerate() {
            out.push((format!("enc.blocks.{b}.w_q"), blk.w_q.len()));
            out.push((format!("enc.blocks.{b}.w_k"), blk.w_k.len()));
            out.push((format!("enc.blocks.{b}.w_v"), blk.w_v.len()));
            out.push((format!("enc.blocks.{b}.w_o"), blk.w_o.len()));
            out.push((format!("enc.blocks.{b}.ls_attn"), blk.ls_attn.len()));
            out.push((format!("enc.blocks.{b}.w1"), blk.w1.len()));
            out.push((format!("enc.blocks.{b}.b1"), blk.b1.len()));
            out.push((format!("enc.blocks.{b}.w2"), blk.w2.len()));
            out.push((format!("enc.blocks.{b}.b2"), blk.b2.len()));
            out.push((format!("enc.blocks.{b}.ls_mlp"), blk.ls_mlp.len()));
        }
        out
    }

    pub fn flatten(&self) -> Vec<F> {
        let mut out = Vec::new();
        out.extend(self.w_embed.iter().cloned());
        out.extend(self.b_embed.iter().cloned());
        out.extend(self.pos.iter().cloned());
        for blk in &self.blocks {
            out.extend(blk.w_q.iter().cloned());
            out.extend(blk.w_k.iter().cloned());
            out.extend(blk.w_v.iter().cloned());
            out.extend(blk.w_o.iter().cloned());
            out.extend(blk.ls_attn.iter().cloned());
            out.extend(blk.w1.iter().cloned());
            out.extend(blk.b1.iter().cloned());
            out.extend(blk.w2.iter().cloned());
            out.extend(blk.b2.iter().cloned());
            out.extend(blk.ls_mlp.iter().cloned());
        }
        out
    }

    pub fn assign_from_flat(&mut self, flat: &[F]) {
        let mut it = flat.iter().cloned();
        let fill1 = |a: &mut Array1<F>, it: &mut dyn Iterator<Item = F>| {
            for x in a.iter_mut() {
                *x = it.next().expect("flat vector too short");
            }
        };
        let fill2 = |a: &mut Array2<F>, it: &mut dyn Iterator<Item = F>| {
            for x in a.iter_mut() {
                *x = it.next().expect("flat vector too short");
            }
        };
        fill2(&mut self.w_embed, &mut it);
        fill1(&mut self.b_embed, &mut it);
        fill2(&mut self.pos, &mut it);
        for blk in &mut self.blocks {
            fill2(&mut blk.w_q, &mut it);
            fill2(&mut blk.w_k, &mut it);
            fill2(&mut blk.w_v, &mut it);
            fill2(&mut blk.w_o, &mut it);
            fill1(&mut blk.ls_attn, &mut it);
            fill2(&mut blk.w1, &mut it);
            fill1(&mut blk.b1, &mut it);
            fill2(&mut blk.w2, &mut it);
            fill1(&mut blk.b2, &mut it);
            fill1(&mut blk.ls_mlp, &mut it);
        }
        assert!(it.next().is_none(), "flat vector too long");
    }

    /// In-place grads += other, used when accumulating across views/images.
    pub fn add_assign(&mut self, other: &Self) {
        self.w_embed += &other.w_embed;
        self.b_embed += &other.b_embed;
        self.pos += &other.pos;
        for (a, b) in self.blocks.iter_mut().zip(other.blocks.iter()) {
            a.w_q += &b.w_q;
            a.w_k += &b.w_k;
            a.w_v += &b.w_v;
            a.w_o += &b.w_o;
            a.ls_attn += &b.ls_attn;
            a.w1 += &b.w1;
            a.b1 += &b.b1;
            a.w2 += &b.w2;
            a.b2 += &b.b2;
            a.ls_mlp += &b.ls_mlp;
        }
    }
}

/// Forward intermediates for one view, consumed by [`encode_backward`].
#[derive(Clone, Debug)]
pub struct EncodeCache<F: Scalar> {
    patch_vecs: Array2<F>,
    /// Block inputs x, attention weights a, value projections, contexts,
    /// attention outputs, post-attention x1, pre-activations, activations,
    /// mlp outputs.
    block_io: Vec<BlockCache<F>>,
}

#[derive(Clone, Debug)]
struct BlockCache<F: Scalar> {
    x: Array2<F>,
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    a: Array2<F>,
    ctx: Array2<F>,
    attn_out: Array2<F>,
    x1: Array2<F>,
    h_pre: Array2<F>,
    h: Array2<F>,
    mlp_out: Array2<F>,
}

fn gelu<F: Scalar>(x: F) -> F {
    let c = F::of(0.7978845608028654); // sqrt(2/pi)
    let a = F::of(0.044715);
    let half = F::of(0.5);
    half * x * (F::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<F: Scalar>(x: F) -> F {
    let c = F::of(0.7978845608028654);
    let a = F::of(0.044715);
    let half = F::of(0.5);
    let three = F::of(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (F::one() + three * a * x * x);
    half * (F::one() + t) + half * x * (F::one() - t * t) * du
}

/// Extracts the K×(3d²) matrix of flattened patches, row-major grid, pixel
/// order (row, col, channel).
pub fn patch_vectors<F: Scalar>(view: &ImageTensor<F>, cfg: &EncoderConfig) -> Array2<F> {
    let d = cfg.patch;
    let grid = view.side() / d;
    let mut out = Array2::<F>::zeros((grid * grid, cfg.patch_dim()));
    for pr in 0..grid {
        for pc in 0..grid {
            let mut col = 0usize;
            for y in 0..d {
                for x in 0..d {
                    for c in 0..3 {
                        out[[pr * grid + pc, col]] = view.pixels[[pr * d + y, pc * d + x, c]];
                        col += 1;
                    }
                }
            }
        }
    }
    out
}

/// Content-only embedding (no positions, no mixing): used as the affinity
/// feature for the spectral pipeline, where positional structure would mask
/// appearance similarity.
pub fn encode_content<F: Scalar>(
    view: &ImageTensor<F>,
    params: &EncoderParams<F>,
) -> Result<PatchFeatures<F>> {
    check_view(view, params)?;
    let pv = patch_vectors(view, &params.cfg);
    let values = pv.dot(&params.w_embed) + &params.b_embed;
    Ok(PatchFeatures { values })
}

fn check_view<F: Scalar>(view: &ImageTensor<F>, params: &EncoderParams<F>) -> Result<()> {
    if view.side() != params.cfg.view_side {
        return Err(invalid(format!(
            "view side {} does not match encoder side {}",
            view.side(),
            params.cfg.view_side
        )));
    }
    Ok(())
}

/// Full forward pass; pure function of (view, params).
pub fn encode<F: Scalar>(
    view: &ImageTensor<F>,
    params: &EncoderParams<F>,
) -> Result<PatchFeatures<F>> {
    encode_with_cache(view, params).map(|(f, _)| f)
}

/// Forward pass that also returns the cache for [`encode_backward`].
pub fn encode_with_cache<F: Scalar>(
    view: &ImageTensor<F>,
    params: &EncoderParams<F>,
) -> Result<(PatchFeatures<F>, EncodeCache<F>)> {
    check_view(view, params)?;
    let patch_vecs = patch_vectors(view, &params.cfg);
    let mut x = patch_vecs.dot(&params.w_embed) + &params.b_embed + &params.pos;
    let e = params.cfg.embed;
    let scale = F::one() / F::of(e as f64).sqrt();
    let mut block_io = Vec::with_capacity(params.blocks.len());
    for blk in &params.blocks {
        let q = x.dot(&blk.w_q);
        let k = x.dot(&blk.w_k);
        let v = x.dot(&blk.w_v);
        let mut a = q.dot(&k.t()) * scale;
        softmax_rows_inplace(&mut a);
        let ctx = a.dot(&v);
        let attn_out = ctx.dot(&blk.w_o);
        let x1 = &x + &(&attn_out * &blk.ls_attn);
        let h_pre = x1.dot(&blk.w1) + &blk.b1;
        let h = h_pre.mapv(gelu);
        let mlp_out = h.dot(&blk.w2) + &blk.b2;
        let x2 = &x1 + &(&mlp_out * &blk.ls_mlp);
        block_io.push(BlockCache {
            x,
            q,
            k,
            v,
            a,
            ctx,
            attn_out,
            x1,
            h_pre,
            h,
            mlp_out,
        });
        x = x2;
    }
    Ok((
        PatchFeatures { values: x },
        EncodeCache {
            patch_vecs,
            block_io,
        },
    ))
}

/// Backprop of `d_features` (K×e) through the encoder; accumulates parameter
/// gradients into `grads`.
pub fn encode_backward<F: Scalar>(
    params: &EncoderParams<F>,
    cache: &EncodeCache<F>,
    d_features: &Array2<F>,
    grads: &mut EncoderParams<F>,
) {
    let e = params.cfg.embed;
    let scale = F::one() / F::of(e as f64).sqrt();
    let mut dx = d_features.clone();
    for (blk, (bc, gblk)) in params
        .blocks
        .iter()
        .zip(cache.block_io.iter().zip(grads.blocks.iter_mut()))
        .rev()
    {
        // x2 = x1 + ls_mlp ⊙ mlp_out
        let d_mlp_out = &dx * &blk.ls_mlp;
        for j in 0..e {
            let mut g = F::zero();
            for k in 0..dx.nrows() {
                g += dx[[k, j]] * bc.mlp_out[[k, j]];
            }
            gblk.ls_mlp[j] += g;
        }
        let mut dx1 = dx.clone();
        // mlp_out = gelu(x1·w1 + b1)·w2 + b2
        gblk.b2 += &d_mlp_out.sum_axis(Axis(0));
        gblk.w2 += &bc.h.t().dot(&d_mlp_out);
        let dh = d_mlp_out.dot(&blk.w2.t());
        let dh_pre = &dh * &bc.h_pre.mapv(gelu_grad);
        gblk.b1 += &dh_pre.sum_axis(Axis(0));
        gblk.w1 += &bc.x1.t().dot(&dh_pre);
        dx1 += &dh_pre.dot(&blk.w1.t());

        // x1 = x + ls_attn ⊙ attn_out
        let d_attn_out = &dx1 * &blk.ls_attn;
        for j in 0..e {
            let mut g = F::zero();
            for k in 0..dx1.nrows() {
                g += dx1[[k, j]] * bc.attn_out[[k, j]];
            }
            gblk.ls_attn[j] += g;
        }
        let mut dx0 = dx1.clone();
        // attn_out = (A·v)·w_o
        gblk.w_o += &bc.ctx.t().dot(&d_attn_out);
        let d_ctx = d_attn_out.dot(&blk.w_o.t());
        let mut da = d_ctx.dot(&bc.v.t());
        let dv = bc.a.t().dot(&d_ctx);
        // A = softmax(q·kᵀ·scale), row-wise Jacobian.
        softmax_backward_rows_inplace(&bc.a, &mut da);
        let dq = da.dot(&bc.k) * scale;
        let dk = da.t().dot(&bc.q) * scale;
        gblk.w_q += &bc.x.t().dot(&dq);
        gblk.w_k += &bc.x.t().dot(&dk);
        gblk.w_v += &bc.x.t().dot(&dv);
        dx0 += &dq.dot(&blk.w_q.t());
        dx0 += &dk.dot(&blk.w_k.t());
        dx0 += &dv.dot(&blk.w_v.t());
        dx = dx0;
    }
    // x0 = patch_vecs·w_embed + b_embed + pos
    grads.w_embed += &cache.patch_vecs.t().dot(&dx);
    grads.b_embed += &dx.sum_axis(Axis(0));
    grads.pos += &dx;
}

/// Row-wise softmax in place.
pub fn softmax_rows_inplace<F: Scalar>(m: &mut Array2<F>) {
    for mut row in m.outer_iter_mut() {
        let mx = row.iter().cloned().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for x in row.iter_mut() {
            *x = (*x - mx).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
}

/// Given rows p = softmax(z) and upstream dp (in `dm`), rewrites `dm` with
/// dz = p ⊙ (dp − ⟨dp, p⟩).
pub fn softmax_backward_rows_inplace<F: Scalar>(p: &Array2<F>, dm: &mut Array2<F>) {
    for (prow, mut drow) in p.outer_iter().zip(dm.outer_iter_mut()) {
        let dot = prow
            .iter()
            .zip(drow.iter())
            .map(|(&a, &b)| a * b)
            .sum::<F>();
        for (d, &pv) in drow.iter_mut().zip(prow.iter()) {
            *d = pv * (*d - dot);
        }
    }
}
