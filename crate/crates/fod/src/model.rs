//! The per-level transformer: patch feature extraction, the two-branch
//! correlation block, and the K-layer forward pass that reconstructs the
//! input features.
//!
//! Each feature level (8x and 16x downsampling) gets its own model. A layer
//! computes `Z_k = LN(block(X_{k-1}) + X_{k-1})` followed by
//! `X_k = LN(FFN(Z_k) + Z_k)`, and the reconstruction is `X_hat = Z_K W_o`.
//! Note the projection taps `Z_K`, so the last layer's feed-forward never
//! influences the output; it is kept for structural symmetry but skipped in
//! the forward pass.

use crate::autodiff::{Tape, Var};
use crate::bank::ReferenceBank;
use crate::correlation::{
    build_target_correlation, inter_correlation, intra_correlation, uniform_target, GridGeometry,
    KernelVariance,
};
use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Feature-map downsampling level.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Level {
    Eight,
    Sixteen,
}

impl Level {
    pub const ALL: [Level; 2] = [Level::Eight, Level::Sixteen];

    pub fn patch_size(self) -> usize {
        match self {
            Level::Eight => 8,
            Level::Sixteen => 16,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Level::Eight => "8x",
            Level::Sixteen => "16x",
        }
    }
}

/// A length-N sequence of patch features with its grid geometry.
#[derive(Clone, Debug)]
pub struct FeatureSequence {
    pub features: Tensor,
    pub geom: GridGeometry,
    pub level: Level,
}

impl FeatureSequence {
    pub fn new(features: Tensor, geom: GridGeometry, level: Level) -> Result<Self> {
        if features.rank() != 2 || features.rows() != geom.patch_count() {
            return Err(Error::dim(format!(
                "feature matrix {:?} does not match {}x{} grid",
                features.shape(),
                geom.height,
                geom.width
            )));
        }
        Ok(Self {
            features,
            geom,
            level,
        })
    }

    pub fn patch_count(&self) -> usize {
        self.geom.patch_count()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }
}

/// Projection triple for one attention head.
#[derive(Clone, Copy, Debug)]
pub struct HeadParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
}

/// All learnable state of one layer.
#[derive(Clone, Debug)]
pub struct LayerParams {
    pub intra_heads: Vec<HeadParams>,
    pub inter_heads: Vec<HeadParams>,
    pub intra_kernel: KernelVariance,
    pub inter_kernel: KernelVariance,
    pub ffn_w1: ParamId,
    pub ffn_b1: ParamId,
    pub ffn_w2: ParamId,
    pub ffn_b2: ParamId,
    pub ln1_gamma: ParamId,
    pub ln1_beta: ParamId,
    pub ln2_gamma: ParamId,
    pub ln2_beta: ParamId,
}

/// One feature level's model: input projection, K layers, output projection.
#[derive(Clone, Debug)]
pub struct LevelModel {
    pub level: Level,
    pub d_feature: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: Vec<LayerParams>,
    pub w_in: ParamId,
    pub w_out: ParamId,
}

fn uniform_init(store: &mut ParamStore, rng: &mut Rng, name: String, shape: Vec<usize>) -> ParamId {
    let fan_in = shape[0];
    let bound = 1.0 / (fan_in as f64).sqrt();
    let value = rng.tensor_uniform(shape, -bound, bound);
    store.add(name, value)
}

fn vector_init(
    store: &mut ParamStore,
    rng: &mut Rng,
    name: String,
    len: usize,
    fan_in: usize,
) -> ParamId {
    let bound = 1.0 / (fan_in as f64).sqrt();
    store.add(name, rng.tensor_uniform(vec![len], -bound, bound))
}

impl LevelModel {
    /// Initializes all weights uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)],
    /// layer norms at identity, kernel variances at sigma = 1.
    pub fn init(
        store: &mut ParamStore,
        level: Level,
        d_feature: usize,
        d_model: usize,
        heads: usize,
        num_layers: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if num_layers == 0 {
            return Err(Error::config("layer count must be >= 1"));
        }
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::config(format!(
                "head count {heads} must divide hidden dimension {d_model}"
            )));
        }
        let d_head = d_model / heads;
        let tag = level.label();
        let mut layers = Vec::with_capacity(num_layers);
        for k in 0..num_layers {
            let mut intra_heads = Vec::with_capacity(heads);
            let mut inter_heads = Vec::with_capacity(heads);
            for h in 0..heads {
                intra_heads.push(HeadParams {
                    wq: uniform_init(store, rng, format!("{tag}/layer{k}/intra/h{h}/wq"), vec![d_model, d_head]),
                    wk: uniform_init(store, rng, format!("{tag}/layer{k}/intra/h{h}/wk"), vec![d_model, d_head]),
                    wv: uniform_init(store, rng, format!("{tag}/layer{k}/intra/h{h}/wv"), vec![d_model, d_head]),
                });
                inter_heads.push(HeadParams {
                    wq: uniform_init(store, rng, format!("{tag}/layer{k}/inter/h{h}/wq"), vec![d_model, d_head]),
                    wk: uniform_init(store, rng, format!("{tag}/layer{k}/inter/h{h}/wk"), vec![d_feature, d_head]),
                    wv: uniform_init(store, rng, format!("{tag}/layer{k}/inter/h{h}/wv"), vec![d_feature, d_head]),
                });
            }
            let hidden = 2 * d_model;
            layers.push(LayerParams {
                intra_heads,
                inter_heads,
                intra_kernel: KernelVariance::init(store, &format!("{tag}/layer{k}/intra")),
                inter_kernel: KernelVariance::init(store, &format!("{tag}/layer{k}/inter")),
                ffn_w1: uniform_init(store, rng, format!("{tag}/layer{k}/ffn/w1"), vec![d_model, hidden]),
                ffn_b1: vector_init(store, rng, format!("{tag}/layer{k}/ffn/b1"), hidden, d_model),
                ffn_w2: uniform_init(store, rng, format!("{tag}/layer{k}/ffn/w2"), vec![hidden, d_model]),
                ffn_b2: vector_init(store, rng, format!("{tag}/layer{k}/ffn/b2"), d_model, hidden),
                ln1_gamma: store.add(format!("{tag}/layer{k}/ln1/gamma"), Tensor::filled(vec![d_model], 1.0)),
                ln1_beta: store.add(format!("{tag}/layer{k}/ln1/beta"), Tensor::zeros(vec![d_model])),
                ln2_gamma: store.add(format!("{tag}/layer{k}/ln2/gamma"), Tensor::filled(vec![d_model], 1.0)),
                ln2_beta: store.add(format!("{tag}/layer{k}/ln2/beta"), Tensor::zeros(vec![d_model])),
            });
        }
        Ok(Self {
            level,
            d_feature,
            d_model,
            heads,
            layers,
            w_in: uniform_init(store, rng, format!("{tag}/w_in"), vec![d_feature, d_model]),
            w_out: uniform_init(store, rng, format!("{tag}/w_out"), vec![d_model, d_feature]),
        })
    }
}

/// Everything the losses and the scorer consume from one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// Input features as a tape constant.
    pub x: Var,
    /// Reconstruction, same shape as the input.
    pub xhat: Var,
    /// Head-averaged intra correlations, one per layer.
    pub sg: Vec<Var>,
    /// Head-averaged inter correlations, one per layer.
    pub se: Vec<Var>,
    /// Intra targets, one per layer.
    pub tg: Vec<Var>,
    /// Inter targets, one per layer.
    pub te: Vec<Var>,
}

/// Per-row layer normalization with affine parameters.
pub fn layer_norm(
    tape: &Tape,
    store: &ParamStore,
    x: Var,
    gamma: ParamId,
    beta: ParamId,
) -> Result<Var> {
    let mu = tape.row_mean(x)?;
    let centered = tape.sub_col(x, mu)?;
    let var = tape.row_mean(tape.mul(centered, centered)?)?;
    let std = tape.sqrt(tape.add_scalar(var, LAYER_NORM_EPS));
    let normed = tape.scale_rows(centered, tape.recip(std))?;
    let g = tape.param(store, gamma);
    let b = tape.param(store, beta);
    tape.add_row_vec(tape.mul_row_vec(normed, g)?, b)
}

/// tanh-approximated GELU.
pub fn gelu(tape: &Tape, x: Var) -> Result<Var> {
    let x2 = tape.mul(x, x)?;
    let x3 = tape.mul(x2, x)?;
    let inner = tape.scale(
        tape.add(x, tape.scale(x3, 0.044715))?,
        (2.0 / std::f64::consts::PI).sqrt(),
    );
    let t = tape.tanh(inner);
    let shifted = tape.add_scalar(t, 1.0);
    Ok(tape.scale(tape.mul(x, shifted)?, 0.5))
}

fn feed_forward(tape: &Tape, store: &ParamStore, x: Var, lp: &LayerParams) -> Result<Var> {
    let h = tape.add_row_vec(
        tape.matmul(x, tape.param(store, lp.ffn_w1))?,
        tape.param(store, lp.ffn_b1),
    )?;
    let h = gelu(tape, h)?;
    tape.add_row_vec(
        tape.matmul(h, tape.param(store, lp.ffn_w2))?,
        tape.param(store, lp.ffn_b2),
    )
}

fn mean_of(tape: &Tape, vars: &[Var]) -> Result<Var> {
    let mut acc = vars[0];
    for v in &vars[1..] {
        acc = tape.add(acc, *v)?;
    }
    Ok(tape.scale(acc, 1.0 / vars.len() as f64))
}

/// Output of the two-branch correlation block for one layer.
pub struct BlockOutput {
    /// Residual fusion `Z_g - Z_e`, shape N x d_model.
    pub zge: Var,
    /// Head-averaged intra correlation.
    pub sg: Var,
    /// Head-averaged inter correlation.
    pub se: Var,
    /// Intra RBF target.
    pub tg: Var,
    /// Inter target (RBF when the bank has positions, uniform otherwise).
    pub te: Var,
}

/// The two-branch correlation block: per head, intra attention over the
/// sequence and inter attention over the reference features; the block
/// output is the residual of the two branch outputs.
pub fn i2correlation_block(
    tape: &Tape,
    store: &ParamStore,
    x_prev: Var,
    bank_features: Var,
    bank_positions: Option<&[(usize, usize)]>,
    lp: &LayerParams,
    geom: &GridGeometry,
    d_model: usize,
) -> Result<BlockOutput> {
    let bank_len = tape.shape(bank_features)[0];
    if bank_len == 0 {
        return Err(Error::EmptyBank);
    }
    let mut sg_heads = Vec::with_capacity(lp.intra_heads.len());
    let mut zg_heads = Vec::with_capacity(lp.intra_heads.len());
    for head in &lp.intra_heads {
        let s = intra_correlation(tape, store, x_prev, head.wq, head.wk, d_model)?;
        let v = tape.matmul(x_prev, tape.param(store, head.wv))?;
        zg_heads.push(tape.matmul(s, v)?);
        sg_heads.push(s);
    }
    let mut se_heads = Vec::with_capacity(lp.inter_heads.len());
    let mut ze_heads = Vec::with_capacity(lp.inter_heads.len());
    for head in &lp.inter_heads {
        let s = inter_correlation(tape, store, x_prev, bank_features, head.wq, head.wk, d_model)?;
        let v = tape.matmul(bank_features, tape.param(store, head.wv))?;
        ze_heads.push(tape.matmul(s, v)?);
        se_heads.push(s);
    }
    let zg = tape.concat_cols(&zg_heads)?;
    let ze = tape.concat_cols(&ze_heads)?;
    let zge = tape.sub(zg, ze)?;

    let tg = build_target_correlation(tape, store, geom, &lp.intra_kernel, None)?;
    let te = match bank_positions {
        Some(pos) => build_target_correlation(tape, store, geom, &lp.inter_kernel, Some(pos))?,
        None => uniform_target(tape, geom.patch_count(), bank_len)?,
    };

    Ok(BlockOutput {
        zge,
        sg: mean_of(tape, &sg_heads)?,
        se: mean_of(tape, &se_heads)?,
        tg,
        te,
    })
}

/// Full forward pass over K layers, returning the reconstruction and all
/// per-layer correlation matrices.
pub fn forward(
    tape: &Tape,
    store: &ParamStore,
    x: &FeatureSequence,
    bank: &ReferenceBank,
    model: &LevelModel,
) -> Result<ForwardTrace> {
    if x.dim() != model.d_feature {
        return Err(Error::dim(format!(
            "feature dim {} does not match model dim {}",
            x.dim(),
            model.d_feature
        )));
    }
    if bank.features.rows() == 0 {
        return Err(Error::EmptyBank);
    }
    if bank.features.cols() != model.d_feature {
        return Err(Error::dim(format!(
            "bank feature dim {} does not match model dim {}",
            bank.features.cols(),
            model.d_feature
        )));
    }
    let x_leaf = tape.constant(x.features.clone());
    let bank_leaf = tape.constant(bank.features.clone());
    let mut x_prev = tape.matmul(x_leaf, tape.param(store, model.w_in))?;

    let k_layers = model.layers.len();
    let mut sg = Vec::with_capacity(k_layers);
    let mut se = Vec::with_capacity(k_layers);
    let mut tg = Vec::with_capacity(k_layers);
    let mut te = Vec::with_capacity(k_layers);
    let mut z_last = x_prev;
    for (k, lp) in model.layers.iter().enumerate() {
        let block = i2correlation_block(
            tape,
            store,
            x_prev,
            bank_leaf,
            bank.positions.as_deref(),
            lp,
            &x.geom,
            model.d_model,
        )?;
        let z = layer_norm(
            tape,
            store,
            tape.add(block.zge, x_prev)?,
            lp.ln1_gamma,
            lp.ln1_beta,
        )?;
        sg.push(block.sg);
        se.push(block.se);
        tg.push(block.tg);
        te.push(block.te);
        z_last = z;
        // The reconstruction taps Z_K directly, so the last layer's
        // feed-forward would be dead computation.
        if k + 1 < k_layers {
            let ffn = feed_forward(tape, store, z, lp)?;
            x_prev = layer_norm(tape, store, tape.add(ffn, z)?, lp.ln2_gamma, lp.ln2_beta)?;
        }
    }
    let xhat = tape.matmul(z_last, tape.param(store, model.w_out))?;
    Ok(ForwardTrace {
        x: x_leaf,
        xhat,
        sg,
        se,
        tg,
        te,
    })
}

/// Deterministic multiscale patch feature extractor.
///
/// Non-overlapping p x p patches (p = 8 and 16) are flattened and mapped
/// through a fixed seeded random orthonormal projection to `feature_dim - 2`
/// dimensions, then concatenated with the patch mean and standard deviation.
pub fn extract_features(
    image: &Tensor,
    seed: u64,
    feature_dim: usize,
) -> Result<(FeatureSequence, FeatureSequence)> {
    if image.rank() != 3 {
        return Err(Error::dim(format!(
            "image must be rank 3 (channels x height x width), got {:?}",
            image.shape()
        )));
    }
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    if h % 16 != 0 || w % 16 != 0 {
        return Err(Error::dim(format!(
            "image extents {h}x{w} must be divisible by 16"
        )));
    }
    if feature_dim < 3 {
        return Err(Error::config("feature_dim must be at least 3"));
    }
    let eight = extract_level(image, c, h, w, Level::Eight, seed, feature_dim)?;
    let sixteen = extract_level(image, c, h, w, Level::Sixteen, seed, feature_dim)?;
    Ok((eight, sixteen))
}

fn extract_level(
    image: &Tensor,
    c: usize,
    h: usize,
    w: usize,
    level: Level,
    seed: u64,
    feature_dim: usize,
) -> Result<FeatureSequence> {
    let p = level.patch_size();
    let geom = GridGeometry::new(h / p, w / p);
    let patch_len = c * p * p;
    let proj_dim = feature_dim - 2;
    if proj_dim > patch_len {
        return Err(Error::config(format!(
            "projection dim {proj_dim} exceeds patch length {patch_len} at level {}",
            level.label()
        )));
    }
    let mut rng = Rng::new(seed).derive(p as u64);
    let projection = random_orthonormal_columns(&mut rng, patch_len, proj_dim);

    let n = geom.patch_count();
    let mut features = Tensor::zeros(vec![n, feature_dim]);
    let mut patch = vec![0.0; patch_len];
    for gy in 0..geom.height {
        for gx in 0..geom.width {
            let mut idx = 0;
            for ch in 0..c {
                for py in 0..p {
                    for px in 0..p {
                        patch[idx] = image.data()[ch * h * w + (gy * p + py) * w + gx * p + px];
                        idx += 1;
                    }
                }
            }
            let mean = patch.iter().sum::<f64>() / patch_len as f64;
            let var =
                patch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / patch_len as f64;
            let row_idx = geom.index(gy, gx);
            let row =
                &mut features.data_mut()[row_idx * feature_dim..(row_idx + 1) * feature_dim];
            for (j, col) in projection.iter().enumerate() {
                row[j] = crate::tensor::dot(&patch, col);
            }
            row[feature_dim - 2] = mean;
            row[feature_dim - 1] = var.sqrt();
        }
    }
    FeatureSequence::new(features, geom, level)
}

/// `k` orthonormal columns of length `n` via Gram-Schmidt on seeded Gaussian
/// draws; returned column-by-column.
fn random_orthonormal_columns(rng: &mut Rng, n: usize, k: usize) -> Vec<Vec<f64>> {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(k);
    while cols.len() < k {
        let mut v: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        for u in &cols {
            let proj = crate::tensor::dot(&v, u);
            for (vi, ui) in v.iter_mut().zip(u.iter()) {
                *vi -= proj * ui;
            }
        }
        let norm = crate::tensor::l2_norm(&v);
        if norm < 1e-8 {
            continue; // essentially impossible; redraw keeps determinism
        }
        for vi in v.iter_mut() {
            *vi /= norm;
        }
        cols.push(v);
    }
    cols
}
