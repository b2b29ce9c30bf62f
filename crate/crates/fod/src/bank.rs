//! External reference features: five ways to summarize the normal training
//! set for the inter-correlation branch.
//!
//! Mean, nearest and prototype banks keep one (or M) entries per grid
//! position and therefore preserve positional information; coreset and
//! codebook banks select features globally and drop positions, which makes
//! the inter target fall back to the uniform distribution.

use crate::autodiff::Tape;
use crate::correlation::GridGeometry;
use crate::error::{Error, Result};
use crate::model::FeatureSequence;
use crate::param::ParamStore;
use crate::rng::Rng;
use crate::tensor::{dot, euclidean_distance, l2_norm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BankKind {
    Mean,
    Nearest,
    Coreset,
    Prototype,
    Codebook,
}

impl BankKind {
    pub const ALL: [BankKind; 5] = [
        BankKind::Mean,
        BankKind::Nearest,
        BankKind::Coreset,
        BankKind::Prototype,
        BankKind::Codebook,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BankKind::Mean => "mean",
            BankKind::Nearest => "nearest",
            BankKind::Coreset => "coreset",
            BankKind::Prototype => "prototype",
            BankKind::Codebook => "codebook",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(BankKind::Mean),
            "nearest" => Ok(BankKind::Nearest),
            "coreset" => Ok(BankKind::Coreset),
            "prototype" => Ok(BankKind::Prototype),
            "codebook" => Ok(BankKind::Codebook),
            other => Err(Error::config(format!("unknown bank kind '{other}'"))),
        }
    }

    pub fn code(self) -> f64 {
        match self {
            BankKind::Mean => 0.0,
            BankKind::Nearest => 1.0,
            BankKind::Coreset => 2.0,
            BankKind::Prototype => 3.0,
            BankKind::Codebook => 4.0,
        }
    }

    pub fn from_code(code: f64) -> Result<Self> {
        match code as i64 {
            0 => Ok(BankKind::Mean),
            1 => Ok(BankKind::Nearest),
            2 => Ok(BankKind::Coreset),
            3 => Ok(BankKind::Prototype),
            4 => Ok(BankKind::Codebook),
            other => Err(Error::config(format!("unknown bank kind code {other}"))),
        }
    }
}

/// N_e reference features, optionally pinned to grid positions.
#[derive(Clone, Debug)]
pub struct ReferenceBank {
    pub kind: BankKind,
    pub features: Tensor,
    pub positions: Option<Vec<(usize, usize)>>,
}

impl ReferenceBank {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn validate(&self, geom: &GridGeometry) -> Result<()> {
        if self.len() == 0 {
            return Err(Error::EmptyBank);
        }
        if let Some(pos) = &self.positions {
            if pos.len() != self.len() {
                return Err(Error::dim(format!(
                    "bank has {} features but {} positions",
                    self.len(),
                    pos.len()
                )));
            }
            for &(r, c) in pos {
                if r >= geom.height || c >= geom.width {
                    return Err(Error::dim(format!(
                        "bank position ({r},{c}) outside {}x{} grid",
                        geom.height, geom.width
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Per-position feature sets from all training images.
#[derive(Clone, Debug)]
pub struct FeatureStack {
    pub geom: GridGeometry,
    pub dim: usize,
    pub images: usize,
    data: Tensor, // rank 4: images x H x W x dim
}

impl FeatureStack {
    pub fn from_sequences(seqs: &[FeatureSequence]) -> Result<Self> {
        let first = seqs
            .first()
            .ok_or_else(|| Error::config("feature stack needs at least one image"))?;
        let geom = first.geom;
        let dim = first.dim();
        let n = geom.patch_count();
        let mut data = Tensor::zeros(vec![seqs.len(), geom.height, geom.width, dim]);
        for (k, seq) in seqs.iter().enumerate() {
            if seq.geom != geom || seq.dim() != dim {
                return Err(Error::dim(
                    "all images in a feature stack must share geometry and dim",
                ));
            }
            let dst = &mut data.data_mut()[k * n * dim..(k + 1) * n * dim];
            dst.copy_from_slice(seq.features.data());
        }
        Ok(Self {
            geom,
            dim,
            images: seqs.len(),
            data,
        })
    }

    pub fn feature(&self, image: usize, row: usize, col: usize) -> &[f64] {
        let n = self.geom.patch_count();
        let base = (image * n + row * self.geom.width + col) * self.dim;
        &self.data.data()[base..base + self.dim]
    }

    /// All features flattened in (image, row, col) order.
    pub fn pool(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(self.images * self.geom.patch_count());
        for k in 0..self.images {
            for r in 0..self.geom.height {
                for c in 0..self.geom.width {
                    out.push(self.feature(k, r, c));
                }
            }
        }
        out
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn from_tensor(data: Tensor) -> Result<Self> {
        if data.rank() != 4 {
            return Err(Error::dim(format!(
                "feature stack tensor must be rank 4, got {:?}",
                data.shape()
            )));
        }
        Ok(Self {
            images: data.shape()[0],
            geom: GridGeometry::new(data.shape()[1], data.shape()[2]),
            dim: data.shape()[3],
            data,
        })
    }
}

/// Patch-wise average over all training images; positions preserved.
pub fn mean_bank(stack: &FeatureStack) -> ReferenceBank {
    let geom = stack.geom;
    let n = geom.patch_count();
    let mut features = Tensor::zeros(vec![n, stack.dim]);
    for r in 0..geom.height {
        for c in 0..geom.width {
            let row = &mut features.data_mut()
                [(geom.index(r, c)) * stack.dim..(geom.index(r, c) + 1) * stack.dim];
            for k in 0..stack.images {
                let f = stack.feature(k, r, c);
                for (acc, &v) in row.iter_mut().zip(f) {
                    *acc += v;
                }
            }
            let inv = 1.0 / stack.images as f64;
            for acc in row.iter_mut() {
                *acc *= inv;
            }
        }
    }
    ReferenceBank {
        kind: BankKind::Mean,
        features,
        positions: Some(geom.positions()),
    }
}

/// Per query position, the stored training feature closest to the query
/// feature within a p x p neighborhood (clipped at borders) over all images.
pub fn nearest_bank(
    stack: &FeatureStack,
    query: &FeatureSequence,
    window: usize,
) -> Result<ReferenceBank> {
    if window == 0 || window % 2 == 0 {
        return Err(Error::config(format!(
            "nearest window must be odd and >= 1, got {window}"
        )));
    }
    if query.geom != stack.geom || query.dim() != stack.dim {
        return Err(Error::dim(
            "query geometry/dim does not match the feature stack",
        ));
    }
    let geom = stack.geom;
    let half = window / 2;
    let n = geom.patch_count();
    let mut features = Tensor::zeros(vec![n, stack.dim]);
    for r in 0..geom.height {
        for c in 0..geom.width {
            let q = query.features.row(geom.index(r, c));
            let r_lo = r.saturating_sub(half);
            let r_hi = (r + half).min(geom.height - 1);
            let c_lo = c.saturating_sub(half);
            let c_hi = (c + half).min(geom.width - 1);
            let mut best = f64::INFINITY;
            let mut best_feat: Option<&[f64]> = None;
            for k in 0..stack.images {
                for rr in r_lo..=r_hi {
                    for cc in c_lo..=c_hi {
                        let f = stack.feature(k, rr, cc);
                        let d = euclidean_distance(q, f);
                        if d < best {
                            best = d;
                            best_feat = Some(f);
                        }
                    }
                }
            }
            let dst = &mut features.data_mut()
                [geom.index(r, c) * stack.dim..(geom.index(r, c) + 1) * stack.dim];
            dst.copy_from_slice(best_feat.expect("non-empty stack"));
        }
    }
    Ok(ReferenceBank {
        kind: BankKind::Nearest,
        features,
        positions: Some(geom.positions()),
    })
}

/// Greedy max-min (farthest-point) coreset over the flattened feature pool.
/// The start is the first element of a seeded permutation; positions are not
/// carried.
pub fn coreset_bank(stack: &FeatureStack, budget: usize, seed: u64) -> Result<ReferenceBank> {
    let pool = stack.pool();
    if budget == 0 || budget > pool.len() {
        return Err(Error::config(format!(
            "coreset budget {budget} out of range 1..={}",
            pool.len()
        )));
    }
    let selected = coreset_select(&pool, budget, seed);
    let mut features = Tensor::zeros(vec![budget, stack.dim]);
    for (i, &idx) in selected.iter().enumerate() {
        features.data_mut()[i * stack.dim..(i + 1) * stack.dim].copy_from_slice(pool[idx]);
    }
    Ok(ReferenceBank {
        kind: BankKind::Coreset,
        features,
        positions: None,
    })
}

/// Greedy selection indices; exposed so tests can rescan every step.
pub fn coreset_select(pool: &[&[f64]], budget: usize, seed: u64) -> Vec<usize> {
    let mut rng = Rng::new(seed);
    let start = rng.permutation(pool.len())[0];
    let mut selected = Vec::with_capacity(budget);
    selected.push(start);
    let mut min_dist: Vec<f64> = pool
        .iter()
        .map(|f| euclidean_distance(f, pool[start]))
        .collect();
    while selected.len() < budget {
        let mut best_idx = 0;
        let mut best = f64::NEG_INFINITY;
        for (i, &d) in min_dist.iter().enumerate() {
            if d > best {
                best = d;
                best_idx = i;
            }
        }
        selected.push(best_idx);
        for (i, f) in pool.iter().enumerate() {
            let d = euclidean_distance(f, pool[best_idx]);
            if d < min_dist[i] {
                min_dist[i] = d;
            }
        }
    }
    selected
}

/// M unit-norm prototypes per grid position, updated by weighted averages of
/// the features hard-assigned to them.
pub fn prototype_bank(
    stack: &FeatureStack,
    prototypes_per_position: usize,
    iters: usize,
    seed: u64,
) -> Result<ReferenceBank> {
    let m = prototypes_per_position;
    if m == 0 {
        return Err(Error::config("prototype count must be >= 1"));
    }
    let geom = stack.geom;
    let dim = stack.dim;
    let mut rng = Rng::new(seed);
    let n_e = m * geom.patch_count();
    let mut protos = Tensor::zeros(vec![n_e, dim]);
    for row in 0..n_e {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let norm = l2_norm(&v).max(1e-12);
        v.iter_mut().for_each(|x| *x /= norm);
        protos.data_mut()[row * dim..(row + 1) * dim].copy_from_slice(&v);
    }

    let k_imgs = stack.images;
    for _ in 0..iters {
        for r in 0..geom.height {
            for c in 0..geom.width {
                let base = geom.index(r, c) * m;
                // Similarities of each input feature to each prototype.
                let mut sims = vec![0.0; k_imgs * m];
                for k in 0..k_imgs {
                    let x = stack.feature(k, r, c);
                    for j in 0..m {
                        sims[k * m + j] = dot(x, protos.row(base + j));
                    }
                }
                // Hard assignment: each input feature declares its most
                // similar prototype (ties to the lowest index).
                let assigned: Vec<usize> = (0..k_imgs)
                    .map(|k| {
                        let row = &sims[k * m..(k + 1) * m];
                        let mut best = 0;
                        for j in 1..m {
                            if row[j] > row[best] {
                                best = j;
                            }
                        }
                        best
                    })
                    .collect();
                // Matching weights: per prototype, softmax over all inputs.
                for j in 0..m {
                    let members: Vec<usize> =
                        (0..k_imgs).filter(|&k| assigned[k] == j).collect();
                    if members.is_empty() {
                        continue;
                    }
                    let col_max = (0..k_imgs)
                        .map(|k| sims[k * m + j])
                        .fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = (0..k_imgs).map(|k| (sims[k * m + j] - col_max).exp()).sum();
                    let nu = |k: usize| (sims[k * m + j] - col_max).exp() / denom;
                    let nu_max = members
                        .iter()
                        .map(|&k| nu(k))
                        .fold(f64::NEG_INFINITY, f64::max);
                    let mut updated: Vec<f64> = protos.row(base + j).to_vec();
                    for &k in &members {
                        let w = nu(k) / nu_max;
                        for (u, &x) in updated.iter_mut().zip(stack.feature(k, r, c)) {
                            *u += w * x;
                        }
                    }
                    let norm = l2_norm(&updated).max(1e-12);
                    updated.iter_mut().for_each(|x| *x /= norm);
                    protos.data_mut()[(base + j) * dim..(base + j + 1) * dim]
                        .copy_from_slice(&updated);
                }
            }
        }
    }

    let mut positions = Vec::with_capacity(n_e);
    for r in 0..geom.height {
        for c in 0..geom.width {
            for _ in 0..m {
                positions.push((r, c));
            }
        }
    }
    Ok(ReferenceBank {
        kind: BankKind::Prototype,
        features: protos,
        positions: Some(positions),
    })
}

/// Codebook learned by vector quantization with a straight-through
/// estimator: the decoder is a single affine map trained to maximize cosine
/// similarity with the input, the codebook moves under the commitment term.
pub fn codebook_bank(
    stack: &FeatureStack,
    codebook_size: usize,
    epochs: usize,
    seed: u64,
) -> Result<ReferenceBank> {
    let pool = stack.pool();
    if codebook_size == 0 || codebook_size > pool.len() {
        return Err(Error::config(format!(
            "codebook size {codebook_size} out of range 1..={}",
            pool.len()
        )));
    }
    let dim = stack.dim;
    let mut rng = Rng::new(seed);

    // Initialize entries from a seeded sample of distinct pool features.
    let perm = rng.permutation(pool.len());
    let mut init = Tensor::zeros(vec![codebook_size, dim]);
    for (i, &idx) in perm.iter().take(codebook_size).enumerate() {
        init.data_mut()[i * dim..(i + 1) * dim].copy_from_slice(pool[idx]);
    }

    let mut store = ParamStore::new();
    let codebook = store.add("codebook", init);
    let bound = 1.0 / (dim as f64).sqrt();
    let dec_w = store.add("decoder/w", rng.tensor_uniform(vec![dim, dim], -bound, bound));
    let dec_b = store.add("decoder/b", rng.tensor_uniform(vec![dim], -bound, bound));

    let n = stack.geom.patch_count();
    for epoch in 0..epochs {
        let mut order_rng = rng.derive(1000 + epoch as u64);
        for img in order_rng.permutation(stack.images) {
            let feats = {
                let mut t = Tensor::zeros(vec![n, dim]);
                for r in 0..stack.geom.height {
                    for c in 0..stack.geom.width {
                        let i = stack.geom.index(r, c);
                        t.data_mut()[i * dim..(i + 1) * dim]
                            .copy_from_slice(stack.feature(img, r, c));
                    }
                }
                t
            };
            // Nearest-entry selection happens outside the tape; the choice
            // is piecewise constant.
            let entries = store.value(codebook);
            let selection = Tensor::from_fn(vec![n, codebook_size], |i| {
                let (row, col) = (i / codebook_size, i % codebook_size);
                if nearest_entry(feats.row(row), entries) == col {
                    1.0
                } else {
                    0.0
                }
            });

            let tape = Tape::new();
            let x = tape.constant(feats);
            let sel = tape.constant(selection);
            let code = tape.param(&store, codebook);
            let z = tape.matmul(sel, code)?;
            // Straight-through: the decoder path does not update the
            // codebook; its gradient would be copied to an encoder, which
            // does not exist here.
            let z_dec = tape.stop_gradient(z);
            let o = tape.add_row_vec(
                tape.matmul(z_dec, tape.param(&store, dec_w))?,
                tape.param(&store, dec_b),
            )?;
            let cos = cosine_rows(&tape, o, x)?;
            let commit_code = row_l2(&tape, tape.sub(x, z)?)?;
            let frozen = tape.stop_gradient(z);
            let commit_input = row_l2(&tape, tape.sub(x, frozen)?)?;
            let neg_cos = tape.neg(cos);
            let penal = tape.add(commit_code, commit_input)?;
            let loss = tape.mean_all(tape.add(neg_cos, penal)?);
            tape.backward_params(loss, &mut store)?;
            store.adam_step_all(1e-2)?;
        }
    }

    Ok(ReferenceBank {
        kind: BankKind::Codebook,
        features: store.value(codebook).clone(),
        positions: None,
    })
}

fn nearest_entry(x: &[f64], entries: &Tensor) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for j in 0..entries.rows() {
        let d = euclidean_distance(x, entries.row(j));
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    best
}

fn row_l2(tape: &Tape, x: crate::autodiff::Var) -> Result<crate::autodiff::Var> {
    let sq = tape.mul(x, x)?;
    Ok(tape.sqrt(tape.row_sum(sq)?))
}

fn cosine_rows(
    tape: &Tape,
    a: crate::autodiff::Var,
    b: crate::autodiff::Var,
) -> Result<crate::autodiff::Var> {
    let num = tape.row_sum(tape.mul(a, b)?)?;
    let na = row_l2(tape, a)?;
    let nb = row_l2(tape, b)?;
    let den = tape.clamp_min(tape.mul(na, nb)?, 1e-12);
    tape.div(num, den)
}

/// Replace every feature with its nearest codebook entry (ties to the
/// lowest index).
pub fn quantize(x: &FeatureSequence, bank: &ReferenceBank) -> Result<FeatureSequence> {
    if bank.kind != BankKind::Codebook {
        return Err(Error::Usage(format!(
            "quantize requires a codebook bank, got {}",
            bank.kind.as_str()
        )));
    }
    if bank.dim() != x.dim() {
        return Err(Error::dim(format!(
            "codebook dim {} does not match feature dim {}",
            bank.dim(),
            x.dim()
        )));
    }
    let dim = x.dim();
    let mut out = Tensor::zeros(vec![x.patch_count(), dim]);
    for i in 0..x.patch_count() {
        let k = nearest_entry(x.features.row(i), &bank.features);
        out.data_mut()[i * dim..(i + 1) * dim].copy_from_slice(bank.features.row(k));
    }
    FeatureSequence::new(out, x.geom, x.level)
}

/// Where the inter branch gets its reference features: a fixed bank, or a
/// per-query construction (nearest features depend on the input image).
#[derive(Clone, Debug)]
pub enum BankSource {
    Static(ReferenceBank),
    PerQuery { stack: FeatureStack, window: usize },
}

impl BankSource {
    pub fn kind(&self) -> BankKind {
        match self {
            BankSource::Static(b) => b.kind,
            BankSource::PerQuery { .. } => BankKind::Nearest,
        }
    }

    pub fn bank_for(&self, query: &FeatureSequence) -> Result<ReferenceBank> {
        match self {
            BankSource::Static(b) => Ok(b.clone()),
            BankSource::PerQuery { stack, window } => nearest_bank(stack, query, *window),
        }
    }
}

/// Builds the configured bank source from a stack of training features.
pub fn build_bank_source(
    kind: BankKind,
    stack: &FeatureStack,
    coreset_budget: usize,
    nearest_window: usize,
    prototypes_per_position: usize,
    prototype_iters: usize,
    codebook_size: usize,
    codebook_epochs: usize,
    seed: u64,
) -> Result<BankSource> {
    Ok(match kind {
        BankKind::Mean => BankSource::Static(mean_bank(stack)),
        BankKind::Nearest => BankSource::PerQuery {
            stack: stack.clone(),
            window: nearest_window,
        },
        BankKind::Coreset => BankSource::Static(coreset_bank(stack, coreset_budget, seed)?),
        BankKind::Prototype => BankSource::Static(prototype_bank(
            stack,
            prototypes_per_position,
            prototype_iters,
            seed,
        )?),
        BankKind::Codebook => {
            BankSource::Static(codebook_bank(stack, codebook_size, codebook_epochs, seed)?)
        }
    })
}
