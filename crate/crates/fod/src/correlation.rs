//! Correlation-distribution mathematics.
//!
//! Four families of row-stochastic matrices flow through the model:
//! learned intra-image correlations (attention within one patch sequence),
//! learned inter-image correlations (attention from patches to a reference
//! bank), and their RBF-kernel target correlations built from grid positions
//! with learnable variances. This module also provides the averaged
//! symmetric KL measure between correlation matrices and the entropy item.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Floor applied to probabilities before any logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Patch-grid geometry; patch index `i` maps to row-major `(row, col)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridGeometry {
    pub height: usize,
    pub width: usize,
}

impl GridGeometry {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }

    pub fn patch_count(&self) -> usize {
        self.height * self.width
    }

    pub fn position(&self, index: usize) -> (usize, usize) {
        (index / self.width, index % self.width)
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    pub fn positions(&self) -> Vec<(usize, usize)> {
        (0..self.patch_count()).map(|i| self.position(i)).collect()
    }

    /// N x N squared grid distances between all patch positions.
    pub fn squared_distances(&self) -> Tensor {
        let pos = self.positions();
        squared_distance_matrix(&pos, &pos)
    }

    /// N x M squared grid distances from every patch to `targets`.
    pub fn squared_distances_to(&self, targets: &[(usize, usize)]) -> Tensor {
        squared_distance_matrix(&self.positions(), targets)
    }
}

fn squared_distance_matrix(rows: &[(usize, usize)], cols: &[(usize, usize)]) -> Tensor {
    let m = cols.len();
    Tensor::from_fn(vec![rows.len(), m], |i| {
        let (r, c) = (rows[i / m], cols[i % m]);
        let di = r.0 as f64 - c.0 as f64;
        let dj = r.1 as f64 - c.1 as f64;
        di * di + dj * dj
    })
}

/// Unconstrained kernel-variance parameters; the variances are
/// `sigma = exp(theta)` so positivity holds by construction.
#[derive(Clone, Copy, Debug)]
pub struct KernelVariance {
    pub theta_x: ParamId,
    pub theta_y: ParamId,
}

impl KernelVariance {
    /// Fresh pair initialized at theta = 0, i.e. sigma = 1 grid unit.
    pub fn init(store: &mut ParamStore, prefix: &str) -> Self {
        Self {
            theta_x: store.add(format!("{prefix}/theta_x"), Tensor::scalar(0.0)),
            theta_y: store.add(format!("{prefix}/theta_y"), Tensor::scalar(0.0)),
        }
    }

    pub fn sigmas(&self, store: &ParamStore) -> (f64, f64) {
        (
            store.value(self.theta_x).item().exp(),
            store.value(self.theta_y).item().exp(),
        )
    }
}

/// A row-stochastic matrix snapshot (evaluated, not taped).
#[derive(Clone, Debug)]
pub struct CorrelationMatrix {
    values: Tensor,
}

impl CorrelationMatrix {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 2 {
            return Err(Error::dim(format!(
                "correlation matrix must be rank 2, got {:?}",
                values.shape()
            )));
        }
        for i in 0..values.rows() {
            let mut sum = 0.0;
            for &v in values.row(i) {
                if v < 0.0 {
                    return Err(Error::NonFinite(format!(
                        "negative probability {v} in correlation row {i}"
                    )));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::NonFinite(format!(
                    "correlation row {i} sums to {sum}, not 1"
                )));
            }
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }
}

/// RBF target correlation over grid positions, one row per query patch.
///
/// Entries are proportional to `exp(-d^2 / (2 (sigma_x^2 + sigma_y^2)))` and
/// each row is normalized to sum 1 (the Gaussian prefactor cancels). With
/// `ref_positions` given, distances run from query positions to those
/// positions; without them the matrix is the N x N self-target.
pub fn build_target_correlation(
    tape: &Tape,
    store: &ParamStore,
    geom: &GridGeometry,
    kv: &KernelVariance,
    ref_positions: Option<&[(usize, usize)]>,
) -> Result<Var> {
    let dist2 = match ref_positions {
        None => geom.squared_distances(),
        Some(targets) => {
            if targets.is_empty() {
                return Err(Error::EmptyBank);
            }
            for &(r, c) in targets {
                if r >= geom.height || c >= geom.width {
                    return Err(Error::dim(format!(
                        "reference position ({r},{c}) outside {}x{} grid",
                        geom.height, geom.width
                    )));
                }
            }
            geom.squared_distances_to(targets)
        }
    };
    let theta_x = tape.param(store, kv.theta_x);
    let theta_y = tape.param(store, kv.theta_y);
    // beta = 1 / (2 (sigma_x^2 + sigma_y^2)), sigma = exp(theta)
    let sx2 = tape.exp(tape.scale(theta_x, 2.0));
    let sy2 = tape.exp(tape.scale(theta_y, 2.0));
    let beta = tape.recip(tape.scale(tape.add(sx2, sy2)?, 2.0));
    let neg_d2 = tape.constant(dist2.map(|v| -v));
    let logits = tape.mul_scalar(neg_d2, beta)?;
    // Row normalization of exp(logits) is exactly a row softmax.
    tape.softmax_rows(logits)
}

/// Uniform fallback target for reference banks without positions: every row
/// is the uniform distribution over the bank, carrying no gradient.
pub fn uniform_target(tape: &Tape, queries: usize, bank_len: usize) -> Result<Var> {
    if bank_len == 0 {
        return Err(Error::EmptyBank);
    }
    Ok(tape.constant(Tensor::filled(
        vec![queries, bank_len],
        1.0 / bank_len as f64,
    )))
}

/// Learned intra-image correlation: `softmax_rows((x wq)(x wk)^T / sqrt(d_model))`.
pub fn intra_correlation(
    tape: &Tape,
    store: &ParamStore,
    x: Var,
    wq: ParamId,
    wk: ParamId,
    d_model: usize,
) -> Result<Var> {
    let q = tape.matmul(x, tape.param(store, wq))?;
    let k = tape.matmul(x, tape.param(store, wk))?;
    let logits = tape.matmul(q, tape.transpose(k)?)?;
    tape.softmax_rows(tape.scale(logits, 1.0 / (d_model as f64).sqrt()))
}

/// Learned inter-image correlation: queries from the patch sequence, keys
/// from the reference features.
pub fn inter_correlation(
    tape: &Tape,
    store: &ParamStore,
    x: Var,
    bank_features: Var,
    wq: ParamId,
    wk: ParamId,
    d_model: usize,
) -> Result<Var> {
    if tape.shape(bank_features)[0] == 0 {
        return Err(Error::EmptyBank);
    }
    let q = tape.matmul(x, tape.param(store, wq))?;
    let k = tape.matmul(bank_features, tape.param(store, wk))?;
    let logits = tape.matmul(q, tape.transpose(k)?)?;
    tape.softmax_rows(tape.scale(logits, 1.0 / (d_model as f64).sqrt()))
}

/// Per-row symmetric KL divergence `KL(t_i || s_i) + KL(s_i || t_i)`,
/// probabilities floored at [`PROB_FLOOR`] before the logs.
pub fn symmetric_kl_rows(tape: &Tape, t: Var, s: Var) -> Result<Var> {
    if tape.shape(t) != tape.shape(s) {
        return Err(Error::dim(format!(
            "symmetric_kl: shapes {:?} and {:?} differ",
            tape.shape(t),
            tape.shape(s)
        )));
    }
    let ln_t = tape.ln(tape.clamp_min(t, PROB_FLOOR));
    let ln_s = tape.ln(tape.clamp_min(s, PROB_FLOOR));
    let diff = tape.sub(ln_t, ln_s)?;
    let kl_ts = tape.row_sum(tape.mul(t, diff)?)?;
    let diff_rev = tape.neg(diff);
    let kl_st = tape.row_sum(tape.mul(s, diff_rev)?)?;
    tape.add(kl_ts, kl_st)
}

/// Element-wise mean of per-layer per-row symmetric KL vectors: the
/// divergence measure combining all K layers, still one value per patch row.
pub fn divergence_rows(tape: &Tape, ts: &[Var], ss: &[Var]) -> Result<Var> {
    debug_assert_eq!(ts.len(), ss.len());
    debug_assert!(!ts.is_empty());
    let mut acc = symmetric_kl_rows(tape, ts[0], ss[0])?;
    for (t, s) in ts.iter().zip(ss.iter()).skip(1) {
        let rows = symmetric_kl_rows(tape, *t, *s)?;
        acc = tape.add(acc, rows)?;
    }
    Ok(tape.scale(acc, 1.0 / ts.len() as f64))
}

/// Scalar divergence: the row mean of [`divergence_rows`].
pub fn divergence_measure(tape: &Tape, ts: &[Var], ss: &[Var]) -> Result<Var> {
    let rows = divergence_rows(tape, ts, ss)?;
    Ok(tape.mean_all(rows))
}

/// Row-summed divergence, the loss-facing reduction. The entropy item is a
/// sum over all N rows, so the divergence must live on the same O(N) scale
/// or the entropy term dominates the trade-off by a factor of N and the
/// correlations collapse onto a single reference.
pub fn divergence_total(tape: &Tape, ts: &[Var], ss: &[Var]) -> Result<Var> {
    let rows = divergence_rows(tape, ts, ss)?;
    Ok(tape.sum_all(rows))
}

/// Entropy item of one correlation matrix: `sum_ij -S_ij ln S_ij` with
/// `0 ln 0 := 0` via the probability floor.
pub fn correlation_entropy(tape: &Tape, s: Var) -> Result<Var> {
    let ln_s = tape.ln(tape.clamp_min(s, PROB_FLOOR));
    Ok(tape.neg(tape.sum_all(tape.mul(s, ln_s)?)))
}

/// Mean entropy item over the K layers.
pub fn entropy_measure(tape: &Tape, ss: &[Var]) -> Result<Var> {
    debug_assert!(!ss.is_empty());
    let mut acc = correlation_entropy(tape, ss[0])?;
    for s in ss.iter().skip(1) {
        let e = correlation_entropy(tape, *s)?;
        acc = tape.add(acc, e)?;
    }
    Ok(tape.scale(acc, 1.0 / ss.len() as f64))
}
