//! Anomaly scoring: per-patch scores, pixel maps, multiscale fusion,
//! image-level scores and AUROC.
//!
//! The combined criterion multiplies the per-patch reconstruction distance
//! by `1 - softmax(-Div)` where Div is the layer-averaged symmetric KL
//! between the inter target and inter correlation rows of that patch; the
//! softmax runs over the patches of one image at one level.

use crate::autodiff::softmax_rows_value;
use crate::correlation::GridGeometry;
use crate::error::{Error, Result};
use crate::model::Level;
use crate::tensor::{dot, l2_norm, Tensor};

/// Evaluated (tape-free) forward snapshot for scoring.
#[derive(Clone, Debug)]
pub struct EvalTrace {
    pub x: Tensor,
    pub xhat: Tensor,
    pub te: Vec<Tensor>,
    pub se: Vec<Tensor>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Criterion {
    Rec,
    Div,
    RecAndDiv,
}

impl Criterion {
    pub fn as_str(self) -> &'static str {
        match self {
            Criterion::Rec => "rec",
            Criterion::Div => "div",
            Criterion::RecAndDiv => "recdiv",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "rec" => Ok(Criterion::Rec),
            "div" => Ok(Criterion::Div),
            "recdiv" => Ok(Criterion::RecAndDiv),
            other => Err(Error::config(format!("unknown scoring criterion '{other}'"))),
        }
    }
}

/// Per-patch reconstruction distances: `||x_i - xhat_i||_2 + (1 - cos)`.
pub fn reconstruction_scores(x: &Tensor, xhat: &Tensor) -> Tensor {
    let n = x.rows();
    Tensor::from_fn(vec![n], |i| {
        let (a, b) = (x.row(i), xhat.row(i));
        let l2 = crate::tensor::euclidean_distance(a, b);
        let cos = dot(a, b) / (l2_norm(a) * l2_norm(b)).max(1e-12);
        l2 + (1.0 - cos)
    })
}

/// Per-patch layer-averaged symmetric KL between inter target and inter
/// correlation rows.
pub fn divergence_scores(te: &[Tensor], se: &[Tensor]) -> Tensor {
    let n = te[0].rows();
    let k = te.len() as f64;
    Tensor::from_fn(vec![n], |i| {
        let mut acc = 0.0;
        for (t, s) in te.iter().zip(se.iter()) {
            let (trow, srow) = (t.row(i), s.row(i));
            for (&tv, &sv) in trow.iter().zip(srow.iter()) {
                let tc = tv.max(1e-12);
                let sc = sv.max(1e-12);
                acc += tv * (tc.ln() - sc.ln()) + sv * (sc.ln() - tc.ln());
            }
        }
        acc / k
    })
}

/// Patch anomaly scores under the chosen criterion.
pub fn patch_scores(trace: &EvalTrace, criterion: Criterion) -> Tensor {
    match criterion {
        Criterion::Rec => reconstruction_scores(&trace.x, &trace.xhat),
        Criterion::Div => divergence_scores(&trace.te, &trace.se),
        Criterion::RecAndDiv => {
            let rec = reconstruction_scores(&trace.x, &trace.xhat);
            let div = divergence_scores(&trace.te, &trace.se);
            let n = div.len();
            // softmax over the N patches of the negated divergences
            let neg = Tensor::from_fn(vec![1, n], |i| -div.data()[i]);
            let sm = softmax_rows_value(&neg);
            Tensor::from_fn(vec![n], |i| rec.data()[i] * (1.0 - sm.data()[i]))
        }
    }
}

/// Per-pixel anomaly score field.
#[derive(Clone, Debug)]
pub struct AnomalyMap {
    pub values: Tensor,
    pub levels: Vec<Level>,
}

impl AnomalyMap {
    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }
}

/// Reshape patch scores onto the grid and bilinear-upsample to image
/// extents (half-pixel-center convention, clamped at borders).
pub fn to_map(
    scores: &Tensor,
    geom: &GridGeometry,
    out_height: usize,
    out_width: usize,
    level: Level,
) -> Result<AnomalyMap> {
    if scores.len() != geom.patch_count() {
        return Err(Error::dim(format!(
            "{} scores do not fill a {}x{} grid",
            scores.len(),
            geom.height,
            geom.width
        )));
    }
    let (gh, gw) = (geom.height, geom.width);
    let sample = |r: f64, c: f64| -> f64 {
        let r = r.clamp(0.0, (gh - 1) as f64);
        let c = c.clamp(0.0, (gw - 1) as f64);
        let (r0, c0) = (r.floor() as usize, c.floor() as usize);
        let (r1, c1) = ((r0 + 1).min(gh - 1), (c0 + 1).min(gw - 1));
        let (tr, tc) = (r - r0 as f64, c - c0 as f64);
        let v00 = scores.data()[r0 * gw + c0];
        let v01 = scores.data()[r0 * gw + c1];
        let v10 = scores.data()[r1 * gw + c0];
        let v11 = scores.data()[r1 * gw + c1];
        let top = v00 + (v01 - v00) * tc;
        let bot = v10 + (v11 - v10) * tc;
        top + (bot - top) * tr
    };
    let scale_r = gh as f64 / out_height as f64;
    let scale_c = gw as f64 / out_width as f64;
    let values = Tensor::from_fn(vec![out_height, out_width], |i| {
        let (y, x) = (i / out_width, i % out_width);
        let src_r = (y as f64 + 0.5) * scale_r - 0.5;
        let src_c = (x as f64 + 0.5) * scale_c - 0.5;
        sample(src_r, src_c)
    });
    Ok(AnomalyMap {
        values,
        levels: vec![level],
    })
}

/// Optional Gaussian smoothing (separable, radius 3 sigma); off by default
/// in every pipeline, exposed behind a config knob.
pub fn smooth_map(map: &AnomalyMap, sigma: f64) -> AnomalyMap {
    if sigma <= 0.0 {
        return map.clone();
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-0.5 * (d as f64 / sigma).powi(2)).exp())
        .collect();
    let ksum: f64 = kernel.iter().sum();
    let (h, w) = (map.height(), map.width());
    let src = map.values.data();
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                let xx = (x as i64 + ki as i64 - radius).clamp(0, w as i64 - 1) as usize;
                acc += kv * src[y * w + xx];
            }
            tmp[y * w + x] = acc / ksum;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                let yy = (y as i64 + ki as i64 - radius).clamp(0, h as i64 - 1) as usize;
                acc += kv * tmp[yy * w + x];
            }
            out[y * w + x] = acc / ksum;
        }
    }
    AnomalyMap {
        values: Tensor::new(vec![h, w], out).expect("same extents"),
        levels: map.levels.clone(),
    }
}

/// Min and max over all pixels of all maps of one level; the normalization
/// statistics for fusion.
pub fn level_range(maps: &[AnomalyMap]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for m in maps {
        for &v in m.values.data() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    (lo, hi)
}

/// Fuses one image's per-level maps: each map is min-max normalized with its
/// level's test-set statistics, then the maps are averaged. A level with
/// zero range normalizes to zero everywhere.
pub fn fuse_levels(maps: &[AnomalyMap], ranges: &[(f64, f64)]) -> Result<AnomalyMap> {
    let first = maps
        .first()
        .ok_or_else(|| Error::dim("fuse_levels needs at least one map"))?;
    if maps.len() != ranges.len() {
        return Err(Error::dim("one (min,max) range per level is required"));
    }
    let (h, w) = (first.height(), first.width());
    for m in maps {
        if m.height() != h || m.width() != w {
            return Err(Error::dim(format!(
                "map extents {}x{} do not match {}x{}",
                m.height(),
                m.width(),
                h,
                w
            )));
        }
    }
    let mut values = Tensor::zeros(vec![h, w]);
    for (m, &(lo, hi)) in maps.iter().zip(ranges) {
        let span = hi - lo;
        for (o, &v) in values.data_mut().iter_mut().zip(m.values.data()) {
            *o += if span > 0.0 { (v - lo) / span } else { 0.0 };
        }
    }
    values.scale_assign(1.0 / maps.len() as f64);
    let mut levels = Vec::new();
    for m in maps {
        levels.extend(m.levels.iter().copied());
    }
    Ok(AnomalyMap { values, levels })
}

/// Image-level anomaly score: the maximum pixel of the fused map.
pub fn image_score(map: &AnomalyMap) -> f64 {
    map.values
        .data()
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max)
}

/// One scored test image.
#[derive(Clone, Debug)]
pub struct EvalRecord {
    pub id: String,
    pub label: u8,
    pub score: f64,
    pub map: AnomalyMap,
    pub mask: Tensor,
}

/// AUROC via the Mann-Whitney rank statistic with average ranks for ties.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::dim("scores and labels lengths differ"));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(
            "AUROC needs both classes present".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    // Average ranks over tie groups (1-based ranks).
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn map_of(values: Tensor) -> AnomalyMap {
        AnomalyMap {
            values,
            levels: vec![Level::Eight],
        }
    }

    #[test]
    fn perfect_reconstruction_zeroes_combined_scores() {
        let mut rng = Rng::new(1);
        let x = rng.tensor_uniform(vec![4, 3], -1.0, 1.0);
        let te = vec![Tensor::filled(vec![4, 2], 0.5)];
        let se = vec![softmax_rows_value(&rng.tensor_uniform(vec![4, 2], -1.0, 1.0))];
        let trace = EvalTrace {
            xhat: x.clone(),
            x,
            te,
            se,
        };
        let s = patch_scores(&trace, Criterion::RecAndDiv);
        for &v in s.data() {
            assert!(v.abs() < 1e-12, "rec factor vanishes so the product must");
        }
    }

    #[test]
    fn single_patch_combined_score_degenerates_to_zero() {
        // With N = 1 the softmax over patches is 1, so 1 - softmax = 0.
        let mut rng = Rng::new(2);
        let x = rng.tensor_uniform(vec![1, 3], -1.0, 1.0);
        let xh = rng.tensor_uniform(vec![1, 3], -1.0, 1.0);
        let trace = EvalTrace {
            x,
            xhat: xh,
            te: vec![Tensor::filled(vec![1, 4], 0.25)],
            se: vec![softmax_rows_value(&rng.tensor_uniform(vec![1, 4], -1.0, 1.0))],
        };
        let s = patch_scores(&trace, Criterion::RecAndDiv);
        assert_eq!(s.data()[0], 0.0);
    }

    #[test]
    fn combined_scores_recompose_from_factors() {
        let mut rng = Rng::new(3);
        let x = rng.tensor_uniform(vec![6, 4], -1.0, 1.0);
        let xh = rng.tensor_uniform(vec![6, 4], -1.0, 1.0);
        let te: Vec<Tensor> = (0..2)
            .map(|_| softmax_rows_value(&rng.tensor_uniform(vec![6, 5], -1.0, 1.0)))
            .collect();
        let se: Vec<Tensor> = (0..2)
            .map(|_| softmax_rows_value(&rng.tensor_uniform(vec![6, 5], -1.0, 1.0)))
            .collect();
        let trace = EvalTrace { x, xhat: xh, te, se };
        let combined = patch_scores(&trace, Criterion::RecAndDiv);
        let rec = patch_scores(&trace, Criterion::Rec);
        let div = patch_scores(&trace, Criterion::Div);
        let neg = Tensor::from_fn(vec![1, 6], |i| -div.data()[i]);
        let sm = softmax_rows_value(&neg);
        for i in 0..6 {
            let expect = rec.data()[i] * (1.0 - sm.data()[i]);
            assert!((combined.data()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_scores_upsample_to_uniform_map() {
        let geom = GridGeometry::new(2, 2);
        let scores = Tensor::filled(vec![4], 0.7);
        let map = to_map(&scores, &geom, 8, 8, Level::Eight).unwrap();
        for &v in map.values.data() {
            assert!((v - 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn hot_patch_peaks_inside_its_footprint() {
        let geom = GridGeometry::new(4, 4);
        let mut scores = Tensor::zeros(vec![16]);
        scores.data_mut()[geom.index(1, 2)] = 1.0;
        let map = to_map(&scores, &geom, 32, 32, Level::Eight).unwrap();
        let mut best = (0usize, 0usize, f64::NEG_INFINITY);
        for y in 0..32 {
            for x in 0..32 {
                let v = map.values.at2(y, x);
                if v > best.2 {
                    best = (y, x, v);
                }
            }
        }
        // Patch (1,2) covers pixels rows 8..16, cols 16..24.
        assert!(best.0 >= 8 && best.0 < 16);
        assert!(best.1 >= 16 && best.1 < 24);
    }

    #[test]
    fn bilinear_2x2_to_4x4_matches_hand_computed_oracle() {
        let geom = GridGeometry::new(2, 2);
        let scores = Tensor::new(vec![4], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let map = to_map(&scores, &geom, 4, 4, Level::Eight).unwrap();
        // Half-pixel centers: source coords (k + 0.5)/2 - 0.5 = [-.25, .25, .75, 1.25],
        // clamped to [0, 1]; 1-d weights along each axis: [0, .25, .75, 1].
        let w = [0.0, 0.25, 0.75, 1.0];
        for y in 0..4 {
            for x in 0..4 {
                let top = 0.0 + (1.0 - 0.0) * w[x];
                let bot = 2.0 + (3.0 - 2.0) * w[x];
                let expect = top + (bot - top) * w[y];
                assert!((map.values.at2(y, x) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fusing_identical_maps_is_identity_after_normalization() {
        let mut rng = Rng::new(5);
        let v = rng.tensor_uniform(vec![4, 4], 0.0, 2.0);
        let (lo, hi) = level_range(&[map_of(v.clone())]);
        let fused = fuse_levels(&[map_of(v.clone()), map_of(v.clone())], &[(lo, hi), (lo, hi)])
            .unwrap();
        for (f, &raw) in fused.values.data().iter().zip(v.data()) {
            let expect = (raw - lo) / (hi - lo);
            assert!((f - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_level_contributes_nothing() {
        let mut rng = Rng::new(6);
        let a = rng.tensor_uniform(vec![3, 3], 0.0, 1.0);
        let flat = Tensor::filled(vec![3, 3], 0.4);
        let ra = level_range(&[map_of(a.clone())]);
        let rf = level_range(&[map_of(flat.clone())]);
        assert_eq!(rf.0, rf.1);
        let fused = fuse_levels(&[map_of(a.clone()), map_of(flat)], &[ra, rf]).unwrap();
        for (f, &raw) in fused.values.data().iter().zip(a.data()) {
            let expect = 0.5 * (raw - ra.0) / (ra.1 - ra.0);
            assert!((f - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn fusion_is_order_invariant_and_matches_mean_oracle() {
        let mut rng = Rng::new(7);
        let a = rng.tensor_uniform(vec![3, 3], 0.0, 1.0);
        let b = rng.tensor_uniform(vec![3, 3], -1.0, 3.0);
        let ra = level_range(&[map_of(a.clone())]);
        let rb = level_range(&[map_of(b.clone())]);
        let ab = fuse_levels(&[map_of(a.clone()), map_of(b.clone())], &[ra, rb]).unwrap();
        let ba = fuse_levels(&[map_of(b.clone()), map_of(a.clone())], &[rb, ra]).unwrap();
        for (x, y) in ab.values.data().iter().zip(ba.values.data()) {
            assert!((x - y).abs() < 1e-15);
        }
        for i in 0..9 {
            let na = (a.data()[i] - ra.0) / (ra.1 - ra.0);
            let nb = (b.data()[i] - rb.0) / (rb.1 - rb.0);
            assert!((ab.values.data()[i] - 0.5 * (na + nb)).abs() < 1e-12);
        }
        // Extent mismatch is a dimension error.
        let small = map_of(Tensor::zeros(vec![2, 2]));
        assert!(fuse_levels(&[map_of(a), small], &[ra, (0.0, 1.0)]).is_err());
    }

    #[test]
    fn image_score_is_map_max_and_permutation_invariant() {
        let m = map_of(Tensor::new(vec![2, 2], vec![0.1, 0.9, 0.3, 0.2]).unwrap());
        assert_eq!(image_score(&m), 0.9);
        let c = map_of(Tensor::filled(vec![3, 3], 0.42));
        assert_eq!(image_score(&c), 0.42);
        let p = map_of(Tensor::new(vec![2, 2], vec![0.9, 0.1, 0.2, 0.3]).unwrap());
        assert_eq!(image_score(&m), image_score(&p));
    }

    #[test]
    fn auroc_oracles() {
        assert_eq!(
            auroc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(),
            1.0,
            "perfect separation"
        );
        assert_eq!(
            auroc(&[0.5, 0.5, 0.5, 0.5], &[0, 1, 0, 1]).unwrap(),
            0.5,
            "all ties"
        );
        assert_eq!(
            auroc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(),
            0.75
        );
        assert!(matches!(
            auroc(&[0.1, 0.2], &[1, 1]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn auroc_matches_pairwise_oracle_and_properties() {
        let mut rng = Rng::new(8);
        for trial in 0..30 {
            let n = 3 + rng.below(40);
            let mut scores: Vec<f64> = (0..n)
                .map(|_| (rng.uniform(0.0, 1.0) * 8.0).round() / 8.0)
                .collect();
            let mut labels: Vec<u8> = (0..n).map(|_| (rng.below(2)) as u8).collect();
            labels[0] = 0;
            labels[n - 1] = 1;
            // Pairwise counting oracle: wins + half-ties over all pos/neg pairs.
            let mut wins = 0.0;
            let mut total = 0.0;
            for i in 0..n {
                for j in 0..n {
                    if labels[i] == 1 && labels[j] == 0 {
                        total += 1.0;
                        if scores[i] > scores[j] {
                            wins += 1.0;
                        } else if scores[i] == scores[j] {
                            wins += 0.5;
                        }
                    }
                }
            }
            let fast = auroc(&scores, &labels).unwrap();
            assert_eq!(fast, wins / total, "trial {trial}: rank vs pairwise");

            // Invariance under strictly increasing transforms.
            let transformed: Vec<f64> = scores.iter().map(|&s| (3.0 * s).exp() + 1.0).collect();
            assert_eq!(fast, auroc(&transformed, &labels).unwrap());

            // Complement property needs tie-free scores.
            scores.iter_mut().enumerate().for_each(|(i, s)| {
                *s += i as f64 * 1e-9;
            });
            let a = auroc(&scores, &labels).unwrap();
            let flipped: Vec<u8> = labels.iter().map(|&l| 1 - l).collect();
            let b = auroc(&scores, &flipped).unwrap();
            assert!((a + b - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn smoothing_preserves_constant_maps_and_mass_roughly() {
        let c = map_of(Tensor::filled(vec![8, 8], 0.3));
        let s = smooth_map(&c, 1.0);
        for &v in s.values.data() {
            assert!((v - 0.3).abs() < 1e-12);
        }
        let off = smooth_map(&c, 0.0);
        assert_eq!(off.values, c.values);
    }
}
