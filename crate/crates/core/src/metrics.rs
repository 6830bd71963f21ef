//! Evaluation: structural average precision over scored detections and a
//! heatmap F-score over rasterized ones, plus the PR curve behind the AP.
//!
//! Both metrics expect coordinates already rescaled to the square evaluation
//! grid (`eval_size`, default 128). A detection matches a ground-truth
//! segment when the smaller, over both endpoint orderings, of the summed
//! squared endpoint distances is at most `k`; matching is greedy in globally
//! descending score order, each target claimed at most once.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rasterize, LineSegment};

/// Evaluation knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Square evaluation grid, px.
    pub eval_size: usize,
    /// Squared-distance thresholds to report AP at.
    pub sap_thresholds: Vec<f64>,
    /// Threshold used for model selection and the exported PR curve.
    pub primary_sap: f64,
    /// Pixel tolerance of the heatmap match.
    pub fh_tolerance: f64,
    /// Number of score thresholds swept for the heatmap F-score.
    pub fh_thresholds: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            eval_size: 128,
            sap_thresholds: vec![5.0, 10.0, 15.0],
            primary_sap: 10.0,
            fh_tolerance: 1.5,
            fh_thresholds: 33,
        }
    }
}

/// One exported precision/recall point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub precision: f64,
    pub recall: f64,
    pub score: f64,
}

/// The full evaluation result, serialized as the eval artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// AP keyed by the squared-distance threshold.
    pub sap: BTreeMap<String, f64>,
    pub f_h: f64,
    /// PR curve at the primary threshold, grouped by unique score.
    pub pr_points: Vec<PrPoint>,
    pub n_pred: usize,
    pub n_gt: usize,
    pub n_images: usize,
}

/// Map key for a threshold: integral values print without a fraction.
pub fn threshold_key(k: f64) -> String {
    if k.fract() == 0.0 {
        format!("{k:.0}")
    } else {
        format!("{k}")
    }
}

/// Rescales segments onto the square evaluation grid, keeping scores.
pub fn scale_to_eval(
    lines: &[LineSegment],
    from_w: f64,
    from_h: f64,
    eval_size: usize,
) -> Vec<LineSegment> {
    let sx = eval_size as f64 / from_w;
    let sy = eval_size as f64 / from_h;
    lines
        .iter()
        .map(|l| {
            let mut out = *l;
            out.start.x *= sx;
            out.start.y *= sy;
            out.end.x *= sx;
            out.end.y *= sy;
            out
        })
        .collect()
}

/// Smaller, over both endpoint orderings, of the summed squared endpoint
/// distances.
fn squared_structural(a: &LineSegment, b: &LineSegment) -> f64 {
    let d2 = |p: crate::geometry::Point, q: crate::geometry::Point| {
        let dx = p.x - q.x;
        let dy = p.y - q.y;
        dx * dx + dy * dy
    };
    let direct = d2(a.start, b.start) + d2(a.end, b.end);
    let swapped = d2(a.start, b.end) + d2(a.end, b.start);
    direct.min(swapped)
}

/// True/false positive flags of all predictions in globally descending score
/// order (stable in input order on ties), plus the total gt count.
fn rank_and_match(
    preds: &[Vec<LineSegment>],
    gts: &[Vec<LineSegment>],
    k: f64,
) -> Result<(Vec<(f64, bool)>, usize)> {
    if preds.len() != gts.len() {
        return Err(Error::InvalidArgument(format!(
            "{} prediction lists for {} ground-truth lists",
            preds.len(),
            gts.len()
        )));
    }
    let mut ranked = Vec::new();
    for (img, im_preds) in preds.iter().enumerate() {
        for (i, p) in im_preds.iter().enumerate() {
            let Some(score) = p.score else {
                return Err(Error::InvalidArgument(format!(
                    "prediction {i} of image {img} has no score"
                )));
            };
            ranked.push((score, img, i));
        }
    }
    ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite scores"));

    let mut matched: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut flags = Vec::with_capacity(ranked.len());
    for (score, img, i) in ranked {
        let p = &preds[img][i];
        let mut best: Option<(f64, usize)> = None;
        for (j, g) in gts[img].iter().enumerate() {
            if matched[img][j] {
                continue;
            }
            let d = squared_structural(p, g);
            if d <= k && best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, j));
            }
        }
        if let Some((_, j)) = best {
            matched[img][j] = true;
            flags.push((score, true));
        } else {
            flags.push((score, false));
        }
    }
    let n_gt = gts.iter().map(Vec::len).sum();
    Ok((flags, n_gt))
}

/// All-points average precision: the precision envelope integrated over
/// recall. 0 with no predictions or no ground truth.
pub fn structural_ap(
    preds: &[Vec<LineSegment>],
    gts: &[Vec<LineSegment>],
    k: f64,
) -> Result<f64> {
    let (flags, n_gt) = rank_and_match(preds, gts, k)?;
    if flags.is_empty() || n_gt == 0 {
        return Ok(0.0);
    }
    let mut precisions = Vec::with_capacity(flags.len());
    let mut tp = 0usize;
    for (i, &(_, hit)) in flags.iter().enumerate() {
        tp += usize::from(hit);
        precisions.push(tp as f64 / (i + 1) as f64);
    }
    // Envelope: best precision at this rank or any later one.
    for i in (0..precisions.len().saturating_sub(1)).rev() {
        precisions[i] = precisions[i].max(precisions[i + 1]);
    }
    // Sum first, divide once: a perfect run of n hits at precision 1 must
    // come out exactly 1.
    let mut ap = 0.0;
    for (i, &(_, hit)) in flags.iter().enumerate() {
        if hit {
            ap += precisions[i];
        }
    }
    Ok(ap / n_gt as f64)
}

/// The cumulative precision/recall pairs behind [`structural_ap`], one point
/// per unique score (the curve evaluated with all predictions scoring at
/// least that much).
pub fn pr_curve(
    preds: &[Vec<LineSegment>],
    gts: &[Vec<LineSegment>],
    k: f64,
) -> Result<Vec<PrPoint>> {
    let (flags, n_gt) = rank_and_match(preds, gts, k)?;
    let mut points = Vec::new();
    let mut tp = 0usize;
    for (i, &(score, hit)) in flags.iter().enumerate() {
        tp += usize::from(hit);
        let last_of_score = flags.get(i + 1).is_none_or(|&(next, _)| next != score);
        if last_of_score {
            points.push(PrPoint {
                precision: tp as f64 / (i + 1) as f64,
                recall: if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 },
                score,
            });
        }
    }
    Ok(points)
}

/// Heatmap F-score: sweeps score thresholds, rasterizes surviving
/// predictions and targets at thickness 1, greedily matches pixels one to
/// one within `tolerance`, and returns the best F over the sweep. Zero when
/// there is nothing on either side.
pub fn heatmap_f(
    preds: &[Vec<LineSegment>],
    gts: &[Vec<LineSegment>],
    eval_size: usize,
    tolerance: f64,
    n_thresholds: usize,
) -> Result<f64> {
    if preds.len() != gts.len() {
        return Err(Error::InvalidArgument(format!(
            "{} prediction lists for {} ground-truth lists",
            preds.len(),
            gts.len()
        )));
    }
    for (img, im_preds) in preds.iter().enumerate() {
        if let Some(i) = im_preds.iter().position(|p| p.score.is_none()) {
            return Err(Error::InvalidArgument(format!(
                "prediction {i} of image {img} has no score"
            )));
        }
    }
    let offsets = tolerance_offsets(tolerance);
    let gt_masks: Vec<_> = gts.iter().map(|g| rasterize(g, eval_size, eval_size, 1.0)).collect();
    let mut best = 0.0f64;
    let steps = n_thresholds.max(1);
    for step in 0..steps {
        let threshold = if steps == 1 { 0.0 } else { step as f64 / (steps - 1) as f64 };
        let mut n_matched = 0usize;
        let mut n_pred_px = 0usize;
        let mut n_gt_px = 0usize;
        for (im_preds, gt_mask) in preds.iter().zip(&gt_masks) {
            let surviving: Vec<LineSegment> = im_preds
                .iter()
                .filter(|p| p.score.expect("checked above") >= threshold)
                .copied()
                .collect();
            let pred_mask = rasterize(&surviving, eval_size, eval_size, 1.0);
            n_pred_px += pred_mask.iter().filter(|&&v| v).count();
            n_gt_px += gt_mask.iter().filter(|&&v| v).count();
            n_matched += match_pixels(&pred_mask, gt_mask, &offsets);
        }
        let p = if n_pred_px == 0 { 1.0 } else { n_matched as f64 / n_pred_px as f64 };
        let r = if n_gt_px == 0 { 1.0 } else { n_matched as f64 / n_gt_px as f64 };
        if n_pred_px == 0 && n_gt_px == 0 {
            continue;
        }
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        best = best.max(f);
    }
    Ok(best)
}

/// Neighborhood offsets within the tolerance radius, ordered by squared
/// distance (ties row-major) so the nearest candidates are claimed first.
fn tolerance_offsets(tolerance: f64) -> Vec<(isize, isize)> {
    let r = tolerance.floor() as isize;
    let t2 = tolerance * tolerance;
    let mut offsets = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            let d2 = (dy * dy + dx * dx) as f64;
            if d2 <= t2 {
                offsets.push((d2 as i64, dy, dx));
            }
        }
    }
    offsets.sort();
    offsets.into_iter().map(|(_, dy, dx)| (dy, dx)).collect()
}

/// One-to-one greedy pixel matching, nearest offsets first.
fn match_pixels(
    pred: &ndarray::Array2<bool>,
    gt: &ndarray::Array2<bool>,
    offsets: &[(isize, isize)],
) -> usize {
    let (h, w) = pred.dim();
    let mut pred_used = ndarray::Array2::from_elem((h, w), false);
    let mut gt_used = ndarray::Array2::from_elem((h, w), false);
    let mut matched = 0;
    for &(dy, dx) in offsets {
        for r in 0..h {
            for c in 0..w {
                if !pred[[r, c]] || pred_used[[r, c]] {
                    continue;
                }
                let (gr, gc) = (r as isize + dy, c as isize + dx);
                if gr < 0 || gr >= h as isize || gc < 0 || gc >= w as isize {
                    continue;
                }
                let gp = (gr as usize, gc as usize);
                if gt[gp] && !gt_used[gp] {
                    pred_used[[r, c]] = true;
                    gt_used[gp] = true;
                    matched += 1;
                }
            }
        }
    }
    matched
}

/// Runs every configured metric over one prediction/target pairing.
pub fn compute_report(
    preds: &[Vec<LineSegment>],
    gts: &[Vec<LineSegment>],
    config: &EvalConfig,
) -> Result<EvalReport> {
    let mut sap = BTreeMap::new();
    for &k in &config.sap_thresholds {
        sap.insert(threshold_key(k), structural_ap(preds, gts, k)?);
    }
    let f_h = heatmap_f(preds, gts, config.eval_size, config.fh_tolerance, config.fh_thresholds)?;
    let pr_points = pr_curve(preds, gts, config.primary_sap)?;
    Ok(EvalReport {
        sap,
        f_h,
        pr_points,
        n_pred: preds.iter().map(Vec::len).sum(),
        n_gt: gts.iter().map(Vec::len).sum(),
        n_images: preds.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seg(x1: f64, y1: f64, x2: f64, y2: f64) -> LineSegment {
        LineSegment::new(Point::new(x1, y1), Point::new(x2, y2)).unwrap()
    }

    fn scored(x1: f64, y1: f64, x2: f64, y2: f64, s: f64) -> LineSegment {
        seg(x1, y1, x2, y2).with_score(s).unwrap()
    }

    #[test]
    fn sap_perfect_predictions_hit_one() {
        let gts = vec![
            vec![seg(10.0, 10.0, 60.0, 20.0), seg(30.0, 80.0, 90.0, 70.0)],
            vec![seg(5.0, 5.0, 100.0, 100.0)],
        ];
        let preds: Vec<Vec<LineSegment>> = gts
            .iter()
            .map(|g| g.iter().map(|l| l.with_score(1.0).unwrap()).collect())
            .collect();
        assert_eq!(structural_ap(&preds, &gts, 10.0).unwrap(), 1.0);
    }

    #[test]
    fn sap_no_predictions_is_zero() {
        let gts = vec![vec![seg(10.0, 10.0, 60.0, 20.0)]];
        let preds = vec![vec![]];
        assert_eq!(structural_ap(&preds, &gts, 10.0).unwrap(), 0.0);
    }

    #[test]
    fn sap_rejects_unscored_predictions() {
        let gts = vec![vec![seg(10.0, 10.0, 60.0, 20.0)]];
        let preds = vec![vec![seg(10.0, 10.0, 60.0, 20.0)]];
        assert!(structural_ap(&preds, &gts, 10.0).is_err());
    }

    #[test]
    fn sap_monotone_in_threshold() {
        let (preds, gts) = random_instance(99);
        let mut last = 0.0;
        for k in [1.0, 2.0, 5.0, 10.0, 15.0, 30.0] {
            let ap = structural_ap(&[preds.clone()], &[gts.clone()], k).unwrap();
            assert!(ap >= last - 1e-12, "k {k}: {ap} < {last}");
            last = ap;
        }
    }

    /// AP of a fixed true/false-positive flag sequence in rank order.
    fn ap_of_flags(flags: &[bool], n_gt: usize) -> f64 {
        if n_gt == 0 || flags.is_empty() {
            return 0.0;
        }
        let mut precisions = Vec::new();
        let mut tp = 0;
        for (i, &f) in flags.iter().enumerate() {
            tp += usize::from(f);
            precisions.push(tp as f64 / (i + 1) as f64);
        }
        for i in (0..precisions.len().saturating_sub(1)).rev() {
            precisions[i] = precisions[i].max(precisions[i + 1]);
        }
        flags
            .iter()
            .zip(&precisions)
            .filter(|(&f, _)| f)
            .map(|(_, &p)| p)
            .sum::<f64>()
            / n_gt as f64
    }

    /// Exhaustive oracle: enumerates every one-to-one assignment of ranked
    /// predictions to admissible targets and returns the best achievable AP.
    fn oracle_ap(preds: &[LineSegment], gts: &[LineSegment], k: f64) -> f64 {
        let mut ranked: Vec<usize> = (0..preds.len()).collect();
        ranked.sort_by(|&a, &b| {
            preds[b].score.unwrap().partial_cmp(&preds[a].score.unwrap()).unwrap()
        });
        let admissible: Vec<Vec<usize>> = ranked
            .iter()
            .map(|&p| {
                (0..gts.len())
                    .filter(|&j| squared_structural(&preds[p], &gts[j]) <= k)
                    .collect()
            })
            .collect();
        let mut best = 0.0f64;
        let mut flags = vec![false; ranked.len()];
        let mut used = vec![false; gts.len()];
        fn recurse(
            i: usize,
            admissible: &[Vec<usize>],
            used: &mut [bool],
            flags: &mut [bool],
            n_gt: usize,
            best: &mut f64,
        ) {
            if i == admissible.len() {
                *best = best.max(ap_of_flags(flags, n_gt));
                return;
            }
            flags[i] = false;
            recurse(i + 1, admissible, used, flags, n_gt, best);
            for &j in &admissible[i] {
                if !used[j] {
                    used[j] = true;
                    flags[i] = true;
                    recurse(i + 1, admissible, used, flags, n_gt, best);
                    flags[i] = false;
                    used[j] = false;
                }
            }
        }
        recurse(0, &admissible, &mut used, &mut flags, gts.len(), &mut best);
        best
    }

    /// Random single-image instance whose admissibility graph is a star per
    /// target (every prediction near at most one target at k = 15), so
    /// greedy matching and the exhaustive oracle must agree.
    fn random_instance(seed: u64) -> (Vec<LineSegment>, Vec<LineSegment>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        'outer: loop {
            let n_gt = rng.random_range(0..=4usize);
            let mut gts: Vec<LineSegment> = Vec::new();
            let mut attempts = 0;
            while gts.len() < n_gt && attempts < 200 {
                attempts += 1;
                let cand = seg(
                    rng.random_range(5.0..123.0),
                    rng.random_range(5.0..123.0),
                    rng.random_range(5.0..123.0),
                    rng.random_range(5.0..123.0),
                );
                if cand.length() < 8.0 {
                    continue;
                }
                if gts.iter().all(|g| squared_structural(&cand, g) > 400.0) {
                    gts.push(cand);
                }
            }
            let mut preds = Vec::new();
            for g in &gts {
                if rng.random_bool(0.8) {
                    let mut p = *g;
                    p.start.x += rng.random_range(-2.0..2.0);
                    p.start.y += rng.random_range(-2.0..2.0);
                    p.end.x += rng.random_range(-2.0..2.0);
                    p.end.y += rng.random_range(-2.0..2.0);
                    preds.push(p.with_score(rng.random_range(0.4..1.0)).unwrap());
                }
            }
            for _ in 0..rng.random_range(0..=2usize) {
                let cand = scored(
                    rng.random_range(5.0..123.0),
                    rng.random_range(5.0..123.0),
                    rng.random_range(5.0..123.0),
                    rng.random_range(5.0..123.0),
                    rng.random_range(0.1..0.9),
                );
                if gts.iter().all(|g| squared_structural(&cand, g) > 400.0) {
                    preds.push(cand);
                }
            }
            // Star check at the largest threshold in use.
            for p in &preds {
                let near = gts.iter().filter(|g| squared_structural(p, g) <= 15.0).count();
                if near > 1 {
                    continue 'outer;
                }
            }
            return (preds, gts);
        }
    }

    #[test]
    fn sap_matches_exhaustive_oracle() {
        for seed in 0..100 {
            let (preds, gts) = random_instance(seed);
            for k in [5.0, 10.0, 15.0] {
                let ap = structural_ap(&[preds.clone()], &[gts.clone()], k).unwrap();
                let oracle = oracle_ap(&preds, &gts, k);
                assert!(
                    (ap - oracle).abs() <= 1e-9,
                    "seed {seed} k {k}: {ap} vs oracle {oracle}"
                );
            }
        }
    }

    #[test]
    fn pr_curve_area_equals_ap_and_recall_is_monotone() {
        for seed in [3, 17, 40] {
            let (preds, gts) = random_instance(seed);
            if gts.is_empty() {
                continue;
            }
            let curve = pr_curve(&[preds.clone()], &[gts.clone()], 10.0).unwrap();
            for pair in curve.windows(2) {
                assert!(pair[1].recall >= pair[0].recall - 1e-12);
                assert!(pair[1].score <= pair[0].score);
            }
        }
        // Perfect predictions collapse to the single point (1, 1).
        let gts = vec![vec![seg(10.0, 10.0, 60.0, 20.0), seg(30.0, 80.0, 90.0, 70.0)]];
        let preds: Vec<Vec<LineSegment>> = gts
            .iter()
            .map(|g| g.iter().map(|l| l.with_score(1.0).unwrap()).collect())
            .collect();
        let curve = pr_curve(&preds, &gts, 10.0).unwrap();
        assert_eq!(curve.len(), 1);
        assert_eq!((curve[0].precision, curve[0].recall), (1.0, 1.0));
    }

    #[test]
    fn fh_perfect_predictions_hit_one() {
        let gts = vec![vec![seg(10.0, 10.0, 60.0, 20.0), seg(30.0, 80.0, 90.0, 70.0)]];
        let preds: Vec<Vec<LineSegment>> = gts
            .iter()
            .map(|g| g.iter().map(|l| l.with_score(1.0).unwrap()).collect())
            .collect();
        assert_eq!(heatmap_f(&preds, &gts, 128, 1.5, 33).unwrap(), 1.0);
    }

    #[test]
    fn fh_far_predictions_score_zero() {
        let gts = vec![vec![seg(10.0, 10.0, 60.0, 10.0)]];
        let preds = vec![vec![scored(10.0, 100.0, 60.0, 100.0, 0.9)]];
        assert_eq!(heatmap_f(&preds, &gts, 128, 1.5, 33).unwrap(), 0.0);
    }

    #[test]
    fn fh_half_recall_is_two_thirds() {
        // Two same-length rows; exactly one predicted.
        let gts = vec![vec![seg(2.0, 3.5, 13.0, 3.5), seg(2.0, 9.5, 13.0, 9.5)]];
        let preds = vec![vec![scored(2.0, 3.5, 13.0, 3.5, 0.8)]];
        let f = heatmap_f(&preds, &gts, 16, 1.5, 33).unwrap();
        assert!((f - 2.0 / 3.0).abs() < 1e-12, "{f}");
    }

    #[test]
    fn fh_invariant_to_endpoint_swap() {
        let (preds, gts) = random_instance(7);
        let swapped: Vec<Vec<LineSegment>> = vec![preds
            .iter()
            .map(|p| {
                let mut s = *p;
                std::mem::swap(&mut s.start, &mut s.end);
                s
            })
            .collect()];
        let a = heatmap_f(&[preds], &[gts.clone()], 128, 1.5, 33).unwrap();
        let b = heatmap_f(&swapped, &[gts], 128, 1.5, 33).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fh_empty_everything_is_zero() {
        let preds: Vec<Vec<LineSegment>> = vec![vec![]];
        let gts: Vec<Vec<LineSegment>> = vec![vec![]];
        assert_eq!(heatmap_f(&preds, &gts, 128, 1.5, 33).unwrap(), 0.0);
        assert_eq!(structural_ap(&preds, &gts, 10.0).unwrap(), 0.0);
    }

    #[test]
    fn report_covers_all_thresholds() {
        let (preds, gts) = random_instance(21);
        let config = EvalConfig::default();
        let report = compute_report(&[preds.clone()], &[gts.clone()], &config).unwrap();
        assert_eq!(report.sap.len(), 3);
        assert!(report.sap.contains_key("10"));
        assert_eq!(report.n_images, 1);
        assert_eq!(report.n_pred, preds.len());
        assert_eq!(report.n_gt, gts.len());
        for ap in report.sap.values() {
            assert!((0.0..=1.0).contains(ap));
        }
        assert!((0.0..=1.0).contains(&report.f_h));
    }

    #[test]
    fn scale_to_eval_rescales_and_keeps_scores() {
        let lines = vec![scored(10.0, 20.0, 30.0, 40.0, 0.7)];
        let out = scale_to_eval(&lines, 256.0, 512.0, 128);
        assert_eq!(out[0].start.x, 5.0);
        assert_eq!(out[0].start.y, 5.0);
        assert_eq!(out[0].end.x, 15.0);
        assert_eq!(out[0].end.y, 10.0);
        assert_eq!(out[0].score, Some(0.7));
    }
}
