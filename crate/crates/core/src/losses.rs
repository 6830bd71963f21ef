//! Training objectives.
//!
//! The labeled loss scores a 16-channel prediction against encoded targets:
//! weighted BCE on the binary channels, masked L1 on the regression
//! channels, and an endpoint matching term on decoded segments (for both the
//! full-segment and sub-segment blocks). The unlabeled consistency loss
//! compares strong-view predictions against the weak view under a
//! per-position confidence gate, with hard pseudo-labels on binary channels
//! and L1 on regression channels.
//!
//! Every `_with_grad` variant returns analytic gradients with respect to the
//! prediction pre-activations. The matching term is handled straight
//! through: peak positions and the matching itself are treated as constants
//! per step, gradients flow only into the displacement values at matched
//! peaks. The weak view in the consistency loss is a fixed target; no
//! gradient is produced for it.

use ndarray::{Array2, Array3, ArrayView2, ArrayViewMut2};
use serde::{Deserialize, Serialize};

use crate::augment::{mix_maps, MixMask};
use crate::encoding::{
    decode_peaks_channels, layout, match_lines, sigmoid, DecodeParams, FeatureMaps,
    GroundTruthMaps,
};
use crate::error::{Error, Result};
use crate::geometry::{from_tripoint, sol_split, LineSegment, SolParams};

/// Relative weight of each labeled-loss part. Breakdown fields hold the
/// already-weighted contributions so the total stays the sum of its parts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub center: f64,
    pub disp: f64,
    #[serde(rename = "match")]
    pub tp_match: f64,
    pub sol_center: f64,
    pub sol_disp: f64,
    pub sol_match: f64,
    pub seg_line: f64,
    pub seg_junction: f64,
    pub reg_length: f64,
    pub reg_degree: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            center: 1.0,
            disp: 1.0,
            tp_match: 1.0,
            sol_center: 1.0,
            sol_disp: 1.0,
            sol_match: 1.0,
            seg_line: 1.0,
            seg_junction: 1.0,
            reg_length: 1.0,
            reg_degree: 1.0,
        }
    }
}

/// Decode-and-match knobs for the matching term, in map units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchingParams {
    /// Structural distance cap for a prediction/target pair to count.
    pub max_dist: f64,
    pub decode: DecodeParams,
}

impl Default for MatchingParams {
    fn default() -> Self {
        MatchingParams { max_dist: 5.0, decode: DecodeParams::default() }
    }
}

/// Everything the labeled loss needs beyond the tensors themselves.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossParams {
    pub weights: LossWeights,
    /// Positive-class weight for the sparse center channels.
    pub positive_weight_center: f64,
    pub positive_weight_junction: f64,
    pub positive_weight_line: f64,
    /// Sub-segment window for matching targets, in map units. Must agree
    /// with the window used at encoding time.
    pub sol: SolParams,
    pub matching: MatchingParams,
}

impl Default for LossParams {
    fn default() -> Self {
        LossParams {
            weights: LossWeights::default(),
            positive_weight_center: 30.0,
            positive_weight_junction: 30.0,
            positive_weight_line: 1.0,
            sol: SolParams { length: 8.0, overlap: 0.5 },
            matching: MatchingParams::default(),
        }
    }
}

/// Weighted per-term values of the labeled loss. `total` is their sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledLossBreakdown {
    pub center: f64,
    pub disp: f64,
    #[serde(rename = "match")]
    pub tp_match: f64,
    pub sol_center: f64,
    pub sol_disp: f64,
    pub sol_match: f64,
    pub seg_line: f64,
    pub seg_junction: f64,
    pub reg_length: f64,
    pub reg_degree: f64,
    pub total: f64,
}

/// Per-family values of the consistency loss. `total` is their sum and is 0
/// whenever the gate admits no position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyLossBreakdown {
    pub classification: f64,
    pub regression: f64,
    /// Fraction of map positions whose weak center confidence clears τ.
    pub mask_fraction: f64,
    pub total: f64,
}

/// Numerically stable `ln(1 + e^x)`.
#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
fn l1_sign(d: f64) -> f64 {
    if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Weighted binary cross-entropy between a pre-activation map and a soft
/// binary target, averaged over all pixels. `positive_weight` scales the
/// target-positive half; 1 gives plain BCE.
pub fn wbce(
    pred: &ArrayView2<'_, f64>,
    target: &ArrayView2<'_, f64>,
    positive_weight: f64,
) -> Result<f64> {
    let mut scratch = Array2::zeros(pred.dim());
    wbce_into(pred, target, positive_weight, 1.0, &mut scratch.view_mut())
}

fn wbce_into(
    pred: &ArrayView2<'_, f64>,
    target: &ArrayView2<'_, f64>,
    positive_weight: f64,
    weight: f64,
    grad: &mut ArrayViewMut2<'_, f64>,
) -> Result<f64> {
    if pred.dim() != target.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", pred.dim()),
            got: format!("{:?}", target.dim()),
        });
    }
    let (h, w) = pred.dim();
    let n = (h * w) as f64;
    let mut sum = 0.0;
    for r in 0..h {
        for c in 0..w {
            let x = pred[[r, c]];
            let t = target[[r, c]];
            sum += positive_weight * t * softplus(-x) + (1.0 - t) * softplus(x);
            let g = -positive_weight * t * sigmoid(-x) + (1.0 - t) * sigmoid(x);
            grad[[r, c]] += weight * g / n;
        }
    }
    Ok(weight * sum / n)
}

/// Mean absolute error over mask-positive pixels; 0 when the mask is empty.
pub fn masked_l1(
    pred: &ArrayView2<'_, f64>,
    target: &ArrayView2<'_, f64>,
    mask: &Array2<bool>,
) -> Result<f64> {
    if pred.dim() != target.dim() || pred.dim() != mask.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", pred.dim()),
            got: format!("{:?} / {:?}", target.dim(), mask.dim()),
        });
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (idx, &m) in mask.indexed_iter() {
        if m {
            sum += (pred[idx] - target[idx]).abs();
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Masked L1 over several (channel, mask) terms pooled into one mean, so a
/// part spanning both the full-segment and sub-segment blocks normalizes by
/// the union of its elements.
fn masked_l1_terms_into(
    pred: &Array3<f64>,
    target: &Array3<f64>,
    terms: &[(usize, &Array2<bool>)],
    weight: f64,
    grad: &mut Array3<f64>,
) -> f64 {
    let mut n = 0usize;
    for &(_, mask) in terms {
        n += mask.iter().filter(|&&m| m).count();
    }
    if n == 0 {
        return 0.0;
    }
    let scale = weight / n as f64;
    let mut sum = 0.0;
    for &(ch, mask) in terms {
        for ((r, c), &m) in mask.indexed_iter() {
            if m {
                let d = pred[[ch, r, c]] - target[[ch, r, c]];
                sum += d.abs();
                grad[[ch, r, c]] += scale * l1_sign(d);
            }
        }
    }
    weight * sum / n as f64
}

/// Endpoint matching loss on the full-segment block: decodes predictions,
/// matches them to `gt_lines`, and averages per-pair L1 endpoint distances
/// plus the L1 between the decoded midpoint and the target midpoint. 0 when
/// nothing matches. Coordinates are map units.
pub fn matching_loss(
    pred: &FeatureMaps,
    gt_lines: &[LineSegment],
    params: &MatchingParams,
) -> f64 {
    let mut scratch = Array3::zeros(pred.maps.dim());
    matching_into(pred, gt_lines, layout::TP_CENTER, layout::TP_DISP, params, 1.0, &mut scratch)
}

fn matching_into(
    pred: &FeatureMaps,
    gt_lines: &[LineSegment],
    center_ch: usize,
    disp_ch: [usize; 4],
    params: &MatchingParams,
    weight: f64,
    grad: &mut Array3<f64>,
) -> f64 {
    let peaks = decode_peaks_channels(pred, center_ch, disp_ch, &params.decode);
    let segs: Vec<LineSegment> = peaks.iter().map(|p| p.seg).collect();
    let matches = match_lines(&segs, gt_lines, params.max_dist);
    if matches.is_empty() {
        return 0.0;
    }
    let scale = weight / matches.len() as f64;
    let mut sum = 0.0;
    for m in &matches {
        let pk = &peaks[m.pred];
        let g = &gt_lines[m.gt];
        let (gs, ge) = if m.swapped { (g.end, g.start) } else { (g.start, g.end) };
        let gm = g.midpoint();
        let cb = pk.seg.midpoint();
        let ds = (pk.seg.start.x - gs.x, pk.seg.start.y - gs.y);
        let de = (pk.seg.end.x - ge.x, pk.seg.end.y - ge.y);
        let dc = (cb.x - gm.x, cb.y - gm.y);
        sum += ds.0.abs() + ds.1.abs() + de.0.abs() + de.1.abs() + dc.0.abs() + dc.1.abs();
        let (r, c) = (pk.r, pk.c);
        grad[[disp_ch[0], r, c]] += scale * (l1_sign(ds.0) + 0.5 * l1_sign(dc.0));
        grad[[disp_ch[1], r, c]] += scale * (l1_sign(ds.1) + 0.5 * l1_sign(dc.1));
        grad[[disp_ch[2], r, c]] += scale * (l1_sign(de.0) + 0.5 * l1_sign(dc.0));
        grad[[disp_ch[3], r, c]] += scale * (l1_sign(de.1) + 0.5 * l1_sign(dc.1));
    }
    weight * sum / matches.len() as f64
}

/// Full labeled objective. See [`labeled_loss_with_grad`].
pub fn labeled_loss(
    pred: &FeatureMaps,
    gt: &GroundTruthMaps,
    gt_lines: &[LineSegment],
    params: &LossParams,
) -> Result<LabeledLossBreakdown> {
    Ok(labeled_loss_with_grad(pred, gt, gt_lines, params)?.0)
}

/// Labeled objective plus its gradient with respect to the prediction
/// pre-activations. Matching gradients are straight through: the decoded
/// peak set and the matching are constants, only displacement values at
/// matched peaks receive gradient.
pub fn labeled_loss_with_grad(
    pred: &FeatureMaps,
    gt: &GroundTruthMaps,
    gt_lines: &[LineSegment],
    params: &LossParams,
) -> Result<(LabeledLossBreakdown, Array3<f64>)> {
    if pred.maps.dim() != gt.maps.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", gt.maps.dim()),
            got: format!("{:?}", pred.maps.dim()),
        });
    }
    let mut grad = Array3::zeros(pred.maps.dim());
    let w = &params.weights;
    let axis = ndarray::Axis(0);

    let cls = |ch: usize, pos_w: f64, weight: f64, grad: &mut Array3<f64>| -> Result<f64> {
        let p = pred.maps.index_axis(axis, ch);
        let t = gt.maps.index_axis(axis, ch);
        let mut g = grad.index_axis_mut(axis, ch);
        wbce_into(&p, &t, pos_w, weight, &mut g)
    };

    let center = cls(layout::TP_CENTER, params.positive_weight_center, w.center, &mut grad)?;
    let sol_center =
        cls(layout::SOL_CENTER, params.positive_weight_center, w.sol_center, &mut grad)?;
    let seg_line = cls(layout::SEG_LINE, params.positive_weight_line, w.seg_line, &mut grad)?;
    let seg_junction =
        cls(layout::SEG_JUNCTION, params.positive_weight_junction, w.seg_junction, &mut grad)?;

    let tp_terms: Vec<(usize, &Array2<bool>)> =
        layout::TP_DISP.iter().map(|&ch| (ch, &gt.regression_mask)).collect();
    let disp = masked_l1_terms_into(&pred.maps, &gt.maps, &tp_terms, w.disp, &mut grad);
    let sol_terms: Vec<(usize, &Array2<bool>)> =
        layout::SOL_DISP.iter().map(|&ch| (ch, &gt.sol_regression_mask)).collect();
    let sol_disp = masked_l1_terms_into(&pred.maps, &gt.maps, &sol_terms, w.sol_disp, &mut grad);

    let reg_length = masked_l1_terms_into(
        &pred.maps,
        &gt.maps,
        &[
            (layout::TP_LENGTH, &gt.regression_mask),
            (layout::SOL_LENGTH, &gt.sol_regression_mask),
        ],
        w.reg_length,
        &mut grad,
    );
    let reg_degree = masked_l1_terms_into(
        &pred.maps,
        &gt.maps,
        &[
            (layout::TP_DEGREE, &gt.regression_mask),
            (layout::SOL_DEGREE, &gt.sol_regression_mask),
        ],
        w.reg_degree,
        &mut grad,
    );

    let tp_match = matching_into(
        pred,
        gt_lines,
        layout::TP_CENTER,
        layout::TP_DISP,
        &params.matching,
        w.tp_match,
        &mut grad,
    );
    let mut gt_subs = Vec::new();
    for line in gt_lines {
        for tp in sol_split(line, &params.sol)?.segments {
            gt_subs.push(from_tripoint(&tp)?);
        }
    }
    let sol_match = matching_into(
        pred,
        &gt_subs,
        layout::SOL_CENTER,
        layout::SOL_DISP,
        &params.matching,
        w.sol_match,
        &mut grad,
    );

    let total = center
        + disp
        + tp_match
        + sol_center
        + sol_disp
        + sol_match
        + seg_line
        + seg_junction
        + reg_length
        + reg_degree;
    let breakdown = LabeledLossBreakdown {
        center,
        disp,
        tp_match,
        sol_center,
        sol_disp,
        sol_match,
        seg_line,
        seg_junction,
        reg_length,
        reg_degree,
        total,
    };
    Ok((breakdown, grad))
}

/// Consistency objective. See [`consistency_loss_with_grad`].
pub fn consistency_loss(
    p_w: &FeatureMaps,
    p_s1: &FeatureMaps,
    p_s2: Option<&FeatureMaps>,
    tau: f64,
    mix: Option<(&FeatureMaps, &MixMask)>,
) -> Result<ConsistencyLossBreakdown> {
    Ok(consistency_loss_with_grad(p_w, p_s1, p_s2, tau, mix)?.0)
}

/// Consistency objective plus gradients for the strong views.
///
/// The weak prediction `p_w` is a fixed target: positions where its center
/// confidence reaches `tau` are gated in (τ above 1 closes the gate
/// entirely). Binary channels contribute BCE of each strong view against the
/// hard pseudo-label (weak activation thresholded at 0.5); regression
/// channels contribute L1 against the weak value. Each family is normalized
/// by the full map area times its channel count, so shrinking the gate never
/// increases the loss. When `mix` carries a partner's weak prediction and
/// the cut recorded while mixing the strong inputs, the target is the two
/// weak maps spliced along the same cut.
pub fn consistency_loss_with_grad(
    p_w: &FeatureMaps,
    p_s1: &FeatureMaps,
    p_s2: Option<&FeatureMaps>,
    tau: f64,
    mix: Option<(&FeatureMaps, &MixMask)>,
) -> Result<(ConsistencyLossBreakdown, Array3<f64>, Option<Array3<f64>>)> {
    if !tau.is_finite() || tau < 0.0 {
        return Err(Error::InvalidArgument(format!("confidence threshold {tau} must be finite and >= 0")));
    }
    for s in [Some(p_s1), p_s2].into_iter().flatten() {
        if s.maps.dim() != p_w.maps.dim() {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", p_w.maps.dim()),
                got: format!("{:?}", s.maps.dim()),
            });
        }
    }
    let mixed;
    let weak: &Array3<f64> = match mix {
        Some((partner, mask)) => {
            mixed = mix_maps(&p_w.maps, &partner.maps, mask)?;
            &mixed
        }
        None => &p_w.maps,
    };
    let (_, h, wd) = weak.dim();
    let mut gate = Array2::from_elem((h, wd), false);
    let mut gated = 0usize;
    for r in 0..h {
        for c in 0..wd {
            if sigmoid(weak[[layout::TP_CENTER, r, c]]) >= tau {
                gate[[r, c]] = true;
                gated += 1;
            }
        }
    }
    let area = (h * wd) as f64;
    let mask_fraction = gated as f64 / area;

    let cls_norm = area * layout::CLASSIFICATION.len() as f64;
    let reg_norm = area * layout::REGRESSION.len() as f64;
    let mut classification = 0.0;
    let mut regression = 0.0;
    let mut grads = Vec::new();
    for s in [Some(p_s1), p_s2].into_iter().flatten() {
        let mut g = Array3::zeros(s.maps.dim());
        if gated > 0 {
            for ch in layout::CLASSIFICATION {
                for ((r, c), &on) in gate.indexed_iter() {
                    if !on {
                        continue;
                    }
                    let x = s.maps[[ch, r, c]];
                    let t = f64::from(sigmoid(weak[[ch, r, c]]) >= 0.5);
                    classification += (t * softplus(-x) + (1.0 - t) * softplus(x)) / cls_norm;
                    g[[ch, r, c]] += (sigmoid(x) - t) / cls_norm;
                }
            }
            for ch in layout::REGRESSION {
                for ((r, c), &on) in gate.indexed_iter() {
                    if !on {
                        continue;
                    }
                    let d = s.maps[[ch, r, c]] - weak[[ch, r, c]];
                    regression += d.abs() / reg_norm;
                    g[[ch, r, c]] += l1_sign(d) / reg_norm;
                }
            }
        }
        grads.push(g);
    }
    let total = classification + regression;
    let breakdown = ConsistencyLossBreakdown { classification, regression, mask_fraction, total };
    let mut it = grads.into_iter();
    let g1 = it.next().expect("at least one strong view");
    Ok((breakdown, g1, it.next()))
}
