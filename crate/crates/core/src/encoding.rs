//! Ground-truth map encoding and prediction decoding.
//!
//! The 16-channel layout at 1/4 input resolution is the contract shared by
//! the losses, the trainer, and inference. Only the first five channels
//! (center confidence plus four endpoint displacements) are needed to decode
//! segments; the rest provide auxiliary supervision.

use ndarray::{Array2, Array3, ArrayView2, Axis as NdAxis};

use crate::error::{Error, Result};
use crate::geometry::{rasterize, sol_split, to_tripoint, LineSegment, Point, SolParams};

/// Channel indices of the output map. Order is fixed: the inference set
/// `{tp_center, tp_disp}` occupies the first five channels.
pub mod layout {
    pub const TP_CENTER: usize = 0;
    pub const TP_DISP: [usize; 4] = [1, 2, 3, 4];
    pub const TP_LENGTH: usize = 5;
    pub const TP_DEGREE: usize = 6;
    pub const SOL_CENTER: usize = 7;
    pub const SOL_DISP: [usize; 4] = [8, 9, 10, 11];
    pub const SOL_LENGTH: usize = 12;
    pub const SOL_DEGREE: usize = 13;
    pub const SEG_LINE: usize = 14;
    pub const SEG_JUNCTION: usize = 15;
    pub const NUM_CHANNELS: usize = 16;

    /// Channels trained as binary maps.
    pub const CLASSIFICATION: [usize; 4] = [TP_CENTER, SOL_CENTER, SEG_LINE, SEG_JUNCTION];
    /// Channels trained as regressions.
    pub const REGRESSION: [usize; 12] = [1, 2, 3, 4, 5, 6, 8, 9, 10, 11, 12, 13];
    /// Channels consumed by [`super::decode_lines`].
    pub const INFERENCE: [usize; 5] = [0, 1, 2, 3, 4];
}

/// Raw 16-channel network output (pre-activation everywhere; binary channels
/// go through a sigmoid at the point of use).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMaps {
    pub maps: Array3<f64>,
}

impl FeatureMaps {
    pub fn new(maps: Array3<f64>) -> Result<Self> {
        let (c, _, _) = maps.dim();
        if c != layout::NUM_CHANNELS {
            return Err(Error::ShapeMismatch {
                expected: format!("{} channels", layout::NUM_CHANNELS),
                got: format!("{c} channels"),
            });
        }
        if maps.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite feature map values".into()));
        }
        Ok(FeatureMaps { maps })
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.maps.dim().1
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.maps.dim().2
    }

    #[inline]
    pub fn channel(&self, c: usize) -> ArrayView2<'_, f64> {
        self.maps.index_axis(NdAxis(0), c)
    }
}

/// Encoded supervision targets. Regression channels are only defined where
/// the corresponding mask is set and are zero elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthMaps {
    pub maps: Array3<f64>,
    /// Pixels carrying tri-point displacement/length/degree targets.
    pub regression_mask: Array2<bool>,
    /// Pixels carrying sub-segment displacement/length/degree targets.
    pub sol_regression_mask: Array2<bool>,
}

impl GroundTruthMaps {
    #[inline]
    pub fn height(&self) -> usize {
        self.maps.dim().1
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.maps.dim().2
    }

    #[inline]
    pub fn channel(&self, c: usize) -> ArrayView2<'_, f64> {
        self.maps.index_axis(NdAxis(0), c)
    }
}

/// Encoding knobs. `sol` is expressed in map units (the caller rescales from
/// input units when encoding at 1/4 resolution).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncodeParams {
    pub sol: SolParams,
    /// Smooth each binary center with a 3x3 Gaussian whose peak stays 1.
    /// Disabled, targets are exactly binary.
    pub center_gaussian: bool,
}

impl Default for EncodeParams {
    fn default() -> Self {
        EncodeParams { sol: SolParams { length: 8.0, overlap: 0.5 }, center_gaussian: true }
    }
}

/// 3x3 smoothing stamp, peak renormalized to 1, composed by element-wise max
/// so overlapping centers never exceed 1.
const CENTER_KERNEL: [[f64; 3]; 3] =
    [[0.25, 0.5, 0.25], [0.5, 1.0, 0.5], [0.25, 0.5, 0.25]];

/// Pixel holding a continuous point: floor, clamped into the map.
#[inline]
fn owner_pixel(p: Point, h: usize, w: usize) -> (usize, usize) {
    let c = (p.x.floor() as isize).clamp(0, w as isize - 1) as usize;
    let r = (p.y.floor() as isize).clamp(0, h as isize - 1) as usize;
    (r, c)
}

/// Encodes segments (already in map coordinates) into supervision targets.
///
/// Per segment: the midpoint's pixel gets center = 1, the four displacement
/// channels hold endpoint offsets from that pixel's lattice point, length is
/// normalized by the map diagonal, degree is the folded angle scaled to
/// [0, 1). Sub-segments from [`sol_split`] are encoded the same way into the
/// SoL block. When two centers land on one pixel the later segment wins the
/// regression targets. `seg_line` is the thickness-1 rasterization and
/// `seg_junction` marks endpoint pixels.
pub fn encode_ground_truth(
    lines: &[LineSegment],
    h: usize,
    w: usize,
    params: &EncodeParams,
) -> Result<GroundTruthMaps> {
    if h == 0 || w == 0 {
        return Err(Error::InvalidArgument(format!("empty map {w}x{h}")));
    }
    params.sol.validate()?;
    let (hf, wf) = (h as f64, w as f64);
    for (i, l) in lines.iter().enumerate() {
        for p in [l.start, l.end] {
            if !(0.0..=wf).contains(&p.x) || !(0.0..=hf).contains(&p.y) {
                return Err(Error::InvalidArgument(format!(
                    "line {i} ({}, {})-({}, {}) outside {w}x{h} map",
                    l.start.x, l.start.y, l.end.x, l.end.y
                )));
            }
        }
        if l.length() == 0.0 {
            return Err(Error::DegenerateSegment(format!(
                "line {i} has zero length at ({}, {})",
                l.start.x, l.start.y
            )));
        }
    }

    let mut maps = Array3::zeros((layout::NUM_CHANNELS, h, w));
    let mut regression_mask = Array2::from_elem((h, w), false);
    let mut sol_regression_mask = Array2::from_elem((h, w), false);
    let diag = wf.hypot(hf);

    let encode_block = |seg: &LineSegment,
                            maps: &mut Array3<f64>,
                            mask: &mut Array2<bool>,
                            center_ch: usize,
                            disp_ch: [usize; 4],
                            length_ch: usize,
                            degree_ch: usize| {
        let tp = to_tripoint(seg).expect("validated non-degenerate");
        let (r, c) = owner_pixel(tp.center, h, w);
        let anchor = Point::new(c as f64, r as f64);
        maps[[center_ch, r, c]] = 1.0;
        let ds = seg.start - anchor;
        let de = seg.end - anchor;
        maps[[disp_ch[0], r, c]] = ds.x;
        maps[[disp_ch[1], r, c]] = ds.y;
        maps[[disp_ch[2], r, c]] = de.x;
        maps[[disp_ch[3], r, c]] = de.y;
        maps[[length_ch, r, c]] = seg.length() / diag;
        maps[[degree_ch, r, c]] = seg.angle() / std::f64::consts::PI;
        mask[[r, c]] = true;
        (r, c)
    };

    let mut tp_centers = Vec::new();
    let mut sol_centers = Vec::new();
    for line in lines {
        tp_centers.push(encode_block(
            line,
            &mut maps,
            &mut regression_mask,
            layout::TP_CENTER,
            layout::TP_DISP,
            layout::TP_LENGTH,
            layout::TP_DEGREE,
        ));
        for tp in sol_split(line, &params.sol)?.segments {
            let (s, e) = tp.endpoints();
            let sub = LineSegment::new(s, e)?;
            sol_centers.push(encode_block(
                &sub,
                &mut maps,
                &mut sol_regression_mask,
                layout::SOL_CENTER,
                layout::SOL_DISP,
                layout::SOL_LENGTH,
                layout::SOL_DEGREE,
            ));
        }
        for p in [line.start, line.end] {
            let (r, c) = owner_pixel(p, h, w);
            maps[[layout::SEG_JUNCTION, r, c]] = 1.0;
        }
    }

    if params.center_gaussian {
        smooth_centers(&mut maps, layout::TP_CENTER, &tp_centers);
        smooth_centers(&mut maps, layout::SOL_CENTER, &sol_centers);
    }

    let line_mask = rasterize(lines, h, w, 1.0);
    for r in 0..h {
        for c in 0..w {
            if line_mask[[r, c]] {
                maps[[layout::SEG_LINE, r, c]] = 1.0;
            }
        }
    }

    Ok(GroundTruthMaps { maps, regression_mask, sol_regression_mask })
}

fn smooth_centers(maps: &mut Array3<f64>, ch: usize, centers: &[(usize, usize)]) {
    let (_, h, w) = maps.dim();
    for &(r, c) in centers {
        for (dr, row) in CENTER_KERNEL.iter().enumerate() {
            for (dc, &k) in row.iter().enumerate() {
                let rr = r as isize + dr as isize - 1;
                let cc = c as isize + dc as isize - 1;
                if rr >= 0 && rr < h as isize && cc >= 0 && cc < w as isize {
                    let cell = &mut maps[[ch, rr as usize, cc as usize]];
                    *cell = cell.max(k);
                }
            }
        }
    }
}

/// Decoding knobs, in map units.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeParams {
    /// Minimum center activation (post-sigmoid) to keep a peak.
    pub score_threshold: f64,
    /// Maximum number of detections, highest scores first.
    pub topk: usize,
    /// Decoded segments shorter than this are dropped.
    pub min_length: f64,
}

impl Default for DecodeParams {
    fn default() -> Self {
        DecodeParams { score_threshold: 0.25, topk: 128, min_length: 2.0 }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Decodes the tri-point block: 3x3 local maxima of the sigmoid-activated
/// center channel become segment centers, endpoints are the lattice point
/// plus the displacement vectors, score is the center activation. Output is
/// sorted by descending score (ties in row-major scan order) and truncated
/// to `topk`.
pub fn decode_lines(maps: &FeatureMaps, params: &DecodeParams) -> Vec<LineSegment> {
    decode_lines_channels(maps, layout::TP_CENTER, layout::TP_DISP, params)
}

/// [`decode_lines`] generalized over the channel block, so the sub-segment
/// block decodes through the same code path.
pub fn decode_lines_channels(
    maps: &FeatureMaps,
    center_ch: usize,
    disp_ch: [usize; 4],
    params: &DecodeParams,
) -> Vec<LineSegment> {
    decode_peaks_channels(maps, center_ch, disp_ch, params)
        .into_iter()
        .map(|p| p.seg)
        .collect()
}

/// A decoded detection together with the lattice peak it came from, so loss
/// code can route gradients back to the source pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct DecodedPeak {
    pub r: usize,
    pub c: usize,
    pub seg: LineSegment,
}

pub(crate) fn decode_peaks_channels(
    maps: &FeatureMaps,
    center_ch: usize,
    disp_ch: [usize; 4],
    params: &DecodeParams,
) -> Vec<DecodedPeak> {
    let peaks = local_peaks(&maps.channel(center_ch), params.score_threshold);
    let mut out = Vec::with_capacity(peaks.len());
    for (r, c, score) in peaks {
        let anchor = Point::new(c as f64, r as f64);
        let s = anchor + Point::new(maps.maps[[disp_ch[0], r, c]], maps.maps[[disp_ch[1], r, c]]);
        let e = anchor + Point::new(maps.maps[[disp_ch[2], r, c]], maps.maps[[disp_ch[3], r, c]]);
        let Ok(seg) = LineSegment::new(s, e) else { continue };
        if seg.length() < params.min_length || seg.length() == 0.0 {
            continue;
        }
        let seg = seg.with_score(score).expect("sigmoid output in (0, 1)");
        out.push(DecodedPeak { r, c, seg });
    }
    // Stable by construction: scan order breaks score ties.
    out.sort_by(|a, b| b.seg.score.partial_cmp(&a.seg.score).expect("finite scores"));
    out.truncate(params.topk);
    out
}

/// Row-major 3x3 local maxima of `sigmoid(map)` with activation >= threshold.
/// On plateaus only the first pixel in scan order counts as the peak.
fn local_peaks(map: &ArrayView2<'_, f64>, score_threshold: f64) -> Vec<(usize, usize, f64)> {
    let (h, w) = map.dim();
    let mut peaks = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let v = map[[r, c]];
            let mut is_peak = true;
            'nbr: for dr in -1isize..=1 {
                for dc in -1isize..=1 {
                    if dr == 0 && dc == 0 {
                        continue;
                    }
                    let (rr, cc) = (r as isize + dr, c as isize + dc);
                    if rr < 0 || rr >= h as isize || cc < 0 || cc >= w as isize {
                        continue;
                    }
                    let n = map[[rr as usize, cc as usize]];
                    let later = (rr, cc) > (r as isize, c as isize);
                    if n > v || (n == v && !later) {
                        is_peak = false;
                        break 'nbr;
                    }
                }
            }
            if is_peak {
                let score = sigmoid(v);
                if score >= score_threshold {
                    peaks.push((r, c, score));
                }
            }
        }
    }
    peaks
}

/// One matched prediction/ground-truth pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineMatch {
    pub pred: usize,
    pub gt: usize,
    /// Structural distance that ranked this pair.
    pub dist: f64,
    /// True when the minimizing orientation pairs pred.start with gt.end.
    pub swapped: bool,
}

/// Structural distance between two segments: the smaller, over both endpoint
/// orderings, of the summed Euclidean endpoint distances. Returns the
/// distance and whether the swapped ordering won.
pub fn structural_distance(a: &LineSegment, b: &LineSegment) -> (f64, bool) {
    let direct = a.start.dist(b.start) + a.end.dist(b.end);
    let swapped = a.start.dist(b.end) + a.end.dist(b.start);
    if swapped < direct {
        (swapped, true)
    } else {
        (direct, false)
    }
}

/// Greedy one-to-one matching in increasing structural distance; pairs
/// farther than `max_dist` are never matched. Ties break on (pred, gt)
/// index so the result is deterministic.
pub fn match_lines(pred: &[LineSegment], gt: &[LineSegment], max_dist: f64) -> Vec<LineMatch> {
    let mut candidates = Vec::new();
    for (i, p) in pred.iter().enumerate() {
        for (j, g) in gt.iter().enumerate() {
            let (d, swapped) = structural_distance(p, g);
            if d <= max_dist {
                candidates.push(LineMatch { pred: i, gt: j, dist: d, swapped });
            }
        }
    }
    candidates.sort_by(|a, b| {
        a.dist
            .partial_cmp(&b.dist)
            .expect("finite distances")
            .then(a.pred.cmp(&b.pred))
            .then(a.gt.cmp(&b.gt))
    });
    let mut pred_used = vec![false; pred.len()];
    let mut gt_used = vec![false; gt.len()];
    let mut matches = Vec::new();
    for m in candidates {
        if !pred_used[m.pred] && !gt_used[m.gt] {
            pred_used[m.pred] = true;
            gt_used[m.gt] = true;
            matches.push(m);
        }
    }
    matches
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::SolParams;
    use crate::oracle::pre_activation_from_ground_truth;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seg(x1: f64, y1: f64, x2: f64, y2: f64) -> LineSegment {
        LineSegment::new(Point::new(x1, y1), Point::new(x2, y2)).unwrap()
    }

    fn params_no_smooth() -> EncodeParams {
        EncodeParams { center_gaussian: false, ..EncodeParams::default() }
    }

    #[test]
    fn layout_contract() {
        assert_eq!(layout::NUM_CHANNELS, 16);
        assert_eq!(layout::INFERENCE, [layout::TP_CENTER, 1, 2, 3, 4]);
        assert_eq!(layout::TP_DISP, [1, 2, 3, 4]);
        let mut all: Vec<usize> = layout::CLASSIFICATION
            .iter()
            .chain(layout::REGRESSION.iter())
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..16).collect::<Vec<_>>());
    }

    #[test]
    fn encode_empty_is_all_zero() {
        let gt = encode_ground_truth(&[], 32, 32, &EncodeParams::default()).unwrap();
        assert!(gt.maps.iter().all(|&v| v == 0.0));
        assert!(!gt.regression_mask.iter().any(|&m| m));
        assert!(!gt.sol_regression_mask.iter().any(|&m| m));
    }

    #[test]
    fn encode_single_horizontal_segment() {
        let gt = encode_ground_truth(&[seg(8.0, 8.0, 24.0, 8.0)], 32, 32, &params_no_smooth())
            .unwrap();
        assert_eq!(gt.maps[[layout::TP_CENTER, 8, 16]], 1.0);
        assert_eq!(gt.maps[[layout::TP_DISP[0], 8, 16]], -8.0);
        assert_eq!(gt.maps[[layout::TP_DISP[1], 8, 16]], 0.0);
        assert_eq!(gt.maps[[layout::TP_DISP[2], 8, 16]], 8.0);
        assert_eq!(gt.maps[[layout::TP_DISP[3], 8, 16]], 0.0);
        assert_abs_diff_eq!(
            gt.maps[[layout::TP_LENGTH, 8, 16]],
            16.0 / (32.0 * 2.0f64.sqrt()),
            epsilon = 1e-12
        );
        assert_eq!(gt.maps[[layout::TP_DEGREE, 8, 16]], 0.0);
        assert!(gt.regression_mask[[8, 16]]);
        assert_eq!(gt.regression_mask.iter().filter(|&&m| m).count(), 1);
    }

    #[test]
    fn encode_smoothing_keeps_peak_at_one() {
        let gt = encode_ground_truth(&[seg(8.0, 8.0, 24.0, 8.0)], 32, 32, &EncodeParams::default())
            .unwrap();
        assert_eq!(gt.maps[[layout::TP_CENTER, 8, 16]], 1.0);
        assert_eq!(gt.maps[[layout::TP_CENTER, 8, 17]], 0.5);
        assert_eq!(gt.maps[[layout::TP_CENTER, 7, 15]], 0.25);
    }

    #[test]
    fn encode_degree_channel_range() {
        let gt = encode_ground_truth(&[seg(5.0, 5.0, 5.0, 25.0)], 32, 32, &params_no_smooth())
            .unwrap();
        // Vertical segment: folded angle pi/2, scaled to 0.5.
        assert_abs_diff_eq!(gt.maps[[layout::TP_DEGREE, 15, 5]], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn encode_crossing_segments_junctions_and_line_union() {
        let a = seg(4.0, 16.0, 28.0, 16.0);
        let b = seg(16.0, 4.0, 16.0, 28.0);
        let gt = encode_ground_truth(&[a, b], 32, 32, &EncodeParams::default()).unwrap();
        let junctions: Vec<_> = (0..32)
            .flat_map(|r| (0..32).map(move |c| (r, c)))
            .filter(|&(r, c)| gt.maps[[layout::SEG_JUNCTION, r, c]] == 1.0)
            .collect();
        assert_eq!(junctions, vec![(4, 16), (16, 4), (16, 28), (28, 16)]);
        let union = rasterize(&[a, b], 32, 32, 1.0);
        for r in 0..32 {
            for c in 0..32 {
                assert_eq!(gt.maps[[layout::SEG_LINE, r, c]] == 1.0, union[[r, c]]);
            }
        }
    }

    #[test]
    fn encode_regression_zero_off_mask() {
        let gt = encode_ground_truth(
            &[seg(3.0, 3.0, 20.0, 25.0), seg(25.0, 4.0, 6.0, 28.0)],
            32,
            32,
            &EncodeParams::default(),
        )
        .unwrap();
        for ch in [layout::TP_DISP[0], layout::TP_DISP[3], layout::TP_LENGTH, layout::TP_DEGREE] {
            for r in 0..32 {
                for c in 0..32 {
                    if !gt.regression_mask[[r, c]] {
                        assert_eq!(gt.maps[[ch, r, c]], 0.0);
                    }
                }
            }
        }
        for ch in [layout::SOL_DISP[1], layout::SOL_LENGTH, layout::SOL_DEGREE] {
            for r in 0..32 {
                for c in 0..32 {
                    if !gt.sol_regression_mask[[r, c]] {
                        assert_eq!(gt.maps[[ch, r, c]], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn encode_rejects_out_of_bounds_line() {
        let err = encode_ground_truth(&[seg(0.0, 0.0, 40.0, 8.0)], 32, 32, &EncodeParams::default())
            .unwrap_err();
        assert!(err.to_string().contains("line 0"), "error should name the line: {err}");
    }

    #[test]
    fn decode_all_zero_maps_is_empty() {
        let maps = FeatureMaps::new(Array3::zeros((16, 32, 32))).unwrap();
        assert!(decode_lines(&maps, &DecodeParams::default()).is_empty());
    }

    #[test]
    fn decode_tie_on_identical_maxima_takes_scan_order() {
        let mut raw = Array3::zeros((16, 16, 16));
        for (r, c) in [(4usize, 4usize), (10, 10)] {
            raw[[layout::TP_CENTER, r, c]] = 3.0;
            raw[[layout::TP_DISP[0], r, c]] = -3.0;
            raw[[layout::TP_DISP[2], r, c]] = 3.0;
        }
        let maps = FeatureMaps::new(raw).unwrap();
        let got = decode_lines(
            &maps,
            &DecodeParams { score_threshold: 0.5, topk: 1, min_length: 2.0 },
        );
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].midpoint(), Point::new(4.0, 4.0));
    }

    #[test]
    fn decode_scores_non_increasing_and_topk_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut raw = Array3::zeros((16, 24, 24));
        for _ in 0..40 {
            let r = rng.random_range(0..24);
            let c = rng.random_range(0..24);
            raw[[layout::TP_CENTER, r, c]] = rng.random_range(-2.0..4.0);
            raw[[layout::TP_DISP[0], r, c]] = rng.random_range(-4.0..-1.5);
            raw[[layout::TP_DISP[2], r, c]] = rng.random_range(1.5..4.0);
        }
        let maps = FeatureMaps::new(raw).unwrap();
        let got = decode_lines(
            &maps,
            &DecodeParams { score_threshold: 0.3, topk: 7, min_length: 1.0 },
        );
        assert!(got.len() <= 7);
        for pair in got.windows(2) {
            assert!(pair[0].score.unwrap() >= pair[1].score.unwrap());
        }
    }

    /// Random well-separated segments, encode then decode: every ground truth
    /// is recovered within a map pixel.
    #[test]
    fn codec_roundtrip_recall_and_accuracy() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = EncodeParams { sol: SolParams { length: 8.0, overlap: 0.5 }, ..Default::default() };
        for _ in 0..20 {
            let lines = random_separated_lines(&mut rng, 8, 32, 3.0);
            let gt = encode_ground_truth(&lines, 32, 32, &params).unwrap();
            let maps = pre_activation_from_ground_truth(&gt);
            let decoded = decode_lines(
                &maps,
                &DecodeParams { score_threshold: 0.5, topk: 64, min_length: 1.0 },
            );
            for l in &lines {
                let best = decoded
                    .iter()
                    .map(|d| structural_distance(d, l).0)
                    .fold(f64::INFINITY, f64::min);
                assert!(
                    best <= 2.0,
                    "missed segment ({}, {})-({}, {}): nearest sum-distance {best}",
                    l.start.x,
                    l.start.y,
                    l.end.x,
                    l.end.y
                );
            }
        }
    }

    pub(crate) fn random_separated_lines(
        rng: &mut ChaCha8Rng,
        max_n: usize,
        size: usize,
        min_sep: f64,
    ) -> Vec<LineSegment> {
        let n = rng.random_range(1..=max_n);
        let s = size as f64;
        let mut lines: Vec<LineSegment> = Vec::new();
        let mut centers: Vec<Point> = Vec::new();
        let mut tries = 0;
        while lines.len() < n && tries < 2000 {
            tries += 1;
            let cx = rng.random_range(4.0..s - 4.0);
            let cy = rng.random_range(4.0..s - 4.0);
            let ang = rng.random_range(0.0..std::f64::consts::PI);
            let half = rng.random_range(2.0..s / 4.0);
            let d = Point::new(ang.cos() * half, ang.sin() * half);
            let c = Point::new(cx, cy);
            let (a, b) = (c - d, c + d);
            let inside = |p: Point| p.x >= 0.0 && p.x <= s && p.y >= 0.0 && p.y <= s;
            if !inside(a) || !inside(b) {
                continue;
            }
            if centers.iter().any(|&e| e.dist(c) < min_sep) {
                continue;
            }
            centers.push(c);
            lines.push(LineSegment::new(a, b).unwrap());
        }
        lines
    }

    #[test]
    fn match_identical_sets_is_perfect() {
        let lines = vec![seg(0.0, 0.0, 5.0, 5.0), seg(10.0, 0.0, 15.0, 2.0)];
        let m = match_lines(&lines, &lines, 5.0);
        assert_eq!(m.len(), 2);
        assert!(m.iter().all(|x| x.dist == 0.0));
    }

    #[test]
    fn match_far_sets_is_empty() {
        let a = vec![seg(0.0, 0.0, 5.0, 0.0)];
        let b = vec![seg(100.0, 100.0, 105.0, 100.0)];
        assert!(match_lines(&a, &b, 5.0).is_empty());
    }

    #[test]
    fn match_symmetric_under_endpoint_swap() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let gt = random_separated_lines(&mut rng, 5, 32, 4.0);
            let pred: Vec<LineSegment> = gt
                .iter()
                .map(|l| {
                    let jit = Point::new(rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4));
                    let s = LineSegment::new(l.start + jit, l.end).unwrap();
                    if rng.random_bool(0.5) {
                        s.reversed()
                    } else {
                        s
                    }
                })
                .collect();
            let m1 = match_lines(&pred, &gt, 5.0);
            let swapped: Vec<LineSegment> = pred.iter().map(|l| l.reversed()).collect();
            let m2 = match_lines(&swapped, &gt, 5.0);
            assert_eq!(m1.len(), m2.len());
            for (a, b) in m1.iter().zip(&m2) {
                assert_eq!((a.pred, a.gt), (b.pred, b.gt));
                assert_abs_diff_eq!(a.dist, b.dist, epsilon = 1e-12);
            }
        }
    }

    /// Exhaustive assignment oracle: all one-to-one mappings of preds onto
    /// gts, minimizing total structural distance over pairs within range.
    fn brute_force_best(pred: &[LineSegment], gt: &[LineSegment], max_dist: f64) -> (usize, f64) {
        fn rec(
            pred: &[LineSegment],
            gt: &[LineSegment],
            max_dist: f64,
            i: usize,
            used: &mut Vec<bool>,
            cur: (usize, f64),
            best: &mut (usize, f64),
        ) {
            if i == pred.len() {
                if cur.0 > best.0 || (cur.0 == best.0 && cur.1 < best.1) {
                    *best = cur;
                }
                return;
            }
            rec(pred, gt, max_dist, i + 1, used, cur, best);
            for j in 0..gt.len() {
                if !used[j] {
                    let (d, _) = structural_distance(&pred[i], &gt[j]);
                    if d <= max_dist {
                        used[j] = true;
                        rec(pred, gt, max_dist, i + 1, used, (cur.0 + 1, cur.1 + d), best);
                        used[j] = false;
                    }
                }
            }
        }
        let mut best = (0, f64::INFINITY);
        rec(pred, gt, max_dist, 0, &mut vec![false; gt.len()], (0, 0.0), &mut best);
        if best.0 == 0 {
            (0, 0.0)
        } else {
            best
        }
    }

    #[test]
    fn match_agrees_with_exhaustive_oracle_on_separated_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..30 {
            let gt = random_separated_lines(&mut rng, 5, 32, 6.0);
            let mut pred: Vec<LineSegment> = gt
                .iter()
                .map(|l| {
                    let jit = Point::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
                    LineSegment::new(l.start + jit, l.end + jit).unwrap()
                })
                .collect();
            let last = pred.len() - 1;
            pred.swap(0, last);
            let greedy = match_lines(&pred, &gt, 5.0);
            let (n_best, cost_best) = brute_force_best(&pred, &gt, 5.0);
            assert_eq!(greedy.len(), n_best);
            let cost_greedy: f64 = greedy.iter().map(|m| m.dist).sum();
            assert_abs_diff_eq!(cost_greedy, cost_best, epsilon = 1e-9);
        }
    }
}
