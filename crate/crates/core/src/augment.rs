//! Augmentation for both training streams.
//!
//! Labeled samples get exact-label geometric perturbations (flip, right-angle
//! rotation) plus photometric shifts. Unlabeled samples are expanded into a
//! weak view (flip + random resized crop) and two strong views that add
//! photometric-only noise on top of the weak image, so predictions on all
//! three are spatially comparable pixel for pixel. Batches of strong views
//! can additionally be mixed across samples along a single axis cut, with the
//! cut recorded so prediction maps mix identically at map scale.

use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{apply_transform, Axis, GeomTransform, LineSegment, MIN_CLIPPED_LEN};

/// Labeled-stream augmentation. A delta of exactly 0 disables that shift
/// without consuming randomness, so zeroed params give the identity
/// photometric path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabeledAugmentParams {
    pub p_hflip: f64,
    /// Draw a rotation count k uniformly from {0, 1, 2, 3}.
    pub rot90: bool,
    /// Hue shift bound, as a fraction of the full hue circle.
    pub hue_delta: f64,
    pub saturation_delta: f64,
    pub value_delta: f64,
    pub brightness_delta: f64,
}

impl Default for LabeledAugmentParams {
    fn default() -> Self {
        LabeledAugmentParams {
            p_hflip: 0.5,
            rot90: true,
            hue_delta: 0.05,
            saturation_delta: 0.2,
            value_delta: 0.2,
            brightness_delta: 0.1,
        }
    }
}

/// Weak perturbation: flip plus random resized crop. `crop_scale` bounds the
/// retained area fraction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeakParams {
    pub p_flip: f64,
    pub crop_scale_min: f64,
    pub crop_scale_max: f64,
}

impl Default for WeakParams {
    fn default() -> Self {
        WeakParams { p_flip: 0.5, crop_scale_min: 0.8, crop_scale_max: 1.0 }
    }
}

/// Strong perturbation: color jitter, grayscale, Gaussian blur. All
/// photometric, so strong views stay pixel-aligned with the weak view.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrongParams {
    pub p_color_jitter: f64,
    pub jitter_brightness: f64,
    pub jitter_contrast: f64,
    pub jitter_saturation: f64,
    pub jitter_hue: f64,
    pub p_grayscale: f64,
    pub p_blur: f64,
    pub blur_sigma_min: f64,
    pub blur_sigma_max: f64,
}

impl Default for StrongParams {
    fn default() -> Self {
        StrongParams {
            p_color_jitter: 0.8,
            jitter_brightness: 0.5,
            jitter_contrast: 0.5,
            jitter_saturation: 0.5,
            jitter_hue: 0.25,
            p_grayscale: 0.2,
            p_blur: 0.5,
            blur_sigma_min: 0.1,
            blur_sigma_max: 2.0,
        }
    }
}

/// All augmentation knobs, as they appear in the run config.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub labeled: LabeledAugmentParams,
    pub weak: WeakParams,
    pub strong: StrongParams,
}

/// One unlabeled sample expanded into its three training views.
#[derive(Debug, Clone)]
pub struct UnlabeledTriple {
    pub weak: Array3<f64>,
    pub strong1: Array3<f64>,
    pub strong2: Array3<f64>,
    /// Geometric perturbations shared by all three views, in application
    /// order.
    pub geom: Vec<GeomTransform>,
}

/// Flip/rotate plus photometric shifts, with lines mapped exactly through
/// the geometric part. Deterministic given the rng state.
pub fn labeled_augment(
    image: &Array3<f64>,
    lines: &[LineSegment],
    params: &LabeledAugmentParams,
    rng: &mut impl Rng,
) -> Result<(Array3<f64>, Vec<LineSegment>)> {
    let flip = rng.random_bool(params.p_hflip.clamp(0.0, 1.0));
    let k: u8 = if params.rot90 { rng.random_range(0..4) } else { 0 };
    let dh = draw_shift(rng, params.hue_delta);
    let ds = draw_shift(rng, params.saturation_delta);
    let dv = draw_shift(rng, params.value_delta);
    let db = draw_shift(rng, params.brightness_delta);

    let mut img = image.clone();
    let mut out_lines = lines.to_vec();
    let (_, h, w) = img.dim();
    if flip {
        let t = GeomTransform::HFlip { width: w as f64 };
        (img, out_lines) = apply_transform(&t, &img, &out_lines, MIN_CLIPPED_LEN)?;
    }
    if k != 0 {
        let (_, h2, w2) = img.dim();
        let t = GeomTransform::Rot90 { k, width: w2 as f64, height: h2 as f64 };
        (img, out_lines) = apply_transform(&t, &img, &out_lines, MIN_CLIPPED_LEN)?;
    }
    let _ = h;
    if dh != 0.0 || ds != 0.0 || dv != 0.0 {
        hsv_shift(&mut img, dh, ds, dv);
    }
    if db != 0.0 {
        img.mapv_inplace(|v| (v + db).clamp(0.0, 1.0));
    }
    Ok((img, out_lines))
}

fn draw_shift(rng: &mut impl Rng, delta: f64) -> f64 {
    if delta == 0.0 {
        0.0
    } else {
        rng.random_range(-delta..=delta)
    }
}

/// Builds the weak view and two independently strong-perturbed copies of it.
pub fn make_unlabeled_triple(
    image: &Array3<f64>,
    weak_params: &WeakParams,
    strong_params: &StrongParams,
    rng: &mut impl Rng,
) -> Result<UnlabeledTriple> {
    let (_, h, w) = image.dim();
    let mut geom = Vec::new();
    let mut weak = image.clone();

    if rng.random_bool(weak_params.p_flip.clamp(0.0, 1.0)) {
        let t = GeomTransform::HFlip { width: w as f64 };
        (weak, _) = apply_transform(&t, &weak, &[], MIN_CLIPPED_LEN)?;
        geom.push(t);
    }
    let scale = rng.random_range(weak_params.crop_scale_min..=weak_params.crop_scale_max);
    let side_frac = scale.sqrt();
    let cw = ((w as f64 * side_frac).round() as usize).clamp(1, w);
    let chh = ((h as f64 * side_frac).round() as usize).clamp(1, h);
    let x0 = rng.random_range(0..=(w - cw)) as f64;
    let y0 = rng.random_range(0..=(h - chh)) as f64;
    if cw != w || chh != h {
        let t = GeomTransform::CropResize {
            window: [x0, y0, x0 + cw as f64, y0 + chh as f64],
            dst: (w as f64, h as f64),
        };
        (weak, _) = apply_transform(&t, &weak, &[], MIN_CLIPPED_LEN)?;
        geom.push(t);
    }

    let strong1 = strong_view(&weak, strong_params, rng);
    let strong2 = strong_view(&weak, strong_params, rng);
    Ok(UnlabeledTriple { weak, strong1, strong2, geom })
}

/// One strong view: color jitter (brightness, contrast, saturation, hue, in
/// that fixed order), then grayscale, then Gaussian blur, each drawn
/// independently.
fn strong_view(weak: &Array3<f64>, params: &StrongParams, rng: &mut impl Rng) -> Array3<f64> {
    let mut img = weak.clone();
    if rng.random_bool(params.p_color_jitter.clamp(0.0, 1.0)) {
        let fb = draw_factor(rng, params.jitter_brightness);
        let fc = draw_factor(rng, params.jitter_contrast);
        let fs = draw_factor(rng, params.jitter_saturation);
        let dh = draw_shift(rng, params.jitter_hue);
        if fb != 1.0 {
            img.mapv_inplace(|v| (v * fb).clamp(0.0, 1.0));
        }
        if fc != 1.0 {
            adjust_contrast(&mut img, fc);
        }
        if fs != 1.0 {
            adjust_saturation(&mut img, fs);
        }
        if dh != 0.0 {
            hsv_shift(&mut img, dh, 0.0, 0.0);
        }
    }
    if rng.random_bool(params.p_grayscale.clamp(0.0, 1.0)) {
        to_grayscale(&mut img);
    }
    if rng.random_bool(params.p_blur.clamp(0.0, 1.0)) {
        let sigma = rng.random_range(params.blur_sigma_min..=params.blur_sigma_max);
        gaussian_blur(&mut img, sigma);
    }
    img
}

fn draw_factor(rng: &mut impl Rng, delta: f64) -> f64 {
    if delta == 0.0 {
        1.0
    } else {
        rng.random_range((1.0 - delta).max(0.0)..=(1.0 + delta))
    }
}

#[inline]
fn luma(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn adjust_contrast(img: &mut Array3<f64>, factor: f64) {
    let (c, h, w) = img.dim();
    debug_assert_eq!(c, 3);
    let mut mean = 0.0;
    for r in 0..h {
        for x in 0..w {
            mean += luma(img[[0, r, x]], img[[1, r, x]], img[[2, r, x]]);
        }
    }
    mean /= (h * w) as f64;
    img.mapv_inplace(|v| (factor * v + (1.0 - factor) * mean).clamp(0.0, 1.0));
}

fn adjust_saturation(img: &mut Array3<f64>, factor: f64) {
    let (_, h, w) = img.dim();
    for r in 0..h {
        for x in 0..w {
            let l = luma(img[[0, r, x]], img[[1, r, x]], img[[2, r, x]]);
            for ch in 0..3 {
                let v = img[[ch, r, x]];
                img[[ch, r, x]] = (factor * v + (1.0 - factor) * l).clamp(0.0, 1.0);
            }
        }
    }
}

fn to_grayscale(img: &mut Array3<f64>) {
    let (_, h, w) = img.dim();
    for r in 0..h {
        for x in 0..w {
            let l = luma(img[[0, r, x]], img[[1, r, x]], img[[2, r, x]]);
            for ch in 0..3 {
                img[[ch, r, x]] = l;
            }
        }
    }
}

fn hsv_shift(img: &mut Array3<f64>, dh: f64, ds: f64, dv: f64) {
    let (_, h, w) = img.dim();
    for r in 0..h {
        for x in 0..w {
            let (hh, ss, vv) =
                rgb_to_hsv(img[[0, r, x]], img[[1, r, x]], img[[2, r, x]]);
            let (rr, gg, bb) = hsv_to_rgb(
                (hh + dh).rem_euclid(1.0),
                (ss + ds).clamp(0.0, 1.0),
                (vv + dv).clamp(0.0, 1.0),
            );
            img[[0, r, x]] = rr;
            img[[1, r, x]] = gg;
            img[[2, r, x]] = bb;
        }
    }
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let v = max;
    let s = if max == 0.0 { 0.0 } else { d / max };
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        (((g - b) / d).rem_euclid(6.0)) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    (h, s, v)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = (h6.floor() as usize) % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// In-place separable Gaussian blur with replicated borders.
fn gaussian_blur(img: &mut Array3<f64>, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let radius = ((2.5 * sigma).ceil() as usize).max(1);
    let mut kernel = Vec::with_capacity(2 * radius + 1);
    let denom = 2.0 * sigma * sigma;
    for i in -(radius as isize)..=(radius as isize) {
        kernel.push((-((i * i) as f64) / denom).exp());
    }
    let sum: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= sum;
    }
    let (c, h, w) = img.dim();
    let mut tmp = Array3::zeros((c, h, w));
    for ch in 0..c {
        for r in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, k) in kernel.iter().enumerate() {
                    let xi = (x as isize + ki as isize - radius as isize).clamp(0, w as isize - 1);
                    acc += k * img[[ch, r, xi as usize]];
                }
                tmp[[ch, r, x]] = acc;
            }
        }
    }
    for ch in 0..c {
        for r in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, k) in kernel.iter().enumerate() {
                    let ri = (r as isize + ki as isize - radius as isize).clamp(0, h as isize - 1);
                    acc += k * tmp[[ch, ri as usize, x]];
                }
                img[[ch, r, x]] = acc;
            }
        }
    }
}

/// Which mixing strategy the trainer applies to strong views.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CutMixMode {
    Off,
    #[default]
    Axis,
    Square,
}

/// A recorded cut, stored at both image and map granularity so images and
/// prediction maps mix along exactly the same boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixMask {
    /// Self pixels strictly before `cut` along the axis, partner pixels from
    /// `cut` on. `map_cut * downsample == cut`.
    Cut { axis: Axis, cut: usize, map_cut: usize },
    /// Partner pixels inside the half-open box, self pixels outside
    /// (original-style CutMix, kept for ablation).
    Rect { rect: [usize; 4], map_rect: [usize; 4] },
}

impl MixMask {
    #[inline]
    fn from_partner_image(&self, r: usize, c: usize) -> bool {
        match *self {
            MixMask::Cut { axis: Axis::X, cut, .. } => c >= cut,
            MixMask::Cut { axis: Axis::Y, cut, .. } => r >= cut,
            MixMask::Rect { rect: [x0, y0, x1, y1], .. } => c >= x0 && c < x1 && r >= y0 && r < y1,
        }
    }

    #[inline]
    fn from_partner_map(&self, r: usize, c: usize) -> bool {
        match *self {
            MixMask::Cut { axis: Axis::X, map_cut, .. } => c >= map_cut,
            MixMask::Cut { axis: Axis::Y, map_cut, .. } => r >= map_cut,
            MixMask::Rect { map_rect: [x0, y0, x1, y1], .. } => {
                c >= x0 && c < x1 && r >= y0 && r < y1
            }
        }
    }
}

/// Pairs sample i with i+1 cyclically and splices both strong views of each
/// pair along one axis: an axis drawn with probability 1/2 each, the cut
/// uniform over the map-grid positions inside [0.25, 0.75] of the extent.
/// Returns the mixed strong view pairs and the per-sample masks. Fewer than
/// two samples: views pass through unmixed with no masks.
pub fn cutmix_axis(
    triples: &[UnlabeledTriple],
    downsample: usize,
    rng: &mut impl Rng,
) -> Result<(Vec<(Array3<f64>, Array3<f64>)>, Vec<MixMask>)> {
    let masks = draw_axis_masks(triples, downsample, rng)?;
    apply_masks(triples, &masks)
}

fn draw_axis_masks(
    triples: &[UnlabeledTriple],
    downsample: usize,
    rng: &mut impl Rng,
) -> Result<Vec<MixMask>> {
    if triples.len() < 2 {
        return Ok(Vec::new());
    }
    let (_, h, w) = triples[0].weak.dim();
    check_map_grid(h, w, downsample)?;
    let mut masks = Vec::with_capacity(triples.len());
    for _ in 0..triples.len() {
        let axis = if rng.random_bool(0.5) { Axis::X } else { Axis::Y };
        let extent_m = (if axis == Axis::X { w } else { h }) / downsample;
        let lo = ((0.25 * extent_m as f64).ceil() as usize).max(1);
        let hi = ((0.75 * extent_m as f64).floor() as usize).min(extent_m - 1);
        let map_cut = rng.random_range(lo..=hi.max(lo));
        masks.push(MixMask::Cut { axis, cut: map_cut * downsample, map_cut });
    }
    Ok(masks)
}

/// Original-style square CutMix for the ablation: a partner patch covering a
/// uniform [0.25, 0.5] area fraction is pasted into each sample, aligned to
/// the map grid.
pub fn cutmix_square(
    triples: &[UnlabeledTriple],
    downsample: usize,
    rng: &mut impl Rng,
) -> Result<(Vec<(Array3<f64>, Array3<f64>)>, Vec<MixMask>)> {
    if triples.len() < 2 {
        return apply_masks(triples, &[]);
    }
    let (_, h, w) = triples[0].weak.dim();
    check_map_grid(h, w, downsample)?;
    let (hm, wm) = (h / downsample, w / downsample);
    let mut masks = Vec::with_capacity(triples.len());
    for _ in 0..triples.len() {
        let area: f64 = rng.random_range(0.25..=0.5);
        let side = area.sqrt();
        let bw = ((wm as f64 * side).round() as usize).clamp(1, wm - 1);
        let bh = ((hm as f64 * side).round() as usize).clamp(1, hm - 1);
        let x0 = rng.random_range(0..=(wm - bw));
        let y0 = rng.random_range(0..=(hm - bh));
        let map_rect = [x0, y0, x0 + bw, y0 + bh];
        let rect = map_rect.map(|v| v * downsample);
        masks.push(MixMask::Rect { rect, map_rect });
    }
    apply_masks(triples, &masks)
}

fn check_map_grid(h: usize, w: usize, downsample: usize) -> Result<()> {
    if downsample == 0 || h % downsample != 0 || w % downsample != 0 {
        return Err(Error::InvalidArgument(format!(
            "image {w}x{h} not divisible by downsample {downsample}"
        )));
    }
    if h / downsample < 4 || w / downsample < 4 {
        return Err(Error::InvalidArgument(format!(
            "map grid {}x{} too small to cut",
            w / downsample,
            h / downsample
        )));
    }
    Ok(())
}

fn apply_masks(
    triples: &[UnlabeledTriple],
    masks: &[MixMask],
) -> Result<(Vec<(Array3<f64>, Array3<f64>)>, Vec<MixMask>)> {
    if masks.is_empty() {
        return Ok((
            triples.iter().map(|t| (t.strong1.clone(), t.strong2.clone())).collect(),
            Vec::new(),
        ));
    }
    let n = triples.len();
    let mut out = Vec::with_capacity(n);
    for (i, t) in triples.iter().enumerate() {
        let partner = &triples[(i + 1) % n];
        out.push((
            mix_images(&t.strong1, &partner.strong1, &masks[i])?,
            mix_images(&t.strong2, &partner.strong2, &masks[i])?,
        ));
    }
    Ok((out, masks.to_vec()))
}

/// Splices two image-scale arrays: `a` on the self side, `b` on the partner
/// side of the mask.
pub fn mix_images(a: &Array3<f64>, b: &Array3<f64>, mask: &MixMask) -> Result<Array3<f64>> {
    mix_arrays(a, b, |r, c| mask.from_partner_image(r, c))
}

/// Splices two map-scale arrays with the same cut as [`mix_images`], using
/// the mask's map-grid indices.
pub fn mix_maps(a: &Array3<f64>, b: &Array3<f64>, mask: &MixMask) -> Result<Array3<f64>> {
    mix_arrays(a, b, |r, c| mask.from_partner_map(r, c))
}

fn mix_arrays(
    a: &Array3<f64>,
    b: &Array3<f64>,
    from_partner: impl Fn(usize, usize) -> bool,
) -> Result<Array3<f64>> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", a.dim()),
            got: format!("{:?}", b.dim()),
        });
    }
    let (ch, h, w) = a.dim();
    let mut out = a.clone();
    for r in 0..h {
        for x in 0..w {
            if from_partner(r, x) {
                for c in 0..ch {
                    out[[c, r, x]] = b[[c, r, x]];
                }
            }
        }
    }
    Ok(out)
}
