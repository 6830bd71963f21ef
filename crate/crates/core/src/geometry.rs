//! Segment geometry: the tri-point over-parameterization, overlapping
//! sub-segment chains, invertible image/annotation transforms, and mask
//! rasterization.
//!
//! Coordinates are continuous with the origin at the top-left corner of the
//! top-left pixel, x to the right, y down. The pixel at row `r`, column `c`
//! covers `[c, c+1) x [r, r+1)`; its lattice point is `(c, r)`.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default minimum length (in target-space units) a clipped segment must keep
/// to survive a crop.
pub const MIN_CLIPPED_LEN: f64 = 2.0;

/// A 2D point, also used as a displacement vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    #[inline]
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    #[inline]
    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    #[inline]
    pub fn dist(self, other: Point) -> f64 {
        (self - other).norm()
    }

    #[inline]
    pub fn dot(self, other: Point) -> f64 {
        self.x * other.x + self.y * other.y
    }

    #[inline]
    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl std::ops::Add for Point {
    type Output = Point;
    #[inline]
    fn add(self, rhs: Point) -> Point {
        Point::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl std::ops::Sub for Point {
    type Output = Point;
    #[inline]
    fn sub(self, rhs: Point) -> Point {
        Point::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl std::ops::Mul<f64> for Point {
    type Output = Point;
    #[inline]
    fn mul(self, rhs: f64) -> Point {
        Point::new(self.x * rhs, self.y * rhs)
    }
}

/// A line segment with optional detection confidence.
///
/// Endpoints are unordered as far as geometry is concerned; functions that
/// compare segments try both orderings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineSegment {
    pub start: Point,
    pub end: Point,
    pub score: Option<f64>,
}

impl LineSegment {
    /// Builds a segment from finite endpoints. Zero length is allowed here;
    /// operations that require a direction reject it instead.
    pub fn new(start: Point, end: Point) -> Result<Self> {
        if !start.is_finite() || !end.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "non-finite segment endpoints ({}, {})-({}, {})",
                start.x, start.y, end.x, end.y
            )));
        }
        Ok(LineSegment { start, end, score: None })
    }

    pub fn with_score(mut self, score: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::InvalidArgument(format!("score {score} outside [0, 1]")));
        }
        self.score = Some(score);
        Ok(self)
    }

    #[inline]
    pub fn length(&self) -> f64 {
        self.start.dist(self.end)
    }

    #[inline]
    pub fn midpoint(&self) -> Point {
        Point::new((self.start.x + self.end.x) / 2.0, (self.start.y + self.end.y) / 2.0)
    }

    /// Point at parameter `t` along the segment, `t = 0` at start, `1` at end.
    #[inline]
    pub fn point_at(&self, t: f64) -> Point {
        self.start + (self.end - self.start) * t
    }

    #[inline]
    pub fn reversed(&self) -> LineSegment {
        LineSegment { start: self.end, end: self.start, score: self.score }
    }

    /// Undirected angle folded into `[0, pi)`.
    pub fn angle(&self) -> f64 {
        let d = self.end - self.start;
        let mut a = d.y.atan2(d.x);
        if a < 0.0 {
            a += std::f64::consts::PI;
        }
        if a >= std::f64::consts::PI {
            a -= std::f64::consts::PI;
        }
        a
    }

    /// Distance from `p` to the closest point on the segment.
    pub fn dist_to_point(&self, p: Point) -> f64 {
        let d = self.end - self.start;
        let len2 = d.dot(d);
        if len2 == 0.0 {
            return self.start.dist(p);
        }
        let t = ((p - self.start).dot(d) / len2).clamp(0.0, 1.0);
        self.point_at(t).dist(p)
    }
}

/// Center plus displacement vectors to both endpoints.
///
/// Redundant on purpose: a detector predicting all three quantities per
/// location can be decoded from the center channel alone, and the redundancy
/// gives the losses more signal than a bare endpoint pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TriPoint {
    pub center: Point,
    pub disp_start: Point,
    pub disp_end: Point,
}

impl TriPoint {
    #[inline]
    pub fn endpoints(&self) -> (Point, Point) {
        (self.center + self.disp_start, self.center + self.disp_end)
    }
}

/// Exact tri-point for a segment: center is the midpoint, so the two
/// displacements are negatives of each other.
pub fn to_tripoint(seg: &LineSegment) -> Result<TriPoint> {
    if seg.length() == 0.0 {
        return Err(Error::DegenerateSegment(format!(
            "zero-length segment at ({}, {})",
            seg.start.x, seg.start.y
        )));
    }
    let c = seg.midpoint();
    Ok(TriPoint { center: c, disp_start: seg.start - c, disp_end: seg.end - c })
}

/// Inverse of [`to_tripoint`]: endpoints recovered as center + displacement.
pub fn from_tripoint(tp: &TriPoint) -> Result<LineSegment> {
    let (s, e) = tp.endpoints();
    let seg = LineSegment::new(s, e)?;
    if seg.length() == 0.0 {
        return Err(Error::DegenerateSegment(format!(
            "tri-point with coincident endpoints at ({}, {})",
            tp.center.x, tp.center.y
        )));
    }
    Ok(seg)
}

/// Sub-segment window parameters for the overlapping-chain representation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolParams {
    /// Window length, in the same units as the segments being split.
    pub length: f64,
    /// Fraction of the window shared with its successor, in `[0, 0.9]`.
    pub overlap: f64,
}

impl Default for SolParams {
    fn default() -> Self {
        SolParams { length: 32.0, overlap: 0.5 }
    }
}

impl SolParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.length.is_finite() && self.length > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "sub-segment length must be positive, got {}",
                self.length
            )));
        }
        if !(0.0..=0.9).contains(&self.overlap) {
            return Err(Error::InvalidArgument(format!(
                "sub-segment overlap {} outside [0, 0.9]",
                self.overlap
            )));
        }
        Ok(())
    }
}

/// A segment cut into overlapping sub-segments, each stored as a tri-point.
#[derive(Debug, Clone, PartialEq)]
pub struct SolChain {
    pub parent: LineSegment,
    pub segments: Vec<TriPoint>,
}

impl SolChain {
    /// Parameter interval of each sub-segment along the parent, in `[0, 1]`.
    pub fn intervals(&self) -> Vec<(f64, f64)> {
        let d = self.parent.end - self.parent.start;
        let len2 = d.dot(d);
        let proj = |p: Point| (p - self.parent.start).dot(d) / len2;
        self.segments
            .iter()
            .map(|tp| {
                let (s, e) = tp.endpoints();
                (proj(s), proj(e))
            })
            .collect()
    }
}

/// Cuts a segment into sub-segments of `params.length` stepped by
/// `length * (1 - overlap)`, the last one shortened to end exactly at the
/// parent's end. A segment no longer than one window yields itself.
pub fn sol_split(seg: &LineSegment, params: &SolParams) -> Result<SolChain> {
    params.validate()?;
    let total = seg.length();
    if total == 0.0 {
        return Err(Error::DegenerateSegment(format!(
            "cannot split zero-length segment at ({}, {})",
            seg.start.x, seg.start.y
        )));
    }
    let mut segments = Vec::new();
    if total <= params.length {
        segments.push(to_tripoint(seg)?);
    } else {
        let stride = params.length * (1.0 - params.overlap);
        let n = ((total - params.length) / stride).ceil() as usize + 1;
        for i in 0..n {
            let a = (i as f64 * stride).min(total - params.length);
            let b = (a + params.length).min(total);
            let sub = LineSegment::new(seg.point_at(a / total), seg.point_at(b / total))?;
            segments.push(to_tripoint(&sub)?);
        }
    }
    Ok(SolChain { parent: *seg, segments })
}

/// Axis of an image flip or cut.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
}

/// An invertible geometric transform acting on both image pixels and segment
/// coordinates. Source dimensions are baked in so point mapping needs no
/// extra context.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GeomTransform {
    /// Mirror across the vertical axis of a `width`-wide image.
    HFlip { width: f64 },
    /// Mirror across the horizontal axis of a `height`-tall image.
    VFlip { height: f64 },
    /// `k` quarter turns clockwise of a `width x height` image, `k` in `0..4`.
    Rot90 { k: u8, width: f64, height: f64 },
    /// Crop `window = [x0, y0, x1, y1]` out of the source, then resize to
    /// `dst = (width, height)`.
    CropResize { window: [f64; 4], dst: (f64, f64) },
}

impl GeomTransform {
    /// Maps a point from source coordinates to target coordinates.
    pub fn apply_point(&self, p: Point) -> Point {
        match *self {
            GeomTransform::HFlip { width } => Point::new(width - p.x, p.y),
            GeomTransform::VFlip { height } => Point::new(p.x, height - p.y),
            GeomTransform::Rot90 { k, width, height } => {
                let mut q = p;
                let (mut w, mut h) = (width, height);
                for _ in 0..(k % 4) {
                    q = Point::new(h - q.y, q.x);
                    std::mem::swap(&mut w, &mut h);
                }
                q
            }
            GeomTransform::CropResize { window, dst } => {
                let [x0, y0, x1, y1] = window;
                Point::new((p.x - x0) * dst.0 / (x1 - x0), (p.y - y0) * dst.1 / (y1 - y0))
            }
        }
    }

    /// Inverse of [`apply_point`].
    pub fn invert_point(&self, p: Point) -> Point {
        match *self {
            GeomTransform::HFlip { width } => Point::new(width - p.x, p.y),
            GeomTransform::VFlip { height } => Point::new(p.x, height - p.y),
            GeomTransform::Rot90 { k, width, height } => {
                let inv_k = (4 - k % 4) % 4;
                // The inverse rotation starts from the rotated frame's dims.
                let (w, h) = if k % 2 == 0 { (width, height) } else { (height, width) };
                GeomTransform::Rot90 { k: inv_k, width: w, height: h }.apply_point(p)
            }
            GeomTransform::CropResize { window, dst } => {
                let [x0, y0, x1, y1] = window;
                Point::new(x0 + p.x * (x1 - x0) / dst.0, y0 + p.y * (y1 - y0) / dst.1)
            }
        }
    }

    /// Target image dimensions `(width, height)` for a source of the baked-in
    /// size.
    pub fn target_size(&self) -> (f64, f64) {
        match *self {
            GeomTransform::HFlip { width } => (width, f64::NAN),
            GeomTransform::VFlip { height } => (f64::NAN, height),
            GeomTransform::Rot90 { k, width, height } => {
                if k % 2 == 0 {
                    (width, height)
                } else {
                    (height, width)
                }
            }
            GeomTransform::CropResize { dst, .. } => dst,
        }
    }
}

fn check_lines_in_bounds(lines: &[LineSegment], w: f64, h: f64) -> Result<()> {
    const EPS: f64 = 1e-9;
    for (i, l) in lines.iter().enumerate() {
        for p in [l.start, l.end] {
            if p.x < -EPS || p.x > w + EPS || p.y < -EPS || p.y > h + EPS {
                return Err(Error::InvalidArgument(format!(
                    "line {i} endpoint ({}, {}) outside image bounds {w}x{h}",
                    p.x, p.y
                )));
            }
        }
    }
    Ok(())
}

/// Clips `seg` to the axis-aligned rectangle `[x0, x1] x [y0, y1]`.
/// Returns `None` when nothing remains.
pub fn clip_segment(seg: &LineSegment, x0: f64, y0: f64, x1: f64, y1: f64) -> Option<LineSegment> {
    // Liang-Barsky.
    let d = seg.end - seg.start;
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    for (p, q) in [
        (-d.x, seg.start.x - x0),
        (d.x, x1 - seg.start.x),
        (-d.y, seg.start.y - y0),
        (d.y, y1 - seg.start.y),
    ] {
        if p == 0.0 {
            if q < 0.0 {
                return None;
            }
        } else {
            let r = q / p;
            if p < 0.0 {
                t0 = t0.max(r);
            } else {
                t1 = t1.min(r);
            }
        }
    }
    if t0 >= t1 {
        return None;
    }
    let mut out = LineSegment {
        start: seg.point_at(t0),
        end: seg.point_at(t1),
        score: seg.score,
    };
    // Snap clipped endpoints onto the boundary to kill round-off overshoot.
    for p in [&mut out.start, &mut out.end] {
        p.x = p.x.clamp(x0, x1);
        p.y = p.y.clamp(y0, y1);
    }
    if out.length() == 0.0 {
        None
    } else {
        Some(out)
    }
}

/// Applies `t` to an image `(channels, height, width)` and its annotation
/// lines together. Lines must lie within the source bounds. Crops clip lines
/// to the window; clipped remnants shorter than `min_len` (target units) are
/// dropped.
///
/// The image is resampled on the lattice grid through the inverse point map,
/// so rasterization commutes with the transform: flips and right-angle
/// rotations are exact sample permutations (border samples clamp), crops are
/// bilinear.
pub fn apply_transform(
    t: &GeomTransform,
    image: &Array3<f64>,
    lines: &[LineSegment],
    min_len: f64,
) -> Result<(Array3<f64>, Vec<LineSegment>)> {
    let (ch, h, w) = image.dim();
    let (hf, wf) = (h as f64, w as f64);
    check_lines_in_bounds(lines, wf, hf)?;
    let (dw, dh) = match *t {
        GeomTransform::HFlip { width } => {
            check_dim("width", width, wf)?;
            (w, h)
        }
        GeomTransform::VFlip { height } => {
            check_dim("height", height, hf)?;
            (w, h)
        }
        GeomTransform::Rot90 { k, width, height } => {
            check_dim("width", width, wf)?;
            check_dim("height", height, hf)?;
            if k % 2 == 0 {
                (w, h)
            } else {
                (h, w)
            }
        }
        GeomTransform::CropResize { window, dst } => {
            let [x0, y0, x1, y1] = window;
            if !(x0 >= 0.0 && y0 >= 0.0 && x1 <= wf && y1 <= hf && x1 > x0 && y1 > y0) {
                return Err(Error::InvalidArgument(format!(
                    "crop window [{x0}, {y0}, {x1}, {y1}] invalid for {w}x{h} source"
                )));
            }
            let (dw, dh) = (dst.0.round() as usize, dst.1.round() as usize);
            if dw == 0 || dh == 0 {
                return Err(Error::InvalidArgument("empty crop target".into()));
            }
            (dw, dh)
        }
    };

    let mut out = Array3::zeros((ch, dh, dw));
    for r in 0..dh {
        for x in 0..dw {
            let src = t.invert_point(Point::new(x as f64, r as f64));
            for c in 0..ch {
                out[[c, r, x]] = bilinear(image, c, src.y, src.x);
            }
        }
    }

    let mapped = match *t {
        GeomTransform::CropResize { window, .. } => {
            let [x0, y0, x1, y1] = window;
            let mut mapped = Vec::new();
            for l in lines {
                if let Some(clipped) = clip_segment(l, x0, y0, x1, y1) {
                    let m = map_line(t, &clipped);
                    if m.length() >= min_len {
                        mapped.push(m);
                    }
                }
            }
            mapped
        }
        _ => lines.iter().map(|l| map_line(t, l)).collect(),
    };
    Ok((out, mapped))
}

fn check_dim(name: &str, declared: f64, actual: f64) -> Result<()> {
    if (declared - actual).abs() > 1e-9 {
        return Err(Error::ShapeMismatch {
            expected: format!("{name} {declared}"),
            got: format!("{name} {actual}"),
        });
    }
    Ok(())
}

fn map_line(t: &GeomTransform, l: &LineSegment) -> LineSegment {
    LineSegment {
        start: t.apply_point(l.start),
        end: t.apply_point(l.end),
        score: l.score,
    }
}

/// Bilinear sample of channel `c` at continuous pixel-center coordinates,
/// clamped at the borders.
fn bilinear(image: &Array3<f64>, c: usize, y: f64, x: f64) -> f64 {
    let (_, h, w) = image.dim();
    let xc = x.clamp(0.0, (w - 1) as f64);
    let yc = y.clamp(0.0, (h - 1) as f64);
    let x0 = xc.floor() as usize;
    let y0 = yc.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = xc - x0 as f64;
    let fy = yc - y0 as f64;
    let v00 = image[[c, y0, x0]];
    let v01 = image[[c, y0, x1]];
    let v10 = image[[c, y1, x0]];
    let v11 = image[[c, y1, x1]];
    v00 * (1.0 - fx) * (1.0 - fy) + v01 * fx * (1.0 - fy) + v10 * (1.0 - fx) * fy + v11 * fx * fy
}

/// Paints segments into a boolean mask: a lattice point `(c, r)` is set when
/// its distance to any segment is at most `thickness / 2`.
pub fn rasterize(lines: &[LineSegment], h: usize, w: usize, thickness: f64) -> Array2<bool> {
    let mut mask = Array2::from_elem((h, w), false);
    if h == 0 || w == 0 {
        return mask;
    }
    let radius = thickness / 2.0;
    for l in lines {
        let x_lo = (l.start.x.min(l.end.x) - radius).floor().max(0.0) as usize;
        let x_hi = (l.start.x.max(l.end.x) + radius).ceil().min((w - 1) as f64) as usize;
        let y_lo = (l.start.y.min(l.end.y) - radius).floor().max(0.0) as usize;
        let y_hi = (l.start.y.max(l.end.y) + radius).ceil().min((h - 1) as f64) as usize;
        for r in y_lo..=y_hi {
            for c in x_lo..=x_hi {
                if !mask[[r, c]] && l.dist_to_point(Point::new(c as f64, r as f64)) <= radius {
                    mask[[r, c]] = true;
                }
            }
        }
    }
    mask
}
