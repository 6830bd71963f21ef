//! Dataset plumbing: manifests, labeled/unlabeled splits, segmentation-mask
//! line extraction, and a synthetic scene generator for end-to-end checks.
//!
//! A manifest is one JSON document naming every sample of a dataset role.
//! Line annotations are endpoint quadruples in original image pixels;
//! `lines: null` marks an unlabeled sample. Loading validates annotations:
//! non-finite or zero-length entries are dropped, segments poking outside
//! the image are clipped, and both events are counted so callers can warn.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{clip_segment, LineSegment, Point, MIN_CLIPPED_LEN};

/// Which stage of a run a manifest feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Val,
    Test,
}

/// One image plus its annotations. `lines: None` marks an unlabeled sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image_id: String,
    /// Path to the image, absolute or relative to the manifest location.
    pub image_path: String,
    pub width: u32,
    pub height: u32,
    pub lines: Option<Vec<LineSegment>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub name: String,
    pub role: Role,
    pub samples: Vec<Sample>,
}

/// How many annotations load-time validation touched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ValidationCounts {
    /// Non-finite, zero-length, or fully out-of-bounds entries removed.
    pub dropped_lines: usize,
    /// Entries cut back to the image bounds.
    pub clipped_lines: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestDoc {
    name: String,
    role: Role,
    samples: Vec<SampleDoc>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleDoc {
    image_id: String,
    image_path: String,
    width: u32,
    height: u32,
    lines: Option<Vec<[f64; 4]>>,
}

/// Loads and validates a manifest, logging what validation changed.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let (manifest, counts) = load_manifest_counted(path)?;
    if counts.dropped_lines > 0 || counts.clipped_lines > 0 {
        log::warn!(
            "manifest {}: dropped {} and clipped {} line annotations",
            path.display(),
            counts.dropped_lines,
            counts.clipped_lines
        );
    }
    Ok(manifest)
}

/// [`load_manifest`] with the validation counts exposed.
pub fn load_manifest_counted(path: &Path) -> Result<(DatasetManifest, ValidationCounts)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc: ManifestDoc = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    let mut counts = ValidationCounts::default();
    let mut seen = HashSet::new();
    let mut samples = Vec::with_capacity(doc.samples.len());
    for s in doc.samples {
        if !seen.insert(s.image_id.clone()) {
            return Err(Error::Data(format!("duplicate image_id \"{}\"", s.image_id)));
        }
        let lines = match s.lines {
            None => None,
            Some(raw) => Some(validate_lines(&raw, s.width, s.height, &mut counts)),
        };
        samples.push(Sample {
            image_id: s.image_id,
            image_path: s.image_path,
            width: s.width,
            height: s.height,
            lines,
        });
    }
    Ok((DatasetManifest { name: doc.name, role: doc.role, samples }, counts))
}

fn validate_lines(
    raw: &[[f64; 4]],
    width: u32,
    height: u32,
    counts: &mut ValidationCounts,
) -> Vec<LineSegment> {
    let (w, h) = (f64::from(width), f64::from(height));
    let mut out = Vec::with_capacity(raw.len());
    for &[x1, y1, x2, y2] in raw {
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            counts.dropped_lines += 1;
            continue;
        }
        let Ok(seg) = LineSegment::new(Point::new(x1, y1), Point::new(x2, y2)) else {
            counts.dropped_lines += 1;
            continue;
        };
        if seg.length() == 0.0 {
            counts.dropped_lines += 1;
            continue;
        }
        let inside = |p: Point| (0.0..=w).contains(&p.x) && (0.0..=h).contains(&p.y);
        if inside(seg.start) && inside(seg.end) {
            out.push(seg);
        } else {
            match clip_segment(&seg, 0.0, 0.0, w, h) {
                Some(c) if c.length() >= MIN_CLIPPED_LEN => {
                    counts.clipped_lines += 1;
                    out.push(c);
                }
                _ => counts.dropped_lines += 1,
            }
        }
    }
    out
}

/// Writes a manifest in the schema [`load_manifest`] reads.
pub fn save_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    let doc = ManifestDoc {
        name: manifest.name.clone(),
        role: manifest.role,
        samples: manifest
            .samples
            .iter()
            .map(|s| SampleDoc {
                image_id: s.image_id.clone(),
                image_path: s.image_path.clone(),
                width: s.width,
                height: s.height,
                lines: s.lines.as_ref().map(|ls| {
                    ls.iter().map(|l| [l.start.x, l.start.y, l.end.x, l.end.y]).collect()
                }),
            })
            .collect(),
    };
    let text = serde_json::to_string_pretty(&doc).map_err(|e| Error::json(path, e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Resolves a sample's image path against the directory its manifest lives
/// in; absolute paths pass through.
pub fn resolve_path(manifest_path: &Path, image_path: &str) -> PathBuf {
    let p = Path::new(image_path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest_path.parent().unwrap_or_else(|| Path::new(".")).join(p)
    }
}

/// Labeled fraction of a semi-supervised split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitFraction {
    #[serde(rename = "1/16")]
    Sixteenth,
    #[serde(rename = "1/8")]
    Eighth,
    #[serde(rename = "1/4")]
    Quarter,
    #[serde(rename = "1/2")]
    Half,
    #[serde(rename = "1")]
    Full,
}

impl SplitFraction {
    pub const ALL: [SplitFraction; 5] = [
        SplitFraction::Sixteenth,
        SplitFraction::Eighth,
        SplitFraction::Quarter,
        SplitFraction::Half,
        SplitFraction::Full,
    ];

    #[inline]
    pub fn value(self) -> f64 {
        match self {
            SplitFraction::Sixteenth => 1.0 / 16.0,
            SplitFraction::Eighth => 1.0 / 8.0,
            SplitFraction::Quarter => 0.25,
            SplitFraction::Half => 0.5,
            SplitFraction::Full => 1.0,
        }
    }
}

impl fmt::Display for SplitFraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SplitFraction::Sixteenth => "1/16",
            SplitFraction::Eighth => "1/8",
            SplitFraction::Quarter => "1/4",
            SplitFraction::Half => "1/2",
            SplitFraction::Full => "1",
        };
        f.write_str(s)
    }
}

impl FromStr for SplitFraction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1/16" => Ok(SplitFraction::Sixteenth),
            "1/8" => Ok(SplitFraction::Eighth),
            "1/4" => Ok(SplitFraction::Quarter),
            "1/2" => Ok(SplitFraction::Half),
            "1" | "full" => Ok(SplitFraction::Full),
            other => Err(Error::InvalidArgument(format!(
                "split fraction \"{other}\" not one of 1/16, 1/8, 1/4, 1/2, 1"
            ))),
        }
    }
}

/// A deterministic partition of a manifest into labeled and unlabeled ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub fraction: SplitFraction,
    pub seed: u64,
    pub labeled_ids: Vec<String>,
    pub unlabeled_ids: Vec<String>,
}

/// Shuffles the manifest's ids with the seed and takes the first
/// `round(fraction * N)` as labeled. Both id lists come out sorted, so the
/// spec is independent of manifest order.
pub fn make_split(manifest: &DatasetManifest, fraction: SplitFraction, seed: u64) -> SplitSpec {
    let mut ids: Vec<String> = manifest.samples.iter().map(|s| s.image_id.clone()).collect();
    ids.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher-Yates.
    for i in (1..ids.len()).rev() {
        let j = rng.random_range(0..=i);
        ids.swap(i, j);
    }
    let n_labeled = (fraction.value() * ids.len() as f64).round() as usize;
    let mut labeled_ids: Vec<String> = ids[..n_labeled.min(ids.len())].to_vec();
    let mut unlabeled_ids: Vec<String> = ids[n_labeled.min(ids.len())..].to_vec();
    labeled_ids.sort();
    unlabeled_ids.sort();
    SplitSpec { fraction, seed, labeled_ids, unlabeled_ids }
}

pub fn save_split(path: &Path, split: &SplitSpec) -> Result<()> {
    let text = serde_json::to_string_pretty(split).map_err(|e| Error::json(path, e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_split(path: &Path) -> Result<SplitSpec> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// Silhouette extraction knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractParams {
    /// Polyline simplification tolerance, px.
    pub epsilon: f64,
    /// Shortest silhouette edge worth keeping, px.
    pub min_length: f64,
    /// Drop edges lying along the image frame.
    pub exclude_border: bool,
}

impl Default for ExtractParams {
    fn default() -> Self {
        ExtractParams { epsilon: 2.0, min_length: 10.0, exclude_border: true }
    }
}

/// Traces the outer boundary of every foreground component, simplifies it to
/// a polyline within `epsilon`, and returns the polyline edges of at least
/// `min_length` as segments, skipping edges that run along the image frame.
pub fn extract_lines_from_mask(mask: &Array2<bool>, params: &ExtractParams) -> Vec<LineSegment> {
    let (h, w) = mask.dim();
    let mut out = Vec::new();
    let mut labels = Array2::<u32>::zeros((h, w));
    let mut next = 0u32;
    for r in 0..h {
        for c in 0..w {
            if !mask[[r, c]] || labels[[r, c]] != 0 {
                continue;
            }
            next += 1;
            flood_fill(mask, &mut labels, (r, c), next);
            let contour = trace_boundary(&labels, (r, c), next);
            if contour.len() < 3 {
                continue;
            }
            let cycle = simplify_closed(&contour, params.epsilon);
            for i in 0..cycle.len() {
                let a = cycle[i];
                let b = cycle[(i + 1) % cycle.len()];
                let Ok(seg) = LineSegment::new(a, b) else { continue };
                if seg.length() < params.min_length {
                    continue;
                }
                if params.exclude_border && is_border_edge(a, b, h, w) {
                    continue;
                }
                out.push(seg);
            }
        }
    }
    out
}

fn flood_fill(mask: &Array2<bool>, labels: &mut Array2<u32>, start: (usize, usize), id: u32) {
    let (h, w) = mask.dim();
    let mut stack = vec![start];
    labels[start] = id;
    while let Some((r, c)) = stack.pop() {
        for dr in -1isize..=1 {
            for dc in -1isize..=1 {
                let (rr, cc) = (r as isize + dr, c as isize + dc);
                if rr < 0 || rr >= h as isize || cc < 0 || cc >= w as isize {
                    continue;
                }
                let p = (rr as usize, cc as usize);
                if mask[p] && labels[p] == 0 {
                    labels[p] = id;
                    stack.push(p);
                }
            }
        }
    }
}

/// Moore-neighbor clockwise offsets, starting west (y grows downward).
const MOORE: [(isize, isize); 8] =
    [(0, -1), (-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1)];

/// Moore-neighbor tracing from the component's first pixel in scan order
/// (whose west neighbor is guaranteed outside). Stops on returning to the
/// start with the starting backtrack direction.
fn trace_boundary(labels: &Array2<u32>, start: (usize, usize), id: u32) -> Vec<Point> {
    let (h, w) = labels.dim();
    let inside = |r: isize, c: isize| {
        r >= 0 && r < h as isize && c >= 0 && c < w as isize && labels[[r as usize, c as usize]] == id
    };
    let mut contour = vec![Point::new(start.1 as f64, start.0 as f64)];
    let mut cur = (start.0 as isize, start.1 as isize);
    // Backtrack starts at the west neighbor, Moore index 0.
    let mut back = 0usize;
    let start_state = (cur, back);
    let cap = 4 * (h * w + 1);
    for _ in 0..cap {
        let mut found = None;
        for step in 1..=8 {
            let k = (back + step) % 8;
            let (dr, dc) = MOORE[k];
            if inside(cur.0 + dr, cur.1 + dc) {
                found = Some((k, (cur.0 + dr, cur.1 + dc)));
                break;
            }
        }
        let Some((k, nxt)) = found else { break };
        // New backtrack: the direction pointing from the next pixel to the
        // last background cell scanned, i.e. the reverse of the previous
        // probe direction.
        let prev = (k + 7) % 8;
        let (pdr, pdc) = MOORE[prev];
        let back_cell = (cur.0 + pdr, cur.1 + pdc);
        let mut nb = 0;
        for (i, (dr, dc)) in MOORE.iter().enumerate() {
            if (nxt.0 + dr, nxt.1 + dc) == back_cell {
                nb = i;
                break;
            }
        }
        cur = nxt;
        back = nb;
        if (cur, back) == start_state {
            break;
        }
        contour.push(Point::new(cur.1 as f64, cur.0 as f64));
    }
    contour
}

fn point_segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let d = b - a;
    let len2 = d.x * d.x + d.y * d.y;
    if len2 == 0.0 {
        return (p - a).norm();
    }
    let t = (((p.x - a.x) * d.x + (p.y - a.y) * d.y) / len2).clamp(0.0, 1.0);
    (p - Point::new(a.x + t * d.x, a.y + t * d.y)).norm()
}

/// Splits a closed contour at its two farthest points and simplifies each
/// half, yielding the vertex cycle of the simplified polygon.
fn simplify_closed(contour: &[Point], epsilon: f64) -> Vec<Point> {
    let n = contour.len();
    let (mut bi, mut bj, mut best) = (0usize, 0usize, -1.0f64);
    for i in 0..n {
        for j in i + 1..n {
            let d = (contour[j] - contour[i]).norm();
            if d > best {
                best = d;
                bi = i;
                bj = j;
            }
        }
    }
    let chain_a: Vec<Point> = contour[bi..=bj].to_vec();
    let mut chain_b: Vec<Point> = contour[bj..].to_vec();
    chain_b.extend_from_slice(&contour[..=bi]);
    let mut cycle = douglas_peucker(&chain_a, epsilon);
    let simplified_b = douglas_peucker(&chain_b, epsilon);
    cycle.extend_from_slice(&simplified_b[1..simplified_b.len().saturating_sub(1)]);
    cycle
}

fn douglas_peucker(pts: &[Point], epsilon: f64) -> Vec<Point> {
    if pts.len() <= 2 {
        return pts.to_vec();
    }
    let mut keep = vec![false; pts.len()];
    keep[0] = true;
    keep[pts.len() - 1] = true;
    let mut stack = vec![(0usize, pts.len() - 1)];
    while let Some((a, b)) = stack.pop() {
        if b <= a + 1 {
            continue;
        }
        let (mut far, mut fi) = (0.0, a);
        for i in a + 1..b {
            let d = point_segment_distance(pts[i], pts[a], pts[b]);
            if d > far {
                far = d;
                fi = i;
            }
        }
        if far > epsilon {
            keep[fi] = true;
            stack.push((a, fi));
            stack.push((fi, b));
        }
    }
    pts.iter().zip(&keep).filter_map(|(p, &k)| k.then_some(*p)).collect()
}

fn is_border_edge(a: Point, b: Point, h: usize, w: usize) -> bool {
    let t = 1.5;
    let (wf, hf) = (w as f64 - 1.0, h as f64 - 1.0);
    (a.x <= t && b.x <= t)
        || (a.y <= t && b.y <= t)
        || (a.x >= wf - t && b.x >= wf - t)
        || (a.y >= hf - t && b.y >= hf - t)
}

/// Synthetic scene knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthParams {
    pub min_lines: usize,
    pub max_lines: usize,
    /// Segment length bounds as fractions of the image diagonal.
    pub min_rel_length: f64,
    pub max_rel_length: f64,
    /// Stroke thickness, px.
    pub thickness: f64,
    /// Endpoints keep this distance from the frame, px.
    pub margin: f64,
    pub max_blobs: usize,
    /// Restricts strokes to this many evenly spaced orientations; 0 draws
    /// continuous angles.
    pub angle_steps: usize,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            min_lines: 2,
            max_lines: 8,
            min_rel_length: 0.2,
            max_rel_length: 0.8,
            thickness: 3.0,
            margin: 4.0,
            max_blobs: 3,
            angle_steps: 0,
        }
    }
}

/// Generates `n` bright-segments-on-textured-noise scenes with exact
/// ground truth, deterministic in `seed`. Each sample draws from its own
/// rng stream, so the set is stable under reordering or subsetting.
/// `image_path` fields follow the `images/{id}.png` convention; writing the
/// pixel arrays there is the caller's job.
pub fn synth_line_dataset(
    n: usize,
    size: usize,
    seed: u64,
    role: Role,
    params: &SynthParams,
) -> Result<(DatasetManifest, Vec<Array3<f64>>)> {
    if n == 0 || size < 32 {
        return Err(Error::InvalidArgument(format!(
            "need at least 1 sample and size >= 32, got {n} of {size}"
        )));
    }
    if params.min_lines < 1 || params.max_lines < params.min_lines {
        return Err(Error::InvalidArgument(format!(
            "bad line count range [{}, {}]",
            params.min_lines, params.max_lines
        )));
    }
    let mut samples = Vec::with_capacity(n);
    let mut images = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64 + 1);
        let (image, lines) = synth_scene(size, params, &mut rng);
        let id = format!("synth_{i:04}");
        samples.push(Sample {
            image_id: id.clone(),
            image_path: format!("images/{id}.png"),
            width: size as u32,
            height: size as u32,
            lines: Some(lines),
        });
        images.push(image);
    }
    let name = format!("synth_{seed}");
    Ok((DatasetManifest { name, role, samples }, images))
}

/// One scene: value-noise background, soft distractor blobs, and bright
/// strokes whose exact endpoints become the ground truth. Background stays
/// below 0.6, strokes at 0.85 and up.
fn synth_scene(size: usize, params: &SynthParams, rng: &mut ChaCha8Rng) -> (Array3<f64>, Vec<LineSegment>) {
    let mut lum = value_noise(size, size, size / 8, 0.45, rng);
    let blobs = rng.random_range(0..=params.max_blobs);
    for _ in 0..blobs {
        let cx = rng.random_range(0.0..size as f64);
        let cy = rng.random_range(0.0..size as f64);
        let radius = rng.random_range(3.0..(size as f64 / 6.0).max(4.0));
        let amp = rng.random_range(0.05..0.15);
        for r in 0..size {
            for c in 0..size {
                let d = ((c as f64 - cx).powi(2) + (r as f64 - cy).powi(2)).sqrt();
                if d < radius {
                    let v = lum[[r, c]] + amp * (1.0 - d / radius);
                    lum[[r, c]] = v.min(0.6);
                }
            }
        }
    }

    let lines = sample_separated_lines(size, params, rng);
    for l in &lines {
        let brightness = rng.random_range(0.85..0.95);
        draw_stroke(&mut lum, l, params.thickness, brightness);
    }

    let mut image = Array3::zeros((3, size, size));
    for r in 0..size {
        for c in 0..size {
            for ch in 0..3 {
                image[[ch, r, c]] = lum[[r, c]];
            }
        }
    }
    (image, lines)
}

/// Bilinear-interpolated lattice noise in [0, amp].
fn value_noise(h: usize, w: usize, cell: usize, amp: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let cell = cell.max(2);
    let (gh, gw) = (h / cell + 2, w / cell + 2);
    let grid = Array2::from_shape_fn((gh, gw), |_| rng.random_range(0.0..1.0));
    Array2::from_shape_fn((h, w), |(r, c)| {
        let gy = r as f64 / cell as f64;
        let gx = c as f64 / cell as f64;
        let (r0, c0) = (gy.floor() as usize, gx.floor() as usize);
        let (fy, fx) = (gy - r0 as f64, gx - c0 as f64);
        let v00 = grid[[r0, c0]];
        let v01 = grid[[r0, c0 + 1]];
        let v10 = grid[[r0 + 1, c0]];
        let v11 = grid[[r0 + 1, c0 + 1]];
        amp * ((v00 * (1.0 - fx) + v01 * fx) * (1.0 - fy) + (v10 * (1.0 - fx) + v11 * fx) * fy)
    })
}

/// Rejection-samples segments with pairwise center separation of at least
/// max(12, 0.12 * size) px, so encoded centers land on distinct map cells.
fn sample_separated_lines(
    size: usize,
    params: &SynthParams,
    rng: &mut ChaCha8Rng,
) -> Vec<LineSegment> {
    let target = rng.random_range(params.min_lines..=params.max_lines);
    let diag = (size as f64) * std::f64::consts::SQRT_2;
    let lo = params.margin;
    let hi = size as f64 - params.margin;
    let min_sep = (0.12 * size as f64).max(12.0);
    let mut lines: Vec<LineSegment> = Vec::new();
    let mut attempts = 0;
    while lines.len() < target && attempts < 2000 {
        attempts += 1;
        let len = rng.random_range(params.min_rel_length..params.max_rel_length) * diag;
        let x1 = rng.random_range(lo..hi);
        let y1 = rng.random_range(lo..hi);
        let angle = if params.angle_steps == 0 {
            rng.random_range(0.0..std::f64::consts::TAU)
        } else {
            rng.random_range(0..params.angle_steps) as f64 * std::f64::consts::PI
                / params.angle_steps as f64
        };
        let p2 = Point::new(x1 + len * angle.cos(), y1 + len * angle.sin());
        if !(lo..=hi).contains(&p2.x) || !(lo..=hi).contains(&p2.y) {
            continue;
        }
        let Ok(seg) = LineSegment::new(Point::new(x1, y1), p2) else { continue };
        let mid = seg.midpoint();
        if lines.iter().any(|l| (l.midpoint() - mid).norm() < min_sep) {
            continue;
        }
        lines.push(seg);
    }
    lines
}

fn draw_stroke(lum: &mut Array2<f64>, seg: &LineSegment, thickness: f64, brightness: f64) {
    let (h, w) = lum.dim();
    let radius = thickness / 2.0;
    let x_lo = ((seg.start.x.min(seg.end.x) - radius).floor().max(0.0)) as usize;
    let x_hi = ((seg.start.x.max(seg.end.x) + radius).ceil() as usize).min(w - 1);
    let y_lo = ((seg.start.y.min(seg.end.y) - radius).floor().max(0.0)) as usize;
    let y_hi = ((seg.start.y.max(seg.end.y) + radius).ceil() as usize).min(h - 1);
    for r in y_lo..=y_hi {
        for c in x_lo..=x_hi {
            let p = Point::new(c as f64, r as f64);
            if point_segment_distance(p, seg.start, seg.end) <= radius {
                lum[[r, c]] = brightness;
            }
        }
    }
}

/// Saves a (3, H, W) image in [0, 1] as 8-bit PNG.
pub fn save_image_png(path: &Path, image: &Array3<f64>) -> Result<()> {
    let (c, h, w) = image.dim();
    if c != 3 {
        return Err(Error::InvalidArgument(format!("expected 3 channels, got {c}")));
    }
    let buf = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |ch: usize| {
            (image[[ch, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8
        };
        image::Rgb([px(0), px(1), px(2)])
    });
    buf.save(path).map_err(|e| Error::image(path, e))
}

/// Loads an image as (3, H, W) float data in [0, 1].
pub fn load_image_png(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?.to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::zeros((3, h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        for ch in 0..3 {
            out[[ch, y as usize, x as usize]] = f64::from(px[ch]) / 255.0;
        }
    }
    Ok(out)
}

/// Loads a single-class segmentation mask: luma above one half is
/// foreground.
pub fn load_mask_png(path: &Path) -> Result<Array2<bool>> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?.to_luma8();
    let (w, h) = img.dimensions();
    let mut out = Array2::from_elem((h as usize, w as usize), false);
    for (x, y, px) in img.enumerate_pixels() {
        out[[y as usize, x as usize]] = px[0] > 127;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rasterize;

    fn sample_manifest() -> DatasetManifest {
        let seg = |a: [f64; 4]| {
            LineSegment::new(Point::new(a[0], a[1]), Point::new(a[2], a[3])).unwrap()
        };
        DatasetManifest {
            name: "toy".into(),
            role: Role::Train,
            samples: vec![
                Sample {
                    image_id: "a".into(),
                    image_path: "images/a.png".into(),
                    width: 128,
                    height: 128,
                    lines: Some(vec![seg([4.0, 5.0, 100.0, 90.5]), seg([10.0, 10.0, 10.0, 60.0])]),
                },
                Sample {
                    image_id: "b".into(),
                    image_path: "images/b.png".into(),
                    width: 128,
                    height: 128,
                    lines: None,
                },
            ],
        }
    }

    #[test]
    fn manifest_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let manifest = sample_manifest();
        save_manifest(&path, &manifest).unwrap();
        let (loaded, counts) = load_manifest_counted(&path).unwrap();
        assert_eq!(loaded, manifest);
        assert_eq!(counts, ValidationCounts::default());
    }

    #[test]
    fn load_drops_degenerate_lines_and_counts() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let text = r#"{"name":"x","role":"train","samples":[
            {"image_id":"a","image_path":"a.png","width":64,"height":64,
             "lines":[[5,5,5,5],[1,1,20,20]]}]}"#;
        std::fs::write(&path, text).unwrap();
        let (m, counts) = load_manifest_counted(&path).unwrap();
        assert_eq!(m.samples[0].lines.as_ref().unwrap().len(), 1);
        assert_eq!(counts.dropped_lines, 1);
        assert_eq!(counts.clipped_lines, 0);
    }

    #[test]
    fn load_clips_out_of_bounds_and_drops_outside() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let text = r#"{"name":"x","role":"train","samples":[
            {"image_id":"a","image_path":"a.png","width":64,"height":64,
             "lines":[[50,10,90,10],[100,100,120,120]]}]}"#;
        std::fs::write(&path, text).unwrap();
        let (m, counts) = load_manifest_counted(&path).unwrap();
        let lines = m.samples[0].lines.as_ref().unwrap();
        assert_eq!(lines.len(), 1);
        assert_eq!(counts.clipped_lines, 1);
        assert_eq!(counts.dropped_lines, 1);
        assert!((lines[0].end.x - 64.0).abs() < 1e-9);
    }

    #[test]
    fn load_rejects_duplicate_ids_by_name() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let text = r#"{"name":"x","role":"train","samples":[
            {"image_id":"dup","image_path":"a.png","width":8,"height":8,"lines":null},
            {"image_id":"dup","image_path":"b.png","width":8,"height":8,"lines":null}]}"#;
        std::fs::write(&path, text).unwrap();
        let err = load_manifest(&path).unwrap_err();
        assert!(err.to_string().contains("dup"), "{err}");
    }

    #[test]
    fn load_distinguishes_missing_file_from_bad_json() {
        let dir = tempfile::tempdir().unwrap();
        let missing = load_manifest(&dir.path().join("absent.json")).unwrap_err();
        assert!(matches!(missing, Error::Io { .. }));
        let path = dir.path().join("bad.json");
        std::fs::write(&path, "{not json").unwrap();
        let bad = load_manifest(&path).unwrap_err();
        assert!(matches!(bad, Error::Json { .. }));
    }

    fn ids_manifest(n: usize) -> DatasetManifest {
        DatasetManifest {
            name: "ids".into(),
            role: Role::Train,
            samples: (0..n)
                .map(|i| Sample {
                    image_id: format!("im{i:04}"),
                    image_path: format!("im{i:04}.png"),
                    width: 8,
                    height: 8,
                    lines: None,
                })
                .collect(),
        }
    }

    #[test]
    fn split_half_of_250_is_125_each() {
        let m = ids_manifest(250);
        let s = make_split(&m, SplitFraction::Half, 3);
        assert_eq!(s.labeled_ids.len(), 125);
        assert_eq!(s.unlabeled_ids.len(), 125);
    }

    #[test]
    fn split_is_deterministic_and_partitions() {
        let m = ids_manifest(50);
        for fraction in SplitFraction::ALL {
            let a = make_split(&m, fraction, 7);
            let b = make_split(&m, fraction, 7);
            assert_eq!(a, b);
            let mut all: Vec<String> =
                a.labeled_ids.iter().chain(&a.unlabeled_ids).cloned().collect();
            all.sort();
            let mut expect: Vec<String> =
                m.samples.iter().map(|s| s.image_id.clone()).collect();
            expect.sort();
            assert_eq!(all, expect);
            let labeled: HashSet<_> = a.labeled_ids.iter().collect();
            assert!(a.unlabeled_ids.iter().all(|id| !labeled.contains(id)));
            let expected_n = (fraction.value() * 50.0).round() as usize;
            assert_eq!(a.labeled_ids.len(), expected_n);
        }
        let c = make_split(&m, SplitFraction::Half, 8);
        assert_ne!(make_split(&m, SplitFraction::Half, 7).labeled_ids, c.labeled_ids);
    }

    #[test]
    fn split_full_fraction_leaves_nothing_unlabeled() {
        let m = ids_manifest(33);
        let s = make_split(&m, SplitFraction::Full, 0);
        assert_eq!(s.labeled_ids.len(), 33);
        assert!(s.unlabeled_ids.is_empty());
    }

    #[test]
    fn split_fraction_parses_and_rejects() {
        assert_eq!("1/8".parse::<SplitFraction>().unwrap(), SplitFraction::Eighth);
        assert!("3/7".parse::<SplitFraction>().is_err());
    }

    #[test]
    fn split_round_trips_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("split.json");
        let s = make_split(&ids_manifest(16), SplitFraction::Quarter, 5);
        save_split(&path, &s).unwrap();
        assert_eq!(load_split(&path).unwrap(), s);
    }

    #[test]
    fn extract_empty_mask_is_empty() {
        let mask = Array2::from_elem((64, 64), false);
        assert!(extract_lines_from_mask(&mask, &ExtractParams::default()).is_empty());
    }

    #[test]
    fn extract_rectangle_yields_four_sides() {
        let mut mask = Array2::from_elem((128, 128), false);
        for r in 40..80 {
            for c in 30..90 {
                mask[[r, c]] = true;
            }
        }
        let lines = extract_lines_from_mask(&mask, &ExtractParams::default());
        assert_eq!(lines.len(), 4, "{lines:?}");
        // Boundary pixels sit at rows 40/79 and cols 30/89.
        let mut sides = [false; 4];
        for l in &lines {
            let horizontal = (l.start.y - l.end.y).abs() < 1.0;
            if horizontal {
                let y = (l.start.y + l.end.y) / 2.0;
                if (y - 40.0).abs() <= 1.0 {
                    sides[0] = true;
                } else if (y - 79.0).abs() <= 1.0 {
                    sides[1] = true;
                }
            } else {
                let x = (l.start.x + l.end.x) / 2.0;
                if (x - 30.0).abs() <= 1.0 {
                    sides[2] = true;
                } else if (x - 89.0).abs() <= 1.0 {
                    sides[3] = true;
                }
            }
        }
        assert_eq!(sides, [true; 4], "{lines:?}");
    }

    #[test]
    fn extract_stripe_keeps_only_interior_sides() {
        let mut mask = Array2::from_elem((96, 128), false);
        for r in 0..96 {
            for c in 50..70 {
                mask[[r, c]] = true;
            }
        }
        let lines = extract_lines_from_mask(&mask, &ExtractParams::default());
        assert_eq!(lines.len(), 2, "{lines:?}");
        for l in &lines {
            assert!((l.start.x - l.end.x).abs() < 1.0, "not vertical: {l:?}");
            let x = (l.start.x + l.end.x) / 2.0;
            assert!((x - 50.0).abs() <= 1.0 || (x - 69.0).abs() <= 1.0, "{l:?}");
            assert!(l.length() >= 90.0);
        }
    }

    #[test]
    fn extract_stays_near_true_boundary() {
        // L-shaped blob; every output segment must hug the boundary within
        // epsilon + 1 px.
        let mut mask = Array2::from_elem((128, 128), false);
        for r in 20..100 {
            for c in 20..60 {
                mask[[r, c]] = true;
            }
        }
        for r in 60..100 {
            for c in 20..110 {
                mask[[r, c]] = true;
            }
        }
        let params = ExtractParams::default();
        let lines = extract_lines_from_mask(&mask, &params);
        assert!(!lines.is_empty());
        let mut boundary = Vec::new();
        for r in 0..128usize {
            for c in 0..128usize {
                if !mask[[r, c]] {
                    continue;
                }
                let edge = [(0i32, 1i32), (0, -1), (1, 0), (-1, 0)].iter().any(|(dr, dc)| {
                    let (rr, cc) = (r as i32 + dr, c as i32 + dc);
                    rr < 0
                        || rr >= 128
                        || cc < 0
                        || cc >= 128
                        || !mask[[rr as usize, cc as usize]]
                });
                if edge {
                    boundary.push(Point::new(c as f64, r as f64));
                }
            }
        }
        for l in &lines {
            for i in 0..=20 {
                let p = l.point_at(i as f64 / 20.0);
                let d = boundary
                    .iter()
                    .map(|b| (*b - p).norm())
                    .fold(f64::INFINITY, f64::min);
                assert!(d <= params.epsilon + 1.0, "point {p:?} is {d} px from boundary");
            }
        }
    }

    #[test]
    fn synth_is_deterministic_and_in_bounds() {
        let params = SynthParams::default();
        let (m1, imgs1) = synth_line_dataset(3, 64, 42, Role::Train, &params).unwrap();
        let (m2, imgs2) = synth_line_dataset(3, 64, 42, Role::Train, &params).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(imgs1, imgs2);
        for s in &m1.samples {
            let lines = s.lines.as_ref().unwrap();
            assert!(lines.len() >= 2);
            for l in lines {
                for p in [l.start, l.end] {
                    assert!((0.0..=64.0).contains(&p.x));
                    assert!((0.0..=64.0).contains(&p.y));
                }
            }
        }
        let (m3, _) = synth_line_dataset(3, 64, 43, Role::Train, &params).unwrap();
        assert_ne!(m1.samples[0].lines, m3.samples[0].lines);
    }

    #[test]
    fn synth_bright_pixels_match_rasterized_truth() {
        let params = SynthParams::default();
        let (m, imgs) = synth_line_dataset(4, 128, 7, Role::Train, &params).unwrap();
        for (s, img) in m.samples.iter().zip(&imgs) {
            let gt = rasterize(s.lines.as_ref().unwrap(), 128, 128, params.thickness);
            let mut inter = 0usize;
            let mut union = 0usize;
            for r in 0..128 {
                for c in 0..128 {
                    let bright = img[[0, r, c]] >= 0.7;
                    inter += usize::from(bright && gt[[r, c]]);
                    union += usize::from(bright || gt[[r, c]]);
                }
            }
            let iou = inter as f64 / union as f64;
            assert!(iou > 0.5, "IoU {iou}");
        }
    }

    #[test]
    fn png_round_trip_preserves_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let (_, imgs) = synth_line_dataset(1, 32, 0, Role::Train, &SynthParams::default()).unwrap();
        save_image_png(&path, &imgs[0]).unwrap();
        let back = load_image_png(&path).unwrap();
        assert_eq!(back.dim(), imgs[0].dim());
        for (a, b) in imgs[0].iter().zip(back.iter()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-9);
        }
    }

    #[test]
    fn resolve_path_honors_relative_and_absolute() {
        let manifest = Path::new("/data/run/m.json");
        assert_eq!(resolve_path(manifest, "images/a.png"), Path::new("/data/run/images/a.png"));
        assert_eq!(resolve_path(manifest, "/abs/b.png"), Path::new("/abs/b.png"));
    }
}
