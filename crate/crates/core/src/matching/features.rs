//! Harris corners with raw-patch descriptors and mutual nearest-neighbour matching.

use nalgebra::DMatrix;

use super::{MatchError, MatchPair, MatchSet};
use crate::geom::Vec2;
use crate::imaging::GrayImage;

pub const PATCH_RADIUS: usize = 5;
pub const DESCRIPTOR_LEN: usize = (2 * PATCH_RADIUS + 1) * (2 * PATCH_RADIUS + 1);

const HARRIS_K: f32 = 0.04;
const NMS_RADIUS: i64 = 4;
const GRID: usize = 8;
/// Keypoints closer than this to the border are discarded so patches stay inside.
const BORDER: usize = PATCH_RADIUS + 3;
const RELATIVE_THRESHOLD: f32 = 1e-3;
const ABSOLUTE_THRESHOLD: f32 = 1e-7;
const MIN_SIDE: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct Keypoint {
    pub position: Vec2,
    pub response: f64,
    /// Unit-norm, [`DESCRIPTOR_LEN`] values.
    pub descriptor: Vec<f32>,
}

fn sobel(img: &GrayImage) -> (Vec<f32>, Vec<f32>) {
    let (w, h) = (img.width(), img.height());
    let mut gx = vec![0.0f32; w * h];
    let mut gy = vec![0.0f32; w * h];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let p = |dx: i64, dy: i64| img.get_clamped(x + dx, y + dy);
            let i = y as usize * w + x as usize;
            gx[i] = ((p(1, -1) + 2.0 * p(1, 0) + p(1, 1)) - (p(-1, -1) + 2.0 * p(-1, 0) + p(-1, 1))) / 8.0;
            gy[i] = ((p(-1, 1) + 2.0 * p(0, 1) + p(1, 1)) - (p(-1, -1) + 2.0 * p(0, -1) + p(1, -1))) / 8.0;
        }
    }
    (gx, gy)
}

/// Separable 5-tap binomial blur with clamped borders.
fn binomial5(src: &[f32], w: usize, h: usize) -> Vec<f32> {
    const TAPS: [f32; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];
    let mut tmp = vec![0.0f32; w * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0;
            for (k, t) in TAPS.iter().enumerate() {
                let xi = (x as i64 + k as i64 - 2).clamp(0, w as i64 - 1) as usize;
                acc += t * row[xi];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, t) in TAPS.iter().enumerate() {
                let yi = (y as i64 + k as i64 - 2).clamp(0, h as i64 - 1) as usize;
                acc += t * tmp[yi * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

fn harris_response(img: &GrayImage) -> Vec<f32> {
    let (w, h) = (img.width(), img.height());
    let (gx, gy) = sobel(img);
    let xx: Vec<f32> = gx.iter().map(|g| g * g).collect();
    let yy: Vec<f32> = gy.iter().map(|g| g * g).collect();
    let xy: Vec<f32> = gx.iter().zip(&gy).map(|(a, b)| a * b).collect();
    let (sxx, syy, sxy) = (binomial5(&xx, w, h), binomial5(&yy, w, h), binomial5(&xy, w, h));
    (0..w * h)
        .map(|i| {
            let tr = sxx[i] + syy[i];
            sxx[i] * syy[i] - sxy[i] * sxy[i] - HARRIS_K * tr * tr
        })
        .collect()
}

/// Strict local maximum within the NMS disc; equal values resolve to the lower index.
fn is_local_max(r: &[f32], w: usize, h: usize, x: usize, y: usize) -> bool {
    let i = y * w + x;
    let v = r[i];
    for dy in -NMS_RADIUS..=NMS_RADIUS {
        for dx in -NMS_RADIUS..=NMS_RADIUS {
            if (dx == 0 && dy == 0) || dx * dx + dy * dy > NMS_RADIUS * NMS_RADIUS {
                continue;
            }
            let (xx, yy) = (x as i64 + dx, y as i64 + dy);
            if xx < 0 || yy < 0 || xx >= w as i64 || yy >= h as i64 {
                continue;
            }
            let j = yy as usize * w + xx as usize;
            if r[j] > v || (r[j] == v && j < i) {
                return false;
            }
        }
    }
    true
}

fn parabolic_offset(left: f32, centre: f32, right: f32) -> f64 {
    let denom = left - 2.0 * centre + right;
    if denom >= 0.0 {
        return 0.0;
    }
    (0.5 * (left - right) / denom).clamp(-0.5, 0.5) as f64
}

fn describe(img: &GrayImage, p: &Vec2) -> Option<Vec<f32>> {
    let r = PATCH_RADIUS as i64;
    let mut d = Vec::with_capacity(DESCRIPTOR_LEN);
    for dy in -r..=r {
        for dx in -r..=r {
            d.push(img.sample(p.x + dx as f64, p.y + dy as f64));
        }
    }
    let mean = d.iter().sum::<f32>() / d.len() as f32;
    d.iter_mut().for_each(|v| *v -= mean);
    let norm = d.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>().sqrt();
    if norm < 1e-6 {
        return None;
    }
    d.iter_mut().for_each(|v| *v = (*v as f64 / norm) as f32);
    Some(d)
}

/// Harris corners, bucketed over an 8x8 grid, with 11x11 patch descriptors.
pub fn detect_and_describe(img: &GrayImage, max_keypoints: usize) -> Result<Vec<Keypoint>, MatchError> {
    let (w, h) = (img.width(), img.height());
    if w < MIN_SIDE || h < MIN_SIDE {
        return Err(MatchError::ImageTooSmall { width: w, height: h });
    }
    let r = harris_response(img);
    let peak = r.iter().cloned().fold(0.0f32, f32::max);
    let threshold = (peak * RELATIVE_THRESHOLD).max(ABSOLUTE_THRESHOLD);

    let mut candidates: Vec<(f32, usize)> = Vec::new();
    for y in BORDER..h - BORDER {
        for x in BORDER..w - BORDER {
            let i = y * w + x;
            if r[i] > threshold && is_local_max(&r, w, h, x, y) {
                candidates.push((r[i], i));
            }
        }
    }
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

    let quota = max_keypoints.div_ceil(GRID * GRID).max(1);
    let cell_of = |i: usize| ((i / w) * GRID / h) * GRID + (i % w) * GRID / w;
    let mut per_cell = [0usize; GRID * GRID];
    let mut taken = vec![false; candidates.len()];
    let mut chosen = Vec::new();
    for (ci, &(_, i)) in candidates.iter().enumerate() {
        if chosen.len() >= max_keypoints {
            break;
        }
        let c = cell_of(i);
        if per_cell[c] < quota {
            per_cell[c] += 1;
            taken[ci] = true;
            chosen.push(ci);
        }
    }
    for ci in 0..candidates.len() {
        if chosen.len() >= max_keypoints {
            break;
        }
        if !taken[ci] {
            chosen.push(ci);
        }
    }
    chosen.sort_unstable();

    let mut out = Vec::with_capacity(chosen.len());
    for ci in chosen {
        let (resp, i) = candidates[ci];
        let (x, y) = (i % w, i / w);
        let ox = parabolic_offset(r[i - 1], resp, r[i + 1]);
        let oy = parabolic_offset(r[i - w], resp, r[i + w]);
        let position = Vec2::new(x as f64 + ox, y as f64 + oy);
        if let Some(descriptor) = describe(img, &position) {
            out.push(Keypoint {
                position,
                response: resp as f64,
                descriptor,
            });
        }
    }
    Ok(out)
}

fn descriptor_matrix(kps: &[Keypoint]) -> DMatrix<f32> {
    DMatrix::from_fn(kps.len(), DESCRIPTOR_LEN, |r, c| kps[r].descriptor[c])
}

/// Mutual nearest neighbours passing the ratio test; `a` is the query side.
///
/// Confidence is `1 - d1/d2`. Returned pairs follow the order of `a`.
pub fn match_descriptors(a: &[Keypoint], b: &[Keypoint], ratio: f64) -> MatchSet {
    assert!(ratio > 0.0 && ratio <= 1.0, "ratio must be in (0, 1]");
    let mut set = MatchSet::default();
    if a.is_empty() || b.is_empty() {
        return set;
    }
    let dots = descriptor_matrix(a) * descriptor_matrix(b).transpose();
    let dist = |i: usize, j: usize| (2.0 - 2.0 * dots[(i, j)] as f64).max(0.0).sqrt();

    let mut best_for_b = vec![(f64::INFINITY, usize::MAX); b.len()];
    let mut best_for_a = Vec::with_capacity(a.len());
    for i in 0..a.len() {
        let (mut d1, mut j1, mut d2) = (f64::INFINITY, usize::MAX, f64::INFINITY);
        for j in 0..b.len() {
            let d = dist(i, j);
            if d < d1 {
                d2 = d1;
                d1 = d;
                j1 = j;
            } else if d < d2 {
                d2 = d;
            }
            if d < best_for_b[j].0 {
                best_for_b[j] = (d, i);
            }
        }
        best_for_a.push((d1, j1, d2));
    }
    for (i, &(d1, j, d2)) in best_for_a.iter().enumerate() {
        if best_for_b[j].1 != i {
            continue;
        }
        let observed = if d2.is_infinite() {
            0.0
        } else if d2 > 0.0 {
            d1 / d2
        } else {
            continue;
        };
        if observed < ratio {
            set.pairs.push(MatchPair {
                query: a[i].position,
                render: b[j].position,
                confidence: 1.0 - observed,
            });
        }
    }
    set
}
