//! SLIC-style superpixels and per-superpixel feature pooling.
//!
//! Clustering runs k-means over `(λ·row, λ·col, r, g, b)` from a regular grid
//! of seeds for a fixed number of iterations, then a connectivity pass keeps
//! each id's largest 4-connected component and merges every orphaned
//! component into the adjacent superpixel with the closest mean color.

use std::collections::VecDeque;
use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::{Array2, ArrayView3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{HcastError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlicParams {
    /// Weight of a one-grid-step displacement relative to a unit color
    /// distance.
    pub compactness: f32,
    pub iterations: usize,
}

impl Default for SlicParams {
    fn default() -> Self {
        SlicParams { compactness: 0.5, iterations: 10 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Centroid {
    pub row: f32,
    pub col: f32,
    pub color: [f32; 3],
    pub pixels: usize,
}

/// Pixel-to-superpixel assignment with dense ids `0..k`.
#[derive(Debug, Clone, PartialEq)]
pub struct SuperpixelMap {
    pub assignment: Array2<usize>,
    pub k: usize,
    pub centroids: Vec<Centroid>,
}

impl SuperpixelMap {
    pub fn height(&self) -> usize {
        self.assignment.nrows()
    }

    pub fn width(&self) -> usize {
        self.assignment.ncols()
    }

    /// Builds a map from a raw assignment, compacting ids in order of first
    /// raster appearance and recomputing centroids from `image`.
    pub fn from_assignment(image: ArrayView3<f32>, raw: &Array2<usize>) -> Result<Self> {
        let (h, w, _) = image.dim();
        if raw.dim() != (h, w) {
            return Err(HcastError::Shape(format!("assignment {:?} vs image {h}x{w}", raw.dim())));
        }
        let max = raw.iter().copied().max().unwrap_or(0);
        let mut remap = vec![usize::MAX; max + 1];
        let mut next = 0;
        let assignment = raw.mapv(|id| {
            if remap[id] == usize::MAX {
                remap[id] = next;
                next += 1;
            }
            remap[id]
        });
        let centroids = centroids(image, &assignment, next);
        Ok(SuperpixelMap { assignment, k: next, centroids })
    }
}

fn centroids(image: ArrayView3<f32>, assignment: &Array2<usize>, k: usize) -> Vec<Centroid> {
    let mut acc = vec![[0.0f64; 6]; k];
    for ((r, c), &id) in assignment.indexed_iter() {
        let a = &mut acc[id];
        a[0] += r as f64;
        a[1] += c as f64;
        for ch in 0..3 {
            a[2 + ch] += image[[r, c, ch]] as f64;
        }
        a[5] += 1.0;
    }
    acc.iter()
        .map(|a| {
            let n = a[5].max(1.0);
            Centroid {
                row: (a[0] / n) as f32,
                col: (a[1] / n) as f32,
                color: [(a[2] / n) as f32, (a[3] / n) as f32, (a[4] / n) as f32],
                pixels: a[5] as usize,
            }
        })
        .collect()
}

/// Grid shape `(rows, cols)` with `rows * cols <= k`.
fn seed_grid(h: usize, w: usize, k: usize) -> (usize, usize) {
    let ny = ((k as f64 * h as f64 / w as f64).sqrt().round() as usize).clamp(1, h);
    let nx = (k / ny).clamp(1, w);
    (ny, nx)
}

pub fn extract_superpixels(image: ArrayView3<f32>, k: usize) -> Result<SuperpixelMap> {
    extract_superpixels_with(image, k, SlicParams::default())
}

pub fn extract_superpixels_with(image: ArrayView3<f32>, k: usize, params: SlicParams) -> Result<SuperpixelMap> {
    let (h, w, ch) = image.dim();
    if ch != 3 {
        return Err(HcastError::Shape(format!("expected 3 color channels, got {ch}")));
    }
    if k == 0 || k > h * w {
        return Err(HcastError::Parameter(format!("superpixel count {k} not in [1, {}]", h * w)));
    }
    if image.iter().any(|v| !v.is_finite()) {
        return Err(HcastError::Parameter("image contains non-finite values".into()));
    }

    let (ny, nx) = seed_grid(h, w, k);
    let step = ((h * w) as f32 / (ny * nx) as f32).sqrt();
    let lambda = params.compactness / step;

    // center = [λ·row, λ·col, r, g, b]
    let mut centers: Vec<[f32; 5]> = Vec::with_capacity(ny * nx);
    for i in 0..ny {
        for j in 0..nx {
            let r = (((i as f32 + 0.5) * h as f32 / ny as f32) as usize).min(h - 1);
            let c = (((j as f32 + 0.5) * w as f32 / nx as f32) as usize).min(w - 1);
            centers.push([lambda * r as f32, lambda * c as f32, image[[r, c, 0]], image[[r, c, 1]], image[[r, c, 2]]]);
        }
    }

    let mut labels = Array2::<usize>::zeros((h, w));
    for _ in 0..params.iterations.max(1) {
        for r in 0..h {
            for c in 0..w {
                let p = [lambda * r as f32, lambda * c as f32, image[[r, c, 0]], image[[r, c, 1]], image[[r, c, 2]]];
                let mut best = 0;
                let mut best_d = f32::INFINITY;
                for (id, ctr) in centers.iter().enumerate() {
                    let d: f32 = p.iter().zip(ctr).map(|(a, b)| (a - b) * (a - b)).sum();
                    if d < best_d {
                        best_d = d;
                        best = id;
                    }
                }
                labels[[r, c]] = best;
            }
        }
        let mut acc = vec![[0.0f64; 6]; centers.len()];
        for ((r, c), &id) in labels.indexed_iter() {
            let a = &mut acc[id];
            a[0] += (lambda * r as f32) as f64;
            a[1] += (lambda * c as f32) as f64;
            for k in 0..3 {
                a[2 + k] += image[[r, c, k]] as f64;
            }
            a[5] += 1.0;
        }
        for (ctr, a) in centers.iter_mut().zip(&acc) {
            if a[5] > 0.0 {
                for d in 0..5 {
                    ctr[d] = (a[d] / a[5]) as f32;
                }
            }
        }
    }

    enforce_connectivity(image, &mut labels);
    SuperpixelMap::from_assignment(image, &labels)
}

const NEIGHBORS: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];

fn neighbors(h: usize, w: usize, r: usize, c: usize) -> impl Iterator<Item = (usize, usize)> {
    NEIGHBORS.iter().filter_map(move |&(dr, dc)| {
        let nr = r as isize + dr;
        let nc = c as isize + dc;
        (nr >= 0 && nc >= 0 && (nr as usize) < h && (nc as usize) < w).then_some((nr as usize, nc as usize))
    })
}

/// Labels 4-connected components of equal value. Returns the component map
/// and, per component, its value and size.
fn components(labels: &Array2<usize>) -> (Array2<usize>, Vec<(usize, usize)>) {
    let (h, w) = labels.dim();
    let mut comp = Array2::from_elem((h, w), usize::MAX);
    let mut info = Vec::new();
    let mut queue = VecDeque::new();
    for r0 in 0..h {
        for c0 in 0..w {
            if comp[[r0, c0]] != usize::MAX {
                continue;
            }
            let id = info.len();
            let value = labels[[r0, c0]];
            let mut size = 0;
            comp[[r0, c0]] = id;
            queue.push_back((r0, c0));
            while let Some((r, c)) = queue.pop_front() {
                size += 1;
                for (nr, nc) in neighbors(h, w, r, c) {
                    if comp[[nr, nc]] == usize::MAX && labels[[nr, nc]] == value {
                        comp[[nr, nc]] = id;
                        queue.push_back((nr, nc));
                    }
                }
            }
            info.push((value, size));
        }
    }
    (comp, info)
}

const UNASSIGNED: usize = usize::MAX;

fn enforce_connectivity(image: ArrayView3<f32>, labels: &mut Array2<usize>) {
    let (h, w) = labels.dim();
    let (comp, info) = components(labels);
    let num_labels = info.iter().map(|&(v, _)| v + 1).max().unwrap_or(0);
    let mut main = vec![usize::MAX; num_labels];
    for (cid, &(value, size)) in info.iter().enumerate() {
        if main[value] == usize::MAX || size > info[main[value]].1 {
            main[value] = cid;
        }
    }
    let mut orphans = false;
    for ((r, c), label) in labels.indexed_iter_mut() {
        if main[*label] != comp[[r, c]] {
            *label = UNASSIGNED;
            orphans = true;
        }
    }
    if !orphans {
        return;
    }

    let mut mean = vec![[0.0f64; 4]; num_labels];
    for ((r, c), &l) in labels.indexed_iter() {
        if l != UNASSIGNED {
            for k in 0..3 {
                mean[l][k] += image[[r, c, k]] as f64;
            }
            mean[l][3] += 1.0;
        }
    }
    for m in &mut mean {
        let n = m[3].max(1.0);
        for v in m.iter_mut().take(3) {
            *v /= n;
        }
    }

    // Maximal unassigned regions only border assigned pixels.
    let snapshot = labels.clone();
    let (orphan_comp, orphan_info) = components(&snapshot);
    let mut members: Vec<Vec<(usize, usize)>> = vec![Vec::new(); orphan_info.len()];
    for ((r, c), &cid) in orphan_comp.indexed_iter() {
        if orphan_info[cid].0 == UNASSIGNED {
            members[cid].push((r, c));
        }
    }
    for pixels in members.iter().filter(|m| !m.is_empty()) {
        let mut color = [0.0f64; 3];
        for &(r, c) in pixels {
            for k in 0..3 {
                color[k] += image[[r, c, k]] as f64;
            }
        }
        for v in &mut color {
            *v /= pixels.len() as f64;
        }
        let mut best = UNASSIGNED;
        let mut best_d = f64::INFINITY;
        for &(r, c) in pixels {
            for (nr, nc) in neighbors(h, w, r, c) {
                let l = snapshot[[nr, nc]];
                if l == UNASSIGNED {
                    continue;
                }
                let d: f64 = (0..3).map(|k| (color[k] - mean[l][k]).powi(2)).sum();
                if d < best_d || (d == best_d && l < best) {
                    best_d = d;
                    best = l;
                }
            }
        }
        for &(r, c) in pixels {
            labels[[r, c]] = best;
        }
    }
}

/// Mean feature vector per superpixel, in id order.
pub fn pool_tokens(features: ArrayView3<f32>, map: &SuperpixelMap) -> Result<Array2<f32>> {
    let (h, w, d) = features.dim();
    if (h, w) != map.assignment.dim() {
        return Err(HcastError::Shape(format!("feature grid {h}x{w} vs superpixel map {:?}", map.assignment.dim())));
    }
    let mut tokens = Array2::<f32>::zeros((map.k, d));
    let mut counts = vec![0usize; map.k];
    for ((r, c), &id) in map.assignment.indexed_iter() {
        let mut row = tokens.row_mut(id);
        row += &features.slice(ndarray::s![r, c, ..]);
        counts[id] += 1;
    }
    for (mut row, &n) in tokens.rows_mut().into_iter().zip(&counts) {
        row /= n.max(1) as f32;
    }
    Ok(tokens)
}

/// Per-pixel raw patch vector: the colors of the `patch×patch` window whose
/// top-left corner is at `(r - patch/2, c - patch/2)`, clamped at borders,
/// row-major with interleaved channels. Length `patch·patch·3`.
pub fn pixel_patch(image: ArrayView3<f32>, r: usize, c: usize, patch: usize, out: &mut [f32]) {
    let (h, w, _) = image.dim();
    let half = (patch / 2) as isize;
    let mut at = 0;
    for dy in 0..patch as isize {
        let rr = (r as isize + dy - half).clamp(0, h as isize - 1) as usize;
        for dx in 0..patch as isize {
            let cc = (c as isize + dx - half).clamp(0, w as isize - 1) as usize;
            for ch in 0..3 {
                out[at] = image[[rr, cc, ch]];
                at += 1;
            }
        }
    }
}

/// Mean raw patch vector per superpixel. Because patch embedding is affine,
/// embedding these means equals mean-pooling per-pixel embeddings.
pub fn pool_patch_features(image: ArrayView3<f32>, map: &SuperpixelMap, patch: usize) -> Array2<f32> {
    let dim = patch * patch * 3;
    let mut tokens = Array2::<f32>::zeros((map.k, dim));
    let mut counts = vec![0usize; map.k];
    let mut buf = vec![0.0f32; dim];
    for ((r, c), &id) in map.assignment.indexed_iter() {
        pixel_patch(image, r, c, patch, &mut buf);
        for (t, &v) in tokens.row_mut(id).iter_mut().zip(&buf) {
            *t += v;
        }
        counts[id] += 1;
    }
    for (mut row, &n) in tokens.rows_mut().into_iter().zip(&counts) {
        row /= n.max(1) as f32;
    }
    tokens
}

/// Colors each segment with a random color blended over the image and draws
/// white boundaries.
pub fn render_overlay(image: ArrayView3<f32>, segments: &Array2<usize>, seed: u64) -> RgbImage {
    let (h, w, _) = image.dim();
    let count = segments.iter().copied().max().map_or(0, |m| m + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let palette: Vec<[f32; 3]> = (0..count).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
    let mut out = RgbImage::new(w as u32, h as u32);
    for r in 0..h {
        for c in 0..w {
            let id = segments[[r, c]];
            let boundary = (r + 1 < h && segments[[r + 1, c]] != id) || (c + 1 < w && segments[[r, c + 1]] != id);
            let px = if boundary {
                [255, 255, 255]
            } else {
                let mut px = [0u8; 3];
                for k in 0..3 {
                    let v = 0.5 * image[[r, c, k]] + 0.5 * palette[id][k];
                    px[k] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                }
                px
            };
            out.put_pixel(c as u32, r as u32, Rgb(px));
        }
    }
    out
}

pub fn save_overlay(path: &Path, image: ArrayView3<f32>, segments: &Array2<usize>, seed: u64) -> Result<()> {
    render_overlay(image, segments, seed).save(path)?;
    Ok(())
}

/// True iff every id in `0..k` forms exactly one 4-connected region.
pub fn is_four_connected(assignment: &Array2<usize>) -> bool {
    let (_, info) = components(assignment);
    let mut seen = std::collections::HashSet::new();
    info.iter().all(|&(v, _)| seen.insert(v))
}
