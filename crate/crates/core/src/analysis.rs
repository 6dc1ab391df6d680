//! Diagnostics: per-level Grad-CAM over segment tokens, agreement statistics
//! between coarse and fine heatmaps, and region mIoU of segmentations.

use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{image_to_rgb, Image, Sample};
use crate::error::{HcastError, Result};
use crate::exec::Execution;
use crate::model::{LevelLogits, Model};

/// Significance threshold for heatmap pixels.
pub const DEFAULT_TAU: f64 = 0.001;

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub values: Array2<f64>,
    /// 0-based taxonomy level the map explains.
    pub level: usize,
}

impl Heatmap {
    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }
}

/// Heatmaps for every level from one forward pass, each explaining that
/// level's predicted class. Also returns the logits.
pub fn level_heatmaps(model: &Model, image: &Image) -> Result<(LevelLogits, Vec<Heatmap>)> {
    let input = model.prepare(image)?;
    let trace = model.trace(&input)?;
    let predicted = trace.output.logits.argmax_path();
    let (h, w) = trace.regions.dim();
    let mut maps = Vec::with_capacity(predicted.len());
    for (level, &class) in predicted.labels().iter().enumerate() {
        let grads = trace.backward_from_logit(level, class);
        let mut values = Array2::<f64>::zeros((h, w));
        for &tap in &trace.tap_of_level[level] {
            let var = trace.tap_seg_inputs[tap];
            let Some(g) = grads.get(var) else { continue };
            let acts = trace.tape.value(var);
            let relevance = token_relevance(acts, g);
            let regions = trace.tap_regions(tap)?;
            for (v, &id) in values.iter_mut().zip(regions.iter()) {
                *v += relevance[id];
            }
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(HcastError::Numeric(format!("heatmap for level {}", level + 1)));
        }
        let max = values.iter().copied().fold(0.0, f64::max);
        if max > 0.0 {
            values.mapv_inplace(|v| v / max);
        }
        maps.push(Heatmap { values, level });
    }
    Ok((trace.output.logits, maps))
}

/// Channel weights are the token-averaged gradients; each token's relevance
/// is the ReLU of its weighted activation sum.
fn token_relevance(acts: &Array2<f32>, grads: &Array2<f32>) -> Vec<f64> {
    let k = acts.nrows().max(1) as f64;
    let weights: Vec<f64> = grads.columns().into_iter().map(|c| c.iter().map(|&g| g as f64).sum::<f64>() / k).collect();
    acts.rows()
        .into_iter()
        .map(|row| row.iter().zip(&weights).map(|(&a, w)| a as f64 * w).sum::<f64>().max(0.0))
        .collect()
}

/// Heatmap for one level's predicted class.
pub fn gradcam(model: &Model, image: &Image, level: usize) -> Result<Heatmap> {
    let levels = model.level_sizes().len();
    if level >= levels {
        return Err(HcastError::Parameter(format!("level {level} out of range for {levels} levels")));
    }
    let (_, mut maps) = level_heatmaps(model, image)?;
    Ok(maps.swap_remove(level))
}

fn same_shape(a: &Heatmap, b: &Heatmap) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(HcastError::Shape(format!("heatmaps {:?} and {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

/// Number of pixels significant in both maps, and that count over the number
/// significant in either (0 when neither has any).
pub fn overlap_score(a: &Heatmap, b: &Heatmap, tau: f64) -> Result<(usize, f64)> {
    same_shape(a, b)?;
    let (mut both, mut either) = (0usize, 0usize);
    for (&x, &y) in a.values.iter().zip(b.values.iter()) {
        both += usize::from(x > tau && y > tau);
        either += usize::from(x > tau || y > tau);
    }
    let ratio = if either == 0 { 0.0 } else { both as f64 / either as f64 };
    Ok((both, ratio))
}

/// Pearson correlation over pixels significant in both maps; `None` with
/// fewer than two such pixels or when either side is constant there.
pub fn correlation_score(a: &Heatmap, b: &Heatmap, tau: f64) -> Result<Option<f64>> {
    same_shape(a, b)?;
    let pairs: Vec<(f64, f64)> =
        a.values.iter().zip(b.values.iter()).filter(|(&x, &y)| x > tau && y > tau).map(|(&x, &y)| (x, y)).collect();
    if pairs.len() < 2 {
        return Ok(None);
    }
    let n = pairs.len() as f64;
    let (ma, mb) = pairs.iter().fold((0.0, 0.0), |(sa, sb), (x, y)| (sa + x, sb + y));
    let (ma, mb) = (ma / n, mb / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in &pairs {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Ok(None);
    }
    Ok(Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketStats {
    pub coarse_correct: bool,
    pub fine_correct: bool,
    pub count: usize,
    pub overlap_mean: Option<f64>,
    pub overlap_std: Option<f64>,
    /// Samples whose correlation was defined.
    pub correlation_count: usize,
    pub correlation_mean: Option<f64>,
    pub correlation_std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyStats {
    pub tau: f64,
    pub n: usize,
    /// Ordered (true,true), (true,false), (false,true), (false,false) by
    /// (coarse correct, fine correct).
    pub buckets: Vec<BucketStats>,
}

impl ConsistencyStats {
    pub fn bucket(&self, coarse_correct: bool, fine_correct: bool) -> &BucketStats {
        self.buckets
            .iter()
            .find(|b| b.coarse_correct == coarse_correct && b.fine_correct == fine_correct)
            .expect("all four buckets exist")
    }
}

/// Per-sample agreement between the coarse and fine heatmaps.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleConsistency {
    pub coarse_correct: bool,
    pub fine_correct: bool,
    pub overlap_count: usize,
    pub overlap_ratio: f64,
    pub correlation: Option<f64>,
}

fn mean_std(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    if xs.is_empty() {
        return (None, None);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (Some(m), Some(v.sqrt()))
}

pub fn sample_consistency(model: &Model, sample: &Sample, tau: f64) -> Result<SampleConsistency> {
    let (logits, maps) = level_heatmaps(model, &sample.image)?;
    let pred = logits.argmax_path();
    let (count, ratio) = overlap_score(&maps[0], &maps[1], tau)?;
    Ok(SampleConsistency {
        coarse_correct: pred.labels()[0] == sample.label_path.labels()[0],
        fine_correct: pred.labels()[1] == sample.label_path.labels()[1],
        overlap_count: count,
        overlap_ratio: ratio,
        correlation: correlation_score(&maps[0], &maps[1], tau)?,
    })
}

/// Mean and standard deviation of overlap ratio and correlation, bucketed
/// by whether each level's prediction is correct. Two-level models only.
pub fn consistency_table(model: &Model, samples: &[Sample], tau: f64, exec: Execution) -> Result<ConsistencyStats> {
    if model.level_sizes().len() != 2 {
        return Err(HcastError::Unsupported(format!(
            "consistency analysis needs a 2-level taxonomy, model has {} levels",
            model.level_sizes().len()
        )));
    }
    let per_sample =
        exec.map(samples, |s| sample_consistency(model, s, tau)).into_iter().collect::<Result<Vec<_>>>()?;
    let buckets = [(true, true), (true, false), (false, true), (false, false)]
        .into_iter()
        .map(|(c, f)| {
            let members: Vec<&SampleConsistency> =
                per_sample.iter().filter(|s| s.coarse_correct == c && s.fine_correct == f).collect();
            let overlaps: Vec<f64> = members.iter().map(|s| s.overlap_ratio).collect();
            let corrs: Vec<f64> = members.iter().filter_map(|s| s.correlation).collect();
            let (overlap_mean, overlap_std) = mean_std(&overlaps);
            let (correlation_mean, correlation_std) = mean_std(&corrs);
            BucketStats {
                coarse_correct: c,
                fine_correct: f,
                count: members.len(),
                overlap_mean,
                overlap_std,
                correlation_count: corrs.len(),
                correlation_mean,
                correlation_std,
            }
        })
        .collect();
    Ok(ConsistencyStats { tau, n: samples.len(), buckets })
}

/// Minimum-cost assignment of every row to a distinct column
/// (`rows <= cols`). Returns the column chosen for each row.
pub fn hungarian(cost: &Array2<f64>) -> Vec<usize> {
    let (n, m) = cost.dim();
    assert!(n <= m, "hungarian needs rows <= cols");
    // Potentials formulation with 1-based sentinel column 0.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=m {
        if owner[j] > 0 {
            assignment[owner[j] - 1] = j - 1;
        }
    }
    assignment
}

/// IoU of every ground-truth region (rows, in ascending label order) against
/// every predicted segment (columns, in ascending id order).
pub fn iou_matrix(pred: &Array2<usize>, gt: &Array2<usize>) -> Result<(Array2<f64>, Vec<usize>)> {
    if pred.dim() != gt.dim() {
        return Err(HcastError::Shape(format!("prediction {:?} vs ground truth {:?}", pred.dim(), gt.dim())));
    }
    let mut gt_labels: Vec<usize> = gt.iter().copied().filter(|&g| g > 0).collect();
    gt_labels.sort_unstable();
    gt_labels.dedup();
    if gt_labels.is_empty() {
        return Err(HcastError::EmptyInput("ground truth has no foreground region".into()));
    }
    let mut pred_ids: Vec<usize> = pred.iter().copied().collect();
    pred_ids.sort_unstable();
    pred_ids.dedup();
    let row = |g: usize| gt_labels.binary_search(&g).ok();
    let col = |p: usize| pred_ids.binary_search(&p).unwrap();
    let mut inter = Array2::<usize>::zeros((gt_labels.len(), pred_ids.len()));
    let mut gt_area = vec![0usize; gt_labels.len()];
    let mut pred_area = vec![0usize; pred_ids.len()];
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        let c = col(p);
        pred_area[c] += 1;
        if let Some(r) = row(g) {
            gt_area[r] += 1;
            inter[[r, c]] += 1;
        }
    }
    let iou = Array2::from_shape_fn(inter.dim(), |(r, c)| {
        let i = inter[[r, c]];
        i as f64 / (gt_area[r] + pred_area[c] - i) as f64
    });
    Ok((iou, gt_labels))
}

/// Mean IoU over ground-truth regions (labels > 0) under the one-to-one
/// matching to predicted segments that maximizes total IoU. Unmatched
/// regions score 0.
pub fn region_miou(pred: &Array2<usize>, gt: &Array2<usize>) -> Result<f64> {
    let (iou, labels) = iou_matrix(pred, gt)?;
    let (n, m) = iou.dim();
    let total: f64 = if n <= m {
        let cols = hungarian(&iou.mapv(|v| -v));
        cols.iter().enumerate().map(|(r, &c)| iou[[r, c]]).sum()
    } else {
        let t = iou.t().to_owned();
        let rows = hungarian(&t.mapv(|v| -v));
        let mut per_gt = vec![0.0; n];
        for (c, &r) in rows.iter().enumerate() {
            per_gt[r] = iou[[r, c]];
        }
        per_gt.iter().sum()
    };
    Ok(total / labels.len() as f64)
}

pub fn heatmap_to_gray(map: &Heatmap) -> GrayImage {
    let (h, w) = map.dim();
    GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([(map.values[[y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8])
    })
}

/// The image dimmed to half brightness with the heatmap added in red.
pub fn heatmap_overlay(image: &Image, map: &Heatmap) -> Result<RgbImage> {
    let (h, w, _) = image.dim();
    if (h, w) != map.dim() {
        return Err(HcastError::Shape(format!("image {h}x{w} vs heatmap {:?}", map.dim())));
    }
    let base = image_to_rgb(image);
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let v = map.values[[y as usize, x as usize]].clamp(0.0, 1.0);
        let p = base.get_pixel(x, y).0;
        let mix = |c: u8, add: f64| ((c as f64 * 0.5) + add).round().min(255.0) as u8;
        Rgb([mix(p[0], 127.5 * v), mix(p[1], 0.0), mix(p[2], 0.0)])
    }))
}

pub fn save_heatmap(dir: &Path, stem: &str, image: &Image, map: &Heatmap) -> Result<Vec<std::path::PathBuf>> {
    let gray = dir.join(format!("{stem}_gray.png"));
    let overlay = dir.join(format!("{stem}_overlay.png"));
    heatmap_to_gray(map).save(&gray)?;
    heatmap_overlay(image, map)?.save(&overlay)?;
    Ok(vec![gray, overlay])
}
