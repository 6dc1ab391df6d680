//! The hierarchical segment transformer and its fixed-patch baseline.
//!
//! Segment tokens are pooled superpixel features plus a learned embedding of
//! each segment's centroid. A class token is prepended and carried through
//! every stage; it never takes part in pooling. After each stage except the
//! last, segment tokens are graph-pooled to the next stage's count, and the
//! assignments are recorded so pixel-level segmentations can be recovered at
//! every stage.

use std::sync::Arc;

use ndarray::{Array2, ArrayView3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::error::{HcastError, Result};
use crate::exec::Execution;
use crate::losses::{total_loss, LossBreakdown, LossConfig};
use crate::pool::{cluster_tokens, pooling_matrix};
use crate::superpixel::{extract_superpixels, pixel_patch, pool_patch_features, SuperpixelMap};
use crate::tape::{Grads, Mat, Tape, Var};
use crate::taxonomy::{LabelPath, TaxonomyTree, TreePathTarget};

/// Which stage's class token feeds which head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    /// Finest level reads the earliest mapped stage.
    FineToCoarse,
    /// Coarsest level reads the earliest mapped stage.
    CoarseToFine,
    /// Every head reads the concatenation of all mapped stages.
    Merged,
}

impl HeadMode {
    pub const ALL: [HeadMode; 3] = [HeadMode::FineToCoarse, HeadMode::CoarseToFine, HeadMode::Merged];

    pub fn name(self) -> &'static str {
        match self {
            HeadMode::FineToCoarse => "fine_to_coarse",
            HeadMode::CoarseToFine => "coarse_to_fine",
            HeadMode::Merged => "merged",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Architecture {
    /// Superpixel tokens with graph pooling between stages.
    #[default]
    #[serde(rename = "hcast")]
    HCast,
    #[serde(rename = "hier_vit")]
    /// Fixed patch grid, no pooling; heads tap late blocks.
    HierVit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    /// Hidden width of each MLP as a multiple of `embed_dim`.
    pub mlp_ratio: usize,
    pub stage_blocks: Vec<usize>,
    /// Segment-token count per stage; the first entry is the superpixel count.
    pub stage_tokens: Vec<usize>,
    /// Entry `l` is the 1-based stage whose class token feeds level `l + 1`
    /// (coarse first). Empty means "last stages, finest level earliest".
    pub level_to_stage: Vec<usize>,
    pub head_mode: HeadMode,
    /// Side of the color window behind each pixel feature.
    pub pixel_patch: usize,
    /// Patch side of the fixed-grid baseline.
    pub baseline_patch: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            embed_dim: 64,
            num_heads: 4,
            mlp_ratio: 2,
            stage_blocks: vec![2, 2, 2],
            stage_tokens: vec![64, 16, 4],
            level_to_stage: Vec::new(),
            head_mode: HeadMode::FineToCoarse,
            pixel_patch: 4,
            baseline_patch: 8,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn num_stages(&self) -> usize {
        self.stage_blocks.len()
    }

    pub fn depth(&self) -> usize {
        self.stage_blocks.iter().sum()
    }

    /// `level_to_stage` with the empty default resolved for `levels` levels.
    pub fn resolved_level_to_stage(&self, levels: usize) -> Vec<usize> {
        if self.level_to_stage.is_empty() {
            let s = self.num_stages();
            (0..levels).map(|l| s.saturating_sub(l)).collect()
        } else {
            self.level_to_stage.clone()
        }
    }

    /// Checks everything except the level-to-stage mapping.
    pub fn validate_backbone(&self) -> Result<()> {
        let err = |m: String| Err(HcastError::Config(m));
        if self.stage_blocks.is_empty() || self.stage_blocks.len() != self.stage_tokens.len() {
            return err("stage_blocks and stage_tokens must be non-empty and of equal length".into());
        }
        if self.stage_blocks.contains(&0) {
            return err("every stage needs at least one block".into());
        }
        if self.stage_tokens.windows(2).any(|w| w[1] >= w[0]) || self.stage_tokens.contains(&0) {
            return err(format!("stage_tokens must be positive and strictly decreasing: {:?}", self.stage_tokens));
        }
        if self.embed_dim == 0 || self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return err(format!(
                "embed_dim {} must be a positive multiple of num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.mlp_ratio == 0 || self.pixel_patch == 0 || self.baseline_patch == 0 {
            return err("mlp_ratio, pixel_patch and baseline_patch must be positive".into());
        }
        if self.image_size < crate::data::MIN_IMAGE_SIZE {
            return err(format!("image_size {} is below the minimum", self.image_size));
        }
        if self.stage_tokens[0] > self.image_size * self.image_size {
            return err("more superpixels than pixels".into());
        }
        Ok(())
    }

    pub fn validate(&self, levels: usize) -> Result<()> {
        self.validate_backbone()?;
        let err = |m: String| Err(HcastError::Config(m));
        let map = self.resolved_level_to_stage(levels);
        if map.len() != levels {
            return err(format!("level_to_stage maps {} levels, taxonomy has {levels}", map.len()));
        }
        let stages = self.num_stages();
        if let Some(bad) = map.iter().find(|&&s| s == 0 || s > stages) {
            return err(format!("level_to_stage references stage {bad}, model has {stages}"));
        }
        if map[0] != stages || map.windows(2).any(|w| w[1] >= w[0]) {
            return err(format!(
                "level_to_stage {map:?} must send level 1 to the last stage and finer levels to strictly earlier stages"
            ));
        }
        Ok(())
    }
}

/// Per-level head outputs, coarse level first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelLogits {
    pub levels: Vec<Vec<f64>>,
}

impl LevelLogits {
    /// Per-level argmax; ties go to the lowest index.
    pub fn argmax_path(&self) -> LabelPath {
        LabelPath(
            self.levels
                .iter()
                .map(|z| {
                    z.iter()
                        .enumerate()
                        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                        .0
                })
                .collect(),
        )
    }

    pub fn is_finite(&self) -> bool {
        self.levels.iter().flatten().all(|v| v.is_finite())
    }
}

/// Nested segment assignments produced by one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentHierarchy {
    pub initial_map: SuperpixelMap,
    /// `stage_assignments[s][i]` is the stage-`s+1` segment holding stage-`s`
    /// segment `i`.
    pub stage_assignments: Vec<Vec<usize>>,
}

impl SegmentHierarchy {
    pub fn num_stages(&self) -> usize {
        self.stage_assignments.len() + 1
    }

    /// Segment count at `stage` (0 = superpixels).
    pub fn segment_count(&self, stage: usize) -> usize {
        if stage == 0 {
            self.initial_map.k
        } else {
            self.stage_assignments[stage - 1].iter().copied().max().map_or(0, |m| m + 1)
        }
    }

    /// Pixel-level segment ids at `stage`.
    pub fn project_segments(&self, stage: usize) -> Result<Array2<usize>> {
        if stage >= self.num_stages() {
            return Err(HcastError::Parameter(format!(
                "stage {stage} out of range (hierarchy has {} stages)",
                self.num_stages()
            )));
        }
        let mut lookup: Vec<usize> = (0..self.initial_map.k).collect();
        for assignment in &self.stage_assignments[..stage] {
            lookup.iter_mut().for_each(|id| *id = assignment[*id]);
        }
        Ok(self.initial_map.assignment.mapv(|id| lookup[id]))
    }
}

/// Everything a forward pass reports.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: LevelLogits,
    pub hierarchy: Option<SegmentHierarchy>,
    /// Class token at the end of every stage (H-CAST) or at every head tap
    /// (baseline).
    pub class_tokens: Vec<Vec<f32>>,
}

/// Tokenized image, independent of the learned parameters.
#[derive(Debug, Clone)]
pub struct PreparedInput {
    /// Raw per-token features (pooled patch vectors).
    pub features: Mat,
    /// Token centers scaled to `[-1, 1]`.
    pub positions: Mat,
    /// Pixel-to-token map for the first stage.
    pub regions: Array2<usize>,
    pub superpixels: Option<SuperpixelMap>,
}

/// Trainable tensors with stable ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub tensors: Vec<Mat>,
    pub names: Vec<String>,
}

impl Params {
    fn add(&mut self, name: String, value: Mat) -> usize {
        self.tensors.push(value);
        self.names.push(name);
        self.tensors.len() - 1
    }

    pub fn zeros_like(&self) -> Vec<Mat> {
        self.tensors.iter().map(|t| Mat::zeros(t.raw_dim())).collect()
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Mat::len).sum()
    }
}

#[derive(Debug, Clone)]
struct BlockIds {
    ln1: (usize, usize),
    qkv: (usize, usize),
    proj: (usize, usize),
    ln2: (usize, usize),
    fc1: (usize, usize),
    fc2: (usize, usize),
}

#[derive(Debug, Clone)]
struct HeadIds {
    ln: (usize, usize),
    linear: (usize, usize),
}

#[derive(Debug, Clone)]
struct Layout {
    embed: (usize, usize),
    pos: (usize, usize),
    cls: usize,
    blocks: Vec<BlockIds>,
    heads: Vec<HeadIds>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub architecture: Architecture,
    pub params: Params,
    level_sizes: Vec<usize>,
    layout: Layout,
    /// Distinct tap points (block counts), ascending.
    taps: Vec<usize>,
    /// Per level, indices into `taps` feeding its head.
    head_inputs: Vec<Vec<usize>>,
}

fn derive_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// 1-based block after which the baseline reads the class token for `rank`
/// (1 = the level read last): `floor(depth · (1 − 0.25·(rank − 1)))`, at
/// least 1. Depth 12 gives 12, 9, 6; depth 6 gives 6, 4.
pub fn baseline_tap(depth: usize, rank: usize) -> usize {
    let frac = 1.0 - 0.25 * (rank as f64 - 1.0);
    ((depth as f64 * frac).floor() as usize).max(1)
}

impl Model {
    /// H-CAST with one linear head per level.
    pub fn new(config: ModelConfig, tree: &TaxonomyTree) -> Result<Self> {
        Self::build(config, tree, Architecture::HCast)
    }

    /// Fixed-patch baseline: no superpixels, no pooling; all blocks run on
    /// the patch grid and heads tap proportionally spaced late blocks.
    pub fn hier_vit(config: ModelConfig, tree: &TaxonomyTree) -> Result<Self> {
        Self::build(config, tree, Architecture::HierVit)
    }

    pub fn build(config: ModelConfig, tree: &TaxonomyTree, architecture: Architecture) -> Result<Self> {
        let levels = tree.num_levels();
        match architecture {
            Architecture::HCast => config.validate(levels)?,
            Architecture::HierVit => config.validate_backbone()?,
        }
        if architecture == Architecture::HierVit && !config.image_size.is_multiple_of(config.baseline_patch) {
            return Err(HcastError::Config("image_size must be a multiple of baseline_patch".into()));
        }
        let map = config.resolved_level_to_stage(levels);

        // Tap points (in blocks) per level under fine_to_coarse, coarse first.
        let f2c: Vec<usize> = match architecture {
            Architecture::HCast => {
                let cum: Vec<usize> = config
                    .stage_blocks
                    .iter()
                    .scan(0, |acc, &b| {
                        *acc += b;
                        Some(*acc)
                    })
                    .collect();
                map.iter().map(|&s| cum[s - 1]).collect()
            }
            Architecture::HierVit => (0..levels).map(|l| baseline_tap(config.depth(), l + 1)).collect(),
        };
        let per_level: Vec<usize> = match config.head_mode {
            HeadMode::FineToCoarse | HeadMode::Merged => f2c.clone(),
            HeadMode::CoarseToFine => f2c.iter().rev().copied().collect(),
        };
        let mut taps = f2c.clone();
        taps.sort_unstable();
        taps.dedup();
        let head_inputs: Vec<Vec<usize>> = match config.head_mode {
            HeadMode::Merged => vec![(0..taps.len()).collect(); levels],
            _ => per_level.iter().map(|t| vec![taps.binary_search(t).unwrap()]).collect(),
        };

        let d = config.embed_dim;
        let feature_dim = match architecture {
            Architecture::HCast => config.pixel_patch * config.pixel_patch * 3,
            Architecture::HierVit => config.baseline_patch * config.baseline_patch * 3,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0f32, 0.02).unwrap();
        let mut params = Params { tensors: Vec::new(), names: Vec::new() };
        let mut weight = |p: &mut Params, name: String, r: usize, c: usize| {
            p.add(name, Mat::from_shape_fn((r, c), |_| normal.sample(&mut rng)))
        };
        let zeros = |p: &mut Params, name: String, c: usize| p.add(name, Mat::zeros((1, c)));
        let ones = |p: &mut Params, name: String, c: usize| p.add(name, Mat::ones((1, c)));

        let embed = (weight(&mut params, "embed.w".into(), feature_dim, d), zeros(&mut params, "embed.b".into(), d));
        let pos = (weight(&mut params, "pos.w".into(), 2, d), zeros(&mut params, "pos.b".into(), d));
        let cls = weight(&mut params, "cls".into(), 1, d);
        let hidden = d * config.mlp_ratio;
        let blocks = (0..config.depth())
            .map(|i| BlockIds {
                ln1: (
                    ones(&mut params, format!("block{i}.ln1.g"), d),
                    zeros(&mut params, format!("block{i}.ln1.b"), d),
                ),
                qkv: (
                    weight(&mut params, format!("block{i}.qkv.w"), d, 3 * d),
                    zeros(&mut params, format!("block{i}.qkv.b"), 3 * d),
                ),
                proj: (
                    weight(&mut params, format!("block{i}.proj.w"), d, d),
                    zeros(&mut params, format!("block{i}.proj.b"), d),
                ),
                ln2: (
                    ones(&mut params, format!("block{i}.ln2.g"), d),
                    zeros(&mut params, format!("block{i}.ln2.b"), d),
                ),
                fc1: (
                    weight(&mut params, format!("block{i}.fc1.w"), d, hidden),
                    zeros(&mut params, format!("block{i}.fc1.b"), hidden),
                ),
                fc2: (
                    weight(&mut params, format!("block{i}.fc2.w"), hidden, d),
                    zeros(&mut params, format!("block{i}.fc2.b"), d),
                ),
            })
            .collect();
        let heads = tree
            .level_sizes()
            .iter()
            .zip(&head_inputs)
            .enumerate()
            .map(|(l, (&n, inputs))| {
                let width = d * inputs.len();
                HeadIds {
                    ln: (
                        ones(&mut params, format!("head{l}.ln.g"), width),
                        zeros(&mut params, format!("head{l}.ln.b"), width),
                    ),
                    linear: (
                        weight(&mut params, format!("head{l}.w"), width, n),
                        zeros(&mut params, format!("head{l}.b"), n),
                    ),
                }
            })
            .collect();

        Ok(Model {
            config,
            architecture,
            params,
            level_sizes: tree.level_sizes().to_vec(),
            layout: Layout { embed, pos, cls, blocks, heads },
            taps,
            head_inputs,
        })
    }

    pub fn level_sizes(&self) -> &[usize] {
        &self.level_sizes
    }

    /// 1-based block counts after which each level's head reads class tokens.
    pub fn head_taps(&self) -> Vec<Vec<usize>> {
        self.head_inputs.iter().map(|ins| ins.iter().map(|&i| self.taps[i]).collect()).collect()
    }

    /// Seed for the graph pooling that follows `stage` (0-based).
    pub fn stage_seed(&self, stage: usize) -> u64 {
        derive_seed(self.config.seed, stage as u64 + 1)
    }

    /// Tokenizes an image for this architecture.
    pub fn prepare(&self, image: &Image) -> Result<PreparedInput> {
        let (h, w, _) = image.dim();
        let size = self.config.image_size;
        if h != size || w != size {
            return Err(HcastError::Shape(format!("image is {h}x{w}, model expects {size}x{size}")));
        }
        let view: ArrayView3<f32> = image.view();
        let input = match self.architecture {
            Architecture::HCast => {
                let map = extract_superpixels(view, self.config.stage_tokens[0])?;
                let features = pool_patch_features(view, &map, self.config.pixel_patch).mapv(|v| 2.0 * v - 1.0);
                let positions = Mat::from_shape_fn((map.k, 2), |(i, j)| {
                    let c = &map.centroids[i];
                    let v = if j == 0 { c.row } else { c.col };
                    2.0 * (v + 0.5) / size as f32 - 1.0
                });
                PreparedInput { features, positions, regions: map.assignment.clone(), superpixels: Some(map) }
            }
            Architecture::HierVit => {
                let p = self.config.baseline_patch;
                let g = size / p;
                let dim = p * p * 3;
                let mut features = Mat::zeros((g * g, dim));
                let mut positions = Mat::zeros((g * g, 2));
                let mut buf = vec![0.0; dim];
                for gy in 0..g {
                    for gx in 0..g {
                        let t = gy * g + gx;
                        // Top-left anchored window: pixel_patch centers on r + p/2.
                        pixel_patch(view, gy * p + p / 2, gx * p + p / 2, p, &mut buf);
                        features.row_mut(t).iter_mut().zip(&buf).for_each(|(f, &v)| *f = 2.0 * v - 1.0);
                        positions[[t, 0]] = 2.0 * (gy as f32 + 0.5) / g as f32 - 1.0;
                        positions[[t, 1]] = 2.0 * (gx as f32 + 0.5) / g as f32 - 1.0;
                    }
                }
                let regions = Array2::from_shape_fn((size, size), |(r, c)| (r / p) * g + c / p);
                PreparedInput { features, positions, regions, superpixels: None }
            }
        };
        Ok(input)
    }

    fn block<'p>(&'p self, tape: &mut Tape<'p>, z: Var, ids: &BlockIds) -> Var {
        let p = &self.params.tensors;
        let d = self.config.embed_dim;
        let heads = self.config.num_heads;
        let dh = d / heads;
        let (g1, b1) = (tape.param(ids.ln1.0, &p[ids.ln1.0]), tape.param(ids.ln1.1, &p[ids.ln1.1]));
        let h = tape.layer_norm(z, g1, b1);
        let (wq, bq) = (tape.param(ids.qkv.0, &p[ids.qkv.0]), tape.param(ids.qkv.1, &p[ids.qkv.1]));
        let qkv = tape.linear(h, wq, bq);
        let scale = 1.0 / (dh as f32).sqrt();
        let outs: Vec<Var> = (0..heads)
            .map(|i| {
                let q = tape.slice_cols(qkv, i * dh, (i + 1) * dh);
                let k = tape.slice_cols(qkv, d + i * dh, d + (i + 1) * dh);
                let v = tape.slice_cols(qkv, 2 * d + i * dh, 2 * d + (i + 1) * dh);
                let scores = tape.matmul_nt(q, k);
                let scores = tape.scale(scores, scale);
                let attn = tape.softmax_rows(scores);
                tape.matmul(attn, v)
            })
            .collect();
        let o = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs) };
        let (wp, bp) = (tape.param(ids.proj.0, &p[ids.proj.0]), tape.param(ids.proj.1, &p[ids.proj.1]));
        let o = tape.linear(o, wp, bp);
        let z = tape.add(z, o);
        let (g2, b2) = (tape.param(ids.ln2.0, &p[ids.ln2.0]), tape.param(ids.ln2.1, &p[ids.ln2.1]));
        let h = tape.layer_norm(z, g2, b2);
        let (w1, c1) = (tape.param(ids.fc1.0, &p[ids.fc1.0]), tape.param(ids.fc1.1, &p[ids.fc1.1]));
        let m = tape.linear(h, w1, c1);
        let m = tape.gelu(m);
        let (w2, c2) = (tape.param(ids.fc2.0, &p[ids.fc2.0]), tape.param(ids.fc2.1, &p[ids.fc2.1]));
        let m = tape.linear(m, w2, c2);
        tape.add(z, m)
    }

    /// Runs the network on a tape.
    pub(crate) fn trace<'p>(&'p self, input: &PreparedInput) -> Result<Trace<'p>> {
        let p = &self.params.tensors;
        let lay = &self.layout;
        let mut tape = Tape::new();

        let feats = tape.input(input.features.clone());
        let (ew, eb) = (tape.param(lay.embed.0, &p[lay.embed.0]), tape.param(lay.embed.1, &p[lay.embed.1]));
        let x = tape.linear(feats, ew, eb);
        let pos = tape.input(input.positions.clone());
        let (pw, pb) = (tape.param(lay.pos.0, &p[lay.pos.0]), tape.param(lay.pos.1, &p[lay.pos.1]));
        let pe = tape.linear(pos, pw, pb);
        let x = tape.add(x, pe);
        let cls = tape.param(lay.cls, &p[lay.cls]);
        let mut z = tape.concat_rows(&[cls, x]);

        let mut assignments = Vec::new();
        let mut tap_cls = Vec::with_capacity(self.taps.len());
        let mut tap_seg_inputs = Vec::with_capacity(self.taps.len());
        let mut tap_region_stage = Vec::with_capacity(self.taps.len());
        let mut stage_cls = Vec::new();

        let stage_bounds: Vec<(usize, usize)> = match self.architecture {
            Architecture::HCast => {
                let mut start = 0;
                self.config
                    .stage_blocks
                    .iter()
                    .map(|&b| {
                        let r = (start, start + b);
                        start += b;
                        r
                    })
                    .collect()
            }
            Architecture::HierVit => vec![(0, self.config.depth())],
        };
        let num_stages = stage_bounds.len();
        for (stage, &(start, end)) in stage_bounds.iter().enumerate() {
            for b in start..end {
                let tapped = self.taps.binary_search(&(b + 1)).is_ok();
                let mut seg_in = None;
                if tapped {
                    // Rebuild the block input from its slices so gradients reach the segment rows.
                    let tokens = tape.value(z).nrows();
                    let (cls_in, seg) = (tape.slice_rows(z, 0, 1), tape.slice_rows(z, 1, tokens));
                    z = tape.concat_rows(&[cls_in, seg]);
                    seg_in = Some(seg);
                }
                z = self.block(&mut tape, z, &lay.blocks[b]);
                if let Some(seg) = seg_in {
                    tap_cls.push(tape.slice_rows(z, 0, 1));
                    tap_seg_inputs.push(seg);
                    tap_region_stage.push(stage);
                }
            }
            if tape.value(z).iter().any(|v| !v.is_finite()) {
                return Err(HcastError::Numeric(format!("stage {}", stage + 1)));
            }
            let c = tape.slice_rows(z, 0, 1);
            stage_cls.push(c);
            if stage + 1 < num_stages {
                let tokens = tape.value(z).nrows();
                let seg = tape.slice_rows(z, 1, tokens);
                let k = tokens - 1;
                let target = self.config.stage_tokens[stage + 1].min(k);
                let assignment = if target < k {
                    cluster_tokens(tape.value(seg).view(), target, self.stage_seed(stage))?
                } else {
                    (0..k).collect()
                };
                let pooled = tape.const_left(Arc::new(pooling_matrix(&assignment, target)), seg);
                assignments.push(assignment);
                z = tape.concat_rows(&[c, pooled]);
            }
        }

        let mut logits = Vec::with_capacity(self.level_sizes.len());
        for (l, inputs) in self.head_inputs.iter().enumerate() {
            let parts: Vec<Var> = inputs.iter().map(|&i| tap_cls[i]).collect();
            let h = if parts.len() == 1 { parts[0] } else { tape.concat_cols(&parts) };
            let ids = &lay.heads[l];
            let (g, b) = (tape.param(ids.ln.0, &p[ids.ln.0]), tape.param(ids.ln.1, &p[ids.ln.1]));
            let h = tape.layer_norm(h, g, b);
            let (w, bb) = (tape.param(ids.linear.0, &p[ids.linear.0]), tape.param(ids.linear.1, &p[ids.linear.1]));
            logits.push(tape.linear(h, w, bb));
        }
        let level_logits =
            LevelLogits { levels: logits.iter().map(|&v| tape.value(v).iter().map(|&x| x as f64).collect()).collect() };
        if !level_logits.is_finite() {
            return Err(HcastError::Numeric("classification heads".into()));
        }
        let hierarchy = input
            .superpixels
            .as_ref()
            .map(|m| SegmentHierarchy { initial_map: m.clone(), stage_assignments: assignments });
        let class_tokens = match self.architecture {
            Architecture::HCast => stage_cls.iter().map(|&v| tape.value(v).iter().copied().collect()).collect(),
            Architecture::HierVit => tap_cls.iter().map(|&v| tape.value(v).iter().copied().collect()).collect(),
        };
        let tap_of_level = self.head_inputs.clone();
        Ok(Trace {
            tape,
            logits,
            output: ForwardOutput { logits: level_logits, hierarchy, class_tokens },
            tap_seg_inputs,
            tap_region_stage,
            tap_of_level,
            regions: input.regions.clone(),
        })
    }

    pub fn forward_prepared(&self, input: &PreparedInput) -> Result<ForwardOutput> {
        Ok(self.trace(input)?.output)
    }

    /// Tokenizes and runs one image.
    pub fn forward(&self, image: &Image) -> Result<ForwardOutput> {
        self.forward_prepared(&self.prepare(image)?)
    }

    /// Independent forward passes over a batch, in input order.
    pub fn forward_batch(&self, images: &[Image], exec: Execution) -> Vec<Result<ForwardOutput>> {
        exec.map(images, |img| self.forward(img))
    }

    /// Combined loss and parameter gradients for one sample.
    pub fn loss_and_grad(
        &self,
        input: &PreparedInput,
        path: &LabelPath,
        target: &TreePathTarget,
        loss: &LossConfig,
        tree: &TaxonomyTree,
    ) -> Result<(LossBreakdown, Vec<Mat>)> {
        let trace = self.trace(input)?;
        let breakdown = total_loss(&trace.output.logits, path, target, loss, tree)?;
        let seeds: Vec<(Var, Mat)> = trace
            .logits
            .iter()
            .zip(&breakdown.grad)
            .map(|(&v, g)| (v, Mat::from_shape_fn((1, g.len()), |(_, j)| g[j] as f32)))
            .collect();
        let grads = trace.tape.backward(&seeds);
        let mut out = self.params.zeros_like();
        grads.accumulate_params(&mut out);
        Ok((breakdown, out))
    }
}

/// A forward pass kept on its tape for backpropagation.
pub(crate) struct Trace<'p> {
    pub tape: Tape<'p>,
    pub logits: Vec<Var>,
    pub output: ForwardOutput,
    /// Segment tokens entering the last block before each tap.
    pub tap_seg_inputs: Vec<Var>,
    /// Stage index whose segmentation the tap's tokens live in.
    pub tap_region_stage: Vec<usize>,
    pub tap_of_level: Vec<Vec<usize>>,
    pub regions: Array2<usize>,
}

impl Trace<'_> {
    pub fn backward_from_logit(&self, level: usize, class: usize) -> Grads {
        let width = self.tape.value(self.logits[level]).ncols();
        let mut seed = Mat::zeros((1, width));
        seed[[0, class]] = 1.0;
        self.tape.backward(&[(self.logits[level], seed)])
    }

    /// Pixel-to-token map for the tokens at tap `tap`.
    pub fn tap_regions(&self, tap: usize) -> Result<Array2<usize>> {
        match &self.output.hierarchy {
            Some(h) => h.project_segments(self.tap_region_stage[tap]),
            None => Ok(self.regions.clone()),
        }
    }
}
