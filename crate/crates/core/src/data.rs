//! Samples, the synthetic hierarchical-shapes generator, image-folder IO and
//! batching.

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{HcastError, Result};
use crate::taxonomy::{LabelPath, TaxonomyTree};

/// H×W×3 color image with values in `[0, 1]`.
pub type Image = Array3<f32>;

pub const MIN_IMAGE_SIZE: usize = 16;
pub const MAX_LEAVES: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub label_path: LabelPath,
    pub id: String,
    /// Ground-truth region labels (0 = background), when known.
    pub mask: Option<Array2<u16>>,
}

/// Region labels written into synthetic masks.
pub mod region {
    pub const BACKGROUND: u16 = 0;
    pub const TARGET_BODY: u16 = 1;
    pub const TARGET_MARKER: u16 = 2;
    pub const DISTRACTOR_BODY: u16 = 3;
    pub const DISTRACTOR_MARKER: u16 = 4;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_levels: usize,
    pub coarse_classes: usize,
    pub children_per_class: usize,
    /// Only used with three levels.
    pub grandchildren_per_class: usize,
    pub image_size: usize,
    pub samples_per_leaf: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_levels: 2,
            coarse_classes: 4,
            children_per_class: 3,
            grandchildren_per_class: 2,
            image_size: 64,
            samples_per_leaf: 50,
            noise_std: 0.03,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn num_leaves(&self) -> usize {
        let mut n = self.coarse_classes * self.children_per_class;
        if self.num_levels == 3 {
            n *= self.grandchildren_per_class;
        }
        n
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=3).contains(&self.num_levels) {
            return Err(HcastError::Config(format!("num_levels must be 2 or 3, got {}", self.num_levels)));
        }
        if self.coarse_classes < 2 || self.children_per_class < 2 {
            return Err(HcastError::Config("coarse_classes and children_per_class must be >= 2".into()));
        }
        if self.num_levels == 3 && self.grandchildren_per_class < 2 {
            return Err(HcastError::Config("grandchildren_per_class must be >= 2".into()));
        }
        if self.num_leaves() > MAX_LEAVES {
            return Err(HcastError::Config(format!("{} leaves exceeds the limit of {MAX_LEAVES}", self.num_leaves())));
        }
        if self.image_size < MIN_IMAGE_SIZE {
            return Err(HcastError::Config(format!("image_size must be >= {MIN_IMAGE_SIZE}")));
        }
        if self.samples_per_leaf == 0 {
            return Err(HcastError::Config("samples_per_leaf must be >= 1".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(HcastError::Config("noise_std must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// The taxonomy realized by this configuration.
    pub fn taxonomy(&self) -> Result<TaxonomyTree> {
        self.validate()?;
        let c = self.coarse_classes;
        let m = c * self.children_per_class;
        let mid_parents: Vec<usize> = (0..m).map(|i| i / self.children_per_class).collect();
        let coarse_names: Vec<String> = (0..c).map(|i| format!("c{i}")).collect();
        let mid_names: Vec<String> =
            (0..m).map(|i| format!("c{}_f{}", i / self.children_per_class, i % self.children_per_class)).collect();
        if self.num_levels == 2 {
            return TaxonomyTree::from_parents(vec![c, m], vec![vec![], mid_parents])?
                .with_names(vec![coarse_names, mid_names]);
        }
        let g = self.grandchildren_per_class;
        let leaves = m * g;
        let leaf_parents: Vec<usize> = (0..leaves).map(|i| i / g).collect();
        let leaf_names: Vec<String> = (0..leaves).map(|i| format!("{}_g{}", mid_names[i / g], i % g)).collect();
        TaxonomyTree::from_parents(vec![c, m, leaves], vec![vec![], mid_parents, leaf_parents])?.with_names(vec![
            coarse_names,
            mid_names,
            leaf_names,
        ])
    }
}

/// A generated train/test split over one taxonomy.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub tree: TaxonomyTree,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

const SHAPE_FAMILIES: usize = 8;

const MARKER_COLORS: [[f32; 3]; 8] = [
    [0.95, 0.15, 0.15],
    [0.15, 0.85, 0.2],
    [0.2, 0.35, 0.95],
    [0.95, 0.9, 0.15],
    [0.9, 0.2, 0.9],
    [0.15, 0.9, 0.9],
    [0.98, 0.55, 0.1],
    [0.98, 0.98, 0.98],
];

fn hue_color(index: usize, count: usize) -> [f32; 3] {
    if count <= MARKER_COLORS.len() {
        return MARKER_COLORS[index % MARKER_COLORS.len()];
    }
    let h = index as f32 / count as f32 * 6.0;
    let x = 1.0 - ((h % 2.0) - 1.0).abs();
    let (r, g, b) = match h as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [0.1 + 0.85 * r, 0.1 + 0.85 * g, 0.1 + 0.85 * b]
}

fn body_color(family: usize) -> [f32; 3] {
    let tint = (family / SHAPE_FAMILIES) as f32;
    [0.55 + 0.08 * (tint % 3.0), 0.55, 0.55 + 0.08 * ((tint + 1.0) % 3.0)]
}

/// Whether `(dy, dx)` (relative to the center, in units of the half-extent)
/// lies inside the shape of `family`.
fn inside(family: usize, dy: f32, dx: f32) -> bool {
    let (ay, ax) = (dy.abs(), dx.abs());
    match family % SHAPE_FAMILIES {
        0 => dy * dy + dx * dx <= 1.0,
        1 => ay <= 0.85 && ax <= 0.85,
        2 => (-0.9..=0.9).contains(&dy) && ax <= (dy + 0.9) / 1.8,
        3 => (ay <= 0.3 && ax <= 1.0) || (ax <= 0.3 && ay <= 1.0),
        4 => {
            let r2 = dy * dy + dx * dx;
            (0.3..=1.0).contains(&r2)
        }
        5 => ay + ax <= 1.0,
        6 => ay <= 0.45 && ax <= 1.0,
        _ => (ay - ax).abs() <= 0.28 && ay <= 0.95,
    }
}

/// Marker pattern for the finest level of a three-level taxonomy.
fn marker_on(pattern: Option<(usize, usize)>, y: usize, x: usize) -> bool {
    match pattern {
        None => true,
        Some((g, _)) => match g % 4 {
            0 => true,
            1 => (y + x).is_multiple_of(2),
            2 => y.is_multiple_of(2),
            _ => x.is_multiple_of(2),
        },
    }
}

struct Object {
    family: usize,
    marker: [f32; 3],
    pattern: Option<(usize, usize)>,
    cy: f32,
    cx: f32,
    half: f32,
}

fn draw(image: &mut Image, mask: &mut Array2<u16>, obj: &Object, body_id: u16, marker_id: u16) {
    let (h, w, _) = image.dim();
    let color = body_color(obj.family);
    let marker_half = (obj.half * 0.32).max(1.5);
    for y in 0..h {
        for x in 0..w {
            let dy = (y as f32 + 0.5 - obj.cy) / obj.half;
            let dx = (x as f32 + 0.5 - obj.cx) / obj.half;
            if inside(obj.family, dy, dx) {
                for k in 0..3 {
                    image[[y, x, k]] = color[k];
                }
                mask[[y, x]] = body_id;
            }
            let my = (y as f32 + 0.5 - obj.cy).abs();
            let mx = (x as f32 + 0.5 - obj.cx).abs();
            if my <= marker_half && mx <= marker_half && marker_on(obj.pattern, y, x) {
                for k in 0..3 {
                    image[[y, x, k]] = obj.marker[k];
                }
                mask[[y, x]] = marker_id;
            }
        }
    }
}

fn render_sample(config: &SynthConfig, tree: &TaxonomyTree, leaf: usize, index: usize) -> Sample {
    let seed =
        config.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add((leaf as u64) << 32).wrapping_add(index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let path = tree.infer_ancestors(leaf).expect("leaf in range");
    let size = config.image_size;
    let s = size as f32;
    let coarse = path.labels()[0];
    let child = path.labels()[1] % config.children_per_class;
    let pattern = (config.num_levels == 3).then(|| (path.labels()[2] % config.grandchildren_per_class, 0));

    let bg: f32 = rng.random_range(0.1..0.35);
    let mut image = Image::from_elem((size, size, 3), bg);
    let mut mask = Array2::<u16>::zeros((size, size));

    let target_left = rng.random_bool(0.5);
    let jitter = |rng: &mut ChaCha8Rng, lo: f32, hi: f32| rng.random_range(lo..hi);
    let t_half = s * jitter(&mut rng, 0.19, 0.23);
    let d_half = s * jitter(&mut rng, 0.12, 0.15);
    let (t_cx, d_cx) = if target_left { (s * 0.27, s * 0.76) } else { (s * 0.73, s * 0.24) };
    let t_cy = s * jitter(&mut rng, 0.3, 0.7);
    let d_cy = s * jitter(&mut rng, 0.25, 0.75);

    let mut distractor_family = rng.random_range(0..config.coarse_classes - 1);
    if distractor_family >= coarse {
        distractor_family += 1;
    }
    let distractor = Object {
        family: distractor_family,
        marker: hue_color(rng.random_range(0..config.children_per_class), config.children_per_class),
        pattern: pattern.map(|_| (rng.random_range(0..config.grandchildren_per_class), 0)),
        cy: d_cy,
        cx: d_cx + jitter(&mut rng, -0.04, 0.04) * s,
        half: d_half,
    };
    let target = Object {
        family: coarse,
        marker: hue_color(child, config.children_per_class),
        pattern,
        cy: t_cy,
        cx: t_cx + jitter(&mut rng, -0.04, 0.04) * s,
        half: t_half,
    };
    draw(&mut image, &mut mask, &distractor, region::DISTRACTOR_BODY, region::DISTRACTOR_MARKER);
    draw(&mut image, &mut mask, &target, region::TARGET_BODY, region::TARGET_MARKER);

    if config.noise_std > 0.0 {
        let noise = Normal::new(0.0, config.noise_std as f32).expect("valid std");
        image.mapv_inplace(|v| (v + noise.sample(&mut rng)).clamp(0.0, 1.0));
    }
    let id = format!("synth-{}-{index:04}", tree.names(tree.num_levels() - 1)[leaf]);
    Sample { image, label_path: path, id, mask: Some(mask) }
}

/// Generates the synthetic dataset: per leaf, `samples_per_leaf` images split
/// 80/20 into train and test.
pub fn make_synthetic(config: &SynthConfig) -> Result<SynthDataset> {
    let tree = config.taxonomy()?;
    let n = config.samples_per_leaf;
    let n_test = n / 5;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for leaf in 0..tree.num_leaves() {
        for i in 0..n {
            let sample = render_sample(config, &tree, leaf, i);
            if i < n - n_test {
                train.push(sample);
            } else {
                test.push(sample);
            }
        }
    }
    Ok(SynthDataset { tree, train, test })
}

pub fn flip_horizontal(image: &Image) -> Image {
    let mut out = image.clone();
    out.invert_axis(ndarray::Axis(1));
    out
}

pub fn image_from_rgb(img: &RgbImage) -> Image {
    let (w, h) = img.dimensions();
    Image::from_shape_fn((h as usize, w as usize, 3), |(y, x, k)| img.get_pixel(x as u32, y as u32)[k] as f32 / 255.0)
}

pub fn image_to_rgb(image: &Image) -> RgbImage {
    let (h, w, _) = image.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |k| (image[[y as usize, x as usize, k]].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    })
}

/// Bilinear resize to `size × size`; returns the input unchanged when it
/// already has that shape.
pub fn resize_square(image: &Image, size: usize) -> Image {
    let (h, w, _) = image.dim();
    if h == size && w == size {
        return image.clone();
    }
    let rgb = image_to_rgb(image);
    let resized = image::imageops::resize(&rgb, size as u32, size as u32, image::imageops::FilterType::Triangle);
    image_from_rgb(&resized)
}

/// Result of scanning an image folder.
#[derive(Debug, Default)]
pub struct FolderLoad {
    pub samples: Vec<Sample>,
    /// Files that could not be used, with the reason.
    pub errors: Vec<(PathBuf, String)>,
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries: Vec<PathBuf> =
        fs::read_dir(dir).map_err(|e| HcastError::io(dir, e))?.filter_map(|e| e.ok().map(|e| e.path())).collect();
    entries.sort();
    Ok(entries)
}

/// Loads `root/<leaf_label>/<file>.png|jpg`, resolving each leaf directory
/// through the taxonomy. Undecodable files are reported, not fatal.
pub fn load_image_folder(root: &Path, tree: &TaxonomyTree) -> Result<FolderLoad> {
    let mut load = FolderLoad::default();
    for dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let leaf = tree.leaf_index(&name).ok_or_else(|| HcastError::LabelResolution(name.clone()))?;
        let path = tree.infer_ancestors(leaf)?;
        for file in sorted_entries(&dir)? {
            let ext = file.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
            if !matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg")) {
                continue;
            }
            match image::open(&file) {
                Ok(img) => {
                    let image = image_from_rgb(&img.to_rgb8());
                    let (h, w, _) = image.dim();
                    if h < MIN_IMAGE_SIZE || w < MIN_IMAGE_SIZE {
                        load.errors
                            .push((file, format!("image {h}x{w} is smaller than {MIN_IMAGE_SIZE}x{MIN_IMAGE_SIZE}")));
                        continue;
                    }
                    let stem = file.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
                    load.samples.push(Sample {
                        image,
                        label_path: path.clone(),
                        id: format!("{name}/{stem}"),
                        mask: None,
                    });
                }
                Err(e) => load.errors.push((file, e.to_string())),
            }
        }
    }
    if load.samples.is_empty() {
        log::warn!("no images found under {}", root.display());
    }
    Ok(load)
}

/// Writes samples as `root/<leaf_label>/<id>.png`; returns the written paths.
pub fn export_image_folder(samples: &[Sample], tree: &TaxonomyTree, root: &Path) -> Result<Vec<PathBuf>> {
    let leaf_names = tree.names(tree.num_levels() - 1);
    let mut written = Vec::with_capacity(samples.len());
    for sample in samples {
        let dir = root.join(&leaf_names[sample.label_path.leaf()]);
        fs::create_dir_all(&dir).map_err(|e| HcastError::io(&dir, e))?;
        let file = dir.join(format!("{}.png", sample.id.replace('/', "_")));
        image_to_rgb(&sample.image).save(&file)?;
        written.push(file);
    }
    Ok(written)
}

/// Index batches covering `0..n` exactly once. Without a seed the order is
/// the insertion order; the last batch may be short.
pub fn batch_indices(n: usize, batch_size: usize, shuffle_seed: Option<u64>) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Iterates batches of borrowed items.
pub fn batch_iterator<T>(items: &[T], batch_size: usize, shuffle_seed: Option<u64>) -> impl Iterator<Item = Vec<&T>> {
    batch_indices(items.len(), batch_size, shuffle_seed)
        .into_iter()
        .map(move |b| b.into_iter().map(|i| &items[i]).collect())
}
