//! Optimization loop, learning-rate schedule, evaluation and ablations.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::data::{batch_indices, flip_horizontal, Sample, SynthDataset};
use crate::error::{HcastError, Result};
use crate::exec::Execution;
use crate::losses::{LossConfig, LossVariant};
use crate::metrics::{assemble_report, render_table, MetricsReport, PredictionRecord};
use crate::model::{HeadMode, Model, ModelConfig, PreparedInput};
use crate::tape::Mat;
use crate::taxonomy::{TaxonomyTree, TreePathTarget};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_epochs: usize,
    /// Learning rate at the first warmup step.
    pub warmup_lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub loss: LossConfig,
    /// Random horizontal flips of training images.
    pub hflip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 32,
            learning_rate: 1e-3,
            warmup_epochs: 1,
            warmup_lr: 1e-6,
            weight_decay: 0.05,
            seed: 0,
            loss: LossConfig::default(),
            hflip: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(HcastError::Config("epochs must be at least 1".into()));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(HcastError::Config(format!(
                "warmup_epochs {} must be below epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(HcastError::Config("batch_size must be at least 1".into()));
        }
        for (name, v) in
            [("learning_rate", self.learning_rate), ("warmup_lr", self.warmup_lr), ("weight_decay", self.weight_decay)]
        {
            if !v.is_finite() || v < 0.0 {
                return Err(HcastError::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        self.loss.validate()
    }
}

/// Learning rate for optimizer step `step` of `total`: linear from
/// `start` to `peak` over `warmup` steps, then cosine decay reaching 0 at the
/// final step.
pub fn learning_rate_at(step: usize, total: usize, warmup: usize, start: f64, peak: f64) -> f64 {
    if step < warmup {
        return start + (peak - start) * step as f64 / warmup as f64;
    }
    let last = total.saturating_sub(1);
    if last <= warmup {
        return if step >= last && step > 0 { 0.0 } else { peak };
    }
    let t = ((step - warmup) as f64 / (last - warmup) as f64).min(1.0);
    if t >= 1.0 {
        return 0.0;
    }
    0.5 * peak * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Adam with decoupled weight decay. Decay skips single-row tensors
/// (biases, norm scales, the class token).
#[derive(Debug, Clone)]
pub struct AdamW {
    m: Vec<Mat>,
    v: Vec<Mat>,
    t: i32,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(model: &Model, weight_decay: f64) -> Self {
        AdamW { m: model.params.zeros_like(), v: model.params.zeros_like(), t: 0, weight_decay }
    }

    pub fn step(&mut self, params: &mut [Mat], grads: &[Mat], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t);
        let c2 = 1.0 - BETA2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let decay = if p.nrows() > 1 { self.weight_decay } else { 0.0 };
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                let g = g as f64;
                let mm = BETA1 * *m as f64 + (1.0 - BETA1) * g;
                let vv = BETA2 * *v as f64 + (1.0 - BETA2) * g * g;
                *m = mm as f32;
                *v = vv as f32;
                let update = (mm / c1) / ((vv / c2).sqrt() + ADAM_EPS) + decay * *p as f64;
                *p = (*p as f64 - lr * update) as f32;
            });
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub hv: f64,
    /// Auxiliary term (tree-path or ablation variant) before weighting.
    pub tk: f64,
    pub total: f64,
    pub lr_end: f64,
    pub validation: Option<MetricsReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub train_config: TrainConfig,
    pub model_config: ModelConfig,
    pub architecture: crate::model::Architecture,
    pub epochs: Vec<EpochRecord>,
    pub steps: usize,
    pub wall_clock_seconds: f64,
    pub best_epoch: Option<usize>,
    pub final_checkpoint: Option<PathBuf>,
    pub best_checkpoint: Option<PathBuf>,
}

impl RunRecord {
    pub fn final_validation(&self) -> Option<&MetricsReport> {
        self.epochs.last().and_then(|e| e.validation.as_ref())
    }
}

fn check_taxonomy(model: &Model, tree: &TaxonomyTree, samples: &[Sample]) -> Result<()> {
    if model.level_sizes() != tree.level_sizes() {
        return Err(HcastError::Config(format!(
            "model heads {:?} do not match taxonomy {:?}",
            model.level_sizes(),
            tree.level_sizes()
        )));
    }
    if let Some(s) = samples.iter().find(|s| s.label_path.len() != tree.num_levels()) {
        return Err(HcastError::Config(format!("sample {} has {} labels", s.id, s.label_path.len())));
    }
    Ok(())
}

/// Tokenizes every sample once.
pub fn prepare_all(model: &Model, images: &[&crate::data::Image], exec: Execution) -> Result<Vec<PreparedInput>> {
    exec.map(images, |img| model.prepare(img)).into_iter().collect()
}

/// Trains in place. Checkpoints go to `out_dir/checkpoints/{final,best}`
/// when an output directory is given; "best" tracks validation FPA.
pub fn train(
    model: &mut Model,
    tree: &TaxonomyTree,
    train_set: &[Sample],
    validation: Option<&[Sample]>,
    config: &TrainConfig,
    out_dir: Option<&Path>,
    exec: Execution,
) -> Result<RunRecord> {
    config.validate()?;
    check_taxonomy(model, tree, train_set)?;
    if train_set.is_empty() {
        return Err(HcastError::EmptyInput("empty training set".into()));
    }
    let started = Instant::now();
    let originals: Vec<&crate::data::Image> = train_set.iter().map(|s| &s.image).collect();
    let prepared = prepare_all(model, &originals, exec)?;
    let flipped = if config.hflip {
        let imgs: Vec<crate::data::Image> = train_set.iter().map(|s| flip_horizontal(&s.image)).collect();
        Some(prepare_all(model, &imgs.iter().collect::<Vec<_>>(), exec)?)
    } else {
        None
    };
    let targets: Vec<TreePathTarget> =
        train_set.iter().map(|s| tree.encode_tree_path(&s.label_path)).collect::<Result<_>>()?;
    let val_prepared = match validation {
        Some(v) => {
            check_taxonomy(model, tree, v)?;
            Some(prepare_all(model, &v.iter().map(|s| &s.image).collect::<Vec<_>>(), exec)?)
        }
        None => None,
    };

    let per_epoch = train_set.len().div_ceil(config.batch_size);
    let total_steps = per_epoch * config.epochs;
    let warmup = per_epoch * config.warmup_epochs;
    let mut opt = AdamW::new(model, config.weight_decay);
    let mut step = 0usize;
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize)> = None;
    let mut best_checkpoint = None;

    for epoch in 0..config.epochs {
        let order_seed = config.seed.wrapping_mul(0x2545_F491_4F6C_DD1D).wrapping_add(epoch as u64);
        let (mut hv_sum, mut tk_sum, mut total_sum) = (0.0, 0.0, 0.0);
        let mut lr = 0.0;
        for batch in batch_indices(train_set.len(), config.batch_size, Some(order_seed)) {
            let inputs: Vec<(usize, &PreparedInput)> = batch
                .iter()
                .map(|&i| {
                    let flip = flipped.as_ref().filter(|_| {
                        let mut rng = ChaCha8Rng::seed_from_u64(order_seed ^ ((i as u64) << 20));
                        rng.random_bool(0.5)
                    });
                    (i, flip.map_or(&prepared[i], |f| &f[i]))
                })
                .collect();
            let model_ref: &Model = model;
            let results = exec.map(&inputs, |&(i, input)| {
                model_ref.loss_and_grad(input, &train_set[i].label_path, &targets[i], &config.loss, tree)
            });
            let mut grads = model.params.zeros_like();
            let scale = 1.0 / batch.len() as f32;
            for r in results {
                let (breakdown, g) = r.map_err(|e| match e {
                    HcastError::Numeric(_) => HcastError::Divergence { step, loss: f64::NAN },
                    other => other,
                })?;
                if !breakdown.total.is_finite() {
                    return Err(HcastError::Divergence { step, loss: breakdown.total });
                }
                hv_sum += breakdown.hv;
                tk_sum += breakdown.aux;
                total_sum += breakdown.total;
                for (acc, gi) in grads.iter_mut().zip(&g) {
                    acc.scaled_add(scale, gi);
                }
            }
            lr = learning_rate_at(step, total_steps, warmup, config.warmup_lr, config.learning_rate);
            opt.step(&mut model.params.tensors, &grads, lr);
            step += 1;
        }
        let n = train_set.len() as f64;
        let validation_report = match (&val_prepared, validation) {
            (Some(inputs), Some(samples)) => Some(evaluate_prepared(model, tree, samples, inputs, exec)?.0),
            _ => None,
        };
        if let Some(report) = &validation_report {
            if best.is_none_or(|(fpa, _)| report.fpa > fpa) {
                best = Some((report.fpa, epoch));
                if let Some(dir) = out_dir {
                    let path = dir.join("checkpoints").join("best");
                    save_checkpoint(&path, model, tree, step as u64)?;
                    best_checkpoint = Some(path);
                }
            }
        }
        log::info!(
            "epoch {}/{}: loss {:.4} (hv {:.4}, aux {:.4}){}",
            epoch + 1,
            config.epochs,
            total_sum / n,
            hv_sum / n,
            tk_sum / n,
            validation_report.as_ref().map_or(String::new(), |r| format!(", val FPA {:.3}", r.fpa))
        );
        epochs.push(EpochRecord {
            epoch: epoch + 1,
            hv: hv_sum / n,
            tk: tk_sum / n,
            total: total_sum / n,
            lr_end: lr,
            validation: validation_report,
        });
    }

    let final_checkpoint = match out_dir {
        Some(dir) => {
            let path = dir.join("checkpoints").join("final");
            save_checkpoint(&path, model, tree, step as u64)?;
            Some(path)
        }
        None => None,
    };
    Ok(RunRecord {
        train_config: config.clone(),
        model_config: model.config.clone(),
        architecture: model.architecture,
        epochs,
        steps: step,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        best_epoch: best.map(|(_, e)| e + 1),
        final_checkpoint,
        best_checkpoint,
    })
}

fn evaluate_prepared(
    model: &Model,
    tree: &TaxonomyTree,
    samples: &[Sample],
    inputs: &[PreparedInput],
    exec: Execution,
) -> Result<(MetricsReport, Vec<PredictionRecord>)> {
    let outputs = exec.map(inputs, |input| model.forward_prepared(input));
    let records = samples
        .iter()
        .zip(outputs)
        .map(|(s, out)| {
            Ok(PredictionRecord { id: s.id.clone(), predicted: out?.logits.argmax_path(), truth: s.label_path.clone() })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((assemble_report(&records, tree)?, records))
}

/// Argmax predictions for every sample and the resulting report.
pub fn evaluate(
    model: &Model,
    tree: &TaxonomyTree,
    samples: &[Sample],
    exec: Execution,
) -> Result<(MetricsReport, Vec<PredictionRecord>)> {
    check_taxonomy(model, tree, samples)?;
    let inputs = prepare_all(model, &samples.iter().map(|s| &s.image).collect::<Vec<_>>(), exec)?;
    evaluate_prepared(model, tree, samples, &inputs, exec)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationSuite {
    Direction,
    LossVariant,
}

impl std::str::FromStr for AblationSuite {
    type Err = HcastError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direction" => Ok(AblationSuite::Direction),
            "loss_variant" => Ok(AblationSuite::LossVariant),
            other => Err(HcastError::Config(format!(
                "unknown ablation suite {other:?} (expected direction or loss_variant)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationArm {
    pub name: String,
    pub record: Option<RunRecord>,
    pub test: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub suite: AblationSuite,
    pub arms: Vec<AblationArm>,
}

impl AblationTable {
    pub fn render(&self) -> String {
        let mut out = String::new();
        for arm in &self.arms {
            out.push_str(&format!("== {} ==\n{}", arm.name, render_table(&arm.test)));
        }
        out
    }
}

/// Trains one arm per setting of the ablated factor with identical seeds,
/// data order and budget, and scores each on the test split. A zero-epoch
/// budget skips training and scores the initial models.
pub fn run_ablation(
    suite: AblationSuite,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    data: &SynthDataset,
    out_dir: Option<&Path>,
    exec: Execution,
) -> Result<AblationTable> {
    let arms: Vec<(String, ModelConfig, TrainConfig)> = match suite {
        AblationSuite::Direction => HeadMode::ALL
            .iter()
            .map(|&m| {
                (m.name().to_string(), ModelConfig { head_mode: m, ..model_config.clone() }, train_config.clone())
            })
            .collect(),
        AblationSuite::LossVariant => LossVariant::ALL
            .iter()
            .map(|&v| {
                let mut t = train_config.clone();
                t.loss.variant = v;
                (v.name().to_string(), model_config.clone(), t)
            })
            .collect(),
    };
    let mut results = Vec::with_capacity(arms.len());
    for (name, mc, tc) in arms {
        log::info!("ablation arm {name}");
        let mut model = Model::new(mc, &data.tree)?;
        let record = if tc.epochs == 0 {
            None
        } else {
            let dir = out_dir.map(|d| d.join(&name));
            Some(train(&mut model, &data.tree, &data.train, None, &tc, dir.as_deref(), exec)?)
        };
        let (test, _) = evaluate(&model, &data.tree, &data.test, exec)?;
        results.push(AblationArm { name, record, test });
    }
    Ok(AblationTable { suite, arms: results })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic, SynthConfig};

    fn tiny_data() -> SynthDataset {
        make_synthetic(&SynthConfig {
            image_size: 32,
            coarse_classes: 2,
            children_per_class: 2,
            samples_per_leaf: 5,
            ..Default::default()
        })
        .unwrap()
    }

    fn tiny_model(tree: &TaxonomyTree) -> Model {
        let cfg = ModelConfig {
            image_size: 32,
            embed_dim: 16,
            num_heads: 2,
            stage_blocks: vec![1, 1],
            stage_tokens: vec![16, 4],
            ..Default::default()
        };
        Model::new(cfg, tree).unwrap()
    }

    #[test]
    fn schedule_shape() {
        let (total, warmup, start, peak) = (100, 10, 1e-6, 1e-3);
        assert_eq!(learning_rate_at(0, total, warmup, start, peak), start);
        assert!((learning_rate_at(warmup, total, warmup, start, peak) - peak).abs() < 1e-15);
        assert!(learning_rate_at(total - 1, total, warmup, start, peak) <= 1e-8 * peak);
        let lrs: Vec<f64> = (warmup..total).map(|s| learning_rate_at(s, total, warmup, start, peak)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(learning_rate_at(0, 1, 0, start, peak), peak);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { epochs: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { epochs: 2, warmup_epochs: 2, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { learning_rate: f64::NAN, ..Default::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn one_epoch_on_eight_samples() {
        let data = tiny_data();
        let mut model = tiny_model(&data.tree);
        let cfg = TrainConfig { epochs: 1, warmup_epochs: 0, batch_size: 4, ..Default::default() };
        let rec = train(&mut model, &data.tree, &data.train[..8], Some(&data.test), &cfg, None, Execution::default())
            .unwrap();
        assert_eq!(rec.epochs.len(), 1);
        assert_eq!(rec.steps, 2);
        let e = &rec.epochs[0];
        assert!(e.hv.is_finite() && e.tk.is_finite() && e.total.is_finite());
        assert!((e.total - (e.hv + 0.5 * e.tk)).abs() < 1e-9);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let data = tiny_data();
        let mut model = tiny_model(&data.tree);
        let before = model.params.clone();
        let cfg = TrainConfig {
            epochs: 1,
            warmup_epochs: 0,
            batch_size: 4,
            learning_rate: 0.0,
            warmup_lr: 0.0,
            weight_decay: 0.0,
            ..Default::default()
        };
        train(&mut model, &data.tree, &data.train[..8], None, &cfg, None, Execution::default()).unwrap();
        assert_eq!(model.params, before);
    }

    #[test]
    fn taxonomy_mismatch_is_a_config_error() {
        let data = tiny_data();
        let model = tiny_model(&data.tree);
        let other = TaxonomyTree::from_parents(vec![2, 3], vec![vec![], vec![0, 1, 1]]).unwrap();
        assert!(matches!(evaluate(&model, &other, &data.test, Execution::Sequential), Err(HcastError::Config(_))));
    }

    #[test]
    fn suite_names() {
        assert_eq!("direction".parse::<AblationSuite>().unwrap(), AblationSuite::Direction);
        assert!(matches!("depth".parse::<AblationSuite>(), Err(HcastError::Config(_))));
    }

    #[test]
    fn zero_budget_loss_arms_are_identical() {
        let data = tiny_data();
        let mc = tiny_model(&data.tree).config;
        let tc = TrainConfig { epochs: 0, ..Default::default() };
        let table = run_ablation(AblationSuite::LossVariant, &mc, &tc, &data, None, Execution::default()).unwrap();
        assert_eq!(table.arms.len(), 4);
        assert!(table.arms.windows(2).all(|w| w[0].test == w[1].test));
    }
}
