//! Training objectives over per-level logits.
//!
//! Every loss comes with an analytic gradient with respect to the logits,
//! returned in the same per-level layout as the input. The concatenated
//! layout used by the tree-path losses is finest level first, matching
//! [`TreePathTarget`].

use serde::{Deserialize, Serialize};

use crate::error::{HcastError, Result};
use crate::model::LevelLogits;
use crate::taxonomy::{LabelPath, TaxonomyTree, TreePathTarget};

/// Probability clamp for the probability-space BCE of the flat variant.
const PROB_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    /// KL divergence against the tree-path target.
    TkKl,
    /// Element-wise sigmoid BCE against the tree-path target.
    TkBce,
    /// BCE between child-summed fine probabilities and coarse labels.
    FlatConsistency,
    /// Hierarchical cross-entropy only.
    None,
}

impl LossVariant {
    pub const ALL: [LossVariant; 4] =
        [LossVariant::TkKl, LossVariant::TkBce, LossVariant::FlatConsistency, LossVariant::None];

    pub fn name(self) -> &'static str {
        match self {
            LossVariant::TkKl => "tk_kl",
            LossVariant::TkBce => "tk_bce",
            LossVariant::FlatConsistency => "flat_consistency",
            LossVariant::None => "none",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub alpha: f64,
    pub variant: LossVariant,
    pub label_smoothing: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { alpha: 0.5, variant: LossVariant::TkKl, label_smoothing: 0.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(HcastError::Config(format!("alpha must be finite and >= 0, got {}", self.alpha)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(HcastError::Config(format!(
                "label_smoothing must lie in [0, 1), got {}",
                self.label_smoothing
            )));
        }
        Ok(())
    }
}

/// A loss value with its gradient, one vector per level (coarse first).
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Vec<Vec<f64>>,
}

/// Components of the combined objective.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub hv: f64,
    /// The weighted term's unweighted value (zero for [`LossVariant::None`]).
    pub aux: f64,
    pub total: f64,
    pub grad: Vec<Vec<f64>>,
}

fn log_softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    z.iter().map(|&v| v - lse).collect()
}

fn softmax(z: &[f64]) -> Vec<f64> {
    log_softmax(z).into_iter().map(f64::exp).collect()
}

fn check_path(logits: &LevelLogits, path: &LabelPath) -> Result<()> {
    if logits.levels.len() != path.len() {
        return Err(HcastError::Shape(format!("{} logit levels for a {}-level path", logits.levels.len(), path.len())));
    }
    for (level, (z, &y)) in logits.levels.iter().zip(path.labels()).enumerate() {
        if y >= z.len() {
            return Err(HcastError::Range { level, index: y, size: z.len() });
        }
    }
    Ok(())
}

/// Concatenates levels finest first.
fn concat_fine_first(logits: &LevelLogits) -> Vec<f64> {
    logits.levels.iter().rev().flat_map(|z| z.iter().copied()).collect()
}

/// Splits a finest-first vector back into coarse-first levels.
fn split_fine_first(flat: &[f64], logits: &LevelLogits) -> Vec<Vec<f64>> {
    let mut out = vec![Vec::new(); logits.levels.len()];
    let mut at = 0;
    for (l, z) in logits.levels.iter().enumerate().rev() {
        out[l] = flat[at..at + z.len()].to_vec();
        at += z.len();
    }
    out
}

fn check_target(logits: &LevelLogits, target: &TreePathTarget) -> Result<()> {
    let total: usize = logits.levels.iter().map(Vec::len).sum();
    if total != target.dist.len() {
        return Err(HcastError::Shape(format!(
            "concatenated logits have {total} entries, target has {}",
            target.dist.len()
        )));
    }
    Ok(())
}

/// Sum over levels of the cross-entropy of each level's softmax against its
/// true label.
pub fn hv_loss(logits: &LevelLogits, path: &LabelPath) -> Result<f64> {
    Ok(hv_loss_with_grad(logits, path, 0.0)?.value)
}

/// Hierarchical cross-entropy with optional label smoothing `eps`: each
/// level's target is `(1 - eps)·onehot + eps/N_l`.
pub fn hv_loss_with_grad(logits: &LevelLogits, path: &LabelPath, eps: f64) -> Result<LossGrad> {
    check_path(logits, path)?;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(logits.levels.len());
    for (z, &y) in logits.levels.iter().zip(path.labels()) {
        let n = z.len() as f64;
        let logp = log_softmax(z);
        let target = |i: usize| if i == y { 1.0 - eps + eps / n } else { eps / n };
        value -= logp.iter().enumerate().map(|(i, &lp)| target(i) * lp).sum::<f64>();
        grad.push(logp.iter().enumerate().map(|(i, &lp)| lp.exp() - target(i)).collect());
    }
    Ok(LossGrad { value, grad })
}

/// KL(target ‖ softmax(concatenated logits)); zero-mass target entries
/// contribute nothing.
pub fn tk_loss(logits: &LevelLogits, target: &TreePathTarget) -> Result<f64> {
    Ok(tk_loss_with_grad(logits, target)?.value)
}

pub fn tk_loss_with_grad(logits: &LevelLogits, target: &TreePathTarget) -> Result<LossGrad> {
    check_target(logits, target)?;
    let flat = concat_fine_first(logits);
    let logq = log_softmax(&flat);
    let mass: f64 = target.dist.iter().sum();
    let value = target.dist.iter().zip(&logq).filter(|(&y, _)| y > 0.0).map(|(&y, &lq)| y * (y.ln() - lq)).sum();
    let g: Vec<f64> = logq.iter().zip(&target.dist).map(|(&lq, &y)| mass * lq.exp() - y).collect();
    Ok(LossGrad { value, grad: split_fine_first(&g, logits) })
}

/// Mean over all concatenated positions of sigmoid BCE against the tree-path
/// target entries.
pub fn tk_bce_variant(logits: &LevelLogits, target: &TreePathTarget) -> Result<f64> {
    Ok(tk_bce_with_grad(logits, target)?.value)
}

pub fn tk_bce_with_grad(logits: &LevelLogits, target: &TreePathTarget) -> Result<LossGrad> {
    check_target(logits, target)?;
    let flat = concat_fine_first(logits);
    let m = flat.len() as f64;
    let mut value = 0.0;
    let mut g = Vec::with_capacity(flat.len());
    for (&z, &t) in flat.iter().zip(&target.dist) {
        value += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
        let sig = 1.0 / (1.0 + (-z).exp());
        g.push((sig - t) / m);
    }
    Ok(LossGrad { value: value / m, grad: split_fine_first(&g, logits) })
}

/// Scores every coarser level by summing the fine softmax over each class's
/// descendants, then averages the per-class BCE against the one-hot true
/// label; levels are averaged too. Only the finest logits receive gradient.
pub fn flat_consistency_variant(fine_logits: &[f64], tree: &TaxonomyTree, path: &LabelPath) -> Result<f64> {
    Ok(flat_consistency_with_grad(fine_logits, tree, path)?.0)
}

/// Returns the loss and its gradient with respect to the finest logits.
pub fn flat_consistency_with_grad(
    fine_logits: &[f64],
    tree: &TaxonomyTree,
    path: &LabelPath,
) -> Result<(f64, Vec<f64>)> {
    let leaves = tree.num_leaves();
    if fine_logits.len() != leaves {
        return Err(HcastError::Shape(format!("{} fine logits for {leaves} leaves", fine_logits.len())));
    }
    if path.len() != tree.num_levels() {
        return Err(HcastError::Shape("path depth does not match taxonomy".into()));
    }
    let p = softmax(fine_logits);
    let coarse_levels = tree.num_levels() - 1;
    let mut value = 0.0;
    // d loss / d p_f
    let mut dp = vec![0.0; leaves];
    for level in 0..coarse_levels {
        let n = tree.level_sizes()[level];
        let y = path.labels()[level];
        if y >= n {
            return Err(HcastError::Range { level, index: y, size: n });
        }
        let anc: Vec<usize> = (0..leaves).map(|f| tree.ancestor_of_leaf(f, level)).collect();
        let mut score = vec![0.0; n];
        for (f, &a) in anc.iter().enumerate() {
            score[a] += p[f];
        }
        let scale = 1.0 / (n as f64 * coarse_levels as f64);
        let mut ds = vec![0.0; n];
        for c in 0..n {
            let s = score[c].clamp(PROB_EPS, 1.0 - PROB_EPS);
            let t = if c == y { 1.0 } else { 0.0 };
            value -= scale * (t * s.ln() + (1.0 - t) * (1.0 - s).ln());
            ds[c] = scale * (-t / s + (1.0 - t) / (1.0 - s));
        }
        for (f, &a) in anc.iter().enumerate() {
            dp[f] += ds[a];
        }
    }
    let inner: f64 = dp.iter().zip(&p).map(|(g, q)| g * q).sum();
    let grad = p.iter().zip(&dp).map(|(q, g)| q * (g - inner)).collect();
    Ok((value, grad))
}

/// `hv + alpha · variant` with its gradient.
pub fn total_loss(
    logits: &LevelLogits,
    path: &LabelPath,
    target: &TreePathTarget,
    config: &LossConfig,
    tree: &TaxonomyTree,
) -> Result<LossBreakdown> {
    let hv = hv_loss_with_grad(logits, path, config.label_smoothing)?;
    let mut grad = hv.grad;
    let aux = match config.variant {
        LossVariant::None => 0.0,
        LossVariant::TkKl | LossVariant::TkBce => {
            let lg = if config.variant == LossVariant::TkKl {
                tk_loss_with_grad(logits, target)?
            } else {
                tk_bce_with_grad(logits, target)?
            };
            for (g, a) in grad.iter_mut().zip(&lg.grad) {
                for (gi, ai) in g.iter_mut().zip(a) {
                    *gi += config.alpha * ai;
                }
            }
            lg.value
        }
        LossVariant::FlatConsistency => {
            let fine = logits.levels.last().ok_or_else(|| HcastError::Shape("no levels".into()))?;
            let (v, g) = flat_consistency_with_grad(fine, tree, path)?;
            for (gi, ai) in grad.last_mut().unwrap().iter_mut().zip(&g) {
                *gi += config.alpha * ai;
            }
            v
        }
    };
    let total = if config.variant == LossVariant::None { hv.value } else { hv.value + config.alpha * aux };
    Ok(LossBreakdown { hv: hv.value, aux, total, grad })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits(levels: Vec<Vec<f64>>) -> LevelLogits {
        LevelLogits { levels }
    }

    fn tree_2_4() -> TaxonomyTree {
        TaxonomyTree::from_parents(vec![2, 4], vec![vec![], vec![0, 0, 1, 1]]).unwrap()
    }

    #[test]
    fn hv_saturated_uniform_and_degenerate() {
        let path = LabelPath(vec![1, 2]);
        let mut sat = logits(vec![vec![0.0; 2], vec![0.0; 4]]);
        sat.levels[0][1] = 20.0;
        sat.levels[1][2] = 20.0;
        assert!(hv_loss(&sat, &path).unwrap() < 1e-6);

        let uniform = logits(vec![vec![0.3; 2], vec![-1.0; 4]]);
        let expected = 2f64.ln() + 4f64.ln();
        assert!((hv_loss(&uniform, &path).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 2.0794).abs() < 1e-4);

        let one = logits(vec![vec![3.7], vec![-2.0]]);
        assert_eq!(hv_loss(&one, &LabelPath(vec![0, 0])).unwrap(), 0.0);
    }

    #[test]
    fn hv_shape_errors() {
        let l = logits(vec![vec![0.0; 2]]);
        assert!(matches!(hv_loss(&l, &LabelPath(vec![0, 0])), Err(HcastError::Shape(_))));
    }

    #[test]
    fn tk_closed_forms() {
        let tree = TaxonomyTree::from_parents(vec![17, 34], vec![vec![], (0..34).map(|i| i / 2).collect()]).unwrap();
        let path = tree.infer_ancestors(5).unwrap();
        let target = tree.encode_tree_path(&path).unwrap();
        let uniform = logits(vec![vec![0.0; 17], vec![0.0; 34]]);
        let kl = tk_loss(&uniform, &target).unwrap();
        assert!((kl - (51.0f64 / 2.0).ln()).abs() < 1e-9);
        assert!((kl - 3.2387).abs() < 1e-4);

        let mut sharp = uniform.clone();
        sharp.levels[0][path.0[0]] = 30.0;
        sharp.levels[1][path.0[1]] = 30.0;
        assert!(tk_loss(&sharp, &target).unwrap() < 1e-6);
    }

    #[test]
    fn tk_increases_with_wrong_logit() {
        let tree = tree_2_4();
        let target = tree.encode_tree_path(&LabelPath(vec![0, 1])).unwrap();
        let mut l = logits(vec![vec![0.5, -0.2], vec![0.1, 0.4, -0.3, 0.0]]);
        let mut prev = tk_loss(&l, &target).unwrap();
        for _ in 0..10 {
            l.levels[1][3] += 0.5;
            let now = tk_loss(&l, &target).unwrap();
            assert!(now > prev);
            prev = now;
        }
    }

    #[test]
    fn tk_rejects_layout_mismatch() {
        let tree = tree_2_4();
        let target = tree.encode_tree_path(&LabelPath(vec![0, 1])).unwrap();
        let l = logits(vec![vec![0.0; 2], vec![0.0; 3]]);
        assert!(matches!(tk_loss(&l, &target), Err(HcastError::Shape(_))));
    }

    fn binary_entropy(p: f64) -> f64 {
        -(p * p.ln() + (1.0 - p) * (1.0 - p).ln())
    }

    /// Element-wise BCE oracle over probabilities.
    fn bce_oracle(flat: &[f64], target: &[f64]) -> f64 {
        flat.iter()
            .zip(target)
            .map(|(&z, &t)| {
                let s = 1.0 / (1.0 + (-z).exp());
                -(t * s.ln() + (1.0 - t) * (1.0 - s).ln())
            })
            .sum::<f64>()
            / flat.len() as f64
    }

    #[test]
    fn bce_closed_form_and_oracle() {
        let tree = tree_2_4();
        let path = LabelPath(vec![1, 3]);
        let target = tree.encode_tree_path(&path).unwrap();
        let logit_half = (0.5f64 / 0.5).ln(); // logit(1/L) with L = 2
        let mut l = logits(vec![vec![-30.0; 2], vec![-30.0; 4]]);
        l.levels[0][1] = logit_half;
        l.levels[1][3] = logit_half;
        let got = tk_bce_variant(&l, &target).unwrap();
        let eps = 4.0 * (-(30f64.exp()).recip().ln_1p()).abs() / 6.0;
        let closed = 2.0 * binary_entropy(0.5) / 6.0;
        assert!((got - closed).abs() <= eps + 1e-12, "{got} vs {closed}");

        let flat: Vec<f64> = l.levels.iter().rev().flatten().copied().collect();
        assert!((got - bce_oracle(&flat, &target.dist)).abs() < 1e-12);

        let all_neg = logits(vec![vec![-30.0; 2], vec![-30.0; 4]]);
        let flat = vec![-30.0; 6];
        assert!((tk_bce_variant(&all_neg, &target).unwrap() - bce_oracle(&flat, &target.dist)).abs() < 1e-9);
    }

    #[test]
    fn bce_mean_shrinks_with_extra_zero_positions() {
        // Doubling the number of well-classified zero-target positions only
        // changes the mean through the denominator.
        let small = TaxonomyTree::from_parents(vec![2, 4], vec![vec![], vec![0, 0, 1, 1]]).unwrap();
        let big = TaxonomyTree::from_parents(vec![4, 8], vec![vec![], vec![0, 0, 1, 1, 2, 2, 3, 3]]).unwrap();
        let path = LabelPath(vec![0, 0]);
        let build = |n1: usize, n2: usize| {
            let mut l = logits(vec![vec![-30.0; n1], vec![-30.0; n2]]);
            l.levels[0][0] = 0.0;
            l.levels[1][0] = 0.0;
            l
        };
        let a = tk_bce_variant(&build(2, 4), &small.encode_tree_path(&path).unwrap()).unwrap();
        let b = tk_bce_variant(&build(4, 8), &big.encode_tree_path(&path).unwrap()).unwrap();
        let flat_b: Vec<f64> = build(4, 8).levels.iter().rev().flatten().copied().collect();
        assert!((b - bce_oracle(&flat_b, &big.encode_tree_path(&path).unwrap().dist)).abs() < 1e-12);
        assert!(b < a && b > a / 2.0 - 1e-12, "a {a} b {b}");
    }

    #[test]
    fn flat_consistency_cases() {
        let tree = tree_2_4();
        let path = LabelPath(vec![0, 1]);
        let right = [40.0, 40.0, -40.0, -40.0];
        assert!(flat_consistency_variant(&right, &tree, &path).unwrap() < 1e-9);

        let wrong = [-40.0, -40.0, 40.0, 40.0];
        let got = flat_consistency_variant(&wrong, &tree, &path).unwrap();
        // Oracle: scores (~0, ~1) clamped at PROB_EPS, one-hot target (1, 0).
        let s0: f64 = PROB_EPS;
        let s1: f64 = 1.0 - PROB_EPS;
        let oracle = (-(s0.ln()) - (1.0 - s1).ln()) / 2.0;
        assert!((got - oracle).abs() < 1e-6 * oracle);

        // Scores partition the probability mass.
        let p = softmax(&[0.3, -1.0, 2.0, 0.1]);
        let s: f64 = (0..2).map(|c| (0..4).filter(|&f| tree.parent(1, f) == c).map(|f| p[f]).sum::<f64>()).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn total_loss_composition() {
        let tree = tree_2_4();
        let path = LabelPath(vec![1, 2]);
        let target = tree.encode_tree_path(&path).unwrap();
        let l = logits(vec![vec![0.2, -0.7], vec![1.0, 0.0, -0.5, 0.3]]);
        let zero = LossConfig { alpha: 0.0, ..LossConfig::default() };
        assert_eq!(total_loss(&l, &path, &target, &zero, &tree).unwrap().total, hv_loss(&l, &path).unwrap());
        let cfg = LossConfig::default();
        assert_eq!(cfg.alpha, 0.5);
        let b = total_loss(&l, &path, &target, &cfg, &tree).unwrap();
        let expected = hv_loss(&l, &path).unwrap() + 0.5 * tk_loss(&l, &target).unwrap();
        assert!((b.total - expected).abs() < 1e-12);
        let none = LossConfig { variant: LossVariant::None, ..cfg };
        assert_eq!(total_loss(&l, &path, &target, &none, &tree).unwrap().total, hv_loss(&l, &path).unwrap());
    }

    #[test]
    fn shift_invariances() {
        let tree = tree_2_4();
        let path = LabelPath(vec![1, 2]);
        let target = tree.encode_tree_path(&path).unwrap();
        let l = logits(vec![vec![0.2, -0.7], vec![1.0, 0.0, -0.5, 0.3]]);
        let shifted_all = logits(l.levels.iter().map(|z| z.iter().map(|v| v + 3.5).collect()).collect());
        assert!((tk_loss(&l, &target).unwrap() - tk_loss(&shifted_all, &target).unwrap()).abs() < 1e-12);
        let per_level =
            logits(vec![l.levels[0].iter().map(|v| v - 2.0).collect(), l.levels[1].iter().map(|v| v + 9.0).collect()]);
        assert!((hv_loss(&l, &path).unwrap() - hv_loss(&per_level, &path).unwrap()).abs() < 1e-12);
        assert!(tk_loss(&l, &target).unwrap() >= 0.0);
    }

    #[test]
    fn label_smoothing_changes_target() {
        let path = LabelPath(vec![0, 0]);
        let l = logits(vec![vec![5.0, 0.0], vec![5.0, 0.0, 0.0, 0.0]]);
        let plain = hv_loss_with_grad(&l, &path, 0.0).unwrap().value;
        let smooth = hv_loss_with_grad(&l, &path, 0.1).unwrap().value;
        assert!(smooth > plain);
        assert!(LossConfig { label_smoothing: 1.0, ..Default::default() }.validate().is_err());
    }
}
