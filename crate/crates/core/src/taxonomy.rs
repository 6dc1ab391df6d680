//! Label hierarchies, path validation, and tree-path target encoding.
//!
//! Levels are numbered coarse to fine. In code, level index `0` is the
//! coarsest level and `num_levels() - 1` the leaves; class indices are dense
//! per level, assigned in order of first appearance.

use std::collections::HashMap;
use std::io::Read;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HcastError, Result};

/// An L-level label tree.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaxonomyTree {
    level_sizes: Vec<usize>,
    /// `parents[l][c]` is the parent (at level `l - 1`) of class `c` at level `l`.
    /// `parents[0]` is empty.
    parents: Vec<Vec<usize>>,
    names: Vec<Vec<String>>,
}

/// One sample's labels, coarse first.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelPath(pub Vec<usize>);

impl LabelPath {
    pub fn new(labels: Vec<usize>) -> Self {
        LabelPath(labels)
    }

    pub fn labels(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn leaf(&self) -> usize {
        *self.0.last().expect("label path is empty")
    }
}

/// Target distribution over concatenated level blocks, finest level first.
/// Each true label carries mass `1/L`.
#[derive(Debug, Clone, PartialEq)]
pub struct TreePathTarget {
    pub dist: Vec<f64>,
}

impl TaxonomyTree {
    /// Builds a tree from explicit parent maps. `parents[l]` must have
    /// `level_sizes[l]` entries for every `l >= 1`; `parents[0]` is ignored.
    pub fn from_parents(level_sizes: Vec<usize>, mut parents: Vec<Vec<usize>>) -> Result<Self> {
        let names = level_sizes
            .iter()
            .enumerate()
            .map(|(l, &n)| (0..n).map(|c| format!("l{}_{}", l + 1, c)).collect())
            .collect();
        if parents.len() == level_sizes.len() {
            parents[0].clear();
        }
        let tree = TaxonomyTree { level_sizes, parents, names };
        tree.validate()?;
        Ok(tree)
    }

    /// Replaces the generated label names.
    pub fn with_names(mut self, names: Vec<Vec<String>>) -> Result<Self> {
        if names.len() != self.num_levels() || names.iter().zip(&self.level_sizes).any(|(n, &s)| n.len() != s) {
            return Err(HcastError::Shape("name table does not match level sizes".into()));
        }
        self.names = names;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        let levels = self.level_sizes.len();
        if levels < 2 {
            return Err(HcastError::Format(format!("a taxonomy needs at least 2 levels, got {levels}")));
        }
        if self.parents.len() != levels {
            return Err(HcastError::Shape("one parent map per level is required".into()));
        }
        if self.level_sizes.contains(&0) {
            return Err(HcastError::Format("every level needs at least one class".into()));
        }
        for l in 1..levels {
            let map = &self.parents[l];
            if map.len() != self.level_sizes[l] {
                return Err(HcastError::TaxonomyViolation(format!(
                    "parent map at level {} covers {} of {} classes",
                    l + 1,
                    map.len(),
                    self.level_sizes[l]
                )));
            }
            let mut has_child = vec![false; self.level_sizes[l - 1]];
            for &p in map {
                if p >= self.level_sizes[l - 1] {
                    return Err(HcastError::TaxonomyViolation(format!("parent {p} at level {} is out of range", l)));
                }
                has_child[p] = true;
            }
            if let Some(dead) = has_child.iter().position(|&h| !h) {
                return Err(HcastError::TaxonomyViolation(format!("class {dead} at level {} has no children", l)));
            }
        }
        Ok(())
    }

    pub fn num_levels(&self) -> usize {
        self.level_sizes.len()
    }

    pub fn level_sizes(&self) -> &[usize] {
        &self.level_sizes
    }

    pub fn num_leaves(&self) -> usize {
        *self.level_sizes.last().unwrap()
    }

    /// Total number of classes over all levels.
    pub fn total_classes(&self) -> usize {
        self.level_sizes.iter().sum()
    }

    pub fn names(&self, level: usize) -> &[String] {
        &self.names[level]
    }

    /// Parent of `class` at `level` (which must be >= 1).
    pub fn parent(&self, level: usize, class: usize) -> usize {
        self.parents[level][class]
    }

    /// Offset of `level`'s block in the finest-first concatenated layout.
    pub fn block_offset(&self, level: usize) -> usize {
        self.level_sizes[level + 1..].iter().sum()
    }

    fn check_range(&self, path: &LabelPath) -> Result<()> {
        if path.len() != self.num_levels() {
            return Err(HcastError::Shape(format!(
                "path has {} labels, taxonomy has {} levels",
                path.len(),
                self.num_levels()
            )));
        }
        for (level, (&index, &size)) in path.0.iter().zip(&self.level_sizes).enumerate() {
            if index >= size {
                return Err(HcastError::Range { level, index, size });
            }
        }
        Ok(())
    }

    /// True iff every label is the parent of the next finer label.
    pub fn is_valid_path(&self, path: &LabelPath) -> Result<bool> {
        self.check_range(path)?;
        Ok((1..self.num_levels()).all(|l| self.parents[l][path.0[l]] == path.0[l - 1]))
    }

    /// Encodes `path` as the finest-first tree-path distribution. Cross-level
    /// consistency is not checked.
    pub fn encode_tree_path(&self, path: &LabelPath) -> Result<TreePathTarget> {
        self.check_range(path)?;
        let levels = self.num_levels();
        let mass = 1.0 / levels as f64;
        let mut dist = vec![0.0; self.total_classes()];
        for (level, &label) in path.0.iter().enumerate() {
            dist[self.block_offset(level) + label] = mass;
        }
        Ok(TreePathTarget { dist })
    }

    /// The unique valid path ending at leaf `fine_index`.
    pub fn infer_ancestors(&self, fine_index: usize) -> Result<LabelPath> {
        let levels = self.num_levels();
        let size = self.num_leaves();
        if fine_index >= size {
            return Err(HcastError::Range { level: levels - 1, index: fine_index, size });
        }
        let mut labels = vec![0; levels];
        labels[levels - 1] = fine_index;
        for l in (1..levels).rev() {
            labels[l - 1] = self.parents[l][labels[l]];
        }
        Ok(LabelPath(labels))
    }

    /// Ancestor at `level` of leaf `fine_index`.
    pub fn ancestor_of_leaf(&self, fine_index: usize, level: usize) -> usize {
        let mut class = fine_index;
        for l in (level + 1..self.num_levels()).rev() {
            class = self.parents[l][class];
        }
        class
    }

    /// Leaf index by label string.
    pub fn leaf_index(&self, name: &str) -> Option<usize> {
        self.names.last().unwrap().iter().position(|n| n == name)
    }

    /// Serializes the tree in the taxonomy CSV format, one row per leaf.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let header: Vec<String> = (1..=self.num_levels()).map(|l| format!("level_{l}")).collect();
        out.push_str(&header.join(","));
        out.push('\n');
        for leaf in 0..self.num_leaves() {
            let path = self.infer_ancestors(leaf).expect("leaf in range");
            let row: Vec<&str> = path.0.iter().enumerate().map(|(l, &c)| self.names[l][c].as_str()).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    /// Hex SHA-256 of the canonical CSV serialization.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_csv().as_bytes()))
    }
}

/// Parses a taxonomy CSV: a `level_1,...,level_L` header followed by one
/// root-to-leaf path per row. Identical rows are deduplicated.
pub fn load_taxonomy<R: Read>(source: R) -> Result<TaxonomyTree> {
    let mut reader =
        csv::ReaderBuilder::new().has_headers(true).flexible(true).trim(csv::Trim::All).from_reader(source);
    let header = reader.headers().map_err(|e| HcastError::Format(format!("unreadable header: {e}")))?.clone();
    let levels = header.len();
    if levels < 2 {
        return Err(HcastError::Format(format!("header must name at least 2 levels, got {levels}")));
    }

    let mut names: Vec<Vec<String>> = vec![Vec::new(); levels];
    let mut index: Vec<HashMap<String, usize>> = vec![HashMap::new(); levels];
    let mut parents: Vec<Vec<usize>> = vec![Vec::new(); levels];
    let mut rows = 0usize;

    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| HcastError::Format(format!("row {}: {e}", line + 2)))?;
        if record.len() != levels {
            return Err(HcastError::Format(format!("row {} has {} fields, expected {levels}", line + 2, record.len())));
        }
        if record.iter().any(str::is_empty) {
            return Err(HcastError::Format(format!("row {} has an empty label", line + 2)));
        }
        rows += 1;
        let mut parent: Option<usize> = None;
        for (l, label) in record.iter().enumerate() {
            let class = match index[l].get(label) {
                Some(&c) => {
                    if let Some(p) = parent {
                        if parents[l][c] != p {
                            return Err(HcastError::TaxonomyViolation(format!(
                                "label {label:?} at level {} appears under both {:?} and {:?}",
                                l + 1,
                                names[l - 1][parents[l][c]],
                                names[l - 1][p]
                            )));
                        }
                    }
                    c
                }
                None => {
                    let c = names[l].len();
                    names[l].push(label.to_string());
                    index[l].insert(label.to_string(), c);
                    if let Some(p) = parent {
                        parents[l].push(p);
                    }
                    c
                }
            };
            parent = Some(class);
        }
    }
    if rows == 0 {
        return Err(HcastError::Format("taxonomy has no rows".into()));
    }
    let leaves = &names[levels - 1];
    for l in 0..levels - 1 {
        if let Some(dup) = leaves.iter().find(|leaf| index[l].contains_key(leaf.as_str())) {
            return Err(HcastError::Format(format!("leaf label {dup:?} also appears at level {}", l + 1)));
        }
    }
    let level_sizes = names.iter().map(Vec::len).collect();
    let tree = TaxonomyTree { level_sizes, parents, names };
    tree.validate()?;
    Ok(tree)
}
