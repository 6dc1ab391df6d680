//! Model persistence.
//!
//! A checkpoint is a directory holding two files:
//!
//! * `model.bin`: the magic bytes `HCST`, a little-endian `u32` format
//!   version, a `u32` tensor count, then for each tensor its `u32` rows,
//!   `u32` cols and `rows·cols` little-endian `f32` values in row-major order.
//! * `model.json`: the sidecar, with the fields of [`Sidecar`]:
//!   `format`, `version`, `architecture`, `model_config`, `level_sizes`,
//!   `taxonomy_hash`, `step` and `parameters` (name and shape per tensor, in
//!   blob order).

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{HcastError, Result};
use crate::model::{Architecture, Model, ModelConfig};
use crate::tape::Mat;
use crate::taxonomy::TaxonomyTree;

pub const FORMAT: &str = "hcast-checkpoint";
pub const VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"HCST";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamShape {
    pub name: String,
    pub shape: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub format: String,
    pub version: u32,
    pub architecture: Architecture,
    pub model_config: ModelConfig,
    pub level_sizes: Vec<usize>,
    pub taxonomy_hash: String,
    pub step: u64,
    pub parameters: Vec<ParamShape>,
}

pub fn save_checkpoint(dir: &Path, model: &Model, tree: &TaxonomyTree, step: u64) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| HcastError::io(dir, e))?;
    let mut blob = Vec::with_capacity(12 + model.params.count() * 4);
    blob.extend_from_slice(MAGIC);
    blob.extend_from_slice(&VERSION.to_le_bytes());
    blob.extend_from_slice(&(model.params.tensors.len() as u32).to_le_bytes());
    for t in &model.params.tensors {
        blob.extend_from_slice(&(t.nrows() as u32).to_le_bytes());
        blob.extend_from_slice(&(t.ncols() as u32).to_le_bytes());
        for v in t.iter() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let bin = dir.join("model.bin");
    fs::File::create(&bin).and_then(|mut f| f.write_all(&blob)).map_err(|e| HcastError::io(&bin, e))?;

    let sidecar = Sidecar {
        format: FORMAT.into(),
        version: VERSION,
        architecture: model.architecture,
        model_config: model.config.clone(),
        level_sizes: model.level_sizes().to_vec(),
        taxonomy_hash: tree.content_hash(),
        step,
        parameters: model
            .params
            .names
            .iter()
            .zip(&model.params.tensors)
            .map(|(n, t)| ParamShape { name: n.clone(), shape: [t.nrows(), t.ncols()] })
            .collect(),
    };
    let json = dir.join("model.json");
    fs::write(&json, serde_json::to_string_pretty(&sidecar)?).map_err(|e| HcastError::io(&json, e))?;
    Ok(())
}

pub fn read_sidecar(dir: &Path) -> Result<Sidecar> {
    let json = dir.join("model.json");
    let text = fs::read_to_string(&json).map_err(|e| HcastError::io(&json, e))?;
    let sidecar: Sidecar = serde_json::from_str(&text)?;
    if sidecar.format != FORMAT || sidecar.version != VERSION {
        return Err(HcastError::Format(format!(
            "{}: unsupported checkpoint {} v{}",
            json.display(),
            sidecar.format,
            sidecar.version
        )));
    }
    Ok(sidecar)
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Loads a checkpoint, refusing it if it was trained on another taxonomy.
/// Returns the model and the recorded training step.
pub fn load_checkpoint(dir: &Path, tree: &TaxonomyTree) -> Result<(Model, u64)> {
    let sidecar = read_sidecar(dir)?;
    if sidecar.taxonomy_hash != tree.content_hash() {
        return Err(HcastError::Config(format!("checkpoint {} was trained on a different taxonomy", dir.display())));
    }
    let mut model = Model::build(sidecar.model_config.clone(), tree, sidecar.architecture)?;

    let bin = dir.join("model.bin");
    let bytes = fs::read(&bin).map_err(|e| HcastError::io(&bin, e))?;
    let bad = |m: &str| HcastError::Format(format!("{}: {m}", bin.display()));
    let mut r = bytes.as_slice();
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
    if &magic != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = read_u32(&mut r).map_err(|_| bad("truncated header"))?;
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r).map_err(|_| bad("truncated header"))? as usize;
    if count != model.params.tensors.len() {
        return Err(bad(&format!("{count} tensors, model expects {}", model.params.tensors.len())));
    }
    for (i, t) in model.params.tensors.iter_mut().enumerate() {
        let rows = read_u32(&mut r).map_err(|_| bad("truncated"))? as usize;
        let cols = read_u32(&mut r).map_err(|_| bad("truncated"))? as usize;
        if (rows, cols) != t.dim() {
            return Err(bad(&format!("tensor {i} is {rows}x{cols}, expected {:?}", t.dim())));
        }
        let mut values = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(|_| bad("truncated"))?;
            values.push(f32::from_le_bytes(b));
        }
        *t = Mat::from_shape_vec((rows, cols), values).expect("shape checked");
    }
    if !r.is_empty() {
        return Err(bad("trailing bytes"));
    }
    Ok((model, sidecar.step))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tree() -> TaxonomyTree {
        TaxonomyTree::from_parents(vec![2, 4], vec![vec![], vec![0, 0, 1, 1]]).unwrap()
    }

    fn config() -> ModelConfig {
        ModelConfig {
            image_size: 32,
            embed_dim: 8,
            num_heads: 2,
            stage_blocks: vec![1, 1],
            stage_tokens: vec![16, 4],
            seed: 9,
            ..Default::default()
        }
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = Model::new(config(), &tree()).unwrap();
        m.params.tensors[0][[0, 0]] = 1.25;
        save_checkpoint(dir.path(), &m, &tree(), 17).unwrap();
        let (loaded, step) = load_checkpoint(dir.path(), &tree()).unwrap();
        assert_eq!(step, 17);
        assert_eq!(loaded.params, m.params);
        assert_eq!(loaded.config, m.config);
        let side = read_sidecar(dir.path()).unwrap();
        assert_eq!(side.parameters.len(), m.params.tensors.len());
        assert_eq!(side.level_sizes, vec![2, 4]);
    }

    #[test]
    fn taxonomy_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = Model::new(config(), &tree()).unwrap();
        save_checkpoint(dir.path(), &m, &tree(), 0).unwrap();
        let other = TaxonomyTree::from_parents(vec![2, 4], vec![vec![], vec![0, 1, 1, 1]]).unwrap();
        assert!(matches!(load_checkpoint(dir.path(), &other), Err(HcastError::Config(_))));
    }

    #[test]
    fn corrupt_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = Model::new(config(), &tree()).unwrap();
        save_checkpoint(dir.path(), &m, &tree(), 0).unwrap();
        let bin = dir.path().join("model.bin");
        let bytes = fs::read(&bin).unwrap();
        fs::write(&bin, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(dir.path(), &tree()), Err(HcastError::Format(_))));
    }
}
