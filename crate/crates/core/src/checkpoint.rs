//! Model checkpoints: a directory holding `meta.json` (architecture, model
//! kind, sample counts, seed, format version, config hash, and the HMM
//! topology/priors) plus one raw little-endian f32 tensor file per named
//! parameter. Save -> load -> save reproduces the directory byte for byte.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::acoustic::{AcousticModel, ModelKind};
use crate::bnn::BnnPosterior;
use crate::error::{Error, Result};
use crate::hmm::HmmSystem;
use crate::nn::Mlp;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    format_version: u32,
    model_kind: ModelKind,
    dims: Vec<usize>,
    samples: Option<usize>,
    drop_prob: Option<f64>,
    ensemble_size: Option<usize>,
    seed: u64,
    config_hash: String,
    hmm: HmmSystem,
    parameters: Vec<TensorMeta>,
}

pub struct Checkpoint {
    pub model: AcousticModel,
    pub sys: HmmSystem,
    pub seed: u64,
    pub config_hash: String,
}

fn mlp_tensors(prefix: &str, mlp: &Mlp) -> Vec<(String, Vec<usize>, Vec<f64>)> {
    let mut out = Vec::new();
    for (i, l) in mlp.layers.iter().enumerate() {
        out.push((
            format!("{prefix}layer{i}.w"),
            vec![l.w.nrows(), l.w.ncols()],
            l.w.iter().cloned().collect(),
        ));
        out.push((format!("{prefix}layer{i}.b"), vec![l.b.len()], l.b.to_vec()));
    }
    out
}

fn bnn_tensors(posterior: &BnnPosterior) -> Vec<(String, Vec<usize>, Vec<f64>)> {
    let mut out = Vec::new();
    for (i, l) in posterior.layers.iter().enumerate() {
        for (suffix, data, shape) in [
            ("w_mu", l.w_mu.iter().cloned().collect::<Vec<f64>>(), vec![l.w_mu.nrows(), l.w_mu.ncols()]),
            ("w_rho", l.w_rho.iter().cloned().collect(), vec![l.w_rho.nrows(), l.w_rho.ncols()]),
            ("b_mu", l.b_mu.to_vec(), vec![l.b_mu.len()]),
            ("b_rho", l.b_rho.to_vec(), vec![l.b_rho.len()]),
        ] {
            out.push((format!("layer{i}.{suffix}"), shape, data));
        }
    }
    out
}

fn named_tensors(model: &AcousticModel) -> Vec<(String, Vec<usize>, Vec<f64>)> {
    match model {
        AcousticModel::Fnn(m) => mlp_tensors("", m),
        AcousticModel::Dropout { mlp, .. } => mlp_tensors("", mlp),
        AcousticModel::Ensemble(members) => members
            .iter()
            .enumerate()
            .flat_map(|(k, m)| mlp_tensors(&format!("member{k}."), m))
            .collect(),
        AcousticModel::Bnn { posterior, .. } => bnn_tensors(posterior),
    }
}

fn write_tensor(path: &Path, data: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for &v in data {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_tensor(path: &Path, expect_len: usize) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expect_len * 4 {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            detail: format!("tensor file has {} bytes, expected {}", bytes.len(), expect_len * 4),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect())
}

pub fn save_checkpoint(
    dir: &Path,
    model: &AcousticModel,
    sys: &HmmSystem,
    seed: u64,
    config_hash: &str,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tensors = named_tensors(model);
    let meta = Meta {
        format_version: FORMAT_VERSION,
        model_kind: model.kind(),
        dims: model.dims(),
        samples: model.num_samples(),
        drop_prob: match model {
            AcousticModel::Dropout { drop_prob, .. } => Some(*drop_prob),
            _ => None,
        },
        ensemble_size: match model {
            AcousticModel::Ensemble(m) => Some(m.len()),
            _ => None,
        },
        seed,
        config_hash: config_hash.to_string(),
        hmm: sys.clone(),
        parameters: tensors
            .iter()
            .map(|(name, shape, _)| TensorMeta { name: name.clone(), shape: shape.clone() })
            .collect(),
    };
    let json = serde_json::to_string_pretty(&meta)
        .map_err(|e| Error::Other(format!("meta serialization: {e}")))?;
    fs::write(dir.join("meta.json"), json).map_err(|e| Error::io(dir.join("meta.json"), e))?;
    for (name, _, data) in &tensors {
        write_tensor(&dir.join(format!("{name}.f32")), data)?;
    }
    Ok(())
}

fn mlp_from_tensors(
    dir: &Path,
    prefix: &str,
    dims: &[usize],
    meta: &Meta,
) -> Result<Mlp> {
    let mut mlp = Mlp::zeros(dims);
    for (i, l) in mlp.layers.iter_mut().enumerate() {
        let w_name = format!("{prefix}layer{i}.w");
        let b_name = format!("{prefix}layer{i}.b");
        let w_shape = tensor_shape(meta, dir, &w_name)?;
        if w_shape != [l.w.nrows(), l.w.ncols()] {
            return Err(Error::Checkpoint {
                path: dir.to_path_buf(),
                detail: format!("{w_name} shape {w_shape:?} does not match dims {dims:?}"),
            });
        }
        let w = read_tensor(&dir.join(format!("{w_name}.f32")), l.w.len())?;
        l.w = Array2::from_shape_vec((l.w.nrows(), l.w.ncols()), w).unwrap();
        let b = read_tensor(&dir.join(format!("{b_name}.f32")), l.b.len())?;
        l.b = Array1::from_vec(b);
    }
    Ok(mlp)
}

fn tensor_shape(meta: &Meta, dir: &Path, name: &str) -> Result<Vec<usize>> {
    meta.parameters
        .iter()
        .find(|t| t.name == name)
        .map(|t| t.shape.clone())
        .ok_or_else(|| Error::Checkpoint {
            path: dir.to_path_buf(),
            detail: format!("parameter {name} missing from meta.json"),
        })
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let meta_path = dir.join("meta.json");
    let raw = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: Meta = serde_json::from_str(&raw).map_err(|e| Error::Checkpoint {
        path: meta_path.clone(),
        detail: format!("meta parse: {e}"),
    })?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint {
            path: meta_path,
            detail: format!("format version {} (supported: {FORMAT_VERSION})", meta.format_version),
        });
    }

    let model = match meta.model_kind {
        ModelKind::Fnn => AcousticModel::Fnn(mlp_from_tensors(dir, "", &meta.dims, &meta)?),
        ModelKind::Dropout => AcousticModel::Dropout {
            mlp: mlp_from_tensors(dir, "", &meta.dims, &meta)?,
            drop_prob: meta.drop_prob.ok_or_else(|| Error::Checkpoint {
                path: dir.to_path_buf(),
                detail: "dropout checkpoint missing drop_prob".to_string(),
            })?,
            samples: meta.samples.unwrap_or(100),
        },
        ModelKind::Ensemble => {
            let k = meta.ensemble_size.ok_or_else(|| Error::Checkpoint {
                path: dir.to_path_buf(),
                detail: "ensemble checkpoint missing ensemble_size".to_string(),
            })?;
            let members = (0..k)
                .map(|m| mlp_from_tensors(dir, &format!("member{m}."), &meta.dims, &meta))
                .collect::<Result<Vec<_>>>()?;
            AcousticModel::Ensemble(members)
        }
        ModelKind::Bnn => {
            let mut posterior = BnnPosterior::init(&meta.dims, 1.0, 0);
            for (i, l) in posterior.layers.iter_mut().enumerate() {
                let (rows, cols) = (l.w_mu.nrows(), l.w_mu.ncols());
                let w_mu = read_tensor(&dir.join(format!("layer{i}.w_mu.f32")), rows * cols)?;
                let w_rho = read_tensor(&dir.join(format!("layer{i}.w_rho.f32")), rows * cols)?;
                l.w_mu = Array2::from_shape_vec((rows, cols), w_mu).unwrap();
                l.w_rho = Array2::from_shape_vec((rows, cols), w_rho).unwrap();
                let n = l.b_mu.len();
                l.b_mu = Array1::from_vec(read_tensor(&dir.join(format!("layer{i}.b_mu.f32")), n)?);
                l.b_rho = Array1::from_vec(read_tensor(&dir.join(format!("layer{i}.b_rho.f32")), n)?);
            }
            AcousticModel::Bnn { posterior, samples: meta.samples.unwrap_or(5) }
        }
    };

    Ok(Checkpoint { model, sys: meta.hmm, seed: meta.seed, config_hash: meta.config_hash })
}

/// All file paths a checkpoint directory must contain.
pub fn checkpoint_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let meta_path = dir.join("meta.json");
    let raw = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: Meta = serde_json::from_str(&raw)
        .map_err(|e| Error::Checkpoint { path: meta_path.clone(), detail: e.to_string() })?;
    let mut files = vec![meta_path];
    files.extend(meta.parameters.iter().map(|t| dir.join(format!("{}.f32", t.name))));
    Ok(files)
}
