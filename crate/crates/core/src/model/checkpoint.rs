//! Checkpoint directories: `manifest.json` plus little-endian `params.bin`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParams};
use crate::numkernel::{AdamWConfig, Matrix, OptimizerState, RandomSource};
use crate::{Error, Result};

const FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const PARAMS: &str = "params.bin";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamIndexEntry {
    pub name: String,
    /// Offset in `f64` elements from the start of `params.bin`.
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct OptimizerEntry {
    #[serde(flatten)]
    hyper: AdamWConfig,
    step: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct Manifest {
    format_version: u32,
    config: ModelConfig,
    step: u64,
    optimizer: Option<OptimizerEntry>,
    rng: Option<RandomSource>,
    params: Vec<ParamIndexEntry>,
}

/// Model weights together with everything needed to continue training
/// exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub params: ModelParams,
    /// Adam moments and hyperparameters; absent for analysis-only snapshots.
    pub optimizer: Option<OptimizerState>,
    /// Batch-sampling stream at `step`.
    pub rng: Option<RandomSource>,
}

impl Checkpoint {
    pub fn new(step: u64, params: ModelParams) -> Self {
        Self {
            step,
            params,
            optimizer: None,
            rng: None,
        }
    }
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Writes `ckpt` into directory `dir`, replacing any previous contents.
/// The directory is first assembled under a sibling temporary name and then
/// renamed into place.
pub fn save_checkpoint(ckpt: &Checkpoint, dir: &Path) -> Result<()> {
    let mut index = Vec::new();
    let mut bytes = Vec::new();
    let mut offset = 0;
    let mut push = |name: String, m: &Matrix| {
        index.push(ParamIndexEntry {
            name,
            offset,
            rows: m.rows(),
            cols: m.cols(),
        });
        offset += m.len();
        for x in m.as_slice() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    };
    let tensors = ckpt.params.tensors();
    for (name, m) in &tensors {
        push(name.clone(), m);
    }
    let optimizer = match &ckpt.optimizer {
        Some(opt) => {
            if opt.first_moment.len() != tensors.len() || opt.second_moment.len() != tensors.len() {
                return Err(Error::invalid("optimizer moments do not match the parameters"));
            }
            for ((name, _), m) in tensors.iter().zip(&opt.first_moment) {
                push(format!("adam_m/{name}"), m);
            }
            for ((name, _), m) in tensors.iter().zip(&opt.second_moment) {
                push(format!("adam_v/{name}"), m);
            }
            Some(OptimizerEntry {
                hyper: opt.config,
                step: opt.step,
            })
        }
        None => None,
    };
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: ckpt.params.config.clone(),
        step: ckpt.step,
        optimizer,
        rng: ckpt.rng.clone(),
        params: index,
    };

    let tmp = sibling(dir, ".partial");
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    fs::write(tmp.join(PARAMS), &bytes).map_err(|e| Error::io(tmp.join(PARAMS), e))?;
    let json = serde_json::to_vec_pretty(&manifest)?;
    fs::write(tmp.join(MANIFEST), json).map_err(|e| Error::io(tmp.join(MANIFEST), e))?;
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))
}

fn sibling(dir: &Path, suffix: &str) -> PathBuf {
    let mut name = dir.file_name().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(suffix);
    dir.with_file_name(name)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let mpath = dir.join(MANIFEST);
    let raw = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest =
        serde_json::from_slice(&raw).map_err(|e| corrupt(dir, format!("bad manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(corrupt(
            dir,
            format!("unsupported format version {}", manifest.format_version),
        ));
    }
    manifest
        .config
        .validate()
        .map_err(|e| corrupt(dir, e.to_string()))?;

    let ppath = dir.join(PARAMS);
    let bytes = fs::read(&ppath).map_err(|e| Error::io(&ppath, e))?;
    if bytes.len() % 8 != 0 {
        return Err(corrupt(dir, "params.bin length is not a multiple of 8"));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();

    let read = |entry: &ParamIndexEntry| -> Result<Matrix> {
        let end = entry.offset + entry.rows * entry.cols;
        if end > values.len() {
            return Err(corrupt(dir, format!("{} extends past end of params.bin", entry.name)));
        }
        Matrix::from_vec(entry.rows, entry.cols, values[entry.offset..end].to_vec())
    };
    let find = |name: &str| -> Result<&ParamIndexEntry> {
        manifest
            .params
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| corrupt(dir, format!("missing tensor {name}")))
    };

    let mut params = ModelParams::zeros(&manifest.config);
    let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
    let load_into = |prefix: &str, targets: Vec<&mut Matrix>| -> Result<()> {
        for (name, m) in names.iter().zip(targets) {
            let full = format!("{prefix}{name}");
            let entry = find(&full)?;
            if (entry.rows, entry.cols) != m.shape() {
                return Err(corrupt(
                    dir,
                    format!("{full} has shape {}x{}, expected {:?}", entry.rows, entry.cols, m.shape()),
                ));
            }
            *m = read(entry)?;
        }
        Ok(())
    };
    load_into("", params.tensors_mut())?;
    let optimizer = match manifest.optimizer {
        Some(o) => {
            let mut st = OptimizerState::new(o.hyper, params.tensors().iter().map(|(_, m)| m.shape()));
            st.step = o.step;
            load_into("adam_m/", st.first_moment.iter_mut().collect())?;
            load_into("adam_v/", st.second_moment.iter_mut().collect())?;
            Some(st)
        }
        None => None,
    };
    let expected: usize = manifest.params.iter().map(|e| e.rows * e.cols).sum();
    if expected != values.len() {
        return Err(corrupt(
            dir,
            format!("index covers {expected} values, params.bin holds {}", values.len()),
        ));
    }
    Ok(Checkpoint {
        step: manifest.step,
        params,
        optimizer,
        rng: manifest.rng,
    })
}
