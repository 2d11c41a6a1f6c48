//! On-disk formats: raw tensors, checkpoints and run manifests.
//!
//! # Tensor file (`.tnsr`)
//!
//! ```text
//! offset  size        field
//! 0       8           magic  b"URECTNSR"
//! 8       1           dtype  (1 = f32; no other codes are defined)
//! 9       1           rank   (0..=4)
//! 10      4 * rank    shape, u32 little-endian, outermost first
//! ..      4 * prod    payload, f32 little-endian, row-major
//! ```
//!
//! # Checkpoint directory
//!
//! ```text
//! <dir>/checkpoint.toml     CheckpointManifest
//! <dir>/params/<name>.tnsr  one tensor per named parameter
//! <dir>/run.toml            RunManifest of the run that produced it
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::recon_net::{Architecture, CascadeModel};

pub const TENSOR_MAGIC: &[u8; 8] = b"URECTNSR";
pub const DTYPE_F32: u8 = 1;
pub const MAX_RANK: usize = 4;
pub const TENSOR_EXT: &str = "tnsr";

pub const CHECKPOINT_MANIFEST: &str = "checkpoint.toml";
pub const RUN_MANIFEST: &str = "run.toml";
pub const CHECKPOINT_FORMAT: &str = "unirecon-checkpoint/1";

/// Dense row-major f32 array with an explicit shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.len() > MAX_RANK {
            return Err(Error::Shape(format!(
                "rank {} exceeds the maximum of {MAX_RANK}",
                shape.len()
            )));
        }
        if let Some(d) = shape.iter().find(|&&d| d > u32::MAX as usize) {
            return Err(Error::Shape(format!("dimension {d} does not fit in u32")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }
}

/// Serializes a tensor into the `.tnsr` byte layout.
pub fn encode_tensor(tensor: &Tensor) -> Result<Vec<u8>> {
    if let Some(index) = tensor.data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    let mut out = Vec::with_capacity(10 + 4 * tensor.shape.len() + 4 * tensor.data.len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(DTYPE_F32);
    out.push(tensor.shape.len() as u8);
    for &d in &tensor.shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in &tensor.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 10 {
        return Err(Error::Format(format!("header truncated ({} bytes)", bytes.len())));
    }
    if &bytes[..8] != TENSOR_MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    if bytes[8] != DTYPE_F32 {
        return Err(Error::Format(format!("unsupported dtype code {}", bytes[8])));
    }
    let rank = bytes[9] as usize;
    if rank > MAX_RANK {
        return Err(Error::Format(format!("rank {rank} exceeds {MAX_RANK}")));
    }
    let header = 10 + 4 * rank;
    if bytes.len() < header {
        return Err(Error::Format("shape truncated".into()));
    }
    let shape: Vec<usize> = bytes[10..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let count: usize = shape.iter().product();
    let payload = &bytes[header..];
    if payload.len() != count * 4 {
        return Err(Error::Format(format!(
            "payload holds {} bytes, shape {shape:?} needs {}",
            payload.len(),
            count * 4
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(shape, data)
}

/// Writes `<dir>/<name>.tnsr` and returns its path.
pub fn write_tensor(dir: &Path, name: &str, tensor: &Tensor) -> Result<PathBuf> {
    let path = dir.join(format!("{name}.{TENSOR_EXT}"));
    write_tensor_file(&path, tensor)?;
    Ok(path)
}

pub fn write_tensor_file(path: &Path, tensor: &Tensor) -> Result<()> {
    let bytes = encode_tensor(tensor)?;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub(crate) fn write_toml<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = toml::to_string_pretty(value)
        .map_err(|e| Error::Manifest(format!("serializing {}: {e}", path.display())))?;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_toml<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<D> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))
}

/// Pipeline stage that produced a checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    S1,
    S2,
    S3,
    S4,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Stage::S1 => "S1",
            Stage::S2 => "S2",
            Stage::S3 => "S3",
            Stage::S4 => "S4",
        };
        f.write_str(s)
    }
}

/// Which comparison family a checkpoint belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// One plain cascade network per anatomy.
    Independent,
    /// One plain cascade network trained on mixed anatomies.
    Shared,
    /// Universal network with per-anatomy normalization, no distillation.
    Universal,
    /// Universal network fine-tuned with attention transfer.
    Distilled,
}

impl Variant {
    /// Row label used in comparison reports.
    pub fn label(self) -> &'static str {
        match self {
            Variant::Independent => "Independent",
            Variant::Shared => "Shared",
            Variant::Universal => "w/o MD",
            Variant::Distilled => "Proposed",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub stage: Stage,
    pub variant: Variant,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distill_layer: Option<usize>,
    pub aspin: bool,
    /// Registry of the normalization bank (empty without one).
    pub anatomies: Vec<String>,
    /// Anatomies whose data trained the weights.
    #[serde(default)]
    pub trained_on: Vec<String>,
    pub parameter_count: usize,
    pub architecture: Architecture,
    pub params: Vec<ParamEntry>,
}

/// Stage metadata stored next to the weights.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub stage: Stage,
    pub variant: Variant,
    pub distill_layer: Option<usize>,
    pub trained_on: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: CascadeModel<f32>,
    pub meta: CheckpointMeta,
    pub dir: PathBuf,
}

pub fn save_checkpoint(
    model: &CascadeModel<f32>,
    meta: CheckpointMeta,
    dir: &Path,
) -> Result<CheckpointManifest> {
    let params_dir = dir.join("params");
    fs::create_dir_all(&params_dir).map_err(|e| Error::io(&params_dir, e))?;
    let mut entries = Vec::with_capacity(model.tensor_count());
    for i in 0..model.tensor_count() {
        let name = model.param_name(i);
        let shape = model.param_shape(i);
        let tensor = Tensor::new(shape.clone(), model.param(i).to_vec())?;
        write_tensor(&params_dir, &name, &tensor)?;
        entries.push(ParamEntry {
            file: format!("params/{name}.{TENSOR_EXT}"),
            name,
            shape,
            trainable: model.is_trainable(i),
        });
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.to_string(),
        stage: meta.stage,
        variant: meta.variant,
        distill_layer: meta.distill_layer,
        aspin: model.bank().is_some(),
        anatomies: model.anatomies().to_vec(),
        trained_on: meta.trained_on,
        parameter_count: model.count_parameters(crate::recon_net::ParamScope::Total),
        architecture: model.architecture().clone(),
        params: entries,
    };
    write_toml(&dir.join(CHECKPOINT_MANIFEST), &manifest)?;
    Ok(manifest)
}

pub fn read_checkpoint_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(CHECKPOINT_MANIFEST);
    if !path.is_file() {
        return Err(Error::Manifest(format!("{} not found", path.display())));
    }
    let manifest: CheckpointManifest = read_toml(&path)?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::Manifest(format!(
            "unsupported checkpoint format `{}`",
            manifest.format
        )));
    }
    Ok(manifest)
}

/// Loads a checkpoint, refusing any entry whose name or shape differs from
/// what the recorded architecture implies.
pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest = read_checkpoint_manifest(dir)?;
    let mut model = CascadeModel::<f32>::zeroed(
        manifest.architecture.clone(),
        manifest.aspin,
        &manifest.anatomies,
    )?;
    let mut by_name: BTreeMap<&str, &ParamEntry> = BTreeMap::new();
    for entry in &manifest.params {
        if by_name.insert(entry.name.as_str(), entry).is_some() {
            return Err(Error::Manifest(format!("duplicate entry `{}`", entry.name)));
        }
    }
    if by_name.len() != model.tensor_count() {
        return Err(Error::Manifest(format!(
            "manifest lists {} tensors, architecture needs {}",
            by_name.len(),
            model.tensor_count()
        )));
    }
    for i in 0..model.tensor_count() {
        let name = model.param_name(i);
        let entry = by_name
            .get(name.as_str())
            .ok_or_else(|| Error::Manifest(format!("missing entry for `{name}`")))?;
        let expected = model.param_shape(i);
        if entry.shape != expected {
            return Err(Error::Shape(format!(
                "`{name}`: manifest shape {:?}, architecture needs {expected:?}",
                entry.shape
            )));
        }
        let path = dir.join(&entry.file);
        if !path.is_file() {
            return Err(Error::Manifest(format!(
                "`{name}` refers to missing file {}",
                path.display()
            )));
        }
        let tensor = read_tensor(&path)?;
        if tensor.shape() != expected.as_slice() {
            return Err(Error::Shape(format!(
                "`{name}`: file shape {:?}, manifest shape {expected:?}",
                tensor.shape()
            )));
        }
        model.param_mut(i).copy_from_slice(tensor.data());
        model.set_trainable(i, entry.trainable);
    }
    Ok(Checkpoint {
        model,
        meta: CheckpointMeta {
            stage: manifest.stage,
            variant: manifest.variant,
            distill_layer: manifest.distill_layer,
            trained_on: manifest.trained_on,
        },
        dir: dir.to_path_buf(),
    })
}

/// One per-epoch (or per-evaluation) metric line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub epoch: usize,
    pub anatomy: String,
    pub split: String,
    pub accel: f64,
    pub psnr_db: f64,
    pub ssim_pct: f64,
    pub mae: f64,
}

/// Per-image metrics for one evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub index: usize,
    pub psnr_db: f64,
    pub ssim_pct: f64,
    pub mae: f64,
}

/// Result table of one evaluation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub label: String,
    pub anatomy: String,
    pub split: String,
    pub accel: f64,
    pub mask_seed: u64,
    pub params: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distill_layer: Option<usize>,
    pub psnr_db: f64,
    pub ssim_pct: f64,
    pub mae: f64,
    pub images: Vec<ImageMetrics>,
}

pub const DETERMINISM_BIT_EXACT: &str = "bit-exact";

/// Record of a single command run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub determinism: String,
    #[serde(default)]
    pub config: toml::Table,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_epoch: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub epoch_losses: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub checkpoints: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub metrics: Vec<MetricRow>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub evaluations: Vec<EvalRecord>,
}

impl RunManifest {
    pub fn new(command: impl Into<String>, seed: u64, config: toml::Table) -> Self {
        RunManifest {
            command: command.into(),
            seed,
            determinism: DETERMINISM_BIT_EXACT.to_string(),
            config,
            best_epoch: None,
            epoch_losses: Vec::new(),
            checkpoints: Vec::new(),
            metrics: Vec::new(),
            evaluations: Vec::new(),
        }
    }

    /// Checks row ordering and that every referenced checkpoint exists.
    /// Relative paths resolve against `base`.
    pub fn validate(&self, base: &Path) -> Result<()> {
        if let Some(w) = self.metrics.windows(2).find(|w| w[1].epoch < w[0].epoch) {
            return Err(Error::Manifest(format!(
                "metric rows go backwards in epoch ({} after {})",
                w[1].epoch, w[0].epoch
            )));
        }
        for p in &self.checkpoints {
            let resolved = if p.is_absolute() { p.clone() } else { base.join(p) };
            if !resolved.exists() {
                return Err(Error::Manifest(format!(
                    "referenced path {} does not exist",
                    resolved.display()
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        self.validate(base)?;
        write_toml(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_toml(path)
    }
}
