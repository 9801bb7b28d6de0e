//! On-disk formats: field sequences, trajectory tensors and checkpoints.
//!
//! All binary blocks are little-endian. Field sequences store `f32`
//! `[frame][u then v][row-major cells]`; tensors and parameters store `f64`.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Grid, VelocityField};
use crate::nri::{Model, ModelParams};
use crate::synth::{LatentVortexState, SynthConfig};
use crate::track::{TrajectoryTensor, NUM_FEATURES};
use crate::train::{Preprocessing, TrainState};

pub const FORMAT_VERSION: u32 = 1;
pub const TOOL_VERSION: &str = concat!("vortex-nri ", env!("CARGO_PKG_VERSION"));

pub const FIELD_MANIFEST: &str = "manifest.json";
pub const FIELD_DATA: &str = "fields.f32";
pub const LATENT_FILE: &str = "latent.json";
pub const TENSOR_MANIFEST: &str = "traj_manifest.json";
pub const TENSOR_DATA: &str = "traj.f64";
pub const TENSOR_MASK: &str = "mask.u8";

pub const FEATURE_NAMES: [&str; NUM_FEATURES] = ["x", "y", "r", "omega", "ccw", "cw", "none", "exist"];

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

fn open(path: &Path) -> Result<fs::File> {
    fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Missing(path.to_path_buf()),
        _ => Error::Io(e),
    })
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    open(path)?.read_to_end(&mut buf)?;
    Ok(buf)
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| format_err(path, e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldManifest {
    pub format_version: u32,
    pub generator: String,
    pub id: String,
    pub grid: Grid,
    pub num_frames: usize,
    pub severity: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Generator settings, when the sequence is synthetic.
    pub config: Option<SynthConfig>,
}

impl FieldManifest {
    pub fn synthetic(id: &str, config: &SynthConfig) -> Self {
        FieldManifest {
            format_version: FORMAT_VERSION,
            generator: TOOL_VERSION.to_string(),
            id: id.to_string(),
            grid: config.grid,
            num_frames: config.num_frames,
            severity: config.severity,
            noise_sigma: config.noise_sigma,
            seed: config.seed,
            config: Some(config.clone()),
        }
    }
}

pub fn write_field_sequence(dir: &Path, manifest: &FieldManifest, fields: &[VelocityField]) -> Result<()> {
    if fields.len() != manifest.num_frames {
        return Err(Error::input(format!(
            "manifest declares {} frames, got {}",
            manifest.num_frames,
            fields.len()
        )));
    }
    fs::create_dir_all(dir)?;
    let cells = manifest.grid.len();
    let mut buf = Vec::with_capacity(fields.len() * 2 * cells * 4);
    for f in fields {
        if f.grid != manifest.grid {
            return Err(Error::input("field grid differs from manifest grid"));
        }
        for x in f.u.iter().chain(&f.v) {
            buf.extend_from_slice(&(*x as f32).to_le_bytes());
        }
    }
    write_json(&dir.join(FIELD_MANIFEST), manifest)?;
    fs::write(dir.join(FIELD_DATA), buf)?;
    Ok(())
}

pub fn read_field_sequence(dir: &Path) -> Result<(FieldManifest, Vec<VelocityField>)> {
    let manifest: FieldManifest = read_json(&dir.join(FIELD_MANIFEST))?;
    let path = dir.join(FIELD_DATA);
    manifest.grid.validate().map_err(|e| format_err(&path, e.to_string()))?;
    let bytes = read_bytes(&path)?;
    let cells = manifest.grid.len();
    let expected = manifest.num_frames * 2 * cells * 4;
    if bytes.len() != expected {
        return Err(format_err(&path, format!("expected {expected} bytes, found {}", bytes.len())));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let mut fields = Vec::with_capacity(manifest.num_frames);
    for frame in values.chunks_exact(2 * cells) {
        let (u, v) = frame.split_at(cells);
        let f = VelocityField::new(manifest.grid, u.to_vec(), v.to_vec()).map_err(|e| format_err(&path, e.to_string()))?;
        fields.push(f);
    }
    Ok((manifest, fields))
}

pub fn write_latent(dir: &Path, vortices: &[LatentVortexState]) -> Result<()> {
    write_json(&dir.join(LATENT_FILE), vortices)
}

pub fn read_latent(dir: &Path) -> Result<Vec<LatentVortexState>> {
    read_json(&dir.join(LATENT_FILE))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorManifest {
    pub format_version: u32,
    pub generator: String,
    pub id: String,
    pub n: usize,
    pub t: usize,
    pub severity: f64,
    pub noise_sigma: f64,
    pub births: Vec<usize>,
    pub features: Vec<String>,
}

pub fn write_tensor(dir: &Path, id: &str, tensor: &TrajectoryTensor) -> Result<()> {
    tensor.validate()?;
    fs::create_dir_all(dir)?;
    let manifest = TensorManifest {
        format_version: FORMAT_VERSION,
        generator: TOOL_VERSION.to_string(),
        id: id.to_string(),
        n: tensor.n,
        t: tensor.t,
        severity: tensor.severity,
        noise_sigma: tensor.noise_sigma,
        births: tensor.births.clone(),
        features: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
    };
    let mut buf = Vec::with_capacity(tensor.features.len() * 8);
    for x in &tensor.features {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    write_json(&dir.join(TENSOR_MANIFEST), &manifest)?;
    fs::write(dir.join(TENSOR_DATA), buf)?;
    fs::write(dir.join(TENSOR_MASK), &tensor.mask)?;
    Ok(())
}

pub fn read_tensor(dir: &Path) -> Result<(TensorManifest, TrajectoryTensor)> {
    let manifest: TensorManifest = read_json(&dir.join(TENSOR_MANIFEST))?;
    let data_path = dir.join(TENSOR_DATA);
    let bytes = read_bytes(&data_path)?;
    let expected = manifest.n * manifest.t * NUM_FEATURES * 8;
    if bytes.len() != expected {
        return Err(format_err(&data_path, format!("expected {expected} bytes, found {}", bytes.len())));
    }
    let features = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let mask_path = dir.join(TENSOR_MASK);
    let mask = read_bytes(&mask_path)?;
    let tensor = TrajectoryTensor {
        n: manifest.n,
        t: manifest.t,
        features,
        mask,
        severity: manifest.severity,
        noise_sigma: manifest.noise_sigma,
        births: manifest.births.clone(),
    };
    tensor.validate().map_err(|e| format_err(&mask_path, e.to_string()))?;
    Ok((manifest, tensor))
}

/// Streams are derived from `(seed, epoch, item)`, so the seed and the
/// next epoch fully describe the random state of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub generator: String,
    pub model: Model,
    pub preprocessing: Preprocessing,
    pub epoch: usize,
    pub step: u64,
    pub rng: RngState,
    /// Names of the consecutive `f64` blocks after the header, each
    /// `model.layout.len()` long.
    pub blocks: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub preprocessing: Preprocessing,
    pub state: TrainState,
    pub seed: u64,
}

const BLOCKS: [&str; 3] = ["params", "adam_m", "adam_v"];

/// One JSON header line, then the parameter vector and the two Adam
/// moment vectors.
pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    ckpt.state.params.validate(&ckpt.model.layout)?;
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        generator: TOOL_VERSION.to_string(),
        model: ckpt.model.clone(),
        preprocessing: ckpt.preprocessing,
        epoch: ckpt.state.epoch,
        step: ckpt.state.step,
        rng: RngState {
            seed: ckpt.seed,
            epoch: ckpt.state.epoch,
        },
        blocks: BLOCKS.iter().map(|s| s.to_string()).collect(),
    };
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for block in [&ckpt.state.params.values, &ckpt.state.m, &ckpt.state.v] {
        for x in block {
            out.write_all(&x.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut reader = BufReader::new(open(path)?);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    let header: CheckpointHeader = serde_json::from_str(&line).map_err(|e| format_err(path, e.to_string()))?;
    if header.format_version != FORMAT_VERSION {
        return Err(format_err(path, format!("unsupported format version {}", header.format_version)));
    }
    let expected = crate::nri::ParamLayout::new(&header.model.config, &header.model.ablation);
    if expected != header.model.layout {
        return Err(format_err(path, "slice table does not match the model configuration"));
    }
    let len = header.model.layout.len();
    let mut rest = Vec::new();
    reader.read_to_end(&mut rest)?;
    if rest.len() != header.blocks.len() * len * 8 || header.blocks != BLOCKS {
        return Err(format_err(path, "parameter block size mismatch"));
    }
    let mut blocks = rest
        .chunks_exact(len * 8)
        .map(|b| b.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect());
    let params = ModelParams {
        values: blocks.next().expect("params block"),
    };
    params.validate(&header.model.layout).map_err(|e| format_err(path, e.to_string()))?;
    let state = TrainState {
        params,
        m: blocks.next().expect("first moment block"),
        v: blocks.next().expect("second moment block"),
        step: header.step,
        epoch: header.epoch,
    };
    Ok(Checkpoint {
        model: header.model,
        preprocessing: header.preprocessing,
        state,
        seed: header.rng.seed,
    })
}

/// Every immediate subdirectory containing `marker`, sorted by name.
pub fn list_dirs_with(root: &Path, marker: &str) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    let entries = fs::read_dir(root).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Missing(root.to_path_buf()),
        _ => Error::Io(e),
    })?;
    for entry in entries {
        let p = entry?.path();
        if p.join(marker).is_file() {
            dirs.push(p);
        }
    }
    dirs.sort();
    Ok(dirs)
}
