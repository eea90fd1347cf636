//! Checkpoint directory: `manifest.json` (format tag, config, schedule
//! position, parameter table) plus `payload.bin`, the parameters and optional
//! Adam moments as little-endian `f64`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::ParamKind;
use crate::train::AdamState;

pub const FORMAT: &str = "refseg-ckpt-1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PAYLOAD_FILE: &str = "payload.bin";

/// Completed epochs and optimizer steps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub epoch: usize,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    /// Offset into the payload, in `f64` elements.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerEntry {
    pub t: u64,
    /// Offsets of the first and second moments; each block mirrors the
    /// parameter block layout.
    pub m_offset: usize,
    pub v_offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub config: ModelConfig,
    pub progress: Progress,
    pub params: Vec<ParamEntry>,
    pub optimizer: Option<OptimizerEntry>,
    pub payload_len: usize,
}

pub fn save_checkpoint(
    dir: &Path,
    model: &Model,
    adam: Option<&AdamState>,
    progress: &Progress,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut payload: Vec<f64> = Vec::with_capacity(model.store.num_scalars() * 3);
    let mut params = Vec::with_capacity(model.store.len());
    for (_, p) in model.store.iter() {
        params.push(ParamEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            kind: p.kind,
            offset: payload.len(),
        });
        payload.extend_from_slice(p.value.data());
    }
    let optimizer = adam.map(|a| {
        let m_offset = payload.len();
        a.m.iter().for_each(|b| payload.extend_from_slice(b));
        let v_offset = payload.len();
        a.v.iter().for_each(|b| payload.extend_from_slice(b));
        OptimizerEntry {
            t: a.t,
            m_offset,
            v_offset,
        }
    });
    let manifest = Manifest {
        format: FORMAT.into(),
        config: model.config.clone(),
        progress: *progress,
        params,
        optimizer,
        payload_len: payload.len(),
    };
    let bytes: Vec<u8> = payload.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(dir.join(PAYLOAD_FILE), bytes)?;
    fs::write(
        dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::format(&path, e.to_string()))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    match value.get("format").and_then(|f| f.as_str()) {
        Some(FORMAT) => {}
        other => {
            return Err(Error::Checkpoint(format!(
                "{}: unsupported checkpoint format {other:?}, expected {FORMAT:?}",
                path.display()
            )))
        }
    }
    serde_json::from_value(value).map_err(|e| Error::format(&path, e.to_string()))
}

fn read_payload(dir: &Path, manifest: &Manifest) -> Result<Vec<f64>> {
    let path = dir.join(PAYLOAD_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::format(&path, e.to_string()))?;
    if bytes.len() != manifest.payload_len * 8 {
        return Err(Error::format(
            &path,
            format!(
                "{} bytes, manifest declares {} floats",
                bytes.len(),
                manifest.payload_len
            ),
        ));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

/// Copy the checkpoint's parameters into `model`, which must have exactly the
/// same parameter names and shapes.
pub fn load_params_into(dir: &Path, model: &mut Model) -> Result<Manifest> {
    let manifest = read_manifest(dir)?;
    let payload = read_payload(dir, &manifest)?;
    copy_params(&manifest, &payload, model)?;
    Ok(manifest)
}

fn copy_params(manifest: &Manifest, payload: &[f64], model: &mut Model) -> Result<()> {
    if manifest.params.len() != model.store.len() {
        return Err(Error::Checkpoint(format!(
            "{FORMAT}: checkpoint has {} parameters, model expects {}",
            manifest.params.len(),
            model.store.len()
        )));
    }
    for entry in &manifest.params {
        let id = model.store.id(&entry.name).ok_or_else(|| {
            Error::Checkpoint(format!(
                "{FORMAT}: parameter {:?} does not exist in the model",
                entry.name
            ))
        })?;
        let p = model.store.get_mut(id);
        if p.value.shape() != entry.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "{FORMAT}: parameter {:?} has shape {:?} in the checkpoint but {:?} in the model",
                entry.name,
                entry.shape,
                p.value.shape()
            )));
        }
        let n = p.value.numel();
        let src = payload.get(entry.offset..entry.offset + n).ok_or_else(|| {
            Error::Checkpoint(format!(
                "{FORMAT}: parameter {:?} runs past the payload",
                entry.name
            ))
        })?;
        p.value.data_mut().copy_from_slice(src);
    }
    Ok(())
}

/// Rebuild the model from the stored config and parameters, with the
/// optimizer state when present.
pub fn load_checkpoint(dir: &Path) -> Result<(Model, Option<AdamState>, Progress)> {
    let manifest = read_manifest(dir)?;
    let payload = read_payload(dir, &manifest)?;
    let mut model = Model::new(manifest.config.clone())?;
    copy_params(&manifest, &payload, &mut model)?;
    let adam = match &manifest.optimizer {
        None => None,
        Some(o) => {
            let mut state = AdamState::new(&model);
            let (mut mo, mut vo) = (o.m_offset, o.v_offset);
            for (m, v) in state.m.iter_mut().zip(state.v.iter_mut()) {
                let n = m.len();
                let (ms, vs) = (payload.get(mo..mo + n), payload.get(vo..vo + n));
                let (Some(ms), Some(vs)) = (ms, vs) else {
                    return Err(Error::Checkpoint(format!(
                        "{FORMAT}: optimizer state runs past the payload"
                    )));
                };
                m.copy_from_slice(ms);
                v.copy_from_slice(vs);
                mo += n;
                vo += n;
            }
            state.t = o.t;
            Some(state)
        }
    };
    Ok((model, adam, manifest.progress))
}
