//! Checkpoint archives: named tensors in a safetensors file plus one JSON
//! header stored under a single metadata key.
//!
//! Tensor names follow the variable paths of the networks, e.g.
//! `global.enc.conv0.weight`, `local.left_eye.dec.deconv1.weight`,
//! `disc.conv3.bn.running_mean`, `embedder.fc.weight` and optimizer moments
//! `opt.gen.m.<var>`. Writing the same state twice yields identical bytes.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tch::nn::VarStore;
use tch::{Kind, Tensor};

use crate::error::{ensure, validation, Error, Result};

/// Bumped whenever the tensor layout or header schema changes.
pub const FORMAT_VERSION: u32 = 1;

const HEADER_KEY: &str = "tpgan";

#[derive(Debug, Serialize, Deserialize)]
struct Header<T> {
    format_version: u32,
    kind: String,
    payload: T,
}

fn dtype_of(kind: Kind) -> Result<Dtype> {
    Ok(match kind {
        Kind::Float => Dtype::F32,
        Kind::Double => Dtype::F64,
        Kind::Int64 => Dtype::I64,
        other => return Err(validation!("cannot store tensors of kind {other:?}")),
    })
}

fn kind_of(dtype: Dtype) -> Option<Kind> {
    match dtype {
        Dtype::F32 => Some(Kind::Float),
        Dtype::F64 => Some(Kind::Double),
        Dtype::I64 => Some(Kind::Int64),
        _ => None,
    }
}

fn to_bytes(t: &Tensor) -> Result<(Dtype, Vec<usize>, Vec<u8>)> {
    let dtype = dtype_of(t.kind())?;
    let t = t.detach().to_device(tch::Device::Cpu).contiguous();
    let shape: Vec<usize> = t.size().iter().map(|&d| d as usize).collect();
    let numel = t.numel();
    let mut bytes = vec![0u8; numel * dtype.bitsize() / 8];
    t.copy_data_u8(&mut bytes, numel);
    Ok((dtype, shape, bytes))
}

/// Writes `tensors` with a typed header. The file is replaced atomically.
pub fn write_archive<T: Serialize>(
    path: &Path,
    kind: &str,
    payload: &T,
    tensors: &BTreeMap<String, Tensor>,
) -> Result<()> {
    let header = Header {
        format_version: FORMAT_VERSION,
        kind: kind.to_string(),
        payload,
    };
    let header = serde_json::to_string(&header)
        .map_err(|e| Error::Config(format!("cannot encode checkpoint header: {e}")))?;
    let raw: Vec<(String, (Dtype, Vec<usize>, Vec<u8>))> = tensors
        .iter()
        .map(|(k, t)| Ok((k.clone(), to_bytes(t)?)))
        .collect::<Result<_>>()?;
    let views: Vec<(&str, TensorView<'_>)> = raw
        .iter()
        .map(|(k, (dtype, shape, bytes))| {
            TensorView::new(*dtype, shape.clone(), bytes)
                .map(|v| (k.as_str(), v))
                .map_err(|e| validation!("tensor {k}: {e}"))
        })
        .collect::<Result<_>>()?;
    let meta = HashMap::from([(HEADER_KEY.to_string(), header)]);
    let bytes = safetensors::tensor::serialize(views, Some(meta))
        .map_err(|e| validation!("cannot serialize checkpoint: {e}"))?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Reads an archive written by [`write_archive`] with the same `kind`.
pub fn read_archive<T: DeserializeOwned>(
    path: &Path,
    kind: &str,
) -> Result<(T, BTreeMap<String, Tensor>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, meta) = SafeTensors::read_metadata(&bytes).map_err(|e| Error::corrupt(path, e))?;
    let header_json = meta
        .metadata()
        .as_ref()
        .and_then(|m| m.get(HEADER_KEY))
        .ok_or_else(|| Error::corrupt(path, "missing checkpoint header"))?;
    let header: Header<serde_json::Value> =
        serde_json::from_str(header_json).map_err(|e| Error::corrupt(path, e))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Migration(format!(
            "{} has format version {}, this build reads version {FORMAT_VERSION}",
            path.display(),
            header.format_version
        )));
    }
    ensure!(
        header.kind == kind,
        "{} holds a '{}' checkpoint, expected '{kind}'",
        path.display(),
        header.kind
    );
    let payload: T = serde_json::from_value(header.payload).map_err(|e| Error::corrupt(path, e))?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::corrupt(path, e))?;
    let mut tensors = BTreeMap::new();
    for (name, view) in st.iter() {
        let kind = kind_of(view.dtype())
            .ok_or_else(|| Error::corrupt(path, format!("{name}: unsupported dtype")))?;
        let shape: Vec<i64> = view.shape().iter().map(|&d| d as i64).collect();
        let t = Tensor::f_from_data_size(view.data(), &shape, kind)?;
        tensors.insert(name.to_string(), t);
    }
    Ok((payload, tensors))
}

/// All variables of `vs` (trainable and buffers) keyed by their full names.
pub fn collect_vars(vs: &VarStore) -> BTreeMap<String, Tensor> {
    vs.variables().into_iter().collect()
}

/// Copies every variable of `vs` from `tensors`. Missing names and shape
/// differences are validation errors.
pub fn load_vars(vs: &VarStore, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    let vars = vs.variables();
    let mut names: Vec<&String> = vars.keys().collect();
    names.sort();
    for name in names {
        let src = tensors
            .get(name)
            .ok_or_else(|| validation!("checkpoint lacks variable {name}"))?;
        let mut dst = vars[name].shallow_clone();
        ensure!(
            src.size() == dst.size(),
            "variable {name}: checkpoint shape {:?}, model shape {:?}",
            src.size(),
            dst.size()
        );
        tch::no_grad(|| dst.copy_(src));
    }
    Ok(())
}
