//! On-disk tensor format and the layer manifest.
//!
//! ESPT layout (all integers little-endian):
//!
//! ```text
//! magic    "ESPT"           4 bytes
//! version  u32 = 1          4 bytes
//! dtype    u8 (0=f32 1=f16) 1 byte
//! rank     u8               1 byte
//! dims     u64 * rank
//! data     row-major elements, little-endian
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use half::f16;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{DType, TensorData, TensorF};

pub const TENSOR_MAGIC: &[u8; 4] = b"ESPT";
pub const TENSOR_VERSION: u32 = 1;

/// Serializes a tensor into ESPT bytes.
pub fn encode_tensor(t: &TensorF) -> Result<Vec<u8>> {
    if t.rank() > u8::MAX as usize {
        return Err(Error::Shape(format!(
            "rank {} does not fit in one byte",
            t.rank()
        )));
    }
    let elem = t.dtype().size_of() as u64;
    let payload = (t.len() as u64)
        .checked_mul(elem)
        .ok_or_else(|| Error::Shape("payload size overflows 64 bits".into()))?;
    let mut out = Vec::with_capacity(10 + 8 * t.rank() + payload as usize);
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    out.push(t.dtype().code());
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match t.data() {
        TensorData::F32(v) => v
            .iter()
            .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        TensorData::F16(v) => v
            .iter()
            .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
    }
    Ok(out)
}

/// Header fields of an ESPT file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorHeader {
    pub version: u32,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub header_len: usize,
}

impl TensorHeader {
    pub fn element_count(&self) -> Option<u64> {
        self.shape
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
    }
}

pub fn decode_header(bytes: &[u8]) -> Result<TensorHeader> {
    if bytes.len() < 10 {
        return Err(Error::Truncated {
            expected: 10,
            actual: bytes.len() as u64,
        });
    }
    if &bytes[..4] != TENSOR_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected \"ESPT\"",
            String::from_utf8_lossy(&bytes[..4])
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != TENSOR_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let dtype = DType::from_code(bytes[8])
        .ok_or_else(|| Error::Format(format!("unknown dtype code {}", bytes[8])))?;
    let rank = bytes[9] as usize;
    if rank == 0 {
        return Err(Error::Format("rank must be at least 1".into()));
    }
    let header_len = 10 + 8 * rank;
    if bytes.len() < header_len {
        return Err(Error::Truncated {
            expected: header_len as u64,
            actual: bytes.len() as u64,
        });
    }
    let shape = bytes[10..header_len]
        .chunks_exact(8)
        .map(|c| {
            let d = u64::from_le_bytes(c.try_into().unwrap());
            usize::try_from(d).map_err(|_| Error::Format(format!("dimension {d} too large")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TensorHeader {
        version,
        dtype,
        shape,
        header_len,
    })
}

/// Parses ESPT bytes, validating magic, version, length and finiteness.
pub fn decode_tensor(bytes: &[u8]) -> Result<TensorF> {
    let header = decode_header(bytes)?;
    let count = header
        .element_count()
        .ok_or_else(|| Error::Format("element count overflows 64 bits".into()))?;
    let expected = count
        .checked_mul(header.dtype.size_of() as u64)
        .and_then(|p| p.checked_add(header.header_len as u64))
        .ok_or_else(|| Error::Format("payload size overflows 64 bits".into()))?;
    let actual = bytes.len() as u64;
    if actual < expected {
        return Err(Error::Truncated { expected, actual });
    }
    if actual > expected {
        return Err(Error::Format(format!(
            "{} trailing bytes after payload",
            actual - expected
        )));
    }
    let payload = &bytes[header.header_len..];
    let data = match header.dtype {
        DType::F32 => TensorData::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        DType::F16 => TensorData::F16(
            payload
                .chunks_exact(2)
                .map(|c| f16::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
    };
    TensorF::new(header.shape, data)
}

pub fn write_tensor(t: &TensorF, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_tensor(t)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<TensorF> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes)
}

/// One layer's weight and the calibration activations feeding it.
#[derive(Debug, Clone)]
pub struct LayerBundle {
    pub layer_id: String,
    /// `[C_out, C_in]`
    pub weight: TensorF,
    /// `[T, C_in]`, batch and sequence flattened into the token axis.
    pub calib_activations: TensorF,
}

impl LayerBundle {
    pub fn new(
        layer_id: impl Into<String>,
        weight: TensorF,
        calib_activations: TensorF,
    ) -> Result<Self> {
        let layer_id = layer_id.into();
        validate_layer_id(&layer_id)?;
        if weight.rank() != 2 {
            return Err(Error::Shape(format!(
                "weight must be [C_out, C_in], got {:?}",
                weight.shape()
            )));
        }
        if calib_activations.rank() != 2 {
            return Err(Error::Shape(format!(
                "activations must be [T, C_in], got {:?}",
                calib_activations.shape()
            )));
        }
        if weight.shape()[1] != calib_activations.shape()[1] {
            return Err(Error::Shape(format!(
                "channel mismatch: weight {:?} vs activations {:?}",
                weight.shape(),
                calib_activations.shape()
            )));
        }
        Ok(LayerBundle {
            layer_id,
            weight,
            calib_activations,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn tokens(&self) -> usize {
        self.calib_activations.shape()[0]
    }
}

/// Layer ids become file name stems, so path syntax is rejected.
pub fn validate_layer_id(id: &str) -> Result<()> {
    if id.is_empty() || id == "." || id == ".." || id.contains(['/', '\\', '\0']) {
        return Err(Error::Manifest(format!("invalid layer id {id:?}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestLayer {
    pub layer_id: String,
    pub weight_path: String,
    pub activation_path: String,
}

/// JSON index of the layers of one model. Relative paths resolve against
/// the manifest's own directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub model_name: String,
    pub layers: Vec<ManifestLayer>,
    pub token_count: u64,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn from_json(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut m: Manifest = serde_json::from_str(text)?;
        m.base_dir = base_dir.into();
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for layer in &self.layers {
            validate_layer_id(&layer.layer_id)?;
            if !seen.insert(layer.layer_id.as_str()) {
                return Err(Error::Manifest(format!(
                    "duplicate layer id {:?}",
                    layer.layer_id
                )));
            }
        }
        Ok(())
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.base_dir.join(rel)
    }

    pub fn layer(&self, layer_id: &str) -> Option<&ManifestLayer> {
        self.layers.iter().find(|l| l.layer_id == layer_id)
    }

    pub fn layer_ids(&self) -> impl Iterator<Item = &str> {
        self.layers.iter().map(|l| l.layer_id.as_str())
    }

    /// Parses the header of every referenced tensor file.
    pub fn check_files(&self) -> Result<()> {
        for layer in &self.layers {
            for rel in [&layer.weight_path, &layer.activation_path] {
                let path = self.resolve(rel);
                let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
                decode_header(&bytes).map_err(|e| e.in_layer(&layer.layer_id))?;
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let manifest = Manifest::from_json(&text, base)?;
    manifest.check_files()?;
    Ok(manifest)
}

/// Loads and fully validates one layer of a manifest.
pub fn load_bundle(manifest: &Manifest, layer_id: &str) -> Result<LayerBundle> {
    let entry = manifest
        .layer(layer_id)
        .ok_or_else(|| Error::Manifest(format!("no layer {layer_id:?} in manifest")))?;
    let load = || -> Result<LayerBundle> {
        let weight = read_tensor(manifest.resolve(&entry.weight_path))?;
        let acts = read_tensor(manifest.resolve(&entry.activation_path))?;
        let bundle = LayerBundle::new(layer_id, weight, acts)?;
        if manifest.token_count != 0 && bundle.tokens() as u64 != manifest.token_count {
            return Err(Error::Manifest(format!(
                "activations hold {} tokens, manifest declares {}",
                bundle.tokens(),
                manifest.token_count
            )));
        }
        Ok(bundle)
    };
    load().map_err(|e| match e {
        Error::Layer { .. } => e,
        e => e.in_layer(layer_id),
    })
}

/// Writes a bundle's tensors next to `dir` and returns the manifest entry.
pub fn write_bundle(bundle: &LayerBundle, dir: impl AsRef<Path>) -> Result<ManifestLayer> {
    let dir = dir.as_ref();
    let weight_path = format!("{}.weight.espt", bundle.layer_id);
    let activation_path = format!("{}.acts.espt", bundle.layer_id);
    write_tensor(&bundle.weight, dir.join(&weight_path))?;
    write_tensor(&bundle.calib_activations, dir.join(&activation_path))?;
    Ok(ManifestLayer {
        layer_id: bundle.layer_id.clone(),
        weight_path,
        activation_path,
    })
}

/// Writes every bundle plus `manifest.json` into `dir`.
pub fn write_model(
    model_name: &str,
    bundles: &[LayerBundle],
    dir: impl AsRef<Path>,
) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let layers = bundles
        .iter()
        .map(|b| write_bundle(b, dir))
        .collect::<Result<Vec<_>>>()?;
    let token_count = bundles.first().map_or(0, |b| b.tokens() as u64);
    let manifest = Manifest {
        model_name: model_name.to_string(),
        layers,
        token_count,
        base_dir: dir.to_path_buf(),
    };
    let path = dir.join("manifest.json");
    fs::write(&path, manifest.to_json()?).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
