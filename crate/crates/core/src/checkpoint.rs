//! Single-file checkpoints: a JSON document holding the model config, the
//! training input size and every named parameter tensor. Tensor data is the
//! base64 of little-endian `f64` bytes, so a save/load round trip is bitwise.

use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SegError};
use crate::models::{build_model, Model, ModelConfig};
use crate::tensor::Tensor;

pub const FORMAT: &str = "polyseg-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct StoredTensor {
    name: String,
    shape: Vec<usize>,
    data: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Document {
    format: String,
    version: u32,
    model_config: ModelConfig,
    /// `[height, width]` the model was trained at, when known.
    input_size: Option<[usize; 2]>,
    parameters: Vec<StoredTensor>,
}

/// A model together with the resolution it expects.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub input_size: Option<[usize; 2]>,
}

fn encode(t: &Tensor) -> String {
    let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

fn decode(name: &str, shape: Vec<usize>, data: &str) -> Result<Tensor> {
    let bad = |m: String| SegError::Config(format!("checkpoint tensor {name}: {m}"));
    let bytes = STANDARD.decode(data).map_err(|e| bad(e.to_string()))?;
    if bytes.len() % 8 != 0 {
        return Err(bad("byte length is not a multiple of 8".into()));
    }
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Tensor::new(shape, values)
}

pub fn to_json(model: &Model, input_size: Option<[usize; 2]>) -> String {
    let doc = Document {
        format: FORMAT.into(),
        version: VERSION,
        model_config: model.config().clone(),
        input_size,
        parameters: model
            .params()
            .iter()
            .map(|(name, t)| StoredTensor {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                data: encode(t),
            })
            .collect(),
    };
    serde_json::to_string(&doc).expect("checkpoint serializes")
}

pub fn from_json(text: &str) -> Result<Checkpoint> {
    let doc: Document = serde_json::from_str(text)?;
    if doc.format != FORMAT || doc.version != VERSION {
        return Err(SegError::Config(format!(
            "unsupported checkpoint format {} v{}",
            doc.format, doc.version
        )));
    }
    let mut model = build_model(&doc.model_config)?;
    let named = doc
        .parameters
        .into_iter()
        .map(|p| Ok((p.name.clone(), decode(&p.name, p.shape, &p.data)?)))
        .collect::<Result<Vec<_>>>()?;
    model.load_params(named)?;
    Ok(Checkpoint {
        model,
        input_size: doc.input_size,
    })
}

pub fn save(path: &Path, model: &Model, input_size: Option<[usize; 2]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, to_json(model, input_size))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path).map_err(|e| SegError::Load {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Arch;

    #[test]
    fn round_trip_is_bitwise() {
        let model = build_model(&ModelConfig::new(Arch::ResUnet).with_size(2, 2).with_seed(9)).unwrap();
        let back = from_json(&to_json(&model, Some([16, 16]))).unwrap();
        assert_eq!(back.input_size, Some([16, 16]));
        assert_eq!(back.model.params(), model.params());
    }

    #[test]
    fn rejects_foreign_documents() {
        assert!(from_json(r#"{"format":"other","version":1}"#).is_err());
    }
}
