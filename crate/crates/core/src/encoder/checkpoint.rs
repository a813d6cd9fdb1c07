// Checkpoint layout (see docs/formats.md):
//
//   biembed-checkpoint 1\n
//   <header byte length, decimal>\n
//   <JSON header: {"config": EncoderConfig, "params": [{name, shape, width}]}>\n
//   <raw little-endian scalars, one blob per manifest entry, in manifest order>

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EncoderConfig, EncoderModel};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &str = "biembed-checkpoint 1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScalarWidth {
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "f64")]
    F64,
}

impl ScalarWidth {
    fn bytes(self) -> usize {
        match self {
            ScalarWidth::F32 => 4,
            ScalarWidth::F64 => 8,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    width: ScalarWidth,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: EncoderConfig,
    params: Vec<ManifestEntry>,
}

pub fn save_checkpoint(model: &EncoderModel, path: &Path, width: ScalarWidth) -> Result<()> {
    let header = Header {
        config: model.config.clone(),
        params: model
            .params
            .iter()
            .map(|(name, t)| ManifestEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                width,
            })
            .collect(),
    };
    let json = serde_json::to_string(&header).expect("header serializes");
    let mut buf = Vec::new();
    writeln!(buf, "{MAGIC}").expect("vec write");
    writeln!(buf, "{}", json.len()).expect("vec write");
    buf.extend_from_slice(json.as_bytes());
    buf.push(b'\n');
    for t in model.params.values() {
        for &v in t.data() {
            match width {
                ScalarWidth::F32 => buf.extend_from_slice(&(v as f32).to_le_bytes()),
                ScalarWidth::F64 => buf.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<EncoderModel> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let bad = |detail: String| Error::parse(path, detail);

    let mut line = String::new();
    reader.read_line(&mut line).map_err(|e| Error::io(path, e))?;
    if line.trim_end() != MAGIC {
        return Err(bad("not a biembed checkpoint".into()));
    }
    line.clear();
    reader.read_line(&mut line).map_err(|e| Error::io(path, e))?;
    let len: usize = line
        .trim_end()
        .parse()
        .map_err(|e| bad(format!("bad header length: {e}")))?;
    let mut json = vec![0u8; len + 1];
    reader.read_exact(&mut json).map_err(|e| Error::io(path, e))?;
    if json.pop() != Some(b'\n') {
        return Err(bad("header not newline-terminated".into()));
    }
    let header: Header =
        serde_json::from_slice(&json).map_err(|e| bad(format!("bad header: {e}")))?;
    header
        .config
        .validate()
        .map_err(|e| bad(format!("invalid config: {e}")))?;

    let expected: BTreeMap<String, Vec<usize>> =
        header.config.parameter_shapes().into_iter().collect();
    if header.params.len() != expected.len() {
        return Err(bad(format!(
            "manifest has {} parameters, config implies {}",
            header.params.len(),
            expected.len()
        )));
    }
    let mut params = BTreeMap::new();
    for entry in &header.params {
        match expected.get(&entry.name) {
            Some(shape) if *shape == entry.shape => {}
            Some(shape) => {
                return Err(bad(format!(
                    "parameter {} has shape {:?}, config implies {:?}",
                    entry.name, entry.shape, shape
                )))
            }
            None => return Err(bad(format!("unexpected parameter {}", entry.name))),
        }
        let n: usize = entry.shape.iter().product();
        let mut raw = vec![0u8; n * entry.width.bytes()];
        reader
            .read_exact(&mut raw)
            .map_err(|e| bad(format!("truncated blob for {}: {e}", entry.name)))?;
        let data: Vec<f64> = match entry.width {
            ScalarWidth::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
            ScalarWidth::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        };
        let t = Tensor::new(entry.shape.clone(), data)?.with_requires_grad(true);
        params.insert(entry.name.clone(), t);
    }
    let mut rest = Vec::new();
    reader.read_to_end(&mut rest).map_err(|e| Error::io(path, e))?;
    if !rest.is_empty() {
        return Err(bad(format!("{} trailing bytes", rest.len())));
    }
    Ok(EncoderModel {
        config: header.config,
        params,
    })
}
