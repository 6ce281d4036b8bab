//! Self-describing binary checkpoints: a JSON config header followed by
//! named f64 tensors, little-endian. Loading reproduces forward outputs
//! bit-exactly on the writing platform.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use super::{InstrumentedModel, ModelConfig, ModelError};

const MAGIC: &[u8; 4] = b"LXMC";
const VERSION: u32 = 1;

pub(super) fn save(model: &InstrumentedModel, path: &Path) -> Result<(), ModelError> {
    let file = std::fs::File::create(path)?;
    let mut out = BufWriter::new(file);

    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;

    let config_json = serde_json::to_vec(model.config())
        .map_err(|e| ModelError::CheckpointFormat(e.to_string()))?;
    out.write_all(&(config_json.len() as u32).to_le_bytes())?;
    out.write_all(&config_json)?;

    let net = model.net();
    out.write_all(&(net.params.len() as u32).to_le_bytes())?;
    for (name, tensor) in net.names().iter().zip(&net.params) {
        let name_bytes = name.as_bytes();
        out.write_all(&(name_bytes.len() as u32).to_le_bytes())?;
        out.write_all(name_bytes)?;
        let dim = tensor.raw_dim();
        out.write_all(&(dim[0] as u64).to_le_bytes())?;
        out.write_all(&(dim[1] as u64).to_le_bytes())?;
        for &x in tensor.iter() {
            out.write_all(&x.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub(super) fn load(path: &Path) -> Result<InstrumentedModel, ModelError> {
    let file = std::fs::File::open(path)?;
    let mut input = BufReader::new(file);

    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(ModelError::CheckpointFormat("bad magic bytes".into()));
    }
    let version = read_u32(&mut input)?;
    if version != VERSION {
        return Err(ModelError::CheckpointFormat(format!(
            "unsupported version {version}"
        )));
    }

    let config_len = read_u32(&mut input)? as usize;
    let mut config_bytes = vec![0u8; config_len];
    input.read_exact(&mut config_bytes)?;
    let config: ModelConfig = serde_json::from_slice(&config_bytes)
        .map_err(|e| ModelError::CheckpointFormat(format!("config header: {e}")))?;

    let mut model = InstrumentedModel::new(config)?;
    let expected = model.net().params.len();
    let count = read_u32(&mut input)? as usize;
    if count != expected {
        return Err(ModelError::CheckpointFormat(format!(
            "expected {expected} tensors, found {count}"
        )));
    }

    for idx in 0..count {
        let name_len = read_u32(&mut input)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        input.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| ModelError::CheckpointFormat("tensor name not utf-8".into()))?;
        if name != model.net().names()[idx] {
            return Err(ModelError::CheckpointFormat(format!(
                "tensor {idx} named {name:?}, expected {:?}",
                model.net().names()[idx]
            )));
        }
        let rows = read_u64(&mut input)? as usize;
        let cols = read_u64(&mut input)? as usize;
        let expected_dim = model.net().params[idx].raw_dim();
        if (rows, cols) != (expected_dim[0], expected_dim[1]) {
            return Err(ModelError::CheckpointFormat(format!(
                "tensor {name}: shape ({rows},{cols}) does not match config"
            )));
        }
        let mut data = vec![0.0f64; rows * cols];
        let mut buf = [0u8; 8];
        for slot in &mut data {
            input.read_exact(&mut buf)?;
            *slot = f64::from_le_bytes(buf);
        }
        model.net_mut().params[idx] = Array2::from_shape_vec((rows, cols), data)
            .map_err(|e| ModelError::CheckpointFormat(e.to_string()))?;
    }

    Ok(model)
}

fn read_u32(input: &mut impl Read) -> Result<u32, ModelError> {
    let mut buf = [0u8; 4];
    input.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(input: &mut impl Read) -> Result<u64, ModelError> {
    let mut buf = [0u8; 8];
    input.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}
