//! Checkpoint container: config hash, step counter and raw little-endian
//! `f64` parameter payloads. Bit-exact by construction.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::IxDyn;
use thiserror::Error;

use crate::model::SegModel;
use crate::tensor::Arr;

const MAGIC: &[u8; 8] = b"LGCACKPT";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("checkpoint does not match model: {0}")]
    Mismatch(String),
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config_hash: String,
    pub step: u64,
    pub params: Vec<(String, Arr)>,
}

impl Checkpoint {
    pub fn from_model(model: &SegModel, step: u64) -> Checkpoint {
        Checkpoint {
            config_hash: model.config.hash(),
            step,
            params: model
                .params()
                .iter()
                .map(|p| (p.name().to_string(), p.value()))
                .collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        write_str(&mut w, &self.config_hash)?;
        w.write_u64::<LittleEndian>(self.step)?;
        w.write_u32::<LittleEndian>(self.params.len() as u32)?;
        for (name, value) in &self.params {
            write_str(&mut w, name)?;
            w.write_u32::<LittleEndian>(value.ndim() as u32)?;
            for &d in value.shape() {
                w.write_u64::<LittleEndian>(d as u64)?;
            }
            for &v in value.iter() {
                w.write_f64::<LittleEndian>(v)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != VERSION {
            return Err(CheckpointError::BadVersion(version));
        }
        let config_hash = read_str(&mut r)?;
        let step = r.read_u64::<LittleEndian>()?;
        let count = r.read_u32::<LittleEndian>()? as usize;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let name = read_str(&mut r)?;
            let ndim = r.read_u32::<LittleEndian>()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.read_u64::<LittleEndian>()? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(r.read_f64::<LittleEndian>()?);
            }
            params.push((name, Arr::from_shape_vec(IxDyn(&shape), data).unwrap()));
        }
        Ok(Checkpoint {
            config_hash,
            step,
            params,
        })
    }

    /// Installs the stored values into `model`; every parameter must match
    /// by name and shape, in full.
    pub fn apply_to(&self, model: &SegModel) -> Result<(), CheckpointError> {
        if self.params.len() != model.params().len() {
            return Err(CheckpointError::Mismatch(format!(
                "{} stored parameters vs {} in model",
                self.params.len(),
                model.params().len()
            )));
        }
        for ((name, value), param) in self.params.iter().zip(model.params()) {
            if name != param.name() {
                return Err(CheckpointError::Mismatch(format!(
                    "parameter order differs: {name} vs {}",
                    param.name()
                )));
            }
            if value.shape() != param.shape() {
                return Err(CheckpointError::Mismatch(format!(
                    "{name}: stored shape {:?} vs model {:?}",
                    value.shape(),
                    param.shape()
                )));
            }
            param.set_value(value.clone());
        }
        Ok(())
    }
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<(), CheckpointError> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str<R: Read>(r: &mut R) -> Result<String, CheckpointError> {
    let len = r.read_u32::<LittleEndian>()? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| CheckpointError::BadMagic)
}
