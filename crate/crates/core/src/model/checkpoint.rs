//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    b"RAVECKPT"
//! version  u32
//! spec     u32 length + UTF-8 JSON of the model spec
//! step     u64
//! count    u32
//! tensors  count x { u32 name length, name, u32 rank, rank x u64 dims, f64 data }
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::params::{ModelParams, ToyModel, ToyModelSpec};
use crate::error::{RaveError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RAVECKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub spec: ToyModelSpec,
    pub params: ModelParams,
    pub step: u64,
}

impl Checkpoint {
    pub fn from_model(model: &ToyModel, step: u64) -> Self {
        Checkpoint {
            spec: model.spec.clone(),
            params: model.params.clone(),
            step,
        }
    }

    pub fn into_model(self) -> Result<ToyModel> {
        ToyModel::with_params(self.spec, self.params)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let spec = serde_json::to_vec(&self.spec).map_err(std::io::Error::other)?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(spec.len() as u32).to_le_bytes())?;
        w.write_all(&spec)?;
        w.write_all(&self.step.to_le_bytes())?;
        let tensors = self.params.tensors();
        w.write_all(&(tensors.len() as u32).to_le_bytes())?;
        for t in tensors {
            w.write_all(&(t.name.len() as u32).to_le_bytes())?;
            w.write_all(t.name.as_bytes())?;
            w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
            for d in &t.shape {
                w.write_all(&(*d as u64).to_le_bytes())?;
            }
            for x in t.data {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let bad = |msg: String| RaveError::Checkpoint(msg);
        let io = |e: std::io::Error| RaveError::Checkpoint(format!("truncated or unreadable: {e}"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("bad magic".into()));
        }
        let version = read_u32(&mut r).map_err(io)?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let spec_len = read_u32(&mut r).map_err(io)? as usize;
        let mut spec_bytes = vec![0u8; spec_len];
        r.read_exact(&mut spec_bytes).map_err(io)?;
        let spec: ToyModelSpec =
            serde_json::from_slice(&spec_bytes).map_err(|e| bad(format!("spec: {e}")))?;
        spec.validate()?;
        let step = read_u64(&mut r).map_err(io)?;
        let count = read_u32(&mut r).map_err(io)? as usize;

        let mut params = ModelParams::zeros(&spec);
        {
            let mut slots = params.tensors_mut();
            if slots.len() != count {
                return Err(bad(format!(
                    "{count} tensors stored, spec needs {}",
                    slots.len()
                )));
            }
            for slot in &mut slots {
                let name_len = read_u32(&mut r).map_err(io)? as usize;
                let mut name = vec![0u8; name_len];
                r.read_exact(&mut name).map_err(io)?;
                let name =
                    String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8".into()))?;
                if name != slot.name {
                    return Err(bad(format!("expected tensor {}, found {name}", slot.name)));
                }
                let rank = read_u32(&mut r).map_err(io)? as usize;
                let shape = (0..rank)
                    .map(|_| read_u64(&mut r).map(|d| d as usize))
                    .collect::<std::io::Result<Vec<_>>>()
                    .map_err(io)?;
                if shape != slot.shape {
                    return Err(bad(format!(
                        "tensor {name} has shape {shape:?}, expected {:?}",
                        slot.shape
                    )));
                }
                for x in slot.data.iter_mut() {
                    let mut b = [0u8; 8];
                    r.read_exact(&mut b).map_err(io)?;
                    *x = f64::from_le_bytes(b);
                }
            }
        }
        Ok(Checkpoint { spec, params, step })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| RaveError::io(path, e))?;
        self.write_to(std::io::BufWriter::new(f))
            .map_err(|e| RaveError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| RaveError::io(path, e))?;
        Checkpoint::read_from(std::io::BufReader::new(f))
            .map_err(|e| RaveError::Checkpoint(format!("{}: {e}", path.display())))
    }
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AttentionVariant;

    #[test]
    fn rejects_corrupt_input() {
        assert!(Checkpoint::read_from(&b"NOTACKPT"[..]).is_err());
        let spec = ToyModelSpec::new(16, 8, 1, 2, 1, AttentionVariant::Rave);
        let model = ToyModel::new(spec, 0).unwrap();
        let mut buf = Vec::new();
        Checkpoint::from_model(&model, 3)
            .write_to(&mut buf)
            .unwrap();
        assert!(Checkpoint::read_from(&buf[..buf.len() - 1]).is_err());
        let back = Checkpoint::read_from(buf.as_slice()).unwrap();
        assert_eq!(back.step, 3);
    }
}
