//! Binary model checkpoints: a config header plus named tensors.
//!
//! Values are written in the model's own precision, so save → load is
//! bit-for-bit. Layout is documented in `docs/formats.md`.

use crate::architecture::{Model, ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"ADSQCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint<T: Scalar>(model: &Model<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    encode(model, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_str(w: &mut impl Write, s: &[u8]) -> std::io::Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s)
}

fn encode<T: Scalar>(model: &Model<T>, w: &mut impl Write) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
    write_str(w, T::DTYPE.as_bytes())?;
    write_str(w, &serde_json::to_vec(&model.config)?)?;
    let tensors = model.params.named_tensors();
    w.write_u32::<LittleEndian>(tensors.len() as u32)?;
    for (name, t) in tensors {
        write_str(w, name.as_bytes())?;
        w.write_u32::<LittleEndian>(t.rows() as u32)?;
        w.write_u32::<LittleEndian>(t.cols() as u32)?;
        for &v in t.data() {
            match T::DTYPE {
                "f32" => w.write_f32::<LittleEndian>(v.as_f64() as f32)?,
                _ => w.write_f64::<LittleEndian>(v.as_f64())?,
            }
        }
    }
    Ok(())
}

/// Loads a checkpoint written with the same scalar type.
pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Model<T>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    decode(&mut BufReader::new(file)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

fn read_str(r: &mut impl Read, limit: usize) -> Result<Vec<u8>> {
    let len = r.read_u32::<LittleEndian>().map_err(|e| Error::io("<checkpoint>", e))? as usize;
    if len > limit {
        return Err(Error::Format(format!("header field of {len} bytes")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(|e| Error::io("<checkpoint>", e))?;
    Ok(buf)
}

fn decode<T: Scalar>(r: &mut impl Read) -> Result<Model<T>> {
    let io = |e| Error::io("<checkpoint>", e);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a model checkpoint".into()));
    }
    let version = r.read_u32::<LittleEndian>().map_err(io)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let dtype = String::from_utf8_lossy(&read_str(r, 16)?).into_owned();
    if dtype != T::DTYPE {
        return Err(Error::Format(format!("checkpoint holds {dtype}, expected {}", T::DTYPE)));
    }
    let config: ModelConfig = serde_json::from_slice(&read_str(r, 1 << 20)?)?;
    config.validate()?;
    let mut params = ModelParams::<T>::zeros(&config)?;
    let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
    let count = r.read_u32::<LittleEndian>().map_err(io)? as usize;
    if count != names.len() {
        return Err(Error::Format(format!("{count} tensors, config implies {}", names.len())));
    }
    for (want, dst) in names.iter().zip(params.tensors_mut()) {
        let name = String::from_utf8_lossy(&read_str(r, 256)?).into_owned();
        let rows = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        let cols = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        if &name != want || (rows, cols) != dst.shape() {
            return Err(Error::Format(format!(
                "tensor {name} ({rows}×{cols}) where {want} {:?} was expected",
                dst.shape()
            )));
        }
        for v in dst.data_mut() {
            *v = match T::DTYPE {
                "f32" => T::of(r.read_f32::<LittleEndian>().map_err(io)? as f64),
                _ => T::of(r.read_f64::<LittleEndian>().map_err(io)?),
            };
        }
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(io)?;
    if !rest.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes", rest.len())));
    }
    Model::from_parts(config, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::architecture::{forward_sequence, Arch};
    use crate::tensor::{init_params, InitScheme};

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        for arch in [Arch::DaLstm, Arch::StackedLstm, Arch::DeepTransitionLstm] {
            let model = Model::<f64>::new(ModelConfig::new(arch, 5, 3, 4, 3).with_seed(21)).unwrap();
            let path = dir.path().join(format!("{}.ckpt", arch.name()));
            save_checkpoint(&model, &path).unwrap();
            let back: Model<f64> = load_checkpoint(&path).unwrap();
            assert_eq!(back.config, model.config);
            for ((_, a), (_, b)) in model.params.named_tensors().into_iter().zip(back.params.named_tensors()) {
                let bits = |t: &crate::Tensor<f64>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(a), bits(b));
            }
            let x = init_params::<f64>(6, 4, 3, InitScheme::Uniform);
            let before = forward_sequence(&model, &x).unwrap().logits;
            let after = forward_sequence(&back, &x).unwrap().logits;
            assert_eq!(before, after);
        }
    }

    #[test]
    fn f32_round_trip_and_dtype_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = Model::<f32>::new(ModelConfig::new(Arch::DaLstm, 3, 2, 2, 2)).unwrap();
        save_checkpoint(&model, &path).unwrap();
        assert_eq!(load_checkpoint::<f32>(&path).unwrap().params, model.params);
        assert!(matches!(load_checkpoint::<f64>(&path), Err(Error::Format(_))));
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = Model::<f64>::new(ModelConfig::new(Arch::StackedLstm, 2, 1, 2, 2)).unwrap();
        save_checkpoint(&model, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(load_checkpoint::<f64>(&path).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        std::fs::write(&path, &extra).unwrap();
        assert!(matches!(load_checkpoint::<f64>(&path), Err(Error::Format(_))));
        let mut bad = bytes;
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(load_checkpoint::<f64>(&path), Err(Error::Format(_))));
    }
}
