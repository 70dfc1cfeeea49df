//! Binary tensor files ("UFT1"), checkpoints, and the helpers that rebuild
//! a parameter tree from a checkpoint's named tensors.
//!
//! UFT1 layout: magic `UFT1`, u32 LE rank, rank x u64 LE extents, u8 dtype
//! (0 = f32, 1 = f64), then raw LE scalars row-major.
//!
//! Checkpoint layout: magic `UFCP`, u32 LE version, u64 LE step, u32 LE
//! config length + UTF-8 config text, u32 LE entry count, then per entry a
//! u32 LE name length, the UTF-8 name, and a UFT1 tensor.

use crate::error::{Error, Result};
use crate::model::{UformerConfig, UformerParams};
use crate::runconfig;
use crate::scalar::{Dtype, Scalar};
use crate::tensor::Tensor;
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const TENSOR_MAGIC: &[u8; 4] = b"UFT1";
const CHECKPOINT_MAGIC: &[u8; 4] = b"UFCP";
const CHECKPOINT_VERSION: u32 = 1;

pub fn write_tensor<S: Scalar>(w: &mut impl Write, t: &Tensor<S>) -> Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for &ext in t.shape() {
        w.write_all(&(ext as u64).to_le_bytes())?;
    }
    w.write_all(&[S::DTYPE as u8])?;
    for &v in t.data() {
        w.write_all(&v.to_le_bytes_vec())?;
    }
    Ok(())
}

pub fn read_tensor<S: Scalar>(r: &mut impl Read) -> Result<Tensor<S>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad tensor magic {magic:?} (expected UFT1)"
        )));
    }
    let mut rank_buf = [0u8; 4];
    r.read_exact(&mut rank_buf)?;
    let rank = u32::from_le_bytes(rank_buf) as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut ext = [0u8; 8];
        r.read_exact(&mut ext)?;
        shape.push(u64::from_le_bytes(ext) as usize);
    }
    let mut dtype_buf = [0u8; 1];
    r.read_exact(&mut dtype_buf)?;
    let dtype = Dtype::from_code(dtype_buf[0])
        .ok_or_else(|| Error::Checkpoint(format!("unknown dtype code {}", dtype_buf[0])))?;
    let numel: usize = shape.iter().product();
    let width = match dtype {
        Dtype::F32 => 4,
        Dtype::F64 => 8,
    };
    let mut raw = vec![0u8; numel * width];
    r.read_exact(&mut raw)?;
    let data: Vec<S> = match dtype {
        Dtype::F32 => raw
            .chunks_exact(4)
            .map(|c| S::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect(),
        Dtype::F64 => raw
            .chunks_exact(8)
            .map(|c| S::from_f64(f64::from_le_bytes(c.try_into().unwrap())))
            .collect(),
    };
    Tensor::new(shape, data)
}

pub fn write_tensor_file<S: Scalar>(path: &Path, t: &Tensor<S>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_tensor(&mut f, t)?;
    f.flush()?;
    Ok(())
}

pub fn read_tensor_file<S: Scalar>(path: &Path) -> Result<Tensor<S>> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_tensor(&mut f)
}

/// A checkpoint: model configuration, training step, and every named tensor
/// (model parameters plus optional `opt.m.*` / `opt.v.*` optimizer moments).
pub struct Checkpoint<S: Scalar> {
    pub config: UformerConfig,
    pub step: u64,
    pub tensors: BTreeMap<String, Tensor<S>>,
}

pub fn save_checkpoint<S: Scalar>(path: &Path, ck: &Checkpoint<S>) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(CHECKPOINT_MAGIC)?;
    f.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    f.write_all(&ck.step.to_le_bytes())?;
    let cfg_text = runconfig::serialize_model_config(&ck.config);
    f.write_all(&(cfg_text.len() as u32).to_le_bytes())?;
    f.write_all(cfg_text.as_bytes())?;
    f.write_all(&(ck.tensors.len() as u32).to_le_bytes())?;
    for (name, tensor) in &ck.tensors {
        f.write_all(&(name.len() as u32).to_le_bytes())?;
        f.write_all(name.as_bytes())?;
        write_tensor(&mut f, tensor)?;
    }
    f.flush()?;
    Ok(())
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<Checkpoint<S>> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let mut u32_buf = [0u8; 4];
    f.read_exact(&mut u32_buf)?;
    let version = u32::from_le_bytes(u32_buf);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let mut u64_buf = [0u8; 8];
    f.read_exact(&mut u64_buf)?;
    let step = u64::from_le_bytes(u64_buf);
    f.read_exact(&mut u32_buf)?;
    let cfg_len = u32::from_le_bytes(u32_buf) as usize;
    let mut cfg_raw = vec![0u8; cfg_len];
    f.read_exact(&mut cfg_raw)?;
    let cfg_text = String::from_utf8(cfg_raw)
        .map_err(|_| Error::Checkpoint("config text is not UTF-8".into()))?;
    let config = runconfig::parse_model_config(&cfg_text)?;
    f.read_exact(&mut u32_buf)?;
    let count = u32::from_le_bytes(u32_buf) as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        f.read_exact(&mut u32_buf)?;
        let name_len = u32::from_le_bytes(u32_buf) as usize;
        let mut name_raw = vec![0u8; name_len];
        f.read_exact(&mut name_raw)?;
        let name = String::from_utf8(name_raw)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let tensor = read_tensor::<S>(&mut f)?;
        if tensors.insert(name.clone(), tensor).is_some() {
            return Err(Error::Checkpoint(format!(
                "tensor '{name}' appears more than once"
            )));
        }
    }
    Ok(Checkpoint {
        config,
        step,
        tensors,
    })
}

/// Snapshot the parameter tree into named tensors.
pub fn params_to_tensors<S: Scalar>(
    params: &UformerParams<Tensor<S>>,
) -> BTreeMap<String, Tensor<S>> {
    let mut map = BTreeMap::new();
    params.visit(&mut |name, _, t| {
        map.insert(name, t.clone());
    });
    map
}

/// Rebuild a parameter tree from checkpoint tensors. Every expected name
/// must be present with the right shape; consumed entries are removed so the
/// caller can inspect the (optimizer-state) remainder.
pub fn params_from_tensors<S: Scalar>(
    config: &UformerConfig,
    tensors: &mut BTreeMap<String, Tensor<S>>,
) -> Result<UformerParams<Tensor<S>>> {
    let mut skeleton = crate::model::build::<S>(config, 0)?;
    let mut missing = Vec::new();
    skeleton.visit_mut(&mut |name, _, slot| match tensors.remove(&name) {
        Some(t) => {
            if t.shape() != slot.shape() {
                missing.push(format!(
                    "{name}: shape {:?} in file, expected {:?}",
                    t.shape(),
                    slot.shape()
                ));
            } else {
                *slot = t;
            }
        }
        None => missing.push(format!("{name}: missing")),
    });
    if !missing.is_empty() {
        return Err(Error::Checkpoint(format!(
            "checkpoint does not match the configuration: {}",
            missing.join("; ")
        )));
    }
    Ok(skeleton)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build, restore, UformerConfig};
    use crate::rng::Rng;

    #[test]
    fn tensor_round_trip_is_lossless() {
        let mut rng = Rng::new(3);
        let t = Tensor::<f32>::from_fn(&[2, 3, 4], |_| rng.next_f64() as f32);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert_eq!(&buf[..4], b"UFT1");
        // rank 3 LE, then extents 2,3,4 as u64 LE, then dtype code 0
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 3);
        assert_eq!(buf[4 + 4 + 24], 0u8);
        let back: Tensor<f32> = read_tensor(&mut buf.as_slice()).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert_eq!(back.data(), t.data());
    }

    #[test]
    fn f64_tensor_round_trip_and_cross_read() {
        let mut rng = Rng::new(4);
        let t = Tensor::<f64>::from_fn(&[5], |_| rng.next_f64());
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let back: Tensor<f64> = read_tensor(&mut buf.as_slice()).unwrap();
        assert_eq!(back.data(), t.data());
        // reading f64 data into an f32 tensor degrades precision but works
        let narrowed: Tensor<f32> = read_tensor(&mut buf.as_slice()).unwrap();
        assert_eq!(narrowed.shape(), t.shape());
    }

    #[test]
    fn checkpoint_round_trip_preserves_forward_bitwise() {
        let cfg = UformerConfig::smoke();
        let params = build::<f32>(&cfg, 11).unwrap();
        let dir = std::env::temp_dir().join("uformer-io-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("round_trip.ckpt");

        save_checkpoint(
            &path,
            &Checkpoint {
                config: cfg.clone(),
                step: 123,
                tensors: params_to_tensors(&params),
            },
        )
        .unwrap();

        let mut ck = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(ck.step, 123);
        assert_eq!(ck.config, cfg);
        let restored_params = params_from_tensors(&cfg, &mut ck.tensors).unwrap();
        assert!(ck.tensors.is_empty(), "no leftover entries expected");

        let mut rng = Rng::new(5);
        let img = Tensor::<f32>::from_fn(&[3, 16, 16], |_| rng.next_f64() as f32);
        let a = restore(&params, &img).unwrap();
        let b = restore(&restored_params, &img).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn missing_parameter_is_reported_by_name() {
        let cfg = UformerConfig::smoke();
        let params = build::<f32>(&cfg, 1).unwrap();
        let mut tensors = params_to_tensors(&params);
        tensors.remove("output_proj.bias");
        let err = params_from_tensors(&cfg, &mut tensors).unwrap_err();
        assert!(err.to_string().contains("output_proj.bias"), "{err}");
    }

    #[test]
    fn truncated_file_is_an_error() {
        let mut buf = Vec::new();
        write_tensor(&mut buf, &Tensor::<f32>::zeros(&[4, 4])).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_tensor::<f32>(&mut buf.as_slice()).is_err());
    }
}
