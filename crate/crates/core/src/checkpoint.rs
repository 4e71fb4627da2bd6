//! Single-file model archives.
//!
//! Layout, all integers little-endian:
//! ```text
//! magic   8 bytes  "SQCK0001"
//! version u64      model state version
//! clen    u32      config JSON length, followed by the JSON bytes
//! count   u32      number of parameter arrays
//! per array, in the model's canonical name order:
//!   nlen u32, name bytes, rows u32, cols u32, rows*cols f64 values
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelState, Params};
use crate::scalar::{c, Scalar};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SQCK0001";

pub fn save_checkpoint<T: Scalar>(state: &ModelState<T>, path: &Path) -> Result<()> {
    let file =
        File::create(path).map_err(|e| Error::io(format!("create {}", path.display()), e))?;
    let mut out = BufWriter::new(file);
    let ctx = || format!("write {}", path.display());
    let config_json = serde_json::to_vec(&state.config)?;
    out.write_all(CHECKPOINT_MAGIC)
        .map_err(|e| Error::io(ctx(), e))?;
    out.write_all(&state.version.to_le_bytes())
        .map_err(|e| Error::io(ctx(), e))?;
    out.write_all(&(config_json.len() as u32).to_le_bytes())
        .map_err(|e| Error::io(ctx(), e))?;
    out.write_all(&config_json)
        .map_err(|e| Error::io(ctx(), e))?;
    let arrays = state.params.named_arrays();
    out.write_all(&(arrays.len() as u32).to_le_bytes())
        .map_err(|e| Error::io(ctx(), e))?;
    for (name, array) in arrays {
        out.write_all(&(name.len() as u32).to_le_bytes())
            .map_err(|e| Error::io(ctx(), e))?;
        out.write_all(name.as_bytes())
            .map_err(|e| Error::io(ctx(), e))?;
        let (rows, cols) = array.dim();
        out.write_all(&(rows as u32).to_le_bytes())
            .map_err(|e| Error::io(ctx(), e))?;
        out.write_all(&(cols as u32).to_le_bytes())
            .map_err(|e| Error::io(ctx(), e))?;
        for v in array.iter() {
            out.write_all(&v.to_f64_lossy().to_le_bytes())
                .map_err(|e| Error::io(ctx(), e))?;
        }
    }
    out.flush().map_err(|e| Error::io(ctx(), e))?;
    Ok(())
}

fn read_exact(reader: &mut impl Read, buf: &mut [u8], path: &Path) -> Result<()> {
    reader.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format {
                path: path.display().to_string(),
                detail: "archive truncated".into(),
            }
        } else {
            Error::io(format!("read {}", path.display()), e)
        }
    })
}

fn read_u32(reader: &mut impl Read, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(reader, &mut buf, path)?;
    Ok(u32::from_le_bytes(buf))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<ModelState<T>> {
    let file = File::open(path).map_err(|e| Error::io(format!("open {}", path.display()), e))?;
    let mut reader = BufReader::new(file);
    let mut magic = [0u8; 8];
    read_exact(&mut reader, &mut magic, path)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            path: path.display().to_string(),
            detail: format!("bad magic {magic:?}"),
        });
    }
    let mut version_buf = [0u8; 8];
    read_exact(&mut reader, &mut version_buf, path)?;
    let version = u64::from_le_bytes(version_buf);
    let clen = read_u32(&mut reader, path)? as usize;
    let mut config_json = vec![0u8; clen];
    read_exact(&mut reader, &mut config_json, path)?;
    let config: ModelConfig = serde_json::from_slice(&config_json)?;
    config.validate()?;

    let mut params = Params::<T>::zeros(&config);
    let count = read_u32(&mut reader, path)? as usize;
    let mut named = params.named_arrays_mut();
    if count != named.len() {
        return Err(Error::ParamMismatch(format!(
            "archive holds {count} arrays, config implies {}",
            named.len()
        )));
    }
    for (expected_name, array) in named.iter_mut() {
        let nlen = read_u32(&mut reader, path)? as usize;
        let mut name_buf = vec![0u8; nlen];
        read_exact(&mut reader, &mut name_buf, path)?;
        let name = String::from_utf8(name_buf).map_err(|e| Error::Format {
            path: path.display().to_string(),
            detail: format!("array name not utf-8: {e}"),
        })?;
        if &name != expected_name {
            return Err(Error::ParamMismatch(format!(
                "archive array {name} where {expected_name} was expected"
            )));
        }
        let rows = read_u32(&mut reader, path)? as usize;
        let cols = read_u32(&mut reader, path)? as usize;
        if (rows, cols) != array.dim() {
            return Err(Error::ParamMismatch(format!(
                "{name}: archive shape ({rows},{cols}) vs config {:?}",
                array.dim()
            )));
        }
        let mut value = [0u8; 8];
        for slot in array.iter_mut() {
            read_exact(&mut reader, &mut value, path)?;
            *slot = c::<T>(f64::from_le_bytes(value));
        }
    }
    let mut tail = [0u8; 1];
    if reader
        .read(&mut tail)
        .map_err(|e| Error::io(format!("read {}", path.display()), e))?
        != 0
    {
        return Err(Error::Format {
            path: path.display().to_string(),
            detail: "trailing bytes after last array".into(),
        });
    }
    Ok(ModelState {
        config,
        params,
        version,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn state() -> ModelState<f64> {
        let mut cfg = crate::model::ModelConfig::tiny();
        cfg.embed_dim = 8;
        cfg.num_layers = 1;
        cfg.num_heads = 2;
        cfg.mlp_head_dims = vec![4, 1];
        cfg.seed = 3;
        let mut s = ModelState::init(cfg).unwrap();
        s.version = 17;
        s
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let original = state();
        save_checkpoint(&original, &path).unwrap();
        let loaded: ModelState<f64> = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.config, original.config);
        assert_eq!(loaded.version, 17);
        assert_eq!(loaded.params, original.params);

        let second = dir.path().join("model2.ckpt");
        save_checkpoint(&loaded, &second).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&second).unwrap()
        );
    }

    #[test]
    fn f32_load_converts() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let original = state();
        save_checkpoint(&original, &path).unwrap();
        let loaded: ModelState<f32> = load_checkpoint(&path).unwrap();
        for ((_, a64), (_, a32)) in original
            .params
            .named_arrays()
            .iter()
            .zip(loaded.params.named_arrays())
        {
            for (v64, v32) in a64.iter().zip(a32.iter()) {
                assert!((*v64 as f32 - v32).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&state(), &path).unwrap();

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        let bad = dir.path().join("bad.ckpt");
        std::fs::write(&bad, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint::<f64>(&bad),
            Err(Error::Format { .. })
        ));

        let full = std::fs::read(&path).unwrap();
        let cut = dir.path().join("cut.ckpt");
        std::fs::write(&cut, &full[..full.len() / 2]).unwrap();
        assert!(load_checkpoint::<f64>(&cut).is_err());

        let mut padded = full.clone();
        padded.push(0);
        let long = dir.path().join("long.ckpt");
        std::fs::write(&long, &padded).unwrap();
        assert!(load_checkpoint::<f64>(&long).is_err());
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_checkpoint::<f64>(Path::new("/nonexistent/m.ckpt")).unwrap_err();
        assert!(!err.is_validation());
    }
}
