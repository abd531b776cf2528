//! Binary persistence for trained parameters.
//!
//! Layout: magic "FSIM", u32 version, u32 layer count, then per layer:
//! u32 name length, name bytes, u32 ndims, u32 dims, little-endian f64
//! values. Everything little-endian; byte-for-byte reproducible.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use fedsim_core::params::{Layer, ParameterVector};
use fedsim_core::{Error, Result};

const MAGIC: &[u8; 4] = b"FSIM";
const VERSION: u32 = 1;

pub fn save_model(path: &Path, params: &ParameterVector) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(params.layers().len() as u32).to_le_bytes())?;
    for layer in params.layers() {
        let name = layer.name().as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(layer.shape().len() as u32).to_le_bytes())?;
        for &d in layer.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in layer.values() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Cursor<R> {
    inner: R,
    offset: usize,
}

impl<R: Read> Cursor<R> {
    fn take(&mut self, buf: &mut [u8]) -> Result<()> {
        self.inner.read_exact(buf).map_err(|_| Error::Format {
            offset: self.offset,
            msg: format!("model file truncated at byte {}", self.offset),
        })?;
        self.offset += buf.len();
        Ok(())
    }

    fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.take(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn f64(&mut self) -> Result<f64> {
        let mut b = [0u8; 8];
        self.take(&mut b)?;
        Ok(f64::from_le_bytes(b))
    }
}

pub fn load_model(path: &Path) -> Result<ParameterVector> {
    let mut c = Cursor { inner: BufReader::new(File::open(path)?), offset: 0 };
    let mut magic = [0u8; 4];
    c.take(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad model magic {magic:?}, expected {MAGIC:?}"),
        });
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported model version {version}, expected {VERSION}"),
        });
    }
    let n_layers = c.u32()? as usize;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let name_len = c.u32()? as usize;
        let mut name = vec![0u8; name_len];
        let name_offset = c.offset;
        c.take(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format {
            offset: name_offset,
            msg: "layer name is not valid utf-8".into(),
        })?;
        let ndims = c.u32()? as usize;
        let mut shape = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            shape.push(c.u32()? as usize);
        }
        let count: usize = shape.iter().product();
        let mut values = Vec::with_capacity(count);
        for _ in 0..count {
            values.push(c.f64()?);
        }
        layers.push(Layer::new(name, shape, values)?);
    }
    ParameterVector::new(layers)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParameterVector {
        ParameterVector::new(vec![
            Layer::new("weight", vec![2, 3], vec![0.5, -1.25, 3.0, 0.0, 2.5, -0.75]).unwrap(),
            Layer::new("bias", vec![3], vec![0.1, 0.2, 0.3]).unwrap(),
        ])
        .unwrap()
    }

    #[test]
    fn save_load_roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let params = sample();
        save_model(&path, &params).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back.layers().len(), 2);
        for (a, b) in params.values().zip(back.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(back.layers()[0].name(), "weight");
        assert_eq!(back.layers()[0].shape(), &[2, 3]);
    }

    #[test]
    fn identical_params_serialize_to_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.bin");
        let b = dir.path().join("b.bin");
        save_model(&a, &sample()).unwrap();
        save_model(&b, &sample()).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn bad_magic_and_truncation_are_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        save_model(&path, &sample()).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let mut corrupted = bytes.clone();
        corrupted[0] = b'X';
        std::fs::write(&path, &corrupted).unwrap();
        assert!(matches!(load_model(&path), Err(Error::Format { offset: 0, .. })));

        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_model(&path), Err(Error::Format { .. })));
    }
}
