//! Binary parameter container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "WMFACKPT"
//! version  u32
//! count    u32
//! count x entry:
//!     name_len  u32, name (UTF-8)
//!     dtype     u8   (0 = f64, 1 = f32)
//!     trainable u8
//!     ndim      u32, dims u64 x ndim
//!     values    little-endian, product(dims) x sizeof(dtype)
//! ```
//!
//! f64 entries round-trip bit-exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Param, ParamStore};

pub const MAGIC: &[u8; 8] = b"WMFACKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F64,
    F32,
}

impl DType {
    fn tag(self) -> u8 {
        match self {
            DType::F64 => 0,
            DType::F32 => 1,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(DType::F64),
            1 => Ok(DType::F32),
            other => Err(Error::Format(format!("unknown dtype tag {other}"))),
        }
    }
}

pub fn write_params<W: Write>(store: &ParamStore, mut w: W, dtype: DType) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    let count = u32::try_from(store.len()).map_err(|_| Error::Format("too many parameters".into()))?;
    w.write_all(&count.to_le_bytes())?;
    for (name, p) in store.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[dtype.tag(), u8::from(p.is_trainable())])?;
        w.write_all(&(p.shape().len() as u32).to_le_bytes())?;
        for &d in p.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        match dtype {
            DType::F64 => {
                for v in p.data() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            DType::F32 => {
                for &v in p.data() {
                    w.write_all(&(v as f32).to_le_bytes())?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated checkpoint".into()),
        _ => Error::Io(e),
    })?;
    Ok(buf)
}

pub fn read_params<R: Read>(mut r: R) -> Result<ParamStore> {
    let magic: [u8; 8] = read_array(&mut r)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a parameter checkpoint".into()));
    }
    let version = u32::from_le_bytes(read_array(&mut r)?);
    if version != FORMAT_VERSION {
        return Err(Error::Version(format!(
            "checkpoint format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let count = u32::from_le_bytes(read_array(&mut r)?);
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = u32::from_le_bytes(read_array(&mut r)?) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let [tag, trainable] = read_array::<2, _>(&mut r)?;
        let dtype = DType::from_tag(tag)?;
        let ndim = u32::from_le_bytes(read_array(&mut r)?) as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u64::from_le_bytes(read_array(&mut r)?) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(match dtype {
                DType::F64 => f64::from_le_bytes(read_array(&mut r)?),
                DType::F32 => f64::from(f32::from_le_bytes(read_array(&mut r)?)),
            });
        }
        store.insert(name, Param::new(shape, data, trainable != 0)?)?;
    }
    Ok(store)
}

pub fn save_params(store: &ParamStore, path: impl AsRef<Path>, dtype: DType) -> Result<()> {
    write_params(store, BufWriter::new(File::create(path)?), dtype)
}

pub fn load_params(path: impl AsRef<Path>) -> Result<ParamStore> {
    read_params(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(
            "enc.w",
            Param::new(vec![2, 1, 3, 3], (0..18).map(|i| (i as f64 * 0.1).sin() / 3.0).collect(), true).unwrap(),
        )
        .unwrap();
        s.insert("omega1", Param::new(vec![1], vec![std::f64::consts::PI], false).unwrap())
            .unwrap();
        s.insert("odd", Param::new(vec![2], vec![f64::MIN_POSITIVE, -0.0], true).unwrap())
            .unwrap();
        s
    }

    #[test]
    fn f64_round_trip_is_bit_exact() {
        let store = sample_store();
        let mut buf = Vec::new();
        write_params(&store, &mut buf, DType::F64).unwrap();
        let back = read_params(buf.as_slice()).unwrap();
        for ((na, a), (nb, b)) in store.iter().zip(back.iter()) {
            assert_eq!(na, nb);
            assert_eq!(a.shape(), b.shape());
            assert_eq!(a.is_trainable(), b.is_trainable());
            let bits = |p: &Param| p.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn f32_round_trip_rounds() {
        let store = sample_store();
        let mut buf = Vec::new();
        write_params(&store, &mut buf, DType::F32).unwrap();
        let back = read_params(buf.as_slice()).unwrap();
        let v = back.values("omega1").unwrap()[0];
        assert_eq!(v, f64::from(std::f64::consts::PI as f32));
    }

    #[test]
    fn version_and_magic_checked() {
        let mut buf = Vec::new();
        write_params(&sample_store(), &mut buf, DType::F64).unwrap();
        let mut bad = buf.clone();
        bad[8] = 99;
        assert!(matches!(read_params(bad.as_slice()), Err(Error::Version(_))));
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_params(bad.as_slice()), Err(Error::Format(_))));
        assert!(matches!(read_params(&buf[..buf.len() - 3]), Err(Error::Format(_))));
    }
}
