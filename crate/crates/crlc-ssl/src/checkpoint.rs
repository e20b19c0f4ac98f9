//! Checkpoint persistence: a little-endian binary container holding a
//! textual config echo and a table of named f32 tensors.

use crate::error::{Error, Result};
use crate::persist::temp_sibling;
use ndarray::{ArrayD, ArrayViewMutD, IxDyn};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"CAMC";
const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub tensors: Vec<(String, ArrayD<f32>)>,
}

impl Checkpoint {
    pub fn new(config: String, tensors: Vec<(String, ArrayD<f32>)>) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        for (name, _) in &tensors {
            if !seen.insert(name.clone()) {
                return Err(Error::invalid(format!("duplicate tensor name {name}")));
            }
        }
        Ok(Self { config, tensors })
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f32>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    /// Copies stored tensors into the given destinations, by name.
    /// Missing names and shape mismatches fail, naming the tensor.
    pub fn load_into(&self, dests: Vec<(String, ArrayViewMutD<'_, f32>)>) -> Result<()> {
        for (name, mut dest) in dests {
            let src = self.get(&name).ok_or_else(|| {
                Error::CheckpointMismatch(format!("tensor {name} missing from checkpoint"))
            })?;
            if src.shape() != dest.shape() {
                return Err(Error::CheckpointMismatch(format!(
                    "tensor {name}: checkpoint shape {:?}, expected {:?}",
                    src.shape(),
                    dest.shape()
                )));
            }
            dest.assign(src);
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.len()).sum()
    }
}

pub fn write_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let tmp = temp_sibling(path);
    let result = (|| -> Result<()> {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let cfg = ck.config.as_bytes();
        w.write_all(&(cfg.len() as u32).to_le_bytes())?;
        w.write_all(cfg)?;
        w.write_all(&(ck.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &ck.tensors {
            let nb = name.as_bytes();
            w.write_all(&(nb.len() as u16).to_le_bytes())?;
            w.write_all(nb)?;
            w.write_all(&[t.ndim() as u8])?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            // Standard layout guarantees iteration matches the recorded
            // row-major shape.
            let c = t.as_standard_layout();
            for &v in c.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    })();
    if result.is_err() {
        let _ = std::fs::remove_file(&tmp);
        return result;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

struct Counted<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Counted<R> {
    fn exact(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        self.inner.read_exact(buf).map_err(|_| Error::Format {
            offset: self.offset,
            message: format!("truncated while reading {what}"),
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let mut b = [0u8; 2];
        self.exact(&mut b, what)?;
        Ok(u16::from_le_bytes(b))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.exact(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = Counted {
        inner: BufReader::new(File::open(path)?),
        offset: 0,
    };
    let mut magic = [0u8; 4];
    r.exact(&mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::format(0, "bad magic, not a checkpoint file"));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let cfg_len = r.u32("config length")? as usize;
    let mut cfg = vec![0u8; cfg_len];
    let cfg_off = r.offset;
    r.exact(&mut cfg, "config text")?;
    let config = String::from_utf8(cfg)
        .map_err(|_| Error::format(cfg_off, "config text is not UTF-8"))?;
    let count = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count);
    for i in 0..count {
        let name_len = r.u16("tensor name length")? as usize;
        let mut nb = vec![0u8; name_len];
        let name_off = r.offset;
        r.exact(&mut nb, "tensor name")?;
        let name = String::from_utf8(nb)
            .map_err(|_| Error::format(name_off, format!("tensor {i} name is not UTF-8")))?;
        let mut rank = [0u8; 1];
        r.exact(&mut rank, "tensor rank")?;
        let mut dims = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            dims.push(r.u32("tensor dimension")? as usize);
        }
        let len: usize = dims.iter().product();
        let mut data = Vec::with_capacity(len);
        let data_off = r.offset;
        for _ in 0..len {
            let mut b = [0u8; 4];
            r.exact(&mut b, "tensor payload")?;
            let v = f32::from_le_bytes(b);
            if !v.is_finite() {
                return Err(Error::format(
                    data_off,
                    format!("non-finite value in tensor {name}"),
                ));
            }
            data.push(v);
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&dims), data)
            .map_err(|e| Error::format(data_off, e.to_string()))?;
        tensors.push((name, arr));
    }
    Checkpoint::new(config, tensors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EncoderArch, ModelParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = ModelParams::<f32>::init(
            &EncoderArch {
                widths: [4, 4, 4, 4, 4, 4],
                kernels: [3, 2, 2, 2, 2, 2],
                groups: [2, 2, 2, 2, 2, 2],
                embed: 4,
            },
            2,
            &mut rng,
        );
        let tensors = params
            .tensors()
            .into_iter()
            .map(|(n, v)| (n, v.to_owned()))
            .collect();
        Checkpoint::new("k = 2\nloss = nt_xent\n".into(), tensors).unwrap()
    }

    #[test]
    fn round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ck = sample();
        write_checkpoint(&ck, &path).unwrap();
        let back = read_checkpoint(&path).unwrap();
        assert_eq!(ck, back);
    }

    #[test]
    fn load_into_round_trips_params() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ck = sample();
        write_checkpoint(&ck, &path).unwrap();
        let back = read_checkpoint(&path).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let arch = EncoderArch {
            widths: [4, 4, 4, 4, 4, 4],
            kernels: [3, 2, 2, 2, 2, 2],
            groups: [2, 2, 2, 2, 2, 2],
            embed: 4,
        };
        let mut fresh = ModelParams::<f32>::init(&arch, 2, &mut rng);
        back.load_into(fresh.tensors_mut()).unwrap();
        for (stored, (_, now)) in ck.tensors.iter().zip(fresh.tensors()) {
            assert_eq!(stored.1.view(), now);
        }
    }

    #[test]
    fn mismatched_shape_names_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ck = sample();
        write_checkpoint(&ck, &path).unwrap();
        let back = read_checkpoint(&path).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut wrong = ModelParams::<f32>::init(
            &EncoderArch {
                widths: [8, 8, 8, 8, 8, 8],
                kernels: [3, 2, 2, 2, 2, 2],
                groups: [2, 2, 2, 2, 2, 2],
                embed: 8,
            },
            2,
            &mut rng,
        );
        let err = back.load_into(wrong.tensors_mut()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("encoder.block1.weight"), "{msg}");
    }

    #[test]
    fn missing_tensor_named() {
        let ck = sample();
        let mut extra = ndarray::ArrayD::<f32>::zeros(IxDyn(&[3]));
        let err = ck
            .load_into(vec![("no.such".into(), extra.view_mut())])
            .unwrap_err();
        assert!(err.to_string().contains("no.such"));
    }

    #[test]
    fn truncated_and_garbage_files_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ck = sample();
        write_checkpoint(&ck, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = dir.path().join("cut.ckpt");
        std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(
            read_checkpoint(&cut),
            Err(Error::Format { .. })
        ));
        let empty = dir.path().join("empty.ckpt");
        std::fs::write(&empty, b"").unwrap();
        assert!(read_checkpoint(&empty).is_err());
        let garbage = dir.path().join("bad.ckpt");
        std::fs::write(&garbage, b"NOPEnope").unwrap();
        let err = read_checkpoint(&garbage).unwrap_err();
        assert!(err.to_string().contains("magic"));
    }

    #[test]
    fn duplicate_names_rejected() {
        let t = ndarray::ArrayD::<f32>::zeros(IxDyn(&[2]));
        assert!(Checkpoint::new(
            String::new(),
            vec![("a".into(), t.clone()), ("a".into(), t)]
        )
        .is_err());
    }
}
